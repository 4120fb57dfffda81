//! Shared finite-difference harness for integration tests. The oracle side
//! only ever calls forward evaluations, so it stays independent of the
//! backward implementation it judges.

use pedcast::nn::gradcheck::{fd_grad_at, rel_err, spread_coords};
use pedcast::nn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Worst relative error between analytic and central-difference gradients,
/// probing `n_coords` coordinates of every input of the built expression.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    n_coords: usize,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> (String, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars);
    assert_eq!(g.value(root).len(), 1, "{name}: root must be scalar");
    let grads = g.backward(root).expect("backward");

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(gt) => gt.data().to_vec(),
            None => vec![0.0; t.len()],
        };
        let coords = spread_coords(t.len(), n_coords);
        let fd = fd_grad_at(t.data(), &coords, FD_STEP, |x| {
            let mut g2 = Graph::new();
            let vars2: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, tj)| {
                    let tt = if j == i {
                        Tensor::from_vec(tj.shape(), x.to_vec()).unwrap()
                    } else {
                        tj.clone()
                    };
                    g2.leaf(tt, false)
                })
                .collect();
            let r = build(&mut g2, &vars2);
            g2.value(r).data()[0]
        });
        for (&c, &fdv) in coords.iter().zip(&fd) {
            worst = worst.max(rel_err(analytic[c], fdv));
        }
    }
    (name.to_string(), worst)
}

fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks sit far from the FD step.
fn rng_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.15..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// FD-checks every differentiable op. Returns (op name, worst rel err).
pub fn check_every_op() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb934);
    let mut out = Vec::new();

    // Weighted sums turn vector outputs into a scalar that exercises every
    // output coordinate with a distinct sensitivity.
    let weights = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
    };

    {
        let a = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = Tensor::from_vec(&[3, 4], weights(&mut rng, 12)).unwrap();
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
        ] {
            let wc = w.clone();
            out.push(check_op(name, &[a.clone(), b.clone()], 8, &move |g, v| {
                let y = match f {
                    0 => g.add(v[0], v[1]).unwrap(),
                    1 => g.sub(v[0], v[1]).unwrap(),
                    _ => g.mul(v[0], v[1]).unwrap(),
                };
                let wv = g.input(wc.clone());
                let m = g.mul(y, wv).unwrap();
                g.sum(m)
            }));
        }
    }

    {
        let x = rng_tensor_off_zero(&mut rng, &[4, 5]);
        let w = Tensor::from_vec(&[4, 5], weights(&mut rng, 20)).unwrap();
        out.push(check_op("scale", &[x.clone()], 8, &{
            let w = w.clone();
            move |g, v| {
                let y = g.scale(v[0], -1.7);
                let wv = g.input(w.clone());
                let m = g.mul(y, wv).unwrap();
                g.sum(m)
            }
        }));
        out.push(check_op("relu", &[x.clone()], 12, &{
            let w = w.clone();
            move |g, v| {
                let y = g.relu(v[0]);
                let wv = g.input(w.clone());
                let m = g.mul(y, wv).unwrap();
                g.sum(m)
            }
        }));
        out.push(check_op("sum", &[x.clone()], 8, &|g, v| g.sum(v[0])));
        out.push(check_op("mean", &[x.clone()], 8, &|g, v| g.mean(v[0])));
        out.push(check_op("reshape", &[x], 8, &{
            let w = w.clone();
            move |g, v| {
                let y = g.reshape(v[0], &[2, 10]).unwrap();
                let wv = g.input(w.reshaped(&[2, 10]).unwrap());
                let m = g.mul(y, wv).unwrap();
                g.sum(m)
            }
        }));
    }

    {
        let a = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let w = Tensor::from_vec(&[3, 5], weights(&mut rng, 15)).unwrap();
        out.push(check_op("matmul", &[a, b], 10, &move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let x = rng_tensor(&mut rng, &[6, 3], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[3], -0.5, 0.5);
        let w = Tensor::from_vec(&[6, 3], weights(&mut rng, 18)).unwrap();
        out.push(check_op("add_bias", &[x, b], 8, &move |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let x = rng_tensor(&mut rng, &[7], -1.0, 1.0);
        let wl = rng_tensor(&mut rng, &[7, 4], -0.7, 0.7);
        let bl = rng_tensor(&mut rng, &[4], -0.3, 0.3);
        let w = Tensor::from_vec(&[4], weights(&mut rng, 4)).unwrap();
        out.push(check_op("linear", &[x, wl, bl], 8, &move |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    for (name, stride, pad) in [("conv2d_s1", 1usize, 1usize), ("conv2d_s2", 2, 1)] {
        let x = rng_tensor(&mut rng, &[6, 5, 3], -1.0, 1.0);
        let kw = rng_tensor(&mut rng, &[3, 3, 3, 4], -0.6, 0.6);
        let kb = rng_tensor(&mut rng, &[4], -0.3, 0.3);
        let oh = (6 + 2 * pad - 3) / stride + 1;
        let ow = (5 + 2 * pad - 3) / stride + 1;
        let w = Tensor::from_vec(&[oh, ow, 4], weights(&mut rng, oh * ow * 4)).unwrap();
        out.push(check_op(name, &[x, kw, kb], 10, &move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    for (name, k, stride) in [("deconv2d_s2", 2usize, 2usize), ("deconv2d_s4", 4, 4)] {
        let x = rng_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
        let kw = rng_tensor(&mut rng, &[k, k, 2, 3], -0.6, 0.6);
        let kb = rng_tensor(&mut rng, &[3], -0.3, 0.3);
        let (oh, ow) = ((3 - 1) * stride + k, (4 - 1) * stride + k);
        let w = Tensor::from_vec(&[oh, ow, 3], weights(&mut rng, oh * ow * 3)).unwrap();
        out.push(check_op(name, &[x, kw, kb], 10, &move |g, v| {
            let y = g.deconv2d(v[0], v[1], v[2], stride).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let x = rng_tensor(&mut rng, &[5, 4, 3], -1.0, 1.0);
        let w = Tensor::from_vec(&[3], weights(&mut rng, 3)).unwrap();
        out.push(check_op("global_avg_pool", &[x], 10, &move |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let a = rng_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[3, 2, 3], -1.0, 1.0);
        let w = Tensor::from_vec(&[3, 2, 5], weights(&mut rng, 30)).unwrap();
        out.push(check_op("concat", &[a, b], 8, &move |g, v| {
            let y = g.concat(&[v[0], v[1]]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let a = rng_tensor(&mut rng, &[4], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[4], -1.0, 1.0);
        let w = Tensor::from_vec(&[2, 4], weights(&mut rng, 8)).unwrap();
        out.push(check_op("stack_rows", &[a, b], 8, &move |g, v| {
            let y = g.stack_rows(&[v[0], v[1]]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let x = rng_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let w = Tensor::from_vec(&[3, 5], weights(&mut rng, 15)).unwrap();
        out.push(check_op("softmax", &[x], 10, &move |g, v| {
            let y = g.softmax_rows(v[0]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let col = rng_tensor(&mut rng, &[4], -1.0, 1.0);
        let row = rng_tensor(&mut rng, &[3], -1.0, 1.0);
        let w = Tensor::from_vec(&[4, 3], weights(&mut rng, 12)).unwrap();
        out.push(check_op("outer_sum", &[col, row], 7, &move |g, v| {
            let y = g.outer_sum(v[0], v[1]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        // Errors stay inside (-0.8, 0.8): away from the |e| = 1 kink.
        let p = rng_tensor(&mut rng, &[3, 4], -0.4, 0.4);
        let t = rng_tensor(&mut rng, &[3, 4], -0.4, 0.4);
        let w = Tensor::from_vec(&[3, 4], weights(&mut rng, 12)).unwrap();
        out.push(check_op("smooth_l1", &[p, t], 8, &move |g, v| {
            let y = g.smooth_l1(v[0], v[1]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
        let p2 = rng_tensor(&mut rng, &[6], 1.5, 3.0);
        let t2 = rng_tensor(&mut rng, &[6], -0.2, 0.2);
        out.push(check_op("smooth_l1_linear_branch", &[p2, t2], 6, &|g, v| {
            let y = g.smooth_l1(v[0], v[1]).unwrap();
            g.sum(y)
        }));
    }

    {
        let z = rng_tensor(&mut rng, &[8], -3.0, 3.0);
        let t = Tensor::from_vec(&[8], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[8], weights(&mut rng, 8)).unwrap();
        out.push(check_op("bce_with_logits", &[z, t], 8, &move |g, v| {
            let y = g.bce_with_logits(v[0], v[1]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        // Distinct, well-separated values keep the argmax stable under FD.
        let mut vals: Vec<f64> = (0..12 * 3).map(|i| (i as f64) * 0.11).collect();
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        for i in (1..vals.len()).rev() {
            let j = r2.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::from_vec(&[12, 3], vals).unwrap();
        let w = Tensor::from_vec(&[4, 3], weights(&mut rng, 12)).unwrap();
        out.push(check_op("max_pool_segments", &[x], 12, &move |g, v| {
            let y = g.max_pool_segments(v[0], &[5, 0, 3, 4]).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let x = rng_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let w = Tensor::from_vec(&[4, 4, 2], weights(&mut rng, 32)).unwrap();
        out.push(check_op("scatter_cells", &[x], 6, &move |g, v| {
            let y = g.scatter_cells(v[0], &[(0, 1), (2, 3), (3, 0)], 4, 4).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    {
        let feat = rng_tensor(&mut rng, &[6, 6, 3], -1.0, 1.0);
        // Interior, border-clamped, and off-grid samples.
        let samples = vec![
            (1.3, 2.7),
            (0.2, 0.4),
            (5.9, 5.1),
            (3.45, 1.15),
            (-0.5, 3.3),
            (2.8, 7.2),
            (4.05, 4.95),
            (1.75, 5.6),
            (3.3, 0.25),
        ];
        let w = Tensor::from_vec(&[3, 3, 3], weights(&mut rng, 27)).unwrap();
        out.push(check_op("roi_align", &[feat], 12, &move |g, v| {
            let y = g.roi_align(v[0], &samples, 3).unwrap();
            let wv = g.input(w.clone());
            let m = g.mul(y, wv).unwrap();
            g.sum(m)
        }));
    }

    out
}
