//! Hot numeric kernels behind the graph ops: tiled matrix multiply and
//! im2col/col2im for convolution. Everything is plain contiguous f64; the
//! inner loops are written so LLVM can vectorize them.

/// c[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Output spatial side for a padded strided convolution.
pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

/// Unrolls an HWC image into a (oh*ow) x (kh*kw*c) matrix so convolution
/// becomes one matmul against a (kh*kw*c) x oc weight matrix. Out-of-bounds
/// taps read zero.
pub fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let row_len = kh * kw * c;
    let mut cols = vec![0.0; oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * kw + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back onto the image.
pub fn col2im_acc(
    dcols: &[f64],
    dx: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let row_len = kh * kw * c;
    debug_assert_eq!(dcols.len(), oh * ow * row_len);
    debug_assert_eq!(dx.len(), h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * kw + kx) * c;
                    for i in 0..c {
                        dx[dst + i] += row[src + i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 6);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((fast[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trips() {
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(transpose(&t, 4, 3), a);
        assert_eq!(t[0 * 3 + 2], a[2 * 4 + 0]);
    }

    #[test]
    fn im2col_center_tap_reads_the_pixel() {
        // 3x3 single-channel image, 3x3 kernel, pad 1: row for the center
        // output pixel holds the whole image.
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let cols = im2col(&x, 3, 3, 1, 3, 3, 1, 1);
        let center = &cols[4 * 9..5 * 9];
        assert_eq!(center, x.as_slice());
        // Corner output row zero-pads the out-of-bounds taps.
        let corner = &cols[0..9];
        assert_eq!(corner, &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0][..] as &[f64]);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, c, kh, kw, s, p) = (5, 4, 3, 3, 3, 2, 1);
        let x: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols = im2col(&x, h, w, c, kh, kw, s, p);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &mut back, h, w, c, kh, kw, s, p);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
