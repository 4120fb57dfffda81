//! Central finite-difference gradient checking. The estimate here is built
//! purely from forward evaluations, so it is an oracle independent of the
//! backward pass it validates.

/// Central-difference derivative of `f` with respect to the listed
/// coordinates of `x0`.
pub fn fd_grad_at<F>(x0: &[f64], coords: &[usize], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x);
            x[i] = orig - step;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Relative error with a small-magnitude floor so near-zero gradients are
/// judged on absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Deterministically spread `n` coordinate picks over a buffer of `len`
/// elements (all of them when the buffer is small).
pub fn spread_coords(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|i| i * len / n).collect()
}
