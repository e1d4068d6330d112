//! Central finite-difference utilities for verifying analytic gradients.

/// Central-difference gradient of `f` at `point` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let fp = f(&x);
        x[i] = point[i] - h;
        let fm = f(&x);
        x[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Worst mismatch between two gradient vectors under a mixed
/// absolute/relative tolerance: entry `i` passes when
/// `|a_i - n_i| <= atol + rtol * max(|a_i|, |n_i|)`.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Option<Mismatch> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: Option<Mismatch> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let bound = atol + rtol * a.abs().max(n.abs());
        if diff > bound {
            let excess = diff / bound;
            if worst.as_ref().is_none_or(|w| excess > w.excess) {
                worst = Some(Mismatch {
                    index: i,
                    analytic: a,
                    numeric: n,
                    excess,
                });
            }
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub excess: f64,
}

/// Asserts analytic and central-difference gradients agree. Panics with the
/// worst offending entry on failure.
pub fn assert_gradients_match<F>(f: F, point: &[f64], analytic: &[f64], h: f64, rtol: f64, atol: f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_diff_grad(f, point, h);
    if let Some(m) = worst_mismatch(analytic, &numeric, rtol, atol) {
        panic!(
            "gradient mismatch at index {}: analytic {:e}, numeric {:e} (excess {:.1}x)",
            m.index, m.analytic, m.numeric, m.excess
        );
    }
}
