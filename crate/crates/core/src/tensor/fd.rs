use super::Tensor;

/// Central-difference gradient of a scalar function at `point`:
/// `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    point: &Tensor<f64>,
    step: f64,
) -> Tensor<f64> {
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let up = f(&probe);
        probe.data_mut()[i] = x - step;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad).expect("gradient shape follows point")
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps near-zero gradients from
/// turning round-off into large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Largest elementwise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
