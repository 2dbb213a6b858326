use super::Tensor;

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` per coordinate.
pub fn finite_difference_gradient<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    point: &Tensor,
    h: f64,
) -> Result<Tensor, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x)?;
        x.data_mut()[i] = orig - h;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over flattened values; 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
