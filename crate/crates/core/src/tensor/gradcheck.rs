use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `|a - b| / max(|a|, |b|, floor)`: relative error with an absolute floor.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
