//! Central finite-difference gradient checking.

use crate::autodiff::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the reverse-mode gradient of `f` with respect to every element of
/// `leaves` against central differences of step `h`.
pub fn check<F>(leaves: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    leaves.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (leaf, grad) in leaves.iter().zip(&analytic) {
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            leaf.set_data(&probe);
            let up = f()?.item();
            probe[i] = base[i] - h;
            leaf.set_data(&probe);
            let down = f()?.item();
            leaf.set_data(&base);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad[i], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck { max_relative_error: worst, entries })
}
