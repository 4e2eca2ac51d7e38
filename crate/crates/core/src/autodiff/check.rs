use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Coordinates sampled per parameter tensor.
pub const GRAD_CHECK_MAX_COORDS: usize = 256;

/// Compares analytic gradients against central differences.
///
/// Returns `max |analytic − numeric| / max(1, |numeric|)` over at most
/// [`GRAD_CHECK_MAX_COORDS`] seeded coordinates per tensor. Existing
/// gradient buffers on `params` are cleared first and left holding the
/// analytic gradient.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("step {h:e} outside [1e-7, 1e-3]")));
    }
    params.iter().for_each(Tensor::zero_grad);
    let loss = f(params)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    loss.backward()?;
    drop(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in params {
        let analytic = p.grad_or_zeros();
        let n = p.len();
        let mut coords: Vec<usize> = if n <= GRAD_CHECK_MAX_COORDS {
            (0..n).collect()
        } else {
            sample(&mut rng, n, GRAD_CHECK_MAX_COORDS).into_vec()
        };
        coords.sort_unstable();
        for i in coords {
            let original = p.values()[i];
            p.values_mut()[i] = original + h;
            let plus = f(params).map(|t| t.item());
            p.values_mut()[i] = original - h;
            let minus = f(params).map(|t| t.item());
            p.values_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
