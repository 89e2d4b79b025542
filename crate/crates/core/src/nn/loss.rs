use crate::num::Real;

use super::NnError;

/// Root-mean-square error over all entries and its gradient with respect
/// to `pred`. At zero loss the gradient is taken as zero.
pub fn rms_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>), NnError> {
    if pred.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if pred.len() != target.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = T::lit(pred.len() as f64);
    let sq: T = pred.iter().zip(target).map(|(p, t)| (*p - *t) * (*p - *t)).sum();
    let loss = (sq / n).sqrt();
    let grad = if loss > T::zero() {
        let scale = (n * loss).recip();
        pred.iter().zip(target).map(|(p, t)| (*p - *t) * scale).collect()
    } else {
        vec![T::zero(); pred.len()]
    };
    Ok((loss, grad))
}
