use crate::tensor::Real;

use super::layers::softmax;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn clamped_log<T: Real>(p: T) -> T {
    let eps = T::from_f64c(PROB_EPS);
    p.max(eps).min(T::one() - eps).ln()
}

/// Binary cross-entropy on the positive-class probability of a two-way
/// softmax. Returns the loss and its gradient with respect to the logit pair
/// `[negative, positive]`.
pub fn cross_entropy_loss<T: Real>(prob: T, y: bool) -> (T, [T; 2]) {
    let loss = if y {
        -clamped_log(prob)
    } else {
        -clamped_log(T::one() - prob)
    };
    let target = if y { T::one() } else { T::zero() };
    let grad_pos = prob - target;
    (loss, [-grad_pos, grad_pos])
}

/// K-way softmax cross-entropy taken directly from logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], target: usize) -> (T, Vec<T>) {
    assert!(target < logits.len(), "target class out of range");
    let mut probs = softmax(logits);
    let loss = -clamped_log(probs[target]);
    probs[target] -= T::one();
    (loss, probs)
}

/// Summed smooth-L1 loss and its gradient with respect to `pred`.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    let half = T::from_f64c(0.5);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < T::one() {
                loss += half * d * d;
                d
            } else {
                loss += d.abs() - half;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}
