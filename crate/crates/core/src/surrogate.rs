//! The clipped surrogate term shared by GCPO and GRPO.

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` and its derivative with respect to `r`.
///
/// On the clipped branch the derivative is zero. At a clip boundary both
/// branches coincide and the unclipped derivative is returned.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// True if `ratio` lies within `margin` of either clip boundary.
pub fn near_clip_boundary(ratio: f64, epsilon: f64, margin: f64) -> bool {
    (ratio - (1.0 - epsilon)).abs() < margin || (ratio - (1.0 + epsilon)).abs() < margin
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
