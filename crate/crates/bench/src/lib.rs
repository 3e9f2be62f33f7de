//! Inputs shared by the benches.

use vcamba_core::Tensor;

/// Deterministic values in `[-1, 1)` without pulling in an RNG.
pub fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 * 0.618_034).fract() * 2.0) - 1.0).collect();
    Tensor::new(data, shape).expect("length matches")
}

/// A clip in `[0, 1]` of shape `[frames, 3, h, w]`.
pub fn clip(frames: usize, h: usize, w: usize) -> Tensor {
    ramp(&[frames, 3, h, w]).add_scalar(1.0).scale(0.5)
}

/// Centered square masks of shape `[frames, 1, h, w]`.
pub fn square_masks(frames: usize, h: usize, w: usize) -> Tensor {
    let inside = |r: usize, c: usize| (h / 4..3 * h / 4).contains(&r) && (w / 4..3 * w / 4).contains(&c);
    let data = (0..frames * h * w).map(|i| f64::from(u8::from(inside(i % (h * w) / w, i % w)))).collect();
    Tensor::new(data, &[frames, 1, h, w]).expect("length matches")
}
