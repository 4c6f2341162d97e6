/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
///
/// # Panics
///
/// If `step` or `warmup` is zero.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    assert!(step >= 1, "learning-rate steps start at 1");
    assert!(warmup >= 1, "warmup must be positive");
    let s = step as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}
