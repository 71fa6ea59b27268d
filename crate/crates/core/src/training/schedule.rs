use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay reaching 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::config(format!("schedule step {step} beyond total {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
