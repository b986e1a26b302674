/// Learning rate at `step`: linear ramp from 0 to `peak` over the first
/// `warmup_frac * total_steps` steps, then linear decay to 0 at
/// `total_steps`. Steps beyond `total_steps` get 0.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let (step, total) = (step as f64, total_steps as f64);
    let warmup = warmup_frac * total;
    if step < warmup {
        peak * step / warmup
    } else {
        peak * (total - step) / (total - warmup)
    }
}
