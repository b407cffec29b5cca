use std::f64::consts::PI;

/// Linear warmup to `peak_lr` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn lr_at(step: usize, peak_lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if step >= total || total <= warmup {
        return if step >= total { 0.0 } else { peak_lr };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        assert_eq!(lr_at(2000, 1e-4, 2000, 10000), 1e-4);
        assert_eq!(lr_at(10000, 1e-4, 2000, 10000), 0.0);
        assert!((lr_at(6000, 1e-4, 2000, 10000) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(0, 1e-4, 2000, 10000), 0.0);
        assert!((lr_at(1000, 1e-4, 2000, 10000) - 5e-5).abs() < 1e-18);
    }
}
