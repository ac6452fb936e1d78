use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_at(10, 110, 10, 0.4), 0.4);
        assert!(lr_at(110, 110, 10, 0.4).abs() < 1e-15);
        assert!((lr_at(60, 110, 10, 0.4) - 0.2).abs() < 1e-15);
        assert_eq!(lr_at(0, 110, 10, 0.4), 0.0);
        assert!((lr_at(5, 110, 10, 0.4) - 0.2).abs() < 1e-15);
        assert_eq!(lr_at(0, 100, 0, 0.3), 0.3);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let (total, warm, base) = (1000, 100, 1e-3);
        let left = lr_at(warm - 1, total, warm, base);
        let right = lr_at(warm + 1, total, warm, base);
        assert!((left - base).abs() <= base / warm as f64 + 1e-18);
        assert!((right - base).abs() < 1e-7);
        assert_eq!(lr_at(warm, total, warm, base), base);
    }

    #[test]
    fn monotone_decay() {
        let mut prev = f64::INFINITY;
        for s in 20..=200 {
            let v = lr_at(s, 200, 20, 1.0);
            assert!(v <= prev);
            prev = v;
        }
    }
}
