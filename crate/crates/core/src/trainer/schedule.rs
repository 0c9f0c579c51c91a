use super::TrainConfig;

/// Linear warm-up from 0 to `peak_lr` over `warmup_steps`, then linear decay to 0 at `steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup_steps, cfg.steps);
    if step >= total {
        return 0.0;
    }
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    cfg.peak_lr * (total - step) as f64 / (total - w) as f64
}

/// KL weight: 0 before `lambda_breakpoint`, `lambda` from it on.
pub fn lambda_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.lambda_breakpoint {
        0.0
    } else {
        cfg.lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 2000,
            warmup_steps: 200,
            lambda_breakpoint: 100,
            peak_lr: 5e-4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_endpoints() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(200, &c), 5e-4);
        assert_eq!(lr_schedule(2000, &c), 0.0);
        assert!((lr_schedule(100, &c) - 2.5e-4).abs() < 1e-18);
        assert!((lr_schedule(1100, &c) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn lambda_steps_at_breakpoint() {
        let c = cfg();
        assert_eq!(lambda_schedule(0, &c), 0.0);
        assert_eq!(lambda_schedule(99, &c), 0.0);
        assert_eq!(lambda_schedule(100, &c), 0.1);
        assert_eq!(lambda_schedule(5000, &c), 0.1);
        let c0 = TrainConfig { lambda_breakpoint: 0, ..c };
        assert_eq!(lambda_schedule(0, &c0), 0.1);
    }

    #[test]
    fn full_horizon_shape() {
        let c = TrainConfig {
            steps: 400_000,
            warmup_steps: 32_000,
            lambda_breakpoint: 10_000,
            peak_lr: 5e-4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(32_000, &c), 5e-4);
        assert_eq!(lambda_schedule(9_999, &c), 0.0);
        assert_eq!(lambda_schedule(10_000, &c), 0.1);
    }
}
