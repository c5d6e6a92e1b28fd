use crate::config::ScheduleConfig;

/// Active stage and loss weights for one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub stage: u8,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

fn warmup(step: u64, start: u64, end: u64, upper: f64) -> f64 {
    if step <= start {
        0.0
    } else {
        upper * (1.0f64).min((step - start) as f64 / (end - start) as f64)
    }
}

/// Stage 1 (mel reconstruction only) up to and including `stage1_end`;
/// afterwards the weighted stage-2 objective with linear KL warm-ups.
pub fn loss_weights(step: u64, s: &ScheduleConfig) -> LossWeights {
    if step <= s.stage1_end {
        return LossWeights {
            stage: 1,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        };
    }
    LossWeights {
        stage: 2,
        alpha: s.alpha,
        beta: s.beta,
        gamma: warmup(step, s.kl_start_para, s.kl_end_para, s.kl_upper_para),
        delta: warmup(step, s.kl_start_sem, s.kl_end_sem, s.kl_upper_sem),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn algorithm_constants() {
        let s = ScheduleConfig::full();
        let w = loss_weights(5000, &s);
        assert_eq!(w.stage, 1);
        assert_eq!((w.gamma, w.delta), (0.0, 0.0));
        let w = loss_weights(25_000, &s);
        assert_eq!(w.stage, 2);
        assert_eq!(w.gamma, 1e-5 * 5000.0 / 10_000.0);
        assert_eq!(w.delta, 5e-6);
        let w = loss_weights(40_000, &s);
        assert_eq!((w.gamma, w.delta), (1e-5, 1e-5));
        assert_eq!(loss_weights(10_000, &s).stage, 1);
        assert_eq!(loss_weights(10_001, &s).stage, 2);
        assert_eq!(loss_weights(20_000, &s).gamma, 0.0);
        assert_eq!((w.alpha, w.beta), (1.0, 1e-5));
    }

    proptest! {
        #[test]
        fn piecewise_linear_continuous_and_flat(step in 10_001u64..60_000) {
            let s = ScheduleConfig::full();
            let a = loss_weights(step, &s);
            let b = loss_weights(step + 1, &s);
            // one-step increments never exceed the warm-up slope
            let slope = s.kl_upper_para / (s.kl_end_para - s.kl_start_para) as f64;
            prop_assert!((b.gamma - a.gamma).abs() <= slope * (1.0 + 1e-9));
            prop_assert!(b.gamma >= a.gamma);
            if step >= s.kl_end_para {
                prop_assert_eq!(a, b);
            }
        }
    }
}
