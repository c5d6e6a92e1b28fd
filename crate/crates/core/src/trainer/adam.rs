use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::ScheduleConfig;
use crate::real::Real;

/// First/second moments and step count of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub t: u64,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Adam state for every parameter. Moments of frozen parameters are kept
/// but untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub moments: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let moments = params
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Moments {
                        t: 0,
                        m: Tensor::zeros(t.shape()),
                        v: Tensor::zeros(t.shape()),
                    },
                )
            })
            .collect();
        Self { moments }
    }

    /// One update of `name` with gradient `grad`.
    pub fn apply(&mut self, params: &mut ParamStore<F>, name: &str, grad: &Tensor<F>, s: &ScheduleConfig) {
        let (Some(mom), Some(p)) = (self.moments.get_mut(name), params.get_mut(name)) else {
            return;
        };
        mom.t += 1;
        let (b1, b2) = (F::lit(s.adam_beta1), F::lit(s.adam_beta2));
        let c1 = F::one() - F::lit(s.adam_beta1.powi(mom.t as i32));
        let c2 = F::one() - F::lit(s.adam_beta2.powi(mom.t as i32));
        let (lr, eps) = (F::lit(s.lr), F::lit(s.adam_eps));
        let m = mom.m.data_mut();
        let v = mom.v.data_mut();
        for (((pv, &g), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (F::one() - b1) * g;
            *vv = b2 * *vv + (F::one() - b2) * g * g;
            let mh = *mv / c1;
            let vh = *vv / c2;
            *pv -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store);
        let s = ScheduleConfig::full();
        adam.apply(&mut store, "w", &Tensor::vector(vec![0.5, -3.0]), &s);
        let w = store.get("w").unwrap().data();
        // bias-corrected first step is lr·g/(|g| + eps)
        assert!((w[0] - (1.0 - 2e-4 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 2e-4 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.moments["w"].t, 1);
    }
}
