use std::collections::{BTreeMap, BTreeSet};

use super::TrainError;
use crate::config::ini::{IniError, Section};
use crate::model::ParamStore;

/// Noam schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub d_model: usize,
    pub warmup_steps: u64,
    pub factor: f64,
}

impl Schedule {
    /// Desk-scale preset: warmup 400, factor 1.
    pub fn desk(d_model: usize) -> Self {
        Self {
            d_model,
            warmup_steps: 400,
            factor: 1.0,
        }
    }

    /// d = 768, warmup 25000, factor 1.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 768,
            warmup_steps: 25_000,
            factor: 1.0,
        }
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("schedule");
        s.set("d_model", self.d_model)
            .set("warmup_steps", self.warmup_steps)
            .set("factor", format!("{:?}", self.factor));
        s
    }

    pub fn from_section(s: &Section, defaults: Schedule) -> Result<Self, IniError> {
        s.only(&["d_model", "warmup_steps", "factor"])?;
        let sched = Self {
            d_model: s.get_or("d_model", defaults.d_model)?,
            warmup_steps: s.get_or("warmup_steps", defaults.warmup_steps)?,
            factor: s.get_or("factor", defaults.factor)?,
        };
        if sched.d_model == 0 || sched.warmup_steps == 0 || !(sched.factor > 0.0) {
            return Err(s.invalid("factor", "d_model, warmup_steps and factor must be positive"));
        }
        Ok(sched)
    }
}

/// `factor · d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`.
pub fn noam_lr(step: u64, sched: &Schedule) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::StepZero);
    }
    let s = step as f64;
    let w = sched.warmup_steps as f64;
    Ok(sched.factor * (sched.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Scales all gradients by `max_norm / ‖g‖₂` when the global norm exceeds
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Vec<f64>>, max_norm: f64) -> f64 {
    let grads: Vec<&mut Vec<f64>> = grads.into_iter().collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-9;

/// Parameters, Adam moments for the trainable subset, and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub frozen: BTreeSet<String>,
    pub seed: u64,
}

impl TrainState {
    /// Fresh optimizer state; moments exist exactly for unfrozen names.
    pub fn new(params: ParamStore, frozen: BTreeSet<String>, seed: u64) -> Self {
        let mut m = BTreeMap::new();
        for (name, t) in params.iter() {
            if !frozen.contains(name) {
                m.insert(name.to_string(), vec![0.0; t.numel()]);
            }
        }
        let v = m.clone();
        Self {
            params,
            m,
            v,
            step: 0,
            frozen,
            seed,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// One bias-corrected Adam update of every unfrozen parameter. Frozen
/// parameters are never touched, whatever `grads` holds for them.
pub fn adam_step(state: &mut TrainState, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<(), TrainError> {
    for name in state.m.keys() {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moments are created in pairs");
        let g = &grads[name];
        let p = state
            .params
            .get_mut(name)
            .expect("moments only exist for stored parameters")
            .data_mut();
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn noam_fixtures() {
        let s = Schedule::paper_scale();
        let peak = noam_lr(25_000, &s).unwrap();
        assert!((peak - 1.0 / (768.0f64 * 25_000.0).sqrt()).abs() < 1e-18);
        assert!((peak - 2.2821773e-4).abs() < 1e-11, "{peak}");
        let first = noam_lr(1, &s).unwrap();
        assert!((first - 9.128709e-9).abs() < 1e-14, "{first}");
        assert!(noam_lr(24_999, &s).unwrap() < peak);
        assert!(noam_lr(25_001, &s).unwrap() < peak);
        assert!(matches!(noam_lr(0, &s), Err(TrainError::StepZero)));
    }

    #[test]
    fn noam_matches_closed_form_everywhere() {
        let s = Schedule::desk(64);
        for step in 1..2000u64 {
            let expected = if step <= 400 {
                step as f64 / (8.0 * 8000.0)
            } else {
                1.0 / (8.0 * (step as f64).sqrt())
            };
            assert!((noam_lr(step, &s).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![0.6, 0.8]];
        assert_eq!(clip_global_norm(&mut g, 5.0), 1.0);
        assert_eq!(g[0], vec![0.6, 0.8]);
        let mut g = vec![vec![6.0], vec![8.0]];
        assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        let mut g = vec![vec![0.0; 3]];
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g[0], vec![0.0; 3]);
    }

    fn scalar_state(frozen: &[&str]) -> TrainState {
        let params = ParamStore::from_named(vec![
            ("a".into(), Tensor::scalar(1.0)),
            ("b".into(), Tensor::scalar(2.0)),
        ]);
        TrainState::new(params, frozen.iter().map(|s| s.to_string()).collect(), 0)
    }

    #[test]
    fn adam_hand_example() {
        let mut s = scalar_state(&[]);
        let grads = BTreeMap::from([("a".to_string(), vec![1.0]), ("b".to_string(), vec![0.0])]);
        adam_step(&mut s, &grads, 0.1).unwrap();
        let a = s.params.get("a").unwrap().item();
        assert!((a - (1.0 - 0.1 / (1.0 + 1e-9))).abs() < 1e-15);
        assert_eq!(s.params.get("b").unwrap().item(), 2.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = scalar_state(&["b"]);
        assert!(!s.m.contains_key("b"));
        let grads = BTreeMap::from([("a".to_string(), vec![1.0]), ("b".to_string(), vec![5.0])]);
        for _ in 0..10 {
            adam_step(&mut s, &grads, 0.1).unwrap();
        }
        assert_eq!(s.params.get("b").unwrap().item().to_bits(), 2.0f64.to_bits());
        assert_eq!(s.trainable_count(), 1);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_state(&[]);
        let grads = BTreeMap::from([("a".to_string(), vec![1.0]), ("b".to_string(), vec![f64::NAN])]);
        let err = adam_step(&mut s, &grads, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(s.step, 0);
        assert_eq!(s.params.get("a").unwrap().item(), 1.0);
    }
}
