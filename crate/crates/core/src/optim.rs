//! SGD, AdamW, the warmup + cosine learning-rate schedule and per-group
//! gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named set of parameters sharing a clipping ceiling.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub params: Vec<&'a mut Tensor>,
    pub clip_cap: Option<f64>,
}

impl<'a> ParamGroup<'a> {
    pub fn new(name: impl Into<String>, params: Vec<&'a mut Tensor>) -> Self {
        ParamGroup {
            name: name.into(),
            params,
            clip_cap: None,
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::invalid("clip cap", format!("{cap} for group '{}'", self.name)));
        }
        self.clip_cap = Some(cap);
        Ok(self)
    }

    fn grads(&self) -> Result<Vec<&[f64]>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| Error::MissingGradient {
                    group: self.name.clone(),
                    index: i,
                })
            })
            .collect()
    }

    /// Joint L2 norm of all gradients in the group.
    pub fn grad_norm(&self) -> Result<f64> {
        Ok(self
            .grads()?
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }
}

fn check_unique(groups: &[ParamGroup]) -> Result<()> {
    for (i, g) in groups.iter().enumerate() {
        if groups[..i].iter().any(|o| o.name == g.name) {
            return Err(Error::invalid("param groups", format!("duplicate name '{}'", g.name)));
        }
    }
    Ok(())
}

/// Plain gradient descent: `θ ← θ − lr·g`. Gradients are left in place.
pub fn sgd_step(group: &mut ParamGroup, lr: f64) -> Result<()> {
    group.grads()?;
    for p in group.params.iter_mut() {
        let g = p.grad().map(|g| g.to_vec()).unwrap_or_default();
        p.data_mut().iter_mut().zip(&g).for_each(|(x, gi)| *x -= lr * gi);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias-corrected moments. Moment
/// buffers are keyed by group name and parameter position.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    state: BTreeMap<String, Vec<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, groups: &mut [ParamGroup]) -> Result<()> {
        check_unique(groups)?;
        for g in groups.iter() {
            g.grads()?;
        }
        self.t = self.t.checked_add(1).ok_or(Error::StepOverflow)?;
        let t = i32::try_from(self.t).map_err(|_| Error::StepOverflow)?;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for group in groups.iter_mut() {
            let slots = self.state.entry(group.name.clone()).or_default();
            if slots.len() != group.params.len() {
                *slots = group
                    .params
                    .iter()
                    .map(|p| Moments {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    })
                    .collect();
            }
            for (p, mom) in group.params.iter_mut().zip(slots.iter_mut()) {
                let g = p.grad().map(|g| g.to_vec()).unwrap_or_default();
                for (j, x) in p.data_mut().iter_mut().enumerate() {
                    *x -= c.lr * c.weight_decay * *x;
                    mom.m[j] = c.beta1 * mom.m[j] + (1.0 - c.beta1) * g[j];
                    mom.v[j] = c.beta2 * mom.v[j] + (1.0 - c.beta2) * g[j] * g[j];
                    let mhat = mom.m[j] / bc1;
                    let vhat = mom.v[j] / bc2;
                    *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl ScheduleSpec {
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            base_lr,
            warmup_lr: 1e-5,
            warmup_epochs: 4,
            total_epochs,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::invalid(
                "schedule",
                format!("warmup {} must be below total {}", self.warmup_epochs, self.total_epochs),
            ));
        }
        if self.warmup_lr > self.base_lr {
            return Err(Error::invalid("schedule", "warmup_lr exceeds base_lr"));
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay to `min_lr`.
/// `epoch` may be fractional to support per-iteration updates.
pub fn cosine_warmup_lr(spec: &ScheduleSpec, epoch: f64) -> Result<f64> {
    spec.validate()?;
    let total = spec.total_epochs as f64;
    if !(0.0..total).contains(&epoch) {
        return Err(Error::EpochOutOfRange {
            epoch: epoch.floor().max(0.0) as usize,
            total: spec.total_epochs,
        });
    }
    let w = spec.warmup_epochs as f64;
    if epoch < w {
        return Ok(spec.warmup_lr + (spec.base_lr - spec.warmup_lr) * epoch / w);
    }
    let tau = (epoch - w) / (total - w);
    Ok(spec.min_lr + (spec.base_lr - spec.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * tau).cos()))
}

/// Rescale the group's gradients so their joint norm does not exceed the
/// cap. Returns the applied factor (1.0 when untouched).
pub fn clip_group_norm(group: &mut ParamGroup) -> Result<f64> {
    let cap = group
        .clip_cap
        .ok_or_else(|| Error::invalid("clip cap", format!("group '{}' has none", group.name)))?;
    let norm = group.grad_norm()?;
    if norm <= cap {
        return Ok(1.0);
    }
    let mut factor = cap / norm;
    loop {
        let scaled: f64 = group
            .grads()?
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| (v * factor) * (v * factor))
            .sum::<f64>()
            .sqrt();
        if scaled <= cap {
            break;
        }
        factor *= 1.0 - f64::EPSILON;
    }
    for p in group.params.iter_mut() {
        if let Some(g) = p.grad_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_grad(data: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::vector(data.to_vec()).unwrap().with_grad();
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn sgd_examples() {
        let mut a = with_grad(&[1.0, 2.0], &[0.0, 0.0]);
        sgd_step(&mut ParamGroup::new("a", vec![&mut a]), 0.5).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);

        let mut a = with_grad(&[1.0], &[2.0]);
        sgd_step(&mut ParamGroup::new("a", vec![&mut a]), 0.1).unwrap();
        assert!((a.data()[0] - 0.8).abs() < 1e-15);

        let mut b = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            sgd_step(&mut ParamGroup::new("b", vec![&mut b]), 0.1),
            Err(Error::MissingGradient { .. })
        ));
    }

    #[test]
    fn sgd_two_steps_equal_one_double_step() {
        let mut a = with_grad(&[0.3, -1.0], &[0.7, 0.2]);
        let mut b = a.clone();
        sgd_step(&mut ParamGroup::new("a", vec![&mut a]), 0.1).unwrap();
        sgd_step(&mut ParamGroup::new("a", vec![&mut a]), 0.1).unwrap();
        sgd_step(&mut ParamGroup::new("b", vec![&mut b]), 0.2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_examples() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = with_grad(&[0.5], &[-3.0]);
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
        let expected = 0.5 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);

        let mut p = with_grad(&[0.5], &[0.0]);
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
        assert_eq!(p.data(), &[0.5]);

        let mut p = with_grad(&[1.0], &[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1.0,
            weight_decay: 1e-4,
            ..Default::default()
        });
        opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
        assert!((p.data()[0] - 0.9999).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adamw_rejects_duplicate_groups() {
        let mut a = with_grad(&[1.0], &[1.0]);
        let mut b = with_grad(&[1.0], &[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let r = opt.step(&mut [
            ParamGroup::new("x", vec![&mut a]),
            ParamGroup::new("x", vec![&mut b]),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleSpec::new(2e-3, 20);
        assert_eq!(cosine_warmup_lr(&s, 0.0).unwrap(), 1e-5);
        assert!((cosine_warmup_lr(&s, 4.0).unwrap() - 2e-3).abs() < 1e-18);
        assert!((cosine_warmup_lr(&s, 12.0).unwrap() - 1e-3).abs() < 1e-15);
        assert!(matches!(
            cosine_warmup_lr(&s, 20.0),
            Err(Error::EpochOutOfRange { .. })
        ));
        let bad = ScheduleSpec::new(2e-3, 4);
        assert!(cosine_warmup_lr(&bad, 0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut a = with_grad(&[0.0, 0.0], &[0.06, 0.08]);
        let mut g = ParamGroup::new("a", vec![&mut a]).with_cap(0.5).unwrap();
        assert_eq!(clip_group_norm(&mut g).unwrap(), 1.0);
        assert!((g.grad_norm().unwrap() - 0.1).abs() < 1e-15);

        let mut a = with_grad(&[0.0], &[1.2]);
        let mut b = with_grad(&[0.0], &[1.6]);
        let mut g = ParamGroup::new("ab", vec![&mut a, &mut b]).with_cap(0.5).unwrap();
        let f = clip_group_norm(&mut g).unwrap();
        assert!((f - 0.25).abs() < 1e-12);
        let n = g.grad_norm().unwrap();
        assert!(n <= 0.5 && (n - 0.5).abs() < 1e-15);

        let mut z = with_grad(&[1.0], &[0.0]);
        let mut g = ParamGroup::new("z", vec![&mut z]).with_cap(0.5).unwrap();
        assert_eq!(clip_group_norm(&mut g).unwrap(), 1.0);
        assert_eq!(z.grad().unwrap(), &[0.0]);

        let mut z = with_grad(&[1.0], &[0.0]);
        assert!(ParamGroup::new("z", vec![&mut z]).with_cap(0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_cap(
            g in prop::collection::vec(-1e3f64..1e3, 1..40),
            cap in 1e-8f64..10.0,
        ) {
            let mut t = with_grad(&vec![0.0; g.len()], &g);
            let mut grp = ParamGroup::new("g", vec![&mut t]).with_cap(cap).unwrap();
            clip_group_norm(&mut grp).unwrap();
            prop_assert!(grp.grad_norm().unwrap() <= cap);
        }

        #[test]
        fn schedule_continuous_and_monotone(base in 1e-4f64..1e-1, total in 6usize..120) {
            let s = ScheduleSpec::new(base, total);
            let left = cosine_warmup_lr(&s, 4.0 - 1e-9).unwrap();
            let at = cosine_warmup_lr(&s, 4.0).unwrap();
            prop_assert!((left - at).abs() < 1e-9);
            let mut prev = at;
            for e in 5..total {
                let lr = cosine_warmup_lr(&s, e as f64).unwrap();
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }

        #[test]
        fn adamw_zero_betas_is_sign_sgd(g in -10f64..10.0, x in -5f64..5.0) {
            prop_assume!(g.abs() > 1e-3);
            let mut p = with_grad(&[x], &[g]);
            let mut opt = AdamW::new(AdamWConfig {
                lr: 0.1, weight_decay: 0.0, beta1: 0.0, beta2: 0.0, eps: 1e-8,
            });
            opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
            // the only deviation is the eps term in the denominator
            let tol = 0.1 * 1e-8 / g.abs() + 1e-15;
            prop_assert!((p.data()[0] - (x - 0.1 * g.signum())).abs() <= tol);
        }
    }
}
