//! SGD, momentum and Adam with per-element state that can be reset filter by filter.
//!
//! Adam keeps one step counter per element rather than a global `t`, so a filter whose
//! state was reset restarts its own bias correction. With no resets the two are identical.

use crate::error::{Error, Result};
use crate::network::{Gradients, Model, ParamKind, PruneMask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn momentum() -> Self {
        Rule::Momentum { beta: 0.9 }
    }

    pub fn adam() -> Self {
        Rule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::Momentum { .. } => "momentum",
            Rule::Adam { .. } => "adam",
        }
    }
}

/// Auxiliary state for one parameter tensor. Unused vectors stay empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Slot {
    /// Velocity (momentum) or first moment (Adam).
    pub first: Vec<f64>,
    /// Second moment (Adam).
    pub second: Vec<f64>,
    /// Adam per-element step counters.
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub rule: Rule,
    pub slots: Vec<Slot>,
    kinds: Vec<ParamKind>,
}

impl Optimizer {
    pub fn new(rule: Rule, model: &Model) -> Self {
        let slots = model
            .parameters()
            .iter()
            .map(|p| {
                let n = p.len();
                match rule {
                    Rule::Sgd => Slot::default(),
                    Rule::Momentum { .. } => Slot {
                        first: vec![0.0; n],
                        ..Slot::default()
                    },
                    Rule::Adam { .. } => Slot {
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                        steps: vec![0; n],
                    },
                }
            })
            .collect();
        Optimizer {
            rule,
            slots,
            kinds: model.param_kinds(),
        }
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    fn check(&self, model: &Model) -> Result<()> {
        let params = model.parameters();
        let ok = self.kinds == model.param_kinds()
            && params.len() == self.slots.len()
            && params.iter().zip(&self.slots).all(|(p, s)| {
                [s.first.len(), s.second.len(), s.steps.len()]
                    .iter()
                    .all(|&l| l == 0 || l == p.len())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer state does not mirror the model parameters".into()))
        }
    }

    /// One update with learning rate `lr`. Elements of masked filters, and their state,
    /// are left untouched.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, mask: &PruneMask, lr: f64) -> Result<()> {
        self.check(model)?;
        mask.check_against(model)?;
        let chunks: Vec<Option<usize>> = self.kinds.iter().map(|&k| model.filter_chunk(k)).collect();
        let kinds = self.kinds.clone();
        let rule = self.rule;
        let mut params = model.parameters_mut();
        if grads.tensors.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradient tensors for {} parameters",
                grads.tensors.len(),
                params.len()
            )));
        }
        for (pi, param) in params.iter_mut().enumerate() {
            let g = grads.tensors[pi].data();
            if g.len() != param.len() {
                return Err(Error::Config(format!(
                    "gradient for {} has {} elements, parameter has {}",
                    kinds[pi].name(),
                    g.len(),
                    param.len()
                )));
            }
            let w = param.data_mut();
            let slot = &mut self.slots[pi];
            let live_ranges: Vec<std::ops::Range<usize>> = match (kinds[pi].filter_layer(), chunks[pi]) {
                (Some(l), Some(chunk)) => mask.layers()[l]
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(f, _)| f * chunk..(f + 1) * chunk)
                    .collect(),
                _ => vec![0..w.len()],
            };
            for r in live_ranges {
                update(rule, lr, &mut w[r.clone()], &g[r.clone()], slot, r);
            }
        }
        Ok(())
    }

    /// Zeroes the state of every element belonging to the selected filters: conv weight
    /// rows, bias, batch-norm affine parameters and, when `include_next_layer` is set, the
    /// slices of the consuming layer that read those filters' output channels.
    pub fn reset_slots(
        &mut self,
        model: &Model,
        selection: &[(usize, usize)],
        include_next_layer: bool,
    ) -> Result<()> {
        self.check(model)?;
        for &(l, f) in selection {
            if l >= model.conv.len() || f >= model.conv[l].filters() {
                return Err(Error::Config(format!("filter ({l}, {f}) out of range")));
            }
        }
        for &(l, f) in selection {
            for (pi, &kind) in self.kinds.iter().enumerate() {
                if kind.filter_layer() == Some(l) {
                    let chunk = model.filter_chunk(kind).expect("filter-indexed");
                    clear(&mut self.slots[pi], f * chunk..(f + 1) * chunk);
                }
            }
            if include_next_layer {
                let (kind, idx) = model.consumer_slices(l, f);
                let pi = self
                    .kinds
                    .iter()
                    .position(|&k| k == kind)
                    .expect("consumer parameter present");
                for i in idx {
                    clear(&mut self.slots[pi], i..i + 1);
                }
            }
        }
        Ok(())
    }
}

fn clear(slot: &mut Slot, r: std::ops::Range<usize>) {
    if !slot.first.is_empty() {
        slot.first[r.clone()].fill(0.0);
    }
    if !slot.second.is_empty() {
        slot.second[r.clone()].fill(0.0);
    }
    if !slot.steps.is_empty() {
        slot.steps[r].fill(0);
    }
}

fn update(rule: Rule, lr: f64, w: &mut [f64], g: &[f64], slot: &mut Slot, r: std::ops::Range<usize>) {
    match rule {
        Rule::Sgd => {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
        Rule::Momentum { beta } => {
            let v = &mut slot.first[r];
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = beta * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        Rule::Adam { beta1, beta2, eps } => {
            let m = &mut slot.first[r.clone()];
            let v = &mut slot.second[r.clone()];
            let t = &mut slot.steps[r];
            for i in 0..w.len() {
                t[i] += 1;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / (1.0 - beta1.powi(t[i] as i32));
                let vhat = v[i] / (1.0 - beta2.powi(t[i] as i32));
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate as a function of (fractional) epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Fixed(f64),
    /// `base` until the first milestone; afterwards the rate of the last milestone `<= epoch`.
    Step { base: f64, milestones: Vec<(f64, f64)> },
    /// Triangular wave from `start` up to `start + amplitude` at half-period and back.
    Cyclic { period: f64, amplitude: f64, start: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        match self {
            LrSchedule::Fixed(lr) => *lr,
            LrSchedule::Step { base, milestones } => milestones
                .iter().rfind(|(e, _)| *e <= epoch)
                .map_or(*base, |(_, lr)| *lr),
            LrSchedule::Cyclic {
                period,
                amplitude,
                start,
            } => {
                let x = (epoch / period).fract();
                start + amplitude * (1.0 - (2.0 * x - 1.0).abs())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self {
            LrSchedule::Fixed(lr) => *lr <= 0.0,
            LrSchedule::Step { base, milestones } => {
                *base <= 0.0
                    || milestones.iter().any(|(_, lr)| *lr <= 0.0)
                    || milestones.windows(2).any(|w| w[0].0 >= w[1].0)
            }
            LrSchedule::Cyclic {
                period,
                amplitude,
                start,
            } => *period <= 0.0 || *amplitude < 0.0 || *start <= 0.0,
        };
        if bad {
            Err(Error::Config(format!("learning-rate schedule {self:?} is not positive everywhere")))
        } else {
            Ok(())
        }
    }
}
