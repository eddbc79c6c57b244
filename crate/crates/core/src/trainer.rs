//! Adam optimization with a two-group learning-rate schedule.
//!
//! Visual-frontend parameters (`visual.*`) train at `lr_visual`, everything
//! else at `lr_other`; both decay by a fixed rate after every epoch.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::model::{Model, Sample};
use crate::tensor::io::snap_f32;
use crate::tokens;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment buffers plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: usize,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One bias-corrected Adam update. `lr_for` maps a parameter name to its
/// learning rate.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter `{name}` at step {}",
                state.step
            )));
        }
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let lr = lr_for(name);
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / bias1;
            let vhat = v[i] / bias2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Round every parameter to its nearest `f32` value. The trainer does this
/// after each update so the float32 checkpoint format loses nothing and
/// save -> load -> forward is bit-identical.
pub fn snap_params(params: &mut ParamSet) {
    for (_, p) in params.iter_mut() {
        for v in p.data.iter_mut() {
            *v = snap_f32(*v);
        }
    }
}

/// Two-group learning rates and their shared per-epoch decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_visual: f64,
    pub lr_other: f64,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr_visual: 5e-5,
            lr_other: 1e-4,
            decay: 0.8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.lr_visual <= 0.0 || self.lr_other <= 0.0 {
            return Err(Error::Argument("learning rates must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Argument(format!(
                "decay {} must lie in (0, 1]",
                self.decay
            )));
        }
        Ok(())
    }

    /// Rates in force during `epoch` (0-based): decayed once per elapsed epoch.
    pub fn rates_at(&self, epoch: usize) -> (f64, f64) {
        let f = self.decay.powi(epoch as i32);
        (self.lr_visual * f, self.lr_other * f)
    }
}

pub fn is_visual_param(name: &str) -> bool {
    name.starts_with("visual.")
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 8,
            epochs: 10,
            seed: 0,
            grad_clip: None,
        }
    }
}

/// One loss-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr_visual: f64,
    pub lr_other: f64,
}

/// Serialize loss-log rows as `epoch,step,loss,lr_visual,lr_other` CSV.
pub fn loss_log_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("epoch,step,loss,lr_visual,lr_other\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.loss, r.lr_visual, r.lr_other
        ));
    }
    out
}

/// Epoch-granular training driver.
pub struct Trainer<'d> {
    pub model: Model,
    samples: &'d [Sample],
    schedule: Schedule,
    options: TrainOptions,
    adam: AdamState,
    epoch: usize,
    global_step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model,
        samples: &'d [Sample],
        schedule: Schedule,
        options: TrainOptions,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("training dataset is empty".into()));
        }
        if options.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        schedule.validate()?;
        Ok(Trainer {
            model,
            samples,
            schedule,
            options,
            adam: AdamState::new(),
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Deterministic sample order for an epoch, derived from (seed, epoch).
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Run one epoch over the whole dataset and return its loss-log rows.
    pub fn run_epoch(&mut self) -> Result<Vec<StepLog>> {
        let (lr_visual, lr_other) = self.schedule.rates_at(self.epoch);
        let order = self.epoch_order(self.epoch);
        // Dropout noise lives on its own stream so shuffling and masking
        // cannot interleave.
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        dropout_rng.set_stream(1_000_000 + self.epoch as u64);

        let mut rows = Vec::new();
        for chunk in order.chunks(self.options.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &self.samples[i]).collect();
            let mut fwd = self.model.batch_forward(&batch, Some(&mut dropout_rng))?;
            fwd.graph.backward(fwd.loss)?;
            let mut grads = fwd.bound.gradients(&fwd.graph);
            if let Some(limit) = self.options.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            adam_step(&mut self.model.params, &grads, &mut self.adam, |name| {
                if is_visual_param(name) {
                    lr_visual
                } else {
                    lr_other
                }
            })?;
            snap_params(&mut self.model.params);
            self.global_step += 1;
            rows.push(StepLog {
                epoch: self.epoch,
                step: self.global_step,
                loss: fwd.loss_value(),
                lr_visual,
                lr_other,
            });
        }
        self.epoch += 1;
        Ok(rows)
    }
}

/// Scale all gradients so their global L2 norm is at most `limit`.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, limit: f64) {
    let norm2: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = norm2.sqrt();
    if norm > limit && norm > 0.0 {
        let scale = limit / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Convenience wrapper: train for `options.epochs` and return the loss log.
pub fn train(
    model: Model,
    samples: &[Sample],
    schedule: Schedule,
    options: TrainOptions,
) -> Result<(Model, Vec<StepLog>)> {
    let mut trainer = Trainer::new(model, samples, schedule, options)?;
    let mut rows = Vec::new();
    for _ in 0..options.epochs {
        rows.extend(trainer.run_epoch()?);
    }
    Ok((trainer.model, rows))
}

/// Fraction of non-pad target positions whose argmax logit matches the
/// target under teacher forcing.
pub fn teacher_forced_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let logits = model.teacher_logits(s)?;
        let targets = &s.tokens[1..];
        for (row, &target) in targets.iter().enumerate() {
            if target == tokens::PAD {
                continue;
            }
            let v = logits.vector(row);
            let mut best = 0usize;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            total += 1;
            if best == target {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Argument("no scoreable positions".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", vec![1], vec![value]);
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = single_param(0.75);
        let mut state = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        adam_step(&mut params, &grads, &mut state, |_| 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data[0], 0.75);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_hand_value() {
        // g = 1, lr = 0.1: update = -0.1 / (1 + 1e-8)
        let mut params = single_param(0.0);
        let mut state = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        adam_step(&mut params, &grads, &mut state, |_| 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.get("w").unwrap().data[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn three_steps_on_scalar_quadratic_match_hand_computation() {
        // f(x) = x^2, g = 2x, x0 = 1, lr = 0.1; values computed by hand.
        let expected = [0.9000000005, 0.8004122286917928, 0.7015862729460303];
        let mut params = single_param(1.0);
        let mut state = AdamState::new();
        for &want in &expected {
            let x = params.get("w").unwrap().data[0];
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), vec![2.0 * x]);
            adam_step(&mut params, &grads, &mut state, |_| 0.1).unwrap();
            let got = params.get("w").unwrap().data[0];
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = single_param(0.0);
        let mut state = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        let err = adam_step(&mut params, &grads, &mut state, |_| 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn schedule_decays_exactly_per_epoch() {
        let s = Schedule::default();
        let (v0, o0) = s.rates_at(0);
        let (v1, o1) = s.rates_at(1);
        assert_eq!(v1, 0.8 * v0);
        assert_eq!(o1, 0.8 * o0);
    }

    #[test]
    fn schedule_rejects_bad_values() {
        assert!(Schedule {
            lr_visual: 0.0,
            ..Schedule::default()
        }
        .validate()
        .is_err());
        assert!(Schedule {
            decay: 1.5,
            ..Schedule::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), vec![3.0, 0.0]);
        grads.insert("b".to_string(), vec![4.0]);
        clip_global_norm(&mut grads, 1.0);
        let norm2: f64 = grads.values().flatten().map(|g| g * g).sum();
        assert!((norm2.sqrt() - 1.0).abs() < 1e-12);
    }
}
