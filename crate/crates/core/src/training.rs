//! AdamW training with a linear warmup/decay schedule and early stopping on
//! validation macro accuracy.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use steer_nn::{Graph, ParamStore, Scalar};

use crate::error::{Result, SteerError};
use crate::eval::{EvalReport, EVAL_CHUNK};
use crate::model::{encode_inputs, InputSequence, SteerModel, Vocabs};
use crate::sampler::LabeledPair;
use crate::seeds::{self, derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to `epochs / 10`.
    pub warmup_epochs: Option<f64>,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    /// Stop before starting an epoch that would likely overrun this many seconds.
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            warmup_epochs: None,
            lr_start: 1e-7,
            lr_peak: 1e-4,
            lr_end: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            patience: 10,
            time_budget_secs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> f64 {
        self.warmup_epochs.unwrap_or(self.epochs as f64 / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SteerError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be at least 1".into());
        }
        let w = self.warmup();
        if !(w >= 0.0 && w < self.epochs as f64) {
            return err(format!("warmup {w} must lie in [0, {})", self.epochs));
        }
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak && self.lr_end > 0.0) {
            return err("learning rates must be positive with lr_start <= lr_peak".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return err("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Piecewise-linear schedule over fractional epochs `t`:
/// `lr_start -> lr_peak` on `[0, warmup]`, `lr_peak -> lr_end` on `[warmup, epochs]`.
pub fn lr_at(config: &TrainConfig, t: f64) -> Result<f64> {
    let total = config.epochs as f64;
    if !(0.0..=total).contains(&t) {
        return Err(SteerError::Contract(format!("epoch {t} is outside [0, {total}]")));
    }
    let w = config.warmup();
    let lerp = |a: f64, b: f64, s: f64| a * (1.0 - s) + b * s;
    Ok(if t <= w && w > 0.0 {
        lerp(config.lr_start, config.lr_peak, t / w)
    } else {
        lerp(config.lr_peak, config.lr_end, (t - w) / (total - w))
    })
}

/// Decoupled-weight-decay Adam:
/// `p -= lr*wd*p`, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.eps, c.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((_, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let w = value[i].as_f64() * decay - lr * update;
                value[i] = T::lit(w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's batches (dropout active).
    pub train_accuracy: f64,
    pub val_positive: Option<f64>,
    pub val_negative: Option<f64>,
    pub val_macro: f64,
    pub secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_macro: f64,
    pub stop_reason: StopReason,
    pub steps: u64,
    pub num_parameters: usize,
    pub wall_secs: f64,
    pub curves: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopping,
    TimeBudget,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_curves_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "epoch",
            "lr",
            "train_loss",
            "train_accuracy",
            "val_positive",
            "val_negative",
            "val_macro",
            "secs",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.curves {
            csv.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                opt(r.val_positive),
                opt(r.val_negative),
                r.val_macro.to_string(),
                r.secs.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

struct Encoded {
    inputs: Vec<InputSequence>,
    labels: Vec<usize>,
}

fn encode_all(pairs: &[LabeledPair], vocabs: &Vocabs, model: &SteerModel<f32>, what: &str) -> Result<Encoded> {
    let inputs = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            encode_inputs(p, vocabs, model.config())
                .map_err(|e| SteerError::Contract(format!("{what} pair {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        inputs,
        labels: pairs.iter().map(|p| p.label.class()).collect(),
    })
}

fn validation_report(model: &SteerModel<f32>, val: &Encoded, pairs: &[LabeledPair]) -> Result<EvalReport> {
    let preds = model.predict_many(&val.inputs, EVAL_CHUNK)?;
    Ok(EvalReport::from_outcomes(
        pairs.iter().zip(&preds).map(|(p, y)| (p.label, y.label, p.domain.as_str())),
    ))
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the best validation macro accuracy.
pub fn train(
    model: &mut SteerModel<f32>,
    vocabs: &Vocabs,
    train_pairs: &[LabeledPair],
    val_pairs: &[LabeledPair],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(SteerError::Config("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let tr = encode_all(train_pairs, vocabs, model, "training")?;
    let va = encode_all(val_pairs, vocabs, model, "validation")?;
    validation_report(model, &va, val_pairs)?.require_macro()?;

    let mut opt = AdamW::from_config(config);
    let n = tr.inputs.len();
    let batches = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, Vec<steer_nn::Tensor<f32>>)> = None;
    let mut since_best = 0;
    let mut curves = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut last_epoch_secs = 0.0;

    for epoch in 0..config.epochs {
        if let Some(budget) = config.time_budget_secs {
            if epoch > 0 && start.elapsed().as_secs_f64() + last_epoch_secs > budget {
                stop_reason = StopReason::TimeBudget;
                break;
            }
        }
        let epoch_start = Instant::now();
        let mut shuffle_rng = seeds::rng(derive_seed(config.seed, stream::SHUFFLE), epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = seeds::rng(derive_seed(config.seed, stream::DROPOUT), epoch as u64);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let t = epoch as f64 + b as f64 / batches as f64;
            let lr = lr_at(config, t)?;
            let inputs: Vec<InputSequence> = idx.iter().map(|&i| tr.inputs[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| tr.labels[i]).collect();

            let grads = {
                let mut g = Graph::new(model.params());
                let rng: &mut dyn RngCore = &mut dropout_rng;
                let logits = model.forward(&mut g, &inputs, Some(rng))?;
                correct += g
                    .value(logits)
                    .data()
                    .chunks(2)
                    .zip(&labels)
                    .filter(|(row, &y)| usize::from(row[1] > row[0]) == y)
                    .count();
                let loss = g.cross_entropy(logits, &labels)?;
                let value = f64::from(g.value(loss).data()[0]);
                if !value.is_finite() {
                    return Err(SteerError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        lr,
                        loss: value,
                    });
                }
                loss_sum += value * idx.len() as f64;
                g.backward(loss)?
            };
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            opt.step(store, lr);
        }

        let val = validation_report(model, &va, val_pairs)?;
        let val_macro = val.require_macro()?;
        last_epoch_secs = epoch_start.elapsed().as_secs_f64();
        curves.push(EpochRecord {
            epoch,
            lr: lr_at(config, epoch as f64)?,
            train_loss: loss_sum / n as f64,
            train_accuracy: 100.0 * correct as f64 / n as f64,
            val_positive: val.positive_accuracy,
            val_negative: val.negative_accuracy,
            val_macro,
            secs: last_epoch_secs,
        });
        log::info!(
            "epoch {epoch}: loss {:.4}, train acc {:.2}, val macro {val_macro:.2} ({last_epoch_secs:.1}s)",
            loss_sum / n as f64,
            100.0 * correct as f64 / n as f64
        );

        if best.as_ref().is_none_or(|(b, _, _)| val_macro > *b) {
            best = Some((val_macro, epoch, model.params().snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let (best_val_macro, best_epoch, snapshot) = best.expect("at least one epoch runs");
    model.params_mut().restore(&snapshot)?;
    Ok(TrainReport {
        epochs_run: curves.len(),
        best_epoch,
        best_val_macro,
        stop_reason,
        steps: opt.steps(),
        num_parameters: model.num_parameters(),
        wall_secs: start.elapsed().as_secs_f64(),
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SteerConfig, Variant};
    use crate::sampler::Label;
    use steer_nn::Tensor;

    fn paper_schedule() -> TrainConfig {
        TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = paper_schedule();
        assert_eq!(c.warmup(), 30.0);
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(lr_at(&c, 0.0).unwrap(), 1e-7) <= 1e-12);
        assert!(rel(lr_at(&c, 30.0).unwrap(), 1e-4) <= 1e-12);
        assert!(rel(lr_at(&c, 300.0).unwrap(), 1e-7) <= 1e-12);
        assert!(lr_at(&c, -0.1).is_err());
        assert!(lr_at(&c, 300.5).is_err());
        let mid = lr_at(&c, 15.0).unwrap();
        assert!((mid - (1e-7 + 1e-4) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_on_each_side() {
        let c = TrainConfig::default();
        let w = c.warmup();
        let pts: Vec<f64> = (0..=600).map(|i| i as f64 / 10.0).collect();
        for pair in pts.windows(2) {
            let (a, b) = (lr_at(&c, pair[0]).unwrap(), lr_at(&c, pair[1]).unwrap());
            if pair[1] <= w {
                assert!(b >= a);
            } else if pair[0] >= w {
                assert!(b <= a);
            }
        }
    }

    fn one_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[1], vec![value]).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::from_vec(&[1], vec![grad]).unwrap();
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn adamw_hand_computed_steps() {
        // beta1 = beta2 = 0, no decay: update is lr * g / (|g| + eps).
        let mut s = one_param(1.0, 0.5);
        let mut opt = AdamW::new(0.0, 0.0, 1e-8, 0.0);
        opt.step(&mut s, 0.1);
        assert!((value(&s) - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);

        // Default betas, first step: bias correction makes the update lr * g / (|g| + eps).
        let mut s = one_param(2.0, -3.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 0.01);
        assert!((value(&s) - (2.0 + 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);

        // Second step with a new gradient, by hand.
        let mut s = one_param(0.0, 1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 1.0);
        s.iter_mut().next().unwrap().1.grad = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        let before = value(&s);
        opt.step(&mut s, 1.0);
        let m = 0.9 * 0.1 + -0.1;
        let v = 0.999 * 0.001 + 0.001 * 1.0;
        let expected = before - (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((value(&s) - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = one_param(3.0, 0.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        let lr = 0.5;
        let mut expected = 3.0;
        for _ in 0..5 {
            opt.step(&mut s, lr);
            expected *= 1.0 - lr * 0.01;
            assert!((value(&s) - expected).abs() < 1e-15);
        }
    }

    /// Pairs separable by whether the follow-up contains "please".
    fn toy_pairs() -> Vec<LabeledPair> {
        let words = ["alarm", "music", "timer", "weather", "lights", "news", "mom", "maps", "jazz", "photos"];
        (0..20)
            .map(|i| {
                let steer = i % 2 == 0;
                let fol = if steer { format!("please {}", words[i / 2]) } else { format!("now {}", words[i / 2]) };
                LabeledPair {
                    domain: "toy".into(),
                    ..LabeledPair::new(format!("open {}", words[(i + 3) % 10]), fol, if steer { Label::Steering } else { Label::FollowUp })
                }
            })
            .collect()
    }

    fn toy_setup(seed: u64) -> (SteerModel<f32>, Vocabs, TrainConfig) {
        let pairs = toy_pairs();
        let vocabs = Vocabs::build(&pairs, 1).unwrap();
        let cfg = SteerConfig {
            variant: Variant::Steer,
            num_layers: 1,
            d_model: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 8,
            dropout: 0.0,
            token_vocab_size: vocabs.tokens.len(),
            node_vocab_size: vocabs.nodes.len(),
            token_dim: 16,
            position_dim: 16,
            turn_dim: 16,
            node_dim: 16,
            depth_dim: 16,
            sibling_dim: 16,
            ..SteerConfig::default()
        };
        let model = SteerModel::new(cfg, seed).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr_peak: 1e-2,
            lr_start: 1e-4,
            lr_end: 1e-4,
            patience: 30,
            seed,
            ..TrainConfig::default()
        };
        (model, vocabs, tc)
    }

    /// Logistic regression on bag-of-words follow-up features, trained by
    /// plain gradient descent: an independent check that the toy set is
    /// linearly separable.
    fn logistic_oracle_accuracy(pairs: &[LabeledPair]) -> f64 {
        let vocab: Vec<String> = {
            let mut v: Vec<String> = pairs.iter().flat_map(|p| crate::textproc::tokenize(&p.followup_text)).collect();
            v.sort();
            v.dedup();
            v
        };
        let feats: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| {
                let toks = crate::textproc::tokenize(&p.followup_text);
                vocab.iter().map(|w| f64::from(u8::from(toks.contains(w)))).collect()
            })
            .collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.label.class() as f64).collect();
        let mut w = vec![0.0; vocab.len()];
        let mut b = 0.0;
        for _ in 0..500 {
            let mut gw = vec![0.0; w.len()];
            let mut gb = 0.0;
            for (x, y) in feats.iter().zip(&ys) {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += (p - y) * xi;
                }
                gb += p - y;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * g;
            }
            b -= 0.5 * gb;
        }
        let correct = feats
            .iter()
            .zip(&ys)
            .filter(|(x, y)| {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                (z > 0.0) == (**y > 0.5)
            })
            .count();
        correct as f64 / feats.len() as f64
    }

    #[test]
    fn toy_set_is_learned() {
        let pairs = toy_pairs();
        assert_eq!(logistic_oracle_accuracy(&pairs), 1.0);
        let (mut model, vocabs, tc) = toy_setup(1);
        let report = train(&mut model, &vocabs, &pairs, &pairs, &tc).unwrap();
        let eval = crate::eval::evaluate(&model, &vocabs, &pairs).unwrap();
        assert_eq!(eval.macro_accuracy, Some(100.0), "{report:?}");
        // Schedule logged at epoch boundaries matches lr_at.
        for r in &report.curves {
            assert_eq!(r.lr, lr_at(&tc, r.epoch as f64).unwrap());
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let pairs = toy_pairs();
        let run = || {
            let (mut model, vocabs, tc) = toy_setup(7);
            let tc = TrainConfig { epochs: 5, ..tc };
            let r = train(&mut model, &vocabs, &pairs, &pairs, &tc).unwrap();
            (model.params().snapshot(), r.curves.iter().map(|c| (c.train_loss, c.val_macro)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_keeps_best() {
        let pairs = toy_pairs();
        let (mut model, vocabs, tc) = toy_setup(3);
        let tc = TrainConfig { patience: 2, epochs: 40, ..tc };
        let r = train(&mut model, &vocabs, &pairs, &pairs, &tc).unwrap();
        let best = r.curves.iter().map(|c| c.val_macro).fold(f64::MIN, f64::max);
        assert_eq!(r.best_val_macro, best);
        let now = crate::eval::evaluate(&model, &vocabs, &pairs).unwrap().macro_accuracy.unwrap();
        assert_eq!(now, best);
        if r.stop_reason == StopReason::EarlyStopping {
            assert_eq!(r.epochs_run, r.best_epoch + 1 + tc.patience);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let pairs = toy_pairs();
        let (mut model, vocabs, tc) = toy_setup(1);
        for (_, p) in model.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
        }
        match train(&mut model, &vocabs, &pairs, &pairs, &tc) {
            Err(SteerError::NonFiniteLoss { epoch: 0, batch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: Some(60.0), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_start: 1e-3, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
