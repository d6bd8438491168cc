//! Adam optimization with per-epoch linear learning-rate decay and early
//! stopping on validation NDCG@10.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, pad_truncate, Dataset, SplitExample, Splits};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_split, EvalConfig, MetricsReport};
use crate::model::{cross_entropy_loss, Model};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::{Mode, Real, Tape};

/// Examples per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the number of worker threads.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs between validations.
    pub eval_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Supervise every prefix of a training sequence instead of only its end.
    pub sliding_window: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            max_epochs: 200,
            patience: 20,
            batch_size: 128,
            seed: 42,
            eval_every: 1,
            clip_norm: None,
            sliding_window: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                p.push(format!("train.{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            p.push(format!("train.adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.max_epochs == 0 {
            p.push("train.max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            p.push("train.patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            p.push("train.eval_every must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push(format!("train.clip_norm must be positive, got {c}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// `lr · (1 − epoch / max_epochs)` for a 0-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * (1.0 - epoch as f64 / cfg.max_epochs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with L2 weight decay folded into the
/// gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Training(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in {} at index {bad}",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::of(lr), T::of(cfg.adam_eps), T::of(cfg.weight_decay));
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + wd * *p;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Summed loss and summed gradients over `examples`, each with its own
/// dropout stream.
fn chunk_gradients<T: Real>(
    model: &Model<T>,
    examples: &[(&SplitExample, RngState)],
    mode: Mode,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Vec<T>> = model.params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
    for (ex, rng) in examples {
        let mut rng = rng.clone();
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let (items, _) = pad_truncate(&ex.input, model.config.max_len)?;
        let out = model.forward(&tape, &params, &items, mode, &mut rng)?;
        let loss = cross_entropy_loss(&tape, out.logits, ex.target)?;
        total += tape.scalar(loss)?.as_f64();
        let grads = tape.backward(loss)?;
        for (a, &v) in acc.iter_mut().zip(params.vars()) {
            if let Some(g) = grads.get(v) {
                a.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
        }
    }
    Ok((total, acc))
}

/// Mean loss and mean gradients over a batch.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    examples: &[&SplitExample],
    mode: Mode,
    rng: &mut RngState,
) -> Result<(f64, Vec<Vec<T>>)> {
    if examples.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let seeded: Vec<(&SplitExample, RngState)> = examples.iter().map(|&e| (e, rng.fork())).collect();
    let parts = seeded
        .par_chunks(CHUNK)
        .map(|c| chunk_gradients(model, c, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("nonempty batch");
    for (l, g) in parts {
        loss += l;
        for (a, b) in grads.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + y);
        }
    }
    let n = examples.len() as f64;
    let inv = T::of(1.0 / n);
    grads.iter_mut().flatten().for_each(|g| *g = *g * inv);
    Ok((loss / n, grads))
}

/// One optimizer step on a batch; returns the batch's mean loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    examples: &[&SplitExample],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(model, examples, Mode::Train, rng)?;
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adam_step(&mut model.params, &grads, state, lr, cfg)?;
    Ok(loss)
}

/// One pass over `batches` (indices into `examples`); returns the mean loss
/// per training example.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    examples: &[SplitExample],
    batches: &[Vec<usize>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<f64> {
    if batches.iter().all(Vec::is_empty) {
        return Err(Error::Training("epoch has no training examples".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let refs: Vec<&SplitExample> = batch.iter().map(|&i| &examples[i]).collect();
        total += train_step(model, &refs, state, lr, cfg, rng)? * refs.len() as f64;
        count += refs.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if score <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_ndcg10: Option<f64>,
    pub val_recall10: Option<f64>,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Mixture coefficient of one layer after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub epoch: usize,
    pub layer: usize,
    pub mean: f64,
    /// Values for the first two users in evaluation order.
    pub tracked: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub coefficients: Vec<CoefficientRecord>,
}

impl TrainHistory {
    /// Plot-ready CSV without wall-clock times, so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8}"));
        let mut s = String::from("epoch,loss,val_ndcg10,val_recall10,lr\n");
        for e in &self.epochs {
            s += &format!(
                "{},{:.8},{},{},{:.8e}\n",
                e.epoch,
                e.loss,
                opt(e.val_ndcg10),
                opt(e.val_recall10),
                e.lr
            );
        }
        s
    }

    pub fn coefficients_csv(&self) -> String {
        let mut s = String::from("epoch,layer,mean,user0,user1\n");
        for c in &self.coefficients {
            let t = |i: usize| c.tracked.get(i).map_or(String::new(), |v| format!("{v:.8}"));
            s += &format!("{},{},{:.8},{},{}\n", c.epoch, c.layer, c.mean, t(0), t(1));
        }
        s
    }
}

/// Eval-mode mixture coefficients per layer over `examples`: the mean and
/// the first two examples' values. Empty when no layer has a learned gate.
pub fn coefficient_snapshot<T: Real>(model: &Model<T>, examples: &[SplitExample]) -> Result<Vec<(f64, Vec<f64>)>> {
    let per_example = examples
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let params = model.params.bind(&tape);
            let (items, _) = pad_truncate(&ex.input, model.config.max_len)?;
            let out = model.forward(&tape, &params, &items, Mode::Eval, &mut RngState::new(0))?;
            out.traces
                .iter()
                .map(|t| t.alpha.map(|a| tape.scalar(a).map(|v| v.as_f64())).transpose())
                .collect::<Result<Vec<Option<f64>>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = model.layout.layers.len();
    let mut out = Vec::new();
    for l in 0..layers {
        let vals: Vec<f64> = per_example.iter().filter_map(|r| r[l]).collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        out.push((mean, vals.iter().take(2).copied().collect()));
    }
    Ok(out)
}

pub struct FitOutcome<T: Real> {
    /// Weights from the best validation epoch.
    pub model: Model<T>,
    pub history: TrainHistory,
    pub best_validation: Option<MetricsReport>,
}

/// Trains until `max_epochs` or until validation NDCG@10 has not improved
/// for `patience` consecutive validations.
pub fn fit<T: Real>(
    mut model: Model<T>,
    dataset: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if splits.valid.is_empty() {
        return Err(Error::Training("no validation examples".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best_params = model.params.clone();
    let mut best_validation = None;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        let batches = make_batches(splits.train.len(), cfg.batch_size, true, &mut rng);
        let loss = train_epoch(&mut model, &splits.train, &batches, &mut state, lr, cfg, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        let mut record = EpochRecord {
            epoch,
            loss,
            val_ndcg10: None,
            val_recall10: None,
            lr,
            wall_secs: 0.0,
        };
        let mut decision = StopDecision::Continue;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs {
            let report = evaluate_split(&model, "valid", &splits.valid, dataset, eval)?;
            let ndcg = report.ndcg_at(10).unwrap_or(report.ndcg[report.ndcg.len() - 1]);
            record.val_ndcg10 = Some(ndcg);
            record.val_recall10 = Some(report.recall_at(10).unwrap_or(report.recall[report.recall.len() - 1]));
            for (layer, (mean, tracked)) in coefficient_snapshot(&model, &splits.valid)?.into_iter().enumerate() {
                history.coefficients.push(CoefficientRecord {
                    epoch,
                    layer,
                    mean,
                    tracked,
                });
            }
            decision = stopper.observe(epoch, ndcg);
            if decision == StopDecision::Improved {
                best_params = model.params.clone();
                best_validation = Some(report);
            }
        }
        record.wall_secs = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {loss:.4} lr {lr:.2e} val ndcg@10 {}",
            record.val_ndcg10.map_or("-".into(), |v| format!("{v:.4}"))
        );
        history.epochs.push(record);
        if decision == StopDecision::Stop {
            break;
        }
    }
    history.best_epoch = stopper.best().map(|(e, _)| e);
    model.params = best_params;
    Ok(FitOutcome {
        model,
        history,
        best_validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            lr: 0.1,
            max_epochs: 100,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert!((lr_schedule(50, &cfg) - 0.05).abs() < 1e-15);
        let last = lr_schedule(99, &cfg);
        assert!(last > 0.0 && (last - 0.1 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn patience_one_stops_after_first_worse() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(0, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(1, 0.4), StopDecision::Stop);
        assert_eq!(s.best(), Some((0, 0.5)));
    }

    #[test]
    fn ties_keep_first() {
        let mut s = EarlyStopping::new(3);
        s.observe(0, 0.2);
        s.observe(1, 0.3);
        assert_eq!(s.observe(2, 0.3), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.1), StopDecision::Continue);
        assert_eq!(s.observe(4, 0.3), StopDecision::Stop);
        assert_eq!(s.best(), Some((1, 0.3)));
    }

    #[test]
    fn config_lists_all_violations() {
        let cfg = TrainConfig {
            lr: 0.0,
            beta1: 1.0,
            patience: 0,
            ..Default::default()
        };
        let Err(Error::Config(msg)) = cfg.validate() else {
            panic!("expected config error")
        };
        assert_eq!(msg.split("; ").count(), 3, "{msg}");
    }
}
