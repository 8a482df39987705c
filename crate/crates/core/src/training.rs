//! Loss, optimizer, schedule, the training loop and split evaluation.

use serde::{Deserialize, Serialize};

use crate::aggregator::{sample_length, AggregatorMode};
use crate::data::{augment, subsample_slices, AugmentConfig, Volume};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{Logits, Model};
use crate::numerics::{fnv1a, Graph, RngStream, Tensor, Var};
use crate::params::ParamStore;
use crate::transformer::Ctx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global-norm clip; `None` disables it.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Slice count used for validation; defaults to the largest training
    /// length.
    #[serde(default)]
    pub eval_slices: Option<usize>,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub verbose: bool,
}

fn default_weight_decay() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
            // The toy set is too small for the default augmentation to help.
            augment: AugmentConfig::none(),
            eval_slices: None,
            seed,
            verbose: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        // lr_max = lr_min = 0 is the frozen-weights run.
        let frozen = self.lr_max == 0.0 && self.lr_min == 0.0;
        if !(self.lr_min >= 0.0) || !(self.lr_max > self.lr_min || frozen) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_max > lr_min >= 0 (got {} and {})",
                self.lr_max, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        if self.eval_slices == Some(0) {
            return Err(Error::Config("eval_slices must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at t = 0 to `lr_min` at t = total.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    // cos(pi/2) is not zero in floating point, so pin the three anchors
    if t >= total {
        return lr_min;
    }
    if t == 0 {
        return lr_max;
    }
    if 2 * t == total {
        return 0.5 * (lr_max + lr_min);
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `w_c = total / (K · count_c)`; every class must be present.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} out of range for {k} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training samples")));
    }
    let total = labels.len() as f64;
    Ok(counts.iter().map(|&n| total / (k as f64 * n as f64)).collect())
}

/// `-weights[target] · log softmax(logits)[target]` for one sample.
pub fn weighted_ce_loss(logits: &[f64], target: usize, weights: &[f64]) -> Result<f64> {
    if target >= logits.len() || weights.len() != logits.len() {
        return Err(Error::shape("weighted_ce_loss", &[logits.len()], &[weights.len()]));
    }
    let mut g = Graph::new();
    let x = g.constant(&[1, logits.len()], logits.to_vec())?;
    let w = Tensor::new(&[weights.len()], weights.to_vec())?;
    let loss = weighted_cross_entropy(&mut g, x, &[target], &w)?;
    Ok(g.scalar(loss))
}

/// Mean over the batch of `-w[y_b] · log softmax(logits_b)[y_b]`.
pub fn weighted_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], weights: &Tensor) -> Result<Var> {
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick(logp, targets)?;
    let w: Vec<f64> = targets.iter().map(|&t| -weights.data()[t]).collect();
    let w = g.constant(&[targets.len()], w)?;
    let weighted = g.mul(picked, w)?;
    Ok(g.mean_all(weighted))
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl OptimState {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn for_store(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.tensor.numel()).collect();
        Self::new(&sizes, beta1, beta2, eps)
    }
}

/// One AdamW update of a parameter slice with decoupled weight decay.
/// Call after incrementing `state.t`.
fn adamw_update(params: &mut [f64], grads: &[f64], mom: &mut Moments, state_t: u64, hp: (f64, f64, f64), lr: f64, decay: f64) {
    let (b1, b2, eps) = hp;
    let bc1 = 1.0 - b1.powi(state_t as i32);
    let bc2 = 1.0 - b2.powi(state_t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
        mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
        let mhat = mom.m[i] / bc1;
        let vhat = mom.v[i] / bc2;
        params[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * params[i]);
    }
}

/// AdamW over flat parameter groups: `groups[i]` is updated with
/// `grads[i]`, using `state.moments[i]`.
pub fn adamw_step(groups: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimState, lr: f64, weight_decay: f64) -> Result<()> {
    if groups.len() != grads.len() || groups.len() != state.moments.len() {
        return Err(Error::InvalidInput("parameter, gradient and state groups differ in count".into()));
    }
    state.t += 1;
    let hp = (state.beta1, state.beta2, state.eps);
    for ((p, g), mom) in groups.iter_mut().zip(grads).zip(&mut state.moments) {
        if p.len() != g.len() || p.len() != mom.m.len() {
            return Err(Error::shape("adamw_step", &[p.len()], &[g.len()]));
        }
        adamw_update(p, g, mom, state.t, hp, lr, weight_decay);
    }
    Ok(())
}

/// AdamW over a parameter store, consuming accumulated gradients. Decay
/// applies only to parameters flagged for it.
pub fn adamw_store_step(store: &mut ParamStore, state: &mut OptimState, lr: f64, weight_decay: f64) {
    state.t += 1;
    let hp = (state.beta1, state.beta2, state.eps);
    for (p, mom) in store.iter_mut().zip(&mut state.moments) {
        let decay = if p.decay { weight_decay } else { 0.0 };
        let grad = p.tensor.take_grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        adamw_update(p.tensor.data_mut(), &grad, mom, state.t, hp, lr, decay);
    }
}

/// Rescales accumulated gradients so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.take_grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// Slices to evaluate per volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceCount {
    All,
    Fixed(usize),
}

impl SliceCount {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SliceCount::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(SliceCount::Fixed(n)),
            _ => Err(Error::Config(format!(
                "slice count must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitEval {
    pub result: EvalResult,
    /// Mean weighted cross-entropy.
    pub loss: f64,
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SplitEval {
    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len().max(1) as f64
    }
}

/// Eval-time subsampling stream for one volume: depends only on the seed
/// and the sample id, so results do not depend on evaluation order.
pub fn eval_stream(seed: u64, id: &str) -> RngStream {
    RngStream::new(seed, fnv1a(format!("eval/{id}").as_bytes()))
}

const EVAL_BATCH: usize = 16;

/// Evaluates `volumes` at `count` slices each (clamped to the volume's
/// length, with a warning). Loss weights default to uniform.
pub fn evaluate_volumes(model: &Model, volumes: &[Volume], count: SliceCount, seed: u64, weights: Option<&[f64]>) -> Result<SplitEval> {
    if volumes.is_empty() {
        return Err(Error::InvalidInput("no volumes to evaluate".into()));
    }
    let k = model.config().num_classes;
    let mut warnings = Vec::new();
    let mut inputs = Vec::with_capacity(volumes.len());
    for v in volumes {
        let n_total = v.n_slices();
        let n = match count {
            SliceCount::All => n_total,
            SliceCount::Fixed(n) if n > n_total => {
                warnings.push(format!(
                    "{}: requested {n} slices but volume has {n_total}; using all",
                    v.id
                ));
                n_total
            }
            SliceCount::Fixed(n) => n,
        };
        let mut rng = eval_stream(seed, &v.id);
        let (sub, _) = subsample_slices(&v.slices, n, &mut rng)?;
        inputs.push(sub);
    }
    let mut logits: Vec<Option<Logits>> = vec![None; volumes.len()];
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.sort_by_key(|&i| inputs[i].shape()[0]);
    let mut dummy = RngStream::new(seed, 0);
    let mut start = 0;
    while start < order.len() {
        let n = inputs[order[start]].shape()[0];
        let mut end = start;
        while end < order.len() && end - start < EVAL_BATCH && inputs[order[end]].shape()[0] == n {
            end += 1;
        }
        let batch: Vec<&Tensor> = order[start..end].iter().map(|&i| &inputs[i]).collect();
        let out = model.forward_batch(&batch, false, &mut dummy)?;
        for (&i, l) in order[start..end].iter().zip(out) {
            logits[i] = Some(l);
        }
        start = end;
    }
    let uniform = vec![1.0; k];
    let w = weights.unwrap_or(&uniform);
    let labels: Vec<usize> = volumes.iter().map(|v| v.label).collect();
    let mut probs = Vec::with_capacity(volumes.len());
    let mut loss = 0.0;
    for (l, &y) in logits.iter().zip(&labels) {
        let l = l.as_ref().expect("every volume evaluated");
        loss += weighted_ce_loss(&l.0, y, w)?;
        probs.push(l.probabilities());
    }
    let result = evaluate(&labels, &probs, k)?;
    Ok(SplitEval {
        result,
        loss: loss / volumes.len() as f64,
        labels,
        probs,
        lengths: inputs.iter().map(|t| t.shape()[0]).collect(),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub bacc: f64,
    pub auroc: Option<f64>,
    pub lr: f64,
    pub n_mean: f64,
}

pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_bacc: f64,
    pub history: Vec<MetricsRow>,
    /// Slice count used at each optimizer step.
    pub length_draws: Vec<usize>,
    pub last: Model,
}

/// Trains `model` on `train`, selecting the epoch with the highest
/// validation balanced accuracy (earliest on ties).
pub fn train(mut model: Model, train: &[Volume], val: &[Volume], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mcfg = model.config().clone();
    let k = mcfg.num_classes;
    let labels: Vec<usize> = train.iter().map(|v| v.label).collect();
    let weights_vec = class_weights(&labels, k)?;
    let weights = Tensor::new(&[k], weights_vec.clone())?;
    let lengths = mcfg.train_lengths();
    let variable = mcfg.aggregator_mode == AggregatorMode::Vlfat;
    let eval_n = cfg.eval_slices.unwrap_or_else(|| *lengths.iter().max().expect("validated lengths"));

    let mut rng_len = RngStream::labeled(cfg.seed, "train/lengths");
    let mut rng_shuffle = RngStream::labeled(cfg.seed, "train/shuffle");
    let mut rng_sub = RngStream::labeled(cfg.seed, "train/subsample");
    let mut rng_aug = RngStream::labeled(cfg.seed, "train/augment");
    let mut rng_drop = RngStream::labeled(cfg.seed, "train/dropout");

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = OptimState::for_store(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut length_draws = Vec::with_capacity(total_steps);
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng_shuffle.shuffle(&mut order);
        let (mut loss_sum, mut lr) = (0.0, cfg.lr_max);
        let mut epoch_lengths = Vec::with_capacity(steps_per_epoch);
        let mut y_true = Vec::with_capacity(train.len());
        let mut probs = Vec::with_capacity(train.len());
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let drawn = if variable {
                sample_length(&lengths, &mut rng_len)?
            } else {
                lengths[0]
            };
            let shortest = chunk.iter().map(|&i| train[i].n_slices()).min().unwrap();
            let n = drawn.min(shortest);
            length_draws.push(n);
            epoch_lengths.push(n);
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (sub, _) = subsample_slices(&train[i].slices, n, &mut rng_sub)?;
                let (aug, _) = augment(&sub, &cfg.augment, &mut rng_aug)?;
                inputs.push(aug);
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);

            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let mut ctx = Ctx::train(&mut rng_drop);
            let logits = model.forward(&mut g, &bound, &refs, &mut ctx)?;
            let loss = weighted_cross_entropy(&mut g, logits, &targets, &weights)?;
            let loss_val = g.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    step: bi + 1,
                    lr,
                });
            }
            g.backward(loss);
            model.params_mut().collect_grads(&g, &bound);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), max);
            }
            adamw_store_step(model.params_mut(), &mut opt, lr, cfg.weight_decay);
            step += 1;

            loss_sum += loss_val * chunk.len() as f64;
            for (row, &y) in g.data(logits).chunks(k).zip(&targets) {
                probs.push(Logits(row.to_vec()).probabilities());
                y_true.push(y);
            }
        }
        let train_eval = evaluate(&y_true, &probs, k)?;
        let n_mean = epoch_lengths.iter().sum::<usize>() as f64 / epoch_lengths.len() as f64;
        history.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / train.len() as f64,
            bacc: train_eval.bacc,
            auroc: train_eval.auroc_macro,
            lr,
            n_mean,
        });
        let v = evaluate_volumes(&model, val, SliceCount::Fixed(eval_n), cfg.seed, Some(&weights_vec))?;
        history.push(MetricsRow {
            epoch,
            split: "val".into(),
            loss: v.loss,
            bacc: v.result.bacc,
            auroc: v.result.auroc_macro,
            lr,
            n_mean: v.mean_length(),
        });
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:>3}  train loss {:.4} bacc {:.3}  val loss {:.4} bacc {:.3}  lr {lr:.2e}",
                loss_sum / train.len() as f64,
                train_eval.bacc,
                v.loss,
                v.result.bacc
            );
        }
        if best.as_ref().map_or(true, |(_, _, b)| v.result.bacc > *b) {
            best = Some((model.clone(), epoch, v.result.bacc));
        }
    }
    let (best_model, best_epoch, best_val_bacc) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_val_bacc,
        history,
        length_draws,
        last: model,
    })
}
