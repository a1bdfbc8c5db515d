//! Single-shape fitting: per-type minibatches, Adam, and a reduce-on-plateau
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{save_checkpoint, PddfModel, SirenConfig};
use crate::geometry::{random_unit, BoundingBox, OrientedPoint};
use crate::losses::{loss_and_gradient, Batch, LossBreakdown, LossWeights, BCE_EPS};
use crate::sampler::{Dataset, SampleType, TrainingSample, TypeCounts};

/// Samples per minibatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchCounts {
    pub types: TypeCounts,
    /// Fresh uniform oriented points that only feed the regularizers.
    pub reg_only: usize,
}

impl Default for BatchCounts {
    fn default() -> Self {
        Self {
            types: TypeCounts::new(6000, 6000, 3000, 3000, 3000, 3000),
            reg_only: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: SirenConfig,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    /// Minimum iterations between two learning-rate reductions.
    pub plateau_min_gap: usize,
    /// Iterations without a new smoothed-loss minimum that count as a plateau.
    pub plateau_patience: usize,
    /// Smoothing factor of the loss moving average.
    pub ema_alpha: f64,
    pub batch: BatchCounts,
    pub weights: LossWeights,
    /// Seed for minibatch selection and regularization points.
    pub seed: u64,
    /// Uniform multiplier on iterations and minibatch counts.
    pub scale: f64,
    pub report_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: SirenConfig::default(),
            iterations: 100_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.9,
            plateau_min_gap: 5000,
            plateau_patience: 2000,
            ema_alpha: 0.01,
            batch: BatchCounts::default(),
            weights: LossWeights::default(),
            seed: 0,
            scale: 1.0,
            report_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let positive = [self.lr, self.adam_eps, self.plateau_factor, self.ema_alpha, self.scale];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid(
                "lr, adam_eps, plateau_factor, ema_alpha and scale must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.plateau_factor > 1.0 || self.ema_alpha > 1.0 {
            return Err(Error::invalid("plateau_factor and ema_alpha must not exceed 1"));
        }
        if self.report_interval == 0 {
            return Err(Error::invalid("report_interval must be positive"));
        }
        Ok(())
    }

    pub fn effective_iterations(&self) -> usize {
        (self.iterations as f64 * self.scale).round() as usize
    }

    pub fn effective_batch(&self) -> BatchCounts {
        BatchCounts {
            types: self.batch.types.scaled(self.scale),
            reg_only: (self.batch.reg_only as f64 * self.scale).round() as usize,
        }
    }
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; rejects non-finite gradients.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::invalid("parameter, gradient and state lengths differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            iteration: state.step as usize,
            detail: format!("gradient entry {i} is {}", grads[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Reduce-on-plateau over a moving average of the loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    min_gap: usize,
    patience: usize,
    alpha: f64,
    ema: Option<f64>,
    best: f64,
    since_best: usize,
    since_reduction: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, min_gap: usize, patience: usize, alpha: f64) -> Self {
        Self {
            lr,
            factor,
            min_gap,
            patience,
            alpha,
            ema: None,
            best: f64::INFINITY,
            since_best: 0,
            since_reduction: 0,
        }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// Records one loss value; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        let ema = match self.ema {
            None => loss,
            Some(e) => e + self.alpha * (loss - e),
        };
        self.ema = Some(ema);
        self.since_reduction += 1;
        if ema < self.best {
            self.best = ema;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        if self.since_best >= self.patience && self.since_reduction >= self.min_gap {
            self.lr *= self.factor;
            self.since_reduction = 0;
            self.since_best = 0;
            self.best = ema;
            return true;
        }
        false
    }
}

/// One history entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Held-out error of one sample type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    /// Mean `|d_hat - d|` over visible samples.
    pub depth_l1: f64,
    /// Mean visibility binary cross-entropy.
    pub bce: f64,
    pub count: usize,
    pub visible: usize,
}

/// Per-type held-out metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub per_type: BTreeMap<SampleType, TypeMetrics>,
    pub overall: TypeMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LogRecord>,
    pub held_out: Option<HeldOutMetrics>,
    pub final_lr: f64,
    pub lr_reductions: Vec<usize>,
}

/// Where to write artifacts while fitting.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Overwritten every 10% of the run and at the end.
    pub checkpoint: Option<PathBuf>,
    /// One JSON object per report interval.
    pub log: Option<PathBuf>,
}

/// Depth L1 and visibility BCE of `model` on every sample of `data`.
pub fn evaluate_held_out(model: &PddfModel, data: &[TrainingSample]) -> Result<HeldOutMetrics> {
    let ops: Vec<OrientedPoint> = data.iter().map(|s| s.op).collect();
    let outputs = model.eval_batch(&ops)?;
    let mut sums: BTreeMap<SampleType, (f64, f64, usize, usize)> = BTreeMap::new();
    let mut all = (0.0, 0.0, 0, 0);
    for (s, out) in data.iter().zip(&outputs) {
        let xi = if s.visible { 1.0 } else { 0.0 };
        let p = out.xi.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let bce = -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln());
        let l1 = if s.visible { (out.depth() - s.depth).abs() } else { 0.0 };
        for acc in [sums.entry(s.kind).or_default(), &mut all] {
            acc.0 += l1;
            acc.1 += bce;
            acc.2 += 1;
            acc.3 += s.visible as usize;
        }
    }
    let finish = |(l1, bce, n, vis): (f64, f64, usize, usize)| TypeMetrics {
        depth_l1: if vis > 0 { l1 / vis as f64 } else { 0.0 },
        bce: if n > 0 { bce / n as f64 } else { 0.0 },
        count: n,
        visible: vis,
    };
    Ok(HeldOutMetrics {
        per_type: sums.into_iter().map(|(k, v)| (k, finish(v))).collect(),
        overall: finish(all),
    })
}

/// Cycles through a shuffled index list, reshuffling at the end of each epoch.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(indices: Vec<usize>) -> Self {
        let cursor = indices.len();
        Self { order: indices, cursor }
    }

    fn take<R: Rng>(&mut self, n: usize, rng: &mut R, out: &mut Vec<usize>) {
        if self.order.is_empty() {
            return;
        }
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Fits a field to `dataset`, optionally evaluating on `held_out` at the end.
pub fn fit_shape(
    dataset: &Dataset,
    held_out: Option<&[TrainingSample]>,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(PddfModel, TrainReport)> {
    config.validate()?;
    let mut model = PddfModel::new(&config.model)?;
    let iterations = config.effective_iterations();
    let batch_counts = config.effective_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samplers: Vec<(SampleType, usize, EpochSampler)> = SampleType::ALL
        .iter()
        .map(|&k| {
            let idx = dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.kind == k)
                .map(|(i, _)| i)
                .collect();
            (k, batch_counts.types.get(k), EpochSampler::new(idx))
        })
        .collect();
    let mut params = model.net.flat_params();
    let mut adam = AdamState::new(params.len());
    let mut scheduler = PlateauScheduler::new(
        config.lr,
        config.plateau_factor,
        config.plateau_min_gap,
        config.plateau_patience,
        config.ema_alpha,
    );
    let mut report = TrainReport {
        final_lr: config.lr,
        ..TrainReport::default()
    };
    let mut log = match &outputs.log {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let checkpoint_every = (iterations / 10).max(1);
    let domain = BoundingBox::default();
    let mut indices = Vec::new();
    for iter in 1..=iterations {
        indices.clear();
        for (_, count, sampler) in samplers.iter_mut() {
            sampler.take(*count, &mut rng, &mut indices);
        }
        let batch = Batch {
            labelled: indices.iter().map(|&i| dataset.samples[i]).collect(),
            reg_only: (0..batch_counts.reg_only)
                .map(|_| OrientedPoint {
                    p: domain.sample_interior(&mut rng),
                    v: random_unit(&mut rng),
                })
                .collect(),
        };
        let (losses, grad) = loss_and_gradient(&model, &batch, &config.weights)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter,
                detail: format!("loss terms {losses:?}"),
            });
        }
        adam_step(
            &mut params,
            &grad,
            &mut adam,
            scheduler.lr,
            (config.beta1, config.beta2),
            config.adam_eps,
        )
        .map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                iteration: iter,
                detail,
            },
            other => other,
        })?;
        // parameters stay f32-representable so checkpoints are exact
        let rounded: Vec<f64> = params.iter().map(|&x| x as f32 as f64).collect();
        model.net.set_flat_params(&rounded);
        if scheduler.observe(losses.total) {
            report.lr_reductions.push(iter);
        }
        if iter % config.report_interval == 0 {
            let record = LogRecord {
                iter,
                lr: scheduler.lr,
                losses,
            };
            if let Some(out) = log.as_mut() {
                serde_json::to_writer(&mut *out, &record)?;
                out.write_all(b"\n")?;
            }
            report.history.push(record);
        }
        if iter % checkpoint_every == 0 && iter != iterations {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(&model, checkpoint_metadata(config, iter, scheduler.lr), path)?;
            }
        }
    }
    if let Some(out) = log.as_mut() {
        out.flush()?;
    }
    report.final_lr = scheduler.lr;
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(&model, checkpoint_metadata(config, iterations, scheduler.lr), path)?;
    }
    if let Some(data) = held_out {
        report.held_out = Some(evaluate_held_out(&model, data)?);
    }
    Ok((model, report))
}

fn checkpoint_metadata(config: &TrainConfig, iteration: usize, lr: f64) -> serde_json::Value {
    serde_json::json!({
        "iteration": iteration,
        "lr": lr,
        "seed": config.seed,
    })
}

/// Held-out metrics per sample type for one ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablated: Option<SampleType>,
    /// `(type, depth L1, BCE)` for every type.
    pub rows: Vec<(SampleType, f64, f64)>,
    pub history: Vec<LogRecord>,
}

/// Trains with one sample type removed from the minibatches (or none, for
/// the baseline) and reports the per-type held-out grid.
pub fn ablation_experiment(
    dataset: &Dataset,
    held_out: &[TrainingSample],
    config: &TrainConfig,
    ablate: Option<SampleType>,
) -> Result<AblationTable> {
    let mut config = config.clone();
    if let Some(kind) = ablate {
        config.batch.types.set(kind, 0);
    }
    let (_, report) = fit_shape(dataset, Some(held_out), &config, &TrainOutputs::default())?;
    let metrics = report.held_out.expect("held-out set supplied");
    let rows = SampleType::ALL
        .iter()
        .map(|k| {
            let m = metrics.per_type.get(k).copied().unwrap_or_default();
            (*k, m.depth_l1, m.bce)
        })
        .collect();
    Ok(AblationTable {
        ablated: ablate,
        rows,
        history: report.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn quadratic_converges() {
        let mut x = [1.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, 0.1, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut s, 0.1, (0.9, 0.999), 1e-8),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn scheduler_respects_gap_and_never_increases() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 50, 10, 0.5);
        let mut last = 1.0;
        let mut reductions = Vec::new();
        for i in 0..500 {
            if s.observe(1.0) {
                reductions.push(i);
            }
            assert!(s.lr <= last);
            last = s.lr;
        }
        assert!(!reductions.is_empty());
        assert!(reductions.windows(2).all(|w| w[1] - w[0] >= 50));
    }
}
