//! Mini-batch optimization of the combined objective with validation-based
//! model selection.
//!
//! Training is bit-reproducible given a seed: batch order comes from a
//! per-epoch shuffle stream, per-step noise from a per-step stream, and
//! gradient reduction uses a fixed chunk order (so the parallel path matches
//! the sequential one bitwise).

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MultiViewSample, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{default_selection_metric, evaluate_prediction, MetricsReport, ModelPredictor, ReportHyperparams};
use crate::losses::{loss_only, loss_with_grad, step_noise, LossBreakdown, TermWeights};
use crate::model::{ModelParameters, MultiViewModel, PredictMode};
use crate::par::ExecMode;
use crate::rng::{standard_normal_vec, stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    PlainSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Auroc,
    Accuracy,
}

fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_eval_every() -> usize {
    1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdaptiveMoment
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps (whichever limit hits first).
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Evaluations without improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// None: AUROC for binary tasks, accuracy otherwise.
    #[serde(default)]
    pub selection_metric: Option<SelectionMetric>,
    /// Epochs between validation evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Optional overrides of the model config's loss weights.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::invalid("batch_size must be >= 4"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs must be >= 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            max_epochs: 50,
            max_steps: None,
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            patience: default_patience(),
            selection_metric: None,
            eval_every: default_eval_every(),
            seed: 0,
            gamma: None,
            alpha: None,
            parallel: true,
        }
    }
}

/// What a training run optimizes and on which samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainObjective {
    pub weights: TermWeights,
    /// Restrict the training pool to labeled samples.
    pub labeled_only: bool,
    /// Select checkpoints by (negated) validation objective instead of a
    /// prediction metric; used for purely generative stages.
    pub select_by_loss: bool,
}

impl TrainObjective {
    pub fn full(gamma: f64, alpha: f64) -> Self {
        Self {
            weights: TermWeights::total(gamma, alpha),
            labeled_only: false,
            select_by_loss: false,
        }
    }

    /// Pure generative objective, selected by validation loss.
    pub fn unsupervised() -> Self {
        Self {
            weights: TermWeights {
                unsup: 1.0,
                sup: 0.0,
                cvmi: 0.0,
            },
            labeled_only: false,
            select_by_loss: true,
        }
    }

    /// Supervised information-bottleneck objective on labeled samples only.
    pub fn supervised_only() -> Self {
        Self {
            weights: TermWeights {
                unsup: 0.0,
                sup: 1.0,
                cvmi: 0.0,
            },
            labeled_only: true,
            select_by_loss: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub step: u64,
    /// Selection value (higher is better; negated loss when selecting by loss).
    pub metric: f64,
    pub report: Option<MetricsReport>,
}

/// Full step-by-step record of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    /// Index into `evals` of the retained checkpoint.
    pub best_eval: Option<usize>,
}

impl TrainHistory {
    /// Append one breakdown per line (JSON lines).
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_params: ModelParameters,
    pub history: TrainHistory,
    /// Best validation metric (None only if validation never ran).
    pub best_metric: Option<f64>,
}

/// Shuffle sample indices by `(seed, epoch)` and cut into batches; the last
/// short batch is kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Domain::Shuffle, epoch);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    indices
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, len: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::PlainSgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t as i32);
                let c2 = 1.0 - B2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

/// Deterministic validation objective (used when selecting by loss).
fn validation_loss(
    model: &MultiViewModel,
    params: &ModelParameters,
    val: &Dataset,
    weights: TermWeights,
    seed: u64,
    eval_index: u64,
    mode: ExecMode,
) -> Result<f64> {
    let mut rng = stream(seed, Domain::Eval, 1_000_000 + eval_index);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in val.samples.chunks(512) {
        let batch: Vec<&MultiViewSample> = chunk.iter().collect();
        let noise: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| standard_normal_vec(&mut rng, model.latent_dim()))
            .collect();
        let b = loss_only(model, &params.values, &batch, &noise, weights, 0, mode)?;
        total += b.total * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Optimize the objective over the train split, evaluating on the validation
/// split every `eval_every` epochs and retaining the best parameters.
pub fn train(
    model: &MultiViewModel,
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
    objective: &TrainObjective,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ds.schema != model.schema {
        return Err(Error::invalid("train dataset schema does not match model"));
    }
    if val_ds.schema != model.schema {
        return Err(Error::invalid("validation dataset schema does not match model"));
    }
    let pool: Vec<&MultiViewSample> = train_ds
        .samples
        .iter()
        .filter(|s| !objective.labeled_only || s.label().is_some())
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("training pool is empty"));
    }

    let mode = ExecMode::from_flag(config.parallel);
    let selection = config
        .selection_metric
        .unwrap_or_else(|| default_selection_metric(model.schema.num_classes));

    let mut params = model.init_params();
    let mut optimizer = Optimizer::new(config.optimizer, params.values.len());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut evals_without_improvement = 0usize;
    let mut step: u64 = 0;
    let mut stop = false;

    'epochs: for epoch in 0..config.max_epochs {
        let batches = make_batches(pool.len(), config.batch_size, config.seed, epoch as u64);
        for (batch_index, batch_ids) in batches.iter().enumerate() {
            let batch: Vec<&MultiViewSample> = batch_ids.iter().map(|&i| pool[i]).collect();
            let noise = step_noise(config.seed, step, batch.len(), model.latent_dim());
            let (breakdown, grad) = loss_with_grad(
                model,
                &params.values,
                &batch,
                &noise,
                objective.weights,
                step,
                mode,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_index,
                    breakdown_json: serde_json::to_string(&breakdown)?,
                });
            }
            optimizer.apply(&mut params.values, &grad, config.learning_rate);
            debug_assert!(params.all_finite(), "non-finite parameters after step {step}");
            history.steps.push(breakdown);
            step += 1;
            if config.max_steps.is_some_and(|cap| step >= cap) {
                stop = true;
            }
            if stop {
                break;
            }
        }

        let final_epoch = stop || epoch + 1 == config.max_epochs;
        if (epoch + 1) % config.eval_every == 0 || final_epoch {
            let eval_index = history.evals.len() as u64;
            let (metric, report) = if objective.select_by_loss {
                let loss = validation_loss(
                    model,
                    &params,
                    val_ds,
                    objective.weights,
                    config.seed,
                    eval_index,
                    mode,
                )?;
                (-loss, None)
            } else {
                let predictor = ModelPredictor {
                    model,
                    params: &params,
                    mode: PredictMode::PosteriorMean,
                    seed: config.seed,
                };
                let report = evaluate_prediction(
                    &predictor,
                    val_ds,
                    "train_eval",
                    config.seed,
                    ReportHyperparams::default(),
                )?;
                let metric = match selection {
                    SelectionMetric::Auroc => report.auroc,
                    SelectionMetric::Accuracy => report.accuracy,
                };
                (metric, Some(report))
            };
            history.evals.push(EvalPoint {
                epoch,
                step,
                metric,
                report,
            });
            let improved = best.as_ref().map_or(true, |(b, _)| metric > *b);
            if improved {
                best = Some((metric, params.clone()));
                history.best_eval = Some(history.evals.len() - 1);
                evals_without_improvement = 0;
            } else {
                evals_without_improvement += 1;
                if evals_without_improvement >= config.patience {
                    break 'epochs;
                }
            }
        }
        if stop {
            break;
        }
    }

    let (best_metric, best_params) = match best {
        Some((m, p)) => (Some(m), p),
        None => (None, params),
    };
    Ok(TrainOutcome {
        best_params,
        history,
        best_metric,
    })
}

/// Split-tag sanity for dataset pairs used across training entry points.
pub fn check_split_roles(train_ds: &Dataset, val_ds: &Dataset) -> Result<()> {
    if train_ds.split != SplitTag::Train || val_ds.split != SplitTag::Val {
        return Err(Error::invalid("expected (train, val) split tags"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_tabular, inject_missingness, reduce_labels, GeneratorConfig};
    use crate::model::ModelConfig;

    fn tiny_data(seed: u64) -> (Dataset, Dataset) {
        let cfg = GeneratorConfig {
            n_train: 64,
            n_val: 48,
            n_test: 8,
            view_dims: Some(vec![8; 4]),
            shared_dim: 4,
            ..GeneratorConfig::tabular_defaults(seed)
        };
        let (train, val, _) = gen_tabular(&cfg).unwrap();
        let train = inject_missingness(&train, 0.3, 1).unwrap();
        let train = reduce_labels(&train, 0.5, 2).unwrap();
        (train, val)
    }

    fn tiny_model(train: &Dataset, seed: u64) -> MultiViewModel {
        MultiViewModel::new(
            train.schema.clone(),
            ModelConfig {
                latent_dim: 4,
                encoder_hidden: vec![12],
                decoder_hidden: vec![12],
                predictor_hidden: vec![12],
                gamma: 1.0,
                alpha: 1.0,
                seed,
                ..ModelConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn batches_partition_and_are_deterministic() {
        let batches = make_batches(103, 16, 5, 0);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(batches.last().unwrap().len(), 103 % 16);
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(make_batches(103, 16, 5, 0), batches);
        assert_ne!(make_batches(103, 16, 5, 1), batches);
    }

    #[test]
    fn labeled_count_per_batch_tracks_label_fraction() {
        let (train, _) = tiny_data(7);
        let labeled_fraction = train.labeled_count() as f64 / train.len() as f64;
        let batches = make_batches(train.len(), 16, 3, 0);
        let mut labeled_total = 0usize;
        for b in &batches {
            labeled_total += b
                .iter()
                .filter(|&&i| train.samples[i].label().is_some())
                .count();
        }
        let observed = labeled_total as f64 / train.len() as f64;
        assert!((observed - labeled_fraction).abs() < 1e-12);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (train, val) = tiny_data(8);
        let model = tiny_model(&train, 3);
        let config = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            max_steps: Some(10),
            seed: 11,
            ..TrainConfig::default()
        };
        let objective = TrainObjective::full(0.5, 1.0);
        let a = train(&model, &train, &val, &config, &objective).unwrap();
        let b = train(&model, &train, &val, &config, &objective).unwrap();
        assert_eq!(a.history.steps.len(), 10);
        for (x, y) in a.history.steps.iter().zip(&b.history.steps) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        assert_eq!(a.best_params.values, b.best_params.values);
    }

    #[test]
    fn unsupervised_smoke_run_reduces_loss_trend() {
        let (train, val) = tiny_data(9);
        let model = tiny_model(&train, 4);
        let config = TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            max_steps: Some(200),
            patience: 1_000,
            seed: 12,
            ..TrainConfig::default()
        };
        let outcome = train(&model, &train, &val, &config, &TrainObjective::unsupervised()).unwrap();
        let totals: Vec<f64> = outcome.history.steps.iter().map(|s| s.total).collect();
        let window = 5;
        let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let head = avg(&totals[..window]);
        let tail = avg(&totals[totals.len() - window..]);
        assert!(
            tail < head,
            "5-step moving average did not decrease: {head} -> {tail}"
        );
        // Reconstruction log-likelihood improves over the run.
        let first = &outcome.history.steps[0];
        let last = outcome.history.steps.last().unwrap();
        let recon_first: f64 = first.recon_per_view.iter().sum();
        let recon_last: f64 = last.recon_per_view.iter().sum();
        assert!(recon_last < recon_first);
    }

    #[test]
    fn early_stopping_returns_best_validation_params() {
        let (train, val) = tiny_data(10);
        let model = tiny_model(&train, 5);
        let config = TrainConfig {
            batch_size: 16,
            max_epochs: 12,
            patience: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let outcome = train(&model, &train, &val, &config, &TrainObjective::full(1.0, 0.0)).unwrap();
        let best_idx = outcome.history.best_eval.unwrap();
        let best_metric = outcome.history.evals[best_idx].metric;
        let max_metric = outcome
            .history
            .evals
            .iter()
            .map(|e| e.metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_metric, max_metric);
        assert_eq!(outcome.best_metric, Some(best_metric));
    }

    #[test]
    fn labeled_only_pool_excludes_unlabeled() {
        let (train, val) = tiny_data(11);
        let model = tiny_model(&train, 6);
        let config = TrainConfig {
            batch_size: 8,
            max_epochs: 1,
            seed: 14,
            ..TrainConfig::default()
        };
        let outcome = train(&model, &train, &val, &config, &TrainObjective::supervised_only()).unwrap();
        let labeled = train.labeled_count();
        for s in &outcome.history.steps {
            assert_eq!(s.n_unlabeled, 0);
        }
        let seen: usize = outcome.history.steps.iter().map(|s| s.n_labeled).sum();
        assert_eq!(seen, labeled);
    }
}
