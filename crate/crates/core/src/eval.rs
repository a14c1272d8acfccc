//! Metrics, prediction evaluation, the imputation protocol, and sensitivity
//! sweeps.
//!
//! AUROC is the Mann-Whitney rank statistic with ties counted one half;
//! multiclass tasks macro-average one-vs-rest AUROCs, skipping (and
//! recording) classes without both a positive and a negative. Accuracy breaks
//! argmax ties toward the lowest class index.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::baselines::{base_predict, base_train, BaseClassifiers};
use crate::data::{Dataset, DatasetBundle, SplitTag};
use crate::error::{Error, Result};
use crate::model::{ImputeMode, ModelConfig, ModelParameters, MultiViewModel, PredictMode};
use crate::rng::{stream, Domain};
use crate::train::{train, SelectionMetric, TrainConfig, TrainObjective};

/// Hyperparameters echoed into every report for self-description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportHyperparams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    #[serde(default)]
    pub keep_fraction: Option<f64>,
    #[serde(default)]
    pub drop_rate: Option<f64>,
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub split: SplitTag,
    pub n_samples: usize,
    pub seed: u64,
    pub method: String,
    pub hyperparameters: ReportHyperparams,
    /// Classes skipped in the macro AUROC for lack of positives or negatives.
    pub skipped_classes: Vec<usize>,
}

/// Anything that can score a sample's present views.
pub trait Predictor {
    fn predict_proba(&self, sample: &crate::data::MultiViewSample) -> Result<Vec<f64>>;
    fn num_classes(&self) -> usize;
}

/// Posterior-mean prediction with a trained generative model.
pub struct ModelPredictor<'a> {
    pub model: &'a MultiViewModel,
    pub params: &'a ModelParameters,
    pub mode: PredictMode,
    pub seed: u64,
}

impl Predictor for ModelPredictor<'_> {
    fn predict_proba(&self, sample: &crate::data::MultiViewSample) -> Result<Vec<f64>> {
        let mut rng = stream(self.seed, Domain::Eval, sample.id());
        self.model.predict_sample(self.params, sample, self.mode, &mut rng)
    }

    fn num_classes(&self) -> usize {
        self.model.schema.num_classes
    }
}

/// Binary AUROC from scores and positive flags, by average ranks.
fn auroc_binary(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let n = scores.len();
    let n_pos = positives.iter().filter(|p| **p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank over the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positives[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC of per-sample class scores against labels.
///
/// Binary: probability-of-correct-ranking of class 1 scores. Multiclass:
/// macro-averaged one-vs-rest; classes lacking a positive or negative are
/// skipped and returned.
pub fn auroc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<(f64, Vec<usize>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("scores and labels must align and be nonempty"));
    }
    if num_classes == 2 {
        let s: Vec<f64> = scores.iter().map(|row| row[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return Ok((auroc_binary(&s, &pos)?, Vec::new()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let n_pos = pos.iter().filter(|p| **p).count();
        if n_pos == 0 || n_pos == labels.len() {
            skipped.push(c);
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        total += auroc_binary(&s, &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("no class had both positives and negatives"));
    }
    Ok((total / used as f64, skipped))
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Fraction of argmax predictions equal to the label.
pub fn accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::invalid("predictions and labels must align and be nonempty"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Run a predictor over every labeled sample of a split and compute both
/// metrics.
pub fn evaluate_prediction(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    method: impl Into<String>,
    seed: u64,
    hyperparameters: ReportHyperparams,
) -> Result<MetricsReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &dataset.samples {
        if let Some(y) = s.label() {
            scores.push(predictor.predict_proba(s)?);
            labels.push(y);
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("evaluated split has no labels"));
    }
    let (auroc_value, skipped) = auroc(&scores, &labels, predictor.num_classes())?;
    let accuracy_value = accuracy(&scores, &labels)?;
    Ok(MetricsReport {
        auroc: auroc_value,
        accuracy: accuracy_value,
        split: dataset.split,
        n_samples: labels.len(),
        seed,
        method: method.into(),
        hyperparameters,
        skipped_classes: skipped,
    })
}

/// Sample mean and standard deviation (n - 1 denominator, 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Table-cell formatting used by reports: "0.7419 ± 0.0105".
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} \u{00b1} {std:.4}")
}

/// Outcome of the impute-then-retrain comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationOutcome {
    /// Base trained and tested on mean-imputed data.
    pub mean_imputed: MetricsReport,
    /// Base trained and tested on model-imputed data.
    pub model_imputed: MetricsReport,
    /// Feature MSE of each imputation against the clean values of dropped
    /// test entries.
    pub mse_mean: f64,
    pub mse_model: f64,
}

fn per_feature_train_means(train: &Dataset) -> Vec<Vec<f64>> {
    let num_views = train.schema.num_views();
    let mut means = Vec::with_capacity(num_views);
    for v in 0..num_views {
        let d = train.schema.view_dim(v);
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in &train.samples {
            if let Some(x) = s.view(v) {
                count += 1;
                for (a, b) in sum.iter_mut().zip(x) {
                    *a += b;
                }
            }
        }
        if count > 0 {
            for a in &mut sum {
                *a /= count as f64;
            }
        }
        means.push(sum);
    }
    means
}

fn impute_dataset_with_means(ds: &Dataset, means: &[Vec<f64>]) -> Result<Dataset> {
    let mut out = ds.clone();
    for s in &mut out.samples {
        let views = (0..s.num_views())
            .map(|v| {
                Some(match s.view(v) {
                    Some(x) => x.to_vec(),
                    None => means[v].clone(),
                })
            })
            .collect();
        *s = s.with_views(views)?;
    }
    Ok(out)
}

fn impute_dataset_with_model(
    ds: &Dataset,
    model: &MultiViewModel,
    params: &ModelParameters,
    mode: ImputeMode,
    seed: u64,
) -> Result<Dataset> {
    let mut out = ds.clone();
    for s in &mut out.samples {
        let mut rng = stream(seed, Domain::Eval, s.id());
        let imputed = model.impute_missing(params, s, mode, &mut rng)?;
        let views = imputed.views.into_iter().map(Some).collect();
        *s = s.with_views(views)?;
    }
    Ok(out)
}

/// Mean squared error of imputed values against clean ground truth, over
/// dropped entries only.
fn imputation_mse(imputed: &Dataset, dropped_reference: &Dataset, clean: &Dataset) -> f64 {
    let mut sq = 0.0;
    let mut n = 0usize;
    for ((imp, drop_ref), clean_s) in imputed
        .samples
        .iter()
        .zip(&dropped_reference.samples)
        .zip(&clean.samples)
    {
        debug_assert_eq!(imp.id(), clean_s.id());
        for v in 0..imp.num_views() {
            if drop_ref.view(v).is_some() {
                continue; // only score entries that were actually missing
            }
            let (Some(x_imp), Some(x_clean)) = (imp.view(v), clean_s.view(v)) else {
                continue;
            };
            for (a, b) in x_imp.iter().zip(x_clean) {
                sq += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sq / n as f64
    }
}

/// The impute-then-retrain protocol: fill absent views by (a) per-feature
/// train means and (b) the generative model, train the Base method on each
/// completed dataset, and score it on the completed test split. Also reports
/// the feature MSE of both imputations against clean dropped test entries.
pub fn evaluate_imputation(
    model: &MultiViewModel,
    params: &ModelParameters,
    bundle: &DatasetBundle,
    base_train_config: &TrainConfig,
    impute_mode: ImputeMode,
    seed: u64,
    hyperparameters: ReportHyperparams,
) -> Result<ImputationOutcome> {
    // Split provenance: Base must never see test labels during training.
    if bundle.train.split != SplitTag::Train
        || bundle.val.split != SplitTag::Val
        || bundle.test.split != SplitTag::Test
    {
        return Err(Error::invalid("bundle split tags are inconsistent"));
    }
    let clean = bundle
        .clean
        .as_deref()
        .ok_or_else(|| Error::invalid("imputation scoring needs the clean datasets"))?;

    let means = per_feature_train_means(&bundle.train);
    let mean_train = impute_dataset_with_means(&bundle.train, &means)?;
    let mean_val = impute_dataset_with_means(&bundle.val, &means)?;
    let mean_test = impute_dataset_with_means(&bundle.test, &means)?;

    let model_train = impute_dataset_with_model(&bundle.train, model, params, impute_mode, seed)?;
    let model_val = impute_dataset_with_model(&bundle.val, model, params, impute_mode, seed)?;
    let model_test = impute_dataset_with_model(&bundle.test, model, params, impute_mode, seed)?;

    let run_base = |train_ds: &Dataset, val_ds: &Dataset, test_ds: &Dataset, tag: &str| -> Result<MetricsReport> {
        let classifiers = base_train(train_ds, val_ds, base_train_config)?;
        evaluate_prediction(
            &BasePredictorAdapter { classifiers: &classifiers },
            test_ds,
            tag,
            seed,
            hyperparameters.clone(),
        )
    };

    let mean_imputed = run_base(&mean_train, &mean_val, &mean_test, "base_on_mean_imputed")?;
    let model_imputed = run_base(&model_train, &model_val, &model_test, "base_on_model_imputed")?;

    let mse_mean = imputation_mse(&mean_test, &bundle.test, &clean.2);
    let mse_model = imputation_mse(&model_test, &bundle.test, &clean.2);

    Ok(ImputationOutcome {
        mean_imputed,
        model_imputed,
        mse_mean,
        mse_model,
    })
}

struct BasePredictorAdapter<'a> {
    classifiers: &'a BaseClassifiers,
}

impl Predictor for BasePredictorAdapter<'_> {
    fn predict_proba(&self, sample: &crate::data::MultiViewSample) -> Result<Vec<f64>> {
        base_predict(self.classifiers, sample)
    }

    fn num_classes(&self) -> usize {
        self.classifiers.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Gamma,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Alpha => f.write_str("alpha"),
            SweepAxis::Gamma => f.write_str("gamma"),
        }
    }
}

/// One grid point of a sensitivity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Mean validation metric over seeds (NaN when every seed failed).
    pub metric: f64,
    pub per_seed: Vec<f64>,
    pub failures: Vec<String>,
}

/// Train one model per grid point (fresh seed-controlled init per seed) and
/// record the validation selection metric.
pub fn sensitivity_sweep(
    axis: SweepAxis,
    grid: &[f64],
    fixed_other: f64,
    bundle: &DatasetBundle,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid must be nonempty"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let (alpha, gamma) = match axis {
            SweepAxis::Alpha => (value, fixed_other),
            SweepAxis::Gamma => (fixed_other, value),
        };
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            let mut mc = model_config.clone();
            mc.alpha = alpha;
            mc.gamma = gamma;
            mc.seed = seed;
            let mut tc = train_config.clone();
            tc.seed = seed;
            let result = (|| -> Result<f64> {
                let model = MultiViewModel::new(bundle.train.schema.clone(), mc.clone())?;
                let objective = TrainObjective::full(gamma, alpha);
                let outcome = train(&model, &bundle.train, &bundle.val, &tc, &objective)?;
                let metric = outcome
                    .best_metric
                    .ok_or_else(|| Error::invalid("training produced no evaluation"))?;
                Ok(metric)
            })();
            match result {
                Ok(m) => per_seed.push(m),
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        let metric = if per_seed.is_empty() {
            f64::NAN
        } else {
            mean_std(&per_seed).0
        };
        points.push(SweepPoint {
            value,
            metric,
            per_seed,
            failures,
        });
    }
    Ok(points)
}

/// Two-column CSV (value, metric) for plotting.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "value,metric")?;
    for p in points {
        writeln!(f, "{},{}", p.value, p.metric)?;
    }
    Ok(())
}

/// Aggregate per-seed reports: method -> (auroc mean/std, accuracy mean/std).
pub fn aggregate_reports(reports: &[MetricsReport]) -> BTreeMap<String, ((f64, f64), (f64, f64))> {
    let mut by_method: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let entry = by_method.entry(r.method.clone()).or_default();
        entry.0.push(r.auroc);
        entry.1.push(r.accuracy);
    }
    by_method
        .into_iter()
        .map(|(k, (a, acc))| (k, (mean_std(&a), mean_std(&acc))))
        .collect()
}

/// The selection metric the paper emphasizes for a task: AUROC for binary,
/// accuracy for multiclass.
pub fn default_selection_metric(num_classes: usize) -> SelectionMetric {
    if num_classes == 2 {
        SelectionMetric::Auroc
    } else {
        SelectionMetric::Accuracy
    }
}
