//! Loss terms and the combined objective.
//!
//! Terms over a mixed labeled/unlabeled mini-batch with missing views:
//!
//! * supervised information-bottleneck loss: mean over labeled samples of
//!   cross-entropy plus `beta` times the fused-posterior KL, plus `beta`
//!   times the mean per-view KL over (labeled sample, present view) pairs;
//! * unsupervised loss: mean over samples of the present-view reconstruction
//!   negative log-likelihood plus `beta` times the fused KL (the negative of
//!   the batch ELBO);
//! * cross-view mutual information: the symmetrized contrastive estimator
//!   with cosine affinities, averaged over all view pairs that have at least
//!   two aligned samples, sign-flipped;
//! * total = unsup + gamma * sup + alpha * cvmi.
//!
//! One standard-normal noise vector is drawn per sample per step and reused
//! for the fused latent and every per-view latent, so all terms share their
//! randomness within a step. Every function here is deterministic given
//! `(params, batch, noise)`; parallel evaluation uses fixed-order chunked
//! reduction and is bitwise identical to sequential evaluation.

use serde::{Deserialize, Serialize};

use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::gaussian::kl_to_standard;
use crate::model::{ModelParameters, MultiViewModel, SampleForward, SampleUpstream};
use crate::nn::ops;
use crate::par::{fold_chunked, map_indexed, ExecMode};
use crate::rng::{standard_normal_vec, stream, Domain};

/// Per-step record of every loss component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    /// Mean reconstruction NLL of view v over samples where v is present.
    #[serde(rename = "recon")]
    pub recon_per_view: Vec<f64>,
    /// Mean fused-posterior KL over the batch.
    pub kl_joint: f64,
    /// Mean per-view KL over (labeled sample, present view) pairs, per view.
    #[serde(rename = "kl_view")]
    pub kl_per_view: Vec<f64>,
    /// Mean cross-entropy over labeled samples.
    #[serde(rename = "ce")]
    pub cross_entropy: f64,
    pub cvmi: f64,
    pub total: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// View pairs with >= 2 aligned samples this step.
    pub n_pairs: usize,
    /// Raw term values entering the total (not serialized in step logs).
    #[serde(skip)]
    pub unsup_term: f64,
    #[serde(skip)]
    pub sup_term: f64,
}

/// Multipliers on the three terms of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub unsup: f64,
    pub sup: f64,
    pub cvmi: f64,
}

impl TermWeights {
    pub fn total(gamma: f64, alpha: f64) -> Self {
        Self {
            unsup: 1.0,
            sup: gamma,
            cvmi: alpha,
        }
    }
}

/// One noise row per sample, drawn from the step stream in batch order.
pub fn step_noise(seed: u64, step: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Domain::StepNoise, step);
    (0..n).map(|_| standard_normal_vec(&mut rng, dim)).collect()
}

/// Gaussian unit-variance reconstruction NLL (constants included) and its
/// gradient w.r.t. the decoder mean.
fn gaussian_nll(mean: &[f64], x: &[f64], d_out: Option<&mut [f64]>, scale: f64) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut nll = 0.0;
    for (k, (&m, &xv)) in mean.iter().zip(x).enumerate() {
        let diff = m - xv;
        nll += 0.5 * (diff * diff + LN_2PI);
        if let Some(&mut ref mut d) = d_out {
            d[k] += scale * diff;
        }
    }
    nll
}

/// Bernoulli reconstruction NLL from logits and its gradient.
fn bernoulli_nll(logits: &[f64], x: &[f64], d_out: Option<&mut [f64]>, scale: f64) -> f64 {
    let mut nll = 0.0;
    for (k, (&l, &xv)) in logits.iter().zip(x).enumerate() {
        nll += ops::softplus(l) - xv * l;
        if let Some(&mut ref mut d) = d_out {
            d[k] += scale * (ops::sigmoid(l) - xv);
        }
    }
    nll
}

/// Cross-entropy of one labeled sample from predictor logits; gradient is
/// `scale * (softmax - onehot)`.
fn cross_entropy(logits: &[f64], label: usize, d_out: Option<&mut [f64]>, scale: f64) -> f64 {
    let lse = ops::log_sum_exp(logits);
    if let Some(&mut ref mut d) = d_out {
        for (c, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            d[c] += scale * (p - if c == label { 1.0 } else { 0.0 });
        }
    }
    lse - logits[label]
}

/// Symmetrized contrastive mutual-information estimate between two aligned
/// batches of latent vectors.
///
/// For each anchor the positive is its aligned row; the other `m - 1` rows of
/// the opposite batch are negatives, and the denominator is the positive
/// affinity plus all negative affinities. Affinity is `exp(cos / temperature)`.
/// The two directions are averaged. Returns `Ok(None)` when `m < 2` (the pair
/// carries no contrastive signal).
pub fn infonce_pair(z_i: &[Vec<f64>], z_j: &[Vec<f64>], temperature: f64) -> Result<Option<f64>> {
    infonce_pair_impl(z_i, z_j, temperature, None)
}

/// As `infonce_pair`, also accumulating gradients w.r.t. both input batches
/// scaled by `scale` into `grads = (d_z_i, d_z_j)`.
fn infonce_pair_impl(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    temperature: f64,
    grads: Option<(&mut [Vec<f64>], &mut [Vec<f64>], f64)>,
) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid("aligned batches must have equal length"));
    }
    let m = a.len();
    if m < 2 {
        return Ok(None);
    }
    let norms = |rows: &[Vec<f64>]| -> Result<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-300 {
                    Err(Error::invalid("zero-norm latent vector in contrastive pair"))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = norms(a)?;
    let nb = norms(b)?;

    // c[i][j] = cos(a_i, b_j) / temperature
    let mut c = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
            c[i][j] = dot / (na[i] * nb[j] * temperature);
        }
    }

    let mut value = 0.0;
    for i in 0..m {
        let lse_row = ops::log_sum_exp(&c[i]);
        value += c[i][i] - lse_row;
        let col: Vec<f64> = (0..m).map(|k| c[k][i]).collect();
        let lse_col = ops::log_sum_exp(&col);
        value += c[i][i] - lse_col;
    }
    value *= 0.5 / m as f64;

    if let Some((d_a, d_b, scale)) = grads {
        // d value / d c[k][l] = (0.5/m) (2 delta_kl - rowsoftmax - colsoftmax)
        let mut g = vec![vec![0.0; m]; m];
        for k in 0..m {
            let lse_row = ops::log_sum_exp(&c[k]);
            for l in 0..m {
                g[k][l] += -(c[k][l] - lse_row).exp();
            }
            g[k][k] += 1.0;
        }
        for l in 0..m {
            let col: Vec<f64> = (0..m).map(|k| c[k][l]).collect();
            let lse_col = ops::log_sum_exp(&col);
            for k in 0..m {
                g[k][l] += -(c[k][l] - lse_col).exp();
            }
            g[l][l] += 1.0;
        }
        let factor = scale * 0.5 / m as f64;
        for k in 0..m {
            for l in 0..m {
                let gv = factor * g[k][l];
                if gv == 0.0 {
                    continue;
                }
                let cos = c[k][l] * temperature;
                let inv = 1.0 / (na[k] * nb[l]);
                for d in 0..a[k].len() {
                    d_a[k][d] += gv / temperature * (b[l][d] * inv - cos * a[k][d] / (na[k] * na[k]));
                    d_b[l][d] += gv / temperature * (a[k][d] * inv - cos * b[l][d] / (nb[l] * nb[l]));
                }
            }
        }
    }
    Ok(Some(value))
}

/// Lower bound of the contrastive estimate for batch size `m` (temperature 1).
pub fn infonce_lower_bound(m: usize) -> f64 {
    -1.0 - ((-1.0f64).exp() + (m as f64 - 1.0) * 1.0f64.exp()).ln()
}

/// Cross-view MI loss over per-view latent batches.
///
/// `latents[v][i]` is the latent draw of sample `i` under view `v`, `None`
/// where the view is absent. For each unordered view pair, samples with both
/// views present form the aligned batch; pairs with fewer than two such
/// samples are skipped. Returns the loss and the number of contributing pairs.
pub fn cvmi_loss(latents: &[Vec<Option<Vec<f64>>>], temperature: f64) -> Result<(f64, usize)> {
    let num_views = latents.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for u in 0..num_views {
        for v in (u + 1)..num_views {
            let aligned: Vec<usize> = (0..latents[u].len())
                .filter(|&i| latents[u][i].is_some() && latents[v][i].is_some())
                .collect();
            if aligned.len() < 2 {
                continue;
            }
            let a: Vec<Vec<f64>> = aligned
                .iter()
                .map(|&i| latents[u][i].clone().unwrap())
                .collect();
            let b: Vec<Vec<f64>> = aligned
                .iter()
                .map(|&i| latents[v][i].clone().unwrap())
                .collect();
            if let Some(value) = infonce_pair(&a, &b, temperature)? {
                total -= value;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok((0.0, 0));
    }
    Ok((total / pairs as f64, pairs))
}

struct BatchState {
    forwards: Vec<SampleForward>,
    /// Per-sample membership in the unsupervised mean.
    in_unsup: Vec<bool>,
    n_unsup: usize,
    labeled: Vec<bool>,
    n_labeled: usize,
    /// (labeled sample, present view) pair count.
    sup_view_pairs: usize,
    /// (unsup sample, present view) pair count.
    unsup_view_pairs: usize,
}

fn validate_batch(model: &MultiViewModel, batch: &[&MultiViewSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    for s in batch {
        if s.num_views() != model.schema.num_views() {
            return Err(Error::invalid("sample view count does not match schema"));
        }
        if let Some(y) = s.label() {
            if y >= model.schema.num_classes {
                return Err(Error::invalid(format!(
                    "label {y} outside [0, {})",
                    model.schema.num_classes
                )));
            }
        }
    }
    Ok(())
}

fn forward_batch(
    model: &MultiViewModel,
    params: &[f64],
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
    mode: ExecMode,
) -> Result<BatchState> {
    if noise.len() != batch.len() {
        return Err(Error::invalid("one noise row per sample required"));
    }
    let forwards: Vec<Result<SampleForward>> = map_indexed(mode, batch.len(), |i| {
        model.forward_sample(params, batch[i], &noise[i], batch[i].label().is_some())
    });
    let forwards: Vec<SampleForward> = forwards.into_iter().collect::<Result<_>>()?;

    let labeled: Vec<bool> = batch.iter().map(|s| s.label().is_some()).collect();
    let n_labeled = labeled.iter().filter(|&&l| l).count();
    let in_unsup: Vec<bool> = labeled
        .iter()
        .map(|&l| model.config.unsup_on_labeled || !l)
        .collect();
    let n_unsup = in_unsup.iter().filter(|&&u| u).count();
    let mut sup_view_pairs = 0;
    let mut unsup_view_pairs = 0;
    for (i, s) in batch.iter().enumerate() {
        if labeled[i] {
            sup_view_pairs += s.present_count();
        }
        if in_unsup[i] {
            unsup_view_pairs += s.present_count();
        }
    }
    Ok(BatchState {
        forwards,
        in_unsup,
        n_unsup,
        labeled,
        n_labeled,
        sup_view_pairs,
        unsup_view_pairs,
    })
}

fn evaluate_impl(
    model: &MultiViewModel,
    params: &[f64],
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
    weights: TermWeights,
    step: u64,
    mode: ExecMode,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    validate_batch(model, batch)?;
    let state = forward_batch(model, params, batch, noise, mode)?;
    let num_views = model.schema.num_views();
    let beta = model.config.beta;
    let n = batch.len();

    // Scalar terms, fixed accumulation order.
    let mut recon_sum = vec![0.0; num_views];
    let mut recon_count = vec![0usize; num_views];
    let mut kl_fused_sum_all = 0.0;
    let mut kl_fused_sum_unsup = 0.0;
    let mut kl_fused_sum_labeled = 0.0;
    let mut kl_view_sum_labeled = vec![0.0; num_views];
    let mut kl_view_labeled_count = vec![0usize; num_views];
    let mut kl_view_total_labeled = 0.0;
    let mut kl_view_total_unsup = 0.0;
    let mut recon_total_unsup = 0.0;
    let mut ce_sum = 0.0;

    for (i, (s, fwd)) in batch.iter().zip(&state.forwards).enumerate() {
        let kl_fused = kl_to_standard(&fwd.fused);
        kl_fused_sum_all += kl_fused;
        if state.in_unsup[i] {
            kl_fused_sum_unsup += kl_fused;
        }
        if state.labeled[i] {
            kl_fused_sum_labeled += kl_fused;
        }
        for v in 0..num_views {
            let (Some(x), Some(dec)) = (s.view(v), fwd.dec[v].as_ref()) else {
                continue;
            };
            let nll = match model.schema.view_likelihoods[v] {
                crate::model::ViewLikelihood::GaussianUnitVariance => {
                    gaussian_nll(&dec.output, x, None, 0.0)
                }
                crate::model::ViewLikelihood::Bernoulli => bernoulli_nll(&dec.output, x, None, 0.0),
            };
            recon_sum[v] += nll;
            recon_count[v] += 1;
            if state.in_unsup[i] {
                recon_total_unsup += nll;
            }
            let vf = fwd.views[v].as_ref().expect("present view has forward");
            let kl_v = kl_to_standard(&vf.posterior);
            if state.labeled[i] {
                kl_view_sum_labeled[v] += kl_v;
                kl_view_labeled_count[v] += 1;
                kl_view_total_labeled += kl_v;
            }
            if state.in_unsup[i] {
                kl_view_total_unsup += kl_v;
            }
        }
        if state.labeled[i] {
            let logits = &fwd.pred.as_ref().expect("labeled sample has predictor").output;
            ce_sum += cross_entropy(logits, s.label().unwrap(), None, 0.0);
        }
    }

    let unsup_term = if state.n_unsup > 0 {
        let mut t = (recon_total_unsup + beta * kl_fused_sum_unsup) / state.n_unsup as f64;
        if model.config.per_view_kl_unsup && state.unsup_view_pairs > 0 {
            t += beta * kl_view_total_unsup / state.unsup_view_pairs as f64;
        }
        t
    } else {
        0.0
    };
    let sup_term = if state.n_labeled > 0 {
        (ce_sum + beta * kl_fused_sum_labeled) / state.n_labeled as f64
            + if state.sup_view_pairs > 0 {
                beta * kl_view_total_labeled / state.sup_view_pairs as f64
            } else {
                0.0
            }
    } else {
        0.0
    };

    // Cross-view MI over per-view latent draws.
    let temperature = model.config.infonce_temperature;
    let mut d_z_view: Vec<Vec<Option<Vec<f64>>>> = if want_grad {
        (0..n)
            .map(|i| {
                (0..num_views)
                    .map(|v| state.forwards[i].views[v].as_ref().map(|_| vec![0.0; model.latent_dim()]))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut cvmi_total = 0.0;
    let mut qualifying: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for u in 0..num_views {
        for v in (u + 1)..num_views {
            let aligned: Vec<usize> = (0..n)
                .filter(|&i| {
                    state.forwards[i].views[u].is_some() && state.forwards[i].views[v].is_some()
                })
                .collect();
            if aligned.len() >= 2 {
                qualifying.push((u, v, aligned));
            }
        }
    }
    let n_pairs = qualifying.len();
    if n_pairs > 0 {
        // First pass without gradients to fix the pair normalizer, then the
        // gradient pass folds in -weights.cvmi / n_pairs per pair.
        for (u, v, aligned) in &qualifying {
            let a: Vec<Vec<f64>> = aligned
                .iter()
                .map(|&i| state.forwards[i].views[*u].as_ref().unwrap().z_view.clone())
                .collect();
            let b: Vec<Vec<f64>> = aligned
                .iter()
                .map(|&i| state.forwards[i].views[*v].as_ref().unwrap().z_view.clone())
                .collect();
            if want_grad && weights.cvmi != 0.0 {
                let m = aligned.len();
                let dim = model.latent_dim();
                let mut d_a = vec![vec![0.0; dim]; m];
                let mut d_b = vec![vec![0.0; dim]; m];
                let scale = -weights.cvmi / n_pairs as f64;
                let value = infonce_pair_impl(&a, &b, temperature, Some((&mut d_a, &mut d_b, scale)))?
                    .expect("pair has >= 2 aligned samples");
                cvmi_total -= value;
                for (row, &i) in aligned.iter().enumerate() {
                    let du = d_z_view[i][*u].as_mut().unwrap();
                    for (t, g) in du.iter_mut().zip(&d_a[row]) {
                        *t += g;
                    }
                    let dv = d_z_view[i][*v].as_mut().unwrap();
                    for (t, g) in dv.iter_mut().zip(&d_b[row]) {
                        *t += g;
                    }
                }
            } else {
                let value = infonce_pair(&a, &b, temperature)?.expect("pair has >= 2 aligned");
                cvmi_total -= value;
            }
        }
    }
    let cvmi_term = if n_pairs > 0 {
        cvmi_total / n_pairs as f64
    } else {
        0.0
    };

    let total = weights.unsup * unsup_term + weights.sup * sup_term + weights.cvmi * cvmi_term;

    let grad = if want_grad {
        let unsup_w = if state.n_unsup > 0 {
            weights.unsup / state.n_unsup as f64
        } else {
            0.0
        };
        let sup_w = if state.n_labeled > 0 {
            weights.sup / state.n_labeled as f64
        } else {
            0.0
        };
        let kl_view_sup_w = if state.sup_view_pairs > 0 {
            weights.sup * beta / state.sup_view_pairs as f64
        } else {
            0.0
        };
        let kl_view_unsup_w = if model.config.per_view_kl_unsup && state.unsup_view_pairs > 0 {
            weights.unsup * beta / state.unsup_view_pairs as f64
        } else {
            0.0
        };
        let param_count = model.param_count();
        let batch_ref = &batch;
        let state_ref = &state;
        let d_z_view_ref = &d_z_view;
        let grad = fold_chunked(
            mode,
            n,
            || vec![0.0; param_count],
            |acc, i| {
                let s = batch_ref[i];
                let fwd = &state_ref.forwards[i];
                let w_unsup_i = if state_ref.in_unsup[i] { unsup_w } else { 0.0 };
                let w_sup_i = if state_ref.labeled[i] { sup_w } else { 0.0 };

                let mut up = SampleUpstream {
                    d_pred_logits: None,
                    d_dec_out: vec![None; num_views],
                    kl_fused_coeff: beta * (w_unsup_i + w_sup_i),
                    kl_view_coeff: if state_ref.labeled[i] { kl_view_sup_w } else { 0.0 }
                        + if state_ref.in_unsup[i] { kl_view_unsup_w } else { 0.0 },
                    d_z_view: vec![None; num_views],
                };

                if state_ref.labeled[i] && w_sup_i != 0.0 {
                    let logits = &fwd.pred.as_ref().unwrap().output;
                    let mut d = vec![0.0; logits.len()];
                    cross_entropy(logits, s.label().unwrap(), Some(&mut d), w_sup_i);
                    up.d_pred_logits = Some(d);
                }
                if w_unsup_i != 0.0 {
                    for v in 0..num_views {
                        let (Some(x), Some(dec)) = (s.view(v), fwd.dec[v].as_ref()) else {
                            continue;
                        };
                        let mut d = vec![0.0; dec.output.len()];
                        match model.schema.view_likelihoods[v] {
                            crate::model::ViewLikelihood::GaussianUnitVariance => {
                                gaussian_nll(&dec.output, x, Some(&mut d), w_unsup_i);
                            }
                            crate::model::ViewLikelihood::Bernoulli => {
                                bernoulli_nll(&dec.output, x, Some(&mut d), w_unsup_i);
                            }
                        }
                        up.d_dec_out[v] = Some(d);
                    }
                }
                if weights.cvmi != 0.0 && !d_z_view_ref.is_empty() {
                    up.d_z_view = d_z_view_ref[i].clone();
                }
                model.backward_sample(params, fwd, &up, acc);
            },
            |a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            },
        )
        .unwrap_or_else(|| vec![0.0; param_count]);
        Some(grad)
    } else {
        None
    };
    drop(d_z_view.drain(..));

    let breakdown = LossBreakdown {
        step,
        recon_per_view: recon_sum
            .iter()
            .zip(&recon_count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect(),
        kl_joint: kl_fused_sum_all / n as f64,
        kl_per_view: kl_view_sum_labeled
            .iter()
            .zip(&kl_view_labeled_count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect(),
        cross_entropy: if state.n_labeled > 0 {
            ce_sum / state.n_labeled as f64
        } else {
            0.0
        },
        cvmi: cvmi_term,
        total,
        n_labeled: state.n_labeled,
        n_unlabeled: n - state.n_labeled,
        n_pairs,
        unsup_term,
        sup_term,
    };
    Ok((breakdown, grad))
}

/// Supervised information-bottleneck loss (zero on label-free batches).
pub fn supervised_ib_loss(
    model: &MultiViewModel,
    params: &ModelParameters,
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
) -> Result<(f64, LossBreakdown)> {
    let (b, _) = evaluate_impl(
        model,
        &params.values,
        batch,
        noise,
        TermWeights { unsup: 0.0, sup: 1.0, cvmi: 0.0 },
        0,
        ExecMode::Parallel,
        false,
    )?;
    Ok((b.sup_term, b))
}

/// Negative batch ELBO over present views.
pub fn unsupervised_elbo_loss(
    model: &MultiViewModel,
    params: &ModelParameters,
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
) -> Result<(f64, LossBreakdown)> {
    let (b, _) = evaluate_impl(
        model,
        &params.values,
        batch,
        noise,
        TermWeights { unsup: 1.0, sup: 0.0, cvmi: 0.0 },
        0,
        ExecMode::Parallel,
        false,
    )?;
    Ok((b.unsup_term, b))
}

/// Combined objective with shared latent draws across terms.
pub fn total_loss(
    model: &MultiViewModel,
    params: &ModelParameters,
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
    gamma: f64,
    alpha: f64,
) -> Result<(f64, LossBreakdown)> {
    let (b, _) = evaluate_impl(
        model,
        &params.values,
        batch,
        noise,
        TermWeights::total(gamma, alpha),
        0,
        ExecMode::Parallel,
        false,
    )?;
    Ok((b.total, b))
}

/// Loss plus gradient w.r.t. every parameter, under arbitrary term weights.
pub fn loss_with_grad(
    model: &MultiViewModel,
    params: &[f64],
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
    weights: TermWeights,
    step: u64,
    mode: ExecMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (b, g) = evaluate_impl(model, params, batch, noise, weights, step, mode, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Loss breakdown only (no gradient).
pub fn loss_only(
    model: &MultiViewModel,
    params: &[f64],
    batch: &[&MultiViewSample],
    noise: &[Vec<f64>],
    weights: TermWeights,
    step: u64,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    let (b, _) = evaluate_impl(model, params, batch, noise, weights, step, mode, false)?;
    Ok(b)
}
