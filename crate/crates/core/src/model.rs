//! The multi-view network.
//!
//! Per view: a Gaussian encoder producing a `DiagGaussian` posterior and a
//! decoder mapping latents back to feature space. A predictor head runs on
//! the fused latent. Fusion of present views is a product of experts with the
//! standard prior always included, so the posterior stays proper under any
//! missingness pattern.
//!
//! Training needs per-sample backward passes; `forward_sample` caches every
//! intermediate and `backward_sample` consumes upstream gradients assembled
//! by the loss module. Gradients only ever touch parameters of views that are
//! present in the sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::gaussian::{self, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{ops, Conv2d, Mlp, MlpCache, ParamAlloc, ParamRange};
use crate::rng::{stream, Domain};

/// Shape of one view's feature tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewShape {
    Flat { dim: usize },
    Image { height: usize, width: usize, channels: usize },
}

impl ViewShape {
    pub fn dim(&self) -> usize {
        match self {
            ViewShape::Flat { dim } => *dim,
            ViewShape::Image { height, width, channels } => height * width * channels,
        }
    }
}

/// Observation model of one view's decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLikelihood {
    GaussianUnitVariance,
    Bernoulli,
}

/// Static description of a multi-view dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub view_shapes: Vec<ViewShape>,
    pub num_classes: usize,
    pub view_likelihoods: Vec<ViewLikelihood>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.view_shapes.len() < 2 {
            return Err(Error::invalid("schema needs at least 2 views"));
        }
        if self.view_likelihoods.len() != self.view_shapes.len() {
            return Err(Error::invalid("one likelihood per view required"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("schema needs at least 2 classes"));
        }
        if self.view_shapes.iter().any(|s| s.dim() == 0) {
            return Err(Error::invalid("views must have dimension >= 1"));
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.view_shapes.len()
    }

    pub fn view_dim(&self, v: usize) -> usize {
        self.view_shapes[v].dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Mlp,
    Conv,
}

fn default_beta() -> f64 {
    0.1
}
fn default_hidden() -> Vec<usize> {
    vec![128]
}
fn default_true() -> bool {
    true
}
fn default_temperature() -> f64 {
    1.0
}

/// Model hyperparameters. `beta` weights the KL terms, `gamma` the supervised
/// objective, `alpha` the cross-view mutual-information regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub predictor_hidden: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    #[serde(default = "default_family")]
    pub encoder_family: EncoderFamily,
    #[serde(default)]
    pub seed: u64,
    /// Apply the generative (ELBO) term to labeled samples too.
    #[serde(default = "default_true")]
    pub unsup_on_labeled: bool,
    /// Attach per-view KL terms to the unsupervised path as well as the
    /// supervised one.
    #[serde(default)]
    pub per_view_kl_unsup: bool,
    /// Divisor applied to cosine affinities in the contrastive estimator.
    #[serde(default = "default_temperature")]
    pub infonce_temperature: f64,
    /// Permit fusing zero present views (prior-only posterior).
    #[serde(default)]
    pub allow_prior_only_fusion: bool,
}

fn default_family() -> EncoderFamily {
    EncoderFamily::Mlp
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid("beta must be > 0"));
        }
        if self.gamma < 0.0 || self.alpha < 0.0 {
            return Err(Error::invalid("gamma and alpha must be >= 0"));
        }
        if self.infonce_temperature <= 0.0 {
            return Err(Error::invalid("infonce_temperature must be > 0"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_hidden: default_hidden(),
            decoder_hidden: default_hidden(),
            predictor_hidden: default_hidden(),
            beta: default_beta(),
            gamma: 1.0,
            alpha: 1.0,
            encoder_family: EncoderFamily::Mlp,
            seed: 0,
            unsup_on_labeled: true,
            per_view_kl_unsup: false,
            infonce_temperature: default_temperature(),
            allow_prior_only_fusion: false,
        }
    }
}

/// Flat parameter vector; group boundaries live in the model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub values: Vec<f64>,
}

impl ModelParameters {
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum ViewEncoder {
    Mlp(Mlp),
    Conv {
        conv1: Conv2d,
        conv2: Conv2d,
        head: Mlp,
    },
}

/// Cached encoder intermediates for one (sample, view).
#[derive(Debug, Clone)]
pub enum EncCache {
    Mlp(MlpCache),
    Conv {
        input: Vec<f64>,
        act1: Vec<f64>,
        act2: Vec<f64>,
        head: MlpCache,
    },
}

/// Everything the backward pass needs about one present view.
#[derive(Debug, Clone)]
pub struct ViewForward {
    pub cache: EncCache,
    pub posterior: DiagGaussian,
    /// 1.0 where the log-variance clamp is inactive, else 0.0.
    pub lv_grad_mask: Vec<f64>,
    /// Per-view reparameterized draw (shares the sample's noise vector).
    pub z_view: Vec<f64>,
}

/// Forward caches for one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub noise: Vec<f64>,
    pub views: Vec<Option<ViewForward>>,
    pub fused: DiagGaussian,
    pub fused_lv_grad_mask: Vec<f64>,
    /// Per-dimension total precision of the fused posterior (prior included).
    pub precision_total: Vec<f64>,
    pub z: Vec<f64>,
    /// Decoder caches for present views; outputs are raw (means for Gaussian
    /// views, logits for Bernoulli views).
    pub dec: Vec<Option<MlpCache>>,
    /// Predictor cache (logits), present for labeled samples.
    pub pred: Option<MlpCache>,
}

/// Upstream gradients for one sample, assembled by the loss module.
#[derive(Debug, Clone, Default)]
pub struct SampleUpstream {
    /// d loss / d predictor logits.
    pub d_pred_logits: Option<Vec<f64>>,
    /// d loss / d decoder raw output, per present view.
    pub d_dec_out: Vec<Option<Vec<f64>>>,
    /// Coefficient on `KL(fused || prior)`.
    pub kl_fused_coeff: f64,
    /// Coefficient on each present view's `KL(q_v || prior)`.
    pub kl_view_coeff: f64,
    /// d loss / d per-view latent draw, per present view.
    pub d_z_view: Vec<Option<Vec<f64>>>,
}

/// How `predict_sample` turns the fused posterior into class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    PosteriorMean,
    MonteCarlo { draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    Mean,
    Sample,
}

/// Output of `impute_missing`: a complete set of view tensors.
#[derive(Debug, Clone)]
pub struct ImputedViews {
    pub views: Vec<Vec<f64>>,
    /// True where the view was generated rather than observed.
    pub imputed: Vec<bool>,
}

/// The multi-view architecture: layout plus hyperparameters. Parameters are
/// stored separately so several parameter vectors can share one model.
#[derive(Debug, Clone)]
pub struct MultiViewModel {
    pub schema: DatasetSchema,
    pub config: ModelConfig,
    encoders: Vec<ViewEncoder>,
    decoders: Vec<Mlp>,
    predictor: Mlp,
    encoder_ranges: Vec<ParamRange>,
    decoder_ranges: Vec<ParamRange>,
    predictor_range: ParamRange,
    param_count: usize,
}

impl MultiViewModel {
    pub fn new(schema: DatasetSchema, config: ModelConfig) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let mut alloc = ParamAlloc::default();
        let latent = config.latent_dim;

        let mut encoders = Vec::new();
        let mut encoder_ranges = Vec::new();
        for shape in &schema.view_shapes {
            let start = alloc.total();
            let enc = match (&config.encoder_family, shape) {
                (EncoderFamily::Conv, ViewShape::Image { height, width, channels }) => {
                    let conv1 = Conv2d::alloc(&mut alloc, *channels, 8, 3, 2, 1, *height, *width);
                    let conv2 =
                        Conv2d::alloc(&mut alloc, 8, 16, 3, 2, 1, conv1.out_h, conv1.out_w);
                    let mut dims = vec![conv2.out_len()];
                    dims.extend_from_slice(&config.encoder_hidden);
                    dims.push(2 * latent);
                    let head = Mlp::alloc(&mut alloc, &dims);
                    ViewEncoder::Conv { conv1, conv2, head }
                }
                _ => {
                    let mut dims = vec![shape.dim()];
                    dims.extend_from_slice(&config.encoder_hidden);
                    dims.push(2 * latent);
                    ViewEncoder::Mlp(Mlp::alloc(&mut alloc, &dims))
                }
            };
            encoders.push(enc);
            encoder_ranges.push(start..alloc.total());
        }

        let mut decoders = Vec::new();
        let mut decoder_ranges = Vec::new();
        for shape in &schema.view_shapes {
            let start = alloc.total();
            let mut dims = vec![latent];
            dims.extend_from_slice(&config.decoder_hidden);
            dims.push(shape.dim());
            decoders.push(Mlp::alloc(&mut alloc, &dims));
            decoder_ranges.push(start..alloc.total());
        }

        let start = alloc.total();
        let mut dims = vec![latent];
        dims.extend_from_slice(&config.predictor_hidden);
        dims.push(schema.num_classes);
        let predictor = Mlp::alloc(&mut alloc, &dims);
        let predictor_range = start..alloc.total();

        Ok(Self {
            schema,
            config,
            encoders,
            decoders,
            predictor,
            encoder_ranges,
            decoder_ranges,
            predictor_range,
            param_count: alloc.total(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Flat-vector range holding encoder parameters of view `v`.
    pub fn encoder_range(&self, v: usize) -> ParamRange {
        self.encoder_ranges[v].clone()
    }

    pub fn decoder_range(&self, v: usize) -> ParamRange {
        self.decoder_ranges[v].clone()
    }

    pub fn predictor_range(&self) -> ParamRange {
        self.predictor_range.clone()
    }

    /// Fresh parameters drawn from the config seed.
    pub fn init_params(&self) -> ModelParameters {
        let mut values = vec![0.0; self.param_count];
        let mut rng = stream(self.config.seed, Domain::ParamInit, 0);
        for enc in &self.encoders {
            match enc {
                ViewEncoder::Mlp(m) => m.init(&mut values, &mut rng),
                ViewEncoder::Conv { conv1, conv2, head } => {
                    conv1.init(&mut values, &mut rng);
                    conv2.init(&mut values, &mut rng);
                    head.init(&mut values, &mut rng);
                }
            }
        }
        for dec in &self.decoders {
            dec.init(&mut values, &mut rng);
        }
        self.predictor.init(&mut values, &mut rng);
        ModelParameters { values }
    }

    fn check_view_input(&self, v: usize, x: &[f64]) -> Result<()> {
        if v >= self.schema.num_views() {
            return Err(Error::invalid(format!("view index {v} out of range")));
        }
        if x.len() != self.schema.view_dim(v) {
            return Err(Error::invalid(format!(
                "view {v} expects {} features, got {}",
                self.schema.view_dim(v),
                x.len()
            )));
        }
        Ok(())
    }

    fn encode_view_cached(&self, params: &[f64], v: usize, x: &[f64]) -> Result<(EncCache, DiagGaussian, Vec<f64>)> {
        self.check_view_input(v, x)?;
        let latent = self.config.latent_dim;
        let (cache, raw) = match &self.encoders[v] {
            ViewEncoder::Mlp(m) => {
                let c = m.forward(params, x);
                let raw = c.output.clone();
                (EncCache::Mlp(c), raw)
            }
            ViewEncoder::Conv { conv1, conv2, head } => {
                let mut a1 = conv1.forward(params, x);
                for v in &mut a1 {
                    *v = v.tanh();
                }
                let mut a2 = conv2.forward(params, &a1);
                for v in &mut a2 {
                    *v = v.tanh();
                }
                let c = head.forward(params, &a2);
                let raw = c.output.clone();
                (
                    EncCache::Conv {
                        input: x.to_vec(),
                        act1: a1,
                        act2: a2,
                        head: c,
                    },
                    raw,
                )
            }
        };
        let mean = raw[..latent].to_vec();
        let raw_lv = &raw[latent..];
        let mask = raw_lv
            .iter()
            .map(|&lv| if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) { 1.0 } else { 0.0 })
            .collect();
        let posterior = DiagGaussian::new(mean, raw_lv.to_vec())?;
        Ok((cache, posterior, mask))
    }

    /// Deterministic per-view posterior.
    pub fn encode_view(&self, params: &ModelParameters, v: usize, x: &[f64]) -> Result<DiagGaussian> {
        let (_, posterior, _) = self.encode_view_cached(&params.values, v, x)?;
        Ok(posterior)
    }

    /// PoE over posteriors of present views with the standard prior.
    ///
    /// `posteriors[v]` must be `Some` exactly for present views.
    pub fn fuse_present(&self, posteriors: &[Option<DiagGaussian>]) -> Result<DiagGaussian> {
        let present: Vec<DiagGaussian> = posteriors.iter().flatten().cloned().collect();
        if present.is_empty() && !self.config.allow_prior_only_fusion {
            return Err(Error::invalid(
                "cannot fuse a sample with zero present views (allow_prior_only_fusion disabled)",
            ));
        }
        let prior = gaussian::standard_prior(self.config.latent_dim)?;
        gaussian::poe_fuse(&present, &prior)
    }

    /// Decode view `v` from latent `z`. Gaussian views return per-element
    /// means; Bernoulli views return probabilities strictly inside (0, 1).
    pub fn decode_view(&self, params: &ModelParameters, v: usize, z: &[f64]) -> Result<Vec<f64>> {
        if v >= self.schema.num_views() {
            return Err(Error::invalid(format!("view index {v} out of range")));
        }
        if z.len() != self.config.latent_dim {
            return Err(Error::invalid("latent dimension mismatch"));
        }
        let raw = self.decoders[v].forward(&params.values, z).output;
        Ok(match self.schema.view_likelihoods[v] {
            ViewLikelihood::GaussianUnitVariance => raw,
            ViewLikelihood::Bernoulli => raw.iter().map(|&l| ops::sigmoid(l)).collect(),
        })
    }

    /// Class probabilities from a latent vector.
    pub fn predict(&self, params: &ModelParameters, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::invalid("latent dimension mismatch"));
        }
        let mut logits = self.predictor.forward(&params.values, z).output;
        ops::softmax(&mut logits);
        Ok(logits)
    }

    /// Posterior of the fused latent for a sample's present views.
    pub fn posterior_for_sample(&self, params: &ModelParameters, sample: &MultiViewSample) -> Result<DiagGaussian> {
        let mut posts = Vec::with_capacity(self.schema.num_views());
        for v in 0..self.schema.num_views() {
            posts.push(match sample.view(v) {
                Some(x) => Some(self.encode_view(params, v, x)?),
                None => None,
            });
        }
        self.fuse_present(&posts)
    }

    /// Class probabilities for a sample under the chosen decoding rule.
    pub fn predict_sample(
        &self,
        params: &ModelParameters,
        sample: &MultiViewSample,
        mode: PredictMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if sample.present_count() == 0 {
            return Err(Error::invalid("sample has no present views"));
        }
        let fused = self.posterior_for_sample(params, sample)?;
        match mode {
            PredictMode::PosteriorMean => self.predict(params, fused.mean()),
            PredictMode::MonteCarlo { draws } => {
                if draws == 0 {
                    return Err(Error::invalid("monte-carlo mode needs >= 1 draw"));
                }
                let mut acc = vec![0.0; self.schema.num_classes];
                for _ in 0..draws {
                    let eps = crate::rng::standard_normal_vec(rng, self.config.latent_dim);
                    let z = gaussian::reparam_sample(&fused, &eps)?;
                    for (a, p) in acc.iter_mut().zip(self.predict(params, &z)?) {
                        *a += p;
                    }
                }
                for a in &mut acc {
                    *a /= draws as f64;
                }
                Ok(acc)
            }
        }
    }

    /// Fill absent views by decoding the fused posterior; present views pass
    /// through unchanged.
    pub fn impute_missing(
        &self,
        params: &ModelParameters,
        sample: &MultiViewSample,
        mode: ImputeMode,
        rng: &mut impl Rng,
    ) -> Result<ImputedViews> {
        if sample.present_count() == 0 {
            return Err(Error::invalid("sample has no present views"));
        }
        let fused = self.posterior_for_sample(params, sample)?;
        let z = match mode {
            ImputeMode::Mean => fused.mean().to_vec(),
            ImputeMode::Sample => {
                let eps = crate::rng::standard_normal_vec(rng, self.config.latent_dim);
                gaussian::reparam_sample(&fused, &eps)?
            }
        };
        let mut views = Vec::with_capacity(self.schema.num_views());
        let mut imputed = Vec::with_capacity(self.schema.num_views());
        for v in 0..self.schema.num_views() {
            match sample.view(v) {
                Some(x) => {
                    views.push(x.to_vec());
                    imputed.push(false);
                }
                None => {
                    views.push(self.decode_view(params, v, &z)?);
                    imputed.push(true);
                }
            }
        }
        Ok(ImputedViews { views, imputed })
    }

    /// Full training-time forward pass for one sample with fixed noise.
    ///
    /// `with_predictor` controls whether predictor logits are computed (they
    /// are only needed for labeled samples).
    pub fn forward_sample(
        &self,
        params: &[f64],
        sample: &MultiViewSample,
        noise: &[f64],
        with_predictor: bool,
    ) -> Result<SampleForward> {
        let latent = self.config.latent_dim;
        if noise.len() != latent {
            return Err(Error::invalid("noise length must equal latent_dim"));
        }
        let num_views = self.schema.num_views();
        let mut views: Vec<Option<ViewForward>> = Vec::with_capacity(num_views);
        for v in 0..num_views {
            match sample.view(v) {
                Some(x) => {
                    let (cache, posterior, lv_grad_mask) = self.encode_view_cached(params, v, x)?;
                    let z_view = gaussian::reparam_sample(&posterior, noise)?;
                    views.push(Some(ViewForward {
                        cache,
                        posterior,
                        lv_grad_mask,
                        z_view,
                    }));
                }
                None => views.push(None),
            }
        }

        // PoE fusion in precision space, tracking total precision for the
        // backward pass and the clamp mask on the fused log-variance.
        let mut precision_total = vec![1.0; latent]; // prior contributes 1
        let mut weighted_mean = vec![0.0; latent];
        for vf in views.iter().flatten() {
            for d in 0..latent {
                let p = (-vf.posterior.log_var()[d]).exp();
                precision_total[d] += p;
                weighted_mean[d] += p * vf.posterior.mean()[d];
            }
        }
        if views.iter().all(|v| v.is_none()) && !self.config.allow_prior_only_fusion {
            return Err(Error::invalid(
                "cannot fuse a sample with zero present views (allow_prior_only_fusion disabled)",
            ));
        }
        let fused_mean: Vec<f64> = weighted_mean
            .iter()
            .zip(&precision_total)
            .map(|(wm, p)| wm / p)
            .collect();
        let raw_fused_lv: Vec<f64> = precision_total.iter().map(|p| -p.ln()).collect();
        let fused_lv_grad_mask: Vec<f64> = raw_fused_lv
            .iter()
            .map(|&lv| if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) { 1.0 } else { 0.0 })
            .collect();
        let fused = DiagGaussian::new(fused_mean, raw_fused_lv)?;
        let z = gaussian::reparam_sample(&fused, noise)?;

        let mut dec: Vec<Option<MlpCache>> = Vec::with_capacity(num_views);
        for v in 0..num_views {
            if sample.view(v).is_some() {
                dec.push(Some(self.decoders[v].forward(params, &z)));
            } else {
                dec.push(None);
            }
        }

        let pred = if with_predictor {
            Some(self.predictor.forward(params, &z))
        } else {
            None
        };

        Ok(SampleForward {
            noise: noise.to_vec(),
            views,
            fused,
            fused_lv_grad_mask,
            precision_total,
            z,
            dec,
            pred,
        })
    }

    /// Backward pass for one sample; accumulates into `dp` (same length as
    /// the parameter vector).
    pub fn backward_sample(&self, params: &[f64], fwd: &SampleForward, up: &SampleUpstream, dp: &mut [f64]) {
        let latent = self.config.latent_dim;
        let mut d_z = vec![0.0; latent];

        if let (Some(cache), Some(d_logits)) = (&fwd.pred, &up.d_pred_logits) {
            let d = self.predictor.backward(params, cache, d_logits, dp);
            for (a, b) in d_z.iter_mut().zip(d) {
                *a += b;
            }
        }

        for (v, cache) in fwd.dec.iter().enumerate() {
            if let (Some(cache), Some(d_out)) = (cache, up.d_dec_out.get(v).and_then(|o| o.as_ref())) {
                let d = self.decoders[v].backward(params, cache, d_out, dp);
                for (a, b) in d_z.iter_mut().zip(d) {
                    *a += b;
                }
            }
        }

        // Gradients w.r.t. the fused posterior's (clamped) mean/log-variance.
        let fused_mean = fwd.fused.mean();
        let fused_lv = fwd.fused.log_var();
        let mut d_mu_f = vec![0.0; latent];
        let mut d_lv_f = vec![0.0; latent];
        if up.kl_fused_coeff != 0.0 {
            for d in 0..latent {
                d_mu_f[d] += up.kl_fused_coeff * fused_mean[d];
                d_lv_f[d] += up.kl_fused_coeff * 0.5 * (fused_lv[d].exp() - 1.0);
            }
        }
        for d in 0..latent {
            d_mu_f[d] += d_z[d];
            d_lv_f[d] += d_z[d] * 0.5 * (0.5 * fused_lv[d]).exp() * fwd.noise[d];
        }
        for d in 0..latent {
            d_lv_f[d] *= fwd.fused_lv_grad_mask[d];
        }

        // Through the product of experts into each present view.
        for (v, vf) in fwd.views.iter().enumerate() {
            let Some(vf) = vf else { continue };
            let post_mean = vf.posterior.mean();
            let post_lv = vf.posterior.log_var();
            let mut d_mu_v = vec![0.0; latent];
            let mut d_lv_v = vec![0.0; latent];
            for d in 0..latent {
                let lambda_v = (-post_lv[d]).exp();
                let w = lambda_v / fwd.precision_total[d];
                d_mu_v[d] += d_mu_f[d] * w;
                // d fused_mean / d lv_v = -lambda_v (mu_v - fused_mean) / lambda_tot
                d_lv_v[d] += -d_mu_f[d] * lambda_v * (post_mean[d] - fused_mean[d])
                    / fwd.precision_total[d];
                // d fused_lv / d lv_v = lambda_v / lambda_tot
                d_lv_v[d] += d_lv_f[d] * w;
            }

            if up.kl_view_coeff != 0.0 {
                for d in 0..latent {
                    d_mu_v[d] += up.kl_view_coeff * post_mean[d];
                    d_lv_v[d] += up.kl_view_coeff * 0.5 * (post_lv[d].exp() - 1.0);
                }
            }
            if let Some(d_zv) = up.d_z_view.get(v).and_then(|o| o.as_ref()) {
                for d in 0..latent {
                    d_mu_v[d] += d_zv[d];
                    d_lv_v[d] += d_zv[d] * 0.5 * (0.5 * post_lv[d]).exp() * fwd.noise[d];
                }
            }
            for d in 0..latent {
                d_lv_v[d] *= vf.lv_grad_mask[d];
            }

            // Head output layout is [mean, log_var].
            let mut d_head = Vec::with_capacity(2 * latent);
            d_head.extend_from_slice(&d_mu_v);
            d_head.extend_from_slice(&d_lv_v);
            match (&self.encoders[v], &vf.cache) {
                (ViewEncoder::Mlp(m), EncCache::Mlp(cache)) => {
                    m.backward(params, cache, &d_head, dp);
                }
                (ViewEncoder::Conv { conv1, conv2, head }, EncCache::Conv { input, act1, act2, head: hc }) => {
                    let mut d_a2 = head.backward(params, hc, &d_head, dp);
                    for (g, &t) in d_a2.iter_mut().zip(act2) {
                        *g *= 1.0 - t * t;
                    }
                    let mut d_a1 = vec![0.0; conv2.in_len()];
                    conv2.backward(params, act1, &d_a2, dp, &mut d_a1);
                    for (g, &t) in d_a1.iter_mut().zip(act1) {
                        *g *= 1.0 - t * t;
                    }
                    let mut d_x = vec![0.0; conv1.in_len()];
                    conv1.backward(params, input, &d_a1, dp, &mut d_x);
                }
                _ => unreachable!("encoder/cache kind mismatch"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MultiViewSample;

    pub(crate) fn toy_schema() -> DatasetSchema {
        DatasetSchema {
            view_shapes: vec![ViewShape::Flat { dim: 5 }, ViewShape::Flat { dim: 3 }],
            num_classes: 3,
            view_likelihoods: vec![
                ViewLikelihood::GaussianUnitVariance,
                ViewLikelihood::GaussianUnitVariance,
            ],
        }
    }

    fn toy_model() -> (MultiViewModel, ModelParameters) {
        let config = ModelConfig {
            latent_dim: 4,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            predictor_hidden: vec![8],
            seed: 42,
            ..ModelConfig::default()
        };
        let model = MultiViewModel::new(toy_schema(), config).unwrap();
        let params = model.init_params();
        (model, params)
    }

    #[test]
    fn encode_view_is_deterministic_and_in_range() {
        let (model, params) = toy_model();
        let x = [0.1, -0.3, 0.8, 0.0, 1.5];
        let a = model.encode_view(&params, 0, &x).unwrap();
        let b = model.encode_view(&params, 0, &x).unwrap();
        assert_eq!(a, b);
        assert!(a.mean().iter().all(|m| m.is_finite()));
        assert!(a.log_var().iter().all(|lv| (-10.0..=10.0).contains(lv)));
        assert!(model.encode_view(&params, 0, &[0.0; 3]).is_err());
    }

    #[test]
    fn encoder_is_sensitive_to_input() {
        let (model, params) = toy_model();
        let x = [0.1, -0.3, 0.8, 0.0, 1.5];
        let mut y = x;
        y[2] += 0.25;
        let a = model.encode_view(&params, 0, &x).unwrap();
        let b = model.encode_view(&params, 0, &y).unwrap();
        assert_ne!(a.mean(), b.mean());
    }

    #[test]
    fn fuse_present_matches_direct_poe_and_ignores_absent() {
        let (model, params) = toy_model();
        let x0 = [0.4, 0.0, -0.2, 0.9, 0.3];
        let x1 = [1.0, -1.0, 0.5];
        let p0 = model.encode_view(&params, 0, &x0).unwrap();
        let p1 = model.encode_view(&params, 1, &x1).unwrap();

        let fused = model.fuse_present(&[Some(p0.clone()), Some(p1.clone())]).unwrap();
        let direct = gaussian::poe_fuse(
            &[p0.clone(), p1.clone()],
            &gaussian::standard_prior(4).unwrap(),
        )
        .unwrap();
        assert_eq!(fused, direct);

        // Single present view: PoE of that posterior with the prior.
        let single = model.fuse_present(&[Some(p0.clone()), None]).unwrap();
        let expected =
            gaussian::poe_fuse(&[p0.clone()], &gaussian::standard_prior(4).unwrap()).unwrap();
        assert_eq!(single, expected);

        // Absent views cannot influence the result: there is nothing to vary.
        let all_absent = model.fuse_present(&[None, None]);
        assert!(all_absent.is_err());
    }

    #[test]
    fn adding_a_view_never_increases_variance() {
        let (model, params) = toy_model();
        let x0 = [0.4, 0.0, -0.2, 0.9, 0.3];
        let x1 = [1.0, -1.0, 0.5];
        let p0 = model.encode_view(&params, 0, &x0).unwrap();
        let p1 = model.encode_view(&params, 1, &x1).unwrap();
        let one = model.fuse_present(&[Some(p0.clone()), None]).unwrap();
        let two = model.fuse_present(&[Some(p0), Some(p1)]).unwrap();
        for d in 0..4 {
            assert!(two.variance()[d] <= one.variance()[d] + 1e-15);
        }
    }

    #[test]
    fn decode_view_shapes_and_prediction_normalization() {
        let (model, params) = toy_model();
        let z = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(model.decode_view(&params, 0, &z).unwrap().len(), 5);
        assert_eq!(model.decode_view(&params, 1, &z).unwrap().len(), 3);
        let p = model.predict(&params, &z).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bernoulli_decoder_outputs_are_strict_probabilities() {
        let schema = DatasetSchema {
            view_shapes: vec![ViewShape::Flat { dim: 4 }, ViewShape::Flat { dim: 4 }],
            num_classes: 2,
            view_likelihoods: vec![ViewLikelihood::Bernoulli, ViewLikelihood::Bernoulli],
        };
        let model = MultiViewModel::new(
            schema,
            ModelConfig {
                latent_dim: 3,
                gamma: 0.5,
                alpha: 0.5,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let params = model.init_params();
        let out = model.decode_view(&params, 0, &[5.0, -5.0, 2.0]).unwrap();
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn predict_sample_posterior_mean_is_deterministic() {
        let (model, params) = toy_model();
        let sample = MultiViewSample::new(
            0,
            vec![Some(vec![0.4, 0.0, -0.2, 0.9, 0.3]), None],
            Some(1),
        )
        .unwrap();
        let mut rng = stream(0, Domain::Eval, 0);
        let a = model
            .predict_sample(&params, &sample, PredictMode::PosteriorMean, &mut rng)
            .unwrap();
        let b = model
            .predict_sample(&params, &sample, PredictMode::PosteriorMean, &mut rng)
            .unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let mc = model
            .predict_sample(&params, &sample, PredictMode::MonteCarlo { draws: 7 }, &mut rng)
            .unwrap();
        assert!((mc.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn impute_missing_mean_mode_is_deterministic() {
        let (model, params) = toy_model();
        let sample =
            MultiViewSample::new(3, vec![Some(vec![0.1, 0.2, 0.3, 0.4, 0.5]), None], None).unwrap();
        let mut rng = stream(1, Domain::Eval, 0);
        let a = model
            .impute_missing(&params, &sample, ImputeMode::Mean, &mut rng)
            .unwrap();
        let b = model
            .impute_missing(&params, &sample, ImputeMode::Mean, &mut rng)
            .unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.imputed, vec![false, true]);
        assert_eq!(a.views[0], vec![0.1, 0.2, 0.3, 0.4, 0.5]);

        // Nothing to impute: views pass through.
        let full = MultiViewSample::new(
            4,
            vec![Some(vec![0.0; 5]), Some(vec![0.0; 3])],
            None,
        )
        .unwrap();
        let out = model
            .impute_missing(&params, &full, ImputeMode::Mean, &mut rng)
            .unwrap();
        assert_eq!(out.imputed, vec![false, false]);
    }

    #[test]
    fn forward_is_finite_on_random_inputs() {
        let (model, params) = toy_model();
        let mut rng = stream(2, Domain::Eval, 1);
        for i in 0..20 {
            let x0 = crate::rng::standard_normal_vec(&mut rng, 5);
            let sample = MultiViewSample::new(i, vec![Some(x0), None], Some(0)).unwrap();
            let noise = crate::rng::standard_normal_vec(&mut rng, 4);
            let fwd = model
                .forward_sample(&params.values, &sample, &noise, true)
                .unwrap();
            assert!(fwd.z.iter().all(|v| v.is_finite()));
            assert!(fwd.fused.mean().iter().all(|v| v.is_finite()));
        }
    }
}
