//! Brute-force reference implementations used only by test suites.
//!
//! Each oracle recomputes a quantity by a route independent of the fast path
//! it validates: quadrature instead of closed forms, Monte Carlo instead of
//! analytic KL, pair enumeration instead of rank statistics, and central
//! finite differences instead of hand-written backward passes. Nothing here
//! is imported by production code.

use mvsemi_core::error::{Error, Result};
use mvsemi_core::gaussian::DiagGaussian;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// First two moments of a product of 1-D Gaussian densities, computed by
/// trapezoid quadrature of the normalized pointwise product.
///
/// The grid must cover at least eight standard deviations of every expert;
/// a self-check integrates the widest expert on the same grid and rejects the
/// call if the quadrature residual exceeds 1e-8.
pub fn oracle_poe_grid(
    experts: &[DiagGaussian],
    prior: &DiagGaussian,
    grid_bounds: (f64, f64),
    grid_points: usize,
) -> Result<(f64, f64)> {
    if prior.dim() != 1 || experts.iter().any(|e| e.dim() != 1) {
        return Err(Error::invalid("grid oracle is one-dimensional"));
    }
    if grid_points < 8 {
        return Err(Error::invalid("grid too small"));
    }
    let (lo, hi) = grid_bounds;
    let all: Vec<&DiagGaussian> = experts.iter().chain(std::iter::once(prior)).collect();
    for g in &all {
        let sd = (0.5 * g.log_var()[0]).exp();
        if g.mean()[0] - 8.0 * sd < lo || g.mean()[0] + 8.0 * sd > hi {
            return Err(Error::invalid("grid does not cover 8 sigma of every expert"));
        }
    }

    let h = (hi - lo) / (grid_points - 1) as f64;
    let log_pdf = |g: &DiagGaussian, x: f64| -> f64 {
        let m = g.mean()[0];
        let lv = g.log_var()[0];
        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m) * (x - m) * (-lv).exp())
    };

    // The product of k Gaussians each at least sigma_min wide is at least
    // sigma_min / sqrt(k) wide (precisions add); the grid must resolve that.
    let sigma_min = all
        .iter()
        .map(|g| (0.5 * g.log_var()[0]).exp())
        .fold(f64::INFINITY, f64::min);
    let sigma_ref = sigma_min / (all.len() as f64).sqrt();
    if h > sigma_ref / 4.0 {
        return Err(Error::invalid(format!(
            "grid too coarse: step {h:.3e} exceeds a quarter of the narrowest possible product width {sigma_ref:.3e}"
        )));
    }
    // Residual guard: a reference Gaussian of that width, centered on the
    // grid, must integrate to 1.
    let center = 0.5 * (lo + hi);
    let reference = DiagGaussian::new(vec![center], vec![2.0 * sigma_ref.ln()])
        .expect("reference Gaussian is well-formed");
    let mut check = 0.0;
    for i in 0..grid_points {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == grid_points - 1 { 0.5 } else { 1.0 };
        check += w * log_pdf(&reference, x).exp();
    }
    if (check * h - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!(
            "grid too coarse: quadrature residual {:e}",
            (check * h - 1.0).abs()
        )));
    }

    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..grid_points {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == grid_points - 1 { 0.5 } else { 1.0 };
        let density: f64 = all.iter().map(|g| log_pdf(g, x)).sum::<f64>().exp();
        z += w * density;
        m1 += w * density * x;
        m2 += w * density * x * x;
    }
    let mean = m1 / z;
    let variance = m2 / z - mean * mean;
    Ok((mean, variance))
}

/// Monte Carlo estimate of `KL(q || p)` with its standard error, drawing from
/// `q` and averaging `log q(z) - log p(z)`.
pub fn oracle_kl_mc(
    q: &DiagGaussian,
    p: &DiagGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 10_000 {
        return Err(Error::invalid("need at least 1e4 samples"));
    }
    if q.dim() != p.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let dim = q.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_pdf = |g: &DiagGaussian, z: &[f64]| -> f64 {
        g.mean()
            .iter()
            .zip(g.log_var())
            .zip(z)
            .map(|((&m, &lv), &x)| {
                -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m) * (x - m) * (-lv).exp())
            })
            .sum()
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut z = vec![0.0; dim];
    for _ in 0..n_samples {
        for d in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            z[d] = q.mean()[d] + (0.5 * q.log_var()[d]).exp() * eps;
        }
        let v = log_pdf(q, &z) - log_pdf(p, &z);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Exact AUROC by enumeration of all positive-negative pairs; ties count 0.5.
///
/// `labels[i]` is true for positives. Scores must be finite.
pub fn oracle_auroc_pairs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels must align"));
    }
    let n_pos = labels.iter().filter(|l| **l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("need at least one positive and one negative"));
    }
    let mut concordant_halves = 0u64; // concordant pairs count 2, ties count 1
    for (&sp, &lp) in scores.iter().zip(labels) {
        if !lp {
            continue;
        }
        for (&sn, &ln) in scores.iter().zip(labels) {
            if ln {
                continue;
            }
            if sp > sn {
                concordant_halves += 2;
            } else if sp == sn {
                concordant_halves += 1;
            }
        }
    }
    Ok(concordant_halves as f64 * 0.5 / (n_pos as f64 * n_neg as f64))
}

/// Central finite differences of a scalar function.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let hi = f(&p);
            p[i] = orig - step;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Relative L2 error between two gradient vectors.
pub fn grad_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Classify a single-channel square image by normalized cross-correlation of
/// every template at every position; returns the best-matching template index.
///
/// Templates are binary glyph bitmaps (`template_side x template_side`,
/// row-major).
pub fn oracle_glyph_classifier(
    image: &[f64],
    image_side: usize,
    templates: &[Vec<f64>],
    template_side: usize,
) -> usize {
    assert_eq!(image.len(), image_side * image_side);
    let mut best = (f64::NEG_INFINITY, 0);
    for (ti, t) in templates.iter().enumerate() {
        let t_mean = t.iter().sum::<f64>() / t.len() as f64;
        let t_norm: f64 = t.iter().map(|v| (v - t_mean) * (v - t_mean)).sum::<f64>().sqrt();
        if t_norm < 1e-12 {
            continue;
        }
        for oy in 0..=(image_side - template_side) {
            for ox in 0..=(image_side - template_side) {
                let mut dot = 0.0;
                let mut p_sum = 0.0;
                let mut p_sq = 0.0;
                for ky in 0..template_side {
                    for kx in 0..template_side {
                        let pv = image[(oy + ky) * image_side + ox + kx];
                        let tv = t[ky * template_side + kx];
                        dot += pv * (tv - t_mean);
                        p_sum += pv;
                        p_sq += pv * pv;
                    }
                }
                let len = (template_side * template_side) as f64;
                let p_mean = p_sum / len;
                let p_norm = (p_sq - len * p_mean * p_mean).max(0.0).sqrt();
                if p_norm < 1e-12 {
                    continue;
                }
                // dot already removed the template mean; removing the patch
                // mean too changes nothing because sum(tv - t_mean) = 0.
                let corr = dot / (p_norm * t_norm);
                if corr > best.0 {
                    best = (corr, ti);
                }
            }
        }
    }
    best.1
}

/// L2-regularized multinomial logistic regression trained by full-batch
/// gradient descent.
///
/// A deliberately simple linear probe used to calibrate synthetic generators:
/// it answers "is the class linearly recoverable from these features".
pub struct LinearProbe {
    pub weights: Vec<Vec<f64>>, // class x feature
    pub bias: Vec<f64>,
    pub num_classes: usize,
}

impl LinearProbe {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        num_classes: usize,
        epochs: usize,
        lr: f64,
        l2: f64,
    ) -> Self {
        let n = features.len();
        assert!(n > 0 && labels.len() == n);
        let d = features[0].len();
        let mut w = vec![vec![0.0; d]; num_classes];
        let mut b = vec![0.0; num_classes];
        let mut probs = vec![0.0; num_classes];
        for _ in 0..epochs {
            let mut gw = vec![vec![0.0; d]; num_classes];
            let mut gb = vec![0.0; num_classes];
            for (x, &y) in features.iter().zip(labels) {
                for c in 0..num_classes {
                    probs[c] = b[c] + w[c].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                }
                let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for c in 0..num_classes {
                    let g = probs[c] / sum - if c == y { 1.0 } else { 0.0 };
                    for (gwi, xi) in gw[c].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                    gb[c] += g;
                }
            }
            let scale = lr / n as f64;
            for c in 0..num_classes {
                for (wi, gwi) in w[c].iter_mut().zip(&gw[c]) {
                    *wi -= scale * gwi + lr * l2 * *wi;
                }
                b[c] -= scale * gb[c];
            }
        }
        Self {
            weights: w,
            bias: b,
            num_classes,
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..self.num_classes {
            let s = self.bias[c] + self.weights[c].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / labels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvsemi_core::gaussian::standard_prior;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mean], vec![var.ln()]).unwrap()
    }

    #[test]
    fn poe_grid_self_validates_on_known_cases() {
        // Empty experts: prior moments exactly.
        let prior = standard_prior(1).unwrap();
        let (m, v) = oracle_poe_grid(&[], &prior, (-40.0, 40.0), 120_001).unwrap();
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);

        // Single standard expert with standard prior: precision 2.
        let (m, v) = oracle_poe_grid(&[g1(0.0, 1.0)], &prior, (-40.0, 40.0), 120_001).unwrap();
        assert!(m.abs() < 1e-9 && (v - 0.5).abs() < 1e-9);

        // N(1,1) x N(3,1) x prior: mean 4/3, variance 1/3.
        let (m, v) =
            oracle_poe_grid(&[g1(1.0, 1.0), g1(3.0, 1.0)], &prior, (-40.0, 40.0), 120_001).unwrap();
        assert!((m - 4.0 / 3.0).abs() < 1e-6);
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn poe_grid_rejects_bad_grids() {
        let prior = standard_prior(1).unwrap();
        assert!(oracle_poe_grid(&[], &prior, (-4.0, 4.0), 10_001).is_err()); // < 8 sigma
        assert!(oracle_poe_grid(&[], &prior, (-40.0, 40.0), 101).is_err()); // residual too big
    }

    #[test]
    fn kl_mc_matches_known_values() {
        let p = standard_prior(1).unwrap();
        // Identical distributions: the integrand is identically zero.
        let (est, _se) = oracle_kl_mc(&p, &p, 100_000, 1).unwrap();
        assert!(est.abs() < 1e-12);

        // mean 1, variance 0.25: true KL = 0.125 + ln 2.
        let q = g1(1.0, 0.25);
        let (est, se) = oracle_kl_mc(&q, &p, 1_000_000, 2).unwrap();
        let truth = 0.125 + std::f64::consts::LN_2;
        assert!((est - truth).abs() < 4.0 * se, "est {est}, truth {truth}, se {se}");
    }

    #[test]
    fn auroc_pairs_hand_case() {
        let auc = oracle_auroc_pairs(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        // All tied scores: 0.5 exactly.
        let auc = oracle_auroc_pairs(&[0.3, 0.3, 0.3], &[true, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        assert!(oracle_auroc_pairs(&[0.1], &[true]).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff_grad(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn glyph_classifier_recovers_planted_template() {
        // Two 3x3 templates planted into 8x8 flat backgrounds.
        let templates = vec![
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        ];
        for (ti, t) in templates.iter().enumerate() {
            let mut img = vec![0.2; 64];
            let (oy, ox) = (2, 3);
            for ky in 0..3 {
                for kx in 0..3 {
                    if t[ky * 3 + kx] > 0.5 {
                        img[(oy + ky) * 8 + ox + kx] = 1.0;
                    }
                }
            }
            assert_eq!(oracle_glyph_classifier(&img, 8, &templates, 3), ti);
        }
    }

    #[test]
    fn linear_probe_separates_gaussian_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..400 {
            let y = i % 2;
            let center = if y == 0 { -1.0 } else { 1.0 };
            xs.push(vec![
                center + 0.3 * rng.sample::<f64, _>(StandardNormal),
                0.3 * rng.sample::<f64, _>(StandardNormal),
            ]);
            ys.push(y);
        }
        let probe = LinearProbe::fit(&xs, &ys, 2, 200, 0.5, 1e-4);
        assert!(probe.accuracy(&xs, &ys) > 0.95);
    }
}
