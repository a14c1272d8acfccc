//! Synthetic tabular generator: a shared latent code observed through
//! per-view random maps with additive private noise.
//!
//! Generative process, per sample: `y ~ uniform(classes)`,
//! `s ~ N(mu_y, I)` with `mu_y = class_separation * u_y` for seeded random
//! unit directions `u_y`, and per view `x_v = tanh(A_v s) + eps_v` with
//! `eps_v ~ N(0, private_noise_std^2 I)`. The `A_v` are fixed per-view random
//! matrices. All samples carry labels; scarcity is injected later.

use rand::Rng;

use super::{schema_for, Dataset, GeneratorConfig, MultiViewSample, SplitTag};
use crate::error::Result;
use crate::par::{map_indexed, ExecMode};
use crate::rng::{standard_normal_vec, stream, Domain};

struct Structure {
    class_means: Vec<Vec<f64>>,     // class x shared_dim
    view_maps: Vec<Vec<f64>>,       // per view: d_v x shared_dim, row-major
    view_dims: Vec<usize>,
}

fn build_structure(config: &GeneratorConfig) -> Structure {
    let mut rng = stream(config.seed, Domain::GeneratorStructure, 0);
    let shared = config.shared_dim;
    let class_means = (0..config.num_classes)
        .map(|_| {
            let raw = standard_normal_vec(&mut rng, shared);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter()
                .map(|v| config.class_separation * v / norm)
                .collect()
        })
        .collect();
    let view_dims = config
        .view_dims
        .clone()
        .unwrap_or_else(|| vec![100; config.num_views]);
    let scale = 1.0 / (shared as f64).sqrt();
    let view_maps = view_dims
        .iter()
        .map(|&d| {
            standard_normal_vec(&mut rng, d * shared)
                .into_iter()
                .map(|v| v * scale)
                .collect()
        })
        .collect();
    Structure {
        class_means,
        view_maps,
        view_dims,
    }
}

fn gen_sample(config: &GeneratorConfig, structure: &Structure, sample_id: u64) -> MultiViewSample {
    let mut rng = stream(config.seed, Domain::GeneratorSample, sample_id);
    let shared = config.shared_dim;
    let label = rng.random_range(0..config.num_classes);
    let mut code = standard_normal_vec(&mut rng, shared);
    for (c, m) in code.iter_mut().zip(&structure.class_means[label]) {
        *c += m;
    }
    let views = (0..config.num_views)
        .map(|v| {
            let d = structure.view_dims[v];
            let map = &structure.view_maps[v];
            let noise = standard_normal_vec(&mut rng, d);
            let x = (0..d)
                .map(|i| {
                    let lin: f64 = map[i * shared..(i + 1) * shared]
                        .iter()
                        .zip(&code)
                        .map(|(a, s)| a * s)
                        .sum();
                    let obs = if config.linear { lin } else { lin.tanh() };
                    obs + config.private_noise_std * noise[i]
                })
                .collect();
            Some(x)
        })
        .collect();
    MultiViewSample::new(sample_id, views, Some(label)).expect("generated sample has all views")
}

/// Generate the train/val/test triplet. Sample ids are globally unique:
/// train occupies `0..n_train`, then val, then test.
pub fn gen_tabular(config: &GeneratorConfig) -> Result<(Dataset, Dataset, Dataset)> {
    config.validate()?;
    let schema = schema_for(config)?;
    let structure = build_structure(config);

    let mut offset = 0u64;
    let mut make = |n: usize, split: SplitTag| {
        let base = offset;
        let samples = map_indexed(ExecMode::Parallel, n, |i| {
            gen_sample(config, &structure, base + i as u64)
        });
        offset += n as u64;
        Dataset {
            schema: schema.clone(),
            samples,
            split,
        }
    };
    let train = make(config.n_train, SplitTag::Train);
    let val = make(config.n_val, SplitTag::Val);
    let test = make(config.n_test, SplitTag::Test);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            view_dims: Some(vec![20; 4]),
            ..GeneratorConfig::tabular_defaults(5)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let (a, _, _) = gen_tabular(&cfg).unwrap();
        let (b, _, _) = gen_tabular(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_has_unique_ids_and_valid_samples() {
        let cfg = small_config();
        let (train, val, test) = gen_tabular(&cfg).unwrap();
        train.validate().unwrap();
        val.validate().unwrap();
        test.validate().unwrap();
        let mut ids: Vec<u64> = train
            .samples
            .iter()
            .chain(&val.samples)
            .chain(&test.samples)
            .map(|s| s.id())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 300);
        assert!(train.samples.iter().all(|s| s.label().is_some()));
    }

    #[test]
    fn zero_separation_removes_class_signal_from_means() {
        // With class_separation = 0 the class means coincide, so per-class
        // feature means agree up to sampling noise.
        let cfg = GeneratorConfig {
            class_separation: 0.0,
            n_train: 4000,
            ..small_config()
        };
        let (train, _, _) = gen_tabular(&cfg).unwrap();
        let mut sums = [vec![0.0; 20], vec![0.0; 20]];
        let mut counts = [0usize; 2];
        for s in &train.samples {
            let y = s.label().unwrap();
            counts[y] += 1;
            for (a, b) in sums[y].iter_mut().zip(s.view(0).unwrap()) {
                *a += b;
            }
        }
        for f in 0..20 {
            let m0 = sums[0][f] / counts[0] as f64;
            let m1 = sums[1][f] / counts[1] as f64;
            // Feature std is ~1.2; 4 sigma of the mean-difference estimate.
            let tol = 4.0 * 1.3 * (1.0 / counts[0] as f64 + 1.0 / counts[1] as f64).sqrt();
            assert!((m0 - m1).abs() < tol, "feature {f}: {m0} vs {m1}");
        }
    }

    #[test]
    fn linear_noise_free_views_span_the_shared_subspace() {
        let cfg = GeneratorConfig {
            private_noise_std: 0.0,
            linear: true,
            n_train: 60,
            n_val: 1,
            n_test: 1,
            ..small_config()
        };
        let (train, _, _) = gen_tabular(&cfg).unwrap();
        // Modified Gram-Schmidt rank of the view-0 feature matrix: with
        // x_v = A_v s exactly, the rows live in a shared_dim-dimensional
        // linear subspace.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for s in &train.samples {
            let mut r = s.view(0).unwrap().to_vec();
            for b in &basis {
                let dot: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= dot * bi;
                }
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for ri in r.iter_mut() {
                    *ri /= norm;
                }
                basis.push(r);
            }
        }
        assert!(
            basis.len() <= cfg.shared_dim,
            "rank {} exceeds shared_dim {}",
            basis.len(),
            cfg.shared_dim
        );
    }
}
