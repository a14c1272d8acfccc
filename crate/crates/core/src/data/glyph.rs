//! Procedural glyph-image generator.
//!
//! Ten seeded binary 7x7 glyphs (pairwise Hamming distance >= 10) stand in
//! for digit classes. Per sample and view, the class glyph is overlaid at a
//! uniform random position on a crop of a view-specific smoothed-noise
//! background. The glyph identity is the only information shared across
//! views; positions, crops, and backgrounds are view-specific.
//!
//! Pixels are in [0, 1] and quantized to f32 so the binary on-disk format
//! round-trips exactly.

use rand::Rng;

use super::{schema_for, Dataset, GeneratorConfig, MultiViewSample, SplitTag};
use crate::error::Result;
use crate::par::{map_indexed, ExecMode};
use crate::rng::{stream, Domain};

/// Side length of a glyph bitmap.
pub const GLYPH_SIDE: usize = 7;
const GLYPH_CELLS: usize = GLYPH_SIDE * GLYPH_SIDE;
const MIN_HAMMING: usize = 10;
/// Side of the per-view master background a sample's crop is taken from.
const MASTER_BG_SIDE: usize = 28;

fn pairwise_hamming_ok(glyphs: &[Vec<u8>]) -> bool {
    for i in 0..glyphs.len() {
        for j in (i + 1)..glyphs.len() {
            let dist = glyphs[i]
                .iter()
                .zip(&glyphs[j])
                .filter(|(a, b)| a != b)
                .count();
            if dist < MIN_HAMMING {
                return false;
            }
        }
    }
    true
}

/// The ten class glyphs for a seed. Draws candidate sets and deterministically
/// retries with `seed + 1, seed + 2, ...` until the pairwise Hamming
/// constraint holds; returns the glyphs and the seed that produced them.
pub fn glyph_templates(seed: u64) -> (Vec<Vec<u8>>, u64) {
    let mut attempt = seed;
    loop {
        let mut rng = stream(attempt, Domain::GeneratorStructure, 7);
        let glyphs: Vec<Vec<u8>> = (0..10)
            .map(|_| {
                // 18..=31 on-cells keeps glyphs both visible and distinctive.
                loop {
                    let g: Vec<u8> = (0..GLYPH_CELLS)
                        .map(|_| u8::from(rng.random::<f64>() < 0.5))
                        .collect();
                    let ones = g.iter().filter(|&&b| b == 1).count();
                    if (18..=31).contains(&ones) {
                        return g;
                    }
                }
            })
            .collect();
        if pairwise_hamming_ok(&glyphs) {
            return (glyphs, attempt);
        }
        attempt += 1;
    }
}

/// Bilinear upsampling of a coarse grid to `side x side`.
fn smooth_noise(rng: &mut impl Rng, side: usize, amplitude: f64) -> Vec<f64> {
    let coarse = 8usize;
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; side * side];
    let scale = (coarse - 1) as f64 / (side - 1) as f64;
    for y in 0..side {
        for x in 0..side {
            let gy = y as f64 * scale;
            let gx = x as f64 * scale;
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(coarse - 1);
            let x1 = (x0 + 1).min(coarse - 1);
            let fy = gy - y0 as f64;
            let fx = gx - x0 as f64;
            let v = grid[y0 * coarse + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * coarse + x1] * (1.0 - fy) * fx
                + grid[y1 * coarse + x0] * fy * (1.0 - fx)
                + grid[y1 * coarse + x1] * fy * fx;
            out[y * side + x] = amplitude * v;
        }
    }
    out
}

struct Structure {
    glyphs: Vec<Vec<u8>>,
    /// One master background per view; samples crop random windows from it.
    backgrounds: Vec<Vec<f64>>,
}

fn build_structure(config: &GeneratorConfig) -> Structure {
    let (glyphs, _) = glyph_templates(config.seed);
    let backgrounds = (0..config.num_views)
        .map(|v| {
            let mut rng = stream(config.seed, Domain::GeneratorStructure, 100 + v as u64);
            smooth_noise(&mut rng, MASTER_BG_SIDE, config.private_noise_std)
        })
        .collect();
    Structure {
        glyphs,
        backgrounds,
    }
}

fn gen_sample(config: &GeneratorConfig, structure: &Structure, sample_id: u64) -> MultiViewSample {
    let side = config.image_side;
    let mut rng = stream(config.seed, Domain::GeneratorSample, sample_id);
    let label = rng.random_range(0..config.num_classes);
    let glyph = &structure.glyphs[label];
    let views = (0..config.num_views)
        .map(|v| {
            let bg = &structure.backgrounds[v];
            let crop_max = MASTER_BG_SIDE - side;
            let cy = rng.random_range(0..=crop_max);
            let cx = rng.random_range(0..=crop_max);
            let mut img = vec![0.0f64; side * side];
            for y in 0..side {
                for x in 0..side {
                    img[y * side + x] = bg[(cy + y) * MASTER_BG_SIDE + cx + x];
                }
            }
            let off_max = side - GLYPH_SIDE;
            let gy = rng.random_range(0..=off_max);
            let gx = rng.random_range(0..=off_max);
            for ky in 0..GLYPH_SIDE {
                for kx in 0..GLYPH_SIDE {
                    if glyph[ky * GLYPH_SIDE + kx] == 1 {
                        img[(gy + ky) * side + gx + kx] = config.class_separation;
                    }
                }
            }
            // Quantize so the f32 on-disk format is lossless.
            Some(img.into_iter().map(|p| p.clamp(0.0, 1.0) as f32 as f64).collect())
        })
        .collect();
    MultiViewSample::new(sample_id, views, Some(label)).expect("generated sample has all views")
}

/// Generate the glyph train/val/test triplet with globally unique sample ids.
pub fn gen_glyph_images(config: &GeneratorConfig) -> Result<(Dataset, Dataset, Dataset)> {
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
            n_train: 100,
            n_val: 20,
            n_test: 20,
            ..GeneratorConfig::glyph_defaults(3)
        }
    }

    #[test]
    fn templates_satisfy_hamming_constraint() {
        for seed in 0..5 {
            let (glyphs, _) = glyph_templates(seed);
            assert_eq!(glyphs.len(), 10);
            assert!(pairwise_hamming_ok(&glyphs));
        }
    }

    #[test]
    fn hamming_checker_rejects_near_duplicates() {
        let a = vec![1u8; GLYPH_CELLS];
        let mut b = a.clone();
        b[0] = 0; // distance 1
        assert!(!pairwise_hamming_ok(&[a, b]));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = small_config();
        let (a, _, _) = gen_glyph_images(&cfg).unwrap();
        let (b, _, _) = gen_glyph_images(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let (train, _, _) = gen_glyph_images(&small_config()).unwrap();
        for s in &train.samples {
            for v in 0..s.num_views() {
                assert!(s
                    .view(v)
                    .unwrap()
                    .iter()
                    .all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn same_glyph_identity_across_all_views() {
        // Every view's image contains the label's glyph somewhere: at the
        // overlay position all on-cells read exactly the overlay intensity.
        let cfg = small_config();
        let (glyphs, _) = glyph_templates(cfg.seed);
        let (train, _, _) = gen_glyph_images(&cfg).unwrap();
        let side = cfg.image_side;
        let on_value = cfg.class_separation as f32 as f64;
        for s in train.samples.iter().take(25) {
            let glyph = &glyphs[s.label().unwrap()];
            for v in 0..s.num_views() {
                let img = s.view(v).unwrap();
                let mut found = false;
                'pos: for gy in 0..=(side - GLYPH_SIDE) {
                    for gx in 0..=(side - GLYPH_SIDE) {
                        let ok = (0..GLYPH_SIDE).all(|ky| {
                            (0..GLYPH_SIDE).all(|kx| {
                                glyph[ky * GLYPH_SIDE + kx] == 0
                                    || img[(gy + ky) * side + gx + kx] == on_value
                            })
                        });
                        if ok {
                            found = true;
                            break 'pos;
                        }
                    }
                }
                assert!(found, "sample {} view {v} lacks its glyph", s.id());
            }
        }
    }
}
