//! On-disk dataset format.
//!
//! A dataset directory holds one subdirectory per split (plus `clean/<split>`
//! for the pre-missingness originals), and a `manifest.json` with the schema,
//! the full processing configuration, and a sha256 checksum for every data
//! file. Loading verifies checksums, so tampering is detected before any
//! command consumes the data.
//!
//! Per split: tabular views are `view_<v>.csv` (header row, `sample_id`
//! first; a sample missing that view is simply absent from the file), image
//! views are `view_<v>.bin` (row-major f32 little-endian) plus
//! `view_<v>.meta.json`; `labels.csv` enumerates every sample with an empty
//! label cell for unlabeled samples.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetBundle, GeneratorConfig, MultiViewSample, SplitTag};
use crate::error::{Error, Result};
use crate::model::{DatasetSchema, ViewShape};

/// Processing applied between generation and persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessingConfig {
    pub drop_rate: f64,
    pub missing_seed: u64,
    pub keep_fraction: f64,
    pub label_seed: u64,
    pub standardized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: DatasetSchema,
    pub generator: Option<GeneratorConfig>,
    pub processing: Option<ProcessingConfig>,
    /// Calibration notes recorded with generated data (for the tabular
    /// generator: the probe-calibrated class separation).
    pub calibration: BTreeMap<String, f64>,
    pub has_clean: bool,
    pub code_version: String,
    /// Relative path -> sha256 hex digest, for every data file.
    pub checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a file and records its checksum.
fn write_file(root: &Path, rel: &str, bytes: &[u8], sums: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    sums.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn format_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct BinMeta {
    shape: Vec<usize>,
    dtype: String,
    count: usize,
    sample_ids: Vec<u64>,
}

fn split_files(dataset: &Dataset, prefix: &str, sums: &mut BTreeMap<String, String>, root: &Path) -> Result<()> {
    let schema = &dataset.schema;
    for v in 0..schema.num_views() {
        match &schema.view_shapes[v] {
            ViewShape::Flat { dim } => {
                let mut text = String::new();
                text.push_str("sample_id");
                for i in 0..*dim {
                    text.push_str(&format!(",f{i}"));
                }
                text.push('\n');
                for s in &dataset.samples {
                    if let Some(x) = s.view(v) {
                        text.push_str(&s.id().to_string());
                        for xi in x {
                            text.push(',');
                            text.push_str(&format_f64(*xi));
                        }
                        text.push('\n');
                    }
                }
                write_file(root, &format!("{prefix}/view_{v}.csv"), text.as_bytes(), sums)?;
            }
            ViewShape::Image { height, width, channels } => {
                let mut ids = Vec::new();
                let mut bytes: Vec<u8> = Vec::new();
                for s in &dataset.samples {
                    if let Some(x) = s.view(v) {
                        ids.push(s.id());
                        for &p in x {
                            bytes.extend_from_slice(&(p as f32).to_le_bytes());
                        }
                    }
                }
                let meta = BinMeta {
                    shape: vec![*height, *width, *channels],
                    dtype: "f32le".to_string(),
                    count: ids.len(),
                    sample_ids: ids,
                };
                write_file(root, &format!("{prefix}/view_{v}.bin"), &bytes, sums)?;
                write_file(
                    root,
                    &format!("{prefix}/view_{v}.meta.json"),
                    serde_json::to_string_pretty(&meta)?.as_bytes(),
                    sums,
                )?;
            }
        }
    }
    let mut labels = String::from("sample_id,label\n");
    for s in &dataset.samples {
        match s.label() {
            Some(y) => labels.push_str(&format!("{},{y}\n", s.id())),
            None => labels.push_str(&format!("{},\n", s.id())),
        }
    }
    write_file(root, &format!("{prefix}/labels.csv"), labels.as_bytes(), sums)?;
    Ok(())
}

/// Persist a bundle (and its clean counterpart when present).
pub fn save_bundle(
    dir: &Path,
    bundle: &DatasetBundle,
    generator: Option<GeneratorConfig>,
    processing: Option<ProcessingConfig>,
    calibration: BTreeMap<String, f64>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sums = BTreeMap::new();
    for split in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        split_files(bundle.split(split), split.dir_name(), &mut sums, dir)?;
    }
    if let Some(clean) = &bundle.clean {
        let (train, val, test) = clean.as_ref();
        split_files(train, "clean/train", &mut sums, dir)?;
        split_files(val, "clean/val", &mut sums, dir)?;
        split_files(test, "clean/test", &mut sums, dir)?;
    }
    let manifest = DatasetManifest {
        schema: bundle.train.schema.clone(),
        generator,
        processing,
        calibration,
        has_clean: bundle.clean.is_some(),
        code_version: crate::code_version(),
        checksums: sums,
    };
    let file = fs::File::create(dir.join("manifest.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join("manifest.json"))
        .map_err(|e| Error::malformed(format!("missing manifest.json in {}: {e}", dir.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn verify_checksum(dir: &Path, rel: &str, manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(rel))
        .map_err(|e| Error::malformed(format!("missing data file {rel}: {e}")))?;
    let expected = manifest
        .checksums
        .get(rel)
        .ok_or_else(|| Error::malformed(format!("{rel} not listed in manifest")))?;
    let actual = sha256_hex(&bytes);
    if &actual != expected {
        return Err(Error::ChecksumMismatch {
            path: rel.to_string(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(bytes)
}

struct RawView {
    rows: BTreeMap<u64, Vec<f64>>,
}

fn read_csv_view(bytes: &[u8], expected_dim: usize, name: &str) -> Result<RawView> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let mut rows = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != expected_dim + 1 {
            return Err(Error::malformed(format!(
                "{name}: row has {} columns, expected {}",
                record.len(),
                expected_dim + 1
            )));
        }
        let id: u64 = record[0]
            .parse()
            .map_err(|_| Error::malformed(format!("{name}: bad sample_id '{}'", &record[0])))?;
        let mut x = Vec::with_capacity(expected_dim);
        for field in record.iter().skip(1) {
            x.push(field.parse::<f64>().map_err(|_| {
                Error::malformed(format!("{name}: non-numeric feature '{field}'"))
            })?);
        }
        if rows.insert(id, x).is_some() {
            return Err(Error::malformed(format!("{name}: duplicate sample_id {id}")));
        }
    }
    Ok(RawView { rows })
}

fn read_bin_view(bin: &[u8], meta_bytes: &[u8], expected_dim: usize, name: &str) -> Result<RawView> {
    let meta: BinMeta = serde_json::from_slice(meta_bytes)?;
    if meta.dtype != "f32le" {
        return Err(Error::malformed(format!("{name}: unsupported dtype {}", meta.dtype)));
    }
    let dim: usize = meta.shape.iter().product();
    if dim != expected_dim {
        return Err(Error::malformed(format!(
            "{name}: shape {:?} does not match schema dim {expected_dim}",
            meta.shape
        )));
    }
    if bin.len() != meta.count * dim * 4 {
        return Err(Error::malformed(format!(
            "{name}: {} bytes, expected {}",
            bin.len(),
            meta.count * dim * 4
        )));
    }
    if meta.sample_ids.len() != meta.count {
        return Err(Error::malformed(format!("{name}: sample_ids length mismatch")));
    }
    let mut rows = BTreeMap::new();
    for (r, &id) in meta.sample_ids.iter().enumerate() {
        let mut x = Vec::with_capacity(dim);
        for i in 0..dim {
            let off = (r * dim + i) * 4;
            let v = f32::from_le_bytes([bin[off], bin[off + 1], bin[off + 2], bin[off + 3]]);
            x.push(v as f64);
        }
        if rows.insert(id, x).is_some() {
            return Err(Error::malformed(format!("{name}: duplicate sample_id {id}")));
        }
    }
    Ok(RawView { rows })
}

fn read_labels(bytes: &[u8], name: &str) -> Result<BTreeMap<u64, Option<usize>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::malformed(format!("{name}: label row needs 2 columns")));
        }
        let id: u64 = record[0]
            .parse()
            .map_err(|_| Error::malformed(format!("{name}: bad sample_id '{}'", &record[0])))?;
        let label = if record[1].is_empty() {
            None
        } else {
            Some(record[1].parse::<usize>().map_err(|_| {
                Error::malformed(format!("{name}: bad label '{}'", &record[1]))
            })?)
        };
        if labels.insert(id, label).is_some() {
            return Err(Error::malformed(format!("{name}: duplicate sample_id {id}")));
        }
    }
    Ok(labels)
}

fn assemble(
    views: Vec<RawView>,
    labels: BTreeMap<u64, Option<usize>>,
    schema: &DatasetSchema,
    split: SplitTag,
) -> Result<Dataset> {
    // Sample universe: ids present in at least one view file.
    let mut ids: Vec<u64> = views
        .iter()
        .flat_map(|v| v.rows.keys().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    for id in labels.keys() {
        if !ids.binary_search(id).is_ok() {
            return Err(Error::malformed(format!(
                "labels reference sample {id} absent from every view file"
            )));
        }
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let per_view: Vec<Option<Vec<f64>>> = views
            .iter()
            .map(|v| v.rows.get(&id).cloned())
            .collect();
        let label = labels.get(&id).copied().flatten();
        samples.push(MultiViewSample::new(id, per_view, label)?);
    }
    let ds = Dataset {
        schema: schema.clone(),
        samples,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Ingest per-view CSV files plus a label file.
///
/// A sample missing from a view's file has that view absent; a sample present
/// in any view file is included. Duplicate ids within a file and width
/// mismatches against the schema are malformed-input errors.
pub fn load_tabular_csv(
    view_paths: &[PathBuf],
    label_path: &Path,
    schema: &DatasetSchema,
    split: SplitTag,
) -> Result<Dataset> {
    schema.validate()?;
    if view_paths.len() != schema.num_views() {
        return Err(Error::invalid("one CSV path per schema view required"));
    }
    let mut views = Vec::with_capacity(view_paths.len());
    for (v, path) in view_paths.iter().enumerate() {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::malformed(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        views.push(read_csv_view(
            &bytes,
            schema.view_dim(v),
            &path.display().to_string(),
        )?);
    }
    let label_bytes = fs::read(label_path)
        .map_err(|e| Error::malformed(format!("cannot open {}: {e}", label_path.display())))?;
    let labels = read_labels(&label_bytes, &label_path.display().to_string())?;
    assemble(views, labels, schema, split)
}

/// Load one split from a dataset directory, verifying checksums.
pub fn load_split(dir: &Path, split: SplitTag) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    load_split_with_manifest(dir, split.dir_name(), split, &manifest)
}

fn load_split_with_manifest(
    dir: &Path,
    prefix: &str,
    split: SplitTag,
    manifest: &DatasetManifest,
) -> Result<Dataset> {
    let schema = &manifest.schema;
    let mut views = Vec::with_capacity(schema.num_views());
    for v in 0..schema.num_views() {
        match &schema.view_shapes[v] {
            ViewShape::Flat { dim } => {
                let rel = format!("{prefix}/view_{v}.csv");
                let bytes = verify_checksum(dir, &rel, manifest)?;
                views.push(read_csv_view(&bytes, *dim, &rel)?);
            }
            ViewShape::Image { .. } => {
                let rel_bin = format!("{prefix}/view_{v}.bin");
                let rel_meta = format!("{prefix}/view_{v}.meta.json");
                let bin = verify_checksum(dir, &rel_bin, manifest)?;
                let meta = verify_checksum(dir, &rel_meta, manifest)?;
                views.push(read_bin_view(&bin, &meta, schema.view_dim(v), &rel_bin)?);
            }
        }
    }
    let rel = format!("{prefix}/labels.csv");
    let labels = read_labels(&verify_checksum(dir, &rel, manifest)?, &rel)?;
    assemble(views, labels, schema, split)
}

/// Load the full bundle (clean splits included when recorded).
pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let train = load_split_with_manifest(dir, "train", SplitTag::Train, &manifest)?;
    let val = load_split_with_manifest(dir, "val", SplitTag::Val, &manifest)?;
    let test = load_split_with_manifest(dir, "test", SplitTag::Test, &manifest)?;
    let clean = if manifest.has_clean {
        Some(Box::new((
            load_split_with_manifest(dir, "clean/train", SplitTag::Train, &manifest)?,
            load_split_with_manifest(dir, "clean/val", SplitTag::Val, &manifest)?,
            load_split_with_manifest(dir, "clean/test", SplitTag::Test, &manifest)?,
        )))
    } else {
        None
    };
    Ok((
        DatasetBundle {
            train,
            val,
            test,
            clean,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_experiment_data, GeneratorConfig};

    fn small_bundle() -> DatasetBundle {
        let cfg = GeneratorConfig {
            n_train: 80,
            n_val: 20,
            n_test: 20,
            view_dims: Some(vec![5; 4]),
            ..GeneratorConfig::tabular_defaults(1)
        };
        generate_experiment_data(&cfg, 0.4, 11, 0.5, 12).unwrap()
    }

    #[test]
    fn tabular_bundle_round_trips_exactly() {
        let bundle = small_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle, None, None, BTreeMap::new()).unwrap();
        let (loaded, manifest) = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.train, bundle.train);
        assert_eq!(loaded.val, bundle.val);
        assert_eq!(loaded.test, bundle.test);
        assert_eq!(
            loaded.clean.as_deref().unwrap().0,
            bundle.clean.as_deref().unwrap().0
        );
        assert!(manifest.has_clean);
    }

    #[test]
    fn glyph_bundle_round_trips_exactly() {
        let cfg = GeneratorConfig {
            n_train: 30,
            n_val: 10,
            n_test: 10,
            ..GeneratorConfig::glyph_defaults(2)
        };
        let bundle = generate_experiment_data(&cfg, 0.5, 3, 0.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle, Some(cfg), None, BTreeMap::new()).unwrap();
        let (loaded, _) = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.train, bundle.train);
        assert_eq!(loaded.test, bundle.test);
    }

    #[test]
    fn tampering_fails_checksum_verification() {
        let bundle = small_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle, None, None, BTreeMap::new()).unwrap();
        let victim = dir.path().join("train/view_0.csv");
        let mut text = fs::read_to_string(&victim).unwrap();
        text.push_str("999999,1.0,1.0,1.0,1.0,1.0\n");
        fs::write(&victim, text).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }), "{err}");
    }

    #[test]
    fn saving_twice_yields_identical_checksums() {
        let bundle = small_bundle();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_bundle(d1.path(), &bundle, None, None, BTreeMap::new()).unwrap();
        save_bundle(d2.path(), &bundle, None, None, BTreeMap::new()).unwrap();
        let m1 = read_manifest(d1.path()).unwrap();
        let m2 = read_manifest(d2.path()).unwrap();
        assert_eq!(m1.checksums, m2.checksums);
    }

    #[test]
    fn csv_loader_contracts() {
        use crate::model::{DatasetSchema, ViewLikelihood, ViewShape};
        let dir = tempfile::tempdir().unwrap();
        let schema = DatasetSchema {
            view_shapes: vec![ViewShape::Flat { dim: 2 }, ViewShape::Flat { dim: 2 }],
            num_classes: 2,
            view_likelihoods: vec![ViewLikelihood::GaussianUnitVariance; 2],
        };
        let v0 = dir.path().join("v0.csv");
        let v1 = dir.path().join("v1.csv");
        let labels = dir.path().join("labels.csv");
        fs::write(&v0, "sample_id,f0,f1\n1,0.5,1.5\n2,-1.0,2.0\n").unwrap();
        fs::write(&v1, "sample_id,f0,f1\n2,3.0,4.0\n").unwrap();
        fs::write(&labels, "sample_id,label\n1,0\n2,\n").unwrap();

        let ds = load_tabular_csv(
            &[v0.clone(), v1.clone()],
            &labels,
            &schema,
            SplitTag::Train,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        let s1 = &ds.samples[0];
        assert_eq!(s1.present_mask(), vec![true, false]);
        assert_eq!(s1.label(), Some(0));
        let s2 = &ds.samples[1];
        assert_eq!(s2.present_mask(), vec![true, true]);
        assert_eq!(s2.label(), None);

        // Duplicate id: malformed.
        fs::write(&v0, "sample_id,f0,f1\n1,0.5,1.5\n1,0.0,0.0\n").unwrap();
        assert!(matches!(
            load_tabular_csv(&[v0.clone(), v1.clone()], &labels, &schema, SplitTag::Train),
            Err(Error::MalformedInput(_))
        ));

        // Width mismatch: malformed.
        fs::write(&v0, "sample_id,f0\n1,0.5\n").unwrap();
        assert!(matches!(
            load_tabular_csv(&[v0, v1], &labels, &schema, SplitTag::Train),
            Err(Error::MalformedInput(_))
        ));
    }
}
