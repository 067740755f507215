//! ACTD activation container.
//!
//! A container is a directory holding:
//!
//! * `manifest.json` with shapes, class names/descriptions and split indices,
//! * `layer_<i>.bin` (i from 1): `S × N_i` little-endian `f32`, row-major,
//! * `labels.bin`: `S` little-endian `u32`,
//! * `text_emb.bin`: `C × E` little-endian `f32`, unit-norm rows.
//!
//! Activations are stored token-averaged. In memory everything is `f64`; the
//! `f32` quantization happens once at write time.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{norm, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.bin";
pub const TEXT_EMB_FILE: &str = "text_emb.bin";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

/// Tolerance on the L2 norm of stored text embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub fn layer_file(layer: usize) -> String {
    format!("layer_{layer}.bin")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Calibration,
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Calibration => "calibration",
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibration" => Ok(SplitName::Calibration),
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub calibration: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Calibration => &self.calibration,
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_layers: usize,
    pub neurons: Vec<usize>,
    pub embed_dim: usize,
    pub num_samples: usize,
    pub classes: Vec<String>,
    pub descriptions: Vec<String>,
    pub splits: Splits,
    pub dtype: String,
}

/// Token-averaged activations of every exit layer for a labelled sample set,
/// plus one text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    /// `layers[i - 1]` is layer `i`, shape `S × N_i`.
    pub layers: Vec<Matrix>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub descriptions: Vec<String>,
    /// `C × E`, unit-norm rows.
    pub text_embeddings: Matrix,
    pub splits: Splits,
}

impl ActivationDataset {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_embeddings.cols()
    }

    pub fn neurons(&self) -> Vec<usize> {
        self.layers.iter().map(Matrix::cols).collect()
    }

    /// Activation matrix for 1-based `layer`.
    pub fn layer(&self, layer: usize) -> Result<&Matrix> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::OutOfRange(format!(
                "layer {layer} (dataset has layers 1..={})",
                self.layers.len()
            )));
        }
        Ok(&self.layers[layer - 1])
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample] as usize
    }

    pub fn text_embedding(&self, class: usize) -> &[f64] {
        self.text_embeddings.row(class)
    }

    /// Indices of `split` grouped by class, in split order.
    pub fn split_by_class(&self, split: SplitName) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for &s in self.splits.get(split) {
            out[self.label(s)].push(s);
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: FORMAT_VERSION,
            num_layers: self.num_layers(),
            neurons: self.neurons(),
            embed_dim: self.embed_dim(),
            num_samples: self.num_samples(),
            classes: self.class_names.clone(),
            descriptions: self.descriptions.clone(),
            splits: self.splits.clone(),
            dtype: DTYPE.to_owned(),
        }
    }

    /// Checks every container invariant.
    pub fn validate(&self) -> Result<()> {
        let s = self.num_samples();
        let c = self.num_classes();
        if self.layers.is_empty() {
            return Err(Error::Invariant("dataset has no layers".into()));
        }
        if c == 0 {
            return Err(Error::Invariant("dataset has no classes".into()));
        }
        if self.descriptions.len() != c {
            return Err(Error::Invariant(format!(
                "{} descriptions for {c} classes",
                self.descriptions.len()
            )));
        }
        for (i, m) in self.layers.iter().enumerate() {
            if m.rows() != s {
                return Err(Error::Invariant(format!(
                    "layer {} has {} rows but there are {s} labels",
                    i + 1,
                    m.rows()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("layer activations"));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Invariant(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        if self.text_embeddings.rows() != c {
            return Err(Error::Invariant(format!(
                "{} text embeddings for {c} classes",
                self.text_embeddings.rows()
            )));
        }
        if !self.text_embeddings.is_finite() {
            return Err(Error::NonFinite("text embeddings"));
        }
        for (k, row) in self.text_embeddings.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Invariant(format!(
                    "text embedding {k} has norm {n}, expected 1"
                )));
            }
        }
        let mut seen = HashSet::new();
        for name in [SplitName::Calibration, SplitName::Train, SplitName::Test] {
            for &idx in self.splits.get(name) {
                if idx >= s {
                    return Err(Error::Invariant(format!(
                        "{} split index {idx} >= {s} samples",
                        name.as_str()
                    )));
                }
                if !seen.insert(idx) {
                    return Err(Error::Invariant(format!(
                        "sample {idx} appears twice across splits ({})",
                        name.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Column-wise mean of a `T × N` token grid.
pub fn token_average(tokens: &Matrix) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::Empty("token_average needs at least one token"));
    }
    let mut acc = vec![0.0; tokens.cols()];
    for row in tokens.iter_rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let t = tokens.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    Ok(acc)
}

pub(crate) fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn decode_f32(path: &Path, bytes: &[u8], expected_len: usize) -> Result<Vec<f64>> {
    check_size(path, bytes.len(), expected_len * 4)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("container payload"));
    }
    Ok(values)
}

fn check_size(path: &Path, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::SizeMismatch {
            path: path.to_owned(),
            expected: expected as u64,
            found: found as u64,
        });
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_dataset(ds: &ActivationDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    for (i, m) in ds.layers.iter().enumerate() {
        write_file(&dir.join(layer_file(i + 1)), &encode_f32(m.as_slice()))?;
    }
    let labels: Vec<u8> = ds.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_file(&dir.join(LABELS_FILE), &labels)?;
    write_file(
        &dir.join(TEXT_EMB_FILE),
        &encode_f32(ds.text_embeddings.as_slice()),
    )?;
    write_json(&dir.join(MANIFEST_FILE), &ds.manifest())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<ActivationDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;
    check_manifest(&manifest_path, &manifest)?;

    let s = manifest.num_samples;
    let c = manifest.classes.len();
    let e = manifest.embed_dim;

    let mut layers = Vec::with_capacity(manifest.num_layers);
    for (i, &n) in manifest.neurons.iter().enumerate() {
        let path = dir.join(layer_file(i + 1));
        let values = decode_f32(&path, &read_file(&path)?, s * n)?;
        layers.push(Matrix::from_vec(s, n, values)?);
    }

    let labels_path = dir.join(LABELS_FILE);
    let bytes = read_file(&labels_path)?;
    check_size(&labels_path, bytes.len(), s * 4)?;
    let labels = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let text_path = dir.join(TEXT_EMB_FILE);
    let text = decode_f32(&text_path, &read_file(&text_path)?, c * e)?;

    let ds = ActivationDataset {
        layers,
        labels,
        class_names: manifest.classes,
        descriptions: manifest.descriptions,
        text_embeddings: Matrix::from_vec(c, e, text)?,
        splits: manifest.splits,
    };
    ds.validate()?;
    Ok(ds)
}

fn check_manifest(path: &PathBuf, m: &Manifest) -> Result<()> {
    let bad = |reason: String| Err(Error::format(path, reason));
    if m.version != FORMAT_VERSION {
        return bad(format!("unsupported version {}", m.version));
    }
    if m.dtype != DTYPE {
        return bad(format!("unsupported dtype `{}`", m.dtype));
    }
    if m.neurons.len() != m.num_layers {
        return bad(format!(
            "num_layers = {} but {} neuron counts",
            m.num_layers,
            m.neurons.len()
        ));
    }
    if m.descriptions.len() != m.classes.len() {
        return bad(format!(
            "{} classes but {} descriptions",
            m.classes.len(),
            m.descriptions.len()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(samples: usize) -> ActivationDataset {
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let l1: Vec<f64> = (0..samples * 3).map(|v| v as f64 * 0.25).collect();
        let l2: Vec<f64> = (0..samples * 2).map(|v| -(v as f64)).collect();
        ActivationDataset {
            layers: vec![
                Matrix::from_vec(samples, 3, l1).unwrap(),
                Matrix::from_vec(samples, 2, l2).unwrap(),
            ],
            labels: (0..samples as u32).map(|s| s % 2).collect(),
            class_names: vec!["cat".into(), "dog".into()],
            descriptions: vec!["a photo of a cat".into(), "a photo of a dog".into()],
            text_embeddings: Matrix::from_rows(&[vec![1.0, 0.0], vec![s2, s2]]).unwrap(),
            splits: Splits {
                calibration: (0..samples / 2).collect(),
                train: vec![],
                test: (samples / 2..samples).collect(),
            },
        }
    }

    #[test]
    fn token_average_examples() {
        let one = Matrix::from_rows(&[vec![1.5, -2.0, 3.0]]).unwrap();
        assert_eq!(token_average(&one).unwrap(), vec![1.5, -2.0, 3.0]);
        let two = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(token_average(&two).unwrap(), vec![2.0, 3.0]);
        assert!(token_average(&Matrix::zeros(0, 4)).is_err());
    }

    #[test]
    fn manifest_lists_layers_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(6), dir.path()).unwrap();
        let m: Manifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.num_layers, 2);
        assert_eq!(m.classes.len(), 2);
        assert_eq!(m.neurons, vec![3, 2]);
        assert_eq!(m.dtype, "f32le");
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(0);
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.num_samples(), 0);
        assert_eq!(back.neurons(), vec![3, 2]);
    }

    #[test]
    fn truncated_layer_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(6), dir.path()).unwrap();
        let p = dir.path().join(layer_file(2));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(6), dir.path()).unwrap();
        let p = dir.path().join(LABELS_FILE);
        fs::write(&p, [0u8; 5 * 4]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = toy(6);
        ds.splits.train = vec![0];
        assert!(matches!(ds.validate(), Err(Error::Invariant(_))));
        let mut ds = toy(6);
        ds.splits.test.push(6);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn non_unit_text_embedding_rejected() {
        let mut ds = toy(4);
        ds.text_embeddings.set(0, 0, 1.1);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(4), dir.path()).unwrap();
        let p = dir.path().join(layer_file(1));
        let mut bytes = fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(4), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ \"version\": 1 ").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
