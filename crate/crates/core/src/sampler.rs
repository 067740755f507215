//! Calibration-set Gaussian estimation and class-rate inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstore::{
    decode_f32, encode_f32, read_file, read_json, write_file, write_json, ActivationDataset,
    SplitName, DTYPE,
};
use crate::error::{Error, Result};
use crate::numkernel::{argmax, argmin, check_len, cosine_similarity, Matrix, VAR_FLOOR};

/// Per-class, per-neuron diagonal Gaussians for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    pub layer: usize,
    /// `C × N`
    pub means: Matrix,
    /// `C × N`, every entry `>= VAR_FLOOR`.
    pub variances: Matrix,
    pub counts: Vec<usize>,
}

/// Per-class mean activations for the cosine baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub layer: usize,
    pub means: Matrix,
}

/// Which per-neuron rate to evaluate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateForm {
    /// `log₂σ² + (ℓ−μ)²/(2σ²)`, constants dropped.
    #[default]
    Printed,
    /// Full Gaussian negative log-likelihood in bits:
    /// `½log₂(2πσ²) + (ℓ−μ)²/(2σ² ln 2)`.
    FullNll,
}

impl ClassGaussians {
    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn num_neurons(&self) -> usize {
        self.means.cols()
    }
}

/// Running mean / M2 accumulator (Welford).
#[derive(Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }
}

fn per_class_samples(
    ds: &ActivationDataset,
    split: SplitName,
    per_class_cap: usize,
) -> Result<Vec<Vec<usize>>> {
    if per_class_cap == 0 {
        return Err(Error::InvalidConfig(
            "per-class calibration cap must be at least 1".into(),
        ));
    }
    let mut by_class = ds.split_by_class(split);
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            return Err(Error::MissingClass {
                class,
                split: split.as_str().into(),
            });
        }
        idx.truncate(per_class_cap);
    }
    Ok(by_class)
}

/// Fits `μ` and the population (divide-by-n) variance per class and neuron
/// from at most `per_class_cap` samples of each class, taken in split order.
/// Variances are floored at [`VAR_FLOOR`].
pub fn fit_gaussians(
    ds: &ActivationDataset,
    layer: usize,
    split: SplitName,
    per_class_cap: usize,
) -> Result<ClassGaussians> {
    let acts = ds.layer(layer)?;
    let by_class = per_class_samples(ds, split, per_class_cap)?;
    let (c, n) = (ds.num_classes(), acts.cols());

    let mut means = Matrix::zeros(c, n);
    let mut variances = Matrix::zeros(c, n);
    let mut counts = Vec::with_capacity(c);
    for (class, idx) in by_class.iter().enumerate() {
        let mut acc = Moments::new(n);
        for &s in idx {
            acc.push(acts.row(s));
        }
        means.row_mut(class).copy_from_slice(&acc.mean);
        let k = acc.n as f64;
        for (v, m2) in variances.row_mut(class).iter_mut().zip(&acc.m2) {
            *v = (m2 / k).max(VAR_FLOOR);
        }
        counts.push(acc.n);
    }
    Ok(ClassGaussians {
        layer,
        means,
        variances,
        counts,
    })
}

pub fn fit_prototypes(
    ds: &ActivationDataset,
    layer: usize,
    split: SplitName,
    per_class_cap: usize,
) -> Result<ClassPrototypes> {
    let acts = ds.layer(layer)?;
    let by_class = per_class_samples(ds, split, per_class_cap)?;
    let mut means = Matrix::zeros(ds.num_classes(), acts.cols());
    for (class, idx) in by_class.iter().enumerate() {
        let row = means.row_mut(class);
        for &s in idx {
            row.iter_mut().zip(acts.row(s)).for_each(|(m, v)| *m += v);
        }
        let k = idx.len() as f64;
        row.iter_mut().for_each(|m| *m /= k);
    }
    Ok(ClassPrototypes { layer, means })
}

/// Class-rate of `act` under every class, in the printed constant-dropped
/// form: `(1/N)·Σⱼ log₂σ² + (ℓ−μ)²/(2σ²)`.
pub fn class_rate(act: &[f64], g: &ClassGaussians) -> Result<Vec<f64>> {
    class_rate_with(act, g, RateForm::Printed)
}

pub fn class_rate_with(act: &[f64], g: &ClassGaussians, form: RateForm) -> Result<Vec<f64>> {
    check_len("class_rate", g.num_neurons(), act.len())?;
    let n = act.len() as f64;
    let rates: Vec<f64> = g
        .means
        .iter_rows()
        .zip(g.variances.iter_rows())
        .map(|(mu, var)| {
            let total: f64 = act
                .iter()
                .zip(mu)
                .zip(var)
                .map(|((&x, &m), &v)| {
                    let q = (x - m) * (x - m) / (2.0 * v);
                    match form {
                        RateForm::Printed => v.log2() + q,
                        RateForm::FullNll => {
                            0.5 * (2.0 * std::f64::consts::PI * v).log2()
                                + q / std::f64::consts::LN_2
                        }
                    }
                })
                .sum();
            total / n
        })
        .collect();
    if rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("class_rate"));
    }
    Ok(rates)
}

/// `argmin_c` of the class-rate; ties go to the lowest class index.
pub fn predict_by_rate(act: &[f64], g: &ClassGaussians) -> Result<usize> {
    let rates = class_rate(act, g)?;
    argmin(&rates).ok_or(Error::Empty("no classes to predict"))
}

pub fn predict_by_rate_with(act: &[f64], g: &ClassGaussians, form: RateForm) -> Result<usize> {
    let rates = class_rate_with(act, g, form)?;
    argmin(&rates).ok_or(Error::Empty("no classes to predict"))
}

/// Cosine similarity of `act` to every class prototype.
pub fn prototype_similarities(act: &[f64], protos: &ClassPrototypes) -> Result<Vec<f64>> {
    check_len("prototype_similarities", protos.means.cols(), act.len())?;
    protos
        .means
        .iter_rows()
        .map(|p| cosine_similarity(act, p))
        .collect()
}

pub fn predict_by_cosine(act: &[f64], protos: &ClassPrototypes) -> Result<usize> {
    let sims = prototype_similarities(act, protos)?;
    argmax(&sims).ok_or(Error::Empty("no classes to predict"))
}

#[derive(Debug, Serialize, Deserialize)]
struct GaussiansHeader {
    version: u32,
    layer: usize,
    classes: usize,
    neurons: usize,
    counts: Vec<usize>,
    var_floor: f64,
    /// Payload order: means (C × N) then variances (C × N).
    layout: String,
    dtype: String,
}

pub fn gaussians_stem(layer: usize) -> String {
    format!("gaussians_layer_{layer}")
}

/// Writes `gaussians_layer_<i>.json` and `gaussians_layer_<i>.bin` in `dir`.
pub fn save_gaussians(g: &ClassGaussians, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = gaussians_stem(g.layer);
    let header = GaussiansHeader {
        version: 1,
        layer: g.layer,
        classes: g.num_classes(),
        neurons: g.num_neurons(),
        counts: g.counts.clone(),
        var_floor: VAR_FLOOR,
        layout: "means,variances".into(),
        dtype: DTYPE.into(),
    };
    let mut payload = encode_f32(g.means.as_slice());
    payload.extend(encode_f32(g.variances.as_slice()));
    write_file(&dir.join(format!("{stem}.bin")), &payload)?;
    write_json(&dir.join(format!("{stem}.json")), &header)
}

/// Reads what [`save_gaussians`] wrote. `f32(1e-6)` is slightly below the
/// floor, so variances are re-floored after decoding.
pub fn load_gaussians(dir: impl AsRef<Path>, layer: usize) -> Result<ClassGaussians> {
    let dir = dir.as_ref();
    let stem = gaussians_stem(layer);
    let json_path = dir.join(format!("{stem}.json"));
    let header: GaussiansHeader = read_json(&json_path)?;
    if header.layer != layer || header.dtype != DTYPE || header.counts.len() != header.classes {
        return Err(Error::format(json_path, "inconsistent gaussian header"));
    }
    let bin_path = dir.join(format!("{stem}.bin"));
    let cn = header.classes * header.neurons;
    let values = decode_f32(&bin_path, &read_file(&bin_path)?, 2 * cn)?;
    let means = Matrix::from_vec(header.classes, header.neurons, values[..cn].to_vec())?;
    let variances = Matrix::from_vec(
        header.classes,
        header.neurons,
        values[cn..].iter().map(|v| v.max(VAR_FLOOR)).collect(),
    )?;
    Ok(ClassGaussians {
        layer,
        means,
        variances,
        counts: header.counts,
    })
}
