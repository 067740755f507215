//! Synthetic activation datasets whose class separation grows with depth.
//!
//! Layer `i` activation of a class-`c` sample is
//! `(γ·i/L)·m_c + (i/L)·b + s ⊙ z`, with `m_c ~ N(0, I)` the class
//! direction, `b ~ N(0, I)` a drift shared by every class and `z ~ N(0, I)`.
//! The per-neuron noise scale is `s_j = σ_n·exp(spread·u_j)`, `u_j ~ N(0,1)`,
//! so `spread = 0` gives the homoscedastic `N(0, σ_n²)` noise.
//!
//! Text embeddings are random Gaussian vectors orthonormalized with
//! Gram–Schmidt. Sample `s` has label `s mod C`. Every per-layer stream is
//! seeded from `(seed, layer)` so layers can be generated in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationDataset, Splits};
use crate::error::{Error, Result};
use crate::numkernel::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub layers: usize,
    pub neurons: usize,
    pub embed_dim: usize,
    pub samples: usize,
    /// Class-mean separation reached at the last layer.
    pub depth_gain: f64,
    pub noise_sigma: f64,
    /// Log-normal spread of per-neuron noise scales; 0 keeps every neuron at
    /// `noise_sigma`.
    pub noise_spread: f64,
    /// Fraction of each class assigned to the calibration split.
    pub calibration_fraction: f64,
    /// Fraction of each class assigned to the train split; the rest is test.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            layers: 12,
            neurons: 64,
            embed_dim: 32,
            samples: 3000,
            depth_gain: 3.0,
            noise_sigma: 1.0,
            noise_spread: 0.0,
            calibration_fraction: 1.0 / 3.0,
            train_fraction: 1.0 / 3.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Larger, heteroscedastic world used for calibration-size sweeps:
    /// 1000 calibration and 100 test samples per class.
    pub fn calibration_sweep() -> Self {
        SynthConfig {
            neurons: 256,
            samples: 11_000,
            depth_gain: 0.5,
            noise_spread: 1.0,
            calibration_fraction: 10.0 / 11.0,
            train_fraction: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.layers < 1 {
            return fail("need at least 1 layer".into());
        }
        if self.neurons < 1 {
            return fail("need at least 1 neuron per layer".into());
        }
        if self.classes > self.embed_dim {
            return fail(format!(
                "cannot orthogonalize {} class embeddings in {} dimensions",
                self.classes, self.embed_dim
            ));
        }
        if !self.depth_gain.is_finite() || self.depth_gain < 0.0 {
            return fail(format!("depth_gain must be >= 0, got {}", self.depth_gain));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return fail(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !self.noise_spread.is_finite() || self.noise_spread < 0.0 {
            return fail(format!(
                "noise_spread must be >= 0, got {}",
                self.noise_spread
            ));
        }
        let (c, t) = (self.calibration_fraction, self.train_fraction);
        if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&t) || c + t > 1.0 + 1e-12 {
            return fail(format!(
                "split fractions must be in [0,1] and sum to at most 1 (calibration {c}, train {t})"
            ));
        }
        Ok(())
    }
}

// Stream 0 holds the class-level draws; layer i uses stream i.
fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Result<Matrix> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = normals(rng, dim);
        // Two Gram–Schmidt passes keep rows orthogonal to machine precision.
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= p * bi);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|vi| *vi /= n);
            basis.push(v);
        }
    }
    Matrix::from_rows(&basis)
}

fn assign_splits(cfg: &SynthConfig) -> Splits {
    let c = cfg.classes;
    let mut per_class = vec![0usize; c];
    for s in 0..cfg.samples {
        per_class[s % c] += 1;
    }
    let cuts: Vec<(usize, usize)> = per_class
        .iter()
        .map(|&n| {
            let cal = (n as f64 * cfg.calibration_fraction).round() as usize;
            let train = ((n as f64 * cfg.train_fraction).round() as usize).min(n - cal.min(n));
            (cal.min(n), train)
        })
        .collect();

    let mut splits = Splits::default();
    let mut seen = vec![0usize; c];
    for s in 0..cfg.samples {
        let class = s % c;
        let k = seen[class];
        seen[class] += 1;
        let (cal, train) = cuts[class];
        if k < cal {
            splits.calibration.push(s);
        } else if k < cal + train {
            splits.train.push(s);
        } else {
            splits.test.push(s);
        }
    }
    splits
}

/// Per-class directions `m_c` (`C × N`), shared drift `b` and noise scales.
pub(crate) struct WorldParams {
    pub class_means: Matrix,
    pub drift: Vec<f64>,
    pub noise_scale: Vec<f64>,
    pub text_embeddings: Matrix,
}

pub(crate) fn world_params(cfg: &SynthConfig) -> Result<WorldParams> {
    let mut rng = stream(cfg.seed, 0);
    let text_embeddings = orthonormal_rows(&mut rng, cfg.classes, cfg.embed_dim)?;
    let class_means = Matrix::from_vec(
        cfg.classes,
        cfg.neurons,
        normals(&mut rng, cfg.classes * cfg.neurons),
    )?;
    let drift = normals(&mut rng, cfg.neurons);
    let noise_scale = normals(&mut rng, cfg.neurons)
        .into_iter()
        .map(|u| cfg.noise_sigma * (cfg.noise_spread * u).exp())
        .collect();
    Ok(WorldParams {
        class_means,
        drift,
        noise_scale,
        text_embeddings,
    })
}

/// Mean of layer-`layer` activations for `class` under `cfg`.
pub fn class_mean(cfg: &SynthConfig, layer: usize, class: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let w = world_params(cfg)?;
    let depth = layer as f64 / cfg.layers as f64;
    Ok(w.class_means
        .row(class)
        .iter()
        .zip(&w.drift)
        .map(|(m, b)| cfg.depth_gain * depth * m + depth * b)
        .collect())
}

pub fn generate(cfg: &SynthConfig) -> Result<ActivationDataset> {
    cfg.validate()?;
    let w = world_params(cfg)?;
    let (s, n, l) = (cfg.samples, cfg.neurons, cfg.layers);

    let layers = (1..=l)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, i as u64);
            let depth = i as f64 / l as f64;
            let mut data = Vec::with_capacity(s * n);
            for sample in 0..s {
                let m = w.class_means.row(sample % cfg.classes);
                for ((mu, drift), scale) in m.iter().zip(&w.drift).zip(&w.noise_scale) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(cfg.depth_gain * depth * mu + depth * drift + scale * z);
                }
            }
            Matrix::from_vec(s, n, data)
        })
        .collect::<Result<Vec<_>>>()?;

    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class_{c:02}")).collect();
    let descriptions = class_names
        .iter()
        .map(|name| format!("a photo of a {name}"))
        .collect();

    let ds = ActivationDataset {
        layers,
        labels: (0..s).map(|k| (k % cfg.classes) as u32).collect(),
        class_names,
        descriptions,
        text_embeddings: w.text_embeddings,
        splits: assign_splits(cfg),
    };
    ds.validate()?;
    Ok(ds)
}
