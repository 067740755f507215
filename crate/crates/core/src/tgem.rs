//! Learned exit modules.
//!
//! An [`ExitModule`] pairs a *jumper* MLP that projects a layer's activation
//! (`N → H → K`) with a text-guided head MLP (`E → H → 2K`) that maps a class
//! text embedding to a diagonal Gaussian over the projected space: the first
//! `K` outputs are the mean, the last `K` the log-variance, with
//! `σ² = max(exp(s), VAR_FLOOR)`.
//!
//! Training minimizes the rate `−log₂ N(jumper(ℓ) | μ(t), σ²(t))`, the cosine
//! loss `1 − CS(t, jumper(ℓ))`, or their unweighted sum, where `t` is the
//! text embedding of the sample's own class.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actstore::{
    decode_f32, encode_f32, read_file, read_json, write_file, write_json, ActivationDataset, DTYPE,
};
use crate::error::{Error, Result};
use crate::numkernel::{
    argmax, argmin, check_len, cosine_similarity, cosine_similarity_grad, gaussian_nll_bits,
    gaussian_nll_bits_grad, Activation, AdamConfig, AdamState, Matrix, Mlp, VAR_FLOOR,
};

/// Starting bias of the log-variance head. A broad initial variance keeps
/// the rate gradient on the jumper small until the variance has tightened,
/// so the rate term does not pull the projection towards a collapsed point
/// before the cosine term has aligned it with the text embeddings.
pub const INITIAL_LOG_VARIANCE: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Rate,
    Cosine,
    Both,
}

impl LossKind {
    pub fn use_rate(self) -> bool {
        matches!(self, LossKind::Rate | LossKind::Both)
    }

    pub fn use_cosine(self) -> bool {
        matches!(self, LossKind::Cosine | LossKind::Both)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(LossKind::Rate),
            "cosine" => Ok(LossKind::Cosine),
            "both" => Ok(LossKind::Both),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss `{other}` (expected rate, cosine or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub initial_lr: f64,
    /// Epochs without held-out improvement before the learning rate decays.
    pub patience: usize,
    pub decay: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    /// Tail fraction of the train split held out for the plateau monitor.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            loss: LossKind::Both,
            epochs: 120,
            initial_lr: 1e-4,
            patience: 10,
            decay: 0.5,
            min_lr: 1e-6,
            batch_size: 64,
            holdout_fraction: 0.1,
            seed: 7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.initial_lr.is_nan()
            || self.initial_lr <= 0.0
            || self.min_lr.is_nan()
            || self.min_lr <= 0.0
        {
            return fail("learning rates must be positive".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail(format!(
                "holdout fraction must be in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        Ok(())
    }
}

/// Architecture of an exit module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleShape {
    pub neurons: usize,
    pub embed_dim: usize,
    pub k: usize,
    /// Hidden width of both MLPs; 0 means a single affine layer.
    pub hidden: usize,
}

impl ModuleShape {
    /// Hidden width defaults to `2K`.
    pub fn new(neurons: usize, embed_dim: usize, k: usize) -> Self {
        ModuleShape {
            neurons,
            embed_dim,
            k,
            hidden: 2 * k,
        }
    }

    pub fn jumper_dims(&self) -> Vec<usize> {
        self.dims(self.neurons, self.k)
    }

    pub fn psi_dims(&self) -> Vec<usize> {
        self.dims(self.embed_dim, 2 * self.k)
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        if self.hidden == 0 {
            vec![input, output]
        } else {
            vec![input, self.hidden, output]
        }
    }

    pub fn jumper_parameter_count(&self) -> usize {
        affine_count(&self.jumper_dims())
    }

    /// Exact parameter count of jumper plus text head.
    pub fn parameter_count(&self) -> usize {
        affine_count(&self.jumper_dims()) + affine_count(&self.psi_dims())
    }

    pub fn check(&self, loss: LossKind) -> Result<()> {
        if self.neurons == 0 || self.embed_dim == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(format!(
                "exit module dimensions must be positive: {self:?}"
            )));
        }
        if loss.use_cosine() && self.k != self.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "the cosine loss needs K equal to the text embedding dimension (K = {}, E = {})",
                self.k, self.embed_dim
            )));
        }
        Ok(())
    }
}

fn affine_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean rate (bits) over the epoch's training samples.
    pub train_rate: f64,
    pub holdout_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitModule {
    pub layer: usize,
    pub shape: ModuleShape,
    pub jumper: Mlp,
    pub psi: Mlp,
    pub config: LossConfig,
    pub log: Vec<EpochLog>,
}

/// Scoring rule used at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFunction {
    Rate,
    Cosine,
}

/// Gaussian parameters produced by the text head for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Loss value split into its parts, averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub rate: f64,
    pub cosine: f64,
}

impl ExitModule {
    pub fn new(layer: usize, shape: ModuleShape, config: LossConfig) -> Result<Self> {
        shape.check(config.loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let jumper = Mlp::init(
            &shape.jumper_dims(),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let mut psi = Mlp::init(
            &shape.psi_dims(),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let head = psi
            .layers_mut()
            .last_mut()
            .expect("psi has an output layer");
        head.bias[shape.k..].fill(INITIAL_LOG_VARIANCE);
        Ok(ExitModule {
            layer,
            shape,
            jumper,
            psi,
            config,
            log: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.shape.k
    }

    pub fn parameter_count(&self) -> usize {
        self.jumper.parameter_count() + self.psi.parameter_count()
    }

    /// Flat parameters: jumper then text head.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.jumper.params();
        self.psi.params_into(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("ExitModule::set_params", self.parameter_count(), flat.len())?;
        let used = self.jumper.set_params(flat)?;
        self.psi.set_params(&flat[used..])?;
        Ok(())
    }

    pub fn project(&self, act: &[f64]) -> Result<Vec<f64>> {
        check_len("ExitModule::project", self.shape.neurons, act.len())?;
        self.jumper.forward(act)
    }

    pub fn head(&self, text: &[f64]) -> Result<ClassHead> {
        check_len("ExitModule::head", self.shape.embed_dim, text.len())?;
        let out = self.psi.forward(text)?;
        let k = self.k();
        Ok(ClassHead {
            mean: out[..k].to_vec(),
            var: out[k..].iter().map(|s| s.exp().max(VAR_FLOOR)).collect(),
        })
    }

    pub fn heads(&self, text_embs: &Matrix) -> Result<Vec<ClassHead>> {
        text_embs.iter_rows().map(|t| self.head(t)).collect()
    }

    /// Rate in bits of `act` under the Gaussian predicted from `text`.
    pub fn forward_rate(&self, act: &[f64], text: &[f64]) -> Result<f64> {
        let projected = self.project(act)?;
        let head = self.head(text)?;
        gaussian_nll_bits(&projected, &head.mean, &head.var)
    }

    /// Mean loss over `batch` of `(activation, paired text embedding)`,
    /// forward pass only.
    pub fn batch_loss(&self, batch: &[(&[f64], &[f64])], loss: LossKind) -> Result<LossParts> {
        self.shape.check(loss)?;
        if batch.is_empty() {
            return Err(Error::Empty("loss over an empty batch"));
        }
        let mut parts = LossParts::default();
        for &(act, text) in batch {
            let projected = self.project(act)?;
            let head = self.head(text)?;
            let rate = gaussian_nll_bits(&projected, &head.mean, &head.var)?;
            parts.rate += rate;
            if loss.use_rate() {
                parts.loss += rate;
            }
            if loss.use_cosine() {
                let c = 1.0 - cosine_similarity(text, &projected)?;
                parts.cosine += c;
                parts.loss += c;
            }
        }
        let b = batch.len() as f64;
        parts.loss /= b;
        parts.rate /= b;
        parts.cosine /= b;
        Ok(parts)
    }

    /// Mean loss over `batch` and its gradient with respect to
    /// [`ExitModule::params`].
    pub fn loss_and_grads(
        &self,
        batch: &[(&[f64], &[f64])],
        loss: LossKind,
    ) -> Result<(LossParts, Vec<f64>)> {
        self.shape.check(loss)?;
        if batch.is_empty() {
            return Err(Error::Empty("loss over an empty batch"));
        }
        let k = self.k();
        let scale = 1.0 / batch.len() as f64;
        let mut parts = LossParts::default();
        let mut jumper_grad = self.jumper.zero_grads();
        let mut psi_grad = self.psi.zero_grads();

        for &(act, text) in batch {
            check_len("loss_and_grads (activation)", self.shape.neurons, act.len())?;
            check_len("loss_and_grads (text)", self.shape.embed_dim, text.len())?;
            let (projected, jumper_trace) = self.jumper.forward_traced(act)?;
            let (head_out, psi_trace) = self.psi.forward_traced(text)?;
            let (mean, log_var) = head_out.split_at(k);
            let var: Vec<f64> = log_var.iter().map(|s| s.exp().max(VAR_FLOOR)).collect();

            let mut d_projected = vec![0.0; k];
            let mut d_head = vec![0.0; 2 * k];

            let nll = gaussian_nll_bits_grad(&projected, mean, &var)?;
            parts.rate += nll.value;
            if loss.use_rate() {
                parts.loss += nll.value;
                for j in 0..k {
                    d_projected[j] += nll.d_x[j];
                    d_head[j] += nll.d_mu[j];
                    // Clamped variances carry no gradient.
                    if log_var[j].exp() > VAR_FLOOR {
                        d_head[k + j] += nll.d_var[j] * var[j];
                    }
                }
            }
            if loss.use_cosine() {
                let (cs, d_cs) = cosine_similarity_grad(text, &projected)?;
                parts.cosine += 1.0 - cs;
                parts.loss += 1.0 - cs;
                d_projected.iter_mut().zip(&d_cs).for_each(|(d, g)| *d -= g);
            }

            d_projected.iter_mut().for_each(|d| *d *= scale);
            d_head.iter_mut().for_each(|d| *d *= scale);
            let (gj, _) = self.jumper.backward(&jumper_trace, &d_projected)?;
            let (gp, _) = self.psi.backward(&psi_trace, &d_head)?;
            accumulate(&mut jumper_grad.layers, gj.layers);
            accumulate(&mut psi_grad.layers, gp.layers);
        }
        parts.loss *= scale;
        parts.rate *= scale;
        parts.cosine *= scale;

        let mut flat = Vec::with_capacity(self.parameter_count());
        jumper_grad.flatten_into(&mut flat);
        psi_grad.flatten_into(&mut flat);
        Ok((parts, flat))
    }

    /// Per-class scores for `act`: rates (lower is better) or cosine
    /// similarities (higher is better).
    pub fn class_scores(
        &self,
        act: &[f64],
        heads: &[ClassHead],
        text_embs: &Matrix,
        sf: ScoreFunction,
    ) -> Result<Vec<f64>> {
        let projected = self.project(act)?;
        match sf {
            ScoreFunction::Rate => heads
                .iter()
                .map(|h| gaussian_nll_bits(&projected, &h.mean, &h.var))
                .collect(),
            ScoreFunction::Cosine => {
                check_len("class_scores (cosine)", self.k(), text_embs.cols())?;
                text_embs
                    .iter_rows()
                    .map(|t| cosine_similarity(t, &projected))
                    .collect()
            }
        }
    }

    /// Predicted class for `act` given every class's text embedding
    /// (`C × E`). Ties go to the lowest class index.
    pub fn predict(&self, act: &[f64], text_embs: &Matrix, sf: ScoreFunction) -> Result<usize> {
        if text_embs.rows() == 0 {
            return Err(Error::Empty("no classes to predict"));
        }
        let heads = match sf {
            ScoreFunction::Rate => self.heads(text_embs)?,
            ScoreFunction::Cosine => Vec::new(),
        };
        let scores = self.class_scores(act, &heads, text_embs, sf)?;
        let best = match sf {
            ScoreFunction::Rate => argmin(&scores),
            ScoreFunction::Cosine => argmax(&scores),
        };
        best.ok_or(Error::Empty("no classes to predict"))
    }
}

fn accumulate(into: &mut [(Matrix, Vec<f64>)], from: Vec<(Matrix, Vec<f64>)>) {
    for ((w, b), (gw, gb)) in into.iter_mut().zip(from) {
        w.as_mut_slice()
            .iter_mut()
            .zip(gw.as_slice())
            .for_each(|(a, g)| *a += g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a += g);
    }
}

/// Exact parameter count of the jumper and text head.
pub fn count_additional_parameters(em: &ExitModule) -> usize {
    em.parameter_count()
}

/// Plateau learning-rate schedule on a monitored loss.
#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    bad_epochs: usize,
    patience: usize,
    decay: f64,
    min_lr: f64,
}

impl Plateau {
    const REL_THRESHOLD: f64 = 1e-4;

    fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if !self.best.is_finite() || metric < self.best - Self::REL_THRESHOLD * self.best.abs() {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.decay).max(self.min_lr);
        }
        lr
    }
}

/// Trains one exit module on the train split of `layer`, pairing each
/// activation with its own class's text embedding.
pub fn train_exit_module(
    ds: &ActivationDataset,
    layer: usize,
    shape: ModuleShape,
    cfg: &LossConfig,
) -> Result<ExitModule> {
    cfg.validate()?;
    let acts = ds.layer(layer)?;
    check_len("train_exit_module (neurons)", acts.cols(), shape.neurons)?;
    check_len(
        "train_exit_module (embed_dim)",
        ds.embed_dim(),
        shape.embed_dim,
    )?;
    let train = &ds.splits.train;
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }

    let holdout_len = if train.len() >= 2 {
        ((train.len() as f64 * cfg.holdout_fraction).ceil() as usize).min(train.len() - 1)
    } else {
        0
    };
    let (fit, holdout) = train.split_at(train.len() - holdout_len);
    let pair = |s: usize| (acts.row(s), ds.text_embedding(ds.label(s)));
    let holdout_pairs: Vec<(&[f64], &[f64])> = holdout.iter().map(|&s| pair(s)).collect();

    let mut em = ExitModule::new(layer, shape, cfg.clone())?;
    let mut params = em.params();
    let mut lr = cfg.initial_lr;
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let mut plateau = Plateau {
        best: f64::INFINITY,
        bad_epochs: 0,
        patience: cfg.patience,
        decay: cfg.decay,
        min_lr: cfg.min_lr,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = fit.to_vec();

    info!(
        "training exit module for layer {layer}: {} fit / {} held-out samples, {} parameters",
        fit.len(),
        holdout.len(),
        em.parameter_count()
    );
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut rate_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk.iter().map(|&s| pair(s)).collect();
            let (parts, grads) = em.loss_and_grads(&batch, cfg.loss)?;
            if !parts.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: parts.loss,
                });
            }
            loss_sum += parts.loss * chunk.len() as f64;
            rate_sum += parts.rate * chunk.len() as f64;
            adam.step(&mut params, &grads)
                .map_err(|_| Error::Diverged {
                    epoch,
                    loss: parts.loss,
                })?;
            em.set_params(&params)?;
        }
        let train_loss = loss_sum / fit.len() as f64;
        let holdout_loss = if holdout_pairs.is_empty() {
            train_loss
        } else {
            em.batch_loss(&holdout_pairs, cfg.loss)?.loss
        };
        if !holdout_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: holdout_loss,
            });
        }
        em.log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            train_rate: rate_sum / fit.len() as f64,
            holdout_loss,
        });
        debug!("layer {layer} epoch {epoch}: loss {train_loss:.5} held-out {holdout_loss:.5} lr {lr:e}");
        lr = plateau.observe(holdout_loss, lr);
        adam.set_lr(lr);
    }
    Ok(em)
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    input: usize,
    output: usize,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExitHeader {
    version: u32,
    layer: usize,
    shape: ModuleShape,
    jumper: Vec<LayerShape>,
    psi: Vec<LayerShape>,
    parameter_count: usize,
    /// Payload order: jumper layers then text-head layers, each layer's
    /// weights row-major followed by its bias.
    layout: String,
    dtype: String,
    loss_config: LossConfig,
    training_log: Vec<EpochLog>,
}

fn layer_shapes(net: &Mlp) -> Vec<LayerShape> {
    net.layers()
        .iter()
        .map(|l| LayerShape {
            input: l.input_dim(),
            output: l.output_dim(),
            activation: l.activation,
        })
        .collect()
}

pub fn exit_stem(layer: usize) -> String {
    format!("exit_{layer}")
}

/// Writes `exit_<i>.json` and `exit_<i>.bin` in `dir`.
pub fn save_exit_module(em: &ExitModule, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = exit_stem(em.layer);
    let header = ExitHeader {
        version: 1,
        layer: em.layer,
        shape: em.shape,
        jumper: layer_shapes(&em.jumper),
        psi: layer_shapes(&em.psi),
        parameter_count: em.parameter_count(),
        layout: "jumper,psi;weights-row-major,bias".into(),
        dtype: DTYPE.into(),
        loss_config: em.config.clone(),
        training_log: em.log.clone(),
    };
    write_file(&dir.join(format!("{stem}.bin")), &encode_f32(&em.params()))?;
    write_json(&dir.join(format!("{stem}.json")), &header)
}

pub fn load_exit_module(dir: impl AsRef<Path>, layer: usize) -> Result<ExitModule> {
    let dir = dir.as_ref();
    let stem = exit_stem(layer);
    let json_path = dir.join(format!("{stem}.json"));
    let header: ExitHeader = read_json(&json_path)?;
    if header.layer != layer || header.dtype != DTYPE {
        return Err(Error::format(&json_path, "inconsistent exit module header"));
    }
    let mut em = ExitModule::new(layer, header.shape, header.loss_config)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    let expected = |net: &Mlp, shapes: &[LayerShape]| {
        net.layers().len() == shapes.len()
            && net.layers().iter().zip(shapes).all(|(l, s)| {
                l.input_dim() == s.input
                    && l.output_dim() == s.output
                    && l.activation == s.activation
            })
    };
    if !expected(&em.jumper, &header.jumper)
        || !expected(&em.psi, &header.psi)
        || em.parameter_count() != header.parameter_count
    {
        return Err(Error::format(
            &json_path,
            "layer shapes do not match the declared module shape",
        ));
    }
    let bin_path = dir.join(format!("{stem}.bin"));
    let params = decode_f32(&bin_path, &read_file(&bin_path)?, header.parameter_count)?;
    em.set_params(&params)?;
    em.log = header.training_log;
    Ok(em)
}
