use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::{compression_ratio, CostModel};
use super::metrics::{oracle_early_exit, topk_accuracy};
use super::report::{
    EvalReport, LayerResult, OracleSummary, RegularizerComparison, RunMetadata, Saturation,
    SweepPoint, SweepReport, TgemAgreement,
};
use super::Method;
use crate::actstore::{ActivationDataset, SplitName};
use crate::error::{Error, Result};
use crate::numkernel::{argmax, argmin, Matrix};
use crate::sampler::{
    class_rate_with, fit_gaussians, fit_prototypes, prototype_similarities, RateForm,
};
use crate::tgem::{
    load_exit_module, train_exit_module, ExitModule, LossConfig, LossKind, ModuleShape,
    ScoreFunction,
};

pub const DEFAULT_TEST_SAMPLES: usize = 1000;

/// Accuracy gap (fraction) within which a sweep value counts as saturated.
pub const SATURATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// 1-based exit layers; empty means every layer.
    pub layers: Vec<usize>,
    pub methods: Vec<Method>,
    /// Calibration samples per class for the sampling methods.
    pub cap: usize,
    pub calibration_split: SplitName,
    /// Balanced test subset size; `None` uses up to 1000 samples.
    pub test_samples: Option<usize>,
    /// Projection width; `None` uses the text embedding dimension.
    pub k: Option<usize>,
    /// Hidden width; `None` uses `2K`.
    pub hidden: Option<usize>,
    pub train: LossConfig,
    pub cost_model: CostModel,
    /// Directory holding pre-trained `exit_<i>` modules to use instead of
    /// training.
    pub modules_dir: Option<PathBuf>,
    pub rate_form: RateForm,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            layers: Vec::new(),
            methods: Method::DEFAULT.to_vec(),
            cap: 100,
            calibration_split: SplitName::Calibration,
            test_samples: None,
            k: None,
            hidden: None,
            train: LossConfig::default(),
            cost_model: CostModel::bundled("vit-b-32").expect("bundled profile"),
            modules_dir: None,
            rate_form: RateForm::Printed,
        }
    }
}

impl EvalOptions {
    pub fn resolved_layers(&self, ds: &ActivationDataset) -> Result<Vec<usize>> {
        let layers = if self.layers.is_empty() {
            (1..=ds.num_layers()).collect()
        } else {
            self.layers.clone()
        };
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > ds.num_layers()) {
            return Err(Error::OutOfRange(format!(
                "layer {bad} (dataset has layers 1..={})",
                ds.num_layers()
            )));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "layers must be strictly increasing, got {layers:?}"
            )));
        }
        Ok(layers)
    }

    fn shape(&self, ds: &ActivationDataset, layer: usize, k: usize) -> Result<ModuleShape> {
        let neurons = ds.layer(layer)?.cols();
        let mut shape = ModuleShape::new(neurons, ds.embed_dim(), k);
        if let Some(h) = self.hidden {
            shape.hidden = h;
        }
        Ok(shape)
    }
}

/// Picks a class-balanced prefix of the test split: the first
/// `requested / C` test samples of every class, in split order.
///
/// With no explicit request the subset shrinks (with a warning) to what the
/// smallest class allows, capped at 1000 samples.
pub fn select_test_subset(ds: &ActivationDataset, requested: Option<usize>) -> Result<Vec<usize>> {
    let c = ds.num_classes();
    let by_class = ds.split_by_class(SplitName::Test);
    let available = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if available == 0 {
        return Err(Error::ClassImbalance(
            "some class has no test samples".into(),
        ));
    }
    let per_class = match requested {
        Some(0) => {
            return Err(Error::InvalidConfig(
                "test sample count must be positive".into(),
            ))
        }
        Some(n) => {
            if n % c != 0 {
                return Err(Error::ClassImbalance(format!(
                    "{n} test samples cannot be split evenly over {c} classes"
                )));
            }
            if n / c > available {
                return Err(Error::ClassImbalance(format!(
                    "requested {} test samples per class but the smallest class has {available}",
                    n / c
                )));
            }
            n / c
        }
        None => {
            let per_class = (DEFAULT_TEST_SAMPLES / c).min(available);
            if per_class * c < DEFAULT_TEST_SAMPLES {
                warn!(
                    "evaluating on {} test samples; expect roughly ±3 points of noise even at 1000",
                    per_class * c
                );
            }
            per_class
        }
    };
    let mut taken = vec![0usize; c];
    Ok(ds
        .splits
        .test
        .iter()
        .copied()
        .filter(|&s| {
            let y = ds.label(s);
            taken[y] += 1;
            taken[y] <= per_class
        })
        .collect())
}

/// Scores and predictions of one method at one layer on the test subset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: usize,
    pub method: Method,
    /// `T × C`, oriented by [`Method::order`].
    pub scores: Matrix,
    pub preds: Vec<usize>,
    pub additional_parameters: u64,
}

fn score_matrix(rows: Vec<Vec<f64>>, classes: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, classes));
    }
    Matrix::from_rows(&rows)
}

fn predictions(scores: &Matrix, method: Method) -> Vec<usize> {
    scores
        .iter_rows()
        .map(|r| {
            let best = match method.order() {
                super::ScoreOrder::LowerIsBetter => argmin(r),
                super::ScoreOrder::HigherIsBetter => argmax(r),
            };
            best.unwrap_or(0)
        })
        .collect()
}

fn exit_module_for(
    ds: &ActivationDataset,
    layer: usize,
    opts: &EvalOptions,
    loss: LossKind,
) -> Result<ExitModule> {
    if loss == LossKind::Both {
        if let Some(dir) = &opts.modules_dir {
            if dir
                .join(format!("{}.json", crate::tgem::exit_stem(layer)))
                .exists()
            {
                info!(
                    "loading exit module for layer {layer} from {}",
                    dir.display()
                );
                return load_exit_module(dir, layer);
            }
        }
    }
    let k = opts.k.unwrap_or(ds.embed_dim());
    let shape = opts.shape(ds, layer, k)?;
    let cfg = LossConfig {
        loss,
        ..opts.train.clone()
    };
    train_exit_module(ds, layer, shape, &cfg)
}

fn module_scores(
    ds: &ActivationDataset,
    em: &ExitModule,
    layer: usize,
    test: &[usize],
    sf: ScoreFunction,
) -> Result<Matrix> {
    let acts = ds.layer(layer)?;
    let heads = match sf {
        ScoreFunction::Rate => em.heads(&ds.text_embeddings)?,
        ScoreFunction::Cosine => Vec::new(),
    };
    let rows = test
        .iter()
        .map(|&s| em.class_scores(acts.row(s), &heads, &ds.text_embeddings, sf))
        .collect::<Result<Vec<_>>>()?;
    score_matrix(rows, ds.num_classes())
}

/// Runs every requested method at `layer` on the `test` samples.
pub fn layer_predictions(
    ds: &ActivationDataset,
    layer: usize,
    methods: &[Method],
    opts: &EvalOptions,
    test: &[usize],
) -> Result<Vec<LayerScores>> {
    let acts = ds.layer(layer)?;
    let c = ds.num_classes();
    let mut tgem: Option<ExitModule> = None;
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let (scores, ap) = match method {
            Method::SamplingRate => {
                let g = fit_gaussians(ds, layer, opts.calibration_split, opts.cap)?;
                let rows = test
                    .iter()
                    .map(|&s| class_rate_with(acts.row(s), &g, opts.rate_form))
                    .collect::<Result<Vec<_>>>()?;
                (score_matrix(rows, c)?, 0)
            }
            Method::SamplingCosine => {
                let p = fit_prototypes(ds, layer, opts.calibration_split, opts.cap)?;
                let rows = test
                    .iter()
                    .map(|&s| prototype_similarities(acts.row(s), &p))
                    .collect::<Result<Vec<_>>>()?;
                (score_matrix(rows, c)?, 0)
            }
            Method::TgemRate | Method::TgemCosine => {
                if tgem.is_none() {
                    tgem = Some(exit_module_for(ds, layer, opts, LossKind::Both)?);
                }
                let em = tgem.as_ref().expect("just trained");
                let sf = if method == Method::TgemRate {
                    ScoreFunction::Rate
                } else {
                    ScoreFunction::Cosine
                };
                (
                    module_scores(ds, em, layer, test, sf)?,
                    em.parameter_count() as u64,
                )
            }
            Method::JumperCosine => {
                let em = exit_module_for(ds, layer, opts, LossKind::Cosine)?;
                (
                    module_scores(ds, &em, layer, test, ScoreFunction::Cosine)?,
                    em.jumper.parameter_count() as u64,
                )
            }
        };
        let preds = predictions(&scores, method);
        out.push(LayerScores {
            layer,
            method,
            scores,
            preds,
            additional_parameters: ap,
        });
    }
    Ok(out)
}

fn topk_triple(s: &LayerScores, labels: &[usize]) -> Result<[f64; 3]> {
    let c = s.scores.cols();
    let mut out = [0.0; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = topk_accuracy(&s.scores, labels, (k + 1).min(c), s.method.order())?;
    }
    Ok(out)
}

/// Per-layer accuracy of every method plus compression, oracle and
/// regularizer summaries.
pub fn run_table1(ds: &ActivationDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }
    let layers = opts.resolved_layers(ds)?;
    let test = select_test_subset(ds, opts.test_samples)?;
    let labels: Vec<usize> = test.iter().map(|&s| ds.label(s)).collect();
    info!(
        "evaluating {} methods on {} layers over {} test samples",
        opts.methods.len(),
        layers.len(),
        test.len()
    );

    let per_layer: Vec<Vec<LayerScores>> = layers
        .par_iter()
        .map(|&l| layer_predictions(ds, l, &opts.methods, opts, &test))
        .collect::<Result<_>>()?;

    let mut results = Vec::new();
    for scores in &per_layer {
        for s in scores {
            let [top1, top2, top3] = topk_triple(s, &labels)?;
            results.push(LayerResult {
                layer: s.layer,
                method: s.method,
                top1,
                top2,
                top3,
                compression: compression_ratio(s.layer, &opts.cost_model, s.additional_parameters)?,
                additional_parameters: s.additional_parameters,
            });
        }
    }

    let mut oracle = Vec::new();
    for (mi, &method) in opts.methods.iter().enumerate() {
        let preds: Vec<Vec<usize>> = (0..test.len())
            .map(|t| per_layer.iter().map(|ls| ls[mi].preds[t]).collect())
            .collect();
        let outcome = oracle_early_exit(&preds, &labels)?;
        let best_single_layer_top1 = results
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.top1)
            .fold(0.0, f64::max);
        let cumulative = (1..=layers.len())
            .map(|l| outcome.cumulative_fraction(l))
            .collect();
        oracle.push(OracleSummary {
            method,
            layers: layers.clone(),
            accuracy: outcome.accuracy,
            histogram: outcome.histogram,
            cumulative_fraction: cumulative,
            best_single_layer_top1,
        });
    }

    let top1_of = |layer: usize, method: Method| {
        results
            .iter()
            .find(|r| r.layer == layer && r.method == method)
            .map(|r| r.top1)
    };
    let regularizer = layers
        .iter()
        .filter_map(|&l| {
            let with = top1_of(l, Method::TgemCosine)?;
            let without = top1_of(l, Method::JumperCosine)?;
            Some(RegularizerComparison::new(l, with, without))
        })
        .collect();

    let position = |m: Method| opts.methods.iter().position(|&x| x == m);
    let agreement = match (position(Method::TgemRate), position(Method::TgemCosine)) {
        (Some(r), Some(c)) => per_layer
            .iter()
            .map(|ls| {
                let same = ls[r]
                    .preds
                    .iter()
                    .zip(&ls[c].preds)
                    .filter(|(a, b)| a == b)
                    .count();
                TgemAgreement {
                    layer: ls[r].layer,
                    fraction: same as f64 / test.len() as f64,
                }
            })
            .collect(),
        _ => Vec::new(),
    };

    Ok(EvalReport {
        metadata: RunMetadata::new(ds, test.len()),
        options: opts.clone(),
        results,
        oracle,
        regularizer,
        agreement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Calibration samples per class for the sampling estimator.
    Samples,
    /// Projection width of the learned exit module.
    K,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samples" => Ok(SweepAxis::Samples),
            "k" => Ok(SweepAxis::K),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis `{other}` (expected samples or k)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub base: EvalOptions,
}

impl SweepOptions {
    pub fn default_values(axis: SweepAxis) -> Vec<usize> {
        match axis {
            SweepAxis::Samples => vec![1, 10, 100, 250, 1000],
            SweepAxis::K => vec![16, 32, 128, 512, 1024],
        }
    }
}

/// Sweeps calibration size (sampling class-rate) or projection width
/// (learned exit module scored by class-rate). A K sweep trains with the
/// combined loss where `K = E` and with the rate loss alone elsewhere, since
/// the cosine term is undefined for `K ≠ E`.
pub fn run_sweep(ds: &ActivationDataset, opts: &SweepOptions) -> Result<SweepReport> {
    if opts.values.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one value".into(),
        ));
    }
    let layers = opts.base.resolved_layers(ds)?;
    let test = select_test_subset(ds, opts.base.test_samples)?;
    let labels: Vec<usize> = test.iter().map(|&s| ds.label(s)).collect();

    let jobs: Vec<(usize, usize)> = opts
        .values
        .iter()
        .flat_map(|&v| layers.iter().map(move |&l| (v, l)))
        .collect();

    let points: Vec<Vec<SweepPoint>> = jobs
        .par_iter()
        .map(|&(value, layer)| -> Result<Vec<SweepPoint>> {
            let scores = match opts.axis {
                SweepAxis::Samples => {
                    let mut methods: Vec<Method> = opts
                        .base
                        .methods
                        .iter()
                        .copied()
                        .filter(|m| m.is_sampling())
                        .collect();
                    if methods.is_empty() {
                        methods.push(Method::SamplingRate);
                    }
                    let eval = EvalOptions {
                        cap: value,
                        ..opts.base.clone()
                    };
                    layer_predictions(ds, layer, &methods, &eval, &test)?
                }
                SweepAxis::K => {
                    let loss = if value == ds.embed_dim() {
                        opts.base.train.loss
                    } else {
                        LossKind::Rate
                    };
                    let shape = opts.base.shape(ds, layer, value)?;
                    let cfg = LossConfig {
                        loss,
                        ..opts.base.train.clone()
                    };
                    let em = train_exit_module(ds, layer, shape, &cfg)?;
                    let scores = module_scores(ds, &em, layer, &test, ScoreFunction::Rate)?;
                    let preds = predictions(&scores, Method::TgemRate);
                    vec![LayerScores {
                        layer,
                        method: Method::TgemRate,
                        scores,
                        preds,
                        additional_parameters: em.parameter_count() as u64,
                    }]
                }
            };
            scores
                .iter()
                .map(|s| {
                    let [top1, top2, top3] = topk_triple(s, &labels)?;
                    Ok(SweepPoint {
                        value,
                        layer,
                        method: s.method,
                        top1,
                        top2,
                        top3,
                        additional_parameters: s.additional_parameters,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let points: Vec<SweepPoint> = points.into_iter().flatten().collect();

    let mut saturation = Vec::new();
    let methods: Vec<Method> = {
        let mut m: Vec<Method> = points.iter().map(|p| p.method).collect();
        m.sort();
        m.dedup();
        m
    };
    for &layer in &layers {
        for &method in &methods {
            let at: Vec<&SweepPoint> = points
                .iter()
                .filter(|p| p.layer == layer && p.method == method)
                .collect();
            if let Some(s) = Saturation::from_points(layer, method, &at, SATURATION_TOLERANCE) {
                saturation.push(s);
            }
        }
    }

    Ok(SweepReport {
        metadata: RunMetadata::new(ds, test.len()),
        axis: opts.axis,
        values: opts.values.clone(),
        layers,
        points,
        saturation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    fn small() -> ActivationDataset {
        generate(&SynthConfig {
            samples: 300,
            layers: 3,
            neurons: 8,
            embed_dim: 12,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn balanced_subset() {
        let ds = small();
        let t = select_test_subset(&ds, Some(50)).unwrap();
        assert_eq!(t.len(), 50);
        let mut counts = [0; 10];
        t.iter().for_each(|&s| counts[ds.label(s)] += 1);
        assert!(counts.iter().all(|&n| n == 5));
        // 10 per class exist; default shrinks to 100 total.
        assert_eq!(select_test_subset(&ds, None).unwrap().len(), 100);
        assert!(matches!(
            select_test_subset(&ds, Some(200)),
            Err(Error::ClassImbalance(_))
        ));
        assert!(matches!(
            select_test_subset(&ds, Some(55)),
            Err(Error::ClassImbalance(_))
        ));
    }

    #[test]
    fn layers_validated() {
        let ds = small();
        let mut o = EvalOptions {
            layers: vec![2, 1],
            ..EvalOptions::default()
        };
        assert!(o.resolved_layers(&ds).is_err());
        o.layers = vec![4];
        assert!(matches!(o.resolved_layers(&ds), Err(Error::OutOfRange(_))));
        o.layers.clear();
        assert_eq!(o.resolved_layers(&ds).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn sampling_table_is_consistent() {
        let ds = small();
        let opts = EvalOptions {
            methods: vec![Method::SamplingRate, Method::SamplingCosine],
            ..EvalOptions::default()
        };
        let r = run_table1(&ds, &opts).unwrap();
        assert_eq!(r.results.len(), 6);
        for row in &r.results {
            assert!(row.top1 <= row.top2 && row.top2 <= row.top3);
            assert_eq!(row.additional_parameters, 0);
        }
        for o in &r.oracle {
            assert!(o.accuracy >= o.best_single_layer_top1);
            assert_eq!(o.histogram.iter().sum::<usize>(), 100);
        }
    }
}
