//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

// NaN must fail `ensure!`, and the oracles index like the formulas they transcribe.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use exitrate::actstore::{read_dataset, write_dataset, ActivationDataset, SplitName, Splits};
use exitrate::evalharness::{
    layer_predictions, oracle_early_exit, run_sweep, run_table1, select_test_subset, EvalOptions,
    Method, SweepAxis, SweepOptions,
};
use exitrate::numkernel::{Matrix, VAR_FLOOR};
use exitrate::sampler::{class_rate, fit_gaussians, predict_by_rate, ClassGaussians};
use exitrate::synthgen::{generate, SynthConfig};
use exitrate::tgem::{
    save_exit_module, train_exit_module, ExitModule, LossConfig, LossKind, ModuleShape,
};
use exitrate::Error;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

fn unit_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v = normals(r, dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Matrix::from_rows(&data).unwrap()
}

fn random_gaussians(r: &mut ChaCha8Rng, c: usize, n: usize, shared_var: bool) -> ClassGaussians {
    let means = Matrix::from_vec(c, n, normals(r, c * n)).unwrap();
    let shared: Vec<f64> = (0..n).map(|_| r.random_range(0.05..4.0)).collect();
    let var: Vec<f64> = (0..c * n)
        .map(|i| {
            if shared_var {
                shared[i % n]
            } else {
                r.random_range(0.05..4.0)
            }
        })
        .collect();
    ClassGaussians {
        layer: 1,
        means,
        variances: Matrix::from_vec(c, n, var).unwrap(),
        counts: vec![1; c],
    }
}

fn first_min(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

// Criterion 1: the class-rate against a separate transcription of its
// formula, and the prediction against a brute-force argmin.
fn formula_fidelity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = r.random_range(1..=10);
        let n = r.random_range(1..=64);
        let g = random_gaussians(&mut r, c, n, false);
        let act = normals(&mut r, n);
        let got = class_rate(&act, &g).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; c];
        for (k, w) in want.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                let mu = g.means.get(k, j);
                let var = g.variances.get(k, j);
                acc += var.ln() / std::f64::consts::LN_2 + (act[j] - mu).powi(2) / (2.0 * var);
            }
            *w = acc / n as f64;
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst <= 1e-9, "rate differs by {worst:e}");
        let pred = predict_by_rate(&act, &g).map_err(|e| e.to_string())?;
        ensure!(
            pred == first_min(&want),
            "argmin mismatch ({pred} vs {})",
            first_min(&want)
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "1000 instances, max |diff| {worst:.1e}, {elapsed:.2?}"
    ))
}

// Criterion 2: fitted moments against a two-pass loop.
fn estimator_exactness() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.random_range(2..=6);
        let n = r.random_range(1..=12);
        let s = r.random_range(c..=80);
        let labels: Vec<u32> = (0..s).map(|i| (i % c) as u32).collect();
        let scale = r.random_range(0.1..5.0);
        let shift = r.random_range(-3.0..3.0);
        let acts: Vec<f64> = (0..s * n).map(|_| shift + scale * normal(&mut r)).collect();
        let mut calibration: Vec<usize> = (0..s).collect();
        // Shuffled split order exercises the "first cap in split order" rule.
        for i in (1..s).rev() {
            calibration.swap(i, r.random_range(0..=i));
        }
        let ds = ActivationDataset {
            layers: vec![Matrix::from_vec(s, n, acts).unwrap()],
            labels,
            class_names: (0..c).map(|k| format!("c{k}")).collect(),
            descriptions: (0..c).map(|k| format!("d{k}")).collect(),
            text_embeddings: unit_rows(&mut r, c, c),
            splits: Splits {
                calibration,
                train: vec![],
                test: vec![],
            },
        };
        let cap = r.random_range(1..=s / c + 2);
        let g = fit_gaussians(&ds, 1, SplitName::Calibration, cap).map_err(|e| e.to_string())?;
        let m = &ds.layers[0];
        for k in 0..c {
            let idx: Vec<usize> = ds
                .splits
                .calibration
                .iter()
                .copied()
                .filter(|&i| ds.labels[i] as usize == k)
                .take(cap)
                .collect();
            for j in 0..n {
                let mean = idx.iter().map(|&i| m.get(i, j)).sum::<f64>() / idx.len() as f64;
                let var = idx
                    .iter()
                    .map(|&i| (m.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / idx.len() as f64;
                let var = var.max(VAR_FLOOR);
                worst = worst
                    .max((g.means.get(k, j) - mean).abs())
                    .max((g.variances.get(k, j) - var).abs());
            }
        }
        ensure!(worst <= 1e-12, "moments differ by {worst:e}");
    }
    Ok(format!("100 datasets, max |diff| {worst:.1e}"))
}

// Criterion 3: analytic loss gradients against central differences.
fn gradient_correctness() -> Outcome {
    let mut worst = [0.0f64; 3];
    let kinds = [LossKind::Rate, LossKind::Cosine, LossKind::Both];
    for trial in 0..100u64 {
        let mut r = rng(300 + trial);
        let (n, e) = (r.random_range(2..=7), r.random_range(2..=5));
        let hidden = r.random_range(0..=6);
        let mut shape = ModuleShape::new(n, e, e);
        shape.hidden = hidden;
        let mut em = ExitModule::new(1, shape, LossConfig::default()).map_err(|e| e.to_string())?;
        let p: Vec<f64> = (0..em.parameter_count())
            .map(|_| 0.5 * normal(&mut r))
            .collect();
        em.set_params(&p).map_err(|e| e.to_string())?;
        let acts: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut r, n)).collect();
        let texts: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut r, e)).collect();
        let batch: Vec<(&[f64], &[f64])> = acts
            .iter()
            .zip(&texts)
            .map(|(a, t)| (a.as_slice(), t.as_slice()))
            .collect();
        for (slot, &kind) in kinds.iter().enumerate() {
            let (_, analytic) = em.loss_and_grads(&batch, kind).map_err(|e| e.to_string())?;
            let h = 1e-6;
            let mut probe = em.clone();
            let mut numeric = vec![0.0; p.len()];
            for i in 0..p.len() {
                let mut q = p.clone();
                q[i] = p[i] + h;
                probe.set_params(&q).unwrap();
                let up = probe.batch_loss(&batch, kind).unwrap().loss;
                q[i] = p[i] - h;
                probe.set_params(&q).unwrap();
                let down = probe.batch_loss(&batch, kind).unwrap().loss;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
                .max(1e-12);
            let rel = diff / scale;
            worst[slot] = worst[slot].max(rel);
            ensure!(rel < 1e-4, "trial {trial} {kind:?}: relative error {rel:e}");
        }
    }
    Ok(format!(
        "100 trials, worst relative error rate {:.1e}, cosine {:.1e}, combined {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

// Criterion 4: with one shared variance vector the class-rate classifier is
// the minimum-Mahalanobis classifier.
fn shared_variance_equivalence() -> Outcome {
    let mut r = rng(404);
    for i in 0..1000 {
        let c = r.random_range(2..=10);
        let n = r.random_range(1..=64);
        let g = random_gaussians(&mut r, c, n, true);
        let act: Vec<f64> = normals(&mut r, n).iter().map(|x| 2.0 * x).collect();
        let maha: Vec<f64> = (0..c)
            .map(|k| {
                (0..n)
                    .map(|j| (act[j] - g.means.get(k, j)).powi(2) / g.variances.get(k, j))
                    .sum()
            })
            .collect();
        let pred = predict_by_rate(&act, &g).map_err(|e| e.to_string())?;
        ensure!(
            pred == first_min(&maha),
            "instance {i}: {pred} vs {}",
            first_min(&maha)
        );
    }
    Ok("1000 instances, identical predictions".into())
}

// Values recorded from the first run of the default configuration.
const FIXTURE_SAMPLING_TOP1_L1: f64 = 0.536;
const FIXTURE_SAMPLING_TOP1_L12: f64 = 1.0;
const FIXTURE_TGEM_RATE_TOP1_L6: f64 = 0.988;
const FIXTURE_TGEM_COSINE_TOP1_L6: f64 = 1.0;
const FIXTURE_ORACLE_HISTOGRAM: [usize; 12] = [536, 450, 14, 0, 0, 0, 0, 0, 0, 0, 0, 0];

fn top1(labels: &[usize], preds: &[usize]) -> f64 {
    labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

// Criteria 5 and 6 share the default-configuration run.
fn synthetic_end_to_end(ds: &ActivationDataset) -> (Outcome, Outcome) {
    let start = Instant::now();
    let table = match run_table1(
        ds,
        &EvalOptions {
            methods: vec![Method::SamplingRate, Method::SamplingCosine],
            ..EvalOptions::default()
        },
    ) {
        Ok(t) => t,
        Err(e) => return (Err(e.to_string()), Err("no report".into())),
    };
    let five = (|| -> Outcome {
        let l1 = table.result(1, Method::SamplingRate).unwrap().top1;
        let l12 = table.result(12, Method::SamplingRate).unwrap().top1;
        ensure!(l12 - l1 >= 0.20, "layer 12 {l12} vs layer 1 {l1}");
        ensure!(
            (l1, l12) == (FIXTURE_SAMPLING_TOP1_L1, FIXTURE_SAMPLING_TOP1_L12),
            "sampling fixture drift: {l1} / {l12}"
        );

        let opts = EvalOptions::default();
        let test = select_test_subset(ds, None).map_err(|e| e.to_string())?;
        let labels: Vec<usize> = test.iter().map(|&s| ds.label(s)).collect();
        let scores =
            layer_predictions(ds, 6, &[Method::TgemRate, Method::TgemCosine], &opts, &test)
                .map_err(|e| e.to_string())?;
        let (rate, cosine) = (
            top1(&labels, &scores[0].preds),
            top1(&labels, &scores[1].preds),
        );
        ensure!(
            rate >= 0.90 && cosine >= 0.90,
            "layer 6 T-GEM rate {rate}, cosine {cosine}"
        );
        ensure!(
            (rate, cosine) == (FIXTURE_TGEM_RATE_TOP1_L6, FIXTURE_TGEM_COSINE_TOP1_L6),
            "T-GEM fixture drift: {rate} / {cosine}"
        );
        let elapsed = start.elapsed();
        ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
        Ok(format!(
            "sampling top-1 layer 1 {l1:.3} to layer 12 {l12:.3}; layer 6 T-GEM rate {rate:.3}, cosine {cosine:.3}; {elapsed:.1?}"
        ))
    })();

    let six = (|| -> Outcome {
        let mut r = rng(606);
        for i in 0..500 {
            let s = r.random_range(1..=60);
            let l = r.random_range(1..=12);
            let c = r.random_range(2..=10);
            let labels: Vec<usize> = (0..s).map(|_| r.random_range(0..c)).collect();
            let preds: Vec<Vec<usize>> = (0..s)
                .map(|_| (0..l).map(|_| r.random_range(0..c)).collect())
                .collect();
            let out = oracle_early_exit(&preds, &labels).map_err(|e| e.to_string())?;
            let best = (0..l)
                .map(|layer| {
                    let p: Vec<usize> = preds.iter().map(|row| row[layer]).collect();
                    top1(&labels, &p)
                })
                .fold(0.0, f64::max);
            ensure!(
                out.accuracy >= best,
                "matrix {i}: oracle {} < {best}",
                out.accuracy
            );
            ensure!(
                out.histogram.iter().sum::<usize>() == s,
                "matrix {i}: histogram sum"
            );
        }
        let mut lines = Vec::new();
        for o in &table.oracle {
            ensure!(
                o.accuracy >= o.best_single_layer_top1,
                "{}: oracle {} < {}",
                o.method,
                o.accuracy,
                o.best_single_layer_top1
            );
            lines.push(format!(
                "{} {:.3} exits {:?}",
                o.method, o.accuracy, o.histogram
            ));
        }
        let sr = table.oracle_for(Method::SamplingRate).unwrap();
        ensure!(
            sr.histogram == FIXTURE_ORACLE_HISTOGRAM,
            "oracle histogram drift: {:?}",
            sr.histogram
        );
        Ok(format!(
            "500 random matrices; synthetic {}",
            lines.join("; ")
        ))
    })();
    (five, six)
}

// Criterion 7: calibration-size sweep on the heteroscedastic sweep world.
fn calibration_sweep_trend() -> Outcome {
    let ds = generate(&SynthConfig::calibration_sweep()).map_err(|e| e.to_string())?;
    let report = run_sweep(
        &ds,
        &SweepOptions {
            axis: SweepAxis::Samples,
            values: vec![1, 10, 100, 250, 1000],
            base: EvalOptions::default(),
        },
    )
    .map_err(|e| e.to_string())?;
    let at = |v: usize, l: usize| report.point(v, l, Method::SamplingRate).unwrap().top1;
    let mut min_gain = f64::INFINITY;
    let mut max_gap = 0.0f64;
    for layer in 4..=ds.num_layers() {
        let gain = at(100, layer) - at(1, layer);
        let gap = (at(250, layer) - at(1000, layer)).abs();
        ensure!(
            gain >= 0.10,
            "layer {layer}: cap 100 gains only {gain:.3} over cap 1"
        );
        ensure!(
            gap <= 0.03,
            "layer {layer}: cap 250 vs 1000 differ by {gap:.3}"
        );
        min_gain = min_gain.min(gain);
        max_gap = max_gap.max(gap);
    }
    Ok(format!(
        "layers 4-12: min gain cap 100 over cap 1 {:.1} points, max |cap 250 - cap 1000| {:.1} points",
        100.0 * min_gain,
        100.0 * max_gap
    ))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

// Criterion 8: container round trip and rejection of corrupted files.
fn format_round_trip(ds: &ActivationDataset) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(ds, &a).map_err(|e| e.to_string())?;
    let first = read_dataset(&a).map_err(|e| e.to_string())?;
    first.validate().map_err(|e| e.to_string())?;
    write_dataset(&first, &b).map_err(|e| e.to_string())?;
    ensure!(
        dir_bytes(&a) == dir_bytes(&b),
        "rewrite is not byte-identical"
    );
    let second = read_dataset(&b).map_err(|e| e.to_string())?;
    ensure!(first == second, "second read differs");
    let quantized_match = ds.layers.iter().zip(&first.layers).all(|(o, q)| {
        o.as_slice()
            .iter()
            .zip(q.as_slice())
            .all(|(x, y)| (*x as f32) as f64 == *y)
    });
    ensure!(
        quantized_match,
        "read values are not the f32-rounded originals"
    );
    ensure!(
        first.labels == ds.labels && first.splits == ds.splits,
        "labels or splits changed"
    );

    let corrupt = |name: &str, f: &dyn Fn(&Path)| -> Result<Error, String> {
        let d = tmp.path().join(name);
        write_dataset(ds, &d).map_err(|e| e.to_string())?;
        f(&d);
        match read_dataset(&d) {
            Ok(_) => Err(format!("{name}: corrupted container accepted")),
            Err(e) => Ok(e),
        }
    };
    let e = corrupt("truncated", &|d| {
        let p = d.join("layer_3.bin");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    })?;
    ensure!(
        matches!(e, Error::SizeMismatch { .. }),
        "truncated layer gave {e}"
    );
    let e = corrupt("manifest", &|d| {
        std::fs::write(d.join("manifest.json"), "{ not json").unwrap()
    })?;
    ensure!(matches!(e, Error::Format { .. }), "bad manifest gave {e}");
    let e = corrupt("nan", &|d| {
        let p = d.join("layer_1.bin");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
    })?;
    ensure!(matches!(e, Error::NonFinite(_)), "NaN payload gave {e}");
    let e = corrupt("label", &|d| {
        let p = d.join("labels.bin");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
    })?;
    ensure!(
        matches!(e, Error::Invariant(_)),
        "out-of-range label gave {e}"
    );
    let e = corrupt("overlap", &|d| {
        let p = d.join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        let first_test = m["splits"]["test"][0].clone();
        m["splits"]["calibration"]
            .as_array_mut()
            .unwrap()
            .push(first_test);
        std::fs::write(&p, serde_json::to_vec(&m).unwrap()).unwrap();
    })?;
    ensure!(
        matches!(e, Error::Invariant(_)),
        "overlapping splits gave {e}"
    );

    let empty = ActivationDataset {
        layers: vec![Matrix::zeros(0, 3)],
        labels: vec![],
        class_names: vec!["a".into(), "b".into()],
        descriptions: vec!["a".into(), "b".into()],
        text_embeddings: Matrix::identity(2),
        splits: Splits::default(),
    };
    let e_dir = tmp.path().join("empty");
    write_dataset(&empty, &e_dir).map_err(|e| e.to_string())?;
    ensure!(
        read_dataset(&e_dir).map_err(|e| e.to_string())? == empty,
        "empty container changed"
    );
    Ok(
        "byte-stable rewrite; truncation, bad manifest, NaN, bad label and split overlap rejected"
            .into(),
    )
}

// Criterion 9: identical seeds give identical bytes.
fn determinism(ds: &ActivationDataset) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<(), Error> {
        let root = tmp.path().join(tag);
        let fresh = generate(&SynthConfig::default())?;
        write_dataset(&fresh, root.join("data"))?;
        let cfg = LossConfig {
            epochs: 30,
            ..LossConfig::default()
        };
        let em = train_exit_module(ds, 4, ModuleShape::new(64, 32, 32), &cfg)?;
        save_exit_module(&em, root.join("modules"))?;
        let report = run_table1(
            ds,
            &EvalOptions {
                layers: vec![2, 4],
                methods: Method::ALL.to_vec(),
                train: cfg,
                ..EvalOptions::default()
            },
        )?;
        report.write_all(root.join("report"))
    };
    run("first").map_err(|e| e.to_string())?;
    run("second").map_err(|e| e.to_string())?;
    for sub in ["data", "modules", "report"] {
        let x = dir_bytes(&tmp.path().join("first").join(sub));
        let y = dir_bytes(&tmp.path().join("second").join(sub));
        ensure!(x == y, "{sub} differs between runs");
    }
    Ok("dataset, trained module with log, and report files byte-identical across two runs".into())
}

fn main() {
    let ds = generate(&SynthConfig::default()).expect("default synthetic dataset");
    let (five, six) = synthetic_end_to_end(&ds);
    let results: Vec<(&str, Outcome)> = vec![
        ("1 formula fidelity", formula_fidelity()),
        ("2 estimator exactness", estimator_exactness()),
        ("3 gradient correctness", gradient_correctness()),
        (
            "4 shared-variance equivalence",
            shared_variance_equivalence(),
        ),
        ("5 synthetic end-to-end", five),
        ("6 oracle dominance", six),
        ("7 calibration-size trend", calibration_sweep_trend()),
        ("8 format round trip", format_round_trip(&ds)),
        ("9 determinism", determinism(&ds)),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
