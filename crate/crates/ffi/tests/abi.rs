use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use exitrate::actstore::{write_dataset, SplitName};
use exitrate::sampler::{class_rate, fit_gaussians};
use exitrate::synthgen::{generate, SynthConfig};
use exitrate::tgem::{save_exit_module, ExitModule, LossConfig, ModuleShape, ScoreFunction};
use exitrate_ffi::*;

fn small_config() -> SynthConfig {
    SynthConfig {
        samples: 120,
        layers: 3,
        neurons: 6,
        embed_dim: 12,
        ..SynthConfig::default()
    }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = exr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(exr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_and_gaussians_round_trip() {
    let cfg = small_config();
    let reference = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&reference, dir.path()).unwrap();
    let path = cstr(dir.path());

    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(exr_dataset_read(path.as_ptr(), &mut ds), ExrStatus::Ok);
        let (mut l, mut s, mut c, mut e) = (0, 0, 0, 0);
        assert_eq!(
            exr_dataset_dims(ds, &mut l, &mut s, &mut c, &mut e),
            ExrStatus::Ok
        );
        assert_eq!((l, s, c, e), (3, 120, 10, 12));
        let mut n = 0;
        assert_eq!(exr_dataset_neurons(ds, 2, &mut n), ExrStatus::Ok);
        assert_eq!(n, 6);

        let mut row = vec![0.0; n];
        assert_eq!(
            exr_dataset_activation(ds, 2, 5, row.as_mut_ptr(), n),
            ExrStatus::Ok
        );
        let mut label = 0u32;
        assert_eq!(exr_dataset_label(ds, 5, &mut label), ExrStatus::Ok);
        assert_eq!(label, 5);

        let mut g = ptr::null_mut();
        assert_eq!(
            exr_gaussians_fit(ds, 2, ExrSplit::Calibration, 100, &mut g),
            ExrStatus::Ok
        );
        let mut rates = vec![0.0; c];
        assert_eq!(
            exr_class_rate(g, row.as_ptr(), n, rates.as_mut_ptr(), c),
            ExrStatus::Ok
        );

        // Same numbers as the library computes on the f32-decoded container.
        let loaded = exitrate::actstore::read_dataset(dir.path()).unwrap();
        let want_g = fit_gaussians(&loaded, 2, SplitName::Calibration, 100).unwrap();
        let want = class_rate(loaded.layer(2).unwrap().row(5), &want_g).unwrap();
        assert_eq!(rates, want);

        let mut pred = usize::MAX;
        assert_eq!(
            exr_predict_by_rate(g, row.as_ptr(), n, &mut pred),
            ExrStatus::Ok
        );
        let best = want
            .iter()
            .enumerate()
            .fold(0, |b, (i, &r)| if r < want[b] { i } else { b });
        assert_eq!(pred, best);

        // Wrong class count is a data error, not a crash.
        assert_eq!(
            exr_class_rate(g, row.as_ptr(), n, rates.as_mut_ptr(), c - 1),
            ExrStatus::DataError
        );
        assert!(last_error().contains("dimension mismatch"));

        exr_gaussians_free(g);
        exr_dataset_free(ds);
    }
}

#[test]
fn null_and_bad_arguments_are_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            exr_dataset_read(ptr::null(), &mut ds),
            ExrStatus::NullPointer
        );
        assert!(last_error().contains("path"));
        assert!(ds.is_null());

        let missing = CString::new("/nonexistent/exitrate").unwrap();
        assert_eq!(
            exr_dataset_read(missing.as_ptr(), &mut ds),
            ExrStatus::DataError
        );

        assert_eq!(
            exr_dataset_dims(
                ptr::null(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut()
            ),
            ExrStatus::NullPointer
        );
        // Freeing null is a no-op.
        exr_dataset_free(ptr::null_mut());
        exr_gaussians_free(ptr::null_mut());
        exr_exit_module_free(ptr::null_mut());
        exr_builder_free(ptr::null_mut());
    }
}

#[test]
fn token_average_matches_column_means() {
    let grid = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let mut out = [0.0; 2];
    let status = unsafe { exr_token_average(grid.as_ptr(), 3, 2, out.as_mut_ptr()) };
    assert_eq!(status, ExrStatus::Ok);
    assert_eq!(out, [3.0, 4.0]);
    let status = unsafe { exr_token_average(grid.as_ptr(), 0, 2, out.as_mut_ptr()) };
    assert_eq!(status, ExrStatus::DataError);
}

#[test]
fn builder_writes_a_readable_container() {
    let reference = generate(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("built");
    let path = cstr(&out_dir);
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(exr_builder_new(10, 12, &mut b), ExrStatus::Ok);

        // Writing before every class is set fails with a usage error.
        assert_eq!(
            exr_builder_write(b, path.as_ptr()),
            ExrStatus::InvalidArgument
        );
        assert!(last_error().contains("class 0"));

        for c in 0..10 {
            let name = CString::new(reference.class_names[c].clone()).unwrap();
            let desc = CString::new(reference.descriptions[c].clone()).unwrap();
            let st = exr_builder_set_class(
                b,
                c,
                name.as_ptr(),
                desc.as_ptr(),
                reference.text_embedding(c).as_ptr(),
            );
            assert_eq!(st, ExrStatus::Ok);
        }
        for m in &reference.layers {
            assert_eq!(
                exr_builder_add_layer(b, m.as_slice().as_ptr(), m.rows(), m.cols()),
                ExrStatus::Ok
            );
        }
        let labels = &reference.labels;
        assert_eq!(
            exr_builder_set_labels(b, labels.as_ptr(), labels.len()),
            ExrStatus::Ok
        );
        for (split, idx) in [
            (ExrSplit::Calibration, &reference.splits.calibration),
            (ExrSplit::Train, &reference.splits.train),
            (ExrSplit::Test, &reference.splits.test),
        ] {
            assert_eq!(
                exr_builder_set_split(b, split, idx.as_ptr(), idx.len()),
                ExrStatus::Ok
            );
        }
        assert_eq!(exr_builder_write(b, path.as_ptr()), ExrStatus::Ok);
        exr_builder_free(b);
    }
    let direct = dir.path().join("direct");
    write_dataset(&reference, &direct).unwrap();
    for entry in std::fs::read_dir(&direct).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(direct.join(&name)).unwrap();
        let b = std::fs::read(out_dir.join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn builder_rejects_overlapping_splits() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("bad"));
    let text = [[1.0, 0.0], [0.0, 1.0]];
    let layer = [0.1, 0.2, 0.3, 0.4];
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(exr_builder_new(2, 2, &mut b), ExrStatus::Ok);
        for (c, t) in text.iter().enumerate() {
            let name = CString::new(format!("c{c}")).unwrap();
            assert_eq!(
                exr_builder_set_class(b, c, name.as_ptr(), name.as_ptr(), t.as_ptr()),
                ExrStatus::Ok
            );
        }
        assert_eq!(
            exr_builder_add_layer(b, layer.as_ptr(), 2, 2),
            ExrStatus::Ok
        );
        assert_eq!(
            exr_builder_set_labels(b, [0u32, 1].as_ptr(), 2),
            ExrStatus::Ok
        );
        let both = [0usize, 1];
        assert_eq!(
            exr_builder_set_split(b, ExrSplit::Calibration, both.as_ptr(), 2),
            ExrStatus::Ok
        );
        assert_eq!(
            exr_builder_set_split(b, ExrSplit::Test, both.as_ptr(), 2),
            ExrStatus::Ok
        );
        assert_eq!(exr_builder_write(b, path.as_ptr()), ExrStatus::DataError);
        exr_builder_free(b);
    }
    assert!(!dir.path().join("bad").join("manifest.json").exists());
}

#[test]
fn exit_module_through_the_abi() {
    let ds = generate(&small_config()).unwrap();
    let cfg = LossConfig {
        epochs: 2,
        ..LossConfig::default()
    };
    let em = ExitModule::new(1, ModuleShape::new(6, 12, 12), cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_exit_module(&em, dir.path()).unwrap();
    let loaded = exitrate::tgem::load_exit_module(dir.path(), 1).unwrap();
    let path = cstr(dir.path());

    let act = ds.layer(1).unwrap().row(3);
    let texts = ds.text_embeddings.as_slice();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(
            exr_exit_module_load(path.as_ptr(), 1, &mut h),
            ExrStatus::Ok
        );
        let mut count = 0;
        assert_eq!(
            exr_exit_module_parameter_count(h, &mut count),
            ExrStatus::Ok
        );
        assert_eq!(count, em.parameter_count());

        let mut rate = 0.0;
        let t0 = ds.text_embedding(0);
        assert_eq!(
            exr_exit_module_forward_rate(
                h,
                act.as_ptr(),
                act.len(),
                t0.as_ptr(),
                t0.len(),
                &mut rate
            ),
            ExrStatus::Ok
        );
        assert_eq!(rate, loaded.forward_rate(act, t0).unwrap());

        for (sf, abi) in [
            (ScoreFunction::Rate, ExrScoreFunction::Rate),
            (ScoreFunction::Cosine, ExrScoreFunction::Cosine),
        ] {
            let mut pred = usize::MAX;
            let st = exr_exit_module_predict(
                h,
                act.as_ptr(),
                act.len(),
                texts.as_ptr(),
                10,
                12,
                abi,
                &mut pred,
            );
            assert_eq!(st, ExrStatus::Ok);
            assert_eq!(pred, loaded.predict(act, &ds.text_embeddings, sf).unwrap());
        }

        let mut pred = 0;
        let st = exr_exit_module_predict(
            h,
            act.as_ptr(),
            5,
            texts.as_ptr(),
            10,
            12,
            ExrScoreFunction::Rate,
            &mut pred,
        );
        assert_eq!(st, ExrStatus::DataError);
        exr_exit_module_free(h);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/exitrate.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "exr_dataset_read",
        "exr_class_rate",
        "exr_exit_module_predict",
        "exr_builder_write",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler available; skipping syntax check");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
