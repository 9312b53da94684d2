mod common;

use std::fs;
use std::path::Path;

use common::{brute_auroc, rng};
use favae::evalkit::{
    auroc, export_toy, histogram, ingest, pixel_auroc, prepare, read_png, render, shared_edges, write_png,
    EvalReport, Label, Layout, Population, Recipe, RenderMode, Split, ToyExport, ToyMeta,
};
use favae::scoring::AnomalyMap;
use favae::tensor::Tensor;
use favae::toy::{sample_anomaly, sample_normal, ToySpec};
use favae::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
    assert_eq!(auroc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
    assert_eq!(auroc(&[2.0, 0.0], &[1.0]).unwrap(), 0.5);
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(auroc(&[1.0], &[]).is_err());
    assert!(auroc(&[f64::NAN], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn auroc_equals_brute_force_with_ties(
        pos in prop::collection::vec(0u8..20, 1..300),
        neg in prop::collection::vec(0u8..20, 1..300),
    ) {
        let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(auroc(&p, &n).unwrap(), brute_auroc(&p, &n));
        // Swapping the classes mirrors the curve.
        let a = auroc(&p, &n).unwrap() + auroc(&n, &p).unwrap();
        prop_assert!((a - 1.0).abs() < 1e-15);
    }
}

fn map(values: Vec<f64>, side: usize) -> AnomalyMap {
    AnomalyMap::new(side, side, values).unwrap()
}

#[test]
fn pixel_auroc_cases() {
    let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    let exact = map(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(), 4);
    let inverse = map(mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(), 4);
    assert_eq!(pixel_auroc(&[exact], &[mask.clone()]).unwrap(), 1.0);
    assert_eq!(pixel_auroc(&[inverse], &[mask.clone()]).unwrap(), 0.0);
    assert!(pixel_auroc(&[map(vec![0.0; 16], 4)], &[vec![false; 16]]).is_err());
    assert!(pixel_auroc(&[map(vec![0.0; 16], 4)], &[vec![false; 15]]).is_err());

    let mut r = rng(1);
    let noise = map((0..10_000).map(|_| r.gen()).collect(), 100);
    let random_mask: Vec<bool> = (0..10_000).map(|_| r.gen_bool(0.3)).collect();
    let a = pixel_auroc(&[noise], &[random_mask]).unwrap();
    assert!((a - 0.5).abs() < 0.02, "{a}");
}

fn toy_export(dir: &Path) -> (ToyMeta, Tensor, Tensor, Tensor) {
    let toy = ToySpec::paper().with_side(16);
    let mut r = rng(2);
    let train = sample_normal(&toy, 3, &mut r);
    let normal = sample_normal(&toy, 2, &mut r);
    let anomalous = sample_anomaly(&toy, 2, &mut r);
    let meta = export_toy(
        dir,
        &ToyExport {
            spec: &toy,
            train: &train,
            test_normal: &normal,
            test_anomalous: vec![("stripes", &anomalous, None)],
        },
    )
    .unwrap();
    (meta, train, normal, anomalous)
}

#[test]
fn toy_export_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let (meta, train, normal, anomalous) = toy_export(dir.path());
    assert_eq!(ToyMeta::load(dir.path()).unwrap(), Some(meta.clone()));

    let tr = ingest(dir.path(), Layout::Mvtec, Split::Train).unwrap();
    assert_eq!(tr.len(), 3);
    assert!(tr.iter().all(|s| s.label == Label::Normal && s.mask.is_none()));
    assert_eq!(tr[0].id, "good/0000");
    let unit = 0.5 / 65535.0 + 1e-12;
    for (s, i) in tr.iter().zip(0..) {
        let want = train.sample(i);
        for (a, b) in s.image.data().iter().zip(want.data()) {
            assert!((a - meta.to_unit(*b)).abs() <= unit);
        }
    }

    let te = ingest(dir.path(), Layout::Mvtec, Split::Test).unwrap();
    assert_eq!(te.len(), normal.dims()[0] + anomalous.dims()[0]);
    let anomalous_count = te.iter().filter(|s| s.label == Label::Anomalous).count();
    assert_eq!(anomalous_count, 2);
    for s in te.iter().filter(|s| s.label == Label::Anomalous) {
        assert!(s.id.starts_with("stripes/"));
        assert!(s.mask.as_ref().unwrap().iter().all(|&m| m));
    }
}

#[test]
fn train_only_dataset_has_an_empty_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("train/good");
    fs::create_dir_all(&good).unwrap();
    write_png(&good.join("a.png"), &Tensor::full(&[1, 4, 4], 0.5)).unwrap();
    assert_eq!(ingest(dir.path(), Layout::Mvtec, Split::Train).unwrap().len(), 1);
    assert!(ingest(dir.path(), Layout::Mvtec, Split::Test).unwrap().is_empty());
}

#[test]
fn malformed_layouts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ingest(dir.path(), Layout::Mvtec, Split::Train),
        Err(Error::Layout { .. })
    ));

    let (_, _, _, _) = toy_export(dir.path());
    fs::write(dir.path().join("train/good/notes.txt"), "x").unwrap();
    assert!(matches!(
        ingest(dir.path(), Layout::Mvtec, Split::Train),
        Err(Error::Layout { .. })
    ));
    fs::remove_file(dir.path().join("train/good/notes.txt")).unwrap();

    fs::create_dir_all(dir.path().join("train/scratch")).unwrap();
    assert!(matches!(
        ingest(dir.path(), Layout::Mvtec, Split::Train),
        Err(Error::Layout { .. })
    ));
    fs::remove_dir(dir.path().join("train/scratch")).unwrap();

    let mask = dir.path().join("ground_truth/stripes/0001_mask.png");
    fs::remove_file(&mask).unwrap();
    match ingest(dir.path(), Layout::Mvtec, Split::Test) {
        Err(Error::MissingMask(p)) => assert!(p.ends_with("test/stripes/0001.png"), "{}", p.display()),
        other => panic!("expected a missing mask, got {other:?}"),
    }
}

#[test]
fn flat_layout_labels_by_mask_presence() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::full(&[1, 4, 4], 0.25);
    write_png(&dir.path().join("a.png"), &img).unwrap();
    write_png(&dir.path().join("b.png"), &img).unwrap();
    write_png(&dir.path().join("b_mask.png"), &Tensor::ones(&[1, 4, 4])).unwrap();
    let test = ingest(dir.path(), Layout::Flat, Split::Test).unwrap();
    let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
    assert_eq!(labels, [Label::Normal, Label::Anomalous]);
    assert_eq!(ingest(dir.path(), Layout::Flat, Split::Train).unwrap().len(), 1);

    write_png(&dir.path().join("c_mask.png"), &Tensor::ones(&[1, 4, 4])).unwrap();
    assert!(matches!(
        ingest(dir.path(), Layout::Flat, Split::Test),
        Err(Error::Layout { .. })
    ));
}

#[test]
fn png_round_trip_and_channel_handling() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = Tensor::from_fn(&[3, 5, 7], |i| (i % 256) as f64 / 255.0);
    let p = dir.path().join("rgb.png");
    write_png(&p, &rgb).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back.dims(), [3, 5, 7]);
    assert!(back.max_abs_diff(&rgb) < 1e-12);
    assert!(matches!(read_png(&dir.path().join("none.png")), Err(Error::Image { .. })));
}

#[test]
fn preparation_is_deterministic_and_shaped() {
    let img = Tensor::from_fn(&[3, 40, 40], |i| (i % 97) as f64 / 97.0);
    let tex = Recipe::Texture { resize: 32, crop: 16 };
    let a = prepare(&img, &tex, &mut rng(5)).unwrap();
    let b = prepare(&img, &tex, &mut rng(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dims(), [3, 16, 16]);
    assert!(prepare(&img, &Recipe::Texture { resize: 8, crop: 16 }, &mut rng(5)).is_err());

    let still = Recipe::Object {
        size: 40,
        max_rotation_deg: 0.0,
        max_translate: 0.0,
    };
    assert_eq!(prepare(&img, &still, &mut rng(6)).unwrap(), img);
    let moved = prepare(&img, &Recipe::object(), &mut rng(6)).unwrap();
    assert_eq!(moved.dims(), [3, 128, 128]);
    assert_eq!(moved, prepare(&img, &Recipe::object(), &mut rng(6)).unwrap());
    assert!(serde_json::from_str::<Recipe>(r#"{"kind":"texture","resize":512,"crop":128}"#).is_ok());
}

#[test]
fn histogram_counts_every_value_once() {
    let a = [0.0, 0.1, 0.5, 1.0];
    let b = [0.2, 0.9];
    let edges = shared_edges(&[&a, &b], 4).unwrap();
    assert_eq!(edges.len(), 5);
    let ha = histogram(&a, &edges);
    assert_eq!(ha.counts.iter().sum::<usize>(), 4);
    assert_eq!(ha.counts, [2, 0, 1, 1]);
    assert!(shared_edges(&[&[f64::NAN]], 3).is_err());
}

#[test]
fn rendering_constant_and_ordered_maps() {
    let dir = tempfile::tempdir().unwrap();
    let flat = map(vec![2.0; 16], 4);
    let pop = Population::new(vec![2.0; 16]).unwrap();
    let p = dir.path().join("flat.png");
    render(&flat, RenderMode::EqualizedJet, &pop, &p).unwrap();
    let img = read_png(&p).unwrap();
    assert_eq!(img.dims(), [3, 4, 4]);
    let first: Vec<f64> = (0..3).map(|c| img.data()[c * 16]).collect();
    for i in 0..16 {
        for c in 0..3 {
            assert_eq!(img.data()[c * 16 + i], first[c]);
        }
    }

    let ramp = map((0..16).map(|i| (i * i) as f64).collect(), 4);
    let pop = Population::new(ramp.values.clone()).unwrap();
    let levels = favae::evalkit::equalized(&ramp, &pop);
    for (i, l) in levels.iter().enumerate() {
        assert!((l - (i as f64 + 0.5) / 16.0).abs() < 1e-15);
    }
    let g = dir.path().join("ramp.png");
    render(&ramp, RenderMode::Gray16, &pop, &g).unwrap();
    let grey = read_png(&g).unwrap();
    assert!(grey.data().windows(2).all(|w| w[0] < w[1]));
    assert_eq!("gray16".parse::<RenderMode>().unwrap(), RenderMode::Gray16);
    assert!("sepia".parse::<RenderMode>().is_err());
}

#[test]
fn report_has_both_aurocs_and_shared_histograms() {
    let scores = vec![
        (Label::Normal, 0.1),
        (Label::Normal, 0.3),
        (Label::Anomalous, 0.2),
        (Label::Anomalous, 0.9),
    ];
    let m = map(vec![0.0, 1.0, 0.0, 1.0], 2);
    let k = vec![vec![false, true, false, true]];
    let rep = EvalReport::from_scores(&scores, Some((std::slice::from_ref(&m), &k)), 3, serde_json::json!({"seed": 1}))
        .unwrap();
    assert_eq!(rep.image_auroc, Some(0.75));
    assert_eq!(rep.pixel_auroc, Some(1.0));
    assert_eq!(rep.counts["normal"], 2);
    assert_eq!(rep.histograms["normal"].edges, rep.histograms["anomalous"].edges);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    rep.write_json(&p).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
    assert_eq!(v["config"]["seed"], 1);

    let only_normal = EvalReport::from_scores(&scores[..2], None, 3, serde_json::Value::Null).unwrap();
    assert_eq!(only_normal.image_auroc, None);
}
