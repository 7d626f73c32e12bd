use std::fs;
use std::path::Path;

use biadapt_core::synthdata::*;
use biadapt_core::Error;

fn write_png(path: &Path, shade: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(16, 16, image::Rgb([shade, 255 - shade, shade / 2]))
        .save(path)
        .unwrap();
}

fn opts() -> IngestOptions {
    IngestOptions {
        side: 32,
        ..IngestOptions::default()
    }
}

#[test]
fn labeled_directory_enumerates_real_then_fake() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&dir.path().join(format!("real/{i}.png")), 10 * i as u8);
    }
    for i in 0..2 {
        write_png(&dir.path().join(format!("fake/{i}.png")), 200 + i as u8);
    }
    let d = load_dataset_dir(dir.path(), true, &opts()).unwrap();
    assert_eq!(d.n(), 5);
    let labels: Vec<usize> = d.train.labels().unwrap().iter().map(|l| l.index()).collect();
    assert_eq!(labels, vec![0, 0, 0, 1, 1]);
    assert!(d.train.images().iter().all(|im| im.side() == 32));
}

#[test]
fn flat_directory_loads_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..4 {
        write_png(&dir.path().join(format!("{i}.png")), 40 * i as u8);
    }
    let d = load_dataset_dir(dir.path(), false, &opts()).unwrap();
    assert_eq!(d.n(), 4);
    assert!(!d.labeled());
    assert!(d.train.labels().is_none());
}

#[test]
fn corrupt_file_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("real/ok.png"), 1);
    let bad = dir.path().join("real/broken.png");
    fs::write(&bad, b"not an image").unwrap();
    match load_dataset_dir(dir.path(), true, &opts()) {
        Err(Error::Ingestion { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn class_balancing_downsamples_the_majority() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..5 {
        write_png(&dir.path().join(format!("real/{i}.png")), i as u8);
    }
    for i in 0..2 {
        write_png(&dir.path().join(format!("fake/{i}.png")), 100 + i as u8);
    }
    let o = IngestOptions {
        balance_classes: true,
        ..opts()
    };
    let d = load_dataset_dir(dir.path(), true, &o).unwrap();
    assert_eq!(DomainDataset::class_counts(&d.train), Some((2, 2)));
}

#[test]
fn exported_domain_reloads_with_the_same_labels_and_order() {
    let d = generate_domain(ManipKind::LocalWarp, 2, 6, 5, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(export_domain(&d, dir.path()).unwrap(), 11);
    let back = load_dataset_dir(dir.path(), true, &opts()).unwrap();
    assert_eq!(back.train.labels(), d.train.labels());
    // PNG stores 8-bit channels.
    for (a, b) in d.train.images().iter().zip(back.train.images()) {
        let err = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12, "{err}");
    }
}

#[test]
fn balanced_halves_keep_class_parity() {
    let d = generate_domain(ManipKind::PatchSwap, 1, 8, 8, 32).unwrap();
    let s = split_domain(&d, 0.5, 9).unwrap();
    assert_eq!(DomainDataset::class_counts(&s.train), Some((4, 4)));
    assert_eq!(DomainDataset::class_counts(&s.test), Some((4, 4)));
    s.verify_disjoint().unwrap();
}

#[test]
fn pooled_targets_concatenate_training_splits() {
    let mk = |k: ManipKind| split_domain(&generate_domain(k, 3, 6, 6, 32).unwrap(), 0.5, 3).unwrap();
    let targets = vec![mk(ManipKind::LocalWarp), mk(ManipKind::RegionNoise), mk(ManipKind::FullSynth)];
    let want: usize = targets.iter().map(|t| t.train.len()).sum();
    let s = make_scenario(mk(ManipKind::PatchSwap), targets).unwrap();
    assert_eq!(s.kind, ScenarioKind::O2M);
    assert_eq!(s.target_pool().len(), want);
}
