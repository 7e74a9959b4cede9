use std::path::Path;

use afaseg_core::afa::AfaConfig;
use afaseg_core::eval::{compare_models, evaluate_checkpoint, SweepConfig};
use afaseg_core::metrics::{read_records_csv, write_records_csv};
use afaseg_core::phantom::{generate_dataset, OrganSpec, PhantomConfig};
use afaseg_core::train::{read_log, train, TrainConfig, FINAL_CHECKPOINT};
use afaseg_core::volume::{read_image, read_labels, Manifest};

fn small_phantoms(seed: u64) -> PhantomConfig {
    PhantomConfig {
        dims: [8, 16, 16],
        num_classes: 3,
        organs: vec![
            OrganSpec {
                label: 1,
                intensity: [0.3, 0.4],
                semi_axes_min: [2.0, 3.0, 3.0],
                semi_axes_max: [2.5, 4.0, 4.0],
                count: 1,
            },
            OrganSpec {
                label: 2,
                intensity: [-0.4, -0.3],
                semi_axes_min: [1.5, 2.0, 2.0],
                semi_axes_max: [2.0, 3.0, 3.0],
                count: 1,
            },
        ],
        body: None,
        seed,
        ..PhantomConfig::default()
    }
}

fn small_train(manifest: &Path, out: &Path, seed: u64, afa: bool) -> TrainConfig {
    let mut cfg = TrainConfig::new(manifest.to_path_buf(), out.to_path_buf(), 4, seed);
    cfg.patch_size = [8, 16, 16];
    cfg.patches_per_scan = 2;
    cfg.base_channels = 2;
    cfg.checkpoint_interval = 2;
    cfg.afa = afa.then(AfaConfig::default);
    cfg
}

#[test]
fn dataset_files_round_trip_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_phantoms(3), 5, dir.path()).unwrap();
    assert_eq!((m.train.len(), m.test.len()), (4, 1));
    let reloaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let range = reloaded.range().unwrap();
    for e in reloaded.train.iter().chain(&reloaded.test) {
        let image = read_image(&reloaded.resolve(&e.image)).unwrap();
        let labels = read_labels(&reloaded.resolve(&e.labels)).unwrap();
        assert_eq!(image.dims, labels.dims);
        assert!(labels.count(1) > 0 && labels.count(2) > 0);
    }
    for e in &reloaded.train {
        let (lo, hi) = read_image(&reloaded.resolve(&e.image)).unwrap().min_max();
        assert!(f64::from(lo) >= range.global_min && f64::from(hi) <= range.global_max);
    }
}

#[test]
fn train_evaluate_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_dataset(&small_phantoms(5), 6, &d.join("data")).unwrap();
    let manifest_path = d.join("data/manifest.json");
    let manifest = Manifest::load(&manifest_path).unwrap();

    let base = train(&small_train(&manifest_path, &d.join("base"), 1, false)).unwrap();
    let afa = train(&small_train(&manifest_path, &d.join("afa"), 1, true)).unwrap();
    assert!(d.join("base/step_000002.ckpt").exists());
    assert_eq!(afa.checkpoint, d.join("afa").join(FINAL_CHECKPOINT));

    let log = read_log(&afa.log).unwrap();
    assert_eq!(log.len(), 4);
    for r in &log {
        for key in ["L_clean", "L_0.1", "L_0.05", "L_0.025", "L_0.0125", "grad_l1_norm", "total_loss"] {
            assert!(r[key].is_number(), "{key} missing from {r}");
        }
    }
    assert!(read_log(&base.log).unwrap().iter().all(|r| r.get("L_0.1").is_none()));

    let sweep = SweepConfig {
        noise_stds: vec![0.0, 0.01],
        window: [8, 16, 16],
        ..SweepConfig::default()
    };
    let ra = evaluate_checkpoint(&afa.checkpoint, &manifest, &manifest.test, &sweep).unwrap();
    let rb = evaluate_checkpoint(&base.checkpoint, &manifest, &manifest.test, &sweep).unwrap();
    // two test samples, two organs, two noise levels
    assert_eq!(ra.len(), 8);
    assert!(ra.iter().all(|r| (0.0..=1.0).contains(&r.dsc)));

    let csv = d.join("afa.csv");
    write_records_csv(&ra, &csv).unwrap();
    assert_eq!(read_records_csv(&csv).unwrap(), ra);

    let table = compare_models(&ra, &rb, "afa", "baseline").unwrap();
    // per std: two organ rows and one average row
    assert_eq!(table.rows.len(), 6);
    for r in &table.rows {
        assert!((0.0..=1.0).contains(&r.p_value));
        assert!((r.improvement - (r.dsc_a.mean - r.dsc_b.mean)).abs() < 1e-12);
    }
    table.write_csv(&d.join("compare.csv")).unwrap();
    table.write_summary(&d.join("compare.json")).unwrap();
}
