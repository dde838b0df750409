mod common;

use advpatch::applier::{apply_patch, TransformConfig};
use advpatch::data::{Dataset, LabeledImage, Letterbox, Split};
use advpatch::detector::fixture::fixture_detector;
use advpatch::detector::{extraction_score, DetectorAdapter, ScoreMode};
use advpatch::fsutil::sha256_hex;
use advpatch::patch::{init_patch, InitMode, LossWeights, PrintableColorSet};
use advpatch::trainer::{
    batch_transforms, load_checkpoint, save_checkpoint, step, train, train_until, TrainConfig, TrainState,
};
use advpatch::Error;
use common::{desk_dataset, no_reg, ToyAdapter};

fn small_config() -> TrainConfig {
    TrainConfig {
        weights: no_reg(),
        epochs: 3,
        batch_size: 2,
        seed: 11,
        patch_size: 16,
        transform: TransformConfig {
            base_scale: 0.6,
            ..TransformConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn small_dataset(dir: &std::path::Path) -> Dataset {
    let mut ds = desk_dataset(dir, 0, 8, Split::Train);
    ds.items.retain(|i| !i.boxes.is_empty());
    ds.items.truncate(4);
    assert_eq!(ds.len(), 4);
    ds
}

fn probe_hash(det: &dyn DetectorAdapter) -> String {
    let img = advpatch::synthetic::scene(9, 9, 128).image;
    let grid = det.forward(&img).unwrap();
    let bytes: Vec<u8> = grid.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[test]
fn zero_learning_rate_keeps_initial_patch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let config = TrainConfig {
        learning_rate: 0.0,
        ..small_config()
    };
    let (patch, history) = train(&config, &fixture_detector(0), &ds, &PrintableColorSet::lattice()).unwrap();
    assert_eq!(history.records.len(), 6);
    assert_eq!(patch, init_patch(16, 16, InitMode::Random, 11).unwrap());
}

#[test]
fn images_without_boxes_leave_patch_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = small_dataset(dir.path());
    for item in &mut ds.items {
        item.boxes.clear();
    }
    let config = small_config();
    let (patch, _) = train(&config, &fixture_detector(0), &ds, &PrintableColorSet::lattice()).unwrap();
    assert_eq!(patch, init_patch(16, 16, InitMode::Random, 11).unwrap());
}

#[test]
fn reported_obj_matches_independent_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let det = fixture_detector(0);
    let config = small_config();
    let mut state = TrainState::initial(&config).unwrap();
    let before = state.patch.clone();
    let batch = &ds.items[..2];
    let loss = step(&mut state, batch, &det, &config, &PrintableColorSet::lattice(), 0, 0).unwrap();
    let mut expected = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let params = batch_transforms(&config.transform, config.seed, 0, 0, item, i);
        let patched = apply_patch(&item.image, &before, &item.bboxes(), &params, &config.transform).unwrap();
        expected += extraction_score(&det.forward(&patched).unwrap(), ScoreMode::Obj) / 2.0;
    }
    assert!((loss.obj - expected).abs() < 1e-12, "{} vs {expected}", loss.obj);
    assert_eq!(loss.total, loss.obj);
    assert_eq!(state.step, 1);
    assert_ne!(state.patch, before);
}

#[test]
fn breakdown_total_is_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let config = TrainConfig {
        weights: LossWeights::new(0.1, 0.5).unwrap(),
        ..small_config()
    };
    let mut state = TrainState::initial(&config).unwrap();
    let l = step(
        &mut state,
        &ds.items[..2],
        &fixture_detector(0),
        &config,
        &PrintableColorSet::lattice(),
        0,
        0,
    )
    .unwrap();
    assert_eq!(l.total, 0.1 * l.nps + 0.5 * l.tv + l.obj);
}

#[test]
fn training_is_deterministic_and_leaves_detector_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let det = fixture_detector(0);
    let probe = probe_hash(&det);
    let colors = PrintableColorSet::lattice();
    let config = TrainConfig {
        weights: LossWeights::default(),
        ..small_config()
    };
    let (a, ha) = train(&config, &det, &ds, &colors).unwrap();
    let (b, hb) = train(&config, &det, &ds, &colors).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.records, hb.records);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(probe, probe_hash(&det));
    let other = train(&TrainConfig { seed: 12, ..config }, &det, &ds, &colors)
        .unwrap()
        .0;
    assert_ne!(a, other);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let det = fixture_detector(0);
    let colors = PrintableColorSet::lattice();
    let config = TrainConfig {
        epochs: 75,
        ..small_config()
    };
    let mut full = TrainState::initial(&config).unwrap();
    let hist_full = train_until(&config, &det, &ds, &colors, &mut full, 150, &mut |_, _| Ok(())).unwrap();

    let mut first = TrainState::initial(&config).unwrap();
    train_until(&config, &det, &ds, &colors, &mut first, 100, &mut |_, _| Ok(())).unwrap();
    let ckpt = dir.path().join("step100.apc");
    save_checkpoint(&first, &ckpt).unwrap();
    let mut resumed = load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.step, 100);
    let hist_rest = train_until(&config, &det, &ds, &colors, &mut resumed, 150, &mut |_, _| Ok(())).unwrap();

    assert_eq!(resumed, full);
    assert_eq!(hist_rest.records[..], hist_full.records[100..]);
}

#[test]
fn toy_adapter_loss_decreases_monotonically() {
    let size = 32;
    let toy = ToyAdapter::new(size);
    let image = advpatch::raster::Image::filled(size, size, 0.7);
    let item = LabeledImage {
        path: "toy".into(),
        image,
        boxes: vec![advpatch::data::LabelBox {
            class_index: 0,
            bbox: advpatch::applier::BoundingBox::new(0.5, 0.5, 0.6, 0.6).unwrap(),
            confidence: 0.9,
        }],
        letterbox: Letterbox::new(size, size, size),
    };
    let ds = Dataset {
        split: Split::Train,
        items: vec![item],
    };
    let config = TrainConfig {
        weights: no_reg(),
        learning_rate: 1e-2,
        epochs: 50,
        batch_size: 1,
        patch_size: 8,
        init: InitMode::Gray,
        transform: TransformConfig::identity(1.0),
        ..TrainConfig::default()
    };
    let (_, history) = train(&config, &toy, &ds, &PrintableColorSet::lattice()).unwrap();
    assert_eq!(history.records.len(), 50);
    for w in history.records.windows(2) {
        assert!(w[1].loss.total < w[0].loss.total, "{:?}", w);
    }
}

#[test]
fn non_finite_objective_aborts_with_term() {
    let size = 32;
    let mut toy = ToyAdapter::new(size);
    toy.poison = true;
    let ds = Dataset {
        split: Split::Train,
        items: vec![LabeledImage {
            path: "toy".into(),
            image: advpatch::raster::Image::filled(size, size, 0.5),
            boxes: vec![],
            letterbox: Letterbox::new(size, size, size),
        }],
    };
    let config = TrainConfig {
        epochs: 1,
        batch_size: 1,
        patch_size: 4,
        ..TrainConfig::default()
    };
    match train(&config, &toy, &ds, &PrintableColorSet::lattice()) {
        Err(
            e @ Error::NonFinite {
                term: "obj", step: 1, ..
            },
        ) => assert!(e.to_string().contains("obj")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn empty_dataset_rejected() {
    let ds = Dataset {
        split: Split::Train,
        items: vec![],
    };
    let r = train(
        &small_config(),
        &fixture_detector(0),
        &ds,
        &PrintableColorSet::lattice(),
    );
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}
