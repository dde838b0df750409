mod common;

use std::fs;

use advpatch::data::{generate_pseudo_labels, label_path, list_images, load_dataset, read_labels, Letterbox, Split};
use advpatch::detector::fixture::fixture_detector;
use advpatch::raster::Image;
use advpatch::synthetic::write_scenes;
use advpatch::Error;
use proptest::prelude::*;

#[test]
fn pseudo_labels_are_idempotent_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    write_scenes(&images, 3, 6, 128).unwrap();
    let det = fixture_detector(0);
    let s1 = generate_pseudo_labels(&det, &images, &labels, 128, 0.5, 0.45).unwrap();
    assert_eq!(s1.images, 6);
    assert!(s1.warnings.is_empty());
    let snapshot: Vec<Vec<u8>> = list_images(&images)
        .unwrap()
        .iter()
        .map(|p| fs::read(label_path(&labels, p)).unwrap())
        .collect();
    let s2 = generate_pseudo_labels(&det, &images, &labels, 128, 0.5, 0.45).unwrap();
    assert_eq!(s1, s2);
    let again: Vec<Vec<u8>> = list_images(&images)
        .unwrap()
        .iter()
        .map(|p| fs::read(label_path(&labels, p)).unwrap())
        .collect();
    assert_eq!(snapshot, again);
    let total: usize = list_images(&images)
        .unwrap()
        .iter()
        .map(|p| {
            let l = read_labels(&label_path(&labels, p)).unwrap();
            assert!(l.iter().all(|b| b.class_index == 0 && b.confidence >= 0.5));
            l.len()
        })
        .sum();
    assert_eq!(total, s1.boxes);
}

#[test]
fn unreadable_image_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    write_scenes(&images, 0, 2, 128).unwrap();
    fs::write(images.join("broken.png"), b"not a png").unwrap();
    let labels = dir.path().join("labels");
    let s = generate_pseudo_labels(&fixture_detector(0), &images, &labels, 128, 0.5, 0.45).unwrap();
    assert_eq!(s.images, 2);
    assert_eq!(s.warnings.len(), 1);
    assert!(!labels.join("broken.txt").exists());
}

#[test]
fn input_size_must_match_stride() {
    let dir = tempfile::tempdir().unwrap();
    let r = generate_pseudo_labels(&fixture_detector(0), dir.path(), dir.path(), 100, 0.5, 0.45);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn missing_label_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    write_scenes(&images, 0, 2, 128).unwrap();
    fs::create_dir_all(&labels).unwrap();
    fs::write(labels.join("scene_0000.txt"), "").unwrap();
    match load_dataset(&images, &labels, 128, Split::Test, 0) {
        Err(e @ Error::MissingFile(_)) => assert!(e.to_string().contains("scene_0001.txt")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn split_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let test = common::desk_dataset(dir.path(), 0, 8, Split::Test);
    let names: Vec<_> = test.items.iter().map(|i| i.path.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);

    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    let order = |seed| {
        load_dataset(&images, &labels, 128, Split::Train, seed)
            .unwrap()
            .items
            .iter()
            .map(|i| i.path.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(order(4), order(4));
    assert_ne!(order(4), names);
    let mut shuffled = order(4);
    shuffled.sort();
    assert_eq!(shuffled, names);
}

#[test]
fn batches_cover_dataset_once() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::desk_dataset(dir.path(), 0, 7, Split::Train);
    let sizes: Vec<usize> = ds.batches(3).unwrap().map(|b| b.len()).collect();
    assert_eq!(sizes, [3, 3, 1]);
    assert_eq!(ds.num_batches(3), 3);
    assert!(ds.batches(0).is_err());
}

#[test]
fn non_square_images_letterbox_and_map_back() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    let s = advpatch::synthetic::scene(0, 2, 128);
    // Pad the scene to 192 wide; labels should land at the same pixels.
    let wide = Image::from_fn(128, 192, |y, x, c| if x < 128 { s.image.get(y, x, c) } else { 0.5 });
    wide.save_png(&images.join("wide.png")).unwrap();
    let labels = dir.path().join("labels");
    let det = fixture_detector(0);
    generate_pseudo_labels(&det, &images, &labels, 128, 0.5, 0.45).unwrap();
    let ds = load_dataset(&images, &labels, 128, Split::Test, 0).unwrap();
    let item = &ds.items[0];
    assert_eq!((item.image.height(), item.image.width()), (128, 128));
    let lb = item.letterbox;
    assert_eq!((lb.new_width, lb.new_height, lb.pad_y), (128, 85, 21));
    let raw = read_labels(&labels.join("wide.txt")).unwrap();
    assert!(!raw.is_empty());
    assert_eq!(raw.len(), item.boxes.len());
    for (a, b) in raw.iter().zip(&item.boxes) {
        let back = lb.to_original(&b.bbox);
        assert!((back.cx - a.bbox.cx).abs() < 1e-9 && (back.h - a.bbox.h).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn letterbox_round_trips_boxes(w in 1usize..400, h in 1usize..400, size in 32usize..500,
                                   cx in 0.1f64..0.9, cy in 0.1f64..0.9, bw in 0.01f64..0.5, bh in 0.01f64..0.5) {
        let lb = Letterbox::new(w, h, size);
        prop_assert!(lb.new_width <= size && lb.new_height <= size);
        prop_assert!(lb.new_width == size || lb.new_height == size);
        let b = advpatch::applier::BoundingBox { cx, cy, w: bw, h: bh };
        let back = lb.to_original(&lb.to_letterboxed(&b));
        prop_assert!((back.cx - cx).abs() < 1e-9 && (back.cy - cy).abs() < 1e-9);
        prop_assert!((back.w - bw).abs() < 1e-9 && (back.h - bh).abs() < 1e-9);
    }
}
