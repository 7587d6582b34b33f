use std::fs;
use std::path::Path;

use branchgan::data::{build_dataset, load_eval_split, load_labeled_split, Convention, DatasetManifest, DatasetRequest, Split, SynthParams};
use branchgan::error::Error;
use branchgan::imaging::{read_gray_png, Mask};

fn request(root: &Path, convention: Convention, train: usize, test: usize) -> DatasetRequest {
    DatasetRequest {
        root: root.to_path_buf(),
        seed: 21,
        convention,
        n_train_per_class: train,
        n_test_per_class: test,
        params: SynthParams::default(),
        overwrite: false,
    }
}

fn count_pngs(dir: &Path) -> usize {
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count_pngs(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

fn fill_ratio(m: &Mask) -> f64 {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            }
        }
    }
    m.count() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64
}

#[test]
fn full_size_dataset_has_balanced_classes_and_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    let m = build_dataset(&request(&root, Convention::Set1, 200, 50)).unwrap();
    assert_eq!(m.files.len(), 500);
    assert_eq!(m.class_count(0), 250);
    assert_eq!(m.class_count(1), 250);
    assert_eq!(m.entries(Split::Train).count(), 400);
    assert_eq!(m.entries(Split::Test).count(), 100);
    assert_eq!(count_pngs(&root.join("train")) + count_pngs(&root.join("test")), 500);
    assert_eq!(count_pngs(&root.join("masks")), 1000);
    assert_eq!(DatasetManifest::load(&root).unwrap(), m);

    let first = fs::read(root.join(&m.files[17].path)).unwrap();
    let mut req = request(&root, Convention::Set1, 200, 50);
    req.overwrite = true;
    let again = build_dataset(&req).unwrap();
    assert_eq!(again.hash().unwrap(), m.hash().unwrap());
    assert_eq!(fs::read(root.join(&again.files[17].path)).unwrap(), first);

    let other = build_dataset(&DatasetRequest { seed: 22, ..req }).unwrap();
    assert_ne!(other.hash().unwrap(), m.hash().unwrap());
}

#[test]
fn set1_labels_follow_the_rectangle_masks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    build_dataset(&request(&root, Convention::Set1, 20, 10)).unwrap();
    let data = load_eval_split::<f32>(&root, Split::Train).unwrap();
    assert_eq!(data.len(), 40);
    for (i, s) in data.iter().enumerate() {
        assert_eq!(s.mask_rect.is_empty(), s.label == 0, "sample {i}");
        assert!(s.mask_rect.is_subset_of(&s.mask_shape));
        assert!(s.mask_rect.count() < s.mask_shape.count() || s.mask_rect.is_empty());
    }
}

#[test]
fn set2_partition_matches_shape_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    let m = build_dataset(&request(&root, Convention::Set2, 30, 10)).unwrap();
    let data = load_eval_split::<f32>(&root, Split::Test).unwrap();
    for s in data.iter() {
        let disc = fill_ratio(&s.mask_shape) < 0.95;
        assert_eq!(disc, s.label == 1);
    }
    for e in &m.files {
        assert_eq!(e.class, e.label_set2);
    }
    // the rectangle is independent of the set-2 label, so both occur in each class
    for class in 0..2 {
        let with_rect = m.files.iter().filter(|e| e.class == class && e.label_set1 == 1).count();
        assert!(with_rect > 0 && with_rect < m.class_count(class));
    }
}

#[test]
fn training_view_loads_without_masks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    build_dataset(&request(&root, Convention::Set1, 5, 2)).unwrap();
    fs::remove_dir_all(root.join("masks")).unwrap();
    let train = load_labeled_split::<f64>(&root, Split::Train).unwrap();
    assert_eq!(train.len(), 10);
    assert!(train.iter().all(|s| s.image.shape() == [1, 64, 64]));
    assert!(train.iter().flat_map(|s| s.image.data()).all(|v| (-1.0..=1.0).contains(v)));
    assert!(load_eval_split::<f64>(&root, Split::Train).is_err());
}

#[test]
fn images_are_8bit_grayscale_and_masks_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    let m = build_dataset(&request(&root, Convention::Set1, 2, 1)).unwrap();
    let (h, w, _) = read_gray_png(&root.join(&m.files[0].path)).unwrap();
    assert_eq!((h, w), (64, 64));
    let (_, _, px) = read_gray_png(&root.join(&m.files[1].mask_rect)).unwrap();
    assert!(px.iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn refuses_to_overwrite_without_permission() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    fs::create_dir_all(&root).unwrap();
    fs::write(root.join("keep.txt"), "x").unwrap();
    let err = build_dataset(&request(&root, Convention::Set1, 2, 1)).unwrap_err();
    assert!(matches!(err, Error::DirectoryNotEmpty { .. }));
    assert_eq!(err.exit_code(), 2);
    assert!(root.join("keep.txt").exists());
}
