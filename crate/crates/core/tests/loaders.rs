use std::fs;
use std::path::{Path, PathBuf};

use dgkd_core::data::{
    generate_synthetic_dataset, load_cifar_binary, load_idx_dataset, write_cifar_binary,
    write_idx_images, write_idx_labels, SyntheticKind, SyntheticParams, CIFAR_PIXELS,
};
use dgkd_core::{Error, ErrorCategory};
use tempfile::TempDir;

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

fn idx_images_bytes(magic: u32, count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    [&be(magic)[..], &be(count), &be(rows), &be(cols), pixels].concat()
}

fn idx_labels_bytes(magic: u32, labels: &[u8]) -> Vec<u8> {
    [&be(magic)[..], &be(labels.len() as u32), labels].concat()
}

fn put(dir: &TempDir, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v * 255.0).round() as u8).collect()
}

#[test]
fn idx_two_image_fixture_round_trips() {
    let dir = TempDir::new().unwrap();
    let pixels: Vec<u8> = vec![0, 255, 17, 128, 3, 4, 5, 250];
    let img = put(&dir, "img.idx", &idx_images_bytes(0x803, 2, 2, 2, &pixels));
    let lab = put(&dir, "lab.idx", &idx_labels_bytes(0x801, &[7, 1]));
    let ds = load_idx_dataset(&img, &lab).unwrap();
    assert_eq!(ds.inputs.shape(), &[2, 1, 2, 2]);
    assert_eq!(ds.labels, vec![7, 1]);
    assert_eq!(ds.num_classes, 8);
    let expected: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    assert_eq!(ds.inputs.data(), expected.as_slice());

    let img2 = dir.path().join("img2.idx");
    let lab2 = dir.path().join("lab2.idx");
    write_idx_images(&img2, 2, 2, &to_bytes(ds.inputs.data())).unwrap();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write_idx_labels(&lab2, &labels).unwrap();
    assert_eq!(fs::read(&img).unwrap(), fs::read(&img2).unwrap());
    assert_eq!(fs::read(&lab).unwrap(), fs::read(&lab2).unwrap());
}

fn idx_err(images: &[u8], labels: &[u8]) -> Error {
    let dir = TempDir::new().unwrap();
    let img = put(&dir, "i", images);
    let lab = put(&dir, "l", labels);
    load_idx_dataset(&img, &lab).unwrap_err()
}

#[test]
fn idx_malformed_fixtures() {
    let good_labels = idx_labels_bytes(0x801, &[0, 1]);
    let good_images = idx_images_bytes(0x803, 2, 1, 1, &[1, 2]);

    let e = idx_err(&idx_images_bytes(0, 2, 1, 1, &[1, 2]), &good_labels);
    assert!(
        matches!(
            e,
            Error::BadMagic {
                found: 0,
                expected: 0x803,
                ..
            }
        ),
        "{e}"
    );
    let e = idx_err(&good_images, &idx_labels_bytes(0x803, &[0, 1]));
    assert!(
        matches!(
            e,
            Error::BadMagic {
                expected: 0x801,
                ..
            }
        ),
        "{e}"
    );

    let e = idx_err(&idx_images_bytes(0x803, 3, 1, 1, &[1, 2, 3]), &good_labels);
    assert!(
        matches!(
            e,
            Error::CountMismatch {
                images: 3,
                labels: 2
            }
        ),
        "{e}"
    );

    // header promises 2×2×2 pixels, file holds 3
    let e = idx_err(&idx_images_bytes(0x803, 2, 2, 2, &[1, 2, 3]), &good_labels);
    assert!(matches!(e, Error::Truncated { .. }), "{e}");
    // header cut short
    let e = idx_err(&be(0x803), &good_labels);
    assert!(matches!(e, Error::Truncated { .. }), "{e}");
    let mut short_labels = idx_labels_bytes(0x801, &[0, 1]);
    short_labels.pop();
    let e = idx_err(&good_images, &short_labels);
    assert!(matches!(e, Error::Truncated { .. }), "{e}");
    assert_eq!(e.category(), ErrorCategory::Data);
}

fn cifar_record(label_bytes: &[u8], fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut rec = label_bytes.to_vec();
    rec.extend((0..CIFAR_PIXELS).map(fill));
    rec
}

#[test]
fn cifar10_two_record_fixture_round_trips() {
    let dir = TempDir::new().unwrap();
    let r0 = cifar_record(&[3], |i| (i % 251) as u8);
    let r1 = cifar_record(&[9], |i| 255 - (i % 7) as u8);
    let path = put(&dir, "batch.bin", &[r0.clone(), r1.clone()].concat());
    let ds = load_cifar_binary(std::slice::from_ref(&path), 10).unwrap();
    assert_eq!(ds.inputs.shape(), &[2, 3, 32, 32]);
    assert_eq!(ds.labels, vec![3, 9]);
    // channel-major: red plane first
    assert_eq!(to_bytes(ds.inputs.row(0)), r0[1..].to_vec());
    assert_eq!(to_bytes(ds.inputs.row(1)), r1[1..].to_vec());

    let out = dir.path().join("again.bin");
    let labels: Vec<(u8, u8)> = ds.labels.iter().map(|&l| (0, l as u8)).collect();
    write_cifar_binary(&out, 10, &labels, &to_bytes(ds.inputs.data())).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn cifar100_uses_fine_label_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let recs = [
        cifar_record(&[4, 77], |i| (i * 3 % 256) as u8),
        cifar_record(&[19, 0], |_| 128),
    ];
    let path = put(&dir, "train.bin", &recs.concat());
    let ds = load_cifar_binary(std::slice::from_ref(&path), 100).unwrap();
    assert_eq!(ds.labels, vec![77, 0]);
    let out = dir.path().join("again.bin");
    write_cifar_binary(&out, 100, &[(4, 77), (19, 0)], &to_bytes(ds.inputs.data())).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&out).unwrap());
}

fn cifar_err(bytes: &[u8], classes: usize) -> Error {
    let dir = TempDir::new().unwrap();
    let p = put(&dir, "x.bin", bytes);
    load_cifar_binary(&[p], classes).unwrap_err()
}

#[test]
fn cifar_malformed_fixtures() {
    let mut long = cifar_record(&[1], |_| 0);
    long.push(0);
    let e = cifar_err(&long, 10);
    assert!(
        matches!(
            e,
            Error::RecordSize {
                len: 3074,
                record: 3073,
                ..
            }
        ),
        "{e}"
    );

    let e = cifar_err(&[], 10);
    assert!(matches!(e, Error::RecordSize { .. }), "{e}");

    let e = cifar_err(&cifar_record(&[255], |_| 0), 10);
    assert!(
        matches!(
            e,
            Error::LabelRange {
                label: 255,
                num_classes: 10
            }
        ),
        "{e}"
    );

    // a 10-class record read with the 2-byte layout is a size error
    let e = cifar_err(&cifar_record(&[1], |_| 0), 100);
    assert!(matches!(e, Error::RecordSize { record: 3074, .. }), "{e}");

    let missing = Path::new("/nonexistent/cifar.bin").to_path_buf();
    let e = load_cifar_binary(&[missing], 10).unwrap_err();
    assert_eq!(e.category(), ErrorCategory::Io);
}

#[test]
fn malformed_files_never_yield_partial_datasets() {
    // second file bad → whole load fails
    let dir = TempDir::new().unwrap();
    let good = put(&dir, "a.bin", &cifar_record(&[1], |_| 9));
    let bad = put(&dir, "b.bin", &cifar_record(&[11], |_| 9));
    assert!(matches!(
        load_cifar_binary(&[good, bad], 10),
        Err(Error::LabelRange { label: 11, .. })
    ));
}

#[test]
fn synthetic_generation_is_seeded_and_balanced() {
    let params = SyntheticParams {
        classes: 10,
        train_per_class: 500,
        test_per_class: 200,
        noise: 0.2,
    };
    let a = generate_synthetic_dataset(SyntheticKind::Spiral, &params, 11).unwrap();
    let b = generate_synthetic_dataset(SyntheticKind::Spiral, &params, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_dataset(SyntheticKind::Spiral, &params, 12).unwrap();
    assert_ne!(a.train.inputs, c.train.inputs);
    let mut counts = [0usize; 10];
    for &l in &a.train.labels {
        counts[l] += 1;
    }
    assert_eq!(counts, [500; 10]);
    assert_eq!(a.test.len(), 2000);
}

#[test]
fn noiseless_blobs_are_solved_by_nearest_centroid() {
    let params = SyntheticParams {
        classes: 6,
        train_per_class: 40,
        test_per_class: 40,
        noise: 0.0,
    };
    let d = generate_synthetic_dataset(SyntheticKind::Blobs, &params, 3).unwrap();
    let mut centroids = [[0.0f64; 2]; 6];
    for (i, &l) in d.train.labels.iter().enumerate() {
        let r = d.train.inputs.row(i);
        centroids[l][0] += r[0] / 40.0;
        centroids[l][1] += r[1] / 40.0;
    }
    for (i, &l) in d.test.labels.iter().enumerate() {
        let r = d.test.inputs.row(i);
        let nearest = (0..6)
            .min_by(|&a, &b| {
                let da = (r[0] - centroids[a][0]).powi(2) + (r[1] - centroids[a][1]).powi(2);
                let db = (r[0] - centroids[b][0]).powi(2) + (r[1] - centroids[b][1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, l);
    }
}
