mod common;

use nvcim_harness::mnist::{load_mnist, parse_images, parse_labels, IdxError, IMAGE_MAGIC, LABEL_MAGIC};

fn be(x: u32) -> [u8; 4] {
    x.to_be_bytes()
}

#[test]
fn idx_magic_constants() {
    assert_eq!(IMAGE_MAGIC, 0x0000_0803);
    assert_eq!(LABEL_MAGIC, 0x0000_0801);
    let dir = common::mnist_dir();
    for (name, magic) in [
        ("train-images-idx3-ubyte", IMAGE_MAGIC),
        ("train-labels-idx1-ubyte", LABEL_MAGIC),
        ("t10k-images-idx3-ubyte", IMAGE_MAGIC),
        ("t10k-labels-idx1-ubyte", LABEL_MAGIC),
    ] {
        let head = std::fs::read(dir.join(name)).unwrap();
        assert_eq!(u32::from_be_bytes(head[..4].try_into().unwrap()), magic, "{name}");
    }
}

#[test]
fn canonical_files_match_a_raw_byte_read() {
    let dir = common::mnist_dir();
    let m = load_mnist(&dir).unwrap();
    assert_eq!(m.train.len(), 60_000);
    assert_eq!(m.test.len(), 10_000);

    // Header is 8 bytes for labels and 16 for images; payload is one byte each.
    let labels = std::fs::read(dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(labels[8], 5);
    assert_eq!(m.train.labels[0], 5);
    for i in [1, 777, 59_999] {
        assert_eq!(m.train.labels[i], labels[8 + i] as usize);
    }
    let images = std::fs::read(dir.join("t10k-images-idx3-ubyte")).unwrap();
    for (img, r, c) in [(0, 14, 14), (42, 7, 20), (9_999, 20, 9)] {
        let raw = images[16 + img * 784 + r * 28 + c] as f64 / 255.0;
        assert_eq!(m.test.inputs.row(img)[r * 28 + c], raw);
    }
    assert!(m.train.inputs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn truncated_file_reports_offset() {
    let mut bytes = Vec::new();
    bytes.extend(be(IMAGE_MAGIC));
    bytes.extend(be(2));
    bytes.extend(be(3));
    bytes.extend(be(3));
    bytes.extend([0u8; 10]);
    match parse_images("x", &bytes) {
        Err(IdxError::Truncated { offset, needed, .. }) => {
            assert_eq!(offset, 26);
            assert_eq!(needed, 34);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_labels("x", &be(LABEL_MAGIC)[..3]), Err(IdxError::Truncated { offset: 3, .. })));
}

#[test]
fn bad_magic_and_label_range() {
    let mut bytes = Vec::new();
    bytes.extend(be(IMAGE_MAGIC));
    bytes.extend(be(1));
    bytes.push(0);
    assert!(matches!(
        parse_labels("x", &bytes),
        Err(IdxError::BadMagic { found: 2051, expected: 2049, .. })
    ));
    let mut bytes = Vec::new();
    bytes.extend(be(LABEL_MAGIC));
    bytes.extend(be(3));
    bytes.extend([1, 10, 2]);
    assert!(matches!(
        parse_labels("x", &bytes),
        Err(IdxError::LabelRange { index: 1, label: 10, .. })
    ));
}
