use groupclip_core::Error;
use groupclip_harness::data::{
    idx_dataset, parse_idx, read_idx, IdxData, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use groupclip_harness::HarnessError;
use proptest::prelude::*;

fn write_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn write_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn format_offset(r: Result<IdxData, HarnessError>) -> Option<u64> {
    match r {
        Err(HarnessError::Core(Error::Format { offset, .. })) => Some(offset),
        _ => None,
    }
}

proptest! {
    #[test]
    fn images_round_trip(n in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * rows * cols)
            .map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8)
            .collect();
        match parse_idx(&write_images(n, rows, cols, &pixels)).unwrap() {
            IdxData::Images { images, rows: r, cols: c } => {
                prop_assert_eq!((r, c), (rows, cols));
                prop_assert_eq!(images.shape(), &[n, rows * cols][..]);
                let back: Vec<u8> = images.data().iter().map(|v| (v * 255.0).round() as u8).collect();
                prop_assert_eq!(back, pixels);
            }
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn labels_round_trip(labels in proptest::collection::vec(any::<u8>(), 0..40)) {
        let expected: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        prop_assert_eq!(parse_idx(&write_labels(&labels)).unwrap(), IdxData::Labels(expected));
    }

    #[test]
    fn truncation_is_reported_within_the_file(labels in proptest::collection::vec(any::<u8>(), 1..20), cut in 0usize..28) {
        let bytes = write_labels(&labels);
        let cut = cut.min(bytes.len() - 1);
        let offset = format_offset(parse_idx(&bytes[..cut]));
        prop_assert!(offset.is_some_and(|o| o <= cut as u64), "{:?}", offset);
    }
}

#[test]
fn files_on_disk_become_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(
        &img,
        write_images(3, 2, 2, &[0, 51, 102, 255, 1, 2, 3, 4, 9, 9, 9, 9]),
    )
    .unwrap();
    std::fs::write(&lab, write_labels(&[1, 0, 1])).unwrap();
    let data = idx_dataset(&img, &lab).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(&data.inputs.data()[..4], &[0.0, 0.2, 0.4, 1.0]);
    assert!(matches!(read_idx(&lab).unwrap(), IdxData::Labels(l) if l == vec![1, 0, 1]));

    std::fs::write(&lab, write_labels(&[1, 0])).unwrap();
    assert!(idx_dataset(&img, &lab).is_err());
    assert!(idx_dataset(&lab, &img).is_err());
    assert!(matches!(
        read_idx(&dir.path().join("missing")),
        Err(HarnessError::Io { .. })
    ));
}

#[test]
fn empty_image_files_are_rejected() {
    assert!(parse_idx(&write_images(0, 2, 2, &[])).is_err());
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = write_labels(&[1, 2]);
    bytes.push(0);
    assert_eq!(format_offset(parse_idx(&bytes)), Some(10));
}
