//! IDX round-trips through files, plain and gzipped.

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use langevin::data::{encode_idx, load_idx, parse_idx_images, parse_idx_labels, write_idx, LabeledDataset};
use langevin::linalg::Matrix;
use langevin::model::Targets;
use proptest::prelude::*;

fn dataset(pixels: Vec<u8>, labels: Vec<u8>, width: usize) -> LabeledDataset {
    let n = labels.len();
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(
        Matrix::from_vec(n, width, inputs),
        Targets::Labels(labels.into_iter().map(usize::from).collect()),
    )
    .unwrap()
}

fn idx_case() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, usize)> {
    (1usize..6, 1usize..20).prop_flat_map(|(side, n)| {
        (
            prop::collection::vec(any::<u8>(), n * side * side),
            prop::collection::vec(0u8..10, n),
            Just(side * side),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn write_then_load_is_bitwise((pixels, labels, width) in idx_case(), gz in any::<bool>()) {
        let data = dataset(pixels.clone(), labels, width);
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        if gz {
            let (i, l) = encode_idx(&data).unwrap();
            for (path, bytes) in [(&img, i), (&lbl, l)] {
                let mut enc = GzEncoder::new(std::fs::File::create(path).unwrap(), Compression::default());
                enc.write_all(&bytes).unwrap();
                enc.finish().unwrap();
            }
        } else {
            write_idx(&data, &img, &lbl).unwrap();
        }
        let back = load_idx(&img, &lbl).unwrap();
        prop_assert_eq!(&back, &data);
        let (again, _) = encode_idx(&back).unwrap();
        prop_assert_eq!(&again[16..], &pixels[..]);
    }

    #[test]
    fn truncation_is_reported_not_panicked((pixels, labels, width) in idx_case(), cut in 0usize..64) {
        let (img, lbl) = encode_idx(&dataset(pixels, labels, width)).unwrap();
        // drop between 1 byte and the whole file
        prop_assert!(parse_idx_images(&img[..(img.len() - 1).saturating_sub(cut)]).is_err());
        prop_assert!(parse_idx_labels(&lbl[..(lbl.len() - 1).saturating_sub(cut)]).is_err());
    }
}

#[test]
fn bundled_subset_has_mnist_shape() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
    let data = load_idx(
        format!("{dir}/mnist10k-images-idx3-ubyte.gz"),
        format!("{dir}/mnist10k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!(data.len(), 10_000);
    assert_eq!(data.features(), 784);
    assert_eq!(data.num_classes(), Some(10));
    assert!(data.inputs().data().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn count_mismatch_is_a_format_error() {
    let data = dataset(vec![0; 8], vec![1, 2], 4);
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&data, &img, &lbl).unwrap();
    write_idx(&dataset(vec![0; 4], vec![1], 4), dir.path().join("x"), &lbl).unwrap();
    let err = load_idx(&img, &lbl).unwrap_err().to_string();
    assert!(err.contains("2 images but 1 labels"), "{err}");
}
