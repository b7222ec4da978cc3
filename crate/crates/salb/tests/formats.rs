use proptest::prelude::*;
use salb::formats::{decode_dataset, encode_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, sha256_hex};
use salb::Error;
use salb_core::synthgen::{generate, SynthSpec};
use salb_core::trainer::{train, TrainConfig};
use salb_core::Seed;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec { n_samples: 40, d_roi: 6, rois_per_image: 2, d_image: 5, d_text: 4, d_tag: 3, seed: Seed(seed), ..SynthSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn dataset_round_trip_is_bitwise(seed in any::<u64>()) {
        let d = generate(&spec(seed)).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_a_format_error(seed in 0u64..4, cut in 0usize..4000) {
        let bytes = encode_dataset(&generate(&spec(seed)).unwrap()).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(
            matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })),
            "truncation at {} was not rejected",
            cut
        );
    }
}

#[test]
fn files_round_trip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&spec(3)).unwrap();
    let path = dir.path().join("d.salb");
    save_dataset(&path, &d, false).unwrap();
    let (back, hash) = load_dataset(&path).unwrap();
    assert_eq!(back, d);
    assert_eq!(hash, sha256_hex(&std::fs::read(&path).unwrap()));
    assert_eq!(hash.len(), 64);
    assert!(matches!(save_dataset(&path, &d, false), Err(Error::OutputExists(_))));

    let cfg = TrainConfig { steps: 5, batch_size: 8, holdout: 8, hidden_dim: 6, embed_dim: 4, key_dim: 2, ..TrainConfig::default() };
    let (state, _) = train(&d, &cfg).unwrap();
    let ckpt = dir.path().join("c.salb");
    save_checkpoint(&ckpt, &state, false).unwrap();
    assert_eq!(load_checkpoint(&ckpt).unwrap(), state);
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn sha256_known_value() {
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
