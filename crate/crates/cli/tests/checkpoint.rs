use bytelift_cli::checkpoint::{Checkpoint, CheckpointError, Kind, FORMAT_VERSION};
use bytelift_cli::config::RunConfig;
use bytelift_core::model::ParamStore;
use bytelift_core::numerics::Tensor;
use bytelift_core::tokenization::{train_bpe, SubwordVocab};
use proptest::prelude::*;

fn sample() -> Checkpoint {
    let mut params = ParamStore::new();
    params.insert(
        "global.layer0.wq",
        Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.1, 1e-300, f64::MAX, -0.0]).unwrap(),
    );
    params.insert("start_vector", Tensor::new(vec![4], vec![0.25; 4]).unwrap());
    params.insert("scalar", Tensor::new(vec![], vec![7.0]).unwrap());
    let mut config = RunConfig::default();
    config.seed = 42;
    config.stage1.lr = 0.1 + 0.2;
    Checkpoint {
        kind: Kind::Byte,
        step: 1234,
        config,
        vocab: train_bpe(&["abababab cdcd abab"], 260).vocab,
        params,
    }
}

fn bits(p: &ParamStore) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let ck = sample();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(bits(&back.params), bits(&ck.params));
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = sample();
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn missing_file_is_reported_as_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(&dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(err, CheckpointError::NotFound(_)), "{err}");
}

#[test]
fn any_flipped_byte_after_the_version_fails_the_checksum() {
    let bytes = sample().to_bytes().unwrap();
    // Flipping a length field may instead make the file look truncated.
    for pos in 12..bytes.len() {
        let mut b = bytes.clone();
        b[pos] ^= 0x10;
        let err = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(
            matches!(err, CheckpointError::Checksum | CheckpointError::Truncated),
            "byte {pos}: {err}"
        );
    }
    // A flipped tensor value byte is always a checksum failure.
    let mut b = bytes.clone();
    let n = b.len();
    b[n - 40] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&b),
        Err(CheckpointError::Checksum)
    ));
}

#[test]
fn wrong_version_is_explicit() {
    let mut b = sample().to_bytes().unwrap();
    b[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&b) {
        Err(CheckpointError::Version { found }) => assert_eq!(found, FORMAT_VERSION + 1),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn every_truncation_is_detected() {
    let bytes = sample().to_bytes().unwrap();
    for cut in 0..bytes.len() {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(err, CheckpointError::Truncated),
            "cut at {cut}: {err}"
        );
    }
}

#[test]
fn foreign_files_are_rejected() {
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint at all"),
        Err(CheckpointError::BadMagic)
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"BLFTxxxxxxxxxxxx"),
        Err(CheckpointError::BadMagic)
    ));
    // A prefix of the magic, including nothing at all, is a cut-off checkpoint.
    assert!(matches!(
        Checkpoint::from_bytes(b""),
        Err(CheckpointError::Truncated)
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"BLFT"),
        Err(CheckpointError::Truncated)
    ));
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0usize..4, 0..3).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_params_round_trip(
        tensors in prop::collection::btree_map("[a-z_.0-9]{1,12}", arb_tensor(), 0..6),
        step in any::<usize>(),
        seed in any::<u64>(),
        lr in 0.0f64..1.0,
        teacher in any::<bool>(),
    ) {
        let mut params = ParamStore::new();
        for (n, t) in tensors {
            params.insert(n, t);
        }
        let mut config = RunConfig::default();
        config.seed = seed;
        config.teacher.lr = lr;
        let ck = Checkpoint {
            kind: if teacher { Kind::Teacher } else { Kind::Byte },
            step,
            config,
            vocab: SubwordVocab::bytes_only(),
            params,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(bits(&back.params), bits(&ck.params));
        prop_assert_eq!(back.kind, ck.kind);
        prop_assert_eq!(back.step, ck.step);
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(&back.vocab, &ck.vocab);
    }
}
