use std::fs;

use proptest::prelude::*;
use tmc_core::io::{self, Precision};
use tmc_core::model::{LayerSpec, ModelConfig, MultiViewVae};
use tmc_core::mvt1::{Payload, TensorFile};
use tmc_core::parallel::Execution;
use tmc_core::synth::{generate, split, Splits, SynthConfig};
use tmc_core::Error;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f64_records_roundtrip_bitwise(shape in shape_strategy(), values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 64)) {
        let n: usize = shape.iter().product();
        let t = TensorFile::new(shape, Payload::F64(values[..n].to_vec())).unwrap();
        let bytes = t.encode();
        prop_assert_eq!(bytes.len(), t.encoded_len());
        prop_assert_eq!(TensorFile::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn f32_records_roundtrip_bitwise(shape in shape_strategy(), values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 64)) {
        let n: usize = shape.iter().product();
        let t = TensorFile::new(shape, Payload::F32(values[..n].to_vec())).unwrap();
        let back = TensorFile::decode(&t.encode()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn truncation_is_detected(shape in prop::collection::vec(1usize..4, 1..3), cut in 1usize..8) {
        let n: usize = shape.iter().product();
        let bytes = TensorFile::new(shape, Payload::F64(vec![1.0; n])).unwrap().encode();
        let cut = cut.min(bytes.len());
        prop_assert!(matches!(TensorFile::decode(&bytes[..bytes.len() - cut]), Err(Error::Format(_))));
    }
}

#[test]
fn rank_zero_and_empty_records() {
    let scalar = TensorFile::new(vec![], Payload::F64(vec![3.25])).unwrap();
    let bytes = scalar.encode();
    assert_eq!(bytes.len(), 6 + 8);
    assert_eq!(TensorFile::decode(&bytes).unwrap().to_tensor().unwrap().item().unwrap(), 3.25);

    let empty = TensorFile::new(vec![3, 0, 2], Payload::F32(vec![])).unwrap();
    let back = TensorFile::decode(&empty.encode()).unwrap();
    assert_eq!(back.shape(), &[3, 0, 2]);
    assert!(back.payload().is_empty());

    assert!(TensorFile::new(vec![2], Payload::F64(vec![1.0])).is_err());
    let mut bad = scalar.encode();
    bad[0] = b'X';
    assert!(matches!(TensorFile::decode(&bad), Err(Error::Format(_))));
    let mut trailing = scalar.encode();
    trailing.push(0);
    assert!(TensorFile::decode(&trailing).is_err());
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mvt");
    let t = TensorFile::new(vec![2, 3], Payload::F64(vec![0.5, -1.0, 2.0, 1e-300, -0.0, 7.0])).unwrap();
    t.write(&path).unwrap();
    assert_eq!(TensorFile::read(&path).unwrap(), t);
}

fn splits(seed: u64) -> Splits {
    let d = generate(
        &SynthConfig {
            n_samples: 50,
            seed,
            ..SynthConfig::default()
        },
        Execution::Sequential,
    )
    .unwrap();
    split(&d.data, [0.8, 0.1, 0.1], seed).unwrap()
}

#[test]
fn dataset_roundtrip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let s = splits(1);
    let m = io::write_dataset(dir.path(), &s, "synthetic", Precision::F64).unwrap();
    assert_eq!(m.content_hash, io::content_hash(&s, Precision::F64).unwrap());
    assert_eq!(m.content_hash.len(), 64);
    let (m2, back) = io::read_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(back, s);

    assert_ne!(m.content_hash, io::content_hash(&splits(2), Precision::F64).unwrap());
    assert_ne!(m.content_hash, io::content_hash(&s, Precision::F32).unwrap());

    let other = tempfile::tempdir().unwrap();
    let again = io::write_dataset(other.path(), &s, "synthetic", Precision::F64).unwrap();
    assert_eq!(again.content_hash, m.content_hash);
    for f in ["eeg.mvt", "labels.mvt"] {
        assert_eq!(
            fs::read(dir.path().join("val").join(f)).unwrap(),
            fs::read(other.path().join("val").join(f)).unwrap()
        );
    }
}

#[test]
fn tampered_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    io::write_dataset(dir.path(), &splits(3), "synthetic", Precision::F64).unwrap();
    let path = dir.path().join("test").join("speech2.mvt");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = io::read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("content hash mismatch"), "{err}");
}

#[test]
fn f32_dataset_loses_only_precision() {
    let dir = tempfile::tempdir().unwrap();
    let s = splits(4);
    io::write_dataset(dir.path(), &s, "synthetic", Precision::F32).unwrap();
    let (_, back) = io::read_dataset(dir.path()).unwrap();
    assert_eq!(back.train.labels, s.train.labels);
    assert_eq!(back.train.ids, s.train.ids);
    for (a, b) in back.train.eeg.data().iter().zip(s.train.eeg.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

fn small_model(latent: usize, seed: u64) -> MultiViewVae {
    let config = ModelConfig {
        latent_dim: latent,
        eeg_shape: vec![40],
        speech_shape: vec![60],
        eeg_encoder: vec![LayerSpec::Affine { out: 8 }, LayerSpec::Relu],
        speech_encoder: vec![LayerSpec::Affine { out: 8 }, LayerSpec::Relu],
        common_hidden: 6,
        classifier_hidden: vec![4, 4],
        ..ModelConfig::default()
    };
    MultiViewVae::new(config, seed).unwrap()
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(5, 9);
    io::save_checkpoint(dir.path(), &model).unwrap();
    let back = io::load_checkpoint(dir.path(), Some(model.config())).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in back.params().iter().zip(model.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let data = splits(5).test;
    assert_eq!(
        back.embed(&data, Execution::Sequential, 16).unwrap(),
        model.embed(&data, Execution::Sequential, 16).unwrap()
    );
}

#[test]
fn checkpoint_mismatches_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(5, 9);
    io::save_checkpoint(dir.path(), &model).unwrap();
    let other = small_model(6, 9);
    let err = io::load_checkpoint(dir.path(), Some(other.config())).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("latent_dim")), "{err}");

    let mut target = small_model(6, 1);
    let values = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    assert!(matches!(target.load_values(values), Err(Error::Checkpoint(_))));

    let blob = dir.path().join(io::CHECKPOINT_TENSORS);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(io::load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
}
