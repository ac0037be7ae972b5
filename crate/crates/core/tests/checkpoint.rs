mod common;

use common::tiny_config;
use mscm::checkpoint::{decode, encode, load, model_state, restore, save, CHECKPOINT_VERSION};
use mscm::model::Model;
use mscm::tensor::Tensor;
use mscm::Error;
use proptest::prelude::*;

fn named(shapes: &[Vec<usize>], values: &[f32]) -> Vec<(String, Tensor<f32>)> {
    let mut k = 0;
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = Tensor::from_fn(s, |_| {
                k += 1;
                values[k % values.len()]
            });
            (format!("t{i}"), t)
        })
        .collect()
}

proptest! {
    #[test]
    fn encode_decode_is_bit_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..6),
        values in prop::collection::vec(any::<f32>(), 1..32),
    ) {
        let t = named(&shapes, &values);
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for ((n0, a), (n1, b)) in t.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}

#[test]
fn model_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(tiny_config(), 3).unwrap();
    let a = dir.path().join("a.ck");
    let b = dir.path().join("b.ck");
    save(&a, &model_state(&model, 4).unwrap()).unwrap();
    let mut other = Model::<f32>::new(tiny_config(), 99).unwrap();
    assert_eq!(restore(&mut other, load(&a).unwrap()).unwrap(), 4);
    save(&b, &model_state(&other, 4).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corruption_is_a_checksum_error() {
    let model = Model::<f32>::new(tiny_config(), 3).unwrap();
    let bytes = encode(&model_state(&model, 0).unwrap()).unwrap();
    for pos in [12, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        let e = decode(&bad).unwrap_err();
        assert!(matches!(e, Error::Checksum { .. }), "{pos}: {e}");
        assert_eq!(e.exit_code(), 3);
    }
}

#[test]
fn version_mismatch_exits_five() {
    let mut bytes = encode(&[("x".into(), Tensor::scalar(1.0f32))]).unwrap();
    bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let e = decode(&bytes).unwrap_err();
    assert!(matches!(e, Error::VersionMismatch { found, .. } if found == CHECKPOINT_VERSION + 1));
    assert_eq!(e.exit_code(), 5);
}

#[test]
fn bad_magic_and_truncation() {
    let bytes = encode(&[("x".into(), Tensor::scalar(1.0f32))]).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(decode(&bad).unwrap_err().exit_code(), 3);
    assert_eq!(decode(&bytes[..10]).unwrap_err().exit_code(), 3);
    assert_eq!(decode(&bytes[..bytes.len() - 1]).unwrap_err().exit_code(), 3);
}

#[test]
fn layout_mismatch_is_rejected() {
    let small = Model::<f32>::new(tiny_config(), 1).unwrap();
    let mut cfg = tiny_config();
    cfg.num_alb = 2;
    let mut other = Model::<f32>::new(cfg, 1).unwrap();
    let e = restore(&mut other, model_state(&small, 0).unwrap()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let mut cfg = tiny_config();
    cfg.num_classes = 3;
    let mut wide = Model::<f32>::new(cfg, 1).unwrap();
    assert!(restore(&mut wide, model_state(&small, 0).unwrap()).is_err());
}

#[test]
fn missing_file_is_io() {
    let e = load(std::path::Path::new("/nonexistent/x.ck")).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
