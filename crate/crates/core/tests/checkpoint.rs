use clora_core::checkpoint::{from_bytes, load, save, to_bytes, ModelCheckpoint, MAGIC};
use clora_core::linalg::{seeded_rng, Matrix};
use clora_core::lrm::{AdapterBank, AdapterConfig, Variant};
use clora_core::vit::{Adapters, AttachMode, Placement, VitConfig, VitWeights};
use proptest::prelude::*;

fn same_bits(a: &[(String, Matrix)], b: &[(String, Matrix)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ma), (nb, mb))| {
            na == nb
                && ma.shape() == mb.shape()
                && ma
                    .data()
                    .iter()
                    .zip(mb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<u64>().prop_map(f64::from_bits),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(f64::INFINITY),
    ]
}

fn tensor() -> impl Strategy<Value = (String, Matrix)> {
    ("[a-z][a-z0-9_/]{0,12}", 0usize..5, 0usize..5).prop_flat_map(|(name, r, c)| {
        proptest::collection::vec(any_f64(), r * c)
            .prop_map(move |data| (name.clone(), Matrix::new(r, c, data).unwrap()))
    })
}

proptest! {
    #[test]
    fn bytes_round_trip_bit_exactly(tensors in proptest::collection::vec(tensor(), 0..6)) {
        let bytes = to_bytes(&tensors).unwrap();
        prop_assert_eq!(&bytes[..6], MAGIC);
        prop_assert!(same_bits(&tensors, &from_bytes(&bytes).unwrap()));
    }

    #[test]
    fn truncation_is_detected(tensors in proptest::collection::vec(tensor(), 1..4), cut in 1usize..64) {
        let bytes = to_bytes(&tensors).unwrap();
        let total: usize = tensors.iter().map(|(_, m)| m.len()).sum();
        prop_assume!(total > 0);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn names_must_be_plain() {
    for name in ["", "has space", "tab\there"] {
        assert!(to_bytes(&[(name.to_string(), Matrix::zeros(1, 1))]).is_err());
    }
}

#[test]
fn every_bank_variant_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded_rng(1);
    for variant in [Variant::Lora, Variant::NaiveSum, Variant::Clora] {
        let bank = AdapterBank::random(
            &AdapterConfig {
                d: 8,
                r: 2,
                m: 4,
                p: 2,
                variant,
            },
            &mut rng,
        )
        .unwrap();
        let tensors = bank.named_tensors("adapter/");
        let path = dir.path().join(format!("{variant:?}.clora"));
        save(&path, &tensors).unwrap();
        let loaded = load(&path).unwrap();
        assert!(same_bits(&tensors, &loaded));
        assert_eq!(
            AdapterBank::from_named_tensors("adapter/", &loaded).unwrap(),
            bank
        );
    }
}

#[test]
fn model_checkpoint_round_trip() {
    let config = VitConfig {
        d: 8,
        layers: 2,
        heads: 2,
        n: 3,
        patch_dim: 6,
        ffn_hidden: 16,
        classes: 3,
    };
    let mut rng = seeded_rng(2);
    let weights = VitWeights::init(config, &mut rng).unwrap();
    let bank = AdapterBank::random(
        &AdapterConfig {
            d: 8,
            r: 2,
            m: 2,
            p: 1,
            variant: Variant::Clora,
        },
        &mut rng,
    )
    .unwrap();
    let placement = Placement {
        mha: false,
        ffn: true,
    };
    let adapters = Adapters::new(bank, AttachMode::PreBlock, placement, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();

    for ckpt in [
        ModelCheckpoint {
            weights: weights.clone(),
            adapters: Some(adapters),
        },
        ModelCheckpoint {
            weights,
            adapters: None,
        },
    ] {
        let path = dir.path().join("model.clora");
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(same_bits(&back.to_tensors(), &ckpt.to_tensors()));
        assert_eq!(
            back.weights.backbone_digest(),
            ckpt.weights.backbone_digest()
        );
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load(&dir.path().join("absent")),
        Err(clora_core::Error::Io(_))
    ));
}
