mod common;

use common::{random_tensor, rng, tiny_model};
use segimprint::model::{self, BackboneKind, ModelConfig, ModelFormatError, SegModel};
use segimprint::Tensor;

const KINDS: [BackboneKind; 2] = [BackboneKind::FcnLike, BackboneKind::UnetLike];

fn image(seed: u64) -> Tensor {
    random_tensor(&mut rng(seed), &[1, 16, 16]).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn argmax_invariant_under_feature_scaling() {
    for kind in KINDS {
        let m = tiny_model(kind, 6, 21);
        for seed in 0..10 {
            let f = m.extract_features(&image(seed)).unwrap();
            let base = segimprint::numerics::argmax_channels(&m.logits_from_features(&f).unwrap()).unwrap();
            for s in [0.25f32, 3.0, 17.5] {
                let scaled = m.logits_from_features(&f.scaled(s)).unwrap();
                assert_eq!(segimprint::numerics::argmax_channels(&scaled).unwrap(), base);
            }
        }
    }
}

#[test]
fn logits_are_linear_in_head_weights() {
    for kind in KINDS {
        let m = tiny_model(kind, 4, 8);
        let img = image(3);
        let f = m.extract_features(&img).unwrap();
        let base = m.forward(&img).unwrap();
        for h in 0..m.heads.len() {
            let mut doubled = m.clone();
            doubled.heads[h].weight = doubled.heads[h].weight.scale(2.0);
            let after = doubled.forward(&img).unwrap();
            let contrib = m.head_contribution(h, &f).unwrap();
            for ((a, b), c) in after.data().iter().zip(base.data()).zip(contrib.data()) {
                assert!((a - b - c).abs() < 1e-5, "head {h}: {a} - {b} != {c}");
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    for kind in KINDS {
        let m = tiny_model(kind, 5, 1);
        let img = image(4);
        let a = m.forward(&img).unwrap();
        assert_eq!(a.shape(), &[5, 16, 16]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&m.forward(&img).unwrap()));
        for head in &m.heads {
            assert_eq!(head.weight.shape(), &[5, head.spec.in_channels]);
        }
    }
}

#[test]
fn heads_follow_levels() {
    let config = ModelConfig::default();
    let names = segimprint::data::base_class_names();
    let fcn = SegModel::build(BackboneKind::FcnLike, config.clone(), names.clone()).unwrap();
    let unet = SegModel::build(BackboneKind::UnetLike, config, names).unwrap();
    assert_eq!(fcn.heads.len(), 3);
    assert_eq!(unet.heads.len(), 4);
    assert_eq!(fcn.head_specs(), fcn.heads.iter().map(|h| h.spec).collect::<Vec<_>>());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for kind in KINDS {
        let mut m = tiny_model(kind, 4, 2);
        m.add_class_slot("black_spot").unwrap();
        m.rows_prenormalized = true;
        let p = dir.path().join(format!("{}.imsg", kind.name()));
        model::save(&m, &p).unwrap();
        let loaded = model::load(&p).unwrap();
        assert_eq!(loaded.class_names.len(), 5);
        assert_eq!(loaded.kind, kind);
        assert!(loaded.rows_prenormalized);
        assert_eq!(loaded.parameters(), m.parameters());
        let img = image(0);
        assert_eq!(loaded.forward(&img).unwrap(), m.forward(&img).unwrap());
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(model::to_bytes(&loaded), bytes);
    }
}

#[test]
fn corrupt_files_map_to_distinct_errors() {
    let m = tiny_model(BackboneKind::UnetLike, 4, 2);
    let bytes = model::to_bytes(&m);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(model::from_bytes(&bad), Err(ModelFormatError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(matches!(model::from_bytes(&bad), Err(ModelFormatError::Version(99))));

    assert!(matches!(
        model::from_bytes(&bytes[..bytes.len() - 3]),
        Err(ModelFormatError::Truncated { .. })
    ));

    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    assert!(model::from_bytes(&long).is_err());
}
