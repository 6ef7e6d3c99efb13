use negmerge::codec;
use negmerge::store::{from_bytes, to_bytes, LoadOptions, SaveOptions};
use negmerge_core::task_vector::{densify, sparsify, TaskVector};
use negmerge_core::{Tensor, TensorMap};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor> {
    let shape = prop_oneof![
        Just(vec![]),
        (0usize..6).prop_map(|a| vec![a]),
        (1usize..4, 0usize..4).prop_map(|(a, b)| vec![a, b]),
        (1usize..3, 1usize..3, 1usize..3).prop_map(|(a, b, c)| vec![a, b, c]),
    ];
    (shape, any::<bool>()).prop_flat_map(|(shape, wide)| {
        let len = shape.iter().product::<usize>();
        let value = prop_oneof![Just(0.0), Just(-0.0), -1e6f64..1e6, -1e-30f64..1e-30];
        vec(value, len).prop_map(move |v| {
            if wide {
                Tensor::from_f64(shape.clone(), v).unwrap()
            } else {
                Tensor::from_f32(shape.clone(), v.iter().map(|&x| x as f32).collect()).unwrap()
            }
        })
    })
}

fn tensor_map() -> impl Strategy<Value = TensorMap> {
    (
        btree_map("[a-z][a-z0-9_.]{0,12}", tensor(), 0..6),
        btree_map("[a-z]{1,6}", "[ -~]{0,10}", 0..3),
    )
        .prop_map(|(tensors, meta)| {
            let mut m = TensorMap::from_tensors(tensors).unwrap();
            for (k, v) in meta {
                m.set_metadata(k, v);
            }
            m
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn save_load_save_is_byte_stable(m in tensor_map()) {
        let bytes = to_bytes(&m, SaveOptions::default()).unwrap();
        let back = from_bytes(&bytes, LoadOptions::default()).unwrap();
        prop_assert!(back.bit_eq(&m));
        prop_assert_eq!(back.metadata(), m.metadata());
        prop_assert_eq!(to_bytes(&back, SaveOptions::default()).unwrap(), bytes);
    }

    #[test]
    fn sparse_encoding_round_trips(m in tensor_map()) {
        let tau = TaskVector::new(m);
        let s = sparsify(&tau);
        let bytes = to_bytes(&codec::sparse_to_map(&s), SaveOptions::default()).unwrap();
        let loaded = codec::sparse_from_map(&from_bytes(&bytes, LoadOptions::default()).unwrap()).unwrap();
        prop_assert_eq!(&loaded, &s);
        prop_assert!(densify(&loaded).bit_eq(&tau));
    }

    #[test]
    fn truncation_is_rejected(m in tensor_map(), cut in 1usize..64) {
        let bytes = to_bytes(&m, SaveOptions::default()).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(from_bytes(&bytes[..keep], LoadOptions::default()).is_err());
    }
}
