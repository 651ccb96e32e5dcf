mod support;

use proptest::prelude::*;
use tcv2_core::data::{TaskRegistry, TaskSpec};
use tcv2_core::model::{Activation, EncoderConfig, HeadInit, ModelConfig, MultiTaskModel};
use tcv2_core::pooling::{pool_attention, AttentionPoolParams};
use tcv2_core::rng::stream;
use tcv2_core::tensor::{DenseTensor, ParamStore};

use support::{random_matrix, random_model, scalar_attention_pool, scalar_model_logits};

fn bag_strategy(max_n: usize, d: usize) -> impl Strategy<Value = DenseTensor> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| DenseTensor::matrix(n, d, v).unwrap())
    })
}

fn pool(d: usize, heads: usize, att: usize, seed: u64) -> (ParamStore, AttentionPoolParams) {
    let mut store = ParamStore::new();
    let p = AttentionPoolParams::init(&mut store, "pool", d, heads, att, &mut stream(seed, &[])).unwrap();
    (store, p)
}

#[test]
fn small_bag_matches_scalar_formula() {
    let (store, p) = pool(4, 2, 3, 1);
    let bag = random_matrix(&mut stream(2, &[]), 5, 4, 1.0);
    let (slide, map) = pool_attention(&store, &p, &bag).unwrap();
    let (ref_slide, ref_w) = scalar_attention_pool(&store, &p, &bag);
    for (a, b) in slide.values().iter().zip(&ref_slide) {
        assert!((a - b).abs() < 1e-12);
    }
    for (h, w) in ref_w.iter().enumerate() {
        for (a, b) in map.head(h).iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_built_model_matches_scalar_forward() {
    let registry = TaskRegistry::new(vec![TaskSpec::multiclass("t", 3)]).unwrap();
    let mut cfg = ModelConfig::new(EncoderConfig {
        input_width: 2,
        hidden_widths: vec![2],
        output_width: 2,
        activation: Activation::Tanh,
    });
    cfg.heads = 2;
    cfg.att_dim = 2;
    cfg.head_init = HeadInit::Uniform;
    let mut model = MultiTaskModel::new(cfg, registry, 3).unwrap();
    for layer in ["encoder.layer0.weight", "encoder.layer1.weight"] {
        let id = model.store().lookup(layer).unwrap();
        *model.store_mut().get_mut(id).value_mut() = DenseTensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    let bag = DenseTensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let (logits, _) = model.predict("t", &bag).unwrap();
    for (a, b) in logits.values().iter().zip(scalar_model_logits(&model, "t", &bag)) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_distributions(bag in bag_strategy(24, 5), seed in any::<u64>()) {
        let (store, p) = pool(5, 8, 4, seed);
        let (_, map) = pool_attention(&store, &p, &bag).unwrap();
        for h in 0..8 {
            let w = map.head(h);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant(bag in bag_strategy(24, 4), seed in any::<u64>(), shift in 0usize..24) {
        let (store, p) = pool(4, 8, 3, seed);
        let n = bag.rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|k| bag.row((k + shift) % n).to_vec()).collect();
        let (a, _) = pool_attention(&store, &p, &bag).unwrap();
        let (b, _) = pool_attention(&store, &p, &DenseTensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn identical_instances_give_uniform_weights(row in prop::collection::vec(-2.0f64..2.0, 3), n in 1usize..20, seed in any::<u64>()) {
        let (store, p) = pool(3, 8, 2, seed);
        let bag = DenseTensor::from_rows(&vec![row; n]).unwrap();
        let (slide, map) = pool_attention(&store, &p, &bag).unwrap();
        let (single, _) = pool_attention(&store, &p, &DenseTensor::from_rows(&[bag.row(0).to_vec()]).unwrap()).unwrap();
        for h in 0..8 {
            prop_assert!(map.head(h).iter().all(|&w| (w - 1.0 / n as f64).abs() < 1e-12));
        }
        prop_assert!(slide.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn random_models_match_scalar_forward(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = stream(seed, &[]);
        let model = random_model(&mut rng, vec![TaskSpec::binary("a"), TaskSpec::multiclass("b", 4)], 3, 5);
        let bag = random_matrix(&mut rng, n, 3, 1.5);
        for task in ["a", "b"] {
            let (logits, _) = model.predict(task, &bag).unwrap();
            for (x, y) in logits.values().iter().zip(scalar_model_logits(&model, task, &bag)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
