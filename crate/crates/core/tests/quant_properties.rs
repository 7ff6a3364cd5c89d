use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoedit_core::editor::{edit, CovarianceEstimate, EditRequest, LrSchedule, PrefixSet, ZOConfig};
use zoedit_core::model::{forward, names, ModelBundle, ModelConfig, TapPosition, TapRequest, TapSite, ValueOverride};
use zoedit_core::quant::{
    calibrate, quantize_model, quantize_tensor, round_trip_error, scale_fingerprint, MixedPrecisionPolicy,
};
use zoedit_core::TokenId;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        d_mlp: 32,
        n_heads: 2,
        vocab_size: 13,
        norm_epsilon: 1e-5,
        max_seq_len: 12,
        bos_token: Some(0),
    }
}

fn corpus(seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..6).map(|_| (0..10).map(|_| rng.random_range(0..13)).collect()).collect()
}

fn quantized(seed: u64, layer: usize) -> (ModelBundle, ModelBundle) {
    let m = ModelBundle::random(config(), seed, 0.5).unwrap();
    let stats = calibrate(&m, &corpus(seed)).unwrap();
    let q = quantize_model(&m, &stats, &MixedPrecisionPolicy::for_edit_layer(layer)).unwrap();
    (m, q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_within_half_a_step(data in prop::collection::vec(-1e3f32..1e3, 1..200), shrink in 1e-6f32..1.0) {
        let data: Vec<f32> = data.iter().map(|x| x * shrink).collect();
        let original = zoedit_core::tensor::Tensor::f32(vec![data.len()], data.clone()).unwrap();
        let q = quantize_tensor(vec![data.len()], &data);
        let (err, scale) = round_trip_error(&original, &q).unwrap();
        prop_assert!(err <= scale / 2.0 * (1.0 + 1e-12), "{err} > {scale}/2");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_quantized_tensor_respects_the_bound(seed in 0u64..500, layer in 0usize..3) {
        let (m, q) = quantized(seed, layer);
        let mut n = 0;
        for (name, t) in q.tensors() {
            let original = m.tensor(name).unwrap();
            match round_trip_error(original, t) {
                Some((err, scale)) => {
                    n += 1;
                    prop_assert!(err <= scale / 2.0 * (1.0 + 1e-12), "{name}: {err} vs {scale}");
                }
                None => prop_assert_eq!(original, t),
            }
        }
        prop_assert!(n > 0);
    }

    #[test]
    fn island_passes_the_value_through_unquantized(seed in 0u64..500, layer in 0usize..3, mu in 1e-9f64..1e-3) {
        let (m, q) = quantized(seed, layer);
        for name in [names::up_proj(layer), names::down_proj(layer)] {
            prop_assert!(!q.tensor(&name).unwrap().is_quantized());
            prop_assert_eq!(q.tensor(&name), m.tensor(&name));
        }
        let toks: Vec<TokenId> = vec![0, 3, 5, 7, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0f64..1.0)).collect();
        let tap = TapRequest { layer, site: TapSite::MlpOutput, position: TapPosition::Index(3) };
        for i in 0..3 {
            let mut w = v.clone();
            w[i] += mu;
            let ov = ValueOverride { layer, position: 3, vector: w.clone() };
            let out = forward(&q, &toks, &[tap], Some(&ov), None).unwrap();
            prop_assert_eq!(out.tap(&tap).unwrap(), w.as_slice());
        }
    }
}

#[test]
fn scales_do_not_move_during_an_edit() {
    let (_, q) = quantized(3, 1);
    let before = scale_fingerprint(&q);
    let request = EditRequest {
        subject: vec![4, 5],
        fact_prompt: vec![4, 5, 6],
        target: vec![7],
        preservation_prompt: vec![9, 4, 5],
        edit_layer: 1,
    };
    let prefixes = PrefixSet::new(vec![vec![1, 2], vec![3]], 0).unwrap();
    let config =
        ZOConfig { max_steps: 8, check_period: 4, lr_schedule: LrSchedule::Static { lr: 0.5 }, ..ZOConfig::default() };
    let (edited, report) = edit(&q, &request, &prefixes, &config, &CovarianceEstimate::identity(32)).unwrap();
    assert_eq!(report.scale_fingerprint, Some(before));
    assert_eq!(scale_fingerprint(&edited), before);
    assert_eq!(edited.quant(), q.quant());
    for (name, t) in q.tensors() {
        if name != names::down_proj(1) {
            assert_eq!(edited.tensor(name), Some(t), "{name}");
        }
    }
}
