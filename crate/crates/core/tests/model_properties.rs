use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoedit_core::model::{
    build_prefix_cache, forward, log_softmax, ModelBundle, ModelConfig, TapPosition, TapRequest, TapSite, ValueOverride,
};
use zoedit_core::TokenId;

const VOCAB: u32 = 13;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_mlp: 32,
        n_heads: 2,
        vocab_size: VOCAB as usize,
        norm_epsilon: 1e-5,
        max_seq_len: 12,
        bos_token: None,
    }
}

fn vector(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.random_range(-1.0f64..1.0)).collect()
}

fn tokens() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(0..VOCAB, 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn override_does_not_reach_earlier_positions(
        seed in 0u64..1000,
        toks in tokens(),
        at in 0.0f64..1.0,
        layer in 0usize..2,
    ) {
        let m = ModelBundle::random(config(), seed, 0.5).unwrap();
        let t = ((toks.len() as f64 * at) as usize).min(toks.len() - 1);
        let ov = ValueOverride { layer, position: t, vector: vector(seed, 16, 3.0) };
        let base = forward(&m, &toks, &[], None, None).unwrap();
        let edited = forward(&m, &toks, &[], Some(&ov), None).unwrap();
        for p in 0..t {
            prop_assert_eq!(base.logits.row(p), edited.logits.row(p));
        }
    }

    #[test]
    fn later_tokens_do_not_reach_earlier_positions(seed in 0u64..1000, toks in tokens(), swap in 0..VOCAB) {
        let m = ModelBundle::random(config(), seed, 0.5).unwrap();
        let mut other = toks.clone();
        let t = toks.len() - 1;
        other[t] = swap;
        let a = forward(&m, &toks, &[], None, None).unwrap();
        let b = forward(&m, &other, &[], None, None).unwrap();
        for p in 0..t {
            prop_assert_eq!(a.logits.row(p), b.logits.row(p));
        }
    }

    #[test]
    fn cached_forward_matches_fresh_under_value_perturbation(
        seed in 0u64..1000,
        toks in tokens(),
        boundary in 0.0f64..1.0,
        mu in 1e-4f64..1.0,
    ) {
        let m = ModelBundle::random(config(), seed, 0.5).unwrap();
        let b = 1 + ((toks.len() - 1) as f64 * boundary) as usize % (toks.len() - 1);
        let cache = build_prefix_cache(&m, &toks[..b]).unwrap();
        let v = vector(seed, 16, 1.0);
        let u = vector(seed + 1, 16, 1.0);
        let pos = toks.len() - 1;
        for sign in [0.0, 1.0, -1.0] {
            let vector: Vec<f64> = v.iter().zip(&u).map(|(v, u)| v + sign * mu * u).collect();
            let ov = ValueOverride { layer: 1, position: pos, vector };
            let fresh = forward(&m, &toks, &[], Some(&ov), None).unwrap();
            let cached = forward(&m, &toks, &[], Some(&ov), Some(&cache)).unwrap();
            for p in b..toks.len() {
                let (x, y) = (fresh.logits_at(p).unwrap(), cached.logits_at(p).unwrap());
                for (x, y) in x.iter().zip(y.iter()) {
                    prop_assert!((x - y).abs() <= 1e-6, "position {p}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn log_softmax_normalizes_every_position(seed in 0u64..1000, toks in tokens(), std in 0.05f64..4.0) {
        let m = ModelBundle::random(config(), seed, std).unwrap();
        let out = forward(&m, &toks, &[], None, None).unwrap();
        for row in out.logits.rows() {
            let total: f64 = log_softmax(row).iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-5, "{total}");
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, toks in tokens(), layer in 0usize..2) {
        let m = ModelBundle::random(config(), seed, 0.5).unwrap();
        let twin = ModelBundle::random(config(), seed, 0.5).unwrap();
        let tap = TapRequest {
            layer,
            site: TapSite::MlpPostActivation,
            position: TapPosition::LastSubjectToken { start: 0, end: toks.len() },
        };
        let ov = ValueOverride { layer, position: toks.len() - 1, vector: vector(seed, 16, 1.0) };
        let a = forward(&m, &toks, &[tap], Some(&ov), None).unwrap();
        let b = forward(&twin, &toks, &[tap], Some(&ov), None).unwrap();
        prop_assert_eq!(&a.logits, &b.logits);
        prop_assert_eq!(&a.tapped, &b.tapped);
    }
}

#[test]
fn concurrent_forwards_agree() {
    let m = ModelBundle::random(config(), 7, 0.5).unwrap();
    let toks: Vec<TokenId> = vec![1, 4, 2, 8, 5, 7];
    let expected = forward(&m, &toks, &[], None, None).unwrap().logits;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| forward(&m, &toks, &[], None, None).unwrap().logits)).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    });
}
