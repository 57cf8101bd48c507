mod common;

use common::{brute_force_kept, random_prefix, straight_line, tiny_config};
use fpt_core::decode::{combine_multi, combine_single, generate, top_p_filter, Channel, ChannelPrefixes, DecodeParams, Mode};
use fpt_core::eval::continuation_logprobs;
use fpt_core::model::LanguageModel;
use proptest::prelude::*;

fn logits(vocab: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, vocab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn top_p_matches_brute_force(z in (2usize..40).prop_flat_map(logits), p in 0.01f64..=1.0) {
        let f = top_p_filter(&z, p).unwrap();
        prop_assert_eq!(&f.kept, &brute_force_kept(&z, p));
        for (t, (&got, &logit)) in f.values.iter().zip(&z).enumerate() {
            let want = if f.kept.binary_search(&t).is_ok() { logit } else { f64::NEG_INFINITY };
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn nucleus_grows_with_p(z in (2usize..40).prop_flat_map(logits), p in 0.01f64..0.99, dp in 0.0f64..0.5) {
        let small = top_p_filter(&z, p).unwrap().kept;
        let large = top_p_filter(&z, (p + dp).min(1.0)).unwrap().kept;
        prop_assert!(small.iter().all(|t| large.contains(t)));
    }

    #[test]
    fn single_channel_is_a_distribution_on_the_nucleus(
        (zs, zg) in (2usize..40).prop_flat_map(|v| (logits(v), logits(v))),
        alpha in 1.0f64..4.0,
        p in 0.05f64..=1.0,
    ) {
        let q = combine_single(&zs, &zg, alpha, p).unwrap();
        let kept = top_p_filter(&zs, p).unwrap().kept;
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (t, v) in q.iter().enumerate() {
            if kept.binary_search(&t).is_err() {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn multi_matches_straight_line(
        chans in (2usize..30).prop_flat_map(|v| prop::collection::vec((logits(v), logits(v), 1.0f64..3.0), 1..4)),
        raw_weights in prop::collection::vec(0.1f64..2.0, 4),
        p in 0.05f64..=1.0,
    ) {
        let weights = &raw_weights[..chans.len()];
        let c: Vec<Channel> = chans.iter().map(|(z, g, a)| Channel { specific: z, general: g, alpha: *a }).collect();
        let got = combine_multi(&c, p, Some(weights)).unwrap();
        let want = straight_line(&chans, weights, p);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}

fn tiny_model() -> LanguageModel {
    LanguageModel::new(tiny_config(5)).unwrap()
}

#[test]
fn unit_alpha_collapses_modes_onto_specific_only() {
    let model = tiny_model();
    let spec = random_prefix(&model.config, 3, 1);
    let genl = random_prefix(&model.config, 3, 2);
    let channels = [ChannelPrefixes { attribute: "A", specific: &spec, general: Some(&genl) }];
    for seed in 0..100 {
        let run = |mode| {
            let p = DecodeParams { mode, alpha: 1.0, top_p: 0.9, max_new_tokens: 8, seed, ..Default::default() };
            generate(&model, &channels, &[0, 5, 6], &p, None).unwrap().tokens
        };
        let reference = run(Mode::SpecificOnly);
        assert_eq!(run(Mode::Fpt), reference);
        assert_eq!(run(Mode::AblationFrozenBase), reference);
    }
}

#[test]
fn base_only_ignores_prefixes_and_matches_empty_prefix() {
    let model = tiny_model();
    let spec = random_prefix(&model.config, 3, 1);
    let empty = fpt_core::model::PrefixKv::empty();
    for seed in 0..20 {
        let p = DecodeParams { mode: Mode::BaseOnly, top_p: 0.9, max_new_tokens: 8, seed, ..Default::default() };
        let a = generate(&model, &[], &[0, 5], &p, None).unwrap();
        let chans = [ChannelPrefixes { attribute: "A", specific: &spec, general: None }];
        let b = generate(&model, &chans, &[0, 5], &p, None).unwrap();
        let q = DecodeParams { mode: Mode::SpecificOnly, ..p.clone() };
        let c = generate(&model, &[ChannelPrefixes { attribute: "A", specific: &empty, general: None }], &[0, 5], &q, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens, c.tokens);
    }
}

#[test]
fn incremental_scores_match_post_hoc_scores() {
    let model = tiny_model();
    let scorer = LanguageModel::new(tiny_config(8)).unwrap();
    let spec = random_prefix(&model.config, 3, 1);
    let genl = random_prefix(&model.config, 3, 2);
    let prompt = [0, 4, 9];
    for seed in 0..10 {
        let p = DecodeParams { mode: Mode::Fpt, alpha: 2.0, max_new_tokens: 10, seed, ..Default::default() };
        let chans = [ChannelPrefixes { attribute: "A", specific: &spec, general: Some(&genl) }];
        let g = generate(&model, &chans, &prompt, &p, Some(&scorer)).unwrap();
        let post = continuation_logprobs(&scorer, &prompt, &g.tokens).unwrap();
        let inc = g.eval_logprobs.unwrap();
        assert_eq!(inc.len(), post.len());
        for (a, b) in inc.iter().zip(&post) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn same_seed_same_tokens() {
    let model = tiny_model();
    let spec = random_prefix(&model.config, 3, 1);
    let genl = random_prefix(&model.config, 3, 2);
    let chans = [ChannelPrefixes { attribute: "A", specific: &spec, general: Some(&genl) }];
    let p = DecodeParams { mode: Mode::Fpt, max_new_tokens: 12, seed: 9, ..Default::default() };
    let a = generate(&model, &chans, &[0, 3], &p, None).unwrap();
    let b = generate(&model, &chans, &[0, 3], &p, None).unwrap();
    assert_eq!(a, b);
}
