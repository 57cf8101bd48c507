mod common;

use std::collections::BTreeMap;

use common::tiny_config;
use fpt_core::corpus::{AttributeSpec, CorpusConfig};
use fpt_core::eval::{
    aggregate, continuation_logprobs, perplexity, relevance, GenerationReport, ImplicitTarget, RunMeta, SampleRecord,
    REPORT_SCHEMA,
};
use fpt_core::decode::{DecodeParams, Mode};
use fpt_core::model::LanguageModel;
use fpt_core::numerics::Tensor;
use proptest::prelude::*;

fn sentiment() -> AttributeSpec {
    CorpusConfig::default().attribute("SENTIMENT").unwrap().clone()
}

fn records_strategy() -> impl Strategy<Value = Vec<SampleRecord>> {
    let attrs = CorpusConfig::default().attributes;
    prop::collection::vec(
        (prop::collection::vec(0usize..20, 1..12), prop::bool::ANY, prop::collection::vec(-5.0f64..0.0, 0..6), 0.0f64..1.0),
        1..30,
    )
    .prop_map(move |rows| {
        rows.into_iter()
            .enumerate()
            .map(|(index, (tokens, positive, eval_logprobs, seconds))| SampleRecord {
                index,
                prompt_index: index % 3,
                prompt: vec![0],
                targets: BTreeMap::from([("SENTIMENT".to_string(), if positive { "positive" } else { "negative" }.to_string())]),
                seed: index as u64,
                oracle: SampleRecord::classify(&tokens, &attrs),
                tokens,
                eval_logprobs,
                seconds,
            })
            .collect()
    })
}

fn implicit() -> ImplicitTarget {
    ImplicitTarget { attribute: "TOPIC".into(), value: "science".into(), arity: 2 }
}

fn meta() -> RunMeta {
    RunMeta {
        schema: REPORT_SCHEMA.into(),
        label: "t".into(),
        mode: Mode::Fpt,
        params: DecodeParams::default(),
        seeds: BTreeMap::new(),
        checkpoints: BTreeMap::new(),
        corpus_checksum: String::new(),
        prompts_checksum: String::new(),
        implicit: Some(implicit()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregates_survive_serialization(records in records_strategy()) {
        prop_assume!(records.iter().any(|r| !r.eval_logprobs.is_empty()));
        let report = GenerationReport::new(meta(), records).unwrap();
        let back = GenerationReport::from_jsonl(&report.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(&back, &report);
        prop_assert_eq!(back.content_checksum(), report.content_checksum());
    }

    #[test]
    fn aggregates_ignore_sample_order(records in records_strategy(), rot in 0usize..30) {
        let mut shuffled = records.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = aggregate(&records, Some(&implicit()));
        let b = aggregate(&shuffled, Some(&implicit()));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.relevance, &b.relevance);
                prop_assert_eq!(a.implicit_relevance, b.implicit_relevance);
                prop_assert_eq!(a.bias, b.bias);
                if let (Some(x), Some(y)) = (a.perplexity, b.perplexity) {
                    prop_assert!((x - y).abs() <= 1e-12 * x);
                }
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn relevance_is_bounded_and_order_free(samples in prop::collection::vec(prop::collection::vec(0usize..20, 0..10), 1..25)) {
        let spec = sentiment();
        let refs: Vec<&[usize]> = samples.iter().map(Vec::as_slice).collect();
        let r = relevance(&refs, &spec, "negative").unwrap();
        prop_assert!((0.0..=100.0).contains(&r));
        let rev: Vec<&[usize]> = refs.iter().rev().copied().collect();
        prop_assert_eq!(r, relevance(&rev, &spec, "negative").unwrap());
        let pos = relevance(&refs, &spec, "positive").unwrap();
        prop_assert!((r + pos - 100.0).abs() < 1e-9);
    }
}

#[test]
fn relevance_examples() {
    let spec = sentiment();
    let pos = &spec.markers[0];
    let neg = &spec.markers[1];
    let a = vec![pos[0], 50, pos[1]];
    let b = vec![neg[0], 50];
    let all: Vec<&[usize]> = vec![&a, &a, &a, &b];
    assert_eq!(relevance(&all, &spec, "positive").unwrap(), 75.0);
    assert_eq!(relevance(&all[..3], &spec, "positive").unwrap(), 100.0);
    assert_eq!(relevance(&all[..3], &spec, "negative").unwrap(), 0.0);
    assert!(relevance(&[], &spec, "positive").is_err());
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut m = LanguageModel::new(tiny_config(1)).unwrap();
    m.head_w = Tensor::zeros(m.head_w.shape());
    m.head_b = Tensor::zeros(m.head_b.shape());
    let p = perplexity(&[(&[0, 3], &[4, 5, 6]), (&[0], &[9])], &m).unwrap();
    assert!((p - m.config.vocab_size as f64).abs() < 1e-9);
}

#[test]
fn memorizing_model_has_unit_perplexity() {
    let config = fpt_core::model::ModelConfig { d_model: 24, ..tiny_config(1) };
    let (v, d) = (config.vocab_size, config.d_model);
    let mut m = LanguageModel::new(config).unwrap();
    // Blocks become the identity on the residual stream.
    for b in &mut m.blocks {
        for t in [&mut b.wo, &mut b.bo, &mut b.w2, &mut b.b2] {
            *t = Tensor::zeros(t.shape());
        }
    }
    m.pos_emb = Tensor::zeros(m.pos_emb.shape());
    m.tok_emb = Tensor::from_fn(&[v, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    // LN(e_t) is a fixed vector per token; route it to token t+1.
    let ln = |t: usize| -> Vec<f64> {
        let mean = 1.0 / d as f64;
        let var = mean * (1.0 - mean);
        (0..d).map(|j| (if j == t { 1.0 } else { 0.0 } - mean) / (var + 1e-5).sqrt()).collect()
    };
    m.head_w = Tensor::from_fn(&[d, v], |i| {
        let (j, out) = (i / v, i % v);
        if out == 0 { 0.0 } else { 20.0 * ln(out - 1)[j] }
    });
    m.head_b = Tensor::zeros(m.head_b.shape());
    let p = perplexity(&[(&[2], &[3, 4, 5, 6, 7])], &m).unwrap();
    assert!((p - 1.0).abs() < 1e-3, "{p}");
}

#[test]
fn perplexity_matches_per_token_summation() {
    let m = LanguageModel::new(tiny_config(4)).unwrap();
    let samples: Vec<(Vec<usize>, Vec<usize>)> =
        vec![(vec![0, 3], vec![5, 6, 1]), (vec![0], vec![2]), (vec![0, 9, 9], vec![16, 4, 4, 2]), (vec![0, 1], vec![7, 7]), (vec![0], vec![11, 12, 13])];
    let refs: Vec<(&[usize], &[usize])> = samples.iter().map(|(p, c)| (p.as_slice(), c.as_slice())).collect();
    let got = perplexity(&refs, &m).unwrap();
    let mut nll = 0.0;
    let mut n = 0;
    for (p, c) in &samples {
        for i in 0..c.len() {
            let ctx: Vec<usize> = p.iter().chain(&c[..i]).copied().collect();
            let (z, _) = m.forward(&ctx, None, None).unwrap();
            let row = z.row(ctx.len() - 1);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[c[i]];
            n += 1;
        }
    }
    let want = (nll / n as f64).exp();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert_eq!(continuation_logprobs(&m, &[0], &[]).unwrap(), Vec::<f64>::new());
}

#[test]
fn schema_mismatch_and_empty_reports_are_rejected() {
    assert!(matches!(GenerationReport::from_jsonl(""), Err(fpt_core::Error::Format(_))));
    let line = serde_json::to_string(&serde_json::json!({"record": "meta", "schema": "fpt-report/0"})).unwrap();
    assert!(matches!(GenerationReport::from_jsonl(&line), Err(fpt_core::Error::Format(_))));
}
