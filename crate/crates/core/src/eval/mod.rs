//! Relevance, perplexity and bias metrics, generation reports and the
//! attribute-transfer comparison.

pub mod experiment;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{oracle_classify, AttributeSpec};
use crate::decode::{DecodeParams, Mode};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::numerics::kernels;

pub const REPORT_SCHEMA: &str = "fpt-report/1";

/// Percentage of samples whose oracle value for `attribute` is `target`.
pub fn relevance(samples: &[&[usize]], attribute: &AttributeSpec, target: &str) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("relevance of an empty sample set".into()));
    }
    let t = attribute
        .value_index(target)
        .ok_or_else(|| Error::Contract(format!("attribute {} has no value {target}", attribute.name)))?;
    let hits = samples.iter().filter(|s| oracle_classify(s, attribute).0 == t).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Distance of a relevance from the unbiased point of a binary attribute.
pub fn bias(relevance: f64) -> f64 {
    bias_k(relevance, 2)
}

/// Distance from the unbiased point `100/k` of a `k`-valued attribute.
pub fn bias_k(relevance: f64, k: usize) -> f64 {
    (relevance - 100.0 / k as f64).abs()
}

/// Log-probabilities of `continuation` under `model` given `prompt`.
pub fn continuation_logprobs(model: &LanguageModel, prompt: &[usize], continuation: &[usize]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::Contract("scoring needs a nonempty prompt".into()));
    }
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    let full: Vec<usize> = prompt.iter().chain(continuation).copied().collect();
    let (logits, _) = model.forward(&full[..full.len() - 1], None, None)?;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(prompt.len() - 1 + i);
            row[t] - kernels::log_sum_exp(row)
        })
        .collect())
}

/// `exp` of the mean continuation-token NLL. Samples with empty
/// continuations are skipped.
pub fn perplexity_from_logprobs<'l>(per_sample: impl IntoIterator<Item = &'l [f64]>) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for lp in per_sample {
        nll -= lp.iter().sum::<f64>();
        n += lp.len();
    }
    if n == 0 {
        return Err(Error::Contract("perplexity needs at least one continuation token".into()));
    }
    Ok((nll / n as f64).exp())
}

/// Perplexity of `(prompt, continuation)` pairs under `eval_model`, prompt excluded.
pub fn perplexity(samples: &[(&[usize], &[usize])], eval_model: &LanguageModel) -> Result<f64> {
    let lps = samples
        .iter()
        .map(|(p, c)| continuation_logprobs(eval_model, p, c))
        .collect::<Result<Vec<_>>>()?;
    perplexity_from_logprobs(lps.iter().map(Vec::as_slice))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCall {
    pub value: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub prompt_index: usize,
    pub prompt: Vec<usize>,
    pub targets: BTreeMap<String, String>,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub oracle: BTreeMap<String, OracleCall>,
    pub eval_logprobs: Vec<f64>,
    /// Wall time; excluded from content checksums.
    pub seconds: f64,
}

impl SampleRecord {
    pub fn classify(tokens: &[usize], attributes: &[AttributeSpec]) -> BTreeMap<String, OracleCall> {
        attributes
            .iter()
            .map(|a| {
                let (v, confidence) = oracle_classify(tokens, a);
                (a.name.clone(), OracleCall { value: a.values[v].clone(), confidence })
            })
            .collect()
    }
}

/// The implicit attribute and its dominant value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitTarget {
    pub attribute: String,
    pub value: String,
    pub arity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub label: String,
    pub mode: Mode,
    pub params: DecodeParams,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoints: BTreeMap<String, String>,
    pub corpus_checksum: String,
    pub prompts_checksum: String,
    pub implicit: Option<ImplicitTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema: String,
    pub samples: usize,
    /// Per targeted attribute: % of samples whose oracle value equals the sample's target.
    pub relevance: BTreeMap<String, f64>,
    pub implicit_relevance: Option<f64>,
    pub bias: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_seconds: f64,
}

/// Aggregates derived from per-sample records only.
pub fn aggregate(records: &[SampleRecord], implicit: Option<&ImplicitTarget>) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Format("report holds no samples".into()));
    }
    let n = records.len() as f64;
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for (attr, target) in &r.targets {
            *counts.entry(attr.clone()).or_default() += 1;
            let got = r.oracle.get(attr).ok_or_else(|| Error::Format(format!("record {} lacks oracle {attr}", r.index)))?;
            *hits.entry(attr.clone()).or_default() += usize::from(&got.value == target);
        }
    }
    let relevance = counts.iter().map(|(a, &c)| (a.clone(), 100.0 * hits[a] as f64 / c as f64)).collect();
    let implicit_relevance = implicit
        .map(|imp| -> Result<f64> {
            let mut h = 0usize;
            for r in records {
                let got = r.oracle.get(&imp.attribute).ok_or_else(|| Error::Format("missing implicit oracle".into()))?;
                h += usize::from(got.value == imp.value);
            }
            Ok(100.0 * h as f64 / n)
        })
        .transpose()?;
    let bias = implicit.zip(implicit_relevance).map(|(imp, r)| bias_k(r, imp.arity));
    let perplexity = if records.iter().all(|r| r.eval_logprobs.is_empty()) {
        None
    } else {
        Some(perplexity_from_logprobs(records.iter().map(|r| r.eval_logprobs.as_slice()))?)
    };
    let mean_seconds = records.iter().map(|r| r.seconds).sum::<f64>() / n;
    Ok(Aggregate { schema: REPORT_SCHEMA.into(), samples: records.len(), relevance, implicit_relevance, bias, perplexity, mean_seconds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub meta: RunMeta,
    pub records: Vec<SampleRecord>,
    pub aggregate: Aggregate,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Meta(RunMeta),
    Sample(SampleRecord),
    Aggregate(Aggregate),
}

impl GenerationReport {
    pub fn new(meta: RunMeta, records: Vec<SampleRecord>) -> Result<Self> {
        let aggregate = aggregate(&records, meta.implicit.as_ref())?;
        Ok(Self { meta, records, aggregate })
    }

    /// JSON Lines: one metadata line, one line per sample, one aggregate line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Meta(self.meta.clone()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Sample(r.clone()))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Line::Aggregate(self.aggregate.clone()))?);
        out.push('\n');
        Ok(out)
    }

    /// Parses a report and checks its aggregate against the records.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut meta = None;
        let mut records = Vec::new();
        let mut agg = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            if let Some(s) = v.get("schema").and_then(|s| s.as_str()) {
                if s != REPORT_SCHEMA {
                    return Err(Error::Format(format!("report schema {s} unsupported (expected {REPORT_SCHEMA})")));
                }
            }
            match serde_json::from_value(v).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))? {
                Line::Meta(m) => meta = Some(m),
                Line::Sample(r) => records.push(r),
                Line::Aggregate(a) => agg = Some(a),
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("report lacks a metadata record".into()))?;
        let report = Self::new(meta, records)?;
        if let Some(a) = agg {
            if a != report.aggregate {
                return Err(Error::Format("stored aggregate disagrees with the sample records".into()));
            }
        }
        Ok(report)
    }

    /// SHA-256 of the report with wall-time fields zeroed.
    pub fn content_checksum(&self) -> String {
        let mut copy = self.clone();
        copy.records.iter_mut().for_each(|r| r.seconds = 0.0);
        copy.aggregate.mean_seconds = 0.0;
        let text = copy.to_jsonl().expect("report serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// One row of an attribute-transfer comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub label: String,
    pub mode: Mode,
    pub desired_relevance: f64,
    pub implicit_relevance: f64,
    pub perplexity: Option<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub desired_attribute: String,
    pub implicit: ImplicitTarget,
    pub rows: Vec<TransferRow>,
    /// Some pair of rows shows higher implicit relevance with lower desired relevance.
    pub signature: bool,
}

/// Whether `a` and `b` trade desired relevance against implicit relevance.
pub fn transfer_signature(a: (f64, f64), b: (f64, f64)) -> bool {
    let ((da, ia), (db, ib)) = (a, b);
    (ia > ib && da < db) || (ib > ia && db < da)
}

pub fn attribute_transfer_report(reports: &[&GenerationReport], desired_attribute: &str) -> Result<TransferTable> {
    if reports.len() < 2 {
        return Err(Error::Contract("attribute transfer needs at least two reports".into()));
    }
    let first = &reports[0].meta;
    let implicit = first.implicit.clone().ok_or_else(|| Error::Contract("reports carry no implicit attribute".into()))?;
    for r in reports {
        let m = &r.meta;
        if m.corpus_checksum != first.corpus_checksum
            || m.prompts_checksum != first.prompts_checksum
            || m.params.seed != first.params.seed
            || m.implicit.as_ref() != Some(&implicit)
        {
            return Err(Error::Contract(format!("report {} was not produced under the same corpus, prompts and seeds", m.label)));
        }
    }
    let rows = reports
        .iter()
        .map(|r| {
            let a = &r.aggregate;
            Ok(TransferRow {
                label: r.meta.label.clone(),
                mode: r.meta.mode,
                desired_relevance: *a
                    .relevance
                    .get(desired_attribute)
                    .ok_or_else(|| Error::Contract(format!("report {} never targets {desired_attribute}", r.meta.label)))?,
                implicit_relevance: a.implicit_relevance.expect("implicit target present"),
                perplexity: a.perplexity,
                bias: a.bias.expect("implicit target present"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let signature = rows.iter().enumerate().any(|(i, a)| {
        rows[i + 1..]
            .iter()
            .any(|b| transfer_signature((a.desired_relevance, a.implicit_relevance), (b.desired_relevance, b.implicit_relevance)))
    });
    Ok(TransferTable { desired_attribute: desired_attribute.into(), implicit, rows, signature })
}

impl TransferTable {
    /// Plain-text table in the column order Relevance, Perplexity, Bias.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>10} {:>10} {:>8}",
            "run",
            "relevance",
            "perplexity",
            "bias",
            "implicit"
        );
        for r in &self.rows {
            let ppl = r.perplexity.map_or("-".to_string(), |p| format!("{p:.2}"));
            let _ = writeln!(
                out,
                "{:<28} {:>10.2} {:>10} {:>10.2} {:>8.2}",
                r.label, r.desired_relevance, ppl, r.bias, r.implicit_relevance
            );
        }
        let _ = writeln!(out, "attribute transfer signature: {}", if self.signature { "yes" } else { "no" });
        out
    }
}

/// Single-row rendering of one report.
pub fn render_report(report: &GenerationReport) -> String {
    let a = &report.aggregate;
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>10} {:>10} {:>10}", "run", "relevance", "perplexity", "bias");
    let rel = a.relevance.iter().map(|(k, v)| format!("{k}:{v:.2}")).collect::<Vec<_>>().join(",");
    let ppl = a.perplexity.map_or("-".to_string(), |p| format!("{p:.2}"));
    let bias = a.bias.map_or("-".to_string(), |b| format!("{b:.2}"));
    let _ = writeln!(out, "{:<28} {:>10} {:>10} {:>10}", report.meta.label, rel, ppl, bias);
    out
}

/// Mean wall seconds per call of `sample` over `n` calls after `warmup` unmeasured calls.
pub fn time_cost(mut sample: impl FnMut(usize) -> Result<()>, n: usize, warmup: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("time cost needs at least one sample".into()));
    }
    for i in 0..warmup {
        sample(i)?;
    }
    let start = Instant::now();
    for i in 0..n {
        sample(warmup + i)?;
    }
    Ok(start.elapsed().as_secs_f64() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> AttributeSpec {
        AttributeSpec {
            name: "S".into(),
            values: vec!["a".into(), "b".into()],
            markers: vec![vec![2, 3], vec![4, 5]],
            emission_rate: 0.3,
            purity: 1.0,
        }
    }

    #[test]
    fn relevance_counts() {
        let s = spec();
        let pure: Vec<&[usize]> = vec![&[2, 3, 9], &[3]];
        assert_eq!(relevance(&pure, &s, "a").unwrap(), 100.0);
        assert_eq!(relevance(&pure, &s, "b").unwrap(), 0.0);
        let mixed: Vec<&[usize]> = vec![&[2], &[3, 3, 4], &[2, 9], &[4, 5]];
        assert_eq!(relevance(&mixed, &s, "a").unwrap(), 75.0);
        assert!(relevance(&[], &s, "a").is_err());
        assert!(relevance(&pure, &s, "c").is_err());
    }

    #[test]
    fn bias_values() {
        assert_eq!(bias(50.0), 0.0);
        assert!((bias(90.64) - 40.64).abs() < 1e-12);
        assert_eq!(bias(12.5), 37.5);
        assert!((bias_k(25.0, 4)).abs() < 1e-12);
    }

    #[test]
    fn perplexity_of_logprobs() {
        let lp = [vec![(0.25f64).ln(); 3], vec![], vec![(0.25f64).ln()]];
        let p = perplexity_from_logprobs(lp.iter().map(Vec::as_slice)).unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        assert!(perplexity_from_logprobs([&[][..]]).is_err());
    }

    #[test]
    fn tradeoff_pair_flags_signature() {
        assert!(transfer_signature((81.95, 76.54), (71.94, 90.64)));
        assert!(!transfer_signature((81.95, 76.54), (81.95, 76.54)));
        assert!(!transfer_signature((90.0, 90.0), (80.0, 80.0)));
    }
}
