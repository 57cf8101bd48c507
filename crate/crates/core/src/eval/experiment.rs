//! End-to-end pipeline: pretrain base and eval models, train prefixes,
//! generate under each mode and collect reports.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationReport, ImplicitTarget, RunMeta, SampleRecord, REPORT_SCHEMA};
use crate::corpus::{generate_corpus, neutral_prompts, AttributedCorpus, CorpusConfig};
use crate::decode::{generate, measure_filtered_vocab, ChannelPrefixes, DecodeParams, Mode, VocabMeasurement};
use crate::error::{Error, Result};
use crate::model::{pretrain, LanguageModel, ModelConfig, PrefixKv, TrainHyper, TrainLog};
use crate::prefix::{train_general, train_specific, Prefix, PrefixHyper};

/// Seeds and sizes of the two pretrained language models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSetup {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    /// Sequences in each pretraining corpus.
    pub pretrain_sequences: usize,
    pub base_seed: u64,
    pub eval_seed: u64,
}

impl Default for LmSetup {
    fn default() -> Self {
        Self {
            model: ModelConfig { n_layers: 2, d_model: 64, d_ff: 256, ..Default::default() },
            hyper: TrainHyper { steps: 4500, batch_size: 16, ..Default::default() },
            pretrain_sequences: 8000,
            base_seed: 101,
            eval_seed: 202,
        }
    }
}

/// Derives the base and eval model settings from one seed per model; the
/// two models differ in corpus draw, initialization and batch order.
pub fn lm_settings(setup: &LmSetup, corpus: &CorpusConfig, seed: u64) -> (CorpusConfig, ModelConfig, TrainHyper) {
    let data = corpus.pretraining_variant(seed, setup.pretrain_sequences);
    let model = ModelConfig { seed, vocab_size: corpus.vocab_size, ..setup.model.clone() };
    let hyper = TrainHyper { seed, ..setup.hyper.clone() };
    (data, model, hyper)
}

/// Pretrains one language model on the unskewed variant of `corpus`.
pub fn pretrain_lm(setup: &LmSetup, corpus: &CorpusConfig, seed: u64) -> Result<(LanguageModel, TrainLog)> {
    let (data, model, hyper) = lm_settings(setup, corpus, seed);
    let data = generate_corpus(&data)?;
    pretrain(&data, LanguageModel::new(model)?, &hyper)
}

/// Worker count from `FPT_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("FPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `0..n` on up to `threads` workers, preserving order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..n).step_by(threads).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut per_worker = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    let mut iters: Vec<_> = per_worker.iter_mut().map(|v| v.drain(..)).collect();
    for i in 0..n {
        out.push(iters[i % threads].next().expect("worker output"));
    }
    Ok(out)
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(base: u64, job: usize, prompt: usize, sample: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(base ^ job as u64) ^ prompt as u64) ^ sample as u64)
}

pub fn corpus_checksum(corpus: &AttributedCorpus) -> String {
    hex::encode(Sha256::digest(corpus.to_text().as_bytes()))
}

pub fn prompts_checksum(prompts: &[Vec<usize>]) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(prompts).expect("prompts serialize")))
}

/// Dominant value of the corpus's implicit attribute.
pub fn implicit_target(config: &CorpusConfig) -> Result<ImplicitTarget> {
    let spec = config.attribute(&config.implicit)?;
    let (idx, _) = config
        .implicit_skew
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    Ok(ImplicitTarget { attribute: spec.name.clone(), value: spec.values[idx].clone(), arity: spec.values.len() })
}

/// Everything a generation run reads: models, corpus, prompts, prefixes.
pub struct Workbench<'a> {
    pub base: &'a LanguageModel,
    pub eval: Option<&'a LanguageModel>,
    pub corpus: &'a AttributedCorpus,
    pub prompts: &'a [Vec<usize>],
    /// Prefixes keyed by label (`ATTR=value` or `general`).
    pub prefixes: &'a BTreeMap<String, Prefix>,
    pub checkpoints: BTreeMap<String, String>,
}

/// One set of per-sample targets, in channel order.
pub type Targets = Vec<(String, String)>;

impl Workbench<'_> {
    fn prefix(&self, label: &str) -> Result<&PrefixKv> {
        self.prefixes
            .get(label)
            .map(|p| &p.kv)
            .ok_or_else(|| Error::Contract(format!("no trained prefix for {label}")))
    }

    fn channels<'s>(&'s self, targets: &'s Targets, mode: Mode) -> Result<Vec<ChannelPrefixes<'s>>> {
        if !mode.needs_specific() {
            return Ok(Vec::new());
        }
        let general = if mode.needs_general() { Some(self.prefix("general")?) } else { None };
        targets
            .iter()
            .map(|(a, v)| Ok(ChannelPrefixes { attribute: a, specific: self.prefix(&format!("{a}={v}"))?, general }))
            .collect()
    }

    /// Checks every prefix against the base model.
    pub fn verify(&self) -> Result<()> {
        self.prefixes.values().try_for_each(|p| p.check_base(self.base))
    }

    /// Generates `samples_per_prompt` continuations for every job and prompt.
    pub fn run(&self, label: &str, jobs: &[Targets], params: &DecodeParams, samples_per_prompt: usize) -> Result<GenerationReport> {
        params.validate()?;
        let attrs = &self.corpus.config.attributes;
        let per_job = self.prompts.len() * samples_per_prompt;
        let total = jobs.len() * per_job;
        let channels = jobs.iter().map(|t| self.channels(t, params.mode)).collect::<Result<Vec<_>>>()?;
        let records = parallel_map(total, thread_count(), |index| {
            let job = index / per_job;
            let prompt_index = (index % per_job) / samples_per_prompt;
            let j = index % samples_per_prompt;
            let seed = sample_seed(params.seed, job, prompt_index, j);
            let prompt = &self.prompts[prompt_index];
            let p = DecodeParams { seed, ..params.clone() };
            let start = Instant::now();
            let g = generate(self.base, &channels[job], prompt, &p, self.eval)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(SampleRecord {
                index,
                prompt_index,
                prompt: prompt.clone(),
                targets: jobs[job].iter().cloned().collect(),
                seed,
                oracle: SampleRecord::classify(&g.tokens, attrs),
                eval_logprobs: g.eval_logprobs.unwrap_or_default(),
                tokens: g.tokens,
                seconds,
            })
        })?;
        let meta = RunMeta {
            schema: REPORT_SCHEMA.into(),
            label: label.into(),
            mode: params.mode,
            params: params.clone(),
            seeds: BTreeMap::from([
                ("decode".into(), params.seed),
                ("corpus".into(), self.corpus.config.seed),
                ("base_model".into(), self.base.config.seed),
            ]),
            checkpoints: self.checkpoints.clone(),
            corpus_checksum: corpus_checksum(self.corpus),
            prompts_checksum: prompts_checksum(self.prompts),
            implicit: Some(implicit_target(&self.corpus.config)?),
        };
        GenerationReport::new(meta, records)
    }
}

/// Jobs targeting each value of `attribute` in turn.
pub fn single_attribute_jobs(config: &CorpusConfig, attribute: &str) -> Result<Vec<Targets>> {
    Ok(config.attribute(attribute)?.values.iter().map(|v| vec![(attribute.to_string(), v.clone())]).collect())
}

/// Every value combination of `attributes`, channels in the given order.
pub fn multi_attribute_jobs(config: &CorpusConfig, attributes: &[&str]) -> Result<Vec<Targets>> {
    let mut jobs: Vec<Targets> = vec![Vec::new()];
    for a in attributes {
        let spec = config.attribute(a)?;
        jobs = jobs
            .into_iter()
            .flat_map(|t| {
                spec.values.iter().map(move |v| {
                    let mut t = t.clone();
                    t.push((a.to_string(), v.clone()));
                    t
                })
            })
            .collect();
    }
    Ok(jobs)
}

/// Trains the general prefix and one specific prefix per listed attribute value.
pub fn train_prefixes(
    base: &LanguageModel,
    corpus: &AttributedCorpus,
    targets: &[(String, String)],
    hyper: &PrefixHyper,
) -> Result<BTreeMap<String, Prefix>> {
    let labels: Vec<Option<&(String, String)>> = std::iter::once(None).chain(targets.iter().map(Some)).collect();
    let trained = parallel_map(labels.len(), thread_count(), |i| {
        let h = PrefixHyper { seed: mix_seed(hyper.seed ^ i as u64), ..hyper.clone() };
        match labels[i] {
            None => train_general(base, corpus, &h),
            Some((a, v)) => train_specific(base, corpus, a, v, &h),
        }
    })?;
    Ok(trained.into_iter().map(|p| (p.label(), p)).collect())
}

/// Puts the attribute with the largest mean filtered vocabulary first;
/// the remaining channels keep their relative order.
pub fn order_channels(
    base: &LanguageModel,
    prefixes: &BTreeMap<String, Prefix>,
    targets: &Targets,
    prompts: &[Vec<usize>],
    top_p: f64,
) -> Result<(Targets, VocabMeasurement)> {
    let kvs = targets
        .iter()
        .map(|(a, v)| {
            prefixes
                .get(&format!("{a}={v}"))
                .map(|p| (a.as_str(), &p.kv))
                .ok_or_else(|| Error::Contract(format!("no trained prefix for {a}={v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let measurement = measure_filtered_vocab(base, &kvs, prompts, top_p)?;
    let mut ordered = targets.clone();
    let first = ordered.iter().position(|(a, _)| *a == measurement.first_attribute).expect("measured attribute is a target");
    let head = ordered.remove(first);
    ordered.insert(0, head);
    Ok((ordered, measurement))
}

/// Prompts for a corpus: neutral held-out windows.
pub fn prompts_for(corpus: &AttributedCorpus, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    neutral_prompts(corpus, count, len, seed)
}
