//! Synthetic attributed corpora and the marker-counting oracle classifier.
//!
//! Every sequence carries one value per attribute. Tokens are either markers
//! of an active attribute value or neutral tokens drawn from a fixed random
//! bigram chain. One attribute is explicit (sampled uniformly) and one is
//! implicit (sampled from a skewed distribution). The implicit value can also
//! modulate how densely explicit markers appear, which is how implicit content
//! leaks into explicit relevance. A set of register tokens marks text as
//! belonging to the fine-tuning domain without carrying any attribute.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Number of reserved ids at the bottom of the vocabulary.
pub const SPECIAL_TOKENS: usize = 2;

const MAX_RESAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    /// One marker-token set per value.
    pub markers: Vec<Vec<usize>>,
    /// Probability that a position emits a marker of this attribute.
    pub emission_rate: f64,
    /// Share of emitted markers drawn from the active value's set; the rest
    /// come from the other values' sets.
    #[serde(default = "full_purity")]
    pub purity: f64,
}

fn full_purity() -> f64 {
    1.0
}

impl AttributeSpec {
    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// Attribute-free tokens typical of the attributed domain. A document is
/// written in the register with probability `share`; register documents emit
/// a register token at each position with probability `rate`. The broad
/// pretraining distribution keeps only `pretraining_share` of its documents
/// in the register, so a base model knows the register but does not default
/// to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterSpec {
    pub tokens: Vec<usize>,
    pub rate: f64,
    pub share: f64,
    pub pretraining_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub attributes: Vec<AttributeSpec>,
    pub explicit: String,
    pub implicit: String,
    pub implicit_skew: Vec<f64>,
    /// Explicit-marker emission rate for each implicit value, replacing the
    /// explicit attribute's own rate when present.
    #[serde(default)]
    pub explicit_rate_by_implicit: Option<Vec<f64>>,
    /// Explicit-marker purity for each implicit value, replacing the
    /// explicit attribute's own purity when present.
    #[serde(default)]
    pub explicit_purity_by_implicit: Option<Vec<f64>>,
    #[serde(default)]
    pub register: Option<RegisterSpec>,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the neutral bigram table; keep it fixed across corpora that
    /// should share surface structure.
    pub backbone_seed: u64,
    /// Successors per neutral token in the bigram table.
    pub backbone_successors: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let markers = |start: usize| -> Vec<usize> { (start..start + 3).collect() };
        Self {
            vocab_size: 120,
            attributes: vec![
                AttributeSpec {
                    name: "SENTIMENT".into(),
                    values: vec!["positive".into(), "negative".into()],
                    markers: vec![markers(2), markers(5)],
                    emission_rate: 0.25,
                    purity: 0.75,
                },
                AttributeSpec {
                    name: "TOPIC".into(),
                    values: vec!["world".into(), "science".into()],
                    markers: vec![markers(8), markers(11)],
                    emission_rate: 0.1,
                    purity: 1.0,
                },
            ],
            explicit: "SENTIMENT".into(),
            implicit: "TOPIC".into(),
            implicit_skew: vec![0.1, 0.9],
            explicit_rate_by_implicit: Some(vec![0.35, 0.15]),
            explicit_purity_by_implicit: Some(vec![0.9, 0.58]),
            register: Some(RegisterSpec { tokens: vec![14, 15], rate: 0.15, share: 1.0, pretraining_share: 0.1 }),
            train_sequences: 8000,
            heldout_sequences: 800,
            min_len: 32,
            max_len: 64,
            backbone_seed: 17,
            backbone_successors: 24,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn attribute(&self, name: &str) -> Result<&AttributeSpec> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("unknown attribute {name}")))
    }

    /// Same vocabulary, markers and backbone with the implicit attribute
    /// unskewed and the register thinned: the broad distribution a base model
    /// is pretrained on.
    pub fn pretraining_variant(&self, seed: u64, train_sequences: usize) -> Self {
        let k = self.attribute(&self.implicit).map_or(2, |a| a.values.len());
        Self {
            implicit_skew: vec![1.0 / k as f64; k],
            register: self.register.clone().map(|r| RegisterSpec { share: r.pretraining_share, ..r }),
            train_sequences,
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("no attributes".into()));
        }
        let mut owner: BTreeMap<usize, &str> = BTreeMap::new();
        for a in &self.attributes {
            if a.values.len() < 2 {
                return Err(Error::Config(format!("attribute {} needs at least two values", a.name)));
            }
            if a.markers.len() != a.values.len() {
                return Err(Error::Config(format!("attribute {} needs one marker set per value", a.name)));
            }
            if !(a.emission_rate > 0.0 && a.emission_rate <= 1.0) {
                return Err(Error::Config(format!("attribute {} emission rate must be in (0,1]", a.name)));
            }
            if !(a.purity > 1.0 / a.values.len() as f64 && a.purity <= 1.0) {
                return Err(Error::Config(format!("attribute {} purity must exceed 1/|values| and be at most 1", a.name)));
            }
            for set in &a.markers {
                if set.is_empty() {
                    return Err(Error::Config(format!("attribute {} has an empty marker set", a.name)));
                }
                for &t in set {
                    if t < SPECIAL_TOKENS || t >= self.vocab_size {
                        return Err(Error::Config(format!("marker {t} of {} outside vocabulary", a.name)));
                    }
                    if let Some(prev) = owner.insert(t, &a.name) {
                        return Err(Error::Config(format!(
                            "marker sets overlap: token {t} shared by {prev} and {}",
                            a.name
                        )));
                    }
                }
            }
        }
        let names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate attribute {n}")));
            }
        }
        let explicit = self.attribute(&self.explicit)?;
        let implicit = self.attribute(&self.implicit)?;
        if self.explicit == self.implicit {
            return Err(Error::Config("explicit and implicit attribute must differ".into()));
        }
        if self.implicit_skew.len() != implicit.values.len()
            || self.implicit_skew.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.implicit_skew.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Config("implicit_skew must be a distribution over implicit values".into()));
        }
        let mut max_rate = self.attributes.iter().map(|a| a.emission_rate).sum::<f64>();
        if let Some(rates) = &self.explicit_rate_by_implicit {
            if rates.len() != implicit.values.len() || rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                return Err(Error::Config("explicit_rate_by_implicit needs one rate in (0,1] per implicit value".into()));
            }
            let peak = rates.iter().copied().fold(0.0, f64::max);
            max_rate += peak - explicit.emission_rate;
        }
        if let Some(purities) = &self.explicit_purity_by_implicit {
            let floor = 1.0 / explicit.values.len() as f64;
            if purities.len() != implicit.values.len() || purities.iter().any(|p| !(*p > floor && *p <= 1.0)) {
                return Err(Error::Config("explicit_purity_by_implicit needs one purity in (1/|values|, 1] per implicit value".into()));
            }
        }
        if let Some(r) = &self.register {
            if r.tokens.is_empty() || [r.rate, r.share, r.pretraining_share].iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Config("register needs tokens and a rate and shares in [0,1]".into()));
            }
            for &t in &r.tokens {
                if t < SPECIAL_TOKENS || t >= self.vocab_size {
                    return Err(Error::Config(format!("register token {t} outside vocabulary")));
                }
                if let Some(prev) = owner.insert(t, "register") {
                    return Err(Error::Config(format!("register token {t} is also used by {prev}")));
                }
            }
            max_rate += r.rate;
        }
        if max_rate > 1.0 {
            return Err(Error::Config("total marker and register emission rate exceeds 1".into()));
        }
        if self.neutral_tokens().len() < 2 {
            return Err(Error::Config("vocabulary leaves fewer than two neutral tokens".into()));
        }
        if self.backbone_successors == 0 {
            return Err(Error::Config("backbone_successors must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("invalid length range".into()));
        }
        Ok(())
    }

    /// Ids that are neither special, markers nor register tokens.
    pub fn neutral_tokens(&self) -> Vec<usize> {
        let mut used = vec![false; self.vocab_size];
        let markers = self.attributes.iter().flat_map(|a| a.markers.iter().flatten());
        for &t in markers.chain(self.register.iter().flat_map(|r| &r.tokens)) {
            if t < self.vocab_size {
                used[t] = true;
            }
        }
        (SPECIAL_TOKENS..self.vocab_size).filter(|&t| !used[t]).collect()
    }
}

/// Fixed random successor table over neutral tokens.
#[derive(Clone, Debug)]
pub struct Backbone {
    neutral: Vec<usize>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl Backbone {
    pub fn new(config: &CorpusConfig) -> Self {
        let neutral = config.neutral_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let successors = neutral
            .iter()
            .map(|_| {
                let picks: Vec<usize> =
                    rand::seq::index::sample(&mut rng, neutral.len(), config.backbone_successors.min(neutral.len())).into_vec();
                let weights: Vec<f64> = picks.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                picks.into_iter().zip(weights).map(|(p, w)| (p, w / total)).collect()
            })
            .collect();
        Self { neutral, successors }
    }

    pub fn neutral(&self) -> &[usize] {
        &self.neutral
    }

    fn next(&self, state: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.successors[state];
        for &(s, p) in row {
            acc += p;
            if u < acc {
                return s;
            }
        }
        row.last().unwrap().0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributedCorpus {
    pub config: CorpusConfig,
    /// Token ids, each sequence framed by [`BOS`] and [`EOS`].
    pub sequences: Vec<Vec<usize>>,
    /// Per-sequence attribute name → value.
    pub labels: Vec<BTreeMap<String, String>>,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl AttributedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.train.iter().map(|&i| self.sequences[i].as_slice())
    }

    pub fn heldout_sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.heldout.iter().map(|&i| self.sequences[i].as_slice())
    }

    pub fn label(&self, index: usize, attribute: &str) -> Option<&str> {
        self.labels[index].get(attribute).map(String::as_str)
    }

    /// Token text: one line of space-separated ids per sequence.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.meta.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        let meta = CorpusMeta {
            schema: CORPUS_SCHEMA.into(),
            config: self.config.clone(),
            labels: self.labels.clone(),
            train: self.train.clone(),
            heldout: self.heldout.clone(),
        };
        fs::write(dir.join(format!("{stem}.meta.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let text = fs::read_to_string(dir.join(format!("{stem}.txt")))?;
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.meta.json")))?)?;
        if meta.schema != CORPUS_SCHEMA {
            return Err(Error::Format(format!("corpus schema {} unsupported", meta.schema)));
        }
        let sequences = text
            .lines()
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|e| Error::Format(format!("bad token {t}: {e}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if sequences.len() != meta.labels.len() {
            return Err(Error::Format("corpus text and labels disagree in length".into()));
        }
        Ok(Self { config: meta.config, sequences, labels: meta.labels, train: meta.train, heldout: meta.heldout })
    }
}

pub const CORPUS_SCHEMA: &str = "fpt-corpus/1";

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    schema: String,
    config: CorpusConfig,
    labels: Vec<BTreeMap<String, String>>,
    train: Vec<usize>,
    heldout: Vec<usize>,
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Zero-weight tail entries are never chosen by the fallback.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws a corpus; deterministic under `config.seed`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<AttributedCorpus> {
    config.validate()?;
    let backbone = Backbone::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let explicit_idx = config.attributes.iter().position(|a| a.name == config.explicit).unwrap();
    let implicit_idx = config.attributes.iter().position(|a| a.name == config.implicit).unwrap();
    let total = config.train_sequences + config.heldout_sequences;
    let mut sequences = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..total {
        let active: Vec<usize> = config
            .attributes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if i == implicit_idx {
                    sample_index(&config.implicit_skew, &mut rng)
                } else {
                    rng.random_range(0..a.values.len())
                }
            })
            .collect();
        let coupled = |i: usize, by_implicit: &Option<Vec<f64>>, own: f64| match by_implicit {
            Some(v) if i == explicit_idx => v[active[implicit_idx]],
            _ => own,
        };
        let rates: Vec<(f64, f64)> = config
            .attributes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                (
                    coupled(i, &config.explicit_rate_by_implicit, a.emission_rate),
                    coupled(i, &config.explicit_purity_by_implicit, a.purity),
                )
            })
            .collect();
        let register = config.register.as_ref().filter(|r| rng.random::<f64>() < r.share);
        let mut attempt = 0;
        let seq = loop {
            let seq = draw_sequence(config, &backbone, &active, &rates, register, &mut rng);
            let consistent = config
                .attributes
                .iter()
                .zip(&active)
                .all(|(a, &v)| oracle_classify(&seq, a).0 == v);
            if consistent {
                break seq;
            }
            attempt += 1;
            if attempt >= MAX_RESAMPLES {
                return Err(Error::Config("could not draw an oracle-consistent sequence; raise emission rates or lengths".into()));
            }
        };
        sequences.push(seq);
        labels.push(
            config
                .attributes
                .iter()
                .zip(&active)
                .map(|(a, &v)| (a.name.clone(), a.values[v].clone()))
                .collect(),
        );
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut heldout = order[..config.heldout_sequences].to_vec();
    let mut train = order[config.heldout_sequences..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    Ok(AttributedCorpus { config: config.clone(), sequences, labels, train, heldout })
}

fn draw_sequence(
    config: &CorpusConfig,
    backbone: &Backbone,
    active: &[usize],
    rates: &[(f64, f64)],
    register: Option<&RegisterSpec>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let len = rng.random_range(config.min_len..=config.max_len);
    let mut seq = Vec::with_capacity(len + 2);
    seq.push(BOS);
    let mut state = rng.random_range(0..backbone.neutral.len());
    let mut first_neutral = true;
    for _ in 0..len {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut emitted = None;
        for (a, attr) in config.attributes.iter().enumerate() {
            let (rate, purity) = rates[a];
            acc += rate;
            if u < acc {
                let mut value = active[a];
                if purity < 1.0 && rng.random::<f64>() >= purity {
                    let other = rng.random_range(0..attr.values.len() - 1);
                    value = if other >= value { other + 1 } else { other };
                }
                let set = &attr.markers[value];
                emitted = Some(set[rng.random_range(0..set.len())]);
                break;
            }
        }
        if let (None, Some(r)) = (emitted, register) {
            if u < acc + r.rate {
                emitted = Some(r.tokens[rng.random_range(0..r.tokens.len())]);
            }
        }
        match emitted {
            Some(t) => seq.push(t),
            None => {
                if !first_neutral {
                    state = backbone.next(state, rng);
                }
                first_neutral = false;
                seq.push(backbone.neutral[state]);
            }
        }
    }
    seq.push(EOS);
    seq
}

/// Value with the most markers and its share of this attribute's markers.
/// Ties go to the lowest value index with confidence `1/|values|`.
pub fn oracle_classify(sequence: &[usize], attribute: &AttributeSpec) -> (usize, f64) {
    let counts = marker_counts(sequence, attribute);
    let total: usize = counts.iter().sum();
    let best = counts.iter().copied().max().unwrap_or(0);
    let winner = counts.iter().position(|&c| c == best).unwrap_or(0);
    let tied = counts.iter().filter(|&&c| c == best).count() > 1;
    if total == 0 || tied {
        (winner, 1.0 / attribute.values.len() as f64)
    } else {
        (winner, best as f64 / total as f64)
    }
}

pub fn marker_counts(sequence: &[usize], attribute: &AttributeSpec) -> Vec<usize> {
    let mut counts = vec![0; attribute.values.len()];
    for &t in sequence {
        for (v, set) in attribute.markers.iter().enumerate() {
            if set.contains(&t) {
                counts[v] += 1;
            }
        }
    }
    counts
}

/// Sequences labelled `attribute = value`, splits carried over.
pub fn subset(corpus: &AttributedCorpus, attribute: &str, value: &str) -> Result<AttributedCorpus> {
    let spec = corpus.config.attribute(attribute)?;
    if spec.value_index(value).is_none() {
        return Err(Error::Contract(format!("attribute {attribute} has no value {value}")));
    }
    let keep: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.label(i, attribute) == Some(value)).collect();
    let mut remap = vec![usize::MAX; corpus.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let pick = |ids: &[usize]| -> Vec<usize> {
        ids.iter().filter(|&&i| remap[i] != usize::MAX).map(|&i| remap[i]).collect()
    };
    Ok(AttributedCorpus {
        config: corpus.config.clone(),
        sequences: keep.iter().map(|&i| corpus.sequences[i].clone()).collect(),
        labels: keep.iter().map(|&i| corpus.labels[i].clone()).collect(),
        train: pick(&corpus.train),
        heldout: pick(&corpus.heldout),
    })
}

/// `count` prompts of `BOS` followed by `len` consecutive neutral tokens taken
/// from held-out sequences.
pub fn neutral_prompts(corpus: &AttributedCorpus, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let neutral: Vec<bool> = {
        let mut v = vec![false; corpus.config.vocab_size];
        for t in corpus.config.neutral_tokens() {
            v[t] = true;
        }
        v
    };
    let mut windows = Vec::new();
    for seq in corpus.heldout_sequences() {
        for start in 1..seq.len().saturating_sub(len) {
            let w = &seq[start..start + len];
            if w.iter().all(|&t| neutral[t]) {
                windows.push(w.to_vec());
            }
        }
    }
    windows.sort();
    windows.dedup();
    if windows.len() < count {
        return Err(Error::Contract(format!("only {} neutral windows of length {len}", windows.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, windows.len(), count).into_vec();
    Ok(picks
        .into_iter()
        .map(|i| std::iter::once(BOS).chain(windows[i].iter().copied()).collect())
        .collect())
}
