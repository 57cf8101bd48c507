//! Logits manipulation and ancestral sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, PastState, PrefixKv};
use crate::numerics::kernels;

/// Top-p filtered logits: kept entries unchanged, all others `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredLogits {
    pub values: Vec<f64>,
    /// Kept token ids in ascending order.
    pub kept: Vec<usize>,
}

impl FilteredLogits {
    pub fn is_kept(&self, token: usize) -> bool {
        self.values[token].is_finite()
    }
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Contract("empty logits".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("logits must be finite".into()));
    }
    Ok(())
}

fn check_top_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("top_p {p} outside (0, 1]")));
    }
    Ok(())
}

/// Cumulative mass within this distance of `p` counts as reaching it, so
/// rounding in the softmax cannot pull in an extra token.
pub const TOP_P_SLACK: f64 = 1e-12;

/// Smallest probability-sorted set whose mass reaches `p`. The token that
/// crosses `p` is kept; equal probabilities order by lower id.
pub fn top_p_filter(logits: &[f64], p: f64) -> Result<FilteredLogits> {
    check_logits(logits)?;
    check_top_p(p)?;
    let mut probs = logits.to_vec();
    kernels::softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &t in &order {
        kept.push(t);
        mass += probs[t];
        if mass >= p - TOP_P_SLACK {
            break;
        }
    }
    kept.sort_unstable();
    let mut values = vec![f64::NEG_INFINITY; logits.len()];
    for &t in &kept {
        values[t] = logits[t];
    }
    Ok(FilteredLogits { values, kept })
}

/// One attribute channel's logits at a decoding step.
#[derive(Clone, Copy, Debug)]
pub struct Channel<'a> {
    pub specific: &'a [f64],
    pub general: &'a [f64],
    pub alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha {alpha} must be a finite value ≥ 1")));
    }
    Ok(())
}

/// Summed channel logits: channel 1 is restricted to its own top-p set,
/// later channels are unfiltered; each is scaled by its weight.
pub fn combined_logits(channels: &[Channel], top_p: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(first) = channels.first() else {
        return Err(Error::Contract("at least one channel is required".into()));
    };
    if let Some(w) = weights {
        if w.len() != channels.len() {
            return Err(Error::Contract(format!("{} weights for {} channels", w.len(), channels.len())));
        }
        if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::Contract("attribute weights must be positive".into()));
        }
    }
    let vocab = first.specific.len();
    for c in channels {
        if c.specific.len() != vocab || c.general.len() != vocab {
            return Err(Error::Shape("channel logits must share the vocabulary size".into()));
        }
        check_logits(c.specific)?;
        check_logits(c.general)?;
        check_alpha(c.alpha)?;
    }
    let filtered = top_p_filter(first.specific, top_p)?;
    let mut out = vec![0.0; vocab];
    for (i, c) in channels.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        for &t in &filtered.kept {
            out[t] += w * (c.alpha * c.specific[t] - (c.alpha - 1.0) * c.general[t]);
        }
    }
    for (t, v) in out.iter_mut().enumerate() {
        if !filtered.is_kept(t) {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(out)
}

/// `softmax(α·z̃_spec − (α−1)·z_genl)` over the top-p set of `z_spec`.
pub fn combine_single(z_specific: &[f64], z_general: &[f64], alpha: f64, top_p: f64) -> Result<Vec<f64>> {
    combine_multi(&[Channel { specific: z_specific, general: z_general, alpha }], top_p, None)
}

/// Weighted sum of channel combinations, softmaxed.
pub fn combine_multi(channels: &[Channel], top_p: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut z = combined_logits(channels, top_p, weights)?;
    if !kernels::softmax_in_place(&mut z) {
        return Err(Error::Contract("every token is masked".into()));
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fpt,
    SpecificOnly,
    AblationFrozenBase,
    BaseOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fpt, Mode::SpecificOnly, Mode::AblationFrozenBase, Mode::BaseOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fpt => "fpt",
            Mode::SpecificOnly => "specific_only",
            Mode::AblationFrozenBase => "ablation_frozen_base",
            Mode::BaseOnly => "base_only",
        }
    }

    pub fn needs_specific(self) -> bool {
        self != Mode::BaseOnly
    }

    pub fn needs_general(self) -> bool {
        self == Mode::Fpt
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: Mode,
    pub alpha: f64,
    /// Per-attribute α overriding `alpha`.
    #[serde(default)]
    pub alpha_overrides: BTreeMap<String, f64>,
    pub top_p: f64,
    /// Per-channel weights in channel order; `None` weighs every channel 1.
    #[serde(default)]
    pub attribute_weights: Option<Vec<f64>>,
    pub max_new_tokens: usize,
    #[serde(default = "default_stop")]
    pub stop_at_eos: bool,
    pub seed: u64,
}

fn default_stop() -> bool {
    true
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: Mode::Fpt,
            alpha: 1.5,
            alpha_overrides: BTreeMap::new(),
            top_p: 0.8,
            attribute_weights: None,
            max_new_tokens: 16,
            stop_at_eos: true,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha).map_err(|e| Error::Config(e.to_string()))?;
        for a in self.alpha_overrides.values() {
            check_alpha(*a).map_err(|e| Error::Config(e.to_string()))?;
        }
        check_top_p(self.top_p).map_err(|e| Error::Config(e.to_string()))?;
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha_for(&self, attribute: &str) -> f64 {
        self.alpha_overrides.get(attribute).copied().unwrap_or(self.alpha)
    }
}

/// Prefixes serving one attribute channel during generation.
#[derive(Clone, Copy, Debug)]
pub struct ChannelPrefixes<'a> {
    pub attribute: &'a str,
    pub specific: &'a PrefixKv,
    pub general: Option<&'a PrefixKv>,
}

/// One generated continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token under the scoring model.
    pub eval_logprobs: Option<Vec<f64>>,
}

/// Incremental decoding state of one forward stream.
struct Stream<'a> {
    model: &'a LanguageModel,
    prefix: Option<&'a PrefixKv>,
    past: Option<PastState>,
    logits: Vec<f64>,
}

impl<'a> Stream<'a> {
    fn start(model: &'a LanguageModel, prefix: Option<&'a PrefixKv>, prompt: &[usize]) -> Result<Self> {
        let mut s = Stream { model, prefix, past: None, logits: Vec::new() };
        s.feed(prompt)?;
        Ok(s)
    }

    fn feed(&mut self, tokens: &[usize]) -> Result<()> {
        let (logits, past) = match &self.past {
            None => self.model.forward(tokens, self.prefix, None)?,
            Some(p) => self.model.forward(tokens, None, Some(p))?,
        };
        self.logits = logits.row(tokens.len() - 1).to_vec();
        self.past = Some(past);
        Ok(())
    }
}

fn log_softmax_at(z: &[f64], t: usize) -> f64 {
    z[t] - kernels::log_sum_exp(z)
}

/// Ancestral sampling under `params.mode`. `channels[0]` is the filtered
/// channel. `scorer`, when given, scores each emitted token incrementally.
pub fn generate(
    model: &LanguageModel,
    channels: &[ChannelPrefixes],
    prompt: &[usize],
    params: &DecodeParams,
    scorer: Option<&LanguageModel>,
) -> Result<Generation> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must hold at least one token".into()));
    }
    let mode = params.mode;
    if mode.needs_specific() && channels.is_empty() {
        return Err(Error::Contract(format!("mode {mode} needs at least one attribute channel")));
    }
    if mode.needs_general() && channels.iter().any(|c| c.general.is_none()) {
        return Err(Error::Contract("mode fpt needs a general prefix for every channel".into()));
    }
    let longest_prefix = if mode.needs_specific() {
        channels.iter().flat_map(|c| [Some(c.specific), c.general]).flatten().map(|p| p.length).max().unwrap_or(0)
    } else {
        0
    };
    let needed = longest_prefix + prompt.len() + params.max_new_tokens - 1;
    if needed > model.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "prefix {longest_prefix} + prompt {} + {} new tokens exceed max_seq_len {}",
            prompt.len(),
            params.max_new_tokens,
            model.config.max_seq_len
        )));
    }
    if let Some(s) = scorer {
        if prompt.len() + params.max_new_tokens - 1 > s.config.max_seq_len {
            return Err(Error::Capacity("continuation exceeds the scoring model's max_seq_len".into()));
        }
    }

    let active: &[ChannelPrefixes] = if mode.needs_specific() { channels } else { &[] };
    let mut specific = active
        .iter()
        .map(|c| Stream::start(model, Some(c.specific), prompt))
        .collect::<Result<Vec<_>>>()?;
    let mut general = if mode == Mode::Fpt {
        active.iter().map(|c| Stream::start(model, c.general, prompt)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut base = match mode {
        Mode::AblationFrozenBase | Mode::BaseOnly => Some(Stream::start(model, None, prompt)?),
        _ => None,
    };
    let mut eval = scorer.map(|s| Stream::start(s, None, prompt)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tokens = Vec::with_capacity(params.max_new_tokens);
    let mut logprobs = scorer.map(|_| Vec::with_capacity(params.max_new_tokens));
    for step in 0..params.max_new_tokens {
        let probs = match mode {
            Mode::BaseOnly => {
                let b = base.as_ref().expect("base stream");
                let mut z = top_p_filter(&b.logits, params.top_p)?.values;
                kernels::softmax_in_place(&mut z);
                z
            }
            _ => {
                let chans: Vec<Channel> = specific
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let (general, alpha) = match mode {
                            Mode::Fpt => (general[i].logits.as_slice(), params.alpha_for(active[i].attribute)),
                            Mode::AblationFrozenBase => {
                                (base.as_ref().expect("base stream").logits.as_slice(), params.alpha_for(active[i].attribute))
                            }
                            _ => (s.logits.as_slice(), 1.0),
                        };
                        Channel { specific: &s.logits, general, alpha }
                    })
                    .collect();
                combine_multi(&chans, params.top_p, params.attribute_weights.as_deref())?
            }
        };
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Degenerate(e.to_string()))?;
        let tok = dist.sample(&mut rng);
        tokens.push(tok);
        if let (Some(e), Some(lp)) = (&eval, &mut logprobs) {
            lp.push(log_softmax_at(&e.logits, tok));
        }
        let done = (params.stop_at_eos && tok == EOS) || step + 1 == params.max_new_tokens;
        if done {
            break;
        }
        for s in specific.iter_mut().chain(general.iter_mut()).chain(base.iter_mut()).chain(eval.iter_mut()) {
            s.feed(&[tok])?;
        }
    }
    Ok(Generation { tokens, eval_logprobs: logprobs })
}

/// Filtered-vocabulary statistics of each channel at the first decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabMeasurement {
    pub top_p: f64,
    /// Raw kept sets, `kept_sets[attribute][prompt]`.
    pub kept_sets: BTreeMap<String, Vec<Vec<usize>>>,
    pub mean_size: BTreeMap<String, f64>,
    /// Mean |Ṽ_a ∩ Ṽ_b| keyed by `"a|b"`.
    pub overlap: BTreeMap<String, f64>,
    /// Mean of |Ṽ_a ∩ Ṽ_b| / |Ṽ_b| keyed by `"a|b"` (a over b).
    pub cover_ratio: BTreeMap<String, f64>,
    pub first_attribute: String,
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Statistics from already collected kept sets (one list per attribute, aligned by prompt).
pub fn summarize_kept_sets(kept_sets: BTreeMap<String, Vec<Vec<usize>>>, top_p: f64) -> Result<VocabMeasurement> {
    let n = kept_sets.values().next().map(Vec::len).unwrap_or(0);
    if n == 0 || kept_sets.values().any(|v| v.len() != n) {
        return Err(Error::Contract("kept sets must cover the same nonzero number of prompts".into()));
    }
    let mean_size: BTreeMap<String, f64> = kept_sets
        .iter()
        .map(|(a, sets)| (a.clone(), sets.iter().map(|s| s.len() as f64).sum::<f64>() / n as f64))
        .collect();
    let mut overlap = BTreeMap::new();
    let mut cover_ratio = BTreeMap::new();
    for (a, sa) in &kept_sets {
        for (b, sb) in &kept_sets {
            let key = format!("{a}|{b}");
            let inter: Vec<usize> = sa.iter().zip(sb).map(|(x, y)| intersection(x, y)).collect();
            overlap.insert(key.clone(), inter.iter().sum::<usize>() as f64 / n as f64);
            let cover = inter.iter().zip(sb).map(|(&i, y)| i as f64 / y.len() as f64).sum::<f64>() / n as f64;
            cover_ratio.insert(key, cover);
        }
    }
    let first_attribute = choose_first_attribute(&mean_size)?;
    Ok(VocabMeasurement { top_p, kept_sets, mean_size, overlap, cover_ratio, first_attribute })
}

/// Measures |Ṽ| of each channel's specific logits after every prompt.
pub fn measure_filtered_vocab(
    model: &LanguageModel,
    channels: &[(&str, &PrefixKv)],
    prompts: &[Vec<usize>],
    top_p: f64,
) -> Result<VocabMeasurement> {
    if prompts.is_empty() {
        return Err(Error::Contract("at least one prompt is required".into()));
    }
    let mut kept_sets = BTreeMap::new();
    for (attribute, prefix) in channels {
        let sets = prompts
            .iter()
            .map(|p| {
                let (z, _) = model.forward(p, Some(prefix), None)?;
                Ok(top_p_filter(z.row(p.len() - 1), top_p)?.kept)
            })
            .collect::<Result<Vec<_>>>()?;
        kept_sets.insert(attribute.to_string(), sets);
    }
    summarize_kept_sets(kept_sets, top_p)
}

/// Attribute with the largest mean filtered vocabulary; ties go to the
/// lexicographically first name.
pub fn choose_first_attribute(mean_sizes: &BTreeMap<String, f64>) -> Result<String> {
    let mut best: Option<(&String, f64)> = None;
    for (name, &size) in mean_sizes {
        if best.is_none_or(|(_, b)| size > b) {
            best = Some((name, size));
        }
    }
    best.map(|(n, _)| n.clone()).ok_or_else(|| Error::Contract("no attribute measurements".into()))
}
