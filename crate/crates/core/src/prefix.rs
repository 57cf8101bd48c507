//! Specific and general prefixes trained against a frozen base model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{subset, AttributedCorpus, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::train::{apply_step, clip_gradients, loss_and_gradients, mean_loss, sample_batch, LossGradients};
use crate::model::{LanguageModel, ModelConfig, PrefixKv};
use crate::numerics::{AdamW, AdamWConfig, Tensor};

pub const DEFAULT_PREFIX_LENGTH: usize = 10;

/// Sequences scored for the recorded final loss.
const FINAL_LOSS_SEQUENCES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixKind {
    Specific,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixHyper {
    pub length: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub clip_norm: Option<f64>,
    /// Prefix vectors receive no dropout; kept explicit in saved metadata.
    pub dropout: f64,
    /// Initialization tokens; defaults to the most frequent window of the training subset.
    pub init_tokens: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for PrefixHyper {
    fn default() -> Self {
        Self {
            length: DEFAULT_PREFIX_LENGTH,
            steps: 300,
            batch_size: 8,
            adamw: AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() },
            clip_norm: Some(1.0),
            dropout: 0.0,
            init_tokens: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixMeta {
    pub steps: usize,
    pub init_tokens: Vec<usize>,
    pub initial_loss: Option<f64>,
    /// Mean loss on the leading training sequences of the subset after training.
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
    pub hyper: Option<PrefixHyper>,
    pub subset_size: usize,
}

/// H_φ for one attribute value, or H_φ′ for the whole corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Prefix {
    pub kind: PrefixKind,
    pub attribute: Option<(String, String)>,
    pub kv: PrefixKv,
    pub base_checksum: String,
    pub metadata: PrefixMeta,
}

impl Prefix {
    pub fn length(&self) -> usize {
        self.kv.length
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.attribute) {
            (PrefixKind::General, Some(_)) => return Err(Error::Contract("general prefix cannot carry an attribute".into())),
            (PrefixKind::Specific, None) => return Err(Error::Contract("specific prefix needs an attribute".into())),
            _ => {}
        }
        if self.kv.is_empty() {
            return Err(Error::Contract("prefix length must be positive".into()));
        }
        if self.kv.tensors().any(|t| !t.is_finite() || t.shape()[0] != self.kv.length) {
            return Err(Error::Contract("prefix tensors must be finite with the declared length".into()));
        }
        Ok(())
    }

    /// Fails when `model` is not the base this prefix was trained against.
    pub fn check_base(&self, model: &LanguageModel) -> Result<()> {
        let actual = model.checksum();
        if actual != self.base_checksum {
            return Err(Error::Contract(format!(
                "prefix trained against base {} but model checksum is {actual}",
                self.base_checksum
            )));
        }
        Ok(())
    }

    /// Short label, e.g. `SENTIMENT=positive` or `general`.
    pub fn label(&self) -> String {
        match &self.attribute {
            Some((a, v)) => format!("{a}={v}"),
            None => "general".into(),
        }
    }

    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, (k, v)) in self.kv.keys.iter().zip(&self.kv.values).enumerate() {
            out.push((format!("layers.{l}.key"), k));
            out.push((format!("layers.{l}.value"), v));
        }
        out
    }

    pub fn checksum(&self) -> String {
        checkpoint::params_checksum(self.blocks().into_iter())
    }

    pub fn to_bytes(&self, config: &ModelConfig) -> Result<Vec<u8>> {
        let header = json!({
            "kind": "prefix",
            "prefix_kind": self.kind,
            "attribute": self.attribute.as_ref().map(|(a, v)| json!({"name": a, "value": v})),
            "length": self.kv.length,
            "model_config": config,
            "base_checksum": self.base_checksum,
            "metadata": self.metadata,
        });
        checkpoint::encode(header, &self.blocks())
    }

    pub fn save(&self, path: &Path, config: &ModelConfig) -> Result<()> {
        let bytes = self.to_bytes(config)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blocks) = checkpoint::decode(bytes)?;
        Self::from_parts(header, blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = checkpoint::read_file(path)?;
        Self::from_parts(header, blocks)
    }

    fn from_parts(header: Value, blocks: Vec<(String, Tensor)>) -> Result<Self> {
        if header.get("kind").and_then(Value::as_str) != Some("prefix") {
            return Err(Error::Format("checkpoint does not hold a prefix".into()));
        }
        let kind: PrefixKind = serde_json::from_value(header["prefix_kind"].clone())?;
        let attribute = match &header["attribute"] {
            Value::Null => None,
            a => Some((
                a["name"].as_str().ok_or_else(|| Error::Format("attribute name missing".into()))?.to_string(),
                a["value"].as_str().ok_or_else(|| Error::Format("attribute value missing".into()))?.to_string(),
            )),
        };
        let length = header["length"].as_u64().ok_or_else(|| Error::Format("prefix length missing".into()))? as usize;
        if !blocks.len().is_multiple_of(2) {
            return Err(Error::Format("prefix blocks must come in key/value pairs".into()));
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (l, pair) in blocks.chunks(2).enumerate() {
            if pair[0].0 != format!("layers.{l}.key") || pair[1].0 != format!("layers.{l}.value") {
                return Err(Error::Format(format!("unexpected prefix blocks {} / {}", pair[0].0, pair[1].0)));
            }
            keys.push(pair[0].1.clone());
            values.push(pair[1].1.clone());
        }
        let prefix = Prefix {
            kind,
            attribute,
            kv: PrefixKv { length, keys, values },
            base_checksum: header["base_checksum"].as_str().unwrap_or_default().to_string(),
            metadata: serde_json::from_value(header["metadata"].clone())?,
        };
        prefix.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(prefix)
    }
}

/// Prefix whose keys and values are the frozen model's activations for `tokens`.
pub fn init_from_tokens(model: &LanguageModel, tokens: &[usize], length: usize) -> Result<PrefixKv> {
    if tokens.len() != length || length == 0 {
        return Err(Error::Contract(format!("prefix of length {length} needs {length} tokens, got {}", tokens.len())));
    }
    let (_, past) = model.forward(tokens, None, None)?;
    let mut kv = past.to_prefix(model.config.d_model);
    kv.tensors_mut().for_each(|t| t.set_requires_grad(true));
    Ok(kv)
}

/// Most frequent length-`len` window over sequence bodies (markers of
/// sequence start and end excluded); ties go to the lexicographically
/// smallest window.
pub fn most_frequent_window<'s>(seqs: impl IntoIterator<Item = &'s [usize]>, len: usize) -> Option<Vec<usize>> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in seqs {
        let body = s.strip_prefix(&[BOS]).unwrap_or(s);
        let body = body.strip_suffix(&[EOS]).unwrap_or(body);
        for w in body.windows(len) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(w, _)| w.to_vec())
}

pub fn train_specific(
    model: &LanguageModel,
    corpus: &AttributedCorpus,
    attribute: &str,
    value: &str,
    hyper: &PrefixHyper,
) -> Result<Prefix> {
    let sub = subset(corpus, attribute, value)?;
    let seqs: Vec<&[usize]> = sub.train_sequences().collect();
    if seqs.is_empty() {
        return Err(Error::Contract(format!("no training sequences with {attribute}={value}")));
    }
    train_prefix(model, &seqs, PrefixKind::Specific, Some((attribute.to_string(), value.to_string())), hyper)
}

pub fn train_general(model: &LanguageModel, corpus: &AttributedCorpus, hyper: &PrefixHyper) -> Result<Prefix> {
    let seqs: Vec<&[usize]> = corpus.train_sequences().collect();
    if seqs.is_empty() {
        return Err(Error::Contract("cannot train a general prefix on an empty corpus".into()));
    }
    train_prefix(model, &seqs, PrefixKind::General, None, hyper)
}

/// Optimizes prefix keys and values on `seqs` with the model frozen.
pub fn train_prefix(
    model: &LanguageModel,
    seqs: &[&[usize]],
    kind: PrefixKind,
    attribute: Option<(String, String)>,
    hyper: &PrefixHyper,
) -> Result<Prefix> {
    if hyper.batch_size == 0 || hyper.length == 0 {
        return Err(Error::Config("prefix batch_size and length must be positive".into()));
    }
    if hyper.dropout != 0.0 {
        return Err(Error::Config("prefix dropout is not supported".into()));
    }
    let base_checksum = model.checksum();
    let init_tokens = match &hyper.init_tokens {
        Some(t) => t.clone(),
        None => most_frequent_window(seqs.iter().copied(), hyper.length)
            .ok_or_else(|| Error::Contract(format!("no sequence holds a window of {} tokens", hyper.length)))?,
    };
    let mut kv = init_from_tokens(model, &init_tokens, hyper.length)?;
    let scored = &seqs[..seqs.len().min(FINAL_LOSS_SEQUENCES)];
    let initial_loss = mean_loss(model, Some(&kv), scored)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = AdamW::new(hyper.adamw.clone(), kv.tensors());
    let mut losses = Vec::with_capacity(hyper.steps);
    for _ in 0..hyper.steps {
        let batch = sample_batch(&mut rng, seqs, hyper.batch_size);
        let LossGradients { loss, prefix: mut grads, .. } = loss_and_gradients(model, &batch, Some(&kv), false)?;
        if let Some(c) = hyper.clip_norm {
            clip_gradients(&mut grads, c);
        }
        let mut params: Vec<&mut Tensor> = kv.tensors_mut().collect();
        apply_step(&mut opt, &mut params, grads, hyper.adamw.lr)?;
        losses.push(loss);
    }
    if model.checksum() != base_checksum {
        return Err(Error::Contract("base model parameters changed during prefix training".into()));
    }
    kv.tensors_mut().for_each(Tensor::zero_grad);
    let final_loss = mean_loss(model, Some(&kv), scored)?;
    let prefix = Prefix {
        kind,
        attribute,
        kv,
        base_checksum,
        metadata: PrefixMeta {
            steps: hyper.steps,
            init_tokens,
            initial_loss: Some(initial_loss),
            final_loss: Some(final_loss),
            losses,
            hyper: Some(hyper.clone()),
            subset_size: seqs.len(),
        },
    };
    prefix.validate()?;
    Ok(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counting_and_ties() {
        let a = [BOS, 5, 6, 7, 5, 6, 7, EOS];
        let b = [BOS, 9, 9, EOS];
        assert_eq!(most_frequent_window([&a[..], &b[..]], 2), Some(vec![5, 6]));
        assert_eq!(most_frequent_window([&b[..]], 2), Some(vec![9, 9]));
        assert_eq!(most_frequent_window([&b[..]], 3), None);
        let c = [BOS, 4, 3, EOS];
        assert_eq!(most_frequent_window([&c[..], &b[..]], 2), Some(vec![4, 3]));
    }
}
