//! Next-token cross-entropy training of the base model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoundModel, LanguageModel, PrefixKv};
use crate::corpus::AttributedCorpus;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Linear warmup length; the rate then decays by cosine to `min_lr_ratio`.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            adamw: AdamWConfig { lr: 3e-3, weight_decay: 0.01, ..Default::default() },
            warmup_steps: 50,
            min_lr_ratio: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.adamw.lr;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Loss trajectory of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub initial_heldout: Option<f64>,
    pub final_heldout: Option<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Records the token-weighted mean next-token loss over `batch` into `g`.
pub(crate) fn record_batch_loss<'a>(
    model: &LanguageModel,
    g: &mut Graph<'a>,
    bound: &BoundModel,
    batch: &[&[usize]],
    injected: Option<&[(Var, Var)]>,
) -> Result<Var> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(Error::Contract("batch has no next-token targets".into()));
    }
    let start = injected.map_or(0, |inj| inj.first().map_or(0, |(k, _)| g.shape(*k)[0]));
    let mut loss: Option<Var> = None;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let n = seq.len() - 1;
        let out = model.forward_graph(g, bound, &seq[..n], start, injected)?;
        let ce = g.cross_entropy(out.logits, &seq[1..])?;
        let ce = g.scale(ce, n as f64 / total as f64);
        loss = Some(match loss {
            Some(l) => g.add(l, ce)?,
            None => ce,
        });
    }
    Ok(loss.expect("at least one sequence has targets"))
}

/// Batch loss with gradients for every model parameter (in
/// [`LanguageModel::named_params`] order) and, when a prefix is given,
/// for its keys and values (layer by layer, key before value).
pub struct LossGradients {
    pub loss: f64,
    pub params: Vec<Vec<f64>>,
    pub prefix: Vec<Vec<f64>>,
}

pub fn loss_and_gradients(
    model: &LanguageModel,
    batch: &[&[usize]],
    prefix: Option<&PrefixKv>,
    track_params: bool,
) -> Result<LossGradients> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, track_params)?;
    let inj = prefix
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.keys
                .iter()
                .zip(&p.values)
                .map(|(k, v)| Ok((g.param(k, true)?, g.param(v, true)?)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let loss = record_batch_loss(model, &mut g, &bound, batch, inj.as_deref())?;
    let mut grads = g.backward(loss)?;
    let mut take = |v: Var| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]);
    let params = if track_params { bound.vars().into_iter().map(&mut take).collect() } else { Vec::new() };
    let prefix = inj.iter().flatten().flat_map(|(k, v)| [*k, *v]).map(&mut take).collect();
    Ok(LossGradients { loss: g.value(loss)[0], params, prefix })
}

/// Token-weighted mean next-token loss without recording gradients.
pub fn mean_loss(model: &LanguageModel, prefix: Option<&PrefixKv>, seqs: &[&[usize]]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in seqs.iter().filter(|s| s.len() >= 2) {
        let n = seq.len() - 1;
        let (logits, _) = model.forward(&seq[..n], prefix, None)?;
        nll += crate::numerics::cross_entropy(&logits, &seq[1..])? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("no next-token targets to score".into()));
    }
    Ok(nll / count as f64)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

pub(crate) fn apply_step(
    opt: &mut AdamW,
    params: &mut [&mut Tensor],
    grads: Vec<Vec<f64>>,
    lr: f64,
) -> Result<()> {
    for (p, g) in params.iter_mut().zip(&grads) {
        p.zero_grad();
        p.accumulate_grad(g)?;
    }
    opt.config.lr = lr;
    opt.step(params)
}

/// Samples `batch_size` training sequences with replacement.
pub(crate) fn sample_batch<'c>(rng: &mut ChaCha8Rng, pool: &[&'c [usize]], batch_size: usize) -> Vec<&'c [usize]> {
    (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

const HELDOUT_SCORE_LIMIT: usize = 200;

/// Trains a fresh model on the corpus training split.
pub fn pretrain(corpus: &AttributedCorpus, model: LanguageModel, hyper: &TrainHyper) -> Result<(LanguageModel, TrainLog)> {
    let mut model = model;
    let train: Vec<&[usize]> = corpus.train_sequences().collect();
    if train.is_empty() {
        return Err(Error::Contract("cannot pretrain on an empty corpus".into()));
    }
    let vocab = model.config.vocab_size;
    if let Some(bad) = train.iter().flat_map(|s| s.iter()).find(|&&t| t >= vocab) {
        return Err(Error::Index(format!("corpus token {bad} outside model vocabulary {vocab}")));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let heldout: Vec<&[usize]> = corpus.heldout_sequences().take(HELDOUT_SCORE_LIMIT).collect();
    let mut log = TrainLog::default();
    if !heldout.is_empty() {
        log.initial_heldout = Some(mean_loss(&model, None, &heldout)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = AdamW::new(hyper.adamw.clone(), model.named_params().into_iter().map(|(_, t)| t));
    for step in 0..hyper.steps {
        let batch = sample_batch(&mut rng, &train, hyper.batch_size);
        let LossGradients { loss, params: mut grads, .. } = loss_and_gradients(&model, &batch, None, true)?;
        if let Some(c) = hyper.clip_norm {
            clip_gradients(&mut grads, c);
        }
        apply_step(&mut opt, &mut model.params_mut(), grads, hyper.lr_at(step))?;
        log.losses.push(loss);
    }
    if !heldout.is_empty() {
        log.final_heldout = Some(mean_loss(&model, None, &heldout)?);
    }
    Ok((model, log))
}

impl BoundModel {
    /// Parameter handles in the order of [`LanguageModel::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.extend([self.lnf.0, self.lnf.1, self.head.0, self.head.1]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let h = TrainHyper { steps: 100, warmup_steps: 10, ..Default::default() };
        assert!(h.lr_at(0) < h.lr_at(9));
        assert!((h.lr_at(10) - h.adamw.lr).abs() < 1e-15);
        assert!((h.lr_at(100) - h.adamw.lr * h.min_lr_ratio).abs() < 1e-15);
        assert!(h.lr_at(50) < h.lr_at(20));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        clip_gradients(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
