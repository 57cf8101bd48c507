//! Pre-layer-norm decoder-only transformer with per-layer key/value injection.

pub mod checkpoint;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub use train::{loss_and_gradients, mean_loss, pretrain, LossGradients, TrainHyper, TrainLog};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 120, n_layers: 4, n_heads: 4, d_model: 128, d_ff: 512, max_seq_len: 96, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_seq_len].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.n_layers);
        let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        v * d + self.max_seq_len * d + l * block + 2 * d + d * v + v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl Block {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// Frozen-or-trainable transformer parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Per-layer key/value rows prepended to attention. A zero-length prefix
/// carries no tensors and is equivalent to no injection.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixKv {
    pub length: usize,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl PrefixKv {
    pub fn empty() -> Self {
        Self { length: 0, keys: Vec::new(), values: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.keys.iter().zip(&self.values).flat_map(|(k, v)| [k, v])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.keys.iter_mut().zip(self.values.iter_mut()).flat_map(|(k, v)| [k, v])
    }
}

/// Cached keys and values of already-processed positions, prefix included.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PastState {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    len: usize,
}

impl PastState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Every layer's cached rows as an injectable prefix.
    pub fn to_prefix(&self, d_model: usize) -> PrefixKv {
        if self.len == 0 {
            return PrefixKv::empty();
        }
        let mk = |rows: &Vec<f64>| Tensor::new(vec![self.len, d_model], rows.clone()).expect("cache rows");
        PrefixKv { length: self.len, keys: self.keys.iter().map(mk).collect(), values: self.values.iter().map(mk).collect() }
    }
}

/// Graph handles of every parameter, mirroring [`LanguageModel`].
pub struct BoundModel {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<[Var; 16]>,
    lnf: (Var, Var),
    head: (Var, Var),
}

/// Output of [`LanguageModel::forward_graph`].
pub struct GraphForward {
    pub logits: Var,
    /// Per-layer full key rows (injected rows first).
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

impl LanguageModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        let tok_emb = normal(&[v, d], 0.02);
        let pos_emb = normal(&[config.max_seq_len, d], 0.01);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: normal(&[d, d], 0.02),
                bq: Tensor::zeros(&[d]),
                wk: normal(&[d, d], 0.02),
                bk: Tensor::zeros(&[d]),
                wv: normal(&[d, d], 0.02),
                bv: Tensor::zeros(&[d]),
                wo: normal(&[d, d], resid_std),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: normal(&[d, f], 0.02),
                b1: Tensor::zeros(&[f]),
                w2: normal(&[f, d], resid_std),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = normal(&[d, v], 0.02);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[v]),
        })
    }

    /// Parameters in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAMS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter.
    pub fn checksum(&self) -> String {
        checkpoint::params_checksum(self.named_params().into_iter())
    }

    /// Loads every parameter into `g`, tracked when `track` is set.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, track: bool) -> Result<BoundModel> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let vars = b.tensors().into_iter().map(|t| g.param(t, track)).collect::<Result<Vec<_>>>()?;
                Ok(vars.try_into().expect("16 block parameters"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            tok_emb: g.param(&self.tok_emb, track)?,
            pos_emb: g.param(&self.pos_emb, track)?,
            blocks,
            lnf: (g.param(&self.lnf_g, track)?, g.param(&self.lnf_b, track)?),
            head: (g.param(&self.head_w, track)?, g.param(&self.head_b, track)?),
        })
    }

    /// Records a forward pass. `injected[l]` holds rows prepended to layer
    /// `l`'s keys and values; `start_pos` is the absolute position of `tokens[0]`.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        p: &BoundModel,
        tokens: &[usize],
        start_pos: usize,
        injected: Option<&[(Var, Var)]>,
    ) -> Result<GraphForward> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if start_pos + tokens.len() > c.max_seq_len {
            return Err(Error::Capacity(format!(
                "{} positions starting at {start_pos} exceed max_seq_len {}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        if let Some(inj) = injected {
            if inj.len() != c.n_layers {
                return Err(Error::Shape(format!("{} injected layers for {} blocks", inj.len(), c.n_layers)));
            }
        }
        let positions: Vec<usize> = (start_pos..start_pos + tokens.len()).collect();
        let tok = g.embedding(p.tok_emb, tokens)?;
        let pos = g.embedding(p.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut keys = Vec::with_capacity(c.n_layers);
        let mut values = Vec::with_capacity(c.n_layers);
        for (l, b) in p.blocks.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *b;
            let h = g.layer_norm(x, ln1_g, ln1_b)?;
            let q = g.matmul(h, wq)?;
            let q = g.add_row(q, bq)?;
            let k = g.matmul(h, wk)?;
            let k = g.add_row(k, bk)?;
            let v = g.matmul(h, wv)?;
            let v = g.add_row(v, bv)?;
            let (k, v, offset) = match injected {
                Some(inj) => {
                    let (pk, pv) = inj[l];
                    let rows = g.shape(pk)[0];
                    (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?, rows)
                }
                None => (k, v, 0),
            };
            keys.push(k);
            values.push(v);
            let a = g.attention(q, k, v, c.n_heads, offset)?;
            let o = g.matmul(a, wo)?;
            let o = g.add_row(o, bo)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, ln2_g, ln2_b)?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        let h = g.layer_norm(x, p.lnf.0, p.lnf.1)?;
        let logits = g.matmul(h, p.head.0)?;
        let logits = g.add_row(logits, p.head.1)?;
        Ok(GraphForward { logits, keys, values })
    }

    /// Logits for `tokens` given an injected prefix or a cache of earlier
    /// positions, plus the extended cache. Real positions follow the prefix.
    pub fn forward(
        &self,
        tokens: &[usize],
        injected: Option<&PrefixKv>,
        past: Option<&PastState>,
    ) -> Result<(Tensor, PastState)> {
        let c = &self.config;
        let injected = injected.filter(|p| !p.is_empty());
        let past = past.filter(|p| !p.is_empty());
        if injected.is_some() && past.is_some() {
            return Err(Error::Contract("prefix must be injected once; it already lives in the past state".into()));
        }
        if let Some(pre) = injected {
            if pre.keys.len() != c.n_layers || pre.values.len() != c.n_layers {
                return Err(Error::Shape("prefix layer count does not match model".into()));
            }
            if pre.tensors().any(|t| t.shape() != [pre.length, c.d_model]) {
                return Err(Error::Shape("prefix tensors must be [length × d_model]".into()));
            }
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index(format!("token {bad} outside vocabulary {}", c.vocab_size)));
        }
        let prior = injected.map_or(0, |p| p.length) + past.map_or(0, |p| p.len());
        if prior + tokens.len() > c.max_seq_len {
            return Err(Error::Capacity(format!(
                "{} prior + {} new positions exceed max_seq_len {}",
                prior,
                tokens.len(),
                c.max_seq_len
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let inj: Option<Vec<(Var, Var)>> = if let Some(pre) = injected {
            Some(
                pre.keys
                    .iter()
                    .zip(&pre.values)
                    .map(|(k, v)| Ok((g.param(k, false)?, g.param(v, false)?)))
                    .collect::<Result<_>>()?,
            )
        } else if let Some(past) = past {
            Some(
                past.keys
                    .iter()
                    .zip(&past.values)
                    .map(|(k, v)| {
                        Ok((
                            g.leaf(vec![past.len, c.d_model], k.clone(), false)?,
                            g.leaf(vec![past.len, c.d_model], v.clone(), false)?,
                        ))
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let out = self.forward_graph(&mut g, &bound, tokens, prior, inj.as_deref())?;
        let state = PastState {
            keys: out.keys.iter().map(|&k| g.value(k).to_vec()).collect(),
            values: out.values.iter().map(|&v| g.value(v).to_vec()).collect(),
            len: prior + tokens.len(),
        };
        Ok((g.to_tensor(out.logits), state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 23, n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, max_seq_len: 24, seed: 3 }
    }

    #[test]
    fn param_count_is_function_of_config() {
        let m = LanguageModel::new(tiny()).unwrap();
        assert_eq!(m.param_count(), tiny().param_count());
        assert_eq!(LanguageModel::new(ModelConfig::default()).unwrap().param_count(), ModelConfig::default().param_count());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 10, n_heads: 4, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn empty_prefix_is_bit_identical() {
        let m = LanguageModel::new(tiny()).unwrap();
        let (a, _) = m.forward(&[4], None, None).unwrap();
        let (b, _) = m.forward(&[4], Some(&PrefixKv::empty()), None).unwrap();
        assert_eq!(a.values(), b.values());
        let (a, _) = m.forward(&[4, 9, 1, 7], None, None).unwrap();
        let (b, _) = m.forward(&[4, 9, 1, 7], Some(&PrefixKv::empty()), None).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn random_prefix_changes_logits() {
        let m = LanguageModel::new(tiny()).unwrap();
        let mut k = 0.0;
        let pre = PrefixKv {
            length: 3,
            keys: (0..2).map(|_| Tensor::from_fn(&[3, 8], |i| { k += 0.37; (k + i as f64).sin() })).collect(),
            values: (0..2).map(|_| Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.9).cos())).collect(),
        };
        let (a, _) = m.forward(&[4, 5], None, None).unwrap();
        let (b, st) = m.forward(&[4, 5], Some(&pre), None).unwrap();
        assert_ne!(a.values(), b.values());
        assert_eq!(st.len(), 5);
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = LanguageModel::new(tiny()).unwrap();
        let tokens = [3, 17, 8, 8, 0, 22, 5];
        let (full, _) = m.forward(&tokens, None, None).unwrap();
        let (_, mut past) = m.forward(&tokens[..1], None, None).unwrap();
        for (t, &tok) in tokens.iter().enumerate().skip(1) {
            let (step, next) = m.forward(&[tok], None, Some(&past)).unwrap();
            for (a, b) in step.values().iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-8);
            }
            past = next;
        }
        assert_eq!(past.len(), tokens.len());
    }

    #[test]
    fn causality_under_perturbation() {
        let m = LanguageModel::new(tiny()).unwrap();
        let (a, _) = m.forward(&[3, 4, 5, 6, 7], None, None).unwrap();
        let (b, _) = m.forward(&[3, 4, 5, 20, 1], None, None).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn capacity_and_contract_errors() {
        let m = LanguageModel::new(tiny()).unwrap();
        let long = vec![1; 25];
        assert!(matches!(m.forward(&long, None, None), Err(Error::Capacity(_))));
        let (_, past) = m.forward(&[1, 2], None, None).unwrap();
        let pre = past.to_prefix(8);
        assert!(matches!(m.forward(&[1], Some(&pre), Some(&past)), Err(Error::Contract(_))));
        assert!(matches!(m.forward(&[23], None, None), Err(Error::Index(_))));
    }
}
