#![allow(dead_code)]

use fpt_core::decode::TOP_P_SLACK;
use fpt_core::model::{loss_and_gradients, mean_loss, LanguageModel, ModelConfig, PrefixKv};
use fpt_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: 17, n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, max_seq_len: 24, seed }
}

pub fn random_prefix(config: &ModelConfig, len: usize, seed: u64) -> PrefixKv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = || Tensor::from_fn(&[len, config.d_model], |_| rng.random_range(-0.5..0.5));
    let (mut keys, mut values) = (Vec::new(), Vec::new());
    for _ in 0..config.n_layers {
        keys.push(t());
        values.push(t());
    }
    PrefixKv { length: len, keys, values }
}

/// Gradients below this magnitude are compared in absolute terms; central
/// differences at h=1e-5 carry roughly 1e-11 of roundoff.
pub const GRAD_FLOOR: f64 = 1e-6;

/// One probed coordinate of a finite-difference check.
#[derive(Debug)]
pub struct Probe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(GRAD_FLOOR)
    }
}

/// Central differences at `h` on `per_tensor` random coordinates of every
/// model parameter and prefix tensor, compared with the analytic gradient.
pub fn finite_difference_probes(
    model: &LanguageModel,
    prefix: &PrefixKv,
    batch: &[&[usize]],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Vec<Probe> {
    let grads = loss_and_gradients(model, batch, Some(prefix), true).unwrap();
    let loss = |m: &LanguageModel, p: &PrefixKv| mean_loss(m, Some(p), batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let numel = grads.params[t].len();
        for _ in 0..per_tensor {
            let i = rng.random_range(0..numel);
            let mut m = model.clone();
            m.params_mut()[t].values_mut()[i] += h;
            let up = loss(&m, prefix);
            m.params_mut()[t].values_mut()[i] -= 2.0 * h;
            let down = loss(&m, prefix);
            probes.push(Probe { name: format!("{name}[{i}]"), analytic: grads.params[t][i], numeric: (up - down) / (2.0 * h) });
        }
    }
    for t in 0..2 * prefix.keys.len() {
        let numel = grads.prefix[t].len();
        let label = format!("prefix.{}.{}", t / 2, if t % 2 == 0 { "key" } else { "value" });
        for _ in 0..per_tensor {
            let i = rng.random_range(0..numel);
            let mut p = prefix.clone();
            prefix_tensor(&mut p, t).values_mut()[i] += h;
            let up = loss(model, &p);
            prefix_tensor(&mut p, t).values_mut()[i] -= 2.0 * h;
            let down = loss(model, &p);
            probes.push(Probe { name: format!("{label}[{i}]"), analytic: grads.prefix[t][i], numeric: (up - down) / (2.0 * h) });
        }
    }
    probes
}

fn prefix_tensor(p: &mut PrefixKv, t: usize) -> &mut Tensor {
    if t.is_multiple_of(2) {
        &mut p.keys[t / 2]
    } else {
        &mut p.values[t / 2]
    }
}

/// Nucleus by explicit sort and running sum.
pub fn brute_force_kept(z: &[f64], p: f64) -> Vec<usize> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let mut pairs: Vec<(f64, usize)> = e.iter().map(|v| v / total).zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (q, t) in pairs {
        kept.push(t);
        mass += q;
        if mass >= p - TOP_P_SLACK {
            break;
        }
    }
    kept.sort_unstable();
    kept
}

/// Weighted sum of `α·z − (α−1)·g` over the first channel's nucleus, softmaxed.
pub fn straight_line(channels: &[(Vec<f64>, Vec<f64>, f64)], weights: &[f64], p: f64) -> Vec<f64> {
    let kept = brute_force_kept(&channels[0].0, p);
    let vocab = channels[0].0.len();
    let mut s = vec![f64::NEG_INFINITY; vocab];
    for &t in &kept {
        s[t] = 0.0;
        for ((z, g, a), w) in channels.iter().zip(weights) {
            s[t] += w * (a * z[t] - (a - 1.0) * g[t]);
        }
    }
    let max = kept.iter().map(|&t| s[t]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}
