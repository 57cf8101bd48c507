//! Dense `f64` tensors, reverse-mode autograd and AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Plain matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::Shape(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
    }
    Tensor::new(vec![m, n], kernels::matmul(a.values(), b.values(), m, k, n))
}

/// Softmax along `axis`. Entries equal to `-inf` come out as exactly zero;
/// a slice made entirely of `-inf` is a degenerate distribution.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    if x.values().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Contract("softmax input must be finite or -inf".into()));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.values().to_vec();
    let mut slice = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, s) in slice.iter_mut().enumerate() {
                *s = out[base + j * inner];
            }
            if !kernels::softmax_in_place(&mut slice) {
                return Err(Error::Degenerate("softmax over an all -inf slice".into()));
            }
            for (j, s) in slice.iter().enumerate() {
                out[base + j * inner] = *s;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Mean next-token negative log-likelihood, without recording a graph.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.param(logits, false)?;
    let loss = g.cross_entropy(z, targets)?;
    Ok(g.value(loss)[0])
}
