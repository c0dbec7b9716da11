//! Dense f64 tensors with optional gradient buffers, plus the reverse-mode
//! tape in [`tape`].

pub mod gradcheck;
pub mod sgd;
pub mod tape;

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Dense n-dimensional array, row-major, 64-bit floats.
///
/// `grad`, when present, always has the same length as `data`. Tensors used
/// as trainable parameters set `requires_grad`; everything else leaves it
/// clear.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Gaussian init with the given std, deterministic per rng stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: crate::rng::normal_vec(rng, n, std),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics on non-scalars (internal misuse, not input data).
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                detail: format!("grad len {} vs data len {}", delta.len(), self.data.len()),
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.grad.as_mut() {
            for gi in g.iter_mut() {
                *gi *= factor;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Detached copy: values only, no grad, no requires_grad.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad: None, requires_grad: false }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive 64-bit digest of shape and value bits; used to assert
    /// frozen weights stay untouched.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv64::new();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Checksum over an ordered list of named tensors.
pub fn params_checksum<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> u64 {
    let mut h = crate::checkpoint::Fnv64::new();
    for (name, t) in params {
        h.write(name.as_bytes());
        h.write(&t.checksum().to_le_bytes());
    }
    h.finish()
}
