//! Dense tensors, eager operations and the reverse-mode tape.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{AttentionBlock, Gradients, Graph, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::parallel::ExecMode;
use crate::scalar::Scalar;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape may contain zero-length dimensions.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `[rows, cols]` matrix from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| F::of_f64(v))).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| F::of_f64(rng.random_range(-bound..=bound)))
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| F::of_f64(std * rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Matrix product over the last two dimensions with broadcast batch
    /// dimensions.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Self> {
        self.matmul_with(ExecMode::default(), other)
    }

    pub fn matmul_with(&self, mode: ExecMode, other: &Tensor<F>) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![F::zero(); plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for (bi, (ao, bo)) in plan.offsets().enumerate() {
            kernels::gemm(
                mode,
                m,
                k,
                n,
                &self.data[ao..ao + m * k],
                &other.data[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        Ok(Tensor {
            shape: plan.out_shape,
            data: out,
        })
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![F::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = out[base + t * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (t, &b) in buf.iter().enumerate() {
                    out[base + t * inner] = b;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Normalises over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Self> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gain/bias of size {d}, got {:?}/{:?}",
                self.shape, gain.shape, bias.shape
            )));
        }
        if eps <= F::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let mut out = vec![F::zero(); self.data.len()];
        kernels::layer_norm_rows(&self.data, d, &gain.data, &bias.data, eps, &mut out, None, None);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Gathers rows of a `[V, D]` table for a `[B, L]` id matrix.
    pub fn embedding_lookup(table: &Tensor<F>, ids: &[Vec<u32>]) -> Result<Self> {
        if table.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be [V, D], got {:?}",
                table.shape
            )));
        }
        let (v, d) = (table.shape[0], table.shape[1]);
        let l = ids.first().map_or(0, Vec::len);
        if ids.iter().any(|r| r.len() != l) {
            return Err(Error::Shape("embedding ids must form a rectangular matrix".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * l * d);
        for &id in ids.iter().flatten() {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of size {v}")));
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Tensor::from_parts(vec![ids.len(), l, d], data))
    }
}

/// Batch broadcasting plan for `[.., M, K] · [.., K, N]`.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::Shape(format!("matmul: cannot multiply {a:?} by {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a_batch), pad(b_batch));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch.push(x.max(y));
        }
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            batch,
            a_batch: pa,
            b_batch: pb,
        })
    }

    /// Element offsets of the `a` and `b` operand matrices for each output
    /// batch index, in row-major order.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total: usize = self.batch.iter().product();
        (0..total).map(move |mut flat| {
            let (mut ai, mut bi) = (0, 0);
            let (mut astride, mut bstride) = (1, 1);
            for d in (0..self.batch.len()).rev() {
                let idx = flat % self.batch[d];
                flat /= self.batch[d];
                if self.a_batch[d] != 1 {
                    ai += idx * astride;
                }
                if self.b_batch[d] != 1 {
                    bi += idx * bstride;
                }
                astride *= self.a_batch[d];
                bstride *= self.b_batch[d];
            }
            (ai * self.m * self.k, bi * self.k * self.n)
        })
    }
}
