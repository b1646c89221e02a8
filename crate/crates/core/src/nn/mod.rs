//! Minimal neural-network plumbing for the point-set networks.
//!
//! Parameters live in one flat f64 vector described by a [`Layout`] of named
//! tensors; forward and backward passes are hand-written against that
//! storage. The flat form keeps the optimizer, the finite-difference checks
//! and the weight archive trivial, and the architectures here are small and
//! fixed enough that a tape autograd would be overkill.

pub mod archive;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor directory for one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// A fully-connected layer's location in the flat vector.
/// Weights are row-major `[out][in]`, bias follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearRef {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Builds a layout by appending linear layers.
#[derive(Default)]
pub struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> LinearRef {
        let w = self.len;
        self.tensors.push(TensorSpec {
            name: format!("{name}.w"),
            dims: vec![out_dim, in_dim],
            offset: w,
        });
        self.len += out_dim * in_dim;
        let b = self.len;
        self.tensors.push(TensorSpec {
            name: format!("{name}.b"),
            dims: vec![out_dim],
            offset: b,
        });
        self.len += out_dim;
        LinearRef {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn finish(self) -> Arc<Layout> {
        Arc::new(Layout {
            tensors: self.tensors,
            len: self.len,
        })
    }
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.len];
        Self { layout, data }
    }

    /// Kaiming-uniform init for every linear layer, biases zero.
    pub fn init(layout: Arc<Layout>, seed: u64) -> Self {
        let mut p = Self::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = p.layout.tensors.clone();
        for spec in &specs {
            if spec.dims.len() == 2 {
                let fan_in = spec.dims[1] as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in &mut p.data[spec.offset..spec.offset + spec.len()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        p
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let spec = self.layout.find(name)?;
        Some((
            &spec.dims,
            &self.data[spec.offset..spec.offset + spec.len()],
        ))
    }

    /// First tensor containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        first_non_finite_in(&self.layout, &self.data)
    }
}

/// Name of the first tensor in `layout` whose slice of `data` holds a
/// non-finite value.
pub fn first_non_finite_in<'a>(layout: &'a Layout, data: &[f64]) -> Option<&'a str> {
    for spec in &layout.tensors {
        if data[spec.offset..spec.offset + spec.len()]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Some(&spec.name);
        }
    }
    None
}

/// y = W x + b for a batch of `n` rows. `xs` is n×in, `ys` n×out.
pub fn linear_fwd(params: &[f64], l: &LinearRef, xs: &[f64], ys: &mut [f64]) {
    let n = xs.len() / l.in_dim;
    debug_assert_eq!(xs.len(), n * l.in_dim);
    debug_assert_eq!(ys.len(), n * l.out_dim);
    let w = &params[l.w..l.w + l.out_dim * l.in_dim];
    let b = &params[l.b..l.b + l.out_dim];
    for p in 0..n {
        let x = &xs[p * l.in_dim..(p + 1) * l.in_dim];
        let y = &mut ys[p * l.out_dim..(p + 1) * l.out_dim];
        for (j, yj) in y.iter_mut().enumerate() {
            let row = &w[j * l.in_dim..(j + 1) * l.in_dim];
            let mut acc = b[j];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            *yj = acc;
        }
    }
}

/// In-place ReLU.
pub fn relu(xs: &mut [f64]) {
    for v in xs {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through a linear layer for a batch.
///
/// Accumulates dW and db into `grads` and, when `dxs` is given, writes
/// dx = W^T dy into it (overwriting).
pub fn linear_bwd(
    params: &[f64],
    l: &LinearRef,
    xs: &[f64],
    dys: &[f64],
    grads: &mut [f64],
    mut dxs: Option<&mut [f64]>,
) {
    let n = xs.len() / l.in_dim;
    debug_assert_eq!(dys.len(), n * l.out_dim);
    let w = &params[l.w..l.w + l.out_dim * l.in_dim];
    if let Some(dxs) = dxs.as_deref_mut() {
        dxs.fill(0.0);
    }
    for p in 0..n {
        let x = &xs[p * l.in_dim..(p + 1) * l.in_dim];
        let dy = &dys[p * l.out_dim..(p + 1) * l.out_dim];
        for (j, &dyj) in dy.iter().enumerate() {
            if dyj == 0.0 {
                continue;
            }
            let dw_row = &mut grads[l.w + j * l.in_dim..l.w + (j + 1) * l.in_dim];
            for (dwi, xi) in dw_row.iter_mut().zip(x.iter()) {
                *dwi += dyj * xi;
            }
            grads[l.b + j] += dyj;
        }
        if let Some(dxs) = dxs.as_deref_mut() {
            let dx = &mut dxs[p * l.in_dim..(p + 1) * l.in_dim];
            for (j, &dyj) in dy.iter().enumerate() {
                if dyj == 0.0 {
                    continue;
                }
                let row = &w[j * l.in_dim..(j + 1) * l.in_dim];
                for (dxi, wi) in dx.iter_mut().zip(row.iter()) {
                    *dxi += dyj * wi;
                }
            }
        }
    }
}

/// Masks an upstream gradient by the ReLU activation pattern:
/// `dpre = dpost * [post > 0]`. Zero exactly at the kink.
pub fn relu_bwd(post: &[f64], dpost: &mut [f64]) {
    for (d, &a) in dpost.iter_mut().zip(post.iter()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Coordinatewise max over `n` rows of width `dim`, with the row index that
/// achieves each max (lowest index wins ties).
pub fn max_pool(feats: &[f64], dim: usize) -> (Vec<f64>, Vec<usize>) {
    let n = feats.len() / dim;
    assert!(n > 0, "max_pool over an empty set");
    let mut global = feats[..dim].to_vec();
    let mut argmax = vec![0usize; dim];
    for p in 1..n {
        let row = &feats[p * dim..(p + 1) * dim];
        for (j, &v) in row.iter().enumerate() {
            if v > global[j] {
                global[j] = v;
                argmax[j] = p;
            }
        }
    }
    (global, argmax)
}

/// Routes a pooled gradient back to the argmax rows.
pub fn max_pool_bwd(dglobal: &[f64], argmax: &[usize], dfeats: &mut [f64]) {
    let dim = dglobal.len();
    for (j, (&g, &p)) in dglobal.iter().zip(argmax.iter()).enumerate() {
        dfeats[p * dim + j] += g;
    }
}
