//! Pair-wise MRF graph neural network that refines per-user cavity beliefs.
//!
//! Every user is a variable node; every ordered pair of users exchanges a
//! factor message built from both node messages and the pair's Gram entry.
//! Node states are updated with a GRU and read out as a categorical
//! distribution over the real constellation.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{gnn_backward, GnnGradients};
pub use checkpoint::{
    check_dims, from_bytes, load_checkpoint, load_params, save_checkpoint, save_params, sidecar_path, to_bytes,
    CHECKPOINT_VERSION,
};
pub use forward::{gnn_forward, gnn_forward_taped, gnn_init, gnn_init_taped, gnn_readout, gnn_round, GnnTape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnDims {
    /// Length of the node message `u_k`.
    pub nu: usize,
    pub nh1: usize,
    pub nh2: usize,
    /// Message-passing rounds per detector iteration.
    pub rounds: usize,
    /// Points per real constellation dimension.
    pub m: usize,
}

impl GnnDims {
    pub fn new(m: usize) -> Self {
        Self {
            nu: 8,
            nh1: 64,
            nh2: 32,
            rounds: 2,
            m,
        }
    }

    /// Input width of the factor network: two node messages and two edge features.
    pub fn factor_in(&self) -> usize {
        2 * self.nu + 2
    }

    /// Input width of the GRU: aggregated message and two node attributes.
    pub fn gru_in(&self) -> usize {
        self.nu + 2
    }
}

/// Named weight tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    W1,
    B1,
    FactorW1,
    FactorB1,
    FactorW2,
    FactorB2,
    FactorW3,
    FactorB3,
    GruWih,
    GruWhh,
    GruBih,
    GruBhh,
    W2,
    B2,
    ReadoutW1,
    ReadoutB1,
    ReadoutW2,
    ReadoutB2,
    ReadoutW3,
    ReadoutB3,
}

impl Tensor {
    pub const ALL: [Tensor; 20] = [
        Tensor::W1,
        Tensor::B1,
        Tensor::FactorW1,
        Tensor::FactorB1,
        Tensor::FactorW2,
        Tensor::FactorB2,
        Tensor::FactorW3,
        Tensor::FactorB3,
        Tensor::GruWih,
        Tensor::GruWhh,
        Tensor::GruBih,
        Tensor::GruBhh,
        Tensor::W2,
        Tensor::B2,
        Tensor::ReadoutW1,
        Tensor::ReadoutB1,
        Tensor::ReadoutW2,
        Tensor::ReadoutB2,
        Tensor::ReadoutW3,
        Tensor::ReadoutB3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::W1 => "w1",
            Tensor::B1 => "b1",
            Tensor::FactorW1 => "factor.w1",
            Tensor::FactorB1 => "factor.b1",
            Tensor::FactorW2 => "factor.w2",
            Tensor::FactorB2 => "factor.b2",
            Tensor::FactorW3 => "factor.w3",
            Tensor::FactorB3 => "factor.b3",
            Tensor::GruWih => "gru.w_ih",
            Tensor::GruWhh => "gru.w_hh",
            Tensor::GruBih => "gru.b_ih",
            Tensor::GruBhh => "gru.b_hh",
            Tensor::W2 => "w2",
            Tensor::B2 => "b2",
            Tensor::ReadoutW1 => "readout.w1",
            Tensor::ReadoutB1 => "readout.b1",
            Tensor::ReadoutW2 => "readout.w2",
            Tensor::ReadoutB2 => "readout.b2",
            Tensor::ReadoutW3 => "readout.w3",
            Tensor::ReadoutB3 => "readout.b3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// `(rows, cols)`; biases are column vectors.
    pub fn shape(self, d: &GnnDims) -> (usize, usize) {
        match self {
            Tensor::W1 => (d.nu, 3),
            Tensor::B1 => (d.nu, 1),
            Tensor::FactorW1 => (d.nh1, d.factor_in()),
            Tensor::FactorB1 => (d.nh1, 1),
            Tensor::FactorW2 => (d.nh2, d.nh1),
            Tensor::FactorB2 => (d.nh2, 1),
            Tensor::FactorW3 => (d.nu, d.nh2),
            Tensor::FactorB3 => (d.nu, 1),
            Tensor::GruWih => (3 * d.nh1, d.gru_in()),
            Tensor::GruWhh => (3 * d.nh1, d.nh1),
            Tensor::GruBih => (3 * d.nh1, 1),
            Tensor::GruBhh => (3 * d.nh1, 1),
            Tensor::W2 => (d.nu, d.nh1),
            Tensor::B2 => (d.nu, 1),
            Tensor::ReadoutW1 => (d.nh1, d.nu),
            Tensor::ReadoutB1 => (d.nh1, 1),
            Tensor::ReadoutW2 => (d.nh2, d.nh1),
            Tensor::ReadoutB2 => (d.nh2, 1),
            Tensor::ReadoutW3 => (d.m, d.nh2),
            Tensor::ReadoutB3 => (d.m, 1),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Tensor::B1
                | Tensor::FactorB1
                | Tensor::FactorB2
                | Tensor::FactorB3
                | Tensor::GruBih
                | Tensor::GruBhh
                | Tensor::B2
                | Tensor::ReadoutB1
                | Tensor::ReadoutB2
                | Tensor::ReadoutB3
        )
    }
}

/// All learnable weights in one flat buffer.
///
/// The same layout doubles as a gradient accumulator and as optimizer moment
/// storage, so elementwise updates can run over `data` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub dims: GnnDims,
    pub data: Vec<f64>,
    offsets: Vec<usize>,
}

impl GnnParams {
    pub fn zeros(dims: GnnDims) -> Self {
        let mut offsets = Vec::with_capacity(Tensor::ALL.len() + 1);
        let mut total = 0;
        for t in Tensor::ALL {
            offsets.push(total);
            let (r, c) = t.shape(&dims);
            total += r * c;
        }
        offsets.push(total);
        Self {
            dims,
            data: vec![0.0; total],
            offsets,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: GnnDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        for t in Tensor::ALL {
            if t.is_bias() {
                continue;
            }
            let (_, fan_in) = t.shape(&dims);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in p.get_mut(t) {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: Tensor) -> &[f64] {
        let i = t as usize;
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let i = t as usize;
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Index range of tensor `t` inside `data`.
    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn add_assign(&mut self, other: &GnnParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Number of learnable scalars for the given sizes.
pub fn param_count(dims: &GnnDims) -> usize {
    Tensor::ALL
        .iter()
        .map(|t| {
            let (r, c) = t.shape(dims);
            r * c
        })
        .sum()
}

/// Node messages `u` (`K x nu`) and GRU hidden states `g` (`K x nh1`), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnState {
    pub k: usize,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

impl GnnState {
    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.g).all(|x| x.is_finite())
    }

    pub fn u_row(&self, k: usize, nu: usize) -> &[f64] {
        &self.u[k * nu..(k + 1) * nu]
    }
}

/// Per-user attributes `[mean, variance]` from the observation module, `K x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAttributes {
    pub k: usize,
    pub a: Vec<f64>,
}

impl NodeAttributes {
    pub fn new(means: &[f64], vars: &[f64]) -> Self {
        let a = means.iter().zip(vars).flat_map(|(&m, &v)| [m, v]).collect();
        Self { k: means.len(), a }
    }

    pub fn row(&self, k: usize) -> [f64; 2] {
        [self.a[2 * k], self.a[2 * k + 1]]
    }
}

/// Graph features shared by all rounds: the Gram matrix, the noise variance
/// and the per-user features `[y^T h_k, h_k^T h_k, sigma^2]` used to seed `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAttributes {
    pub k: usize,
    pub gram: Vec<f64>,
    pub noise_var: f64,
    pub init_features: Vec<f64>,
}

impl EdgeAttributes {
    pub fn from_instance(inst: &SystemInstance) -> Self {
        let k = inst.k();
        let g = inst.h.tr_mul(&inst.h);
        let hty = inst.h.tr_mul(&inst.y);
        let mut gram = vec![0.0; k * k];
        let mut init_features = Vec::with_capacity(3 * k);
        for i in 0..k {
            for j in 0..k {
                gram[i * k + j] = g[(i, j)];
            }
            init_features.extend([hty[i], g[(i, i)], inst.noise_var]);
        }
        Self {
            k,
            gram,
            noise_var: inst.noise_var,
            init_features,
        }
    }

    /// Features of the factor between sender `j` and receiver `k`.
    pub fn f(&self, j: usize, k: usize) -> [f64; 2] {
        [self.gram[k * self.k + j], self.noise_var]
    }
}

pub(crate) fn check_shapes(params: &GnnParams, k: usize, state: &GnnState, attrs: &NodeAttributes, edges: &EdgeAttributes) -> Result<()> {
    let d = &params.dims;
    let checks = [
        ("state rows", state.k, k),
        ("state u", state.u.len(), k * d.nu),
        ("state g", state.g.len(), k * d.nh1),
        ("node attributes", attrs.a.len(), 2 * k),
        ("edge users", edges.k, k),
    ];
    for (what, found, expected) in checks {
        if found != expected {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                found,
                expected,
            });
        }
    }
    Ok(())
}

// Row-major dense kernels on slices.

/// `out = W x + b` with `W` of shape `out.len() x x.len()`.
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *o = b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// `dx += W^T dy`.
pub(crate) fn affine_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, a) in dx.iter_mut().zip(row) {
            *o += a * d;
        }
    }
}

/// `dw += dy x^T`.
pub(crate) fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (o, a) in row.iter_mut().zip(x) {
            *o += d * a;
        }
    }
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
