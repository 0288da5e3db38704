use super::{
    affine, check_shapes, relu_in_place, sigmoid, EdgeAttributes, GnnDims, GnnParams, GnnState, NodeAttributes, Tensor,
};
use crate::cavity::CavityDistribution;
use crate::error::Result;

/// Activations recorded by a taped forward pass, consumed by [`super::gnn_backward`].
///
/// One segment is pushed per call to [`gnn_forward_taped`]; state carried
/// between calls links the segments, so a whole detector run can be
/// differentiated in one backward sweep.
#[derive(Debug, Clone)]
pub struct GnnTape {
    pub(crate) dims: GnnDims,
    pub(crate) k: usize,
    pub(crate) gram: Vec<f64>,
    pub(crate) noise_var: f64,
    pub(crate) init_features: Option<Vec<f64>>,
    pub(crate) segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub rounds: Vec<RoundTape>,
    pub readout: ReadoutTape,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct RoundTape {
    pub u_in: Vec<f64>,
    pub g_in: Vec<f64>,
    /// Hidden activations of the factor network for the pair `(k, j)` at `k*K + j`.
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// Sum over senders of the second hidden layer, `K x nh2`.
    pub agg: Vec<f64>,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn g + b_hn`, needed for the reset-gate gradient.
    pub ghn: Vec<f64>,
    pub g_out: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ReadoutTape {
    pub u: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
}

impl GnnTape {
    pub fn new(edges: &EdgeAttributes, dims: GnnDims) -> Self {
        Self {
            dims,
            k: edges.k,
            gram: edges.gram.clone(),
            noise_var: edges.noise_var,
            init_features: None,
            segments: Vec::new(),
        }
    }

    /// Number of recorded readouts.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Seed the node messages from the per-user features; GRU states start at zero.
pub fn gnn_init(edges: &EdgeAttributes, params: &GnnParams) -> GnnState {
    let d = params.dims;
    let k = edges.k;
    let w1 = params.get(Tensor::W1);
    let b1 = params.get(Tensor::B1);
    let mut u = vec![0.0; k * d.nu];
    for i in 0..k {
        affine(w1, b1, &edges.init_features[3 * i..3 * i + 3], &mut u[i * d.nu..(i + 1) * d.nu]);
    }
    GnnState {
        k,
        u,
        g: vec![0.0; k * d.nh1],
    }
}

/// [`gnn_init`] that also lets the backward pass reach `W1` and `b1`.
pub fn gnn_init_taped(edges: &EdgeAttributes, params: &GnnParams, tape: &mut GnnTape) -> GnnState {
    tape.init_features = Some(edges.init_features.clone());
    gnn_init(edges, params)
}

/// One synchronous message-passing round.
pub fn gnn_round(state: &GnnState, attrs: &NodeAttributes, edges: &EdgeAttributes, params: &GnnParams) -> Result<GnnState> {
    check_shapes(params, edges.k, state, attrs, edges)?;
    Ok(round_impl(params, state, &attrs.a, &edges.gram, edges.noise_var, None))
}

pub fn gnn_readout(state: &GnnState, params: &GnnParams) -> CavityDistribution {
    readout_impl(params, state, None)
}

/// Runs `dims.rounds` rounds and the readout; the returned state is the
/// starting point for the next detector iteration.
pub fn gnn_forward(
    edges: &EdgeAttributes,
    attrs: &NodeAttributes,
    state: &GnnState,
    params: &GnnParams,
) -> Result<(CavityDistribution, GnnState)> {
    check_shapes(params, edges.k, state, attrs, edges)?;
    let mut s = state.clone();
    for _ in 0..params.dims.rounds {
        s = round_impl(params, &s, &attrs.a, &edges.gram, edges.noise_var, None);
    }
    Ok((readout_impl(params, &s, None), s))
}

/// [`gnn_forward`] that records its activations on `tape`.
pub fn gnn_forward_taped(
    edges: &EdgeAttributes,
    attrs: &NodeAttributes,
    state: &GnnState,
    params: &GnnParams,
    tape: &mut GnnTape,
) -> Result<(CavityDistribution, GnnState)> {
    check_shapes(params, edges.k, state, attrs, edges)?;
    let mut s = state.clone();
    let mut rounds = Vec::with_capacity(params.dims.rounds);
    for _ in 0..params.dims.rounds {
        let mut rec = RoundTape::default();
        s = round_impl(params, &s, &attrs.a, &edges.gram, edges.noise_var, Some(&mut rec));
        rounds.push(rec);
    }
    let mut readout = ReadoutTape::default();
    let q = readout_impl(params, &s, Some(&mut readout));
    tape.segments.push(Segment {
        rounds,
        readout,
    });
    Ok((q, s))
}

pub(crate) fn round_impl(
    p: &GnnParams,
    st: &GnnState,
    attrs: &[f64],
    gram: &[f64],
    noise_var: f64,
    rec: Option<&mut RoundTape>,
) -> GnnState {
    let d = p.dims;
    let k = st.k;
    let (nu, nh1, nh2) = (d.nu, d.nh1, d.nh2);
    let fin = d.factor_in();
    let fw1 = p.get(Tensor::FactorW1);
    let fb1 = p.get(Tensor::FactorB1);
    let fw2 = p.get(Tensor::FactorW2);
    let fb2 = p.get(Tensor::FactorB2);
    let fw3 = p.get(Tensor::FactorW3);
    let fb3 = p.get(Tensor::FactorB3);

    // The first factor layer splits into receiver, sender and edge parts.
    let mut recv = vec![0.0; k * nh1];
    let mut send = vec![0.0; k * nh1];
    let mut c_gram = vec![0.0; nh1];
    let mut c_bias = vec![0.0; nh1];
    for i in 0..nh1 {
        let row = &fw1[i * fin..(i + 1) * fin];
        for n in 0..k {
            let u = st.u_row(n, nu);
            recv[n * nh1 + i] = row[..nu].iter().zip(u).map(|(a, b)| a * b).sum();
            send[n * nh1 + i] = row[nu..2 * nu].iter().zip(u).map(|(a, b)| a * b).sum();
        }
        c_gram[i] = row[2 * nu];
        c_bias[i] = fb1[i] + row[2 * nu + 1] * noise_var;
    }

    let taped = rec.is_some();
    let (mut h1_all, mut h2_all) = if taped {
        (vec![0.0; k * k * nh1], vec![0.0; k * k * nh2])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut h1 = vec![0.0; nh1];
    let mut h2 = vec![0.0; nh2];
    let mut agg = vec![0.0; k * nh2];
    for r in 0..k {
        for s in 0..k {
            if s == r {
                continue;
            }
            let gkj = gram[r * k + s];
            for i in 0..nh1 {
                h1[i] = (recv[r * nh1 + i] + send[s * nh1 + i] + c_gram[i] * gkj + c_bias[i]).max(0.0);
            }
            affine(fw2, fb2, &h1, &mut h2);
            relu_in_place(&mut h2);
            for (a, b) in agg[r * nh2..(r + 1) * nh2].iter_mut().zip(&h2) {
                *a += b;
            }
            if taped {
                let idx = r * k + s;
                h1_all[idx * nh1..(idx + 1) * nh1].copy_from_slice(&h1);
                h2_all[idx * nh2..(idx + 1) * nh2].copy_from_slice(&h2);
            }
        }
    }

    // The third factor layer is affine, so it is applied once to the sum.
    let gin = d.gru_in();
    let senders = k.saturating_sub(1) as f64;
    let scaled_b3: Vec<f64> = fb3.iter().map(|b| b * senders).collect();
    let mut x = vec![0.0; k * gin];
    for n in 0..k {
        let row = &mut x[n * gin..(n + 1) * gin];
        affine(fw3, &scaled_b3, &agg[n * nh2..(n + 1) * nh2], &mut row[..nu]);
        row[nu] = attrs[2 * n];
        row[nu + 1] = attrs[2 * n + 1];
    }

    let wih = p.get(Tensor::GruWih);
    let whh = p.get(Tensor::GruWhh);
    let bih = p.get(Tensor::GruBih);
    let bhh = p.get(Tensor::GruBhh);
    let mut gi = vec![0.0; 3 * nh1];
    let mut gh = vec![0.0; 3 * nh1];
    let mut g_out = vec![0.0; k * nh1];
    let (mut rs, mut zs, mut ns, mut ghn) = if taped {
        (vec![0.0; k * nh1], vec![0.0; k * nh1], vec![0.0; k * nh1], vec![0.0; k * nh1])
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    for n in 0..k {
        let h = &st.g[n * nh1..(n + 1) * nh1];
        affine(wih, bih, &x[n * gin..(n + 1) * gin], &mut gi);
        affine(whh, bhh, h, &mut gh);
        for i in 0..nh1 {
            let r = sigmoid(gi[i] + gh[i]);
            let z = sigmoid(gi[nh1 + i] + gh[nh1 + i]);
            let c = (gi[2 * nh1 + i] + r * gh[2 * nh1 + i]).tanh();
            g_out[n * nh1 + i] = (1.0 - z) * c + z * h[i];
            if taped {
                rs[n * nh1 + i] = r;
                zs[n * nh1 + i] = z;
                ns[n * nh1 + i] = c;
                ghn[n * nh1 + i] = gh[2 * nh1 + i];
            }
        }
    }

    let w2 = p.get(Tensor::W2);
    let b2 = p.get(Tensor::B2);
    let mut u = vec![0.0; k * nu];
    for n in 0..k {
        affine(w2, b2, &g_out[n * nh1..(n + 1) * nh1], &mut u[n * nu..(n + 1) * nu]);
    }

    if let Some(rec) = rec {
        *rec = RoundTape {
            u_in: st.u.clone(),
            g_in: st.g.clone(),
            h1: h1_all,
            h2: h2_all,
            agg,
            x,
            r: rs,
            z: zs,
            n: ns,
            ghn,
            g_out: g_out.clone(),
        };
    }
    GnnState { k, u, g: g_out }
}

pub(crate) fn readout_impl(p: &GnnParams, st: &GnnState, rec: Option<&mut ReadoutTape>) -> CavityDistribution {
    let d = p.dims;
    let k = st.k;
    let (nu, nh1, nh2, m) = (d.nu, d.nh1, d.nh2, d.m);
    let mut r1 = vec![0.0; k * nh1];
    let mut r2 = vec![0.0; k * nh2];
    let mut logits = vec![0.0; k * m];
    for n in 0..k {
        let a = &mut r1[n * nh1..(n + 1) * nh1];
        affine(p.get(Tensor::ReadoutW1), p.get(Tensor::ReadoutB1), st.u_row(n, nu), a);
        relu_in_place(a);
        let b = &mut r2[n * nh2..(n + 1) * nh2];
        affine(p.get(Tensor::ReadoutW2), p.get(Tensor::ReadoutB2), &r1[n * nh1..(n + 1) * nh1], b);
        relu_in_place(b);
        affine(
            p.get(Tensor::ReadoutW3),
            p.get(Tensor::ReadoutB3),
            &r2[n * nh2..(n + 1) * nh2],
            &mut logits[n * m..(n + 1) * m],
        );
    }
    let q = CavityDistribution::from_logits(k, m, logits);
    if let Some(rec) = rec {
        *rec = ReadoutTape {
            u: st.u.clone(),
            r1,
            r2,
        };
    }
    q
}
