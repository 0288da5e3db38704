use super::forward::{ReadoutTape, RoundTape};
use super::{affine_t_acc, outer_acc, GnnParams, GnnState, GnnTape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GnnGradients {
    pub params: GnnParams,
    /// Gradient with respect to the node attributes of each segment, `K x 2`.
    pub node_attrs: Vec<Vec<f64>>,
    /// Gradient with respect to the state entering the first segment.
    /// Zero contribution through `u` when the tape recorded the initialization.
    pub state_in: GnnState,
}

/// Reverse-mode sweep over a recorded tape.
///
/// `upstream[t]` is the gradient of the loss with respect to the readout
/// logits of segment `t` (`K x M`, row-major); an empty vector stands for zero.
pub fn gnn_backward(tape: &GnnTape, params: &GnnParams, upstream: &[Vec<f64>]) -> Result<GnnGradients> {
    if tape.segments.is_empty() {
        return Err(Error::MissingTape);
    }
    if upstream.len() != tape.segments.len() {
        return Err(Error::DimensionMismatch {
            what: "upstream gradients".into(),
            found: upstream.len(),
            expected: tape.segments.len(),
        });
    }
    let d = params.dims;
    if d != tape.dims {
        return Err(Error::Dimension("tape recorded with different network sizes".into()));
    }
    let k = tape.k;
    for up in upstream {
        if !up.is_empty() && up.len() != k * d.m {
            return Err(Error::DimensionMismatch {
                what: "upstream logit gradient".into(),
                found: up.len(),
                expected: k * d.m,
            });
        }
    }

    let mut grads = params.zeros_like();
    let mut du = vec![0.0; k * d.nu];
    let mut dg = vec![0.0; k * d.nh1];
    let mut node_attrs = vec![Vec::new(); tape.segments.len()];

    for (t, seg) in tape.segments.iter().enumerate().rev() {
        if !upstream[t].is_empty() {
            readout_backward(params, &mut grads, &seg.readout, &upstream[t], &mut du);
        }
        let mut da = vec![0.0; 2 * k];
        for rt in seg.rounds.iter().rev() {
            let (du_in, dg_in) = round_backward(params, &mut grads, rt, tape, &du, &dg, &mut da);
            du = du_in;
            dg = dg_in;
        }
        node_attrs[t] = da;
    }

    if let Some(f) = &tape.init_features {
        for n in 0..k {
            let dun = &du[n * d.nu..(n + 1) * d.nu];
            outer_acc(grads.get_mut(Tensor::W1), dun, &f[3 * n..3 * n + 3]);
            for (b, x) in grads.get_mut(Tensor::B1).iter_mut().zip(dun) {
                *b += x;
            }
        }
    }

    Ok(GnnGradients {
        params: grads,
        node_attrs,
        state_in: GnnState { k, u: du, g: dg },
    })
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn readout_backward(p: &GnnParams, grads: &mut GnnParams, rt: &ReadoutTape, dlogits: &[f64], du: &mut [f64]) {
    let d = p.dims;
    let (nu, nh1, nh2, m) = (d.nu, d.nh1, d.nh2, d.m);
    let k = rt.u.len() / nu;
    let mut dr2 = vec![0.0; nh2];
    let mut dr1 = vec![0.0; nh1];
    for n in 0..k {
        let dl = &dlogits[n * m..(n + 1) * m];
        let r1 = &rt.r1[n * nh1..(n + 1) * nh1];
        let r2 = &rt.r2[n * nh2..(n + 1) * nh2];
        outer_acc(grads.get_mut(Tensor::ReadoutW3), dl, r2);
        add(grads.get_mut(Tensor::ReadoutB3), dl);

        dr2.iter_mut().for_each(|x| *x = 0.0);
        affine_t_acc(p.get(Tensor::ReadoutW3), dl, &mut dr2);
        for (g, &a) in dr2.iter_mut().zip(r2) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        outer_acc(grads.get_mut(Tensor::ReadoutW2), &dr2, r1);
        add(grads.get_mut(Tensor::ReadoutB2), &dr2);

        dr1.iter_mut().for_each(|x| *x = 0.0);
        affine_t_acc(p.get(Tensor::ReadoutW2), &dr2, &mut dr1);
        for (g, &a) in dr1.iter_mut().zip(r1) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        outer_acc(grads.get_mut(Tensor::ReadoutW1), &dr1, &rt.u[n * nu..(n + 1) * nu]);
        add(grads.get_mut(Tensor::ReadoutB1), &dr1);
        affine_t_acc(p.get(Tensor::ReadoutW1), &dr1, &mut du[n * nu..(n + 1) * nu]);
    }
}

/// Returns the gradients with respect to the round's incoming `(u, g)` and
/// accumulates the node-attribute gradient into `da`.
fn round_backward(
    p: &GnnParams,
    grads: &mut GnnParams,
    rt: &RoundTape,
    tape: &GnnTape,
    du_out: &[f64],
    dg_carry: &[f64],
    da: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = p.dims;
    let k = tape.k;
    let (nu, nh1, nh2) = (d.nu, d.nh1, d.nh2);
    let gin = d.gru_in();
    let fin = d.factor_in();

    // u_out = W2 g_out + b2, and g_out also flows on to the next round.
    let mut dg_out = dg_carry.to_vec();
    for n in 0..k {
        let dun = &du_out[n * nu..(n + 1) * nu];
        outer_acc(grads.get_mut(Tensor::W2), dun, &rt.g_out[n * nh1..(n + 1) * nh1]);
        add(grads.get_mut(Tensor::B2), dun);
        affine_t_acc(p.get(Tensor::W2), dun, &mut dg_out[n * nh1..(n + 1) * nh1]);
    }

    // GRU with gates ordered (reset, update, candidate).
    let mut dg_in = vec![0.0; k * nh1];
    let mut dx = vec![0.0; k * gin];
    let mut dgi = vec![0.0; 3 * nh1];
    let mut dgh = vec![0.0; 3 * nh1];
    for n in 0..k {
        let o = n * nh1;
        for i in 0..nh1 {
            let (r, z, c, ghn) = (rt.r[o + i], rt.z[o + i], rt.n[o + i], rt.ghn[o + i]);
            let dh = dg_out[o + i];
            let dc = dh * (1.0 - z);
            let dz = dh * (rt.g_in[o + i] - c);
            dg_in[o + i] += dh * z;
            let dpre_n = dc * (1.0 - c * c);
            let dr = dpre_n * ghn;
            let dpre_z = dz * z * (1.0 - z);
            let dpre_r = dr * r * (1.0 - r);
            dgi[i] = dpre_r;
            dgi[nh1 + i] = dpre_z;
            dgi[2 * nh1 + i] = dpre_n;
            dgh[i] = dpre_r;
            dgh[nh1 + i] = dpre_z;
            dgh[2 * nh1 + i] = dpre_n * r;
        }
        outer_acc(grads.get_mut(Tensor::GruWih), &dgi, &rt.x[n * gin..(n + 1) * gin]);
        add(grads.get_mut(Tensor::GruBih), &dgi);
        affine_t_acc(p.get(Tensor::GruWih), &dgi, &mut dx[n * gin..(n + 1) * gin]);
        outer_acc(grads.get_mut(Tensor::GruWhh), &dgh, &rt.g_in[o..o + nh1]);
        add(grads.get_mut(Tensor::GruBhh), &dgh);
        affine_t_acc(p.get(Tensor::GruWhh), &dgh, &mut dg_in[o..o + nh1]);
    }

    // Factor network, mirroring the split used in the forward pass.
    let senders = k.saturating_sub(1) as f64;
    let fw2 = p.get(Tensor::FactorW2);
    let mut d_recv = vec![0.0; k * nh1];
    let mut d_send = vec![0.0; k * nh1];
    let mut d_cgram = vec![0.0; nh1];
    let mut d_z1_sum = vec![0.0; nh1];
    let mut dw2 = vec![0.0; nh2 * nh1];
    let mut db2 = vec![0.0; nh2];
    let mut dagg = vec![0.0; nh2];
    let mut dz2 = vec![0.0; nh2];
    let mut dz1 = vec![0.0; nh1];
    for r in 0..k {
        let dm = &dx[r * gin..r * gin + nu];
        da[2 * r] += dx[r * gin + nu];
        da[2 * r + 1] += dx[r * gin + nu + 1];
        outer_acc(grads.get_mut(Tensor::FactorW3), dm, &rt.agg[r * nh2..(r + 1) * nh2]);
        for (b, x) in grads.get_mut(Tensor::FactorB3).iter_mut().zip(dm) {
            *b += senders * x;
        }
        dagg.iter_mut().for_each(|x| *x = 0.0);
        affine_t_acc(p.get(Tensor::FactorW3), dm, &mut dagg);

        for s in 0..k {
            if s == r {
                continue;
            }
            let idx = r * k + s;
            let h1 = &rt.h1[idx * nh1..(idx + 1) * nh1];
            let h2 = &rt.h2[idx * nh2..(idx + 1) * nh2];
            for i in 0..nh2 {
                dz2[i] = if h2[i] > 0.0 { dagg[i] } else { 0.0 };
            }
            outer_acc(&mut dw2, &dz2, h1);
            add(&mut db2, &dz2);
            dz1.iter_mut().for_each(|x| *x = 0.0);
            affine_t_acc(fw2, &dz2, &mut dz1);
            let gkj = tape.gram[r * k + s];
            for i in 0..nh1 {
                if h1[i] <= 0.0 {
                    continue;
                }
                let g = dz1[i];
                d_recv[r * nh1 + i] += g;
                d_send[s * nh1 + i] += g;
                d_cgram[i] += g * gkj;
                d_z1_sum[i] += g;
            }
        }
    }
    add(grads.get_mut(Tensor::FactorW2), &dw2);
    add(grads.get_mut(Tensor::FactorB2), &db2);

    let fw1 = p.get(Tensor::FactorW1);
    let mut du_in = vec![0.0; k * nu];
    {
        let gw1 = grads.get_mut(Tensor::FactorW1);
        for i in 0..nh1 {
            let row = &mut gw1[i * fin..(i + 1) * fin];
            for n in 0..k {
                let u = &rt.u_in[n * nu..(n + 1) * nu];
                let (a, b) = (d_recv[n * nh1 + i], d_send[n * nh1 + i]);
                for c in 0..nu {
                    row[c] += a * u[c];
                    row[nu + c] += b * u[c];
                }
            }
            row[2 * nu] += d_cgram[i];
            row[2 * nu + 1] += d_z1_sum[i] * tape.noise_var;
        }
    }
    add(grads.get_mut(Tensor::FactorB1), &d_z1_sum);
    for n in 0..k {
        let dun = &mut du_in[n * nu..(n + 1) * nu];
        for i in 0..nh1 {
            let row = &fw1[i * fin..(i + 1) * fin];
            let (a, b) = (d_recv[n * nh1 + i], d_send[n * nh1 + i]);
            for c in 0..nu {
                dun[c] += a * row[c] + b * row[nu + c];
            }
        }
    }
    (du_in, dg_in)
}
