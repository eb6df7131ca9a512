//! Short-term interest with temporal fatigue.
//!
//! Column cross layers `Q_{c+1} = Q_0 ⊙ (Q_c W′_c) + Q_c` mix interests at
//! each position, a causal convolution stack turns `[Q_C, Q_0]` into
//! per-position fatigue features `Q̂`, and a gated recurrent unit whose update
//! and reset gates also read `Q̂_l` runs over the recent window starting from
//! the long-term vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::longterm::{CrossMode, CROSS_INIT};
use crate::nn;
use crate::numerics::{Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct ColCross {
    pub layers: Vec<ParamId>,
    pub mode: CrossMode,
}

impl ColCross {
    pub fn new(store: &mut ParamStore, k: usize, layers: usize, mode: CrossMode, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|c| store.add(format!("col_cross.{c}"), ParamKind::Weight, nn::uniform(rng, k, k, CROSS_INIT)))
            .collect();
        Self { layers, mode }
    }

    /// Crosses every row of the `m × K` input independently.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q0: NodeId) -> Result<NodeId> {
        let mut q = q0;
        if self.mode == CrossMode::Identity {
            return Ok(q);
        }
        for &w in &self.layers {
            let wn = g.param(store, w);
            let lin = g.matmul(q, wn)?;
            let mixed = match self.mode {
                CrossMode::Cross => g.mul(q0, lin)?,
                _ => lin,
            };
            q = g.add(mixed, q)?;
        }
        Ok(q)
    }
}

pub fn cross_cols(f: &Tensor, cross: &ColCross, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let q0 = g.input(f.clone());
    let qc = cross.forward(&mut g, store, q0)?;
    Ok(g.value(qc).clone())
}

/// Causal convolutions with leaky-ReLU activations and no bias.
#[derive(Clone, Debug)]
pub struct ConvStack {
    /// Layer `i` kernel is `d_out × (width · d_in)`.
    pub kernels: Vec<ParamId>,
    pub width: usize,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, d_in: usize, channels: &[usize], width: usize, rng: &mut impl Rng) -> Self {
        let mut input = d_in;
        let kernels = channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let fan_in = width * input;
                let id = store.add(format!("conv.{i}"), ParamKind::Weight, nn::glorot(rng, out, fan_in, fan_in, out));
                input = out;
                id
            })
            .collect();
        Self { kernels, width }
    }

    pub fn output_width(&self, store: &ParamStore) -> Option<usize> {
        self.kernels.last().map(|&k| store.get(k).rows())
    }

    /// `input` is `(T·lanes) × d_in` in lane layout.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: NodeId, lanes: usize) -> Result<NodeId> {
        let mut x = input;
        for &k in &self.kernels {
            let kn = g.param(store, k);
            let conv = g.causal_conv(x, kn, self.width, lanes)?;
            x = g.leaky_relu(conv);
        }
        Ok(x)
    }
}

/// `T × d_out` features of a single `T × 2K` input.
pub fn causal_conv_stack(input: &Tensor, stack: &ConvStack, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = stack.forward(&mut g, store, x, 1)?;
    Ok(g.value(out).clone())
}

/// Gate parameters. `v` is absent for the plain recurrent unit.
#[derive(Clone, Debug)]
pub struct Fru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub v: Option<[ParamId; 2]>,
    pub b: [ParamId; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl Fru {
    /// `fatigue_width` is the width of `Q̂`; `None` builds a plain GRU.
    pub fn new(store: &mut ParamStore, d: usize, fatigue_width: Option<usize>, rng: &mut impl Rng) -> Self {
        let mut mat = |store: &mut ParamStore, name: String, cols: usize| {
            store.add(name, ParamKind::Weight, nn::glorot(rng, d, cols, cols, d))
        };
        let w = GATES.map(|gate| mat(store, format!("fru.w_{gate}"), d));
        let u = GATES.map(|gate| mat(store, format!("fru.u_{gate}"), d));
        let v = fatigue_width.map(|c| [mat(store, "fru.v_z".into(), c), mat(store, "fru.v_r".into(), c)]);
        let b = GATES.map(|gate| store.add(format!("fru.b_{gate}"), ParamKind::Bias, Tensor::zeros(d, 1)));
        Self { w, u, v, b }
    }

    /// Runs over the `T_u` columns of `x` (`d × T_u`) for `n` lanes starting
    /// from `h0` (`d × n`). `qhat` is `(T_u·n) × c` in lane layout and is
    /// ignored when the unit has no fatigue weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, qhat: Option<NodeId>, h0: NodeId) -> Result<NodeId> {
        let [d, t_u] = g.shape(x);
        let n = g.shape(h0)[1];
        if g.shape(h0)[0] != d {
            return Err(Error::ShapeMismatch {
                op: "fru",
                lhs: g.shape(x),
                rhs: g.shape(h0),
            });
        }
        let xt = g.transpose(x);
        let index: Vec<usize> = (0..t_u).flat_map(|l| std::iter::repeat_n(l, n)).collect();
        let spread = g.gather_rows(xt, &index)?;
        let lanes = g.transpose(spread);
        self.forward_lanes(g, store, lanes, qhat, h0, &vec![t_u; n])
    }

    /// Runs `m` independent lanes for up to `S` steps. `x` is `d × (S·m)` and
    /// `qhat` is `(S·m) × c`, both with column/row `l·m + j` holding step `l`
    /// of lane `j`. Lane `j` is updated for its first `steps[j]` steps only.
    pub fn forward_lanes(&self, g: &mut Graph, store: &ParamStore, x: NodeId, qhat: Option<NodeId>, h0: NodeId, steps: &[usize]) -> Result<NodeId> {
        let [d, total] = g.shape(x);
        let m = g.shape(h0)[1];
        if g.shape(h0)[0] != d || steps.len() != m || (m == 0 && total != 0) || (m > 0 && total % m != 0) {
            return Err(Error::ShapeMismatch {
                op: "fru",
                lhs: g.shape(x),
                rhs: g.shape(h0),
            });
        }
        let s = if m == 0 { 0 } else { total / m };
        if steps.iter().any(|&t| t > s) {
            return Err(Error::InvalidArgument {
                op: "fru",
                reason: format!("lane step counts exceed the {s} provided steps"),
            });
        }
        let s = steps.iter().copied().max().unwrap_or(0);
        if s == 0 {
            log::warn!("empty recent window; recurrent state left at its initial value");
            return Ok(h0);
        }
        let x = if s * m < total { g.slice_cols(x, 0, s * m)? } else { x };
        let param = |g: &mut Graph, id: ParamId| g.param(store, id);
        let w: Vec<NodeId> = self.w.iter().map(|&id| param(g, id)).collect();
        let b: Vec<NodeId> = self.b.iter().map(|&id| param(g, id)).collect();
        let w_all = g.concat_rows(&w)?;
        let b_all = g.concat_rows(&b)?;
        let lin = g.matmul(w_all, x)?;
        let bias = g.broadcast_cols(b_all, s * m)?;
        let fixed = g.add(lin, bias)?;
        let mut gate_in = g.slice_rows(fixed, 0, 2 * d)?;
        let cand_in = g.slice_rows(fixed, 2 * d, d)?;
        match (self.v, qhat) {
            (Some(v), Some(q)) => {
                if g.shape(q)[0] < s * m {
                    return Err(Error::ShapeMismatch {
                        op: "fru",
                        lhs: g.shape(q),
                        rhs: [s * m, g.shape(q)[1]],
                    });
                }
                let q = if g.shape(q)[0] > s * m { g.slice_rows(q, 0, s * m)? } else { q };
                let qt = g.transpose(q);
                let vz = param(g, v[0]);
                let vr = param(g, v[1]);
                let v_all = g.concat_rows(&[vz, vr])?;
                let vq = g.matmul(v_all, qt)?;
                gate_in = g.add(gate_in, vq)?;
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument {
                    op: "fru",
                    reason: "fatigue features required".into(),
                })
            }
            (None, _) => {}
        }
        let uz = param(g, self.u[0]);
        let ur = param(g, self.u[1]);
        let u_gates = g.concat_rows(&[uz, ur])?;
        let u_cand = param(g, self.u[2]);
        let mut h = h0;
        for l in 0..s {
            let xs = g.slice_cols(gate_in, l * m, m)?;
            let uh = g.matmul(u_gates, h)?;
            let pre = g.add(xs, uh)?;
            let gates = g.sigmoid(pre);
            let z = g.slice_rows(gates, 0, d)?;
            let r = g.slice_rows(gates, d, d)?;
            let xs = g.slice_cols(cand_in, l * m, m)?;
            let rh = g.mul(r, h)?;
            let urh = g.matmul(u_cand, rh)?;
            let pre = g.add(xs, urh)?;
            let cand = g.tanh(pre);
            let delta = g.sub(cand, h)?;
            let mut step = g.mul(z, delta)?;
            if steps.iter().any(|&t| t <= l) {
                let mask = g.input(Tensor::from_fn(d, m, |_, j| if l < steps[j] { 1.0 } else { 0.0 }));
                step = g.mul(step, mask)?;
            }
            h = g.add(h, step)?;
        }
        Ok(h)
    }
}

/// Final state for one lane: `x` is `d × T_u`, `qhat` is `T_u × c`.
pub fn fru_forward(x: &Tensor, qhat: Option<&Tensor>, h0: &[f64], fru: &Fru, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let qn = qhat.map(|q| g.input(q.clone()));
    let hn = g.input(Tensor::column(h0.to_vec()));
    let out = fru.forward(&mut g, store, xn, qn, hn)?;
    Ok(g.value(out).data().to_vec())
}
