//! Fatigue-enhanced multi-interest fusion.
//!
//! Row cross layers `P_{c+1} = P_0 ⊙ (W_c P_c) + P_c` mix window positions of
//! the similarity matrix. Every interest then receives a logit from
//! `MLP₂([P_Cᵀ, P_0ᵀ])`, and the long-term vector is `h = H · softmax(logits)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, Mlp};
use crate::numerics::{Axis, Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

/// How a cross layer combines base and current features.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum CrossMode {
    /// `X_0 ⊙ lin(X_c) + X_c`.
    #[default]
    Cross,
    /// `lin(X_c) + X_c`, the plain dense residual.
    Dense,
    /// `X_c`; the layers are skipped.
    Identity,
}

/// Scale of the uniform initialisation of cross kernels.
pub const CROSS_INIT: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct RowCross {
    pub layers: Vec<ParamId>,
    pub mode: CrossMode,
}

impl RowCross {
    pub fn new(store: &mut ParamStore, t: usize, layers: usize, mode: CrossMode, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|c| store.add(format!("row_cross.{c}"), ParamKind::Weight, nn::uniform(rng, t, t, CROSS_INIT)))
            .collect();
        Self { layers, mode }
    }

    /// `p0` is `T × m`; every column is crossed independently.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p0: NodeId) -> Result<NodeId> {
        let mut p = p0;
        if self.mode == CrossMode::Identity {
            return Ok(p);
        }
        for &w in &self.layers {
            let wn = g.param(store, w);
            let lin = g.matmul(wn, p)?;
            let mixed = match self.mode {
                CrossMode::Cross => g.mul(p0, lin)?,
                _ => lin,
            };
            p = g.add(mixed, p)?;
        }
        Ok(p)
    }
}

/// Per-interest attention `2T → T → 1`, tanh, no output bias.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mlp: Mlp,
    pub uniform: bool,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, t: usize, uniform: bool, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "mlp2", 2 * t, t, 1, Activation::Tanh, false, rng),
            uniform,
        }
    }

    /// Fuses `h` (`d × K`) for `n` lanes whose crossed and base features are
    /// laid out `T × (n·K)`. Returns `(h, w)` with `h` of shape `d × n` and
    /// `w` of shape `n × K`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId, pc: NodeId, p0: NodeId) -> Result<(NodeId, NodeId)> {
        let k = g.shape(h)[1];
        let cols = g.shape(pc)[1];
        if !cols.is_multiple_of(k) || g.shape(p0) != g.shape(pc) {
            return Err(Error::ShapeMismatch {
                op: "fuse_interests",
                lhs: g.shape(pc),
                rhs: g.shape(p0),
            });
        }
        let n = cols / k;
        let w = if self.uniform {
            g.input(Tensor::filled(n, k, 1.0 / k as f64))
        } else {
            let pct = g.transpose(pc);
            let p0t = g.transpose(p0);
            let features = g.concat_cols(&[pct, p0t])?;
            let logits = self.mlp.forward(g, store, features)?;
            let logits = g.reshape(logits, n, k)?;
            g.softmax(logits, Axis::Cols)
        };
        let wt = g.transpose(w);
        let fused = g.matmul(h, wt)?;
        Ok((fused, w))
    }
}

/// `P_C` for a single `T × K` similarity matrix.
pub fn cross_rows(f: &Tensor, cross: &RowCross, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p0 = g.input(f.clone());
    let pc = cross.forward(&mut g, store, p0)?;
    Ok(g.value(pc).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
}

pub fn fuse_interests(h: &Tensor, pc: &Tensor, p0: &Tensor, fusion: &Fusion, store: &ParamStore) -> Result<FusionOutput> {
    let mut g = Graph::new();
    let hn = g.input(h.clone());
    let pcn = g.input(pc.clone());
    let p0n = g.input(p0.clone());
    let (fused, w) = fusion.forward(&mut g, store, hn, pcn, p0n)?;
    Ok(FusionOutput {
        h: g.value(fused).data().to_vec(),
        w: g.value(w).data().to_vec(),
    })
}
