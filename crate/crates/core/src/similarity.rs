//! Recent-window truncation and the interest-aware similarity matrix.
//!
//! For a target `e_t`, a history item `e_l` and interest `H_k`,
//! `F[l, k] = 1 / (1 + |e_tᵀĤ_k − e_lᵀĤ_k|)` with `Ĥ_k = H_k / ‖H_k‖`.
//! Windows shorter than the threshold `T` are zero-padded after the real
//! positions.
//!
//! Batched matrices use a position-major lane layout: with `n` lanes, row
//! `l·n + c` holds position `l` of lane `c`.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Norms below this are treated as degenerate interests.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// The last `T_u = min(T, L_u)` items of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecentWindow<I> {
    pub items: Vec<I>,
    pub threshold: usize,
}

impl<I> RecentWindow<I> {
    pub fn t_u(&self) -> usize {
        self.items.len()
    }

    /// One flag per slot of the `T`-long window; real positions come first.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.threshold).map(|l| l < self.items.len()).collect()
    }

    pub fn padding(&self) -> usize {
        self.threshold - self.items.len()
    }
}

pub fn truncate_recent<I: Copy>(items: &[I], threshold: usize) -> Result<RecentWindow<I>> {
    if threshold == 0 {
        return Err(Error::InvalidArgument {
            op: "truncate_recent",
            reason: "threshold must be at least 1".into(),
        });
    }
    let start = items.len().saturating_sub(threshold);
    Ok(RecentWindow {
        items: items[start..].to_vec(),
        threshold,
    })
}

/// Columns of `h` scaled to unit length. A column with norm below
/// [`DEGENERATE_NORM`] is replaced by the direction `1/√d · 1`.
pub fn unit_directions(g: &mut Graph, h: NodeId) -> Result<NodeId> {
    let [d, k] = g.shape(h);
    let sq = g.mul(h, h)?;
    let ones = g.input(Tensor::filled(1, d, 1.0));
    let norm_sq = g.matmul(ones, sq)?;
    let degenerate: Vec<bool> = g.value(norm_sq).data().iter().map(|v| v.sqrt() < DEGENERATE_NORM).collect();
    if !degenerate.contains(&true) {
        let norm = g.sqrt(norm_sq)?;
        let inv = g.reciprocal(norm)?;
        let inv = g.broadcast_rows(inv, d)?;
        return g.mul(h, inv);
    }
    log::warn!("degenerate interest vector (norm below {DEGENERATE_NORM}); using fallback direction");
    let guard = g.input(Tensor::from_fn(1, k, |_, c| if degenerate[c] { 1.0 } else { 0.0 }));
    let safe = g.add(norm_sq, guard)?;
    let norm = g.sqrt(safe)?;
    let inv = g.reciprocal(norm)?;
    let inv = g.broadcast_rows(inv, d)?;
    let scaled = g.mul(h, inv)?;
    let fill = 1.0 / (d as f64).sqrt();
    let fallback = g.input(Tensor::from_fn(d, k, |_, c| if degenerate[c] { fill } else { 0.0 }));
    g.add(scaled, fallback)
}

/// Similarity rows for explicit `(target column, history column)` pairs.
///
/// `targets` is `d × a`, `history` is `d × b`, `hhat` is `d × K` with unit
/// columns. Returns `pairs.len() × K`.
pub fn ism_pairs(g: &mut Graph, hhat: NodeId, targets: NodeId, history: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
    let tt = g.transpose(targets);
    let pt = g.matmul(tt, hhat)?;
    let ht = g.transpose(history);
    let ph = g.matmul(ht, hhat)?;
    let ti: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let hi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let gt = g.gather_rows(pt, &ti)?;
    let gh = g.gather_rows(ph, &hi)?;
    let diff = g.sub(gt, gh)?;
    let dist = g.abs(diff);
    let denom = g.add_scalar(dist, 1.0);
    g.reciprocal(denom)
}

/// Real rows of the similarity matrix of every target column of `targets`
/// against the shared `d × T_u` window, in lane layout `(T_u·n) × K`.
pub fn ism_lanes(g: &mut Graph, hhat: NodeId, targets: NodeId, window: NodeId) -> Result<NodeId> {
    let n = g.shape(targets)[1];
    let t_u = g.shape(window)[1];
    let pairs: Vec<(usize, usize)> = (0..t_u).flat_map(|l| (0..n).map(move |c| (c, l))).collect();
    ism_pairs(g, hhat, targets, window, &pairs)
}

/// Appends zero rows for `padding` positions of `lanes` lanes.
pub fn pad_positions(g: &mut Graph, f: NodeId, padding: usize, lanes: usize) -> Result<NodeId> {
    if padding == 0 {
        return Ok(f);
    }
    let k = g.shape(f)[1];
    let zeros = g.input(Tensor::zeros(padding * lanes, k));
    g.concat_rows(&[f, zeros])
}

/// `T × K` similarity matrix of `target` against the `d × T_u` window.
pub fn compute_ism(target: &[f64], window: &Tensor, h: &Tensor, threshold: usize) -> Result<Tensor> {
    let t_u = window.cols();
    if t_u > threshold || target.len() != window.rows() || h.rows() != window.rows() {
        return Err(Error::ShapeMismatch {
            op: "compute_ism",
            lhs: [target.len(), threshold],
            rhs: window.shape(),
        });
    }
    let mut g = Graph::new();
    let hn = g.input(h.clone());
    let hhat = unit_directions(&mut g, hn)?;
    let tn = g.input(Tensor::column(target.to_vec()));
    let wn = g.input(window.clone());
    let f = if t_u == 0 {
        g.input(Tensor::zeros(0, h.cols()))
    } else {
        ism_lanes(&mut g, hhat, tn, wn)?
    };
    let f = pad_positions(&mut g, f, threshold - t_u, 1)?;
    Ok(g.value(f).clone())
}
