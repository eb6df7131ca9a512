//! Counterfactual augmentation, scalar fatigue prediction and the
//! fatigue-supervised contrastive loss.
//!
//! An augmented window replaces `N ≥ max(N_r, 1)` real positions by the
//! target, so it is at least as fatigued as the original. The loss asks the
//! predicted fatigue `f` of the original to be the lowest:
//! `L_con = −log(e^{−f} / (e^{−f} + Σ_j e^{−f′_j}))`.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::numerics::{log_sum_exp, Axis, Graph, NodeId, ParamStore, Tensor};
use crate::similarity::RecentWindow;

/// Augmented views per instance.
pub const AUGMENTATIONS: usize = 4;

pub fn count_repetitions<I: PartialEq>(window: &RecentWindow<I>, target: &I) -> usize {
    window.items.iter().filter(|&i| i == target).count()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationSpec {
    pub n_r: usize,
    pub n: usize,
    /// Replaced real positions, ascending.
    pub positions: Vec<usize>,
}

/// Replaces `N ~ U{max(N_r,1), …, T_u}` uniformly chosen real positions by
/// the target.
pub fn augment_window<I: Copy + PartialEq>(
    window: &RecentWindow<I>,
    target: I,
    rng: &mut impl Rng,
) -> Result<(RecentWindow<I>, AugmentationSpec)> {
    let t_u = window.t_u();
    if t_u == 0 {
        return Err(Error::InvalidArgument {
            op: "augment_window",
            reason: "empty window".into(),
        });
    }
    let n_r = count_repetitions(window, &target);
    let n = rng.gen_range(n_r.max(1)..=t_u);
    let mut positions = index::sample(rng, t_u, n).into_vec();
    positions.sort_unstable();
    let mut items = window.items.clone();
    for &p in &positions {
        items[p] = target;
    }
    Ok((
        RecentWindow {
            items,
            threshold: window.threshold,
        },
        AugmentationSpec { n_r, n, positions },
    ))
}

/// Per-position fatigue perceptron `2K → K → 1` with tanh.
#[derive(Clone, Debug)]
pub struct FatiguePredictor {
    pub mlp: Mlp,
}

impl FatiguePredictor {
    pub fn new(store: &mut ParamStore, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "mlp3", 2 * k, k, 1, Activation::Tanh, true, rng),
        }
    }

    /// `qc` and `q0` hold the real rows only, `(T_u·n) × K` in lane layout.
    /// Returns `f` for every lane as a `1 × n` row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, qc: NodeId, q0: NodeId, lanes: usize) -> Result<NodeId> {
        let rows = g.shape(qc)[0];
        if rows == 0 || lanes == 0 || !rows.is_multiple_of(lanes) {
            return Err(Error::InvalidArgument {
                op: "predict_fatigue",
                reason: format!("{rows} rows cannot hold a non-empty window for {lanes} lanes"),
            });
        }
        let x = g.concat_cols(&[qc, q0])?;
        let per_position = self.mlp.forward(g, store, x)?;
        let grid = g.reshape(per_position, rows / lanes, lanes)?;
        g.mean(grid, Axis::Rows)
    }
}

/// Fatigue of one `T × K` window; `mask` flags real positions.
pub fn predict_fatigue(qc: &Tensor, q0: &Tensor, mask: &[bool], predictor: &FatiguePredictor, store: &ParamStore) -> Result<f64> {
    if mask.len() != qc.rows() || qc.shape() != q0.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_fatigue",
            lhs: qc.shape(),
            rhs: [mask.len(), q0.cols()],
        });
    }
    let real: Vec<usize> = (0..mask.len()).filter(|&l| mask[l]).collect();
    let mut g = Graph::new();
    let qcn = g.input(qc.clone());
    let q0n = g.input(q0.clone());
    if real.is_empty() {
        return Err(Error::InvalidArgument {
            op: "predict_fatigue",
            reason: "no real positions".into(),
        });
    }
    let qcr = g.gather_rows(qcn, &real)?;
    let q0r = g.gather_rows(q0n, &real)?;
    let f = predictor.forward(&mut g, store, qcr, q0r, 1)?;
    g.value(f).item()
}

pub fn contrastive_loss(f: f64, f_aug: &[f64]) -> Result<f64> {
    let logits: Vec<f64> = std::iter::once(-f).chain(f_aug.iter().map(|v| -v)).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("contrastive inputs {f} {f_aug:?}")));
    }
    let loss = log_sum_exp(&logits) + f;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss for {f} {f_aug:?}")));
    }
    Ok(loss)
}

/// Row `[−f, −f′_1, …]` ready for a softmax loss with the original first.
pub fn contrastive_logits(g: &mut Graph, f: NodeId, f_aug: NodeId) -> Result<NodeId> {
    let row = g.concat_cols(&[f, f_aug])?;
    Ok(g.scale(row, -1.0))
}
