use rand::Rng;

use super::config::ModelConfig;
use crate::data::{ItemCatalog, TrainingInstance};
use crate::error::{Error, Result};
use crate::fatigue::{augment_window, contrastive_logits, FatiguePredictor, AUGMENTATIONS};
use crate::interest::{EmbeddingTable, InterestExtractor};
use crate::longterm::{CrossMode, Fusion, RowCross};
use crate::nn::Dense;
use crate::numerics::{log_sum_exp, Axis, BatchStats, Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};
use crate::seeds;
use crate::shortterm::{ColCross, ConvStack, Fru};
use crate::similarity::{ism_lanes, ism_pairs, pad_positions, truncate_recent, unit_directions};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct HeadLayer {
    dense: Dense,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Scoring perceptron: per hidden layer a bias-free linear map, batch norm
/// and ReLU, then a linear output with bias.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    layers: Vec<HeadLayer>,
    output: Dense,
}

impl ScoreHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut width = input;
        let mut layers = Vec::with_capacity(hidden.len());
        for (i, &h) in hidden.iter().enumerate() {
            let name = format!("mlp4.{i}");
            let dense = Dense::new(store, &name, width, h, false, rng);
            let gamma = store.add(format!("{name}.bn_gamma"), ParamKind::Bias, Tensor::filled(1, h, 1.0));
            let beta = store.add(format!("{name}.bn_beta"), ParamKind::Bias, Tensor::zeros(1, h));
            let running_mean = store.add(format!("{name}.bn_mean"), ParamKind::Buffer, Tensor::zeros(1, h));
            let running_var = store.add(format!("{name}.bn_var"), ParamKind::Buffer, Tensor::filled(1, h, 1.0));
            layers.push(HeadLayer {
                dense,
                gamma,
                beta,
                running_mean,
                running_var,
            });
            width = h;
        }
        let output = Dense::new(store, "mlp4.output", width, 1, true, rng);
        Self { layers, output }
    }

    /// Returns the `m × 1` output and, in training mode, the batch
    /// statistics of every normalisation layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, train: bool) -> Result<(NodeId, Vec<BatchStats>)> {
        let mut h = x;
        let mut stats = Vec::new();
        for layer in &self.layers {
            let lin = layer.dense.forward(g, store, h)?;
            let gamma = g.param(store, layer.gamma);
            let beta = g.param(store, layer.beta);
            let normed = if train {
                let (out, s) = g.batch_norm_train(lin, gamma, beta, BN_EPS)?;
                stats.push(s);
                out
            } else {
                let mean = store.get(layer.running_mean).data().to_vec();
                let var = store.get(layer.running_var).data().to_vec();
                g.batch_norm_infer(lin, gamma, beta, &mean, &var, BN_EPS)?
            };
            h = g.relu(normed);
        }
        Ok((self.output.forward(g, store, h)?, stats))
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(&self, store: &mut ParamStore, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.layers.len() {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                reason: format!("{} statistics for {} layers", stats.len(), self.layers.len()),
            });
        }
        for (layer, s) in self.layers.iter().zip(stats) {
            for (id, batch) in [(layer.running_mean, &s.mean), (layer.running_var, &s.var)] {
                for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }
}

/// Dense-index view of one instance ready for the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: u64,
    pub prefix: Vec<usize>,
    /// Positive first.
    pub candidates: Vec<usize>,
    /// Augmented recent windows of the positive, empty when the contrastive
    /// branch is off.
    pub augmented: Vec<Vec<usize>>,
}

impl Example {
    pub fn new(instance: &TrainingInstance, catalog: &ItemCatalog, threshold: usize, augment: Option<&mut dyn rand::RngCore>) -> Result<Self> {
        let prefix = instance
            .prefix_items()
            .iter()
            .map(|&i| catalog.index_of(i))
            .collect::<Result<Vec<_>>>()?;
        if prefix.is_empty() {
            return Err(Error::InvalidArgument {
                op: "example",
                reason: format!("user {} position {} has an empty history", instance.user, instance.position),
            });
        }
        let candidates = instance
            .candidates()
            .iter()
            .map(|&i| catalog.index_of(i))
            .collect::<Result<Vec<_>>>()?;
        let mut augmented = Vec::new();
        if let Some(mut rng) = augment {
            let window = truncate_recent(&prefix, threshold)?;
            for _ in 0..AUGMENTATIONS {
                augmented.push(augment_window(&window, candidates[0], &mut rng)?.0.items);
            }
        }
        Ok(Self {
            user: instance.user,
            prefix,
            candidates,
            augmented,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm batch statistics.
    Train,
    /// Batch-norm running statistics.
    Eval,
}

/// Graph nodes of one batch forward pass.
#[derive(Debug)]
pub struct BatchOutput {
    /// `B × n` final scores `y`.
    pub scores: NodeId,
    /// `B × n` predicted fatigue `f`.
    pub fatigue: NodeId,
    pub rec_loss: NodeId,
    pub con_loss: Option<NodeId>,
    /// `L_rec + α·L_con`.
    pub loss: NodeId,
    pub bn_stats: Vec<BatchStats>,
}

/// Per-example nodes; the recurrent unit runs later over the whole batch.
struct Lanes {
    long: NodeId,
    targets: NodeId,
    window: NodeId,
    qhat: Option<NodeId>,
    fatigue: NodeId,
    con_logits: Option<NodeId>,
}

const BLOCKS: [&str; 9] = ["embedding", "mlp1", "row_cross", "mlp2", "col_cross", "conv", "fru", "mlp3", "mlp4"];

/// The assembled fatigue-aware recommender.
#[derive(Clone, Debug)]
pub struct FRec {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub extractor: InterestExtractor,
    pub row_cross: RowCross,
    pub fusion: Fusion,
    pub col_cross: ColCross,
    /// Absent for the plain-GRU ablation.
    pub conv: Option<ConvStack>,
    pub fru: Fru,
    pub predictor: FatiguePredictor,
    pub head: ScoreHead,
}

impl FRec {
    /// Every block draws from its own `init` substream, so ablated variants
    /// share the initial values of the parameters they keep.
    pub fn new(config: ModelConfig, n_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(Error::InvalidArgument {
                op: "model",
                reason: "empty item catalog".into(),
            });
        }
        let block_rng = |name: &str| {
            let idx = BLOCKS.iter().position(|b| *b == name).unwrap() as u64;
            seeds::rng(seed, seeds::INIT, &[idx])
        };
        let (d, k, c) = (config.dim, config.interests, config.cross_layers);
        let ab = config.ablations;
        let cross_mode = if ab.no_cross { CrossMode::Dense } else { CrossMode::Cross };
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, d, n_items, &mut block_rng("embedding"));
        let extractor = InterestExtractor::new(&mut store, d, k, &mut block_rng("mlp1"));
        let row_cross = RowCross::new(&mut store, config.window, c, cross_mode, &mut block_rng("row_cross"));
        let fusion = Fusion::new(&mut store, config.window, ab.no_fusion, &mut block_rng("mlp2"));
        let col_cross = ColCross::new(&mut store, k, c, cross_mode, &mut block_rng("col_cross"));
        let conv = (!ab.no_fru).then(|| ConvStack::new(&mut store, 2 * k, &config.conv_channels, config.kernel_width, &mut block_rng("conv")));
        let fatigue_width = conv.as_ref().map(|cs| cs.output_width(&store).unwrap_or(2 * k));
        let fru = Fru::new(&mut store, d, fatigue_width, &mut block_rng("fru"));
        let predictor = FatiguePredictor::new(&mut store, k, &mut block_rng("mlp3"));
        let head = ScoreHead::new(&mut store, 3 * d, &config.score_hidden, &mut block_rng("mlp4"));
        Ok(Self {
            config,
            store,
            embedding,
            extractor,
            row_cross,
            fusion,
            col_cross,
            conv,
            fru,
            predictor,
            head,
        })
    }

    pub fn n_items(&self) -> usize {
        self.store.get(self.embedding.table).cols()
    }

    /// Per-candidate lanes of one example up to the recurrent unit, fatigue
    /// `1 × n` and, with augmentations, the contrastive logits `1 × (1+A)`.
    fn lanes(&self, g: &mut Graph, ex: &Example) -> Result<Lanes> {
        let store = &self.store;
        let t = self.config.window;
        let n = ex.candidates.len();
        let s = self.embedding.lookup(g, store, &ex.prefix)?;
        let (h, _) = self.extractor.forward(g, store, s)?;
        let hhat = unit_directions(g, h)?;
        let t_u = ex.prefix.len().min(t);
        let window = g.slice_cols(s, ex.prefix.len() - t_u, t_u)?;
        let targets = self.embedding.lookup(g, store, &ex.candidates)?;
        let f = ism_lanes(g, hhat, targets, window)?;

        let long = if self.fusion.uniform {
            let w = g.input(Tensor::filled(self.config.interests, n, 1.0 / self.config.interests as f64));
            g.matmul(h, w)?
        } else {
            let padded = pad_positions(g, f, t - t_u, n)?;
            let p0 = g.reshape(padded, t, n * self.config.interests)?;
            let pc = self.row_cross.forward(g, store, p0)?;
            self.fusion.forward(g, store, h, pc, p0)?.0
        };

        let qc = self.col_cross.forward(g, store, f)?;
        let qhat = match &self.conv {
            Some(conv) => {
                let input = g.concat_cols(&[qc, f])?;
                Some(conv.forward(g, store, input, n)?)
            }
            None => None,
        };
        let fatigue = self.predictor.forward(g, store, qc, f, n)?;

        let con_logits = if ex.augmented.is_empty() {
            None
        } else {
            let a = ex.augmented.len();
            if ex.augmented.iter().any(|w| w.len() != t_u) {
                return Err(Error::InvalidArgument {
                    op: "contrastive",
                    reason: format!("augmented windows must hold {t_u} items"),
                });
            }
            let flat: Vec<usize> = ex.augmented.concat();
            let history = self.embedding.lookup(g, store, &flat)?;
            let pairs: Vec<(usize, usize)> = (0..t_u).flat_map(|l| (0..a).map(move |j| (0, j * t_u + l))).collect();
            let fa = ism_pairs(g, hhat, targets, history, &pairs)?;
            let qa = self.col_cross.forward(g, store, fa)?;
            let f_aug = self.predictor.forward(g, store, qa, fa, a)?;
            let f_pos = g.slice_cols(fatigue, 0, 1)?;
            Some(contrastive_logits(g, f_pos, f_aug)?)
        };
        Ok(Lanes {
            long,
            targets,
            window,
            qhat,
            fatigue,
            con_logits,
        })
    }

    /// Short-term vectors `d × (B·n)` of all lanes of the batch.
    fn recurrent(&self, g: &mut Graph, lanes: &[Lanes], h0: NodeId, n: usize) -> Result<NodeId> {
        let d = self.config.dim;
        let t_u: Vec<usize> = lanes.iter().map(|l| g.shape(l.window)[1]).collect();
        let s = t_u.iter().copied().max().unwrap_or(0);
        let m = lanes.len() * n;
        let mut offsets = Vec::with_capacity(lanes.len());
        let mut total = 0;
        for &t in &t_u {
            offsets.push(total);
            total += t;
        }
        // Step l of lane e·n + c reads window column l of example e; finished
        // lanes read a trailing zero column.
        let mut cols = Vec::with_capacity(s * m);
        let mut rows = Vec::with_capacity(s * m);
        for l in 0..s {
            for (e, &t) in t_u.iter().enumerate() {
                for c in 0..n {
                    cols.push(if l < t { offsets[e] + l } else { total });
                    rows.push(if l < t { offsets[e] * n + l * n + c } else { total * n });
                }
            }
        }
        let mut windows: Vec<NodeId> = lanes.iter().map(|l| l.window).collect();
        windows.push(g.input(Tensor::zeros(d, 1)));
        let all = g.concat_cols(&windows)?;
        let all = g.transpose(all);
        let spread = g.gather_rows(all, &cols)?;
        let x = g.transpose(spread);
        let qhat = match lanes.first().and_then(|l| l.qhat) {
            Some(first) => {
                let width = g.shape(first)[1];
                let mut parts = lanes
                    .iter()
                    .map(|l| l.qhat.ok_or(Error::InvalidArgument {
                        op: "forward_batch",
                        reason: "fatigue features missing for some examples".into(),
                    }))
                    .collect::<Result<Vec<_>>>()?;
                parts.push(g.input(Tensor::zeros(1, width)));
                let all = g.concat_rows(&parts)?;
                Some(g.gather_rows(all, &rows)?)
            }
            None => None,
        };
        let steps: Vec<usize> = t_u.iter().flat_map(|&t| std::iter::repeat_n(t, n)).collect();
        self.fru.forward_lanes(g, &self.store, x, qhat, h0, &steps)
    }

    pub fn forward_batch(&self, g: &mut Graph, examples: &[Example], mode: Mode) -> Result<BatchOutput> {
        let Some(first) = examples.first() else {
            return Err(Error::InvalidArgument {
                op: "forward_batch",
                reason: "empty batch".into(),
            });
        };
        let n = first.candidates.len();
        if n == 0 || examples.iter().any(|e| e.candidates.len() != n) {
            return Err(Error::InvalidArgument {
                op: "forward_batch",
                reason: "every example needs the same non-zero number of candidates".into(),
            });
        }
        let lanes = examples.iter().map(|ex| self.lanes(g, ex)).collect::<Result<Vec<_>>>()?;
        let long: Vec<NodeId> = lanes.iter().map(|l| l.long).collect();
        let long = g.concat_cols(&long)?;
        let short = self.recurrent(g, &lanes, long, n)?;
        let targets: Vec<NodeId> = lanes.iter().map(|l| l.targets).collect();
        let targets = g.concat_cols(&targets)?;
        let stacked = g.concat_rows(&[long, short, targets])?;
        let x = g.transpose(stacked);
        let fatigue: Vec<NodeId> = lanes.iter().map(|l| l.fatigue).collect();
        let logits: Vec<NodeId> = lanes.iter().filter_map(|l| l.con_logits).collect();
        let (base, bn_stats) = self.head.forward(g, &self.store, x, mode == Mode::Train)?;
        let base = g.reshape(base, examples.len(), n)?;
        let fatigue = g.concat_rows(&fatigue)?;
        let penalty = g.tanh(fatigue);
        let scores = g.sub(base, penalty)?;
        let nll = g.softmax_nll(scores)?;
        let rec_loss = g.mean(nll, Axis::Rows)?;
        let con_loss = if logits.is_empty() {
            None
        } else {
            if logits.len() != examples.len() {
                return Err(Error::InvalidArgument {
                    op: "forward_batch",
                    reason: "augmentations must be present for all examples or none".into(),
                });
            }
            let rows = g.concat_rows(&logits)?;
            let nll = g.softmax_nll(rows)?;
            Some(g.mean(nll, Axis::Rows)?)
        };
        let alpha = self.config.contrastive_weight();
        let loss = match con_loss {
            Some(con) if alpha > 0.0 => {
                let weighted = g.scale(con, alpha);
                g.add(rec_loss, weighted)?
            }
            _ => rec_loss,
        };
        Ok(BatchOutput {
            scores,
            fatigue,
            rec_loss,
            con_loss,
            loss,
            bn_stats,
        })
    }

    /// Final scores `y` of every candidate, using running batch-norm
    /// statistics.
    pub fn score_examples(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, examples, Mode::Eval)?;
        let y = g.value(out.scores);
        Ok((0..y.rows()).map(|r| y.row_slice(r).to_vec()).collect())
    }
}

/// Scores and losses of a single instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreAndLoss {
    pub y_pos: f64,
    pub y_negs: Vec<f64>,
    /// Predicted fatigue per candidate, positive first.
    pub fatigue: Vec<f64>,
    pub rec_loss: f64,
    pub con_loss: f64,
    pub loss: f64,
}

/// Training-mode forward pass of one instance; augmentations come from
/// `rng` unless the contrastive branch is ablated.
pub fn forward_instance(model: &FRec, instance: &TrainingInstance, catalog: &ItemCatalog, rng: &mut dyn rand::RngCore) -> Result<ScoreAndLoss> {
    let augment = (!model.config.ablations.no_cl).then_some(rng);
    let ex = Example::new(instance, catalog, model.config.window, augment)?;
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, std::slice::from_ref(&ex), Mode::Train)?;
    let y = g.value(out.scores).row_slice(0).to_vec();
    let value = |id: NodeId| g.value(id).item();
    let loss = value(out.loss)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("instance loss for user {}", instance.user)));
    }
    Ok(ScoreAndLoss {
        y_pos: y[0],
        y_negs: y[1..].to_vec(),
        fatigue: g.value(out.fatigue).row_slice(0).to_vec(),
        rec_loss: value(out.rec_loss)?,
        con_loss: out.con_loss.map(value).transpose()?.unwrap_or(0.0),
        loss,
    })
}

/// `y = g − tanh(f)`.
pub fn score(base: f64, fatigue: f64) -> f64 {
    base - fatigue.tanh()
}

/// Softmax loss of the positive against the negatives.
pub fn rec_loss(y_pos: f64, y_negs: &[f64]) -> Result<f64> {
    let logits: Vec<f64> = std::iter::once(y_pos).chain(y_negs.iter().copied()).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("scores {logits:?}")));
    }
    Ok(log_sum_exp(&logits) - y_pos)
}

pub fn total_loss(rec: f64, con: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument {
            op: "total_loss",
            reason: format!("negative contrastive weight {alpha}"),
        });
    }
    Ok(rec + alpha * con)
}
