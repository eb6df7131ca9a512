//! Item embeddings and self-attentive multi-interest extraction.
//!
//! `A = softmax_positions(MLP₁(Sᵀ))` and `H = S·A`, where `S` is the `d × L`
//! embedded sequence and `H` holds one interest vector per column.

use rand::Rng;

use crate::data::{ItemCatalog, ItemSequence};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Mlp};
use crate::numerics::{Axis, Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

/// `d × |I|` table holding one embedding per column.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
}

impl EmbeddingTable {
    /// Uniform in `±1/√d`.
    pub fn new(store: &mut ParamStore, d: usize, n_items: usize, rng: &mut impl Rng) -> Self {
        let limit = 1.0 / (d as f64).sqrt();
        let table = store.add("embedding", ParamKind::Embedding, nn::uniform(rng, d, n_items, limit));
        Self { table }
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        g.embedding(store, self.table, ids)
    }
}

/// Columns `e_{i_1} … e_{i_L}` for the items of `seq`.
pub fn embed_sequence(seq: &ItemSequence, catalog: &ItemCatalog, table: &Tensor) -> Result<Tensor> {
    let idx = seq.items.iter().map(|&i| catalog.index_of(i)).collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= table.cols()) {
        return Err(Error::UnknownItem(seq.items[idx.iter().position(|&i| i == bad).unwrap()]));
    }
    Ok(Tensor::from_fn(table.rows(), idx.len(), |r, c| table.get(r, idx[c])))
}

/// Attention perceptron `d → d/2 → K` with tanh and no output bias.
#[derive(Clone, Debug)]
pub struct InterestExtractor {
    pub mlp: Mlp,
}

impl InterestExtractor {
    pub fn new(store: &mut ParamStore, d: usize, k: usize, rng: &mut impl Rng) -> Self {
        let hidden = (d / 2).max(1);
        Self {
            mlp: Mlp::new(store, "mlp1", d, hidden, k, Activation::Tanh, false, rng),
        }
    }

    /// Returns `(H, A)` for the `d × L` sequence node `s`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: NodeId) -> Result<(NodeId, NodeId)> {
        let st = g.transpose(s);
        let logits = self.mlp.forward(g, store, st)?;
        let a = g.softmax(logits, Axis::Rows);
        let h = g.matmul(s, a)?;
        Ok((h, a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterestMatrix {
    /// `d × K` interest vectors.
    pub h: Tensor,
    /// `L × K` attention weights, each column a distribution over positions.
    pub a: Tensor,
}

impl InterestMatrix {
    pub fn k(&self) -> usize {
        self.h.cols()
    }
}

pub fn extract_interests(s: &Tensor, extractor: &InterestExtractor, store: &ParamStore) -> Result<InterestMatrix> {
    let mut g = Graph::new();
    let sn = g.input(s.clone());
    let (h, a) = extractor.forward(&mut g, store, sn)?;
    Ok(InterestMatrix {
        h: g.value(h).clone(),
        a: g.value(a).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Evaluation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, k: usize, seed: u64) -> (ParamStore, InterestExtractor, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ex = InterestExtractor::new(&mut store, d, k, &mut rng);
        (store, ex, rng)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn embedding_columns_follow_items() {
        let catalog = ItemCatalog::from_pairs([(7, 0), (3, 0), (9, 1)]);
        let table = Tensor::from_fn(2, 3, |r, c| (10 * r + c) as f64);
        let seq = ItemSequence {
            user: 0,
            items: vec![9, 3, 9],
            categories: vec![1, 0, 1],
            timestamps: vec![0, 1, 2],
        };
        let s = embed_sequence(&seq, &catalog, &table).unwrap();
        assert_eq!(s.column_vec(0), vec![2.0, 12.0]);
        assert_eq!(s.column_vec(1), vec![0.0, 10.0]);
        assert_eq!(s.column_vec(0), s.column_vec(2));
        let swapped = ItemSequence {
            items: vec![3, 9, 9],
            ..seq.clone()
        };
        let t = embed_sequence(&swapped, &catalog, &table).unwrap();
        assert_eq!(t.column_vec(0), s.column_vec(1));
        assert_eq!(t.column_vec(1), s.column_vec(0));
        let unknown = ItemSequence { items: vec![4], ..seq };
        assert!(matches!(embed_sequence(&unknown, &catalog, &table), Err(Error::UnknownItem(4))));
    }

    #[test]
    fn hidden_width_is_half_the_input() {
        let (store, ex, _) = setup(40, 4, 0);
        assert_eq!(store.get(ex.mlp.hidden.weight).shape(), [40, 20]);
        assert_eq!(store.get(ex.mlp.output.weight).shape(), [20, 4]);
        assert!(ex.mlp.output.bias.is_none());
    }

    #[test]
    fn identical_columns_give_identical_interests() {
        let (store, ex, _) = setup(6, 4, 1);
        let e = [0.3, -0.2, 0.9, 0.0, 1.5, -0.7];
        let s = Tensor::from_fn(6, 5, |r, _| e[r]);
        let im = extract_interests(&s, &ex, &store).unwrap();
        for k in 0..4 {
            for r in 0..6 {
                assert!((im.h.get(r, k) - e[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_item_has_unit_attention() {
        let (store, ex, mut rng) = setup(6, 4, 2);
        let s = random(&mut rng, 6, 1);
        let im = extract_interests(&s, &ex, &store).unwrap();
        assert_eq!(im.a.data(), &[1.0; 4]);
        for k in 0..4 {
            assert_eq!(im.h.column_vec(k), s.column_vec(0));
        }
    }

    #[test]
    fn random_case_matches_direct_evaluation() {
        let (store, ex, mut rng) = setup(8, 4, 3);
        let s = random(&mut rng, 8, 5);
        let im = extract_interests(&s, &ex, &store).unwrap();
        for k in 0..4 {
            let total: f64 = (0..5).map(|l| im.a.get(l, k)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        // Independent evaluation with plain loops.
        let w1 = store.get(ex.mlp.hidden.weight);
        let b1 = store.get(ex.mlp.hidden.bias.unwrap());
        let w2 = store.get(ex.mlp.output.weight);
        let mut logits = [[0.0; 4]; 5];
        for (l, row) in logits.iter_mut().enumerate() {
            let hidden: Vec<f64> = (0..4)
                .map(|j| ((0..8).map(|i| s.get(i, l) * w1.get(i, j)).sum::<f64>() + b1.get(0, j)).tanh())
                .collect();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|j| hidden[j] * w2.get(j, k)).sum();
            }
        }
        for k in 0..4 {
            let z: f64 = (0..5).map(|l| logits[l][k].exp()).sum();
            for l in 0..5 {
                assert!((im.a.get(l, k) - logits[l][k].exp() / z).abs() < 1e-12);
            }
            for r in 0..8 {
                let hk: f64 = (0..5).map(|l| s.get(r, l) * im.a.get(l, k)).sum();
                assert!((im.h.get(r, k) - hk).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_interests_stay_in_range() {
        let (store, ex, mut rng) = setup(1, 3, 4);
        for _ in 0..50 {
            let s = random(&mut rng, 1, 7);
            let im = extract_interests(&s, &ex, &store).unwrap();
            let lo = s.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(im.h.data().iter().all(|&h| h >= lo - 1e-12 && h <= hi + 1e-12));
        }
    }

    #[test]
    fn attention_ignores_per_channel_shift() {
        let (store, ex, mut rng) = setup(6, 4, 5);
        let s = random(&mut rng, 6, 5);
        let before = extract_interests(&s, &ex, &store).unwrap();
        // A constant added to channel 2's logits at every position.
        let mut b = Tensor::zeros(1, 4);
        b.set(0, 2, 3.7);
        let hidden_b = store.get(ex.mlp.hidden.bias.unwrap()).clone();
        let mut shifted = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let ex2 = InterestExtractor {
            mlp: Mlp::new(&mut shifted, "mlp1", 6, 3, 4, Activation::Tanh, true, &mut rng2),
        };
        shifted.set(ex2.mlp.hidden.weight, store.get(ex.mlp.hidden.weight).clone()).unwrap();
        shifted.set(ex2.mlp.hidden.bias.unwrap(), hidden_b).unwrap();
        shifted.set(ex2.mlp.output.weight, store.get(ex.mlp.output.weight).clone()).unwrap();
        shifted.set(ex2.mlp.output.bias.unwrap(), b).unwrap();
        let after = extract_interests(&s, &ex2, &shifted).unwrap();
        for (x, y) in before.a.data().iter().zip(after.a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (store, ex, mut rng) = setup(6, 3, 6);
        let s0 = random(&mut rng, 6, 4);
        let probe = random(&mut rng, 6, 3);
        let report = finite_difference_check(
            |x, want| {
                let mut g = Graph::new();
                let s = g.input(Tensor::from_vec(6, 4, x.to_vec())?);
                let (h, _) = ex.forward(&mut g, &store, s)?;
                let p = g.input(probe.clone());
                let hp = g.mul(h, p)?;
                let loss = g.sum(hp);
                let value = g.value(loss).item()?;
                let grad = if want { Some(g.backward(loss)?.node(s).unwrap().data().to_vec()) } else { None };
                Ok(Evaluation::smooth(value, grad))
            },
            s0.data(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
