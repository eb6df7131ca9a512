use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::interactions::{is_header, parse_row, InteractionLog};
use crate::error::{Error, Result};
use crate::seeds;

/// Chronological interactions of one user.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemSequence {
    pub user: u64,
    pub items: Vec<u64>,
    pub categories: Vec<u64>,
    pub timestamps: Vec<i64>,
}

impl ItemSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keeps the most recent `max_len` interactions.
    pub fn truncate_recent(&mut self, max_len: usize) {
        if self.len() > max_len {
            let drop = self.len() - max_len;
            self.items.drain(..drop);
            self.categories.drain(..drop);
            self.timestamps.drain(..drop);
        }
    }

    fn push(&mut self, item: u64, category: u64, timestamp: i64) {
        self.items.push(item);
        self.categories.push(category);
        self.timestamps.push(timestamp);
    }
}

/// Groups a log into per-user sequences ordered by user id.
pub fn build_sequences(log: &InteractionLog) -> Vec<ItemSequence> {
    let mut out: Vec<ItemSequence> = Vec::new();
    for e in log.sorted() {
        if out.last().is_none_or(|s| s.user != e.user) {
            out.push(ItemSequence {
                user: e.user,
                ..Default::default()
            });
        }
        out.last_mut().unwrap().push(e.item, e.category, e.timestamp);
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn negative_count(self) -> usize {
        match self {
            Split::Train => TRAIN_NEGATIVES,
            Split::Valid | Split::Test => EVAL_NEGATIVES,
        }
    }
}

pub const TRAIN_NEGATIVES: usize = 4;
pub const EVAL_NEGATIVES: usize = 9;

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 8, valid: 1, test: 1 }
    }
}

impl SplitRatios {
    /// Target counts for `n` candidate targets: train and validation take
    /// their ceiling share in that order, test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.valid + self.test;
        let ceil = |r: usize| (n * r).div_ceil(total);
        let train = ceil(self.train).min(n);
        let valid = ceil(self.valid).min(n - train);
        (train, valid, n - train - valid)
    }
}

/// Assigns each target position `1..L_u` of `seq` to a split. Sequences
/// shorter than 3 yield nothing.
pub fn chronological_split(seq: &ItemSequence, ratios: SplitRatios) -> Vec<(usize, Split)> {
    if seq.len() < 3 {
        log::debug!("user {} has {} interactions; no instances emitted", seq.user, seq.len());
        return Vec::new();
    }
    let (train, valid, _) = ratios.counts(seq.len() - 1);
    (1..seq.len())
        .map(|pos| {
            let rank = pos - 1;
            let split = if rank < train {
                Split::Train
            } else if rank < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            (pos, split)
        })
        .collect()
}

/// A sequence together with the split of every position. Position 0 is
/// never a target and is labelled [`Split::Train`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub sequence: Arc<ItemSequence>,
    pub labels: Vec<Split>,
}

/// k-core filtering, per-user truncation to `max_len` and chronological
/// splitting. Users left with fewer than 3 interactions are dropped.
pub fn prepare_splits(log: &InteractionLog, k_core: usize, max_len: usize, ratios: SplitRatios) -> Vec<LabeledSequence> {
    let filtered = super::interactions::apply_k_core(log, k_core);
    build_sequences(&filtered)
        .into_iter()
        .filter_map(|mut seq| {
            seq.truncate_recent(max_len);
            let assigned = chronological_split(&seq, ratios);
            if assigned.is_empty() {
                return None;
            }
            let mut labels = vec![Split::Train; seq.len()];
            for (pos, split) in assigned {
                labels[pos] = split;
            }
            Some(LabeledSequence {
                sequence: Arc::new(seq),
                labels,
            })
        })
        .collect()
}

pub fn write_split_file<W: Write>(sequences: &[LabeledSequence], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "user_id\titem_id\tcategory_id\ttimestamp\tsplit")?;
    for ls in sequences {
        let s = &ls.sequence;
        for p in 0..s.len() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", s.user, s.items[p], s.categories[p], s.timestamps[p], ls.labels[p])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_split_file(sequences: &[LabeledSequence], path: &Path) -> Result<()> {
    write_split_file(sequences, File::create(path)?)
}

/// Reads a split-annotated log. Rows of one user must be contiguous and
/// chronological, as written by [`write_split_file`].
pub fn load_split_file(path: &Path) -> Result<Vec<LabeledSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<(ItemSequence, Vec<Split>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let number = idx + 1;
        if line.trim().is_empty() || (number == 1 && is_header(&line)) {
            continue;
        }
        let (e, rest) = parse_row(&line, path, number)?;
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: number,
            reason,
        };
        let [label] = rest.as_slice() else {
            return Err(parse_err(format!("expected 5 fields, found {}", 4 + rest.len())));
        };
        let split: Split = label.trim().parse().map_err(parse_err)?;
        match out.last_mut() {
            Some((seq, labels)) if seq.user == e.user => {
                if *seq.timestamps.last().unwrap() > e.timestamp {
                    return Err(parse_err("timestamps of a user must be non-decreasing".into()));
                }
                seq.push(e.item, e.category, e.timestamp);
                labels.push(split);
            }
            _ => {
                let mut seq = ItemSequence {
                    user: e.user,
                    ..Default::default()
                };
                seq.push(e.item, e.category, e.timestamp);
                out.push((seq, vec![split]));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(out
        .into_iter()
        .map(|(seq, labels)| LabeledSequence {
            sequence: Arc::new(seq),
            labels,
        })
        .collect())
}

/// Item vocabulary: dense index and category for every known item id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    ids: Vec<u64>,
    categories: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl ItemCatalog {
    /// Items are indexed in ascending id order.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut pairs: Vec<(u64, u64)> = pairs.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        let ids: Vec<u64> = pairs.iter().map(|p| p.0).collect();
        let categories = pairs.iter().map(|p| p.1).collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { ids, categories, index }
    }

    pub fn from_log(log: &InteractionLog) -> Self {
        Self::from_pairs(log.events.iter().map(|e| (e.item, e.category)))
    }

    pub fn from_sequences(sequences: &[LabeledSequence]) -> Self {
        Self::from_pairs(sequences.iter().flat_map(|ls| {
            let s = &ls.sequence;
            s.items.iter().copied().zip(s.categories.iter().copied()).collect::<Vec<_>>()
        }))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn index_of(&self, item: u64) -> Result<usize> {
        self.index.get(&item).copied().ok_or(Error::UnknownItem(item))
    }

    pub fn category_of(&self, item: u64) -> Result<u64> {
        self.index.get(&item).map(|&i| self.categories[i]).ok_or(Error::MissingCategory(item))
    }
}

/// One prediction target with the history before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: u64,
    /// Full (truncated) sequence the target was taken from.
    pub sequence: Arc<ItemSequence>,
    /// Index of the target in `sequence`; the prefix is everything before it.
    pub position: usize,
    pub negatives: Vec<u64>,
    pub split: Split,
}

impl TrainingInstance {
    pub fn target(&self) -> u64 {
        self.sequence.items[self.position]
    }

    pub fn target_category(&self) -> u64 {
        self.sequence.categories[self.position]
    }

    pub fn target_timestamp(&self) -> i64 {
        self.sequence.timestamps[self.position]
    }

    pub fn prefix_items(&self) -> &[u64] {
        &self.sequence.items[..self.position]
    }

    pub fn prefix_categories(&self) -> &[u64] {
        &self.sequence.categories[..self.position]
    }

    pub fn prefix_timestamps(&self) -> &[i64] {
        &self.sequence.timestamps[..self.position]
    }

    pub fn prefix(&self) -> ItemSequence {
        ItemSequence {
            user: self.user,
            items: self.prefix_items().to_vec(),
            categories: self.prefix_categories().to_vec(),
            timestamps: self.prefix_timestamps().to_vec(),
        }
    }

    /// Positive first, then negatives.
    pub fn candidates(&self) -> Vec<u64> {
        std::iter::once(self.target()).chain(self.negatives.iter().copied()).collect()
    }
}

/// Draws `n` distinct items uniformly from `vocab` without `target`.
pub fn sample_negatives(target: u64, n: usize, vocab: &[u64], rng: &mut impl Rng) -> Result<Vec<u64>> {
    let skip = vocab.iter().position(|&v| v == target);
    let available = vocab.len() - usize::from(skip.is_some());
    if available < n || vocab.len() <= n {
        return Err(Error::VocabularyTooSmall {
            requested: n,
            available,
        });
    }
    Ok(index::sample(rng, available, n)
        .into_iter()
        .map(|i| match skip {
            Some(s) if i >= s => vocab[i + 1],
            _ => vocab[i],
        })
        .collect())
}

/// Expands labelled sequences into instances, drawing negatives from the
/// catalog with one stream per `(user, position)`.
pub fn build_instances(sequences: &[LabeledSequence], catalog: &ItemCatalog, seed: u64) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for ls in sequences {
        let seq = &ls.sequence;
        for pos in 1..seq.len() {
            let split = ls.labels[pos];
            let mut rng = seeds::rng(seed, seeds::NEGATIVES, &[seq.user, pos as u64]);
            let negatives = sample_negatives(seq.items[pos], split.negative_count(), catalog.ids(), &mut rng)?;
            out.push(TrainingInstance {
                user: seq.user,
                sequence: Arc::clone(seq),
                position: pos,
                negatives,
                split,
            });
        }
    }
    Ok(out)
}

/// Three hours, the default look-back for the fatigue-importance proxy.
pub const M_PROXY_HORIZON: i64 = 3 * 3600;

/// `Σ_n (m_n − m_p)` where `m_x` counts prefix items within `horizon`
/// seconds before the target that share the category of candidate `x`.
pub fn compute_m_proxy(instance: &TrainingInstance, catalog: &ItemCatalog, horizon: i64) -> Result<i64> {
    let t = instance.target_timestamp();
    let recent: Vec<u64> = instance
        .prefix_timestamps()
        .iter()
        .zip(instance.prefix_categories())
        .filter(|(&ts, _)| t - ts <= horizon)
        .map(|(_, &c)| c)
        .collect();
    let count = |c: u64| recent.iter().filter(|&&r| r == c).count() as i64;
    let m_pos = count(instance.target_category());
    instance
        .negatives
        .iter()
        .map(|&n| catalog.category_of(n).map(|c| count(c) - m_pos))
        .sum()
}
