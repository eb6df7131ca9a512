//! Ranking metrics, per-bucket analyses and report documents.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionLog, EVAL_NEGATIVES};
use crate::error::{Error, Result};

/// Cut-offs reported for HR and NDCG.
pub const KS: [usize; 2] = [2, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct RankMetrics {
    /// 1-based rank of the positive; tied negatives rank above it.
    pub rank: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

pub fn rank_metrics(pos: f64, negs: &[f64], ks: &[usize]) -> Result<RankMetrics> {
    if negs.len() != EVAL_NEGATIVES {
        return Err(Error::InvalidArgument {
            op: "rank_metrics",
            reason: format!("expected {EVAL_NEGATIVES} negatives, got {}", negs.len()),
        });
    }
    let rank = 1 + negs.iter().filter(|&&n| n >= pos).count();
    let hit = |k: usize| rank <= k;
    Ok(RankMetrics {
        rank,
        hr: ks.iter().map(|&k| (k, if hit(k) { 1.0 } else { 0.0 })).collect(),
        ndcg: ks
            .iter()
            .map(|&k| (k, if hit(k) { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 }))
            .collect(),
        mrr: 1.0 / rank as f64,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes"));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFinite("auc score is NaN".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Impression-weighted mean of per-user AUC over users with both classes.
pub fn gauc(per_user: &BTreeMap<u64, Vec<(f64, bool)>>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for scores in per_user.values() {
        if let Ok(a) = auc(scores) {
            num += a * scores.len() as f64;
            den += scores.len() as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("gauc needs a user with both classes"));
    }
    Ok(num / den)
}

/// Candidate scores of one evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance {
    pub user: u64,
    pub positive: f64,
    pub negatives: Vec<f64>,
    /// Fatigue-importance proxy, when computed.
    pub m: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub group: Option<String>,
    pub instances: usize,
    pub auc: f64,
    pub gauc: f64,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

pub fn evaluate(scored: &[ScoredInstance]) -> Result<MetricReport> {
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation instances"));
    }
    let mut pooled = Vec::new();
    let mut per_user: BTreeMap<u64, Vec<(f64, bool)>> = BTreeMap::new();
    let mut hr: BTreeMap<usize, f64> = KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = hr.clone();
    let mut mrr = 0.0;
    for s in scored {
        let rm = rank_metrics(s.positive, &s.negatives, &KS)?;
        for k in KS {
            *hr.get_mut(&k).unwrap() += rm.hr[&k];
            *ndcg.get_mut(&k).unwrap() += rm.ndcg[&k];
        }
        mrr += rm.mrr;
        let user = per_user.entry(s.user).or_default();
        user.push((s.positive, true));
        pooled.push((s.positive, true));
        for &n in &s.negatives {
            user.push((n, false));
            pooled.push((n, false));
        }
    }
    let n = scored.len() as f64;
    hr.values_mut().for_each(|v| *v /= n);
    ndcg.values_mut().for_each(|v| *v /= n);
    Ok(MetricReport {
        group: None,
        instances: scored.len(),
        auc: auc(&pooled)?,
        gauc: gauc(&per_user)?,
        hr,
        ndcg,
        mrr: mrr / n,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MBucket {
    Negative,
    Zero,
    Low,
    High,
}

impl MBucket {
    pub fn of(m: i64) -> Self {
        match m {
            i64::MIN..=-1 => MBucket::Negative,
            0 => MBucket::Zero,
            1..=4 => MBucket::Low,
            _ => MBucket::High,
        }
    }
}

impl fmt::Display for MBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MBucket::Negative => "m<0",
            MBucket::Zero => "m=0",
            MBucket::Low => "1<=m<5",
            MBucket::High => "m>=5",
        })
    }
}

/// One report per non-empty m bucket, in bucket order.
pub fn grouped_eval(scored: &[ScoredInstance]) -> Result<Vec<MetricReport>> {
    let mut buckets: BTreeMap<MBucket, Vec<ScoredInstance>> = BTreeMap::new();
    for s in scored {
        let m = s.m.ok_or(Error::UndefinedMetric("instance without m proxy"))?;
        buckets.entry(MBucket::of(m)).or_default().push(s.clone());
    }
    buckets
        .into_iter()
        .map(|(b, members)| {
            let mut r = evaluate(&members)?;
            r.group = Some(b.to_string());
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvtrPoint {
    /// Prior same-category engagements within the window.
    pub repeats: usize,
    pub exposures: usize,
    pub engaged: usize,
    pub rate: f64,
    /// `rate` divided by the zero-repeat rate.
    pub normalized: Option<f64>,
}

/// Engagement rate against the number of earlier engaged same-category
/// events among the user's previous `window` events.
///
/// `engaged(i)` tells whether event `i` of `log` (input order) was an
/// effective view.
pub fn evtr_curve(log: &InteractionLog, engaged: impl Fn(usize) -> bool, window: usize) -> Vec<EvtrPoint> {
    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by_key(|&i| (log.events[i].user, log.events[i].timestamp));
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut start = 0;
    while start < order.len() {
        let user = log.events[order[start]].user;
        let end = start + order[start..].iter().take_while(|&&i| log.events[i].user == user).count();
        let hits: Vec<bool> = order[start..end].iter().map(|&i| engaged(i)).collect();
        for pos in 0..end - start {
            let cat = log.events[order[start + pos]].category;
            let repeats = (pos.saturating_sub(window)..pos)
                .filter(|&j| hits[j] && log.events[order[start + j]].category == cat)
                .count();
            let slot = tally.entry(repeats).or_default();
            slot.0 += 1;
            slot.1 += usize::from(hits[pos]);
        }
        start = end;
    }
    let base = tally.get(&0).map(|&(n, e)| e as f64 / n as f64);
    tally
        .into_iter()
        .map(|(repeats, (exposures, hits))| {
            let rate = hits as f64 / exposures as f64;
            EvtrPoint {
                repeats,
                exposures,
                engaged: hits,
                rate,
                normalized: base.filter(|&b| b > 0.0).map(|b| rate / b),
            }
        })
        .collect()
}
