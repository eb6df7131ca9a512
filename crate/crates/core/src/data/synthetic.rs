use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::interactions::{Event, InteractionLog};
use crate::error::{Error, Result};
use crate::seeds;

/// Seconds between two simulated exposures of the same user.
pub const STEP_SECONDS: i64 = 600;

/// Start of the simulated clock.
pub const EPOCH_START: i64 = 1_600_000_000;

/// User simulator with latent interests and repetition fatigue.
///
/// Item `i` belongs to category `i mod n_categories`. At every step a user is
/// shown one candidate, drawn from one of their interest categories or, with
/// probability `explore_prob`, from the whole catalogue. The candidate is
/// engaged with probability `base_engage_prob · fatigue_decay^c`, where `c`
/// counts engaged exposures of the same category among the user's last
/// `window` exposures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub interests_per_user: usize,
    pub base_engage_prob: f64,
    pub fatigue_decay: f64,
    pub window: usize,
    pub steps_per_user: usize,
    pub explore_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_items: 500,
            n_categories: 20,
            interests_per_user: 3,
            base_engage_prob: 0.9,
            fatigue_decay: 0.8,
            window: 20,
            steps_per_user: 80,
            explore_prob: 0.1,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidArgument { op: "synthetic", reason });
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("interests_per_user", self.interests_per_user),
            ("window", self.window),
            ("steps_per_user", self.steps_per_user),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.interests_per_user > self.n_categories {
            return bad("interests_per_user exceeds n_categories".into());
        }
        if self.n_categories > self.n_items {
            return bad("n_categories exceeds n_items".into());
        }
        for (name, p) in [("base_engage_prob", self.base_engage_prob), ("fatigue_decay", self.fatigue_decay)] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return bad(format!("explore_prob must lie in [0, 1], got {}", self.explore_prob));
        }
        Ok(())
    }

    pub fn category_of(&self, item: u64) -> u64 {
        item % self.n_categories as u64
    }

    fn items_in_category(&self, c: usize) -> usize {
        (self.n_items - c).div_ceil(self.n_categories)
    }
}

/// Every exposure of the simulation, with its engagement outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Exposures {
    pub log: InteractionLog,
    pub engaged: Vec<bool>,
}

impl Exposures {
    pub fn engaged_log(&self) -> InteractionLog {
        InteractionLog::new(
            self.log
                .events
                .iter()
                .zip(&self.engaged)
                .filter(|(_, &e)| e)
                .map(|(ev, _)| *ev)
                .collect(),
        )
    }
}

pub fn simulate_exposures(cfg: &SyntheticConfig) -> Result<Exposures> {
    cfg.validate()?;
    let total = cfg.n_users * cfg.steps_per_user;
    let mut events = Vec::with_capacity(total);
    let mut engaged = Vec::with_capacity(total);
    for u in 0..cfg.n_users {
        let mut rng = seeds::rng(cfg.seed, seeds::DATA, &[u as u64]);
        let interests = index::sample(&mut rng, cfg.n_categories, cfg.interests_per_user).into_vec();
        let start = EPOCH_START + rng.gen_range(0..86_400);
        let mut recent: Vec<(u64, bool)> = Vec::with_capacity(cfg.steps_per_user);
        for step in 0..cfg.steps_per_user {
            let item = if rng.gen::<f64>() < cfg.explore_prob {
                rng.gen_range(0..cfg.n_items) as u64
            } else {
                let c = interests[rng.gen_range(0..interests.len())];
                (c + cfg.n_categories * rng.gen_range(0..cfg.items_in_category(c))) as u64
            };
            let category = cfg.category_of(item);
            let lo = recent.len().saturating_sub(cfg.window);
            let repeats = recent[lo..].iter().filter(|&&(c, e)| e && c == category).count();
            let p = cfg.base_engage_prob * cfg.fatigue_decay.powi(repeats as i32);
            let hit = rng.gen::<f64>() < p;
            recent.push((category, hit));
            events.push(Event {
                user: u as u64,
                item,
                category,
                timestamp: start + step as i64 * STEP_SECONDS,
            });
            engaged.push(hit);
        }
    }
    Ok(Exposures {
        log: InteractionLog::new(events),
        engaged,
    })
}

/// The engaged events of [`simulate_exposures`].
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<InteractionLog> {
    Ok(simulate_exposures(cfg)?.engaged_log())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_users: 50,
            n_items: 60,
            n_categories: 6,
            steps_per_user: 40,
            ..Default::default()
        }
    }

    /// Engagement rate per repetition count, measured directly from the
    /// simulation output.
    fn rates(ex: &Exposures, window: usize, max: usize) -> Vec<f64> {
        let mut hits = vec![0usize; max + 1];
        let mut seen = vec![0usize; max + 1];
        let mut start = 0;
        while start < ex.log.len() {
            let user = ex.log.events[start].user;
            let end = start + ex.log.events[start..].iter().take_while(|e| e.user == user).count();
            for i in start..end {
                let lo = i.saturating_sub(window).max(start);
                let c = (lo..i)
                    .filter(|&j| ex.engaged[j] && ex.log.events[j].category == ex.log.events[i].category)
                    .count();
                if c <= max {
                    seen[c] += 1;
                    hits[c] += usize::from(ex.engaged[i]);
                }
            }
            start = end;
        }
        hits.iter().zip(&seen).map(|(&h, &s)| h as f64 / s.max(1) as f64).collect()
    }

    #[test]
    fn same_seed_same_log() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let mut other = small();
        other.seed += 1;
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn items_carry_their_category() {
        let cfg = small();
        let log = generate_synthetic(&cfg).unwrap();
        assert!(log.events.iter().all(|e| e.category == e.item % 6 && e.item < 60));
    }

    #[test]
    fn no_decay_gives_flat_engagement() {
        let cfg = SyntheticConfig {
            n_users: 400,
            steps_per_user: 100,
            fatigue_decay: 1.0,
            base_engage_prob: 0.6,
            ..small()
        };
        let ex = simulate_exposures(&cfg).unwrap();
        for r in rates(&ex, cfg.window, 5) {
            assert!((r - 0.6).abs() < 0.03, "{r}");
        }
    }

    #[test]
    fn decay_gives_decreasing_engagement() {
        let cfg = SyntheticConfig {
            n_users: 1500,
            steps_per_user: 100,
            ..small()
        };
        let ex = simulate_exposures(&cfg).unwrap();
        assert!(ex.log.len() >= 100_000);
        let r = rates(&ex, cfg.window, 5);
        for (c, pair) in r.windows(2).enumerate() {
            assert!(pair[1] < pair[0], "count {c}: {r:?}");
        }
        for (c, v) in r.iter().enumerate() {
            assert!((v - 0.9 * 0.8f64.powi(c as i32)).abs() < 0.02, "count {c}: {r:?}");
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(SyntheticConfig { fatigue_decay: 0.0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { n_users: 0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { interests_per_user: 7, ..small() }.validate().is_err());
    }
}
