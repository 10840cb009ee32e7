//! Synthetic impression-log generator with planted context signal.
//!
//! Each user carries latent preferred categories. Pages are themed on a
//! preference with probability `interest_sharpness`; themed pages draw a
//! `candidate_personalization` fraction of their items from the theme, so
//! page composition reflects the personalization of the serving system.
//! Click probability rises for preferred-category items and, independently,
//! for items that co-occur with a same-category neighbor on the page
//! (`context_lift`) - the comparison effect the explicit context models.

use super::log::{ImpressionLog, ImpressionRecord};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SyntheticWorldConfig {
    pub n_users: u64,
    pub n_items: u64,
    pub n_categories: u32,
    /// Probability that a page is themed on one of the user's preferred
    /// categories.
    pub interest_sharpness: f64,
    /// Multiplicative click-rate lift when an item has at least one
    /// same-category neighbor on its page.
    pub context_lift: f64,
    /// Fraction of a themed page's items drawn from the theme category.
    pub candidate_personalization: f64,
    pub seed: u64,
    /// Items per page (P).
    pub page_size: usize,
    /// Mean total pages per user; drawn geometrically and clamped.
    pub mean_pages_per_user: f64,
    pub max_pages_per_user: usize,
    /// Latent preferred categories per user.
    pub n_pref_categories: usize,
    pub base_click_rate: f64,
    /// Click-rate multiplier for preferred-category items.
    pub preferred_click_boost: f64,
    /// Click-rate decay per position: p /= 1 + decay * (position - 1).
    pub position_decay: f64,
    /// Days in the simulated window; page timestamps are uniform over it.
    pub n_days: u64,
    /// When set, themed pages carry exactly this many theme items instead
    /// of a random fraction (used by the top-k sweep worlds).
    pub theme_items_exact: Option<usize>,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_users: 18_000,
            n_items: 2_000,
            n_categories: 20,
            interest_sharpness: 0.8,
            context_lift: 3.0,
            candidate_personalization: 0.7,
            seed: 1,
            page_size: 5,
            mean_pages_per_user: 2.9,
            max_pages_per_user: 8,
            n_pref_categories: 2,
            base_click_rate: 0.05,
            preferred_click_boost: 4.0,
            position_decay: 0.15,
            n_days: 30,
            theme_items_exact: None,
        }
    }
}

impl SyntheticWorldConfig {
    /// No planted context signal: unthemed pages, no co-occurrence lift.
    /// Clicks depend on latent preference only.
    pub fn null_world() -> Self {
        SyntheticWorldConfig {
            interest_sharpness: 0.0,
            context_lift: 1.0,
            ..SyntheticWorldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("interest_sharpness", self.interest_sharpness),
            ("candidate_personalization", self.candidate_personalization),
            ("base_click_rate", self.base_click_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.context_lift < 1.0 {
            return Err(Error::Config(format!(
                "context_lift = {} must be >= 1",
                self.context_lift
            )));
        }
        if self.n_categories == 0 || self.n_items < self.n_categories as u64 {
            return Err(Error::Config("need at least one item per category".into()));
        }
        if self.page_size == 0 || self.n_days == 0 {
            return Err(Error::Config("page_size and n_days must be positive".into()));
        }
        if self.n_pref_categories == 0 || self.n_pref_categories > self.n_categories as usize {
            return Err(Error::Config("n_pref_categories outside 1..=n_categories".into()));
        }
        if let Some(m) = self.theme_items_exact {
            if m > self.page_size {
                return Err(Error::Config("theme_items_exact exceeds page_size".into()));
            }
        }
        if self.preferred_click_boost < 1.0 || self.position_decay < 0.0 {
            return Err(Error::Config("boost must be >= 1 and decay >= 0".into()));
        }
        Ok(())
    }
}

pub fn item_category(item: u64, n_categories: u32) -> u32 {
    (item % n_categories as u64) as u32
}

pub fn item_price_bucket(item: u64) -> u32 {
    ((item.wrapping_mul(7919)) % 10) as u32 + 1
}

/// Geometric draw on {1, 2, ...} with the given mean.
fn sample_pages(rng: &mut ChaCha8Rng, mean: f64, max: usize) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let mut n = 1usize;
    while n < max && rng.gen_range(0.0..1.0) > p {
        n += 1;
    }
    n
}

fn sample_item_from_category(rng: &mut ChaCha8Rng, cat: u32, config: &SyntheticWorldConfig) -> u64 {
    let per_cat = config.n_items / config.n_categories as u64;
    cat as u64 + config.n_categories as u64 * rng.gen_range(0..per_cat)
}

pub fn generate_logs(config: &SyntheticWorldConfig) -> Result<ImpressionLog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut page_counter = 0u64;

    for user in 0..config.n_users {
        let mut prefs: Vec<u32> = Vec::with_capacity(config.n_pref_categories);
        while prefs.len() < config.n_pref_categories {
            let c = rng.gen_range(0..config.n_categories);
            if !prefs.contains(&c) {
                prefs.push(c);
            }
        }

        let n_pages = sample_pages(&mut rng, config.mean_pages_per_user, config.max_pages_per_user);
        let mut days: Vec<u64> = (0..n_pages).map(|_| rng.gen_range(0..config.n_days)).collect();
        days.sort_unstable();

        for &day in &days {
            let themed = rng.gen_range(0.0..1.0) < config.interest_sharpness;
            let theme = prefs[rng.gen_range(0..prefs.len())];

            // Distinct items per page; themed slots come first and the page
            // is shuffled afterwards so position carries no theme signal.
            let mut items: Vec<u64> = Vec::with_capacity(config.page_size);
            for slot in 0..config.page_size {
                let from_theme = themed
                    && match config.theme_items_exact {
                        Some(m) => slot < m,
                        None => rng.gen_range(0.0..1.0) < config.candidate_personalization,
                    };
                let mut item = if from_theme {
                    sample_item_from_category(&mut rng, theme, config)
                } else {
                    rng.gen_range(0..config.n_items)
                };
                let mut tries = 0;
                while items.contains(&item) {
                    item = if from_theme && tries < 20 {
                        sample_item_from_category(&mut rng, theme, config)
                    } else {
                        rng.gen_range(0..config.n_items)
                    };
                    tries += 1;
                }
                items.push(item);
            }
            for i in (1..items.len()).rev() {
                let j = rng.gen_range(0..=i);
                items.swap(i, j);
            }

            let cats: Vec<u32> = items
                .iter()
                .map(|&it| item_category(it, config.n_categories))
                .collect();
            page_counter += 1;
            for (idx, (&item, &cat)) in items.iter().zip(&cats).enumerate() {
                let position = idx as u32 + 1;
                let mut p = config.base_click_rate;
                if prefs.contains(&cat) {
                    p *= config.preferred_click_boost;
                }
                let has_companion = cats.iter().enumerate().any(|(j, &c)| j != idx && c == cat);
                if has_companion {
                    p *= config.context_lift;
                }
                p /= 1.0 + config.position_decay * (position as f64 - 1.0);
                p = p.min(0.95);
                let clicked = u8::from(rng.gen_range(0.0..1.0) < p);
                records.push(ImpressionRecord {
                    user_id: user,
                    page_id: page_counter,
                    timestamp: day,
                    item_id: item,
                    category_id: cat,
                    price_bucket: item_price_bucket(item),
                    position,
                    clicked,
                });
            }
        }
    }
    Ok(ImpressionLog { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_logs() {
        let config = SyntheticWorldConfig {
            n_users: 50,
            ..SyntheticWorldConfig::default()
        };
        let a = generate_logs(&config).unwrap();
        let b = generate_logs(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_logs_satisfy_page_invariants() {
        let config = SyntheticWorldConfig {
            n_users: 100,
            ..SyntheticWorldConfig::default()
        };
        let log = generate_logs(&config).unwrap();
        log.validate().unwrap();
        for pages in log.pages_by_user().values() {
            let mut last = 0;
            for p in pages {
                assert!(p.timestamp >= last);
                last = p.timestamp;
                assert_eq!(p.items.len(), config.page_size);
            }
            assert!(pages.len() <= config.max_pages_per_user);
        }
    }

    /// Click rate conditioned on same-category co-occurrence, along with
    /// the unconditioned complement.
    fn co_occurrence_rates(log: &ImpressionLog) -> ((f64, u64), (f64, u64)) {
        let mut with = (0u64, 0u64);
        let mut without = (0u64, 0u64);
        for pages in log.pages_by_user().values() {
            for page in pages {
                for (i, r) in page.items.iter().enumerate() {
                    let companion = page
                        .items
                        .iter()
                        .enumerate()
                        .any(|(j, o)| j != i && o.category_id == r.category_id);
                    let slot = if companion { &mut with } else { &mut without };
                    slot.0 += r.clicked as u64;
                    slot.1 += 1;
                }
            }
        }
        (
            (with.0 as f64 / with.1 as f64, with.1),
            (without.0 as f64 / without.1 as f64, without.1),
        )
    }

    #[test]
    fn null_world_shows_no_co_occurrence_excess() {
        // About 1e5 impressions; with no lift and no theming, items with a
        // same-category neighbor click at the same rate as items without,
        // within 3 sigma of the pooled two-proportion estimate.
        let config = SyntheticWorldConfig {
            n_users: 7_000,
            ..SyntheticWorldConfig::null_world()
        };
        let log = generate_logs(&config).unwrap();
        assert!(log.records.len() > 90_000);
        let ((rate_with, n_with), (rate_without, n_without)) = co_occurrence_rates(&log);
        let pooled = (rate_with * n_with as f64 + rate_without * n_without as f64)
            / (n_with + n_without) as f64;
        let sigma = (pooled * (1.0 - pooled) * (1.0 / n_with as f64 + 1.0 / n_without as f64)).sqrt();
        assert!(
            (rate_with - rate_without).abs() <= 3.0 * sigma,
            "null world lift: {rate_with} vs {rate_without} (sigma {sigma})"
        );
    }

    #[test]
    fn lifted_world_clicks_co_occurring_items_more() {
        let base = SyntheticWorldConfig {
            n_users: 4_000,
            ..SyntheticWorldConfig::default()
        };
        let lifted = generate_logs(&base).unwrap();
        let ((rate_with, _), (rate_without, _)) = co_occurrence_rates(&lifted);
        assert!(
            rate_with > rate_without * 1.5,
            "context lift not visible: {rate_with} vs {rate_without}"
        );

        let null = generate_logs(&SyntheticWorldConfig {
            n_users: 4_000,
            ..SyntheticWorldConfig::null_world()
        })
        .unwrap();
        let ((null_with, _), _) = co_occurrence_rates(&null);
        assert!(rate_with > null_with, "{rate_with} vs null {null_with}");
    }

    #[test]
    fn exact_theme_count_is_honored() {
        let config = SyntheticWorldConfig {
            n_users: 200,
            interest_sharpness: 1.0,
            theme_items_exact: Some(3),
            ..SyntheticWorldConfig::default()
        };
        let log = generate_logs(&config).unwrap();
        for pages in log.pages_by_user().values() {
            for page in pages {
                let mut counts = std::collections::BTreeMap::new();
                for r in &page.items {
                    *counts.entry(r.category_id).or_insert(0u32) += 1;
                }
                // At least one category appears >= 3 times (the theme; the
                // two filler items occasionally add to it).
                assert!(
                    counts.values().any(|&c| c >= 3),
                    "page lacks a 3-item theme cluster"
                );
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = SyntheticWorldConfig::default();
        c.context_lift = 0.5;
        assert!(c.validate().is_err());
        let mut c = SyntheticWorldConfig::default();
        c.interest_sharpness = 1.5;
        assert!(c.validate().is_err());
        let mut c = SyntheticWorldConfig::default();
        c.n_items = 5;
        assert!(c.validate().is_err());
    }
}
