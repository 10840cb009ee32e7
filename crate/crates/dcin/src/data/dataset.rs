//! Impression logs to labeled CTR samples.
//!
//! Per user, pages are sorted by time; the last page supplies one sample
//! per ad (label = clicked) and the earlier pages supply the click
//! sequence with each click's enclosing exposure page. Candidate sets are
//! sampled from co-occurrence lists built exclusively from a disjoint user
//! partition, so candidate construction never sees the training users.

use super::log::{ImpressionLog, ImpressionRecord, Page};
use crate::embed::{ClickEntry, FeatureField, FeatureSchema, RawSample, Vocabulary};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const FIELD_USER_ID: &str = "user_id";
pub const FIELD_ITEM_ID: &str = "item_id";
pub const FIELD_CATEGORY: &str = "category";
pub const FIELD_PRICE: &str = "price_bucket";
pub const FIELD_POSITION: &str = "position";
pub const FIELD_DAYPART: &str = "daypart";

/// Which users are reserved for building co-occurrence candidates.
#[derive(Clone, Debug)]
pub enum PartitionSpec {
    /// Seeded shuffle, first ceil(fraction * n) users.
    Fraction(f64),
    /// Explicit raw user ids.
    Explicit(Vec<u64>),
}

#[derive(Clone, Debug)]
pub struct BuildParams {
    pub s_max: usize,
    pub p_max: usize,
    pub c_max: usize,
    pub partition: PartitionSpec,
    /// Samples with target-page day >= this go to validation.
    pub valid_day_start: u64,
    /// Samples with target-page day >= this go to test.
    pub test_day_start: u64,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            s_max: 5,
            p_max: 5,
            c_max: 20,
            partition: PartitionSpec::Fraction(0.3),
            valid_day_start: 26,
            test_day_start: 27,
            seed: 1,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        if self.s_max == 0 || self.p_max == 0 || self.c_max == 0 {
            return Err(Error::Config("S, P, C must be positive".into()));
        }
        if self.valid_day_start > self.test_day_start {
            return Err(Error::Config(
                "valid_day_start must not exceed test_day_start".into(),
            ));
        }
        if let PartitionSpec::Fraction(f) = self.partition {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "candidate user fraction {f} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Day range actually observed per split; None when the split is empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitMeta {
    pub train_days: Option<(u64, u64)>,
    pub valid_days: Option<(u64, u64)>,
    pub test_days: Option<(u64, u64)>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<RawSample>,
    pub valid: Vec<RawSample>,
    pub test: Vec<RawSample>,
    /// Raw ids of the candidate-builder partition.
    pub candidate_users: Vec<u64>,
    pub vocab: Vocabulary,
    pub meta: SplitMeta,
}

impl DatasetSplit {
    pub fn all_samples(&self) -> impl Iterator<Item = &RawSample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Schema over this dataset's vocabularies with a uniform per-field
    /// embedding dim.
    pub fn schema(&self, embed_dim: usize) -> FeatureSchema {
        build_schema(&self.vocab, embed_dim)
    }
}

pub fn build_schema(vocab: &Vocabulary, embed_dim: usize) -> FeatureSchema {
    let f = |name: &str| FeatureField {
        name: name.to_string(),
        vocabulary_size: vocab.size(name),
        embedding_dim: embed_dim,
    };
    FeatureSchema {
        user: vec![f(FIELD_USER_ID)],
        item: vec![f(FIELD_ITEM_ID), f(FIELD_CATEGORY), f(FIELD_PRICE), f(FIELD_POSITION)],
        context: vec![f(FIELD_DAYPART)],
        sequence: vec![f(FIELD_ITEM_ID), f(FIELD_CATEGORY), f(FIELD_PRICE), f(FIELD_POSITION)],
    }
}

fn daypart(day: u64) -> u64 {
    day % 4
}

/// Enclosing page view, truncated to at most p_max items; the clicked item
/// always survives truncation.
fn page_items<'a>(page: &'a Page, clicked_idx: usize, p_max: usize) -> Vec<&'a ImpressionRecord> {
    if page.items.len() <= p_max {
        return page.items.iter().collect();
    }
    let mut items: Vec<&ImpressionRecord> = page.items.iter().take(p_max).collect();
    if clicked_idx >= p_max {
        items[p_max - 1] = &page.items[clicked_idx];
    }
    items
}

struct Interner<'a> {
    vocab: &'a Vocabulary,
}

impl<'a> Interner<'a> {
    fn id(&self, field: &str, token: u64) -> Result<u32> {
        self.vocab
            .lookup(field, &token.to_string())
            .ok_or_else(|| Error::Invariant(format!("token {token} missing from vocab {field}")))
    }

    fn item_vec(&self, r: &ImpressionRecord, with_position: bool) -> Result<Vec<u32>> {
        Ok(vec![
            self.id(FIELD_ITEM_ID, r.item_id)?,
            self.id(FIELD_CATEGORY, r.category_id as u64)?,
            self.id(FIELD_PRICE, r.price_bucket as u64)?,
            if with_position {
                self.id(FIELD_POSITION, r.position as u64)?
            } else {
                0
            },
        ])
    }
}

pub fn build_samples(log: &ImpressionLog, params: &BuildParams) -> Result<DatasetSplit> {
    params.validate()?;
    log.validate()?;
    let by_user = log.pages_by_user();
    let users: Vec<u64> = by_user.keys().copied().collect();

    // Candidate-builder partition, disjoint from every sample-producing user.
    let candidate_users: BTreeSet<u64> = match &params.partition {
        PartitionSpec::Explicit(list) => list.iter().copied().collect(),
        PartitionSpec::Fraction(f) => {
            let mut shuffled = users.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x7061_7274);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let take = (f * users.len() as f64).ceil() as usize;
            shuffled.into_iter().take(take).collect()
        }
    };

    // Vocabulary over the whole log, in sorted raw-token order.
    let mut vocab = Vocabulary::new();
    for &u in users.iter().filter(|u| !candidate_users.contains(u)) {
        vocab.intern(FIELD_USER_ID, &u.to_string());
    }
    let mut items = BTreeSet::new();
    let mut cats = BTreeSet::new();
    let mut prices = BTreeSet::new();
    let mut positions = BTreeSet::new();
    for r in &log.records {
        items.insert(r.item_id);
        cats.insert(r.category_id as u64);
        prices.insert(r.price_bucket as u64);
        positions.insert(r.position as u64);
    }
    for i in items {
        vocab.intern(FIELD_ITEM_ID, &i.to_string());
    }
    for c in cats {
        vocab.intern(FIELD_CATEGORY, &c.to_string());
    }
    for p in prices {
        vocab.intern(FIELD_PRICE, &p.to_string());
    }
    for p in positions {
        vocab.intern(FIELD_POSITION, &p.to_string());
    }
    for d in 0..4u64 {
        vocab.intern(FIELD_DAYPART, &d.to_string());
    }

    // Co-occurrence lists from the partition users only.
    let mut co_occur: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for &u in &candidate_users {
        if let Some(pages) = by_user.get(&u) {
            for page in pages {
                for a in &page.items {
                    for b in &page.items {
                        if a.item_id != b.item_id {
                            co_occur.entry(a.item_id).or_default().insert(b.item_id);
                        }
                    }
                }
            }
        }
    }

    // Item attributes for candidates sampled out of co-occurrence lists.
    let mut attrs: BTreeMap<u64, &ImpressionRecord> = BTreeMap::new();
    for r in &log.records {
        attrs.entry(r.item_id).or_insert(r);
    }

    let interner = Interner { vocab: &vocab };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xc0_ffee);
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        candidate_users: candidate_users.iter().copied().collect(),
        vocab: Vocabulary::new(),
        meta: SplitMeta::default(),
    };
    let mut sample_id = 0u64;

    for (&user, pages) in &by_user {
        if candidate_users.contains(&user) || pages.is_empty() {
            continue;
        }
        let (behavior, target_page) = pages.split_at(pages.len() - 1);
        let target_page = &target_page[0];

        // Click sequence: chronological clicks from the behavior pages,
        // most recent s_max kept, each with its enclosing page.
        let mut clicks: Vec<ClickEntry> = Vec::new();
        for page in behavior {
            for (idx, r) in page.items.iter().enumerate() {
                if r.clicked == 1 {
                    let enclosing = page_items(page, idx, params.p_max);
                    let page_vecs = enclosing
                        .iter()
                        .map(|it| interner.item_vec(it, true))
                        .collect::<Result<Vec<_>>>()?;
                    clicks.push(ClickEntry {
                        item_ids: interner.item_vec(r, true)?,
                        page: page_vecs,
                    });
                }
            }
        }
        if clicks.len() > params.s_max {
            clicks.drain(..clicks.len() - params.s_max);
        }

        let user_ids = vec![interner.id(FIELD_USER_ID, user)?];
        let context_ids = vec![interner.id(FIELD_DAYPART, daypart(target_page.timestamp))?];

        for target in &target_page.items {
            let target_ids = interner.item_vec(target, true)?;

            // Candidates: the target plus a uniform sample (without
            // replacement) from its co-occurrence list.
            let mut candidates = vec![target_ids.clone()];
            if let Some(co) = co_occur.get(&target.item_id) {
                let mut pool: Vec<u64> = co.iter().copied().collect();
                let take = pool.len().min(params.c_max - 1);
                for i in 0..take {
                    let j = rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                    let cand = attrs[&pool[i]];
                    candidates.push(interner.item_vec(cand, false)?);
                }
            }

            let sample = RawSample {
                sample_id,
                label: target.clicked,
                user_ids: user_ids.clone(),
                context_ids: context_ids.clone(),
                target_ids,
                candidates,
                clicks: clicks.clone(),
            };
            sample_id += 1;

            let day = target_page.timestamp;
            let (bucket, range) = if day >= params.test_day_start {
                (&mut split.test, &mut split.meta.test_days)
            } else if day >= params.valid_day_start {
                (&mut split.valid, &mut split.meta.valid_days)
            } else {
                (&mut split.train, &mut split.meta.train_days)
            };
            bucket.push(sample);
            *range = Some(match *range {
                None => (day, day),
                Some((lo, hi)) => (lo.min(day), hi.max(day)),
            });
        }
    }

    split.vocab = vocab;
    validate_split(&split, params)?;
    Ok(split)
}

/// Leakage and shape invariants, re-checked on every build and read.
pub fn validate_split(split: &DatasetSplit, params: &BuildParams) -> Result<()> {
    let schema = build_schema(&split.vocab, 1);
    let cand_set: BTreeSet<&u64> = split.candidate_users.iter().collect();
    for s in split.all_samples() {
        s.validate(&schema, params.s_max, params.p_max, params.c_max)?;
    }
    // No sample user may sit in the candidate partition.
    for s in split.all_samples() {
        let uid = s.user_ids[0];
        for raw in &split.candidate_users {
            if split.vocab.lookup(FIELD_USER_ID, &raw.to_string()) == Some(uid) {
                return Err(Error::Invariant(format!(
                    "candidate-builder user {raw} produced sample {}",
                    s.sample_id
                )));
            }
        }
        let _ = &cand_set;
    }
    // Later splits must sit strictly after earlier ones.
    if let (Some((_, train_hi)), Some((valid_lo, _))) = (split.meta.train_days, split.meta.valid_days) {
        if valid_lo <= train_hi {
            return Err(Error::Invariant("validation days overlap training days".into()));
        }
    }
    if let (Some((_, train_hi)), Some((test_lo, _))) = (split.meta.train_days, split.meta.test_days) {
        if test_lo <= train_hi {
            return Err(Error::Invariant("test days overlap training days".into()));
        }
    }
    if let (Some((_, valid_hi)), Some((test_lo, _))) = (split.meta.valid_days, split.meta.test_days) {
        if test_lo <= valid_hi {
            return Err(Error::Invariant("test days overlap validation days".into()));
        }
    }
    Ok(())
}

// ── Dataset files ───────────────────────────────────────────────────────

const SAMPLE_HEADER: &str = "sample_id\tlabel\tuser\tcontext\ttarget\tcandidates\tclicks";

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad id {t}"),
            })
        })
        .collect()
}

fn encode_sample(s: &RawSample) -> String {
    let candidates = s
        .candidates
        .iter()
        .map(|c| join_ids(c))
        .collect::<Vec<_>>()
        .join(";");
    let clicks = if s.clicks.is_empty() {
        "-".to_string()
    } else {
        s.clicks
            .iter()
            .map(|c| {
                let page = c.page.iter().map(|p| join_ids(p)).collect::<Vec<_>>().join("|");
                format!("{}@{}", join_ids(&c.item_ids), page)
            })
            .collect::<Vec<_>>()
            .join(";")
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.sample_id,
        s.label,
        join_ids(&s.user_ids),
        join_ids(&s.context_ids),
        join_ids(&s.target_ids),
        candidates,
        clicks
    )
}

fn decode_sample(line: &str, ln: usize) -> Result<RawSample> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != 7 {
        return Err(Error::Parse {
            line: ln,
            msg: format!("expected 7 fields, got {}", parts.len()),
        });
    }
    let sample_id = parts[0].parse().map_err(|_| Error::Parse {
        line: ln,
        msg: format!("bad sample_id {}", parts[0]),
    })?;
    let label: u8 = parts[1].parse().map_err(|_| Error::Parse {
        line: ln,
        msg: format!("bad label {}", parts[1]),
    })?;
    let candidates = parts[5]
        .split(';')
        .map(|c| parse_ids(c, ln))
        .collect::<Result<Vec<_>>>()?;
    let clicks = if parts[6] == "-" {
        Vec::new()
    } else {
        parts[6]
            .split(';')
            .map(|c| {
                let (item, page) = c.split_once('@').ok_or(Error::Parse {
                    line: ln,
                    msg: "click entry missing @".into(),
                })?;
                Ok(ClickEntry {
                    item_ids: parse_ids(item, ln)?,
                    page: page.split('|').map(|p| parse_ids(p, ln)).collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(RawSample {
        sample_id,
        label,
        user_ids: parse_ids(parts[2], ln)?,
        context_ids: parse_ids(parts[3], ln)?,
        target_ids: parse_ids(parts[4], ln)?,
        candidates,
        clicks,
    })
}

fn write_samples(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SAMPLE_HEADER}")?;
    for s in samples {
        writeln!(w, "{}", encode_sample(s))?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<RawSample>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if ln == 0 {
            if line != SAMPLE_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: "unexpected dataset header".into(),
                });
            }
            continue;
        }
        out.push(decode_sample(&line, ln + 1)?);
    }
    Ok(out)
}

fn fmt_range(r: Option<(u64, u64)>) -> String {
    match r {
        Some((lo, hi)) => format!("{lo}..{hi}"),
        None => "none".to_string(),
    }
}

fn parse_range(s: &str, line: usize) -> Result<Option<(u64, u64)>> {
    if s == "none" {
        return Ok(None);
    }
    let (lo, hi) = s.split_once("..").ok_or(Error::Parse {
        line,
        msg: format!("bad day range {s}"),
    })?;
    let parse = |t: &str| -> Result<u64> {
        t.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad day {t}"),
        })
    };
    Ok(Some((parse(lo)?, parse(hi)?)))
}

/// Writes train/valid/test sample files plus metadata and the vocabulary
/// sidecar into a directory. read(write(x)) is bit-exact.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_samples(&dir.join("train.tsv"), &split.train)?;
    write_samples(&dir.join("valid.tsv"), &split.valid)?;
    write_samples(&dir.join("test.tsv"), &split.test)?;
    split.vocab.write_file(&dir.join("vocab.tsv"))?;

    let mut w = BufWriter::new(std::fs::File::create(dir.join("meta.txt"))?);
    writeln!(w, "format_version=1")?;
    writeln!(w, "train_days={}", fmt_range(split.meta.train_days))?;
    writeln!(w, "valid_days={}", fmt_range(split.meta.valid_days))?;
    writeln!(w, "test_days={}", fmt_range(split.meta.test_days))?;
    let users = split
        .candidate_users
        .iter()
        .map(|u| u.to_string())
        .collect::<Vec<_>>()
        .join(",");
    writeln!(w, "candidate_users={users}")?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let vocab = Vocabulary::read_file(&dir.join("vocab.tsv"))?;
    let mut meta = SplitMeta::default();
    let mut candidate_users = Vec::new();
    let f = std::fs::File::open(dir.join("meta.txt"))?;
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "expected key=value".into(),
            });
        };
        match key {
            "format_version" => {
                if value != "1" {
                    return Err(Error::Checkpoint(format!("unsupported dataset version {value}")));
                }
            }
            "train_days" => meta.train_days = parse_range(value, ln + 1)?,
            "valid_days" => meta.valid_days = parse_range(value, ln + 1)?,
            "test_days" => meta.test_days = parse_range(value, ln + 1)?,
            "candidate_users" => {
                if !value.is_empty() {
                    candidate_users = value
                        .split(',')
                        .map(|t| {
                            t.parse().map_err(|_| Error::Parse {
                                line: ln + 1,
                                msg: format!("bad user id {t}"),
                            })
                        })
                        .collect::<Result<Vec<u64>>>()?;
                }
            }
            other => {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("unknown meta key {other}"),
                })
            }
        }
    }
    Ok(DatasetSplit {
        train: read_samples(&dir.join("train.tsv"))?,
        valid: read_samples(&dir.join("valid.tsv"))?,
        test: read_samples(&dir.join("test.tsv"))?,
        candidate_users,
        vocab,
        meta,
    })
}

// ── Statistics ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub test_samples: usize,
    pub positive_rate: f64,
    /// Mean over users of distinct behavior pages represented in their
    /// click sequences.
    pub avg_behavior_pages: f64,
    pub avg_candidates: f64,
}

pub fn dataset_stats(split: &DatasetSplit) -> DatasetStats {
    let mut users: BTreeMap<u32, usize> = BTreeMap::new();
    let mut cand_total = 0usize;
    let mut positives = 0usize;
    let mut n = 0usize;
    for s in split.all_samples() {
        // All samples of one user share the click sequence; count its
        // distinct enclosing pages once per user.
        users.entry(s.user_ids[0]).or_insert_with(|| {
            let pages: BTreeSet<&Vec<Vec<u32>>> = s.clicks.iter().map(|c| &c.page).collect();
            pages.len()
        });
        cand_total += s.candidates.len();
        positives += s.label as usize;
        n += 1;
    }
    DatasetStats {
        users: users.len(),
        train_samples: split.train.len(),
        valid_samples: split.valid.len(),
        test_samples: split.test.len(),
        positive_rate: if n == 0 { 0.0 } else { positives as f64 / n as f64 },
        avg_behavior_pages: if users.is_empty() {
            0.0
        } else {
            users.values().sum::<usize>() as f64 / users.len() as f64
        },
        avg_candidates: if n == 0 { 0.0 } else { cand_total as f64 / n as f64 },
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# Users              {}", self.users)?;
        writeln!(
            f,
            "# Samples            {} (train {} / valid {} / test {})",
            self.train_samples + self.valid_samples + self.test_samples,
            self.train_samples,
            self.valid_samples,
            self.test_samples
        )?;
        writeln!(f, "Positive rate        {:.4}", self.positive_rate)?;
        writeln!(f, "Avg # Behavior-Pages {:.2}", self.avg_behavior_pages)?;
        write!(f, "Avg # Candidates     {:.2}", self.avg_candidates)
    }
}
