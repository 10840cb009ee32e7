//! Sparse feature schema, vocabularies, and embedding lookups.
//!
//! Ids are contiguous per field with index 0 reserved for padding and
//! out-of-vocabulary tokens. Row 0 of every table starts at zero and is
//! trained like any other row; padded positions are masked downstream so
//! its value never leaks through attention.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub name: String,
    /// Number of rows in the embedding table, including reserved index 0.
    pub vocabulary_size: u32,
    pub embedding_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    User,
    Item,
    Context,
    Sequence,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::User => "user",
            Group::Item => "item",
            Group::Context => "context",
            Group::Sequence => "sequence",
        }
    }
}

/// Field lists per group. The item group embeds the target and the
/// candidates (total dim D_t); the sequence group embeds clicked items and
/// page items (total dim D_s, including an item-position-in-page field).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    pub user: Vec<FeatureField>,
    pub item: Vec<FeatureField>,
    pub context: Vec<FeatureField>,
    pub sequence: Vec<FeatureField>,
}

impl FeatureSchema {
    pub fn fields(&self, group: Group) -> &[FeatureField] {
        match group {
            Group::User => &self.user,
            Group::Item => &self.item,
            Group::Context => &self.context,
            Group::Sequence => &self.sequence,
        }
    }

    fn group_dim(fields: &[FeatureField]) -> usize {
        fields.iter().map(|f| f.embedding_dim).sum()
    }

    pub fn d_u(&self) -> usize {
        Self::group_dim(&self.user)
    }

    pub fn d_t(&self) -> usize {
        Self::group_dim(&self.item)
    }

    pub fn d_c(&self) -> usize {
        Self::group_dim(&self.context)
    }

    pub fn d_s(&self) -> usize {
        Self::group_dim(&self.sequence)
    }
}

/// Per-field token-to-id maps. Id 0 is reserved; interned tokens start at 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    fields: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    pub fn intern(&mut self, field: &str, token: &str) -> u32 {
        let map = self.fields.entry(field.to_string()).or_default();
        if let Some(&id) = map.get(token) {
            return id;
        }
        let id = map.len() as u32 + 1;
        map.insert(token.to_string(), id);
        id
    }

    pub fn lookup(&self, field: &str, token: &str) -> Option<u32> {
        self.fields.get(field).and_then(|m| m.get(token)).copied()
    }

    /// Table size for the field: interned tokens plus the reserved index 0.
    pub fn size(&self, field: &str) -> u32 {
        self.fields.get(field).map(|m| m.len() as u32).unwrap_or(0) + 1
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(|s| s.as_str())
    }

    /// Sidecar format: one `field <TAB> token <TAB> id` line per entry.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "field\ttoken\tid")?;
        for (field, map) in &self.fields {
            let mut entries: Vec<(&String, &u32)> = map.iter().collect();
            entries.sort_by_key(|(_, &id)| id);
            for (token, id) in entries {
                writeln!(w, "{field}\t{token}\t{id}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut vocab = Vocabulary::new();
        for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if ln == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected 3 tab-separated fields, got {}", parts.len()),
                });
            }
            let id: u32 = parts[2].parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad id {}", parts[2]),
            })?;
            let map = vocab.fields.entry(parts[0].to_string()).or_default();
            map.insert(parts[1].to_string(), id);
        }
        Ok(vocab)
    }
}

/// One clicked item and the exposure page that enclosed it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickEntry {
    /// Sequence-schema ids of the clicked item.
    pub item_ids: Vec<u32>,
    /// Sequence-schema ids of each intra-page item, at most P entries.
    pub page: Vec<Vec<u32>>,
}

/// One labeled CTR instance, unpadded. List lengths are the valid counts;
/// padding to the configured maxima happens at embedding time.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub sample_id: u64,
    pub label: u8,
    pub user_ids: Vec<u32>,
    pub context_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Item-schema id vectors, at most C; the target is one of them.
    pub candidates: Vec<Vec<u32>>,
    /// Most recent clicks first is not required; order is chronological.
    pub clicks: Vec<ClickEntry>,
}

fn check_ids(fields: &[FeatureField], ids: &[u32], what: &str) -> Result<()> {
    if ids.len() != fields.len() {
        return Err(Error::Config(format!(
            "{what}: expected {} ids, got {}",
            fields.len(),
            ids.len()
        )));
    }
    for (f, &id) in fields.iter().zip(ids) {
        if id >= f.vocabulary_size {
            return Err(Error::Vocabulary {
                field: f.name.clone(),
                id,
                vocab_size: f.vocabulary_size,
            });
        }
    }
    Ok(())
}

impl RawSample {
    pub fn validate(&self, schema: &FeatureSchema, s_max: usize, p_max: usize, c_max: usize) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Invariant(format!(
                "sample {}: label must be 0 or 1",
                self.sample_id
            )));
        }
        check_ids(&schema.user, &self.user_ids, "user")?;
        check_ids(&schema.context, &self.context_ids, "context")?;
        check_ids(&schema.item, &self.target_ids, "target")?;
        if self.candidates.len() > c_max {
            return Err(Error::Invariant(format!(
                "sample {}: {} candidates exceeds maximum {c_max}",
                self.sample_id,
                self.candidates.len()
            )));
        }
        for c in &self.candidates {
            check_ids(&schema.item, c, "candidate")?;
        }
        if !self.candidates.iter().any(|c| c == &self.target_ids) {
            return Err(Error::Invariant(format!(
                "sample {}: target not among candidates",
                self.sample_id
            )));
        }
        if self.clicks.len() > s_max {
            return Err(Error::Invariant(format!(
                "sample {}: {} clicks exceeds maximum {s_max}",
                self.sample_id,
                self.clicks.len()
            )));
        }
        for click in &self.clicks {
            check_ids(&schema.sequence, &click.item_ids, "click")?;
            if click.page.is_empty() || click.page.len() > p_max {
                return Err(Error::Invariant(format!(
                    "sample {}: click page size {} outside 1..={p_max}",
                    self.sample_id,
                    click.page.len()
                )));
            }
            for item in &click.page {
                check_ids(&schema.sequence, item, "page item")?;
            }
        }
        Ok(())
    }
}

/// Embedding tables, one per (group, field), registered on a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub user: Vec<ParamId>,
    pub item: Vec<ParamId>,
    pub context: Vec<ParamId>,
    pub sequence: Vec<ParamId>,
}

impl EmbeddingTables {
    pub fn register(set: &mut ParamSet, schema: &FeatureSchema) -> EmbeddingTables {
        let reg = |set: &mut ParamSet, group: Group, fields: &[FeatureField]| -> Vec<ParamId> {
            fields
                .iter()
                .map(|f| {
                    set.register(
                        &format!("emb.{}.{}", group.as_str(), f.name),
                        &[f.vocabulary_size as usize, f.embedding_dim],
                        Init::EmbeddingTable {
                            fan_in: f.vocabulary_size as usize,
                            fan_out: f.embedding_dim,
                        },
                    )
                })
                .collect()
        };
        EmbeddingTables {
            user: reg(set, Group::User, &schema.user),
            item: reg(set, Group::Item, &schema.item),
            context: reg(set, Group::Context, &schema.context),
            sequence: reg(set, Group::Sequence, &schema.sequence),
        }
    }

    pub fn of_group(&self, group: Group) -> &[ParamId] {
        match group {
            Group::User => &self.user,
            Group::Item => &self.item,
            Group::Context => &self.context,
            Group::Sequence => &self.sequence,
        }
    }
}

/// Pure lookup: concatenation of per-field embedding rows in schema order.
pub fn embed_group(
    set: &ParamSet,
    tables: &[ParamId],
    fields: &[FeatureField],
    ids: &[u32],
) -> Result<Tensor> {
    check_ids(fields, ids, "embed_group")?;
    let dim: usize = fields.iter().map(|f| f.embedding_dim).sum();
    let mut out = Vec::with_capacity(dim);
    for ((f, &table), &id) in fields.iter().zip(tables).zip(ids) {
        let t = &set.get(table).value;
        let d = f.embedding_dim;
        out.extend_from_slice(&t.data()[id as usize * d..(id as usize + 1) * d]);
    }
    Tensor::from_vec(&[1, dim], out)
}

/// Dense views of one sample, padded to the configured maxima, with
/// validity masks for every padded list.
#[derive(Clone, Debug)]
pub struct EmbeddedSample {
    pub x_user: Tensor,
    pub x_context: Tensor,
    pub x_target: Tensor,
    /// [C, D_t]
    pub candidates: Tensor,
    /// [S, D_s]
    pub clicks: Tensor,
    /// [S * P, D_s], S consecutive blocks of P page items.
    pub pages: Tensor,
    pub click_valid: Vec<bool>,
    pub page_valid: Vec<bool>,
    pub cand_valid: Vec<bool>,
}

pub fn embed_sample(
    set: &ParamSet,
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
    sample: &RawSample,
    s_max: usize,
    p_max: usize,
    c_max: usize,
) -> Result<EmbeddedSample> {
    sample.validate(schema, s_max, p_max, c_max)?;
    let (d_s, d_t) = (schema.d_s(), schema.d_t());

    let x_user = embed_group(set, &tables.user, &schema.user, &sample.user_ids)?;
    let x_context = embed_group(set, &tables.context, &schema.context, &sample.context_ids)?;
    let x_target = embed_group(set, &tables.item, &schema.item, &sample.target_ids)?;

    let mut candidates = Tensor::zeros(&[c_max, d_t]);
    let mut cand_valid = vec![false; c_max];
    for (i, c) in sample.candidates.iter().enumerate() {
        let row = embed_group(set, &tables.item, &schema.item, c)?;
        candidates.data_mut()[i * d_t..(i + 1) * d_t].copy_from_slice(row.data());
        cand_valid[i] = true;
    }

    let mut clicks = Tensor::zeros(&[s_max, d_s]);
    let mut pages = Tensor::zeros(&[s_max * p_max, d_s]);
    let mut click_valid = vec![false; s_max];
    let mut page_valid = vec![false; s_max * p_max];
    for (i, click) in sample.clicks.iter().enumerate() {
        let row = embed_group(set, &tables.sequence, &schema.sequence, &click.item_ids)?;
        clicks.data_mut()[i * d_s..(i + 1) * d_s].copy_from_slice(row.data());
        click_valid[i] = true;
        for (j, item) in click.page.iter().enumerate() {
            let row = embed_group(set, &tables.sequence, &schema.sequence, item)?;
            let base = (i * p_max + j) * d_s;
            pages.data_mut()[base..base + d_s].copy_from_slice(row.data());
            page_valid[i * p_max + j] = true;
        }
    }

    Ok(EmbeddedSample {
        x_user,
        x_context,
        x_target,
        candidates,
        clicks,
        pages,
        click_valid,
        page_valid,
        cand_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::params::TapeBinding;

    fn toy_schema() -> FeatureSchema {
        let f = |name: &str, vocab: u32, dim: usize| FeatureField {
            name: name.to_string(),
            vocabulary_size: vocab,
            embedding_dim: dim,
        };
        FeatureSchema {
            user: vec![f("user_id", 10, 2)],
            item: vec![f("item_id", 12, 2), f("category", 5, 3)],
            context: vec![f("daypart", 5, 2)],
            sequence: vec![f("item_id", 12, 2), f("category", 5, 3)],
        }
    }

    #[test]
    fn reserved_index_zero_embeds_to_zero() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(5);
        let out = embed_group(&set, &tables.item, &schema.item, &[0, 0]).unwrap();
        assert_eq!(out.data(), &[0.0; 5]);
    }

    #[test]
    fn single_field_lookup_is_exact_row() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(5);
        let out = embed_group(&set, &tables.user, &schema.user, &[7]).unwrap();
        let table = &set.get(tables.user[0]).value;
        assert_eq!(out.data(), &table.data()[14..16]);
    }

    #[test]
    fn two_field_concat_matches_manual_oracle() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(9);
        let out = embed_group(&set, &tables.item, &schema.item, &[3, 4]).unwrap();
        let t0 = &set.get(tables.item[0]).value;
        let t1 = &set.get(tables.item[1]).value;
        let mut expected = t0.data()[6..8].to_vec();
        expected.extend_from_slice(&t1.data()[12..15]);
        assert_eq!(out.data(), &expected[..]);
        assert_eq!(out.shape(), &[1, 5]);
    }

    #[test]
    fn out_of_vocabulary_id_errors_with_field_name() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        match embed_group(&set, &tables.user, &schema.user, &[10]) {
            Err(Error::Vocabulary { field, id, vocab_size }) => {
                assert_eq!(field, "user_id");
                assert_eq!(id, 10);
                assert_eq!(vocab_size, 10);
            }
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn lookup_is_pure_and_field_local() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(13);
        let a = embed_group(&set, &tables.item, &schema.item, &[3, 4]).unwrap();
        let b = embed_group(&set, &tables.item, &schema.item, &[3, 4]).unwrap();
        assert_eq!(a, b);
        // Changing one field's id changes only that field's slice.
        let c = embed_group(&set, &tables.item, &schema.item, &[3, 2]).unwrap();
        assert_eq!(&a.data()[..2], &c.data()[..2]);
        assert_ne!(&a.data()[2..], &c.data()[2..]);
    }

    fn toy_sample(clicks: usize) -> RawSample {
        RawSample {
            sample_id: 1,
            label: 1,
            user_ids: vec![3],
            context_ids: vec![2],
            target_ids: vec![5, 1],
            candidates: vec![vec![5, 1], vec![7, 2]],
            clicks: (0..clicks)
                .map(|i| ClickEntry {
                    item_ids: vec![i as u32 + 1, 1],
                    page: vec![vec![i as u32 + 1, 1], vec![9, 3]],
                })
                .collect(),
        }
    }

    #[test]
    fn empty_click_sequence_embeds_to_masked_zeros() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(3);
        let es = embed_sample(&set, &tables, &schema, &toy_sample(0), 5, 3, 4).unwrap();
        assert!(es.clicks.data().iter().all(|&v| v == 0.0));
        assert!(es.click_valid.iter().all(|&v| !v));
        assert!(es.page_valid.iter().all(|&v| !v));
    }

    #[test]
    fn padding_convention_zeroes_tail_rows() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(3);
        let es = embed_sample(&set, &tables, &schema, &toy_sample(2), 5, 3, 4).unwrap();
        assert_eq!(es.click_valid, vec![true, true, false, false, false]);
        let d_s = schema.d_s();
        assert!(es.clicks.data()[2 * d_s..].iter().all(|&v| v == 0.0));
        // Page block 0 has 2 valid of 3 slots.
        assert_eq!(&es.page_valid[..3], &[true, true, false]);
        assert!(es.page_valid[2 * 3..].iter().all(|&v| !v));
    }

    #[test]
    fn full_sample_shapes_follow_schema() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(3);
        let es = embed_sample(&set, &tables, &schema, &toy_sample(3), 5, 3, 4).unwrap();
        assert_eq!(es.clicks.shape(), &[5, schema.d_s()]);
        assert_eq!(es.pages.shape(), &[15, schema.d_s()]);
        assert_eq!(es.candidates.shape(), &[4, schema.d_t()]);
        assert_eq!(es.x_user.shape(), &[1, schema.d_u()]);
        assert_eq!(es.x_target.shape(), &[1, schema.d_t()]);
    }

    #[test]
    fn gradients_flow_only_to_looked_up_rows() {
        let schema = toy_schema();
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);
        set.initialize(17);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let g = tape.gather(binding.node(tables.user[0]), &[3, 7]).unwrap();
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        binding.harvest_grads(&tape, &mut set);

        let grad = &set.get(tables.user[0]).grad;
        for row in 0..10 {
            let touched = row == 3 || row == 7;
            let slice = &grad.data()[row * 2..(row + 1) * 2];
            if touched {
                assert!(slice.iter().all(|&v| v == 1.0));
            } else {
                assert!(slice.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn target_must_be_among_candidates() {
        let schema = toy_schema();
        let mut s = toy_sample(1);
        s.candidates = vec![vec![7, 2]];
        assert!(s.validate(&schema, 5, 3, 4).is_err());
    }

    #[test]
    fn vocabulary_roundtrip() {
        let mut v = Vocabulary::new();
        assert_eq!(v.intern("item_id", "42"), 1);
        assert_eq!(v.intern("item_id", "99"), 2);
        assert_eq!(v.intern("item_id", "42"), 1);
        assert_eq!(v.intern("category", "food"), 1);
        assert_eq!(v.size("item_id"), 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.write_file(&path).unwrap();
        let v2 = Vocabulary::read_file(&path).unwrap();
        assert_eq!(v, v2);
    }
}
