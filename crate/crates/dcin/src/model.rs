//! The DCIN model: embeddings, explicit and implicit context interaction,
//! adaptive interest aggregation, and the final CTR head, plus the training
//! loop and the ablation variants.

use crate::aiau::{self, AiauParams};
use crate::ciu::{self, CiuOutput, CiuParams};
use crate::embed::{embed_sample, EmbeddedSample, EmbeddingTables, FeatureSchema, RawSample};
use crate::error::{Error, Result};
use crate::metrics::{self, TieMode};
use crate::mlp::Mlp;
use crate::params::{adagrad_step, Init, ParamId, ParamSet, TapeBinding};
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoExplicitCiu,
    NoImplicitCiu,
    NoAiau,
    Dnn,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_explicit_ciu" => Ok(Variant::NoExplicitCiu),
            "no_implicit_ciu" => Ok(Variant::NoImplicitCiu),
            "no_aiau" => Ok(Variant::NoAiau),
            "dnn" => Ok(Variant::Dnn),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExplicitCiu => "no_explicit_ciu",
            Variant::NoImplicitCiu => "no_implicit_ciu",
            Variant::NoAiau => "no_aiau",
            Variant::Dnn => "dnn",
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Full,
            Variant::NoExplicitCiu,
            Variant::NoImplicitCiu,
            Variant::NoAiau,
            Variant::Dnn,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct DcinConfig {
    /// Maximum click-sequence length S.
    pub s_max: usize,
    /// Maximum intra-page items P.
    pub p_max: usize,
    /// Maximum pre-ranking candidates C.
    pub c_max: usize,
    /// Top-k width of the explicit CIU.
    pub k1: usize,
    /// Top-k width of the implicit CIU.
    pub k2: usize,
    /// Embedding dim per feature field.
    pub embed_dim: usize,
    /// Aligned-interest dim D_a.
    pub d_a: usize,
    pub relevance_hidden: Vec<usize>,
    pub align_hidden: Vec<usize>,
    pub agg_hidden: Vec<usize>,
    pub final_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for DcinConfig {
    fn default() -> Self {
        DcinConfig {
            s_max: 5,
            p_max: 5,
            c_max: 20,
            k1: 3,
            k2: 10,
            embed_dim: 8,
            d_a: 32,
            relevance_hidden: vec![32, 16],
            align_hidden: vec![64, 32],
            agg_hidden: vec![32, 32],
            final_hidden: vec![256, 128],
            learning_rate: 0.05,
            adagrad_epsilon: 1e-8,
            batch_size: 256,
            epochs: 10,
            seed: 1,
            variant: Variant::Full,
        }
    }
}

impl DcinConfig {
    /// Slimmed-down widths for desk-scale experiments where dozens of
    /// trainings must fit a wall-clock budget.
    pub fn desk() -> Self {
        DcinConfig {
            embed_dim: 4,
            d_a: 16,
            relevance_hidden: vec![16, 8],
            align_hidden: vec![32, 16],
            agg_hidden: vec![16, 16],
            final_hidden: vec![64, 32],
            epochs: 2,
            ..DcinConfig::default()
        }
    }

    /// Minimal dims for gradient checking.
    pub fn tiny() -> Self {
        DcinConfig {
            s_max: 3,
            p_max: 3,
            c_max: 4,
            k1: 2,
            k2: 3,
            embed_dim: 2,
            d_a: 4,
            relevance_hidden: vec![4, 3],
            align_hidden: vec![5, 4],
            agg_hidden: vec![4, 4],
            final_hidden: vec![6, 4],
            batch_size: 4,
            epochs: 1,
            ..DcinConfig::default()
        }
    }

    /// Flat key=value echo, used by config files, artifact headers, and the
    /// checkpoint header.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let widths = |w: &[usize]| {
            w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("s_max".into(), self.s_max.to_string()),
            ("p_max".into(), self.p_max.to_string()),
            ("c_max".into(), self.c_max.to_string()),
            ("k1".into(), self.k1.to_string()),
            ("k2".into(), self.k2.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("d_a".into(), self.d_a.to_string()),
            ("relevance_hidden".into(), widths(&self.relevance_hidden)),
            ("align_hidden".into(), widths(&self.align_hidden)),
            ("agg_hidden".into(), widths(&self.agg_hidden)),
            ("final_hidden".into(), widths(&self.final_hidden)),
            ("learning_rate".into(), format!("{:e}", self.learning_rate)),
            ("adagrad_epsilon".into(), format!("{:e}", self.adagrad_epsilon)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("variant".into(), self.variant.as_str().to_string()),
        ]
    }

    pub fn set_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what}: {value}"));
        let parse_usize = |v: &str, what: &str| v.parse::<usize>().map_err(|_| bad(what));
        let parse_widths = |v: &str, what: &str| -> Result<Vec<usize>> {
            v.split(',').map(|t| t.parse().map_err(|_| bad(what))).collect()
        };
        match key {
            "s_max" => self.s_max = parse_usize(value, key)?,
            "p_max" => self.p_max = parse_usize(value, key)?,
            "c_max" => self.c_max = parse_usize(value, key)?,
            "k1" => self.k1 = parse_usize(value, key)?,
            "k2" => self.k2 = parse_usize(value, key)?,
            "embed_dim" => self.embed_dim = parse_usize(value, key)?,
            "d_a" => self.d_a = parse_usize(value, key)?,
            "relevance_hidden" => self.relevance_hidden = parse_widths(value, key)?,
            "align_hidden" => self.align_hidden = parse_widths(value, key)?,
            "agg_hidden" => self.agg_hidden = parse_widths(value, key)?,
            "final_hidden" => self.final_hidden = parse_widths(value, key)?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "adagrad_epsilon" => self.adagrad_epsilon = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = parse_usize(value, key)?,
            "epochs" => self.epochs = parse_usize(value, key)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "variant" => self.variant = Variant::parse(value)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    pub fn from_key_values<'a>(
        pairs: impl Iterator<Item = (&'a str, &'a str)>,
    ) -> Result<DcinConfig> {
        let mut config = DcinConfig::default();
        for (k, v) in pairs {
            config.set_key_value(k, v)?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k1 > self.p_max {
            return Err(Error::Config(format!(
                "k1 = {} must be in 1..={}",
                self.k1, self.p_max
            )));
        }
        if self.k2 == 0 || self.k2 > self.c_max {
            return Err(Error::Config(format!(
                "k2 = {} must be in 1..={}",
                self.k2, self.c_max
            )));
        }
        if self.s_max == 0 || self.p_max == 0 || self.c_max == 0 {
            return Err(Error::Config("S, P, C must be positive".into()));
        }
        if self.embed_dim == 0 || self.d_a == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        for (name, widths) in [
            ("relevance_hidden", &self.relevance_hidden),
            ("align_hidden", &self.align_hidden),
            ("agg_hidden", &self.agg_hidden),
            ("final_hidden", &self.final_hidden),
        ] {
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::Config(format!("{name} widths must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.adagrad_epsilon <= 0.0 {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// A CIU slot in a concrete model: the real unit, the sum-pooling ablation
/// (mean over valid items through W^V then W^O, no relevance, no top-k),
/// or absent entirely.
#[derive(Clone, Debug)]
enum ContextUnit {
    Ciu(CiuParams),
    Pool { w_v: ParamId, w_o: ParamId },
    Absent,
}

pub struct DcinParams {
    pub set: ParamSet,
    pub schema: FeatureSchema,
    pub tables: EmbeddingTables,
    explicit: ContextUnit,
    implicit: ContextUnit,
    aiau: Option<AiauParams>,
    empty_interest: Option<ParamId>,
    interest_proj: Option<(ParamId, ParamId)>,
    pub final_mlp: Mlp,
    pub variant: Variant,
}

impl DcinParams {
    pub fn new(config: &DcinConfig, schema: FeatureSchema) -> Result<DcinParams> {
        config.validate()?;
        let (d_u, d_t, d_c, d_s) = (schema.d_u(), schema.d_t(), schema.d_c(), schema.d_s());
        let d_a = config.d_a;
        let variant = config.variant;
        let mut set = ParamSet::new();
        let tables = EmbeddingTables::register(&mut set, &schema);

        let explicit = match variant {
            Variant::Dnn => ContextUnit::Absent,
            Variant::NoExplicitCiu => ContextUnit::Pool {
                w_v: set.register("explicit_ciu.w_v", &[d_s, d_s], Init::Glorot { fan_in: d_s, fan_out: d_s }),
                w_o: set.register("explicit_ciu.w_o", &[d_s, d_s], Init::Zero),
            },
            _ => ContextUnit::Ciu(CiuParams::register(
                &mut set,
                "explicit_ciu",
                d_s,
                config.k1,
                &config.relevance_hidden,
            )),
        };
        let implicit = match variant {
            Variant::Dnn => ContextUnit::Absent,
            Variant::NoImplicitCiu => ContextUnit::Pool {
                w_v: set.register("implicit_ciu.w_v", &[d_t, d_t], Init::Glorot { fan_in: d_t, fan_out: d_t }),
                w_o: set.register("implicit_ciu.w_o", &[d_t, d_t], Init::Zero),
            },
            _ => ContextUnit::Ciu(CiuParams::register(
                &mut set,
                "implicit_ciu",
                d_t,
                config.k2,
                &config.relevance_hidden,
            )),
        };

        let (aiau, empty_interest, interest_proj) = match variant {
            Variant::Full | Variant::NoExplicitCiu | Variant::NoImplicitCiu => {
                let aiau = AiauParams::register(
                    &mut set,
                    "aiau",
                    d_t,
                    d_s,
                    d_a,
                    &config.align_hidden,
                    &config.agg_hidden,
                );
                // A trainable stand-in interest for users with no history.
                let empty = set.register("empty_interest", &[1, d_a], Init::Zero);
                (Some(aiau), Some(empty), None)
            }
            Variant::NoAiau => {
                let w = set.register(
                    "interest_proj.weight",
                    &[d_s, d_a],
                    Init::Glorot { fan_in: d_s, fan_out: d_a },
                );
                let b = set.register("interest_proj.bias", &[d_a], Init::Zero);
                (None, None, Some((w, b)))
            }
            Variant::Dnn => (None, None, None),
        };

        let final_in = match variant {
            Variant::Full | Variant::NoExplicitCiu | Variant::NoImplicitCiu => d_a + d_u + d_t + d_c,
            Variant::NoAiau => d_a + d_t + d_u + d_t + d_c,
            Variant::Dnn => d_u + d_t + d_c + d_s + d_t,
        };
        let final_mlp = Mlp::register(&mut set, "final_mlp", final_in, &config.final_hidden, 1);

        set.initialize(config.seed);
        Ok(DcinParams {
            set,
            schema,
            tables,
            explicit,
            implicit,
            aiau,
            empty_interest,
            interest_proj,
            final_mlp,
            variant,
        })
    }

    pub fn explicit_ciu(&self) -> Option<&CiuParams> {
        match &self.explicit {
            ContextUnit::Ciu(c) => Some(c),
            _ => None,
        }
    }

    pub fn implicit_ciu(&self) -> Option<&CiuParams> {
        match &self.implicit {
            ContextUnit::Ciu(c) => Some(c),
            _ => None,
        }
    }

    /// Embed one sample against the current tables (inference view).
    pub fn embed(&self, sample: &RawSample, config: &DcinConfig) -> Result<EmbeddedSample> {
        embed_sample(
            &self.set,
            &self.tables,
            &self.schema,
            sample,
            config.s_max,
            config.p_max,
            config.c_max,
        )
    }
}

/// Per-field id columns for one batch, padded to the configured maxima.
struct BatchIds {
    user: Vec<Vec<u32>>,
    context: Vec<Vec<u32>>,
    target: Vec<Vec<u32>>,
    cand: Vec<Vec<u32>>,
    click: Vec<Vec<u32>>,
    page: Vec<Vec<u32>>,
    cand_valid: Vec<bool>,
    click_valid: Vec<bool>,
    page_valid: Vec<bool>,
    has_clicks: Vec<bool>,
    pub labels: Vec<f64>,
}

fn assemble_batch(
    schema: &FeatureSchema,
    config: &DcinConfig,
    samples: &[&RawSample],
) -> Result<BatchIds> {
    let b = samples.len();
    let (s_max, p_max, c_max) = (config.s_max, config.p_max, config.c_max);
    let nf = |fields: &[crate::embed::FeatureField]| fields.len();
    let mut ids = BatchIds {
        user: vec![vec![0; b]; nf(&schema.user)],
        context: vec![vec![0; b]; nf(&schema.context)],
        target: vec![vec![0; b]; nf(&schema.item)],
        cand: vec![vec![0; b * c_max]; nf(&schema.item)],
        click: vec![vec![0; b * s_max]; nf(&schema.sequence)],
        page: vec![vec![0; b * s_max * p_max]; nf(&schema.sequence)],
        cand_valid: vec![false; b * c_max],
        click_valid: vec![false; b * s_max],
        page_valid: vec![false; b * s_max * p_max],
        has_clicks: vec![false; b],
        labels: vec![0.0; b],
    };
    for (row, sample) in samples.iter().enumerate() {
        sample.validate(schema, s_max, p_max, c_max)?;
        ids.labels[row] = sample.label as f64;
        ids.has_clicks[row] = !sample.clicks.is_empty();
        for (f, col) in ids.user.iter_mut().enumerate() {
            col[row] = sample.user_ids[f];
        }
        for (f, col) in ids.context.iter_mut().enumerate() {
            col[row] = sample.context_ids[f];
        }
        for (f, col) in ids.target.iter_mut().enumerate() {
            col[row] = sample.target_ids[f];
        }
        for (ci, cand) in sample.candidates.iter().enumerate() {
            let at = row * c_max + ci;
            ids.cand_valid[at] = true;
            for (f, col) in ids.cand.iter_mut().enumerate() {
                col[at] = cand[f];
            }
        }
        for (si, click) in sample.clicks.iter().enumerate() {
            let at = row * s_max + si;
            ids.click_valid[at] = true;
            for (f, col) in ids.click.iter_mut().enumerate() {
                col[at] = click.item_ids[f];
            }
            for (pi, item) in click.page.iter().enumerate() {
                let pat = (row * s_max + si) * p_max + pi;
                ids.page_valid[pat] = true;
                for (f, col) in ids.page.iter_mut().enumerate() {
                    col[pat] = item[f];
                }
            }
        }
    }
    Ok(ids)
}

fn embed_rows(
    tape: &mut Tape,
    binding: &TapeBinding,
    tables: &[ParamId],
    ids_by_field: &[Vec<u32>],
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(tables.len());
    for (table, ids) in tables.iter().zip(ids_by_field) {
        parts.push(tape.gather(binding.node(*table), ids)?);
    }
    tape.concat_cols(&parts)
}

/// Forward pass artifacts for one batch.
pub struct BatchForward {
    pub binding: TapeBinding,
    /// [B x 1] predicted click probabilities.
    pub preds: NodeId,
    pub explicit: Option<CiuOutput>,
    pub implicit: Option<CiuOutput>,
}

/// Batched forward of the configured variant. Predictions are strictly
/// inside (0, 1).
pub fn forward_batch(
    tape: &mut Tape,
    params: &DcinParams,
    config: &DcinConfig,
    samples: &[&RawSample],
) -> Result<BatchForward> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = samples.len();
    let (s_max, p_max, c_max) = (config.s_max, config.p_max, config.c_max);
    let ids = assemble_batch(&params.schema, config, samples)?;
    let binding = TapeBinding::bind(tape, &params.set);

    let x_u = embed_rows(tape, &binding, &params.tables.user, &ids.user)?;
    let x_c = embed_rows(tape, &binding, &params.tables.context, &ids.context)?;
    let x_t = embed_rows(tape, &binding, &params.tables.item, &ids.target)?;
    let xs = embed_rows(tape, &binding, &params.tables.item, &ids.cand)?;
    let xc = embed_rows(tape, &binding, &params.tables.sequence, &ids.click)?;

    let click_mask: Vec<f64> = ids.click_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut explicit_out = None;
    let mut implicit_out = None;

    let final_input = if params.variant == Variant::Dnn {
        let mean_clicks = tape.block_mean_valid_rows(xc, s_max, &ids.click_valid)?;
        let mean_cands = tape.block_mean_valid_rows(xs, c_max, &ids.cand_valid)?;
        tape.concat_cols(&[x_u, x_t, x_c, mean_clicks, mean_cands])?
    } else {
        let pages = embed_rows(tape, &binding, &params.tables.sequence, &ids.page)?;
        let xc_aug = match &params.explicit {
            ContextUnit::Ciu(unit) => {
                let out = ciu::explicit_context_pass(
                    tape,
                    &binding,
                    unit,
                    xc,
                    pages,
                    &ids.page_valid,
                    &ids.click_valid,
                    p_max,
                )?;
                let node = out.output;
                explicit_out = Some(out);
                node
            }
            ContextUnit::Pool { w_v, w_o } => {
                let pv = tape.matmul(pages, binding.node(*w_v))?;
                let pooled = tape.block_mean_valid_rows(pv, p_max, &ids.page_valid)?;
                let proj = tape.matmul(pooled, binding.node(*w_o))?;
                let summed = tape.add(proj, xc)?;
                tape.mul_row_mask(summed, &click_mask)?
            }
            ContextUnit::Absent => unreachable!("non-dnn variant without explicit unit"),
        };

        let xt_re = match &params.implicit {
            ContextUnit::Ciu(unit) => {
                let out = ciu::ciu_forward_blocks(
                    tape,
                    &binding,
                    unit,
                    x_t,
                    xs,
                    &ids.cand_valid,
                    &vec![true; b],
                    c_max,
                )?;
                let node = out.output;
                implicit_out = Some(out);
                node
            }
            ContextUnit::Pool { w_v, w_o } => {
                let cv = tape.matmul(xs, binding.node(*w_v))?;
                let pooled = tape.block_mean_valid_rows(cv, c_max, &ids.cand_valid)?;
                let proj = tape.matmul(pooled, binding.node(*w_o))?;
                tape.add(proj, x_t)?
            }
            ContextUnit::Absent => unreachable!("non-dnn variant without implicit unit"),
        };

        match params.variant {
            Variant::Full | Variant::NoExplicitCiu | Variant::NoImplicitCiu => {
                let unit = params.aiau.as_ref().expect("aiau present");
                let aligned =
                    aiau::align_blocks(tape, &binding, unit, xt_re, xc_aug, &ids.click_valid, s_max)?;
                let mutual = aiau::mutual_influence_blocks(
                    tape,
                    &binding,
                    unit,
                    aligned,
                    &ids.click_valid,
                    s_max,
                )?;
                let pooled =
                    aiau::aggregate_blocks(tape, &binding, unit, mutual, &ids.click_valid, s_max)?;
                let empty = params.empty_interest.expect("empty interest present");
                let empty_rows = tape.repeat_rows(binding.node(empty), b);
                let x_s = tape.select_rows_by_flag(pooled, empty_rows, &ids.has_clicks)?;
                tape.concat_cols(&[x_s, x_u, x_t, x_c])?
            }
            Variant::NoAiau => {
                let mean_aug = tape.block_mean_valid_rows(xc_aug, s_max, &ids.click_valid)?;
                let (w, bias) = params.interest_proj.expect("projection present");
                let projected = tape.matmul(mean_aug, binding.node(w))?;
                let interest = tape.add_row_broadcast(projected, binding.node(bias))?;
                tape.concat_cols(&[interest, xt_re, x_u, x_t, x_c])?
            }
            Variant::Dnn => unreachable!(),
        }
    };

    let logits = params.final_mlp.forward(tape, &binding, final_input)?;
    let preds = tape.sigmoid(logits);
    Ok(BatchForward {
        binding,
        preds,
        explicit: explicit_out,
        implicit: implicit_out,
    })
}

/// Single-sample CTR prediction.
pub fn forward_single(params: &DcinParams, config: &DcinConfig, sample: &RawSample) -> Result<f64> {
    let mut tape = Tape::new();
    let out = forward_batch(&mut tape, params, config, &[sample])?;
    Ok(tape.value(out.preds).data()[0])
}

/// Negative log-likelihood of the batch (Bernoulli labels), recorded on
/// the tape.
pub fn loss(tape: &mut Tape, preds: NodeId, labels: &[f64]) -> Result<NodeId> {
    tape.bce_loss(preds, labels)
}

/// Forward-only predictions over a sample list, in input order.
pub fn predict(
    params: &DcinParams,
    config: &DcinConfig,
    samples: &[RawSample],
) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(config.batch_size.max(1)) {
        let refs: Vec<&RawSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let out = forward_batch(&mut tape, params, config, &refs)?;
        preds.extend_from_slice(tape.value(out.preds).data());
    }
    Ok(preds)
}

#[derive(Clone, Debug)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_auc: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingTrace {
    pub epochs: Vec<TrainEpoch>,
    /// Epoch whose parameters were kept (best validation AUC).
    pub best_epoch: Option<usize>,
}

/// Mini-batch AdaGrad over seeded shuffles. Keeps the parameters from the
/// epoch with the best validation AUC (the final epoch when no validation
/// data is supplied).
pub fn train(
    params: &mut DcinParams,
    config: &DcinConfig,
    train_set: &[RawSample],
    valid_set: &[RawSample],
) -> Result<TrainingTrace> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainingTrace::default();
    let mut best: Option<(f64, usize, ParamSet)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&RawSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<f64> = refs.iter().map(|s| s.label as f64).collect();
            let mut tape = Tape::new();
            let fwd = forward_batch(&mut tape, params, config, &refs)?;
            let loss_node = loss(&mut tape, fwd.preds, &labels)?;
            let loss_val = tape.value(loss_node).data()[0];
            if !loss_val.is_finite() {
                let name = params
                    .set
                    .first_non_finite_value()
                    .unwrap_or("<none: non-finite activations>")
                    .to_string();
                return Err(Error::TrainingDiverged { name });
            }
            loss_sum += loss_val * refs.len() as f64;
            seen += refs.len();
            tape.backward(loss_node)?;
            fwd.binding.harvest_grads(&tape, &mut params.set);
            adagrad_step(&mut params.set, config.learning_rate, config.adagrad_epsilon)?;
        }

        let mut row = TrainEpoch {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid_loss: None,
            valid_auc: None,
        };
        if !valid_set.is_empty() {
            let preds = predict(params, config, valid_set)?;
            let labels: Vec<u8> = valid_set.iter().map(|s| s.label).collect();
            row.valid_loss = Some(metrics::logloss(&preds, &labels));
            row.valid_auc = metrics::auc(&preds, &labels, TieMode::Half).ok();
            if let Some(auc) = row.valid_auc {
                let better = match &best {
                    Some((best_auc, _, _)) => auc > *best_auc,
                    None => true,
                };
                if better {
                    best = Some((auc, epoch, params.set.clone()));
                }
            }
        }
        trace.epochs.push(row);
    }

    if let Some((_, epoch, set)) = best {
        params.set = set;
        trace.best_epoch = Some(epoch);
    } else if !trace.epochs.is_empty() {
        trace.best_epoch = Some(trace.epochs.len() - 1);
    }
    Ok(trace)
}
