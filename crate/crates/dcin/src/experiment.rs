//! Experiment harness: gradient checking against finite differences,
//! repeated-seed training runs, top-k sweeps, and relevance-score dumps.

use crate::data::dataset::DatasetSplit;
use crate::embed::{ClickEntry, FeatureField, FeatureSchema, RawSample};
use crate::error::{Error, Result};
use crate::metrics::{self, TieMode};
use crate::model::{self, DcinConfig, DcinParams, Variant};
use crate::params::relative_error;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

// ── Gradient checking ───────────────────────────────────────────────────

/// Keep finite-difference probes well away from rectifier kinks and top-k
/// ties: two orders of magnitude above the perturbation.
const FD_EPS: f64 = 1e-5;
const KINK_GUARD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckRun {
    pub variant: Variant,
    pub seed: u64,
    pub scalars_checked: usize,
    pub max_rel_error: f64,
    /// Resamples needed to find a kink-free evaluation point.
    pub retries: usize,
}

fn random_gradcheck_config(rng: &mut ChaCha8Rng, variant: Variant) -> DcinConfig {
    let p_max = rng.gen_range(1..=4);
    let c_max = rng.gen_range(1..=6);
    DcinConfig {
        s_max: rng.gen_range(1..=4),
        p_max,
        c_max,
        k1: rng.gen_range(1..=p_max),
        k2: rng.gen_range(1..=c_max),
        embed_dim: rng.gen_range(1..=2),
        d_a: rng.gen_range(2..=8),
        relevance_hidden: vec![rng.gen_range(3..=5), rng.gen_range(2..=4)],
        align_hidden: vec![rng.gen_range(3..=6), rng.gen_range(2..=4)],
        agg_hidden: vec![rng.gen_range(3..=5), rng.gen_range(3..=5)],
        final_hidden: vec![rng.gen_range(4..=8), rng.gen_range(3..=6)],
        batch_size: 2,
        epochs: 1,
        seed: rng.gen(),
        variant,
        ..DcinConfig::default()
    }
}

fn random_gradcheck_schema(rng: &mut ChaCha8Rng, embed_dim: usize) -> FeatureSchema {
    let mut f = |name: &str| FeatureField {
        name: name.to_string(),
        vocabulary_size: rng.gen_range(3..=6),
        embedding_dim: embed_dim,
    };
    FeatureSchema {
        user: vec![f("user_id")],
        item: vec![f("item_id"), f("category"), f("price_bucket"), f("position")],
        context: vec![f("daypart")],
        sequence: vec![f("item_id"), f("category"), f("price_bucket"), f("position")],
    }
}

fn random_ids(rng: &mut ChaCha8Rng, fields: &[FeatureField]) -> Vec<u32> {
    fields
        .iter()
        .map(|f| rng.gen_range(0..f.vocabulary_size))
        .collect()
}

fn random_gradcheck_sample(
    rng: &mut ChaCha8Rng,
    schema: &FeatureSchema,
    config: &DcinConfig,
    label: u8,
) -> RawSample {
    let n_cands = rng.gen_range(1..=config.c_max);
    let mut candidates: Vec<Vec<u32>> = (0..n_cands).map(|_| random_ids(rng, &schema.item)).collect();
    let target_ids = candidates[rng.gen_range(0..candidates.len())].clone();
    let _ = &mut candidates;
    let n_clicks = rng.gen_range(0..=config.s_max);
    let clicks = (0..n_clicks)
        .map(|_| {
            let n_page = rng.gen_range(1..=config.p_max);
            ClickEntry {
                item_ids: random_ids(rng, &schema.sequence),
                page: (0..n_page).map(|_| random_ids(rng, &schema.sequence)).collect(),
            }
        })
        .collect();
    RawSample {
        sample_id: 0,
        label,
        user_ids: random_ids(rng, &schema.user),
        context_ids: random_ids(rng, &schema.context),
        target_ids,
        candidates,
        clicks,
    }
}

fn batch_loss(
    params: &DcinParams,
    config: &DcinConfig,
    samples: &[&RawSample],
    labels: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model::forward_batch(&mut tape, params, config, samples)?;
    let l = model::loss(&mut tape, fwd.preds, labels)?;
    Ok(tape.value(l).data()[0])
}

/// Central finite differences of the batch loss over every parameter
/// element of the model.
pub fn finite_diff_model(
    params: &mut DcinParams,
    config: &DcinConfig,
    samples: &[&RawSample],
    labels: &[f64],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let ids: Vec<_> = params.set.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.set.get(id).value.len();
        let mut grad = Tensor::zeros(params.set.get(id).value.shape());
        for e in 0..n {
            let orig = params.set.get(id).value.data()[e];
            params.set.get_mut(id).value.data_mut()[e] = orig + eps;
            let up = batch_loss(params, config, samples, labels)?;
            params.set.get_mut(id).value.data_mut()[e] = orig - eps;
            let down = batch_loss(params, config, samples, labels)?;
            params.set.get_mut(id).value.data_mut()[e] = orig;
            grad.data_mut()[e] = (up - down) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// One randomized analytic-vs-finite-difference comparison on a 2-sample
/// batch. Evaluation points sitting within `KINK_GUARD` of a rectifier
/// kink or a top-k tie are resampled.
pub fn gradient_check(variant: Variant, seed: u64) -> Result<GradCheckRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut retries = 0usize;
    loop {
        let config = random_gradcheck_config(&mut rng, variant);
        let schema = random_gradcheck_schema(&mut rng, config.embed_dim);
        let mut params = DcinParams::new(&config, schema.clone())?;
        let samples = [
            random_gradcheck_sample(&mut rng, &schema, &config, 1),
            random_gradcheck_sample(&mut rng, &schema, &config, 0),
        ];
        let refs: Vec<&RawSample> = samples.iter().collect();
        let labels = vec![1.0, 0.0];

        let mut tape = Tape::new();
        let fwd = model::forward_batch(&mut tape, &params, &config, &refs)?;
        let loss = model::loss(&mut tape, fwd.preds, &labels)?;
        let clamped_pred = tape
            .value(fwd.preds)
            .data()
            .iter()
            .any(|&p| !(1e-6..=1.0 - 1e-6).contains(&p));
        if tape.min_abs_relu_preactivation() < KINK_GUARD
            || tape.min_suppress_margin() < KINK_GUARD
            || clamped_pred
        {
            retries += 1;
            if retries > 50 {
                return Err(Error::Invariant(
                    "gradient check could not find a kink-free point".into(),
                ));
            }
            continue;
        }

        tape.backward(loss)?;
        fwd.binding.harvest_grads(&tape, &mut params.set);
        let analytic: Vec<Tensor> = params.set.iter().map(|p| p.grad.clone()).collect();
        params.set.zero_grads();
        let fd = finite_diff_model(&mut params, &config, &refs, &labels, FD_EPS)?;

        let mut max_rel = 0.0f64;
        let mut scalars = 0usize;
        for (a, b) in analytic.iter().zip(&fd) {
            for (x, y) in a.data().iter().zip(b.data()) {
                max_rel = max_rel.max(relative_error(*x, *y));
                scalars += 1;
            }
        }
        return Ok(GradCheckRun {
            variant,
            seed,
            scalars_checked: scalars,
            max_rel_error: max_rel,
            retries,
        });
    }
}

/// The full gradient suite: `n_runs` random tiny configurations cycling
/// through the full model and all three ablations.
pub fn gradient_suite(n_runs: usize, seed: u64) -> Result<Vec<GradCheckRun>> {
    let variants = [
        Variant::Full,
        Variant::NoExplicitCiu,
        Variant::NoImplicitCiu,
        Variant::NoAiau,
    ];
    (0..n_runs)
        .map(|i| gradient_check(variants[i % variants.len()], seed.wrapping_add(i as u64)))
        .collect()
}

// ── Repeated-seed experiments ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct VariantReport {
    pub variant: Variant,
    pub results: Vec<SeedResult>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_logloss: f64,
    pub std_logloss: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Train and evaluate one variant for one seed; test-set metrics come from
/// the best-validation checkpoint.
pub fn run_single(
    base: &DcinConfig,
    split: &DatasetSplit,
    variant: Variant,
    seed: u64,
    tie_mode: TieMode,
) -> Result<(f64, f64)> {
    let config = DcinConfig {
        variant,
        seed,
        ..base.clone()
    };
    let schema = split.schema(config.embed_dim);
    let mut params = DcinParams::new(&config, schema)?;
    model::train(&mut params, &config, &split.train, &split.valid)?;
    let preds = model::predict(&params, &config, &split.test)?;
    let labels: Vec<u8> = split.test.iter().map(|s| s.label).collect();
    let m = metrics::evaluate(&preds, &labels, tie_mode)?;
    Ok((m.auc, m.logloss))
}

/// Trains every requested variant once per seed and aggregates mean and
/// unbiased standard deviation. Failed seeds are recorded, not dropped.
pub fn run_experiment(
    base: &DcinConfig,
    split: &DatasetSplit,
    variants: &[Variant],
    seeds: &[u64],
    tie_mode: TieMode,
) -> ExperimentReport {
    let mut reports = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut results = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            match run_single(base, split, variant, seed, tie_mode) {
                Ok((auc, logloss)) => results.push(SeedResult {
                    seed,
                    auc,
                    logloss,
                    error: None,
                }),
                Err(e) => results.push(SeedResult {
                    seed,
                    auc: f64::NAN,
                    logloss: f64::NAN,
                    error: Some(e.to_string()),
                }),
            }
        }
        let good: Vec<&SeedResult> = results.iter().filter(|r| r.error.is_none()).collect();
        let (mean_auc, std_auc) = mean_std(&good.iter().map(|r| r.auc).collect::<Vec<_>>());
        let (mean_logloss, std_logloss) =
            mean_std(&good.iter().map(|r| r.logloss).collect::<Vec<_>>());
        reports.push(VariantReport {
            variant,
            results,
            mean_auc,
            std_auc,
            mean_logloss,
            std_logloss,
        });
    }
    ExperimentReport {
        seeds: seeds.to_vec(),
        variants: reports,
    }
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn human_table(&self) -> String {
        let mut out = String::new();
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("seeds: {seeds}\n"));
        out.push_str(&format!(
            "{:<18} {:>10} {:>10} {:>12} {:>12} {:>7}\n",
            "variant", "mean_auc", "std_auc", "mean_logloss", "std_logloss", "seeds"
        ));
        for v in &self.variants {
            let ok = v.results.iter().filter(|r| r.error.is_none()).count();
            out.push_str(&format!(
                "{:<18} {:>10.4} {:>10.4} {:>12.4} {:>12.4} {:>4}/{}\n",
                v.variant.as_str(),
                v.mean_auc,
                v.std_auc,
                v.mean_logloss,
                v.std_logloss,
                ok,
                v.results.len()
            ));
        }
        out
    }

    /// One record per (variant, seed) plus one aggregate per variant.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for v in &self.variants {
            for r in &v.results {
                match &r.error {
                    None => out.push_str(&format!(
                        "result\tvariant={}\tseed={}\tauc={:.17e}\tlogloss={:.17e}\n",
                        v.variant.as_str(),
                        r.seed,
                        r.auc,
                        r.logloss
                    )),
                    Some(e) => out.push_str(&format!(
                        "failed\tvariant={}\tseed={}\terror={}\n",
                        v.variant.as_str(),
                        r.seed,
                        e
                    )),
                }
            }
            out.push_str(&format!(
                "aggregate\tvariant={}\tmean_auc={:.17e}\tstd_auc={:.17e}\tmean_logloss={:.17e}\tstd_logloss={:.17e}\n",
                v.variant.as_str(),
                v.mean_auc,
                v.std_auc,
                v.mean_logloss,
                v.std_logloss
            ));
        }
        out
    }
}

// ── Top-k sweeps ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    K1,
    K2,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "k1" => Ok(SweepAxis::K1),
            "k2" => Ok(SweepAxis::K2),
            other => Err(Error::Config(format!("unknown sweep axis {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub k: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub results: Vec<SeedResult>,
}

/// Hold everything fixed and run the full model across k values.
pub fn k_sweep(
    base: &DcinConfig,
    split: &DatasetSplit,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    tie_mode: TieMode,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(values.len());
    for &k in values {
        let mut config = base.clone();
        match axis {
            SweepAxis::K1 => config.k1 = k,
            SweepAxis::K2 => config.k2 = k,
        }
        config.validate()?;
        let report = run_experiment(&config, split, &[Variant::Full], seeds, tie_mode);
        let v = &report.variants[0];
        if let Some(fail) = v.results.iter().find_map(|r| r.error.as_ref()) {
            return Err(Error::Invariant(format!("sweep point k={k} failed: {fail}")));
        }
        points.push(SweepPoint {
            k,
            mean_auc: v.mean_auc,
            std_auc: v.std_auc,
            results: v.results.clone(),
        });
    }
    Ok(points)
}

pub fn sweep_series_text(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut out = String::new();
    let name = match axis {
        SweepAxis::K1 => "k1",
        SweepAxis::K2 => "k2",
    };
    out.push_str(&format!("{name}\tmean_auc\tstd_auc\n"));
    for p in points {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", p.k, p.mean_auc, p.std_auc));
    }
    out
}

// ── Relevance dumps ─────────────────────────────────────────────────────

/// Per sample, the explicit relevance matrix (S x P rows) and the implicit
/// vector (C rows): sample_id, unit, anchor index, item index, anchor item
/// id, item id, raw score, kept flag. Exactly S*P + C rows per sample.
pub fn dump_relevance(
    params: &DcinParams,
    config: &DcinConfig,
    samples: &[RawSample],
    out: &mut impl Write,
) -> Result<usize> {
    if params.explicit_ciu().is_none() || params.implicit_ciu().is_none() {
        return Err(Error::Config(format!(
            "relevance dump needs both context units; variant {} lacks them",
            params.variant.as_str()
        )));
    }
    writeln!(out, "sample_id\tunit\tanchor\titem\tanchor_item_id\titem_id\tscore\tkept")?;
    let mut rows = 0usize;
    for sample in samples {
        let mut tape = Tape::new();
        let fwd = model::forward_batch(&mut tape, params, config, &[sample])?;
        let explicit = fwd.explicit.as_ref().expect("explicit unit present");
        let implicit = fwd.implicit.as_ref().expect("implicit unit present");

        let scores = tape.value(explicit.scores).data();
        for i in 0..config.s_max {
            let anchor_item = sample
                .clicks
                .get(i)
                .map(|c| c.item_ids[0])
                .unwrap_or(0);
            for j in 0..config.p_max {
                let at = i * config.p_max + j;
                let item = sample
                    .clicks
                    .get(i)
                    .and_then(|c| c.page.get(j))
                    .map(|p| p[0])
                    .unwrap_or(0);
                writeln!(
                    out,
                    "{}\texplicit\t{}\t{}\t{}\t{}\t{:.17e}\t{}",
                    sample.sample_id,
                    i,
                    j,
                    anchor_item,
                    item,
                    scores[at],
                    u8::from(explicit.keep[at])
                )?;
                rows += 1;
            }
        }

        let scores = tape.value(implicit.scores).data();
        for j in 0..config.c_max {
            let item = sample.candidates.get(j).map(|c| c[0]).unwrap_or(0);
            writeln!(
                out,
                "{}\timplicit\t0\t{}\t{}\t{}\t{:.17e}\t{}",
                sample.sample_id,
                j,
                sample.target_ids[0],
                item,
                scores[j],
                u8::from(implicit.keep[j])
            )?;
            rows += 1;
        }
    }
    Ok(rows)
}

/// Prediction artifact: one line per sample at full precision.
pub fn write_predictions(
    samples: &[RawSample],
    preds: &[f64],
    out: &mut impl Write,
) -> Result<()> {
    assert_eq!(samples.len(), preds.len());
    for (s, p) in samples.iter().zip(preds) {
        writeln!(out, "{}\t{}\t{:.17e}", s.sample_id, s.label, p)?;
    }
    Ok(())
}
