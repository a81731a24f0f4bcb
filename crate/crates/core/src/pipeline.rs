//! Stage functions and the per-(split, seed) driver.
//!
//! Every stage takes its inputs explicitly and draws randomness from a
//! stream derived only from `(seed, split, stage)`, so stages can be re-run
//! in isolation from stored artifacts and reproduce the in-memory result.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evidential::{features_of, train_stage1, Stage1Config, TrajectoryStore};
use crate::flow::{
    build_residual_pairs, residual_scale, train_flow, ConditionCoverage, ConditionLayout,
    FlowConfig, FlowModel, VectorField,
};
use crate::meta::{train_meta, train_plain_ce, Ablation, MetaConfig, StepLog};
use crate::metrics::{
    confidence_histogram, records_from_logits, score, select_lambda, EvalRecord, HistogramBin,
    MetricsRow, Scores,
};
use crate::numeric::{Mlp, Rng};
use crate::par::{self, Exec};
use crate::partition::{
    evaluate_partition, uts_elc, CleanNoisyPartition, FinchPartition, PartitionConfig,
};
use crate::synth::{
    generate, inject_noise, make_split, BenchmarkParams, BenchmarkSpec, NoiseConfig, Sample, Split,
};

/// Stream tags. Values are part of the reproducibility contract.
pub mod stream {
    pub const SPEC: u64 = 1;
    pub const GENERATE: u64 = 2;
    pub const CELL: u64 = 1000;
    pub const NOISE: u64 = 1;
    pub const BACKBONE_INIT: u64 = 2;
    pub const STAGE1: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const FLOW_INIT: u64 = 5;
    pub const FLOW_TRAIN: u64 = 6;
    pub const HOLDOUT: u64 = 7;
    pub const EXTRA_HEAD: u64 = 8;
    pub const META: u64 = 9;
    pub const PLAIN_INIT: u64 = 10;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDccrfm,
    NoDomainRa,
    NoCategoryRa,
    Mixup,
    NoElMetaTest,
    NoCeMetaTest,
    PlainCe,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoDccrfm,
        Variant::NoDomainRa,
        Variant::NoCategoryRa,
        Variant::Mixup,
        Variant::NoElMetaTest,
        Variant::NoCeMetaTest,
        Variant::PlainCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDccrfm => "no_dccrfm",
            Variant::NoDomainRa => "no_domain_ra",
            Variant::NoCategoryRa => "no_category_ra",
            Variant::Mixup => "mixup",
            Variant::NoElMetaTest => "no_el_meta_test",
            Variant::NoCeMetaTest => "no_ce_meta_test",
            Variant::PlainCe => "plain_ce",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Ours",
            Variant::NoDccrfm => "w/o DC-CRFM",
            Variant::NoDomainRa => "w/o domain RA",
            Variant::NoCategoryRa => "w/o category RA",
            Variant::Mixup => "w/ mixup (replace DC-CRFM)",
            Variant::NoElMetaTest => "w/o EL in meta-test",
            Variant::NoCeMetaTest => "w/o CE in meta-test",
            Variant::PlainCe => "CE baseline",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full | Variant::PlainCe => {}
            Variant::NoDccrfm => a.no_dccrfm = true,
            Variant::NoDomainRa => a.no_domain_ra = true,
            Variant::NoCategoryRa => a.no_category_ra = true,
            Variant::Mixup => a.mixup_instead = true,
            Variant::NoElMetaTest => a.no_el_meta_test = true,
            Variant::NoCeMetaTest => a.no_ce_meta_test = true,
        }
        a
    }

    /// Whether the variant trains on the clean/noisy partition.
    pub fn uses_partition(self) -> bool {
        self != Variant::PlainCe
    }

    pub fn uses_flow(self) -> bool {
        matches!(
            self,
            Variant::Full
                | Variant::NoDomainRa
                | Variant::NoCategoryRa
                | Variant::NoElMetaTest
                | Variant::NoCeMetaTest
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub benchmark: BenchmarkParams,
    pub noise: NoiseConfig,
    pub stage1: Stage1Config,
    pub partition: PartitionConfig,
    pub flow: FlowConfig,
    pub meta: MetaConfig,
    /// Fraction of the holdout pool (per observed class) kept for threshold
    /// selection and excluded from meta training.
    pub holdout_fraction: f64,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkParams::default(),
            noise: NoiseConfig::default(),
            stage1: Stage1Config::default(),
            partition: PartitionConfig::default(),
            flow: FlowConfig::default(),
            meta: MetaConfig::default(),
            holdout_fraction: 0.1,
            histogram_bins: 20,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.holdout_fraction),
            Config,
            "holdout fraction {} outside [0, 1)",
            self.holdout_fraction
        );
        self.meta.validate()
    }

    pub fn noise_label(&self) -> String {
        format!("{}_{}", self.noise.kind.as_str(), self.noise.ratio)
    }
}

pub fn cell_rng(seed: u64, split: usize) -> Rng {
    Rng::new(seed).fork(stream::CELL + split as u64)
}

/// Benchmark spec and clean dataset for one seed.
pub fn build_dataset(cfg: &PipelineConfig, seed: u64) -> Result<(BenchmarkSpec, Vec<Sample>)> {
    let root = Rng::new(seed);
    let spec = cfg.benchmark.build(&mut root.fork(stream::SPEC))?;
    let data = generate(&spec, &mut root.fork(stream::GENERATE))?;
    Ok((spec, data))
}

/// Leave-one-domain-out split with label noise injected into its sources.
pub fn noisy_split(
    cfg: &PipelineConfig,
    spec: &BenchmarkSpec,
    data: &[Sample],
    split: usize,
    seed: u64,
) -> Result<Split> {
    let mut s = make_split(data, spec, split)?;
    inject_noise(
        &mut s.sources,
        &cfg.noise,
        spec.known_classes,
        &mut cell_rng(seed, split).fork(stream::NOISE),
    )?;
    Ok(s)
}

fn hidden_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Evidential backbone training over all sources.
pub fn run_stage1(
    cfg: &PipelineConfig,
    split: &Split,
    seed: u64,
) -> Result<(Mlp, TrajectoryStore)> {
    let rng = cell_rng(seed, split.test_domain);
    let width = split
        .sources
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::Config("split has no source samples".into()))?;
    let mut backbone = Mlp::new(
        &hidden_sizes(width, &cfg.stage1.hidden, split.known_classes),
        &mut rng.fork(stream::BACKBONE_INIT),
    )?;
    let store = train_stage1(
        &mut backbone,
        &split.sources,
        &cfg.stage1,
        &mut rng.fork(stream::STAGE1),
    )?;
    Ok((backbone, store))
}

pub fn run_cluster(
    cfg: &PipelineConfig,
    split: &Split,
    store: &TrajectoryStore,
    exec: Exec,
) -> Result<(Vec<FinchPartition>, CleanNoisyPartition)> {
    uts_elc(store, &split.sources, &cfg.partition, exec)
}

/// Stratified validation holdout: `fraction` of each observed class
/// (rounded half away from zero), drawn from the clean set when a partition
/// is given and from all sources otherwise. Returned ids are sorted.
pub fn holdout(
    cfg: &PipelineConfig,
    split: &Split,
    partition: Option<&CleanNoisyPartition>,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    let pool: Vec<&Sample> = match partition {
        Some(p) => {
            let clean = p.clean_ids();
            split
                .sources
                .iter()
                .filter(|s| clean.contains(&s.id))
                .collect()
        }
        None => split.sources.iter().collect(),
    };
    let tag = if partition.is_some() { 0 } else { 1 };
    let mut rng = cell_rng(seed, split.test_domain)
        .fork(stream::HOLDOUT)
        .fork(tag);
    let mut out = BTreeSet::new();
    for c in 0..split.known_classes {
        let members: Vec<usize> = pool
            .iter()
            .filter(|s| s.observed_label == c)
            .map(|s| s.id)
            .collect();
        let take = (cfg.holdout_fraction * members.len() as f64).round() as usize;
        for i in rng.choose_indices(members.len(), take.min(members.len())) {
            out.insert(members[i]);
        }
    }
    Ok(out)
}

/// Clean and noisy training sets for the meta loop, with the holdout removed.
pub fn meta_sets<'a>(
    split: &'a Split,
    partition: &CleanNoisyPartition,
    held: &BTreeSet<usize>,
) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for s in &split.sources {
        if held.contains(&s.id) {
            continue;
        }
        match partition.is_noisy(s.id) {
            Some(false) => clean.push(s),
            Some(true) => noisy.push(s),
            None => {}
        }
    }
    (clean, noisy)
}

#[derive(Debug, Clone)]
pub struct FlowStage {
    pub model: FlowModel,
    pub coverage: Vec<ConditionCoverage>,
    pub losses: Vec<f64>,
}

/// Fits the residual flow on clean, non-holdout sources.
pub fn run_flow(
    cfg: &PipelineConfig,
    split: &Split,
    partition: &CleanNoisyPartition,
    held: &BTreeSet<usize>,
    seed: u64,
) -> Result<FlowStage> {
    let rng = cell_rng(seed, split.test_domain);
    let (clean, _) = meta_sets(split, partition, held);
    ensure!(
        !clean.is_empty(),
        Config,
        "no clean samples to fit the flow on"
    );
    let layout = ConditionLayout::new(split.known_classes, split.source_domains.clone());
    let (pairs, coverage) = build_residual_pairs(
        &clean,
        &layout,
        cfg.flow.pair_cap,
        &mut rng.fork(stream::PAIRS),
    )?;
    let width = clean[0].features.len();
    let mut model = FlowModel::new(
        width,
        layout,
        residual_scale(&pairs),
        &cfg.flow.hidden,
        &mut rng.fork(stream::FLOW_INIT),
    )?;
    let losses = if pairs.is_empty() {
        log::warn!("no residual pairs available; the flow stays at its initialization");
        Vec::new()
    } else {
        train_flow(
            &mut model,
            &pairs,
            &cfg.flow,
            &mut rng.fork(stream::FLOW_TRAIN),
        )?
    };
    Ok(FlowStage {
        model,
        coverage,
        losses,
    })
}

/// Trains one variant. Meta variants warm-start from the Stage-1 backbone
/// with an extra output; the CE baseline starts fresh on all non-holdout
/// sources and ignores `backbone`, `partition` and `flow`.
pub fn run_meta(
    cfg: &PipelineConfig,
    variant: Variant,
    split: &Split,
    backbone: Option<&Mlp>,
    partition: &CleanNoisyPartition,
    flow: Option<&FlowModel>,
    seed: u64,
) -> Result<(Mlp, Vec<StepLog>)> {
    let rng = cell_rng(seed, split.test_domain);
    if variant == Variant::PlainCe {
        let held = holdout(cfg, split, None, seed)?;
        let train: Vec<&Sample> = split
            .sources
            .iter()
            .filter(|s| !held.contains(&s.id))
            .collect();
        let width = split
            .sources
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::Config("split has no source samples".into()))?;
        let mut model = Mlp::new(
            &hidden_sizes(width, &cfg.stage1.hidden, split.known_classes),
            &mut rng.fork(stream::PLAIN_INIT),
        )?;
        let log = train_plain_ce(&mut model, &train, &cfg.meta, &rng.fork(stream::META))?;
        return Ok((model, log));
    }
    let held = holdout(cfg, split, Some(partition), seed)?;
    let (clean, noisy) = meta_sets(split, partition, &held);
    let meta_cfg = MetaConfig {
        ablation: variant.ablation(),
        ..cfg.meta.clone()
    };
    let backbone = backbone
        .ok_or_else(|| Error::State(format!("variant {variant} needs the Stage-1 backbone")))?;
    let mut model = backbone.with_extra_output(&mut rng.fork(stream::EXTRA_HEAD));
    let field = flow
        .filter(|_| variant.uses_flow())
        .map(|f| f as &dyn VectorField);
    ensure!(
        field.is_some() || !variant.uses_flow(),
        State,
        "variant {variant} needs a trained flow"
    );
    let log = train_meta(
        &mut model,
        &clean,
        &noisy,
        field,
        split.known_classes,
        &split.source_domains,
        &meta_cfg,
        &rng.fork(stream::META),
    )?;
    Ok((model, log))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub lambda: f64,
    pub scores: Scores,
    pub test_records: Vec<EvalRecord>,
    pub histogram: Vec<HistogramBin>,
}

/// Selects the threshold on the variant's holdout and scores the test domain.
pub fn run_evaluate(
    cfg: &PipelineConfig,
    variant: Variant,
    split: &Split,
    model: &Mlp,
    partition: &CleanNoisyPartition,
    seed: u64,
) -> Result<Evaluation> {
    let held = holdout(
        cfg,
        split,
        variant.uses_partition().then_some(partition),
        seed,
    )?;
    let val: Vec<&Sample> = split
        .sources
        .iter()
        .filter(|s| held.contains(&s.id))
        .collect();
    let val_records = if val.is_empty() {
        Vec::new()
    } else {
        let labels: Vec<usize> = val.iter().map(|s| s.observed_label).collect();
        records_from_logits(
            &model.predict(&features_of(&val)?)?,
            &labels,
            split.known_classes,
        )?
    };
    let lambda = select_lambda(&val_records);
    let test: Vec<&Sample> = split.test.iter().collect();
    let labels: Vec<usize> = test.iter().map(|s| s.original_label).collect();
    let test_records = records_from_logits(
        &model.predict(&features_of(&test)?)?,
        &labels,
        split.known_classes,
    )?;
    Ok(Evaluation {
        lambda,
        scores: score(&test_records, lambda)?,
        histogram: confidence_histogram(&test_records, cfg.histogram_bins),
        test_records,
    })
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub model: Mlp,
    pub log: Vec<StepLog>,
    pub evaluation: Evaluation,
    pub row: MetricsRow,
}

/// Everything one (split, seed) cell produces.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub seed: u64,
    pub split: Split,
    pub backbone: Mlp,
    pub trajectories: TrajectoryStore,
    pub partitions: Vec<FinchPartition>,
    pub partition: CleanNoisyPartition,
    pub partition_accuracy: f64,
    pub flow: Option<FlowStage>,
    pub variants: Vec<VariantResult>,
}

pub fn run_cell(
    cfg: &PipelineConfig,
    spec: &BenchmarkSpec,
    data: &[Sample],
    split_id: usize,
    seed: u64,
    variants: &[Variant],
    exec: Exec,
) -> Result<CellResult> {
    cfg.validate()?;
    let split = noisy_split(cfg, spec, data, split_id, seed)?;
    let (backbone, store) = run_stage1(cfg, &split, seed)?;
    let (partitions, partition) = run_cluster(cfg, &split, &store, exec)?;
    let partition_accuracy = evaluate_partition(&partition, &split.sources);
    let flow = if variants.iter().any(|v| v.uses_flow()) {
        let held = holdout(cfg, &split, Some(&partition), seed)?;
        Some(run_flow(cfg, &split, &partition, &held, seed)?)
    } else {
        None
    };
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (model, log) = run_meta(
            cfg,
            variant,
            &split,
            Some(&backbone),
            &partition,
            flow.as_ref().map(|f| &f.model),
            seed,
        )?;
        let evaluation = run_evaluate(cfg, variant, &split, &model, &partition, seed)?;
        let row = MetricsRow {
            variant: variant.name().to_string(),
            split: Some(split_id),
            seed,
            noise: cfg.noise_label(),
            acc: evaluation.scores.acc,
            h_score: evaluation.scores.h_score,
            oscr: evaluation.scores.oscr,
            partition_accuracy: variant.uses_partition().then_some(partition_accuracy),
        };
        results.push(VariantResult {
            variant,
            model,
            log,
            evaluation,
            row,
        });
    }
    Ok(CellResult {
        seed,
        split,
        backbone,
        trajectories: store,
        partitions,
        partition,
        partition_accuracy,
        flow,
        variants: results,
    })
}

/// Runs every (seed, split) cell, in parallel under `Exec::Parallel`.
/// Results come back in (seed, split) order.
pub fn run_grid(
    cfg: &PipelineConfig,
    seeds: &[u64],
    splits: &[usize],
    variants: &[Variant],
    exec: Exec,
) -> Result<Vec<CellResult>> {
    let datasets: Vec<(u64, (BenchmarkSpec, Vec<Sample>))> = seeds
        .iter()
        .map(|&s| build_dataset(cfg, s).map(|d| (s, d)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|i| splits.iter().map(move |&sp| (i, sp)))
        .collect();
    par::map(exec, &cells, |&(i, sp)| {
        let (seed, (spec, data)) = &datasets[i];
        run_cell(cfg, spec, data, sp, *seed, variants, Exec::Sequential)
    })
    .into_iter()
    .collect()
}
