//! `run`, `stage` and `compare`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use osdg_core::metrics::MetricsRow;
use osdg_core::par::{self, Exec};
use osdg_core::partition::{evaluate_partition, CleanNoisyPartition};
use osdg_core::pipeline::{
    build_dataset, holdout, noisy_split, run_cell, run_cluster, run_evaluate, run_flow, run_meta,
    run_stage1, CellResult, Evaluation, PipelineConfig, Variant,
};
use osdg_core::synth::Split;

use crate::artifacts::{self, CellPaths, MetricsLine, RunManifest};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

fn exec_of(cfg: &ExperimentConfig) -> Exec {
    if cfg.parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn metrics_line(
    pipe: &PipelineConfig,
    variant: Variant,
    split: usize,
    seed: u64,
    eval: &Evaluation,
    partition_accuracy: f64,
) -> MetricsLine {
    MetricsLine {
        row: MetricsRow {
            variant: variant.name().to_string(),
            split: Some(split),
            seed,
            noise: pipe.noise_label(),
            acc: eval.scores.acc,
            h_score: eval.scores.h_score,
            oscr: eval.scores.oscr,
            partition_accuracy: variant.uses_partition().then_some(partition_accuracy),
        },
        lambda: Some(eval.lambda),
    }
}

fn relative(out: &Path, p: PathBuf) -> PathBuf {
    p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p)
}

fn write_evaluation(
    paths: &CellPaths,
    hash: &str,
    variant: Variant,
    eval: &Evaluation,
    line: &MetricsLine,
) -> Result<Vec<PathBuf>> {
    artifacts::write_confidences(&paths.confidences(variant), hash, &eval.test_records)?;
    artifacts::write_histogram(&paths.histogram(variant), hash, &eval.histogram)?;
    artifacts::write_metrics(&paths.metrics(variant), hash, std::slice::from_ref(line))?;
    Ok(vec![
        paths.confidences(variant),
        paths.histogram(variant),
        paths.metrics(variant),
    ])
}

/// Writes every artifact of a finished cell; returns the files written.
fn write_cell(
    out: &Path,
    hash: &str,
    pipe: &PipelineConfig,
    cell: &CellResult,
) -> Result<(Vec<PathBuf>, Vec<MetricsLine>)> {
    let split = cell.split.test_domain;
    let paths = CellPaths::new(out, split, cell.seed);
    artifacts::write_dataset(&paths.dataset(), hash, &cell.split)?;
    artifacts::write_trajectories(&paths.trajectories(), hash, &cell.trajectories)?;
    artifacts::write_mlp(&paths.backbone(), hash, &cell.backbone)?;
    artifacts::write_partition(&paths.partition(), hash, &cell.partition)?;
    let mut files = vec![
        paths.dataset(),
        paths.trajectories(),
        paths.backbone(),
        paths.partition(),
    ];
    if let Some(flow) = &cell.flow {
        artifacts::write_flow(&paths.flow(), hash, &flow.model)?;
        artifacts::write_coverage(&paths.coverage(), hash, &flow.coverage)?;
        files.extend([paths.flow(), paths.coverage()]);
    }
    let mut lines = Vec::new();
    for v in &cell.variants {
        artifacts::write_mlp(&paths.model(v.variant), hash, &v.model)?;
        artifacts::write_runlog(&paths.runlog(v.variant), hash, &v.log)?;
        files.extend([paths.model(v.variant), paths.runlog(v.variant)]);
        let line = metrics_line(
            pipe,
            v.variant,
            split,
            cell.seed,
            &v.evaluation,
            cell.partition_accuracy,
        );
        files.extend(write_evaluation(
            &paths,
            hash,
            v.variant,
            &v.evaluation,
            &line,
        )?);
        lines.push(line);
    }
    Ok((files, lines))
}

/// Orders per-cell lines by (variant in config order, seed, split) and
/// appends one average row after each complete (variant, seed) group.
pub fn aggregate(cfg: &ExperimentConfig, lines: &[MetricsLine]) -> Result<Vec<MetricsLine>> {
    let splits = cfg.split_ids();
    let mut out = Vec::new();
    for &v in &cfg.variants {
        for &seed in &cfg.seeds {
            let group: Vec<&MetricsLine> = splits
                .iter()
                .filter_map(|&sp| {
                    lines.iter().find(|l| {
                        l.row.variant == v.name() && l.row.seed == seed && l.row.split == Some(sp)
                    })
                })
                .collect();
            out.extend(group.iter().map(|&l| l.clone()));
            if group.len() == splits.len() {
                let rows: Vec<MetricsRow> = group.iter().map(|l| l.row.clone()).collect();
                out.push(MetricsLine {
                    row: MetricsRow::average(&rows)?,
                    lambda: None,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub lines: Vec<MetricsLine>,
    pub manifest: RunManifest,
}

/// Runs every (split, seed) cell for every configured variant and writes
/// `metrics.csv`, `manifest.json`, `config.json` and per-cell artifacts under
/// the output directory. If any cell fails, the manifest is still written
/// (status `failed`, listing what was produced) and an error is returned.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    let hash = cfg.hash();
    let pipe = cfg.pipeline();
    let config_path = out.join("config.json");
    let mut text = serde_json::to_string_pretty(cfg).map_err(|source| HarnessError::Json {
        path: config_path.clone(),
        source,
    })?;
    text.push('\n');
    artifacts::write_file(&config_path, text.as_bytes())?;

    let splits = cfg.split_ids();
    let cells: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| splits.iter().map(move |&sp| (s, sp)))
        .collect();
    let datasets: BTreeMap<u64, _> = cfg
        .seeds
        .iter()
        .map(|&s| build_dataset(&pipe, s).map(|d| (s, d)))
        .collect::<osdg_core::Result<_>>()?;
    let results = par::map(exec_of(cfg), &cells, |&(seed, sp)| {
        let (spec, data) = &datasets[&seed];
        let cell = run_cell(&pipe, spec, data, sp, seed, &cfg.variants, Exec::Sequential)?;
        write_cell(out, &hash, &pipe, &cell)
    });

    let mut files = vec![PathBuf::from("config.json")];
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    for (&(seed, sp), r) in cells.iter().zip(results) {
        match r {
            Ok((f, l)) => {
                files.extend(f.into_iter().map(|p| relative(out, p)));
                lines.extend(l);
            }
            Err(e) => {
                log::error!("cell split {sp} seed {seed} failed: {e}");
                errors.push(format!("split {sp} seed {seed}: {e}"));
            }
        }
    }
    let lines = aggregate(cfg, &lines)?;
    let metrics_path = out.join("metrics.csv");
    artifacts::write_metrics(&metrics_path, &hash, &lines)?;
    files.push(PathBuf::from("metrics.csv"));
    let manifest = RunManifest::build(out, &hash, files, errors.clone())?;
    manifest.write(out)?;
    if let Some(first) = errors.first() {
        return Err(HarnessError::CellsFailed {
            failed: errors.len(),
            total: cells.len(),
            first: first.clone(),
        });
    }
    Ok(RunOutcome {
        metrics_path,
        lines,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Stage1,
    Cluster,
    Flow,
    Meta,
    Evaluate,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Generate,
        Stage::Stage1,
        Stage::Cluster,
        Stage::Flow,
        Stage::Meta,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Stage1 => "stage1",
            Stage::Cluster => "cluster",
            Stage::Flow => "flow",
            Stage::Meta => "meta",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Artifacts this stage reads, each with the stage that writes it.
    pub fn inputs(self, paths: &CellPaths, variant: Option<Variant>) -> Vec<(PathBuf, Stage)> {
        let partitioned = variant.is_none_or(Variant::uses_partition);
        match self {
            Stage::Generate => vec![],
            Stage::Stage1 => vec![(paths.dataset(), Stage::Generate)],
            Stage::Cluster => vec![
                (paths.dataset(), Stage::Generate),
                (paths.trajectories(), Stage::Stage1),
            ],
            Stage::Flow => vec![
                (paths.dataset(), Stage::Generate),
                (paths.partition(), Stage::Cluster),
            ],
            Stage::Meta => {
                let mut v = vec![(paths.dataset(), Stage::Generate)];
                if partitioned {
                    v.push((paths.backbone(), Stage::Stage1));
                    v.push((paths.partition(), Stage::Cluster));
                }
                if variant.is_some_and(Variant::uses_flow) {
                    v.push((paths.flow(), Stage::Flow));
                }
                v
            }
            Stage::Evaluate => {
                let mut v = vec![(paths.dataset(), Stage::Generate)];
                if partitioned {
                    v.push((paths.partition(), Stage::Cluster));
                }
                if let Some(var) = variant {
                    v.push((paths.model(var), Stage::Meta));
                }
                v
            }
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown stage {s:?}")))
    }
}

struct StageCtx<'a> {
    cfg: &'a ExperimentConfig,
    pipe: PipelineConfig,
    hash: String,
    paths: CellPaths,
    split: usize,
    seed: u64,
}

impl StageCtx<'_> {
    fn dataset(&self) -> Result<Split> {
        let b = &self.cfg.benchmark;
        artifacts::read_dataset(
            &self.paths.dataset(),
            &self.hash,
            self.split,
            b.num_domains,
            b.known_classes,
            b.unseen_classes,
            b.feature_dim,
        )
    }

    fn partition(&self, variant: Option<Variant>) -> Result<CleanNoisyPartition> {
        if variant.is_none_or(Variant::uses_partition) {
            artifacts::read_partition(&self.paths.partition(), &self.hash)
        } else {
            Ok(CleanNoisyPartition::from_entries(Vec::new()))
        }
    }
}

/// Runs one stage of one (split, seed) cell from the artifacts of earlier
/// stages and returns the files it wrote. `meta` and `evaluate` need a
/// variant.
pub fn cmd_stage(
    stage: Stage,
    cfg: &ExperimentConfig,
    split: usize,
    seed: u64,
    variant: Option<Variant>,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if !cfg.split_ids().contains(&split) {
        return Err(HarnessError::Config(format!(
            "split {split} is not in the configured grid"
        )));
    }
    if matches!(stage, Stage::Meta | Stage::Evaluate) && variant.is_none() {
        return Err(HarnessError::Config(format!(
            "stage {stage} needs --variant"
        )));
    }
    let ctx = StageCtx {
        cfg,
        pipe: cfg.pipeline(),
        hash: cfg.hash(),
        paths: CellPaths::new(&cfg.output_dir, split, seed),
        split,
        seed,
    };
    for (artifact, producer) in stage.inputs(&ctx.paths, variant) {
        if !artifact.exists() {
            return Err(HarnessError::Dependency {
                stage: stage.name(),
                producer: producer.name(),
                artifact,
            });
        }
    }
    let (pipe, hash, paths) = (&ctx.pipe, ctx.hash.as_str(), &ctx.paths);
    match stage {
        Stage::Generate => {
            let (spec, data) = build_dataset(pipe, seed)?;
            let s = noisy_split(pipe, &spec, &data, split, seed)?;
            artifacts::write_dataset(&paths.dataset(), hash, &s)?;
            Ok(vec![paths.dataset()])
        }
        Stage::Stage1 => {
            let s = ctx.dataset()?;
            let (backbone, store) = run_stage1(pipe, &s, seed)?;
            artifacts::write_mlp(&paths.backbone(), hash, &backbone)?;
            artifacts::write_trajectories(&paths.trajectories(), hash, &store)?;
            Ok(vec![paths.backbone(), paths.trajectories()])
        }
        Stage::Cluster => {
            let s = ctx.dataset()?;
            let store =
                artifacts::read_trajectories(&paths.trajectories(), hash, pipe.stage1.epochs)?;
            let (_, p) = run_cluster(pipe, &s, &store, exec_of(cfg))?;
            artifacts::write_partition(&paths.partition(), hash, &p)?;
            Ok(vec![paths.partition()])
        }
        Stage::Flow => {
            let s = ctx.dataset()?;
            let p = ctx.partition(None)?;
            let held = holdout(pipe, &s, Some(&p), seed)?;
            let flow = run_flow(pipe, &s, &p, &held, seed)?;
            artifacts::write_flow(&paths.flow(), hash, &flow.model)?;
            artifacts::write_coverage(&paths.coverage(), hash, &flow.coverage)?;
            Ok(vec![paths.flow(), paths.coverage()])
        }
        Stage::Meta => {
            let v = variant.expect("checked above");
            let s = ctx.dataset()?;
            let p = ctx.partition(variant)?;
            let backbone = if v.uses_partition() {
                Some(artifacts::read_mlp(&paths.backbone(), hash)?)
            } else {
                None
            };
            let flow = if v.uses_flow() {
                Some(artifacts::read_flow(&paths.flow(), hash)?)
            } else {
                None
            };
            let (model, log) = run_meta(pipe, v, &s, backbone.as_ref(), &p, flow.as_ref(), seed)?;
            artifacts::write_mlp(&paths.model(v), hash, &model)?;
            artifacts::write_runlog(&paths.runlog(v), hash, &log)?;
            Ok(vec![paths.model(v), paths.runlog(v)])
        }
        Stage::Evaluate => {
            let v = variant.expect("checked above");
            let s = ctx.dataset()?;
            let p = ctx.partition(variant)?;
            let model = artifacts::read_mlp(&paths.model(v), hash)?;
            let eval = run_evaluate(pipe, v, &s, &model, &p, seed)?;
            let line = metrics_line(
                pipe,
                v,
                split,
                ctx.seed,
                &eval,
                evaluate_partition(&p, &s.sources),
            );
            write_evaluation(paths, hash, v, &eval, &line)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDelta {
    pub split: usize,
    pub seed: u64,
    pub acc: f64,
    pub h_score: f64,
    pub oscr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single pair.
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+.4} ± {:.4}", self.mean, self.std)
    }
}

/// Candidate minus baseline, paired per (split, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub baseline: String,
    pub candidate: String,
    pub pairs: Vec<PairDelta>,
    pub acc: MeanStd,
    pub h_score: MeanStd,
    pub oscr: MeanStd,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# baseline={} candidate={}\nsplit,seed,acc_delta,h_score_delta,oscr_delta\n",
            self.baseline, self.candidate
        );
        for p in &self.pairs {
            s += &format!(
                "{},{},{},{},{}\n",
                p.split, p.seed, p.acc, p.h_score, p.oscr
            );
        }
        s += &format!(
            "mean,,{},{},{}\n",
            self.acc.mean, self.h_score.mean, self.oscr.mean
        );
        s += &format!(
            "std,,{},{},{}\n",
            self.acc.std, self.h_score.std, self.oscr.std
        );
        s
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} vs {} over {} pairs",
            self.candidate,
            self.baseline,
            self.pairs.len()
        )?;
        writeln!(f, "  acc      {}", self.acc)?;
        writeln!(f, "  h_score  {}", self.h_score)?;
        write!(f, "  oscr     {}", self.oscr)
    }
}

fn pick_variant(cfg: &ExperimentConfig, chosen: Option<Variant>) -> Result<Variant> {
    match chosen {
        Some(v) if cfg.variants.contains(&v) => Ok(v),
        Some(v) => Err(HarnessError::Config(format!(
            "variant {v} was not run under {}",
            cfg.output_dir.display()
        ))),
        None if cfg.variants.len() == 1 => Ok(cfg.variants[0]),
        None => Err(HarnessError::Config(format!(
            "{} ran several variants; choose one",
            cfg.output_dir.display()
        ))),
    }
}

fn per_cell(cfg: &ExperimentConfig, v: Variant) -> Result<BTreeMap<(usize, u64), MetricsRow>> {
    let path = cfg.output_dir.join("metrics.csv");
    let mut map = BTreeMap::new();
    for l in artifacts::read_metrics(&path, Some(&cfg.hash()))? {
        if l.row.variant != v.name() {
            continue;
        }
        if let Some(sp) = l.row.split {
            if map.insert((sp, l.row.seed), l.row).is_some() {
                return Err(HarnessError::format(
                    &path,
                    format!("duplicate row for split {sp}"),
                ));
            }
        }
    }
    Ok(map)
}

/// Pairs the per-cell rows of two finished runs. The (split, seed) grids
/// must match exactly.
pub fn cmd_compare(
    baseline: &ExperimentConfig,
    candidate: &ExperimentConfig,
    baseline_variant: Option<Variant>,
    candidate_variant: Option<Variant>,
) -> Result<CompareReport> {
    let bv = pick_variant(baseline, baseline_variant)?;
    let cv = pick_variant(candidate, candidate_variant)?;
    let b = per_cell(baseline, bv)?;
    let c = per_cell(candidate, cv)?;
    let bk: BTreeSet<_> = b.keys().collect();
    let ck: BTreeSet<_> = c.keys().collect();
    if bk != ck {
        let only_b: Vec<_> = bk.difference(&ck).collect();
        let only_c: Vec<_> = ck.difference(&bk).collect();
        return Err(HarnessError::GridMismatch(format!(
            "(split, seed) cells only in baseline: {only_b:?}; only in candidate: {only_c:?}"
        )));
    }
    if bk.is_empty() {
        return Err(HarnessError::GridMismatch("no cells to compare".into()));
    }
    let pairs: Vec<PairDelta> = b
        .iter()
        .map(|(&(split, seed), br)| {
            let cr = &c[&(split, seed)];
            PairDelta {
                split,
                seed,
                acc: cr.acc - br.acc,
                h_score: cr.h_score - br.h_score,
                oscr: cr.oscr - br.oscr,
            }
        })
        .collect();
    let col = |f: fn(&PairDelta) -> f64| MeanStd::of(&pairs.iter().map(f).collect::<Vec<_>>());
    Ok(CompareReport {
        baseline: format!("{}:{bv}", baseline.output_dir.display()),
        candidate: format!("{}:{cv}", candidate.output_dir.display()),
        acc: col(|p| p.acc),
        h_score: col(|p| p.h_score),
        oscr: col(|p| p.oscr),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_inputs_come_from_earlier_stages() {
        let paths = CellPaths::new(Path::new("out"), 0, 0);
        for stage in Stage::ORDER {
            for v in [
                None,
                Some(Variant::Full),
                Some(Variant::NoDccrfm),
                Some(Variant::PlainCe),
            ] {
                for (_, producer) in stage.inputs(&paths, v) {
                    assert!(producer < stage, "{stage} reads output of {producer}");
                }
            }
            assert_eq!(stage.name().parse::<Stage>().unwrap(), stage);
        }
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }

    fn line(variant: &str, split: usize, seed: u64, oscr: f64) -> MetricsLine {
        MetricsLine {
            row: MetricsRow {
                variant: variant.into(),
                split: Some(split),
                seed,
                noise: "symmetric_0.5".into(),
                acc: oscr,
                h_score: oscr,
                oscr,
                partition_accuracy: None,
            },
            lambda: Some(0.5),
        }
    }

    #[test]
    fn aggregate_orders_rows_and_averages_complete_groups() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 0],
            splits: Some(vec![0, 2]),
            variants: vec![Variant::PlainCe, Variant::Full],
            ..ExperimentConfig::default()
        };
        let lines = vec![
            line("full", 2, 0, 0.4),
            line("full", 0, 0, 0.2),
            line("plain_ce", 0, 1, 0.1),
            line("full", 0, 1, 0.3),
        ];
        let agg = aggregate(&cfg, &lines).unwrap();
        let keys: Vec<(String, Option<usize>, u64)> = agg
            .iter()
            .map(|l| (l.row.variant.clone(), l.row.split, l.row.seed))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("plain_ce".into(), Some(0), 1),
                ("full".into(), Some(0), 1),
                ("full".into(), Some(0), 0),
                ("full".into(), Some(2), 0),
                ("full".into(), None, 0),
            ]
        );
        let avg = &agg[4];
        assert!((avg.row.oscr - 0.3).abs() < 1e-12);
        assert_eq!(avg.lambda, None);
    }
}
