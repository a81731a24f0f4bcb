//! On-disk artifacts. CSV files start with a `# config_hash=<hex>` line;
//! parameter files carry the hash in their binary header. Readers refuse
//! files written under a different hash.
//!
//! Floats are written in Rust's shortest round-trip form, so every CSV
//! reloads to bit-identical values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use osdg_core::evidential::TrajectoryStore;
use osdg_core::flow::{ConditionCoverage, ConditionLayout, FlowModel};
use osdg_core::meta::StepLog;
use osdg_core::metrics::{EvalRecord, HistogramBin, MetricsRow};
use osdg_core::numeric::{Activation, Dense, Mlp};
use osdg_core::partition::{CleanNoisyPartition, SampleAssignment};
use osdg_core::pipeline::Variant;
use osdg_core::synth::{Sample, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

const HASH_PREFIX: &str = "# config_hash=";
const PARAM_MAGIC: &[u8; 8] = b"OSDGPAR1";
const KIND_MLP: u8 = 0;
const KIND_FLOW: u8 = 1;

/// File names inside one `cells/split{d}/seed{s}` directory.
#[derive(Debug, Clone)]
pub struct CellPaths {
    pub dir: PathBuf,
}

impl CellPaths {
    pub fn new(out: &Path, split: usize, seed: u64) -> Self {
        Self {
            dir: out
                .join("cells")
                .join(format!("split{split}"))
                .join(format!("seed{seed}")),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.dir.join("trajectories.csv")
    }
    pub fn backbone(&self) -> PathBuf {
        self.dir.join("backbone.bin")
    }
    pub fn partition(&self) -> PathBuf {
        self.dir.join("partition.csv")
    }
    pub fn flow(&self) -> PathBuf {
        self.dir.join("flow.bin")
    }
    pub fn coverage(&self) -> PathBuf {
        self.dir.join("coverage.csv")
    }
    pub fn model(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("model_{v}.bin"))
    }
    pub fn runlog(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("runlog_{v}.csv"))
    }
    pub fn confidences(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("confidences_{v}.csv"))
    }
    pub fn histogram(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("histogram_{v}.csv"))
    }
    pub fn metrics(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("metrics_{v}.csv"))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    fs::write(path, bytes).map_err(HarnessError::io(path))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Serializes `rows` under a hash line and a column header.
pub fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(HarnessError::csv(path))?;
        for r in rows {
            w.write_record(r).map_err(HarnessError::csv(path))?;
        }
        w.flush().map_err(HarnessError::io(path))?;
    }
    write_file(path, &buf)
}

/// Reads a CSV written by [`write_csv`], checking hash and header.
/// `hash: None` skips the hash check but still requires the line.
pub fn read_csv(
    path: &Path,
    hash: Option<&str>,
    header: &[&str],
) -> Result<Vec<csv::StringRecord>> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let (first, body) = text
        .split_once('\n')
        .ok_or_else(|| HarnessError::format(path, "empty file"))?;
    let found = first
        .strip_prefix(HASH_PREFIX)
        .ok_or_else(|| HarnessError::format(path, "missing config hash line"))?;
    if let Some(expected) = hash {
        if found != expected {
            return Err(HarnessError::HashMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let got = r.headers().map_err(HarnessError::csv(path))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(HarnessError::format(
            path,
            format!(
                "columns {:?}, expected {:?}",
                got.iter().collect::<Vec<_>>(),
                header
            ),
        ));
    }
    r.records()
        .map(|x| x.map_err(HarnessError::csv(path)))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| HarnessError::format(path, format!("row has no column {i}")))?;
    raw.parse()
        .map_err(|_| HarnessError::format(path, format!("cannot parse {raw:?} in column {i}")))
}

fn opt_field(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(path, rec, i).map(Some),
    }
}

/// Columns: `id, domain, observed, original, f0..f{F-1}`.
pub fn write_dataset(path: &Path, hash: &str, split: &Split) -> Result<()> {
    let width = split
        .sources
        .first()
        .or(split.test.first())
        .map_or(0, |s| s.features.len());
    let mut header: Vec<String> = ["id", "domain", "observed", "original"]
        .map(String::from)
        .to_vec();
    header.extend((0..width).map(|j| format!("f{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = split
        .sources
        .iter()
        .chain(&split.test)
        .map(|s| {
            let mut r = vec![
                s.id.to_string(),
                s.domain.to_string(),
                s.observed_label.to_string(),
                s.original_label.to_string(),
            ];
            r.extend(s.features.iter().map(|&x| fmt_f64(x)));
            r
        })
        .collect();
    write_csv(path, hash, &header, &rows)
}

/// Rebuilds a split from its dataset file; rows from `test_domain` form the
/// test list, every other row is a source sample.
pub fn read_dataset(
    path: &Path,
    hash: &str,
    test_domain: usize,
    num_domains: usize,
    known_classes: usize,
    unseen_classes: usize,
    feature_dim: usize,
) -> Result<Split> {
    let mut header: Vec<String> = ["id", "domain", "observed", "original"]
        .map(String::from)
        .to_vec();
    header.extend((0..feature_dim).map(|j| format!("f{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut split = Split {
        test_domain,
        source_domains: (0..num_domains).filter(|&d| d != test_domain).collect(),
        sources: Vec::new(),
        test: Vec::new(),
        known_classes,
        unseen_classes,
    };
    for rec in read_csv(path, Some(hash), &header)? {
        let sample = Sample {
            id: field(path, &rec, 0)?,
            domain: field(path, &rec, 1)?,
            observed_label: field(path, &rec, 2)?,
            original_label: field(path, &rec, 3)?,
            features: (0..feature_dim)
                .map(|j| field(path, &rec, 4 + j))
                .collect::<Result<_>>()?,
        };
        if sample.domain == test_domain {
            split.test.push(sample);
        } else {
            split.sources.push(sample);
        }
    }
    Ok(split)
}

fn trajectory_header(epochs: usize) -> Vec<String> {
    let mut h = vec!["sample_id".to_string()];
    h.extend((1..=epochs).map(|e| format!("l_{e}")));
    h
}

/// Columns: `sample_id, l_1..l_{N_e}`.
pub fn write_trajectories(path: &Path, hash: &str, store: &TrajectoryStore) -> Result<()> {
    let header = trajectory_header(store.epochs());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = store
        .iter()
        .map(|(id, l)| {
            std::iter::once(id.to_string())
                .chain(l.iter().map(|&x| fmt_f64(x)))
                .collect()
        })
        .collect();
    write_csv(path, hash, &header, &rows)
}

pub fn read_trajectories(path: &Path, hash: &str, epochs: usize) -> Result<TrajectoryStore> {
    let header = trajectory_header(epochs);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut map = BTreeMap::new();
    for rec in read_csv(path, Some(hash), &header)? {
        let id: usize = field(path, &rec, 0)?;
        let l: Vec<f64> = (1..=epochs)
            .map(|j| field(path, &rec, j))
            .collect::<Result<_>>()?;
        map.insert(id, l);
    }
    Ok(TrajectoryStore::from_map(epochs, map)?)
}

const PARTITION_HEADER: [&str; 4] = ["sample_id", "assigned", "partition_id", "partition_score"];

pub fn write_partition(path: &Path, hash: &str, p: &CleanNoisyPartition) -> Result<()> {
    let rows: Vec<Vec<String>> = p
        .entries
        .iter()
        .map(|e| {
            vec![
                e.sample_id.to_string(),
                if e.noisy { "noisy" } else { "clean" }.to_string(),
                e.partition_id.to_string(),
                fmt_f64(e.partition_score),
            ]
        })
        .collect();
    write_csv(path, hash, &PARTITION_HEADER, &rows)
}

pub fn read_partition(path: &Path, hash: &str) -> Result<CleanNoisyPartition> {
    let entries = read_csv(path, Some(hash), &PARTITION_HEADER)?
        .iter()
        .map(|rec| {
            let noisy = match rec.get(1) {
                Some("noisy") => true,
                Some("clean") => false,
                other => {
                    return Err(HarnessError::format(
                        path,
                        format!("bad assignment {other:?}"),
                    ))
                }
            };
            Ok(SampleAssignment {
                sample_id: field(path, rec, 0)?,
                partition_id: field(path, rec, 2)?,
                partition_score: field(path, rec, 3)?,
                noisy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CleanNoisyPartition::from_entries(entries))
}

pub fn write_coverage(path: &Path, hash: &str, coverage: &[ConditionCoverage]) -> Result<()> {
    let rows: Vec<Vec<String>> = coverage
        .iter()
        .map(|c| {
            let q = &c.condition;
            vec![
                q.kind().map_or("invalid", |k| k.as_str()).to_string(),
                q.src_cat.to_string(),
                q.tgt_cat.to_string(),
                q.src_dom.to_string(),
                q.tgt_dom.to_string(),
                c.available.to_string(),
                c.used.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        hash,
        &[
            "kind",
            "src_cat",
            "tgt_cat",
            "src_dom",
            "tgt_dom",
            "available",
            "used",
        ],
        &rows,
    )
}

pub fn write_runlog(path: &Path, hash: &str, log: &[StepLog]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                fmt_f64(s.lr),
                fmt_f64(s.train_loss),
                fmt_f64(s.test_loss),
                fmt_f64(s.agreement),
            ]
        })
        .collect();
    write_csv(
        path,
        hash,
        &[
            "step",
            "lr",
            "meta_train_loss",
            "meta_test_loss",
            "pseudo_label_agreement",
        ],
        &rows,
    )
}

pub fn write_confidences(path: &Path, hash: &str, records: &[EvalRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                fmt_f64(r.confidence),
                r.predicted.to_string(),
                r.label.to_string(),
                r.unseen.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        hash,
        &["index", "confidence", "predicted", "label", "unseen"],
        &rows,
    )
}

pub fn write_histogram(path: &Path, hash: &str, bins: &[HistogramBin]) -> Result<()> {
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            vec![
                fmt_f64(b.lo),
                fmt_f64(b.hi),
                b.seen.to_string(),
                b.unseen.to_string(),
            ]
        })
        .collect();
    write_csv(path, hash, &["lo", "hi", "seen", "unseen"], &rows)
}

/// One metrics line plus the threshold it was scored at (empty for averages).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLine {
    pub row: MetricsRow,
    pub lambda: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "variant",
    "split",
    "seed",
    "noise",
    "acc",
    "h_score",
    "oscr",
    "partition_accuracy",
    "lambda",
];

pub fn write_metrics(path: &Path, hash: &str, lines: &[MetricsLine]) -> Result<()> {
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| {
            let r = &l.row;
            vec![
                r.variant.clone(),
                r.split.map_or("avg".to_string(), |s| s.to_string()),
                r.seed.to_string(),
                r.noise.clone(),
                fmt_f64(r.acc),
                fmt_f64(r.h_score),
                fmt_f64(r.oscr),
                fmt_opt(r.partition_accuracy),
                fmt_opt(l.lambda),
            ]
        })
        .collect();
    write_csv(path, hash, &METRICS_HEADER, &rows)
}

pub fn read_metrics(path: &Path, hash: Option<&str>) -> Result<Vec<MetricsLine>> {
    read_csv(path, hash, &METRICS_HEADER)?
        .iter()
        .map(|rec| {
            let split = match rec.get(1) {
                Some("avg") => None,
                _ => Some(field(path, rec, 1)?),
            };
            Ok(MetricsLine {
                row: MetricsRow {
                    variant: field(path, rec, 0)?,
                    split,
                    seed: field(path, rec, 2)?,
                    noise: field(path, rec, 3)?,
                    acc: field(path, rec, 4)?,
                    h_score: field(path, rec, 5)?,
                    oscr: field(path, rec, 6)?,
                    partition_accuracy: opt_field(path, rec, 7)?,
                },
                lambda: opt_field(path, rec, 8)?,
            })
        })
        .collect()
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn mlp(&mut self, net: &Mlp) {
        self.u64(net.layers().len() as u64);
        for l in net.layers() {
            self.u64(l.inputs as u64);
            self.u64(l.outputs as u64);
            self.u8(match l.activation {
                Activation::Relu => 0,
                Activation::Identity => 1,
            });
            self.f64s(&l.weights);
            self.f64s(&l.bias);
        }
    }
}

struct ByteReader<'a> {
    path: &'a Path,
    buf: &'a [u8],
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(HarnessError::format(self.path, "truncated parameter file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x)
            .map_err(|_| HarnessError::format(self.path, format!("size {x} out of range")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.usize()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let inputs = self.usize()?;
            let outputs = self.usize()?;
            let activation = match self.u8()? {
                0 => Activation::Relu,
                1 => Activation::Identity,
                a => {
                    return Err(HarnessError::format(
                        self.path,
                        format!("unknown activation tag {a}"),
                    ))
                }
            };
            let mut layer = Dense::zeros(inputs, outputs, activation);
            layer.weights = self.f64s(inputs * outputs)?;
            layer.bias = self.f64s(outputs)?;
            layers.push(layer);
        }
        Ok(Mlp::from_layers(layers)?)
    }
}

fn param_header(hash: &str, kind: u8) -> ByteWriter {
    let mut w = ByteWriter(PARAM_MAGIC.to_vec());
    w.u64(hash.len() as u64);
    w.0.extend_from_slice(hash.as_bytes());
    w.u8(kind);
    w
}

fn open_params<'a>(
    path: &'a Path,
    bytes: &'a [u8],
    hash: &str,
    kind: u8,
) -> Result<ByteReader<'a>> {
    let mut r = ByteReader { path, buf: bytes };
    if r.take(PARAM_MAGIC.len())? != PARAM_MAGIC {
        return Err(HarnessError::format(path, "not a parameter file"));
    }
    let n = r.usize()?;
    let found = String::from_utf8_lossy(r.take(n)?).into_owned();
    if found != hash {
        return Err(HarnessError::HashMismatch {
            path: path.to_path_buf(),
            expected: hash.to_string(),
            found,
        });
    }
    let k = r.u8()?;
    if k != kind {
        return Err(HarnessError::format(
            path,
            format!("parameter kind {k}, expected {kind}"),
        ));
    }
    Ok(r)
}

fn finish(r: ByteReader<'_>) -> Result<()> {
    if r.buf.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::format(
            r.path,
            "trailing bytes after parameters",
        ))
    }
}

/// Layout: magic, hash, kind byte, then per layer `inputs, outputs,
/// activation, weights (row-major), bias`, all little-endian.
pub fn write_mlp(path: &Path, hash: &str, net: &Mlp) -> Result<()> {
    let mut w = param_header(hash, KIND_MLP);
    w.mlp(net);
    write_file(path, &w.0)
}

pub fn read_mlp(path: &Path, hash: &str) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    let mut r = open_params(path, &bytes, hash, KIND_MLP)?;
    let net = r.mlp()?;
    finish(r)?;
    Ok(net)
}

/// Like [`write_mlp`], prefixed with feature width, residual scale and the
/// condition layout.
pub fn write_flow(path: &Path, hash: &str, model: &FlowModel) -> Result<()> {
    let mut w = param_header(hash, KIND_FLOW);
    let layout = model.layout();
    w.u64(model.net().output_size() as u64);
    w.f64s(&[model.scale()]);
    w.u64(layout.known_classes as u64);
    w.u64(layout.source_domains.len() as u64);
    for &d in &layout.source_domains {
        w.u64(d as u64);
    }
    w.mlp(model.net());
    write_file(path, &w.0)
}

pub fn read_flow(path: &Path, hash: &str) -> Result<FlowModel> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    let mut r = open_params(path, &bytes, hash, KIND_FLOW)?;
    let feature_dim = r.usize()?;
    let scale = r.f64()?;
    let known = r.usize()?;
    let nd = r.usize()?;
    let domains = (0..nd).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let net = r.mlp()?;
    finish(r)?;
    Ok(FlowModel::from_parts(
        feature_dim,
        ConditionLayout::new(known, domains),
        scale,
        net,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub status: RunStatus,
    pub errors: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    /// Checksums every listed file (paths relative to `out`), sorted by path.
    pub fn build(
        out: &Path,
        config_hash: &str,
        mut files: Vec<PathBuf>,
        errors: Vec<String>,
    ) -> Result<Self> {
        files.sort();
        files.dedup();
        let artifacts = files
            .iter()
            .map(|p| {
                let full = out.join(p);
                let bytes = fs::metadata(&full).map_err(HarnessError::io(&full))?.len();
                Ok(ArtifactEntry {
                    path: p
                        .iter()
                        .map(|c| c.to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/"),
                    sha256: sha256_file(&full)?,
                    bytes,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config_hash: config_hash.to_string(),
            status: if errors.is_empty() {
                RunStatus::Complete
            } else {
                RunStatus::Failed
            },
            errors,
            artifacts,
        })
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = Self::path(out);
        let mut text = serde_json::to_string_pretty(self).map_err(|source| HarnessError::Json {
            path: path.clone(),
            source,
        })?;
        text.push('\n');
        write_file(&path, text.as_bytes())
    }

    pub fn read(out: &Path) -> Result<Self> {
        let path = Self::path(out);
        let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json { path, source })
    }

    /// Re-hashes every artifact and reports the first mismatch.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for a in &self.artifacts {
            let full = out.join(&a.path);
            let sum = sha256_file(&full)?;
            if sum != a.sha256 {
                return Err(HarnessError::format(full, "checksum differs from manifest"));
            }
        }
        Ok(())
    }
}
