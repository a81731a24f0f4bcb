//! Synthetic multi-domain open-set benchmark.
//!
//! Every (domain, category) cell is an isotropic Gaussian around a category
//! mean, pushed through a per-domain affine map (plane rotations, uniform
//! scale, translation). Categories `0..known` are known; the rest only show up
//! in the held-out test domain.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub domain: usize,
    pub observed_label: usize,
    /// Ground truth, never shown to training code.
    pub original_label: usize,
}

impl Sample {
    pub fn is_clean(&self) -> bool {
        self.observed_label == self.original_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    /// Rotation applied to each coordinate plane `(2k, 2k+1)`.
    pub angle: f64,
    pub scale: f64,
    pub translation: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            translation: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.angle.sin_cos();
        let mut out = x.to_vec();
        for k in 0..x.len() / 2 {
            let (a, b) = (x[2 * k], x[2 * k + 1]);
            out[2 * k] = c * a - s * b;
            out[2 * k + 1] = s * a + c * b;
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o = *o * self.scale + t;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub known_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_cell: usize,
    pub noise_std: f64,
    /// One mean per category, known categories first.
    pub class_means: Vec<Vec<f64>>,
    /// One transform per domain.
    pub domains: Vec<DomainTransform>,
}

impl BenchmarkSpec {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.known_classes + self.unseen_classes
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.known_classes >= 2,
            Config,
            "need at least 2 known categories"
        );
        ensure!(
            self.domains.len() >= 3,
            Config,
            "need at least 3 domains (2 sources + 1 target)"
        );
        ensure!(
            self.class_means.len() == self.num_classes(),
            Config,
            "{} class means for {} categories",
            self.class_means.len(),
            self.num_classes()
        );
        let f = self.feature_dim();
        ensure!(f > 0, Config, "feature dimension must be positive");
        ensure!(
            self.class_means.iter().all(|m| m.len() == f),
            Config,
            "class means disagree on dimension"
        );
        for (d, t) in self.domains.iter().enumerate() {
            ensure!(t.scale > 0.0, Config, "domain {d} scale must be positive");
            ensure!(
                t.translation.len() == f,
                Config,
                "domain {d} translation has wrong dimension"
            );
        }
        ensure!(
            self.noise_std >= 0.0,
            Config,
            "noise std must be non-negative"
        );
        ensure!(
            self.samples_per_cell > 0,
            Config,
            "samples per cell must be positive"
        );
        Ok(())
    }
}

/// Compact parameterization of the default benchmark family; expands into a
/// [`BenchmarkSpec`] with [`BenchmarkParams::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    pub num_domains: usize,
    pub feature_dim: usize,
    pub known_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_cell: usize,
    pub noise_std: f64,
    /// Norm scale of the category means.
    pub class_radius: f64,
    /// Relative random perturbation of the axis-aligned category means.
    pub mean_jitter: f64,
    /// Rotation angle increment between consecutive domains (radians).
    pub rotation_step: f64,
    /// Scale increment between consecutive domains.
    pub scale_step: f64,
    /// Norm of each domain's random translation.
    pub shift: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            num_domains: 4,
            feature_dim: 8,
            known_classes: 6,
            unseen_classes: 1,
            samples_per_cell: 60,
            noise_std: 1.0,
            class_radius: 8.0,
            mean_jitter: 0.25,
            rotation_step: 0.2,
            scale_step: 0.05,
            shift: 3.0,
        }
    }
}

impl BenchmarkParams {
    pub fn build(&self, rng: &mut Rng) -> Result<BenchmarkSpec> {
        let f = self.feature_dim;
        ensure!(f > 0, Config, "feature dimension must be positive");
        let n_classes = self.known_classes + self.unseen_classes;
        let class_means = (0..n_classes)
            .map(|c| {
                let jitter = rng.normal_vec(f);
                (0..f)
                    .map(|j| {
                        let axis = if c < f && j == c { 1.0 } else { 0.0 };
                        self.class_radius
                            * (axis + self.mean_jitter * jitter[j] / (f as f64).sqrt())
                    })
                    .collect()
            })
            .collect();
        let mid = (self.num_domains as f64 - 1.0) / 2.0;
        let domains = (0..self.num_domains)
            .map(|d| {
                let dir = rng.normal_vec(f);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                DomainTransform {
                    angle: self.rotation_step * d as f64,
                    scale: 1.0 + self.scale_step * (d as f64 - mid),
                    translation: dir.iter().map(|v| self.shift * v / norm).collect(),
                }
            })
            .collect();
        let spec = BenchmarkSpec {
            known_classes: self.known_classes,
            unseen_classes: self.unseen_classes,
            samples_per_cell: self.samples_per_cell,
            noise_std: self.noise_std,
            class_means,
            domains,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws `samples_per_cell` samples for every (domain, category), ids assigned
/// in (domain, category, draw) order.
pub fn generate(spec: &BenchmarkSpec, rng: &mut Rng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let f = spec.feature_dim();
    let mut out =
        Vec::with_capacity(spec.num_domains() * spec.num_classes() * spec.samples_per_cell);
    for (d, transform) in spec.domains.iter().enumerate() {
        for (c, mean) in spec.class_means.iter().enumerate() {
            for _ in 0..spec.samples_per_cell {
                let x: Vec<f64> = (0..f)
                    .map(|j| mean[j] + spec.noise_std * rng.normal())
                    .collect();
                out.push(Sample {
                    id: out.len(),
                    features: transform.apply(&x),
                    domain: d,
                    observed_label: c,
                    original_label: c,
                });
            }
        }
    }
    Ok(out)
}

fn check_ratio(ratio: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&ratio),
        Domain,
        "noise ratio {ratio} outside [0, 1]"
    );
    Ok(())
}

/// Flips exactly `round(ratio * n)` labels, chosen uniformly without
/// replacement; each flipped sample gets a uniform label among the other
/// known classes. Returns the number flipped.
pub fn inject_symmetric_noise(
    samples: &mut [Sample],
    ratio: f64,
    known_classes: usize,
    rng: &mut Rng,
) -> Result<usize> {
    check_ratio(ratio)?;
    ensure!(
        known_classes >= 2,
        Domain,
        "symmetric noise needs at least 2 classes"
    );
    let count = (ratio * samples.len() as f64).round() as usize;
    for i in rng.choose_indices(samples.len(), count) {
        let s = &mut samples[i];
        s.observed_label = rng.below_except(known_classes, s.original_label);
    }
    Ok(count)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// For each centroid, the index of the most similar other centroid by cosine
/// similarity (ties to the lowest index). Any zero-norm centroid switches the
/// whole map to nearest Euclidean neighbor.
pub fn most_similar_classes(centroids: &[Vec<f64>]) -> Vec<usize> {
    let degenerate = centroids.iter().any(|c| c.iter().all(|&v| v == 0.0));
    (0..centroids.len())
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for o in (0..centroids.len()).filter(|&o| o != c) {
                let score = if degenerate {
                    -centroids[c]
                        .iter()
                        .zip(&centroids[o])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                } else {
                    cosine(&centroids[c], &centroids[o]).unwrap_or(f64::NEG_INFINITY)
                };
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((o, score));
                }
            }
            best.map_or(c, |(o, _)| o)
        })
        .collect()
}

pub fn class_centroids(samples: &[Sample], classes: usize) -> Vec<Vec<f64>> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in samples.iter().filter(|s| s.original_label < classes) {
        counts[s.original_label] += 1;
        for (a, v) in sums[s.original_label].iter_mut().zip(&s.features) {
            *a += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Flips `round(ratio * n_c)` samples of each class `c` to its most similar
/// class by feature-centroid cosine similarity. Returns the number flipped.
pub fn inject_asymmetric_noise(
    samples: &mut [Sample],
    ratio: f64,
    known_classes: usize,
    rng: &mut Rng,
) -> Result<usize> {
    check_ratio(ratio)?;
    ensure!(
        known_classes >= 2,
        Domain,
        "asymmetric noise needs at least 2 classes"
    );
    let target = most_similar_classes(&class_centroids(samples, known_classes));
    let mut flipped = 0;
    for (c, &to) in target.iter().enumerate() {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].original_label == c)
            .collect();
        let count = (ratio * members.len() as f64).round() as usize;
        for k in rng.choose_indices(members.len(), count) {
            samples[members[k]].observed_label = to;
            flipped += 1;
        }
    }
    Ok(flipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub ratio: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio: 0.5,
        }
    }
}

pub fn inject_noise(
    samples: &mut [Sample],
    noise: &NoiseConfig,
    known: usize,
    rng: &mut Rng,
) -> Result<usize> {
    match noise.kind {
        NoiseKind::Symmetric => inject_symmetric_noise(samples, noise.ratio, known, rng),
        NoiseKind::Asymmetric => inject_asymmetric_noise(samples, noise.ratio, known, rng),
    }
}

/// One leave-one-domain-out task.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub test_domain: usize,
    pub source_domains: Vec<usize>,
    /// Known-category samples of the source domains.
    pub sources: Vec<Sample>,
    /// Every sample of the held-out domain, labels untouched.
    pub test: Vec<Sample>,
    pub known_classes: usize,
    pub unseen_classes: usize,
}

impl Split {
    /// Known-to-unseen category ratio, e.g. `(6, 1)`.
    pub fn open_set_ratio(&self) -> (usize, usize) {
        (self.known_classes, self.unseen_classes)
    }

    pub fn is_unseen(&self, label: usize) -> bool {
        label >= self.known_classes
    }
}

pub fn make_split(dataset: &[Sample], spec: &BenchmarkSpec, test_domain: usize) -> Result<Split> {
    if test_domain >= spec.num_domains() {
        return Err(Error::Domain(format!(
            "test domain {test_domain} outside [0, {})",
            spec.num_domains()
        )));
    }
    let known = spec.known_classes;
    Ok(Split {
        test_domain,
        source_domains: (0..spec.num_domains())
            .filter(|&d| d != test_domain)
            .collect(),
        sources: dataset
            .iter()
            .filter(|s| s.domain != test_domain && s.original_label < known)
            .cloned()
            .collect(),
        test: dataset
            .iter()
            .filter(|s| s.domain == test_domain)
            .cloned()
            .collect(),
        known_classes: known,
        unseen_classes: spec.unseen_classes,
    })
}

pub fn make_splits(dataset: &[Sample], spec: &BenchmarkSpec) -> Result<Vec<Split>> {
    (0..spec.num_domains())
        .map(|d| make_split(dataset, spec, d))
        .collect()
}
