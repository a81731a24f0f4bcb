//! Dirichlet-evidence head, its loss, and Stage-1 loss-trajectory recording.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::{LossGrad, LrSchedule, Mlp, Rng, Sgd, Tensor};
use crate::synth::Sample;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Non-negative evidence `e`, Dirichlet concentration `alpha = e + 1` and
/// strength `S = sum(alpha)` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialOutput {
    pub evidence: Tensor,
    pub alpha: Tensor,
    pub strength: Vec<f64>,
}

impl EvidentialOutput {
    pub fn from_evidence(evidence: Tensor) -> Result<Self> {
        ensure!(
            evidence.data().iter().all(|&e| e >= 0.0 && e.is_finite()),
            Domain,
            "evidence must be finite and non-negative"
        );
        let mut alpha = evidence.clone();
        alpha.data_mut().iter_mut().for_each(|a| *a += 1.0);
        let strength = alpha.iter_rows().map(|r| r.iter().sum()).collect();
        Ok(Self {
            evidence,
            alpha,
            strength,
        })
    }

    /// Per-row `ln S - ln alpha_label`.
    pub fn losses(&self, labels: &[usize]) -> Result<Vec<f64>> {
        check_labels(self.alpha.rows(), self.alpha.cols(), labels)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(r, &y)| self.strength[r].ln() - self.alpha.get(r, y).ln())
            .collect())
    }
}

fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    ensure!(
        labels.len() == rows,
        Dimension,
        "{} labels for {} rows",
        labels.len(),
        rows
    );
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Evidence through softplus of the logits.
pub fn evidence_from_logits(logits: &Tensor) -> Result<EvidentialOutput> {
    ensure!(
        logits.is_finite(),
        NonFinite,
        "logits contain non-finite entries"
    );
    let mut e = logits.clone();
    e.data_mut().iter_mut().for_each(|v| *v = softplus(*v));
    EvidentialOutput::from_evidence(e)
}

/// Batch-mean evidential loss and its gradient with respect to the logits.
pub fn evidential_loss(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let out = evidence_from_logits(logits)?;
    let per_row = out.losses(labels)?;
    let b = logits.rows();
    let mut grad = Tensor::zeros(&[b, logits.cols()]);
    if b == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    for (r, &y) in labels.iter().enumerate() {
        let s = out.strength[r];
        let a_y = out.alpha.get(r, y);
        let z = logits.row(r);
        let g = grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            let mut d_alpha = 1.0 / s;
            if j == y {
                d_alpha -= 1.0 / a_y;
            }
            *gj = d_alpha * sigmoid(z[j]) / b as f64;
        }
    }
    Ok(LossGrad {
        loss: per_row.iter().sum::<f64>() / b as f64,
        grad,
    })
}

/// Per-sample loss trajectories, one entry per Stage-1 epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryStore {
    epochs: usize,
    losses: BTreeMap<usize, Vec<f64>>,
}

impl TrajectoryStore {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            losses: BTreeMap::new(),
        }
    }

    pub fn from_map(epochs: usize, losses: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        for (id, l) in &losses {
            ensure!(
                l.len() == epochs,
                Integrity,
                "sample {id} has {} entries, expected {epochs}",
                l.len()
            );
        }
        Ok(Self { epochs, losses })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn record(&mut self, id: usize, loss: f64) -> Result<()> {
        let entry = self.losses.entry(id).or_default();
        ensure!(
            entry.len() < self.epochs,
            Integrity,
            "sample {id} already has {} recorded epochs",
            self.epochs
        );
        entry.push(loss);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.losses.get(&id).map(Vec::as_slice)
    }

    /// Complete trajectory for `id` or an integrity error.
    pub fn trajectory(&self, id: usize) -> Result<&[f64]> {
        match self.losses.get(&id) {
            Some(l) if l.len() == self.epochs => Ok(l),
            Some(l) => Err(Error::Integrity(format!(
                "sample {id} has {} of {} epochs recorded",
                l.len(),
                self.epochs
            ))),
            None => Err(Error::Integrity(format!("sample {id} has no trajectory"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.losses.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean over samples of the recorded loss at `epoch`.
    pub fn epoch_mean(&self, epoch: usize) -> f64 {
        let vals: Vec<f64> = self
            .losses
            .values()
            .filter_map(|l| l.get(epoch).copied())
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub schedule: LrSchedule,
    pub momentum: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            hidden: vec![64, 64],
            schedule: LrSchedule::CyclicTriangular {
                min: 0.005,
                max: 0.05,
                period: 136,
            },
            momentum: 0.0,
        }
    }
}

pub(crate) fn features_of(samples: &[&Sample]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Trains `backbone` on every source sample with the evidential loss against
/// the observed labels. After each epoch one update-free pass records every
/// sample's current loss.
pub fn train_stage1(
    backbone: &mut Mlp,
    sources: &[Sample],
    cfg: &Stage1Config,
    rng: &mut Rng,
) -> Result<TrajectoryStore> {
    ensure!(
        !sources.is_empty(),
        Config,
        "stage 1 needs at least one source sample"
    );
    ensure!(cfg.batch_size > 0, Config, "batch size must be positive");
    let mut opt = Sgd::with_momentum(cfg.schedule, cfg.momentum);
    let mut store = TrajectoryStore::new(cfg.epochs);
    let all: Vec<&Sample> = sources.iter().collect();
    let all_x = features_of(&all)?;
    let all_y: Vec<usize> = all.iter().map(|s| s.observed_label).collect();
    let mut order: Vec<usize> = (0..sources.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &sources[i]).collect();
            let x = features_of(&batch)?;
            let y: Vec<usize> = batch.iter().map(|s| s.observed_label).collect();
            let logits = backbone.forward(&x)?;
            let lg = evidential_loss(&logits, &y)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage-1 loss {} at epoch {epoch}, step {}",
                    lg.loss,
                    opt.step_count()
                )));
            }
            backbone.backward(&lg.grad)?;
            opt.step(backbone)?;
        }
        let logits = backbone.predict(&all_x)?;
        let losses = evidence_from_logits(&logits)?.losses(&all_y)?;
        for (s, l) in all.iter().zip(losses) {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!(
                    "recorded loss for sample {} at epoch {epoch} is {l}",
                    s.id
                )));
            }
            store.record(s.id, l)?;
        }
        log::debug!(
            "stage-1 epoch {epoch}: mean loss {:.4}",
            store.epoch_mean(epoch)
        );
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, inject_symmetric_noise, make_split, BenchmarkParams};

    #[test]
    fn zero_evidence_limit() {
        let out = evidence_from_logits(&Tensor::from_rows(&[vec![-800.0; 3]]).unwrap()).unwrap();
        assert_eq!(out.strength[0], 3.0);
        let l = out.losses(&[0]).unwrap()[0];
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_softplus() {
        let out = evidence_from_logits(&Tensor::zeros(&[1, 3])).unwrap();
        for e in out.evidence.data() {
            assert!((e - 2f64.ln()).abs() < 1e-15);
        }
        assert!((out.strength[0] - 3.0 * (1.0 + 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn confident_evidence_hand_value() {
        let out =
            EvidentialOutput::from_evidence(Tensor::from_rows(&[vec![9.0, 0.0, 0.0]]).unwrap())
                .unwrap();
        let l = out.losses(&[0]).unwrap()[0];
        assert!((l - 1.2f64.ln()).abs() < 1e-12);
        assert!((l - 0.1823).abs() < 1e-4);
    }

    #[test]
    fn large_evidence_limit() {
        let out =
            EvidentialOutput::from_evidence(Tensor::from_rows(&[vec![1e12, 1.0, 2.0]]).unwrap())
                .unwrap();
        assert!(out.losses(&[0]).unwrap()[0] < 1e-11);
    }

    #[test]
    fn alpha_monotone_in_logit() {
        let mut prev = 0.0;
        for k in -50..50 {
            let z = k as f64 * 0.5;
            let a = evidence_from_logits(&Tensor::from_rows(&[vec![z, 0.0]]).unwrap())
                .unwrap()
                .alpha
                .get(0, 0);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            evidential_loss(&Tensor::zeros(&[1, 3]), &[5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let c = 2 + rng.below(4);
            let b = 1 + rng.below(4);
            let logits =
                Tensor::matrix(b, c, (0..b * c).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
            let g = evidential_loss(&logits, &labels).unwrap();
            let h = 1e-5;
            for k in 0..logits.len() {
                let mut up = logits.clone();
                up.data_mut()[k] += h;
                let mut down = logits.clone();
                down.data_mut()[k] -= h;
                let num = (evidential_loss(&up, &labels).unwrap().loss
                    - evidential_loss(&down, &labels).unwrap().loss)
                    / (2.0 * h);
                let a = g.grad.data()[k];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) <= 1e-4);
            }
        }
    }

    #[test]
    fn loss_non_negative() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let logits =
                Tensor::matrix(1, 4, (0..4).map(|_| 10.0 * rng.normal()).collect()).unwrap();
            assert!(evidential_loss(&logits, &[rng.below(4)]).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn store_rejects_overflow_and_reports_missing() {
        let mut s = TrajectoryStore::new(2);
        s.record(4, 1.0).unwrap();
        assert!(s.trajectory(4).is_err());
        s.record(4, 0.5).unwrap();
        assert_eq!(s.trajectory(4).unwrap(), &[1.0, 0.5]);
        assert!(s.record(4, 0.1).is_err());
        assert!(matches!(s.trajectory(9), Err(Error::Integrity(_))));
    }

    fn split_sources(ratio: f64, seed: u64) -> Vec<Sample> {
        let spec = BenchmarkParams::default()
            .build(&mut Rng::new(seed))
            .unwrap();
        let data = generate(&spec, &mut Rng::new(seed + 1)).unwrap();
        let mut split = make_split(&data, &spec, 0).unwrap();
        inject_symmetric_noise(&mut split.sources, ratio, 6, &mut Rng::new(seed + 2)).unwrap();
        split.sources
    }

    #[test]
    fn stage1_trajectories_complete_and_decreasing() {
        let sources = split_sources(0.0, 1);
        let cfg = Stage1Config::default();
        let mut rng = Rng::new(5);
        let mut model = Mlp::new(&[8, 64, 64, 6], &mut rng).unwrap();
        let store = train_stage1(&mut model, &sources, &cfg, &mut rng).unwrap();
        assert_eq!(store.len(), sources.len());
        for s in &sources {
            assert_eq!(store.trajectory(s.id).unwrap().len(), 10);
        }
        assert!(store.epoch_mean(9) < store.epoch_mean(0));
    }

    #[test]
    fn stage1_deterministic() {
        let sources = split_sources(0.2, 2);
        let cfg = Stage1Config {
            epochs: 3,
            ..Stage1Config::default()
        };
        let run = || {
            let mut rng = Rng::new(8);
            let mut model = Mlp::new(&[8, 16, 6], &mut rng).unwrap();
            train_stage1(&mut model, &sources, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noisy_samples_have_higher_trajectories() {
        for ratio in [0.2, 0.5] {
            let sources = split_sources(ratio, 3);
            let mut rng = Rng::new(11);
            let mut model = Mlp::new(&[8, 64, 64, 6], &mut rng).unwrap();
            let store =
                train_stage1(&mut model, &sources, &Stage1Config::default(), &mut rng).unwrap();
            let mean_of = |clean: bool| {
                let v: Vec<f64> = sources
                    .iter()
                    .filter(|s| s.is_clean() == clean)
                    .map(|s| store.trajectory(s.id).unwrap().iter().sum::<f64>() / 10.0)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean_of(false) - mean_of(true) > 0.0, "ratio {ratio}");
        }
    }
}
