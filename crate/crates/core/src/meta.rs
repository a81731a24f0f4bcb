//! Meta-learning loop over the clean/noisy partition.
//!
//! Each step draws a clean batch and a noisy batch. The clean batch is
//! extended with domain-shifted copies (keeping their label) and
//! category-shifted copies (labelled with the extra "beyond known" class).
//! Cross-entropy on these three parts is the meta-train loss. After an inner
//! SGD step on it, the noisy batch is scored with an evidential loss against
//! the model's own known-class pseudo-labels plus cross-entropy against the
//! observed labels. The outer update applies both gradients to the original
//! parameters (first order, no second derivatives).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evidential::{evidential_loss, features_of};
use crate::flow::{sample_residuals, ResidualCondition, VectorField};
use crate::numeric::{cross_entropy, LrSchedule, Mlp, Rng, Sgd, Tensor};
use crate::synth::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop both augmentation branches.
    pub no_dccrfm: bool,
    pub no_domain_ra: bool,
    pub no_category_ra: bool,
    /// Replace generated residuals by convex combinations with a partner
    /// clean sample.
    pub mixup_instead: bool,
    pub no_el_meta_test: bool,
    pub no_ce_meta_test: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Inner step on the meta-train loss, outer step on the original
    /// parameters with both gradients.
    #[default]
    FirstOrder,
    /// Two sequential updates: meta-train alone, then meta-train plus
    /// meta-test at the updated parameters.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub inner_lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub euler_steps: usize,
    pub mode: MetaMode,
    pub ablation: Ablation,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            inner_lr: 0.05,
            schedule: LrSchedule::StepDecay {
                base: 0.05,
                factor: 0.1,
                every: 1600,
            },
            momentum: 0.0,
            euler_steps: 20,
            mode: MetaMode::FirstOrder,
            ablation: Ablation::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size > 0,
            Config,
            "meta batch size must be positive"
        );
        ensure!(
            self.euler_steps > 0,
            Config,
            "Euler step count must be positive"
        );
        ensure!(
            self.inner_lr.is_finite() && self.inner_lr >= 0.0,
            Config,
            "inner learning rate {} must be finite and non-negative",
            self.inner_lr
        );
        ensure!(
            !(self.ablation.mixup_instead && self.ablation.no_dccrfm),
            Config,
            "mixup_instead replaces the residual branches that no_dccrfm removes; set only one"
        );
        Ok(())
    }

    fn needs_flow(&self) -> bool {
        let a = &self.ablation;
        !a.no_dccrfm && !a.mixup_instead && !(a.no_domain_ra && a.no_category_ra)
    }
}

/// Features with one label per row; may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledBatch {
    pub fn empty(width: usize) -> Self {
        Self {
            x: Tensor::zeros(&[0, width]),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    pub clean: LabeledBatch,
    pub clean_domains: Vec<usize>,
    pub clean_ids: Vec<usize>,
    /// Domain-shifted clean samples, labelled with their category.
    pub domain_aug: LabeledBatch,
    /// Category-shifted clean samples, labelled with the extra class.
    pub category_aug: LabeledBatch,
    /// Noisy samples with their observed labels.
    pub noisy: LabeledBatch,
    pub noisy_ids: Vec<usize>,
}

/// Source of augmentations for the meta-train branches.
pub enum Augmenter<'a> {
    Flow(&'a dyn VectorField),
    Mixup(&'a MixupPool<'a>),
    Disabled,
}

/// Clean samples indexed by (domain, label) for picking mixup partners.
pub struct MixupPool<'a> {
    cells: BTreeMap<(usize, usize), Vec<&'a Sample>>,
}

impl<'a> MixupPool<'a> {
    pub fn new(clean: &[&'a Sample]) -> Self {
        let mut cells: BTreeMap<(usize, usize), Vec<&'a Sample>> = BTreeMap::new();
        for s in clean {
            cells
                .entry((s.domain, s.observed_label))
                .or_default()
                .push(s);
        }
        Self { cells }
    }

    fn partner(&self, domain: usize, label: usize, rng: &mut Rng) -> Option<&'a Sample> {
        let cell = self.cells.get(&(domain, label))?;
        Some(cell[rng.below(cell.len())])
    }
}

/// Static context shared by every batch of one run.
pub struct BatchContext<'a> {
    pub known: usize,
    pub source_domains: &'a [usize],
    pub augmenter: Augmenter<'a>,
    pub cfg: &'a MetaConfig,
}

/// Assembles one meta batch. For each clean element a different source
/// domain and a different known category are drawn uniformly; the branches
/// then shift the element toward them.
pub fn build_meta_batch(
    clean: &[&Sample],
    noisy: &[&Sample],
    ctx: &BatchContext,
    rng: &mut Rng,
) -> Result<MetaBatch> {
    ensure!(!clean.is_empty(), Config, "meta batch needs clean samples");
    let width = clean[0].features.len();
    let a = &ctx.cfg.ablation;
    let augment_on = !a.no_dccrfm && !matches!(ctx.augmenter, Augmenter::Disabled);
    let domain_on = augment_on && !a.no_domain_ra && ctx.source_domains.len() >= 2;
    let category_on = augment_on && !a.no_category_ra && ctx.known >= 2;

    let y_c: Vec<usize> = clean.iter().map(|s| s.observed_label).collect();
    let y_d: Vec<usize> = clean.iter().map(|s| s.domain).collect();
    let mut domain_conds = Vec::new();
    let mut category_conds = Vec::new();
    if domain_on {
        for s in clean {
            let slot = ctx
                .source_domains
                .iter()
                .position(|&d| d == s.domain)
                .ok_or_else(|| {
                    Error::Integrity(format!("sample {} is not from a source domain", s.id))
                })?;
            let other = ctx.source_domains[rng.below_except(ctx.source_domains.len(), slot)];
            domain_conds.push(ResidualCondition::domain(s.observed_label, s.domain, other));
        }
    }
    if category_on {
        for s in clean {
            let other = rng.below_except(ctx.known, s.observed_label);
            category_conds.push(ResidualCondition::category(
                s.domain,
                s.observed_label,
                other,
            ));
        }
    }
    let shifted: Vec<Vec<f64>> = match &ctx.augmenter {
        _ if domain_conds.is_empty() && category_conds.is_empty() => Vec::new(),
        Augmenter::Flow(field) => {
            let conds: Vec<ResidualCondition> = domain_conds
                .iter()
                .chain(&category_conds)
                .copied()
                .collect();
            let r = sample_residuals(*field, &conds, ctx.cfg.euler_steps, rng)?;
            let sources = clean.iter().cycle();
            r.iter_rows()
                .zip(sources)
                .map(|(res, s)| s.features.iter().zip(res).map(|(x, d)| x + d).collect())
                .collect()
        }
        Augmenter::Mixup(pool) => {
            let mut out = Vec::with_capacity(domain_conds.len() + category_conds.len());
            for (q, s) in domain_conds
                .iter()
                .chain(&category_conds)
                .zip(clean.iter().cycle())
            {
                let lam = rng.beta(1.0, 1.0);
                let partner = pool.partner(q.tgt_dom, q.tgt_cat, rng).unwrap_or(s);
                out.push(
                    s.features
                        .iter()
                        .zip(&partner.features)
                        .map(|(x, p)| lam * x + (1.0 - lam) * p)
                        .collect(),
                );
            }
            out
        }
        Augmenter::Disabled => unreachable!("disabled augmenter never has conditions"),
    };
    let (dom_rows, cat_rows) = shifted.split_at(domain_conds.len());
    let branch = |rows: &[Vec<f64>], labels: Vec<usize>| -> Result<LabeledBatch> {
        if rows.is_empty() {
            Ok(LabeledBatch::empty(width))
        } else {
            Ok(LabeledBatch {
                x: Tensor::from_rows(rows)?,
                y: labels,
            })
        }
    };
    Ok(MetaBatch {
        clean: LabeledBatch {
            x: features_of(clean)?,
            y: y_c.clone(),
        },
        clean_domains: y_d,
        clean_ids: clean.iter().map(|s| s.id).collect(),
        domain_aug: branch(dom_rows, y_c)?,
        category_aug: branch(cat_rows, vec![ctx.known; cat_rows.len()])?,
        noisy: if noisy.is_empty() {
            LabeledBatch::empty(width)
        } else {
            LabeledBatch {
                x: features_of(noisy)?,
                y: noisy.iter().map(|s| s.observed_label).collect(),
            }
        },
        noisy_ids: noisy.iter().map(|s| s.id).collect(),
    })
}

/// Loss value with the gradient with respect to the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sum of the cross-entropies of the clean, domain-shifted and
/// category-shifted parts; empty parts contribute nothing.
pub fn meta_train_loss(model: &mut Mlp, batch: &MetaBatch) -> Result<ParamLoss> {
    let mut out = ParamLoss {
        loss: 0.0,
        grad: vec![0.0; model.num_params()],
    };
    for part in [&batch.clean, &batch.domain_aug, &batch.category_aug] {
        if part.is_empty() {
            continue;
        }
        let logits = model.forward(&part.x)?;
        let lg = cross_entropy(&logits, &part.y)?;
        model.backward(&lg.grad)?;
        out.loss += lg.loss;
        add_into(&mut out.grad, &model.grads());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTestLoss {
    pub loss: ParamLoss,
    /// Fraction of noisy samples whose pseudo-label equals the observed one.
    pub agreement: f64,
}

/// Evidential loss against known-class arg-max pseudo-labels plus
/// cross-entropy against observed labels, on the noisy part.
pub fn meta_test_loss(
    model: &mut Mlp,
    noisy: &LabeledBatch,
    known: usize,
    ablation: &Ablation,
) -> Result<MetaTestLoss> {
    let mut out = ParamLoss {
        loss: 0.0,
        grad: vec![0.0; model.num_params()],
    };
    let use_el = !ablation.no_el_meta_test;
    let use_ce = !ablation.no_ce_meta_test;
    if noisy.is_empty() || !(use_el || use_ce) {
        return Ok(MetaTestLoss {
            loss: out,
            agreement: f64::NAN,
        });
    }
    let logits = model.forward(&noisy.x)?;
    ensure!(
        known <= logits.cols(),
        Dimension,
        "{known} known classes but {} outputs",
        logits.cols()
    );
    let pseudo: Vec<usize> = logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for k in 1..known {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let agreement =
        pseudo.iter().zip(&noisy.y).filter(|(p, y)| p == y).count() as f64 / noisy.len() as f64;
    let mut upstream = Tensor::zeros(logits.shape());
    if use_el {
        let lg = evidential_loss(&logits, &pseudo)?;
        out.loss += lg.loss;
        add_into(upstream.data_mut(), lg.grad.data());
    }
    if use_ce {
        let lg = cross_entropy(&logits, &noisy.y)?;
        out.loss += lg.loss;
        add_into(upstream.data_mut(), lg.grad.data());
    }
    model.backward(&upstream)?;
    out.grad = model.grads();
    Ok(MetaTestLoss {
        loss: out,
        agreement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    /// NaN when the step had no meta-test term.
    pub agreement: f64,
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} is {v} at meta step {step}"
        )))
    }
}

/// One meta update of `model` in place.
pub fn meta_step(
    model: &mut Mlp,
    opt: &mut Sgd,
    batch: &MetaBatch,
    known: usize,
    cfg: &MetaConfig,
    step: usize,
) -> Result<StepLog> {
    let lr = opt.current_lr();
    let train = meta_train_loss(model, batch)?;
    check_finite(step, "meta-train loss", train.loss)?;
    let test_active =
        !batch.noisy.is_empty() && !(cfg.ablation.no_el_meta_test && cfg.ablation.no_ce_meta_test);
    let (test, total) = match cfg.mode {
        MetaMode::FirstOrder => {
            let mut total = train.grad.clone();
            let mut test = None;
            if test_active {
                let original = model.params();
                model.apply_update(&train.grad, cfg.inner_lr)?;
                let t = meta_test_loss(model, &batch.noisy, known, &cfg.ablation)?;
                model.set_params(&original)?;
                add_into(&mut total, &t.loss.grad);
                test = Some(t);
            }
            (test, total)
        }
        MetaMode::Literal => {
            model.apply_update(&train.grad, lr)?;
            let mut total = meta_train_loss(model, batch)?.grad;
            let mut test = None;
            if test_active {
                let t = meta_test_loss(model, &batch.noisy, known, &cfg.ablation)?;
                add_into(&mut total, &t.loss.grad);
                test = Some(t);
            }
            (test, total)
        }
    };
    let (test_loss, agreement) = test.map_or((0.0, f64::NAN), |t| (t.loss.loss, t.agreement));
    check_finite(step, "meta-test loss", test_loss)?;
    opt.step_with(model, &total)?;
    Ok(StepLog {
        step,
        lr,
        train_loss: train.loss,
        test_loss,
        agreement,
    })
}

/// Endless minibatches over a fixed index set, reshuffled every pass.
#[derive(Debug, Clone)]
pub struct CyclingIter {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl CyclingIter {
    pub fn new(len: usize, rng: Rng) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    /// Next `n` indices (fewer only when the set is smaller than `n`).
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.order.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

const CLEAN_STREAM: u64 = 1;
const NOISY_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

fn check_provenance(samples: &[&Sample], known: usize, source_domains: &[usize]) -> Result<()> {
    for s in samples {
        if !source_domains.contains(&s.domain) || s.observed_label >= known {
            return Err(Error::Integrity(format!(
                "sample {} (domain {}, label {}) is not a known-category source sample",
                s.id, s.domain, s.observed_label
            )));
        }
    }
    Ok(())
}

/// Runs the meta loop for `cfg.steps` steps. `model` must have `known + 1`
/// outputs. `flow` is required unless the augmentation branches are ablated
/// or replaced by mixup.
#[allow(clippy::too_many_arguments)]
pub fn train_meta(
    model: &mut Mlp,
    clean: &[&Sample],
    noisy: &[&Sample],
    flow: Option<&dyn VectorField>,
    known: usize,
    source_domains: &[usize],
    cfg: &MetaConfig,
    rng: &Rng,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    ensure!(
        !clean.is_empty(),
        Config,
        "the clean set is empty; cannot meta-train"
    );
    ensure!(
        model.output_size() == known + 1,
        Dimension,
        "meta model has {} outputs, expected {}",
        model.output_size(),
        known + 1
    );
    check_provenance(clean, known, source_domains)?;
    check_provenance(noisy, known, source_domains)?;
    if noisy.is_empty() {
        log::warn!("the noisy set is empty; meta-test terms are skipped");
    }
    if source_domains.len() < 2 && !cfg.ablation.no_dccrfm && !cfg.ablation.no_domain_ra {
        log::warn!("only one source domain; the domain-shift branch is disabled");
    }
    let pool;
    let augmenter =
        if cfg.ablation.no_dccrfm {
            Augmenter::Disabled
        } else if cfg.ablation.mixup_instead {
            pool = MixupPool::new(clean);
            Augmenter::Mixup(&pool)
        } else if cfg.needs_flow() {
            Augmenter::Flow(flow.ok_or_else(|| {
                Error::State("flow model required for residual augmentation".into())
            })?)
        } else {
            Augmenter::Disabled
        };
    let ctx = BatchContext {
        known,
        source_domains,
        augmenter,
        cfg,
    };
    let mut clean_it = CyclingIter::new(clean.len(), rng.fork(CLEAN_STREAM));
    let mut noisy_it = CyclingIter::new(noisy.len(), rng.fork(NOISY_STREAM));
    let mut aug_rng = rng.fork(AUGMENT_STREAM);
    let mut opt = Sgd::with_momentum(cfg.schedule, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let cb: Vec<&Sample> = clean_it
            .next_batch(cfg.batch_size)
            .iter()
            .map(|&i| clean[i])
            .collect();
        let nb: Vec<&Sample> = noisy_it
            .next_batch(cfg.batch_size)
            .iter()
            .map(|&i| noisy[i])
            .collect();
        let batch = build_meta_batch(&cb, &nb, &ctx, &mut aug_rng)?;
        log.push(meta_step(model, &mut opt, &batch, known, cfg, step)?);
    }
    Ok(log)
}

/// Reference trainer: minibatch cross-entropy on `samples` with the same
/// batch size, schedule and step budget as `cfg`.
pub fn train_plain_ce(
    model: &mut Mlp,
    samples: &[&Sample],
    cfg: &MetaConfig,
    rng: &Rng,
) -> Result<Vec<StepLog>> {
    ensure!(!samples.is_empty(), Config, "no training samples");
    ensure!(cfg.batch_size > 0, Config, "batch size must be positive");
    let mut it = CyclingIter::new(samples.len(), rng.fork(CLEAN_STREAM));
    let mut opt = Sgd::with_momentum(cfg.schedule, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b: Vec<&Sample> = it
            .next_batch(cfg.batch_size)
            .iter()
            .map(|&i| samples[i])
            .collect();
        let x = features_of(&b)?;
        let y: Vec<usize> = b.iter().map(|s| s.observed_label).collect();
        let lr = opt.current_lr();
        let logits = model.forward(&x)?;
        let lg = cross_entropy(&logits, &y)?;
        check_finite(step, "cross-entropy", lg.loss)?;
        model.backward(&lg.grad)?;
        opt.step(model)?;
        log.push(StepLog {
            step,
            lr,
            train_loss: lg.loss,
            test_loss: 0.0,
            agreement: f64::NAN,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Activation;
    use crate::numeric::Dense;

    fn sample(id: usize, domain: usize, label: usize, features: Vec<f64>) -> Sample {
        Sample {
            id,
            features,
            domain,
            observed_label: label,
            original_label: label,
        }
    }

    /// 3 domains x 3 classes, 4 samples each, well separated.
    fn toy() -> Vec<Sample> {
        let mut rng = Rng::new(3);
        let mut out = Vec::new();
        for d in 0..3 {
            for c in 0..3 {
                for _ in 0..4 {
                    let mut x = vec![0.5 * d as f64; 3];
                    x[c] += 4.0;
                    x.iter_mut().for_each(|v| *v += 0.3 * rng.normal());
                    out.push(sample(out.len(), d, c, x));
                }
            }
        }
        out
    }

    struct ConstantField(Vec<f64>);

    impl VectorField for ConstantField {
        fn feature_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, r: &Tensor, _: &[f64], _: &[ResidualCondition]) -> Result<Tensor> {
            Tensor::matrix(
                r.rows(),
                self.0.len(),
                (0..r.rows()).flat_map(|_| self.0.clone()).collect(),
            )
        }
    }

    fn ctx<'a>(
        cfg: &'a MetaConfig,
        augmenter: Augmenter<'a>,
        domains: &'a [usize],
    ) -> BatchContext<'a> {
        BatchContext {
            known: 3,
            source_domains: domains,
            augmenter,
            cfg,
        }
    }

    #[test]
    fn batch_labels_and_shift_targets() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().step_by(3).collect();
        let noisy: Vec<&Sample> = data.iter().skip(1).step_by(5).collect();
        let cfg = MetaConfig::default();
        let field = ConstantField(vec![0.0; 3]);
        let domains = [0, 1, 2];
        let c = ctx(&cfg, Augmenter::Flow(&field), &domains);
        let b = build_meta_batch(&clean, &noisy, &c, &mut Rng::new(1)).unwrap();
        assert_eq!(b.domain_aug.len(), clean.len());
        assert_eq!(b.category_aug.len(), clean.len());
        assert!(b.category_aug.y.iter().all(|&y| y == 3));
        assert_eq!(b.domain_aug.y, b.clean.y);
        assert_eq!(b.noisy.len(), noisy.len());
    }

    #[test]
    fn shift_targets_differ_from_source() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().collect();
        let cfg = MetaConfig::default();
        let domains = [0, 1, 2];
        let pool = MixupPool::new(&clean);
        let c = ctx(&cfg, Augmenter::Mixup(&pool), &domains);
        for seed in 0..20 {
            let b = build_meta_batch(&clean, &[], &c, &mut Rng::new(seed)).unwrap();
            assert_eq!(b.domain_aug.len(), clean.len());
            // Mixed points lie on the segment to a partner, so they stay finite.
            assert!(b.domain_aug.x.is_finite() && b.category_aug.x.is_finite());
        }
        let mut rng = Rng::new(8);
        for s in &clean {
            let other = domains[rng.below_except(3, s.domain)];
            assert_ne!(other, s.domain);
            assert_ne!(rng.below_except(3, s.observed_label), s.observed_label);
        }
    }

    #[test]
    fn constant_residual_shifts_samples() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().take(5).collect();
        let cfg = MetaConfig {
            ablation: Ablation {
                no_category_ra: true,
                ..Ablation::default()
            },
            ..MetaConfig::default()
        };
        let field = ConstantField(vec![1.0, 2.0, 3.0]);
        let domains = [0, 1, 2];
        let c = ctx(&cfg, Augmenter::Flow(&field), &domains);
        let b = build_meta_batch(&clean, &[], &c, &mut Rng::new(1)).unwrap();
        assert!(b.category_aug.is_empty());
        for (i, s) in clean.iter().enumerate() {
            for j in 0..3 {
                // Euler integration of a constant field from noise adds the
                // constant to the noise, so only the spread is random.
                let shift = b.domain_aug.x.get(i, j) - s.features[j];
                assert!((shift - (j + 1) as f64).abs() < 6.0);
            }
        }
    }

    #[test]
    fn no_dccrfm_leaves_branches_empty() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().collect();
        let cfg = MetaConfig {
            ablation: Ablation {
                no_dccrfm: true,
                ..Ablation::default()
            },
            ..MetaConfig::default()
        };
        let domains = [0, 1, 2];
        let c = ctx(&cfg, Augmenter::Disabled, &domains);
        let b = build_meta_batch(&clean, &[], &c, &mut Rng::new(1)).unwrap();
        assert!(b.domain_aug.is_empty() && b.category_aug.is_empty());
        let mut model = Mlp::new(&[3, 8, 4], &mut Rng::new(2)).unwrap();
        let full = meta_train_loss(&mut model, &b).unwrap();
        let logits = model.forward(&b.clean.x).unwrap();
        assert_eq!(full.loss, cross_entropy(&logits, &b.clean.y).unwrap().loss);
    }

    #[test]
    fn single_source_domain_disables_domain_branch() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().filter(|s| s.domain == 0).collect();
        let cfg = MetaConfig::default();
        let field = ConstantField(vec![0.0; 3]);
        let domains = [0];
        let c = ctx(&cfg, Augmenter::Flow(&field), &domains);
        let b = build_meta_batch(&clean, &[], &c, &mut Rng::new(1)).unwrap();
        assert!(b.domain_aug.is_empty());
        assert_eq!(b.category_aug.len(), clean.len());
    }

    fn linear(weights: Vec<f64>, bias: Vec<f64>, inputs: usize) -> Mlp {
        let mut l = Dense::zeros(inputs, bias.len(), Activation::Identity);
        l.weights = weights;
        l.bias = bias;
        Mlp::from_layers(vec![l]).unwrap()
    }

    #[test]
    fn meta_train_two_sample_oracle() {
        // Identity logits on 2-d inputs with 2 outputs.
        let mut model = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        let part = |rows: Vec<Vec<f64>>, y: Vec<usize>| LabeledBatch {
            x: Tensor::from_rows(&rows).unwrap(),
            y,
        };
        let batch = MetaBatch {
            clean: part(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]),
            clean_domains: vec![0, 0],
            clean_ids: vec![0, 1],
            domain_aug: part(vec![vec![2.0, 0.0]], vec![0]),
            category_aug: part(vec![vec![0.0, 0.0]], vec![1]),
            noisy: LabeledBatch::empty(2),
            noisy_ids: vec![],
        };
        let ce = |z0: f64, z1: f64, y: usize| {
            let lse = (z0.exp() + z1.exp()).ln();
            lse - if y == 0 { z0 } else { z1 }
        };
        let expected =
            (ce(1.0, 0.0, 0) + ce(0.0, 1.0, 1)) / 2.0 + ce(2.0, 0.0, 0) + ce(0.0, 0.0, 1);
        let got = meta_train_loss(&mut model, &batch).unwrap().loss;
        assert!((got - expected).abs() < 1e-12);
        assert!((ce(0.0, 0.0, 1) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn meta_test_single_sample_oracle() {
        // Logits [1, 3, 0] with 2 known classes: pseudo-label 1, observed 0.
        let mut model = linear(vec![1.0, 3.0, 0.0], vec![0.0, 0.0, 0.0], 1);
        let noisy = LabeledBatch {
            x: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            y: vec![0],
        };
        let t = meta_test_loss(&mut model, &noisy, 2, &Ablation::default()).unwrap();
        let sp = |z: f64| (1.0 + f64::exp(z)).ln();
        let alpha = [sp(1.0) + 1.0, sp(3.0) + 1.0, sp(0.0) + 1.0];
        let s: f64 = alpha.iter().sum();
        let el = s.ln() - alpha[1].ln();
        let z = [1.0f64, 3.0, 0.0];
        let ce = z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[0];
        assert!((t.loss.loss - (el + ce)).abs() < 1e-12);
        assert_eq!(t.agreement, 0.0);
        let ce_only = meta_test_loss(
            &mut model,
            &noisy,
            2,
            &Ablation {
                no_el_meta_test: true,
                ..Ablation::default()
            },
        )
        .unwrap();
        assert!((ce_only.loss.loss - ce).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_ignores_extra_class() {
        let mut model = linear(vec![1.0, 2.0, 9.0], vec![0.0; 3], 1);
        let noisy = LabeledBatch {
            x: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            y: vec![1],
        };
        let t = meta_test_loss(&mut model, &noisy, 2, &Ablation::default()).unwrap();
        assert_eq!(t.agreement, 1.0);
    }

    #[test]
    fn confident_model_has_small_meta_test_loss() {
        let mut model = linear(vec![30.0, 0.0, -30.0], vec![0.0; 3], 1);
        let noisy = LabeledBatch {
            x: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            y: vec![0],
        };
        let t = meta_test_loss(&mut model, &noisy, 2, &Ablation::default()).unwrap();
        assert_eq!(t.agreement, 1.0);
        assert!(t.loss.loss < 0.1);
    }

    fn batch_for(data: &[Sample], model_width: usize) -> (MetaBatch, Mlp) {
        let clean: Vec<&Sample> = data.iter().take(8).collect();
        let noisy: Vec<&Sample> = data.iter().skip(20).take(8).collect();
        let cfg = MetaConfig::default();
        let field = ConstantField(vec![0.1; 3]);
        let domains = [0, 1, 2];
        let c = ctx(&cfg, Augmenter::Flow(&field), &domains);
        let b = build_meta_batch(&clean, &noisy, &c, &mut Rng::new(4)).unwrap();
        (b, Mlp::new(&[3, model_width, 4], &mut Rng::new(6)).unwrap())
    }

    #[test]
    fn zero_inner_lr_is_joint_step() {
        let data = toy();
        let (b, model) = batch_for(&data, 8);
        let cfg = MetaConfig {
            inner_lr: 0.0,
            schedule: LrSchedule::Constant { lr: 0.1 },
            ..MetaConfig::default()
        };
        let mut a = model.clone();
        meta_step(&mut a, &mut Sgd::new(cfg.schedule), &b, 3, &cfg, 0).unwrap();
        let mut joint = model.clone();
        let mut g = meta_train_loss(&mut joint, &b).unwrap().grad;
        add_into(
            &mut g,
            &meta_test_loss(&mut joint, &b.noisy, 3, &cfg.ablation)
                .unwrap()
                .loss
                .grad,
        );
        joint.apply_update(&g, 0.1).unwrap();
        assert_eq!(a.params(), joint.params());
    }

    #[test]
    fn first_order_uses_adapted_test_gradient() {
        let data = toy();
        let (b, model) = batch_for(&data, 8);
        let cfg = MetaConfig {
            inner_lr: 0.2,
            schedule: LrSchedule::Constant { lr: 0.1 },
            ..MetaConfig::default()
        };
        let mut a = model.clone();
        meta_step(&mut a, &mut Sgd::new(cfg.schedule), &b, 3, &cfg, 0).unwrap();
        let mut m = model.clone();
        let tr = meta_train_loss(&mut m, &b).unwrap().grad;
        let mut adapted = model.clone();
        adapted.apply_update(&tr, 0.2).unwrap();
        let te = meta_test_loss(&mut adapted, &b.noisy, 3, &cfg.ablation)
            .unwrap()
            .loss
            .grad;
        let mut expected = model.clone();
        let total: Vec<f64> = tr.iter().zip(&te).map(|(x, y)| x + y).collect();
        expected.apply_update(&total, 0.1).unwrap();
        assert_eq!(a.params(), expected.params());
        // Literal mode takes a different path.
        let lit = MetaConfig {
            mode: MetaMode::Literal,
            ..cfg.clone()
        };
        let mut l = model.clone();
        meta_step(&mut l, &mut Sgd::new(lit.schedule), &b, 3, &lit, 0).unwrap();
        assert_ne!(l.params(), a.params());
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let cfg = MetaConfig {
            ablation: Ablation {
                no_dccrfm: true,
                mixup_instead: true,
                ..Ablation::default()
            },
            ..MetaConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_clean_set_aborts_and_provenance_checked() {
        let data = toy();
        let mut model = Mlp::new(&[3, 8, 4], &mut Rng::new(1)).unwrap();
        let noisy: Vec<&Sample> = data.iter().collect();
        let cfg = MetaConfig {
            steps: 3,
            ..MetaConfig::default()
        };
        let r = train_meta(
            &mut model,
            &[],
            &noisy,
            None,
            3,
            &[0, 1, 2],
            &cfg,
            &Rng::new(0),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let r = train_meta(
            &mut model,
            &noisy,
            &noisy,
            None,
            3,
            &[0, 1],
            &cfg,
            &Rng::new(0),
        );
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn all_ablations_match_plain_ce_trainer() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().step_by(2).collect();
        let noisy: Vec<&Sample> = data.iter().skip(1).step_by(2).collect();
        let cfg = MetaConfig {
            steps: 40,
            batch_size: 5,
            ablation: Ablation {
                no_dccrfm: true,
                no_el_meta_test: true,
                no_ce_meta_test: true,
                ..Ablation::default()
            },
            ..MetaConfig::default()
        };
        let init = Mlp::new(&[3, 8, 4], &mut Rng::new(9)).unwrap();
        let rng = Rng::new(12);
        let mut a = init.clone();
        let meta = train_meta(&mut a, &clean, &noisy, None, 3, &[0, 1, 2], &cfg, &rng).unwrap();
        let mut b = init.clone();
        let plain = train_plain_ce(&mut b, &clean, &cfg, &rng).unwrap();
        for (m, p) in meta.iter().zip(&plain) {
            assert!(
                (m.train_loss - p.train_loss).abs() <= 1e-12,
                "step {}",
                m.step
            );
            assert_eq!(m.test_loss, 0.0);
        }
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = toy();
        let clean: Vec<&Sample> = data.iter().filter(|s| s.id % 3 != 0).collect();
        let noisy: Vec<&Sample> = data.iter().filter(|s| s.id % 3 == 0).collect();
        let cfg = MetaConfig {
            steps: 200,
            batch_size: 8,
            ..MetaConfig::default()
        };
        let field = ConstantField(vec![0.5, -0.5, 0.0]);
        let run = || {
            let mut m = Mlp::new(&[3, 16, 4], &mut Rng::new(2)).unwrap();
            let log = train_meta(
                &mut m,
                &clean,
                &noisy,
                Some(&field),
                3,
                &[0, 1, 2],
                &cfg,
                &Rng::new(5),
            )
            .unwrap();
            (m, log)
        };
        let (m1, log) = run();
        let (m2, _) = run();
        assert_eq!(m1, m2);
        let total = |s: &StepLog| s.train_loss + s.test_loss;
        let head: f64 = log[..20].iter().map(total).sum::<f64>() / 20.0;
        let tail: f64 = log[180..].iter().map(total).sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn cycling_iter_visits_everything_each_pass() {
        let mut it = CyclingIter::new(7, Rng::new(1));
        let mut seen: Vec<usize> = (0..7).flat_map(|_| it.next_batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(CyclingIter::new(2, Rng::new(1)).next_batch(5).len(), 2);
        assert!(CyclingIter::new(0, Rng::new(1)).next_batch(5).is_empty());
    }
}
