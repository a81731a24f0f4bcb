//! Conditional flow matching over feature residuals.
//!
//! A residual is `target - source` for two clean samples that differ either
//! in domain (same category) or in category (same domain). The vector field
//! learns to transport standard normal noise to the residual distribution of
//! each condition, and the Euler sampler draws new residuals that are added
//! to clean samples to synthesize domain or category shifts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::{mean_squared_error, LrSchedule, Mlp, Rng, Sgd, Tensor};
use crate::synth::Sample;

/// Width of the sinusoidal time embedding.
pub const TIME_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResidualCondition {
    pub src_cat: usize,
    pub tgt_cat: usize,
    pub src_dom: usize,
    pub tgt_dom: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConditionKind {
    Domain,
    Category,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Domain => "domain",
            ConditionKind::Category => "category",
        }
    }
}

impl ResidualCondition {
    pub fn domain(cat: usize, src_dom: usize, tgt_dom: usize) -> Self {
        Self {
            src_cat: cat,
            tgt_cat: cat,
            src_dom,
            tgt_dom,
        }
    }

    pub fn category(dom: usize, src_cat: usize, tgt_cat: usize) -> Self {
        Self {
            src_cat,
            tgt_cat,
            src_dom: dom,
            tgt_dom: dom,
        }
    }

    /// `None` when the tuple is neither a pure domain shift nor a pure
    /// category shift.
    pub fn kind(&self) -> Option<ConditionKind> {
        match (self.src_cat == self.tgt_cat, self.src_dom == self.tgt_dom) {
            (true, false) => Some(ConditionKind::Domain),
            (false, true) => Some(ConditionKind::Category),
            _ => None,
        }
    }
}

/// One-hot layout `[src_cat | tgt_cat | src_dom | tgt_dom]`; domains are
/// indexed by position in `source_domains`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLayout {
    pub known_classes: usize,
    pub source_domains: Vec<usize>,
}

impl ConditionLayout {
    pub fn new(known_classes: usize, source_domains: Vec<usize>) -> Self {
        Self {
            known_classes,
            source_domains,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.known_classes + 2 * self.source_domains.len()
    }

    fn domain_slot(&self, dom: usize) -> Result<usize> {
        self.source_domains
            .iter()
            .position(|&d| d == dom)
            .ok_or_else(|| {
                Error::Domain(format!(
                    "domain {dom} is not a source domain {:?}",
                    self.source_domains
                ))
            })
    }

    pub fn encode_into(&self, q: &ResidualCondition, out: &mut [f64]) -> Result<()> {
        let c = self.known_classes;
        ensure!(
            q.src_cat < c && q.tgt_cat < c,
            Domain,
            "category in {q:?} outside [0, {c})"
        );
        let nd = self.source_domains.len();
        let (sd, td) = (self.domain_slot(q.src_dom)?, self.domain_slot(q.tgt_dom)?);
        out.fill(0.0);
        out[q.src_cat] = 1.0;
        out[c + q.tgt_cat] = 1.0;
        out[2 * c + sd] = 1.0;
        out[2 * c + nd + td] = 1.0;
        Ok(())
    }

    pub fn encode(&self, q: &ResidualCondition) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.encode_into(q, &mut v)?;
        Ok(v)
    }

    /// Every domain and category condition the layout admits.
    pub fn all_conditions(&self) -> Vec<ResidualCondition> {
        let mut out = Vec::new();
        for c in 0..self.known_classes {
            for &a in &self.source_domains {
                for &b in self.source_domains.iter().filter(|&&b| b != a) {
                    out.push(ResidualCondition::domain(c, a, b));
                }
            }
        }
        for &d in &self.source_domains {
            for a in 0..self.known_classes {
                for b in (0..self.known_classes).filter(|&b| b != a) {
                    out.push(ResidualCondition::category(d, a, b));
                }
            }
        }
        out.sort();
        out
    }
}

pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut e = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64 * t;
        e[2 * k] = w.sin();
        e[2 * k + 1] = w.cos();
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    pub residual: Vec<f64>,
    pub condition: ResidualCondition,
    pub source_id: usize,
    pub target_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCoverage {
    pub condition: ResidualCondition,
    pub available: usize,
    pub used: usize,
}

/// Enumerates ordered domain pairs (same label, different domain) and
/// category pairs (same domain, different label) among `clean`, then keeps a
/// uniform subsample of at most `cap` pairs per condition. Labels are the
/// observed ones. The coverage report lists every condition of `layout`,
/// including those with no pairs.
pub fn build_residual_pairs(
    clean: &[&Sample],
    layout: &ConditionLayout,
    cap: usize,
    rng: &mut Rng,
) -> Result<(Vec<ResidualPair>, Vec<ConditionCoverage>)> {
    ensure!(
        !clean.is_empty(),
        Config,
        "residual pairs need a non-empty clean set"
    );
    let mut by_cond: BTreeMap<ResidualCondition, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, s) in clean.iter().enumerate() {
        for (j, t) in clean.iter().enumerate() {
            if i == j {
                continue;
            }
            let same_cat = s.observed_label == t.observed_label;
            let same_dom = s.domain == t.domain;
            if same_cat == same_dom {
                continue;
            }
            let q = ResidualCondition {
                src_cat: s.observed_label,
                tgt_cat: t.observed_label,
                src_dom: s.domain,
                tgt_dom: t.domain,
            };
            layout.encode(&q)?;
            by_cond.entry(q).or_default().push((i, j));
        }
    }
    let mut pairs = Vec::new();
    let mut coverage = Vec::new();
    for q in layout.all_conditions() {
        let avail = by_cond.remove(&q).unwrap_or_default();
        let mut keep: Vec<usize> = if avail.len() > cap {
            rng.choose_indices(avail.len(), cap)
        } else {
            (0..avail.len()).collect()
        };
        keep.sort_unstable();
        for &k in &keep {
            let (i, j) = avail[k];
            let (s, t) = (clean[i], clean[j]);
            pairs.push(ResidualPair {
                residual: t
                    .features
                    .iter()
                    .zip(&s.features)
                    .map(|(a, b)| a - b)
                    .collect(),
                condition: q,
                source_id: s.id,
                target_id: t.id,
            });
        }
        coverage.push(ConditionCoverage {
            condition: q,
            available: avail.len(),
            used: keep.len(),
        });
    }
    Ok((pairs, coverage))
}

/// A time-dependent, condition-aware velocity field on residual space.
pub trait VectorField {
    fn feature_dim(&self) -> usize;

    /// Velocity for each row of `r` at its own time `t[i]` under `conds[i]`.
    fn velocity(&self, r: &Tensor, t: &[f64], conds: &[ResidualCondition]) -> Result<Tensor>;
}

/// MLP vector field over `[r | time embedding | condition one-hots]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    layout: ConditionLayout,
    feature_dim: usize,
    /// Residuals enter the network divided by this and velocities leave it
    /// multiplied by it, so the network works at unit scale.
    scale: f64,
    net: Mlp,
}

impl FlowModel {
    pub fn new(
        feature_dim: usize,
        layout: ConditionLayout,
        scale: f64,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![feature_dim + TIME_EMBED_DIM + layout.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(feature_dim);
        let net = Mlp::new(&sizes, rng)?;
        Self::from_parts(feature_dim, layout, scale, net)
    }

    pub fn from_parts(
        feature_dim: usize,
        layout: ConditionLayout,
        scale: f64,
        net: Mlp,
    ) -> Result<Self> {
        ensure!(
            scale.is_finite() && scale > 0.0,
            Config,
            "flow scale {scale} must be positive"
        );
        let want = feature_dim + TIME_EMBED_DIM + layout.dim();
        ensure!(
            net.input_size() == want && net.output_size() == feature_dim,
            Dimension,
            "field network maps {} -> {}, expected {want} -> {feature_dim}",
            net.input_size(),
            net.output_size()
        );
        Ok(Self {
            layout,
            feature_dim,
            scale,
            net,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn layout(&self) -> &ConditionLayout {
        &self.layout
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn inputs(&self, r: &Tensor, t: &[f64], conds: &[ResidualCondition]) -> Result<Tensor> {
        let b = r.rows();
        ensure!(
            r.cols() == self.feature_dim && t.len() == b && conds.len() == b,
            Dimension,
            "field input: {} rows x {} cols, {} times, {} conditions (feature dim {})",
            b,
            r.cols(),
            t.len(),
            conds.len(),
            self.feature_dim
        );
        let f = self.feature_dim;
        let width = f + TIME_EMBED_DIM + self.layout.dim();
        let mut data = vec![0.0; b * width];
        for (i, row) in data.chunks_mut(width).enumerate() {
            for (a, v) in row[..f].iter_mut().zip(r.row(i)) {
                *a = v / self.scale;
            }
            row[f..f + TIME_EMBED_DIM].copy_from_slice(&time_embedding(t[i]));
            self.layout
                .encode_into(&conds[i], &mut row[f + TIME_EMBED_DIM..])?;
        }
        Tensor::matrix(b, width, data)
    }

    /// CFM loss for `pairs` under explicit draws; fills the network's
    /// gradient buffers.
    pub fn cfm_loss_grad(&mut self, pairs: &[&ResidualPair], draws: &CfmDraws) -> Result<f64> {
        let (rt, target, conds) = interpolate(pairs, draws, self.feature_dim)?;
        let x = self.inputs(&rt, &draws.t, &conds)?;
        let mut pred = self.net.forward(&x)?;
        pred.data_mut().iter_mut().for_each(|v| *v *= self.scale);
        let mut lg = mean_squared_error(&pred, &target)?;
        lg.grad.data_mut().iter_mut().for_each(|g| *g *= self.scale);
        self.net.backward(&lg.grad)?;
        Ok(lg.loss)
    }
}

impl VectorField for FlowModel {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn velocity(&self, r: &Tensor, t: &[f64], conds: &[ResidualCondition]) -> Result<Tensor> {
        let mut v = self.net.predict(&self.inputs(r, t, conds)?)?;
        v.data_mut().iter_mut().for_each(|x| *x *= self.scale);
        Ok(v)
    }
}

/// Root mean square of all residual coordinates, floored at 1 so
/// near-zero residual sets keep unit scale.
pub fn residual_scale(pairs: &[ResidualPair]) -> f64 {
    let n: usize = pairs.iter().map(|p| p.residual.len()).sum();
    if n == 0 {
        return 1.0;
    }
    let ss: f64 = pairs.iter().flat_map(|p| &p.residual).map(|v| v * v).sum();
    (ss / n as f64).sqrt().max(1.0)
}

/// Noise starts and times for one CFM batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmDraws {
    pub r0: Tensor,
    pub t: Vec<f64>,
}

impl CfmDraws {
    pub fn sample(batch: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        let r0 = Tensor::matrix(batch, feature_dim, rng.normal_vec(batch * feature_dim))
            .expect("shape matches data length");
        let t = (0..batch).map(|_| rng.uniform()).collect();
        Self { r0, t }
    }
}

/// `(r_t, r1 - r0, conditions)` for a batch.
fn interpolate(
    pairs: &[&ResidualPair],
    draws: &CfmDraws,
    f: usize,
) -> Result<(Tensor, Tensor, Vec<ResidualCondition>)> {
    ensure!(!pairs.is_empty(), Config, "CFM batch is empty");
    ensure!(
        draws.r0.rows() == pairs.len() && draws.r0.cols() == f && draws.t.len() == pairs.len(),
        Dimension,
        "draws do not match a batch of {} residuals of width {f}",
        pairs.len()
    );
    let mut rt = Vec::with_capacity(pairs.len() * f);
    let mut target = Vec::with_capacity(pairs.len() * f);
    for (i, p) in pairs.iter().enumerate() {
        ensure!(
            p.residual.len() == f,
            Dimension,
            "residual width {} != {f}",
            p.residual.len()
        );
        let t = draws.t[i];
        for (&r1, &r0) in p.residual.iter().zip(draws.r0.row(i)) {
            rt.push((1.0 - t) * r0 + t * r1);
            target.push(r1 - r0);
        }
    }
    Ok((
        Tensor::matrix(pairs.len(), f, rt)?,
        Tensor::matrix(pairs.len(), f, target)?,
        pairs.iter().map(|p| p.condition).collect(),
    ))
}

/// Mean over batch and features of `(f(r_t, t, q) - (r1 - r0))^2`.
pub fn cfm_loss<V: VectorField + ?Sized>(
    field: &V,
    pairs: &[&ResidualPair],
    draws: &CfmDraws,
) -> Result<f64> {
    let (rt, target, conds) = interpolate(pairs, draws, field.feature_dim())?;
    let pred = field.velocity(&rt, &draws.t, &conds)?;
    Ok(mean_squared_error(&pred, &target)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub euler_steps: usize,
    pub pair_cap: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 9000,
            batch_size: 128,
            schedule: LrSchedule::StepDecay {
                base: 0.01,
                factor: 0.1,
                every: 3000,
            },
            momentum: 0.9,
            euler_steps: 20,
            pair_cap: 256,
        }
    }
}

/// Trains `model` on `pairs` with minibatch SGD; batches walk reshuffled
/// passes over the pairs. Returns the loss at every step.
pub fn train_flow(
    model: &mut FlowModel,
    pairs: &[ResidualPair],
    cfg: &FlowConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    ensure!(
        !pairs.is_empty(),
        Config,
        "flow training needs at least one residual pair"
    );
    ensure!(
        cfg.batch_size > 0,
        Config,
        "flow batch size must be positive"
    );
    let mut opt = Sgd::with_momentum(cfg.schedule, cfg.momentum);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let draws = CfmDraws::sample(batch.len(), model.feature_dim, rng);
        let loss = model.cfm_loss_grad(&batch, &draws)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("flow loss {loss} at step {step}")));
        }
        opt.step(&mut model.net)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Explicit Euler from `r0` over `[0, 1]` in `steps` equal increments.
pub fn integrate<V: VectorField + ?Sized>(
    field: &V,
    mut r: Tensor,
    conds: &[ResidualCondition],
    steps: usize,
) -> Result<Tensor> {
    ensure!(steps >= 1, Config, "Euler sampler needs at least one step");
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = vec![k as f64 * h; r.rows()];
        let v = field.velocity(&r, &t, conds)?;
        for (a, b) in r.data_mut().iter_mut().zip(v.data()) {
            *a += h * b;
        }
    }
    Ok(r)
}

/// One residual per condition, each from a fresh standard normal start.
pub fn sample_residuals<V: VectorField + ?Sized>(
    field: &V,
    conds: &[ResidualCondition],
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let f = field.feature_dim();
    let r0 = Tensor::matrix(conds.len(), f, rng.normal_vec(conds.len() * f))?;
    integrate(field, r0, conds, steps)
}

pub fn sample_residual<V: VectorField + ?Sized>(
    field: &V,
    q: ResidualCondition,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    Ok(sample_residuals(field, &[q], steps, rng)?.into_data())
}

pub fn augment(x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        x.len() == r.len(),
        Dimension,
        "sample width {} vs residual width {}",
        x.len(),
        r.len()
    );
    Ok(x.iter().zip(r).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn sample(id: usize, domain: usize, label: usize, features: Vec<f64>) -> Sample {
        Sample {
            id,
            features,
            domain,
            observed_label: label,
            original_label: label,
        }
    }

    struct Constant(Vec<f64>);

    impl VectorField for Constant {
        fn feature_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, r: &Tensor, _: &[f64], _: &[ResidualCondition]) -> Result<Tensor> {
            let data = (0..r.rows()).flat_map(|_| self.0.clone()).collect();
            Tensor::matrix(r.rows(), self.0.len(), data)
        }
    }

    struct Identity(usize);

    impl VectorField for Identity {
        fn feature_dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, r: &Tensor, _: &[f64], _: &[ResidualCondition]) -> Result<Tensor> {
            Ok(r.clone())
        }
    }

    /// Returns `r1 - r0` for the batch it was built for.
    struct Oracle(Tensor);

    impl VectorField for Oracle {
        fn feature_dim(&self) -> usize {
            self.0.cols()
        }
        fn velocity(&self, _: &Tensor, _: &[f64], _: &[ResidualCondition]) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn layout_positions() {
        let layout = ConditionLayout::new(3, vec![0, 1, 2]);
        let v = layout
            .encode(&ResidualCondition {
                src_cat: 0,
                tgt_cat: 1,
                src_dom: 0,
                tgt_dom: 2,
            })
            .unwrap();
        assert_eq!(v.len(), 12);
        let ones: Vec<usize> = (0..12).filter(|&i| v[i] == 1.0).collect();
        assert_eq!(ones, vec![0, 4, 6, 11]);
        assert_eq!(v.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn layout_is_injective_and_checks_range() {
        let layout = ConditionLayout::new(3, vec![1, 2, 3]);
        let all = layout.all_conditions();
        let codes: BTreeSet<Vec<u64>> = all
            .iter()
            .map(|q| {
                layout
                    .encode(q)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        assert_eq!(codes.len(), all.len());
        assert!(matches!(
            layout.encode(&ResidualCondition::category(0, 0, 1)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            layout.encode(&ResidualCondition::category(1, 0, 3)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn condition_kinds() {
        assert_eq!(
            ResidualCondition::domain(2, 0, 1).kind(),
            Some(ConditionKind::Domain)
        );
        assert_eq!(
            ResidualCondition::category(0, 1, 2).kind(),
            Some(ConditionKind::Category)
        );
        assert_eq!(ResidualCondition::domain(2, 1, 1).kind(), None);
    }

    #[test]
    fn pair_enumeration_two_by_two() {
        let samples = [
            sample(0, 0, 0, vec![0.0]),
            sample(1, 0, 1, vec![1.0]),
            sample(2, 1, 0, vec![2.0]),
            sample(3, 1, 1, vec![4.0]),
        ];
        let refs: Vec<&Sample> = samples.iter().collect();
        let layout = ConditionLayout::new(2, vec![0, 1]);
        let (pairs, cov) = build_residual_pairs(&refs, &layout, 256, &mut Rng::new(0)).unwrap();
        let count = |k| {
            pairs
                .iter()
                .filter(|p| p.condition.kind() == Some(k))
                .count()
        };
        assert_eq!(count(ConditionKind::Domain), 4);
        assert_eq!(count(ConditionKind::Category), 4);
        assert_eq!(cov.len(), 8);
        assert!(cov.iter().all(|c| c.available == 1 && c.used == 1));
        let p = pairs
            .iter()
            .find(|p| p.source_id == 1 && p.target_id == 3)
            .unwrap();
        assert_eq!(p.residual, vec![3.0]);
        assert_eq!(p.condition, ResidualCondition::domain(1, 0, 1));
    }

    #[test]
    fn single_domain_has_no_domain_pairs() {
        let samples: Vec<Sample> = (0..6)
            .map(|i| sample(i, 0, i % 3, vec![i as f64]))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let layout = ConditionLayout::new(3, vec![0]);
        let (pairs, cov) = build_residual_pairs(&refs, &layout, 256, &mut Rng::new(0)).unwrap();
        assert!(pairs
            .iter()
            .all(|p| p.condition.kind() == Some(ConditionKind::Category)));
        assert_eq!(pairs.len(), 6 * 4);
        assert!(cov.iter().all(|c| c.available == 4));
    }

    #[test]
    fn identical_endpoints_give_zero_residual() {
        let samples = [
            sample(0, 0, 0, vec![1.5, -2.0]),
            sample(1, 1, 0, vec![1.5, -2.0]),
        ];
        let refs: Vec<&Sample> = samples.iter().collect();
        let layout = ConditionLayout::new(2, vec![0, 1]);
        let (pairs, cov) = build_residual_pairs(&refs, &layout, 256, &mut Rng::new(0)).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.residual == vec![0.0, 0.0]));
        assert!(cov.iter().any(|c| c.available == 0));
    }

    #[test]
    fn cap_subsamples_and_only_uses_given_ids() {
        let samples: Vec<Sample> = (0..40)
            .map(|i| sample(100 + i, i % 2, 0, vec![i as f64]))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let layout = ConditionLayout::new(1, vec![0, 1]);
        let (pairs, cov) = build_residual_pairs(&refs, &layout, 7, &mut Rng::new(3)).unwrap();
        assert_eq!(pairs.len(), 14);
        assert!(cov.iter().all(|c| c.available == 400 && c.used == 7));
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.id).collect();
        assert!(pairs
            .iter()
            .all(|p| ids.contains(&p.source_id) && ids.contains(&p.target_id)));
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(0.0);
        assert_eq!(e, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(0.5);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
    }

    fn toy_pairs() -> Vec<ResidualPair> {
        (0..5)
            .map(|i| ResidualPair {
                residual: vec![i as f64, 1.0 - i as f64, 0.5],
                condition: ResidualCondition::domain(i % 2, 0, 1),
                source_id: i,
                target_id: i + 10,
            })
            .collect()
    }

    #[test]
    fn oracle_field_has_zero_loss() {
        let pairs = toy_pairs();
        let refs: Vec<&ResidualPair> = pairs.iter().collect();
        let draws = CfmDraws::sample(5, 3, &mut Rng::new(1));
        let (_, target, _) = interpolate(&refs, &draws, 3).unwrap();
        assert_eq!(cfm_loss(&Oracle(target), &refs, &draws).unwrap(), 0.0);
    }

    #[test]
    fn zero_field_loss_is_mean_square_of_targets() {
        let pairs = toy_pairs();
        let refs: Vec<&ResidualPair> = pairs.iter().collect();
        let draws = CfmDraws::sample(5, 3, &mut Rng::new(2));
        let mut expected = 0.0;
        for (i, p) in pairs.iter().enumerate() {
            for (j, &r1) in p.residual.iter().enumerate() {
                expected += (r1 - draws.r0.get(i, j)).powi(2);
            }
        }
        expected /= 15.0;
        let got = cfm_loss(&Constant(vec![0.0; 3]), &refs, &draws).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let pairs = toy_pairs();
        let refs: Vec<&ResidualPair> = pairs.iter().collect();
        let mut rng = Rng::new(11);
        let layout = ConditionLayout::new(2, vec![0, 1]);
        let mut model = FlowModel::new(3, layout, 2.5, &[6, 5], &mut rng).unwrap();
        let draws = CfmDraws::sample(5, 3, &mut rng);
        model.cfm_loss_grad(&refs, &draws).unwrap();
        let grads = model.net().grads();
        let base = model.net().params();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            model.net_mut().set_params(&p).unwrap();
            let up = cfm_loss(&model, &refs, &draws).unwrap();
            p[k] -= 2.0 * h;
            model.net_mut().set_params(&p).unwrap();
            let down = cfm_loss(&model, &refs, &draws).unwrap();
            let num = (up - down) / (2.0 * h);
            let rel = (grads[k] - num).abs() / grads[k].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: {} vs {num}", grads[k]);
        }
    }

    #[test]
    fn constant_field_is_exact_for_any_step_count() {
        let v = vec![1.0, -2.0, 0.25];
        for steps in [1, 3, 20, 97] {
            let r0 = Tensor::from_rows(&[vec![0.5, 0.5, 0.5], vec![-1.0, 0.0, 2.0]]).unwrap();
            let conds = [ResidualCondition::domain(0, 0, 1); 2];
            let r = integrate(&Constant(v.clone()), r0.clone(), &conds, steps).unwrap();
            for i in 0..2 {
                for (j, vj) in v.iter().enumerate() {
                    assert!((r.get(i, j) - r0.get(i, j) - vj).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_field_euler_recurrence() {
        let r0 = Tensor::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let r = integrate(&Identity(2), r0, &[ResidualCondition::domain(0, 0, 1)], 100).unwrap();
        let factor = 1.01f64.powi(100);
        assert!((factor - 2.7048).abs() < 1e-4);
        assert!((r.get(0, 0) - factor).abs() < 1e-12);
        assert!((r.get(0, 1) + 0.5 * factor).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_stochastic() {
        let f = Constant(vec![0.0; 4]);
        let mut rng = Rng::new(9);
        let q = ResidualCondition::domain(0, 0, 1);
        assert_ne!(
            sample_residual(&f, q, 5, &mut rng).unwrap(),
            sample_residual(&f, q, 5, &mut rng).unwrap()
        );
    }

    #[test]
    fn augment_inverse_and_dims() {
        let x = vec![1.0, 2.0, 3.0];
        let r = vec![0.5, -1.0, 4.0];
        assert_eq!(augment(&x, &[0.0; 3]).unwrap(), x);
        let back = augment(
            &augment(&x, &r).unwrap(),
            &r.iter().map(|v| -v).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(back, x);
        assert!(matches!(augment(&x, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let mut rng = Rng::new(5);
        let mut model =
            FlowModel::new(3, ConditionLayout::new(2, vec![0, 1]), 1.0, &[8], &mut rng).unwrap();
        let before = model.clone();
        let cfg = FlowConfig {
            steps: 0,
            ..FlowConfig::default()
        };
        assert!(train_flow(&mut model, &toy_pairs(), &cfg, &mut rng)
            .unwrap()
            .is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn constant_residual_is_learned_and_deterministic() {
        let layout = ConditionLayout::new(2, vec![0, 1]);
        let targets = [
            (ResidualCondition::domain(0, 0, 1), vec![2.0, -1.0]),
            (ResidualCondition::category(1, 0, 1), vec![-3.0, 0.5]),
        ];
        let pairs: Vec<ResidualPair> = (0..64)
            .map(|i| {
                let (q, v) = &targets[i % 2];
                ResidualPair {
                    residual: v.clone(),
                    condition: *q,
                    source_id: i,
                    target_id: i,
                }
            })
            .collect();
        let cfg = FlowConfig {
            hidden: vec![32, 32],
            batch_size: 32,
            ..FlowConfig::default()
        };
        let run = |steps: usize| {
            let mut rng = Rng::new(21);
            let mut model = FlowModel::new(
                2,
                layout.clone(),
                residual_scale(&pairs),
                &cfg.hidden,
                &mut rng,
            )
            .unwrap();
            let cfg = FlowConfig {
                steps,
                ..cfg.clone()
            };
            train_flow(&mut model, &pairs, &cfg, &mut rng).unwrap();
            model
        };
        let error = |model: &FlowModel| {
            let mut rng = Rng::new(77);
            let mut total = 0.0;
            for (q, v) in &targets {
                let conds = vec![*q; 200];
                let r = sample_residuals(model, &conds, 20, &mut rng).unwrap();
                for (j, &vj) in v.iter().enumerate() {
                    let m: f64 = (0..200).map(|i| r.get(i, j)).sum::<f64>() / 200.0;
                    total += (m - vj).abs();
                }
            }
            total
        };
        let short = run(100);
        let long = run(1500);
        assert!(error(&long) < error(&short));
        assert!(error(&long) < 0.4, "{}", error(&long));
        assert_eq!(long, run(1500));
    }
}
