//! Loss terms of the objective and their analytic gradients.
//!
//! Each term has a value function and a `*_with_grad` twin returning the
//! gradient with respect to the student output it consumes (logits or the
//! projected embedding `u`). The two are written independently so the
//! finite-difference checks in [`crate::gradcheck`] compare distinct routes.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::embedding::{
    cosine_similarity, cosine_with_grad, kl_divergence, l1_distance, l2_distance, log_softmax,
    log_sum_exp, softmax, softmax_with_temperature, Embedding,
};
use crate::error::{check_dims, Result, RiseError};
use crate::student::{Gradients, LabeledSample, StudentModel};
use crate::teacher::{teacher_logits, TeacherTable};

/// Metric `k` of the absolute distance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AbsoluteMetric {
    #[default]
    Cosine,
    L1,
    L2,
    SupContrastive,
}

/// Outer metric `k1` of the relative distance term, applied across domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuterMetric {
    #[default]
    Mse,
    L1,
    KlOnSoftmax,
}

/// Inner metric `k2` of the relative distance term, embedding vs. anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerMetric {
    #[default]
    CosineSim,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature_t: f64,
    pub metric_k: AbsoluteMetric,
    pub metric_k1: OuterMetric,
    pub metric_k2: InnerMetric,
    pub hint_t_squared: bool,
    pub contrastive_tau: f64,
    /// Include the absolute distance term under `lambda3`.
    pub absolute: bool,
    /// Include the relative distance term under `lambda3`.
    pub relative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            temperature_t: 2.0,
            metric_k: AbsoluteMetric::Cosine,
            metric_k1: OuterMetric::Mse,
            metric_k2: InnerMetric::CosineSim,
            hint_t_squared: false,
            contrastive_tau: 0.1,
            absolute: true,
            relative: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2, self.lambda3];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RiseError::Config("loss weights must be finite and non-negative".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(RiseError::Config("at least one loss weight must be positive".into()));
        }
        if !(self.temperature_t > 0.0 && self.temperature_t.is_finite()) {
            return Err(RiseError::Config("temperature_t must be positive".into()));
        }
        if !(self.contrastive_tau > 0.0 && self.contrastive_tau.is_finite()) {
            return Err(RiseError::Config("contrastive_tau must be positive".into()));
        }
        Ok(())
    }

    /// True when the distance terms contribute anything.
    pub fn uses_absolute(&self) -> bool {
        self.absolute && self.lambda3 > 0.0
    }

    pub fn uses_relative(&self) -> bool {
        self.relative && self.lambda3 > 0.0
    }
}

/// Per-term values of the objective; `total = λ1·ce + λ2·hint + λ3·(ad + rd)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub hint: f64,
    pub ad: f64,
    pub rd: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(ce: f64, hint: f64, ad: f64, rd: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            ce,
            hint,
            ad,
            rd,
            total: cfg.lambda1 * ce + cfg.lambda2 * hint + cfg.lambda3 * (ad + rd),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_label(label: usize, len: usize) -> Result<()> {
    if label < len {
        Ok(())
    } else {
        Err(RiseError::Index { index: label, len })
    }
}

pub fn cross_entropy_loss(student_logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, student_logits.len())?;
    Ok(log_sum_exp(student_logits) - student_logits[label])
}

pub fn cross_entropy_with_grad(student_logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(label, student_logits.len())?;
    let log_probs = log_softmax(student_logits);
    let grad = log_probs
        .iter()
        .enumerate()
        .map(|(i, lp)| lp.exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((-log_probs[label], grad))
}

/// `KL(softmax(teacher/t) || softmax(student/t))`, times `t²` when asked.
///
/// Log-probabilities of both sides come from log-sum-exp, so saturated
/// teacher distributions need no flooring here.
pub fn hint_loss(student_logits: &[f64], teacher_logits: &[f64], t: f64, t_squared: bool) -> Result<f64> {
    check_dims(teacher_logits.len(), student_logits.len())?;
    let p = softmax_with_temperature(teacher_logits, t)?;
    let scaled_t: Vec<f64> = teacher_logits.iter().map(|x| x / t).collect();
    let scaled_s: Vec<f64> = student_logits.iter().map(|x| x / t).collect();
    let (log_p, log_q) = (log_softmax(&scaled_t), log_softmax(&scaled_s));
    let kl: f64 = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, (lp, lq))| pi * (lp - lq))
        .sum();
    Ok(if t_squared { kl * t * t } else { kl })
}

pub fn hint_with_grad(
    student_logits: &[f64],
    teacher_logits: &[f64],
    t: f64,
    t_squared: bool,
) -> Result<(f64, Vec<f64>)> {
    let value = hint_loss(student_logits, teacher_logits, t, t_squared)?;
    let p = softmax_with_temperature(teacher_logits, t)?;
    let q = softmax_with_temperature(student_logits, t)?;
    let scale = if t_squared { t } else { 1.0 / t };
    let grad = q.iter().zip(p.iter()).map(|(qi, pi)| scale * (qi - pi)).collect();
    Ok((value, grad))
}

/// Absolute distance between the student embedding and its class target.
///
/// `SupContrastive` needs every class target; use [`supervised_contrastive_loss`].
pub fn absolute_distance_loss(u: &[f64], target: &[f64], metric: AbsoluteMetric) -> Result<f64> {
    match metric {
        AbsoluteMetric::Cosine => Ok(1.0 - cosine_similarity(u, target)?),
        AbsoluteMetric::L1 => l1_distance(u, target),
        AbsoluteMetric::L2 => l2_distance(u, target),
        AbsoluteMetric::SupContrastive => Err(RiseError::Config(
            "supervised contrastive distance needs all class targets".into(),
        )),
    }
}

pub fn absolute_distance_with_grad(
    u: &[f64],
    target: &[f64],
    metric: AbsoluteMetric,
) -> Result<(f64, Vec<f64>)> {
    check_dims(target.len(), u.len())?;
    match metric {
        AbsoluteMetric::Cosine => {
            let (cos, g) = cosine_with_grad(u, target)?;
            Ok((1.0 - cos, g.into_iter().map(|x| -x).collect()))
        }
        AbsoluteMetric::L1 => {
            let grad = u.iter().zip(target).map(|(a, b)| sign(a - b)).collect();
            Ok((l1_distance(u, target)?, grad))
        }
        AbsoluteMetric::L2 => {
            let dist = l2_distance(u, target)?;
            let grad = if dist == 0.0 {
                vec![0.0; u.len()]
            } else {
                u.iter().zip(target).map(|(a, b)| (a - b) / dist).collect()
            };
            Ok((dist, grad))
        }
        AbsoluteMetric::SupContrastive => Err(RiseError::Config(
            "supervised contrastive distance needs all class targets".into(),
        )),
    }
}

/// Cross-entropy over classes of `cos(u, target_j) / tau`, positive at `label`.
pub fn supervised_contrastive_loss(u: &[f64], targets: &[Embedding], label: usize, tau: f64) -> Result<f64> {
    check_label(label, targets.len())?;
    if !(tau > 0.0) {
        return Err(RiseError::Config("contrastive tau must be positive".into()));
    }
    let sims = targets
        .iter()
        .map(|t| Ok(cosine_similarity(u, t)? / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&sims) - sims[label])
}

pub fn supervised_contrastive_with_grad(
    u: &[f64],
    targets: &[Embedding],
    label: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_label(label, targets.len())?;
    if !(tau > 0.0) {
        return Err(RiseError::Config("contrastive tau must be positive".into()));
    }
    let mut sims = Vec::with_capacity(targets.len());
    let mut sim_grads = Vec::with_capacity(targets.len());
    for t in targets {
        let (c, g) = cosine_with_grad(u, t)?;
        sims.push(c / tau);
        sim_grads.push(g);
    }
    let probs = softmax(&sims);
    let mut grad = vec![0.0; u.len()];
    for (j, g) in sim_grads.iter().enumerate() {
        let coef = (probs[j] - if j == label { 1.0 } else { 0.0 }) / tau;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += coef * x;
        }
    }
    Ok((log_sum_exp(&sims) - sims[label], grad))
}

fn inner_metric(a: &[f64], anchor: &[f64], k2: InnerMetric) -> Result<f64> {
    match k2 {
        InnerMetric::CosineSim => cosine_similarity(a, anchor),
        InnerMetric::L2 => l2_distance(a, anchor),
    }
}

fn inner_metric_with_grad(a: &[f64], anchor: &[f64], k2: InnerMetric) -> Result<(f64, Vec<f64>)> {
    match k2 {
        InnerMetric::CosineSim => cosine_with_grad(a, anchor),
        InnerMetric::L2 => {
            let dist = l2_distance(a, anchor)?;
            let grad = if dist == 0.0 {
                vec![0.0; a.len()]
            } else {
                a.iter().zip(anchor).map(|(x, y)| (x - y) / dist).collect()
            };
            Ok((dist, grad))
        }
    }
}

fn outer_metric(s: &[f64], r: &[f64], k1: OuterMetric) -> Result<f64> {
    let n = s.len() as f64;
    match k1 {
        OuterMetric::Mse => Ok(s.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n),
        OuterMetric::L1 => Ok(s.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>() / n),
        OuterMetric::KlOnSoftmax => {
            kl_divergence(&softmax_with_temperature(r, 1.0)?, &softmax_with_temperature(s, 1.0)?)
        }
    }
}

/// Relative distance: compares the profile `k2(u, anchor_d)` against the
/// reference profile `k2(generic, anchor_d)` over domains with `k1`.
pub fn relative_distance_loss<A: AsRef<[f64]>>(
    u: &[f64],
    generic: &[f64],
    anchors: &[A],
    k1: OuterMetric,
    k2: InnerMetric,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(RiseError::EmptyInput("relative distance needs at least one anchor".into()));
    }
    check_dims(generic.len(), u.len())?;
    let mut s = Vec::with_capacity(anchors.len());
    let mut r = Vec::with_capacity(anchors.len());
    for a in anchors {
        s.push(inner_metric(u, a.as_ref(), k2)?);
        r.push(inner_metric(generic, a.as_ref(), k2)?);
    }
    outer_metric(&s, &r, k1)
}

pub fn relative_distance_with_grad<A: AsRef<[f64]>>(
    u: &[f64],
    generic: &[f64],
    anchors: &[A],
    k1: OuterMetric,
    k2: InnerMetric,
) -> Result<(f64, Vec<f64>)> {
    if anchors.is_empty() {
        return Err(RiseError::EmptyInput("relative distance needs at least one anchor".into()));
    }
    check_dims(generic.len(), u.len())?;
    let mut s = Vec::with_capacity(anchors.len());
    let mut s_grads = Vec::with_capacity(anchors.len());
    let mut r = Vec::with_capacity(anchors.len());
    for a in anchors {
        let (v, g) = inner_metric_with_grad(u, a.as_ref(), k2)?;
        s.push(v);
        s_grads.push(g);
        r.push(inner_metric(generic, a.as_ref(), k2)?);
    }
    let n = s.len() as f64;
    let (value, ds): (f64, Vec<f64>) = match k1 {
        OuterMetric::Mse => (
            s.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
            s.iter().zip(&r).map(|(a, b)| 2.0 * (a - b) / n).collect(),
        ),
        OuterMetric::L1 => (
            s.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
            s.iter().zip(&r).map(|(a, b)| sign(a - b) / n).collect(),
        ),
        OuterMetric::KlOnSoftmax => {
            let (log_p, log_q) = (log_softmax(&r), log_softmax(&s));
            let kl = log_p
                .iter()
                .zip(&log_q)
                .map(|(lp, lq)| lp.exp() * (lp - lq))
                .sum();
            (kl, log_q.iter().zip(&log_p).map(|(lq, lp)| lq.exp() - lp.exp()).collect())
        }
    };
    let mut grad = vec![0.0; u.len()];
    for (coef, g) in ds.iter().zip(&s_grads) {
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += coef * x;
        }
    }
    Ok((value, grad))
}

/// Read counters per domain, used to prove the held-out domain never feeds a gradient.
#[derive(Debug, Default)]
pub struct AccessCounter {
    samples: Vec<AtomicU64>,
    anchors: Vec<AtomicU64>,
}

impl AccessCounter {
    pub fn new(num_domains: usize) -> Self {
        AccessCounter {
            samples: (0..num_domains).map(|_| AtomicU64::new(0)).collect(),
            anchors: (0..num_domains).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn touch_sample(&self, domain: usize) {
        if let Some(c) = self.samples.get(domain) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn touch_anchor(&self, domain: usize) {
        if let Some(c) = self.anchors.get(domain) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> AccessCounts {
        AccessCounts {
            samples: self.samples.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
            anchors: self.anchors.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
        }
    }
}

/// Per-domain counts of samples and anchors that entered a gradient.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccessCounts {
    pub samples: Vec<u64>,
    pub anchors: Vec<u64>,
}

/// Frozen inputs the objective reads besides the sample itself.
pub struct LossContext<'a> {
    pub table: &'a TeacherTable,
    /// Distance-loss target per class (generic text, single template or image mean).
    pub targets: Vec<Embedding>,
    /// Domains whose anchors the relative term may read.
    pub anchor_domains: Vec<usize>,
    pub access: AccessCounter,
}

impl<'a> LossContext<'a> {
    pub fn new(table: &'a TeacherTable, targets: Vec<Embedding>, anchor_domains: Vec<usize>) -> Self {
        LossContext {
            table,
            targets,
            anchor_domains,
            access: AccessCounter::new(table.num_domains()),
        }
    }

    /// Ensemble text targets and every domain's anchors.
    pub fn with_generic(table: &'a TeacherTable) -> Self {
        Self::new(table, table.generic.clone(), (0..table.num_domains()).collect())
    }

    fn anchors_for(&self, class: usize) -> Vec<&Embedding> {
        self.anchor_domains
            .iter()
            .map(|&d| {
                self.access.touch_anchor(d);
                self.table.anchor(d, class)
            })
            .collect()
    }
}

/// Gradient of one sample's loss with respect to the student outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub logits: Vec<f64>,
    pub u: Vec<f64>,
}

/// Objective value of one sample given the student's outputs.
pub fn total_loss(
    student_logits: &[f64],
    u: &[f64],
    sample: &LabeledSample,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let label = sample.label;
    let ce = cross_entropy_loss(student_logits, label)?;
    let teacher = teacher_logits(&sample.teacher_emb, ctx.table)?;
    let hint = hint_loss(student_logits, &teacher, cfg.temperature_t, cfg.hint_t_squared)?;
    check_label(label, ctx.targets.len())?;
    let ad = if cfg.uses_absolute() {
        match cfg.metric_k {
            AbsoluteMetric::SupContrastive => {
                supervised_contrastive_loss(u, &ctx.targets, label, cfg.contrastive_tau)?
            }
            k => absolute_distance_loss(u, &ctx.targets[label], k)?,
        }
    } else {
        0.0
    };
    let rd = if cfg.uses_relative() {
        let anchors = ctx.anchors_for(label);
        relative_distance_loss(u, &ctx.targets[label], &anchors, cfg.metric_k1, cfg.metric_k2)?
    } else {
        0.0
    };
    Ok(LossBreakdown::combine(ce, hint, ad, rd, cfg))
}

/// [`total_loss`] plus its gradient with respect to logits and `u`.
pub fn total_loss_with_grad(
    student_logits: &[f64],
    u: &[f64],
    sample: &LabeledSample,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrad)> {
    let label = sample.label;
    ctx.access.touch_sample(sample.domain);
    let mut grad = OutputGrad {
        logits: vec![0.0; student_logits.len()],
        u: vec![0.0; u.len()],
    };
    let axpy = |acc: &mut [f64], a: f64, x: &[f64]| {
        for (y, v) in acc.iter_mut().zip(x) {
            *y += a * v;
        }
    };

    let (ce, g) = cross_entropy_with_grad(student_logits, label)?;
    axpy(&mut grad.logits, cfg.lambda1, &g);

    let teacher = teacher_logits(&sample.teacher_emb, ctx.table)?;
    let (hint, g) = hint_with_grad(student_logits, &teacher, cfg.temperature_t, cfg.hint_t_squared)?;
    axpy(&mut grad.logits, cfg.lambda2, &g);

    check_label(label, ctx.targets.len())?;
    let ad = if cfg.uses_absolute() {
        let (v, g) = match cfg.metric_k {
            AbsoluteMetric::SupContrastive => {
                supervised_contrastive_with_grad(u, &ctx.targets, label, cfg.contrastive_tau)?
            }
            k => absolute_distance_with_grad(u, &ctx.targets[label], k)?,
        };
        axpy(&mut grad.u, cfg.lambda3, &g);
        v
    } else {
        0.0
    };
    let rd = if cfg.uses_relative() {
        let anchors = ctx.anchors_for(label);
        let (v, g) =
            relative_distance_with_grad(u, &ctx.targets[label], &anchors, cfg.metric_k1, cfg.metric_k2)?;
        axpy(&mut grad.u, cfg.lambda3, &g);
        v
    } else {
        0.0
    };
    Ok((LossBreakdown::combine(ce, hint, ad, rd, cfg), grad))
}

/// Mean objective over a batch, evaluated through the model's forward pass.
pub fn batch_loss(
    batch: &[&LabeledSample],
    model: &StudentModel,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(RiseError::EmptyInput("empty batch".into()));
    }
    let mut acc = LossBreakdown::default();
    for s in batch {
        let out = model.forward(&s.feature, ctx.table)?;
        let b = total_loss(&out.logits, &out.u, s, ctx, cfg)?;
        acc.ce += b.ce;
        acc.hint += b.hint;
        acc.ad += b.ad;
        acc.rd += b.rd;
        acc.total += b.total;
    }
    Ok(scale_breakdown(acc, 1.0 / batch.len() as f64))
}

fn scale_breakdown(b: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        ce: b.ce * s,
        hint: b.hint * s,
        ad: b.ad * s,
        rd: b.rd * s,
        total: b.total * s,
    }
}

/// Exact gradient of the mean batch objective with respect to every student parameter.
///
/// Per-sample contributions are accumulated in batch order.
pub fn loss_gradients(
    batch: &[&LabeledSample],
    model: &StudentModel,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(RiseError::EmptyInput("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut acc = LossBreakdown::default();
    for s in batch {
        let cache = model.forward_cached(&s.feature, ctx.table)?;
        let (b, out_grad) = total_loss_with_grad(&cache.logits, &cache.u, s, ctx, cfg)?;
        model.backward(&cache, &out_grad, ctx.table, &mut grads)?;
        acc.ce += b.ce;
        acc.hint += b.hint;
        acc.ad += b.ad;
        acc.rd += b.rd;
        acc.total += b.total;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((scale_breakdown(acc, inv), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::dot;
    use crate::teacher::tests::two_class_table;
    use std::f64::consts::LN_2;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy_loss(&[0.0, 0.0], 0).unwrap() - LN_2).abs() < 1e-15);
        assert!(cross_entropy_loss(&[1e3, 0.0], 0).unwrap() < 1e-12);
        assert!((cross_entropy_loss(&[1e3, 0.0], 1).unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(cross_entropy_loss(&[0.0, 0.0], 2), Err(RiseError::Index { .. })));
    }

    #[test]
    fn hint_examples() {
        let z = [0.4, -1.3, 2.2];
        for t in [0.5, 1.0, 3.0] {
            assert!(hint_loss(&z, &z, t, false).unwrap().abs() < 1e-12);
        }
        // KL([2/3, 1/3] || [1/2, 1/2]) = 2/3·ln(4/3) + 1/3·ln(2/3)
        let expected = 2.0 / 3.0 * (4.0f64 / 3.0).ln() + 1.0 / 3.0 * (2.0f64 / 3.0).ln();
        let v = hint_loss(&[0.0, 0.0], &[LN_2, 0.0], 1.0, false).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.05663).abs() < 1e-5);
        let a = hint_loss(&[0.3, 0.1], &[1.5, -0.5], 2.5, false).unwrap();
        let b = hint_loss(&[0.3, 0.1], &[1.5, -0.5], 2.5, true).unwrap();
        assert!((b - 6.25 * a).abs() < 1e-12);
        assert!(matches!(hint_loss(&[0.0], &[0.0, 1.0], 1.0, false), Err(RiseError::Dim { .. })));
    }

    #[test]
    fn hint_agrees_with_floored_kl_on_moderate_logits() {
        let s = [0.2, 1.1, -0.4];
        let t = [2.0, -1.0, 0.5];
        let p = softmax_with_temperature(&t, 1.5).unwrap();
        let q = softmax_with_temperature(&s, 1.5).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((hint_loss(&s, &t, 1.5, false).unwrap() - kl).abs() < 1e-12);
    }

    #[test]
    fn absolute_examples() {
        let u = [0.3, -0.7, 1.1];
        assert!(absolute_distance_loss(&u, &u, AbsoluteMetric::Cosine).unwrap().abs() < 1e-15);
        assert_eq!(absolute_distance_loss(&u, &u, AbsoluteMetric::L1).unwrap(), 0.0);
        assert_eq!(absolute_distance_loss(&u, &u, AbsoluteMetric::L2).unwrap(), 0.0);
        assert_eq!(
            absolute_distance_loss(&[1.0, 0.0], &[0.0, 1.0], AbsoluteMetric::Cosine).unwrap(),
            1.0
        );
        let v = absolute_distance_loss(&[3.0, 4.0], &[4.0, 3.0], AbsoluteMetric::Cosine).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        assert!(matches!(
            absolute_distance_loss(&[0.0, 0.0], &[1.0, 0.0], AbsoluteMetric::Cosine),
            Err(RiseError::DegenerateVector(_))
        ));
    }

    #[test]
    fn absolute_cosine_is_scale_invariant() {
        let t = [0.5, -0.2, 0.9];
        let a = absolute_distance_loss(&[1.0, 2.0, 3.0], &t, AbsoluteMetric::Cosine).unwrap();
        let b = absolute_distance_loss(&[7.0, 14.0, 21.0], &t, AbsoluteMetric::Cosine).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient_orthogonal_to_u() {
        let u = [0.3, -1.7, 0.25, 2.0];
        let t = [1.0, 0.5, -0.5, 0.1];
        let (_, g) = absolute_distance_with_grad(&u, &t, AbsoluteMetric::Cosine).unwrap();
        assert!(dot(&g, &u).abs() < 1e-9);
    }

    #[test]
    fn contrastive_examples() {
        let targets = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        let v = supervised_contrastive_loss(&[1.0, 0.0], &targets, 0, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12 && (v - 0.3133).abs() < 1e-4);

        let three = vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])];
        let v = supervised_contrastive_loss(&[1.0, 1.0, 1.0], &three, 2, 0.7).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);

        let v = supervised_contrastive_loss(&[1.0, 0.2], &targets, 0, 1e-3).unwrap();
        assert!(v < 1e-12);
        assert!(matches!(
            supervised_contrastive_loss(&[1.0, 0.0], &targets, 2, 1.0),
            Err(RiseError::Index { .. })
        ));
    }

    #[test]
    fn relative_examples() {
        let g = [0.0, 1.0];
        let anchors = vec![vec![1.0, 0.0]];
        let v = relative_distance_loss(&[1.0, 0.0], &g, &anchors, OuterMetric::Mse, InnerMetric::CosineSim)
            .unwrap();
        assert_eq!(v, 1.0);
        let v = relative_distance_loss(&[1.0, 0.0], &g, &anchors, OuterMetric::L1, InnerMetric::CosineSim)
            .unwrap();
        assert_eq!(v, 1.0);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            relative_distance_loss(&g, &g, &empty, OuterMetric::Mse, InnerMetric::L2),
            Err(RiseError::EmptyInput(_))
        ));
        assert!(matches!(
            relative_distance_loss(&[1.0], &g, &anchors, OuterMetric::Mse, InnerMetric::L2),
            Err(RiseError::Dim { .. })
        ));
    }

    #[test]
    fn relative_zero_at_generic_for_all_metrics() {
        let g = [0.4, -0.3, 0.8];
        let anchors = vec![vec![1.0, 0.2, 0.1], vec![-0.3, 0.9, 0.4], vec![0.2, 0.2, -1.0]];
        for k1 in [OuterMetric::Mse, OuterMetric::L1, OuterMetric::KlOnSoftmax] {
            for k2 in [InnerMetric::CosineSim, InnerMetric::L2] {
                let (v, grad) = relative_distance_with_grad(&g, &g, &anchors, k1, k2).unwrap();
                assert!(v.abs() < 1e-12, "{k1:?}/{k2:?}");
                assert!(grad.iter().all(|x| x.abs() < 1e-9), "{k1:?}/{k2:?}");
            }
        }
    }

    fn sample() -> LabeledSample {
        LabeledSample {
            id: "x".into(),
            feature: vec![1.0, 0.0],
            teacher_emb: e(&[0.9, 0.2]),
            label: 0,
            domain: 0,
        }
    }

    #[test]
    fn total_with_only_ce() {
        let table = two_class_table();
        let ctx = LossContext::with_generic(&table);
        let cfg = LossConfig { lambda2: 0.0, lambda3: 0.0, lambda1: 0.7, ..LossConfig::default() };
        let b = total_loss(&[0.5, -0.5], &[0.2, 0.9], &sample(), &ctx, &cfg).unwrap();
        assert!((b.total - 0.7 * b.ce).abs() < 1e-15);
    }

    #[test]
    fn total_is_linear_in_lambda3() {
        let table = two_class_table();
        let ctx = LossContext::with_generic(&table);
        let cfg = LossConfig::default();
        let doubled = LossConfig { lambda3: 2.0, ..cfg.clone() };
        let (l, u) = ([0.5, -0.5], [0.2, 0.9]);
        let a = total_loss(&l, &u, &sample(), &ctx, &cfg).unwrap();
        let b = total_loss(&l, &u, &sample(), &ctx, &doubled).unwrap();
        let rest = |x: &LossBreakdown, c: &LossConfig| x.total - c.lambda1 * x.ce - c.lambda2 * x.hint;
        assert!((rest(&b, &doubled) - 2.0 * rest(&a, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn joint_fixed_point_is_near_zero() {
        let table = two_class_table();
        let ctx = LossContext::with_generic(&table);
        let cfg = LossConfig::default();
        let mut s = sample();
        s.teacher_emb = e(&[1.0, 0.0]);
        // teacher logits are [100, 0]; matching student logits are saturated and correct
        let b = total_loss(&[100.0, 0.0], &[1.0, 0.0], &s, &ctx, &cfg).unwrap();
        assert!(b.total < 1e-10, "{b:?}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let zero = LossConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..LossConfig::default() };
        assert!(zero.validate().is_err());
        let bad_t = LossConfig { temperature_t: 0.0, ..LossConfig::default() };
        assert!(bad_t.validate().is_err());
    }
}
