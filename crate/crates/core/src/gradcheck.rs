//! Analytic versus central finite-difference gradients over student parameters.
//!
//! Each case isolates one loss term (or the full objective) on a small random
//! problem with a tanh trunk, so the check covers the output gradients and
//! the backward pass together.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::Embedding;
use crate::error::{Result, RiseError};
use crate::losses::{
    batch_loss, loss_gradients, AbsoluteMetric, InnerMetric, LossConfig, LossContext, OuterMetric,
};
use crate::student::{HeadMode, LabeledSample, StudentModel};
use crate::teacher::TeacherTable;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

const FEATURE_DIM: usize = 4;
const HIDDEN_DIM: usize = 5;
const TEXT_DIM: usize = 6;
const CLASSES: usize = 3;
const DOMAINS: usize = 3;
const BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub term: &'static str,
    pub variant: String,
    pub head: HeadMode,
    pub loss: LossConfig,
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.term, self.variant)
    }
}

fn only(lambdas: [f64; 3], absolute: bool, relative: bool) -> LossConfig {
    LossConfig {
        lambda1: lambdas[0],
        lambda2: lambdas[1],
        lambda3: lambdas[2],
        absolute,
        relative,
        ..LossConfig::default()
    }
}

/// Every term and metric combination the objective supports.
pub fn all_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    for head in [HeadMode::Fc, HeadMode::TextCosine] {
        let h = head_name(head);
        cases.push(GradCase {
            term: "ce",
            variant: h.into(),
            head,
            loss: only([1.0, 0.0, 0.0], false, false),
        });
        for t_squared in [false, true] {
            let mut loss = only([0.0, 1.0, 0.0], false, false);
            loss.hint_t_squared = t_squared;
            loss.temperature_t = 1.7;
            cases.push(GradCase {
                term: "hint",
                variant: format!("{h},t_squared={t_squared}"),
                head,
                loss,
            });
        }
    }
    for k in [AbsoluteMetric::Cosine, AbsoluteMetric::L1, AbsoluteMetric::L2, AbsoluteMetric::SupContrastive] {
        let mut loss = only([0.0, 0.0, 1.0], true, false);
        loss.metric_k = k;
        loss.contrastive_tau = 0.5;
        cases.push(GradCase {
            term: "ad",
            variant: format!("k={}", metric_name(&k)),
            head: HeadMode::Fc,
            loss,
        });
    }
    for k1 in [OuterMetric::Mse, OuterMetric::L1, OuterMetric::KlOnSoftmax] {
        for k2 in [InnerMetric::CosineSim, InnerMetric::L2] {
            let mut loss = only([0.0, 0.0, 1.0], false, true);
            loss.metric_k1 = k1;
            loss.metric_k2 = k2;
            cases.push(GradCase {
                term: "rd",
                variant: format!("k1={},k2={}", metric_name(&k1), metric_name(&k2)),
                head: HeadMode::Fc,
                loss,
            });
        }
    }
    for head in [HeadMode::Fc, HeadMode::TextCosine] {
        let loss = LossConfig {
            lambda1: 0.7,
            lambda2: 0.4,
            lambda3: 0.9,
            temperature_t: 2.5,
            hint_t_squared: true,
            ..LossConfig::default()
        };
        cases.push(GradCase {
            term: "total",
            variant: head_name(head).into(),
            head,
            loss,
        });
    }
    cases
}

fn head_name(h: HeadMode) -> &'static str {
    match h {
        HeadMode::Fc => "fc",
        HeadMode::TextCosine => "text_cosine",
    }
}

fn metric_name<T: Serialize>(m: &T) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Largest disagreement found for one case.
#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub worst_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    /// Trial seed, tensor name and flat index of the worst coordinate.
    pub seed: u64,
    pub tensor: String,
    pub index: usize,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub trials: usize,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| !(c.worst_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Embedding::new(v)
        .and_then(|e| e.normalized())
        .expect("gaussian draw is non-zero")
}

struct Problem {
    table: TeacherTable,
    model: StudentModel,
    samples: Vec<LabeledSample>,
}

fn random_problem(head: HeadMode, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = (0..CLASSES).map(|i| format!("c{i}")).collect();
    let domains: Vec<String> = (0..DOMAINS).map(|d| format!("d{d}")).collect();
    let generic: Vec<Embedding> = (0..CLASSES).map(|_| unit(&mut rng, TEXT_DIM)).collect();
    let anchors: Vec<Vec<Embedding>> = (0..DOMAINS)
        .map(|_| (0..CLASSES).map(|_| unit(&mut rng, TEXT_DIM)).collect())
        .collect();
    // A moderate scale keeps teacher softmaxes away from saturation.
    let table = TeacherTable::new(
        "gradcheck",
        5.0,
        classes,
        domains,
        generic,
        None,
        anchors,
    )?;
    let mut model = StudentModel::init(FEATURE_DIM, Some(HIDDEN_DIM), TEXT_DIM, CLASSES, head, seed)?;
    for b in model.tensors_mut() {
        for v in b.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let samples = (0..BATCH)
        .map(|k| LabeledSample {
            id: format!("s{k}"),
            feature: (0..FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect(),
            teacher_emb: unit(&mut rng, TEXT_DIM),
            label: rng.random_range(0..CLASSES),
            domain: rng.random_range(0..DOMAINS),
        })
        .collect();
    Ok(Problem { table, model, samples })
}

/// Worst relative error of one case at one seeded random point.
pub fn check_case(case: &GradCase, seed: u64) -> Result<CaseResult> {
    let Problem { table, mut model, samples } = random_problem(case.head, seed)?;
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let ctx = LossContext::with_generic(&table);
    let (_, grads) = loss_gradients(&batch, &model, &ctx, &case.loss)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _, _)| *n).collect();

    let mut worst = CaseResult {
        case: case.to_string(),
        worst_rel_error: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        seed,
        tensor: String::new(),
        index: 0,
        coordinates: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = model.tensors_mut()[t][i];
            model.tensors_mut()[t][i] = original + FD_STEP;
            let plus = batch_loss(&batch, &model, &ctx, &case.loss)?.total;
            model.tensors_mut()[t][i] = original - FD_STEP;
            let minus = batch_loss(&batch, &model, &ctx, &case.loss)?.total;
            model.tensors_mut()[t][i] = original;
            let n = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, n);
            worst.coordinates += 1;
            if err > worst.worst_rel_error || !err.is_finite() {
                worst.worst_rel_error = err;
                worst.analytic = a;
                worst.numeric = n;
                worst.tensor = names[t].to_string();
                worst.index = i;
            }
        }
    }
    Ok(worst)
}

/// Runs every case at `trials` seeded points starting from `seed`.
pub fn run_gradcheck(seed: u64, trials: usize, tolerance: f64) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(RiseError::Config("gradcheck needs at least one trial".into()));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(RiseError::Config("tolerance must be positive".into()));
    }
    let mut cases = Vec::new();
    for case in all_cases() {
        let mut worst: Option<CaseResult> = None;
        let mut coordinates = 0;
        for trial in 0..trials as u64 {
            let r = check_case(&case, seed.wrapping_add(trial))?;
            coordinates += r.coordinates;
            if worst
                .as_ref()
                .is_none_or(|w| r.worst_rel_error > w.worst_rel_error || !r.worst_rel_error.is_finite())
            {
                worst = Some(r);
            }
        }
        let mut worst = worst.expect("trials > 0");
        worst.coordinates = coordinates;
        cases.push(worst);
    }
    Ok(GradcheckReport { tolerance, trials, cases })
}
