//! Accuracy evaluation and probability-averaged ensembles.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::argmax;
use crate::error::{Result, RiseError};
use crate::student::{LabeledSample, StudentModel};
use crate::teacher::TeacherTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain_accuracy: BTreeMap<String, f64>,
    /// Accuracy on the held-out domain; on the validation split when none is held out.
    pub held_out_accuracy: f64,
    pub val_accuracy_history: Vec<f64>,
    /// Zero-based index into `val_accuracy_history` of the kept snapshot.
    pub selected_epoch: usize,
}

pub fn accuracy<S: Borrow<LabeledSample>>(
    model: &StudentModel,
    table: &TeacherTable,
    samples: &[S],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(RiseError::EmptyInput("accuracy of no samples".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let s = s.borrow();
        if model.predict(&s.feature, table)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// One ensemble member: a student and the teacher table its head scores against.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleMember<'a> {
    pub model: &'a StudentModel,
    pub table: &'a TeacherTable,
}

/// Averages member softmax outputs per sample and predicts the argmax.
///
/// `target_domain` selects which domain's accuracy is reported as
/// `held_out_accuracy`; with `None` it is the accuracy over all samples.
pub fn evaluate_ensemble(
    members: &[EnsembleMember],
    samples: &[LabeledSample],
    target_domain: Option<usize>,
) -> Result<EvalReport> {
    let first = members
        .first()
        .ok_or_else(|| RiseError::EmptyInput("ensemble has no members".into()))?;
    let classes = first.model.num_classes;
    if let Some(m) = members
        .iter()
        .find(|m| m.model.num_classes != classes || m.table.num_classes() != classes)
    {
        return Err(RiseError::Config(format!(
            "ensemble members disagree on class count ({} vs {classes})",
            m.model.num_classes
        )));
    }
    if samples.is_empty() {
        return Err(RiseError::EmptyInput("ensemble evaluation on no samples".into()));
    }
    let domains = &first.table.domains;
    let mut hits = vec![(0usize, 0usize); domains.len()];
    for s in samples {
        let mut avg = vec![0.0; classes];
        for m in members {
            let p = m.model.probabilities(&s.feature, m.table)?;
            for (a, x) in avg.iter_mut().zip(&p) {
                *a += x;
            }
        }
        let entry = hits
            .get_mut(s.domain)
            .ok_or(RiseError::Index { index: s.domain, len: domains.len() })?;
        entry.1 += 1;
        if argmax(&avg) == s.label {
            entry.0 += 1;
        }
    }
    let per_domain: BTreeMap<String, f64> = domains
        .iter()
        .zip(&hits)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(name, (c, n))| (name.clone(), *c as f64 / *n as f64))
        .collect();
    let held_out_accuracy = match target_domain {
        Some(d) => {
            let (c, n) = *hits.get(d).ok_or(RiseError::Index { index: d, len: domains.len() })?;
            if n == 0 {
                return Err(RiseError::EmptyInput(format!("no samples in domain {}", domains[d])));
            }
            c as f64 / n as f64
        }
        None => {
            let (c, n) = hits.iter().fold((0, 0), |acc, h| (acc.0 + h.0, acc.1 + h.1));
            c as f64 / n as f64
        }
    };
    Ok(EvalReport {
        per_domain_accuracy: per_domain,
        held_out_accuracy,
        val_accuracy_history: Vec::new(),
        selected_epoch: 0,
    })
}
