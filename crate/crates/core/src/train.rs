//! Training loop, validation-based model selection and the
//! leave-one-domain-out protocol.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dims, Result, RiseError};
use crate::eval::{accuracy, EvalReport};
use crate::losses::{loss_gradients, AccessCounts, LossBreakdown, LossConfig, LossContext};
use crate::optim::{Optimizer, OptimizerKind};
use crate::student::{HeadMode, LabeledSample, StudentModel};
use crate::teacher::{supervision_targets, SupervisionSource, TeacherTable};

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Bounds of the hyperparameter search space used with `paper_range`.
pub const LAMBDA_RANGE: (f64, f64) = (0.1, 1.0);
pub const TEMPERATURE_RANGE: (f64, f64) = (1.0, 3.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub supervision_source: SupervisionSource,
    pub held_out_domain: Option<String>,
    pub head_mode: HeadMode,
    /// Width of the tanh trunk; `None` trains a purely affine projection.
    pub hidden_dim: Option<usize>,
    /// Restrict λ1..λ3 to [0.1, 1] and t to [1, 3].
    pub paper_range: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            optimizer: OptimizerKind::default(),
            lr: 1e-3,
            batch_size: 64,
            epochs: 300,
            val_fraction: 0.10,
            seed: 0,
            supervision_source: SupervisionSource::TextEnsemble,
            held_out_domain: None,
            head_mode: HeadMode::Fc,
            hidden_dim: None,
            paper_range: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RiseError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(RiseError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(RiseError::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.paper_range {
            let (lo, hi) = LAMBDA_RANGE;
            for (name, v) in [
                ("lambda1", self.loss.lambda1),
                ("lambda2", self.loss.lambda2),
                ("lambda3", self.loss.lambda3),
            ] {
                if !(lo..=hi).contains(&v) {
                    return Err(RiseError::Config(format!("{name}={v} outside [{lo}, {hi}]")));
                }
            }
            let (lo, hi) = TEMPERATURE_RANGE;
            if !(lo..=hi).contains(&self.loss.temperature_t) {
                return Err(RiseError::Config(format!(
                    "temperature_t={} outside [{lo}, {hi}]",
                    self.loss.temperature_t
                )));
            }
        }
        Ok(())
    }
}

/// Stratified (domain, class) split; each stratum gives `round(fraction·n)`
/// samples to validation. Strata with fewer than two samples stay in training.
pub fn split_train_val<'a, I>(
    samples: I,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a LabeledSample>, Vec<&'a LabeledSample>)>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RiseError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<&'a LabeledSample>> = BTreeMap::new();
    for s in samples {
        strata.entry((s.domain, s.label)).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for ((domain, label), mut members) in strata {
        if members.len() < 2 {
            warn!(
                "stratum (domain {domain}, class {label}) has {} sample(s); keeping it in training",
                members.len()
            );
            train.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_val = (fraction * members.len() as f64).round() as usize;
        let n_val = n_val.min(members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    Ok((train, val))
}

/// A trained student with its selection history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: StudentModel,
    /// Parameters after the last epoch.
    pub final_model: StudentModel,
    pub report: EvalReport,
    /// Domains that contributed samples to training, ascending.
    pub source_domains: Vec<usize>,
    pub train_size: usize,
    pub val_size: usize,
    /// Per-domain sample and anchor reads that fed a gradient.
    pub access: AccessCounts,
    /// Mean training objective of the last epoch.
    pub last_epoch_loss: LossBreakdown,
}

/// Trains one student. When `cfg.held_out_domain` is set, that domain is
/// excluded from training and validation and evaluated at the end.
pub fn train(samples: &[LabeledSample], table: &TeacherTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| RiseError::EmptyInput("no training samples".into()))?;
    let feature_dim = first.feature.len();
    for s in samples {
        check_dims(feature_dim, s.feature.len())?;
        check_dims(table.dim, s.teacher_emb.dim())?;
        if s.label >= table.num_classes() {
            return Err(RiseError::Index { index: s.label, len: table.num_classes() });
        }
        if s.domain >= table.num_domains() {
            return Err(RiseError::Index { index: s.domain, len: table.num_domains() });
        }
    }
    let held_out = cfg
        .held_out_domain
        .as_deref()
        .map(|name| {
            table
                .domain_index(name)
                .ok_or_else(|| RiseError::Config(format!("unknown held-out domain {name:?}")))
        })
        .transpose()?;

    let source = samples.iter().filter(|s| Some(s.domain) != held_out);
    let (train_split, val_split) = split_train_val(source, cfg.val_fraction, cfg.seed)?;
    if train_split.is_empty() {
        return Err(RiseError::EmptyInput("no source-domain samples to train on".into()));
    }
    let source_domains: Vec<usize> = train_split
        .iter()
        .map(|s| s.domain)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if cfg.loss.uses_relative() && source_domains.len() < 2 {
        return Err(RiseError::Config(
            "relative distance loss needs at least two source domains".into(),
        ));
    }

    let targets = if cfg.loss.uses_absolute() || cfg.loss.uses_relative() {
        supervision_targets(table, &train_split, cfg.supervision_source)?
    } else {
        table.generic.clone()
    };
    let ctx = LossContext::new(table, targets, source_domains.clone());

    let mut model = StudentModel::init(
        feature_dim,
        cfg.hidden_dim,
        table.dim,
        table.num_classes(),
        cfg.head_mode,
        cfg.seed,
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let selection_set: &[&LabeledSample] = if val_split.is_empty() {
        warn!("validation split is empty; selecting on training accuracy");
        &train_split
    } else {
        &val_split
    };

    let mut order = train_split.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, StudentModel)> = None;
    let mut last_epoch_loss = LossBreakdown::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Inputs were validated up front, so any other failure here is numeric.
            let (loss, grads) = loss_gradients(batch, &model, &ctx, &cfg.loss).map_err(|e| match e {
                e @ (RiseError::Dim { .. } | RiseError::Index { .. }) => e,
                other => RiseError::TrainingDiverged {
                    epoch,
                    batch: b,
                    message: other.to_string(),
                },
            })?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(RiseError::TrainingDiverged {
                    epoch,
                    batch: b,
                    message: format!("non-finite loss or gradient (loss {})", loss.total),
                });
            }
            opt.step(&mut model, &grads);
            if !model.all_finite() {
                return Err(RiseError::TrainingDiverged {
                    epoch,
                    batch: b,
                    message: "non-finite parameters after update".into(),
                });
            }
            let w = batch.len() as f64 / order.len() as f64;
            epoch_loss.ce += w * loss.ce;
            epoch_loss.hint += w * loss.hint;
            epoch_loss.ad += w * loss.ad;
            epoch_loss.rd += w * loss.rd;
            epoch_loss.total += w * loss.total;
        }
        last_epoch_loss = epoch_loss;
        let val_acc = accuracy(&model, table, selection_set)?;
        history.push(val_acc);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }

    let final_model = model;
    let (best_val, selected_epoch, model) = best.expect("at least one epoch");
    let mut per_domain = BTreeMap::new();
    for (d, name) in table.domains.iter().enumerate() {
        let members: Vec<&LabeledSample> = samples.iter().filter(|s| s.domain == d).collect();
        if !members.is_empty() {
            per_domain.insert(name.clone(), accuracy(&model, table, &members)?);
        }
    }
    let held_out_accuracy = match held_out {
        Some(d) => {
            let members: Vec<&LabeledSample> = samples.iter().filter(|s| s.domain == d).collect();
            if members.is_empty() {
                return Err(RiseError::EmptyInput(format!(
                    "held-out domain {} has no samples",
                    table.domains[d]
                )));
            }
            accuracy(&model, table, &members)?
        }
        None => best_val,
    };

    Ok(TrainOutcome {
        model,
        final_model,
        report: EvalReport {
            per_domain_accuracy: per_domain,
            held_out_accuracy,
            val_accuracy_history: history,
            selected_epoch,
        },
        source_domains,
        train_size: train_split.len(),
        val_size: val_split.len(),
        access: ctx.access.snapshot(),
        last_epoch_loss,
    })
}

/// Trains on every domain but `target_domain` and reports accuracy on it.
pub fn leave_one_domain_out(
    dataset: &Dataset,
    table: &TeacherTable,
    cfg: &TrainConfig,
    target_domain: &str,
) -> Result<TrainOutcome> {
    if dataset.domain_index(target_domain).is_none() {
        return Err(RiseError::Config(format!("unknown target domain {target_domain:?}")));
    }
    dataset.check_vocabulary(table)?;
    let cfg = TrainConfig {
        held_out_domain: Some(target_domain.to_string()),
        ..cfg.clone()
    };
    train(&dataset.samples, table, &cfg)
}
