//! Ablation sweeps: variant × target domain × seed cells run through
//! leave-one-domain-out, plus the canned suites and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, RiseError};
use crate::eval::{evaluate_ensemble, EnsembleMember};
use crate::losses::{AbsoluteMetric, OuterMetric};
use crate::teacher::{SupervisionSource, TeacherTable};
use crate::train::{leave_one_domain_out, TrainConfig};

/// Seed offset between students of one ensemble cell.
pub const MEMBER_SEED_STRIDE: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VariantKind {
    /// One student distilled from `tables[teacher]`.
    Single { teacher: usize },
    /// One student per listed teacher index, evaluated as a probability average.
    /// Repeating an index trains extra students from the same teacher.
    Ensemble { members: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
    pub kind: VariantKind,
}

impl Variant {
    pub fn single(name: impl Into<String>, config: TrainConfig) -> Self {
        Variant {
            name: name.into(),
            config,
            kind: VariantKind::Single { teacher: 0 },
        }
    }

    fn teachers(&self) -> Vec<usize> {
        match &self.kind {
            VariantKind::Single { teacher } => vec![*teacher],
            VariantKind::Ensemble { members } => members.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Losses,
    Metrics,
    Templates,
    Supervision,
    Mix,
}

impl FromStr for Suite {
    type Err = RiseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Suite::Losses),
            "metrics" => Ok(Suite::Metrics),
            "templates" => Ok(Suite::Templates),
            "supervision" => Ok(Suite::Supervision),
            "mix" => Ok(Suite::Mix),
            other => Err(RiseError::Config(format!(
                "unknown suite {other:?} (expected losses, metrics, templates, supervision or mix)"
            ))),
        }
    }
}

fn with_terms(base: &TrainConfig, hint: bool, ad: bool, rd: bool) -> TrainConfig {
    let mut cfg = base.clone();
    if !hint {
        cfg.loss.lambda2 = 0.0;
    }
    cfg.loss.absolute = ad;
    cfg.loss.relative = rd;
    if !ad && !rd {
        cfg.loss.lambda3 = 0.0;
    }
    cfg
}

/// Rows of a canned suite, each derived from `base`.
pub fn suite_variants(suite: Suite, base: &TrainConfig, num_teachers: usize) -> Result<Vec<Variant>> {
    let row = |name: &str, cfg: TrainConfig| Variant::single(name, cfg);
    let variants = match suite {
        Suite::Losses => vec![
            row("ERM", with_terms(base, false, false, false)),
            row("ERM + Hint", with_terms(base, true, false, false)),
            row("ERM + AD", with_terms(base, false, true, false)),
            row("ERM + RD", with_terms(base, false, false, true)),
            row("ERM + Hint + AD", with_terms(base, true, true, false)),
            row("ERM + Hint + RD", with_terms(base, true, false, true)),
            row("ERM + Hint + AD + RD", with_terms(base, true, true, true)),
        ],
        Suite::Metrics => {
            let mut rows = Vec::new();
            for (label, k) in [
                ("CosineSimilarity", AbsoluteMetric::Cosine),
                ("Supervised Contrastive", AbsoluteMetric::SupContrastive),
                ("L1", AbsoluteMetric::L1),
                ("L2", AbsoluteMetric::L2),
            ] {
                let mut cfg = with_terms(base, true, true, false);
                cfg.loss.metric_k = k;
                rows.push(row(&format!("ERM + Hint + AD / {label}"), cfg));
            }
            for (label, k1) in [
                ("KL", OuterMetric::KlOnSoftmax),
                ("L1", OuterMetric::L1),
                ("L2", OuterMetric::Mse),
            ] {
                let mut cfg = with_terms(base, true, false, true);
                cfg.loss.metric_k1 = k1;
                rows.push(row(&format!("ERM + Hint + RD / {label}"), cfg));
            }
            rows
        }
        Suite::Templates | Suite::Supervision => {
            let sources = if suite == Suite::Templates {
                [("single template", SupervisionSource::TextSingle), ("ensemble template", SupervisionSource::TextEnsemble)]
            } else {
                [("image", SupervisionSource::ImageMean), ("text", SupervisionSource::TextEnsemble)]
            };
            let mut rows = Vec::new();
            for (term, ad, rd) in [("AD", true, false), ("RD", false, true)] {
                for (label, source) in sources {
                    let mut cfg = with_terms(base, true, ad, rd);
                    cfg.supervision_source = source;
                    rows.push(row(&format!("ERM + Hint + {term} / {label}"), cfg));
                }
            }
            rows
        }
        Suite::Mix => {
            if num_teachers < 2 {
                return Err(RiseError::Config("mix suite needs two teacher tables".into()));
            }
            vec![
                Variant { name: "teacher A".into(), config: base.clone(), kind: VariantKind::Single { teacher: 0 } },
                Variant { name: "teacher B".into(), config: base.clone(), kind: VariantKind::Single { teacher: 1 } },
                Variant {
                    name: "Mix Teacher (A + B)".into(),
                    config: base.clone(),
                    kind: VariantKind::Ensemble { members: vec![0, 1] },
                },
                Variant {
                    name: "two students of A".into(),
                    config: base.clone(),
                    kind: VariantKind::Ensemble { members: vec![0, 0] },
                },
            ]
        }
    };
    Ok(variants)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: String,
    pub target_domain: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Selected epoch of each member, in member order.
    pub selected_epoch: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Mean over seeds per target domain.
    pub per_domain: BTreeMap<String, f64>,
    /// Mean over every cell of the variant.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<CellRecord>,
    pub summary: Vec<VariantSummary>,
}

impl SweepReport {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.mean)
    }

    /// One JSON object per cell followed by a summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({ "summary": self.summary });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// Aligned table: one row per variant, one column per target domain, then the mean.
    pub fn to_table(&self) -> String {
        let domains: Vec<String> = self
            .summary
            .first()
            .map(|s| s.per_domain.keys().cloned().collect())
            .unwrap_or_default();
        let name_w = self.summary.iter().map(|s| s.variant.len()).max().unwrap_or(0).max(6);
        let col_w = domains.iter().map(|d| d.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "Method");
        for d in &domains {
            let _ = write!(out, "  {d:>col_w$}");
        }
        let _ = writeln!(out, "  {:>col_w$}", "Avg");
        for s in &self.summary {
            let _ = write!(out, "{:<name_w$}", s.variant);
            for d in &domains {
                let v = s.per_domain.get(d).copied().unwrap_or(f64::NAN);
                let _ = write!(out, "  {:>col_w$.1}", 100.0 * v);
            }
            let _ = writeln!(out, "  {:>col_w$.1}", 100.0 * s.mean);
        }
        out
    }
}

struct Cell<'a> {
    variant: &'a Variant,
    target: &'a str,
    seed: u64,
}

fn run_cell(dataset: &Dataset, tables: &[TeacherTable], cell: &Cell) -> Result<CellRecord> {
    let target_ix = dataset
        .domain_index(cell.target)
        .ok_or_else(|| RiseError::Config(format!("unknown target domain {:?}", cell.target)))?;
    let teachers = cell.variant.teachers();
    let mut outcomes = Vec::with_capacity(teachers.len());
    for (k, &t) in teachers.iter().enumerate() {
        let table = tables
            .get(t)
            .ok_or(RiseError::Index { index: t, len: tables.len() })?;
        let cfg = TrainConfig {
            seed: cell.seed.wrapping_add(k as u64 * MEMBER_SEED_STRIDE),
            ..cell.variant.config.clone()
        };
        outcomes.push((leave_one_domain_out(dataset, table, &cfg, cell.target)?, table));
    }
    let accuracy = if let [(single, _)] = outcomes.as_slice() {
        single.report.held_out_accuracy
    } else {
        let members: Vec<EnsembleMember> = outcomes
            .iter()
            .map(|(o, table)| EnsembleMember { model: &o.model, table })
            .collect();
        let target: Vec<_> = dataset.samples.iter().filter(|s| s.domain == target_ix).cloned().collect();
        evaluate_ensemble(&members, &target, Some(target_ix))?.held_out_accuracy
    };
    Ok(CellRecord {
        variant: cell.variant.name.clone(),
        target_domain: cell.target.to_string(),
        seed: cell.seed,
        accuracy,
        selected_epoch: outcomes.iter().map(|(o, _)| o.report.selected_epoch).collect(),
    })
}

/// Runs every (variant, target domain, seed) cell; records come back in that order.
///
/// `jobs` sizes the worker pool; `None` uses rayon's global pool.
pub fn ablation_sweep(
    dataset: &Dataset,
    tables: &[TeacherTable],
    grid: &[Variant],
    seeds: &[u64],
    jobs: Option<usize>,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(RiseError::Config("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(RiseError::Config("no seeds given".into()));
    }
    if tables.is_empty() {
        return Err(RiseError::Config("no teacher tables given".into()));
    }
    for t in tables {
        dataset.check_vocabulary(t)?;
    }
    let cells: Vec<Cell> = grid
        .iter()
        .flat_map(|variant| {
            dataset.domains.iter().flat_map(move |target| {
                seeds.iter().map(move |&seed| Cell { variant, target, seed })
            })
        })
        .collect();
    let run = || -> Result<Vec<CellRecord>> {
        cells.par_iter().map(|c| run_cell(dataset, tables, c)).collect()
    };
    let records = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| RiseError::Config(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let mut summary = Vec::with_capacity(grid.len());
    for v in grid {
        let mine: Vec<&CellRecord> = records.iter().filter(|r| r.variant == v.name).collect();
        let mut per_domain = BTreeMap::new();
        for d in &dataset.domains {
            let accs: Vec<f64> = mine.iter().filter(|r| &r.target_domain == d).map(|r| r.accuracy).collect();
            per_domain.insert(d.clone(), accs.iter().sum::<f64>() / accs.len() as f64);
        }
        let mean = mine.iter().map(|r| r.accuracy).sum::<f64>() / mine.len() as f64;
        summary.push(VariantSummary {
            variant: v.name.clone(),
            per_domain,
            mean,
        });
    }
    Ok(SweepReport { records, summary })
}
