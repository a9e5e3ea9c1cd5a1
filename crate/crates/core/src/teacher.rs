//! The frozen teacher: class text embeddings, domain anchors and zero-shot scoring.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, mean_embedding, softmax_with_temperature, Embedding, ProbVector};
use crate::error::{check_dims, Result, RiseError};
use crate::student::LabeledSample;

pub const TEACHER_FORMAT: &str = "rise-teacher-v1";
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Frozen per-class and per-(domain, class) text embeddings of one teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTable {
    pub dim: usize,
    pub teacher_id: String,
    pub logit_scale: f64,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    /// Prompt-ensemble embedding per class.
    pub generic: Vec<Embedding>,
    /// Single-template embedding per class, when exported.
    pub generic_single: Option<Vec<Embedding>>,
    /// `anchors[domain][class]`.
    pub anchors: Vec<Vec<Embedding>>,
}

/// Which embedding the distance regularizers pull the student towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionSource {
    #[default]
    TextEnsemble,
    TextSingle,
    ImageMean,
}

impl TeacherTable {
    /// Builds a table and checks every structural invariant.
    pub fn new(
        teacher_id: impl Into<String>,
        logit_scale: f64,
        classes: Vec<String>,
        domains: Vec<String>,
        generic: Vec<Embedding>,
        generic_single: Option<Vec<Embedding>>,
        anchors: Vec<Vec<Embedding>>,
    ) -> Result<Self> {
        let dim = generic
            .first()
            .ok_or_else(|| RiseError::EmptyInput("teacher table has no classes".into()))?
            .dim();
        let table = TeacherTable {
            dim,
            teacher_id: teacher_id.into(),
            logit_scale,
            classes,
            domains,
            generic,
            generic_single,
            anchors,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn anchor(&self, domain: usize, class: usize) -> &Embedding {
        &self.anchors[domain][class]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(RiseError::Config(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if self.classes.is_empty() {
            return Err(RiseError::EmptyInput("teacher table has no classes".into()));
        }
        check_dims(self.classes.len(), self.generic.len())?;
        let check = |e: &Embedding| -> Result<()> {
            check_dims(self.dim, e.dim())?;
            if e.norm() == 0.0 {
                return Err(RiseError::DegenerateVector("zero-norm teacher embedding".into()));
            }
            Ok(())
        };
        self.generic.iter().try_for_each(check)?;
        if let Some(single) = &self.generic_single {
            check_dims(self.classes.len(), single.len())?;
            single.iter().try_for_each(check)?;
        }
        check_dims(self.domains.len(), self.anchors.len())?;
        for row in &self.anchors {
            check_dims(self.classes.len(), row.len())?;
            row.iter().try_for_each(check)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| RiseError::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| match e {
            RiseError::Io { source, .. } => RiseError::io(path, source),
            other => other,
        })
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| RiseError::io("<teacher table>", e))?;
                serde_json::from_str(&line)
                    .map_err(|e| RiseError::format(1, "header", e.to_string()))?
            }
            None => return Err(RiseError::format(1, "header", "empty file")),
        };
        if header.format != TEACHER_FORMAT {
            return Err(RiseError::format(
                1,
                "format",
                format!("expected {TEACHER_FORMAT}, found {}", header.format),
            ));
        }
        if header.dim == 0 {
            return Err(RiseError::format(1, "dim", "dimension must be positive"));
        }
        if header.classes.is_empty() {
            return Err(RiseError::format(1, "classes", "no classes declared"));
        }
        let class_ix: HashMap<&str, usize> =
            header.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let domain_ix: HashMap<&str, usize> =
            header.domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let (nc, nd) = (header.classes.len(), header.domains.len());

        let mut generic: Vec<Option<Embedding>> = vec![None; nc];
        let mut single: Vec<Option<Embedding>> = vec![None; nc];
        let mut anchors: Vec<Vec<Option<Embedding>>> = vec![vec![None; nc]; nd];

        for (ix, line) in lines {
            let lineno = ix + 1;
            let line = line.map_err(|e| RiseError::io("<teacher table>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| RiseError::format(lineno, "record", e.to_string()))?;
            let lookup_class = |name: &str, key: &str| {
                class_ix
                    .get(name)
                    .copied()
                    .ok_or_else(|| RiseError::format(lineno, key, format!("unknown class {name:?}")))
            };
            let (slot, key, vec) = match record {
                Record::Generic { class, vec } => {
                    let key = format!("generic:{class}");
                    let i = lookup_class(&class, &key)?;
                    (&mut generic[i], key, vec)
                }
                Record::GenericSingle { class, vec } => {
                    let key = format!("generic_single:{class}");
                    let i = lookup_class(&class, &key)?;
                    (&mut single[i], key, vec)
                }
                Record::Anchor { domain, class, vec } => {
                    let key = format!("({domain},{class})");
                    let i = lookup_class(&class, &key)?;
                    let d = domain_ix.get(domain.as_str()).copied().ok_or_else(|| {
                        RiseError::format(lineno, &key, format!("unknown domain {domain:?}"))
                    })?;
                    (&mut anchors[d][i], key, vec)
                }
            };
            if vec.len() != header.dim {
                return Err(RiseError::format(
                    lineno,
                    key,
                    format!("vector has length {}, header dim is {}", vec.len(), header.dim),
                ));
            }
            let emb = Embedding::new(vec).map_err(|e| RiseError::format(lineno, &key, e.to_string()))?;
            if emb.norm() == 0.0 {
                return Err(RiseError::format(lineno, key, "zero-norm vector"));
            }
            if slot.is_some() {
                return Err(RiseError::format(lineno, key, "duplicate record"));
            }
            *slot = Some(emb);
        }

        let generic = collect_complete(generic, |i| format!("generic:{}", header.classes[i]))?;
        let generic_single = if single.iter().all(Option::is_none) {
            None
        } else {
            Some(collect_complete(single, |i| {
                format!("generic_single:{}", header.classes[i])
            })?)
        };
        let anchors = anchors
            .into_iter()
            .enumerate()
            .map(|(d, row)| {
                collect_complete(row, |i| format!("({},{})", header.domains[d], header.classes[i]))
            })
            .collect::<Result<Vec<_>>>()?;

        TeacherTable::new(
            header.teacher_id,
            header.logit_scale,
            header.classes,
            header.domains,
            generic,
            generic_single,
            anchors,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| RiseError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| RiseError::io(path, e))?;
        w.flush().map_err(|e| RiseError::io(path, e))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            format: TEACHER_FORMAT.to_string(),
            dim: self.dim,
            teacher_id: self.teacher_id.clone(),
            logit_scale: self.logit_scale,
            classes: self.classes.clone(),
            domains: self.domains.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for (class, vec) in self.classes.iter().zip(&self.generic) {
            let rec = Record::Generic { class: class.clone(), vec: vec.to_vec() };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        if let Some(single) = &self.generic_single {
            for (class, vec) in self.classes.iter().zip(single) {
                let rec = Record::GenericSingle { class: class.clone(), vec: vec.to_vec() };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        for (domain, row) in self.domains.iter().zip(&self.anchors) {
            for (class, vec) in self.classes.iter().zip(row) {
                let rec = Record::Anchor {
                    domain: domain.clone(),
                    class: class.clone(),
                    vec: vec.to_vec(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        Ok(())
    }
}

fn collect_complete(
    slots: Vec<Option<Embedding>>,
    key: impl Fn(usize) -> String,
) -> Result<Vec<Embedding>> {
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| RiseError::format(0, key(i), "missing record")))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    dim: usize,
    teacher_id: String,
    #[serde(default = "default_logit_scale")]
    logit_scale: f64,
    classes: Vec<String>,
    domains: Vec<String>,
}

fn default_logit_scale() -> f64 {
    DEFAULT_LOGIT_SCALE
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Generic { class: String, vec: Vec<f64> },
    GenericSingle { class: String, vec: Vec<f64> },
    Anchor { domain: String, class: String, vec: Vec<f64> },
}

/// Zero-shot logits: `logit_scale · cos(image, generic[i])` for every class.
pub fn teacher_logits(img_emb: &[f64], table: &TeacherTable) -> Result<Vec<f64>> {
    check_dims(table.dim, img_emb.len())?;
    table
        .generic
        .iter()
        .map(|g| Ok(table.logit_scale * cosine_similarity(img_emb, g)?))
        .collect()
}

pub fn teacher_soft_targets(logits: &[f64], t: f64) -> Result<ProbVector> {
    softmax_with_temperature(logits, t)
}

/// The embedding the distance losses target for one class.
///
/// `ImageMean` averages the teacher image embeddings of every sample of the
/// class in `samples`, so callers pass the training split only.
pub fn supervision_target<S: Borrow<LabeledSample>>(
    table: &TeacherTable,
    samples: &[S],
    class: usize,
    source: SupervisionSource,
) -> Result<Embedding> {
    if class >= table.num_classes() {
        return Err(RiseError::Index { index: class, len: table.num_classes() });
    }
    match source {
        SupervisionSource::TextEnsemble => Ok(table.generic[class].clone()),
        SupervisionSource::TextSingle => table
            .generic_single
            .as_ref()
            .map(|s| s[class].clone())
            .ok_or_else(|| {
                RiseError::Config("single-template embeddings are absent from the teacher table".into())
            }),
        SupervisionSource::ImageMean => {
            let embs: Vec<&[f64]> = samples
                .iter()
                .map(Borrow::borrow)
                .filter(|s| s.label == class)
                .map(|s| s.teacher_emb.as_slice())
                .collect();
            if embs.is_empty() {
                return Err(RiseError::EmptyInput(format!(
                    "no samples of class {} for an image-mean target",
                    table.classes[class]
                )));
            }
            mean_embedding(&embs)
        }
    }
}

/// [`supervision_target`] for every class, in class order.
pub fn supervision_targets<S: Borrow<LabeledSample>>(
    table: &TeacherTable,
    samples: &[S],
    source: SupervisionSource,
) -> Result<Vec<Embedding>> {
    (0..table.num_classes())
        .map(|i| supervision_target(table, samples, i, source))
        .collect()
}
