//! Dataset files and zero-shot teacher scoring.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{argmax, Embedding};
use crate::error::{Result, RiseError};
use crate::student::LabeledSample;
use crate::teacher::{teacher_logits, TeacherTable};

pub const DATA_FORMAT: &str = "rise-data-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub text_dim: usize,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Samples of one domain, in file order.
    pub fn domain_samples(&self, domain: usize) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.domain == domain).collect()
    }

    /// Checks that class and domain vocabularies match the teacher table exactly.
    pub fn check_vocabulary(&self, table: &TeacherTable) -> Result<()> {
        if self.classes != table.classes {
            return Err(RiseError::Config(format!(
                "class vocabulary differs between dataset {:?} and teacher {:?}",
                self.classes, table.classes
            )));
        }
        if self.domains != table.domains {
            return Err(RiseError::Config(format!(
                "domain vocabulary differs between dataset {:?} and teacher {:?}",
                self.domains, table.domains
            )));
        }
        if self.text_dim != table.dim {
            return Err(RiseError::dim(table.dim, self.text_dim));
        }
        Ok(())
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
            format: DATA_FORMAT.into(),
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            classes: self.classes.clone(),
            domains: self.domains.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for s in &self.samples {
            let rec = SampleRecord {
                id: s.id.clone(),
                class: self.classes[s.label].clone(),
                domain: self.domains[s.domain].clone(),
                feature: s.feature.clone(),
                teacher_emb: s.teacher_emb.to_vec(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
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
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| RiseError::format(1, "header", "empty file"))?
            .map_err(|e| RiseError::io("<dataset>", e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| RiseError::format(1, "header", e.to_string()))?;
        if header.format != DATA_FORMAT {
            return Err(RiseError::format(
                1,
                "format",
                format!("expected {DATA_FORMAT}, found {}", header.format),
            ));
        }
        if header.feature_dim == 0 || header.text_dim == 0 {
            return Err(RiseError::format(1, "header", "dimensions must be positive"));
        }
        let class_ix: HashMap<&str, usize> =
            header.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let domain_ix: HashMap<&str, usize> =
            header.domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();

        let mut seen = HashSet::new();
        let mut samples = Vec::new();
        for (ix, line) in lines.enumerate() {
            let lineno = ix + 2;
            let line = line.map_err(|e| RiseError::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| RiseError::format(lineno, "sample", e.to_string()))?;
            let key = format!("sample {}", rec.id);
            let label = *class_ix
                .get(rec.class.as_str())
                .ok_or_else(|| RiseError::format(lineno, &key, format!("unknown class {:?}", rec.class)))?;
            let domain = *domain_ix.get(rec.domain.as_str()).ok_or_else(|| {
                RiseError::format(lineno, &key, format!("unknown domain {:?}", rec.domain))
            })?;
            if rec.feature.len() != header.feature_dim {
                return Err(RiseError::format(
                    lineno,
                    &key,
                    format!("feature has length {}, header feature_dim is {}", rec.feature.len(), header.feature_dim),
                ));
            }
            if rec.teacher_emb.len() != header.text_dim {
                return Err(RiseError::format(
                    lineno,
                    &key,
                    format!("teacher_emb has length {}, header text_dim is {}", rec.teacher_emb.len(), header.text_dim),
                ));
            }
            if rec.feature.iter().any(|v| !v.is_finite()) {
                return Err(RiseError::format(lineno, &key, "non-finite feature"));
            }
            let teacher_emb =
                Embedding::new(rec.teacher_emb).map_err(|e| RiseError::format(lineno, &key, e.to_string()))?;
            if !seen.insert(rec.id.clone()) {
                return Err(RiseError::format(lineno, &key, "duplicate sample id"));
            }
            samples.push(LabeledSample {
                id: rec.id,
                feature: rec.feature,
                teacher_emb,
                label,
                domain,
            });
        }
        Ok(Dataset {
            feature_dim: header.feature_dim,
            text_dim: header.text_dim,
            classes: header.classes,
            domains: header.domains,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    feature_dim: usize,
    text_dim: usize,
    classes: Vec<String>,
    domains: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    class: String,
    domain: String,
    feature: Vec<f64>,
    teacher_emb: Vec<f64>,
}

/// Fraction of samples whose zero-shot teacher prediction equals the label.
pub fn zero_shot_teacher_accuracy(samples: &[LabeledSample], table: &TeacherTable) -> Result<f64> {
    if samples.is_empty() {
        return Err(RiseError::EmptyInput("zero-shot accuracy of no samples".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&teacher_logits(&s.teacher_emb, table)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
