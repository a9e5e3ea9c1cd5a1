//! Synthetic multi-domain benchmark with known class prototypes.
//!
//! Class prototypes `c_i` play the role of domain-invariant text embeddings.
//! Each domain `d` owns a unit direction `a_d`; a sample of class `i` in
//! domain `d` has teacher image embedding `normalize(c_i + β·a_d + σ·ε)` and
//! student feature `M·t` (or `tanh(M·t)`), with `M` a fixed random map. The
//! held-out domain's direction never appears in training, so a student that
//! keys on source-domain directions degrades while one pulled towards `c_i`
//! does not.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::{dot, norm, Embedding};
use crate::error::{Result, RiseError};
use crate::student::LabeledSample;
use crate::teacher::TeacherTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Linear,
    #[default]
    TanhMix,
}

pub const SYNTH_LOGIT_SCALE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_classes: usize,
    pub num_domains: usize,
    pub text_dim: usize,
    pub feature_dim: usize,
    pub samples_per_cell: usize,
    /// β: strength of the per-domain shift in teacher image embeddings.
    pub domain_shift_strength: f64,
    /// α: offset of each anchor from its class prototype.
    pub anchor_offset_strength: f64,
    /// σ: isotropic per-coordinate noise.
    pub noise_sigma: f64,
    pub nonlinearity: Nonlinearity,
    /// Scale of the mixing map entries, which are drawn from N(0, gain²).
    pub mixing_gain: f64,
    /// Logit scale recorded in the generated teacher table. Kept well below the
    /// usual 100 so the teacher's softened distribution carries more than the argmax.
    pub teacher_logit_scale: f64,
    /// Orthonormalize prototypes (requires `num_classes <= text_dim`).
    pub orthogonal_prototypes: bool,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_classes: 5,
            num_domains: 4,
            text_dim: 32,
            feature_dim: 64,
            samples_per_cell: 100,
            domain_shift_strength: 0.8,
            anchor_offset_strength: 0.5,
            noise_sigma: 0.15,
            nonlinearity: Nonlinearity::TanhMix,
            mixing_gain: 1.0,
            teacher_logit_scale: SYNTH_LOGIT_SCALE,
            orthogonal_prototypes: true,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.num_domains == 0
            || self.text_dim == 0
            || self.feature_dim == 0
            || self.samples_per_cell == 0
        {
            return Err(RiseError::Config("synthetic counts and dimensions must be positive".into()));
        }
        for (name, v) in [
            ("domain_shift_strength", self.domain_shift_strength),
            ("anchor_offset_strength", self.anchor_offset_strength),
            ("noise_sigma", self.noise_sigma),
            ("mixing_gain", self.mixing_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RiseError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.teacher_logit_scale.is_finite() && self.teacher_logit_scale > 0.0) {
            return Err(RiseError::Config("teacher_logit_scale must be finite and positive".into()));
        }
        if self.orthogonal_prototypes && self.num_classes > self.text_dim {
            return Err(RiseError::Config(format!(
                "cannot draw {} orthogonal prototypes in dimension {}",
                self.num_classes, self.text_dim
            )));
        }
        Ok(())
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub dataset: Dataset,
    pub teacher: TeacherTable,
    /// Class prototypes `c_i`.
    pub ground_truth: Vec<Embedding>,
    /// Unit domain directions `a_d`.
    pub domain_directions: Vec<Embedding>,
    pub params: SynthParams,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Result<Embedding> {
    Embedding::new(v)?.normalized()
}

fn add_scaled(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Embedding>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim);
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.into_iter().map(Embedding::new).collect()
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

pub fn domain_names(n: usize) -> Vec<String> {
    (0..n).map(|d| format!("domain{d}")).collect()
}

/// Anchors `normalize(c_i + α·a_d)` and the single-template embeddings.
///
/// The single template plays "a photo of a {class}": it is biased towards
/// domain 0 exactly like that domain's anchor.
fn text_side(
    generic: &[Embedding],
    directions: &[Embedding],
    alpha: f64,
) -> Result<(Vec<Vec<Embedding>>, Vec<Embedding>)> {
    let anchors = directions
        .iter()
        .map(|a| generic.iter().map(|c| unit(add_scaled(c, alpha, a))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let single = generic
        .iter()
        .map(|c| unit(add_scaled(c, alpha, &directions[0])))
        .collect::<Result<Vec<_>>>()?;
    Ok((anchors, single))
}

pub fn generate_synthetic(p: &SynthParams) -> Result<SyntheticBenchmark> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (c, nd, d, f) = (p.num_classes, p.num_domains, p.text_dim, p.feature_dim);

    let prototypes = if p.orthogonal_prototypes {
        orthonormal_set(&mut rng, c, d)?
    } else {
        (0..c).map(|_| unit(gaussian_vec(&mut rng, d))).collect::<Result<Vec<_>>>()?
    };
    let directions = (0..nd)
        .map(|_| unit(gaussian_vec(&mut rng, d)))
        .collect::<Result<Vec<_>>>()?;
    // mixing map, row-major f × d
    let mixing: Vec<f64> = gaussian_vec(&mut rng, f * d).into_iter().map(|x| p.mixing_gain * x).collect();

    let classes = class_names(c);
    let domains = domain_names(nd);
    let (anchors, single) = text_side(&prototypes, &directions, p.anchor_offset_strength)?;
    let teacher = TeacherTable::new(
        "synthetic",
        p.teacher_logit_scale,
        classes.clone(),
        domains.clone(),
        prototypes.clone(),
        Some(single),
        anchors,
    )?;

    let mut samples = Vec::with_capacity(c * nd * p.samples_per_cell);
    for (di, a) in directions.iter().enumerate() {
        for (ci, proto) in prototypes.iter().enumerate() {
            for k in 0..p.samples_per_cell {
                let noise = gaussian_vec(&mut rng, d);
                let raw: Vec<f64> = proto
                    .iter()
                    .zip(a.iter())
                    .zip(&noise)
                    .map(|((x, y), e)| x + p.domain_shift_strength * y + p.noise_sigma * e)
                    .collect();
                let teacher_emb = unit(raw)?;
                let mixed = mixing.chunks_exact(d).map(|row| dot(row, &teacher_emb));
                let feature = match p.nonlinearity {
                    Nonlinearity::Linear => mixed.collect(),
                    Nonlinearity::TanhMix => mixed.map(f64::tanh).collect(),
                };
                samples.push(LabeledSample {
                    id: format!("{}-{}-{k:04}", domains[di], classes[ci]),
                    feature,
                    teacher_emb,
                    label: ci,
                    domain: di,
                });
            }
        }
    }

    Ok(SyntheticBenchmark {
        dataset: Dataset {
            feature_dim: f,
            text_dim: d,
            classes,
            domains,
            samples,
        },
        teacher,
        ground_truth: prototypes,
        domain_directions: directions,
        params: p.clone(),
    })
}

impl SyntheticBenchmark {
    /// A second teacher whose class embeddings are the prototypes perturbed by
    /// Gaussian noise of per-coordinate scale `strength / sqrt(text_dim)`.
    pub fn perturbed_teacher(&self, teacher_id: &str, strength: f64, seed: u64) -> Result<TeacherTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = strength / (self.params.text_dim as f64).sqrt();
        let generic = self
            .ground_truth
            .iter()
            .map(|c| {
                let noise = gaussian_vec(&mut rng, c.dim());
                unit(add_scaled(c, scale, &noise))
            })
            .collect::<Result<Vec<_>>>()?;
        let (anchors, single) =
            text_side(&generic, &self.domain_directions, self.params.anchor_offset_strength)?;
        TeacherTable::new(
            teacher_id,
            self.teacher.logit_scale,
            self.teacher.classes.clone(),
            self.teacher.domains.clone(),
            generic,
            Some(single),
            anchors,
        )
    }
}

pub const GROUND_TRUTH_FORMAT: &str = "rise-ground-truth-v1";

#[derive(Serialize, Deserialize)]
struct GroundTruthHeader {
    format: String,
    dim: usize,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    class: String,
    vec: Vec<f64>,
}

pub fn write_ground_truth(path: impl AsRef<Path>, classes: &[String], protos: &[Embedding]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| RiseError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = GroundTruthHeader {
        format: GROUND_TRUTH_FORMAT.into(),
        dim: protos.first().map_or(0, |p| p.dim()),
        classes: classes.to_vec(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| io(e.into()))?).map_err(io)?;
    for (class, v) in classes.iter().zip(protos) {
        let rec = GroundTruthRecord { class: class.clone(), vec: v.to_vec() };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| io(e.into()))?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Embedding>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RiseError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: GroundTruthHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| RiseError::io(path, e))?)
            .map_err(|e| RiseError::format(1, "header", e.to_string()))?,
        None => return Err(RiseError::format(1, "header", "empty file")),
    };
    if header.format != GROUND_TRUTH_FORMAT {
        return Err(RiseError::format(1, "format", format!("expected {GROUND_TRUTH_FORMAT}")));
    }
    let mut protos = Vec::new();
    for (ix, line) in lines.enumerate() {
        let line = line.map_err(|e| RiseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(&line)
            .map_err(|e| RiseError::format(ix + 2, "record", e.to_string()))?;
        let expected = header.classes.get(protos.len()).map(String::as_str);
        if expected != Some(rec.class.as_str()) || rec.vec.len() != header.dim {
            return Err(RiseError::format(ix + 2, &rec.class, "out-of-order class or wrong dimension"));
        }
        protos.push(Embedding::new(rec.vec).map_err(|e| RiseError::format(ix + 2, &rec.class, e.to_string()))?);
    }
    if protos.len() != header.classes.len() {
        return Err(RiseError::format(0, "records", "missing ground-truth records"));
    }
    Ok((header.classes, protos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::zero_shot_teacher_accuracy;
    use crate::losses::{relative_distance_loss, InnerMetric, OuterMetric};

    fn small() -> SynthParams {
        SynthParams {
            num_classes: 3,
            num_domains: 3,
            text_dim: 8,
            feature_dim: 10,
            samples_per_cell: 4,
            ..SynthParams::default()
        }
    }

    #[test]
    fn noise_free_teacher_is_perfect() {
        let p = SynthParams { noise_sigma: 0.0, domain_shift_strength: 0.0, ..small() };
        let b = generate_synthetic(&p).unwrap();
        for s in &b.dataset.samples {
            for (x, y) in s.teacher_emb.iter().zip(b.ground_truth[s.label].iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(zero_shot_teacher_accuracy(&b.dataset.samples, &b.teacher).unwrap(), 1.0);
    }

    #[test]
    fn zero_alpha_anchors_coincide() {
        let p = SynthParams { anchor_offset_strength: 0.0, ..small() };
        let b = generate_synthetic(&p).unwrap();
        for row in &b.teacher.anchors {
            for (a, g) in row.iter().zip(&b.teacher.generic) {
                for (x, y) in a.iter().zip(g.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let c0 = &b.ground_truth[0];
        let anchors: Vec<&Embedding> = b.teacher.anchors.iter().map(|r| &r[0]).collect();
        let v = relative_distance_loss(c0, c0, &anchors, OuterMetric::Mse, InnerMetric::CosineSim).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.teacher, b.teacher);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.dataset.write_to(&mut buf_a).unwrap();
        b.dataset.write_to(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        let c = generate_synthetic(&SynthParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn prototypes_orthonormal() {
        let b = generate_synthetic(&small()).unwrap();
        for (i, x) in b.ground_truth.iter().enumerate() {
            for (j, y) in b.ground_truth.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(x, y) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_orthogonal_classes() {
        let p = SynthParams { num_classes: 9, text_dim: 8, ..small() };
        assert!(matches!(generate_synthetic(&p), Err(RiseError::Config(_))));
        let p = SynthParams { orthogonal_prototypes: false, ..p };
        assert!(generate_synthetic(&p).is_ok());
    }

    #[test]
    fn shape_and_defaults() {
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(b.dataset.samples.len(), 3 * 3 * 4);
        assert_eq!(b.dataset.samples[0].feature.len(), 10);
        let d = SynthParams::default();
        assert_eq!(
            (d.num_classes, d.num_domains, d.text_dim, d.feature_dim, d.samples_per_cell),
            (5, 4, 32, 64, 100)
        );
        assert_eq!(
            (d.anchor_offset_strength, d.domain_shift_strength, d.noise_sigma),
            (0.5, 0.8, 0.15)
        );
        assert_eq!(d.nonlinearity, Nonlinearity::TanhMix);
    }

    #[test]
    fn perturbed_teacher_differs_but_agrees_on_shape() {
        let b = generate_synthetic(&small()).unwrap();
        let t2 = b.perturbed_teacher("alt", 0.5, 3).unwrap();
        assert_eq!(t2.classes, b.teacher.classes);
        assert_ne!(t2.generic, b.teacher.generic);
        assert_eq!(t2.teacher_id, "alt");
    }

    #[test]
    fn ground_truth_round_trip() {
        let b = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        write_ground_truth(&path, &b.dataset.classes, &b.ground_truth).unwrap();
        let (classes, protos) = read_ground_truth(&path).unwrap();
        assert_eq!(classes, b.dataset.classes);
        assert_eq!(protos, b.ground_truth);
    }
}
