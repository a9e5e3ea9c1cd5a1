//! The trainable student: optional tanh trunk, projection into the teacher's
//! text space, and a prediction head.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{argmax, cosine_with_grad, softmax, Embedding};
use crate::error::{check_dims, Result, RiseError};
use crate::losses::OutputGrad;
use crate::teacher::TeacherTable;

pub const STUDENT_FORMAT: &str = "rise-student-v1";

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// Student input (precomputed backbone feature or synthetic).
    pub feature: Vec<f64>,
    /// Frozen teacher image embedding of the same sample.
    pub teacher_emb: Embedding,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Affine classifier on the projected embedding.
    #[default]
    Fc,
    /// `logit_scale · cos(u, generic[i])` against the teacher's class embeddings.
    TextCosine,
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense affine map, weights row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + lane_dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        self.accumulate(x, dy, dw, db, Some(&mut dx));
        dx
    }

    fn accumulate(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], mut dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for (d, v) in drow.iter_mut().zip(x) {
                *d += g * v;
            }
            if let Some(dx) = dx.as_deref_mut() {
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub feature_dim: usize,
    pub hidden_dim: Option<usize>,
    pub text_dim: usize,
    pub num_classes: usize,
    pub head_mode: HeadMode,
    pub seed: u64,
    pub trunk: Option<Linear>,
    pub projection: Linear,
    pub classifier: Linear,
}

/// Student outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Projected embedding in teacher text space.
    pub u: Embedding,
    pub logits: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub logits: Vec<f64>,
}

impl StudentModel {
    /// Uniform(±1/√fan_in) weights and zero biases, deterministic in `seed`.
    pub fn init(
        feature_dim: usize,
        hidden_dim: Option<usize>,
        text_dim: usize,
        num_classes: usize,
        head_mode: HeadMode,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || text_dim == 0 || num_classes == 0 || hidden_dim == Some(0) {
            return Err(RiseError::Config("student dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = hidden_dim.map(|h| Linear::init(feature_dim, h, &mut rng));
        let projection = Linear::init(hidden_dim.unwrap_or(feature_dim), text_dim, &mut rng);
        let classifier = Linear::init(text_dim, num_classes, &mut rng);
        Ok(StudentModel {
            feature_dim,
            hidden_dim,
            text_dim,
            num_classes,
            head_mode,
            seed,
            trunk,
            projection,
            classifier,
        })
    }

    pub fn forward(&self, feature: &[f64], table: &TeacherTable) -> Result<Forward> {
        let cache = self.forward_cached(feature, table)?;
        Ok(Forward {
            u: Embedding::new(cache.u)?,
            logits: cache.logits,
        })
    }

    pub fn forward_cached(&self, feature: &[f64], table: &TeacherTable) -> Result<ForwardCache> {
        check_dims(self.feature_dim, feature.len())?;
        let hidden = self
            .trunk
            .as_ref()
            .map(|t| t.apply(feature).into_iter().map(f64::tanh).collect::<Vec<_>>());
        let u = self.projection.apply(hidden.as_deref().unwrap_or(feature));
        let logits = match self.head_mode {
            HeadMode::Fc => self.classifier.apply(&u),
            HeadMode::TextCosine => {
                self.check_table(table)?;
                table
                    .generic
                    .iter()
                    .map(|g| Ok(table.logit_scale * cosine_with_grad(&u, g)?.0))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(ForwardCache {
            input: feature.to_vec(),
            hidden,
            u,
            logits,
        })
    }

    fn check_table(&self, table: &TeacherTable) -> Result<()> {
        check_dims(self.text_dim, table.dim)?;
        check_dims(self.num_classes, table.num_classes())
    }

    /// Backpropagates output gradients into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out: &OutputGrad,
        table: &TeacherTable,
        grads: &mut Gradients,
    ) -> Result<()> {
        let mut du = out.u.clone();
        match self.head_mode {
            HeadMode::Fc => {
                let dx = self.classifier.backward(
                    &cache.u,
                    &out.logits,
                    &mut grads.classifier_weight,
                    &mut grads.classifier_bias,
                );
                for (a, b) in du.iter_mut().zip(&dx) {
                    *a += b;
                }
            }
            HeadMode::TextCosine => {
                for (g, &dl) in table.generic.iter().zip(&out.logits) {
                    if dl == 0.0 {
                        continue;
                    }
                    let (_, dcos) = cosine_with_grad(&cache.u, g)?;
                    for (a, b) in du.iter_mut().zip(&dcos) {
                        *a += dl * table.logit_scale * b;
                    }
                }
            }
        }
        let proj_in = cache.hidden.as_deref().unwrap_or(&cache.input);
        let dh = self.projection.backward(
            proj_in,
            &du,
            &mut grads.projection_weight,
            &mut grads.projection_bias,
        );
        if let (Some(trunk), Some(hidden)) = (&self.trunk, &cache.hidden) {
            let dpre: Vec<f64> = dh.iter().zip(hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
            let tg = grads.trunk.as_mut().expect("trunk gradients allocated");
            trunk.accumulate(&cache.input, &dpre, &mut tg.0, &mut tg.1, None);
        }
        Ok(())
    }

    /// Argmax of the logits; ties go to the smallest class index.
    pub fn predict(&self, feature: &[f64], table: &TeacherTable) -> Result<usize> {
        Ok(argmax(&self.forward_cached(feature, table)?.logits))
    }

    /// Softmax of the logits at temperature 1.
    pub fn probabilities(&self, feature: &[f64], table: &TeacherTable) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_cached(feature, table)?.logits))
    }

    /// Named parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(6);
        if let Some(t) = &self.trunk {
            out.push(("trunk.weight", vec![t.out_dim, t.in_dim], t.weight.as_slice()));
            out.push(("trunk.bias", vec![t.out_dim], t.bias.as_slice()));
        }
        let (p, c) = (&self.projection, &self.classifier);
        out.push(("projection.weight", vec![p.out_dim, p.in_dim], p.weight.as_slice()));
        out.push(("projection.bias", vec![p.out_dim], p.bias.as_slice()));
        out.push(("classifier.weight", vec![c.out_dim, c.in_dim], c.weight.as_slice()));
        out.push(("classifier.bias", vec![c.out_dim], c.bias.as_slice()));
        out
    }

    /// Mutable parameter tensors, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(6);
        if let Some(t) = &mut self.trunk {
            out.push(&mut t.weight);
            out.push(&mut t.bias);
        }
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| RiseError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| RiseError::io(path, e))?;
        w.flush().map_err(|e| RiseError::io(path, e))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format: STUDENT_FORMAT.into(),
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            text_dim: self.text_dim,
            num_classes: self.num_classes,
            head_mode: self.head_mode,
            seed: self.seed,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for (name, shape, data) in self.tensors() {
            let rec = TensorRecord { name: name.into(), shape, data: data.to_vec() };
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
            .map_err(|e| RiseError::io("<checkpoint>", e))?;
        let header: CheckpointHeader = serde_json::from_str(&header_line)
            .map_err(|e| RiseError::format(1, "header", e.to_string()))?;
        if header.format != STUDENT_FORMAT {
            return Err(RiseError::format(
                1,
                "format",
                format!("expected {STUDENT_FORMAT}, found {}", header.format),
            ));
        }
        let mut model = StudentModel::init(
            header.feature_dim,
            header.hidden_dim,
            header.text_dim,
            header.num_classes,
            header.head_mode,
            header.seed,
        )
        .map_err(|e| RiseError::format(1, "header", e.to_string()))?;
        let expected: Vec<(&'static str, Vec<usize>)> =
            model.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut filled = vec![false; expected.len()];
        {
            let slots = model.tensors_mut();
            let mut slots: Vec<Option<&mut Vec<f64>>> = slots.into_iter().map(Some).collect();
            for (ix, line) in lines.enumerate() {
                let lineno = ix + 2;
                let line = line.map_err(|e| RiseError::io("<checkpoint>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TensorRecord = serde_json::from_str(&line)
                    .map_err(|e| RiseError::format(lineno, "tensor", e.to_string()))?;
                let pos = expected
                    .iter()
                    .position(|(n, _)| *n == rec.name)
                    .ok_or_else(|| RiseError::format(lineno, &rec.name, "unexpected tensor"))?;
                if filled[pos] {
                    return Err(RiseError::format(lineno, &rec.name, "duplicate tensor"));
                }
                if rec.shape != expected[pos].1 {
                    return Err(RiseError::format(
                        lineno,
                        &rec.name,
                        format!("shape {:?}, expected {:?}", rec.shape, expected[pos].1),
                    ));
                }
                if rec.data.len() != rec.shape.iter().product::<usize>() {
                    return Err(RiseError::format(lineno, &rec.name, "data length does not match shape"));
                }
                if rec.data.iter().any(|v| !v.is_finite()) {
                    return Err(RiseError::format(lineno, &rec.name, "non-finite parameter"));
                }
                **slots[pos].as_mut().expect("unfilled slot") = rec.data;
                filled[pos] = true;
            }
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(RiseError::format(0, expected[missing].0, "missing tensor"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    feature_dim: usize,
    hidden_dim: Option<usize>,
    text_dim: usize,
    num_classes: usize,
    head_mode: HeadMode,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Parameter gradients, shaped like a [`StudentModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Option<(Vec<f64>, Vec<f64>)>,
    pub projection_weight: Vec<f64>,
    pub projection_bias: Vec<f64>,
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &StudentModel) -> Self {
        Gradients {
            trunk: model
                .trunk
                .as_ref()
                .map(|t| (vec![0.0; t.weight.len()], vec![0.0; t.bias.len()])),
            projection_weight: vec![0.0; model.projection.weight.len()],
            projection_bias: vec![0.0; model.projection.bias.len()],
            classifier_weight: vec![0.0; model.classifier.weight.len()],
            classifier_bias: vec![0.0; model.classifier.bias.len()],
        }
    }

    /// Tensors in the same order as [`StudentModel::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(6);
        if let Some((w, b)) = &self.trunk {
            out.push(w);
            out.push(b);
        }
        out.push(&self.projection_weight);
        out.push(&self.projection_bias);
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    pub fn scale(&mut self, s: f64) {
        let mut all: Vec<&mut Vec<f64>> = vec![
            &mut self.projection_weight,
            &mut self.projection_bias,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ];
        if let Some((w, b)) = &mut self.trunk {
            all.push(w);
            all.push(b);
        }
        for t in all {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
