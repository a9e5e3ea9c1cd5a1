//! Vector math shared by every loss term.
//!
//! All functions operate on `f64` slices so they accept [`Embedding`]s,
//! plain vectors and parameter rows alike. Everything here is pure.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Result, RiseError};

/// Floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// A finite, non-empty vector in the teacher's text-embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RiseError::EmptyInput("embedding has no coordinates".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(RiseError::DegenerateVector(format!(
                "non-finite value at coordinate {pos}"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Unit-norm copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(RiseError::DegenerateVector("cannot normalize zero vector".into()));
        }
        Ok(Embedding(self.0.iter().map(|v| v / n).collect()))
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = RiseError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(RiseError::EmptyInput("probability vector is empty".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(RiseError::Config("probabilities must lie in [0, 1]".into()));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(RiseError::Config(format!("probabilities sum to {mass}, not 1")));
        }
        Ok(ProbVector(probs))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RiseError::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradient with respect to `a`.
///
/// The value is not clamped here so that it stays consistent with the gradient.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dims(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RiseError::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let cos = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    Ok((cos, grad))
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Coordinate-wise mean of a non-empty list of equal-dimension vectors.
pub fn mean_embedding<V: AsRef<[f64]>>(vs: &[V]) -> Result<Embedding> {
    let first = vs
        .first()
        .ok_or_else(|| RiseError::EmptyInput("mean of an empty list".into()))?
        .as_ref();
    // Running mean: N copies of v reproduce v exactly.
    let mut mean = first.to_vec();
    for (k, v) in vs.iter().enumerate().skip(1) {
        let v = v.as_ref();
        check_dims(mean.len(), v.len())?;
        let k = (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / k;
        }
    }
    Embedding::new(mean)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log softmax(xs)` computed through log-sum-exp.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Plain softmax with max-subtraction; no validation.
pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_with_temperature(logits: &[f64], t: f64) -> Result<ProbVector> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(RiseError::Config(format!("temperature must be positive, got {t}")));
    }
    if logits.is_empty() {
        return Err(RiseError::EmptyInput("softmax of no logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(RiseError::Config("logits must be finite".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(ProbVector(softmax(&scaled)))
}

/// `KL(p || q)`, with `q` floored at [`KL_FLOOR`] and renormalized.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    let mass: f64 = floored.iter().sum();
    Ok(p.iter()
        .zip(&floored)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / (qi / mass)).ln())
        .sum())
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(RiseError::Dim { expected: 1, actual: 2 })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(RiseError::DegenerateVector(_))
        ));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(l1_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 7.0);
        assert_eq!(l1_distance(&[0.0, 0.0], &[0.0, -3.0]).unwrap(), 3.0);
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 5.0);
        assert_eq!(l2_distance(&[0.0, 0.0], &[0.0, -3.0]).unwrap(), 3.0);
        assert!(l1_distance(&[1.0], &[1.0, 2.0]).is_err());
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_embedding(&[vec![1.0, 0.0]]).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(
            mean_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        let m = mean_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15 && (m[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            mean_embedding::<Vec<f64>>(&[]),
            Err(RiseError::EmptyInput(_))
        ));
        assert!(matches!(
            mean_embedding(&[vec![1.0], vec![1.0, 2.0]]),
            Err(RiseError::Dim { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax_with_temperature(&[2.0, 0.0], 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = softmax_with_temperature(&[5.0, 0.0], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-3 && (p[1] - 0.5).abs() < 1e-3);
        assert!(matches!(
            softmax_with_temperature(&[1.0], 0.0),
            Err(RiseError::Config(_))
        ));
        assert!(softmax_with_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap(), 0.0);
        assert!(kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_against_saturated_target_is_finite() {
        let kl = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_gradient_matches_difference_quotient() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.0, 0.5, -0.25];
        let (_, g) = cosine_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim)
    }

    fn nonzero(v: &[f64]) -> bool {
        norm(v) > 1e-6
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in vec_strategy(5), b in vec_strategy(5)) {
            prop_assume!(nonzero(&a) && nonzero(&b));
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn cosine_positive_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), c in 0.01f64..100.0) {
            prop_assume!(nonzero(&a) && nonzero(&b));
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let lhs = cosine_similarity(&scaled, &b).unwrap();
            let rhs = cosine_similarity(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn mean_of_copies_is_exact(v in vec_strategy(4), n in 1usize..20) {
            let copies = vec![v.clone(); n];
            let m = mean_embedding(&copies).unwrap();
            prop_assert_eq!(m.as_slice(), v.as_slice());
        }

        #[test]
        fn mean_is_permutation_invariant(vs in proptest::collection::vec(vec_strategy(3), 1..6)) {
            let m1 = mean_embedding(&vs).unwrap();
            let mut rev = vs.clone();
            rev.reverse();
            let m2 = mean_embedding(&rev).unwrap();
            for (x, y) in m1.iter().zip(m2.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_normalized_and_order_preserving(logits in vec_strategy(6), t in 0.01f64..100.0) {
            let p = softmax_with_temperature(&logits, t).unwrap();
            let mass: f64 = p.iter().sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
            prop_assert_eq!(argmax(&p), argmax(&logits));
        }

        #[test]
        fn kl_non_negative(a in vec_strategy(4), b in vec_strategy(4)) {
            let p = softmax_with_temperature(&a, 1.0).unwrap();
            let q = softmax_with_temperature(&b, 1.0).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality(a in vec_strategy(4), b in vec_strategy(4), c in vec_strategy(4)) {
            let l1 = |x: &[f64], y: &[f64]| l1_distance(x, y).unwrap();
            let l2 = |x: &[f64], y: &[f64]| l2_distance(x, y).unwrap();
            prop_assert!(l1(&a, &c) <= l1(&a, &b) + l1(&b, &c) + 1e-9);
            prop_assert!(l2(&a, &c) <= l2(&a, &b) + l2(&b, &c) + 1e-9);
        }
    }
}
