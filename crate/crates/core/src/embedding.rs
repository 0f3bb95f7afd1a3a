//! Speaker embedding values and the vector arithmetic shared by every stage.
//!
//! All arithmetic is `f64`. Distances follow the `1 - cos` convention, so
//! they live in `[0, 2]`: antipodal embeddings sit at distance 2.

use std::fmt;
use std::ops::Index;

use crate::error::{Error, Result};

/// A fixed-dimension speaker embedding (x-vector surrogate).
///
/// Construction rejects empty and non-finite input. The experiment-wide
/// dimension is enforced by the operations that combine embeddings.
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("embedding must have at least one coordinate"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "embedding coordinate {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    /// Builds an embedding without validation. Callers guarantee finiteness.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Index<usize> for EmbeddingVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a||b|)`, clamped to `[-1, 1]`.
///
/// The denominator is computed as `sqrt(a.a * b.b)`, which makes the
/// similarity of a vector with itself exactly 1.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let aa = dot(&a.0, &a.0);
    if aa == 0.0 {
        return Err(Error::ZeroNorm("a"));
    }
    let bb = dot(&b.0, &b.0);
    if bb == 0.0 {
        return Err(Error::ZeroNorm("b"));
    }
    let prod = aa * bb;
    let denom = if prod.is_normal() {
        prod.sqrt()
    } else {
        aa.sqrt() * bb.sqrt()
    };
    Ok((dot(&a.0, &b.0) / denom).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("v"));
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / n).collect()))
}

/// Componentwise arithmetic mean. The result is not renormalized.
///
/// Uses the running-mean update `m += (x - m) / i`, so averaging identical
/// vectors reproduces them bit for bit.
pub fn centroid(vs: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    centroid_of(vs)
}

/// Like [`centroid`] over borrowed vectors.
pub fn centroid_of<'a, I>(vs: I) -> Result<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut iter = vs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::domain("centroid of an empty set"))?;
    let dim = first.dim();
    let mut mean = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        check_dims(dim, v.dim())?;
        count += 1;
        let n = count as f64;
        for (m, x) in mean.iter_mut().zip(&v.0) {
            *m += (x - *m) / n;
        }
    }
    Ok(EmbeddingVector(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_of_vector_to_itself_is_zero() {
        let v = ev(&[0.3, -1.2, 4.0]);
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
    }

    #[test]
    fn orthogonal_and_antiparallel_distances() {
        assert_eq!(
            cosine_distance(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(),
            1.0
        );
        assert_eq!(
            cosine_distance(&ev(&[1.0, 0.0]), &ev(&[-1.0, 0.0])).unwrap(),
            2.0
        );
    }

    #[test]
    fn zero_norm_argument_is_identified() {
        let z = ev(&[0.0, 0.0]);
        let v = ev(&[1.0, 0.0]);
        assert!(matches!(cosine_distance(&z, &v), Err(Error::ZeroNorm("a"))));
        assert!(matches!(cosine_distance(&v, &z), Err(Error::ZeroNorm("b"))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = cosine_distance(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                got: 3
            }
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&ev(&[3.0, 4.0])).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        let u = ev(&[0.6, 0.8]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
        assert!(l2_normalize(&ev(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn centroid_examples() {
        let v = ev(&[0.2, 0.7]);
        assert_eq!(centroid(std::slice::from_ref(&v)).unwrap(), v);
        assert_eq!(
            centroid(&[ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]).unwrap(),
            ev(&[0.5, 0.5])
        );
        let degenerate = centroid(&[ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])]).unwrap();
        assert_eq!(degenerate, ev(&[0.0, 0.0]));
        assert!(l2_normalize(&degenerate).is_err());
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn distance_is_normalization_invariant(a in nonzero_vec(8), b in nonzero_vec(8)) {
            let (a, b) = (ev(&a), ev(&b));
            let d = cosine_distance(&a, &b).unwrap();
            let dn = cosine_distance(&l2_normalize(&a).unwrap(), &l2_normalize(&b).unwrap()).unwrap();
            prop_assert!((d - dn).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
            prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn distance_is_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), c in 1e-3f64..1e3) {
            let d = cosine_distance(&ev(&a), &ev(&b)).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((d - cosine_distance(&ev(&scaled), &ev(&b)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn centroid_of_copies_is_exact(v in nonzero_vec(5), k in 1usize..20) {
            let v = ev(&v);
            let copies = vec![v.clone(); k];
            prop_assert_eq!(centroid(&copies).unwrap(), v);
        }
    }
}
