//! Unit-norm embeddings, cosine similarity and multimodal query fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vectors whose norm is already this close to one are stored as-is, which
/// makes normalization idempotent bit-for-bit.
const UNIT_NORM_SLACK: f64 = 1e-12;

/// An L2-normalized, finite, non-empty real vector.
///
/// Every embedding in the engine (prompts, regions, refinements) is normalized
/// when it is constructed, so cosine similarity reduces to a dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw` to unit length.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Normalization("empty vector"));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::Normalization("non-finite component"));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Normalization("zero or overflowing norm"));
        }
        if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
            return Ok(Self { values: raw });
        }
        let values = raw.into_iter().map(|x| x / norm).collect();
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Raw dot product. Callers must have checked dimensions.
    #[inline]
    pub(crate) fn dot(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine similarity without a dimension check, clamped to `[-1, 1]`.
    #[inline]
    pub(crate) fn cosine_unchecked(&self, other: &Embedding) -> f64 {
        self.dot(other).clamp(-1.0, 1.0)
    }

    /// Bit pattern of the components, used as a set key.
    pub(crate) fn bit_key(&self) -> Vec<u64> {
        self.values.iter().map(|x| x.to_bits()).collect()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(raw: Vec<f64>) -> Result<Self> {
        Embedding::new(raw)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    Embedding::new(v.to_vec())
}

/// Cosine similarity of two embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(a.cosine_unchecked(b))
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}

/// Combines text and reference-image embeddings into one query vector.
///
/// With both present the result is `normalize(alpha * text + (1 - alpha) * image)`.
/// With only one present it is returned unchanged and `alpha` is ignored.
pub fn fuse_query(
    text: Option<&Embedding>,
    image: Option<&Embedding>,
    alpha: f64,
) -> Result<Embedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    match (text, image) {
        (None, None) => Err(Error::EmptyQuery),
        (Some(t), None) => Ok(t.clone()),
        (None, Some(i)) => Ok(i.clone()),
        (Some(t), Some(i)) => {
            check_dim(t.dim(), i.dim())?;
            let mixed: Vec<f64> = t
                .as_slice()
                .iter()
                .zip(i.as_slice())
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            Embedding::new(mixed)
        }
    }
}

/// Normalized mean of a non-empty set of embeddings.
pub(crate) fn normalized_mean<'a>(
    items: impl IntoIterator<Item = &'a Embedding>,
) -> Result<Option<Embedding>> {
    let mut acc: Option<Vec<f64>> = None;
    for e in items {
        match acc.as_mut() {
            None => acc = Some(e.as_slice().to_vec()),
            Some(sum) => {
                check_dim(sum.len(), e.dim())?;
                sum.iter_mut().zip(e.as_slice()).for_each(|(s, x)| *s += x);
            }
        }
    }
    acc.map(Embedding::new).transpose()
}
