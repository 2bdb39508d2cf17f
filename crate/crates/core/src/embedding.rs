//! Vector primitives shared by the losses, trainer, retrieval engine and
//! diagnostics.
//!
//! All arithmetic is `f64`. Embedding matrices are stored row-major with one
//! embedding per row, so every row is a contiguous slice.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Which modality an embedding represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Fused,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Fused];

    /// Position in `ALL`; used to index 3x3 block structures.
    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Fused => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Image => "i",
            Modality::Text => "t",
            Modality::Fused => "it",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "image" => Ok(Modality::Image),
            "t" | "text" => Ok(Modality::Text),
            "it" | "fused" => Ok(Modality::Fused),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// A single embedding vector tagged with its modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl Embedding {
    pub fn new(values: Vec<f64>, modality: Modality) -> Self {
        Self { values, modality }
    }

    /// Builds a unit-norm embedding from an arbitrary nonzero vector.
    pub fn normalized(values: &[f64], modality: Modality) -> Result<Self> {
        Ok(Self { values: l2_normalize(values)?, modality })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// `N x d` stack of embeddings sharing one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
    modality: Modality,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps raw rows without touching them.
    pub fn new(rows: Array2<f64>, modality: Modality) -> Self {
        let rows = if rows.is_standard_layout() { rows } else { rows.as_standard_layout().to_owned() };
        Self { rows, modality, normalized: false }
    }

    /// L2-normalizes every row.
    pub fn normalized(rows: Array2<f64>, modality: Modality) -> Result<Self> {
        let mut m = Self::new(rows, modality);
        for mut row in m.rows.rows_mut() {
            let n = view_dot(row.view(), row.view()).sqrt();
            if !(n >= ZERO_NORM_THRESHOLD) {
                return Err(Error::ZeroVector);
            }
            row.mapv_inplace(|x| x / n);
        }
        m.normalized = true;
        Ok(m)
    }

    /// Marks rows that the caller has already normalized.
    pub(crate) fn unit_rows(rows: Array2<f64>, modality: Modality) -> Self {
        let mut m = Self::new(rows, modality);
        m.normalized = true;
        m
    }

    pub fn from_embeddings(es: &[Embedding]) -> Result<Self> {
        let first = es.first().ok_or(Error::EmptyList)?;
        let d = first.dim();
        let mut data = Vec::with_capacity(es.len() * d);
        for e in es {
            if e.dim() != d {
                return Err(Error::shape(format!("embedding dim {} != {}", e.dim(), d)));
            }
            if e.modality != first.modality {
                return Err(Error::shape("mixed modalities in one matrix"));
            }
            data.extend_from_slice(&e.values);
        }
        let rows = Array2::from_shape_vec((es.len(), d), data).expect("length checked");
        Ok(Self::new(rows, first.modality))
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.rows.row(j).to_slice().expect("standard layout")
    }

    pub fn embedding(&self, j: usize) -> Embedding {
        Embedding::new(self.row(j).to_vec(), self.modality)
    }

    /// Mutable access for perturbation-style tests; clears the normalized mark.
    pub fn rows_mut(&mut self) -> &mut Array2<f64> {
        self.normalized = false;
        &mut self.rows
    }
}

/// Plain sequential dot product. Summation order is fixed, so
/// `dot(a, b) == dot(b, a)` bit-for-bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn view_dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM_THRESHOLD) {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Logit matrix with entry `(j, k) = dot(a_j, b_k) / tau`.
///
/// Row counts may differ; the embedding dimension may not.
pub fn similarity_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix, tau: f64) -> Result<Array2<f64>> {
    check_tau(tau)?;
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("embedding dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let mut out = Array2::zeros((a.n(), b.n()));
    for j in 0..a.n() {
        let aj = a.row(j);
        for k in 0..b.n() {
            out[[j, k]] = dot(aj, b.row(k)) / tau;
        }
    }
    Ok(out)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Score fusion `e_i + e_t`, optionally renormalized to unit length.
pub fn fuse_sum(e_i: &Embedding, e_t: &Embedding, renormalize: bool) -> Result<Embedding> {
    if e_i.dim() != e_t.dim() {
        return Err(Error::shape(format!("fusion dims differ: {} vs {}", e_i.dim(), e_t.dim())));
    }
    let sum: Vec<f64> = e_i.values.iter().zip(&e_t.values).map(|(a, b)| a + b).collect();
    let values = if renormalize { l2_normalize(&sum)? } else { sum };
    Ok(Embedding::new(values, Modality::Fused))
}

/// Row-wise [`fuse_sum`] over aligned image and text matrices.
pub fn fuse_rows(images: &EmbeddingMatrix, texts: &EmbeddingMatrix, renormalize: bool) -> Result<EmbeddingMatrix> {
    if images.rows().dim() != texts.rows().dim() {
        return Err(Error::shape(format!(
            "fusion shapes differ: {:?} vs {:?}",
            images.rows().dim(),
            texts.rows().dim()
        )));
    }
    let sum = images.rows() + texts.rows();
    if renormalize {
        EmbeddingMatrix::normalized(sum, Modality::Fused)
    } else {
        Ok(EmbeddingMatrix::new(sum, Modality::Fused))
    }
}

/// Arithmetic mean of a non-empty list of same-modality embeddings.
pub fn average_embeddings(es: &[Embedding], renormalize: bool) -> Result<Embedding> {
    let first = es.first().ok_or(Error::EmptyList)?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    for e in es {
        if e.dim() != d {
            return Err(Error::shape(format!("embedding dim {} != {}", e.dim(), d)));
        }
        if e.modality != first.modality {
            return Err(Error::shape("cannot average embeddings of different modalities"));
        }
        for (a, x) in acc.iter_mut().zip(&e.values) {
            *a += x;
        }
    }
    let count = es.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let values = if renormalize { l2_normalize(&acc)? } else { acc };
    Ok(Embedding::new(values, first.modality))
}

/// Cosine of two unit-norm embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}
