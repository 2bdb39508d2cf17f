//! Modality-gap measurements: cosine between per-modality mean embeddings,
//! and a two-component PCA projection for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_slices, l2_normalize, Embedding, Modality};
use crate::error::{Error, Result};
use crate::losses::TripletBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Renormalized mean embedding per modality.
    pub means: BTreeMap<Modality, Vec<f64>>,
    pub raw_means: BTreeMap<Modality, Vec<f64>>,
    /// Rows and columns follow `Modality::ALL`.
    pub pairwise_cosine: [[f64; 3]; 3],
    pub sample_counts: BTreeMap<Modality, usize>,
}

impl GapReport {
    pub fn cosine(&self, a: Modality, b: Modality) -> f64 {
        self.pairwise_cosine[a.index()][b.index()]
    }

    /// Smallest off-diagonal entry; larger means a smaller gap.
    pub fn min_pairwise_cosine(&self) -> f64 {
        let mut min = f64::INFINITY;
        for a in 0..3 {
            for b in a + 1..3 {
                min = min.min(self.pairwise_cosine[a][b]);
            }
        }
        min
    }
}

pub fn modality_gap_table(samples: &[Embedding]) -> Result<GapReport> {
    let dim = samples.first().map_or(0, Embedding::dim);
    let mut sums: BTreeMap<Modality, (Vec<f64>, usize)> = BTreeMap::new();
    for s in samples {
        if s.dim() != dim {
            return Err(Error::shape(format!("sample dim {} vs {dim}", s.dim())));
        }
        let entry = sums.entry(s.modality).or_insert_with(|| (vec![0.0; dim], 0));
        for (acc, v) in entry.0.iter_mut().zip(&s.values) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let mut raw_means = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut sample_counts = BTreeMap::new();
    for m in Modality::ALL {
        let (sum, count) = sums.remove(&m).ok_or_else(|| Error::MissingModality(m.to_string()))?;
        let raw: Vec<f64> = sum.into_iter().map(|x| x / count as f64).collect();
        means.insert(m, l2_normalize(&raw)?);
        raw_means.insert(m, raw);
        sample_counts.insert(m, count);
    }
    let mut pairwise_cosine = [[0.0; 3]; 3];
    for a in Modality::ALL {
        for b in Modality::ALL {
            pairwise_cosine[a.index()][b.index()] =
                if a == b { 1.0 } else { cosine_slices(&means[&a], &means[&b]) };
        }
    }
    Ok(GapReport { means, raw_means, pairwise_cosine, sample_counts })
}

/// Gap table over every row of a batch.
pub fn gap_from_batch(batch: &TripletBatch) -> Result<GapReport> {
    modality_gap_table(&tagged_samples(batch))
}

pub fn tagged_samples(batch: &TripletBatch) -> Vec<Embedding> {
    Modality::ALL
        .into_iter()
        .flat_map(|m| {
            let mat = batch.matrix(m);
            (0..mat.n()).map(move |j| mat.embedding(j))
        })
        .collect()
}

pub const DEFAULT_PCA_ITERS: usize = 10_000;
pub const DEFAULT_PCA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub explained_variance_ratio: [f64; 2],
    pub points: Vec<ProjectedPoint>,
}

impl PcaProjection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,modality\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.x, p.y, p.modality).unwrap();
        }
        out
    }
}

/// Top two principal components by power iteration with deflation.
///
/// Each iteration starts from the covariance column with the largest
/// diagonal entry, and stops when successive unit estimates differ by less
/// than `tol`. A component is sign-fixed so its largest-magnitude
/// coordinate is positive.
pub fn pca_2d(samples: &[Embedding], iters: usize, tol: f64) -> Result<PcaProjection> {
    if samples.len() < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 samples, got {}", samples.len())));
    }
    let d = samples[0].dim();
    if d < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs d >= 2, got {d}")));
    }
    if samples.iter().any(|s| s.dim() != d) {
        return Err(Error::shape("samples differ in dimension"));
    }
    let n = samples.len();
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.values.iter().copied()).collect();
    let x = Array2::from_shape_vec((n, d), flat).expect("uniform dims");
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let total: f64 = cov.diag().sum();
    if !(total >= 1e-12) {
        return Err(Error::DegenerateData(total));
    }

    let v1 = power_iteration(&cov, None, iters, tol)?;
    let lambda1 = v1.dot(&cov.dot(&v1));
    let deflated = &cov - &(outer(&v1, &v1) * lambda1);
    let max_diag = deflated.diag().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let v2 = if max_diag <= 1e-12 * total {
        orthogonal_fallback(&v1)
    } else {
        power_iteration(&deflated, Some(&v1), iters, tol)?
    };
    let lambda2 = v2.dot(&cov.dot(&v2)).max(0.0);
    let v1 = fix_sign(v1);
    let v2 = fix_sign(v2);
    let proj = centered.dot(&ndarray::stack(Axis(1), &[v1.view(), v2.view()]).expect("same length"));
    let points = samples
        .iter()
        .zip(proj.rows())
        .map(|(s, p)| ProjectedPoint { x: p[0], y: p[1], modality: s.modality })
        .collect();
    let ratio = |l: f64| (l / total).clamp(0.0, 1.0);
    Ok(PcaProjection {
        mean: mean.to_vec(),
        components: [v1.to_vec(), v2.to_vec()],
        eigenvalues: [lambda1, lambda2],
        explained_variance_ratio: [ratio(lambda1), ratio(lambda2)],
        points,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

fn unit(v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

fn power_iteration(m: &Array2<f64>, orth: Option<&Array1<f64>>, iters: usize, tol: f64) -> Result<Array1<f64>> {
    let start = (0..m.nrows()).max_by(|&a, &b| m[[a, a]].total_cmp(&m[[b, b]]).then(b.cmp(&a))).unwrap();
    let project = |mut v: Array1<f64>| {
        if let Some(u) = orth {
            let p = u.dot(&v);
            v.scaled_add(-p, u);
        }
        v
    };
    let mut v = match unit(project(m.column(start).to_owned())) {
        Some(v) => v,
        None => return Ok(orth.map_or_else(|| basis(m.nrows(), start), orthogonal_fallback)),
    };
    for _ in 0..iters {
        let next = match unit(project(m.dot(&v))) {
            Some(n) => n,
            // The remaining spectrum is zero along this direction.
            None => return Ok(v),
        };
        let diff = (&next - &v).mapv(|x| x * x).sum().sqrt();
        v = next;
        if diff < tol {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence { iters })
}

fn basis(d: usize, i: usize) -> Array1<f64> {
    let mut e = Array1::zeros(d);
    e[i] = 1.0;
    e
}

/// Unit vector orthogonal to `v`, built from the axis `v` leans on least.
fn orthogonal_fallback(v: &Array1<f64>) -> Array1<f64> {
    let i = (0..v.len()).min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
    let mut e = basis(v.len(), i);
    let p = v.dot(&e);
    e.scaled_add(-p, v);
    unit(e).expect("axis with the smallest weight is not parallel to a unit vector when d >= 2")
}

fn fix_sign(v: Array1<f64>) -> Array1<f64> {
    let i = (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}
