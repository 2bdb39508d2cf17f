use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{view_dot, EmbeddingMatrix, Modality, ZERO_NORM_THRESHOLD};
use crate::error::{Error, Result};

/// Encoder shape. The hidden layer, when present, uses `tanh`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderArch {
    #[default]
    Linear,
    Mlp { hidden: usize },
}

/// Maps raw features to unit-norm embeddings.
///
/// Parameters are stored as `[W1, b1]` (linear) or `[W1, b1, W2, b2]`
/// (one hidden layer); weights are `in x out` and biases `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    arch: EncoderArch,
    params: Vec<Array2<f64>>,
}

/// Intermediate values kept from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Array2<f64>,
    hidden: Option<Array2<f64>>,
    output: Array2<f64>,
    norms: Vec<f64>,
}

impl EncoderCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn dense(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> [Array2<f64>; 2] {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z * scale
    });
    [w, Array2::zeros((1, fan_out))]
}

impl ToyEncoder {
    pub fn random(arch: EncoderArch, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let params = match arch {
            EncoderArch::Linear => dense(rng, d_in, d_out).to_vec(),
            EncoderArch::Mlp { hidden } => {
                let mut p = dense(rng, d_in, hidden).to_vec();
                p.extend(dense(rng, hidden, d_out));
                p
            }
        };
        Self { arch, params }
    }

    /// Linear identity map on `d`-dimensional inputs.
    pub fn identity(d: usize) -> Self {
        Self { arch: EncoderArch::Linear, params: vec![Array2::eye(d), Array2::zeros((1, d))] }
    }

    pub fn from_params(arch: EncoderArch, params: Vec<Array2<f64>>) -> Result<Self> {
        let want = match arch {
            EncoderArch::Linear => 2,
            EncoderArch::Mlp { .. } => 4,
        };
        if params.len() != want {
            return Err(Error::shape(format!("{arch:?} needs {want} tensors, got {}", params.len())));
        }
        for layer in params.chunks(2) {
            let (w, b) = (&layer[0], &layer[1]);
            if b.nrows() != 1 || b.ncols() != w.ncols() {
                return Err(Error::shape(format!("bias {:?} does not fit weight {:?}", b.dim(), w.dim())));
            }
        }
        if let EncoderArch::Mlp { hidden } = arch {
            if params[0].ncols() != hidden || params[2].nrows() != hidden {
                return Err(Error::shape("hidden width disagrees with weights"));
            }
        }
        let params = params.into_iter().map(|p| p.as_standard_layout().to_owned()).collect();
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn d_in(&self) -> usize {
        self.params[0].nrows()
    }

    pub fn d_out(&self) -> usize {
        self.params[self.params.len() - 1].ncols()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<EncoderCache> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape(format!("input width {} != encoder d_in {}", x.ncols(), self.d_in())));
        }
        let (hidden, raw) = match self.arch {
            EncoderArch::Linear => (None, x.dot(&self.params[0]) + &self.params[1]),
            EncoderArch::Mlp { .. } => {
                let a = (x.dot(&self.params[0]) + &self.params[1]).mapv(f64::tanh);
                let raw = a.dot(&self.params[2]) + &self.params[3];
                (Some(a), raw)
            }
        };
        let mut output = raw;
        let mut norms = Vec::with_capacity(output.nrows());
        for mut row in output.rows_mut() {
            let n = view_dot(row.view(), row.view()).sqrt();
            if !(n >= ZERO_NORM_THRESHOLD) {
                return Err(Error::ZeroVector);
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(EncoderCache { input: x.clone(), hidden, output, norms })
    }

    pub fn encode(&self, x: &Array2<f64>, modality: Modality) -> Result<EmbeddingMatrix> {
        Ok(EmbeddingMatrix::unit_rows(self.forward(x)?.output, modality))
    }

    /// Parameter gradients given `dL/d(output)` for the cached forward pass.
    pub fn backward(&self, cache: &EncoderCache, grad_out: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if grad_out.dim() != cache.output.dim() {
            return Err(Error::shape(format!("grad {:?} vs output {:?}", grad_out.dim(), cache.output.dim())));
        }
        let mut g_raw = grad_out.clone();
        for (j, mut row) in g_raw.rows_mut().into_iter().enumerate() {
            let y = cache.output.row(j);
            let proj = view_dot(y, row.view());
            let n = cache.norms[j];
            row.zip_mut_with(&y, |g, &yv| *g = (*g - yv * proj) / n);
        }
        let bias_grad = |g: &Array2<f64>| g.sum_axis(Axis(0)).insert_axis(Axis(0));
        match (&self.arch, &cache.hidden) {
            (EncoderArch::Linear, _) => Ok(vec![cache.input.t().dot(&g_raw), bias_grad(&g_raw)]),
            (EncoderArch::Mlp { .. }, Some(a)) => {
                let g_w2 = a.t().dot(&g_raw);
                let g_b2 = bias_grad(&g_raw);
                let mut g_h = g_raw.dot(&self.params[2].t());
                g_h.zip_mut_with(a, |g, &av| *g *= 1.0 - av * av);
                Ok(vec![cache.input.t().dot(&g_h), bias_grad(&g_h), g_w2, g_b2])
            }
            (EncoderArch::Mlp { .. }, None) => unreachable!("mlp forward always caches the hidden layer"),
        }
    }
}
