//! `GCLC` checkpoint files.
//!
//! ```text
//! "GCLC" | version u16 | config hash [32] | seed u64 | step u64 | tau f64 | learnable u8
//! 2 x encoder layout: arch u8 | hidden u32 | n_tensors u8 | n_tensors x (rows u32, cols u32)
//! parameters: every tensor as f64 (image, text, then log-tau 1x1 when learnable)
//! optimizer: beta1 f64 | beta2 f64 | eps f64 | weight_decay f64 | step u64
//!            first moments, second moments (same shapes as the parameters)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::encoder::{EncoderArch, ToyEncoder};
use super::optim::{AdamWConfig, OptimizerState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCLC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub tau: f64,
    /// Present when the temperature is trained; `tau == exp(log_tau)`.
    pub log_tau: Option<f64>,
    pub image: ToyEncoder,
    pub text: ToyEncoder,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Parameter tensors in optimizer order.
    pub fn param_tensors(&self) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = self.image.params().to_vec();
        out.extend(self.text.params().iter().cloned());
        if let Some(lt) = self.log_tau {
            out.push(Array2::from_elem((1, 1), lt));
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.tau.to_le_bytes());
        b.push(self.log_tau.is_some() as u8);
        for enc in [&self.image, &self.text] {
            let (tag, hidden) = match enc.arch() {
                EncoderArch::Linear => (0u8, 0u32),
                EncoderArch::Mlp { hidden } => (1u8, hidden as u32),
            };
            b.push(tag);
            b.extend_from_slice(&hidden.to_le_bytes());
            b.push(enc.params().len() as u8);
            for p in enc.params() {
                b.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
                b.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
            }
        }
        let put = |b: &mut Vec<u8>, t: &Array2<f64>| {
            for x in t.iter() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        };
        for t in self.param_tensors() {
            put(&mut b, &t);
        }
        let c = &self.optimizer.config;
        for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for t in self.optimizer.first.iter().chain(&self.optimizer.second) {
            put(&mut b, t);
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad checkpoint magic".into() });
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format { offset: 4, message: format!("unsupported checkpoint version {version}") });
        }
        let config_hash: [u8; 32] = r.array()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let tau = r.f64()?;
        let learnable = r.take(1)?[0] != 0;
        let mut layouts = Vec::new();
        for _ in 0..2 {
            let tag = r.take(1)?[0];
            let hidden = u32::from_le_bytes(r.array()?) as usize;
            let arch = match tag {
                0 => EncoderArch::Linear,
                1 => EncoderArch::Mlp { hidden },
                t => return Err(r.err(format!("unknown encoder tag {t}"))),
            };
            let count = r.take(1)?[0] as usize;
            let mut shapes = Vec::with_capacity(count);
            for _ in 0..count {
                let rows = u32::from_le_bytes(r.array()?) as usize;
                let cols = u32::from_le_bytes(r.array()?) as usize;
                shapes.push((rows, cols));
            }
            layouts.push((arch, shapes));
        }
        let mut all_shapes: Vec<(usize, usize)> = layouts.iter().flat_map(|(_, s)| s.clone()).collect();
        if learnable {
            all_shapes.push((1, 1));
        }
        let params = r.tensors(&all_shapes)?;
        let mut it = params.into_iter();
        let image_params: Vec<_> = it.by_ref().take(layouts[0].1.len()).collect();
        let text_params: Vec<_> = it.by_ref().take(layouts[1].1.len()).collect();
        let log_tau = if learnable { Some(it.next().unwrap()[[0, 0]]) } else { None };
        let image = ToyEncoder::from_params(layouts[0].0, image_params)?;
        let text = ToyEncoder::from_params(layouts[1].0, text_params)?;
        let config = AdamWConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
        let opt_step = r.u64()?;
        let first = r.tensors(&all_shapes)?;
        let second = r.tensors(&all_shapes)?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            seed,
            step,
            tau,
            log_tau,
            image,
            text,
            optimizer: OptimizerState { config, step: opt_step, first, second },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: String) -> Error {
        Error::Format { offset: self.pos as u64, message }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn tensors(&mut self, shapes: &[(usize, usize)]) -> Result<Vec<Array2<f64>>> {
        shapes
            .iter()
            .map(|&(r, c)| {
                let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec((r, c), data).expect("shape from header"))
            })
            .collect()
    }
}
