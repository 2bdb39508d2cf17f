//! Paired image/text features from a shared latent model, plus the `GCLD`
//! binary dataset format.
//!
//! Each concept draws a unit latent `z` of length `k`. Its pairs are
//! `x_img = A_img z + sigma * noise` and `x_txt = A_txt z + sigma * noise`,
//! where `A_img` and `A_txt` are fixed `d_in x k` matrices with orthonormal
//! columns. The projections depend only on `seed`, so train and eval splits
//! generated with the same seed share them; the samples come from a
//! split-specific stream.
//!
//! File layout (little-endian):
//!
//! ```text
//! "GCLD" | version u16 | d_in u32 | n_pairs u32 | k u32 | sigma f32 | seed u64
//! n_pairs x (concept_id u32 | x_img d_in x f32 | x_txt d_in x f32)
//! ```
//!
//! A JSON manifest with the same parameters plus split and duplication is
//! written next to the binary file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCLD";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
    /// Query/candidate groups for the mixed pairwise + triplet objective.
    Triplet,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
            Split::Triplet => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub concept_id: u32,
    pub x_img: Vec<f32>,
    pub x_txt: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_pairs: usize,
    pub d_in: usize,
    pub k: usize,
    pub sigma: f32,
    pub seed: u64,
    pub split: Split,
    /// Pairs per concept; the last concept may be short.
    pub duplication: usize,
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub n_pairs: usize,
    pub k: usize,
    pub d_in: usize,
    pub sigma: f32,
    pub seed: u64,
    #[serde(default)]
    pub split: Split,
    #[serde(default = "one")]
    pub duplication: usize,
}

fn one() -> usize {
    1
}

impl GenerateParams {
    pub fn new(n_pairs: usize, k: usize, d_in: usize, sigma: f32, seed: u64) -> Self {
        Self { n_pairs, k, d_in, sigma, seed, split: Split::Train, duplication: 1 }
    }

    pub fn split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn duplication(mut self, duplication: usize) -> Self {
        self.duplication = duplication;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > self.d_in {
            return Err(Error::InvalidDims { k: self.k, d_in: self.d_in });
        }
        if self.k == 0 {
            return Err(Error::Config("latent dimension k must be positive".into()));
        }
        if self.n_pairs < 2 {
            return Err(Error::Config(format!("n_pairs must be at least 2, got {}", self.n_pairs)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.duplication == 0 {
            return Err(Error::Config("duplication must be at least 1".into()));
        }
        if u32::try_from(self.n_pairs).is_err() || u32::try_from(self.d_in).is_err() {
            return Err(Error::Config("sizes must fit in u32".into()));
        }
        Ok(())
    }
}

/// The two fixed modality projections for a seed.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub a_img: Array2<f64>,
    pub a_txt: Array2<f64>,
}

impl LatentModel {
    pub fn new(seed: u64, k: usize, d_in: usize) -> Result<Self> {
        if k > d_in {
            return Err(Error::InvalidDims { k, d_in });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_img = orthonormal_columns(&mut rng, d_in, k);
        let a_txt = orthonormal_columns(&mut rng, d_in, k);
        Ok(Self { a_img, a_txt })
    }

    fn project(a: &Array2<f64>, z: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..a.nrows())
            .map(|r| {
                let signal: f64 = a.row(r).iter().zip(z).map(|(x, y)| x * y).sum();
                let noise: f64 = StandardNormal.sample(rng);
                (signal + sigma * noise) as f32
            })
            .collect()
    }
}

/// Gaussian matrix orthonormalized column by column (modified Gram-Schmidt).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut *rng));
        let mut ok = true;
        for c in 0..cols {
            for p in 0..c {
                let proj: f64 = (0..rows).map(|r| m[[r, c]] * m[[r, p]]).sum();
                for r in 0..rows {
                    m[[r, c]] -= proj * m[[r, p]];
                }
            }
            let n: f64 = (0..rows).map(|r| m[[r, c]] * m[[r, c]]).sum::<f64>().sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..rows {
                m[[r, c]] /= n;
            }
        }
        if ok {
            return m;
        }
    }
}

fn unit_latent(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return z.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic in every field of `params`.
pub fn generate_dataset(params: &GenerateParams) -> Result<(Vec<SyntheticPair>, DatasetManifest)> {
    params.validate()?;
    let model = LatentModel::new(params.seed, params.k, params.d_in)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(params.split.stream());
    let sigma = params.sigma as f64;
    let mut pairs = Vec::with_capacity(params.n_pairs);
    let mut concept = 0u32;
    while pairs.len() < params.n_pairs {
        let z = unit_latent(&mut rng, params.k);
        for _ in 0..params.duplication {
            if pairs.len() == params.n_pairs {
                break;
            }
            let x_img = LatentModel::project(&model.a_img, &z, sigma, &mut rng);
            let x_txt = LatentModel::project(&model.a_txt, &z, sigma, &mut rng);
            pairs.push(SyntheticPair { concept_id: concept, x_img, x_txt });
        }
        concept += 1;
    }
    let manifest = DatasetManifest {
        n_pairs: params.n_pairs,
        d_in: params.d_in,
        k: params.k,
        sigma: params.sigma,
        seed: params.seed,
        split: params.split,
        duplication: params.duplication,
    };
    Ok((pairs, manifest))
}

/// Sidecar manifest path: `data.gcld` -> `data.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_dataset(pairs: &[SyntheticPair], manifest: &DatasetManifest) -> Result<Vec<u8>> {
    if pairs.len() != manifest.n_pairs {
        return Err(Error::shape(format!("{} pairs but manifest says {}", pairs.len(), manifest.n_pairs)));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + pairs.len() * (4 + 8 * manifest.d_in));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.d_in as u32).to_le_bytes());
    buf.extend_from_slice(&(manifest.n_pairs as u32).to_le_bytes());
    buf.extend_from_slice(&(manifest.k as u32).to_le_bytes());
    buf.extend_from_slice(&manifest.sigma.to_le_bytes());
    buf.extend_from_slice(&manifest.seed.to_le_bytes());
    for p in pairs {
        if p.x_img.len() != manifest.d_in || p.x_txt.len() != manifest.d_in {
            return Err(Error::shape(format!("pair feature length differs from d_in={}", manifest.d_in)));
        }
        buf.extend_from_slice(&p.concept_id.to_le_bytes());
        for x in p.x_img.iter().chain(&p.x_txt) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes the binary file and its JSON sidecar.
pub fn write_dataset(pairs: &[SyntheticPair], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let bytes = encode_dataset(pairs, manifest)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.take::<2>(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take::<4>(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take::<8>(what).map(u64::from_le_bytes)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.take::<4>(what).map(f32::from_le_bytes)
    }
}

/// Parses a `GCLD` buffer. Split is not part of the binary header and
/// defaults to `Train`; duplication is inferred from the concept ids.
pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<SyntheticPair>, DatasetManifest)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let d_in = cur.u32("d_in")? as usize;
    let n_pairs = cur.u32("n_pairs")? as usize;
    let k = cur.u32("k")? as usize;
    let sigma = cur.f32("sigma")?;
    let seed = cur.u64("seed")?;
    if k > d_in {
        return Err(Error::Format { offset: 14, message: format!("header k={k} exceeds d_in={d_in}") });
    }
    let record = 4 + 8 * d_in;
    let expected = HEADER_LEN + n_pairs * record;
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes after {n_pairs} records", bytes.len() - expected),
        });
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        if bytes.len() < cur.pos + record {
            return Err(Error::Format {
                offset: cur.pos as u64,
                message: format!("header declares {n_pairs} pairs but record {i} is truncated"),
            });
        }
        let concept_id = cur.u32("concept id")?;
        let mut read = |n: usize| -> Result<Vec<f32>> { (0..n).map(|_| cur.f32("feature")).collect() };
        let x_img = read(d_in)?;
        let x_txt = read(d_in)?;
        pairs.push(SyntheticPair { concept_id, x_img, x_txt });
    }
    let duplication = infer_duplication(&pairs);
    let manifest = DatasetManifest { n_pairs, d_in, k, sigma, seed, split: Split::Train, duplication };
    Ok((pairs, manifest))
}

fn infer_duplication(pairs: &[SyntheticPair]) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for p in pairs {
        if Some(p.concept_id) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(p.concept_id);
        }
        best = best.max(run);
    }
    best.max(1)
}

/// Reads a dataset. When the JSON sidecar exists its split is used and its
/// other fields must agree with the binary header.
pub fn read_dataset(path: &Path) -> Result<(Vec<SyntheticPair>, DatasetManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pairs, mut manifest) = decode_dataset(&bytes)?;
    let side = manifest_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: DatasetManifest = serde_json::from_str(&text)?;
        manifest.split = sidecar.split;
        if sidecar != manifest {
            return Err(Error::Format {
                offset: 0,
                message: format!("sidecar {} disagrees with binary header", side.display()),
            });
        }
    }
    Ok((pairs, manifest))
}
