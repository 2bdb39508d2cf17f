//! Deterministic mini-batch training of toy encoders.
//!
//! A run is a pure function of `(TrainConfig, dataset, seed)`: encoder
//! initialization draws from the seed, and each epoch's batch order comes
//! from its own seeded stream, so a run resumed from a checkpoint replays
//! the remaining steps exactly.

pub mod checkpoint;
pub mod encoder;
pub mod optim;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use encoder::{EncoderArch, EncoderCache, ToyEncoder};
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState, ScheduleConfig};

use crate::embedding::{fuse_rows, view_dot, EmbeddingMatrix, Modality, ZERO_NORM_THRESHOLD};
use crate::error::{Error, Result};
use crate::hash::canonical_hash;
use crate::losses::{symmetric_infonce, LossConfig, LossOutput, LossVariant, TripletBatch};
use crate::synthetic::SyntheticPair;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Weights of the joint pairwise + triplet objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedObjective {
    pub pairwise_weight: f64,
    pub triplet_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub embed_dim: usize,
    pub arch: EncoderArch,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub variant: LossVariant,
    pub loss: LossConfig,
    pub renormalize_fused: bool,
    pub learnable_tau: bool,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub mixed: Option<MixedObjective>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 5,
            embed_dim: 16,
            arch: EncoderArch::Linear,
            base_lr: 1e-3,
            warmup_steps: 500,
            optimizer: AdamWConfig::default(),
            variant: LossVariant::Gcl,
            loss: LossConfig::default(),
            renormalize_fused: true,
            learnable_tau: false,
            freeze_image: false,
            freeze_text: false,
            mixed: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if let EncoderArch::Mlp { hidden: 0 } = self.arch {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.loss.validate()?;
        if self.learnable_tau && !(TAU_MIN..=TAU_MAX).contains(&self.loss.tau) {
            return Err(Error::Config(format!("initial tau {} outside [{TAU_MIN}, {TAU_MAX}]", self.loss.tau)));
        }
        if let Some(m) = self.mixed {
            let ok = m.pairwise_weight >= 0.0 && m.triplet_weight >= 0.0;
            if !ok || !(m.pairwise_weight + m.triplet_weight > 0.0) {
                return Err(Error::Config("mixed objective weights must be non-negative with a positive sum".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> usize {
        n_pairs / self.batch_size
    }
}

/// Stacks pair features into `(images, texts)` matrices of shape `n x d_in`.
pub fn features<'a>(pairs: impl IntoIterator<Item = &'a SyntheticPair>) -> (Array2<f64>, Array2<f64>) {
    let mut img = Vec::new();
    let mut txt = Vec::new();
    let mut n = 0;
    let mut d = 0;
    for p in pairs {
        d = p.x_img.len();
        img.extend(p.x_img.iter().map(|&x| x as f64));
        txt.extend(p.x_txt.iter().map(|&x| x as f64));
        n += 1;
    }
    (
        Array2::from_shape_vec((n, d), img).expect("uniform feature width"),
        Array2::from_shape_vec((n, d), txt).expect("uniform feature width"),
    )
}

/// Encoded batch plus the caches needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: TripletBatch,
    pub image_cache: EncoderCache,
    pub text_cache: EncoderCache,
}

pub fn forward_batch(
    image: &ToyEncoder,
    text: &ToyEncoder,
    x_img: &Array2<f64>,
    x_txt: &Array2<f64>,
    renormalize: bool,
) -> Result<ForwardPass> {
    if x_img.nrows() == 0 {
        return Err(Error::BatchTooSmall { got: 0, need: 1 });
    }
    if x_img.nrows() != x_txt.nrows() {
        return Err(Error::shape(format!("{} image rows vs {} text rows", x_img.nrows(), x_txt.nrows())));
    }
    if image.d_out() != text.d_out() {
        return Err(Error::shape("image and text encoders disagree on embedding width"));
    }
    let image_cache = image.forward(x_img)?;
    let text_cache = text.forward(x_txt)?;
    let images = EmbeddingMatrix::unit_rows(image_cache.output().clone(), Modality::Image);
    let texts = EmbeddingMatrix::unit_rows(text_cache.output().clone(), Modality::Text);
    let fused = fuse_rows(&images, &texts, renormalize)?;
    Ok(ForwardPass { batch: TripletBatch::new(images, texts, fused)?, image_cache, text_cache })
}

/// Chain rule through `e_it = e_i + e_t` (optionally renormalized). Both
/// inputs receive the same gradient: `g` unchanged without renormalization,
/// otherwise `(I - u u^T) g / |s|` with `s = e_i + e_t`, `u = s / |s|`.
pub fn fusion_backprop(
    grad_fused: &Array2<f64>,
    e_i: &Array2<f64>,
    e_t: &Array2<f64>,
    renormalize: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if grad_fused.dim() != e_i.dim() || e_i.dim() != e_t.dim() {
        return Err(Error::shape(format!(
            "grad {:?}, e_i {:?}, e_t {:?}",
            grad_fused.dim(),
            e_i.dim(),
            e_t.dim()
        )));
    }
    if !renormalize {
        return Ok((grad_fused.clone(), grad_fused.clone()));
    }
    let s = e_i + e_t;
    let mut out = grad_fused.clone();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let sj = s.row(j);
        let n = view_dot(sj, sj).sqrt();
        if !(n >= ZERO_NORM_THRESHOLD) {
            return Err(Error::ZeroVector);
        }
        let proj = view_dot(sj, row.view()) / n;
        row.zip_mut_with(&sj, |g, &sv| *g = (*g - (sv / n) * proj) / n);
    }
    Ok((out.clone(), out))
}

/// Loss value and parameter gradients for one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub value: f64,
    pub per_term: BTreeMap<String, f64>,
    pub image: Vec<Array2<f64>>,
    pub text: Vec<Array2<f64>>,
    pub tau: f64,
}

/// Pairwise objective on one batch, differentiated through fusion and both
/// encoders.
pub fn pairwise_objective(
    image: &ToyEncoder,
    text: &ToyEncoder,
    x_img: &Array2<f64>,
    x_txt: &Array2<f64>,
    variant: LossVariant,
    loss: &LossConfig,
    renormalize: bool,
) -> Result<ObjectiveGrads> {
    let pass = forward_batch(image, text, x_img, x_txt, renormalize)?;
    let out: LossOutput = variant.evaluate(&pass.batch, loss)?;
    let mut g_img = out.grad_images.clone();
    let mut g_txt = out.grad_texts.clone();
    if variant.uses_fused(loss) {
        let (fi, ft) =
            fusion_backprop(&out.grad_fused, pass.batch.images.rows(), pass.batch.texts.rows(), renormalize)?;
        g_img += &fi;
        g_txt += &ft;
    }
    Ok(ObjectiveGrads {
        value: out.value,
        per_term: out.named_terms(),
        image: image.backward(&pass.image_cache, &g_img)?,
        text: text.backward(&pass.text_cache, &g_txt)?,
        tau: out.grad_tau,
    })
}

/// Feature matrices for a batch of (anchor pair, partner pair) groups that
/// share a concept.
#[derive(Debug, Clone)]
pub struct TripletFeatures {
    pub anchor_img: Array2<f64>,
    pub anchor_txt: Array2<f64>,
    pub partner_img: Array2<f64>,
    pub partner_txt: Array2<f64>,
}

/// Two-scenario triplet objective built from concept-sharing pairs:
/// fused anchor -> partner image, and anchor text -> fused partner, each a
/// symmetric two-way loss; the result is their mean.
pub fn triplet_objective(
    image: &ToyEncoder,
    text: &ToyEncoder,
    feats: &TripletFeatures,
    tau: f64,
    renormalize: bool,
) -> Result<ObjectiveGrads> {
    let a = forward_batch(image, text, &feats.anchor_img, &feats.anchor_txt, renormalize)?;
    let b = forward_batch(image, text, &feats.partner_img, &feats.partner_txt, renormalize)?;
    let (v1, _, _, g_fa, g_ib, gt1) = symmetric_infonce(a.batch.fused.rows(), b.batch.images.rows(), tau);
    let (v2, _, _, g_ta, g_fb, gt2) = symmetric_infonce(a.batch.texts.rows(), b.batch.fused.rows(), tau);
    let half = |m: Array2<f64>| m * 0.5;
    let (fa_i, fa_t) = fusion_backprop(&half(g_fa), a.batch.images.rows(), a.batch.texts.rows(), renormalize)?;
    let (fb_i, fb_t) = fusion_backprop(&half(g_fb), b.batch.images.rows(), b.batch.texts.rows(), renormalize)?;
    let g_img_a = fa_i;
    let g_txt_a = fa_t + &half(g_ta);
    let g_img_b = fb_i + &half(g_ib);
    let g_txt_b = fb_t;
    let sum = |x: Vec<Array2<f64>>, y: Vec<Array2<f64>>| x.into_iter().zip(y).map(|(p, q)| p + q).collect();
    Ok(ObjectiveGrads {
        value: 0.5 * (v1 + v2),
        per_term: BTreeMap::from([("it2i_triplet".into(), v1), ("t2it_triplet".into(), v2)]),
        image: sum(image.backward(&a.image_cache, &g_img_a)?, image.backward(&b.image_cache, &g_img_b)?),
        text: sum(text.backward(&a.text_cache, &g_txt_a)?, text.backward(&b.text_cache, &g_txt_b)?),
        tau: 0.5 * (gt1 + gt2),
    })
}

/// Consecutive same-concept pairs, taken two at a time.
pub fn triplet_groups(pairs: &[SyntheticPair]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < pairs.len() {
        if pairs[i].concept_id == pairs[i + 1].concept_id {
            out.push((i, i + 1));
            let c = pairs[i].concept_id;
            i += 2;
            while i < pairs.len() && pairs[i].concept_id == c {
                i += 1;
            }
        } else {
            i += 1;
        }
    }
    out
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
    pub per_term: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    /// Stop once this many steps have completed (a partial run).
    pub max_steps: Option<usize>,
    /// Where to dump the pre-step state if a step produces non-finite values.
    pub dump_path: Option<PathBuf>,
    /// Hash stored in checkpoints; defaults to the hash of the train config.
    pub config_hash: Option<[u8; 32]>,
    /// Concept-sharing pairs for the triplet half of a mixed objective.
    pub triplets: Option<&'a [SyntheticPair]>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Records for the steps run in this call.
    pub log: Vec<StepRecord>,
    pub total_steps: usize,
}

impl TrainOutcome {
    pub fn finished(&self) -> bool {
        self.checkpoint.step as usize == self.total_steps
    }
}

fn epoch_order(seed: u64, stream: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const TRIPLET_STREAM_BASE: u64 = 1 << 32;

pub fn train(config: &TrainConfig, dataset: &[SyntheticPair], opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let n = dataset.len();
    let spe = config.steps_per_epoch(n);
    if spe == 0 {
        return Err(Error::BatchTooSmall { got: n, need: config.batch_size });
    }
    let total = config.epochs * spe;
    let warmup = if config.warmup_steps > total {
        log::warn!("warmup_steps {} exceeds total steps {total}; warming up over the whole run", config.warmup_steps);
        total
    } else {
        config.warmup_steps
    };
    let sched = ScheduleConfig::new(warmup, total, config.base_lr)?;
    let config_hash = match opts.config_hash {
        Some(h) => h,
        None => canonical_hash(config)?,
    };
    let (x_img, x_txt) = features(dataset);
    let d_in = x_img.ncols();

    let mixed = config.mixed.filter(|m| m.triplet_weight > 0.0);
    let triplet_data = match (mixed, opts.triplets) {
        (Some(_), Some(t)) => {
            let groups = triplet_groups(t);
            if groups.is_empty() {
                return Err(Error::Config("triplet dataset has no concept-sharing pairs".into()));
            }
            let (ti, tt) = features(t);
            Some((groups, ti, tt))
        }
        (Some(_), None) => return Err(Error::Config("mixed objective needs a triplet dataset".into())),
        (None, _) => None,
    };
    let pairwise_weight = config.mixed.map_or(1.0, |m| m.pairwise_weight);

    let mut ck = match opts.resume {
        Some(ck) => {
            if ck.config_hash != config_hash || ck.seed != config.seed {
                return Err(Error::Config("checkpoint was produced by a different configuration".into()));
            }
            if ck.step as usize > total {
                return Err(Error::Config(format!("checkpoint step {} beyond run length {total}", ck.step)));
            }
            ck
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let image = ToyEncoder::random(config.arch, d_in, config.embed_dim, &mut rng);
            let text = ToyEncoder::random(config.arch, d_in, config.embed_dim, &mut rng);
            let mut ck = Checkpoint {
                config_hash,
                seed: config.seed,
                step: 0,
                tau: config.loss.tau,
                log_tau: config.learnable_tau.then(|| config.loss.tau.ln()),
                image,
                text,
                optimizer: OptimizerState::new(config.optimizer, &[]),
            };
            ck.optimizer = OptimizerState::new(config.optimizer, &ck.param_tensors());
            ck
        }
    };
    if ck.image.d_in() != d_in {
        return Err(Error::shape(format!("encoder expects d_in={}, dataset has {d_in}", ck.image.d_in())));
    }

    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let bs = config.batch_size;
    let mut order: Option<(usize, Vec<usize>)> = None;
    let mut triplet_order: Option<(usize, Vec<usize>)> = None;
    let mut log = Vec::new();
    let n_image = ck.image.params().len();
    let n_text = ck.text.params().len();

    while (ck.step as usize) < stop {
        let step = ck.step as usize;
        let epoch = step / spe;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(config.seed, epoch as u64 + 1, n)));
        }
        let idx = &order.as_ref().unwrap().1[(step % spe) * bs..(step % spe + 1) * bs];
        let xb_img = x_img.select(Axis(0), idx);
        let xb_txt = x_txt.select(Axis(0), idx);
        let tau = ck.log_tau.map_or(config.loss.tau, f64::exp);
        let loss_cfg = LossConfig { tau, ..config.loss.clone() };

        let mut obj = pairwise_objective(
            &ck.image,
            &ck.text,
            &xb_img,
            &xb_txt,
            config.variant,
            &loss_cfg,
            config.renormalize_fused,
        )?;
        let mut total_value = obj.value;
        if pairwise_weight != 1.0 {
            total_value *= pairwise_weight;
            scale_all(&mut obj, pairwise_weight);
        }
        let mut triplet_loss = None;
        if let (Some(m), Some((groups, ti, tt))) = (mixed, &triplet_data) {
            let tbs = bs.min(groups.len());
            let per_cycle = groups.len() / tbs;
            let cycle = step / per_cycle;
            if triplet_order.as_ref().map(|(c, _)| *c) != Some(cycle) {
                triplet_order = Some((cycle, epoch_order(config.seed, TRIPLET_STREAM_BASE + cycle as u64, groups.len())));
            }
            let slot = step % per_cycle;
            let picked = &triplet_order.as_ref().unwrap().1[slot * tbs..(slot + 1) * tbs];
            let anchors: Vec<usize> = picked.iter().map(|&g| groups[g].0).collect();
            let partners: Vec<usize> = picked.iter().map(|&g| groups[g].1).collect();
            let feats = TripletFeatures {
                anchor_img: ti.select(Axis(0), &anchors),
                anchor_txt: tt.select(Axis(0), &anchors),
                partner_img: ti.select(Axis(0), &partners),
                partner_txt: tt.select(Axis(0), &partners),
            };
            let mut trip = triplet_objective(&ck.image, &ck.text, &feats, tau, config.renormalize_fused)?;
            triplet_loss = Some(trip.value);
            total_value += m.triplet_weight * trip.value;
            scale_all(&mut trip, m.triplet_weight);
            for (a, b) in obj.image.iter_mut().zip(&trip.image) {
                *a += b;
            }
            for (a, b) in obj.text.iter_mut().zip(&trip.text) {
                *a += b;
            }
            obj.tau += trip.tau;
        }

        if !total_value.is_finite() {
            dump(&ck, opts.dump_path.as_ref());
            return Err(Error::DivergenceDetected { step, value: total_value });
        }

        let mut grads: Vec<Array2<f64>> = Vec::with_capacity(n_image + n_text + 1);
        grads.extend(obj.image);
        grads.extend(obj.text);
        if ck.log_tau.is_some() {
            grads.push(Array2::from_elem((1, 1), obj.tau * tau));
        }
        let lr = lr_at(step, &sched)?;
        let mut params = ck.param_tensors();
        if let Err(e) = adamw_step(&mut params, &grads, &mut ck.optimizer, lr) {
            dump(&ck, opts.dump_path.as_ref());
            return Err(match e {
                Error::NonFiniteGradient { tensor, .. } => Error::NonFiniteGradient { step, tensor },
                other => other,
            });
        }
        let mut it = params.into_iter();
        let new_image: Vec<_> = it.by_ref().take(n_image).collect();
        let new_text: Vec<_> = it.by_ref().take(n_text).collect();
        if !config.freeze_image {
            ck.image.params_mut().clone_from_slice(&new_image);
        }
        if !config.freeze_text {
            ck.text.params_mut().clone_from_slice(&new_text);
        }
        if let Some(lt) = it.next() {
            let clamped = lt[[0, 0]].clamp(TAU_MIN.ln(), TAU_MAX.ln());
            ck.log_tau = Some(clamped);
            ck.tau = clamped.exp();
        }
        ck.step += 1;
        log.push(StepRecord {
            step,
            epoch,
            lr,
            tau,
            loss: total_value,
            per_term: obj.per_term,
            triplet_loss,
        });
    }
    Ok(TrainOutcome { checkpoint: ck, log, total_steps: total })
}

fn scale_all(obj: &mut ObjectiveGrads, w: f64) {
    for g in obj.image.iter_mut().chain(obj.text.iter_mut()) {
        *g *= w;
    }
    obj.tau *= w;
}

fn dump(ck: &Checkpoint, path: Option<&PathBuf>) {
    if let Some(p) = path {
        match ck.write(p) {
            Ok(()) => log::error!("training state dumped to {}", p.display()),
            Err(e) => log::error!("could not dump training state: {e}"),
        }
    }
}

/// Encodes pairs with trained encoders.
pub fn encode_pairs(
    image: &ToyEncoder,
    text: &ToyEncoder,
    pairs: &[SyntheticPair],
    renormalize: bool,
) -> Result<TripletBatch> {
    let (xi, xt) = features(pairs);
    Ok(forward_batch(image, text, &xi, &xt, renormalize)?.batch)
}
