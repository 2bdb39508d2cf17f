//! Contrastive objectives over image, text and fused embeddings.
//!
//! Every loss here is a sum of softmax cross-entropy rows. A row is defined
//! by a query embedding `e_a^j`, its positive `e_b^j`, and the set of logits
//! admitted into the denominator. The variants differ only in which logits
//! are admitted:
//!
//! * standard two-way loss: the full row of the opposite modality;
//! * generalized loss, masked mode: the positive plus every off-diagonal
//!   entry of the three blocks `(a, i)`, `(a, t)`, `(a, it)`, so the
//!   query's own embedding and its other same-sample positive never act as
//!   negatives;
//! * generalized loss, literal mode: every entry of the three blocks;
//! * intra-modality separation: the cross-modal positive plus the
//!   off-diagonal entries of the query's own modality.
//!
//! Gradients are analytic and returned for every input matrix. The fused
//! matrix is treated as an independent input; chaining through the fusion
//! is left to the caller.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::{check_tau, dot, EmbeddingMatrix, Modality};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;

/// Ordered (query modality, positive modality) pair, written `a2b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityPair {
    pub query: Modality,
    pub key: Modality,
}

impl ModalityPair {
    pub const fn new(query: Modality, key: Modality) -> Self {
        Self { query, key }
    }
}

impl fmt::Display for ModalityPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.query, self.key)
    }
}

impl FromStr for ModalityPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, k) = s
            .split_once('2')
            .ok_or_else(|| Error::Config(format!("modality pair '{s}' is not of the form a2b")))?;
        Ok(Self::new(q.parse()?, k.parse()?))
    }
}

impl Serialize for ModalityPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

const I: Modality = Modality::Image;
const T: Modality = Modality::Text;
const IT: Modality = Modality::Fused;

/// Non-empty, duplicate-free set of positive modality pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet(Vec<ModalityPair>);

impl PairSet {
    pub const FULL: [ModalityPair; 6] = [
        ModalityPair::new(I, T),
        ModalityPair::new(I, IT),
        ModalityPair::new(T, I),
        ModalityPair::new(T, IT),
        ModalityPair::new(IT, I),
        ModalityPair::new(IT, T),
    ];

    pub fn new(pairs: impl IntoIterator<Item = ModalityPair>) -> Result<Self> {
        let mut out: Vec<ModalityPair> = Vec::new();
        for p in pairs {
            if p.query == p.key {
                return Err(Error::Config(format!("pair {p} has identical modalities")));
            }
            if out.contains(&p) {
                return Err(Error::DuplicatePair(p.to_string()));
            }
            out.push(p);
        }
        if out.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        // Canonical order so equal sets compare and hash equal.
        out.sort_by_key(|p| Self::FULL.iter().position(|f| f == p));
        Ok(Self(out))
    }

    /// All six ordered pairs over {i, t, it}.
    pub fn full() -> Self {
        Self(Self::FULL.to_vec())
    }

    /// `{(i,t), (t,i)}`, the standard two-way pair set.
    pub fn cross_modal() -> Self {
        Self(vec![ModalityPair::new(I, T), ModalityPair::new(T, I)])
    }

    pub fn without(&self, drop: &[ModalityPair]) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|p| !drop.contains(p)))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalityPair> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, p: &ModalityPair) -> bool {
        self.0.contains(p)
    }

    fn involves_fused(&self) -> bool {
        self.0.iter().any(|p| p.query == IT || p.key == IT)
    }
}

impl Default for PairSet {
    fn default() -> Self {
        Self::full()
    }
}

impl Serialize for PairSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|p| p.to_string()))
    }
}

impl<'de> Deserialize<'de> for PairSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let pairs = names
            .iter()
            .map(|n| n.parse::<ModalityPair>())
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        PairSet::new(pairs).map_err(serde::de::Error::custom)
    }
}

/// How the generalized loss assembles each row's denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Self-similarities and the non-current same-sample positive are masked.
    #[default]
    AlgorithmMasked,
    /// Sum over every modality and every sample, no exclusions.
    EquationLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub pair_set: PairSet,
    pub denominator_mode: DenominatorMode,
    /// Divisor applied to the summed row losses; `|pair_set| * N` when unset.
    pub normalization: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            pair_set: PairSet::full(),
            denominator_mode: DenominatorMode::AlgorithmMasked,
            normalization: None,
        }
    }
}

impl LossConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self { tau, ..Self::default() }
    }

    pub fn normalization_for(&self, n: usize) -> f64 {
        self.normalization.unwrap_or((self.pair_set.len() * n) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if let Some(z) = self.normalization {
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::Config(format!("normalization must be positive, got {z}")));
            }
        }
        Ok(())
    }
}

/// Aligned image, text and fused embeddings; row `j` of each comes from pair `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub images: EmbeddingMatrix,
    pub texts: EmbeddingMatrix,
    pub fused: EmbeddingMatrix,
}

impl TripletBatch {
    pub fn new(images: EmbeddingMatrix, texts: EmbeddingMatrix, fused: EmbeddingMatrix) -> Result<Self> {
        let shape = images.rows().dim();
        if texts.rows().dim() != shape || fused.rows().dim() != shape {
            return Err(Error::shape(format!(
                "batch matrices disagree: {:?}, {:?}, {:?}",
                shape,
                texts.rows().dim(),
                fused.rows().dim()
            )));
        }
        if images.modality() != I || texts.modality() != T || fused.modality() != IT {
            return Err(Error::shape("batch matrices carry the wrong modality tags"));
        }
        if shape.1 == 0 {
            return Err(Error::shape("embedding dimension is zero"));
        }
        Ok(Self { images, texts, fused })
    }

    pub fn n(&self) -> usize {
        self.images.n()
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn matrix(&self, m: Modality) -> &EmbeddingMatrix {
        match m {
            Modality::Image => &self.images,
            Modality::Text => &self.texts,
            Modality::Fused => &self.fused,
        }
    }

    pub fn matrix_mut(&mut self, m: Modality) -> &mut EmbeddingMatrix {
        match m {
            Modality::Image => &mut self.images,
            Modality::Text => &mut self.texts,
            Modality::Fused => &mut self.fused,
        }
    }

    /// Applies one row permutation to all three matrices.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |m: &EmbeddingMatrix| {
            let rows = m.rows().select(ndarray::Axis(0), perm);
            EmbeddingMatrix::new(rows, m.modality())
        };
        Self { images: pick(&self.images), texts: pick(&self.texts), fused: pick(&self.fused) }
    }
}

/// The 3x3 grid of `N x N` logit blocks for one batch.
#[derive(Debug, Clone)]
pub struct SimilarityGrid {
    n: usize,
    mode: DenominatorMode,
    blocks: Vec<Array2<f64>>,
}

impl SimilarityGrid {
    pub fn new(batch: &TripletBatch, tau: f64, mode: DenominatorMode) -> Result<Self> {
        check_tau(tau)?;
        let mut blocks = Vec::with_capacity(9);
        for a in Modality::ALL {
            for b in Modality::ALL {
                blocks.push(logits(batch.matrix(a).rows(), batch.matrix(b).rows(), tau));
            }
        }
        Ok(Self { n: batch.n(), mode, blocks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn block(&self, query: Modality, key: Modality) -> &Array2<f64> {
        &self.blocks[query.index() * 3 + key.index()]
    }

    /// Whether logit `(j, k)` of block `(positive.query, m)` enters the
    /// denominator of row `j` for `positive`.
    pub fn admits(&self, positive: ModalityPair, j: usize, m: Modality, k: usize) -> bool {
        admits(self.mode, positive.key, j, m, k)
    }
}

fn admits(mode: DenominatorMode, positive_key: Modality, j: usize, m: Modality, k: usize) -> bool {
    match mode {
        DenominatorMode::EquationLiteral => true,
        DenominatorMode::AlgorithmMasked => k != j || m == positive_key,
    }
}

/// Identifies one reported loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Pair(ModalityPair),
    /// Cross-modal positive against same-modality negatives, for query modality `a`.
    Separation(Modality),
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossTerm::Pair(p) => p.fmt(f),
            LossTerm::Separation(m) => write!(f, "sep_{m}"),
        }
    }
}

impl Serialize for LossTerm {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Normalized loss.
    pub value: f64,
    /// Each term summed over rows and divided by `N`.
    pub per_term: BTreeMap<LossTerm, f64>,
    pub grad_images: Array2<f64>,
    pub grad_texts: Array2<f64>,
    pub grad_fused: Array2<f64>,
    /// Partial derivative with respect to the temperature.
    pub grad_tau: f64,
}

impl LossOutput {
    pub fn grad(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Image => &self.grad_images,
            Modality::Text => &self.grad_texts,
            Modality::Fused => &self.grad_fused,
        }
    }

    /// Per-term values keyed by their display names.
    pub fn named_terms(&self) -> BTreeMap<String, f64> {
        self.per_term.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

fn logits(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Array2<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = Array2::zeros((na, nb));
    for j in 0..na {
        let aj = a.row(j);
        let aj = aj.as_slice().expect("standard layout");
        for k in 0..nb {
            out[[j, k]] = dot(aj, b.row(k).as_slice().expect("standard layout")) / tau;
        }
    }
    out
}

/// Shared row-softmax machinery over a small set of input matrices
/// ("slots"). Logit blocks are computed on demand; `dL/dlogit` is
/// accumulated per block and turned into input gradients at the end.
struct Engine<'a> {
    slots: Vec<&'a Array2<f64>>,
    n: usize,
    tau: f64,
    logits: Vec<Option<Array2<f64>>>,
    coeff: Vec<Option<Array2<f64>>>,
}

impl<'a> Engine<'a> {
    fn new(slots: Vec<&'a Array2<f64>>, tau: f64) -> Self {
        let s = slots.len();
        let n = slots[0].nrows();
        Self { slots, n, tau, logits: vec![None; s * s], coeff: vec![None; s * s] }
    }

    fn idx(&self, q: usize, m: usize) -> usize {
        q * self.slots.len() + m
    }

    fn ensure(&mut self, q: usize, m: usize) {
        let i = self.idx(q, m);
        if self.logits[i].is_none() {
            self.logits[i] = Some(logits(self.slots[q], self.slots[m], self.tau));
            self.coeff[i] = Some(Array2::zeros((self.n, self.n)));
        }
    }

    /// Cross-entropy of row `j` with query slot `q`, positive `(pos, j)` and
    /// candidate entries `(m, k)` for `m` in `cands` passing `admit`.
    /// Accumulates `weight * dterm/dlogit` and returns the unweighted term.
    fn row(
        &mut self,
        q: usize,
        pos: usize,
        j: usize,
        cands: &[usize],
        admit: impl Fn(usize, usize) -> bool,
        weight: f64,
    ) -> f64 {
        debug_assert!(cands.contains(&pos) && admit(pos, j));
        for &m in cands {
            self.ensure(q, m);
        }
        let mut max = f64::NEG_INFINITY;
        for &m in cands {
            let l = self.logits[self.idx(q, m)].as_ref().unwrap();
            for k in 0..self.n {
                if admit(m, k) {
                    max = max.max(l[[j, k]]);
                }
            }
        }
        let mut sum = 0.0;
        for &m in cands {
            let l = self.logits[self.idx(q, m)].as_ref().unwrap();
            for k in 0..self.n {
                if admit(m, k) {
                    sum += (l[[j, k]] - max).exp();
                }
            }
        }
        let pos_logit = self.logits[self.idx(q, pos)].as_ref().unwrap()[[j, j]];
        for &m in cands {
            let i = self.idx(q, m);
            let l = self.logits[i].as_ref().unwrap();
            let c = self.coeff[i].as_mut().unwrap();
            for k in 0..self.n {
                if admit(m, k) {
                    c[[j, k]] += weight * (l[[j, k]] - max).exp() / sum;
                }
            }
        }
        let i = self.idx(q, pos);
        self.coeff[i].as_mut().unwrap()[[j, j]] -= weight;
        (max - pos_logit) + sum.ln()
    }

    /// Chains `dL/dlogit` back to the inputs: returns one gradient per slot
    /// and the temperature partial.
    fn finish(self) -> (Vec<Array2<f64>>, f64) {
        let s = self.slots.len();
        let d = self.slots[0].ncols();
        let mut grads = vec![Array2::zeros((self.n, d)); s];
        let mut grad_tau = 0.0;
        for q in 0..s {
            for m in 0..s {
                let i = q * s + m;
                let (Some(c), Some(l)) = (&self.coeff[i], &self.logits[i]) else { continue };
                grads[q] = &grads[q] + &(c.dot(self.slots[m]) / self.tau);
                grads[m] = &grads[m] + &(c.t().dot(self.slots[q]) / self.tau);
                grad_tau -= (c * l).sum() / self.tau;
            }
        }
        (grads, grad_tau)
    }
}

fn check_pair(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.rows().dim() != b.rows().dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.rows().dim(), b.rows().dim())));
    }
    if a.n() == 0 {
        return Err(Error::BatchTooSmall { got: 0, need: 1 });
    }
    if a.dim() == 0 {
        return Err(Error::shape("embedding dimension is zero"));
    }
    Ok(())
}

/// Symmetric two-way InfoNCE between aligned matrices `a` and `b`:
/// rows `a -> b` and `b -> a`, each over the full opposite row, divided by `2N`.
/// Returns `(value, a2b / N, b2a / N, grad_a, grad_b, grad_tau)`.
pub(crate) fn symmetric_infonce(
    a: &Array2<f64>,
    b: &Array2<f64>,
    tau: f64,
) -> (f64, f64, f64, Array2<f64>, Array2<f64>, f64) {
    let n = a.nrows();
    let norm = (2 * n) as f64;
    let mut eng = Engine::new(vec![a, b], tau);
    let (mut ab, mut ba) = (0.0, 0.0);
    for j in 0..n {
        ab += eng.row(0, 1, j, &[1], |_, _| true, 1.0 / norm);
        ba += eng.row(1, 0, j, &[0], |_, _| true, 1.0 / norm);
    }
    let (mut grads, grad_tau) = eng.finish();
    let gb = grads.pop().unwrap();
    let ga = grads.pop().unwrap();
    ((ab + ba) / norm, ab / n as f64, ba / n as f64, ga, gb, grad_tau)
}

/// Standard image-text contrastive loss over `S = {(i,t), (t,i)}`, normalized by `2N`.
pub fn cl_loss(images: &EmbeddingMatrix, texts: &EmbeddingMatrix, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    check_pair(images, texts)?;
    let (value, i2t, t2i, gi, gt, grad_tau) = symmetric_infonce(images.rows(), texts.rows(), tau);
    let mut per_term = BTreeMap::new();
    per_term.insert(LossTerm::Pair(ModalityPair::new(I, T)), i2t);
    per_term.insert(LossTerm::Pair(ModalityPair::new(T, I)), t2i);
    let grad_fused = Array2::zeros(gi.raw_dim());
    Ok(LossOutput { value, per_term, grad_images: gi, grad_texts: gt, grad_fused, grad_tau })
}

/// Generalized contrastive loss over the configured pair set.
pub fn gcl_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let n = batch.n();
    if n == 0 {
        return Err(Error::BatchTooSmall { got: 0, need: 1 });
    }
    let norm = cfg.normalization_for(n);
    let mode = cfg.denominator_mode;
    let mut eng = Engine::new(
        vec![batch.images.rows(), batch.texts.rows(), batch.fused.rows()],
        cfg.tau,
    );
    let all = [0usize, 1, 2];
    let mut per_term = BTreeMap::new();
    let mut total = 0.0;
    for pair in cfg.pair_set.iter() {
        let (q, pos) = (pair.query.index(), pair.key.index());
        let mut acc = 0.0;
        for j in 0..n {
            acc += eng.row(q, pos, j, &all, |m, k| admits(mode, pair.key, j, Modality::ALL[m], k), 1.0 / norm);
        }
        total += acc;
        per_term.insert(LossTerm::Pair(*pair), acc / n as f64);
    }
    let (mut grads, grad_tau) = eng.finish();
    let grad_fused = grads.pop().unwrap();
    let grad_texts = grads.pop().unwrap();
    let grad_images = grads.pop().unwrap();
    Ok(LossOutput { value: total / norm, per_term, grad_images, grad_texts, grad_fused, grad_tau })
}

/// Which pair group an ablation removes from the full set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drops `i2t` and `t2i`.
    CrossModal,
    /// Drops `i2it` and `t2it`.
    ItCandidate,
    /// Drops `it2i` and `it2t`.
    ItQuery,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::CrossModal, Ablation::ItCandidate, Ablation::ItQuery];

    pub fn dropped(self) -> [ModalityPair; 2] {
        match self {
            Ablation::CrossModal => [ModalityPair::new(I, T), ModalityPair::new(T, I)],
            Ablation::ItCandidate => [ModalityPair::new(I, IT), ModalityPair::new(T, IT)],
            Ablation::ItQuery => [ModalityPair::new(IT, I), ModalityPair::new(IT, T)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::CrossModal => "cross_modal",
            Ablation::ItCandidate => "it_candidate",
            Ablation::ItQuery => "it_query",
        }
    }

    pub fn pair_set(self) -> PairSet {
        PairSet::full().without(&self.dropped()).expect("four pairs remain")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Generalized loss with one pair group removed, normalized by `4N`.
/// Temperature and denominator mode come from `base`.
pub fn gcl_loss_ablation(batch: &TripletBatch, drop: Ablation, base: &LossConfig) -> Result<LossOutput> {
    let cfg = LossConfig {
        tau: base.tau,
        pair_set: drop.pair_set(),
        denominator_mode: base.denominator_mode,
        normalization: Some((4 * batch.n()) as f64),
    };
    gcl_loss(batch, &cfg)
}

/// Standard loss plus a separation term per query modality `a` in `{i, t}`:
/// the cross-modal positive against the other samples of modality `a`.
/// Both parts are normalized by `2N`.
pub fn intra_modality_separation_loss(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    check_pair(images, texts)?;
    let n = images.n();
    if n < 2 {
        return Err(Error::BatchTooSmall { got: n, need: 2 });
    }
    let norm = (2 * n) as f64;
    let mut eng = Engine::new(vec![images.rows(), texts.rows()], tau);
    let (mut i2t, mut t2i, mut sep_i, mut sep_t) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..n {
        i2t += eng.row(0, 1, j, &[1], |_, _| true, 1.0 / norm);
        t2i += eng.row(1, 0, j, &[0], |_, _| true, 1.0 / norm);
        sep_i += eng.row(0, 1, j, &[0, 1], |m, k| if m == 1 { k == j } else { k != j }, 1.0 / norm);
        sep_t += eng.row(1, 0, j, &[0, 1], |m, k| if m == 0 { k == j } else { k != j }, 1.0 / norm);
    }
    let (mut grads, grad_tau) = eng.finish();
    let grad_texts = grads.pop().unwrap();
    let grad_images = grads.pop().unwrap();
    let nf = n as f64;
    let per_term = BTreeMap::from([
        (LossTerm::Pair(ModalityPair::new(I, T)), i2t / nf),
        (LossTerm::Pair(ModalityPair::new(T, I)), t2i / nf),
        (LossTerm::Separation(I), sep_i / nf),
        (LossTerm::Separation(T), sep_t / nf),
    ]);
    let grad_fused = Array2::zeros(grad_images.raw_dim());
    Ok(LossOutput {
        value: (i2t + t2i) / norm + (sep_i + sep_t) / norm,
        per_term,
        grad_images,
        grad_texts,
        grad_fused,
        grad_tau,
    })
}

/// Loss family selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    Cl,
    Gcl,
    GclAblation(Ablation),
    IntraModalitySeparation,
}

impl LossVariant {
    pub fn evaluate(self, batch: &TripletBatch, cfg: &LossConfig) -> Result<LossOutput> {
        match self {
            LossVariant::Cl => cl_loss(&batch.images, &batch.texts, cfg.tau),
            LossVariant::Gcl => gcl_loss(batch, cfg),
            LossVariant::GclAblation(drop) => gcl_loss_ablation(batch, drop, cfg),
            LossVariant::IntraModalitySeparation => intra_modality_separation_loss(&batch.images, &batch.texts, cfg.tau),
        }
    }

    /// Whether the loss reads the fused matrix at all.
    pub fn uses_fused(self, cfg: &LossConfig) -> bool {
        match self {
            LossVariant::Gcl => cfg.pair_set.involves_fused(),
            LossVariant::GclAblation(_) => true,
            LossVariant::Cl | LossVariant::IntraModalitySeparation => false,
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossVariant::Cl => f.write_str("cl"),
            LossVariant::Gcl => f.write_str("gcl"),
            LossVariant::GclAblation(a) => write!(f, "gcl_ablation:{}", a.name()),
            LossVariant::IntraModalitySeparation => f.write_str("imsep"),
        }
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(LossVariant::Cl),
            "gcl" => Ok(LossVariant::Gcl),
            "imsep" => Ok(LossVariant::IntraModalitySeparation),
            _ => match s.strip_prefix("gcl_ablation:") {
                Some(rest) => Ok(LossVariant::GclAblation(rest.parse()?)),
                None => Err(Error::Config(format!("unknown loss variant '{s}'"))),
            },
        }
    }
}

impl Serialize for LossVariant {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Error measure used by the gradient checks: `|a - n| / max(1, |a|, |n|)`.
/// Relative for entries of magnitude above one, absolute below.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients against central differences of `value` for
/// every coordinate of all three batch matrices. Returns the largest
/// [`scaled_error`].
pub fn loss_gradient_check<F>(loss_fn: F, batch: &TripletBatch, epsilon: f64) -> Result<f64>
where
    F: Fn(&TripletBatch) -> Result<LossOutput>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let analytic = loss_fn(batch)?;
    let mut probe = batch.clone();
    let mut worst = 0.0f64;
    for m in Modality::ALL {
        let (n, d) = batch.matrix(m).rows().dim();
        for j in 0..n {
            for c in 0..d {
                let orig = batch.matrix(m).rows()[[j, c]];
                probe.matrix_mut(m).rows_mut()[[j, c]] = orig + epsilon;
                let plus = loss_fn(&probe)?.value;
                probe.matrix_mut(m).rows_mut()[[j, c]] = orig - epsilon;
                let minus = loss_fn(&probe)?.value;
                probe.matrix_mut(m).rows_mut()[[j, c]] = orig;
                let numeric = (plus - minus) / (2.0 * epsilon);
                worst = worst.max(scaled_error(analytic.grad(m)[[j, c]], numeric));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::fuse_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> TripletBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let images = EmbeddingMatrix::normalized(gen(), I).unwrap();
        let texts = EmbeddingMatrix::normalized(gen(), T).unwrap();
        let fused = fuse_rows(&images, &texts, true).unwrap();
        TripletBatch::new(images, texts, fused).unwrap()
    }

    fn identical_batch(n: usize) -> TripletBatch {
        let row = Array2::from_shape_fn((n, 3), |(_, c)| [0.6, 0.0, 0.8][c]);
        TripletBatch::new(
            EmbeddingMatrix::new(row.clone(), I),
            EmbeddingMatrix::new(row.clone(), T),
            EmbeddingMatrix::new(row, IT),
        )
        .unwrap()
    }

    #[test]
    fn pair_set_rules() {
        assert!(matches!(PairSet::new([]), Err(Error::EmptyPairSet)));
        let p = ModalityPair::new(I, T);
        assert!(matches!(PairSet::new([p, p]), Err(Error::DuplicatePair(_))));
        assert!(PairSet::new([ModalityPair::new(I, I)]).is_err());
        let shuffled = PairSet::new([ModalityPair::new(IT, T), p]).unwrap();
        assert_eq!(shuffled.iter().next(), Some(&p));
        assert_eq!("it2t".parse::<ModalityPair>().unwrap(), ModalityPair::new(IT, T));
        let json = serde_json::to_string(&PairSet::cross_modal()).unwrap();
        assert_eq!(json, r#"["i2t","t2i"]"#);
        assert_eq!(serde_json::from_str::<PairSet>(&json).unwrap(), PairSet::cross_modal());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            LossVariant::Cl,
            LossVariant::Gcl,
            LossVariant::IntraModalitySeparation,
            LossVariant::GclAblation(Ablation::ItQuery),
        ] {
            assert_eq!(v.to_string().parse::<LossVariant>().unwrap(), v);
        }
        assert!("gcl_ablation:nope".parse::<LossVariant>().is_err());
    }

    #[test]
    fn cl_single_sample_is_zero() {
        let b = random_batch(1, 4, 1);
        assert_eq!(cl_loss(&b.images, &b.texts, 0.07).unwrap().value, 0.0);
    }

    #[test]
    fn cl_identical_is_log_n() {
        let b = identical_batch(2);
        let out = cl_loss(&b.images, &b.texts, 0.07).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gcl_single_sample_is_exactly_zero() {
        let b = random_batch(1, 5, 2);
        for mode in [DenominatorMode::AlgorithmMasked] {
            let cfg = LossConfig { denominator_mode: mode, ..LossConfig::default() };
            assert_eq!(gcl_loss(&b, &cfg).unwrap().value, 0.0);
        }
    }

    #[test]
    fn gcl_identical_counts_admitted_entries() {
        // Masked row: positive + (N - 1) off-diagonal entries from each of
        // three blocks = 3N - 2 equal logits.
        for n in 1..6 {
            let b = identical_batch(n);
            let masked = gcl_loss(&b, &LossConfig::default()).unwrap();
            assert!((masked.value - ((3 * n - 2) as f64).ln()).abs() < 1e-12, "n={n}");
            let literal = gcl_loss(
                &b,
                &LossConfig { denominator_mode: DenominatorMode::EquationLiteral, ..LossConfig::default() },
            )
            .unwrap();
            assert!((literal.value - ((3 * n) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_point_is_temperature_free() {
        let b = identical_batch(3);
        let v1 = gcl_loss(&b, &LossConfig::with_tau(0.07)).unwrap().value;
        let v2 = gcl_loss(&b, &LossConfig::with_tau(0.9)).unwrap().value;
        assert_eq!(v1, v2);
    }

    #[test]
    fn ablation_examples() {
        let one = random_batch(1, 4, 3);
        let out = gcl_loss_ablation(&one, Ablation::CrossModal, &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);

        let b = identical_batch(2);
        let out = gcl_loss_ablation(&b, Ablation::ItQuery, &LossConfig::default()).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);

        let b = random_batch(5, 6, 4);
        for drop in Ablation::ALL {
            let out = gcl_loss_ablation(&b, drop, &LossConfig::default()).unwrap();
            let keys: Vec<_> = out.per_term.keys().copied().collect();
            let expected: Vec<_> = drop.pair_set().iter().map(|p| LossTerm::Pair(*p)).collect();
            assert_eq!(keys, expected);
            let restricted = gcl_loss(
                &b,
                &LossConfig { pair_set: drop.pair_set(), normalization: Some(20.0), ..LossConfig::default() },
            )
            .unwrap();
            assert_eq!(out.per_term, restricted.per_term);
            assert_eq!(out.value, restricted.value);
        }
    }

    #[test]
    fn separation_examples() {
        let e = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let images = EmbeddingMatrix::new(e.clone(), I);
        let texts = EmbeddingMatrix::new(e, T);
        let out = intra_modality_separation_loss(&images, &texts, 1.0).unwrap();
        let cl = cl_loss(&images, &texts, 1.0).unwrap();
        let sep = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((sep - 0.313262).abs() < 1e-6);
        assert!((out.value - (cl.value + sep)).abs() < 1e-12);
        assert!((out.per_term[&LossTerm::Separation(I)] - sep).abs() < 1e-12);

        let b = identical_batch(2);
        let out = intra_modality_separation_loss(&b.images, &b.texts, 0.07).unwrap();
        assert!((out.per_term[&LossTerm::Separation(T)] - 2f64.ln()).abs() < 1e-12);

        let one = random_batch(1, 3, 5);
        assert!(matches!(
            intra_modality_separation_loss(&one.images, &one.texts, 0.07),
            Err(Error::BatchTooSmall { got: 1, need: 2 })
        ));
    }

    #[test]
    fn errors_surface() {
        let b = random_batch(3, 4, 6);
        assert!(matches!(gcl_loss(&b, &LossConfig::with_tau(0.0)), Err(Error::InvalidTemperature(_))));
        assert!(matches!(cl_loss(&b.images, &b.texts, -1.0), Err(Error::InvalidTemperature(_))));
        let short = random_batch(2, 4, 7);
        assert!(matches!(cl_loss(&b.images, &short.texts, 0.1), Err(Error::ShapeMismatch(_))));
        assert!(TripletBatch::new(b.images.clone(), short.texts.clone(), b.fused.clone()).is_err());
    }

    #[test]
    fn value_is_weighted_sum_of_terms() {
        let b = random_batch(6, 5, 8);
        let out = gcl_loss(&b, &LossConfig::default()).unwrap();
        let weighted: f64 = out.per_term.values().sum::<f64>() * 6.0 / (6.0 * 6.0);
        assert!((out.value - weighted).abs() < 1e-12);
        assert!(out.value >= 0.0);
    }

    #[test]
    fn gradient_checks() {
        let b = random_batch(3, 5, 9);
        let err = loss_gradient_check(|x| gcl_loss(x, &LossConfig::default()), &b, 1e-5).unwrap();
        assert!(err < 1e-6, "gcl err {err}");
        let b2 = random_batch(2, 3, 10);
        let err = loss_gradient_check(|x| cl_loss(&x.images, &x.texts, 0.07), &b2, 1e-5).unwrap();
        assert!(err < 1e-6, "cl err {err}");
        let b3 = random_batch(3, 4, 11);
        let err =
            loss_gradient_check(|x| intra_modality_separation_loss(&x.images, &x.texts, 0.07), &b3, 1e-5).unwrap();
        assert!(err < 1e-6, "imsep err {err}");
    }

    #[test]
    fn gradient_check_of_constant_is_zero() {
        let b = random_batch(2, 3, 12);
        let zero = |x: &TripletBatch| {
            Ok(LossOutput {
                value: 1.5,
                per_term: BTreeMap::new(),
                grad_images: Array2::zeros((x.n(), x.dim())),
                grad_texts: Array2::zeros((x.n(), x.dim())),
                grad_fused: Array2::zeros((x.n(), x.dim())),
                grad_tau: 0.0,
            })
        };
        assert_eq!(loss_gradient_check(zero, &b, 1e-5).unwrap(), 0.0);
        assert!(loss_gradient_check(zero, &b, 1e-2).is_err());
    }

    #[test]
    fn tau_gradient_matches_difference() {
        let b = random_batch(4, 5, 13);
        let tau = 0.2;
        let out = gcl_loss(&b, &LossConfig::with_tau(tau)).unwrap();
        let h = 1e-6;
        let plus = gcl_loss(&b, &LossConfig::with_tau(tau + h)).unwrap().value;
        let minus = gcl_loss(&b, &LossConfig::with_tau(tau - h)).unwrap().value;
        assert!(scaled_error(out.grad_tau, (plus - minus) / (2.0 * h)) < 1e-6);
    }
}
