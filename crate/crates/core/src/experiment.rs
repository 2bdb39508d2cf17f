//! Config-driven experiments over an output directory: dataset generation,
//! training, evaluation, ablation, and report verification.
//!
//! Every artifact is a deterministic function of the materialized config.
//! Wall-clock timings are kept in separate files so reports and checkpoints
//! stay byte-identical across reruns.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diagnostics::{gap_from_batch, pca_2d, tagged_samples, GapReport, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL};
use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::hash::{canonical_hash, sha256, to_hex};
use crate::losses::{Ablation, LossVariant, ModalityPair, TripletBatch};
use crate::retrieval::{
    build_global_pool, evaluate, Candidate, EvalOptions, PoolSetting, QuerySet, RetrievalPool, RetrievalReport,
};
use crate::synthetic::{generate_dataset, read_dataset, write_dataset, DatasetManifest, GenerateParams, Split, SyntheticPair};
use crate::trainer::{encode_pairs, train, Checkpoint, MixedObjective, StepRecord, ToyEncoder, TrainConfig, TrainOptions, TrainOutcome};

pub const SCHEMA_VERSION: u32 = 1;

/// Training objective selected by name: `cl`, `gcl`, `gcl_ablation:<drop>`,
/// `imsep`, or `gcl_plus_triplet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Loss(LossVariant),
    /// Generalized loss plus the two-scenario triplet objective.
    GclPlusTriplet,
}

impl Variant {
    pub fn loss_variant(self) -> LossVariant {
        match self {
            Variant::Loss(v) => v,
            Variant::GclPlusTriplet => LossVariant::Gcl,
        }
    }

    /// The six variants compared by `ablate`, in table order.
    pub fn ablation_set() -> Vec<Variant> {
        let mut out = vec![Variant::Loss(LossVariant::Gcl)];
        out.extend(Ablation::ALL.map(|a| Variant::Loss(LossVariant::GclAblation(a))));
        out.push(Variant::Loss(LossVariant::IntraModalitySeparation));
        out.push(Variant::Loss(LossVariant::Cl));
        out
    }

    /// Name usable as a directory component.
    pub fn slug(self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Loss(v) => v.fmt(f),
            Variant::GclPlusTriplet => f.write_str("gcl_plus_triplet"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gcl_plus_triplet" {
            return Ok(Variant::GclPlusTriplet);
        }
        s.parse().map(Variant::Loss)
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Loss(LossVariant::Gcl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_triplet: usize,
    pub k: usize,
    pub d_in: usize,
    pub sigma: f32,
    /// Pairs per concept in the eval split: the first is the query, the
    /// rest are its candidates.
    pub eval_duplication: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 5000, n_eval: 1000, n_triplet: 5000, k: 8, d_in: 32, sigma: 0.1, eval_duplication: 2 }
    }
}

impl DataConfig {
    pub fn params(&self, split: Split, seed: u64) -> GenerateParams {
        let (n, dup) = match split {
            Split::Train => (self.n_train, 1),
            Split::Eval => (self.n_eval, self.eval_duplication),
            Split::Triplet => (self.n_triplet, 2),
        };
        GenerateParams::new(n, self.k, self.d_in, self.sigma, seed).split(split).duplication(dup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPlan {
    pub tasks: Vec<ModalityPair>,
    pub settings: Vec<PoolSetting>,
    pub ks: Vec<usize>,
    pub histogram_edges: Option<Vec<usize>>,
    pub rank_limit: usize,
    pub cosine_max_rank: usize,
    /// Recall cutoff reported by `ablate`.
    pub ablation_k: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        let opts = EvalOptions::default();
        let tasks = Modality::ALL
            .into_iter()
            .flat_map(|q| Modality::ALL.into_iter().map(move |c| ModalityPair::new(q, c)))
            .collect();
        Self {
            tasks,
            settings: vec![PoolSetting::Global, PoolSetting::Local],
            ks: opts.ks,
            histogram_edges: opts.histogram_edges,
            rank_limit: opts.rank_limit,
            cosine_max_rank: opts.cosine_max_rank,
            ablation_k: 5,
        }
    }
}

impl EvalPlan {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            ks: self.ks.clone(),
            histogram_edges: self.histogram_edges.clone(),
            rank_limit: self.rank_limit,
            cosine_max_rank: self.cosine_max_rank,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("eval.tasks is empty".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::Config("eval.settings is empty".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of positive cutoffs".into()));
        }
        if self.ablation_k == 0 || self.cosine_max_rank == 0 || self.rank_limit == 0 {
            return Err(Error::Config("eval cutoffs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub variant: Variant,
    /// Weight of the triplet objective under `gcl_plus_triplet`.
    pub triplet_weight: f64,
    pub data: DataConfig,
    /// `seed`, `variant` and `mixed` here are derived from the top level.
    pub train: TrainConfig,
    pub eval: EvalPlan,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            seed: 0,
            variant: Variant::default(),
            triplet_weight: 0.5,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalPlan::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills derived fields and validates the whole config.
    pub fn materialize(mut self) -> Result<Self> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.train.seed = self.seed;
        self.train.variant = self.variant.loss_variant();
        self.train.mixed = match self.variant {
            Variant::GclPlusTriplet => {
                Some(MixedObjective { pairwise_weight: 1.0, triplet_weight: self.triplet_weight })
            }
            Variant::Loss(_) => None,
        };
        if !(self.triplet_weight >= 0.0 && self.triplet_weight.is_finite()) {
            return Err(Error::Config(format!("triplet_weight must be non-negative, got {}", self.triplet_weight)));
        }
        self.train.validate()?;
        for split in [Split::Train, Split::Eval, Split::Triplet] {
            self.data.params(split, self.seed).validate()?;
        }
        if self.data.eval_duplication < 2 {
            return Err(Error::Config("eval_duplication must be at least 2".into()));
        }
        self.eval.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        canonical_hash(&v)
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(to_hex(&self.hash()?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        Self { variant, ..self.clone() }.materialize()
    }
}

/// File locations used by the commands. Datasets live in `data_dir`; run
/// artifacts in `run_dir` (the same directory outside of ablations).
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let d = dir.into();
        Self { data_dir: d.clone(), run_dir: d }
    }

    pub fn dataset(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.gcld", split_name(split)))
    }

    pub fn config(&self) -> PathBuf {
        self.run_dir.join("config.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("checkpoint.gclc")
    }

    pub fn diverged(&self) -> PathBuf {
        self.run_dir.join("diverged.gclc")
    }

    pub fn train_log(&self) -> PathBuf {
        self.run_dir.join(TRAIN_LOG)
    }

    pub fn train_timings(&self) -> PathBuf {
        self.run_dir.join("train_timings.json")
    }

    pub fn report(&self) -> PathBuf {
        self.run_dir.join("report.json")
    }

    pub fn report_csv(&self, setting: PoolSetting, task: ModalityPair) -> PathBuf {
        self.run_dir.join("report").join(format!("{}_{task}.csv", setting_name(setting)))
    }

    pub fn eval_timings(&self) -> PathBuf {
        self.run_dir.join(EVAL_TIMINGS)
    }

    pub fn pca_json(&self) -> PathBuf {
        self.run_dir.join("pca.json")
    }

    pub fn pca_csv(&self) -> PathBuf {
        self.run_dir.join("pca.csv")
    }

    pub fn ablation_json(&self) -> PathBuf {
        self.run_dir.join("ablation.json")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.run_dir.join("ablation.csv")
    }

    pub fn ablation_run(&self, variant: Variant) -> RunPaths {
        RunPaths { data_dir: self.data_dir.clone(), run_dir: self.run_dir.join("ablate").join(variant.slug()) }
    }
}

const TRAIN_LOG: &str = "train_log.json";
const EVAL_TIMINGS: &str = "timings.json";

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
        Split::Triplet => "triplet",
    }
}

fn setting_name(s: PoolSetting) -> &'static str {
    match s {
        PoolSetting::Global => "global",
        PoolSetting::Local => "local",
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// In-memory datasets for one config.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<SyntheticPair>,
    pub eval: Vec<SyntheticPair>,
    pub triplet: Vec<SyntheticPair>,
}

pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let gen = |split| generate_dataset(&cfg.data.params(split, cfg.seed)).map(|(p, _)| p);
    Ok(Datasets { train: gen(Split::Train)?, eval: gen(Split::Eval)?, triplet: gen(Split::Triplet)? })
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratedFile {
    pub path: PathBuf,
    pub sha256: String,
    pub manifest: DatasetManifest,
}

/// Writes the train, eval and triplet splits plus the materialized config.
pub fn cmd_generate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<GeneratedFile>> {
    fs::create_dir_all(&paths.data_dir).map_err(|e| Error::io(&paths.data_dir, e))?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Eval, Split::Triplet] {
        let (pairs, manifest) = generate_dataset(&cfg.data.params(split, cfg.seed))?;
        let path = paths.dataset(split);
        write_dataset(&pairs, &manifest, &path)?;
        let sha = to_hex(&sha256(&read_file(&path)?));
        log::info!("wrote {} ({} pairs)", path.display(), manifest.n_pairs);
        out.push(GeneratedFile { path, sha256: sha, manifest });
    }
    write_file(&paths.config(), cfg.to_json()?)?;
    Ok(out)
}

fn load_split(cfg: &ExperimentConfig, paths: &RunPaths, split: Split) -> Result<Vec<SyntheticPair>> {
    let path = paths.dataset(split);
    let (pairs, manifest) = read_dataset(&path)?;
    let want = cfg.data.params(split, cfg.seed);
    let matches = manifest.n_pairs == want.n_pairs
        && manifest.k == want.k
        && manifest.d_in == want.d_in
        && manifest.sigma == want.sigma
        && manifest.seed == want.seed
        && manifest.split == want.split
        && manifest.duplication == want.duplication;
    if !matches {
        return Err(Error::Config(format!(
            "{} was generated with different parameters; rerun generate",
            path.display()
        )));
    }
    Ok(pairs)
}

/// Trains in memory with the config's objective.
pub fn train_in_memory(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainOutcome> {
    let opts = TrainOptions {
        config_hash: Some(cfg.hash()?),
        triplets: Some(&data.triplet),
        ..TrainOptions::default()
    };
    train(&cfg.train, &data.train, opts)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub steps_run: usize,
    pub step: u64,
    pub total_steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Serialize)]
struct TrainTimings {
    wall_clock_s: f64,
    steps: usize,
    mean_step_ms: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, paths: &RunPaths, args: &TrainArgs) -> Result<TrainSummary> {
    let train_pairs = load_split(cfg, paths, Split::Train)?;
    let triplets = match cfg.variant {
        Variant::GclPlusTriplet => Some(load_split(cfg, paths, Split::Triplet)?),
        Variant::Loss(_) => None,
    };
    let resume = args.resume.as_deref().map(Checkpoint::read).transpose()?;
    let resumed_at = resume.as_ref().map_or(0, |c| c.step as usize);
    let started = Instant::now();
    let outcome = train(
        &cfg.train,
        &train_pairs,
        TrainOptions {
            resume,
            max_steps: args.max_steps,
            dump_path: Some(paths.diverged()),
            config_hash: Some(cfg.hash()?),
            triplets: triplets.as_deref(),
        },
    )?;
    let elapsed = started.elapsed().as_secs_f64();

    let mut log: Vec<StepRecord> = Vec::new();
    if resumed_at > 0 {
        if let Ok(bytes) = fs::read(paths.train_log()) {
            let prior: Vec<StepRecord> = serde_json::from_slice(&bytes)?;
            log.extend(prior.into_iter().filter(|r| r.step < resumed_at));
        }
    }
    let final_loss = outcome.log.last().map(|r| r.loss);
    let steps_run = outcome.log.len();
    log.extend(outcome.log);

    let bytes = outcome.checkpoint.encode();
    write_file(&paths.checkpoint(), &bytes)?;
    write_file(&paths.train_log(), log_json(&log)?)?;
    write_file(&paths.config(), cfg.to_json()?)?;
    let timings = TrainTimings {
        wall_clock_s: elapsed,
        steps: steps_run,
        mean_step_ms: if steps_run > 0 { 1e3 * elapsed / steps_run as f64 } else { 0.0 },
    };
    write_file(&paths.train_timings(), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(TrainSummary {
        checkpoint: paths.checkpoint(),
        checkpoint_sha256: to_hex(&sha256(&bytes)),
        steps_run,
        step: outcome.checkpoint.step,
        total_steps: outcome.total_steps,
        final_loss,
    })
}

/// JSON array with one step record per line.
fn log_json(log: &[StepRecord]) -> Result<String> {
    let mut out = String::from("[\n");
    for (i, r) in log.iter().enumerate() {
        out.push_str(&serde_json::to_string(r)?);
        out.push_str(if i + 1 < log.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    Ok(out)
}

/// Query and candidate sets built from the eval split.
///
/// Pairs are grouped by concept. The first pair of a group provides the
/// queries; the remaining pairs are candidates, and a query's ground truth
/// is every candidate of its group in the target modality. Candidate ids
/// are `3 * pair_index + modality index`; query ids are pair indices.
#[derive(Debug, Clone)]
pub struct EvalLayout {
    groups: Vec<(usize, Vec<usize>)>,
}

impl EvalLayout {
    pub fn new(pairs: &[SyntheticPair]) -> Result<Self> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut i = 0;
        while i < pairs.len() {
            let c = pairs[i].concept_id;
            let mut j = i + 1;
            while j < pairs.len() && pairs[j].concept_id == c {
                j += 1;
            }
            if j - i >= 2 {
                groups.push((i, (i + 1..j).collect()));
            }
            i = j;
        }
        if groups.is_empty() {
            return Err(Error::Config("eval split has no concept with two or more pairs".into()));
        }
        Ok(Self { groups })
    }

    pub fn n_queries(&self) -> usize {
        self.groups.len()
    }

    pub fn candidate_id(pair: usize, m: Modality) -> u64 {
        3 * pair as u64 + m.index() as u64
    }

    pub fn candidates(&self, batch: &TripletBatch, m: Modality, source_task: &str) -> Vec<Candidate> {
        let mat = batch.matrix(m);
        self.groups
            .iter()
            .flat_map(|(_, members)| members.iter())
            .map(|&p| Candidate::new(Self::candidate_id(p, m), mat.embedding(p), source_task))
            .collect()
    }

    pub fn queries(&self, batch: &TripletBatch, task: ModalityPair) -> QuerySet {
        let mat = batch.matrix(task.query);
        let mut qs = QuerySet::default();
        for (q, members) in &self.groups {
            qs.push(*q as u64, mat.embedding(*q), members.iter().map(|&p| Self::candidate_id(p, task.key)));
        }
        qs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: ModalityPair,
    pub setting: PoolSetting,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub tasks: Vec<TaskReport>,
    pub gap: GapReport,
    pub batch: TripletBatch,
}

impl Evaluation {
    pub fn recall(&self, setting: PoolSetting, task: ModalityPair, k: usize) -> Option<f64> {
        self.tasks.iter().find(|t| t.setting == setting && t.task == task).and_then(|t| t.report.recall(k))
    }
}

/// Encodes the eval split and runs every planned (setting, task) pair.
pub fn evaluate_encoders(
    image: &ToyEncoder,
    text: &ToyEncoder,
    eval_pairs: &[SyntheticPair],
    plan: &EvalPlan,
    renormalize: bool,
) -> Result<Evaluation> {
    let batch = encode_pairs(image, text, eval_pairs, renormalize)?;
    let layout = EvalLayout::new(eval_pairs)?;
    let opts = plan.options();
    let global = if plan.settings.contains(&PoolSetting::Global) {
        let sources = Modality::ALL.map(|m| layout.candidates(&batch, m, &format!("c_{m}"))).to_vec();
        Some(build_global_pool(sources)?)
    } else {
        None
    };
    let mut tasks = Vec::new();
    for &setting in &plan.settings {
        for &task in &plan.tasks {
            let local;
            let pool = match setting {
                PoolSetting::Global => global.as_ref().expect("built above"),
                PoolSetting::Local => {
                    local = RetrievalPool::local(layout.candidates(&batch, task.key, &task.to_string()))?;
                    &local
                }
            };
            let report = evaluate(&layout.queries(&batch, task), pool, &opts)?;
            tasks.push(TaskReport { task, setting, report });
        }
    }
    let gap = gap_from_batch(&batch)?;
    Ok(Evaluation { tasks, gap, batch })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    /// Config hash recorded in the evaluated checkpoint.
    pub checkpoint_config_hash: String,
    pub checkpoint_sha256: String,
    pub eval_data_sha256: String,
    pub variant: Variant,
    pub seed: u64,
    pub step: u64,
    pub tau: f64,
    pub tasks: Vec<TaskReport>,
    pub gap: GapReport,
    pub training_log: String,
    pub timings: String,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn build_report(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    checkpoint_path: &Path,
) -> Result<(RunReport, Evaluation)> {
    let ck_bytes = read_file(checkpoint_path)?;
    let ck = Checkpoint::decode(&ck_bytes)?;
    let eval_pairs = load_split(cfg, paths, Split::Eval)?;
    let eval_sha = to_hex(&sha256(&read_file(&paths.dataset(Split::Eval))?));
    let config_hash = cfg.hash_hex()?;
    let ck_hash = to_hex(&ck.config_hash);
    if ck_hash != config_hash {
        log::warn!("checkpoint was trained under config {ck_hash}, evaluating with {config_hash}");
    }
    let ev = evaluate_encoders(&ck.image, &ck.text, &eval_pairs, &cfg.eval, cfg.train.renormalize_fused)?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config_hash,
        checkpoint_config_hash: ck_hash,
        checkpoint_sha256: to_hex(&sha256(&ck_bytes)),
        eval_data_sha256: eval_sha,
        variant: cfg.variant,
        seed: cfg.seed,
        step: ck.step,
        tau: ck.tau,
        tasks: ev.tasks.clone(),
        gap: ev.gap.clone(),
        training_log: TRAIN_LOG.into(),
        timings: EVAL_TIMINGS.into(),
    };
    Ok((report, ev))
}

#[derive(Serialize)]
struct EvalTimings {
    wall_clock_s: f64,
}

/// Evaluates a checkpoint (the run's own by default) and writes the report,
/// per-task CSVs, and the PCA export.
pub fn cmd_eval(cfg: &ExperimentConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    let ck_path = checkpoint.map_or_else(|| paths.checkpoint(), Path::to_path_buf);
    let (report, ev) = build_report(cfg, paths, &ck_path)?;
    write_file(&paths.report(), report.to_json()?)?;
    for t in &report.tasks {
        write_file(&paths.report_csv(t.setting, t.task), t.report.to_csv())?;
    }
    match pca_2d(&tagged_samples(&ev.batch), DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL) {
        Ok(p) => {
            write_file(&paths.pca_json(), serde_json::to_string_pretty(&p)? + "\n")?;
            write_file(&paths.pca_csv(), p.to_csv())?;
        }
        Err(e) => log::warn!("skipping PCA export: {e}"),
    }
    let timings = EvalTimings { wall_clock_s: started.elapsed().as_secs_f64() };
    write_file(&paths.eval_timings(), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(report)
}

/// Recomputes the stored report from the checkpoint, eval data and config
/// and checks it matches byte for byte.
pub fn cmd_verify(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<RunReport> {
    let stored = read_file(&paths.report())?;
    let (report, _) = build_report(cfg, paths, &paths.checkpoint())?;
    let fresh = report.to_json()?;
    if fresh.as_bytes() == stored.as_slice() {
        return Ok(report);
    }
    let stored: serde_json::Value = serde_json::from_slice(&stored)?;
    let fresh_v: serde_json::Value = serde_json::from_str(&fresh)?;
    let differing: Vec<String> = match (stored.as_object(), fresh_v.as_object()) {
        (Some(a), Some(b)) => b.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect(),
        _ => vec!["<root>".into()],
    };
    Err(Error::VerificationFailed(format!("recomputed report differs in: {}", differing.join(", "))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub setting: PoolSetting,
    pub k: usize,
    pub tasks: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,{}\n", self.tasks.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.recall.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{}\n", r.variant, vals.join(",")));
        }
        out
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:width$}", "variant");
        for t in &self.tasks {
            out.push_str(&format!(" {t:>7}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:width$}", r.variant));
            for v in &r.recall {
                out.push_str(&format!(" {:>7.4}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every ablation variant on one dataset and seed.
/// Uses the global pool when the plan includes it.
pub fn cmd_ablate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<AblationTable> {
    let setting = if cfg.eval.settings.contains(&PoolSetting::Global) {
        PoolSetting::Global
    } else {
        cfg.eval.settings[0]
    };
    let k = cfg.eval.ablation_k;
    let mut rows = Vec::new();
    for variant in Variant::ablation_set() {
        let sub = cfg.with_variant(variant)?;
        let sub_paths = paths.ablation_run(variant);
        log::info!("ablation: training {variant}");
        cmd_train(&sub, &sub_paths, &TrainArgs::default())?;
        let report = cmd_eval(&sub, &sub_paths, None)?;
        let recall = cfg
            .eval
            .tasks
            .iter()
            .map(|&task| {
                report
                    .tasks
                    .iter()
                    .find(|t| t.setting == setting && t.task == task)
                    .and_then(|t| t.report.recall(k))
                    .ok_or_else(|| Error::Config(format!("Recall@{k} is not in eval.ks")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow { variant: variant.to_string(), recall });
    }
    let table = AblationTable {
        config_hash: cfg.hash_hex()?,
        setting,
        k,
        tasks: cfg.eval.tasks.iter().map(|t| t.to_string()).collect(),
        rows,
    };
    write_file(&paths.ablation_json(), serde_json::to_string_pretty(&table)? + "\n")?;
    write_file(&paths.ablation_csv(), table.to_csv())?;
    Ok(table)
}

/// Human-readable summary of the stored report (and ablation table, when
/// present).
pub fn cmd_report(paths: &RunPaths) -> Result<String> {
    let bytes = read_file(&paths.report())?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    let mut out = format!(
        "variant {}  seed {}  step {}  config {}\n",
        v["variant"].as_str().unwrap_or("?"),
        v["seed"],
        v["step"],
        v["config_hash"].as_str().unwrap_or("?")
    );
    for t in v["tasks"].as_array().into_iter().flatten() {
        let recalls: Vec<String> = t["report"]["recall_at"]
            .as_object()
            .into_iter()
            .flatten()
            .map(|(k, r)| format!("R@{k}={:.4}", r.as_f64().unwrap_or(f64::NAN)))
            .collect();
        out.push_str(&format!(
            "{:6} {:6} {}\n",
            t["setting"].as_str().unwrap_or("?"),
            t["task"].as_str().unwrap_or("?"),
            recalls.join(" ")
        ));
    }
    if let Some(rows) = v["gap"]["pairwise_cosine"].as_array() {
        out.push_str("mean-embedding cosine (i, t, it):\n");
        for row in rows {
            let cells: Vec<String> = row
                .as_array()
                .into_iter()
                .flatten()
                .map(|c| format!("{:>8.4}", c.as_f64().unwrap_or(f64::NAN)))
                .collect();
            out.push_str(&format!("  {}\n", cells.join(" ")));
        }
    }
    if let Ok(bytes) = fs::read(paths.ablation_json()) {
        let table: AblationTable = serde_json::from_slice(&bytes)?;
        out.push_str(&format!("ablation ({} Recall@{}):\n", setting_name(table.setting), table.k));
        out.push_str(&table.render());
    }
    Ok(out)
}
