//! Acceptance suite. Each test is one criterion and writes a single
//! `PASS`/`FAIL` line to stderr (uncaptured) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use gcl_core::embedding::{fuse_rows, Embedding, EmbeddingMatrix, Modality};
use gcl_core::experiment::{
    cmd_eval, cmd_generate, cmd_train, evaluate_encoders, generate_datasets, train_in_memory, ExperimentConfig,
    RunPaths, TrainArgs, Variant,
};
use gcl_core::losses::{
    cl_loss, gcl_loss, Ablation, DenominatorMode, LossConfig, LossOutput, LossVariant, ModalityPair, PairSet,
    TripletBatch,
};
use gcl_core::retrieval::{
    cosine_by_rank, rank_of_ground_truth, recall_at_k, Candidate, PoolSetting, QuerySet, RetrievalPool,
};
use gcl_core::trainer::{adamw_step, fusion_backprop, lr_at, AdamWConfig, OptimizerState, ScheduleConfig};
use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const I: Modality = Modality::Image;
const T: Modality = Modality::Text;
const IT: Modality = Modality::Fused;

fn report(name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {tag} {name}: {detail}");
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

fn batch_from(images: Array2<f64>, texts: Array2<f64>, renormalize: bool) -> TripletBatch {
    let i = EmbeddingMatrix::new(images, I);
    let t = EmbeddingMatrix::new(texts, T);
    let f = fuse_rows(&i, &t, renormalize).unwrap();
    TripletBatch::new(i, t, f).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TripletBatch {
    let (i, t) = (unit_rows(rng, n, d), unit_rows(rng, n, d));
    batch_from(i, t, true)
}

fn mat(b: &TripletBatch, m: Modality) -> &Array2<f64> {
    b.matrix(m).rows()
}

// ---------------------------------------------------------------------------
// Naive loss oracles: direct enumeration over (pair, j, m, k).

fn naive_dot(a: &Array2<f64>, j: usize, b: &Array2<f64>, k: usize) -> f64 {
    (0..a.ncols()).map(|c| a[[j, c]] * b[[k, c]]).sum()
}

fn oracle_gcl(b: &TripletBatch, pairs: &[ModalityPair], tau: f64, mode: DenominatorMode) -> f64 {
    let n = b.n();
    let mut total = 0.0;
    for p in pairs {
        let q = mat(b, p.query);
        for j in 0..n {
            let pos = naive_dot(q, j, mat(b, p.key), j) / tau;
            let mut den = 0.0;
            for m in Modality::ALL {
                for k in 0..n {
                    let admitted = match mode {
                        DenominatorMode::EquationLiteral => true,
                        DenominatorMode::AlgorithmMasked => k != j || m == p.key,
                    };
                    if admitted {
                        den += (naive_dot(q, j, mat(b, m), k) / tau).exp();
                    }
                }
            }
            total += -(pos.exp() / den).ln();
        }
    }
    total / (pairs.len() * n) as f64
}

fn oracle_cl(b: &TripletBatch, tau: f64) -> f64 {
    let n = b.n();
    let mut total = 0.0;
    for (qa, kb) in [(I, T), (T, I)] {
        for j in 0..n {
            let pos = (naive_dot(mat(b, qa), j, mat(b, kb), j) / tau).exp();
            let den: f64 = (0..n).map(|k| (naive_dot(mat(b, qa), j, mat(b, kb), k) / tau).exp()).sum();
            total += -(pos / den).ln();
        }
    }
    total / (2 * n) as f64
}

const ALL_PAIRS: [ModalityPair; 6] = [
    ModalityPair::new(I, T),
    ModalityPair::new(T, I),
    ModalityPair::new(I, IT),
    ModalityPair::new(T, IT),
    ModalityPair::new(IT, I),
    ModalityPair::new(IT, T),
];

#[test]
fn loss_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let mut worst = 0.0f64;
    let mut evaluations = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..1.0);
        let b = random_batch(&mut rng, n, d);
        let mut subset: Vec<ModalityPair> = ALL_PAIRS.into_iter().filter(|_| rng.random_bool(0.6)).collect();
        if subset.is_empty() {
            subset.push(ALL_PAIRS[rng.random_range(0..6)]);
        }
        for pairs in [ALL_PAIRS.to_vec(), subset] {
            for mode in [DenominatorMode::AlgorithmMasked, DenominatorMode::EquationLiteral] {
                let cfg = LossConfig {
                    tau,
                    pair_set: PairSet::new(pairs.clone()).unwrap(),
                    denominator_mode: mode,
                    normalization: None,
                };
                let got = gcl_loss(&b, &cfg).unwrap().value;
                worst = worst.max((got - oracle_gcl(&b, &pairs, tau, mode)).abs());
                evaluations += 1;
            }
        }
        let got = cl_loss(&b.images, &b.texts, tau).unwrap().value;
        worst = worst.max((got - oracle_cl(&b, tau)).abs());
        evaluations += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst <= 1e-12 && secs < 10.0;
    report(
        "loss oracle equivalence",
        ok,
        &format!("{evaluations} evaluations over 50 batches, max |diff| {worst:.2e} (tol 1e-12), {secs:.2}s (limit 10s)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Central finite differences with the scaled error |a-n| / max(1, |a|, |n|).

const EPS: f64 = 1e-5;

fn scaled(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Gradient check treating the three matrices as independent inputs.
fn check_independent(variant: LossVariant, b: &TripletBatch, cfg: &LossConfig) -> f64 {
    let out = variant.evaluate(b, cfg).unwrap();
    let mut worst = 0.0f64;
    for m in Modality::ALL {
        let analytic = out.grad(m);
        for idx in ndarray::indices(analytic.raw_dim()) {
            let mut plus = b.clone();
            plus.matrix_mut(m).rows_mut()[idx] += EPS;
            let mut minus = b.clone();
            minus.matrix_mut(m).rows_mut()[idx] -= EPS;
            let num = (variant.evaluate(&plus, cfg).unwrap().value - variant.evaluate(&minus, cfg).unwrap().value)
                / (2.0 * EPS);
            worst = worst.max(scaled(analytic[idx], num));
        }
    }
    let tau_num = {
        let at = |t: f64| variant.evaluate(b, &LossConfig { tau: t, ..cfg.clone() }).unwrap().value;
        (at(cfg.tau + EPS) - at(cfg.tau - EPS)) / (2.0 * EPS)
    };
    worst.max(scaled(out.grad_tau, tau_num))
}

/// Gradient check of `L(e_i, e_t, fuse(e_i, e_t))` with respect to the
/// unfused inputs, composing the fusion Jacobian.
fn check_through_fusion(variant: LossVariant, images: &Array2<f64>, texts: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let value = |i: &Array2<f64>, t: &Array2<f64>| variant.evaluate(&batch_from(i.clone(), t.clone(), true), cfg).unwrap();
    let out: LossOutput = value(images, texts);
    let (fi, ft) = fusion_backprop(&out.grad_fused, images, texts, true).unwrap();
    let gi = &out.grad_images + &fi;
    let gt = &out.grad_texts + &ft;
    let mut worst = 0.0f64;
    for (which, analytic) in [(0, &gi), (1, &gt)] {
        for idx in ndarray::indices(images.raw_dim()) {
            let (mut ip, mut tp, mut im, mut tm) = (images.clone(), texts.clone(), images.clone(), texts.clone());
            if which == 0 {
                ip[idx] += EPS;
                im[idx] -= EPS;
            } else {
                tp[idx] += EPS;
                tm[idx] -= EPS;
            }
            let num = (value(&ip, &tp).value - value(&im, &tm).value) / (2.0 * EPS);
            worst = worst.max(scaled(analytic[idx], num));
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let started = Instant::now();
    let variants = [
        LossVariant::Cl,
        LossVariant::Gcl,
        LossVariant::GclAblation(Ablation::CrossModal),
        LossVariant::GclAblation(Ablation::ItCandidate),
        LossVariant::GclAblation(Ablation::ItQuery),
        LossVariant::IntraModalitySeparation,
    ];
    let seeds = 0..20u64;
    let results: Vec<(String, f64)> = seeds
        .into_par_iter()
        .flat_map_iter(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.random_range(2..=4);
            let d = rng.random_range(3..=6);
            let tau = rng.random_range(0.05..1.0);
            let (images, texts) = (unit_rows(&mut rng, n, d), unit_rows(&mut rng, n, d));
            let b = batch_from(images.clone(), texts.clone(), true);
            let mut out = Vec::new();
            for v in variants {
                let cfg = LossConfig::with_tau(tau);
                out.push((format!("{v}"), check_independent(v, &b, &cfg)));
                out.push((format!("{v}+fusion"), check_through_fusion(v, &images, &texts, &cfg)));
            }
            let literal = LossConfig { denominator_mode: DenominatorMode::EquationLiteral, ..LossConfig::with_tau(tau) };
            out.push(("gcl literal".into(), check_independent(LossVariant::Gcl, &b, &literal)));
            out.push(("gcl literal+fusion".into(), check_through_fusion(LossVariant::Gcl, &images, &texts, &literal)));
            out
        })
        .collect();
    let (worst_name, worst) =
        results.iter().cloned().fold(("".to_string(), 0.0f64), |acc, r| if r.1 > acc.1 { r } else { acc });
    let secs = started.elapsed().as_secs_f64();
    let ok = worst < 1e-6 && secs < 30.0;
    report(
        "analytic vs numeric gradients",
        ok,
        &format!(
            "{} checks (7 objectives incl. fusion backprop, 20 seeds, eps 1e-5), max scaled error {worst:.2e} ({worst_name}), {secs:.2}s",
            results.len()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------

#[test]
fn closed_form_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lines = Vec::new();

    let mut n1_max = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=8);
        let b = random_batch(&mut rng, 1, d);
        let tau = rng.random_range(0.01..2.0);
        let mut pairs: Vec<ModalityPair> = ALL_PAIRS.into_iter().filter(|_| rng.random_bool(0.5)).collect();
        if pairs.is_empty() {
            pairs.push(ALL_PAIRS[0]);
        }
        for ps in [PairSet::full(), PairSet::new(pairs).unwrap()] {
            let cfg = LossConfig { pair_set: ps, ..LossConfig::with_tau(tau) };
            n1_max = n1_max.max(gcl_loss(&b, &cfg).unwrap().value.abs());
        }
    }
    let n1_ok = n1_max == 0.0;
    lines.push(format!("N=1 masked max |value| {n1_max:e} (want exactly 0)"));

    let v = [0.6, 0.8];
    let same = |n: usize| Array2::from_shape_fn((n, 2), |(_, c)| v[c]);
    let b2 = batch_from(same(2), same(2), true);
    let ln7 = 7f64.ln();
    let got7 = gcl_loss(&b2, &LossConfig::default()).unwrap().value;
    let ln7_ok = (got7 - ln7).abs() <= 1e-9;
    lines.push(format!("N=2 identical GCL {got7:.9} vs ln 7 = {ln7:.9} (diff {:.3e})", (got7 - ln7).abs()));

    let mut cl_max = 0.0f64;
    for n in 1..=8 {
        let b = batch_from(same(n), same(n), true);
        let got = cl_loss(&b.images, &b.texts, 0.07).unwrap().value;
        cl_max = cl_max.max((got - (n as f64).ln()).abs());
    }
    let cl_ok = cl_max <= 1e-9;
    lines.push(format!("CL identical vs ln N for N=1..8 max diff {cl_max:.3e}"));

    let ok = n1_ok && ln7_ok && cl_ok;
    report("closed-form anchors", ok, &lines.join("; "));
    assert!(n1_ok, "N=1 masked loss not exactly zero: {n1_max}");
    assert!(cl_ok, "CL identical anchor off by {cl_max}");
    assert!(ln7_ok, "N=2 identical GCL loss {got7} differs from ln 7 = {ln7}");
}

// ---------------------------------------------------------------------------
// Retrieval engine against brute force.

/// Unit vectors with dyadic coordinates, so every dot product is exact and
/// ties are frequent.
fn lattice_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    let mut coords: Vec<usize> = (0..d).collect();
    coords.shuffle(rng);
    if rng.random_bool(0.5) {
        v[coords[0]] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    } else {
        for &c in &coords[..4] {
            v[c] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
        }
    }
    v
}

fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

struct BrutePool {
    ids: Vec<u64>,
    vecs: Vec<Vec<f64>>,
}

impl BrutePool {
    /// Candidate positions sorted by descending score, ties by ascending id.
    fn order(&self, q: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ids.len()).collect();
        let scores: Vec<f64> = self.vecs.iter().map(|c| seq_dot(q, c)).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(self.ids[a].cmp(&self.ids[b])));
        idx
    }

    fn rank(&self, q: &[f64], gt: &BTreeSet<u64>) -> usize {
        1 + self.order(q).iter().position(|&i| gt.contains(&self.ids[i])).unwrap()
    }
}

#[test]
fn retrieval_matches_brute_force() {
    let ks = [1usize, 5, 10, 20, 50];
    let mut mismatches = Vec::new();
    let mut monotone = true;
    let mut total_queries = 0;
    for pool_seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + pool_seed);
        let size = rng.random_range(50..=1000);
        let d = rng.random_range(4..=16);
        let lattice = pool_seed % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if lattice {
                lattice_unit(rng, d)
            } else {
                let r = unit_rows(rng, 1, d);
                r.row(0).to_vec()
            }
        };
        let mut ids: Vec<u64> = (0..size as u64 * 3).collect();
        ids.shuffle(&mut rng);
        ids.truncate(size);
        let vecs: Vec<Vec<f64>> = (0..size).map(|_| draw(&mut rng)).collect();
        let cands: Vec<Candidate> = ids
            .iter()
            .zip(&vecs)
            .map(|(&id, v)| Candidate::new(id, Embedding::new(v.clone(), Modality::ALL[rng.random_range(0..3)]), "t"))
            .collect();
        let pool = RetrievalPool::new(cands, PoolSetting::Global).unwrap();
        let brute = BrutePool { ids: ids.clone(), vecs };

        let mut qs = QuerySet::default();
        let n_q = rng.random_range(1..=20);
        for q in 0..n_q {
            let gt: BTreeSet<u64> = (0..rng.random_range(1..=3)).map(|_| ids[rng.random_range(0..size)]).collect();
            qs.push(q, Embedding::new(draw(&mut rng), Modality::Text), gt);
        }
        total_queries += n_q;

        let want_ranks: Vec<usize> =
            qs.queries.iter().map(|q| brute.rank(&q.embedding.values, &qs.ground_truth[&q.id])).collect();
        let (ranks, _) = rank_of_ground_truth(&qs, &pool, None, 10_000).unwrap();
        if ranks != want_ranks {
            mismatches.push(format!("pool {pool_seed}: ranks"));
        }

        let mut prev = 0.0;
        for k in ks {
            let got = recall_at_k(&qs, &pool, k).unwrap();
            let want = want_ranks.iter().filter(|&&r| r <= k).count() as f64 / want_ranks.len() as f64;
            if got != want {
                mismatches.push(format!("pool {pool_seed}: recall@{k} {got} vs {want}"));
            }
            monotone &= got >= prev;
            prev = got;
        }

        let max_rank = 10;
        let mut want_cos = vec![0.0; max_rank];
        for q in &qs.queries {
            let order = brute.order(&q.embedding.values);
            for r in 0..max_rank {
                want_cos[r] += seq_dot(&q.embedding.values, &brute.vecs[order[r]]).clamp(-1.0, 1.0);
            }
        }
        for c in want_cos.iter_mut() {
            *c /= qs.len() as f64;
        }
        if cosine_by_rank(&qs, &pool, max_rank).unwrap() != want_cos {
            mismatches.push(format!("pool {pool_seed}: cosine_by_rank"));
        }
    }
    let ok = mismatches.is_empty() && monotone;
    report(
        "retrieval engine vs brute force",
        ok,
        &format!(
            "100 pools (50..1000 candidates, half with exact ties), {total_queries} queries, {} mismatches, recall monotone over {{1,5,10,20,50}}: {monotone}",
            mismatches.len()
        ),
    );
    assert!(ok, "{mismatches:?}");
}

// ---------------------------------------------------------------------------
// Reference benchmark: shared training runs.

const SEEDS: [u64; 3] = [0, 1, 2];

/// Reference config: default data (5000 train / 1000 eval, k=8, d_in=32,
/// sigma=0.1), 16-d linear encoders, 5 epochs, 20 warmup steps.
fn reference_config(seed: u64, variant: Variant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, variant, ..ExperimentConfig::default() };
    cfg.train.epochs = 5;
    cfg.train.warmup_steps = 20;
    cfg.train.base_lr = 1e-3;
    cfg.train.embed_dim = 16;
    cfg.materialize().unwrap()
}

struct RunResult {
    seed: u64,
    variant: Variant,
    recall5: std::collections::BTreeMap<String, f64>,
    min_gap_cosine: f64,
}

struct Benchmark {
    runs: Vec<RunResult>,
    secs: f64,
}

impl Benchmark {
    fn get(&self, seed: u64, variant: Variant) -> &RunResult {
        self.runs.iter().find(|r| r.seed == seed && r.variant == variant).unwrap()
    }
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let variants = [
            Variant::Loss(LossVariant::Gcl),
            Variant::Loss(LossVariant::Cl),
            Variant::Loss(LossVariant::GclAblation(Ablation::CrossModal)),
            Variant::Loss(LossVariant::GclAblation(Ablation::ItCandidate)),
        ];
        let jobs: Vec<(u64, Variant)> = SEEDS.iter().flat_map(|&s| variants.map(|v| (s, v))).collect();
        let runs = jobs
            .into_par_iter()
            .map(|(seed, variant)| {
                let cfg = reference_config(seed, variant);
                let data = generate_datasets(&cfg).unwrap();
                let outcome = train_in_memory(&cfg, &data).unwrap();
                let ck = &outcome.checkpoint;
                let ev = evaluate_encoders(&ck.image, &ck.text, &data.eval, &cfg.eval, cfg.train.renormalize_fused)
                    .unwrap();
                let recall5 = ALL_TASKS
                    .iter()
                    .map(|t| (t.to_string(), ev.recall(PoolSetting::Global, t.parse().unwrap(), 5).unwrap()))
                    .collect();
                RunResult { seed, variant, recall5, min_gap_cosine: ev.gap.min_pairwise_cosine() }
            })
            .collect();
        Benchmark { runs, secs: started.elapsed().as_secs_f64() }
    })
}

const ALL_TASKS: [&str; 9] = ["i2t", "t2i", "i2i", "t2t", "it2i", "it2t", "i2it", "t2it", "it2it"];
const GCL: Variant = Variant::Loss(LossVariant::Gcl);
const CL: Variant = Variant::Loss(LossVariant::Cl);

#[test]
fn gcl_beats_cl_on_fused_candidate_tasks() {
    let bench = benchmark();
    let mut ok = bench.secs < 300.0;
    let mut cells = Vec::new();
    for task in ["t2it", "it2it"] {
        for seed in SEEDS {
            let (g, c) = (bench.get(seed, GCL).recall5[task], bench.get(seed, CL).recall5[task]);
            ok &= g > c;
            cells.push(format!("{task} s{seed} {g:.3}/{c:.3}{}", if g > c { "" } else { " (x)" }));
        }
    }
    report(
        "directional GCL > CL (global R@5)",
        ok,
        &format!("gcl/cl: {}; {:.1}s for 12 runs (limit 300s)", cells.join(", "), bench.secs),
    );
    assert!(ok);
}

#[test]
fn gcl_narrows_modality_gap() {
    let bench = benchmark();
    let mut ok = true;
    let mut cells = Vec::new();
    for seed in SEEDS {
        let (g, c) = (bench.get(seed, GCL).min_gap_cosine, bench.get(seed, CL).min_gap_cosine);
        ok &= g > c;
        cells.push(format!("s{seed} {g:.3}/{c:.3}"));
    }
    report("modality-gap direction", ok, &format!("min mean-embedding cosine gcl/cl: {}", cells.join(", ")));
    assert!(ok);
}

#[test]
fn ablations_degrade_their_tasks() {
    let bench = benchmark();
    let checks = [
        (Ablation::CrossModal, "i2t"),
        (Ablation::CrossModal, "t2i"),
        (Ablation::ItCandidate, "t2it"),
    ];
    let mut ok = true;
    let mut cells = Vec::new();
    for (abl, task) in checks {
        let v = Variant::Loss(LossVariant::GclAblation(abl));
        let mut wins = 0;
        let mut vals = Vec::new();
        for seed in SEEDS {
            let (full, dropped) = (bench.get(seed, GCL).recall5[task], bench.get(seed, v).recall5[task]);
            if dropped < full {
                wins += 1;
            }
            vals.push(format!("{full:.3}/{dropped:.3}"));
        }
        ok &= wins >= 2;
        cells.push(format!("w/o {} on {task}: {wins}/3 degraded (gcl/ablated {})", abl.name(), vals.join(" ")));
    }
    report("ablation direction", ok, &cells.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------

#[test]
fn schedule_and_optimizer_anchors() {
    let base = 1e-3;
    let sched = ScheduleConfig::new(500, 10_500, base).unwrap();
    let at0 = lr_at(0, &sched).unwrap();
    let at500 = lr_at(500, &sched).unwrap();
    let mid = lr_at(5_500, &sched).unwrap();
    let sched_ok = at0.abs() <= 1e-12 && (at500 - base).abs() <= 1e-12 && (mid - base / 2.0).abs() <= 1e-12;

    // Two hand-derived steps from p = 0.5 with g1 = 0.2, g2 = -0.1,
    // lr = 1e-3, weight decay 0.01, eps 1e-8.
    //   step 1: m = 0.02, v = 0.002, m_hat = 0.2, v_hat = 0.04
    //           p1 = 0.5 * (1 - 1e-5) - 1e-3 * 0.2 / (0.2 + 1e-8)
    //   step 2: m = 0.9 * 0.02 + 0.1 * -0.1 = 0.008
    //           v = 0.95 * 0.002 + 0.05 * 0.01 = 0.0024
    //           m_hat = 0.008 / 0.19, v_hat = 0.0024 / 0.0975
    //           p2 = p1 * (1 - 1e-5) - 1e-3 * m_hat / (sqrt(v_hat) + 1e-8)
    let p1 = 0.5 * (1.0 - 1e-5) - 1e-3 * 0.2 / (0.2 + 1e-8);
    let p2 = p1 * (1.0 - 1e-5) - 1e-3 * (0.008 / 0.19) / ((0.0024f64 / 0.0975).sqrt() + 1e-8);
    let cfg = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
    let betas_ok = cfg.beta1 == 0.9 && cfg.beta2 == 0.95;
    let mut params = vec![array![[0.5]]];
    let mut state = OptimizerState::new(cfg, &params);
    adamw_step(&mut params, &[array![[0.2]]], &mut state, 1e-3).unwrap();
    let got1 = params[0][[0, 0]];
    adamw_step(&mut params, &[array![[-0.1]]], &mut state, 1e-3).unwrap();
    let got2 = params[0][[0, 0]];
    let adam_ok = betas_ok && (got1 - p1).abs() <= 1e-12 && (got2 - p2).abs() <= 1e-12;

    let ok = sched_ok && adam_ok;
    report(
        "schedule / optimizer anchors",
        ok,
        &format!(
            "lr(0)={at0:e} lr(500)={at500:e} lr(mid)={mid:e}; adamw betas ({}, {}) step1 diff {:.1e} step2 diff {:.1e}",
            cfg.beta1,
            cfg.beta2,
            (got1 - p1).abs(),
            (got2 - p2).abs()
        ),
    );
    assert!(ok);
}

#[test]
fn train_and_eval_are_deterministic() {
    let cfg = reference_config(0, GCL);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for dir in &dirs {
        let paths = RunPaths::new(dir.path());
        cmd_generate(&cfg, &paths).unwrap();
        cmd_train(&cfg, &paths, &TrainArgs::default()).unwrap();
        checkpoints.push(std::fs::read(paths.checkpoint()).unwrap());
        cmd_eval(&cfg, &paths, None).unwrap();
        reports.push(std::fs::read(paths.report()).unwrap());
    }
    // A second eval in place must reproduce the same bytes too.
    let paths = RunPaths::new(dirs[0].path());
    cmd_eval(&cfg, &paths, None).unwrap();
    let again = std::fs::read(paths.report()).unwrap();
    let ck_ok = checkpoints[0] == checkpoints[1];
    let rep_ok = reports[0] == reports[1] && reports[0] == again;
    let ok = ck_ok && rep_ok;
    report(
        "determinism",
        ok,
        &format!(
            "checkpoints bit-identical: {ck_ok} ({} bytes); reports byte-identical: {rep_ok} ({} bytes)",
            checkpoints[0].len(),
            reports[0].len()
        ),
    );
    assert!(ok);
}
