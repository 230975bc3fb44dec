//! Exit-gate checks, one status line per criterion. Run with
//! `cargo test --test acceptance`. Exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    accuracy, brute_cdf, brute_median, brute_recall, cli_pipeline, dense_view_adjacency, naive_matmul,
    op_gradient_error, random_matrix, GlnCase, OP_NAMES, SMALL_RUN_CONFIG,
};
use gln::checkpoint::Checkpoint;
use gln::datasets::{
    generate_synthetic, load_features, standard_split, zero_shot_sample_split, SampleSplit, SynthConfig,
};
use gln::evalmetrics::{cdf_at_k, median_error_distance, recall_at_k, EvalReport};
use gln::floorplan::{alternating_split, load_floorplan, AlternationRule, DistanceMetric, FloorPlan, Split, ViewGraph};
use gln::gln::{train_standard, Gln, GlnConfig, MultiViewSample, TrainConfig};
use gln::map2vec::{train_map2vec, Map2VecConfig};
use gln::numerics::{attention_scores, Matrix, Tape};
use gln::zeroshot::{baseline_coord_model, train_compatibility, CompatibilityModel};

const ICUBE_ENV: &str = "GLN_ICUBE_DIR";

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for op in OP_NAMES {
        for trial in 0..50 {
            let e = op_gradient_error(op, 10_000 + trial);
            if e > worst_op.0 || e.is_nan() {
                worst_op = (e, op);
            }
        }
    }
    let mut worst_model = [0.0f64; 2];
    for (slot, attention) in [false, true].into_iter().enumerate() {
        for trial in 0..50 {
            let e = GlnCase::random(20_000 + trial, attention, trial % 5 == 4).gradient_error();
            worst_model[slot] = worst_model[slot].max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let elapsed = start.elapsed();
    Outcome::check(
        worst_op.0 < 1e-6 && worst_model.iter().all(|&e| e < 1e-4) && elapsed < Duration::from_secs(30),
        format!(
            "max per-op rel err {:.2e} ({}), GCN model {:.2e}, attention model {:.2e}, {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_model[0],
            worst_model[1],
            elapsed.as_secs_f64()
        ),
    )
}

fn message_passing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut alpha_ok = true;
    for loops in [false, true] {
        let dense = dense_view_adjacency(loops);
        let config = GlnConfig {
            feature_dim: 8,
            hidden_dim: 6,
            output_dim: 3,
            self_loops: loops,
            ..GlnConfig::default()
        };
        let adjacency = config.topology().normalized_adjacency();
        for trial in 0..100 {
            let gln = Gln::new(config.clone(), trial).unwrap();
            let h = random_matrix(&mut rng, 4, 8);
            let w = &gln.params.layers[0].weight;
            let expected = naive_matmul(&dense, &naive_matmul(&h, w));
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let wv = tape.constant(w.clone());
            let z = tape.matmul(hv, wv).unwrap();
            let y = tape.propagate(z, &adjacency).unwrap();
            worst = worst.max(tape.value(y).max_abs_diff(&expected));
        }
        let alpha = if loops { 3.0 } else { 2.0 };
        let topo = ViewGraph::new(loops).topology();
        for i in 0..4 {
            for &j in &topo.neighbors()[i] {
                alpha_ok &= topo.gcn_norm(i, j).unwrap() == alpha;
            }
        }
    }
    Outcome::check(
        worst < 1e-10 && alpha_ok,
        format!("max |Â·H·W − oracle| {worst:.2e}; 4-cycle α = 2 / 3 exact: {alpha_ok}"),
    )
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut uniform_worst = 0.0f64;
    for loops in [false, true] {
        let topo = ViewGraph::new(loops).topology();
        for _ in 0..100 {
            let z = random_matrix(&mut rng, 4, 6).map(|v| 5.0 * v);
            let a = random_matrix(&mut rng, 12, 1);
            let s = attention_scores(&z, &a, topo.neighbors(), 0.2).unwrap();
            let mut it = s.weights.iter();
            for nbrs in topo.neighbors() {
                let total: f64 = it.by_ref().take(nbrs.len()).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        let config = GlnConfig {
            feature_dim: 5,
            hidden_dim: 4,
            output_dim: 2,
            self_loops: loops,
            ..GlnConfig::default()
        }
        .with_attention(true);
        for seed in 0..20 {
            let gln = Gln::new(config.clone(), seed).unwrap();
            let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = Matrix::from_rows(&vec![row; 4]).unwrap();
            let w = gln.attention_weights(&h, 0).unwrap();
            for (nbrs, ws) in w.neighbors.iter().zip(&w.weights) {
                for v in ws {
                    uniform_worst = uniform_worst.max((v - 1.0 / nbrs.len() as f64).abs());
                }
            }
        }
    }
    Outcome::check(
        worst <= 1e-9 && uniform_worst <= 1e-9,
        format!("max |Σ weights − 1| {worst:.2e}; identical states max |w − 1/|N(i)|| {uniform_worst:.2e}"),
    )
}

fn standard_run(overlap: f64, attention: bool) -> (f64, usize, Duration) {
    let synth = SynthConfig {
        overlap,
        ..SynthConfig::default()
    };
    let (plan, table) = generate_synthetic(&synth).unwrap();
    let samples = table.samples();
    let start = Instant::now();
    let (train, test) = standard_split(&samples, 0.75, synth.seed).unwrap();
    let config = GlnConfig::new(table.dim(), plan.location_count()).with_attention(attention);
    let (model, log) = train_standard(&train, &[], &config, &TrainConfig::default(), synth.seed).unwrap();
    (accuracy(&model, &test), log.epochs.len(), start.elapsed())
}

fn standard_learning() -> Outcome {
    let (acc, epochs, time) = standard_run(0.5, false);
    let (acc_plain, _, _) = standard_run(0.9, false);
    let (acc_attn, _, _) = standard_run(0.9, true);
    Outcome::check(
        acc >= 0.95 && epochs <= 200 && time < Duration::from_secs(120) && acc_plain >= 0.80 && acc_attn >= 0.80,
        format!(
            "ρ=0.5: {:.2}% in {epochs} epochs, {:.1}s; ρ=0.9: plain {:.2}%, attention {:.2}%",
            100.0 * acc,
            time.as_secs_f64(),
            100.0 * acc_plain,
            100.0 * acc_attn
        ),
    )
}

fn zero_shot_report(model: &CompatibilityModel, plan: &FloorPlan, test: &[MultiViewSample]) -> EvalReport {
    let k = plan.location_count();
    let refs: Vec<&MultiViewSample> = test.iter().collect();
    let scores = model.scores(&refs).unwrap();
    let rankings: Vec<Vec<usize>> = (0..scores.rows())
        .map(|r| {
            gln::gln::rank_scores(scores.row(r), k)
                .unwrap()
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect();
    let truths: Vec<usize> = test.iter().map(|s| s.location).collect();
    EvalReport::from_rankings(plan, &rankings, &truths, DistanceMetric::Euclidean).unwrap()
}

/// Runs the zero-shot comparison for one seed; also returns whether unseen
/// embedding rows kept their exact bits.
fn zero_shot_seed(seed: u64) -> (EvalReport, EvalReport, bool) {
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let (plan, table) = generate_synthetic(&synth).unwrap();
    let samples = table.samples();
    let split = alternating_split(&plan, AlternationRule::BfsDepth);
    let parts = zero_shot_sample_split(&samples, &split, 0.75, seed)
        .unwrap()
        .apply(&samples)
        .unwrap();
    let embeddings = train_map2vec(
        &plan,
        &Map2VecConfig {
            seed,
            ..Map2VecConfig::default()
        },
    )
    .unwrap();
    let bits = |t: &gln::map2vec::EmbeddingTable| -> Vec<Vec<u64>> {
        split
            .unseen()
            .iter()
            .map(|&y| t.embedding_of(y).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let before = bits(&embeddings);
    let config = GlnConfig::new(table.dim(), 1);
    let train_cfg = TrainConfig::default();
    let (zs, _) =
        train_compatibility(&parts.train, &parts.val, &embeddings, &split, &config, &train_cfg, seed).unwrap();
    let isolated = bits(&zs.embeddings) == before;
    let (bl, _) = baseline_coord_model(&plan, &split, &config, &train_cfg, seed, &parts.train, &parts.val).unwrap();
    (
        zero_shot_report(&zs, &plan, &parts.test),
        zero_shot_report(&bl, &plan, &parts.test),
        isolated,
    )
}

fn zero_shot_transfer(isolation: &mut Option<bool>) -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut all_isolated = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (zs, bl, isolated) = zero_shot_seed(seed);
        all_isolated &= isolated;
        let ratio_ok = zs.cdf[&5] >= 2.0 * bl.cdf[&5];
        let med_ok = zs.med < bl.med;
        ok &= ratio_ok && med_ok;
        parts.push(format!(
            "seed {seed}: CDF@5 {:.2}% vs {:.2}% (≥2×: {ratio_ok}), MED {:.2} vs {:.2} (lower: {med_ok})",
            100.0 * zs.cdf[&5],
            100.0 * bl.cdf[&5],
            zs.med,
            bl.med
        ));
    }
    *isolation = Some(all_isolated);
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    Outcome::check(ok, parts.join("; "))
}

fn gradient_isolation(isolation: Option<bool>) -> Outcome {
    match isolation {
        Some(ok) => Outcome::check(
            ok,
            format!("unseen embedding rows bit-identical after training on seeds 0,1,2: {ok}"),
        ),
        None => Outcome::check(false, "zero-shot run did not complete".into()),
    }
}

fn grid_plan(w: usize, h: usize) -> FloorPlan {
    let mut coords = Vec::new();
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let id = y * w + x;
            coords.push([x as f64, y as f64]);
            if x + 1 < w {
                edges.push((id, id + 1));
            }
            if y + 1 < h {
                edges.push((id, id + w));
            }
        }
    }
    FloorPlan::new(coords, edges).unwrap()
}

fn metrics_oracle() -> Outcome {
    let plan = grid_plan(6, 10);
    let k = plan.location_count();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let rankings: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut ids: Vec<usize> = (0..k).collect();
                ids.shuffle(&mut rng);
                ids
            })
            .collect();
        let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let top1: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
        let mut prev = 0.0;
        for cut in 1..=k {
            let r = recall_at_k(&rankings, &truths, cut).unwrap();
            worst = worst.max((r - brute_recall(&rankings, &truths, cut)).abs());
            monotone &= r >= prev;
            prev = r;
        }
        let mut prev = 0.0;
        for d in 0..=12 {
            let c = cdf_at_k(&plan, &top1, &truths, d as f64).unwrap();
            worst = worst.max((c - brute_cdf(&plan, &top1, &truths, d as f64)).abs());
            monotone &= c >= prev;
            prev = c;
        }
        let errors: Vec<f64> = top1
            .iter()
            .zip(&truths)
            .map(|(&p, &t)| plan.error_distance(p, t).unwrap())
            .collect();
        worst = worst.max((median_error_distance(&errors).unwrap() - brute_median(&errors)).abs());
    }
    let med = median_error_distance(&[0.0, 1.0, 2.0, 3.0]).unwrap();
    Outcome::check(
        worst <= 1e-12 && med == 1.5 && monotone,
        format!("max |impl − brute force| {worst:.2e} over 1000 sets; MED([0,1,2,3]) = {med}; monotone: {monotone}"),
    )
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cli_pipeline(a.path(), SMALL_RUN_CONFIG);
    let second = cli_pipeline(b.path(), SMALL_RUN_CONFIG);
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let same_keys = first.keys().eq(second.keys());
    Outcome::check(
        same_keys && differing.is_empty(),
        format!(
            "{} outputs of generate/train/embed/zs-train/evaluate/predict compared, differing: {differing:?}",
            first.len()
        ),
    )
}

fn icube_dataset() -> Outcome {
    let Some(dir) = std::env::var_os(ICUBE_ENV).map(PathBuf::from) else {
        return Outcome {
            status: Status::Skip,
            detail: format!("set {ICUBE_ENV} to a directory with plan.txt, features.ftb and splits/"),
        };
    };
    let (plan, ids) = load_floorplan(&dir.join("plan.txt")).unwrap();
    let dense = gln::floorplan::dense_lookup(&ids);
    let table = load_features(&dir.join("features.ftb")).unwrap();
    let mut samples = table.samples();
    for s in &mut samples {
        s.location = dense[&(s.location as u64)];
    }
    let standard = SampleSplit::load(&dir.join("splits/standard.txt"))
        .unwrap()
        .apply(&samples)
        .unwrap();
    let config = GlnConfig::new(table.dim(), plan.location_count());
    let (model, _) = train_standard(&standard.train, &standard.val, &config, &TrainConfig::default(), 0).unwrap();
    let k = plan.location_count();
    let std_model = Checkpoint::Standard(model);
    let rankings: Vec<Vec<usize>> = standard
        .test
        .iter()
        .map(|s| {
            std_model
                .gln()
                .predict_topk(s, k)
                .unwrap()
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect();
    let truths: Vec<usize> = standard.test.iter().map(|s| s.location).collect();
    let std_report = EvalReport::from_rankings(&plan, &rankings, &truths, DistanceMetric::Euclidean).unwrap();

    let locations = Split::load_mapped(&dir.join("splits/locations.txt"), &ids).unwrap();
    let zs_parts = SampleSplit::load(&dir.join("splits/zeroshot.txt"))
        .unwrap()
        .apply(&samples)
        .unwrap();
    let embeddings = train_map2vec(&plan, &Map2VecConfig::default()).unwrap();
    let (zs, _) = train_compatibility(
        &zs_parts.train,
        &zs_parts.val,
        &embeddings,
        &locations,
        &GlnConfig::new(table.dim(), 1),
        &TrainConfig::default(),
        0,
    )
    .unwrap();
    let zs_report = zero_shot_report(&zs, &plan, &zs_parts.test);
    Outcome::check(
        std_report.meter_level >= 0.85 && zs_report.cdf[&5] >= 0.45 && zs_report.med <= 6.0,
        format!(
            "standard meter-level {:.2}%; zero-shot CDF@5 {:.2}%, MED {:.2} m",
            100.0 * std_report.meter_level,
            100.0 * zs_report.cdf[&5],
            zs_report.med
        ),
    )
}

fn run(name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::check(false, format!("panicked: {msg}"))
    });
    let tag = match outcome.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!(
        "[{tag}] {name} ({:.1}s): {}",
        start.elapsed().as_secs_f64(),
        outcome.detail
    );
    !matches!(outcome.status, Status::Fail)
}

fn main() -> ExitCode {
    let mut isolation = None;
    let results = [
        run("gradient suite", gradient_suite),
        run("message-passing oracle", message_passing_oracle),
        run("attention normalization", attention_normalization),
        run("standard-setting learning", standard_learning),
        run("zero-shot transfer", || zero_shot_transfer(&mut isolation)),
        run("gradient isolation", || gradient_isolation(isolation)),
        run("metrics oracle", metrics_oracle),
        run("CLI determinism", determinism),
        run("ICUBE reference (dataset-gated)", icube_dataset),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} criteria, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
