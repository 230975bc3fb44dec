//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gln::floorplan::{FloorPlan, LocationId};
use gln::gln::{Gln, GlnConfig, MultiViewSample};
use gln::numerics::{Matrix, Mode, RunningStats, Tape, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so kinks are not crossed by the step.
pub fn random_away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    random_matrix(rng, rows, cols).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)` in Frobenius norm.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

/// Scalar-valued graph over trainable inputs.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn evaluate(builder: &Builder, inputs: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = builder(&mut tape, &vars);
    tape.value(out)[(0, 0)]
}

/// Central differences for every entry of every input.
pub fn numeric_gradients(builder: &Builder, inputs: &[Matrix]) -> Vec<Matrix> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        for e in 0..inputs[i].len() {
            let orig = work[i].as_slice()[e];
            work[i].as_mut_slice()[e] = orig + FD_STEP;
            let plus = evaluate(builder, &work);
            work[i].as_mut_slice()[e] = orig - FD_STEP;
            let minus = evaluate(builder, &work);
            work[i].as_mut_slice()[e] = orig;
            g.as_mut_slice()[e] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

pub fn analytic_gradients(builder: &Builder, inputs: &[Matrix]) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = builder(&mut tape, &vars);
    tape.backward(out).unwrap();
    vars.iter().map(|&v| tape.grad(v)).collect()
}

/// Largest per-input relative error between tape and finite-difference gradients.
pub fn gradient_error(builder: &Builder, inputs: &[Matrix]) -> f64 {
    let a = analytic_gradients(builder, inputs);
    let n = numeric_gradients(builder, inputs);
    a.iter().zip(&n).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// Reduces a matrix output to a scalar with fixed random weights so every
/// entry of the output gradient differs.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Matrix) -> Var {
    let m = tape.masked(y, weights.clone());
    tape.sum(m)
}

pub const OP_NAMES: [&str; 18] = [
    "matmul",
    "add",
    "add_row_bias",
    "scale",
    "sum",
    "transpose",
    "reshape",
    "concat_cols",
    "relu",
    "leaky_relu",
    "dropout",
    "masked",
    "batch_norm",
    "propagate",
    "graph_attention",
    "softmax_rows",
    "cross_entropy",
    "softmax_cross_entropy",
];

fn four_cycle_neighbors(self_loops: bool) -> Vec<Vec<usize>> {
    (0..4)
        .map(|i| {
            let mut n = vec![(i + 3) % 4, (i + 1) % 4];
            if self_loops {
                n.push(i);
            }
            n.sort();
            n
        })
        .collect()
}

/// One random finite-difference trial of a single tape operation.
pub fn op_gradient_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let w = random_matrix(&mut rng, r, c);
    match op {
        "matmul" => {
            let k = rng.gen_range(2..5);
            let a = random_matrix(&mut rng, r, k);
            let b = random_matrix(&mut rng, k, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.matmul(v[0], v[1]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &[a, b],
            )
        }
        "add" => {
            let a = random_matrix(&mut rng, r, c);
            let b = random_matrix(&mut rng, r, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.add(v[0], v[1]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &[a, b],
            )
        }
        "add_row_bias" => {
            let a = random_matrix(&mut rng, r, c);
            let b = random_matrix(&mut rng, 1, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.add_row_bias(v[0], v[1]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &[a, b],
            )
        }
        "scale" => {
            let a = random_matrix(&mut rng, r, c);
            let s = rng.gen_range(-3.0..3.0);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.scale(v[0], s);
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "sum" => {
            let a = random_matrix(&mut rng, r, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.masked(v[0], w.clone());
                    let s = t.sum(y);
                    let s2 = t.masked(s, Matrix::filled(1, 1, 0.7));
                    t.sum(s2)
                },
                &[a],
            )
        }
        "transpose" => {
            let a = random_matrix(&mut rng, c, r);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.transpose(v[0]);
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "reshape" => {
            let a = random_matrix(&mut rng, c, r);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.reshape(v[0], r, c).unwrap();
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "concat_cols" => {
            let c2 = rng.gen_range(1..4);
            let a = random_matrix(&mut rng, r, c);
            let b = random_matrix(&mut rng, r, c2);
            let w2 = random_matrix(&mut rng, r, c + c2);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.concat_cols(v[0], v[1]).unwrap();
                    weighted_sum(t, y, &w2)
                },
                &[a, b],
            )
        }
        "relu" => {
            let a = random_away_from_zero(&mut rng, r, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.relu(v[0]);
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "leaky_relu" => {
            let a = random_away_from_zero(&mut rng, r, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.leaky_relu(v[0], 0.2);
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "dropout" => {
            let a = random_matrix(&mut rng, r, c);
            let mask_seed = rng.gen();
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let y = t.dropout(v[0], 0.5, Mode::Train, &mut mask_rng).unwrap();
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "masked" => {
            let a = random_matrix(&mut rng, r, c);
            let m = random_matrix(&mut rng, r, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.masked(v[0], m.clone());
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "batch_norm" => {
            let rows = 4 * rng.gen_range(1..3);
            let x = random_matrix(&mut rng, rows, c);
            let gamma = random_matrix(&mut rng, 1, c);
            let beta = random_matrix(&mut rng, 1, c);
            let wb = random_matrix(&mut rng, rows, c);
            let running = RunningStats::new(c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, Mode::Train).unwrap();
                    weighted_sum(t, y, &wb)
                },
                &[x, gamma, beta],
            )
        }
        "propagate" => {
            let blocks = rng.gen_range(1..3);
            let loops = rng.gen_bool(0.5);
            let adjacency = gln::floorplan::ViewGraph::new(loops).topology().normalized_adjacency();
            let x = random_matrix(&mut rng, 4 * blocks, c);
            let wp = random_matrix(&mut rng, 4 * blocks, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.propagate(v[0], &adjacency).unwrap();
                    weighted_sum(t, y, &wp)
                },
                &[x],
            )
        }
        "graph_attention" => {
            let blocks = rng.gen_range(1..3);
            let neighbors = four_cycle_neighbors(rng.gen_bool(0.5));
            let z = random_matrix(&mut rng, 4 * blocks, c);
            let a = random_matrix(&mut rng, 2 * c, 1);
            let wa = random_matrix(&mut rng, 4 * blocks, c);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.graph_attention(v[0], v[1], &neighbors, 0.2).unwrap();
                    weighted_sum(t, y, &wa)
                },
                &[z, a],
            )
        }
        "softmax_rows" => {
            let a = random_matrix(&mut rng, r, c).map(|v| 3.0 * v);
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let y = t.softmax_rows(v[0]);
                    weighted_sum(t, y, &w)
                },
                &[a],
            )
        }
        "cross_entropy" => {
            let a = random_matrix(&mut rng, r, c);
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            gradient_error(
                &|t: &mut Tape, v: &[Var]| {
                    let p = t.softmax_rows(v[0]);
                    t.cross_entropy(p, &labels).unwrap()
                },
                &[a],
            )
        }
        "softmax_cross_entropy" => {
            let a = random_matrix(&mut rng, r, c).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            gradient_error(
                &|t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels).unwrap(),
                &[a],
            )
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Small random GLN and batch used by the end-to-end gradient check.
pub struct GlnCase {
    pub model: Gln,
    pub views: Matrix,
    pub labels: Vec<usize>,
    /// Fixed class embeddings (`classes × out`) for the compatibility variant.
    pub class_embeddings: Option<Matrix>,
    pub dropout_seed: u64,
}

impl GlnCase {
    pub fn random(seed: u64, attention: bool, compatibility: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(3..7);
        let f = rng.gen_range(2..5);
        let classes = rng.gen_range(2..5);
        let batch = rng.gen_range(2..4);
        let out = if compatibility { rng.gen_range(2..4) } else { classes };
        let config = GlnConfig {
            feature_dim: d,
            hidden_dim: f,
            output_dim: out,
            self_loops: rng.gen_bool(0.5),
            ..GlnConfig::default()
        }
        .with_attention(attention);
        let mut model = Gln::new(config, seed).unwrap();
        // Move away from the zero-initialized head and identity batch norm.
        for m in model.params.trainable_mut() {
            *m = random_matrix(&mut rng, m.rows(), m.cols());
        }
        GlnCase {
            model,
            views: random_matrix(&mut rng, 4 * batch, d),
            labels: (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
            class_embeddings: compatibility.then(|| random_matrix(&mut rng, classes, out)),
            dropout_seed: rng.gen(),
        }
    }

    fn loss(&self, model: &Gln) -> (f64, Vec<Matrix>) {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let g = model.build(&mut tape, &self.views, Mode::Train, &mut rng).unwrap();
        let logits = match &self.class_embeddings {
            Some(e) => {
                let et = tape.constant(e.transpose());
                tape.matmul(g.output, et).unwrap()
            }
            None => g.output,
        };
        let loss = tape.softmax_cross_entropy(logits, &self.labels).unwrap();
        let value = tape.value(loss)[(0, 0)];
        tape.backward(loss).unwrap();
        (value, g.params.iter().map(|&p| tape.grad(p)).collect())
    }

    /// Largest per-tensor relative error over all trainable parameters.
    pub fn gradient_error(&self) -> f64 {
        let (_, analytic) = self.loss(&self.model);
        let mut work = self.model.clone();
        let mut worst: f64 = 0.0;
        let count = analytic.len();
        for p in 0..count {
            let shape = analytic[p].shape();
            let mut numeric = Matrix::zeros(shape.0, shape.1);
            for e in 0..analytic[p].len() {
                let orig = work.params.trainable()[p].as_slice()[e];
                work.params.trainable_mut()[p].as_mut_slice()[e] = orig + FD_STEP;
                let plus = self.loss(&work).0;
                work.params.trainable_mut()[p].as_mut_slice()[e] = orig - FD_STEP;
                let minus = self.loss(&work).0;
                work.params.trainable_mut()[p].as_mut_slice()[e] = orig;
                numeric.as_mut_slice()[e] = (plus - minus) / (2.0 * FD_STEP);
            }
            worst = worst.max(relative_error(&analytic[p], &numeric));
        }
        worst
    }
}

/// Normalized 4-cycle adjacency built entry by entry from degrees.
pub fn dense_view_adjacency(self_loops: bool) -> Matrix {
    let mut adj = [[0.0f64; 4]; 4];
    for i in 0..4 {
        adj[i][(i + 1) % 4] = 1.0;
        adj[i][(i + 3) % 4] = 1.0;
        if self_loops {
            adj[i][i] = 1.0;
        }
    }
    let deg: Vec<f64> = adj.iter().map(|row| row.iter().sum()).collect();
    let mut out = Matrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            if adj[i][j] != 0.0 {
                out.as_mut_slice()[i * 4 + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

/// Plain triple-loop product, independent of `Matrix::matmul`.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out.as_mut_slice()[i * b.cols() + j] = s;
        }
    }
    out
}

/// Recall@k by scanning for the truth's position.
pub fn brute_recall(rankings: &[Vec<LocationId>], truths: &[LocationId], k: usize) -> f64 {
    let mut hits = 0usize;
    for (ranking, &truth) in rankings.iter().zip(truths) {
        if let Some(pos) = ranking.iter().position(|&id| id == truth) {
            if pos < k {
                hits += 1;
            }
        }
    }
    hits as f64 / rankings.len() as f64
}

/// CDF@k from coordinates directly.
pub fn brute_cdf(plan: &FloorPlan, predictions: &[LocationId], truths: &[LocationId], k: f64) -> f64 {
    let mut within = 0usize;
    for (&p, &t) in predictions.iter().zip(truths) {
        let (a, b) = (plan.coords()[p], plan.coords()[t]);
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if d <= k {
            within += 1;
        }
    }
    within as f64 / predictions.len() as f64
}

/// Median as the middle element or the mean of the two middle elements.
pub fn brute_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    for i in 0..v.len() {
        for j in 0..v.len() - 1 - i {
            if v[j] > v[j + 1] {
                v.swap(j, j + 1);
            }
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Top-1 accuracy of a standard model.
pub fn accuracy(model: &Gln, samples: &[MultiViewSample]) -> f64 {
    let refs: Vec<&MultiViewSample> = samples.iter().collect();
    let out = model.outputs(&refs).unwrap();
    let correct = samples
        .iter()
        .enumerate()
        .filter(|(r, s)| {
            let row = out.row(*r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == s.location
        })
        .count();
    correct as f64 / samples.len() as f64
}

pub const SMALL_RUN_CONFIG: &str = "\
seed = 5

[synth]
width = 3
height = 4
samples_per_location = 4
feature_dim = 32

[gln]
hidden_dim = 16

[train]
epochs = 5
batch_size = 8

[map2vec]
epochs = 20
";

pub fn gln_bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_gln"))
}

/// Runs `gln` with `args` in `dir`, returning exit code and stdout.
pub fn run_gln(dir: &std::path::Path, args: &[&str]) -> (i32, String) {
    let out = gln_bin().current_dir(dir).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

/// Every CLI subcommand on a small synthetic world; returns all written
/// files (relative path → bytes) plus captured stdout.
pub fn cli_pipeline(dir: &std::path::Path, config: &str) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("run.toml"), config).unwrap();
    let steps: &[&[&str]] = &[
        &["generate", "--config", "run.toml", "--out", "data"],
        &[
            "train", "--config", "run.toml", "--plan", "data/plan.txt", "--features", "data/features.ftb",
            "--split", "data/splits/standard.txt", "--out", "std",
        ],
        &["embed", "--config", "run.toml", "--plan", "data/plan.txt", "--out", "emb"],
        &[
            "zs-train", "--config", "run.toml", "--plan", "data/plan.txt", "--features", "data/features.ftb",
            "--locations", "data/splits/locations.txt", "--split", "data/splits/zeroshot.txt",
            "--embeddings", "emb/embeddings.txt", "--out", "zs",
        ],
        &[
            "zs-train", "--config", "run.toml", "--mode", "baseline-coord", "--plan", "data/plan.txt",
            "--features", "data/features.ftb", "--locations", "data/splits/locations.txt", "--split",
            "data/splits/zeroshot.txt", "--out", "bl",
        ],
        &[
            "evaluate", "--config", "run.toml", "--mode", "standard", "--checkpoint", "std/checkpoint.gln",
            "--plan", "data/plan.txt", "--features", "data/features.ftb", "--split", "data/splits/standard.txt",
            "--out", "std-eval",
        ],
        &[
            "evaluate", "--config", "run.toml", "--mode", "zeroshot", "--checkpoint", "zs/checkpoint.gln",
            "--plan", "data/plan.txt", "--features", "data/features.ftb", "--split", "data/splits/zeroshot.txt",
            "--out", "zs-eval",
        ],
        &[
            "evaluate", "--config", "run.toml", "--mode", "baseline-coord", "--checkpoint", "bl/checkpoint.gln",
            "--plan", "data/plan.txt", "--features", "data/features.ftb", "--split", "data/splits/zeroshot.txt",
            "--out", "bl-eval",
        ],
        &["predict", "--checkpoint", "zs/checkpoint.gln", "--features", "data/features.ftb", "--k-best", "3"],
    ];
    let mut files = std::collections::BTreeMap::new();
    for (i, args) in steps.iter().enumerate() {
        let (code, stdout) = run_gln(dir, args);
        assert_eq!(code, 0, "step {args:?} failed");
        files.insert(format!("stdout/{i}"), stdout.into_bytes());
    }
    collect_files(dir, dir, &mut files);
    files
}

fn collect_files(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}
