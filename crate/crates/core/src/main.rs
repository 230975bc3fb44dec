use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gln::checkpoint::{Checkpoint, ModelKind};
use gln::config::RunConfig;
use gln::datasets::{
    check_locations, generate_synthetic, load_features, standard_sample_split, zero_shot_sample_split, SampleSplit,
};
use gln::error::{GlnError, Result};
use gln::evalmetrics::{curve_to_text, emit_cdf_curve, error_distances, EvalReport};
use gln::floorplan::{alternating_split, dense_lookup, load_floorplan, FloorPlan, IdMap, Split};
use gln::gln::{rank_scores, train_standard, MultiViewSample};
use gln::map2vec::{train_map2vec, EmbeddingTable};
use gln::numerics::{softmax_rows, Matrix};
use gln::zeroshot::{baseline_coord_model, train_compatibility};

const SCORE_CHUNK: usize = 256;

#[derive(Parser)]
#[command(name = "gln", version, about = "Indoor localization from four-view image features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grid world: plan, features and splits.
    Generate(GenerateArgs),
    /// Train a standard-setting classifier.
    Train(TrainArgs),
    /// Learn Map2Vec location embeddings from a floor plan.
    Embed(EmbedArgs),
    /// Train a zero-shot compatibility model on seen locations.
    ZsTrain(ZsTrainArgs),
    /// Score a checkpoint on labelled features.
    Evaluate(EvaluateArgs),
    /// Rank locations for every query group of a feature file.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelFlags {
    /// Use attention-weighted message passing.
    #[arg(long)]
    attention: bool,
    /// Add self-loops to the view graph.
    #[arg(long, value_name = "BOOL")]
    self_loops: Option<bool>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Sample split (`train|val|test <group>` lines); derived from the config when absent.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Standard,
    Zeroshot,
    BaselineCoord,
}

impl Mode {
    fn kind(self) -> ModelKind {
        match self {
            Mode::Standard => ModelKind::Standard,
            Mode::Zeroshot => ModelKind::ZeroShot,
            Mode::BaselineCoord => ModelKind::BaselineCoord,
        }
    }
}

#[derive(Args)]
struct ZsTrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Seen/unseen location file; alternating split of the plan when absent.
    #[arg(long)]
    locations: Option<PathBuf>,
    /// Sample split; seen samples are split by the config when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Precomputed Map2Vec table; trained from the plan when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "zeroshot")]
    mode: Mode,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Sample split; only its test part is scored. All samples when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Plan used to print original location ids; dense ids when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k_best: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::ZsTrain(a) => zs_train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
    }
}

/// Loads the config, applies flag overrides and prepares the output directory.
fn setup(common: &Common, model: Option<&ModelFlags>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.map2vec.seed = cfg.seed;
    if let Some(m) = model {
        if m.attention {
            cfg.gln.attention = true;
        }
        if let Some(loops) = m.self_loops {
            cfg.gln.self_loops = loops;
        }
    }
    fs::create_dir_all(&common.out).map_err(|e| GlnError::io(&common.out, e))?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.save(&out.join("config.toml"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GlnError::io(path, e))
}

/// Features with locations translated from plan ids to dense ids.
fn load_samples(features: &Path, plan: &FloorPlan, ids: &IdMap) -> Result<(usize, Vec<MultiViewSample>)> {
    let table = load_features(features)?;
    let dense = dense_lookup(ids);
    let mut samples = table.samples();
    for s in &mut samples {
        s.location = *dense.get(&(s.location as u64)).ok_or_else(|| {
            GlnError::Data(format!("group {}: location {} is not in the plan", s.group, s.location))
        })?;
    }
    check_locations(&samples, plan)?;
    Ok((table.dim(), samples))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = setup(&a.common, None)?;
    cfg.synth.seed = cfg.seed;
    let out = &a.common.out;
    let (plan, table) = generate_synthetic(&cfg.synth)?;
    plan.save(&out.join("plan.txt"))?;
    table.save(&out.join("features.ftb"))?;
    let splits = out.join("splits");
    fs::create_dir_all(&splits).map_err(|e| GlnError::io(&splits, e))?;
    let samples = table.samples();
    standard_sample_split(&samples, cfg.split.train_ratio, cfg.split.val_ratio, cfg.seed)?
        .save(&splits.join("standard.txt"))?;
    let locations = alternating_split(&plan, cfg.split.alternation);
    locations.save(&splits.join("locations.txt"))?;
    zero_shot_sample_split(&samples, &locations, cfg.split.zero_shot_train_ratio, cfg.seed)?
        .save(&splits.join("zeroshot.txt"))?;
    echo_config(&cfg, out)?;
    println!(
        "wrote {} locations, {} groups of dimension {} to {}",
        plan.location_count(),
        table.group_count(),
        table.dim(),
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = setup(&a.common, Some(&a.model))?;
    let out = &a.common.out;
    let (plan, ids) = load_floorplan(&a.plan)?;
    let (dim, samples) = load_samples(&a.features, &plan, &ids)?;
    let split = match &a.split {
        Some(p) => SampleSplit::load(p)?,
        None => standard_sample_split(&samples, cfg.split.train_ratio, cfg.split.val_ratio, cfg.seed)?,
    };
    let parts = split.apply(&samples)?;
    cfg.gln.feature_dim = dim;
    cfg.gln.output_dim = plan.location_count();
    info!("training on {} groups, validating on {}", parts.train.len(), parts.val.len());
    let (model, log) = train_standard(&parts.train, &parts.val, &cfg.gln, &cfg.train, cfg.seed)?;
    Checkpoint::Standard(model).save(&out.join("checkpoint.gln"))?;
    write_text(&out.join("train_log.txt"), &log.to_text())?;
    echo_config(&cfg, out)?;
    println!(
        "trained {} epochs (best {}), checkpoint in {}",
        log.epochs.len(),
        log.best_epoch,
        out.display()
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let cfg = setup(&a.common, None)?;
    let out = &a.common.out;
    let (plan, _) = load_floorplan(&a.plan)?;
    let table = train_map2vec(&plan, &cfg.map2vec)?;
    table.save(&out.join("embeddings.txt"))?;
    echo_config(&cfg, out)?;
    println!(
        "wrote {}x{} embeddings to {}",
        table.location_count(),
        table.dim(),
        out.display()
    );
    Ok(())
}

fn zs_train(a: ZsTrainArgs) -> Result<()> {
    if a.mode == Mode::Standard {
        return Err(GlnError::Config("zs-train needs --mode zeroshot or baseline-coord".into()));
    }
    let mut cfg = setup(&a.common, Some(&a.model))?;
    let out = &a.common.out;
    let (plan, ids) = load_floorplan(&a.plan)?;
    let (dim, samples) = load_samples(&a.features, &plan, &ids)?;
    let locations = match &a.locations {
        Some(p) => Split::load_mapped(p, &ids)?,
        None => alternating_split(&plan, cfg.split.alternation),
    };
    let split = match &a.split {
        Some(p) => SampleSplit::load(p)?,
        None => zero_shot_sample_split(&samples, &locations, cfg.split.zero_shot_train_ratio, cfg.seed)?,
    };
    let parts = split.apply(&samples)?;
    cfg.gln.feature_dim = dim;
    let (model, log) = if a.mode == Mode::Zeroshot {
        let embeddings = match &a.embeddings {
            Some(p) => EmbeddingTable::load(p)?,
            None => {
                let t = train_map2vec(&plan, &cfg.map2vec)?;
                t.save(&out.join("embeddings.txt"))?;
                t
            }
        };
        if embeddings.location_count() != plan.location_count() {
            return Err(GlnError::Data(format!(
                "embedding table has {} rows, plan has {} locations",
                embeddings.location_count(),
                plan.location_count()
            )));
        }
        let trained = train_compatibility(
            &parts.train,
            &parts.val,
            &embeddings,
            &locations,
            &cfg.gln,
            &cfg.train,
            cfg.seed,
        )?;
        (Checkpoint::ZeroShot(trained.0), trained.1)
    } else {
        let trained = baseline_coord_model(
            &plan,
            &locations,
            &cfg.gln,
            &cfg.train,
            cfg.seed,
            &parts.train,
            &parts.val,
        )?;
        (Checkpoint::BaselineCoord(trained.0), trained.1)
    };
    cfg.gln.output_dim = model.gln().config.output_dim;
    model.save(&out.join("checkpoint.gln"))?;
    write_text(&out.join("train_log.txt"), &log.to_text())?;
    echo_config(&cfg, out)?;
    println!(
        "trained {} epochs (best {}), checkpoint in {}",
        log.epochs.len(),
        log.best_epoch,
        out.display()
    );
    Ok(())
}

/// Full score rows (`B × k`) for a checkpoint: probabilities for standard
/// models, compatibilities otherwise.
fn score_rows(ckpt: &Checkpoint, samples: &[MultiViewSample]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_CHUNK) {
        let refs: Vec<&MultiViewSample> = chunk.iter().collect();
        let scores: Matrix = match ckpt {
            Checkpoint::Standard(g) => softmax_rows(&g.outputs(&refs)?),
            Checkpoint::ZeroShot(m) | Checkpoint::BaselineCoord(m) => m.scores(&refs)?,
        };
        rows.extend((0..scores.rows()).map(|r| scores.row(r).to_vec()));
    }
    Ok(rows)
}

fn class_count(ckpt: &Checkpoint) -> usize {
    match ckpt {
        Checkpoint::Standard(g) => g.config.output_dim,
        Checkpoint::ZeroShot(m) | Checkpoint::BaselineCoord(m) => m.location_count(),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = setup(&a.common, None)?;
    let out = &a.common.out;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.kind() != a.mode.kind() {
        return Err(GlnError::Config(format!(
            "checkpoint holds a {} model but --mode is {}",
            ckpt.kind(),
            a.mode.kind()
        )));
    }
    let (plan, ids) = load_floorplan(&a.plan)?;
    let (dim, samples) = load_samples(&a.features, &plan, &ids)?;
    if dim != ckpt.gln().config.feature_dim {
        return Err(GlnError::Data(format!(
            "features have dimension {dim}, checkpoint expects {}",
            ckpt.gln().config.feature_dim
        )));
    }
    let k = class_count(&ckpt);
    if k != plan.location_count() {
        return Err(GlnError::Data(format!(
            "checkpoint scores {k} locations, plan has {}",
            plan.location_count()
        )));
    }
    let test = match &a.split {
        Some(p) => SampleSplit::load(p)?.apply(&samples)?.test,
        None => samples,
    };
    let rankings = score_rows(&ckpt, &test)?
        .iter()
        .map(|row| Ok(rank_scores(row, k)?.into_iter().map(|(id, _)| id).collect()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let truths: Vec<usize> = test.iter().map(|s| s.location).collect();
    let report = EvalReport::from_rankings(&plan, &rankings, &truths, cfg.eval.metric)?;
    let top1: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
    let errors = error_distances(&plan, &top1, &truths, cfg.eval.metric)?;
    let curve = emit_cdf_curve(&errors, cfg.eval.cdf_max, cfg.eval.cdf_step)?;
    report.save(&out.join("report.txt"))?;
    write_text(&out.join("cdf.txt"), &curve_to_text(&curve))?;
    echo_config(&cfg, out)?;
    println!("n {}", report.n);
    for (c, v) in &report.recall {
        println!("Recall@{c} {:.2}%", 100.0 * v);
    }
    for (c, v) in &report.cdf {
        println!("CDF@{c} {:.2}%", 100.0 * v);
    }
    println!("MED {:.2}", report.med);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let table = load_features(&a.features)?;
    if table.dim() != ckpt.gln().config.feature_dim {
        return Err(GlnError::Data(format!(
            "features have dimension {}, checkpoint expects {}",
            table.dim(),
            ckpt.gln().config.feature_dim
        )));
    }
    let ids: Option<IdMap> = match &a.plan {
        Some(p) => Some(load_floorplan(p)?.1),
        None => None,
    };
    let samples = table.samples();
    let mut text = String::new();
    for (s, row) in samples.iter().zip(score_rows(&ckpt, &samples)?) {
        let ranked = rank_scores(&row, a.k_best)?;
        let items: Vec<String> = ranked
            .iter()
            .map(|(id, score)| {
                let shown = ids.as_ref().map_or(*id as u64, |m| m[*id]);
                format!("{shown}:{score}")
            })
            .collect();
        text.push_str(&format!("{}: {}\n", s.group, items.join(",")));
    }
    print!("{text}");
    Ok(())
}
