//! Experiment orchestration: config file, run directory, subcommands.
//!
//! Every subcommand reads and writes only its declared artifacts inside one
//! run directory (advisory-locked). The config file is parsed and validated
//! before anything is created, so a malformed config leaves no partial state.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    save_denoiser_archive, save_pruner_archive, GateArtifact, PruneRecord, ScoresArtifact,
};
use crate::baselines::{
    consistency_oracle, ga_search, interval_gate, random_search, GaParams, SearchBudget,
};
use crate::diffusion::{
    fit_toy_denoiser, make_schedule, sample, shapes_dataset, DataShape, DenoiserSpec, FitConfig,
};
use crate::error::{Error, Result};
use crate::exec::run_subnet;
use crate::graph::{build_supernet, gamma_profile};
use crate::loss::{data_range, ssim, LossConfig};
use crate::post::{bisect_threshold, PruneRequest};
use crate::pruner::{init_pruner, predict_scores, EncoderKind, PrunerConfig};
use crate::toolkit::{
    default_probe_block, gate_heatmap_data, heatmap_plot, line_plot, macs_report,
    similarity_matrix, PlotFormat, RunDir, Series,
};
use crate::train::{train_pruner, CheckpointGranularity, Precision, TrainConfig};

pub const RUN_DIR_ENV: &str = "DIPGO_RUN_DIR";

fn default_master_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// One of "unet6", "unet9", "chain2".
    pub preset: String,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "unet6".into(),
            t_steps: 20,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> Result<DenoiserSpec> {
        match self.preset.as_str() {
            "unet6" => Ok(DenoiserSpec::toy_unet6()),
            "unet9" => Ok(DenoiserSpec::unet9()),
            "chain2" => Ok(DenoiserSpec::chain2()),
            other => Err(Error::Config(format!("unknown model preset {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            steps: 2500,
            lr: 2e-3,
            batch_size: 8,
            dataset_size: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrunerSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub encoder: EncoderKind,
    pub head_hidden: usize,
}

impl Default for PrunerSection {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            depth: 1,
            encoder: EncoderKind::SelfAttentionStack,
            head_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub checkpoint: CheckpointGranularity,
    pub precision: Precision,
    pub condition_count: usize,
    pub snapshot_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.1,
            weight_decay: 1e-4,
            batch_size: 1,
            checkpoint: CheckpointGranularity::PerTimestep,
            precision: Precision::Full,
            condition_count: 1000,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub target_ratio: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            target_ratio: 0.5,
            tolerance: crate::post::DEFAULT_TOLERANCE,
            max_iterations: crate::post::DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub evaluations: usize,
    pub calibration: usize,
    pub target_ratio: f64,
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: Option<f64>,
    pub elitism: usize,
    pub interval: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            evaluations: 1000,
            calibration: 16,
            target_ratio: 0.5,
            population: 25,
            generations: 40,
            tournament: 3,
            crossover_rate: 0.9,
            mutation_rate: None,
            elitism: 1,
            interval: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seeds: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub format: String,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { format: "png".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    pub model: ModelSection,
    pub fit: FitSection,
    pub pruner: PrunerSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub search: SearchSection,
    pub eval: EvalSection,
    pub plot: PlotSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec()?;
        make_schedule(self.model.t_steps, self.model.beta_start, self.model.beta_end)?;
        self.loss.validate()?;
        self.plot.format.parse::<PlotFormat>()?;
        if self.model.t_steps < 2 {
            return Err(Error::Config("t_steps must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Random,
    Ga,
    Interval,
}

#[derive(Debug, Parser)]
#[command(
    name = "dipgo",
    about = "Differentiable block pruning for unrolled diffusion samplers"
)]
pub struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for artifacts (defaults to $DIPGO_RUN_DIR).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Target flops-pruning ratio override.
    #[arg(long, global = true)]
    pub target_ratio: Option<f64>,
    /// Baseline searcher for `search-baseline`.
    #[arg(long, global = true, value_enum)]
    pub baseline: Option<BaselineKind>,
    /// Caching interval for the interval baseline.
    #[arg(long, global = true)]
    pub interval: Option<usize>,
    /// Plot output format.
    #[arg(long, global = true)]
    pub plot_format: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train the toy denoiser and persist its weight archive.
    FitDiffusion,
    /// Train the pruner against the frozen denoiser.
    TrainPruner,
    /// Bisect the trained scores into a gate at the target ratio.
    Prune,
    /// Run a gradient-free baseline (random, ga, interval).
    SearchBaseline,
    /// Evaluate a gate over held-out seeds.
    Eval,
    /// Emit similarity/gate heatmaps and loss curves.
    Plot,
}

struct Context {
    config: ExperimentConfig,
    run: RunDir,
}

fn load_context(cli: &Cli) -> Result<Context> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let text = fs::read_to_string(&config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(r) = cli.target_ratio {
        config.prune.target_ratio = r;
        config.search.target_ratio = r;
    }
    if let Some(i) = cli.interval {
        config.search.interval = i;
    }
    if let Some(f) = &cli.plot_format {
        f.parse::<PlotFormat>()?;
        config.plot.format = f.clone();
    }
    config.validate()?;
    let run_dir = cli
        .run_dir
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!("--run-dir or ${RUN_DIR_ENV} must specify the run directory"))
        })?;
    let run = RunDir::open(run_dir)?;
    // The manifest pins the config against later invocations; hash the
    // effective (override-applied) configuration.
    let effective = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    run.ensure_manifest(effective.as_bytes(), config.master_seed)?;
    Ok(Context { config, run })
}

/// Seed pools per stage, disjoint by construction.
fn stage_seeds(master: u64, tag: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ tag);
    (0..count).map(|_| rng.gen()).collect()
}

const TAG_CALIBRATION: u64 = 0xca11_b8a7e;
const TAG_EVAL: u64 = 0xe7a1_5eed;

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = load_context(cli)?;
    let _lock = ctx.run.lock()?;
    match cli.command {
        Command::FitDiffusion => cmd_fit(&ctx),
        Command::TrainPruner => cmd_train(&ctx),
        Command::Prune => cmd_prune(&ctx),
        Command::SearchBaseline => cmd_search(&ctx, cli.baseline.unwrap_or(BaselineKind::Random)),
        Command::Eval => cmd_eval(&ctx),
        Command::Plot => cmd_plot(&ctx),
    }
}

fn cmd_fit(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let spec = cfg.model.spec()?;
    let schedule = make_schedule(cfg.model.t_steps, cfg.model.beta_start, cfg.model.beta_end)?;
    let dataset = shapes_dataset(cfg.fit.dataset_size, spec.data, cfg.master_seed);
    let fit_cfg = FitConfig {
        steps: cfg.fit.steps,
        lr: cfg.fit.lr,
        batch_size: cfg.fit.batch_size,
        seed: cfg.master_seed,
    };
    let (weights, log) = fit_toy_denoiser(&spec, &dataset, &schedule, &fit_cfg)?;
    save_denoiser_archive(&ctx.run.denoiser_path(), &weights, &schedule)?;
    println!(
        "fit-diffusion: {} steps, loss {} -> {}, archive {}",
        cfg.fit.steps,
        log.initial_loss().map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
        log.final_loss().map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
        ctx.run.denoiser_path().display()
    );
    Ok(())
}

fn load_denoiser(ctx: &Context, needed_by: &str) -> Result<(crate::diffusion::DenoiserWeights, crate::diffusion::NoiseSchedule)> {
    ctx.run
        .require(&ctx.run.denoiser_path(), needed_by, "fit-diffusion")?;
    crate::artifact::load_denoiser_archive(&ctx.run.denoiser_path())
}

fn cmd_train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let (denoiser, schedule) = load_denoiser(ctx, "train-pruner")?;
    let net = build_supernet(&denoiser.spec, schedule.t_max)?;
    let profile = gamma_profile(&net)?;
    let pruner_cfg = PrunerConfig {
        embed_dim: cfg.pruner.embed_dim,
        depth: cfg.pruner.depth,
        encoder: cfg.pruner.encoder,
        head_hidden: cfg.pruner.head_hidden,
        n_blocks: net.n_blocks,
        t_steps: net.t_steps,
    };
    let pruner = init_pruner(&pruner_cfg, cfg.master_seed)?;
    let train_cfg = TrainConfig {
        steps: cfg.train.steps,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        batch_size: cfg.train.batch_size,
        checkpoint: cfg.train.checkpoint,
        precision: cfg.train.precision,
        memory_limit_elems: None,
        master_seed: cfg.master_seed,
        condition_count: cfg.train.condition_count,
        snapshot_every: (cfg.train.snapshot_every > 0).then_some(cfg.train.snapshot_every),
    };
    let run_dir = &ctx.run;
    let mut snapshot = |step: usize, w: &crate::pruner::PrunerWeights| {
        let path = run_dir.root().join(format!("pruner_step{step}.dga"));
        if let Err(e) = save_pruner_archive(&path, w) {
            eprintln!("warning: could not write snapshot at step {step}: {e}");
        }
    };
    let out = train_pruner(
        pruner,
        &denoiser,
        &net,
        &profile,
        &schedule,
        &cfg.loss,
        &train_cfg,
        Some(&mut snapshot),
    )?;
    save_pruner_archive(&ctx.run.pruner_path(), &out.weights)?;
    let scores = predict_scores(&out.weights);
    let artifact = ScoresArtifact {
        scores: scores.s,
        config: out.weights.config.clone(),
        graph_hash: net.graph_hash(),
    };
    ctx.run
        .write_atomic(&ctx.run.scores_path(), artifact.to_json().as_bytes())?;
    ctx.run.write_train_log(&out.log)?;
    let last = out.log.last();
    println!(
        "train-pruner: {} steps, final keep ratio {}, phase {}",
        out.log.len(),
        last.map(|r| format!("{:.3}", r.keep_ratio_flops)).unwrap_or_else(|| "-".into()),
        last.map(|r| r.phase.clone()).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

fn cmd_prune(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let (denoiser, schedule) = load_denoiser(ctx, "prune")?;
    ctx.run
        .require(&ctx.run.scores_path(), "prune", "train-pruner")?;
    let scores = ScoresArtifact::from_json(&fs::read_to_string(ctx.run.scores_path())?)?;
    let net = build_supernet(&denoiser.spec, schedule.t_max)?;
    if scores.graph_hash != net.graph_hash() {
        return Err(Error::Format("scores were trained on a different graph".into()));
    }
    let profile = gamma_profile(&net)?;
    let request = PruneRequest {
        target_ratio: cfg.prune.target_ratio,
        tolerance: cfg.prune.tolerance,
        max_iterations: cfg.prune.max_iterations,
    };
    let outcome = bisect_threshold(&scores.scores, &request, &net, &profile)?;
    let gate_art = GateArtifact::new(
        &net,
        &outcome.gate,
        outcome.achieved_ratio,
        Some(scores.scores.clone()),
        "dipgo",
    );
    ctx.run
        .write_atomic(&ctx.run.gate_path(), gate_art.to_json().as_bytes())?;
    let record = PruneRecord::from(&outcome);
    ctx.run.write_atomic(
        &ctx.run.prune_record_path(),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    println!(
        "prune: target {:.3}, achieved {:.4} at theta {:.6} in {} iterations{}",
        outcome.target_ratio,
        outcome.achieved_ratio,
        outcome.theta,
        outcome.iterations,
        if outcome.best_achievable { " (best achievable)" } else { "" }
    );
    Ok(())
}

fn cmd_search(ctx: &Context, kind: BaselineKind) -> Result<()> {
    let cfg = &ctx.config;
    let (denoiser, schedule) = load_denoiser(ctx, "search-baseline")?;
    let net = build_supernet(&denoiser.spec, schedule.t_max)?;
    let profile = gamma_profile(&net)?;
    let (gate, ratio, source, log) = match kind {
        BaselineKind::Interval => {
            let gate = interval_gate(&net, cfg.search.interval, None)?;
            let ratio = net.pruning_ratio(&gate);
            (gate, ratio, "interval", Vec::new())
        }
        BaselineKind::Random | BaselineKind::Ga => {
            let seeds = stage_seeds(cfg.master_seed, TAG_CALIBRATION, cfg.search.calibration);
            let oracle = consistency_oracle(&net, &denoiser, &schedule, &seeds)?;
            let budget = SearchBudget::new(
                cfg.search.evaluations,
                seeds.clone(),
                cfg.search.target_ratio,
            );
            let (cand, log) = match kind {
                BaselineKind::Random => {
                    random_search(&net, &profile, &budget, &oracle, cfg.master_seed)?
                }
                _ => {
                    let params = GaParams {
                        population: cfg.search.population,
                        generations: cfg.search.generations,
                        tournament: cfg.search.tournament,
                        crossover_rate: cfg.search.crossover_rate,
                        mutation_rate: cfg.search.mutation_rate,
                        elitism: cfg.search.elitism,
                    };
                    ga_search(&net, &profile, &budget, &oracle, &params, cfg.master_seed)?
                }
            };
            let source = if kind == BaselineKind::Random { "random" } else { "ga" };
            (cand.gate, cand.achieved_ratio, source, log)
        }
    };
    let art = GateArtifact::new(&net, &gate, ratio, None, source);
    ctx.run
        .write_atomic(&ctx.run.gate_path(), art.to_json().as_bytes())?;
    if !log.is_empty() {
        ctx.run.write_search_log(&log)?;
    }
    println!(
        "search-baseline: {source} gate at ratio {ratio:.4} ({} evaluations)",
        log.len()
    );
    Ok(())
}

fn cmd_eval(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let (denoiser, schedule) = load_denoiser(ctx, "eval")?;
    ctx.run.require(&ctx.run.gate_path(), "eval", "prune")?;
    let net = build_supernet(&denoiser.spec, schedule.t_max)?;
    let art = GateArtifact::from_json(&fs::read_to_string(ctx.run.gate_path())?)?;
    let artifact_ratio = art.pruning_ratio;
    let gate = art.into_gate(&net)?;
    let seeds = stage_seeds(cfg.master_seed, TAG_EVAL, cfg.eval.seeds);
    let mut rows = Vec::with_capacity(seeds.len());
    let image = denoiser.spec.data.is_image();
    for &seed in &seeds {
        let full = sample(&denoiser, &schedule, seed, false)?;
        let pruned = run_subnet(&net, &gate, &denoiser, &schedule, seed, false)?;
        let v = match denoiser.spec.data {
            DataShape::Image { h, w } => ssim(
                &pruned.trace.x_out,
                &full.x_out,
                h,
                w,
                data_range(&full.x_out),
            ),
            DataShape::Vector { .. } => {
                -(pruned
                    .trace
                    .x_out
                    .iter()
                    .zip(&full.x_out)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / full.x_out.len() as f64)
            }
        };
        rows.push((seed, v));
    }
    let metric = if image { "ssim" } else { "neg_mse" };
    ctx.run.write_eval_csv(&rows, metric)?;
    let mean = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64;
    let report = macs_report(&net, &gate)?;
    // Cross-module consistency: keep_ratio must complement the artifact's
    // pruning ratio.
    let drift = (report.keep_ratio - (1.0 - artifact_ratio)).abs();
    if drift > 1e-9 {
        return Err(Error::Format(format!(
            "gate artifact ratio disagrees with the MACs report by {drift}"
        )));
    }
    println!(
        "eval: mean {metric} {mean:.4} over {} seeds; keep ratio {:.4}, speedup estimate {:.2}x",
        rows.len(),
        report.keep_ratio,
        report.speedup_estimate
    );
    Ok(())
}

fn cmd_plot(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let format: PlotFormat = cfg.plot.format.parse()?;
    let ext = format.extension();
    let (denoiser, schedule) = load_denoiser(ctx, "plot")?;
    let net = build_supernet(&denoiser.spec, schedule.t_max)?;
    let mut emitted = Vec::new();

    // Similarity heatmap from a handful of fresh seeds.
    let probe = default_probe_block(&denoiser);
    let seeds = stage_seeds(cfg.master_seed, TAG_EVAL ^ 0xff, 8);
    let sim = similarity_matrix(&denoiser, &schedule, probe, &seeds)?;
    let path = ctx.run.plot_path("similarity", ext);
    heatmap_plot(&path, &sim.values, -1.0, 1.0, format)?;
    emitted.push(path);

    // Gate heatmap when a gate exists.
    if ctx.run.gate_path().exists() {
        let art = GateArtifact::from_json(&fs::read_to_string(ctx.run.gate_path())?)?;
        let gate = art.into_gate(&net)?;
        let (rows, _) = gate_heatmap_data(&gate, &net)?;
        let float_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&g| g as f64).collect())
            .collect();
        let path = ctx.run.plot_path("gate", ext);
        heatmap_plot(&path, &float_rows, 0.0, 1.0, format)?;
        emitted.push(path);
    }

    // Loss curves when a training log exists.
    if ctx.run.train_log_path().exists() {
        let mut rdr = csv::Reader::from_path(ctx.run.train_log_path())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut consistency = Vec::new();
        let mut sparse = Vec::new();
        let mut keep = Vec::new();
        for record in rdr.records() {
            let r = record.map_err(|e| Error::Format(e.to_string()))?;
            let step: f64 = r[0].parse().map_err(|_| Error::Format("bad step".into()))?;
            consistency.push((step, r[1].parse().unwrap_or(f64::NAN)));
            sparse.push((step, r[2].parse().unwrap_or(f64::NAN)));
            keep.push((step, r[3].parse().unwrap_or(f64::NAN)));
        }
        let series = vec![
            Series { label: "consistency".into(), points: consistency },
            Series { label: "sparse".into(), points: sparse },
            Series { label: "keep ratio".into(), points: keep },
        ];
        let path = ctx.run.plot_path("losses", ext);
        line_plot(&path, &series, format)?;
        emitted.push(path);
    }
    println!(
        "plot: wrote {}",
        emitted
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}
