//! `seacast` command-line entry point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use seacast::analysis::{
    ablation_markdown, ablation_run, cluster_matrices, crossover_bias, embedding_grid, minibatch_kmeans,
    reorder_clusters, write_cluster_map_csv, write_matrix_csv, CurriculumCache, KMeansConfig,
};
use seacast::forecast::{forecast, persistence_forecast, render_png, ForecastProduct};
use seacast::grid::{RegionSpec, Variable};
use seacast::metrics::{headline_leads, match_drifters, render_markdown, report, MetricsReport};
use seacast::net::{init_parameters, Checkpoint};
use seacast::ocean::read_drifters_csv;
use seacast::pipeline::{generate, open_inputs, read_generated, write_generated, Experiment, RunConfig, EVAL_DRIFTERS};
use seacast::train::{check_stage_order, write_loss_csv, Stage, TargetSource};
use seacast::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "seacast", version, about = "Desk-scale ocean surface current forecasting")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configuration output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the world and write every observation dataset.
    Generate,
    /// Train the requested curriculum stages.
    Train(TrainArgs),
    /// Issue a forecast from a checkpoint.
    Forecast(ForecastArgs),
    /// Score forecasts against drifters.
    Evaluate(EvaluateArgs),
    /// Embedding clusters, crossover statistics or the Stage-1 ablation.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Comma-separated stage numbers, e.g. `1,2,3` or `1,3`.
    #[arg(long, default_value = "1,2,3")]
    stages: String,
    /// Dataset directory (default `<output-dir>/data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to resume from when the first stage is not stage 1.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    issue_day: i64,
    /// Also write one PNG snapshot per lead.
    #[arg(long)]
    png: bool,
    /// Arrow spacing in the PNG snapshots, cells.
    #[arg(long, default_value_t = 4)]
    arrow_every: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Forecast product directories.
    #[arg(long)]
    product: Vec<PathBuf>,
    /// Add the persistence baseline for every product issue day.
    #[arg(long)]
    persistence: bool,
    /// Add the L4 analysis valid on each lead day as a reference.
    #[arg(long)]
    truth_analysis: bool,
    /// Issue day for the baselines when no product is given.
    #[arg(long)]
    issue_day: Option<i64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Drifter CSV (default: the held-out drifters of the dataset).
    #[arg(long)]
    drifters: Option<PathBuf>,
    /// Named region; whole grid when absent.
    #[arg(long)]
    region: Option<String>,
    /// Also print the markdown table to stdout.
    #[arg(long)]
    markdown: bool,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    Embeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        lat_step: f64,
        #[arg(long, default_value_t = 0.2)]
        lon_step: f64,
        /// Comma-separated week indices.
        #[arg(long, default_value = "0,13,26,39")]
        weeks: String,
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
    },
    Crossover {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds (default: the run seed).
        #[arg(long)]
        seeds: Option<String>,
    },
}

struct Ctx {
    config: Option<RunConfig>,
    seed: Option<u64>,
    output_dir: PathBuf,
    force: bool,
}

impl Ctx {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = self
            .config
            .clone()
            .ok_or_else(|| Error::config("this command needs --config"))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn data_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Creates `dir`, refusing a non-empty one unless `--force`.
    fn fresh_dir(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
            if non_empty && !self.force {
                return Err(Error::config(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            if non_empty {
                std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad {what} `{p}`")))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_generate(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config()?;
    let dir = ctx.data_dir(&None);
    ctx.fresh_dir(&dir)?;
    let data = generate(&cfg)?;
    write_generated(&data, &dir)?;
    write_text(&dir.join("run_config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    info!("wrote {}", dir.display());
    println!("{}", dir.display());
    Ok(())
}

fn stage_dir(root: &Path, stage: Stage) -> PathBuf {
    root.join("checkpoints").join(stage.label())
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let cfg = ctx.config()?;
    let stages: Vec<Stage> = parse_list::<u32>(&args.stages, "stage")?
        .into_iter()
        .map(Stage::from_number)
        .collect::<Result<_>>()?;
    check_stage_order(&stages)?;
    let data = read_generated(&ctx.data_dir(&args.data))?;
    let exp = Experiment::new(cfg.clone(), data)?;
    let init = if stages[0] == Stage::S1 {
        init_parameters(&cfg.model, cfg.seed)?
    } else {
        let prior = match &args.resume {
            Some(p) => p.clone(),
            None => [Stage::S1, Stage::S2]
                .into_iter()
                .filter(|&s| s < stages[0])
                .map(|s| stage_dir(&ctx.output_dir, s))
                .rev()
                .find(|d| d.join(seacast::net::MANIFEST_FILE).exists())
                .ok_or_else(|| {
                    Error::config(format!(
                        "{} needs a prior checkpoint; train an earlier stage first or pass --resume",
                        stages[0]
                    ))
                })?,
        };
        let ck = Checkpoint::load(&prior)?;
        if ck.config != cfg.model {
            return Err(Error::config(format!("{} was trained with a different model config", prior.display())));
        }
        ck.params
    };
    let stage_cfgs: Vec<_> = stages.iter().map(|&s| cfg.stage_config(s)).collect();
    for &s in &stages {
        ctx.fresh_dir(&stage_dir(&ctx.output_dir, s))?;
    }
    let results = exp.train_from(&init, &stage_cfgs, cfg.seed)?;
    for r in &results {
        let dir = stage_dir(&ctx.output_dir, r.stage);
        let ck = exp.checkpoint(r, cfg.seed);
        ck.save(&dir)?;
        write_loss_csv(&ctx.output_dir.join("checkpoints").join(format!("{}_loss.csv", r.stage)), &r.history)?;
        info!("{} checkpoint {}", r.stage, ck.content_hash());
        println!("{}", dir.display());
    }
    Ok(())
}

fn cmd_forecast(ctx: &Ctx, args: &ForecastArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let inputs = open_inputs(&ctx.data_dir(&args.data))?;
    let tile = ctx.config.as_ref().map(|c| c.tile.clone()).unwrap_or_default();
    let grid = seacast::forecast::InputSource::grid(&inputs)?;
    let plan = tile.plan(&grid, &RegionSpec::whole_grid(&grid), ck.config.patch_h, ck.config.patch_w)?;
    let product = forecast(&ck, &inputs, args.issue_day, &plan, tile.sigma(ck.config.patch_h, ck.config.patch_w))?;
    let dir = ctx.output_dir.join("forecasts").join(format!("issue_{}", args.issue_day));
    ctx.fresh_dir(&dir)?;
    product.save(&dir)?;
    if args.png {
        for lead in 1..=product.n_leads() {
            render_png(&product, lead, args.arrow_every, 4, &dir.join(format!("lead_{lead}.png")))?;
        }
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, args: &EvaluateArgs) -> Result<()> {
    let data_dir = ctx.data_dir(&args.data);
    let mut products: Vec<(String, ForecastProduct)> = Vec::new();
    for p in &args.product {
        let prod = ForecastProduct::load(p)?;
        let name = prod
            .config
            .get("stage")
            .and_then(|s| s.as_str())
            .map(|s| format!("{s} ({})", p.display()))
            .unwrap_or_else(|| p.display().to_string());
        products.push((name, prod));
    }
    let mut issue_days: Vec<i64> = products.iter().map(|p| p.1.issue_day).collect();
    issue_days.extend(args.issue_day);
    issue_days.sort_unstable();
    issue_days.dedup();
    let n_leads = products
        .iter()
        .map(|p| p.1.n_leads())
        .max()
        .or(ctx.config.as_ref().map(|c| c.model.t_out))
        .unwrap_or(1);
    if args.persistence || args.truth_analysis {
        if issue_days.is_empty() {
            return Err(Error::config("baselines need a product or --issue-day"));
        }
        let data = read_generated(&data_dir)?;
        let obs = &data.obs;
        let grid = obs.grid()?.clone();
        for &t in &issue_days {
            if args.persistence {
                let r = obs.analysis(TargetSource::L4Analog, t)?;
                let r = [r[0].clone(), r[1].clone(), r[2].clone()];
                products.push((
                    format!("Persistence (issue {t})"),
                    persistence_forecast(t, &r, &grid, obs.calendar, n_leads, "L4_ANALOG"),
                ));
            }
            if args.truth_analysis {
                let leads = (1..=n_leads as i64)
                    .map(|l| obs.analysis(TargetSource::L4Analog, t + l).cloned())
                    .collect::<Result<Vec<_>>>()?;
                products.push((
                    format!("L4 analysis (issue {t})"),
                    ForecastProduct {
                        issue_day: t,
                        grid: grid.clone(),
                        calendar: obs.calendar,
                        leads,
                        checkpoint_hash: "analysis:L4_ANALOG".into(),
                        config: serde_json::Value::Null,
                    },
                ));
            }
        }
    }
    if products.is_empty() {
        return Err(Error::config("nothing to evaluate; pass --product, --persistence or --truth-analysis"));
    }
    let drifter_path = args.drifters.clone().unwrap_or_else(|| data_dir.join(EVAL_DRIFTERS));
    let tracks = read_drifters_csv(&drifter_path, &products[0].1.calendar)?;
    let region = match &args.region {
        Some(name) => Some(seacast::grid::region(name)?),
        None => None,
    };
    let region_name = region.as_ref().map_or("Domain".to_string(), |r| r.name.clone());
    let interp = ctx.config.as_ref().map(|c| c.evaluation.interpolation).unwrap_or_default();
    let rows: Vec<(String, MetricsReport)> = products
        .iter()
        .map(|(name, p)| {
            let pairs = match_drifters(p, &tracks, region.as_ref(), interp);
            (name.clone(), report(&pairs, p.n_leads(), &region_name, &p.checkpoint_hash))
        })
        .collect();
    let dir = ctx.output_dir.join("reports");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json: BTreeMap<&str, &MetricsReport> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&json)?)?;
    let md = render_markdown(&rows, &headline_leads(n_leads));
    write_text(&dir.join("metrics.md"), &md)?;
    if args.markdown {
        print!("{md}");
    } else {
        println!("{}", dir.join("metrics.json").display());
    }
    Ok(())
}

fn cmd_analyze(ctx: &Ctx, what: &AnalyzeCommand) -> Result<()> {
    let out = ctx.output_dir.join("analysis");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match what {
        AnalyzeCommand::Embeddings {
            checkpoint,
            data,
            lat_step,
            lon_step,
            weeks,
            k,
            batch_size,
            max_iters,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let inputs = open_inputs(&ctx.data_dir(data))?;
            let grid = seacast::forecast::InputSource::grid(&inputs)?;
            let land = seacast::forecast::InputSource::land(&inputs)?;
            let weeks: Vec<u32> = parse_list(weeks, "week")?;
            let eg = embedding_grid(&ck.params, &RegionSpec::whole_grid(&grid), *lat_step, *lon_step, &weeks, Some((&grid, &land)))?;
            let km = minibatch_kmeans(
                &eg.vectors,
                &KMeansConfig {
                    k: *k,
                    batch_size: *batch_size,
                    max_iters: *max_iters,
                    seed: ctx.seed.or(ctx.config.as_ref().map(|c| c.seed)).unwrap_or(0),
                    ..Default::default()
                },
            )?;
            let (centroids, labels, _) = reorder_clusters(&km.centroids, &km.assignments, &eg.points);
            let (corr, dist, _) = cluster_matrices(&centroids)?;
            write_cluster_map_csv(&out.join("cluster_map.csv"), &eg.points, &labels)?;
            write_matrix_csv(&out.join("cluster_correlation.csv"), &corr)?;
            write_matrix_csv(&out.join("cluster_distance.csv"), &dist)?;
            println!("{}", out.display());
        }
        AnalyzeCommand::Crossover { data } => {
            let dir = ctx.data_dir(data);
            let open = |name: &str| seacast::dataset::Dataset::open(dir.join(name));
            let swot = open("swot")?.read_all(Variable::Ssh)?;
            let nadir = open("nadir")?.read_all(Variable::Ssh)?;
            let stats = crossover_bias(&swot, &nadir)?;
            write_text(&out.join("crossover.json"), &serde_json::to_string_pretty(&stats)?)?;
            let md = format!(
                "| n | mean bias (m) | std (m) |\n|---|---|---|\n| {} | {:.4} | {:.4} |\n",
                stats.n_points, stats.mean_bias, stats.std
            );
            write_text(&out.join("crossover.md"), &md)?;
            print!("{md}");
        }
        AnalyzeCommand::Ablate { data, seeds } => {
            let cfg = ctx.config()?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => parse_list(s, "seed")?,
                None => vec![cfg.seed],
            };
            let exp = Experiment::new(cfg.clone(), read_generated(&ctx.data_dir(data))?)?;
            let mut cache = CurriculumCache::new();
            let rows = ablation_run(&exp, &[TargetSource::L4Analog, TargetSource::NeurostAnalog], &seeds, &mut cache)?;
            write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
            let md = ablation_markdown(&rows, &headline_leads(cfg.model.t_out));
            write_text(&out.join("ablation.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let output_dir = cli
        .output_dir
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("seacast_out"));
    let ctx = Ctx {
        config,
        seed: cli.seed,
        output_dir,
        force: cli.force,
    };
    match &cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Forecast(a) => cmd_forecast(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Analyze { what } => cmd_analyze(&ctx, what),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("config", e.to_string().trim(), 2),
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
