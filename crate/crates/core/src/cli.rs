//! Command-line entry point. Every command writes into one output directory
//! a `manifest.json`, a `VERSION` stamp and its result files; failures add an
//! `error.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bounds::{
    capped_cross_entropy, generalization_bound, network_bound_with, bound_constant, effective_retention,
    BoundContext, BoundReport, REPORT_LOSS_CAP,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    depth_csv, grid_search, grid_variants, oversmoothing_profile, robustness_csv, robustness_sweep, Variant,
};
use crate::gradsuite::run_suite;
use crate::graph::{build_propagation, generate_sbm, save_graph, PropagationMode, SbmConfig};
use crate::model::{predict, Task};
use crate::rademacher::{mc_rademacher, hypothesis_values, sample_norm_ball, HypothesisOutput};
use crate::train::train;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "FLEXGNN_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "flexgnn", version, about = "GCN training with trainable dropout retention")]
struct Cli {
    /// Output directory; defaults to $FLEXGNN_OUTPUT_ROOT/<command> or ./runs/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PropagationArg {
    Symmetric,
    RowStochastic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Node,
    Link,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Hidden layer widths, e.g. `256` or `64,64`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_enum)]
    propagation: Option<PropagationArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// `none`, `flexidrop[:λ]`, `fixed_dropout:<rate>`, `dropnode:<rate>` or `dropedge:<rate>`.
        #[arg(long)]
        strategy: Option<Variant>,
    },
    /// Accuracy grid over dropout rates (and λ for flexidrop).
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "none,fixed_dropout,flexidrop")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        lambdas: Vec<f64>,
    },
    /// Test accuracy and Dirichlet energy as depth grows.
    Oversmooth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        depths: Vec<usize>,
        /// Width of every hidden layer.
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, value_delimiter = ',', default_value = "none,flexidrop")]
        variants: Vec<Variant>,
    },
    /// Accuracy after injecting random edges.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "none,flexidrop")]
        variants: Vec<Variant>,
    },
    /// Bound constant from explicit sizes, or a full report for a checkpoint.
    Bound {
        #[arg(long = "L")]
        layers: Option<usize>,
        #[arg(long = "C")]
        classes: Option<usize>,
        #[arg(long = "d")]
        features: Option<usize>,
        #[arg(long = "N")]
        nodes: Option<usize>,
        #[arg(long = "xinf")]
        x_inf: Option<f64>,
        /// Checkpoint directory written by `train`; needs `--config` for the graph.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sign draws for the Monte-Carlo complexity estimate (0 disables it).
        #[arg(long, default_value_t = 0)]
        mc_draws: usize,
        #[arg(long, default_value_t = 64)]
        mc_hypotheses: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Finite-difference check of every differentiable op and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write a stochastic block model graph as edge list and CSV files.
    Sbm {
        #[arg(long, default_value_t = 200)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Grid { .. } => "grid",
            Command::Oversmooth { .. } => "oversmooth",
            Command::Attack { .. } => "attack",
            Command::Bound { .. } => "bound",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Sbm { .. } => "sbm",
        }
    }

    fn run_args(&self) -> Option<&RunArgs> {
        match self {
            Command::Train { run, .. }
            | Command::Grid { run, .. }
            | Command::Oversmooth { run, .. }
            | Command::Attack { run, .. } => Some(run),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct ExperimentManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_path: Option<&'a Path>,
    config: Option<&'a RunConfig>,
    output_dir: &'a Path,
    seeds: Vec<u64>,
    version: &'static str,
}

fn resolve_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = run.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(l) = run.lambda {
        cfg.train.lambda = l;
    }
    if let Some(s) = &run.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(h) = &run.hidden {
        cfg.model.hidden = h.clone();
    }
    if let Some(e) = run.eval_every {
        cfg.train.eval_every = e;
    }
    if let Some(p) = run.propagation {
        cfg.model.propagation = match p {
            PropagationArg::Symmetric => PropagationMode::Symmetric,
            PropagationArg::RowStochastic => PropagationMode::RowStochastic,
        };
    }
    if let Some(t) = run.task {
        cfg.model.task = match t {
            TaskArg::Node => Task::NodeClassification,
            TaskArg::Link => Task::LinkPrediction,
        };
    }
    if cfg.seeds.is_empty() {
        return Err(Error::validation("at least one seed is required"));
    }
    Ok(cfg)
}

fn config_base(run: &RunArgs) -> PathBuf {
    run.config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
    });
    let argv_text: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &out, argv_text) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if fs::create_dir_all(&out).is_ok() {
                let _ = write_json(&out.join("error.json"), &json!({ "command": name, "error": e.to_string() }));
            }
            EXIT_FAILURE
        }
    }
}

/// Returns `Ok(false)` for commands that ran but report a failed check.
fn execute(cmd: &Command, out: &Path, argv: Vec<String>) -> Result<bool> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg = cmd.run_args().map(resolve_config).transpose()?;
    let manifest = ExperimentManifest {
        command: cmd.name(),
        argv,
        config_path: cmd.run_args().and_then(|r| r.config.as_deref()),
        config: cfg.as_ref(),
        output_dir: out,
        seeds: cfg.as_ref().map(|c| c.seeds.clone()).unwrap_or_default(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write(&out.join("VERSION"), format!("flexgnn {}\n", env!("CARGO_PKG_VERSION")))?;

    match cmd {
        Command::Train { run, strategy } => {
            let mut cfg = cfg.expect("run command");
            if let Some(v) = strategy {
                cfg.model.strategy = v.strategy;
                if run.lambda.is_none() && v.strategy == crate::model::DropoutStrategy::Flexidrop {
                    cfg.train.lambda = v.lambda;
                }
            }
            cmd_train(&cfg, &config_base(run), out)
        }
        Command::Grid {
            run,
            strategies,
            rates,
            lambdas,
        } => {
            let cfg = cfg.expect("run command");
            let g = cfg.dataset.load(&config_base(run))?;
            let model = cfg.model.build(&g)?;
            let variants = grid_variants(strategies, rates, lambdas)?;
            let table = grid_search(&g, &model, &cfg.train, &variants, &cfg.seeds)?;
            write(&out.join("grid_summary.csv"), table.summary_csv())?;
            write(&out.join("grid_runs.csv"), table.runs_csv())?;
            let best = table.best_by_val("fixed_dropout").map(|r| r.variant.label());
            write_json(&out.join("summary.json"), &json!({ "rows": table.rows, "best_fixed_by_val": best }))?;
            println!("{} variants, {} runs written to {}", table.rows.len(), table.runs.len(), out.display());
            Ok(true)
        }
        Command::Oversmooth {
            run,
            depths,
            width,
            variants,
        } => {
            let cfg = cfg.expect("run command");
            let g = cfg.dataset.load(&config_base(run))?;
            let model = cfg.model.build(&g)?;
            let rows = oversmoothing_profile(&g, &model, *width, &cfg.train, depths, variants, &cfg.seeds)?;
            let csv = depth_csv(&rows);
            write(&out.join("oversmoothing.csv"), &csv)?;
            write_json(&out.join("summary.json"), &rows)?;
            println!("{} cells written to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::Attack {
            run,
            fractions,
            variants,
        } => {
            let cfg = cfg.expect("run command");
            let g = cfg.dataset.load(&config_base(run))?;
            let model = cfg.model.build(&g)?;
            let rows = robustness_sweep(&g, &model, &cfg.train, fractions, variants, &cfg.seeds)?;
            let csv = robustness_csv(&rows);
            write(&out.join("robustness.csv"), &csv)?;
            write_json(&out.join("summary.json"), &rows)?;
            println!("{} cells written to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::Bound {
            layers,
            classes,
            features,
            nodes,
            x_inf,
            checkpoint,
            config,
            mc_draws,
            mc_hypotheses,
            delta,
        } => match checkpoint {
            Some(dir) => {
                let path = config
                    .as_deref()
                    .ok_or_else(|| Error::validation("--checkpoint needs --config to rebuild the graph"))?;
                cmd_bound_checkpoint(dir, path, *mc_draws, *mc_hypotheses, *delta, out)
            }
            None => {
                let missing = |n: &str| Error::validation(format!("bound needs --{n} (or --checkpoint)"));
                let ctx = BoundContext::new(
                    layers.ok_or_else(|| missing("L"))?,
                    classes.ok_or_else(|| missing("C"))?,
                    features.ok_or_else(|| missing("d"))?,
                    nodes.ok_or_else(|| missing("N"))?,
                    x_inf.ok_or_else(|| missing("xinf"))?,
                    0.0,
                )?;
                let m = bound_constant(&ctx)?;
                write_json(&out.join("bound.json"), &json!({ "context": ctx, "M": m }))?;
                println!("M = {m}");
                Ok(true)
            }
        },
        Command::Gradcheck {
            instances,
            seed,
            step,
            tol,
        } => {
            let report = run_suite(*instances, *seed, *step, *tol)?;
            write_json(&out.join("gradcheck.json"), &report)?;
            for f in report.failures() {
                eprintln!("FAIL {} instance {}: {:?}", f.name, f.instance, f.report.params);
            }
            println!(
                "{} checks, max relative error {:.3e}, {}",
                report.cases.len(),
                report.max_rel_error(),
                if report.passed() { "all passed" } else { "FAILED" }
            );
            Ok(report.passed())
        }
        Command::Sbm {
            nodes,
            blocks,
            p_in,
            p_out,
            features,
            noise,
            seed,
        } => {
            let cfg = SbmConfig::new(*nodes, *blocks, *p_in, *p_out, *features, *noise, *seed);
            let g = generate_sbm(&cfg)?;
            save_graph(&g, out)?;
            write_json(&out.join("sbm.json"), &cfg)?;
            println!("{} nodes, {} edges written to {}", g.num_nodes(), g.num_edges(), out.display());
            Ok(true)
        }
    }
}

fn cmd_train(cfg: &RunConfig, base: &Path, out: &Path) -> Result<bool> {
    let g = cfg.dataset.load(base)?;
    let model = cfg.model.build(&g)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let tc = crate::train::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let outcome = match train(&g, &model, &tc) {
            Err(Error::Diverged { epoch, last_good }) => {
                save_checkpoint(&dir.join("last_good"), &last_good, model.strategy)?;
                return Err(Error::Diverged { epoch, last_good });
            }
            other => other?,
        };
        write(&dir.join("record.csv"), outcome.record.to_csv())?;
        save_checkpoint(&dir.join("checkpoint"), &outcome.params, model.strategy)?;
        let summary = json!({
            "seed": seed,
            "strategy": model.strategy,
            "lambda": tc.lambda,
            "final": outcome.record.final_metrics,
            "best_val": outcome.record.best_val,
            "wall_clock_secs": outcome.record.wall_clock_secs,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        if let Some(m) = outcome.record.final_metrics {
            println!(
                "seed {seed}: train {:.4} val {:.4} test {:.4}",
                m.train_acc, m.val_acc, m.test_acc
            );
        }
        summaries.push(summary);
    }
    write_json(&out.join("summary.json"), &summaries)?;
    Ok(true)
}

fn cmd_bound_checkpoint(
    dir: &Path,
    config: &Path,
    mc_draws: usize,
    mc_hypotheses: usize,
    delta: f64,
    out: &Path,
) -> Result<bool> {
    let cfg = RunConfig::from_file(config)?;
    let g = cfg.dataset.load(config.parent().unwrap_or(Path::new("")))?;
    let (params, strategy) = load_checkpoint(dir)?;
    let classes = params
        .layers
        .last()
        .map(|l| l.weight.cols())
        .ok_or_else(|| Error::validation("checkpoint has no layers"))?;
    let ctx = BoundContext::for_graph(&g, params.num_layers(), classes, cfg.train.lambda)?;
    let mode = cfg.model.propagation;
    let mut report = BoundReport::for_model(&ctx, &params, strategy, mode)?;
    let retention = effective_retention(&params, strategy);
    if mc_draws > 0 {
        let dims: Vec<usize> = std::iter::once(g.num_features())
            .chain(params.layers.iter().map(|l| l.weight.cols()))
            .collect();
        let hyps = sample_norm_ball(&dims, &report.weight_norms, &retention, mc_hypotheses, cfg.train.seed)?;
        let prop = build_propagation(&g, mode)?;
        let values = hypothesis_values(&g, &prop, &hyps, crate::model::DropoutStrategy::Flexidrop, HypothesisOutput::Loss)?;
        let est = mc_rademacher(&values, mc_draws, cfg.train.seed)?;
        report.mc_estimate = Some(est.estimate);
        report.mc_stderr = Some(est.stderr);
    }
    let prop = build_propagation(&g, mode)?;
    let logits = predict(&g, &prop, &params, strategy)?;
    let n_train = g.train_mask().iter().filter(|&&m| m).count();
    let empirical = capped_cross_entropy(logits.logits(), g.labels(), g.train_mask(), REPORT_LOSS_CAP)?;
    let rademacher = network_bound_with(&ctx, &params, &retention)?;
    let gen = generalization_bound(empirical, rademacher, REPORT_LOSS_CAP, delta, n_train)?;
    write_json(
        &out.join("bound.json"),
        &json!({
            "report": report,
            "empirical_capped_loss": empirical,
            "loss_cap": REPORT_LOSS_CAP,
            "delta": delta,
            "n_train": n_train,
            "generalization_bound": gen,
        }),
    )?;
    println!("M = {}  network bound = {}  generalization bound = {gen}", report.m, report.network_bound);
    Ok(true)
}
