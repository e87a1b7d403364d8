mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dflow_core::datagen::{count_modes, grid_histogram, potts_exact, Dataset, FullRankSpec, PottsSpec};
use dflow_core::flows::FlowLayer;
use dflow_core::model::{bits_per_char, train, ContextBatch, DiscreteFlowModel, PassReport};
use dflow_core::oracle::{enumerate_model, enumeration_size};
use dflow_core::FlowError;
use serde_json::json;

use config::{config_err, ConfigError, RunConfig, Task};

#[derive(Parser)]
#[command(name = "dflow", version, about = "Train, sample, and verify discrete normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Clone)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config; writes model.dflw, metrics.csv and config.json.
    Train,
    /// Mean NLL and bits per symbol of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw samples; writes samples.txt in the dataset format.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// Dataset supplying conditioning contexts for conditional models.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write grid.csv and grid.pgm (two-position models only).
        #[arg(long)]
        grid: bool,
    },
    /// Exhaustive normalization and bijectivity check.
    Oracle {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Force flow layer 0 to this scale, bypassing the coprimality mask.
        #[arg(long, hide = true)]
        inject_fault: Option<usize>,
    },
    /// Conditioner pass counts and wall time for sampling.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Generate train.txt and eval.txt from a config.
    GenData,
}

/// Oracle ran but a check failed.
#[derive(Debug)]
struct ChecksFailed;

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("oracle checks failed")
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<ChecksFailed>() {
            return 4;
        }
        if let Some(f) = cause.downcast_ref::<FlowError>() {
            return match f {
                FlowError::InvalidConfig(_)
                | FlowError::ManifestMismatch(_)
                | FlowError::VersionMismatch { .. }
                | FlowError::MalformedDataset(_) => 1,
                FlowError::TooLarge { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<ChecksFailed>() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("DFLOW_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Train => cmd_train(&g),
        Command::GenData => cmd_gen_data(&g),
        Command::Eval { checkpoint, data } => cmd_eval(&g, &checkpoint, &data),
        Command::Sample { checkpoint, n, data, grid } => cmd_sample(&g, &checkpoint, n, data.as_deref(), grid),
        Command::Oracle { checkpoint, inject_fault } => cmd_oracle(&g, &checkpoint, inject_fault),
        Command::Bench { checkpoint, n } => cmd_bench(&g, &checkpoint, n),
    }
}

/// Loads the config, applies flag overrides, and validates it.
fn resolved_config(g: &Global) -> Result<RunConfig> {
    let path = g.config.as_ref().ok_or_else(|| config_err("this command needs --config PATH"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    cfg.resolve_optimizer_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(FlowError::from).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(FlowError::from).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<DiscreteFlowModel> {
    DiscreteFlowModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::FullRank => "full_rank",
        Task::Mog => "mog",
        Task::Addition => "addition",
        Task::Potts => "potts",
        Task::CharLm => "char_lm",
    }
}

fn cmd_train(g: &Global) -> Result<()> {
    let cfg = resolved_config(g)?;
    let (train_data, eval_data) = cfg.datasets()?;
    let mut model = DiscreteFlowModel::new(cfg.model.clone(), cfg.seed)?;
    model.set_task(task_name(cfg.task));
    model.check_dataset(&train_data)?;
    if let Some(e) = &eval_data {
        model.check_dataset(e)?;
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), cfg.to_json())?;
    let report = train(&mut model, &train_data, eval_data.as_ref(), &cfg.optimizer)?;
    model.save(cfg.out.join("model.dflw"))?;
    write_file(&cfg.out.join("metrics.csv"), report.to_csv())?;

    let d = cfg.model.d;
    match g.format {
        Format::Json => println!(
            "{}",
            json!({
                "out": cfg.out,
                "steps": cfg.optimizer.steps,
                "final_train_nll": report.final_train_nll,
                "final_eval_nll": report.final_eval_nll,
                "final_eval_bpc": report.final_eval_nll.map(|v| bits_per_char(v, d)),
            })
        ),
        Format::Text => {
            print!("trained {} steps: train nll {:.4}", cfg.optimizer.steps, report.final_train_nll);
            if let Some(e) = report.final_eval_nll {
                print!(", eval nll {e:.4} ({:.4} bpc)", bits_per_char(e, d));
            }
            println!("\nartifacts in {}", cfg.out.display());
        }
    }
    Ok(())
}

fn cmd_gen_data(g: &Global) -> Result<()> {
    let cfg = resolved_config(g)?;
    let (train_data, eval_data) = cfg.datasets()?;
    create_dir(&cfg.out)?;
    train_data.write(cfg.out.join("train.txt"))?;
    if let Some(e) = &eval_data {
        e.write(cfg.out.join("eval.txt"))?;
    }
    if g.format == Format::Text {
        println!(
            "wrote {} training and {} evaluation sequences to {}",
            train_data.len(),
            eval_data.as_ref().map_or(0, Dataset::len),
            cfg.out.display()
        );
    }
    Ok(())
}

fn cmd_eval(g: &Global, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let data = Dataset::read(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let nll = model.dataset_nll(&data)?;
    let n = nll.len() as f64;
    let mean = nll.iter().sum::<f64>() / n;
    let se = if nll.len() > 1 {
        (nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    let d = model.d();
    match g.format {
        Format::Json => println!(
            "{}",
            json!({
                "sequences": nll.len(),
                "nll": mean,
                "nll_se": se,
                "bpc": bits_per_char(mean, d),
                "bpc_se": bits_per_char(se, d),
            })
        ),
        Format::Text => println!(
            "nll {mean:.6} ± {se:.6} nats over {} sequences\nbpc {:.4} ± {:.4}",
            nll.len(),
            bits_per_char(mean, d),
            bits_per_char(se, d)
        ),
    }
    Ok(())
}

/// Contexts for `n` samples: the first `n` rows of `data`.
fn sample_contexts(model: &DiscreteFlowModel, n: usize, data: Option<&Path>) -> Result<Option<Vec<usize>>> {
    let Some(spec) = model.config().context else {
        return Ok(None);
    };
    let path = data.ok_or_else(|| config_err("this model is conditional; pass --data with context rows"))?;
    let ds = Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let ctx = ds
        .context
        .as_ref()
        .filter(|c| ds.context_spec() == Some(spec) && !c.symbols.is_empty())
        .ok_or_else(|| config_err(format!("{} has no contexts matching {spec:?}", path.display())))?;
    if ds.len() < n {
        return Err(config_err(format!("--n {n} exceeds the {} context rows in {}", ds.len(), path.display())));
    }
    Ok(Some(ctx.symbols[..n * spec.len].to_vec()))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(config_err("--n must be at least 1"));
    }
    Ok(())
}

fn cmd_sample(g: &Global, checkpoint: &Path, n: usize, data: Option<&Path>, grid: bool) -> Result<()> {
    check_n(n)?;
    let model = load_model(checkpoint)?;
    let (d, k) = (model.d(), model.k());
    if grid && d != 2 {
        return Err(config_err(format!("--grid needs a two-position model, this one has D={d}")));
    }
    let seed = g.seed.unwrap_or(0);
    let ctx = sample_contexts(&model, n, data)?;
    let batch = ctx.as_deref().zip(model.config().context).map(|(symbols, spec)| ContextBatch { symbols, spec });
    let (seqs, passes) = model.sample(n, seed, batch)?;
    let task = Some(model.meta().task.as_str()).filter(|t| !t.is_empty()).unwrap_or("samples");
    let mut samples = Dataset::new(d, k, task, seqs)?;
    if let (Some(symbols), Some(spec)) = (ctx, model.config().context) {
        samples = samples.with_context(spec, symbols)?;
    }
    let dir = out_dir(g);
    create_dir(&dir)?;
    samples.write(dir.join("samples.txt"))?;
    let modes = if grid {
        let hist = grid_histogram(&samples);
        write_file(&dir.join("grid.csv"), grid_csv(&hist, k))?;
        write_file(&dir.join("grid.pgm"), grid_pgm(&hist, k))?;
        Some(count_modes(&hist, k, k))
    } else {
        None
    };
    match g.format {
        Format::Json => println!(
            "{}",
            json!({"samples": n, "seed": seed, "passes": passes, "modes": modes, "out": dir})
        ),
        Format::Text => {
            println!("wrote {n} samples to {}", dir.join("samples.txt").display());
            println!(
                "conditioner passes: {} flow + {} base = {}",
                passes.flow_passes,
                passes.base_passes,
                passes.total()
            );
            if let Some(m) = modes {
                println!("grid: {m} modes");
            }
        }
    }
    Ok(())
}

/// Count matrix, one line per first-position symbol.
fn grid_csv(hist: &[f64], k: usize) -> String {
    let mut out = String::new();
    for row in hist.chunks(k) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Plain PGM with each row scaled to its own maximum.
fn grid_pgm(hist: &[f64], k: usize) -> String {
    let mut out = format!("P2\n{k} {k}\n255\n");
    for row in hist.chunks(k) {
        let max = row.iter().cloned().fold(0.0, f64::max);
        let line: Vec<String> = row
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u32 } else { 0 }.to_string())
            .collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    out
}

/// Reference table for the checkpoint's task when the config pins one down.
fn true_table(g: &Global, model: &DiscreteFlowModel) -> Result<Option<Vec<f64>>> {
    if g.config.is_none() {
        return Ok(None);
    }
    let cfg = resolved_config(g)?;
    if cfg.model != *model.config() {
        return Err(config_err("--config describes a different model than the checkpoint"));
    }
    Ok(match cfg.task {
        Task::FullRank => {
            Some(FullRankSpec::new(cfg.model.d, cfg.model.k, cfg.data.table_seed.unwrap_or(cfg.seed))?.probabilities)
        }
        Task::Potts => {
            let spec = PottsSpec {
                rows: cfg.data.rows.unwrap_or(0),
                cols: cfg.data.cols.unwrap_or(0),
                states: cfg.model.k,
                j: cfg.data.j.unwrap_or(0.0),
                sweeps: cfg.data.sweeps,
                seed: 0,
            };
            Some(potts_exact(&spec)?.probabilities)
        }
        _ => None,
    })
}

fn cmd_oracle(g: &Global, checkpoint: &Path, inject_fault: Option<usize>) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    enumeration_size(model.d(), model.k())?;
    if let Some(s) = inject_fault {
        match model.stack_mut().layers_mut().first_mut() {
            Some(FlowLayer::Autoregressive(l)) => l.inject_fault_scale(s),
            _ => return Err(config_err("--inject-fault needs an autoregressive flow layer 0")),
        }
    }
    let table = true_table(g, &model)?;
    let report = enumerate_model(&model, table.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        Ok(())
    } else {
        Err(ChecksFailed.into())
    }
}

fn cmd_bench(g: &Global, checkpoint: &Path, n: usize) -> Result<()> {
    check_n(n)?;
    let model = load_model(checkpoint)?;
    if model.config().context.is_some() {
        return Err(config_err("bench does not support conditional models"));
    }
    let seed = g.seed.unwrap_or(0);
    let start = Instant::now();
    let (_, passes): (_, PassReport) = model.sample(n, seed, None)?;
    let wall = start.elapsed();
    let cfg = model.config();
    match g.format {
        Format::Json => println!(
            "{}",
            json!({
                "sequences": n,
                "d": cfg.d,
                "flow_layers": cfg.flow_count,
                "flow_passes_per_sequence": passes.flow_passes,
                "base_passes_per_sequence": passes.base_passes,
                "passes_per_sequence": passes.total(),
                "wall_ms": wall.as_secs_f64() * 1e3,
            })
        ),
        Format::Text => {
            println!("sampled {n} sequences of length {} in {:.1} ms", cfg.d, wall.as_secs_f64() * 1e3);
            println!(
                "passes per sequence: {} flow + {} base = {}",
                passes.flow_passes,
                passes.base_passes,
                passes.total()
            );
        }
    }
    Ok(())
}
