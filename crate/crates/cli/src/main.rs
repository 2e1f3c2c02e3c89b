use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use laq_core::experiment::{export_queries, latency_csv, load_traces, run_latency, toy_prompt, AblationAxes};
use laq_core::trace::record_model_trace;
use laq_core::{
    gen_synthetic_trace, init_model, run_ablation, run_experiment, window_recall_sweep, write_trace, ExperimentConfig,
    ExperimentMode, PolicyId, ScoreMode, SynthParams,
};

#[derive(Parser, Debug)]
#[command(name = "laq", version, about = "KV-cache eviction lab")]
struct Cli {
    /// Experiment config (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Policies to run; repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    policy: Vec<PolicyId>,
    /// KV budgets; repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    budget: Vec<usize>,
    /// Lookahead steps. Lists are swept by `ablate` and `latency`; other
    /// commands use the first value.
    #[arg(long, global = true, value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, global = true)]
    mode: Option<ScoreMode>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Run the toy model instead of replaying traces.
    #[arg(long, global = true)]
    toy: bool,
    /// Trace files to replay; repeatable.
    #[arg(long = "trace", global = true)]
    traces: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TraceSource {
    Synthetic,
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write trace files (synthetic divergence traces or toy-model runs).
    GenTrace {
        #[arg(long, value_enum, default_value_t = TraceSource::Synthetic)]
        source: TraceSource,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Policy × budget sweep; writes results.json and cells.csv.
    Run,
    /// Recall of a sliding query window across input and response.
    RecallSweep {
        #[arg(long, default_value_t = 8)]
        window: usize,
    },
    /// Q-cache length (and, for the toy model, quality) ablation.
    Ablate {
        /// Policies producing the lookahead view (toy model only).
        #[arg(long, value_delimiter = ',')]
        lookahead_policy: Vec<PolicyId>,
        /// Budgets of the lookahead view (toy model only).
        #[arg(long, value_delimiter = ',')]
        lookahead_budget: Vec<usize>,
    },
    /// Per-stage wall-clock breakdown on the toy model.
    Latency {
        /// Decode lengths to time.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64])]
        decode: Vec<usize>,
    },
    /// Dump window, Q-cache and response queries of the first subject.
    ExportQueries,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            match p.extension().and_then(|e| e.to_str()) {
                Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?,
                Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?,
                _ => bail!("config must end in .toml or .json: {}", p.display()),
            }
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !cli.policy.is_empty() {
        cfg.policies = cli.policy.clone();
    }
    if !cli.budget.is_empty() {
        cfg.budgets = cli.budget.clone();
    }
    if let Some(&s) = cli.steps.first() {
        cfg.policy.lookahead_steps = s;
    }
    if let Some(m) = cli.mode {
        cfg.policy.score_mode = m;
    }
    if cli.toy {
        cfg.mode = ExperimentMode::ToyModel;
    }
    if !cli.traces.is_empty() {
        cfg.traces = cli.traces.clone();
        if cli.config.is_none() {
            cfg.synthetic_count = 0;
        }
    }
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn ext(format: Format) -> &'static str {
    match format {
        Format::Json => "json",
        Format::Csv => "csv",
    }
}

fn gen_trace(cli: &Cli, cfg: &ExperimentConfig, source: TraceSource, count: usize) -> Result<bool> {
    fs::create_dir_all(&cli.out)?;
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let (bundle, name) = match source {
            TraceSource::Synthetic => {
                let p = SynthParams { seed, ..cfg.synthetic.clone() };
                (gen_synthetic_trace(&p)?, format!("synthetic_{seed}.kvtr"))
            }
            TraceSource::Toy => {
                let model = init_model(&cfg.model)?;
                let prompt = toy_prompt(cfg.model.vocab, cfg.prompt_len, seed);
                (record_model_trace(&model, &prompt, cfg.response_len)?, format!("toy_{seed}.kvtr"))
            }
        };
        let path = cli.out.join(name);
        write_trace(&bundle, &path)?;
        println!("{}", path.display());
    }
    Ok(true)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<bool> {
    let rec = run_experiment(cfg)?;
    rec.write(&cli.out)?;
    match cli.format {
        Format::Json => println!("{}", rec.to_json()?),
        Format::Csv => print!("{}", rec.cells_csv()?),
    }
    let failed = rec.cells.iter().filter(|c| !c.is_ok()).count();
    log::info!("{} cells, {failed} failed; results in {}", rec.cells.len(), cli.out.display());
    Ok(failed == 0)
}

fn recall_sweep(cli: &Cli, cfg: &ExperimentConfig, window: usize) -> Result<bool> {
    if cfg.mode == ExperimentMode::ToyModel {
        bail!("recall-sweep replays traces; record toy runs with `gen-trace --source toy` first");
    }
    cfg.validate()?;
    let budget = cfg.budgets[0];
    for (label, trace) in load_traces(cfg)? {
        let curve = window_recall_sweep(&trace, window, budget, cfg.policy.score_mode)?;
        let body = match cli.format {
            Format::Json => serde_json::to_string_pretty(&curve)?,
            Format::Csv => curve.to_csv()?,
        };
        let stem: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let p = write_out(&cli.out, &format!("sweep_{stem}.{}", ext(cli.format)), &body)?;
        let first = curve.at(0).map_or(f64::NAN, |p| p.mean_recall);
        println!("{label}: recall at first generated token {first:.3} -> {}", p.display());
    }
    Ok(true)
}

fn ablate(cli: &Cli, cfg: &ExperimentConfig, la_policies: &[PolicyId], la_budgets: &[usize]) -> Result<bool> {
    let mut axes = AblationAxes::default();
    if !cli.steps.is_empty() {
        axes.steps = cli.steps.clone();
    }
    if !la_policies.is_empty() {
        axes.lookahead_policies = la_policies.to_vec();
    }
    axes.lookahead_budgets = la_budgets.to_vec();
    let mut cfg = cfg.clone();
    if cli.policy.is_empty() && cli.config.is_none() {
        cfg.policies = vec![PolicyId::Laq, PolicyId::LaqPp];
    }
    let rep = run_ablation(&cfg, &axes)?;
    let body = match cli.format {
        Format::Json => serde_json::to_string_pretty(&rep)?,
        Format::Csv => rep.to_csv()?,
    };
    let p = write_out(&cli.out, &format!("ablation.{}", ext(cli.format)), &body)?;
    for &policy in &cfg.policies {
        for &b in &cfg.budgets {
            let curve: Vec<String> = axes
                .steps
                .iter()
                .map(|&s| rep.mean_recall(policy, b, s).map_or("n/a".into(), |r| format!("S={s}:{r:.3}")))
                .collect();
            println!("{policy} B={b} {}", curve.join(" "));
        }
    }
    println!("-> {}", p.display());
    Ok(rep.all_ok())
}

fn latency(cli: &Cli, cfg: &ExperimentConfig, decode: &[usize]) -> Result<bool> {
    let steps = if cli.steps.is_empty() { vec![2, 8] } else { cli.steps.clone() };
    let rows = run_latency(cfg, &steps, decode)?;
    let body = match cli.format {
        Format::Json => serde_json::to_string_pretty(&rows)?,
        Format::Csv => latency_csv(&rows)?,
    };
    let p = write_out(&cli.out, &format!("latency.{}", ext(cli.format)), &body)?;
    for r in &rows {
        println!(
            "{} B={} S={} decode={} total={:.4}s lookahead={:.1}%",
            r.policy,
            r.budget,
            r.lookahead_steps,
            r.decode_steps,
            r.report.total_seconds,
            100.0 * r.report.lookahead_fraction
        );
    }
    println!("-> {}", p.display());
    Ok(true)
}

fn export(cli: &Cli, cfg: &ExperimentConfig) -> Result<bool> {
    let ex = export_queries(cfg)?;
    let body = match cli.format {
        Format::Json => serde_json::to_string(&ex)?,
        Format::Csv => ex.to_csv()?,
    };
    let p = write_out(&cli.out, &format!("queries.{}", ext(cli.format)), &body)?;
    println!("{} query rows from {} -> {}", ex.rows.len(), ex.subject, p.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| match &cli.command {
        Command::GenTrace { source, count } => gen_trace(&cli, &cfg, *source, *count),
        Command::Run => run(&cli, &cfg),
        Command::RecallSweep { window } => recall_sweep(&cli, &cfg, *window),
        Command::Ablate { lookahead_policy, lookahead_budget } => ablate(&cli, &cfg, lookahead_policy, lookahead_budget),
        Command::Latency { decode } => latency(&cli, &cfg, decode),
        Command::ExportQueries => export(&cli, &cfg),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some cells failed; see the output for reasons");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
