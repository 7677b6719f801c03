//! `dymacl`: train curricula, evaluate checkpoints, analyse embeddings and
//! run the self-check suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dymacl::analysis::{self, Metric};
use dymacl::curriculum::{self, CurriculumSpec, Metrics, TaskSpec};
use dymacl::learners::OpponentMode;
use dymacl::transfer::TransferKind;
use dymacl::verify::{self, Suite, VerifyOptions};
use dymacl::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "dymacl", version, about = "Multiagent curriculum learning with DyAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a curriculum and write summary, curves and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on one battle task.
    Eval(EvalArgs),
    /// Measure how well DyAN embeddings separate visible-teammate counts.
    Analyze(AnalyzeArgs),
    /// Run gradient, permutation, loss-oracle and environment checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: desk or magent.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the transfer mechanism: none, reuse, distill or reload.
    #[arg(long)]
    transfer: Option<TransferKind>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Battle size such as 5v5.
    #[arg(long, value_parser = parse_task)]
    task: (usize, usize),
    /// Number of greedy episodes (at least 1).
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// scripted, self-play or stationary.
    #[arg(long, default_value = "scripted")]
    opponent: OpponentMode,
    /// CSV output; defaults to `<checkpoint>.eval.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated team sizes; each scenario is an n-vs-n battle.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    scenarios: Vec<usize>,
    /// Output directory for report.json and embeddings.csv.
    #[arg(long)]
    out: PathBuf,
    /// Embedding samples per scenario.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(2..))]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// euclidean or cosine.
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Seeds for the gradient and oracle suites.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Run only these suites (comma-separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<Suite>,
    /// Deliberately break one suite to confirm the harness notices.
    #[arg(long, hide = true)]
    inject_fault: Option<Suite>,
}

fn parse_task(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['v', 'V'])
        .ok_or_else(|| format!("expected a size like 5v5, got {s:?}"))?;
    let n = |x: &str| {
        x.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("bad team size {x:?} in {s:?}"))
    };
    Ok((n(a)?, n(b)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => return run_verify(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_spec(args: &TrainArgs) -> Result<CurriculumSpec> {
    match (&args.config, &args.preset) {
        (Some(path), _) => curriculum::parse_spec(path),
        (None, Some(name)) => CurriculumSpec::from_toml(curriculum::preset(name)?),
        (None, None) => Err(Error::Config("pass --config or --preset".into())),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut spec = load_spec(&args)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(kind) = args.transfer {
        spec.transfer.kind = kind;
    }
    spec.validate()?;
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "training {} task(s), {} env steps, transfer {}",
        spec.tasks.len(),
        spec.total_budget(),
        spec.transfer.kind
    );
    let report = curriculum::run_with_progress(&spec, &args.out, &mut |t| {
        eprintln!(
            "task {} ({}): {} steps, {} episodes, win rate {:.3}, kills {:.2}",
            t.index, t.label, t.steps, t.episodes, t.metrics.win_rate, t.metrics.mean_kill_count
        );
    })?;
    println!(
        "wrote {} ({:.1}s)",
        args.out.join("summary.json").display(),
        report.wall_clock_secs
    );
    Ok(())
}

fn metrics_csv(label: &str, m: &Metrics) -> String {
    format!(
        "task,episodes,win_rate,win_rate_se,draw_rate,mean_survivors,survivors_se,\
         mean_kill_count,kill_count_se,mean_episode_reward,episode_reward_se,mean_episode_length\n\
         {label},{},{},{},{},{},{},{},{},{},{},{}\n",
        m.episodes,
        m.win_rate,
        m.win_rate_se,
        m.draw_rate,
        m.mean_survivors,
        m.survivors_se,
        m.mean_kill_count,
        m.kill_count_se,
        m.mean_episode_reward,
        m.episode_reward_se,
        m.mean_episode_length
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn eval(args: EvalArgs) -> Result<()> {
    let (a, b) = args.task;
    let task = TaskSpec::new(a, b, 1);
    let m = curriculum::evaluate_checkpoint(
        &args.checkpoint,
        &task.world(),
        args.episodes as usize,
        args.seed,
        args.opponent,
    )?;
    println!("task       {}", task.label());
    println!("episodes   {}", m.episodes);
    println!("win_rate   {:.4} ± {:.4}", m.win_rate, m.win_rate_se);
    println!("survivors  {:.3} ± {:.3}", m.mean_survivors, m.survivors_se);
    println!("kills      {:.3} ± {:.3}", m.mean_kill_count, m.kill_count_se);
    println!("reward     {:.3} ± {:.3}", m.mean_episode_reward, m.episode_reward_se);
    let csv = args.csv.unwrap_or_else(|| {
        let mut p = args.checkpoint.clone().into_os_string();
        p.push(".eval.csv");
        PathBuf::from(p)
    });
    write_file(&csv, &metrics_csv(&task.label(), &m))?;
    eprintln!("wrote {}", csv.display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let (params, _) = dymacl::dyan::load(&args.checkpoint)?;
    let r = analysis::analyze(
        &params,
        &args.scenarios,
        args.samples as usize,
        args.seed,
        args.metric,
        &args.out,
    )?;
    println!("metric  {:?}", r.metric);
    println!("intra   {:.6}", r.intra);
    println!("inter   {:.6}", r.inter);
    println!("ratio   {:.6}{}", r.ratio, if r.degenerate { " (degenerate)" } else { "" });
    eprintln!("wrote {}", args.out.join("report.json").display());
    Ok(())
}

fn run_verify(args: VerifyArgs) -> ExitCode {
    let options = VerifyOptions {
        seeds: args.seeds,
        inject_fault: args.inject_fault,
        ..VerifyOptions::default()
    };
    let suites = if args.only.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.only
    };
    println!("{:<14} {:>6} {:>8} {:>10} {:>8}", "suite", "result", "checks", "worst", "seconds");
    let mut ok = true;
    for suite in suites {
        match verify::run_suite(suite, &options) {
            Ok(r) => {
                println!(
                    "{:<14} {:>6} {:>8} {:>10.3e} {:>8.2}",
                    suite.name(),
                    if r.passed { "pass" } else { "FAIL" },
                    r.checks,
                    r.worst,
                    r.seconds
                );
                if !r.passed {
                    ok = false;
                    eprintln!("  {}: {} failure(s); first: {}", suite.name(), r.failures, r.detail);
                }
            }
            Err(e) => {
                ok = false;
                println!("{:<14} {:>6}", suite.name(), "ERROR");
                eprintln!("  {}: {e}", suite.name());
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    }
}
