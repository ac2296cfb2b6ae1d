use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use fedrec_core::config::{ExperimentConfig, SweepGrid};
use fedrec_core::experiment::{
    self, build_report, evaluate, load_run_checkpoint, load_run_deltas, prepare, write_atomically, write_report,
    write_run, ExperimentReport, RunOutput,
};
use fedrec_core::selftest;
use fedrec_core::{Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "fedrec", version, about = "Federated recommendation with adaptive LDP and attribute-inference attacks")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for client training and attacks; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train; writes checkpoint, delta archive, training log and Hit@K.
    Train(Common),
    /// Train, evaluate and attack in one pass.
    Run(Common),
    /// Attack the delta archive of a finished training run.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recompute Hit@K from a training run's checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One full run per cell of a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid file with `[[axis]]` tables of `key` and `values`.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Gradient, noise and budget checks plus a synthetic smoke run.
    Selftest,
}

fn workers(common: &Common) -> usize {
    common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn print_summary(report: &ExperimentReport) {
    for h in &report.hit_at_k {
        println!("hit@{} = {:.4}", h.k, h.hit);
    }
    for s in &report.attack_summary {
        println!(
            "{:<6} {:<6} {:<5} zeta={} f1 = {:.4} ± {:.4} (n={})",
            s.attribute.name(),
            s.attacker.name(),
            s.mask,
            s.zeta,
            s.mean,
            s.std,
            s.n
        );
    }
}

fn cmd_train(common: &Common, attack: bool) -> Result<()> {
    let cfg = load(common)?;
    let started = Instant::now();
    let p = prepare(&cfg)?;
    info!("{} users, {} items, layout {:?}", p.data.num_users(), p.data.num_items(), p.layout);
    let trained = experiment::train(&p, workers(common))?;
    let hits = evaluate(&p, &trained.params)?;
    let attacks = match (&trained.archive, attack) {
        (Some(a), true) => experiment::attack(&p, a, workers(common))?,
        _ => Vec::new(),
    };
    let report = build_report(&p, Some(&trained), hits, attacks)?;
    let run = RunOutput { report, trained };
    write_run(&cfg.output.dir, &p, &run)?;
    print_summary(&run.report);
    info!("done in {:.1}s, results in {}", started.elapsed().as_secs_f64(), cfg.output.dir.display());
    Ok(())
}

fn cmd_attack(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load(common)?;
    let p = prepare(&cfg)?;
    let archive = load_run_deltas(checkpoint, &p).map_err(|e| e.in_stage("attack"))?;
    let attacks = experiment::attack(&p, &archive, workers(common))?;
    let report = build_report(&p, None, Vec::new(), attacks)?;
    let out = common.out.clone().unwrap_or_else(|| checkpoint.join("attack"));
    write_atomically(&out, |d| write_report(d, &report))?;
    print_summary(&report);
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load(common)?;
    let p = prepare(&cfg)?;
    let (params, _) = load_run_checkpoint(checkpoint, &p).map_err(|e| e.in_stage("eval"))?;
    let hits = evaluate(&p, &params)?;
    let report = build_report(&p, None, hits, Vec::new())?;
    let out = common.out.clone().unwrap_or_else(|| checkpoint.join("eval"));
    write_atomically(&out, |d| write_report(d, &report))?;
    print_summary(&report);
    Ok(())
}

fn cmd_sweep(common: &Common, grid: &Path) -> Result<()> {
    let base = load(common)?;
    let cells = SweepGrid::load(grid)?.expand(&base)?;
    info!("{} sweep cells", cells.len());
    let mut reports = Vec::with_capacity(cells.len());
    write_atomically(&base.output.dir, |staging| {
        for (label, cfg) in &cells {
            info!("cell {label}");
            let p = prepare(cfg).map_err(|e| e.in_stage("sweep"))?;
            let run = experiment::run_prepared(&p, workers(common))?;
            write_run(&staging.join(label), &p, &run)?;
            reports.push((label.clone(), run.report));
        }
        experiment::write_text(staging, experiment::SWEEP_HITS_FILE, &experiment::sweep_hits_csv(&reports))?;
        experiment::write_text(staging, experiment::SWEEP_F1_FILE, &experiment::sweep_f1_csv(&reports))
    })?;
    for (label, report) in &reports {
        println!("[{label}]");
        print_summary(report);
    }
    Ok(())
}

fn cmd_selftest() -> bool {
    let mut ok = true;
    for check in selftest::run_all() {
        println!("{} {:<26} {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
        ok &= check.passed;
    }
    ok
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Train(c) => cmd_train(c, false),
        Command::Run(c) => cmd_train(c, true),
        Command::Attack { common, checkpoint } => cmd_attack(common, checkpoint),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Sweep { common, grid } => cmd_sweep(common, grid),
        Command::Selftest => {
            return if cmd_selftest() { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
