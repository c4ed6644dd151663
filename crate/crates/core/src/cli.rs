//! Command-line front end: train, eval, gradcheck, export-adjacency, ablate.
//!
//! Exit codes: 0 success, 1 runtime failure (missing checkpoint, failed
//! gradient suite, non-finite loss), 2 usage errors (unknown flags,
//! subcommands or values).

use crate::cgt::FusionStrategy;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::episodes::generate_episode;
use crate::error::Error;
use crate::eval::{evaluate_model, EvalReport};
use crate::gradcheck;
use crate::model::{infer_episode, prepare_episode, GraphMode};
use crate::rng::RngStream;
use crate::train::{build_pool, run_steps, TrainState, LOG_HEADER, STREAM_EVAL};
use crate::Result;
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "graphpose",
    about = "Few-shot keypoint localization with generative latent graph structure",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// Flat key=value config file; CLI flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Support shots per episode (1 or 5).
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_parser = parse_graph_mode)]
    graph_mode: Option<GraphMode>,
    #[arg(long, value_parser = parse_strategy)]
    sample_strategy: Option<FusionStrategy>,
    #[arg(long, value_parser = parse_strategy)]
    layer_strategy: Option<FusionStrategy>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_graph_mode(s: &str) -> std::result::Result<GraphMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<FusionStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and write checkpoint plus CSV loss log.
    Train(CommonOpts),
    /// Evaluate a checkpoint: PCK at each threshold and mPCK.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out episodes (default: config eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Export per-layer fused adjacencies of one inference pass as CSV.
    ExportAdjacency {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the graph-mode x fusion-strategy grid and print a comparison.
    Ablate(CommonOpts),
}

impl CommonOpts {
    fn build_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.shots {
            cfg.shots = v;
        }
        if let Some(v) = self.graph_mode {
            cfg.graph_mode = v;
        }
        if let Some(v) = self.sample_strategy {
            cfg.sample_strategy = v;
        }
        if let Some(v) = self.layer_strategy {
            cfg.layer_strategy = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.display().to_string();
        }
    }
}

/// Parses and executes a command line; returns the process exit code.
pub fn run_cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train(common) => cmd_train(&common.build_config()?),
        Cmd::Eval {
            common,
            checkpoint,
            episodes,
        } => cmd_eval(&common, &checkpoint, episodes),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::ExportAdjacency { common, checkpoint } => cmd_export(&common, &checkpoint),
        Cmd::Ablate(common) => cmd_ablate(&common.build_config()?),
    }
}

fn cmd_train(cfg: &TrainConfig) -> Result<i32> {
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out)?;
    println!(
        "training: {} steps, batch {}, {} pool episodes, graph mode {}",
        cfg.steps, cfg.batch_size, cfg.train_episodes, cfg.graph_mode
    );
    let pool = build_pool(cfg)?;
    let mut state = TrainState::init(cfg)?;
    let mut log = Vec::new();
    let report_every = (cfg.steps / 10).max(1);
    let mut next_report = 0;
    while state.step < cfg.steps {
        let chunk = report_every.min(cfg.steps - state.step);
        run_steps(&mut state, &pool, cfg, chunk, &mut log)?;
        if state.step >= next_report {
            if let Some(last) = log.last() {
                println!(
                    "step {:>6}  loss {:.5}  offset {:.5}  kl {:.4}",
                    last.step, last.total, last.offset, last.kl
                );
            }
            next_report += report_every;
        }
    }

    let log_path = out.join("train_log.csv");
    let mut f = std::fs::File::create(&log_path)?;
    writeln!(f, "{LOG_HEADER}")?;
    for record in &log {
        writeln!(f, "{}", record.to_csv_line())?;
    }
    let ckpt_path = out.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &state, cfg)?;
    println!("wrote {} and {}", log_path.display(), ckpt_path.display());
    Ok(0)
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn print_report(report: &EvalReport) {
    for (tau, pck) in report.thresholds.iter().zip(&report.pck) {
        println!("PCK@{:<4} {:.4}", tau, pck);
    }
    println!("mPCK     {:.4}", report.mpck);
    println!("structure recovery precision {:.4}", report.recovery);
}

fn cmd_eval(common: &CommonOpts, ckpt: &Path, episodes: Option<usize>) -> Result<i32> {
    let (state, mut cfg) = load_checkpoint(ckpt)?;
    common.apply(&mut cfg);
    let n = episodes.unwrap_or(cfg.eval_episodes);
    let report = evaluate_model(&state.model, &cfg, n)?;
    println!(
        "evaluated {} episodes ({} keypoint task, {}-shot)",
        report.episodes, cfg.topology, cfg.shots
    );
    print_report(&report);
    Ok(0)
}

fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let started = std::time::Instant::now();
    let results = gradcheck::run_suite(seed)?;
    let mut failures = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<40} max_err {:.3e}  tol {:.0e}",
            r.name, r.max_err, r.tol
        );
        if !r.passed() {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failures, {:.1}s",
        results.len(),
        failures,
        started.elapsed().as_secs_f64()
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

fn cmd_export(common: &CommonOpts, ckpt: &Path) -> Result<i32> {
    let (state, mut cfg) = load_checkpoint(ckpt)?;
    common.apply(&mut cfg);
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out)?;

    let synth = cfg.synth_config();
    let mut rng = RngStream::new(cfg.seed, STREAM_EVAL);
    let ep = generate_episode(&synth, &mut rng)?;
    let prepared = prepare_episode(&ep, state.model.cfg.m)?;
    let fwd = infer_episode(&state.model, &prepared)?;

    let path = out.join("adjacency.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "layer,i,j,value")?;
    for (layer, adj) in fwd.adjacencies.iter().enumerate() {
        for i in 0..adj.rows() {
            for j in 0..adj.cols() {
                writeln!(f, "{},{},{},{}", layer + 1, i, j, adj.get(i, j))?;
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_ablate(base: &TrainConfig) -> Result<i32> {
    println!(
        "ablation grid: {} steps per run, {} eval episodes",
        base.steps, base.eval_episodes
    );
    let strategies = [
        (FusionStrategy::Bayesian, FusionStrategy::QueryWeighting),
        (FusionStrategy::QueryWeighting, FusionStrategy::QueryWeighting),
        (FusionStrategy::Bayesian, FusionStrategy::Bayesian),
        (FusionStrategy::QueryWeighting, FusionStrategy::Bayesian),
    ];
    let mut rows = Vec::new();
    for (sample, layer) in strategies {
        let mut cfg = base.clone();
        cfg.graph_mode = GraphMode::Learned;
        cfg.sample_strategy = sample;
        cfg.layer_strategy = layer;
        rows.push((format!("learned ({sample}/{layer})"), train_and_eval(&cfg)?));
    }
    for mode in [GraphMode::RandomFrozen, GraphMode::StaticGiven] {
        let mut cfg = base.clone();
        cfg.graph_mode = mode;
        rows.push((mode.to_string(), train_and_eval(&cfg)?));
    }

    println!();
    println!(
        "{:<34} {:>9} {:>9} {:>9} {:>10}",
        "configuration", "PCK@0.1", "PCK@0.2", "mPCK", "recovery"
    );
    for (name, report) in &rows {
        println!(
            "{:<34} {:>9.4} {:>9.4} {:>9.4} {:>10.4}",
            name,
            report.pck_at(0.1),
            report.pck_at(0.2),
            report.mpck,
            report.recovery
        );
    }

    let learned = rows[0].1.pck_at(0.2);
    let frozen = rows[4].1.pck_at(0.2);
    println!();
    println!(
        "learned vs random-frozen at PCK@0.2: {:.4} vs {:.4} ({:+.4})",
        learned,
        frozen,
        learned - frozen
    );
    Ok(0)
}

fn train_and_eval(cfg: &TrainConfig) -> Result<EvalReport> {
    let pool = build_pool(cfg)?;
    let mut state = TrainState::init(cfg)?;
    let mut log = Vec::new();
    run_steps(&mut state, &pool, cfg, cfg.steps, &mut log)?;
    evaluate_model(&state.model, cfg, cfg.eval_episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        run_cli(&argv)
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(&["graphpose", "bogus"]), 2);
    }

    #[test]
    fn unknown_flag_exits_2() {
        assert_eq!(run(&["graphpose", "train", "--bogus"]), 2);
    }

    #[test]
    fn bad_enum_value_exits_2() {
        assert_eq!(run(&["graphpose", "train", "--graph-mode", "nope"]), 2);
    }

    #[test]
    fn missing_checkpoint_exits_1() {
        assert_eq!(
            run(&[
                "graphpose",
                "eval",
                "--checkpoint",
                "/nonexistent/ckpt.bin"
            ]),
            1
        );
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(&["graphpose", "--help"]), 0);
    }
}
