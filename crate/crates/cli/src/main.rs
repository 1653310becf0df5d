//! `midnet` command-line driver.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! failures during a run (a diagnostic dump path is printed).

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::commands::{EvalArgs, GenArgs, GradcheckArgs, Outcome, PretrainArgs, ProbeArgs, RegisterArgs};
use crate::config::{invalid, Invalid};
use crate::manifest::{dump_diagnostic, git_revision, FileRecord, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "midnet", version, about = "Octree point-cloud pretraining, probes and registration")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long, global = true, env = "MIDNET_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Run single-threaded.
    #[arg(long, global = true, env = "MIDNET_DETERMINISTIC")]
    pub deterministic: bool,
    /// Print the resolved configuration, marking where each value came from, and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Pretrain a backbone with shape and patch instance discrimination.
    Pretrain(PretrainArgs),
    /// Train and score a classification or segmentation head.
    Probe(ProbeArgs),
    /// Run the rigid registration benchmark.
    Register(RegisterArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Aggregate metric reports.
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
struct ReplayArgs {
    /// A `run_manifest.json` written by an earlier run.
    manifest: PathBuf,
    /// Write outputs here instead of the recorded output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay even if recorded inputs have changed.
    #[arg(long)]
    force: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Pretrain(_) => "pretrain",
            Command::Probe(_) => "probe",
            Command::Register(_) => "register",
            Command::Gradcheck(_) => "gradcheck",
            Command::Eval(_) => "eval",
            Command::Replay(_) => "replay",
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::Gen(a) => Some(&a.out),
            Command::Pretrain(a) => Some(&a.out),
            Command::Probe(a) => Some(&a.out),
            Command::Register(a) => Some(&a.out),
            Command::Gradcheck(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }
}

fn parse(args: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("midnet".to_string()).chain(args.iter().cloned()))
}

/// Swaps the value of `--out` (or appends one) in a recorded argument list.
fn with_out(args: &[String], out: &Path) -> Vec<String> {
    let out = out.display().to_string();
    let mut res = Vec::with_capacity(args.len() + 2);
    let mut replaced = false;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            res.extend(["--out".to_string(), out.clone()]);
            replaced = true;
        } else if a.starts_with("--out=") {
            res.push(format!("--out={out}"));
            replaced = true;
        } else {
            res.push(a.clone());
        }
    }
    if !replaced {
        res.extend(["--out".to_string(), out]);
    }
    res
}

fn resolve_replay(r: &ReplayArgs) -> anyhow::Result<(Cli, Vec<String>)> {
    let m = RunManifest::read(&r.manifest)?;
    let changed = m.changed_inputs();
    if !changed.is_empty() && !r.force {
        let list: Vec<String> = changed.iter().map(|p| p.display().to_string()).collect();
        return Err(invalid(format!("inputs changed since the run: {}", list.join(", "))));
    }
    let args = match &r.out {
        Some(o) => with_out(&m.args, o),
        None => m.args.clone(),
    };
    let cli = parse(&args).map_err(|e| invalid(format!("{}: recorded arguments do not parse: {e}", r.manifest.display())))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(invalid("a replay manifest cannot replay another replay"));
    }
    Ok((cli, args))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for c in e.chain() {
        if c.is::<Invalid>() {
            return 1;
        }
        if let Some(m) = c.downcast_ref::<midnet::Error>() {
            return if m.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// The error chain, dropping causes whose text the previous message
/// already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for c in e.chain() {
        let msg = c.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn fail(e: anyhow::Error, out: Option<&Path>, command: &str, args: &[String]) -> ExitCode {
    eprintln!("error: {}", describe(&e));
    let code = exit_code(&e);
    if code == 2 {
        match dump_diagnostic(out, command, args, &e) {
            Some(p) => eprintln!("diagnostic dump: {}", p.display()),
            None => eprintln!("diagnostic dump could not be written"),
        }
    }
    ExitCode::from(code)
}

fn execute(cli: &Cli) -> anyhow::Result<Option<Outcome>> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => commands::gen(a, g),
        Command::Pretrain(a) => commands::pretrain(a, g),
        Command::Probe(a) => commands::probe(a, g),
        Command::Register(a) => commands::register(a, g),
        Command::Gradcheck(a) => commands::gradcheck(a, g),
        Command::Eval(a) => commands::eval(a, g),
        Command::Replay(_) => unreachable!("resolved before execution"),
    }
}

fn records(paths: &[PathBuf]) -> anyhow::Result<Vec<FileRecord>> {
    paths.iter().map(|p| FileRecord::of(p)).collect()
}

fn main() -> ExitCode {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let mut cli = match parse(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Command::Replay(r) = &cli.command {
        let outer = cli.global.clone();
        match resolve_replay(r) {
            Ok((inner, inner_args)) => {
                cli = inner;
                args = inner_args;
                cli.global.deterministic |= outer.deterministic;
                cli.global.print_config |= outer.print_config;
            }
            Err(e) => return fail(e, None, "replay", &args),
        }
    }

    let threads = if cli.global.deterministic { 1 } else { cli.global.threads };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        return fail(e.into(), None, cli.command.name(), &args);
    }

    let started = Instant::now();
    let name = cli.command.name();
    let out = cli.command.out_dir().map(Path::to_path_buf);
    let outcome = match execute(&cli) {
        Ok(Some(o)) => o,
        Ok(None) => return ExitCode::SUCCESS,
        Err(e) => return fail(e, out.as_deref(), name, &args),
    };
    let written = (|| -> anyhow::Result<PathBuf> {
        let m = RunManifest {
            command: name.to_string(),
            args: args.clone(),
            config: outcome.config,
            seeds: outcome.seeds,
            inputs: records(&outcome.inputs)?,
            outputs: records(&outcome.outputs)?,
            results: outcome.results,
            threads: rayon::current_num_threads(),
            deterministic: cli.global.deterministic,
            wall_seconds: started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: git_revision(),
        };
        m.write(out.as_deref().unwrap_or(Path::new(".")))
    })();
    match written {
        Ok(p) => {
            eprintln!("run manifest: {}", p.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e, out.as_deref(), name, &args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn out_is_replaced_or_appended() {
        let a = strings(&["probe", "--out", "x", "--data", "d"]);
        assert_eq!(with_out(&a, Path::new("y")), strings(&["probe", "--out", "y", "--data", "d"]));
        let b = strings(&["eval", "--out=x"]);
        assert_eq!(with_out(&b, Path::new("y")), strings(&["eval", "--out=y"]));
        let c = strings(&["gradcheck"]);
        assert_eq!(with_out(&c, Path::new("y")), strings(&["gradcheck", "--out", "y"]));
    }

    #[test]
    fn validation_errors_map_to_exit_code_one() {
        assert_eq!(exit_code(&invalid("bad")), 1);
        let e: midnet::Error = midnet::trainer::TrainError::InvalidConfig("x".into()).into();
        assert_eq!(exit_code(&anyhow::Error::new(e)), 1);
        let e: midnet::Error = midnet::trainer::TrainError::NonFiniteLoss {
            step: 3,
            detail: "nan".into(),
        }
        .into();
        assert_eq!(exit_code(&anyhow::Error::new(e).context("pretraining")), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
