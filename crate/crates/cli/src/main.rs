use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ibnseg::data::{export_dataset, import_dataset, Modality, SampleSet};
use ibnseg::experiment::{self, matrix_cells, run_matrix, run_train, RunConfig, Split};
use ibnseg::nn::{checkpoint, NormPolicy};
use ibnseg::train::{cross_modality_csv, cross_modality_eval};
use ibnseg::verify::{run_suite, Suite};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "ibnseg", version, about = "Toy cross-modality segmentation experiments")]
struct Cli {
    /// Root for outputs of commands run without --out.
    #[arg(long, global = true, env = "IBNSEG_OUT", default_value = "ibnseg-out")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, logs and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on both modalities.
    Eval(EvalArgs),
    /// Per-probe feature divergence between two image streams.
    Divergence(DivergenceArgs),
    /// Train every policy × loss × seed combination.
    Matrix(MatrixArgs),
    /// Run a built-in verification suite.
    Verify {
        /// gradcheck, lovasz-oracle, divergence-math, schedule or all.
        suite: String,
    },
    /// Export the configured synthetic dataset to disk.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> ibnseg::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    policy: Option<NormPolicy>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Exported dataset to evaluate on instead of the configured validation split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "A")]
    trained_on: Modality,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DivergenceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Exported dataset for the first stream; the validation split otherwise.
    #[arg(long)]
    data_a: Option<PathBuf>,
    #[arg(long)]
    data_b: Option<PathBuf>,
    #[arg(long, default_value = "A")]
    modality_a: Modality,
    #[arg(long, default_value = "B")]
    modality_b: Modality,
    #[arg(long)]
    floor: Option<f64>,
    /// Comma-separated probe names; all probes when omitted.
    #[arg(long, value_delimiter = ',')]
    probes: Vec<String>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<NormPolicy>,
    /// Loss settings as `l1:l2`, comma-separated.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_lambdas)]
    lambdas: Vec<(f64, f64)>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value = "train", value_parser = ["train", "val"])]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_lambdas(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected l1:l2, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(name))
}

fn cmd_train(a: &TrainArgs, root: &Path) -> anyhow::Result<u8> {
    let mut cfg = a.config.load()?;
    if let Some(p) = a.policy {
        cfg.model.policy = p;
    }
    if let Some(l) = a.lambda1 {
        cfg.loss.lambda1 = l;
    }
    if let Some(l) = a.lambda2 {
        cfg.loss.lambda2 = l;
    }
    if let Some(s) = a.seed {
        cfg.optim.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(&a.out, root, "train");
    let s = run_train(&cfg, &out)?;
    let last = s.log.steps.last().map_or(f64::NAN, |r| r.loss);
    println!("policy {} λ1 {} λ2 {} seed {}", cfg.model.policy, cfg.loss.lambda1, cfg.loss.lambda2, cfg.optim.seed);
    println!("iterations {} final loss {last:.6}", s.log.steps.len());
    println!(
        "mIoU same {:.4} cross {:.4} decay {:.4}",
        s.eval.same.mean, s.eval.cross.mean, s.eval.decay
    );
    println!("mean divergence {:.6}", s.mean_divergence());
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_eval(a: &EvalArgs, root: &Path) -> anyhow::Result<u8> {
    let cfg = a.config.load()?;
    let net = checkpoint::load(&a.checkpoint)?;
    let data = match &a.data {
        Some(d) => import_dataset(d)?,
        None => cfg.data.load(Split::Val)?,
    };
    let row = cross_modality_eval(&net, &data, a.trained_on, cfg.report.eval_batch)?;
    let out = out_dir(&a.out, root, "eval");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("cross_modality.csv");
    fs::write(&path, cross_modality_csv(std::slice::from_ref(&row))).with_context(|| format!("writing {}", path.display()))?;
    for (c, v) in row.same.per_class.iter().enumerate() {
        println!("class {c} IoU {v:.4}{}", if row.same.empty[c] { " (empty)" } else { "" });
    }
    println!(
        "mIoU on {} {:.4}, on {} {:.4}, decay {:.4}",
        row.trained_on,
        row.same.mean,
        row.trained_on.other(),
        row.cross.mean,
        row.decay
    );
    Ok(0)
}

fn cmd_divergence(a: &DivergenceArgs, root: &Path) -> anyhow::Result<u8> {
    let mut cfg = a.config.load()?;
    if let Some(f) = a.floor {
        cfg.report.floor = f;
    }
    if !a.probes.is_empty() {
        cfg.report.probes = a.probes.clone();
    }
    cfg.validate()?;
    let net = checkpoint::load(&a.checkpoint)?;
    let load = |d: &Option<PathBuf>| -> ibnseg::Result<SampleSet> {
        match d {
            Some(d) => import_dataset(d),
            None => cfg.data.load(Split::Val),
        }
    };
    let (sa, sb) = (load(&a.data_a)?, load(&a.data_b)?);
    let report = experiment::profile_streams(&net, &sa, a.modality_a, &sb, a.modality_b, &cfg.report)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("divergence.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    report.save(&out)?;
    for r in &report.rows {
        println!("{:>3} {:<16} {:.6}", r.depth, r.probe, r.divergence);
    }
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_matrix(a: &MatrixArgs, root: &Path) -> anyhow::Result<u8> {
    let cfg = a.config.load()?;
    let cells = matrix_cells(&a.policies, &a.lambdas, &a.seeds)?;
    let out = out_dir(&a.out, root, "matrix");
    let outcome = run_matrix(&cfg, &cells, &out, |cell, r| match r {
        Ok(row) => println!(
            "{}: mIoU {:.4} decay {:.4} mean divergence {:.6}",
            cell.dir_name(),
            row.miou,
            row.decay,
            row.mean_div
        ),
        Err(e) => eprintln!("{}: failed: {e}", cell.dir_name()),
    })?;
    println!("wrote {}", out.join("summary.csv").display());
    Ok(match outcome.failures.first() {
        None => 0,
        Some((_, e)) => exit_code(e),
    })
}

fn cmd_verify(suite: &str) -> anyhow::Result<u8> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let mut failed = 0;
    let mut total = 0;
    for s in suites {
        for c in run_suite(s) {
            total += 1;
            if !c.passed {
                failed += 1;
            }
            println!("{} [{s}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    println!("{} of {total} cases passed", total - failed);
    Ok(if failed == 0 { 0 } else { EXIT_VERIFY })
}

fn cmd_gen_data(a: &GenDataArgs, root: &Path) -> anyhow::Result<u8> {
    let cfg = a.config.load()?;
    let split = if a.split == "val" { Split::Val } else { Split::Train };
    let data = cfg.data.load(split)?;
    let out = out_dir(&a.out, root, &a.split);
    export_dataset(&data, &out)?;
    println!("wrote {} samples to {}", data.samples().len(), out.display());
    Ok(0)
}

fn exit_code(e: &ibnseg::Error) -> u8 {
    match e {
        ibnseg::Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let root = cli.out_root.as_path();
    match &cli.command {
        Command::Train(a) => cmd_train(a, root),
        Command::Eval(a) => cmd_eval(a, root),
        Command::Divergence(a) => cmd_divergence(a, root),
        Command::Matrix(a) => cmd_matrix(a, root),
        Command::Verify { suite } => cmd_verify(suite),
        Command::GenData(a) => cmd_gen_data(a, root),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<ibnseg::Error>().map_or(EXIT_CONFIG, exit_code);
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_pairs_parse() {
        assert_eq!(parse_lambdas("1:0.5").unwrap(), (1.0, 0.5));
        assert!(parse_lambdas("1").is_err());
        assert!(parse_lambdas("a:1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn numeric_failures_map_to_their_own_code() {
        assert_eq!(exit_code(&ibnseg::Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&ibnseg::Error::Config("x".into())), EXIT_CONFIG);
    }
}
