use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use gmy::app::{run, Verb};
use gmy::config::RunConfig;
use gmy::GmyError;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Systems,
    Certify,
    Hyptimes,
    Partition,
    Tower,
    Census,
    Verify,
    Report,
}

impl From<Cmd> for Verb {
    fn from(c: Cmd) -> Verb {
        match c {
            Cmd::Systems => Verb::Systems,
            Cmd::Certify => Verb::Certify,
            Cmd::Hyptimes => Verb::Hyptimes,
            Cmd::Partition => Verb::Partition,
            Cmd::Tower => Verb::Tower,
            Cmd::Census => Verb::Census,
            Cmd::Verify => Verb::Verify,
            Cmd::Report => Verb::Report,
        }
    }
}

/// Hyperbolic times, inducing schemes and SRB measure estimates for toral maps.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(value_enum)]
    verb: Cmd,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    /// System parameter, repeatable.
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta1: Option<f64>,
    #[arg(long)]
    delta0: Option<f64>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    nmax: Option<usize>,
    /// Anchor grid of the partition build.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Horizon of the hyperbolic-time scan.
    #[arg(long)]
    horizon: Option<usize>,
}

fn load(args: &Args) -> gmy::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if args.system.is_some() {
        cfg.system.name = args.system.clone();
    }
    cfg.set_params(&args.params)?;
    let c = &mut cfg.constants;
    c.sigma = args.sigma.or(c.sigma);
    c.delta1 = args.delta1.or(c.delta1);
    c.delta0 = args.delta0.or(c.delta0);
    c.n0 = args.n0.or(c.n0);
    c.n_max = args.nmax.or(c.n_max);
    cfg.grids.partition = args.grid.or(cfg.grids.partition);
    cfg.horizons.hyptimes = args.horizon.or(cfg.horizons.hyptimes);
    cfg.seed = args.seed.or(cfg.seed);
    cfg.output = args.out.clone().or(cfg.output);
    Ok(cfg)
}

fn fail(e: GmyError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let (system, resolved) = match cfg.resolve() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let outcome = match run(args.verb.into(), &system, &resolved) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    if let Some(list) = &outcome.report.systems {
        for s in list {
            println!("{:<14} dim={} invertible={} {:?}", s.name, s.dimension, s.invertible, s.params);
        }
    }
    for c in &outcome.report.checks {
        println!(
            "{} {:<24} value={:<12.6e} tol={:<10.3e} n={:<8} {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.samples,
            c.note
        );
    }
    for (name, secs) in &outcome.timings {
        eprintln!("{name}: {secs:.2}s");
    }
    println!("artifacts written to {}", resolved.output.display());
    if outcome.report.all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
