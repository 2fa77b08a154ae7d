use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hartree4::cli_io::{exit_code, load_config, run, Command};

#[derive(Parser)]
#[command(name = "hartree4", version, about = "Hartree multisoliton lab in four dimensions")]
struct Cli {
    /// TOML run configuration; every key is optional
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `section.key=value`, repeatable
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
    /// worker threads (the solvers are single-threaded; recorded only)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// memory cap for the 4D solver in GB
    #[arg(long, global = true)]
    mem_cap: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Integrate,
    Scatter,
    CentralConfig,
    Parabolic,
}

#[derive(Subcommand)]
enum Cmd {
    GroundState,
    LinopsVerify,
    MultipoleFit,
    Mbody {
        #[arg(value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    ModTraj,
    BuildApprox,
    ResidualOrder,
    Evolve,
    PcTransform,
    VerifyAll,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    if let Some(g) = cli.mem_cap {
        overrides.push(format!("mem_cap_gb={g:?}"));
    }
    let cmd = match cli.cmd {
        Cmd::GroundState => Command::GroundState,
        Cmd::LinopsVerify => Command::LinopsVerify,
        Cmd::MultipoleFit => Command::MultipoleFit,
        Cmd::Mbody { mode, m, eta } => {
            if let Some(mode) = mode {
                let s = match mode {
                    Mode::Integrate => "integrate",
                    Mode::Scatter => "scatter",
                    Mode::CentralConfig => "central-config",
                    Mode::Parabolic => "parabolic",
                };
                overrides.push(format!("mbody.mode=\"{s}\""));
            }
            if let Some(m) = m {
                overrides.push(format!("mbody.m={m}"));
            }
            if let Some(eta) = eta {
                overrides.push(format!("mbody.eta={eta:?}"));
            }
            Command::Mbody
        }
        Cmd::ModTraj => Command::ModTraj,
        Cmd::BuildApprox => Command::BuildApprox,
        Cmd::ResidualOrder => Command::ResidualOrder,
        Cmd::Evolve => Command::Evolve,
        Cmd::PcTransform => Command::PcTransform,
        Cmd::VerifyAll => Command::VerifyAll,
    };
    let text = match cli.config.as_ref().map(std::fs::read_to_string).transpose() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read config: {e}");
            return ExitCode::from(2);
        }
    };
    let result = load_config(text.as_deref(), &overrides).and_then(|cfg| run(cmd, &cfg, &cli.out));
    match result {
        Ok(man) => {
            for c in &man.checks {
                println!("{} {} (value {:.3e}, tol {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tol);
            }
            println!("manifest: {}", cli.out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
