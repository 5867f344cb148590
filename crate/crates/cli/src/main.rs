use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mumimo_dpd::complexity::{flops, reference_point, REFERENCE_B};
use mumimo_dpd::experiments::{
    build_bank, csv_header, flops_csv, run_flops_sweep, run_ila_fit, run_ser_sweep, run_training,
    ser_csv, ExperimentConfig,
};
use mumimo_dpd::Error;

/// Massive MU-MIMO-OFDM downlink simulator with digital predistortion.
#[derive(Parser)]
#[command(name = "mumimo-dpd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// FLOP counts per UE per OFDM symbol over the configured (B, U) grid.
    Flops(Common),
    /// Symbol error rate versus PA drive level for each configured scheme.
    SerSweep(Common),
    /// Train the configured frequency-domain predistorter.
    Train(Common),
    /// Identify the per-antenna time-domain GMP predistorters.
    IlaFit(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in desk profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding `link.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> mumimo_dpd::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let mut cfg = ExperimentConfig::from_toml(&text)?;
                resolve_relative(&mut cfg, path);
                cfg
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.link.seed = seed;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&self.out)?;
        Ok(cfg)
    }
}

/// File paths inside a config are relative to the config file.
fn resolve_relative(cfg: &mut ExperimentConfig, config_path: &Path) {
    let base = config_path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.pa.coefficients, &mut cfg.dpd.checkpoint].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn write(path: PathBuf, text: &str) -> mumimo_dpd::Result<()> {
    std::fs::write(&path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_flops(c: &Common) -> mumimo_dpd::Result<()> {
    let cfg = c.load()?;
    let rows = run_flops_sweep(&cfg)?;
    for &scheme in &cfg.flops.schemes {
        for &u in &cfg.flops.users {
            for &b in &REFERENCE_B {
                if reference_point(scheme, &cfg.flops.params, b, u).is_some() && (b == 1 || b == 1024) {
                    println!("{}", flops(scheme, &cfg.flops.params, b, u)?);
                }
            }
        }
    }
    write(c.out.join("flops.csv"), &flops_csv(&cfg, &rows))
}

fn cmd_ser_sweep(c: &Common) -> mumimo_dpd::Result<()> {
    let cfg = c.load()?;
    let setup = build_bank(&cfg)?;
    let rows = run_ser_sweep(&cfg, &setup.bank)?;
    for r in &rows {
        match (r.ser(), r.ppa_dbm()) {
            (Some(ser), Some(p)) => println!(
                "{:8} drive {:5.1} dBm  P_PA {:6.2} dBm  SER {:.3e}",
                r.scheme.name(),
                r.input_dbm,
                p,
                ser
            ),
            _ => println!("{:8} drive {:5.1} dBm  {}", r.scheme.name(), r.input_dbm, r.status),
        }
    }
    write(c.out.join("ser.csv"), &ser_csv(&cfg, &setup.table_hash, &rows))
}

fn cmd_train(c: &Common) -> mumimo_dpd::Result<()> {
    let cfg = c.load()?;
    let setup = build_bank(&cfg)?;
    let run = run_training(&cfg, &setup.bank)?;
    let losses = &run.report.losses;
    println!(
        "{} batches, loss {:.4e} -> {:.4e}{}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        if run.report.converged { " (converged)" } else { "" }
    );
    write(c.out.join("checkpoint.txt"), &run.checkpoint)?;
    let header = csv_header(&cfg, &setup.table_hash);
    write(c.out.join("loss.csv"), &format!("{header}{}", run.loss_csv))
}

fn cmd_ila_fit(c: &Common) -> mumimo_dpd::Result<()> {
    let cfg = c.load()?;
    let setup = build_bank(&cfg)?;
    let (_, tables) = run_ila_fit(&cfg, &setup.bank)?;
    for (b, t) in tables.iter().enumerate() {
        write(c.out.join(format!("dpd_antenna_{b}.txt")), t)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Flops(c) => cmd_flops(c),
        Command::SerSweep(c) => cmd_ser_sweep(c),
        Command::Train(c) => cmd_train(c),
        Command::IlaFit(c) => cmd_ila_fit(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
