use std::path::Path;

use mumimo_dpd::experiments::{
    build_bank, ila_probe, run_ila_fit, run_ser_sweep, run_training, ser_csv, DpdScheme,
    ExperimentConfig,
};
use mumimo_dpd::pa::GmpSpec;
use mumimo_dpd::training::block_means;
use mumimo_dpd::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.input_dbm = vec![25.0, 31.0];
    cfg.sweep.symbols_per_point = 4_800;
    cfg.train.max_batches = 60;
    cfg.train.min_batches = 40;
    cfg
}

fn shipped_config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let desk = shipped_config("desk.toml");
    assert_eq!(desk.to_toml(), ExperimentConfig::default().to_toml());
    let full = shipped_config("full_scale.toml");
    assert_eq!((full.link.bs_antennas, full.link.users, full.link.n), (32, 8, 4096));
}

#[test]
fn config_toml_roundtrip() {
    let cfg = small_config();
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
}

#[test]
fn unknown_and_invalid_keys_are_config_errors() {
    let mut text = ExperimentConfig::default().to_toml();
    text.push_str("\n[extra]\nfoo = 1\n");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));

    let text = ExperimentConfig::default().to_toml().replace("users = 2", "users = 9");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
}

#[test]
fn bank_is_reproducible_and_hashed() {
    let cfg = ExperimentConfig::default();
    let a = build_bank(&cfg).unwrap();
    let b = build_bank(&cfg).unwrap();
    assert_eq!(a.table_hash, b.table_hash);
    assert_eq!(a.table_hash.len(), 64);
    assert_eq!(a.bank.len(), cfg.link.bs_antennas);
    for (x, y) in a.bank.units.iter().zip(&b.bank.units) {
        assert_eq!(x.gmp.coeffs(), y.gmp.coeffs());
    }
    // Different perturbation seeds give different antennas.
    let mut other = cfg.clone();
    other.pa.perturbation_seed += 1;
    let c = build_bank(&other).unwrap();
    assert_ne!(a.bank.units[0].gmp.coeffs(), c.bank.units[0].gmp.coeffs());
}

#[test]
fn ila_fit_writes_parseable_tables() {
    let cfg = small_config();
    let setup = build_bank(&cfg).unwrap();
    let (dpd, tables) = run_ila_fit(&cfg, &setup.bank).unwrap();
    assert_eq!(tables.len(), cfg.link.bs_antennas);
    for (spec, table) in dpd.specs.iter().zip(&tables) {
        assert_eq!(GmpSpec::parse_table(table).unwrap().coeffs(), spec.coeffs());
    }
}

#[test]
fn ila_probe_covers_every_antenna() {
    let cfg = small_config();
    let probe = ila_probe(&cfg, &cfg.link_at(31.0), 0).unwrap();
    assert_eq!(probe.len(), cfg.link.bs_antennas);
    assert!(probe.iter().all(|p| p.len() == cfg.dpd.probe_symbols * cfg.link.n));
}

#[test]
fn small_sweep_produces_complete_csv() {
    let mut cfg = small_config();
    cfg.sweep.schemes = vec![DpdScheme::None, DpdScheme::TdGmp, DpdScheme::IdealPa];
    let setup = build_bank(&cfg).unwrap();
    let rows = run_ser_sweep(&cfg, &setup.bank).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.status == "ok" && r.tally.unwrap().symbols >= 4_800));
    // Drive level is reported as measured PA output power and rises with it.
    let ppa: Vec<f64> = rows.iter().filter(|r| r.scheme == DpdScheme::IdealPa).map(|r| r.ppa_dbm().unwrap()).collect();
    assert!(ppa[1] > ppa[0] + 5.0);

    let csv = ser_csv(&cfg, &setup.table_hash, &rows);
    assert!(csv.contains(&setup.table_hash));
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "scheme,input_dbm,tx_power,ppa_dbm,symbols,errors,ser,ci_low,ci_high,status");
    assert_eq!(body.len(), 7);
    assert!(body[1..].iter().all(|l| l.split(',').count() == 10));
}

#[test]
fn sweep_marks_numerical_failures_per_point() {
    let mut cfg = small_config();
    cfg.sweep.schemes = vec![DpdScheme::None, DpdScheme::FdCnn];
    cfg.sweep.input_dbm = vec![25.0];
    // Any rise at all counts as divergence.
    cfg.train.divergence_factor = 1.0 + 1e-9;
    let setup = build_bank(&cfg).unwrap();
    let rows = run_ser_sweep(&cfg, &setup.bank).unwrap();
    assert_eq!(rows[0].status, "ok");
    assert!(rows[1].status.starts_with("failed"), "{}", rows[1].status);
    assert!(rows[1].tally.is_none());
    let csv = ser_csv(&cfg, &setup.table_hash, &rows);
    assert!(csv.lines().last().unwrap().starts_with("fd_cnn,25.0,"));
}

#[test]
fn training_on_gmp_bank_reduces_loss() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.max_batches = 200;
    cfg.train.min_batches = 200;
    let setup = build_bank(&cfg).unwrap();
    let run = run_training(&cfg, &setup.bank).unwrap();
    let blocks = block_means(&run.report.losses, cfg.train.window);
    assert!(blocks.last().unwrap() < &blocks[0], "{blocks:?}");
    assert!(run.loss_csv.lines().count() > run.report.losses.len());
    assert!(run.checkpoint.starts_with("mumimo-dpd checkpoint 1\nkind fd_cnn\n"));
}
