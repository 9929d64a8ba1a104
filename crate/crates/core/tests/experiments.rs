//! Sweeps, output files, configuration parsing and the command line.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;

use common::ideal;
use transmon_lru::channels::ResetChannel;
use transmon_lru::engine::{run_ensemble, CodingState, JumpScheme, SimulationConfig};
use transmon_lru::experiments::{
    emit_results, ensemble_table, measure_decay_times, read_table, render_table, run_parameter_sweep,
    run_rate_sweep, sidecar_path, ConfigFile, DerivedOutput, OutputFormat, Protocols, RunMetadata, SweepSpec,
    SweptParameter, Table,
};
use transmon_lru::Error;

const CLI: &str = env!("CARGO_BIN_EXE_transmon-lru");

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn small_config() -> SimulationConfig {
    let mut cfg = SimulationConfig::new(ideal(2, 20.0), ResetChannel::dissipation(0.2), CodingState::Ket2);
    cfg.t_max = 20.0;
    cfg.n_trajectories = 32;
    cfg.master_seed = 9;
    cfg.jump_scheme = JumpScheme::WaitingTime;
    cfg.observable_stride = 40;
    cfg
}

fn meta() -> RunMetadata {
    RunMetadata::new("test", &small_config(), 9, 32).unwrap()
}

#[test]
fn csv_and_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let table = Table::new(
        &["a", "b"],
        vec![vec![1.0, 1.0 / 3.0], vec![f64::NAN, -2.5e-17], vec![1e300, 0.0]],
    );
    for (name, format) in [("t.csv", OutputFormat::Csv), ("t.json", OutputFormat::Json)] {
        let path = dir.path().join("nested").join(name);
        let side = emit_results(&table, format, &path, &meta()).unwrap();
        assert_eq!(side, sidecar_path(&path));
        let back = read_table(&path, format).unwrap();
        let expected = table.rounded();
        assert_eq!(back.columns, expected.columns);
        for (r, e) in back.rows.iter().zip(&expected.rows) {
            for (x, y) in r.iter().zip(e) {
                assert!(x == y || (x.is_nan() && y.is_nan()), "{x} vs {y}");
            }
        }
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
        assert_eq!(m["seed"], 9);
        assert_eq!(m["n_trajectories"], 32);
    }
}

#[test]
fn empty_tables_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let res = emit_results(&Table::new(&["x"], vec![]), OutputFormat::Csv, &path, &meta());
    assert!(matches!(res, Err(Error::EmptyTable)));
    assert!(!path.exists());
    let ragged = Table::new(&["x", "y"], vec![vec![1.0]]);
    assert!(matches!(render_table(&ragged, OutputFormat::Json), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let path = dir.path().join(name);
        let table = ensemble_table(&run_ensemble(&small_config()).unwrap());
        emit_results(&table, OutputFormat::Csv, &path, &meta()).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(write("a.csv"), write("b.csv"));
}

#[test]
fn ensemble_table_layout() {
    let obs = run_ensemble(&small_config()).unwrap();
    let table = ensemble_table(&obs);
    table.validate().unwrap();
    assert_eq!(table.rows.len(), obs.time_grid.len());
    assert_eq!(table.column("time").unwrap(), obs.time_grid);
    assert!(table.column("n_1").is_some());
    assert!(table.column("n_2").is_none());
    assert_eq!(table.column("leakage_total").unwrap(), obs.leakage_total.mean);
}

#[test]
fn analytics_match_the_stored_values() {
    let file = ConfigFile::load(&configs().join("simulate_reference.toml")).unwrap();
    let table = transmon_lru::experiments::analytics_table(&file.simulation_config().unwrap()).unwrap();
    let golden = read_table(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/analytics_reference.csv"), OutputFormat::Csv)
        .unwrap();
    assert_eq!(table.columns, golden.columns);
    for (x, y) in table.rows[0].iter().zip(&golden.rows[0]) {
        assert!(x == y || (x.is_nan() && y.is_nan()) || ((x - y) / y).abs() < 1e-10, "{x} vs {y}");
    }
    // J = 2π·5, Ū = 2π·250 in rad/µs.
    let j = 2.0 * PI * 5.0;
    let jp = 2.0 * j * j / (2.0 * PI * 250.0);
    assert!((table.column("j_prop").unwrap()[0] - jp).abs() < 1e-9);
    assert!((table.column("t_prop").unwrap()[0] - PI / (2.0 * jp)).abs() < 1e-9);
}

#[test]
fn every_shipped_config_parses() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let file = ConfigFile::load(&path).unwrap();
        let cfg = file.simulation_config().unwrap();
        cfg.validate().unwrap();
        if file.sweep.is_some() {
            file.sweep_spec().unwrap().validate().unwrap();
        }
    }
}

#[test]
fn config_units_and_errors() {
    let text = r#"
        units = "dimensionless"
        [lattice]
        length = 2
        anharmonicity = 20.0
        hopping = 1.0
        [channel]
        kind = "dissipation"
        rate = 0.5
        [simulation]
        t_max = 10.0
        n_trajectories = 64
    "#;
    let cfg = ConfigFile::from_toml(text).unwrap().simulation_config().unwrap();
    assert_eq!(cfg.channel.rate, 0.5);
    assert_eq!(cfg.lattice.mean_anharmonicity, 20.0);
    assert_eq!(cfg.t_max, 10.0);

    let mhz = text.replace("\"dimensionless\"", "\"mhz\"");
    let cfg = ConfigFile::from_toml(&mhz).unwrap().simulation_config().unwrap();
    assert!((cfg.channel.rate - 2.0 * PI * 0.5).abs() < 1e-12);

    assert!(matches!(ConfigFile::from_toml("[lattice]\nlength = 2"), Err(Error::Config(_))));
    let typo = text.replace("hopping", "hoping");
    assert!(matches!(ConfigFile::from_toml(&typo), Err(Error::Config(_))));
    let hot = format!("{text}\n[noise]\ntemperature = 0.1\n");
    assert!(ConfigFile::from_toml(&hot).and_then(|f| f.simulation_config()).is_err());
}

#[test]
fn sweep_specs_are_validated() {
    let base = small_config();
    assert!(SweepSpec::new(base.clone(), SweptParameter::ChannelRate, vec![]).validate().is_err());
    assert!(SweepSpec::new(base.clone(), SweptParameter::ChannelRate, vec![1.0, 0.5, 2.0]).validate().is_err());
    SweepSpec::new(base.clone(), SweptParameter::ChannelRate, vec![1.0, 0.5]).validate().unwrap();
    assert!(SweepSpec::new(base.clone(), SweptParameter::LengthL, vec![2.0, 2.5]).validate().is_err());
    assert!(SweepSpec::new(base.clone(), SweptParameter::DisorderW, vec![0.0, f64::NAN]).validate().is_err());
    SweepSpec::new(base, SweptParameter::LengthL, vec![2.0, 3.0]).validate().unwrap();
}

#[test]
fn rate_sweep_finds_an_interior_minimum() {
    let mut base = small_config();
    base.t_max = 60.0;
    base.n_trajectories = 256;
    let jp = base.lattice.propagation_hopping();
    let rates: Vec<f64> = common::logspace(0.02 * jp, 50.0 * jp, 9);
    let spec = SweepSpec::new(base, SweptParameter::ChannelRate, rates.clone());
    let res = run_rate_sweep(&spec).unwrap();
    assert_eq!(res.rates, rates);
    assert_eq!(res.final_leakage.len(), rates.len());
    assert!(!res.minima.is_empty());
    let best = res.minimum_rates()[0];
    assert!(best > 0.2 * jp && best < 10.0 * jp, "minimum at {} Jp", best / jp);
    let table = res.to_table(1.0);
    assert_eq!(table.column("is_minimum").unwrap().iter().filter(|&&m| m == 1.0).count(), res.minima.len());
}

#[test]
fn decay_times_have_split_half_errors() {
    let mut cfg = small_config();
    cfg.t_max = 60.0;
    cfg.n_trajectories = 256;
    let times = measure_decay_times(
        &cfg,
        Protocols {
            leakage: true,
            relaxation: false,
            coherence: false,
        },
    )
    .unwrap();
    assert!(times.t_star.is_ok());
    assert!(times.t_star.value > 0.0 && times.t_star.error >= 0.0);
    assert!(times.t_star.error < times.t_star.value);
    assert!(times.t1.value.is_nan());
}

#[test]
fn parameter_sweep_needs_enough_trajectories() {
    let mut cfg = small_config();
    cfg.n_trajectories = 16;
    let mut spec = SweepSpec::new(cfg, SweptParameter::DisorderW, vec![0.0, 1.0]);
    spec.derived_outputs = vec![DerivedOutput::FittedTStar];
    assert!(run_parameter_sweep(&spec).is_err());
    spec.swept_parameter = SweptParameter::ChannelRate;
    spec.base.n_trajectories = 64;
    assert!(run_parameter_sweep(&spec).is_err());
}

#[test]
fn cli_exit_codes() {
    let ok = Command::new(CLI).arg("verify").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");

    let missing = Command::new(CLI)
        .args(["simulate", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
    let bad_flag = Command::new(CLI).args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(3));
}

#[test]
fn cli_writes_results_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let status = Command::new(CLI)
        .args(["simulate", "--config"])
        .arg(configs().join("simulate_reference.toml"))
        .args(["--trajectories", "16", "--seed", "5", "--output"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let table = read_table(&out, OutputFormat::Json).unwrap();
    assert_eq!(table.columns[0], "time");
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(meta["command"], "simulate");
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["n_trajectories"], 16);
}
