//! End-to-end runs through the command-line layer and the validation harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command as Process, Stdio};
use std::time::Instant;

use clap::Parser;
use scm_core::cli::{effective_config, execute, read_manifest, Cli};
use scm_core::graph::grid_graph;
use scm_core::inference::{fit, FitSettings, InferenceMode};
use scm_core::io::{load_panel, MANIFEST_NAME};
use scm_core::scoring::{CellKind, Grouping, ScoringOptions};
use scm_core::synthetic::{simulate, simulation_hyper, uniform_populations, Intercepts};
use scm_core::validation::{build_cv_plan_with, build_mask, fold_panel, run_validation, DEFAULT_FRACTIONS};
use scm_core::{Disease, Grid, LatentModel, ModelConfig, ModelId, ObservationPanel};

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> scm_core::io::Manifest {
    let cli = Cli::try_parse_from(std::iter::once("scm").chain(args.iter().copied())).unwrap();
    let cfg = effective_config(&cli.command).unwrap();
    execute(&cli.command, &cfg).unwrap()
}

fn assert_manifest_complete(dir: &Path) {
    let m = read_manifest(dir).unwrap();
    let mut listed: Vec<&str> = m.files.keys().map(String::as_str).collect();
    listed.push(MANIFEST_NAME);
    listed.sort_unstable();
    let mut present: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    present.sort_unstable();
    assert_eq!(listed, present, "manifest of {}", dir.display());
}

const SIM: &str = r#"
[paths]
output_dir = "sim"
[model]
model = "model2"
[simulate]
num_years = 12
projection_years = 2
seed = 11
"#;

const RUN: &str = r#"
[paths]
adjacency = "sim/adjacency.txt"
counts = "sim/panel.csv"
projections = "sim/projections.csv"
output_dir = "fit"
[model]
model = "model2"
[fit]
burn_in = 200
n_samples = 100
thin = 1
seed = 5
[forecast]
horizon = 2
"#;

#[test]
fn simulate_fit_national_round_trip() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(dir.path(), "sim.toml", SIM);
    let cfg = write_config(dir.path(), "run.toml", RUN);
    run(&["simulate", "--config", sim.to_str().unwrap()]);
    assert_manifest_complete(&dir.path().join("sim"));

    // the written panel reloads to the simulated one
    let reloaded = load_panel(&dir.path().join("sim/panel.csv"), None).unwrap();
    let g = grid_graph(3, 4).unwrap();
    let (panel, _) = simulate::<f64>(
        &ModelConfig::new(ModelId::Model2),
        &g,
        12,
        2001,
        &uniform_populations(Grid::new(12, 12), 1e5),
        &simulation_hyper(
            &LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model2), &g, 12).unwrap(),
            &BTreeMap::new(),
        )
        .unwrap(),
        Intercepts::default(),
        11,
    )
    .unwrap();
    assert_eq!(reloaded, panel);

    let cfg = cfg.to_str().unwrap();
    run(&["fit", "--config", cfg]);
    let fit_dir = dir.path().join("fit");
    assert_manifest_complete(&fit_dir);
    let summary = fs::read_to_string(fit_dir.join("fit_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 12 * 12);

    let nat_dir = dir.path().join("national");
    run(&["national", "--config", cfg, "--output-dir", nat_dir.to_str().unwrap()]);
    assert_manifest_complete(&nat_dir);
    let national = fs::read_to_string(nat_dir.join("national.csv")).unwrap();
    // 12 fitted years and 2 forecast years without observed totals
    assert_eq!(national.lines().count(), 1 + 14);
    assert!(national.lines().last().unwrap().starts_with("2014,,"));
    assert!(start.elapsed().as_secs() < 600);
}

#[test]
fn repeated_fits_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(dir.path(), "sim.toml", SIM);
    let cfg = write_config(dir.path(), "run.toml", RUN);
    run(&["simulate", "--config", sim.to_str().unwrap()]);
    let mut manifests = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        manifests.push(run(&["fit", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]));
    }
    for name in manifests[0].files.keys() {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(manifests[0].files, manifests[1].files);
    assert_eq!(manifests[0].config_hash, manifests[1].config_hash);
}

#[test]
fn failed_run_exits_nonzero_and_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(dir.path(), "sim.toml", SIM);
    let cfg = write_config(dir.path(), "run.toml", &RUN.replace("projections = \"sim/projections.csv\"\n", ""));
    run(&["simulate", "--config", sim.to_str().unwrap()]);
    let out = dir.path().join("forecast");
    let status = Process::new(env!("CARGO_BIN_EXE_scm"))
        .args(["forecast", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .env("RUST_LOG", "off")
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert!(!status.success());
    assert!(!out.exists());

    let status = Process::new(env!("CARGO_BIN_EXE_scm")).args(["fit"]).stderr(Stdio::null()).status().unwrap();
    assert!(!status.success());
}

#[test]
fn output_dir_comes_from_the_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(dir.path(), "sim.toml", SIM);
    let out = dir.path().join("from_env");
    let status = Process::new(env!("CARGO_BIN_EXE_scm"))
        .args(["simulate", "--config", sim.to_str().unwrap()])
        .env("SCM_OUTPUT_DIR", &out)
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("panel.csv").exists());
    assert!(!dir.path().join("sim").exists());
}

fn eb() -> FitSettings {
    FitSettings { mode: InferenceMode::EmpiricalBayesLaplace, eb_draws: 200, seed: 3, ..FitSettings::default() }
}

fn synthetic_panel(num_years: usize, seed: u64) -> (scm_core::AreaGraph, ObservationPanel) {
    let g = grid_graph(3, 4).unwrap();
    let cfg = ModelConfig::new(ModelId::Model1);
    let m = LatentModel::<f64>::from_config(&cfg, &g, num_years).unwrap();
    let h = simulation_hyper(&m, &BTreeMap::new()).unwrap();
    let pops = uniform_populations(m.grid(), 1e5);
    let (panel, _) = simulate(&cfg, &g, num_years, 2001, &pops, &h, Intercepts::default(), seed).unwrap();
    (g, panel)
}

#[test]
fn validation_reports_have_the_expected_structure() {
    let (g, panel) = synthetic_panel(19, 21);
    let mask = build_mask(12, 2001, 19, &DEFAULT_FRACTIONS, 3, 4).unwrap();
    let plan = build_cv_plan_with(2001, 2019, 3, 2, 11).unwrap();
    let report = run_validation::<f64>(
        &ModelConfig::new(ModelId::Model1),
        &g,
        &panel,
        &mask,
        &plan,
        &eb(),
        &ScoringOptions::default(),
    )
    .unwrap();
    assert!(report.folds.iter().all(|f| f.error.is_none()));
    // the likelihood only ever sees observed cells
    for f in &report.folds {
        let fp = fold_panel(&panel, &mask, &f.fold).unwrap();
        assert_eq!(f.likelihood_terms, fp.num_observed());
        assert_eq!(f.observed_cells, fp.num_observed());
    }
    let s = &report.scores;
    assert_eq!(s.groups_of(CellKind::Masked, Grouping::Band).count(), 5);
    assert_eq!(s.groups_of(CellKind::Forecast, Grouping::Horizon).count(), 3);
    for g in s.groups_of(CellKind::Masked, Grouping::Band).chain(s.groups_of(CellKind::Forecast, Grouping::Horizon)) {
        assert!(g.marb.is_some() && g.dss.is_some() && g.interval_score.is_finite());
    }
}

#[test]
fn complete_availability_gives_forecast_only_reports() {
    let (g, panel) = synthetic_panel(13, 22);
    let mask = build_mask(12, 2001, 13, &[1.0], 3, 4).unwrap();
    let plan = build_cv_plan_with(2001, 2013, 2, 1, 11).unwrap();
    assert_eq!(plan.folds.len(), 1);
    let report = run_validation::<f64>(
        &ModelConfig::new(ModelId::Model3),
        &g,
        &panel,
        &mask,
        &plan,
        &eb(),
        &ScoringOptions::default(),
    )
    .unwrap();
    let s = &report.scores;
    assert!(s.cells.iter().all(|c| c.kind == CellKind::Forecast));
    assert_eq!(s.groups_of(CellKind::Masked, Grouping::All).count(), 0);
    let horizons: Vec<_> = s.groups_of(CellKind::Forecast, Grouping::Horizon).collect();
    assert_eq!(horizons.iter().map(|g| g.key.as_str()).collect::<Vec<_>>(), ["h1", "h2"]);
    assert!(horizons.iter().all(|g| g.cells == 12));
}

#[test]
fn forecast_year_data_do_not_reach_the_fit() {
    let (g, panel) = synthetic_panel(14, 23);
    let mask = build_mask(12, 2001, 14, &DEFAULT_FRACTIONS, 3, 4).unwrap();
    let plan = build_cv_plan_with(2001, 2014, 3, 1, 11).unwrap();
    let fold = &plan.folds[0];
    let mut altered = panel.clone();
    for &y in &fold.forecast_years {
        let t = altered.year_index(y).unwrap();
        for i in 0..12 {
            for d in Disease::ALL {
                let c = altered.count(i, t, d).unwrap();
                altered.set_count(i, t, d, Some(3 * c + 7));
            }
        }
    }
    let a = fold_panel(&panel, &mask, fold).unwrap();
    let b = fold_panel(&altered, &mask, fold).unwrap();
    assert_eq!(a, b);
    let cfg = ModelConfig::new(ModelId::Model1);
    let settings = FitSettings { burn_in: 50, n_samples: 30, thin: 1, seed: 9, ..FitSettings::default() };
    let fa = fit::<f64>(&cfg, &g, &a, &settings).unwrap();
    let fb = fit::<f64>(&cfg, &g, &b, &settings).unwrap();
    assert_eq!(fa, fb);
}
