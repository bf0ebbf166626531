use std::fs;
use std::process::Command;

use branchnet::config::ExperimentConfig;
use branchnet::presets;
use branchnet::render::{render, render_svg, PlotSpec};
use branchnet::run::{read_rows, run_sweep, write_outputs, Row};

const SMALL: &str = r#"
name = "small"
scenario = "csbm-student-teacher"
train_ratio = 0.6
split_seed = 2

[csbm]
n = 60
feature_dim = 40
avg_degree = 6.0
homophily = 2.0
signal_strength = 2.0
seed = 1

[teacher]
width = 64
readout_variances = [0.4, 2.0]
seed = 3

[sweep]
widths = [2, 16]
sigma_w = [0.8, 1.0]

[temperature]
multiple = 5e-3
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

#[test]
fn empty_sweep_names_the_field() {
    let text = SMALL.replace("widths = [2, 16]", "widths = []");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("sweep.widths"), "{err}");
}

#[test]
fn schema_violations_carry_field_paths() {
    let err = ExperimentConfig::from_toml(&SMALL.replace("seed = 3", "seed = -3")).unwrap_err();
    assert!(err.to_string().contains("teacher.seed"), "{err}");
    let err = ExperimentConfig::from_toml(&SMALL.replace(
        "readout_variances = [0.4, 2.0]",
        "readout_variances = [0.4]",
    ))
    .unwrap_err();
    assert!(
        err.to_string().contains("teacher.readout_variances"),
        "{err}"
    );
    let err =
        ExperimentConfig::from_toml(&SMALL.replace("[temperature]", "[temperatur]")).unwrap_err();
    assert!(err.to_string().contains("temperatur"), "{err}");
}

#[test]
fn rerun_gives_identical_csv_and_plot() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_outputs(&run_sweep(&cfg, Some(1)).unwrap(), a.path()).unwrap();
    write_outputs(&run_sweep(&cfg, Some(2)).unwrap(), b.path()).unwrap();
    let csv_a = fs::read(a.path().join("results.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join("results.csv")).unwrap());

    let spec: PlotSpec =
        toml::from_str("kind = \"norms\"\noutput = \"n.svg\"\nteacher_norms = [0.4, 2.0]").unwrap();
    let p1 = fs::read(render(&a.path().join("results.csv"), &spec).unwrap()).unwrap();
    let p2 = fs::read(render(&a.path().join("results.csv"), &spec).unwrap()).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn rows_are_uniquely_keyed() {
    let result = run_sweep(&small(), Some(1)).unwrap();
    let rows = branchnet::run::rows(&result);
    let mut keys: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                r.width,
                r.sigma_w.to_bits(),
                r.branch.clone(),
                r.quantity.clone(),
                r.source.clone(),
            )
        })
        .collect();
    let n = keys.len();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), n);
    let u: Vec<&Row> = rows
        .iter()
        .filter(|r| r.quantity == "u_scaled" && r.source == "theory")
        .collect();
    assert_eq!(u.len(), 2 * 2 * 2);
}

#[test]
fn theory_rows_match_direct_library_calls() {
    let cfg = small();
    let result = run_sweep(&cfg, Some(1)).unwrap();
    let scenario = branchnet::run::build_scenario(&cfg).unwrap();
    let t = scenario
        .theory(16.0, 0.8 * 0.8, cfg.temperature(0.8), &cfg.solve_options())
        .unwrap();
    let rows = branchnet::run::rows(&result);
    let row = rows
        .iter()
        .find(|r| r.width == 16 && r.sigma_w == 0.8 && r.branch == "1" && r.quantity == "u")
        .unwrap();
    assert_eq!(row.value, t.order.u[1]);
}

#[test]
fn fig2_preset_has_twenty_theory_rows_per_quantity() {
    let mut cfg = presets::find("fig2-csbm").unwrap().config();
    cfg.hmc.enabled = false;
    let result = run_sweep(&cfg, None).unwrap();
    let rows = branchnet::run::rows(&result);
    for q in ["bias", "variance", "generalization", "train_mse"] {
        let n = rows
            .iter()
            .filter(|r| r.quantity == q && r.source == "theory" && r.branch == "all")
            .count();
        assert_eq!(n, 20, "{q}");
    }
    let n = rows
        .iter()
        .filter(|r| r.quantity == "u_scaled" && r.source == "theory" && r.branch == "0")
        .count();
    assert_eq!(n, 20);
}

#[test]
fn single_point_plot_renders() {
    let rows = vec![Row {
        scenario: "x".into(),
        width: 4,
        sigma_w: 1.0,
        branch: "0".into(),
        quantity: "u_scaled".into(),
        source: "theory".into(),
        value: 0.4,
        std_err: None,
    }];
    for kind in ["norms", "bias-variance"] {
        let spec: PlotSpec =
            toml::from_str(&format!("kind = \"{kind}\"\noutput = \"x.svg\"")).unwrap();
        let svg = render_svg(&rows, &spec).unwrap();
        assert!(svg.starts_with("<svg"));
    }
}

#[test]
fn missing_columns_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    fs::write(&path, "scenario,width,value\nx,4,1.0\n").unwrap();
    let msg = read_rows(&path).unwrap_err().to_string();
    assert!(msg.contains("missing column `sigma_w`"), "{msg}");
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchnet"))
}

#[test]
fn cli_verbs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, SMALL).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("sigma_w = [0.8, 1.0]", "sigma_w = []")).unwrap();

    let out = cli().args(["presets", "list"]).output().unwrap();
    assert!(out.status.success());
    let listing = String::from_utf8(out.stdout).unwrap();
    for p in ["fig1b", "fig2-csbm", "fig3-4", "fig9-10"] {
        assert!(listing.contains(p));
    }

    assert_eq!(
        cli().arg("validate").arg(&good).status().unwrap().code(),
        Some(0)
    );
    let out = cli().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.sigma_w"));

    let out_dir = dir.path().join("out");
    let status = cli()
        .arg("run")
        .arg(&good)
        .env("BRANCHNET_OUTPUT_DIR", &out_dir)
        .env("BRANCHNET_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out_dir.join("results.csv").exists() && out_dir.join("metadata.json").exists());

    let spec = dir.path().join("plot.toml");
    fs::write(&spec, "kind = \"bias-variance\"\noutput = \"bv.svg\"\n").unwrap();
    let status = cli()
        .arg("render")
        .arg(out_dir.join("results.csv"))
        .arg(&spec)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out_dir.join("bv.svg").exists());

    // computation failure: the dataset files do not exist
    let external = dir.path().join("ext.toml");
    let text = SMALL
        .replace("csbm-student-teacher", "external-dataset")
        .replace("[csbm]", "[dataset]\nedges = \"missing/e.txt\"\nfeatures = \"missing/f.txt\"\nlabels = \"missing/l.txt\"\n\n[csbm]");
    fs::write(&external, text).unwrap();
    let status = cli()
        .arg("run")
        .arg(&external)
        .arg("--output-dir")
        .arg(dir.path().join("ext"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // sampler-only failure: data-consistent starts need linear branches
    let mlp = dir.path().join("mlp.toml");
    fs::write(
        &mlp,
        r#"
name = "mlp"
scenario = "residual-mlp-student-teacher"
train_ratio = 0.5
[mlp]
samples = 40
input_dim = 30
seed = 1
[teacher]
width = 32
readout_variances = [2.4, 0.4]
seed = 3
[sweep]
widths = [2]
sigma_w = [1.0]
[temperature]
multiple = 1e-2
[hmc]
enabled = true
init = "data-consistent"
warmup = 10
kept = 100
"#,
    )
    .unwrap();
    let out = cli()
        .arg("run")
        .arg(&mlp)
        .arg("--output-dir")
        .arg(dir.path().join("mlp"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("mlp/results.csv").exists());
}
