use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coercivity"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(pipeline: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg(pipeline)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

const FRACTIONAL: &str = "[grid]\ndim = 1\ncells = 64\n\n[kernel]\nvariant = \"fractional_laplacian\"\ns = 0.5\nlambda = 1.0\n";
const STRIPES: &str = "[grid]\ndim = 1\ncells = 64\n\n[kernel]\nvariant = \"stripes\"\ns = 0.5\n";

#[test]
fn fractional_coercivity_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f.toml", FRACTIONAL);
    let out = dir.path().join("out");
    let o = run("coercivity", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    let ray = r["result"]["rayleigh_min"].as_f64().unwrap();
    assert!((ray - 1.0).abs() <= 1e-10, "{ray}");
    assert_eq!(r["result"]["n"], 0);
    assert_eq!(r["result"]["sound"], true);
    let repro = &r["reproducibility"];
    assert_eq!(repro["seed"], 0);
    assert_eq!(repro["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(repro["version"], env!("CARGO_PKG_VERSION"));
    // n = 0: a single a_j row.
    let (h, rows) = read_csv(&out.join("thresholds.csv"));
    assert_eq!(h, ["j", "a_j", "c_j"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "1");
    let (h, rows) = read_csv(&out.join("minimizer.csv"));
    assert_eq!(h, ["index", "x_0", "value"]);
    assert_eq!(rows.len(), 64);
    let (_, q) = read_csv(&out.join("quotient.csv"));
    assert!(!q.is_empty());
}

#[test]
fn stripes_inkspots_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.toml", STRIPES);
    let out = dir.path().join("out");
    let o = run("inkspots", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = report(&out)["result"]["run"]["n"].as_u64().unwrap() as usize;
    assert!(n >= 1);

    let (h, rows) = read_csv(&out.join("growth.csv"));
    assert_eq!(&h[..7], ["j", "x_index", "ball_id", "outcome", "count_j", "count_j1", "ratio"]);
    assert!(!rows.is_empty());

    let (_, th) = read_csv(&out.join("thresholds.csv"));
    assert_eq!(th.len(), n + 1);
    assert!(th.iter().all(|r| r[1].parse::<f64>().unwrap() > 0.0));

    let (h, curves) = read_csv(&out.join("curves.csv"));
    let col = h.iter().position(|c| c == "min_growth_ratio").unwrap();
    assert_eq!(curves.len(), n + 1);
    let ratios: Vec<f64> = curves[..n].iter().filter_map(|r| r[col].parse().ok()).collect();
    assert!(!ratios.is_empty());
    assert!(ratios.iter().all(|&v| v > 1.0), "{ratios:?}");
    assert_eq!(curves[n][col], "");
}

#[test]
fn misspelled_key_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &STRIPES.replace("s = 0.5", "s = 0.5\nlamda = 1.0"));
    let o = run("coercivity", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["key"], "lamda");
    assert!(err["message"].as_str().unwrap().contains("lamda"));
}

#[test]
fn out_of_range_value_names_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("{STRIPES}\n[solver]\ntol = -1.0\n"));
    let o = run("coercivity", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["key"], "solver.tol");
}

#[test]
fn pipeline_fault_exits_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    // The one-sided kernel has no density constant in one dimension.
    let cfg = write_config(dir.path(), "o.toml", &STRIPES.replace("stripes", "one_sided"));
    let o = run("coercivity", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "precondition");
    // Local mode on a periodic grid.
    let o = run("local", &cfg, &dir.path().join("out2"), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_flag_enters_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", STRIPES);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("check-a1", &cfg, &a, &[]).status.success());
    assert!(run("check-a1", &cfg, &b, &["--seed", "5"]).status.success());
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(rb["reproducibility"]["seed"], 5);
    assert_ne!(ra["reproducibility"]["config_hash"], rb["reproducibility"]["config_hash"]);
    assert_eq!(ra["result"]["report"]["mu_hat"], 0.4);
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f.toml", FRACTIONAL);
    let o = bin()
        .args(["conjecture", "--config"])
        .arg(&cfg)
        .env("COERCIVITY_OUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("root").join("conjecture");
    let (h, rows) = read_csv(&out.join("conjecture.csv"));
    assert_eq!(h, ["r", "ratio", "unit_reference"]);
    assert_eq!(rows.len(), 6);
}

#[test]
fn local_and_diffuse_emit_geometry_and_steps() {
    let dir = tempfile::tempdir().unwrap();
    let local = "[grid]\ndim = 1\ncells = 64\nlength = 4.0\nperiodic = false\n\n[kernel]\nvariant = \"stripes\"\ns = 0.5\nparams = { width = 0.1875 }\n";
    let cfg = write_config(dir.path(), "l.toml", local);
    let out = dir.path().join("local");
    let o = run("local", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["result"]["mode"], "local");
    assert!(r["result"]["rayleigh_min"].as_f64().unwrap() > 0.0);
    let cover: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cover.json")).unwrap()).unwrap();
    assert!(!cover["balls"].as_array().unwrap().is_empty());
    assert!(out.join("chains.json").exists());
    assert!(out.join("smallball.csv").exists());

    let cfg = write_config(dir.path(), "d.toml", &format!("{STRIPES}\n[diffuse]\nsteps = 2\ndump = true\n"));
    let out = dir.path().join("diffuse");
    let o = run("diffuse", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("steps.csv"));
    assert_eq!(rows.len(), 2);
    for j in 0..=2 {
        assert!(out.join(format!("kernel_{j}.bin")).exists());
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("kernel_{j}.json"))).unwrap()).unwrap();
        assert_eq!(side["j"], j);
    }
}

#[test]
fn gallery_reports_every_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.toml", "pipeline = \"gallery\"\n\n[grid]\ndim = 1\ncells = 64\n");
    let out = dir.path().join("g");
    let o = run("gallery", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out.join("gallery.csv"));
    assert_eq!(rows.len(), 5);
    let sound = h.iter().position(|c| c == "sound").unwrap();
    let passes = h.iter().position(|c| c == "passes_a1").unwrap();
    for r in &rows {
        if r[passes] == "true" {
            assert_eq!(r[sound], "true", "{r:?}");
        }
    }
}
