use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
seed = 3

[model]
dim = 1
lambdas = [1.0]
kind = "schrodinger_barrier"

[scenario]
epsilon = 0.1

[sweep]
h = [0.1]
"#;

fn run(cmd: &str, config: &str, dir: &Path) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_hyperloc"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

/// File contents without the provenance line.
fn body(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    assert!(head.starts_with("# hyperloc "), "{head}");
    rest.to_string()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap()
}

#[test]
fn lattice_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("lattice", &format!("{BASE}\n[lattice]\nbound = 0.2\n"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = body(&dir.path().join("out/lattice.csv"));
    assert_eq!(b, "z_re,z_im,alpha_0\n0,-0.05,0\n0,-0.15,1\n");
}

#[test]
fn report_cites_config_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("model", BASE, dir.path());
    assert!(out.status.success());
    let r = report(dir.path());
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["seed"], 3);
    assert_eq!(r["config_sha256"].as_str().unwrap().len(), 64);
    let head = fs::read_to_string(dir.path().join("out/eigenvalues.csv")).unwrap();
    assert!(head.contains(r["config_sha256"].as_str().unwrap()));
    let ev: Vec<f64> = r["results"]["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((ev[0] + 1.0).abs() < 1e-10 && (ev[1] - 1.0).abs() < 1e-10);
}

#[test]
fn negative_lambda_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("lattice", &BASE.replace("[1.0]", "[-1.0]"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.lambdas[0]"), "{err}");
}

#[test]
fn missing_config_is_a_validation_failure() {
    let out = Command::new(env!("CARGO_BIN_EXE_hyperloc")).arg("lattice").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn escaping_trajectory_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{BASE}\n[flow]\nx = [0.1]\nxi = [0.5]\nt_end = 40.0\n");
    let out = run("flow", &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3));
    let r = report(dir.path());
    assert_eq!(r["error"]["kind"], "domain_escape");
}

#[test]
fn transition_runs_are_deterministic() {
    let cfg = format!(
        "{BASE}\n[transition]\ntargets = [{{ x = [-0.3] }}, {{ x = [0.25] }}]\n\n",
    )
    .replace("h = [0.1]", "h = [0.1, 0.05]\nz_over_h = [[0.0, 0.0], [0.3, -0.2], [0.0, -0.5]]");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run("transition", &cfg, a.path());
    let ob = Command::new(env!("CARGO_BIN_EXE_hyperloc"))
        .args(["transition", "--jobs", "2", "--config"])
        .arg(a.path().join("run.toml"))
        .arg("--out")
        .arg(b.path().join("out"))
        .output()
        .unwrap();
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(ob.status.success());
    for f in ["d0.csv", "j.csv"] {
        assert_eq!(body(&a.path().join("out").join(f)), body(&b.path().join("out").join(f)));
    }
    // z = -ih/2 is the first pole
    let d0 = body(&a.path().join("out/d0.csv"));
    assert_eq!(d0.lines().filter(|l| l.ends_with(",true,pole")).count(), 4);
}

#[test]
fn verify_reports_half_transmission() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("verify", BASE, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("|T|^2(z=0) = ")).unwrap();
    let t2: f64 = line["|T|^2(z=0) = ".len()..].split_whitespace().next().unwrap().parse().unwrap();
    assert!((t2 - 0.5).abs() < 1e-6, "{line}");
    assert_eq!(report(dir.path())["results"]["lines"][0], line);
    let res = body(&dir.path().join("out/resonances.csv"));
    assert_eq!(res.lines().count(), 6);
}

#[test]
fn book_config_reference_parses() {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../book/src/config.md")).unwrap();
    let start = text.find("```toml\n").unwrap() + "```toml\n".len();
    let toml = &text[start..start + text[start..].find("```").unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let out = run("lattice", toml, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/lattice_h1.csv").exists());
}
