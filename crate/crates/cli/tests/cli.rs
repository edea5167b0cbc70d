use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ellreach"))
}

fn problem(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ellreach")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses the bracketed list after `key = ` on a stdout line.
fn list_after(out: &str, key: &str) -> Vec<f64> {
    let start = out.find(key).expect(key) + key.len();
    let rest = &out[start..];
    let open = rest.find('[').unwrap();
    let close = rest.find(']').unwrap();
    rest[open + 1..close]
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().unwrap())
        .collect()
}

#[test]
fn analyze_two_state() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a.toml");
    let o = run(&["analyze", "-i", s(&problem("two-state.toml")), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("a* = 0.64"), "{}", stdout(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("kind = \"analysis\""));
    assert!(text.contains("config_hash"));
}

#[test]
fn zero_bound_is_rejected() {
    let dir = TempDir::new().unwrap();
    let p = write(
        &dir,
        "g0.toml",
        "[system]\nF = [[0.5]]\nG = [[1.0]]\n[bounds]\ngamma = [0.0]\n",
    );
    let o = run(&["analyze", "-i", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma[0]"), "{}", stderr(&o));
}

#[test]
fn unstable_system_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let p = write(
        &dir,
        "f2.toml",
        "[system]\nF = [[2.0]]\nG = [[1.0]]\n[bounds]\ngamma = 1.0\n",
    );
    let o = run(&["analyze", "-i", s(&p), "--grid", "0.1:0.1:0.9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["analyze", "-i", "/nonexistent/p.toml"]).status.code(), Some(1));
}

#[test]
fn synthesize_scalar() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.toml");
    let o = run(&["synthesize", "-i", s(&problem("scalar.toml")), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = list_after(&stdout(&o), "gamma_hat =");
    assert_eq!(g.len(), 1);
    assert!((g[0] - 0.25).abs() < 1e-6, "{g:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("kind = \"synthesis\""));
}

#[test]
fn synthesize_two_state_equal_bounds() {
    let o = run(&["synthesize", "-i", s(&problem("two-state.toml")), "--equal-bounds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = list_after(&stdout(&o), "gamma_hat =");
    assert_eq!(g.len(), 2);
    assert_eq!(g[0], g[1]);
    assert!((g[0] - 5.9).abs() < 0.03 * 5.9, "{g:?}");
}

#[test]
fn synthesize_without_danger_set() {
    let dir = TempDir::new().unwrap();
    let empty = write(
        &dir,
        "e.toml",
        "danger = []\n[system]\nF = [[0.5]]\nG = [[1.0]]\n[bounds]\ngamma = 1.0\n",
    );
    let o = run(&["synthesize", "-i", s(&empty)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(list_after(&stdout(&o), "gamma_hat ="), vec![1.0]);

    let missing = write(
        &dir,
        "n.toml",
        "[system]\nF = [[0.5]]\nG = [[1.0]]\n[bounds]\ngamma = 1.0\n",
    );
    let o = run(&["synthesize", "-i", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("danger"));
}

#[test]
fn sample_is_reproducible_and_safe() {
    let dir = TempDir::new().unwrap();
    let res = dir.path().join("s.toml");
    let o = run(&["synthesize", "-i", s(&problem("two-state.toml")), "-o", s(&res)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let stats = dir.path().join("stats.toml");
    let common = [
        "--n-traj",
        "200",
        "--horizon",
        "200",
        "--seed",
        "5",
        "--policy",
        "bang-bang",
    ];
    let mut args = vec!["sample", "-r", s(&res), "-o", s(&a), "--stats", s(&stats)];
    args.extend(common);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("containment = 1 "), "{line}");
    assert!(line.contains("danger_violations = 0"), "{line}");

    let mut args = vec!["sample", "-r", s(&res), "-o", s(&b), "--threads", "3"];
    args.extend(common);
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let text = std::fs::read_to_string(&stats).unwrap();
    assert!(text.contains("[monte_carlo]"), "{text}");
}

#[test]
fn sample_needs_a_source() {
    let dir = TempDir::new().unwrap();
    let o = run(&["sample", "-o", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn platoon_crash_and_safe_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p.csv");
    let o = run(&["platoon", "-i", s(&problem("platoon.toml")), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("crash:"), "{}", stdout(&o));
    let header = std::fs::read_to_string(&out).unwrap();
    assert!(header.starts_with("t,d_1,d_2,v_1,v_2,v_3,u_1,u_2,u_3,crash"));

    let o = run(&[
        "platoon",
        "-i",
        s(&problem("platoon.toml")),
        "-o",
        s(&out),
        "--gamma",
        "0.028,0.047,0.028",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("no crash over 200 s"), "{}", stdout(&o));
}

#[test]
fn ellipse_outline() {
    let dir = TempDir::new().unwrap();
    let res = dir.path().join("a.toml");
    assert!(run(&["analyze", "-i", s(&problem("two-state.toml")), "-o", s(&res)])
        .status
        .success());
    let out = dir.path().join("e.csv");
    let o = run(&[
        "ellipse",
        "-r",
        s(&res),
        "-o",
        s(&out),
        "--plane",
        "1,2",
        "--samples",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x_1,x_2");
    assert_eq!(lines.len(), 1 + 33);
    assert_eq!(lines[1], lines[33]);

    let o = run(&["ellipse", "-r", s(&res), "-o", s(&out), "--plane", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["ellipse", "-r", s(&res), "-o", s(&out), "--plane", "1,3"]);
    assert_eq!(o.status.code(), Some(1));
}
