//! End-to-end acceptance checks. Run with `--nocapture` to see one line per criterion.

use std::time::{Duration, Instant};

use ellreach::analysis::{self, AnalysisOptions, AnalysisResult};
use ellreach::linalg;
use ellreach::platoon::{self, AttackSpec, PlatoonParams, Simulation};
use ellreach::reach::{self, Policy, SampleConfig};
use ellreach::sdp::SolverConfig;
use ellreach::synthesis::{self, SynthesisOptions, SynthesisResult};
use ellreach::{DangerSet, Ellipsoid, InputBounds, LtiSystem, Sense};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        println!("[{}] criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, detail));
    }
}

fn within_rel(got: &[f64], want: &[f64], tol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol * w.abs())
}

fn within_abs(got: &[f64], want: &[f64], tol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol)
}

fn two_state() -> LtiSystem {
    LtiSystem::from_rows(
        &[vec![0.84, 0.23], vec![-0.47, 0.12]],
        &[vec![0.07, 0.3], vec![0.23, 0.1]],
    )
    .unwrap()
}

fn scalar() -> LtiSystem {
    LtiSystem::from_rows(&[vec![0.5]], &[vec![1.0]]).unwrap()
}

fn d1() -> DangerSet {
    DangerSet::from_raw(&[(vec![0.1, 1.0], 3.0, Sense::AtLeast)]).unwrap()
}

fn d12() -> DangerSet {
    DangerSet::from_raw(&[
        (vec![0.1, 1.0], 3.0, Sense::AtLeast),
        (vec![-2.0, 1.0], -2.0 * 5f64.sqrt(), Sense::AtMost),
    ])
    .unwrap()
}

fn synth_opts() -> SynthesisOptions {
    SynthesisOptions {
        threads: 0,
        ..Default::default()
    }
}

fn analysis_opts() -> AnalysisOptions {
    AnalysisOptions {
        threads: 0,
        ..Default::default()
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Either a half-space is touched or the bounds sit at the physical limit.
fn active_or_saturated(res: &SynthesisResult, danger: &DangerSet, gamma: &[f64]) -> bool {
    let touching = danger.halfspaces().iter().any(|h| {
        let cyc = (h.normal.transpose() * &res.y * &h.normal)[(0, 0)];
        cyc >= h.offset * h.offset / res.level - 1e-6
    });
    let saturated = res.r_hat.iter().zip(gamma).all(|(r, g)| (r - 1.0 / g).abs() <= 1e-9);
    touching || saturated
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    linalg::min_eig(m).unwrap() >= -1e-10 * (1.0 + linalg::max_abs(m))
}

fn synthesis_block(sys: &LtiSystem, y: &DMatrix<f64>, r: &DMatrix<f64>, a: f64) -> DMatrix<f64> {
    let (n, m) = (sys.n(), sys.m());
    let mut q = DMatrix::zeros(2 * n + m, 2 * n + m);
    q.view_mut((0, 0), (n, n)).copy_from(&(y * a));
    q.view_mut((n, n), (m, m)).copy_from(&(r * (1.0 - a)));
    let fy = sys.f() * y;
    q.view_mut((n + m, 0), (n, n)).copy_from(&fy);
    q.view_mut((0, n + m), (n, n)).copy_from(&fy.transpose());
    q.view_mut((n + m, n), (n, m)).copy_from(sys.g());
    q.view_mut((n, n + m), (m, n)).copy_from(&sys.g().transpose());
    q.view_mut((n + m, n + m), (n, n)).copy_from(y);
    q
}

fn analysis_block(sys: &LtiSystem, p: &DMatrix<f64>, r: &DMatrix<f64>, a: f64) -> DMatrix<f64> {
    let (n, m) = (sys.n(), sys.m());
    let (f, g) = (sys.f(), sys.g());
    let mut q = DMatrix::zeros(n + m, n + m);
    q.view_mut((0, 0), (n, n)).copy_from(&(p * a - f.transpose() * p * f));
    let off = -(f.transpose() * p * g);
    q.view_mut((0, n), (n, m)).copy_from(&off);
    q.view_mut((n, 0), (m, n)).copy_from(&off.transpose());
    q.view_mut((n, n), (m, m))
        .copy_from(&(r * (1.0 - a) - g.transpose() * p * g));
    q
}

/// Samples `Y` around a feasible synthesis point so both verdicts show up.
fn schur_agreement(
    sys: &LtiSystem,
    centre: &DMatrix<f64>,
    r_hat: &[f64],
    a: f64,
    samples: usize,
) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r0 = DMatrix::from_diagonal(&DVector::from_column_slice(r_hat));
    let n = sys.n();
    let (mut agree, mut feasible, mut infeasible) = (0, 0, 0);
    for _ in 0..samples {
        let scale = rng.random_range(0.5..1.5);
        let e = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
        let y = centre * scale + &e * e.transpose() * linalg::max_abs(centre) * rng.random_range(0.0..0.2);
        let r = &r0 * rng.random_range(0.8..1.5);
        let big = is_psd(&synthesis_block(sys, &y, &r, a));
        let small = is_psd(&analysis_block(sys, &y.clone().try_inverse().unwrap(), &r, a));
        agree += usize::from(big == small);
        if small {
            feasible += 1;
        } else {
            infeasible += 1;
        }
    }
    (agree, feasible, infeasible)
}

struct Case {
    name: &'static str,
    sys: LtiSystem,
    bounds: InputBounds,
    ellipsoid: Ellipsoid,
    danger: Option<DangerSet>,
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };
    let mut cases: Vec<Case> = Vec::new();
    let mut synth: Vec<(&str, SynthesisResult, DangerSet, Vec<f64>, LtiSystem)> = Vec::new();
    let sys = two_state();
    let gamma = InputBounds::new(vec![8.0, 10.0]).unwrap();

    let base = analysis::grid_search(&sys, &gamma, &analysis_opts()).unwrap();
    cases.push(Case {
        name: "two-state analysis",
        sys: sys.clone(),
        bounds: gamma.clone(),
        ellipsoid: base.ellipsoid(),
        danger: None,
    });

    // 1
    let t = Instant::now();
    let one = synthesis::synthesize(&sys, &gamma, &d1(), &SynthesisOptions::default()).unwrap();
    let elapsed = t.elapsed();
    report.record(
        1,
        within_rel(&one.gamma_hat, &[7.54, 5.14], 0.05) && elapsed <= Duration::from_secs(60),
        format!(
            "single half-space gamma_hat = {} (want [7.54, 5.14] +-5%), {:.2} s single-threaded",
            fmt(&one.gamma_hat),
            elapsed.as_secs_f64()
        ),
    );

    // 2
    let two = synthesis::synthesize(&sys, &gamma, &d12(), &synth_opts()).unwrap();
    report.record(
        2,
        within_rel(&two.gamma_hat, &[1.77, 0.76], 0.05),
        format!(
            "two half-spaces gamma_hat = {} (want [1.77, 0.76] +-5%)",
            fmt(&two.gamma_hat)
        ),
    );

    // 3
    let eq = synthesis::equal_bound_synthesis(&sys, &gamma, &d1(), &synth_opts()).unwrap();
    report.record(
        3,
        within_rel(&eq.gamma_hat, &[5.9, 5.9], 0.03),
        format!("equal bound gamma_hat = {} (want 5.9 +-3%)", fmt(&eq.gamma_hat)),
    );

    // 4
    let params = PlatoonParams::three_vehicle();
    let psys = platoon::build_matrices(&params).unwrap();
    let pdanger = platoon::danger_set(&params).unwrap();
    let pgamma = InputBounds::new(platoon::PHYSICAL_BOUNDS.to_vec()).unwrap();
    let plat = synthesis::synthesize(&psys, &pgamma, &pdanger, &synth_opts()).unwrap();
    report.record(
        4,
        within_abs(&plat.gamma_hat, &[0.03, 0.05, 0.03], 0.02),
        format!(
            "platoon gamma_hat = {} (want [0.03, 0.05, 0.03] +-0.02)",
            fmt(&plat.gamma_hat)
        ),
    );

    // 7
    let sc = scalar();
    let unit = InputBounds::new(vec![1.0]).unwrap();
    let sa = analysis::grid_search(&sc, &unit, &analysis_opts()).unwrap();
    let p = sa.shape[(0, 0)];
    let sd = DangerSet::from_raw(&[(vec![1.0], 1.0, Sense::AtLeast)]).unwrap();
    let se = synthesis::equal_bound_synthesis(&sc, &unit, &sd, &synth_opts()).unwrap();
    let scalar_ok = (p - 0.25).abs() <= 0.01 * 0.25
        && (sa.a_star - 0.5).abs() < 1e-12
        && (se.gamma_hat[0] - 0.25).abs() <= 0.01 * 0.25;
    cases.push(Case {
        name: "scalar analysis",
        sys: sc.clone(),
        bounds: unit.clone(),
        ellipsoid: sa.ellipsoid(),
        danger: None,
    });

    for (name, res, danger, g, s) in [
        (
            "two-state single half-space",
            one,
            d1(),
            gamma.gamma().to_vec(),
            sys.clone(),
        ),
        (
            "two-state two half-spaces",
            two,
            d12(),
            gamma.gamma().to_vec(),
            sys.clone(),
        ),
        ("two-state equal bound", eq, d1(), gamma.gamma().to_vec(), sys.clone()),
        ("platoon", plat, pdanger.clone(), pgamma.gamma().to_vec(), psys.clone()),
        ("scalar equal bound", se, sd.clone(), unit.gamma().to_vec(), sc.clone()),
    ] {
        cases.push(Case {
            name,
            sys: s.clone(),
            bounds: res.bounds(),
            ellipsoid: res.ellipsoid(),
            danger: Some(danger.clone()),
        });
        synth.push((name, res, danger, g, s));
    }

    // 5
    let t = Instant::now();
    let mut mc_ok = true;
    let mut excess = f64::NEG_INFINITY;
    let mut details = Vec::new();
    for (k, case) in cases.iter().enumerate() {
        let mut cfg = SampleConfig::new(10_000, 1_000, 100 + k as u64, Policy::Mixed(0.5));
        cfg.threads = 0;
        let s = reach::survey(
            &case.sys,
            &case.bounds,
            &cfg,
            std::slice::from_ref(&case.ellipsoid),
            case.danger.as_ref(),
        )
        .unwrap();
        let c = s.containment[0];
        excess = excess.max((c.max_level - 1.0) * case.ellipsoid.level());
        mc_ok &= c.fraction == 1.0 && s.violations == 0;
        details.push(format!(
            "{}: {}/{} inside, {} violations",
            case.name, c.inside, c.total, s.violations
        ));
    }
    let mc_time = t.elapsed();
    for d in &details {
        println!("       {d}");
    }
    report.record(
        5,
        mc_ok && mc_time <= Duration::from_secs(300),
        format!(
            "10000 x 1000 sampling for {} results, {:.1} s",
            cases.len(),
            mc_time.as_secs_f64()
        ),
    );

    // 6
    let sim = Simulation::new(params.clone()).unwrap();
    let start = platoon::default_initial(&params);
    let attack = AttackSpec::standard(psys.m());
    let safe = &synth.iter().find(|s| s.0 == "platoon").unwrap().1;
    let crash = sim.run(&pgamma, Some(&attack), 200.0, &start).unwrap().crash;
    let calm = sim.run(&safe.bounds(), Some(&attack), 200.0, &start).unwrap();
    let mut entries = 0;
    let mut random_min_gap = f64::INFINITY;
    let origin = DVector::zeros(psys.n());
    let horizon = 2000.0 * params.dt;
    for seed in 0..100u64 {
        let hold = 1 + (seed as usize * 7) % 40;
        let spec = AttackSpec::random(seed, 100.0, hold, 0.0);
        let tr = sim.run(&safe.bounds(), Some(&spec), horizon, &origin).unwrap();
        entries += tr.states.iter().filter(|x| pdanger.contains(x)).count();
        entries += usize::from(tr.crash.is_some());
        random_min_gap = random_min_gap.min(tr.min_gap());
    }
    let crash_12 = crash.as_ref().is_some_and(|c| c.vehicles == (1, 2));
    report.record(
        6,
        crash_12 && calm.crash.is_none() && entries == 0,
        format!(
            "original bounds: {}; safe bounds: {} (min gap {:.3} m); 100 random attacks: {entries} danger entries, min gap {random_min_gap:.3} m",
            crash.map_or("no crash".into(), |c| format!("crash {:?} at {} s", c.vehicles, c.time)),
            if calm.crash.is_none() { "no crash over 200 s" } else { "crash" },
            calm.min_gap()
        ),
    );

    report.record(
        7,
        scalar_ok,
        format!(
            "scalar p = {p:.6} at a* = {}, equal-bound gamma_hat = {:.6}",
            sa.a_star,
            synth.last().unwrap().1.gamma_hat[0]
        ),
    );

    // 8
    let mut parts = Vec::new();
    let mut ok = true;

    let first = &synth[0].1;
    let (agree, feas, infeas) = schur_agreement(&sys, &first.y, &first.r_hat, first.a_star, 100);
    let schur_ok = agree == 100 && feas > 0 && infeas > 0;
    ok &= schur_ok;
    parts.push(format!("(a) Schur {agree}/100 agree ({feas} feasible)"));

    let four = InputBounds::uniform(2, 4.0).unwrap();
    let direct = analysis::grid_search(&sys, &four, &analysis_opts()).unwrap();
    let scaled = analysis::common_bound_analysis(&sys, 4.0, &analysis_opts()).unwrap();
    let rel = relative_gap(&direct.shape, &scaled.shape);
    let s1 = analysis::grid_search(&sc, &unit, &analysis_opts()).unwrap();
    let s4 = analysis::grid_search(&sc, &InputBounds::new(vec![4.0]).unwrap(), &analysis_opts()).unwrap();
    let rel_scalar = relative_gap(&(s1.shape / 4.0), &s4.shape);
    let scaling_ok = rel <= 1e-6 && rel_scalar <= 1e-6;
    ok &= scaling_ok;
    parts.push(format!("(b) scaling rel err {:.1e}", rel.max(rel_scalar)));

    for case in cases.iter().filter(|c| c.danger.is_none()) {
        let mut cfg = SampleConfig::new(2_000, 1_000, 5, Policy::BangBang);
        cfg.threads = 0;
        let s = reach::survey(
            &case.sys,
            &case.bounds,
            &cfg,
            std::slice::from_ref(&case.ellipsoid),
            None,
        )
        .unwrap();
        excess = excess.max((s.containment[0].max_level - 1.0) * case.ellipsoid.level());
    }
    ok &= excess <= 1e-6;
    parts.push(format!("(c) max V_k - m = {excess:.2e}"));

    let aos = synth.iter().all(|(_, r, d, g, _)| {
        active_or_saturated(r, d, g)
            || r.gamma_hat
                .iter()
                .all(|x| (x - g.iter().cloned().fold(f64::INFINITY, f64::min)).abs() < 1e-9)
    });
    ok &= aos;
    parts.push(format!(
        "(d) activity-or-saturation {}",
        if aos { "holds" } else { "violated" }
    ));

    let again = synthesis::synthesize(
        &sys,
        &gamma,
        &d1(),
        &SynthesisOptions {
            threads: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let bitwise =
        same_bits(&again.gamma_hat, &synth[0].1.gamma_hat) && same_bits(again.y.as_slice(), synth[0].1.y.as_slice());
    let p1 = analysis::solve_analysis_at(&sys, &gamma, 0.64, &SolverConfig::default()).unwrap();
    let p2 = analysis::solve_analysis_at(&sys, &gamma, 0.64, &SolverConfig::default()).unwrap();
    let bitwise = bitwise && same_bits(p1.shape.unwrap().as_slice(), p2.shape.unwrap().as_slice());
    ok &= bitwise;
    parts.push(format!(
        "(e) repeated solves {}",
        if bitwise { "bitwise identical" } else { "differ" }
    ));
    report.record(8, ok, parts.join("; "));

    let cross: Vec<String> = synth
        .iter()
        .map(|(name, r, d, _, s)| {
            let re = analysis::grid_search(s, &r.bounds(), &analysis_opts()).unwrap();
            format!("{name} {:.2e}", min_distance(&re, d))
        })
        .collect();
    println!(
        "       re-analysis with gamma_hat, min half-space distance: {}",
        cross.join(", ")
    );

    let failed: Vec<usize> = report.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    linalg::max_abs(&(a - b)) / linalg::max_abs(a)
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn min_distance(res: &AnalysisResult, danger: &DangerSet) -> f64 {
    let e = res.ellipsoid();
    danger
        .halfspaces()
        .iter()
        .map(|h| e.hyperplane_distance(&h.normal, h.offset).unwrap())
        .fold(f64::INFINITY, f64::min)
}
