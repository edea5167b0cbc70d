//! Minimum-volume outer ellipsoid `E(P, m)` for the reachable set under per-channel
//! input bounds.
//!
//! For a fixed decay rate `a ∈ (0, 1)` the ellipsoid comes from a determinant
//! maximization over the LMI
//!
//! ```text
//! ⎡ aP − FᵀPF     −FᵀPG         ⎤
//! ⎣ −GᵀPF         (1−a)R − GᵀPG ⎦ ⪰ 0,   P ≻ 0,
//! ```
//!
//! and `a` itself is chosen by a grid sweep.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ellipsoid, InputBounds, LtiSystem};
use crate::sdp::{self, AffineLmi, LmiBuilder, LmiSense, Objective, Problem, SolveStatus, SolverConfig, VarId};

/// Grid of decay rates `start, start+step, …, <= stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: 0.01,
            step: 0.01,
            stop: 0.99,
        }
    }
}

impl GridSpec {
    pub fn new(start: f64, step: f64, stop: f64) -> Result<Self> {
        let g = Self { start, step, stop };
        g.points()?;
        Ok(g)
    }

    /// Parses `start:step:stop`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::validation(
                "grid",
                format!("expected start:step:stop, got '{s}'"),
            ));
        }
        let num = |i: usize| {
            parts[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::validation("grid", format!("'{}': {e}", parts[i])))
        };
        Self::new(num(0)?, num(1)?, num(2)?)
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        let Self { start, step, stop } = *self;
        if !(start.is_finite() && step.is_finite() && stop.is_finite()) || step <= 0.0 {
            return Err(Error::validation(
                "grid",
                "start, step and stop must be finite with step > 0",
            ));
        }
        let count = ((stop - start) / step + 1e-9).floor();
        if !(1.0..=1e6).contains(&count) {
            return Err(Error::validation("grid", "grid must contain between 2 and 1e6 points"));
        }
        // Rounded to 12 decimals so that 0.01·k prints as written.
        let pts: Vec<f64> = (0..=count as usize)
            .map(|i| ((start + step * i as f64) * 1e12).round() / 1e12)
            .collect();
        if pts.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::validation("grid", "every grid point must lie in (0, 1)"));
        }
        Ok(pts)
    }
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub a: f64,
    pub status: SolveStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<f64>,
}

/// Solution at a single decay rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPoint {
    pub a: f64,
    pub status: SolveStatus,
    pub shape: Option<DMatrix<f64>>,
    pub volume: Option<f64>,
}

impl AnalysisPoint {
    fn entry(&self) -> GridEntry {
        GridEntry {
            a: self.a,
            status: self.status,
            volume: self.volume,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    /// Shape `P` of the bounding ellipsoid `E(P, m)`.
    pub shape: DMatrix<f64>,
    /// Level `m` (number of inputs).
    pub level: f64,
    pub a_star: f64,
    pub volume: f64,
    pub log: Vec<GridEntry>,
}

impl AnalysisResult {
    pub fn ellipsoid(&self) -> Ellipsoid {
        Ellipsoid::new(self.shape.clone(), self.level).expect("certified shape is positive definite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub grid: GridSpec,
    pub solver: SolverConfig,
    /// Worker threads for the grid sweep; results do not depend on this.
    pub threads: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            solver: SolverConfig::default(),
            threads: 1,
        }
    }
}

fn check_a(a: f64) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(
            "a",
            format!("decay rate must lie in (0, 1), got {a}"),
        ))
    }
}

fn check_weight(sys: &LtiSystem, weight: &DMatrix<f64>) -> Result<()> {
    if weight.shape() != (sys.m(), sys.m()) {
        return Err(Error::dim(
            "input weight",
            format!("{0}x{0}", sys.m()),
            format!("{}x{}", weight.nrows(), weight.ncols()),
        ));
    }
    Ok(())
}

/// The `(n+m)×(n+m)` analysis LMI in the symmetric variable `p` of `problem`.
pub fn assemble_analysis_lmi(
    problem: &Problem,
    p: VarId,
    sys: &LtiSystem,
    weight: &DMatrix<f64>,
    a: f64,
) -> Result<AffineLmi> {
    check_a(a)?;
    check_weight(sys, weight)?;
    let (n, m) = (sys.n(), sys.m());
    if problem.variable(p).dim != n {
        return Err(Error::dim("P", n, problem.variable(p).dim));
    }
    let f = sys.f();
    let g = sys.g();
    let ft = f.transpose();
    let gt = g.transpose();
    let mut b = LmiBuilder::new("analysis", n + m, LmiSense::Psd);
    b.constant_block(n, n, &(weight * (1.0 - a)))?;
    b.var_block(problem, p, 0, 0, |e| e * a - &ft * e * f)?;
    b.var_block(problem, p, 0, n, |e| -(&ft * e * g))?;
    b.var_block(problem, p, n, n, |e| -(&gt * e * g))?;
    Ok(b.build())
}

/// Determinant-maximization problem at a fixed `a`; returns the problem and its `P`.
pub fn analysis_problem(sys: &LtiSystem, weight: &DMatrix<f64>, a: f64) -> Result<(Problem, VarId)> {
    let mut problem = Problem::new();
    let p = problem.add_variable("P", sys.n(), sdp::Structure::Symmetric);
    let lmi = assemble_analysis_lmi(&problem, p, sys, weight, a)?;
    problem.add_constraint(lmi);
    problem.add_positive(p, LmiSense::Pd)?;
    problem.set_objective(Objective::NegLogDet(p));
    Ok((problem, p))
}

pub(crate) fn solve_weighted_at(
    sys: &LtiSystem,
    weight: &DMatrix<f64>,
    a: f64,
    solver: &SolverConfig,
) -> Result<AnalysisPoint> {
    let (problem, p) = analysis_problem(sys, weight, a)?;
    let report = sdp::solve(&problem, solver)?;
    if !report.is_optimal() {
        return Ok(AnalysisPoint {
            a,
            status: report.status,
            shape: None,
            volume: None,
        });
    }
    let shape = report.variable(p).clone();
    match Ellipsoid::new(shape.clone(), sys.m() as f64) {
        Ok(e) => Ok(AnalysisPoint {
            a,
            status: SolveStatus::Optimal,
            volume: Some(e.volume()),
            shape: Some(e.shape().clone()),
        }),
        Err(_) => Ok(AnalysisPoint {
            a,
            status: SolveStatus::NumericalFailure,
            shape: None,
            volume: None,
        }),
    }
}

/// Minimum-volume `E(P, m)` for a fixed decay rate `a`.
pub fn solve_analysis_at(
    sys: &LtiSystem,
    bounds: &InputBounds,
    a: f64,
    solver: &SolverConfig,
) -> Result<AnalysisPoint> {
    bounds.check_dim(sys)?;
    solve_weighted_at(sys, &bounds.weight(), a, solver)
}

pub(crate) fn sweep<T: Send>(
    points: &[f64],
    threads: usize,
    f: impl Fn(f64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if threads <= 1 {
        return points.iter().map(|&a| f(a)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    // `collect` on an indexed parallel iterator preserves grid order.
    pool.install(|| points.par_iter().map(|&a| f(a)).collect())
}

/// Picks the minimum-volume feasible point; ties within `1e−9` relative go to the
/// smallest `a`.
pub(crate) fn select_min_volume(points: &[AnalysisPoint]) -> Option<&AnalysisPoint> {
    let mut best: Option<&AnalysisPoint> = None;
    for p in points.iter().filter(|p| p.volume.is_some()) {
        let v = p.volume.unwrap();
        match best {
            Some(b) if v >= b.volume.unwrap() * (1.0 - 1e-9) => {}
            _ => best = Some(p),
        }
    }
    best
}

pub(crate) fn grid_search_weighted(
    sys: &LtiSystem,
    weight: &DMatrix<f64>,
    opts: &AnalysisOptions,
) -> Result<AnalysisResult> {
    check_weight(sys, weight)?;
    let grid = opts.grid.points()?;
    let points = sweep(&grid, opts.threads, |a| solve_weighted_at(sys, weight, a, &opts.solver))?;
    let best = select_min_volume(&points).ok_or(Error::AllInfeasible {
        first: grid[0],
        last: *grid.last().unwrap(),
        points: grid.len(),
    })?;
    Ok(AnalysisResult {
        shape: best.shape.clone().unwrap(),
        level: sys.m() as f64,
        a_star: best.a,
        volume: best.volume.unwrap(),
        log: points.iter().map(AnalysisPoint::entry).collect(),
    })
}

/// Sweeps the decay rate over the grid and returns the minimum-volume certified ellipsoid.
pub fn grid_search(sys: &LtiSystem, bounds: &InputBounds, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    bounds.check_dim(sys)?;
    grid_search_weighted(sys, &bounds.weight(), opts)
}

/// Common-bound shortcut: solve once with `R = I` and rescale `P̂ / γ`.
pub fn common_bound_analysis(sys: &LtiSystem, gamma: f64, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::validation(
            "gamma",
            format!("common bound must be positive, got {gamma}"),
        ));
    }
    let unit = grid_search_weighted(sys, &DMatrix::identity(sys.m(), sys.m()), opts)?;
    Ok(rescale(unit, gamma, sys.n()))
}

/// `E(P̂, m)` → `E(P̂/γ, m)`.
pub(crate) fn rescale(mut unit: AnalysisResult, gamma: f64, n: usize) -> AnalysisResult {
    let factor = gamma.powf(n as f64 / 2.0);
    unit.shape /= gamma;
    unit.volume *= factor;
    for e in &mut unit.log {
        if let Some(v) = e.volume.as_mut() {
            *v *= factor;
        }
    }
    unit
}

/// Smallest eigenvalue of the analysis LMI at `(P, a)`.
pub fn certify(sys: &LtiSystem, bounds: &InputBounds, shape: &DMatrix<f64>, a: f64) -> Result<f64> {
    let (problem, p) = analysis_problem(sys, &bounds.weight(), a)?;
    let values = problem.pack(&[(p, shape)]);
    sdp::worst_violation(&problem, &values)
}
