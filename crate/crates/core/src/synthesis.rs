//! Artificial actuator bounds that keep the reachable-set ellipsoid out of a union of
//! dangerous half-spaces.
//!
//! Per-channel bounds come from minimizing `tr(R̂)` over `(Y, R̂)` subject to
//!
//! ```text
//! ⎡ aY   0        YFᵀ ⎤
//! ⎢ 0    (1−a)R̂   Gᵀ  ⎥ ⪰ 0,   R̂ ≥ R,   cᵢᵀYcᵢ <= bᵢ²/m,   Y ≻ 0,
//! ⎣ FY   G        Y   ⎦
//! ```
//!
//! with `γ̂ᵢ = 1/r̂ᵢ` and ellipsoid `E(Y⁻¹, m)`. Equal bounds come from rescaling the
//! unit-weight analysis ellipsoid until it touches the nearest half-space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisOptions, AnalysisPoint, GridSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DangerSet, Ellipsoid, InputBounds, LtiSystem};
use crate::sdp::{
    self, AffineLmi, LmiBuilder, LmiSense, Objective, Problem, SolveStatus, SolverConfig, Structure, TraceTerm, VarId,
};

/// Tolerance on `cᵢᵀYcᵢ` relative to `bᵢ²/m` for reporting a half-space as active.
pub const ACTIVE_TOL: f64 = 1e-6;

/// Safety margin accepted by the post-solve check on hyperplane distances.
pub const DISTANCE_TOL: f64 = 1e-6;

/// Default relative weight of `tr(Y)` in the objective.
pub const Y_WEIGHT: f64 = 1e-6;

/// How the decay rate used for synthesis is picked from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ASelection {
    /// The minimum-volume analysis rate of the original bounds. Other feasible rates
    /// are tried in order of increasing analysis volume if synthesis fails there.
    #[default]
    AnalysisOptimal,
    /// The rate whose synthesized `E(Y⁻¹, m)` has maximum volume; ties go to the
    /// largest `Σγ̂ᵢ`, then the smallest `a`.
    MaxVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub threads: usize,
    pub selection: ASelection,
    /// Weight of `tr(Y)` next to `tr(R̂)`, relative to `tr(R) / maxᵢ(bᵢ²/m)`. Directions
    /// of `Y` no half-space constrains are otherwise free, which leaves the optimum
    /// unbounded; a small weight picks the tightest such `Y` without moving `R̂`.
    pub y_weight: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            solver: SolverConfig::default(),
            threads: 1,
            selection: ASelection::default(),
            y_weight: Y_WEIGHT,
        }
    }
}

impl SynthesisOptions {
    fn analysis(&self) -> AnalysisOptions {
        AnalysisOptions {
            grid: self.grid,
            solver: self.solver.clone(),
            threads: self.threads,
        }
    }
}

/// One synthesis solve at a fixed decay rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisPoint {
    pub a: f64,
    pub status: SolveStatus,
    pub y: Option<DMatrix<f64>>,
    pub r_hat: Option<Vec<f64>>,
}

impl SynthesisPoint {
    fn failed(a: f64, status: SolveStatus) -> Self {
        Self {
            a,
            status,
            y: None,
            r_hat: None,
        }
    }

    fn volume(&self, m: usize) -> Option<f64> {
        let y = self.y.as_ref()?;
        let det = y.determinant();
        (det > 0.0)
            .then(|| crate::model::unit_ball_volume(y.nrows()) * (m as f64).powf(y.nrows() as f64 / 2.0) * det.sqrt())
    }

    fn gamma_sum(&self) -> Option<f64> {
        Some(self.r_hat.as_ref()?.iter().map(|r| 1.0 / r).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisEntry {
    pub a: f64,
    pub status: SolveStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub gamma_hat: Vec<f64>,
    /// `Y = P⁻¹` of the safe ellipsoid `E(Y⁻¹, m)`.
    pub y: DMatrix<f64>,
    pub r_hat: Vec<f64>,
    pub a_star: f64,
    pub level: f64,
    /// Indices of half-spaces the ellipsoid touches.
    pub active: Vec<usize>,
    /// Signed distance from the ellipsoid to each half-space.
    pub distances: Vec<f64>,
    pub volume: f64,
    pub log: Vec<SynthesisEntry>,
}

impl SynthesisResult {
    pub fn ellipsoid(&self) -> Ellipsoid {
        Ellipsoid::new(
            shape_from_y(&self.y).expect("certified Y is positive definite"),
            self.level,
        )
        .expect("certified Y is positive definite")
    }

    pub fn bounds(&self) -> InputBounds {
        InputBounds::new(self.gamma_hat.clone()).expect("synthesized bounds are positive")
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

fn check_danger(sys: &LtiSystem, danger: &DangerSet) -> Result<()> {
    danger.check_dim(sys.n())
}

fn shape_from_y(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = linalg::cholesky(&linalg::sym(y)).ok_or_else(|| Error::Numerical("Y is not positive definite".into()))?;
    Ok(linalg::sym(&ch.inverse()))
}

/// The `(2n+m)×(2n+m)` synthesis LMI in the symmetric `y` and diagonal `r_hat`.
pub fn assemble_synthesis_lmi(problem: &Problem, y: VarId, r_hat: VarId, sys: &LtiSystem, a: f64) -> Result<AffineLmi> {
    check_a(a)?;
    let (n, m) = (sys.n(), sys.m());
    if problem.variable(y).dim != n {
        return Err(Error::dim("Y", n, problem.variable(y).dim));
    }
    if problem.variable(r_hat).dim != m {
        return Err(Error::dim("R̂", m, problem.variable(r_hat).dim));
    }
    let f = sys.f();
    let mut b = LmiBuilder::new("synthesis", 2 * n + m, LmiSense::Psd);
    b.var_block(problem, y, 0, 0, |e| e * a)?;
    b.var_block(problem, r_hat, n, n, |e| e * (1.0 - a))?;
    b.var_block(problem, y, n + m, 0, |e| f * e)?;
    b.constant_block(n + m, n, sys.g())?;
    b.var_block(problem, y, n + m, n + m, |e| e.clone())?;
    Ok(b.build())
}

/// Trace-minimization problem at a fixed `a`; returns the problem with its `Y` and `R̂`.
pub fn synthesis_problem(
    sys: &LtiSystem,
    bounds: &InputBounds,
    danger: &DangerSet,
    a: f64,
    y_weight: f64,
) -> Result<(Problem, VarId, VarId)> {
    if !(y_weight.is_finite() && y_weight >= 0.0) {
        return Err(Error::validation(
            "y_weight",
            format!("must be non-negative, got {y_weight}"),
        ));
    }
    bounds.check_dim(sys)?;
    check_danger(sys, danger)?;
    let mut problem = Problem::new();
    let y = problem.add_variable("Y", sys.n(), Structure::Symmetric);
    let r = problem.add_variable("R_hat", sys.m(), Structure::Diagonal);
    let lmi = assemble_synthesis_lmi(&problem, y, r, sys, a)?;
    problem.add_constraint(lmi);
    problem.add_positive(y, LmiSense::Pd)?;
    let floor: Vec<f64> = bounds.gamma().iter().map(|g| 1.0 / g).collect();
    problem.add_diagonal_lower_bounds(r, &floor)?;
    let level = sys.m() as f64;
    for (i, h) in danger.halfspaces().iter().enumerate() {
        let mut b = LmiBuilder::new(format!("halfspace {i}"), 1, LmiSense::Psd);
        b.constant_block(0, 0, &DMatrix::from_element(1, 1, h.offset * h.offset / level))?;
        b.var_block(&problem, y, 0, 0, |e| {
            DMatrix::from_element(1, 1, -linalg::quad_form(e, &h.normal))
        })?;
        problem.add_constraint(b.build());
    }
    let mut terms = vec![TraceTerm {
        var: r,
        weights: vec![1.0; sys.m()],
    }];
    let widest = danger
        .halfspaces()
        .iter()
        .map(|h| h.offset * h.offset / level)
        .fold(0.0, f64::max);
    if y_weight > 0.0 && widest > 0.0 {
        let eps = y_weight * floor.iter().sum::<f64>() / widest;
        terms.push(TraceTerm {
            var: y,
            weights: vec![eps; sys.n()],
        });
    }
    problem.set_objective(Objective::Trace(terms));
    Ok((problem, y, r))
}

/// Minimizes `tr(R̂)` at a fixed decay rate.
pub fn solve_synthesis_at(
    sys: &LtiSystem,
    bounds: &InputBounds,
    danger: &DangerSet,
    a: f64,
    opts: &SynthesisOptions,
) -> Result<SynthesisPoint> {
    let (problem, y, r) = synthesis_problem(sys, bounds, danger, a, opts.y_weight)?;
    let report = sdp::solve(&problem, &opts.solver)?;
    if !report.is_optimal() {
        return Ok(SynthesisPoint::failed(a, report.status));
    }
    let yv = linalg::sym(report.variable(y));
    if linalg::cholesky(&yv).is_none() {
        return Ok(SynthesisPoint::failed(a, SolveStatus::NumericalFailure));
    }
    let rv = report.variable(r);
    Ok(SynthesisPoint {
        a,
        status: SolveStatus::Optimal,
        y: Some(yv),
        r_hat: Some((0..sys.m()).map(|i| rv[(i, i)]).collect()),
    })
}

/// `γ̂ᵢ = 1/r̂ᵢ`, clamped to the physical bound.
pub fn extract_bounds(r_hat: &[f64], bounds: &InputBounds) -> Result<Vec<f64>> {
    r_hat
        .iter()
        .zip(bounds.gamma())
        .enumerate()
        .map(|(i, (&r, &g))| {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Numerical(format!("r_hat[{i}] = {r} is not positive")));
            }
            Ok((1.0 / r).min(g))
        })
        .collect()
}

fn entry(p: &SynthesisPoint, bounds: &InputBounds, m: usize) -> SynthesisEntry {
    SynthesisEntry {
        a: p.a,
        status: p.status,
        volume: p.volume(m),
        gamma_hat: p.r_hat.as_ref().and_then(|r| extract_bounds(r, bounds).ok()),
    }
}

fn finish(
    sys: &LtiSystem,
    bounds: &InputBounds,
    danger: &DangerSet,
    best: &SynthesisPoint,
    log: Vec<SynthesisEntry>,
) -> Result<SynthesisResult> {
    let y = best.y.clone().expect("optimal point has Y");
    let r_hat = best.r_hat.clone().expect("optimal point has R̂");
    let gamma_hat = extract_bounds(&r_hat, bounds)?;
    let level = sys.m() as f64;
    let ellipsoid = Ellipsoid::new(shape_from_y(&y)?, level)?;
    let (active, distances) = touching(&y, danger, level, &ellipsoid)?;
    Ok(SynthesisResult {
        gamma_hat,
        volume: ellipsoid.volume(),
        y,
        r_hat,
        a_star: best.a,
        level,
        active,
        distances,
        log,
    })
}

fn touching(y: &DMatrix<f64>, danger: &DangerSet, level: f64, e: &Ellipsoid) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut active = Vec::new();
    let mut distances = Vec::new();
    for (i, h) in danger.halfspaces().iter().enumerate() {
        let limit = h.offset * h.offset / level;
        if linalg::quad_form(y, &h.normal) >= limit * (1.0 - ACTIVE_TOL) {
            active.push(i);
        }
        let d = e.hyperplane_distance(&h.normal, h.offset)?;
        if d < -DISTANCE_TOL {
            return Err(Error::Certification(format!(
                "ellipsoid crosses half-space {i} (distance {d:e})"
            )));
        }
        distances.push(d);
    }
    Ok((active, distances))
}

fn no_danger(sys: &LtiSystem, bounds: &InputBounds, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let res = analysis::grid_search(sys, bounds, &opts.analysis())?;
    let y = shape_from_y(&res.shape)?;
    Ok(SynthesisResult {
        gamma_hat: bounds.gamma().to_vec(),
        r_hat: bounds.gamma().iter().map(|g| 1.0 / g).collect(),
        y,
        a_star: res.a_star,
        level: res.level,
        active: Vec::new(),
        distances: Vec::new(),
        volume: res.volume,
        log: res
            .log
            .into_iter()
            .map(|e| SynthesisEntry {
                a: e.a,
                status: e.status,
                volume: e.volume,
                gamma_hat: e.volume.map(|_| bounds.gamma().to_vec()),
            })
            .collect(),
    })
}

/// Per-channel bounds `γ̂ ≤ γ` whose reachable-set ellipsoid avoids every half-space of `danger`.
pub fn synthesize(
    sys: &LtiSystem,
    bounds: &InputBounds,
    danger: &DangerSet,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    bounds.check_dim(sys)?;
    check_danger(sys, danger)?;
    if danger.is_empty() {
        return no_danger(sys, bounds, opts);
    }
    let grid = opts.grid.points()?;
    let all_infeasible = || Error::AllInfeasible {
        first: grid[0],
        last: *grid.last().unwrap(),
        points: grid.len(),
    };
    let m = sys.m();
    match opts.selection {
        ASelection::AnalysisOptimal => {
            let weight = bounds.weight();
            let mut ranked: Vec<AnalysisPoint> = analysis::sweep(&grid, opts.threads, |a| {
                analysis::solve_weighted_at(sys, &weight, a, &opts.solver)
            })?
            .into_iter()
            .filter(|p| p.volume.is_some())
            .collect();
            // Stable sort keeps the smallest a first among equal volumes.
            ranked.sort_by(|p, q| p.volume.unwrap().total_cmp(&q.volume.unwrap()));
            let mut log = Vec::new();
            for p in &ranked {
                let point = solve_synthesis_at(sys, bounds, danger, p.a, opts)?;
                log.push(entry(&point, bounds, m));
                if point.status == SolveStatus::Optimal {
                    return finish(sys, bounds, danger, &point, log);
                }
            }
            Err(all_infeasible())
        }
        ASelection::MaxVolume => {
            let points = analysis::sweep(&grid, opts.threads, |a| {
                solve_synthesis_at(sys, bounds, danger, a, opts)
            })?;
            let mut best: Option<(&SynthesisPoint, f64, f64)> = None;
            for p in &points {
                let (Some(v), Some(s)) = (p.volume(m), p.gamma_sum()) else {
                    continue;
                };
                let better = match best {
                    None => true,
                    Some((_, bv, bs)) => v > bv * (1.0 + 1e-9) || (v >= bv * (1.0 - 1e-9) && s > bs * (1.0 + 1e-9)),
                };
                if better {
                    best = Some((p, v, s));
                }
            }
            let (best, _, _) = best.ok_or_else(all_infeasible)?;
            let log = points.iter().map(|p| entry(p, bounds, m)).collect();
            finish(sys, bounds, danger, best, log)
        }
    }
}

/// Common bound `γ̂ = min(minᵢ bᵢ²/(m cᵢᵀP̂⁻¹cᵢ), min γ)` from the unit-weight analysis `P̂`.
pub fn equal_bound_from_shape(
    unit_shape: &DMatrix<f64>,
    bounds: &InputBounds,
    danger: &DangerSet,
    level: f64,
) -> Result<f64> {
    let inv = shape_from_y(unit_shape)?;
    let mut gamma = bounds.min();
    for h in danger.halfspaces() {
        let q = linalg::quad_form(&inv, &h.normal);
        if q > 0.0 {
            gamma = gamma.min(h.offset * h.offset / (level * q));
        }
    }
    Ok(gamma)
}

/// Equal bound on every channel; the ellipsoid is the unit-weight analysis ellipsoid scaled by `1/γ̂`.
pub fn equal_bound_synthesis(
    sys: &LtiSystem,
    bounds: &InputBounds,
    danger: &DangerSet,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    bounds.check_dim(sys)?;
    check_danger(sys, danger)?;
    let unit = analysis::grid_search_weighted(sys, &DMatrix::identity(sys.m(), sys.m()), &opts.analysis())?;
    let gamma = equal_bound_from_shape(&unit.shape, bounds, danger, unit.level)?;
    let scaled = analysis::rescale(unit, gamma, sys.n());
    let y = shape_from_y(&scaled.shape)?;
    let ellipsoid = Ellipsoid::new(scaled.shape.clone(), scaled.level)?;
    let (active, distances) = touching(&y, danger, scaled.level, &ellipsoid)?;
    let gamma_hat = vec![gamma; sys.m()];
    Ok(SynthesisResult {
        r_hat: vec![1.0 / gamma; sys.m()],
        log: scaled
            .log
            .iter()
            .map(|e| SynthesisEntry {
                a: e.a,
                status: e.status,
                volume: e.volume,
                gamma_hat: None,
            })
            .collect(),
        gamma_hat,
        y,
        a_star: scaled.a_star,
        level: scaled.level,
        active,
        distances,
        volume: scaled.volume,
    })
}

/// Smallest eigenvalue of the synthesis LMI at `(Y, R̂, a)`.
pub fn certify(sys: &LtiSystem, y: &DMatrix<f64>, r_hat: &[f64], a: f64) -> Result<f64> {
    let mut problem = Problem::new();
    let yv = problem.add_variable("Y", sys.n(), Structure::Symmetric);
    let rv = problem.add_variable("R_hat", sys.m(), Structure::Diagonal);
    problem.add_constraint(assemble_synthesis_lmi(&problem, yv, rv, sys, a)?);
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(r_hat));
    let values = problem.pack(&[(yv, y), (rv, &r)]);
    sdp::worst_violation(&problem, &values)
}
