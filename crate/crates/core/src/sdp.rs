//! Dense log-barrier solver for small affine LMI programs.
//!
//! Two objective shapes are supported: `−log det X` for a symmetric matrix variable `X`
//! (determinant maximization) and linear objectives such as `tr(X)` for a diagonal
//! variable. Every constraint is an affine matrix inequality
//! `C + Σ_k v_k A_k ⪰ 0` in the stacked free entries `v` of all variables.
//!
//! The method follows the central path of `t·f(v) − Σ_j log det F_j(v)`, increasing `t`
//! geometrically and re-centering with damped Newton steps. A phase-I problem
//! `min s  s.t. F_j(v) + s·I ≻ 0` supplies a strictly feasible start or certifies that
//! none exists.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub use crate::linalg::min_eig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    /// Parameterized by the upper triangle, `dim·(dim+1)/2` scalars.
    Symmetric,
    /// Parameterized by the diagonal. Element-wise lower bounds are expressed as
    /// separate 1×1 constraints.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVariable {
    pub name: String,
    pub dim: usize,
    pub structure: Structure,
}

impl MatrixVariable {
    pub fn len(&self) -> usize {
        match self.structure {
            Structure::Symmetric => self.dim * (self.dim + 1) / 2,
            Structure::Diagonal => self.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Row/column of the `k`-th free entry.
    fn entry(&self, k: usize) -> (usize, usize) {
        match self.structure {
            Structure::Diagonal => (k, k),
            Structure::Symmetric => {
                let mut k = k;
                for i in 0..self.dim {
                    let row_len = self.dim - i;
                    if k < row_len {
                        return (i, i + k);
                    }
                    k -= row_len;
                }
                unreachable!("entry index out of range")
            }
        }
    }

    /// Basis matrix for the `k`-th free entry.
    pub fn basis(&self, k: usize) -> DMatrix<f64> {
        let (i, j) = self.entry(k);
        let mut e = DMatrix::zeros(self.dim, self.dim);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    }

    pub fn pack(&self, m: &DMatrix<f64>) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let (i, j) = self.entry(k);
                0.5 * (m[(i, j)] + m[(j, i)])
            })
            .collect()
    }

    pub fn unpack(&self, values: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (k, &v) in values.iter().enumerate().take(self.len()) {
            let (i, j) = self.entry(k);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmiSense {
    /// `⪰ 0`
    Psd,
    /// `≻ 0`
    Pd,
}

/// Affine matrix inequality `constant + Σ_k v_k · coeff_k ⪰ 0` (or `≻ 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLmi {
    pub name: String,
    pub sense: LmiSense,
    constant: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl AffineLmi {
    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    pub fn constant(&self) -> &DMatrix<f64> {
        &self.constant
    }

    /// Coefficient matrices keyed by scalar index, sorted.
    pub fn coefficients(&self) -> &[(usize, DMatrix<f64>)] {
        &self.coeffs
    }

    pub fn evaluate(&self, values: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, a) in &self.coeffs {
            m += a * values[*k];
        }
        m
    }

    /// Largest entry magnitude over the constant and coefficient matrices.
    pub fn magnitude(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|(_, a)| linalg::max_abs(a))
            .fold(linalg::max_abs(&self.constant), f64::max)
    }
}

/// Incremental builder for block-structured LMIs.
#[derive(Debug, Clone)]
pub struct LmiBuilder {
    name: String,
    sense: LmiSense,
    constant: DMatrix<f64>,
    coeffs: BTreeMap<usize, DMatrix<f64>>,
}

impl LmiBuilder {
    pub fn new(name: impl Into<String>, size: usize, sense: LmiSense) -> Self {
        Self {
            name: name.into(),
            sense,
            constant: DMatrix::zeros(size, size),
            coeffs: BTreeMap::new(),
        }
    }

    fn place(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
        let (r, c) = block.shape();
        let mut view = target.view_mut((row, col), (r, c));
        view += block;
        if row != col {
            let mut mirror = target.view_mut((col, row), (c, r));
            mirror += block.transpose();
        }
    }

    fn check_fit(&self, row: usize, col: usize, block: &DMatrix<f64>) -> Result<()> {
        let size = self.constant.nrows();
        let (r, c) = block.shape();
        if row + r > size || col + c > size {
            return Err(Error::dim(
                "LMI block",
                format!("block within {size}x{size}"),
                format!("{r}x{c} at ({row},{col})"),
            ));
        }
        if row == col && r != c {
            return Err(Error::dim("diagonal LMI block", "square", format!("{r}x{c}")));
        }
        if row != col && (row < col + c && col < row + r) {
            return Err(Error::dim(
                "off-diagonal LMI block",
                "no overlap with its transpose",
                format!("({row},{col})"),
            ));
        }
        Ok(())
    }

    /// Adds a constant block at `(row, col)`; off-diagonal blocks are mirrored.
    pub fn constant_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) -> Result<&mut Self> {
        self.check_fit(row, col, block)?;
        Self::place(&mut self.constant, row, col, block);
        Ok(self)
    }

    /// Adds the block `map(X)` at `(row, col)` where `map` is linear in the matrix
    /// variable `var` of `problem`.
    pub fn var_block(
        &mut self,
        problem: &Problem,
        var: VarId,
        row: usize,
        col: usize,
        map: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> Result<&mut Self> {
        let info = problem.variable(var);
        let offset = problem.offsets[var.0];
        let size = self.constant.nrows();
        for k in 0..info.len() {
            let block = map(&info.basis(k));
            self.check_fit(row, col, &block)?;
            if block.iter().all(|&v| v == 0.0) {
                continue;
            }
            let entry = self
                .coeffs
                .entry(offset + k)
                .or_insert_with(|| DMatrix::zeros(size, size));
            Self::place(entry, row, col, &block);
        }
        Ok(self)
    }

    pub fn build(&self) -> AffineLmi {
        AffineLmi {
            name: self.name.clone(),
            sense: self.sense,
            constant: linalg::sym(&self.constant),
            coeffs: self
                .coeffs
                .iter()
                .filter(|(_, a)| a.iter().any(|&v| v != 0.0))
                .map(|(&k, a)| (k, linalg::sym(a)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Pure feasibility.
    None,
    /// `−log det X` of a symmetric variable.
    NegLogDet(VarId),
    /// `Σ_terms Σ_i w_i X_ii` over the diagonals of one or more variables.
    Trace(Vec<TraceTerm>),
}

/// Weighted diagonal of one variable inside a [`Objective::Trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTerm {
    pub var: VarId,
    pub weights: Vec<f64>,
}

impl Objective {
    /// `Σ w_i X_ii` of a single variable.
    pub fn trace(var: VarId, weights: Vec<f64>) -> Self {
        Objective::Trace(vec![TraceTerm { var, weights }])
    }
}

/// An LMI program: variables, affine constraints and an objective.
#[derive(Debug, Clone)]
pub struct Problem {
    vars: Vec<MatrixVariable>,
    offsets: Vec<usize>,
    n_scalars: usize,
    constraints: Vec<AffineLmi>,
    objective: Objective,
}

impl Default for Problem {
    fn default() -> Self {
        Self::new()
    }
}

impl Problem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            offsets: Vec::new(),
            n_scalars: 0,
            constraints: Vec::new(),
            objective: Objective::None,
        }
    }

    pub fn add_variable(&mut self, name: impl Into<String>, dim: usize, structure: Structure) -> VarId {
        let v = MatrixVariable {
            name: name.into(),
            dim,
            structure,
        };
        self.offsets.push(self.n_scalars);
        self.n_scalars += v.len();
        self.vars.push(v);
        VarId(self.vars.len() - 1)
    }

    pub fn variable(&self, id: VarId) -> &MatrixVariable {
        &self.vars[id.0]
    }

    pub fn variables(&self) -> &[MatrixVariable] {
        &self.vars
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    pub fn add_constraint(&mut self, lmi: AffineLmi) {
        self.constraints.push(lmi);
    }

    pub fn constraints(&self) -> &[AffineLmi] {
        &self.constraints
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// `X ≻ 0` (or `⪰`) for a variable.
    pub fn add_positive(&mut self, var: VarId, sense: LmiSense) -> Result<()> {
        let info = self.variable(var).clone();
        let mut b = LmiBuilder::new(format!("{} > 0", info.name), info.dim, sense);
        b.var_block(self, var, 0, 0, |e| e.clone())?;
        self.add_constraint(b.build());
        Ok(())
    }

    /// Element-wise `X_ii >= lower_i` for a diagonal variable, one 1×1 constraint each.
    pub fn add_diagonal_lower_bounds(&mut self, var: VarId, lower: &[f64]) -> Result<()> {
        let info = self.variable(var).clone();
        if info.structure != Structure::Diagonal || lower.len() != info.dim {
            return Err(Error::dim("diagonal lower bounds", info.dim, lower.len()));
        }
        for (i, &lo) in lower.iter().enumerate() {
            let mut b = LmiBuilder::new(format!("{}[{i}] >= {lo}", info.name), 1, LmiSense::Psd);
            b.constant_block(0, 0, &DMatrix::from_element(1, 1, -lo))?;
            b.var_block(self, var, 0, 0, |e| DMatrix::from_element(1, 1, e[(i, i)]))?;
            self.add_constraint(b.build());
        }
        Ok(())
    }

    pub fn pack(&self, assignments: &[(VarId, &DMatrix<f64>)]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_scalars];
        for (id, m) in assignments {
            let off = self.offsets[id.0];
            for (k, x) in self.vars[id.0].pack(m).into_iter().enumerate() {
                v[off + k] = x;
            }
        }
        v
    }

    pub fn unpack(&self, id: VarId, values: &[f64]) -> DMatrix<f64> {
        let off = self.offsets[id.0];
        self.vars[id.0].unpack(&values[off..off + self.vars[id.0].len()])
    }

    fn objective_value(&self, values: &[f64]) -> f64 {
        match &self.objective {
            Objective::None => 0.0,
            Objective::NegLogDet(id) => {
                let x = self.unpack(*id, values);
                match linalg::cholesky(&x) {
                    Some(ch) => -2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
                    None => f64::INFINITY,
                }
            }
            Objective::Trace(terms) => terms
                .iter()
                .map(|t| {
                    let x = self.unpack(t.var, values);
                    t.weights.iter().enumerate().map(|(i, w)| w * x[(i, i)]).sum::<f64>()
                })
                .sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        for c in &self.constraints {
            if c.coeffs.iter().any(|(k, _)| *k >= self.n_scalars) {
                return Err(Error::dim("LMI coefficient index", self.n_scalars, "out of range"));
            }
            if c.constant.iter().any(|v| !v.is_finite())
                || c.coeffs.iter().any(|(_, a)| a.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Numerical(format!("constraint '{}' has non-finite data", c.name)));
            }
        }
        match &self.objective {
            Objective::NegLogDet(id) if self.vars[id.0].structure != Structure::Symmetric => Err(Error::validation(
                "objective",
                "log-det objective needs a symmetric variable",
            )),
            Objective::Trace(terms) => {
                for t in terms {
                    if t.var.0 >= self.vars.len() {
                        return Err(Error::validation("objective", "unknown variable"));
                    }
                    if t.weights.len() != self.vars[t.var.0].dim {
                        return Err(Error::dim("trace weights", self.vars[t.var.0].dim, t.weights.len()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Initial barrier parameter.
    pub t0: f64,
    /// Barrier parameter growth per centering stage.
    pub mu: f64,
    /// Stop once `(barrier degrees of freedom)/t` falls below `gap_tol * (1 + |objective|)`.
    pub gap_tol: f64,
    /// A later stage that fails to center is tolerated when the last centered point
    /// already has a relative gap below this.
    pub fallback_gap_tol: f64,
    pub armijo: f64,
    pub shrink: f64,
    /// Centering stops when half the squared Newton decrement is below this.
    pub newton_tol: f64,
    pub max_iterations: usize,
    pub max_stage_iterations: usize,
    /// Phase I declares infeasibility once the best achievable margin is provably above `−infeasible_tol`.
    pub infeasible_tol: f64,
    /// Box bound `|v_k| <= variable_bound` on every free scalar; keeps the central path
    /// well defined when the feasible set is unbounded.
    pub variable_bound: f64,
    pub regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t0: 1.0,
            mu: 10.0,
            gap_tol: 1e-9,
            fallback_gap_tol: 1e-6,
            armijo: 0.01,
            shrink: 0.5,
            newton_tol: 1e-8,
            max_iterations: 5_000,
            max_stage_iterations: 400,
            infeasible_tol: 1e-9,
            variable_bound: 1e6,
            regularization: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Stacked free entries of all variables.
    pub values: Vec<f64>,
    pub variables: Vec<DMatrix<f64>>,
    pub objective: f64,
    /// Most negative eigenvalue across all constraints at `values`.
    pub worst_violation: f64,
    pub feas_tol: f64,
    pub iterations: usize,
    pub gap: f64,
    /// Objective value at the end of each centering stage.
    pub stage_objectives: Vec<f64>,
}

impl SolveReport {
    pub fn variable(&self, id: VarId) -> &DMatrix<f64> {
        &self.variables[id.0]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Feasibility tolerance `1e−8 · (1 + largest constraint-matrix magnitude)`.
pub fn feasibility_tolerance(problem: &Problem) -> f64 {
    let mag = problem.constraints.iter().map(AffineLmi::magnitude).fold(0.0, f64::max);
    1e-8 * (1.0 + mag)
}

/// Smallest eigenvalue over all constraints at `values`.
pub fn worst_violation(problem: &Problem, values: &[f64]) -> Result<f64> {
    problem
        .constraints
        .iter()
        .map(|c| min_eig(&c.evaluate(values)))
        .try_fold(f64::INFINITY, |acc, e| Ok(acc.min(e?)))
}

// -- barrier machinery ---------------------------------------------------------------

struct Block<'a> {
    constant: &'a DMatrix<f64>,
    coeffs: &'a [(usize, DMatrix<f64>)],
    /// Phase-I slack index, added as `s·I`.
    slack: Option<usize>,
}

impl Block<'_> {
    fn eval(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, a) in self.coeffs {
            m += a * v[*k];
        }
        if let Some(s) = self.slack {
            for i in 0..m.nrows() {
                m[(i, i)] += v[s];
            }
        }
        m
    }

    fn factor(&self, v: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
        let m = self.eval(v);
        if m.iter().any(|x| !x.is_finite()) {
            return None;
        }
        linalg::cholesky(&m)
    }

    fn size(&self) -> usize {
        self.constant.nrows()
    }
}

/// The barrier potential `t·(cᵀv − log det X(v)) − Σ log det F_j(v) + box(v)`.
struct Potential<'a> {
    blocks: Vec<Block<'a>>,
    /// Log-det objective block (weight multiplies `−log det`).
    logdet: Option<Block<'a>>,
    linear: DVector<f64>,
    /// Indices carrying the box bound.
    boxed: usize,
    bound: f64,
    dim: usize,
}

/// The potential restricted to the ray `v + s·d`, in a form whose differences
/// `φ(v + s·d) − φ(v)` are accurate even when `t` is large: every log-det term becomes
/// `Σ ln(1 + s·μ_i)` over the eigenvalues `μ` of `L⁻¹ ΔF L⁻ᵀ`.
struct Ray {
    linear_slope: f64,
    /// Eigenvalues for the log-det objective (weighted by `t`).
    objective: Vec<f64>,
    /// Eigenvalues for the barrier blocks and box terms.
    barrier: Vec<f64>,
}

impl Ray {
    fn delta(&self, s: f64, t: f64) -> Option<f64> {
        let mut obj = self.linear_slope * s;
        for &mu in &self.objective {
            let x = s * mu;
            if x <= -1.0 {
                return None;
            }
            obj -= x.ln_1p();
        }
        let mut bar = 0.0;
        for &mu in &self.barrier {
            let x = s * mu;
            if x <= -1.0 {
                return None;
            }
            bar -= x.ln_1p();
        }
        Some(t * obj + bar)
    }
}

fn ray_eigenvalues(block: &Block<'_>, v: &DVector<f64>, dir: &DVector<f64>, out: &mut Vec<f64>) -> Option<()> {
    let ch = block.factor(v)?;
    let size = block.size();
    let mut delta = DMatrix::zeros(size, size);
    for (k, a) in block.coeffs {
        delta += a * dir[*k];
    }
    if let Some(s) = block.slack {
        for i in 0..size {
            delta[(i, i)] += dir[s];
        }
    }
    let l = ch.l();
    let w = l.solve_lower_triangular(&delta)?;
    let scaled = l.solve_lower_triangular(&w.transpose())?;
    let eig = nalgebra::SymmetricEigen::try_new(linalg::sym(&scaled), f64::EPSILON, 10_000)?;
    out.extend(eig.eigenvalues.iter().copied());
    Some(())
}

impl Potential<'_> {
    fn dof(&self) -> f64 {
        (self.blocks.iter().map(Block::size).sum::<usize>() + 2 * self.boxed) as f64
    }

    fn in_domain(&self, v: &DVector<f64>) -> bool {
        self.blocks
            .iter()
            .chain(self.logdet.iter())
            .all(|b| b.factor(v).is_some())
            && (0..self.boxed).all(|k| self.bound + v[k] > 0.0 && self.bound - v[k] > 0.0)
    }

    fn ray(&self, v: &DVector<f64>, dir: &DVector<f64>) -> Option<Ray> {
        let mut objective = Vec::new();
        if let Some(b) = &self.logdet {
            ray_eigenvalues(b, v, dir, &mut objective)?;
        }
        let mut barrier = Vec::new();
        for b in &self.blocks {
            ray_eigenvalues(b, v, dir, &mut barrier)?;
        }
        for k in 0..self.boxed {
            barrier.push(dir[k] / (self.bound + v[k]));
            barrier.push(-dir[k] / (self.bound - v[k]));
        }
        Some(Ray {
            linear_slope: self.linear.dot(dir),
            objective,
            barrier,
        })
    }

    fn accumulate(
        block: &Block<'_>,
        v: &DVector<f64>,
        weight: f64,
        grad: &mut DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) -> Option<()> {
        let ch = block.factor(v)?;
        let l = ch.l();
        let mut idx: Vec<usize> = Vec::with_capacity(block.coeffs.len() + 1);
        let mut scaled: Vec<DMatrix<f64>> = Vec::with_capacity(block.coeffs.len() + 1);
        let mut push = |k: usize, a: &DMatrix<f64>| -> Option<()> {
            let w = l.solve_lower_triangular(a)?;
            let b = l.solve_lower_triangular(&w.transpose())?;
            idx.push(k);
            scaled.push(b);
            Some(())
        };
        for (k, a) in block.coeffs {
            push(*k, a)?;
        }
        if let Some(s) = block.slack {
            push(s, &DMatrix::identity(block.size(), block.size()))?;
        }
        for (p, bp) in scaled.iter().enumerate() {
            grad[idx[p]] -= weight * bp.trace();
            for (q, bq) in scaled.iter().enumerate().take(p + 1) {
                let h = weight * bp.dot(bq);
                hess[(idx[p], idx[q])] += h;
                if p != q {
                    hess[(idx[q], idx[p])] += h;
                }
            }
        }
        Some(())
    }

    fn derivatives(&self, v: &DVector<f64>, t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut grad = &self.linear * t;
        let mut hess = DMatrix::zeros(self.dim, self.dim);
        for b in &self.blocks {
            Self::accumulate(b, v, 1.0, &mut grad, &mut hess)?;
        }
        if let Some(b) = &self.logdet {
            Self::accumulate(b, v, t, &mut grad, &mut hess)?;
        }
        for k in 0..self.boxed {
            let (lo, hi) = (self.bound + v[k], self.bound - v[k]);
            grad[k] += 1.0 / hi - 1.0 / lo;
            hess[(k, k)] += 1.0 / (hi * hi) + 1.0 / (lo * lo);
        }
        Some((grad, hess))
    }
}

enum CenterOutcome {
    Centered,
    Stalled,
    MaxIterations,
    Singular,
}

struct PathFollower<'c> {
    config: &'c SolverConfig,
    iterations: usize,
}

impl PathFollower<'_> {
    fn newton_direction(&self, grad: &DVector<f64>, hess: &DMatrix<f64>) -> Option<DVector<f64>> {
        // Symmetric Jacobi scaling before factoring; variables live on very different scales.
        let n = hess.nrows();
        let d = DVector::from_iterator(
            n,
            hess.diagonal()
                .iter()
                .map(|&h| if h > 0.0 { 1.0 / h.sqrt() } else { 1.0 }),
        );
        let scaled = DMatrix::from_fn(n, n, |i, j| hess[(i, j)] * d[i] * d[j]);
        let rhs = DVector::from_fn(n, |i, _| -grad[i] * d[i]);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut h = scaled.clone();
            for i in 0..n {
                h[(i, i)] += reg;
            }
            if let Some(ch) = Cholesky::new(h) {
                let y = ch.solve(&rhs);
                if y.iter().all(|x| x.is_finite()) {
                    return Some(y.component_mul(&d));
                }
            }
            reg = if reg == 0.0 {
                self.config.regularization
            } else {
                reg * 100.0
            };
        }
        None
    }

    /// Minimizes the potential at fixed `t`, starting from the interior point `v`.
    fn center(&mut self, pot: &Potential<'_>, v: &mut DVector<f64>, t: f64) -> CenterOutcome {
        if !pot.in_domain(v) {
            return CenterOutcome::Singular;
        }
        let mut stage_iterations = 0;
        loop {
            if self.iterations >= self.config.max_iterations {
                return CenterOutcome::MaxIterations;
            }
            let Some((grad, hess)) = pot.derivatives(v, t) else {
                return CenterOutcome::Singular;
            };
            let Some(dir) = self.newton_direction(&grad, &hess) else {
                return CenterOutcome::Singular;
            };
            let slope = grad.dot(&dir);
            let decrement = -slope;
            // Past a few dozen steps the decrement sits on its rounding floor.
            if decrement / 2.0 <= self.config.newton_tol || (stage_iterations >= 50 && decrement <= 1e-6) {
                return CenterOutcome::Centered;
            }
            if stage_iterations >= self.config.max_stage_iterations {
                return CenterOutcome::Stalled;
            }
            stage_iterations += 1;
            let Some(ray) = pot.ray(v, &dir) else {
                return CenterOutcome::Singular;
            };
            self.iterations += 1;
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-16 {
                if let Some(delta) = ray.delta(step, t) {
                    if delta <= self.config.armijo * step * slope {
                        accepted = true;
                        break;
                    }
                }
                step *= self.config.shrink;
            }
            if !accepted {
                // No representable progress: the iterate is as centered as f64 allows.
                return if decrement <= 1e-6 {
                    CenterOutcome::Centered
                } else {
                    CenterOutcome::Stalled
                };
            }
            let trial = &*v + &dir * step;
            if !pot.in_domain(&trial) {
                // The ray model and the Cholesky test disagree only at the boundary.
                return if decrement <= 1e-6 {
                    CenterOutcome::Centered
                } else {
                    CenterOutcome::Stalled
                };
            }
            *v = trial;
        }
    }
}

/// Solves `problem` with the barrier path-following method.
pub fn solve(problem: &Problem, config: &SolverConfig) -> Result<SolveReport> {
    problem.validate()?;
    let n = problem.n_scalars;
    let feas_tol = feasibility_tolerance(problem);
    let mut follower = PathFollower { config, iterations: 0 };

    let blocks = |slack: Option<usize>| -> Vec<Block<'_>> {
        problem
            .constraints
            .iter()
            .map(|c| Block {
                constant: &c.constant,
                coeffs: &c.coeffs,
                slack,
            })
            .collect()
    };

    // Phase I: strictly feasible start.
    let mut v = DVector::zeros(n);
    let strictly_feasible = |v: &DVector<f64>| blocks(None).iter().all(|b| b.factor(v).is_some());
    if !strictly_feasible(&v) {
        let mut s0: f64 = 0.0;
        for c in &problem.constraints {
            s0 = s0.max(-min_eig(&c.constant)?);
        }
        let mut w = DVector::zeros(n + 1);
        w[n] = 1.0 + s0;
        let mut linear = DVector::zeros(n + 1);
        linear[n] = 1.0;
        let pot = Potential {
            blocks: blocks(Some(n)),
            logdet: None,
            linear,
            boxed: n,
            bound: config.variable_bound,
            dim: n + 1,
        };
        let dof = pot.dof();
        let mut t = config.t0;
        let outcome = loop {
            // Leave once the slack is negative at a centered point, or once the lower
            // bound `s − dof/t` on the optimal slack certifies no margin is achievable.
            match follower.center(&pot, &mut w, t) {
                CenterOutcome::Centered => {}
                CenterOutcome::MaxIterations => break Some(SolveStatus::MaxIterations),
                CenterOutcome::Stalled | CenterOutcome::Singular => {
                    break if w[n] < 0.0 {
                        None
                    } else {
                        Some(SolveStatus::NumericalFailure)
                    }
                }
            }
            if w[n] < 0.0 {
                break None;
            }
            if w[n] - dof / t >= -config.infeasible_tol {
                break Some(SolveStatus::Infeasible);
            }
            if dof / t <= config.gap_tol * 1e-3 {
                // s* is within rounding of zero.
                break Some(SolveStatus::Infeasible);
            }
            t *= config.mu;
        };
        v = w.rows(0, n).into_owned();
        if let Some(status) = outcome {
            return finish(
                problem,
                &v,
                status,
                feas_tol,
                follower.iterations,
                f64::INFINITY,
                Vec::new(),
            );
        }
        if !strictly_feasible(&v) {
            return finish(
                problem,
                &v,
                SolveStatus::NumericalFailure,
                feas_tol,
                follower.iterations,
                f64::INFINITY,
                Vec::new(),
            );
        }
    }

    // Phase II.
    let mut linear = DVector::zeros(n);
    let mut logdet = None;
    match &problem.objective {
        Objective::None => {}
        Objective::Trace(terms) => {
            for term in terms {
                let off = problem.offsets[term.var.0];
                let info = &problem.vars[term.var.0];
                for (i, w) in term.weights.iter().enumerate() {
                    let k = (0..info.len())
                        .find(|&k| info.entry(k) == (i, i))
                        .expect("diagonal entry");
                    linear[off + k] += *w;
                }
            }
        }
        Objective::NegLogDet(id) => {
            // Reuse the block machinery: X(v) = Σ_k v_k E_k, weight t.
            let info = &problem.vars[id.0];
            let off = problem.offsets[id.0];
            let coeffs: Vec<(usize, DMatrix<f64>)> = (0..info.len()).map(|k| (off + k, info.basis(k))).collect();
            logdet = Some((DMatrix::zeros(info.dim, info.dim), coeffs));
        }
    }
    let pot = Potential {
        blocks: blocks(None),
        logdet: logdet.as_ref().map(|(c, a)| Block {
            constant: c,
            coeffs: a,
            slack: None,
        }),
        linear,
        boxed: n,
        bound: config.variable_bound,
        dim: n,
    };
    if !pot.in_domain(&v) {
        // Phase I ended outside the box or the objective domain.
        return finish(
            problem,
            &v,
            SolveStatus::NumericalFailure,
            feas_tol,
            follower.iterations,
            f64::INFINITY,
            Vec::new(),
        );
    }
    let dof = pot.dof();
    let mut t = config.t0;
    let mut stages = Vec::new();
    let mut last_centered: Option<(DVector<f64>, f64)> = None;
    loop {
        let outcome = follower.center(&pot, &mut v, t);
        let failed = match outcome {
            CenterOutcome::Centered => None,
            CenterOutcome::MaxIterations => Some(SolveStatus::MaxIterations),
            CenterOutcome::Stalled | CenterOutcome::Singular => Some(SolveStatus::NumericalFailure),
        };
        if let Some(status) = failed {
            if let Some((prev, gap)) = last_centered {
                let scale = 1.0 + problem.objective_value(prev.as_slice()).abs();
                if gap <= config.fallback_gap_tol * scale {
                    return finish(
                        problem,
                        &prev,
                        SolveStatus::Optimal,
                        feas_tol,
                        follower.iterations,
                        gap,
                        stages,
                    );
                }
            }
            return finish(problem, &v, status, feas_tol, follower.iterations, dof / t, stages);
        }
        let obj = problem.objective_value(v.as_slice());
        stages.push(obj);
        if dof / t <= config.gap_tol * (1.0 + obj.abs()) || matches!(problem.objective, Objective::None) {
            return finish(
                problem,
                &v,
                SolveStatus::Optimal,
                feas_tol,
                follower.iterations,
                dof / t,
                stages,
            );
        }
        last_centered = Some((v.clone(), dof / t));
        t *= config.mu;
    }
}

fn finish(
    problem: &Problem,
    v: &DVector<f64>,
    status: SolveStatus,
    feas_tol: f64,
    iterations: usize,
    gap: f64,
    stage_objectives: Vec<f64>,
) -> Result<SolveReport> {
    let values: Vec<f64> = v.iter().copied().collect();
    let worst = worst_violation(problem, &values)?;
    let status = if status == SolveStatus::Optimal && worst < -feas_tol {
        SolveStatus::NumericalFailure
    } else {
        status
    };
    let variables = (0..problem.vars.len())
        .map(|i| problem.unpack(VarId(i), &values))
        .collect();
    Ok(SolveReport {
        status,
        objective: problem.objective_value(&values),
        values,
        variables,
        worst_violation: worst,
        feas_tol,
        iterations,
        gap,
        stage_objectives,
    })
}
