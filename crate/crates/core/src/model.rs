//! Domain types: the LTI plant, per-channel input bounds, origin-centred ellipsoids and
//! dangerous half-space sets.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Discrete-time plant `x_{k+1} = F x_k + G u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        if !f.is_square() || f.nrows() == 0 {
            return Err(Error::dim(
                "F",
                "non-empty square matrix",
                format!("{}x{}", f.nrows(), f.ncols()),
            ));
        }
        if g.nrows() != f.nrows() || g.ncols() == 0 {
            return Err(Error::dim(
                "G",
                format!("{} rows and at least one column", f.nrows()),
                format!("{}x{}", g.nrows(), g.ncols()),
            ));
        }
        if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("system", "F and G must have finite entries"));
        }
        Ok(Self { f, g })
    }

    pub fn from_rows(f: &[Vec<f64>], g: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::from_rows(f, "system.f")?, linalg::from_rows(g, "system.g")?)
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.g.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.f * x + &self.g * u
    }
}

/// Squared magnitude limits `[u]_i² <= γ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct InputBounds {
    gamma: Vec<f64>,
}

impl InputBounds {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::validation("gamma", "at least one bound is required"));
        }
        for (i, &g) in gamma.iter().enumerate() {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::validation(
                    format!("gamma[{i}]"),
                    format!("bound must be a positive finite number, got {g}"),
                ));
            }
        }
        Ok(Self { gamma })
    }

    pub fn uniform(m: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![gamma; m])
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Per-channel amplitude `√γ_i`.
    pub fn amplitudes(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| g.sqrt()).collect()
    }

    /// `Some(γ)` when every channel shares the same bound.
    pub fn common(&self) -> Option<f64> {
        let g0 = self.gamma[0];
        self.gamma.iter().all(|&g| g == g0).then_some(g0)
    }

    /// The weight `R = diag(1/γ_1, …, 1/γ_m)`.
    pub fn weight(&self) -> DMatrix<f64> {
        input_weight(self)
    }

    pub(crate) fn check_dim(&self, sys: &LtiSystem) -> Result<()> {
        if self.len() != sys.m() {
            return Err(Error::dim("gamma", sys.m(), self.len()));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for InputBounds {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<InputBounds> for Vec<f64> {
    fn from(b: InputBounds) -> Self {
        b.gamma
    }
}

pub fn input_weight(bounds: &InputBounds) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        bounds.len(),
        bounds.gamma.iter().map(|g| 1.0 / g),
    ))
}

/// `{x : xᵀ P x <= α}` with `P` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    shape: DMatrix<f64>,
    level: f64,
}

impl Ellipsoid {
    pub fn new(shape: DMatrix<f64>, level: f64) -> Result<Self> {
        let shape = linalg::symmetrized(&shape, "ellipsoid shape")?;
        if !(level.is_finite() && level > 0.0) {
            return Err(Error::validation(
                "ellipsoid level",
                format!("must be positive, got {level}"),
            ));
        }
        if shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("ellipsoid shape", "non-finite entry"));
        }
        if linalg::cholesky(&shape).is_none() || linalg::min_eig(&shape)? <= 0.0 {
            return Err(Error::validation("ellipsoid shape", "matrix is not positive definite"));
        }
        Ok(Self { shape, level })
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    /// `xᵀ P x`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.shape, x)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.value(x) <= self.level
    }

    pub fn inverse_shape(&self) -> DMatrix<f64> {
        // Shape is PD by construction.
        let inv = linalg::cholesky(&self.shape)
            .expect("ellipsoid shape is positive definite")
            .inverse();
        linalg::sym(&inv)
    }

    pub fn volume(&self) -> f64 {
        ellipsoid_volume(self)
    }

    /// Signed distance to the hyperplane `cᵀx = b`; negative when the ellipsoid crosses it.
    pub fn hyperplane_distance(&self, c: &DVector<f64>, b: f64) -> Result<f64> {
        hyperplane_distance(self, c, b)
    }

    /// Same ellipsoid with shape `P / s`.
    pub fn scaled_shape(&self, s: f64) -> Result<Self> {
        Self::new(&self.shape / s, self.level)
    }
}

/// Volume of the unit ball in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> f64 {
    // v_0 = 1, v_1 = 2, v_n = v_{n-2} · 2π / n
    let (mut v, start) = if n.is_multiple_of(2) { (1.0, 2) } else { (2.0, 3) };
    let mut k = start;
    while k <= n {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}

pub fn ellipsoid_volume(e: &Ellipsoid) -> f64 {
    let n = e.dim();
    unit_ball_volume(n) * e.level.powf(n as f64 / 2.0) * (-0.5 * log_det_spd(&e.shape)).exp()
}

pub(crate) fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    let chol = linalg::cholesky(m).expect("matrix is positive definite");
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn hyperplane_distance(e: &Ellipsoid, c: &DVector<f64>, b: f64) -> Result<f64> {
    if c.len() != e.dim() {
        return Err(Error::dim("hyperplane normal", e.dim(), c.len()));
    }
    let cc = c.dot(c);
    if cc == 0.0 {
        return Err(Error::InvalidDangerSet("hyperplane normal is zero".into()));
    }
    let chol = linalg::cholesky(e.shape()).ok_or_else(|| Error::Numerical("ellipsoid shape is singular".into()))?;
    let support = (e.level * c.dot(&chol.solve(c))).sqrt();
    Ok((b.abs() - support) / cc.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

/// Dangerous half-space `{x : cᵀx >= b}` with `b > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.normal.dot(x) >= self.offset
    }
}

/// Rewrites `cᵀx >= b` / `cᵀx <= b` as `c'ᵀx >= b'` with `b' > 0`.
pub fn normalize_halfspace(c: &DVector<f64>, b: f64, sense: Sense) -> Result<Halfspace> {
    if c.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::InvalidDangerSet("non-finite half-space data".into()));
    }
    if c.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidDangerSet("half-space normal is zero".into()));
    }
    let (normal, offset) = match sense {
        Sense::AtLeast => (c.clone(), b),
        Sense::AtMost => (-c, -b),
    };
    if offset <= 0.0 {
        return Err(Error::InvalidDangerSet(format!(
            "the origin lies in the half-space (offset {b}); no bound can exclude it"
        )));
    }
    Ok(Halfspace { normal, offset })
}

/// Union of dangerous half-spaces, stored normalized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DangerSet {
    halfspaces: Vec<Halfspace>,
}

impl DangerSet {
    pub fn new(halfspaces: Vec<Halfspace>) -> Result<Self> {
        for (i, h) in halfspaces.iter().enumerate() {
            if h.offset <= 0.0 || h.normal.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidDangerSet(format!("half-space {i} is not normalized")));
            }
            if h.normal.len() != halfspaces[0].normal.len() {
                return Err(Error::dim("danger normal", halfspaces[0].normal.len(), h.normal.len()));
            }
        }
        Ok(Self { halfspaces })
    }

    pub fn from_raw(items: &[(Vec<f64>, f64, Sense)]) -> Result<Self> {
        let hs = items
            .iter()
            .map(|(c, b, s)| normalize_halfspace(&DVector::from_column_slice(c), *b, *s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(hs)
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn len(&self) -> usize {
        self.halfspaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.halfspaces.is_empty()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.halfspaces.iter().any(|h| h.contains(x))
    }

    pub(crate) fn check_dim(&self, n: usize) -> Result<()> {
        match self.halfspaces.first() {
            Some(h) if h.normal.len() != n => Err(Error::dim("danger normal", n, h.normal.len())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundednessVerdict {
    Bounded,
    PossiblyUnbounded,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundedness {
    pub verdict: BoundednessVerdict,
    pub spectral_radius: f64,
}

pub const SPECTRAL_RADIUS_TOL: f64 = 1e-9;

/// Classifies the reachable set by the spectral radius of `F`. Unit-modulus eigenvalues
/// are reported as `PossiblyUnbounded` without a multiplicity analysis.
pub fn boundedness_diagnostic(sys: &LtiSystem) -> Result<Boundedness> {
    let rho = linalg::spectral_radius(sys.f())?;
    let verdict = if rho > 1.0 + SPECTRAL_RADIUS_TOL {
        BoundednessVerdict::Unbounded
    } else if rho < 1.0 - SPECTRAL_RADIUS_TOL {
        BoundednessVerdict::Bounded
    } else {
        BoundednessVerdict::PossiblyUnbounded
    };
    Ok(Boundedness {
        verdict,
        spectral_radius: rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn weight_examples() {
        let r = input_weight(&InputBounds::new(vec![8.0, 10.0]).unwrap());
        assert_eq!(r, diag(&[0.125, 0.1]));
        assert_eq!(InputBounds::new(vec![1.0]).unwrap().weight(), diag(&[1.0]));
        let r = InputBounds::new(vec![1.2, 0.8, 1.1]).unwrap().weight();
        assert_relative_eq!(r[(0, 0)], 1.0 / 1.2);
        assert_relative_eq!(r[(1, 1)], 1.25);
        assert_relative_eq!(r[(2, 2)], 1.0 / 1.1);
        assert_eq!(r[(0, 1)], 0.0);
    }

    #[test]
    fn bounds_reject_nonpositive() {
        let err = InputBounds::new(vec![0.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("gamma[0]"));
        assert!(InputBounds::new(vec![1.0, -2.0]).is_err());
        assert!(InputBounds::new(vec![]).is_err());
    }

    #[test]
    fn system_dimension_checks() {
        assert!(LtiSystem::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1)).is_err());
        assert!(LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1)).is_err());
        assert!(LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 0)).is_err());
        let s = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)).unwrap();
        assert_eq!((s.n(), s.m()), (2, 3));
    }

    #[test]
    fn boundedness_examples() {
        let sys = |f: DMatrix<f64>| LtiSystem::new(f, DMatrix::from_element(1, 1, 1.0)).unwrap();
        let b = boundedness_diagnostic(&sys(diag(&[0.5]))).unwrap();
        assert_eq!(b.verdict, BoundednessVerdict::Bounded);
        assert_relative_eq!(b.spectral_radius, 0.5, epsilon = 1e-14);

        let b = boundedness_diagnostic(&sys(diag(&[1.0]))).unwrap();
        assert_eq!(b.verdict, BoundednessVerdict::PossiblyUnbounded);

        let b = boundedness_diagnostic(&sys(diag(&[2.0]))).unwrap();
        assert_eq!(b.verdict, BoundednessVerdict::Unbounded);

        // λ² − 0.96λ + 0.2089, real roots
        let f = DMatrix::from_row_slice(2, 2, &[0.84, 0.23, -0.47, 0.12]);
        let sys2 = LtiSystem::new(f, DMatrix::identity(2, 2)).unwrap();
        let b = boundedness_diagnostic(&sys2).unwrap();
        let disc: f64 = 0.96 * 0.96 - 4.0 * 0.2089;
        let oracle = (0.96 + disc.sqrt()) / 2.0;
        assert_eq!(b.verdict, BoundednessVerdict::Bounded);
        assert_relative_eq!(b.spectral_radius, oracle, epsilon = 1e-12);
        assert!((b.spectral_radius - 0.627).abs() < 1e-3);
    }

    #[test]
    fn volume_examples() {
        let e = Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap();
        assert_relative_eq!(e.volume(), PI, epsilon = 1e-14);
        let e = Ellipsoid::new(diag(&[0.25]), 1.0).unwrap();
        assert_relative_eq!(e.volume(), 4.0, epsilon = 1e-14);
        let e = Ellipsoid::new(diag(&[4.0, 1.0]), 1.0).unwrap();
        assert_relative_eq!(e.volume(), PI / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn unit_ball_volumes() {
        assert_eq!(unit_ball_volume(0), 1.0);
        assert_eq!(unit_ball_volume(1), 2.0);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * PI / 3.0, epsilon = 1e-14);
        assert_relative_eq!(unit_ball_volume(5), 8.0 * PI * PI / 15.0, epsilon = 1e-14);
    }

    #[test]
    fn distance_examples() {
        let e = Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(e.hyperplane_distance(&c, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(e.hyperplane_distance(&c, 1.0).unwrap(), 0.0);
        let e1 = Ellipsoid::new(diag(&[0.25]), 1.0).unwrap();
        let d = e1.hyperplane_distance(&DVector::from_vec(vec![1.0]), 2.0).unwrap();
        assert!(d.abs() < 1e-15);
        assert!(e.hyperplane_distance(&DVector::zeros(2), 1.0).is_err());
        assert!(e.hyperplane_distance(&DVector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn ellipsoid_rejects_bad_shapes() {
        assert!(Ellipsoid::new(diag(&[1.0, -1.0]), 1.0).is_err());
        assert!(Ellipsoid::new(DMatrix::identity(2, 2), 0.0).is_err());
        assert!(Ellipsoid::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]), 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let h = normalize_halfspace(&DVector::from_vec(vec![0.1, 1.0]), 3.0, Sense::AtLeast).unwrap();
        assert_eq!(h.normal.as_slice(), &[0.1, 1.0]);
        assert_eq!(h.offset, 3.0);

        let s5 = 2.0 * 5f64.sqrt();
        let h = normalize_halfspace(&DVector::from_vec(vec![-2.0, 1.0]), -s5, Sense::AtMost).unwrap();
        assert_eq!(h.normal.as_slice(), &[2.0, -1.0]);
        assert_eq!(h.offset, s5);

        let err = normalize_halfspace(&DVector::from_vec(vec![1.0]), -1.0, Sense::AtLeast);
        assert!(matches!(err, Err(Error::InvalidDangerSet(_))));
        assert!(normalize_halfspace(&DVector::from_vec(vec![1.0]), 0.0, Sense::AtLeast).is_err());
        assert!(normalize_halfspace(&DVector::zeros(2), 1.0, Sense::AtLeast).is_err());
    }

    fn spd2() -> impl Strategy<Value = DMatrix<f64>> {
        (0.1f64..5.0, 0.1f64..5.0, -1.0f64..1.0).prop_map(|(a, b, t)| {
            let l = DMatrix::from_row_slice(2, 2, &[a, 0.0, t, b]);
            &l * l.transpose()
        })
    }

    proptest! {
        #[test]
        fn origin_is_inside(p in spd2(), alpha in 0.01f64..10.0) {
            let e = Ellipsoid::new(p, alpha).unwrap();
            prop_assert!(e.contains(&DVector::zeros(2)));
        }

        #[test]
        fn volume_rotation_invariant(p in spd2(), theta in 0.0f64..6.3) {
            let (s, c) = theta.sin_cos();
            let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let v1 = Ellipsoid::new(p.clone(), 1.3).unwrap().volume();
            let v2 = Ellipsoid::new(q.transpose() * p * q, 1.3).unwrap().volume();
            prop_assert!((v1 - v2).abs() <= 1e-9 * v1);
        }

        #[test]
        fn volume_scaling_law(p in spd2(), s in 0.05f64..20.0) {
            let e = Ellipsoid::new(p, 0.7).unwrap();
            let scaled = e.scaled_shape(s).unwrap();
            prop_assert!((scaled.volume() - s * e.volume()).abs() <= 1e-9 * scaled.volume());
        }

        #[test]
        fn touching_distance_is_zero(p in spd2(), c0 in -2.0f64..2.0, c1 in 0.1f64..2.0, alpha in 0.1f64..4.0) {
            let e = Ellipsoid::new(p, alpha).unwrap();
            let c = DVector::from_vec(vec![c0, c1]);
            let b = (alpha * c.dot(&(e.inverse_shape() * &c))).sqrt();
            let d = e.hyperplane_distance(&c, b).unwrap();
            prop_assert!(d.abs() <= 1e-9 * b.max(1.0));
        }

        #[test]
        fn normalize_idempotent(c0 in -3.0f64..3.0, c1 in 0.1f64..3.0, b in 0.1f64..5.0) {
            let h = normalize_halfspace(&DVector::from_vec(vec![c0, c1]), b, Sense::AtLeast).unwrap();
            let h2 = normalize_halfspace(&h.normal, h.offset, Sense::AtLeast).unwrap();
            prop_assert_eq!(h, h2);
        }
    }
}
