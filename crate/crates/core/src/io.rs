//! Problem and result files (TOML) and plot-data emission.
//!
//! A problem file looks like
//!
//! ```toml
//! [system]
//! F = [[0.84, 0.23], [-0.47, 0.12]]
//! G = [[0.07, 0.3], [0.23, 0.1]]
//!
//! [bounds]
//! gamma = [8.0, 10.0]          # or a single number for every channel
//!
//! [[danger]]
//! c = [0.1, 1.0]
//! b = 3.0
//! sense = ">="
//!
//! [analysis]
//! grid = "0.01:0.01:0.99"
//! equal_bounds = false
//!
//! [monte_carlo]
//! n_traj = 10000
//! horizon = 1000
//! seed = 1
//! policy = "uniform-box"
//! ```
//!
//! A `[platoon]` block (`preset = "three-vehicle"` or `[platoon.params]`) can stand in
//! for `[system]` and `[[danger]]`.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, AnalysisOptions, AnalysisResult, GridEntry, GridSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{normalize_halfspace, DangerSet, Ellipsoid, InputBounds, LtiSystem, Sense};
use crate::platoon::{self, AttackSpec, PlatoonParams, KMH};
use crate::reach::{Policy, SampleConfig};
use crate::sdp::{SolveStatus, SolverConfig};
use crate::synthesis::{self, ASelection, SynthesisEntry, SynthesisOptions, SynthesisResult};

pub const TOOL_VERSION: &str = concat!("ellreach ", env!("CARGO_PKG_VERSION"));

pub const PLATOON_PRESET: &str = "three-vehicle";

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Validation {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_string(),
        message: e.to_string().trim_end().to_string(),
    })
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse {
        path: "<serialize>".into(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Common(f64),
    PerChannel(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsBlock {
    pub gamma: GammaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DangerBlock {
    pub c: Vec<f64>,
    pub b: f64,
    #[serde(default = "default_sense")]
    pub sense: Sense,
}

fn default_sense() -> Sense {
    Sense::AtLeast
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridField {
    Text(String),
    Table(GridSpec),
}

impl GridField {
    pub fn resolve(&self) -> Result<GridSpec> {
        match self {
            GridField::Text(s) => GridSpec::parse(s),
            GridField::Table(g) => GridSpec::new(g.start, g.step, g.stop),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridField>,
    #[serde(default)]
    pub equal_bounds: bool,
    #[serde(default)]
    pub selection: ASelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloBlock {
    pub n_traj: usize,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: Policy,
}

impl Default for MonteCarloBlock {
    fn default() -> Self {
        Self {
            n_traj: 10_000,
            horizon: 1_000,
            seed: 1,
            policy: Policy::UniformBox,
        }
    }
}

/// Explicit platoon parameters; the desired speed may be given in m/s or km/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonParamsBlock {
    pub n_vehicles: usize,
    pub dt: f64,
    pub beta: f64,
    pub kp: f64,
    pub kd: f64,
    pub d_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star_kmh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackField {
    /// `"default"` or `"none"`.
    Named(String),
    Spec(AttackSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PlatoonParamsBlock>,
    /// Bounds in force during simulation; defaults to `[bounds]`, then the physical bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackField>,
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Common starting speed error in km/h.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_speed_offset_kmh: Option<f64>,
}

fn default_duration() -> f64 {
    200.0
}

/// The problem file as written, before validation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub danger: Option<Vec<DangerBlock>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platoon: Option<PlatoonBlock>,
}

/// Validated platoon experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonSetup {
    pub params: PlatoonParams,
    pub bounds: InputBounds,
    pub attack: Option<AttackSpec>,
    pub duration: f64,
    pub initial: DVector<f64>,
}

/// Validated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub system: LtiSystem,
    pub bounds: InputBounds,
    /// `None` when the file has no danger block.
    pub danger: Option<DangerSet>,
    pub grid: GridSpec,
    pub equal_bounds: bool,
    pub selection: ASelection,
    pub y_weight: f64,
    pub monte_carlo: SampleConfig,
    pub platoon: Option<PlatoonSetup>,
}

impl Problem {
    pub fn analysis_options(&self, threads: usize) -> AnalysisOptions {
        AnalysisOptions {
            grid: self.grid,
            solver: SolverConfig::default(),
            threads,
        }
    }

    pub fn synthesis_options(&self, threads: usize) -> SynthesisOptions {
        SynthesisOptions {
            grid: self.grid,
            solver: SolverConfig::default(),
            threads,
            selection: self.selection,
            y_weight: self.y_weight,
        }
    }
}

impl ProblemFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        parse_toml(text, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    fn platoon_params(&self) -> Result<Option<PlatoonParams>> {
        let Some(block) = &self.platoon else {
            return Ok(None);
        };
        let params = match (&block.preset, &block.params) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("platoon", "give either preset or params, not both"));
            }
            (Some(name), None) if name == PLATOON_PRESET => PlatoonParams::three_vehicle(),
            (Some(name), None) => {
                return Err(Error::validation(
                    "platoon.preset",
                    format!("unknown preset '{name}', expected '{PLATOON_PRESET}'"),
                ));
            }
            (None, Some(p)) => {
                let v_star = match (p.v_star, p.v_star_kmh) {
                    (Some(_), Some(_)) => {
                        return Err(Error::validation(
                            "platoon.params.v_star",
                            "give v_star or v_star_kmh, not both",
                        ));
                    }
                    (Some(v), None) => v,
                    (None, Some(kmh)) => kmh * KMH,
                    (None, None) => 0.0,
                };
                PlatoonParams::uniform(p.n_vehicles, p.dt, p.beta, p.kp, p.kd, p.d_star, v_star)
            }
            (None, None) => PlatoonParams::three_vehicle(),
        };
        params.validate()?;
        Ok(Some(params))
    }

    /// Checks every field and builds the domain types.
    pub fn resolve(&self) -> Result<Problem> {
        let platoon_params = self.platoon_params()?;
        let system = match (&self.system, &platoon_params) {
            (Some(s), _) => {
                let f = linalg::from_rows(&s.f, "system.F")?;
                let g = linalg::from_rows(&s.g, "system.G")?;
                LtiSystem::new(f, g).map_err(|e| prefixed("system", e))?
            }
            (None, Some(p)) => platoon::build_matrices(p)?,
            (None, None) => return Err(Error::validation("system", "missing [system] block")),
        };
        let bounds = match &self.bounds {
            Some(b) => {
                let gamma = match &b.gamma {
                    GammaSpec::Common(g) => vec![*g; system.m()],
                    GammaSpec::PerChannel(v) => v.clone(),
                };
                let bounds = InputBounds::new(gamma).map_err(|e| prefixed("bounds", e))?;
                if bounds.len() != system.m() {
                    return Err(Error::validation(
                        "bounds.gamma",
                        format!("expected {} entries (inputs of G), got {}", system.m(), bounds.len()),
                    ));
                }
                bounds
            }
            None if platoon_params.as_ref().is_some_and(|p| p.n_vehicles == 3) && self.system.is_none() => {
                InputBounds::new(platoon::PHYSICAL_BOUNDS.to_vec())?
            }
            None => return Err(Error::validation("bounds", "missing [bounds] block")),
        };
        let danger = match (&self.danger, &platoon_params) {
            (Some(list), _) => {
                let mut hs = Vec::with_capacity(list.len());
                for (i, d) in list.iter().enumerate() {
                    if d.c.len() != system.n() {
                        return Err(Error::validation(
                            format!("danger[{i}].c"),
                            format!("expected {} entries, got {}", system.n(), d.c.len()),
                        ));
                    }
                    let h =
                        normalize_halfspace(&DVector::from_vec(d.c.clone()), d.b, d.sense).map_err(|e| match e {
                            Error::InvalidDangerSet(reason) => Error::validation(format!("danger[{i}]"), reason),
                            other => other,
                        })?;
                    hs.push(h);
                }
                Some(DangerSet::new(hs)?)
            }
            (None, Some(p)) if self.system.is_none() => Some(platoon::danger_set(p)?),
            (None, _) => None,
        };
        let block = self.analysis.clone().unwrap_or_default();
        let grid = match &block.grid {
            Some(g) => g.resolve().map_err(|e| prefixed("analysis", e))?,
            None => GridSpec::default(),
        };
        let y_weight = block.y_weight.unwrap_or(synthesis::Y_WEIGHT);
        if !(y_weight.is_finite() && y_weight >= 0.0) {
            return Err(Error::validation("analysis.y_weight", "must be a non-negative number"));
        }
        let mc = self.monte_carlo.clone().unwrap_or_default();
        let mut monte_carlo = SampleConfig::new(mc.n_traj, mc.horizon, mc.seed, mc.policy);
        monte_carlo.threads = 1;
        monte_carlo.validate().map_err(|e| prefixed("monte_carlo", e))?;
        let platoon = match (&self.platoon, platoon_params) {
            (Some(block), Some(params)) => Some(self.platoon_setup(block, params, &bounds)?),
            _ => None,
        };
        Ok(Problem {
            system,
            bounds,
            danger,
            grid,
            equal_bounds: block.equal_bounds,
            selection: block.selection,
            y_weight,
            monte_carlo,
            platoon,
        })
    }

    fn platoon_setup(&self, block: &PlatoonBlock, params: PlatoonParams, bounds: &InputBounds) -> Result<PlatoonSetup> {
        let m = params.n_vehicles;
        let sim_bounds = match &block.gamma {
            Some(g) => InputBounds::new(g.clone()).map_err(|e| prefixed("platoon", e))?,
            None => bounds.clone(),
        };
        if sim_bounds.len() != m {
            return Err(Error::validation(
                "platoon.gamma",
                format!("expected {m} entries, got {}", sim_bounds.len()),
            ));
        }
        let attack = match &block.attack {
            None => Some(AttackSpec::standard(m)),
            Some(AttackField::Named(s)) if s == "default" => Some(AttackSpec::standard(m)),
            Some(AttackField::Named(s)) if s == "none" => None,
            Some(AttackField::Named(s)) => {
                return Err(Error::validation(
                    "platoon.attack",
                    format!("expected \"default\", \"none\" or a table, got '{s}'"),
                ));
            }
            Some(AttackField::Spec(a)) => {
                a.validate(m).map_err(|e| prefixed("platoon", e))?;
                Some(a.clone())
            }
        };
        if !(block.duration.is_finite() && block.duration >= 0.0) {
            return Err(Error::validation(
                "platoon.duration",
                "must be a non-negative number of seconds",
            ));
        }
        let initial = match block.initial_speed_offset_kmh {
            Some(kmh) if kmh.is_finite() => platoon::speed_offset(&params, kmh * KMH),
            Some(_) => return Err(Error::validation("platoon.initial_speed_offset_kmh", "must be finite")),
            None => platoon::default_initial(&params),
        };
        Ok(PlatoonSetup {
            params,
            bounds: sim_bounds,
            attack,
            duration: block.duration,
            initial,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: linalg::to_rows(m),
        }
    }

    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        let m = linalg::from_rows(&self.data, what)?;
        if m.shape() != (self.rows, self.cols) {
            return Err(Error::validation(
                what,
                format!(
                    "declared {}x{}, data is {}x{}",
                    self.rows,
                    self.cols,
                    m.nrows(),
                    m.ncols()
                ),
            ));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResultKind {
    Analysis,
    Synthesis,
    EqualBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub a: f64,
    pub status: SolveStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<f64>>,
}

impl From<&GridEntry> for LogEntry {
    fn from(e: &GridEntry) -> Self {
        Self {
            a: e.a,
            status: e.status,
            volume: e.volume,
            gamma_hat: None,
        }
    }
}

impl From<&SynthesisEntry> for LogEntry {
    fn from(e: &SynthesisEntry) -> Self {
        Self {
            a: e.a,
            status: e.status,
            volume: e.volume,
            gamma_hat: e.gamma_hat.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloStats {
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
    pub policy: Policy,
    pub visited: usize,
    pub containment_fraction: f64,
    pub max_level: f64,
    pub danger_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub tool: String,
    pub config_hash: String,
    pub kind: ResultKind,
    pub a_star: f64,
    /// Bounds whose reachable set the ellipsoid covers.
    pub gamma: Vec<f64>,
    pub level: f64,
    pub volume: f64,
    /// Shape `P` of `E(P, level)`.
    #[serde(rename = "P")]
    pub p: MatrixData,
    #[serde(rename = "Y", default, skip_serializing_if = "Option::is_none")]
    pub y: Option<MatrixData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub active: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distances: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloStats>,
    pub input: ProblemFile,
    #[serde(default)]
    pub log: Vec<LogEntry>,
}

impl ResultFile {
    pub fn from_analysis(input: &ProblemFile, bounds: &InputBounds, res: &AnalysisResult) -> Result<Self> {
        Ok(Self {
            tool: TOOL_VERSION.into(),
            config_hash: input.config_hash()?,
            kind: ResultKind::Analysis,
            a_star: res.a_star,
            gamma: bounds.gamma().to_vec(),
            level: res.level,
            volume: res.volume,
            p: MatrixData::from_matrix(&res.shape),
            y: None,
            r_hat: None,
            active: Vec::new(),
            distances: Vec::new(),
            monte_carlo: None,
            input: input.clone(),
            log: res.log.iter().map(LogEntry::from).collect(),
        })
    }

    pub fn from_synthesis(input: &ProblemFile, res: &SynthesisResult, equal_bounds: bool) -> Result<Self> {
        Ok(Self {
            tool: TOOL_VERSION.into(),
            config_hash: input.config_hash()?,
            kind: if equal_bounds {
                ResultKind::EqualBound
            } else {
                ResultKind::Synthesis
            },
            a_star: res.a_star,
            gamma: res.gamma_hat.clone(),
            level: res.level,
            volume: res.volume,
            p: MatrixData::from_matrix(res.ellipsoid().shape()),
            y: Some(MatrixData::from_matrix(&res.y)),
            r_hat: Some(res.r_hat.clone()),
            active: res.active.clone(),
            distances: res.distances.clone(),
            monte_carlo: None,
            input: input.clone(),
            log: res.log.iter().map(LogEntry::from).collect(),
        })
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        parse_toml(text, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml()?)
    }

    pub fn ellipsoid(&self) -> Result<Ellipsoid> {
        Ellipsoid::new(self.p.to_matrix("P")?, self.level)
    }

    pub fn bounds(&self) -> Result<InputBounds> {
        InputBounds::new(self.gamma.clone())
    }

    /// Re-checks the stored certificate against the echoed input: the smallest
    /// eigenvalue of the defining LMI must be at least `−1e−8 (1 + max|entry|)`.
    /// Returns that eigenvalue.
    pub fn verify(&self) -> Result<f64> {
        let problem = self.input.resolve()?;
        let sys = &problem.system;
        let (eig, scale) = match self.kind {
            ResultKind::Analysis | ResultKind::EqualBound => {
                let p = self.p.to_matrix("P")?;
                (
                    analysis::certify(sys, &self.bounds()?, &p, self.a_star)?,
                    linalg::max_abs(&p),
                )
            }
            ResultKind::Synthesis => {
                let y = self
                    .y
                    .as_ref()
                    .ok_or_else(|| Error::validation("Y", "synthesis result without Y"))?
                    .to_matrix("Y")?;
                let r = self
                    .r_hat
                    .as_ref()
                    .ok_or_else(|| Error::validation("r_hat", "synthesis result without r_hat"))?;
                let scale = linalg::max_abs(&y).max(r.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
                (synthesis::certify(sys, &y, r, self.a_star)?, scale)
            }
        };
        if eig < -1e-8 * (1.0 + scale) {
            return Err(Error::Certification(format!(
                "stored result violates its LMI (min eigenvalue {eig:e})"
            )));
        }
        if let Some(d) = &problem.danger {
            if self.kind != ResultKind::Analysis {
                let e = self.ellipsoid()?;
                for (i, h) in d.halfspaces().iter().enumerate() {
                    let dist = e.hyperplane_distance(&h.normal, h.offset)?;
                    if dist < -synthesis::DISTANCE_TOL {
                        return Err(Error::Certification(format!(
                            "ellipsoid crosses half-space {i} (distance {dist:e})"
                        )));
                    }
                }
            }
        }
        Ok(eig)
    }
}

/// Boundary of the projection of `e` onto coordinates `(i, j)` (0-based), as
/// `samples` points in angle order starting at angle 0.
pub fn ellipse_boundary(e: &Ellipsoid, i: usize, j: usize, samples: usize) -> Result<Vec<[f64; 2]>> {
    let n = e.dim();
    if i >= j || j >= n {
        return Err(Error::validation(
            "plane",
            format!("need 0 <= i < j < {n}, got ({i}, {j})"),
        ));
    }
    if samples < 4 {
        return Err(Error::validation(
            "samples",
            format!("need at least 4 samples, got {samples}"),
        ));
    }
    let inv = e.inverse_shape();
    let s = DMatrix::from_row_slice(2, 2, &[inv[(i, i)], inv[(i, j)], inv[(j, i)], inv[(j, j)]]);
    let l = linalg::cholesky(&linalg::sym(&s))
        .ok_or_else(|| Error::Numerical("projected shape is not positive definite".into()))?
        .l();
    let r = e.level().sqrt();
    Ok((0..samples)
        .map(|k| {
            let th = TAU * k as f64 / samples as f64;
            let (c, sn) = (th.cos(), th.sin());
            [r * l[(0, 0)] * c, r * (l[(1, 0)] * c + l[(1, 1)] * sn)]
        })
        .collect())
}

/// Closed polyline CSV with columns `x_i, x_j` (1-based names).
pub fn write_polyline<W: Write>(points: &[[f64; 2]], i: usize, j: usize, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([format!("x_{}", i + 1), format!("x_{}", j + 1)])?;
    for p in points.iter().chain(points.first()) {
        csv.write_record([format!("{:e}", p[0]), format!("{:e}", p[1])])?;
    }
    csv.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })
}
