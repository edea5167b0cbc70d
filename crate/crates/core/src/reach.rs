//! Monte-Carlo sampling of the empirical reachable set from `x₁ = 0`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{boundedness_diagnostic, BoundednessVerdict, DangerSet, Ellipsoid, InputBounds, LtiSystem};

/// Largest number of states a [`PointCloud`] keeps.
pub const DEFAULT_POINT_CAP: usize = 20_000_000;

/// Per-step probability that a bang-bang channel flips sign.
pub const SWITCH_PROBABILITY: f64 = 0.1;

/// Relative slack on the level when counting a state as inside an ellipsoid.
pub const CONTAINMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum Policy {
    /// Each input drawn uniformly from `[−√γᵢ, √γᵢ]`.
    #[default]
    UniformBox,
    /// Each input at `±√γᵢ`, flipping sign with probability [`SWITCH_PROBABILITY`].
    BangBang,
    /// Fraction of trajectories run bang-bang; the rest are uniform.
    Mixed(f64),
}

impl Policy {
    fn validate(&self) -> Result<()> {
        match *self {
            Policy::Mixed(r) if !(0.0..=1.0).contains(&r) => Err(Error::validation(
                "policy",
                format!("mixed ratio must lie in [0, 1], got {r}"),
            )),
            _ => Ok(()),
        }
    }

    fn bang_bang(&self, index: usize) -> bool {
        match *self {
            Policy::UniformBox => false,
            Policy::BangBang => true,
            // Spreads the bang-bang trajectories evenly over the index range.
            Policy::Mixed(r) => ((index + 1) as f64 * r).floor() > (index as f64 * r).floor(),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::UniformBox => write!(f, "uniform"),
            Policy::BangBang => write!(f, "bang-bang"),
            Policy::Mixed(r) => write!(f, "mixed:{r}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// `uniform`, `bang-bang` or `mixed:<ratio>`.
    fn from_str(s: &str) -> Result<Self> {
        let p = match s.trim() {
            "uniform" | "uniform-box" => Policy::UniformBox,
            "bang-bang" | "bangbang" => Policy::BangBang,
            other => match other.strip_prefix("mixed:") {
                Some(r) => Policy::Mixed(
                    r.parse()
                        .map_err(|_| Error::validation("policy", format!("bad mixed ratio '{r}'")))?,
                ),
                None => {
                    return Err(Error::validation(
                        "policy",
                        format!("expected uniform, bang-bang or mixed:<ratio>, got '{other}'"),
                    ))
                }
            },
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n_traj: usize,
    /// States per trajectory, counting `x₁ = 0`.
    pub horizon: usize,
    pub seed: u64,
    #[serde(default)]
    pub policy: Policy,
    /// Worker threads; `0` uses every core. Results do not depend on this.
    #[serde(default, skip_serializing)]
    pub threads: usize,
    #[serde(default = "default_cap", skip_serializing)]
    pub point_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_POINT_CAP
}

impl SampleConfig {
    pub fn new(n_traj: usize, horizon: usize, seed: u64, policy: Policy) -> Self {
        Self {
            n_traj,
            horizon,
            seed,
            policy,
            threads: 0,
            point_cap: DEFAULT_POINT_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::validation("n_traj", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.point_cap == 0 {
            return Err(Error::validation("point_cap", "must be at least 1"));
        }
        self.policy.validate()
    }

    fn total(&self) -> usize {
        self.n_traj.saturating_mul(self.horizon)
    }
}

/// Row-major copy of the dynamics for the inner loop.
struct Kernel {
    n: usize,
    m: usize,
    f: Vec<f64>,
    g: Vec<f64>,
    amp: Vec<f64>,
}

impl Kernel {
    fn new(sys: &LtiSystem, bounds: &InputBounds) -> Result<Self> {
        if bounds.len() != sys.m() {
            return Err(Error::dim("gamma", sys.m(), bounds.len()));
        }
        let (n, m) = (sys.n(), sys.m());
        Ok(Self {
            n,
            m,
            f: (0..n * n).map(|k| sys.f()[(k / n, k % n)]).collect(),
            g: (0..n * m).map(|k| sys.g()[(k / m, k % m)]).collect(),
            amp: bounds.amplitudes(),
        })
    }

    /// Visits every state of trajectory `index`, `x₁ = 0` first.
    fn run(&self, cfg: &SampleConfig, index: usize, mut visit: impl FnMut(&[f64])) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let bang = cfg.policy.bang_bang(index);
        let mut x = vec![0.0; self.n];
        let mut next = vec![0.0; self.n];
        let mut u = vec![0.0; self.m];
        let mut sign: Vec<f64> = if bang {
            (0..self.m)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        } else {
            Vec::new()
        };
        visit(&x);
        for _ in 1..cfg.horizon {
            if bang {
                for (j, s) in sign.iter_mut().enumerate() {
                    if rng.random_bool(SWITCH_PROBABILITY) {
                        *s = -*s;
                    }
                    u[j] = *s * self.amp[j];
                }
            } else {
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj = self.amp[j] * rng.random_range(-1.0..=1.0);
                }
            }
            for (i, xi) in next.iter_mut().enumerate() {
                let fr = &self.f[i * self.n..(i + 1) * self.n];
                let gr = &self.g[i * self.m..(i + 1) * self.m];
                *xi = fr.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                    + gr.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            }
            std::mem::swap(&mut x, &mut next);
            visit(&x);
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    states: Vec<f64>,
    /// Every `stride`-th visited state is stored.
    pub stride: usize,
    pub visited: usize,
    pub config: SampleConfig,
    pub boundedness: BoundednessVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Containment {
    pub inside: usize,
    pub total: usize,
    pub fraction: f64,
    /// `max xᵀPx / α` over the states checked.
    pub max_level: f64,
}

impl Containment {
    fn empty() -> Self {
        Self {
            inside: 0,
            total: 0,
            fraction: 1.0,
            max_level: 0.0,
        }
    }

    fn add(&mut self, level: f64) {
        self.total += 1;
        if level <= 1.0 + CONTAINMENT_TOL {
            self.inside += 1;
        }
        self.max_level = self.max_level.max(level);
    }

    fn merge(mut self, other: Self) -> Self {
        self.inside += other.inside;
        self.total += other.total;
        self.max_level = self.max_level.max(other.max_level);
        self
    }

    fn finish(mut self) -> Self {
        self.fraction = if self.total == 0 {
            1.0
        } else {
            self.inside as f64 / self.total as f64
        };
        self
    }
}

struct Level {
    p: Vec<f64>,
    inv_alpha: f64,
    n: usize,
}

impl Level {
    fn new(e: &Ellipsoid) -> Self {
        let n = e.dim();
        Self {
            p: (0..n * n).map(|k| e.shape()[(k / n, k % n)]).collect(),
            inv_alpha: 1.0 / e.level(),
            n,
        }
    }

    fn of(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..self.n {
            let row = &self.p[i * self.n..(i + 1) * self.n];
            v += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        v * self.inv_alpha
    }
}

fn in_danger(danger: &DangerSet, x: &[f64]) -> bool {
    danger
        .halfspaces()
        .iter()
        .any(|h| h.normal.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() >= h.offset)
}

fn check_ellipsoid(dim: usize, e: &Ellipsoid) -> Result<()> {
    if e.dim() != dim {
        return Err(Error::dim("ellipsoid", dim, e.dim()));
    }
    Ok(())
}

impl PointCloud {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn to_vectors(&self) -> Vec<DVector<f64>> {
        self.iter().map(DVector::from_column_slice).collect()
    }

    /// Fraction of stored states inside `e` and the largest level reached.
    pub fn containment(&self, e: &Ellipsoid) -> Result<Containment> {
        check_ellipsoid(self.dim, e)?;
        let lv = Level::new(e);
        let mut c = Containment::empty();
        for x in self.iter() {
            c.add(lv.of(x));
        }
        Ok(c.finish())
    }

    /// Number of stored states inside any half-space of `danger`.
    pub fn danger_violations(&self, danger: &DangerSet) -> Result<usize> {
        danger.check_dim(self.dim)?;
        Ok(self.iter().filter(|x| in_danger(danger, x)).count())
    }

    /// Largest `|x_j|` over the stored states, per coordinate.
    pub fn max_abs(&self) -> Vec<f64> {
        let mut out = vec![0.0_f64; self.dim];
        for x in self.iter() {
            for (o, v) in out.iter_mut().zip(x) {
                *o = o.max(v.abs());
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(
            w,
            "# seed={} n_traj={} horizon={} policy={} stride={} visited={}",
            c.seed, c.n_traj, c.horizon, c.policy, self.stride, self.visited
        )
        .map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record((1..=self.dim).map(|i| format!("x_{i}")))?;
        for x in self.iter() {
            csv.write_record(x.iter().map(|v| format!("{v:e}")))?;
        }
        csv.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Simulates `config.n_traj` trajectories and stores the visited states, thinned
/// uniformly when they exceed `config.point_cap`.
pub fn sample(sys: &LtiSystem, bounds: &InputBounds, config: &SampleConfig) -> Result<PointCloud> {
    config.validate()?;
    let kernel = Kernel::new(sys, bounds)?;
    let boundedness = boundedness_diagnostic(sys)?.verdict;
    let total = config.total();
    let stride = total.div_ceil(config.point_cap).max(1);
    let n = sys.n();
    let horizon = config.horizon;
    let run = |index: usize| {
        let mut out = Vec::new();
        let mut k = index * horizon;
        kernel.run(config, index, |x| {
            if k.is_multiple_of(stride) {
                out.extend_from_slice(x);
            }
            k += 1;
        });
        out
    };
    let chunks: Vec<Vec<f64>> = pool(config.threads)?.install(|| (0..config.n_traj).into_par_iter().map(run).collect());
    Ok(PointCloud {
        dim: n,
        states: chunks.concat(),
        stride,
        visited: total,
        config: config.clone(),
        boundedness,
    })
}

/// Streaming statistics over every visited state, without storing the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    pub visited: usize,
    /// One entry per ellipsoid passed to [`survey`].
    pub containment: Vec<Containment>,
    /// Visited states inside the danger set, if one was given.
    pub violations: usize,
    pub max_abs: Vec<f64>,
    pub boundedness: BoundednessVerdict,
}

#[derive(Clone)]
struct Partial {
    containment: Vec<Containment>,
    violations: usize,
    max_abs: Vec<f64>,
}

impl Partial {
    fn merge(mut self, other: Self) -> Self {
        self.containment = self
            .containment
            .into_iter()
            .zip(other.containment)
            .map(|(a, b)| a.merge(b))
            .collect();
        self.violations += other.violations;
        for (a, b) in self.max_abs.iter_mut().zip(other.max_abs) {
            *a = a.max(b);
        }
        self
    }
}

/// Runs the same trajectories as [`sample`] and checks every visited state against
/// each ellipsoid (the level along the whole trajectory, not only its end) and the
/// optional danger set.
pub fn survey(
    sys: &LtiSystem,
    bounds: &InputBounds,
    config: &SampleConfig,
    ellipsoids: &[Ellipsoid],
    danger: Option<&DangerSet>,
) -> Result<Survey> {
    config.validate()?;
    let kernel = Kernel::new(sys, bounds)?;
    let n = sys.n();
    for e in ellipsoids {
        check_ellipsoid(n, e)?;
    }
    if let Some(d) = danger {
        d.check_dim(n)?;
    }
    let levels: Vec<Level> = ellipsoids.iter().map(Level::new).collect();
    let empty = Partial {
        containment: vec![Containment::empty(); levels.len()],
        violations: 0,
        max_abs: vec![0.0; n],
    };
    let run = |index: usize| {
        let mut part = empty.clone();
        kernel.run(config, index, |x| {
            for (c, lv) in part.containment.iter_mut().zip(&levels) {
                c.add(lv.of(x));
            }
            if danger.is_some_and(|d| in_danger(d, x)) {
                part.violations += 1;
            }
            for (o, v) in part.max_abs.iter_mut().zip(x) {
                *o = o.max(v.abs());
            }
        });
        part
    };
    let total = pool(config.threads)?.install(|| {
        (0..config.n_traj)
            .into_par_iter()
            .map(run)
            .reduce(|| empty.clone(), Partial::merge)
    });
    Ok(Survey {
        visited: config.total(),
        containment: total.containment.into_iter().map(Containment::finish).collect(),
        violations: total.violations,
        max_abs: total.max_abs,
        boundedness: boundedness_diagnostic(sys)?.verdict,
    })
}
