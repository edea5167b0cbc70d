//! Vehicle platoon with PD spacing control and a secondary controller that an
//! attacker can hijack.
//!
//! State `x = [d̃₁ … d̃ₙ₋₁, ṽ₁ … ṽₙ]` holds gap and speed errors around the desired
//! formation (`dᵢ = d̃ᵢ + dᵢ*`, `vⱼ = ṽⱼ + v*`). The secondary command `w` enters through
//! `G` and is the only saturated signal.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DangerSet, Halfspace, InputBounds, LtiSystem};

pub const KMH: f64 = 1.0 / 3.6;

/// Physical bounds of the three-vehicle platoon.
pub const PHYSICAL_BOUNDS: [f64; 3] = [1.2, 0.8, 1.1];

/// Relative change at which the Riccati iteration stops.
pub const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonParams {
    pub n_vehicles: usize,
    /// Sampling period in seconds.
    pub dt: f64,
    /// Friction coefficient per vehicle, negative.
    pub beta: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    /// Desired gaps in meters, one per adjacent pair.
    pub d_star: Vec<f64>,
    /// Desired speed in m/s.
    pub v_star: f64,
}

impl PlatoonParams {
    /// Three vehicles, `Δt = 0.5 s`, `β = −0.1`, `kp = 0.2`, `kd = 0.3`, `d* = 1 m`, `v* = 60 km/h`.
    pub fn three_vehicle() -> Self {
        Self::uniform(3, 0.5, -0.1, 0.2, 0.3, 1.0, 60.0 * KMH)
    }

    pub fn uniform(n_vehicles: usize, dt: f64, beta: f64, kp: f64, kd: f64, d_star: f64, v_star: f64) -> Self {
        Self {
            n_vehicles,
            dt,
            beta: vec![beta; n_vehicles],
            kp: vec![kp; n_vehicles],
            kd: vec![kd; n_vehicles],
            d_star: vec![d_star; n_vehicles.saturating_sub(1)],
            v_star,
        }
    }

    pub fn set_v_star_kmh(&mut self, kmh: f64) {
        self.v_star = kmh * KMH;
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_vehicles - 1
    }

    pub fn gaps(&self) -> usize {
        self.n_vehicles - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vehicles;
        if n < 2 {
            return Err(Error::validation(
                "platoon.n_vehicles",
                format!("need at least 2 vehicles, got {n}"),
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::validation(
                "platoon.dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        for (name, v, len) in [
            ("beta", &self.beta, n),
            ("kp", &self.kp, n),
            ("kd", &self.kd, n),
            ("d_star", &self.d_star, n - 1),
        ] {
            if v.len() != len {
                return Err(Error::validation(
                    format!("platoon.{name}"),
                    format!("expected {len} entries, got {}", v.len()),
                ));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::validation(format!("platoon.{name}[{i}]"), "must be finite"));
            }
        }
        if let Some(i) = self.beta.iter().position(|&b| b >= 0.0) {
            return Err(Error::validation(
                format!("platoon.beta[{i}]"),
                "friction coefficient must be negative",
            ));
        }
        if let Some(i) = self.d_star.iter().position(|&d| d <= 0.0) {
            return Err(Error::validation(
                format!("platoon.d_star[{i}]"),
                "desired gap must be positive",
            ));
        }
        if !self.v_star.is_finite() {
            return Err(Error::validation("platoon.v_star", "must be finite"));
        }
        Ok(())
    }
}

/// Closed-loop `(F, G)` of the platoon with the PD terms folded into `F`.
pub fn build_matrices(params: &PlatoonParams) -> Result<LtiSystem> {
    params.validate()?;
    let nv = params.n_vehicles;
    let ng = nv - 1;
    let n = ng + nv;
    let dt = params.dt;
    let mut f = DMatrix::zeros(n, n);
    for i in 0..ng {
        f[(i, i)] = 1.0;
        f[(i, ng + i)] = -dt;
        f[(i, ng + i + 1)] = dt;
    }
    for j in 0..nv {
        let row = ng + j;
        let (kp, kd) = (params.kp[j], params.kd[j]);
        let mut neighbours = 0.0;
        if j < ng {
            f[(row, j)] += kp;
        }
        if j > 0 {
            f[(row, j - 1)] -= kp;
            f[(row, row - 1)] = kd;
            neighbours += 1.0;
        }
        if j + 1 < nv {
            f[(row, row + 1)] = kd;
            neighbours += 1.0;
        }
        f[(row, row)] = 1.0 + params.beta[j] - kd * neighbours;
    }
    let mut g = DMatrix::zeros(n, nv);
    for j in 0..nv {
        g[(ng + j, j)] = dt;
    }
    LtiSystem::new(f, g)
}

/// A crash between vehicles `i` and `i+1` happens when `d̃ᵢ <= −dᵢ*`.
pub fn danger_set(params: &PlatoonParams) -> Result<DangerSet> {
    params.validate()?;
    let n = params.state_dim();
    let hs = params
        .d_star
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut c = DVector::zeros(n);
            c[i] = -1.0;
            Halfspace { normal: c, offset: d }
        })
        .collect();
    DangerSet::new(hs)
}

/// Infinite-horizon LQR gain with identity weights, signed so that `w = K x`.
pub fn secondary_gain(sys: &LtiSystem) -> Result<DMatrix<f64>> {
    secondary_gain_weighted(
        sys,
        &DMatrix::identity(sys.n(), sys.n()),
        &DMatrix::identity(sys.m(), sys.m()),
    )
}

/// LQR gain for state weight `q` and input weight `r` by fixed-point iteration of the
/// Riccati recursion, signed so that `w = K x`.
pub fn secondary_gain_weighted(sys: &LtiSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (sys.n(), sys.m());
    if q.shape() != (n, n) {
        return Err(Error::dim(
            "state weight",
            format!("{n}x{n}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    if r.shape() != (m, m) {
        return Err(Error::dim(
            "input weight",
            format!("{m}x{m}"),
            format!("{}x{}", r.nrows(), r.ncols()),
        ));
    }
    let (f, g) = (sys.f(), sys.g());
    let ft = f.transpose();
    let gt = g.transpose();
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + &gt * p * g;
        let ch = linalg::cholesky(&linalg::sym(&s))
            .ok_or_else(|| Error::Numerical("Riccati: R + GᵀPG is not positive definite".into()))?;
        Ok(ch.solve(&(&gt * p * f)))
    };
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let k = gain(&p)?;
        let next = linalg::sym(&(q + &ft * &p * f - &ft * &p * g * &k));
        if next.iter().any(|v| !v.is_finite()) || linalg::max_abs(&next) > 1e15 {
            return Err(Error::Numerical(
                "Riccati iteration diverged; (F, G) may not be stabilizable".into(),
            ));
        }
        let change = linalg::max_abs(&(&next - &p));
        p = next;
        if change <= RICCATI_TOL * linalg::max_abs(&p) {
            return Ok(-gain(&p)?);
        }
    }
    Err(Error::Numerical("Riccati iteration did not converge".into()))
}

/// Attack command per channel; saturated by the bounds in force before it acts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSignal {
    /// `±amplitude`, period in seconds, channel `j` delayed by `phase[j]` seconds.
    SquareWave {
        amplitude: f64,
        period: f64,
        phase: Vec<f64>,
    },
    /// Uniform in `[−amplitude, amplitude]`, redrawn every `hold` steps.
    Random {
        amplitude: f64,
        hold: usize,
        seed: u64,
    },
    Constant {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Seconds after which the attacker replaces the secondary command.
    pub start: f64,
    pub signal: AttackSignal,
}

impl AttackSpec {
    /// Full-authority square wave with period 4 s launched at 25 s; adjacent channels
    /// are in antiphase.
    pub fn standard(m: usize) -> Self {
        let period = 4.0;
        Self {
            start: 25.0,
            signal: AttackSignal::SquareWave {
                amplitude: 1e3,
                period,
                phase: (0..m).map(|j| (j % 2) as f64 * period / 2.0).collect(),
            },
        }
    }

    pub fn random(seed: u64, amplitude: f64, hold: usize, start: f64) -> Self {
        Self {
            start,
            signal: AttackSignal::Random { amplitude, hold, seed },
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !self.start.is_finite() {
            return Err(Error::validation("attack.start", "must be finite"));
        }
        match &self.signal {
            AttackSignal::SquareWave {
                amplitude,
                period,
                phase,
            } => {
                if !(amplitude.is_finite() && period.is_finite() && *period > 0.0) {
                    return Err(Error::validation(
                        "attack.signal",
                        "square wave needs finite amplitude and positive period",
                    ));
                }
                if phase.len() != m {
                    return Err(Error::validation(
                        "attack.signal.phase",
                        format!("expected {m} entries, got {}", phase.len()),
                    ));
                }
            }
            AttackSignal::Random { amplitude, hold, .. } => {
                if !amplitude.is_finite() || *hold == 0 {
                    return Err(Error::validation(
                        "attack.signal",
                        "random attack needs finite amplitude and hold >= 1",
                    ));
                }
            }
            AttackSignal::Constant { values } => {
                if values.len() != m || values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(
                        "attack.signal.values",
                        format!("expected {m} finite entries"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Command on `channel` at time `t` (seconds since the attack started) and step `k`.
    pub fn command(&self, channel: usize, t: f64, k: usize) -> f64 {
        match &self.signal {
            AttackSignal::SquareWave {
                amplitude,
                period,
                phase,
            } => {
                let x = ((t - phase[channel]) / period).rem_euclid(1.0);
                if x < 0.5 {
                    *amplitude
                } else {
                    -*amplitude
                }
            }
            AttackSignal::Random { amplitude, hold, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(channel as u64);
                rng.set_word_pos(2 * (k / hold) as u128);
                amplitude * rng.random_range(-1.0..=1.0)
            }
            AttackSignal::Constant { values } => values[channel],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crash {
    pub step: usize,
    pub time: f64,
    /// 1-based indices of the colliding vehicles.
    pub vehicles: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub time: Vec<f64>,
    /// Physical gaps in meters, one row per step.
    pub gaps: Vec<Vec<f64>>,
    /// Physical speeds in m/s.
    pub velocities: Vec<Vec<f64>>,
    /// Secondary command applied after saturation; the last row repeats zeros.
    pub inputs: Vec<Vec<f64>>,
    /// Error state `x̃` per step.
    pub states: Vec<DVector<f64>>,
    pub crash: Option<Crash>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn min_gap(&self) -> f64 {
        self.gaps.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let ng = self.gaps.first().map_or(0, Vec::len);
        let nv = self.velocities.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=ng).map(|i| format!("d_{i}")));
        header.extend((1..=nv).map(|j| format!("v_{j}")));
        header.extend((1..=m).map(|j| format!("u_{j}")));
        header.push("crash".into());
        csv.write_record(&header)?;
        for k in 0..self.len() {
            let crashed = self.crash.is_some_and(|c| c.step == k);
            let mut row = vec![format!("{}", self.time[k])];
            row.extend(self.gaps[k].iter().map(|v| format!("{v:e}")));
            row.extend(self.velocities[k].iter().map(|v| format!("{v:e}")));
            row.extend(self.inputs[k].iter().map(|v| format!("{v:e}")));
            row.push(u8::from(crashed).to_string());
            csv.write_record(&row)?;
        }
        csv.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Formation error with every vehicle `dv` m/s off the desired speed and all gaps at rest.
pub fn speed_offset(params: &PlatoonParams, dv: f64) -> DVector<f64> {
    let mut x = DVector::zeros(params.state_dim());
    for j in 0..params.n_vehicles {
        x[params.gaps() + j] = dv;
    }
    x
}

/// Default starting error: all vehicles 10 km/h below `v*`.
pub fn default_initial(params: &PlatoonParams) -> DVector<f64> {
    speed_offset(params, -10.0 * KMH)
}

/// Clips each channel to `[−√γᵢ, √γᵢ]`.
pub fn saturate(w: &mut [f64], amplitudes: &[f64]) {
    for (v, a) in w.iter_mut().zip(amplitudes) {
        *v = v.clamp(-a, *a);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub params: PlatoonParams,
    pub sys: LtiSystem,
    pub gain: DMatrix<f64>,
}

impl Simulation {
    pub fn new(params: PlatoonParams) -> Result<Self> {
        let sys = build_matrices(&params)?;
        let gain = secondary_gain(&sys)?;
        Ok(Self { params, sys, gain })
    }

    /// Iterates `x ← F x + G sat(w)` for `duration` seconds, where `w = K x` until the
    /// attack starts and the attack command afterwards. Stops at the first crash.
    pub fn run(
        &self,
        bounds: &InputBounds,
        attack: Option<&AttackSpec>,
        duration: f64,
        initial: &DVector<f64>,
    ) -> Result<SimTrace> {
        let p = &self.params;
        let (n, m) = (self.sys.n(), self.sys.m());
        if bounds.len() != m {
            return Err(Error::dim("gamma", m, bounds.len()));
        }
        if initial.len() != n {
            return Err(Error::dim("initial state", n, initial.len()));
        }
        if let Some(a) = attack {
            a.validate(m)?;
        }
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(Error::validation(
                "duration",
                format!("must be non-negative, got {duration}"),
            ));
        }
        let steps = (duration / p.dt).round() as usize;
        let amp = bounds.amplitudes();
        let ng = p.gaps();
        let mut trace = SimTrace {
            time: Vec::with_capacity(steps + 1),
            gaps: Vec::with_capacity(steps + 1),
            velocities: Vec::with_capacity(steps + 1),
            inputs: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity(steps + 1),
            crash: None,
        };
        let mut x = initial.clone();
        for k in 0..=steps {
            let t = k as f64 * p.dt;
            let gaps: Vec<f64> = (0..ng).map(|i| x[i] + p.d_star[i]).collect();
            let crash = gaps.iter().position(|&d| d <= 0.0);
            trace.time.push(t);
            trace
                .velocities
                .push((0..p.n_vehicles).map(|j| x[ng + j] + p.v_star).collect());
            trace.gaps.push(gaps);
            trace.states.push(x.clone());
            if let Some(i) = crash {
                trace.crash = Some(Crash {
                    step: k,
                    time: t,
                    vehicles: (i + 1, i + 2),
                });
                trace.inputs.push(vec![0.0; m]);
                break;
            }
            if k == steps {
                trace.inputs.push(vec![0.0; m]);
                break;
            }
            let mut w: Vec<f64> = match attack {
                Some(a) if t >= a.start - 1e-9 => {
                    let k0 = k - (a.start / p.dt).round().min(k as f64) as usize;
                    (0..m).map(|j| a.command(j, t - a.start, k0)).collect()
                }
                _ => (&self.gain * &x).iter().copied().collect(),
            };
            saturate(&mut w, &amp);
            let u = DVector::from_column_slice(&w);
            x = self.sys.step(&x, &u);
            trace.inputs.push(w);
        }
        Ok(trace)
    }
}

/// Convenience wrapper around [`Simulation::run`].
pub fn simulate(
    params: &PlatoonParams,
    bounds: &InputBounds,
    attack: Option<&AttackSpec>,
    duration: f64,
    initial: &DVector<f64>,
) -> Result<SimTrace> {
    Simulation::new(params.clone())?.run(bounds, attack, duration, initial)
}
