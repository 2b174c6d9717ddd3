//! Master-equation propagation and parameter-sweep protocols.
//!
//! A sweep visits the grid r_k = start + kΔ, Δ = (end − start)/N, holding
//! each value for a dwell time t_c (staircase) or passing through it at
//! constant velocity v = Δ/t_c (linear ramp). Observables are recorded at
//! the end of every dwell, i.e. at multiples of t_c.

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Cell, Table};
use crate::krylov::bdot;
use crate::liouville::AffineLiouvillian;
use crate::model::{occupation_of, trace_of, Branch, DensityState, ModelParams, ObservableSeries, SweepParameter};
use crate::spectral::{self, MetastablePair, ShiftInvert, SoftOptions};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const MINUS_I: C64 = C64 { re: 0.0, im: -1.0 };

/// Trace drift at which a propagation is abandoned.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-6;

/// RK4 step: min(0.005, t_c/2000) with a stability cap 2/‖𝓛‖.
pub fn default_dt(dwell: f64, norm: f64) -> f64 {
    0.005f64.min(dwell / 2000.0).min(2.0 / norm.max(1e-300))
}

/// Classical RK4 for i dρ/dt = 𝓛(r(t)) ρ from t0 over `duration`, with the
/// step shrunk so it divides the interval. `observe` sees the state after
/// every step.
pub fn rk4_propagate(
    family: &AffineLiouvillian,
    value_at: impl Fn(f64) -> f64,
    rho: &mut [C64],
    t0: f64,
    duration: f64,
    dt: f64,
    mut observe: impl FnMut(f64, &[C64]),
) -> Result<()> {
    let n = family.dim();
    if rho.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: rho.len(),
        });
    }
    if !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidParams(format!("need dt > 0 and duration ≥ 0, got {dt}, {duration}")));
    }
    if duration == 0.0 {
        return Ok(());
    }
    let steps = (duration / dt).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let d = family.cutoff();
    let tr0 = trace_of(rho, d);

    let mut k1 = vec![ZERO; n];
    let mut k2 = vec![ZERO; n];
    let mut k3 = vec![ZERO; n];
    let mut k4 = vec![ZERO; n];
    let mut tmp = vec![ZERO; n];
    // f(t, x) = −i 𝓛(t) x
    let rhs = |t: f64, x: &[C64], out: &mut [C64]| {
        family.apply_at(value_at(t), x, out);
        out.iter_mut().for_each(|z| *z *= MINUS_I);
    };
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        rhs(t, rho, &mut k1);
        for i in 0..n {
            tmp[i] = rho[i] + 0.5 * h * k1[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = rho[i] + 0.5 * h * k2[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = rho[i] + h * k3[i];
        }
        rhs(t + h, &tmp, &mut k4);
        for i in 0..n {
            rho[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let drift = (trace_of(rho, d) - tr0).norm();
        if !(drift <= TRACE_DRIFT_LIMIT) {
            return Err(Error::StepSize {
                drift,
                time: t + h,
                dt: h,
            });
        }
        observe(t + h, rho);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Staircase,
    Linear,
}

/// Forward runs start → end, backward end → start; a cycle runs forward and
/// then returns from the final state without resetting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepProtocol {
    pub parameter: SweepParameter,
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub dwell: f64,
    pub kind: ProtocolKind,
    pub direction: Direction,
    /// Number of Δ-offset points before the first grid value; the initial
    /// steady state is taken there.
    pub lead_in: usize,
}

impl SweepProtocol {
    pub fn new(parameter: SweepParameter, start: f64, end: f64, steps: usize, dwell: f64) -> Result<Self> {
        let p = Self {
            parameter,
            start,
            end,
            steps,
            dwell,
            kind: ProtocolKind::Staircase,
            direction: Direction::Forward,
            lead_in: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Protocol("sweep needs at least one step".into()));
        }
        if !(self.dwell > 0.0) || !self.dwell.is_finite() {
            return Err(Error::Protocol(format!("dwell time must be positive, got {}", self.dwell)));
        }
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Protocol("sweep bounds must be finite".into()));
        }
        Ok(())
    }

    pub fn with_kind(self, kind: ProtocolKind) -> Self {
        Self { kind, ..self }
    }

    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }

    pub fn with_lead_in(self, lead_in: usize) -> Self {
        Self { lead_in, ..self }
    }

    /// Δ = (end − start)/N
    pub fn increment(&self) -> f64 {
        (self.end - self.start) / self.steps as f64
    }

    /// v = (end − start)/(N t_c)
    pub fn velocity(&self) -> f64 {
        self.increment() / self.dwell
    }

    /// Grid r_k for k = −lead_in, …, N in ascending k.
    pub fn grid(&self) -> Vec<f64> {
        let delta = self.increment();
        let lead = self.lead_in as i64;
        (-lead..=self.steps as i64).map(|k| self.start + k as f64 * delta).collect()
    }

    /// Grid indices visited in order, starting with the initial point, each
    /// tagged with its branch.
    pub fn path(&self) -> Vec<(usize, Branch)> {
        let top = self.steps + self.lead_in;
        let up = (0..=top).map(|i| (i, Branch::Forward));
        let down = (0..=top).rev().map(|i| (i, Branch::Backward));
        match self.direction {
            Direction::Forward => up.collect(),
            Direction::Backward => down.collect(),
            Direction::Cycle => up.chain(down.skip(1)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    /// Position along the path; 0 is the initial state.
    pub step: usize,
    pub value: f64,
    pub time: f64,
    pub occupation: f64,
    /// Soft-mode amplitude in the observable gauge, when the engine has it.
    pub chi: Option<C64>,
    pub branch: Branch,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub protocol: SweepProtocol,
    pub engine: Engine,
    pub points: Vec<SweepPoint>,
    /// Vectorized state at every dwell end, if requested.
    pub snapshots: Option<Vec<Vec<C64>>>,
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn occupations(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.occupation).collect()
    }

    /// Points of one branch; in a cycle the turning point belongs to the
    /// forward branch and also starts the backward one.
    pub fn branch_points(&self, branch: Branch) -> Vec<SweepPoint> {
        let mut out: Vec<SweepPoint> = self.points.iter().filter(|p| p.branch == branch).copied().collect();
        if branch == Branch::Backward && self.protocol.direction == Direction::Cycle {
            if let Some(turn) = self.points.iter().rfind(|p| p.branch == Branch::Forward) {
                out.insert(0, SweepPoint { branch: Branch::Backward, ..*turn });
            }
        }
        out
    }

    /// n against the parameter along one branch.
    pub fn branch(&self, branch: Branch) -> Result<ObservableSeries> {
        let pts = self.branch_points(branch);
        ObservableSeries::new(pts.iter().map(|p| p.value).collect(), pts.iter().map(|p| p.occupation).collect(), branch)
    }

    pub fn final_state(&self) -> Option<&[C64]> {
        self.snapshots.as_ref().and_then(|s| s.last()).map(Vec::as_slice)
    }

    /// Columns k, parameter value, time, n, Re χ, Im χ, branch.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["k", self.protocol.parameter.name(), "time", "n", "re_chi", "im_chi", "branch"]);
        for p in &self.points {
            let chi = p.chi.unwrap_or(C64::new(f64::NAN, f64::NAN));
            t.push(vec![
                p.step.into(),
                p.value.into(),
                p.time.into(),
                p.occupation.into(),
                chi.re.into(),
                chi.im.into(),
                Cell::from(p.branch.label()),
            ]);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    /// Full-mode recursion with a dense eigenproblem per step.
    Exact,
    /// Piecewise-constant 𝓛 integrated with RK4.
    Propagated,
    /// Two-mode recursion |ρ⁰) + |ρ¹) χ.
    Metastable,
    /// Continuous ramp integrated with RK4.
    LinearRamp,
}

impl Engine {
    pub fn label(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::Propagated => "propagated",
            Engine::Metastable => "metastable",
            Engine::LinearRamp => "linear",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Engine::Exact),
            "propagated" | "rk4" => Ok(Engine::Propagated),
            "metastable" | "two-mode" => Ok(Engine::Metastable),
            "linear" | "ramp" => Ok(Engine::LinearRamp),
            other => Err(Error::Protocol(format!("unknown sweep engine '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Initial state; defaults to the steady state at the first path point.
    pub initial: Option<Vec<C64>>,
    pub snapshots: bool,
    /// RK4 step; defaults to [`default_dt`].
    pub dt: Option<f64>,
    pub soft: Option<SoftOptions>,
}

impl SweepOptions {
    fn soft(&self) -> SoftOptions {
        self.soft.unwrap_or_else(SoftOptions::axis)
    }
}

/// Dispatches on the engine; the protocol kind must match it.
pub fn run(params: &ModelParams, protocol: &SweepProtocol, engine: Engine, opts: &SweepOptions) -> Result<SweepResult> {
    match engine {
        Engine::Exact => staircase_exact(params, protocol, opts),
        Engine::Propagated => staircase_propagated(params, protocol, opts),
        Engine::Metastable => staircase_metastable(params, protocol, opts),
        Engine::LinearRamp => linear_ramp(params, protocol, opts),
    }
}

fn require_kind(protocol: &SweepProtocol, kind: ProtocolKind) -> Result<()> {
    protocol.validate()?;
    if protocol.kind != kind {
        return Err(Error::Protocol(format!("engine expects a {kind:?} protocol, got {:?}", protocol.kind)));
    }
    Ok(())
}

fn initial_state(
    family: &AffineLiouvillian,
    value: f64,
    opts: &SweepOptions,
    cache: &mut ShiftInvert,
) -> Result<Vec<C64>> {
    match &opts.initial {
        Some(v) if v.len() != family.dim() => Err(Error::DimensionMismatch {
            expected: family.dim(),
            actual: v.len(),
        }),
        Some(v) => Ok(v.clone()),
        None => Ok(spectral::steady_state_with(&family.at(value), cache)?.into_vector()),
    }
}

struct Recorder {
    points: Vec<SweepPoint>,
    snapshots: Option<Vec<Vec<C64>>>,
    dwell: f64,
    d: usize,
}

impl Recorder {
    fn new(protocol: &SweepProtocol, opts: &SweepOptions, d: usize) -> Self {
        Self {
            points: Vec::new(),
            snapshots: opts.snapshots.then(Vec::new),
            dwell: protocol.dwell,
            d,
        }
    }

    fn record(&mut self, value: f64, branch: Branch, rho: &[C64], chi: Option<C64>) {
        let step = self.points.len();
        self.points.push(SweepPoint {
            step,
            value,
            time: step as f64 * self.dwell,
            occupation: occupation_of(rho, self.d).re,
            chi,
            branch,
        });
        if let Some(s) = self.snapshots.as_mut() {
            s.push(rho.to_vec());
        }
    }

    fn finish(self, protocol: &SweepProtocol, engine: Engine, warnings: Vec<String>) -> SweepResult {
        SweepResult {
            protocol: *protocol,
            engine,
            points: self.points,
            snapshots: self.snapshots,
            warnings,
        }
    }
}

/// Full-mode recursion |ρ_k) = Σ_q e^{−iλ_q t_c} |ρ^q_k)(ρ̄^q_k|ρ_{k−1})
/// with a dense eigenproblem at every grid value.
pub fn staircase_exact(params: &ModelParams, protocol: &SweepProtocol, opts: &SweepOptions) -> Result<SweepResult> {
    require_kind(protocol, ProtocolKind::Staircase)?;
    let family = AffineLiouvillian::new(params, protocol.parameter)?;
    let grid = protocol.grid();
    let path = protocol.path();
    let number = crate::operators::number(family.cutoff());
    let spectra: Vec<_> = grid
        .par_iter()
        .map(|&r| spectral::eig_full(&family.at(r)))
        .collect::<Result<_>>()?;
    let mut cache = ShiftInvert::new();
    let mut rho = initial_state(&family, grid[path[0].0], opts, &mut cache)?;
    let mut rec = Recorder::new(protocol, opts, family.cutoff());
    let soft_projection = |spec: &crate::SpectralData, rho: &[C64]| -> Option<C64> {
        let slow = (1..spec.len()).find(|&q| spec.is_real(q))?;
        let fixed = spectral::gauge_fix_observable(&spec.select(&[0, slow]), &number).ok()?;
        Some(fixed.project(1, rho))
    };
    let (i0, b0) = path[0];
    let chi0 = soft_projection(&spectra[i0], &rho);
    rec.record(grid[i0], b0, &rho, chi0);
    for &(i, branch) in &path[1..] {
        rho = spectra[i].propagate(&rho, protocol.dwell);
        let chi = soft_projection(&spectra[i], &rho);
        rec.record(grid[i], branch, &rho, chi);
    }
    Ok(rec.finish(protocol, Engine::Exact, Vec::new()))
}

/// The same staircase as [`staircase_exact`], with every plateau integrated
/// by RK4 instead of diagonalized; usable at any cutoff.
pub fn staircase_propagated(params: &ModelParams, protocol: &SweepProtocol, opts: &SweepOptions) -> Result<SweepResult> {
    require_kind(protocol, ProtocolKind::Staircase)?;
    propagate_path(params, protocol, opts, Engine::Propagated)
}

/// Continuous ramp r(t) through the staircase grid at v = Δ/t_c, sampled at
/// multiples of t_c.
pub fn linear_ramp(params: &ModelParams, protocol: &SweepProtocol, opts: &SweepOptions) -> Result<SweepResult> {
    require_kind(protocol, ProtocolKind::Linear)?;
    propagate_path(params, protocol, opts, Engine::LinearRamp)
}

fn propagate_path(params: &ModelParams, protocol: &SweepProtocol, opts: &SweepOptions, engine: Engine) -> Result<SweepResult> {
    let family = AffineLiouvillian::new(params, protocol.parameter)?;
    let grid = protocol.grid();
    let path = protocol.path();
    let (lo, hi) = (grid[0].min(grid[grid.len() - 1]), grid[0].max(grid[grid.len() - 1]));
    let dt = opts.dt.unwrap_or_else(|| default_dt(protocol.dwell, family.norm_bound(lo, hi)));
    let mut cache = ShiftInvert::new();
    let mut rho = initial_state(&family, grid[path[0].0], opts, &mut cache)?;
    let mut rec = Recorder::new(protocol, opts, family.cutoff());
    rec.record(grid[path[0].0], path[0].1, &rho, None);
    let tc = protocol.dwell;
    for (k, w) in path.windows(2).enumerate() {
        let (from, to) = (grid[w[0].0], grid[w[1].0]);
        let t0 = k as f64 * tc;
        match engine {
            Engine::LinearRamp => {
                let v = (to - from) / tc;
                rk4_propagate(&family, |t| from + v * (t - t0), &mut rho, t0, tc, dt, |_, _| {})?
            }
            _ => rk4_propagate(&family, |_| to, &mut rho, t0, tc, dt, |_, _| {})?,
        }
        rec.record(to, w[1].1, &rho, None);
    }
    Ok(rec.finish(protocol, engine, Vec::new()))
}

/// Per-point scalars of the two-mode description along a grid, with the
/// overlaps between neighbouring points that the recursion needs.
#[derive(Debug, Clone)]
pub struct MetastableChain {
    pub values: Vec<f64>,
    pub lambda: Vec<C64>,
    pub n_steady: Vec<f64>,
    /// tr[b†b ρ¹]; 1 in the observable gauge.
    pub n_soft: Vec<f64>,
    /// Slowest neglected rate.
    pub next_rate: Vec<f64>,
    pub slower_oscillating: Vec<bool>,
    /// (ρ̄¹_{i+1}|ρ⁰_i), (ρ̄¹_{i+1}|ρ¹_i)
    up: Vec<(C64, C64)>,
    /// (ρ̄¹_i|ρ⁰_{i+1}), (ρ̄¹_i|ρ¹_{i+1})
    down: Vec<(C64, C64)>,
}

impl MetastableChain {
    /// Solves the soft-mode problem at every grid value. Work is done in
    /// parallel blocks so only two blocks of eigenvectors are alive at once.
    pub fn build(params: &ModelParams, parameter: SweepParameter, values: &[f64], soft: &SoftOptions) -> Result<Self> {
        let family = AffineLiouvillian::new(params, parameter)?;
        let d = family.cutoff();
        let block = (4 * rayon::current_num_threads()).max(8);
        let mut out = Self {
            values: values.to_vec(),
            lambda: Vec::with_capacity(values.len()),
            n_steady: Vec::with_capacity(values.len()),
            n_soft: Vec::with_capacity(values.len()),
            next_rate: Vec::with_capacity(values.len()),
            slower_oscillating: Vec::with_capacity(values.len()),
            up: Vec::new(),
            down: Vec::new(),
        };
        let mut previous: Option<MetastablePair> = None;
        for chunk in values.chunks(block) {
            let pairs: Vec<MetastablePair> = chunk
                .par_iter()
                .map_init(ShiftInvert::new, |cache, &r| {
                    spectral::metastable_pair(&family.at(r), soft, cache).map_err(|e| at_point(e, parameter, r))
                })
                .collect::<Result<_>>()?;
            for pair in pairs {
                if let Some(prev) = &previous {
                    out.up.push((bdot(pair.left(), prev.steady()), bdot(pair.left(), prev.right())));
                    out.down.push((bdot(prev.left(), pair.steady()), bdot(prev.left(), pair.right())));
                }
                out.lambda.push(pair.lambda());
                out.n_steady.push(occupation_of(pair.steady(), d).re);
                out.n_soft.push(occupation_of(pair.right(), d).re);
                out.next_rate.push(pair.next_rate);
                out.slower_oscillating.push(pair.slower_oscillating);
                previous = Some(pair);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rate(&self, i: usize) -> f64 {
        -self.lambda[i].im
    }

    /// (ρ̄¹_to|ρ⁰_from), (ρ̄¹_to|ρ¹_from) for neighbouring or equal indices.
    fn transfer(&self, from: usize, to: usize) -> (C64, C64) {
        if from == to {
            (ZERO, C64::new(1.0, 0.0))
        } else if to == from + 1 {
            self.up[from]
        } else if from == to + 1 {
            self.down[to]
        } else {
            panic!("metastable recursion only moves between neighbouring grid points")
        }
    }

    /// χ after a dwell at `to` starting from the two-mode state at `from`.
    pub fn step(&self, from: usize, to: usize, chi: C64, dwell: f64) -> C64 {
        let (a, b) = self.transfer(from, to);
        (a + b * chi) * (MINUS_I * self.lambda[to] * dwell).exp()
    }

    pub fn occupation(&self, i: usize, chi: C64) -> f64 {
        self.n_steady[i] + (chi * self.n_soft[i]).re
    }

    /// Violations of γ₁ ≪ 1/t_c ≪ γ_{q≥2}, checked as min γ₁ < 1/t_c < κ/2
    /// and per point γ₂ t_c ≥ 2.
    pub fn separation_warnings(&self, dwell: f64) -> Vec<String> {
        let mut w = Vec::new();
        let min_rate = (0..self.len()).map(|i| self.rate(i)).fold(f64::INFINITY, f64::min);
        if !(min_rate < 1.0 / dwell) {
            w.push(format!("min gamma1 = {min_rate:.3e} is not below 1/t_c = {:.3e}", 1.0 / dwell));
        }
        if !(1.0 / dwell < 0.5) {
            w.push(format!("1/t_c = {:.3e} is not below kappa/2", 1.0 / dwell));
        }
        for i in 0..self.len() {
            if self.next_rate[i] * dwell < 2.0 {
                w.push(format!(
                    "neglected rate {:.3e} at {:.6} decays less than e^-2 per dwell",
                    self.next_rate[i], self.values[i]
                ));
            }
            if self.slower_oscillating[i] {
                w.push(format!("an oscillating mode is slower than the soft mode at {:.6}", self.values[i]));
            }
        }
        w
    }
}

fn at_point(e: Error, parameter: SweepParameter, r: f64) -> Error {
    match e {
        Error::GaugeSingular { value, .. } => Error::GaugeSingular {
            parameter: format!("{} = {r}", parameter.name()),
            value,
        },
        other => other,
    }
}

/// Two-mode recursion |ρ_k) ≈ |ρ⁰_k) + |ρ¹_k) χ_k with
/// χ_k = e^{−iλ₁ t_c}(ρ̄¹_k|ρ_{k−1}); χ is recorded in the observable gauge.
pub fn staircase_metastable(params: &ModelParams, protocol: &SweepProtocol, opts: &SweepOptions) -> Result<SweepResult> {
    require_kind(protocol, ProtocolKind::Staircase)?;
    let grid = protocol.grid();
    let path = protocol.path();
    let chain = MetastableChain::build(params, protocol.parameter, &grid, &opts.soft())?;
    let warnings = chain.separation_warnings(protocol.dwell);
    for w in &warnings {
        log::warn!("two-mode recursion: {w}");
    }
    let d = params.cutoff;
    let mut points = Vec::with_capacity(path.len());
    let (i0, b0) = path[0];
    let (mut chi, n0, mut carried) = match &opts.initial {
        None => (ZERO, chain.n_steady[i0], None),
        Some(v) => {
            if v.len() != d * d {
                return Err(Error::DimensionMismatch {
                    expected: d * d,
                    actual: v.len(),
                });
            }
            (ZERO, occupation_of(v, d).re, Some(v.clone()))
        }
    };
    points.push(SweepPoint {
        step: 0,
        value: grid[i0],
        time: 0.0,
        occupation: n0,
        chi: carried.is_none().then_some(chi),
        branch: b0,
    });
    let mut snapshots = opts.snapshots.then(Vec::new);
    let soft = opts.soft();
    let family = if carried.is_some() || snapshots.is_some() {
        Some(AffineLiouvillian::new(params, protocol.parameter)?)
    } else {
        None
    };
    let mut cache = ShiftInvert::new();
    let mut pair_at = |i: usize| -> Result<MetastablePair> {
        let family = family.as_ref().expect("family built when vectors are needed");
        spectral::metastable_pair(&family.at(grid[i]), &soft, &mut cache)
    };
    if let Some(s) = snapshots.as_mut() {
        let pair = pair_at(i0)?;
        s.push(carried.clone().unwrap_or_else(|| pair.steady().to_vec()));
    }
    for (k, w) in path.windows(2).enumerate() {
        let (from, to) = (w[0].0, w[1].0);
        chi = match carried.take() {
            // First step from an arbitrary state: project it directly.
            Some(v) => {
                let pair = pair_at(to)?;
                bdot(pair.left(), &v) * (MINUS_I * chain.lambda[to] * protocol.dwell).exp()
            }
            None => chain.step(from, to, chi, protocol.dwell),
        };
        if let Some(s) = snapshots.as_mut() {
            let pair = pair_at(to)?;
            s.push(pair.steady().iter().zip(pair.right()).map(|(a, b)| a + chi * b).collect());
        }
        points.push(SweepPoint {
            step: k + 1,
            value: grid[to],
            time: (k + 1) as f64 * protocol.dwell,
            occupation: chain.occupation(to, chi),
            chi: Some(chi),
            branch: w[1].1,
        });
    }
    Ok(SweepResult {
        protocol: *protocol,
        engine: Engine::Metastable,
        points,
        snapshots,
        warnings,
    })
}

/// Density matrix of a recorded snapshot.
pub fn snapshot_state(result: &SweepResult, k: usize) -> Option<Result<DensityState>> {
    let d = (result.snapshots.as_ref()?.first()?.len() as f64).sqrt().round() as usize;
    result.snapshots.as_ref()?.get(k).map(|v| DensityState::devectorize(v, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::Liouvillian;

    #[test]
    fn undriven_fock_decay() {
        let p = ModelParams::new(-1.0, -0.5, 0.0, 6);
        let family = AffineLiouvillian::new(&p, SweepParameter::Detuning).unwrap();
        let mut rho = DensityState::fock(6, 1).into_vector();
        let mut worst = 0.0f64;
        rk4_propagate(&family, |_| -1.0, &mut rho, 0.0, 3.0, 0.005, |t, x| {
            worst = worst.max((occupation_of(x, 6).re - (-t).exp()).abs());
        })
        .unwrap();
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn propagation_matches_spectral_decomposition() {
        let p = ModelParams::reference(-6.0, 10);
        let family = AffineLiouvillian::new(&p, SweepParameter::Detuning).unwrap();
        let l = Liouvillian::build(&p).unwrap();
        let spec = spectral::eig_full(&l).unwrap();
        let t = 10.0 / spec.rate(1).max(0.05);
        let t = t.min(60.0);
        let rho0 = DensityState::fock(10, 2).into_vector();
        let mut rho = rho0.clone();
        let dt = default_dt(10.0, l.norm());
        rk4_propagate(&family, |_| -6.0, &mut rho, 0.0, t, dt, |_, _| {}).unwrap();
        let oracle = spec.propagate(&rho0, t);
        let err = rho.iter().zip(&oracle).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn protocol_grid_and_path() {
        let p = SweepProtocol::new(SweepParameter::Detuning, -10.0, -4.0, 3, 10.0)
            .unwrap()
            .with_lead_in(1)
            .with_direction(Direction::Cycle);
        assert_eq!(p.grid(), vec![-12.0, -10.0, -8.0, -6.0, -4.0]);
        assert!((p.velocity() - 0.2).abs() < 1e-15);
        let path = p.path();
        assert_eq!(path.len(), 9);
        assert_eq!(path[4], (4, Branch::Forward));
        assert_eq!(path[5], (3, Branch::Backward));
        assert_eq!(path[8], (0, Branch::Backward));
        assert!(SweepProtocol::new(SweepParameter::Detuning, 0.0, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn exact_and_propagated_staircase_agree() {
        let p = ModelParams::reference(-6.0, 10);
        let prot = SweepProtocol::new(SweepParameter::Detuning, -7.0, -5.0, 4, 2.0)
            .unwrap()
            .with_direction(Direction::Cycle);
        let a = staircase_exact(&p, &prot, &SweepOptions::default()).unwrap();
        let b = staircase_propagated(&p, &prot, &SweepOptions::default()).unwrap();
        assert_eq!(a.points.len(), b.points.len());
        for (x, y) in a.points.iter().zip(&b.points) {
            assert!((x.occupation - y.occupation).abs() < 1e-8, "{} vs {}", x.occupation, y.occupation);
            assert_eq!(x.value, y.value);
        }
        assert!(linear_ramp(&p, &prot, &SweepOptions::default()).is_err());
    }

    #[test]
    fn metastable_chain_collapse_and_branches() {
        let p = ModelParams::reference(-5.0, 16);
        let prot = SweepProtocol::new(SweepParameter::Detuning, -6.0, -4.0, 4, 10.0)
            .unwrap()
            .with_direction(Direction::Cycle);
        let r = staircase_metastable(&p, &prot, &SweepOptions::default()).unwrap();
        assert_eq!(r.points.len(), 9);
        assert_eq!(r.points[0].chi, Some(ZERO));
        let fwd = r.branch(Branch::Forward).unwrap();
        let bwd = r.branch(Branch::Backward).unwrap();
        assert_eq!(fwd.len(), 5);
        assert_eq!(bwd.len(), 5);
        let table = r.to_table();
        assert_eq!(table.headers()[1], "delta");
    }
}
