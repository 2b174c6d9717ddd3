//! Connections A₁p = (ρ̄¹|∂ρ^p) on a parameter grid and the hysteresis
//! amplitudes χ± they generate.
//!
//! With |ρ) = |ρ⁰) + χ|ρ¹), a sweep at velocity ±v obeys
//!   dχ/dr = −A₁₀ − (A₁₁ ± γ₁/v) χ.
//! Substituting χ = y A₁₀ gives dy/dr = −1 − (f ± γ₁/v) y with the gauge-
//! invariant f = A₁₁ + d ln A₁₀/dr. Everything downstream of the table is
//! computed from f, γ₁ and the gauge-invariant weight A₁₀·tr[b†b ρ¹].

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{ReadTable, Table};
use crate::krylov::bdot;
use crate::liouville::AffineLiouvillian;
use crate::model::{occupation_of, Branch, ModelParams, SweepParameter};
use crate::spectral::{self, Gauge, MetastablePair, ShiftInvert, SoftOptions};
use crate::spline::CubicSpline;

/// v = width/(N t_c), the ramp velocity matching an N-step staircase.
pub fn sweep_velocity(width: f64, steps: f64, dwell: f64) -> f64 {
    width / (steps * dwell)
}

#[derive(Debug, Clone, Copy)]
pub struct ConnectionOptions {
    pub soft: SoftOptions,
    /// Extra grid points computed beyond each end.
    pub margin: usize,
}

impl Default for ConnectionOptions {
    fn default() -> Self {
        Self {
            soft: SoftOptions::axis(),
            margin: 0,
        }
    }
}

/// |A₁₀| below this fraction of its maximum is treated as numerically zero.
pub const A10_FLOOR: f64 = 1e-8;

/// How χ± are integrated from a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChiForm {
    /// y = χ/A₁₀ with y' = −1 − (f ± γ₁/v) y. Used when A₁₀ keeps one sign
    /// and stays above [`A10_FLOOR`]; the solution is then exactly invariant
    /// under a discrete regauging of the table.
    Reduced,
    /// χ' = −A₁₀ − (A₁₁ ± γ₁/v) χ directly. Needed when A₁₀ is exponentially
    /// small over part of the grid (the steady state sits in one basin) and
    /// its sign is noise; gauge invariance then holds to discretization
    /// accuracy only.
    Direct,
}

#[derive(Debug, Clone)]
pub struct ConnectionTable {
    pub parameter: SweepParameter,
    pub grid: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub a10: Vec<f64>,
    pub a11: Vec<f64>,
    pub f: Vec<f64>,
    pub n_st: Vec<f64>,
    /// tr[b†b ρ¹]; identically 1 in the observable gauge.
    pub n_soft: Vec<f64>,
    pub gauge: Gauge,
    pub form: ChiForm,
    /// Largest |Im A₁p| discarded when the connections were made real.
    pub imag_residual: f64,
    lower: f64,
    upper: f64,
    splines: Splines,
}

#[derive(Debug, Clone)]
struct Splines {
    ln_gamma: CubicSpline,
    /// Only in the reduced form.
    f: Option<CubicSpline>,
    weight: CubicSpline,
    a10: CubicSpline,
    a11: CubicSpline,
    n_st: CubicSpline,
    n_soft: CubicSpline,
}

/// Central differences on a uniform grid, second-order one-sided at the ends.
fn grid_derivative(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| match i {
            0 if n >= 3 => (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * h),
            0 => (y[1] - y[0]) / h,
            i if i == n - 1 && n >= 3 => (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * h),
            i if i == n - 1 => (y[n - 1] - y[n - 2]) / h,
            i => (y[i + 1] - y[i - 1]) / (2.0 * h),
        })
        .collect()
}

fn uniform_spacing(grid: &[f64]) -> Result<f64> {
    if grid.len() < 3 {
        return Err(Error::InvalidParams("connection grid needs at least three points".into()));
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300));
    if !(h > 0.0) || !uniform {
        return Err(Error::InvalidParams("connection grid must be uniform and increasing".into()));
    }
    Ok(h)
}

impl ConnectionTable {
    /// Builds a table from per-point values; f is formed from the same
    /// difference stencil as the connections, so it is exactly invariant
    /// under a discrete regauging of the columns.
    pub fn from_columns(
        parameter: SweepParameter,
        grid: Vec<f64>,
        gamma1: Vec<f64>,
        a10: Vec<f64>,
        a11: Vec<f64>,
        n_st: Vec<f64>,
        n_soft: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.len();
        for col in [&gamma1, &a10, &a11, &n_st, &n_soft] {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: col.len(),
                });
            }
        }
        let h = uniform_spacing(&grid)?;
        if let Some(i) = gamma1.iter().position(|&g| !(g > 0.0)) {
            return Err(Error::InvalidParams(format!("gamma1 must be positive, got {} at {}", gamma1[i], grid[i])));
        }
        let scale = a10.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let sign = a10[0].signum();
        let clean = |a: f64| a.abs() >= A10_FLOOR * scale && a.signum() == sign;
        let (form, f) = if scale < 1e-12 {
            (ChiForm::Reduced, a11.clone())
        } else if a10.iter().all(|&a| clean(a)) {
            let ln_a: Vec<f64> = a10.iter().map(|a| a.abs().ln()).collect();
            let f = grid_derivative(&ln_a, h).iter().zip(&a11).map(|(d, a)| a + d).collect();
            (ChiForm::Reduced, f)
        } else {
            // f only where the three-point stencil sees a clean A₁₀.
            let f = (0..n)
                .map(|i| {
                    let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
                    let local = a10[lo].signum();
                    let ok = (lo..=hi).all(|j| a10[j].abs() >= A10_FLOOR * scale && a10[j].signum() == local);
                    if !ok {
                        return f64::NAN;
                    }
                    let d = if i == 0 || i == n - 1 || hi - lo < 2 {
                        (a10[hi].abs().ln() - a10[lo].abs().ln()) / ((hi - lo) as f64 * h)
                    } else {
                        (a10[hi].abs().ln() - a10[lo].abs().ln()) / (2.0 * h)
                    };
                    a11[i] + d
                })
                .collect();
            (ChiForm::Direct, f)
        };
        let weight: Vec<f64> = a10.iter().zip(&n_soft).map(|(a, s)| a * s).collect();
        let ln_gamma: Vec<f64> = gamma1.iter().map(|g| g.ln()).collect();
        let splines = Splines {
            ln_gamma: CubicSpline::new(&grid, &ln_gamma)?,
            f: match form {
                ChiForm::Reduced => Some(CubicSpline::new(&grid, &f)?),
                ChiForm::Direct => None,
            },
            weight: CubicSpline::new(&grid, &weight)?,
            a10: CubicSpline::new(&grid, &a10)?,
            a11: CubicSpline::new(&grid, &a11)?,
            n_st: CubicSpline::new(&grid, &n_st)?,
            n_soft: CubicSpline::new(&grid, &n_soft)?,
        };
        let (lower, upper) = (grid[0], grid[n - 1]);
        Ok(Self {
            parameter,
            grid,
            gamma1,
            a10,
            a11,
            f,
            n_st,
            n_soft,
            gauge: Gauge::Raw,
            form,
            imag_residual: 0.0,
            lower,
            upper,
            splines,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        (self.grid[self.len() - 1] - self.grid[0]) / (self.len() - 1) as f64
    }

    /// [r_min, r_max] on which χ± are solved; excludes margins.
    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || lower < self.grid[0] || upper > self.grid[self.len() - 1] {
            return Err(Error::InvalidParams(format!("bounds [{lower}, {upper}] outside the table")));
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn gamma(&self, r: f64) -> f64 {
        self.splines.ln_gamma.eval(r).exp()
    }

    /// NaN in the direct form.
    pub fn f_at(&self, r: f64) -> f64 {
        self.splines.f.as_ref().map_or(f64::NAN, |s| s.eval(r))
    }

    pub fn a10_at(&self, r: f64) -> f64 {
        self.splines.a10.eval(r)
    }

    pub fn a11_at(&self, r: f64) -> f64 {
        self.splines.a11.eval(r)
    }

    pub fn n_st_at(&self, r: f64) -> f64 {
        self.splines.n_st.eval(r)
    }

    pub fn n_soft_at(&self, r: f64) -> f64 {
        self.splines.n_soft.eval(r)
    }

    /// A₁₀·tr[b†b ρ¹], gauge invariant.
    pub fn weight_at(&self, r: f64) -> f64 {
        self.splines.weight.eval(r)
    }

    /// A₁₁ + d ln A₁₀/dr from the A₁₀ spline, for comparison with the
    /// stencil-based f.
    pub fn f_from_splines(&self, r: f64) -> f64 {
        self.a11_at(r) + self.splines.a10.derivative(r) / self.a10_at(r)
    }

    /// Columns (r, γ₁, A₁₀, A₁₁, f, n_st).
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[self.parameter.name(), "gamma1", "a10", "a11", "f", "n_st", "n_soft"]);
        for i in 0..self.len() {
            t.push(vec![
                self.grid[i].into(),
                self.gamma1[i].into(),
                self.a10[i].into(),
                self.a11[i].into(),
                self.f[i].into(),
                self.n_st[i].into(),
                self.n_soft[i].into(),
            ]);
        }
        t
    }

    pub fn from_read_table(parameter: SweepParameter, t: &ReadTable) -> Result<Self> {
        let n_soft = t.numbers("n_soft").unwrap_or_else(|_| vec![1.0; t.len()]);
        let mut table = Self::from_columns(
            parameter,
            t.numbers(parameter.name())?,
            t.numbers("gamma1")?,
            t.numbers("a10")?,
            t.numbers("a11")?,
            t.numbers("n_st")?,
            n_soft,
        )?;
        table.gauge = Gauge::Observable;
        Ok(table)
    }
}

fn rescaled(pair: &MetastablePair, g: f64) -> MetastablePair {
    let mut p = pair.clone();
    let mut modes = p.spec.modes().to_vec();
    modes[1].right.iter_mut().for_each(|z| *z *= g);
    modes[1].left.iter_mut().for_each(|z| *z /= g);
    p.spec = crate::SpectralData::from_modes(p.spec.cutoff(), modes, Gauge::Raw, p.spec.operator_norm());
    p
}

fn table_from_pairs(
    parameter: SweepParameter,
    grid: &[f64],
    pairs: &[MetastablePair],
    gauge: Gauge,
) -> Result<ConnectionTable> {
    let n = grid.len();
    let h = uniform_spacing(grid)?;
    let d = pairs[0].spec.cutoff();
    // o_p(l, m) = (ρ̄¹_l|ρ^p_m)
    let o = |p: usize, l: usize, m: usize| -> C64 {
        if l == m {
            return C64::new(if p == 1 { 1.0 } else { 0.0 }, 0.0);
        }
        let right = if p == 0 { pairs[m].steady() } else { pairs[m].right() };
        bdot(pairs[l].left(), right)
    };
    let derivative = |p: usize, l: usize| -> C64 {
        if l == 0 {
            (-3.0 * o(p, 0, 0) + 4.0 * o(p, 0, 1) - o(p, 0, 2)) / (2.0 * h)
        } else if l == n - 1 {
            (3.0 * o(p, l, l) - 4.0 * o(p, l, l - 1) + o(p, l, l - 2)) / (2.0 * h)
        } else {
            (o(p, l, l + 1) - o(p, l, l - 1)) / (2.0 * h)
        }
    };
    let a: Vec<(C64, C64)> = (0..n).into_par_iter().map(|l| (derivative(0, l), derivative(1, l))).collect();
    let imag_residual = a.iter().map(|(x, y)| x.im.abs().max(y.im.abs())).fold(0.0, f64::max);
    let mut table = ConnectionTable::from_columns(
        parameter,
        grid.to_vec(),
        pairs.iter().map(MetastablePair::rate).collect(),
        a.iter().map(|x| x.0.re).collect(),
        a.iter().map(|x| x.1.re).collect(),
        pairs.iter().map(|p| occupation_of(p.steady(), d).re).collect(),
        pairs.iter().map(|p| occupation_of(p.right(), d).re).collect(),
    )?;
    table.gauge = gauge;
    table.imag_residual = imag_residual;
    Ok(table)
}

fn solve_pairs(
    params: &ModelParams,
    parameter: SweepParameter,
    grid: &[f64],
    soft: &SoftOptions,
) -> Result<Vec<MetastablePair>> {
    let family = AffineLiouvillian::new(params, parameter)?;
    grid.par_iter()
        .map_init(ShiftInvert::new, |cache, &r| {
            spectral::metastable_pair(&family.at(r), soft, cache).map_err(|e| match e {
                Error::GaugeSingular { value, .. } => Error::GaugeSingular {
                    parameter: format!("grid point {} = {r}", parameter.name()),
                    value,
                },
                other => other,
            })
        })
        .collect()
}

fn with_margin(grid: &[f64], margin: usize) -> Result<Vec<f64>> {
    let h = uniform_spacing(grid)?;
    let m = margin as i64;
    Ok((-m..grid.len() as i64 + m).map(|i| grid[0] + i as f64 * h).collect())
}

/// Connection table in the observable gauge on a uniform grid.
pub fn connections(
    params: &ModelParams,
    parameter: SweepParameter,
    grid: &[f64],
    opts: &ConnectionOptions,
) -> Result<ConnectionTable> {
    let full = with_margin(grid, opts.margin)?;
    let pairs = solve_pairs(params, parameter, &full, &opts.soft)?;
    table_from_pairs(parameter, &full, &pairs, Gauge::Observable)?.with_bounds(grid[0], grid[grid.len() - 1])
}

/// As [`connections`], with ρ¹ → g(r)ρ¹ and ρ̄¹ → ρ̄¹/g(r) applied before
/// differencing.
pub fn connections_regauged(
    params: &ModelParams,
    parameter: SweepParameter,
    grid: &[f64],
    opts: &ConnectionOptions,
    g: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<ConnectionTable> {
    let full = with_margin(grid, opts.margin)?;
    let pairs: Vec<MetastablePair> = solve_pairs(params, parameter, &full, &opts.soft)?
        .iter()
        .zip(&full)
        .map(|(p, &r)| rescaled(p, g(r)))
        .collect();
    table_from_pairs(parameter, &full, &pairs, Gauge::Raw)?.with_bounds(grid[0], grid[grid.len() - 1])
}

/// A₁₀, A₁₁ at one point by a central difference of width 2h.
pub fn connection_at(
    params: &ModelParams,
    parameter: SweepParameter,
    r: f64,
    h: f64,
    soft: &SoftOptions,
) -> Result<(f64, f64)> {
    let pairs = solve_pairs(params, parameter, &[r - h, r, r + h], soft)?;
    let t = table_from_pairs(parameter, &[r - h, r, r + h], &pairs, Gauge::Observable)?;
    Ok((t.a10[1], t.a11[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChiMethod {
    Quadrature,
    Stepping,
}

impl std::str::FromStr for ChiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrature" => Ok(ChiMethod::Quadrature),
            "stepping" => Ok(ChiMethod::Stepping),
            other => Err(Error::Protocol(format!("unknown chi method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChiOptions {
    pub method: ChiMethod,
    /// Uniform output panels over [r_min, r_max].
    pub panels: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for ChiOptions {
    fn default() -> Self {
        Self {
            method: ChiMethod::Quadrature,
            panels: 4000,
            rtol: 1e-10,
            atol: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChiSolution {
    pub grid: Vec<f64>,
    pub y_plus: Vec<f64>,
    pub y_minus: Vec<f64>,
    pub chi_plus: Vec<f64>,
    pub chi_minus: Vec<f64>,
    /// n_st + χ± tr[b†b ρ¹]
    pub n_plus: Vec<f64>,
    pub n_minus: Vec<f64>,
    pub velocity: f64,
    pub area: f64,
    pub method: ChiMethod,
    pub warnings: Vec<String>,
}

impl ChiSolution {
    pub fn n_at(&self, branch: Branch, r: f64) -> Result<f64> {
        let y = match branch {
            Branch::Forward => &self.n_plus,
            Branch::Backward => &self.n_minus,
            Branch::None => return Err(Error::Protocol("branch must be forward or backward".into())),
        };
        Ok(CubicSpline::new(&self.grid, y)?.eval(r))
    }

    /// Columns (r, χ⁺, χ⁻, y⁺, y⁻, n⁺, n⁻).
    pub fn to_table(&self, parameter: SweepParameter) -> Table {
        let mut t = Table::new(&[parameter.name(), "chi_plus", "chi_minus", "y_plus", "y_minus", "n_plus", "n_minus"]);
        for i in 0..self.grid.len() {
            t.push(vec![
                self.grid[i].into(),
                self.chi_plus[i].into(),
                self.chi_minus[i].into(),
                self.y_plus[i].into(),
                self.y_minus[i].into(),
                self.n_plus[i].into(),
                self.n_minus[i].into(),
            ]);
        }
        t
    }
}

/// Nodes and weights of 3-point Gauss–Legendre on [0, 1].
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

fn output_grid(table: &ConnectionTable, panels: usize) -> Vec<f64> {
    let (a, b) = table.bounds();
    let h = (b - a) / panels as f64;
    (0..=panels).map(|j| if j == panels { b } else { a + j as f64 * h }).collect()
}

/// J_k(z) = ∫₀¹ t^k e^{−z t} dt for k = 0, 1, 2.
fn moments(z: f64) -> [f64; 3] {
    if z.abs() < 0.5 {
        let mut out = [0.0; 3];
        let mut term = 1.0;
        for n in 0..20 {
            for (k, o) in out.iter_mut().enumerate() {
                *o += term / (n + k + 1) as f64;
            }
            term *= -z / (n + 1) as f64;
        }
        out
    } else {
        let e = (-z).exp();
        [
            -(-z).exp_m1() / z,
            (1.0 - e * (1.0 + z)) / (z * z),
            (2.0 - e * (2.0 + 2.0 * z + z * z)) / (z * z * z),
        ]
    }
}

/// One exponential step of u' = −b − c u over a panel of width h, written
/// in the distance w back from the panel end:
///   u(h) = u₀ e^{−Φ(h)} − ∫₀^h e^{−c_e w} g(w) dw,
/// where Φ(w) is the rate integrated over the last w, c_e the rate at the
/// end and g(w) = b e^{−(Φ(w) − c_e w)}. g is interpolated quadratically
/// through w = 0, τ, 2τ and integrated against the exponential in closed
/// form. τ = h/2 normally; when c_e h is large the weight lives within 1/c_e
/// of the end, so the nodes move in to τ = 2/c_e.
#[derive(Debug, Clone, Copy)]
struct Step {
    decay: f64,
    /// c_e h
    z: f64,
    /// g(0), g'(0) h, g''(0) h²/2 of the interpolant.
    coeffs: [f64; 3],
}

impl Step {
    fn apply(&self, u: f64, h: f64) -> f64 {
        let [j0, j1, j2] = moments(self.z);
        let [p0, p1, p2] = self.coeffs;
        u * self.decay - h * (p0 * j0 + p1 * j1 + p2 * j2)
    }
}

/// Rate a(r) ± γ₁(r)/v and forcing b(r) of the integrated variable.
struct Coefficients<'a> {
    table: &'a ConnectionTable,
    v: f64,
}

impl Coefficients<'_> {
    /// (a, b): (f, 1) in the reduced form, (A₁₁, A₁₀) in the direct form.
    fn local(&self, r: f64) -> (f64, f64) {
        match (&self.table.splines.f, self.table.form) {
            (Some(f), ChiForm::Reduced) => (f.eval(r), 1.0),
            _ => (self.table.a11_at(r), self.table.a10_at(r)),
        }
    }

    fn a_integral(&self, x0: f64, x1: f64) -> f64 {
        match (&self.table.splines.f, self.table.form) {
            (Some(f), ChiForm::Reduced) => f.integral(x0, x1),
            _ => self.table.splines.a11.integral(x0, x1),
        }
    }

    fn gamma_integral(&self, x0: f64, x1: f64) -> f64 {
        let h = x1 - x0;
        GAUSS3.iter().map(|(x, wt)| wt * self.table.gamma(x0 + x * h)).sum::<f64>() * h
    }

    /// Step from `start` to `end` (either direction). `sign` = +1 for the
    /// forward branch, −1 for the backward one, whose rate in the reversed
    /// variable is γ₁/v − a and whose forcing is −b.
    fn step(&self, start: f64, end: f64, sign: f64) -> Step {
        let h = (end - start).abs();
        let dir = (end - start).signum();
        let phi = |w: f64| {
            let (x0, x1) = if dir > 0.0 { (end - w, end) } else { (end, end + w) };
            sign * self.a_integral(x0, x1) + self.gamma_integral(x0, x1) / self.v
        };
        let rate = |r: f64| sign * self.local(r).0 + self.table.gamma(r) / self.v;
        let c_e = rate(end);
        let g = |w: f64| {
            let r = end - dir * w;
            let b = sign * self.local(r).1;
            if w == 0.0 {
                b
            } else {
                b * (-(phi(w) - c_e * w)).exp()
            }
        };
        let tau = if c_e * h > 4.0 { 2.0 / c_e } else { 0.5 * h };
        let (g0, g1, g2) = (g(0.0), g(tau), g(2.0 * tau));
        let t = h / tau;
        Step {
            decay: (-phi(h)).exp(),
            z: c_e * h,
            coeffs: [g0, 0.5 * (-3.0 * g0 + 4.0 * g1 - g2) * t, 0.5 * (g0 - 2.0 * g1 + g2) * t * t],
        }
    }
}

/// Exponential integrator: u' = −b − (a + γ₁/v) u forward from r_min and
/// u' = −b − (a − γ₁/v) u backward from r_max, with (u, a, b) = (y, f, 1)
/// in the reduced form and (χ, A₁₁, A₁₀) in the direct form. Resolving the
/// variation of rate and forcing inside each panel matters in the stiff
/// regime: a mean-rate step lags the quasi-static solution by O(h), which
/// would swamp the O(v²) part of the loop.
fn quadrature(table: &ConnectionTable, v: f64, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let coeff = Coefficients { table, v };
    let steps: Vec<(Step, Step)> = grid
        .par_windows(2)
        .map(|w| (coeff.step(w[0], w[1], 1.0), coeff.step(w[1], w[0], -1.0)))
        .collect();
    let mut plus = vec![0.0; n];
    for j in 0..n - 1 {
        plus[j + 1] = steps[j].0.apply(plus[j], grid[j + 1] - grid[j]);
    }
    let mut minus = vec![0.0; n];
    for j in (0..n - 1).rev() {
        minus[j] = steps[j].1.apply(minus[j + 1], grid[j + 1] - grid[j]);
    }
    (plus, minus)
}

/// Dormand–Prince 5(4) for a scalar ODE, hitting every output node.
fn dopri_scalar(
    rhs: impl Fn(f64, f64) -> f64,
    nodes: &[f64],
    y0: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Option<Vec<f64>> {
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let dir = (nodes[nodes.len() - 1] - nodes[0]).signum();
    let mut out = Vec::with_capacity(nodes.len());
    out.push(y0);
    let (mut t, mut y) = (nodes[0], y0);
    let mut h = dir * (nodes[1] - nodes[0]).abs();
    let mut steps = 0usize;
    for &target in &nodes[1..] {
        while dir * (target - t) > 1e-14 * target.abs().max(1.0) {
            if steps >= max_steps {
                return None;
            }
            steps += 1;
            if dir * (t + h - target) > 0.0 {
                h = target - t;
            }
            let mut k = [0.0; 7];
            for s in 0..7 {
                let ys = y + h * (0..s).map(|j| A[s][j] * k[j]).sum::<f64>();
                k[s] = rhs(t + C[s] * h, ys);
            }
            let y5 = y + h * (0..7).map(|s| B5[s] * k[s]).sum::<f64>();
            let y4 = y + h * (0..7).map(|s| B4[s] * k[s]).sum::<f64>();
            let scale = atol + rtol * y.abs().max(y5.abs());
            let err = ((y5 - y4) / scale).abs();
            if !err.is_finite() {
                return None;
            }
            if err <= 1.0 {
                t += h;
                y = y5;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
            if h.abs() < 1e-14 * t.abs().max(1.0) {
                return None;
            }
        }
        t = target;
        out.push(y);
    }
    Some(out)
}

/// χ± and the hysteresis area at sweep velocity v > 0, with χ⁺(r_min) = 0
/// and χ⁻(r_max) = 0.
pub fn chi_solve(table: &ConnectionTable, v: f64, opts: &ChiOptions) -> Result<ChiSolution> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidParams(format!("sweep velocity must be positive, got {v}")));
    }
    if opts.panels < 2 {
        return Err(Error::InvalidParams("chi_solve needs at least two panels".into()));
    }
    let grid = output_grid(table, opts.panels);
    let mut warnings = Vec::new();
    let mut method = opts.method;
    // (rate, forcing) of u' = −forcing − (rate ± γ₁/v) u.
    let coefficients = |r: f64| match table.form {
        ChiForm::Reduced => (table.f_at(r), 1.0),
        ChiForm::Direct => (table.a11_at(r), table.a10_at(r)),
    };
    let (u_plus, u_minus) = match opts.method {
        ChiMethod::Quadrature => quadrature(table, v, &grid),
        ChiMethod::Stepping => {
            let plus = dopri_scalar(
                |r, u| {
                    let (a, b) = coefficients(r);
                    -b - (a + table.gamma(r) / v) * u
                },
                &grid,
                0.0,
                opts.rtol,
                opts.atol,
                opts.max_steps,
            );
            let rev: Vec<f64> = grid.iter().rev().copied().collect();
            let minus = dopri_scalar(
                |r, u| {
                    let (a, b) = coefficients(r);
                    -b - (a - table.gamma(r) / v) * u
                },
                &rev,
                0.0,
                opts.rtol,
                opts.atol,
                opts.max_steps,
            );
            match (plus, minus) {
                (Some(p), Some(mut m)) => {
                    m.reverse();
                    (p, m)
                }
                _ => {
                    let msg = format!("stepping failed at v = {v:.3e} (stiff); fell back to quadrature");
                    log::warn!("{msg}");
                    warnings.push(msg);
                    method = ChiMethod::Quadrature;
                    quadrature(table, v, &grid)
                }
            }
        }
    };
    // Reduced: χ = y A₁₀ and n through the gauge-invariant weight
    // A₁₀·tr[b†b ρ¹]. Direct: y = χ/A₁₀, n = n_st + χ tr[b†b ρ¹].
    let convert = |u: Vec<f64>| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut other = Vec::with_capacity(u.len());
        let mut n = Vec::with_capacity(u.len());
        for (&r, &x) in grid.iter().zip(&u) {
            match table.form {
                ChiForm::Reduced => {
                    other.push(x * table.a10_at(r));
                    n.push(table.n_st_at(r) + x * table.weight_at(r));
                }
                ChiForm::Direct => {
                    other.push(x / table.a10_at(r));
                    n.push(table.n_st_at(r) + x * table.n_soft_at(r));
                }
            }
        }
        match table.form {
            ChiForm::Reduced => (u, other, n),
            ChiForm::Direct => (other, u, n),
        }
    };
    let (y_plus, chi_plus, n_plus) = convert(u_plus);
    let (y_minus, chi_minus, n_minus) = convert(u_minus);
    let area = trapezoid(&grid, &n_minus.iter().zip(&n_plus).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(ChiSolution {
        grid,
        y_plus,
        y_minus,
        chi_plus,
        chi_minus,
        n_plus,
        n_minus,
        velocity: v,
        area,
        method,
        warnings,
    })
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

/// 𝒜 = ∫ (χ⁻ − χ⁺) tr[b†b ρ¹] dr, the loop area in n.
pub fn hysteresis_area(sol: &ChiSolution) -> f64 {
    sol.area
}

/// (v, 𝒜(v)) for each velocity.
pub fn area_scaling(table: &ConnectionTable, velocities: &[f64], opts: &ChiOptions) -> Result<Vec<(f64, f64)>> {
    velocities
        .par_iter()
        .map(|&v| Ok((v, chi_solve(table, v, opts)?.area)))
        .collect()
}

/// Least-squares slope of ln 𝒜 against ln v.
pub fn loglog_slope(series: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(v, a)| *v > 0.0 && *a > 0.0)
        .map(|(v, a)| (v.ln(), a.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidParams("slope fit needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Leading slow-sweep amplitudes χ^(1)± = ∓v A₁₀/γ₁ on the table grid.
#[derive(Debug, Clone)]
pub struct QuasiAdiabatic {
    pub grid: Vec<f64>,
    pub chi_plus: Vec<f64>,
    pub chi_minus: Vec<f64>,
    pub n_plus: Vec<f64>,
    pub n_minus: Vec<f64>,
}

pub fn quasiadiabatic(table: &ConnectionTable, v: f64) -> QuasiAdiabatic {
    let chi_minus: Vec<f64> = (0..table.len()).map(|i| v * table.a10[i] / table.gamma1[i]).collect();
    let chi_plus: Vec<f64> = chi_minus.iter().map(|c| -c).collect();
    let n_plus = (0..table.len()).map(|i| table.n_st[i] + chi_plus[i] * table.n_soft[i]).collect();
    let n_minus = (0..table.len()).map(|i| table.n_st[i] + chi_minus[i] * table.n_soft[i]).collect();
    QuasiAdiabatic {
        grid: table.grid.clone(),
        chi_plus,
        chi_minus,
        n_plus,
        n_minus,
    }
}

/// χ± from the two-component form d(c₀, c₁)/dr = −M (c₀, c₁) with
/// M = [[0, 0], [A₁₀, A₁₁ ± γ₁/v]] and c₀ ≡ 1, by fixed-step RK4 on the
/// output grid of `panels` panels (refined by `substeps`).
pub fn chi_matrix_form(table: &ConnectionTable, v: f64, branch: Branch, panels: usize, substeps: usize) -> Result<Vec<f64>> {
    let sign = match branch {
        Branch::Forward => 1.0,
        Branch::Backward => -1.0,
        Branch::None => return Err(Error::Protocol("branch must be forward or backward".into())),
    };
    let grid = output_grid(table, panels);
    let m = |r: f64| -> [[f64; 2]; 2] { [[0.0, 0.0], [table.a10_at(r), table.a11_at(r) + sign * table.gamma(r) / v]] };
    let rhs = |r: f64, c: [f64; 2]| -> [f64; 2] {
        let m = m(r);
        [-(m[0][0] * c[0] + m[0][1] * c[1]), -(m[1][0] * c[0] + m[1][1] * c[1])]
    };
    let nodes: Vec<f64> = if sign > 0.0 { grid.clone() } else { grid.iter().rev().copied().collect() };
    let mut c = [1.0, 0.0];
    let mut out = vec![0.0];
    for w in nodes.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let r = w[0] + s as f64 * h;
            let add = |c: [f64; 2], k: [f64; 2], a: f64| [c[0] + a * k[0], c[1] + a * k[1]];
            let k1 = rhs(r, c);
            let k2 = rhs(r + h / 2.0, add(c, k1, h / 2.0));
            let k3 = rhs(r + h / 2.0, add(c, k2, h / 2.0));
            let k4 = rhs(r + h, add(c, k3, h));
            for i in 0..2 {
                c[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(c[1] / c[0]);
    }
    if sign < 0.0 {
        out.reverse();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> ConnectionTable {
        let grid: Vec<f64> = (0..n).map(|i| -10.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
        let gamma = grid.iter().map(|r| 0.02 + 0.3 * ((r + 6.0) / 2.0).powi(2) / (1.0 + ((r + 6.0) / 2.0).powi(2))).collect();
        let a10 = grid.iter().map(|r| 1.0 + 0.5 * (0.4 * r).sin()).collect();
        let a11 = grid.iter().map(|r| 0.2 * (0.3 * r).cos()).collect();
        let n_st = grid.iter().map(|r| 2.0 + 0.1 * r).collect();
        ConnectionTable::from_columns(SweepParameter::Detuning, grid, gamma, a10, a11, n_st, vec![1.0; n]).unwrap()
    }

    #[test]
    fn stencil_f_matches_spline_f() {
        let t = synthetic(201);
        for &r in &[-9.0, -6.3, -3.1] {
            assert!((t.f_at(r) - t.f_from_splines(r)).abs() < 1e-4);
        }
    }

    #[test]
    fn quadrature_and_stepping_agree() {
        let t = synthetic(201);
        for v in [0.05, 0.5, 3.0] {
            let q = chi_solve(&t, v, &ChiOptions::default()).unwrap();
            let s = chi_solve(&t, v, &ChiOptions { method: ChiMethod::Stepping, ..Default::default() }).unwrap();
            assert_eq!(s.method, ChiMethod::Stepping);
            for (a, b) in q.chi_plus.iter().chain(&q.chi_minus).zip(s.chi_plus.iter().chain(&s.chi_minus)) {
                if a.abs() > 1e-6 {
                    assert!(((a - b) / a).abs() < 1e-4, "v={v}: {a} vs {b}");
                }
            }
        }
    }

    /// A₁₀ with a sign change and an exponentially small tail: direct form.
    fn switching(n: usize) -> ConnectionTable {
        let t = synthetic(n);
        let a10 = t.grid.iter().map(|r| 2.0 * (r + 4.0) * (-0.5 * (r + 4.0).powi(2)).exp()).collect();
        ConnectionTable::from_columns(SweepParameter::Detuning, t.grid.clone(), t.gamma1.clone(), a10, t.a11.clone(), t.n_st.clone(), vec![1.0; n]).unwrap()
    }

    #[test]
    fn form_follows_a10() {
        assert_eq!(synthetic(101).form, ChiForm::Reduced);
        let t = switching(201);
        assert_eq!(t.form, ChiForm::Direct);
        assert!(t.f_at(-6.0).is_nan());
        assert!(t.f.iter().any(|f| f.is_finite()));
    }

    #[test]
    fn direct_form_matches_matrix_form_and_stepping() {
        let t = switching(201);
        let v = 0.3;
        let s = chi_solve(&t, v, &ChiOptions { panels: 400, ..Default::default() }).unwrap();
        let st = chi_solve(&t, v, &ChiOptions { panels: 400, method: ChiMethod::Stepping, ..Default::default() }).unwrap();
        let plus = chi_matrix_form(&t, v, Branch::Forward, 400, 8).unwrap();
        let minus = chi_matrix_form(&t, v, Branch::Backward, 400, 8).unwrap();
        let scale = s.chi_minus.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..plus.len() {
            assert!((plus[i] - s.chi_plus[i]).abs() < 1e-4 * scale, "{i}");
            assert!((minus[i] - s.chi_minus[i]).abs() < 1e-4 * scale, "{i}");
            assert!((st.chi_plus[i] - s.chi_plus[i]).abs() < 1e-5 * scale, "{i}");
        }
    }

    #[test]
    fn direct_form_is_accurate_when_stiff() {
        // Two orders of the slow-sweep expansion of χ⁻ = (v/γ₁)(A₁₀ + χ⁻' + A₁₁χ⁻),
        // deep in the stiff regime (c h ≈ 40 per panel).
        let t = switching(201);
        let v = 1e-5;
        let s = chi_solve(&t, v, &ChiOptions::default()).unwrap();
        let chi1 = |r: f64| v * t.a10_at(r) / t.gamma(r);
        let chi2 = |r: f64| {
            let d = (chi1(r + 1e-4) - chi1(r - 1e-4)) / 2e-4;
            chi1(r) + v / t.gamma(r) * (d + t.a11_at(r) * chi1(r))
        };
        let spline = CubicSpline::new(&s.grid, &s.chi_minus).unwrap();
        for i in (20..180).step_by(10) {
            let r = t.grid[i];
            // The neglected third order is ~ (v/γ₁ · d ln A₁₀/dr)² relative.
            let k = v / t.gamma(r) * (1.0 + (1.0 / (r + 4.0) - (r + 4.0)).abs());
            assert!((spline.eval(r) - chi2(r)).abs() < 10.0 * k * k * chi2(r).abs(), "{r}: {} vs {}", spline.eval(r), chi2(r));
        }
    }

    #[test]
    fn stiff_stepping_falls_back() {
        let t = synthetic(51);
        let opts = ChiOptions { method: ChiMethod::Stepping, max_steps: 2000, ..Default::default() };
        let s = chi_solve(&t, 1e-7, &opts).unwrap();
        assert_eq!(s.method, ChiMethod::Quadrature);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn matrix_form_matches_scalar_form() {
        let t = synthetic(201);
        let v = 0.3;
        let s = chi_solve(&t, v, &ChiOptions { panels: 400, ..Default::default() }).unwrap();
        let plus = chi_matrix_form(&t, v, Branch::Forward, 400, 8).unwrap();
        let minus = chi_matrix_form(&t, v, Branch::Backward, 400, 8).unwrap();
        let scale = s.chi_minus.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..plus.len() {
            assert!((plus[i] - s.chi_plus[i]).abs() < 1e-4 * scale, "{i}");
            assert!((minus[i] - s.chi_minus[i]).abs() < 1e-4 * scale, "{i}");
        }
    }

    #[test]
    fn boundary_conditions_and_quasiadiabatic_limit() {
        let t = synthetic(201);
        let v = 1e-5;
        let s = chi_solve(&t, v, &ChiOptions::default()).unwrap();
        assert_eq!(s.chi_plus[0], 0.0);
        assert_eq!(*s.chi_minus.last().unwrap(), 0.0);
        let qa = quasiadiabatic(&t, v);
        for i in (20..180).step_by(10) {
            let r = t.grid[i];
            let c = CubicSpline::new(&s.grid, &s.chi_plus).unwrap().eval(r);
            assert!(((c - qa.chi_plus[i]) / qa.chi_plus[i]).abs() < 0.01);
        }
        let q2 = quasiadiabatic(&t, 2.0 * v);
        assert!((q2.chi_minus[50] - 2.0 * qa.chi_minus[50]).abs() < 1e-15);
        assert_eq!(qa.chi_minus[50] / qa.chi_plus[50], -1.0);
    }

    #[test]
    fn zero_forcing_gives_zero_area() {
        let t0 = synthetic(101);
        let t = ConnectionTable::from_columns(
            SweepParameter::Detuning,
            t0.grid.clone(),
            t0.gamma1.clone(),
            vec![0.0; 101],
            t0.a11.clone(),
            t0.n_st.clone(),
            vec![1.0; 101],
        )
        .unwrap();
        assert_eq!(chi_solve(&t, 0.1, &ChiOptions::default()).unwrap().area, 0.0);
    }

    #[test]
    fn causality_of_the_quadratures() {
        let t = synthetic(201);
        let full = chi_solve(&t, 0.2, &ChiOptions { panels: 200, ..Default::default() }).unwrap();
        // Perturb everything above r = −4; χ⁺ below −4 − 12h must not move.
        let mut a10 = t.a10.clone();
        let mut gamma = t.gamma1.clone();
        for i in 0..201 {
            if t.grid[i] > -4.0 {
                a10[i] *= 1.3;
                gamma[i] *= 0.7;
            }
        }
        let p = ConnectionTable::from_columns(SweepParameter::Detuning, t.grid.clone(), gamma, a10, t.a11.clone(), t.n_st.clone(), vec![1.0; 201]).unwrap();
        let pert = chi_solve(&p, 0.2, &ChiOptions { panels: 200, ..Default::default() }).unwrap();
        let cut = -4.0 - 12.0 * t.spacing();
        for i in 0..full.grid.len() {
            if full.grid[i] < cut && full.chi_plus[i].abs() > 1e-6 {
                assert!(((full.chi_plus[i] - pert.chi_plus[i]) / full.chi_plus[i]).abs() < 1e-6);
            }
        }
        assert!((full.chi_minus[0] - pert.chi_minus[0]).abs() > 1e-4);
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let s: Vec<(f64, f64)> = [1e-3, 1e-2, 1e-1].iter().map(|&v| (v, 3.0 * v * v)).collect();
        assert!((loglog_slope(&s).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inert_parameter_gives_zero_connections() {
        // Undriven cavity: the vacuum and the photon-decay mode do not
        // depend on δ.
        let p = ModelParams::new(-2.0, -0.5, 0.0, 6);
        let grid: Vec<f64> = (0..5).map(|i| -2.5 + 0.25 * i as f64).collect();
        let t = connections(&p, SweepParameter::Detuning, &grid, &ConnectionOptions::default()).unwrap();
        for i in 0..t.len() {
            assert!(t.a10[i].abs() < 1e-9);
            assert!(t.a11[i].abs() < 1e-9, "{}", t.a11[i]);
        }
    }
}
