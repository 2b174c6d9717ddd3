//! Right/left eigenmodes of 𝓛, bi-orthonormalized and gauge-fixed.
//!
//! Left eigenvectors are stored as bra components u = conj(ρ̄), so the
//! pairing (ρ̄|x) is the plain bilinear sum Σ u_p x_p. They are always
//! obtained from 𝓛ᵀ, never by inverting the matrix of right eigenvectors.

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::krylov::{self, bdot, norm2, KrylovOptions};
use crate::liouville::{trace_functional, Liouvillian};
use crate::model::{trace_of, DensityState};
use crate::operators::{number, TruncatedOperator};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Largest cutoff accepted by [`eig_full`] unless overridden.
pub const DENSE_CUTOFF_LIMIT: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    Raw,
    Observable,
    Continuity,
}

#[derive(Debug, Clone)]
pub struct Mode {
    pub eigenvalue: C64,
    /// |ρ^q) in vectorized form.
    pub right: Vec<C64>,
    /// Bra components of (ρ̄^q|.
    pub left: Vec<C64>,
}

impl Mode {
    /// ω_q
    pub fn frequency(&self) -> f64 {
        self.eigenvalue.re
    }

    /// γ_q = −Im λ_q
    pub fn rate(&self) -> f64 {
        -self.eigenvalue.im
    }
}

#[derive(Debug, Clone)]
pub struct SpectralData {
    cutoff: usize,
    modes: Vec<Mode>,
    gauge: Gauge,
    norm: f64,
}

impl SpectralData {
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, q: usize) -> &Mode {
        &self.modes[q]
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    pub fn with_gauge(mut self, gauge: Gauge) -> Self {
        self.gauge = gauge;
        self
    }

    /// ‖𝓛‖ of the operator these modes came from.
    pub fn operator_norm(&self) -> f64 {
        self.norm
    }

    pub fn eigenvalues(&self) -> Vec<C64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }

    pub fn rate(&self, q: usize) -> f64 {
        self.modes[q].rate()
    }

    pub fn frequency(&self, q: usize) -> f64 {
        self.modes[q].frequency()
    }

    /// (ρ̄^a|ρ^b)
    pub fn overlap(&self, a: usize, b: usize) -> C64 {
        bdot(&self.modes[a].left, &self.modes[b].right)
    }

    /// (ρ̄^q|x)
    pub fn project(&self, q: usize, x: &[C64]) -> C64 {
        bdot(&self.modes[q].left, x)
    }

    /// max |(ρ̄^a|ρ^b) − δ_ab| over the retained modes.
    pub fn biorthogonality_error(&self) -> f64 {
        let n = self.len();
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in 0..n {
                let target = if a == b { ONE } else { ZERO };
                worst = worst.max((self.overlap(a, b) - target).norm());
            }
        }
        worst
    }

    /// max_q ‖𝓛ρ^q − λ_q ρ^q‖ / ‖ρ^q‖ and the same for the left vectors.
    pub fn residuals(&self, l: &Liouvillian) -> Result<(f64, f64)> {
        let mut right = 0.0_f64;
        let mut left = 0.0_f64;
        for m in &self.modes {
            let mut r = l.apply(&m.right)?;
            krylov::axpy(&mut r, -m.eigenvalue, &m.right);
            right = right.max(norm2(&r) / norm2(&m.right));
            let mut u = l.apply_left(&m.left)?;
            krylov::axpy(&mut u, -m.eigenvalue, &m.left);
            left = left.max(norm2(&u) / norm2(&m.left));
        }
        Ok((right, left))
    }

    /// The zero mode as a density matrix, Hermitized and trace-normalized.
    pub fn steady_state(&self) -> Result<DensityState> {
        let d = self.cutoff;
        let tr = trace_of(&self.modes[0].right, d);
        if tr.norm() < 1e-12 {
            return Err(Error::NonUniqueSteadyState("zero mode is traceless".into()));
        }
        let v: Vec<C64> = self.modes[0].right.iter().map(|z| z / tr).collect();
        Ok(DensityState::devectorize(&v, d)?.hermitized())
    }

    /// Reciprocal rescaling |ρ^q) → g|ρ^q), (ρ̄^q| → (ρ̄^q|/g.
    pub fn regauge(&mut self, q: usize, g: C64) -> Result<()> {
        if q == 0 {
            return Err(Error::InvalidParams("the zero mode carries no gauge freedom".into()));
        }
        if g.norm() == 0.0 || !g.is_finite() {
            return Err(Error::InvalidParams(format!("gauge factor must be finite and nonzero, got {g}")));
        }
        let m = &mut self.modes[q];
        krylov::scale(&mut m.right, g);
        krylov::scale(&mut m.left, ONE / g);
        Ok(())
    }

    /// Keeps the `k` softest modes.
    pub fn truncate(mut self, k: usize) -> Self {
        self.modes.truncate(k);
        self
    }

    /// Σ_q e^{−iλ_q t} |ρ^q)(ρ̄^q|x) over the retained modes.
    pub fn propagate(&self, x: &[C64], t: f64) -> Vec<C64> {
        let mut out = vec![ZERO; x.len()];
        for m in &self.modes {
            let c = bdot(&m.left, x) * (-C64::new(0.0, 1.0) * m.eigenvalue * t).exp();
            krylov::axpy(&mut out, c, &m.right);
        }
        out
    }

    /// Whether mode q has ω_q = 0 to rounding.
    pub fn is_real(&self, q: usize) -> bool {
        self.modes[q].frequency().abs() <= frequency_tolerance(self.norm)
    }

    /// Sub-selection of modes, in the given order; index 0 must stay the
    /// zero mode.
    pub fn select(&self, indices: &[usize]) -> SpectralData {
        SpectralData {
            cutoff: self.cutoff,
            modes: indices.iter().map(|&q| self.modes[q].clone()).collect(),
            gauge: self.gauge,
            norm: self.norm,
        }
    }

    /// Synthetic spectral data, mainly for tests of downstream modules.
    pub fn from_modes(cutoff: usize, modes: Vec<Mode>, gauge: Gauge, norm: f64) -> Self {
        Self {
            cutoff,
            modes,
            gauge,
            norm,
        }
    }
}

fn frequency_tolerance(norm: f64) -> f64 {
    1e-8 * norm.max(1.0)
}

fn pairing_tolerance(norm: f64) -> f64 {
    1e-6 * norm.max(1.0)
}

/// Sorts by γ ascending; modes whose γ agree to rounding (complex-conjugate
/// pairs) are ordered by ω descending so the choice is reproducible.
fn sort_modes(modes: &mut [Mode]) {
    modes.sort_by(|a, b| a.rate().total_cmp(&b.rate()));
    let mut start = 0;
    while start < modes.len() {
        let g = modes[start].rate();
        let mut end = start + 1;
        while end < modes.len() && (modes[end].rate() - g).abs() <= 1e-9 * (1.0 + g.abs()) {
            end += 1;
        }
        modes[start..end].sort_by(|a, b| b.frequency().total_cmp(&a.frequency()));
        start = end;
    }
}

/// Pairs right eigenvalues with left ones by proximity.
fn match_pairs(right: &[C64], left: &[C64], tol: f64) -> Result<Vec<usize>> {
    let mut used = vec![false; left.len()];
    let mut out = Vec::with_capacity(right.len());
    for &lr in right {
        let best = left
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .min_by(|a, b| (a.1 - lr).norm().total_cmp(&(b.1 - lr).norm()));
        match best {
            Some((j, &ll)) if (ll - lr).norm() < tol => {
                used[j] = true;
                out.push(j);
            }
            _ => {
                return Err(Error::Degeneracy {
                    eigenvalue: format!("{lr}"),
                    reason: "no left eigenvalue within pairing tolerance".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Enforces (u_a|r_b) = δ_ab: blockwise on clusters of (near-)degenerate
/// eigenvalues, then a two-sided oblique Gram–Schmidt sweep to clean residual
/// cross terms.
fn biorthonormalize(modes: &mut [Mode], tol: f64) -> Result<()> {
    let n = modes.len();
    let mut assigned = vec![false; n];
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let cluster: Vec<usize> = (i..n)
            .filter(|&j| !assigned[j] && (modes[j].eigenvalue - modes[i].eigenvalue).norm() < tol)
            .collect();
        for &j in &cluster {
            assigned[j] = true;
        }
        let k = cluster.len();
        let m = Mat::<C64>::from_fn(k, k, |a, b| bdot(&modes[cluster[a]].left, &modes[cluster[b]].right));
        if k == 1 {
            let p = m[(0, 0)];
            if p.norm() < 1e-12 {
                return Err(Error::Degeneracy {
                    eigenvalue: format!("{}", modes[i].eigenvalue),
                    reason: "left and right eigenvectors are orthogonal (defective eigenvalue)".into(),
                });
            }
            krylov::scale(&mut modes[i].left, ONE / p);
            continue;
        }
        // U' = M⁻¹ U so that U'ᵀR = 1 on the cluster.
        let lu = m.full_piv_lu();
        let inv = lu.inverse();
        let cond = m.norm_l2() * inv.norm_l2();
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::Degeneracy {
                eigenvalue: format!("{}", modes[i].eigenvalue),
                reason: format!("degenerate cluster of {k} modes is defective (condition {cond:.3e})"),
            });
        }
        let old: Vec<Vec<C64>> = cluster.iter().map(|&j| modes[j].left.clone()).collect();
        for (a, &ja) in cluster.iter().enumerate() {
            let mut u = vec![ZERO; old[0].len()];
            for (b, ob) in old.iter().enumerate() {
                krylov::axpy(&mut u, inv[(a, b)], ob);
            }
            modes[ja].left = u;
        }
    }
    for q in 0..n {
        for p in 0..q {
            let c = bdot(&modes[p].left, &modes[q].right);
            let rp = modes[p].right.clone();
            krylov::axpy(&mut modes[q].right, -c, &rp);
            let c = bdot(&modes[q].left, &modes[p].right);
            let lp = modes[p].left.clone();
            krylov::axpy(&mut modes[q].left, -c, &lp);
        }
        let p = bdot(&modes[q].left, &modes[q].right);
        krylov::scale(&mut modes[q].left, ONE / p);
    }
    Ok(())
}

/// Zero mode: right vector with unit trace, left vector its reciprocal.
fn normalize_zero_mode(modes: &mut [Mode], d: usize) -> Result<()> {
    let zero = &mut modes[0];
    let tr = trace_of(&zero.right, d);
    if tr.norm() < 1e-12 {
        return Err(Error::NonUniqueSteadyState(format!(
            "softest mode λ = {} is traceless",
            zero.eigenvalue
        )));
    }
    krylov::scale(&mut zero.right, ONE / tr);
    krylov::scale(&mut zero.left, tr);
    Ok(())
}

fn finish(l: &Liouvillian, mut modes: Vec<Mode>, norm: f64) -> Result<SpectralData> {
    let d = l.cutoff();
    sort_modes(&mut modes);
    let near_zero = modes
        .iter()
        .filter(|m| m.eigenvalue.norm() < 1e-9 * norm.max(1.0))
        .count();
    if near_zero != 1 {
        return Err(Error::NonUniqueSteadyState(format!(
            "{near_zero} eigenvalues within 1e-9·‖𝓛‖ of zero"
        )));
    }
    biorthonormalize(&mut modes, pairing_tolerance(norm))?;
    normalize_zero_mode(&mut modes, d)?;
    Ok(SpectralData {
        cutoff: d,
        modes,
        gauge: Gauge::Raw,
        norm,
    })
}

/// All d² eigenpairs by dense decomposition of 𝓛 and 𝓛ᵀ.
pub fn eig_full(l: &Liouvillian) -> Result<SpectralData> {
    eig_full_with_limit(l, DENSE_CUTOFF_LIMIT)
}

pub fn eig_full_with_limit(l: &Liouvillian, limit: usize) -> Result<SpectralData> {
    if l.cutoff() > limit {
        return Err(Error::TooLarge {
            cutoff: l.cutoff(),
            max: limit,
        });
    }
    let dense = l.to_dense();
    let n = dense.nrows();
    let norm = l.norm();
    let evd_r = dense
        .eigen()
        .map_err(|e| Error::LinearAlgebra(format!("dense eigendecomposition failed: {e:?}")))?;
    let evd_l = dense
        .transpose()
        .to_owned()
        .eigen()
        .map_err(|e| Error::LinearAlgebra(format!("dense eigendecomposition failed: {e:?}")))?;
    let lam_r: Vec<C64> = (0..n).map(|i| evd_r.S().column_vector()[i]).collect();
    let lam_l: Vec<C64> = (0..n).map(|i| evd_l.S().column_vector()[i]).collect();
    let pairing = match_pairs(&lam_r, &lam_l, pairing_tolerance(norm))?;
    let modes = (0..n)
        .map(|q| Mode {
            eigenvalue: lam_r[q],
            right: (0..n).map(|p| evd_r.U()[(p, q)]).collect(),
            left: (0..n).map(|p| evd_l.U()[(p, pairing[q])]).collect(),
        })
        .collect();
    finish(l, modes, norm)
}

/// Which part of the spectrum [`eig_soft_with`] searches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrequencyWindow {
    /// One shift on the imaginary axis: the modes nearest λ = 0. Cheapest;
    /// sufficient when only the soft mode is needed.
    Axis,
    /// |ω| ≤ 2|δ| + 8κ, which covers the coherence ladder at ω ≈ jδ.
    Auto,
    /// |ω| ≤ the given bound.
    Fixed(f64),
}

/// Settings for the shift-invert solver.
#[derive(Debug, Clone, Copy)]
pub struct SoftOptions {
    /// Shifts sit at σ = Ω + i·shift_rate (𝓛 itself is singular at 0).
    pub shift_rate: f64,
    /// Ritz pairs requested per shift beyond k.
    pub extra: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub window: FrequencyWindow,
    pub max_shifts: usize,
}

impl Default for SoftOptions {
    fn default() -> Self {
        Self {
            shift_rate: 0.05,
            extra: 4,
            tol: 1e-12,
            max_restarts: 300,
            window: FrequencyWindow::Auto,
            max_shifts: 40,
        }
    }
}

impl SoftOptions {
    /// Single shift at the origin.
    pub fn axis() -> Self {
        Self {
            window: FrequencyWindow::Axis,
            ..Self::default()
        }
    }
}

/// Sparse LU factorizations with a reusable symbolic analysis. The
/// sparsity pattern of 𝓛 − σ does not depend on the parameter values at a
/// fixed cutoff, so sweeps pay for ordering and symbolic factorization once.
#[derive(Default)]
pub struct ShiftInvert {
    cached: Vec<CachedSymbolic>,
}

struct CachedSymbolic {
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    symbolic: SymbolicLu<usize>,
}

impl std::fmt::Debug for ShiftInvert {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShiftInvert")
            .field("patterns", &self.cached.len())
            .finish()
    }
}

impl ShiftInvert {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn factor_triplets(&mut self, n: usize, triplets: &[(usize, usize, C64)]) -> Result<Lu<usize, C64>> {
        let t: Vec<Triplet<usize, usize, C64>> = triplets.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let mat = SparseColMat::<usize, C64>::try_new_from_triplets(n, n, &t)
            .map_err(|e| Error::LinearAlgebra(format!("sparse assembly failed: {e:?}")))?;
        let pattern = mat.symbolic();
        let hit = self
            .cached
            .iter()
            .find(|c| c.col_ptr == pattern.col_ptr() && c.row_idx == pattern.row_idx());
        let symbolic = match hit {
            Some(c) => c.symbolic.clone(),
            None => {
                let s = SymbolicLu::try_new(pattern)
                    .map_err(|e| Error::LinearAlgebra(format!("symbolic LU failed: {e:?}")))?;
                if self.cached.len() >= 4 {
                    self.cached.remove(0);
                }
                self.cached.push(CachedSymbolic {
                    col_ptr: pattern.col_ptr().to_vec(),
                    row_idx: pattern.row_idx().to_vec(),
                    symbolic: s.clone(),
                });
                s
            }
        };
        Lu::try_new_with_symbolic(symbolic, mat.as_ref())
            .map_err(|e| Error::LinearAlgebra(format!("sparse LU failed: {e:?}")))
    }

    pub(crate) fn factor(&mut self, l: &Liouvillian, shift: C64) -> Result<Lu<usize, C64>> {
        self.factor_triplets(l.dim(), &l.shifted_triplets(shift))
    }
}

fn solve_in_place(lu: &Lu<usize, C64>, x: &mut [C64], transpose: bool) {
    let n = x.len();
    let mat = MatMut::from_column_major_slice_mut(x, n, 1);
    if transpose {
        lu.solve_transpose_in_place(mat);
    } else {
        lu.solve_in_place(mat);
    }
}

/// The `k` softest modes (smallest γ) by shift-invert Arnoldi on 𝓛 and 𝓛ᵀ.
pub fn eig_soft(l: &Liouvillian, k: usize) -> Result<SpectralData> {
    eig_soft_with(l, k, &SoftOptions::default(), &mut ShiftInvert::new())
}

/// ρ → ρ† in vectorized form, which maps the mode at λ to the one at −λ*.
fn mirror(v: &[C64], d: usize) -> Vec<C64> {
    let mut out = vec![ZERO; v.len()];
    for m in 0..d {
        for n in 0..d {
            out[m * d + n] = v[n * d + m].conj();
        }
    }
    out
}

/// Right/left pairs nearest one shift, and the radius of the disc they fill.
fn shift_pass(
    l: &Liouvillian,
    sigma: C64,
    nev: usize,
    opts: &SoftOptions,
    cache: &mut ShiftInvert,
) -> Result<(Vec<Mode>, f64)> {
    let n = l.dim();
    let lu = cache.factor(l, sigma)?;
    let kopts = KrylovOptions {
        nev,
        ncv: (2 * nev + 10).max(30).min(n),
        tol: opts.tol,
        max_restarts: opts.max_restarts,
        seed: 0x5eed,
    };
    let right = krylov::dominant_eigenpairs(n, |x| solve_in_place(&lu, x, false), kopts)?;
    let left = krylov::dominant_eigenpairs(
        n,
        |x| solve_in_place(&lu, x, true),
        KrylovOptions {
            nev: (nev + 4).min(n - 1),
            ncv: (2 * nev + 18).max(30).min(n),
            seed: 0x1eff,
            ..kopts
        },
    )?;
    let lam = |theta: C64| sigma + ONE / theta;
    let lam_l: Vec<C64> = left.iter().map(|p| lam(p.theta)).collect();
    let tol = pairing_tolerance(l.norm());
    let mut used = vec![false; lam_l.len()];
    let mut modes = Vec::with_capacity(right.len());
    let mut radius = 0.0_f64;
    let mut unmatched = f64::INFINITY;
    for r in right {
        let eigenvalue = lam(r.theta);
        let dist = (eigenvalue - sigma).norm();
        let best = (0..lam_l.len())
            .filter(|&j| !used[j])
            .min_by(|&a, &b| (lam_l[a] - eigenvalue).norm().total_cmp(&(lam_l[b] - eigenvalue).norm()));
        match best {
            Some(j) if (lam_l[j] - eigenvalue).norm() < tol => {
                used[j] = true;
                radius = radius.max(dist);
                modes.push(Mode {
                    eigenvalue,
                    right: r.vector,
                    left: left[j].vector.clone(),
                });
            }
            // Edge of the searched disc where the two Krylov runs settled
            // on different members of an equidistant group.
            _ => unmatched = unmatched.min(dist),
        }
    }
    if modes.is_empty() {
        return Err(Error::Degeneracy {
            eigenvalue: format!("{sigma}"),
            reason: "no right eigenvalue near the shift has a left partner".into(),
        });
    }
    Ok((modes, radius.min(unmatched)))
}

fn insert_unique(pool: &mut Vec<Mode>, m: Mode) {
    let tol = 1e-7 * (1.0 + m.eigenvalue.norm());
    if pool.iter().all(|p| (p.eigenvalue - m.eigenvalue).norm() > tol) {
        pool.push(m);
    }
}

/// k-th smallest γ among the pool (or +∞).
fn kth_rate(pool: &[Mode], k: usize) -> f64 {
    let mut g: Vec<f64> = pool.iter().map(Mode::rate).collect();
    g.sort_by(f64::total_cmp);
    g.get(k - 1).copied().unwrap_or(f64::INFINITY)
}

pub fn eig_soft_with(
    l: &Liouvillian,
    k: usize,
    opts: &SoftOptions,
    cache: &mut ShiftInvert,
) -> Result<SpectralData> {
    if k < 2 {
        return Err(Error::InvalidParams(format!("eig_soft needs k ≥ 2, got {k}")));
    }
    let n = l.dim();
    if k > n {
        return Err(Error::InvalidParams(format!("k = {k} exceeds d² = {n}")));
    }
    let d = l.cutoff();
    let norm = l.norm();
    let nev = (k + opts.extra).min(n - 1);
    let window = match opts.window {
        FrequencyWindow::Axis => 0.0,
        FrequencyWindow::Auto => 2.0 * l.params().detuning.abs() + 8.0,
        FrequencyWindow::Fixed(w) => w.max(0.0),
    };

    let mut pool: Vec<Mode> = Vec::new();
    let mut discs: Vec<(f64, f64)> = Vec::new();
    let mut centre = 0.0;
    loop {
        let sigma = C64::new(centre, opts.shift_rate);
        let (found, radius) = shift_pass(l, sigma, nev, opts, cache)?;
        discs.push((centre, radius));
        for m in found {
            if centre > 0.0 {
                let mirrored = Mode {
                    eigenvalue: -m.eigenvalue.conj(),
                    right: mirror(&m.right, d),
                    left: mirror(&m.left, d),
                };
                insert_unique(&mut pool, mirrored);
            }
            insert_unique(&mut pool, m);
        }
        if window == 0.0 {
            break;
        }
        // Every eigenvalue in {0 ≤ ω ≤ window, γ ≤ γ_k} must lie in a
        // searched disc; discs sit above the axis, so checking the bottom
        // edge of the strip suffices.
        let depth = kth_rate(&pool, k).min(norm) + opts.shift_rate;
        let samples = 400;
        let spacing = window / samples as f64;
        // A sample directly under an earlier shift is not retried: that disc
        // already holds the nev nearest eigenvalues.
        let uncovered = (0..=samples).map(|i| spacing * i as f64).find(|&w| {
            discs.iter().all(|&(c, r)| {
                ((w - c).powi(2) + depth * depth).sqrt() >= r && (w - c).abs() > 0.5 * spacing
            })
        });
        match uncovered {
            None => break,
            Some(w) if discs.len() < opts.max_shifts => centre = w,
            Some(w) => {
                log::warn!(
                    "soft-mode search stopped after {} shifts; ω > {w:.3} not covered at γ ≤ {depth:.3}",
                    discs.len()
                );
                break;
            }
        }
    }

    sort_modes(&mut pool);
    pool.truncate(k);
    let spec = finish(l, pool, norm)?;
    let (rr, rl) = spec.residuals(l)?;
    let worst = rr.max(rl);
    if worst > 1e-8 * norm.max(1.0) {
        return Err(Error::NonConvergence {
            wanted: k,
            converged: 0,
            residual: worst,
        });
    }
    Ok(spec)
}

/// Right null vector of 𝓛 via the bordered system with the trace row in
/// place of row 0, Hermitized and normalized.
pub fn steady_state(l: &Liouvillian) -> Result<DensityState> {
    steady_state_with(l, &mut ShiftInvert::new())
}

pub fn steady_state_with(l: &Liouvillian, cache: &mut ShiftInvert) -> Result<DensityState> {
    let d = l.cutoff();
    let n = l.dim();
    let mut triplets: Vec<(usize, usize, C64)> = l.matrix().triplets().filter(|&(r, _, _)| r != 0).collect();
    for m in 0..d {
        triplets.push((0, m * d + m, ONE));
    }
    // Keep row 0's original pattern as explicit zeros so the symbolic
    // analysis matches across calls.
    triplets.extend(l.matrix().row(0).map(|(c, _)| (0, c, ZERO)));
    let lu = cache.factor_triplets(n, &triplets)?;
    let mut x = vec![ZERO; n];
    x[0] = ONE;
    solve_in_place(&lu, &mut x, false);
    let norm = l.norm();
    let res = l.apply(&x)?;
    let residual = norm2(&res) / norm2(&x).max(1e-300);
    if !residual.is_finite() || residual > 1e-8 * norm.max(1.0) {
        return Err(Error::NonUniqueSteadyState(format!(
            "bordered solve residual {residual:.3e} (null space not one-dimensional)"
        )));
    }
    let state = DensityState::devectorize(&x, d)?.hermitized();
    let tr = state.trace();
    Ok(DensityState::from_fn(d, |a, b| state.get(a, b) / tr.re))
}

/// Rescales the soft mode so tr[O ρ¹] = 1. Inside the critical region
/// (ω₁ = 0) ρ¹ is then Hermitian up to rounding and is Hermitized exactly.
pub fn gauge_fix_observable(spec: &SpectralData, o: &TruncatedOperator) -> Result<SpectralData> {
    let mut out = spec.clone();
    let c = o.expectation(&out.modes[1].right);
    if c.norm() < 1e-10 {
        return Err(Error::GaugeSingular {
            parameter: "soft mode".into(),
            value: c.norm(),
        });
    }
    out.regauge(1, ONE / c)?;
    if out.is_real(1) {
        let d = out.cutoff;
        let herm = DensityState::devectorize(&out.modes[1].right, d)?.hermitian_part();
        out.modes[1].right = herm.into_vector();
        let p = out.overlap(1, 1);
        krylov::scale(&mut out.modes[1].left, ONE / p);
    }
    out.gauge = Gauge::Observable;
    Ok(out)
}

/// The zero mode and the slowest non-oscillating mode, gauge-fixed with
/// tr[b†b ρ¹] = 1, plus the rates the two-mode truncation neglects.
#[derive(Debug, Clone)]
pub struct MetastablePair {
    /// Two modes: index 0 the steady state, index 1 the soft mode.
    pub spec: SpectralData,
    /// Slowest neglected rate among the computed modes.
    pub next_rate: f64,
    /// True if a neglected oscillating mode decays slower than ρ¹.
    pub slower_oscillating: bool,
}

impl MetastablePair {
    pub fn lambda(&self) -> C64 {
        self.spec.modes[1].eigenvalue
    }

    pub fn rate(&self) -> f64 {
        self.spec.modes[1].rate()
    }

    pub fn steady(&self) -> &[C64] {
        &self.spec.modes[0].right
    }

    pub fn right(&self) -> &[C64] {
        &self.spec.modes[1].right
    }

    pub fn left(&self) -> &[C64] {
        &self.spec.modes[1].left
    }
}

/// Soft-mode pair for the metastable description at one parameter point.
///
/// The soft mode is the slowest mode with ω = 0 among the four modes nearest
/// the origin; inside the critical region this is also the slowest mode
/// overall.
pub fn metastable_pair(l: &Liouvillian, opts: &SoftOptions, cache: &mut ShiftInvert) -> Result<MetastablePair> {
    let spec = eig_soft_with(l, 4, opts, cache)?;
    let slow = (1..spec.len()).find(|&q| spec.is_real(q)).ok_or_else(|| Error::Degeneracy {
        eigenvalue: format!("{}", spec.modes[1].eigenvalue),
        reason: "no non-oscillating soft mode among the slowest modes".into(),
    })?;
    let next_rate = (1..spec.len())
        .filter(|&q| q != slow)
        .map(|q| spec.rate(q))
        .fold(f64::INFINITY, f64::min);
    let pair = gauge_fix_observable(&spec.select(&[0, slow]), &number(l.cutoff()))?;
    Ok(MetastablePair {
        spec: pair,
        next_rate,
        slower_oscillating: slow > 1,
    })
}

/// Left zero vector deviation from the trace functional.
pub fn trace_functional_error(spec: &SpectralData) -> f64 {
    let t = trace_functional(spec.cutoff);
    spec.modes[0]
        .left
        .iter()
        .zip(&t)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::operators::number;

    fn gammas(s: &SpectralData) -> Vec<f64> {
        (0..s.len()).map(|q| s.rate(q)).collect()
    }

    #[test]
    fn analytic_decaying_cavity() {
        let l = Liouvillian::build(&ModelParams::new(0.0, 0.0, 0.0, 2)).unwrap();
        let s = eig_full(&l).unwrap();
        let g = gammas(&s);
        for (a, b) in g.iter().zip([0.0, 0.5, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.biorthogonality_error() < 1e-10);
        assert!(trace_functional_error(&s) < 1e-10);
    }

    #[test]
    fn resolution_and_reconstruction() {
        let l = Liouvillian::build(&ModelParams::reference(-8.0, 6)).unwrap();
        let s = eig_full(&l).unwrap();
        let n = l.dim();
        let dense = l.to_dense();
        let scale = dense.norm_max();
        let (mut id_err, mut rec_err) = (0.0_f64, 0.0_f64);
        for p in 0..n {
            for r in 0..n {
                let mut id = ZERO;
                let mut rec = ZERO;
                for m in s.modes() {
                    let t = m.right[p] * m.left[r];
                    id += t;
                    rec += m.eigenvalue * t;
                }
                let target = if p == r { ONE } else { ZERO };
                id_err = id_err.max((id - target).norm());
                rec_err = rec_err.max((rec - dense[(p, r)]).norm());
            }
        }
        assert!(id_err < 1e-7, "{id_err}");
        assert!(rec_err < 1e-6 * scale, "{rec_err}");
    }

    // At this cutoff the softest pair sits at ω ≈ ±7.7, far from the origin
    // shift, so this also exercises the frequency-window search.
    #[test]
    fn soft_solver_matches_dense() {
        let l = Liouvillian::build(&ModelParams::reference(-8.0, 12)).unwrap();
        let full = eig_full(&l).unwrap();
        let soft = eig_soft(&l, 4).unwrap();
        for q in 0..4 {
            assert!((full.mode(q).eigenvalue - soft.mode(q).eigenvalue).norm() < 1e-8, "q={q}");
        }
        let (rr, rl) = soft.residuals(&l).unwrap();
        assert!(rr.max(rl) < 1e-8 * l.norm());
        assert!(soft.biorthogonality_error() < 1e-8);
        assert!(trace_functional_error(&soft) < 1e-10);
    }

    #[test]
    fn soft_mode_real_in_critical_region() {
        let l = Liouvillian::build(&ModelParams::reference(-5.0, 20)).unwrap();
        let s = eig_soft(&l, 3).unwrap();
        assert!(s.mode(0).eigenvalue.norm() < 1e-9 * l.norm());
        assert!(s.frequency(1).abs() < 1e-8);
        assert!(s.rate(1) > 0.0);
    }

    #[test]
    fn steady_state_vacuum_without_drive() {
        let l = Liouvillian::build(&ModelParams::new(-3.0, -0.5, 0.0, 6)).unwrap();
        let rho = steady_state(&l).unwrap();
        assert!(rho.occupation().abs() < 1e-12);
        assert!((rho.get(0, 0).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn steady_state_is_physical() {
        let l = Liouvillian::build(&ModelParams::reference(-10.0, 25)).unwrap();
        let rho = steady_state(&l).unwrap();
        assert!((rho.trace() - ONE).norm() < 1e-8);
        assert!(rho.hermiticity_error() < 1e-8);
        assert!(rho.hermitian_eigenvalues().iter().all(|&e| e > -1e-7));
        let res = l.apply(&rho.vectorize()).unwrap();
        assert!(norm2(&res) < 1e-8 * l.norm());
        let spec = eig_soft(&l, 2).unwrap();
        let alt = spec.steady_state().unwrap();
        let diff = rho
            .elements()
            .iter()
            .zip(alt.elements())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn observable_gauge_fix() {
        let l = Liouvillian::build(&ModelParams::reference(-4.0, 15)).unwrap();
        let s = eig_soft(&l, 3).unwrap();
        let n = number(15);
        let fixed = gauge_fix_observable(&s, &n).unwrap();
        let c = n.expectation(&fixed.mode(1).right);
        assert!((c - ONE).norm() < 1e-12, "{c} {}", fixed.frequency(1));
        assert!(fixed.biorthogonality_error() < 1e-8);
        let again = gauge_fix_observable(&fixed, &n).unwrap();
        for (a, b) in again.mode(1).right.iter().zip(&fixed.mode(1).right) {
            assert!((a - b).norm() < 1e-12);
        }
        let rho1 = DensityState::devectorize(&fixed.mode(1).right, 15).unwrap();
        assert!(rho1.hermiticity_error() < 1e-12);
    }

    #[test]
    fn gauge_singular_observable() {
        let l = Liouvillian::build(&ModelParams::reference(-9.0, 8)).unwrap();
        let s = eig_soft(&l, 2).unwrap();
        let zero = TruncatedOperator::zeros(8);
        assert!(matches!(gauge_fix_observable(&s, &zero), Err(Error::GaugeSingular { .. })));
    }

    #[test]
    fn regauge_preserves_pairing() {
        let l = Liouvillian::build(&ModelParams::reference(-5.0, 6)).unwrap();
        let mut s = eig_full(&l).unwrap();
        s.regauge(1, C64::new(2.5, -0.7)).unwrap();
        s.regauge(3, C64::new(-0.1, 0.0)).unwrap();
        assert!(s.biorthogonality_error() < 1e-8);
        assert!(s.regauge(0, ONE).is_err());
    }

    #[test]
    fn dense_guard() {
        let l = Liouvillian::build(&ModelParams::reference(-5.0, 31)).unwrap();
        assert!(matches!(eig_full(&l), Err(Error::TooLarge { .. })));
    }
}
