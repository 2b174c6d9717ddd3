//! The Liouvillian supermatrix in the convention i d|ρ)/dt = 𝓛|ρ).
//!
//! With ρ vectorized as p = m·d + n the row of ρ_{mn} couples only to
//! (m,n), (m+1,n+1), (m,n±1) and (m±1,n):
//!
//! ```text
//! (𝓛ρ)_{mn} = [−(m−n)δ + U(m−n)(m+n−1)/2 − i(m+n)κ/2] ρ_{mn}
//!           + iκ √((m+1)(n+1)) ρ_{m+1,n+1}
//!           + F √(m+1) ρ_{m+1,n} + F √m ρ_{m−1,n}
//!           − F √(n+1) ρ_{m,n+1} − F √n ρ_{m,n−1}
//! ```
//!
//! The stencil is affine in δ and in F, which [`AffineLiouvillian`] exploits
//! for time-dependent sweeps.

use std::io::{BufRead, Write};

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::model::{ModelParams, SweepParameter};
use crate::operators::{annihilation, hamiltonian, TruncatedOperator};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Compressed-row complex sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, C64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= n || c >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: r.max(c) + 1,
                });
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<C64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row(i).filter(|(_, v)| *v != ZERO).count()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.row(i).find(|&(c, _)| c == j).map_or(ZERO, |(_, v)| v)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// y = A x
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    /// y = Aᵀ x
    pub fn apply_transpose(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|z| *z = ZERO);
        for i in 0..self.n {
            let xi = x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.cols[k]] += self.vals[k] * xi;
            }
        }
    }

    pub fn to_dense(&self) -> Mat<C64> {
        let mut m = Mat::<C64>::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Maximum absolute row sum; bounds the spectral radius.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn shifted_values(&self, shift: C64) -> Vec<(usize, usize, C64)> {
        let mut t: Vec<(usize, usize, C64)> = self.triplets().collect();
        for i in 0..self.n {
            t.push((i, i, -shift));
        }
        t
    }
}

/// 𝓛 for a fixed parameter set.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    params: ModelParams,
    matrix: SparseMatrix,
}

/// Per-entry coefficients of the stencil: c0 + δ·c_δ + F·c_F.
struct StencilEntry {
    col: usize,
    base: C64,
    per_detuning: C64,
    per_drive: C64,
}

fn stencil_row(m: usize, n: usize, d: usize, p: &ModelParams) -> Vec<StencilEntry> {
    let (mf, nf) = (m as f64, n as f64);
    let idx = |a: usize, b: usize| a * d + b;
    let mut row = Vec::with_capacity(6);
    let kerr = 0.5 * p.interaction * (mf - nf) * (mf + nf - 1.0);
    row.push(StencilEntry {
        col: idx(m, n),
        base: C64::new(kerr, -0.5 * (mf + nf) * p.kappa),
        per_detuning: C64::new(-(mf - nf), 0.0),
        per_drive: ZERO,
    });
    if m + 1 < d && n + 1 < d {
        row.push(StencilEntry {
            col: idx(m + 1, n + 1),
            base: I * p.kappa * ((mf + 1.0) * (nf + 1.0)).sqrt(),
            per_detuning: ZERO,
            per_drive: ZERO,
        });
    }
    let drive = |col: usize, amp: f64| StencilEntry {
        col,
        base: ZERO,
        per_detuning: ZERO,
        per_drive: C64::new(amp, 0.0),
    };
    if m + 1 < d {
        row.push(drive(idx(m + 1, n), (mf + 1.0).sqrt()));
    }
    if m >= 1 {
        row.push(drive(idx(m - 1, n), mf.sqrt()));
    }
    if n + 1 < d {
        row.push(drive(idx(m, n + 1), -(nf + 1.0).sqrt()));
    }
    if n >= 1 {
        row.push(drive(idx(m, n - 1), -nf.sqrt()));
    }
    row
}

impl Liouvillian {
    /// Assembles 𝓛 entry by entry from the matrix-element equations.
    pub fn build(params: &ModelParams) -> Result<Self> {
        let p = params.validate()?;
        let d = p.cutoff;
        let mut triplets = Vec::new();
        triplets
            .try_reserve(6 * d * d)
            .map_err(|e| Error::LinearAlgebra(format!("cannot allocate Liouvillian: {e}")))?;
        for m in 0..d {
            for n in 0..d {
                let row = m * d + n;
                for e in stencil_row(m, n, d, &p) {
                    let v = e.base + e.per_detuning * p.detuning + e.per_drive * p.drive;
                    triplets.push((row, e.col, v));
                }
            }
        }
        Ok(Self {
            params: p,
            matrix: SparseMatrix::from_triplets(d * d, &triplets)?,
        })
    }

    /// Wraps an arbitrary supermatrix (debug dumps, synthetic tests).
    pub fn from_matrix(params: ModelParams, matrix: SparseMatrix) -> Result<Self> {
        let d = params.cutoff;
        if matrix.dim() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                actual: matrix.dim(),
            });
        }
        Ok(Self { params, matrix })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn cutoff(&self) -> usize {
        self.params.cutoff
    }

    /// d².
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn apply(&self, x: &[C64]) -> Result<Vec<C64>> {
        self.check_len(x.len())?;
        let mut y = vec![ZERO; x.len()];
        self.matrix.apply(x, &mut y);
        Ok(y)
    }

    /// Row vector times 𝓛, i.e. (xᵀ𝓛)ᵀ = 𝓛ᵀx.
    pub fn apply_left(&self, x: &[C64]) -> Result<Vec<C64>> {
        self.check_len(x.len())?;
        let mut y = vec![ZERO; x.len()];
        self.matrix.apply_transpose(x, &mut y);
        Ok(y)
    }

    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        self.matrix.apply(x, y);
    }

    pub fn to_dense(&self) -> Mat<C64> {
        self.matrix.to_dense()
    }

    pub fn norm(&self) -> f64 {
        self.matrix.inf_norm()
    }

    /// Triplets of 𝓛 − σ·1, for factorization.
    pub(crate) fn shifted_triplets(&self, shift: C64) -> Vec<(usize, usize, C64)> {
        self.matrix.shifted_values(shift)
    }

    /// Coordinate dump: one `row col re im` line per entry, 0-based indices.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# kerr-dpt liouvillian d={} rows={} nnz={}", self.cutoff(), self.dim(), self.matrix.nnz())?;
        writeln!(w, "# row col re im (0-based, p = m*d + n)")?;
        for (i, j, v) in self.matrix.triplets() {
            writeln!(w, "{} {} {} {}", i, j, crate::io::sci(v.re), crate::io::sci(v.im))?;
        }
        Ok(())
    }

    pub fn read_coordinate<R: BufRead>(params: ModelParams, r: R) -> Result<Self> {
        let mut triplets = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Protocol(format!("malformed coordinate line '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let re: f64 = f[2].parse().map_err(|_| bad())?;
            let im: f64 = f[3].parse().map_err(|_| bad())?;
            triplets.push((i, j, C64::new(re, im)));
        }
        let n = params.cutoff * params.cutoff;
        Self::from_matrix(params, SparseMatrix::from_triplets(n, &triplets)?)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// 𝓛(r) = 𝓛_base + r·𝓛_slope along one swept parameter, sharing one pattern.
#[derive(Debug, Clone)]
pub struct AffineLiouvillian {
    params: ModelParams,
    parameter: SweepParameter,
    pattern_ptr: Vec<usize>,
    cols: Vec<usize>,
    base: Vec<C64>,
    slope: Vec<C64>,
}

impl AffineLiouvillian {
    pub fn new(params: &ModelParams, parameter: SweepParameter) -> Result<Self> {
        let p = params.validate()?;
        let d = p.cutoff;
        let mut pattern_ptr = vec![0];
        let mut cols = Vec::with_capacity(6 * d * d);
        let mut base = Vec::with_capacity(6 * d * d);
        let mut slope = Vec::with_capacity(6 * d * d);
        for m in 0..d {
            for n in 0..d {
                let mut row = stencil_row(m, n, d, &p);
                row.sort_by_key(|e| e.col);
                for e in row {
                    let (b, s) = match parameter {
                        SweepParameter::Detuning => (e.base + e.per_drive * p.drive, e.per_detuning),
                        SweepParameter::Drive => (e.base + e.per_detuning * p.detuning, e.per_drive),
                    };
                    cols.push(e.col);
                    base.push(b);
                    slope.push(s);
                }
                pattern_ptr.push(cols.len());
            }
        }
        Ok(Self {
            params: p,
            parameter,
            pattern_ptr,
            cols,
            base,
            slope,
        })
    }

    pub fn parameter(&self) -> SweepParameter {
        self.parameter
    }

    pub fn dim(&self) -> usize {
        self.pattern_ptr.len() - 1
    }

    pub fn cutoff(&self) -> usize {
        self.params.cutoff
    }

    /// Parameters with the swept value substituted.
    pub fn params_at(&self, value: f64) -> ModelParams {
        self.params.with(self.parameter, value)
    }

    /// y = 𝓛(value) x without assembling the matrix.
    pub fn apply_at(&self, value: f64, x: &[C64], y: &mut [C64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.pattern_ptr[i]..self.pattern_ptr[i + 1] {
                acc += (self.base[k] + self.slope[k] * value) * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn at(&self, value: f64) -> Liouvillian {
        let n = self.dim();
        let mut vals = Vec::with_capacity(self.cols.len());
        for k in 0..self.cols.len() {
            vals.push(self.base[k] + self.slope[k] * value);
        }
        Liouvillian {
            params: self.params_at(value),
            matrix: SparseMatrix {
                n,
                row_ptr: self.pattern_ptr.clone(),
                cols: self.cols.clone(),
                vals,
            },
        }
    }

    /// Spectral-radius bound over the closed parameter interval.
    pub fn norm_bound(&self, lo: f64, hi: f64) -> f64 {
        self.at(lo).norm().max(self.at(hi).norm())
    }
}

fn kron(a: &TruncatedOperator, b: &TruncatedOperator) -> Mat<C64> {
    let d = a.dim();
    Mat::<C64>::from_fn(d * d, d * d, |r, c| {
        let (m, n) = (r / d, r % d);
        let (i, j) = (c / d, c % d);
        a.get(m, i) * b.get(n, j)
    })
}

/// Dense 𝓛 composed from superoperators:
/// 𝓛 = H⊗1 − 1⊗Hᵀ + iκ [b⊗(b†)ᵀ − ½ (b†b)⊗1 − ½ 1⊗(b†b)ᵀ],
/// using vec(AρB) = (A⊗Bᵀ) vec(ρ) for row-major vectorization.
pub fn build_superoperator(params: &ModelParams) -> Result<Mat<C64>> {
    let p = params.validate()?;
    let d = p.cutoff;
    let h = hamiltonian(&p)?;
    let b = annihilation(d)?;
    let bd = b.dagger();
    let num = bd.matmul(&b);
    let id = TruncatedOperator::identity(d);
    let terms = [
        (C64::new(1.0, 0.0), kron(&h, &id)),
        (C64::new(-1.0, 0.0), kron(&id, &h.transpose())),
        (I * p.kappa, kron(&b, &bd.transpose())),
        (I * (-0.5 * p.kappa), kron(&num, &id)),
        (I * (-0.5 * p.kappa), kron(&id, &num.transpose())),
    ];
    let n = d * d;
    let mut out = Mat::<C64>::zeros(n, n);
    for (s, t) in terms {
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] += s * t[(i, j)];
            }
        }
    }
    Ok(out)
}

/// Vectorized identity, the trace functional (ρ̄⁰|.
pub fn trace_functional(dim: usize) -> Vec<C64> {
    let mut v = vec![ZERO; dim * dim];
    for m in 0..dim {
        v[m * dim + m] = C64::new(1.0, 0.0);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DensityState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn decaying_cavity_spectrum() {
        let l = Liouvillian::build(&ModelParams::new(0.0, 0.0, 0.0, 2)).unwrap();
        let ev = l.to_dense().eigenvalues().unwrap();
        let mut im: Vec<f64> = ev.iter().map(|z| z.im).collect();
        im.sort_by(f64::total_cmp);
        let expected = [-1.0, -0.5, -0.5, 0.0];
        for (a, b) in im.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ev.iter().all(|z| z.re.abs() < 1e-12));
    }

    #[test]
    fn trace_is_left_null_vector() {
        for p in [
            ModelParams::reference(-7.0, 12),
            ModelParams::new(3.0, 1.3, 0.7, 9),
            ModelParams::new(0.0, 0.0, 0.0, 5),
        ] {
            let l = Liouvillian::build(&p).unwrap();
            let t = l.apply_left(&trace_functional(p.cutoff)).unwrap();
            let worst = t.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(worst < 1e-10 * l.matrix().max_abs(), "{worst}");
        }
    }

    #[test]
    fn stencil_matches_superoperator_composition() {
        for delta in [-13.0, -2.5, 0.0, 4.0] {
            let p = ModelParams::reference(delta, 5);
            let sparse = Liouvillian::build(&p).unwrap().to_dense();
            let dense = build_superoperator(&p).unwrap();
            let n = 25;
            for i in 0..n {
                for j in 0..n {
                    assert!((sparse[(i, j)] - dense[(i, j)]).norm() < 1e-12, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn sparse_dense_agree_up_to_eight() {
        for d in 2..=8 {
            let p = ModelParams::new(-1.7, 0.9, 2.3, d);
            let a = Liouvillian::build(&p).unwrap().to_dense();
            let b = build_superoperator(&p).unwrap();
            let worst = (0..d * d)
                .flat_map(|i| (0..d * d).map(move |j| (i, j)))
                .map(|(i, j)| (a[(i, j)] - b[(i, j)]).norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-12, "d={d}: {worst}");
        }
    }

    #[test]
    fn row_structure() {
        let p = ModelParams::reference(-5.0, 9);
        let l = Liouvillian::build(&p).unwrap();
        let d = p.cutoff;
        assert!(l.matrix().nnz() <= 6 * d * d);
        for m in 0..d {
            for n in 0..d {
                let row = m * d + n;
                assert!(l.matrix().row_nnz(row) <= 6);
                for (col, _) in l.matrix().row(row) {
                    let (a, b) = (col / d, col % d);
                    let allowed = [(m, n), (m + 1, n + 1), (m, n + 1), (m + 1, n)]
                        .contains(&(a, b))
                        || (n >= 1 && (a, b) == (m, n - 1))
                        || (m >= 1 && (a, b) == (m - 1, n));
                    assert!(allowed);
                }
            }
        }
    }

    #[test]
    fn apply_matches_dense_multiply() {
        let p = ModelParams::reference(-3.0, 4);
        let l = Liouvillian::build(&p).unwrap();
        let x = random_vec(16, 7);
        let y = l.apply(&x).unwrap();
        let dense = l.to_dense();
        for i in 0..16 {
            let mut acc = ZERO;
            for j in 0..16 {
                acc += dense[(i, j)] * x[j];
            }
            assert!((acc - y[i]).norm() < 1e-13);
        }
        assert!(l.apply(&x[..15]).is_err());
    }

    #[test]
    fn generator_preserves_hermiticity() {
        let p = ModelParams::reference(-9.0, 7);
        let l = Liouvillian::build(&p).unwrap();
        let raw = DensityState::devectorize(&random_vec(49, 3), 7).unwrap();
        let herm = DensityState::from_fn(7, |m, n| raw.get(m, n) + raw.get(n, m).conj());
        let y: Vec<C64> = l.apply(&herm.vectorize()).unwrap().into_iter().map(|z| -I * z).collect();
        let out = DensityState::devectorize(&y, 7).unwrap();
        assert!(out.hermiticity_error() < 1e-10);
    }

    #[test]
    fn affine_family_reproduces_direct_build() {
        let p = ModelParams::reference(-6.0, 6);
        for (param, value) in [(SweepParameter::Detuning, -11.5), (SweepParameter::Drive, 1.7)] {
            let fam = AffineLiouvillian::new(&p, param).unwrap();
            let direct = Liouvillian::build(&p.with(param, value)).unwrap();
            let x = random_vec(36, 11);
            let mut y = vec![ZERO; 36];
            fam.apply_at(value, &x, &mut y);
            let z = direct.apply(&x).unwrap();
            for (a, b) in y.iter().zip(&z) {
                assert!((a - b).norm() < 1e-12);
            }
            let at = fam.at(value);
            assert_eq!(at.params().get(param), value);
        }
    }

    #[test]
    fn coordinate_dump_round_trip() {
        let p = ModelParams::reference(-4.0, 4);
        let l = Liouvillian::build(&p).unwrap();
        let mut buf = Vec::new();
        l.write_coordinate(&mut buf).unwrap();
        let back = Liouvillian::read_coordinate(p, buf.as_slice()).unwrap();
        for (i, j, v) in l.matrix().triplets() {
            assert!((back.matrix().get(i, j) - v).norm() <= 1e-11 * v.norm().max(1.0));
        }
    }
}
