//! Restarted Arnoldi for the dominant eigenpairs of a linear operator.
//!
//! Used with shift-invert, Op = (𝓛 − σ)⁻¹, so the dominant Ritz values θ
//! map to the eigenvalues λ = σ + 1/θ nearest the shift. Restarts keep an
//! orthonormalized basis of the wanted Ritz vectors (Krylov–Schur style, with
//! eigenvectors of the projected matrix instead of Schur vectors).

use faer::Mat;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Σ conj(a_i) b_i
pub(crate) fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Σ a_i b_i — the bra-ket pairing with a stored as bra components.
pub(crate) fn bdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn scale(a: &mut [C64], s: C64) {
    a.iter_mut().for_each(|z| *z *= s);
}

/// y ← y + s·x
pub(crate) fn axpy(y: &mut [C64], s: C64, x: &[C64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += s * b);
}

pub(crate) fn random_unit(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let nrm = norm2(&v);
    scale(&mut v, C64::new(1.0 / nrm, 0.0));
    v
}

/// Orthogonalizes `w` against `basis` twice (classical Gram–Schmidt with one
/// reorthogonalization pass) and returns the accumulated coefficients.
fn orthogonalize(basis: &[Vec<C64>], w: &mut [C64]) -> Vec<C64> {
    let mut coeffs = vec![ZERO; basis.len()];
    for _ in 0..2 {
        for (c, v) in coeffs.iter_mut().zip(basis) {
            let h = cdot(v, w);
            axpy(w, -h, v);
            *c += h;
        }
    }
    coeffs
}

#[derive(Debug, Clone)]
pub(crate) struct RitzPair {
    pub theta: C64,
    pub vector: Vec<C64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct KrylovOptions {
    pub nev: usize,
    pub ncv: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

/// Dominant `nev` eigenpairs of `op` (applied in place), sorted by |θ|
/// descending.
pub(crate) fn dominant_eigenpairs(
    n: usize,
    mut op: impl FnMut(&mut [C64]),
    opts: KrylovOptions,
) -> Result<Vec<RitzPair>> {
    let nev = opts.nev.min(n);
    let ncv = opts.ncv.max(nev + 2).min(n);
    if ncv <= nev {
        return Err(Error::InvalidParams(format!(
            "operator of dimension {n} too small for {nev} eigenpairs"
        )));
    }
    let mut basis: Vec<Vec<C64>> = vec![random_unit(n, opts.seed)];
    let mut h = Mat::<C64>::zeros(ncv + 1, ncv);
    let mut kept = 0usize;
    let mut seed = opts.seed;
    let mut last_worst = f64::INFINITY;
    let mut last_converged = 0;

    for _restart in 0..=opts.max_restarts {
        for j in kept..ncv {
            let mut w = basis[j].clone();
            op(&mut w);
            let coeffs = orthogonalize(&basis, &mut w);
            for (i, c) in coeffs.into_iter().enumerate() {
                h[(i, j)] = c;
            }
            let mut beta = norm2(&w);
            if beta <= 1e-14 * h.col(j).norm_l2().max(1e-300) {
                // Invariant subspace found: continue with a fresh direction.
                seed = seed.wrapping_add(0x9E37_79B9);
                w = random_unit(n, seed);
                orthogonalize(&basis, &mut w);
                beta = norm2(&w);
                h[(j + 1, j)] = ZERO;
            } else {
                h[(j + 1, j)] = C64::new(beta, 0.0);
            }
            scale(&mut w, C64::new(1.0 / beta, 0.0));
            basis.push(w);
        }

        let m = ncv;
        let hm = Mat::<C64>::from_fn(m, m, |i, j| h[(i, j)]);
        let evd = hm
            .eigen()
            .map_err(|e| Error::LinearAlgebra(format!("projected eigenproblem failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let u = evd.U();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| s[b].norm().total_cmp(&s[a].norm()).then(a.cmp(&b)));

        let ritz_y = |i: usize| -> Vec<C64> {
            let mut y: Vec<C64> = (0..m).map(|r| u[(r, i)]).collect();
            let nrm = norm2(&y);
            scale(&mut y, C64::new(1.0 / nrm, 0.0));
            y
        };
        let estimate = |y: &[C64]| -> f64 {
            let mut acc = ZERO;
            for (c, yc) in y.iter().enumerate() {
                acc += h[(m, c)] * yc;
            }
            acc.norm()
        };

        let wanted: Vec<(usize, Vec<C64>, f64)> = order[..nev]
            .iter()
            .map(|&i| {
                let y = ritz_y(i);
                let est = estimate(&y);
                (i, y, est)
            })
            .collect();
        let converged = wanted
            .iter()
            .filter(|(i, _, est)| *est <= opts.tol * s[*i].norm())
            .count();
        last_converged = converged;
        last_worst = wanted
            .iter()
            .map(|(i, _, est)| est / s[*i].norm().max(1e-300))
            .fold(0.0, f64::max);

        if converged == nev {
            return Ok(wanted
                .into_iter()
                .map(|(i, y, _)| {
                    let mut x = vec![ZERO; n];
                    for (c, yc) in y.iter().enumerate() {
                        axpy(&mut x, *yc, &basis[c]);
                    }
                    let nrm = norm2(&x);
                    scale(&mut x, C64::new(1.0 / nrm, 0.0));
                    RitzPair {
                        theta: s[i],
                        vector: x,
                    }
                })
                .collect());
        }

        // Thick restart on the wanted Ritz vectors plus a few extra.
        let p = (nev + (ncv - nev) / 2).min(ncv - 1);
        let mut q: Vec<Vec<C64>> = Vec::with_capacity(p);
        for &i in &order[..p] {
            let mut y = ritz_y(i);
            orthogonalize(&q, &mut y);
            let nrm = norm2(&y);
            if nrm > 1e-8 {
                scale(&mut y, C64::new(1.0 / nrm, 0.0));
                q.push(y);
            }
        }
        let p = q.len();
        let mut new_basis: Vec<Vec<C64>> = Vec::with_capacity(ncv + 1);
        for qc in &q {
            let mut x = vec![ZERO; n];
            for (c, v) in qc.iter().zip(&basis[..m]) {
                axpy(&mut x, *c, v);
            }
            new_basis.push(x);
        }
        // H' = Q* H_m Q, b' = b Q
        let mut hq = Mat::<C64>::zeros(m, p);
        for (col, qc) in q.iter().enumerate() {
            for r in 0..m {
                let mut acc = ZERO;
                for (c, qv) in qc.iter().enumerate() {
                    acc += h[(r, c)] * qv;
                }
                hq[(r, col)] = acc;
            }
        }
        let mut h_new = Mat::<C64>::zeros(ncv + 1, ncv);
        for a in 0..p {
            for b in 0..p {
                h_new[(a, b)] = cdot(&q[a], &(0..m).map(|r| hq[(r, b)]).collect::<Vec<_>>());
            }
        }
        for b in 0..p {
            let mut acc = ZERO;
            for (c, qv) in q[b].iter().enumerate() {
                acc += h[(m, c)] * qv;
            }
            h_new[(p, b)] = acc;
        }
        new_basis.push(basis.pop().expect("residual vector present"));
        basis = new_basis;
        h = h_new;
        kept = p;
    }

    Err(Error::NonConvergence {
        wanted: nev,
        converged: last_converged,
        residual: last_worst,
    })
}
