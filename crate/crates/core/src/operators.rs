//! Truncated bosonic operators and the rotating-frame Kerr Hamiltonian
//! H = −δ b†b + (U/2) b†²b² + F(b + b†).

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Dense d×d operator on the truncated Fock space, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedOperator {
    dim: usize,
    matrix: Vec<C64>,
}

impl TruncatedOperator {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            matrix: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut out = Self::zeros(dim);
        for m in 0..dim {
            for n in 0..dim {
                out.matrix[m * dim + n] = f(m, n);
            }
        }
        out
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |m, n| C64::new((m == n) as u8 as f64, 0.0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.matrix[m * self.dim + n]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.matrix
    }

    pub fn dagger(&self) -> Self {
        Self::from_fn(self.dim, |m, n| self.get(n, m).conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |m, n| self.get(n, m))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut out = Self::zeros(d);
        for m in 0..d {
            for k in 0..d {
                let a = self.get(m, k);
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for n in 0..d {
                    out.matrix[m * d + n] += a * other.get(k, n);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_fn(self.dim, |m, n| self.get(m, n) + other.get(m, n))
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::from_fn(self.dim, |m, n| s * self.get(m, n))
    }

    pub fn commutator(&self, other: &Self) -> Self {
        let ab = self.matmul(other);
        let ba = other.matmul(self);
        Self::from_fn(self.dim, |m, n| ab.get(m, n) - ba.get(m, n))
    }

    /// max |A − A†|.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for m in 0..d {
            for n in 0..d {
                worst = worst.max((self.get(m, n) - self.get(n, m).conj()).norm());
            }
        }
        worst
    }

    /// tr[A X] for a vectorized d×d matrix X.
    pub fn expectation(&self, vector: &[C64]) -> C64 {
        let d = self.dim;
        let mut acc = C64::new(0.0, 0.0);
        for m in 0..d {
            for k in 0..d {
                acc += self.matrix[m * d + k] * vector[k * d + m];
            }
        }
        acc
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim;
        (0..d).all(|m| (0..d).all(|n| m == n || self.get(m, n) == C64::new(0.0, 0.0)))
    }
}

/// Lowering operator with b[n−1, n] = √n.
pub fn annihilation(dim: usize) -> Result<TruncatedOperator> {
    if dim < 2 {
        return Err(Error::InvalidParams(format!(
            "cutoff must be at least 2, got {dim}"
        )));
    }
    Ok(TruncatedOperator::from_fn(dim, |m, n| {
        if n == m + 1 {
            C64::new((n as f64).sqrt(), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}

pub fn creation(dim: usize) -> Result<TruncatedOperator> {
    Ok(annihilation(dim)?.dagger())
}

/// b†b = diag(0, 1, …, d−1).
pub fn number(dim: usize) -> TruncatedOperator {
    TruncatedOperator::from_fn(dim, |m, n| {
        if m == n {
            C64::new(m as f64, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// The rotating-frame Hamiltonian, in units of κ.
pub fn hamiltonian(params: &ModelParams) -> Result<TruncatedOperator> {
    let p = params.validate()?;
    let d = p.cutoff;
    Ok(TruncatedOperator::from_fn(d, |m, n| {
        if m == n {
            let k = m as f64;
            C64::new(-p.detuning * k + 0.5 * p.interaction * k * (k - 1.0), 0.0)
        } else if n == m + 1 {
            C64::new(p.drive * (n as f64).sqrt(), 0.0)
        } else if m == n + 1 {
            C64::new(p.drive * (m as f64).sqrt(), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}
