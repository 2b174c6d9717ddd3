//! Model parameters, density matrices and observable series.
//!
//! All rates and energies are stored in units of the cavity loss rate κ.
//! [`ModelParams::validate`] rescales an arbitrary-κ parameter set so that
//! κ = 1 afterwards.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Physical parameters of the driven Kerr cavity plus the Fock cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Cavity loss rate κ.
    pub kappa: f64,
    /// Pump-cavity detuning δ = ωp − ωc.
    pub detuning: f64,
    /// Kerr self-interaction U.
    pub interaction: f64,
    /// Drive amplitude F.
    pub drive: f64,
    /// Fock-space dimension d.
    pub cutoff: usize,
}

impl ModelParams {
    pub fn new(detuning: f64, interaction: f64, drive: f64, cutoff: usize) -> Self {
        Self {
            kappa: 1.0,
            detuning,
            interaction,
            drive,
            cutoff,
        }
    }

    /// κ = 1, U = −0.5, F = 4 at the given detuning.
    pub fn reference(detuning: f64, cutoff: usize) -> Self {
        Self::new(detuning, -0.5, 4.0, cutoff)
    }

    /// Checks the invariants and rescales every quantity to units of κ.
    pub fn validate(self) -> Result<Self> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidParams(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.cutoff < 2 {
            return Err(Error::InvalidParams(format!(
                "cutoff must be at least 2, got {}",
                self.cutoff
            )));
        }
        for (name, value) in [
            ("detuning", self.detuning),
            ("interaction", self.interaction),
            ("drive", self.drive),
        ] {
            if !value.is_finite() {
                return Err(Error::InvalidParams(format!("{name} is not finite")));
            }
        }
        let k = self.kappa;
        Ok(Self {
            kappa: 1.0,
            detuning: self.detuning / k,
            interaction: self.interaction / k,
            drive: self.drive / k,
            cutoff: self.cutoff,
        })
    }

    pub fn with(self, parameter: SweepParameter, value: f64) -> Self {
        let mut p = self;
        match parameter {
            SweepParameter::Detuning => p.detuning = value,
            SweepParameter::Drive => p.drive = value,
        }
        p
    }

    pub fn get(&self, parameter: SweepParameter) -> f64 {
        match parameter {
            SweepParameter::Detuning => self.detuning,
            SweepParameter::Drive => self.drive,
        }
    }

    pub fn with_cutoff(self, cutoff: usize) -> Self {
        Self { cutoff, ..self }
    }
}

/// The control parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepParameter {
    Detuning,
    Drive,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Detuning => "delta",
            SweepParameter::Drive => "F",
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" | "detuning" => Ok(SweepParameter::Detuning),
            "F" | "f" | "drive" => Ok(SweepParameter::Drive),
            other => Err(Error::InvalidParams(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

/// A d×d density matrix stored row-major.
///
/// Row-major storage coincides with the vectorized form: element ρ_{mn}
/// (0-based) sits at index p = m·d + n.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    dim: usize,
    elements: Vec<C64>,
}

impl DensityState {
    pub fn from_elements(dim: usize, elements: Vec<C64>) -> Result<Self> {
        if elements.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: elements.len(),
            });
        }
        Ok(Self { dim, elements })
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut elements = Vec::with_capacity(dim * dim);
        for m in 0..dim {
            for n in 0..dim {
                elements.push(f(m, n));
            }
        }
        Self { dim, elements }
    }

    /// The Fock projector |k⟩⟨k|.
    pub fn fock(dim: usize, k: usize) -> Self {
        assert!(k < dim, "Fock level {k} outside cutoff {dim}");
        Self::from_fn(dim, |m, n| {
            if m == k && n == k {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.elements[m * self.dim + n]
    }

    pub fn elements(&self) -> &[C64] {
        &self.elements
    }

    /// Column vector with index p = m·d + n.
    pub fn vectorize(&self) -> Vec<C64> {
        self.elements.clone()
    }

    pub fn into_vector(self) -> Vec<C64> {
        self.elements
    }

    pub fn devectorize(vector: &[C64], dim: usize) -> Result<Self> {
        Self::from_elements(dim, vector.to_vec())
    }

    pub fn trace(&self) -> C64 {
        trace_of(&self.elements, self.dim)
    }

    /// max |ρ − ρ†|.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for m in 0..d {
            for n in m..d {
                let e = (self.get(m, n) - self.get(n, m).conj()).norm();
                worst = worst.max(e);
            }
        }
        worst
    }

    /// (X + X†)/2 without normalization (for traceless eigenmodes).
    pub fn hermitian_part(&self) -> Self {
        Self::from_fn(self.dim, |m, n| 0.5 * (self.get(m, n) + self.get(n, m).conj()))
    }

    /// (ρ + ρ†)/2 rescaled to unit trace.
    pub fn hermitized(&self) -> Self {
        let mut out = self.hermitian_part();
        let tr = out.trace().re;
        if tr != 0.0 {
            for z in &mut out.elements {
                *z /= tr;
            }
        }
        out
    }

    /// ⟨b†b⟩ = Σ_k k ρ_kk.
    pub fn occupation(&self) -> f64 {
        occupation_of(&self.elements, self.dim).re
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        let d = self.dim;
        let h = faer::Mat::<C64>::from_fn(d, d, |m, n| 0.5 * (self.get(m, n) + self.get(n, m).conj()));
        let mut ev: Vec<f64> = match h.self_adjoint_eigenvalues(faer::Side::Lower) {
            Ok(v) => v,
            Err(_) => return Vec::new(),
        };
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Σ_m x_{mm} for a vectorized d×d matrix.
pub fn trace_of(vector: &[C64], dim: usize) -> C64 {
    (0..dim).map(|m| vector[m * dim + m]).sum()
}

/// Σ_k k x_{kk} for a vectorized d×d matrix (complex for non-Hermitian input).
pub fn occupation_of(vector: &[C64], dim: usize) -> C64 {
    (0..dim).map(|k| vector[k * dim + k] * k as f64).sum()
}

/// Which way a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Forward,
    Backward,
    None,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Forward => "forward",
            Branch::Backward => "backward",
            Branch::None => "none",
        }
    }
}

/// Expectation values of an observable along a parameter or time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSeries {
    pub abscissa: Vec<f64>,
    pub values: Vec<f64>,
    pub branch: Branch,
}

impl ObservableSeries {
    pub fn new(abscissa: Vec<f64>, values: Vec<f64>, branch: Branch) -> Result<Self> {
        if abscissa.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: abscissa.len(),
                actual: values.len(),
            });
        }
        let increasing = abscissa.windows(2).all(|w| w[1] > w[0]);
        let decreasing = abscissa.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::Protocol(
                "abscissa must be strictly monotone within a branch".into(),
            ));
        }
        Ok(Self {
            abscissa,
            values,
            branch,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rescales_by_kappa() {
        let p = ModelParams {
            kappa: 2.0,
            detuning: -4.0,
            interaction: -1.0,
            drive: 8.0,
            cutoff: 10,
        }
        .validate()
        .unwrap();
        assert_eq!(p.kappa, 1.0);
        assert_eq!(p.interaction, -0.5);
        assert_eq!(p.drive, 4.0);
        assert_eq!(p.detuning, -2.0);
    }

    #[test]
    fn validate_accepts_reference_params_unchanged() {
        let p = ModelParams::new(-7.3, -0.5, 4.0, 40);
        assert_eq!(p.validate().unwrap(), p);
    }

    #[test]
    fn validate_rejects_bad_input() {
        let mut p = ModelParams::reference(-5.0, 10);
        p.kappa = 0.0;
        assert!(matches!(p.validate(), Err(Error::InvalidParams(_))));
        p.kappa = -1.0;
        assert!(p.validate().is_err());
        let p = ModelParams::reference(-5.0, 1);
        assert!(p.validate().is_err());
    }

    #[test]
    fn vectorize_two_by_two_ordering() {
        let [a, b, c, e] = [1.0, 2.0, 3.0, 4.0].map(|x| C64::new(x, -x));
        let rho = DensityState::from_fn(2, |m, n| [[a, b], [c, e]][m][n]);
        assert_eq!(rho.vectorize(), vec![a, b, c, e]);
    }

    #[test]
    fn identity_diagonal_positions() {
        let id = DensityState::from_fn(3, |m, n| C64::new((m == n) as u8 as f64, 0.0));
        let v = id.vectorize();
        // 1-based positions 1, 5, 9
        let ones: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, z)| z.re == 1.0)
            .map(|(p, _)| p + 1)
            .collect();
        assert_eq!(ones, vec![1, 5, 9]);
    }

    #[test]
    fn devectorize_rejects_wrong_length() {
        let v = vec![C64::new(0.0, 0.0); 5];
        assert!(matches!(
            DensityState::devectorize(&v, 2),
            Err(Error::DimensionMismatch { expected: 4, actual: 5 })
        ));
    }

    #[test]
    fn series_requires_monotone_abscissa() {
        assert!(ObservableSeries::new(vec![0.0, 1.0, 2.0], vec![1.0; 3], Branch::Forward).is_ok());
        assert!(ObservableSeries::new(vec![2.0, 1.0, 0.0], vec![1.0; 3], Branch::Backward).is_ok());
        assert!(ObservableSeries::new(vec![0.0, 1.0, 1.0], vec![1.0; 3], Branch::None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = (usize, Vec<C64>)> {
            (1usize..=10).prop_flat_map(|d| {
                (
                    Just(d),
                    proptest::collection::vec((-1e3..1e3f64, -1e3..1e3f64), d * d)
                        .prop_map(|v| v.into_iter().map(|(r, i)| C64::new(r, i)).collect()),
                )
            })
        }

        proptest! {
            #[test]
            fn vectorization_round_trip((d, v) in matrix()) {
                let rho = DensityState::devectorize(&v, d).unwrap();
                prop_assert_eq!(rho.vectorize(), v.clone());
                let again = DensityState::devectorize(&rho.vectorize(), d).unwrap();
                prop_assert_eq!(again, rho);
            }

            #[test]
            fn occupation_matches_number_operator_product((d, v) in matrix()) {
                let rho = DensityState::devectorize(&v, d).unwrap();
                let num = crate::operators::number(d.max(2));
                if d >= 2 {
                    // tr(b†b ρ) by explicit matrix product
                    let mut tr = C64::new(0.0, 0.0);
                    for m in 0..d {
                        for k in 0..d {
                            tr += num.get(m, k) * rho.get(k, m);
                        }
                    }
                    let occ = occupation_of(&v, d);
                    prop_assert!((tr - occ).norm() <= 1e-12 * (1.0 + occ.norm()));
                }
            }
        }
    }
}
