//! Locating the critical region and checking Fock-cutoff convergence.
//!
//! The critical region is the connected parameter interval around the
//! minimum of γ₁ on which γ₁ stays below a threshold. Edges come from a
//! coarse scan refined by bisection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::liouville::{AffineLiouvillian, Liouvillian};
use crate::model::{ModelParams, SweepParameter};
use crate::spectral::{self, ShiftInvert, SoftOptions};

/// Rate below which a parameter point counts as critical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// γ₁ < κ/2, the upper end of the admissible dwell window.
    HalfKappa,
    /// γ₁ < 1/t_c for the given dwell time.
    InverseDwell(f64),
    Rate(f64),
}

impl Threshold {
    pub fn rate(self, kappa: f64) -> f64 {
        match self {
            Threshold::HalfKappa => 0.5 * kappa,
            Threshold::InverseDwell(tc) => 1.0 / tc,
            Threshold::Rate(g) => g,
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    /// `half-kappa`, `dwell:T` or `rate:G`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Protocol(format!("unknown threshold '{s}' (half-kappa | dwell:T | rate:G)"));
        if s == "half-kappa" {
            return Ok(Threshold::HalfKappa);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match kind {
            "dwell" if value > 0.0 => Ok(Threshold::InverseDwell(value)),
            "rate" if value > 0.0 => Ok(Threshold::Rate(value)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// Bisection tolerance on the edges.
    pub tol: f64,
    pub soft: SoftOptions,
}

impl ScanOptions {
    pub fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self {
            lo,
            hi,
            step,
            tol: 1e-3,
            soft: SoftOptions::axis(),
        }
    }

    /// δ ∈ [−40, 0] in steps of 0.5.
    pub fn detuning() -> Self {
        Self::new(-40.0, 0.0, 0.5)
    }

    /// F ∈ [0.5, 8] in steps of 0.05.
    pub fn drive() -> Self {
        Self::new(0.5, 8.0, 0.05)
    }

    pub fn for_parameter(parameter: SweepParameter) -> Self {
        match parameter {
            SweepParameter::Detuning => Self::detuning(),
            SweepParameter::Drive => Self::drive(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticalRegion {
    pub parameter: SweepParameter,
    pub lower: f64,
    pub upper: f64,
    pub threshold: f64,
    /// Coarse scan (value, γ₁).
    pub scan: Vec<(f64, f64)>,
}

impl CriticalRegion {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.lower && r <= self.upper
    }

    /// `n` uniform points spanning the region.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let h = self.width() / (n - 1) as f64;
        (0..n).map(|i| self.lower + i as f64 * h).collect()
    }
}

/// γ₁, the slowest nonzero rate.
pub fn soft_rate(l: &Liouvillian, soft: &SoftOptions, cache: &mut ShiftInvert) -> Result<f64> {
    Ok(spectral::eig_soft_with(l, 2, soft, cache)?.rate(1))
}

pub fn critical_region(
    params: &ModelParams,
    parameter: SweepParameter,
    threshold: Threshold,
    opts: &ScanOptions,
) -> Result<CriticalRegion> {
    let p = params.validate()?;
    let family = AffineLiouvillian::new(&p, parameter)?;
    let g = threshold.rate(p.kappa);
    let count = ((opts.hi - opts.lo) / opts.step).round() as usize + 1;
    let values: Vec<f64> = (0..count).map(|i| opts.lo + i as f64 * opts.step).collect();
    let rates: Vec<f64> = values
        .par_iter()
        .map_init(ShiftInvert::new, |cache, &r| soft_rate(&family.at(r), &opts.soft, cache))
        .collect::<Result<_>>()?;
    let scan: Vec<(f64, f64)> = values.iter().copied().zip(rates.iter().copied()).collect();

    let imin = (0..count).min_by(|&a, &b| rates[a].total_cmp(&rates[b])).expect("nonempty scan");
    if !(rates[imin] < g) {
        return Err(Error::Protocol(format!(
            "no critical region: min gamma1 = {:.4e} at {} = {} is not below {g:.4e}",
            rates[imin],
            parameter.name(),
            values[imin]
        )));
    }
    let mut a = imin;
    while a > 0 && rates[a - 1] < g {
        a -= 1;
    }
    let mut b = imin;
    while b + 1 < count && rates[b + 1] < g {
        b += 1;
    }
    if a == 0 || b + 1 == count {
        return Err(Error::Protocol(format!(
            "critical region reaches the scan boundary [{}, {}]; widen the scan",
            opts.lo, opts.hi
        )));
    }
    let mut cache = ShiftInvert::new();
    let mut bisect = |mut inside: f64, mut outside: f64| -> Result<f64> {
        while (outside - inside).abs() > opts.tol {
            let mid = 0.5 * (inside + outside);
            if soft_rate(&family.at(mid), &opts.soft, &mut cache)? < g {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        Ok(0.5 * (inside + outside))
    };
    let lower = bisect(values[a], values[a - 1])?;
    let upper = bisect(values[b], values[b + 1])?;
    Ok(CriticalRegion {
        parameter,
        lower,
        upper,
        threshold: g,
        scan,
    })
}

/// Occupation difference of the steady state between cutoffs d and d + step.
pub fn cutoff_error(params: &ModelParams, parameter: SweepParameter, values: &[f64], step: usize) -> Result<Vec<f64>> {
    let d = params.cutoff;
    let coarse = AffineLiouvillian::new(params, parameter)?;
    let fine = AffineLiouvillian::new(&params.with_cutoff(d + step), parameter)?;
    values
        .par_iter()
        .map_init(
            || (ShiftInvert::new(), ShiftInvert::new()),
            |(c0, c1), &r| {
                let n0 = spectral::steady_state_with(&coarse.at(r), c0)?.occupation();
                let n1 = spectral::steady_state_with(&fine.at(r), c1)?.occupation();
                Ok((n1 - n0).abs())
            },
        )
        .collect()
}

/// Errors if n_st differs by more than `tol` between d and d + step anywhere
/// on `values`.
pub fn check_cutoff(params: &ModelParams, parameter: SweepParameter, values: &[f64], step: usize, tol: f64) -> Result<()> {
    let errs = cutoff_error(params, parameter, values, step)?;
    if let Some((i, &e)) = errs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        if e > tol {
            return Err(Error::CutoffNotConverged {
                cutoff: params.cutoff,
                next: params.cutoff + step,
                parameter: values[i],
                delta_n: e,
            });
        }
    }
    Ok(())
}

/// Smallest cutoff in steps of `step` from `params.cutoff` up to `max` that
/// passes [`check_cutoff`].
pub fn auto_cutoff(params: &ModelParams, parameter: SweepParameter, values: &[f64], step: usize, max: usize, tol: f64) -> Result<usize> {
    let mut d = params.cutoff;
    loop {
        match check_cutoff(&params.with_cutoff(d), parameter, values, step, tol) {
            Ok(()) => return Ok(d),
            Err(e @ Error::CutoffNotConverged { .. }) if d + step > max => return Err(e),
            Err(Error::CutoffNotConverged { .. }) => d += step,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_parsing() {
        assert_eq!("half-kappa".parse::<Threshold>().unwrap(), Threshold::HalfKappa);
        assert_eq!("dwell:10".parse::<Threshold>().unwrap(), Threshold::InverseDwell(10.0));
        assert!((Threshold::InverseDwell(10.0).rate(1.0) - 0.1).abs() < 1e-15);
        assert!("dwell:-1".parse::<Threshold>().is_err());
        assert!("sideways".parse::<Threshold>().is_err());
    }

    #[test]
    fn small_cutoff_region_is_bracketed() {
        // d = 20 only resolves the right part of the region; widths here are
        // not physical, only the edge logic is exercised.
        let p = ModelParams::reference(-5.0, 20);
        let opts = ScanOptions {
            tol: 1e-4,
            ..ScanOptions::new(-7.0, -2.0, 0.5)
        };
        let r = critical_region(&p, SweepParameter::Detuning, Threshold::Rate(0.05), &opts).unwrap();
        assert!(r.lower < -5.0 && r.upper > -5.0);
        let family = AffineLiouvillian::new(&p, SweepParameter::Detuning).unwrap();
        let mut cache = ShiftInvert::new();
        for edge in [r.lower, r.upper] {
            let inside = if edge == r.lower { edge + 2e-3 } else { edge - 2e-3 };
            let outside = if edge == r.lower { edge - 2e-3 } else { edge + 2e-3 };
            assert!(soft_rate(&family.at(inside), &opts.soft, &mut cache).unwrap() < 0.05);
            assert!(soft_rate(&family.at(outside), &opts.soft, &mut cache).unwrap() > 0.05);
        }
    }

    #[test]
    fn no_region_below_threshold() {
        let p = ModelParams::reference(-1.0, 10);
        let opts = ScanOptions::new(-2.0, 0.0, 0.5);
        assert!(critical_region(&p, SweepParameter::Detuning, Threshold::Rate(1e-6), &opts).is_err());
    }

    #[test]
    fn cutoff_check_flags_small_cutoff() {
        let p = ModelParams::reference(-4.0, 6);
        assert!(matches!(
            check_cutoff(&p, SweepParameter::Detuning, &[-4.0], 10, 1e-3),
            Err(Error::CutoffNotConverged { .. })
        ));
        let p = ModelParams::new(-1.0, -0.5, 0.3, 8);
        check_cutoff(&p, SweepParameter::Detuning, &[-1.0, 0.0], 4, 1e-3).unwrap();
    }
}
