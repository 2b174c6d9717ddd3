//! Semiclassical steady states: x = |β|² solves
//!   x (x − δ/U)² + x (κ/2U)² = F²/U²,
//! a cubic with up to three nonnegative roots (optical bistability).

use crate::error::Result;
use crate::io::{Cell, Table};
use crate::model::{ModelParams, SweepParameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    pub fn label(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldBranches {
    pub value: f64,
    /// Ascending.
    pub roots: Vec<f64>,
    pub stability: Vec<Stability>,
}

/// c₂, c₁, c₀ of the monic cubic x³ + c₂x² + c₁x + c₀.
fn coefficients(p: &ModelParams) -> (f64, f64, f64) {
    let a = p.detuning / p.interaction;
    let b = p.kappa / (2.0 * p.interaction);
    let c = (p.drive / p.interaction).powi(2);
    (-2.0 * a, a * a + b * b, -c)
}

/// Left-hand side minus right-hand side of the steady-state equation.
pub fn residual(p: &ModelParams, x: f64) -> f64 {
    if p.interaction == 0.0 {
        return x * (p.detuning.powi(2) + 0.25 * p.kappa.powi(2)) - p.drive.powi(2);
    }
    let (c2, c1, c0) = coefficients(p);
    ((x + c2) * x + c1) * x + c0
}

/// Real roots of x³ + c₂x² + c₁x + c₀, ascending, Newton-polished.
fn cubic_roots(c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = 2.0 * c2.powi(3) / 27.0 - c2 * c1 / 3.0 + c0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let scale = 1.0 + c2.abs().powi(3) + c1.abs().powf(1.5) + c0.abs();
    let mut t: Vec<f64> = if disc > 1e-14 * scale * scale {
        let s = disc.sqrt();
        vec![(-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt()]
    } else if p.abs() < 1e-300 {
        vec![0.0]
    } else {
        // Three real roots (two may coincide): trigonometric form.
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos())
            .collect()
    };
    for r in t.iter_mut() {
        let mut x = *r - shift;
        for _ in 0..3 {
            let f = ((x + c2) * x + c1) * x + c0;
            let df = (3.0 * x + 2.0 * c2) * x + c1;
            if df.abs() > 1e-300 {
                x -= f / df;
            }
        }
        *r = x;
    }
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
    t
}

pub fn meanfield_roots(params: &ModelParams) -> Result<MeanFieldBranches> {
    let p = params.validate()?;
    let roots = if p.interaction == 0.0 {
        vec![p.drive.powi(2) / (p.detuning.powi(2) + 0.25 * p.kappa.powi(2))]
    } else if p.drive == 0.0 {
        vec![0.0]
    } else {
        let (c2, c1, c0) = coefficients(&p);
        cubic_roots(c2, c1, c0).into_iter().filter(|&x| x >= 0.0).collect()
    };
    let stability = if roots.len() == 3 {
        vec![Stability::Stable, Stability::Unstable, Stability::Stable]
    } else {
        vec![Stability::Stable; roots.len()]
    };
    Ok(MeanFieldBranches {
        value: p.detuning,
        roots,
        stability,
    })
}

fn root_count(params: &ModelParams, parameter: SweepParameter, r: f64) -> Result<usize> {
    Ok(meanfield_roots(&params.with(parameter, r))?.roots.len())
}

/// First interval of `parameter` in [lo, hi] with three roots, edges refined
/// by bisection to 1e−6.
pub fn bistable_window(params: &ModelParams, parameter: SweepParameter, lo: f64, hi: f64, step: f64) -> Result<Option<(f64, f64)>> {
    let count = ((hi - lo) / step).ceil() as usize + 1;
    let values: Vec<f64> = (0..count).map(|i| (lo + i as f64 * step).min(hi)).collect();
    let counts: Vec<usize> = values
        .iter()
        .map(|&r| root_count(params, parameter, r))
        .collect::<Result<_>>()?;
    let Some(first) = counts.iter().position(|&c| c == 3) else {
        return Ok(None);
    };
    let last = first + counts[first..].iter().take_while(|&&c| c == 3).count() - 1;
    let bisect = |mut inside: f64, mut outside: f64| -> Result<f64> {
        while (outside - inside).abs() > 1e-6 {
            let mid = 0.5 * (inside + outside);
            if root_count(params, parameter, mid)? == 3 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        Ok(0.5 * (inside + outside))
    };
    let a = if first == 0 { values[0] } else { bisect(values[first], values[first - 1])? };
    let b = if last + 1 == count { values[count - 1] } else { bisect(values[last], values[last + 1])? };
    Ok(Some((a, b)))
}

/// Columns (r, x1, x2, x3, labels); missing roots are NaN.
pub fn branches_table(parameter: SweepParameter, rows: &[MeanFieldBranches]) -> Table {
    let mut t = Table::new(&[parameter.name(), "x1", "x2", "x3", "labels"]);
    for b in rows {
        let x = |i: usize| b.roots.get(i).copied().unwrap_or(f64::NAN);
        let labels: Vec<&str> = b.stability.iter().map(|s| s.label()).collect();
        t.push(vec![b.value.into(), x(0).into(), x(1).into(), x(2).into(), Cell::from(labels.join("|"))]);
    }
    t
}

/// Roots along a parameter scan.
pub fn scan(params: &ModelParams, parameter: SweepParameter, values: &[f64]) -> Result<Vec<MeanFieldBranches>> {
    values
        .iter()
        .map(|&r| {
            let mut b = meanfield_roots(&params.with(parameter, r))?;
            b.value = r;
            Ok(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn undriven_and_linear_cavity() {
        let b = meanfield_roots(&ModelParams::new(-3.0, -0.5, 0.0, 10)).unwrap();
        assert_eq!(b.roots, vec![0.0]);
        let b = meanfield_roots(&ModelParams::new(0.0, 0.0, 4.0, 10)).unwrap();
        assert_eq!(b.roots.len(), 1);
        assert!((b.roots[0] - 64.0).abs() < 1e-12);
    }

    #[test]
    fn reference_point_is_bistable() {
        let p = ModelParams::reference(-10.0, 10);
        let b = meanfield_roots(&p).unwrap();
        assert_eq!(b.roots.len(), 3);
        assert_eq!(b.stability[1], Stability::Unstable);
        for &x in &b.roots {
            assert!(residual(&p, x).abs() < 1e-10 * 64.0);
        }
    }

    #[test]
    fn weak_drive_has_no_window() {
        let p = ModelParams::new(-2.0, -0.5, 0.1, 10);
        assert_eq!(bistable_window(&p, SweepParameter::Detuning, -3.0, 0.0, 0.01).unwrap(), None);
    }

    #[test]
    fn window_edges_are_refined() {
        let p = ModelParams::reference(-10.0, 10);
        let (a, b) = bistable_window(&p, SweepParameter::Detuning, -40.0, 0.0, 0.25).unwrap().unwrap();
        assert!(a < -10.0 && b > -10.0);
        assert_eq!(root_count(&p, SweepParameter::Detuning, a + 1e-5).unwrap(), 3);
        assert_eq!(root_count(&p, SweepParameter::Detuning, b - 1e-5).unwrap(), 3);
        assert!(root_count(&p, SweepParameter::Detuning, b + 1e-5).unwrap() < 3);
    }

    proptest! {
        #[test]
        fn roots_satisfy_the_cubic(delta in -30.0f64..5.0, u in -2.0f64..-0.05, f in 0.0f64..8.0) {
            let p = ModelParams::new(delta, u, f, 10);
            let b = meanfield_roots(&p).unwrap();
            prop_assert!(!b.roots.is_empty() && b.roots.len() <= 3);
            prop_assert!(b.roots.windows(2).all(|w| w[0] < w[1]));
            let tol = 1e-10 * (f * f / (u * u)).max(1.0);
            for &x in &b.roots {
                prop_assert!(x >= 0.0);
                prop_assert!(residual(&p, x).abs() < tol, "residual {} at x = {}", residual(&p, x), x);
            }
        }
    }
}
