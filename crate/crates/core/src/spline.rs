//! Natural cubic splines with exact derivative and antiderivative.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
    /// ∫_{x_0}^{x_i} s, at the knots.
    cumulative: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: y.len(),
            });
        }
        if n < 2 {
            return Err(Error::InvalidParams("spline needs at least two knots".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm for the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[j] = 2.0 * (h0 + h1);
                sub[j] = h0;
                rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for j in 1..k {
                let sup = x[j + 1] - x[j];
                let w = sub[j] / diag[j - 1];
                diag[j] -= w * sup;
                rhs[j] -= w * rhs[j - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                let sup = x[j + 2] - x[j + 1];
                m[j + 1] = (rhs[j] - sup * m[j + 2]) / diag[j];
            }
        }
        let mut cumulative = vec![0.0; n];
        for i in 0..n - 1 {
            let h = x[i + 1] - x[i];
            let seg = h * (y[i] + y[i + 1]) / 2.0 - h.powi(3) * (m[i] + m[i + 1]) / 24.0;
            cumulative[i + 1] = cumulative[i] + seg;
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
            cumulative,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xi| xi <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    /// Value; outside the knots the end cubics are continued.
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i] + b * self.y[i + 1] + ((a.powi(3) - a) * self.m[i] + (b.powi(3) - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        (self.y[i + 1] - self.y[i]) / h + ((1.0 - 3.0 * a * a) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1]) * h / 6.0
    }

    /// ∫_{x_0}^{t} s
    pub fn antiderivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let b = (t - self.x[i]) / h;
        // ∫_0^b of the segment polynomial in the local variable, times h.
        let a_int = b - b * b / 2.0;
        let b_int = b * b / 2.0;
        let m0_int = (-(1.0 - b).powi(4) / 4.0 + (1.0 - b).powi(2) / 2.0) - 0.25;
        let m1_int = b.powi(4) / 4.0 - b * b / 2.0;
        self.cumulative[i] + h * (a_int * self.y[i] + b_int * self.y[i + 1]) + h.powi(3) / 6.0 * (m0_int * self.m[i] + m1_int * self.m[i + 1])
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.antiderivative(b) - self.antiderivative(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_data_is_reproduced_exactly() {
        let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|t| 2.0 * t - 1.0).collect();
        let s = CubicSpline::new(&x, &y).unwrap();
        for t in [0.1, 1.3, 2.9] {
            assert!((s.eval(t) - (2.0 * t - 1.0)).abs() < 1e-14);
            assert!((s.derivative(t) - 2.0).abs() < 1e-13);
            assert!((s.antiderivative(t) - (t * t - t)).abs() < 1e-13);
        }
    }

    #[test]
    fn smooth_function_converges() {
        let err = |n: usize| {
            let x: Vec<f64> = (0..n).map(|i| i as f64 * 3.0 / (n - 1) as f64).collect();
            let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
            let s = CubicSpline::new(&x, &y).unwrap();
            let pts = [0.7, 1.4, 2.2];
            let e_val = pts.iter().map(|&t| (s.eval(t) - f64::sin(t)).abs()).fold(0.0, f64::max);
            let e_int = (s.integral(0.7, 2.2) - (0.7f64.cos() - 2.2f64.cos())).abs();
            (e_val, e_int)
        };
        let (v1, i1) = err(41);
        let (v2, i2) = err(81);
        assert!(v1 < 1e-5 && i1 < 1e-6);
        assert!(v2 < v1 / 8.0, "{v1} {v2}");
        assert!(i2 < i1);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CubicSpline::new(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(CubicSpline::new(&[0.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn interpolates_knots_and_integral_is_additive(ys in proptest::collection::vec(-5.0f64..5.0, 3..20)) {
            let x: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 0.3 + (i as f64).sqrt() * 0.01).collect();
            let s = CubicSpline::new(&x, &ys).unwrap();
            for (xi, yi) in x.iter().zip(&ys) {
                prop_assert!((s.eval(*xi) - yi).abs() < 1e-12);
            }
            let (a, b, c) = (x[0], x[ys.len() / 2], x[ys.len() - 1]);
            prop_assert!((s.integral(a, b) + s.integral(b, c) - s.integral(a, c)).abs() < 1e-11);
        }
    }
}
