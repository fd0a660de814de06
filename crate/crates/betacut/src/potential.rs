//! N-dependent polynomial potentials `V = sum_k N^{-k} V^{k}` and the edge
//! configuration of the working interval.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Real polynomial, coefficients in ascending degree order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn zero() -> Self {
        Poly(vec![])
    }

    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    pub fn degree(&self) -> usize {
        self.0
            .iter()
            .rposition(|&c| c != 0.0)
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    /// Horner evaluation at a complex point.
    pub fn eval(&self, x: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.0.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn eval_real(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.0.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn derivative(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly::zero();
        }
        Poly(
            self.0[1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| c * (i + 1) as f64)
                .collect(),
        )
    }

    /// Antiderivative with zero constant term.
    pub fn antiderivative(&self) -> Poly {
        let mut out = vec![0.0];
        out.extend(
            self.0
                .iter()
                .enumerate()
                .map(|(i, &c)| c / (i + 1) as f64),
        );
        Poly(out)
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.0.len().max(other.0.len());
        let mut out = vec![0.0; n];
        for (i, &c) in self.0.iter().enumerate() {
            out[i] += c;
        }
        for (i, &c) in other.0.iter().enumerate() {
            out[i] += c;
        }
        Poly(out)
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    /// Composition with the affine map `x -> lambda x + mu`.
    pub fn compose_affine(&self, lambda: f64, mu: f64) -> Poly {
        // Horner in (lambda x + mu): acc <- acc * (lambda x + mu) + c.
        let mut acc = Poly::zero();
        for &c in self.0.iter().rev() {
            let shifted = acc.scale(mu).add(&Poly::constant(c));
            let mut lifted = vec![0.0];
            lifted.extend(acc.scale(lambda).0);
            acc = Poly(lifted).add(&shifted);
        }
        acc
    }
}

/// Interval endpoint that may be infinite in the declaration; all numerics use
/// a finite working interval chosen later.
pub type Endpoint = f64; // +-inf encoded as f64 infinities

/// Per-1/N-order analytic potential on an interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialSpec {
    /// `orders[k]` holds the coefficients of `V^{k}`.
    pub orders: Vec<Poly>,
    /// Declared interval `[b_minus, b_plus]`; entries may be infinite.
    pub interval: (Endpoint, Endpoint),
    pub label: String,
}

impl PotentialSpec {
    pub fn new(orders: Vec<Vec<f64>>, interval: (f64, f64), label: &str) -> Self {
        PotentialSpec {
            orders: orders.into_iter().map(Poly).collect(),
            interval,
            label: label.to_string(),
        }
    }

    /// Single-order potential (independent of N).
    pub fn simple(coeffs: Vec<f64>, interval: (f64, f64), label: &str) -> Self {
        Self::new(vec![coeffs], interval, label)
    }

    pub fn order(&self, k: usize) -> Result<&Poly> {
        self.orders.get(k).ok_or(Error::OrderAbsent(k))
    }

    /// Value of `V^{k}(x)`.
    pub fn eval(&self, k: usize, x: Complex64) -> Result<Complex64> {
        Ok(self.order(k)?.eval(x))
    }

    /// Coefficient list of `(V^{k})'`.
    pub fn derivative(&self, k: usize) -> Result<Poly> {
        Ok(self.order(k)?.derivative())
    }

    /// `sum_k N^{-k} V^{k}` collapsed to a single polynomial (the finite-N
    /// potential used by the Monte Carlo sampler).
    pub fn resum(&self, n: u64) -> Poly {
        assert!(n >= 1, "resum needs N >= 1");
        let mut acc = Poly::zero();
        let mut w = 1.0;
        for p in &self.orders {
            acc = acc.add(&p.scale(w));
            w /= n as f64;
        }
        acc
    }

    /// Decidable confinement proxy for polynomial inputs on an infinite
    /// interval: even degree >= 2 with positive leading coefficient.
    pub fn is_confining(&self) -> bool {
        if self.interval.0.is_finite() && self.interval.1.is_finite() {
            return true;
        }
        let v0 = match self.orders.first() {
            Some(p) => p,
            None => return false,
        };
        let d = v0.degree();
        d >= 2 && d % 2 == 0 && v0.0[d] > 0.0
    }
}

/// Gaussian potential whose equilibrium measure is the semicircle on
/// `[alpha_minus, alpha_plus]`:
/// `V(x) = 8/(alpha_plus - alpha_minus)^2 (x - (alpha_minus+alpha_plus)/2)^2`.
pub fn gaussian_reference(alpha_minus: f64, alpha_plus: f64) -> Result<PotentialSpec> {
    if !(alpha_minus < alpha_plus) {
        return Err(Error::DegenerateInterval);
    }
    let c = 0.5 * (alpha_minus + alpha_plus);
    let a = 8.0 / ((alpha_plus - alpha_minus) * (alpha_plus - alpha_minus));
    // a (x - c)^2 = a c^2 - 2 a c x + a x^2
    Ok(PotentialSpec::simple(
        vec![a * c * c, -2.0 * a * c, a],
        (f64::NEG_INFINITY, f64::INFINITY),
        "gaussian-reference",
    ))
}

/// Orderwise affine combination `(1-s) v0 + s v1` of two potentials on the
/// same interval.
pub fn interpolate(v0: &PotentialSpec, v1: &PotentialSpec, s: f64) -> Result<PotentialSpec> {
    let same = |a: f64, b: f64| a == b || (a.is_infinite() && b.is_infinite() && a.signum() == b.signum());
    if !same(v0.interval.0, v1.interval.0) || !same(v0.interval.1, v1.interval.1) {
        return Err(Error::MismatchedIntervals);
    }
    let n = v0.orders.len().max(v1.orders.len());
    let mut orders = Vec::with_capacity(n);
    for k in 0..n {
        let zero = Poly::zero();
        let a = v0.orders.get(k).unwrap_or(&zero);
        let b = v1.orders.get(k).unwrap_or(&zero);
        orders.push(a.scale(1.0 - s).add(&b.scale(s)));
    }
    Ok(PotentialSpec {
        orders,
        interval: v0.interval,
        label: format!("interp({},{};{})", v0.label, v1.label, s),
    })
}

/// Soft/hard nature of a working-interval endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeNature {
    Soft,
    Hard,
}

/// Finite working interval with declared edge natures. A hard edge pins the
/// support endpoint to the interval endpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub a_minus: f64,
    pub a_plus: f64,
    pub nature_minus: EdgeNature,
    pub nature_plus: EdgeNature,
}

impl EdgeConfig {
    pub fn new(a_minus: f64, a_plus: f64, nature_minus: EdgeNature, nature_plus: EdgeNature) -> Result<Self> {
        if !(a_minus < a_plus) || !a_minus.is_finite() || !a_plus.is_finite() {
            return Err(Error::DegenerateInterval);
        }
        Ok(EdgeConfig {
            a_minus,
            a_plus,
            nature_minus,
            nature_plus,
        })
    }

    pub fn soft_soft(a_minus: f64, a_plus: f64) -> Self {
        Self::new(a_minus, a_plus, EdgeNature::Soft, EdgeNature::Soft).unwrap()
    }

    pub fn hard_hard(a_minus: f64, a_plus: f64) -> Self {
        Self::new(a_minus, a_plus, EdgeNature::Hard, EdgeNature::Hard).unwrap()
    }

    pub fn hard_count(&self) -> usize {
        [self.nature_minus, self.nature_plus]
            .iter()
            .filter(|&&n| n == EdgeNature::Hard)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn eval_direct_arithmetic() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "g");
        assert_eq!(v.eval(0, c(2.0)).unwrap(), c(2.0));
        let q = PotentialSpec::simple(vec![0.0, 0.0, 0.5, 0.0, 0.1], (-3.0, 3.0), "q");
        assert!((q.eval(0, c(1.0)).unwrap() - c(0.6)).norm() < 1e-15);
    }

    #[test]
    fn eval_missing_order_is_error() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "g");
        assert!(matches!(v.eval(1, c(0.0)), Err(Error::OrderAbsent(1))));
    }

    #[test]
    fn derivative_cases() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "g");
        assert_eq!(v.derivative(0).unwrap().0, vec![0.0, 1.0]);
        let cst = PotentialSpec::simple(vec![7.0], (-1.0, 1.0), "c");
        assert!(cst.derivative(0).unwrap().is_zero());
        let x4 = PotentialSpec::simple(vec![0.0, 0.0, 0.0, 0.0, 1.0], (-1.0, 1.0), "x4");
        assert_eq!(x4.derivative(0).unwrap().0, vec![0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn resum_collapses_orders() {
        let v = PotentialSpec::new(
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0]],
            (-3.0, 3.0),
            "v",
        );
        let r = v.resum(10);
        assert!((r.eval_real(1.0) - 1.1).abs() < 1e-15);
        // single-order spec is N-independent
        let g = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "g");
        assert_eq!(g.resum(7).0, g.orders[0].0);
        // coefficientwise N -> infinity limit at rate 1/N
        let d10: f64 = r.0[1] - 0.0;
        let d20 = v.resum(20).0[1];
        assert!((d10 / d20 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_reference_formula() {
        let g = gaussian_reference(-2.0, 2.0).unwrap();
        assert!((g.eval(0, c(2.0)).unwrap() - c(2.0)).norm() < 1e-14); // x^2/2 at 2
        let g2 = gaussian_reference(0.0, 4.0).unwrap();
        // (1/2)(x-2)^2 at x = 3 -> 1/2
        assert!((g2.eval(0, c(3.0)).unwrap() - c(0.5)).norm() < 1e-14);
        let g3 = gaussian_reference(-1.0, 1.0).unwrap();
        // 2 x^2 at x = 1 -> 2
        assert!((g3.eval(0, c(1.0)).unwrap() - c(2.0)).norm() < 1e-14);
        assert!(gaussian_reference(1.0, 1.0).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_linearity() {
        let v0 = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "a");
        let v1 = PotentialSpec::simple(vec![1.0, 0.0, 0.0, 0.0, 0.1], (-3.0, 3.0), "b");
        assert_eq!(interpolate(&v0, &v1, 0.0).unwrap().orders[0].0[2], 0.5);
        assert_eq!(interpolate(&v0, &v1, 1.0).unwrap().orders[0].0[0], 1.0);
        let mid = interpolate(&v0, &v1, 0.5).unwrap();
        for x in [-1.3, 0.2, 2.4] {
            let lhs = mid.eval(0, c(x)).unwrap();
            let rhs = 0.5 * v0.eval(0, c(x)).unwrap() + 0.5 * v1.eval(0, c(x)).unwrap();
            assert!((lhs - rhs).norm() < 1e-14);
        }
        let other = PotentialSpec::simple(vec![0.0], (-1.0, 1.0), "c");
        assert!(interpolate(&v0, &other, 0.5).is_err());
    }

    #[test]
    fn derivative_antiderivative_roundtrip() {
        let p = Poly(vec![3.0, -1.5, 0.25, 7.0]);
        let q = p.antiderivative().derivative();
        for (a, b) in p.0.iter().zip(q.0.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn confinement_proxy() {
        let g = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (f64::NEG_INFINITY, f64::INFINITY), "g");
        assert!(g.is_confining());
        let lin = PotentialSpec::simple(vec![0.0, 1.0], (f64::NEG_INFINITY, f64::INFINITY), "x");
        assert!(!lin.is_confining());
        let wrong = PotentialSpec::simple(vec![0.0, 0.0, -1.0], (f64::NEG_INFINITY, f64::INFINITY), "w");
        assert!(!wrong.is_confining());
        let finite = PotentialSpec::simple(vec![0.0, 1.0], (0.0, 6.0), "mp");
        assert!(finite.is_confining());
    }

    #[test]
    fn compose_affine_matches_pointwise() {
        let p = Poly(vec![1.0, 2.0, -0.5, 0.3]);
        let q = p.compose_affine(1.7, -0.4);
        for x in [-2.0, 0.3, 1.9] {
            assert!((q.eval_real(x) - p.eval_real(1.7 * x - 0.4)).abs() < 1e-12);
        }
    }
}
