//! Holomorphic functions off the cut through the Joukowski change of variable.
//!
//! `x = c + gamma (z + 1/z)` maps `{|z| > 1}` bijectively onto the complement
//! of `[alpha_minus, alpha_plus]`. Members of `H^(1)` (holomorphic off the
//! cut, `O(1/x)` at infinity) become power series in `1/z`, and
//! `sigma_tilde(x) = sqrt((x - alpha_minus)(x - alpha_plus))` becomes the
//! rational function `gamma (z - 1/z)`.

use num_complex::Complex64;

use crate::{Error, Result};

pub const TAIL_TOL: f64 = 1e-12;

/// Joukowski frame of a cut `[alpha_minus, alpha_plus]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoukowskiFrame {
    /// `(alpha_minus + alpha_plus) / 2`
    pub center: f64,
    /// `(alpha_plus - alpha_minus) / 4`
    pub quarter_width: f64,
}

impl JoukowskiFrame {
    pub fn from_support(alpha_minus: f64, alpha_plus: f64) -> Result<Self> {
        if !(alpha_minus < alpha_plus) {
            return Err(Error::DegenerateInterval);
        }
        Ok(JoukowskiFrame {
            center: 0.5 * (alpha_minus + alpha_plus),
            quarter_width: 0.25 * (alpha_plus - alpha_minus),
        })
    }

    pub fn alpha_minus(&self) -> f64 {
        self.center - 2.0 * self.quarter_width
    }

    pub fn alpha_plus(&self) -> f64 {
        self.center + 2.0 * self.quarter_width
    }

    pub fn x_of_z(&self, z: Complex64) -> Complex64 {
        self.center + self.quarter_width * (z + 1.0 / z)
    }

    /// Branch of the inverse map with `|z| > 1`, `z ~ (x - c)/gamma` at
    /// infinity. Errors when `x` sits on the cut.
    pub fn inverse_map(&self, x: Complex64) -> Result<Complex64> {
        let u = (x - self.center) / self.quarter_width; // z + 1/z
        let disc = (u * u - 4.0).sqrt();
        let z1 = 0.5 * (u + disc);
        let z2 = 0.5 * (u - disc);
        let z = if z1.norm() >= z2.norm() { z1 } else { z2 };
        if z.norm() <= 1.0 + 1e-12 {
            return Err(Error::CutEvaluation);
        }
        Ok(z)
    }

    /// `sigma_tilde(x) = gamma (z - 1/z)`, branch with `sigma_tilde ~ x` at
    /// `+infinity` (negative on the real axis left of the cut).
    pub fn sigma_tilde(&self, x: Complex64) -> Result<Complex64> {
        let z = self.inverse_map(x)?;
        Ok(self.sigma_tilde_z(z))
    }

    pub fn sigma_tilde_z(&self, z: Complex64) -> Complex64 {
        self.quarter_width * (z - 1.0 / z)
    }

    /// `dx/dz = gamma (1 - 1/z^2)`.
    pub fn dx_dz(&self, z: Complex64) -> Complex64 {
        self.quarter_width * (1.0 - 1.0 / (z * z))
    }
}

/// Equispaced nodes on the circle `|z| = rho`.
pub fn circle_nodes(rho: f64, m: usize) -> Vec<Complex64> {
    (0..m)
        .map(|s| {
            let th = 2.0 * std::f64::consts::PI * s as f64 / m as f64;
            Complex64::from_polar(rho, th)
        })
        .collect()
}

/// Element of `H^(1)`: `f(x(z)) = sum_{j>=1} coeffs[j-1] z^{-j}`.
#[derive(Debug, Clone)]
pub struct SeriesFn {
    pub frame: JoukowskiFrame,
    pub coeffs: Vec<Complex64>,
}

impl SeriesFn {
    pub fn zero(frame: JoukowskiFrame, m: usize) -> Self {
        SeriesFn {
            frame,
            coeffs: vec![Complex64::new(0.0, 0.0); m],
        }
    }

    pub fn from_coeffs(frame: JoukowskiFrame, coeffs: Vec<Complex64>) -> Self {
        SeriesFn { frame, coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Evaluate at a point of the z-plane with `|z| > 1`.
    pub fn eval_z(&self, z: Complex64) -> Complex64 {
        let w = 1.0 / z;
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = (acc + c) * w;
        }
        acc
    }

    /// Evaluate at `x` off the cut.
    pub fn eval(&self, x: Complex64) -> Result<Complex64> {
        Ok(self.eval_z(self.frame.inverse_map(x)?))
    }

    /// Coefficient of `1/x` at infinity, `lim x f(x) = gamma c_1`.
    pub fn one_over_x_coeff(&self) -> Complex64 {
        self.coeffs
            .first()
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
            * self.frame.quarter_width
    }

    /// Scaled tail `max_j_in_last_quartile |c_j rho^-j| / max_j |c_j rho^-j|`
    /// at the reference radius. Finite-size hard-edge series have slowly
    /// decaying raw coefficients, so the tail is always measured in the
    /// rho-weighted norm.
    pub fn scaled_tail(&self, rho: f64) -> f64 {
        if self.coeffs.is_empty() {
            return 0.0;
        }
        let scaled: Vec<f64> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c.norm() * rho.powi(-(i as i32 + 1)))
            .collect();
        let mx = scaled.iter().cloned().fold(0.0f64, f64::max);
        if mx == 0.0 {
            return 0.0;
        }
        let q = scaled.len() - scaled.len() / 4;
        scaled[q..].iter().cloned().fold(0.0f64, f64::max) / mx
    }

    /// Termwise d/dx via the chain rule `dz/dx = 1/(gamma (1 - z^-2))`.
    ///
    /// d/dx turns soft-edge square roots into inverse square roots, so the
    /// result has slowly decaying raw coefficients; the output is extended
    /// until the rho-weighted tail at `rho_ref` is resolved, and accuracy
    /// loss is flagged when it is not.
    pub fn derivative(&self, rho_ref: f64) -> Result<SeriesFn> {
        let m = self.coeffs.len();
        let m_out = m.max((40.0 / rho_ref.ln()).ceil() as usize);
        let g = self.frame.quarter_width;
        // numerator d/dz: -j c_j z^{-j-1}
        let mut num = vec![Complex64::new(0.0, 0.0); m_out + 2];
        for (i, &c) in self.coeffs.iter().enumerate() {
            let j = (i + 1) as f64;
            num[i + 2] = -j * c;
        }
        // multiply by (1/gamma) sum_{p>=0} z^{-2p}
        let mut out = vec![Complex64::new(0.0, 0.0); m_out];
        for j in 1..=m_out {
            let prev = if j >= 3 {
                out[j - 3]
            } else {
                Complex64::new(0.0, 0.0)
            };
            out[j - 1] = prev + num[j] / g;
        }
        let d = SeriesFn::from_coeffs(self.frame, out);
        let tail = d.scaled_tail(rho_ref);
        if tail > 1e-6 {
            return Err(Error::AccuracyLoss(tail));
        }
        Ok(d)
    }
}

/// Negative-power Fourier extraction from samples on `|z| = rho`.
///
/// Rejects input with significant non-negative-power content (not in
/// `H^(1)`). Returns the first `m_keep` coefficients `c_j` of `z^{-j}`.
pub fn series_from_samples(
    samples: &[Complex64],
    frame: JoukowskiFrame,
    rho: f64,
    m_keep: usize,
    h1_tol: f64,
) -> Result<SeriesFn> {
    let m = samples.len();
    assert!(m_keep <= m / 2, "need at least 2 samples per kept mode");
    let mut neg = vec![Complex64::new(0.0, 0.0); m_keep];
    let mut pos_energy = 0.0f64;
    let mut neg_energy = 0.0f64;
    for j in 0..=m / 2 {
        let mut acc_pos = Complex64::new(0.0, 0.0); // e^{-i j theta} component = z^{+j} content
        let mut acc_neg = Complex64::new(0.0, 0.0); // e^{+i j theta} component = z^{-j} content
        for (s, &f) in samples.iter().enumerate() {
            let th = 2.0 * std::f64::consts::PI * (j * s % m) as f64 / m as f64;
            let e = Complex64::from_polar(1.0, th);
            acc_pos += f * e.conj();
            acc_neg += f * e;
        }
        acc_pos /= m as f64;
        acc_neg /= m as f64;
        if j == 0 {
            pos_energy += acc_pos.norm_sqr();
        } else {
            pos_energy += acc_pos.norm_sqr();
            neg_energy += acc_neg.norm_sqr();
            if j <= m_keep {
                neg[j - 1] = acc_neg * rho.powi(j as i32);
            }
        }
    }
    let scale = neg_energy.max(pos_energy).max(1e-300);
    if pos_energy / scale > h1_tol * h1_tol && pos_energy > 1e-28 {
        return Err(Error::NotInH1((pos_energy / scale).sqrt()));
    }
    Ok(SeriesFn::from_coeffs(frame, neg))
}

/// Adaptive encoding of an analytic function given on the z-plane: doubles the
/// mode count from 32 until the rho-weighted tail falls below `TAIL_TOL`.
pub fn series_from_fn_z(
    f: &dyn Fn(Complex64) -> Complex64,
    frame: JoukowskiFrame,
    rho: f64,
    h1_tol: f64,
) -> Result<SeriesFn> {
    let mut m_keep = 32usize;
    loop {
        let nodes = circle_nodes(rho, 4 * m_keep);
        let samples: Vec<Complex64> = nodes.iter().map(|&z| f(z)).collect();
        let s = series_from_samples(&samples, frame, rho, m_keep, h1_tol)?;
        if s.scaled_tail(rho) <= TAIL_TOL || m_keep >= 1024 {
            return Ok(s);
        }
        m_keep *= 2;
    }
}

/// `(1/2 pi i) \oint f(x) dx` over the image of `|z| = rho`, trapezoidal rule.
pub fn contour_integral(
    f: &dyn Fn(Complex64) -> Complex64,
    frame: JoukowskiFrame,
    rho: f64,
    m: usize,
) -> Result<Complex64> {
    let mut acc = Complex64::new(0.0, 0.0);
    for z in circle_nodes(rho, m) {
        let x = frame.x_of_z(z);
        let v = f(x) * frame.dx_dz(z) * z;
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::QuadratureFailure(format!(
                "NaN on contour at z = {z}"
            )));
        }
        acc += v;
    }
    Ok(acc / m as f64)
}

/// Nested contour radii `rho_l = rho0 ratio^l` plus the outer radius for
/// `Gamma_E`; images under a frame are the paper's Jordan curves.
#[derive(Debug, Clone)]
pub struct ContourFamily {
    pub rho0: f64,
    pub ratio: f64,
    pub levels: usize,
    pub node_count: usize,
    pub rho_e: f64,
}

impl Default for ContourFamily {
    fn default() -> Self {
        ContourFamily {
            rho0: 1.25,
            ratio: 1.15,
            levels: 8,
            node_count: 256,
            rho_e: 4.0,
        }
    }
}

impl ContourFamily {
    pub fn radius(&self, l: usize) -> f64 {
        assert!(l < self.levels, "contour index out of range");
        self.rho0 * self.ratio.powi(l as i32)
    }

    pub fn nodes(&self, frame: JoukowskiFrame, l: usize) -> Vec<Complex64> {
        circle_nodes(self.radius(l), self.node_count)
            .into_iter()
            .map(|z| frame.x_of_z(z))
            .collect()
    }

    pub fn nodes_e(&self, frame: JoukowskiFrame) -> Vec<Complex64> {
        circle_nodes(self.rho_e, self.node_count)
            .into_iter()
            .map(|z| frame.x_of_z(z))
            .collect()
    }

    /// `zeta_l = len(Gamma_l) / (2 pi d^2(Gamma_l, Gamma_{l+1}))`, from the
    /// node polygons. Diagnostic only.
    pub fn zeta(&self, frame: JoukowskiFrame, l: usize) -> f64 {
        let a = self.nodes(frame, l);
        let b = self.nodes(frame, l + 1);
        let mut perim = 0.0;
        for i in 0..a.len() {
            perim += (a[(i + 1) % a.len()] - a[i]).norm();
        }
        let mut d = f64::INFINITY;
        for &p in &a {
            for &q in &b {
                d = d.min((p - q).norm());
            }
        }
        perim / (2.0 * std::f64::consts::PI * d * d)
    }
}

/// Max modulus of a series over the nodes of contour `l`.
pub fn sup_norm(f: &SeriesFn, contours: &ContourFamily, l: usize) -> f64 {
    circle_nodes(contours.radius(l), contours.node_count)
        .into_iter()
        .map(|z| f.eval_z(z).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn frame_basics() {
        let f = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        assert_eq!(f.center, 0.0);
        assert_eq!(f.quarter_width, 1.0);
        assert!((f.x_of_z(c(1.0, 0.0)) - c(2.0, 0.0)).norm() < 1e-15);
        assert!((f.x_of_z(c(-1.0, 0.0)) - c(-2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn inverse_map_arithmetic_and_roundtrip() {
        let f = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        // frame (0,1): x = 2.5 -> z = 2
        let z = f.inverse_map(c(2.5, 0.0)).unwrap();
        assert!((z - c(2.0, 0.0)).norm() < 1e-12);
        let mut rng = 1234u64;
        for _ in 0..200 {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = ((rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 8.0;
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = ((rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 8.0;
            let x = c(a, if b.abs() < 0.1 { 0.5 } else { b });
            if x.im == 0.0 && x.re.abs() <= 2.0 {
                continue;
            }
            let z = match f.inverse_map(x) {
                Ok(z) => z,
                Err(_) => continue,
            };
            assert!((f.x_of_z(z) - x).norm() < 1e-12 * (1.0 + x.norm()));
        }
        // asymptote: z ~ x / gamma
        let x = c(1e8, 0.0);
        let z = f.inverse_map(x).unwrap();
        assert!((z / (x / f.quarter_width) - 1.0).norm() < 1e-7);
        assert!(f.inverse_map(c(0.3, 0.0)).is_err());
    }

    #[test]
    fn sigma_tilde_matches_principal_sqrt() {
        let fr = JoukowskiFrame::from_support(-1.0, 3.0).unwrap();
        for &x in &[c(4.0, 0.5), c(3.5, -1.0), c(5.0, 0.0), c(0.0, 2.0)] {
            let direct = ((x + 1.0) * (x - 3.0)).sqrt();
            let direct = if (direct - x).norm() < (direct + x).norm() {
                direct
            } else {
                -direct
            };
            let st = fr.sigma_tilde(x).unwrap();
            assert!((st - direct).norm() < 1e-12 * (1.0 + st.norm()));
        }
        // negative on the left real axis
        let st = fr.sigma_tilde(c(-3.0, 0.0)).unwrap();
        assert!(st.re < 0.0 && st.im.abs() < 1e-14);
    }

    #[test]
    fn series_from_samples_one_over_z() {
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let rho = 1.5;
        let nodes = circle_nodes(rho, 128);
        let samples: Vec<Complex64> = nodes.iter().map(|&z| 1.0 / z).collect();
        let s = series_from_samples(&samples, fr, rho, 16, 1e-8).unwrap();
        assert!((s.coeffs[0] - c(1.0, 0.0)).norm() < 1e-13);
        for k in 1..16 {
            assert!(s.coeffs[k].norm() < 1e-13);
        }
        // nonzero constant must be rejected
        let bad: Vec<Complex64> = nodes.iter().map(|_| c(1.0, 0.0)).collect();
        assert!(matches!(
            series_from_samples(&bad, fr, rho, 16, 1e-8),
            Err(Error::NotInH1(_))
        ));
    }

    #[test]
    fn semicircle_stieltjes_is_one_over_z() {
        // (x - sqrt(x^2-4))/2 = 1/z in the frame c=0, gamma=1
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let rho = 1.5;
        let nodes = circle_nodes(rho, 256);
        let samples: Vec<Complex64> = nodes
            .iter()
            .map(|&z| {
                let x = fr.x_of_z(z);
                0.5 * (x - fr.sigma_tilde_z(z))
            })
            .collect();
        let s = series_from_samples(&samples, fr, rho, 32, 1e-8).unwrap();
        assert!((s.coeffs[0] - c(1.0, 0.0)).norm() < 1e-12);
        // higher modes vanish up to the rho^j roundoff amplification
        for k in 1..32 {
            assert!(s.coeffs[k].norm() * rho.powi(-(k as i32 + 1)) < 1e-13);
        }
    }

    #[test]
    fn eval_series_resample_roundtrip() {
        let fr = JoukowskiFrame::from_support(0.0, 1.0).unwrap();
        // f = 1/z at x = 2.5: z = 2 in frame (c=1/2, gamma=1/4)? use spec case
        let fr2 = JoukowskiFrame::from_support(0.0, 1.0).unwrap();
        let z = fr2.inverse_map(c(2.5, 0.0)).unwrap();
        // x = c + g(z+1/z): 2.5 = 0.5 + 0.25 (z + 1/z) -> z + 1/z = 8 -> z = 4+sqrt(15)
        assert!((z - c(4.0 + 15.0f64.sqrt(), 0.0)).norm() < 1e-10);
        let f = SeriesFn::from_coeffs(fr, vec![c(1.0, 0.0)]);
        assert!((f.eval(c(2.5, 0.0)).unwrap() - 1.0 / z).norm() < 1e-14);

        // roundtrip on a decaying random series, resampled on another radius
        let coeffs: Vec<Complex64> = (0..24)
            .map(|j| c(0.8f64.powi(j), 0.3 * 0.7f64.powi(j)))
            .collect();
        let g = SeriesFn::from_coeffs(fr, coeffs.clone());
        let rho = 1.4;
        let nodes = circle_nodes(rho, 256);
        let samples: Vec<Complex64> = nodes.iter().map(|&z| g.eval_z(z)).collect();
        let h = series_from_samples(&samples, fr, rho, 24, 1e-8).unwrap();
        for z in circle_nodes(1.9, 17) {
            assert!((g.eval_z(z) - h.eval_z(z)).norm() < 1e-10);
        }
    }

    #[test]
    fn contour_integral_residues() {
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let x0 = c(0.0, 0.0); // inside every contour image
        let v = contour_integral(&|x| 1.0 / (x - x0), fr, 1.5, 256).unwrap();
        assert!((v - c(1.0, 0.0)).norm() < 1e-12);
        let p = contour_integral(&|x| x * x + 3.0, fr, 1.5, 256).unwrap();
        assert!(p.norm() < 1e-12);
        // total mass of the semicircle
        let w = contour_integral(
            &|x| 0.5 * (x - fr.sigma_tilde(x).unwrap()),
            fr,
            1.5,
            256,
        )
        .unwrap();
        assert!((w - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn contour_integral_radius_independence() {
        let fr = JoukowskiFrame::from_support(-1.0, 1.0).unwrap();
        let f = SeriesFn::from_coeffs(
            fr,
            (0..20).map(|j| c(0.6f64.powi(j), 0.1)).collect(),
        );
        let vals: Vec<Complex64> = [1.2, 1.5, 2.0]
            .iter()
            .map(|&rho| {
                contour_integral(
                    &|x| f.eval(x).unwrap() * (x * x - 0.5 * x + 1.0),
                    fr,
                    rho,
                    512,
                )
                .unwrap()
            })
            .collect();
        assert!((vals[0] - vals[1]).norm() < 1e-10);
        assert!((vals[1] - vals[2]).norm() < 1e-10);
    }

    #[test]
    fn sup_norm_cases() {
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let contours = ContourFamily {
            rho0: 2.0,
            ratio: 1.15,
            levels: 4,
            node_count: 128,
            rho_e: 4.0,
        };
        let zero = SeriesFn::zero(fr, 8);
        assert_eq!(sup_norm(&zero, &contours, 0), 0.0);
        let inv = SeriesFn::from_coeffs(fr, vec![c(1.0, 0.0)]);
        assert!((sup_norm(&inv, &contours, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sup_norm_monotone_in_level() {
        // maximum principle on random decaying series
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let contours = ContourFamily::default();
        let mut state = 77u64;
        for _ in 0..20 {
            let coeffs: Vec<Complex64> = (0..24)
                .map(|j| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    let a = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                    c(a * 0.85f64.powi(j), a * 0.5 * 0.9f64.powi(j))
                })
                .collect();
            let f = SeriesFn::from_coeffs(fr, coeffs);
            for l in 0..3 {
                assert!(sup_norm(&f, &contours, l + 1) <= sup_norm(&f, &contours, l) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn derivative_series_matches_finite_differences() {
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let f = SeriesFn::from_coeffs(
            fr,
            (0..32).map(|j| c(0.7f64.powi(j), -0.2 * 0.75f64.powi(j))).collect(),
        );
        let df = f.derivative(1.25).unwrap();
        let h = 1e-5;
        for (i, z) in circle_nodes(1.8, 20).into_iter().enumerate() {
            let x = fr.x_of_z(z);
            let step = if i % 2 == 0 { c(h, 0.0) } else { c(0.0, h) };
            let fd = (f.eval(x + step).unwrap() - f.eval(x - step).unwrap()) / (2.0 * step);
            assert!((df.eval(x).unwrap() - fd).norm() < 1e-7);
        }
        // derivative of zero is zero; linearity
        let zero = SeriesFn::zero(fr, 8);
        assert!(zero.derivative(1.25).unwrap().coeffs.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn zeta_bounds_derivative_norm() {
        let fr = JoukowskiFrame::from_support(-2.0, 2.0).unwrap();
        let contours = ContourFamily::default();
        let mut state = 991u64;
        for l in 0..3 {
            let zeta = contours.zeta(fr, l);
            for _ in 0..10 {
                let coeffs: Vec<Complex64> = (0..24)
                    .map(|j| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(99);
                        let a = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                        c(a * 0.8f64.powi(j), 0.0)
                    })
                    .collect();
                let f = SeriesFn::from_coeffs(fr, coeffs);
                let df = f.derivative(contours.rho0).unwrap();
                let lhs = sup_norm(&df, &contours, l + 1);
                let rhs = zeta * sup_norm(&f, &contours, l) * (1.0 + 1e-6);
                assert!(lhs <= rhs, "zeta bound violated at level {l}: {lhs} > {rhs}");
            }
        }
    }
}
