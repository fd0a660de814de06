//! Equilibrium measure of the one-cut log-gas: support endpoints, density
//! factor `S`, spectral function `y`, leading Stieltjes transform, rate
//! function, hypothesis validation, working-interval selection.
//!
//! Everything is solved in the Joukowski variable. Writing
//! `A(z) = V'(x(z))/2` as a symmetric Laurent polynomial, the decomposition
//! `A = S sigma + W_1^{-1}` with `W_1^{-1}` a pure negative-power series
//! determines the polynomial `S` by a triangular match of the positive
//! powers; soft endpoints are the roots of the remaining scalar conditions
//! (one per soft edge: vanishing `z^0` excess and unit total mass).

use num_complex::Complex64;

use crate::kernel::{circle_nodes, ContourFamily, JoukowskiFrame, SeriesFn};
use crate::potential::{EdgeConfig, EdgeNature, Poly, PotentialSpec};
use crate::{Error, Result};

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 100;
const OFFCRIT_TOL: f64 = 1e-6;
const DENSITY_GRID: usize = 512;

/// Real Laurent polynomial `sum_j c[j - min] z^j`.
#[derive(Debug, Clone)]
pub(crate) struct Laurent {
    min: i32,
    c: Vec<f64>,
}

impl Laurent {
    fn zero() -> Self {
        Laurent { min: 0, c: vec![] }
    }

    fn constant(v: f64) -> Self {
        Laurent { min: 0, c: vec![v] }
    }

    pub(crate) fn get(&self, j: i32) -> f64 {
        let i = j - self.min;
        if i < 0 || i as usize >= self.c.len() {
            0.0
        } else {
            self.c[i as usize]
        }
    }

    fn max(&self) -> i32 {
        self.min + self.c.len() as i32 - 1
    }

    fn add(&self, other: &Laurent) -> Laurent {
        if self.c.is_empty() {
            return other.clone();
        }
        if other.c.is_empty() {
            return self.clone();
        }
        let min = self.min.min(other.min);
        let max = self.max().max(other.max());
        let mut c = vec![0.0; (max - min + 1) as usize];
        for j in min..=max {
            c[(j - min) as usize] = self.get(j) + other.get(j);
        }
        Laurent { min, c }
    }

    fn mul(&self, other: &Laurent) -> Laurent {
        if self.c.is_empty() || other.c.is_empty() {
            return Laurent::zero();
        }
        let min = self.min + other.min;
        let mut c = vec![0.0; self.c.len() + other.c.len() - 1];
        for (i, &a) in self.c.iter().enumerate() {
            for (j, &b) in other.c.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Laurent { min, c }
    }

    pub(crate) fn eval(&self, z: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &a) in self.c.iter().enumerate() {
            acc += a * z.powi(self.min + i as i32);
        }
        acc
    }

    /// Laurent expansion of a polynomial in `x` under `x = c + g (z + 1/z)`.
    fn from_poly(p: &Poly, frame: JoukowskiFrame) -> Laurent {
        let x = Laurent {
            min: -1,
            c: vec![frame.quarter_width, frame.center, frame.quarter_width],
        };
        let mut acc = Laurent::zero();
        for &coef in p.0.iter().rev() {
            acc = acc.mul(&x).add(&Laurent::constant(coef));
        }
        acc
    }
}

/// Square-root factor of the spectral function, per edge configuration,
/// rational in the Joukowski variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaCase {
    SoftSoft,
    HardSoft,
    SoftHard,
    HardHard,
}

impl SigmaCase {
    pub fn from_natures(minus: EdgeNature, plus: EdgeNature) -> Self {
        match (minus, plus) {
            (EdgeNature::Soft, EdgeNature::Soft) => SigmaCase::SoftSoft,
            (EdgeNature::Hard, EdgeNature::Soft) => SigmaCase::HardSoft,
            (EdgeNature::Soft, EdgeNature::Hard) => SigmaCase::SoftHard,
            (EdgeNature::Hard, EdgeNature::Hard) => SigmaCase::HardHard,
        }
    }

    /// `sigma(x(z))` with the branch that keeps `S = y/sigma` positive on the
    /// cut: the per-edge factors are `x - alpha_plus = g (z-1)^2 / z` and
    /// `x - alpha_minus = g (z+1)^2 / z`.
    pub fn eval_z(&self, frame: JoukowskiFrame, z: Complex64) -> Complex64 {
        let g = frame.quarter_width;
        match self {
            SigmaCase::SoftSoft => g * (z - 1.0 / z),
            SigmaCase::HardSoft => (z - 1.0) / (z + 1.0),
            SigmaCase::SoftHard => (z + 1.0) / (z - 1.0),
            SigmaCase::HardHard => -z / (g * (z * z - 1.0)),
        }
    }
}

/// Support of the equilibrium measure with edge classification.
#[derive(Debug, Clone, Copy)]
pub struct Support {
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub nature_minus: EdgeNature,
    pub nature_plus: EdgeNature,
}

/// Solved equilibrium problem. Immutable; shared by the operator and
/// recursion layers.
#[derive(Debug, Clone)]
pub struct EquilibriumData {
    pub support: Support,
    pub frame: JoukowskiFrame,
    pub edges: EdgeConfig,
    pub sigma_case: SigmaCase,
    /// Symmetric Laurent coefficients of `S(x(z)) = s[0] + sum_j s[j](z^j + z^-j)`.
    pub s_cheb: Vec<f64>,
    /// `W_1^{-1}` as a coefficient series (for transforms; pointwise
    /// evaluation uses the exact closed form).
    pub w1m1: SeriesFn,
    pub constant_c: f64,
    pub potential0: Poly,
    v0_prime_half: Laurent,
    /// Fourier coefficients `a_k` of the even pullback of the density to the
    /// unit circle; exact because the pullback is a trigonometric polynomial.
    density_fourier: Vec<f64>,
}

struct SolveCore {
    frame: JoukowskiFrame,
    s_cheb: Vec<f64>,
    conditions: Vec<f64>,
    a: Laurent,
}

/// Triangular solve of `gamma (s_{j-1} - s_{j+1}) = r_j`, j descending.
fn solve_s_from_positive(r: &Laurent, gamma: f64) -> Vec<f64> {
    let top = r.max().max(0);
    let mut s = vec![0.0; (top + 2).max(1) as usize];
    for j in (1..=top).rev() {
        let ju = j as usize;
        s[ju - 1] = s[ju + 1] + r.get(j) / gamma;
    }
    s.truncate(top.max(1) as usize);
    while s.len() > 1 && s.last() == Some(&0.0) {
        s.pop();
    }
    s
}

fn solve_core(v0_prime: &Poly, edges: &EdgeConfig, alpha: (f64, f64)) -> Result<SolveCore> {
    let frame = JoukowskiFrame::from_support(alpha.0, alpha.1)?;
    let g = frame.quarter_width;
    let half = v0_prime.scale(0.5);
    let a = Laurent::from_poly(&half, frame);
    let case = SigmaCase::from_natures(edges.nature_minus, edges.nature_plus);
    let (s_cheb, conditions) = match case {
        SigmaCase::SoftSoft => {
            let s = solve_s_from_positive(&a, g);
            (s, vec![a.get(0), 2.0 * g * a.get(1) - 1.0])
        }
        SigmaCase::HardSoft | SigmaCase::SoftHard => {
            // L(x) = x - a_hard, hard edge pinned to the support endpoint
            let a_hard = if case == SigmaCase::HardSoft {
                alpha.0
            } else {
                alpha.1
            };
            let l = Laurent {
                min: -1,
                c: vec![g, frame.center - a_hard, g],
            };
            let r = l.mul(&a);
            let s = solve_s_from_positive(&r, g);
            (s, vec![r.get(0) - 1.0])
        }
        SigmaCase::HardHard => {
            let sig_tilde = Laurent {
                min: -1,
                c: vec![-g, 0.0, g],
            };
            let q = sig_tilde.mul(&a);
            let top = q.max().max(0);
            let mut s = vec![0.0; (top + 1).max(1) as usize];
            s[0] = 1.0;
            for j in 1..=top {
                s[j as usize] = -q.get(j);
            }
            while s.len() > 1 && s.last() == Some(&0.0) {
                s.pop();
            }
            (s, vec![])
        }
    };
    Ok(SolveCore {
        frame,
        s_cheb,
        conditions,
        a,
    })
}

fn eval_s_z(s_cheb: &[f64], z: Complex64) -> Complex64 {
    let mut acc = Complex64::new(s_cheb[0], 0.0);
    let mut zp = Complex64::new(1.0, 0.0);
    for &sj in &s_cheb[1..] {
        zp *= z;
        acc += sj * (zp + 1.0 / zp);
    }
    acc
}

/// `S` at a point of the x-plane through the Chebyshev recurrence
/// `z^j + z^-j = 2 T_j((x - c)/(2 gamma))`.
fn eval_s_x(s_cheb: &[f64], frame: JoukowskiFrame, x: Complex64) -> Complex64 {
    let u = (x - frame.center) / (2.0 * frame.quarter_width);
    let mut acc = Complex64::new(s_cheb[0], 0.0);
    let mut t_prev = Complex64::new(1.0, 0.0);
    let mut t = u;
    for &sj in &s_cheb[1..] {
        acc += 2.0 * sj * t;
        let next = 2.0 * u * t - t_prev;
        t_prev = t;
        t = next;
    }
    acc
}

/// Degree-2 truncation initial guess for soft endpoints.
fn initial_guess(v0: &Poly, edges: &EdgeConfig) -> (f64, f64) {
    let c2 = v0.0.get(2).copied().unwrap_or(0.0);
    let c1 = v0.0.get(1).copied().unwrap_or(0.0);
    let (lo, hi) = (edges.a_minus, edges.a_plus);
    let fallback = (lo + 0.35 * (hi - lo), hi - 0.35 * (hi - lo));
    let (xc, r) = if c2 > 0.0 {
        (-c1 / (2.0 * c2), 2.0 / (2.0 * c2).sqrt())
    } else {
        return fallback;
    };
    let lo_guess = (xc - r).max(lo + 0.02 * (hi - lo));
    let hi_guess = (xc + r).min(hi - 0.02 * (hi - lo));
    if lo_guess < hi_guess {
        (lo_guess, hi_guess)
    } else {
        fallback
    }
}

fn alphas_from_vars(edges: &EdgeConfig, vars: &[f64]) -> (f64, f64) {
    match (edges.nature_minus, edges.nature_plus) {
        (EdgeNature::Soft, EdgeNature::Soft) => (vars[0], vars[1]),
        (EdgeNature::Hard, EdgeNature::Soft) => (edges.a_minus, vars[0]),
        (EdgeNature::Soft, EdgeNature::Hard) => (vars[0], edges.a_plus),
        (EdgeNature::Hard, EdgeNature::Hard) => (edges.a_minus, edges.a_plus),
    }
}

/// Damped Newton on the soft-endpoint moment conditions.
pub fn solve_support(v0: &Poly, edges: &EdgeConfig) -> Result<Support> {
    let guess = initial_guess(v0, edges);
    let mut vars: Vec<f64> = match (edges.nature_minus, edges.nature_plus) {
        (EdgeNature::Soft, EdgeNature::Soft) => vec![guess.0, guess.1],
        (EdgeNature::Hard, EdgeNature::Soft) => vec![0.5 * (edges.a_minus + edges.a_plus)],
        (EdgeNature::Soft, EdgeNature::Hard) => vec![0.5 * (edges.a_minus + edges.a_plus)],
        (EdgeNature::Hard, EdgeNature::Hard) => vec![],
    };
    let vp = v0.derivative();
    let cond = |vars: &[f64]| -> Result<Vec<f64>> {
        let alpha = alphas_from_vars(edges, vars);
        if !(alpha.0 < alpha.1) {
            return Err(Error::NewtonDiverged("endpoints crossed".into()));
        }
        Ok(solve_core(&vp, edges, alpha)?.conditions)
    };
    if !vars.is_empty() {
        let mut f = cond(&vars)?;
        let norm = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        let mut it = 0;
        while norm(&f) > NEWTON_TOL {
            it += 1;
            if it > NEWTON_MAX_ITERS {
                return Err(Error::NewtonDiverged(format!(
                    "no convergence after {NEWTON_MAX_ITERS} iterations, |F| = {:.3e}",
                    norm(&f)
                )));
            }
            let n = vars.len();
            // finite-difference Jacobian
            let mut jac = vec![vec![0.0; n]; n];
            for j in 0..n {
                let h = 1e-7 * (1.0 + vars[j].abs());
                let mut vp_ = vars.clone();
                vp_[j] += h;
                let fp = cond(&vp_)?;
                for i in 0..n {
                    jac[i][j] = (fp[i] - f[i]) / h;
                }
            }
            let step = solve_linear(&jac, &f)
                .ok_or_else(|| Error::NewtonDiverged("singular Jacobian".into()))?;
            let mut lambda = 1.0;
            let mut improved = false;
            for _ in 0..25 {
                let trial: Vec<f64> = vars
                    .iter()
                    .zip(step.iter())
                    .map(|(v, s)| v - lambda * s)
                    .collect();
                if let Ok(ft) = cond(&trial) {
                    if norm(&ft) < norm(&f) {
                        vars = trial;
                        f = ft;
                        improved = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !improved {
                return Err(Error::NewtonDiverged(format!(
                    "damping stalled, |F| = {:.3e}",
                    norm(&f)
                )));
            }
        }
    }
    let alpha = alphas_from_vars(edges, &vars);
    // soft endpoints must end strictly inside the working interval
    if edges.nature_minus == EdgeNature::Soft && alpha.0 <= edges.a_minus {
        return Err(Error::SoftEndpointEscaped(alpha.0));
    }
    if edges.nature_plus == EdgeNature::Soft && alpha.1 >= edges.a_plus {
        return Err(Error::SoftEndpointEscaped(alpha.1));
    }
    // one-cut post-validation: density sign on a Chebyshev grid
    let core = solve_core(&vp, edges, alpha)?;
    let scale = core
        .s_cheb
        .iter()
        .map(|s| s.abs())
        .fold(0.0f64, f64::max)
        .max(1e-30);
    for i in 0..DENSITY_GRID {
        let th = std::f64::consts::PI * (i as f64 + 0.5) / DENSITY_GRID as f64;
        let s = eval_s_z(&core.s_cheb, Complex64::from_polar(1.0, th)).re;
        if s < -1e-10 * scale {
            let x = core.frame.center + 2.0 * core.frame.quarter_width * th.cos();
            return Err(Error::OneCutViolated(x));
        }
    }
    Ok(Support {
        alpha_minus: alpha.0,
        alpha_plus: alpha.1,
        nature_minus: edges.nature_minus,
        nature_plus: edges.nature_plus,
    })
}

fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b.iter())
        .map(|(row, &rhs)| {
            let mut r = row.clone();
            r.push(rhs);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

impl EquilibriumData {
    /// Full equilibrium solve for the order-0 potential on a working interval.
    pub fn solve(spec: &PotentialSpec, edges: &EdgeConfig) -> Result<Self> {
        let v0 = spec.order(0)?.clone();
        Self::solve_poly(&v0, edges)
    }

    pub fn solve_poly(v0: &Poly, edges: &EdgeConfig) -> Result<Self> {
        let support = solve_support(v0, edges)?;
        let core = solve_core(
            &v0.derivative(),
            edges,
            (support.alpha_minus, support.alpha_plus),
        )?;
        let frame = core.frame;
        let case = SigmaCase::from_natures(edges.nature_minus, edges.nature_plus);

        // W_1^{-1}(z) = A(z) - S(z) sigma(z), encoded as a coefficient series
        let s_cheb = core.s_cheb.clone();
        let a = core.a.clone();
        let rho_w = 1.35;
        let m_keep = 128usize;
        let nodes = circle_nodes(rho_w, 4 * m_keep);
        let samples: Vec<Complex64> = nodes
            .iter()
            .map(|&z| a.eval(z) - eval_s_z(&s_cheb, z) * case.eval_z(frame, z))
            .collect();
        let w1m1 = crate::kernel::series_from_samples(&samples, frame, rho_w, m_keep, 1e-6)?;

        // exact Fourier coefficients of the density pullback
        let density_fourier = density_fourier(&s_cheb, frame, case);

        let mut eq = EquilibriumData {
            support,
            frame,
            edges: *edges,
            sigma_case: case,
            s_cheb,
            w1m1,
            constant_c: 0.0,
            potential0: v0.clone(),
            v0_prime_half: core.a,
            density_fourier,
        };
        let mid = Complex64::new(frame.center, 0.0);
        eq.constant_c = 2.0 * eq.log_potential(frame.center) - eq.potential0.eval(mid).re;
        Ok(eq)
    }

    pub fn s_at(&self, x: Complex64) -> Complex64 {
        eval_s_x(&self.s_cheb, self.frame, x)
    }

    pub fn s_at_z(&self, z: Complex64) -> Complex64 {
        eval_s_z(&self.s_cheb, z)
    }

    pub fn sigma_z(&self, z: Complex64) -> Complex64 {
        self.sigma_case.eval_z(self.frame, z)
    }

    /// Spectral function `y = S sigma = V'/2 - W_1^{-1}` in the z plane.
    pub fn y_z(&self, z: Complex64) -> Complex64 {
        self.s_at_z(z) * self.sigma_z(z)
    }

    /// `W_1^{-1}` at a z-plane point, exact closed form.
    pub fn w1m1_z(&self, z: Complex64) -> Complex64 {
        self.v0_prime_half.eval(z) - self.y_z(z)
    }

    /// Leading Stieltjes transform at `x` off the cut.
    pub fn stieltjes_leading(&self, x: Complex64) -> Result<Complex64> {
        let z = self.frame.inverse_map(x)?;
        Ok(self.w1m1_z(z))
    }

    /// Equilibrium density at `x` strictly inside the support.
    pub fn density(&self, x: f64) -> Result<f64> {
        let (am, ap) = (self.support.alpha_minus, self.support.alpha_plus);
        if !(x > am && x < ap) {
            return Err(Error::CutEvaluation);
        }
        let s = self.s_at(Complex64::new(x, 0.0)).re;
        let soft_m = x - am;
        let soft_p = ap - x;
        let w = match self.sigma_case {
            SigmaCase::SoftSoft => (soft_m * soft_p).sqrt(),
            SigmaCase::HardHard => 1.0 / (soft_m * soft_p).sqrt(),
            SigmaCase::HardSoft => (soft_p / soft_m).sqrt(),
            SigmaCase::SoftHard => (soft_m / soft_p).sqrt(),
        };
        Ok(s * w / std::f64::consts::PI)
    }

    /// Integrate a function against the equilibrium measure,
    /// theta-trapezoidal rule (spectrally exact for our trig-polynomial
    /// pullbacks times analytic integrands).
    pub fn moment<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let m = 1024usize;
        let mut acc = 0.0;
        for i in 0..m {
            let th = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            let x = self.frame.center + 2.0 * self.frame.quarter_width * th.cos();
            acc += self.density_pullback(th) * f(x);
        }
        // even pullback over the full circle carries mass 2
        acc * (2.0 * std::f64::consts::PI / m as f64) / 2.0
    }

    /// Even 2pi-periodic pullback `g(theta)` with `d mu = g(theta) d theta`
    /// on `[0, pi]`.
    fn density_pullback(&self, th: f64) -> f64 {
        let g = self.frame.quarter_width;
        let s = eval_s_z(&self.s_cheb, Complex64::from_polar(1.0, th)).re;
        let pi = std::f64::consts::PI;
        match self.sigma_case {
            SigmaCase::SoftSoft => 4.0 * g * g / pi * s * th.sin() * th.sin(),
            SigmaCase::HardHard => s / pi,
            SigmaCase::HardSoft => 2.0 * g / pi * s * (1.0 - th.cos()),
            SigmaCase::SoftHard => 2.0 * g / pi * s * (1.0 + th.cos()),
        }
    }

    /// `u(x) = int ln|x - xi| d mu(xi)` for real `x`, exact through the
    /// Fourier expansion of the circle log kernel.
    pub fn log_potential(&self, x: f64) -> f64 {
        let g = self.frame.quarter_width;
        let u = (x - self.frame.center) / (2.0 * g);
        let a = &self.density_fourier;
        if u.abs() <= 1.0 {
            let th = u.clamp(-1.0, 1.0).acos();
            let mut acc = g.ln();
            for (k, &ak) in a.iter().enumerate().skip(1) {
                acc -= 2.0 * std::f64::consts::PI * ak / k as f64 * (k as f64 * th).cos();
            }
            acc
        } else {
            let z0 = if u > 1.0 {
                u + (u * u - 1.0).sqrt()
            } else {
                u - (u * u - 1.0).sqrt()
            };
            let mut acc = g.ln() + z0.abs().ln();
            let mut zp = 1.0;
            for (k, &ak) in a.iter().enumerate().skip(1) {
                zp /= z0;
                acc -= 2.0 * std::f64::consts::PI * ak / k as f64 * zp;
            }
            acc
        }
    }

    /// Large-deviation rate `J~(x) = V(x)/2 - u(x) + C/2`, for `x` outside
    /// the open support.
    pub fn rate_function(&self, x: f64) -> Result<f64> {
        if x > self.support.alpha_minus && x < self.support.alpha_plus {
            return Err(Error::CutEvaluation);
        }
        let v = self.potential0.eval_real(x);
        Ok(0.5 * v - self.log_potential(x) + 0.5 * self.constant_c)
    }

    /// `E[mu] = int V dmu - iint ln|xi - eta| dmu dmu`.
    pub fn energy(&self) -> f64 {
        let pot = self.moment(|x| self.potential0.eval_real(x));
        let g = self.frame.quarter_width;
        let a = &self.density_fourier;
        let mut double_log = g.ln();
        for (k, &ak) in a.iter().enumerate().skip(1) {
            double_log -= 2.0 * std::f64::consts::PI * std::f64::consts::PI * ak * ak / k as f64;
        }
        pot - double_log
    }
}

/// Exact Fourier coefficients `a_k = (1/2pi) int g(theta) e^{-ik theta}` of
/// the even density pullback (a trigonometric polynomial).
fn density_fourier(s_cheb: &[f64], frame: JoukowskiFrame, case: SigmaCase) -> Vec<f64> {
    let band = s_cheb.len() + 3;
    let m = (8 * band.max(8)).next_power_of_two();
    let g = frame.quarter_width;
    let pi = std::f64::consts::PI;
    let pull = |th: f64| -> f64 {
        let s = eval_s_z(s_cheb, Complex64::from_polar(1.0, th)).re;
        match case {
            SigmaCase::SoftSoft => 4.0 * g * g / pi * s * th.sin() * th.sin(),
            SigmaCase::HardHard => s / pi,
            SigmaCase::HardSoft => 2.0 * g / pi * s * (1.0 - th.cos()),
            SigmaCase::SoftHard => 2.0 * g / pi * s * (1.0 + th.cos()),
        }
    };
    let mut out = vec![0.0; band + 1];
    for (k, item) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..m {
            let th = 2.0 * pi * i as f64 / m as f64;
            acc += pull(th) * (k as f64 * th).cos();
        }
        *item = acc / m as f64;
    }
    out
}

/// Offcriticality report: minimum of `S` over the working interval and the
/// contour images.
#[derive(Debug, Clone, Copy)]
pub struct OffcriticalReport {
    pub ok: bool,
    pub min_s: f64,
    pub argmin: Complex64,
}

pub fn check_offcritical(eq: &EquilibriumData, contours: &ContourFamily) -> OffcriticalReport {
    let mut min_s = f64::INFINITY;
    let mut argmin = Complex64::new(0.0, 0.0);
    let mut sign_change = false;
    let mut prev = f64::NAN;
    for i in 0..=DENSITY_GRID {
        let x = eq.edges.a_minus
            + (eq.edges.a_plus - eq.edges.a_minus) * i as f64 / DENSITY_GRID as f64;
        let s = eq.s_at(Complex64::new(x, 0.0)).re;
        if s < min_s {
            min_s = s;
            argmin = Complex64::new(x, 0.0);
        }
        if !prev.is_nan() && s.signum() != prev.signum() {
            sign_change = true;
        }
        prev = s;
    }
    let mut min_abs_contour = f64::INFINITY;
    for l in 0..contours.levels {
        for x in contours.nodes(eq.frame, l) {
            let s = eq.s_at(x).norm();
            if s < min_abs_contour {
                min_abs_contour = s;
                if s < min_s {
                    argmin = x;
                }
            }
        }
    }
    let ok = min_s > OFFCRIT_TOL && !sign_change && min_abs_contour > OFFCRIT_TOL;
    OffcriticalReport {
        ok,
        min_s: min_s.min(min_abs_contour),
        argmin,
    }
}

/// Per-hypothesis validation report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HypothesisReport {
    pub confinement: bool,
    pub one_cut: bool,
    pub offcritical: bool,
    pub large_deviations: bool,
    pub edge_consistency: bool,
    pub detail: String,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.confinement
            && self.one_cut
            && self.offcritical
            && self.large_deviations
            && self.edge_consistency
    }
}

pub fn validate_hypotheses(spec: &PotentialSpec, edges: &EdgeConfig) -> HypothesisReport {
    let confinement = spec.is_confining();
    let mut detail = String::new();
    let eq = match EquilibriumData::solve(spec, edges) {
        Ok(eq) => eq,
        Err(e) => {
            detail = format!("equilibrium solve failed: {e}");
            let one_cut = !matches!(e, Error::OneCutViolated(_));
            return HypothesisReport {
                confinement,
                one_cut: one_cut && false,
                offcritical: false,
                large_deviations: false,
                edge_consistency: false,
                detail,
            };
        }
    };
    // one-cut: density sign on the support grid
    let mut one_cut = true;
    for i in 1..DENSITY_GRID {
        let x = eq.support.alpha_minus
            + (eq.support.alpha_plus - eq.support.alpha_minus) * i as f64 / DENSITY_GRID as f64;
        if eq.density(x).unwrap_or(0.0) < -1e-10 {
            one_cut = false;
            detail = format!("negative density at x = {x}");
            break;
        }
    }
    let off = check_offcritical(&eq, &ContourFamily::default());
    // large deviations: rate function strictly positive away from the support
    let mut large_deviations = true;
    let margin = 0.1;
    let scan = |lo: f64, hi: f64, ld: &mut bool| {
        if hi <= lo {
            return;
        }
        for i in 0..=64 {
            let x = lo + (hi - lo) * i as f64 / 64.0;
            if eq.rate_function(x).unwrap_or(0.0) <= 0.0 {
                *ld = false;
            }
        }
    };
    scan(
        eq.edges.a_minus,
        eq.support.alpha_minus - margin,
        &mut large_deviations,
    );
    scan(
        eq.support.alpha_plus + margin,
        eq.edges.a_plus,
        &mut large_deviations,
    );
    // declared edge natures must be consistent with the solved measure
    let mut edge_consistency = true;
    if edges.nature_minus == EdgeNature::Hard
        && eq.s_at(Complex64::new(edges.a_minus, 0.0)).re <= 0.0
    {
        edge_consistency = false;
    }
    if edges.nature_plus == EdgeNature::Hard
        && eq.s_at(Complex64::new(edges.a_plus, 0.0)).re <= 0.0
    {
        edge_consistency = false;
    }
    if !edge_consistency {
        detail = "edge-nature inconsistency: S not positive at a declared hard edge".into();
    }
    HypothesisReport {
        confinement,
        one_cut,
        offcritical: off.ok,
        large_deviations,
        edge_consistency,
        detail,
    }
}

/// Finite working interval: soft edges trimmed to `alpha_tau +- margin`
/// (after a provisional solve), hard edges kept.
pub fn select_working_interval(
    spec: &PotentialSpec,
    nature_minus: EdgeNature,
    nature_plus: EdgeNature,
    margin: f64,
) -> Result<EdgeConfig> {
    if nature_minus == EdgeNature::Hard && nature_plus == EdgeNature::Hard {
        if !spec.interval.0.is_finite() || !spec.interval.1.is_finite() {
            return Err(Error::HardEdgeInfinite);
        }
        return EdgeConfig::new(spec.interval.0, spec.interval.1, nature_minus, nature_plus);
    }
    if margin <= 0.0 {
        return Err(Error::Config(
            "margin must be strictly positive: a soft working edge must sit strictly outside the support".into(),
        ));
    }
    if nature_minus == EdgeNature::Hard && !spec.interval.0.is_finite() {
        return Err(Error::HardEdgeInfinite);
    }
    if nature_plus == EdgeNature::Hard && !spec.interval.1.is_finite() {
        return Err(Error::HardEdgeInfinite);
    }
    let v0 = spec.order(0)?;
    // provisional box, grown until the soft endpoints sit well inside
    let c2 = v0.0.get(2).copied().unwrap_or(0.0);
    let c1 = v0.0.get(1).copied().unwrap_or(0.0);
    let (xc, r0) = if c2 > 0.0 {
        (-c1 / (2.0 * c2), 2.0 / (2.0 * c2).sqrt() + 1.0)
    } else {
        (0.0, 3.0)
    };
    let mut grow = 2.0 * r0;
    let mut support = None;
    for _ in 0..6 {
        let lo = if spec.interval.0.is_finite() {
            spec.interval.0
        } else {
            xc - grow
        };
        let hi = if spec.interval.1.is_finite() {
            spec.interval.1
        } else {
            xc + grow
        };
        let edges = EdgeConfig::new(lo, hi, nature_minus, nature_plus)?;
        match solve_support(v0, &edges) {
            Ok(s) => {
                // accept when soft endpoints do not hug the provisional box
                let near_lo = nature_minus == EdgeNature::Soft
                    && (s.alpha_minus - lo).abs() < 0.05 * (hi - lo);
                let near_hi = nature_plus == EdgeNature::Soft
                    && (hi - s.alpha_plus).abs() < 0.05 * (hi - lo);
                if !near_lo && !near_hi {
                    support = Some(s);
                    break;
                }
                grow *= 2.0;
            }
            Err(_) => grow *= 2.0,
        }
    }
    let support = support.ok_or_else(|| {
        Error::NewtonDiverged("provisional support solve failed on every box".into())
    })?;
    let a_minus = match nature_minus {
        EdgeNature::Hard => spec.interval.0,
        EdgeNature::Soft => {
            let a = support.alpha_minus - margin;
            if spec.interval.0.is_finite() && a < spec.interval.0 {
                return Err(Error::Config(
                    "margin pushes the working edge outside the declared interval".into(),
                ));
            }
            a
        }
    };
    let a_plus = match nature_plus {
        EdgeNature::Hard => spec.interval.1,
        EdgeNature::Soft => {
            let a = support.alpha_plus + margin;
            if spec.interval.1.is_finite() && a > spec.interval.1 {
                return Err(Error::Config(
                    "margin pushes the working edge outside the declared interval".into(),
                ));
            }
            a
        }
    };
    let edges = EdgeConfig::new(a_minus, a_plus, nature_minus, nature_plus)?;
    // the margin must not cross an S-zero
    let eq = EquilibriumData::solve(spec, &edges)?;
    let grid = 256;
    for i in 0..=grid {
        let x = a_minus + (a_plus - a_minus) * i as f64 / grid as f64;
        if eq.s_at(Complex64::new(x, 0.0)).re <= OFFCRIT_TOL {
            return Err(Error::MarginCrossesSZero);
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_eq() -> EquilibriumData {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss");
        let edges = EdgeConfig::soft_soft(-3.0, 3.0);
        EquilibriumData::solve(&v, &edges).unwrap()
    }

    fn arcsine_eq() -> EquilibriumData {
        let v = PotentialSpec::simple(vec![0.0], (-1.0, 1.0), "arcsine");
        let edges = EdgeConfig::hard_hard(-1.0, 1.0);
        EquilibriumData::solve(&v, &edges).unwrap()
    }

    fn mp_eq() -> EquilibriumData {
        let v = PotentialSpec::simple(vec![0.0, 1.0], (0.0, 6.0), "linear");
        let edges =
            EdgeConfig::new(0.0, 6.0, EdgeNature::Hard, EdgeNature::Soft).unwrap();
        EquilibriumData::solve(&v, &edges).unwrap()
    }

    #[test]
    fn semicircle_support() {
        let eq = gaussian_eq();
        assert!((eq.support.alpha_minus + 2.0).abs() < 1e-10);
        assert!((eq.support.alpha_plus - 2.0).abs() < 1e-10);
        // S = 1/2 everywhere
        for x in [-1.5, 0.0, 0.7, 3.0] {
            assert!((eq.s_at(Complex64::new(x, 0.0)).re - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_hard_pinned() {
        let eq = arcsine_eq();
        assert_eq!(eq.support.alpha_minus, -1.0);
        assert_eq!(eq.support.alpha_plus, 1.0);
        // S = 1
        assert!((eq.s_at(Complex64::new(0.3, 0.0)).re - 1.0).abs() < 1e-13);
    }

    #[test]
    fn marchenko_pastur_endpoint() {
        let eq = mp_eq();
        assert!((eq.support.alpha_plus - 4.0).abs() < 1e-9, "alpha_plus = {}", eq.support.alpha_plus);
        // S = 1/2 and the closed-form density
        for x in [0.5, 1.0, 2.5, 3.9] {
            assert!((eq.s_at(Complex64::new(x, 0.0)).re - 0.5).abs() < 1e-10);
            let rho = eq.density(x).unwrap();
            let exact = ((4.0 - x) / x).sqrt() / (2.0 * std::f64::consts::PI);
            assert!((rho - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn stieltjes_values() {
        let eq = gaussian_eq();
        let w = eq.stieltjes_leading(Complex64::new(3.0, 0.0)).unwrap();
        assert!((w.re - (3.0 - 5.0f64.sqrt()) / 2.0).abs() < 1e-12);
        // normalization at large x
        let big = Complex64::new(1e6, 0.0);
        assert!((eq.stieltjes_leading(big).unwrap() * big - 1.0).norm() < 1e-5);
        let arc = arcsine_eq();
        let w = arc.stieltjes_leading(Complex64::new(2.0, 0.0)).unwrap();
        assert!((w.re - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn density_values_and_mass() {
        let eq = gaussian_eq();
        assert!((eq.density(0.0).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        let arc = arcsine_eq();
        assert!((arc.density(0.0).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        for eq in [gaussian_eq(), arcsine_eq(), mp_eq()] {
            let mass = eq.moment(|_| 1.0);
            assert!((mass - 1.0).abs() < 1e-8, "mass = {mass}");
        }
        assert!(gaussian_eq().density(2.5).is_err());
    }

    #[test]
    fn s_function_constants() {
        assert!((gaussian_eq().s_at(Complex64::new(1.0, 0.5)).re - 0.5).abs() < 1e-12);
        assert!((arcsine_eq().s_at(Complex64::new(0.2, 0.1)) - 1.0).norm() < 1e-12);
        assert!((mp_eq().s_at(Complex64::new(2.0, 0.3)) - 0.5).norm() < 1e-10);
    }

    #[test]
    fn offcritical_reports() {
        let g = gaussian_eq();
        let rep = check_offcritical(&g, &ContourFamily::default());
        assert!(rep.ok);
        assert!((rep.min_s - 0.5).abs() < 1e-9);
        let arc = arcsine_eq();
        let rep = check_offcritical(&arc, &ContourFamily::default());
        assert!(rep.ok);
        assert!((rep.min_s - 1.0).abs() < 1e-9);
        // S develops interior zeros for the inverted quartic on a wide box
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5, 0.0, -0.11], (-3.0, 3.0), "invq");
        let eq = EquilibriumData::solve_poly(
            v.order(0).unwrap(),
            &EdgeConfig::hard_hard(-3.0, 3.0),
        );
        // the solve itself flags the negative density
        assert!(matches!(eq, Err(Error::OneCutViolated(_))));
    }

    #[test]
    fn rate_function_gaussian_closed_form() {
        let eq = gaussian_eq();
        // J~(alpha_plus) = 0
        assert!(eq.rate_function(2.0).unwrap().abs() < 1e-10);
        // closed form x sqrt(x^2-4)/4 - arccosh(x/2)
        for x in [2.3f64, 3.0, 2.05] {
            let exact = x * (x * x - 4.0).sqrt() / 4.0 - (x / 2.0 + (x * x / 4.0 - 1.0).sqrt()).ln();
            assert!(
                (eq.rate_function(x).unwrap() - exact).abs() < 1e-10,
                "x = {x}"
            );
        }
        // positivity away from the support
        for i in 0..=20 {
            let x = 2.1 + i as f64 * 0.04;
            assert!(eq.rate_function(x).unwrap() > 0.0);
            assert!(eq.rate_function(-x).unwrap() > 0.0);
        }
        assert!(eq.rate_function(0.5).is_err());
    }

    #[test]
    fn equilibrium_energies() {
        assert!((gaussian_eq().energy() - 0.75).abs() < 1e-10);
        assert!((arcsine_eq().energy() - 2.0f64.ln()).abs() < 1e-12);
        // V -> V + c shifts E by exactly c
        let v = PotentialSpec::simple(vec![1.3, 0.0, 0.5], (-3.0, 3.0), "shifted");
        let eq = EquilibriumData::solve(&v, &EdgeConfig::soft_soft(-3.0, 3.0)).unwrap();
        assert!((eq.energy() - (0.75 + 1.3)).abs() < 1e-10);
    }

    #[test]
    fn equality_branch_constant() {
        // 2 u(x) - V(x) constant inside the support
        for eq in [gaussian_eq(), mp_eq(), arcsine_eq()] {
            let (am, ap) = (eq.support.alpha_minus, eq.support.alpha_plus);
            let mut vals = vec![];
            for i in 1..40 {
                let x = am + (ap - am) * i as f64 / 40.0;
                vals.push(2.0 * eq.log_potential(x) - eq.potential0.eval_real(x));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64)
                .sqrt();
            assert!(sd < 1e-6, "equality branch spread {sd}");
            assert!((mean - eq.constant_c).abs() < 1e-8);
        }
    }

    #[test]
    fn stieltjes_is_cauchy_transform_of_density() {
        for eq in [gaussian_eq(), mp_eq()] {
            for (re, im) in [(3.2, 0.5), (-1.0, 1.5), (0.4, 2.0), (5.0, -0.7)] {
                let x = Complex64::new(
                    re * (eq.support.alpha_plus - eq.support.alpha_minus) / 4.0
                        + eq.frame.center,
                    im,
                );
                let direct = eq.stieltjes_leading(x).unwrap();
                let quad = {
                    let mre = eq.moment(|xi| {
                        let d = x - Complex64::new(xi, 0.0);
                        (1.0 / d).re
                    });
                    let mim = eq.moment(|xi| {
                        let d = x - Complex64::new(xi, 0.0);
                        (1.0 / d).im
                    });
                    Complex64::new(mre, mim)
                };
                assert!(
                    (direct - quad).norm() < 1e-7,
                    "mismatch at {x}: {direct} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn affine_reparametrization_invariance() {
        // x -> lambda x + mu with the quartic
        let lambda = 1.7;
        let mu = -0.6;
        let v = Poly(vec![0.0, 0.0, 0.5, 0.0, 0.1]);
        let edges = EdgeConfig::soft_soft(-3.0, 3.0);
        let s1 = solve_support(&v, &edges).unwrap();
        // tilde V(x) = V((x - mu)/lambda)
        let vt = v.compose_affine(1.0 / lambda, -mu / lambda);
        let edges_t = EdgeConfig::soft_soft(-3.0 * lambda + mu, 3.0 * lambda + mu);
        let s2 = solve_support(&vt, &edges_t).unwrap();
        assert!((s2.alpha_minus - (lambda * s1.alpha_minus + mu)).abs() < 1e-9);
        assert!((s2.alpha_plus - (lambda * s1.alpha_plus + mu)).abs() < 1e-9);
    }

    #[test]
    fn validate_hypotheses_cases() {
        let g = PotentialSpec::simple(
            vec![0.0, 0.0, 0.5],
            (f64::NEG_INFINITY, f64::INFINITY),
            "gauss",
        );
        let edges = select_working_interval(&g, EdgeNature::Soft, EdgeNature::Soft, 0.5).unwrap();
        assert!((edges.a_minus + 2.5).abs() < 1e-8);
        assert!((edges.a_plus - 2.5).abs() < 1e-8);
        let rep = validate_hypotheses(&g, &edges);
        assert!(rep.all_pass(), "{rep:?}");

        // fake hard edges on the Gaussian: flagged
        let g3 = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss-hard");
        let rep = validate_hypotheses(&g3, &EdgeConfig::hard_hard(-3.0, 3.0));
        assert!(!rep.all_pass());

        // double well: one-cut fails
        let dw = PotentialSpec::simple(
            vec![0.0, 0.0, -1.0, 0.0, 0.25],
            (f64::NEG_INFINITY, f64::INFINITY),
            "double-well",
        );
        let dw_edges = EdgeConfig::soft_soft(-3.0, 3.0);
        let rep = validate_hypotheses(&dw, &dw_edges);
        assert!(!rep.one_cut || !rep.offcritical, "{rep:?}");
    }

    #[test]
    fn working_interval_contracts() {
        let g = PotentialSpec::simple(
            vec![0.0, 0.0, 0.5],
            (f64::NEG_INFINITY, f64::INFINITY),
            "gauss",
        );
        assert!(matches!(
            select_working_interval(&g, EdgeNature::Soft, EdgeNature::Soft, 0.0),
            Err(Error::Config(_))
        ));
        let arc = PotentialSpec::simple(vec![0.0], (-1.0, 1.0), "arcsine");
        let e = select_working_interval(&arc, EdgeNature::Hard, EdgeNature::Hard, 0.5).unwrap();
        assert_eq!((e.a_minus, e.a_plus), (-1.0, 1.0));
    }

    #[test]
    fn leading_loop_equation_residual() {
        // (W_1^{-1})^2 = 1/((x-a-)(x-a+)) + contour term, on Gamma_1 nodes
        for eq in [gaussian_eq(), arcsine_eq(), mp_eq()] {
            let contours = ContourFamily::default();
            let vp = eq.potential0.derivative();
            let (am, ap) = (eq.edges.a_minus, eq.edges.a_plus);
            let mut worst = 0.0f64;
            for x in contours.nodes(eq.frame, 1) {
                let w = eq.stieltjes_leading(x).unwrap();
                let lhs = w * w;
                let pole = 1.0 / ((x - am) * (x - ap));
                let integral = crate::kernel::contour_integral(
                    &|xi| {
                        let wxi = eq.stieltjes_leading(xi).unwrap();
                        1.0 / (x - xi) * ((xi - am) * (xi - ap)) / ((x - am) * (x - ap))
                            * vp.eval(xi)
                            * wxi
                    },
                    eq.frame,
                    1.18,
                    512,
                )
                .unwrap();
                worst = worst.max((lhs - pole - integral).norm());
            }
            assert!(worst < 1e-9, "leading loop residual {worst}");
        }
    }
}
