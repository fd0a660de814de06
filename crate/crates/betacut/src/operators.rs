//! The master operator `K` of the linearized loop equations, its Tricomi
//! contour inverse, and the negative-part endomorphism `N_g`.
//!
//! `(K f)(x) = 2 W_1^{-1}(x) f(x) - oint (L(xi)/L(x)) (1/(x-xi) + c) V0'(xi) f(xi) dxi/2i pi`
//! acts on `H^(2)`; the equivalent form `K f = -2 y f + (Q f)/L` moves the
//! quadrature to the outer contour. The inverse on `Im K` is
//! `(K^-1 g)(x) = oint (1/(xi-x)) (sigma~(xi)/sigma~(x)) g(xi)/(2 y(xi)) dxi/2i pi`
//! with the contour between the cut and `x`.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::EquilibriumData;
use crate::kernel::{circle_nodes, series_from_samples, ContourFamily, SeriesFn};
use crate::potential::{EdgeConfig, EdgeNature, Poly};
use crate::{Error, Result};

/// Hard-edge data of the operator kernel: `L(x) = prod_{hard} (x - a_tau)`,
/// and `c = 1/(a_soft - a_hard)` when exactly one edge is soft, else 0.
#[derive(Debug, Clone)]
pub struct EdgeData {
    pub l_poly: Poly,
    pub c: f64,
}

pub fn hard_edge_data(edges: &EdgeConfig) -> EdgeData {
    let mut l = Poly(vec![1.0]);
    let mut mul_root = |a: f64| {
        // l <- l * (x - a)
        let mut shifted = vec![0.0];
        shifted.extend(l.0.iter());
        let lower = l.scale(-a);
        l = Poly(shifted).add(&lower);
    };
    if edges.nature_minus == EdgeNature::Hard {
        mul_root(edges.a_minus);
    }
    if edges.nature_plus == EdgeNature::Hard {
        mul_root(edges.a_plus);
    }
    let c = match (edges.nature_minus, edges.nature_plus) {
        (EdgeNature::Soft, EdgeNature::Hard) => 1.0 / (edges.a_minus - edges.a_plus),
        (EdgeNature::Hard, EdgeNature::Soft) => 1.0 / (edges.a_plus - edges.a_minus),
        _ => 0.0,
    };
    EdgeData { l_poly: l, c }
}

/// Contour/tolerance parameters for the operator quadratures.
#[derive(Debug, Clone, Copy)]
pub struct OpParams {
    /// radius of the quadrature circle between the cut and the evaluation
    /// contour (Tricomi contour, N_g contour, definitional K contour)
    pub rho_quad: f64,
    /// radius of the evaluation circle on which results are sampled and
    /// re-encoded
    pub rho_eval: f64,
    /// outer radius for the Q-form of K
    pub rho_outer: f64,
    pub quad_nodes: usize,
    /// minimum coefficient count of operator outputs (operators lengthen the
    /// spectral content of their inputs)
    pub out_modes: usize,
    pub kinv_tol: f64,
}

impl Default for OpParams {
    fn default() -> Self {
        let contours = ContourFamily::default();
        OpParams {
            rho_quad: 1.3,
            rho_eval: contours.rho0 * contours.ratio * contours.ratio,
            rho_outer: contours.rho_e,
            quad_nodes: 256,
            out_modes: 96,
            kinv_tol: 1e-7,
        }
    }
}

impl OpParams {
    fn validate(&self) -> Result<()> {
        if !(1.0 < self.rho_quad && self.rho_quad < self.rho_eval && self.rho_eval < self.rho_outer)
        {
            return Err(Error::ContourInvalid(format!(
                "need 1 < rho_quad < rho_eval < rho_outer, got {} {} {}",
                self.rho_quad, self.rho_eval, self.rho_outer
            )));
        }
        Ok(())
    }
}

fn h2_check(f: &SeriesFn) -> Result<()> {
    let scale = f
        .coeffs
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let c1 = f.coeffs.first().map(|c| c.norm()).unwrap_or(0.0);
    if c1 > 1e-6 * scale {
        return Err(Error::NotH2(c1));
    }
    Ok(())
}

/// Weighted quadrature nodes on the image of `|z| = rho`: `(x, dx/(2 pi i), z)`
/// per node, so a contour integral becomes a plain sum.
pub fn quad_nodes(
    eq: &EquilibriumData,
    rho: f64,
    m: usize,
) -> Vec<(Complex64, Complex64, Complex64)> {
    circle_nodes(rho, m)
        .into_iter()
        .map(|z| {
            let x = eq.frame.x_of_z(z);
            let w = eq.frame.dx_dz(z) * z / m as f64;
            (x, w, z)
        })
        .collect()
}

/// `K f` through the outer-contour form `-2 y f + (Q f)/L`.
pub fn apply_k(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    f: &SeriesFn,
) -> Result<SeriesFn> {
    params.validate()?;
    h2_check(f)?;
    let mk = f.len().max(params.out_modes);
    let vals = apply_k_nodes(
        eq,
        edge,
        params,
        &circle_nodes(params.rho_eval, 4 * mk),
        &|z| f.eval_z(z),
    )?;
    series_from_samples(&vals, eq.frame, params.rho_eval, mk, 1e-5)
}

/// `K` evaluated at arbitrary z-plane points of modulus below `rho_outer`,
/// for a function given as a z-plane evaluator.
pub fn apply_k_nodes(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    znodes: &[Complex64],
    f: &dyn Fn(Complex64) -> Complex64,
) -> Result<Vec<Complex64>> {
    let vp = eq.potential0.derivative();
    let outer = quad_nodes(eq, params.rho_outer, params.quad_nodes);
    let pre: Vec<(Complex64, Complex64)> = outer
        .iter()
        .map(|&(xi, w, z)| (xi, w * edge.l_poly.eval(xi) * vp.eval(xi) * f(z)))
        .collect();
    znodes
        .iter()
        .map(|&zu| {
            let xu = eq.frame.x_of_z(zu);
            let mut q = Complex64::new(0.0, 0.0);
            for &(xi, p) in &pre {
                q -= p * (1.0 / (xu - xi) + edge.c);
            }
            let y = eq.y_z(zu);
            Ok(-2.0 * y * f(zu) + q / edge.l_poly.eval(xu))
        })
        .collect()
}

/// `K f` straight from the defining formula (inner contour, `x` outside).
/// Independent route for consistency checks.
pub fn apply_k_definitional(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    f: &SeriesFn,
    x: Complex64,
) -> Result<Complex64> {
    params.validate()?;
    let vp = eq.potential0.derivative();
    let inner = quad_nodes(eq, params.rho_quad, params.quad_nodes);
    let lx = edge.l_poly.eval(x);
    let mut acc = 2.0 * eq.stieltjes_leading(x)? * f.eval(x)?;
    for &(xi, w, z) in &inner {
        acc -= w * edge.l_poly.eval(xi) / lx
            * (1.0 / (x - xi) + edge.c)
            * vp.eval(xi)
            * f.eval_z(z);
    }
    Ok(acc)
}

/// Tricomi inversion. The result is re-encoded from the evaluation circle and
/// gated: `|K (K^-1 g) - g|` on the evaluation nodes must stay below
/// `kinv_tol * |g|`, otherwise the input is declared outside `Im K`.
pub fn apply_k_inverse(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    g: &SeriesFn,
) -> Result<SeriesFn> {
    params.validate()?;
    let mk = g.len().max(params.out_modes);
    let znodes = circle_nodes(params.rho_eval, 4 * mk);
    let vals = apply_k_inverse_nodes(eq, params, &znodes, &|z| g.eval_z(z));
    let f = series_from_samples(&vals, eq.frame, params.rho_eval, mk, 1e-5)?;
    let kvals = apply_k_nodes(eq, edge, params, &znodes, &|z| f.eval_z(z))?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (kv, z) in kvals.iter().zip(znodes.iter()) {
        num = num.max((kv - g.eval_z(*z)).norm());
        den = den.max(g.eval_z(*z).norm());
    }
    let residual = num / den.max(1e-300);
    if residual > params.kinv_tol {
        return Err(Error::NotInImK {
            residual,
            tol: params.kinv_tol,
        });
    }
    Ok(f)
}

/// Tricomi quadrature at given z-plane points (no residual gate).
pub fn apply_k_inverse_nodes(
    eq: &EquilibriumData,
    params: &OpParams,
    znodes: &[Complex64],
    g: &dyn Fn(Complex64) -> Complex64,
) -> Vec<Complex64> {
    let inner = quad_nodes(eq, params.rho_quad, params.quad_nodes);
    let pre: Vec<(Complex64, Complex64)> = inner
        .iter()
        .map(|&(xi, w, z)| {
            let st = eq.frame.sigma_tilde_z(z);
            (xi, w * st * g(z) / (2.0 * eq.y_z(z)))
        })
        .collect();
    znodes
        .iter()
        .map(|&zu| {
            let xu = eq.frame.x_of_z(zu);
            let stx = eq.frame.sigma_tilde_z(zu);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(xi, p) in &pre {
                acc += p / (xi - xu);
            }
            acc / stx
        })
        .collect()
}

/// `N_g(f)(x) = oint (L(xi)/L(x)) (1/(x-xi) + c) g(xi) f(xi) dxi/2i pi`,
/// for `g` analytic in the closed region bounded by the outer contour.
pub fn apply_n(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    g: &dyn Fn(Complex64) -> Complex64,
    f: &SeriesFn,
) -> Result<SeriesFn> {
    params.validate()?;
    let mk = f.len().max(params.out_modes);
    let znodes = circle_nodes(params.rho_eval, 4 * mk);
    let vals = apply_n_nodes(eq, edge, params, &znodes, g, &|z| f.eval_z(z));
    series_from_samples(&vals, eq.frame, params.rho_eval, mk, 1e-5)
}

pub fn apply_n_nodes(
    eq: &EquilibriumData,
    edge: &EdgeData,
    params: &OpParams,
    znodes: &[Complex64],
    g: &dyn Fn(Complex64) -> Complex64,
    f: &dyn Fn(Complex64) -> Complex64,
) -> Vec<Complex64> {
    let inner = quad_nodes(eq, params.rho_quad, params.quad_nodes);
    let pre: Vec<(Complex64, Complex64)> = inner
        .iter()
        .map(|&(xi, w, z)| (xi, w * edge.l_poly.eval(xi) * g(xi) * f(z)))
        .collect();
    znodes
        .iter()
        .map(|&zu| {
            let xu = eq.frame.x_of_z(zu);
            let lx = edge.l_poly.eval(xu);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(xi, p) in &pre {
                acc += p * (1.0 / (xu - xi) + edge.c);
            }
            acc / lx
        })
        .collect()
}

/// Randomized empirical estimate of the `K^-1` operator norm on contour `l`.
/// Report-only.
pub fn operator_norm_diagnostic(
    eq: &EquilibriumData,
    edge: &EdgeData,
    contours: &ContourFamily,
    l: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let _ = edge;
    let params = OpParams {
        rho_eval: contours.radius(l).max(1.35),
        ..OpParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let coeffs: Vec<Complex64> = (0..32)
            .map(|j| {
                let r: f64 = rng.gen_range(-1.0..1.0);
                let i: f64 = rng.gen_range(-1.0..1.0);
                Complex64::new(r, i) * 0.8f64.powi(j)
            })
            .collect();
        let g = SeriesFn::from_coeffs(eq.frame, coeffs);
        let znodes = circle_nodes(contours.radius(l), contours.node_count);
        let vals = apply_k_inverse_nodes(eq, &params, &znodes, &|z| g.eval_z(z));
        let nf = vals.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let ng = znodes
            .iter()
            .map(|&z| g.eval_z(z).norm())
            .fold(0.0, f64::max);
        if ng > 0.0 {
            best = best.max(nf / ng);
        }
    }
    best
}
