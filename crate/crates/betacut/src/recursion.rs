//! The triangular loop-equation recursion: assemble `E_{n0}^{k0}`, produce
//! `W_{n0}^{k0+1} = -K^{-1} E_{n0}^{k0}`, schedule orders so every term only
//! needs previously computed ones, verify loop-equation residuals, and
//! decompose the beta dependence.
//!
//! Multivariate correlators are stored as symmetric coefficient tensors in
//! the Joukowski variables of each argument. The `K^{-1}` solve acts on the
//! live axis only; spectator axes are sampled on a circle and transformed
//! back to coefficient space afterwards.

use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::equilibrium::EquilibriumData;
use crate::kernel::{circle_nodes, SeriesFn};
use crate::operators::{self, EdgeData, OpParams};
use crate::potential::{Poly, PotentialSpec};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Dense complex tensor, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<Complex64>,
}

impl Tensor {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![ZERO; n.max(1)],
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let before: usize = self.dims[..axis].iter().product();
        let d = self.dims[axis];
        let after: usize = self.dims[axis + 1..].iter().product();
        (before, d, after)
    }

    /// Mode-n product: contract `axis` with a `rows x dims[axis]` matrix.
    pub fn mode_apply(&self, axis: usize, mat: &[Complex64], rows: usize) -> Tensor {
        let (before, d, after) = self.split_at_axis(axis);
        assert_eq!(mat.len(), rows * d);
        let mut dims = self.dims.clone();
        dims[axis] = rows;
        let mut out = vec![ZERO; before * rows * after];
        for b in 0..before {
            for r in 0..rows {
                let mrow = &mat[r * d..(r + 1) * d];
                let orow = &mut out[(b * rows + r) * after..(b * rows + r + 1) * after];
                for (j, &m) in mrow.iter().enumerate() {
                    if m == ZERO {
                        continue;
                    }
                    let irow = &self.data[(b * d + j) * after..(b * d + j + 1) * after];
                    for (o, &i) in orow.iter_mut().zip(irow.iter()) {
                        *o += m * i;
                    }
                }
            }
        }
        Tensor { dims, data: out }
    }

    /// Contract every axis with a vector; scalar result.
    pub fn eval_vectors(&self, vectors: &[Vec<Complex64>]) -> Complex64 {
        assert_eq!(vectors.len(), self.dims.len());
        // contract the last axis straight out of `self`, then fold
        let n = self.dims.len();
        if n == 0 {
            return self.data[0];
        }
        let d_last = self.dims[n - 1];
        let outer: usize = self.dims[..n - 1].iter().product();
        let vlast = &vectors[n - 1];
        let mut data = vec![ZERO; outer];
        for (b, item) in data.iter_mut().enumerate() {
            let row = &self.data[b * d_last..(b + 1) * d_last];
            let mut acc = ZERO;
            for (x, v) in row.iter().zip(vlast.iter()) {
                acc += x * v;
            }
            *item = acc;
        }
        let mut cur = Tensor {
            dims: self.dims[..n - 1].to_vec(),
            data,
        };
        for v in vectors[..n - 1].iter().rev() {
            let axis = cur.dims.len() - 1;
            cur = cur.mode_apply(axis, v, 1);
            cur.dims.pop();
        }
        cur.data[0]
    }

    /// Average over axis permutations; returns the symmetrized tensor and the
    /// sup deviation from symmetry before averaging.
    pub fn symmetrize(&self) -> (Tensor, f64) {
        let n = self.dims.len();
        if n <= 1 {
            return (self.clone(), 0.0);
        }
        let perms = permutations(n);
        let mut out = vec![ZERO; self.data.len()];
        let strides = strides_of(&self.dims);
        let mut idx = vec![0usize; n];
        let mut dev = 0.0f64;
        for (flat, o) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for a in 0..n {
                idx[a] = rem / strides[a];
                rem %= strides[a];
            }
            let mut acc = ZERO;
            let mut first = ZERO;
            for (pi, p) in perms.iter().enumerate() {
                let mut f = 0usize;
                for a in 0..n {
                    f += idx[p[a]] * strides[a];
                }
                let v = self.data[f];
                if pi == 0 {
                    first = v;
                } else {
                    dev = dev.max((v - first).norm());
                }
                acc += v;
            }
            *o = acc / perms.len() as f64;
        }
        (
            Tensor {
                dims: self.dims.clone(),
                data: out,
            },
            dev,
        )
    }

    pub fn sup(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

fn strides_of(dims: &[usize]) -> Vec<usize> {
    let n = dims.len();
    let mut s = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, &mut out);
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Evaluation matrix `z_u^{-(j+1)}`, rows = nodes, cols = modes.
fn pow_matrix(znodes: &[Complex64], modes: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; znodes.len() * modes];
    for (u, &z) in znodes.iter().enumerate() {
        let w = 1.0 / z;
        let mut p = Complex64::new(1.0, 0.0);
        for j in 0..modes {
            p *= w;
            out[u * modes + j] = p;
        }
    }
    out
}

/// DFT matrix extracting `modes` negative-power coefficients from samples on
/// `|z| = rho`.
fn dft_matrix(rho: f64, m_nodes: usize, modes: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; modes * m_nodes];
    for j in 0..modes {
        let r = rho.powi(j as i32 + 1) / m_nodes as f64;
        for s in 0..m_nodes {
            let th = 2.0 * std::f64::consts::PI * ((j + 1) * s % m_nodes) as f64 / m_nodes as f64;
            out[j * m_nodes + s] = Complex64::from_polar(r, th);
        }
    }
    out
}

/// Coefficient-space d/dx matrix (square, `modes x modes`).
fn derivative_matrix(modes: usize, gamma: f64) -> Vec<Complex64> {
    let mut out = vec![ZERO; modes * modes];
    for i in 0..modes {
        let j0 = i + 1; // input power
        let coef = -(j0 as f64) / gamma;
        let mut j = j0 + 1; // output powers j0+1, j0+3, ...
        while j <= modes {
            out[(j - 1) * modes + i] = Complex64::new(coef, 0.0);
            j += 2;
        }
    }
    out
}

fn matmul(a: &[Complex64], ra: usize, ca: usize, b: &[Complex64], cb: usize) -> Vec<Complex64> {
    assert_eq!(a.len(), ra * ca);
    assert_eq!(b.len(), ca * cb);
    let mut out = vec![ZERO; ra * cb];
    for i in 0..ra {
        for k in 0..ca {
            let av = a[i * ca + k];
            if av == ZERO {
                continue;
            }
            let brow = &b[k * cb..(k + 1) * cb];
            let orow = &mut out[i * cb..(i + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// One coefficient tensor `W_n^{k}`.
#[derive(Debug, Clone)]
pub struct CorrelatorTerm {
    pub n: usize,
    pub k: i32,
    pub tensor: Tensor,
    /// sup deviation from permutation symmetry before symmetrization
    pub asymmetry: f64,
    /// relative `|K W + E|` residual on sampled tuples
    pub imk_residual: f64,
}

impl CorrelatorTerm {
    /// Live series at a fixed spectator tuple (z-plane points).
    pub fn section(
        &self,
        frame: crate::kernel::JoukowskiFrame,
        spectators: &[Complex64],
    ) -> SeriesFn {
        assert_eq!(spectators.len(), self.n - 1);
        if spectators.is_empty() {
            return SeriesFn::from_coeffs(frame, self.tensor.data.clone());
        }
        // fold the trailing axes one at a time without an upfront clone
        let d_last = *self.tensor.dims.last().unwrap();
        let outer: usize = self.tensor.dims[..self.n - 1].iter().product();
        let vlast = pow_vector(spectators[self.n - 2], d_last);
        let mut data = vec![ZERO; outer];
        for (b, item) in data.iter_mut().enumerate() {
            let row = &self.tensor.data[b * d_last..(b + 1) * d_last];
            let mut acc = ZERO;
            for (x, v) in row.iter().zip(vlast.iter()) {
                acc += x * v;
            }
            *item = acc;
        }
        let mut cur = Tensor {
            dims: self.tensor.dims[..self.n - 1].to_vec(),
            data,
        };
        for &zs in spectators[..self.n - 2].iter().rev() {
            let axis = cur.dims.len() - 1;
            let v = pow_vector(zs, cur.dims[axis]);
            cur = cur.mode_apply(axis, &v, 1);
            cur.dims.pop();
        }
        SeriesFn::from_coeffs(frame, cur.data)
    }

    pub fn eval_z(&self, zs: &[Complex64]) -> Complex64 {
        assert_eq!(zs.len(), self.n);
        let vectors: Vec<Vec<Complex64>> = zs
            .iter()
            .zip(self.tensor.dims.iter())
            .map(|(&z, &d)| pow_vector(z, d))
            .collect();
        self.tensor.eval_vectors(&vectors)
    }

    pub fn eval_x(
        &self,
        frame: crate::kernel::JoukowskiFrame,
        xs: &[Complex64],
    ) -> Result<Complex64> {
        let zs: Result<Vec<Complex64>> = xs.iter().map(|&x| frame.inverse_map(x)).collect();
        Ok(self.eval_z(&zs?))
    }
}

fn pow_vector(z: Complex64, modes: usize) -> Vec<Complex64> {
    let w = 1.0 / z;
    let mut out = Vec::with_capacity(modes);
    let mut p = Complex64::new(1.0, 0.0);
    for _ in 0..modes {
        p *= w;
        out.push(p);
    }
    out
}

/// Discretization parameters of the recursion pipeline.
#[derive(Debug, Clone)]
pub struct RecursionParams {
    /// coefficient count per axis, by tensor rank
    pub modes_by_rank: Vec<usize>,
    /// residual evaluation radius (`Gamma_2`)
    pub rho_live: f64,
    /// result-extraction / Im-K check radius (between live and spectator)
    pub rho_check: f64,
    /// spectator sampling radius
    pub rho_spec: f64,
    /// outward-deformed Tricomi radius (must stay below any S-zero)
    pub rho_mid: f64,
    /// inner quadrature radius (operators, W_1^{0} solve)
    pub rho_quad: f64,
    /// outward radius for loop-residual contour integrals
    pub rho_residual: f64,
    pub quad_nodes: usize,
    /// relative gate on the `K (K^-1 E) + E` residual
    pub imk_tol: f64,
    /// spectator tuples sampled for residual checks
    pub check_tuples: usize,
    /// modes for on-demand univariate section solves
    pub section_modes: usize,
}

impl Default for RecursionParams {
    fn default() -> Self {
        RecursionParams {
            modes_by_rank: vec![128, 96, 80, 48],
            rho_live: 1.25 * 1.15 * 1.15,
            rho_check: 1.85,
            rho_spec: 2.0,
            rho_mid: 2.45,
            rho_quad: 1.3,
            rho_residual: 3.0,
            quad_nodes: 192,
            imk_tol: 1e-3,
            check_tuples: 3,
            section_modes: 128,
        }
    }
}

impl RecursionParams {
    pub fn modes(&self, rank: usize) -> usize {
        *self
            .modes_by_rank
            .get(rank - 1)
            .unwrap_or(self.modes_by_rank.last().unwrap())
    }

    fn spec_nodes(&self, rank: usize) -> usize {
        (3 * self.modes(rank)).div_ceil(2)
    }
}

/// What to compute: the full triangle to `max_k`, or only the chain needed
/// for `W_1` through order `w1_order`.
#[derive(Debug, Clone, Copy)]
pub enum ExpandScope {
    Full { max_k: i32 },
    StieltjesChain { w1_order: i32 },
    /// just enough of the triangle to produce the single term `(n, k)`
    Target { n: usize, k: i32 },
}

impl ExpandScope {
    fn bound(&self, n: usize) -> i32 {
        match *self {
            ExpandScope::Full { max_k } => max_k,
            ExpandScope::StieltjesChain { w1_order } => w1_order + 1 - n as i32,
            ExpandScope::Target { n: tn, k } => {
                if n <= tn {
                    k
                } else {
                    k - (n - tn) as i32
                }
            }
        }
    }

    fn max_k(&self) -> i32 {
        match *self {
            ExpandScope::Full { max_k } => max_k,
            ExpandScope::StieltjesChain { w1_order } => w1_order,
            ExpandScope::Target { k, .. } => k,
        }
    }
}

/// The computed family `{W_n^{k}}` plus residual metadata.
pub struct Expansion {
    pub eq: EquilibriumData,
    pub edge: EdgeData,
    pub beta: f64,
    pub spec: PotentialSpec,
    pub params: RecursionParams,
    pub max_k: i32,
    pub terms: BTreeMap<(usize, i32), CorrelatorTerm>,
    pub residuals: BTreeMap<(usize, i32), f64>,
}

impl Expansion {
    /// Stored term, if present.
    pub fn term(&self, n: usize, k: i32) -> Option<&CorrelatorTerm> {
        self.terms.get(&(n, k))
    }

    /// Structural zero: `W_n^{k} = 0` whenever `n > k + 2`.
    pub fn is_structural_zero(n: usize, k: i32) -> bool {
        (k + 2) < n as i32
    }

    /// `W_1^{k}` as a univariate series.
    pub fn w1_series(&self, k: i32) -> Option<SeriesFn> {
        self.term(1, k)
            .map(|t| SeriesFn::from_coeffs(self.eq.frame, t.tensor.data.clone()))
    }

    /// Evaluate `W_n^{k}` at complex points off the cut (zero when the term
    /// is structurally zero).
    pub fn eval_term(&self, n: usize, k: i32, xs: &[Complex64]) -> Result<Complex64> {
        if Self::is_structural_zero(n, k) {
            return Ok(ZERO);
        }
        match self.term(n, k) {
            Some(t) => t.eval_x(self.eq.frame, xs),
            None => Err(Error::MissingTerm(n, k)),
        }
    }
}

/// `W_1^{0}` from the closed-form first correction:
/// `K^{-1}{ -(1-2/beta)[dW_1^{-1}/dx + sum_hard 1/((a_t - a_-t)(x - a_t))] + N_{(V^1)'}(W_1^{-1}) }`.
pub fn w1_subleading(
    eq: &EquilibriumData,
    edge: &EdgeData,
    beta: f64,
    v1: Option<&Poly>,
    op: &OpParams,
) -> Result<SeriesFn> {
    let m = eq.w1m1.len().max(op.out_modes);
    let mut g = vec![ZERO; 2 * m];
    let dw = eq.w1m1.derivative(op.rho_quad)?;
    let fac = -(1.0 - 2.0 / beta);
    for (j, &c) in dw.coeffs.iter().enumerate() {
        if j < g.len() {
            g[j] += fac * c;
        }
    }
    // hard-edge poles: 1/(x - alpha_plus) has coefficients j/gamma,
    // 1/(x - alpha_minus) has (-1)^{j-1} j/gamma
    let gam = eq.frame.quarter_width;
    let edges = eq.edges;
    if edges.nature_plus == crate::potential::EdgeNature::Hard {
        let pref = fac / (edges.a_plus - edges.a_minus);
        for (j, item) in g.iter_mut().enumerate() {
            *item += pref * (j as f64 + 1.0) / gam;
        }
    }
    if edges.nature_minus == crate::potential::EdgeNature::Hard {
        let pref = fac / (edges.a_minus - edges.a_plus);
        for (j, item) in g.iter_mut().enumerate() {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            *item += pref * sign * (j as f64 + 1.0) / gam;
        }
    }
    let mut gs = SeriesFn::from_coeffs(eq.frame, g);
    if let Some(v1) = v1 {
        if !v1.is_zero() {
            let v1p = v1.derivative();
            let nterm = operators::apply_n(eq, edge, op, &|x| v1p.eval(x), &eq.w1m1)?;
            for (j, &c) in nterm.coeffs.iter().enumerate() {
                if j < gs.coeffs.len() {
                    gs.coeffs[j] += c;
                }
            }
        }
    }
    if gs.coeffs.iter().all(|c| c.norm() < 1e-300) {
        return Ok(SeriesFn::zero(eq.frame, m));
    }
    operators::apply_k_inverse(eq, edge, op, &gs)
}

struct ProdTerm {
    positions: Vec<usize>,
    f1: Tensor,
    f2: Tensor,
}

struct SpectatorPieces {
    wl: Tensor,
    wt: Tensor,
    dwt: Vec<Tensor>,
    l_spec: Vec<Complex64>,
    lp_spec: Vec<Complex64>,
    l_live: Vec<Complex64>,
    x_spec: Vec<Complex64>,
}

/// Grid evaluations of the pieces of one `E_{n0}^{k0}`; per-tuple columns are
/// assembled on demand so huge spectator grids can be processed in slabs.
struct EAssembly {
    ns: usize,
    m_s: usize,
    s_count: usize,
    n_live: usize,
    diag: Option<Tensor>,
    pot_ladder: Option<Tensor>,
    products: Vec<ProdTerm>,
    #[allow(dead_code)]
    diag_is_present: bool,
    beta_fac: f64,
    deriv: Option<Tensor>,
    spectator: Option<SpectatorPieces>,
    x_live: Vec<Complex64>,
    c_edge: f64,
    two_over_beta: f64,
}

impl EAssembly {
    /// Live column of `E` for the tuples in `range` (flat row-major indices).
    fn columns(&self, range: std::ops::Range<usize>) -> Vec<Vec<Complex64>> {
        let ns = self.ns;
        let m_s = self.m_s;
        let s_count = self.s_count;
        let n_live = self.n_live;
        let strides_s: Vec<usize> = {
            let mut s = vec![1usize; ns.max(1)];
            for a in (0..ns.saturating_sub(1)).rev() {
                s[a] = s[a + 1] * m_s;
            }
            s
        };
        let subset_index = |positions: &[usize], tuple: &[usize]| -> usize {
            let mut idx = 0usize;
            for &p in positions {
                idx = idx * m_s + tuple[p];
            }
            idx
        };
        range
            .into_par_iter()
            .map(|t| {
                let mut tuple = vec![0usize; ns];
                {
                    let mut rem = t;
                    for a in 0..ns {
                        tuple[a] = rem / strides_s[a];
                        rem %= strides_s[a];
                    }
                }
                let mut e = vec![ZERO; n_live];
                if let Some(d) = &self.diag {
                    for (u, ev) in e.iter_mut().enumerate() {
                        *ev += d.data[u * s_count + t];
                    }
                }
                if let Some(p) = &self.pot_ladder {
                    for (u, ev) in e.iter_mut().enumerate() {
                        *ev -= p.data[u * s_count + t];
                    }
                }
                for pt in &self.products {
                    let rest: Vec<usize> =
                        (0..ns).filter(|a| !pt.positions.contains(a)).collect();
                    let i1 = subset_index(&pt.positions, &tuple);
                    let i2 = subset_index(&rest, &tuple);
                    let w1 = m_s.pow(pt.positions.len() as u32);
                    let w2 = m_s.pow(rest.len() as u32);
                    for (u, ev) in e.iter_mut().enumerate() {
                        *ev += pt.f1.data[u * w1 + i1] * pt.f2.data[u * w2 + i2];
                    }
                }
                if let Some(d) = &self.deriv {
                    for (u, ev) in e.iter_mut().enumerate() {
                        *ev += self.beta_fac * d.data[u * s_count + t];
                    }
                }
                if let Some(sp) = &self.spectator {
                    for i in 0..ns {
                        let si = tuple[i];
                        let xi = sp.x_spec[si];
                        let others: Vec<usize> = (0..ns).filter(|a| *a != i).collect();
                        let iother = subset_index(&others, &tuple);
                        let wother = m_s.pow(others.len() as u32);
                        let wt = sp.wt.data[t];
                        let dwt = sp.dwt[i].data[t];
                        let li = sp.l_spec[si];
                        let lpi = sp.lp_spec[si];
                        for (u, ev) in e.iter_mut().enumerate() {
                            let dx = self.x_live[u] - xi;
                            let kern = 1.0 / dx + self.c_edge;
                            let dsq = 1.0 / (dx * dx);
                            let wl = sp.wl.data[u * wother + iother];
                            let inner = (lpi * kern + li * dsq) * wt + li * kern * dwt;
                            *ev += self.two_over_beta * (wl * dsq - inner / sp.l_live[u]);
                        }
                    }
                }
                e
            })
            .collect()
    }
}

struct Engine<'a> {
    eq: &'a EquilibriumData,
    edge: &'a EdgeData,
    beta: f64,
    spec: &'a PotentialSpec,
    params: &'a RecursionParams,
    /// quadrature nodes on the mid circle with contour weights
    quad: Vec<(Complex64, Complex64, Complex64)>, // (x, dxi/2pi i, z)
}

impl<'a> Engine<'a> {
    fn new(
        eq: &'a EquilibriumData,
        edge: &'a EdgeData,
        beta: f64,
        spec: &'a PotentialSpec,
        params: &'a RecursionParams,
    ) -> Result<Self> {
        // the outward-deformed Tricomi contour must not cross an S-zero
        let scale = eq
            .s_cheb
            .iter()
            .map(|s| s.abs())
            .fold(0.0f64, f64::max)
            .max(1e-30);
        for rho in [
            params.rho_live,
            params.rho_mid,
            0.5 * (params.rho_live + params.rho_mid),
        ] {
            for z in circle_nodes(rho, 64) {
                if eq.s_at_z(z).norm() < 0.02 * scale {
                    return Err(Error::ContourInvalid(format!(
                        "S-zero near |z| = {rho}; shrink rho_mid"
                    )));
                }
            }
        }
        let quad = operators::quad_nodes(eq, params.rho_mid, params.quad_nodes);
        Ok(Engine {
            eq,
            edge,
            beta,
            spec,
            params,
            quad,
        })
    }

    /// Live node set: quadrature circle first, then extraction nodes on the
    /// check radius (K^-1 targets and the Im K gate). The check radius sits
    /// between the residual contour and the spectator circle so truncated
    /// high-rank ingredients are still well resolved there.
    fn live_sets(&self, n0: usize) -> (Vec<Complex64>, usize) {
        let m_check = 2 * self.params.modes(n0);
        let mut live: Vec<Complex64> = self.quad.iter().map(|&(_, _, z)| z).collect();
        live.extend(circle_nodes(self.params.rho_check, m_check));
        (live, m_check)
    }

    /// Evaluate a stored term with axis 0 on the given z nodes and the other
    /// axes on the spectator nodes.
    fn eval_on_grid(
        &self,
        t: &CorrelatorTerm,
        live_z: &[Complex64],
        spec_z: &[Complex64],
    ) -> Tensor {
        let modes = t.tensor.dims[0];
        let live_mat = pow_matrix(live_z, modes);
        let mut cur = t.tensor.mode_apply(0, &live_mat, live_z.len());
        if t.n > 1 {
            let spec_mat = pow_matrix(spec_z, modes);
            for axis in 1..t.n {
                cur = cur.mode_apply(axis, &spec_mat, spec_z.len());
            }
        }
        cur
    }

    /// Diagonal merge `W(x, x, spectators)`: both leading axes contracted
    /// with the same live node (done first to bound intermediate sizes).
    fn eval_diag_on_grid(
        &self,
        t: &CorrelatorTerm,
        live_z: &[Complex64],
        spec_z: &[Complex64],
    ) -> Tensor {
        let modes = t.tensor.dims[0];
        let after: usize = t.tensor.dims[2..].iter().product();
        let rows: Vec<Vec<Complex64>> = live_z
            .par_iter()
            .map(|&z| {
                let v = pow_vector(z, modes);
                let mut row = vec![ZERO; after];
                for j1 in 0..modes {
                    for j2 in 0..modes {
                        let w = v[j1] * v[j2];
                        let irow = &t.tensor.data
                            [(j1 * modes + j2) * after..(j1 * modes + j2 + 1) * after];
                        for (o, &iv) in row.iter_mut().zip(irow.iter()) {
                            *o += w * iv;
                        }
                    }
                }
                row
            })
            .collect();
        let mut dims = vec![live_z.len()];
        dims.extend_from_slice(&t.tensor.dims[2..]);
        let mut cur = Tensor {
            dims,
            data: rows.into_iter().flatten().collect(),
        };
        if t.n > 2 {
            let spec_mat = pow_matrix(spec_z, modes);
            for axis in 1..t.n - 1 {
                cur = cur.mode_apply(axis, &spec_mat, spec_z.len());
            }
        }
        cur
    }

    /// Prepare the grid evaluations of every piece of `E_{n0}^{k0}` on
    /// (live nodes) x (spectator grid).
    ///
    /// The five-term sum: diagonal `W_{n0+1}^{k0}(x,x,x_I)`; minus the
    /// `N_{(V^k)'} W_{n0}^{k0+1-k}` ladder; the quadratic splitting over
    /// `J subset I`; `(1-2/beta) d/dx W_{n0}^{k0}`; and the spectator-pole
    /// derivative term. Soft-edge boundary terms are dropped: they are
    /// exponentially small and contribute at no polynomial order.
    fn prepare_e(
        &self,
        get: &dyn Fn(usize, i32) -> Option<&'a CorrelatorTerm>,
        n0: usize,
        k0: i32,
        live_z: &[Complex64],
        spec_z: &[Complex64],
    ) -> Result<EAssembly> {
        let ns = n0 - 1;
        let m_s = spec_z.len();
        let s_count = m_s.pow(ns as u32);
        let n_live = live_z.len();
        let gamma = self.eq.frame.quarter_width;

        let need = |n: usize, k: i32| -> Result<Option<&CorrelatorTerm>> {
            if Expansion::is_structural_zero(n, k) || k < -1 {
                return Ok(None);
            }
            match get(n, k) {
                Some(t) => Ok(Some(t)),
                None => Err(Error::MissingTerm(n, k)),
            }
        };

        let diag: Option<Tensor> = match need(n0 + 1, k0)? {
            Some(t) => Some(self.eval_diag_on_grid(t, live_z, spec_z)),
            None => None,
        };

        let mut pot_ladder: Option<Tensor> = None;
        for k in 1..=(k0 + 1).max(0) {
            let ku = k as usize;
            if ku >= self.spec.orders.len() {
                break;
            }
            let vkp = self.spec.orders[ku].derivative();
            if vkp.is_zero() {
                continue;
            }
            if let Some(t) = need(n0, k0 + 1 - k)? {
                let modes = t.tensor.dims[0];
                let nb = self.n_basis_at(&vkp, live_z, modes);
                let mut cur = t.tensor.mode_apply(0, &nb, n_live);
                if t.n > 1 {
                    let spec_mat = pow_matrix(spec_z, modes);
                    for axis in 1..t.n {
                        cur = cur.mode_apply(axis, &spec_mat, m_s);
                    }
                }
                pot_ladder = Some(match pot_ladder {
                    None => cur,
                    Some(mut acc) => {
                        for (a, b) in acc.data.iter_mut().zip(cur.data.iter()) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
        }

        let mut products: Vec<ProdTerm> = vec![];
        {
            let mut factor_cache: BTreeMap<(usize, i32), Tensor> = BTreeMap::new();
            let mut get_factor = |n: usize, k: i32| -> Result<Option<Tensor>> {
                if Expansion::is_structural_zero(n, k) || k < -1 {
                    return Ok(None);
                }
                if let Some(t) = factor_cache.get(&(n, k)) {
                    return Ok(Some(t.clone()));
                }
                let t = match get(n, k) {
                    Some(t) => t,
                    None => return Err(Error::MissingTerm(n, k)),
                };
                let e = self.eval_on_grid(t, live_z, spec_z);
                factor_cache.insert((n, k), e.clone());
                Ok(Some(e))
            };
            for mask in 0u32..(1u32 << ns) {
                let positions: Vec<usize> = (0..ns).filter(|a| mask & (1 << a) != 0).collect();
                let jn = positions.len();
                for k in 0..=k0.max(-1) {
                    let f1 = match get_factor(jn + 1, k)? {
                        Some(f) => f,
                        None => continue,
                    };
                    let f2 = match get_factor(n0 - jn, k0 - k)? {
                        Some(f) => f,
                        None => continue,
                    };
                    products.push(ProdTerm {
                        positions: positions.clone(),
                        f1,
                        f2,
                    });
                }
            }
        }

        let beta_fac = 1.0 - 2.0 / self.beta;
        let deriv: Option<Tensor> = if beta_fac != 0.0 {
            match need(n0, k0)? {
                Some(t) => {
                    let modes = t.tensor.dims[0];
                    let d = derivative_matrix(modes, gamma);
                    let dd = t.tensor.mode_apply(0, &d, modes);
                    let live_mat = pow_matrix(live_z, modes);
                    let mut cur = dd.mode_apply(0, &live_mat, n_live);
                    if t.n > 1 {
                        let spec_mat = pow_matrix(spec_z, modes);
                        for axis in 1..t.n {
                            cur = cur.mode_apply(axis, &spec_mat, m_s);
                        }
                    }
                    Some(cur)
                }
                None => None,
            }
        } else {
            None
        };

        let spectator: Option<SpectatorPieces> = if ns > 0 {
            match need(n0 - 1, k0)? {
                Some(t) => {
                    let modes = t.tensor.dims[0];
                    let wl = self.eval_on_grid(t, live_z, spec_z);
                    let spec_mat = pow_matrix(spec_z, modes);
                    let mut wt = t.tensor.clone();
                    for axis in 0..t.n {
                        wt = wt.mode_apply(axis, &spec_mat, m_s);
                    }
                    let d = derivative_matrix(modes, gamma);
                    let mut dwt = vec![];
                    for i in 0..ns {
                        let mut cur = t.tensor.mode_apply(i, &d, modes);
                        for axis in 0..t.n {
                            cur = cur.mode_apply(axis, &spec_mat, m_s);
                        }
                        dwt.push(cur);
                    }
                    let x_spec: Vec<Complex64> =
                        spec_z.iter().map(|&z| self.eq.frame.x_of_z(z)).collect();
                    let lp = self.edge.l_poly.derivative();
                    Some(SpectatorPieces {
                        wl,
                        wt,
                        dwt,
                        l_spec: x_spec.iter().map(|&x| self.edge.l_poly.eval(x)).collect(),
                        lp_spec: x_spec.iter().map(|&x| lp.eval(x)).collect(),
                        l_live: live_z
                            .iter()
                            .map(|&z| self.edge.l_poly.eval(self.eq.frame.x_of_z(z)))
                            .collect(),
                        x_spec,
                    })
                }
                None => None,
            }
        } else {
            None
        };

        let x_live: Vec<Complex64> = live_z.iter().map(|&z| self.eq.frame.x_of_z(z)).collect();
        Ok(EAssembly {
            ns,
            m_s,
            s_count,
            n_live,
            diag,
            pot_ladder,
            products,
            diag_is_present: false,
            beta_fac,
            deriv,
            spectator,
            x_live,
            c_edge: self.edge.c,
            two_over_beta: 2.0 / self.beta,
        })
    }

    /// `N_g` basis on nodes inside the outer contour, moved form:
    /// `N_g(f)(x) = g(x) f(x) + oint_outer (L(xi)/L(x))(1/(x-xi)+c) g f`.
    fn n_basis_at(&self, g: &Poly, znodes: &[Complex64], modes: usize) -> Vec<Complex64> {
        let outer = operators::quad_nodes(self.eq, 4.0, 256);
        let mut out = vec![ZERO; znodes.len() * modes];
        let pow_outer: Vec<Vec<Complex64>> = outer
            .iter()
            .map(|&(_, _, z)| pow_vector(z, modes))
            .collect();
        for (u, &zu) in znodes.iter().enumerate() {
            let xu = self.eq.frame.x_of_z(zu);
            let lu = self.edge.l_poly.eval(xu);
            let vu = pow_vector(zu, modes);
            for j in 0..modes {
                let mut acc = g.eval(xu) * vu[j];
                for (w, &(xi, wgt, _)) in outer.iter().enumerate() {
                    acc += wgt * self.edge.l_poly.eval(xi) / lu
                        * (1.0 / (xu - xi) + self.edge.c)
                        * g.eval(xi)
                        * pow_outer[w][j];
                }
                out[u * modes + j] = acc;
            }
        }
        out
    }

    /// Outward-deformed Tricomi on per-tuple live columns:
    /// `K^-1 E (x_u) = -E(x_u)/(2y(x_u)) + (1/sigma~(x_u)) oint_mid ...`,
    /// then `W = -K^-1 E` re-encoded from the check nodes.
    fn kinv_columns(
        &self,
        columns: &[Vec<Complex64>],
        check_count: usize,
        modes: usize,
    ) -> Tensor {
        let m_q = self.quad.len();
        let targets = circle_nodes(self.params.rho_check, check_count);
        let mut kernel = vec![ZERO; check_count * m_q];
        for (u, &zu) in targets.iter().enumerate() {
            let xu = self.eq.frame.x_of_z(zu);
            let stx = self.eq.frame.sigma_tilde_z(zu);
            for (w, &(xi, wgt, zw)) in self.quad.iter().enumerate() {
                let st = self.eq.frame.sigma_tilde_z(zw);
                kernel[u * m_q + w] = wgt * st / ((xi - xu) * 2.0 * self.eq.y_z(zw) * stx);
            }
        }
        let y_t: Vec<Complex64> = targets.iter().map(|&z| self.eq.y_z(z)).collect();
        let dft = dft_matrix(self.params.rho_check, check_count, modes);
        let s_count = columns.len();
        let mut result = Tensor::zeros(vec![modes, s_count]);
        let vals: Vec<Vec<Complex64>> = columns
            .par_iter()
            .map(|col| {
                let mut at_targets = vec![ZERO; check_count];
                for (u, t) in at_targets.iter_mut().enumerate() {
                    let mut acc = -col[m_q + u] / (2.0 * y_t[u]);
                    for (w, &k) in kernel[u * m_q..(u + 1) * m_q].iter().enumerate() {
                        acc += k * col[w];
                    }
                    *t = -acc; // W = -K^{-1} E
                }
                matmul(&dft, modes, check_count, &at_targets, 1)
            })
            .collect();
        for (t, v) in vals.iter().enumerate() {
            for j in 0..modes {
                result.data[j * s_count + t] = v[j];
            }
        }
        result
    }
}

/// Compute `W_{n0}^{k0+1} = -K^{-1} E_{n0}^{k0}` from stored terms.
fn next_order(
    engine: &Engine,
    terms: &BTreeMap<(usize, i32), CorrelatorTerm>,
    n0: usize,
    k0: i32,
) -> Result<CorrelatorTerm> {
    let k_new = k0 + 1;
    if Expansion::is_structural_zero(n0, k_new) {
        return Ok(CorrelatorTerm {
            n: n0,
            k: k_new,
            tensor: Tensor::zeros(vec![engine.params.modes(n0); n0]),
            asymmetry: 0.0,
            imk_residual: 0.0,
        });
    }
    let ns = n0 - 1;
    let modes = engine.params.modes(n0);
    let m_s = engine.params.spec_nodes(n0);
    let spec_z = circle_nodes(engine.params.rho_spec, m_s);
    let (live_z, m_check) = engine.live_sets(n0);
    let get = |n: usize, k: i32| terms.get(&(n, k));
    let assembly = engine.prepare_e(&get, n0, k0, &live_z, &spec_z)?;
    let s_count = assembly.s_count;
    let m_q = engine.quad.len();
    let check_z = &live_z[m_q..];
    let spec_dft = dft_matrix(engine.params.rho_spec, m_s, modes);

    // process the spectator grid in slabs over the first spectator axis,
    // transforming the trailing axes to coefficient space slab by slab
    let slab_size = if ns == 0 { 1 } else { m_s.pow(ns as u32 - 1) };
    let n_slabs = s_count / slab_size;
    let trailing_modes = if ns == 0 { 1 } else { modes.pow(ns as u32 - 1) };
    let mut staged = Tensor::zeros(if ns == 0 {
        vec![modes]
    } else {
        let mut d = vec![modes, m_s];
        d.extend(vec![modes; ns - 1]);
        d
    });
    // Im K gate bookkeeping: sampled tuple -> (W coefficients, E at checks)
    let check_ts: Vec<usize> = (0..engine.params.check_tuples.min(s_count))
        .map(|c| (c * 2654435761) % s_count)
        .collect();
    let mut gate_samples: Vec<(Vec<Complex64>, Vec<Complex64>)> = vec![];
    let mut value_scale = 0.0f64;
    for slab in 0..n_slabs {
        let range = slab * slab_size..(slab + 1) * slab_size;
        let columns = assembly.columns(range.clone());
        for col in &columns {
            for v in col {
                value_scale = value_scale.max(v.norm());
            }
        }
        let coeff_nodes = engine.kinv_columns(&columns, m_check, modes); // (modes, slab_size)
        for (ci, &t) in check_ts.iter().enumerate() {
            if range.contains(&t) {
                let local = t - range.start;
                let w: Vec<Complex64> = (0..modes)
                    .map(|j| coeff_nodes.data[j * slab_size + local])
                    .collect();
                let e: Vec<Complex64> = columns[local][m_q..].to_vec();
                let _ = ci;
                gate_samples.push((w, e));
            }
        }
        if ns == 0 {
            staged.data.copy_from_slice(&coeff_nodes.data);
        } else {
            // DFT trailing spectator axes of this slab, then place at s1 = slab
            let mut dims = vec![modes];
            dims.extend(vec![m_s; ns - 1]);
            let mut cur = Tensor {
                dims,
                data: coeff_nodes.data,
            };
            for axis in 1..ns {
                cur = cur.mode_apply(axis, &spec_dft, modes);
            }
            // staged[j, slab, jrest] = cur[j, jrest]
            for j in 0..modes {
                let src = &cur.data[j * trailing_modes..(j + 1) * trailing_modes];
                let dst_base = (j * m_s + slab) * trailing_modes;
                staged.data[dst_base..dst_base + trailing_modes].copy_from_slice(src);
            }
        }
    }

    // Im K gate: |K W + E| / |E| at the check nodes
    let op = OpParams {
        rho_quad: engine.params.rho_quad,
        rho_eval: engine.params.rho_check,
        rho_outer: 4.0,
        quad_nodes: 256,
        out_modes: modes,
        kinv_tol: 1e-7,
    };
    let mut imk = 0.0f64;
    for (w_coeffs, e_checks) in &gate_samples {
        let w_series = SeriesFn::from_coeffs(engine.eq.frame, w_coeffs.clone());
        let kvals = operators::apply_k_nodes(engine.eq, engine.edge, &op, check_z, &|z| {
            w_series.eval_z(z)
        })?;
        let mut num = 0.0f64;
        let mut den = 1e-300f64;
        for (kv, ev) in kvals.iter().zip(e_checks.iter()) {
            num = num.max((kv + ev).norm());
            den = den.max(ev.norm());
        }
        imk = imk.max(num / den.max(1e-8 * value_scale));
    }
    if imk > engine.params.imk_tol {
        return Err(Error::ImKViolation {
            n: n0,
            k: k_new,
            residual: imk,
        });
    }

    // remaining spectator axis to coefficient space
    let mut cur = staged;
    if ns > 0 {
        cur = cur.mode_apply(1, &spec_dft, modes);
    }
    // wipe modes that sit below the DFT roundoff amplification floor
    let eps = 1e-13 * value_scale;
    if eps > 0.0 {
        let strides = strides_of(&cur.dims);
        let rc = engine.params.rho_check;
        let rs = engine.params.rho_spec;
        for (flat, v) in cur.data.iter_mut().enumerate() {
            let mut amp = 1.0f64;
            let mut rem = flat;
            for (a, &st) in strides.iter().enumerate() {
                let j = rem / st;
                rem %= st;
                amp *= if a == 0 {
                    rc.powi(j as i32 + 1)
                } else {
                    rs.powi(j as i32 + 1)
                };
                if amp > 1e280 {
                    break;
                }
            }
            if v.norm() < eps * amp {
                *v = ZERO;
            }
        }
    }
    let (sym, asym) = cur.symmetrize();
    Ok(CorrelatorTerm {
        n: n0,
        k: k_new,
        tensor: sym,
        asymmetry: asym,
        imk_residual: imk,
    })
}

/// Run the triangular recursion (ascending order, descending rank inside
/// each column).
pub fn expand(
    eq: &EquilibriumData,
    edge: &EdgeData,
    spec: &PotentialSpec,
    beta: f64,
    scope: ExpandScope,
    params: &RecursionParams,
) -> Result<Expansion> {
    let engine = Engine::new(eq, edge, beta, spec, params)?;
    let mut terms: BTreeMap<(usize, i32), CorrelatorTerm> = BTreeMap::new();
    let m1 = params.modes(1);
    let mut w0 = eq.w1m1.coeffs.clone();
    w0.resize(m1, ZERO);
    terms.insert(
        (1, -1),
        CorrelatorTerm {
            n: 1,
            k: -1,
            tensor: Tensor {
                dims: vec![m1],
                data: w0,
            },
            asymmetry: 0.0,
            imk_residual: 0.0,
        },
    );
    let max_k = scope.max_k();
    let op = OpParams {
        rho_quad: params.rho_quad,
        rho_eval: params.rho_live,
        rho_outer: 4.0,
        quad_nodes: 256,
        out_modes: m1,
        kinv_tol: 1e-6,
    };
    for k0 in -1..max_k {
        let k_new = k0 + 1;
        for n0 in (1..=(k0 + 3) as usize).rev() {
            if k_new > scope.bound(n0) || Expansion::is_structural_zero(n0, k_new) {
                continue;
            }
            let term = if n0 == 1 && k0 == -1 {
                // the generic E misses the hard-edge poles and the V^{1}
                // ladder at this order; use the closed first correction
                let w10 = w1_subleading(eq, edge, beta, spec.orders.get(1), &op)?;
                let mut coeffs = w10.coeffs;
                coeffs.resize(m1, ZERO);
                CorrelatorTerm {
                    n: 1,
                    k: 0,
                    tensor: Tensor {
                        dims: vec![m1],
                        data: coeffs,
                    },
                    asymmetry: 0.0,
                    imk_residual: 0.0,
                }
            } else {
                next_order(&engine, &terms, n0, k0)?
            };
            terms.insert((n0, k_new), term);
        }
    }
    let mut expn = Expansion {
        eq: eq.clone(),
        edge: edge.clone(),
        beta,
        spec: spec.clone(),
        params: params.clone(),
        max_k,
        terms,
        residuals: BTreeMap::new(),
    };
    if matches!(scope, ExpandScope::Full { .. }) {
        let keys: Vec<(usize, i32)> = expn.terms.keys().cloned().collect();
        for (n, k) in keys {
            if n == 1 && k == -1 {
                continue;
            }
            let r = loop_residual(&expn, n, k)?;
            expn.residuals.insert((n, k), r);
        }
    }
    Ok(expn)
}

/// Values of `W_{n'}^{k'}` at a fixed spectator tuple, either read from a
/// stored tensor or solved on demand.
///
/// Stored tensors of rank <= 3 are resolved well enough to evaluate anywhere
/// on and outside the residual contour; everything else (rank >= 4, and the
/// `k = max_k + 1` orders entering order-`max_k` residuals) is recomputed as
/// a univariate section at the tuple, at full mode count, by chaining the
/// single-tuple `-K^{-1} E` solves upward in the order.
struct SectionCtx<'a> {
    engine: Engine<'a>,
    terms: &'a BTreeMap<(usize, i32), CorrelatorTerm>,
    max_k: i32,
}

impl<'a> SectionCtx<'a> {
    fn use_stored(&self, n: usize, k: i32) -> bool {
        k <= self.max_k && n <= 3
    }

    /// Live series of `W_n^{k}(x, tuple)`; `None` for structural zeros.
    fn section(
        &self,
        n: usize,
        k: i32,
        tuple_z: &[Complex64],
        depth: usize,
    ) -> Result<Option<SeriesFn>> {
        if Expansion::is_structural_zero(n, k) || k < -1 {
            return Ok(None);
        }
        if self.use_stored(n, k) {
            let t = self.terms.get(&(n, k)).ok_or(Error::MissingTerm(n, k))?;
            return Ok(Some(t.section(self.engine.eq.frame, &tuple_z[..n - 1])));
        }
        if depth > 3 {
            return Err(Error::QuadratureFailure(
                "section solve recursion too deep".into(),
            ));
        }
        // chain the same-rank solves upward from the first nonzero order
        let mut chain: BTreeMap<i32, SeriesFn> = BTreeMap::new();
        let k_first = if n <= 3 {
            // lower orders of this rank are stored and trustworthy
            self.max_k + 1
        } else {
            n as i32 - 2
        };
        for kk in k_first..=k {
            let sec = self.solve_one(n, kk, tuple_z, &chain, depth)?;
            chain.insert(kk, sec);
        }
        Ok(chain.remove(&k))
    }

    /// Single `-K^{-1} E_{n0}^{k0}` solve at one tuple, `k_new = k0 + 1`.
    fn solve_one(
        &self,
        n0: usize,
        k_new: i32,
        tuple_z: &[Complex64],
        chain: &BTreeMap<i32, SeriesFn>,
        depth: usize,
    ) -> Result<SeriesFn> {
        let k0 = k_new - 1;
        let params = self.engine.params;
        let modes = params.section_modes;
        let m_check = 2 * modes;
        let mut live_z: Vec<Complex64> =
            self.engine.quad.iter().map(|&(_, _, z)| z).collect();
        live_z.extend(circle_nodes(params.rho_check, m_check));
        let e = self.e_point(n0, k0, &live_z, tuple_z, chain, depth)?;
        let columns = vec![e];
        let coeff = self.engine.kinv_columns(&columns, m_check, modes);
        Ok(SeriesFn::from_coeffs(self.engine.eq.frame, coeff.data))
    }

    /// `E_{n0}^{k0}(x, tuple)` at the given live nodes, from stored tensors,
    /// previously chained same-rank sections, and nested diagonal solves.
    fn e_point(
        &self,
        n0: usize,
        k0: i32,
        live_z: &[Complex64],
        tuple_z: &[Complex64],
        chain: &BTreeMap<i32, SeriesFn>,
        depth: usize,
    ) -> Result<Vec<Complex64>> {
        let ns = n0 - 1;
        let engine = &self.engine;
        let frame = engine.eq.frame;
        let gamma = frame.quarter_width;
        let n_live = live_z.len();
        let x_live: Vec<Complex64> = live_z.iter().map(|&z| frame.x_of_z(z)).collect();
        let mut e = vec![ZERO; n_live];

        // live series of a same-rank term at this tuple
        let rank_section = |kk: i32| -> Result<Option<SeriesFn>> {
            if Expansion::is_structural_zero(n0, kk) || kk < -1 {
                return Ok(None);
            }
            if let Some(sec) = chain.get(&kk) {
                return Ok(Some(sec.clone()));
            }
            if self.use_stored(n0, kk) {
                let t = self
                    .terms
                    .get(&(n0, kk))
                    .ok_or(Error::MissingTerm(n0, kk))?;
                return Ok(Some(t.section(frame, tuple_z)));
            }
            Err(Error::MissingTerm(n0, kk))
        };

        // diagonal W_{n0+1}^{k0}(x, x, tuple)
        if !Expansion::is_structural_zero(n0 + 1, k0) && k0 >= -1 {
            if self.use_stored(n0 + 1, k0) {
                let t = self
                    .terms
                    .get(&(n0 + 1, k0))
                    .ok_or(Error::MissingTerm(n0 + 1, k0))?;
                for (u, &zu) in live_z.iter().enumerate() {
                    let mut zs = vec![zu, zu];
                    zs.extend_from_slice(tuple_z);
                    e[u] += t.eval_z(&zs);
                }
            } else {
                for (u, &zu) in live_z.iter().enumerate() {
                    let mut sub = vec![zu];
                    sub.extend_from_slice(tuple_z);
                    if let Some(sec) = self.section(n0 + 1, k0, &sub, depth + 1)? {
                        e[u] += sec.eval_z(zu);
                    }
                }
            }
        }

        // minus the N ladder over higher potential orders
        for kv in 1..=(k0 + 1).max(0) {
            let ku = kv as usize;
            if ku >= engine.spec.orders.len() {
                break;
            }
            let vkp = engine.spec.orders[ku].derivative();
            if vkp.is_zero() {
                continue;
            }
            if let Some(sec) = rank_section(k0 + 1 - kv)? {
                let nb = engine.n_basis_at(&vkp, live_z, sec.len());
                for (u, ev) in e.iter_mut().enumerate() {
                    let mut acc = ZERO;
                    for (j, &c) in sec.coeffs.iter().enumerate() {
                        acc += nb[u * sec.len() + j] * c;
                    }
                    *ev -= acc;
                }
            }
        }

        // quadratic splitting
        for mask in 0u32..(1u32 << ns) {
            let pos: Vec<usize> = (0..ns).filter(|a| mask & (1 << a) != 0).collect();
            let rest: Vec<usize> = (0..ns).filter(|a| mask & (1 << a) == 0).collect();
            for k in 0..=k0.max(-1) {
                let (n1, k1) = (pos.len() + 1, k);
                let (n2, k2) = (n0 - pos.len(), k0 - k);
                let v1 = self.factor_values(n1, k1, &pos, tuple_z, live_z, chain)?;
                let v1 = match v1 {
                    Some(v) => v,
                    None => continue,
                };
                let v2 = self.factor_values(n2, k2, &rest, tuple_z, live_z, chain)?;
                let v2 = match v2 {
                    Some(v) => v,
                    None => continue,
                };
                for (u, ev) in e.iter_mut().enumerate() {
                    *ev += v1[u] * v2[u];
                }
            }
        }

        // (1 - 2/beta) d/dx of the same-rank term
        let beta_fac = 1.0 - 2.0 / engine.beta;
        if beta_fac != 0.0 {
            if let Some(sec) = rank_section(k0)? {
                let d = derivative_matrix(sec.len(), gamma);
                let dc = matmul(&d, sec.len(), sec.len(), &sec.coeffs, 1);
                let ds = SeriesFn::from_coeffs(frame, dc);
                for (u, ev) in e.iter_mut().enumerate() {
                    *ev += beta_fac * ds.eval_z(live_z[u]);
                }
            }
        }

        // spectator-pole derivative term (rank n0 - 1 <= 3, always stored)
        if ns > 0 && !Expansion::is_structural_zero(n0 - 1, k0) && k0 >= -1 {
            let t = self
                .terms
                .get(&(n0 - 1, k0))
                .ok_or(Error::MissingTerm(n0 - 1, k0))?;
            let modes = t.tensor.dims[0];
            let d = derivative_matrix(modes, gamma);
            let lp = engine.edge.l_poly.derivative();
            let x_spec: Vec<Complex64> = tuple_z.iter().map(|&z| frame.x_of_z(z)).collect();
            let tuple_vecs: Vec<Vec<Complex64>> =
                tuple_z.iter().map(|&z| pow_vector(z, modes)).collect();
            let wt = if t.n > 0 {
                t.tensor.eval_vectors(&tuple_vecs)
            } else {
                ZERO
            };
            for i in 0..ns {
                let xi = x_spec[i];
                let li = engine.edge.l_poly.eval(xi);
                let lpi = lp.eval(xi);
                let dwt = {
                    let dd = t.tensor.mode_apply(i, &d, modes);
                    dd.eval_vectors(&tuple_vecs)
                };
                let others: Vec<Complex64> = (0..ns)
                    .filter(|a| *a != i)
                    .map(|a| tuple_z[a])
                    .collect();
                let wl_sec = t.section(frame, &others);
                for (u, ev) in e.iter_mut().enumerate() {
                    let dx = x_live[u] - xi;
                    let kern = 1.0 / dx + engine.edge.c;
                    let dsq = 1.0 / (dx * dx);
                    let wl = wl_sec.eval_z(live_z[u]);
                    let lu = engine.edge.l_poly.eval(x_live[u]);
                    let inner = (lpi * kern + li * dsq) * wt + li * kern * dwt;
                    *ev += engine.two_over_beta() * (wl * dsq - inner / lu);
                }
            }
        }
        Ok(e)
    }

    /// Values over the live nodes of `W_{n1}^{k1}(x, tuple[positions])`.
    fn factor_values(
        &self,
        n1: usize,
        k1: i32,
        positions: &[usize],
        tuple_z: &[Complex64],
        live_z: &[Complex64],
        chain: &BTreeMap<i32, SeriesFn>,
    ) -> Result<Option<Vec<Complex64>>> {
        if Expansion::is_structural_zero(n1, k1) || k1 < -1 {
            return Ok(None);
        }
        let sub: Vec<Complex64> = positions.iter().map(|&p| tuple_z[p]).collect();
        let sec = if sub.len() == tuple_z.len() {
            // same-rank full-tuple factor: may come from the chain
            if let Some(sec) = chain.get(&k1) {
                sec.clone()
            } else if self.use_stored(n1, k1) {
                self.terms
                    .get(&(n1, k1))
                    .ok_or(Error::MissingTerm(n1, k1))?
                    .section(self.engine.eq.frame, &sub)
            } else {
                return Err(Error::MissingTerm(n1, k1));
            }
        } else {
            // strictly lower rank: always a stored tensor
            self.terms
                .get(&(n1, k1))
                .ok_or(Error::MissingTerm(n1, k1))?
                .section(self.engine.eq.frame, &sub)
        };
        Ok(Some(live_z.iter().map(|&z| sec.eval_z(z)).collect()))
    }
}

impl<'a> Engine<'a> {
    fn two_over_beta(&self) -> f64 {
        2.0 / self.beta
    }
}

/// Sup of the order-`N^{-k}` coefficient of the first-version rank-`n` loop
/// equation over `Gamma_2` nodes and sampled spectator tuples. Terms absent
/// for structural reasons count as zero; high-rank and order-`k+1` values are
/// recomputed as sections at each tuple.
pub fn loop_residual(expn: &Expansion, n: usize, k: i32) -> Result<f64> {
    let eq = &expn.eq;
    let params = &expn.params;
    let frame = eq.frame;
    let (am, ap) = (eq.edges.a_minus, eq.edges.a_plus);
    let beta_fac = 1.0 - 2.0 / expn.beta;
    let gamma = frame.quarter_width;

    let engine = Engine::new(eq, &expn.edge, expn.beta, &expn.spec, params)?;
    let ctx = SectionCtx {
        engine,
        terms: &expn.terms,
        max_k: expn.max_k,
    };
    let live = circle_nodes(params.rho_live, 24);
    let quad = operators::quad_nodes(eq, params.rho_residual, params.quad_nodes);

    let ns = n - 1;
    let n_tuples = if ns == 0 { 1 } else { params.check_tuples.max(1) };
    let mut worst = 0.0f64;
    for tix in 0..n_tuples {
        let tuple_z: Vec<Complex64> = (0..ns)
            .map(|a| {
                let th = 2.0 * std::f64::consts::PI
                    * (0.17 + 0.61 * (tix as f64) + 0.37 * (a as f64));
                Complex64::from_polar(params.rho_spec, th)
            })
            .collect();
        let tuple_x: Vec<Complex64> = tuple_z.iter().map(|&z| frame.x_of_z(z)).collect();

        // sections of this rank at the full tuple, for every order that the
        // order-k residual can touch
        let mut rank_secs: BTreeMap<i32, Option<SeriesFn>> = BTreeMap::new();
        for kk in -1..=(k + 1) {
            rank_secs.insert(kk, ctx.section(n, kk, &tuple_z, 0)?);
        }
        // live sections of stored terms at subsets of this tuple, cached by
        // (n, k, subset mask)
        let mut stored_secs: BTreeMap<(usize, i32, u32), Option<SeriesFn>> = BTreeMap::new();
        let mut stored_section = |nn: usize, kk: i32, mask: u32| -> Option<SeriesFn> {
            stored_secs
                .entry((nn, kk, mask))
                .or_insert_with(|| {
                    if Expansion::is_structural_zero(nn, kk) || kk < -1 {
                        return None;
                    }
                    let t = expn.term(nn, kk)?;
                    let sub: Vec<Complex64> = (0..ns)
                        .filter(|a| mask & (1 << a) != 0)
                        .map(|a| tuple_z[a])
                        .collect();
                    Some(t.section(frame, &sub))
                })
                .clone()
        };
        // diagonal-merge matrix of the stored (n+1, k) term: spectator axes
        // contracted, leading two axes kept
        let diag_mat: Option<Tensor> = if !Expansion::is_structural_zero(n + 1, k)
            && k >= -1
            && ctx.use_stored(n + 1, k)
        {
            expn.term(n + 1, k).map(|t| {
                let modes = t.tensor.dims[0];
                let mut cur = t.tensor.clone();
                for (a, &z) in tuple_z.iter().enumerate().rev() {
                    let axis = 2 + a;
                    let v = pow_vector(z, modes);
                    cur = cur.mode_apply(axis, &v, 1);
                    cur.dims.pop();
                }
                cur
            })
        } else {
            None
        };
        let full_mask: u32 = if ns == 0 { 0 } else { (1 << ns) - 1 };
        let wt_val: Complex64 = match expn.term(n - 1, k) {
            Some(t) if !Expansion::is_structural_zero(n - 1, k) && ns > 0 => {
                t.eval_z(&tuple_z)
            }
            _ => ZERO,
        };
        let dwt_vals: Vec<Complex64> = (0..ns)
            .map(|i| match expn.term(n - 1, k) {
                Some(t) if !Expansion::is_structural_zero(n - 1, k) => {
                    let modes = t.tensor.dims[0];
                    let d = derivative_matrix(modes, gamma);
                    let dd = t.tensor.mode_apply(i, &d, modes);
                    let vectors: Vec<Vec<Complex64>> =
                        tuple_z.iter().map(|&z| pow_vector(z, modes)).collect();
                    dd.eval_vectors(&vectors)
                }
                _ => ZERO,
            })
            .collect();

        for &zu in &live {
            let x = frame.x_of_z(zu);
            let mut r = ZERO;
            // diagonal W_{n+1}^{k}(x,x,x_I)
            if !Expansion::is_structural_zero(n + 1, k) && k >= -1 {
                if let Some(dm) = &diag_mat {
                    let modes = dm.dims[0];
                    let v = pow_vector(zu, modes);
                    let mut acc = ZERO;
                    for j1 in 0..modes {
                        let row = &dm.data[j1 * modes..(j1 + 1) * modes];
                        let mut inner = ZERO;
                        for (x, w) in row.iter().zip(v.iter()) {
                            inner += x * w;
                        }
                        acc += v[j1] * inner;
                    }
                    r += acc;
                } else if !ctx.use_stored(n + 1, k) {
                    let mut sub = vec![zu];
                    sub.extend_from_slice(&tuple_z);
                    if let Some(sec) = ctx.section(n + 1, k, &sub, 1)? {
                        r += sec.eval_z(zu);
                    }
                }
            }
            // quadratic splitting
            for mask in 0u32..(1u32 << ns) {
                let pos: Vec<usize> = (0..ns).filter(|a| mask & (1 << a) != 0).collect();
                let rest: Vec<usize> = (0..ns).filter(|a| mask & (1 << a) == 0).collect();
                for k1 in -1..=(k + 1) {
                    let k2 = k - k1;
                    let (n1, n2) = (pos.len() + 1, rest.len() + 1);
                    if Expansion::is_structural_zero(n1, k1)
                        || Expansion::is_structural_zero(n2, k2)
                        || k2 < -1
                    {
                        continue;
                    }
                    let mask_of = |subset: &[usize]| -> u32 {
                        subset.iter().fold(0u32, |m, &a| m | (1 << a))
                    };
                    let mut value = |nn: usize, kk: i32, subset: &[usize]| -> Complex64 {
                        if nn == n && subset.len() == ns {
                            rank_secs
                                .get(&kk)
                                .and_then(|o| o.as_ref())
                                .map(|s| s.eval_z(zu))
                                .unwrap_or(ZERO)
                        } else {
                            stored_section(nn, kk, mask_of(subset))
                                .map(|s| s.eval_z(zu))
                                .unwrap_or(ZERO)
                        }
                    };
                    let v1 = value(n1, k1, &pos);
                    let v2 = value(n2, k2, &rest);
                    r += v1 * v2;
                }
            }
            // (1 - 2/beta) d/dx W_n^{k}
            if beta_fac != 0.0 {
                if let Some(Some(sec)) = rank_secs.get(&k) {
                    let d = derivative_matrix(sec.len(), gamma);
                    let dc = matmul(&d, sec.len(), sec.len(), &sec.coeffs, 1);
                    r += beta_fac * SeriesFn::from_coeffs(frame, dc).eval_z(zu);
                }
            }
            // rank-1 interval pole terms
            if n == 1 {
                let pole = 1.0 / ((x - am) * (x - ap));
                if k == -1 {
                    r += beta_fac * pole;
                }
                if k == -2 {
                    r -= pole;
                }
            }
            // potential ladder, contour deformed outward past x (picks up
            // the residue (V^m)'(x) W_n^{j}(x, x_I))
            for m in 0..expn.spec.orders.len() {
                let j = k + 1 - m as i32;
                if Expansion::is_structural_zero(n, j) || j < -1 {
                    continue;
                }
                let vmp = expn.spec.orders[m].derivative();
                if vmp.is_zero() {
                    continue;
                }
                let sec = match rank_secs.get(&j).and_then(|o| o.as_ref()) {
                    Some(s) => s,
                    None => continue,
                };
                r -= vmp.eval(x) * sec.eval_z(zu);
                let denom = (x - am) * (x - ap);
                let mut integral = ZERO;
                for &(xi, w, zw) in &quad {
                    integral += w / (x - xi) * ((xi - am) * (xi - ap)) / denom
                        * vmp.eval(xi)
                        * sec.eval_z(zw);
                }
                r -= integral;
            }
            // spectator term (rank n-1 <= 3: stored)
            if ns > 0 {
                let two_over_beta = 2.0 / expn.beta;
                for i in 0..ns {
                    let xi = tuple_x[i];
                    let b = ((xi - am) * (xi - ap)) / ((x - am) * (x - ap));
                    let bp = (2.0 * xi - am - ap) / ((x - am) * (x - ap));
                    let wl = stored_section(n - 1, k, full_mask & !(1 << i))
                        .map(|s| s.eval_z(zu))
                        .unwrap_or(ZERO);
                    let wt = wt_val;
                    let dwt = dwt_vals[i];
                    let dx = x - xi;
                    r += two_over_beta
                        * ((-bp * wt - b * dwt) / dx + (wl - b * wt) / (dx * dx));
                }
            }
            worst = worst.max(r.norm());
        }
    }
    Ok(worst)
}

/// Beta decomposition
/// `W_n^{k} = sum_g (beta/2)^{1-g-n} (1-2/beta)^{k+2-2g-n} W_n^{(g;l)}`,
/// solved pointwise in the coefficient tensors from expansions at the sample
/// betas.
pub struct BetaSlice {
    pub n: usize,
    pub k: i32,
    /// `(g, l = k+2-2g-n, tensor)`
    pub parts: Vec<(usize, i32, Tensor)>,
}

impl BetaSlice {
    /// Reassemble `W_n^{k}` at an arbitrary beta.
    pub fn reassemble(&self, beta: f64) -> Tensor {
        let mut out = Tensor::zeros(self.parts[0].2.dims.clone());
        for (g, l, t) in &self.parts {
            let w = (beta / 2.0).powi(1 - *g as i32 - self.n as i32)
                * (1.0 - 2.0 / beta).powi(*l);
            for (o, &v) in out.data.iter_mut().zip(t.data.iter()) {
                *o += w * v;
            }
        }
        out
    }
}

pub fn beta_decompose(
    eq: &EquilibriumData,
    edge: &EdgeData,
    spec: &PotentialSpec,
    params: &RecursionParams,
    n: usize,
    k: i32,
    betas: &[f64],
) -> Result<BetaSlice> {
    if spec.orders.len() > 1 {
        return Err(Error::Config(
            "beta decomposition requires an N-independent potential".into(),
        ));
    }
    let g_count = ((k - n as i32 + 2) / 2 + 1).max(0) as usize;
    if betas.len() < g_count {
        return Err(Error::SingularSystem);
    }
    let mut tensors = vec![];
    for &b in betas {
        let e = expand(eq, edge, spec, b, ExpandScope::Target { n, k }, params)?;
        let t = e
            .term(n, k)
            .ok_or(Error::MissingTerm(n, k))?
            .tensor
            .clone();
        tensors.push(t);
    }
    let rows = betas.len();
    let mut a = vec![vec![0.0f64; g_count]; rows];
    for (r, &b) in betas.iter().enumerate() {
        for g in 0..g_count {
            let l = k + 2 - 2 * g as i32 - n as i32;
            a[r][g] = (b / 2.0).powi(1 - g as i32 - n as i32) * (1.0 - 2.0 / b).powi(l);
        }
    }
    // normal equations (small system, generic samples keep it regular)
    let mut ata = vec![vec![0.0f64; g_count]; g_count];
    for i in 0..g_count {
        for j in 0..g_count {
            ata[i][j] = (0..rows).map(|r| a[r][i] * a[r][j]).sum();
        }
    }
    let dims = tensors[0].dims.clone();
    let len = tensors[0].data.len();
    let mut parts: Vec<(usize, i32, Tensor)> = (0..g_count)
        .map(|g| {
            (
                g,
                k + 2 - 2 * g as i32 - n as i32,
                Tensor::zeros(dims.clone()),
            )
        })
        .collect();
    for idx in 0..len {
        let mut rhs = vec![ZERO; g_count];
        for (r, t) in tensors.iter().enumerate() {
            for (g, item) in rhs.iter_mut().enumerate() {
                *item += a[r][g] * t.data[idx];
            }
        }
        let sol = solve_complex(&ata, &rhs).ok_or(Error::SingularSystem)?;
        for (g, s) in sol.into_iter().enumerate() {
            parts[g].2.data[idx] = s;
        }
    }
    Ok(BetaSlice { n, k, parts })
}

fn solve_complex(a: &[Vec<f64>], b: &[Complex64]) -> Option<Vec<Complex64>> {
    let n = b.len();
    let mut m: Vec<Vec<Complex64>> = a
        .iter()
        .zip(b.iter())
        .map(|(row, &rhs)| {
            let mut r: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            r.push(rhs);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i][col]
                .norm()
                .partial_cmp(&m[j][col].norm())
                .unwrap()
        })?;
        if m[piv][col].norm() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    let v = m[col][k];
                    m[row][k] -= f * v;
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::EquilibriumData;
    use crate::operators::hard_edge_data;
    use crate::potential::EdgeConfig;

    fn gaussian(beta: f64, max_k: i32) -> Expansion {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss");
        let edges = EdgeConfig::soft_soft(-2.5, 2.5);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        expand(
            &eq,
            &edge,
            &v,
            beta,
            ExpandScope::Full { max_k },
            &RecursionParams::default(),
        )
        .unwrap()
    }

    fn universal_w2(
        eq: &EquilibriumData,
        beta: f64,
        x1: Complex64,
        x2: Complex64,
    ) -> Complex64 {
        let (a, b) = (eq.support.alpha_minus, eq.support.alpha_plus);
        let s1 = eq.frame.sigma_tilde(x1).unwrap();
        let s2 = eq.frame.sigma_tilde(x2).unwrap();
        let num = x1 * x2 - (a + b) * (x1 + x2) / 2.0 + a * b;
        (2.0 / beta) * 0.5 / ((x1 - x2) * (x1 - x2)) * (num / (s1 * s2) - 1.0)
    }

    #[test]
    fn w2_gaussian_value_and_symmetry() {
        let e = gaussian(2.0, 0);
        let x1 = Complex64::new(3.0, 0.0);
        let x2 = Complex64::new(-3.0, 0.0);
        let v = e.eval_term(2, 0, &[x1, x2]).unwrap();
        assert!(
            (v - Complex64::new(1.0 / 45.0, 0.0)).norm() < 1e-9,
            "W_2^0(3,-3) = {v}, want 1/45"
        );
        for (p, q) in [(2.4, -2.7), (3.3, 2.8), (2.2, 2.6)] {
            let x1 = Complex64::new(p, 0.4);
            let x2 = Complex64::new(q, -0.9);
            let v = e.eval_term(2, 0, &[x1, x2]).unwrap();
            let u = universal_w2(&e.eq, 2.0, x1, x2);
            assert!((v - u).norm() < 1e-9, "universal mismatch {v} vs {u}");
            let vswap = e.eval_term(2, 0, &[x2, x1]).unwrap();
            assert!((v - vswap).norm() < 1e-9);
        }
    }

    #[test]
    fn beta2_structural_zeros_and_parity() {
        let e = gaussian(2.0, 2);
        let w10 = e.term(1, 0).unwrap();
        assert!(w10.tensor.sup() < 1e-10, "W_1^0 sup = {}", w10.tensor.sup());
        for (&(n, k), t) in &e.terms {
            let expect_zero = (k.rem_euclid(2)) != (n as i32).rem_euclid(2);
            if expect_zero {
                assert!(
                    t.tensor.sup() < 1e-8,
                    "W_{n}^{k} should vanish at beta=2, sup = {}",
                    t.tensor.sup()
                );
            }
        }
        assert!(e.term(2, 1).unwrap().tensor.sup() < 1e-8);
    }

    #[test]
    fn expansion_term_inventory() {
        let e = gaussian(2.0, 2);
        let keys: Vec<(usize, i32)> = e.terms.keys().cloned().collect();
        let want = vec![
            (1, -1),
            (1, 0),
            (1, 1),
            (1, 2),
            (2, 0),
            (2, 1),
            (2, 2),
            (3, 1),
            (3, 2),
            (4, 2),
        ];
        assert_eq!(keys, want);
        assert_eq!(
            e.eval_term(3, 0, &[Complex64::new(3.0, 0.0); 3]).unwrap(),
            ZERO
        );
    }

    #[test]
    fn w1_subleading_gaussian_beta1_closed_form() {
        // W_1^{0}(x) = (x - sigma~)/(2 sigma~^2) at beta = 1
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss");
        let edges = EdgeConfig::soft_soft(-2.5, 2.5);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let w10 = w1_subleading(&eq, &edge, 1.0, None, &OpParams::default()).unwrap();
        for x in [2.6f64, 3.0, 4.0, -2.8] {
            let st = eq.frame.sigma_tilde(Complex64::new(x, 0.0)).unwrap();
            let expect = (Complex64::new(x, 0.0) - st) / (2.0 * st * st);
            let got = w10.eval(Complex64::new(x, 0.0)).unwrap();
            assert!(
                (got - expect).norm() < 1e-9,
                "W_1^0({x}) = {got} vs {expect}"
            );
        }
    }

    #[test]
    fn w1_subleading_hard_edges() {
        // arcsine at beta = 2: (1 - 2/beta) = 0 and no V^{1}: identically zero
        let v = PotentialSpec::simple(vec![0.0], (-1.0, 1.0), "arcsine");
        let edges = EdgeConfig::hard_hard(-1.0, 1.0);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let w10 = w1_subleading(&eq, &edge, 2.0, None, &OpParams::default()).unwrap();
        assert!(w10.coeffs.iter().all(|c| c.norm() < 1e-12));
        let w10 = w1_subleading(&eq, &edge, 4.0, None, &OpParams::default()).unwrap();
        let v0 = w10.eval(Complex64::new(2.0, 0.0)).unwrap();
        assert!(v0.norm() > 1e-4, "hard-edge W_1^0 should be nonzero at beta=4");
    }

    #[test]
    fn loop_residuals_gaussian() {
        let e = gaussian(2.0, 1);
        for (&(n, k), &r) in &e.residuals {
            assert!(r < 1e-7, "residual at ({n},{k}) = {r:.3e}");
        }
        let r = loop_residual(&e, 1, -2).unwrap();
        assert!(r < 1e-9, "leading loop residual {r:.3e}");
    }

    #[test]
    fn loop_residual_negative_control() {
        // empty expansion: the rank-1 order-(-2) equation reduces to the
        // known nonzero pole term
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss");
        let edges = EdgeConfig::soft_soft(-2.5, 2.5);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let empty = Expansion {
            eq: eq.clone(),
            edge,
            beta: 2.0,
            spec: v,
            params: RecursionParams::default(),
            max_k: -2,
            terms: BTreeMap::new(),
            residuals: BTreeMap::new(),
        };
        let r = loop_residual(&empty, 1, -2).unwrap();
        assert!(r > 1e-3, "negative control should not vanish, got {r}");
    }

    #[test]
    fn quartic_beta1_residuals_k1() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5, 0.0, 0.1], (-3.0, 3.0), "quartic");
        let edges = EdgeConfig::soft_soft(-2.3, 2.3);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let e = expand(
            &eq,
            &edge,
            &v,
            1.0,
            ExpandScope::Full { max_k: 1 },
            &RecursionParams::default(),
        )
        .unwrap();
        for (&(n, k), &r) in &e.residuals {
            assert!(r < 1e-6, "quartic residual at ({n},{k}) = {r:.3e}");
        }
        let x1 = Complex64::new(2.9, 0.3);
        let x2 = Complex64::new(-2.6, -0.4);
        let got = e.eval_term(2, 0, &[x1, x2]).unwrap();
        let want = universal_w2(&eq, 1.0, x1, x2);
        assert!((got - want).norm() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn beta_decomposition_roundtrip() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5], (-3.0, 3.0), "gauss");
        let edges = EdgeConfig::soft_soft(-2.5, 2.5);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let params = RecursionParams::default();
        // (n,k) = (1,1): two unknowns (g = 0, 1)
        let slice = beta_decompose(&eq, &edge, &v, &params, 1, 1, &[1.0, 3.0, 4.0]).unwrap();
        assert_eq!(slice.parts.len(), 2);
        let held = 5.0;
        let direct = expand(
            &eq,
            &edge,
            &v,
            held,
            ExpandScope::Full { max_k: 1 },
            &params,
        )
        .unwrap();
        // compare in the contour sup norm: high raw modes carry roundoff
        // amplified by the extraction radius and are not comparable entrywise
        let fn_err = |re: &Tensor, dt: &Tensor| -> f64 {
            let mut err = 0.0f64;
            for z in crate::kernel::circle_nodes(2.2, 13) {
                let v = pow_vector(z, re.dims[0]);
                let mut a = ZERO;
                let mut b = ZERO;
                for j in 0..re.dims[0] {
                    a += re.data[j] * v[j];
                    b += dt.data[j] * v[j];
                }
                err = err.max((a - b).norm());
            }
            err
        };
        let re = slice.reassemble(held);
        let dt = &direct.term(1, 1).unwrap().tensor;
        let err = fn_err(&re, dt);
        assert!(err < 1e-7, "beta reassembly error {err:.3e}");
        // at beta = 2 only the g-term with k = 2g - 2 + n survives
        let direct2 =
            expand(&eq, &edge, &v, 2.0, ExpandScope::Target { n: 1, k: 1 }, &params).unwrap();
        let re2 = slice.reassemble(2.0);
        let dt2 = &direct2.term(1, 1).unwrap().tensor;
        let err2 = fn_err(&re2, dt2);
        assert!(err2 < 1e-7, "beta=2 reassembly error {err2:.3e}");
    }

    #[test]
    fn stieltjes_chain_scope() {
        let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5, 0.0, 0.1], (-3.0, 3.0), "quartic");
        let edges = EdgeConfig::soft_soft(-2.3, 2.3);
        let eq = EquilibriumData::solve(&v, &edges).unwrap();
        let edge = hard_edge_data(&edges);
        let e = expand(
            &eq,
            &edge,
            &v,
            1.0,
            ExpandScope::StieltjesChain { w1_order: 2 },
            &RecursionParams::default(),
        )
        .unwrap();
        assert!(e.w1_series(2).is_some());
        assert!(e.term(2, 1).is_some());
        assert!(e.term(3, 1).is_none(), "not needed for W_1 through order 2");
        assert!(e.term(4, 2).is_none(), "chain scope must skip rank 4");
    }

    #[test]
    fn tensor_mode_apply_and_symmetrize() {
        let mut t = Tensor::zeros(vec![2, 2]);
        t.data[0] = Complex64::new(1.0, 0.0);
        t.data[1] = Complex64::new(2.0, 0.0);
        t.data[2] = Complex64::new(4.0, 0.0);
        t.data[3] = Complex64::new(3.0, 0.0);
        let (s, dev) = t.symmetrize();
        assert!((dev - 2.0).abs() < 1e-15);
        assert!((s.data[1] - Complex64::new(3.0, 0.0)).norm() < 1e-15);
        let id = vec![
            Complex64::new(1.0, 0.0),
            ZERO,
            ZERO,
            Complex64::new(1.0, 0.0),
        ];
        let u = t.mode_apply(1, &id, 2);
        assert_eq!(u.data, t.data);
    }
}
