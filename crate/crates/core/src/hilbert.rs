//! Construction of the expansion coefficients F_n, phi_n, the Taylor
//! coefficients B_n/H_n of the exponential field term, the remainder sources
//! A and G, and the residual evaluator that quantifies the truncation order.
//!
//! Discrete design. The artifact's kinetic evolution uses the well-balanced,
//! conservation-projected collision operator
//!     C(F) = correct( Q(F, F) - Q(M[F], M[F]) ),
//! where M[F] is the grid Maxwellian matching F's discrete moments and
//! `correct` removes the collision-invariant components. The hierarchy here
//! is the order-by-order expansion of exactly that operator: each F_n splits
//! into a Maxwellian-manifold carrier G_n (a jet coefficient of M[.] along
//! the moment series, which holds all the moments) plus a moment-free
//! deviation D_n obtained from the constrained inverse of the projected
//! linearized operator. Every derivative is a fixed discrete operator
//! (centered snapshot differences in t, periodic central differences in x,
//! central differences with zero ghosts in v) shared with the residual
//! evaluator, so the order-by-order relations cancel exactly and the leading
//! residual is the genuine truncation term.

use crate::collision::{
    assemble_l_conservative, collide_diff_fields, conservative_correction_weighted, KernelSpec,
    LinearOperator,
};
use crate::error::{Error, Result};
use crate::fields::solve_linearized_pb;
use crate::fluid::{
    assemble_coeff_system, central_dx, coeff_step, micro_moments, BackgroundFields, CoeffState,
    FluidState, MicroMoments, SmoothEvolver,
};
use crate::macro_micro::{chi_basis, KktSolver, NullBasis};
use crate::phase_grid::{
    fit_discrete_maxwellian, maxwellian, moments, FluidMoments, MaxwellianParams, SpatialGrid,
    VProfile, VelocityGrid,
};

// ---------------------------------------------------------------------------
// Truncated power-series (jet) arithmetic for the Maxwellian-manifold series.

const JET_LEN: usize = 6;

#[derive(Debug, Clone, Copy)]
struct Jet {
    c: [f64; JET_LEN],
}

impl Jet {
    fn constant(x: f64) -> Self {
        let mut c = [0.0; JET_LEN];
        c[0] = x;
        Jet { c }
    }

    fn add(&self, o: &Jet) -> Jet {
        let mut c = [0.0; JET_LEN];
        for i in 0..JET_LEN {
            c[i] = self.c[i] + o.c[i];
        }
        Jet { c }
    }

    fn sub(&self, o: &Jet) -> Jet {
        let mut c = [0.0; JET_LEN];
        for i in 0..JET_LEN {
            c[i] = self.c[i] - o.c[i];
        }
        Jet { c }
    }

    fn mul(&self, o: &Jet) -> Jet {
        let mut c = [0.0; JET_LEN];
        for i in 0..JET_LEN {
            for j in 0..=(JET_LEN - 1 - i) {
                c[i + j] += self.c[i] * o.c[j];
            }
        }
        Jet { c }
    }

    fn scale(&self, a: f64) -> Jet {
        let mut c = self.c;
        for x in c.iter_mut() {
            *x *= a;
        }
        Jet { c }
    }

    fn recip(&self) -> Jet {
        let mut c = [0.0; JET_LEN];
        c[0] = 1.0 / self.c[0];
        for n in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..=n {
                acc += self.c[j] * c[n - j];
            }
            c[n] = -acc / self.c[0];
        }
        Jet { c }
    }

    fn exp(&self) -> Jet {
        // E' = E x': n E_n = sum_j j x_j E_{n-j}.
        let mut c = [0.0; JET_LEN];
        c[0] = self.c[0].exp();
        for n in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..=n {
                acc += j as f64 * self.c[j] * c[n - j];
            }
            c[n] = acc / n as f64;
        }
        Jet { c }
    }

    fn ln(&self) -> Jet {
        // x = exp(L): n x_n = sum_j j L_j x_{n-j}.
        let mut c = [0.0; JET_LEN];
        c[0] = self.c[0].ln();
        for n in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..n {
                acc += j as f64 * c[j] * self.c[n - j];
            }
            c[n] = (self.c[n] * n as f64 - acc) / (n as f64 * self.c[0]);
        }
        Jet { c }
    }

    fn powf(&self, a: f64) -> Jet {
        self.ln().scale(a).exp()
    }
}

/// Maxwellian profile values as jets in eps, given parameter jets.
fn maxwellian_jet(params: &[Jet; 5], v: [f64; 3]) -> Jet {
    let rho = params[0];
    let theta = params[4];
    let two_pi_theta = theta.scale(2.0 * std::f64::consts::PI);
    let norm = rho.mul(&two_pi_theta.powf(-1.5));
    let mut arg = Jet::constant(0.0);
    for a in 0..3 {
        let d = Jet::constant(v[a]).sub(&params[1 + a]);
        arg = arg.add(&d.mul(&d));
    }
    let inv2t = theta.scale(2.0).recip();
    norm.mul(&arg.mul(&inv2t).scale(-1.0).exp())
}

/// Fit the parameter series p(eps) so the discrete moments of the Maxwellian
/// jet match the target moment series; returns per-order profiles G_n.
fn maxwellian_manifold_series(
    target: &[FluidMoments],
    guess: &MaxwellianParams,
    vgrid: &VelocityGrid,
) -> Result<Vec<VProfile>> {
    let n_ord = target.len();
    if n_ord > JET_LEN {
        return Err(Error::config("manifold series order exceeds jet length"));
    }
    let p0 = fit_discrete_maxwellian(&target[0], vgrid, guess)?;
    let mut p: [Jet; 5] = [
        Jet::constant(p0.rho),
        Jet::constant(p0.u[0]),
        Jet::constant(p0.u[1]),
        Jet::constant(p0.u[2]),
        Jet::constant(p0.theta),
    ];
    // Order-zero moment Jacobian for the coefficient Newton sweeps.
    let mu0 = maxwellian(&p0, vgrid);
    let mut jac = nalgebra::DMatrix::zeros(5, 5);
    for (i, (v, w)) in vgrid.nodes.iter().zip(vgrid.quad_weights.iter()).enumerate() {
        let du = [v[0] - p0.u[0], v[1] - p0.u[1], v[2] - p0.u[2]];
        let d2 = du[0] * du[0] + du[1] * du[1] + du[2] * du[2];
        let base = mu0[i] * w;
        let g = [
            1.0 / p0.rho,
            du[0] / p0.theta,
            du[1] / p0.theta,
            du[2] / p0.theta,
            d2 / (2.0 * p0.theta * p0.theta) - 1.5 / p0.theta,
        ];
        let mono = [
            1.0,
            v[0],
            v[1],
            v[2],
            v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
        ];
        for r in 0..5 {
            for c in 0..5 {
                jac[(r, c)] += base * mono[r] * g[c];
            }
        }
    }
    let jac_lu = jac.lu();

    for _sweep in 0..(n_ord + 2) {
        // Moment jets of the current parameter series.
        let mut m_jet = [[0.0f64; JET_LEN]; 5];
        for (v, w) in vgrid.nodes.iter().zip(vgrid.quad_weights.iter()) {
            let mj = maxwellian_jet(&p, *v);
            let mono = [
                1.0,
                v[0],
                v[1],
                v[2],
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
            ];
            for r in 0..5 {
                for o in 0..JET_LEN {
                    m_jet[r][o] += mj.c[o] * mono[r] * w;
                }
            }
        }
        let mut worst = 0.0f64;
        for order in 1..n_ord {
            let t = &target[order];
            let want = [t.rho, t.momentum[0], t.momentum[1], t.momentum[2], t.energy];
            let resid = nalgebra::DVector::from_iterator(
                5,
                (0..5).map(|r| m_jet[r][order] - want[r]),
            );
            worst = worst.max(resid.amax());
            let delta = jac_lu
                .solve(&resid)
                .ok_or_else(|| Error::NumericalRank("manifold Jacobian singular".into()))?;
            for comp in 0..5 {
                p[comp].c[order] -= delta[comp];
            }
        }
        if worst < 1e-13 {
            break;
        }
    }

    // Emit the profile coefficients.
    let mut out: Vec<VProfile> = (0..n_ord).map(|_| vec![0.0; vgrid.len()]).collect();
    for (i, v) in vgrid.nodes.iter().enumerate() {
        let mj = maxwellian_jet(&p, *v);
        for order in 0..n_ord {
            out[order][i] = mj.c[order];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Phase-space fields.

/// Phase-space field in node-major layout: `data[node * n_cells + cell]`.
#[derive(Debug, Clone)]
pub struct PhaseField {
    pub data: Vec<f64>,
    pub n_nodes: usize,
    pub n_cells: usize,
}

impl PhaseField {
    pub fn zeros(n_nodes: usize, n_cells: usize) -> Self {
        PhaseField {
            data: vec![0.0; n_nodes * n_cells],
            n_nodes,
            n_cells,
        }
    }

    #[inline]
    pub fn at(&self, node: usize, cell: usize) -> f64 {
        self.data[node * self.n_cells + cell]
    }

    pub fn cell_profile(&self, cell: usize) -> VProfile {
        (0..self.n_nodes).map(|i| self.at(i, cell)).collect()
    }

    pub fn set_cell_profile(&mut self, cell: usize, prof: &[f64]) {
        for i in 0..self.n_nodes {
            self.data[i * self.n_cells + cell] = prof[i];
        }
    }

    pub fn axpy(&mut self, a: f64, other: &PhaseField) {
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += a * y;
        }
    }

    /// L2 norm in the phase-space measure.
    pub fn norm(&self, vgrid: &VelocityGrid, sgrid: &SpatialGrid) -> f64 {
        let mut s = 0.0;
        for node in 0..self.n_nodes {
            let w = vgrid.quad_weights[node];
            for c in 0..self.n_cells {
                let v = self.at(node, c);
                s += v * v * w;
            }
        }
        (s * sgrid.spacing()).sqrt()
    }

    /// Periodic central difference along x, per velocity node.
    pub fn d_dx(&self, sgrid: &SpatialGrid) -> PhaseField {
        let nc = self.n_cells;
        let c = 0.5 / sgrid.spacing();
        let mut out = PhaseField::zeros(self.n_nodes, nc);
        for node in 0..self.n_nodes {
            let row = &self.data[node * nc..(node + 1) * nc];
            let orow = &mut out.data[node * nc..(node + 1) * nc];
            for i in 0..nc {
                orow[i] = c * (row[(i + 1) % nc] - row[(i + nc - 1) % nc]);
            }
        }
        out
    }

    /// Central difference with zero ghosts along a velocity axis.
    pub fn d_dv(&self, axis: usize, vgrid: &VelocityGrid) -> PhaseField {
        let n = vgrid.n_per_axis;
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let coord = |idx: usize| -> usize {
            match axis {
                0 => idx / (n * n),
                1 => (idx / n) % n,
                _ => idx % n,
            }
        };
        let c = 0.5 / vgrid.spacing();
        let nc = self.n_cells;
        let mut out = PhaseField::zeros(self.n_nodes, nc);
        for node in 0..self.n_nodes {
            let a = coord(node);
            let up = if a + 1 < n { Some(node + stride) } else { None };
            let dn = if a > 0 { Some(node - stride) } else { None };
            for cell in 0..nc {
                let fu = up.map_or(0.0, |j| self.at(j, cell));
                let fd = dn.map_or(0.0, |j| self.at(j, cell));
                out.data[node * nc + cell] = c * (fu - fd);
            }
        }
        out
    }

    /// Weighted conservation fix applied cellwise with a Maxwellian carrier.
    pub fn corrected_with(&self, carrier: &PhaseField, vgrid: &VelocityGrid) -> PhaseField {
        let mut out = PhaseField::zeros(self.n_nodes, self.n_cells);
        for c in 0..self.n_cells {
            let prof = self.cell_profile(c);
            let car = carrier.cell_profile(c);
            out.set_cell_profile(c, &conservative_correction_weighted(&prof, &car, vgrid));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Exponential composition series.

/// Truncated formal power series in eps, cellwise.
#[derive(Debug, Clone)]
pub struct SeriesCoefficients {
    /// coeffs[n][cell] for n = 0..=max_order.
    pub coeffs: Vec<Vec<f64>>,
}

/// Coefficients of exp(sum_{j>=1} eps^j phi_j) up to eps^max_order via the
/// power-series differential recurrence n E_n = sum_j j phi_j E_{n-j}.
pub fn series_exp(phis: &[Vec<f64>], max_order: usize) -> SeriesCoefficients {
    let n_cells = phis.first().map_or(0, |p| p.len());
    let jmax = phis.len();
    let mut coeffs = Vec::with_capacity(max_order + 1);
    coeffs.push(vec![1.0; n_cells]);
    for n in 1..=max_order {
        let mut e_n = vec![0.0; n_cells];
        for j in 1..=n.min(jmax) {
            let phi_j = &phis[j - 1];
            let e_prev = &coeffs[n - j];
            for c in 0..n_cells {
                e_n[c] += j as f64 * phi_j[c] * e_prev[c];
            }
        }
        for x in e_n.iter_mut() {
            *x /= n as f64;
        }
        coeffs.push(e_n);
    }
    SeriesCoefficients { coeffs }
}

impl SeriesCoefficients {
    /// B-tilde_n = B_n - phi_n (the composition sum without the linear term).
    pub fn b_tilde(&self, n: usize, phis: &[Vec<f64>]) -> Vec<f64> {
        let b = &self.coeffs[n];
        if n >= 1 && n <= phis.len() {
            b.iter().zip(phis[n - 1].iter()).map(|(a, p)| a - p).collect()
        } else {
            b.clone()
        }
    }
}

/// Brute-force oracle for the composition coefficients: sum over ordered
/// tuples (n_1..n_m), parts in [1, jmax], of prod phi_{n_i} / m!.
pub fn composition_oracle(phis: &[f64], n: usize) -> f64 {
    fn rec(phis: &[f64], remaining: usize, depth: usize, prod: f64, acc: &mut f64) {
        if remaining == 0 {
            let mut fact = 1.0;
            for d in 1..=depth {
                fact *= d as f64;
            }
            *acc += prod / fact;
            return;
        }
        for part in 1..=remaining.min(phis.len()) {
            rec(phis, remaining - part, depth + 1, prod * phis[part - 1], acc);
        }
    }
    let mut acc = 0.0;
    rec(phis, n, 0, 1.0, &mut acc);
    acc
}

// ---------------------------------------------------------------------------
// The expansion itself.

/// Configuration of the coefficient construction.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionConfig {
    /// Expansion half-order k (the hierarchy runs to 2k-1).
    pub k_half: usize,
    /// Highest coefficient order to build.
    pub n_target: usize,
    /// Snapshot spacing for time differencing.
    pub dt_snap: f64,
    pub k_eos: f64,
    /// Artificial dissipation passed to the coefficient stepper.
    pub dissipation: f64,
    /// Taylor tail truncation order (defaults to 2k + 4).
    pub n_h: usize,
}

impl ExpansionConfig {
    pub fn new(k_half: usize, n_target: usize, k_eos: f64) -> Result<Self> {
        if k_half < 1 {
            return Err(Error::config("expansion half-order k must be >= 1"));
        }
        if n_target > 2 * k_half - 1 {
            return Err(Error::config("n_target must be <= 2k - 1"));
        }
        if n_target + 1 > JET_LEN {
            return Err(Error::config("n_target exceeds the jet order"));
        }
        Ok(ExpansionConfig {
            k_half,
            n_target,
            dt_snap: 1e-3,
            k_eos,
            dissipation: 0.0,
            n_h: 2 * k_half + 4,
        })
    }
}

/// The built expansion: background, coefficients, fields and Taylor data on a
/// snapshot window.
pub struct ExpansionSet {
    pub cfg: ExpansionConfig,
    pub times: Vec<f64>,
    pub background: Vec<FluidState>,
    /// f[order][snapshot]; entries outside the valid window are zero fields.
    pub f: Vec<Vec<PhaseField>>,
    /// Maxwellian-manifold carriers G_n (same indexing as f).
    pub manifold: Vec<Vec<PhaseField>>,
    /// Moment-free deviations D_n for orders >= 1: deviation[order-1][snapshot].
    pub deviation: Vec<Vec<PhaseField>>,
    pub macro_states: Vec<Vec<CoeffState>>,
    /// phi[order][snapshot][cell].
    pub phi: Vec<Vec<Vec<f64>>>,
    /// Exponential series per snapshot, to order n_h + 2.
    pub taylor: Vec<SeriesCoefficients>,
    /// Worst least-squares closure residual per order (diagnostic).
    pub closure_residuals: Vec<f64>,
}

impl ExpansionSet {
    pub fn n_snapshots(&self) -> usize {
        self.times.len()
    }

    /// Valid snapshot range (inclusive) for the given order.
    pub fn valid_range(&self, order: usize) -> (usize, usize) {
        (order, self.n_snapshots() - 1 - order)
    }

    /// F truncated at a snapshot: sum_{n<=n_trunc} eps^n F_n.
    pub fn truncated(&self, eps: f64, n_trunc: usize, j: usize) -> PhaseField {
        let mut acc = self.f[0][j].clone();
        for n in 1..=n_trunc {
            acc.axpy(eps.powi(n as i32), &self.f[n][j]);
        }
        acc
    }

    /// Truncated potential at a snapshot.
    pub fn truncated_phi(&self, eps: f64, n_trunc: usize, j: usize) -> Vec<f64> {
        let nc = self.phi[0][j].len();
        let mut out = vec![0.0; nc];
        for n in 0..=n_trunc {
            for c in 0..nc {
                out[c] += eps.powi(n as i32) * self.phi[n][j][c];
            }
        }
        out
    }
}

/// Local Maxwellian parameters whose discrete moments match the fluid
/// fields, so the quadrature density of F0 equals the density the field
/// solver saw and the order-zero field equation closes exactly.
fn fitted_params(
    bg: &FluidState,
    cell: usize,
    k_eos: f64,
    vgrid: &VelocityGrid,
) -> Result<MaxwellianParams> {
    let rho = bg.rho[cell];
    let u = bg.u1[cell];
    let theta = k_eos * rho.powf(2.0 / 3.0);
    let guess = MaxwellianParams::new(rho, [u, 0.0, 0.0], theta)?;
    let target = FluidMoments {
        rho,
        momentum: [rho * u, 0.0, 0.0],
        energy: rho * u * u + 3.0 * rho * theta,
    };
    fit_discrete_maxwellian(&target, vgrid, &guess)
}

/// The eps^n moment targets of the coefficient fields in the standard
/// linearized form.
fn moment_target(
    bg: &FluidState,
    state: &CoeffState,
    cell: usize,
    k_eos: f64,
) -> FluidMoments {
    let rho0 = bg.rho[cell];
    let u0 = bg.u1[cell];
    let th0 = k_eos * rho0.powf(2.0 / 3.0);
    let rn = state.rho_n[cell];
    let un = [state.u_n[0][cell], state.u_n[1][cell], state.u_n[2][cell]];
    let tn = state.theta_n[cell];
    FluidMoments {
        rho: rn,
        momentum: [rn * u0 + rho0 * un[0], rho0 * un[1], rho0 * un[2]],
        energy: rn * (u0 * u0 + 3.0 * th0) + 2.0 * rho0 * u0 * un[0] + 3.0 * rho0 * tn,
    }
}

/// Q(a, b) + Q(b, a) cellwise via polarization, conservation-fixed against
/// the carrier Maxwellians.
fn q_pair_corrected(
    a: &PhaseField,
    b: &PhaseField,
    carrier: &PhaseField,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    par: bool,
) -> PhaseField {
    let nc = a.n_cells;
    let rows: Vec<usize> = (0..vgrid.len()).collect();
    let mut sum = a.clone();
    sum.axpy(1.0, b);
    let q_sum = collide_diff_fields(&sum.data, None, nc, &rows, spec, vgrid, par);
    let q_a = collide_diff_fields(&a.data, None, nc, &rows, spec, vgrid, par);
    let q_b = collide_diff_fields(&b.data, None, nc, &rows, spec, vgrid, par);
    let mut out = PhaseField::zeros(a.n_nodes, nc);
    for i in 0..out.data.len() {
        out.data[i] = q_sum[i] - q_a[i] - q_b[i];
    }
    out.corrected_with(carrier, vgrid)
}

/// Q(a, a) cellwise, conservation-fixed against the carrier Maxwellians.
fn q_square_corrected(
    a: &PhaseField,
    carrier: &PhaseField,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    par: bool,
) -> PhaseField {
    let rows: Vec<usize> = (0..vgrid.len()).collect();
    let q = collide_diff_fields(&a.data, None, a.n_cells, &rows, spec, vgrid, par);
    PhaseField {
        data: q,
        n_nodes: a.n_nodes,
        n_cells: a.n_cells,
    }
    .corrected_with(carrier, vgrid)
}

/// Transport-field bracket of the eps^m line in deviation form:
/// D_t F_m + v1 D_x F_m - sum_{i+l=m} (D_x phi_i) D_v1 F_l
///   - sum_{i=1}^{m} [pair(D_i, G_{m+1-i})] - sum_{i+l=m+1, 1<=i<=l} pair/square(D_i, D_l).
#[allow(clippy::too_many_arguments)]
fn bracket(
    f: &[Vec<PhaseField>],
    manifold: &[Vec<PhaseField>],
    deviation: &[Vec<PhaseField>],
    phi: &[Vec<Vec<f64>>],
    m: usize,
    j: usize,
    dt_snap: f64,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    par: bool,
) -> PhaseField {
    let nc = f[0][0].n_cells;
    let nv = vgrid.len();
    let mut out = PhaseField::zeros(nv, nc);
    for idx in 0..out.data.len() {
        out.data[idx] = (f[m][j + 1].data[idx] - f[m][j - 1].data[idx]) / (2.0 * dt_snap);
    }
    let dx = f[m][j].d_dx(sgrid);
    for node in 0..nv {
        let v1 = vgrid.nodes[node][0];
        for c in 0..nc {
            out.data[node * nc + c] += v1 * dx.at(node, c);
        }
    }
    for i in 0..=m {
        let l = m - i;
        let dphi = central_dx(&phi[i][j], sgrid);
        let dv = f[l][j].d_dv(0, vgrid);
        for node in 0..nv {
            for c in 0..nc {
                out.data[node * nc + c] -= dphi[c] * dv.at(node, c);
            }
        }
    }
    // Known collision terms: deviations against lower manifold carriers...
    let carrier = &manifold[0][j];
    for i in 1..=m {
        let l = m + 1 - i; // manifold order, 1 <= l <= m
        let q = q_pair_corrected(&deviation[i - 1][j], &manifold[l][j], carrier, spec, vgrid, par);
        out.axpy(-1.0, &q);
    }
    // ...and deviation-deviation terms.
    let mut i = 1usize;
    while 2 * i <= m + 1 {
        let l = m + 1 - i;
        if l >= 1 && l <= deviation.len() && i <= deviation.len() {
            let q = if i == l {
                q_square_corrected(&deviation[i - 1][j], carrier, spec, vgrid, par)
            } else {
                q_pair_corrected(&deviation[i - 1][j], &deviation[l - 1][j], carrier, spec, vgrid, par)
            };
            out.axpy(-1.0, &q);
        }
        i += 1;
    }
    out
}

/// Build the expansion on a snapshot window starting from `init`.
pub fn build_coefficients(
    init: &FluidState,
    cfg: &ExpansionConfig,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    par: bool,
) -> Result<ExpansionSet> {
    let m_snaps = 2 * cfg.n_target + 3;
    let nc = sgrid.n_cells;
    let nv = vgrid.len();

    // Background trajectory on the snapshot grid.
    let mut evolver = SmoothEvolver::new(init.clone(), cfg.k_eos);
    let mut background = vec![init.clone()];
    for _ in 1..m_snaps {
        evolver.step_rk4(cfg.dt_snap, sgrid)?;
        background.push(evolver.state.clone());
    }
    let times: Vec<f64> = background.iter().map(|s| s.time).collect();

    // Order zero: moment-matched Maxwellians and the background field.
    let mut f: Vec<Vec<PhaseField>> = Vec::with_capacity(cfg.n_target + 1);
    let mut manifold: Vec<Vec<PhaseField>> = Vec::with_capacity(cfg.n_target + 1);
    let mut phi: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.n_target + 1);
    {
        let mut f0 = Vec::with_capacity(m_snaps);
        for bg in &background {
            let mut field = PhaseField::zeros(nv, nc);
            for c in 0..nc {
                let p = fitted_params(bg, c, cfg.k_eos, vgrid)?;
                field.set_cell_profile(c, &maxwellian(&p, vgrid));
            }
            f0.push(field);
        }
        manifold.push(f0.clone());
        f.push(f0);
        phi.push(background.iter().map(|bg| bg.phi.phi.clone()).collect());
    }
    let mut deviation: Vec<Vec<PhaseField>> = Vec::new();
    let mut macro_states: Vec<Vec<CoeffState>> = Vec::new();
    let mut closure_residuals = Vec::new();

    for order in 1..=cfg.n_target {
        let (lo, hi) = (order, m_snaps - 1 - order);

        // Deviation solve per (cell, snapshot): the bracket of line order-1
        // equals -sqrt(mu) L_cons(D_order / sqrt(mu)).
        let mut d_ord: Vec<PhaseField> = (0..m_snaps).map(|_| PhaseField::zeros(nv, nc)).collect();
        let mut worst_resid = 0.0f64;
        for j in lo..=hi {
            let br = bracket(
                &f, &manifold, &deviation, &phi, order - 1, j, cfg.dt_snap, spec, vgrid, sgrid,
                par,
            );
            for c in 0..nc {
                let p = fitted_params(&background[j], c, cfg.k_eos, vgrid)?;
                let mu = maxwellian(&p, vgrid);
                let op: LinearOperator = assemble_l_conservative(&p, spec, vgrid, par);
                let basis: NullBasis = chi_basis(&p, vgrid)?;
                let solver = KktSolver::new(&op.matrix, &basis, vgrid, true)?;
                let rhs: VProfile = (0..nv).map(|i| -br.at(i, c) / mu[i].sqrt()).collect();
                let sol = solver.solve(&rhs)?;
                worst_resid = worst_resid.max(sol.relative_residual);
                let d_prof: VProfile = (0..nv).map(|i| mu[i].sqrt() * sol.g[i]).collect();
                d_ord[j].set_cell_profile(c, &d_prof);
            }
        }
        closure_residuals.push(worst_resid);

        // Macro pass: evolve the coefficient system across the window with
        // the deviation moments as sources, zero data at the left edge.
        let mut states: Vec<CoeffState> = (0..m_snaps).map(|_| CoeffState::zero(order, nc)).collect();
        states[lo].time = times[lo];
        for j in lo..hi {
            let mid_bg = average_backgrounds(&background[j], &background[j + 1], cfg.k_eos);
            let mm = averaged_deviation_moments(
                &d_ord[j],
                &d_ord[j + 1],
                &background[j],
                &background[j + 1],
                cfg.k_eos,
                vgrid,
            );
            let (rg, rug) =
                lower_field_couplings(order, j, &phi, &macro_states, &background, sgrid);
            let msys = assemble_coeff_system(&mid_bg, &mm, &rg, &rug, sgrid)?;
            let btilde = if order >= 2 {
                let phis = phi_tail_at(&phi, j, order - 1);
                let ser = series_exp(&phis, order);
                ser.b_tilde(order, &phis)
            } else {
                vec![0.0; nc]
            };
            states[j + 1] = coeff_step(
                &states[j],
                &msys,
                &btilde,
                cfg.dt_snap,
                cfg.dissipation,
                sgrid,
            )?;
            states[j + 1].time = times[j + 1];
        }

        // Manifold carriers from the moment series, then F_n = G_n + D_n.
        let mut g_ord: Vec<PhaseField> = (0..m_snaps).map(|_| PhaseField::zeros(nv, nc)).collect();
        let mut f_ord: Vec<PhaseField> = (0..m_snaps).map(|_| PhaseField::zeros(nv, nc)).collect();
        let mut phi_ord: Vec<Vec<f64>> = vec![vec![0.0; nc]; m_snaps];
        for j in lo..=hi {
            for c in 0..nc {
                let guess = fitted_params(&background[j], c, cfg.k_eos, vgrid)?;
                let mut targets = vec![FluidMoments {
                    rho: background[j].rho[c],
                    momentum: [
                        background[j].rho[c] * background[j].u1[c],
                        0.0,
                        0.0,
                    ],
                    energy: {
                        let r = background[j].rho[c];
                        let u = background[j].u1[c];
                        r * u * u + 3.0 * r * cfg.k_eos * r.powf(2.0 / 3.0)
                    },
                }];
                for ord in 1..=order {
                    let st = if ord == order {
                        &states[j]
                    } else {
                        &macro_states[ord - 1][j]
                    };
                    targets.push(moment_target(&background[j], st, c, cfg.k_eos));
                }
                let series = maxwellian_manifold_series(&targets, &guess, vgrid)?;
                g_ord[j].set_cell_profile(c, &series[order]);
            }
            for idx in 0..f_ord[j].data.len() {
                f_ord[j].data[idx] = g_ord[j].data[idx] + d_ord[j].data[idx];
            }
            // Field equation of this order with the quadrature density.
            let e_phi0: Vec<f64> = background[j].phi.phi.iter().map(|p| p.exp()).collect();
            let btilde = if order >= 2 {
                let phis = phi_tail_at(&phi, j, order - 1);
                let ser = series_exp(&phis, order);
                ser.b_tilde(order, &phis)
            } else {
                vec![0.0; nc]
            };
            let rho_q: Vec<f64> = (0..nc)
                .map(|c| moments(&f_ord[j].cell_profile(c), vgrid).rho)
                .collect();
            let source: Vec<f64> = (0..nc)
                .map(|c| e_phi0[c] * btilde[c] - rho_q[c])
                .collect();
            let sol = solve_linearized_pb(&source, &e_phi0, sgrid)?;
            phi_ord[j] = sol.phi;
        }
        f.push(f_ord);
        manifold.push(g_ord);
        deviation.push(d_ord);
        phi.push(phi_ord);
        macro_states.push(states);
    }

    // Exponential series per snapshot from the available phi coefficients.
    let jmax = cfg.n_target.min(2 * cfg.k_half - 1);
    let taylor: Vec<SeriesCoefficients> = (0..m_snaps)
        .map(|j| {
            let phis = phi_tail_at(&phi, j, jmax);
            series_exp(&phis, cfg.n_h + 2)
        })
        .collect();

    Ok(ExpansionSet {
        cfg: *cfg,
        times,
        background,
        f,
        manifold,
        deviation,
        macro_states,
        phi,
        taylor,
        closure_residuals,
    })
}

fn phi_tail_at(phi: &[Vec<Vec<f64>>], j: usize, n_max: usize) -> Vec<Vec<f64>> {
    (1..=n_max.min(phi.len().saturating_sub(1)))
        .map(|n| phi[n][j].clone())
        .collect()
}

fn average_backgrounds(a: &FluidState, b: &FluidState, k_eos: f64) -> BackgroundFields {
    let n = a.rho.len();
    let mut out = BackgroundFields::from_state(a, k_eos);
    let tb = b.theta(k_eos);
    let ta = a.theta(k_eos);
    for i in 0..n {
        out.rho0[i] = 0.5 * (a.rho[i] + b.rho[i]);
        out.u0[i] = 0.5 * (a.u1[i] + b.u1[i]);
        out.theta0[i] = 0.5 * (ta[i] + tb[i]);
        out.phi0[i] = 0.5 * (a.phi.phi[i] + b.phi.phi[i]);
    }
    out
}

/// The lower-order field couplings of the macro system at order n:
/// sum_{i+l=n, i,l>=1} rho_l grad phi_i and (rho0 u_l + rho_l u0) . grad phi_i.
fn lower_field_couplings(
    order: usize,
    j: usize,
    phi: &[Vec<Vec<f64>>],
    macro_states: &[Vec<CoeffState>],
    background: &[FluidState],
    sgrid: &SpatialGrid,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let nc = sgrid.n_cells;
    let mut rg = vec![[0.0; 3]; nc];
    let mut rug = vec![0.0; nc];
    for i in 1..order {
        let l = order - i;
        if l < 1 || l > macro_states.len() {
            continue;
        }
        let dphi = central_dx(&phi[i][j], sgrid);
        let low = &macro_states[l - 1][j];
        for c in 0..nc {
            rg[c][0] += low.rho_n[c] * dphi[c];
            rug[c] += (background[j].rho[c] * low.u_n[0][c]
                + low.rho_n[c] * background[j].u1[c])
                * dphi[c];
        }
    }
    (rg, rug)
}

fn averaged_deviation_moments(
    d_a: &PhaseField,
    d_b: &PhaseField,
    bg_a: &FluidState,
    bg_b: &FluidState,
    k_eos: f64,
    vgrid: &VelocityGrid,
) -> Vec<MicroMoments> {
    let nc = d_a.n_cells;
    let mut out = Vec::with_capacity(nc);
    for c in 0..nc {
        let mut acc = MicroMoments::default();
        for (d, bg) in [(d_a, bg_a), (d_b, bg_b)] {
            let u0 = [bg.u1[c], 0.0, 0.0];
            let th0 = k_eos * bg.rho[c].powf(2.0 / 3.0);
            let prof = d.cell_profile(c);
            let mm = micro_moments(&prof, u0, th0, vgrid);
            for a in 0..3 {
                for b in 0..3 {
                    acc.sigma[a][b] += 0.5 * mm.sigma[a][b];
                }
                acc.q[a] += 0.5 * mm.q[a];
            }
        }
        out.push(acc);
    }
    out
}

/// Residual norms of the truncated expansion inserted into the kinetic system.
#[derive(Debug, Clone, Copy)]
pub struct ResidualNorms {
    pub r_kin: f64,
    pub r_field: f64,
}

/// Evaluate the kinetic and field residuals of the truncation at snapshot j.
/// The collision term is the artifact's well-balanced projected operator
/// C(F) = correct(Q(F,F) - Q(M[F],M[F])).
pub fn kinetic_residual(
    set: &ExpansionSet,
    eps: f64,
    n_trunc: usize,
    j: usize,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    par: bool,
) -> Result<ResidualNorms> {
    if n_trunc > set.cfg.n_target {
        return Err(Error::config("truncation order exceeds built coefficients"));
    }
    let (lo, hi) = set.valid_range(n_trunc);
    if j < lo + 1 || j + 1 > hi {
        return Err(Error::config("snapshot lacks valid neighbors at this order"));
    }
    let nc = sgrid.n_cells;
    let nv = vgrid.len();
    let f_prev = set.truncated(eps, n_trunc, j - 1);
    let f_next = set.truncated(eps, n_trunc, j + 1);
    let f_cur = set.truncated(eps, n_trunc, j);
    let phi_tr = set.truncated_phi(eps, n_trunc, j);

    let mut r = PhaseField::zeros(nv, nc);
    for idx in 0..r.data.len() {
        r.data[idx] = (f_next.data[idx] - f_prev.data[idx]) / (2.0 * set.cfg.dt_snap);
    }
    let dx = f_cur.d_dx(sgrid);
    for node in 0..nv {
        let v1 = vgrid.nodes[node][0];
        for c in 0..nc {
            r.data[node * nc + c] += v1 * dx.at(node, c);
        }
    }
    let dphi = central_dx(&phi_tr, sgrid);
    let dv = f_cur.d_dv(0, vgrid);
    for node in 0..nv {
        for c in 0..nc {
            r.data[node * nc + c] -= dphi[c] * dv.at(node, c);
        }
    }
    // Well-balanced collision term.
    let mut m_of_f = PhaseField::zeros(nv, nc);
    for c in 0..nc {
        let prof = f_cur.cell_profile(c);
        let m = moments(&prof, vgrid);
        let guess = fitted_params(&set.background[j], c, set.cfg.k_eos, vgrid)?;
        let p = fit_discrete_maxwellian(&m, vgrid, &guess)?;
        m_of_f.set_cell_profile(c, &maxwellian(&p, vgrid));
    }
    let rows: Vec<usize> = (0..nv).collect();
    let q = collide_diff_fields(&f_cur.data, Some(&m_of_f.data), nc, &rows, spec, vgrid, par);
    let qc = PhaseField {
        data: q,
        n_nodes: nv,
        n_cells: nc,
    }
    .corrected_with(&m_of_f, vgrid);
    for idx in 0..r.data.len() {
        r.data[idx] -= qc.data[idx] / eps;
    }
    let r_kin = r.norm(vgrid, sgrid);

    // Field residual of the truncated potential.
    let d2 = {
        let h = sgrid.spacing();
        (0..nc)
            .map(|i| {
                (phi_tr[(i + 1) % nc] - 2.0 * phi_tr[i] + phi_tr[(i + nc - 1) % nc]) / (h * h)
            })
            .collect::<Vec<f64>>()
    };
    let mut rf = vec![0.0; nc];
    for c in 0..nc {
        let rho_q = moments(&f_cur.cell_profile(c), vgrid).rho;
        rf[c] = d2[c] - phi_tr[c].exp() + rho_q;
    }
    let r_field = crate::fields::l2_norm(&rf, sgrid);
    Ok(ResidualNorms { r_kin, r_field })
}

/// The remainder source A at a snapshot: the high-order collision and field
/// cross terms left over by the truncation, with the index ranges that
/// exclude Q(F_0, F_{2k}).
pub fn source_a(
    set: &ExpansionSet,
    eps: f64,
    j: usize,
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    par: bool,
) -> Result<PhaseField> {
    let k2 = 2 * set.cfg.k_half;
    let nmax = set.cfg.n_target;
    if k2 >= 2 && nmax < k2 - 1 {
        return Err(Error::contract(format!(
            "source A needs coefficients to order {} (have {nmax})",
            k2 - 1
        )));
    }
    let nc = sgrid.n_cells;
    let nv = vgrid.len();
    let mut out = PhaseField::zeros(nv, nc);
    // Collision part: i + l >= 2k+1, 2 <= i, l <= 2k-1.
    for i in 2..=(k2 - 1).min(nmax) {
        for l in i..=(k2 - 1).min(nmax) {
            if i + l < k2 + 1 {
                continue;
            }
            let w = eps.powi((i + l - k2) as i32);
            let q = if i == l {
                q_square_corrected(&set.f[i][j], &set.manifold[0][j], spec, vgrid, par)
            } else {
                q_pair_corrected(&set.f[i][j], &set.f[l][j], &set.manifold[0][j], spec, vgrid, par)
            };
            for idx in 0..out.data.len() {
                out.data[idx] += w * q.data[idx];
            }
        }
    }
    // Field part: i + l >= 2k, 1 <= i, l <= 2k-1.
    for i in 1..=(k2 - 1).min(nmax) {
        for l in 1..=(k2 - 1).min(nmax) {
            if i + l < k2 {
                continue;
            }
            let w = eps.powi((i + l - k2 + 1) as i32);
            let dphi = central_dx(&set.phi[i][j], sgrid);
            let dv = set.f[l][j].d_dv(0, vgrid);
            for node in 0..nv {
                for c in 0..nc {
                    out.data[node * nc + c] -= w * dphi[c] * dv.at(node, c);
                }
            }
        }
    }
    Ok(out)
}

/// The remainder field source G with the H-tail truncated at n_h and the
/// exponential remainder factor evaluated stably.
pub fn source_g(
    set: &ExpansionSet,
    phi_r: &[f64],
    eps: f64,
    j: usize,
    n_h: usize,
) -> Result<Vec<f64>> {
    let k2 = 2 * set.cfg.k_half;
    if n_h < k2 {
        return Err(Error::config("H-tail truncation must be >= 2k"));
    }
    let e = &set.taylor[j];
    if e.coeffs.len() <= n_h {
        return Err(Error::config("Taylor series shorter than requested truncation"));
    }
    let nc = phi_r.len();
    let phi0 = &set.background[j].phi.phi;
    let ek = eps.powi(set.cfg.k_half as i32);
    let mut out = vec![0.0; nc];
    for c in 0..nc {
        let mut h_tail_k = 0.0; // sum_{n>=2k} eps^{n-k} H_n
        let mut series_full = 0.0; // sum_{n=1}^{n_h} eps^n E_n
        for n in 1..=n_h {
            let en = e.coeffs[n][c];
            if n >= k2 {
                h_tail_k += eps.powi((n - set.cfg.k_half) as i32) * en;
            }
            series_full += eps.powi(n as i32) * en;
        }
        let expm1_term = (ek * phi_r[c]).exp_m1() / ek;
        out[c] = phi0[c].exp() * (h_tail_k + series_full * expm1_term);
    }
    Ok(out)
}
