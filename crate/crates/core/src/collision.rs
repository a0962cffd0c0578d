//! The cutoff Boltzmann collision operator on the discrete velocity grid,
//! its bilinear and linearized forms around local and global Maxwellians,
//! the nu - K kernel split with smooth cutoff, and the L = L_M - sum I_i
//! decomposition.
//!
//! Post-collision velocities are evaluated by trilinear interpolation with
//! zero extension outside the cube; discrete conservation is restored by an
//! explicit projection onto the collision invariants.

use crate::error::{Error, Result};
use crate::phase_grid::{
    inner, maxwellian, norm, MaxwellianParams, VProfile, VelocityGrid,
};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Angular kernel choices; the Grad cutoff only bounds b0 by |cos alpha|, and
/// the saturating choice is the canonical default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularKernel {
    AbsCos,
}

impl AngularKernel {
    #[inline]
    pub fn eval(&self, cos_alpha: f64) -> f64 {
        match self {
            AngularKernel::AbsCos => cos_alpha.abs(),
        }
    }
}

/// Collision kernel specification.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    /// Velocity exponent in (-3, 1].
    pub gamma: f64,
    pub b0: AngularKernel,
    /// Regularization radius for soft potentials (integrand zeroed inside).
    pub delta_reg: f64,
    /// Radius m of the smooth cutoff chi (0 below m, 1 above 2m).
    pub cutoff_m: f64,
    /// Comparison exponent varpi in (1/2, 1) for mu <= C M^varpi.
    pub varpi: f64,
}

impl KernelSpec {
    /// Kernel with the default regularization of half a grid spacing.
    pub fn for_grid(gamma: f64, grid: &VelocityGrid) -> Result<Self> {
        let mut cutoff_m: f64 = 0.5;
        if gamma < 0.0 && gamma > -3.0 {
            cutoff_m = cutoff_m.min(4.0f64.powf(-1.0 / (gamma + 3.0)));
        }
        let spec = KernelSpec {
            gamma,
            b0: AngularKernel::AbsCos,
            delta_reg: 0.5 * grid.spacing(),
            cutoff_m,
            varpi: 0.75,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > -3.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma = {} outside (-3, 1]",
                self.gamma
            )));
        }
        if self.gamma < 0.0 {
            let m_max = 4.0f64.powf(-1.0 / (self.gamma + 3.0));
            if self.cutoff_m > m_max + 1e-14 {
                return Err(Error::config(format!(
                    "cutoff_m = {} exceeds 4^(-1/(gamma+3)) = {m_max}",
                    self.cutoff_m
                )));
            }
        }
        if !(self.varpi > 0.5 && self.varpi < 1.0) {
            return Err(Error::config("varpi must lie in (1/2, 1)"));
        }
        if self.delta_reg < 0.0 {
            return Err(Error::config("delta_reg must be nonnegative"));
        }
        Ok(())
    }

    /// Cubic smoothstep cutoff: 0 for |s| <= m, 1 for |s| >= 2m.
    #[inline]
    pub fn chi(&self, s: f64) -> f64 {
        let m = self.cutoff_m;
        let a = (s.abs() - m) / m;
        if a <= 0.0 {
            0.0
        } else if a >= 1.0 {
            1.0
        } else {
            a * a * (3.0 - 2.0 * a)
        }
    }
}

/// Comparability constants between a local Maxwellian mu and the global M on
/// the grid: largest c with c M <= mu and smallest C with mu <= C M^varpi.
pub fn maxwellian_comparability(
    p_local: &MaxwellianParams,
    p_global: &MaxwellianParams,
    varpi: f64,
    grid: &VelocityGrid,
) -> (f64, f64) {
    let mu = maxwellian(p_local, grid);
    let m = maxwellian(p_global, grid);
    let mut c_low = f64::INFINITY;
    let mut c_high = 0.0f64;
    for i in 0..grid.len() {
        c_low = c_low.min(mu[i] / m[i]);
        c_high = c_high.max(mu[i] / m[i].powf(varpi));
    }
    (c_low, c_high)
}

/// Orthonormal-ish frame (k, e1, e2) anchored to the x-axis so that the frame
/// rule commutes with sign flips and swaps of the last two components.
#[inline]
fn aligned_frame(k: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // e1 = normalize(k x ex); fall back to ey when k is along ex.
    let cx = [0.0, k[2], -k[1]];
    let n2 = cx[1] * cx[1] + cx[2] * cx[2];
    if n2 > 1e-24 {
        let inv = 1.0 / n2.sqrt();
        let e1 = [0.0, cx[1] * inv, cx[2] * inv];
        let e2 = [
            k[1] * e1[2] - k[2] * e1[1],
            k[2] * e1[0] - k[0] * e1[2],
            k[0] * e1[1] - k[1] * e1[0],
        ];
        (e1, e2)
    } else {
        let e1 = [0.0, 1.0, 0.0];
        let e2 = [
            k[1] * e1[2] - k[2] * e1[1],
            k[2] * e1[0] - k[0] * e1[2],
            k[0] * e1[1] - k[1] * e1[0],
        ];
        (e1, e2)
    }
}

#[inline]
fn kernel_radial(spec: &KernelSpec, r2: f64) -> f64 {
    if r2 <= 0.0 {
        return 0.0;
    }
    if spec.gamma < 0.0 && r2 < spec.delta_reg * spec.delta_reg {
        return 0.0;
    }
    if spec.gamma == 0.0 {
        1.0
    } else if spec.gamma == 1.0 {
        r2.sqrt()
    } else if spec.gamma == -1.0 {
        1.0 / r2.sqrt()
    } else {
        r2.sqrt().powf(spec.gamma)
    }
}

/// Q(G1, G2) by direct quadrature over (u, omega).
pub fn collide(g1: &[f64], g2: &[f64], spec: &KernelSpec, grid: &VelocityGrid) -> VProfile {
    let n = grid.len();
    let rows: Vec<usize> = (0..n).collect();
    collide_rows(g1, g2, &rows, spec, grid, false)
}

/// Q(G1, G2) restricted to the given output rows.
pub fn collide_rows(
    g1: &[f64],
    g2: &[f64],
    rows: &[usize],
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> VProfile {
    let n = grid.len();
    let mut out = vec![0.0; n];
    let work = |i: usize| -> f64 {
        let vi = grid.nodes[i];
        let mut acc = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let vj = grid.nodes[j];
            let d = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let kern = kernel_radial(spec, r2) * grid.quad_weights[j];
            if kern == 0.0 {
                continue;
            }
            let r = r2.sqrt();
            let k = [d[0] / r, d[1] / r, d[2] / r];
            let (e1, e2) = aligned_frame(k);
            let loss = g1[i] * g2[j];
            for (a, ((c, phi), ws)) in grid
                .sphere_params
                .iter()
                .zip(grid.sphere_weights.iter())
                .enumerate()
            {
                let _ = a;
                let b0 = spec.b0.eval(*c);
                if b0 == 0.0 {
                    continue;
                }
                let s = (1.0 - c * c).max(0.0).sqrt();
                let (sp, cp) = phi.sin_cos();
                let om = [
                    c * k[0] + s * (cp * e1[0] + sp * e2[0]),
                    c * k[1] + s * (cp * e1[1] + sp * e2[1]),
                    c * k[2] + s * (cp * e1[2] + sp * e2[2]),
                ];
                // (v - u).omega = r c
                let proj = r * c;
                let vp = [vi[0] - proj * om[0], vi[1] - proj * om[1], vi[2] - proj * om[2]];
                let up = [vj[0] + proj * om[0], vj[1] + proj * om[1], vj[2] + proj * om[2]];
                let gain = grid.interpolate(g1, vp) * grid.interpolate(g2, up);
                acc += kern * ws * b0 * (gain - loss);
            }
        }
        acc
    };
    if par {
        let vals: Vec<(usize, f64)> = rows.par_iter().map(|&i| (i, work(i))).collect();
        for (i, v) in vals {
            out[i] = v;
        }
    } else {
        for &i in rows {
            out[i] = work(i);
        }
    }
    out
}

/// Cellwise collision evaluation on node-major fields
/// (`f[node * n_cells + cell]`): returns Q(F_c, F_c) per cell, or the
/// difference Q(F_c, F_c) - Q(G_c, G_c) when a second field is given
/// (evaluated as Q(d, F) + Q(G, d) with d = F - G, in one sweep).
/// Only the requested output rows are filled; the inner loop runs over cells
/// so the work vectorizes.
pub fn collide_diff_fields(
    f: &[f64],
    g_opt: Option<&[f64]>,
    n_cells: usize,
    rows: &[usize],
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> Vec<f64> {
    let n = grid.len();
    assert_eq!(f.len(), n * n_cells);
    if let Some(g) = g_opt {
        assert_eq!(g.len(), n * n_cells);
    }
    let d: Option<Vec<f64>> =
        g_opt.map(|g| f.iter().zip(g.iter()).map(|(a, b)| a - b).collect());

    let row_work = |i: usize, out_row: &mut [f64]| {
        let vi = grid.nodes[i];
        let mut gain_a = vec![0.0; n_cells];
        let mut gain_b = vec![0.0; n_cells];
        let mut dvp = vec![0.0; n_cells];
        let mut fup = vec![0.0; n_cells];
        let mut gvp = vec![0.0; n_cells];
        let mut dup = vec![0.0; n_cells];
        for j in 0..n {
            if j == i {
                continue;
            }
            let vj = grid.nodes[j];
            let dv = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
            let r2 = dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2];
            let kern = kernel_radial(spec, r2) * grid.quad_weights[j];
            if kern == 0.0 {
                continue;
            }
            let r = r2.sqrt();
            let k = [dv[0] / r, dv[1] / r, dv[2] / r];
            let (e1, e2) = aligned_frame(k);
            for ((c, phi), ws) in grid.sphere_params.iter().zip(grid.sphere_weights.iter()) {
                let b0 = spec.b0.eval(*c);
                if b0 == 0.0 {
                    continue;
                }
                let w = kern * ws * b0;
                let s = (1.0 - c * c).max(0.0).sqrt();
                let (sp, cp) = phi.sin_cos();
                let om = [
                    c * k[0] + s * (cp * e1[0] + sp * e2[0]),
                    c * k[1] + s * (cp * e1[1] + sp * e2[1]),
                    c * k[2] + s * (cp * e1[2] + sp * e2[2]),
                ];
                let proj = r * c;
                let vp = [vi[0] - proj * om[0], vi[1] - proj * om[1], vi[2] - proj * om[2]];
                let up = [vj[0] + proj * om[0], vj[1] + proj * om[1], vj[2] + proj * om[2]];
                let (ivp, wvp) = grid.trilinear_stencil(vp);
                let (iup, wup) = grid.trilinear_stencil(up);
                match &d {
                    None => {
                        // gain = F(v') F(u') per cell
                        for x in gain_a.iter_mut() {
                            *x = 0.0;
                        }
                        for t in 0..8 {
                            let base = ivp[t] * n_cells;
                            let wt = wvp[t];
                            for cidx in 0..n_cells {
                                gain_a[cidx] += wt * f[base + cidx];
                            }
                        }
                        for x in gain_b.iter_mut() {
                            *x = 0.0;
                        }
                        for t in 0..8 {
                            let base = iup[t] * n_cells;
                            let wt = wup[t];
                            for cidx in 0..n_cells {
                                gain_b[cidx] += wt * f[base + cidx];
                            }
                        }
                        let fi = &f[i * n_cells..(i + 1) * n_cells];
                        let fj = &f[j * n_cells..(j + 1) * n_cells];
                        for cidx in 0..n_cells {
                            out_row[cidx] +=
                                w * (gain_a[cidx] * gain_b[cidx] - fi[cidx] * fj[cidx]);
                        }
                    }
                    Some(dd) => {
                        let g = g_opt.unwrap();
                        // d(v'), F(u'), G(v'), d(u')
                        for cidx in 0..n_cells {
                            dvp[cidx] = 0.0;
                            fup[cidx] = 0.0;
                            gvp[cidx] = 0.0;
                            dup[cidx] = 0.0;
                        }
                        for t in 0..8 {
                            let bv = ivp[t] * n_cells;
                            let bu = iup[t] * n_cells;
                            let (w1, w2) = (wvp[t], wup[t]);
                            for cidx in 0..n_cells {
                                dvp[cidx] += w1 * dd[bv + cidx];
                                gvp[cidx] += w1 * g[bv + cidx];
                                fup[cidx] += w2 * f[bu + cidx];
                                dup[cidx] += w2 * dd[bu + cidx];
                            }
                        }
                        let di = &dd[i * n_cells..(i + 1) * n_cells];
                        let dj = &dd[j * n_cells..(j + 1) * n_cells];
                        let fj = &f[j * n_cells..(j + 1) * n_cells];
                        let gi = &g[i * n_cells..(i + 1) * n_cells];
                        for cidx in 0..n_cells {
                            let gain = dvp[cidx] * fup[cidx] + gvp[cidx] * dup[cidx];
                            let loss = di[cidx] * fj[cidx] + gi[cidx] * dj[cidx];
                            out_row[cidx] += w * (gain - loss);
                        }
                    }
                }
            }
        }
    };

    let mut out = vec![0.0; n * n_cells];
    if par {
        let results: Vec<(usize, Vec<f64>)> = rows
            .par_iter()
            .map(|&i| {
                let mut row = vec![0.0; n_cells];
                row_work(i, &mut row);
                (i, row)
            })
            .collect();
        for (i, row) in results {
            out[i * n_cells..(i + 1) * n_cells].copy_from_slice(&row);
        }
    } else {
        for &i in rows {
            let mut row = vec![0.0; n_cells];
            row_work(i, &mut row);
            out[i * n_cells..(i + 1) * n_cells].copy_from_slice(&row);
        }
    }
    out
}

/// b0-weighted loss frequency of a profile:
/// nu(v) = sum_u sum_omega w_u w_omega |v-u|^gamma b0 G(u).
pub fn b0_weighted_frequency(g: &[f64], spec: &KernelSpec, grid: &VelocityGrid) -> VProfile {
    let n = grid.len();
    let b0_total: f64 = grid
        .sphere_params
        .iter()
        .zip(grid.sphere_weights.iter())
        .map(|((c, _), w)| spec.b0.eval(*c) * w)
        .sum();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let vi = grid.nodes[i];
        let mut acc = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let vj = grid.nodes[j];
            let d = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            acc += kernel_radial(spec, r2) * grid.quad_weights[j] * g[j];
        }
        out[i] = acc * b0_total;
    }
    out
}

/// Remove the components of a profile along the collision invariants
/// {1, v1, v2, v3, |v|^2} in the quadrature inner product.
pub fn conservative_correction(qraw: &[f64], grid: &VelocityGrid) -> VProfile {
    let n = grid.len();
    let mut basis: Vec<VProfile> = Vec::with_capacity(5);
    basis.push(vec![1.0; n]);
    for a in 0..3 {
        basis.push(grid.nodes.iter().map(|v| v[a]).collect());
    }
    basis.push(
        grid.nodes
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .collect(),
    );
    let mut gram = DMatrix::zeros(5, 5);
    let mut rhs = nalgebra::DVector::zeros(5);
    for i in 0..5 {
        for j in 0..5 {
            gram[(i, j)] = inner(&basis[i], &basis[j], grid);
        }
        rhs[i] = inner(&basis[i], qraw, grid);
    }
    let coef = gram
        .lu()
        .solve(&rhs)
        .expect("collision-invariant Gram matrix is nonsingular");
    let mut out = qraw.to_vec();
    for (b, c) in basis.iter().zip(coef.iter()) {
        for (o, bv) in out.iter_mut().zip(b.iter()) {
            *o -= c * bv;
        }
    }
    out
}

/// Conservation fix with a Maxwellian-shaped carrier: subtracts the
/// combination of {carrier, v carrier, |v|^2 carrier} that zeroes the
/// invariant moments. Unlike the plain polynomial projection this never
/// injects mass into the exponential tails, which matters inside the
/// evolution loop.
pub fn conservative_correction_weighted(
    qraw: &[f64],
    carrier: &[f64],
    grid: &VelocityGrid,
) -> VProfile {
    let n = grid.len();
    let mut inv: Vec<VProfile> = Vec::with_capacity(5);
    inv.push(vec![1.0; n]);
    for a in 0..3 {
        inv.push(grid.nodes.iter().map(|v| v[a]).collect());
    }
    inv.push(
        grid.nodes
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .collect(),
    );
    let psi: Vec<VProfile> = inv
        .iter()
        .map(|b| (0..n).map(|i| b[i] * carrier[i]).collect())
        .collect();
    let mut gram = DMatrix::zeros(5, 5);
    let mut rhs = nalgebra::DVector::zeros(5);
    for r in 0..5 {
        for c in 0..5 {
            gram[(r, c)] = inner(&inv[r], &psi[c], grid);
        }
        rhs[r] = inner(&inv[r], qraw, grid);
    }
    let coef = gram
        .lu()
        .solve(&rhs)
        .expect("weighted invariant Gram is nonsingular");
    let mut out = qraw.to_vec();
    for (p, c) in psi.iter().zip(coef.iter()) {
        for (o, pv) in out.iter_mut().zip(p.iter()) {
            *o -= c * pv;
        }
    }
    out
}

/// Gamma(g1, g2) = mu^{-1/2} Q(sqrt(mu) g1, sqrt(mu) g2).
pub fn gamma_bilinear(
    g1: &[f64],
    g2: &[f64],
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
) -> VProfile {
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let a1: Vec<f64> = g1.iter().zip(sqmu.iter()).map(|(a, s)| a * s).collect();
    let a2: Vec<f64> = g2.iter().zip(sqmu.iter()).map(|(a, s)| a * s).collect();
    let q = collide(&a1, &a2, spec, grid);
    q.iter().zip(sqmu.iter()).map(|(a, s)| a / s).collect()
}

/// Direct application of the linearized operator at mu:
/// L g = -mu^{-1/2} { Q(sqrt(mu) g, mu) + Q(mu, sqrt(mu) g) }.
pub fn apply_linearized(
    g: &[f64],
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
) -> VProfile {
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let a: Vec<f64> = g.iter().zip(sqmu.iter()).map(|(x, s)| x * s).collect();
    let q1 = collide(&a, &mu, spec, grid);
    let q2 = collide(&mu, &a, spec, grid);
    (0..grid.len())
        .map(|i| -(q1[i] + q2[i]) / sqmu[i])
        .collect()
}

/// Which Maxwellian the operator was linearized at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linearization {
    Local,
    Global,
}

/// Operator tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    L,
    LM,
    K,
    KChi,
    KOneMinusChi,
    NuDiag,
}

/// How the matrix was assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyRoute {
    /// Columns are the direct quadrature evaluation L(e_j); the matrix then
    /// reproduces `apply_linearized` exactly, which the expansion hierarchy
    /// relies on.
    Direct,
    /// Assembled from the symmetric collision (Dirichlet) form; symmetric and
    /// positive semidefinite to machine precision.
    Symmetric,
}

/// Dense operator on velocity profiles with its provenance.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub matrix: DMatrix<f64>,
    pub kind: OperatorKind,
    pub route: AssemblyRoute,
    pub params: MaxwellianParams,
    pub spec: KernelSpec,
}

impl LinearOperator {
    pub fn apply(&self, g: &[f64]) -> VProfile {
        let v = nalgebra::DVector::from_column_slice(g);
        (&self.matrix * v).iter().copied().collect()
    }
}

/// Assemble the linearized operator at `p` as a dense matrix.
pub fn assemble_l(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    around: Linearization,
    route: AssemblyRoute,
    par: bool,
) -> LinearOperator {
    let kind = match around {
        Linearization::Local => OperatorKind::L,
        Linearization::Global => OperatorKind::LM,
    };
    let matrix = match route {
        AssemblyRoute::Direct => assemble_direct(p, spec, grid, par),
        AssemblyRoute::Symmetric => assemble_symmetric(p, spec, grid, par),
    };
    LinearOperator {
        matrix,
        kind,
        route,
        params: *p,
        spec: *spec,
    }
}

/// Direct assembly composed with the weighted conservation fix, the
/// linearization of the conservation-corrected collision operator: every
/// column output has exactly zero discrete mass/momentum/energy moments, so
/// the chi directions span the operator's left null space exactly.
pub fn assemble_l_conservative(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> LinearOperator {
    let mut op = assemble_l(p, spec, grid, Linearization::Local, AssemblyRoute::Direct, par);
    let n = grid.len();
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let mut inv: Vec<VProfile> = Vec::with_capacity(5);
    inv.push(vec![1.0; n]);
    for a in 0..3 {
        inv.push(grid.nodes.iter().map(|v| v[a]).collect());
    }
    inv.push(
        grid.nodes
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .collect(),
    );
    let psi: Vec<VProfile> = inv
        .iter()
        .map(|b| (0..n).map(|i| b[i] * mu[i]).collect())
        .collect();
    let mut gram = DMatrix::zeros(5, 5);
    for r in 0..5 {
        for c in 0..5 {
            gram[(r, c)] = inner(&inv[r], &psi[c], grid);
        }
    }
    let gram_inv = gram.try_inverse().expect("weighted invariant Gram nonsingular");
    // Work on M = -D_{sqmu} L D_{1/sqmu}: columns of M are Q-level outputs.
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = -op.matrix[(i, j)] * sqmu[i] / sqmu[j];
        }
    }
    // Invariant moments of each column, then subtract the carrier span.
    let mut btwm = DMatrix::zeros(5, n);
    for (k, b) in inv.iter().enumerate() {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += b[i] * grid.quad_weights[i] * m[(i, j)];
            }
            btwm[(k, j)] = acc;
        }
    }
    let coef = gram_inv * btwm;
    for j in 0..n {
        for k in 0..5 {
            let c = coef[(k, j)];
            if c != 0.0 {
                for i in 0..n {
                    m[(i, j)] -= c * psi[k][i];
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            op.matrix[(i, j)] = -m[(i, j)] * sqmu[j] / sqmu[i];
        }
    }
    op
}

/// Direct scatter assembly: accumulates Q(sqrt(mu) g, mu) + Q(mu, sqrt(mu) g)
/// as a matrix in g and conjugates by the sqrt(mu) scalings.
fn assemble_direct(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> DMatrix<f64> {
    let n = grid.len();
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();

    let row_block = |i: usize| -> Vec<f64> {
        let mut row = vec![0.0; n];
        let vi = grid.nodes[i];
        for j in 0..n {
            if j == i {
                continue;
            }
            let vj = grid.nodes[j];
            let d = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let kern = kernel_radial(spec, r2) * grid.quad_weights[j];
            if kern == 0.0 {
                continue;
            }
            let r = r2.sqrt();
            let k = [d[0] / r, d[1] / r, d[2] / r];
            let (e1, e2) = aligned_frame(k);
            for ((c, phi), ws) in grid.sphere_params.iter().zip(grid.sphere_weights.iter()) {
                let b0 = spec.b0.eval(*c);
                if b0 == 0.0 {
                    continue;
                }
                let w = kern * ws * b0;
                let s = (1.0 - c * c).max(0.0).sqrt();
                let (sp, cp) = phi.sin_cos();
                let om = [
                    c * k[0] + s * (cp * e1[0] + sp * e2[0]),
                    c * k[1] + s * (cp * e1[1] + sp * e2[1]),
                    c * k[2] + s * (cp * e1[2] + sp * e2[2]),
                ];
                let proj = r * c;
                let vp = [vi[0] - proj * om[0], vi[1] - proj * om[1], vi[2] - proj * om[2]];
                let up = [vj[0] + proj * om[0], vj[1] + proj * om[1], vj[2] + proj * om[2]];
                let (ivp, wvp) = grid.trilinear_stencil(vp);
                let (iup, wup) = grid.trilinear_stencil(up);
                let mu_up = (0..8).map(|k| wup[k] * mu[iup[k]]).sum::<f64>();
                let mu_vp = (0..8).map(|k| wvp[k] * mu[ivp[k]]).sum::<f64>();
                // Q(a, mu): gain a(v') mu(u'), loss a(v) mu(u)
                for t in 0..8 {
                    row[ivp[t]] += w * wvp[t] * mu_up;
                }
                row[i] -= w * mu[j];
                // Q(mu, a): gain mu(v') a(u'), loss mu(v) a(u)
                for t in 0..8 {
                    row[iup[t]] += w * wup[t] * mu_vp;
                }
                row[j] -= w * mu[i];
            }
        }
        // L = -(1/sqrt(mu_i)) row * sqrt(mu_j)
        for j in 0..n {
            row[j] *= -sqmu[j] / sqmu[i];
        }
        row
    };

    let rows: Vec<Vec<f64>> = if par {
        (0..n).into_par_iter().map(row_block).collect()
    } else {
        (0..n).map(row_block).collect()
    };
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..n {
            m[(i, j)] = row[j];
        }
    }
    m
}

/// Symmetric assembly from the collision Dirichlet form
/// S(psi, phi) = 1/4 sum B mu(v) mu(u) [Delta psi][Delta phi],
/// Delta psi = psi(v) + psi(u) - psi(v') - psi(u'), psi = g / sqrt(mu).
///
/// Off-grid psi values use quadratic interpolation so that psi in
/// span{1, v, |v|^2} lies in the exact null space of the form.
fn assemble_symmetric(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> DMatrix<f64> {
    let n = grid.len();
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let w_cell = grid.quad_weights[0];

    // Partition the (v, u) pairs by v-band; each band accumulates a full
    // dense S so bands can run independently, then sum.
    let bands: usize = if par { rayon::current_num_threads().max(1) } else { 1 };
    let band_size = n.div_ceil(bands);
    let band_of = |b: usize| -> DMatrix<f64> {
        let lo = b * band_size;
        let hi = ((b + 1) * band_size).min(n);
        let mut s = DMatrix::zeros(n, n);
        let mut idx = [0usize; 56];
        let mut wts = [0f64; 56];
        for i in lo..hi {
            let vi = grid.nodes[i];
            for j in (i + 1)..n {
                let vj = grid.nodes[j];
                let d = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let kern = kernel_radial(spec, r2) * grid.quad_weights[j];
                if kern == 0.0 {
                    continue;
                }
                let r = r2.sqrt();
                let k = [d[0] / r, d[1] / r, d[2] / r];
                let (e1, e2) = aligned_frame(k);
                // Pairs (i, j) and (j, i) give identical brackets; count twice.
                let pair_w = 2.0 * 0.25 * w_cell * kern * mu[i] * mu[j];
                for ((c, phi), ws) in
                    grid.sphere_params.iter().zip(grid.sphere_weights.iter())
                {
                    let b0 = spec.b0.eval(*c);
                    if b0 == 0.0 {
                        continue;
                    }
                    let coeff = pair_w * ws * b0;
                    let s_ang = (1.0 - c * c).max(0.0).sqrt();
                    let (sp, cp) = phi.sin_cos();
                    let om = [
                        c * k[0] + s_ang * (cp * e1[0] + sp * e2[0]),
                        c * k[1] + s_ang * (cp * e1[1] + sp * e2[1]),
                        c * k[2] + s_ang * (cp * e1[2] + sp * e2[2]),
                    ];
                    let proj = r * c;
                    let vp = [
                        vi[0] - proj * om[0],
                        vi[1] - proj * om[1],
                        vi[2] - proj * om[2],
                    ];
                    let up = [
                        vj[0] + proj * om[0],
                        vj[1] + proj * om[1],
                        vj[2] + proj * om[2],
                    ];
                    let (ivp, wvp) = grid.triquadratic_stencil(vp);
                    let (iup, wup) = grid.triquadratic_stencil(up);
                    idx[0] = i;
                    wts[0] = 1.0;
                    idx[1] = j;
                    wts[1] = 1.0;
                    for t in 0..27 {
                        idx[2 + t] = ivp[t];
                        wts[2 + t] = -wvp[t];
                        idx[29 + t] = iup[t];
                        wts[29 + t] = -wup[t];
                    }
                    for a in 0..56 {
                        let wa = coeff * wts[a];
                        if wa == 0.0 {
                            continue;
                        }
                        let ia = idx[a];
                        for b in a..56 {
                            let val = wa * wts[b];
                            s[(ia, idx[b])] += val;
                            if b != a {
                                s[(idx[b], ia)] += val;
                            }
                        }
                    }
                }
            }
        }
        s
    };
    let mut s = if par {
        (0..bands)
            .into_par_iter()
            .map(band_of)
            .reduce(|| DMatrix::zeros(n, n), |a, b| a + b)
    } else {
        band_of(0)
    };
    // L = (1/w) D^{-1} S D^{-1}; S is symmetric entry-for-entry since every
    // scatter writes (a,b) and (b,a) with the same product.
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] /= w_cell * sqmu[i] * sqmu[j];
        }
    }
    s
}

/// Split nu - K of a global-Maxwellian linearized operator, with the smooth
/// cutoff applied entrywise in |v - u|.
///
/// The diagonal frequency is the b0-weighted quadrature loss frequency, which
/// matches the loss part of the direct assembly exactly.
pub fn kernel_split(
    op: &LinearOperator,
    spec: &KernelSpec,
    grid: &VelocityGrid,
) -> Result<(LinearOperator, LinearOperator, LinearOperator)> {
    if op.kind != OperatorKind::LM {
        return Err(Error::contract(
            "kernel_split expects the global-Maxwellian linearized operator",
        ));
    }
    let n = grid.len();
    let m_prof = maxwellian(&op.params, grid);
    let nu = b0_weighted_frequency(&m_prof, spec, grid);
    let mut nu_mat = DMatrix::zeros(n, n);
    for i in 0..n {
        nu_mat[(i, i)] = nu[i];
    }
    let mut k_chi = DMatrix::zeros(n, n);
    let mut k_1m = DMatrix::zeros(n, n);
    for i in 0..n {
        let vi = grid.nodes[i];
        for j in 0..n {
            let vj = grid.nodes[j];
            let dr = ((vi[0] - vj[0]).powi(2)
                + (vi[1] - vj[1]).powi(2)
                + (vi[2] - vj[2]).powi(2))
            .sqrt();
            let kij = nu_mat[(i, j)] - op.matrix[(i, j)];
            let c = spec.chi(dr);
            k_chi[(i, j)] = kij * c;
            k_1m[(i, j)] = kij * (1.0 - c);
        }
    }
    let mk = |matrix, kind| LinearOperator {
        matrix,
        kind,
        route: op.route,
        params: op.params,
        spec: *spec,
    };
    Ok((
        mk(nu_mat, OperatorKind::NuDiag),
        mk(k_chi, OperatorKind::KChi),
        mk(k_1m, OperatorKind::KOneMinusChi),
    ))
}

/// The five parts of L g = L_M g - sum_i I_i(g), built from Gamma and
/// Gamma_M with the difference profiles (sqrt(mu)-sqrt(M))/sqrt(mu), M/sqrt(mu)
/// and (mu-M)/sqrt(mu). All parts are evaluated with the shared quadrature so
/// the identity is algebraically exact.
#[derive(Debug, Clone)]
pub struct LmDecomposition {
    pub lm_part: VProfile,
    pub i1: VProfile,
    pub i2: VProfile,
    pub i3: VProfile,
    pub i4: VProfile,
}

pub fn decompose_l(
    g: &[f64],
    p_local: &MaxwellianParams,
    p_global: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
) -> LmDecomposition {
    let n = grid.len();
    let mu = maxwellian(p_local, grid);
    let mm = maxwellian(p_global, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let sqm: Vec<f64> = mm.iter().map(|x| x.sqrt()).collect();

    // Nodal ingredient profiles.
    let diff_ratio: Vec<f64> = (0..n).map(|i| (sqm[i] - sqmu[i]) / sqmu[i]).collect();
    let m_over: Vec<f64> = (0..n).map(|i| mm[i] / sqmu[i]).collect();
    let mu_minus_m_over: Vec<f64> = (0..n).map(|i| (mu[i] - mm[i]) / sqmu[i]).collect();
    let g_scaled: Vec<f64> = (0..n).map(|i| (sqmu[i] - sqm[i]) * g[i] / sqmu[i]).collect();

    let gamma_m = |a: &[f64], b: &[f64]| -> VProfile {
        let a1: Vec<f64> = a.iter().zip(sqm.iter()).map(|(x, s)| x * s).collect();
        let b1: Vec<f64> = b.iter().zip(sqm.iter()).map(|(x, s)| x * s).collect();
        let q = collide(&a1, &b1, spec, grid);
        (0..n).map(|i| q[i] / sqm[i]).collect()
    };
    let gamma_mu = |a: &[f64], b: &[f64]| -> VProfile {
        let a1: Vec<f64> = a.iter().zip(sqmu.iter()).map(|(x, s)| x * s).collect();
        let b1: Vec<f64> = b.iter().zip(sqmu.iter()).map(|(x, s)| x * s).collect();
        let q = collide(&a1, &b1, spec, grid);
        (0..n).map(|i| q[i] / sqmu[i]).collect()
    };

    // First/second argument sqrt(M) means the profile itself: Q(M, sqrt(M) g).
    let gm_left = gamma_m(&sqm, g);
    let i1: VProfile = (0..n).map(|i| diff_ratio[i] * gm_left[i]).collect();
    let i2 = gamma_mu(&m_over, &g_scaled);
    let i3 = gamma_mu(&mu_minus_m_over, g);

    let gm_right = gamma_m(g, &sqm);
    let i4a: VProfile = (0..n).map(|i| diff_ratio[i] * gm_right[i]).collect();
    let i4b = gamma_mu(&g_scaled, &m_over);
    let i4c = gamma_mu(g, &mu_minus_m_over);
    let i4: VProfile = (0..n).map(|i| i4a[i] + i4b[i] + i4c[i]).collect();

    let lm_part = apply_linearized(g, p_global, spec, grid);
    LmDecomposition {
        lm_part,
        i1,
        i2,
        i3,
        i4,
    }
}

/// Fitted constant of the weighted bilinear bound:
/// max over trials of ||wbar Gamma(g1,g2)||_nu /
/// (||e^{eta|v|^2} wbar g1||_inf ||wbar g2||_nu).
pub fn gamma_weighted_bound_constant(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    wbar: &[f64],
    nu: &[f64],
    eta: f64,
    trials: usize,
    seed: u64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = grid.len();
    let mut cmax = 0.0f64;
    for _ in 0..trials {
        let a1: f64 = rng.gen_range(0.3..1.2);
        let a2: f64 = rng.gen_range(0.3..1.2);
        let mk = |amp: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            grid.nodes
                .iter()
                .map(|v| {
                    let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    (c[0] * v[0] + c[1] * v[1] + c[2] * v[2]).sin() * (-amp * 0.3 * v2).exp()
                })
                .collect()
        };
        let g1 = mk(a1, &mut rng);
        let g2 = mk(a2, &mut rng);
        let gam = gamma_bilinear(&g1, &g2, p, spec, grid);
        let num = {
            let prof: Vec<f64> = (0..n).map(|i| wbar[i] * gam[i]).collect();
            crate::phase_grid::norm_nu(&prof, nu, grid)
        };
        let inf1 = (0..n)
            .map(|i| {
                let v = grid.nodes[i];
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                ((eta * v2).exp() * wbar[i] * g1[i]).abs()
            })
            .fold(0.0f64, f64::max);
        let den2 = {
            let prof: Vec<f64> = (0..n).map(|i| wbar[i] * g2[i]).collect();
            crate::phase_grid::norm_nu(&prof, nu, grid)
        };
        if inf1 * den2 > 0.0 {
            cmax = cmax.max(num / (inf1 * den2));
        }
    }
    cmax
}

/// Row-sum decay diagnostic for a kernel matrix: for each row i returns
/// nu^{-1}(v_i) sum_j |K_ij (w(v_i)/w(v_j)) e^{eta |v_i - v_j|^2}|, paired
/// with <v_i>^2 so callers can fit the C <v>^{-2} envelope.
pub fn kernel_rowsum_diagnostic(
    kmat: &DMatrix<f64>,
    nu: &[f64],
    weight: &[f64],
    eta: f64,
    grid: &VelocityGrid,
) -> Vec<(f64, f64)> {
    let n = grid.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let vi = grid.nodes[i];
        let mut acc = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let vj = grid.nodes[j];
            let d2 = (vi[0] - vj[0]).powi(2) + (vi[1] - vj[1]).powi(2) + (vi[2] - vj[2]).powi(2);
            acc += (kmat[(i, j)] * weight[i] / weight[j] * (eta * d2).exp()).abs();
        }
        let v2 = 1.0 + vi[0] * vi[0] + vi[1] * vi[1] + vi[2] * vi[2];
        out.push((acc / nu[i], v2));
    }
    out
}

/// Relative size of Q(mu, mu), normalized by the loss-operator bound
/// sup_v nu(v) times ||mu||; the continuum value is zero, so what remains is
/// pure interpolation error.
pub fn equilibrium_defect(
    p: &MaxwellianParams,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    par: bool,
) -> f64 {
    let mu = maxwellian(p, grid);
    let rows: Vec<usize> = (0..grid.len()).collect();
    let q = collide_rows(&mu, &mu, &rows, spec, grid, par);
    let nu = b0_weighted_frequency(&mu, spec, grid);
    let nu_sup = nu.iter().cloned().fold(0.0f64, f64::max);
    norm(&q, grid) / (nu_sup * norm(&mu, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::{build_velocity_grid, moments, norm_nu};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn grid8() -> VelocityGrid {
        build_velocity_grid(6.0, 8, 3).unwrap()
    }

    fn std_params() -> MaxwellianParams {
        MaxwellianParams::new(1.0, [0.0; 3], 1.0).unwrap()
    }

    #[test]
    fn equilibrium_defect_small_and_shrinking() {
        let p = std_params();
        let g8 = grid8();
        let k8 = KernelSpec::for_grid(1.0, &g8).unwrap();
        let d8 = equilibrium_defect(&p, &k8, &g8, false);
        assert!(d8 <= 0.05, "Q(mu,mu) defect {d8} too large on n=8");
        let g16 = build_velocity_grid(6.0, 16, 3).unwrap();
        let k16 = KernelSpec::for_grid(1.0, &g16).unwrap();
        let d16 = equilibrium_defect(&p, &k16, &g16, false);
        assert!(
            d8 / d16 >= 2.0,
            "refinement should at least halve the defect: {d8} -> {d16}"
        );
    }

    #[test]
    fn collide_is_bilinear() {
        let g = grid8();
        let k = KernelSpec::for_grid(1.0, &g).unwrap();
        let p = std_params();
        let mu = maxwellian(&p, &g);
        let pert: Vec<f64> = g
            .nodes
            .iter()
            .zip(mu.iter())
            .map(|(v, m)| m * (0.3 * v[0]).sin())
            .collect();
        let q1 = collide(&pert, &mu, &k, &g);
        let scaled: Vec<f64> = pert.iter().map(|x| 3.5 * x).collect();
        let q2 = collide(&scaled, &mu, &k, &g);
        for i in 0..g.len() {
            assert_relative_eq!(q2[i], 3.5 * q1[i], max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn conservative_correction_zeroes_invariant_moments() {
        let g = grid8();
        let k = KernelSpec::for_grid(-1.0, &g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = g
            .nodes
            .iter()
            .map(|v| {
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                (-0.3 * v2).exp() * (1.0 + 0.5 * rng.gen_range(-1.0..1.0))
            })
            .collect();
        let q = collide(&f, &f, &k, &g);
        let qc = conservative_correction(&q, &g);
        let scale = norm(&q, &g).max(1e-300);
        let m = moments(&qc, &g);
        assert!(m.rho.abs() <= 1e-12 * scale);
        for a in 0..3 {
            assert!(m.momentum[a].abs() <= 1e-12 * scale);
        }
        let e_inv: Vec<f64> = g
            .nodes
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .collect();
        assert!(inner(&e_inv, &qc, &g).abs() <= 1e-11 * scale);

        // Already-orthogonal input is unchanged.
        let qcc = conservative_correction(&qc, &g);
        for i in 0..g.len() {
            assert!((qcc[i] - qc[i]).abs() <= 1e-14 * scale);
        }
        // A pure invariant maps to zero.
        let ones = vec![1.0; g.len()];
        let z = conservative_correction(&ones, &g);
        assert!(z.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gamma_bilinear_matches_rescaled_q() {
        let g = grid8();
        let k = KernelSpec::for_grid(1.0, &g).unwrap();
        let p = std_params();
        let mu = maxwellian(&p, &g);
        let sq: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
        let gam = gamma_bilinear(&sq, &sq, &p, &k, &g);
        let q = collide(&mu, &mu, &k, &g);
        for i in 0..g.len() {
            assert_relative_eq!(gam[i], q[i] / sq[i], max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn gamma_weighted_bound_has_moderate_constant() {
        let g = grid8();
        let p = std_params();
        for gamma in [1.0, -1.0] {
            let k = KernelSpec::for_grid(gamma, &g).unwrap();
            let nu = crate::phase_grid::collision_frequency(&p, gamma, &g).unwrap();
            let spec_w = crate::phase_grid::WeightSpec {
                lambda1: 1.0,
                lambda2: 0.005,
                ..Default::default()
            };
            let wbar = spec_w.aux_weight(&g);
            let c = gamma_weighted_bound_constant(&p, &k, &g, &wbar, &nu, 0.05, 20, 11);
            assert!(c.is_finite() && c > 0.0);
            assert!(c < 100.0, "fitted Gamma bound constant {c} is implausible");
        }
    }

    #[test]
    fn direct_assembly_reproduces_direct_application() {
        let g = grid8();
        let k = KernelSpec::for_grid(1.0, &g).unwrap();
        let p = std_params();
        let op = assemble_l(&p, &k, &g, Linearization::Local, AssemblyRoute::Direct, false);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = g
            .nodes
            .iter()
            .map(|v| {
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                rng.gen_range(-1.0..1.0) * (-0.25 * v2).exp()
            })
            .collect();
        let via_matrix = op.apply(&f);
        let direct = apply_linearized(&f, &p, &k, &g);
        let scale = norm(&direct, &g).max(1e-300);
        let diff: Vec<f64> = (0..g.len()).map(|i| via_matrix[i] - direct[i]).collect();
        assert!(norm(&diff, &g) <= 1e-11 * scale);
    }

    #[test]
    fn symmetric_assembly_is_symmetric_psd_with_null_space() {
        let g = grid8();
        let p = std_params();
        for gamma in [1.0, -1.0] {
            let k = KernelSpec::for_grid(gamma, &g).unwrap();
            let op = assemble_l(&p, &k, &g, Linearization::Local, AssemblyRoute::Symmetric, false);
            let a = &op.matrix;
            let asym = (a - a.transpose()).norm() / a.norm();
            assert!(asym <= 1e-8, "asymmetry {asym} too large for gamma={gamma}");

            let eig = nalgebra::SymmetricEigen::new(a.clone());
            let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &x| m.min(x));
            assert!(lmin >= -1e-8 * lmax, "min eigenvalue {lmin} below PSD slack");

            // Null-space residual relative to the operator norm.
            let basis = crate::macro_micro::chi_basis(&p, &g).unwrap();
            for chi in &basis.chi {
                let lchi = op.apply(chi);
                let r = norm(&lchi, &g) / (lmax * norm(chi, &g));
                assert!(r <= 0.05, "null-space residual {r} too large (gamma={gamma})");
            }
        }
    }

    #[test]
    fn kernel_split_partition_of_unity() {
        let g = grid8();
        let k = KernelSpec::for_grid(-1.0, &g).unwrap();
        let p = std_params();
        let op = assemble_l(&p, &k, &g, Linearization::Global, AssemblyRoute::Direct, false);
        let (nu_d, k_chi, k_1m) = kernel_split(&op, &k, &g).unwrap();
        let n = g.len();
        let kfull = {
            let mut m = nu_d.matrix.clone();
            m -= &op.matrix;
            m
        };
        let recomposed = &k_chi.matrix + &k_1m.matrix;
        let diff = (&recomposed - &kfull).norm();
        assert!(diff <= 1e-12 * kfull.norm().max(1e-300));
        // chi kills the diagonal entirely.
        for i in 0..n {
            assert_eq!(k_chi.matrix[(i, i)], 0.0);
        }
        // Local operator is rejected.
        let op_local = assemble_l(&p, &k, &g, Linearization::Local, AssemblyRoute::Direct, false);
        assert!(kernel_split(&op_local, &k, &g).is_err());
    }

    #[test]
    fn kernel_rowsums_decay_like_inverse_square_bracket() {
        let g = grid8();
        let p = std_params();
        let w_spec = crate::phase_grid::WeightSpec::default();
        let w = crate::phase_grid::weight_w(0.0, &w_spec, &g).unwrap();
        for gamma in [1.0, -1.0] {
            let k = KernelSpec::for_grid(gamma, &g).unwrap();
            let op = assemble_l(&p, &k, &g, Linearization::Global, AssemblyRoute::Direct, false);
            let (_, k_chi, _) = kernel_split(&op, &k, &g).unwrap();
            let nu = crate::phase_grid::collision_frequency(&p, gamma, &g).unwrap();
            let mat = if gamma >= 0.0 {
                // Hard potentials use the full kernel.
                let mut m = DMatrix::zeros(g.len(), g.len());
                let nu_b0 = b0_weighted_frequency(&maxwellian(&p, &g), &k, &g);
                for i in 0..g.len() {
                    for j in 0..g.len() {
                        m[(i, j)] = -op.matrix[(i, j)];
                    }
                    m[(i, i)] += nu_b0[i];
                }
                m
            } else {
                k_chi.matrix.clone()
            };
            let rows = kernel_rowsum_diagnostic(&mat, &nu, &w, 0.02, &g);
            let ratios: Vec<f64> = rows.iter().map(|(s, v2)| s * v2).collect();
            let cmax = ratios.iter().cloned().fold(0.0f64, f64::max);
            assert!(cmax.is_finite() && cmax > 0.0);
            let mut sorted = ratios.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = sorted[sorted.len() / 2];
            assert!(
                cmax <= 25.0 * med,
                "rowsum envelope not captured by a single constant: max {cmax}, median {med} (gamma={gamma})"
            );
        }
    }

    #[test]
    fn decomposition_identity_and_degenerate_case() {
        let g = grid8();
        let p = std_params();
        for gamma in [1.0, -1.0] {
            let k = KernelSpec::for_grid(gamma, &g).unwrap();
            // Degenerate: local == global.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
            let f: Vec<f64> = g
                .nodes
                .iter()
                .map(|v| {
                    let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    rng.gen_range(-1.0..1.0) * (-0.2 * v2).exp()
                })
                .collect();
            let dec = decompose_l(&f, &p, &p, &k, &g);
            let lm = apply_linearized(&f, &p, &k, &g);
            let sc = norm(&lm, &g).max(1e-300);
            for i in 0..g.len() {
                assert!(dec.i1[i].abs() <= 1e-12 * sc);
                assert!(dec.i2[i].abs() <= 1e-12 * sc);
                assert!(dec.i3[i].abs() <= 1e-12 * sc);
                assert!(dec.i4[i].abs() <= 1e-12 * sc);
                assert!((dec.lm_part[i] - lm[i]).abs() <= 1e-12 * sc);
            }

            // Identity for distinct parameter sets.
            let p_loc = MaxwellianParams::new(1.1, [0.08, -0.03, 0.02], 1.05).unwrap();
            let dec2 = decompose_l(&f, &p_loc, &p, &k, &g);
            let lg = apply_linearized(&f, &p_loc, &k, &g);
            let mut resid = vec![0.0; g.len()];
            for i in 0..g.len() {
                resid[i] = lg[i]
                    - (dec2.lm_part[i] - dec2.i1[i] - dec2.i2[i] - dec2.i3[i] - dec2.i4[i]);
            }
            let rel = norm(&resid, &g) / norm(&lg, &g).max(1e-300);
            assert!(rel <= 1e-8, "decomposition identity residual {rel} (gamma={gamma})");
        }
    }

    #[test]
    fn decomposition_small_near_global() {
        let g = grid8();
        let p_glob = std_params();
        let k = KernelSpec::for_grid(1.0, &g).unwrap();
        let p_loc = MaxwellianParams::new(1.004, [0.003, 0.0, 0.0], 1.003).unwrap();
        let nu = crate::phase_grid::collision_frequency(&p_glob, 1.0, &g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let f: Vec<f64> = g
                .nodes
                .iter()
                .map(|v| {
                    let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    rng.gen_range(-1.0..1.0) * (-0.2 * v2).exp()
                })
                .collect();
            let dec = decompose_l(&f, &p_loc, &p_glob, &k, &g);
            let total: Vec<f64> = (0..g.len())
                .map(|i| dec.i1[i] + dec.i2[i] + dec.i3[i] + dec.i4[i])
                .collect();
            let lhs = norm(&total, &g);
            let rhs = norm_nu(&f, &nu, &g);
            assert!(
                lhs <= 0.2 * rhs,
                "near-global correction too large: {lhs} vs 0.2*{rhs}"
            );
        }
    }

    #[test]
    fn comparability_constants_exist_on_grid() {
        let g = grid8();
        let p_loc = MaxwellianParams::local(1.05, [0.02, 0.0, 0.0], 1.0).unwrap();
        let p_glob = MaxwellianParams::global(1.0, 1.0).unwrap();
        let (c_low, c_high) = maxwellian_comparability(&p_loc, &p_glob, 0.75, &g);
        assert!(c_low > 0.0 && c_low.is_finite());
        assert!(c_high > 0.0 && c_high.is_finite());
    }

    #[test]
    fn cellwise_sweep_matches_single_profile_route() {
        let g = grid8();
        let k = KernelSpec::for_grid(-1.0, &g).unwrap();
        let p = std_params();
        let mu = maxwellian(&p, &g);
        let n = g.len();
        let n_cells = 3usize;
        let mut f = vec![0.0; n * n_cells];
        let mut gg = vec![0.0; n * n_cells];
        for c in 0..n_cells {
            for i in 0..n {
                let v = g.nodes[i];
                f[i * n_cells + c] =
                    mu[i] * (1.0 + 0.1 * (c as f64 + 1.0) * (0.4 * v[0]).sin());
                gg[i * n_cells + c] = mu[i] * (1.0 + 0.02 * c as f64);
            }
        }
        let rows: Vec<usize> = (0..n).collect();
        let qq = collide_diff_fields(&f, None, n_cells, &rows, &k, &g, false);
        let dq = collide_diff_fields(&f, Some(&gg), n_cells, &rows, &k, &g, false);
        for c in 0..n_cells {
            let fc: Vec<f64> = (0..n).map(|i| f[i * n_cells + c]).collect();
            let gc: Vec<f64> = (0..n).map(|i| gg[i * n_cells + c]).collect();
            let q1 = collide(&fc, &fc, &k, &g);
            let q2 = collide(&gc, &gc, &k, &g);
            let scale = norm(&q1, &g).max(1e-300);
            for i in 0..n {
                assert!((qq[i * n_cells + c] - q1[i]).abs() <= 1e-11 * scale);
                assert!(
                    (dq[i * n_cells + c] - (q1[i] - q2[i])).abs() <= 1e-11 * scale,
                    "diff sweep mismatch at ({i}, {c})"
                );
            }
        }
    }

    #[test]
    fn kernel_spec_validation() {
        let g = grid8();
        assert!(KernelSpec::for_grid(1.0, &g).is_ok());
        assert!(KernelSpec::for_grid(-2.9, &g).is_ok());
        assert!(KernelSpec::for_grid(1.5, &g).is_err());
        assert!(KernelSpec::for_grid(-3.0, &g).is_err());
        let mut k = KernelSpec::for_grid(-1.0, &g).unwrap();
        k.cutoff_m = 0.9; // above 4^{-1/2} = 0.5
        assert!(k.validate().is_err());
        k.cutoff_m = 0.4;
        k.varpi = 1.2;
        assert!(k.validate().is_err());
    }
}
