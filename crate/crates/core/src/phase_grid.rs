//! Discretized phase space: velocity/spatial grids, Maxwellians, moments,
//! collision frequency and the time-velocity weight machinery.
//!
//! Velocity space is a uniform Cartesian cube of midpoint nodes, so the
//! quadrature is the 3D midpoint rule; angular integrals on the sphere use a
//! product Gauss rule in (cos alpha, azimuth).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Velocity profile: one value per velocity node.
pub type VProfile = Vec<f64>;

/// Cartesian velocity grid with quadrature and an angular rule on S^2.
///
/// Nodes sit at cell midpoints, `v_a = -v_max + (i_a + 1/2) h`, so the grid is
/// symmetric under `v -> -v` and never contains the origin for even counts.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    pub v_max: f64,
    pub n_per_axis: usize,
    pub nodes: Vec<[f64; 3]>,
    pub quad_weights: Vec<f64>,
    /// Unit directions of the angular rule in a canonical z-aligned frame.
    pub sphere_nodes: Vec<[f64; 3]>,
    pub sphere_weights: Vec<f64>,
    /// (cos alpha, azimuth) parameters of each angular node.
    pub sphere_params: Vec<(f64, f64)>,
    h: f64,
}

impl VelocityGrid {
    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n_per_axis + iy) * self.n_per_axis + iz
    }

    /// 1D axis coordinate of node index `i`.
    #[inline]
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.v_max + (i as f64 + 0.5) * self.h
    }

    /// Index of the node at `-v` for the node at `v`.
    pub fn negated_index(&self, idx: usize) -> usize {
        let n = self.n_per_axis;
        let iz = idx % n;
        let iy = (idx / n) % n;
        let ix = idx / (n * n);
        self.node_index(n - 1 - ix, n - 1 - iy, n - 1 - iz)
    }

    /// Trilinear stencil for an off-grid point with zero extension outside the
    /// cube: returns eight (node index, weight) pairs; out-of-range corners get
    /// weight zero.
    #[inline]
    pub fn trilinear_stencil(&self, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
        let n = self.n_per_axis as isize;
        let mut base = [0isize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let t = (p[a] + self.v_max) / self.h - 0.5;
            let f = t.floor();
            base[a] = f as isize;
            frac[a] = t - f;
        }
        let mut idx = [0usize; 8];
        let mut wts = [0f64; 8];
        let mut k = 0;
        for dx in 0..2isize {
            let ix = base[0] + dx;
            let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
            for dy in 0..2isize {
                let iy = base[1] + dy;
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dz in 0..2isize {
                    let iz = base[2] + dz;
                    let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                    let inside =
                        ix >= 0 && ix < n && iy >= 0 && iy < n && iz >= 0 && iz < n;
                    if inside {
                        idx[k] = (ix as usize * self.n_per_axis + iy as usize)
                            * self.n_per_axis
                            + iz as usize;
                        wts[k] = wx * wy * wz;
                    } else {
                        idx[k] = 0;
                        wts[k] = 0.0;
                    }
                    k += 1;
                }
            }
        }
        (idx, wts)
    }

    /// Evaluate a nodal profile at an off-grid point by trilinear interpolation.
    pub fn interpolate(&self, f: &[f64], p: [f64; 3]) -> f64 {
        let (idx, w) = self.trilinear_stencil(p);
        let mut s = 0.0;
        for k in 0..8 {
            s += w[k] * f[idx[k]];
        }
        s
    }

    /// Triquadratic (27-point Lagrange) stencil. Reproduces quadratics
    /// exactly, which puts all five collision invariants in the exact null
    /// space of the symmetric operator assembly; points beyond the node hull
    /// extrapolate so the reproduction stays exact (their Maxwellian weights
    /// in the assembly are negligible).
    #[inline]
    pub fn triquadratic_stencil(&self, p: [f64; 3]) -> ([usize; 27], [f64; 27]) {
        let mut idx = [0usize; 27];
        let mut wts = [0f64; 27];
        let n = self.n_per_axis;
        let mut ax_idx = [[0usize; 3]; 3];
        let mut ax_w = [[0f64; 3]; 3];
        for a in 0..3 {
            let t = (p[a] + self.v_max) / self.h - 0.5;
            let ic = (t.round() as isize).clamp(1, n as isize - 2) as usize;
            let xi = t - ic as f64;
            ax_idx[a] = [ic - 1, ic, ic + 1];
            ax_w[a] = [0.5 * xi * (xi - 1.0), 1.0 - xi * xi, 0.5 * xi * (xi + 1.0)];
        }
        let mut k = 0;
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    idx[k] = (ax_idx[0][i] * n + ax_idx[1][j]) * n + ax_idx[2][l];
                    wts[k] = ax_w[0][i] * ax_w[1][j] * ax_w[2][l];
                    k += 1;
                }
            }
        }
        (idx, wts)
    }
}

/// Gauss-Legendre nodes/weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-based initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, 0.0f64);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            let dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, 0.0f64);
        for j in 0..n {
            let p2 = p1;
            p1 = p0;
            p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
        }
        let dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
        x[n - 1 - i] = z;
        w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

pub fn build_velocity_grid(v_max: f64, n_per_axis: usize, sphere_order: usize) -> Result<VelocityGrid> {
    if v_max <= 0.0 {
        return Err(Error::config("v_max must be positive"));
    }
    if n_per_axis < 4 || n_per_axis % 2 != 0 {
        return Err(Error::config("n_per_axis must be even and >= 4"));
    }
    if sphere_order * sphere_order.max(1) < 6 || sphere_order < 3 {
        return Err(Error::config("sphere_order must yield at least 6 angular nodes"));
    }
    let h = 2.0 * v_max / n_per_axis as f64;
    let n3 = n_per_axis * n_per_axis * n_per_axis;
    let mut nodes = Vec::with_capacity(n3);
    for ix in 0..n_per_axis {
        let vx = -v_max + (ix as f64 + 0.5) * h;
        for iy in 0..n_per_axis {
            let vy = -v_max + (iy as f64 + 0.5) * h;
            for iz in 0..n_per_axis {
                let vz = -v_max + (iz as f64 + 0.5) * h;
                nodes.push([vx, vy, vz]);
            }
        }
    }
    let quad_weights = vec![h * h * h; n3];

    // Product rule: Gauss-Legendre in cos(alpha), uniform trapezoid in azimuth.
    let (gc, gw) = gauss_legendre(sphere_order);
    let n_phi = sphere_order;
    let wphi = 2.0 * std::f64::consts::PI / n_phi as f64;
    let mut sphere_nodes = Vec::new();
    let mut sphere_weights = Vec::new();
    let mut sphere_params = Vec::new();
    for (c, wc) in gc.iter().zip(gw.iter()) {
        let s = (1.0 - c * c).max(0.0).sqrt();
        for j in 0..n_phi {
            let phi = wphi * (j as f64 + 0.5);
            sphere_nodes.push([s * phi.cos(), s * phi.sin(), *c]);
            sphere_weights.push(wc * wphi);
            sphere_params.push((*c, phi));
        }
    }
    Ok(VelocityGrid {
        v_max,
        n_per_axis,
        nodes,
        quad_weights,
        sphere_nodes,
        sphere_weights,
        sphere_params,
        h,
    })
}

/// Periodic uniform spatial grid on [0, L).
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    pub length: f64,
    pub n_cells: usize,
    h: f64,
}

impl SpatialGrid {
    pub fn new(length: f64, n_cells: usize) -> Result<Self> {
        if length <= 0.0 || n_cells == 0 {
            return Err(Error::config("spatial grid needs length > 0 and n_cells > 0"));
        }
        Ok(SpatialGrid {
            length,
            n_cells,
            h: length / n_cells as f64,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Dense Fourier differentiation matrix (exact for resolved modes; the
    /// grids here are small enough that dense application is cheapest).
    pub fn spectral_derivative(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n_cells;
        let scale = 2.0 * std::f64::consts::PI / self.length;
        let mut d = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                let diff = j as isize - k as isize;
                let sign = if diff.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let ang = std::f64::consts::PI * diff as f64 / n as f64;
                d[(j, k)] = scale * 0.5 * sign / ang.tan();
            }
        }
        d
    }

    /// Periodic second-difference matrix (standard three-point stencil).
    pub fn second_difference(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n_cells;
        let c = 1.0 / (self.h * self.h);
        let mut d = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = -2.0 * c;
            d[(i, (i + 1) % n)] += c;
            d[(i, (i + n - 1) % n)] += c;
        }
        d
    }
}

/// Parameters of a Maxwellian: density, bulk velocity, temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaxwellianParams {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

impl MaxwellianParams {
    pub fn new(rho: f64, u: [f64; 3], theta: f64) -> Result<Self> {
        if !(rho > 0.0) || !(theta > 0.0) {
            return Err(Error::config("Maxwellian needs rho > 0 and theta > 0"));
        }
        Ok(MaxwellianParams { rho, u, theta })
    }

    /// Local-Maxwellian closure: theta = K rho^{2/3}.
    pub fn local(rho: f64, u: [f64; 3], k_eos: f64) -> Result<Self> {
        Self::new(rho, u, k_eos * rho.powf(2.0 / 3.0))
    }

    /// Global Maxwellian at rest with background density n0.
    pub fn global(n0: f64, k_eos: f64) -> Result<Self> {
        Self::new(n0, [0.0; 3], k_eos * n0.powf(2.0 / 3.0))
    }

    pub fn is_local(&self, k_eos: f64) -> bool {
        let expected = k_eos * self.rho.powf(2.0 / 3.0);
        (self.theta - expected).abs() <= 1e-14 * expected.abs().max(1.0)
    }
}

/// Pointwise Maxwellian values on the velocity grid.
pub fn maxwellian(p: &MaxwellianParams, grid: &VelocityGrid) -> VProfile {
    let norm = p.rho / (2.0 * std::f64::consts::PI * p.theta).powf(1.5);
    let inv2t = 0.5 / p.theta;
    grid.nodes
        .iter()
        .map(|v| {
            let dx = v[0] - p.u[0];
            let dy = v[1] - p.u[1];
            let dz = v[2] - p.u[2];
            norm * (-(dx * dx + dy * dy + dz * dz) * inv2t).exp()
        })
        .collect()
}

/// Low-order velocity moments of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidMoments {
    pub rho: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
}

pub fn moments(f: &[f64], grid: &VelocityGrid) -> FluidMoments {
    let mut rho = 0.0;
    let mut mom = [0.0; 3];
    let mut en = 0.0;
    for ((v, w), fv) in grid.nodes.iter().zip(grid.quad_weights.iter()).zip(f.iter()) {
        let fw = fv * w;
        rho += fw;
        mom[0] += fw * v[0];
        mom[1] += fw * v[1];
        mom[2] += fw * v[2];
        en += fw * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    FluidMoments {
        rho,
        momentum: mom,
        energy: en,
    }
}

/// Fit (rho, u, theta) so the *discrete* moments of the grid Maxwellian match
/// the targets; a grid Maxwellian is then reproduced exactly by its own fit.
pub fn fit_discrete_maxwellian(
    target: &FluidMoments,
    grid: &VelocityGrid,
    guess: &MaxwellianParams,
) -> Result<MaxwellianParams> {
    if !(target.rho > 0.0) {
        return Err(Error::State(format!(
            "cannot fit Maxwellian to nonpositive density {}",
            target.rho
        )));
    }
    let mut p = *guess;
    let scale = [
        target.rho.abs().max(1e-300),
        target.rho.abs().max(1e-300),
        target.rho.abs().max(1e-300),
        target.rho.abs().max(1e-300),
        target.energy.abs().max(target.rho.abs()).max(1e-300),
    ];
    for _ in 0..60 {
        let mu = maxwellian(&p, grid);
        let m = moments(&mu, grid);
        let r = [
            m.rho - target.rho,
            m.momentum[0] - target.momentum[0],
            m.momentum[1] - target.momentum[1],
            m.momentum[2] - target.momentum[2],
            m.energy - target.energy,
        ];
        let err = r
            .iter()
            .zip(scale.iter())
            .map(|(a, s)| (a / s).abs())
            .fold(0.0f64, f64::max);
        if err < 1e-13 {
            return Ok(p);
        }
        // Jacobian of the discrete moments w.r.t. (rho, u, theta).
        let mut jac = nalgebra::DMatrix::zeros(5, 5);
        for (i, (v, w)) in grid.nodes.iter().zip(grid.quad_weights.iter()).enumerate() {
            let du = [v[0] - p.u[0], v[1] - p.u[1], v[2] - p.u[2]];
            let d2 = du[0] * du[0] + du[1] * du[1] + du[2] * du[2];
            let base = mu[i] * w;
            // d mu / d(rho, ux, uy, uz, theta) divided by mu
            let g = [
                1.0 / p.rho,
                du[0] / p.theta,
                du[1] / p.theta,
                du[2] / p.theta,
                d2 / (2.0 * p.theta * p.theta) - 1.5 / p.theta,
            ];
            let mono = [
                1.0,
                v[0],
                v[1],
                v[2],
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
            ];
            for row in 0..5 {
                for col in 0..5 {
                    jac[(row, col)] += base * mono[row] * g[col];
                }
            }
        }
        let rhs = nalgebra::DVector::from_row_slice(&r);
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NumericalRank("singular Jacobian in Maxwellian fit".into()))?;
        let mut damp: f64 = 1.0;
        // Keep rho, theta positive.
        while p.rho - damp * delta[0] <= 0.0 || p.theta - damp * delta[4] <= 0.0 {
            damp *= 0.5;
            if damp < 1e-8 {
                return Err(Error::numerical("Maxwellian fit step collapsed"));
            }
        }
        p.rho -= damp * delta[0];
        p.u[0] -= damp * delta[1];
        p.u[1] -= damp * delta[2];
        p.u[2] -= damp * delta[3];
        p.theta -= damp * delta[4];
    }
    Err(Error::Divergence {
        iterations: 60,
        residual: f64::NAN,
    })
}

/// Collision frequency nu(v) = int |v-u|^gamma mu(u) du by grid quadrature.
///
/// For soft potentials the integrand is zeroed inside half a grid spacing of
/// the singularity (measure-zero set; keeps near-diagonal nodes from
/// dominating).
pub fn collision_frequency(p: &MaxwellianParams, gamma: f64, grid: &VelocityGrid) -> Result<VProfile> {
    if !(gamma > -3.0 && gamma <= 1.0) {
        return Err(Error::config(format!(
            "collision exponent gamma = {gamma} outside (-3, 1]"
        )));
    }
    let mu = maxwellian(p, grid);
    let delta_reg = 0.5 * grid.spacing();
    let n = grid.len();
    let mut nu = vec![0.0; n];
    for i in 0..n {
        let vi = grid.nodes[i];
        let mut acc = 0.0;
        for j in 0..n {
            let vj = grid.nodes[j];
            let dx = vi[0] - vj[0];
            let dy = vi[1] - vj[1];
            let dz = vi[2] - vj[2];
            let r2 = dx * dx + dy * dy + dz * dz;
            if gamma < 0.0 && r2 < delta_reg * delta_reg {
                continue;
            }
            let kern = if gamma == 0.0 { 1.0 } else { r2.sqrt().powf(gamma) };
            acc += kern * mu[j] * grid.quad_weights[j];
        }
        nu[i] = acc;
    }
    Ok(nu)
}

/// Weight specification: w = exp(theta_tilde(t) |v|^2) with
/// theta_tilde(t) = vartheta [1 + (1+t)^{-sigma}], plus the auxiliary
/// polynomial/Gaussian weight exponents (lambda1, lambda2).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightSpec {
    pub vartheta: f64,
    pub sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        // vartheta and sigma are free in their admissible windows; these
        // defaults satisfy both potential regimes (see config docs).
        WeightSpec {
            vartheta: 0.01,
            sigma: 0.4,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

impl WeightSpec {
    pub fn validate(&self, gamma: f64) -> Result<()> {
        if !(self.vartheta > 0.0 && self.vartheta < 1.0) {
            return Err(Error::config("vartheta must lie in (0, 1)"));
        }
        if self.sigma <= 1.0 / 3.0 {
            return Err(Error::config("sigma must exceed 1/3"));
        }
        if gamma < 0.0 && self.sigma >= 2.0 / 3.0 {
            return Err(Error::config("soft potentials need sigma < 2/3"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("lambda1, lambda2 must be nonnegative"));
        }
        Ok(())
    }

    pub fn theta_tilde(&self, t: f64) -> f64 {
        self.vartheta * (1.0 + (1.0 + t).powf(-self.sigma))
    }

    /// Auxiliary weight <v>^{lambda1} exp(lambda2 |v|^2).
    pub fn aux_weight(&self, grid: &VelocityGrid) -> VProfile {
        grid.nodes
            .iter()
            .map(|v| {
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                (1.0 + v2).powf(0.5 * self.lambda1) * (self.lambda2 * v2).exp()
            })
            .collect()
    }
}

pub fn weight_w(t: f64, spec: &WeightSpec, grid: &VelocityGrid) -> Result<VProfile> {
    if t < 0.0 {
        return Err(Error::config("weight time must be nonnegative"));
    }
    let tt = spec.theta_tilde(t);
    Ok(grid
        .nodes
        .iter()
        .map(|v| (tt * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp())
        .collect())
}

/// The modified frequency nu_tilde / eps split into its three summands:
/// nu/eps, the field transport term, and the weight-decay term.
#[derive(Debug, Clone)]
pub struct NuTilde {
    pub total: VProfile,
    pub collision_part: VProfile,
    pub transport_part: VProfile,
    pub weight_part: VProfile,
}

pub fn nu_tilde(
    nu: &[f64],
    grad_phi: [f64; 3],
    t: f64,
    eps: f64,
    spec: &WeightSpec,
    theta_m: f64,
    grid: &VelocityGrid,
) -> Result<NuTilde> {
    if !(eps > 0.0) {
        return Err(Error::config("eps must be positive"));
    }
    let tt = spec.theta_tilde(t);
    let coef = 1.0 / (2.0 * theta_m) + 2.0 * tt;
    let decay = spec.vartheta * spec.sigma / (1.0 + t).powf(1.0 + spec.sigma);
    let n = grid.len();
    let mut total = vec![0.0; n];
    let mut cpart = vec![0.0; n];
    let mut tpart = vec![0.0; n];
    let mut wpart = vec![0.0; n];
    for (i, v) in grid.nodes.iter().enumerate() {
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let dot = grad_phi[0] * v[0] + grad_phi[1] * v[1] + grad_phi[2] * v[2];
        cpart[i] = nu[i] / eps;
        tpart[i] = dot * coef;
        wpart[i] = decay * v2;
        total[i] = cpart[i] + tpart[i] + wpart[i];
    }
    Ok(NuTilde {
        total,
        collision_part: cpart,
        transport_part: tpart,
        weight_part: wpart,
    })
}

/// Discrete inner product on the velocity grid.
pub fn inner(f: &[f64], g: &[f64], grid: &VelocityGrid) -> f64 {
    f.iter()
        .zip(g.iter())
        .zip(grid.quad_weights.iter())
        .map(|((a, b), w)| a * b * w)
        .sum()
}

/// L2 norm on the velocity grid.
pub fn norm(f: &[f64], grid: &VelocityGrid) -> f64 {
    inner(f, f, grid).sqrt()
}

/// nu-weighted L2 norm.
pub fn norm_nu(f: &[f64], nu: &[f64], grid: &VelocityGrid) -> f64 {
    f.iter()
        .zip(nu.iter())
        .zip(grid.quad_weights.iter())
        .map(|((a, n), w)| a * a * n * w)
        .sum::<f64>()
        .sqrt()
}
