//! Semilinear Poisson-Boltzmann solver phi'' = e^phi - rho on the periodic
//! slab, the linearized field equation of the coefficient hierarchy, and the
//! elliptic remainder diagnostics.

use crate::error::{Error, Result};
use crate::phase_grid::SpatialGrid;
use serde::Serialize;

/// Electrostatic potential on the spatial grid with the achieved residual.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub phi: Vec<f64>,
    pub residual_norm: f64,
}

/// One Newton iteration record for the solver log.
#[derive(Debug, Clone, Serialize)]
pub struct NewtonLogEntry {
    pub iteration: usize,
    pub residual: f64,
    pub damping: f64,
}

/// Periodic tridiagonal solve of (D2 - diag(d)) x = b via the Thomas
/// algorithm plus a Sherman-Morrison correction for the wrap-around corners.
fn periodic_helmholtz_solve(h: f64, d: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = d.len();
    let c = 1.0 / (h * h);
    if n < 3 {
        return Err(Error::config("periodic solve needs at least 3 cells"));
    }
    // Matrix A: diag = -2c - d_i, off = c, corners A[0][n-1] = A[n-1][0] = c.
    // Sherman-Morrison with u = gamma e_0 + c e_{n-1}, v = e_0 + (c/gamma) e_{n-1};
    // gamma = -A[0][0] keeps the modified pivots away from zero.
    let gamma = 2.0 * c + d[0];
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let base = -2.0 * c - d[i];
            match i {
                0 => base - gamma,
                i if i == n - 1 => base - c * c / gamma,
                _ => base,
            }
        })
        .collect();
    let tri_solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        let mut denom = diag[0];
        if denom.abs() < 1e-300 {
            return Err(Error::NumericalRank("tridiagonal pivot underflow".into()));
        }
        cp[0] = c / denom;
        dp[0] = rhs[0] / denom;
        for i in 1..n {
            denom = diag[i] - c * cp[i - 1];
            if denom.abs() < 1e-300 {
                return Err(Error::NumericalRank("tridiagonal pivot underflow".into()));
            }
            cp[i] = c / denom;
            dp[i] = (rhs[i] - c * dp[i - 1]) / denom;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = dp[i] - cp[i] * x[i + 1];
        }
        Ok(x)
    };
    let y = tri_solve(b)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = c;
    let z = tri_solve(&u)?;
    let vy = y[0] + (c / gamma) * y[n - 1];
    let vz = z[0] + (c / gamma) * z[n - 1];
    let factor = vy / (1.0 + vz);
    Ok((0..n).map(|i| y[i] - factor * z[i]).collect())
}

/// Apply the periodic second difference.
fn second_difference(h: f64, phi: &[f64]) -> Vec<f64> {
    let n = phi.len();
    let c = 1.0 / (h * h);
    (0..n)
        .map(|i| c * (phi[(i + 1) % n] - 2.0 * phi[i] + phi[(i + n - 1) % n]))
        .collect()
}

/// Damped Newton solve of the periodic discretization of phi'' = e^phi - rho.
pub fn solve_poisson_boltzmann(
    rho: &[f64],
    grid: &SpatialGrid,
    guess: Option<&PotentialField>,
) -> Result<(PotentialField, Vec<NewtonLogEntry>)> {
    if rho.len() != grid.n_cells {
        return Err(Error::config("density/grid size mismatch"));
    }
    if rho.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::State("Poisson-Boltzmann needs rho > 0 cellwise".into()));
    }
    let h = grid.spacing();
    let n = grid.n_cells;
    let mut phi: Vec<f64> = match guess {
        Some(g) if g.phi.len() == n => g.phi.clone(),
        _ => {
            let mean = rho.iter().sum::<f64>() / n as f64;
            vec![mean.ln(); n]
        }
    };
    let residual = |phi: &Vec<f64>| -> Vec<f64> {
        let d2 = second_difference(h, phi);
        (0..n).map(|i| d2[i] - phi[i].exp() + rho[i]).collect()
    };
    let max_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut log = Vec::new();
    let mut r = residual(&phi);
    let mut rnorm = max_norm(&r);
    for it in 0..50 {
        if rnorm <= 1e-13 {
            break;
        }
        // Newton step: (D2 - diag(e^phi)) delta = -r
        let ephi: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
        let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
        let delta = periodic_helmholtz_solve(h, &ephi, &neg_r)?;
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let trial: Vec<f64> = (0..n).map(|i| phi[i] + damping * delta[i]).collect();
            let rt = residual(&trial);
            let rt_norm = max_norm(&rt);
            if rt_norm < rnorm || rt_norm <= 1e-13 {
                phi = trial;
                r = rt;
                rnorm = rt_norm;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        log.push(NewtonLogEntry {
            iteration: it,
            residual: rnorm,
            damping,
        });
        if !accepted {
            break;
        }
    }
    if rnorm > 1e-10 {
        return Err(Error::Divergence {
            iterations: log.len(),
            residual: rnorm,
        });
    }
    Ok((
        PotentialField {
            phi,
            residual_norm: rnorm,
        },
        log,
    ))
}

/// Solve the linearized field equation (D2 - diag(e^{phi0})) phi = source.
pub fn solve_linearized_pb(
    source: &[f64],
    e_phi0: &[f64],
    grid: &SpatialGrid,
) -> Result<PotentialField> {
    if source.len() != grid.n_cells || e_phi0.len() != grid.n_cells {
        return Err(Error::config("field/grid size mismatch"));
    }
    if e_phi0.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::State("linearized PB needs e^{phi0} > 0".into()));
    }
    let phi = periodic_helmholtz_solve(grid.spacing(), e_phi0, source)?;
    let d2 = second_difference(grid.spacing(), &phi);
    let resid = (0..grid.n_cells)
        .map(|i| (d2[i] - e_phi0[i] * phi[i] - source[i]).abs())
        .fold(0.0f64, f64::max);
    Ok(PotentialField {
        phi,
        residual_norm: resid,
    })
}

/// Discrete L2 norm on the spatial grid.
pub fn l2_norm(f: &[f64], grid: &SpatialGrid) -> f64 {
    (f.iter().map(|x| x * x).sum::<f64>() * grid.spacing()).sqrt()
}

/// Discrete H1 norm (L2 plus first-difference seminorm).
pub fn h1_norm(f: &[f64], grid: &SpatialGrid) -> f64 {
    let n = f.len();
    let h = grid.spacing();
    let mut s = 0.0;
    for i in 0..n {
        let df = (f[(i + 1) % n] - f[i]) / h;
        s += (f[i] * f[i] + df * df) * h;
    }
    s.sqrt()
}

/// Discrete H2 norm (H1 plus second-difference seminorm).
pub fn h2_norm(f: &[f64], grid: &SpatialGrid) -> f64 {
    let d2 = second_difference(grid.spacing(), f);
    let h1 = h1_norm(f, grid);
    (h1 * h1 + d2.iter().map(|x| x * x).sum::<f64>() * grid.spacing()).sqrt()
}

/// Report of the elliptic remainder diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderDiagnostics {
    pub phi_r_h2: f64,
    pub f_l2: f64,
    pub ratio: f64,
    pub g_l2: f64,
    pub g_bound_ratio: f64,
}

/// H2-vs-L2 comparison of the field remainder against the kinetic remainder
/// plus its source-term bound ||G|| <= C (eps ||phi_R|| + eps).
pub fn pb_remainder_diagnostics(
    phi_r: &PotentialField,
    f_l2: f64,
    g_profile: &[f64],
    eps: f64,
    grid: &SpatialGrid,
) -> RemainderDiagnostics {
    let phi_r_h2 = h2_norm(&phi_r.phi, grid);
    let ratio = phi_r_h2 / (f_l2 + eps);
    let g_l2 = l2_norm(g_profile, grid);
    let g_bound_ratio = g_l2 / (eps * l2_norm(&phi_r.phi, grid) + eps);
    RemainderDiagnostics {
        phi_r_h2,
        f_l2,
        ratio,
        g_l2,
        g_bound_ratio,
    }
}
