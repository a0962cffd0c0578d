//! The chi-basis of the null space, the macro/micro projections P and P-perp,
//! and the constrained pseudo-inverse of L on the microscopic subspace.

use crate::collision::LinearOperator;
use crate::error::{Error, Result};
use crate::phase_grid::{inner, maxwellian, norm, MaxwellianParams, VProfile, VelocityGrid};
use nalgebra::{DMatrix, DVector};

/// The five null-space generators of the linearized operator, with their
/// discrete Gram matrix for projection correction.
#[derive(Debug, Clone)]
pub struct NullBasis {
    pub chi: Vec<VProfile>,
    pub gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    pub params: MaxwellianParams,
}

/// Coefficients of the macroscopic part in the (rho, u, theta)
/// parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroCoefficients {
    pub rho_c: f64,
    pub u_c: [f64; 3],
    pub theta_c: f64,
}

pub fn chi_basis(p: &MaxwellianParams, grid: &VelocityGrid) -> Result<NullBasis> {
    let mu = maxwellian(p, grid);
    let sqmu: Vec<f64> = mu.iter().map(|x| x.sqrt()).collect();
    let n = grid.len();
    let mut chi: Vec<VProfile> = Vec::with_capacity(5);
    let c0 = 1.0 / p.rho.sqrt();
    chi.push((0..n).map(|i| c0 * sqmu[i]).collect());
    let ci = 1.0 / (p.rho * p.theta).sqrt();
    for a in 0..3 {
        chi.push(
            (0..n)
                .map(|i| ci * (grid.nodes[i][a] - p.u[a]) * sqmu[i])
                .collect(),
        );
    }
    let c4 = 1.0 / (6.0 * p.rho).sqrt();
    chi.push(
        (0..n)
            .map(|i| {
                let v = grid.nodes[i];
                let d2 = (v[0] - p.u[0]).powi(2) + (v[1] - p.u[1]).powi(2) + (v[2] - p.u[2]).powi(2);
                c4 * (d2 / p.theta - 3.0) * sqmu[i]
            })
            .collect(),
    );
    let mut gram = DMatrix::zeros(5, 5);
    for i in 0..5 {
        for j in 0..5 {
            gram[(i, j)] = inner(&chi[i], &chi[j], grid);
        }
    }
    let gram_inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericalRank("chi Gram matrix singular".into()))?;
    Ok(NullBasis {
        chi,
        gram,
        gram_inv,
        params: *p,
    })
}

/// Gram-corrected projection coefficients of f onto span{chi}.
fn raw_coefficients(f: &[f64], basis: &NullBasis, grid: &VelocityGrid) -> DVector<f64> {
    let rhs = DVector::from_iterator(5, basis.chi.iter().map(|c| inner(f, c, grid)));
    &basis.gram_inv * rhs
}

/// Split f into its macroscopic projection and microscopic remainder.
pub fn project(
    f: &[f64],
    basis: &NullBasis,
    grid: &VelocityGrid,
) -> (MacroCoefficients, VProfile, VProfile) {
    let c = raw_coefficients(f, basis, grid);
    let n = grid.len();
    let mut pf = vec![0.0; n];
    for (k, chi) in basis.chi.iter().enumerate() {
        for i in 0..n {
            pf[i] += c[k] * chi[i];
        }
    }
    let pperp: VProfile = (0..n).map(|i| f[i] - pf[i]).collect();
    let p = &basis.params;
    let macro_c = MacroCoefficients {
        rho_c: c[0] * p.rho.sqrt(),
        u_c: [
            c[1] * (p.theta / p.rho).sqrt(),
            c[2] * (p.theta / p.rho).sqrt(),
            c[3] * (p.theta / p.rho).sqrt(),
        ],
        theta_c: c[4] * p.theta * (6.0 / p.rho).sqrt(),
    };
    (macro_c, pf, pperp)
}

/// Rebuild the projection profile from macro coefficients.
pub fn macro_profile(m: &MacroCoefficients, basis: &NullBasis, grid: &VelocityGrid) -> VProfile {
    let p = &basis.params;
    let c = [
        m.rho_c / p.rho.sqrt(),
        m.u_c[0] * (p.rho / p.theta).sqrt(),
        m.u_c[1] * (p.rho / p.theta).sqrt(),
        m.u_c[2] * (p.rho / p.theta).sqrt(),
        m.theta_c / (p.theta * (6.0 / p.rho).sqrt()),
    ];
    let n = grid.len();
    let mut out = vec![0.0; n];
    for (k, chi) in basis.chi.iter().enumerate() {
        for i in 0..n {
            out[i] += c[k] * chi[i];
        }
    }
    out
}

/// Result of the constrained inverse.
#[derive(Debug, Clone)]
pub struct MicroSolve {
    pub g: VProfile,
    /// ||L g - rhs|| relative to ||rhs||.
    pub relative_residual: f64,
}

/// Factorized KKT system for A g = rhs subject to <g, chi_i> = 0; the
/// factorization is reused across right-hand sides. `least_squares` selects
/// the normal-equation form (for non-symmetric operators whose range misses
/// the constraints).
pub struct KktSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    a: DMatrix<f64>,
    n: usize,
    least_squares: bool,
}

impl KktSolver {
    pub fn new(
        a: &DMatrix<f64>,
        basis: &NullBasis,
        grid: &VelocityGrid,
        least_squares: bool,
    ) -> Result<Self> {
        let n = grid.len();
        let mut kkt = DMatrix::zeros(n + 5, n + 5);
        if least_squares {
            let ata = a.transpose() * a;
            kkt.view_mut((0, 0), (n, n)).copy_from(&ata);
        } else {
            kkt.view_mut((0, 0), (n, n)).copy_from(a);
        }
        for (k, chi) in basis.chi.iter().enumerate() {
            for i in 0..n {
                let c = chi[i] * grid.quad_weights[i];
                kkt[(n + k, i)] = c;
                kkt[(i, n + k)] = c;
            }
        }
        let lu = kkt.lu();
        if lu.determinant() == 0.0 {
            return Err(Error::NumericalRank(
                "augmented system singular (grid too coarse to separate null space)".into(),
            ));
        }
        Ok(KktSolver {
            lu,
            a: a.clone(),
            n,
            least_squares,
        })
    }

    /// Solve against a raw right-hand side vector.
    pub fn solve(&self, rhs: &[f64]) -> Result<MicroSolve> {
        let rv = DVector::from_column_slice(rhs);
        let mut b = DVector::zeros(self.n + 5);
        if self.least_squares {
            b.rows_mut(0, self.n)
                .copy_from(&(self.a.transpose() * &rv));
        } else {
            b.rows_mut(0, self.n).copy_from(&rv);
        }
        let sol = self.lu.solve(&b).ok_or_else(|| {
            Error::NumericalRank("KKT back-substitution failed".into())
        })?;
        let g: VProfile = sol.rows(0, self.n).iter().copied().collect();
        let gv = DVector::from_column_slice(&g);
        let resid = &self.a * gv - &rv;
        let rel = resid.norm() / rv.norm().max(1e-300);
        Ok(MicroSolve {
            g,
            relative_residual: rel,
        })
    }

    /// Solve for the micro part given the macro profile: minimizes
    /// ||A (p_macro + g) - b_full|| over g orthogonal to the chi set.
    pub fn solve_with_macro(&self, b_full: &[f64], p_macro: &[f64]) -> Result<MicroSolve> {
        let pv = DVector::from_column_slice(p_macro);
        let bv = DVector::from_column_slice(b_full);
        let rhs = bv - &self.a * pv;
        let rhs_slice: Vec<f64> = rhs.iter().copied().collect();
        self.solve(&rhs_slice)
    }
}

fn constrained_solve(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    basis: &NullBasis,
    grid: &VelocityGrid,
    least_squares: bool,
) -> Result<MicroSolve> {
    let solver = KktSolver::new(a, basis, grid, least_squares)?;
    let rhs_slice: Vec<f64> = rhs.iter().copied().collect();
    solver.solve(&rhs_slice)
}

/// Constrained inverse of the linearized operator on the microscopic
/// subspace: returns g with P g = 0 and L g = P-perp b.
pub fn solve_l_inverse(
    op: &LinearOperator,
    b: &[f64],
    basis: &NullBasis,
    grid: &VelocityGrid,
) -> Result<MicroSolve> {
    let (_, _, pperp_b) = project(b, basis, grid);
    let rhs = DVector::from_column_slice(&pperp_b);
    let ls = op.route == crate::collision::AssemblyRoute::Direct;
    let mut sol = constrained_solve(&op.matrix, &rhs, basis, grid, ls)?;
    // Report the residual against ||b||, the contract's normalization.
    let bv = DVector::from_column_slice(b);
    let gv = DVector::from_column_slice(&sol.g);
    sol.relative_residual = (&op.matrix * gv - rhs).norm() / bv.norm().max(1e-300);
    Ok(sol)
}

/// Least-squares micro closure used by the expansion hierarchy: finds the
/// microscopic g (orthogonal to chi) minimizing ||A (p_macro + g) - b_full||.
pub fn solve_micro_closure(
    op: &LinearOperator,
    b_full: &[f64],
    p_macro: &[f64],
    basis: &NullBasis,
    grid: &VelocityGrid,
) -> Result<MicroSolve> {
    let pv = DVector::from_column_slice(p_macro);
    let bv = DVector::from_column_slice(b_full);
    let rhs = &bv - &op.matrix * pv;
    constrained_solve(&op.matrix, &rhs, basis, grid, true)
}

/// Coercivity measurement: random Rayleigh quotients and the exact minimum
/// over the microscopic subspace.
#[derive(Debug, Clone, Copy)]
pub struct CoercivityReport {
    pub delta_random: f64,
    pub delta_eigen: f64,
    pub trials_used: usize,
}

pub fn coercivity_estimate(
    op: &LinearOperator,
    basis: &NullBasis,
    nu: &[f64],
    trials: usize,
    seed: u64,
    grid: &VelocityGrid,
) -> Result<CoercivityReport> {
    use rand::{Rng, SeedableRng};
    if trials < 10 {
        return Err(Error::config("coercivity estimate needs at least 10 trials"));
    }
    let n = grid.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut delta_random = f64::INFINITY;
    let mut used = 0;
    for _ in 0..trials {
        let f: VProfile = grid
            .nodes
            .iter()
            .map(|v| {
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                rng.gen_range(-1.0..1.0) * (-0.25 * v2).exp()
            })
            .collect();
        let (_, _, pperp) = project(&f, basis, grid);
        let den = crate::phase_grid::norm_nu(&pperp, nu, grid).powi(2);
        // Skip nearly-macroscopic draws where the quotient is 0/0.
        if den <= 1e-12 * norm(&f, grid).powi(2) {
            continue;
        }
        let lf = op.apply(&f);
        let num = inner(&lf, &f, grid);
        delta_random = delta_random.min(num / den);
        used += 1;
    }

    // Exact minimum: orthonormal basis Z of the constraint space, then the
    // smallest generalized eigenvalue of (Z' L Z, Z' diag(nu) Z). Uniform
    // quadrature weights cancel in the quotient.
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(5);
    for chi in &basis.chi {
        let mut v = DVector::from_column_slice(chi);
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let nrm = v.norm();
        if nrm < 1e-12 {
            return Err(Error::NumericalRank("chi set numerically dependent".into()));
        }
        cols.push(v / nrm);
    }
    let mut z = DMatrix::zeros(n, n - 5);
    let mut filled = 0;
    for i in 0..n {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let nrm = v.norm();
        if nrm < 1e-6 {
            continue;
        }
        let v = v / nrm;
        cols.push(v.clone());
        z.set_column(filled, &v);
        filled += 1;
        if filled == n - 5 {
            break;
        }
    }
    if filled != n - 5 {
        return Err(Error::NumericalRank(
            "failed to build microscopic complement basis".into(),
        ));
    }
    let az = z.transpose() * &op.matrix * &z;
    let az = (az.clone() + az.transpose()) * 0.5;
    let mut bz = DMatrix::zeros(n - 5, n - 5);
    let nu_diag = DMatrix::from_diagonal(&DVector::from_iterator(n, nu.iter().copied()));
    bz.copy_from(&(z.transpose() * nu_diag * &z));
    let chol = nalgebra::Cholesky::new(bz)
        .ok_or_else(|| Error::NumericalRank("nu-weighted Gram not positive definite".into()))?;
    let linv = chol.l().try_inverse().ok_or_else(|| {
        Error::NumericalRank("Cholesky factor not invertible".into())
    })?;
    let c = &linv * az * linv.transpose();
    let eig = nalgebra::SymmetricEigen::new(c);
    let delta_eigen = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);

    Ok(CoercivityReport {
        delta_random,
        delta_eigen,
        trials_used: used,
    })
}
