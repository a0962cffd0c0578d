//! Time integration of the full kinetic system at finite Knudsen number, and
//! the characteristic-flow machinery with Jacobian diagnostics.
//!
//! One step is a Strang sandwich: half transport (first-order upwind in x),
//! half field acceleration (upwind in v1 with the field from a fresh
//! Poisson-Boltzmann solve), a full collision step, then the halves in
//! reverse. The collision step integrates the well-balanced projected
//! operator C(F) = correct(Q(F,F) - Q(M[F],M[F])) with the stiff part damped
//! through the eigendecomposition of the global-Maxwellian linearized
//! operator, density-scaled per cell, so the solve stays factorization-free
//! across cells and steps.

use crate::collision::{
    assemble_l, collide_diff_fields, AssemblyRoute, KernelSpec,
    Linearization,
};
use crate::error::{Error, Result};
use crate::fields::{solve_poisson_boltzmann, PotentialField};
use crate::hilbert::PhaseField;
use crate::phase_grid::{
    fit_discrete_maxwellian, maxwellian, moments, FluidMoments, MaxwellianParams, SpatialGrid,
    VelocityGrid,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Phase-space state of the kinetic solver.
#[derive(Debug, Clone)]
pub struct DistributionField {
    pub field: PhaseField,
    pub time: f64,
}

impl DistributionField {
    pub fn from_maxwellians(
        rho: &[f64],
        u1: &[f64],
        k_eos: f64,
        vgrid: &VelocityGrid,
    ) -> Result<Self> {
        let nc = rho.len();
        let mut field = PhaseField::zeros(vgrid.len(), nc);
        for c in 0..nc {
            let theta = k_eos * rho[c].powf(2.0 / 3.0);
            let guess = MaxwellianParams::new(rho[c], [u1[c], 0.0, 0.0], theta)?;
            let target = FluidMoments {
                rho: rho[c],
                momentum: [rho[c] * u1[c], 0.0, 0.0],
                energy: rho[c] * u1[c] * u1[c] + 3.0 * rho[c] * theta,
            };
            let p = fit_discrete_maxwellian(&target, vgrid, &guess)?;
            field.set_cell_profile(c, &maxwellian(&p, vgrid));
        }
        Ok(DistributionField { field, time: 0.0 })
    }

    pub fn density(&self, vgrid: &VelocityGrid) -> Vec<f64> {
        (0..self.field.n_cells)
            .map(|c| moments(&self.field.cell_profile(c), vgrid).rho)
            .collect()
    }

    pub fn mass(&self, vgrid: &VelocityGrid, sgrid: &SpatialGrid) -> f64 {
        self.density(vgrid).iter().sum::<f64>() * sgrid.spacing()
    }

    /// Discrete H functional sum F log F.
    pub fn h_functional(&self, vgrid: &VelocityGrid, sgrid: &SpatialGrid) -> f64 {
        let mut s = 0.0;
        for node in 0..self.field.n_nodes {
            let w = vgrid.quad_weights[node];
            for c in 0..self.field.n_cells {
                let f = self.field.at(node, c);
                if f > 0.0 {
                    s += w * f * f.ln();
                }
            }
        }
        s * sgrid.spacing()
    }
}

/// Orbit structure of the (v2, v3) signed-permutation symmetry used to cut
/// collision work on slab-symmetric states.
#[derive(Debug, Clone)]
pub struct SymmetryMap {
    pub representatives: Vec<usize>,
    pub rep_of: Vec<usize>,
}

impl SymmetryMap {
    pub fn build(vgrid: &VelocityGrid) -> Self {
        let n = vgrid.n_per_axis;
        let idx = |i1: usize, i2: usize, i3: usize| (i1 * n + i2) * n + i3;
        let mut rep_of = vec![usize::MAX; vgrid.len()];
        let mut representatives = Vec::new();
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let me = idx(i1, i2, i3);
                    if rep_of[me] != usize::MAX {
                        continue;
                    }
                    // Orbit under reflections of axes 2,3 and their swap.
                    let mut members = Vec::with_capacity(8);
                    for &(a, b) in &[(i2, i3), (i3, i2)] {
                        for &aa in &[a, n - 1 - a] {
                            for &bb in &[b, n - 1 - b] {
                                members.push(idx(i1, aa, bb));
                            }
                        }
                    }
                    members.sort_unstable();
                    members.dedup();
                    let rep = members[0];
                    for &m in &members {
                        rep_of[m] = rep;
                    }
                    representatives.push(rep);
                }
            }
        }
        representatives.sort_unstable();
        representatives.dedup();
        SymmetryMap {
            representatives,
            rep_of,
        }
    }

    /// Largest deviation of a field from exact orbit symmetry.
    pub fn asymmetry(&self, f: &PhaseField) -> f64 {
        let mut worst = 0.0f64;
        for node in 0..f.n_nodes {
            let rep = self.rep_of[node];
            for c in 0..f.n_cells {
                worst = worst.max((f.at(node, c) - f.at(rep, c)).abs());
            }
        }
        worst
    }

    pub fn scatter(&self, f: &mut PhaseField) {
        let nc = f.n_cells;
        for node in 0..f.n_nodes {
            let rep = self.rep_of[node];
            if rep != node {
                let (src, dst) = if rep < node {
                    let (a, b) = f.data.split_at_mut(node * nc);
                    (&a[rep * nc..rep * nc + nc], &mut b[..nc])
                } else {
                    unreachable!("representative is the orbit minimum")
                };
                dst.copy_from_slice(src);
            }
        }
    }
}

/// Per-step statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub collision_subcycles: usize,
    pub positivity_triggers: usize,
    pub stiff_path: bool,
}

/// Precomputed machinery for the kinetic stepper.
pub struct KineticSolver {
    pub vgrid: VelocityGrid,
    pub sgrid: SpatialGrid,
    pub spec: KernelSpec,
    pub k_eos: f64,
    /// Eigendecomposition of the unit-density global-Maxwellian linearized
    /// operator (symmetric assembly): the stiff damping basis.
    stab_vectors: DMatrix<f64>,
    stab_values: DVector<f64>,
    sqrt_m: Vec<f64>,
    nu_sup: f64,
    dx_spec: DMatrix<f64>,
    symmetry: Option<SymmetryMap>,
    pub theta_m: f64,
}

impl KineticSolver {
    pub fn new(
        vgrid: VelocityGrid,
        sgrid: SpatialGrid,
        spec: KernelSpec,
        k_eos: f64,
        n0: f64,
        use_planar_symmetry: bool,
        par: bool,
    ) -> Result<Self> {
        let theta_m = k_eos * n0.powf(2.0 / 3.0);
        let p_glob = MaxwellianParams::new(1.0, [0.0; 3], theta_m)?;
        let op = assemble_l(
            &p_glob,
            &spec,
            &vgrid,
            Linearization::Global,
            AssemblyRoute::Symmetric,
            par,
        );
        let eig = nalgebra::SymmetricEigen::new(op.matrix);
        // Clip the tiny negative roundoff eigenvalues of the PSD form.
        let values = eig.eigenvalues.map(|x| x.max(0.0));
        let m_prof = maxwellian(&p_glob, &vgrid);
        let nu =
            crate::collision::b0_weighted_frequency(&m_prof, &spec, &vgrid);
        let nu_sup = nu.iter().cloned().fold(0.0f64, f64::max);
        let symmetry = if use_planar_symmetry {
            if vgrid.sphere_params.len() % 4 != 0 {
                return Err(Error::config(
                    "planar symmetry needs an azimuthal count divisible by 4",
                ));
            }
            Some(SymmetryMap::build(&vgrid))
        } else {
            None
        };
        let dx_spec = sgrid.spectral_derivative();
        Ok(KineticSolver {
            sqrt_m: m_prof.iter().map(|x| x.sqrt()).collect(),
            vgrid,
            sgrid,
            spec,
            k_eos,
            stab_vectors: eig.eigenvectors,
            stab_values: values,
            nu_sup,
            dx_spec,
            symmetry,
            theta_m,
        })
    }

    pub fn transport_cfl(&self) -> f64 {
        0.4 * self.sgrid.spacing() / self.vgrid.v_max
    }

    fn transport_half(&self, f: &mut PhaseField, dt: f64) -> Result<()> {
        let h = self.sgrid.spacing();
        let nc = f.n_cells;
        let mut scratch = vec![0.0; nc];
        for node in 0..f.n_nodes {
            let v1 = self.vgrid.nodes[node][0];
            let cn = v1 * dt / h;
            if cn.abs() > 1.0 {
                return Err(Error::Cfl(format!(
                    "transport Courant number {cn} exceeds 1"
                )));
            }
            let row = &mut f.data[node * nc..(node + 1) * nc];
            if v1 >= 0.0 {
                for i in 0..nc {
                    let up = row[(i + nc - 1) % nc];
                    scratch[i] = row[i] - cn * (row[i] - up);
                }
            } else {
                for i in 0..nc {
                    let dn = row[(i + 1) % nc];
                    scratch[i] = row[i] - cn * (dn - row[i]);
                }
            }
            row.copy_from_slice(&scratch);
        }
        Ok(())
    }

    fn field_half(
        &self,
        f: &mut PhaseField,
        dt: f64,
        phi_guess: Option<&PotentialField>,
    ) -> Result<PotentialField> {
        let nc = f.n_cells;
        let rho: Vec<f64> = (0..nc)
            .map(|c| {
                let mut acc = 0.0;
                for node in 0..f.n_nodes {
                    acc += f.at(node, c) * self.vgrid.quad_weights[node];
                }
                acc
            })
            .collect();
        let (phi, _) = solve_poisson_boltzmann(&rho, &self.sgrid, phi_guess)?;
        let phiv = DVector::from_column_slice(&phi.phi);
        let grad = &self.dx_spec * phiv;
        // Acceleration a = -phi'(x) advects along v1: upwind with zero ghosts.
        let n = self.vgrid.n_per_axis;
        let hv = self.vgrid.spacing();
        let n2 = n * n;
        let mut slab = vec![0.0; n];
        for c in 0..nc {
            let a = -grad[c];
            let cn = a * dt / hv;
            if cn.abs() > 1.0 {
                return Err(Error::Cfl(format!(
                    "velocity-space Courant number {cn} exceeds 1"
                )));
            }
            if cn == 0.0 {
                continue;
            }
            for i2 in 0..n {
                for i3 in 0..n {
                    let base = i2 * n + i3;
                    for i1 in 0..n {
                        slab[i1] = f.at(i1 * n2 + base, c);
                    }
                    if a >= 0.0 {
                        for i1 in (0..n).rev() {
                            let up = if i1 > 0 { slab[i1 - 1] } else { 0.0 };
                            let val = slab[i1] - cn * (slab[i1] - up);
                            f.data[(i1 * n2 + base) * nc + c] = val;
                        }
                    } else {
                        for i1 in 0..n {
                            let dn = if i1 + 1 < n { slab[i1 + 1] } else { 0.0 };
                            let val = slab[i1] - cn * (dn - slab[i1]);
                            f.data[(i1 * n2 + base) * nc + c] = val;
                        }
                    }
                }
            }
        }
        Ok(phi)
    }

    /// The well-balanced projected collision value C(F) cellwise.
    fn collision_value(&self, f: &PhaseField, m_field: &PhaseField, par: bool) -> PhaseField {
        let nc = f.n_cells;
        let all_rows: Vec<usize>;
        let rows: &[usize] = match &self.symmetry {
            Some(s) => &s.representatives,
            None => {
                all_rows = (0..f.n_nodes).collect();
                &all_rows
            }
        };
        let q = collide_diff_fields(
            &f.data,
            Some(&m_field.data),
            nc,
            rows,
            &self.spec,
            &self.vgrid,
            par,
        );
        let mut qf = PhaseField {
            data: q,
            n_nodes: f.n_nodes,
            n_cells: nc,
        };
        if let Some(s) = &self.symmetry {
            s.scatter(&mut qf);
        }
        qf.corrected_with(m_field, &self.vgrid)
    }

    /// Apply (I + lambda A)^{-1} cellwise through the stabilizer basis.
    fn damped_apply(&self, increment: &PhaseField, lambdas: &[f64]) -> PhaseField {
        let nc = increment.n_cells;
        let nv = increment.n_nodes;
        let mut out = PhaseField::zeros(nv, nc);
        for c in 0..nc {
            let prof = increment.cell_profile(c);
            let scaled =
                DVector::from_iterator(nv, (0..nv).map(|i| prof[i] / self.sqrt_m[i]));
            let mut modal = self.stab_vectors.transpose() * scaled;
            for (i, m) in modal.iter_mut().enumerate() {
                *m /= 1.0 + lambdas[c] * self.stab_values[i];
            }
            let back = &self.stab_vectors * modal;
            let prof_out: Vec<f64> = (0..nv).map(|i| back[i] * self.sqrt_m[i]).collect();
            out.set_cell_profile(c, &prof_out);
        }
        out
    }

    fn maxwellian_of(&self, f: &PhaseField) -> Result<(PhaseField, Vec<f64>)> {
        let nc = f.n_cells;
        let mut m_field = PhaseField::zeros(f.n_nodes, nc);
        let mut rho = vec![0.0; nc];
        for c in 0..nc {
            let prof = f.cell_profile(c);
            let m = moments(&prof, &self.vgrid);
            if !(m.rho > 0.0) {
                return Err(Error::State("nonpositive density in collision step".into()));
            }
            let guess = MaxwellianParams::new(
                m.rho,
                [
                    m.momentum[0] / m.rho,
                    m.momentum[1] / m.rho,
                    m.momentum[2] / m.rho,
                ],
                self.theta_m,
            )?;
            let p = fit_discrete_maxwellian(&m, &self.vgrid, &guess)?;
            m_field.set_cell_profile(c, &maxwellian(&p, &self.vgrid));
            rho[c] = p.rho;
        }
        Ok((m_field, rho))
    }

    /// Full collision step over dt with sub-cycling; the moments (hence the
    /// local Maxwellians) are invariant under the projected operator, so the
    /// fit happens once.
    fn collision_step(
        &self,
        f: &mut PhaseField,
        dt: f64,
        eps: f64,
        stats: &mut StepStats,
        par: bool,
    ) -> Result<()> {
        let (m_field, rho) = self.maxwellian_of(f)?;
        let stiffness = dt * self.nu_sup / eps;
        if stiffness <= 1.0 {
            // Non-stiff: Heun keeps the Strang sandwich second order.
            stats.stiff_path = false;
            stats.collision_subcycles = 1;
            let c1 = self.collision_value(f, &m_field, par);
            let mut f1 = f.clone();
            f1.axpy(dt / eps, &c1);
            let c2 = self.collision_value(&f1, &m_field, par);
            f.axpy(0.5 * dt / eps, &c1);
            f.axpy(0.5 * dt / eps, &c2);
        } else {
            stats.stiff_path = true;
            // Deviation scale controls the explicit remainder's stability.
            let mut dev = 0.0f64;
            for c in 0..f.n_cells {
                let mut num = 0.0;
                let mut den = 0.0;
                for node in 0..f.n_nodes {
                    let d = f.at(node, c) - m_field.at(node, c);
                    num += d * d;
                    let m = m_field.at(node, c);
                    den += m * m;
                }
                dev = dev.max((num / den.max(1e-300)).sqrt());
            }
            let n_sub = ((stiffness * dev / 0.5).ceil() as usize).clamp(1, 10_000);
            if n_sub == 10_000 {
                return Err(Error::Stiffness(
                    "collision sub-cycle cap exceeded".into(),
                ));
            }
            stats.collision_subcycles = n_sub;
            let dts = dt / n_sub as f64;
            let lambdas: Vec<f64> = rho.iter().map(|r| r * dts / eps).collect();
            for _ in 0..n_sub {
                let cval = self.collision_value(f, &m_field, par);
                let mut incr = cval;
                for x in incr.data.iter_mut() {
                    *x *= dts / eps;
                }
                let damped = self.damped_apply(&incr, &lambdas);
                f.axpy(1.0, &damped);
            }
        }
        // Positivity guard: floor and rescale to preserve cell mass.
        let nc = f.n_cells;
        for c in 0..nc {
            let mut mass = 0.0;
            let mut mass_pos = 0.0;
            let mut has_neg = false;
            for node in 0..f.n_nodes {
                let w = self.vgrid.quad_weights[node];
                let v = f.at(node, c);
                mass += w * v;
                if v > 0.0 {
                    mass_pos += w * v;
                } else if v < 0.0 {
                    has_neg = true;
                }
            }
            if has_neg && mass_pos > 0.0 && mass > 0.0 {
                stats.positivity_triggers += 1;
                let scale = mass / mass_pos;
                for node in 0..f.n_nodes {
                    let idx = node * nc + c;
                    f.data[idx] = f.data[idx].max(0.0) * scale;
                }
            }
        }
        Ok(())
    }

    /// One Strang step; returns the post-step field state and statistics.
    pub fn step(
        &self,
        f: &DistributionField,
        dt: f64,
        eps: f64,
        par: bool,
    ) -> Result<(DistributionField, PotentialField, StepStats)> {
        if !(eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if dt > self.transport_cfl() * (1.0 + 1e-12) {
            return Err(Error::Cfl(format!(
                "dt = {dt} exceeds transport CFL {}",
                self.transport_cfl()
            )));
        }
        let mut stats = StepStats::default();
        let mut work = f.field.clone();
        self.transport_half(&mut work, 0.5 * dt)?;
        let phi1 = self.field_half(&mut work, 0.5 * dt, None)?;
        self.collision_step(&mut work, dt, eps, &mut stats, par)?;
        let phi2 = self.field_half(&mut work, 0.5 * dt, Some(&phi1))?;
        self.transport_half(&mut work, 0.5 * dt)?;
        if let Some(s) = &self.symmetry {
            s.scatter(&mut work);
        }
        Ok((
            DistributionField {
                field: work,
                time: f.time + dt,
            },
            phi2,
            stats,
        ))
    }

    /// Unsplit reference right-hand side (same semi-discrete operators), for
    /// cross-checking the splitting at moderate eps.
    pub fn reference_rhs(&self, f: &PhaseField, eps: f64, par: bool) -> Result<PhaseField> {
        let nc = f.n_cells;
        let nv = f.n_nodes;
        let mut out = PhaseField::zeros(nv, nc);
        // Transport: upwind differences.
        let h = self.sgrid.spacing();
        for node in 0..nv {
            let v1 = self.vgrid.nodes[node][0];
            let row = &f.data[node * nc..(node + 1) * nc];
            let orow = &mut out.data[node * nc..(node + 1) * nc];
            if v1 >= 0.0 {
                for i in 0..nc {
                    orow[i] = -v1 * (row[i] - row[(i + nc - 1) % nc]) / h;
                }
            } else {
                for i in 0..nc {
                    orow[i] = -v1 * (row[(i + 1) % nc] - row[i]) / h;
                }
            }
        }
        // Field acceleration: upwind in v1.
        let rho: Vec<f64> = (0..nc)
            .map(|c| {
                let mut acc = 0.0;
                for node in 0..nv {
                    acc += f.at(node, c) * self.vgrid.quad_weights[node];
                }
                acc
            })
            .collect();
        let (phi, _) = solve_poisson_boltzmann(&rho, &self.sgrid, None)?;
        let grad = &self.dx_spec * DVector::from_column_slice(&phi.phi);
        let n = self.vgrid.n_per_axis;
        let n2 = n * n;
        let hv = self.vgrid.spacing();
        for c in 0..nc {
            let a = -grad[c];
            for i2 in 0..n {
                for i3 in 0..n {
                    let base = i2 * n + i3;
                    for i1 in 0..n {
                        let node = i1 * n2 + base;
                        let fv = f.at(node, c);
                        let dfl = if a >= 0.0 {
                            let up = if i1 > 0 { f.at(node - n2, c) } else { 0.0 };
                            (fv - up) / hv
                        } else {
                            let dn = if i1 + 1 < n { f.at(node + n2, c) } else { 0.0 };
                            (dn - fv) / hv
                        };
                        out.data[node * nc + c] -= a * dfl;
                    }
                }
            }
        }
        // Collision.
        let (m_field, _) = self.maxwellian_of(f)?;
        let cval = self.collision_value(f, &m_field, par);
        out.axpy(1.0 / eps, &cval);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Characteristics.

/// Time-sampled potential with cubic interpolation in (t, x); forces come
/// from the analytic derivative of the spatial interpolant so the sampled
/// Hamiltonian is exactly consistent.
#[derive(Debug, Clone)]
pub struct SampledPotential {
    pub times: Vec<f64>,
    pub phis: Vec<Vec<f64>>,
    pub grid: SpatialGrid,
    dphis: Vec<Vec<f64>>,
}

impl SampledPotential {
    pub fn new(times: Vec<f64>, phis: Vec<Vec<f64>>, grid: SpatialGrid) -> Result<Self> {
        if times.is_empty() || times.len() != phis.len() {
            return Err(Error::config("potential sampling times/values mismatch"));
        }
        let dx = grid.spectral_derivative();
        let dphis: Vec<Vec<f64>> = phis
            .iter()
            .map(|p| {
                let v = &dx * DVector::from_column_slice(p);
                v.iter().copied().collect()
            })
            .collect();
        Ok(SampledPotential {
            times,
            phis,
            grid,
            dphis,
        })
    }

    pub fn static_field(phi: Vec<f64>, grid: SpatialGrid) -> Result<Self> {
        Self::new(vec![0.0], vec![phi], grid)
    }

    fn time_weights(&self, t: f64) -> ([usize; 4], [f64; 4]) {
        let n = self.times.len();
        if n == 1 {
            return ([0, 0, 0, 0], [1.0, 0.0, 0.0, 0.0]);
        }
        let dt = self.times[1] - self.times[0];
        let s = ((t - self.times[0]) / dt).clamp(0.0, (n - 1) as f64);
        let i1 = (s.floor() as usize).min(n - 2);
        let u = s - i1 as f64;
        let i0 = i1.saturating_sub(1);
        let i2 = i1 + 1;
        let i3 = (i1 + 2).min(n - 1);
        // Catmull-Rom weights.
        let w0 = -0.5 * u + u * u - 0.5 * u * u * u;
        let w1 = 1.0 - 2.5 * u * u + 1.5 * u * u * u;
        let w2 = 0.5 * u + 2.0 * u * u - 1.5 * u * u * u;
        let w3 = -0.5 * u * u + 0.5 * u * u * u;
        ([i0, i1, i2, i3], [w0, w1, w2, w3])
    }

    fn interp_x(values: &[f64], grid: &SpatialGrid, x: f64) -> (f64, f64) {
        let n = values.len();
        let h = grid.spacing();
        let s = x / h - 0.5;
        let i1 = s.floor() as isize;
        let u = s - i1 as f64;
        let at = |k: isize| values[(k.rem_euclid(n as isize)) as usize];
        let (p0, p1, p2, p3) = (at(i1 - 1), at(i1), at(i1 + 1), at(i1 + 2));
        let w0 = -0.5 * u + u * u - 0.5 * u * u * u;
        let w1 = 1.0 - 2.5 * u * u + 1.5 * u * u * u;
        let w2 = 0.5 * u + 2.0 * u * u - 1.5 * u * u * u;
        let w3 = -0.5 * u * u + 0.5 * u * u * u;
        let val = w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3;
        let d0 = (-0.5 + 2.0 * u - 1.5 * u * u) / h;
        let d1 = (-5.0 * u + 4.5 * u * u) / h;
        let d2 = (0.5 + 4.0 * u - 4.5 * u * u) / h;
        let d3 = (-u + 1.5 * u * u) / h;
        let der = d0 * p0 + d1 * p1 + d2 * p2 + d3 * p3;
        (val, der)
    }

    /// Potential value at (t, x).
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let (idx, w) = self.time_weights(t);
        let mut acc = 0.0;
        for k in 0..4 {
            if w[k] != 0.0 {
                acc += w[k] * Self::interp_x(&self.phis[idx[k]], &self.grid, x).0;
            }
        }
        acc
    }

    /// Spatial gradient at (t, x): exact derivative of the interpolant.
    pub fn grad(&self, t: f64, x: f64) -> f64 {
        let (idx, w) = self.time_weights(t);
        let mut acc = 0.0;
        for k in 0..4 {
            if w[k] != 0.0 {
                acc += w[k] * Self::interp_x(&self.phis[idx[k]], &self.grid, x).1;
            }
        }
        acc
    }

    /// Second spatial derivative from the interpolated spectral gradient.
    pub fn hess(&self, t: f64, x: f64) -> f64 {
        let (idx, w) = self.time_weights(t);
        let mut acc = 0.0;
        for k in 0..4 {
            if w[k] != 0.0 {
                acc += w[k] * Self::interp_x(&self.dphis[idx[k]], &self.grid, x).1;
            }
        }
        acc
    }

    pub fn covers(&self, t: f64) -> bool {
        let n = self.times.len();
        if n == 1 {
            return true;
        }
        t >= self.times[0] - 1e-12 && t <= self.times[n - 1] + 1e-12
    }
}

/// Characteristic state with the variational Jacobian blocks.
#[derive(Debug, Clone)]
pub struct CharState {
    pub x: Vector3<f64>,
    pub v: Vector3<f64>,
    /// dX/dv and dV/dv.
    pub jac_x: Matrix3<f64>,
    pub jac_v: Matrix3<f64>,
}

/// Integrate the characteristic flow from tau = t down (or up) to s_end with
/// RK4, including the variational system. `eps_scale` selects dX = V/eps.
pub fn integrate_characteristics(
    phi: &SampledPotential,
    start_t: f64,
    x0: [f64; 3],
    v0: [f64; 3],
    s_end: f64,
    eps_scale: bool,
    eps: f64,
    n_steps: usize,
) -> Result<CharState> {
    if !phi.covers(start_t) || !phi.covers(s_end) {
        return Err(Error::config("characteristic time range not covered"));
    }
    let scale = if eps_scale { eps } else { 1.0 };
    let mut state = CharState {
        x: Vector3::from_column_slice(&x0),
        v: Vector3::from_column_slice(&v0),
        jac_x: Matrix3::zeros(),
        jac_v: Matrix3::identity(),
    };
    let dt = (s_end - start_t) / n_steps as f64;
    let deriv = |tau: f64, s: &CharState| -> CharState {
        let gp = phi.grad(tau, s.x[0]);
        let hp = phi.hess(tau, s.x[0]);
        let mut dv = Vector3::zeros();
        dv[0] = -gp;
        let mut djv = Matrix3::zeros();
        for b in 0..3 {
            djv[(0, b)] = -hp * s.jac_x[(0, b)];
        }
        CharState {
            x: s.v / scale,
            v: dv,
            jac_x: s.jac_v / scale,
            jac_v: djv,
        }
    };
    let advance = |s: &CharState, k: &CharState, c: f64| -> CharState {
        CharState {
            x: s.x + c * k.x,
            v: s.v + c * k.v,
            jac_x: s.jac_x + c * k.jac_x,
            jac_v: s.jac_v + c * k.jac_v,
        }
    };
    let mut tau = start_t;
    for _ in 0..n_steps {
        let k1 = deriv(tau, &state);
        let k2 = deriv(tau + 0.5 * dt, &advance(&state, &k1, 0.5 * dt));
        let k3 = deriv(tau + 0.5 * dt, &advance(&state, &k2, 0.5 * dt));
        let k4 = deriv(tau + dt, &advance(&state, &k3, dt));
        state = CharState {
            x: state.x + dt / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
            v: state.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
            jac_x: state.jac_x + dt / 6.0 * (k1.jac_x + 2.0 * k2.jac_x + 2.0 * k3.jac_x + k4.jac_x),
            jac_v: state.jac_v + dt / 6.0 * (k1.jac_v + 2.0 * k2.jac_v + 2.0 * k3.jac_v + k4.jac_v),
        };
        tau += dt;
    }
    Ok(state)
}

/// Two-sided Jacobian-determinant diagnostic over sampled backward flights.
#[derive(Debug, Clone, serde::Serialize)]
pub struct JacobianReport {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub samples: usize,
    pub all_within_bounds: bool,
}

pub fn jacobian_bounds_check(
    phi: &SampledPotential,
    samples: usize,
    t0: f64,
    v_max: f64,
    seed: u64,
) -> Result<JacobianReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    for _ in 0..samples {
        let t = rng.gen_range(0.2 * t0..t0);
        let s = rng.gen_range(0.0..t - 1e-4);
        let x = [rng.gen_range(0.0..phi.grid.length), 0.0, 0.0];
        let v = [
            rng.gen_range(-v_max..v_max),
            rng.gen_range(-v_max..v_max),
            rng.gen_range(-v_max..v_max),
        ];
        let st = integrate_characteristics(phi, t, x, v, s, false, 1.0, 64)?;
        let det = st.jac_x.determinant().abs();
        let ratio = det / (t - s).powi(3);
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
    }
    Ok(JacobianReport {
        min_ratio,
        max_ratio,
        samples,
        all_within_bounds: min_ratio >= 0.5 && max_ratio <= 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::well_prepared_init;
    use crate::phase_grid::build_velocity_grid;
    use approx::assert_relative_eq;

    fn solver(gamma: f64, n_cells: usize, planar: bool) -> KineticSolver {
        let vg = build_velocity_grid(6.0, 8, 4).unwrap();
        let sg = SpatialGrid::new(1.0, n_cells).unwrap();
        let spec = KernelSpec::for_grid(gamma, &vg).unwrap();
        KineticSolver::new(vg, sg, spec, 1.0, 1.0, planar, false).unwrap()
    }

    #[test]
    fn global_equilibrium_is_stationary() {
        let s = solver(1.0, 8, true);
        let f0 = DistributionField::from_maxwellians(
            &vec![1.0; 8],
            &vec![0.0; 8],
            1.0,
            &s.vgrid,
        )
        .unwrap();
        let dt = s.transport_cfl();
        let mut f = f0.clone();
        let norm0 = f.field.norm(&s.vgrid, &s.sgrid);
        for _ in 0..100 {
            let (next, _, _) = s.step(&f, dt, 0.1, false).unwrap();
            f = next;
        }
        let mut diff = f.field.clone();
        diff.axpy(-1.0, &f0.field);
        let drift = diff.norm(&s.vgrid, &s.sgrid) / norm0;
        assert!(drift <= 1e-10 * 100.0, "equilibrium drift {drift} over 100 steps");
    }

    #[test]
    fn mass_conserved_per_step() {
        let s = solver(1.0, 8, true);
        let init = well_prepared_init(0.05, 1, 1.0, &s.sgrid).unwrap();
        let mut f =
            DistributionField::from_maxwellians(&init.rho, &init.u1, 1.0, &s.vgrid).unwrap();
        let dt = s.transport_cfl();
        let m0 = f.mass(&s.vgrid, &s.sgrid);
        for _ in 0..20 {
            let (next, _, _) = s.step(&f, dt, 0.1, false).unwrap();
            f = next;
        }
        assert_relative_eq!(f.mass(&s.vgrid, &s.sgrid), m0, max_relative = 1e-10);
    }

    #[test]
    fn homogeneous_relaxation_decreases_h() {
        // Single cell, no transport: a bimodal state relaxes with
        // monotonically decreasing H.
        let vg = build_velocity_grid(6.0, 8, 4).unwrap();
        let sg = SpatialGrid::new(1.0, 1).unwrap();
        let spec = KernelSpec::for_grid(1.0, &vg).unwrap();
        let s = KineticSolver::new(vg, sg, spec, 1.0, 1.0, false, false).unwrap();
        let p1 = MaxwellianParams::new(0.5, [1.2, 0.0, 0.0], 0.7).unwrap();
        let p2 = MaxwellianParams::new(0.5, [-1.2, 0.0, 0.0], 0.7).unwrap();
        let mu1 = maxwellian(&p1, &s.vgrid);
        let mu2 = maxwellian(&p2, &s.vgrid);
        let mut field = PhaseField::zeros(s.vgrid.len(), 1);
        let prof: Vec<f64> = (0..s.vgrid.len()).map(|i| mu1[i] + mu2[i]).collect();
        field.set_cell_profile(0, &prof);
        let mut f = DistributionField { field, time: 0.0 };
        let dt = 5e-3;
        let mut h_prev = f.h_functional(&s.vgrid, &s.sgrid);
        let mut decreased = 0;
        for _ in 0..200 {
            let (next, _, _) = s.step(&f, dt, 1.0, false).unwrap();
            f = next;
            let h = f.h_functional(&s.vgrid, &s.sgrid);
            assert!(
                h <= h_prev + 1e-12,
                "H increased: {h_prev} -> {h}"
            );
            if h < h_prev {
                decreased += 1;
            }
            h_prev = h;
        }
        assert!(decreased > 150, "H barely moved ({decreased} strict decreases)");
    }

    #[test]
    fn splitting_matches_unsplit_reference() {
        let s = solver(1.0, 8, false);
        let init = well_prepared_init(0.05, 1, 1.0, &s.sgrid).unwrap();
        let f0 =
            DistributionField::from_maxwellians(&init.rho, &init.u1, 1.0, &s.vgrid).unwrap();
        let eps = 1.0;
        let t_end = 4e-3;
        // Reference: RK4 on the unsplit semi-discrete system, fine steps.
        let mut ref_f = f0.field.clone();
        let n_ref = 64;
        let dt_ref = t_end / n_ref as f64;
        for _ in 0..n_ref {
            let k1 = s.reference_rhs(&ref_f, eps, false).unwrap();
            let mut f2 = ref_f.clone();
            f2.axpy(0.5 * dt_ref, &k1);
            let k2 = s.reference_rhs(&f2, eps, false).unwrap();
            let mut f3 = ref_f.clone();
            f3.axpy(0.5 * dt_ref, &k2);
            let k3 = s.reference_rhs(&f3, eps, false).unwrap();
            let mut f4 = ref_f.clone();
            f4.axpy(dt_ref, &k3);
            let k4 = s.reference_rhs(&f4, eps, false).unwrap();
            ref_f.axpy(dt_ref / 6.0, &k1);
            ref_f.axpy(dt_ref / 3.0, &k2);
            ref_f.axpy(dt_ref / 3.0, &k3);
            ref_f.axpy(dt_ref / 6.0, &k4);
        }
        // Strang at two step sizes: second-order convergence to the reference.
        let mut errs = Vec::new();
        for n_steps in [8usize, 16] {
            let dt = t_end / n_steps as f64;
            let mut f = f0.clone();
            for _ in 0..n_steps {
                let (next, _, _) = s.step(&f, dt, eps, false).unwrap();
                f = next;
            }
            let mut diff = f.field.clone();
            diff.axpy(-1.0, &ref_f);
            errs.push(diff.norm(&s.vgrid, &s.sgrid) / ref_f.norm(&s.vgrid, &s.sgrid));
        }
        assert!(errs[1] <= 1e-6, "splitting error {} at finest", errs[1]);
        let order = (errs[0] / errs[1]).log2();
        assert!(
            (1.7..=2.3).contains(&order),
            "splitting order {order} (errors {errs:?})"
        );
    }

    #[test]
    fn asymptotic_preserving_ladder() {
        let s = solver(1.0, 8, true);
        let init = well_prepared_init(0.05, 1, 1.0, &s.sgrid).unwrap();
        let dt = s.transport_cfl();
        let mut dists = Vec::new();
        for eps in [0.2, 0.1, 0.05] {
            let mut f =
                DistributionField::from_maxwellians(&init.rho, &init.u1, 1.0, &s.vgrid)
                    .unwrap();
            for _ in 0..10 {
                let (next, _, _) = s.step(&f, dt, eps, false).unwrap();
                f = next;
            }
            // Cellwise distance to the local Maxwellian manifold.
            let (m_field, _) = s.maxwellian_of(&f.field).unwrap();
            let mut diff = f.field.clone();
            diff.axpy(-1.0, &m_field);
            dists.push(diff.norm(&s.vgrid, &s.sgrid) / m_field.norm(&s.vgrid, &s.sgrid));
        }
        assert!(
            dists[0] > dists[1] && dists[1] > dists[2],
            "AP distances not monotone: {dists:?}"
        );
    }

    #[test]
    fn characteristics_free_flight_and_roundtrip() {
        let grid = SpatialGrid::new(2.0 * std::f64::consts::PI, 32).unwrap();
        let phi = SampledPotential::static_field(vec![0.7; 32], grid.clone()).unwrap();
        let st = integrate_characteristics(
            &phi,
            1.0,
            [0.3, 0.0, 0.0],
            [0.5, -0.2, 0.1],
            0.25,
            false,
            1.0,
            32,
        )
        .unwrap();
        // Constant potential: X = x + (s - t) v, V = v, dX/dv = (s - t) I.
        let dt = 0.25 - 1.0;
        assert_relative_eq!(st.x[0], 0.3 + dt * 0.5, epsilon = 1e-12);
        assert_relative_eq!(st.v[1], -0.2, epsilon = 1e-14);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { dt } else { 0.0 };
                assert_relative_eq!(st.jac_x[(a, b)], want, epsilon = 1e-10);
            }
        }
        // Round trip through a genuine field.
        let xs = grid.centers();
        let phi2 = SampledPotential::static_field(
            xs.iter().map(|&x| 0.3 * x.sin()).collect(),
            grid.clone(),
        )
        .unwrap();
        let fwd = integrate_characteristics(
            &phi2,
            1.0,
            [1.1, 0.2, 0.0],
            [0.8, 0.1, -0.3],
            0.2,
            false,
            1.0,
            128,
        )
        .unwrap();
        let back = integrate_characteristics(
            &phi2,
            0.2,
            [fwd.x[0], fwd.x[1], fwd.x[2]],
            [fwd.v[0], fwd.v[1], fwd.v[2]],
            1.0,
            false,
            1.0,
            128,
        )
        .unwrap();
        assert!((back.x[0] - 1.1).abs() <= 1e-8);
        assert!((back.v[0] - 0.8).abs() <= 1e-8);
        // eps scaling moves positions 1/eps faster.
        let eps = 0.1;
        let st_eps = integrate_characteristics(
            &phi,
            1.0,
            [0.3, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            0.75,
            true,
            eps,
            32,
        )
        .unwrap();
        assert_relative_eq!(st_eps.x[0], 0.3 + (-0.25) * 0.5 / eps, epsilon = 1e-10);
    }

    #[test]
    fn characteristics_conserve_static_hamiltonian() {
        let grid = SpatialGrid::new(2.0 * std::f64::consts::PI, 64).unwrap();
        let xs = grid.centers();
        let phi = SampledPotential::static_field(
            xs.iter().map(|&x| 0.4 * x.sin() + 0.1 * (2.0 * x).cos()).collect(),
            grid,
        )
        .unwrap();
        let (x0, v0) = ([0.9, 0.0, 0.0], [0.7, 0.3, 0.0]);
        let h0 = 0.5 * (0.49 + 0.09) + phi.value(0.0, 0.9);
        let st = integrate_characteristics(&phi, 1.0, x0, v0, 0.0, false, 1.0, 512).unwrap();
        let h1 = 0.5 * st.v.norm_squared() + phi.value(0.0, st.x[0]);
        assert!(
            (h1 - h0).abs() <= 1e-6,
            "Hamiltonian drift {} over unit time",
            h1 - h0
        );
    }

    #[test]
    fn jacobian_ratios_within_bounds() {
        let grid = SpatialGrid::new(2.0 * std::f64::consts::PI, 64).unwrap();
        let xs = grid.centers();
        // ||phi''||_inf = 1.
        let phi = SampledPotential::static_field(
            xs.iter().map(|&x| x.sin()).collect(),
            grid,
        )
        .unwrap();
        let rep = jacobian_bounds_check(&phi, 100, 0.05, 6.0, 99).unwrap();
        assert!(rep.all_within_bounds, "ratios {} .. {}", rep.min_ratio, rep.max_ratio);

        // Constant field: ratio exactly one.
        let grid2 = SpatialGrid::new(1.0, 16).unwrap();
        let phi0 = SampledPotential::static_field(vec![0.2; 16], grid2).unwrap();
        let rep0 = jacobian_bounds_check(&phi0, 20, 0.05, 6.0, 7).unwrap();
        assert!((rep0.min_ratio - 1.0).abs() <= 1e-10);
        assert!((rep0.max_ratio - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn jacobian_ratio_approaches_one_quadratically() {
        let grid = SpatialGrid::new(2.0 * std::f64::consts::PI, 64).unwrap();
        let xs = grid.centers();
        let phi = SampledPotential::static_field(
            xs.iter().map(|&x| x.sin()).collect(),
            grid,
        )
        .unwrap();
        let mut devs = Vec::new();
        let gaps = [0.04, 0.02, 0.01];
        for gap in gaps {
            let st = integrate_characteristics(
                &phi,
                0.05,
                [2.0, 0.0, 0.0],
                [1.0, 0.5, 0.0],
                0.05 - gap,
                false,
                1.0,
                64,
            )
            .unwrap();
            let ratio = st.jac_x.determinant().abs() / gap.powi(3);
            devs.push((ratio - 1.0).abs());
        }
        let slope = (devs[0] / devs[2]).log2() / (gaps[0] / gaps[2]).log2();
        assert!(
            (1.5..=2.5).contains(&slope),
            "Taylor-remainder slope {slope} (deviations {devs:?})"
        );
    }

    #[test]
    fn symmetry_map_orbits() {
        let vg = build_velocity_grid(6.0, 8, 4).unwrap();
        let sm = SymmetryMap::build(&vg);
        assert_eq!(sm.representatives.len(), 8 * 10);
        // A symmetric profile has zero asymmetry; scatter is idempotent.
        let p = MaxwellianParams::new(1.0, [0.4, 0.0, 0.0], 1.0).unwrap();
        let mu = maxwellian(&p, &vg);
        let mut f = PhaseField::zeros(vg.len(), 2);
        f.set_cell_profile(0, &mu);
        f.set_cell_profile(1, &mu);
        assert!(sm.asymmetry(&f) <= 1e-15);
        let g = f.clone();
        sm.scatter(&mut f);
        // Scatter only moves values at rounding level and leaves the field
        // exactly orbit-symmetric.
        for (a, b) in f.data.iter().zip(g.data.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        assert_eq!(sm.asymmetry(&f), 0.0);
    }
}
