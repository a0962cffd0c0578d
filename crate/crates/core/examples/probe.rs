use ivpb_core::collision::*;
use ivpb_core::kinetic::*;
use ivpb_core::phase_grid::*;

fn main() {
    let vg = build_velocity_grid(6.0, 8, 4).unwrap();
    let sg = SpatialGrid::new(1.0, 8).unwrap();
    let spec = KernelSpec::for_grid(1.0, &vg).unwrap();
    let s = KineticSolver::new(vg, sg, spec, 1.0, 1.0, true, false).unwrap();
    let f0 = DistributionField::from_maxwellians(&vec![1.0; 8], &vec![0.0; 8], 1.0, &s.vgrid).unwrap();
    let dt = s.transport_cfl();
    println!("dt = {dt:.4e}");
    let mut f = f0.clone();
    for step in 0..100 {
        let rho = f.density(&s.vgrid);
        let rmin = rho.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmax = rho.iter().cloned().fold(0.0f64, f64::max);
        let fmin = f.field.data.iter().cloned().fold(f64::INFINITY, f64::min);
        if step % 10 == 0 || step > 90 { println!("step {step}: rho in [{rmin:.6e}, {rmax:.6e}], min F = {fmin:.3e}"); }
        match s.step(&f, dt, 0.1, false) {
            Ok((next, _, _st)) => { f = next; }
            Err(e) => { println!("  ERROR: {e}"); break; }
        }
    }
}
