//! Bridges between particle-number distributions and measures on
//! concentration space: the cube embedding and its inverse, scale-dependent
//! entropy densities, Liouville transport of atomic measures, and the
//! energy-dissipation audits used to compare the levels quantitatively.

use crate::cme::{CmeTrajectory, LatticeBox, LatticeDistribution, TruncatedCme};
use crate::error::Error;
use crate::io;
use crate::numerics::quad::gauss7;
use crate::numerics::{fitted_slope, trapezoid};
use crate::rre::RreSystem;
use crate::Result;
use statrs::function::gamma::ln_gamma;

/// Piecewise-constant density on a rectangular grid of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    mins: Vec<f64>,
    spacing: Vec<f64>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(
        mins: Vec<f64>,
        spacing: Vec<f64>,
        dims: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let d = dims.len();
        if mins.len() != d || spacing.len() != d {
            return Err(Error::Dimension("grid descriptor lengths disagree".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Domain("grid spacing must be positive".into()));
        }
        let mut strides = vec![0usize; d];
        let mut len = 1usize;
        for i in (0..d).rev() {
            strides[i] = len;
            len *= dims[i];
        }
        if values.len() != len {
            return Err(Error::Dimension(format!(
                "expected {len} cell values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("densities must be finite and nonnegative".into()));
        }
        Ok(Self { mins, spacing, dims, strides, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cell_count(&self) -> usize {
        self.values.len()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.strides
            .iter()
            .map(|&s| {
                let q = rest / s;
                rest %= s;
                q
            })
            .collect()
    }

    pub fn midpoint(&self, flat: usize) -> Vec<f64> {
        self.multi(flat)
            .iter()
            .enumerate()
            .map(|(i, &k)| self.mins[i] + (k as f64 + 0.5) * self.spacing[i])
            .collect()
    }

    /// Lower corner of a cell.
    pub fn corner(&self, flat: usize) -> Vec<f64> {
        self.multi(flat)
            .iter()
            .enumerate()
            .map(|(i, &k)| self.mins[i] + k as f64 * self.spacing[i])
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Mean of the density (cell midpoints weighted by mass).
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dims.len();
        let mut mean = vec![0.0; d];
        let vol = self.cell_volume();
        let mass = self.total_mass();
        for (flat, &v) in self.values.iter().enumerate() {
            let mid = self.midpoint(flat);
            for i in 0..d {
                mean[i] += mid[i] * v * vol;
            }
        }
        for m in mean.iter_mut() {
            *m /= mass;
        }
        mean
    }

    /// Snapshot CSV: cell midpoints and density values.
    pub fn write_csv(&self, names: &[String], out: &mut impl std::io::Write) -> Result<()> {
        let mut header: Vec<String> = names.iter().map(|n| format!("c_{n}")).collect();
        header.push("rho".into());
        writeln!(out, "{}", header.join(","))?;
        for (flat, &v) in self.values.iter().enumerate() {
            let mut fields: Vec<String> =
                self.midpoint(flat).iter().map(|&x| io::fmt(x)).collect();
            fields.push(io::fmt(v));
            writeln!(out, "{}", io::row(fields))?;
        }
        Ok(())
    }
}

/// Finite weighted collection of point masses on concentration space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub weights: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl ParticleEnsemble {
    pub fn new(weights: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != points.len() || weights.is_empty() {
            return Err(Error::Dimension("ensemble needs matching, nonempty arrays".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Domain("ensemble weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights, points })
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        Self { weights: vec![1.0], points: vec![point] }
    }
}

/// Spreads lattice mass uniformly over the cube of side `1/V` attached to
/// each state.
pub fn embed(u: &LatticeDistribution, lattice: &LatticeBox) -> Result<GridDensity> {
    if u.values().len() != lattice.len() {
        return Err(Error::Dimension("distribution does not fit the box".into()));
    }
    let v = lattice.volume();
    let species = lattice.species();
    let scale = v.powi(species as i32);
    GridDensity::new(
        vec![0.0; species],
        vec![1.0 / v; species],
        lattice.n_max().iter().map(|&m| m as usize + 1).collect(),
        u.values().iter().map(|&x| x * scale).collect(),
    )
}

/// Collects cube masses back into lattice weights; exact inverse of
/// [`embed`] on aligned grids.
pub fn project(rho: &GridDensity, lattice: &LatticeBox) -> Result<LatticeDistribution> {
    let species = lattice.species();
    let expected_dims: Vec<usize> =
        lattice.n_max().iter().map(|&m| m as usize + 1).collect();
    let aligned = rho.dims == expected_dims
        && rho.mins.iter().all(|&m| m == 0.0)
        && rho
            .spacing
            .iter()
            .all(|&h| (h - 1.0 / lattice.volume()).abs() < 1e-14 * h);
    if !aligned || species != rho.dims.len() {
        return Err(Error::Dimension("grid is not aligned with the lattice cubes".into()));
    }
    let vol = rho.cell_volume();
    let values: Vec<f64> = rho.values.iter().map(|&x| x * vol).collect();
    let sum: f64 = values.iter().sum();
    LatticeDistribution::from_values(values.iter().map(|&x| x / sum).collect())
}

/// Cell averages of a continuous function: the dual of [`embed`].
///
/// Exact for affine integrands; higher-order through tensorized 7-point
/// Gauss-Legendre in one and two species, midpoint beyond.
pub fn dual_embed(xi: &dyn Fn(&[f64]) -> f64, lattice: &LatticeBox) -> Vec<f64> {
    let v = lattice.volume();
    let h = 1.0 / v;
    let species = lattice.species();
    let mut out = vec![0.0; lattice.len()];
    for (flat, value) in out.iter_mut().enumerate() {
        let n = lattice.multi(flat);
        let lo: Vec<f64> = n.iter().map(|&ni| ni as f64 * h).collect();
        *value = match species {
            1 => gauss7(|x| xi(&[x]), lo[0], lo[0] + h) / h,
            2 => {
                gauss7(|x| gauss7(|y| xi(&[x, y]), lo[1], lo[1] + h), lo[0], lo[0] + h)
                    / (h * h)
            }
            _ => {
                let mid: Vec<f64> = lo.iter().map(|&l| l + 0.5 * h).collect();
                xi(&mid)
            }
        };
    }
    out
}

/// Scale-dependent entropy density: piecewise constant on lattice cubes,
/// with the cube value assembled from the log of the product-Poisson
/// weight at the cube's base state.
pub fn stirling_entropy_density(c: &[f64], volume: f64, c_star: &[f64]) -> Result<f64> {
    if c.len() != c_star.len() {
        return Err(Error::Dimension("state and equilibrium lengths".into()));
    }
    if c.iter().any(|&x| x < 0.0) {
        return Err(Error::Domain("state must be nonnegative".into()));
    }
    let species = c.len() as f64;
    let mut acc = -species * volume.ln() / volume;
    for (&ci, &si) in c.iter().zip(c_star) {
        let n = (ci * volume).floor();
        let lambda = si * volume;
        let log_w = -lambda + n * lambda.ln() - ln_gamma(n + 1.0);
        acc -= log_w / volume;
    }
    Ok(acc)
}

/// `int E d rho` for a grid density, with per-cell Gauss quadrature of the
/// continuous integrand.
pub fn limit_energy_grid(rho: &GridDensity, energy: &dyn Fn(&[f64]) -> f64) -> f64 {
    let vol = rho.cell_volume();
    let mut acc = 0.0;
    for (flat, &v) in rho.values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let lo = rho.corner(flat);
        let cell_avg = match rho.dims.len() {
            1 => gauss7(|x| energy(&[x]), lo[0], lo[0] + rho.spacing[0]) / rho.spacing[0],
            2 => {
                gauss7(
                    |x| gauss7(|y| energy(&[x, y]), lo[1], lo[1] + rho.spacing[1]),
                    lo[0],
                    lo[0] + rho.spacing[0],
                ) / vol
            }
            _ => energy(&rho.midpoint(flat)),
        };
        acc += v * vol * cell_avg;
    }
    acc
}

/// `int E d rho` for an atomic measure (exact).
pub fn limit_energy_ensemble(ens: &ParticleEnsemble, energy: &dyn Fn(&[f64]) -> f64) -> f64 {
    ens.weights.iter().zip(&ens.points).map(|(&w, p)| w * energy(p)).sum()
}

/// Transport-level dissipation `1/2 int sum_r kappa_r G(a_r, b_r) d rho`
/// for an atomic measure.
pub fn liouville_dissipation_ensemble(ens: &ParticleEnsemble, sys: &RreSystem) -> Result<f64> {
    let mut acc = 0.0;
    for (&w, p) in ens.weights.iter().zip(&ens.points) {
        acc += w * sys.dissipation_rate(p)?;
    }
    Ok(acc)
}

/// Same dissipation for a grid density (midpoint quadrature, matching the
/// piecewise-constant representation).
pub fn liouville_dissipation_grid(rho: &GridDensity, sys: &RreSystem) -> Result<f64> {
    let vol = rho.cell_volume();
    let mut acc = 0.0;
    for (flat, &v) in rho.values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        acc += v * vol * sys.dissipation_rate(&rho.midpoint(flat))?;
    }
    Ok(acc)
}

/// Dissipation with a general smooth test function:
/// `1/2 int grad(xi) . K grad(xi) d rho` over an atomic measure, with the
/// gradient supplied analytically.
pub fn liouville_dissipation_xi(
    ens: &ParticleEnsemble,
    sys: &RreSystem,
    grad_xi: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    let mut acc = 0.0;
    for (&w, p) in ens.weights.iter().zip(&ens.points) {
        let k = sys.onsager_matrix(p)?;
        let g = nalgebra::DVector::from_vec(grad_xi(p));
        acc += 0.5 * w * (g.transpose() * &k * &g)[(0, 0)];
    }
    Ok(acc)
}

/// Atomic-measure transport along the macroscopic flow.
#[derive(Debug, Clone)]
pub struct LiouvilleTrajectory {
    pub times: Vec<f64>,
    pub ensembles: Vec<ParticleEnsemble>,
    pub energies: Vec<f64>,
    /// `2 Psi^*` sampled at each time.
    pub dissipation: Vec<f64>,
    /// `E(t_k) - E(0) + int_0^{t_k} 2 Psi^* dt`.
    pub identity_residuals: Vec<f64>,
}

/// Transports every atom of `rho0` along the reaction-rate flow, recording
/// the energy identity on a uniform grid of `steps` checkpoints.
pub fn solve_liouville(
    sys: &RreSystem,
    rho0: &ParticleEnsemble,
    t_end: f64,
    steps: usize,
    tol: f64,
) -> Result<LiouvilleTrajectory> {
    if steps == 0 || !(t_end > 0.0) {
        return Err(Error::Domain("need a positive horizon and step count".into()));
    }
    let times: Vec<f64> = (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect();
    let checkpoints = &times[1..];
    let mut atom_paths = Vec::with_capacity(rho0.points.len());
    for p in &rho0.points {
        let traj = sys.integrate_at(p, checkpoints, tol)?;
        let path: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    p.clone()
                } else {
                    traj.state_at(t).expect("checkpoint recorded").to_vec()
                }
            })
            .collect();
        atom_paths.push(path);
    }
    let mut ensembles = Vec::with_capacity(times.len());
    let mut energies = Vec::with_capacity(times.len());
    let mut dissipation = Vec::with_capacity(times.len());
    for (k, _) in times.iter().enumerate() {
        let points: Vec<Vec<f64>> = atom_paths.iter().map(|p| p[k].clone()).collect();
        let ens = ParticleEnsemble { weights: rho0.weights.clone(), points };
        let mut e = 0.0;
        for (&w, p) in ens.weights.iter().zip(&ens.points) {
            e += w * sys.entropy(p)?;
        }
        energies.push(e);
        dissipation.push(2.0 * liouville_dissipation_ensemble(&ens, sys)?);
        ensembles.push(ens);
    }
    let mut identity_residuals = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let integral = trapezoid(&times[..=k], &dissipation[..=k]);
        identity_residuals.push(energies[k] - energies[0] + integral);
    }
    Ok(LiouvilleTrajectory { times, ensembles, energies, dissipation, identity_residuals })
}

/// Energy-dissipation audit along a master-equation trajectory.
#[derive(Debug, Clone)]
pub struct EnergyAudit {
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    /// `2 Psi^*(u, -DE(u))` at each snapshot.
    pub dissipation: Vec<f64>,
    /// `E(t_k) - E(0) + int 2 Psi^* dt` (trapezoid on the snapshot grid).
    pub residuals: Vec<f64>,
}

impl EnergyAudit {
    /// CSV rows `t, E_V, dissipation, residual`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "t,E_V,dissipation,residual")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{}",
                io::row(vec![
                    io::fmt(self.times[k]),
                    io::fmt(self.energies[k]),
                    io::fmt(self.dissipation[k]),
                    io::fmt(self.residuals[k]),
                ])
            )?;
        }
        Ok(())
    }
}

/// Evaluates the dual-form energy identity along a solved trajectory.
pub fn cme_energy_audit(cme: &TruncatedCme, traj: &CmeTrajectory) -> Result<EnergyAudit> {
    let mut energies = Vec::with_capacity(traj.times.len());
    let mut dissipation = Vec::with_capacity(traj.times.len());
    for state in &traj.states {
        if state.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain("zero-mass state in audit".into()));
        }
        energies.push(cme.entropy(state)?);
        dissipation.push(2.0 * cme.dissipation_rate(state)?);
    }
    let mut residuals = Vec::with_capacity(traj.times.len());
    for k in 0..traj.times.len() {
        let integral = trapezoid(&traj.times[..=k], &dissipation[..=k]);
        residuals.push(energies[k] - energies[0] + integral);
    }
    Ok(EnergyAudit { times: traj.times.clone(), energies, dissipation, residuals })
}

/// One row of the volume-sweep convergence experiment.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergenceRow {
    pub volume: f64,
    pub mean_err: f64,
    pub energy_err: f64,
}

/// Volume sweep testing that embedded master-equation solutions track the
/// macroscopic trajectory.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Fitted log-log slope of `mean_err` against `V`.
    pub slope: f64,
}

impl ConvergenceTable {
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "V,mean_err,energy_err,slope_estimate")?;
        for row in &self.rows {
            writeln!(
                out,
                "{}",
                io::row(vec![
                    io::fmt(row.volume),
                    io::fmt(row.mean_err),
                    io::fmt(row.energy_err),
                    io::fmt(self.slope),
                ])
            )?;
        }
        Ok(())
    }
}

/// For each volume: start the master equation from the Poisson state with
/// concentration mean `c0`, run to `t_eval`, and compare the embedded mean
/// and entropy against the macroscopic solution.
pub fn convergence_experiment(
    sys: &RreSystem,
    c0: &[f64],
    t_eval: f64,
    volumes: &[f64],
    tail: f64,
) -> Result<ConvergenceTable> {
    if volumes.is_empty() {
        return Err(Error::Domain("volume list must not be empty".into()));
    }
    if volumes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("volume list must be increasing".into()));
    }
    let macro_traj = sys.integrate(c0, t_eval, 1e-12)?;
    let c_t = macro_traj.states.last().unwrap().clone();
    let e_t = sys.entropy(&c_t)?;

    let mut rows = Vec::with_capacity(volumes.len());
    for &v in volumes {
        let lattice = LatticeBox::for_poisson_tails(
            &[c0.to_vec(), sys.c_star().to_vec(), c_t.clone()],
            v,
            tail,
        )?;
        let db = crate::network::check_detailed_balance(
            sys.network(),
            &crate::network::stoichiometric_analysis(sys.network()),
        );
        let cme =
            TruncatedCme::assemble_with_equilibrium(sys.network(), &db, lattice, tail * 10.0)?;
        let u0 = LatticeDistribution::poisson(cme.lattice(), c0)?;
        let traj = crate::cme::solve_cme(
            &cme,
            &u0,
            &[t_eval],
            &crate::cme::SolveOptions { tol: 1e-10, krylov_dim: 40 },
        )?;
        let u_t = traj.states.last().unwrap();
        let (e_hat, _) = cme.moments(u_t)?;
        // The embedded measure lives on cubes, which shifts the mean by
        // half a cube.
        let mean_err = e_hat
            .iter()
            .zip(&c_t)
            .map(|(&m, &c)| (m + 0.5 / v - c).abs())
            .fold(0.0, f64::max);
        let energy_err = (cme.entropy(u_t)? - e_t).abs();
        rows.push(ConvergenceRow { volume: v, mean_err, energy_err });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.volume.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_err.max(1e-300).ln()).collect();
    let slope = fitted_slope(&xs, &ys);
    Ok(ConvergenceTable { rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cme::{solve_cme, SolveOptions};
    use crate::network::{check_detailed_balance, parse_network, stoichiometric_analysis};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn exchange_system(a: f64, b: f64) -> RreSystem {
        let net = parse_network(&format!("species X\n0 <-> 1 X : kf={a}, kb={b}\n")).unwrap();
        RreSystem::from_network(net).unwrap()
    }

    fn exchange_cme(a: f64, b: f64, v: f64, means: &[f64]) -> TruncatedCme {
        let net = parse_network(&format!("species X\n0 <-> 1 X : kf={a}, kb={b}\n")).unwrap();
        let stoich = stoichiometric_analysis(&net);
        let db = check_detailed_balance(&net, &stoich);
        let mut refs: Vec<Vec<f64>> = means.iter().map(|&m| vec![m]).collect();
        refs.push(db.c_star().unwrap().to_vec());
        let lattice = LatticeBox::for_poisson_tails(&refs, v, 1e-13).unwrap();
        TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-12).unwrap()
    }

    #[test]
    fn embed_point_mass_density() {
        let lattice = LatticeBox::new(vec![5], 10.0).unwrap();
        let u = LatticeDistribution::point_mass(&lattice, &[0]).unwrap();
        let rho = embed(&u, &lattice).unwrap();
        assert_relative_eq!(rho.values()[0], 10.0, max_relative = 1e-14);
        assert_relative_eq!(rho.total_mass(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn embed_project_round_trip_and_projection() {
        let lattice = LatticeBox::new(vec![7, 4], 6.0).unwrap();
        let u = LatticeDistribution::poisson(&lattice, &[0.5, 0.3]).unwrap();
        let rho = embed(&u, &lattice).unwrap();
        let back = project(&rho, &lattice).unwrap();
        for (a, b) in u.values().iter().zip(back.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
        // embed . project is idempotent.
        let p1 = embed(&back, &lattice).unwrap();
        let p2 = embed(&project(&p1, &lattice).unwrap(), &lattice).unwrap();
        for (a, b) in p1.values().iter().zip(p2.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
    }

    #[test]
    fn embedded_mean_is_shifted_by_half_cube() {
        let cme = exchange_cme(1.0, 1.0, 15.0, &[0.6]);
        let u = LatticeDistribution::poisson(cme.lattice(), &[0.6]).unwrap();
        let (e_hat, _) = cme.moments(u.values()).unwrap();
        let rho = embed(&u, cme.lattice()).unwrap();
        assert_relative_eq!(rho.mean()[0], e_hat[0] + 0.5 / 15.0, max_relative = 1e-12);
    }

    #[test]
    fn dual_embed_cell_averages() {
        let lattice = LatticeBox::new(vec![9], 10.0).unwrap();
        let ones = dual_embed(&|_| 1.0, &lattice);
        for v in &ones {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-13);
        }
        // Identity function: cell [0.3, 0.4) averages to 0.35.
        let lin = dual_embed(&|c| c[0], &lattice);
        assert_relative_eq!(lin[3], 0.35, max_relative = 1e-13);

        // Pairing identity <dual_embed(xi), u> = int xi d embed(u).
        let u = LatticeDistribution::poisson(&lattice, &[0.4]).unwrap();
        let xi = |c: &[f64]| (1.5 * c[0]).sin() + c[0] * c[0];
        let lhs: f64 = dual_embed(&xi, &lattice)
            .iter()
            .zip(u.values())
            .map(|(x, p)| x * p)
            .sum();
        let rho = embed(&u, &lattice).unwrap();
        let rhs = limit_energy_grid(&rho, &xi);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-11);
    }

    #[test]
    fn entropy_density_matches_lattice_entropy() {
        // The grid-side representation of the lattice entropy must agree
        // with the direct lattice sum.
        let v = 25.0;
        let cme = exchange_cme(1.0, 1.0, v, &[0.5]);
        let u = LatticeDistribution::poisson(cme.lattice(), &[0.5]).unwrap();
        let direct = cme.entropy(u.values()).unwrap();
        let rho = embed(&u, cme.lattice()).unwrap();
        let vol = rho.cell_volume();
        let mut grid_side = 0.0;
        for (flat, &dens) in rho.values().iter().enumerate() {
            if dens == 0.0 {
                continue;
            }
            let mid = rho.midpoint(flat);
            let e_v = stirling_entropy_density(&mid, v, &[1.0]).unwrap();
            grid_side += (dens.ln() / v + e_v) * dens * vol;
        }
        // The renormalized lattice weights differ from the raw Poisson
        // weights by the truncated tail, which is far below this tolerance.
        assert_abs_diff_eq!(direct, grid_side, epsilon = 1e-10 * (1.0 + direct.abs()));
    }

    #[test]
    fn entropy_density_decays_at_equilibrium() {
        let mut previous = f64::INFINITY;
        for v in [100.0, 1000.0, 10000.0] {
            let e = stirling_entropy_density(&[1.0], v, &[1.0]).unwrap();
            assert!(e.abs() < previous);
            previous = e.abs();
        }
        assert!(previous < 5e-3);
    }

    #[test]
    fn pointwise_entropy_bound_with_stable_constant() {
        // |E_V - E| <= K (log V + E)/V with a fitted K that stabilizes
        // across volumes. The probe grid is deliberately incommensurate
        // with every lattice so each volume sees all cube offsets.
        let sys = exchange_system(1.0, 1.0);
        let mut fitted = Vec::new();
        for v in [50.0, 100.0, 200.0, 400.0] {
            let mut k_max: f64 = 0.0;
            let m = 1987;
            for j in 0..m {
                let c = 0.05 + (5.0 - 0.05) * (j as f64 + 0.5) / m as f64;
                let e_v = stirling_entropy_density(&[c], v, &[1.0]).unwrap();
                let e = sys.entropy(&[c]).unwrap();
                let k = (e_v - e).abs() * v / (v.ln() + e);
                k_max = k_max.max(k);
            }
            fitted.push(k_max);
        }
        let lo = fitted.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fitted.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo <= 1.2, "fitted constants vary too much: {fitted:?}");
    }

    #[test]
    fn limit_energy_linearity_and_zero() {
        let sys = exchange_system(1.0, 1.0);
        let energy = |c: &[f64]| sys.entropy(c).unwrap();
        let dirac = ParticleEnsemble::dirac(vec![1.0]);
        assert_abs_diff_eq!(limit_energy_ensemble(&dirac, &energy), 0.0, epsilon = 1e-15);
        let two = ParticleEnsemble::new(vec![0.5, 0.5], vec![vec![0.4], vec![2.5]]).unwrap();
        let expected = 0.5 * energy(&[0.4]) + 0.5 * energy(&[2.5]);
        assert_relative_eq!(
            limit_energy_ensemble(&two, &energy),
            expected,
            max_relative = 1e-14
        );
    }

    #[test]
    fn embedded_equilibrium_energy_decays_with_volume() {
        let sys = exchange_system(1.0, 1.0);
        let energy = |c: &[f64]| sys.entropy(c).unwrap();
        let mut previous = f64::INFINITY;
        for v in [20.0, 80.0, 320.0] {
            let cme = exchange_cme(1.0, 1.0, v, &[1.0]);
            let w = cme.equilibrium().unwrap().w.clone();
            let rho =
                embed(&LatticeDistribution::from_values(w).unwrap(), cme.lattice()).unwrap();
            let e = limit_energy_grid(&rho, &energy);
            assert!(e < previous);
            previous = e;
        }
        assert!(previous < 0.02);
    }

    #[test]
    fn equi_coercivity_constants_stabilize() {
        // Embedded-entropy coercivity over a family of test states, with a
        // defect constant that stays bounded in V.
        let sys = exchange_system(1.0, 1.0);
        let energy = |c: &[f64]| sys.entropy(c).unwrap();
        let c_coef = 0.5;
        let mut fitted_c = Vec::new();
        for v in [50.0, 100.0, 200.0] {
            let cme = exchange_cme(1.0, 1.0, v, &[0.2, 0.7, 2.0, 3.5]);
            let mut worst: f64 = 0.0;
            for mean in [0.2, 0.7, 1.0, 2.0, 3.5] {
                let u = LatticeDistribution::poisson(cme.lattice(), &[mean]).unwrap();
                let e_v = cme.entropy(u.values()).unwrap();
                let rho = embed(&u, cme.lattice()).unwrap();
                let e_limit = limit_energy_grid(&rho, &energy);
                worst = worst.max(c_coef * e_limit - e_v);
            }
            fitted_c.push(worst);
        }
        for &c in &fitted_c {
            assert!(c <= 0.5, "coercivity defect too large: {fitted_c:?}");
        }
    }

    #[test]
    fn liouville_dissipation_closed_forms() {
        let sys = exchange_system(1.0, 1.0);
        let dirac_eq = ParticleEnsemble::dirac(vec![1.0]);
        assert_abs_diff_eq!(
            liouville_dissipation_ensemble(&dirac_eq, &sys).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // Single reaction: 1/2 kappa G(c/c*, 1).
        let c = 2.3;
        let dirac = ParticleEnsemble::dirac(vec![c]);
        let expected = 0.5 * sys.kappa_star()[0] * crate::kernels::g_quot(c, 1.0).unwrap();
        assert_relative_eq!(
            liouville_dissipation_ensemble(&dirac, &sys).unwrap(),
            expected,
            max_relative = 1e-13
        );
        // Cross-check against the quadratic form with xi = E.
        let grad_e = |p: &[f64]| vec![p[0].ln()];
        assert_relative_eq!(
            liouville_dissipation_xi(&dirac, &sys, &grad_e).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn liouville_transport_and_energy_identity() {
        let sys = exchange_system(1.0, 1.0);
        // Dirac initial data moves along the macroscopic solution.
        let traj =
            solve_liouville(&sys, &ParticleEnsemble::dirac(vec![0.3]), 1.0, 400, 1e-10).unwrap();
        let expected = 1.0 + (0.3 - 1.0) * (-1.0f64).exp();
        assert_abs_diff_eq!(
            traj.ensembles.last().unwrap().points[0][0],
            expected,
            epsilon = 1e-8
        );
        // Equilibrium atom is stationary.
        let stat =
            solve_liouville(&sys, &ParticleEnsemble::dirac(vec![1.0]), 1.0, 10, 1e-10).unwrap();
        for ens in &stat.ensembles {
            assert_abs_diff_eq!(ens.points[0][0], 1.0, epsilon = 1e-9);
        }
        // Three-atom ensemble: energy identity to 1e-6.
        let ens =
            ParticleEnsemble::new(vec![0.5, 0.3, 0.2], vec![vec![0.4], vec![1.7], vec![2.9]])
                .unwrap();
        let traj = solve_liouville(&sys, &ens, 1.0, 2000, 1e-11).unwrap();
        for res in &traj.identity_residuals {
            assert!(res.abs() <= 1e-6, "identity residual {res}");
        }
        for w in traj.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn cme_audit_at_equilibrium_and_along_flow() {
        let v = 20.0;
        let cme = exchange_cme(1.0, 1.0, v, &[0.3]);
        let w = cme.equilibrium().unwrap().w.clone();
        let weq = LatticeDistribution::from_values(w).unwrap();
        let traj = solve_cme(&cme, &weq, &[0.5, 1.0], &SolveOptions::default()).unwrap();
        let audit = cme_energy_audit(&cme, &traj).unwrap();
        for (e, r) in audit.energies.iter().zip(&audit.residuals) {
            assert!(e.abs() < 1e-9);
            assert!(r.abs() < 1e-9);
        }

        let u0 = LatticeDistribution::poisson(cme.lattice(), &[0.3]).unwrap();
        let times: Vec<f64> = (1..=600).map(|k| 3.0 * k as f64 / 600.0).collect();
        let traj = solve_cme(&cme, &u0, &times, &SolveOptions::default()).unwrap();
        let audit = cme_energy_audit(&cme, &traj).unwrap();
        let de = (audit.energies.last().unwrap() - audit.energies[0]).abs();
        assert!(audit.residuals.last().unwrap().abs() <= 1e-4 * de + 1e-7);
        for w in audit.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let mut buf = Vec::new();
        audit.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,E_V,dissipation,residual\n"));
    }

    #[test]
    fn convergence_experiment_runs_and_improves() {
        let sys = exchange_system(1.0, 1.0);
        let table =
            convergence_experiment(&sys, &[0.5], 0.8, &[10.0, 20.0, 40.0], 1e-12).unwrap();
        assert_eq!(table.rows.len(), 3);
        // Linear birth-death: the embedded mean error is exactly the
        // half-cube shift, so the slope is -1.
        for row in &table.rows {
            assert_relative_eq!(row.mean_err, 0.5 / row.volume, max_relative = 1e-4);
        }
        assert_abs_diff_eq!(table.slope, -1.0, epsilon = 2e-3);
        assert!(table.rows[2].energy_err < table.rows[0].energy_err);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("V,mean_err,energy_err,slope_estimate\n"));

        assert!(convergence_experiment(&sys, &[0.5], 0.8, &[], 1e-12).is_err());
    }
}
