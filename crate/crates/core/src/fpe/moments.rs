//! Gaussian moment closure of the drift-diffusion variants.
//!
//! With the ansatz of a Gaussian whose covariance scales like `1/V`, the
//! mean follows the (possibly volume-corrected) drift and the rescaled
//! covariance obeys a Lyapunov equation driven by twice the unscaled
//! diffusion matrix.

use super::{diffusion_field, FpeVariant};
use crate::error::Error;
use crate::numerics::ode::{integrate_rk45, OdeOptions};
use crate::rre::{mass_action_jacobian, mass_action_rate, RreSystem};
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Which diffusion matrix feeds the covariance equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    /// Arithmetic-mean diffusion; mean follows the plain drift.
    Cle,
    /// Logarithmic-mean diffusion; the mean picks up the divergence
    /// correction of the gradient-form flux.
    Fp,
}

impl MomentKind {
    fn variant(self) -> FpeVariant {
        match self {
            Self::Cle => FpeVariant::Cle,
            Self::Fp => FpeVariant::Simple,
        }
    }
}

/// Mean and rescaled covariance along the closure flow.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Rescaled covariance (multiply by `1/V` for the physical one).
    pub covariances: Vec<DMatrix<f64>>,
}

/// Unscaled diffusion matrix of the closure (`V` times the PDE diffusion).
pub fn closure_diffusion(sys: &RreSystem, kind: MomentKind, c: &[f64]) -> Result<DMatrix<f64>> {
    diffusion_field(sys, kind.variant(), 1.0, c)
}

/// Row divergence of the unscaled diffusion matrix, by central differences.
fn diffusion_divergence(sys: &RreSystem, kind: MomentKind, c: &[f64]) -> Result<DVector<f64>> {
    let species = c.len();
    let mut div = DVector::zeros(species);
    for j in 0..species {
        let h = 1e-6 * c[j].abs().max(1.0);
        let mut cp = c.to_vec();
        let mut cm = c.to_vec();
        cp[j] += h;
        cm[j] -= h;
        let mp = closure_diffusion(sys, kind, &cp)?;
        let mm = closure_diffusion(sys, kind, &cm)?;
        for i in 0..species {
            div[i] += (mp[(i, j)] - mm[(i, j)]) / (2.0 * h);
        }
    }
    Ok(div)
}

/// Integrates the closure: mean drift plus Lyapunov covariance flow,
/// halting if the covariance loses positive semidefiniteness.
pub fn gaussian_moment_flow(
    sys: &RreSystem,
    kind: MomentKind,
    mean0: &[f64],
    cov0: &DMatrix<f64>,
    volume: f64,
    checkpoints: &[f64],
    tol: f64,
) -> Result<MomentTrajectory> {
    let species = sys.network().species_count();
    if mean0.len() != species || cov0.nrows() != species || cov0.ncols() != species {
        return Err(Error::Dimension("moment initial data shape".into()));
    }
    let dim = species + species * species;
    let mut y0 = DVector::zeros(dim);
    for i in 0..species {
        y0[i] = mean0[i];
    }
    for i in 0..species {
        for j in 0..species {
            y0[species + i * species + j] = cov0[(i, j)];
        }
    }
    let net = sys.network().clone();
    let sys_c = sys.clone();
    let rhs = move |_t: f64, y: &DVector<f64>| -> DVector<f64> {
        let a: Vec<f64> = (0..species).map(|i| y[i].max(1e-12)).collect();
        let r = mass_action_rate(&net, &a).expect("dimensions fixed");
        let jac = mass_action_jacobian(&net, &a).expect("dimensions fixed");
        let m = closure_diffusion(&sys_c, kind, &a).expect("interior state");
        let mut out = DVector::zeros(dim);
        let correction = match kind {
            MomentKind::Cle => DVector::zeros(species),
            MomentKind::Fp => {
                diffusion_divergence(&sys_c, kind, &a).expect("interior state") / volume
            }
        };
        for i in 0..species {
            out[i] = -r[i] + correction[i];
        }
        // dA/dt = -J A - A J^T + 2 M with J the drift Jacobian (-DR).
        let mut cov = DMatrix::zeros(species, species);
        for i in 0..species {
            for j in 0..species {
                cov[(i, j)] = y[species + i * species + j];
            }
        }
        let minus_j = -&jac;
        let da = &minus_j * &cov + &cov * minus_j.transpose() + 2.0 * &m;
        for i in 0..species {
            for j in 0..species {
                out[species + i * species + j] = da[(i, j)];
            }
        }
        out
    };
    let sol = integrate_rk45(&rhs, 0.0, &y0, checkpoints, &OdeOptions::with_tol(tol))?;
    if let Some(t) = sol.underflow_at {
        return Err(Error::Integration(format!("moment flow stalled at t = {t}")));
    }
    let mut traj = MomentTrajectory { times: Vec::new(), means: Vec::new(), covariances: Vec::new() };
    for &t in checkpoints {
        let y = sol
            .state_at(t)
            .ok_or_else(|| Error::Integration("missing checkpoint".into()))?;
        let mean = DVector::from_fn(species, |i, _| y[i]);
        let mut cov = DMatrix::zeros(species, species);
        for i in 0..species {
            for j in 0..species {
                cov[(i, j)] = y[species + i * species + j];
            }
        }
        let eig = nalgebra::SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
        let trace = cov.trace().abs().max(1e-300);
        if eig.eigenvalues.iter().any(|&l| l < -1e-9 * trace) {
            return Err(Error::Integration(format!(
                "covariance lost positive semidefiniteness at t = {t}"
            )));
        }
        traj.times.push(t);
        traj.means.push(mean);
        traj.covariances.push(cov);
    }
    Ok(traj)
}

/// Fixed point of the 1D logarithmic-mean closure: mean with the
/// volume-corrected drift, covariance matching the diffusion there.
pub fn fp_closure_fixed_point(sys: &RreSystem, volume: f64) -> Result<(f64, f64)> {
    if sys.network().species_count() != 1 {
        return Err(Error::Domain("fixed point helper is one-dimensional".into()));
    }
    let f = |a: f64| -> f64 {
        let r = mass_action_rate(sys.network(), &[a]).unwrap()[0];
        let div = diffusion_divergence(sys, MomentKind::Fp, &[a]).unwrap()[0];
        -r + div / volume
    };
    let mut lo = 1e-6;
    let mut hi = 100.0;
    if f(lo) < 0.0 || f(hi) > 0.0 {
        return Err(Error::Integration("fixed point not bracketed".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let m = closure_diffusion(sys, MomentKind::Fp, &[a])?[(0, 0)];
    // Stationary Lyapunov equation in 1D: A = M / J with J the drift slope.
    let jac = mass_action_jacobian(sys.network(), &[a])?[(0, 0)];
    Ok((a, m / jac))
}
