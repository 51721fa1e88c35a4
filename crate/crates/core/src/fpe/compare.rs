//! Side-by-side comparison of the model hierarchy on the scalar unit
//! birth-death pair: master equation, transport limit, and both Gaussian
//! closures, plus the stationary-tail contrast between the logarithmic-mean
//! and arithmetic-mean diffusions.

use super::moments::{gaussian_moment_flow, MomentKind};
use super::operator::GridSpec;
use super::{simple_equilibrium, FpeModel, FpeVariant};
use crate::cme::{LatticeBox, LatticeDistribution, SolveOptions, TruncatedCme};
use crate::error::Error;
use crate::io;
use crate::kernels;
use crate::network::{check_detailed_balance, parse_network, stoichiometric_analysis};
use crate::rre::RreSystem;
use crate::Result;
use nalgebra::DMatrix;
use serde::Serialize;

/// Mean/variance time series of one model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelMoments {
    pub label: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Everything the comparison driver measures.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub models: Vec<ModelMoments>,
    /// Log-density slope of the arithmetic-mean stationary density at the
    /// middle and far probe points (nearly equal: exponential tail).
    pub cle_tail_slopes: (f64, f64),
    /// Same probes for the logarithmic-mean variant (magnitude grows:
    /// super-exponential tail).
    pub fp_tail_slopes: (f64, f64),
    /// Sup distance between the solved arithmetic-mean stationary density
    /// and its closed form, relative to the peak.
    pub cle_stationary_sup_error: f64,
    /// Max over `[1/3, 3]` of the relative gap between the logarithmic and
    /// arithmetic means of `(1, c)`.
    pub max_logmean_gap: f64,
    /// Max gap between the master-equation mean and the macroscopic
    /// closed-form trajectory.
    pub mean_consistency: f64,
}

impl ComparisonReport {
    /// CSV rows `model,t,mean,variance`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "model,t,mean,variance")?;
        for m in &self.models {
            for k in 0..m.times.len() {
                writeln!(
                    out,
                    "{}",
                    io::row(vec![
                        m.label.clone(),
                        io::fmt(m.times[k]),
                        io::fmt(m.mean[k]),
                        io::fmt(m.variance[k]),
                    ])
                )?;
            }
        }
        Ok(())
    }
}

/// Runs the four models of the scalar pair `0 <-> X` with rates `(a, b)`
/// from the Poisson state at concentration `c0`.
pub fn compare_models(
    a: f64,
    b: f64,
    volume: f64,
    c0: f64,
    t_end: f64,
    samples: usize,
) -> Result<ComparisonReport> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain("rates must be positive".into()));
    }
    if samples < 2 {
        return Err(Error::Domain("need at least two time samples".into()));
    }
    let net = parse_network(&format!("species X\n0 <-> 1 X : kf={a}, kb={b}\n"))?;
    let stoich = stoichiometric_analysis(&net);
    let db = check_detailed_balance(&net, &stoich);
    let sys = RreSystem::new(net.clone(), stoich, &db)?;
    let c_star = sys.c_star()[0];
    let times: Vec<f64> = (1..=samples).map(|k| t_end * k as f64 / samples as f64).collect();

    // Master equation moments.
    let lattice =
        LatticeBox::for_poisson_tails(&[vec![c0], vec![c_star]], volume, 1e-12)?;
    let cme = TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-11)?;
    let u0 = LatticeDistribution::poisson(cme.lattice(), &[c0])?;
    let traj = crate::cme::solve_cme(&cme, &u0, &times, &SolveOptions::default())?;
    let mut cme_mean = Vec::with_capacity(times.len());
    let mut cme_var = Vec::with_capacity(times.len());
    for state in &traj.states {
        let (e, cov) = cme.moments(state)?;
        cme_mean.push(e[0]);
        cme_var.push(cov[(0, 0)]);
    }

    // Transport limit: the mean rides the macroscopic solution, variance 0.
    let macro_traj = sys.integrate_at(&[c0], &times, 1e-12)?;
    let lio_mean: Vec<f64> =
        times.iter().map(|&t| macro_traj.state_at(t).unwrap()[0]).collect();

    // Gaussian closures, matched to the Poisson initial moments.
    let cov0 = DMatrix::from_element(1, 1, c0);
    let cle =
        gaussian_moment_flow(&sys, MomentKind::Cle, &[c0], &cov0, volume, &times, 1e-12)?;
    let fp =
        gaussian_moment_flow(&sys, MomentKind::Fp, &[c0], &cov0, volume, &times, 1e-12)?;

    // Stationary densities and their tail slopes.
    let c_max = (3.0 * c_star).max(c0 + 2.0) + 3.0;
    let cells = (c_max / 0.01).round() as usize;
    let grid = GridSpec::window_1d(c_max, cells)?;
    let fp_model = FpeModel::build(&sys, volume, FpeVariant::Simple, grid.clone())?;
    let cle_model = FpeModel::build(&sys, volume, FpeVariant::Cle, grid.clone())?;
    let fp_stat = fp_model.stationary()?;
    let cle_stat = cle_model.stationary()?;

    let probe = |values: &[f64], c: f64| -> f64 {
        let h = grid.spacing[0];
        let k = ((c - 0.5 * h) / h).round() as usize;
        ((values[k + 1].max(1e-300)).ln() - (values[k - 1].max(1e-300)).ln()) / (2.0 * h)
    };
    let mid = 0.55 * c_max;
    let far = 0.85 * c_max;
    let cle_tail_slopes = (probe(&cle_stat, mid), probe(&cle_stat, far));
    let fp_tail_slopes = (probe(&fp_stat, mid), probe(&fp_stat, far));

    // Closed-form stationary density of the arithmetic-mean variant: the
    // potential is int (drift + diffusion')/diffusion, scaled by 1/V here.
    let e_tilde = |c: f64| {
        let m = |x: f64| 0.5 * (a + b * x);
        let integrand = |x: f64| (b * x - a + b / (2.0 * volume)) / m(x);
        crate::numerics::quad::adaptive_simpson(&integrand, c_star, c, 1e-12)
    };
    let mut reference: Vec<f64> =
        (0..cells).map(|k| (-volume * e_tilde(grid.center(k)[0])).exp()).collect();
    let z: f64 = reference.iter().sum();
    for r in reference.iter_mut() {
        *r /= z;
    }
    let peak = reference.iter().cloned().fold(0.0, f64::max);
    let cle_stationary_sup_error = cle_stat
        .iter()
        .zip(&reference)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / peak;

    // Logarithmic vs arithmetic mean on [1/3, 3].
    let mut max_logmean_gap: f64 = 0.0;
    for k in 0..=2000 {
        let c = 1.0 / 3.0 + (3.0 - 1.0 / 3.0) * k as f64 / 2000.0;
        let lam = kernels::log_mean(1.0, c)?;
        let am = 0.5 * (1.0 + c);
        max_logmean_gap = max_logmean_gap.max((lam - am).abs() / am);
    }

    let closed_mean = |t: f64| c_star + (c0 - c_star) * (-b * t).exp();
    let mean_consistency = times
        .iter()
        .zip(&cme_mean)
        .map(|(&t, &m)| (m - closed_mean(t)).abs())
        .fold(0.0, f64::max);

    let models = vec![
        ModelMoments { label: "cme".into(), times: times.clone(), mean: cme_mean, variance: cme_var },
        ModelMoments {
            label: "liouville".into(),
            times: times.clone(),
            mean: lio_mean,
            variance: vec![0.0; times.len()],
        },
        ModelMoments {
            label: "fp".into(),
            times: times.clone(),
            mean: fp.means.iter().map(|m| m[0]).collect(),
            variance: fp.covariances.iter().map(|c| c[(0, 0)] / volume).collect(),
        },
        ModelMoments {
            label: "fp_cle".into(),
            times: times.clone(),
            mean: cle.means.iter().map(|m| m[0]).collect(),
            variance: cle.covariances.iter().map(|c| c[(0, 0)] / volume).collect(),
        },
    ];
    Ok(ComparisonReport {
        models,
        cle_tail_slopes,
        fp_tail_slopes,
        cle_stationary_sup_error,
        max_logmean_gap,
        mean_consistency,
    })
}
