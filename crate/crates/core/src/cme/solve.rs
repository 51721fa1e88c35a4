//! Time propagation of the truncated master equation.
//!
//! Rates grow with both volume and particle count, so explicit stepping is
//! useless here. The solver projects onto a Krylov subspace and
//! exponentiates the small Hessenberg block, substepping until the standard
//! residual estimate meets the tolerance. For small boxes with detailed
//! balance, a dense eigendecomposition of the symmetrized generator serves
//! as an independent oracle.

use super::{LatticeDistribution, TruncatedCme};
use crate::error::Error;
use crate::numerics::expm::expm;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Solver controls.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Target accumulated propagation error (l1-ish).
    pub tol: f64,
    /// Maximal Krylov dimension.
    pub krylov_dim: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, krylov_dim: 40 }
    }
}

/// Time-indexed solution snapshots.
#[derive(Debug, Clone)]
pub struct CmeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Total mass at each snapshot (drops subobstochastically by the leak).
    pub mass: Vec<f64>,
    /// Running estimate of mass lost through the truncation boundary.
    pub leak_estimate: Vec<f64>,
}

impl CmeTrajectory {
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        let idx = self
            .times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))?;
        Some(self.states[idx].as_slice())
    }
}

/// Propagates `u' = A u` to every requested time (strictly increasing,
/// first entry may be 0 to record the initial state).
pub fn solve_cme(
    cme: &TruncatedCme,
    u0: &LatticeDistribution,
    times: &[f64],
    opts: &SolveOptions,
) -> Result<CmeTrajectory> {
    let dim = cme.generator().dim();
    if u0.values().len() != dim {
        return Err(Error::Dimension("initial distribution length".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::Domain("snapshot times must be strictly increasing".into()));
    }
    let total_span = times.last().copied().unwrap_or(0.0);
    let mut u = DVector::from_column_slice(u0.values());
    let mut t = 0.0;
    let mut traj = CmeTrajectory {
        times: Vec::new(),
        states: Vec::new(),
        mass: Vec::new(),
        leak_estimate: Vec::new(),
    };
    let mut leak_acc = 0.0;
    let leak_of = |u: &DVector<f64>| -> f64 {
        cme.dropped_rate().iter().zip(u.iter()).map(|(&d, &ui)| d * ui.max(0.0)).sum()
    };
    let norm_a = cme.generator().norm_inf().max(1e-300);

    for &target in times {
        if target == 0.0 && t == 0.0 {
            record(&mut traj, 0.0, &u, leak_acc);
            continue;
        }
        while t < target - 1e-14 * (1.0 + target) {
            let remaining = target - t;
            // Substep heuristic: keep ||A|| dt moderate, then let the
            // residual estimate tighten it further.
            let mut dt = remaining.min(2.0 * opts.krylov_dim as f64 / norm_a);
            loop {
                let leak_before = leak_of(&u);
                let step_tol = opts.tol * (dt / total_span.max(dt));
                match krylov_exp_step(cme, &u, dt, opts.krylov_dim, step_tol)? {
                    Some(next) => {
                        let leak_after = leak_of(&next);
                        leak_acc += 0.5 * dt * (leak_before + leak_after);
                        u = next;
                        t += dt;
                        break;
                    }
                    None => {
                        dt *= 0.5;
                        if dt < 1e-15 * (1.0 + t) {
                            return Err(Error::Integration(
                                "krylov substep underflow".into(),
                            ));
                        }
                    }
                }
            }
        }
        t = target;
        record(&mut traj, target, &u, leak_acc);
    }
    Ok(traj)
}

fn record(traj: &mut CmeTrajectory, t: f64, u: &DVector<f64>, leak: f64) {
    traj.times.push(t);
    traj.states.push(u.iter().copied().collect());
    traj.mass.push(u.iter().sum());
    traj.leak_estimate.push(leak);
}

/// One Krylov-projected `exp(dt A) u` step; `None` when the residual
/// estimate fails the tolerance (caller halves `dt`).
fn krylov_exp_step(
    cme: &TruncatedCme,
    u: &DVector<f64>,
    dt: f64,
    max_dim: usize,
    tol: f64,
) -> Result<Option<DVector<f64>>> {
    let dim = u.len();
    let m = max_dim.min(dim);
    let beta = u.norm();
    if beta == 0.0 {
        return Ok(Some(u.clone()));
    }
    let mut basis: Vec<DVector<f64>> = vec![u / beta];
    let mut h = DMatrix::<f64>::zeros(m + 1, m);
    let mut breakdown_at = None;
    for j in 0..m {
        let mut w = DVector::from_vec(cme.generator().apply(basis[j].as_slice()));
        for (i, q) in basis.iter().enumerate() {
            let hij = q.dot(&w);
            h[(i, j)] = hij;
            w.axpy(-hij, q, 1.0);
        }
        // One re-orthogonalization pass keeps the basis clean for stiff
        // generators.
        for (i, q) in basis.iter().enumerate() {
            let corr = q.dot(&w);
            h[(i, j)] += corr;
            w.axpy(-corr, q, 1.0);
        }
        let nw = w.norm();
        h[(j + 1, j)] = nw;
        if nw < 1e-12 * cme.generator().norm_inf().max(1.0) {
            breakdown_at = Some(j + 1);
            break;
        }
        basis.push(w / nw);
    }
    let k = breakdown_at.unwrap_or(m);
    let hk = h.view((0, 0), (k, k)).into_owned();
    let e = expm(&(hk * dt));
    let mut small = DVector::zeros(k);
    for i in 0..k {
        small[i] = beta * e[(i, 0)];
    }
    // Residual estimate from the first neglected subdiagonal entry.
    if breakdown_at.is_none() {
        let err = (h[(k, k - 1)] * small[k - 1]).abs() * dt;
        if err > tol * beta.max(1.0) {
            return Ok(None);
        }
    }
    let mut out = DVector::zeros(dim);
    for (i, q) in basis.iter().take(k).enumerate() {
        out.axpy(small[i], q, 1.0);
    }
    // Clip the tiny negative ripples the projection can introduce.
    for v in out.iter_mut() {
        if *v < 0.0 && *v > -1e-13 {
            *v = 0.0;
        }
    }
    if out.iter().any(|&v| v < -1e-9) {
        return Ok(None);
    }
    Ok(Some(out))
}

/// Dense oracle: eigendecomposition of the detailed-balance symmetrization
/// `S = D^{-1} A D`, `D = diag(sqrt(w))`. Completely independent of the
/// Krylov path.
pub fn dense_expm_oracle(cme: &TruncatedCme, u0: &[f64], t: f64) -> Result<Vec<f64>> {
    let eq = cme.equilibrium()?;
    let dim = cme.generator().dim();
    if dim > 4000 {
        return Err(Error::Domain("dense oracle limited to small boxes".into()));
    }
    let a = cme.generator().to_dense();
    let d: Vec<f64> = eq.w.iter().map(|&w| w.sqrt()).collect();
    let mut s = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            s[(i, j)] = a[(i, j)] * d[j] / d[i];
        }
    }
    // Enforce exact symmetry before the eigensolve.
    let sym = (&s + s.transpose()) * 0.5;
    let asym = (&s - s.transpose()).amax();
    if asym > 1e-8 * s.amax().max(1.0) {
        return Err(Error::DetailedBalanceRequired(format!(
            "generator does not symmetrize: defect {asym:.3e}"
        )));
    }
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut y = DVector::zeros(dim);
    for i in 0..dim {
        y[i] = u0[i] / d[i];
    }
    let coeffs = eig.eigenvectors.transpose() * y;
    let mut z = DVector::zeros(dim);
    for k in 0..dim {
        z.axpy((eig.eigenvalues[k] * t).exp() * coeffs[k], &eig.eigenvectors.column(k).into_owned(), 1.0);
    }
    Ok((0..dim).map(|i| z[i] * d[i]).collect())
}
