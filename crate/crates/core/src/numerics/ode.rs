//! Adaptive explicit Runge-Kutta integration (Dormand-Prince 5(4) pair).

use crate::error::Error;
use crate::Result;
use nalgebra::DVector;

/// Integration controls.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Reject steps that push any component below `-atol`; clamp the
    /// remaining tiny negatives to zero. Meant for flows that are known to
    /// point inward at the boundary of the positive cone.
    pub nonneg_guard: bool,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, max_steps: 2_000_000, nonneg_guard: false }
    }
}

/// Accepted steps of one integration.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Set when the step size underflowed; the stored samples end at the
    /// last good state.
    pub underflow_at: Option<f64>,
}

impl OdeSolution {
    /// State at a time that was requested as an output point.
    pub fn state_at(&self, t: f64) -> Option<&DVector<f64>> {
        let idx = self
            .times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))?;
        Some(&self.states[idx])
    }
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0`, landing exactly on every point of
/// `checkpoints` (which must be strictly increasing and start after `t0`).
/// Every accepted step is recorded.
pub fn integrate_rk45(
    f: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    t0: f64,
    y0: &DVector<f64>,
    checkpoints: &[f64],
    opts: &OdeOptions,
) -> Result<OdeSolution> {
    let t_end = *checkpoints.last().ok_or_else(|| {
        Error::Integration("integrate_rk45 needs at least one checkpoint".into())
    })?;
    if t_end <= t0 {
        return Err(Error::Integration("checkpoints must lie beyond t0".into()));
    }
    let mut times = vec![t0];
    let mut states = vec![y0.clone()];
    let mut t = t0;
    let mut y = y0.clone();
    let mut next_cp = 0usize;
    let mut h = ((t_end - t0) / 100.0).min(0.1);
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);

    for _ in 0..opts.max_steps {
        while next_cp < checkpoints.len() && checkpoints[next_cp] <= t + 1e-14 * (1.0 + t.abs()) {
            next_cp += 1;
        }
        if next_cp == checkpoints.len() {
            return Ok(OdeSolution { times, states, underflow_at: None });
        }
        let target = checkpoints[next_cp];
        if t + h > target {
            h = target - t;
        }

        k.clear();
        k.push(f(t, &y));
        for stage in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[stage][j] != 0.0 {
                    ys.axpy(h * A[stage][j], kj, 1.0);
                }
            }
            k.push(f(t + h * c_node(stage + 1), &ys));
        }

        let mut y5 = y.clone();
        let mut y4 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                y5.axpy(h * B5[j], kj, 1.0);
            }
            if B4[j] != 0.0 {
                y4.axpy(h * B4[j], kj, 1.0);
            }
        }

        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let scale = opts.atol + opts.rtol * y[i].abs().max(y5[i].abs());
            err = err.max((y5[i] - y4[i]).abs() / scale);
        }
        let guard_violated =
            opts.nonneg_guard && y5.iter().any(|&v| v < -opts.atol);

        if err <= 1.0 && !guard_violated {
            t += h;
            if opts.nonneg_guard {
                for v in y5.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            y = y5;
            times.push(t);
            states.push(y.clone());
        }

        let factor = if guard_violated {
            0.5
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < 1e-14 * (1.0 + t.abs()) {
            return Ok(OdeSolution { times, states, underflow_at: Some(t) });
        }
    }
    Err(Error::Integration(format!(
        "step budget exhausted at t = {t} (of {t_end})"
    )))
}

fn c_node(stage: usize) -> f64 {
    [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0][stage]
}
