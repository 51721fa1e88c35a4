//! Drift-diffusion approximations of the master equation at large volume:
//! equilibrium densities, the model variants, their equilibrium-fitted
//! discrete operators, higher-order coefficient fields, and Gaussian moment
//! closures.

mod compare;
mod moments;
pub mod operator;

pub use compare::{compare_models, ComparisonReport, ModelMoments};
pub use moments::{gaussian_moment_flow, MomentKind, MomentTrajectory};
pub use operator::{GridSpec, ReactionChains};

use crate::error::Error;
use crate::kernels;
use crate::numerics::quad::integrate_halfline;
use crate::rre::RreSystem;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// The drift-diffusion model variants.
///
/// They share the mass-action drift to leading order and differ in the
/// diffusion matrix (logarithmic vs arithmetic mean weights) and in the
/// order-1/V drift corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpeVariant {
    /// Diffusion `K(c)/V` (logarithmic mean), drift `R`.
    Simple,
    /// `Simple` plus the equilibrium-sharpening drift correction, so the
    /// refined equilibrium is stationary.
    SimpleCorrected,
    /// Arithmetic-mean diffusion in divergence-of-flux form; the
    /// Kolmogorov equation of the diffusion approximation.
    Cle,
    /// Arithmetic-mean diffusion in gradient form plus the first-order
    /// drift correction field.
    Corrected,
    /// Arithmetic-mean diffusion in gradient form with plain drift; the
    /// leading order of the cosh-structure expansion.
    CoshCorrected,
}

/// Per-reaction scalar fields shared by the variants.
#[derive(Debug, Clone, Copy)]
struct ReactionFields {
    /// `k_fw c^alpha - k_bw c^beta`.
    flux: f64,
    /// Arithmetic mean `(k_fw c^alpha + k_bw c^beta)/2`.
    arith: f64,
    /// Logarithmic mean `Lambda(k_fw c^alpha, k_bw c^beta)`.
    logm: f64,
}

fn reaction_fields(sys: &RreSystem, r: usize, c: &[f64]) -> Result<ReactionFields> {
    let (a, b) = sys.normalized_monomials(r, c);
    let kappa = sys.kappa_star()[r];
    Ok(ReactionFields {
        flux: kappa * (a - b),
        arith: 0.5 * kappa * (a + b),
        logm: kappa * kernels::log_mean(a, b)?,
    })
}

/// Directional derivative of the arithmetic-mean coefficient along the
/// reaction direction.
fn arith_directional_derivative(sys: &RreSystem, r: usize, c: &[f64]) -> f64 {
    let net = sys.network();
    let (a, b) = sys.normalized_monomials(r, c);
    let kappa = sys.kappa_star()[r];
    let gamma = net.gamma(r);
    let mut acc = 0.0;
    for (i, &g) in gamma.iter().enumerate() {
        let da = a * net.alpha(r)[i] as f64 / c[i];
        let db = b * net.beta(r)[i] as f64 / c[i];
        acc += g as f64 * 0.5 * kappa * (da + db);
    }
    acc
}

/// First-order drift correction coefficient of the corrected variant,
/// per reaction.
fn b_hat0(sys: &RreSystem, r: usize, c: &[f64]) -> Result<f64> {
    let net = sys.network();
    let fields = reaction_fields(sys, r, c)?;
    let gamma = net.gamma(r);
    let gamma_c_delta: f64 =
        gamma.iter().zip(c).map(|(&g, &ci)| 0.5 * g as f64 / ci).sum();
    let alpha_c_beta: f64 = net
        .alpha(r)
        .iter()
        .zip(net.beta(r))
        .zip(c)
        .map(|((&a, &b), &ci)| a as f64 * b as f64 / ci)
        .sum();
    Ok(fields.logm * gamma_c_delta - 0.5 * fields.flux * alpha_c_beta)
}

/// A built drift-diffusion model: variant, grid, and the per-reaction
/// chain operators.
#[derive(Debug, Clone)]
pub struct FpeModel {
    pub variant: FpeVariant,
    pub volume: f64,
    pub grid: GridSpec,
    reactions: Vec<ReactionChains>,
    sys: RreSystem,
}

impl FpeModel {
    /// Assembles the finite-volume operator. The PDE path is limited to one
    /// or two species; use the moment closure beyond that.
    pub fn build(
        sys: &RreSystem,
        volume: f64,
        variant: FpeVariant,
        grid: GridSpec,
    ) -> Result<Self> {
        let species = sys.network().species_count();
        if species > 2 {
            return Err(Error::Domain(
                "grid operator limited to two species; use the moment closure".into(),
            ));
        }
        if grid.dims.len() != species {
            return Err(Error::Dimension("grid dimension != species count".into()));
        }
        if !(volume > 0.0) {
            return Err(Error::Domain("volume must be positive".into()));
        }
        let mut reactions = Vec::with_capacity(sys.network().reaction_count());
        for r in 0..sys.network().reaction_count() {
            let offset = sys.network().gamma(r);
            let h = offset
                .iter()
                .enumerate()
                .find(|(_, &o)| o != 0)
                .map(|(i, _)| grid.spacing[i])
                .expect("nonzero stoichiometric vector");
            let mut face = |ci: &[f64], cj: &[f64]| -> (f64, f64) {
                face_data(sys, variant, volume, r, h, ci, cj)
            };
            reactions.push(ReactionChains::build(&grid, &offset, &mut face)?);
        }
        Ok(Self { variant, volume, grid, reactions, sys: sys.clone() })
    }

    pub fn system(&self) -> &RreSystem {
        &self.sys
    }

    /// Applies the generator to cell masses.
    pub fn apply(&self, m: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.len()];
        for chains in &self.reactions {
            chains.apply_into(m, &mut out);
        }
        out
    }

    /// One implicit step: symmetric backward-Euler sweep over the
    /// reactions. Exactly mass-conserving and positivity-preserving; for a
    /// single reaction there is no splitting error.
    pub fn step(&self, m: &mut [f64], dt: f64) -> Result<()> {
        let n = self.reactions.len();
        if n <= 1 {
            for chains in &self.reactions {
                chains.backward_euler(m, dt)?;
            }
            return Ok(());
        }
        for chains in &self.reactions[..n - 1] {
            chains.backward_euler(m, 0.5 * dt)?;
        }
        self.reactions[n - 1].backward_euler(m, dt)?;
        for chains in self.reactions[..n - 1].iter().rev() {
            chains.backward_euler(m, 0.5 * dt)?;
        }
        Ok(())
    }

    /// Fixed-step solve returning cell masses at `t_end`.
    pub fn solve(&self, m0: &[f64], t_end: f64, dt: f64) -> Result<Vec<f64>> {
        if m0.len() != self.grid.cell_count() {
            return Err(Error::Dimension("initial mass vector length".into()));
        }
        let mut m = m0.to_vec();
        let steps = (t_end / dt).ceil() as usize;
        let dt = t_end / steps as f64;
        for _ in 0..steps {
            self.step(&mut m, dt)?;
        }
        Ok(m)
    }

    /// Long-time stationary cell masses (normalized), found by damped
    /// implicit iteration; the L-stable step makes this converge fast.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let n = self.grid.cell_count();
        let mut m = vec![1.0 / n as f64; n];
        let mut dt = 1.0;
        for _ in 0..400 {
            let prev = m.clone();
            self.step(&mut m, dt)?;
            let total: f64 = m.iter().sum();
            for v in m.iter_mut() {
                *v /= total;
            }
            let delta: f64 =
                m.iter().zip(&prev).map(|(a, b)| (a - b).abs()).sum();
            if delta < 1e-14 {
                return Ok(m);
            }
            dt = (dt * 1.5).min(50.0);
        }
        Ok(m)
    }

    /// Variant diffusion matrix field at a point.
    pub fn diffusion_at(&self, c: &[f64]) -> Result<DMatrix<f64>> {
        diffusion_field(&self.sys, self.variant, self.volume, c)
    }

    /// Variant drift field at a point (coefficient of `rho` in the flux,
    /// with diffusion written in gradient form).
    pub fn drift_at(&self, c: &[f64]) -> Result<DVector<f64>> {
        drift_field(&self.sys, self.variant, self.volume, c)
    }
}

/// Face data (directional diffusion, fitted potential increment) for one
/// reaction of one variant.
fn face_data(
    sys: &RreSystem,
    variant: FpeVariant,
    volume: f64,
    r: usize,
    h: f64,
    ci: &[f64],
    cj: &[f64],
) -> (f64, f64) {
    let mid: Vec<f64> = ci.iter().zip(cj).map(|(&a, &b)| 0.5 * (a + b)).collect();
    let fm = reaction_fields(sys, r, &mid).expect("interior cell centers");
    match variant {
        FpeVariant::Simple => {
            let dphi = volume * (sys.entropy(cj).unwrap() - sys.entropy(ci).unwrap());
            (fm.logm / volume, dphi)
        }
        FpeVariant::SimpleCorrected => {
            let e1 = |c: &[f64]| -> f64 {
                c.iter().map(|&x| 0.5 * (volume * x + 1.0 / 6.0).ln()).sum()
            };
            let dphi = volume * (sys.entropy(cj).unwrap() - sys.entropy(ci).unwrap())
                + (e1(cj) - e1(ci));
            (fm.logm / volume, dphi)
        }
        FpeVariant::Cle => {
            // Flux (m/V) d(rho) + rho (f + dm/V): the dm/m part integrates
            // to an exact log difference.
            let log_m = |c: &[f64]| {
                let f = reaction_fields(sys, r, c).unwrap();
                f.arith.ln()
            };
            let ratio = |c: &[f64]| {
                let f = reaction_fields(sys, r, c).unwrap();
                volume * f.flux / f.arith
            };
            let dphi = log_m(cj) - log_m(ci)
                + operator::fitted_increment(ci, cj, h, &ratio);
            (fm.arith / volume, dphi)
        }
        FpeVariant::Corrected => {
            let ratio = |c: &[f64]| {
                let f = reaction_fields(sys, r, c).unwrap();
                (volume * f.flux + b_hat0(sys, r, c).unwrap()) / f.arith
            };
            (fm.arith / volume, operator::fitted_increment(ci, cj, h, &ratio))
        }
        FpeVariant::CoshCorrected => {
            let ratio = |c: &[f64]| {
                let f = reaction_fields(sys, r, c).unwrap();
                volume * f.flux / f.arith
            };
            (fm.arith / volume, operator::fitted_increment(ci, cj, h, &ratio))
        }
    }
}

/// Diffusion matrix of a variant.
pub fn diffusion_field(
    sys: &RreSystem,
    variant: FpeVariant,
    volume: f64,
    c: &[f64],
) -> Result<DMatrix<f64>> {
    let species = sys.network().species_count();
    let mut k = DMatrix::zeros(species, species);
    for r in 0..sys.network().reaction_count() {
        let fields = reaction_fields(sys, r, c)?;
        let weight = match variant {
            FpeVariant::Simple | FpeVariant::SimpleCorrected => fields.logm,
            FpeVariant::Cle | FpeVariant::Corrected | FpeVariant::CoshCorrected => fields.arith,
        } / volume;
        let gamma = sys.network().gamma(r);
        for (i, &gi) in gamma.iter().enumerate() {
            for (j, &gj) in gamma.iter().enumerate() {
                k[(i, j)] += weight * gi as f64 * gj as f64;
            }
        }
    }
    Ok(k)
}

/// Drift field of a variant, with the diffusion written in gradient form.
pub fn drift_field(
    sys: &RreSystem,
    variant: FpeVariant,
    volume: f64,
    c: &[f64],
) -> Result<DVector<f64>> {
    let species = sys.network().species_count();
    let mut drift = DVector::zeros(species);
    for r in 0..sys.network().reaction_count() {
        let fields = reaction_fields(sys, r, c)?;
        let gamma = sys.network().gamma(r);
        let correction = match variant {
            FpeVariant::Simple | FpeVariant::CoshCorrected => 0.0,
            FpeVariant::SimpleCorrected => {
                // (K/V) grad of the half-log correction, reaction-wise.
                let g_e1: f64 = gamma
                    .iter()
                    .zip(c)
                    .map(|(&g, &ci)| g as f64 * 0.5 * volume / (volume * ci + 1.0 / 6.0))
                    .sum();
                fields.logm * g_e1 / volume
            }
            FpeVariant::Cle => arith_directional_derivative(sys, r, c) / volume,
            FpeVariant::Corrected => b_hat0(sys, r, c)? / volume,
        };
        for (i, &g) in gamma.iter().enumerate() {
            drift[i] += (fields.flux + correction) * g as f64;
        }
    }
    Ok(drift)
}

/// Which closed-form equilibrium family a density came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumKind {
    /// Proportional to `exp(-V E(c))`.
    Simple,
    /// Per-species refined family with the square-root particle-count
    /// correction.
    Refined,
}

/// Equilibrium density sampled at the cell centers of a grid.
#[derive(Debug, Clone)]
pub struct FpeEquilibrium {
    pub kind: EquilibriumKind,
    pub grid: GridSpec,
    /// Density values at cell centers, normalized to unit mass on the grid.
    pub density: Vec<f64>,
    /// Per-species halfline normalization constants (refined family only).
    pub z_constants: Vec<f64>,
}

/// Unnormalized refined per-species density
/// `V exp(-V c* lambda_B(c/c*)) / sqrt(2 pi (V c + 1/6))`.
pub fn refined_density_unnormalized(volume: f64, c: f64, c_star: f64) -> f64 {
    let lb = c / c_star * (c / c_star).ln() - c / c_star + 1.0;
    let exponent = -volume * c_star * if c == 0.0 { 1.0 } else { lb };
    volume * exponent.exp() / (2.0 * std::f64::consts::PI * (volume * c + 1.0 / 6.0)).sqrt()
}

/// Per-species normalization `Z(V, c*) = int_0^inf W-hat dc`.
pub fn refined_normalization(volume: f64, c_star: f64) -> f64 {
    integrate_halfline(|c| refined_density_unnormalized(volume, c, c_star), 1e-13)
}

/// Builds the simple equilibrium `exp(-V E)` on a grid, normalized there.
pub fn simple_equilibrium(sys: &RreSystem, volume: f64, grid: &GridSpec) -> Result<FpeEquilibrium> {
    let mut density = Vec::with_capacity(grid.cell_count());
    for flat in 0..grid.cell_count() {
        let c = grid.center(flat);
        density.push((-volume * sys.entropy(&c)?).exp());
    }
    normalize_on_grid(grid, &mut density)?;
    Ok(FpeEquilibrium {
        kind: EquilibriumKind::Simple,
        grid: grid.clone(),
        density,
        z_constants: Vec::new(),
    })
}

/// Builds the refined equilibrium on a grid; errors when the window misses
/// more than `tail_bound` of its mass.
pub fn refined_equilibrium(
    sys: &RreSystem,
    volume: f64,
    grid: &GridSpec,
    tail_bound: f64,
) -> Result<FpeEquilibrium> {
    let c_star = sys.c_star();
    if grid.dims.len() != c_star.len() {
        return Err(Error::Dimension("grid dimension != species count".into()));
    }
    let z: Vec<f64> =
        c_star.iter().map(|&s| refined_normalization(volume, s)).collect();
    let mut density = Vec::with_capacity(grid.cell_count());
    for flat in 0..grid.cell_count() {
        let c = grid.center(flat);
        let mut w = 1.0;
        for (i, (&ci, &si)) in c.iter().zip(c_star).enumerate() {
            w *= refined_density_unnormalized(volume, ci, si) / z[i];
        }
        density.push(w);
    }
    let window_mass: f64 = density.iter().sum::<f64>() * grid.cell_volume();
    if (1.0 - window_mass).abs() > tail_bound {
        return Err(Error::BoxTooSmall(format!(
            "refined equilibrium window holds {window_mass}, tail bound {tail_bound}"
        )));
    }
    normalize_on_grid(grid, &mut density)?;
    Ok(FpeEquilibrium {
        kind: EquilibriumKind::Refined,
        grid: grid.clone(),
        density,
        z_constants: z,
    })
}

fn normalize_on_grid(grid: &GridSpec, density: &mut [f64]) -> Result<()> {
    let mass: f64 = density.iter().sum::<f64>() * grid.cell_volume();
    if !(mass > 0.0) {
        return Err(Error::Domain("equilibrium mass vanished on the window".into()));
    }
    for v in density.iter_mut() {
        *v /= mass;
    }
    Ok(())
}

/// Expansion coefficient `E_1(c) = z-hat + (1/2) sum log(V c_i + 1/6)` of
/// the refined equilibrium: `-(1/V) log W_V = E + E_1/V`.
pub fn refined_expansion_coefficient(
    volume: f64,
    c: &[f64],
    z_constants: &[f64],
) -> f64 {
    let z_hat: f64 = z_constants
        .iter()
        .map(|&z| ((2.0 * std::f64::consts::PI).sqrt() * z / volume).ln())
        .sum();
    let halves: f64 = c.iter().map(|&ci| 0.5 * (volume * ci + 1.0 / 6.0).ln()).sum();
    z_hat + halves
}

/// The higher-order coefficient fields of one state, per reaction, with
/// their coercivity and parabolicity certificates.
#[derive(Debug, Clone)]
pub struct HigherOrderCoefficients {
    pub theta1: f64,
    pub theta2: f64,
    pub upsilon0: Vec<f64>,
    pub upsilon1: Vec<f64>,
    pub upsilon2: Vec<f64>,
    pub upsilon3: Vec<f64>,
    /// `Lambda_0 + Upsilon_0/V + Upsilon_2/V^2` per reaction.
    pub lambda_upsilon: Vec<f64>,
    pub a_hat0: Vec<f64>,
    pub a_hat1: Vec<f64>,
    pub a_hat2: Vec<f64>,
    pub a_hat3: Vec<f64>,
    /// Leading drift coefficient `k_fw c^alpha - k_bw c^beta` per reaction.
    pub drift: Vec<f64>,
    pub b_hat0: Vec<f64>,
    pub b_hat1: Vec<f64>,
    /// How many doublings of `Upsilon_2` the parabolicity certificate
    /// needed (0 for the stock choice).
    pub upsilon2_doublings: u32,
}

/// Default coercivity parameters.
pub const THETA1_DEFAULT: f64 = 0.25;
pub const THETA2_DEFAULT: f64 = 0.75;

/// Evaluates the correction coefficients at a state and certifies the
/// coercivity and parabolicity inequalities, enlarging the free
/// second-order coefficient if needed.
pub fn higher_order_coefficients(
    sys: &RreSystem,
    c: &[f64],
    volume: f64,
    theta1: f64,
    theta2: f64,
) -> Result<HigherOrderCoefficients> {
    if !(0.0 < theta1 && theta1 < theta2 && theta2 < 1.0) {
        return Err(Error::Domain("need 0 < theta1 < theta2 < 1".into()));
    }
    if c.iter().any(|&x| x <= 0.0) {
        return Err(Error::Domain("coefficients need interior states".into()));
    }
    let net = sys.network();
    let reactions = net.reaction_count();
    let mut out = HigherOrderCoefficients {
        theta1,
        theta2,
        upsilon0: Vec::with_capacity(reactions),
        upsilon1: Vec::with_capacity(reactions),
        upsilon2: Vec::with_capacity(reactions),
        upsilon3: Vec::with_capacity(reactions),
        lambda_upsilon: Vec::with_capacity(reactions),
        a_hat0: Vec::with_capacity(reactions),
        a_hat1: Vec::with_capacity(reactions),
        a_hat2: Vec::with_capacity(reactions),
        a_hat3: Vec::with_capacity(reactions),
        drift: Vec::with_capacity(reactions),
        b_hat0: Vec::with_capacity(reactions),
        b_hat1: Vec::with_capacity(reactions),
        upsilon2_doublings: 0,
    };
    for r in 0..reactions {
        let fields = reaction_fields(sys, r, c)?;
        let lambda0 = fields.logm;
        let gamma = net.gamma(r);
        let alpha_c_beta: f64 = net
            .alpha(r)
            .iter()
            .zip(net.beta(r))
            .zip(c)
            .map(|((&a, &b), &ci)| a as f64 * b as f64 / ci)
            .sum();
        let u0 = -0.5 * lambda0 * alpha_c_beta;
        let u1 = upsilon1(sys, r, c)?;
        let u3 = if lambda0 > 0.0 { u1 * u1 / (4.0 * theta1 * lambda0) } else { 0.0 };
        let grad_e: f64 = {
            let (a, b) = sys.normalized_monomials(r, c);
            (a / b).ln()
        };
        let grad_e1: f64 = gamma
            .iter()
            .zip(c)
            .map(|(&g, &ci)| g as f64 * 0.5 * volume / (volume * ci + 1.0 / 6.0))
            .sum();
        let force = grad_e + grad_e1 / volume;

        let mut u2 = lambda0 / (16.0 * (1.0 - theta2)) * alpha_c_beta * alpha_c_beta;
        let mut doublings = 0u32;
        let (lam_u, a1, a2, a3) = loop {
            let lam_u = lambda0 + u0 / volume + u2 / (volume * volume);
            let a1 = lam_u + u1 * force;
            let a2 = u1 + u3 * force;
            let a3 = u3;
            // Parabolicity: a1 + 2 a2 q + 3 a3 q^2 >= 0 for all q.
            let ok = if a3 > 0.0 {
                a2 * a2 <= 3.0 * a1 * a3 * (1.0 + 1e-12) || a1 >= 0.0 && a2 == 0.0
            } else {
                a2.abs() <= 1e-14 * (1.0 + a1.abs()) && a1 >= -1e-14
            };
            if ok {
                break (lam_u, a1, a2, a3);
            }
            u2 *= 2.0;
            doublings += 1;
            if doublings > 80 {
                return Err(Error::Certification(format!(
                    "parabolicity not achievable at c = {c:?}, reaction {r}"
                )));
            }
        };
        // Coercivity certificates.
        if lam_u < theta2 * lambda0 * (1.0 - 1e-12) {
            return Err(Error::Certification(format!(
                "coercivity lower bound fails at c = {c:?}, reaction {r}"
            )));
        }
        if 4.0 * theta1 * lambda0 * u3 < u1 * u1 * (1.0 - 1e-12) {
            return Err(Error::Certification(format!(
                "discriminant bound fails at c = {c:?}, reaction {r}"
            )));
        }
        out.upsilon0.push(u0);
        out.upsilon1.push(u1);
        out.upsilon2.push(u2);
        out.upsilon3.push(u3);
        out.lambda_upsilon.push(lam_u);
        out.a_hat0.push(lam_u * force);
        out.a_hat1.push(a1);
        out.a_hat2.push(a2);
        out.a_hat3.push(a3);
        out.drift.push(fields.flux);
        out.b_hat0.push(b_hat0(sys, r, c)?);
        out.b_hat1.push(fields.arith);
        out.upsilon2_doublings = out.upsilon2_doublings.max(doublings);
    }
    Ok(out)
}

/// `Upsilon_1 = Lambda_0 (a + b - 2 Lambda)/(2 (a - b))` with its removable
/// singularity on the diagonal (it vanishes there).
fn upsilon1(sys: &RreSystem, r: usize, c: &[f64]) -> Result<f64> {
    let (a0, b0) = sys.normalized_monomials(r, c);
    let kappa = sys.kappa_star()[r];
    let a = kappa * a0;
    let b = kappa * b0;
    let lambda0 = kernels::log_mean(a, b)?;
    let sum = a + b;
    if sum == 0.0 {
        return Ok(0.0);
    }
    let u = (a - b) / sum;
    if u.abs() < 1e-4 {
        // (a + b - 2 Lambda)/(2(a-b)) = u/6 + 2u^3/45 + O(u^5).
        return Ok(lambda0 * (u / 6.0 + 2.0 * u * u * u / 45.0));
    }
    Ok(lambda0 * (sum - 2.0 * lambda0) / (2.0 * (a - b)))
}
