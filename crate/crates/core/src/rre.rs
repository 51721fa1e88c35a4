//! The macroscopic reaction-rate equation as an entropy gradient flow.
//!
//! For a network with detailed-balance equilibrium the flow `dc/dt = -R(c)`
//! is reproduced three ways: through the Onsager matrix built from
//! logarithmic means, through generalized convex means on Markov-chain
//! networks, and through nonquadratic dual dissipation potentials. All
//! routes must agree with the plain mass-action right-hand side; the tests
//! hold them to that.

use crate::error::Error;
use crate::io;
use crate::kernels::{self, ConvexGenerator};
use crate::network::{DetailedBalanceReport, ReactionNetwork, StoichiometryReport};
use crate::numerics::ode::{integrate_rk45, OdeOptions};
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Mass-action rate vector `R(c)`; does not need detailed balance.
pub fn mass_action_rate(net: &ReactionNetwork, c: &[f64]) -> Result<DVector<f64>> {
    if c.len() != net.species_count() {
        return Err(Error::Dimension(format!(
            "state has {} entries, network has {} species",
            c.len(),
            net.species_count()
        )));
    }
    let mut out = DVector::zeros(net.species_count());
    for r in 0..net.reaction_count() {
        let flux = net.k_fw(r) * ReactionNetwork::monomial(c, net.alpha(r))
            - net.k_bw(r) * ReactionNetwork::monomial(c, net.beta(r));
        for (i, g) in net.gamma(r).into_iter().enumerate() {
            out[i] += flux * g as f64;
        }
    }
    Ok(out)
}

/// Jacobian of [`mass_action_rate`].
pub fn mass_action_jacobian(net: &ReactionNetwork, c: &[f64]) -> Result<DMatrix<f64>> {
    let i = net.species_count();
    if c.len() != i {
        return Err(Error::Dimension("jacobian state length".into()));
    }
    let mut jac = DMatrix::zeros(i, i);
    for r in 0..net.reaction_count() {
        let gamma = net.gamma(r);
        for col in 0..i {
            let d_flux = net.k_fw(r) * monomial_partial(c, net.alpha(r), col)
                - net.k_bw(r) * monomial_partial(c, net.beta(r), col);
            for (row, g) in gamma.iter().enumerate() {
                jac[(row, col)] += d_flux * *g as f64;
            }
        }
    }
    Ok(jac)
}

fn monomial_partial(c: &[f64], exps: &[u32], i: usize) -> f64 {
    let e = exps[i];
    if e == 0 {
        return 0.0;
    }
    let mut prod = e as f64;
    for (j, (&cj, &ej)) in c.iter().zip(exps).enumerate() {
        let power = if j == i { ej - 1 } else { ej };
        prod *= cj.powi(power as i32);
    }
    prod
}

/// Damped Newton search for a steady state `R(c) = 0` from `c0`.
///
/// Used to report the joint steady state of networks that fail detailed
/// balance.
pub fn steady_state(net: &ReactionNetwork, c0: &[f64]) -> Result<Vec<f64>> {
    let mut c = DVector::from_column_slice(c0);
    for _ in 0..200 {
        let r = mass_action_rate(net, c.as_slice())?;
        let norm = r.amax();
        if norm <= 1e-14 * (1.0 + c.amax()) {
            return Ok(c.iter().copied().collect());
        }
        let jac = mass_action_jacobian(net, c.as_slice())?;
        let step = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Integration("singular jacobian in steady-state search".into()))?;
        let mut lambda = 1.0;
        loop {
            let trial = &c - lambda * &step;
            if trial.iter().all(|&v| v > 0.0) {
                let rt = mass_action_rate(net, trial.as_slice())?;
                if rt.amax() < norm {
                    c = trial;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(Error::Integration("steady-state line search stalled".into()));
            }
        }
    }
    Err(Error::Integration("steady-state iteration did not converge".into()))
}

/// A reaction network certified to satisfy detailed balance, packaged with
/// the data every gradient structure needs.
#[derive(Debug, Clone)]
pub struct RreSystem {
    net: ReactionNetwork,
    stoich: StoichiometryReport,
    c_star: Vec<f64>,
    kappa_star: Vec<f64>,
}

impl RreSystem {
    pub fn new(
        net: ReactionNetwork,
        stoich: StoichiometryReport,
        db: &DetailedBalanceReport,
    ) -> Result<Self> {
        if !db.holds {
            return Err(Error::DetailedBalanceRequired(
                "RreSystem needs a network with certified detailed balance".into(),
            ));
        }
        let c_star = db.c_star()?.to_vec();
        let kappa_star = db.kappa_star()?.to_vec();
        Ok(Self { net, stoich, c_star, kappa_star })
    }

    /// Convenience constructor running the full certification pipeline.
    pub fn from_network(net: ReactionNetwork) -> Result<Self> {
        let stoich = crate::network::stoichiometric_analysis(&net);
        let db = crate::network::check_detailed_balance(&net, &stoich);
        Self::new(net, stoich, &db)
    }

    pub fn network(&self) -> &ReactionNetwork {
        &self.net
    }

    pub fn stoichiometry(&self) -> &StoichiometryReport {
        &self.stoich
    }

    pub fn c_star(&self) -> &[f64] {
        &self.c_star
    }

    pub fn kappa_star(&self) -> &[f64] {
        &self.kappa_star
    }

    /// `R(c)` as in the defining ODE `dc/dt = -R(c)`.
    pub fn rate_vector(&self, c: &[f64]) -> Result<DVector<f64>> {
        mass_action_rate(&self.net, c)
    }

    /// Normalized forward/backward monomials of one reaction:
    /// `(c^alpha / c_*^alpha, c^beta / c_*^beta)`.
    pub fn normalized_monomials(&self, r: usize, c: &[f64]) -> (f64, f64) {
        let a = c
            .iter()
            .zip(&self.c_star)
            .zip(self.net.alpha(r))
            .map(|((&ci, &si), &e)| (ci / si).powi(e as i32))
            .product();
        let b = c
            .iter()
            .zip(&self.c_star)
            .zip(self.net.beta(r))
            .map(|((&ci, &si), &e)| (ci / si).powi(e as i32))
            .product();
        (a, b)
    }

    /// Relative entropy with respect to the equilibrium.
    pub fn entropy(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.c_star.len() {
            return Err(Error::Dimension("entropy state length".into()));
        }
        let mut e = 0.0;
        for (&ci, &si) in c.iter().zip(&self.c_star) {
            e += si * kernels::lambda_boltzmann(ci / si)?;
        }
        Ok(e)
    }

    /// Entropy gradient `(log(c_i / c_i^*))_i`; singular on the boundary.
    pub fn entropy_gradient(&self, c: &[f64]) -> Result<DVector<f64>> {
        if c.len() != self.c_star.len() {
            return Err(Error::Dimension("entropy gradient state length".into()));
        }
        let mut g = DVector::zeros(c.len());
        for (i, (&ci, &si)) in c.iter().zip(&self.c_star).enumerate() {
            if ci <= 0.0 {
                return Err(Error::Domain(format!(
                    "entropy gradient is singular at c[{i}] = {ci}"
                )));
            }
            g[i] = (ci / si).ln();
        }
        Ok(g)
    }

    /// Onsager matrix: logarithmic-mean mobility weights on the
    /// stoichiometric directions. Symmetric positive semidefinite with range
    /// inside the stoichiometric subspace.
    pub fn onsager_matrix(&self, c: &[f64]) -> Result<DMatrix<f64>> {
        self.require_interior(c)?;
        let i = self.net.species_count();
        let mut k = DMatrix::zeros(i, i);
        for r in 0..self.net.reaction_count() {
            let (a, b) = self.normalized_monomials(r, c);
            let weight = self.kappa_star[r] * kernels::log_mean(a, b)?;
            let gamma = self.net.gamma(r);
            for (row, &gr) in gamma.iter().enumerate() {
                for (col, &gc) in gamma.iter().enumerate() {
                    k[(row, col)] += weight * gr as f64 * gc as f64;
                }
            }
        }
        Ok(k)
    }

    /// Generalized Onsager matrix for Markov-chain networks with an
    /// arbitrary convex generator. Coincides with [`Self::onsager_matrix`]
    /// for the Boltzmann generator.
    pub fn markov_onsager(
        &self,
        c: &[f64],
        generator: &ConvexGenerator<f64>,
    ) -> Result<DMatrix<f64>> {
        if !self.net.is_markov_chain() {
            return Err(Error::NotMarkovChain(
                "generalized gradient structures need single-exchange reactions".into(),
            ));
        }
        self.require_interior(c)?;
        let i = self.net.species_count();
        let mut k = DMatrix::zeros(i, i);
        for r in 0..self.net.reaction_count() {
            let from = self.net.alpha(r).iter().position(|&x| x == 1).unwrap();
            let to = self.net.beta(r).iter().position(|&x| x == 1).unwrap();
            let weight = self.kappa_star[r]
                * generator.mean(c[from] / self.c_star[from], c[to] / self.c_star[to])?;
            k[(from, from)] += weight;
            k[(to, to)] += weight;
            k[(from, to)] -= weight;
            k[(to, from)] -= weight;
        }
        Ok(k)
    }

    /// Gradient of the generalized entropy `sum_i c_i^* phi(c_i / c_i^*)`.
    pub fn generalized_entropy_gradient(
        &self,
        c: &[f64],
        generator: &ConvexGenerator<f64>,
    ) -> Result<DVector<f64>> {
        self.require_interior(c)?;
        let mut g = DVector::zeros(c.len());
        for (i, (&ci, &si)) in c.iter().zip(&self.c_star).enumerate() {
            g[i] = generator.phi_prime(ci / si)?;
        }
        Ok(g)
    }

    /// Dissipation rate `Psi^*(c, -DE(c)) = 1/2 sum_r kappa_r G(a_r, b_r)`,
    /// infinite when the state touches the boundary in an active direction.
    pub fn dissipation_rate(&self, c: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for r in 0..self.net.reaction_count() {
            let (a, b) = self.normalized_monomials(r, c);
            acc += 0.5 * self.kappa_star[r] * kernels::g_quot(a, b)?;
        }
        Ok(acc)
    }

    /// Dual dissipation potential `Psi^*(c, zeta)` for a given family.
    pub fn dual_dissipation(&self, spec: &DissipationSpec, c: &[f64], zeta: &[f64]) -> Result<f64> {
        self.require_interior(c)?;
        if zeta.len() != self.net.species_count() {
            return Err(Error::Dimension("covector length".into()));
        }
        let mut acc = 0.0;
        for r in 0..self.net.reaction_count() {
            let psi = spec.family(r);
            let (a, b) = self.normalized_monomials(r, c);
            let l = self.mobility(r, a, b, psi)?;
            let arg: f64 = self
                .net
                .gamma(r)
                .iter()
                .zip(zeta)
                .map(|(&g, &z)| g as f64 * z)
                .sum();
            acc += l * psi.psi(arg);
        }
        Ok(acc)
    }

    /// `d/dzeta Psi^*(c, -DE(c))`, which must equal `-R(c)` for every
    /// admissible dissipation family.
    pub fn force_to_rate(&self, spec: &DissipationSpec, c: &[f64]) -> Result<DVector<f64>> {
        self.require_interior(c)?;
        let de = self.entropy_gradient(c)?;
        let mut out = DVector::zeros(c.len());
        for r in 0..self.net.reaction_count() {
            let psi = spec.family(r);
            let (a, b) = self.normalized_monomials(r, c);
            let l = self.mobility(r, a, b, psi)?;
            let gamma = self.net.gamma(r);
            let arg: f64 = gamma.iter().zip(de.iter()).map(|(&g, &z)| -(g as f64) * z).sum();
            let slope = l * psi.psi_prime(arg);
            for (i, &g) in gamma.iter().enumerate() {
                out[i] += slope * g as f64;
            }
        }
        Ok(out)
    }

    /// Mobility coefficient `kappa_r (b - a) / psi'(log(b/a))`, evaluated as
    /// `kappa_r Lambda(a, b) * [delta / psi'(delta)]` so the diagonal limit
    /// `kappa_r a / psi''(0)` comes out of the same branch that guards the
    /// logarithmic mean.
    fn mobility(&self, r: usize, a: f64, b: f64, psi: &PsiFamily) -> Result<f64> {
        let delta = (b / a).ln();
        Ok(self.kappa_star[r] * kernels::log_mean(a, b)? * psi.delta_over_psi_prime(delta))
    }

    fn require_interior(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.net.species_count() {
            return Err(Error::Dimension("state length".into()));
        }
        if c.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain(
                "operation needs strictly positive concentrations".into(),
            ));
        }
        Ok(())
    }

    /// Integrates `dc/dt = -R(c)` with the embedded adaptive pair, keeping
    /// states componentwise nonnegative, and records energy, conserved
    /// quantities, and the dissipation ledger along the way.
    pub fn integrate(&self, c0: &[f64], t_end: f64, tol: f64) -> Result<Trajectory> {
        self.integrate_at(c0, &[t_end], tol)
    }

    /// Like [`Self::integrate`], landing exactly on each checkpoint.
    pub fn integrate_at(&self, c0: &[f64], checkpoints: &[f64], tol: f64) -> Result<Trajectory> {
        if c0.len() != self.net.species_count() {
            return Err(Error::Dimension("initial state length".into()));
        }
        if c0.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("initial state must be nonnegative".into()));
        }
        let f = |_t: f64, y: &DVector<f64>| -> DVector<f64> {
            -mass_action_rate(&self.net, y.as_slice()).expect("dimension checked above")
        };
        let mut opts = OdeOptions::with_tol(tol);
        opts.nonneg_guard = true;
        let sol = integrate_rk45(&f, 0.0, &DVector::from_column_slice(c0), checkpoints, &opts)?;
        if let Some(t) = sol.underflow_at {
            return Err(Error::Integration(format!(
                "step size underflow at t = {t}; last state {:?}",
                sol.states.last().map(|s| s.as_slice().to_vec())
            )));
        }
        self.build_trajectory(sol.times, sol.states)
    }

    fn build_trajectory(&self, times: Vec<f64>, states: Vec<DVector<f64>>) -> Result<Trajectory> {
        let mut energies = Vec::with_capacity(times.len());
        let mut conserved = Vec::with_capacity(times.len());
        let mut rates = Vec::with_capacity(times.len());
        for s in &states {
            energies.push(self.entropy(s.as_slice())?);
            conserved.push(crate::network::conserved_value(&self.stoich, s.as_slice())?.q);
            rates.push(self.dissipation_rate(s.as_slice()).unwrap_or(f64::INFINITY));
        }
        let mut dissipation_steps = vec![0.0];
        let mut ed_residuals = vec![0.0];
        for k in 1..times.len() {
            let h = times[k] - times[k - 1];
            let step = 0.5 * h * (2.0 * rates[k - 1] + 2.0 * rates[k]);
            dissipation_steps.push(step);
            ed_residuals.push(energies[k] - energies[k - 1] + step);
        }
        Ok(Trajectory {
            times,
            states: states.into_iter().map(|s| s.iter().copied().collect()).collect(),
            energies,
            conserved,
            dissipation_steps,
            ed_residuals,
        })
    }
}

/// Admissible per-reaction dissipation functions.
///
/// Each entry is smooth, even, convex, vanishes at zero, and has positive
/// curvature there. `delta_over_psi_prime` evaluates `x / psi'(x)` through a
/// cancellation-free closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiFamily {
    /// `x^2 / 2`; recovers the quadratic (Onsager matrix) structure.
    Quadratic,
    /// `4 cosh(x/2) - 4`; the tilt-invariant choice.
    Cosh,
    /// `x^2/2 + x^4/24`; a smooth non-quadratic, non-cosh test family.
    Quartic,
}

impl PsiFamily {
    pub fn psi(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => 0.5 * x * x,
            Self::Cosh => kernels::cosh_star(x),
            Self::Quartic => 0.5 * x * x + x.powi(4) / 24.0,
        }
    }

    pub fn psi_prime(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => x,
            Self::Cosh => kernels::cosh_star_prime(x),
            Self::Quartic => x + x.powi(3) / 6.0,
        }
    }

    /// `x / psi'(x)` with its removable singularity at zero.
    pub fn delta_over_psi_prime(&self, x: f64) -> f64 {
        match self {
            Self::Quadratic => 1.0,
            Self::Cosh => {
                if x.abs() < 1e-2 {
                    let x2 = x * x;
                    1.0 / (1.0 + x2 / 24.0 + x2 * x2 / 1920.0)
                } else {
                    x / kernels::cosh_star_prime(x)
                }
            }
            Self::Quartic => 1.0 / (1.0 + x * x / 6.0),
        }
    }
}

/// Which dual dissipation potential drives the flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DissipationSpec {
    Quadratic,
    Cosh,
    /// One family per reaction.
    General(Vec<PsiFamily>),
}

impl DissipationSpec {
    /// Uniform quartic family, the stock "general" preset.
    pub fn general_quartic(reactions: usize) -> Self {
        Self::General(vec![PsiFamily::Quartic; reactions])
    }

    fn family(&self, r: usize) -> &PsiFamily {
        match self {
            Self::Quadratic => &PsiFamily::Quadratic,
            Self::Cosh => &PsiFamily::Cosh,
            Self::General(v) => &v[r],
        }
    }
}

/// Integration output with its diagnostics ledger.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub conserved: Vec<Vec<f64>>,
    /// Trapezoidal `int 2 Psi^* dt` over the step ending at each sample
    /// (zero for the first).
    pub dissipation_steps: Vec<f64>,
    /// Step-local energy-dissipation residual
    /// `E_k - E_{k-1} + int 2 Psi^* dt`.
    pub ed_residuals: Vec<f64>,
}

impl Trajectory {
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        let idx = self
            .times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))?;
        Some(self.states[idx].as_slice())
    }

    /// CSV export: `t,c_<name>...,E,Qc_1..Qc_m,dissipation`.
    pub fn write_csv(&self, names: &[String], out: &mut impl std::io::Write) -> Result<()> {
        let m = self.conserved.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend(names.iter().map(|n| format!("c_{n}")));
        header.push("E".into());
        header.extend((1..=m).map(|k| format!("Qc_{k}")));
        header.push("dissipation".into());
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.times.len() {
            let mut fields = vec![io::fmt(self.times[k])];
            fields.extend(self.states[k].iter().map(|&x| io::fmt(x)));
            fields.push(io::fmt(self.energies[k]));
            fields.extend(self.conserved[k].iter().map(|&x| io::fmt(x)));
            fields.push(io::fmt(self.dissipation_steps[k]));
            writeln!(out, "{}", io::row(fields))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{check_detailed_balance, parse_network, stoichiometric_analysis};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn exchange_system(a: f64, b: f64) -> RreSystem {
        // 0 <-> X with forward a, backward b: dc/dt = a - b c.
        let net = parse_network(&format!("species X\n0 <-> 1 X : kf={a}, kb={b}\n")).unwrap();
        RreSystem::from_network(net).unwrap()
    }

    fn two_species_exchange() -> RreSystem {
        let net = parse_network("species A B\n1 A <-> 1 B : kf=1, kb=1\n").unwrap();
        RreSystem::from_network(net).unwrap()
    }

    fn two_pair_net(a: f64, b: f64) -> ReactionNetwork {
        parse_network(&format!(
            "species X\n0 <-> 1 X : kf={}, kb={}\n0 <-> 2 X : kf=1, kb=1\n",
            2.0 * a,
            4.0 * b
        ))
        .unwrap()
    }

    #[test]
    fn rate_vector_closed_forms() {
        let sys = exchange_system(1.0, 1.0);
        // Equilibrium is a fixed point.
        let r = sys.rate_vector(sys.c_star()).unwrap();
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-14);
        // At c = 0 the inflow is a.
        let r0 = sys.rate_vector(&[0.0]).unwrap();
        assert_relative_eq!(-r0[0], 1.0, max_relative = 1e-14);

        // Two-pair network at c = 0: dc/dt = 2a + 2.
        let net = two_pair_net(2.0, 1.0);
        let r = mass_action_rate(&net, &[0.0]).unwrap();
        assert_relative_eq!(-r[0], 6.0, max_relative = 1e-14);
    }

    #[test]
    fn steady_state_of_unbalanced_two_pair() {
        // dc/dt = 2a - 4bc + 2(1 - c^2) vanishes at sqrt(1 + a + b^2) - b.
        let net = two_pair_net(7.0, 1.0);
        let c = steady_state(&net, &[1.0]).unwrap();
        assert_abs_diff_eq!(c[0], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn entropy_values_and_gradient() {
        let sys = exchange_system(1.0, 1.0);
        assert_abs_diff_eq!(sys.entropy(sys.c_star()).unwrap(), 0.0, epsilon = 1e-15);
        let g = sys.entropy_gradient(sys.c_star()).unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            sys.entropy(&[std::f64::consts::E]).unwrap(),
            1.0,
            max_relative = 1e-14
        );
        assert!(sys.entropy_gradient(&[0.0]).is_err());
        // Positivity away from equilibrium.
        for c in [0.01, 0.5, 2.0, 9.0] {
            assert!(sys.entropy(&[c]).unwrap() > 0.0);
        }
    }

    #[test]
    fn onsager_reproduces_rate_and_respects_conservation() {
        let sys = two_species_exchange();
        for c in [[0.3, 1.9], [2.0, 0.05], [1.0, 1.0]] {
            let k = sys.onsager_matrix(&c).unwrap();
            // Symmetry.
            assert_relative_eq!(k[(0, 1)], k[(1, 0)], max_relative = 1e-14);
            // K DE = R.
            let de = sys.entropy_gradient(&c).unwrap();
            let r = sys.rate_vector(&c).unwrap();
            let kde = &k * &de;
            for i in 0..2 {
                assert_abs_diff_eq!(kde[i], r[i], epsilon = 1e-12);
            }
            // Conservation rows annihilate the mobility.
            for qrow in &sys.stoichiometry().q {
                for col in 0..2 {
                    let dot: f64 = (0..2).map(|row| qrow[row] as f64 * k[(row, col)]).sum();
                    assert_abs_diff_eq!(dot, 0.0, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn single_pair_onsager_is_scalar_log_mean() {
        let sys = {
            let net = parse_network("species X\n1 X <-> 0 : kf=1, kb=1\n").unwrap();
            RreSystem::from_network(net).unwrap()
        };
        let c = [0.37];
        let k = sys.onsager_matrix(&c).unwrap();
        let expected =
            sys.kappa_star()[0] * kernels::log_mean(c[0] / sys.c_star()[0], 1.0).unwrap();
        assert_relative_eq!(k[(0, 0)], expected, max_relative = 1e-14);
    }

    #[test]
    fn markov_structures_share_the_flow() {
        // Four-state chain with cycle rates chosen to close the loop:
        // detailed balance forces the product of rate ratios around the
        // cycle to be 1.
        let net = parse_network(
            "species A B C D\n1 A <-> 1 B : kf=1.0, kb=0.5\n1 B <-> 1 C : kf=2.0, kb=1.5\n1 C <-> 1 D : kf=0.7, kb=0.3\n1 A <-> 1 D : kf=1.1, kb=0.17678571428571427\n",
        )
        .unwrap();
        let stoich = stoichiometric_analysis(&net);
        let db = check_detailed_balance(&net, &stoich);
        assert!(db.holds, "witness: {:?}", db.witness);
        let sys = RreSystem::new(net, stoich, &db).unwrap();

        let c = [0.4, 1.3, 0.8, 2.2];
        // Boltzmann generator coincides with the quadratic structure.
        let k_m = sys.markov_onsager(&c, &ConvexGenerator::Boltzmann).unwrap();
        let k = sys.onsager_matrix(&c).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(k_m[(i, j)], k[(i, j)], epsilon = 1e-12);
            }
        }
        // Every generator reproduces the linear flow.
        let r = sys.rate_vector(&c).unwrap();
        for generator in [
            ConvexGenerator::Boltzmann,
            ConvexGenerator::Quadratic,
            ConvexGenerator::power(1.5).unwrap(),
        ] {
            let kg = sys.markov_onsager(&c, &generator).unwrap();
            let dg = sys.generalized_entropy_gradient(&c, &generator).unwrap();
            let kdg = &kg * &dg;
            for i in 0..4 {
                assert_abs_diff_eq!(kdg[i], r[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_generator_gives_constant_weights() {
        let sys = two_species_exchange();
        let c = [0.9, 1.7];
        let k = sys.markov_onsager(&c, &ConvexGenerator::Quadratic).unwrap();
        // The mean is identically 1, so the weight is exactly kappa_star.
        assert_relative_eq!(k[(0, 0)], sys.kappa_star()[0], max_relative = 1e-14);
    }

    #[test]
    fn markov_structures_reject_nonlinear_networks() {
        let sys = exchange_system(1.0, 1.0);
        assert!(matches!(
            sys.markov_onsager(&[1.0], &ConvexGenerator::Boltzmann),
            Err(Error::NotMarkovChain(_))
        ));
    }

    #[test]
    fn dissipation_specs_agree_on_the_vector_field() {
        let net = parse_network(
            "species A B\n1 A <-> 2 B : kf=1.3, kb=0.7\n0 <-> 1 A : kf=0.9, kb=1.1\n",
        )
        .unwrap();
        let sys = RreSystem::from_network(net).unwrap();
        let specs = [
            DissipationSpec::Quadratic,
            DissipationSpec::Cosh,
            DissipationSpec::general_quartic(2),
        ];
        for c in [[0.4, 0.9], [2.0, 0.3], [1.0, 1.0], [5.0, 5.0]] {
            let r = sys.rate_vector(&c).unwrap();
            for spec in &specs {
                let f = sys.force_to_rate(spec, &c).unwrap();
                for i in 0..2 {
                    assert_abs_diff_eq!(f[i], -r[i], epsilon = 1e-11);
                }
                // Psi*(c, 0) = 0 for every family.
                assert_abs_diff_eq!(
                    sys.dual_dissipation(spec, &c, &[0.0, 0.0]).unwrap(),
                    0.0,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn quadratic_spec_matches_onsager_quadratic_form() {
        let sys = two_species_exchange();
        let c = [0.8, 1.4];
        let zeta = [0.3, -1.2];
        let k = sys.onsager_matrix(&c).unwrap();
        let z = DVector::from_column_slice(&zeta);
        let quad = 0.5 * (z.transpose() * &k * &z)[(0, 0)];
        assert_relative_eq!(
            sys.dual_dissipation(&DissipationSpec::Quadratic, &c, &zeta).unwrap(),
            quad,
            max_relative = 1e-13
        );
    }

    #[test]
    fn cosh_mobility_is_geometric_mean() {
        let sys = exchange_system(2.0, 0.5);
        let c = [1.9];
        let (a, b) = sys.normalized_monomials(0, &c);
        // For the cosh family the mobility is kappa * sqrt(a b); compare
        // Psi* at a unit covector against the closed form.
        let zeta = [1.0];
        let got = sys.dual_dissipation(&DissipationSpec::Cosh, &c, &zeta).unwrap();
        let gamma_dot_zeta = -zeta[0];
        let expected = sys.kappa_star()[0] * (a * b).sqrt() * kernels::cosh_star(gamma_dot_zeta);
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn integration_matches_linear_closed_form() {
        // dc/dt = 1 - c from 0: c(t) = 1 - e^{-t}.
        let sys = exchange_system(1.0, 1.0);
        let traj = sys.integrate(&[0.0], 1.0, 1e-10).unwrap();
        let end = traj.states.last().unwrap();
        assert_abs_diff_eq!(end[0], 1.0 - (-1.0f64).exp(), epsilon = 1e-8);
        for s in &traj.states {
            assert!(s[0] >= 0.0);
        }
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let sys = exchange_system(3.0, 1.5);
        let traj = sys.integrate(sys.c_star(), 2.0, 1e-10).unwrap();
        for s in &traj.states {
            assert_abs_diff_eq!(s[0], 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn unbalanced_two_pair_converges_to_joint_steady_state() {
        // Not a detailed-balance system, so integrate the plain mass-action
        // field directly.
        let net = two_pair_net(7.0, 1.0);
        let f = |_t: f64, y: &DVector<f64>| -mass_action_rate(&net, y.as_slice()).unwrap();
        let mut opts = OdeOptions::with_tol(1e-10);
        opts.nonneg_guard = true;
        let sol = integrate_rk45(&f, 0.0, &DVector::from_vec(vec![0.5]), &[20.0], &opts).unwrap();
        assert_abs_diff_eq!(sol.states.last().unwrap()[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn trajectory_diagnostics_and_csv() {
        let sys = two_species_exchange();
        let traj = sys.integrate_at(&[1.8, 0.2], &[0.5, 1.0, 3.0], 1e-10).unwrap();
        // Conservation: A + B constant to 10 tol.
        for q in &traj.conserved {
            assert_abs_diff_eq!(q[0], traj.conserved[0][0], epsilon = 1e-9);
        }
        // Energy decays monotonically within 10 tol.
        for k in 1..traj.energies.len() {
            assert!(traj.energies[k] <= traj.energies[k - 1] + 1e-9);
        }
        // Interior trajectory: every step residual obeys the trapezoid
        // truncation order h^3.
        for (k, res) in traj.ed_residuals.iter().enumerate().skip(1) {
            assert!(res.is_finite());
            let h = traj.times[k] - traj.times[k - 1];
            assert!(res.abs() <= 100.0 * h.powi(3) + 1e-12, "step {k}: {res}");
        }
        // Checkpoints are present.
        assert!(traj.state_at(0.5).is_some());
        assert!(traj.state_at(1.0).is_some());

        let mut buf = Vec::new();
        traj.write_csv(sys.network().species_names(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,c_A,c_B,E,Qc_1,dissipation");
        assert_eq!(lines.count(), traj.times.len());
    }

    #[test]
    fn boundary_field_points_inward() {
        let net = parse_network(
            "species A B C\n1 A + 1 B <-> 1 C : kf=2, kb=1\n2 A <-> 1 B : kf=1, kb=3\n",
        )
        .unwrap();
        for c in [[0.0, 0.7, 0.4], [0.5, 0.0, 0.1], [0.3, 0.2, 0.0], [0.0, 0.0, 1.0]] {
            let r = mass_action_rate(&net, &c).unwrap();
            for j in 0..3 {
                if c[j] == 0.0 {
                    assert!(-r[j] >= -1e-12, "component {j} flows outward: {}", -r[j]);
                }
            }
        }
    }
}
