//! The chemical master equation on a truncated particle-number lattice.
//!
//! States are vectors of particle counts inside a finite box; the generator
//! is assembled sparsely with jump intensities evaluated in log-Gamma space.
//! Transitions that would leave the box are dropped, which makes the
//! truncated chain sub-stochastic: the dropped rate mass is tracked per
//! state instead of being reflected, so the detailed-balance structure of
//! the interior is untouched.

mod solve;

pub use solve::{dense_expm_oracle, solve_cme, CmeTrajectory, SolveOptions};

use crate::error::Error;
use crate::io;
use crate::kernels;
use crate::network::{DetailedBalanceReport, ReactionNetwork};
use crate::Result;
use statrs::function::gamma::ln_gamma;

/// Finite box `prod_i {0, ..., n_max_i}` with its flat index map and the
/// volume parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeBox {
    n_max: Vec<u32>,
    strides: Vec<usize>,
    len: usize,
    volume: f64,
}

impl LatticeBox {
    pub fn new(n_max: Vec<u32>, volume: f64) -> Result<Self> {
        if n_max.is_empty() {
            return Err(Error::Dimension("lattice box needs at least one species".into()));
        }
        if !(volume > 0.0) {
            return Err(Error::Domain(format!("volume must be positive, got {volume}")));
        }
        let mut strides = vec![0usize; n_max.len()];
        let mut len = 1usize;
        for i in (0..n_max.len()).rev() {
            strides[i] = len;
            len = len
                .checked_mul(n_max[i] as usize + 1)
                .ok_or_else(|| Error::BoxTooSmall("state count overflows usize".into()))?;
        }
        Ok(Self { n_max, strides, len, volume })
    }

    /// Box sized so that every reference Poisson product distribution with
    /// the given mean vectors has tail mass below `tail` outside it.
    pub fn for_poisson_tails(means: &[Vec<f64>], volume: f64, tail: f64) -> Result<Self> {
        let species = means
            .first()
            .ok_or_else(|| Error::Domain("need at least one reference mean".into()))?
            .len();
        let mut n_max = vec![0u32; species];
        for mean in means {
            if mean.len() != species {
                return Err(Error::Dimension("reference means disagree in length".into()));
            }
            for (i, &c) in mean.iter().enumerate() {
                let lambda = c * volume;
                n_max[i] = n_max[i].max(poisson_quantile(lambda, tail / species as f64));
            }
        }
        Self::new(n_max, volume)
    }

    pub fn species(&self) -> usize {
        self.n_max.len()
    }

    pub fn n_max(&self) -> &[u32] {
        &self.n_max
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Total number of lattice states.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flat index of a (possibly off-box) multi-index.
    pub fn flat(&self, n: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (i, &ni) in n.iter().enumerate() {
            if ni < 0 || ni > self.n_max[i] as i64 {
                return None;
            }
            idx += ni as usize * self.strides[i];
        }
        Some(idx)
    }

    /// Multi-index of a flat index.
    pub fn multi(&self, flat: usize) -> Vec<u32> {
        let mut rest = flat;
        let mut out = Vec::with_capacity(self.n_max.len());
        for &s in &self.strides {
            out.push((rest / s) as u32);
            rest %= s;
        }
        out
    }
}

fn poisson_quantile(lambda: f64, tail: f64) -> u32 {
    if lambda <= 0.0 {
        return 2;
    }
    // Walk outward in units of the standard deviation, then refine.
    let mut m = (lambda + 6.0 * lambda.sqrt()).ceil() as u32 + 5;
    while poisson_tail(lambda, m) > tail {
        m += (lambda.sqrt().ceil() as u32).max(2);
        if m > 4_000_000 {
            break;
        }
    }
    m
}

/// `P(X > m)` for `X ~ Poisson(lambda)`, via the summed form in log space.
fn poisson_tail(lambda: f64, m: u32) -> f64 {
    let mut acc = 0.0;
    let mut k = m as f64 + 1.0;
    loop {
        let lp = -lambda + k * lambda.ln() - ln_gamma(k + 1.0);
        let p = lp.exp();
        acc += p;
        if p < 1e-30 || k > m as f64 + 1.0 + 12.0 * lambda.sqrt() + 50.0 {
            return acc;
        }
        k += 1.0;
    }
}

/// Jump intensity of a complex with stoichiometric coefficients `alpha` out
/// of state `n` in volume `volume`; zero outside the nonnegative lattice.
///
/// The factorial quotient `(n + alpha)! / n!` is a rising factorial with at
/// most `|alpha|` integer factors, so it is evaluated as an exact product;
/// no full factorial is ever formed.
pub fn intensity(volume: f64, alpha: &[u32], n: &[i64]) -> f64 {
    if n.iter().any(|&v| v < 0) {
        return 0.0;
    }
    let mut value = volume;
    for (&a, &ni) in alpha.iter().zip(n) {
        for j in 1..=a as i64 {
            value *= (ni + j) as f64 / volume;
        }
    }
    value
}

/// Probability weights on a lattice box.
#[derive(Debug, Clone)]
pub struct LatticeDistribution {
    values: Vec<f64>,
}

impl LatticeDistribution {
    /// Wraps raw weights; they must be nonnegative and sum to 1 within
    /// 1e-12.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { values })
    }

    /// Product-Poisson distribution with concentration means `c` (so the
    /// count means are `c_i V`), renormalized on the box.
    pub fn poisson(lattice: &LatticeBox, c: &[f64]) -> Result<Self> {
        if c.len() != lattice.species() {
            return Err(Error::Dimension("mean vector length".into()));
        }
        let v = lattice.volume();
        let mut values = vec![0.0; lattice.len()];
        for (flat, value) in values.iter_mut().enumerate() {
            let n = lattice.multi(flat);
            let mut lp = 0.0;
            for (&ni, &ci) in n.iter().zip(c) {
                let lambda = ci * v;
                lp += if lambda == 0.0 {
                    if ni == 0 { 0.0 } else { f64::NEG_INFINITY }
                } else {
                    -lambda + ni as f64 * lambda.ln() - ln_gamma(ni as f64 + 1.0)
                };
            }
            *value = lp.exp();
        }
        let sum: f64 = values.iter().sum();
        for value in values.iter_mut() {
            *value /= sum;
        }
        Ok(Self { values })
    }

    /// All mass on one state.
    pub fn point_mass(lattice: &LatticeBox, n: &[i64]) -> Result<Self> {
        let flat = lattice
            .flat(n)
            .ok_or_else(|| Error::Domain(format!("state {n:?} is outside the box")))?;
        let mut values = vec![0.0; lattice.len()];
        values[flat] = 1.0;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Sparse generator in compressed sparse row form; rows index the target
/// state of `du/dt = A u`.
#[derive(Debug, Clone)]
pub struct SparseGenerator {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseGenerator {
    fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; dim + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = merged.iter().map(|t| t.1).collect();
        let vals = merged.iter().map(|t| t.2).collect();
        Self { dim, row_ptr, col_idx, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for r in 0..self.dim {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k].abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Column sums (the mass balance of each source state).
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                sums[self.col_idx[k]] += self.vals[k];
            }
        }
        sums
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col_idx[k])] += self.vals[k];
            }
        }
        m
    }

    /// Coordinate-triplet text export: `row col value` per line.
    pub fn write_coo(&self, out: &mut impl std::io::Write) -> Result<()> {
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                writeln!(out, "{} {} {}", r, self.col_idx[k], io::fmt(self.vals[k]))?;
            }
        }
        Ok(())
    }
}

/// One interior reaction face: the pair of states `n + alpha`, `n + beta`
/// with the detailed-balance coefficient of the base state `n`.
#[derive(Debug, Clone, Copy)]
pub struct ReactionFace {
    pub base: usize,
    pub idx_a: usize,
    pub idx_b: usize,
    /// `kappa_r V w_n`.
    pub nu_hat: f64,
}

/// Equilibrium data of a truncated master equation.
#[derive(Debug, Clone)]
pub struct CmeEquilibrium {
    /// Renormalized product-Poisson weights on the box.
    pub w: Vec<f64>,
    /// Mass of the untruncated distribution outside the box.
    pub tail_mass: f64,
    /// Interior faces per reaction.
    pub faces: Vec<Vec<ReactionFace>>,
}

/// Assembled truncated master equation.
#[derive(Debug, Clone)]
pub struct TruncatedCme {
    lattice: LatticeBox,
    net: ReactionNetwork,
    generator: SparseGenerator,
    /// Exit rate per state whose target lies outside the box.
    dropped_rate: Vec<f64>,
    /// Sum of all dropped rates.
    leak_rate: f64,
    equilibrium: Option<CmeEquilibrium>,
}

/// Default bound on admissible equilibrium tail mass outside the box.
pub const DEFAULT_TAIL_BOUND: f64 = 1e-12;

impl TruncatedCme {
    /// Assembles the generator; no detailed balance required.
    pub fn assemble(net: &ReactionNetwork, lattice: LatticeBox) -> Result<Self> {
        if lattice.species() != net.species_count() {
            return Err(Error::Dimension("box species count".into()));
        }
        let v = lattice.volume();
        let dim = lattice.len();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut dropped = vec![0.0; dim];
        for source in 0..dim {
            let m: Vec<i64> = lattice.multi(source).iter().map(|&x| x as i64).collect();
            let mut exit = 0.0;
            for r in 0..net.reaction_count() {
                let alpha = net.alpha(r);
                let beta = net.beta(r);
                let gamma = net.gamma(r);
                // Forward jump из n + alpha to n + beta, here from m.
                if net.k_fw(r) > 0.0 {
                    let base: Vec<i64> =
                        m.iter().zip(alpha).map(|(&mi, &a)| mi - a as i64).collect();
                    let rate = net.k_fw(r) * intensity(v, alpha, &base);
                    if rate > 0.0 {
                        exit += rate;
                        let target: Vec<i64> =
                            m.iter().zip(&gamma).map(|(&mi, &g)| mi - g).collect();
                        match lattice.flat(&target) {
                            Some(t) => triplets.push((t, source, rate)),
                            None => dropped[source] += rate,
                        }
                    }
                }
                // Backward jump from n + beta to n + alpha, here from m.
                if net.k_bw(r) > 0.0 {
                    let base: Vec<i64> =
                        m.iter().zip(beta).map(|(&mi, &b)| mi - b as i64).collect();
                    let rate = net.k_bw(r) * intensity(v, beta, &base);
                    if rate > 0.0 {
                        exit += rate;
                        let target: Vec<i64> =
                            m.iter().zip(&gamma).map(|(&mi, &g)| mi + g).collect();
                        match lattice.flat(&target) {
                            Some(t) => triplets.push((t, source, rate)),
                            None => dropped[source] += rate,
                        }
                    }
                }
            }
            if exit > 0.0 {
                triplets.push((source, source, -exit));
            }
        }
        let leak_rate = dropped.iter().sum();
        Ok(Self {
            lattice,
            net: net.clone(),
            generator: SparseGenerator::from_triplets(dim, triplets),
            dropped_rate: dropped,
            leak_rate,
            equilibrium: None,
        })
    }

    /// Assembles the generator and attaches the product-Poisson equilibrium
    /// of a detailed-balance network, rejecting boxes whose equilibrium
    /// tail exceeds `tail_bound`.
    pub fn assemble_with_equilibrium(
        net: &ReactionNetwork,
        db: &DetailedBalanceReport,
        lattice: LatticeBox,
        tail_bound: f64,
    ) -> Result<Self> {
        let mut cme = Self::assemble(net, lattice)?;
        let eq = poisson_equilibrium(net, db, &cme.lattice, tail_bound)?;
        let kappa = db.kappa_star()?;
        let faces = build_faces(net, &cme.lattice, &eq.0, kappa);
        cme.equilibrium = Some(CmeEquilibrium { w: eq.0, tail_mass: eq.1, faces });
        Ok(cme)
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn network(&self) -> &ReactionNetwork {
        &self.net
    }

    pub fn generator(&self) -> &SparseGenerator {
        &self.generator
    }

    pub fn dropped_rate(&self) -> &[f64] {
        &self.dropped_rate
    }

    pub fn leak_rate(&self) -> f64 {
        self.leak_rate
    }

    pub fn equilibrium(&self) -> Result<&CmeEquilibrium> {
        self.equilibrium
            .as_ref()
            .ok_or_else(|| Error::DetailedBalanceRequired("no equilibrium attached".into()))
    }

    /// `A w` for arbitrary weights: the stationarity defect.
    pub fn stationarity_residual(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.generator.dim() {
            return Err(Error::Dimension("weight vector length".into()));
        }
        Ok(self.generator.apply(w))
    }

    /// Worst relative defect of the three-way identity
    /// `k_fw B_alpha(n) w_{n+alpha} = k_bw B_beta(n) w_{n+beta}
    ///  = kappa_r V w_n` over interior faces.
    pub fn equilibrium_identity_residual(&self) -> Result<f64> {
        let eq = self.equilibrium()?;
        let v = self.lattice.volume();
        let mut worst: f64 = 0.0;
        for (r, faces) in eq.faces.iter().enumerate() {
            let alpha = self.net.alpha(r);
            let beta = self.net.beta(r);
            for face in faces {
                let n: Vec<i64> =
                    self.lattice.multi(face.base).iter().map(|&x| x as i64).collect();
                let fw = self.net.k_fw(r) * intensity(v, alpha, &n) * eq.w[face.idx_a];
                let bw = self.net.k_bw(r) * intensity(v, beta, &n) * eq.w[face.idx_b];
                if face.nu_hat > 0.0 {
                    worst = worst.max((fw - face.nu_hat).abs() / face.nu_hat);
                    worst = worst.max((bw - face.nu_hat).abs() / face.nu_hat);
                }
            }
        }
        Ok(worst)
    }

    /// Rescaled first moment `e_i = (1/V) sum_n n_i u_n` and covariance
    /// `v_ij = (1/V^2) Cov(n_i, n_j)`.
    pub fn moments(&self, u: &[f64]) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
        if u.len() != self.lattice.len() {
            return Err(Error::Dimension("distribution length".into()));
        }
        let species = self.lattice.species();
        let v = self.lattice.volume();
        let mut first = vec![0.0; species];
        let mut second = nalgebra::DMatrix::<f64>::zeros(species, species);
        let mass: f64 = u.iter().sum();
        for (flat, &un) in u.iter().enumerate() {
            if un == 0.0 {
                continue;
            }
            let n = self.lattice.multi(flat);
            for i in 0..species {
                first[i] += n[i] as f64 * un;
                for j in 0..species {
                    second[(i, j)] += n[i] as f64 * n[j] as f64 * un;
                }
            }
        }
        let e: Vec<f64> = first.iter().map(|&x| x / mass / v).collect();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(species, species);
        for i in 0..species {
            for j in 0..species {
                cov[(i, j)] = (second[(i, j)] / mass - first[i] * first[j] / (mass * mass))
                    / (v * v);
            }
        }
        Ok((e, cov))
    }

    /// Relative entropy per unit volume, `(1/V) sum u log(u/w)` with the
    /// `0 log 0 = 0` extension.
    pub fn entropy(&self, u: &[f64]) -> Result<f64> {
        let eq = self.equilibrium()?;
        let mut acc = 0.0;
        for (&un, &wn) in u.iter().zip(&eq.w) {
            if un > 0.0 {
                acc += un * (un / wn).ln();
            }
        }
        Ok(acc / self.lattice.volume())
    }

    /// Entropy differential `(1/V) log(u_n / w_n)`; needs `u > 0`.
    pub fn entropy_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let eq = self.equilibrium()?;
        let v = self.lattice.volume();
        u.iter()
            .zip(&eq.w)
            .map(|(&un, &wn)| {
                if un <= 0.0 {
                    Err(Error::Domain("entropy gradient needs strictly positive weights".into()))
                } else {
                    Ok((un / wn).ln() / v)
                }
            })
            .collect()
    }

    /// Applies the logarithmic-mean Onsager operator to a covector.
    pub fn apply_onsager(&self, u: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        let eq = self.equilibrium()?;
        if mu.len() != u.len() || u.len() != self.lattice.len() {
            return Err(Error::Dimension("onsager operand lengths".into()));
        }
        let v = self.lattice.volume();
        let mut out = vec![0.0; u.len()];
        for faces in &eq.faces {
            for face in faces {
                let ra = u[face.idx_a] / eq.w[face.idx_a];
                let rb = u[face.idx_b] / eq.w[face.idx_b];
                let lam = kernels::log_mean(ra, rb)?;
                let flux = v * face.nu_hat * lam * (mu[face.idx_a] - mu[face.idx_b]);
                out[face.idx_a] += flux;
                out[face.idx_b] -= flux;
            }
        }
        Ok(out)
    }

    /// Quadratic dual dissipation potential `(V/2) sum nu Lambda (dmu)^2`.
    pub fn dual_quadratic(&self, u: &[f64], mu: &[f64]) -> Result<f64> {
        let eq = self.equilibrium()?;
        let v = self.lattice.volume();
        let mut acc = 0.0;
        for faces in &eq.faces {
            for face in faces {
                let ra = u[face.idx_a] / eq.w[face.idx_a];
                let rb = u[face.idx_b] / eq.w[face.idx_b];
                let d = mu[face.idx_a] - mu[face.idx_b];
                acc += 0.5 * v * face.nu_hat * kernels::log_mean(ra, rb)? * d * d;
            }
        }
        Ok(acc)
    }

    /// cosh-type dual dissipation potential.
    pub fn dual_cosh(&self, u: &[f64], mu: &[f64]) -> Result<f64> {
        let eq = self.equilibrium()?;
        let v = self.lattice.volume();
        let mut acc = 0.0;
        for faces in &eq.faces {
            for face in faces {
                let ra = u[face.idx_a] / eq.w[face.idx_a];
                let rb = u[face.idx_b] / eq.w[face.idx_b];
                acc += face.nu_hat / v
                    * (ra * rb).sqrt()
                    * kernels::cosh_star(v * (mu[face.idx_b] - mu[face.idx_a]));
            }
        }
        Ok(acc)
    }

    /// Dissipation rate `Psi^*(u, -DE(u)) = (1/2V) sum nu G(ra, rb)`.
    ///
    /// Faces whose weights have both underflowed are skipped; their true
    /// contribution is below any representable scale.
    pub fn dissipation_rate(&self, u: &[f64]) -> Result<f64> {
        let eq = self.equilibrium()?;
        let v = self.lattice.volume();
        let mut acc = 0.0;
        for faces in &eq.faces {
            for face in faces {
                let ua = u[face.idx_a];
                let ub = u[face.idx_b];
                if ua.max(ub) < 1e-250 {
                    continue;
                }
                let ra = ua / eq.w[face.idx_a];
                let rb = ub / eq.w[face.idx_b];
                acc += face.nu_hat / (2.0 * v) * kernels::g_quot(ra, rb)?;
            }
        }
        Ok(acc)
    }

    /// Derivative of the cosh potential at the entropy force; must equal
    /// `A u` on strictly positive states.
    pub fn cosh_force(&self, u: &[f64]) -> Result<Vec<f64>> {
        let eq = self.equilibrium()?;
        let mut out = vec![0.0; u.len()];
        for faces in &eq.faces {
            for face in faces {
                let ra = u[face.idx_a] / eq.w[face.idx_a];
                let rb = u[face.idx_b] / eq.w[face.idx_b];
                if ra <= 0.0 || rb <= 0.0 {
                    return Err(Error::Domain(
                        "cosh force needs strictly positive weights".into(),
                    ));
                }
                // sqrt(ra rb) C*'(log(ra/rb)) = ra - rb.
                let flux = face.nu_hat
                    * (ra * rb).sqrt()
                    * kernels::cosh_star_prime((ra / rb).ln());
                out[face.idx_b] += flux;
                out[face.idx_a] -= flux;
            }
        }
        Ok(out)
    }

    /// Distribution snapshot CSV: `flat,n_<name>...,u,w`.
    pub fn write_distribution_csv(
        &self,
        u: &[f64],
        out: &mut impl std::io::Write,
    ) -> Result<()> {
        let names = self.net.species_names();
        let mut header = vec!["flat".to_string()];
        header.extend(names.iter().map(|n| format!("n_{n}")));
        header.push("u".into());
        header.push("w".into());
        writeln!(out, "{}", header.join(","))?;
        let w = self.equilibrium.as_ref().map(|eq| eq.w.as_slice());
        for (flat, &un) in u.iter().enumerate() {
            let n = self.lattice.multi(flat);
            let mut fields = vec![flat.to_string()];
            fields.extend(n.iter().map(|x| x.to_string()));
            fields.push(io::fmt(un));
            fields.push(io::fmt(w.map_or(f64::NAN, |w| w[flat])));
            writeln!(out, "{}", io::row(fields))?;
        }
        Ok(())
    }
}

/// Renormalized product-Poisson equilibrium on the box; errors when the
/// truncated tail exceeds `tail_bound`. Returns the weights and tail mass.
pub fn poisson_equilibrium(
    net: &ReactionNetwork,
    db: &DetailedBalanceReport,
    lattice: &LatticeBox,
    tail_bound: f64,
) -> Result<(Vec<f64>, f64)> {
    let c_star = db.c_star()?;
    if c_star.len() != lattice.species() {
        return Err(Error::Dimension("equilibrium length".into()));
    }
    let _ = net;
    let v = lattice.volume();
    let mut values = vec![0.0; lattice.len()];
    for (flat, value) in values.iter_mut().enumerate() {
        let n = lattice.multi(flat);
        let mut lp = 0.0;
        for (&ni, &ci) in n.iter().zip(c_star) {
            let lambda = ci * v;
            lp += -lambda + ni as f64 * lambda.ln() - ln_gamma(ni as f64 + 1.0);
        }
        *value = lp.exp();
    }
    let sum: f64 = values.iter().sum();
    let tail = 1.0 - sum;
    if tail > tail_bound {
        return Err(Error::BoxTooSmall(format!(
            "equilibrium tail mass {tail:.3e} exceeds bound {tail_bound:.3e}"
        )));
    }
    for value in values.iter_mut() {
        *value /= sum;
    }
    Ok((values, tail.max(0.0)))
}

fn build_faces(
    net: &ReactionNetwork,
    lattice: &LatticeBox,
    w: &[f64],
    kappa: &[f64],
) -> Vec<Vec<ReactionFace>> {
    let v = lattice.volume();
    let mut all = Vec::with_capacity(net.reaction_count());
    for r in 0..net.reaction_count() {
        let alpha = net.alpha(r);
        let beta = net.beta(r);
        let mut faces = Vec::new();
        for base in 0..lattice.len() {
            let n: Vec<i64> = lattice.multi(base).iter().map(|&x| x as i64).collect();
            let na: Vec<i64> = n.iter().zip(alpha).map(|(&ni, &a)| ni + a as i64).collect();
            let nb: Vec<i64> = n.iter().zip(beta).map(|(&ni, &b)| ni + b as i64).collect();
            if let (Some(idx_a), Some(idx_b)) = (lattice.flat(&na), lattice.flat(&nb)) {
                faces.push(ReactionFace { base, idx_a, idx_b, nu_hat: kappa[r] * v * w[base] });
            }
        }
        all.push(faces);
    }
    all
}

/// Partial sums of the birth-death non-explosion series of a
/// single-reaction network along the component through the origin.
///
/// Requires all components of `alpha - beta` to share one sign; growing
/// summands are the non-explosion signal.
#[derive(Debug, Clone)]
pub struct ReuterDiagnostic {
    pub summands: Vec<f64>,
    pub partial_sums: Vec<f64>,
    /// True when the summands are monotone over the second half of the
    /// requested range; they may dip before the factorial growth kicks in.
    pub increasing: bool,
}

pub fn reuter_diagnostic(
    net: &ReactionNetwork,
    volume: f64,
    k_terms: usize,
) -> Result<ReuterDiagnostic> {
    if net.reaction_count() != 1 {
        return Err(Error::Domain("diagnostic needs exactly one reaction".into()));
    }
    let gamma = net.gamma(0);
    let all_nonneg = gamma.iter().all(|&g| g >= 0);
    let all_nonpos = gamma.iter().all(|&g| g <= 0);
    if !(all_nonneg || all_nonpos) {
        return Err(Error::Domain(
            "mixed-sign stoichiometry: every irreducible component is finite".into(),
        ));
    }
    // Normalize so the chain climbs by alpha - beta >= 0.
    let (alpha, beta, up_rate, down_rate) = if all_nonneg {
        (net.alpha(0).to_vec(), net.beta(0).to_vec(), net.k_bw(0), net.k_fw(0))
    } else {
        (net.beta(0).to_vec(), net.alpha(0).to_vec(), net.k_fw(0), net.k_bw(0))
    };
    if up_rate == 0.0 {
        return Err(Error::Domain(
            "no upward rate: the chain is trivially non-explosive".into(),
        ));
    }
    let step: Vec<i64> = alpha.iter().zip(&beta).map(|(&a, &b)| a as i64 - b as i64).collect();

    // log r_{0,k} = sum_{j=1..k} log d_j - sum_{j=0..k} log b_j with
    // birth b_j (adds step) and death d_j (removes it) along the chain.
    let mut summands = Vec::with_capacity(k_terms);
    let mut log_r = 0.0;
    for k in 0..k_terms {
        let nk: Vec<i64> = step.iter().map(|&s| s * k as i64).collect();
        if k > 0 {
            let na: Vec<i64> = nk.iter().zip(&alpha).map(|(&ni, &a)| ni - a as i64).collect();
            let death = down_rate * intensity(volume, &alpha, &na);
            log_r += death.ln();
        }
        let nb: Vec<i64> = nk.iter().zip(&beta).map(|(&ni, &b)| ni - b as i64).collect();
        let birth = up_rate * intensity(volume, &beta, &nb);
        log_r -= birth.ln();
        summands.push(log_r.exp());
    }
    let mut partial_sums = Vec::with_capacity(summands.len());
    let mut acc = 0.0;
    for &s in &summands {
        acc += s;
        partial_sums.push(acc);
    }
    let tail = &summands[summands.len() / 2..];
    let increasing = tail.windows(2).all(|w| w[1] >= w[0]);
    Ok(ReuterDiagnostic { summands, partial_sums, increasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{check_detailed_balance, parse_network, stoichiometric_analysis};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn exchange_net(a: f64, b: f64) -> ReactionNetwork {
        parse_network(&format!("species X\n0 <-> 1 X : kf={a}, kb={b}\n")).unwrap()
    }

    fn db_report(net: &ReactionNetwork) -> DetailedBalanceReport {
        let stoich = stoichiometric_analysis(net);
        check_detailed_balance(net, &stoich)
    }

    #[test]
    fn intensity_closed_forms() {
        // Empty complex fires at rate V.
        assert_relative_eq!(intensity(7.5, &[0, 0], &[3, 9]), 7.5, max_relative = 1e-14);
        // Single-species complex: (n + 1) independent of V.
        assert_relative_eq!(intensity(3.0, &[1], &[5]), 6.0, max_relative = 1e-13);
        assert_relative_eq!(intensity(100.0, &[1], &[5]), 6.0, max_relative = 1e-13);
        // Off-lattice states contribute nothing.
        assert_eq!(intensity(3.0, &[1], &[-1]), 0.0);
        // Large-volume behaviour: B ~ V c^alpha at fixed concentration.
        let v = 1e4;
        let c = 0.7;
        let n = [(c * v) as i64];
        let got = intensity(v, &[2], &n);
        assert_relative_eq!(got, v * c * c, max_relative = 1e-3);
    }

    #[test]
    fn lattice_indexing_round_trip() {
        let lattice = LatticeBox::new(vec![3, 5, 2], 1.0).unwrap();
        assert_eq!(lattice.len(), 4 * 6 * 3);
        for flat in 0..lattice.len() {
            let n = lattice.multi(flat);
            let back: Vec<i64> = n.iter().map(|&x| x as i64).collect();
            assert_eq!(lattice.flat(&back), Some(flat));
        }
        assert_eq!(lattice.flat(&[4, 0, 0]), None);
        assert_eq!(lattice.flat(&[0, -1, 0]), None);
    }

    #[test]
    fn box_sizing_controls_poisson_tail() {
        let lattice = LatticeBox::for_poisson_tails(&[vec![1.0]], 50.0, 1e-12).unwrap();
        assert!(poisson_tail(50.0, lattice.n_max()[0]) < 1e-12);
        // Tight but not absurdly oversized.
        assert!(lattice.n_max()[0] < 220);
    }

    #[test]
    fn poisson_equilibrium_values() {
        let net = exchange_net(1.0, 1.0);
        let db = db_report(&net);
        let lattice = LatticeBox::for_poisson_tails(&[vec![1.0]], 10.0, 1e-12).unwrap();
        let (w, tail) = poisson_equilibrium(&net, &db, &lattice, 1e-10).unwrap();
        assert!(tail < 1e-10);
        assert_relative_eq!(w[0], (-10.0f64).exp(), max_relative = 1e-10);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, max_relative = 1e-14);
        // Too-small box is rejected.
        let small = LatticeBox::new(vec![12], 10.0).unwrap();
        assert!(matches!(
            poisson_equilibrium(&net, &db, &small, 1e-12),
            Err(Error::BoxTooSmall(_))
        ));
    }

    #[test]
    fn generator_matches_birth_death_stencil() {
        // 0 <-> X with rates a, b: du_n/dt = V a u_{n-1} - (V a + b n) u_n
        // + b (n+1) u_{n+1}.
        let (a, b, v) = (1.3, 0.8, 9.0);
        let net = exchange_net(a, b);
        let lattice = LatticeBox::new(vec![30], v).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        let dense = cme.generator().to_dense();
        for n in 1..29usize {
            assert_relative_eq!(dense[(n, n - 1)], v * a, max_relative = 1e-13);
            assert_relative_eq!(dense[(n, n)], -(v * a + b * n as f64), max_relative = 1e-13);
            assert_relative_eq!(dense[(n, n + 1)], b * (n as f64 + 1.0), max_relative = 1e-13);
        }
        // Top state: the birth reaction would leave the box and is dropped.
        assert_relative_eq!(cme.dropped_rate()[30], v * a, max_relative = 1e-13);
        assert_relative_eq!(cme.leak_rate(), v * a, max_relative = 1e-13);
    }

    #[test]
    fn generator_structure_invariants() {
        let net = parse_network(
            "species A B\n1 A <-> 2 B : kf=1.0, kb=0.5\n0 <-> 1 A : kf=0.7, kb=0.9\n",
        )
        .unwrap();
        let lattice = LatticeBox::new(vec![12, 14], 4.0).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        let dense = cme.generator().to_dense();
        for i in 0..dense.nrows() {
            for j in 0..dense.ncols() {
                if i != j {
                    assert!(dense[(i, j)] >= 0.0);
                }
            }
        }
        let sums = cme.generator().column_sums();
        for (m, &s) in sums.iter().enumerate() {
            // Column sum equals minus the dropped rate of that state.
            assert_abs_diff_eq!(s, -cme.dropped_rate()[m], epsilon = 1e-10);
            assert!(s <= 1e-12);
        }
    }

    #[test]
    fn zero_reaction_network_has_zero_generator() {
        let net = parse_network("species X\n").unwrap();
        let lattice = LatticeBox::new(vec![5], 2.0).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        assert_eq!(cme.generator().norm_inf(), 0.0);
        assert_eq!(cme.leak_rate(), 0.0);
    }

    #[test]
    fn two_pair_counterexample_residual_formula() {
        // Two pairs on one species, inflow rates (2a, 4b) and the
        // pair-annihilation unit pair. The product-Poisson guess based on
        // the joint steady state has an explicit nonzero stationarity
        // defect when a != 2b.
        let (a, b, v) = (7.0, 1.0, 13.0);
        let net = parse_network(&format!(
            "species X\n0 <-> 1 X : kf={}, kb={}\n0 <-> 2 X : kf=1, kb=1\n",
            2.0 * a,
            4.0 * b
        ))
        .unwrap();
        let lattice = LatticeBox::new(vec![120], v).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        // Unnormalized Poisson(2V) guess.
        let guess: Vec<f64> = (0..=120)
            .map(|n| (-2.0 * v + n as f64 * (2.0 * v).ln() - ln_gamma(n as f64 + 1.0)).exp())
            .collect();
        let res = cme.stationarity_residual(&guess).unwrap();
        for n in 1..=60usize {
            let nf = n as f64;
            let prefactor =
                (-2.0 * v + (nf - 2.0) * (2.0 * v).ln() - ln_gamma(nf + 1.0)).exp();
            let poly = -12.0 * v.powi(3) + 12.0 * nf * v.powi(2) - 3.0 * nf * (nf - 1.0) * v;
            let expected = prefactor * poly;
            let scale = prefactor * 12.0 * v.powi(3);
            assert_abs_diff_eq!(res[n], expected, epsilon = 1e-10 * scale);
        }
    }

    #[test]
    fn birth_annihilation_counterexample_residual_formula() {
        // Irreversible birth at rate 2 plus irreversible pair annihilation:
        // macroscopically balanced-looking, microscopically not.
        let v = 20.0;
        let net = ReactionNetwork::new(
            vec!["X".into()],
            vec![vec![0], vec![2]],
            vec![vec![1], vec![0]],
            vec![2.0, 1.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let lattice = LatticeBox::new(vec![90], v).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        // Check the stencil directly.
        let dense = cme.generator().to_dense();
        for n in 2..60usize {
            let nf = n as f64;
            assert_relative_eq!(dense[(n, n - 1)], 2.0 * v, max_relative = 1e-13);
            assert_relative_eq!(
                dense[(n, n)],
                -(2.0 * v + nf * (nf - 1.0) / v),
                max_relative = 1e-13
            );
            assert_relative_eq!(
                dense[(n, n + 2)],
                (nf + 2.0) * (nf + 1.0) / v,
                max_relative = 1e-13
            );
        }
        let guess: Vec<f64> = (0..=90)
            .map(|n| (-v + n as f64 * v.ln() - ln_gamma(n as f64 + 1.0)).exp())
            .collect();
        let res = cme.stationarity_residual(&guess).unwrap();
        for n in 1..=60usize {
            let nf = n as f64;
            let prefactor = (-v + (nf - 1.0) * v.ln() - ln_gamma(nf + 1.0)).exp();
            let poly = 2.0 * v * nf - v * v - nf * (nf - 1.0);
            let expected = prefactor * poly;
            // The polynomial has integer zeros (n = 16, 25 at V = 20), so
            // compare with an absolute floor at the local Poisson scale.
            let scale = prefactor * 3.0 * v * v;
            assert_abs_diff_eq!(res[n], expected, epsilon = 1e-10 * scale);
        }
    }

    #[test]
    fn equilibrium_is_stationary_and_identity_holds() {
        let net = exchange_net(1.0, 1.0);
        let db = db_report(&net);
        let lattice = LatticeBox::for_poisson_tails(&[vec![1.0]], 50.0, 1e-13).unwrap();
        let cme =
            TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-12).unwrap();
        let eq = cme.equilibrium().unwrap();
        let res = cme.stationarity_residual(&eq.w).unwrap();
        let l1: f64 = res.iter().map(|x| x.abs()).sum();
        assert!(l1 <= 1e-8, "l1 residual {l1}");
        assert!(cme.equilibrium_identity_residual().unwrap() <= 1e-12);
    }

    #[test]
    fn moments_of_reference_distributions() {
        let net = exchange_net(1.0, 1.0);
        let lattice = LatticeBox::for_poisson_tails(&[vec![0.8]], 25.0, 1e-13).unwrap();
        let cme = TruncatedCme::assemble(&net, lattice).unwrap();
        let u = LatticeDistribution::poisson(cme.lattice(), &[0.8]).unwrap();
        let (e, cov) = cme.moments(u.values()).unwrap();
        assert_relative_eq!(e[0], 0.8, max_relative = 1e-10);
        assert_relative_eq!(cov[(0, 0)], 0.8 / 25.0, max_relative = 1e-8);

        let point = LatticeDistribution::point_mass(cme.lattice(), &[7]).unwrap();
        let (e, cov) = cme.moments(point.values()).unwrap();
        assert_relative_eq!(e[0], 7.0 / 25.0, max_relative = 1e-14);
        assert_abs_diff_eq!(cov[(0, 0)], 0.0, epsilon = 1e-16);
    }

    #[test]
    fn gradient_structures_reproduce_the_generator() {
        let net = exchange_net(1.5, 0.75);
        let db = db_report(&net);
        let lattice = LatticeBox::for_poisson_tails(&[vec![2.0], vec![3.0]], 12.0, 1e-13).unwrap();
        let cme =
            TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-12).unwrap();
        // Strictly positive test state: a Poisson at a different mean.
        let u = LatticeDistribution::poisson(cme.lattice(), &[3.0]).unwrap();
        let bu = cme.generator().apply(u.values());
        let de = cme.entropy_gradient(u.values()).unwrap();
        let minus_kde: Vec<f64> = cme
            .apply_onsager(u.values(), &de)
            .unwrap()
            .into_iter()
            .map(|x| -x)
            .collect();
        let l1_b: f64 = bu.iter().map(|x| x.abs()).sum();
        let l1_diff: f64 =
            bu.iter().zip(&minus_kde).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1_diff <= 1e-8 * l1_b.max(1e-30), "quadratic: {l1_diff} vs {l1_b}");

        let cosh_force = cme.cosh_force(u.values()).unwrap();
        let l1_cosh: f64 =
            bu.iter().zip(&cosh_force).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1_cosh <= 1e-8 * l1_b.max(1e-30), "cosh: {l1_cosh}");

        // At equilibrium everything vanishes.
        let eq_w = cme.equilibrium().unwrap().w.clone();
        let de_eq = cme.entropy_gradient(&eq_w).unwrap();
        assert!(de_eq.iter().all(|&g| g.abs() < 1e-12));
        let k_eq = cme.apply_onsager(&eq_w, &de_eq).unwrap();
        assert!(k_eq.iter().all(|&x| x.abs() < 1e-12));

        // Dual quadratic potential at the entropy force agrees with the
        // 1-homogeneous dissipation form.
        let minus_de: Vec<f64> = de.iter().map(|&g| -g).collect();
        let psi = cme.dual_quadratic(u.values(), &minus_de).unwrap();
        let g_form = cme.dissipation_rate(u.values()).unwrap();
        assert_relative_eq!(psi, g_form, max_relative = 1e-11);
        // And the cosh potential vanishes at zero force.
        let zero = vec![0.0; u.values().len()];
        assert_abs_diff_eq!(cme.dual_cosh(u.values(), &zero).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn invariant_set_confinement() {
        // One-for-one exchange conserves n1 + n2; start on the diagonal
        // class and watch the complement stay empty.
        let net = parse_network("species A B\n1 A <-> 1 B : kf=1, kb=1\n").unwrap();
        let db = db_report(&net);
        let lattice = LatticeBox::new(vec![16, 16], 8.0).unwrap();
        let cme =
            TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1.0).unwrap();
        let u0 = LatticeDistribution::point_mass(cme.lattice(), &[10, 2]).unwrap();
        let traj = solve_cme(&cme, &u0, &[0.5, 2.0], &SolveOptions::default()).unwrap();
        for state in &traj.states {
            let mut off_class = 0.0;
            for (flat, &p) in state.iter().enumerate() {
                let n = cme.lattice().multi(flat);
                if n[0] + n[1] != 12 {
                    off_class += p.abs();
                }
            }
            assert!(off_class <= 1e-12, "mass escaped the invariant class: {off_class}");
        }
    }

    #[test]
    fn solver_matches_dense_oracle_and_closed_form() {
        let net = exchange_net(1.0, 1.0);
        let db = db_report(&net);
        // Deliberately small box (about 30 states around the dynamics).
        let lattice = LatticeBox::new(vec![29], 5.0).unwrap();
        let cme = TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-3).unwrap();
        let u0 = LatticeDistribution::poisson(cme.lattice(), &[0.4]).unwrap();
        let traj = solve_cme(&cme, &u0, &[0.3, 1.0], &SolveOptions::default()).unwrap();
        for (&t, state) in traj.times.iter().zip(&traj.states) {
            let oracle = dense_expm_oracle(&cme, u0.values(), t).unwrap();
            let l1: f64 = state.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum();
            assert!(l1 <= 1e-8, "t = {t}: l1 gap {l1}");
        }
        // Poisson initial data stays Poisson with mean c(t) V.
        let v = 5.0;
        let c_t = |t: f64| 1.0 + (0.4 - 1.0) * (-t as f64).exp();
        for (&t, state) in traj.times.iter().zip(&traj.states) {
            let c = c_t(t);
            let mut l1 = 0.0;
            for (n, &p) in state.iter().enumerate() {
                let lp = -c * v + n as f64 * (c * v).ln() - ln_gamma(n as f64 + 1.0);
                l1 += (p - lp.exp()).abs();
            }
            assert!(l1 <= 1e-6, "t = {t}: poisson gap {l1}");
        }
        // Equilibrium initial data stays put.
        let weq =
            LatticeDistribution::from_values(cme.equilibrium().unwrap().w.clone()).unwrap();
        let traj = solve_cme(&cme, &weq, &[1.0], &SolveOptions::default()).unwrap();
        let drift: f64 = traj.states[0]
            .iter()
            .zip(&cme.equilibrium().unwrap().w)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(drift <= 1e-9);
    }

    #[test]
    fn mass_loss_is_bounded_by_leak_estimate() {
        let net = exchange_net(2.0, 1.0);
        let db = db_report(&net);
        // Small box so the leak is actually visible.
        let lattice = LatticeBox::new(vec![18], 4.0).unwrap();
        let cme = TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-2).unwrap();
        let u0 = LatticeDistribution::poisson(cme.lattice(), &[1.5]).unwrap();
        let traj = solve_cme(&cme, &u0, &[0.5, 1.5, 3.0], &SolveOptions::default()).unwrap();
        for (k, &m) in traj.mass.iter().enumerate() {
            let lost = 1.0 - m;
            assert!(lost >= -1e-12);
            assert!(
                lost <= traj.leak_estimate[k] * 1.5 + 1e-9,
                "lost {lost} vs estimate {}",
                traj.leak_estimate[k]
            );
        }
    }

    #[test]
    fn reuter_series_grows_factorially_for_birth_death() {
        let net = exchange_net(1.0, 1.0);
        let d = reuter_diagnostic(&net, 5.0, 25).unwrap();
        assert_eq!(d.summands.len(), 25);
        assert!(d.increasing);
        // Factorial growth: ratios of consecutive summands grow linearly.
        let r1 = d.summands[20] / d.summands[19];
        let r0 = d.summands[10] / d.summands[9];
        assert!(r1 > r0 * 1.5);

        // Mixed signs are rejected.
        let mixed = parse_network("species A B\n1 A <-> 1 B : kf=1, kb=1\n").unwrap();
        assert!(reuter_diagnostic(&mixed, 5.0, 5).is_err());

        // Zero terms requested.
        let empty = reuter_diagnostic(&net, 5.0, 0).unwrap();
        assert!(empty.summands.is_empty());
    }

    #[test]
    fn distribution_and_generator_exports() {
        let net = exchange_net(1.0, 1.0);
        let db = db_report(&net);
        let lattice = LatticeBox::new(vec![6], 2.0).unwrap();
        let cme = TruncatedCme::assemble_with_equilibrium(&net, &db, lattice, 1e-1).unwrap();
        let u = LatticeDistribution::poisson(cme.lattice(), &[1.0]).unwrap();
        let mut buf = Vec::new();
        cme.write_distribution_csv(u.values(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("flat,n_X,u,w\n"));
        assert_eq!(text.lines().count(), 8);

        let mut coo = Vec::new();
        cme.generator().write_coo(&mut coo).unwrap();
        let coo = String::from_utf8(coo).unwrap();
        // Tridiagonal structure: 3 entries per interior row.
        assert!(coo.lines().count() >= 3 * 5);
    }
}
