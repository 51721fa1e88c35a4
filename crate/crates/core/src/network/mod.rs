//! Reaction networks, their exact stoichiometric structure, and the
//! detailed-balance certificate.

mod parse;

pub use parse::{parse_network, serialize_network};

use crate::error::Error;
use crate::numerics::exact;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A mass-action network: `I` species and `R` reversible reaction pairs.
///
/// Rates are nonnegative with at least one side of each pair active; a zero
/// rate encodes an irreversible reaction, which is representable at the
/// master-equation level but can never satisfy detailed balance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    species_names: Vec<String>,
    alpha: Vec<Vec<u32>>,
    beta: Vec<Vec<u32>>,
    k_fw: Vec<f64>,
    k_bw: Vec<f64>,
}

impl ReactionNetwork {
    pub fn new(
        species_names: Vec<String>,
        alpha: Vec<Vec<u32>>,
        beta: Vec<Vec<u32>>,
        k_fw: Vec<f64>,
        k_bw: Vec<f64>,
    ) -> Result<Self> {
        let i = species_names.len();
        if i == 0 {
            return Err(Error::Domain("network needs at least one species".into()));
        }
        for (idx, name) in species_names.iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Domain(format!("invalid species name {name:?}")));
            }
            if species_names[..idx].contains(name) {
                return Err(Error::Domain(format!("duplicate species {name}")));
            }
        }
        let r = alpha.len();
        if beta.len() != r || k_fw.len() != r || k_bw.len() != r {
            return Err(Error::Dimension("reaction arrays disagree in length".into()));
        }
        for idx in 0..r {
            if alpha[idx].len() != i || beta[idx].len() != i {
                return Err(Error::Dimension(format!(
                    "reaction {idx} has wrong coefficient length"
                )));
            }
            if alpha[idx] == beta[idx] {
                return Err(Error::Domain(format!(
                    "reaction {idx} has equal sides; its stoichiometric vector vanishes"
                )));
            }
            for &k in [&k_fw[idx], &k_bw[idx]] {
                if !k.is_finite() || k < 0.0 {
                    return Err(Error::Domain(format!("reaction {idx} has invalid rate {k}")));
                }
            }
            if k_fw[idx] == 0.0 && k_bw[idx] == 0.0 {
                return Err(Error::Domain(format!("reaction {idx} has both rates zero")));
            }
        }
        Ok(Self { species_names, alpha, beta, k_fw, k_bw })
    }

    pub fn species_names(&self) -> &[String] {
        &self.species_names
    }

    /// Number of species `I`.
    pub fn species_count(&self) -> usize {
        self.species_names.len()
    }

    /// Number of reaction pairs `R`.
    pub fn reaction_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, r: usize) -> &[u32] {
        &self.alpha[r]
    }

    pub fn beta(&self, r: usize) -> &[u32] {
        &self.beta[r]
    }

    pub fn k_fw(&self, r: usize) -> f64 {
        self.k_fw[r]
    }

    pub fn k_bw(&self, r: usize) -> f64 {
        self.k_bw[r]
    }

    /// Stoichiometric vector `alpha^r - beta^r`.
    pub fn gamma(&self, r: usize) -> Vec<i64> {
        self.alpha[r]
            .iter()
            .zip(&self.beta[r])
            .map(|(&a, &b)| a as i64 - b as i64)
            .collect()
    }

    /// True when every rate is strictly positive.
    pub fn is_reversible(&self) -> bool {
        self.k_fw.iter().chain(&self.k_bw).all(|&k| k > 0.0)
    }

    /// True when every reaction exchanges one unit of one species for one
    /// unit of another, i.e. the network is a continuous-time Markov chain
    /// on the species index.
    pub fn is_markov_chain(&self) -> bool {
        (0..self.reaction_count()).all(|r| {
            let single = |v: &[u32]| {
                v.iter().map(|&x| x as u64).sum::<u64>() == 1 && v.iter().all(|&x| x <= 1)
            };
            single(&self.alpha[r]) && single(&self.beta[r]) && self.alpha[r] != self.beta[r]
        })
    }

    /// Mass-action monomial `prod_i c_i^{e_i}`.
    pub fn monomial(c: &[f64], exps: &[u32]) -> f64 {
        c.iter()
            .zip(exps)
            .map(|(&ci, &e)| ci.powi(e as i32))
            .product()
    }
}

/// Exact stoichiometric decomposition of a network.
#[derive(Debug, Clone, Serialize)]
pub struct StoichiometryReport {
    /// Rows are the stoichiometric vectors `gamma^r`.
    pub w: Vec<Vec<i64>>,
    /// Integer basis of the stoichiometric subspace (row space of `w`).
    pub s_basis: Vec<Vec<i64>>,
    /// Integer basis of the orthogonal complement; rows annihilate every
    /// `gamma^r` and generate the conserved quantities `q . c`.
    pub q: Vec<Vec<i64>>,
    /// Dimension of the conservation space.
    pub m_w: usize,
    /// Number of independent log-rate compatibility conditions.
    pub n_w: usize,
    /// Rank of `w`.
    pub rank: usize,
    /// Basis of the left kernel of `w` (vectors in reaction space),
    /// primitive integer representatives of the rational kernel.
    pub ker_wt_basis: Vec<Vec<i64>>,
}

/// Computes ranks, conservation laws, and kernel bases exactly over the
/// rationals.
pub fn stoichiometric_analysis(net: &ReactionNetwork) -> StoichiometryReport {
    let i = net.species_count();
    let r = net.reaction_count();
    let w: Vec<Vec<i64>> = (0..r).map(|idx| net.gamma(idx)).collect();
    let rank = if r == 0 { 0 } else { exact::rank_i64(&w) };
    let q = exact::integer_kernel_basis(&w, i)
        .into_iter()
        .map(|v| v.into_iter().map(|b| bigint_to_i64(&b)).collect())
        .collect::<Vec<Vec<i64>>>();
    let s_basis = exact::integer_row_space_basis(&w)
        .into_iter()
        .map(|v| v.into_iter().map(|b| bigint_to_i64(&b)).collect())
        .collect::<Vec<Vec<i64>>>();
    let wt: Vec<Vec<i64>> = (0..i).map(|col| (0..r).map(|row| w[row][col]).collect()).collect();
    let ker_wt_basis = if r == 0 {
        Vec::new()
    } else {
        exact::integer_kernel_basis(&wt, r)
            .into_iter()
            .map(|v| v.into_iter().map(|b| bigint_to_i64(&b)).collect())
            .collect()
    };
    let m_w = q.len();
    let n_w = ker_wt_basis.len();
    debug_assert_eq!(rank + m_w, i);
    debug_assert_eq!(n_w, r - rank);
    StoichiometryReport { w, s_basis, q, m_w, n_w, rank, ker_wt_basis }
}

fn bigint_to_i64(b: &num::BigInt) -> i64 {
    use num::ToPrimitive;
    b.to_i64().expect("stoichiometric coefficients stay far below i64 range")
}

/// Why detailed balance fails.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind")]
pub enum DbFailure {
    /// Some reaction has a zero rate; no positive state can balance it.
    Irreversible { reaction: usize },
    /// A log-rate compatibility condition is violated; `y` is the
    /// reaction-space kernel vector with the largest normalized violation.
    LogRateCondition { y: Vec<i64>, value: f64 },
}

/// Certificate for the detailed-balance condition.
#[derive(Debug, Clone, Serialize)]
pub struct DetailedBalanceReport {
    pub holds: bool,
    /// Positive equilibrium concentrations (exponential of the minimum-norm
    /// solution of the log-linear system) when the condition holds.
    pub c_star: Option<Vec<f64>>,
    /// Per-reaction equilibrium fluxes `k_fw^r (c_*)^{alpha^r}`.
    pub kappa_star: Option<Vec<f64>>,
    pub witness: Option<DbFailure>,
    /// `max_r |(w log c_* - log(k_bw/k_fw))_r|`; zero-length systems report 0.
    pub residual: f64,
    /// Dimension of the affine family of log-equilibria (`m_w`).
    pub solution_family_dim: usize,
    /// Tolerance used on the normalized kernel tests.
    pub tolerance: f64,
}

impl DetailedBalanceReport {
    pub fn c_star(&self) -> Result<&[f64]> {
        self.c_star
            .as_deref()
            .ok_or_else(|| Error::DetailedBalanceRequired("no equilibrium available".into()))
    }

    pub fn kappa_star(&self) -> Result<&[f64]> {
        self.kappa_star
            .as_deref()
            .ok_or_else(|| Error::DetailedBalanceRequired("no equilibrium available".into()))
    }
}

/// Default tolerance for the normalized log-rate condition tests.
pub const WEGSCHEIDER_TOL: f64 = 1e-9;

/// Tests detailed balance and, if it holds, produces the equilibrium.
pub fn check_detailed_balance(
    net: &ReactionNetwork,
    report: &StoichiometryReport,
) -> DetailedBalanceReport {
    check_detailed_balance_with_tol(net, report, WEGSCHEIDER_TOL)
}

pub fn check_detailed_balance_with_tol(
    net: &ReactionNetwork,
    report: &StoichiometryReport,
    tol: f64,
) -> DetailedBalanceReport {
    let r = net.reaction_count();
    let i = net.species_count();
    let fail = |witness: DbFailure| DetailedBalanceReport {
        holds: false,
        c_star: None,
        kappa_star: None,
        witness: Some(witness),
        residual: f64::INFINITY,
        solution_family_dim: report.m_w,
        tolerance: tol,
    };

    for idx in 0..r {
        if net.k_fw(idx) == 0.0 || net.k_bw(idx) == 0.0 {
            return fail(DbFailure::Irreversible { reaction: idx });
        }
    }

    let rhs: Vec<f64> = (0..r).map(|idx| (net.k_bw(idx) / net.k_fw(idx)).ln()).collect();

    // Solvability by the kernel conditions on the left kernel of w.
    let mut worst: Option<(usize, f64)> = None;
    for (k, y) in report.ker_wt_basis.iter().enumerate() {
        let norm = (y.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt();
        let dot: f64 = y.iter().zip(&rhs).map(|(&yi, &bi)| yi as f64 * bi).sum();
        let violation = dot.abs() / norm;
        if violation > worst.map_or(0.0, |(_, v)| v) {
            worst = Some((k, violation));
        }
    }
    if let Some((k, violation)) = worst {
        if violation > tol {
            let y = report.ker_wt_basis[k].clone();
            let value: f64 = y.iter().zip(&rhs).map(|(&yi, &bi)| yi as f64 * bi).sum();
            return fail(DbFailure::LogRateCondition { y, value });
        }
    }

    // Minimum-norm solution of `w x = rhs` through the pseudoinverse.
    let (x, residual) = if r == 0 {
        (vec![0.0; i], 0.0)
    } else {
        let wf = DMatrix::from_fn(r, i, |row, col| report.w[row][col] as f64);
        let b = DVector::from_vec(rhs.clone());
        let svd = wf.clone().svd(true, true);
        let x = svd
            .solve(&b, 1e-12)
            .expect("svd solve of a small dense system");
        let resid = (&wf * &x - &b).amax();
        (x.iter().copied().collect(), resid)
    };
    let c_star: Vec<f64> = x.iter().map(|&v: &f64| v.exp()).collect();
    let kappa_star: Vec<f64> = (0..r)
        .map(|idx| net.k_fw(idx) * ReactionNetwork::monomial(&c_star, net.alpha(idx)))
        .collect();
    DetailedBalanceReport {
        holds: true,
        c_star: Some(c_star),
        kappa_star: Some(kappa_star),
        witness: None,
        residual,
        solution_family_dim: report.m_w,
        tolerance: tol,
    }
}

/// Value of the conserved quantities at a state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSetTag {
    pub q: Vec<f64>,
}

/// Evaluates the conservation matrix at a concentration vector.
pub fn conserved_value(report: &StoichiometryReport, c: &[f64]) -> Result<InvariantSetTag> {
    let i = report.w.first().map_or(c.len(), Vec::len);
    if c.len() != i {
        return Err(Error::Dimension(format!(
            "state has {} entries, network has {i} species",
            c.len()
        )));
    }
    if c.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("concentrations must be nonnegative".into()));
    }
    let q = report
        .q
        .iter()
        .map(|row| row.iter().zip(c).map(|(&a, &ci)| a as f64 * ci).sum())
        .collect();
    Ok(InvariantSetTag { q })
}
