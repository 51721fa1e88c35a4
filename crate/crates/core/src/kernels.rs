//! Scalar kernels shared by every gradient structure in the crate.
//!
//! All functions are pure and generic over [`Scalar`]; the removable
//! singularities (logarithmic mean on the diagonal, Boltzmann function at
//! zero) are handled with explicit branches so no IEEE `0 * inf` can leak
//! out.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Boltzmann function `z log z - z + 1`, extended continuously by 1 at zero.
///
/// Nonnegative, strictly convex, vanishing only at `z = 1`; it is the
/// building block of every relative entropy used here.
pub fn lambda_boltzmann<S: Scalar>(z: S) -> Result<S> {
    if z < S::zero() {
        return Err(Error::Domain(format!(
            "lambda_boltzmann needs z >= 0, got {z:?}"
        )));
    }
    if z == S::zero() {
        // z log z -> 0, so the limit is 1.
        return Ok(S::one());
    }
    Ok(z * z.ln() - z + S::one())
}

/// Logarithmic mean `(a - b) / (log a - log b)`.
///
/// Symmetric, jointly concave, with `log_mean(a, a) = a` and
/// `log_mean(a, 0) = 0`. Near the diagonal the quotient cancels badly, so a
/// symmetric series in `u = (a - b)/(a + b)` takes over.
pub fn log_mean<S: Scalar>(a: S, b: S) -> Result<S> {
    if a < S::zero() || b < S::zero() {
        return Err(Error::Domain(format!(
            "log_mean needs a, b >= 0, got ({a:?}, {b:?})"
        )));
    }
    if a == S::zero() || b == S::zero() {
        return Ok(S::zero());
    }
    let sum = a + b;
    let u = (a - b) / sum;
    if u.abs() < S::of_f64(1e-4) {
        let m = sum / S::of(2);
        let u2 = u * u;
        // 1/(1 + u^2/3 + u^4/5) to the shown order.
        let corr = S::one() - u2 / S::of(3) - u2 * u2 * S::of(4) / S::of(45);
        return Ok(m * corr);
    }
    if u.abs() < S::of_f64(0.3) {
        // log(a) - log(b) cancels against |log b| here; log1p of the ratio
        // keeps full relative accuracy at every scale.
        return Ok((a - b) / ((a - b) / b).ln_1p());
    }
    Ok((a - b) / (a.ln() - b.ln()))
}

/// The convex, 1-homogeneous function `(a - b)(log a - log b)`.
///
/// Equals `log_mean(a, b) * (log a - log b)^2`, which is how it shows up as
/// the dissipation density along entropy gradient flows. Extended by
/// `+inf` when exactly one argument vanishes and by `0` at the origin.
pub fn g_quot<S: Scalar>(a: S, b: S) -> Result<S> {
    if a < S::zero() || b < S::zero() {
        return Err(Error::Domain(format!(
            "g_quot needs a, b >= 0, got ({a:?}, {b:?})"
        )));
    }
    if a == S::zero() && b == S::zero() {
        return Ok(S::zero());
    }
    if a == S::zero() || b == S::zero() {
        return Ok(S::infinity());
    }
    Ok((a - b) * (a.ln() - b.ln()))
}

/// Affine minorant weight `g(w) = 1 - e^{-w} + w` for [`g_quot`].
pub fn g_affine<S: Scalar>(omega: S) -> S {
    S::one() - (-omega).exp() + omega
}

/// Checks the affine lower bound
/// `g_quot(a, b) >= g_affine(w) a + g_affine(-w) b` at one point.
///
/// The bound is tight exactly at `w = log(a/b)`.
pub fn affine_lower_bound_holds<S: Scalar>(a: S, b: S, omega: S, slack: S) -> Result<bool> {
    let lhs = g_quot(a, b)?;
    let rhs = g_affine(omega) * a + g_affine(-omega) * b;
    Ok(lhs + slack >= rhs)
}

/// Tilt-invariant dissipation kernel `4 cosh(z/2) - 4`.
///
/// Normalized so that it behaves like `z^2/2` near zero; evaluated through
/// `exp_m1` to keep full relative accuracy there.
pub fn cosh_star<S: Scalar>(zeta: S) -> S {
    let h = zeta / S::of(2);
    S::of(2) * (h.exp_m1() + (-h).exp_m1())
}

/// First derivative of [`cosh_star`]: `2 sinh(z/2)`.
pub fn cosh_star_prime<S: Scalar>(zeta: S) -> S {
    let h = zeta / S::of(2);
    h.exp_m1() - (-h).exp_m1()
}

/// Second derivative of [`cosh_star`]: `cosh(z/2)`.
pub fn cosh_star_second<S: Scalar>(zeta: S) -> S {
    (zeta / S::of(2)).cosh()
}

/// Strictly convex generators for the generalized Markov-chain entropies.
///
/// Only analytic presets are supported; the mean [`ConvexGenerator::mean`]
/// needs exact derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexGenerator<S> {
    /// The Boltzmann function `z log z - z + 1`.
    Boltzmann,
    /// `(z - 1)^2 / 2`.
    Quadratic,
    /// `(z^p - 1 - p(z - 1)) / (p (p - 1))` for `p` in `(1, 2]`.
    Power { p: S },
}

impl<S: Scalar> ConvexGenerator<S> {
    pub fn power(p: S) -> Result<Self> {
        if p <= S::one() || p > S::of(2) {
            return Err(Error::Domain(format!(
                "power generator needs p in (1, 2], got {p:?}"
            )));
        }
        Ok(Self::Power { p })
    }

    /// The generator itself, normalized so `phi(1) = 0`.
    pub fn phi(&self, z: S) -> Result<S> {
        if z < S::zero() {
            return Err(Error::Domain("phi needs z >= 0".into()));
        }
        Ok(match self {
            Self::Boltzmann => lambda_boltzmann(z)?,
            Self::Quadratic => {
                let d = z - S::one();
                d * d / S::of(2)
            }
            Self::Power { p } => {
                let p = *p;
                (z.powf(p) - S::one() - p * (z - S::one())) / (p * (p - S::one()))
            }
        })
    }

    /// `phi'`.
    pub fn phi_prime(&self, z: S) -> Result<S> {
        if z <= S::zero() {
            return Err(Error::Domain("phi_prime needs z > 0".into()));
        }
        Ok(match self {
            Self::Boltzmann => z.ln(),
            Self::Quadratic => z - S::one(),
            Self::Power { p } => (z.powf(*p - S::one()) - S::one()) / (*p - S::one()),
        })
    }

    /// `phi''`.
    pub fn phi_second(&self, z: S) -> Result<S> {
        if z <= S::zero() {
            return Err(Error::Domain("phi_second needs z > 0".into()));
        }
        Ok(match self {
            Self::Boltzmann => z.recip(),
            Self::Quadratic => S::one(),
            Self::Power { p } => z.powf(*p - S::of(2)),
        })
    }

    /// Generalized mean `(a - b) / (phi'(a) - phi'(b))`, with the diagonal
    /// value `1 / phi''(a)`.
    ///
    /// For the Boltzmann generator this and [`log_mean`] coincide.
    pub fn mean(&self, a: S, b: S) -> Result<S> {
        if a <= S::zero() || b <= S::zero() {
            return Err(Error::Domain(format!(
                "generator mean needs a, b > 0, got ({a:?}, {b:?})"
            )));
        }
        let scale = a.max(b);
        if (a - b).abs() <= S::of_f64(1e-8) * scale {
            // (phi'(a) - phi'(b)) / (a - b) = phi''(m) + O((a - b)^2).
            let m = (a + b) / S::of(2);
            return Ok(self.phi_second(m)?.recip());
        }
        Ok((a - b) / (self.phi_prime(a)? - self.phi_prime(b)?))
    }
}

/// Two-sided bracket for the Stirling factor `k_n` in
/// `n! = sqrt(2 pi k_n) (n/e)^n`.
///
/// `k_0 = 1/(2 pi)` exactly; for `n >= 1` the factor is
/// `n + 1/6 + g/(124/5 + 72 n)` with `g` between 0.9 and 1.
pub fn stirling_kn_bounds(n: u64) -> (f64, f64) {
    if n == 0 {
        let k0 = 1.0 / (2.0 * std::f64::consts::PI);
        return (k0, k0);
    }
    let nf = n as f64;
    let denom = 124.0 / 5.0 + 72.0 * nf;
    let base = nf + 1.0 / 6.0;
    (base + 0.9 / denom, base + 1.0 / denom)
}

/// The exact Stirling factor `(n!)^2 e^{2n} n^{-2n} / (2 pi)`, computed in
/// log space. Used to cross-check [`stirling_kn_bounds`].
pub fn stirling_kn_exact(n: u64) -> f64 {
    if n == 0 {
        return 1.0 / (2.0 * std::f64::consts::PI);
    }
    let nf = n as f64;
    let ln_fact = statrs::function::gamma::ln_gamma(nf + 1.0);
    (2.0 * (ln_fact + nf - nf * nf.ln())).exp() / (2.0 * std::f64::consts::PI)
}
