//! One-dimensional quadrature helpers.

/// Nodes and weights of 7-point Gauss-Legendre on [-1, 1].
const GL7_NODES: [f64; 7] = [
    -0.9491079123427585,
    -0.7415311855993945,
    -0.4058451513773972,
    0.0,
    0.4058451513773972,
    0.7415311855993945,
    0.9491079123427585,
];
const GL7_WEIGHTS: [f64; 7] = [
    0.1294849661688697,
    0.2797053914892766,
    0.3818300505051189,
    0.4179591836734694,
    0.3818300505051189,
    0.2797053914892766,
    0.1294849661688697,
];

/// Fixed 7-point Gauss-Legendre quadrature on `[a, b]`.
pub fn gauss7(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GL7_NODES.iter().zip(GL7_WEIGHTS) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        rec(f, a, fa, m, fm, flm, left, 0.5 * tol, depth - 1)
            + rec(f, m, fm, b, fb, frm, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, fa, b, fb, fm);
    rec(f, a, fa, b, fb, fm, whole, tol, 48)
}

/// Integrates a rapidly decaying nonnegative density on `[0, inf)` by
/// growing the upper limit until the added tail is negligible.
pub fn integrate_halfline(f: impl Fn(f64) -> f64 + Copy, tol: f64) -> f64 {
    let mut total = 0.0;
    let mut a = 0.0;
    let mut b = 1.0;
    loop {
        let piece = adaptive_simpson(&f, a, b, tol * 0.1);
        total += piece;
        if piece.abs() < tol * (1.0 + total.abs()) && b > 8.0 {
            return total;
        }
        a = b;
        b *= 2.0;
        if b > 1e9 {
            return total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss7_is_exact_for_low_degree() {
        // Degree-9 polynomial integrated exactly by 7-point GL.
        let f = |x: f64| 3.0 * x.powi(9) - x.powi(4) + 2.0 * x - 7.0;
        let exact = |x: f64| 0.3 * x.powi(10) - x.powi(5) / 5.0 + x * x - 7.0 * x;
        assert_relative_eq!(gauss7(f, -1.3, 2.1), exact(2.1) - exact(-1.3), max_relative = 1e-12);
    }

    #[test]
    fn simpson_converges_on_smooth_integrand() {
        let v = adaptive_simpson(&|x: f64| (-x * x).exp(), 0.0, 10.0, 1e-12);
        assert_relative_eq!(v, std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-10);
    }

    #[test]
    fn halfline_gaussian() {
        let v = integrate_halfline(|x| (-0.5 * x * x).exp(), 1e-12);
        assert_relative_eq!(v, (std::f64::consts::PI / 2.0).sqrt(), max_relative = 1e-9);
    }
}
