//! Adaptive Gauss–Legendre quadrature on finite intervals.

use crate::error::{Error, Result};
use crate::scalar::Real;

// 10-point Gauss–Legendre rule on [-1, 1]: (node, weight) for the positive half.
const GL10: [(f64, f64); 5] = [
    (0.148_874_338_981_631_22, 0.295_524_224_714_752_87),
    (0.433_395_394_129_247_2, 0.269_266_719_309_996_35),
    (0.679_409_568_299_024_4, 0.219_086_362_515_982_04),
    (0.865_063_366_688_984_5, 0.149_451_349_150_580_6),
    (0.973_906_528_517_171_7, 0.066_671_344_308_688_14),
];

const MAX_DEPTH: u32 = 60;
const MAX_PANELS: usize = 200_000;

fn gauss_legendre<T: Real, F: FnMut(T) -> T>(f: &mut F, lo: T, hi: T) -> T {
    let half = (hi - lo) * T::lit(0.5);
    let mid = lo + half;
    let mut acc = T::zero();
    for &(x, w) in &GL10 {
        let dx = half * T::lit(x);
        acc = acc + T::lit(w) * (f(mid - dx) + f(mid + dx));
    }
    acc * half
}

/// Integrates `f` over `[lo, hi]`, bisecting panels until the one-panel and
/// two-panel estimates agree within the panel's share of `tol`.
pub fn integrate<T: Real, F: FnMut(T) -> T>(mut f: F, lo: T, hi: T, tol: T) -> Result<T> {
    if hi <= lo {
        return Ok(T::zero());
    }
    let width = hi - lo;
    let mut total = T::zero();
    let mut unresolved = T::zero();
    let mut stack = vec![(lo, hi, gauss_legendre(&mut f, lo, hi), 0u32)];
    let mut panels = 0usize;
    while let Some((a, b, whole, depth)) = stack.pop() {
        panels += 1;
        let m = (a + b) * T::lit(0.5);
        let left = gauss_legendre(&mut f, a, m);
        let right = gauss_legendre(&mut f, m, b);
        let split = left + right;
        let diff = (split - whole).abs();
        let budget = tol * (b - a) / width;
        if !split.is_finite() {
            return Err(Error::NumericAccuracy { what: "quadrature (non-finite integrand)", estimate: f64::INFINITY });
        }
        if diff <= budget || depth >= MAX_DEPTH || panels >= MAX_PANELS {
            if diff > budget {
                unresolved = unresolved + diff;
            }
            total = total + split;
        } else {
            stack.push((m, b, right, depth + 1));
            stack.push((a, m, left, depth + 1));
        }
    }
    if unresolved > tol {
        return Err(Error::NumericAccuracy { what: "adaptive quadrature", estimate: unresolved.as_f64() });
    }
    Ok(total)
}

/// `E[g(U)]` for `U ~ Beta(alpha, beta)`.
///
/// Each half of the unit interval is reparameterized so that a singular
/// endpoint factor `u^{alpha-1}` or `(1-u)^{beta-1}` with exponent below zero
/// is absorbed into the change of variables.
pub fn beta_expectation<T: Real, G: FnMut(T) -> T>(mut g: G, alpha: T, beta: T, tol: T) -> Result<T> {
    let one = T::one();
    let half = T::lit(0.5);
    let ln_b = crate::special::ln_beta(alpha, beta);

    // Left half: u in (0, 1/2].
    let left = if alpha < one {
        // u = t^{1/alpha}; u^{alpha-1} du = dt / alpha, t in (0, (1/2)^alpha]
        let t_hi = half.powf(alpha);
        integrate(
            |t: T| {
                if t <= T::zero() {
                    return T::zero();
                }
                let u = t.powf(one / alpha);
                g(u) * ((beta - one) * (one - u).ln() - ln_b).exp() / alpha
            },
            T::zero(),
            t_hi,
            tol * half,
        )?
    } else {
        integrate(
            |u: T| g(u) * crate::special::beta_pdf(u, alpha, beta),
            T::zero(),
            half,
            tol * half,
        )?
    };

    // Right half: u in [1/2, 1).
    let right = if beta < one {
        // 1 - u = t^{1/beta}; (1-u)^{beta-1} du = dt / beta
        let t_hi = half.powf(beta);
        integrate(
            |t: T| {
                if t <= T::zero() {
                    return T::zero();
                }
                let u = one - t.powf(one / beta);
                g(u) * ((alpha - one) * u.ln() - ln_b).exp() / beta
            },
            T::zero(),
            t_hi,
            tol * half,
        )?
    } else {
        integrate(
            |u: T| g(u) * crate::special::beta_pdf(u, alpha, beta),
            half,
            one,
            tol * half,
        )?
    };
    Ok(left + right)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let v = integrate(|x: f64| x.powi(7) - 3.0 * x * x, 0.0, 2.0, 1e-13).unwrap();
        assert!((v - (32.0 - 8.0)).abs() < 1e-11);
    }

    #[test]
    fn resolves_kink_and_sqrt() {
        let v = integrate(|x: f64| (x - 0.3).abs(), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (0.045 + 0.245)).abs() < 1e-11);
        let v = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn beta_expectation_moments() {
        // E[u] for Beta(a, b) = a / (a + b), including singular shapes.
        for &(a, b) in &[(1.0, 1.0), (0.5, 0.5), (0.3, 2.0), (5.0, 1.0), (41.0, 0.7)] {
            let m = beta_expectation(|u: f64| u, a, b, 1e-12).unwrap();
            assert!((m - a / (a + b)).abs() < 1e-10, "Beta({a},{b}) mean {m}");
            let z = beta_expectation(|_u: f64| 1.0, a, b, 1e-12).unwrap();
            assert!((z - 1.0).abs() < 1e-10, "Beta({a},{b}) mass {z}");
        }
    }
}
