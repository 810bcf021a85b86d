//! Explicit bound formulas for LP2S and checks of observed values against them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior::PriorSpec;
use crate::scalar::Real;
use crate::special::beta_pdf;

/// One bound evaluated against an observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub bound_value: f64,
    /// Absent when only the bound was evaluated.
    pub observed_value: Option<f64>,
    pub satisfied: Option<bool>,
    /// `bound + tolerance - observed`.
    pub slack: Option<f64>,
}

impl BoundReport {
    pub fn bound_only(name: impl Into<String>, bound_value: f64) -> Self {
        BoundReport { name: name.into(), bound_value, observed_value: None, satisfied: None, slack: None }
    }

    /// `satisfied` iff `observed <= bound + tolerance`.
    pub fn check(name: impl Into<String>, bound_value: f64, observed: f64, tolerance: f64) -> Self {
        let slack = bound_value + tolerance - observed;
        BoundReport {
            name: name.into(),
            bound_value,
            observed_value: Some(observed),
            satisfied: Some(slack >= 0.0),
            slack: Some(slack),
        }
    }
}

/// Upper bound on the optimal per-arm stage-one cost:
/// `(L / (K E[mu^R])) sum_{r=1}^R E[mu^r]`.
pub fn thm2_bound<T: Real>(prior: &PriorSpec<T>, arms: usize, rounds: usize, survivors: T) -> Result<T> {
    prior.validate()?;
    if arms == 0 {
        return Err(invalid("K must be positive"));
    }
    let top = prior.moment(rounds as u64);
    if !(top > T::zero()) {
        return Err(Error::DegeneratePrior(format!("E[mu^{rounds}] = {top} is not positive")));
    }
    let sum = (1..=rounds).fold(T::zero(), |acc, r| acc + prior.moment(r as u64));
    Ok(survivors / T::count(arms as u64) / top * sum)
}

/// Growth regime of the stage-one cost in `R`, keyed on the prior's `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `0 < b < 1`: `L R / K`.
    SubUnit,
    /// `b = 1`: `L R log R / K`.
    Unit,
    /// `b > 1`: `L R^b / K`.
    SuperUnit,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::SubUnit => "0<b<1",
            Regime::Unit => "b=1",
            Regime::SuperUnit => "b>1",
        }
    }
}

/// Regime and rate expression (constants dropped) for a `Beta(a, b)` prior.
pub fn corollary_rate<T: Real>(a: T, b: T, rounds: usize, survivors: T, arms: usize) -> Result<(Regime, T)> {
    if !(a > T::zero() && b > T::zero()) {
        return Err(invalid("corollary rate needs a, b > 0"));
    }
    let r = T::count(rounds as u64);
    let base = survivors / T::count(arms as u64);
    Ok(if b < T::one() {
        (Regime::SubUnit, base * r)
    } else if b == T::one() {
        (Regime::Unit, base * r * r.ln())
    } else {
        (Regime::SuperUnit, base * r.powf(b))
    })
}

/// `E(T) = K f* + L R`.
pub fn expected_total_cost<T: Real>(f_star: T, arms: usize, survivors: T, rounds: usize) -> T {
    T::count(arms as u64) * f_star + survivors * T::count(rounds as u64)
}

/// Simple-regret bound of the SRM variant: `e^{-L} + 1 - delta0`.
pub fn thm4_bound<T: Real>(survivors: T, delta0: T) -> T {
    (-survivors).exp() + T::one() - delta0
}

/// PAC-variant bounds with caller-supplied constants: the probability of
/// missing a `(1 - mu0 + C1 sqrt(log L / R))`-optimal arm, and the BSR bound.
pub fn thm3_bound<T: Real>(mu0: T, survivors: T, rounds: usize, delta0: T, c1: T, c2: T) -> Result<(T, T)> {
    if !(survivors > T::one()) || rounds == 0 {
        return Err(invalid("thm3 bound needs L > 1 and R >= 1"));
    }
    let miss = c2 * (-(T::one() - delta0) * survivors).exp();
    let stage2 = c1 * (survivors.ln() / T::count(rounds as u64)).sqrt();
    Ok((miss, T::one() - mu0 + stage2 + miss))
}

/// FC-variant bounds as printed: `(1 - BPB bound, first BSR expression, second BSR expression)`.
/// The BSR bound is the minimum of the last two. Values are not clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm5<T> {
    pub miss_best: T,
    pub bsr_first: T,
    pub bsr_second: T,
}

impl<T: Real> Thm5<T> {
    pub fn bsr(&self) -> T {
        self.bsr_first.min(self.bsr_second)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn thm5_bound<T: Real>(
    survivors: T,
    delta0: T,
    arms: usize,
    rounds: usize,
    alpha0: T,
    c: T,
    c1: T,
    c2: T,
    c3: T,
) -> Result<Thm5<T>> {
    if !(c > T::lit(2.0) / alpha0) {
        return Err(invalid(format!("c={c} must exceed 2/alpha0={}", T::lit(2.0) / alpha0)));
    }
    let k = T::count(arms as u64);
    let r = T::count(rounds as u64);
    let head = T::one() - (T::one() - delta0) * survivors + (-survivors).exp();
    let close = c1 * k.powf(-(alpha0 * c - T::lit(2.0)));
    let stage2 = c2 * survivors * (-(r * k.powf(-T::lit(2.0) * c)) / T::lit(4.0)).exp();
    let miss_best = head + close + stage2;
    let second = head + c3 * (survivors.ln() / r).sqrt();
    Ok(Thm5 { miss_best, bsr_first: miss_best, bsr_second: second })
}

/// Outcome of the tail and Lipschitz checks on a prior's CDF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub alpha: f64,
    /// `F(1-d) >= 1 - d^alpha` on every grid point.
    pub tail_ok: bool,
    /// Grid point with the smallest margin `F(1-d) - (1 - d^alpha)`.
    pub worst_d: f64,
    pub worst_margin: f64,
    /// Largest density on the grid (infinite when unbounded).
    pub lipschitz: f64,
    pub lipschitz_ok: bool,
}

/// Grid resolution for the density supremum.
const DENSITY_GRID: usize = 2000;

pub fn assumption_fc_diagnostic(prior: &PriorSpec<f64>, alpha: f64, d_grid: &[f64]) -> Result<AssumptionReport> {
    let PriorSpec::Beta { a, b } = *prior else {
        return Err(invalid("assumption diagnostic needs a Beta prior"));
    };
    prior.validate()?;
    let mut worst_d = f64::NAN;
    let mut worst_margin = f64::INFINITY;
    for &d in d_grid {
        if !(0.0..=1.0).contains(&d) {
            return Err(invalid(format!("grid point d={d} outside [0,1]")));
        }
        let margin = prior.cdf(1.0 - d)? - (1.0 - d.powf(alpha));
        if margin < worst_margin {
            worst_margin = margin;
            worst_d = d;
        }
    }
    let lipschitz = (0..=DENSITY_GRID)
        .map(|i| beta_pdf(i as f64 / DENSITY_GRID as f64, a, b))
        .fold(0.0f64, f64::max);
    Ok(AssumptionReport {
        alpha,
        tail_ok: worst_margin >= -1e-12,
        worst_d,
        worst_margin,
        lipschitz,
        lipschitz_ok: lipschitz.is_finite(),
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
