//! Priors over arm means, Beta–Bernoulli posterior quantities and the terminal
//! weight functions used by the LP quality constraint.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lp_model::ConstraintDirection;
use crate::quadrature;
use crate::scalar::Real;
use crate::special::{ln_beta, reg_inc_beta};

/// Absolute tolerance for `expected_max` quadrature.
pub const EXPECTED_MAX_TOL: f64 = 1e-10;
/// Absolute tolerance for the fixed-confidence weight quadrature.
pub const FC_WEIGHT_TOL: f64 = 1e-8;

/// One support point of a discrete prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom<T> {
    pub mean: T,
    pub prob: T,
}

/// Prior distribution of an arm's success probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec<T> {
    Beta { a: T, b: T },
    /// Finite support, atoms sorted ascending by mean.
    Discrete { atoms: Vec<Atom<T>> },
}

impl<T: Real> PriorSpec<T> {
    pub fn beta(a: T, b: T) -> Result<Self> {
        let p = PriorSpec::Beta { a, b };
        p.validate()?;
        Ok(p)
    }

    /// Builds a discrete prior from `(mean, prob)` pairs; atoms are sorted.
    pub fn discrete(pairs: impl IntoIterator<Item = (T, T)>) -> Result<Self> {
        let mut atoms: Vec<Atom<T>> = pairs.into_iter().map(|(mean, prob)| Atom { mean, prob }).collect();
        atoms.sort_by(|x, y| x.mean.partial_cmp(&y.mean).unwrap_or(std::cmp::Ordering::Equal));
        let p = PriorSpec::Discrete { atoms };
        p.validate()?;
        Ok(p)
    }

    /// Point mass at `mean`.
    pub fn point(mean: T) -> Result<Self> {
        Self::discrete([(mean, T::one())])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Beta { a, b } => {
                if !(*a > T::zero() && *b > T::zero()) || !a.is_finite() || !b.is_finite() {
                    return Err(invalid(format!("Beta prior needs a, b > 0 (got a={a}, b={b})")));
                }
            }
            PriorSpec::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(invalid("discrete prior needs at least one atom"));
                }
                let mut total = T::zero();
                for (i, at) in atoms.iter().enumerate() {
                    if !(at.mean >= T::zero() && at.mean <= T::one()) {
                        return Err(invalid(format!("atom mean {} outside [0,1]", at.mean)));
                    }
                    if !(at.prob >= T::zero() && at.prob <= T::one()) {
                        return Err(invalid(format!("atom probability {} outside [0,1]", at.prob)));
                    }
                    if i > 0 && atoms[i - 1].mean > at.mean {
                        return Err(invalid("discrete atoms must be sorted ascending by mean"));
                    }
                    total = total + at.prob;
                }
                let tol = T::lit(1e-12).max(T::epsilon() * T::count(4 * atoms.len() as u64));
                if (total - T::one()).abs() > tol {
                    return Err(invalid(format!("discrete probabilities sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    /// Smallest and largest possible mean.
    pub fn support(&self) -> (T, T) {
        match self {
            PriorSpec::Beta { .. } => (T::zero(), T::one()),
            PriorSpec::Discrete { atoms } => {
                let pos = || atoms.iter().filter(|a| a.prob > T::zero());
                let lo = pos().map(|a| a.mean).fold(T::one(), T::min);
                let hi = pos().map(|a| a.mean).fold(T::zero(), T::max);
                (lo, hi)
            }
        }
    }

    /// Posterior mean `q(r, s)` of the success probability after `s`
    /// successes in `r` pulls.
    pub fn posterior_mean(&self, r: u64, s: u64) -> Result<T> {
        check_counts(r, s)?;
        match self {
            PriorSpec::Beta { a, b } => Ok((*a + T::count(s)) / (*a + *b + T::count(r))),
            PriorSpec::Discrete { atoms } => {
                let post = discrete_posterior(atoms, r, s)?;
                Ok(atoms.iter().zip(&post).fold(T::zero(), |acc, (at, &w)| acc + at.mean * w))
            }
        }
    }

    /// Prior moment `E[mu^r]`.
    pub fn moment(&self, r: u64) -> T {
        if r == 0 {
            return T::one();
        }
        match self {
            PriorSpec::Beta { a, b } => (ln_beta(*a + T::count(r), *b) - ln_beta(*a, *b)).exp(),
            PriorSpec::Discrete { atoms } => atoms
                .iter()
                .fold(T::zero(), |acc, at| acc + at.prob * at.mean.powi(r as i32)),
        }
    }

    /// Marginal probability of exactly `s` successes in `r` pulls,
    /// `C(r,s) E[mu^s (1-mu)^(r-s)]`.
    pub fn binomial_marginal(&self, r: u64, s: u64) -> Result<T> {
        check_counts(r, s)?;
        let ln_choose = ln_binomial::<T>(r, s);
        match self {
            PriorSpec::Beta { a, b } => Ok((ln_choose + ln_beta(*a + T::count(s), *b + T::count(r - s))
                - ln_beta(*a, *b))
            .exp()),
            PriorSpec::Discrete { atoms } => Ok(atoms.iter().fold(T::zero(), |acc, at| {
                acc + at.prob * (ln_choose + ln_likelihood(at.mean, r, s)).exp()
            })),
        }
    }

    /// Prior CDF `F(u) = P(mu <= u)`.
    pub fn cdf(&self, u: T) -> Result<T> {
        if !(u >= T::zero() && u <= T::one()) {
            return Err(invalid(format!("cdf argument {u} outside [0,1]")));
        }
        match self {
            PriorSpec::Beta { a, b } => reg_inc_beta(u, *a, *b),
            PriorSpec::Discrete { atoms } => Ok(atoms
                .iter()
                .take_while(|at| at.mean <= u)
                .fold(T::zero(), |acc, at| acc + at.prob)
                .min(T::one())),
        }
    }

    /// `E[max of K independent prior draws] = ∫ (1 - F(u)^K) du`.
    pub fn expected_max(&self, arms: usize) -> Result<T> {
        if arms == 0 {
            return Err(invalid("expected_max needs K >= 1"));
        }
        match self {
            PriorSpec::Beta { a, b } => {
                if arms == 1 {
                    return Ok(*a / (*a + *b));
                }
                let k = arms as i32;
                let failure = RefCell::new(None);
                let v = quadrature::integrate(
                    |u: T| match reg_inc_beta(u, *a, *b) {
                        Ok(f) => T::one() - f.powi(k),
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            T::nan()
                        }
                    },
                    T::zero(),
                    T::one(),
                    T::lit(EXPECTED_MAX_TOL),
                );
                if let Some(e) = failure.into_inner() {
                    return Err(e);
                }
                v
            }
            PriorSpec::Discrete { atoms } => {
                let k = arms as i32;
                let mut below = T::zero();
                let mut total = T::zero();
                for at in atoms {
                    let upto = (below + at.prob).min(T::one());
                    total = total + at.mean * (upto.powi(k) - below.powi(k));
                    below = upto;
                }
                Ok(total)
            }
        }
    }
}

fn check_counts(r: u64, s: u64) -> Result<()> {
    if s > r {
        return Err(invalid(format!("successes s={s} exceed pulls r={r}")));
    }
    Ok(())
}

fn ln_binomial<T: Real>(r: u64, s: u64) -> T {
    use crate::special::ln_gamma;
    ln_gamma(T::count(r + 1)) - ln_gamma(T::count(s + 1)) - ln_gamma(T::count(r - s + 1))
}

/// `ln(mu^s (1-mu)^(r-s))` with `0^0 = 1`.
fn ln_likelihood<T: Real>(mu: T, r: u64, s: u64) -> T {
    let f = r - s;
    let mut acc = T::zero();
    if s > 0 {
        acc = acc + T::count(s) * mu.ln();
    }
    if f > 0 {
        acc = acc + T::count(f) * (T::one() - mu).ln();
    }
    acc
}

/// Normalized posterior atom probabilities.
fn discrete_posterior<T: Real>(atoms: &[Atom<T>], r: u64, s: u64) -> Result<Vec<T>> {
    let logs: Vec<T> = atoms
        .iter()
        .map(|at| {
            if at.prob > T::zero() {
                at.prob.ln() + ln_likelihood(at.mean, r, s)
            } else {
                T::neg_infinity()
            }
        })
        .collect();
    let top = logs.iter().copied().fold(T::neg_infinity(), T::max);
    if !top.is_finite() {
        return Err(Error::DegeneratePosterior(format!(
            "no prior mass is consistent with {s} successes in {r} pulls"
        )));
    }
    let unnorm: Vec<T> = logs.iter().map(|&l| (l - top).exp()).collect();
    let z = unnorm.iter().fold(T::zero(), |acc, &w| acc + w);
    Ok(unnorm.into_iter().map(|w| w / z).collect())
}

/// Which terminal weight the LP quality row uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec<T> {
    /// `w(s) = P(mu >= mu0 | R, s)`.
    Pac { mu0: T, rounds: usize },
    /// `w(s) = E[mu*] - E[mu | R, s]` with `mu*` the max over `arms` arms.
    Srm { arms: usize, rounds: usize },
    /// `w(s) = E_post[F(mu)^(arms-1)]`: the focal arm beats `arms-1` fresh draws.
    Fc { arms: usize, rounds: usize },
}

impl<T: Real> WeightSpec<T> {
    pub fn rounds(&self) -> usize {
        match *self {
            WeightSpec::Pac { rounds, .. } | WeightSpec::Srm { rounds, .. } | WeightSpec::Fc { rounds, .. } => rounds,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            WeightSpec::Pac { .. } => "pac",
            WeightSpec::Srm { .. } => "srm",
            WeightSpec::Fc { .. } => "fc",
        }
    }

    /// PAC and FC weights increase with `s`; the SRM weight (a regret) decreases.
    pub fn direction(&self) -> ConstraintDirection {
        match self {
            WeightSpec::Srm { .. } => ConstraintDirection::Leq,
            _ => ConstraintDirection::Geq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds() == 0 {
            return Err(invalid("weight spec needs R >= 1"));
        }
        match *self {
            WeightSpec::Pac { mu0, .. } => {
                if !(mu0 > T::zero() && mu0 < T::one()) {
                    return Err(invalid(format!("mu0={mu0} must lie in (0,1)")));
                }
            }
            WeightSpec::Srm { arms, .. } | WeightSpec::Fc { arms, .. } => {
                if arms == 0 {
                    return Err(invalid("weight spec needs K >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Terminal weight `w(s)` for `0 <= s <= R`.
pub fn weight<T: Real>(spec: &WeightSpec<T>, prior: &PriorSpec<T>, s: usize) -> Result<T> {
    spec.validate()?;
    let rounds = spec.rounds();
    if s > rounds {
        return Err(invalid(format!("weight needs s <= R (s={s}, R={rounds})")));
    }
    match *spec {
        WeightSpec::Srm { arms, .. } => {
            Ok(prior.expected_max(arms)? - prior.posterior_mean(rounds as u64, s as u64)?)
        }
        _ => single_weight(spec, prior, s),
    }
}

/// All terminal weights `w(0..=R)`.
pub fn weights<T: Real>(spec: &WeightSpec<T>, prior: &PriorSpec<T>) -> Result<Vec<T>> {
    spec.validate()?;
    let rounds = spec.rounds();
    match *spec {
        WeightSpec::Srm { arms, .. } => {
            let top = prior.expected_max(arms)?;
            (0..=rounds)
                .map(|s| Ok(top - prior.posterior_mean(rounds as u64, s as u64)?))
                .collect()
        }
        _ => (0..=rounds).map(|s| single_weight(spec, prior, s)).collect(),
    }
}

fn single_weight<T: Real>(spec: &WeightSpec<T>, prior: &PriorSpec<T>, s: usize) -> Result<T> {
    let rounds = spec.rounds() as u64;
    let s64 = s as u64;
    match (*spec, prior) {
        (WeightSpec::Pac { mu0, .. }, PriorSpec::Beta { a, b }) => {
            let tail = T::one() - reg_inc_beta(mu0, *a + T::count(s64), *b + T::count(rounds - s64))?;
            Ok(tail.max(T::zero()).min(T::one()))
        }
        (WeightSpec::Pac { mu0, .. }, PriorSpec::Discrete { atoms }) => {
            let post = discrete_posterior(atoms, rounds, s64)?;
            Ok(atoms
                .iter()
                .zip(&post)
                .filter(|(at, _)| at.mean >= mu0)
                .fold(T::zero(), |acc, (_, &w)| acc + w))
        }
        (WeightSpec::Fc { arms, .. }, PriorSpec::Beta { a, b }) => {
            if arms == 1 {
                return Ok(T::one());
            }
            let k = (arms - 1) as i32;
            let failure = RefCell::new(None);
            let v = quadrature::beta_expectation(
                |u: T| match reg_inc_beta(u, *a, *b) {
                    Ok(f) => f.powi(k),
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        T::nan()
                    }
                },
                *a + T::count(s64),
                *b + T::count(rounds - s64),
                T::lit(FC_WEIGHT_TOL),
            );
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            Ok(v?.max(T::zero()).min(T::one()))
        }
        (WeightSpec::Fc { arms, .. }, PriorSpec::Discrete { atoms }) => {
            let post = discrete_posterior(atoms, rounds, s64)?;
            let k = (arms - 1) as i32;
            let mut cdf = T::zero();
            let mut total = T::zero();
            for (at, &w) in atoms.iter().zip(&post) {
                cdf = (cdf + at.prob).min(T::one());
                total = total + w * cdf.powi(k);
            }
            Ok(total)
        }
        (WeightSpec::Srm { .. }, _) => unreachable!("SRM weights are computed by the caller"),
    }
}
