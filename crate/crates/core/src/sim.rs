//! Bayesian bandit environments, episode execution under the batch protocol
//! and seeded parallel Monte Carlo.
//!
//! Streams: every episode gets a seed derived from `(master_seed, episode)`.
//! Under that seed, stream 0 draws the arm means, stream `1 + j` draws the
//! rewards of arm `j` (so the `n`-th pull of an arm sees the same uniform under
//! every policy), and stream `2^32 + p` drives policy `p`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bounds::BoundReport;
use crate::error::{invalid, Error, Result};
use crate::lp_solve::ActionTable;
use crate::policy::{make_batch_racing, make_batched_thompson, make_lp2s, make_tse, make_uniform, Policy};
use crate::prior::PriorSpec;

/// Arm means of one bandit instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub mu: Vec<f64>,
    /// Indices attaining `mu_star`.
    pub best: Vec<usize>,
    pub mu_star: f64,
}

impl Environment {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid("environment needs at least one mean, all in [0,1]"));
        }
        let mu_star = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = (0..mu.len()).filter(|&j| mu[j] == mu_star).collect();
        Ok(Environment { mu, best, mu_star })
    }

    pub fn arms(&self) -> usize {
        self.mu.len()
    }
}

/// `K` independent draws from the prior.
pub fn sample_environment(prior: &PriorSpec<f64>, arms: usize, rng: &mut impl Rng) -> Result<Environment> {
    if arms == 0 {
        return Err(invalid("environment needs K >= 1"));
    }
    prior.validate()?;
    let mu = match prior {
        PriorSpec::Beta { a, b } => {
            let d = Beta::new(*a, *b).map_err(|e| invalid(e.to_string()))?;
            (0..arms).map(|_| d.sample(rng)).collect()
        }
        PriorSpec::Discrete { atoms } => (0..arms)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for at in atoms {
                    acc += at.prob;
                    if u < acc {
                        return at.mean;
                    }
                }
                atoms.last().expect("validated prior has atoms").mean
            })
            .collect(),
    };
    Environment::new(mu)
}

/// Per-arm reward streams: the `n`-th pull of arm `j` succeeds iff the `n`-th
/// uniform of stream `j` falls below `mu_j`.
#[derive(Clone, Debug)]
pub struct RewardStreams {
    streams: Vec<ChaCha8Rng>,
}

impl RewardStreams {
    pub fn new(seed: u64, arms: usize) -> Self {
        let streams = (0..arms)
            .map(|j| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(1 + j as u64);
                r
            })
            .collect();
        RewardStreams { streams }
    }

    pub fn draw(&mut self, env: &Environment, arm: usize) -> bool {
        self.streams[arm].random::<f64>() < env.mu[arm]
    }
}

/// One protocol breach.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub batch: usize,
    pub detail: String,
}

fn check_batch(batch: usize, arms: &[usize], k: usize) -> Option<Violation> {
    if arms.len() > k {
        return Some(Violation { batch, detail: format!("{} pulls exceed K={k}", arms.len()) });
    }
    let mut seen = vec![false; k];
    for &j in arms {
        if j >= k {
            return Some(Violation { batch, detail: format!("arm {j} out of range") });
        }
        if seen[j] {
            return Some(Violation { batch, detail: format!("arm {j} pulled twice") });
        }
        seen[j] = true;
    }
    None
}

/// Checks a recorded trace of batches against the `(K, 1)` protocol.
pub fn protocol_check(trace: &[Vec<usize>], arms: usize) -> std::result::Result<(), Vec<Violation>> {
    let bad: Vec<Violation> = trace.iter().enumerate().filter_map(|(b, x)| check_batch(b, x, arms)).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

/// Outcome of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub recommended: usize,
    pub simple_regret: f64,
    pub is_best: bool,
    pub total_pulls: u64,
    pub stage1_pulls: u64,
    pub stage2_pulls: u64,
    pub survivors: Option<usize>,
    pub batches: usize,
}

/// Runs `policy` on `env` for at most `max_batches` batches, checking the
/// protocol on every batch.
pub fn run_episode(policy: &mut dyn Policy, env: &Environment, max_batches: usize, rewards: &mut RewardStreams) -> Result<EpisodeResult> {
    if policy.arms() != env.arms() {
        return Err(invalid(format!("policy has K={} but the environment has K={}", policy.arms(), env.arms())));
    }
    let mut batches = 0;
    for batch in 0..max_batches {
        if policy.is_done() {
            break;
        }
        let arms = policy.decide(batch)?;
        if let Some(v) = check_batch(batch, &arms, env.arms()) {
            return Err(Error::ProtocolViolation { batch: v.batch, detail: v.detail });
        }
        let x: Vec<bool> = arms.iter().map(|&j| rewards.draw(env, j)).collect();
        policy.observe(&arms, &x)?;
        batches += 1;
    }
    let recommended = policy.recommend()?;
    let (stage1_pulls, stage2_pulls) = policy.stage_pulls();
    Ok(EpisodeResult {
        recommended,
        simple_regret: env.mu_star - env.mu[recommended],
        is_best: env.mu[recommended] == env.mu_star,
        total_pulls: policy.pulls_used(),
        stage1_pulls,
        stage2_pulls,
        survivors: policy.survivors(),
        batches,
    })
}

/// A fully resolved policy configuration.
#[derive(Clone, Debug)]
pub enum PolicySpec {
    Lp2s { actions: Arc<ActionTable> },
    Uniform { rounds: usize },
    BatchRacing { delta: f64, max_batches: usize, budget: Option<u64> },
    Tse { q: f64, budget: u64 },
    BatchedThompson { alpha: f64, budget: u64 },
}

impl PolicySpec {
    pub fn label(&self) -> &'static str {
        match self {
            PolicySpec::Lp2s { .. } => "lp2s",
            PolicySpec::Uniform { .. } => "uniform",
            PolicySpec::BatchRacing { .. } => "batch_racing",
            PolicySpec::Tse { .. } => "tse",
            PolicySpec::BatchedThompson { .. } => "batched_thompson",
        }
    }

    pub fn build(&self, arms: usize, prior: &PriorSpec<f64>, rng: ChaCha8Rng) -> Result<Box<dyn Policy>> {
        Ok(match self {
            PolicySpec::Lp2s { actions } => Box::new(make_lp2s((**actions).clone(), actions.rounds, arms, rng)?),
            PolicySpec::Uniform { rounds } => Box::new(make_uniform(arms, *rounds, rng)?),
            PolicySpec::BatchRacing { delta, max_batches, budget } => {
                let p = make_batch_racing(arms, *delta, *max_batches, rng)?;
                Box::new(match budget {
                    Some(b) => p.with_budget(*b),
                    None => p,
                })
            }
            PolicySpec::Tse { q, budget } => Box::new(make_tse(arms, *q, *budget, rng)?),
            PolicySpec::BatchedThompson { alpha, budget } => Box::new(make_batched_thompson(arms, prior, *alpha, *budget, rng)?),
        })
    }

    /// Batch cap handed to [`run_episode`]; every batch pulls at least one arm
    /// until the policy stops, so budgets bound the batch count.
    pub fn max_batches(&self) -> usize {
        match self {
            PolicySpec::Lp2s { actions } => 2 * actions.rounds,
            PolicySpec::Uniform { rounds } => *rounds,
            PolicySpec::BatchRacing { max_batches, .. } => *max_batches,
            PolicySpec::Tse { budget, .. } | PolicySpec::BatchedThompson { budget, .. } => *budget as usize,
        }
    }
}

/// Parameters shared by all episodes of a Monte Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub prior: PriorSpec<f64>,
    pub arms: usize,
    /// Reported in the episode CSV.
    pub rounds: usize,
    pub episodes: usize,
    pub master_seed: u64,
    pub parallelism: usize,
}

/// Seed of episode `i`, from a counter-based split of the master seed.
pub fn episode_seed(master: u64, episode: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(episode);
    r.next_u64()
}

fn policy_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((1u64 << 32) + index as u64);
    r
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: u64,
    pub policy: String,
    pub seed: u64,
    pub result: EpisodeResult,
}

/// Aggregates over the episodes of one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub policy: String,
    pub episodes: usize,
    pub mean_sr: f64,
    /// Sample standard deviation over `sqrt(N)`; absent for `N = 1`.
    pub se_sr: Option<f64>,
    pub mean_pb: f64,
    pub se_pb: Option<f64>,
    pub mean_t: f64,
    pub se_t: Option<f64>,
    /// 10%, 50% and 90% quantiles of the total pulls.
    pub t_quantiles: [f64; 3],
    pub mean_survivors: Option<f64>,
}

/// Mean and standard error (`None` below two samples).
pub fn mean_se(x: &[f64]) -> (f64, Option<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, None);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl MetricsSummary {
    pub fn from_results(policy: &str, results: &[EpisodeResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(invalid("summary needs at least one episode"));
        }
        let sr: Vec<f64> = results.iter().map(|r| r.simple_regret).collect();
        let pb: Vec<f64> = results.iter().map(|r| r.is_best as u8 as f64).collect();
        let t: Vec<f64> = results.iter().map(|r| r.total_pulls as f64).collect();
        let (mean_sr, se_sr) = mean_se(&sr);
        let (mean_pb, se_pb) = mean_se(&pb);
        let (mean_t, se_t) = mean_se(&t);
        let mut sorted = t.clone();
        sorted.sort_by(f64::total_cmp);
        let surv: Vec<f64> = results.iter().filter_map(|r| r.survivors.map(|s| s as f64)).collect();
        Ok(MetricsSummary {
            policy: policy.to_string(),
            episodes: results.len(),
            mean_sr,
            se_sr,
            mean_pb,
            se_pb,
            mean_t,
            se_t,
            t_quantiles: [quantile(&sorted, 0.1), quantile(&sorted, 0.5), quantile(&sorted, 0.9)],
            mean_survivors: (surv.len() == results.len()).then(|| surv.iter().sum::<f64>() / surv.len() as f64),
        })
    }
}

/// Everything a Monte Carlo run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloOutput {
    pub config: MonteCarloConfig,
    /// Ordered by episode, then by policy position.
    pub rows: Vec<EpisodeRow>,
    pub summaries: Vec<MetricsSummary>,
}

impl MonteCarloOutput {
    /// Results of one policy, in episode order.
    pub fn results(&self, policy: &str) -> Vec<EpisodeResult> {
        self.rows.iter().filter(|r| r.policy == policy).map(|r| r.result.clone()).collect()
    }

    pub fn summary(&self, policy: &str) -> Option<&MetricsSummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode,policy,K,R,seed,recommended,simple_regret,is_best,total_pulls,survivors\n");
        for row in &self.rows {
            let r = &row.result;
            let surv = r.survivors.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                row.episode,
                row.policy,
                self.config.arms,
                self.config.rounds,
                row.seed,
                r.recommended,
                r.simple_regret,
                r.is_best as u8,
                r.total_pulls,
                surv
            );
        }
        out
    }

    /// Per-policy summary rows followed by bound rows named `bound:<name>`.
    pub fn summary_csv(&self, bounds: &[BoundReport]) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("policy,N,mean_SR,se_SR,mean_PB,se_PB,mean_T,bound,satisfied\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},,",
                s.policy,
                s.episodes,
                s.mean_sr,
                opt(s.se_sr),
                s.mean_pb,
                opt(s.se_pb),
                s.mean_t
            );
        }
        for b in bounds {
            let _ = writeln!(
                out,
                "bound:{},{},{},,,,,{},{}",
                b.name,
                self.config.episodes,
                opt(b.observed_value),
                b.bound_value,
                b.satisfied.map(|x| x.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// Runs every policy on the same `N` sampled environments with common reward
/// streams. Output is identical for any `parallelism`.
pub fn monte_carlo(config: &MonteCarloConfig, policies: &[PolicySpec]) -> Result<MonteCarloOutput> {
    if config.episodes == 0 {
        return Err(invalid("Monte Carlo needs N >= 1"));
    }
    if policies.is_empty() {
        return Err(invalid("Monte Carlo needs at least one policy"));
    }
    config.prior.validate()?;
    let run = |i: usize| -> Result<Vec<EpisodeRow>> {
        let seed = episode_seed(config.master_seed, i as u64);
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        let env = sample_environment(&config.prior, config.arms, &mut env_rng)?;
        policies
            .iter()
            .enumerate()
            .map(|(p, spec)| {
                let mut policy = spec.build(config.arms, &config.prior, policy_rng(seed, p))?;
                let mut rewards = RewardStreams::new(seed, config.arms);
                let result = run_episode(policy.as_mut(), &env, spec.max_batches(), &mut rewards)?;
                Ok(EpisodeRow { episode: i as u64, policy: spec.label().to_string(), seed, result })
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let per_episode: Vec<Result<Vec<EpisodeRow>>> = pool.install(|| (0..config.episodes).into_par_iter().map(run).collect());
    let mut rows = Vec::with_capacity(config.episodes * policies.len());
    for (i, r) in per_episode.into_iter().enumerate() {
        match r {
            Ok(v) => rows.extend(v),
            Err(e) => return Err(Error::Episode { index: i as u64, source: Box::new(e) }),
        }
    }
    let mut summaries = Vec::new();
    for spec in policies {
        let label = spec.label();
        if summaries.iter().any(|s: &MetricsSummary| s.policy == label) {
            continue;
        }
        let results: Vec<EpisodeResult> = rows.iter().filter(|r| r.policy == label).map(|r| r.result.clone()).collect();
        summaries.push(MetricsSummary::from_results(label, &results)?);
    }
    Ok(MonteCarloOutput { config: config.clone(), rows, summaries })
}

/// Two-sided Welch test of equal means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

pub fn welch_test(a: &[f64], b: &[f64]) -> Result<Welch> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("Welch test needs two samples of size >= 2"));
    }
    let (ma, sa) = mean_se(a);
    let (mb, sb) = mean_se(b);
    let (va, vb) = (sa.unwrap().powi(2), sb.unwrap().powi(2));
    let se2 = va + vb;
    if se2 == 0.0 {
        let p = if ma == mb { 1.0 } else { 0.0 };
        return Ok(Welch { t: if ma == mb { 0.0 } else { f64::INFINITY.copysign(ma - mb) }, df: f64::NAN, p_value: p });
    }
    let t = (ma - mb) / se2.sqrt();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
    Ok(Welch { t, df, p_value: 2.0 * dist.cdf(-t.abs()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    type P64 = PriorSpec<f64>;

    /// Recommends a uniformly random arm without pulling.
    struct Guess {
        k: usize,
        rng: ChaCha8Rng,
    }

    impl Policy for Guess {
        fn name(&self) -> &'static str {
            "guess"
        }
        fn arms(&self) -> usize {
            self.k
        }
        fn decide(&mut self, _: usize) -> Result<Vec<usize>> {
            Ok(Vec::new())
        }
        fn observe(&mut self, _: &[usize], _: &[bool]) -> Result<()> {
            Ok(())
        }
        fn is_done(&self) -> bool {
            true
        }
        fn recommend(&mut self) -> Result<usize> {
            Ok(self.rng.random_range(0..self.k))
        }
        fn pulls_used(&self) -> u64 {
            0
        }
    }

    /// Pulls arm 0 twice in one batch.
    struct Cheat(bool);

    impl Policy for Cheat {
        fn name(&self) -> &'static str {
            "cheat"
        }
        fn arms(&self) -> usize {
            2
        }
        fn decide(&mut self, _: usize) -> Result<Vec<usize>> {
            Ok(vec![0, 0])
        }
        fn observe(&mut self, _: &[usize], _: &[bool]) -> Result<()> {
            self.0 = true;
            Ok(())
        }
        fn is_done(&self) -> bool {
            self.0
        }
        fn recommend(&mut self) -> Result<usize> {
            Ok(0)
        }
        fn pulls_used(&self) -> u64 {
            0
        }
    }

    #[test]
    fn discrete_point_environment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = sample_environment(&P64::point(0.3).unwrap(), 5, &mut rng).unwrap();
        assert_eq!(env.mu, vec![0.3; 5]);
        assert_eq!(env.best, vec![0, 1, 2, 3, 4]);
        let one = sample_environment(&P64::beta(2.0, 2.0).unwrap(), 1, &mut rng).unwrap();
        assert_eq!(one.best, vec![0]);
    }

    #[test]
    fn uniform_prior_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let env = sample_environment(&P64::beta(1.0, 1.0).unwrap(), 10_000, &mut rng).unwrap();
        let mean = env.mu.iter().sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() <= 3.0 * (1.0 / 12f64.sqrt()) / 100.0);
    }

    #[test]
    fn protocol_examples() {
        assert!(protocol_check(&[vec![0, 1], vec![1]], 2).is_ok());
        let bad = protocol_check(&[vec![0, 0]], 2).unwrap_err();
        assert_eq!(bad[0].batch, 0);
        assert!(protocol_check(&[vec![0, 1, 2]], 2).is_err());
    }

    #[test]
    fn episode_rejects_duplicates() {
        let env = Environment::new(vec![0.5, 0.5]).unwrap();
        let mut rewards = RewardStreams::new(0, 2);
        let err = run_episode(&mut Cheat(false), &env, 3, &mut rewards).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation { batch: 0, .. }));
    }

    #[test]
    fn uniform_episode_pulls_and_zero_regret() {
        let env = Environment::new(vec![0.0, 0.0]).unwrap();
        let mut p = make_uniform(2, 3, ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r = run_episode(&mut p, &env, 3, &mut RewardStreams::new(3, 2)).unwrap();
        assert_eq!(r.total_pulls, 6);
        assert_eq!(r.simple_regret, 0.0);
        assert!(r.is_best);
    }

    #[test]
    fn random_recommender_regret_and_best_rate() {
        // E[mu*] = K/(K+1) for the uniform prior
        let k = 9;
        let prior = P64::beta(1.0, 1.0).unwrap();
        let n = 5000;
        let mut sr = Vec::new();
        let mut pb = Vec::new();
        for i in 0..n {
            let seed = episode_seed(11, i);
            let env = sample_environment(&prior, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut g = Guess { k, rng: policy_rng(seed, 0) };
            let r = run_episode(&mut g, &env, 1, &mut RewardStreams::new(seed, k)).unwrap();
            sr.push(r.simple_regret);
            pb.push(r.is_best as u8 as f64);
        }
        let (m, se) = mean_se(&sr);
        let want = k as f64 / (k as f64 + 1.0) - 0.5;
        assert!((m - want).abs() <= 3.0 * se.unwrap(), "{m} vs {want}");
        let (m, se) = mean_se(&pb);
        assert!((m - 1.0 / k as f64).abs() <= 3.0 * se.unwrap());
    }

    #[test]
    fn single_episode_summary_has_no_errors() {
        let cfg = MonteCarloConfig {
            prior: P64::beta(1.0, 1.0).unwrap(),
            arms: 3,
            rounds: 2,
            episodes: 1,
            master_seed: 5,
            parallelism: 1,
        };
        let out = monte_carlo(&cfg, &[PolicySpec::Uniform { rounds: 2 }]).unwrap();
        let s = &out.summaries[0];
        assert_eq!(s.se_sr, None);
        assert_eq!(s.mean_sr, out.rows[0].result.simple_regret);
        assert_eq!(s.mean_t, 6.0);
    }

    #[test]
    fn welch_matches_known_case() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let w = welch_test(&a, &b).unwrap();
        // means 2.5 and 6, variances 5/3 and 10
        let se2: f64 = 5.0 / 12.0 + 2.0;
        assert!((w.t + 3.5 / se2.sqrt()).abs() < 1e-12);
        let df = se2 * se2 / ((5.0f64 / 12.0).powi(2) / 3.0 + 4.0 / 4.0);
        assert!((w.df - df).abs() < 1e-12);
        assert!((w.p_value - 0.069_133_593_192_392_36).abs() < 1e-9);
    }

    #[test]
    fn quantiles_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.1), 1.0);
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&v, 0.9), 9.0);
    }
}
