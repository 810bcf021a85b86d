//! Batch policies: LP2S and the baselines it is compared against.
//!
//! Every policy follows the same cycle per batch: [`Policy::decide`] returns a
//! set of distinct arms, the environment draws one reward per arm, and
//! [`Policy::observe`] receives them. Randomization (including tie-breaks) uses
//! the policy's own stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lp_solve::ActionTable;
use crate::prior::PriorSpec;

/// Uniform interface of all batch policies.
pub trait Policy: Send {
    fn name(&self) -> &'static str;
    fn arms(&self) -> usize;
    /// Arms to pull in batch `batch` (0-based, consecutive). Empty once the policy is done.
    fn decide(&mut self, batch: usize) -> Result<Vec<usize>>;
    /// Rewards for the arms returned by the last `decide`, in the same order.
    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()>;
    /// True once the policy will not pull any more.
    fn is_done(&self) -> bool;
    fn recommend(&mut self) -> Result<usize>;
    fn pulls_used(&self) -> u64;
    /// Pulls split by stage; single-stage policies report everything as stage one.
    fn stage_pulls(&self) -> (u64, u64) {
        (self.pulls_used(), 0)
    }
    /// Arms left after a screening stage, when the policy has one.
    fn survivors(&self) -> Option<usize> {
        None
    }
}

/// Per-arm counts of an elimination policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmState {
    pub pulls: u64,
    pub successes: u64,
    pub eliminated: bool,
}

/// Index of the largest score, ties broken uniformly at random.
pub fn argmax_random(scores: impl IntoIterator<Item = (usize, f64)>, rng: &mut impl Rng) -> Option<usize> {
    let mut best = Vec::new();
    let mut top = f64::NEG_INFINITY;
    for (i, v) in scores {
        if v > top {
            top = v;
            best.clear();
            best.push(i);
        } else if v == top {
            best.push(i);
        }
    }
    match best.len() {
        0 => None,
        n => Some(best[rng.random_range(0..n)]),
    }
}

/// Bookkeeping shared by the implementations: batch counter and the pending pull set.
#[derive(Clone, Debug)]
struct Cycle {
    batch: usize,
    pending: Option<Vec<usize>>,
    pulls: u64,
}

impl Cycle {
    fn new() -> Self {
        Cycle { batch: 0, pending: None, pulls: 0 }
    }

    fn start(&mut self, batch: usize) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::ProtocolOrder(format!("decide({batch}) before observing batch {}", self.batch)));
        }
        if batch != self.batch {
            return Err(Error::ProtocolOrder(format!("decide({batch}) but the next batch is {}", self.batch)));
        }
        Ok(())
    }

    fn issue(&mut self, arms: Vec<usize>) -> Vec<usize> {
        self.pending = Some(arms.clone());
        arms
    }

    fn finish(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        let expected = self
            .pending
            .take()
            .ok_or_else(|| Error::ProtocolOrder("observe without a pending decide".into()))?;
        if expected != pulled || rewards.len() != pulled.len() {
            return Err(Error::ProtocolOrder("observed pulls differ from the decided batch".into()));
        }
        self.pulls += pulled.len() as u64;
        self.batch += 1;
        Ok(())
    }
}

/// The two-stage LP policy.
#[derive(Clone, Debug)]
pub struct Lp2s {
    actions: ActionTable,
    rng: ChaCha8Rng,
    arms: Vec<ArmState>,
    stage2_reward: Vec<u64>,
    survivors: Option<Vec<usize>>,
    cycle: Cycle,
    stage1_pulls: u64,
    choice: Option<usize>,
}

/// LP2S for `arms` arms. Stage one pulls each remaining arm at round `r+1` with
/// probability `a(r, s)`, dropping it otherwise, then keeps it with probability
/// `a(R, s)`; stage two explores the survivors uniformly for `R` rounds.
pub fn make_lp2s(actions: ActionTable, rounds: usize, arms: usize, rng: ChaCha8Rng) -> Result<Lp2s> {
    if actions.rounds != rounds {
        return Err(invalid(format!("action table has R={} but the policy needs R={rounds}", actions.rounds)));
    }
    if rounds == 0 || arms == 0 {
        return Err(invalid("LP2S needs R >= 1 and K >= 1"));
    }
    Ok(Lp2s {
        actions,
        rng,
        arms: vec![ArmState::default(); arms],
        stage2_reward: vec![0; arms],
        survivors: None,
        cycle: Cycle::new(),
        stage1_pulls: 0,
        choice: None,
    })
}

impl Lp2s {
    fn rounds(&self) -> usize {
        self.actions.rounds
    }

    pub fn arm_states(&self) -> &[ArmState] {
        &self.arms
    }

    /// Surviving arm indices once stage one is over.
    pub fn survivor_set(&self) -> Option<&[usize]> {
        self.survivors.as_deref()
    }

    fn close_stage_one(&mut self) {
        let rounds = self.rounds();
        let mut kept = Vec::new();
        for (j, arm) in self.arms.iter_mut().enumerate() {
            if arm.eliminated {
                continue;
            }
            let a = self.actions.keep(arm.successes as usize);
            if self.rng.random::<f64>() < a {
                kept.push(j);
            } else {
                arm.eliminated = true;
            }
        }
        debug_assert!(self.arms.iter().all(|a| a.eliminated || a.pulls == rounds as u64));
        self.survivors = Some(kept);
    }
}

impl Policy for Lp2s {
    fn name(&self) -> &'static str {
        "lp2s"
    }

    fn arms(&self) -> usize {
        self.arms.len()
    }

    fn decide(&mut self, batch: usize) -> Result<Vec<usize>> {
        self.cycle.start(batch)?;
        let rounds = self.rounds();
        if self.is_done() {
            return Ok(self.cycle.issue(Vec::new()));
        }
        let pulls = if batch < rounds {
            let mut pulls = Vec::new();
            for (j, arm) in self.arms.iter_mut().enumerate() {
                if arm.eliminated {
                    continue;
                }
                let a = self.actions.get(batch, arm.successes as usize);
                if self.rng.random::<f64>() < a {
                    pulls.push(j);
                } else {
                    arm.eliminated = true;
                }
            }
            pulls
        } else {
            self.survivors.clone().unwrap_or_default()
        };
        Ok(self.cycle.issue(pulls))
    }

    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        let batch = self.cycle.batch;
        self.cycle.finish(pulled, rewards)?;
        let rounds = self.rounds();
        if batch < rounds {
            self.stage1_pulls += pulled.len() as u64;
            for (&j, &x) in pulled.iter().zip(rewards) {
                self.arms[j].pulls += 1;
                self.arms[j].successes += x as u64;
            }
            if batch + 1 == rounds {
                self.close_stage_one();
            } else if self.arms.iter().all(|a| a.eliminated) {
                self.survivors = Some(Vec::new());
            }
        } else {
            for (&j, &x) in pulled.iter().zip(rewards) {
                self.stage2_reward[j] += x as u64;
            }
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.cycle.batch >= 2 * self.rounds() || self.survivors.as_ref().is_some_and(|s| s.is_empty())
    }

    fn recommend(&mut self) -> Result<usize> {
        if let Some(j) = self.choice {
            return Ok(j);
        }
        if !self.is_done() {
            return Err(Error::ProtocolOrder(format!(
                "recommend after {} of {} rounds",
                self.cycle.batch,
                2 * self.rounds()
            )));
        }
        let survivors = self.survivors.clone().unwrap_or_default();
        let j = if survivors.is_empty() {
            self.rng.random_range(0..self.arms.len())
        } else {
            let scores: Vec<_> = survivors.iter().map(|&j| (j, self.stage2_reward[j] as f64)).collect();
            argmax_random(scores, &mut self.rng).expect("non-empty survivors")
        };
        self.choice = Some(j);
        Ok(j)
    }

    fn pulls_used(&self) -> u64 {
        self.cycle.pulls
    }

    fn stage_pulls(&self) -> (u64, u64) {
        (self.stage1_pulls, self.cycle.pulls - self.stage1_pulls)
    }

    fn survivors(&self) -> Option<usize> {
        self.survivors.as_ref().map(Vec::len)
    }
}

/// Empirical means of pulled arms, for the "highest average" recommendations.
fn empirical(pulls: &[u64], successes: &[u64], among: impl IntoIterator<Item = usize>) -> Vec<(usize, f64)> {
    among
        .into_iter()
        .filter(|&j| pulls[j] > 0)
        .map(|j| (j, successes[j] as f64 / pulls[j] as f64))
        .collect()
}

/// Pulls every arm every round.
#[derive(Clone, Debug)]
pub struct Uniform {
    rounds: usize,
    rng: ChaCha8Rng,
    reward: Vec<u64>,
    cycle: Cycle,
    choice: Option<usize>,
}

pub fn make_uniform(arms: usize, total_rounds: usize, rng: ChaCha8Rng) -> Result<Uniform> {
    if total_rounds == 0 || arms == 0 {
        return Err(invalid("uniform exploration needs K >= 1 and at least one round"));
    }
    Ok(Uniform { rounds: total_rounds, rng, reward: vec![0; arms], cycle: Cycle::new(), choice: None })
}

impl Policy for Uniform {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn arms(&self) -> usize {
        self.reward.len()
    }

    fn decide(&mut self, batch: usize) -> Result<Vec<usize>> {
        self.cycle.start(batch)?;
        let pulls = if self.is_done() { Vec::new() } else { (0..self.reward.len()).collect() };
        Ok(self.cycle.issue(pulls))
    }

    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        self.cycle.finish(pulled, rewards)?;
        for (&j, &x) in pulled.iter().zip(rewards) {
            self.reward[j] += x as u64;
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.cycle.batch >= self.rounds
    }

    fn recommend(&mut self) -> Result<usize> {
        if let Some(j) = self.choice {
            return Ok(j);
        }
        let scores: Vec<_> = self.reward.iter().enumerate().map(|(j, &x)| (j, x as f64)).collect();
        let j = argmax_random(scores, &mut self.rng).expect("K >= 1");
        self.choice = Some(j);
        Ok(j)
    }

    fn pulls_used(&self) -> u64 {
        self.cycle.pulls
    }
}

/// Confidence radius of the racing bounds after `t` pulls: `sqrt(ln(4 t^2 / omega) / (2 t))`.
pub fn racing_radius(t: u64, omega: f64) -> f64 {
    let t = t as f64;
    ((4.0 * t * t / omega).ln() / (2.0 * t)).sqrt()
}

/// Successive acceptance and rejection with anytime Hoeffding bounds.
#[derive(Clone, Debug)]
pub struct BatchRacing {
    omega: f64,
    max_batches: usize,
    max_pulls: Option<u64>,
    rng: ChaCha8Rng,
    active: Vec<usize>,
    pulls: Vec<u64>,
    successes: Vec<u64>,
    accepted: Option<usize>,
    cycle: Cycle,
    choice: Option<usize>,
}

pub fn make_batch_racing(arms: usize, delta: f64, max_batches: usize, rng: ChaCha8Rng) -> Result<BatchRacing> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("racing confidence delta={delta} must lie in (0,1)")));
    }
    if arms == 0 {
        return Err(invalid("racing needs K >= 1"));
    }
    Ok(BatchRacing {
        omega: (delta / (6.0 * arms as f64)).sqrt(),
        max_batches,
        max_pulls: None,
        rng,
        active: (0..arms).collect(),
        pulls: vec![0; arms],
        successes: vec![0; arms],
        accepted: (arms == 1).then_some(0),
        cycle: Cycle::new(),
        choice: None,
    })
}

impl BatchRacing {
    /// Also stops before a batch that would exceed `budget` pulls in total.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.max_pulls = Some(budget);
        self
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn accepted(&self) -> Option<usize> {
        self.accepted
    }

    fn update(&mut self) {
        let bounds: Vec<(usize, f64, f64)> = self
            .active
            .iter()
            .map(|&j| {
                let m = self.successes[j] as f64 / self.pulls[j] as f64;
                let d = racing_radius(self.pulls[j], self.omega);
                (j, m - d, m + d)
            })
            .collect();
        let best_lower = bounds.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<(usize, f64, f64)> = bounds.into_iter().filter(|b| b.2 >= best_lower).collect();
        self.active = kept.iter().map(|b| b.0).collect();
        for &(j, lo, _) in &kept {
            let others = kept.iter().filter(|b| b.0 != j).map(|b| b.2).fold(f64::NEG_INFINITY, f64::max);
            if lo > others {
                self.accepted = Some(j);
                break;
            }
        }
    }
}

impl Policy for BatchRacing {
    fn name(&self) -> &'static str {
        "batch_racing"
    }

    fn arms(&self) -> usize {
        self.pulls.len()
    }

    fn decide(&mut self, batch: usize) -> Result<Vec<usize>> {
        self.cycle.start(batch)?;
        let pulls = if self.is_done() { Vec::new() } else { self.active.clone() };
        Ok(self.cycle.issue(pulls))
    }

    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        self.cycle.finish(pulled, rewards)?;
        for (&j, &x) in pulled.iter().zip(rewards) {
            self.pulls[j] += 1;
            self.successes[j] += x as u64;
        }
        if !pulled.is_empty() {
            self.update();
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.accepted.is_some()
            || self.cycle.batch >= self.max_batches
            || self.max_pulls.is_some_and(|b| self.cycle.pulls + self.active.len() as u64 > b)
    }

    fn recommend(&mut self) -> Result<usize> {
        if let Some(j) = self.choice.or(self.accepted) {
            self.choice = Some(j);
            return Ok(j);
        }
        let mut scores = empirical(&self.pulls, &self.successes, self.active.iter().copied());
        if scores.is_empty() {
            scores = self.active.iter().map(|&j| (j, 0.0)).collect();
        }
        let j = argmax_random(scores, &mut self.rng).expect("racing keeps at least one arm");
        self.choice = Some(j);
        Ok(j)
    }

    fn pulls_used(&self) -> u64 {
        self.cycle.pulls
    }

    fn survivors(&self) -> Option<usize> {
        Some(self.active.len())
    }
}

/// Two-stage elimination: uniform screening on a fraction `q` of the budget,
/// then uniform exploration of the arms whose upper bound clears the best lower bound.
#[derive(Clone, Debug)]
pub struct Tse {
    budget: u64,
    q: f64,
    stage1_rounds: usize,
    rng: ChaCha8Rng,
    pulls: Vec<u64>,
    successes: Vec<u64>,
    kept: Option<Vec<usize>>,
    cycle: Cycle,
    stage1_pulls: u64,
    choice: Option<usize>,
}

pub fn make_tse(arms: usize, q: f64, budget: u64, rng: ChaCha8Rng) -> Result<Tse> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("TSE fraction q={q} must lie in (0,1)")));
    }
    if arms == 0 {
        return Err(invalid("TSE needs K >= 1"));
    }
    let per_arm = q * budget as f64 / arms as f64;
    if per_arm < 1.0 {
        return Err(invalid(format!("qT/K = {per_arm} leaves no first-stage round")));
    }
    Ok(Tse {
        budget,
        q,
        stage1_rounds: per_arm.floor() as usize,
        rng,
        pulls: vec![0; arms],
        successes: vec![0; arms],
        kept: None,
        cycle: Cycle::new(),
        stage1_pulls: 0,
        choice: None,
    })
}

impl Tse {
    /// Half-width `sqrt(K log T / (q T))` of the screening interval.
    pub fn radius(&self) -> f64 {
        let t = self.budget as f64;
        (self.pulls.len() as f64 * t.ln() / (self.q * t)).sqrt()
    }

    pub fn kept(&self) -> Option<&[usize]> {
        self.kept.as_deref()
    }

    fn screen(&mut self) {
        let n = self.stage1_rounds as f64;
        let c = self.radius();
        let means: Vec<f64> = self.successes.iter().map(|&s| s as f64 / n).collect();
        let best_lower = means.iter().map(|m| m - c).fold(f64::NEG_INFINITY, f64::max);
        self.kept = Some((0..means.len()).filter(|&j| means[j] + c >= best_lower).collect());
    }
}

impl Policy for Tse {
    fn name(&self) -> &'static str {
        "tse"
    }

    fn arms(&self) -> usize {
        self.pulls.len()
    }

    fn decide(&mut self, batch: usize) -> Result<Vec<usize>> {
        self.cycle.start(batch)?;
        let remaining = self.budget - self.cycle.pulls;
        let pulls = match &self.kept {
            _ if self.is_done() => Vec::new(),
            None => (0..self.pulls.len()).collect(),
            Some(kept) => kept.iter().copied().take(remaining as usize).collect(),
        };
        Ok(self.cycle.issue(pulls))
    }

    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        self.cycle.finish(pulled, rewards)?;
        for (&j, &x) in pulled.iter().zip(rewards) {
            self.pulls[j] += 1;
            self.successes[j] += x as u64;
        }
        if self.kept.is_none() {
            self.stage1_pulls += pulled.len() as u64;
            if self.cycle.batch == self.stage1_rounds {
                self.screen();
            }
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.cycle.pulls >= self.budget
    }

    fn recommend(&mut self) -> Result<usize> {
        if let Some(j) = self.choice {
            return Ok(j);
        }
        let among: Vec<usize> = self.kept.clone().unwrap_or_else(|| (0..self.pulls.len()).collect());
        let mut scores = empirical(&self.pulls, &self.successes, among.iter().copied());
        if scores.is_empty() {
            scores = among.iter().map(|&j| (j, 0.0)).collect();
        }
        let j = argmax_random(scores, &mut self.rng).expect("K >= 1");
        self.choice = Some(j);
        Ok(j)
    }

    fn pulls_used(&self) -> u64 {
        self.cycle.pulls
    }

    fn stage_pulls(&self) -> (u64, u64) {
        (self.stage1_pulls, self.cycle.pulls - self.stage1_pulls)
    }

    fn survivors(&self) -> Option<usize> {
        self.kept.as_ref().map(Vec::len)
    }
}

/// Thompson sampling with geometrically growing batches. Batch `n` (from 0)
/// holds `min(remaining, ceil(alpha^n))` Thompson draws from the posteriors
/// frozen at its start; an arm drawn `m` times is pulled once in each of `m`
/// consecutive sub-batches. Posteriors absorb the rewards when the batch ends.
#[derive(Clone, Debug)]
pub struct BatchedThompson {
    a: f64,
    b: f64,
    alpha: f64,
    budget: u64,
    rng: ChaCha8Rng,
    pulls: Vec<u64>,
    successes: Vec<u64>,
    /// Posterior counts as of the last completed batch.
    post_pulls: Vec<u64>,
    post_successes: Vec<u64>,
    /// Pulls still owed to each arm in the current batch.
    owed: Vec<u64>,
    batch_index: u32,
    cycle: Cycle,
    choice: Option<usize>,
}

pub fn make_batched_thompson(arms: usize, prior: &PriorSpec<f64>, alpha: f64, budget: u64, rng: ChaCha8Rng) -> Result<BatchedThompson> {
    let PriorSpec::Beta { a, b } = *prior else {
        return Err(invalid("batched Thompson sampling needs a Beta prior"));
    };
    prior.validate()?;
    if !(alpha > 1.0) {
        return Err(invalid(format!("batch growth alpha={alpha} must exceed 1")));
    }
    if arms == 0 {
        return Err(invalid("Thompson sampling needs K >= 1"));
    }
    Ok(BatchedThompson {
        a,
        b,
        alpha,
        budget,
        rng,
        pulls: vec![0; arms],
        successes: vec![0; arms],
        post_pulls: vec![0; arms],
        post_successes: vec![0; arms],
        owed: vec![0; arms],
        batch_index: 0,
        cycle: Cycle::new(),
        choice: None,
    })
}

impl BatchedThompson {
    fn plan_batch(&mut self) -> Result<()> {
        let remaining = self.budget - self.cycle.pulls;
        let size = self.alpha.powi(self.batch_index as i32).ceil().min(remaining as f64) as u64;
        self.batch_index += 1;
        self.post_pulls.clone_from(&self.pulls);
        self.post_successes.clone_from(&self.successes);
        let k = self.pulls.len();
        if k == 1 {
            self.owed[0] = size;
            return Ok(());
        }
        let dists = (0..k)
            .map(|j| {
                let s = self.post_successes[j] as f64;
                let f = (self.post_pulls[j] - self.post_successes[j]) as f64;
                Beta::new(self.a + s, self.b + f).map_err(|e| Error::DegeneratePosterior(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..size {
            let draws: Vec<(usize, f64)> = dists.iter().enumerate().map(|(j, d)| (j, d.sample(&mut self.rng))).collect();
            let j = argmax_random(draws, &mut self.rng).expect("K >= 1");
            self.owed[j] += 1;
        }
        Ok(())
    }
}

impl Policy for BatchedThompson {
    fn name(&self) -> &'static str {
        "batched_thompson"
    }

    fn arms(&self) -> usize {
        self.pulls.len()
    }

    fn decide(&mut self, batch: usize) -> Result<Vec<usize>> {
        self.cycle.start(batch)?;
        if self.is_done() {
            return Ok(self.cycle.issue(Vec::new()));
        }
        if self.owed.iter().all(|&m| m == 0) {
            self.plan_batch()?;
        }
        let pulls: Vec<usize> = (0..self.owed.len()).filter(|&j| self.owed[j] > 0).collect();
        for &j in &pulls {
            self.owed[j] -= 1;
        }
        Ok(self.cycle.issue(pulls))
    }

    fn observe(&mut self, pulled: &[usize], rewards: &[bool]) -> Result<()> {
        self.cycle.finish(pulled, rewards)?;
        for (&j, &x) in pulled.iter().zip(rewards) {
            self.pulls[j] += 1;
            self.successes[j] += x as u64;
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.cycle.pulls >= self.budget && self.owed.iter().all(|&m| m == 0)
    }

    fn recommend(&mut self) -> Result<usize> {
        if let Some(j) = self.choice {
            return Ok(j);
        }
        let k = self.pulls.len();
        let scores = empirical(&self.pulls, &self.successes, 0..k);
        let j = argmax_random(scores, &mut self.rng).unwrap_or_else(|| self.rng.random_range(0..k));
        self.choice = Some(j);
        Ok(j)
    }

    fn pulls_used(&self) -> u64 {
        self.cycle.pulls
    }
}
