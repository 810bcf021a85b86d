//! Assembly of the peer-independent linear program over the binomial state tree.
//!
//! Node `(r, s)` is the event "the arm was pulled in round `r` and has `s`
//! successes after that pull"; `(0, 0)` is the root. For every node there are
//! three variables `P`, `P1`, `P0` (total mass, mass whose last reward was 1,
//! mass whose last reward was 0). After round `R` each terminal node carries a
//! `Keep` variable: the mass that is retained for the second stage. Survival and
//! quality constraints act on the kept mass.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior::{weights, PriorSpec, WeightSpec};

/// Sense of the quality constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintDirection {
    /// `sum w(s) Keep(s) >= (1 - delta0) sum Keep(s)`
    Geq,
    /// `sum w(s) Keep(s) <= (1 - delta0) sum Keep(s)`
    Leq,
}

/// Node of the binomial tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeIndex {
    pub r: usize,
    pub s: usize,
}

impl TreeIndex {
    pub fn new(r: usize, s: usize) -> Self {
        TreeIndex { r, s }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarKind {
    P,
    P1,
    P0,
    /// Terminal mass retained after round `R` (only valid for `r = R`).
    Keep,
}

/// Number of nodes `(r, s)` with `0 <= s <= r <= rounds`.
pub fn node_count(rounds: usize) -> usize {
    (rounds + 1) * (rounds + 2) / 2
}

#[inline]
pub fn node_id(r: usize, s: usize) -> usize {
    r * (r + 1) / 2 + s
}

/// Bijection between `(node, kind)` and LP column indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    rounds: usize,
}

impl IndexMap {
    pub fn new(rounds: usize) -> Self {
        IndexMap { rounds }
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn num_vars(&self) -> usize {
        3 * node_count(self.rounds) + self.rounds + 1
    }

    pub fn var_index(&self, idx: TreeIndex, kind: VarKind) -> Result<usize> {
        if idx.s > idx.r || idx.r > self.rounds {
            return Err(invalid(format!(
                "tree index (r={}, s={}) outside 0 <= s <= r <= {}",
                idx.r, idx.s, self.rounds
            )));
        }
        Ok(match kind {
            VarKind::P => 3 * node_id(idx.r, idx.s),
            VarKind::P1 => 3 * node_id(idx.r, idx.s) + 1,
            VarKind::P0 => 3 * node_id(idx.r, idx.s) + 2,
            VarKind::Keep => {
                if idx.r != self.rounds {
                    return Err(invalid(format!("Keep variables exist only at r = R = {}", self.rounds)));
                }
                3 * node_count(self.rounds) + idx.s
            }
        })
    }

    /// Inverse of [`IndexMap::var_index`].
    pub fn lookup(&self, var: usize) -> Result<(TreeIndex, VarKind)> {
        let tree_vars = 3 * node_count(self.rounds);
        if var >= self.num_vars() {
            return Err(invalid(format!("variable {var} out of range")));
        }
        if var >= tree_vars {
            return Ok((TreeIndex::new(self.rounds, var - tree_vars), VarKind::Keep));
        }
        let node = var / 3;
        let kind = [VarKind::P, VarKind::P1, VarKind::P0][var % 3];
        // invert node_id: largest r with r(r+1)/2 <= node
        let mut r = (((8 * node + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
        while node_id(r + 1, 0) <= node {
            r += 1;
        }
        while node_id(r, 0) > node {
            r -= 1;
        }
        Ok((TreeIndex::new(r, node - node_id(r, 0)), kind))
    }

    // Infallible helpers for in-range indices.
    pub(crate) fn p(&self, r: usize, s: usize) -> usize {
        3 * node_id(r, s)
    }
    pub(crate) fn p1(&self, r: usize, s: usize) -> usize {
        3 * node_id(r, s) + 1
    }
    pub(crate) fn p0(&self, r: usize, s: usize) -> usize {
        3 * node_id(r, s) + 2
    }
    pub(crate) fn keep(&self, s: usize) -> usize {
        3 * node_count(self.rounds) + s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Sum,
    Coupling,
    Capacity,
    Boundary,
    KeepCapacity,
    Survival,
    Quality,
    /// Fixes the action at one state (pull everything or nothing).
    Restriction,
    Other,
}

/// One sparse constraint row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub kind: RowKind,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub sense: Sense,
    pub rhs: f64,
    /// Multiplier applied to the row (both sides) before it reaches the solver.
    pub scale: f64,
}

impl Row {
    pub fn new(name: impl Into<String>, kind: RowKind, entries: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> Self {
        let (cols, vals) = entries.into_iter().unzip();
        Row { name: name.into(), kind, cols, vals, sense, rhs, scale: 1.0 }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.cols.iter().zip(&self.vals).map(|(&c, &v)| v * x[c]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.activity(x);
        match self.sense {
            Sense::Eq => (lhs - self.rhs).abs(),
            Sense::Le => (lhs - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - lhs).max(0.0),
        }
    }

    pub fn coef(&self, col: usize) -> Option<f64> {
        self.cols.iter().position(|&c| c == col).map(|i| self.vals[i])
    }
}

/// Tree data kept with an assembled problem for solution polishing and
/// action extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeData {
    pub rounds: usize,
    /// Posterior means `q(r, s)` indexed by `node_id`, for `r < R`.
    pub q: Vec<f64>,
    /// Terminal weights `w(0..=R)`.
    pub weights: Vec<f64>,
    /// Target kept mass `L / K`.
    pub survival: f64,
    pub delta0: f64,
    pub direction: ConstraintDirection,
    /// Forced actions mirrored by [`RowKind::Restriction`] rows.
    #[serde(default)]
    pub restrictions: Vec<Restriction>,
}

/// Forced action at state `(r, s)`; layer `R` refers to the keep decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restriction {
    pub r: usize,
    pub s: usize,
    pub pull: bool,
}

/// A linear program `min c'x` over `x >= 0` with sparse rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<(usize, f64)>,
    pub rows: Vec<Row>,
    pub index_map: Option<IndexMap>,
    pub tree: Option<TreeData>,
}

impl LpProblem {
    /// A problem without tree structure.
    pub fn generic(num_vars: usize, objective: Vec<(usize, f64)>, rows: Vec<Row>) -> Self {
        LpProblem { num_vars, objective, rows, index_map: None, tree: None }
    }

    pub fn eq_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.sense == Sense::Eq)
    }

    pub fn ineq_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.sense != Sense::Eq)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|&(c, v)| v * x[c]).sum()
    }

    pub fn rows_of(&self, kind: RowKind) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    /// Checks column ranges and duplicate columns.
    pub fn validate(&self) -> Result<()> {
        for (c, _) in &self.objective {
            if *c >= self.num_vars {
                return Err(invalid(format!("objective references column {c} >= {}", self.num_vars)));
            }
        }
        for row in &self.rows {
            if row.cols.len() != row.vals.len() {
                return Err(invalid(format!("row {} has mismatched cols/vals", row.name)));
            }
            let mut seen = row.cols.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid(format!("row {} repeats a column", row.name)));
            }
            if seen.last().is_some_and(|&c| c >= self.num_vars) {
                return Err(invalid(format!("row {} references a column out of range", row.name)));
            }
        }
        Ok(())
    }

    /// JSON document with the variable list and rows as `{cols, vals, sense, rhs}`.
    pub fn to_json(&self) -> serde_json::Value {
        let variables: Vec<serde_json::Value> = (0..self.num_vars)
            .map(|i| match self.index_map.map(|m| m.lookup(i)) {
                Some(Ok((idx, kind))) => serde_json::json!({"index": i, "r": idx.r, "s": idx.s, "kind": kind}),
                _ => serde_json::json!({"index": i}),
            })
            .collect();
        let (obj_cols, obj_vals): (Vec<usize>, Vec<f64>) = self.objective.iter().copied().unzip();
        serde_json::json!({
            "schema": "lp2s-lp/1",
            "sense": "minimize",
            "num_vars": self.num_vars,
            "lower_bound": 0.0,
            "variables": variables,
            "objective": {"cols": obj_cols, "vals": obj_vals},
            "rows": self.rows,
        })
    }
}

/// A fully specified LP instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpInstance {
    pub weight: WeightSpec<f64>,
    pub prior: PriorSpec<f64>,
    /// Number of arms `K`.
    pub arms: usize,
    /// Rounds per stage `R`.
    pub rounds: usize,
    /// Target expected survivors `L`.
    pub survivors: f64,
    pub delta0: f64,
    pub direction: ConstraintDirection,
}

impl LpInstance {
    /// Builds an instance; `R` and the constraint direction come from the weight spec.
    pub fn new(weight: WeightSpec<f64>, prior: PriorSpec<f64>, arms: usize, survivors: f64, delta0: f64) -> Result<Self> {
        let inst = LpInstance {
            rounds: weight.rounds(),
            direction: weight.direction(),
            weight,
            prior,
            arms,
            survivors,
            delta0,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_delta0(&self, delta0: f64) -> Self {
        LpInstance { delta0, ..self.clone() }
    }

    pub fn survival_fraction(&self) -> f64 {
        self.survivors / self.arms as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.weight.validate()?;
        self.prior.validate()?;
        if self.arms == 0 {
            return Err(invalid("K must be positive"));
        }
        if self.rounds == 0 || self.rounds != self.weight.rounds() {
            return Err(invalid("R must be positive and match the weight spec"));
        }
        if let WeightSpec::Srm { arms, .. } | WeightSpec::Fc { arms, .. } = self.weight {
            if arms != self.arms {
                return Err(invalid(format!("weight spec K={arms} differs from instance K={}", self.arms)));
            }
        }
        if !(self.survivors > 0.0) || self.survivors > self.arms as f64 {
            return Err(invalid(format!("L={} must lie in (0, K={}]", self.survivors, self.arms)));
        }
        if !(0.0..=1.0).contains(&self.delta0) {
            return Err(invalid(format!("delta0={} outside [0,1]", self.delta0)));
        }
        if self.direction != self.weight.direction() {
            return Err(invalid("constraint direction does not match the weight's monotonicity"));
        }
        Ok(())
    }

    pub fn terminal_weights(&self) -> Result<Vec<f64>> {
        weights(&self.weight, &self.prior)
    }

    /// Posterior means `q(r, s)` for `r < R`, indexed by `node_id`.
    pub fn posterior_means(&self) -> Result<Vec<f64>> {
        let mut q = Vec::with_capacity(node_count(self.rounds.saturating_sub(1)));
        for r in 0..self.rounds {
            for s in 0..=r {
                q.push(self.prior.posterior_mean(r as u64, s as u64)?);
            }
        }
        Ok(q)
    }
}

/// Assembles the LP for `inst`.
pub fn build_lp(inst: &LpInstance) -> Result<LpProblem> {
    inst.validate()?;
    let w = inst.terminal_weights()?;
    let q = inst.posterior_means()?;
    Ok(build_lp_with(inst, &q, &w))
}

/// Assembly with precomputed posterior means and terminal weights.
pub fn build_lp_with(inst: &LpInstance, q: &[f64], w: &[f64]) -> LpProblem {
    let rounds = inst.rounds;
    let map = IndexMap::new(rounds);
    let mut rows = Vec::new();

    // (a) P = P1 + P0
    for r in 0..=rounds {
        for s in 0..=r {
            rows.push(Row::new(
                format!("sum({r},{s})"),
                RowKind::Sum,
                vec![(map.p(r, s), 1.0), (map.p1(r, s), -1.0), (map.p0(r, s), -1.0)],
                Sense::Eq,
                0.0,
            ));
        }
    }
    // (b) (1-q) P1(r+1,s+1) - q P0(r+1,s) = 0
    for r in 0..rounds {
        for s in 0..=r {
            let qv = q[node_id(r, s)];
            rows.push(Row::new(
                format!("coupling({r},{s})"),
                RowKind::Coupling,
                vec![(map.p1(r + 1, s + 1), 1.0 - qv), (map.p0(r + 1, s), -qv)],
                Sense::Eq,
                0.0,
            ));
        }
    }
    // (c) P1(r+1,s+1) - q P(r,s) <= 0
    for r in 0..rounds {
        for s in 0..=r {
            let qv = q[node_id(r, s)];
            rows.push(Row::new(
                format!("capacity({r},{s})"),
                RowKind::Capacity,
                vec![(map.p1(r + 1, s + 1), 1.0), (map.p(r, s), -qv)],
                Sense::Le,
                0.0,
            ));
        }
    }
    // (d) boundary
    rows.push(Row::new("boundary:P1(0,0)", RowKind::Boundary, vec![(map.p1(0, 0), 1.0)], Sense::Eq, 1.0));
    rows.push(Row::new("boundary:P0(0,0)", RowKind::Boundary, vec![(map.p0(0, 0), 1.0)], Sense::Eq, 0.0));
    for r in 1..=rounds {
        rows.push(Row::new(format!("boundary:P1({r},0)"), RowKind::Boundary, vec![(map.p1(r, 0), 1.0)], Sense::Eq, 0.0));
    }
    for r in 1..=rounds {
        rows.push(Row::new(format!("boundary:P0({r},{r})"), RowKind::Boundary, vec![(map.p0(r, r), 1.0)], Sense::Eq, 0.0));
    }
    // kept terminal mass cannot exceed the terminal mass
    for s in 0..=rounds {
        rows.push(Row::new(
            format!("keep({s})"),
            RowKind::KeepCapacity,
            vec![(map.keep(s), 1.0), (map.p(rounds, s), -1.0)],
            Sense::Le,
            0.0,
        ));
    }
    // (e) survival
    let frac = inst.survival_fraction();
    let scale = 1.0 / frac;
    let mut survival = Row::new(
        "survival",
        RowKind::Survival,
        (0..=rounds).map(|s| (map.keep(s), 1.0)).collect(),
        Sense::Eq,
        frac,
    );
    survival.scale = scale;
    rows.push(survival);
    // (f) quality
    let mut quality = Row::new(
        "quality",
        RowKind::Quality,
        (0..=rounds).map(|s| (map.keep(s), w[s] - (1.0 - inst.delta0))).collect(),
        match inst.direction {
            ConstraintDirection::Geq => Sense::Ge,
            ConstraintDirection::Leq => Sense::Le,
        },
        0.0,
    );
    quality.scale = scale;
    rows.push(quality);

    let objective = (1..=rounds).flat_map(|r| (0..=r).map(move |s| (map.p(r, s), 1.0))).collect();

    LpProblem {
        num_vars: map.num_vars(),
        objective,
        rows,
        index_map: Some(map),
        tree: Some(TreeData {
            rounds,
            q: q.to_vec(),
            weights: w.to_vec(),
            survival: frac,
            delta0: inst.delta0,
            direction: inst.direction,
            restrictions: Vec::new(),
        }),
    }
}

/// Outcome of [`necessary_feasibility_check`].
#[derive(Clone, Debug, PartialEq)]
pub enum Precheck {
    Ok,
    Fails(String),
}

/// Cheap necessary conditions for feasibility. Passing does not imply feasibility.
pub fn necessary_feasibility_check(inst: &LpInstance) -> Result<Precheck> {
    inst.validate()?;
    let w = inst.terminal_weights()?;
    Ok(precheck_with(inst, &w))
}

/// Absorbs rounding in `w(R)` when `delta0` is set to exactly `1 - w(R)`.
pub(crate) const PRECHECK_SLACK: f64 = 1e-12;

pub(crate) fn precheck_with(inst: &LpInstance, w: &[f64]) -> Precheck {
    let target = 1.0 - inst.delta0;
    let rounds = inst.rounds;
    let top = w[rounds];
    // margins oriented so that the row asks for a non-negative sum
    let sign = match inst.direction {
        ConstraintDirection::Geq => 1.0,
        ConstraintDirection::Leq => -1.0,
    };
    if sign * (top - target) < -PRECHECK_SLACK {
        let op = if sign > 0.0 { "<" } else { ">" };
        return Precheck::Fails(format!("w(R) {op} 1-delta0 (w(R)={top}, 1-delta0={target})"));
    }
    // Kept mass at s = R is at most E[mu^R]; the rest sits at states no better
    // than the best s < R.
    let p = inst.survival_fraction();
    let m = inst.prior.moment(rounds as u64);
    if p > m + PRECHECK_SLACK {
        let low = w[..rounds].iter().map(|&x| sign * (x - target)).fold(f64::NEG_INFINITY, f64::max);
        let best = m * sign * (top - target) + (p - m) * low;
        if best < -PRECHECK_SLACK * p {
            return Precheck::Fails("pure-success mass insufficient".into());
        }
    }
    Precheck::Ok
}

/// Tolerance-level LP feasibility probe.
pub(crate) fn feasible(problem: &LpProblem) -> Result<bool> {
    match crate::lp_solve::solve_raw(problem) {
        Ok(_) => Ok(true),
        Err(Error::Infeasible(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Smallest `delta0` for which the (GEQ-direction) LP is feasible, by bisection
/// with a full LP solve per probe.
pub fn min_feasible_delta0(inst: &LpInstance, tol: f64) -> Result<f64> {
    if inst.direction != ConstraintDirection::Geq {
        return Err(invalid("min_feasible_delta0 applies to non-decreasing weights (PAC, FC)"));
    }
    tightest_feasible_delta0(inst, tol)
}

/// The most demanding feasible `delta0`: the smallest one for GEQ rows, the
/// largest one for LEQ rows (where a larger `delta0` is the stricter bound).
pub fn tightest_feasible_delta0(inst: &LpInstance, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid("bisection tolerance must be positive"));
    }
    inst.with_delta0(0.0).validate()?;
    let w = inst.terminal_weights()?;
    let q = inst.posterior_means()?;
    let probe = |d: f64| {
        let at = inst.with_delta0(d);
        match precheck_with(&at, &w) {
            Precheck::Ok => feasible(&build_lp_with(&at, &q, &w)),
            Precheck::Fails(_) => Ok(false),
        }
    };

    match inst.direction {
        ConstraintDirection::Geq => {
            if !probe(1.0)? {
                return Err(Error::Infeasible("LP infeasible even at delta0 = 1".into()));
            }
            if probe(0.0)? {
                return Ok(0.0);
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if probe(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        }
        ConstraintDirection::Leq => {
            if !probe(0.0)? {
                return Err(Error::Infeasible("LP infeasible even at delta0 = 0".into()));
            }
            if probe(1.0)? {
                return Ok(1.0);
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if probe(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(lo)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pac(rounds: usize, mu0: f64, arms: usize, survivors: f64, delta0: f64) -> LpInstance {
        LpInstance::new(
            WeightSpec::Pac { mu0, rounds },
            PriorSpec::beta(1.0, 1.0).unwrap(),
            arms,
            survivors,
            delta0,
        )
        .unwrap()
    }

    #[test]
    fn var_index_round_trip() {
        let map = IndexMap::new(5);
        for var in 0..map.num_vars() {
            let (idx, kind) = map.lookup(var).unwrap();
            assert_eq!(map.var_index(idx, kind).unwrap(), var);
        }
        let i = map.var_index(TreeIndex::new(0, 0), VarKind::P1).unwrap();
        assert_eq!(map.lookup(i).unwrap(), (TreeIndex::new(0, 0), VarKind::P1));
        assert!(matches!(map.var_index(TreeIndex::new(3, 4), VarKind::P), Err(Error::InvalidArgument(_))));
        assert!(map.var_index(TreeIndex::new(6, 0), VarKind::P).is_err());
        assert!(map.var_index(TreeIndex::new(4, 0), VarKind::Keep).is_err());
    }

    #[test]
    fn var_index_distinct_for_r2() {
        let map = IndexMap::new(2);
        let mut seen = std::collections::HashSet::new();
        for r in 0..=2 {
            for s in 0..=r {
                for kind in [VarKind::P, VarKind::P1, VarKind::P0] {
                    assert!(seen.insert(map.var_index(TreeIndex::new(r, s), kind).unwrap()));
                }
            }
        }
        assert_eq!(seen.len(), 18);
    }

    #[test]
    fn r1_row_and_variable_counts() {
        let lp = build_lp(&pac(1, 0.5, 10, 2.0, 0.5)).unwrap();
        // 9 tree variables + 2 keep variables
        assert_eq!(lp.num_vars, 9 + 2);
        let count = |k| lp.rows_of(k).count();
        assert_eq!(count(RowKind::Sum), 3);
        assert_eq!(count(RowKind::Coupling), 1);
        assert_eq!(count(RowKind::Capacity), 1);
        assert_eq!(count(RowKind::Boundary), 4);
        assert_eq!(count(RowKind::KeepCapacity), 2);
        assert_eq!(count(RowKind::Survival), 1);
        assert_eq!(count(RowKind::Quality), 1);
        lp.validate().unwrap();
    }

    #[test]
    fn variable_count_formula() {
        for rounds in [1usize, 2, 7, 40] {
            let map = IndexMap::new(rounds);
            assert_eq!(map.num_vars(), 3 * (rounds + 1) * (rounds + 2) / 2 + rounds + 1);
        }
    }

    #[test]
    fn survival_row_has_unit_coefficients() {
        let inst = pac(4, 0.5, 20, 4.0, 0.3);
        let lp = build_lp(&inst).unwrap();
        let map = lp.index_map.unwrap();
        let row = lp.rows_of(RowKind::Survival).next().unwrap();
        for s in 0..=4 {
            assert_eq!(row.coef(map.keep(s)), Some(1.0));
        }
        assert_eq!(row.rhs, 0.2);
        assert_eq!(row.scale, 5.0);
    }

    #[test]
    fn quality_row_weight_on_top_state() {
        let inst = pac(2, 0.5, 100, 10.0, 0.125);
        let lp = build_lp(&inst).unwrap();
        let map = lp.index_map.unwrap();
        let tree = lp.tree.as_ref().unwrap();
        assert!((tree.weights[2] - 0.875).abs() < 1e-13);
        let row = lp.rows_of(RowKind::Quality).next().unwrap();
        assert!((row.coef(map.keep(2)).unwrap() - (0.875 - 0.875)).abs() < 1e-13);
        assert_eq!(row.sense, Sense::Ge);
    }

    #[test]
    fn coupling_and_capacity_imply_p0_capacity() {
        // (1-q) P1' = q P0' and P1' <= q P  =>  P0' <= (1-q) P
        let inst = LpInstance::new(
            WeightSpec::Fc { arms: 9, rounds: 6 },
            PriorSpec::beta(1.0, 3.0).unwrap(),
            9,
            2.0,
            0.9,
        )
        .unwrap();
        let lp = build_lp(&inst).unwrap();
        let map = lp.index_map.unwrap();
        let coupling: Vec<&Row> = lp.rows_of(RowKind::Coupling).collect();
        let capacity: Vec<&Row> = lp.rows_of(RowKind::Capacity).collect();
        let mut k = 0;
        for r in 0..6 {
            for s in 0..=r {
                let c = coupling[k];
                let cap = capacity[k];
                let a = c.coef(map.p1(r + 1, s + 1)).unwrap();
                let b = -c.coef(map.p0(r + 1, s)).unwrap();
                let q = -cap.coef(map.p(r, s)).unwrap();
                // P0' = (a/b) P1' <= (a/b) q P = (1-q) P
                assert!((a / b * q - (1.0 - q)).abs() < 1e-14);
                k += 1;
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let inst = pac(6, 0.6, 50, 5.0, 0.2);
        let a = build_lp(&inst).unwrap();
        let b = build_lp(&inst).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().to_string(), b.to_json().to_string());
    }

    #[test]
    fn json_schema_shape() {
        let lp = build_lp(&pac(1, 0.5, 10, 2.0, 0.5)).unwrap();
        let v = lp.to_json();
        assert_eq!(v["num_vars"], 11);
        assert_eq!(v["variables"].as_array().unwrap().len(), 11);
        let row = &v["rows"][0];
        for key in ["cols", "vals", "sense", "rhs"] {
            assert!(row.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["variables"][9]["kind"], "Keep");
    }

    #[test]
    fn precheck_examples() {
        let fails = necessary_feasibility_check(&pac(2, 0.5, 100, 10.0, 0.05)).unwrap();
        assert!(matches!(fails, Precheck::Fails(ref m) if m.starts_with("w(R) < 1-delta0")));
        assert_eq!(necessary_feasibility_check(&pac(2, 0.5, 100, 10.0, 0.2)).unwrap(), Precheck::Ok);
        let srm = LpInstance::new(
            WeightSpec::Srm { arms: 50, rounds: 5 },
            PriorSpec::beta(1.0, 1.0).unwrap(),
            50,
            5.0,
            0.0,
        )
        .unwrap();
        assert_eq!(necessary_feasibility_check(&srm).unwrap(), Precheck::Ok);
        // L/K above E[mu^R] with delta0 pinned at 1 - w(R)
        let tight = pac(2, 0.5, 10, 5.0, 0.125);
        assert_eq!(
            necessary_feasibility_check(&tight).unwrap(),
            Precheck::Fails("pure-success mass insufficient".into())
        );
    }

    #[test]
    fn min_delta0_examples() {
        let d = min_feasible_delta0(&pac(2, 0.5, 100, 10.0, 0.0), 1e-6).unwrap();
        assert!((d - 0.125).abs() < 1e-6, "{d}");
        let fc = LpInstance::new(
            WeightSpec::Fc { arms: 2, rounds: 1 },
            PriorSpec::beta(1.0, 1.0).unwrap(),
            2,
            1.0,
            0.0,
        )
        .unwrap();
        let d = min_feasible_delta0(&fc, 1e-6).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-6, "{d}");
        assert!(min_feasible_delta0(&fc, 0.0).is_err());
    }

    #[test]
    fn min_delta0_rejects_leq() {
        let srm = LpInstance::new(
            WeightSpec::Srm { arms: 50, rounds: 5 },
            PriorSpec::beta(1.0, 1.0).unwrap(),
            50,
            5.0,
            0.0,
        )
        .unwrap();
        assert!(min_feasible_delta0(&srm, 1e-4).is_err());
        // tightest LEQ value equals 1 - w(R) when the pure-success path carries enough mass
        let w = srm.terminal_weights().unwrap();
        let d = tightest_feasible_delta0(&srm, 1e-6).unwrap();
        assert!((d - (1.0 - w[5])).abs() < 1e-6, "{d} vs {}", 1.0 - w[5]);
    }
}
