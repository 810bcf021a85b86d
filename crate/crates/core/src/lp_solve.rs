//! LP solving with a duality certificate, action extraction, threshold
//! structure, threshold repair and a brute-force threshold oracle.
//!
//! Tree LPs are solved by column generation over deterministic policies (see
//! `decomp`); the Lagrangian bound of the final prices is the dual objective.
//! Other LPs go to `microlp` (sparse revised simplex) and are certified by
//! solving the explicit dual. Tree points are polished by reading off the
//! induced actions and propagating them exactly.

use std::fmt::Write as _;

use log::{debug, warn};
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::decomp;
use crate::error::{invalid, Error, Result};
use crate::lp_model::{
    node_count, node_id, precheck_with, ConstraintDirection, IndexMap, LpInstance, LpProblem, Precheck, Restriction, Row, RowKind,
    PRECHECK_SLACK,
    Sense, TreeData,
};

/// Tolerances of [`solve_lp`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { feasibility_tol: 1e-8, gap_tol: 1e-7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub max_eq_residual: f64,
    pub max_ineq_violation: f64,
    pub optimality_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

impl LpSolution {
    /// Placeholder record for an infeasible instance, for reporting.
    pub fn infeasible(reason: impl Into<String>) -> Self {
        LpSolution {
            status: LpStatus::Infeasible,
            values: Vec::new(),
            objective: f64::NAN,
            dual_objective: f64::NAN,
            max_eq_residual: f64::NAN,
            max_ineq_violation: f64::NAN,
            optimality_gap: f64::NAN,
            reason: Some(reason.into()),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("solution serializes");
        v["schema"] = "lp2s-solution/1".into();
        v
    }
}

/// `min c'x, x >= 0` subject to scaled sparse rows, as handed to the simplex.
struct StandardLp {
    cost: Vec<f64>,
    rows: Vec<(Vec<(usize, f64)>, Sense, f64)>,
}

impl StandardLp {
    fn direct(problem: &LpProblem) -> Self {
        let mut cost = vec![0.0; problem.num_vars];
        for &(c, v) in &problem.objective {
            cost[c] += v;
        }
        let rows = problem
            .rows
            .iter()
            .map(|row| {
                let entries = row.cols.iter().zip(&row.vals).map(|(&c, &v)| (c, v * row.scale)).collect();
                (entries, row.sense, row.rhs * row.scale)
            })
            .collect();
        StandardLp { cost, rows }
    }

    fn primal(&self) -> Result<(Vec<f64>, f64)> {
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = self.cost.iter().map(|&c| lp.add_var(c, (0.0, f64::INFINITY))).collect();
        for (entries, sense, rhs) in &self.rows {
            let expr: Vec<(microlp::Variable, f64)> = entries.iter().map(|&(c, v)| (vars[c], v)).collect();
            lp.add_constraint(expr, op(*sense), *rhs);
        }
        match run_microlp(&lp)? {
            Ok(sol) => Ok((vars.iter().map(|&v| sol.var_value_raw(v)).collect(), sol.objective())),
            Err(microlp::Error::Infeasible) => Err(Error::Infeasible("simplex phase 1 found no feasible point".into())),
            Err(microlp::Error::Unbounded) => Err(Error::SolverFailure("primal reported unbounded".into())),
            Err(e) => Err(Error::SolverFailure(format!("simplex: {e}"))),
        }
    }

    /// Optimal value of the dual `max b'y, A'y <= c` with sign-constrained
    /// multipliers, each split into nonnegative parts.
    fn dual(&self) -> Result<f64> {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let mut columns: Vec<Vec<(microlp::Variable, f64)>> = vec![Vec::new(); self.cost.len()];
        let mut parts = Vec::new();
        for (entries, sense, rhs) in &self.rows {
            let signs: &[f64] = match sense {
                Sense::Eq => &[1.0, -1.0],
                Sense::Le => &[-1.0],
                Sense::Ge => &[1.0],
            };
            for &sg in signs {
                let var = lp.add_var(sg * rhs, (0.0, f64::INFINITY));
                parts.push((sg * rhs, var));
                for &(c, v) in entries {
                    columns[c].push((var, sg * v));
                }
            }
        }
        for (col, &c) in columns.into_iter().zip(&self.cost) {
            if col.is_empty() {
                if c < 0.0 {
                    return Err(Error::SolverFailure("free column with negative cost".into()));
                }
                continue;
            }
            lp.add_constraint(col, ComparisonOp::Le, c);
        }
        let sol = run_microlp(&lp)?.map_err(|e| Error::SolverFailure(format!("dual solve failed: {e}")))?;
        let value: f64 = parts.iter().map(|&(b, var)| b * sol.var_value_raw(var)).sum();
        if !value.is_finite() {
            return Err(Error::SolverFailure("dual objective is not finite".into()));
        }
        Ok(value)
    }
}

fn op(sense: Sense) -> ComparisonOp {
    match sense {
        Sense::Eq => ComparisonOp::Eq,
        Sense::Le => ComparisonOp::Le,
        Sense::Ge => ComparisonOp::Ge,
    }
}

/// Runs the simplex to completion. Internal breakdowns become [`Error::SolverFailure`].
fn run_microlp(lp: &Problem) -> Result<std::result::Result<microlp::Solution, microlp::Error>> {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| lp.solve()))
        .map_err(|_| Error::SolverFailure("simplex panicked".into()))?;
    match outcome {
        Ok(out) => match out.into_solution() {
            Ok(sol) => Ok(Ok(sol)),
            Err(_) => Err(Error::SolverFailure("simplex interrupted".into())),
        },
        Err(microlp::Error::InternalError(msg)) => Err(Error::SolverFailure(format!("simplex breakdown: {msg}"))),
        Err(e) => Ok(Err(e)),
    }
}

/// Tree problems whose rows are all standard (or restrictions) go to the
/// decomposition solver.
fn tree_form(problem: &LpProblem) -> Option<(&TreeData, &IndexMap)> {
    let (tree, map) = (problem.tree.as_ref()?, problem.index_map.as_ref()?);
    let standard = problem.rows.iter().all(|r| r.kind != RowKind::Other);
    let n_restrict = problem.rows.iter().filter(|r| r.kind == RowKind::Restriction).count();
    (standard && tree.rounds >= 1 && n_restrict >= tree.restrictions.len()).then_some((tree, map))
}

/// Primal point, its objective and a lower bound when one comes for free.
struct RawSolve {
    values: Vec<f64>,
    objective: f64,
    bound: Option<f64>,
}

fn solve_core(problem: &LpProblem) -> Result<RawSolve> {
    match tree_form(problem) {
        Some((tree, map)) => {
            let d = decomp::solve_tree(tree)?;
            Ok(RawSolve { values: d.flow.to_values(map), objective: d.objective, bound: Some(d.bound) })
        }
        None => {
            let (values, objective) = StandardLp::direct(problem).primal()?;
            Ok(RawSolve { values, objective, bound: None })
        }
    }
}

/// Raw primal solve: unpolished point and objective.
pub(crate) fn solve_raw(problem: &LpProblem) -> Result<(Vec<f64>, f64)> {
    solve_core(problem).map(|r| (r.values, r.objective))
}

/// Largest equality residual and largest inequality violation on unscaled rows.
pub fn residuals(problem: &LpProblem, x: &[f64]) -> (f64, f64) {
    let mut eq: f64 = 0.0;
    let mut ineq: f64 = 0.0;
    for row in &problem.rows {
        let v = row.violation(x);
        match row.sense {
            Sense::Eq => eq = eq.max(v),
            _ => ineq = ineq.max(v),
        }
    }
    (eq, ineq)
}

/// Probability flow through the tree under given actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    /// `P`, `P1`, `P0` indexed by `node_id`.
    pub p: Vec<f64>,
    pub p1: Vec<f64>,
    pub p0: Vec<f64>,
    pub keep: Vec<f64>,
    /// Expected stage-one pulls per arm.
    pub cost: f64,
    /// Kept mass.
    pub survival: f64,
    /// `sum_s (w(s) - (1 - delta0)) Keep(s)`.
    pub quality: f64,
}

impl Flow {
    pub fn to_values(&self, map: &IndexMap) -> Vec<f64> {
        let rounds = map.rounds();
        let mut x = vec![0.0; map.num_vars()];
        for r in 0..=rounds {
            for s in 0..=r {
                let n = node_id(r, s);
                x[map.p(r, s)] = self.p[n];
                x[map.p1(r, s)] = self.p1[n];
                x[map.p0(r, s)] = self.p0[n];
            }
        }
        for s in 0..=rounds {
            x[map.keep(s)] = self.keep[s];
        }
        x
    }

    /// True when the quality margin has the sign required by `direction`.
    pub fn quality_ok(&self, direction: ConstraintDirection, tol: f64) -> bool {
        match direction {
            ConstraintDirection::Geq => self.quality >= -tol,
            ConstraintDirection::Leq => self.quality <= tol,
        }
    }
}

/// Propagates root mass 1 through the tree. `action(r, s)` is applied at
/// `r < R`; at `r = R` it is the keep probability.
pub fn propagate(tree: &TreeData, action: impl Fn(usize, usize) -> f64) -> Flow {
    let rounds = tree.rounds;
    let n = node_count(rounds);
    let (mut p, mut p1, mut p0) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    p[0] = 1.0;
    p1[0] = 1.0;
    let mut cost = 0.0;
    for r in 0..rounds {
        for s in 0..=r {
            let mass = p[node_id(r, s)];
            if mass == 0.0 {
                continue;
            }
            let q = tree.q[node_id(r, s)];
            let pulled = action(r, s) * mass;
            p1[node_id(r + 1, s + 1)] += q * pulled;
            p0[node_id(r + 1, s)] += (1.0 - q) * pulled;
        }
        for s in 0..=r + 1 {
            let k = node_id(r + 1, s);
            p[k] = p1[k] + p0[k];
            cost += p[k];
        }
    }
    let keep: Vec<f64> = (0..=rounds).map(|s| action(rounds, s) * p[node_id(rounds, s)]).collect();
    let survival = keep.iter().sum();
    let quality = keep.iter().zip(&tree.weights).map(|(k, w)| (w - (1.0 - tree.delta0)) * k).sum();
    Flow { p, p1, p0, keep, cost, survival, quality }
}

/// Raw action ratios at `(r, s)` from a point: capacity form and complement form.
fn action_forms(tree: &TreeData, map: &IndexMap, x: &[f64], r: usize, s: usize) -> (Option<f64>, Option<f64>) {
    let mass = x[map.p(r, s)];
    let q = tree.q[node_id(r, s)];
    let one = (q > 0.0).then(|| x[map.p1(r + 1, s + 1)] / (q * mass));
    let zero = (q < 1.0).then(|| x[map.p0(r + 1, s)] / ((1.0 - q) * mass));
    (one, zero)
}

fn reach_eps(tree: &TreeData) -> f64 {
    1e-10 * tree.survival
}

/// Re-derives a point from the actions of `x`, propagated exactly and rescaled at
/// the root so the survival row holds exactly.
fn polish(tree: &TreeData, map: &IndexMap, x: &[f64]) -> Option<Vec<f64>> {
    let eps = reach_eps(tree);
    let rounds = tree.rounds;
    let actions = |r: usize, s: usize| -> f64 {
        let mass = x[map.p(r, s)];
        if mass <= eps {
            return 0.0;
        }
        let a = if r == rounds {
            x[map.keep(s)] / mass
        } else {
            match action_forms(tree, map, x, r, s) {
                (Some(a), _) | (None, Some(a)) => a,
                (None, None) => 0.0,
            }
        };
        a.clamp(0.0, 1.0)
    };
    let flow = propagate(tree, actions);
    if !(flow.survival > 0.0) {
        return None;
    }
    let c = tree.survival / flow.survival;
    let mut values = flow.to_values(map);
    // everything below the root is linear in a(0,0)
    for (i, v) in values.iter_mut().enumerate() {
        if i >= 3 {
            *v *= c;
        }
    }
    Some(values)
}

/// Solves `problem` to certified optimality.
///
/// Returns [`Error::Infeasible`] with a reason when no feasible point exists and
/// [`Error::SolverFailure`] when the certificate cannot reach the tolerances.
pub fn solve_lp(problem: &LpProblem, opts: &SolveOptions) -> Result<LpSolution> {
    problem.validate()?;
    let RawSolve { values: raw, objective: raw_obj, bound } = match solve_core(problem) {
        Ok(v) => v,
        Err(Error::Infeasible(msg)) => {
            let reason = match problem.tree.as_ref().map(tree_precheck) {
                Some(Precheck::Fails(r)) => r,
                _ => msg,
            };
            return Err(Error::Infeasible(reason));
        }
        Err(e) => return Err(e),
    };
    let mut values = raw.iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
    if let (Some(tree), Some(map)) = (&problem.tree, &problem.index_map) {
        if let Some(polished) = polish(tree, map, &raw) {
            let (e0, i0) = residuals(problem, &values);
            let (e1, i1) = residuals(problem, &polished);
            debug!("polish: raw residuals ({e0:.2e}, {i0:.2e}) -> ({e1:.2e}, {i1:.2e})");
            if e1.max(i1) <= e0.max(i0).max(opts.feasibility_tol) {
                values = polished;
            }
        }
    }
    let objective = problem.objective_value(&values);
    let dual_objective = match bound {
        Some(b) => b,
        None => StandardLp::direct(problem).dual()?,
    };
    let optimality_gap = (objective - dual_objective).abs() / objective.abs().max(1.0);
    let (max_eq_residual, max_ineq_violation) = residuals(problem, &values);
    debug!(
        "solve: primal {raw_obj:.12} polished {objective:.12} dual {dual_objective:.12} gap {optimality_gap:.2e}"
    );
    if !(max_eq_residual <= opts.feasibility_tol && max_ineq_violation <= opts.feasibility_tol) {
        return Err(Error::SolverFailure(format!(
            "residuals ({max_eq_residual:.3e}, {max_ineq_violation:.3e}) exceed {:.1e}",
            opts.feasibility_tol
        )));
    }
    if !(optimality_gap <= opts.gap_tol) {
        return Err(Error::SolverFailure(format!(
            "duality gap {optimality_gap:.3e} exceeds {:.1e} (primal {objective}, dual {dual_objective})",
            opts.gap_tol
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        values,
        objective,
        dual_objective,
        max_eq_residual,
        max_ineq_violation,
        optimality_gap,
        reason: None,
    })
}

fn tree_precheck(tree: &TreeData) -> Precheck {
    let top = tree.weights[tree.rounds];
    let target = 1.0 - tree.delta0;
    let fails = match tree.direction {
        ConstraintDirection::Geq => top < target - PRECHECK_SLACK,
        ConstraintDirection::Leq => top > target + PRECHECK_SLACK,
    };
    if fails {
        let op = if tree.direction == ConstraintDirection::Geq { "<" } else { ">" };
        Precheck::Fails(format!("w(R) {op} 1-delta0 (w(R)={top}, 1-delta0={target})"))
    } else {
        Precheck::Ok
    }
}

/// Induced actions. Layer `r < R` holds the pull probability applied in round
/// `r + 1`; layer `R` holds the probability of keeping the arm for stage two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    pub rounds: usize,
    /// Indexed by `node_id(r, s)` for `r <= R`.
    pub action: Vec<f64>,
    pub reach: Vec<f64>,
}

impl ActionTable {
    pub fn new(rounds: usize, action: Vec<f64>, reach: Vec<f64>) -> Result<Self> {
        let n = node_count(rounds);
        if action.len() != n || reach.len() != n {
            return Err(invalid(format!("action table for R={rounds} needs {n} entries")));
        }
        if action.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid("actions must lie in [0,1]"));
        }
        Ok(ActionTable { rounds, action, reach })
    }

    /// Table with the same action everywhere (reach computed from a unit flow is
    /// not available here, so reach is set to 1).
    pub fn constant(rounds: usize, a: f64) -> Result<Self> {
        let n = node_count(rounds);
        Self::new(rounds, vec![a; n], vec![1.0; n])
    }

    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.action[node_id(r, s)]
    }

    pub fn reach_at(&self, r: usize, s: usize) -> f64 {
        self.reach[node_id(r, s)]
    }

    pub fn keep(&self, s: usize) -> f64 {
        self.get(self.rounds, s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,s,action,reach\n");
        for r in 0..=self.rounds {
            for s in 0..=r {
                let _ = writeln!(out, "{r},{s},{},{}", self.get(r, s), self.reach_at(r, s));
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<_> = (0..=self.rounds)
            .flat_map(|r| {
                (0..=r).map(move |s| serde_json::json!({"r": r, "s": s, "action": self.get(r, s), "reach": self.reach_at(r, s)}))
            })
            .collect();
        serde_json::json!({"schema": "lp2s-actions/1", "rounds": self.rounds, "entries": rows})
    }
}

/// Reads the induced actions off an optimal solution.
pub fn extract_actions(sol: &LpSolution, problem: &LpProblem) -> Result<ActionTable> {
    if sol.status != LpStatus::Optimal {
        return Err(invalid("action extraction needs an optimal solution"));
    }
    let (tree, map) = match (&problem.tree, &problem.index_map) {
        (Some(t), Some(m)) => (t, m),
        _ => return Err(invalid("problem carries no tree structure")),
    };
    let x = &sol.values;
    let eps = reach_eps(tree);
    let rounds = tree.rounds;
    let mut action = vec![0.0; node_count(rounds)];
    let mut reach = vec![0.0; node_count(rounds)];
    for r in 0..=rounds {
        for s in 0..=r {
            let k = node_id(r, s);
            let mass = x[map.p(r, s)];
            reach[k] = mass;
            if mass <= eps {
                continue;
            }
            let a = if r == rounds {
                x[map.keep(s)] / mass
            } else {
                match action_forms(tree, map, x, r, s) {
                    (Some(a1), Some(a0)) => {
                        let diff = (a1 - a0).abs();
                        if diff > 1e-4 {
                            return Err(Error::ExtractionInconsistency { r, s, diff });
                        }
                        if diff > 1e-6 {
                            warn!("action forms disagree at ({r},{s}) by {diff:.2e}");
                        }
                        a1
                    }
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => 0.0,
                }
            };
            action[k] = a.clamp(0.0, 1.0);
        }
    }
    Ok(ActionTable { rounds, action, reach })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLevel {
    pub threshold: usize,
    pub frac: f64,
}

/// Threshold form: at layer `r`, `a = 0` for `s < threshold`, `a = frac` at
/// `s = threshold`, `a = 1` above. Layer `R` is the keep decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub rounds: usize,
    pub levels: Vec<ThresholdLevel>,
}

impl ThresholdPolicy {
    pub fn action(&self, r: usize, s: usize) -> f64 {
        let lvl = self.levels[r];
        match s.cmp(&lvl.threshold) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => lvl.frac,
            std::cmp::Ordering::Greater => 1.0,
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.levels.windows(2).all(|w| w[0].threshold <= w[1].threshold)
    }

    pub fn evaluate(&self, tree: &TreeData) -> Flow {
        propagate(tree, |r, s| self.action(r, s))
    }

    /// Action table with reach from the exact flow of this policy.
    pub fn to_actions(&self, tree: &TreeData) -> ActionTable {
        let flow = self.evaluate(tree);
        let n = node_count(self.rounds);
        let action = (0..=self.rounds).flat_map(|r| (0..=r).map(move |s| (r, s))).map(|(r, s)| self.action(r, s)).collect();
        ActionTable { rounds: self.rounds, action, reach: flow.p[..n].to_vec() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,threshold,frac\n");
        for (r, lvl) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "{r},{},{}", lvl.threshold, lvl.frac);
        }
        out
    }
}

/// Reachable states whose actions break the threshold pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonThresholdReport {
    pub offending: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdOutcome {
    Threshold(ThresholdPolicy),
    NotThreshold(NonThresholdReport),
}

/// Reachability cutoff for tables: relative to the root-level mass scale.
fn table_eps(actions: &ActionTable) -> f64 {
    let top: f64 = (0..=actions.rounds).map(|s| actions.keep(s) * actions.reach_at(actions.rounds, s)).sum();
    if top > 0.0 {
        1e-10 * top
    } else {
        0.0
    }
}

/// Recognises threshold structure on reachable states.
pub fn extract_threshold(actions: &ActionTable, tol: f64) -> ThresholdOutcome {
    let eps = table_eps(actions);
    let mut levels = Vec::with_capacity(actions.rounds + 1);
    let mut offending = Vec::new();
    for r in 0..=actions.rounds {
        let reachable: Vec<usize> = (0..=r).filter(|&s| actions.reach_at(r, s) > eps).collect();
        let first = reachable.iter().copied().find(|&s| actions.get(r, s) > tol);
        let level = match first {
            None => ThresholdLevel { threshold: r, frac: 0.0 },
            Some(t) => {
                let a = actions.get(r, t);
                for &s in reachable.iter().filter(|&&s| s > t) {
                    let v = actions.get(r, s);
                    if v < 1.0 - tol {
                        offending.push((r, s, v));
                    }
                }
                ThresholdLevel { threshold: t, frac: if a >= 1.0 - tol { 1.0 } else { a } }
            }
        };
        levels.push(level);
    }
    let policy = ThresholdPolicy { rounds: actions.rounds, levels };
    if offending.is_empty() && !policy.is_monotone() {
        for w in 1..policy.levels.len() {
            if policy.levels[w].threshold < policy.levels[w - 1].threshold {
                let t = policy.levels[w].threshold;
                offending.push((w, t, actions.get(w, t)));
            }
        }
    }
    if offending.is_empty() {
        ThresholdOutcome::Threshold(policy)
    } else {
        ThresholdOutcome::NotThreshold(NonThresholdReport { offending })
    }
}

/// Rows forcing threshold `t[r]` at every layer, leaving `(r, t[r])` free.
fn threshold_rows(tree: &TreeData, map: &IndexMap, t: &[usize]) -> (Vec<Row>, Vec<Restriction>) {
    let rounds = tree.rounds;
    let mut rows = Vec::new();
    let mut fixed = Vec::new();
    for r in 0..=rounds {
        for s in 0..=r {
            if s == t[r] {
                continue;
            }
            fixed.push(Restriction { r, s, pull: s > t[r] });
            let name = format!("threshold({r},{s})");
            if r == rounds {
                let entries =
                    if s < t[r] { vec![(map.keep(s), 1.0)] } else { vec![(map.keep(s), 1.0), (map.p(r, s), -1.0)] };
                rows.push(Row::new(name, RowKind::Restriction, entries, Sense::Eq, 0.0));
            } else {
                let q = tree.q[node_id(r, s)];
                let entries = if s < t[r] {
                    vec![(map.p1(r + 1, s + 1), 1.0), (map.p0(r + 1, s), 1.0)]
                } else {
                    vec![(map.p1(r + 1, s + 1), 1.0), (map.p(r, s), -q)]
                };
                rows.push(Row::new(name, RowKind::Restriction, entries, Sense::Eq, 0.0));
            }
        }
    }
    (rows, fixed)
}

/// Per-layer threshold carrying the same pulled mass as `actions`, filled from
/// the top state down.
fn mass_equivalent_thresholds(actions: &ActionTable) -> Vec<usize> {
    (0..=actions.rounds)
        .map(|r| {
            let pulled: f64 = (0..=r).map(|s| actions.get(r, s) * actions.reach_at(r, s)).sum();
            let mut acc = 0.0;
            for s in (0..=r).rev() {
                acc += actions.reach_at(r, s);
                if acc >= pulled * (1.0 - 1e-12) {
                    return s;
                }
            }
            0
        })
        .collect()
}

fn solve_restricted(
    problem: &LpProblem,
    tree: &TreeData,
    map: &IndexMap,
    t: &[usize],
    opts: &SolveOptions,
) -> Option<(ThresholdPolicy, f64)> {
    let mut restricted = problem.clone();
    let (rows, fixed) = threshold_rows(tree, map, t);
    restricted.rows.retain(|r| r.kind != RowKind::Restriction);
    restricted.rows.extend(rows);
    if let Some(tree) = restricted.tree.as_mut() {
        tree.restrictions = fixed;
    }
    let sol = match solve_lp(&restricted, opts) {
        Ok(sol) => sol,
        Err(e) => {
            debug!("restricted solve at {t:?}: {e}");
            return None;
        }
    };
    let actions = extract_actions(&sol, &restricted).ok()?;
    let policy = match extract_threshold(&actions, 1e-6) {
        ThresholdOutcome::Threshold(p) => p,
        ThresholdOutcome::NotThreshold(_) => return None,
    };
    let flow = policy.evaluate(tree);
    if (flow.survival - tree.survival).abs() > opts.feasibility_tol || !flow.quality_ok(tree.direction, opts.feasibility_tol)
    {
        return None;
    }
    Some((policy, flow.cost))
}

/// Finds a threshold policy whose objective matches `sol` within `rel_tol`.
pub fn threshold_repair(sol: &LpSolution, problem: &LpProblem, rel_tol: f64) -> Result<ThresholdPolicy> {
    let actions = extract_actions(sol, problem)?;
    if let ThresholdOutcome::Threshold(p) = extract_threshold(&actions, 1e-6) {
        return Ok(p);
    }
    let (tree, map) = match (&problem.tree, &problem.index_map) {
        (Some(t), Some(m)) => (t, m),
        _ => return Err(invalid("problem carries no tree structure")),
    };
    let opts = SolveOptions::default();
    let target = sol.objective * (1.0 + rel_tol);
    let mut t = mass_equivalent_thresholds(&actions);
    let mut visited = std::collections::HashSet::new();
    let mut best: Option<(ThresholdPolicy, f64)> = None;
    let mut attempt = |t: &[usize], best: &mut Option<(ThresholdPolicy, f64)>| -> bool {
        if !visited.insert(t.to_vec()) {
            return false;
        }
        if let Some((p, cost)) = solve_restricted(problem, tree, map, t, &opts) {
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                *best = Some((p, cost));
            }
            return cost <= target;
        }
        false
    };
    if attempt(&t, &mut best) {
        return Ok(best.expect("recorded").0);
    }
    // local search: single-layer moves, accept improvements
    for _ in 0..4 * (tree.rounds + 1) {
        let mut improved = false;
        for r in 0..=tree.rounds {
            for delta in [-1i64, 1] {
                let v = t[r] as i64 + delta;
                if v < 0 || v > r as i64 {
                    continue;
                }
                let mut cand = t.clone();
                cand[r] = v as usize;
                let before = best.as_ref().map(|b| b.1);
                if attempt(&cand, &mut best) {
                    return Ok(best.expect("recorded").0);
                }
                if best.as_ref().map(|b| b.1) != before {
                    t = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Err(Error::RepairFailure(match best {
        Some((_, c)) => format!("best threshold objective {c} exceeds target {target}"),
        None => "no feasible threshold configuration found".into(),
    }))
}

/// Result of [`oracle_threshold_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub objective: f64,
    pub policy: ThresholdPolicy,
}

/// Brute-force search over monotone threshold policies.
///
/// The root action is solved from the survival row; besides the root at most
/// one further layer carries a fraction from the grid `{0, h, 2h, ..., 1}`, or
/// with the root fixed at 1, one layer on the grid and one solved from survival.
/// An optimal vertex of the LP has at most two fractional states, so this covers
/// the threshold optima up to grid resolution.
pub fn oracle_threshold_search(inst: &LpInstance, grid: f64) -> Result<OracleResult> {
    inst.validate()?;
    if inst.rounds > 6 {
        return Err(invalid("oracle search supports R <= 6"));
    }
    if !(grid > 0.0 && grid <= 1.0) {
        return Err(invalid("grid resolution must lie in (0,1]"));
    }
    let weights = inst.terminal_weights()?;
    let q = inst.posterior_means()?;
    let tree = TreeData {
        rounds: inst.rounds,
        q,
        weights,
        survival: inst.survival_fraction(),
        delta0: inst.delta0,
        direction: inst.direction,
        restrictions: Vec::new(),
    };
    let steps = (1.0 / grid).round() as usize;
    let fracs: Vec<f64> = (0..=steps).map(|i| (i as f64 / steps as f64).min(1.0)).collect();
    let rounds = inst.rounds;
    let target = tree.survival;
    let qtol = 1e-12;

    // integer thresholds for layers 1..=R, t in 0..=r+1 (r+1: nothing pulled), non-decreasing
    let mut sequences = Vec::new();
    let mut cur = vec![0usize; rounds + 1];
    fn enumerate(r: usize, rounds: usize, lo: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if r > rounds {
            out.push(cur.clone());
            return;
        }
        for t in lo..=r + 1 {
            cur[r] = t;
            enumerate(r + 1, rounds, t, cur, out);
        }
    }
    enumerate(1, rounds, 0, &mut cur, &mut sequences);

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut consider = |cost: f64, t: &[usize], f: Vec<f64>| {
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, t.to_vec(), f));
        }
    };
    let run = |t: &[usize], f: &[f64]| {
        propagate(&tree, |r, s| {
            if r == 0 {
                return f[0];
            }
            match s.cmp(&t[r]) {
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => f[r],
                std::cmp::Ordering::Greater => 1.0,
            }
        })
    };
    let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);

    for t in &sequences {
        let base: Vec<f64> = (0..=rounds).map(|r| if r == 0 { 1.0 } else if t[r] > r { 0.0 } else { 1.0 }).collect();
        // (i) root from survival, one grid layer
        for j in 1..=rounds {
            if t[j] > j {
                continue;
            }
            let mut lo = base.clone();
            lo[j] = 0.0;
            let mut hi = base.clone();
            hi[j] = 1.0;
            let (a, b) = (run(t, &lo), run(t, &hi));
            for &f in &fracs {
                let s = lerp(a.survival, b.survival, f);
                if !(s > 0.0) || target / s > 1.0 + 1e-12 {
                    continue;
                }
                let scale = target / s;
                let ql = lerp(a.quality, b.quality, f) * scale;
                let ok = match tree.direction {
                    ConstraintDirection::Geq => ql >= -qtol,
                    ConstraintDirection::Leq => ql <= qtol,
                };
                if ok {
                    let mut fv = base.clone();
                    fv[0] = scale.min(1.0);
                    fv[j] = f;
                    consider(lerp(a.cost, b.cost, f) * scale, t, fv);
                }
            }
        }
        // (ii) root = 1, layer j1 on the grid, layer j2 from survival
        for j1 in 1..=rounds {
            for j2 in 1..=rounds {
                if j1 == j2 || t[j1] > j1 || t[j2] > j2 {
                    continue;
                }
                let corner = |f1: f64, f2: f64| {
                    let mut fv = base.clone();
                    fv[j1] = f1;
                    fv[j2] = f2;
                    run(t, &fv)
                };
                let (c00, c10, c01, c11) = (corner(0.0, 0.0), corner(1.0, 0.0), corner(0.0, 1.0), corner(1.0, 1.0));
                let bil = |g: fn(&Flow) -> f64, f1: f64, f2: f64| {
                    lerp(lerp(g(&c00), g(&c10), f1), lerp(g(&c01), g(&c11), f1), f2)
                };
                for &f1 in &fracs {
                    let s0 = bil(|x| x.survival, f1, 0.0);
                    let s1 = bil(|x| x.survival, f1, 1.0);
                    if (s1 - s0).abs() < 1e-300 {
                        continue;
                    }
                    let f2 = (target - s0) / (s1 - s0);
                    if !(-1e-12..=1.0 + 1e-12).contains(&f2) {
                        continue;
                    }
                    let f2 = f2.clamp(0.0, 1.0);
                    let ql = bil(|x| x.quality, f1, f2);
                    let ok = match tree.direction {
                        ConstraintDirection::Geq => ql >= -qtol,
                        ConstraintDirection::Leq => ql <= qtol,
                    };
                    if ok {
                        let mut fv = base.clone();
                        fv[j1] = f1;
                        fv[j2] = f2;
                        consider(bil(|x| x.cost, f1, f2), t, fv);
                    }
                }
            }
        }
    }

    let (objective, t, f) =
        best.ok_or_else(|| Error::Infeasible(format!("no threshold policy feasible on grid {grid}")))?;
    let mut levels = vec![ThresholdLevel { threshold: 0, frac: f[0] }];
    for r in 1..=rounds {
        levels.push(if t[r] > r {
            ThresholdLevel { threshold: r, frac: 0.0 }
        } else {
            ThresholdLevel { threshold: t[r], frac: f[r] }
        });
    }
    Ok(OracleResult { objective, policy: ThresholdPolicy { rounds, levels } })
}

/// Builds and solves an instance in one call.
pub fn solve_instance(inst: &LpInstance, opts: &SolveOptions) -> Result<(LpProblem, LpSolution)> {
    let problem = crate::lp_model::build_lp(inst)?;
    if let Some(tree) = &problem.tree {
        if let Precheck::Fails(reason) = precheck_with(inst, &tree.weights) {
            return Err(Error::Infeasible(reason));
        }
    }
    let sol = solve_lp(&problem, opts)?;
    Ok((problem, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp_model::build_lp;
    use crate::prior::{PriorSpec, WeightSpec};

    fn pac(rounds: usize, mu0: f64, arms: usize, survivors: f64, delta0: f64) -> LpInstance {
        LpInstance::new(WeightSpec::Pac { mu0, rounds }, PriorSpec::beta(1.0, 1.0).unwrap(), arms, survivors, delta0)
            .unwrap()
    }

    #[test]
    fn toy_problem() {
        let lp = LpProblem::generic(
            2,
            vec![(0, 1.0), (1, 1.0)],
            vec![Row::new("sum", RowKind::Other, vec![(0, 1.0), (1, 1.0)], Sense::Eq, 1.0)],
        );
        let sol = solve_lp(&lp, &SolveOptions::default()).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert!((sol.values[0] + sol.values[1] - 1.0).abs() < 1e-12);
        assert!(sol.optimality_gap < 1e-9);
    }

    #[test]
    fn toy_infeasible() {
        let lp = LpProblem::generic(
            1,
            vec![(0, 1.0)],
            vec![Row::new("neg", RowKind::Other, vec![(0, 1.0)], Sense::Eq, -1.0)],
        );
        assert!(matches!(solve_lp(&lp, &SolveOptions::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn small_pac_is_pure_success_path() {
        // w = (0.125, 0.5, 0.875) at R = 2; delta0 = 0.125 leaves only s = 2
        let inst = pac(2, 0.5, 100, 10.0, 0.125);
        let (problem, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        // a00 = 0.1 / E[mu^2] = 0.3, cost = a00 (1 + E mu) = 0.45
        assert!((sol.objective - 0.45).abs() < 1e-9, "{}", sol.objective);
        assert!(sol.max_eq_residual <= 1e-8 && sol.max_ineq_violation <= 1e-8);
        let actions = extract_actions(&sol, &problem).unwrap();
        assert!((actions.get(0, 0) - 0.3).abs() < 1e-9);
        assert!((actions.get(1, 1) - 1.0).abs() < 1e-9);
        assert_eq!(actions.get(1, 0), 0.0);
        match extract_threshold(&actions, 1e-6) {
            ThresholdOutcome::Threshold(p) => {
                assert_eq!(p.levels[1], ThresholdLevel { threshold: 1, frac: 1.0 });
                assert_eq!(p.levels[2], ThresholdLevel { threshold: 2, frac: 1.0 });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infeasible_reports_precheck_reason() {
        let inst = pac(2, 0.5, 100, 10.0, 0.05);
        let problem = build_lp(&inst).unwrap();
        match solve_lp(&problem, &SolveOptions::default()) {
            Err(Error::Infeasible(reason)) => assert!(reason.starts_with("w(R) < 1-delta0"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_pull_extraction() {
        let tree = TreeData {
            rounds: 1,
            q: vec![0.5],
            weights: vec![1.0, 1.0],
            survival: 1.0,
            delta0: 0.0,
            direction: ConstraintDirection::Geq,
            restrictions: Vec::new(),
        };
        let flow = propagate(&tree, |_, _| 1.0);
        assert_eq!(flow.p[node_id(1, 0)], 0.5);
        assert_eq!(flow.p[node_id(1, 1)], 0.5);
        let map = IndexMap::new(1);
        let x = flow.to_values(&map);
        let (one, zero) = action_forms(&tree, &map, &x, 0, 0);
        assert_eq!(one, Some(1.0));
        assert_eq!(zero, Some(1.0));
    }

    #[test]
    fn threshold_extraction_examples() {
        let ones = ActionTable::constant(4, 1.0).unwrap();
        match extract_threshold(&ones, 1e-6) {
            ThresholdOutcome::Threshold(p) => {
                assert!(p.levels.iter().all(|l| *l == ThresholdLevel { threshold: 0, frac: 1.0 }))
            }
            other => panic!("{other:?}"),
        }
        let mut table = ActionTable::constant(5, 1.0).unwrap();
        for (s, a) in [0.0, 0.0, 0.0, 0.4, 1.0, 1.0].into_iter().enumerate() {
            table.action[node_id(5, s)] = a;
        }
        match extract_threshold(&table, 1e-6) {
            ThresholdOutcome::Threshold(p) => assert_eq!(p.levels[5], ThresholdLevel { threshold: 3, frac: 0.4 }),
            other => panic!("{other:?}"),
        }
        table.action[node_id(5, 4)] = 0.5;
        match extract_threshold(&table, 1e-6) {
            ThresholdOutcome::NotThreshold(rep) => assert_eq!(rep.offending, vec![(5, 4, 0.5)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_one_round_example() {
        let inst = pac(1, 0.5, 10, 2.0, 0.25);
        let res = oracle_threshold_search(&inst, 1e-3).unwrap();
        assert!((res.objective - 0.4).abs() < 1e-9, "{}", res.objective);
        let (_, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        assert!((sol.objective - 0.4).abs() < 1e-9);
    }

    #[test]
    fn oracle_matches_lp_r3() {
        for delta0 in [0.3, 0.5, 1.0] {
            let inst = pac(3, 0.5, 20, 4.0, delta0);
            let (_, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
            let res = oracle_threshold_search(&inst, 1e-3).unwrap();
            assert!(res.objective >= sol.objective * (1.0 - 1e-9));
            assert!((res.objective - sol.objective).abs() <= 1e-2 * sol.objective, "{delta0}: {} vs {}", res.objective, sol.objective);
        }
    }

    #[test]
    fn vacuous_quality_matches_cheapest_survival() {
        // with delta0 = 1 the cheapest way to keep L/K is to keep everything reached
        let inst = pac(3, 0.5, 20, 4.0, 1.0);
        let res = oracle_threshold_search(&inst, 1e-3).unwrap();
        let (_, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        assert!((res.objective - sol.objective).abs() < 1e-9 + 1e-3 * sol.objective);
    }

    #[test]
    fn repair_is_identity_on_threshold_solutions() {
        let inst = pac(2, 0.5, 100, 10.0, 0.125);
        let (problem, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        let actions = extract_actions(&sol, &problem).unwrap();
        let direct = match extract_threshold(&actions, 1e-6) {
            ThresholdOutcome::Threshold(p) => p,
            other => panic!("{other:?}"),
        };
        assert_eq!(threshold_repair(&sol, &problem, 1e-6).unwrap(), direct);
    }

    #[test]
    fn repair_recovers_threshold_from_mixed_solution() {
        let inst = pac(3, 0.5, 20, 4.0, 0.4);
        let (problem, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        let tree = problem.tree.as_ref().unwrap();
        let map = problem.index_map.unwrap();
        // blend the optimum with a non-threshold perturbation of equal survival is hard to
        // build by hand; instead check repair on the optimum and the restricted solve directly
        let policy = threshold_repair(&sol, &problem, 1e-6).unwrap();
        assert!(policy.is_monotone());
        let flow = policy.evaluate(tree);
        assert!((flow.cost - sol.objective).abs() <= 1e-6 * sol.objective);
        let t: Vec<usize> = policy.levels.iter().map(|l| l.threshold).collect();
        let (_, cost) = solve_restricted(&problem, tree, &map, &t, &SolveOptions::default()).unwrap();
        assert!((cost - sol.objective).abs() <= 1e-6 * sol.objective);
    }

    #[test]
    fn solution_json_and_csv() {
        let inst = pac(2, 0.5, 100, 10.0, 0.125);
        let (problem, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        let v = sol.to_json();
        assert_eq!(v["status"], "optimal");
        assert_eq!(v["values"].as_array().unwrap().len(), problem.num_vars);
        let csv = extract_actions(&sol, &problem).unwrap().to_csv();
        assert!(csv.starts_with("r,s,action,reach\n0,0,"));
        assert_eq!(csv.lines().count(), 1 + 6);
    }
}
