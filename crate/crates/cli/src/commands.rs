//! Subcommand implementations. Each writes its files under the output
//! directory and returns the lines it prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lp2s::bounds::{
    assumption_fc_diagnostic, corollary_rate, expected_total_cost, thm2_bound, thm4_bound, BoundReport,
};
use lp2s::lp_model::{tightest_feasible_delta0, ConstraintDirection, LpInstance, LpProblem};
use lp2s::lp_solve::{
    extract_actions, extract_threshold, solve_instance, threshold_repair, ActionTable, LpSolution, SolveOptions,
    ThresholdOutcome, ThresholdPolicy,
};
use lp2s::sim::{monte_carlo, welch_test, MonteCarloConfig, MonteCarloOutput, PolicySpec};
use lp2s::{Error, Prior};

use crate::config::{Delta0, ExperimentConfig, PolicyConfig, Variant};

/// Tolerance of the `delta0 = auto` bisection.
pub const AUTO_DELTA0_TOL: f64 = 1e-4;
/// Relative objective tolerance when repairing a non-threshold solution.
pub const REPAIR_TOL: f64 = 1e-6;
/// Entry tolerance for reading a threshold form off an action table.
pub const THRESHOLD_TOL: f64 = 1e-6;

/// Everything the solve pipeline produces.
#[derive(Clone, Debug)]
pub struct Solved {
    pub instance: LpInstance,
    pub problem: LpProblem,
    pub solution: LpSolution,
    /// Actions LP2S runs with: the LP's own, or the repaired threshold policy's.
    pub actions: ActionTable,
    pub threshold: ThresholdPolicy,
    pub repaired: bool,
    pub thm2: f64,
}

/// Resolves `delta0 = auto` to the tightest feasible value.
pub fn resolve_delta0(cfg: &ExperimentConfig) -> Result<LpInstance> {
    let inst = cfg.instance()?;
    match cfg.delta0 {
        Delta0::Value(_) => Ok(inst),
        Delta0::Auto => {
            let d = tightest_feasible_delta0(&inst, AUTO_DELTA0_TOL).context("finding the tightest feasible delta0")?;
            Ok(inst.with_delta0(d))
        }
    }
}

/// Build, precheck, solve, extract, and reduce to threshold form.
pub fn solve_pipeline(cfg: &ExperimentConfig) -> Result<Solved> {
    let instance = resolve_delta0(cfg)?;
    let (problem, solution) = solve_instance(&instance, &SolveOptions::default()).context("solving the LP")?;
    let table = extract_actions(&solution, &problem).context("extracting actions")?;
    let tree = problem.tree.as_ref().expect("tree LP");
    let (actions, threshold, repaired) = match extract_threshold(&table, THRESHOLD_TOL) {
        ThresholdOutcome::Threshold(t) => (table, t, false),
        ThresholdOutcome::NotThreshold(report) => {
            log::info!("solution is not threshold-shaped at {} states; repairing", report.offending.len());
            let t = threshold_repair(&solution, &problem, REPAIR_TOL).context("threshold repair")?;
            (t.to_actions(tree), t, true)
        }
    };
    let thm2 = thm2_bound(&instance.prior, instance.arms, instance.rounds, instance.survivors)?;
    Ok(Solved { instance, problem, solution, actions, threshold, repaired, thm2 })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let s = solve_pipeline(cfg)?;
    let dir = cfg.out_dir();
    let mut json = s.solution.to_json();
    json["delta0"] = s.instance.delta0.into();
    json["variant"] = s.instance.weight.label().into();
    json["thm2_bound"] = s.thm2.into();
    let files = [
        write(&dir, "solution.json", &(serde_json::to_string_pretty(&json)? + "\n"))?,
        write(&dir, "actions.csv", &s.actions.to_csv())?,
        write(&dir, "thresholds.csv", &s.threshold.to_csv())?,
    ];
    let mut out = vec![
        format!("delta0: {}", s.instance.delta0),
        format!("f*: {}", s.solution.objective),
        format!("thm2 bound: {}", s.thm2),
        format!("gap: {:e}", s.solution.optimality_gap),
        format!("threshold: {}", if s.repaired { "repaired" } else { "direct" }),
    ];
    out.extend(files.iter().map(|f| format!("wrote {}", f.display())));
    Ok(out)
}

pub fn cmd_min_delta0(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let inst = cfg.instance()?;
    let d = tightest_feasible_delta0(&inst, AUTO_DELTA0_TOL)?;
    let side = match inst.direction {
        ConstraintDirection::Geq => "smallest",
        ConstraintDirection::Leq => "largest",
    };
    Ok(vec![format!("delta0: {d}"), format!("({side} feasible value, tolerance {AUTO_DELTA0_TOL:e})")])
}

/// Budget for a comparator: explicit, matched to LP2S, or the instance default `K R`.
fn budget(explicit: Option<u64>, matched: Option<u64>, cfg: &ExperimentConfig) -> u64 {
    matched.or(explicit).unwrap_or((cfg.arms * cfg.rounds) as u64)
}

/// Turns policy configs into runnable specs.
pub fn resolve_policies(cfg: &ExperimentConfig, lp: Option<&Solved>, matched: Option<u64>) -> Result<Vec<PolicySpec>> {
    cfg.policies
        .iter()
        .map(|p| {
            Ok(match *p {
                PolicyConfig::Lp2s => {
                    let s = lp.context("lp2s requested without a solved instance")?;
                    PolicySpec::Lp2s { actions: Arc::new(s.actions.clone()) }
                }
                PolicyConfig::Uniform { rounds } => {
                    let rounds = match matched {
                        Some(t) => (t as usize / cfg.arms).max(1),
                        None => rounds.unwrap_or(2 * cfg.rounds),
                    };
                    PolicySpec::Uniform { rounds }
                }
                PolicyConfig::BatchRacing { delta, max_batches } => PolicySpec::BatchRacing {
                    delta,
                    max_batches: max_batches.unwrap_or(cfg.rounds),
                    budget: matched,
                },
                PolicyConfig::Tse { q, budget: b } => PolicySpec::Tse { q, budget: budget(b, matched, cfg) },
                PolicyConfig::BatchedThompson { alpha, budget: b } => {
                    PolicySpec::BatchedThompson { alpha, budget: budget(b, matched, cfg) }
                }
            })
        })
        .collect()
}

fn mc_config(cfg: &ExperimentConfig, parallelism: usize) -> MonteCarloConfig {
    MonteCarloConfig {
        prior: cfg.prior.clone(),
        arms: cfg.arms,
        rounds: cfg.rounds,
        episodes: cfg.episodes,
        master_seed: cfg.master_seed,
        parallelism,
    }
}

fn wants_lp2s(cfg: &ExperimentConfig) -> bool {
    cfg.policies.iter().any(|p| matches!(p, PolicyConfig::Lp2s))
}

/// Runs the Monte Carlo study; returns the output and its bound rows.
pub fn simulate(cfg: &ExperimentConfig, parallelism: usize) -> Result<(MonteCarloOutput, Vec<BoundReport>)> {
    let solved = if wants_lp2s(cfg) { Some(solve_pipeline(cfg)?) } else { None };
    let specs = resolve_policies(cfg, solved.as_ref(), None)?;
    let out = monte_carlo(&mc_config(cfg, parallelism), &specs)?;
    let mut bounds = Vec::new();
    if let (Some(s), Some(lp)) = (&solved, out.summary("lp2s")) {
        let three_se = |se: Option<f64>| 3.0 * se.unwrap_or(0.0);
        if cfg.checks.thm4 {
            if cfg.variant != Variant::Srm {
                bail!("the thm4 check applies to the srm variant");
            }
            let b = thm4_bound(s.instance.survivors, s.instance.delta0);
            bounds.push(BoundReport::check("thm4", b, lp.mean_sr, three_se(lp.se_sr)));
        }
        if cfg.checks.cost {
            let b = expected_total_cost(s.thm2, cfg.arms, cfg.survivors, cfg.rounds);
            bounds.push(BoundReport::check("cost", b, lp.mean_t, three_se(lp.se_t)));
        }
    }
    Ok((out, bounds))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, parallelism: usize) -> Result<Vec<String>> {
    let (out, bounds) = simulate(cfg, parallelism)?;
    let dir = cfg.out_dir();
    let a = write(&dir, "episodes.csv", &out.episodes_csv())?;
    let b = write(&dir, "summary.csv", &out.summary_csv(&bounds))?;
    let mut lines: Vec<String> = out
        .summaries
        .iter()
        .map(|s| format!("{}: mean SR {:.6e}, mean PB {:.4}, mean T {:.1}", s.policy, s.mean_sr, s.mean_pb, s.mean_t))
        .collect();
    for r in &bounds {
        lines.push(format!(
            "bound {}: {} vs observed {} -> {}",
            r.name,
            r.bound_value,
            r.observed_value.unwrap_or(f64::NAN),
            if r.satisfied == Some(true) { "satisfied" } else { "violated" }
        ));
    }
    lines.push(format!("wrote {}", a.display()));
    lines.push(format!("wrote {}", b.display()));
    Ok(lines)
}

/// Comparison of each policy against LP2S.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub output: MonteCarloOutput,
    /// Budget handed to the comparators (pulls), when matched.
    pub matched_budget: Option<u64>,
    pub csv: String,
}

pub fn compare(cfg: &ExperimentConfig, parallelism: usize) -> Result<Comparison> {
    if cfg.policies.len() < 2 {
        bail!("compare needs at least two policies");
    }
    if cfg.policies[0] != PolicyConfig::Lp2s {
        bail!("compare needs lp2s as the first policy");
    }
    let solved = solve_pipeline(cfg)?;
    let mut matched = None;
    if cfg.budget_match {
        let lp_only = ExperimentConfig { policies: vec![PolicyConfig::Lp2s], ..cfg.clone() };
        let specs = resolve_policies(&lp_only, Some(&solved), None)?;
        let pilot = monte_carlo(&mc_config(&lp_only, parallelism), &specs)?;
        matched = Some(pilot.summaries[0].mean_t.ceil() as u64);
    }
    let specs = resolve_policies(cfg, Some(&solved), matched)?;
    let output = monte_carlo(&mc_config(cfg, parallelism), &specs)?;
    let base: Vec<f64> = output.results("lp2s").iter().map(|r| r.simple_regret).collect();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("policy,N,mean_SR,se_SR,mean_PB,se_PB,mean_T,budget,welch_t,welch_df,p_value\n");
    for s in &output.summaries {
        let test = if s.policy == "lp2s" || base.len() < 2 {
            None
        } else {
            let other: Vec<f64> = output.results(&s.policy).iter().map(|r| r.simple_regret).collect();
            Some(welch_test(&base, &other)?)
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.policy,
            s.episodes,
            s.mean_sr,
            opt(s.se_sr),
            s.mean_pb,
            opt(s.se_pb),
            s.mean_t,
            if s.policy == "lp2s" { String::new() } else { matched.map(|b| b.to_string()).unwrap_or_default() },
            opt(test.map(|w| w.t)),
            opt(test.map(|w| w.df)),
            opt(test.map(|w| w.p_value)),
        );
    }
    Ok(Comparison { output, matched_budget: matched, csv })
}

pub fn cmd_compare(cfg: &ExperimentConfig, parallelism: usize) -> Result<Vec<String>> {
    let c = compare(cfg, parallelism)?;
    let path = write(&cfg.out_dir(), "compare.csv", &c.csv)?;
    let mut lines = vec![match c.matched_budget {
        Some(b) => format!("comparator budget matched to LP2S mean T rounded up: {b} pulls"),
        None => "comparators use their configured budgets".to_string(),
    }];
    lines.extend(c.csv.lines().map(String::from));
    lines.push(format!("wrote {}", path.display()));
    Ok(lines)
}

/// One row of the bounds report, with a free-text detail column.
#[derive(Clone, Debug)]
pub struct BoundRow {
    pub report: BoundReport,
    pub detail: String,
}

/// Reads `f*` from a solution file written by `solve`.
pub fn read_objective(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    v["objective"].as_f64().with_context(|| format!("{} has no numeric objective", path.display()))
}

pub fn bounds_report(cfg: &ExperimentConfig, solution: Option<&Path>) -> Result<Vec<BoundRow>> {
    let inst = cfg.instance()?;
    let thm2 = thm2_bound(&inst.prior, inst.arms, inst.rounds, inst.survivors)?;
    let mut rows = Vec::new();
    let thm2_row = match solution {
        Some(p) => BoundReport::check("thm2", thm2, read_objective(p)?, 1e-9),
        None => BoundReport::bound_only("thm2", thm2),
    };
    rows.push(BoundRow { report: thm2_row, detail: "f* vs stage-one cost bound".into() });
    rows.push(BoundRow {
        report: BoundReport::bound_only("cost", expected_total_cost(thm2, inst.arms, inst.survivors, inst.rounds)),
        detail: "K * thm2 + L R".into(),
    });
    if cfg.variant == Variant::Srm {
        let d = resolve_delta0(cfg)?.delta0;
        rows.push(BoundRow {
            report: BoundReport::bound_only("thm4", thm4_bound(inst.survivors, d)),
            detail: format!("delta0={d}"),
        });
    }
    if let Prior::Beta { a, b } = inst.prior {
        let (regime, rate) = corollary_rate(a, b, inst.rounds, inst.survivors, inst.arms)?;
        rows.push(BoundRow { report: BoundReport::bound_only("corollary", rate), detail: regime.label().into() });
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let diag = assumption_fc_diagnostic(&inst.prior, cfg.tail_alpha, &grid)?;
        rows.push(BoundRow {
            report: BoundReport {
                name: "assumption_tail".into(),
                bound_value: 0.0,
                observed_value: Some(-diag.worst_margin),
                satisfied: Some(diag.tail_ok),
                slack: Some(diag.worst_margin),
            },
            detail: format!("alpha={} worst d={}", diag.alpha, diag.worst_d),
        });
        rows.push(BoundRow {
            report: BoundReport {
                name: "assumption_lipschitz".into(),
                bound_value: f64::INFINITY,
                observed_value: Some(diag.lipschitz),
                satisfied: Some(diag.lipschitz_ok),
                slack: None,
            },
            detail: "largest prior density on a grid".into(),
        });
    }
    Ok(rows)
}

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("name,bound,observed,satisfied,slack,detail\n");
    for r in rows {
        let b = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.name,
            b.bound_value,
            opt(b.observed_value),
            b.satisfied.map(|x| x.to_string()).unwrap_or_default(),
            opt(b.slack),
            r.detail.replace(',', ";")
        );
    }
    out
}

pub fn cmd_bounds(cfg: &ExperimentConfig, solution: Option<&Path>) -> Result<Vec<String>> {
    let rows = bounds_report(cfg, solution)?;
    let csv = bounds_csv(&rows);
    let path = write(&cfg.out_dir(), "bounds.csv", &csv)?;
    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    lines.push(format!("wrote {}", path.display()));
    Ok(lines)
}

/// Exit code for an error: 2 for an infeasible instance, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let infeasible = err.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Infeasible(_))));
    if infeasible {
        2
    } else {
        1
    }
}
