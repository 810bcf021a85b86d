//! Column generation for tree LPs.
//!
//! The flow polytope (root mass in `[0, 1]`, capacity rows, keep rows) has the
//! deterministic pull/keep policies as vertices, so the LP is a master problem
//! over mixtures of policies with three rows: convexity, survival, quality.
//! Pricing is a backward recursion over the tree. The Lagrangian bound
//! `master objective + min reduced cost` certifies optimality.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::lp_model::{node_count, node_id, ConstraintDirection, TreeData};
use crate::lp_solve::{propagate, Flow};

const MAX_COLUMNS: usize = 2000;
const PIVOT_TOL: f64 = 1e-9;
/// Artificial level accepted as feasible; matches the master feasibility test.
const ART_TOL: f64 = 1e-11;
/// Room on the scaled quality row for a second attempt, when weights within
/// rounding of `1 - delta0` leave the master degenerate.
const QUALITY_ROOM: f64 = 1e-9;
const MARGIN_TOL: f64 = 1e-14;

/// A deterministic policy and its flow summary (survival and quality scaled by `K/L`).
#[derive(Clone, Debug)]
struct Column {
    pull: Vec<bool>,
    cost: f64,
    survival: f64,
    quality: f64,
}

impl Column {
    fn new(tree: &TreeData, mut pull: Vec<bool>) -> Self {
        let flow = propagate(tree, |r, s| if pull[node_id(r, s)] { 1.0 } else { 0.0 });
        // actions at unreached states do not matter; clear them so equal flows compare equal
        for (a, &p) in pull.iter_mut().zip(&flow.p) {
            *a &= p > 0.0;
        }
        let scale = 1.0 / tree.survival;
        let quality: f64 = flow.keep.iter().enumerate().map(|(s, k)| margin(tree, s) * k).sum();
        Column { pull, cost: flow.cost, survival: flow.survival * scale, quality: quality * scale }
    }

    fn same_flow(&self, other: &Column) -> bool {
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-13 * x.abs().max(y.abs()).max(1.0);
        self.pull == other.pull
            || (close(self.cost, other.cost) && close(self.survival, other.survival) && close(self.quality, other.quality))
    }

    fn entries(&self) -> [f64; 3] {
        [1.0, self.survival, self.quality]
    }
}

/// Quality margin `w(s) - (1 - delta0)`, with rounding-level values set to zero.
fn margin(tree: &TreeData, s: usize) -> f64 {
    let m = tree.weights[s] - (1.0 - tree.delta0);
    if m.abs() <= MARGIN_TOL {
        0.0
    } else {
        m
    }
}

/// Outcome of the decomposition.
pub(crate) struct Decomposed {
    /// Mixture flow.
    pub flow: Flow,
    pub objective: f64,
    /// Lagrangian lower bound.
    pub bound: f64,
}

/// Dense two-phase simplex for `min c'x, Ax = b, x >= 0` with `A` of three
/// rows. Bland's rule; returns the point and the row duals.
fn small_lp(cost: &[f64], cols: &[[f64; 3]], rhs: [f64; 3]) -> Option<(Vec<f64>, [f64; 3])> {
    let n = cols.len();
    // tableau over n structural + 3 artificial columns
    let width = n + 3;
    let mut a = vec![[0.0f64; 3]; width];
    let mut b = rhs;
    // row factors: sign to make b >= 0, and equilibration by the largest entry
    let mut sign = [1.0f64; 3];
    for i in 0..3 {
        let big = cols.iter().fold(rhs[i].abs(), |m, c| m.max(c[i].abs()));
        if big > 0.0 {
            sign[i] = 1.0 / big;
        }
        if b[i] < 0.0 {
            sign[i] = -sign[i];
        }
        b[i] *= sign[i];
    }
    for j in 0..n {
        for i in 0..3 {
            a[j][i] = sign[i] * cols[j][i];
        }
    }
    for i in 0..3 {
        a[n + i][i] = 1.0;
    }
    let mut basis = [n, n + 1, n + 2];
    let phase1: Vec<f64> = (0..width).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
    let phase2: Vec<f64> = (0..width).map(|j| if j < n { cost[j] } else { 0.0 }).collect();

    let run = |obj: &[f64], basis: &mut [usize; 3], allowed: usize, b: &[f64; 3]| -> Option<()> {
        let mut seen = HashSet::new();
        for _ in 0..50_000 {
            let mut key = *basis;
            key.sort_unstable();
            if !seen.insert(key) {
                // cycling on reduced costs at rounding level
                return Some(());
            }
            let binv = invert3(&[a[basis[0]], a[basis[1]], a[basis[2]]])?;
            let xb = mul3(&binv, b);
            let y = duals(&binv, [obj[basis[0]], obj[basis[1]], obj[basis[2]]]);
            let scale = obj.iter().filter(|c| c.is_finite()).fold(1.0f64, |m, c| m.max(c.abs()));
            let entering = (0..allowed).find(|&j| {
                !basis.contains(&j) && obj[j] - (y[0] * a[j][0] + y[1] * a[j][1] + y[2] * a[j][2]) < -1e-13 * scale
            });
            let Some(e) = entering else { return Some(()) };
            let d = mul3(&binv, &a[e]);
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..3 {
                // a zero-level artificial must not move in phase two
                let pinned = allowed == n && basis[i] >= n && d[i].abs() > PIVOT_TOL * dmax;
                if d[i] > PIVOT_TOL * dmax || pinned {
                    let ratio = if pinned { 0.0 } else { xb[i].max(0.0) / d[i] };
                    let better = match leave {
                        None => true,
                        Some((k, r)) => ratio < r - 1e-15 || (ratio <= r + 1e-15 && basis[i] < basis[k]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let (i, _) = leave?;
            basis[i] = e;
        }
        None
    };

    run(&phase1, &mut basis, width, &b)?;
    let binv = invert3(&[a[basis[0]], a[basis[1]], a[basis[2]]])?;
    let xb = mul3(&binv, &b);
    let infeas: f64 = (0..3).filter(|&i| basis[i] >= n).map(|i| xb[i]).sum();
    if infeas > ART_TOL {
        return None;
    }
    // absorb the leftover artificial levels into the rhs so they sit at exactly zero
    for i in 0..3 {
        if basis[i] >= n {
            b[basis[i] - n] -= xb[i];
        }
    }
    // drive zero-level artificials out of the basis where possible
    for i in 0..3 {
        if basis[i] >= n {
            let binv = invert3(&[a[basis[0]], a[basis[1]], a[basis[2]]])?;
            if let Some(j) = (0..n).find(|&j| !basis.contains(&j) && mul3(&binv, &a[j])[i].abs() > 1e-9) {
                basis[i] = j;
            }
        }
    }
    // artificials left in the basis sit at zero; forbid new ones from entering
    let mut obj2 = phase2.clone();
    for j in n..width {
        if !basis.contains(&j) {
            obj2[j] = f64::INFINITY;
        }
    }
    run(&obj2, &mut basis, n, &b)?;
    let binv = invert3(&[a[basis[0]], a[basis[1]], a[basis[2]]])?;
    let xb = mul3(&binv, &b);
    if xb.iter().any(|&v| v < -ART_TOL) {
        return None;
    }
    let mut x = vec![0.0; n];
    for i in 0..3 {
        if basis[i] < n {
            x[basis[i]] = xb[i].max(0.0);
        }
    }
    let y = duals(&binv, [phase2[basis[0]], phase2[basis[1]], phase2[basis[2]]]);
    Some((x, [y[0] * sign[0], y[1] * sign[1], y[2] * sign[2]]))
}

/// Inverse of the matrix whose columns are `cols`.
fn invert3(cols: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    // m[i][j] = cols[j][i]
    let m = |i: usize, j: usize| cols[j][i];
    let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0)) / det;
        }
    }
    inv.iter().flatten().all(|v| v.is_finite()).then_some(inv)
}

fn mul3(inv: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = inv[i][0] * v[0] + inv[i][1] * v[1] + inv[i][2] * v[2];
    }
    out
}

/// `y' = c_B' B^{-1}`.
fn duals(inv: &[[f64; 3]; 3], cb: [f64; 3]) -> [f64; 3] {
    let mut y = [0.0; 3];
    for j in 0..3 {
        y[j] = cb[0] * inv[0][j] + cb[1] * inv[1][j] + cb[2] * inv[2][j];
    }
    y
}

/// Best deterministic policy for prices `(lambda, nu)` on the scaled rows.
/// `pull_cost` is 1 in phase two and 0 in phase one. Returns the policy and
/// its priced value (root included; the empty policy has value 0).
fn price(tree: &TreeData, pull_cost: f64, lambda: f64, nu: f64) -> (Vec<bool>, f64) {
    let rounds = tree.rounds;
    let scale = 1.0 / tree.survival;
    let mut pull = vec![false; node_count(rounds)];
    let mut next = vec![0.0; rounds + 1];
    let forced = |r: usize, s: usize| tree.restrictions.iter().find(|x| x.r == r && x.s == s).map(|x| x.pull);
    for s in 0..=rounds {
        let keep = -(lambda + nu * margin(tree, s)) * scale;
        let choose = forced(rounds, s).unwrap_or(keep < 0.0);
        pull[node_id(rounds, s)] = choose;
        next[s] = if choose { keep } else { 0.0 };
    }
    for r in (0..rounds).rev() {
        let mut cur = vec![0.0; r + 1];
        for s in 0..=r {
            let q = tree.q[node_id(r, s)];
            let go = pull_cost + q * next[s + 1] + (1.0 - q) * next[s];
            let choose = forced(r, s).unwrap_or(go < 0.0);
            pull[node_id(r, s)] = choose;
            cur[s] = if choose { go } else { 0.0 };
        }
        next = cur;
    }
    (pull, next[0])
}

struct Master {
    cols: Vec<Column>,
    slack: f64,
    /// Room on the scaled quality row.
    room: f64,
}

impl Master {
    fn new(tree: &TreeData, room: f64) -> Self {
        let rounds = tree.rounds;
        let slack = match tree.direction {
            ConstraintDirection::Geq => -1.0,
            ConstraintDirection::Leq => 1.0,
        };
        let mut m = Master { cols: Vec::new(), slack, room };
        // empty policy, full exploration, pure success path
        m.add(Column::new(tree, vec![false; node_count(rounds)]));
        m.add(Column::new(tree, vec![true; node_count(rounds)]));
        let path = (0..=rounds).flat_map(|r| (0..=r).map(move |s| s == r)).collect();
        m.add(Column::new(tree, path));
        m
    }

    fn add(&mut self, col: Column) -> bool {
        if self.cols.iter().any(|c| c.same_flow(&col)) {
            return false;
        }
        self.cols.push(col);
        true
    }

    /// Solves the restricted master; the last structural column is the quality slack.
    fn solve(&self, phase_one: bool) -> Option<(Vec<f64>, [f64; 3])> {
        let mut cols: Vec<[f64; 3]> = self.cols.iter().map(Column::entries).collect();
        cols.push([0.0, 0.0, self.slack]);
        let mut cost: Vec<f64> = self.cols.iter().map(|c| if phase_one { 0.0 } else { c.cost }).collect();
        cost.push(0.0);
        if phase_one {
            // artificial survival column: meets every row at unit cost
            cols.push([1.0, 1.0, 0.0]);
            cost.push(1.0);
        }
        small_lp(&cost, &cols, [1.0, 1.0, self.slack * self.room])
    }
}

/// Solves the tree LP described by `tree`.
pub(crate) fn solve_tree(tree: &TreeData) -> Result<Decomposed> {
    match generate(tree, 0.0) {
        Err(Error::SolverFailure(msg)) => {
            log::debug!("column generation failed ({msg}); retrying with room on the quality row");
            generate(tree, QUALITY_ROOM)
        }
        other => other,
    }
}

fn generate(tree: &TreeData, room: f64) -> Result<Decomposed> {
    let mut master = Master::new(tree, room);

    // phase one: drive the artificial column out
    loop {
        let (x, y) = master
            .solve(true)
            .ok_or_else(|| Error::SolverFailure("phase-one master failed".into()))?;
        let art = *x.last().expect("artificial column");
        if art <= 1e-12 {
            break;
        }
        let (pull, value) = price(tree, 0.0, y[1], y[2]);
        let reduced = value - y[0];
        // phase-one Lagrangian bound: y0 + y1 + min over policies
        if reduced >= -1e-12 {
            return Err(Error::Infeasible(format!(
                "phase one ends with infeasibility {art:.3e}: survival and quality rows cannot both hold"
            )));
        }
        if !master.add(Column::new(tree, pull)) {
            // no new column: the remaining infeasibility is rounding, or real
            if art <= ART_TOL {
                break;
            }
            if art + reduced > ART_TOL {
                return Err(Error::Infeasible(format!(
                    "phase one ends with infeasibility {art:.3e}: survival and quality rows cannot both hold"
                )));
            }
            return Err(Error::SolverFailure("phase-one column generation stalled".into()));
        }
        if master.cols.len() > MAX_COLUMNS {
            return Err(Error::SolverFailure("phase-one column generation did not converge".into()));
        }
    }

    // phase two
    let mut stalls = 0;
    loop {
        let (x, y) = master
            .solve(false)
            .ok_or_else(|| Error::SolverFailure("phase-two master failed".into()))?;
        let objective: f64 = master.cols.iter().zip(&x).map(|(c, t)| c.cost * t).sum();
        let (pull, value) = price(tree, 1.0, y[1], y[2]);
        let reduced = value - y[0];
        let bound = objective + reduced.min(0.0);
        let tol = 1e-12 * objective.abs().max(1.0);
        if reduced >= -tol || !master.add(Column::new(tree, pull)) {
            if reduced < -tol {
                stalls += 1;
            }
            let flow = mixture(tree, &master.cols, &x);
            log::debug!(
                "column generation: {} columns, objective {objective:.12}, bound {bound:.12}, stalls {stalls}",
                master.cols.len()
            );
            return Ok(Decomposed { flow, objective, bound });
        }
        if master.cols.len() > MAX_COLUMNS {
            return Err(Error::SolverFailure("column generation did not converge".into()));
        }
    }
}

/// Flow of the mixture `sum_i theta_i column_i`.
fn mixture(tree: &TreeData, cols: &[Column], theta: &[f64]) -> Flow {
    let mut total: Option<Flow> = None;
    for (col, &t) in cols.iter().zip(theta) {
        if t <= 0.0 {
            continue;
        }
        let f = propagate(tree, |r, s| if col.pull[node_id(r, s)] { 1.0 } else { 0.0 });
        match total.as_mut() {
            None => {
                let mut f = f;
                scale_flow(&mut f, t);
                total = Some(f);
            }
            Some(acc) => add_flow(acc, &f, t),
        }
    }
    total.unwrap_or_else(|| {
        let mut f = propagate(tree, |_, _| 0.0);
        scale_flow(&mut f, 0.0);
        f
    })
}

fn scale_flow(f: &mut Flow, t: f64) {
    for v in f.p.iter_mut().chain(f.p1.iter_mut()).chain(f.p0.iter_mut()).chain(f.keep.iter_mut()) {
        *v *= t;
    }
    f.cost *= t;
    f.survival *= t;
    f.quality *= t;
}

fn add_flow(acc: &mut Flow, f: &Flow, t: f64) {
    for (a, b) in acc.p.iter_mut().zip(&f.p) {
        *a += t * b;
    }
    for (a, b) in acc.p1.iter_mut().zip(&f.p1) {
        *a += t * b;
    }
    for (a, b) in acc.p0.iter_mut().zip(&f.p0) {
        *a += t * b;
    }
    for (a, b) in acc.keep.iter_mut().zip(&f.keep) {
        *a += t * b;
    }
    acc.cost += t * f.cost;
    acc.survival += t * f.survival;
    acc.quality += t * f.quality;
}
