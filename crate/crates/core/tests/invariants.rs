use lp2s::lp_model::{
    build_lp, node_id, tightest_feasible_delta0, ConstraintDirection, LpInstance, VarKind, TreeIndex,
};
use lp2s::lp_solve::{
    extract_actions, oracle_threshold_search, propagate, residuals, solve_instance, ActionTable, SolveOptions,
};
use lp2s::policy::make_lp2s;
use lp2s::prior::weights;
use lp2s::sim::{
    monte_carlo, run_episode, sample_environment, Environment, MonteCarloConfig, PolicySpec, RewardStreams,
};
use lp2s::{Prior, Weight};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weight_for(kind: u8, mu0: f64, arms: usize, rounds: usize) -> Weight {
    match kind {
        0 => Weight::Pac { mu0, rounds },
        1 => Weight::Srm { arms, rounds },
        _ => Weight::Fc { arms, rounds },
    }
}

/// A feasible instance: `delta0` between the tightest feasible value and the loose end.
fn feasible_instance(a: f64, b: f64, kind: u8, mu0: f64, arms: usize, rounds: usize, l: f64, t: f64) -> LpInstance {
    let prior = Prior::beta(a, b).unwrap();
    let base = LpInstance::new(weight_for(kind, mu0, arms, rounds), prior, arms, l, 0.5).unwrap();
    let d = tightest_feasible_delta0(&base, 1e-4).unwrap();
    let loose = match base.direction {
        ConstraintDirection::Geq => 1.0,
        ConstraintDirection::Leq => 0.0,
    };
    base.with_delta0(d + t * (loose - d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_mean_monotone_and_in_support(a in 0.2f64..10.0, b in 0.2f64..10.0, r in 0u64..60) {
        let prior = Prior::beta(a, b).unwrap();
        let mut last = 0.0;
        for s in 0..=r {
            let m = prior.posterior_mean(r, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn weights_follow_direction(a in 0.5f64..6.0, b in 0.5f64..6.0, kind in 0u8..3, mu0 in 0.05f64..0.95,
                                arms in 2usize..400, rounds in 1usize..40) {
        let spec = weight_for(kind, mu0, arms, rounds);
        let w = weights(&spec, &Prior::beta(a, b).unwrap()).unwrap();
        for pair in w.windows(2) {
            match spec.direction() {
                ConstraintDirection::Geq => prop_assert!(pair[1] >= pair[0] - 1e-9),
                ConstraintDirection::Leq => prop_assert!(pair[1] <= pair[0] + 1e-9),
            }
        }
    }

    #[test]
    fn build_is_bit_identical(a in 0.5f64..5.0, b in 0.5f64..5.0, kind in 0u8..3, rounds in 1usize..12) {
        let inst = LpInstance::new(weight_for(kind, 0.6, 50, rounds), Prior::beta(a, b).unwrap(), 50, 3.0, 0.5).unwrap();
        prop_assert_eq!(build_lp(&inst).unwrap(), build_lp(&inst).unwrap());
    }

    #[test]
    fn solutions_satisfy_flow_invariants(a in 0.5f64..5.0, b in 0.5f64..5.0, kind in 0u8..3, mu0 in 0.2f64..0.9,
                                         arms in 10usize..300, rounds in 1usize..9, lfrac in 0.01f64..0.5,
                                         t in 0.0f64..1.0) {
        let l = (lfrac * arms as f64).max(1.0);
        let inst = feasible_instance(a, b, kind, mu0, arms, rounds, l, t);
        let (problem, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        let map = problem.index_map.as_ref().unwrap();
        let p = |r: usize, s: usize| sol.values[map.var_index(TreeIndex::new(r, s), VarKind::P).unwrap()];
        let keep = |s: usize| sol.values[map.var_index(TreeIndex::new(rounds, s), VarKind::Keep).unwrap()];

        let (eq, ineq) = residuals(&problem, &sol.values);
        prop_assert!(eq <= 1e-8 && ineq <= 1e-8);
        prop_assert!(sol.optimality_gap <= 1e-7);

        let survival: f64 = (0..=rounds).map(keep).sum();
        prop_assert!((survival - l / arms as f64).abs() <= 1e-8);

        let w = inst.terminal_weights().unwrap();
        let quality: f64 = (0..=rounds).map(|s| (w[s] - (1.0 - inst.delta0)) * keep(s)).sum();
        match inst.direction {
            ConstraintDirection::Geq => prop_assert!(quality >= -1e-8),
            ConstraintDirection::Leq => prop_assert!(quality <= 1e-8),
        }

        for r in 0..rounds {
            let here: f64 = (0..=r).map(|s| p(r, s)).sum();
            let next: f64 = (0..=r + 1).map(|s| p(r + 1, s)).sum();
            prop_assert!(next <= here + 1e-8);
        }
        for r in 0..=rounds {
            for s in 0..=r {
                prop_assert!((-1e-8..=1.0 + 1e-8).contains(&p(r, s)));
            }
        }

        // Running the extracted actions forward reproduces the LP point.
        let table = extract_actions(&sol, &problem).unwrap();
        prop_assert!(table.action.iter().all(|a| (0.0..=1.0).contains(a)));
        let flow = propagate(problem.tree.as_ref().unwrap(), |r, s| table.get(r, s));
        prop_assert!((flow.cost - sol.objective).abs() <= 1e-6 * sol.objective.max(1.0));
        prop_assert!((flow.survival - l / arms as f64).abs() <= 1e-6);
    }

    #[test]
    fn threshold_oracle_never_beats_lp(a in 0.5f64..4.0, b in 0.5f64..4.0, mu0 in 0.3f64..0.8,
                                       rounds in 1usize..4, t in 0.05f64..1.0) {
        let inst = feasible_instance(a, b, 0, mu0, 20, rounds, 4.0, t);
        let (_, sol) = solve_instance(&inst, &SolveOptions::default()).unwrap();
        let oracle = oracle_threshold_search(&inst, 1e-2).unwrap();
        prop_assert!(oracle.objective >= sol.objective - 1e-9 * sol.objective.max(1.0));
    }

    #[test]
    fn episodes_respect_protocol(arms in 1usize..25, kind in 0u8..5, seed in any::<u64>(), budget in 1u64..200) {
        let prior = Prior::beta(1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = sample_environment(&prior, arms, &mut rng).unwrap();
        let spec = match kind {
            0 => PolicySpec::Lp2s { actions: std::sync::Arc::new(ActionTable::constant(3, 0.7).unwrap()) },
            1 => PolicySpec::Uniform { rounds: 3 },
            2 => PolicySpec::BatchRacing { delta: 0.05, max_batches: 20, budget: Some(budget) },
            3 => PolicySpec::Tse { q: 0.5, budget: budget.max(2 * arms as u64) },
            _ => PolicySpec::BatchedThompson { alpha: 2.0, budget },
        };
        let mut policy = spec.build(arms, &prior, ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let mut rewards = RewardStreams::new(seed, arms);
        let res = run_episode(policy.as_mut(), &env, spec.max_batches(), &mut rewards).unwrap();
        prop_assert!(res.recommended < arms);
        prop_assert!(res.simple_regret >= 0.0);
        prop_assert_eq!(res.is_best, env.mu[res.recommended] == env.mu_star);
        prop_assert_eq!(res.total_pulls, res.stage1_pulls + res.stage2_pulls);
        if kind >= 2 {
            prop_assert!(res.total_pulls <= budget.max(2 * arms as u64));
        }
    }

    #[test]
    fn lp2s_stage_one_depth_at_most_r(arms in 1usize..40, rounds in 1usize..8, a in 0.0f64..1.0, seed in any::<u64>()) {
        let env = Environment::new((0..arms).map(|j| (j as f64 + 0.5) / arms as f64).collect()).unwrap();
        let table = ActionTable::constant(rounds, a).unwrap();
        let mut policy = make_lp2s(table, rounds, arms, ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rewards = RewardStreams::new(seed, arms);
        let res = run_episode(&mut policy, &env, 2 * rounds, &mut rewards).unwrap();
        prop_assert!(policy.arm_states().iter().all(|s| s.pulls <= rounds as u64 && s.successes <= s.pulls));
        let surv = policy.survivor_set().unwrap();
        prop_assert_eq!(res.survivors, Some(surv.len()));
        prop_assert_eq!(res.stage2_pulls, (surv.len() * rounds) as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn monte_carlo_ignores_parallelism(seed in any::<u64>(), threads in 2usize..9) {
        let cfg = MonteCarloConfig {
            prior: Prior::beta(2.0, 3.0).unwrap(),
            arms: 12,
            rounds: 3,
            episodes: 40,
            master_seed: seed,
            parallelism: 1,
        };
        let specs = [
            PolicySpec::Lp2s { actions: std::sync::Arc::new(ActionTable::constant(3, 0.8).unwrap()) },
            PolicySpec::Uniform { rounds: 4 },
            PolicySpec::Tse { q: 0.5, budget: 40 },
            PolicySpec::BatchedThompson { alpha: 2.0, budget: 40 },
            PolicySpec::BatchRacing { delta: 0.05, max_batches: 6, budget: None },
        ];
        let one = monte_carlo(&cfg, &specs).unwrap();
        let many = monte_carlo(&MonteCarloConfig { parallelism: threads, ..cfg }, &specs).unwrap();
        prop_assert_eq!(&one.rows, &many.rows);
        prop_assert_eq!(one.episodes_csv(), many.episodes_csv());
    }
}

#[test]
fn node_ids_are_dense() {
    let mut seen = Vec::new();
    for r in 0..=5 {
        for s in 0..=r {
            seen.push(node_id(r, s));
        }
    }
    assert_eq!(seen, (0..21).collect::<Vec<_>>());
}
