use gfnvi::exact::{
    enumerate_trajectories, expected_gradient_oracle, flow_propagate,
    forward_trajectory_distribution, jsd, kl, terminal_marginal, ExactDistribution,
    PairedDistributions, Sampling,
};
use gfnvi::hypergrid::hypergrid_reward;
use gfnvi::nn::{cosine_epsilon, Mlp};
use gfnvi::objectives::{
    forward_importance_weights, forward_kl_grad, reverse_importance_weights, reverse_kl_grad,
    BaselineKind, BaselineState,
};
use gfnvi::policy::trajectory_scores;
use gfnvi::verify::{instance_rng, random_dag_env, random_layered_env, random_policy, OracleModel};
use gfnvi::{Direction, Env, HypergridSpec, PolicyCache, PolicySet, Trajectory};
use proptest::prelude::*;
use rand::Rng;

fn instance(seed: u64, generic: bool) -> (Env, PolicySet) {
    let mut rng = instance_rng(seed, 0);
    let env = if generic {
        let n = rng.gen_range(2..=10);
        random_dag_env(&mut rng, n).unwrap()
    } else {
        random_layered_env(&mut rng).unwrap()
    };
    let policy = random_policy(&env, OracleModel::Tabular, &mut rng).unwrap();
    (env, policy)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Every complete trajectory once, scored as if drawn uniformly.
fn full_support_batch(env: &Env, policy: &PolicySet) -> Vec<Trajectory> {
    let mut cache = PolicyCache::new();
    env.dag()
        .enumerate_complete_trajectories(1 << 16)
        .unwrap()
        .into_iter()
        .map(|p| Trajectory::evaluate(policy, env, &mut cache, p, Some(0.0)).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_propagation_matches_enumeration(seed in any::<u64>(), generic in any::<bool>()) {
        let (env, policy) = instance(seed, generic);
        let flow = flow_propagate(&policy, &env).unwrap();
        let trajs = enumerate_trajectories(&policy, &env, &mut PolicyCache::new()).unwrap();
        let marginal = terminal_marginal(&forward_trajectory_distribution(&trajs).unwrap());
        prop_assert_eq!(&flow.support, &marginal.support);
        prop_assert!(max_abs(&flow.probs, &marginal.probs) < 1e-12);
        prop_assert!((flow.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn action_distributions_normalize(seed in any::<u64>(), eps in 0.0f64..5.0) {
        let mut rng = instance_rng(seed, 1);
        let spec = HypergridSpec::new(rng.gen_range(2..6), rng.gen_range(1..4), 0.1).unwrap();
        let env = Env::hypergrid(&spec).unwrap();
        let policy = PolicySet::random_tabular(&env, gfnvi::BackwardKind::Learned, 2.0, &mut rng);
        for s in 0..env.num_states() {
            if !env.dag().is_terminating(s) {
                let p = policy.action_distribution(&env, s, Direction::Forward, eps).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if s != env.dag().initial() {
                let p = policy.action_distribution(&env, s, Direction::Backward, 0.0).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grading_is_idempotent_and_preserves_trajectories(seed in any::<u64>()) {
        let mut rng = instance_rng(seed, 2);
        let n = rng.gen_range(2..=10);
        let env = random_dag_env(&mut rng, n).unwrap();
        let dag = env.dag();
        let graded = dag.to_graded();
        prop_assert!(graded.is_graded());
        prop_assert_eq!(graded.to_graded().to_spec(), graded.to_spec());
        prop_assert_eq!(graded.count_complete_trajectories(), dag.count_complete_trajectories());
        let mut original = dag.enumerate_complete_trajectories(1 << 16).unwrap();
        let mut projected: Vec<_> = graded
            .enumerate_complete_trajectories(1 << 16)
            .unwrap()
            .iter()
            .map(|p| graded.project_to_original(p))
            .collect();
        original.sort();
        projected.sort();
        prop_assert_eq!(original, projected);
    }

    #[test]
    fn hypergrid_reward_is_mirror_symmetric(h in 2usize..12, d in 1usize..4, cell in any::<prop::sample::Index>()) {
        let spec = HypergridSpec::new(h, d, 0.1).unwrap();
        let coords = spec.coords(cell.index(spec.num_cells()));
        let r = hypergrid_reward(&coords, &spec).unwrap();
        for dim in 0..d {
            let mut m = coords.clone();
            m[dim] = h - 1 - m[dim];
            prop_assert_eq!(hypergrid_reward(&m, &spec).unwrap(), r);
        }
        let mut sorted = coords.clone();
        sorted.sort();
        prop_assert_eq!(hypergrid_reward(&sorted, &spec).unwrap(), r);
        prop_assert!(r >= 0.1);
    }

    #[test]
    fn jsd_is_bounded_and_symmetric(w in prop::collection::vec((0.01f64..10.0, 0.01f64..10.0), 1..12)) {
        let (a, b): (Vec<f64>, Vec<f64>) = w.into_iter().unzip();
        let support: Vec<usize> = (0..a.len()).collect();
        let norm = |v: &[f64]| {
            let lw: Vec<f64> = v.iter().map(|x| x.ln()).collect();
            ExactDistribution::from_log_weights(support.clone(), &lw, 0.0).unwrap()
        };
        let (p, q) = (norm(&a), norm(&b));
        let d = jsd(&p, &q).unwrap();
        prop_assert!((-1e-15..=std::f64::consts::LN_2 + 1e-15).contains(&d));
        prop_assert!((d - jsd(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-15);
        prop_assert!(kl(&p, &q).unwrap() >= -1e-15);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_monotone(eps in 0.0f64..10.0, t_max in 1u64..10_000, t in 0u64..20_000) {
        let e = cosine_epsilon(eps, t, t_max);
        prop_assert!((0.0..=eps).contains(&e));
        prop_assert!(cosine_epsilon(eps, t + 1, t_max) <= e);
        if t >= t_max {
            prop_assert_eq!(e, 0.0);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = instance_rng(seed, 3);
        let depth = rng.gen_range(1..4);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..7)).collect();
        let mut net = Mlp::new(&sizes, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..sizes[depth]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = net.grad(&x, &up).unwrap();
        let f = |net: &Mlp, x: &[f64]| -> f64 { net.apply(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        let scale = g.params.iter().chain(&g.input).map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..net.num_params() {
            let p = net.params()[i];
            net.params_mut()[i] = p + h;
            let plus = f(&net, &x);
            net.params_mut()[i] = p - h;
            let minus = f(&net, &x);
            net.params_mut()[i] = p;
            prop_assert!(((plus - minus) / (2.0 * h) - g.params[i]).abs() < 1e-4 * scale);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            prop_assert!(((f(&net, &xp) - f(&net, &xm)) / (2.0 * h) - g.input[i]).abs() < 1e-4 * scale);
        }
    }

    #[test]
    fn importance_weights_are_normalized(seed in any::<u64>()) {
        let (env, policy) = instance(seed, false);
        let batch = full_support_batch(&env, &policy);
        let rw = reverse_importance_weights(&batch).unwrap();
        prop_assert!((rw.iter().sum::<f64>() / rw.len() as f64 - 1.0).abs() < 1e-12);
        let fw = forward_importance_weights(&env, &batch).unwrap();
        prop_assert!((fw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hvi_estimators_are_exact_on_full_support(seed in any::<u64>(), generic in any::<bool>()) {
        let (env, policy) = instance(seed, generic);
        let batch = full_support_batch(&env, &policy);
        let exact = expected_gradient_oracle(&policy, &env, Sampling::Forward, None).unwrap();
        let mut cache = PolicyCache::new();
        let rkl = reverse_kl_grad(&policy, &env, &mut cache, &batch, BaselineKind::None, &BaselineState::new(0.1).unwrap(), true, true).unwrap();
        prop_assert!(max_abs(&rkl.grad.forward, &exact.grad_kl_forward.forward) < 1e-10);
        prop_assert!(max_abs(&rkl.grad.backward, &exact.grad_kl_forward_wrt_backward.backward) < 1e-10);
        let fkl = forward_kl_grad(&policy, &env, &mut cache, &batch, true, true).unwrap();
        // grad_theta KL(P_B || P_F) = -E_PB[grad_theta log P_F].
        let pair = PairedDistributions::complete(&policy, &env, &mut cache).unwrap();
        let mut want = vec![0.0; policy.forward().num_params()];
        for (t, &p) in pair.items.iter().zip(&pair.bwd.probs) {
            let (f, _) = trajectory_scores(&policy, &env, &mut cache, t).unwrap();
            for (w, g) in want.iter_mut().zip(&f.forward) {
                *w -= p * g;
            }
        }
        prop_assert!(max_abs(&fkl.grad.forward, &want) < 1e-10);
        prop_assert!(max_abs(&fkl.grad.backward, &exact.grad_kl_backward.backward) < 1e-10);
    }

    #[test]
    fn kl_gradient_matches_finite_differences(seed in any::<u64>()) {
        let (env, mut policy) = instance(seed, false);
        let exact = expected_gradient_oracle(&policy, &env, Sampling::Forward, None).unwrap();
        let kl_at = |p: &PolicySet| {
            let pair = PairedDistributions::complete(p, &env, &mut PolicyCache::new()).unwrap();
            kl(&pair.fwd, &pair.bwd).unwrap()
        };
        let h = 1e-5;
        for dir in [Direction::Forward, Direction::Backward] {
            let analytic = match dir {
                Direction::Forward => exact.grad_kl_forward.forward.clone(),
                Direction::Backward => exact.grad_kl_forward_wrt_backward.backward.clone(),
            };
            for i in 0..analytic.len() {
                let v = policy.params_mut(dir)[i];
                policy.params_mut(dir)[i] = v + h;
                let plus = kl_at(&policy);
                policy.params_mut(dir)[i] = v - h;
                let minus = kl_at(&policy);
                policy.params_mut(dir)[i] = v;
                prop_assert!(((plus - minus) / (2.0 * h) - analytic[i]).abs() < 1e-6);
            }
        }
    }
}
