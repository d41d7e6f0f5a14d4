//! One line per acceptance criterion. Tolerances are pinned here.

use std::time::Instant;

use gfnvi::exact::{
    enumerate_trajectories, flow_propagate, forward_trajectory_distribution, terminal_marginal,
};
use gfnvi::export::{mode_masses, DistributionExport};
use gfnvi::hypergrid::mode_regions;
use gfnvi::nn::Mlp;
use gfnvi::objectives::{BaselineKind, ObjectiveSpec};
use gfnvi::trainer::{PolicyConfig, PolicyKind, TrainConfig, Trainer};
use gfnvi::verify::{
    baseline_lockstep, instance_rng, random_dag_env, random_layered_env, random_policy, run_suite,
    Check, OracleModel, Suite,
};
use gfnvi::{BackwardKind, BehaviorConfig, Env, EnvSpec, HypergridSpec, PolicyCache};
use rand::Rng;

const SEED: u64 = 0;
const IDENTITY_TOL: f64 = 1e-8;
const P1_RUNTIME_S: f64 = 10.0;
const LOCKSTEP_TOL: f64 = 1e-10;
const FLOW_TOL: f64 = 1e-12;
const FD_REL_TOL: f64 = 1e-4;
const P8_JSD: f64 = 0.01;
const P8_BUDGET: u64 = 200_000;
const P8_RATIO: f64 = 2.0;
const P8_MODE_MASS: f64 = 0.05;
const P8_RUNTIME_S: f64 = 15.0 * 60.0;

/// Parts that cannot hold in general, with the reason. They still print as
/// failures; the test only tolerates exactly these.
const KNOWN_UNATTAINABLE: &[(&str, &str, &str)] = &[(
    "P6",
    "trace at E[c] <= trace at 0",
    "the covariance trace is quadratic in b with minimum at b*, so the mean \
     baseline beats 0 only when E[c] lies between 0 and 2b*; random instances \
     violate this",
)];

struct Part {
    name: String,
    ok: bool,
    detail: String,
}

impl Part {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }
}

fn max_of(checks: &[Check], pred: impl Fn(&Check) -> bool) -> (f64, bool) {
    checks
        .iter()
        .filter(|c| pred(c))
        .fold((0.0, true), |(m, ok), c| {
            (m.max(c.discrepancy), ok && c.passed())
        })
}

fn identity_part(checks: &[Check], name: &str, pred: impl Fn(&Check) -> bool) -> Part {
    let n = checks.iter().filter(|c| pred(c)).count();
    let (worst, ok) = max_of(checks, pred);
    Part::new(
        name,
        ok && n > 0,
        format!("max {worst:.2e} over {n} checks"),
    )
}

fn p1() -> Vec<Part> {
    let start = Instant::now();
    let checks = run_suite(Suite::TbKl, SEED, 20, OracleModel::Tabular).unwrap();
    let secs = start.elapsed().as_secs_f64();
    vec![
        identity_part(&checks, "E_PF[grad L_TB] = 2 grad KL(PF||PB)", |c| {
            c.identity.starts_with("E_PF") && !c.identity.contains("invariant")
        }),
        identity_part(&checks, "invariance to log Z +- 5", |c| {
            c.identity.contains("invariant")
        }),
        Part::new("runtime", secs < P1_RUNTIME_S, format!("{secs:.2} s")),
    ]
}

fn p2() -> Vec<Part> {
    let checks = run_suite(Suite::TbKl, SEED, 20, OracleModel::Tabular).unwrap();
    vec![identity_part(
        &checks,
        "E_PB[grad L_TB] = 2 grad KL(PB||PF)",
        |c| c.identity.starts_with("E_PB"),
    )]
}

fn p3() -> Vec<Part> {
    let checks = run_suite(Suite::Surrogate, SEED, 20, OracleModel::Tabular).unwrap();
    vec![identity_part(
        &checks,
        "surrogate identity at 3 values of log Z",
        |_| true,
    )]
}

fn p4() -> Vec<Part> {
    let checks = run_suite(Suite::Subnvi, SEED, 20, OracleModel::Tabular).unwrap();
    vec![
        identity_part(&checks, "per-junction identities", |c| {
            c.identity.starts_with("k=")
        }),
        identity_part(&checks, "hubs {0,L} bitwise", |c| {
            c.identity.contains("bitwise")
        }),
        identity_part(&checks, "hubs at every layer = DB", |c| {
            c.identity.contains("DB")
        }),
    ]
}

fn p5() -> Vec<Part> {
    let r = baseline_lockstep(100, SEED, 0.1, 0.01).unwrap();
    vec![
        Part::new(
            "parameter divergence",
            r.max_param_divergence < LOCKSTEP_TOL,
            format!("{:.2e} over {} steps", r.max_param_divergence, r.steps),
        ),
        Part::new(
            "b_global = -log Z",
            r.max_baseline_gap < LOCKSTEP_TOL,
            format!("{:.2e}", r.max_baseline_gap),
        ),
    ]
}

fn mlp_fd_relative_error() -> f64 {
    let mut rng = instance_rng(SEED, 99);
    let mut worst: f64 = 0.0;
    for sizes in [vec![4, 6, 3], vec![5, 8, 8, 2], vec![3, 1]] {
        let mut net = Mlp::new(&sizes, &mut rng).unwrap();
        let input: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..*sizes.last().unwrap())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let analytic = net.grad(&input, &up).unwrap().params;
        let f = |net: &Mlp| -> f64 {
            net.apply(&input)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let mut num = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let p = net.params()[i];
            net.params_mut()[i] = p + h;
            let plus = f(&net);
            net.params_mut()[i] = p - h;
            let minus = f(&net);
            net.params_mut()[i] = p;
            num[i] = (plus - minus) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = num.iter().map(|v| v.abs()).fold(0.0, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}

fn p6() -> Vec<Part> {
    let mut flow_gap: f64 = 0.0;
    for i in 0..50 {
        let mut rng = instance_rng(SEED + 1, i);
        let env = if i % 2 == 0 {
            random_layered_env(&mut rng).unwrap()
        } else {
            let n = rng.gen_range(3..=10);
            random_dag_env(&mut rng, n).unwrap()
        };
        let policy = random_policy(&env, OracleModel::Tabular, &mut rng).unwrap();
        let flow = flow_propagate(&policy, &env).unwrap();
        let trajs = enumerate_trajectories(&policy, &env, &mut PolicyCache::new()).unwrap();
        let enumerated = terminal_marginal(&forward_trajectory_distribution(&trajs).unwrap());
        assert_eq!(flow.support, enumerated.support);
        for (a, b) in flow.probs.iter().zip(&enumerated.probs) {
            flow_gap = flow_gap.max((a - b).abs());
        }
    }
    let fd = mlp_fd_relative_error();

    let mut dpi = run_suite(Suite::Dpi, SEED, 20, OracleModel::Tabular).unwrap();
    dpi.extend(run_suite(Suite::Dpi, SEED, 10, OracleModel::Mlp).unwrap());
    let base = run_suite(Suite::Baseline, SEED, 20, OracleModel::Tabular).unwrap();
    let ordering = |name: &'static str| {
        let rel: Vec<&Check> = base.iter().filter(|c| c.identity == name).collect();
        let fails = rel.iter().filter(|c| !c.passed()).count();
        Part::new(
            name,
            fails == 0,
            format!("{fails}/{} instances violate", rel.len()),
        )
    };
    vec![
        Part::new(
            "flow_propagate = enumeration",
            flow_gap < FLOW_TOL,
            format!("max {flow_gap:.2e} on 50 DAGs"),
        ),
        Part::new(
            "MLP gradient vs finite differences",
            fd < FD_REL_TOL,
            format!("relative {fd:.2e}"),
        ),
        identity_part(&dpi, "data-processing inequality, both KLs", |_| true),
        ordering("trace at b* <= trace at E[c]"),
        ordering("trace at E[c] <= trace at 0"),
    ]
}

fn p7_p9() -> (Vec<Part>, Vec<Part>) {
    let checks = run_suite(Suite::FlowSolution, SEED, 10, OracleModel::Tabular).unwrap();
    let p7 = vec![
        identity_part(&checks, "solved TB loss < 1e-16", |c| {
            c.identity.contains("max per-trajectory loss")
        }),
        identity_part(&checks, "solved TB: JSD < 1e-6", |c| {
            c.identity.starts_with("solved TB: JSD")
        }),
        identity_part(&checks, "constructed flows: phat = pcheck", |c| {
            c.identity.contains("phat_k")
        }),
        identity_part(&checks, "constructed flows: JSD < 1e-6", |c| {
            c.identity.starts_with("constructed flows: JSD")
        }),
    ];
    let p9 = vec![identity_part(&checks, "Pearson = 1 +- 1e-9", |c| {
        c.identity.contains("Pearson")
    })];
    (p7, p9)
}

#[derive(Clone, Copy, PartialEq)]
enum Run {
    TbOff,
    TbOn,
    RklOn,
}

fn p8_config(run: Run, seed: u64) -> TrainConfig {
    let env = EnvSpec::Hypergrid(HypergridSpec::new(8, 2, 0.1).unwrap());
    let objective = match run {
        Run::RklOn => ObjectiveSpec::reverse_kl(BaselineKind::Global, 0.1),
        _ => ObjectiveSpec::tb(),
    };
    let mut c = TrainConfig::new(env, objective);
    c.policy = PolicyConfig {
        kind: PolicyKind::Mlp,
        hidden: vec![64, 64],
        backward: BackwardKind::Learned,
    };
    c.behavior = match run {
        Run::TbOff => BehaviorConfig::epsilon_shift(1.0, 1500),
        _ => BehaviorConfig::on_policy(),
    };
    c.lr_pf = 2e-3;
    c.lr_pb = 1e-5;
    c.total_trajectories = P8_BUDGET;
    c.eval_every = 20_000;
    c.seed = seed;
    c
}

struct P8Result {
    run: Run,
    best_jsd: f64,
    final_jsd: f64,
    min_mode_mass: f64,
}

fn p8_single(run: Run, seed: u64) -> P8Result {
    let mut t = Trainer::new(p8_config(run, seed)).unwrap();
    t.run().unwrap();
    let rows = t.rows();
    let spec = HypergridSpec::new(8, 2, 0.1).unwrap();
    let env = Env::hypergrid(&spec).unwrap();
    let export = DistributionExport::from_policy(t.policy(), &env).unwrap();
    let masses = mode_masses(&export, &mode_regions(&spec).unwrap());
    assert_eq!(masses.len(), 4);
    P8Result {
        run,
        best_jsd: rows
            .iter()
            .filter(|r| r.trajectories_seen <= P8_BUDGET)
            .map(|r| r.jsd)
            .fold(f64::INFINITY, f64::min),
        final_jsd: rows.last().unwrap().jsd,
        min_mode_mass: masses.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

fn p8() -> Vec<Part> {
    let start = Instant::now();
    let jobs: Vec<(Run, u64)> = [Run::TbOff, Run::TbOn, Run::RklOn]
        .into_iter()
        .flat_map(|r| (0..5).map(move |s| (r, s)))
        .collect();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len());
    let chunks: Vec<Vec<(Run, u64)>> = (0..threads)
        .map(|k| jobs.iter().copied().skip(k).step_by(threads).collect())
        .collect();
    let results: Vec<P8Result> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&(r, s)| p8_single(r, s))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect()
    });
    let secs = start.elapsed().as_secs_f64();
    let of = |run| results.iter().filter(move |r| r.run == run);
    let worst_best = of(Run::TbOff).map(|r| r.best_jsd).fold(0.0, f64::max);
    let mean = |run| of(run).map(|r| r.final_jsd).sum::<f64>() / 5.0;
    let (tb, rkl) = (mean(Run::TbOn), mean(Run::RklOn));
    let ratio = tb.max(rkl) / tb.min(rkl);
    let mass = of(Run::TbOff)
        .map(|r| r.min_mode_mass)
        .fold(f64::INFINITY, f64::min);
    vec![
        Part::new(
            "(a) off-policy TB JSD < 0.01 within 2e5",
            worst_best < P8_JSD,
            format!("worst seed {worst_best:.2e}"),
        ),
        Part::new(
            "(b) on-policy TB vs ReverseKL final JSD within 2x",
            ratio <= P8_RATIO,
            format!("5-seed means {tb:.2e} vs {rkl:.2e}, ratio {ratio:.2}"),
        ),
        Part::new(
            "(c) every mode region >= 5% mass",
            mass >= P8_MODE_MASS,
            format!("smallest {mass:.3}"),
        ),
        Part::new(
            "runtime",
            secs < P8_RUNTIME_S,
            format!("{secs:.1} s for 15 runs"),
        ),
    ]
}

fn main() {
    assert_eq!(gfnvi::verify::TABULAR_TOLERANCE, IDENTITY_TOL);
    let (p7, p9) = p7_p9();
    let criteria: Vec<(&str, Vec<Part>)> = vec![
        ("P1", p1()),
        ("P2", p2()),
        ("P3", p3()),
        ("P4", p4()),
        ("P5", p5()),
        ("P6", p6()),
        ("P7", p7),
        ("P8", p8()),
        ("P9", p9),
    ];
    let mut unexpected = Vec::new();
    for (id, parts) in &criteria {
        let ok = parts.iter().all(|p| p.ok);
        let detail: Vec<String> = parts
            .iter()
            .map(|p| {
                format!(
                    "{}{}: {}",
                    if p.ok { "" } else { "[FAILED] " },
                    p.name,
                    p.detail
                )
            })
            .collect();
        println!(
            "{id} {} | {}",
            if ok { "PASS" } else { "FAIL" },
            detail.join("; ")
        );
        for p in parts.iter().filter(|p| !p.ok) {
            match KNOWN_UNATTAINABLE
                .iter()
                .find(|(cid, part, _)| cid == id && *part == p.name)
            {
                Some((_, _, why)) => println!("   known: {why}"),
                None => unexpected.push(format!("{id}: {}", p.name)),
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
