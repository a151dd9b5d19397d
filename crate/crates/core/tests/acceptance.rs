//! Acceptance checks, one per criterion.
//!
//! Runs without the libtest harness so that every criterion prints exactly
//! one PASS or FAIL line, whatever happens to the others. The process exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use esdrl::config::RunConfig;
use esdrl::ddpg::{
    evaluate, random_baseline, train, AgentBundle, DdpgConfig, Environment, InitMode, KvEnv,
    Minibatch, ObservationConfig, ReplayBuffer, RuntimePolicy, TrainSession, Transition,
};
use esdrl::es::{
    averaged_descent_check, averaged_scalar, es_continuous, es_step, es_step_masked,
    scalar_tracking_error, ContinuousEs, EsConfig, EsState, ScalarPlant, ScalarRun,
};
use esdrl::experiments::{
    run_1d_study, run_comparison, train_1d_agent, ComparisonConfig, PerturbationSchedule,
    Study1dConfig, VariantKind,
};
use esdrl::hybrid::{
    hybrid_step, supervise, HybridContext, HybridState, Plant, StaticPlant, SupervisorConfig,
};
use esdrl::kv::{integrate, integrate_profile, BeamInit, EnvelopeTrajectory, Lattice};
use esdrl::nnet::{polyak, Mlp, MlpSpec};
use esdrl::reward::{penalty, RewardConfig};
use esdrl::runlog::{Job, MANIFEST_FILE};
use esdrl::runner::{execute, rerun};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn budget(name: &str, start: Instant, limit: Duration) -> std::result::Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "{name} took {took:.1?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// 1. Drift and harmonic oracles.

fn bare_lattice(z_max: f64, grid_points: usize, emittance: f64) -> Lattice {
    Lattice {
        label: "oracle".into(),
        z_max,
        grid_points,
        grid_spacing: None,
        substeps: 1,
        emittance_x: emittance,
        emittance_y: emittance,
        perveance: 0.0,
        rigidity: 1.0,
        pipe_radius: 0.0254,
        magnets: vec![],
    }
}

const X0: f64 = 3e-3;
const EPS: f64 = 5e-5;

/// Force-free envelope with emittance only: `X = √(X₀² + (εz/X₀)²)`.
fn drift_oracle(z: f64) -> f64 {
    (X0 * X0 + (EPS * z / X0).powi(2)).sqrt()
}

fn drift_error(grid_points: usize, z_max: f64) -> (f64, f64) {
    let lat = bare_lattice(z_max, grid_points, EPS);
    let tr = integrate(&lat, &[], &BeamInit::new(X0, X0, 0.0, 0.0));
    assert!(tr.feasible);
    let rel =
        tr.z.iter()
            .zip(&tr.x)
            .map(|(z, x)| ((x - drift_oracle(*z)) / drift_oracle(*z)).abs())
            .fold(0.0, f64::max);
    let end = (tr.x[grid_points] - drift_oracle(z_max)).abs();
    (rel, end)
}

fn criterion_1() -> Check {
    let dz: f64 = 2.92e-3;
    let n = (1.0 / dz).ceil() as usize;
    let start = Instant::now();
    let (rel, _) = drift_error(n, n as f64 * dz);
    budget("drift oracle", start, Duration::from_secs(1))?;
    ensure!(rel < 1e-6, "drift oracle relative error {rel:e}");

    // Constant focusing, no emittance or space charge: X = X₀ cos(√κ z),
    // Y = Y₀ cosh(√κ z).
    let start = Instant::now();
    let kappa = 2.0;
    let lat = bare_lattice(n as f64 * dz, n, 0.0);
    let tr = integrate_profile(&lat, &vec![kappa; n], &BeamInit::new(X0, X0, 0.0, 0.0));
    budget("harmonic oracle", start, Duration::from_secs(1))?;
    ensure!(tr.feasible, "harmonic run failed: {:?}", tr.failure);
    let k = kappa.sqrt();
    let mut worst = 0.0f64;
    for ((z, x), y) in tr.z.iter().zip(&tr.x).zip(&tr.y) {
        worst = worst.max((x - X0 * (k * z).cos()).abs() / X0);
        worst = worst.max((y - X0 * (k * z).cosh()).abs() / X0);
    }
    ensure!(worst < 1e-8, "harmonic oracle error {worst:e}");
    Ok(format!("drift rel err {rel:.2e}, harmonic err {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. RK4 order.

fn criterion_2() -> Check {
    let errs: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&n| drift_error(n, 1.0).1)
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    ensure!(
        ratios.iter().all(|r| *r >= 7.2),
        "error ratios {ratios:?} (errors {errs:?})"
    );
    Ok(format!("error ratios {:.2?}", ratios))
}

// ---------------------------------------------------------------------------
// 3. Bounded update.

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut steps = 0usize;
    let mut tightest = f64::INFINITY;
    while steps < 100_000 {
        let n = rng.random_range(1..=22);
        let cfg = EsConfig {
            alpha: 10f64.powf(rng.random_range(-8.0..1.0)),
            omega: rng.random_range(1e-3..0.25),
            ratios: (0..n).map(|_| rng.random_range(1.0..2.0)).collect(),
            gain: rng.random_range(-100.0..100.0),
            dt: rng.random_range(0.01..1.0),
            maximize: rng.random_bool(0.5),
        };
        let mut state = EsState::new(
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-3.0..6.0)))
                .collect(),
        );
        for _ in 0..100 {
            let v = rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-3.0..3.0));
            let next = ok(es_step(&state, v, &cfg))?;
            for i in 0..n {
                let d = (next.params[i] - state.params[i]).abs();
                let bound = cfg.step_bound(i);
                ensure!(
                    d <= bound,
                    "step {steps}, coordinate {i}: |ΔQ| = {d:e} > bound {bound:e} at Q = {}",
                    state.params[i]
                );
                tightest = tightest.min(bound - d);
            }
            state = next;
            steps += 1;
        }
    }
    Ok(format!("{steps} steps, smallest slack {tightest:.3e}"))
}

// ---------------------------------------------------------------------------
// 4. Averaging.

fn criterion_4() -> Check {
    let j = |q: &[f64]| -((q[0] - 1.0).powi(2) + 2.0 * (q[1] + 0.5).powi(2));
    let mut cfg = EsConfig::with_defaults(2, 1e-4);
    cfg.gain = 2.0;
    let rep = ok(averaged_descent_check(&j, &cfg, &[-0.5, 0.5], 30_000))?;
    let rel = rep.relative_deviation();
    ensure!(
        rel < 0.05,
        "ES deviates {rel:.4} of the trajectory diameter from gradient flow"
    );

    let plant = ScalarPlant {
        a: 1.0,
        b0: 1.0,
        f: 1.0,
    };
    let w0 = 50.0;
    let mut sups = Vec::new();
    for m in [1.0, 2.0, 4.0, 8.0] {
        let es = ContinuousEs {
            alpha: 1.0,
            omega: w0 * m,
            gain: 10.0,
            maximize: true,
        };
        let run = ScalarRun {
            x0: 1.0,
            horizon: 5.0,
            dt: 0.02 / (w0 * m),
            ceiling: 100.0,
        };
        let actual = ok(es_continuous(&plant, &es, &run))?;
        let avg = averaged_scalar(&plant, &es, &ScalarRun { dt: 1e-3, ..run });
        sups.push(scalar_tracking_error(&actual, &avg));
    }
    ensure!(
        sups.windows(2).all(|w| w[1] < w[0]),
        "sup |x - x̄| not decreasing: {sups:?}"
    );
    Ok(format!(
        "quadratic deviation {rel:.4}, scalar sup errors {:.3?}",
        sups
    ))
}

// ---------------------------------------------------------------------------
// 5. Scalar study.

fn criterion_5() -> Check {
    let start = Instant::now();
    let cfg = Study1dConfig::default();
    let policy = ok(train_1d_agent(&cfg, 7))?;
    let r = ok(run_1d_study(&cfg, &policy))?;
    budget("scalar study", start, Duration::from_secs(120))?;

    // "Holds after convergence": from the first time V reaches 0.9 plus one
    // second, V never drops below 0.9 again.
    let holds = |t: &[f64], v: &[f64]| -> bool {
        let Some(k) = v.iter().position(|&x| x >= 0.9) else {
            return false;
        };
        let settle = t[k] + 1.0;
        t.iter()
            .zip(v)
            .filter(|(tt, _)| **tt >= settle)
            .all(|(_, x)| *x >= 0.9)
    };
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    ensure!(
        r.high.es.diverged_at.is_none() && holds(&r.high.es.t, &r.high.es.v),
        "high f: ES does not hold V ≥ 0.9"
    );
    ensure!(
        min(&r.high.drl.v) < 0.5,
        "high f: DRL never falls below 0.5"
    );
    ensure!(
        r.low.es.diverged_at.is_none() && holds(&r.low.es.t, &r.low.es.v),
        "low f: ES does not hold V ≥ 0.9"
    );
    ensure!(max(&r.low.drl.v) >= 0.9, "low f: DRL never reaches 0.9");
    Ok(format!(
        "high: ES min after settle ok, DRL min {:.3}; low: DRL max {:.3}; {:.1?}",
        min(&r.high.drl.v),
        max(&r.low.drl.v),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 6. Gradient fidelity.

fn unit_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn weighted_output(net: &Mlp, input: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    let out = net.forward_batch(input.view()).unwrap().output;
    (&out * upstream).sum()
}

/// Worst relative error of directional derivatives over parameter and
/// input probes.
fn gradient_check(
    spec: MlpSpec,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<f64, String> {
    let mut net = ok(Mlp::new(spec.clone(), 0.5, rng))?;
    let batch = 2;
    let input = Array2::from_shape_fn((batch, spec.input), |_| rng.random_range(-1.0..1.0));
    let upstream = Array2::from_shape_fn((batch, spec.output), |_| rng.random_range(-1.0..1.0));
    let cache = ok(net.forward_batch(input.view()))?;
    let mut grads = net.zero_grads();
    let d_input = ok(net.backward(&cache, upstream.view(), &mut grads))?;
    let h = 1e-6;
    let rel = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
    };
    let mut worst = 0.0f64;
    let theta = net.params.clone();
    for _ in 0..probes {
        let v = unit_direction(theta.len(), rng);
        let analytic: f64 = grads.iter().zip(&v).map(|(g, d)| g * d).sum();
        net.params = theta.iter().zip(&v).map(|(p, d)| p + h * d).collect();
        let up = weighted_output(&net, &input, &upstream);
        net.params = theta.iter().zip(&v).map(|(p, d)| p - h * d).collect();
        let down = weighted_output(&net, &input, &upstream);
        worst = worst.max(rel(analytic, (up - down) / (2.0 * h)));
    }
    net.params = theta;
    for _ in 0..probes {
        let v = unit_direction(batch * spec.input, rng);
        let dir = Array2::from_shape_vec((batch, spec.input), v).unwrap();
        let analytic = (&d_input * &dir).sum();
        let up = weighted_output(&net, &(&input + &(&dir * h)), &upstream);
        let down = weighted_output(&net, &(&input - &(&dir * h)), &upstream);
        worst = worst.max(rel(analytic, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (obs, act) = (1600, 22);
    let cfg = DdpgConfig::default();
    ensure!(
        cfg.hidden == vec![512, 512],
        "default hidden widths changed: {:?}",
        cfg.hidden
    );
    let actor = gradient_check(cfg.actor_spec(obs, act), 64, &mut rng)?;
    let critic = gradient_check(cfg.critic_spec(obs, act), 64, &mut rng)?;
    ensure!(
        actor < 1e-5 && critic < 1e-5,
        "relative errors actor {actor:e}, critic {critic:e}"
    );
    Ok(format!(
        "worst relative error actor {actor:.2e}, critic {critic:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 7. DDPG mechanics and training smoke.

fn random_batch(rng: &mut ChaCha8Rng, n: usize, done: bool, r: f64) -> Minibatch {
    let ts: Vec<Transition> = (0..n)
        .map(|_| {
            let s: Arc<[f64]> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s_next: Arc<[f64]> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            Transition {
                s,
                a: vec![rng.random_range(-1.0..1.0); 2],
                r,
                s_next,
                done,
            }
        })
        .collect();
    Minibatch::from_transitions(&ts.iter().collect::<Vec<_>>()).unwrap()
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let small = DdpgConfig {
        hidden: vec![16, 16],
        batch_size: 8,
        replay_capacity: 64,
        ..DdpgConfig::default()
    };

    // Terminal transitions never see the target networks.
    let mut agent = ok(AgentBundle::new(4, 2, &small, &mut rng))?;
    let b = random_batch(&mut rng, 8, true, 0.25);
    let before = ok(agent.td_targets(&b))?;
    agent.critic_target.params.iter_mut().for_each(|p| *p = 1e6);
    agent.actor_target.params.iter_mut().for_each(|p| *p = -3.0);
    let after = ok(agent.td_targets(&b))?;
    ensure!(
        before.iter().chain(after.iter()).all(|y| *y == 0.25),
        "terminal targets depend on target networks"
    );

    // After n soft updates toward a fixed online vector the target lags by (1 - τ)ⁿ.
    let tau = 0.005;
    let online: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let start: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut target = start.clone();
    for n in 1..=1000 {
        polyak(&mut target, &online, tau);
        if n % 100 == 0 {
            let lag = (1.0 - tau).powi(n);
            for ((t, o), s) in target.iter().zip(&online).zip(&start) {
                let want = o + lag * (s - o);
                ensure!(
                    (t - want).abs() <= 1e-12,
                    "Polyak after {n} updates: {t} vs {want}"
                );
            }
        }
    }

    // Uniform replay sampling, chi-square with 99 degrees of freedom.
    let mut buf = ok(ReplayBuffer::new(100))?;
    for k in 0..250 {
        let s: Arc<[f64]> = Arc::from(vec![k as f64]);
        buf.push(Transition {
            s: s.clone(),
            a: vec![0.0],
            r: 0.0,
            s_next: s,
            done: false,
        });
    }
    let mut counts = [0usize; 100];
    let draws = 200_000;
    for _ in 0..draws / 100 {
        for i in ok(buf.sample_indices(100, &mut rng))? {
            counts[i] += 1;
        }
    }
    let expected = draws as f64 / 100.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 0.999 quantile of χ²(99).
    ensure!(chi2 < 148.23, "replay chi-square {chi2:.1}");

    // Reduced-scale training against a random policy.
    let start_t = Instant::now();
    let lat = Lattice::reduced_beamline();
    ensure!(
        lat.len() == 6 && lat.grid_points == 400,
        "reduced lattice is not 6 magnets on 400 points"
    );
    let cfg = DdpgConfig {
        hidden: vec![64, 64],
        ..DdpgConfig::default()
    };
    let init = BeamInit::new(3e-3, 3e-3, 0.0, 0.0);
    let mut env = ok(KvEnv::new(
        lat,
        RewardConfig::default(),
        cfg.observation.clone(),
        0.5,
        50,
        InitMode::Fixed(init),
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let baseline = ok(random_baseline(&mut env, 20, &mut rng))?;
    let mut agent = ok(AgentBundle::new(
        env.obs_dim(),
        env.act_dim(),
        &cfg,
        &mut rng,
    ))?;
    ok(train(&mut env, &mut agent, &cfg, 200, &mut rng))?;
    let trained = ok(evaluate(&mut env, 10, &mut rng, |s, _| agent.act(s)))?;
    budget("training smoke", start_t, Duration::from_secs(600))?;
    ensure!(
        trained >= 1.5 * baseline,
        "trained {trained:.3} < 1.5 × random {baseline:.3}"
    );
    Ok(format!(
        "chi2 {chi2:.1}; smoke trained {trained:.3} vs random {baseline:.3} ({:.2}×) in {:.0?}",
        trained / baseline,
        start_t.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 8. Supervisor law and channel exclusivity.

/// One interval, so the path means equal `x` and `y` exactly.
fn flat_trajectory(n: usize, x: f64, y: f64) -> EnvelopeTrajectory {
    EnvelopeTrajectory {
        z: (0..=n).map(|k| k as f64).collect(),
        x: vec![x; n + 1],
        y: vec![y; n + 1],
        xp: vec![0.0; n + 1],
        yp: vec![0.0; n + 1],
        feasible: true,
        failure: None,
    }
}

fn criterion_8() -> Check {
    let sup = SupervisorConfig::default();
    let th = sup.threshold();
    ensure!((th - 17.78e-3).abs() < 1e-15, "threshold {th}");
    let grid = [
        1e-9,
        5e-3,
        0.017,
        th.next_down(),
        th,
        th.next_up(),
        0.0178,
        0.02,
        0.0254,
        0.05,
    ];
    let mut cases = 0;
    for &x in &grid {
        for &y in &grid {
            let want = u8::from(x < th && y < th);
            ensure!(sup.beta_from_means(x, y) == want, "β({x}, {y}) != {want}");
            ensure!(
                supervise(&flat_trajectory(1, x, y), &sup) == want,
                "supervise({x}, {y}) != {want}"
            );
            cases += 1;
        }
    }

    // Channel exclusivity on the reduced lattice.
    let lat = Lattice::reduced_beamline();
    let init = BeamInit::new(3e-3, 3e-3, 0.0, 0.0);
    let reward = RewardConfig::default();
    let env = ok(KvEnv::new(
        lat.clone(),
        reward.clone(),
        ObservationConfig::default(),
        0.5,
        5,
        InitMode::Fixed(init),
    ))?;
    let ddpg = DdpgConfig {
        hidden: vec![16, 16],
        actor_final_scale: 0.5,
        ..DdpgConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut policies = Vec::new();
    for _ in 0..2 {
        let agent = ok(AgentBundle::new(
            env.obs_dim(),
            env.act_dim(),
            &ddpg,
            &mut rng,
        ))?;
        policies.push(ok(RuntimePolicy::new(
            agent.actor,
            TrainSession::policy_meta(&env),
        ))?);
    }
    let plant = StaticPlant {
        lattice: lat.clone(),
        reward: reward.clone(),
        init,
        pinned: vec![(0, lat.magnets[0].nominal_strength)],
    };
    let es = EsConfig::with_defaults(lat.len(), 2e-3);
    let mask = vec![true; lat.len()];
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let q0 = lat.nominal_strengths();
    let ev0 = plant.evaluate(&q0);

    // β = 1: exactly the pinned recommendation, whatever the ES state holds.
    for policy in &policies {
        let sup1 = SupervisorConfig {
            force_beta: Some(1),
            ..sup.clone()
        };
        let ctx = HybridContext {
            policy,
            es: &es,
            es_mask: &mask,
            supervisor: &sup1,
        };
        let mut state = HybridState::new(q0.clone());
        state.es.params.iter_mut().for_each(|p| *p += 0.3);
        let step = ok(hybrid_step(
            &mut state, &ctx, &plant, &q0, &ev0.traj, ev0.reward,
        ))?;
        let mut want = ok(policy.recommend(&ev0.traj))?;
        plant.pin(&mut want);
        ensure!(
            step.beta == 1 && bits(&step.q_next) == bits(&want),
            "β = 1 output is not the DRL candidate"
        );
    }

    // β = 0: the ES update from the handoff seed, then from the current
    // settings; the second step must not depend on the policy at all.
    let sup0 = SupervisorConfig {
        force_beta: Some(0),
        ..sup.clone()
    };
    let mut second = Vec::new();
    for policy in &policies {
        let ctx = HybridContext {
            policy,
            es: &es,
            es_mask: &mask,
            supervisor: &sup0,
        };
        let mut state = HybridState::new(q0.clone());
        let s0 = ok(hybrid_step(
            &mut state, &ctx, &plant, &q0, &ev0.traj, ev0.reward,
        ))?;
        let mut cand = ok(policy.recommend(&ev0.traj))?;
        plant.pin(&mut cand);
        let cand_v = plant.evaluate(&cand).reward;
        let want = ok(es_step_masked(
            &EsState {
                step_index: 0,
                params: cand,
            },
            cand_v,
            &es,
            Some(&mask),
        ))?;
        ensure!(
            s0.beta == 0 && bits(&s0.q_next) == bits(&want.params),
            "handoff output is not the ES step"
        );

        let q1 = q0.iter().map(|q| q * 1.01).collect::<Vec<_>>();
        let ev1 = plant.evaluate(&q1);
        let s1 = ok(hybrid_step(
            &mut state, &ctx, &plant, &q1, &ev1.traj, ev1.reward,
        ))?;
        let want = ok(es_step_masked(
            &EsState {
                step_index: 1,
                params: q1.clone(),
            },
            ev1.reward,
            &es,
            Some(&mask),
        ))?;
        ensure!(
            bits(&s1.q_next) == bits(&want.params),
            "β = 0 output is not the ES step"
        );
        second.push(bits(&s1.q_next));
    }
    ensure!(
        second[0] == second[1],
        "ES channel output depends on the policy"
    );
    Ok(format!(
        "{cases} table cases, threshold {:.5} m, channels bit-identical",
        th
    ))
}

// ---------------------------------------------------------------------------
// 9. Perturbation comparison with the shipped checkpoint.

const DESK_POLICY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/desk_policy.ckpt");

fn criterion_9() -> Check {
    let start = Instant::now();
    let policy = ok(RuntimePolicy::load(Path::new(DESK_POLICY)))?;
    let run_cfg = RunConfig::default();
    let lat = Lattice::desk_beamline();
    let cfg = ComparisonConfig {
        schedule: PerturbationSchedule::default(),
        es: ok(run_cfg.es_for(lat.len()))?,
        supervisor: SupervisorConfig::default(),
        init: run_cfg.init,
        windows: vec![[100, 400]],
    };
    let reward = RewardConfig::default();
    let cmp = ok(run_comparison(
        &VariantKind::ALL,
        &lat,
        &reward,
        Some(&policy),
        &cfg,
    ))?;
    let quiet = ComparisonConfig {
        schedule: PerturbationSchedule {
            horizon: 100,
            ..PerturbationSchedule::quiet()
        },
        ..cfg.clone()
    };
    let steady = ok(run_comparison(
        &[VariantKind::Hybrid],
        &lat,
        &reward,
        Some(&policy),
        &quiet,
    ))?;
    budget("perturbation comparison", start, Duration::from_secs(1800))?;

    let mean = |k: VariantKind| cmp.summary.means[&k.to_string()][0];
    let (hyb, drl, es, warm) = (
        mean(VariantKind::Hybrid),
        mean(VariantKind::Drl),
        mean(VariantKind::Es),
        mean(VariantKind::EsWarm),
    );
    let steady_v = steady.traces[0].window_mean(50, 100);
    let hybrid = cmp.trace(VariantKind::Hybrid).unwrap();
    // The plateau is where the drift holds its full shift.
    let floor = hybrid
        .rows
        .iter()
        .filter(|r| (200..=300).contains(&r.t))
        .map(|r| r.reward)
        .fold(f64::INFINITY, f64::min);
    let betas: String = hybrid
        .betas()
        .iter()
        .map(|b| if *b == 1 { '1' } else { '0' })
        .collect();
    let cycles = betas.matches("10").count().min(betas.matches("01").count());
    let has_cycle = betas
        .find("10")
        .is_some_and(|i| betas[i + 1..].contains("01"));
    let report = format!(
        "means t=100..400 hybrid {hyb:.3} drl {drl:.3} es {es:.3} es-warm {warm:.3}; \
         plateau floor {floor:.3} vs 0.6 × steady {steady_v:.3}; {cycles} β cycle(s); {:.0?}",
        start.elapsed()
    );
    let mut failed = Vec::new();
    if !(hyb > drl && hyb > es && hyb > warm) {
        failed.push("(a) hybrid mean is not the highest");
    }
    if !(floor > 0.6 * steady_v) {
        failed.push("(b) hybrid drops below 0.6 × steady value");
    }
    if !has_cycle {
        failed.push("(c) no 1→0→1 cycle in β");
    }
    ensure!(failed.is_empty(), "{}: {report}", failed.join(", "));
    Ok(report)
}

// ---------------------------------------------------------------------------
// 10. Reward bounds and monotonicity.

fn random_trajectory(rng: &mut ChaCha8Rng) -> EnvelopeTrajectory {
    let n = rng.random_range(2..200);
    let scale = 10f64.powf(rng.random_range(-5.0..-0.5));
    let slope = 10f64.powf(rng.random_range(-6.0..0.0));
    EnvelopeTrajectory {
        z: (0..=n).map(|k| k as f64 * 0.01).collect(),
        x: (0..=n)
            .map(|_| rng.random_range(1e-6..1.0) * scale)
            .collect(),
        y: (0..=n)
            .map(|_| rng.random_range(1e-6..1.0) * scale)
            .collect(),
        xp: (0..=n)
            .map(|_| rng.random_range(-1.0..1.0) * slope)
            .collect(),
        yp: (0..=n)
            .map(|_| rng.random_range(-1.0..1.0) * slope)
            .collect(),
        feasible: true,
        failure: None,
    }
}

fn only(term: usize) -> RewardConfig {
    let mut c = RewardConfig {
        w_envelope: 0.0,
        w_smooth: 0.0,
        w_round: 0.0,
        w_flat: 0.0,
        w_target: 0.0,
        ..RewardConfig::default()
    };
    let d = RewardConfig::default();
    match term {
        0 => c.w_envelope = d.w_envelope,
        1 => c.w_smooth = d.w_smooth,
        2 => c.w_round = d.w_round,
        3 => c.w_flat = d.w_flat,
        _ => c.w_target = d.w_target,
    }
    c
}

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = RewardConfig::default();
    // Synthetic trajectories plus real integrations with random settings.
    let lat = Lattice::reduced_beamline();
    let init = BeamInit::new(3e-3, 3e-3, 0.0, 0.0);
    let mut feasible = 0;
    let mut lo = f64::INFINITY;
    while feasible < 10_000 {
        let tr = if feasible % 10 == 0 {
            let u: Vec<f64> = lat
                .nominal_strengths()
                .iter()
                .map(|q| q * rng.random_range(0.0..2.0))
                .collect();
            integrate(&lat, &u, &init)
        } else {
            random_trajectory(&mut rng)
        };
        if !tr.feasible {
            continue;
        }
        let r = ok(penalty(&tr, &cfg))?.reward;
        ensure!(r > 0.0 && r <= 1.0, "reward {r} outside (0, 1]");
        lo = lo.min(r);
        feasible += 1;
    }

    let band = cfg.r_band();
    for k in 0..1000 {
        let term = k % 5;
        let c = only(term);
        let base = random_trajectory(&mut rng);
        let n = base.intervals();
        let mut t = base.clone();
        let d = rng.random_range(1e-6..1e-2);
        match term {
            // Envelope: widen every path sample, beyond the band.
            0 => t.x[..n].iter_mut().for_each(|x| *x += band + d),
            1 => t.xp[..n].iter_mut().for_each(|x| *x += d * x.signum()),
            2 => {
                t.x[n] = if t.x[n] >= t.y[n] {
                    t.x[n] + d
                } else {
                    (t.x[n] - d).max(1e-12)
                }
            }
            3 => t.xp[n] += d * if t.xp[n] >= 0.0 { 1.0 } else { -1.0 },
            _ => {
                let above = t.x[n] * t.x[n] + t.y[n] * t.y[n] >= c.r_tt_sq();
                t.y[n] = if above {
                    t.y[n] + d
                } else {
                    (t.y[n] - d).max(1e-12)
                };
            }
        }
        let (r0, r1) = (ok(penalty(&base, &c))?.reward, ok(penalty(&t, &c))?.reward);
        ensure!(
            r1 <= r0,
            "term {term}: perturbation {k} raised reward {r0} → {r1}"
        );
        if term == 0 {
            ensure!(r1 < r0, "envelope term did not respond: {r0} → {r1}");
        }
        // Raising any single weight never raises the reward.
        let mut heavier = cfg.clone();
        match term {
            0 => heavier.w_envelope *= 2.0,
            1 => heavier.w_smooth *= 2.0,
            2 => heavier.w_round *= 2.0,
            3 => heavier.w_flat *= 2.0,
            _ => heavier.w_target *= 2.0,
        }
        ensure!(
            ok(penalty(&base, &heavier))?.reward <= ok(penalty(&base, &cfg))?.reward,
            "weight {term} raised reward"
        );
    }
    Ok(format!(
        "10000 feasible trajectories, min R {lo:.3e}; 1000 directed perturbations"
    ))
}

// ---------------------------------------------------------------------------
// 11. Reproducibility from the manifest.

const TINY: &str = r#"
lattice = "builtin:reduced"
seed = 11

[ddpg]
hidden = [16, 16]
horizon = 5
batch_size = 8
warmup_batches = 1

[ddpg.observation]
stride = 20

[curriculum]
group_sizes = [2, 2, 2]

[train]
phase = "I"
max_episodes = 8
"#;

fn same_tree(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut names: Vec<_> = ok(std::fs::read_dir(a))?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let (x, y) = (
            ok(std::fs::read(a.join(name)))?,
            ok(std::fs::read(b.join(name)))?,
        );
        ensure!(
            x == y,
            "{} differs between the run and its re-run",
            name.to_string_lossy()
        );
    }
    Ok(names.len())
}

fn criterion_11() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let mut compared = 0;
    let train_cfg = ok(RunConfig::from_toml_str(TINY))?;
    let quick = vec![
        "schedule.horizon=20".to_string(),
        "experiment.variants=[\"es\"]".into(),
    ];
    let exp_cfg = ok(RunConfig::from_toml_with("seed = 5", &quick))?;
    for (name, job, cfg, overrides) in [
        ("train", Job::Train { resume: None }, train_cfg, vec![]),
        ("experiment", Job::Experiment, exp_cfg, quick.clone()),
    ] {
        let first = dir.path().join(format!("{name}-a"));
        let again = dir.path().join(format!("{name}-b"));
        ok(execute(&job, &cfg, &overrides, &first))?;
        ok(rerun(&first.join(MANIFEST_FILE), &again))?;
        compared += same_tree(&first, &again)?;
    }
    Ok(format!(
        "{compared} files bit-identical after re-running from manifests"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("KV drift and harmonic oracles", criterion_1),
        ("RK4 convergence order", criterion_2),
        ("bounded ES update", criterion_3),
        ("ES averaging", criterion_4),
        ("scalar study pattern", criterion_5),
        ("gradient fidelity", criterion_6),
        ("DDPG mechanics and training smoke", criterion_7),
        ("supervisor law and channel exclusivity", criterion_8),
        ("perturbation comparison", criterion_9),
        ("reward bounds and monotonicity", criterion_10),
        ("manifest reproducibility", criterion_11),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", k + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {id:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
