use esdrl::config::RunConfig;
use esdrl::ddpg::{PolicyMeta, RuntimePolicy};
use esdrl::es::{es_step, golden_ratios, EsConfig, EsState};
use esdrl::hybrid::{CombineRule, SupervisorConfig};
use esdrl::kv::{integrate, BeamInit, Lattice};
use esdrl::nnet::{Mlp, MlpSpec, OutputActivation};
use esdrl::reward::{penalty, reward_or_failure, RewardConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn es_config(n: usize, alpha: f64, gain: f64) -> EsConfig {
    let mut cfg = EsConfig::with_defaults(n, alpha);
    cfg.gain = gain;
    cfg
}

proptest! {
    #[test]
    fn es_update_never_exceeds_its_bound(
        params in prop::collection::vec(-1e3f64..1e3, 1..12),
        objective in -1e6f64..1e6,
        alpha in 1e-8f64..10.0,
        gain in -100f64..100.0,
        step in 0u64..1_000_000,
    ) {
        let cfg = es_config(params.len(), alpha, gain);
        let state = EsState { step_index: step, params };
        let next = es_step(&state, objective, &cfg).unwrap();
        prop_assert_eq!(next.step_index, step + 1);
        for (i, (a, b)) in state.params.iter().zip(&next.params).enumerate() {
            prop_assert!((b - a).abs() <= cfg.step_bound(i));
        }
    }

    #[test]
    fn default_es_configs_validate(n in 1usize..64, alpha in 1e-9f64..1.0) {
        let cfg = es_config(n, alpha, 15.0);
        prop_assert!(cfg.validate().is_ok());
        let r = golden_ratios(n);
        prop_assert!(r.iter().all(|x| (1.0..2.0).contains(x)));
    }

    #[test]
    fn reward_lies_in_unit_interval(
        strengths in prop::collection::vec(0.0f64..6.0, 6),
        x0 in 5e-4f64..8e-3,
        y0 in 5e-4f64..8e-3,
    ) {
        let lat = Lattice::reduced_beamline();
        let traj = integrate(&lat, &strengths, &BeamInit::new(x0, y0, 0.0, 0.0));
        let cfg = RewardConfig::default();
        let r = reward_or_failure(&traj, &cfg);
        prop_assert!(r > 0.0 && r <= 1.0);
        if let Ok(b) = penalty(&traj, &cfg) {
            prop_assert!(b.p_env >= 0.0 && b.p_smooth >= 0.0 && b.p_term >= 0.0);
            prop_assert_eq!(b.reward, r);
        } else {
            prop_assert!(!traj.feasible);
        }
    }

    #[test]
    fn and_rule_engages_only_inside_both_bands(x in 0.0f64..0.04, y in 0.0f64..0.04) {
        let sup = SupervisorConfig::default();
        let th = sup.threshold();
        prop_assert_eq!(sup.beta_from_means(x, y) == 1, x < th && y < th);
        let or = SupervisorConfig { rule: CombineRule::Or, ..sup.clone() };
        prop_assert_eq!(or.beta_from_means(x, y) == 1, x < th || y < th);
        prop_assert!(sup.beta_from_means(x, y) <= or.beta_from_means(x, y));
    }

    #[test]
    fn policy_settings_stay_inside_limits(
        seed in any::<u64>(),
        obs in prop::collection::vec(-1e4f64..1e4, 5),
        limit in 0.01f64..3.0,
    ) {
        let spec = MlpSpec {
            input: 5,
            hidden: vec![8],
            output: 3,
            output_activation: OutputActivation::TanhScaled { scale: vec![1.0; 3] },
        };
        let actor = Mlp::new(spec, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let q0 = vec![1.0, 2.0, 3.0];
        let policy = RuntimePolicy::new(
            actor,
            PolicyMeta { observation: None, q0: q0.clone(), limits: vec![limit; 3] },
        )
        .unwrap();
        for (q, base) in policy.settings(&obs).unwrap().iter().zip(&q0) {
            prop_assert!((q - base).abs() <= limit * (1.0 + 1e-15));
        }
    }

    #[test]
    fn config_survives_toml_round_trip(
        seed in 0..=i64::MAX as u64,
        alpha in 1e-6f64..1.0,
        w in 0.0f64..1e4,
        fraction in 0.05f64..0.95,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.es.alpha = alpha;
        cfg.reward.w_target = w;
        cfg.supervisor.safety_fraction = fraction;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unrecordable_seeds_are_rejected(seed in i64::MAX as u64 + 1..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }
}
