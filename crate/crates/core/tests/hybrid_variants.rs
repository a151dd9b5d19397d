use esdrl::config::RunConfig;
use esdrl::ddpg::{
    AgentBundle, DdpgConfig, Environment, InitMode, KvEnv, ObservationConfig, RuntimePolicy,
    TrainSession,
};
use esdrl::experiments::{run_variant, ComparisonConfig, PerturbationSchedule, VariantKind};
use esdrl::hybrid::SupervisorConfig;
use esdrl::kv::{BeamInit, Lattice};
use esdrl::reward::RewardConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Lattice, RewardConfig, RuntimePolicy, ComparisonConfig) {
    let lat = Lattice::reduced_beamline();
    let reward = RewardConfig::default();
    let init = BeamInit::new(3e-3, 3e-3, 0.0, 0.0);
    let env = KvEnv::new(
        lat.clone(),
        reward.clone(),
        ObservationConfig::default(),
        0.5,
        5,
        InitMode::Fixed(init),
    )
    .unwrap();
    let ddpg = DdpgConfig {
        hidden: vec![16, 16],
        actor_final_scale: 0.5,
        ..DdpgConfig::default()
    };
    let agent = AgentBundle::new(
        env.obs_dim(),
        env.act_dim(),
        &ddpg,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let policy = RuntimePolicy::new(agent.actor, TrainSession::policy_meta(&env)).unwrap();
    let cfg = ComparisonConfig {
        schedule: PerturbationSchedule {
            driven: [1, 6],
            drifted: 6,
            horizon: 80,
            ..PerturbationSchedule::default()
        },
        es: RunConfig::default().es_for(lat.len()).unwrap(),
        supervisor: SupervisorConfig::default(),
        init,
        windows: vec![[0, 80]],
    };
    (lat, reward, policy, cfg)
}

#[test]
fn hybrid_pinned_to_es_is_warm_started_es() {
    for seed in [3, 4] {
        let (lat, reward, policy, mut cfg) = setup(seed);
        cfg.supervisor.force_beta = Some(0);
        let hybrid = run_variant(VariantKind::Hybrid, &lat, &reward, Some(&policy), &cfg).unwrap();
        let warm = run_variant(VariantKind::EsWarm, &lat, &reward, Some(&policy), &cfg).unwrap();
        assert_eq!(hybrid.rewards(), warm.rewards());
        assert!(hybrid.betas().iter().all(|b| *b == 0));
    }
}

#[test]
fn hybrid_pinned_to_drl_is_drl() {
    let (lat, reward, policy, mut cfg) = setup(5);
    cfg.supervisor.force_beta = Some(1);
    let hybrid = run_variant(VariantKind::Hybrid, &lat, &reward, Some(&policy), &cfg).unwrap();
    let drl = run_variant(VariantKind::Drl, &lat, &reward, Some(&policy), &cfg).unwrap();
    assert_eq!(hybrid.rewards(), drl.rewards());
}

#[test]
fn es_variant_runs_without_a_policy() {
    let (lat, reward, _, cfg) = setup(6);
    let es = run_variant(VariantKind::Es, &lat, &reward, None, &cfg).unwrap();
    assert_eq!(es.rows.len(), 81);
    assert!(run_variant(VariantKind::Drl, &lat, &reward, None, &cfg).is_err());
}
