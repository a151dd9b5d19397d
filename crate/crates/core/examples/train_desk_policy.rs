//! Trains the desk-scale policy shipped in `assets/desk_policy.ckpt`.
//!
//! Usage: `cargo run --release --example train_desk_policy -- OUT.ckpt`
//!
//! The agent sees the full desk beamline with the two driven magnets pinned
//! to random sinusoids and magnet 10 displaced by up to 0.15 m per episode.
//! About 15 minutes on one core.

use std::path::PathBuf;
use std::time::Instant;

use esdrl::ddpg::{run_episode, DdpgConfig, Disturbance, InitMode, KvEnv, RuntimePolicy, TrainSession};
use esdrl::kv::{BeamInit, Lattice};
use esdrl::reward::RewardConfig;

const EPISODES: usize = 1000;
const SEED: u64 = 7;

fn main() -> esdrl::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "desk_policy.ckpt".into())
        .into();
    let mut cfg = DdpgConfig {
        hidden: vec![128, 128],
        ..DdpgConfig::default()
    };
    cfg.observation.stride = 4;
    let init = BeamInit::new(3e-3, 3e-3, 0.0, 0.0);
    let mut env = KvEnv::new(
        Lattice::desk_beamline(),
        RewardConfig::default(),
        cfg.observation.clone(),
        cfg.action_fraction,
        cfg.horizon,
        InitMode::Fixed(init),
    )?
    .with_disturbance(Disturbance::default())?;
    let mut session = TrainSession::new(&env, &cfg, SEED)?;
    let warmup = cfg.warmup_batches * cfg.batch_size;
    let start = Instant::now();
    let mut recent = 0.0;
    for ep in 1..=EPISODES {
        let stats = run_episode(&mut env, &mut session.agent, &mut session.buffer, warmup, &mut session.rng)?;
        recent += stats.mean_reward;
        if ep % 100 == 0 {
            println!("episode {ep}: mean reward {:.3} ({:.0?})", recent / 100.0, start.elapsed());
            recent = 0.0;
        }
    }
    let ck = session.checkpoint(&env, "desk")?;
    RuntimePolicy::from_checkpoint(&ck)?.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
