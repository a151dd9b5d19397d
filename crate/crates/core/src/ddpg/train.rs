use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{Environment, InitMode, InitRanges, KvEnv};
use super::policy::{PolicyMeta, RuntimePolicy};
use super::replay::{ReplayBuffer, Transition};
use super::{AgentBundle, DdpgConfig, Minibatch};
use crate::error::{Error, Result};
use crate::kv::BeamInit;
use crate::nnet::checkpoint::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Phase::I),
            "II" | "2" => Ok(Phase::II),
            "III" | "3" => Ok(Phase::III),
            _ => Err(Error::Config(format!(
                "unknown phase `{s}` (expected I, II or III)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseBudget {
    pub min_episodes: usize,
    pub max_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Sizes of the contiguous Phase I groups, in beamline order.
    pub group_sizes: Vec<usize>,
    /// Phases to run, in order.
    pub phases: Vec<Phase>,
    /// Budget of each Phase I group.
    pub phase1: PhaseBudget,
    pub phase2: PhaseBudget,
    pub phase3: PhaseBudget,
    pub saturation_window: usize,
    /// Relative improvement below which a stage counts as saturated.
    pub saturation_threshold: f64,
    pub failure_window: usize,
    pub failure_fraction: f64,
    /// Beam state for Phases I and II.
    pub init: BeamInit,
    /// Phase III draws the beam state from these ranges.
    pub init_ranges: InitRanges,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            group_sizes: vec![4, 3, 3, 3, 3, 3, 3],
            phases: vec![Phase::I, Phase::II, Phase::III],
            phase1: PhaseBudget {
                min_episodes: 500,
                max_episodes: 2000,
            },
            phase2: PhaseBudget {
                min_episodes: 500,
                max_episodes: 2000,
            },
            phase3: PhaseBudget {
                min_episodes: 500,
                max_episodes: 2000,
            },
            saturation_window: 50,
            saturation_threshold: 0.01,
            failure_window: 100,
            failure_fraction: 0.5,
            init: BeamInit::new(3e-3, 3e-3, 0.0, 0.0),
            init_ranges: InitRanges::default(),
        }
    }
}

/// One block of episodes with fixed actuation mask and beam-state mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub phase: Phase,
    /// Zero-based Phase I group.
    pub group: Option<usize>,
    pub mask: Vec<bool>,
    pub budget: PhaseBudget,
    pub init_mode: InitMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPlan {
    pub stages: Vec<Stage>,
    pub groups: Vec<std::ops::Range<usize>>,
    pub cfg: CurriculumConfig,
}

impl CurriculumPlan {
    pub fn new(cfg: CurriculumConfig, n_magnets: usize) -> Result<Self> {
        if cfg.group_sizes.contains(&0) {
            return Err(Error::Config("curriculum groups must be non-empty".into()));
        }
        let total: usize = cfg.group_sizes.iter().sum();
        if total != n_magnets {
            return Err(Error::Config(format!(
                "curriculum groups cover {total} magnets but the lattice has {n_magnets}"
            )));
        }
        for (name, b) in [
            ("phase1", cfg.phase1),
            ("phase2", cfg.phase2),
            ("phase3", cfg.phase3),
        ] {
            if b.max_episodes == 0 || b.min_episodes > b.max_episodes {
                return Err(Error::Config(format!(
                    "curriculum.{name}: need 0 < max_episodes and min_episodes <= max_episodes"
                )));
            }
        }
        if cfg.saturation_window == 0 || cfg.failure_window == 0 {
            return Err(Error::Config("curriculum windows must be positive".into()));
        }
        cfg.init.validate()?;
        let mut groups = Vec::new();
        let mut at = 0;
        for &n in &cfg.group_sizes {
            groups.push(at..at + n);
            at += n;
        }
        let mut stages = Vec::new();
        for &phase in &cfg.phases {
            match phase {
                Phase::I => {
                    for (g, r) in groups.iter().enumerate() {
                        stages.push(Stage {
                            phase,
                            group: Some(g),
                            mask: (0..n_magnets).map(|i| r.contains(&i)).collect(),
                            budget: cfg.phase1,
                            init_mode: InitMode::Fixed(cfg.init),
                        });
                    }
                }
                Phase::II => stages.push(Stage {
                    phase,
                    group: None,
                    mask: vec![true; n_magnets],
                    budget: cfg.phase2,
                    init_mode: InitMode::Fixed(cfg.init),
                }),
                Phase::III => stages.push(Stage {
                    phase,
                    group: None,
                    mask: vec![true; n_magnets],
                    budget: cfg.phase3,
                    init_mode: InitMode::Randomized(cfg.init_ranges.clone()),
                }),
            }
        }
        Ok(Self {
            stages,
            groups,
            cfg,
        })
    }

    /// Whether the stage has met its budget and its reward has saturated.
    pub fn may_advance(&self, stage: &Stage, rewards: &[f64]) -> bool {
        if rewards.len() >= stage.budget.max_episodes {
            return true;
        }
        rewards.len() >= stage.budget.min_episodes
            && saturated(
                rewards,
                self.cfg.saturation_window,
                self.cfg.saturation_threshold,
            )
    }
}

/// True when the mean of the last `window` values improves on the window
/// before it by less than `threshold` (relative).
pub fn saturated(rewards: &[f64], window: usize, threshold: f64) -> bool {
    if rewards.len() < 2 * window {
        return false;
    }
    let n = rewards.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let cur = mean(&rewards[n - window..]);
    let prev = mean(&rewards[n - 2 * window..n - window]);
    cur - prev < threshold * prev.abs()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub mean_reward: f64,
    pub steps: usize,
    pub failed: bool,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
}

/// One line of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub episode: usize,
    pub phase: Phase,
    pub group: Option<usize>,
    pub mean_reward: f64,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub failed: bool,
    pub steps: usize,
}

/// Runs one episode, learning from every step once the buffer is warm.
pub fn run_episode<E: Environment>(
    env: &mut E,
    agent: &mut AgentBundle,
    buffer: &mut ReplayBuffer,
    warmup: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeStats> {
    let mut s = env.reset(rng)?;
    let mut total = 0.0;
    let mut stats = EpisodeStats::default();
    let (mut loss_sum, mut obj_sum, mut updates) = (0.0, 0.0, 0usize);
    for _ in 0..env.horizon() {
        let a = agent.explore(&s, rng)?;
        let step = env.step(&a)?;
        total += step.reward;
        stats.steps += 1;
        buffer.push(Transition {
            s: s.clone(),
            a: step.applied,
            r: step.reward,
            s_next: step.obs.clone(),
            done: step.done,
        });
        if buffer.len() >= warmup.max(agent.batch_size) {
            let batch = Minibatch::from_transitions(&buffer.sample(agent.batch_size, rng)?)?;
            loss_sum += agent.critic_update(&batch)?;
            obj_sum += agent.actor_update(&batch)?;
            agent.soft_update();
            updates += 1;
        }
        s = step.obs;
        if step.done {
            stats.failed = step.failed;
            break;
        }
    }
    stats.mean_reward = total / stats.steps as f64;
    if updates > 0 {
        stats.critic_loss = Some(loss_sum / updates as f64);
        stats.actor_objective = Some(obj_sum / updates as f64);
    }
    Ok(stats)
}

/// Mean episode reward of a fixed policy over `episodes` episodes.
pub fn evaluate<E: Environment>(
    env: &mut E,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    mut policy: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut sum = 0.0;
    for _ in 0..episodes {
        let mut s = env.reset(rng)?;
        let (mut total, mut steps) = (0.0, 0usize);
        for _ in 0..env.horizon() {
            let a = policy(&s, rng)?;
            let step = env.step(&a)?;
            total += step.reward;
            steps += 1;
            s = step.obs;
            if step.done {
                break;
            }
        }
        sum += total / steps as f64;
    }
    Ok(sum / episodes as f64)
}

/// Mean episode reward of actions drawn uniformly from `[-1, 1]`.
pub fn random_baseline<E: Environment>(
    env: &mut E,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let m = env.act_dim();
    evaluate(env, episodes, rng, |_, rng| {
        Ok((0..m).map(|_| rng.random_range(-1.0..=1.0)).collect())
    })
}

/// Plain episodic training without a curriculum.
pub fn train<E: Environment>(
    env: &mut E,
    agent: &mut AgentBundle,
    cfg: &DdpgConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeStats>> {
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let warmup = cfg.warmup_batches * cfg.batch_size;
    (0..episodes)
        .map(|_| run_episode(env, agent, &mut buffer, warmup, rng))
        .collect()
}

/// Mutable training state that survives across stages and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub agent: AgentBundle,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    /// Episodes completed so far.
    pub episode: usize,
    /// Index of the next stage to run.
    pub stage_index: usize,
    failures: VecDeque<bool>,
}

impl TrainSession {
    pub fn new(env: &KvEnv, cfg: &DdpgConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = AgentBundle::new(env.obs_dim(), env.act_dim(), cfg, &mut rng)?;
        Ok(Self {
            agent,
            buffer: ReplayBuffer::new(cfg.replay_capacity)?,
            rng,
            episode: 0,
            stage_index: 0,
            failures: VecDeque::new(),
        })
    }

    pub fn policy_meta(env: &KvEnv) -> PolicyMeta {
        PolicyMeta {
            observation: Some(env.observation.clone()),
            q0: env.q0.clone(),
            limits: env.limits.clone(),
        }
    }

    /// Snapshot of the networks, optimizers and counters. The replay buffer
    /// is not stored; a resumed run refills it.
    pub fn checkpoint(&self, env: &KvEnv, label: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "label": label,
            "episode": self.episode,
            "stage_index": self.stage_index,
            "rng_seed": hex(&self.rng.get_seed()),
            "rng_word_pos": self.rng.get_word_pos().to_string(),
        }));
        self.agent.store(&mut ck)?;
        RuntimePolicy::store_meta(&mut ck, &Self::policy_meta(env))?;
        Ok(ck)
    }

    pub fn resume(ck: &Checkpoint, env: &KvEnv, cfg: &DdpgConfig) -> Result<Self> {
        let agent = AgentBundle::restore(ck, cfg, env.obs_dim(), env.act_dim())?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in training checkpoint")))
        };
        let seed = unhex(field("rng_seed")?.as_str().unwrap_or_default())?;
        let pos: u128 = field("rng_word_pos")?
            .as_str()
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(Self {
            agent,
            buffer: ReplayBuffer::new(cfg.replay_capacity)?,
            rng,
            episode: field("episode")?.as_u64().unwrap_or(0) as usize,
            stage_index: field("stage_index")?.as_u64().unwrap_or(0) as usize,
            failures: VecDeque::new(),
        })
    }

    fn note_failure(&mut self, failed: bool, window: usize, fraction: f64) -> Result<()> {
        self.failures.push_back(failed);
        if self.failures.len() > window {
            self.failures.pop_front();
        }
        let count = self.failures.iter().filter(|f| **f).count();
        if self.failures.len() == window && count as f64 > fraction * window as f64 {
            return Err(Error::TrainingAborted(format!(
                "{count} of the last {window} episodes ended in an infeasible integration (episode {})",
                self.episode
            )));
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    if s.len() != 64 {
        return Err(Error::Checkpoint("bad rng seed".into()));
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Checkpoint("bad rng seed".into()))?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub episodes: usize,
    pub final_checkpoint: Checkpoint,
}

/// Runs the remaining curriculum stages.
///
/// `on_record` receives every learning-curve line; `on_checkpoint` receives a
/// snapshot after each completed phase (labelled `phase-I` etc.) and a final
/// one labelled `final`. With `episode_limit`, training stops once the
/// session has run that many episodes in total; resuming from the final
/// snapshot restarts the interrupted stage's saturation window.
pub fn train_curriculum(
    plan: &CurriculumPlan,
    env: &mut KvEnv,
    cfg: &DdpgConfig,
    session: &mut TrainSession,
    episode_limit: Option<usize>,
    mut on_record: impl FnMut(&CurveRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(&str, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let warmup = cfg.warmup_batches * cfg.batch_size;
    let exhausted = |s: &TrainSession| episode_limit.is_some_and(|l| s.episode >= l);
    'stages: while session.stage_index < plan.stages.len() {
        let stage = &plan.stages[session.stage_index];
        env.mask = stage.mask.clone();
        env.init_mode = stage.init_mode.clone();
        let mut rewards = Vec::new();
        while !plan.may_advance(stage, &rewards) {
            if exhausted(session) {
                break 'stages;
            }
            let stats = run_episode(
                env,
                &mut session.agent,
                &mut session.buffer,
                warmup,
                &mut session.rng,
            )?;
            session.episode += 1;
            rewards.push(stats.mean_reward);
            on_record(&CurveRecord {
                episode: session.episode,
                phase: stage.phase,
                group: stage.group,
                mean_reward: stats.mean_reward,
                critic_loss: stats.critic_loss,
                actor_objective: stats.actor_objective,
                failed: stats.failed,
                steps: stats.steps,
            })?;
            session.note_failure(
                stats.failed,
                plan.cfg.failure_window,
                plan.cfg.failure_fraction,
            )?;
        }
        session.stage_index += 1;
        let phase_done = plan
            .stages
            .get(session.stage_index)
            .is_none_or(|next| next.phase != stage.phase);
        if phase_done {
            let label = format!("phase-{}", stage.phase);
            on_checkpoint(&label, &session.checkpoint(env, &label)?)?;
        }
    }
    env.mask = vec![true; env.q0.len()];
    let final_checkpoint = session.checkpoint(env, "final")?;
    on_checkpoint("final", &final_checkpoint)?;
    Ok(TrainOutcome {
        episodes: session.episode,
        final_checkpoint,
    })
}
