//! Deep deterministic policy gradient on the beamline.
//!
//! The critic regresses onto `y = r + γ (1 − d) Q′(s′, μ′(s′))`, the actor
//! ascends `Q(s, μ(s))` through the frozen critic, and both targets follow
//! their online networks by Polyak averaging. Actions are normalized to
//! `[-1, 1]` per magnet; environments map them onto physical offsets.

mod env;
mod policy;
mod replay;
mod train;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::checkpoint::{Checkpoint, NamedArray};
use crate::nnet::{polyak, AdamConfig, AdamState, Mlp, MlpSpec, OutputActivation};

pub use env::{
    Disturbance, Environment, Evaluation, InitMode, InitRanges, KvEnv, ObservationConfig,
    ScalarEnv, ScalarEnvConfig, StepResult,
};
pub use policy::{PolicyMeta, RuntimePolicy};
pub use replay::{ReplayBuffer, Transition};
pub use train::{
    evaluate, random_baseline, run_episode, train, train_curriculum, CurriculumConfig,
    CurriculumPlan, CurveRecord, EpisodeStats, Phase, PhaseBudget, Stage, TrainOutcome,
    TrainSession,
};

fn default_hidden() -> Vec<usize> {
    vec![512, 512]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Exploration noise standard deviation, in normalized action units.
    pub noise_sigma: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub actor_final_scale: f64,
    pub critic_final_scale: f64,
    /// Per-magnet action limit as a fraction of its nominal strength.
    pub action_fraction: f64,
    /// Environment steps per episode.
    pub horizon: usize,
    /// Learning starts once the buffer holds `warmup_batches × batch_size`.
    pub warmup_batches: usize,
    #[serde(default)]
    pub observation: ObservationConfig,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 128,
            replay_capacity: 1_000_000,
            actor_lr: 1e-5,
            critic_lr: 1e-4,
            noise_sigma: 0.1,
            hidden: default_hidden(),
            actor_final_scale: 1e-3,
            critic_final_scale: 3e-3,
            action_fraction: 0.5,
            horizon: 50,
            warmup_batches: 10,
            observation: ObservationConfig::default(),
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("ddpg.gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("ddpg.tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("ddpg.batch_size must be positive and no larger than the replay capacity");
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return bad("ddpg learning rates must be non-negative");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("ddpg.noise_sigma must be non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("ddpg.hidden must list at least one positive width");
        }
        if self.horizon == 0 {
            return bad("ddpg.horizon must be positive");
        }
        self.observation.validate()
    }

    pub fn actor_spec(&self, obs_dim: usize, act_dim: usize) -> MlpSpec {
        MlpSpec {
            input: obs_dim,
            hidden: self.hidden.clone(),
            output: act_dim,
            output_activation: OutputActivation::TanhScaled {
                scale: vec![1.0; act_dim],
            },
        }
    }

    pub fn critic_spec(&self, obs_dim: usize, act_dim: usize) -> MlpSpec {
        MlpSpec {
            input: obs_dim + act_dim,
            hidden: self.hidden.clone(),
            output: 1,
            output_activation: OutputActivation::Identity,
        }
    }
}

/// Stacked transitions.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
}

impl Minibatch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::Shape("empty minibatch".into()))?;
        let (ds, da) = (first.s.len(), first.a.len());
        let b = ts.len();
        let mut s = Array2::zeros((b, ds));
        let mut a = Array2::zeros((b, da));
        let mut s_next = Array2::zeros((b, ds));
        for (k, t) in ts.iter().enumerate() {
            if t.s.len() != ds || t.s_next.len() != ds || t.a.len() != da {
                return Err(Error::Shape(format!(
                    "transition {k} has inconsistent dimensions"
                )));
            }
            s.row_mut(k).assign(&ndarray::ArrayView1::from(&t.s[..]));
            a.row_mut(k).assign(&ndarray::ArrayView1::from(&t.a[..]));
            s_next
                .row_mut(k)
                .assign(&ndarray::ArrayView1::from(&t.s_next[..]));
        }
        Ok(Self {
            s,
            a,
            r: ts.iter().map(|t| t.r).collect(),
            s_next,
            done: ts.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

fn critic_input(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), s.view(), a.view()]
}

/// Online and target networks with their optimizers.
#[derive(Clone, Debug)]
pub struct AgentBundle {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub gamma: f64,
    pub tau: f64,
    pub noise_sigma: f64,
    pub batch_size: usize,
}

impl AgentBundle {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        cfg: &DdpgConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::new(cfg.actor_spec(obs_dim, act_dim), cfg.actor_final_scale, rng)?;
        let critic = Mlp::new(
            cfg.critic_spec(obs_dim, act_dim),
            cfg.critic_final_scale,
            rng,
        )?;
        Ok(Self {
            actor_opt: AdamState::new(AdamConfig::with_lr(cfg.actor_lr), actor.num_params()),
            critic_opt: AdamState::new(AdamConfig::with_lr(cfg.critic_lr), critic.num_params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            gamma: cfg.gamma,
            tau: cfg.tau,
            noise_sigma: cfg.noise_sigma,
            batch_size: cfg.batch_size,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Deterministic action `μ(s)`.
    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(s)
    }

    /// `μ(s) + N(0, σ²)`, saturated to `[-1, 1]`.
    pub fn explore(&self, s: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut a = self.act(s)?;
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            a.iter_mut()
                .for_each(|v| *v = (*v + n.sample(rng)).clamp(-1.0, 1.0));
        }
        Ok(a)
    }

    /// TD targets. Terminal transitions use `r` alone, so target-network
    /// values never reach them.
    pub fn td_targets(&self, batch: &Minibatch) -> Result<Array1<f64>> {
        let a_next = self.actor_target.forward_batch(batch.s_next.view())?.output;
        let q_next = self
            .critic_target
            .forward_batch(critic_input(&batch.s_next, &a_next).view())?
            .output;
        Ok(batch
            .r
            .iter()
            .zip(&batch.done)
            .zip(q_next.column(0))
            .map(|((r, d), q)| if *d { *r } else { r + self.gamma * q })
            .collect())
    }

    fn check_batch(&self, batch: &Minibatch) -> Result<()> {
        if batch.len() != self.batch_size {
            return Err(Error::Shape(format!(
                "minibatch holds {} transitions, expected {}",
                batch.len(),
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Mean squared TD error and its parameter gradient.
    pub fn critic_loss_and_grad(&self, batch: &Minibatch) -> Result<(f64, Vec<f64>)> {
        let y = self.td_targets(batch)?;
        let cache = self
            .critic
            .forward_batch(critic_input(&batch.s, &batch.a).view())?;
        let n = batch.len() as f64;
        let err: Array1<f64> = &cache.output.column(0) - &y;
        let loss = err.iter().map(|e| e * e).sum::<f64>() / n;
        let upstream = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
        let mut g = self.critic.zero_grads();
        self.critic
            .backward_params(&cache, upstream.view(), &mut g)?;
        Ok((loss, g))
    }

    /// One Adam step on the critic; returns the loss before the step.
    pub fn critic_update(&mut self, batch: &Minibatch) -> Result<f64> {
        self.check_batch(batch)?;
        let (loss, g) = self.critic_loss_and_grad(batch)?;
        self.critic_opt.step(&mut self.critic.params, &g)?;
        Ok(loss)
    }

    /// `J = mean Q(s, μ(s))` and the gradient of `-J` with respect to the
    /// actor parameters.
    pub fn actor_objective_and_grad(&self, batch: &Minibatch) -> Result<(f64, Vec<f64>)> {
        let actor_cache = self.actor.forward_batch(batch.s.view())?;
        let critic_cache = self
            .critic
            .forward_batch(critic_input(&batch.s, &actor_cache.output).view())?;
        let n = batch.len() as f64;
        let objective = critic_cache.output.sum() / n;
        let upstream = Array2::from_elem((batch.len(), 1), 1.0 / n);
        let d_input = self.critic.input_gradient(&critic_cache, upstream.view())?;
        let obs_dim = batch.s.ncols();
        let d_action = d_input.slice(s![.., obs_dim..]).mapv(|v| -v);
        let mut g = self.actor.zero_grads();
        self.actor
            .backward_params(&actor_cache, d_action.view(), &mut g)?;
        Ok((objective, g))
    }

    /// One Adam step on the actor; returns the objective before the step.
    pub fn actor_update(&mut self, batch: &Minibatch) -> Result<f64> {
        self.check_batch(batch)?;
        let (j, g) = self.actor_objective_and_grad(batch)?;
        self.actor_opt.step(&mut self.actor.params, &g)?;
        Ok(j)
    }

    pub fn soft_update(&mut self) {
        polyak(&mut self.actor_target.params, &self.actor.params, self.tau);
        polyak(
            &mut self.critic_target.params,
            &self.critic.params,
            self.tau,
        );
    }

    /// Writes all four networks and both optimizers into `ck`.
    pub fn store(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_network("actor", &self.actor)?;
        ck.put_network("critic", &self.critic)?;
        ck.put_network("actor_target", &self.actor_target)?;
        ck.put_network("critic_target", &self.critic_target)?;
        for (name, opt) in [
            ("actor_opt", &self.actor_opt),
            ("critic_opt", &self.critic_opt),
        ] {
            ck.push(NamedArray::vector(format!("{name}.m"), opt.m.clone()));
            ck.push(NamedArray::vector(format!("{name}.v"), opt.v.clone()));
            ck.meta[name] = serde_json::json!({"t": opt.t, "cfg": opt.cfg});
        }
        ck.meta["agent"] = serde_json::json!({
            "gamma": self.gamma,
            "tau": self.tau,
            "noise_sigma": self.noise_sigma,
            "batch_size": self.batch_size,
        });
        Ok(())
    }

    /// Restores a bundle written by [`AgentBundle::store`], checking the
    /// architectures against `cfg`.
    pub fn restore(
        ck: &Checkpoint,
        cfg: &DdpgConfig,
        obs_dim: usize,
        act_dim: usize,
    ) -> Result<Self> {
        let a_spec = cfg.actor_spec(obs_dim, act_dim);
        let c_spec = cfg.critic_spec(obs_dim, act_dim);
        let opt = |name: &str, n: usize| -> Result<AdamState> {
            let meta = ck
                .meta
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer `{name}`")))?;
            let m = ck.get(&format!("{name}.m"))?.data.clone();
            let v = ck.get(&format!("{name}.v"))?.data.clone();
            if m.len() != n || v.len() != n {
                return Err(Error::Checkpoint(format!(
                    "optimizer `{name}` has the wrong size"
                )));
            }
            Ok(AdamState {
                cfg: serde_json::from_value(meta["cfg"].clone())?,
                m,
                v,
                t: meta["t"].as_u64().unwrap_or(0),
            })
        };
        let actor = ck.network("actor", Some(&a_spec))?;
        let critic = ck.network("critic", Some(&c_spec))?;
        Ok(Self {
            actor_opt: opt("actor_opt", actor.num_params())?,
            critic_opt: opt("critic_opt", critic.num_params())?,
            actor_target: ck.network("actor_target", Some(&a_spec))?,
            critic_target: ck.network("critic_target", Some(&c_spec))?,
            actor,
            critic,
            gamma: cfg.gamma,
            tau: cfg.tau,
            noise_sigma: cfg.noise_sigma,
            batch_size: cfg.batch_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn small_cfg() -> DdpgConfig {
        DdpgConfig {
            hidden: vec![16, 16],
            batch_size: 8,
            replay_capacity: 64,
            ..DdpgConfig::default()
        }
    }

    fn batch(rng: &mut ChaCha8Rng, done: bool, r: f64) -> Minibatch {
        let ts: Vec<Transition> = (0..8)
            .map(|_| {
                let s: Arc<[f64]> = Arc::from(
                    (0..3)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                );
                let s2: Arc<[f64]> = Arc::from(
                    (0..3)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                );
                Transition {
                    s,
                    a: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    r,
                    s_next: s2,
                    done,
                }
            })
            .collect();
        Minibatch::from_transitions(&ts.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn terminal_targets_ignore_target_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = AgentBundle::new(3, 2, &small_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, true, 1.0);
        let y1 = agent.td_targets(&b).unwrap();
        agent.critic_target.params.iter_mut().for_each(|p| *p = 1e3);
        let y2 = agent.td_targets(&b).unwrap();
        assert!(y1.iter().chain(y2.iter()).all(|y| *y == 1.0));
    }

    #[test]
    fn nonterminal_target_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = AgentBundle::new(3, 2, &small_cfg(), &mut rng).unwrap();
        // critic target outputs exactly 2 everywhere: zero weights, bias 2
        let n = agent.critic_target.num_params();
        agent.critic_target.params.iter_mut().for_each(|p| *p = 0.0);
        agent.critic_target.params[n - 1] = 2.0;
        let b = batch(&mut rng, false, 0.0);
        let y = agent.td_targets(&b).unwrap();
        assert!(y.iter().all(|v| (*v - 1.98).abs() < 1e-15), "{y:?}");
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = AgentBundle::new(3, 2, &small_cfg(), &mut rng).unwrap();
        let n = agent.critic.num_params();
        agent.critic.params.iter_mut().for_each(|p| *p = 0.0);
        agent.critic.params[n - 1] = 0.5;
        let b = batch(&mut rng, true, 0.5);
        let (loss, g) = agent.critic_loss_and_grad(&b).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_critic_gives_zero_actor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = AgentBundle::new(3, 2, &small_cfg(), &mut rng).unwrap();
        let n = agent.critic.num_params();
        agent.critic.params.iter_mut().for_each(|p| *p = 0.0);
        agent.critic.params[n - 1] = 7.0;
        let b = batch(&mut rng, false, 0.0);
        let (j, g) = agent.actor_objective_and_grad(&b).unwrap();
        assert_eq!(j, 7.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn explore_respects_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = small_cfg();
        cfg.noise_sigma = 5.0;
        let agent = AgentBundle::new(3, 2, &cfg, &mut rng).unwrap();
        for _ in 0..100 {
            let a = agent.explore(&[0.1, 0.2, 0.3], &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn bundle_round_trips_through_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small_cfg();
        let mut agent = AgentBundle::new(3, 2, &cfg, &mut rng).unwrap();
        let b = batch(&mut rng, false, 0.3);
        agent.critic_update(&b).unwrap();
        agent.actor_update(&b).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({}));
        agent.store(&mut ck).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let back = AgentBundle::restore(&ck, &cfg, 3, 2).unwrap();
        assert_eq!(back.actor, agent.actor);
        assert_eq!(back.critic_opt, agent.critic_opt);
    }
}
