//! Supervised blend of the learned policy and bounded extremum seeking.
//!
//! Each step the supervisor simulates the policy's recommendation. If both
//! path-averaged envelopes stay below `safety_fraction · r_max` the
//! recommendation is applied (`β = 1`); otherwise the ES channel takes over
//! (`β = 0`), warm-started from the recommendation at the moment of handoff.

use serde::{Deserialize, Serialize};

use crate::ddpg::{Evaluation, RuntimePolicy};
use crate::error::{Error, Result};
use crate::es::{es_step_masked, EsConfig, EsState};
use crate::kv::{BeamInit, EnvelopeTrajectory, Lattice};
use crate::reward::{path_averages, RewardConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineRule {
    /// DRL stays engaged only while both envelopes are inside the band.
    And,
    /// DRL stays engaged while either envelope is inside the band.
    Or,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorConfig {
    pub safety_fraction: f64,
    pub r_max: f64,
    pub rule: CombineRule,
    /// Minimum number of steps between β transitions; 0 disables.
    #[serde(default)]
    pub dwell: u64,
    /// Pins β for ablations.
    #[serde(default)]
    pub force_beta: Option<u8>,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            safety_fraction: 0.7,
            r_max: 0.0254,
            rule: CombineRule::And,
            dwell: 0,
            force_beta: None,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.safety_fraction > 0.0 && self.safety_fraction < 1.0) {
            return Err(Error::Config(format!(
                "supervisor.safety_fraction must lie in (0, 1), got {}",
                self.safety_fraction
            )));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::Config("supervisor.r_max must be positive".into()));
        }
        if self.force_beta.is_some_and(|b| b > 1) {
            return Err(Error::Config("supervisor.force_beta must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.safety_fraction * self.r_max
    }

    /// β from the path-averaged envelopes, strict inequality.
    pub fn beta_from_means(&self, x_mean: f64, y_mean: f64) -> u8 {
        let th = self.threshold();
        let (inx, iny) = (x_mean < th, y_mean < th);
        let engaged = match self.rule {
            CombineRule::And => inx && iny,
            CombineRule::Or => inx || iny,
        };
        u8::from(engaged)
    }
}

/// β for a trajectory; an infeasible one always selects ES.
pub fn supervise(traj: &EnvelopeTrajectory, cfg: &SupervisorConfig) -> u8 {
    match path_averages(traj) {
        Ok(a) => cfg.beta_from_means(a.x_mean, a.y_mean),
        Err(_) => 0,
    }
}

/// Which channel produced the emitted settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Drl,
    Es,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub beta: u8,
    pub es: EsState,
    pub last_feasible_q: Vec<f64>,
    /// Step index of the last β transition.
    pub engaged_since: u64,
    pub step: u64,
}

impl HybridState {
    /// Starts in the DRL channel at settings `q0`, assumed feasible.
    pub fn new(q0: Vec<f64>) -> Self {
        Self {
            beta: 1,
            es: EsState::new(q0.clone()),
            last_feasible_q: q0,
            engaged_since: 0,
            step: 0,
        }
    }
}

/// Plant seen by a controller: exogenous overrides plus simulation.
pub trait Plant {
    /// Writes externally driven settings into `q`.
    fn pin(&self, q: &mut [f64]);
    fn evaluate(&self, q: &[f64]) -> Evaluation;
}

/// Fixed lattice and beam with optional pinned settings.
#[derive(Clone, Debug)]
pub struct StaticPlant {
    pub lattice: Lattice,
    pub reward: RewardConfig,
    pub init: BeamInit,
    pub pinned: Vec<(usize, f64)>,
}

impl Plant for StaticPlant {
    fn pin(&self, q: &mut [f64]) {
        for &(i, v) in &self.pinned {
            q[i] = v;
        }
    }

    fn evaluate(&self, q: &[f64]) -> Evaluation {
        Evaluation::run(&self.lattice, &self.reward, q.to_vec(), &self.init)
    }
}

/// Shared, read-only pieces of the hybrid controller.
pub struct HybridContext<'a> {
    pub policy: &'a RuntimePolicy,
    pub es: &'a EsConfig,
    /// Parameters the ES channel may move.
    pub es_mask: &'a [bool],
    pub supervisor: &'a SupervisorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridStep {
    pub q_next: Vec<f64>,
    pub beta: u8,
    pub channel: Channel,
    pub switched: bool,
    /// Reward of the policy's recommendation in the pre-check.
    pub candidate_reward: Option<f64>,
}

/// One control step.
///
/// `current` is the trajectory produced by the present settings and `v` its
/// measured objective. The policy's recommendation is pinned and simulated on
/// `plant` before β is chosen.
pub fn hybrid_step(
    state: &mut HybridState,
    ctx: &HybridContext<'_>,
    plant: &dyn Plant,
    current_q: &[f64],
    current: &EnvelopeTrajectory,
    v: f64,
) -> Result<HybridStep> {
    let t = state.step;
    let prev_beta = state.beta;
    if current.feasible {
        state.last_feasible_q = current_q.to_vec();
    }
    // Candidate from the policy; without a feasible observation there is none.
    let candidate = if current.feasible {
        let mut q = ctx.policy.recommend(current)?;
        plant.pin(&mut q);
        let ev = plant.evaluate(&q);
        Some(ev)
    } else {
        None
    };
    let mut beta = match (&candidate, ctx.supervisor.force_beta) {
        (_, Some(b)) => b,
        (Some(ev), None) => supervise(&ev.traj, ctx.supervisor),
        (None, None) => 0,
    };
    if !current.feasible {
        beta = 0;
    } else if ctx.supervisor.dwell > 0
        && beta != prev_beta
        && t > 0
        && t - state.engaged_since < ctx.supervisor.dwell
    {
        beta = prev_beta;
    }
    let switched = beta != prev_beta;
    // The dither restarts at index 0 whenever ES takes over.
    let engaging = prev_beta == 1 || t == 0;
    let index = if engaging { 0 } else { state.es.step_index };
    let q_next = if beta == 1 {
        let q = candidate
            .as_ref()
            .expect("β = 1 needs a candidate")
            .q
            .clone();
        state.es = EsState::new(q.clone());
        q
    } else if !current.feasible {
        let seed = EsState {
            step_index: index,
            params: state.last_feasible_q.clone(),
        };
        state.es = es_step_masked(&seed, v, ctx.es, Some(ctx.es_mask))?;
        state.es.params.clone()
    } else if engaging {
        // Handoff: seed from the recommendation, measured in the pre-check.
        let ev = candidate
            .as_ref()
            .expect("feasible observation has a candidate");
        state.es = es_step_masked(&EsState::new(ev.q.clone()), ev.reward, ctx.es, Some(ctx.es_mask))?;
        state.es.params.clone()
    } else {
        let cur = EsState {
            step_index: index,
            params: current_q.to_vec(),
        };
        state.es = es_step_masked(&cur, v, ctx.es, Some(ctx.es_mask))?;
        state.es.params.clone()
    };
    if switched {
        state.engaged_since = t;
    }
    state.beta = beta;
    state.step = t + 1;
    Ok(HybridStep {
        q_next,
        beta,
        channel: if beta == 1 { Channel::Drl } else { Channel::Es },
        switched,
        candidate_reward: candidate.map(|c| c.reward),
    })
}

/// Outcome of [`averaged_hybrid_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Mean per-step parameter change over the window.
    pub drift: Vec<f64>,
    /// Central-difference gradient of `V` at the starting point.
    pub gradient: Vec<f64>,
    /// Cosine between drift and gradient over the active parameters.
    pub cosine: f64,
    pub drift_norm: f64,
    /// Largest dither amplitude `√(α/ωᵢ)` among active parameters.
    pub dither_amplitude: f64,
    pub steps: usize,
}

/// Runs the ES channel alone (β pinned to 0) on a static plant and compares
/// the averaged parameter drift with the gradient of the objective.
pub fn averaged_hybrid_check(
    plant: &dyn Plant,
    es: &EsConfig,
    mask: &[bool],
    q_start: &[f64],
    periods: usize,
    fd_step: f64,
) -> Result<DriftReport> {
    es.validate()?;
    let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let slowest = active
        .iter()
        .map(|&i| es.ratios[i] * es.omega)
        .fold(f64::INFINITY, f64::min);
    let steps = (periods as f64 * 2.0 * std::f64::consts::PI / (slowest * es.dt)).round() as usize;
    let mut state = EsState::new(q_start.to_vec());
    plant.pin(&mut state.params);
    let start = state.params.clone();
    for _ in 0..steps {
        let v = plant.evaluate(&state.params).reward;
        state = es_step_masked(&state, v, es, Some(mask))?;
    }
    let drift: Vec<f64> = state
        .params
        .iter()
        .zip(&start)
        .map(|(a, b)| (a - b) / steps as f64)
        .collect();
    let mut gradient = vec![0.0; start.len()];
    for &i in &active {
        let mut up = start.clone();
        let mut dn = start.clone();
        up[i] += fd_step;
        dn[i] -= fd_step;
        gradient[i] = (plant.evaluate(&up).reward - plant.evaluate(&dn).reward) / (2.0 * fd_step);
    }
    let dot: f64 = active.iter().map(|&i| drift[i] * gradient[i]).sum();
    let nd = active
        .iter()
        .map(|&i| drift[i] * drift[i])
        .sum::<f64>()
        .sqrt();
    let ng = active
        .iter()
        .map(|&i| gradient[i] * gradient[i])
        .sum::<f64>()
        .sqrt();
    let sign = if es.maximize { 1.0 } else { -1.0 };
    Ok(DriftReport {
        cosine: if nd > 0.0 && ng > 0.0 {
            sign * dot / (nd * ng)
        } else {
            0.0
        },
        drift_norm: nd,
        dither_amplitude: active
            .iter()
            .map(|&i| es.dither_amplitude(i))
            .fold(0.0, f64::max),
        drift,
        gradient,
        steps,
    })
}
