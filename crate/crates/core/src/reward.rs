//! Beam-quality penalty and the bounded reward `R = 1 / (1 + P)`.
//!
//! The same scalar drives the DDPG reward and the extremum-seeking objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::EnvelopeTrajectory;

/// Penalty weights and aperture parameters. All arithmetic is in SI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Operational radius bound, meters.
    pub r_max: f64,
    pub w_envelope: f64,
    pub w_smooth: f64,
    pub w_round: f64,
    pub w_flat: f64,
    pub w_target: f64,
    pub failure_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_max: 0.0254,
            w_envelope: 1000.0,
            w_smooth: 1000.0,
            w_round: 100.0,
            w_flat: 100.0,
            w_target: 1000.0,
            failure_penalty: 99.0,
        }
    }
}

impl RewardConfig {
    /// Envelope band `r_max / 2`.
    pub fn r_band(&self) -> f64 {
        self.r_max / 2.0
    }

    /// Terminal target `r_max² / 2`.
    pub fn r_tt_sq(&self) -> f64 {
        self.r_max * self.r_max / 2.0
    }

    /// Rejects negative weights; returns human-readable warnings for
    /// settings that are legal but degenerate.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.r_max > 0.0) || !self.r_max.is_finite() {
            return Err(Error::Config(format!(
                "reward.r_max must be positive, got {}",
                self.r_max
            )));
        }
        let weights = [
            ("w_envelope", self.w_envelope),
            ("w_smooth", self.w_smooth),
            ("w_round", self.w_round),
            ("w_flat", self.w_flat),
            ("w_target", self.w_target),
            ("failure_penalty", self.failure_penalty),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "reward.{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        let mut warnings = Vec::new();
        if self.failure_penalty == 0.0 {
            warnings.push(
                "reward.failure_penalty is 0: failed integrations earn the maximum reward".into(),
            );
        }
        Ok(warnings)
    }
}

/// Means of the envelope channels over the first `N` grid samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathAverages {
    pub x_mean: f64,
    pub y_mean: f64,
    pub xp_sq_mean: f64,
    pub yp_sq_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub p_env: f64,
    pub p_smooth: f64,
    pub p_term: f64,
    pub p_total: f64,
    pub reward: f64,
}

impl RewardBreakdown {
    /// Combines the three penalty groups into the total and the bounded reward.
    pub fn from_terms(p_env: f64, p_smooth: f64, p_term: f64) -> Self {
        let p_total = p_env + p_smooth + p_term;
        Self {
            p_env,
            p_smooth,
            p_term,
            p_total,
            reward: bounded_inverse(p_total),
        }
    }
}

pub fn bounded_inverse(p: f64) -> f64 {
    1.0 / (1.0 + p)
}

fn hinge(a: f64) -> f64 {
    a.max(0.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64
}

pub fn path_averages(traj: &EnvelopeTrajectory) -> Result<PathAverages> {
    if !traj.feasible {
        return Err(Error::Infeasible);
    }
    let n = traj.intervals();
    if n == 0 {
        return Err(Error::Shape("trajectory has no grid intervals".into()));
    }
    Ok(PathAverages {
        x_mean: mean(&traj.x[..n]),
        y_mean: mean(&traj.y[..n]),
        xp_sq_mean: mean_sq(&traj.xp[..n]),
        yp_sq_mean: mean_sq(&traj.yp[..n]),
    })
}

pub fn penalty(traj: &EnvelopeTrajectory, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    let avg = path_averages(traj)?;
    let n = traj.intervals();
    let (x, y, xp, yp) = (traj.x[n], traj.y[n], traj.xp[n], traj.yp[n]);
    let r_band = cfg.r_band();

    let p_env = cfg.w_envelope * (hinge(avg.x_mean - r_band) + hinge(avg.y_mean - r_band));
    let p_smooth = cfg.w_smooth * (avg.xp_sq_mean + avg.yp_sq_mean);
    let p_term = cfg.w_round * (x - y).abs()
        + cfg.w_flat * (xp.abs() + yp.abs())
        + cfg.w_target * (x * x + y * y - cfg.r_tt_sq()).abs();
    Ok(RewardBreakdown::from_terms(p_env, p_smooth, p_term))
}

/// Reward assigned to an integration that failed; ends the episode.
pub fn failure_reward(cfg: &RewardConfig) -> f64 {
    bounded_inverse(cfg.failure_penalty)
}

/// Reward of a trajectory, or the failure reward when it is infeasible.
pub fn reward_or_failure(traj: &EnvelopeTrajectory, cfg: &RewardConfig) -> f64 {
    match penalty(traj, cfg) {
        Ok(b) => b.reward,
        Err(_) => failure_reward(cfg),
    }
}
