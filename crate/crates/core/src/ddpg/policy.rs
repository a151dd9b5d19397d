use std::path::Path;

use serde::{Deserialize, Serialize};

use super::env::ObservationConfig;
use crate::error::{Error, Result};
use crate::kv::EnvelopeTrajectory;
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::Mlp;

/// What a frozen actor needs to turn observations into settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    /// `None` for environments whose observation is passed through unchanged.
    pub observation: Option<ObservationConfig>,
    pub q0: Vec<f64>,
    pub limits: Vec<f64>,
}

/// Deterministic, stateless controller `o ↦ Q(0) + sat(μ(o))`.
#[derive(Clone, Debug)]
pub struct RuntimePolicy {
    actor: Mlp,
    pub meta: PolicyMeta,
}

impl RuntimePolicy {
    pub fn new(actor: Mlp, meta: PolicyMeta) -> Result<Self> {
        if meta.q0.len() != actor.output_dim() || meta.limits.len() != actor.output_dim() {
            return Err(Error::Shape(format!(
                "policy controls {} settings but the actor has {} outputs",
                meta.q0.len(),
                actor.output_dim()
            )));
        }
        Ok(Self { actor, meta })
    }

    pub fn store_meta(ck: &mut Checkpoint, meta: &PolicyMeta) -> Result<()> {
        ck.meta["policy"] = serde_json::to_value(meta)?;
        Ok(())
    }

    /// Reads only the actor from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .meta
            .get("policy")
            .ok_or_else(|| Error::Checkpoint("no runtime policy metadata".into()))?;
        let meta: PolicyMeta = serde_json::from_value(meta.clone())?;
        Self::new(ck.network("actor", None)?, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Checkpoint holding only the actor and its metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({ "label": "policy" }));
        ck.put_network("actor", &self.actor)?;
        Self::store_meta(&mut ck, &self.meta)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    /// Normalized action in `[-1, 1]`.
    pub fn action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .actor
            .forward(obs)?
            .into_iter()
            .map(|a| a.clamp(-1.0, 1.0))
            .collect())
    }

    /// Absolute settings `Q(0) + sat(μ(o))`.
    pub fn settings(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .action(obs)?
            .iter()
            .zip(&self.meta.q0)
            .zip(&self.meta.limits)
            .map(|((a, q), l)| q + l * a)
            .collect())
    }

    pub fn encode(&self, traj: &EnvelopeTrajectory) -> Result<Vec<f64>> {
        match &self.meta.observation {
            Some(o) => o.encode(traj),
            None => Err(Error::Config(
                "policy has no envelope observation encoding".into(),
            )),
        }
    }

    /// Settings recommended for the beam described by `traj`.
    pub fn recommend(&self, traj: &EnvelopeTrajectory) -> Result<Vec<f64>> {
        self.settings(&self.encode(traj)?)
    }
}
