//! The two studies: the scalar plant with a sign-changing input gain, and
//! the 500-step beamline perturbation comparison of four controllers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::{
    train, AgentBundle, DdpgConfig, Environment, Evaluation, PolicyMeta, RuntimePolicy, ScalarEnv,
    ScalarEnvConfig,
};
use crate::error::{Error, Result};
use crate::es::{
    es_step_masked, gaussian_objective, simulate_scalar, ContinuousEs, EsConfig, EsState,
    ScalarPlant, ScalarRun, ScalarTrace,
};
use crate::hybrid::{hybrid_step, HybridContext, HybridState, Plant, SupervisorConfig};
use crate::kv::{BeamInit, Lattice};
use crate::reward::{path_averages, RewardConfig};

/// Piecewise-linear profile through `[t, value]` points, constant outside.
/// A repeated `t` encodes a jump; the later point wins at that instant.
fn piecewise(points: &[[f64; 2]], t: f64) -> f64 {
    let Some(last) = points.last() else {
        return 0.0;
    };
    if t >= last[0] {
        return last[1];
    }
    if t < points[0][0] {
        return points[0][1];
    }
    for w in points.windows(2) {
        let ([t0, v0], [t1, v1]) = (w[0], w[1]);
        if t >= t0 && t < t1 {
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    last[1]
}

/// Exogenous drives of the perturbation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSchedule {
    /// One-based indices of the two driven magnets.
    pub driven: [usize; 2],
    pub setpoints: [f64; 2],
    /// Angular rate of the drive, rad per step.
    pub nu: f64,
    /// `A(t)` breakpoints `[t, A]`.
    pub amplitude: Vec<[f64; 2]>,
    /// One-based index of the magnet whose position drifts.
    pub drifted: usize,
    /// `ΔL(t)` breakpoints `[t, meters]`.
    pub drift: Vec<[f64; 2]>,
    pub horizon: usize,
}

impl Default for PerturbationSchedule {
    fn default() -> Self {
        Self {
            driven: [1, 10],
            setpoints: [1.21, 3.5],
            nu: PI / 50.0,
            amplitude: vec![[0.0, 0.25], [100.0, 0.25], [500.0, 0.75], [500.0, 0.0]],
            drifted: 10,
            drift: vec![
                [0.0, 0.0],
                [100.0, 0.0],
                [200.0, 0.15],
                [300.0, 0.15],
                [400.0, 0.0],
            ],
            horizon: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drives {
    pub q1: f64,
    pub q10: f64,
    pub delta_l: f64,
}

impl PerturbationSchedule {
    /// Static schedule: setpoints only, no drift.
    pub fn quiet() -> Self {
        Self {
            amplitude: vec![[0.0, 0.0]],
            drift: vec![[0.0, 0.0]],
            ..Self::default()
        }
    }

    pub fn amplitude_at(&self, t: usize) -> f64 {
        piecewise(&self.amplitude, t as f64)
    }

    pub fn eval(&self, t: usize) -> Drives {
        let s = self.amplitude_at(t) * (self.nu * t as f64).sin();
        Drives {
            q1: self.setpoints[0] + s,
            q10: self.setpoints[1] + s,
            delta_l: piecewise(&self.drift, t as f64),
        }
    }

    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        let n = lattice.len();
        for &i in self.driven.iter().chain([&self.drifted]) {
            if i == 0 || i > n {
                return Err(Error::Config(format!(
                    "schedule refers to magnet {i}, lattice has {n}"
                )));
            }
        }
        for pts in [&self.amplitude, &self.drift] {
            if pts.is_empty() || pts.windows(2).any(|w| w[1][0] < w[0][0]) {
                return Err(Error::Config(
                    "schedule breakpoints must be non-empty and ordered in t".into(),
                ));
            }
        }
        if self.amplitude.iter().any(|p| p[1] < 0.0) {
            return Err(Error::Config(
                "schedule amplitude must be non-negative".into(),
            ));
        }
        for p in &self.drift {
            lattice.with_shift(self.drifted, p[1]).map_err(|e| {
                Error::Config(format!(
                    "drift of {} m at t = {} is not admissible: {e}",
                    p[1], p[0]
                ))
            })?;
        }
        Ok(())
    }

    /// Mask of settings a controller may write.
    pub fn actuated(&self, n: usize) -> Vec<bool> {
        (0..n).map(|i| !self.driven.contains(&(i + 1))).collect()
    }
}

/// Beamline under the schedule at one instant.
#[derive(Clone, Debug)]
pub struct ScheduledPlant {
    pub lattice: Lattice,
    pub reward: RewardConfig,
    pub init: BeamInit,
    pub driven: [usize; 2],
    pub drives: Drives,
}

impl Plant for ScheduledPlant {
    fn pin(&self, q: &mut [f64]) {
        q[self.driven[0] - 1] = self.drives.q1;
        q[self.driven[1] - 1] = self.drives.q10;
    }

    fn evaluate(&self, q: &[f64]) -> Evaluation {
        Evaluation::run(&self.lattice, &self.reward, q.to_vec(), &self.init)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Drl,
    Es,
    EsWarm,
    Hybrid,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [Self::Drl, Self::Es, Self::EsWarm, Self::Hybrid];

    pub fn needs_policy(self) -> bool {
        self != Self::Es
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Drl => "drl",
            Self::Es => "es",
            Self::EsWarm => "es-warm",
            Self::Hybrid => "hybrid",
        })
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "drl" => Ok(Self::Drl),
            "es" => Ok(Self::Es),
            "es-warm" | "es_warm" => Ok(Self::EsWarm),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected drl, es, es-warm or hybrid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    pub schedule: PerturbationSchedule,
    pub es: EsConfig,
    pub supervisor: SupervisorConfig,
    pub init: BeamInit,
    /// `[start, end]` step windows, inclusive, for the summary means.
    pub windows: Vec<[usize; 2]>,
}

/// One step of a controller trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub reward: f64,
    pub beta: u8,
    pub q1: f64,
    pub q10: f64,
    pub delta_l: f64,
    pub x_mean: Option<f64>,
    pub y_mean: Option<f64>,
    /// `‖Q(t+1) − Q(t)‖∞`.
    pub dq_inf: f64,
    pub switched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTrace {
    pub kind: VariantKind,
    pub rows: Vec<TraceRow>,
}

impl VariantTrace {
    /// `t,reward,beta,Q1,Q10,deltaL` with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,reward,beta,Q1,Q10,deltaL\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{},{:.17e},{:.17e},{:.17e}\n",
                r.t, r.reward, r.beta, r.q1, r.q10, r.delta_l
            ));
        }
        out
    }

    /// Mean reward over `[start, end]`, inclusive.
    pub fn window_mean(&self, start: usize, end: usize) -> f64 {
        let sel: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.t >= start && r.t <= end)
            .map(|r| r.reward)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.reward).collect()
    }

    pub fn betas(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.beta).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub windows: Vec<[usize; 2]>,
    /// Variant name to one mean per window.
    pub means: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub traces: Vec<VariantTrace>,
    pub summary: ComparisonSummary,
}

impl Comparison {
    pub fn trace(&self, kind: VariantKind) -> Option<&VariantTrace> {
        self.traces.iter().find(|t| t.kind == kind)
    }
}

fn es_from(t: usize, params: Vec<f64>) -> EsState {
    EsState {
        step_index: t as u64,
        params,
    }
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs one controller over `t = 0..=horizon`.
///
/// Row `t` reports the reward of the settings in force at step `t` and the
/// β chosen at that step for the next settings.
pub fn run_variant(
    kind: VariantKind,
    lattice: &Lattice,
    reward: &RewardConfig,
    policy: Option<&RuntimePolicy>,
    cfg: &ComparisonConfig,
) -> Result<VariantTrace> {
    let schedule = &cfg.schedule;
    let n = lattice.len();
    if cfg.es.len() != n {
        return Err(Error::Config(format!(
            "es.ratios has {} entries, lattice has {n} magnets",
            cfg.es.len()
        )));
    }
    let policy = match (kind.needs_policy(), policy) {
        (true, None) => {
            return Err(Error::MissingArtifact(format!(
                "variant `{kind}` needs a trained policy checkpoint (run `esdrl train` first or pass --checkpoint)"
            )))
        }
        (_, p) => p,
    };
    let mask = schedule.actuated(n);
    let mut q = lattice.nominal_strengths();
    let mut last_feasible = q.clone();
    let mut hybrid = HybridState::new(q.clone());
    let mut rows = Vec::with_capacity(schedule.horizon + 1);
    let mut shifted: Option<(f64, Lattice)> = None;
    for t in 0..=schedule.horizon {
        let drives = schedule.eval(t);
        let lat = match &shifted {
            Some((dl, l)) if *dl == drives.delta_l => l.clone(),
            _ => {
                let l = lattice.with_shift(schedule.drifted, drives.delta_l)?;
                shifted = Some((drives.delta_l, l.clone()));
                l
            }
        };
        let plant = ScheduledPlant {
            lattice: lat,
            reward: reward.clone(),
            init: cfg.init,
            driven: schedule.driven,
            drives,
        };
        plant.pin(&mut q);
        let ev = plant.evaluate(&q);
        let averages = path_averages(&ev.traj).ok();
        if ev.feasible() {
            last_feasible = q.clone();
        }
        let v = ev.reward;
        let (q_next, beta, switched) = match kind {
            VariantKind::Drl => {
                let next = if ev.feasible() {
                    let mut r = policy.expect("checked").recommend(&ev.traj)?;
                    plant.pin(&mut r);
                    r
                } else {
                    last_feasible.clone()
                };
                (next, 1, false)
            }
            VariantKind::Es => {
                let base = if ev.feasible() {
                    q.clone()
                } else {
                    last_feasible.clone()
                };
                let s = es_step_masked(&es_from(t, base), v, &cfg.es, Some(&mask))?;
                (s.params, 0, false)
            }
            VariantKind::EsWarm => {
                let s = if t == 0 && ev.feasible() {
                    let mut seed = policy.expect("checked").recommend(&ev.traj)?;
                    plant.pin(&mut seed);
                    let seed_v = plant.evaluate(&seed).reward;
                    es_step_masked(&es_from(t, seed), seed_v, &cfg.es, Some(&mask))?
                } else {
                    let base = if ev.feasible() {
                        q.clone()
                    } else {
                        last_feasible.clone()
                    };
                    es_step_masked(&es_from(t, base), v, &cfg.es, Some(&mask))?
                };
                (s.params, 0, false)
            }
            VariantKind::Hybrid => {
                let ctx = HybridContext {
                    policy: policy.expect("checked"),
                    es: &cfg.es,
                    es_mask: &mask,
                    supervisor: &cfg.supervisor,
                };
                let step = hybrid_step(&mut hybrid, &ctx, &plant, &q, &ev.traj, v)?;
                (step.q_next, step.beta, step.switched)
            }
        };
        rows.push(TraceRow {
            t,
            reward: v,
            beta,
            q1: drives.q1,
            q10: drives.q10,
            delta_l: drives.delta_l,
            x_mean: averages.map(|a| a.x_mean),
            y_mean: averages.map(|a| a.y_mean),
            dq_inf: inf_norm(&q_next, &q),
            switched,
        });
        q = q_next;
    }
    Ok(VariantTrace { kind, rows })
}

/// Runs every requested controller under the same schedule.
pub fn run_comparison(
    variants: &[VariantKind],
    lattice: &Lattice,
    reward: &RewardConfig,
    policy: Option<&RuntimePolicy>,
    cfg: &ComparisonConfig,
) -> Result<Comparison> {
    cfg.schedule.validate(lattice)?;
    cfg.es.validate()?;
    cfg.supervisor.validate()?;
    let traces = variants
        .iter()
        .map(|&k| run_variant(k, lattice, reward, policy, cfg))
        .collect::<Result<Vec<_>>>()?;
    let means = traces
        .iter()
        .map(|tr| {
            let m = cfg
                .windows
                .iter()
                .map(|w| tr.window_mean(w[0], w[1]))
                .collect();
            (tr.kind.to_string(), m)
        })
        .collect();
    Ok(Comparison {
        traces,
        summary: ComparisonSummary {
            windows: cfg.windows.clone(),
            means,
        },
    })
}

// ---------------------------------------------------------------------------
// Scalar study.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study1dConfig {
    pub a: f64,
    pub b0: f64,
    pub f_high: f64,
    pub f_low: f64,
    pub x0: f64,
    /// Simulated time of each trace.
    pub horizon: f64,
    pub ceiling: f64,
    pub es: ContinuousEs,
    pub es_dt: f64,
    /// Control interval of the learned agent.
    pub drl_dt: f64,
    pub drl_u_max: f64,
    pub drl_episodes: usize,
    /// Steps per training episode.
    pub drl_horizon: usize,
    pub drl_x0_range: f64,
    pub ddpg: DdpgConfig,
}

impl Default for Study1dConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b0: 1.0,
            f_high: 1.0,
            f_low: 0.05,
            x0: 1.0,
            horizon: 20.0,
            ceiling: 10.0,
            es: ContinuousEs {
                alpha: 1.0,
                omega: 200.0,
                gain: 10.0,
                maximize: true,
            },
            es_dt: 1e-3,
            drl_dt: 0.05,
            drl_u_max: 5.0,
            drl_episodes: 150,
            drl_horizon: 200,
            drl_x0_range: 2.0,
            ddpg: DdpgConfig {
                hidden: vec![32, 32],
                batch_size: 64,
                actor_lr: 1e-3,
                critic_lr: 1e-3,
                warmup_batches: 5,
                actor_final_scale: 1e-3,
                ..DdpgConfig::default()
            },
        }
    }
}

impl Study1dConfig {
    fn plant(&self, f: f64) -> ScalarPlant {
        ScalarPlant {
            a: self.a,
            b0: self.b0,
            f,
        }
    }

    fn env(&self, f: f64, frozen: bool) -> ScalarEnv {
        ScalarEnv::new(ScalarEnvConfig {
            plant: self.plant(f),
            dt: self.drl_dt,
            horizon: self.drl_horizon,
            u_max: self.drl_u_max,
            x0_range: self.drl_x0_range,
            ceiling: self.ceiling,
            frozen,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b0 > 0.0) {
            return Err(Error::Config("study1d.b0 must be positive".into()));
        }
        if !(self.es_dt > 0.0) || self.es_dt * self.es.omega > 0.5 {
            return Err(Error::Config(
                "study1d.es_dt is too coarse for the dither".into(),
            ));
        }
        if !(self.drl_dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::Config("study1d time steps must be positive".into()));
        }
        self.ddpg.validate()
    }
}

/// Trains the scalar agent on the plant with `b` frozen at `b₀`.
pub fn train_1d_agent(cfg: &Study1dConfig, seed: u64) -> Result<RuntimePolicy> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = cfg.env(0.0, true);
    let mut agent = AgentBundle::new(env.obs_dim(), env.act_dim(), &cfg.ddpg, &mut rng)?;
    train(&mut env, &mut agent, &cfg.ddpg, cfg.drl_episodes, &mut rng)?;
    RuntimePolicy::new(
        agent.actor,
        PolicyMeta {
            observation: None,
            q0: vec![0.0],
            limits: vec![cfg.drl_u_max],
        },
    )
}

/// Closed-loop trace of the scalar agent; the action is held over each
/// control interval.
pub fn drl_scalar_trace(
    cfg: &Study1dConfig,
    f: f64,
    policy: &RuntimePolicy,
) -> Result<ScalarTrace> {
    let mut env = cfg.env(f, false);
    env.set_state(cfg.x0, 0.0);
    let steps = (cfg.horizon / cfg.drl_dt).round() as usize;
    let mut trace = ScalarTrace::default();
    trace.t.push(0.0);
    trace.x.push(cfg.x0);
    trace.v.push(gaussian_objective(cfg.x0));
    for k in 0..steps {
        let u = policy.settings(&[env.state()])?[0];
        env.advance(u);
        let x = env.state();
        let t = (k + 1) as f64 * cfg.drl_dt;
        if !x.is_finite() || x.abs() > cfg.ceiling {
            trace.diverged_at = Some(t);
            trace.t.push(t);
            trace.x.push(x);
            trace.v.push(0.0);
            break;
        }
        trace.t.push(t);
        trace.x.push(x);
        trace.v.push(gaussian_objective(x));
    }
    Ok(trace)
}

pub fn es_scalar_trace(cfg: &Study1dConfig, f: f64) -> ScalarTrace {
    let run = ScalarRun {
        x0: cfg.x0,
        horizon: cfg.horizon,
        dt: cfg.es_dt,
        ceiling: cfg.ceiling,
    };
    simulate_scalar(&cfg.plant(f), &run, gaussian_objective, |x, t| {
        cfg.es.control(t, gaussian_objective(x))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study1dPair {
    pub f: f64,
    pub es: ScalarTrace,
    pub drl: ScalarTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study1dResult {
    pub high: Study1dPair,
    pub low: Study1dPair,
}

pub fn run_1d_study(cfg: &Study1dConfig, drl: &RuntimePolicy) -> Result<Study1dResult> {
    cfg.validate()?;
    let pair = |f: f64| -> Result<Study1dPair> {
        Ok(Study1dPair {
            f,
            es: es_scalar_trace(cfg, f),
            drl: drl_scalar_trace(cfg, f, drl)?,
        })
    };
    Ok(Study1dResult {
        high: pair(cfg.f_high)?,
        low: pair(cfg.f_low)?,
    })
}

/// `t,V` rows for a scalar trace.
pub fn scalar_csv(trace: &ScalarTrace) -> String {
    let mut out = String::from("t,x,V\n");
    for ((t, x), v) in trace.t.iter().zip(&trace.x).zip(&trace.v) {
        out.push_str(&format!("{t:.17e},{x:.17e},{v:.17e}\n"));
    }
    out
}
