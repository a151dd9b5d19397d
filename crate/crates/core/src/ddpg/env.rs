use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::ScalarPlant;
use crate::kv::{integrate, observe, BeamInit, EnvelopeTrajectory, Lattice};
use crate::reward::{failure_reward, penalty, RewardConfig};

/// Outcome of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Arc<[f64]>,
    /// Normalized action actually applied after masking and saturation.
    pub applied: Vec<f64>,
    pub reward: f64,
    /// The episode ends here and the transition is terminal.
    pub done: bool,
    pub failed: bool,
}

/// Episodic environment with actions normalized to `[-1, 1]`.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Arc<[f64]>>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

fn saturate(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// Encoding of an envelope trajectory into network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Keep every `stride`-th grid sample of each channel.
    pub stride: usize,
    /// Divisor for `X`, `Y`, meters.
    pub envelope_scale: f64,
    /// Divisor for `X'`, `Y'`, radians.
    pub slope_scale: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            envelope_scale: 0.0127,
            slope_scale: 0.01,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config(
                "observation.stride must be at least 1".into(),
            ));
        }
        if !(self.envelope_scale > 0.0 && self.slope_scale > 0.0) {
            return Err(Error::Config("observation scales must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self, lattice: &Lattice) -> usize {
        4 * lattice.grid_points.div_ceil(self.stride)
    }

    pub fn encode(&self, traj: &EnvelopeTrajectory) -> Result<Vec<f64>> {
        let raw = observe(traj)?;
        let n = raw.len() / 4;
        let mut out = Vec::with_capacity(4 * n.div_ceil(self.stride));
        for (c, chunk) in raw.chunks_exact(n).enumerate() {
            let scale = if c < 2 {
                self.envelope_scale
            } else {
                self.slope_scale
            };
            out.extend(chunk.iter().step_by(self.stride).map(|v| v / scale));
        }
        Ok(out)
    }
}

/// Magnet settings evaluated on the lattice.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub q: Vec<f64>,
    pub traj: EnvelopeTrajectory,
    pub reward: f64,
}

impl Evaluation {
    pub fn run(lattice: &Lattice, reward: &RewardConfig, q: Vec<f64>, init: &BeamInit) -> Self {
        let traj = integrate(lattice, &q, init);
        let reward = match penalty(&traj, reward) {
            Ok(b) => b.reward,
            Err(_) => failure_reward(reward),
        };
        Self { q, traj, reward }
    }

    pub fn feasible(&self) -> bool {
        self.traj.feasible
    }
}

/// Per-episode initial beam state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitRanges {
    /// Bounds for `X₀` and `Y₀`, meters.
    pub envelope: [f64; 2],
    /// Bounds for `X'₀` and `Y'₀`, radians.
    pub slope: [f64; 2],
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            envelope: [1.5e-3, 4.5e-3],
            slope: [-1e-2, 1e-2],
        }
    }
}

impl InitRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> BeamInit {
        let mut u = |r: [f64; 2]| rng.random_range(r[0]..=r[1]);
        BeamInit::new(
            u(self.envelope),
            u(self.envelope),
            u(self.slope),
            u(self.slope),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    Fixed(BeamInit),
    Randomized(InitRanges),
}

/// Exogenous changes applied during training episodes. The driven magnets
/// follow `Qⱼ⋆ + A sin(ν k + φ)` over the episode step `k`, with `A` and `φ`
/// drawn per episode, and are not under the agent's control. One magnet is
/// shifted by a per-episode distance drawn from `shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    /// 1-based magnet indices.
    pub driven: Vec<usize>,
    pub setpoints: Vec<f64>,
    /// Upper bound on `A`, tesla/meter.
    pub amplitude: f64,
    /// `ν`, rad per step.
    pub nu: f64,
    pub shifted: usize,
    /// Bounds on the shift, meters.
    pub shift: [f64; 2],
}

impl Default for Disturbance {
    fn default() -> Self {
        Self {
            driven: vec![1, 10],
            setpoints: vec![1.21, 3.5],
            amplitude: 0.5,
            nu: std::f64::consts::PI / 50.0,
            shifted: 10,
            shift: [0.0, 0.15],
        }
    }
}

impl Disturbance {
    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        let n = lattice.len();
        if self.driven.len() != self.setpoints.len() {
            return Err(Error::Config(
                "disturbance.driven and disturbance.setpoints differ in length".into(),
            ));
        }
        if self
            .driven
            .iter()
            .chain([&self.shifted])
            .any(|&i| i == 0 || i > n)
        {
            return Err(Error::Config(format!(
                "disturbance refers to a magnet outside 1..={n}"
            )));
        }
        if !(self.amplitude >= 0.0) || !self.nu.is_finite() || !(self.shift[0] <= self.shift[1]) {
            return Err(Error::Config("disturbance ranges are malformed".into()));
        }
        for d in self.shift {
            lattice.with_shift(self.shifted, d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EpisodeDrive {
    amplitude: f64,
    phase: f64,
    lattice: Lattice,
}

/// The beamline as an episodic environment.
///
/// Actions are offsets from the initial settings `Q(0)`, normalized by the
/// per-magnet limits. Magnets outside `mask` stay at `Q(0)`.
#[derive(Clone, Debug)]
pub struct KvEnv {
    pub lattice: Lattice,
    pub reward: RewardConfig,
    pub observation: ObservationConfig,
    pub q0: Vec<f64>,
    pub limits: Vec<f64>,
    pub mask: Vec<bool>,
    pub init_mode: InitMode,
    pub horizon: usize,
    pub disturbance: Option<Disturbance>,
    drive: Option<EpisodeDrive>,
    k: usize,
    init: BeamInit,
    q: Vec<f64>,
    last_feasible: Vec<f64>,
    obs: Arc<[f64]>,
}

impl KvEnv {
    pub fn new(
        lattice: Lattice,
        reward: RewardConfig,
        observation: ObservationConfig,
        action_fraction: f64,
        horizon: usize,
        init_mode: InitMode,
    ) -> Result<Self> {
        lattice.validate()?;
        reward.validate()?;
        observation.validate()?;
        if !(action_fraction > 0.0) {
            return Err(Error::Config(
                "ddpg.action_fraction must be positive".into(),
            ));
        }
        let q0 = lattice.nominal_strengths();
        let limits = q0.iter().map(|q| action_fraction * q.abs()).collect();
        let n = q0.len();
        let init = match &init_mode {
            InitMode::Fixed(b) => *b,
            InitMode::Randomized(_) => BeamInit::new(3e-3, 3e-3, 0.0, 0.0),
        };
        Ok(Self {
            lattice,
            reward,
            observation,
            q: q0.clone(),
            last_feasible: q0.clone(),
            q0,
            limits,
            mask: vec![true; n],
            init_mode,
            horizon,
            disturbance: None,
            drive: None,
            k: 0,
            init,
            obs: Arc::from(Vec::new()),
        })
    }

    pub fn with_disturbance(mut self, d: Disturbance) -> Result<Self> {
        d.validate(&self.lattice)?;
        self.disturbance = Some(d);
        Ok(self)
    }

    fn plant(&self) -> &Lattice {
        self.drive.as_ref().map_or(&self.lattice, |d| &d.lattice)
    }

    /// Overwrites the driven magnets with their values at episode step `k`.
    fn pin(&self, q: &mut [f64], k: usize) {
        if let (Some(d), Some(e)) = (&self.disturbance, &self.drive) {
            let s = e.amplitude * (d.nu * k as f64 + e.phase).sin();
            for (&i, &q_star) in d.driven.iter().zip(&d.setpoints) {
                q[i - 1] = q_star + s;
            }
        }
    }

    pub fn settings(&self) -> &[f64] {
        &self.q
    }

    pub fn last_feasible(&self) -> &[f64] {
        &self.last_feasible
    }

    pub fn beam_init(&self) -> BeamInit {
        self.init
    }

    /// Physical settings `Q(0) + offset` for a normalized action.
    pub fn settings_for(&self, action: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = self
            .q0
            .iter()
            .zip(&self.limits)
            .zip(action)
            .zip(&self.mask)
            .map(|(((q, l), a), m)| if *m { q + l * a.clamp(-1.0, 1.0) } else { *q })
            .collect();
        self.pin(&mut q, self.k);
        q
    }
}

impl Environment for KvEnv {
    fn obs_dim(&self) -> usize {
        self.observation.dim(&self.lattice)
    }

    fn act_dim(&self) -> usize {
        self.q0.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Arc<[f64]>> {
        for _ in 0..100 {
            self.init = match &self.init_mode {
                InitMode::Fixed(b) => *b,
                InitMode::Randomized(r) => r.sample(rng),
            };
            self.k = 0;
            self.drive = match &self.disturbance {
                Some(d) => Some(EpisodeDrive {
                    amplitude: rng.random_range(0.0..=d.amplitude),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    lattice: self
                        .lattice
                        .with_shift(d.shifted, rng.random_range(d.shift[0]..=d.shift[1]))?,
                }),
                None => None,
            };
            let mut q = self.q0.clone();
            self.pin(&mut q, 0);
            let ev = Evaluation::run(self.plant(), &self.reward, q, &self.init);
            if ev.feasible() {
                self.q = ev.q.clone();
                self.last_feasible = ev.q;
                self.obs = Arc::from(self.observation.encode(&ev.traj)?);
                return Ok(self.obs.clone());
            }
            if matches!(self.init_mode, InitMode::Fixed(_)) && self.disturbance.is_none() {
                break;
            }
        }
        Err(Error::Infeasible)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.q0.len() {
            return Err(Error::Shape(format!(
                "action has {} entries for {} magnets",
                action.len(),
                self.q0.len()
            )));
        }
        let mut applied: Vec<f64> = saturate(action)
            .into_iter()
            .zip(&self.mask)
            .map(|(a, m)| if *m { a } else { 0.0 })
            .collect();
        if let Some(d) = &self.disturbance {
            for &i in &d.driven {
                applied[i - 1] = 0.0;
            }
        }
        self.k += 1;
        let ev = Evaluation::run(
            self.plant(),
            &self.reward,
            self.settings_for(&applied),
            &self.init,
        );
        if !ev.feasible() {
            self.q = self.last_feasible.clone();
            return Ok(StepResult {
                obs: self.obs.clone(),
                applied,
                reward: ev.reward,
                done: true,
                failed: true,
            });
        }
        self.q = ev.q;
        self.last_feasible = self.q.clone();
        self.obs = Arc::from(self.observation.encode(&ev.traj)?);
        Ok(StepResult {
            obs: self.obs.clone(),
            applied,
            reward: ev.reward,
            done: false,
            failed: false,
        })
    }
}

/// The scalar plant `ẋ = a x + b(t) u` as an environment with reward
/// `exp(-x²)`. With `frozen` set, `b` stays at `b₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarEnvConfig {
    pub plant: ScalarPlant,
    pub dt: f64,
    pub horizon: usize,
    pub u_max: f64,
    /// Initial state drawn from `U[-x0_range, x0_range]`.
    pub x0_range: f64,
    /// Episode ends once `|x|` exceeds this.
    pub ceiling: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct ScalarEnv {
    pub cfg: ScalarEnvConfig,
    x: f64,
    t: f64,
}

impl ScalarEnv {
    pub fn new(cfg: ScalarEnvConfig) -> Self {
        Self {
            cfg,
            x: 0.0,
            t: 0.0,
        }
    }

    pub fn state(&self) -> f64 {
        self.x
    }

    pub fn set_state(&mut self, x: f64, t: f64) {
        self.x = x;
        self.t = t;
    }

    fn gain(&self, t: f64) -> f64 {
        if self.cfg.frozen {
            self.cfg.plant.b0
        } else {
            self.cfg.plant.b(t)
        }
    }

    /// Advances the plant by one step with `u` held.
    pub fn advance(&mut self, u: f64) {
        let a = self.cfg.plant.a;
        let h = self.cfg.dt;
        let f = |x: f64, t: f64| a * x + self.gain(t) * u;
        let (x, t) = (self.x, self.t);
        let k1 = f(x, t);
        let k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
        let k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
        let k4 = f(x + h * k3, t + h);
        self.x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        self.t = t + h;
    }
}

impl Environment for ScalarEnv {
    fn obs_dim(&self) -> usize {
        1
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Arc<[f64]>> {
        let r = self.cfg.x0_range;
        self.x = if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        };
        self.t = 0.0;
        Ok(Arc::from(vec![self.x]))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != 1 {
            return Err(Error::Shape("scalar plant takes one action".into()));
        }
        let applied = saturate(action);
        self.advance(applied[0] * self.cfg.u_max);
        let failed = !self.x.is_finite() || self.x.abs() > self.cfg.ceiling;
        Ok(StepResult {
            obs: Arc::from(vec![self.x]),
            applied,
            reward: if failed {
                0.0
            } else {
                (-self.x * self.x).exp()
            },
            done: failed,
            failed,
        })
    }
}
