//! Bounded extremum seeking.
//!
//! Discrete multi-parameter update used on the magnet strengths:
//!
//! ```text
//! Qᵢ(t+1) = Qᵢ(t) + Δt √(α ωᵢ) cos(ωᵢ t Δt ∓ k V(t))
//! ```
//!
//! with `ωᵢ = rᵢ ω`. The sign in front of `kV` is `-` when maximizing. The
//! per-step change of every coordinate is bounded by `Δt √(α ωᵢ)` no matter
//! what the measured objective does. On average the parameters follow
//! `dQ/dτ = ±(kα/2) ∇V`, which is what the averaging checks here measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsConfig {
    /// Dither amplitude parameter `α`.
    pub alpha: f64,
    /// Base dither frequency `ω`, rad per unit time.
    pub omega: f64,
    /// Frequency ratios `rᵢ`, one per tuned parameter.
    pub ratios: Vec<f64>,
    /// Feedback gain `k`.
    pub gain: f64,
    /// Update interval `Δt`.
    pub dt: f64,
    /// Ascend `V` when true, descend when false.
    #[serde(default = "default_true")]
    pub maximize: bool,
}

impl EsConfig {
    /// Defaults for `n` parameters: `Δt = 1`, `k = 15`, ratios from the
    /// golden-ratio ladder and `ω` chosen so that `ωᵢ Δt` lies in `[0.125, 0.25)`.
    pub fn with_defaults(n: usize, alpha: f64) -> Self {
        Self {
            alpha,
            omega: 0.125,
            ratios: golden_ratios(n),
            gain: 15.0,
            dt: 1.0,
            maximize: true,
        }
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| r * self.omega).collect()
    }

    /// Hard bound `Δt √(α ωᵢ)` on the change of parameter `i` per step.
    pub fn step_bound(&self, i: usize) -> f64 {
        self.dt * (self.alpha * (self.ratios[i] * self.omega)).sqrt()
    }

    pub fn max_step_bound(&self) -> f64 {
        (0..self.len())
            .map(|i| self.step_bound(i))
            .fold(0.0, f64::max)
    }

    /// Peak excursion `√(α/ωᵢ)` of the dither around the averaged path.
    pub fn dither_amplitude(&self, i: usize) -> f64 {
        (self.alpha / (self.ratios[i] * self.omega)).sqrt()
    }

    fn sign(&self) -> f64 {
        if self.maximize {
            -1.0
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("es.alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return bad(format!("es.omega must be positive, got {}", self.omega));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("es.dt must be positive, got {}", self.dt));
        }
        if !self.gain.is_finite() {
            return bad("es.gain must be finite".into());
        }
        if self.ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("es.ratios must be positive".into());
        }
        for i in 0..self.ratios.len() {
            for j in 0..i {
                if self.ratios[i] == self.ratios[j] {
                    return bad(format!(
                        "es.ratios[{j}] and es.ratios[{i}] are both {}; dither frequencies must be distinct",
                        self.ratios[i]
                    ));
                }
            }
        }
        let fastest = self.omegas().into_iter().fold(0.0, f64::max);
        if fastest * self.dt > 0.25 {
            return bad(format!(
                "es.dt * max(omega_i) = {} exceeds 0.25",
                fastest * self.dt
            ));
        }
        Ok(())
    }
}

/// `rᵢ = 1 + frac(i (√5 − 1)/2)` for `i = 1..=n`: distinct, in `[1, 2)`.
pub fn golden_ratios(n: usize) -> Vec<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    (1..=n).map(|i| 1.0 + (i as f64 * g).fract()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsState {
    pub step_index: u64,
    pub params: Vec<f64>,
}

impl EsState {
    pub fn new(params: Vec<f64>) -> Self {
        Self {
            step_index: 0,
            params,
        }
    }
}

/// One bounded ES update of every parameter.
pub fn es_step(state: &EsState, objective: f64, cfg: &EsConfig) -> Result<EsState> {
    es_step_masked(state, objective, cfg, None)
}

/// Like [`es_step`], but parameters whose mask entry is `false` are left
/// untouched.
pub fn es_step_masked(
    state: &EsState,
    objective: f64,
    cfg: &EsConfig,
    active: Option<&[bool]>,
) -> Result<EsState> {
    if !objective.is_finite() {
        return Err(Error::NonFinite("ES objective".into()));
    }
    if state.params.len() != cfg.len() {
        return Err(Error::Shape(format!(
            "ES state has {} parameters but config has {} ratios",
            state.params.len(),
            cfg.len()
        )));
    }
    if let Some(mask) = active {
        if mask.len() != cfg.len() {
            return Err(Error::Shape("ES mask length".into()));
        }
    }
    let t = state.step_index as f64 * cfg.dt;
    let phase_shift = cfg.sign() * cfg.gain * objective;
    let params = state
        .params
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if active.is_some_and(|m| !m[i]) {
                return q;
            }
            let omega_i = cfg.ratios[i] * cfg.omega;
            let bound = cfg.step_bound(i);
            let next = q + bound * (omega_i * t + phase_shift).cos();
            clamp_step(q, next, bound)
        })
        .collect();
    Ok(EsState {
        step_index: state.step_index + 1,
        params,
    })
}

/// Pulls `next` toward `q` one ulp at a time until the computed difference
/// respects the bound. Rounding of `q + d` can otherwise overshoot by half
/// an ulp of `q`.
fn clamp_step(q: f64, mut next: f64, bound: f64) -> f64 {
    while (next - q).abs() > bound {
        next = if next > q {
            next.next_down()
        } else {
            next.next_up()
        };
    }
    next
}

// ---------------------------------------------------------------------------
// Continuous-time ES on a scalar plant.

/// `ẋ = a x + b(t) u` with `b(t) = b₀ cos(2π f t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPlant {
    pub a: f64,
    pub b0: f64,
    pub f: f64,
}

impl ScalarPlant {
    pub fn b(&self, t: f64) -> f64 {
        self.b0 * (2.0 * std::f64::consts::PI * self.f * t).cos()
    }

    pub fn rhs(&self, x: f64, t: f64, u: f64) -> f64 {
        self.a * x + self.b(t) * u
    }
}

/// Objective of the scalar study, `V(x) = exp(-x²)`.
pub fn gaussian_objective(x: f64) -> f64 {
    (-x * x).exp()
}

pub fn gaussian_objective_grad(x: f64) -> f64 {
    -2.0 * x * (-x * x).exp()
}

/// Continuous-time bounded ES law `u = √(αω) cos(ωt ∓ kV)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousEs {
    pub alpha: f64,
    pub omega: f64,
    pub gain: f64,
    #[serde(default = "default_true")]
    pub maximize: bool,
}

impl ContinuousEs {
    pub fn control(&self, t: f64, v: f64) -> f64 {
        let sign = if self.maximize { -1.0 } else { 1.0 };
        (self.alpha * self.omega).sqrt() * (self.omega * t + sign * self.gain * v).cos()
    }
}

/// Sampled scalar trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarTrace {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Time at which `|x|` crossed the ceiling, if it did.
    pub diverged_at: Option<f64>,
}

impl ScalarTrace {
    /// Every `every`-th sample, always keeping the last one.
    pub fn thinned(&self, every: usize) -> Self {
        let every = every.max(1);
        let last = self.t.len().saturating_sub(1);
        let keep: Vec<usize> = (0..self.t.len())
            .filter(|k| k % every == 0 || *k == last)
            .collect();
        Self {
            t: keep.iter().map(|&k| self.t[k]).collect(),
            x: keep.iter().map(|&k| self.x[k]).collect(),
            v: keep.iter().map(|&k| self.v[k]).collect(),
            diverged_at: self.diverged_at,
        }
    }
}

/// Settings shared by the scalar simulations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarRun {
    pub x0: f64,
    pub horizon: f64,
    pub dt: f64,
    /// `|x|` beyond this stops the run.
    pub ceiling: f64,
}

/// RK4 simulation of the scalar plant under a state feedback `u(x, t)`.
///
/// Crossing the ceiling ends the run and is recorded in `diverged_at`; use
/// [`ScalarTrace::diverged_at`] or [`check_divergence`] to turn it into an error.
pub fn simulate_scalar(
    plant: &ScalarPlant,
    run: &ScalarRun,
    mut objective: impl FnMut(f64) -> f64,
    mut control: impl FnMut(f64, f64) -> f64,
) -> ScalarTrace {
    let steps = (run.horizon / run.dt).round() as usize;
    let h = run.dt;
    let mut trace = ScalarTrace::default();
    let mut x = run.x0;
    trace.t.push(0.0);
    trace.x.push(x);
    trace.v.push(objective(x));
    for k in 0..steps {
        let t = k as f64 * h;
        let mut f = |x: f64, t: f64| plant.rhs(x, t, control(x, t));
        let k1 = f(x, t);
        let k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
        let k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
        let k4 = f(x + h * k3, t + h);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let t_next = (k + 1) as f64 * h;
        if !x.is_finite() || x.abs() > run.ceiling {
            trace.diverged_at = Some(t_next);
            break;
        }
        trace.t.push(t_next);
        trace.x.push(x);
        trace.v.push(objective(x));
    }
    trace
}

pub fn check_divergence(trace: &ScalarTrace, ceiling: f64) -> Result<()> {
    match trace.diverged_at {
        Some(time) => Err(Error::Diverged {
            time,
            value: trace.x.last().copied().unwrap_or(f64::NAN).abs(),
            ceiling,
        }),
        None => Ok(()),
    }
}

/// Closed-loop scalar plant under the continuous ES law with `V = exp(-x²)`.
pub fn es_continuous(
    plant: &ScalarPlant,
    es: &ContinuousEs,
    run: &ScalarRun,
) -> Result<ScalarTrace> {
    if !(run.horizon > 0.0) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if !(run.dt > 0.0) || run.dt * es.omega > 0.5 {
        return Err(Error::Config(format!(
            "integration step {} is not small against the dither period {}",
            run.dt,
            2.0 * std::f64::consts::PI / es.omega
        )));
    }
    let trace = simulate_scalar(plant, run, gaussian_objective, |x, t| {
        es.control(t, gaussian_objective(x))
    });
    check_divergence(&trace, run.ceiling)?;
    Ok(trace)
}

/// Averaged dynamics `x̄' = a x̄ ± (kα/2) b²(t) V'(x̄)`, integrated with RK4 at step `dt`.
pub fn averaged_scalar(plant: &ScalarPlant, es: &ContinuousEs, run: &ScalarRun) -> ScalarTrace {
    let sign = if es.maximize { 1.0 } else { -1.0 };
    let gain = sign * es.gain * es.alpha / 2.0;
    let steps = (run.horizon / run.dt).round() as usize;
    let h = run.dt;
    let f = |x: f64, t: f64| plant.a * x + gain * plant.b(t).powi(2) * gaussian_objective_grad(x);
    let mut trace = ScalarTrace::default();
    let mut x = run.x0;
    trace.t.push(0.0);
    trace.x.push(x);
    trace.v.push(gaussian_objective(x));
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = f(x, t);
        let k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
        let k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
        let k4 = f(x + h * k3, t + h);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        trace.t.push((k + 1) as f64 * h);
        trace.x.push(x);
        trace.v.push(gaussian_objective(x));
    }
    trace
}

/// `sup |x(t) - x̄(t)|` between a dithered run and its averaged counterpart,
/// comparing at the dithered run's sample times (linear interpolation on x̄).
pub fn scalar_tracking_error(actual: &ScalarTrace, averaged: &ScalarTrace) -> f64 {
    let mut worst = 0.0f64;
    let h = averaged.t[1] - averaged.t[0];
    for (&t, &x) in actual.t.iter().zip(&actual.x) {
        let pos = t / h;
        let k = (pos.floor() as usize).min(averaged.x.len() - 2);
        let w = pos - k as f64;
        let xbar = averaged.x[k] * (1.0 - w) + averaged.x[k + 1] * w;
        worst = worst.max((x - xbar).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Averaging diagnostics for the discrete update on a static objective.

/// Outcome of [`averaged_descent_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// Largest distance between the ES iterate and the gradient-flow oracle.
    pub max_deviation: f64,
    /// Largest distance between any two points of the oracle path.
    pub diameter: f64,
    pub es_final: Vec<f64>,
    pub oracle_final: Vec<f64>,
    /// ES iterates, one row per step (including the start).
    pub es_path: Vec<Vec<f64>>,
}

impl DescentReport {
    pub fn relative_deviation(&self) -> f64 {
        self.max_deviation / self.diameter
    }
}

fn central_gradient(j: &dyn Fn(&[f64]) -> f64, q: &[f64], h: f64) -> Vec<f64> {
    let mut probe = q.to_vec();
    (0..q.len())
        .map(|i| {
            probe[i] = q[i] + h;
            let up = j(&probe);
            probe[i] = q[i] - h;
            let down = j(&probe);
            probe[i] = q[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Runs `steps` discrete ES updates on the static objective `j` from `q0`
/// and compares against the gradient flow `dQ/dτ = ±(kα/2) ∇J`, `τ = tΔt`.
///
/// The oracle uses a central-difference gradient of `j` and RK4 at 1/100
/// of the fastest dither period.
pub fn averaged_descent_check(
    j: &dyn Fn(&[f64]) -> f64,
    cfg: &EsConfig,
    q0: &[f64],
    steps: usize,
) -> Result<DescentReport> {
    cfg.validate()?;
    let mut state = EsState::new(q0.to_vec());
    let mut es_path = vec![state.params.clone()];
    for _ in 0..steps {
        let v = j(&state.params);
        state = es_step(&state, v, cfg)?;
        es_path.push(state.params.clone());
    }

    let sign = if cfg.maximize { 1.0 } else { -1.0 };
    let gain = sign * cfg.gain * cfg.alpha / 2.0;
    let fastest = cfg.omegas().into_iter().fold(0.0, f64::max);
    let fine = 2.0 * std::f64::consts::PI / fastest / 100.0;
    let sub = (cfg.dt / fine).ceil().max(1.0) as usize;
    let h = cfg.dt / sub as f64;
    let flow = |q: &[f64]| -> Vec<f64> {
        central_gradient(j, q, 1e-6)
            .into_iter()
            .map(|g| gain * g)
            .collect()
    };
    let mut q = q0.to_vec();
    let mut oracle_path = vec![q.clone()];
    for _ in 0..steps {
        for _ in 0..sub {
            let k1 = flow(&q);
            let s2: Vec<f64> = q.iter().zip(&k1).map(|(a, d)| a + 0.5 * h * d).collect();
            let k2 = flow(&s2);
            let s3: Vec<f64> = q.iter().zip(&k2).map(|(a, d)| a + 0.5 * h * d).collect();
            let k3 = flow(&s3);
            let s4: Vec<f64> = q.iter().zip(&k3).map(|(a, d)| a + h * d).collect();
            let k4 = flow(&s4);
            for i in 0..q.len() {
                q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        oracle_path.push(q.clone());
    }

    let max_deviation = es_path
        .iter()
        .zip(&oracle_path)
        .map(|(a, b)| dist(a, b))
        .fold(0.0, f64::max);
    let diameter = oracle_path
        .iter()
        .map(|p| dist(p, &oracle_path[0]))
        .fold(0.0, f64::max);
    Ok(DescentReport {
        max_deviation,
        diameter,
        es_final: state.params,
        oracle_final: q,
        es_path,
    })
}
