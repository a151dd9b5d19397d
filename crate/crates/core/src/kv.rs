//! Kapchinskij–Vladimirskij envelope transport through a quadrupole lattice.
//!
//! The envelope radii `X(z)`, `Y(z)` of a uniform elliptical beam obey
//!
//! ```text
//! X'' = -κ(z) X + εx²/X³ + K/(X+Y)
//! Y'' = +κ(z) Y + εy²/Y³ + K/(X+Y)
//! ```
//!
//! with `κ(z) = G(z; u) / (βρ)` and `G` the piecewise-constant gradient
//! profile built from the magnet settings `u`. Integration is classic RK4 on
//! a uniform grid. Magnet edges are snapped to integration nodes and `κ` is
//! sampled at each step's midpoint, so every step sees a constant focusing
//! strength and the scheme keeps its fourth order.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Envelope radius below which the beam is declared collapsed.
pub const ENVELOPE_FLOOR: f64 = 1e-6;

/// One quadrupole in the beamline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnetSpec {
    /// 1-based position in beamline order.
    pub index: usize,
    /// Upstream edge, meters.
    pub z_start: f64,
    /// Effective length, meters.
    pub length: f64,
    /// +1 focuses in x, -1 focuses in y.
    pub polarity: i8,
    /// Nominal gradient, T/m.
    pub nominal_strength: f64,
}

impl MagnetSpec {
    pub fn z_end(&self) -> f64 {
        self.z_start + self.length
    }

    pub fn contains(&self, z: f64) -> bool {
        z >= self.z_start && z <= self.z_end()
    }
}

fn default_substeps() -> usize {
    1
}

/// Beamline geometry plus the beam physics constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Free-form note carried with the file, e.g. provenance of the geometry.
    #[serde(default)]
    pub label: String,
    pub z_max: f64,
    /// Number of grid intervals `N`; the grid has `N + 1` nodes.
    pub grid_points: usize,
    /// Optional explicit grid spacing; must agree with `z_max / grid_points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_spacing: Option<f64>,
    /// RK4 steps per grid interval. Lets a coarse observation grid keep a
    /// fine integration step.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub emittance_x: f64,
    pub emittance_y: f64,
    pub perveance: f64,
    pub rigidity: f64,
    pub pipe_radius: f64,
    pub magnets: Vec<MagnetSpec>,
}

/// Beam state at the lattice entrance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamInit {
    pub x0: f64,
    pub y0: f64,
    pub xp0: f64,
    pub yp0: f64,
}

impl BeamInit {
    pub fn new(x0: f64, y0: f64, xp0: f64, yp0: f64) -> Self {
        Self { x0, y0, xp0, yp0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x0, self.y0, self.xp0, self.yp0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("beam initial conditions".into()));
        }
        if self.x0 <= 0.0 || self.y0 <= 0.0 {
            return Err(Error::Config(format!(
                "initial envelope radii must be positive, got X0={} Y0={}",
                self.x0, self.y0
            )));
        }
        Ok(())
    }
}

/// Which transverse plane failed first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    X,
    Y,
}

/// Why an integration was abandoned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub z: f64,
    pub plane: Plane,
    pub non_finite: bool,
}

/// Envelope samples on the `N + 1` grid nodes.
///
/// Infeasible trajectories carry no samples, only the failure record.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeTrajectory {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub xp: Vec<f64>,
    pub yp: Vec<f64>,
    pub feasible: bool,
    pub failure: Option<Failure>,
}

impl EnvelopeTrajectory {
    fn infeasible(failure: Failure) -> Self {
        Self {
            z: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
            xp: Vec::new(),
            yp: Vec::new(),
            feasible: false,
            failure: Some(failure),
        }
    }

    /// Number of grid intervals `N` (samples minus one).
    pub fn intervals(&self) -> usize {
        self.z.len().saturating_sub(1)
    }

    /// Writes the `z,X,Y,Xp,Yp` table with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.z.len() * 120);
        out.push_str("z,X,Y,Xp,Yp\n");
        for k in 0..self.z.len() {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.z[k], self.x[k], self.y[k], self.xp[k], self.yp[k]
            );
        }
        out
    }
}

/// State derivative of the envelope system.
///
/// Returns [`Error::Infeasible`] if either radius is at or below the
/// collapse floor.
pub fn kv_rhs(state: [f64; 4], kappa: f64, lattice: &Lattice) -> Result<[f64; 4]> {
    rhs(
        state,
        kappa,
        lattice.emittance_x * lattice.emittance_x,
        lattice.emittance_y * lattice.emittance_y,
        lattice.perveance,
    )
    .map_err(|_| Error::Infeasible)
}

#[inline]
fn rhs(s: [f64; 4], kappa: f64, ex2: f64, ey2: f64, perveance: f64) -> Result<[f64; 4], Plane> {
    let [x, y, xp, yp] = s;
    // NaN fails both comparisons, so check for the good case explicitly.
    if !(x > ENVELOPE_FLOOR) {
        return Err(Plane::X);
    }
    if !(y > ENVELOPE_FLOOR) {
        return Err(Plane::Y);
    }
    let space_charge = perveance / (x + y);
    let xpp = -kappa * x + ex2 / (x * x * x) + space_charge;
    let ypp = kappa * y + ey2 / (y * y * y) + space_charge;
    Ok([xp, yp, xpp, ypp])
}

impl Lattice {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let lattice: Lattice = toml::from_str(text)?;
        lattice.validate()?;
        Ok(lattice)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The shipped 22-magnet doublet lattice.
    pub fn default_beamline() -> Self {
        Self::from_toml_str(include_str!("../assets/lebt_default.toml"))
            .expect("bundled lattice is valid")
    }

    /// Same magnets as [`Lattice::default_beamline`] on a 400-interval
    /// observation grid, each interval integrated in 10 substeps.
    pub fn desk_beamline() -> Self {
        Self::from_toml_str(include_str!("../assets/lebt_desk.toml"))
            .expect("bundled lattice is valid")
    }

    /// The 6-magnet, 400-interval lattice used for fast training checks.
    pub fn reduced_beamline() -> Self {
        Self::from_toml_str(include_str!("../assets/lebt_reduced.toml"))
            .expect("bundled lattice is valid")
    }

    pub fn len(&self) -> usize {
        self.magnets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnets.is_empty()
    }

    /// Grid spacing `Δz = z_max / N`.
    pub fn dz(&self) -> f64 {
        self.z_max / self.grid_points as f64
    }

    /// Integration step `Δz / substeps`.
    pub fn step(&self) -> f64 {
        self.dz() / self.substeps as f64
    }

    pub fn nominal_strengths(&self) -> Vec<f64> {
        self.magnets.iter().map(|m| m.nominal_strength).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Lattice(msg));
        if !(self.z_max > 0.0) || !self.z_max.is_finite() {
            return bad(format!("z_max must be positive, got {}", self.z_max));
        }
        if self.grid_points == 0 {
            return bad("grid_points must be at least 1".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if let Some(dz) = self.grid_spacing {
            let actual = self.dz();
            if ((actual - dz) / dz).abs() > 1e-12 {
                return bad(format!(
                    "grid_spacing {dz} disagrees with z_max/grid_points = {actual}"
                ));
            }
        }
        if !(self.emittance_x > 0.0) || !(self.emittance_y > 0.0) {
            return bad("emittances must be positive".into());
        }
        if !(self.rigidity > 0.0) {
            return bad("rigidity must be positive".into());
        }
        if !(self.perveance >= 0.0) {
            return bad("perveance must be non-negative".into());
        }
        if !(self.pipe_radius > 0.0) {
            return bad("pipe_radius must be positive".into());
        }
        if self.magnets.is_empty() {
            return bad("lattice has no magnets".into());
        }
        for (k, m) in self.magnets.iter().enumerate() {
            if m.index != k + 1 {
                return bad(format!(
                    "magnet at position {} has index {}, expected {}",
                    k + 1,
                    m.index,
                    k + 1
                ));
            }
            if !(m.length > 0.0) {
                return bad(format!("magnet {} has non-positive length", m.index));
            }
            if m.polarity != 1 && m.polarity != -1 {
                return bad(format!("magnet {} polarity must be +1 or -1", m.index));
            }
            if !m.nominal_strength.is_finite() {
                return bad(format!("magnet {} nominal strength is not finite", m.index));
            }
            if m.z_start < 0.0 || m.z_end() > self.z_max {
                return bad(format!(
                    "magnet {} spans [{}, {}] outside [0, {}]",
                    m.index,
                    m.z_start,
                    m.z_end(),
                    self.z_max
                ));
            }
        }
        for pair in self.magnets.windows(2) {
            if pair[1].z_start <= pair[0].z_end() {
                return bad(format!(
                    "magnets {} and {} overlap or are out of order",
                    pair[0].index, pair[1].index
                ));
            }
        }
        // Snapped edges must keep every magnet at least one step long and disjoint.
        let table = self.magnet_nodes();
        for (m, &(s, e)) in self.magnets.iter().zip(&table) {
            if e <= s {
                return bad(format!(
                    "magnet {} is shorter than one integration step",
                    m.index
                ));
            }
        }
        for (k, w) in table.windows(2).enumerate() {
            if w[1].0 < w[0].1 {
                return bad(format!(
                    "magnets {} and {} overlap after snapping to the grid",
                    k + 1,
                    k + 2
                ));
            }
        }
        Ok(())
    }

    /// Copy of the lattice with magnet `index` (1-based) moved by `delta` meters.
    pub fn with_shift(&self, index: usize, delta: f64) -> Result<Self> {
        let mut out = self.clone();
        let magnet = out
            .magnets
            .get_mut(index.wrapping_sub(1))
            .ok_or_else(|| Error::Lattice(format!("no magnet with index {index}")))?;
        magnet.z_start += delta;
        out.validate()?;
        Ok(out)
    }

    /// Signed gradient profile `G(z; u) = Σ uᵢ σᵢ 1[zᵢ, zᵢ+ℓᵢ](z)` in T/m.
    pub fn focusing_profile(&self, u: &[f64], z: f64) -> f64 {
        assert_eq!(u.len(), self.magnets.len(), "one strength per magnet");
        self.magnets
            .iter()
            .zip(u)
            .find(|(m, _)| m.contains(z))
            .map(|(m, &ui)| ui * f64::from(m.polarity))
            .unwrap_or(0.0)
    }

    /// Magnet edges as `[start, end)` integration-step indices.
    fn magnet_nodes(&self) -> Vec<(usize, usize)> {
        let h = self.step();
        let total = self.grid_points * self.substeps;
        self.magnets
            .iter()
            .map(|m| {
                let s = ((m.z_start / h).round() as usize).min(total);
                let e = ((m.z_end() / h).round() as usize).min(total);
                (s, e)
            })
            .collect()
    }

    /// Focusing strength `κ` for each integration step.
    pub fn kappa_steps(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.magnets.len(), "one strength per magnet");
        let mut kappa = vec![0.0; self.grid_points * self.substeps];
        for ((m, &(s, e)), &ui) in self.magnets.iter().zip(&self.magnet_nodes()).zip(u) {
            let k = ui * f64::from(m.polarity) / self.rigidity;
            kappa[s..e].iter_mut().for_each(|v| *v = k);
        }
        kappa
    }
}

/// Integrates the envelope equations from `z = 0` to `z_max`.
pub fn integrate(lattice: &Lattice, u: &[f64], init: &BeamInit) -> EnvelopeTrajectory {
    let kappa = lattice.kappa_steps(u);
    integrate_profile(lattice, &kappa, init)
}

/// Integrates with an explicit per-step focusing table.
///
/// `kappa.len()` must equal `grid_points * substeps`.
pub fn integrate_profile(lattice: &Lattice, kappa: &[f64], init: &BeamInit) -> EnvelopeTrajectory {
    let n = lattice.grid_points;
    let sub = lattice.substeps;
    assert_eq!(kappa.len(), n * sub, "kappa table length");
    let h = lattice.step();
    let dz = lattice.dz();
    let ex2 = lattice.emittance_x * lattice.emittance_x;
    let ey2 = lattice.emittance_y * lattice.emittance_y;
    let perv = lattice.perveance;

    let mut z = Vec::with_capacity(n + 1);
    let mut xs = Vec::with_capacity(n + 1);
    let mut ys = Vec::with_capacity(n + 1);
    let mut xps = Vec::with_capacity(n + 1);
    let mut yps = Vec::with_capacity(n + 1);

    let mut s = [init.x0, init.y0, init.xp0, init.yp0];
    let fail = |zf: f64, plane: Plane, non_finite: bool| {
        EnvelopeTrajectory::infeasible(Failure {
            z: zf,
            plane,
            non_finite,
        })
    };
    if let Err(plane) = rhs(s, 0.0, ex2, ey2, perv) {
        return fail(0.0, plane, s.iter().any(|v| !v.is_finite()));
    }
    let record = |s: &[f64; 4],
                  k: usize,
                  z: &mut Vec<f64>,
                  xs: &mut Vec<f64>,
                  ys: &mut Vec<f64>,
                  xps: &mut Vec<f64>,
                  yps: &mut Vec<f64>| {
        z.push(if k == n { lattice.z_max } else { k as f64 * dz });
        xs.push(s[0]);
        ys.push(s[1]);
        xps.push(s[2]);
        yps.push(s[3]);
    };
    record(&s, 0, &mut z, &mut xs, &mut ys, &mut xps, &mut yps);

    for node in 0..n {
        for j in 0..sub {
            let step = node * sub + j;
            let k = kappa[step];
            let zf = step as f64 * h;
            let res = (|| {
                let k1 = rhs(s, k, ex2, ey2, perv)?;
                let k2 = rhs(axpy(&s, 0.5 * h, &k1), k, ex2, ey2, perv)?;
                let k3 = rhs(axpy(&s, 0.5 * h, &k2), k, ex2, ey2, perv)?;
                let k4 = rhs(axpy(&s, h, &k3), k, ex2, ey2, perv)?;
                let mut next = s;
                for i in 0..4 {
                    next[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                Ok(next)
            })();
            match res {
                Ok(next) => s = next,
                Err(plane) => return fail(zf, plane, false),
            }
            if s.iter().any(|v| !v.is_finite()) {
                let plane = if s[0].is_finite() && s[2].is_finite() {
                    Plane::Y
                } else {
                    Plane::X
                };
                return fail(zf + h, plane, true);
            }
            if !(s[0] > ENVELOPE_FLOOR) {
                return fail(zf + h, Plane::X, false);
            }
            if !(s[1] > ENVELOPE_FLOOR) {
                return fail(zf + h, Plane::Y, false);
            }
        }
        record(&s, node + 1, &mut z, &mut xs, &mut ys, &mut xps, &mut yps);
    }

    EnvelopeTrajectory {
        z,
        x: xs,
        y: ys,
        xp: xps,
        yp: yps,
        feasible: true,
        failure: None,
    }
}

#[inline]
fn axpy(s: &[f64; 4], a: f64, d: &[f64; 4]) -> [f64; 4] {
    [
        s[0] + a * d[0],
        s[1] + a * d[1],
        s[2] + a * d[2],
        s[3] + a * d[3],
    ]
}

/// Flattens a feasible trajectory into `[X, Y, X', Y']`, `N` samples each.
pub fn observe(traj: &EnvelopeTrajectory) -> Result<Vec<f64>> {
    if !traj.feasible {
        return Err(Error::Infeasible);
    }
    let n = traj.intervals();
    let mut out = Vec::with_capacity(4 * n);
    for channel in [&traj.x, &traj.y, &traj.xp, &traj.yp] {
        out.extend_from_slice(&channel[..n]);
    }
    Ok(out)
}

/// Splits an observation vector back into its four channels.
pub fn deinterleave(obs: &[f64]) -> Result<[&[f64]; 4]> {
    if obs.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "observation length {} is not a multiple of 4",
            obs.len()
        )));
    }
    let n = obs.len() / 4;
    Ok([&obs[..n], &obs[n..2 * n], &obs[2 * n..3 * n], &obs[3 * n..]])
}
