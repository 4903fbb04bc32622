//! Plant models and the quadruple-tank closed loop.
//!
//! Units are CGS throughout: levels in cm, areas in cm^2, flows in cm^3/s,
//! gravity in cm/s^2, time in seconds.
//!
//! The six-state tank model stacks four water levels and two integral-action
//! states. Tank 1 is fed by valve fraction `gamma1` of pump 1 and by the
//! outflow of tank 3; tank 2 by `gamma2` of pump 2 and the outflow of tank 4;
//! tanks 3 and 4 receive the complementary valve fractions of the opposite
//! pumps. States 5 and 6 integrate the outflow imbalance of tanks 1 and 2
//! relative to their level targets.

use crate::error::Error;
use crate::Result;

/// Continuous-time model dx/dt = f(x, u) with a held input.
///
/// Implementations must be pure: same `(x, u)` in, same derivative out, with
/// no interior mutability, so they can be shared across threads and replayed
/// bit-identically.
pub trait PlantModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Writes f(x, u) into `out` (length `state_dim`).
    fn f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()>;

    /// True when [`PlantModel::directional_derivative`] is implemented.
    fn has_directional_derivative(&self) -> bool {
        false
    }

    /// Writes d/de f(x + e v, u) at e = 0 into `out`.
    fn directional_derivative(
        &self,
        _x: &[f64],
        _u: &[f64],
        _v: &[f64],
        _out: &mut [f64],
    ) -> Result<()> {
        Err(Error::Capability(
            "model has no directional derivative".into(),
        ))
    }
}

/// Ad-hoc model built from a closure; handy for tests and small experiments.
pub struct FnPlant<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    n: usize,
    m: usize,
    func: F,
}

impl<F> FnPlant<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    pub fn new(n: usize, m: usize, func: F) -> Self {
        FnPlant { n, m, func }
    }
}

impl<F> PlantModel for FnPlant<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        (self.func)(x, u, out);
        Ok(())
    }
}

/// What to do when a level goes (numerically) below zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelPolicy {
    /// Clamp the square-root argument at zero and keep integrating; the
    /// engine reports a warning when this happens.
    Clamp,
    /// Fail with a domain error naming the offending coordinate.
    Strict,
}

/// Physical and controller parameters of the quadruple-tank loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuadrupleTankParams {
    /// Tank cross sections A1..A4 [cm^2].
    pub tank_area: [f64; 4],
    /// Outlet sections a1..a4 [cm^2].
    pub outlet_area: [f64; 4],
    /// Valve splits gamma1, gamma2 in [0, 1].
    pub valve_split: [f64; 2],
    /// Gravity [cm/s^2].
    pub gravity: f64,
    /// Integral-action gains k_I1, k_I2 (states 5 and 6).
    pub integrator_gain: [f64; 2],
    /// Energy-shaping weights k1..k4.
    pub shaping_gain: [f64; 4],
    /// Symmetric positive definite 2x2 output weight.
    pub q_weight: [[f64; 2]; 2],
}

impl QuadrupleTankParams {
    /// Default parameter set shipped with the crate: the classic laboratory
    /// tank geometry with moderate loop gains. Validated by the same rules as
    /// any user-supplied set; nothing here is privileged.
    pub fn default_set() -> Self {
        QuadrupleTankParams {
            tank_area: [28.0, 32.0, 28.0, 32.0],
            outlet_area: [0.071, 0.057, 0.071, 0.057],
            valve_split: [0.7, 0.6],
            gravity: 981.0,
            integrator_gain: [0.02, 0.02],
            shaping_gain: [1.0, 1.0, 1.0, 1.0],
            q_weight: [[2.0, 0.0], [0.0, 2.0]],
        }
    }

    /// Checks the parameter-level rules and returns every violation.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, &a) in self.tank_area.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                v.push(format!("tank_area[{}] must be positive, got {a}", i + 1));
            }
        }
        for (i, &a) in self.outlet_area.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                v.push(format!("outlet_area[{}] must be positive, got {a}", i + 1));
            }
        }
        for (i, &g) in self.valve_split.iter().enumerate() {
            if !(g.is_finite() && (0.0..=1.0).contains(&g)) {
                v.push(format!(
                    "valve_split[{}] must lie in [0, 1], got {g}",
                    i + 1
                ));
            }
        }
        let gsum = self.valve_split[0] + self.valve_split[1];
        if (gsum - 1.0).abs() < 1e-9 {
            v.push(format!(
                "valve splits sum to {gsum}; a sum of 1 makes the equilibrium flow split singular"
            ));
        }
        if !(self.gravity.is_finite() && self.gravity > 0.0) {
            v.push(format!("gravity must be positive, got {}", self.gravity));
        }
        for (i, &k) in self.integrator_gain.iter().enumerate() {
            if !(k.is_finite() && k > 0.0) {
                v.push(format!(
                    "integrator_gain[{}] must be positive, got {k}",
                    i + 1
                ));
            }
        }
        for (i, &k) in self.shaping_gain.iter().enumerate() {
            if !(k.is_finite() && k > 0.0) {
                v.push(format!("shaping_gain[{}] must be positive, got {k}", i + 1));
            }
        }
        let q = &self.q_weight;
        let qmax = q.iter().flatten().fold(0.0f64, |m, &e| m.max(e.abs()));
        if !q.iter().flatten().all(|e| e.is_finite()) {
            v.push("q_weight entries must be finite".into());
        } else if (q[0][1] - q[1][0]).abs() > 1e-9 * qmax.max(1.0) {
            v.push(format!(
                "q_weight must be symmetric, got off-diagonals {} and {}",
                q[0][1], q[1][0]
            ));
        } else if !(q[0][0] > 0.0 && q[0][0] * q[1][1] - q[0][1] * q[1][0] > 0.0) {
            v.push("q_weight must be positive definite".into());
        }
        v
    }
}

/// Level targets together with the constant input that holds them.
///
/// Only the first two levels are free choices; the upper-tank levels and the
/// pump flows follow from the steady-flow balance. The last two entries of
/// `x_star` are reference values for the integral states (conventionally 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Setpoint {
    pub x_star: [f64; 6],
    pub u_star: [f64; 2],
}

/// Solves the steady-flow balance for targets `(x1_star, x2_star)`.
///
/// The pump flows come from a 2x2 solve of the valve-split balance for tanks
/// 1 and 2; the upper-tank levels then follow from each upper tank's own
/// outflow balance, which is what makes the full state an equilibrium.
pub fn equilibrium_inputs(
    params: &QuadrupleTankParams,
    x1_star: f64,
    x2_star: f64,
    integrator_ref: [f64; 2],
) -> Result<Setpoint> {
    let mut v = params.violations();
    if !(x1_star.is_finite() && x1_star > 0.0) {
        v.push(format!("target level 1 must be positive, got {x1_star}"));
    }
    if !(x2_star.is_finite() && x2_star > 0.0) {
        v.push(format!("target level 2 must be positive, got {x2_star}"));
    }
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }

    let [g1, g2] = params.valve_split;
    let s2g = (2.0 * params.gravity).sqrt();
    let b1 = params.outlet_area[0] * s2g * x1_star.sqrt();
    let b2 = params.outlet_area[1] * s2g * x2_star.sqrt();
    // [g1, 1-g2; 1-g1, g2] [u1; u2] = [b1; b2], det = g1 + g2 - 1 (checked nonzero above).
    let det = g1 * g2 - (1.0 - g1) * (1.0 - g2);
    let u1 = (g2 * b1 - (1.0 - g2) * b2) / det;
    let u2 = (g1 * b2 - (1.0 - g1) * b1) / det;
    if u1 < 0.0 || u2 < 0.0 {
        return Err(Error::Validation(vec![format!(
            "equilibrium flows must be nonnegative, got ({u1}, {u2}); \
             pick targets compatible with the valve splits"
        )]));
    }

    let x3_star = ((1.0 - g2) * u2 / params.outlet_area[2]).powi(2) / (2.0 * params.gravity);
    let x4_star = ((1.0 - g1) * u1 / params.outlet_area[3]).powi(2) / (2.0 * params.gravity);
    Ok(Setpoint {
        x_star: [
            x1_star,
            x2_star,
            x3_star,
            x4_star,
            integrator_ref[0],
            integrator_ref[1],
        ],
        u_star: [u1, u2],
    })
}

/// Structured feedback gain: a valve-split-patterned 2x6 map `p` scaled by
/// the output weight, `k = q_weight * p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    pub p: [[f64; 6]; 2],
    pub k: [[f64; 6]; 2],
}

impl ControllerGains {
    pub fn from_params(params: &QuadrupleTankParams) -> Self {
        let [g1, g2] = params.valve_split;
        let [k1, k2, k3, k4] = params.shaping_gain;
        // Entries (1,3) and (2,4) are structurally zero: pump 1 never feeds
        // tank 3 and pump 2 never feeds tank 4.
        let p = [
            [
                g1 * k1,
                (1.0 - g1) * k2,
                0.0,
                (1.0 - g1) * k4,
                g1 * k1,
                (1.0 - g1) * k2,
            ],
            [
                (1.0 - g2) * k1,
                g2 * k2,
                (1.0 - g2) * k3,
                0.0,
                (1.0 - g2) * k1,
                g2 * k2,
            ],
        ];
        let q = params.q_weight;
        let mut k = [[0.0; 6]; 2];
        for r in 0..2 {
            for j in 0..6 {
                k[r][j] = q[r][0] * p[0][j] + q[r][1] * p[1][j];
            }
        }
        ControllerGains { p, k }
    }
}

/// Sampled-state feedback: `u = u_star - k (x - x_star)`.
pub fn feedback_law(gains: &ControllerGains, setpoint: &Setpoint, x: &[f64]) -> [f64; 2] {
    let mut u = setpoint.u_star;
    for r in 0..2 {
        let mut acc = 0.0;
        for j in 0..6 {
            acc += gains.k[r][j] * (x[j] - setpoint.x_star[j]);
        }
        u[r] -= acc;
    }
    u
}

/// The assembled six-state model: parameters, setpoint (for the integral
/// states) and the low-level policy.
pub struct QuadrupleTank {
    pub params: QuadrupleTankParams,
    pub setpoint: Setpoint,
    pub policy: LevelPolicy,
    sqrt_x1_star: f64,
    sqrt_x2_star: f64,
}

impl QuadrupleTank {
    pub fn new(params: QuadrupleTankParams, setpoint: Setpoint, policy: LevelPolicy) -> Self {
        let sqrt_x1_star = setpoint.x_star[0].sqrt();
        let sqrt_x2_star = setpoint.x_star[1].sqrt();
        QuadrupleTank {
            params,
            setpoint,
            policy,
            sqrt_x1_star,
            sqrt_x2_star,
        }
    }

    /// True if any level coordinate is below the physical domain.
    pub fn below_domain(&self, x: &[f64]) -> Option<usize> {
        x[..4].iter().position(|&xi| xi < 0.0)
    }

    fn level_sqrt(&self, x: &[f64], i: usize) -> Result<f64> {
        let xi = x[i];
        if xi < 0.0 {
            match self.policy {
                LevelPolicy::Clamp => Ok(0.0),
                LevelPolicy::Strict => Err(Error::Domain(format!(
                    "level x{} = {xi} is negative",
                    i + 1
                ))),
            }
        } else {
            Ok(xi.sqrt())
        }
    }
}

impl PlantModel for QuadrupleTank {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        let [g1, g2] = p.valve_split;
        let s2g = (2.0 * p.gravity).sqrt();
        let mut phi = [0.0; 4];
        for i in 0..4 {
            phi[i] = p.outlet_area[i] * s2g * self.level_sqrt(x, i)?;
        }
        out[0] = (-phi[0] + phi[2] + g1 * u[0]) / p.tank_area[0];
        out[1] = (-phi[1] + phi[3] + g2 * u[1]) / p.tank_area[1];
        out[2] = (-phi[2] + (1.0 - g2) * u[1]) / p.tank_area[2];
        out[3] = (-phi[3] + (1.0 - g1) * u[0]) / p.tank_area[3];
        out[4] = p.integrator_gain[0]
            * p.outlet_area[0]
            * s2g
            * (self.level_sqrt(x, 0)? - self.sqrt_x1_star);
        out[5] = p.integrator_gain[1]
            * p.outlet_area[1]
            * s2g
            * (self.level_sqrt(x, 1)? - self.sqrt_x2_star);
        Ok(())
    }

    fn has_directional_derivative(&self) -> bool {
        true
    }

    fn directional_derivative(
        &self,
        x: &[f64],
        _u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let p = &self.params;
        let s2g = (2.0 * p.gravity).sqrt();
        // d sqrt(x)/dx = 1/(2 sqrt(x)); on the clamped branch the level term
        // is constant, so its derivative is 0.
        let mut dphi = [0.0; 4];
        let mut dsq = [0.0; 4];
        for i in 0..4 {
            if x[i] > 0.0 {
                dsq[i] = v[i] * 0.5 / x[i].sqrt();
            } else if self.policy == LevelPolicy::Strict && x[i] < 0.0 {
                return Err(Error::Domain(format!(
                    "level x{} = {} is negative",
                    i + 1,
                    x[i]
                )));
            }
            dphi[i] = p.outlet_area[i] * s2g * dsq[i];
        }
        out[0] = (-dphi[0] + dphi[2]) / p.tank_area[0];
        out[1] = (-dphi[1] + dphi[3]) / p.tank_area[1];
        out[2] = -dphi[2] / p.tank_area[2];
        out[3] = -dphi[3] / p.tank_area[3];
        out[4] = p.integrator_gain[0] * p.outlet_area[0] * s2g * dsq[0];
        out[5] = p.integrator_gain[1] * p.outlet_area[1] * s2g * dsq[1];
        Ok(())
    }
}

fn pt_apply(p: &[[f64; 6]; 2], v: [f64; 2]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for j in 0..6 {
        out[j] = p[0][j] * v[0] + p[1][j] * v[1];
    }
    out
}

fn p_apply(p: &[[f64; 6]; 2], x: &[f64]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for r in 0..2 {
        for j in 0..6 {
            out[r] += p[r][j] * x[j];
        }
    }
    out
}

/// Energy function of the closed loop.
///
/// Quadratic in the feedback output, 3/2-power in the levels, linear in the
/// integral states; its unique minimum over the operating region sits at the
/// setpoint, and it decreases along ideal (continuously fed back)
/// trajectories, which is what makes it a convergence certificate.
pub fn lyapunov_hd(
    params: &QuadrupleTankParams,
    gains: &ControllerGains,
    setpoint: &Setpoint,
    x: &[f64],
) -> f64 {
    let s2g = (2.0 * params.gravity).sqrt();
    let mut z = [0.0; 6];
    for j in 0..6 {
        z[j] = x[j] - setpoint.x_star[j];
    }
    let pz = p_apply(&gains.p, &z);
    let q = params.q_weight;
    let quad = 0.5
        * (pz[0] * (q[0][0] * pz[0] + q[0][1] * pz[1])
            + pz[1] * (q[1][0] * pz[0] + q[1][1] * pz[1]));
    let px = p_apply(&gains.p, x);
    let lin = -(setpoint.u_star[0] * px[0] + setpoint.u_star[1] * px[1]);
    let mut pow = 0.0;
    for i in 0..4 {
        let xi = x[i].max(0.0);
        pow += (2.0 / 3.0) * params.shaping_gain[i] * params.outlet_area[i] * xi.powf(1.5) * s2g;
    }
    let integ = params.shaping_gain[0]
        * params.outlet_area[0]
        * x[4]
        * s2g
        * setpoint.x_star[0].sqrt()
        + params.shaping_gain[1] * params.outlet_area[1] * x[5] * s2g * setpoint.x_star[1].sqrt();
    quad + lin + pow + integ
}

/// Analytic gradient of [`lyapunov_hd`]; levels below zero use the clamped
/// branch (zero slope from the 3/2-power term).
pub fn lyapunov_hd_gradient(
    params: &QuadrupleTankParams,
    gains: &ControllerGains,
    setpoint: &Setpoint,
    x: &[f64],
) -> [f64; 6] {
    let s2g = (2.0 * params.gravity).sqrt();
    let mut z = [0.0; 6];
    for j in 0..6 {
        z[j] = x[j] - setpoint.x_star[j];
    }
    let pz = p_apply(&gains.p, &z);
    let q = params.q_weight;
    let qpz = [
        q[0][0] * pz[0] + q[0][1] * pz[1],
        q[1][0] * pz[0] + q[1][1] * pz[1],
    ];
    let mut grad = pt_apply(&gains.p, qpz);
    let ptu = pt_apply(&gains.p, setpoint.u_star);
    for j in 0..6 {
        grad[j] -= ptu[j];
    }
    for i in 0..4 {
        let xi = x[i].max(0.0);
        grad[i] += params.shaping_gain[i] * params.outlet_area[i] * s2g * xi.sqrt();
    }
    grad[4] += params.shaping_gain[0] * params.outlet_area[0] * s2g * setpoint.x_star[0].sqrt();
    grad[5] += params.shaping_gain[1] * params.outlet_area[1] * s2g * setpoint.x_star[1].sqrt();
    grad
}

/// Smallest observed ratio |grad H_d(x)| / |x - x_star| over deterministic
/// pseudo-random samples of the box `[lo, hi]`. A positive result over the
/// operating region is the margin a minimum-rate certificate needs.
pub fn min_gradient_ratio(
    params: &QuadrupleTankParams,
    gains: &ControllerGains,
    setpoint: &Setpoint,
    lo: &[f64; 6],
    hi: &[f64; 6],
    samples: usize,
    seed: u64,
) -> f64 {
    // Minimal SplitMix64 stream; keeps the crate free of an RNG dependency.
    let mut state = seed;
    let mut next = move || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let mut x = [0.0; 6];
        let mut dist2 = 0.0;
        for j in 0..6 {
            let u = (next() >> 11) as f64 / (1u64 << 53) as f64;
            x[j] = lo[j] + u * (hi[j] - lo[j]);
            dist2 += (x[j] - setpoint.x_star[j]).powi(2);
        }
        if dist2 == 0.0 {
            continue;
        }
        let g = lyapunov_hd_gradient(params, gains, setpoint, &x);
        let gnorm = g.iter().map(|e| e * e).sum::<f64>().sqrt();
        worst = worst.min(gnorm / dist2.sqrt());
    }
    worst
}

/// The ideal loop with the feedback applied continuously instead of held:
/// dx/dt = f(x, u_star - k (x - x_star)). Zero-input model.
pub struct ContinuousClosedLoop<'a> {
    pub plant: &'a QuadrupleTank,
    pub gains: &'a ControllerGains,
}

impl PlantModel for ContinuousClosedLoop<'_> {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn f(&self, x: &[f64], _u: &[f64], out: &mut [f64]) -> Result<()> {
        let u = feedback_law(self.gains, &self.plant.setpoint, x);
        self.plant.f(x, &u, out)
    }
}
