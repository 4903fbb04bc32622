//! Closed-loop simulation driver.
//!
//! One run alternates between controller updates and guarded integration
//! segments. At an update the state is sampled, the feedback input is
//! recomputed and held, the measurement error resets to zero, and (in the
//! adaptive mode) the per-node offsets are re-solved. The plant then runs
//! until some trigger gap crosses zero; crossings inside the minimum-spacing
//! blackout are noted but the update is deferred to exactly the spacing
//! floor. A periodic baseline shares the same logging so modes can be
//! compared row for row.
//!
//! Determinism: a run is a fixed sequence of float operations with no
//! randomness and no time-dependent branching, so identical scenarios
//! produce bit-identical results.

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::adaptation::{adapt_theta, AdaptationConfig};
use crate::error::Error;
use crate::ode::{EventLocation, Guard, StepObserver, Stepper};
use crate::plant::{
    feedback_law, lyapunov_hd, ControllerGains, LevelPolicy, QuadrupleTank, QuadrupleTankParams,
    Setpoint,
};
use crate::trigger::{centralized_gap, local_gap_of, ThetaVector, TriggerConfig};
use crate::Result;

/// A fully validated simulation scenario. Produced by the config module;
/// the fields are plain values so tests can tweak them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: QuadrupleTankParams,
    pub level_policy: LevelPolicy,
    pub setpoint: Setpoint,
    pub gains: ControllerGains,
    pub trigger: TriggerConfig,
    pub adaptation: AdaptationConfig,
    pub x0: [f64; 6],
    /// Run length [s].
    pub horizon: f64,
    /// Integrator step [s].
    pub h: f64,
    /// Event localization tolerance [s].
    pub tol_t: f64,
    /// Trajectory rows are kept every this many integrator steps.
    pub sample_stride: usize,
    /// Loop delay between sampling and the new input taking effect [s].
    pub actuation_delay: f64,
    /// Factor applied to sigma while a delay is configured.
    pub delay_sigma_factor: f64,
    /// Harness-level seed (sweeps, samplers); the run itself never draws.
    pub seed: u64,
    /// Free-form provenance block copied into summaries.
    pub metadata: Option<Value>,
}

/// What to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeSpec {
    /// One trigger condition over the full state.
    Centralized,
    /// Per-node conditions with zero offsets.
    DecentralizedTheta0,
    /// Per-node conditions with offsets re-solved at every update.
    DecentralizedAdaptive,
    /// Fixed-period sample and hold; no trigger at all.
    Periodic { period: f64 },
}

impl ModeSpec {
    pub const NAMES: [&'static str; 4] = [
        "centralized",
        "decentralized-theta0",
        "decentralized-adaptive",
        "periodic",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModeSpec::Centralized => "centralized",
            ModeSpec::DecentralizedTheta0 => "decentralized-theta0",
            ModeSpec::DecentralizedAdaptive => "decentralized-adaptive",
            ModeSpec::Periodic { .. } => "periodic",
        }
    }

    pub fn is_valid_name(name: &str) -> bool {
        Self::NAMES.contains(&name)
    }

    /// Parses a mode name; `period` is required for (and only used by) the
    /// periodic mode.
    pub fn parse(name: &str, period: Option<f64>) -> Result<ModeSpec> {
        match name {
            "centralized" => Ok(ModeSpec::Centralized),
            "decentralized-theta0" => Ok(ModeSpec::DecentralizedTheta0),
            "decentralized-adaptive" => Ok(ModeSpec::DecentralizedAdaptive),
            "periodic" => period
                .map(|p| ModeSpec::Periodic { period: p })
                .ok_or_else(|| Error::Precondition("periodic mode requires a period".into())),
            other => Err(Error::Precondition(format!(
                "unknown mode \"{other}\"; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Decimated trajectory samples; states and inputs are stored flat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleLog {
    pub times: Vec<f64>,
    states: Vec<f64>,
    inputs: Vec<f64>,
    pub hd: Vec<f64>,
}

impl SampleLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * 6..(i + 1) * 6]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * 2..(i + 1) * 2]
    }

    fn push(&mut self, t: f64, x: &[f64], u: &[f64], hd: f64) {
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.inputs.extend_from_slice(u);
        self.hd.push(hd);
    }
}

/// Per-update log, stored column-wise so multi-million-update runs stay
/// compact. Row `k` describes update `k`: its absolute time, the spacing to
/// the previous update, the gap value and growth rate of the firing guard at
/// the crossing that caused it, the energy at the sampled state, the nodes
/// that fired (empty for the initial update and for periodic rows) and the
/// offsets active until the next update.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub times: Vec<f64>,
    pub dts: Vec<f64>,
    pub gaps: Vec<f64>,
    pub rates: Vec<f64>,
    pub hd: Vec<f64>,
    fired_offsets: Vec<u32>,
    fired_nodes: Vec<u32>,
    /// Offset columns per row; zero for the periodic baseline.
    pub theta_nodes: usize,
    theta: Vec<f64>,
}

impl EventLog {
    fn new(theta_nodes: usize) -> Self {
        EventLog {
            times: Vec::new(),
            dts: Vec::new(),
            gaps: Vec::new(),
            rates: Vec::new(),
            hd: Vec::new(),
            fired_offsets: vec![0],
            fired_nodes: Vec::new(),
            theta_nodes,
            theta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// 0-based ids of the nodes that fired the crossing behind update `k`.
    pub fn fired(&self, k: usize) -> &[u32] {
        let lo = self.fired_offsets[k] as usize;
        let hi = self.fired_offsets[k + 1] as usize;
        &self.fired_nodes[lo..hi]
    }

    /// Offsets active from update `k` on; empty when `theta_nodes` is zero.
    pub fn theta_row(&self, k: usize) -> &[f64] {
        &self.theta[k * self.theta_nodes..(k + 1) * self.theta_nodes]
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        t: f64,
        dt: f64,
        gap: f64,
        rate: f64,
        hd: f64,
        fired: &[u32],
        theta: Option<&[f64]>,
    ) {
        self.times.push(t);
        self.dts.push(dt);
        self.gaps.push(gap);
        self.rates.push(rate);
        self.hd.push(hd);
        self.fired_nodes.extend_from_slice(fired);
        self.fired_offsets.push(self.fired_nodes.len() as u32);
        if let Some(row) = theta {
            debug_assert_eq!(row.len(), self.theta_nodes);
            self.theta.extend_from_slice(row);
        }
    }
}

/// Headline numbers for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: String,
    pub update_count: u64,
    /// Interval statistics over the spacings between consecutive updates;
    /// `None` with fewer than two updates.
    pub min_interval: Option<f64>,
    pub mean_interval: Option<f64>,
    pub max_interval: Option<f64>,
    pub final_state: [f64; 6],
    /// Euclidean distance of the final state from the setpoint.
    pub final_distance: f64,
    pub hd_first: f64,
    pub hd_last: f64,
    /// Largest relative energy increase between consecutive updates; zero or
    /// negative means the energy never rose at an update instant.
    pub hd_max_relative_increase: f64,
    pub sigma_effective: f64,
}

/// Scenario facts echoed into every summary document.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub sigma: f64,
    pub sigma_effective: f64,
    pub tau_min: f64,
    pub horizon: f64,
    pub actuation_delay: f64,
    pub delay_sigma_factor: f64,
    pub seed: u64,
    pub metadata: Option<Value>,
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub samples: SampleLog,
    pub events: EventLog,
    pub summary: Summary,
    pub warnings: Vec<String>,
    /// Sampled state at every update, flat 6 per row; only recorded when
    /// requested through [`RunOptions`].
    pub update_states: Option<Vec<f64>>,
    pub meta: RunMeta,
}

impl SimResult {
    pub fn update_state(&self, k: usize) -> Option<&[f64]> {
        self.update_states.as_ref().map(|s| &s[k * 6..(k + 1) * 6])
    }

    /// JSON form of the summary, used verbatim for `summary.json`.
    pub fn summary_document(&self) -> Value {
        let s = &self.summary;
        json!({
            "mode": s.mode,
            "update_count": s.update_count,
            "intervals": {
                "min": s.min_interval,
                "mean": s.mean_interval,
                "max": s.max_interval,
            },
            "final_state": s.final_state.to_vec(),
            "final_distance": s.final_distance,
            "hd": {
                "first": s.hd_first,
                "last": s.hd_last,
                "max_relative_increase_at_updates": s.hd_max_relative_increase,
            },
            "sigma": self.meta.sigma,
            "sigma_effective": self.meta.sigma_effective,
            "tau_min_s": self.meta.tau_min,
            "horizon_s": self.meta.horizon,
            "actuation_delay_s": self.meta.actuation_delay,
            "delay_sigma_factor": self.meta.delay_sigma_factor,
            "seed": self.meta.seed,
            "metadata": self.meta.metadata,
            "warnings": self.warnings,
        })
    }
}

/// Extra run switches that are not part of the scenario.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the sampled state at every update (memory scales with updates).
    pub record_update_states: bool,
}

/// Trigger configuration a run actually uses: a configured actuation delay
/// tightens sigma by the configured factor, everything else is unchanged.
pub fn apply_actuation_delay(scn: &Scenario) -> TriggerConfig {
    let mut trig = scn.trigger.clone();
    if scn.actuation_delay > 0.0 {
        trig.sigma *= scn.delay_sigma_factor;
    }
    trig
}

pub fn run(scn: &Scenario, mode: ModeSpec) -> Result<SimResult> {
    run_with_options(scn, mode, RunOptions::default())
}

pub fn run_with_options(scn: &Scenario, mode: ModeSpec, opts: RunOptions) -> Result<SimResult> {
    match mode {
        ModeSpec::Periodic { period } => periodic_impl(scn, period, opts),
        _ => event_triggered_impl(scn, mode, opts),
    }
}

/// Runs one of the three event-triggered modes.
pub fn run_event_triggered(scn: &Scenario, mode: ModeSpec) -> Result<SimResult> {
    if matches!(mode, ModeSpec::Periodic { .. }) {
        return Err(Error::Precondition(
            "run_event_triggered does not accept the periodic mode".into(),
        ));
    }
    run(scn, mode)
}

/// Runs the fixed-period baseline.
pub fn run_periodic(scn: &Scenario, period: f64) -> Result<SimResult> {
    run(scn, ModeSpec::Periodic { period })
}

/// One per-node trigger condition between two updates: the error energy of
/// the node's states against the held sample, minus the sigma-scaled
/// centered state energy, minus the node's offset.
struct LocalGuard<'a> {
    sigma: f64,
    center: &'a [f64],
    group: &'a [usize],
    theta: f64,
    held: &'a [f64],
}

impl Guard for LocalGuard<'_> {
    fn evaluate(&self, _s: f64, x: &[f64]) -> f64 {
        let mut e2 = 0.0;
        let mut d2 = 0.0;
        for &j in self.group {
            let e = self.held[j] - x[j];
            e2 += e * e;
            let d = x[j] - self.center[j];
            d2 += d * d;
        }
        e2 - self.sigma * d2 - self.theta
    }
}

/// Stride-decimating trajectory recorder, fed by the integrator.
struct Sampler<'a> {
    log: SampleLog,
    stride: usize,
    counter: usize,
    base_t: f64,
    u: [f64; 2],
    params: &'a QuadrupleTankParams,
    gains: &'a ControllerGains,
    setpoint: &'a Setpoint,
}

impl<'a> Sampler<'a> {
    fn new(scn: &'a Scenario) -> Self {
        Sampler {
            log: SampleLog::default(),
            stride: scn.sample_stride.max(1),
            counter: 0,
            base_t: 0.0,
            u: [0.0; 2],
            params: &scn.params,
            gains: &scn.gains,
            setpoint: &scn.setpoint,
        }
    }

    fn record(&mut self, t: f64, x: &[f64]) {
        let hd = lyapunov_hd(self.params, self.gains, self.setpoint, x);
        self.log.push(t, x, &self.u, hd);
    }

    /// Guarantees a closing row at the horizon.
    fn finish(&mut self, horizon: f64, x: &[f64]) {
        if self.log.times.last() != Some(&horizon) {
            self.record(horizon, x);
        }
    }
}

impl StepObserver for Sampler<'_> {
    fn on_step(&mut self, s: f64, x: &[f64]) {
        self.counter += 1;
        if self.counter % self.stride == 0 {
            let t = self.base_t + s;
            self.record(t, x);
        }
    }
}

fn divergence(e: Error, t_last: f64) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { t_last, detail },
        other => other,
    }
}

fn event_triggered_impl(scn: &Scenario, mode: ModeSpec, opts: RunOptions) -> Result<SimResult> {
    let plant = QuadrupleTank::new(scn.params.clone(), scn.setpoint.clone(), scn.level_policy);
    let base = apply_actuation_delay(scn);
    let sigma_effective = base.sigma;
    let trig = match mode {
        ModeSpec::Centralized => TriggerConfig {
            grouping: vec![(0..6).collect()],
            ..base
        },
        _ => base,
    };
    let nodes = trig.node_count();
    let adapt_on = matches!(mode, ModeSpec::DecentralizedAdaptive) && scn.adaptation.enabled;
    let mut warnings: Vec<String> = Vec::new();
    if matches!(mode, ModeSpec::DecentralizedAdaptive) && !scn.adaptation.enabled {
        warnings.push("adaptation disabled in config; adaptive mode runs with zero offsets".into());
    }

    let mut stepper = Stepper::new(6, scn.h)?;
    let mut x: Vec<f64> = scn.x0.to_vec();
    let mut held = vec![0.0; 6];
    let mut sampler = Sampler::new(scn);
    let mut events = EventLog::new(nodes);
    let mut update_states: Option<Vec<f64>> = opts.record_update_states.then(Vec::new);

    let delay = scn.actuation_delay;
    let horizon = scn.horizon;
    let zero6 = [0.0; 6];

    let mut t_k = 0.0_f64;
    let mut k: u64 = 0;
    let mut u_prev = [0.0_f64; 2];
    let mut prev_interval: Option<f64> = None;
    let mut theta: ThetaVector;
    let mut pending_gap = 0.0_f64;
    let mut pending_rate = 0.0_f64;
    let mut pending_fired: Vec<u32> = Vec::new();
    let mut warned_clamp = false;

    loop {
        // Update instant: sample, refresh the input, re-solve offsets.
        held.copy_from_slice(&x);
        if !warned_clamp && scn.level_policy == LevelPolicy::Clamp {
            if let Some(i) = plant.below_domain(&held) {
                warnings.push(format!(
                    "level x{} dipped below 0 near t = {t_k}; outflow clamped",
                    i + 1
                ));
                warned_clamp = true;
            }
        }
        let u_new = feedback_law(&scn.gains, &scn.setpoint, &held);
        if k == 0 {
            // Cold start: there is no earlier input to hold through a delay.
            u_prev = u_new;
        }
        theta = if adapt_on {
            adapt_theta(
                &plant,
                &trig,
                &scn.adaptation,
                &held,
                &u_new,
                prev_interval,
                k,
            )?
        } else {
            ThetaVector::zeros(nodes, k)
        };
        let hd_k = lyapunov_hd(&scn.params, &scn.gains, &scn.setpoint, &held);
        let dt_row = if k == 0 {
            0.0
        } else {
            prev_interval.unwrap_or(0.0)
        };
        events.push(
            t_k,
            dt_row,
            pending_gap,
            pending_rate,
            hd_k,
            &pending_fired,
            Some(&theta.values),
        );
        if let Some(us) = update_states.as_mut() {
            us.extend_from_slice(&held);
        }
        if k == 0 {
            sampler.u = u_new;
            sampler.record(0.0, &held);
        }

        // Gap values at the update itself (error is exactly zero). A guard
        // already at or past zero would make the crossing search ill-posed,
        // so: strictly positive fires now, exactly zero is disarmed for this
        // interval (it cannot cross from below), strictly negative is armed.
        let remaining = horizon - t_k;
        let mut armed_nodes: Vec<usize> = Vec::with_capacity(nodes);
        let mut immediate_fired: Vec<u32> = Vec::new();
        let mut immediate_gap = f64::NEG_INFINITY;
        for (i, group) in trig.grouping.iter().enumerate() {
            let g0 = local_gap_of(&trig, group, &held, &zero6) - theta.values[i];
            if g0 > 0.0 {
                immediate_fired.push(i as u32);
                immediate_gap = immediate_gap.max(g0);
            } else if g0 < 0.0 {
                armed_nodes.push(i);
            }
        }
        let mut found: Option<(f64, Vec<u32>, f64, f64)> = None;
        if !immediate_fired.is_empty() {
            found = Some((0.0, immediate_fired, immediate_gap, 0.0));
        }

        let guard_objs: Vec<LocalGuard> = armed_nodes
            .iter()
            .map(|&i| LocalGuard {
                sigma: trig.sigma,
                center: &trig.center,
                group: &trig.grouping[i],
                theta: theta.values[i],
                held: &held,
            })
            .collect();
        let guard_refs: Vec<&dyn Guard> = guard_objs.iter().map(|g| g as &dyn Guard).collect();
        let locate = |ev: &EventLocation, armed: &[usize]| {
            let mut gap = f64::NEG_INFINITY;
            let mut rate = 0.0;
            let mut fired = Vec::with_capacity(ev.fired.len());
            for &fi in &ev.fired {
                fired.push(armed[fi] as u32);
                if ev.gaps[fi] > gap {
                    gap = ev.gaps[fi];
                    rate = ev.gap_rate(fi).unwrap_or(0.0);
                }
            }
            (ev.s, fired, gap, rate)
        };

        let mut s_now = 0.0_f64;
        sampler.base_t = t_k;

        // Phase A: a configured delay keeps the previous input active right
        // after the sample. The delay sits inside the blackout window, but
        // guards stay armed so the first crossing time is still exact.
        let a_end = if delay > 0.0 && k > 0 {
            delay.min(remaining)
        } else {
            0.0
        };
        if a_end > 0.0 {
            sampler.u = u_prev;
            if found.is_none() && !guard_refs.is_empty() {
                match stepper.advance_until_event(
                    &plant,
                    &u_prev,
                    &guard_refs,
                    &mut x,
                    0.0,
                    a_end,
                    scn.tol_t,
                    &mut sampler,
                ) {
                    Ok(Some(ev)) => {
                        s_now = ev.s;
                        found = Some(locate(&ev, &armed_nodes));
                    }
                    Ok(None) => s_now = a_end,
                    Err(e) => return Err(divergence(e, t_k)),
                }
            }
            if s_now < a_end {
                stepper
                    .advance(&plant, &u_prev, &mut x, s_now, a_end, &mut sampler)
                    .map_err(|e| divergence(e, t_k))?;
                s_now = a_end;
            }
        }

        // Phase B: the refreshed input.
        sampler.u = u_new;
        if found.is_none() && !guard_refs.is_empty() && s_now < remaining {
            match stepper.advance_until_event(
                &plant,
                &u_new,
                &guard_refs,
                &mut x,
                s_now,
                remaining,
                scn.tol_t,
                &mut sampler,
            ) {
                Ok(Some(ev)) => {
                    s_now = ev.s;
                    found = Some(locate(&ev, &armed_nodes));
                }
                Ok(None) => s_now = remaining,
                Err(e) => return Err(divergence(e, t_k)),
            }
        }

        let (s_evt, fired, gap, rate) = match found {
            None => {
                // Nothing can fire before the horizon; run out and finish.
                if s_now < remaining {
                    stepper
                        .advance(&plant, &u_new, &mut x, s_now, remaining, &mut sampler)
                        .map_err(|e| divergence(e, t_k))?;
                }
                break;
            }
            Some(f) => f,
        };

        // Scheduling rule t_{k+1} = t_k + max(tau_min, s_event), applied in
        // relative form so the logged spacing is exactly the floored value.
        let s_next = trig.tau_min.max(s_evt);
        let t_next = t_k + s_next;
        if t_next >= horizon {
            if s_now < remaining {
                stepper
                    .advance(&plant, &u_new, &mut x, s_now, remaining, &mut sampler)
                    .map_err(|e| divergence(e, t_k))?;
            }
            break;
        }
        if s_now < s_next {
            // Blackout tail: the crossing was early, integrate guard-free up
            // to the deferred update.
            stepper
                .advance(&plant, &u_new, &mut x, s_now, s_next, &mut sampler)
                .map_err(|e| divergence(e, t_k))?;
        }

        u_prev = u_new;
        prev_interval = Some(s_next);
        pending_gap = gap;
        pending_rate = rate;
        pending_fired = fired;
        t_k = t_next;
        k += 1;
    }

    sampler.finish(horizon, &x);
    Ok(assemble(
        scn,
        mode.name(),
        sigma_effective,
        sampler.log,
        events,
        warnings,
        update_states,
    ))
}

fn periodic_impl(scn: &Scenario, period: f64, opts: RunOptions) -> Result<SimResult> {
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::Precondition(format!(
            "period must be positive, got {period}"
        )));
    }
    if period < scn.trigger.tau_min {
        return Err(Error::Precondition(format!(
            "period {period} is below the minimum update spacing {}",
            scn.trigger.tau_min
        )));
    }
    let plant = QuadrupleTank::new(scn.params.clone(), scn.setpoint.clone(), scn.level_policy);
    let trig = apply_actuation_delay(scn);
    let sigma_effective = trig.sigma;
    let mut warnings: Vec<String> = Vec::new();

    let mut stepper = Stepper::new(6, scn.h)?;
    let mut x: Vec<f64> = scn.x0.to_vec();
    let mut held = vec![0.0; 6];
    let mut e_buf = [0.0; 6];
    let mut sampler = Sampler::new(scn);
    let mut events = EventLog::new(0);
    let est_rows = (scn.horizon / period).ceil().min(1e9) as usize;
    events.times.reserve(est_rows);
    events.dts.reserve(est_rows);
    events.gaps.reserve(est_rows);
    events.rates.reserve(est_rows);
    events.hd.reserve(est_rows);
    let mut update_states: Option<Vec<f64>> = opts.record_update_states.then(Vec::new);

    let delay = scn.actuation_delay;
    let horizon = scn.horizon;
    let mut u_prev = [0.0_f64; 2];
    let mut u_new;
    let mut k: u64 = 0;
    let mut warned_clamp = false;

    loop {
        // Update times are multiples of the period, computed by product so
        // rounding never accumulates across millions of updates.
        let t_k = k as f64 * period;
        if t_k >= horizon {
            break;
        }
        // Diagnostic: the full-state gap the trigger modes would see just
        // before this refresh.
        let gap = if k == 0 {
            0.0
        } else {
            for j in 0..6 {
                e_buf[j] = held[j] - x[j];
            }
            centralized_gap(&trig, &x, &e_buf)
        };
        held.copy_from_slice(&x);
        if !warned_clamp && scn.level_policy == LevelPolicy::Clamp {
            if let Some(i) = plant.below_domain(&held) {
                warnings.push(format!(
                    "level x{} dipped below 0 near t = {t_k}; outflow clamped",
                    i + 1
                ));
                warned_clamp = true;
            }
        }
        u_new = feedback_law(&scn.gains, &scn.setpoint, &held);
        if k == 0 {
            u_prev = u_new;
        }
        let hd_k = lyapunov_hd(&scn.params, &scn.gains, &scn.setpoint, &held);
        let dt_row = if k == 0 { 0.0 } else { period };
        events.push(t_k, dt_row, gap, 0.0, hd_k, &[], None);
        if let Some(us) = update_states.as_mut() {
            us.extend_from_slice(&held);
        }
        if k == 0 {
            sampler.u = u_new;
            sampler.record(0.0, &held);
        }

        let seg_end = ((k + 1) as f64 * period).min(horizon);
        let seg = seg_end - t_k;
        sampler.base_t = t_k;
        let mut s_now = 0.0_f64;
        let a_end = if delay > 0.0 && k > 0 {
            delay.min(seg)
        } else {
            0.0
        };
        if a_end > 0.0 {
            sampler.u = u_prev;
            stepper
                .advance(&plant, &u_prev, &mut x, 0.0, a_end, &mut sampler)
                .map_err(|e| divergence(e, t_k))?;
            s_now = a_end;
        }
        sampler.u = u_new;
        if s_now < seg {
            stepper
                .advance(&plant, &u_new, &mut x, s_now, seg, &mut sampler)
                .map_err(|e| divergence(e, t_k))?;
        }
        u_prev = u_new;
        k += 1;
    }

    sampler.finish(horizon, &x);
    Ok(assemble(
        scn,
        "periodic",
        sigma_effective,
        sampler.log,
        events,
        warnings,
        update_states,
    ))
}

fn assemble(
    scn: &Scenario,
    mode: &str,
    sigma_effective: f64,
    samples: SampleLog,
    events: EventLog,
    warnings: Vec<String>,
    update_states: Option<Vec<f64>>,
) -> SimResult {
    let mut min_i = f64::INFINITY;
    let mut max_i = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0u64;
    for &dt in events.dts.iter().skip(1) {
        min_i = min_i.min(dt);
        max_i = max_i.max(dt);
        sum += dt;
        n += 1;
    }
    let mut hd_rise = 0.0_f64;
    for w in events.hd.windows(2) {
        let rel = (w[1] - w[0]) / w[0].abs().max(1e-12);
        hd_rise = hd_rise.max(rel);
    }
    let last = samples.len() - 1;
    let mut final_state = [0.0; 6];
    final_state.copy_from_slice(samples.state(last));
    let final_distance = final_state
        .iter()
        .zip(&scn.setpoint.x_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let summary = Summary {
        mode: mode.to_string(),
        update_count: events.len() as u64,
        min_interval: (n > 0).then_some(min_i),
        mean_interval: (n > 0).then_some(sum / n as f64),
        max_interval: (n > 0).then_some(max_i),
        final_state,
        final_distance,
        hd_first: *events.hd.first().unwrap_or(&samples.hd[0]),
        hd_last: *samples.hd.last().unwrap(),
        hd_max_relative_increase: hd_rise,
        sigma_effective,
    };
    SimResult {
        samples,
        events,
        summary,
        warnings,
        update_states,
        meta: RunMeta {
            sigma: scn.trigger.sigma,
            sigma_effective,
            tau_min: scn.trigger.tau_min,
            horizon: scn.horizon,
            actuation_delay: scn.actuation_delay,
            delay_sigma_factor: scn.delay_sigma_factor,
            seed: scn.seed,
            metadata: scn.metadata.clone(),
        },
    }
}

/// One compared mode: its spec and either a full result or the error text.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub mode: String,
    pub period: Option<f64>,
    pub result: std::result::Result<SimResult, String>,
}

/// Deviation of the controlled levels between two runs on the common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDeviation {
    pub first: String,
    pub second: String,
    /// max over the grid of max(|x1_a - x1_b|, |x2_a - x2_b|) [cm].
    pub max_xy_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub outcomes: Vec<ModeOutcome>,
    pub pairs: Vec<PairDeviation>,
    pub max_pairwise_deviation: Option<f64>,
    pub any_failed: bool,
}

impl ComparisonReport {
    pub fn document(&self) -> Value {
        let min_count = self
            .outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok())
            .map(|r| r.summary.update_count)
            .min();
        let modes: Vec<Value> = self
            .outcomes
            .iter()
            .map(|o| match &o.result {
                Ok(r) => {
                    let ratio = min_count
                        .filter(|m| *m > 0)
                        .map(|m| r.summary.update_count as f64 / m as f64);
                    json!({
                        "mode": o.mode,
                        "period": o.period,
                        "update_count": r.summary.update_count,
                        "count_ratio_to_min": ratio,
                        "summary": r.summary_document(),
                    })
                }
                Err(msg) => json!({
                    "mode": o.mode,
                    "period": o.period,
                    "error": msg,
                }),
            })
            .collect();
        let pairs: Vec<Value> = self
            .pairs
            .iter()
            .map(|p| {
                json!({
                    "first": p.first,
                    "second": p.second,
                    "max_xy_deviation": p.max_xy_deviation,
                })
            })
            .collect();
        json!({
            "modes": modes,
            "pairwise_deviation": pairs,
            "max_pairwise_deviation": self.max_pairwise_deviation,
            "any_failed": self.any_failed,
        })
    }
}

const COMPARE_GRID: usize = 2001;

/// Linear interpolation of the two controlled levels onto a uniform grid.
fn resample_levels(samples: &SampleLog, horizon: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let times = &samples.times;
    let last = samples.len() - 1;
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut p = 0usize;
    for i in 0..n {
        let t = horizon * i as f64 / (n - 1) as f64;
        while p < last && times[p + 1] <= t {
            p += 1;
        }
        if p >= last {
            let s = samples.state(last);
            x1.push(s[0]);
            x2.push(s[1]);
            continue;
        }
        let (t0, t1) = (times[p], times[p + 1]);
        let w = if t1 > t0 {
            ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = samples.state(p);
        let b = samples.state(p + 1);
        x1.push(a[0] + w * (b[0] - a[0]));
        x2.push(a[1] + w * (b[1] - a[1]));
    }
    (x1, x2)
}

/// Runs every requested mode on the same scenario and compares them.
///
/// Per-mode failures do not abort the comparison; they are recorded in the
/// outcome and flagged. Deviations are computed between every pair of
/// successful runs.
pub fn compare_modes(scn: &Scenario, modes: &[ModeSpec]) -> Result<ComparisonReport> {
    if modes.len() < 2 {
        return Err(Error::Precondition(format!(
            "comparison needs at least two modes, got {}",
            modes.len()
        )));
    }
    let outcomes: Vec<ModeOutcome> = modes
        .par_iter()
        .map(|m| ModeOutcome {
            mode: m.name().to_string(),
            period: match m {
                ModeSpec::Periodic { period } => Some(*period),
                _ => None,
            },
            result: run(scn, *m).map_err(|e| e.to_string()),
        })
        .collect();

    let resampled: Vec<Option<(Vec<f64>, Vec<f64>)>> = outcomes
        .iter()
        .map(|o| {
            o.result
                .as_ref()
                .ok()
                .map(|r| resample_levels(&r.samples, scn.horizon, COMPARE_GRID))
        })
        .collect();
    let mut pairs = Vec::new();
    let mut overall: Option<f64> = None;
    for a in 0..outcomes.len() {
        for b in a + 1..outcomes.len() {
            let (Some((a1, a2)), Some((b1, b2))) = (&resampled[a], &resampled[b]) else {
                continue;
            };
            let mut dev = 0.0_f64;
            for i in 0..COMPARE_GRID {
                dev = dev.max((a1[i] - b1[i]).abs());
                dev = dev.max((a2[i] - b2[i]).abs());
            }
            pairs.push(PairDeviation {
                first: outcomes[a].mode.clone(),
                second: outcomes[b].mode.clone(),
                max_xy_deviation: dev,
            });
            overall = Some(overall.map_or(dev, |o: f64| o.max(dev)));
        }
    }
    let any_failed = outcomes.iter().any(|o| o.result.is_err());
    Ok(ComparisonReport {
        outcomes,
        pairs,
        max_pairwise_deviation: overall,
        any_failed,
    })
}
