//! Fixed-step RK4 integration with guard-function event localization.
//!
//! Everything here is deterministic: a fixed step sequence, endpoint sign
//! checks and plain bisection, so identical inputs reproduce identical
//! trajectories bit for bit. Guard crossings are detected by comparing signs
//! at step endpoints; a guard that dips above zero and returns within a
//! single step is invisible, which is the documented resolution limit of the
//! scheme.

use crate::error::Error;
use crate::plant::PlantModel;
use crate::Result;

/// Scalar watch function of the running segment.
///
/// `s` is the time since the segment's reference instant (for trigger guards,
/// the last controller update). An event is the first time the value reaches
/// zero from below.
pub trait Guard {
    fn evaluate(&self, s: f64, x: &[f64]) -> f64;
}

impl<F> Guard for F
where
    F: Fn(f64, &[f64]) -> f64,
{
    fn evaluate(&self, s: f64, x: &[f64]) -> f64 {
        self(s, x)
    }
}

/// Receives every accepted step of a segment. Steps cut short by an event are
/// not reported; the event location is returned instead.
pub trait StepObserver {
    fn on_step(&mut self, s: f64, x: &[f64]);
}

impl StepObserver for () {
    fn on_step(&mut self, _s: f64, _x: &[f64]) {}
}

impl<F> StepObserver for F
where
    F: FnMut(f64, &[f64]),
{
    fn on_step(&mut self, s: f64, x: &[f64]) {
        self(s, x)
    }
}

/// A localized guard crossing.
#[derive(Debug, Clone)]
pub struct EventLocation {
    /// First time (within `tol_t`) at which a guard is nonnegative.
    pub s: f64,
    /// State at `s`.
    pub x: Vec<f64>,
    /// Indices of every guard nonnegative at `s`.
    pub fired: Vec<usize>,
    /// All guard values at `s`.
    pub gaps: Vec<f64>,
    /// Left end of the final bisection bracket (all guards negative there).
    pub s_lo: f64,
    /// Guard values at `s_lo`.
    pub gaps_lo: Vec<f64>,
}

impl EventLocation {
    /// Local growth rate of guard `i` across the final bracket; `None` when
    /// the bracket has zero width.
    pub fn gap_rate(&self, i: usize) -> Option<f64> {
        let w = self.s - self.s_lo;
        (w > 0.0).then(|| (self.gaps[i] - self.gaps_lo[i]) / w)
    }
}

/// RK4 scratch space, separate from the stepper's output buffer so the two
/// can be borrowed together.
struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    xtmp: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            xtmp: vec![0.0; dim],
        }
    }

    fn rk4(
        &mut self,
        model: &dyn PlantModel,
        u: &[f64],
        x: &[f64],
        h: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let n = x.len();
        model.f(x, u, &mut self.k1)?;
        for i in 0..n {
            self.xtmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        model.f(&self.xtmp, u, &mut self.k2)?;
        for i in 0..n {
            self.xtmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        model.f(&self.xtmp, u, &mut self.k3)?;
        for i in 0..n {
            self.xtmp[i] = x[i] + h * self.k3[i];
        }
        model.f(&self.xtmp, u, &mut self.k4)?;
        for i in 0..n {
            // Summing before the /6 keeps a constant-derivative step at
            // exactly x + h*c.
            out[i] =
                x[i] + h * ((self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]) / 6.0);
        }
        for (i, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "state component {i} after a step"
                )));
            }
        }
        Ok(())
    }
}

// Steps shorter than this fraction of the nominal step are rounding residue
// of the segment-length arithmetic, not real work.
const STEP_RESIDUE: f64 = 1e-9;

/// Reusable fourth-order Runge-Kutta stepper with preallocated buffers.
pub struct Stepper {
    h: f64,
    scratch: Scratch,
    xnext: Vec<f64>,
    gvals: Vec<f64>,
}

impl Stepper {
    pub fn new(dim: usize, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Precondition(format!(
                "step size must be positive and finite, got {h}"
            )));
        }
        Ok(Stepper {
            h,
            scratch: Scratch::new(dim),
            xnext: vec![0.0; dim],
            gvals: Vec::new(),
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// One RK4 step of size `h` from `x` into `out`.
    pub fn step_into(
        &mut self,
        model: &dyn PlantModel,
        u: &[f64],
        x: &[f64],
        h: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.scratch.rk4(model, u, x, h, out)
    }

    /// Integrates `x` from `s_start` to `s_end` with no guards, reporting each
    /// accepted step to `obs`.
    pub fn advance<O: StepObserver>(
        &mut self,
        model: &dyn PlantModel,
        u: &[f64],
        x: &mut [f64],
        s_start: f64,
        s_end: f64,
        obs: &mut O,
    ) -> Result<()> {
        if s_end < s_start {
            return Err(Error::Precondition(format!(
                "segment end {s_end} precedes start {s_start}"
            )));
        }
        let total = s_end - s_start;
        let n_full = (total / self.h).floor() as u64;
        let rem = total - n_full as f64 * self.h;
        let has_rem = rem > self.h * STEP_RESIDUE;
        for i in 0..n_full {
            self.scratch.rk4(model, u, x, self.h, &mut self.xnext)?;
            x.copy_from_slice(&self.xnext);
            let s = if i + 1 == n_full && !has_rem {
                s_end
            } else {
                s_start + (i + 1) as f64 * self.h
            };
            obs.on_step(s, x);
        }
        if has_rem {
            self.scratch.rk4(model, u, x, rem, &mut self.xnext)?;
            x.copy_from_slice(&self.xnext);
            obs.on_step(s_end, x);
        }
        Ok(())
    }

    /// Integrates with guards armed, stopping at the first guard crossing.
    ///
    /// All guards must be negative at `s_start`. Returns `None` with `x`
    /// advanced to `s_end` if nothing fires; otherwise returns the localized
    /// event with `x` advanced to the event state. Steps are checked at their
    /// endpoints and the crossing is bisected to a bracket no wider than
    /// `tol_t`; the reported time is the bracket's right end, so the fired
    /// guards are nonnegative there.
    #[allow(clippy::too_many_arguments)]
    pub fn advance_until_event<O: StepObserver>(
        &mut self,
        model: &dyn PlantModel,
        u: &[f64],
        guards: &[&dyn Guard],
        x: &mut [f64],
        s_start: f64,
        s_end: f64,
        tol_t: f64,
        obs: &mut O,
    ) -> Result<Option<EventLocation>> {
        if !(tol_t.is_finite() && tol_t > 0.0) {
            return Err(Error::Precondition(format!(
                "event tolerance must be positive, got {tol_t}"
            )));
        }
        if s_end < s_start {
            return Err(Error::Precondition(format!(
                "segment end {s_end} precedes start {s_start}"
            )));
        }

        self.gvals.resize(guards.len(), 0.0);
        eval_guards(guards, s_start, x, &mut self.gvals)?;
        if let Some(i) = self.gvals.iter().position(|g| *g >= 0.0) {
            return Err(Error::Precondition(format!(
                "guard {i} is already nonnegative ({}) at segment start",
                self.gvals[i]
            )));
        }

        let total = s_end - s_start;
        let n_full = (total / self.h).floor() as u64;
        let rem = total - n_full as f64 * self.h;
        let has_rem = rem > self.h * STEP_RESIDUE;
        let n_steps = n_full + u64::from(has_rem);
        let mut s_cur = s_start;
        for step in 0..n_steps {
            let (hstep, s_next) = if step < n_full {
                let s_next = if step + 1 == n_full && !has_rem {
                    s_end
                } else {
                    s_start + (step + 1) as f64 * self.h
                };
                (self.h, s_next)
            } else {
                (rem, s_end)
            };
            self.scratch.rk4(model, u, x, hstep, &mut self.xnext)?;
            eval_guards(guards, s_next, &self.xnext, &mut self.gvals)?;
            if self.gvals.iter().any(|g| *g >= 0.0) {
                let loc = self.bisect(model, u, guards, x, s_cur, hstep, tol_t)?;
                x.copy_from_slice(&loc.x);
                return Ok(Some(loc));
            }
            x.copy_from_slice(&self.xnext);
            obs.on_step(s_next, x);
            s_cur = s_next;
        }
        Ok(None)
    }

    /// Bisects the first crossing inside one step starting at `(s0, x)`.
    /// Candidate states are single RK4 steps of the trial size from `x`, so
    /// the step endpoint state is reproduced exactly at the full size.
    #[allow(clippy::too_many_arguments)]
    fn bisect(
        &mut self,
        model: &dyn PlantModel,
        u: &[f64],
        guards: &[&dyn Guard],
        x: &[f64],
        s0: f64,
        hstep: f64,
        tol_t: f64,
    ) -> Result<EventLocation> {
        let mut lo = 0.0_f64;
        let mut hi = hstep;
        let mut iter = 0;
        while hi - lo > tol_t && iter < 128 {
            let mid = 0.5 * (lo + hi);
            self.scratch.rk4(model, u, x, mid, &mut self.xnext)?;
            eval_guards(guards, s0 + mid, &self.xnext, &mut self.gvals)?;
            if self.gvals.iter().any(|g| *g >= 0.0) {
                hi = mid;
            } else {
                lo = mid;
            }
            iter += 1;
        }
        let mut xlo = x.to_vec();
        if lo > 0.0 {
            self.scratch.rk4(model, u, x, lo, &mut self.xnext)?;
            xlo.copy_from_slice(&self.xnext);
        }
        let mut gaps_lo = vec![0.0; guards.len()];
        eval_guards(guards, s0 + lo, &xlo, &mut gaps_lo)?;
        let mut xhi = vec![0.0; x.len()];
        self.scratch.rk4(model, u, x, hi, &mut xhi)?;
        let mut gaps = vec![0.0; guards.len()];
        eval_guards(guards, s0 + hi, &xhi, &mut gaps)?;
        let fired: Vec<usize> = gaps
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (*g >= 0.0).then_some(i))
            .collect();
        Ok(EventLocation {
            s: s0 + hi,
            x: xhi,
            fired,
            gaps,
            s_lo: s0 + lo,
            gaps_lo,
        })
    }
}

fn eval_guards(guards: &[&dyn Guard], s: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    for (i, g) in guards.iter().enumerate() {
        let v = g.evaluate(s, x);
        if v.is_nan() {
            return Err(Error::NonFinite(format!("guard {i} evaluated to NaN")));
        }
        out[i] = v;
    }
    Ok(())
}

/// Single RK4 step; convenience wrapper over [`Stepper`].
pub fn rk4_step(model: &dyn PlantModel, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut st = Stepper::new(x.len(), h)?;
    let mut out = vec![0.0; x.len()];
    st.step_into(model, u, x, h, &mut out)?;
    Ok(out)
}

/// Integrates from `x0` until a guard fires or `t_max` elapses.
pub fn integrate_until_event(
    model: &dyn PlantModel,
    x0: &[f64],
    u: &[f64],
    guards: &[&dyn Guard],
    h: f64,
    t_max: f64,
    tol_t: f64,
) -> Result<Option<EventLocation>> {
    let mut st = Stepper::new(x0.len(), h)?;
    let mut x = x0.to_vec();
    st.advance_until_event(model, u, guards, &mut x, 0.0, t_max, tol_t, &mut ())
}

/// Dense trajectory of the held-input system: the initial state plus the
/// state after every accepted step.
pub fn sample_trajectory(
    model: &dyn PlantModel,
    x0: &[f64],
    u: &[f64],
    h: f64,
    duration: f64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut st = Stepper::new(x0.len(), h)?;
    let mut x = x0.to_vec();
    let mut out = vec![(0.0, x0.to_vec())];
    let mut obs = |s: f64, state: &[f64]| out.push((s, state.to_vec()));
    st.advance(model, u, &mut x, 0.0, duration, &mut obs)?;
    Ok(out)
}
