//! Trigger conditions on the held-sample measurement error.
//!
//! Between controller updates the loop runs on a stale sample, and the error
//! `e = x_held - x(t)` grows from zero. The centralized condition compares
//! the full error energy against a `sigma`-scaled distance of the state from
//! a center point (the setpoint, for a regulation loop). The decentralized
//! form splits the state across sensor nodes: node `i` watches only its own
//! index group and adds a per-node offset `theta_i`; offsets summing to zero
//! keep the union of local conditions at least as strict as the centralized
//! one, which is what makes node-local decisions safe.

use crate::error::Error;
use crate::Result;

/// Trigger parameters shared by every mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerConfig {
    /// Error-to-state energy ratio at which an update fires; positive.
    pub sigma: f64,
    /// Hard floor on the spacing of consecutive updates [s]; positive.
    pub tau_min: f64,
    /// State-index groups owned by each node (0-based), a partition of the
    /// state indices.
    pub grouping: Vec<Vec<usize>>,
    /// Reference point the state energy is measured from; zero for a loop
    /// regulated to the origin, the setpoint for the tank loop.
    pub center: Vec<f64>,
}

impl TriggerConfig {
    pub fn node_count(&self) -> usize {
        self.grouping.len()
    }

    /// Every rule violation for a state dimension of `n`, named 1-based to
    /// match the x1..xn state labels.
    pub fn violations(&self, n: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            v.push(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.tau_min.is_finite() && self.tau_min > 0.0) {
            v.push(format!("tau_min must be positive, got {}", self.tau_min));
        }
        if self.grouping.is_empty() {
            v.push("grouping must contain at least one group".into());
        }
        let mut seen = vec![0usize; n];
        for (gi, group) in self.grouping.iter().enumerate() {
            if group.is_empty() {
                v.push(format!("group {} is empty", gi + 1));
            }
            for &j in group {
                if j >= n {
                    v.push(format!(
                        "group {} references state x{} but the state has {n} components",
                        gi + 1,
                        j + 1
                    ));
                } else {
                    seen[j] += 1;
                }
            }
        }
        for (j, &count) in seen.iter().enumerate() {
            if count == 0 {
                v.push(format!("state x{} appears in no group", j + 1));
            } else if count > 1 {
                v.push(format!("state x{} appears in {count} groups", j + 1));
            }
        }
        if self.center.len() != n {
            v.push(format!(
                "center has {} components but the state has {n}",
                self.center.len()
            ));
        } else if let Some(j) = self.center.iter().position(|c| !c.is_finite()) {
            v.push(format!("center component {} is not finite", j + 1));
        }
        v
    }
}

/// Per-node trigger offsets, tied to the update epoch they were solved at.
/// The offsets must sum to zero; that is the whole safety argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub epoch: u64,
}

impl ThetaVector {
    pub fn zeros(n: usize, epoch: u64) -> Self {
        ThetaVector {
            values: vec![0.0; n],
            epoch,
        }
    }

    /// Accepts the offsets only when they sum to zero within
    /// `1e-12 * N * max|theta_i|`.
    pub fn new(values: Vec<f64>, epoch: u64) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * values.len() as f64 * max;
        if sum.abs() > tol {
            return Err(Error::Precondition(format!(
                "theta offsets must sum to zero, got {sum} (tolerance {tol})"
            )));
        }
        Ok(ThetaVector { values, epoch })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Full-state trigger gap `|e|^2 - sigma |x - center|^2`; an update is due
/// when this reaches zero.
pub fn centralized_gap(cfg: &TriggerConfig, x: &[f64], e: &[f64]) -> f64 {
    let mut e2 = 0.0;
    let mut d2 = 0.0;
    for j in 0..x.len() {
        e2 += e[j] * e[j];
        let d = x[j] - cfg.center[j];
        d2 += d * d;
    }
    e2 - cfg.sigma * d2
}

/// Per-node gaps `|e_i|^2 - sigma |x_i - center_i|^2 - theta_i` over each
/// node's index group. Summed over nodes with the offsets added back, these
/// reproduce [`centralized_gap`] exactly (up to rounding).
pub fn local_gaps(cfg: &TriggerConfig, x: &[f64], e: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != cfg.grouping.len() {
        return Err(Error::Precondition(format!(
            "theta has {} entries but the grouping has {} nodes",
            theta.len(),
            cfg.grouping.len()
        )));
    }
    let mut gaps = Vec::with_capacity(cfg.grouping.len());
    for (group, th) in cfg.grouping.iter().zip(theta) {
        gaps.push(local_gap_of(cfg, group, x, e) - th);
    }
    Ok(gaps)
}

/// Gap of a single index group before its offset is subtracted.
pub(crate) fn local_gap_of(cfg: &TriggerConfig, group: &[usize], x: &[f64], e: &[f64]) -> f64 {
    let mut e2 = 0.0;
    let mut d2 = 0.0;
    for &j in group {
        e2 += e[j] * e[j];
        let d = x[j] - cfg.center[j];
        d2 += d * d;
    }
    e2 - cfg.sigma * d2
}

/// Safety direction of the decomposition: when every local gap is
/// nonpositive, the centralized gap must be nonpositive too. Holds as a
/// theorem whenever the offsets sum to zero; vacuously true when some local
/// gap is already positive.
pub fn implication_holds(cfg: &TriggerConfig, x: &[f64], e: &[f64], theta: &[f64]) -> Result<bool> {
    let gaps = local_gaps(cfg, x, e, theta)?;
    if gaps.iter().any(|g| *g > 0.0) {
        return Ok(true);
    }
    Ok(centralized_gap(cfg, x, e) <= 0.0)
}

/// Next update time: the candidate event time floored by the minimum
/// spacing, `t_k + max(tau_min, t_candidate - t_k)`.
pub fn schedule_next_update(cfg: &TriggerConfig, t_k: f64, t_candidate: f64) -> Result<f64> {
    if t_candidate < t_k {
        return Err(Error::Precondition(format!(
            "candidate time {t_candidate} precedes the current update {t_k}"
        )));
    }
    Ok(t_k + cfg.tau_min.max(t_candidate - t_k))
}
