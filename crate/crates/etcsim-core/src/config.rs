//! Configuration documents.
//!
//! A document is the JSON users write: plant parameters, setpoint targets,
//! trigger settings, offset adaptation, and simulation controls, plus an
//! optional mode selection and output directory. Every field has a default,
//! so `{}` is a complete document. Parsing is schema-checked: unknown keys
//! are errors in strict mode and warnings in lenient mode, except below
//! `trigger.metadata`, which is free-form and carried through untouched.
//!
//! Compiling a document resolves names (center, te rule, mode) and collects
//! every violation instead of stopping at the first, so one round trip
//! reports everything wrong with a file.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptation::AdaptationConfig;
use crate::adaptation::TeRule;
use crate::engine::{ModeSpec, Scenario};
use crate::error::Error;
use crate::plant::{
    equilibrium_inputs, ControllerGains, LevelPolicy, PlantModel, QuadrupleTank,
    QuadrupleTankParams,
};
use crate::trigger::TriggerConfig;
use crate::Result;

/// Document schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

/// Largest equilibrium drift tolerated when cross-checking the solved
/// setpoint against the plant dynamics.
const EQUILIBRIUM_RESIDUAL_TOL: f64 = 1e-10;

fn d_version() -> u32 {
    SCHEMA_VERSION
}

fn d_tank_area() -> [f64; 4] {
    QuadrupleTankParams::default_set().tank_area
}

fn d_outlet_area() -> [f64; 4] {
    QuadrupleTankParams::default_set().outlet_area
}

fn d_valve_split() -> [f64; 2] {
    QuadrupleTankParams::default_set().valve_split
}

fn d_gravity() -> f64 {
    QuadrupleTankParams::default_set().gravity
}

fn d_integrator_gain() -> [f64; 2] {
    QuadrupleTankParams::default_set().integrator_gain
}

fn d_shaping_gain() -> [f64; 4] {
    QuadrupleTankParams::default_set().shaping_gain
}

fn d_q_weight() -> [[f64; 2]; 2] {
    QuadrupleTankParams::default_set().q_weight
}

fn d_level_policy() -> LevelPolicy {
    LevelPolicy::Clamp
}

fn d_level_targets() -> [f64; 2] {
    [15.0, 13.0]
}

fn d_integrator_refs() -> [f64; 2] {
    [0.0, 0.0]
}

fn d_sigma() -> f64 {
    2.916e-5
}

fn d_tau_min() -> f64 {
    1e-4
}

fn d_grouping() -> Vec<Vec<u32>> {
    vec![vec![1, 5], vec![2, 6], vec![3], vec![4]]
}

fn d_center() -> CenterSpec {
    CenterSpec::Named(CenterName::Setpoint)
}

fn d_true() -> bool {
    true
}

fn d_q() -> u32 {
    1
}

fn d_te_rule() -> TeRuleName {
    TeRuleName::PreviousInterval
}

fn d_fd_step() -> f64 {
    1e-6
}

fn d_horizon() -> f64 {
    1000.0
}

fn d_event_tolerance() -> f64 {
    1e-6
}

fn d_sample_stride() -> u64 {
    100
}

fn d_initial_state() -> [f64; 6] {
    [12.0, 10.0, 5.0, 7.0, 0.0, 0.0]
}

fn d_delay_sigma_factor() -> f64 {
    0.25
}

/// Physical plant parameters; lengths in cm, time in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSection {
    #[serde(default = "d_tank_area")]
    pub tank_area_cm2: [f64; 4],
    #[serde(default = "d_outlet_area")]
    pub outlet_area_cm2: [f64; 4],
    #[serde(default = "d_valve_split")]
    pub valve_split: [f64; 2],
    #[serde(default = "d_gravity")]
    pub gravity_cm_s2: f64,
    #[serde(default = "d_integrator_gain")]
    pub integrator_gain: [f64; 2],
    #[serde(default = "d_shaping_gain")]
    pub shaping_gain: [f64; 4],
    #[serde(default = "d_q_weight")]
    pub q_weight: [[f64; 2]; 2],
    #[serde(default = "d_level_policy")]
    pub level_policy: LevelPolicy,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            tank_area_cm2: d_tank_area(),
            outlet_area_cm2: d_outlet_area(),
            valve_split: d_valve_split(),
            gravity_cm_s2: d_gravity(),
            integrator_gain: d_integrator_gain(),
            shaping_gain: d_shaping_gain(),
            q_weight: d_q_weight(),
            level_policy: d_level_policy(),
        }
    }
}

impl PlantSection {
    pub fn to_params(&self) -> QuadrupleTankParams {
        QuadrupleTankParams {
            tank_area: self.tank_area_cm2,
            outlet_area: self.outlet_area_cm2,
            valve_split: self.valve_split,
            gravity: self.gravity_cm_s2,
            integrator_gain: self.integrator_gain,
            shaping_gain: self.shaping_gain,
            q_weight: self.q_weight,
        }
    }
}

/// Regulation targets for the two lower tanks plus integrator references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointSection {
    #[serde(default = "d_level_targets")]
    pub level_targets_cm: [f64; 2],
    #[serde(default = "d_integrator_refs")]
    pub integrator_refs: [f64; 2],
}

impl Default for SetpointSection {
    fn default() -> Self {
        SetpointSection {
            level_targets_cm: d_level_targets(),
            integrator_refs: d_integrator_refs(),
        }
    }
}

/// Where the trigger measures state deviation from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterName {
    /// The solved setpoint (the usual choice for regulation).
    Setpoint,
    /// The state-space origin.
    Origin,
}

/// Trigger center: a named point or an explicit state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CenterSpec {
    Named(CenterName),
    Explicit(Vec<f64>),
}

/// Trigger condition settings. Grouping indices are 1-based state numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSection {
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_tau_min")]
    pub tau_min_s: f64,
    #[serde(default = "d_grouping")]
    pub grouping: Vec<Vec<u32>>,
    #[serde(default = "d_center")]
    pub center: CenterSpec,
    /// Free-form provenance block; never schema-checked, echoed into
    /// summaries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Value>,
}

impl Default for TriggerSection {
    fn default() -> Self {
        TriggerSection {
            sigma: d_sigma(),
            tau_min_s: d_tau_min(),
            grouping: d_grouping(),
            center: d_center(),
            metadata: None,
        }
    }
}

/// Time-lookahead rule for the offset predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeRuleName {
    /// Predict over the interval that just elapsed.
    PreviousInterval,
    /// Predict over the minimum update spacing.
    TauMin,
    /// Predict over `te_fixed_seconds`.
    Fixed,
}

/// Offset adaptation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSection {
    #[serde(default = "d_true")]
    pub enabled: bool,
    #[serde(default = "d_q")]
    pub q: u32,
    #[serde(default = "d_te_rule")]
    pub te_rule: TeRuleName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub te_fixed_seconds: Option<f64>,
    #[serde(default = "d_true")]
    pub fd_fallback: bool,
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        AdaptationSection {
            enabled: true,
            q: d_q(),
            te_rule: d_te_rule(),
            te_fixed_seconds: None,
            fd_fallback: true,
            fd_step: d_fd_step(),
        }
    }
}

/// Run length, integration and logging controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSection {
    #[serde(default = "d_horizon")]
    pub horizon_s: f64,
    /// Integrator step; omitted means a tenth of `tau_min_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_s: Option<f64>,
    #[serde(default = "d_event_tolerance")]
    pub event_tolerance_s: f64,
    #[serde(default = "d_sample_stride")]
    pub sample_stride: u64,
    #[serde(default = "d_initial_state")]
    pub initial_state: [f64; 6],
    #[serde(default)]
    pub actuation_delay_s: f64,
    #[serde(default = "d_delay_sigma_factor")]
    pub delay_sigma_factor: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            horizon_s: d_horizon(),
            step_s: None,
            event_tolerance_s: d_event_tolerance(),
            sample_stride: d_sample_stride(),
            initial_state: d_initial_state(),
            actuation_delay_s: 0.0,
            delay_sigma_factor: d_delay_sigma_factor(),
        }
    }
}

/// The full user-facing configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(default = "d_version")]
    pub version: u32,
    /// Optional mode selection; the command line overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Optional output directory; the command line overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Seed recorded with results and used by sampling utilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub setpoint: SetpointSection,
    #[serde(default)]
    pub trigger: TriggerSection,
    #[serde(default)]
    pub adaptation: AdaptationSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

impl Default for ConfigDocument {
    fn default() -> Self {
        ConfigDocument {
            version: SCHEMA_VERSION,
            mode: None,
            output_dir: None,
            seed: None,
            plant: PlantSection::default(),
            setpoint: SetpointSection::default(),
            trigger: TriggerSection::default(),
            adaptation: AdaptationSection::default(),
            simulation: SimulationSection::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "version",
    "mode",
    "output_dir",
    "seed",
    "plant",
    "setpoint",
    "trigger",
    "adaptation",
    "simulation",
];
const PLANT_KEYS: &[&str] = &[
    "tank_area_cm2",
    "outlet_area_cm2",
    "valve_split",
    "gravity_cm_s2",
    "integrator_gain",
    "shaping_gain",
    "q_weight",
    "level_policy",
];
const SETPOINT_KEYS: &[&str] = &["level_targets_cm", "integrator_refs"];
const TRIGGER_KEYS: &[&str] = &["sigma", "tau_min_s", "grouping", "center", "metadata"];
const ADAPTATION_KEYS: &[&str] = &[
    "enabled",
    "q",
    "te_rule",
    "te_fixed_seconds",
    "fd_fallback",
    "fd_step",
];
const SIMULATION_KEYS: &[&str] = &[
    "horizon_s",
    "step_s",
    "event_tolerance_s",
    "sample_stride",
    "initial_state",
    "actuation_delay_s",
    "delay_sigma_factor",
];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "plant" => Some(PLANT_KEYS),
        "setpoint" => Some(SETPOINT_KEYS),
        "trigger" => Some(TRIGGER_KEYS),
        "adaptation" => Some(ADAPTATION_KEYS),
        "simulation" => Some(SIMULATION_KEYS),
        _ => None,
    }
}

/// Keys the schema does not know, as `section.key` paths. The subtree below
/// `trigger.metadata` is intentionally not visited.
fn collect_unknown_keys(root: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(map) = root.as_object() else {
        return out;
    };
    for (key, value) in map {
        if !TOP_KEYS.contains(&key.as_str()) {
            out.push(format!("unknown key {key}"));
            continue;
        }
        if let (Some(known), Some(section)) = (section_keys(key), value.as_object()) {
            for sub in section.keys() {
                if !known.contains(&sub.as_str()) {
                    out.push(format!("unknown key {key}.{sub}"));
                }
            }
        }
    }
    out
}

/// Parses a document from JSON text.
///
/// Returns the document plus warnings. Unknown keys are a validation error
/// in strict mode and warnings otherwise; malformed JSON or wrongly typed
/// fields are parse errors with line and column.
pub fn parse_document(text: &str, strict: bool) -> Result<(ConfigDocument, Vec<String>)> {
    let doc: ConfigDocument = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!(
            "config parse error at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let raw: Value = serde_json::from_str(text).expect("text already parsed as a typed document");
    let unknown = collect_unknown_keys(&raw);
    if !unknown.is_empty() && strict {
        return Err(Error::Validation(unknown));
    }
    Ok((doc, unknown))
}

/// Parses and compiles in one step; warnings from both stages are merged.
pub fn parse_and_validate(
    text: &str,
    strict: bool,
) -> Result<(ConfigDocument, Scenario, Vec<String>)> {
    let (doc, mut warnings) = parse_document(text, strict)?;
    let (scenario, more) = doc.compile()?;
    warnings.extend(more);
    Ok((doc, scenario, warnings))
}

impl ConfigDocument {
    /// Canonical JSON text; floats carry 17 significant digits so parsing
    /// the emitted text reproduces this document bit for bit.
    pub fn emit(&self) -> Result<String> {
        crate::output::to_json_string(self)
    }

    /// Resolves the document into a runnable scenario.
    ///
    /// Collects every violation before failing, so the error lists all
    /// problems at once. The second return value is warnings (settings that
    /// are legal but ignored).
    pub fn compile(&self) -> Result<(Scenario, Vec<String>)> {
        let mut violations: Vec<String> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();

        if self.version != SCHEMA_VERSION {
            violations.push(format!(
                "unsupported config version {}; this build reads version {SCHEMA_VERSION}",
                self.version
            ));
        }

        let params = self.plant.to_params();
        violations.extend(params.violations());

        let [x1_star, x2_star] = self.setpoint.level_targets_cm;
        let setpoint =
            match equilibrium_inputs(&params, x1_star, x2_star, self.setpoint.integrator_refs) {
                Ok(sp) => {
                    // Cross-check: the solved point must actually hold still.
                    let plant = QuadrupleTank::new(params.clone(), sp.clone(), LevelPolicy::Strict);
                    let mut dot = [0.0; 6];
                    match plant.f(&sp.x_star, &sp.u_star, &mut dot) {
                        Ok(()) => {
                            let residual = dot.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
                            if residual.is_nan() || residual >= EQUILIBRIUM_RESIDUAL_TOL {
                                violations.push(format!(
                                    "solved setpoint drifts: max |dx/dt| = {residual:e} \
                                 exceeds {EQUILIBRIUM_RESIDUAL_TOL:e}"
                                ));
                            }
                        }
                        Err(e) => violations.push(format!("setpoint check failed: {e}")),
                    }
                    Some(sp)
                }
                Err(Error::Validation(v)) => {
                    // Plant violations were already collected; keep only the
                    // setpoint-specific ones.
                    for msg in v {
                        if !violations.contains(&msg) {
                            violations.push(msg);
                        }
                    }
                    None
                }
                Err(e) => {
                    violations.push(e.to_string());
                    None
                }
            };

        let mut grouping: Vec<Vec<usize>> = Vec::with_capacity(self.trigger.grouping.len());
        for group in &self.trigger.grouping {
            let mut converted = Vec::with_capacity(group.len());
            for &idx in group {
                if idx == 0 {
                    violations
                        .push("grouping uses 1-based state indices; 0 is not a valid index".into());
                } else {
                    converted.push((idx - 1) as usize);
                }
            }
            grouping.push(converted);
        }
        let center: Vec<f64> = match &self.trigger.center {
            CenterSpec::Named(CenterName::Setpoint) => setpoint
                .as_ref()
                .map(|sp| sp.x_star.to_vec())
                .unwrap_or_else(|| vec![0.0; 6]),
            CenterSpec::Named(CenterName::Origin) => vec![0.0; 6],
            CenterSpec::Explicit(v) => v.clone(),
        };
        let trigger = TriggerConfig {
            sigma: self.trigger.sigma,
            tau_min: self.trigger.tau_min_s,
            grouping,
            center,
        };
        violations.extend(trigger.violations(6));

        let te_rule = match self.adaptation.te_rule {
            TeRuleName::PreviousInterval => TeRule::PreviousInterval,
            TeRuleName::TauMin => TeRule::TauMin,
            TeRuleName::Fixed => match self.adaptation.te_fixed_seconds {
                Some(te) => TeRule::Fixed(te),
                None => {
                    violations.push("te_rule \"fixed\" requires te_fixed_seconds".into());
                    TeRule::TauMin
                }
            },
        };
        if self.adaptation.te_rule != TeRuleName::Fixed
            && self.adaptation.te_fixed_seconds.is_some()
        {
            warnings.push("te_fixed_seconds is ignored unless te_rule is \"fixed\"".into());
        }
        let adaptation = AdaptationConfig {
            enabled: self.adaptation.enabled,
            q: self.adaptation.q,
            te_rule,
            fd_fallback: self.adaptation.fd_fallback,
            fd_step: self.adaptation.fd_step,
        };
        violations.extend(adaptation.violations());

        let sim = &self.simulation;
        if !(sim.horizon_s.is_finite() && sim.horizon_s > 0.0) {
            violations.push(format!("horizon_s must be positive, got {}", sim.horizon_s));
        }
        if let Some(h) = sim.step_s {
            if !(h.is_finite() && h > 0.0) {
                violations.push(format!("step_s must be positive, got {h}"));
            }
        }
        if !(sim.event_tolerance_s.is_finite() && sim.event_tolerance_s > 0.0) {
            violations.push(format!(
                "event_tolerance_s must be positive, got {}",
                sim.event_tolerance_s
            ));
        }
        if sim.sample_stride < 1 {
            violations.push("sample_stride must be at least 1".into());
        }
        for (i, &v) in sim.initial_state.iter().enumerate() {
            if !v.is_finite() {
                violations.push(format!("initial_state[{}] must be finite, got {v}", i + 1));
            } else if i < 4 && v < 0.0 {
                violations.push(format!(
                    "initial level x{} must be nonnegative, got {v}",
                    i + 1
                ));
            }
        }
        let delay = sim.actuation_delay_s;
        if !(delay.is_finite() && delay >= 0.0) {
            violations.push(format!(
                "actuation_delay_s must be nonnegative, got {delay}"
            ));
        } else if delay > 0.0 && delay >= self.trigger.tau_min_s {
            violations.push(format!(
                "actuation_delay_s must stay below tau_min_s, got {delay} >= {}",
                self.trigger.tau_min_s
            ));
        }
        if !(sim.delay_sigma_factor.is_finite()
            && sim.delay_sigma_factor > 0.0
            && sim.delay_sigma_factor <= 1.0)
        {
            violations.push(format!(
                "delay_sigma_factor must lie in (0, 1], got {}",
                sim.delay_sigma_factor
            ));
        }

        if let Some(mode) = &self.mode {
            if !ModeSpec::is_valid_name(mode) {
                violations.push(format!(
                    "unknown mode \"{mode}\"; expected one of {}",
                    ModeSpec::NAMES.join(", ")
                ));
            }
        }

        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }

        let setpoint = setpoint.expect("violations were empty");
        let gains = ControllerGains::from_params(&params);
        let scenario = Scenario {
            gains,
            level_policy: self.plant.level_policy,
            setpoint,
            trigger,
            adaptation,
            x0: sim.initial_state,
            horizon: sim.horizon_s,
            h: sim.step_s.unwrap_or(self.trigger.tau_min_s / 10.0),
            tol_t: sim.event_tolerance_s,
            sample_stride: sim.sample_stride as usize,
            actuation_delay: delay,
            delay_sigma_factor: sim.delay_sigma_factor,
            seed: self.seed.unwrap_or(0),
            metadata: self.trigger.metadata.clone(),
            params,
        };
        Ok((scenario, warnings))
    }
}
