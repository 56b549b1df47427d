//! Experiment configuration: TOML files, built-in named configs, and
//! `key=value` overrides on dotted paths.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::DeepcWeights;
use crate::error::{Error, Result};
use crate::excitation::ExcitationConfig;
use crate::robust::{BoxSet, QpSettings};
use crate::sim::{
    preset, ControllerKind, ControllerSpec, DisturbanceSpec, InfeasibilityPolicy, ObjectiveKind, Scenario, Schedule,
    ScheduleSegment, WeightSpec,
};

/// Built-in configs addressable by name instead of a path.
pub const BUILTIN: [(&str, &str); 4] = [
    ("lti_tracking", include_str!("../configs/lti_tracking.toml")),
    ("ltv_tracking", include_str!("../configs/ltv_tracking.toml")),
    ("equilibrium", include_str!("../configs/equilibrium.toml")),
    ("multizone", include_str!("../configs/multizone.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: String,
    pub noise_std: f64,
    pub warmup_len: usize,
    pub run_len: usize,
    /// Seed of the first Monte-Carlo run; run `r` uses `seed + r`.
    pub seed: u64,
    #[serde(default = "one")]
    pub mc_runs: usize,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Warm-up input range; defaults to the input box.
    #[serde(default)]
    pub warmup_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub warmup_upper: Option<Vec<f64>>,
    pub schedule: Vec<SegmentConfig>,
    pub disturbance: DisturbanceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    #[serde(default)]
    pub from_step: usize,
    pub output_lower: Vec<f64>,
    pub output_upper: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightConfig {
    Constant { value: f64 },
    Linear { first: f64, last: f64 },
    Noise { exponent: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Tracking { output_weight: f64, input_weight: f64 },
    Energy { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InfeasibilityConfig {
    Abort,
    Relax { penalty: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSection {
    pub enabled: bool,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "default_pe_tol")]
    pub pe_tolerance: f64,
    #[serde(default)]
    pub use_exact_rank: bool,
    #[serde(default = "one")]
    pub exact_rank_order: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpConfig {
    pub tol: f64,
    pub max_iter: u32,
    pub polish: bool,
    pub polish_max_dim: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        let s = QpSettings::default();
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            polish: s.polish,
            polish_max_dim: s.polish_max_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub t_init: usize,
    pub n_h: usize,
    pub weights: WeightConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub excitation: Option<ExcitationSection>,
    #[serde(default = "yes")]
    pub online_update: bool,
    #[serde(default)]
    pub freeze_on_nonpe: bool,
    #[serde(default = "default_infeasibility")]
    pub infeasibility: InfeasibilityConfig,
    #[serde(default = "default_eta_g")]
    pub deepc_eta_g: f64,
    #[serde(default = "default_eta_sigma")]
    pub deepc_eta_sigma: f64,
    #[serde(default = "default_forgetting")]
    pub rls_forgetting: f64,
    #[serde(default = "default_p0")]
    pub rls_p0: f64,
    #[serde(default)]
    pub qp: QpConfig,
    /// Fill the `solve_ms` log column. Timings make logs non-reproducible.
    #[serde(default)]
    pub record_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_pe_tol() -> f64 {
    1e-6
}
fn default_infeasibility() -> InfeasibilityConfig {
    InfeasibilityConfig::Abort
}
fn default_eta_g() -> f64 {
    0.1
}
fn default_eta_sigma() -> f64 {
    1000.0
}
fn default_forgetting() -> f64 {
    0.98
}
fn default_p0() -> f64 {
    1000.0
}

fn boxed(field: &str, lo: &[f64], hi: &[f64]) -> Result<BoxSet> {
    BoxSet::from_slices(lo, hi).map_err(|e| Error::config(field, e.to_string()))
}

fn check(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

/// Sets `path` (dot-separated) inside a TOML table. The value is parsed as a
/// TOML value and falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn builtin(name: &str) -> Option<&'static str> {
        BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a built-in config by name or a TOML file by path.
    pub fn load(name_or_path: &str, overrides: &[String]) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(text) => Self::from_toml(text, overrides),
            None => {
                let text = std::fs::read_to_string(name_or_path).map_err(|e| {
                    let names: Vec<&str> = BUILTIN.iter().map(|(n, _)| *n).collect();
                    Error::config(
                        "config",
                        format!(
                            "`{name_or_path}` is neither a built-in ({}) nor a readable file: {e}",
                            names.join(", ")
                        ),
                    )
                })?;
                Self::from_toml(&text, overrides)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        let plant = preset(&s.preset).map_err(|e| Error::config("scenario.preset", e.to_string()))?;
        check(s.noise_std >= 0.0, "scenario.noise_std", "must be >= 0")?;
        check(s.run_len >= 1, "scenario.run_len", "must be >= 1")?;
        check(s.mc_runs >= 1, "scenario.mc_runs", "must be >= 1")?;
        let u = boxed("scenario.input_lower", &s.input_lower, &s.input_upper)?;
        check(
            u.dim() == plant.n_u(),
            "scenario.input_lower",
            "length must equal the plant input count",
        )?;
        if s.warmup_lower.is_some() != s.warmup_upper.is_some() {
            return Err(Error::config(
                "scenario.warmup_lower",
                "set both warm-up bounds or neither",
            ));
        }
        if let (Some(lo), Some(hi)) = (&s.warmup_lower, &s.warmup_upper) {
            let b = boxed("scenario.warmup_lower", lo, hi)?;
            check(
                b.dim() == plant.n_u(),
                "scenario.warmup_lower",
                "length must equal the plant input count",
            )?;
            check(b.is_bounded(), "scenario.warmup_lower", "must be finite")?;
        } else {
            check(
                u.is_bounded(),
                "scenario.input_lower",
                "must be finite when no warm-up box is given",
            )?;
        }
        check(
            !s.schedule.is_empty(),
            "scenario.schedule",
            "needs at least one segment",
        )?;
        for (i, seg) in s.schedule.iter().enumerate() {
            let field = format!("scenario.schedule[{i}]");
            let b = boxed(&field, &seg.output_lower, &seg.output_upper)?;
            check(
                b.dim() == plant.n_y(),
                &field,
                "output bounds must have one entry per output",
            )?;
            check(
                seg.reference.len() == plant.n_y(),
                &field,
                "reference must have one entry per output",
            )?;
        }
        check(
            s.schedule.iter().any(|g| g.from_step == 0),
            "scenario.schedule",
            "one segment must start at step 0",
        )?;
        check(
            s.disturbance.n_w() == plant.n_w(),
            "scenario.disturbance",
            "channel count must match the plant",
        )?;
        if let DisturbanceSpec::Uniform { lower, upper } = &s.disturbance {
            let b = boxed("scenario.disturbance", lower, upper)?;
            check(b.is_bounded(), "scenario.disturbance", "bounds must be finite")?;
        }

        let c = &self.controller;
        check(c.t_init >= 1, "controller.t_init", "must be >= 1")?;
        check(c.n_h >= 1, "controller.n_h", "must be >= 1")?;
        check(
            s.warmup_len >= c.t_init + c.n_h,
            "scenario.warmup_len",
            "must be at least controller.t_init + controller.n_h",
        )?;
        match c.weights {
            WeightConfig::Constant { value } => check(value > 0.0, "controller.weights.value", "must be > 0")?,
            WeightConfig::Linear { first, last } => check(
                first > 0.0 && last > 0.0,
                "controller.weights",
                "linear end points must be > 0",
            )?,
            WeightConfig::Noise { .. } => {}
        }
        match c.objective {
            ObjectiveConfig::Tracking {
                output_weight,
                input_weight,
            } => check(
                output_weight >= 0.0 && input_weight >= 0.0,
                "controller.objective",
                "weights must be >= 0",
            )?,
            ObjectiveConfig::Energy { weight } => check(weight >= 0.0, "controller.objective.weight", "must be >= 0")?,
        }
        if let Some(ex) = &c.excitation {
            let ue = boxed("controller.excitation.lower", &ex.lower, &ex.upper)?;
            check(
                ue.dim() == u.dim(),
                "controller.excitation.lower",
                "length must equal the plant input count",
            )?;
            check(
                u.contains_box(&ue),
                "controller.excitation",
                "excitation box must lie inside the input box",
            )?;
            self.excitation_config()
                .expect("section present")
                .validate(&u)
                .map_err(|e| Error::config("controller.excitation", e.to_string()))?;
            check(
                ex.exact_rank_order >= 1,
                "controller.excitation.exact_rank_order",
                "must be >= 1",
            )?;
        }
        if let InfeasibilityConfig::Relax { penalty } = c.infeasibility {
            check(penalty > 0.0, "controller.infeasibility.penalty", "must be > 0")?;
        }
        check(
            c.deepc_eta_g >= 0.0 && c.deepc_eta_sigma >= 0.0,
            "controller.deepc_eta_g",
            "DeePC weights must be >= 0",
        )?;
        check(
            c.rls_forgetting > 0.0 && c.rls_forgetting <= 1.0,
            "controller.rls_forgetting",
            "must lie in (0, 1]",
        )?;
        check(c.rls_p0 > 0.0, "controller.rls_p0", "must be > 0")?;
        check(c.qp.tol > 0.0, "controller.qp.tol", "must be > 0")?;
        check(c.qp.max_iter >= 1, "controller.qp.max_iter", "must be >= 1")?;
        Ok(())
    }

    fn excitation_config(&self) -> Option<ExcitationConfig> {
        self.controller.excitation.as_ref().map(|ex| ExcitationConfig {
            enabled: ex.enabled,
            u_e_box: BoxSet::from_slices(&ex.lower, &ex.upper).expect("validated"),
            pe_tolerance: ex.pe_tolerance,
            use_exact_rank: ex.use_exact_rank,
            exact_rank_order: ex.exact_rank_order,
            rng_seed: ex.rng_seed,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.scenario.mc_runs as u64)
            .map(|r| self.scenario.seed + r)
            .collect()
    }

    /// Scenario of one Monte-Carlo run.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let s = &self.scenario;
        let input_box = BoxSet::from_slices(&s.input_lower, &s.input_upper)?;
        let warmup_input_box = match (&s.warmup_lower, &s.warmup_upper) {
            (Some(lo), Some(hi)) => BoxSet::from_slices(lo, hi)?,
            _ => input_box.clone(),
        };
        let segments = s
            .schedule
            .iter()
            .map(|g| {
                Ok(ScheduleSegment {
                    from_step: g.from_step,
                    output: BoxSet::from_slices(&g.output_lower, &g.output_upper)?,
                    reference: DVector::from_column_slice(&g.reference),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            plant: preset(&s.preset)?,
            noise_std: s.noise_std,
            warmup_len: s.warmup_len,
            run_len: s.run_len,
            input_box,
            warmup_input_box,
            schedule: Schedule::new(segments)?,
            disturbance: s.disturbance.clone(),
            seed,
        })
    }

    pub fn controller(&self) -> ControllerSpec {
        let c = &self.controller;
        ControllerSpec {
            kind: c.kind,
            t_init: c.t_init,
            n_h: c.n_h,
            weights: match c.weights {
                WeightConfig::Constant { value } => WeightSpec::Constant(value),
                WeightConfig::Linear { first, last } => WeightSpec::Linear { first, last },
                WeightConfig::Noise { exponent } => WeightSpec::Noise { exponent },
            },
            objective: match c.objective {
                ObjectiveConfig::Tracking {
                    output_weight,
                    input_weight,
                } => ObjectiveKind::Tracking {
                    output_weight,
                    input_weight,
                },
                ObjectiveConfig::Energy { weight } => ObjectiveKind::Energy { weight },
            },
            excitation: self.excitation_config(),
            online_update: c.online_update,
            freeze_on_nonpe: c.freeze_on_nonpe,
            infeasibility: match c.infeasibility {
                InfeasibilityConfig::Abort => InfeasibilityPolicy::Abort,
                InfeasibilityConfig::Relax { penalty } => InfeasibilityPolicy::Relax { penalty },
            },
            deepc: DeepcWeights {
                eta_g: c.deepc_eta_g,
                eta_sigma: c.deepc_eta_sigma,
            },
            rls_forgetting: c.rls_forgetting,
            rls_p0: c.rls_p0,
            qp: QpSettings {
                tol: c.qp.tol,
                max_iter: c.qp.max_iter,
                polish: c.qp.polish,
                polish_max_dim: c.qp.polish_max_dim,
            },
            record_timing: c.record_timing,
        }
    }
}
