use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calculus::DEFAULT_LINEARITY_WINDOW;
use crate::error::{ensure, Error, Result};
use crate::models::{AnalyticModel, Component, ModelKind, Testbed};
use crate::schedule::{Family, ScheduleSpec};
use crate::sampler::SamplerConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Steepness values of the logistic k study.
pub const K_PRESET: [f64; 5] = [0.008, 0.011, 0.015, 0.017, 0.029];
/// Logistic midpoints as fractions of T; each becomes `int(f·T)`.
pub const T0_FRACTION_PRESET: [f64; 3] = [0.4, 0.6, 0.8];
pub const N_STEPS_PRESET: [usize; 5] = [25, 50, 100, 200, 400];
pub const W_INVERT_PRESET: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const W_REVERSE_PRESET: [f64; 7] = [3.0, 5.0, 7.5, 10.0, 15.0, 20.0, 25.0];

/// Input scales 0.5, 0.55, …, 1.4.
pub fn input_scale_preset() -> Vec<f64> {
    (0..19).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Data models for a scenario. Omitting the whole block selects the
/// two-mode testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub source: AnalyticModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<AnalyticModel>,
    /// Defaults to the equal-weight union of source and target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond: Option<AnalyticModel>,
    /// Defaults to the difference of the target and source means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_direction: Option<Vec<f64>>,
}

/// Resolved models for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub source: AnalyticModel,
    pub target: Option<AnalyticModel>,
    pub uncond: AnalyticModel,
    pub edit_direction: Option<Vec<f64>>,
}

fn mean_of(m: &AnalyticModel) -> Vec<f64> {
    let mut out = vec![0.0; m.dim()];
    for c in m.components() {
        for (o, v) in out.iter_mut().zip(&c.mean) {
            *o += c.weight * v;
        }
    }
    out
}

fn union(a: &AnalyticModel, b: &AnalyticModel) -> Result<AnalyticModel> {
    let components: Vec<Component> = a
        .components()
        .iter()
        .chain(b.components())
        .map(|c| Component {
            weight: 0.5 * c.weight,
            ..c.clone()
        })
        .collect();
    ensure(components.iter().all(|c| c.variance > 0.0), || {
        "cannot build a default unconditional model from point masses; give `uncond`".into()
    })?;
    AnalyticModel::new(ModelKind::GaussianMixture, a.dim(), components, None)
}

impl ModelsConfig {
    pub fn resolve(&self) -> Result<Models> {
        let dim = self.source.dim();
        for (what, m) in [("target", &self.target), ("uncond", &self.uncond)] {
            if let Some(m) = m {
                ensure(m.dim() == dim, || {
                    format!("{what} model dim {} differs from source dim {dim}", m.dim())
                })?;
            }
        }
        let uncond = match (&self.uncond, &self.target) {
            (Some(u), _) => u.clone(),
            (None, Some(t)) => union(&self.source, t)?,
            (None, None) => self.source.clone(),
        };
        let edit_direction = match (&self.edit_direction, &self.target) {
            (Some(d), _) => {
                ensure(d.len() == dim, || "edit_direction length differs from model dim".into())?;
                ensure(d.iter().any(|v| *v != 0.0), || "edit_direction must be nonzero".into())?;
                Some(d.clone())
            }
            (None, Some(t)) => {
                let d: Vec<f64> = mean_of(t)
                    .iter()
                    .zip(mean_of(&self.source))
                    .map(|(a, b)| a - b)
                    .collect();
                d.iter().any(|v| *v != 0.0).then_some(d)
            }
            (None, None) => None,
        };
        Ok(Models {
            source: self.source.clone(),
            target: self.target.clone(),
            uncond,
            edit_direction,
        })
    }
}

impl From<Testbed> for Models {
    fn from(tb: Testbed) -> Self {
        Models {
            source: tb.source,
            target: Some(tb.target),
            uncond: tb.uncond,
            edit_direction: Some(tb.edit_direction),
        }
    }
}

/// One sweep axis. Leaving out the values selects the preset for that axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    NSteps {
        #[serde(default)]
        values: Option<Vec<usize>>,
    },
    K {
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
    /// Absolute midpoints; the preset uses `int(f·T)`.
    T0 {
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
    InputScaleB {
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
    /// Full matrix of inversion and reverse guidance scales.
    Guidance {
        #[serde(default)]
        w_invert: Option<Vec<f64>>,
        #[serde(default)]
        w_reverse: Option<Vec<f64>>,
    },
    Family {
        #[serde(default)]
        values: Option<Vec<Family>>,
    },
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::NSteps { .. } => "n_steps",
            Sweep::K { .. } => "k",
            Sweep::T0 { .. } => "t0",
            Sweep::InputScaleB { .. } => "input_scale_b",
            Sweep::Guidance { .. } => "guidance",
            Sweep::Family { .. } => "family",
        }
    }
}

/// A single configuration produced by expanding a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: Option<String>,
    pub axis_value: Option<f64>,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerConfig,
}

fn non_empty<T: Clone>(axis: &str, given: &Option<Vec<T>>, preset: Vec<T>) -> Result<Vec<T>> {
    match given {
        Some(v) if v.is_empty() => Err(Error::validation(format!("sweep axis {axis} is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(preset),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelsConfig>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    /// Range and sample count for `singularity-scan`; defaults to
    /// `[1e-6, T]` with 100 points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linearity_window: Option<(f64, f64)>,
    /// PSNR peak value; defaults to the source model's data range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_max_val: Option<f64>,
    /// Also write full trajectory states in the binary format.
    #[serde(default)]
    pub dump_states: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// A scenario on the two-mode testbed with default sampler settings.
    pub fn new(name: impl Into<String>, schedule: ScheduleSpec, seeds: Vec<u64>) -> Self {
        ScenarioConfig {
            version: CONFIG_VERSION,
            name: name.into(),
            schedule,
            sampler: SamplerConfig::default(),
            models: None,
            seeds,
            sweep: None,
            scan: None,
            linearity_window: None,
            psnr_max_val: None,
            dump_states: false,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.version == CONFIG_VERSION, || {
            format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version)
        })?;
        ensure(!self.name.is_empty(), || "scenario name must not be empty".into())?;
        ensure(
            !self.name.contains(['/', '\\']) && self.name != "." && self.name != "..",
            || format!("scenario name {:?} is not a valid directory name", self.name),
        )?;
        ensure(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        self.schedule.validate()?;
        if let Some(w) = self.linearity_window {
            ensure(0.0 <= w.0 && w.0 < w.1 && w.1 <= 1.0, || {
                format!("linearity window {w:?} must satisfy 0 <= lo < hi <= 1")
            })?;
        }
        if let Some(m) = self.psnr_max_val {
            ensure(m.is_finite() && m > 0.0, || "psnr_max_val must be positive".into())?;
        }
        self.models()?;
        for p in self.points()? {
            p.schedule.validate()?;
            p.sampler.validate(p.schedule.t_max)?;
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Models> {
        match &self.models {
            Some(m) => m.resolve(),
            None => Ok(Testbed::two_mode().into()),
        }
    }

    pub fn window(&self) -> (f64, f64) {
        self.linearity_window.unwrap_or(DEFAULT_LINEARITY_WINDOW)
    }

    pub fn scan(&self) -> ScanConfig {
        self.scan.unwrap_or(ScanConfig {
            t_min: 1e-6,
            t_max: f64::from(self.schedule.t_max),
            n: 100,
        })
    }

    /// Expands the sweep into concrete configurations, in axis order. A
    /// scenario without a sweep has a single point.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let base = |axis_value: Option<f64>| SweepPoint {
            axis: self.sweep.as_ref().map(|s| s.axis().to_string()),
            axis_value,
            schedule: self.schedule.clone(),
            sampler: self.sampler.clone(),
        };
        let Some(sweep) = &self.sweep else {
            return Ok(vec![base(None)]);
        };
        let t_max = f64::from(self.schedule.t_max);
        let logistic_only = |axis: &str| {
            ensure(self.schedule.family == Family::Logistic, || {
                format!("sweep axis {axis} applies to the logistic family only")
            })
        };
        let points = match sweep {
            Sweep::NSteps { values } => non_empty("n_steps", values, N_STEPS_PRESET.to_vec())?
                .into_iter()
                .map(|n| {
                    let mut p = base(Some(n as f64));
                    p.sampler.n_steps = n;
                    p
                })
                .collect(),
            Sweep::K { values } => {
                logistic_only("k")?;
                non_empty("k", values, K_PRESET.to_vec())?
                    .into_iter()
                    .map(|k| {
                        let mut p = base(Some(k));
                        p.schedule.k = k;
                        p
                    })
                    .collect()
            }
            Sweep::T0 { values } => {
                logistic_only("t0")?;
                let preset = T0_FRACTION_PRESET
                    .iter()
                    .map(|f| (f * t_max).floor())
                    .collect();
                non_empty("t0", values, preset)?
                    .into_iter()
                    .map(|t0| {
                        let mut p = base(Some(t0));
                        p.schedule.t0 = Some(t0);
                        p
                    })
                    .collect()
            }
            Sweep::InputScaleB { values } => {
                non_empty("input_scale_b", values, input_scale_preset())?
                    .into_iter()
                    .map(|b| {
                        let mut p = base(Some(b));
                        p.sampler.input_scale_b = b;
                        p
                    })
                    .collect()
            }
            Sweep::Guidance {
                w_invert,
                w_reverse,
            } => {
                let wi = non_empty("w_invert", w_invert, W_INVERT_PRESET.to_vec())?;
                let wr = non_empty("w_reverse", w_reverse, W_REVERSE_PRESET.to_vec())?;
                let mut out = Vec::with_capacity(wi.len() * wr.len());
                for &a in &wi {
                    for &b in &wr {
                        let mut p = base(None);
                        p.sampler.w_invert = a;
                        p.sampler.w_reverse = b;
                        out.push(p);
                    }
                }
                out
            }
            Sweep::Family { values } => non_empty("family", values, Family::ALL.to_vec())?
                .into_iter()
                .map(|f| {
                    let mut p = base(None);
                    p.schedule.family = f;
                    p
                })
                .collect(),
        };
        Ok(points)
    }
}

/// Parses a single scenario object or an array of them.
pub fn parse_scenarios(text: &str) -> Result<Vec<ScenarioConfig>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let scenarios = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<Vec<ScenarioConfig>, _>>()?,
        other => vec![serde_json::from_value(other)?],
    };
    ensure(!scenarios.is_empty(), || "config holds no scenarios".into())?;
    let mut names = HashSet::new();
    for s in &scenarios {
        ensure(names.insert(s.name.as_str()), || {
            format!("duplicate scenario name {:?}", s.name)
        })?;
        s.validate()?;
    }
    Ok(scenarios)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = std::fs::read_to_string(path)?;
    parse_scenarios(&text)
}
