//! Noise schedules as continuous ᾱ(t) functions on `[0, T]`, plus their
//! tabulated form.
//!
//! Four families are supported:
//!
//! - **Scaled linear**: per-step betas `β_i = 0.1/T + 19.9·i/(T(T−1))`, so
//!   `β_0 = 0.1/T` and `β_{T−1} = 20/T`. ᾱ at integer `t` is the exact
//!   product `Π_{i=1..t} (1 − β_i)`. Between integers the log-product is
//!   interpolated linearly, which keeps ᾱ continuous and monotone. The
//!   exponential form `exp(−0.1t/T − 19.9·t(t+1)/(2T(T−1)))` obtained from
//!   `log(1 − x) ≈ −x` is available through [`Schedule::alpha_bar_smooth`]
//!   and is what the calculus module differentiates.
//! - **Cosine**: `f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
//! - **Sigmoid**: the shifted-sigmoid interpolation
//!   `(σ(e/τ) − σ(((t/T)(e − s) + s)/τ)) / (σ(e/τ) − σ(s/τ))`, clipped
//!   below at [`SIGMOID_FLOOR`].
//! - **Logistic**: `σ(−k(t − t0))` (decreasing), or the printed increasing
//!   form `σ(k(t − t0))` behind [`Orientation::VerbatimIncreasing`].
//!
//! An optional affine normalization pins ᾱ(T) to a target while leaving
//! ᾱ(0) untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const DEFAULT_K: f64 = 0.015;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Default logistic midpoint as a fraction of `T`.
pub const MIDPOINT_FRACTION: f64 = 0.6;
/// The alternative midpoint fraction used in the derivative worked example.
pub const MIDPOINT_FRACTION_ALT: f64 = 0.3;
/// Upper clamp on tabulated betas.
pub const BETA_MAX: f64 = 0.999;
/// The sigmoid family reaches ᾱ = 0 at t = T; it is clipped here instead.
pub const SIGMOID_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ScaledLinear,
    Cosine,
    Sigmoid,
    Logistic,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::ScaledLinear,
        Family::Cosine,
        Family::Sigmoid,
        Family::Logistic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ScaledLinear => "scaled_linear",
            Family::Cosine => "cosine",
            Family::Sigmoid => "sigmoid",
            Family::Logistic => "logistic",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown schedule family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// ᾱ falls with t.
    #[default]
    Decreasing,
    /// The logistic curve exactly as printed, rising with t. Logistic only.
    VerbatimIncreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Affine rescaling that keeps ᾱ(0) and moves ᾱ(T) to `alpha_bar_at_end`.
    Affine { alpha_bar_at_end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmoidParams {
    pub start: f64,
    pub end: f64,
    pub tau: f64,
}

impl Default for SigmoidParams {
    fn default() -> Self {
        Self {
            start: -3.0,
            end: 3.0,
            tau: 1.0,
        }
    }
}

fn default_k() -> f64 {
    DEFAULT_K
}

fn default_s() -> f64 {
    DEFAULT_COSINE_OFFSET
}

/// Schedule family plus parameters. The single source of ᾱ values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub family: Family,
    /// Total diffusion span `T`.
    #[serde(rename = "T")]
    pub t_max: u32,
    /// Logistic steepness.
    #[serde(default = "default_k")]
    pub k: f64,
    /// Logistic midpoint; `None` means `int(0.6·T)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    /// Cosine offset.
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub sigmoid: SigmoidParams,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default)]
    pub normalization: Normalization,
}

impl ScheduleSpec {
    pub fn new(family: Family, t_max: u32) -> Self {
        Self {
            family,
            t_max,
            k: DEFAULT_K,
            t0: None,
            s: DEFAULT_COSINE_OFFSET,
            sigmoid: SigmoidParams::default(),
            orientation: Orientation::Decreasing,
            normalization: Normalization::None,
        }
    }

    pub fn scaled_linear(t_max: u32) -> Self {
        Self::new(Family::ScaledLinear, t_max)
    }

    pub fn cosine(t_max: u32) -> Self {
        Self::new(Family::Cosine, t_max)
    }

    pub fn sigmoid(t_max: u32) -> Self {
        Self::new(Family::Sigmoid, t_max)
    }

    pub fn logistic(t_max: u32) -> Self {
        Self::new(Family::Logistic, t_max)
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn with_t0(mut self, t0: f64) -> Self {
        self.t0 = Some(t0);
        self
    }

    /// Sets the midpoint to `int(fraction·T)`.
    pub fn with_t0_fraction(mut self, fraction: f64) -> Self {
        self.t0 = Some((fraction * f64::from(self.t_max)).floor());
        self
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn midpoint(&self) -> f64 {
        self.t0
            .unwrap_or_else(|| (MIDPOINT_FRACTION * f64::from(self.t_max)).floor())
    }

    pub fn validate(&self) -> Result<()> {
        Schedule::new(self.clone()).map(|_| ())
    }
}

/// Per-step beta of the scaled-linear schedule at index `i`.
pub fn scaled_linear_beta(t_max: u32, i: u32) -> f64 {
    let t = f64::from(t_max);
    0.1 / t + 19.9 * f64::from(i) / (t * (t - 1.0))
}

/// Exact scaled-linear ᾱ at integer `t`: `Π_{i=1..t} (1 − β_i)`.
pub fn scaled_linear_product(t_max: u32, t: u32) -> f64 {
    (1..=t).map(|i| 1.0 - scaled_linear_beta(t_max, i)).product()
}

/// Exponent of the first-order Taylor approximation of the scaled-linear ᾱ.
pub(crate) fn scaled_linear_log(t_max: u32, t: f64) -> f64 {
    let big = f64::from(t_max);
    -0.1 * t / big - 19.9 * t * (t + 1.0) / (2.0 * big * (big - 1.0))
}

/// Scaled-linear ᾱ under `log(1 − x) ≈ −x`, defined for real `t`.
pub fn scaled_linear_exponential(t_max: u32, t: f64) -> f64 {
    scaled_linear_log(t_max, t).exp()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A validated [`ScheduleSpec`] with any precomputation it needs.
///
/// Immutable after construction; evaluation is pure.
#[derive(Debug, Clone)]
pub struct Schedule {
    spec: ScheduleSpec,
    t0: f64,
    /// Cumulative `log(1 − β_i)` for the scaled-linear family, indices `0..=T`.
    log_cumprod: Vec<f64>,
    affine: Option<Affine>,
    /// Affine constants for the exact (product) scaled-linear form.
    affine_discrete: Option<Affine>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine {
    pub raw_end: f64,
    pub one_minus_raw_start: f64,
    pub target: f64,
    pub scale: f64,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        ensure(spec.t_max >= 2, || {
            format!("T must be at least 2, got {}", spec.t_max)
        })?;
        let big = f64::from(spec.t_max);
        ensure(spec.k.is_finite() && spec.k > 0.0, || {
            format!("k must be positive, got {}", spec.k)
        })?;
        let t0 = spec.midpoint();
        ensure(t0.is_finite() && t0 > 0.0 && t0 < big, || {
            format!("t0 must lie in (0, T={big}), got {t0}")
        })?;
        ensure(spec.s.is_finite() && spec.s >= 0.0, || {
            format!("cosine offset s must be non-negative, got {}", spec.s)
        })?;
        let sp = spec.sigmoid;
        ensure(
            sp.start.is_finite() && sp.end.is_finite() && sp.start < sp.end,
            || format!("sigmoid start must be below end, got {} and {}", sp.start, sp.end),
        )?;
        ensure(sp.tau.is_finite() && sp.tau > 0.0, || {
            format!("sigmoid tau must be positive, got {}", sp.tau)
        })?;
        ensure(
            spec.orientation == Orientation::Decreasing || spec.family == Family::Logistic,
            || "verbatim increasing orientation applies to the logistic family only".into(),
        )?;

        let log_cumprod = if spec.family == Family::ScaledLinear {
            let worst = scaled_linear_beta(spec.t_max, spec.t_max);
            ensure(worst < 1.0, || {
                format!(
                    "scaled-linear betas exceed 1 for T={} (β_T = {worst})",
                    spec.t_max
                )
            })?;
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(spec.t_max as usize + 1);
            out.push(0.0);
            for i in 1..=spec.t_max {
                acc += (-scaled_linear_beta(spec.t_max, i)).ln_1p();
                out.push(acc);
            }
            out
        } else {
            Vec::new()
        };

        let mut schedule = Schedule {
            spec,
            t0,
            log_cumprod,
            affine: None,
            affine_discrete: None,
        };

        if let Normalization::Affine { alpha_bar_at_end } = schedule.spec.normalization {
            ensure(
                alpha_bar_at_end.is_finite() && (0.0..1.0).contains(&alpha_bar_at_end),
                || format!("affine target must lie in [0, 1), got {alpha_bar_at_end}"),
            )?;
            let raw_start = schedule.raw_smooth(0.0);
            let one_minus_raw_start = schedule.raw_one_minus_smooth(0.0);
            let make = |raw_end: f64| -> Result<Affine> {
                ensure(raw_start != raw_end, || {
                    "affine normalization needs ᾱ(0) != ᾱ(T)".into()
                })?;
                Ok(Affine {
                    raw_end,
                    one_minus_raw_start,
                    target: alpha_bar_at_end,
                    scale: (raw_start - alpha_bar_at_end) / (raw_start - raw_end),
                })
            };
            schedule.affine = Some(make(schedule.raw_smooth(big))?);
            schedule.affine_discrete = Some(match schedule.spec.family {
                Family::ScaledLinear => make(schedule.scaled_linear_discrete(big))?,
                _ => make(schedule.raw_smooth(big))?,
            });
        }
        Ok(schedule)
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn t_max(&self) -> f64 {
        f64::from(self.spec.t_max)
    }

    /// Resolved logistic midpoint.
    pub fn midpoint(&self) -> f64 {
        self.t0
    }

    pub(crate) fn affine(&self) -> Option<Affine> {
        self.affine
    }

    pub(crate) fn check_domain(&self, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.t_max()).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "t = {t} outside [0, {}]",
                self.spec.t_max
            )))
        }
    }

    /// ᾱ(t). Scaled-linear uses the exact product at integer `t`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        let raw = match self.spec.family {
            Family::ScaledLinear => self.scaled_linear_discrete(t),
            _ => self.raw_smooth(t),
        };
        Ok(match self.affine_discrete {
            None => raw,
            Some(a) => a.target + (raw - a.raw_end) * a.scale,
        })
    }

    /// ᾱ(t) in its differentiable form: identical to [`Schedule::alpha_bar`]
    /// except for the scaled-linear family, which uses the exponential
    /// approximation.
    pub fn alpha_bar_smooth(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        let raw = self.raw_smooth(t);
        Ok(match self.affine {
            None => raw,
            Some(a) => a.target + (raw - a.raw_end) * a.scale,
        })
    }

    /// `1 − ᾱ(t)` for the smooth form, computed without cancellation near
    /// ᾱ = 1.
    pub fn one_minus_alpha_bar_smooth(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        let omr = self.raw_one_minus_smooth(t);
        Ok(match self.affine {
            None => omr,
            Some(a) => a.one_minus_raw_start + (omr - a.one_minus_raw_start) * a.scale,
        })
    }

    fn scaled_linear_discrete(&self, t: f64) -> f64 {
        let lo = t.floor();
        let frac = t - lo;
        let i = lo as usize;
        if frac == 0.0 {
            return self.log_cumprod[i].exp();
        }
        let a = self.log_cumprod[i];
        let b = self.log_cumprod[i + 1];
        ((1.0 - frac) * a + frac * b).exp()
    }

    fn cosine_angle(&self, t: f64) -> f64 {
        let s = self.spec.s;
        (t / self.t_max() + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2
    }

    fn sigmoid_arg(&self, t: f64) -> f64 {
        let p = self.spec.sigmoid;
        ((t / self.t_max()) * (p.end - p.start) + p.start) / p.tau
    }

    fn logistic_arg(&self, t: f64) -> f64 {
        match self.spec.orientation {
            Orientation::Decreasing => -self.spec.k * (t - self.t0),
            Orientation::VerbatimIncreasing => self.spec.k * (t - self.t0),
        }
    }

    pub(crate) fn raw_smooth(&self, t: f64) -> f64 {
        match self.spec.family {
            Family::ScaledLinear => scaled_linear_exponential(self.spec.t_max, t),
            Family::Cosine => {
                let c0 = self.cosine_angle(0.0).cos();
                let c = self.cosine_angle(t).cos();
                (c * c) / (c0 * c0)
            }
            Family::Sigmoid => {
                let p = self.spec.sigmoid;
                let v_start = sigmoid(p.start / p.tau);
                let v_end = sigmoid(p.end / p.tau);
                ((v_end - sigmoid(self.sigmoid_arg(t))) / (v_end - v_start)).max(SIGMOID_FLOOR)
            }
            Family::Logistic => sigmoid(self.logistic_arg(t)),
        }
    }

    pub(crate) fn raw_one_minus_smooth(&self, t: f64) -> f64 {
        match self.spec.family {
            Family::ScaledLinear => -scaled_linear_log(self.spec.t_max, t).exp_m1(),
            Family::Cosine => {
                let th0 = self.cosine_angle(0.0);
                let th = self.cosine_angle(t);
                let c0 = th0.cos();
                (th - th0).sin() * (th + th0).sin() / (c0 * c0)
            }
            Family::Sigmoid => {
                let p = self.spec.sigmoid;
                let v_start = sigmoid(p.start / p.tau);
                let v_end = sigmoid(p.end / p.tau);
                ((sigmoid(self.sigmoid_arg(t)) - v_start) / (v_end - v_start))
                    .min(1.0 - SIGMOID_FLOOR)
            }
            Family::Logistic => sigmoid(-self.logistic_arg(t)),
        }
    }
}

/// ᾱ(t) for `spec`.
pub fn eval_alpha_bar(spec: &ScheduleSpec, t: f64) -> Result<f64> {
    Schedule::new(spec.clone())?.alpha_bar(t)
}

/// SNR at `t = T`: `ᾱ(T)/(1 − ᾱ(T))`.
pub fn terminal_snr(spec: &ScheduleSpec) -> Result<f64> {
    let schedule = Schedule::new(spec.clone())?;
    let a = schedule.alpha_bar(schedule.t_max())?;
    Ok(a / (1.0 - a))
}

/// Integer timesteps `0, 1, …, T`.
pub fn integer_grid(t_max: u32) -> Vec<f64> {
    (0..=t_max).map(f64::from).collect()
}

/// `n + 1` evenly spaced points from 0 to `T` inclusive.
pub fn uniform_grid(t_max: u32, n: usize) -> Vec<f64> {
    let n = n.max(1);
    let big = f64::from(t_max);
    (0..=n)
        .map(|i| if i == n { big } else { big * i as f64 / n as f64 })
        .collect()
}

/// Tabulated schedule on a discrete grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    pub spec: ScheduleSpec,
    pub timesteps: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
    pub logsnr: Vec<f64>,
}

impl ScheduleTable {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn snr(&self, i: usize) -> f64 {
        let a = self.alpha_bar[i];
        a / (1.0 - a)
    }
}

/// Tabulates ᾱ, β and logSNR on `grid`.
///
/// `β_i = 1 − ᾱ(t_i)/ᾱ(t_{i−1})` and `β_0 = 1 − ᾱ(t_0)`, clamped to
/// [`BETA_MAX`]. When the first grid point has ᾱ = 1 exactly, the
/// scaled-linear family reports its first per-step beta `0.1/T` there
/// instead of zero.
pub fn build_table(spec: &ScheduleSpec, grid: &[f64]) -> Result<ScheduleTable> {
    let schedule = Schedule::new(spec.clone())?;
    build_table_with(&schedule, grid)
}

pub fn build_table_with(schedule: &Schedule, grid: &[f64]) -> Result<ScheduleTable> {
    ensure(!grid.is_empty(), || "grid must not be empty".into())?;
    ensure(grid.windows(2).all(|w| w[0] < w[1]), || {
        "grid must be strictly increasing".into()
    })?;
    for &t in grid {
        schedule
            .check_domain(t)
            .map_err(|e| Error::validation(e.to_string()))?;
    }

    let alpha_bar = grid
        .iter()
        .map(|&t| schedule.alpha_bar(t))
        .collect::<Result<Vec<_>>>()?;
    let mut beta = Vec::with_capacity(grid.len());
    for (i, &a) in alpha_bar.iter().enumerate() {
        let b = if i == 0 {
            if a == 1.0 && schedule.family() == Family::ScaledLinear {
                scaled_linear_beta(schedule.spec().t_max, grid[0] as u32)
            } else {
                1.0 - a
            }
        } else {
            1.0 - a / alpha_bar[i - 1]
        };
        beta.push(b.min(BETA_MAX));
    }
    let logsnr = alpha_bar.iter().map(|&a| a.ln() - (1.0 - a).ln()).collect();
    Ok(ScheduleTable {
        spec: schedule.spec().clone(),
        timesteps: grid.to_vec(),
        alpha_bar,
        beta,
        logsnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_starts_at_one() {
        assert_eq!(eval_alpha_bar(&ScheduleSpec::cosine(1000), 0.0).unwrap(), 1.0);
    }

    #[test]
    fn logistic_midpoint_is_half() {
        let spec = ScheduleSpec::logistic(100).with_t0(60.0);
        assert_eq!(eval_alpha_bar(&spec, 60.0).unwrap(), 0.5);
        assert_eq!(ScheduleSpec::logistic(100).midpoint(), 60.0);
    }

    #[test]
    fn scaled_linear_first_product_term() {
        let spec = ScheduleSpec::scaled_linear(100);
        let beta1 = 0.1 / 100.0 + 19.9 / (100.0 * 99.0);
        let got = eval_alpha_bar(&spec, 1.0).unwrap();
        assert!((got - (1.0 - beta1)).abs() < 1e-15);
    }

    #[test]
    fn verbatim_logistic_at_origin() {
        let spec = ScheduleSpec::logistic(100)
            .with_t0(30.0)
            .with_orientation(Orientation::VerbatimIncreasing);
        // 1/(1+e^0.45), high-precision reference rounded to f64
        let reference = 0.389_360_766_050_778;
        let got = eval_alpha_bar(&spec, 0.0).unwrap();
        assert!((got - reference).abs() < 1e-15, "{got}");
    }

    #[test]
    fn out_of_range_t_is_domain_error() {
        let spec = ScheduleSpec::cosine(100);
        assert!(matches!(eval_alpha_bar(&spec, -0.5), Err(Error::Domain(_))));
        assert!(matches!(eval_alpha_bar(&spec, 100.5), Err(Error::Domain(_))));
        assert!(matches!(eval_alpha_bar(&spec, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            ScheduleSpec::logistic(100).with_k(0.0),
            ScheduleSpec::logistic(100).with_t0(0.0),
            ScheduleSpec::logistic(100).with_t0(100.0),
            ScheduleSpec::logistic(1),
            ScheduleSpec::scaled_linear(10),
            ScheduleSpec::cosine(100).with_orientation(Orientation::VerbatimIncreasing),
            ScheduleSpec::logistic(100)
                .with_normalization(Normalization::Affine { alpha_bar_at_end: 1.0 }),
            ScheduleSpec {
                s: -0.1,
                ..ScheduleSpec::cosine(100)
            },
        ];
        for spec in bad {
            assert!(
                matches!(eval_alpha_bar(&spec, 0.0), Err(Error::Validation(_))),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn scaled_linear_table_endpoints() {
        for t_max in [100u32, 1000] {
            let spec = ScheduleSpec::scaled_linear(t_max);
            let grid: Vec<f64> = (0..t_max).map(f64::from).collect();
            let table = build_table(&spec, &grid).unwrap();
            let big = f64::from(t_max);
            assert!((table.beta[0] - 0.1 / big).abs() < 1e-12);
            assert!((table.beta[t_max as usize - 1] - 20.0 / big).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_table() {
        for family in [Family::Cosine, Family::Logistic, Family::Sigmoid] {
            let spec = ScheduleSpec::new(family, 100);
            let table = build_table(&spec, &[0.0]).unwrap();
            assert_eq!(table.len(), 1);
            assert_eq!(table.beta[0], 1.0 - table.alpha_bar[0]);
        }
    }

    #[test]
    fn cosine_betas_clamped() {
        let spec = ScheduleSpec::cosine(1000);
        let table = build_table(&spec, &integer_grid(1000)).unwrap();
        let mut worst = 0.0f64;
        for &b in &table.beta {
            assert!(b <= BETA_MAX);
            worst = worst.max(b);
        }
        // the final step hits the clamp
        assert_eq!(worst, BETA_MAX);
    }

    #[test]
    fn non_monotone_grid_rejected() {
        let spec = ScheduleSpec::cosine(100);
        assert!(matches!(
            build_table(&spec, &[0.0, 2.0, 1.0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            build_table(&spec, &[0.0, 0.0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(build_table(&spec, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn terminal_snr_values() {
        let logistic = ScheduleSpec::logistic(100);
        let got = terminal_snr(&logistic).unwrap();
        // σ(−0.6)/(1 − σ(−0.6)) = e^{−0.6}
        assert!((got - 0.548_811_636_094_026_4).abs() < 1e-15);

        let pinned = ScheduleSpec::logistic(100)
            .with_normalization(Normalization::Affine { alpha_bar_at_end: 0.0 });
        assert_eq!(terminal_snr(&pinned).unwrap(), 0.0);
    }

    #[test]
    fn terminal_snr_ordering_at_defaults() {
        // With the un-normalized decreasing logistic curve, ᾱ(T) = σ(−0.6)
        // stays far above the cosine endpoint, whose ᾱ(T) vanishes.
        let logistic = terminal_snr(&ScheduleSpec::logistic(100)).unwrap();
        let cosine = terminal_snr(&ScheduleSpec::cosine(100)).unwrap();
        assert!(cosine < 1e-30);
        assert!(logistic > cosine);
        // Pinning the logistic endpoint below the cosine one flips the order.
        let pinned = ScheduleSpec::logistic(100)
            .with_normalization(Normalization::Affine { alpha_bar_at_end: 0.0 });
        assert!(terminal_snr(&pinned).unwrap() <= cosine);
    }

    #[test]
    fn affine_keeps_start_and_moves_end() {
        let spec = ScheduleSpec::logistic(100)
            .with_normalization(Normalization::Affine { alpha_bar_at_end: 0.05 });
        let raw = ScheduleSpec::logistic(100);
        assert!(
            (eval_alpha_bar(&spec, 0.0).unwrap() - eval_alpha_bar(&raw, 0.0).unwrap()).abs()
                < 1e-15
        );
        assert!((eval_alpha_bar(&spec, 100.0).unwrap() - 0.05).abs() < 1e-15);
        let s = Schedule::new(spec).unwrap();
        for t in [0.0, 10.0, 55.5, 100.0] {
            let a = s.alpha_bar_smooth(t).unwrap();
            let b = s.one_minus_alpha_bar_smooth(t).unwrap();
            assert!((a + b - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn one_minus_is_accurate_near_origin() {
        for family in Family::ALL {
            let s = Schedule::new(ScheduleSpec::new(family, 1000)).unwrap();
            for t in [0.0, 1e-9, 1e-3, 0.5, 999.0] {
                let a = s.alpha_bar_smooth(t).unwrap();
                let b = s.one_minus_alpha_bar_smooth(t).unwrap();
                assert!((a + b - 1.0).abs() < 1e-14, "{family} t={t}");
                assert!(b >= 0.0);
            }
        }
    }

    #[test]
    fn table_matches_pointwise_evaluation() {
        for family in Family::ALL {
            let spec = ScheduleSpec::new(family, 100);
            let grid: Vec<f64> = (0..=40).map(|i| f64::from(i) * 2.5).collect();
            let table = build_table(&spec, &grid).unwrap();
            for (t, a) in table.timesteps.iter().zip(&table.alpha_bar) {
                assert_eq!(*a, eval_alpha_bar(&spec, *t).unwrap());
            }
            assert!(table.logsnr.windows(2).all(|w| w[0] > w[1]), "{family}");
        }
    }

    /// The exponential form drops the `x²/2 + x³/3 + …` tail of
    /// `−log(1 − x)`, so it always over-estimates the product, by at most
    /// `exp(Σ x²/(2(1−x))) − 1` in relative terms.
    #[test]
    fn scaled_linear_product_vs_exponential_bound() {
        for t_max in [100u32, 1000] {
            let mut remainder = 0.0;
            for t in 0..=t_max {
                if t > 0 {
                    let x = scaled_linear_beta(t_max, t);
                    remainder += x * x / (2.0 * (1.0 - x));
                }
                let exact = scaled_linear_product(t_max, t);
                let approx = scaled_linear_exponential(t_max, f64::from(t));
                let rel = (approx - exact) / exact;
                assert!(rel >= -1e-12, "T={t_max} t={t}");
                assert!(rel <= remainder.exp_m1() * (1.0 + 1e-9) + 1e-12, "T={t_max} t={t}");
                if remainder <= 0.02f64.ln_1p() {
                    assert!(rel <= 0.02);
                }
            }
        }
    }

    #[test]
    fn scaled_linear_interpolates_between_integers() {
        let s = Schedule::new(ScheduleSpec::scaled_linear(1000)).unwrap();
        let a = s.alpha_bar(2.0).unwrap();
        let b = s.alpha_bar(3.0).unwrap();
        let mid = s.alpha_bar(2.5).unwrap();
        assert!((mid - (a * b).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn uniform_grid_endpoints() {
        let g = uniform_grid(100, 7);
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[7], 100.0);
        assert_eq!(integer_grid(100).len(), 101);
    }

    fn spec_strategy() -> impl Strategy<Value = ScheduleSpec> {
        (
            0usize..4,
            21u32..2000,
            0.001f64..0.2,
            0.05f64..0.95,
            0.0f64..0.1,
            prop::option::of(0.001f64..0.3),
        )
            .prop_map(|(fam, t_max, k, t0_frac, s, affine)| {
                let mut spec = ScheduleSpec::new(Family::ALL[fam], t_max)
                    .with_k(k)
                    .with_t0((t0_frac * f64::from(t_max)).max(0.5));
                spec.s = s;
                if let Some(target) = affine {
                    spec.normalization = Normalization::Affine {
                        alpha_bar_at_end: target,
                    };
                }
                spec
            })
            .prop_filter("normalized target must sit below ᾱ(0)", |spec| {
                match spec.normalization {
                    Normalization::None => true,
                    Normalization::Affine { alpha_bar_at_end } => {
                        let raw = ScheduleSpec {
                            normalization: Normalization::None,
                            ..spec.clone()
                        };
                        eval_alpha_bar(&raw, 0.0).unwrap() > alpha_bar_at_end
                    }
                }
            })
    }

    proptest! {
        #[test]
        fn alpha_bar_monotone_and_in_range(
            spec in spec_strategy(),
            u1 in 0.0f64..=1.0,
            u2 in 0.0f64..=1.0,
        ) {
            let big = f64::from(spec.t_max);
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            let s = Schedule::new(spec).unwrap();
            for form in [Schedule::alpha_bar, Schedule::alpha_bar_smooth] {
                let a = form(&s, lo * big).unwrap();
                let b = form(&s, hi * big).unwrap();
                prop_assert!(a >= b, "ᾱ({}) = {a} < ᾱ({}) = {b}", lo * big, hi * big);
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert!(b > 0.0 && b <= 1.0);
            }
        }
    }
}
