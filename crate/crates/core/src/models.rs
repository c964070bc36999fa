//! Analytic data distributions whose optimal noise predictor has a closed
//! form. They stand in for a trained network so sampler behavior can be
//! checked exactly.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_len, Error, Result};
use crate::rng::stream_rng;

const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PointMass,
    Gaussian,
    GaussianMixture,
}

/// One isotropic Gaussian component; `variance` is per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: ModelKind,
    dim: usize,
    components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition_label: Option<String>,
}

/// A validated analytic model. Deserializing runs the same validation as
/// the constructors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct AnalyticModel {
    kind: ModelKind,
    dim: usize,
    components: Vec<Component>,
    condition_label: Option<String>,
}

impl TryFrom<RawModel> for AnalyticModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        AnalyticModel::new(raw.kind, raw.dim, raw.components, raw.condition_label)
    }
}

impl From<AnalyticModel> for RawModel {
    fn from(m: AnalyticModel) -> Self {
        RawModel {
            kind: m.kind,
            dim: m.dim,
            components: m.components,
            condition_label: m.condition_label,
        }
    }
}

impl AnalyticModel {
    pub fn new(
        kind: ModelKind,
        dim: usize,
        components: Vec<Component>,
        condition_label: Option<String>,
    ) -> Result<Self> {
        ensure(dim > 0, || "model dim must be positive".into())?;
        ensure(!components.is_empty(), || "model needs at least one component".into())?;
        match kind {
            ModelKind::PointMass | ModelKind::Gaussian => ensure(components.len() == 1, || {
                format!("{kind:?} takes exactly one component, got {}", components.len())
            })?,
            ModelKind::GaussianMixture => {}
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            ensure(c.weight.is_finite() && c.weight > 0.0, || {
                format!("component {i}: weight must be positive, got {}", c.weight)
            })?;
            ensure_len(&format!("component {i} mean"), c.mean.len(), dim)?;
            ensure(c.mean.iter().all(|m| m.is_finite()), || {
                format!("component {i}: mean has non-finite entries")
            })?;
            ensure(c.variance.is_finite() && c.variance >= 0.0, || {
                format!("component {i}: variance must be non-negative, got {}", c.variance)
            })?;
            if kind == ModelKind::PointMass {
                ensure(c.variance == 0.0, || "point mass variance must be 0".into())?;
            } else {
                ensure(c.variance > 0.0, || {
                    format!("component {i}: variance 0 is reserved for point_mass")
                })?;
            }
            total += c.weight;
        }
        ensure((total - 1.0).abs() <= WEIGHT_TOLERANCE, || {
            format!("component weights sum to {total}, expected 1")
        })?;
        Ok(AnalyticModel {
            kind,
            dim,
            components,
            condition_label,
        })
    }

    pub fn point_mass(mean: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            ModelKind::PointMass,
            dim,
            vec![Component {
                weight: 1.0,
                mean,
                variance: 0.0,
            }],
            None,
        )
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            ModelKind::Gaussian,
            dim,
            vec![Component {
                weight: 1.0,
                mean,
                variance,
            }],
            None,
        )
    }

    /// Equal-variance mixture from `(weight, mean)` pairs.
    pub fn mixture(parts: Vec<(f64, Vec<f64>)>, variance: f64) -> Result<Self> {
        let dim = parts.first().map_or(0, |(_, m)| m.len());
        let components = parts
            .into_iter()
            .map(|(weight, mean)| Component {
                weight,
                mean,
                variance,
            })
            .collect();
        Self::new(ModelKind::GaussianMixture, dim, components, None)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.condition_label = Some(label.into());
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn condition_label(&self) -> Option<&str> {
        self.condition_label.as_deref()
    }

    /// Per-coordinate variance of the data distribution, averaged over
    /// coordinates.
    pub fn data_variance(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.dim {
            let mean: f64 = self.components.iter().map(|c| c.weight * c.mean[j]).sum();
            let second: f64 = self
                .components
                .iter()
                .map(|c| c.weight * (c.variance + c.mean[j] * c.mean[j]))
                .sum();
            total += second - mean * mean;
        }
        (total / self.dim as f64).max(0.0)
    }

    /// Widest per-coordinate extent of the ±3σ envelope of all components.
    /// Falls back to 1 for a point mass, which has no spread.
    pub fn data_range(&self) -> f64 {
        let mut widest = 0.0f64;
        for j in 0..self.dim {
            let lo = self
                .components
                .iter()
                .map(|c| c.mean[j] - 3.0 * c.variance.sqrt())
                .fold(f64::INFINITY, f64::min);
            let hi = self
                .components
                .iter()
                .map(|c| c.mean[j] + 3.0 * c.variance.sqrt())
                .fold(f64::NEG_INFINITY, f64::max);
            widest = widest.max(hi - lo);
        }
        if widest > 0.0 {
            widest
        } else {
            1.0
        }
    }

    /// Optimal noise prediction `−√(1−ᾱ)·∇log p_t(x_t)` at noise level ᾱ.
    pub fn exact_eps(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.exact_eps_into(x_t, alpha_bar, &mut out)?;
        Ok(out)
    }

    pub fn exact_eps_into(&self, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) -> Result<()> {
        ensure_len("x_t", x_t.len(), self.dim)?;
        ensure_len("output", out.len(), self.dim)?;
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::domain(format!(
                "noise predictor undefined at alpha_bar = {alpha_bar}"
            )));
        }
        let sa = alpha_bar.sqrt();
        let noise = 1.0 - alpha_bar;
        let d = self.dim as f64;

        if self.components.len() == 1 {
            let c = &self.components[0];
            let v = alpha_bar * c.variance + noise;
            let scale = noise.sqrt() / v;
            for ((o, x), m) in out.iter_mut().zip(x_t).zip(&c.mean) {
                *o = scale * (x - sa * m);
            }
            return Ok(());
        }

        // log responsibilities, max-subtracted before exponentiating
        let mut log_r = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let v = alpha_bar * c.variance + noise;
            let sq: f64 = x_t
                .iter()
                .zip(&c.mean)
                .map(|(x, m)| {
                    let r = x - sa * m;
                    r * r
                })
                .sum();
            log_r.push(c.weight.ln() - 0.5 * sq / v - 0.5 * d * v.ln());
        }
        let max = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for l in log_r.iter_mut() {
            *l = (*l - max).exp();
            norm += *l;
        }

        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, r) in self.components.iter().zip(&log_r) {
            let v = alpha_bar * c.variance + noise;
            let f = r / norm / v;
            for ((o, x), m) in out.iter_mut().zip(x_t).zip(&c.mean) {
                *o += f * (x - sa * m);
            }
        }
        let s = noise.sqrt();
        out.iter_mut().for_each(|o| *o *= s);
        Ok(())
    }

    /// Draws `n` samples from a dedicated stream of `seed`.
    pub fn sample_x0(&self, seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| self.sample_with(&mut rng)).collect()
    }

    /// Picks a component by weight, then draws from it.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let w = WeightedIndex::new(self.components.iter().map(|c| c.weight))
                .expect("weights validated at construction");
            &self.components[w.sample(rng)]
        };
        let sd = c.variance.sqrt();
        c.mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect()
    }
}

/// Anything that predicts the noise in `x_t` at level ᾱ.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn predict_into(&self, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) -> Result<()>;

    fn predict(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.predict_into(x_t, alpha_bar, &mut out)?;
        Ok(out)
    }
}

impl NoisePredictor for AnalyticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_into(&self, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) -> Result<()> {
        self.exact_eps_into(x_t, alpha_bar, out)
    }
}

/// Classifier-free guidance over a pair of analytic models.
#[derive(Debug, Clone, Copy)]
pub struct Guided<'a> {
    pub uncond: &'a AnalyticModel,
    pub cond: &'a AnalyticModel,
    pub w: f64,
}

impl<'a> Guided<'a> {
    pub fn new(uncond: &'a AnalyticModel, cond: &'a AnalyticModel, w: f64) -> Result<Self> {
        ensure(uncond.dim == cond.dim, || {
            format!("guidance models differ in dim: {} vs {}", uncond.dim, cond.dim)
        })?;
        ensure(w.is_finite(), || format!("guidance scale must be finite, got {w}"))?;
        Ok(Guided { uncond, cond, w })
    }
}

impl NoisePredictor for Guided<'_> {
    fn dim(&self) -> usize {
        self.uncond.dim
    }

    fn predict_into(&self, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) -> Result<()> {
        self.uncond.exact_eps_into(x_t, alpha_bar, out)?;
        if self.w == 0.0 || std::ptr::eq(self.uncond, self.cond) {
            return Ok(());
        }
        let cond = self.cond.exact_eps(x_t, alpha_bar)?;
        for (o, c) in out.iter_mut().zip(&cond) {
            *o += self.w * (c - *o);
        }
        Ok(())
    }
}

/// `ε̂_uncond + w·(ε̂_cond − ε̂_uncond)`.
pub fn guided_eps(
    uncond: &AnalyticModel,
    cond: &AnalyticModel,
    x_t: &[f64],
    alpha_bar: f64,
    w: f64,
) -> Result<Vec<f64>> {
    Guided::new(uncond, cond, w)?.predict(x_t, alpha_bar)
}

/// The two-mode editing testbed: a source mixture with modes at ±a·e₁, a
/// target that is the source shifted along e₂, and an unconditional model
/// that is the equal-weight union of both.
#[derive(Debug, Clone, PartialEq)]
pub struct Testbed {
    pub source: AnalyticModel,
    pub target: AnalyticModel,
    pub uncond: AnalyticModel,
    pub edit_direction: Vec<f64>,
}

impl Testbed {
    pub const DIM: usize = 8;
    pub const SEPARATION: f64 = 1.5;
    pub const VARIANCE: f64 = 0.25;
    pub const SHIFT: f64 = 2.0;

    pub fn two_mode() -> Self {
        Self::with_params(Self::DIM, Self::SEPARATION, Self::VARIANCE, Self::SHIFT)
            .expect("default testbed parameters are valid")
    }

    pub fn with_params(dim: usize, separation: f64, variance: f64, shift: f64) -> Result<Self> {
        ensure(dim >= 2, || format!("testbed needs dim >= 2, got {dim}"))?;
        let axis = |j: usize, v: f64| {
            let mut e = vec![0.0; dim];
            e[j] = v;
            e
        };
        let plus = axis(0, separation);
        let minus = axis(0, -separation);
        let moved = |m: &[f64]| {
            let mut m = m.to_vec();
            m[1] += shift;
            m
        };
        let source =
            AnalyticModel::mixture(vec![(0.5, plus.clone()), (0.5, minus.clone())], variance)?
                .with_label("source");
        let target =
            AnalyticModel::mixture(vec![(0.5, moved(&plus)), (0.5, moved(&minus))], variance)?
                .with_label("target");
        let uncond = AnalyticModel::mixture(
            vec![
                (0.25, plus.clone()),
                (0.25, minus.clone()),
                (0.25, moved(&plus)),
                (0.25, moved(&minus)),
            ],
            variance,
        )?;
        Ok(Testbed {
            source,
            target,
            uncond,
            edit_direction: axis(1, 1.0),
        })
    }
}
