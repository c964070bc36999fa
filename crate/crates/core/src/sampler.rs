//! Forward closed form, DDIM reverse and inversion steps, trajectory loops
//! with guidance, trajectory-pinned reconstruction and a probability-flow
//! ODE reference integrator.
//!
//! All step formulas use the cumulative ᾱ. A state sitting at ᾱ = 1 has no
//! defined noise prediction, so the predictor is evaluated there at the
//! first grid level below 1 instead.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_len, Error, Result};
use crate::models::{AnalyticModel, Guided, NoisePredictor};
use crate::schedule::ScheduleTable;

/// Reference integrator steps per grid step when measuring local errors.
pub const LOCAL_ODE_SUBSTEPS: usize = 32;

fn default_n_steps() -> usize {
    50
}
fn default_step_offset() -> u32 {
    1
}
fn default_w_invert() -> f64 {
    3.5
}
fn default_w_reverse() -> f64 {
    7.5
}
fn default_b() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_step_offset")]
    pub step_offset: u32,
    #[serde(default = "default_w_invert")]
    pub w_invert: f64,
    #[serde(default = "default_w_reverse")]
    pub w_reverse: f64,
    #[serde(default = "default_b")]
    pub input_scale_b: f64,
    #[serde(default)]
    pub variance_normalize: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: default_n_steps(),
            eta: 0.0,
            step_offset: default_step_offset(),
            w_invert: default_w_invert(),
            w_reverse: default_w_reverse(),
            input_scale_b: default_b(),
            variance_normalize: false,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(n_steps: usize) -> Self {
        SamplerConfig {
            n_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self, t_max: u32) -> Result<()> {
        let n = self.n_steps;
        ensure(n >= 1, || "n_steps must be positive".into())?;
        ensure(n <= t_max as usize, || {
            format!("n_steps {n} exceeds T = {t_max}")
        })?;
        ensure(self.eta.is_finite() && self.eta >= 0.0, || {
            format!("eta must be non-negative, got {}", self.eta)
        })?;
        ensure(self.w_invert.is_finite() && self.w_reverse.is_finite(), || {
            "guidance scales must be finite".into()
        })?;
        ensure(self.input_scale_b.is_finite() && self.input_scale_b > 0.0, || {
            format!("input_scale_b must be positive, got {}", self.input_scale_b)
        })?;
        let last = (n - 1) as f64 * f64::from(t_max) / n as f64 + f64::from(self.step_offset);
        ensure(last <= f64::from(t_max), || {
            format!("step_offset {} pushes the last timestep past T", self.step_offset)
        })
    }

    /// Sampling grid with `n_steps + 1` points: `0` followed by
    /// `i·T/N + offset` for `i < N`, or `i·T/N` for `i ≤ N` when the offset
    /// is zero. T = 1000, N = 50 ends at 981.
    pub fn grid(&self, t_max: u32) -> Result<Vec<f64>> {
        self.validate(t_max)?;
        let n = self.n_steps;
        let stride = f64::from(t_max) / n as f64;
        let offset = f64::from(self.step_offset);
        Ok(if self.step_offset == 0 {
            (0..=n).map(|i| i as f64 * stride).collect()
        } else {
            std::iter::once(0.0)
                .chain((0..n).map(|i| i as f64 * stride + offset))
                .collect()
        })
    }
}

/// `x_t = √ᾱ·b·x0 + √(1−ᾱ)·ε`, optionally divided by its standard
/// deviation `√(ᾱb²σ0² + 1−ᾱ)`.
pub fn forward_closed_form(
    x0: &[f64],
    eps: &[f64],
    alpha_bar: f64,
    b: f64,
    normalize: bool,
    sigma0_sq: f64,
) -> Result<Vec<f64>> {
    ensure_len("eps", eps.len(), x0.len())?;
    ensure(b.is_finite() && b > 0.0, || format!("input scale b must be positive, got {b}"))?;
    ensure((0.0..=1.0).contains(&alpha_bar), || {
        format!("alpha_bar must lie in [0, 1], got {alpha_bar}")
    })?;
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let norm = if normalize {
        ensure(sigma0_sq >= 0.0, || "data variance must be non-negative".into())?;
        let v = alpha_bar * b * b * sigma0_sq + 1.0 - alpha_bar;
        ensure(v > 0.0, || "normalization variance is zero".into())?;
        v.sqrt()
    } else {
        1.0
    };
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| (sa * b * x + sn * e) / norm)
        .collect())
}

fn check_level(name: &str, a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in (0, 1], got {a}")))
    }
}

/// Standard deviation of the injected noise: `eta` times the DDPM
/// posterior standard deviation.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt()
        * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

/// One DDIM step from ᾱ_t to ᾱ_prev. `noise` is required when the step
/// injects noise (`eta > 0`).
pub fn ddim_reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    ensure_len("eps_hat", eps_hat.len(), x_t.len())?;
    check_level("alpha_bar_t", alpha_bar_t)?;
    check_level("alpha_bar_prev", alpha_bar_prev)?;
    ensure(eta.is_finite() && eta >= 0.0, || format!("eta must be non-negative, got {eta}"))?;
    if alpha_bar_prev == alpha_bar_t {
        return Ok(x_t.to_vec());
    }
    let sigma = ddim_sigma(alpha_bar_t, alpha_bar_prev, eta);
    if sigma.is_nan() {
        return Err(Error::domain(format!(
            "eta = {eta} is undefined for alpha_bar {alpha_bar_t} -> {alpha_bar_prev}"
        )));
    }
    let mut dir_sq = 1.0 - alpha_bar_prev - sigma * sigma;
    if dir_sq < 0.0 {
        if dir_sq > -1e-15 {
            dir_sq = 0.0;
        } else {
            return Err(Error::domain(format!(
                "eta = {eta} too large for alpha_bar {alpha_bar_t} -> {alpha_bar_prev}"
            )));
        }
    }
    let ratio = (alpha_bar_prev / alpha_bar_t).sqrt();
    let eps_coeff = dir_sq.sqrt() - ratio * (1.0 - alpha_bar_t).sqrt();
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| ratio * x + eps_coeff * e)
        .collect();
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::validation("eta > 0 needs a noise vector"))?;
        ensure_len("noise", noise.len(), x_t.len())?;
        for (o, z) in out.iter_mut().zip(noise) {
            *o += sigma * z;
        }
    }
    Ok(out)
}

/// One DDIM inversion step from ᾱ_prev to ᾱ_t, holding `eps_hat` fixed.
pub fn ddim_invert_step(
    x_prev: &[f64],
    eps_hat: &[f64],
    alpha_bar_prev: f64,
    alpha_bar_t: f64,
) -> Result<Vec<f64>> {
    ensure_len("eps_hat", eps_hat.len(), x_prev.len())?;
    check_level("alpha_bar_prev", alpha_bar_prev)?;
    check_level("alpha_bar_t", alpha_bar_t)?;
    let ratio = (alpha_bar_t / alpha_bar_prev).sqrt();
    let eps_coeff =
        alpha_bar_t.sqrt() * ((1.0 / alpha_bar_t - 1.0).sqrt() - (1.0 / alpha_bar_prev - 1.0).sqrt());
    Ok(x_prev
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| ratio * x + eps_coeff * e)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inversion,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub alpha_bar: f64,
    pub x: Vec<f64>,
    /// Prediction at this state; it drives the step that leaves the state.
    pub eps_hat: Vec<f64>,
}

/// States in execution order: ascending t for inversion, descending for
/// reverse runs. States live in the scaled input space (`b·x0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub direction: Direction,
    pub config: SamplerConfig,
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    pub fn last_state(&self) -> &[f64] {
        &self.records.last().expect("trajectory has states").x
    }

    /// Final state mapped back to data units by undoing the input scale.
    pub fn output(&self) -> Vec<f64> {
        let b = self.config.input_scale_b;
        self.last_state().iter().map(|x| x / b).collect()
    }
}

/// An unconditional/conditional model pair used for guidance.
#[derive(Debug, Clone, Copy)]
pub struct ModelPair<'a> {
    pub uncond: &'a AnalyticModel,
    pub cond: &'a AnalyticModel,
}

impl<'a> ModelPair<'a> {
    pub fn new(uncond: &'a AnalyticModel, cond: &'a AnalyticModel) -> Self {
        ModelPair { uncond, cond }
    }

    pub fn guided(&self, w: f64) -> Result<Guided<'a>> {
        Guided::new(self.uncond, self.cond, w)
    }
}

/// Adapts the predictor to the scaled input. With variance normalization the
/// state is rescaled to the marginal standard deviation the model expects.
struct Scaled<P> {
    inner: P,
    b: f64,
    sigma0_sq: f64,
    normalize: bool,
}

impl<P: NoisePredictor> NoisePredictor for Scaled<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_into(&self, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) -> Result<()> {
        if !self.normalize || self.b == 1.0 {
            return self.inner.predict_into(x_t, alpha_bar, out);
        }
        let noise = 1.0 - alpha_bar;
        let model = (alpha_bar * self.sigma0_sq + noise).sqrt();
        let actual = (alpha_bar * self.b * self.b * self.sigma0_sq + noise).sqrt();
        let f = model / actual;
        let x: Vec<f64> = x_t.iter().map(|v| v * f).collect();
        self.inner.predict_into(&x, alpha_bar, out)
    }
}

fn scaled<'a>(pair: ModelPair<'a>, w: f64, config: &SamplerConfig) -> Result<Scaled<Guided<'a>>> {
    Ok(Scaled {
        inner: pair.guided(w)?,
        b: config.input_scale_b,
        sigma0_sq: pair.uncond.data_variance(),
        normalize: config.variance_normalize,
    })
}

/// Noise level at which to query the predictor for the state at index `i`.
fn predictor_level(alpha_bar: &[f64], i: usize) -> Result<f64> {
    if alpha_bar[i] < 1.0 {
        return Ok(alpha_bar[i]);
    }
    alpha_bar
        .iter()
        .copied()
        .find(|&a| a < 1.0)
        .ok_or_else(|| Error::domain("no grid level below alpha_bar = 1"))
}

fn check_table(table: &ScheduleTable, config: &SamplerConfig, dim: usize, x: &[f64]) -> Result<()> {
    let grid = config.grid(table.spec.t_max)?;
    ensure(grid == table.timesteps, || {
        format!(
            "table grid ({} points) does not match the sampler grid ({} points)",
            table.len(),
            grid.len()
        )
    })?;
    ensure_len("initial state", x.len(), dim)
}

fn invert_with(
    pred: &dyn NoisePredictor,
    x0: &[f64],
    table: &ScheduleTable,
    config: &SamplerConfig,
) -> Result<Trajectory> {
    let ab = &table.alpha_bar;
    let mut x: Vec<f64> = x0.iter().map(|v| v * config.input_scale_b).collect();
    let mut records = Vec::with_capacity(ab.len());
    for i in 0..ab.len() {
        let eps = pred.predict(&x, predictor_level(ab, i)?)?;
        let next = if i + 1 < ab.len() {
            Some(ddim_invert_step(&x, &eps, ab[i], ab[i + 1])?)
        } else {
            None
        };
        records.push(TrajectoryRecord {
            t: table.timesteps[i],
            alpha_bar: ab[i],
            x,
            eps_hat: eps,
        });
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Ok(Trajectory {
        direction: Direction::Inversion,
        config: config.clone(),
        records,
    })
}

/// Runs the reverse loop. `correction[i]` is added after the step that
/// lands on grid index `i`.
fn reverse_with(
    pred: &dyn NoisePredictor,
    x_start: &[f64],
    table: &ScheduleTable,
    eta: f64,
    config: &SamplerConfig,
    correction: Option<&[Vec<f64>]>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Trajectory> {
    let ab = &table.alpha_bar;
    let mut x = x_start.to_vec();
    let mut records = Vec::with_capacity(ab.len());
    for i in (0..ab.len()).rev() {
        let eps = pred.predict(&x, predictor_level(ab, i)?)?;
        let next = if i > 0 {
            let noise: Option<Vec<f64>> = match rng.as_deref_mut() {
                Some(rng) if eta > 0.0 => {
                    Some((0..x.len()).map(|_| StandardNormal.sample(rng)).collect())
                }
                _ => None,
            };
            let mut n = ddim_reverse_step(&x, &eps, ab[i], ab[i - 1], eta, noise.as_deref())?;
            if let Some(c) = correction {
                for (v, d) in n.iter_mut().zip(&c[i - 1]) {
                    *v += d;
                }
            }
            Some(n)
        } else {
            None
        };
        records.push(TrajectoryRecord {
            t: table.timesteps[i],
            alpha_bar: ab[i],
            x,
            eps_hat: eps,
        });
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Ok(Trajectory {
        direction: Direction::Reverse,
        config: config.clone(),
        records,
    })
}

/// DDIM inversion of `x0` at guidance `w_invert`. The prediction for each
/// step is taken at the earlier state and its noise level.
pub fn run_inversion(
    models: ModelPair,
    x0: &[f64],
    table: &ScheduleTable,
    config: &SamplerConfig,
) -> Result<Trajectory> {
    check_table(table, config, models.uncond.dim(), x0)?;
    let pred = scaled(models, config.w_invert, config)?;
    invert_with(&pred, x0, table, config)
}

/// Reverse DDIM from `x_start` (in scaled space) at guidance `w_reverse`.
/// `rng` supplies the injected noise when `eta > 0`.
pub fn run_reverse<R: RngCore>(
    models: ModelPair,
    x_start: &[f64],
    table: &ScheduleTable,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    check_table(table, config, models.uncond.dim(), x_start)?;
    let pred = scaled(models, config.w_reverse, config)?;
    reverse_with(&pred, x_start, table, config.eta, config, None, Some(rng))
}

/// Reverse pass pinned to a stored inversion. Each step adds the gap
/// between the stored inversion state and a plain reverse step taken from
/// the next stored state under the source pair, so running it with
/// `branch = source` retraces the inversion. Runs deterministically.
pub fn pinned_reconstruction(
    inversion: &Trajectory,
    source: ModelPair,
    branch: ModelPair,
    table: &ScheduleTable,
    config: &SamplerConfig,
) -> Result<Trajectory> {
    ensure(inversion.direction == Direction::Inversion, || {
        "pinned reconstruction needs an inversion trajectory".into()
    })?;
    ensure(inversion.len() == table.len(), || {
        format!(
            "inversion has {} stored states, table has {}",
            inversion.len(),
            table.len()
        )
    })?;
    for (r, &t) in inversion.records.iter().zip(&table.timesteps) {
        ensure(r.t == t, || format!("stored state at t = {} does not match grid t = {t}", r.t))?;
    }
    check_table(table, config, source.uncond.dim(), inversion.last_state())?;

    let src = scaled(source, config.w_reverse, config)?;
    let ab = &table.alpha_bar;
    let states = &inversion.records;
    let mut correction = vec![Vec::new(); ab.len() - 1];
    for i in (1..ab.len()).rev() {
        let eps = src.predict(&states[i].x, predictor_level(ab, i)?)?;
        let step = ddim_reverse_step(&states[i].x, &eps, ab[i], ab[i - 1], 0.0, None)?;
        correction[i - 1] = states[i - 1].x.iter().zip(&step).map(|(a, b)| a - b).collect();
    }

    let pred = scaled(branch, config.w_reverse, config)?;
    reverse_with(
        &pred,
        inversion.last_state(),
        table,
        0.0,
        config,
        Some(&correction),
        None,
    )
}

/// Result of a reference solve. `t_start`/`t_end` are the times actually
/// integrated between after clamping away from ᾱ = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub x: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub clamped: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Integrates the probability-flow ODE between grid indices `from` and `to`
/// of `table` with `n_fine` classical RK4 steps.
///
/// The ODE is solved in `x̄ = x/√ᾱ` against `u = ln σ`, `σ² = (1−ᾱ)/ᾱ`,
/// where it reads `dx̄/du = σ·ε̂(x̄√ᾱ, ᾱ)`. That form does not depend on the
/// schedule between the endpoints and stays well scaled across many
/// decades of σ. An endpoint at ᾱ = 1 (σ = 0) is moved to the first grid
/// point below 1 and `clamped` is set.
pub fn ode_reference_solve(
    pred: &dyn NoisePredictor,
    x_start: &[f64],
    table: &ScheduleTable,
    from: usize,
    to: usize,
    n_fine: usize,
) -> Result<OdeSolution> {
    ensure_len("x_start", x_start.len(), pred.dim())?;
    ensure(from < table.len() && to < table.len(), || {
        format!("span {from}..{to} outside a table of {} points", table.len())
    })?;
    ensure(n_fine >= 1, || "n_fine must be positive".into())?;
    if from == to {
        return Ok(OdeSolution {
            x: x_start.to_vec(),
            t_start: table.timesteps[from],
            t_end: table.timesteps[to],
            clamped: false,
        });
    }
    let ab = &table.alpha_bar;
    let first_regular = ab
        .iter()
        .position(|&a| a < 1.0)
        .ok_or_else(|| Error::domain("no grid level below alpha_bar = 1"))?;
    let clamp = |i: usize| if ab[i] < 1.0 { i } else { first_regular };
    let (a, b) = (clamp(from), clamp(to));
    let clamped = a != from || b != to;
    let (a0, a1) = (ab[a], ab[b]);
    let u = |alpha: f64| 0.5 * ((1.0 - alpha).ln() - alpha.ln());
    let (u0, u1) = (u(a0), u(a1));
    let h = (u1 - u0) / n_fine as f64;

    let dim = x_start.len();
    let mut xb: Vec<f64> = x_start.iter().map(|v| v / a0.sqrt()).collect();
    let mut scratch = vec![0.0; dim];
    let mut eps = vec![0.0; dim];
    let mut field = |u: f64, xb: &[f64], out: &mut [f64]| -> Result<()> {
        let alpha = (-softplus(2.0 * u)).exp();
        let sa = alpha.sqrt();
        for (s, v) in scratch.iter_mut().zip(xb) {
            *s = v * sa;
        }
        pred.predict_into(&scratch, alpha, &mut eps)?;
        let sigma = u.exp();
        for (o, e) in out.iter_mut().zip(&eps) {
            *o = sigma * e;
        }
        Ok(())
    };

    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut probe = vec![0.0; dim];
    for step in 0..n_fine {
        let uu = u0 + step as f64 * h;
        field(uu, &xb, &mut k1)?;
        for j in 0..dim {
            probe[j] = xb[j] + 0.5 * h * k1[j];
        }
        field(uu + 0.5 * h, &probe, &mut k2)?;
        for j in 0..dim {
            probe[j] = xb[j] + 0.5 * h * k2[j];
        }
        field(uu + 0.5 * h, &probe, &mut k3)?;
        for j in 0..dim {
            probe[j] = xb[j] + h * k3[j];
        }
        let u_next = if step + 1 == n_fine { u1 } else { uu + h };
        field(u_next, &probe, &mut k4)?;
        for j in 0..dim {
            xb[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    Ok(OdeSolution {
        x: xb.iter().map(|v| v * a1.sqrt()).collect(),
        t_start: table.timesteps[a],
        t_end: table.timesteps[b],
        clamped,
    })
}

/// Per-step local inversion error `‖x*_{i+1} − ODE(x*_i)‖`, one entry per
/// step. Steps leaving a state at ᾱ = 1 have no reference and give `None`.
pub fn local_inversion_errors(
    inversion: &Trajectory,
    models: ModelPair,
    table: &ScheduleTable,
) -> Result<Vec<Option<f64>>> {
    ensure(inversion.direction == Direction::Inversion, || {
        "local errors need an inversion trajectory".into()
    })?;
    ensure(inversion.len() == table.len(), || {
        "trajectory and table lengths differ".into()
    })?;
    let pred = scaled(models, inversion.config.w_invert, &inversion.config)?;
    (0..table.len().saturating_sub(1))
        .map(|i| {
            if table.alpha_bar[i] >= 1.0 {
                return Ok(None);
            }
            let sol = ode_reference_solve(
                &pred,
                &inversion.records[i].x,
                table,
                i,
                i + 1,
                LOCAL_ODE_SUBSTEPS,
            )?;
            let err = sol
                .x
                .iter()
                .zip(&inversion.records[i + 1].x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(Some(err))
        })
        .collect()
}

/// First step the reference integrator can cover.
pub fn first_local_error(errors: &[Option<f64>]) -> Option<f64> {
    errors.iter().flatten().next().copied()
}
