//! Reconstruction and edit-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_len, Error, Result};
use crate::schedule::Family;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    ensure_len("least squares", ys.len(), xs.len())?;
    ensure(xs.len() >= 2, || "least squares needs at least 2 points".into())?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    ensure(sxx > 0.0, || "least squares needs distinct x values".into())?;
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Mean of squared coordinate differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("mse", b.len(), a.len())?;
    ensure(!a.is_empty(), || "mse of empty vectors".into())?;
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(max_val²/mse)`; positive infinity when the inputs coincide.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, max_val)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> Result<f64> {
    ensure(max_val.is_finite() && max_val > 0.0, || {
        format!("psnr max_val must be positive, got {max_val}")
    })?;
    ensure(mse >= 0.0, || format!("mse must be non-negative, got {mse}"))?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub order: f64,
    pub r_squared: f64,
}

/// Slope of `log err` against `log(1/N)`.
pub fn convergence_order_fit(points: &[(usize, f64)]) -> Result<ConvergenceFit> {
    ensure(points.len() >= 3, || {
        format!("convergence fit needs at least 3 points, got {}", points.len())
    })?;
    for &(n, err) in points {
        ensure(n > 0, || "step counts must be positive".into())?;
        if !(err > 0.0 && err.is_finite()) {
            return Err(Error::validation(format!(
                "convergence fit needs positive errors, got {err} at N={n}"
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| -(n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
    let fit = least_squares(&xs, &ys)?;
    Ok(ConvergenceFit {
        order: fit.slope,
        r_squared: fit.r_squared,
    })
}

/// Norm of the component of `edited − x0` orthogonal to `edit_direction`.
pub fn edit_drift(x0: &[f64], edited: &[f64], edit_direction: &[f64]) -> Result<f64> {
    ensure_len("edit_drift edited", edited.len(), x0.len())?;
    ensure_len("edit_drift direction", edit_direction.len(), x0.len())?;
    let norm = edit_direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    ensure(norm > 0.0, || "edit direction must be nonzero".into())?;
    let unit: Vec<f64> = edit_direction.iter().map(|d| d / norm).collect();
    let delta: Vec<f64> = edited.iter().zip(x0).map(|(e, x)| e - x).collect();
    let along: f64 = delta.iter().zip(&unit).map(|(d, u)| d * u).sum();
    Ok(delta
        .iter()
        .zip(&unit)
        .map(|(d, u)| {
            let r = d - along * u;
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `wins + losses` fair coin flips. Ties should be dropped by the caller.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log C(n, k) accumulated incrementally
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    let log_half_n = -(n as f64) * std::f64::consts::LN_2;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (log_c + log_half_n).exp();
        }
    }
    tail.min(1.0)
}

/// Metrics for one scenario run, averaged over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub scenario: String,
    pub family: Family,
    pub n_steps: usize,
    /// Sweep axis name and value that produced this report, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    pub w_invert: f64,
    pub w_reverse: f64,
    pub input_scale_b: f64,
    pub seeds: usize,
    /// Mean per-step inversion error against the reference ODE; `None` for
    /// steps the reference cannot cover (a singular start).
    pub local_errors: Vec<Option<f64>>,
    pub roundtrip_mse: f64,
    #[serde(with = "crate::serde_float")]
    pub roundtrip_psnr: f64,
    pub psnr_max_val: f64,
    pub pinned_roundtrip_mse: f64,
    #[serde(default, with = "crate::serde_float::option")]
    pub edit_drift: Option<f64>,
    #[serde(default, with = "crate::serde_float::option")]
    pub pinned_edit_drift: Option<f64>,
    #[serde(with = "crate::serde_float")]
    pub terminal_logsnr: f64,
    pub linearity_r2: f64,
    /// Kept out of the report file so reports stay byte-reproducible; the
    /// harness writes it to the run metadata instead.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}
