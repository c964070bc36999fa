//! Time derivatives of the forward process.
//!
//! With `x_t = √ᾱ(t)·x0 + √(1 − ᾱ(t))·ε`, the chain rule gives
//!
//! ```text
//! dx_t/dt = dᾱ/dt · ( x0 / (2√ᾱ) − ε / (2√(1 − ᾱ)) )
//! ```
//!
//! so the ε-coefficient diverges wherever ᾱ = 1 while dᾱ/dt ≠ 0. That is
//! the case at t = 0 for the scaled-linear, cosine and sigmoid families, and
//! never for the un-normalized logistic family, whose ᾱ(0) < 1.
//!
//! All derivatives use the smooth form of ᾱ (the exponential approximation
//! for scaled-linear).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{least_squares, LinearFit};
use crate::schedule::{Family, Orientation, Schedule, ScheduleSpec, ScheduleTable, SIGMOID_FLOOR};

/// Fraction of `t_max` used as the first positive sample when a scan starts
/// at exactly zero.
pub const SCAN_FLOOR_FRACTION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCoefficients {
    pub t: f64,
    /// Multiplier of x0 in dx_t/dt.
    pub coeff_x0: f64,
    /// Multiplier of ε in dx_t/dt.
    pub coeff_eps: f64,
    pub d_alpha_bar_dt: f64,
    pub finite: bool,
}

/// Analytic dᾱ/dt of the smooth schedule form.
pub fn d_alpha_bar_dt(spec: &ScheduleSpec, t: f64) -> Result<f64> {
    derivative(&Schedule::new(spec.clone())?, t)
}

pub fn derivative(schedule: &Schedule, t: f64) -> Result<f64> {
    schedule.check_domain(t)?;
    let spec = schedule.spec();
    let big = schedule.t_max();
    let raw = match spec.family {
        Family::ScaledLinear => {
            let rate = -0.1 / big - 19.9 * (2.0 * t + 1.0) / (2.0 * big * (big - 1.0));
            schedule.raw_smooth(t) * rate
        }
        Family::Cosine => {
            let (theta, theta0, dtheta) = cosine_angles(spec, t);
            let c0 = theta0.cos();
            -(2.0 * theta).sin() * dtheta / (c0 * c0)
        }
        Family::Sigmoid => {
            if schedule.raw_smooth(t) <= SIGMOID_FLOOR {
                0.0
            } else {
                let p = spec.sigmoid;
                let z = ((t / big) * (p.end - p.start) + p.start) / p.tau;
                let dz = (p.end - p.start) / (p.tau * big);
                let v_start = crate::schedule::sigmoid(p.start / p.tau);
                let v_end = crate::schedule::sigmoid(p.end / p.tau);
                let sz = crate::schedule::sigmoid(z);
                -sz * (1.0 - sz) * dz / (v_end - v_start)
            }
        }
        Family::Logistic => {
            let a = schedule.raw_smooth(t);
            let b = schedule.raw_one_minus_smooth(t);
            match spec.orientation {
                Orientation::Decreasing => -spec.k * a * b,
                Orientation::VerbatimIncreasing => spec.k * a * b,
            }
        }
    };
    Ok(match schedule.affine() {
        None => raw,
        Some(a) => raw * a.scale,
    })
}

/// (θ(t), θ(0), dθ/dt) for the cosine family.
fn cosine_angles(spec: &ScheduleSpec, t: f64) -> (f64, f64, f64) {
    let big = f64::from(spec.t_max);
    let s = spec.s;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta = (t / big + s) / (1.0 + s) * half_pi;
    let theta0 = s / (1.0 + s) * half_pi;
    (theta, theta0, half_pi / (big * (1.0 + s)))
}

/// `num / den` where `den` is a square root that may be exactly zero; the
/// limit is signed infinity unless the numerator vanishes too.
fn ratio_with_limit(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        num.signum() * f64::INFINITY
    }
}

/// Both coefficients of dx_t/dt at `t`, with boundary limits resolved
/// analytically. Divergence is reported through `finite`, never as an error.
pub fn dx_dt_coefficients(spec: &ScheduleSpec, t: f64) -> Result<DerivativeCoefficients> {
    coefficients(&Schedule::new(spec.clone())?, t)
}

pub fn coefficients(schedule: &Schedule, t: f64) -> Result<DerivativeCoefficients> {
    let d = derivative(schedule, t)?;
    let a = schedule.alpha_bar_smooth(t)?;
    let one_minus = schedule.one_minus_alpha_bar_smooth(t)?;
    let spec = schedule.spec();

    let plain_cosine = spec.family == Family::Cosine && schedule.affine().is_none();
    let (coeff_x0, coeff_eps) = if plain_cosine {
        // √ᾱ = cos θ / cos θ0 and, for s = 0, √(1 − ᾱ) = sin θ: both
        // derivatives stay finite where the generic ratios are 0/0.
        let (theta, theta0, dtheta) = cosine_angles(spec, t);
        let c0 = theta0.cos();
        let x0 = -theta.sin() * dtheta / c0;
        let eps = if spec.s == 0.0 {
            theta.cos() * dtheta
        } else {
            ratio_with_limit(-d, 2.0 * one_minus.sqrt())
        };
        (x0, eps)
    } else {
        (
            ratio_with_limit(d, 2.0 * a.sqrt()),
            ratio_with_limit(-d, 2.0 * one_minus.sqrt()),
        )
    };
    Ok(DerivativeCoefficients {
        t,
        coeff_x0,
        coeff_eps,
        d_alpha_bar_dt: d,
        finite: coeff_x0.is_finite() && coeff_eps.is_finite(),
    })
}

/// Samples the coefficients on `n` points between `t_min` and `t_max`,
/// spaced geometrically so that growth toward `t_min` is visible on a log
/// axis. A scan starting at exactly 0 puts 0 first and spaces the rest
/// geometrically from `t_max · SCAN_FLOOR_FRACTION`.
pub fn singularity_scan(
    spec: &ScheduleSpec,
    t_min: f64,
    t_max: f64,
    n: usize,
) -> Result<Vec<DerivativeCoefficients>> {
    let schedule = Schedule::new(spec.clone())?;
    ensure(n >= 2, || format!("scan needs at least 2 points, got {n}"))?;
    ensure(
        t_min.is_finite() && t_max.is_finite() && 0.0 <= t_min && t_min < t_max,
        || format!("invalid scan range [{t_min}, {t_max}]"),
    )?;
    ensure(t_max <= schedule.t_max(), || {
        format!("scan end {t_max} exceeds T = {}", schedule.t_max())
    })?;
    scan_points(t_min, t_max, n)
        .into_iter()
        .map(|t| coefficients(&schedule, t))
        .collect()
}

fn scan_points(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let geometric = |lo: f64, hi: f64, m: usize| -> Vec<f64> {
        let ratio = (hi / lo).ln();
        (0..m)
            .map(|j| match j {
                0 => lo,
                j if j == m - 1 => hi,
                j => lo * (ratio * j as f64 / (m - 1) as f64).exp(),
            })
            .collect()
    };
    if t_min > 0.0 {
        geometric(t_min, t_max, n)
    } else if n == 2 {
        vec![0.0, t_max]
    } else {
        let mut pts = vec![0.0];
        pts.extend(geometric(t_max * SCAN_FLOOR_FRACTION, t_max, n - 1));
        pts
    }
}

/// Default middle window for the logSNR linearity fit, as fractions of T.
pub const DEFAULT_LINEARITY_WINDOW: (f64, f64) = (0.2, 0.8);

/// Least-squares line through `(t, logsnr)` restricted to
/// `lo·T ≤ t ≤ hi·T`. Non-finite logSNR entries are skipped.
pub fn logsnr_linearity_fit(table: &ScheduleTable, window: (f64, f64)) -> Result<LinearFit> {
    let (lo, hi) = window;
    ensure(
        (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi,
        || format!("window must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"),
    )?;
    let big = f64::from(table.spec.t_max);
    let (xs, ys): (Vec<f64>, Vec<f64>) = table
        .timesteps
        .iter()
        .zip(&table.logsnr)
        .filter(|(t, l)| {
            let u = **t / big;
            l.is_finite() && u >= lo && u <= hi
        })
        .map(|(t, l)| (*t, *l))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::validation(format!(
            "linearity fit needs at least 3 points in window ({lo}, {hi}), found {}",
            xs.len()
        )));
    }
    least_squares(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_table, integer_grid, Normalization};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs())
    }

    fn central_difference(schedule: &Schedule, t: f64) -> f64 {
        let h = 1e-6 * schedule.t_max();
        (schedule.alpha_bar_smooth(t + h).unwrap() - schedule.alpha_bar_smooth(t - h).unwrap())
            / (2.0 * h)
    }

    /// Second-order one-sided difference, for derivatives at t = 0.
    fn forward_difference(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
        (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2.0 * h)) / (2.0 * h)
    }

    fn all_specs(t_max: u32) -> Vec<ScheduleSpec> {
        let mut specs: Vec<_> = Family::ALL
            .iter()
            .map(|&f| ScheduleSpec::new(f, t_max))
            .collect();
        specs.push(
            ScheduleSpec::logistic(t_max)
                .with_t0_fraction(0.3)
                .with_orientation(Orientation::VerbatimIncreasing),
        );
        specs.push(
            ScheduleSpec::logistic(t_max)
                .with_normalization(Normalization::Affine { alpha_bar_at_end: 0.01 }),
        );
        specs
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t_max in [100u32, 1000] {
            for spec in all_specs(t_max) {
                let s = Schedule::new(spec.clone()).unwrap();
                let big = s.t_max();
                for _ in 0..100 {
                    let t = rng.random_range(0.01 * big..0.99 * big);
                    let analytic = derivative(&s, t).unwrap();
                    let fd = central_difference(&s, t);
                    assert!(rel(analytic, fd) < 1e-6, "{spec:?} t={t}: {analytic} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn verbatim_logistic_midpoint_slope() {
        let spec = ScheduleSpec::logistic(100)
            .with_t0(30.0)
            .with_orientation(Orientation::VerbatimIncreasing);
        assert!((d_alpha_bar_dt(&spec, 30.0).unwrap() - 0.015 / 4.0).abs() < 1e-17);
    }

    #[test]
    fn cosine_at_end_eps_coefficient_vanishes() {
        let spec = ScheduleSpec::cosine(100);
        let c = dx_dt_coefficients(&spec, 100.0).unwrap();
        assert!(c.d_alpha_bar_dt.abs() < 1e-15);
        assert!(c.coeff_eps.abs() < 1e-15);
        assert!(c.finite);
        // d√ᾱ/dt does not vanish there: −(π/(2T(1+s)))/cos θ0
        let s: f64 = 0.008;
        let theta0 = s / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        let expected = -std::f64::consts::FRAC_PI_2 / (100.0 * (1.0 + s)) / theta0.cos();
        assert!(rel(c.coeff_x0, expected) < 1e-12);
    }

    #[test]
    fn singular_families_diverge_at_origin() {
        for family in [Family::ScaledLinear, Family::Cosine, Family::Sigmoid] {
            let c = dx_dt_coefficients(&ScheduleSpec::new(family, 100), 0.0).unwrap();
            assert!(!c.finite, "{family}");
            assert_eq!(c.coeff_eps, f64::INFINITY, "{family}");
            assert!(c.coeff_x0.is_finite());
        }
    }

    #[test]
    fn cosine_without_offset_is_regular() {
        let spec = ScheduleSpec {
            s: 0.0,
            ..ScheduleSpec::cosine(100)
        };
        let c = dx_dt_coefficients(&spec, 0.0).unwrap();
        assert!(c.finite);
        assert!(rel(c.coeff_eps, std::f64::consts::FRAC_PI_2 / 100.0) < 1e-14);
    }

    #[test]
    fn logistic_regular_at_origin_and_matches_oracle() {
        let specs = [
            ScheduleSpec::logistic(100),
            ScheduleSpec::logistic(100)
                .with_t0(30.0)
                .with_orientation(Orientation::VerbatimIncreasing),
        ];
        for spec in specs {
            let s = Schedule::new(spec.clone()).unwrap();
            let c = coefficients(&s, 0.0).unwrap();
            assert!(c.finite);
            let h = 1e-4;
            let sqrt_a = |t: f64| s.alpha_bar_smooth(t).unwrap().sqrt();
            let sqrt_b = |t: f64| (1.0 - s.alpha_bar_smooth(t).unwrap()).sqrt();
            assert!(rel(c.coeff_x0, forward_difference(sqrt_a, 0.0, h)) < 1e-6);
            assert!(rel(c.coeff_eps, forward_difference(sqrt_b, 0.0, h)) < 1e-6);
        }
    }

    #[test]
    fn chain_rule_reconstructs_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in all_specs(1000) {
            let s = Schedule::new(spec.clone()).unwrap();
            for _ in 0..200 {
                let t = rng.random_range(0.5..999.5);
                let c = coefficients(&s, t).unwrap();
                let a = s.alpha_bar_smooth(t).unwrap();
                let b = s.one_minus_alpha_bar_smooth(t).unwrap();
                let from_x0 = c.coeff_x0 * 2.0 * a.sqrt();
                let from_eps = -c.coeff_eps * 2.0 * b.sqrt();
                assert!(rel(from_x0, c.d_alpha_bar_dt) < 1e-10, "{spec:?} t={t}");
                assert!(rel(from_eps, c.d_alpha_bar_dt) < 1e-10, "{spec:?} t={t}");
            }
        }
    }

    #[test]
    fn scan_shows_divergence_only_for_singular_families() {
        let scan = singularity_scan(&ScheduleSpec::scaled_linear(100), 1e-6, 1e-2, 20).unwrap();
        assert!(scan[0].coeff_eps.abs() > 10.0 * scan[19].coeff_eps.abs());
        assert!(scan
            .windows(2)
            .all(|w| w[0].coeff_eps.abs() > w[1].coeff_eps.abs()));

        let flat = singularity_scan(&ScheduleSpec::logistic(100), 1e-6, 1e-2, 20).unwrap();
        let mags: Vec<f64> = flat.iter().map(|c| c.coeff_eps.abs()).collect();
        let max = mags.iter().cloned().fold(f64::MIN, f64::max);
        let min = mags.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.01);
    }

    #[test]
    fn two_point_scan_is_endpoints() {
        let scan = singularity_scan(&ScheduleSpec::cosine(100), 1e-3, 5.0, 2).unwrap();
        assert_eq!(scan.len(), 2);
        assert_eq!(scan[0].t, 1e-3);
        assert_eq!(scan[1].t, 5.0);
        let from_zero = singularity_scan(&ScheduleSpec::cosine(100), 0.0, 5.0, 2).unwrap();
        assert_eq!(from_zero[0].t, 0.0);
        assert!(!from_zero[0].finite);
    }

    #[test]
    fn scan_rejects_bad_ranges() {
        let spec = ScheduleSpec::cosine(100);
        for (lo, hi, n) in [(1.0, 1.0, 5), (-1.0, 2.0, 5), (1.0, 200.0, 5), (0.1, 1.0, 1)] {
            assert!(matches!(
                singularity_scan(&spec, lo, hi, n),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn linear_logsnr_has_unit_r2() {
        let spec = ScheduleSpec::logistic(100);
        let mut table = build_table(&spec, &integer_grid(100)).unwrap();
        table.logsnr = table.timesteps.iter().map(|t| 3.0 - 0.05 * t).collect();
        let fit = logsnr_linearity_fit(&table, DEFAULT_LINEARITY_WINDOW).unwrap();
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.slope + 0.05).abs() < 1e-12);
    }

    #[test]
    fn logistic_logsnr_more_linear_than_cosine() {
        let fit = |f: Family| {
            let t = build_table(&ScheduleSpec::new(f, 100), &integer_grid(100)).unwrap();
            logsnr_linearity_fit(&t, DEFAULT_LINEARITY_WINDOW).unwrap().r_squared
        };
        assert!(fit(Family::Logistic) > fit(Family::Cosine));
    }

    #[test]
    fn empty_window_rejected() {
        let t = build_table(&ScheduleSpec::cosine(100), &integer_grid(100)).unwrap();
        assert!(matches!(
            logsnr_linearity_fit(&t, (0.5, 0.5)),
            Err(Error::Validation(_))
        ));
        let sparse = build_table(&ScheduleSpec::cosine(100), &[0.0, 50.0, 100.0]).unwrap();
        assert!(matches!(
            logsnr_linearity_fit(&sparse, (0.2, 0.8)),
            Err(Error::Validation(_))
        ));
    }
}
