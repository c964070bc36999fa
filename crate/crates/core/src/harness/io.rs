//! Artifact formats and their readers.
//!
//! CSV floats are written in scientific notation with 17 significant
//! digits, which round-trips every f64 exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::calculus::DerivativeCoefficients;
use crate::error::{ensure, Error, Result};
use crate::sampler::Trajectory;
use crate::schedule::ScheduleTable;

pub const SCHEDULE_HEADER: [&str; 5] = ["t", "alpha_bar", "beta", "snr", "logsnr"];
pub const SCAN_HEADER: [&str; 5] = ["t", "coeff_x0", "coeff_eps", "d_alpha_bar_dt", "finite"];
pub const TRAJECTORY_HEADER: [&str; 5] = ["step", "t", "alpha_bar", "x_norm", "eps_norm"];
pub const TRAJECTORY_MAGIC: &[u8; 8] = b"SCHDTRAJ";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::validation(format!("invalid number {field:?}")))
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field).map(Some)
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    ensure(got == header, || {
        format!("{}: unexpected header {got:?}", path.display())
    })?;
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn schedule_csv(table: &ScheduleTable) -> Result<Vec<u8>> {
    csv_bytes(
        &SCHEDULE_HEADER,
        (0..table.len()).map(|i| {
            vec![
                fmt_f64(table.timesteps[i]),
                fmt_f64(table.alpha_bar[i]),
                fmt_f64(table.beta[i]),
                fmt_f64(table.snr(i)),
                fmt_f64(table.logsnr[i]),
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: f64,
    pub alpha_bar: f64,
    pub beta: f64,
    pub snr: f64,
    pub logsnr: f64,
}

pub fn read_schedule_csv(path: &Path) -> Result<Vec<ScheduleRow>> {
    read_rows(path, &SCHEDULE_HEADER)?
        .iter()
        .map(|r| {
            Ok(ScheduleRow {
                t: parse_f64(&r[0])?,
                alpha_bar: parse_f64(&r[1])?,
                beta: parse_f64(&r[2])?,
                snr: parse_f64(&r[3])?,
                logsnr: parse_f64(&r[4])?,
            })
        })
        .collect()
}

pub fn scan_csv(rows: &[DerivativeCoefficients]) -> Result<Vec<u8>> {
    csv_bytes(
        &SCAN_HEADER,
        rows.iter().map(|c| {
            vec![
                fmt_f64(c.t),
                fmt_f64(c.coeff_x0),
                fmt_f64(c.coeff_eps),
                fmt_f64(c.d_alpha_bar_dt),
                c.finite.to_string(),
            ]
        }),
    )
}

pub fn read_scan_csv(path: &Path) -> Result<Vec<DerivativeCoefficients>> {
    read_rows(path, &SCAN_HEADER)?
        .iter()
        .map(|r| {
            let finite = match &r[4] {
                "true" => true,
                "false" => false,
                other => return Err(Error::validation(format!("invalid flag {other:?}"))),
            };
            Ok(DerivativeCoefficients {
                t: parse_f64(&r[0])?,
                coeff_x0: parse_f64(&r[1])?,
                coeff_eps: parse_f64(&r[2])?,
                d_alpha_bar_dt: parse_f64(&r[3])?,
                finite,
            })
        })
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn trajectory_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    csv_bytes(
        &TRAJECTORY_HEADER,
        traj.records.iter().enumerate().map(|(i, r)| {
            vec![
                i.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.alpha_bar),
                fmt_f64(l2(&r.x)),
                fmt_f64(l2(&r.eps_hat)),
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub alpha_bar: f64,
    pub x_norm: f64,
    pub eps_norm: f64,
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    read_rows(path, &TRAJECTORY_HEADER)?
        .iter()
        .map(|r| {
            Ok(TrajectoryRow {
                step: r[0]
                    .parse()
                    .map_err(|_| Error::validation(format!("invalid step {:?}", &r[0])))?,
                t: parse_f64(&r[1])?,
                alpha_bar: parse_f64(&r[2])?,
                x_norm: parse_f64(&r[3])?,
                eps_norm: parse_f64(&r[4])?,
            })
        })
        .collect()
}

/// Full states: magic, dim and row count as little-endian u64, then the
/// states row-major as little-endian f64.
pub fn trajectory_bin(traj: &Trajectory) -> Vec<u8> {
    let dim = traj.dim();
    let mut out = Vec::with_capacity(24 + 8 * dim * traj.len());
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    out.extend_from_slice(&(traj.len() as u64).to_le_bytes());
    for r in &traj.records {
        for v in &r.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns the states of a binary trajectory dump.
pub fn read_trajectory_bin(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_trajectory_bin(&bytes)
}

pub fn parse_trajectory_bin(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    ensure(bytes.len() >= 24 && &bytes[..8] == TRAJECTORY_MAGIC, || {
        "not a trajectory dump".into()
    })?;
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (dim, len) = (word(8) as usize, word(16) as usize);
    let want = dim
        .checked_mul(len)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(24));
    ensure(want == Some(bytes.len()), || {
        format!("trajectory dump size does not match {len} states of dim {dim}")
    })?;
    Ok(bytes[24..]
        .chunks_exact(8 * dim.max(1))
        .take(len)
        .map(|row| {
            row.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        })
        .collect())
}

/// Per-seed metrics written to `seeds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub point: usize,
    pub seed: u64,
    pub family: String,
    pub n_steps: usize,
    pub axis_value: Option<f64>,
    pub w_invert: f64,
    pub w_reverse: f64,
    pub input_scale_b: f64,
    pub roundtrip_mse: f64,
    pub pinned_roundtrip_mse: f64,
    pub edit_drift: Option<f64>,
    pub pinned_edit_drift: Option<f64>,
    pub first_local_error: Option<f64>,
}

pub const SEEDS_HEADER: [&str; 13] = [
    "point",
    "seed",
    "family",
    "n_steps",
    "axis_value",
    "w_invert",
    "w_reverse",
    "input_scale_b",
    "roundtrip_mse",
    "pinned_roundtrip_mse",
    "edit_drift",
    "pinned_edit_drift",
    "first_local_error",
];

pub fn seeds_csv(rows: &[SeedRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &SEEDS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.point.to_string(),
                r.seed.to_string(),
                r.family.clone(),
                r.n_steps.to_string(),
                fmt_opt(r.axis_value),
                fmt_f64(r.w_invert),
                fmt_f64(r.w_reverse),
                fmt_f64(r.input_scale_b),
                fmt_f64(r.roundtrip_mse),
                fmt_f64(r.pinned_roundtrip_mse),
                fmt_opt(r.edit_drift),
                fmt_opt(r.pinned_edit_drift),
                fmt_opt(r.first_local_error),
            ]
        }),
    )
}

pub fn read_seeds_csv(path: &Path) -> Result<Vec<SeedRow>> {
    let int = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::validation(format!("invalid integer {s:?}")))
    };
    read_rows(path, &SEEDS_HEADER)?
        .iter()
        .map(|r| {
            Ok(SeedRow {
                point: int(&r[0])? as usize,
                seed: int(&r[1])?,
                family: r[2].to_string(),
                n_steps: int(&r[3])? as usize,
                axis_value: parse_opt(&r[4])?,
                w_invert: parse_f64(&r[5])?,
                w_reverse: parse_f64(&r[6])?,
                input_scale_b: parse_f64(&r[7])?,
                roundtrip_mse: parse_f64(&r[8])?,
                pinned_roundtrip_mse: parse_f64(&r[9])?,
                edit_drift: parse_opt(&r[10])?,
                pinned_edit_drift: parse_opt(&r[11])?,
                first_local_error: parse_opt(&r[12])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::singularity_scan;
    use crate::schedule::{build_table, integer_grid, ScheduleSpec};

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e300, f64::MIN_POSITIVE, 0.0, f64::INFINITY] {
            assert_eq!(parse_f64(&fmt_f64(v)).unwrap(), v);
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn schedule_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ScheduleSpec::cosine(100);
        let table = build_table(&spec, &integer_grid(100)).unwrap();
        let path = dir.path().join("s.csv");
        write_atomic(&path, &schedule_csv(&table).unwrap()).unwrap();
        let rows = read_schedule_csv(&path).unwrap();
        assert_eq!(rows.len(), 101);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.logsnr.to_bits(), table.logsnr[i].to_bits());
            assert_eq!(r.alpha_bar, table.alpha_bar[i]);
        }
        assert!(read_scan_csv(&path).is_err());
    }

    #[test]
    fn scan_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = singularity_scan(&ScheduleSpec::scaled_linear(100), 0.0, 1.0, 5).unwrap();
        let path = dir.path().join("scan.csv");
        write_atomic(&path, &scan_csv(&rows).unwrap()).unwrap();
        let back = read_scan_csv(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert!(!back[0].finite);
        assert_eq!(back[0].coeff_eps, rows[0].coeff_eps);
        assert_eq!(back[4], rows[4]);
    }

    #[test]
    fn binary_dump_validation() {
        assert!(parse_trajectory_bin(b"SCHDTRAJ").is_err());
        let mut ok = TRAJECTORY_MAGIC.to_vec();
        ok.extend_from_slice(&2u64.to_le_bytes());
        ok.extend_from_slice(&1u64.to_le_bytes());
        ok.extend_from_slice(&1.5f64.to_le_bytes());
        ok.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(parse_trajectory_bin(&ok).unwrap(), vec![vec![1.5, -2.0]]);
        ok.pop();
        assert!(parse_trajectory_bin(&ok).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
