//! PSNR and SSIM between a reference and a test magnitude image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian standard deviation in pixels.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Value written to files in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 999.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub data_range: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

fn check_dims(reference: &[f64], test: &[f64]) -> Result<()> {
    if reference.len() != test.len() {
        return Err(Error::shape("metric images", &[reference.len()], &[test.len()]));
    }
    if reference.is_empty() {
        return Err(Error::invalid("metric images are empty"));
    }
    Ok(())
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `20·log10(max(ref) / RMSE)`; `+∞` when the images are identical.
pub fn psnr(reference: &[f64], test: &[f64]) -> Result<f64> {
    check_dims(reference, test)?;
    let peak = max_of(reference);
    if !(peak > 0.0) {
        return Err(Error::invalid("PSNR reference has no positive value"));
    }
    let mse = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// PSNR as written to files: infinities become [`PSNR_CAP_DB`].
pub fn psnr_for_file(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM with the data range taken from the reference maximum.
pub fn ssim(reference: &[f64], test: &[f64], d1: usize, d2: usize) -> Result<f64> {
    check_dims(reference, test)?;
    ssim_with_range(reference, test, d1, d2, max_of(reference))
}

/// Mean local SSIM over every fully contained 11×11 Gaussian window.
pub fn ssim_with_range(reference: &[f64], test: &[f64], d1: usize, d2: usize, data_range: f64) -> Result<f64> {
    check_dims(reference, test)?;
    if reference.len() != d1 * d2 {
        return Err(Error::shape("metric images", &[d1, d2], &[reference.len()]));
    }
    if d1 < SSIM_WINDOW || d2 < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {d1}×{d2}"
        )));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::invalid(format!("SSIM data range must be positive, got {data_range}")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (o1, o2) = (d1 - SSIM_WINDOW + 1, d2 - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..o1 {
        for j in 0..o2 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (a, ga) in g.iter().enumerate() {
                for (b, gb) in g.iter().enumerate() {
                    let w = ga * gb;
                    let k = (i + a) * d2 + j + b;
                    let (x, y) = (reference[k], test[k]);
                    mx += w * x;
                    my += w * y;
                    xx += w * x * x;
                    yy += w * y * y;
                    xy += w * x * y;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (o1 * o2) as f64)
}

pub fn evaluate(reference: &[f64], test: &[f64], d1: usize, d2: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(reference, test)?,
        ssim: ssim(reference, test, d1, d2)?,
        data_range: max_of(reference),
        window: SSIM_WINDOW,
        sigma: SSIM_SIGMA,
        k1: SSIM_K1,
        k2: SSIM_K2,
    })
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub r: usize,
    pub acs: usize,
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("case_id,R,ACS,variant,psnr_db,ssim,seconds\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.4},{:.6},{:.3}",
            r.case_id,
            r.r,
            r.acs,
            r.variant,
            psnr_for_file(r.psnr_db),
            r.ssim,
            r.seconds
        )
        .unwrap();
    }
    out
}
