//! Nakagami speckle statistics and the sliding-window feature maps the
//! segmenter classifies on.
//!
//! Frames arrive log-compressed; every sample is first mapped back to linear
//! amplitude with [`crate::synth::LogCompression::amplitude`] because moment
//! fits on log data would distort the shape parameter.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{PolarFrame, ProbeGeometry};
use crate::synth::LogCompression;

pub const MIN_FIT_SAMPLES: usize = 8;
pub const NUM_FEATURES: usize = 3;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["m", "log_omega", "mean_amplitude"];

/// Nakagami shape `m` and spread `omega = E[x²]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NakagamiParams {
    pub m: f64,
    pub omega: f64,
}

/// Neumaier-compensated sum; result does not depend on how the caller splits work.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Moment-matching fit: `omega = mean(x²)`, `m = omega² / var(x²)`.
pub fn nakagami_fit(samples: &[f64]) -> Result<NakagamiParams> {
    if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "amplitudes must be finite and non-negative, found {bad}"
        )));
    }
    let intensities: Vec<f64> = samples.iter().map(|x| x * x).collect();
    fit_intensities(&intensities)
}

fn fit_intensities(intensities: &[f64]) -> Result<NakagamiParams> {
    let n = intensities.len();
    if n < MIN_FIT_SAMPLES {
        return Err(Error::DegenerateSample(format!(
            "{n} samples, need at least {MIN_FIT_SAMPLES}"
        )));
    }
    let omega = compensated_sum(intensities.iter().copied()) / n as f64;
    let var = compensated_sum(intensities.iter().map(|i| (i - omega) * (i - omega))) / n as f64;
    if !(var > 0.0) || !(omega > 0.0) {
        return Err(Error::DegenerateSample("intensity variance is zero".into()));
    }
    Ok(NakagamiParams {
        m: omega * omega / var,
        omega,
    })
}

/// Per-pixel features: Nakagami `m`, `ln omega` and mean amplitude over a
/// centred `window × window` neighbourhood (wrapping in θ, clamped in r).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub geometry: ProbeGeometry,
    pub window: usize,
    pub log: LogCompression,
    pub data: Vec<[f64; NUM_FEATURES]>,
}

impl FeatureStack {
    #[inline]
    pub fn get(&self, r: usize, t: usize) -> &[f64; NUM_FEATURES] {
        &self.data[self.geometry.index(r, t)]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|px| px[c]).collect()
    }

    /// Writes `<base>.f32` (channel-major little-endian planes, rows = radii)
    /// and a `<base>.txt` sidecar describing them.
    pub fn export_raw(&self, base: &Path) -> Result<()> {
        let g = &self.geometry;
        let mut raw = Vec::with_capacity(self.data.len() * NUM_FEATURES * 4);
        for c in 0..NUM_FEATURES {
            for px in &self.data {
                raw.extend_from_slice(&(px[c] as f32).to_le_bytes());
            }
        }
        std::fs::write(base.with_extension("f32"), raw)?;
        let mut side = std::fs::File::create(base.with_extension("txt"))?;
        writeln!(side, "format = f32le planar")?;
        writeln!(side, "rows = {}", g.samples_per_line)?;
        writeln!(side, "cols = {}", g.num_scan_lines)?;
        writeln!(side, "window = {}", self.window)?;
        writeln!(side, "channels = {}", FEATURE_NAMES.join(","))?;
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn feature_map(frame: &PolarFrame, window: usize, log: LogCompression) -> Result<FeatureStack> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "window must be odd and at least 3, got {window}"
        )));
    }
    let g = frame.geometry;
    let n_theta = g.num_scan_lines;
    let n_r = g.samples_per_line;
    let half = window / 2;
    let amp_lut: Vec<f64> = (0..=255u8).map(|v| log.amplitude(v)).collect();
    let int_lut: Vec<f64> = amp_lut.iter().map(|a| a * a).collect();

    // (fit, mean amplitude) per pixel; fit is None when the window is degenerate.
    let raw: Vec<(Option<(f64, f64)>, f64)> = (0..n_r)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut levels = Vec::with_capacity(window * window);
            let mut ints = Vec::with_capacity(window * window);
            (0..n_theta)
                .map(|t| {
                    levels.clear();
                    for dr in 0..window {
                        let rr = (r + dr).saturating_sub(half).min(n_r - 1);
                        for dt in 0..window {
                            let tt = (t + n_theta + dt - half) % n_theta;
                            levels.push(frame.get(rr, tt));
                        }
                    }
                    ints.clear();
                    ints.extend(levels.iter().map(|&v| int_lut[v as usize]));
                    let mean_amp = compensated_sum(levels.iter().map(|&v| amp_lut[v as usize])) / levels.len() as f64;
                    let fit = fit_intensities(&ints).ok().map(|p| (p.m, libm::log(p.omega)));
                    (fit, mean_amp)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut good_m: Vec<f64> = raw.iter().filter_map(|(f, _)| f.map(|f| f.0)).collect();
    let mut good_lo: Vec<f64> = raw.iter().filter_map(|(f, _)| f.map(|f| f.1)).collect();
    let global = if good_m.is_empty() {
        None
    } else {
        Some((median(&mut good_m), median(&mut good_lo)))
    };

    let data: Vec<[f64; NUM_FEATURES]> = (0..n_r)
        .into_par_iter()
        .flat_map_iter(|r| {
            let raw = &raw;
            (0..n_theta).map(move |t| {
                let (fit, mean_amp) = raw[g.index(r, t)];
                let (m, lo) = fit.unwrap_or_else(|| {
                    let mut ms = Vec::new();
                    let mut los = Vec::new();
                    for dr in 0..window {
                        let rr = (r + dr).saturating_sub(half).min(n_r - 1);
                        for dt in 0..window {
                            let tt = (t + n_theta + dt - half) % n_theta;
                            if let Some((m, lo)) = raw[g.index(rr, tt)].0 {
                                ms.push(m);
                                los.push(lo);
                            }
                        }
                    }
                    if !ms.is_empty() {
                        (median(&mut ms), median(&mut los))
                    } else if let Some(gl) = global {
                        gl
                    } else {
                        (1.0, libm::log(mean_amp * mean_amp))
                    }
                });
                [m, lo, mean_amp]
            })
        })
        .collect();

    Ok(FeatureStack {
        geometry: g,
        window,
        log,
        data,
    })
}
