//! Decompressor image generator.
//!
//! Labels are turned into an echogenicity map, attenuated with depth, seeded
//! with random point scatterers, convolved with a separable space-invariant
//! PSF and envelope-detected along each scan line before log compression.
//! A [`Refiner`] may post-process the simulated frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, CompressedHeader};
use crate::error::{Error, Result};
use crate::fft::EnvelopeDetector;
use crate::grid::{
    polar_to_cartesian, rasterize_contours, CartesianFrame, ClassTable, LabelMap, PolarFrame, ProbeGeometry,
    BACKGROUND, DEFAULT_RADIAL_STEP_MM, EXTERNAL, LUMEN, MEDIA,
};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 50.0;
pub const DEFAULT_SPEED_OF_SOUND: f64 = 1540.0;
pub const DEFAULT_AXIAL_SIGMA: f64 = 2.0;
pub const DEFAULT_LATERAL_SIGMA: f64 = 3.0;

/// Maps envelope values in `[max / 10^(dB/20), max]` linearly in decibels
/// onto `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogCompression {
    pub dynamic_range_db: f64,
}

impl Default for LogCompression {
    fn default() -> Self {
        Self {
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
        }
    }
}

impl LogCompression {
    pub fn compress(&self, envelope: f64, max: f64) -> u8 {
        if !(envelope > 0.0 && max > 0.0) {
            return 0;
        }
        let db = 20.0 * libm::log10(envelope / max);
        let v = 255.0 * (db + self.dynamic_range_db) / self.dynamic_range_db;
        v.round().clamp(0.0, 255.0) as u8
    }

    /// Linear amplitude (relative to the frame maximum) that an 8-bit level
    /// represents.
    pub fn amplitude(&self, level: u8) -> f64 {
        libm::pow(10.0, (level as f64 / 255.0 - 1.0) * self.dynamic_range_db / 20.0)
    }

    /// Level back to decibels above the display floor.
    pub fn level_to_db(&self, level: u8) -> f64 {
        level as f64 * self.dynamic_range_db / 255.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    /// Mean scatterer amplitude, linear scale.
    pub echogenicity: f64,
    /// dB / (MHz · cm).
    pub attenuation: f64,
    /// Fraction of sites holding a scatterer, in (0, 1].
    pub density: f64,
}

impl TissueParams {
    fn validate(&self, class: u8) -> Result<()> {
        let ok = self.echogenicity >= 0.0
            && self.echogenicity.is_finite()
            && self.attenuation >= 0.0
            && self.attenuation.is_finite()
            && self.density > 0.0
            && self.density <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "tissue parameters for class {class} out of range: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueEchoParams {
    pub classes: BTreeMap<u8, TissueParams>,
}

impl Default for TissueEchoParams {
    fn default() -> Self {
        let mut classes = BTreeMap::new();
        classes.insert(
            LUMEN,
            TissueParams {
                echogenicity: 0.1,
                attenuation: 0.1,
                density: 1.0,
            },
        );
        classes.insert(
            MEDIA,
            TissueParams {
                echogenicity: 0.22,
                attenuation: 0.8,
                density: 1.0,
            },
        );
        classes.insert(
            EXTERNAL,
            TissueParams {
                echogenicity: 0.6,
                attenuation: 0.6,
                density: 1.0,
            },
        );
        Self { classes }
    }
}

impl TissueEchoParams {
    fn lookup(&self, class: u8) -> Result<Option<&TissueParams>> {
        if class == BACKGROUND {
            return Ok(None);
        }
        self.classes.get(&class).map(Some).ok_or(Error::UnknownClass(class))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfSpec {
    pub center_frequency_mhz: f64,
    /// m/s.
    pub speed_of_sound: f64,
    /// Gaussian sigmas, in samples and scan lines respectively.
    pub axial_sigma: f64,
    pub lateral_sigma: f64,
}

/// Separable kernel: `axial[i] * lateral[j]`, unit total energy, odd sides.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub axial: Vec<f64>,
    pub lateral: Vec<f64>,
    pub period_samples: f64,
}

impl PsfSpec {
    /// Axial oscillation period in samples: half a wavelength per sample of
    /// two-way travel.
    pub fn period_samples(&self, radial_step_mm: f64) -> f64 {
        let wavelength_mm = self.speed_of_sound / (self.center_frequency_mhz * 1e3);
        wavelength_mm / (2.0 * radial_step_mm)
    }

    pub fn kernel(&self, radial_step_mm: f64) -> Result<PsfKernel> {
        let ok = self.center_frequency_mhz > 0.0
            && self.speed_of_sound > 0.0
            && self.axial_sigma > 0.0
            && self.lateral_sigma > 0.0
            && radial_step_mm > 0.0;
        if !ok {
            return Err(Error::InvalidInput(format!("invalid PSF {self:?}")));
        }
        let period = self.period_samples(radial_step_mm);
        let gauss = |x: f64, s: f64| libm::exp(-x * x / (2.0 * s * s));
        let ha = (4.0 * self.axial_sigma).ceil() as i64;
        let hl = (4.0 * self.lateral_sigma).ceil() as i64;
        let mut axial: Vec<f64> = (-ha..=ha)
            .map(|i| {
                let x = i as f64;
                gauss(x, self.axial_sigma) * libm::cos(2.0 * std::f64::consts::PI * x / period)
            })
            .collect();
        let mut lateral: Vec<f64> = (-hl..=hl).map(|j| gauss(j as f64, self.lateral_sigma)).collect();
        for k in [&mut axial, &mut lateral] {
            let e = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.iter_mut().for_each(|v| *v /= e);
        }
        Ok(PsfKernel {
            axial,
            lateral,
            period_samples: period,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub tissue: TissueEchoParams,
    pub speed_of_sound: f64,
    pub axial_sigma: f64,
    pub lateral_sigma: f64,
    pub dynamic_range_db: f64,
    pub radial_step_mm: f64,
    /// Overrides the acquisition frequency carried by a compressed file.
    pub center_frequency_mhz: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tissue: TissueEchoParams::default(),
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            axial_sigma: DEFAULT_AXIAL_SIGMA,
            lateral_sigma: DEFAULT_LATERAL_SIGMA,
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
            radial_step_mm: DEFAULT_RADIAL_STEP_MM,
            center_frequency_mhz: None,
        }
    }
}

impl SynthConfig {
    pub fn log(&self) -> LogCompression {
        LogCompression {
            dynamic_range_db: self.dynamic_range_db,
        }
    }

    pub fn psf(&self, acquisition_mhz: f64) -> PsfSpec {
        PsfSpec {
            center_frequency_mhz: self.center_frequency_mhz.unwrap_or(acquisition_mhz),
            speed_of_sound: self.speed_of_sound,
            axial_sigma: self.axial_sigma,
            lateral_sigma: self.lateral_sigma,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults. Tissue keys are `<class name>.<field>` using the IVUS
    /// class names.
    pub fn parse(text: &str) -> Result<Self> {
        let table = ClassTable::ivus();
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {line:?}")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("value for {key} is not a number")))?;
            match key {
                "dynamic_range_db" => cfg.dynamic_range_db = value,
                "radial_step_mm" => cfg.radial_step_mm = value,
                "psf.speed_of_sound" => cfg.speed_of_sound = value,
                "psf.axial_sigma" => cfg.axial_sigma = value,
                "psf.lateral_sigma" => cfg.lateral_sigma = value,
                "psf.center_frequency_mhz" => cfg.center_frequency_mhz = Some(value),
                _ => {
                    let (class, field) = key.split_once('.').ok_or_else(|| err(format!("unknown key {key}")))?;
                    let id = table
                        .classes()
                        .iter()
                        .find(|c| c.name == class)
                        .map(|c| c.id)
                        .ok_or_else(|| err(format!("unknown tissue class {class}")))?;
                    let entry = cfg
                        .tissue
                        .classes
                        .get_mut(&id)
                        .expect("IVUS defaults cover every class");
                    match field {
                        "echogenicity" => entry.echogenicity = value,
                        "attenuation" => entry.attenuation = value,
                        "density" => entry.density = value,
                        _ => return Err(err(format!("unknown tissue field {field}"))),
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let table = ClassTable::ivus();
        let mut s = String::new();
        let _ = writeln!(s, "dynamic_range_db = {}", self.dynamic_range_db);
        let _ = writeln!(s, "radial_step_mm = {}", self.radial_step_mm);
        let _ = writeln!(s, "psf.speed_of_sound = {}", self.speed_of_sound);
        let _ = writeln!(s, "psf.axial_sigma = {}", self.axial_sigma);
        let _ = writeln!(s, "psf.lateral_sigma = {}", self.lateral_sigma);
        if let Some(f) = self.center_frequency_mhz {
            let _ = writeln!(s, "psf.center_frequency_mhz = {f}");
        }
        for (id, p) in &self.tissue.classes {
            let name = table.name(*id).unwrap_or("unknown");
            let _ = writeln!(s, "{name}.echogenicity = {}", p.echogenicity);
            let _ = writeln!(s, "{name}.attenuation = {}", p.attenuation);
            let _ = writeln!(s, "{name}.density = {}", p.density);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.tissue.classes {
            p.validate(*id)?;
        }
        if !(self.dynamic_range_db > 0.0 && self.radial_step_mm > 0.0) {
            return Err(Error::InvalidInput(
                "dynamic range and radial step must be positive".into(),
            ));
        }
        self.psf(20.0).kernel(self.radial_step_mm).map(|_| ())
    }
}

/// Post-processing stage applied to the simulated polar frame.
pub trait Refiner: Send + Sync {
    fn refine(&self, frame: PolarFrame) -> PolarFrame;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, frame: PolarFrame) -> PolarFrame {
        frame
    }
}

pub fn echogenicity_map(labels: &LabelMap, params: &TissueEchoParams) -> Result<Vec<f64>> {
    labels
        .labels
        .iter()
        .map(|&l| Ok(params.lookup(l)?.map_or(0.0, |p| p.echogenicity)))
        .collect()
}

fn per_site<F: Fn(&TissueParams) -> f64>(labels: &LabelMap, params: &TissueEchoParams, f: F) -> Result<Vec<f64>> {
    labels
        .labels
        .iter()
        .map(|&l| Ok(params.lookup(l)?.map_or(0.0, &f)))
        .collect()
}

/// One-way amplitude gain `10^(-A/20)`, where `A` is the attenuation in dB
/// accumulated along the scan line through whatever tissue lies between the
/// transducer and each sample.
pub fn attenuation_gain(labels: &LabelMap, params: &TissueEchoParams, frequency_mhz: f64) -> Result<Vec<f64>> {
    let g = &labels.geometry;
    let alpha = per_site(labels, params, |p| p.attenuation)?;
    let step_cm = g.radial_step / 10.0;
    let mut gain = vec![1.0; g.len()];
    for t in 0..g.num_scan_lines {
        let mut db = 0.0;
        for r in 0..g.samples_per_line {
            let i = g.index(r, t);
            gain[i] = libm::pow(10.0, -db / 20.0);
            db += alpha[i] * frequency_mhz * step_cm;
        }
    }
    Ok(gain)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(1.0 - u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Random point scatterers: each site is occupied with probability
/// `density[i]` and then carries a `Normal(0, echo[i]²)` amplitude.
///
/// Three uniforms are drawn per site in raster order regardless of
/// occupancy, so the field is a pure function of the seed.
pub fn scatterer_field(echo: &[f64], density: &[f64], seed: u64) -> Result<Vec<f64>> {
    if echo.len() != density.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} echogenicities vs {} densities",
            echo.len(),
            density.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(echo
        .iter()
        .zip(density)
        .map(|(&e, &d)| {
            let occupied = rng.gen::<f64>() < d;
            let z = standard_normal(&mut rng);
            if occupied {
                e * z
            } else {
                0.0
            }
        })
        .collect())
}

/// RF image: lateral pass with wrap-around in θ, then axial pass with zero
/// padding in r. Each output sample sums its taps in a fixed order.
pub fn convolve_psf(field: &[f64], geometry: &ProbeGeometry, psf: &PsfKernel) -> Vec<f64> {
    let n_theta = geometry.num_scan_lines;
    let n_r = geometry.samples_per_line;
    let hl = psf.lateral.len() / 2;
    let ha = psf.axial.len() / 2;
    let lateral: Vec<f64> = (0..n_r)
        .into_par_iter()
        .flat_map_iter(|r| {
            let row = &field[r * n_theta..(r + 1) * n_theta];
            (0..n_theta).map(move |t| {
                let mut acc = 0.0;
                for (j, &k) in psf.lateral.iter().enumerate() {
                    let tt = (t as i64 + j as i64 - hl as i64).rem_euclid(n_theta as i64) as usize;
                    acc += k * row[tt];
                }
                acc
            })
        })
        .collect();
    (0..n_r)
        .into_par_iter()
        .flat_map_iter(|r| {
            let lateral = &lateral;
            (0..n_theta).map(move |t| {
                let mut acc = 0.0;
                for (i, &k) in psf.axial.iter().enumerate() {
                    let rr = r as i64 + i as i64 - ha as i64;
                    if rr >= 0 && (rr as usize) < n_r {
                        acc += k * lateral[rr as usize * n_theta + t];
                    }
                }
                acc
            })
        })
        .collect()
}

/// Axial analytic-signal magnitude of every scan line.
pub fn envelope(rf: &[f64], geometry: &ProbeGeometry) -> Vec<f64> {
    let n_theta = geometry.num_scan_lines;
    let n_r = geometry.samples_per_line;
    let det = EnvelopeDetector::new(n_r);
    let columns: Vec<Vec<f64>> = (0..n_theta)
        .into_par_iter()
        .map(|t| {
            let line: Vec<f64> = (0..n_r).map(|r| rf[r * n_theta + t]).collect();
            det.envelope(&line)
        })
        .collect();
    let mut out = vec![0.0; rf.len()];
    for (t, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[r * n_theta + t] = v;
        }
    }
    out
}

pub fn log_compress(envelope: &[f64], geometry: &ProbeGeometry, log: LogCompression) -> PolarFrame {
    let max = envelope.iter().cloned().fold(0.0, f64::max);
    PolarFrame {
        geometry: *geometry,
        samples: envelope.iter().map(|&e| log.compress(e, max)).collect(),
    }
}

/// Intermediate products of one simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub rf: Vec<f64>,
    pub envelope: Vec<f64>,
    pub frame: PolarFrame,
}

pub fn simulate(labels: &LabelMap, config: &SynthConfig, frequency_mhz: f64, seed: u64) -> Result<Simulation> {
    let g = labels.geometry;
    g.validate()?;
    let echo = echogenicity_map(labels, &config.tissue)?;
    let gain = attenuation_gain(labels, &config.tissue, frequency_mhz)?;
    let density = per_site(labels, &config.tissue, |p| p.density)?;
    let scaled: Vec<f64> = echo.iter().zip(&gain).map(|(e, g)| e * g).collect();
    let field = scatterer_field(&scaled, &density, seed)?;
    let psf = config.psf(frequency_mhz).kernel(g.radial_step)?;
    let rf = convolve_psf(&field, &g, &psf);
    let envelope = envelope(&rf, &g);
    let frame = log_compress(&envelope, &g, config.log());
    Ok(Simulation { rf, envelope, frame })
}

pub fn simulate_bmode(labels: &LabelMap, config: &SynthConfig, frequency_mhz: f64, seed: u64) -> Result<PolarFrame> {
    Ok(simulate(labels, config, frequency_mhz, seed)?.frame)
}

/// Geometry implied by a compressed header; the physical radial step is not
/// transmitted and comes from the synthesis config.
pub fn header_geometry(header: &CompressedHeader, config: &SynthConfig) -> ProbeGeometry {
    ProbeGeometry {
        num_scan_lines: header.num_scan_lines as usize,
        samples_per_line: header.samples_per_line as usize,
        cart_width: header.cart_width as usize,
        cart_height: header.cart_height as usize,
        radial_step: config.radial_step_mm,
        angular_span: 2.0 * std::f64::consts::PI,
    }
}

/// Everything the decompressor reconstructs from a file, in polar form.
#[derive(Debug, Clone)]
pub struct Decompressed {
    pub header: CompressedHeader,
    pub labels: LabelMap,
    pub frame: PolarFrame,
}

pub fn decompress_polar(bytes: &[u8], config: &SynthConfig, seed: u64, refiner: &dyn Refiner) -> Result<Decompressed> {
    let file = codec::read_file(bytes)?;
    let geometry = header_geometry(&file.header, config);
    let contours = file.contour_set()?;
    let labels = rasterize_contours(&contours, &geometry)?;
    let mhz = file.header.acquisition_frequency_khz as f64 / 1000.0;
    let frame = refiner.refine(simulate_bmode(&labels, config, mhz, seed)?);
    Ok(Decompressed {
        header: file.header,
        labels,
        frame,
    })
}

pub fn decompress(bytes: &[u8], config: &SynthConfig, seed: u64) -> Result<CartesianFrame> {
    let d = decompress_polar(bytes, config, seed, &IdentityRefiner)?;
    Ok(polar_to_cartesian(&d.frame))
}
