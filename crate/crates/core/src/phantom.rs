//! Synthetic vessel-like phantoms with ground-truth contours and labels, and
//! reproducible datasets of simulated frames built from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::CompressedFile;
use crate::error::{Error, Result};
use crate::grid::{rasterize_contours, LabelMap, PolarFrame, ProbeGeometry, BACKGROUND, EXTERNAL, LUMEN, MEDIA};
use crate::pgm;
use crate::segmenter::{regularize_radii, Boundary, ContourSet};
use crate::synth::{simulate_bmode, SynthConfig};

pub const MAX_HARMONICS: usize = 3;
pub const MAX_HARMONIC_FREQUENCY: u32 = 8;
pub const DEFAULT_DEAD_ZONE: usize = 10;
pub const DEFAULT_FREQUENCY_KHZ: u32 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub amplitude: f64,
    /// Cycles per revolution.
    pub frequency: u32,
    pub phase: f64,
}

/// `base + Σ amplitude · sin(frequency · θ + phase)` in radial samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusProfile {
    pub class_id: u8,
    pub base: f64,
    pub harmonics: Vec<Harmonic>,
}

impl RadiusProfile {
    pub fn radius(&self, theta: f64) -> f64 {
        self.base
            + self
                .harmonics
                .iter()
                .map(|h| h.amplitude * libm::sin(h.frequency as f64 * theta + h.phase))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub geometry: ProbeGeometry,
    /// Boundaries from the catheter outwards.
    pub boundaries: Vec<RadiusProfile>,
    /// Samples nearest the catheter carry no signal and are labelled background.
    pub dead_zone: usize,
    /// Fraction of tissue labels replaced by a random class.
    pub noise_level: f64,
}

impl PhantomSpec {
    /// Concentric lumen and media rings without perturbation.
    pub fn rings(geometry: ProbeGeometry, lumen: f64, media: f64) -> Self {
        Self {
            geometry,
            boundaries: vec![
                RadiusProfile {
                    class_id: LUMEN,
                    base: lumen,
                    harmonics: vec![],
                },
                RadiusProfile {
                    class_id: MEDIA,
                    base: media,
                    harmonics: vec![],
                },
            ],
            dead_zone: DEFAULT_DEAD_ZONE,
            noise_level: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::InfeasibleSpec(format!(
                "noise level {} outside [0, 1)",
                self.noise_level
            )));
        }
        for b in &self.boundaries {
            if b.harmonics.len() > MAX_HARMONICS {
                return Err(Error::InfeasibleSpec(format!(
                    "{} harmonics, at most {MAX_HARMONICS} allowed",
                    b.harmonics.len()
                )));
            }
            if let Some(h) = b
                .harmonics
                .iter()
                .find(|h| h.frequency == 0 || h.frequency > MAX_HARMONIC_FREQUENCY)
            {
                return Err(Error::InfeasibleSpec(format!(
                    "harmonic frequency {} outside [1, {MAX_HARMONIC_FREQUENCY}]",
                    h.frequency
                )));
            }
            if !b.base.is_finite()
                || b.harmonics
                    .iter()
                    .any(|h| !h.amplitude.is_finite() || !h.phase.is_finite())
            {
                return Err(Error::InfeasibleSpec("non-finite profile parameter".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub contours: ContourSet,
    pub labels: LabelMap,
}

/// Rounded radius profiles, regularized into the chain-code alphabet, and
/// their label map. The seed only drives label noise.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry;
    let n = g.num_scan_lines;
    let max_r = g.samples_per_line as i64 - 1;
    let mut boundaries = Vec::with_capacity(spec.boundaries.len());
    for profile in &spec.boundaries {
        let raw: Vec<i64> = (0..n)
            .map(|t| {
                let theta = g.angular_span * t as f64 / n as f64;
                libm::round(profile.radius(theta)) as i64
            })
            .collect();
        if let Some(t) = (0..n).find(|&t| (raw[(t + 1) % n] - raw[t]).abs() > 2) {
            return Err(Error::InfeasibleSpec(format!(
                "class {} boundary jumps by {} at scan line {t}",
                profile.class_id,
                raw[(t + 1) % n] - raw[t]
            )));
        }
        if let Some(t) = (0..n).find(|&t| raw[t] <= spec.dead_zone as i64 || raw[t] > max_r) {
            return Err(Error::InfeasibleSpec(format!(
                "class {} boundary radius {} at scan line {t} outside ({}, {max_r}]",
                profile.class_id, raw[t], spec.dead_zone
            )));
        }
        let radii: Vec<u16> = raw.iter().map(|&r| r as u16).collect();
        let radii = regularize_radii(&radii);
        if radii.iter().any(|&r| r as i64 > max_r || r as usize <= spec.dead_zone) {
            return Err(Error::InfeasibleSpec(format!(
                "class {} boundary leaves the frame after regularization",
                profile.class_id
            )));
        }
        boundaries.push(Boundary::new(profile.class_id, radii));
    }
    let contours = ContourSet { boundaries };
    for pair in contours.boundaries.windows(2) {
        if let Some(t) = (0..n).find(|&t| pair[0].radii[t] > pair[1].radii[t]) {
            return Err(Error::InfeasibleSpec(format!(
                "boundaries of classes {} and {} cross at scan line {t}",
                pair[0].class_id, pair[1].class_id
            )));
        }
    }
    contours.validate(&g)?;
    let mut labels = rasterize_contours(&contours, &g)?;
    let classes = [LUMEN, MEDIA, EXTERNAL];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..g.samples_per_line {
        for t in 0..n {
            let i = g.index(r, t);
            if r < spec.dead_zone {
                labels.labels[i] = BACKGROUND;
            } else if spec.noise_level > 0.0 && rng.gen::<f64>() < spec.noise_level {
                labels.labels[i] = classes[rng.gen_range(0..classes.len())];
            }
        }
    }
    Ok(Phantom { contours, labels })
}

/// Ranges from which random phantom specs are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomRanges {
    pub geometry: ProbeGeometry,
    pub lumen_radius: (f64, f64),
    pub media_thickness: (f64, f64),
    /// Smallest media thickness any perturbation may leave.
    pub min_thickness: f64,
    /// Largest fraction of the base radius the harmonics may displace.
    pub max_relative_amplitude: f64,
    /// Largest radius step per scan line the harmonics may produce.
    pub max_slope: f64,
    pub dead_zone: usize,
    pub noise_level: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            geometry: ProbeGeometry::ivus(384, 256),
            lumen_radius: (55.0, 95.0),
            media_thickness: (28.0, 45.0),
            min_thickness: 14.0,
            max_relative_amplitude: 0.2,
            max_slope: 1.2,
            dead_zone: DEFAULT_DEAD_ZONE,
            noise_level: 0.0,
        }
    }
}

impl PhantomRanges {
    fn harmonics(&self, rng: &mut ChaCha8Rng, budget: f64) -> Vec<Harmonic> {
        let count = rng.gen_range(1..=MAX_HARMONICS);
        let per_line = 2.0 * std::f64::consts::PI / self.geometry.num_scan_lines as f64;
        let share = budget / count as f64;
        let slope_share = self.max_slope / count as f64;
        (0..count)
            .map(|_| {
                let frequency = rng.gen_range(1..=MAX_HARMONIC_FREQUENCY);
                let cap = share.min(slope_share / (frequency as f64 * per_line));
                Harmonic {
                    amplitude: rng.gen_range(0.0..=1.0) * cap,
                    frequency,
                    phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                }
            })
            .collect()
    }

    /// Random lumen and media profiles whose combined perturbations can
    /// neither cross nor exceed the per-scan-line slope cap.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> PhantomSpec {
        let lumen = rng.gen_range(self.lumen_radius.0..=self.lumen_radius.1);
        let thickness = rng.gen_range(self.media_thickness.0..=self.media_thickness.1);
        let slack = (thickness - self.min_thickness).max(0.0) / 2.0;
        let lumen_budget = (self.max_relative_amplitude * lumen)
            .min(slack)
            .min(lumen - self.dead_zone as f64 - 4.0);
        let media_budget = (self.max_relative_amplitude * (lumen + thickness)).min(slack);
        PhantomSpec {
            geometry: self.geometry,
            boundaries: vec![
                RadiusProfile {
                    class_id: LUMEN,
                    base: lumen,
                    harmonics: self.harmonics(rng, lumen_budget.max(0.0)),
                },
                RadiusProfile {
                    class_id: MEDIA,
                    base: lumen + thickness,
                    harmonics: self.harmonics(rng, media_budget),
                },
            ],
            dead_zone: self.dead_zone,
            noise_level: self.noise_level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

/// One phantom with its simulated acquisition.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub role: Role,
    pub spec: PhantomSpec,
    pub phantom: Phantom,
    pub frame: PolarFrame,
    pub simulation_seed: u64,
}

/// The last `max(1, n / 10)` items form the test split.
pub fn test_count(n: usize) -> usize {
    (n / 10).max(1)
}

/// Deterministic phantoms and their simulated frames. Every item's spec and
/// seeds are drawn from one master stream in order, so item `i` does not
/// depend on `n`.
pub fn generate_items(
    n: usize,
    ranges: &PhantomRanges,
    config: &SynthConfig,
    frequency_khz: u32,
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "a dataset needs at least 2 items, got {n}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(PhantomSpec, u64, u64)> = (0..n)
        .map(|_| {
            let spec = ranges.sample(&mut master);
            (spec, master.gen(), master.gen())
        })
        .collect();
    let first_test = n - test_count(n);
    let mhz = frequency_khz as f64 / 1000.0;
    plans
        .into_iter()
        .enumerate()
        .map(|(i, (spec, phantom_seed, simulation_seed))| {
            let phantom = generate_phantom(&spec, phantom_seed)?;
            let frame = simulate_bmode(&phantom.labels, config, mhz, simulation_seed)?;
            Ok(DatasetItem {
                id: format!("p{i:03}"),
                role: if i < first_test { Role::Train } else { Role::Test },
                spec,
                phantom,
                frame,
                simulation_seed,
            })
        })
        .collect()
}

/// File locations of one manifest entry, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub role: String,
    pub frame: PathBuf,
    pub labels: PathBuf,
    pub contours: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id role frame labels contours\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.id,
                e.role,
                e.frame.display(),
                e.labels.display(),
                e.contours.display()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| {
                let f: Vec<&str> = l.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(Error::Config {
                        line: i + 1,
                        message: format!("expected 5 fields, found {}", f.len()),
                    });
                }
                Ok(ManifestEntry {
                    id: f[0].to_string(),
                    role: f[1].to_string(),
                    frame: f[2].into(),
                    labels: f[3].into(),
                    contours: f[4].into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Writes every item's frame, label map and ground-truth contour file plus
/// a manifest into `dir`.
pub fn write_dataset(items: &[DatasetItem], frequency_khz: u32, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for item in items {
        let entry = ManifestEntry {
            id: item.id.clone(),
            role: item.role.as_str().to_string(),
            frame: format!("{}_frame.pgm", item.id).into(),
            labels: format!("{}_labels.pgm", item.id).into(),
            contours: format!("{}.usqz", item.id).into(),
        };
        pgm::write(&dir.join(&entry.frame), &pgm::polar_to_image(&item.frame))?;
        pgm::write(&dir.join(&entry.labels), &pgm::labels_to_image(&item.phantom.labels))?;
        let file = CompressedFile::from_contour_set(&item.spec.geometry, frequency_khz, &item.phantom.contours)?;
        pgm::write_atomic(&dir.join(&entry.contours), &file.to_bytes()?)?;
        manifest.entries.push(entry);
    }
    pgm::write_atomic(&dir.join(MANIFEST_NAME), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

pub fn generate_dataset(
    n: usize,
    ranges: &PhantomRanges,
    config: &SynthConfig,
    frequency_khz: u32,
    seed: u64,
    dir: &Path,
) -> Result<Manifest> {
    let items = generate_items(n, ranges, config, frequency_khz, seed)?;
    write_dataset(&items, frequency_khz, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{read_file, write_file};
    use crate::grid::ClassTable;
    use crate::segmenter::extract_contours;

    #[test]
    fn unperturbed_spec_gives_rings() {
        let g = ProbeGeometry::ivus(128, 64);
        let p = generate_phantom(&PhantomSpec::rings(g, 40.0, 70.0), 0).unwrap();
        assert_eq!(p.contours.boundaries[0].radii, vec![40; 64]);
        assert_eq!(p.contours.boundaries[1].radii, vec![70; 64]);
        assert_eq!(p.labels.get(5, 3), BACKGROUND);
        assert_eq!(p.labels.get(39, 3), LUMEN);
        assert_eq!(p.labels.get(40, 3), MEDIA);
        assert_eq!(p.labels.get(70, 3), EXTERNAL);
    }

    #[test]
    fn steep_harmonic_is_infeasible() {
        let g = ProbeGeometry::ivus(384, 256);
        let mut spec = PhantomSpec::rings(g, 100.0, 200.0);
        // a·k·2π/256 ≈ 5 samples per scan line
        spec.boundaries[0].harmonics.push(Harmonic {
            amplitude: 50.9,
            frequency: 4,
            phase: 0.0,
        });
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::InfeasibleSpec(_))));
        let mut crossing = PhantomSpec::rings(g, 100.0, 104.0);
        crossing.boundaries[0].harmonics.push(Harmonic {
            amplitude: 10.0,
            frequency: 1,
            phase: 0.0,
        });
        assert!(matches!(generate_phantom(&crossing, 0), Err(Error::InfeasibleSpec(_))));
        let mut many = PhantomSpec::rings(g, 100.0, 200.0);
        many.boundaries[0].harmonics = vec![
            Harmonic {
                amplitude: 1.0,
                frequency: 9,
                phase: 0.0
            };
            1
        ];
        assert!(matches!(generate_phantom(&many, 0), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn random_specs_are_valid_and_encodable() {
        let ranges = PhantomRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let table = ClassTable::ivus();
        for i in 0..100 {
            let spec = ranges.sample(&mut rng);
            let p = generate_phantom(&spec, i).unwrap();
            p.contours.validate(&spec.geometry).unwrap();
            let file = CompressedFile::from_contour_set(&spec.geometry, 20_000, &p.contours).unwrap();
            let back = read_file(&write_file(&file).unwrap()).unwrap();
            assert_eq!(back.contour_set().unwrap(), p.contours);
            let thick = p.contours.boundaries[0]
                .radii
                .iter()
                .zip(&p.contours.boundaries[1].radii)
                .map(|(a, b)| b - a)
                .min()
                .unwrap();
            assert!(thick >= 10, "media thickness {thick}");
            // the label map alone is enough to recover a valid contour set
            let labels = rasterize_contours(&p.contours, &spec.geometry).unwrap();
            extract_contours(&labels, &table)
                .unwrap()
                .validate(&spec.geometry)
                .unwrap();
        }
    }

    #[test]
    fn label_noise_follows_the_seed() {
        let g = ProbeGeometry::ivus(96, 64);
        let mut spec = PhantomSpec::rings(g, 30.0, 60.0);
        spec.noise_level = 0.05;
        let a = generate_phantom(&spec, 1).unwrap();
        assert_eq!(a, generate_phantom(&spec, 1).unwrap());
        assert_ne!(a.labels, generate_phantom(&spec, 2).unwrap().labels);
        let clean = generate_phantom(
            &PhantomSpec {
                noise_level: 0.0,
                ..spec
            },
            1,
        )
        .unwrap();
        let changed = a
            .labels
            .labels
            .iter()
            .zip(&clean.labels.labels)
            .filter(|(x, y)| x != y)
            .count();
        let frac = changed as f64 / g.len() as f64;
        // two thirds of replacements pick a different class
        assert!((0.02..0.05).contains(&frac), "{frac}");
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                id: "p000".into(),
                role: "train".into(),
                frame: "p000_frame.pgm".into(),
                labels: "p000_labels.pgm".into(),
                contours: "p000.usqz".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("a b c").is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(test_count(10), 1);
        assert_eq!(test_count(2), 1);
        assert_eq!(test_count(25), 2);
    }
}
