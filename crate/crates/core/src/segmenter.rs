//! Compressor front end: pixelwise tissue classification on speckle features
//! and extraction of one single-valued radius contour per tissue boundary.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::Move;
use crate::error::{Error, Result};
use crate::grid::{ClassTable, LabelMap, PolarFrame, ProbeGeometry, TissueClass, BACKGROUND};
use crate::speckle_stats::{feature_map, FeatureStack, FEATURE_NAMES, NUM_FEATURES};
use crate::synth::LogCompression;

/// Width of the majority filter run along each scan line before boundary fitting.
pub const RAY_MAJORITY_WIDTH: usize = 7;
/// Width of the circular median filter applied across scan lines.
pub const CONTOUR_MEDIAN_WIDTH: usize = 9;
pub const DEFAULT_FEATURE_WINDOW: usize = 9;

/// Radius of one tissue boundary on every scan line. `class_id` names the
/// tissue just inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub class_id: u8,
    pub radii: Vec<u16>,
}

impl Boundary {
    pub fn new(class_id: u8, radii: Vec<u16>) -> Self {
        Self { class_id, radii }
    }

    /// Circular deltas all lie in the chain-code alphabet.
    pub fn is_encodable(&self) -> bool {
        let n = self.radii.len();
        (0..n).all(|t| {
            let d = self.radii[(t + 1) % n] as i32 - self.radii[t] as i32;
            Move::from_delta(d).is_some()
        })
    }
}

/// Boundaries ordered from the catheter outwards.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContourSet {
    pub boundaries: Vec<Boundary>,
}

impl ContourSet {
    pub fn validate(&self, geometry: &ProbeGeometry) -> Result<()> {
        let n_theta = geometry.num_scan_lines;
        let max = (geometry.samples_per_line - 1) as u16;
        for b in &self.boundaries {
            if b.radii.len() != n_theta {
                return Err(Error::DimensionMismatch(format!(
                    "boundary of class {} has {} radii for {} scan lines",
                    b.class_id,
                    b.radii.len(),
                    n_theta
                )));
            }
            if let Some((t, &r)) = b.radii.iter().enumerate().find(|(_, &r)| r > max) {
                return Err(Error::RangeViolation {
                    scan_line: t,
                    radius: r as i64,
                    max,
                });
            }
            for t in 0..n_theta {
                let d = b.radii[(t + 1) % n_theta] as i32 - b.radii[t] as i32;
                if Move::from_delta(d).is_none() {
                    return Err(Error::UnencodableDelta { scan_line: t, delta: d });
                }
            }
        }
        for pair in self.boundaries.windows(2) {
            if let Some(t) = (0..n_theta).find(|&t| pair[0].radii[t] > pair[1].radii[t]) {
                return Err(Error::CrossingContours {
                    scan_line: t,
                    inner: pair[0].radii[t],
                    outer: pair[1].radii[t],
                });
            }
        }
        Ok(())
    }
}

/// Nearest encodable circular sequence: the midpoint of the greatest feasible
/// sequence below `radii` and the least feasible one above it, where feasible
/// means every circular delta lies in `[-1, +2]`. Large jumps are spread over
/// neighbouring scan lines. The map is monotone, so nested inputs stay nested.
pub fn regularize_radii(radii: &[u16]) -> Vec<u16> {
    let n = radii.len();
    if n == 0 {
        return Vec::new();
    }
    let mut low: Vec<i64> = radii.iter().map(|&r| r as i64).collect();
    let mut high = low.clone();
    loop {
        let mut changed = false;
        for i in 0..n {
            let j = (i + 1) % n;
            if low[j] > low[i] + 2 {
                low[j] = low[i] + 2;
                changed = true;
            }
            if high[j] < high[i] - 1 {
                high[j] = high[i] - 1;
                changed = true;
            }
        }
        for i in (0..n).rev() {
            let j = (i + 1) % n;
            if low[i] > low[j] + 1 {
                low[i] = low[j] + 1;
                changed = true;
            }
            if high[i] < high[j] - 2 {
                high[i] = high[j] - 2;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    low.iter()
        .zip(&high)
        .map(|(&l, &h)| (l + h).div_euclid(2) as u16)
        .collect()
}

fn circular_median(radii: &[u16], width: usize) -> Vec<u16> {
    let n = radii.len();
    let half = width / 2;
    let mut buf = Vec::with_capacity(width);
    (0..n)
        .map(|t| {
            buf.clear();
            buf.extend((0..width).map(|k| radii[(t + n * (half / n + 1) + k - half) % n]));
            buf.sort_unstable();
            buf[buf.len() / 2]
        })
        .collect()
}

/// Mode filter over a window of class positions (`k` = background slot).
fn majority_filter(ray: &[usize], slots: usize, width: usize) -> Vec<usize> {
    let n = ray.len();
    let half = width / 2;
    let mut counts = vec![0usize; slots];
    let mut out = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0usize, 0usize);
    for r in 0..n {
        let want_lo = r.saturating_sub(half);
        let want_hi = (r + half + 1).min(n);
        while hi < want_hi {
            counts[ray[hi]] += 1;
            hi += 1;
        }
        while lo < want_lo {
            counts[ray[lo]] -= 1;
            lo += 1;
        }
        let own = counts[ray[r]];
        let (best, best_count) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, &c)| (i, c))
            .unwrap();
        out.push(if best_count > own { best } else { ray[r] });
    }
    out
}

/// Boundary radius that best splits a ray into "class position ≤ k" inside
/// and "> k" outside, counting misplaced samples; background samples abstain.
fn fit_step(ray: &[usize], k: usize, background: usize) -> usize {
    let n = ray.len();
    let total_in = ray.iter().filter(|&&p| p <= k).count();
    let mut in_before = 0usize;
    let mut out_before = 0usize;
    let mut best = (total_in, 0usize);
    for b in 1..=n {
        let p = ray[b - 1];
        if p != background {
            if p <= k {
                in_before += 1;
            } else {
                out_before += 1;
            }
        }
        let cost = out_before + (total_in - in_before);
        if cost < best.0 {
            best = (cost, b);
        }
    }
    best.1
}

/// Turns a label map with ring topology into an encodable, nested contour set.
///
/// Each scan line is majority-filtered along r, every boundary is placed at
/// the radius that best separates the classes inside it from those outside,
/// and the radii are then median-filtered across scan lines and regularized
/// into the chain-code alphabet.
pub fn extract_contours(labels: &LabelMap, table: &ClassTable) -> Result<ContourSet> {
    let g = labels.geometry;
    let n_r = g.samples_per_line;
    let n_theta = g.num_scan_lines;
    let k = table.len();
    if k < 2 {
        return Ok(ContourSet::default());
    }
    let background = k;
    let slot = |l: u8| match table.position(l) {
        Some(p) => Ok(p),
        None if l == BACKGROUND => Ok(background),
        None => Err(Error::UnknownClass(l)),
    };

    let mut per_ray: Vec<Vec<u16>> = Vec::with_capacity(n_theta);
    for t in 0..n_theta {
        let ray = (0..n_r).map(|r| slot(labels.get(r, t))).collect::<Result<Vec<_>>>()?;
        let filtered = majority_filter(&ray, k + 1, RAY_MAJORITY_WIDTH);
        if !filtered.contains(&0) {
            return Err(Error::TopologyFailure {
                scan_line: t,
                reason: format!("no {} run on this scan line", table.classes()[0].name),
            });
        }
        let mut radii: Vec<u16> = (0..k - 1)
            .map(|b| fit_step(&filtered, b, background).min(n_r - 1) as u16)
            .collect();
        for b in 1..radii.len() {
            radii[b] = radii[b].max(radii[b - 1]);
        }
        per_ray.push(radii);
    }

    let boundaries = (0..k - 1)
        .map(|b| {
            let raw: Vec<u16> = per_ray.iter().map(|r| r[b]).collect();
            let smooth = circular_median(&raw, CONTOUR_MEDIAN_WIDTH.min(n_theta | 1));
            Boundary::new(table.classes()[b].id, regularize_radii(&smooth))
        })
        .collect();
    let set = ContourSet { boundaries };
    debug_assert!(set.validate(&g).is_ok());
    Ok(set)
}

/// Diagonal-Gaussian Bayes classifier over speckle features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub table: ClassTable,
    pub priors: Vec<f64>,
    pub means: Vec<[f64; NUM_FEATURES]>,
    pub variances: Vec<[f64; NUM_FEATURES]>,
    /// Feature window the model was trained with.
    pub window: usize,
    pub log: LogCompression,
    /// Mean signed radius error of each extracted boundary on the training
    /// set, subtracted from the radii of segmented frames.
    pub boundary_offsets: Vec<f64>,
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Classification works on the logarithm of the mean amplitude so that every
/// class has a comparable spread regardless of its echogenicity.
fn model_space(px: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
    [px[0], px[1], libm::log(px[2].max(f64::MIN_POSITIVE))]
}

pub fn train_classifier(stacks: &[FeatureStack], labels: &[LabelMap]) -> Result<ClassifierModel> {
    train_classifier_with(&ClassTable::ivus(), stacks, labels)
}

pub fn train_classifier_with(
    table: &ClassTable,
    stacks: &[FeatureStack],
    labels: &[LabelMap],
) -> Result<ClassifierModel> {
    if stacks.is_empty() || stacks.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need matching non-empty stacks and labels, got {} and {}",
            stacks.len(),
            labels.len()
        )));
    }
    let (window, log) = (stacks[0].window, stacks[0].log);
    for (s, l) in stacks.iter().zip(labels) {
        if s.window != window || s.log != log {
            return Err(Error::InvalidInput(
                "feature stacks were computed with different settings".into(),
            ));
        }
        if !s.geometry.same_grid(&l.geometry) {
            return Err(Error::GeometryMismatch(
                "feature stack and label map grids differ".into(),
            ));
        }
        l.validate(table)?;
    }
    let k = table.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0f64; NUM_FEATURES]; k];
    let mut all_sum = [0.0f64; NUM_FEATURES];
    for (s, l) in stacks.iter().zip(labels) {
        for (px, &lab) in s.data.iter().zip(&l.labels) {
            if let Some(c) = table.position(lab) {
                let px = model_space(px);
                counts[c] += 1;
                for f in 0..NUM_FEATURES {
                    sums[c][f] += px[f];
                    all_sum[f] += px[f];
                }
            }
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(table.classes()[c].id));
    }
    let total: usize = counts.iter().sum();
    let means: Vec<[f64; NUM_FEATURES]> = (0..k)
        .map(|c| std::array::from_fn(|f| sums[c][f] / counts[c] as f64))
        .collect();
    let all_mean: [f64; NUM_FEATURES] = std::array::from_fn(|f| all_sum[f] / total as f64);

    let mut sq = vec![[0.0f64; NUM_FEATURES]; k];
    let mut all_sq = [0.0f64; NUM_FEATURES];
    for (s, l) in stacks.iter().zip(labels) {
        for (px, &lab) in s.data.iter().zip(&l.labels) {
            if let Some(c) = table.position(lab) {
                let px = model_space(px);
                for f in 0..NUM_FEATURES {
                    let d = px[f] - means[c][f];
                    sq[c][f] += d * d;
                    let a = px[f] - all_mean[f];
                    all_sq[f] += a * a;
                }
            }
        }
    }
    let floor: [f64; NUM_FEATURES] = std::array::from_fn(|f| {
        let scale = all_sq[f] / total as f64;
        VARIANCE_FLOOR * if scale > 0.0 { scale } else { 1.0 }
    });
    let variances = (0..k)
        .map(|c| std::array::from_fn(|f| (sq[c][f] / counts[c] as f64).max(floor[f])))
        .collect();
    let priors = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let mut model = ClassifierModel {
        table: table.clone(),
        priors,
        means,
        variances,
        window,
        log,
        boundary_offsets: vec![0.0; k - 1],
    };
    model.boundary_offsets = boundary_bias(&model, stacks, labels);
    Ok(model)
}

/// Mean signed difference between boundaries extracted from classified
/// training stacks and those extracted from their labels. Frames whose
/// classification or labels lack ring topology are left out.
fn boundary_bias(model: &ClassifierModel, stacks: &[FeatureStack], labels: &[LabelMap]) -> Vec<f64> {
    let nb = model.table.len().saturating_sub(1);
    let mut sums = vec![0.0f64; nb];
    let mut n = 0usize;
    for (s, l) in stacks.iter().zip(labels) {
        let found = extract_contours(&classify(s, model).argmax(), &model.table);
        let truth = extract_contours(l, &model.table);
        if let (Ok(found), Ok(truth)) = (found, truth) {
            for (b, sum) in sums.iter_mut().enumerate() {
                let fr = &found.boundaries[b].radii;
                let tr = &truth.boundaries[b].radii;
                let d: f64 = fr.iter().zip(tr).map(|(&a, &t)| a as f64 - t as f64).sum();
                *sum += d / fr.len() as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return vec![0.0; nb];
    }
    sums.iter().map(|s| s / n as f64).collect()
}

/// Shifts each boundary by its rounded offset, keeping radii in range,
/// nested and encodable.
fn apply_offsets(set: ContourSet, offsets: &[f64], geometry: &ProbeGeometry) -> ContourSet {
    let max = (geometry.samples_per_line - 1) as i64;
    let mut shifted: Vec<Boundary> = Vec::with_capacity(set.boundaries.len());
    for (i, b) in set.boundaries.into_iter().enumerate() {
        let shift = offsets.get(i).map_or(0, |o| libm::round(-o) as i64);
        let floor = shifted.last().map(|p: &Boundary| p.radii.clone());
        let radii: Vec<u16> = b
            .radii
            .iter()
            .enumerate()
            .map(|(t, &r)| {
                let v = (r as i64 + shift).clamp(0, max) as u16;
                floor.as_ref().map_or(v, |f| v.max(f[t]))
            })
            .collect();
        shifted.push(Boundary::new(b.class_id, regularize_radii(&radii)));
    }
    ContourSet { boundaries: shifted }
}

/// Per-pixel class posteriors, `class_ids.len()` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMap {
    pub geometry: ProbeGeometry,
    pub class_ids: Vec<u8>,
    pub probs: Vec<f64>,
}

impl PosteriorMap {
    pub fn pixel(&self, i: usize) -> &[f64] {
        let k = self.class_ids.len();
        &self.probs[i * k..(i + 1) * k]
    }

    pub fn argmax(&self) -> LabelMap {
        let k = self.class_ids.len();
        let labels = self
            .probs
            .chunks_exact(k)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                self.class_ids[best]
            })
            .collect();
        LabelMap {
            geometry: self.geometry,
            labels,
        }
    }
}

impl ClassifierModel {
    fn log_posterior(&self, x: &[f64; NUM_FEATURES], out: &mut [f64]) {
        let x = model_space(x);
        for (c, o) in out.iter_mut().enumerate() {
            let mut ll = libm::log(self.priors[c]);
            for ((&xf, &m), &v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
                let d = xf - m;
                ll -= 0.5 * (libm::log(2.0 * std::f64::consts::PI * v) + d * d / v);
            }
            *o = ll;
        }
    }

    pub fn features(&self, frame: &PolarFrame) -> Result<FeatureStack> {
        feature_map(frame, self.window, self.log)
    }

    /// Writes the model as a text header (terminated by an empty line)
    /// followed by little-endian binary parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let classes: Vec<String> = self
            .table
            .classes()
            .iter()
            .map(|c| format!("{}:{}", c.id, c.name))
            .collect();
        let mut out = Vec::new();
        let _ = writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}");
        let _ = writeln!(out, "classes = {}", classes.join(","));
        let _ = writeln!(out, "features = {}", FEATURE_NAMES.join(","));
        let _ = writeln!(out, "window = {}", self.window);
        let _ = writeln!(out, "dynamic_range_db = {}", self.log.dynamic_range_db);
        let offsets: Vec<String> = self.boundary_offsets.iter().map(|o| o.to_string()).collect();
        let _ = writeln!(out, "boundary_offsets = {}", offsets.join(","));
        out.push(b'\n');
        out.extend_from_slice(&(self.table.len() as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_FEATURES as u32).to_le_bytes());
        for c in 0..self.table.len() {
            out.extend_from_slice(&self.priors[c].to_le_bytes());
            for v in self.means[c].iter().chain(&self.variances[c]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::format("classifier model", m);
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        if first != format!("{MODEL_MAGIC} {MODEL_VERSION}") {
            return Err(bad(format!("unsupported header line {first:?}")));
        }
        let mut classes = None;
        let mut window = None;
        let mut dyn_db = None;
        let mut offsets = None;
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            match key {
                "classes" => {
                    let parsed = value
                        .split(',')
                        .map(|c| {
                            let (id, name) = c.split_once(':').ok_or_else(|| bad(format!("bad class {c:?}")))?;
                            Ok(TissueClass {
                                id: id.parse().map_err(|_| bad(format!("bad class id {id:?}")))?,
                                name: name.to_string(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    classes = Some(ClassTable::new(parsed)?);
                }
                "features" => {
                    if value != FEATURE_NAMES.join(",") {
                        return Err(bad(format!("unsupported feature set {value:?}")));
                    }
                }
                "window" => window = value.parse::<usize>().ok(),
                "dynamic_range_db" => dyn_db = value.parse::<f64>().ok(),
                "boundary_offsets" => {
                    let parsed = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| bad(format!("bad boundary offsets {value:?}")))?
                    };
                    offsets = Some(parsed);
                }
                _ => return Err(bad(format!("unknown header key {key:?}"))),
            }
        }
        let table = classes.ok_or_else(|| bad("missing classes".into()))?;
        let window = window.ok_or_else(|| bad("missing or bad window".into()))?;
        let dynamic_range_db = dyn_db.ok_or_else(|| bad("missing or bad dynamic_range_db".into()))?;
        let boundary_offsets = offsets.ok_or_else(|| bad("missing boundary_offsets".into()))?;
        if boundary_offsets.len() + 1 != table.len() {
            return Err(bad(format!(
                "{} boundary offsets for {} classes",
                boundary_offsets.len(),
                table.len()
            )));
        }

        let mut body = &bytes[split + 2..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if body.len() < n {
                return Err(bad("binary section is truncated".into()));
            }
            let (head, rest) = body.split_at(n);
            body = rest;
            Ok(head)
        };
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if k != table.len() || f != NUM_FEATURES {
            return Err(bad(format!("binary section declares {k} classes x {f} features")));
        }
        let mut priors = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for _ in 0..k {
            priors.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            let mut m = [0.0; NUM_FEATURES];
            let mut v = [0.0; NUM_FEATURES];
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(bad("non-positive variance".into()));
            }
            means.push(m);
            variances.push(v);
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes", body.len())));
        }
        Ok(Self {
            table,
            priors,
            means,
            variances,
            window,
            log: LogCompression { dynamic_range_db },
            boundary_offsets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pgm::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MODEL_MAGIC: &str = "USQZ-MODEL";
const MODEL_VERSION: u32 = 1;

pub fn classify(stack: &FeatureStack, model: &ClassifierModel) -> PosteriorMap {
    let k = model.table.len();
    let probs: Vec<f64> = stack
        .data
        .par_iter()
        .flat_map_iter(|px| {
            let mut lp = vec![0.0; k];
            model.log_posterior(px, &mut lp);
            let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in lp.iter_mut() {
                *v = libm::exp(*v - max);
                z += *v;
            }
            lp.into_iter().map(move |v| v / z)
        })
        .collect();
    PosteriorMap {
        geometry: stack.geometry,
        class_ids: model.table.ids().collect(),
        probs,
    }
}

/// Features, classification and contour extraction for one frame.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub contours: ContourSet,
}

pub fn segment_frame(frame: &PolarFrame, model: &ClassifierModel) -> Result<Segmentation> {
    let stack = model.features(frame)?;
    let labels = classify(&stack, model).argmax();
    let contours = extract_contours(&labels, &model.table)?;
    let contours = apply_offsets(contours, &model.boundary_offsets, &labels.geometry);
    Ok(Segmentation { labels, contours })
}
