//! Evaluation battery: histogram Jensen–Shannon divergences between tissue
//! regions and between frames, attenuation-slope divergences, and overlap
//! metrics for segmentations.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{ClassTable, LabelMap, PolarFrame, BACKGROUND};
use crate::speckle_stats::compensated_sum;
use crate::synth::LogCompression;

pub const DEFAULT_BINS: usize = 64;
pub const MIN_REGION_PIXELS: usize = 100;
pub const DEFAULT_ATTENUATION_WINDOW: usize = 16;
pub const MIN_ATTENUATION_WINDOW: usize = 8;
/// Slope histograms cover `[-SLOPE_RANGE_DB, SLOPE_RANGE_DB]` dB per sample.
pub const SLOPE_RANGE_DB: f64 = 2.0;

/// Equal-width bins over `[lo, hi]`; values outside are clamped into the
/// end bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Binning {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!("bad binning [{lo}, {hi}] x {bins}")));
        }
        Ok(Self { lo, hi, bins })
    }

    /// Grey levels 0..=255.
    pub fn intensity(bins: usize) -> Result<Self> {
        Self::new(0.0, 256.0, bins)
    }

    pub fn slope(bins: usize) -> Result<Self> {
        Self::new(-SLOPE_RANGE_DB, SLOPE_RANGE_DB, bins)
    }

    pub fn bin(&self, v: f64) -> usize {
        let x = (v - self.lo) / (self.hi - self.lo) * self.bins as f64;
        if x.is_nan() || x < 0.0 {
            0
        } else {
            (x as usize).min(self.bins - 1)
        }
    }
}

/// Probability mass over a binning.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub binning: Binning,
    pub probs: Vec<f64>,
    pub sample_count: usize,
}

impl Pmf {
    /// Histogram with one pseudo-count added to every bin before normalizing.
    pub fn from_samples(values: impl IntoIterator<Item = f64>, binning: Binning) -> Result<Self> {
        let mut counts = vec![1u64; binning.bins];
        let mut n = 0usize;
        for v in values {
            counts[binning.bin(v)] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidInput("histogram of an empty sample".into()));
        }
        let total = (n + binning.bins) as f64;
        Ok(Self {
            binning,
            probs: counts.iter().map(|&c| c as f64 / total).collect(),
            sample_count: n,
        })
    }

    pub fn from_probs(probs: Vec<f64>, sample_count: usize) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) || (compensated_sum(probs.iter().copied()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "probabilities must be non-negative and sum to 1".into(),
            ));
        }
        if sample_count == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        Ok(Self {
            binning: Binning::new(0.0, probs.len() as f64, probs.len())?,
            probs,
            sample_count,
        })
    }
}

/// Jensen–Shannon divergence in nats, within `[0, ln 2]`.
pub fn js_divergence(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.binning != q.binning || p.probs.len() != q.probs.len() {
        return Err(Error::BinningMismatch);
    }
    let half_kl = |a: f64, m: f64| if a > 0.0 { 0.5 * a * libm::log(a / m) } else { 0.0 };
    let terms = p.probs.iter().zip(&q.probs).flat_map(|(&a, &b)| {
        let m = 0.5 * (a + b);
        [half_kl(a, m), half_kl(b, m)]
    });
    Ok(compensated_sum(terms).clamp(0.0, std::f64::consts::LN_2))
}

fn region_pmf(frame: &PolarFrame, labels: &LabelMap, class: u8, binning: Binning) -> Result<Pmf> {
    let values: Vec<f64> = frame
        .samples
        .iter()
        .zip(&labels.labels)
        .filter(|(_, &l)| l == class)
        .map(|(&v, _)| v as f64)
        .collect();
    if values.len() < MIN_REGION_PIXELS {
        return Err(Error::InsufficientPixels {
            class,
            count: values.len(),
            required: MIN_REGION_PIXELS,
        });
    }
    Pmf::from_samples(values, binning)
}

fn check_grid(a: &crate::grid::ProbeGeometry, b: &crate::grid::ProbeGeometry) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(Error::GeometryMismatch(format!(
            "{}x{} vs {}x{} polar grids",
            a.samples_per_line, a.num_scan_lines, b.samples_per_line, b.num_scan_lines
        )))
    }
}

/// Class pairs, neighbours first: for three nested classes this is
/// inner–middle, middle–outer, inner–outer.
pub fn class_pairs(table: &ClassTable) -> Vec<(u8, u8)> {
    let ids: Vec<u8> = table.ids().collect();
    let mut pairs = Vec::new();
    for gap in 1..ids.len() {
        for i in 0..ids.len() - gap {
            pairs.push((ids[i], ids[i + gap]));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairValue {
    pub a: u8,
    pub b: u8,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassValue {
    pub class: u8,
    pub value: f64,
}

/// Divergence between the intensity histograms of each pair of tissue regions.
pub fn inter_tissue_jsd(
    frame: &PolarFrame,
    labels: &LabelMap,
    table: &ClassTable,
    binning: Binning,
) -> Result<Vec<PairValue>> {
    check_grid(&frame.geometry, &labels.geometry)?;
    let pmfs = table
        .ids()
        .map(|c| Ok((c, region_pmf(frame, labels, c, binning)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    class_pairs(table)
        .into_iter()
        .map(|(a, b)| {
            Ok(PairValue {
                a,
                b,
                value: js_divergence(&pmfs[&a], &pmfs[&b])?,
            })
        })
        .collect()
}

/// Divergence between two frames' intensity histograms inside each region
/// of a shared label map.
pub fn intra_tissue_jsd(
    a: &PolarFrame,
    b: &PolarFrame,
    labels: &LabelMap,
    table: &ClassTable,
    binning: Binning,
) -> Result<Vec<ClassValue>> {
    check_grid(&a.geometry, &labels.geometry)?;
    check_grid(&b.geometry, &labels.geometry)?;
    table
        .ids()
        .map(|class| {
            Ok(ClassValue {
                class,
                value: js_divergence(
                    &region_pmf(a, labels, class, binning)?,
                    &region_pmf(b, labels, class, binning)?,
                )?,
            })
        })
        .collect()
}

/// Least-squares axial slope of the log envelope, in dB per sample, over
/// windows of `window` samples placed every `window / 2` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationMap {
    pub geometry: crate::grid::ProbeGeometry,
    pub window: usize,
    pub stride: usize,
    /// Window start radii, shared by all scan lines.
    pub starts: Vec<usize>,
    /// `slopes[w * num_scan_lines + t]` for window `w` on scan line `t`.
    pub slopes: Vec<f64>,
}

impl AttenuationMap {
    pub fn center(&self, w: usize) -> usize {
        self.starts[w] + self.window / 2
    }
}

pub fn attenuation_map(frame: &PolarFrame, window: usize, log: LogCompression) -> Result<AttenuationMap> {
    let g = frame.geometry;
    if window < MIN_ATTENUATION_WINDOW || window > g.samples_per_line {
        return Err(Error::InvalidInput(format!(
            "attenuation window {window} outside [{MIN_ATTENUATION_WINDOW}, {}]",
            g.samples_per_line
        )));
    }
    let stride = window / 2;
    let starts: Vec<usize> = (0..=g.samples_per_line - window).step_by(stride).collect();
    let db: Vec<f64> = (0..=255u8).map(|v| log.level_to_db(v)).collect();
    let mean_r = (window - 1) as f64 / 2.0;
    let sxx: f64 = (0..window).map(|i| (i as f64 - mean_r).powi(2)).sum();
    let mut slopes = Vec::with_capacity(starts.len() * g.num_scan_lines);
    for &r0 in &starts {
        for t in 0..g.num_scan_lines {
            let ys = (0..window).map(|i| db[frame.get(r0 + i, t) as usize]);
            let mean_y = ys.clone().sum::<f64>() / window as f64;
            let sxy: f64 = ys.enumerate().map(|(i, y)| (i as f64 - mean_r) * (y - mean_y)).sum();
            slopes.push(sxy / sxx);
        }
    }
    Ok(AttenuationMap {
        geometry: g,
        window,
        stride,
        starts,
        slopes,
    })
}

fn slope_pmf(map: &AttenuationMap, labels: &LabelMap, class: u8, binning: Binning) -> Result<Pmf> {
    let n_theta = map.geometry.num_scan_lines;
    let mut values = Vec::new();
    for w in 0..map.starts.len() {
        let rc = map.center(w);
        for t in 0..n_theta {
            if labels.get(rc, t) == class {
                values.push(map.slopes[w * n_theta + t]);
            }
        }
    }
    if values.len() < MIN_REGION_PIXELS {
        return Err(Error::InsufficientPixels {
            class,
            count: values.len(),
            required: MIN_REGION_PIXELS,
        });
    }
    Pmf::from_samples(values, binning)
}

/// Per-class divergence between slope histograms of two attenuation maps;
/// each window belongs to the class at its centre.
pub fn attenuation_jsd(
    a: &AttenuationMap,
    b: &AttenuationMap,
    labels: &LabelMap,
    table: &ClassTable,
    binning: Binning,
) -> Result<Vec<ClassValue>> {
    check_grid(&a.geometry, &labels.geometry)?;
    check_grid(&b.geometry, &labels.geometry)?;
    if a.window != b.window {
        return Err(Error::InvalidInput("attenuation maps use different windows".into()));
    }
    table
        .ids()
        .map(|class| {
            Ok(ClassValue {
                class,
                value: js_divergence(
                    &slope_pmf(a, labels, class, binning)?,
                    &slope_pmf(b, labels, class, binning)?,
                )?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub se: f64,
    pub sp: f64,
    pub dice: f64,
    pub ppv: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(&self, name: &str, num: u64, den: u64) -> Result<f64> {
        if den > 0 {
            Ok(num as f64 / den as f64)
        } else if self.tp + self.fp + self.fn_ == 0 {
            Ok(1.0)
        } else {
            Err(Error::MetricUndefined(format!("{name} is 0/0 for {self:?}")))
        }
    }

    pub fn metrics(&self) -> Result<OverlapMetrics> {
        Ok(OverlapMetrics {
            se: self.ratio("sensitivity", self.tp, self.tp + self.fn_)?,
            sp: self.ratio("specificity", self.tn, self.tn + self.fp)?,
            dice: self.ratio("Dice", 2 * self.tp, 2 * self.tp + self.fp + self.fn_)?,
            ppv: self.ratio("PPV", self.tp, self.tp + self.fp)?,
        })
    }
}

/// Pixels count as positive when their label is in `region`. Pixels the
/// truth marks as background are not evaluated.
pub fn region_confusion(pred: &LabelMap, truth: &LabelMap, region: &[u8]) -> Result<ConfusionCounts> {
    check_grid(&pred.geometry, &truth.geometry)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if t == BACKGROUND {
            continue;
        }
        match (region.contains(&p), region.contains(&t)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn overlap_metrics(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<OverlapMetrics> {
    region_confusion(pred, truth, &[class])?.metrics()
}

pub fn region_overlap(pred: &LabelMap, truth: &LabelMap, region: &[u8]) -> Result<OverlapMetrics> {
    region_confusion(pred, truth, region)?.metrics()
}

/// Mean and sample standard deviation, printed as `mean(std)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = compensated_sum(values.iter().copied()) / n as f64;
        let std = if n > 1 {
            (compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}({:.2})", self.mean, self.std)
    }
}

/// One evaluated number: which frame, which metric, which class or pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub frame: String,
    pub metric: String,
    pub target: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn push(&mut self, frame: &str, metric: &str, target: &str, value: f64) {
        self.records.push(EvalRecord {
            frame: frame.to_string(),
            metric: metric.to_string(),
            target: target.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.records.extend(other.records);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,metric,target,value\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{:.6}\n", r.frame, r.metric, r.target, r.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("frame,metric,target,value") {
            return Err(Error::format("evaluation CSV", "missing header row"));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(Error::format(
                        "evaluation CSV",
                        format!("row {l:?} has {} fields", f.len()),
                    ));
                }
                Ok(EvalRecord {
                    frame: f[0].to_string(),
                    metric: f[1].to_string(),
                    target: f[2].to_string(),
                    value: f[3]
                        .parse()
                        .map_err(|_| Error::format("evaluation CSV", format!("bad value {:?}", f[3])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    /// `(metric, target) -> summary`, in first-appearance order.
    pub fn summaries(&self) -> Vec<(String, String, Summary)> {
        let mut keys: Vec<(String, String)> = Vec::new();
        let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            let key = (r.metric.clone(), r.target.clone());
            if !values.contains_key(&key) {
                keys.push(key.clone());
            }
            values.entry(key).or_default().push(r.value);
        }
        keys.into_iter()
            .map(|k| {
                let s = Summary::of(&values[&k]);
                (k.0, k.1, s)
            })
            .collect()
    }

    /// Fixed-width table of `mean(std)` per metric and target.
    pub fn summary_table(&self) -> String {
        let rows = self.summaries();
        let mw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let tw = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<mw$}  {:<tw$}  {:>12}  {:>3}\n",
            "metric", "target", "mean(std)", "n"
        );
        for (m, t, s) in rows {
            out.push_str(&format!("{m:<mw$}  {t:<tw$}  {:>12}  {:>3}\n", s.to_string(), s.n));
        }
        out
    }
}

/// Histogram and window settings shared by every per-frame evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub bins: usize,
    pub attenuation_window: usize,
    pub log: LogCompression,
}

impl EvalSettings {
    pub fn new(log: LogCompression) -> Self {
        Self {
            bins: DEFAULT_BINS,
            attenuation_window: DEFAULT_ATTENUATION_WINDOW,
            log,
        }
    }
}

/// Nested regions scored by the overlap metrics: the innermost class, then
/// each region grown by the next class outwards, up to but excluding the
/// outermost class.
pub fn nested_regions(table: &ClassTable) -> Vec<(String, Vec<u8>)> {
    let classes = table.classes();
    (1..classes.len())
        .map(|n| {
            let ids = classes[..n].iter().map(|c| c.id).collect();
            let name = classes[..n]
                .iter()
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>()
                .join("+");
            (name, ids)
        })
        .collect()
}

/// Every metric comparing a decompressed frame with its original inside the
/// ground-truth regions, plus overlap metrics when a segmentation of the
/// decompressed frame is given.
pub fn evaluate_frame(
    id: &str,
    original: &PolarFrame,
    decompressed: &PolarFrame,
    truth: &LabelMap,
    predicted: Option<&LabelMap>,
    table: &ClassTable,
    settings: EvalSettings,
) -> Result<EvalReport> {
    let name = |c: u8| table.name(c).unwrap_or("?").to_string();
    let intensity = Binning::intensity(settings.bins)?;
    let slope = Binning::slope(settings.bins)?;
    let mut report = EvalReport::default();
    for (metric, frame) in [
        ("inter_jsd_original", original),
        ("inter_jsd_decompressed", decompressed),
    ] {
        for v in inter_tissue_jsd(frame, truth, table, intensity)? {
            report.push(id, metric, &format!("{}-{}", name(v.a), name(v.b)), v.value);
        }
    }
    for v in intra_tissue_jsd(original, decompressed, truth, table, intensity)? {
        report.push(id, "intra_jsd", &name(v.class), v.value);
    }
    let a = attenuation_map(original, settings.attenuation_window, settings.log)?;
    let b = attenuation_map(decompressed, settings.attenuation_window, settings.log)?;
    for v in attenuation_jsd(&a, &b, truth, table, slope)? {
        report.push(id, "attenuation_jsd", &name(v.class), v.value);
    }
    if let Some(pred) = predicted {
        for (region_name, region) in nested_regions(table) {
            let m = region_overlap(pred, truth, &region)?;
            for (metric, value) in [("dice", m.dice), ("se", m.se), ("sp", m.sp), ("ppv", m.ppv)] {
                report.push(id, metric, &region_name, value);
            }
        }
    }
    Ok(report)
}
