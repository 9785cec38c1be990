//! Probe geometry, polar/Cartesian scan conversion and contour rasterization.
//!
//! Polar arrays are stored row-major with the radial sample index as the row:
//! element `(r, t)` lives at `r * num_scan_lines + t`. Scan line `t` points at
//! angle `t * angular_span / num_scan_lines`, measured counterclockwise from the
//! +y (up) axis of the Cartesian frame, whose center is `(W/2, H/2)`. One
//! Cartesian pixel spans one radial step.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::segmenter::ContourSet;

pub const LUMEN: u8 = 0;
pub const MEDIA: u8 = 1;
pub const EXTERNAL: u8 = 2;
pub const BACKGROUND: u8 = 255;

const FULL_TURN: f64 = 2.0 * PI;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueClass {
    pub id: u8,
    pub name: String,
}

/// Tissue classes ordered from the catheter outwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    classes: Vec<TissueClass>,
}

impl ClassTable {
    pub fn new(classes: Vec<TissueClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidInput("class table is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id == BACKGROUND {
                return Err(Error::InvalidInput(format!(
                    "class id {BACKGROUND} is reserved for background"
                )));
            }
            if classes[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::InvalidInput(format!("duplicate class id {}", c.id)));
            }
        }
        Ok(Self { classes })
    }

    /// Lumen, media and external tissue.
    pub fn ivus() -> Self {
        let named = |id, name: &str| TissueClass {
            id,
            name: name.to_string(),
        };
        Self {
            classes: vec![
                named(LUMEN, "lumen"),
                named(MEDIA, "media"),
                named(EXTERNAL, "external"),
            ],
        }
    }

    pub fn classes(&self) -> &[TissueClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn position(&self, id: u8) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn contains(&self, id: u8) -> bool {
        self.position(id).is_some()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeGeometry {
    pub num_scan_lines: usize,
    pub samples_per_line: usize,
    pub cart_width: usize,
    pub cart_height: usize,
    /// Millimetres per radial sample.
    pub radial_step: f64,
    /// Radians covered by the scan lines; `2π` for IVUS.
    pub angular_span: f64,
}

pub const DEFAULT_RADIAL_STEP_MM: f64 = 0.0125;

impl ProbeGeometry {
    /// Full-circle geometry whose Cartesian frame just contains the scanned disc.
    pub fn ivus(samples_per_line: usize, num_scan_lines: usize) -> Self {
        Self {
            num_scan_lines,
            samples_per_line,
            cart_width: 2 * samples_per_line,
            cart_height: 2 * samples_per_line,
            radial_step: DEFAULT_RADIAL_STEP_MM,
            angular_span: FULL_TURN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scan_lines < 8 {
            return Err(Error::InvalidGeometry(format!(
                "need at least 8 scan lines, got {}",
                self.num_scan_lines
            )));
        }
        if self.samples_per_line < 8 {
            return Err(Error::InvalidGeometry(format!(
                "need at least 8 samples per line, got {}",
                self.samples_per_line
            )));
        }
        if self.cart_width < 16 || self.cart_height < 16 {
            return Err(Error::InvalidGeometry(format!(
                "Cartesian frame {}x{} is smaller than 16x16",
                self.cart_width, self.cart_height
            )));
        }
        if !(self.radial_step > 0.0 && self.radial_step.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "radial step must be positive, got {}",
                self.radial_step
            )));
        }
        if !(self.angular_span > 0.0 && self.angular_span <= FULL_TURN + 1e-9) {
            return Err(Error::InvalidGeometry(format!(
                "angular span {} outside (0, 2π]",
                self.angular_span
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_scan_lines * self.samples_per_line
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, r: usize, t: usize) -> usize {
        r * self.num_scan_lines + t
    }

    pub fn is_full_circle(&self) -> bool {
        (self.angular_span - FULL_TURN).abs() < 1e-9
    }

    /// Same polar grid and Cartesian frame; ignores the physical spacing.
    pub fn same_grid(&self, other: &ProbeGeometry) -> bool {
        self.num_scan_lines == other.num_scan_lines
            && self.samples_per_line == other.samples_per_line
            && self.cart_width == other.cart_width
            && self.cart_height == other.cart_height
    }

    fn center(&self) -> (f64, f64) {
        (self.cart_width as f64 / 2.0, self.cart_height as f64 / 2.0)
    }

    /// Fractional (radius, scan-line) coordinates of a Cartesian pixel, or
    /// `None` when it lies outside the scanned region.
    fn polar_coords(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let (cx, cy) = self.center();
        let dx = x as f64 - cx;
        let up = cy - y as f64;
        let r = (dx * dx + up * up).sqrt();
        if r > (self.samples_per_line - 1) as f64 {
            return None;
        }
        let mut theta = libm::atan2(-dx, up);
        if theta < 0.0 {
            theta += FULL_TURN;
        }
        let t = theta / self.angular_span * self.num_scan_lines as f64;
        let t = if self.is_full_circle() {
            t % self.num_scan_lines as f64
        } else if t > (self.num_scan_lines - 1) as f64 {
            return None;
        } else {
            t
        };
        Some((r, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarFrame {
    pub geometry: ProbeGeometry,
    pub samples: Vec<u8>,
}

impl PolarFrame {
    pub fn new(geometry: ProbeGeometry, samples: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if samples.len() != geometry.len() {
            return Err(Error::DimensionMismatch(format!(
                "polar frame needs {} samples, got {}",
                geometry.len(),
                samples.len()
            )));
        }
        Ok(Self { geometry, samples })
    }

    pub fn filled(geometry: ProbeGeometry, value: u8) -> Self {
        Self {
            geometry,
            samples: vec![value; geometry.len()],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, t: usize) -> u8 {
        self.samples[self.geometry.index(r, t)]
    }

    /// Rotates by `k` scan lines: line `t` of the result is line `t - k` here.
    pub fn rotated(&self, k: usize) -> Self {
        Self {
            geometry: self.geometry,
            samples: rotate_lines(&self.samples, self.geometry.num_scan_lines, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartesianFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub valid_mask: Vec<bool>,
}

impl CartesianFrame {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub geometry: ProbeGeometry,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: ProbeGeometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::DimensionMismatch(format!(
                "label map needs {} entries, got {}",
                geometry.len(),
                labels.len()
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn filled(geometry: ProbeGeometry, class: u8) -> Self {
        Self {
            geometry,
            labels: vec![class; geometry.len()],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, t: usize) -> u8 {
        self.labels[self.geometry.index(r, t)]
    }

    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        match self.labels.iter().find(|&&l| l != BACKGROUND && !table.contains(l)) {
            Some(&l) => Err(Error::UnknownClass(l)),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn rotated(&self, k: usize) -> Self {
        Self {
            geometry: self.geometry,
            labels: rotate_lines(&self.labels, self.geometry.num_scan_lines, k),
        }
    }
}

pub(crate) fn rotate_lines<T: Copy>(data: &[T], n_theta: usize, k: usize) -> Vec<T> {
    let k = k % n_theta;
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(n_theta) {
        out.extend((0..n_theta).map(|t| row[(t + n_theta - k) % n_theta]));
    }
    out
}

/// Scan-converts a polar frame with bilinear interpolation.
///
/// The `r = 0` ring is a single physical point, so its value is the mean of
/// every scan line's first sample.
pub fn polar_to_cartesian(frame: &PolarFrame) -> CartesianFrame {
    let g = &frame.geometry;
    let n_theta = g.num_scan_lines;
    let n_r = g.samples_per_line;
    let full = g.is_full_circle();
    let ring0 = frame.samples[..n_theta].iter().map(|&v| v as f64).sum::<f64>() / n_theta as f64;
    let sample = |r: usize, t: usize| -> f64 {
        if r == 0 {
            ring0
        } else {
            frame.get(r, t) as f64
        }
    };

    let (w, h) = (g.cart_width, g.cart_height);
    let mut pixels = vec![0u8; w * h];
    let mut valid_mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some((r, t)) = g.polar_coords(x, y) else {
                continue;
            };
            let r0 = r.floor() as usize;
            let fr = r - r0 as f64;
            let r1 = (r0 + 1).min(n_r - 1);
            let t0 = (t.floor() as usize).min(n_theta - 1);
            let ft = t - t0 as f64;
            let t1 = if full {
                (t0 + 1) % n_theta
            } else {
                (t0 + 1).min(n_theta - 1)
            };
            let near = (1.0 - ft) * sample(r0, t0) + ft * sample(r0, t1);
            let far = (1.0 - ft) * sample(r1, t0) + ft * sample(r1, t1);
            let v = (1.0 - fr) * near + fr * far;
            pixels[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
            valid_mask[y * w + x] = true;
        }
    }
    CartesianFrame {
        width: w,
        height: h,
        pixels,
        valid_mask,
    }
}

/// Resamples a scan-converted frame back onto the polar grid.
///
/// Bilinear weights falling on invalid (out-of-disc) pixels are dropped and
/// the remaining weights renormalized.
pub fn cartesian_to_polar(frame: &CartesianFrame, geometry: &ProbeGeometry) -> Result<PolarFrame> {
    geometry.validate()?;
    if frame.width != geometry.cart_width || frame.height != geometry.cart_height {
        return Err(Error::GeometryMismatch(format!(
            "Cartesian frame is {}x{}, geometry expects {}x{}",
            frame.width, frame.height, geometry.cart_width, geometry.cart_height
        )));
    }
    let (cx, cy) = geometry.center();
    let (w, h) = (frame.width as isize, frame.height as isize);
    let n_theta = geometry.num_scan_lines;
    let mut samples = vec![0u8; geometry.len()];
    for t in 0..n_theta {
        let theta = t as f64 * geometry.angular_span / n_theta as f64;
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        for r in 0..geometry.samples_per_line {
            let x = cx - r as f64 * s;
            let y = cy - r as f64 * c;
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let px = x0 as isize + dx;
                    let py = y0 as isize + dy;
                    let wgt = wx * wy;
                    if wgt == 0.0 || px < 0 || py < 0 || px >= w || py >= h {
                        continue;
                    }
                    let i = py as usize * frame.width + px as usize;
                    if frame.valid_mask[i] {
                        acc += wgt * frame.pixels[i] as f64;
                        weight += wgt;
                    }
                }
            }
            if weight > 0.0 {
                samples[geometry.index(r, t)] = (acc / weight).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(PolarFrame {
        geometry: *geometry,
        samples,
    })
}

/// Nearest-neighbour scan conversion of a label map; out-of-disc pixels are
/// background. Returns row-major `cart_width × cart_height` class ids.
pub fn label_map_to_cartesian(labels: &LabelMap) -> Vec<u8> {
    let g = &labels.geometry;
    let n_theta = g.num_scan_lines;
    let (w, h) = (g.cart_width, g.cart_height);
    let mut out = vec![BACKGROUND; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some((r, t)) = g.polar_coords(x, y) {
                let ri = (r.round() as usize).min(g.samples_per_line - 1);
                let mut ti = t.round() as usize;
                ti = if g.is_full_circle() {
                    ti % n_theta
                } else {
                    ti.min(n_theta - 1)
                };
                out[y * w + x] = labels.get(ri, ti);
            }
        }
    }
    out
}

/// Paints the nested regions described by `contours`.
///
/// Boundary `k` encloses class `contours.boundaries[k].class_id` between the
/// previous boundary and itself; everything beyond the last boundary is
/// external tissue. Zero boundaries yield an all-background map.
pub fn rasterize_contours(contours: &ContourSet, geometry: &ProbeGeometry) -> Result<LabelMap> {
    geometry.validate()?;
    let n_theta = geometry.num_scan_lines;
    let n_r = geometry.samples_per_line;
    if contours.boundaries.is_empty() {
        return Ok(LabelMap::filled(*geometry, BACKGROUND));
    }
    for b in &contours.boundaries {
        if b.radii.len() != n_theta {
            return Err(Error::DimensionMismatch(format!(
                "contour for class {} has {} radii, geometry has {} scan lines",
                b.class_id,
                b.radii.len(),
                n_theta
            )));
        }
        if let Some((t, &r)) = b.radii.iter().enumerate().find(|(_, &r)| r as usize >= n_r) {
            return Err(Error::RangeViolation {
                scan_line: t,
                radius: r as i64,
                max: (n_r - 1) as u16,
            });
        }
    }
    for pair in contours.boundaries.windows(2) {
        for t in 0..n_theta {
            let (inner, outer) = (pair[0].radii[t], pair[1].radii[t]);
            if inner > outer {
                return Err(Error::CrossingContours {
                    scan_line: t,
                    inner,
                    outer,
                });
            }
        }
    }

    let mut labels = vec![EXTERNAL; geometry.len()];
    for t in 0..n_theta {
        let mut start = 0usize;
        for b in &contours.boundaries {
            let end = b.radii[t] as usize;
            for r in start..end {
                labels[geometry.index(r, t)] = b.class_id;
            }
            start = start.max(end);
        }
    }
    Ok(LabelMap {
        geometry: *geometry,
        labels,
    })
}

/// Forces nestedness by raising each boundary to at least the one inside it.
/// Returns the repaired set and whether anything changed.
pub fn clamp_crossing(contours: &ContourSet) -> (ContourSet, bool) {
    let mut out = contours.clone();
    let mut flagged = false;
    for k in 1..out.boundaries.len() {
        let (inner, outer) = out.boundaries.split_at_mut(k);
        let inner = &inner[k - 1];
        for (o, &i) in outer[0].radii.iter_mut().zip(&inner.radii) {
            if *o < i {
                *o = i;
                flagged = true;
            }
        }
    }
    (out, flagged)
}

/// Reads boundary radii straight off a label map: for each boundary class,
/// the first radius on every scan line whose label lies further out in
/// `table` order. Background samples are skipped.
pub fn boundary_radii(labels: &LabelMap, table: &ClassTable) -> Vec<Vec<u16>> {
    let g = &labels.geometry;
    let n_r = g.samples_per_line;
    let order = |l: u8| table.position(l);
    (0..table.len().saturating_sub(1))
        .map(|k| {
            (0..g.num_scan_lines)
                .map(|t| {
                    let mut last_inside = None;
                    for r in 0..n_r {
                        if let Some(p) = order(labels.get(r, t)) {
                            if p <= k {
                                last_inside = Some(r);
                            }
                        }
                    }
                    last_inside.map_or(0, |r| (r + 1).min(n_r - 1)) as u16
                })
                .collect()
        })
        .collect()
}
