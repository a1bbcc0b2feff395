//! Antinode annotations: the ellipse label model, CSV persistence, and
//! aggregation of multiple volunteers' labels for one frame.
//!
//! Orientation convention: `theta` is in degrees and the major axis points
//! along `(cos theta, sin theta)` in pixel coordinates (x right, y down).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{deg_to_rad, BBox};

pub const CSV_HEADER: [&str; 7] = ["filename", "cx", "cy", "a", "b", "theta", "rings"];

pub const DEFAULT_MIN_SUPPORT: usize = 3;
pub const DEFAULT_AGGREGATION_IOU: f64 = 0.3;

/// One labelled antinode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseAnnotation {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis (pixels).
    pub a: f64,
    /// Semi-minor axis (pixels).
    pub b: f64,
    /// Major-axis orientation in degrees, `[0, 180)`.
    pub theta: f64,
    /// Fringe count, dimensionless.
    pub rings: f64,
}

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Map any angle in degrees into `[0, 180)`.
pub fn normalize_theta(theta: f64) -> f64 {
    let t = theta.rem_euclid(180.0);
    if t >= 180.0 {
        0.0
    } else {
        t
    }
}

impl EllipseAnnotation {
    /// Validated constructor; `theta` is normalized into `[0, 180)`.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64, rings: f64) -> Result<Self> {
        let e = EllipseAnnotation {
            cx,
            cy,
            a,
            b,
            theta: normalize_theta(theta),
            rings,
        };
        match e.validate().first() {
            None => Ok(e),
            Some(fe) => Err(Error::invalid(fe.to_string())),
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("cx", self.cx),
            ("cy", self.cy),
            ("a", self.a),
            ("b", self.b),
            ("theta", self.theta),
            ("rings", self.rings),
        ] {
            if !v.is_finite() {
                errs.push(FieldError::new(name, format!("{name} is not finite")));
            }
        }
        if !errs.is_empty() {
            return errs;
        }
        if self.b <= 0.0 {
            errs.push(FieldError::new("b", "b must be > 0"));
        }
        if self.a < self.b {
            errs.push(FieldError::new("a", "a < b"));
        }
        if !(0.0..180.0).contains(&self.theta) {
            errs.push(FieldError::new("theta", "theta must lie in [0, 180)"));
        }
        if self.rings < 0.0 {
            errs.push(FieldError::new("rings", "rings must be >= 0"));
        }
        errs
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    pub fn with_rings(mut self, rings: f64) -> Self {
        self.rings = rings;
        self
    }

    pub fn translated(mut self, dx: f64, dy: f64) -> Self {
        self.cx += dx;
        self.cy += dy;
        self
    }

    /// Unit vector of the major axis.
    #[inline]
    pub fn axis(&self) -> (f64, f64) {
        let t = deg_to_rad(self.theta);
        (libm::cos(t), libm::sin(t))
    }

    /// Normalized elliptical radius of a point: 1 on the boundary.
    #[inline]
    pub fn normalized_radius(&self, x: f64, y: f64) -> f64 {
        let (c, s) = self.axis();
        self.normalized_radius_with(c, s, x, y)
    }

    /// [`Self::normalized_radius`] with a precomputed axis.
    #[inline]
    pub fn normalized_radius_with(&self, cos_t: f64, sin_t: f64, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let along = dx * cos_t + dy * sin_t;
        let across = -dx * sin_t + dy * cos_t;
        let p = along / self.a;
        let q = across / self.b;
        (p * p + q * q).sqrt()
    }

    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.normalized_radius(x, y) < 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }

    /// Point on the boundary at parametric angle `phi` (radians).
    pub fn boundary_point(&self, phi: f64) -> (f64, f64) {
        let (c, s) = self.axis();
        let u = self.a * libm::cos(phi);
        let v = self.b * libm::sin(phi);
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    pub fn bbox(&self) -> BBox {
        ellipse_to_bbox(self)
    }

    /// Integer pixel centers lying strictly inside, in row-major order.
    pub fn raster_pixels(&self) -> Vec<(i64, i64)> {
        let bb = self.bbox();
        let (c, s) = self.axis();
        let mut out = Vec::new();
        for y in bb.y_min.floor() as i64..=bb.y_max.ceil() as i64 {
            for x in bb.x_min.floor() as i64..=bb.x_max.ceil() as i64 {
                if self.normalized_radius_with(c, s, x as f64, y as f64) < 1.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Tight axis-aligned box around an ellipse.
pub fn ellipse_to_bbox(e: &EllipseAnnotation) -> BBox {
    let (c, s) = e.axis();
    let half_w = (e.a * e.a * c * c + e.b * e.b * s * s).sqrt();
    let half_h = (e.a * e.a * s * s + e.b * e.b * c * c).sqrt();
    BBox::from_center(e.cx, e.cy, half_w, half_h)
}

/// Annotations for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// The `filename` column, verbatim.
    pub frame_id: String,
    pub annotations: Vec<EllipseAnnotation>,
}

impl FrameRecord {
    pub fn new(frame_id: impl Into<String>, annotations: Vec<EllipseAnnotation>) -> Self {
        FrameRecord {
            frame_id: frame_id.into(),
            annotations,
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.frame_id.is_empty() {
            errs.push(FieldError::new("frame_id", "frame_id must be nonempty"));
        }
        for (i, e) in self.annotations.iter().enumerate() {
            for fe in e.validate() {
                errs.push(FieldError::new(
                    format!("annotations[{i}].{}", fe.field),
                    fe.message,
                ));
            }
        }
        errs
    }
}

/// One volunteer's labels for a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub volunteer_id: String,
    pub annotations: Vec<EllipseAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolunteerBatch {
    pub frame_id: String,
    pub submissions: Vec<Submission>,
}

/// Format with six significant digits, printed in the shortest form that
/// parses back to the same value.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Parse the annotation CSV. A row whose numeric fields are all empty marks a
/// frame with no annotations.
pub fn parse_annotations(text: &str) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(1, None, e.to_string()))?
        .clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(Error::parse(
            1,
            None,
            format!("expected header '{}'", CSV_HEADER.join(",")),
        ));
    }

    let mut records: Vec<FrameRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(line, None, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != CSV_HEADER.len() {
            return Err(Error::parse(
                line,
                None,
                format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            ));
        }
        let filename = row[0].trim();
        if filename.is_empty() {
            return Err(Error::parse(line, Some("filename"), "empty filename"));
        }
        let slot = *index.entry(filename.to_string()).or_insert_with(|| {
            records.push(FrameRecord::new(filename, Vec::new()));
            records.len() - 1
        });

        if (1..CSV_HEADER.len()).all(|i| row[i].trim().is_empty()) {
            continue;
        }
        let mut vals = [0.0f64; 6];
        for (i, v) in vals.iter_mut().enumerate() {
            let col = CSV_HEADER[i + 1];
            let raw = row[i + 1].trim();
            *v = raw.parse::<f64>().map_err(|_| {
                Error::parse(line, Some(col), format!("cannot parse '{raw}' as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(line, Some(col), "value is not finite"));
            }
        }
        let [cx, cy, a, b, theta, rings] = vals;
        let e = EllipseAnnotation {
            cx,
            cy,
            a,
            b,
            theta: normalize_theta(theta),
            rings,
        };
        if let Some(fe) = e.validate().into_iter().next() {
            return Err(Error::parse(line, Some(&fe.field), fe.message));
        }
        records[slot].annotations.push(e);
    }
    Ok(records)
}

/// Serialize records as CSV. Every record is validated before any output.
pub fn write_annotations(records: &[FrameRecord]) -> Result<String> {
    let mut seen = BTreeSet::new();
    for r in records {
        if let Some(fe) = r.validate().into_iter().next() {
            return Err(Error::invalid(format!("frame '{}': {fe}", r.frame_id)));
        }
        if !seen.insert(r.frame_id.as_str()) {
            return Err(Error::invalid(format!("duplicate frame_id '{}'", r.frame_id)));
        }
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for r in records {
        if r.annotations.is_empty() {
            w.write_record([r.frame_id.as_str(), "", "", "", "", "", ""])
                .map_err(io_err)?;
        }
        for e in &r.annotations {
            w.write_record([
                r.frame_id.clone(),
                fmt_sig6(e.cx),
                fmt_sig6(e.cy),
                fmt_sig6(e.a),
                fmt_sig6(e.b),
                fmt_sig6(e.theta),
                fmt_sig6(e.rings),
            ])
            .map_err(io_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// IoU of two ellipse regions, rasterized on the integer pixel grid.
pub fn ellipse_iou_raster(p: &EllipseAnnotation, q: &EllipseAnnotation) -> f64 {
    let bp = p.bbox();
    let bq = q.bbox();
    if bp.intersection_area(&bq) <= 0.0 {
        return 0.0;
    }
    let (pc, ps) = p.axis();
    let (qc, qs) = q.axis();
    let x0 = bp.x_min.min(bq.x_min).floor() as i64;
    let x1 = bp.x_max.max(bq.x_max).ceil() as i64;
    let y0 = bp.y_min.min(bq.y_min).floor() as i64;
    let y1 = bp.y_max.max(bq.y_max).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (xf, yf) = (x as f64, y as f64);
            let in_p = p.normalized_radius_with(pc, ps, xf, yf) < 1.0;
            let in_q = q.normalized_radius_with(qc, qs, xf, yf) < 1.0;
            if in_p && in_q {
                inter += 1;
            }
            if in_p || in_q {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median orientation of undirected axes, computed on doubled angles.
/// The median is the sample minimizing summed arc distance; ties go to the
/// smaller angle.
fn circular_median_theta(thetas: &[f64]) -> f64 {
    let mut doubled: Vec<f64> = thetas.iter().map(|t| 2.0 * normalize_theta(*t)).collect();
    doubled.sort_by(f64::total_cmp);
    let arc = |x: f64, y: f64| {
        let d = (x - y).abs();
        d.min(360.0 - d)
    };
    let mut best = doubled[0];
    let mut best_cost = f64::INFINITY;
    for &cand in &doubled {
        let cost: f64 = doubled.iter().map(|&d| arc(cand, d)).sum();
        if cost < best_cost - 1e-9 {
            best = cand;
            best_cost = cost;
        }
    }
    best / 2.0
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet((0..n).collect())
    }

    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut j = i;
        while self.0[j] != r {
            let next = self.0[j];
            self.0[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Merge many volunteers' ellipses into consensus labels.
///
/// Ellipses are linked when their rasterized IoU reaches `iou_threshold`
/// (single linkage); a cluster with at least `min_support` distinct
/// volunteers yields the component-wise median ellipse.
pub fn aggregate_volunteers(
    batch: &VolunteerBatch,
    min_support: usize,
    iou_threshold: f64,
) -> Vec<EllipseAnnotation> {
    let min_support = min_support.max(1);
    let items: Vec<(&str, &EllipseAnnotation)> = batch
        .submissions
        .iter()
        .flat_map(|s| s.annotations.iter().map(move |e| (s.volunteer_id.as_str(), e)))
        .collect();
    let n = items.len();
    let mut ds = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if ds.find(i) != ds.find(j) && ellipse_iou_raster(items[i].1, items[j].1) >= iou_threshold
            {
                ds.union(i, j);
            }
        }
    }
    let mut clusters: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        clusters.entry(ds.find(i)).or_default().push(i);
    }

    let mut out: Vec<EllipseAnnotation> = clusters
        .values()
        .filter_map(|members| {
            let support: BTreeSet<&str> = members.iter().map(|&i| items[i].0).collect();
            if support.len() < min_support {
                return None;
            }
            let pick = |f: fn(&EllipseAnnotation) -> f64| {
                let mut v: Vec<f64> = members.iter().map(|&i| f(items[i].1)).collect();
                median(&mut v)
            };
            let thetas: Vec<f64> = members.iter().map(|&i| items[i].1.theta).collect();
            Some(EllipseAnnotation {
                cx: pick(|e| e.cx),
                cy: pick(|e| e.cy),
                a: pick(|e| e.a),
                b: pick(|e| e.b),
                theta: normalize_theta(circular_median_theta(&thetas)),
                rings: pick(|e| e.rings),
            })
        })
        .collect();
    out.sort_by(|p, q| p.cx.total_cmp(&q.cx).then(p.cy.total_cmp(&q.cy)));
    out
}
