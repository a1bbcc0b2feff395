//! Fringe counting on square crops of antinode regions.
//!
//! A crop maps the antinode ellipse onto the inscribed circle of a square
//! patch, which makes the fringes concentric circles. Each radial spoke is
//! then smoothed, detrended, and its alternating extrema are counted: two
//! extrema per ring.

use serde::{Deserialize, Serialize};

use crate::annot::EllipseAnnotation;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Half-width of the crop in normalized elliptical units.
pub const CROP_EXTENT: f64 = 1.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CropPatch {
    pub pixels: GrayImage,
    pub source_ellipse: EllipseAnnotation,
    pub size: usize,
}

impl CropPatch {
    /// Patch coordinates of the ellipse center.
    pub fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    /// Radius in patch pixels of the ellipse boundary.
    pub fn boundary_radius(&self) -> f64 {
        self.size as f64 / (2.0 * CROP_EXTENT)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> CropPatch {
        CropPatch {
            pixels: self.pixels.map(f),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    /// Samples from the center (index 0) to the boundary (last index).
    pub samples: Vec<f64>,
    pub spoke_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingCount {
    pub value: f64,
    pub per_spoke: Vec<f64>,
    /// Median absolute deviation of the per-spoke counts.
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detrend {
    None,
    Linear,
    Quadratic,
    /// `c0 + c2 r^2`: a radially symmetric bowl, which leaves a full
    /// low-order fringe intact where a general quadratic would absorb it.
    EvenQuadratic,
}

impl std::str::FromStr for Detrend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Detrend::None),
            "linear" => Ok(Detrend::Linear),
            "quadratic" => Ok(Detrend::Quadratic),
            "even_quadratic" => Ok(Detrend::EvenQuadratic),
            other => Err(Error::invalid(format!("unknown detrend mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub crop_size: usize,
    pub spokes: usize,
    pub samples: usize,
    pub smooth_width: usize,
    /// Minimum extremum prominence as a fraction of the spoke's range.
    pub prominence: f64,
    pub detrend: Detrend,
    /// Extrema in the outermost fraction of a spoke are ignored (rim).
    pub edge_guard: f64,
    /// Each spoke is averaged with this many neighbours on either side
    /// before counting.
    pub angular_smooth: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            crop_size: 128,
            spokes: 36,
            samples: 100,
            smooth_width: 5,
            prominence: 0.1,
            detrend: Detrend::EvenQuadratic,
            edge_guard: 0.03,
            angular_smooth: 2,
        }
    }
}

impl RingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 32 {
            return Err(Error::invalid("crop_size must be >= 32"));
        }
        if self.spokes < 8 || self.samples < 32 {
            return Err(Error::invalid("need >= 8 spokes and >= 32 samples"));
        }
        if self.smooth_width == 0 {
            return Err(Error::invalid("smooth_width must be >= 1"));
        }
        Ok(())
    }
}

fn sample_patch(image: &GrayImage, e: &EllipseAnnotation, size: usize) -> CropPatch {
    let (c, s) = e.axis();
    let center = (size as f64 - 1.0) / 2.0;
    let step = 2.0 * CROP_EXTENT / size as f64;
    let pixels = GrayImage::from_fn(size, size, |j, i| {
        let u = (j as f64 - center) * step;
        let v = (i as f64 - center) * step;
        let along = u * e.a;
        let across = v * e.b;
        let x = e.cx + along * c - across * s;
        let y = e.cy + along * s + across * c;
        image.bilinear(x, y)
    });
    CropPatch {
        pixels,
        source_ellipse: *e,
        size,
    }
}

/// Resample the ellipse-aligned frame into a `size x size` patch covering
/// `[-1.1, 1.1]^2` normalized elliptical coordinates. Errors if the ellipse
/// extends outside the image.
pub fn crop_and_square(image: &GrayImage, e: &EllipseAnnotation, size: usize) -> Result<CropPatch> {
    if size < 32 {
        return Err(Error::invalid(format!("crop size {size} < 32")));
    }
    let bb = e.bbox();
    let (w, h) = (image.width() as f64, image.height() as f64);
    if bb.x_min < -0.5 || bb.y_min < -0.5 || bb.x_max > w - 0.5 || bb.y_max > h - 0.5 {
        return Err(Error::invalid(format!(
            "ellipse at ({:.1}, {:.1}) extends outside the {}x{} image",
            e.cx,
            e.cy,
            image.width(),
            image.height()
        )));
    }
    Ok(sample_patch(image, e, size))
}

/// Like [`crop_and_square`] but samples outside the image are edge-clamped.
pub fn crop_and_square_clamped(image: &GrayImage, e: &EllipseAnnotation, size: usize) -> CropPatch {
    sample_patch(image, e, size.max(32))
}

/// `spokes` equally spaced radial profiles, each with `samples` points from
/// the patch center to the ellipse boundary.
pub fn extract_spokes(patch: &CropPatch, spokes: usize, samples: usize) -> Vec<RadialProfile> {
    let c = patch.center();
    let r = patch.boundary_radius();
    (0..spokes)
        .map(|k| {
            let angle = k as f64 * std::f64::consts::TAU / spokes as f64;
            let (dx, dy) = (libm::cos(angle), libm::sin(angle));
            let samples = (0..samples)
                .map(|i| {
                    let t = r * i as f64 / (samples - 1) as f64;
                    patch.pixels.bilinear(c + t * dx, c + t * dy)
                })
                .collect();
            RadialProfile {
                samples,
                spoke_angle: angle,
            }
        })
        .collect()
}

fn moving_average(p: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = p.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            p[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Solve the normal equations of a small least-squares fit.
fn least_squares(basis: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = basis.len();
    let mut m = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            m[i][j] = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
        }
        m[i][k] = basis[i].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    // Gaussian elimination with partial pivoting
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        for row in 0..k {
            if row != col {
                let f = m[row][col] / m[col][col];
                for c in col..=k {
                    m[row][c] -= f * m[col][c];
                }
            }
        }
    }
    Some((0..k).map(|i| m[i][k] / m[i][i]).collect())
}

fn detrend(p: &[f64], mode: Detrend) -> Vec<f64> {
    let n = p.len();
    let r: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
    let ones = vec![1.0; n];
    let basis: Vec<Vec<f64>> = match mode {
        Detrend::None => {
            let mean = p.iter().sum::<f64>() / n as f64;
            return p.iter().map(|v| v - mean).collect();
        }
        Detrend::Linear => vec![ones, r.clone()],
        Detrend::Quadratic => vec![ones, r.clone(), r.iter().map(|v| v * v).collect()],
        Detrend::EvenQuadratic => vec![ones, r.iter().map(|v| v * v).collect()],
    };
    match least_squares(&basis, p) {
        Some(coef) => (0..n)
            .map(|i| p[i] - basis.iter().zip(&coef).map(|(b, c)| b[i] * c).sum::<f64>())
            .collect(),
        None => detrend(p, Detrend::None),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Trend {
    Unknown,
    Rising,
    Falling,
}

/// Alternating extrema whose swing to the next extremum reaches `min_swing`
/// (a hysteresis zigzag). Returns indices in increasing order.
fn alternating_extrema(p: &[f64], min_swing: f64) -> Vec<usize> {
    let mut out = Vec::new();
    if p.is_empty() {
        return out;
    }
    let (mut hi, mut lo) = (0usize, 0usize);
    let mut trend = Trend::Unknown;
    for i in 1..p.len() {
        match trend {
            Trend::Unknown => {
                if p[i] > p[hi] {
                    hi = i;
                }
                if p[i] < p[lo] {
                    lo = i;
                }
                if p[i] <= p[hi] - min_swing {
                    out.push(hi);
                    trend = Trend::Falling;
                    lo = i;
                } else if p[i] >= p[lo] + min_swing {
                    out.push(lo);
                    trend = Trend::Rising;
                    hi = i;
                }
            }
            Trend::Falling => {
                if p[i] < p[lo] {
                    lo = i;
                } else if p[i] >= p[lo] + min_swing {
                    out.push(lo);
                    trend = Trend::Rising;
                    hi = i;
                }
            }
            Trend::Rising => {
                if p[i] > p[hi] {
                    hi = i;
                } else if p[i] <= p[hi] - min_swing {
                    out.push(hi);
                    trend = Trend::Falling;
                    lo = i;
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Rings along one spoke, at half-ring resolution.
///
/// Interior extrema are counted; the profile is even through the center, so
/// the center itself is an extremum whenever the phase left between it and
/// the innermost counted extremum is at least half a fringe spacing.
pub fn count_spoke(samples: &[f64], cfg: &RingConfig) -> f64 {
    let n = samples.len();
    if n < 3 {
        return 0.0;
    }
    let smoothed = moving_average(samples, cfg.smooth_width.max(1));
    let d = detrend(&smoothed, cfg.detrend);
    let (min, max) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = smoothed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let range = max - min;
    if !(range > 1e-12 * (1.0 + scale)) {
        return 0.0;
    }
    let swing = cfg.prominence * range;
    let last = (n - 1) as f64;
    let guard = (1.0 - cfg.edge_guard) * last;
    let mut ext: Vec<usize> = alternating_extrema(&d, swing)
        .into_iter()
        .filter(|&i| i > 0 && i < n - 1 && (i as f64) < guard)
        .collect();

    // The rim itself is a bright fringe at zero phase; an extremum closer to
    // the edge than half a fringe spacing is the rim, not an inner fringe.
    if let Some(&outer) = ext.last() {
        let gap = last - outer as f64;
        let rim = if ext.len() == 1 {
            gap < 0.1 * last
        } else {
            let inner: Vec<f64> = ext.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
            gap < 0.5 * median(&inner)
        };
        if rim {
            ext.pop();
        }
    }

    let mut count = ext.len();
    if count == 0 {
        if (d[0] - d[n - 1]).abs() >= swing {
            count = 1;
        }
    } else {
        let mut spacing: Vec<f64> = ext.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        spacing.push(last - *ext.last().expect("nonempty") as f64);
        spacing.sort_by(f64::total_cmp);
        let half_period = spacing[spacing.len() / 2];
        if ext[0] as f64 >= 0.5 * half_period {
            count += 1;
        }
    }
    count as f64 / 2.0
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Count rings in a patch: median of the per-spoke counts.
pub fn count_rings(patch: &CropPatch, cfg: &RingConfig) -> RingCount {
    let spokes = extract_spokes(patch, cfg.spokes.max(1), cfg.samples.max(3));
    let k = spokes.len();
    let h = cfg.angular_smooth.min((k - 1) / 2);
    let per_spoke: Vec<f64> = (0..k)
        .map(|i| {
            let mut avg = vec![0.0; spokes[i].samples.len()];
            for j in 0..=2 * h {
                let s = &spokes[(i + k + j - h) % k].samples;
                for (a, v) in avg.iter_mut().zip(s) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= (2 * h + 1) as f64);
            count_spoke(&avg, cfg)
        })
        .collect();
    let value = median(&per_spoke);
    let dev: Vec<f64> = per_spoke.iter().map(|v| (v - value).abs()).collect();
    RingCount {
        value,
        spread: median(&dev),
        per_spoke,
    }
}

/// Independent check: sign changes of the mean-subtracted, unsmoothed
/// profile, halved.
pub fn count_rings_oracle(profile: &RadialProfile) -> f64 {
    let p = &profile.samples;
    if p.is_empty() {
        return 0.0;
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let mut crossings = 0usize;
    let mut prev = 0i8;
    for &v in p {
        let d = v - mean;
        let sign = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        };
        if sign != 0 {
            if prev != 0 && sign != prev {
                crossings += 1;
            }
            prev = sign;
        }
    }
    crossings as f64 / 2.0
}
