//! Classical antinode detection.
//!
//! Fringed regions have high local intensity variance, so the detector
//! thresholds a windowed standard-deviation map, cleans the mask, and fits
//! one ellipse per connected component from its second central moments.
//! The window spreads every region outward by up to half its width, so each
//! ellipse is then re-fitted to the bright rim found by a radial search in
//! the intensity image.

use serde::{Deserialize, Serialize};

pub use crate::geometry::BBox;
use crate::annot::{ellipse_to_bbox, normalize_theta, EllipseAnnotation};
use crate::error::{Error, Result};
use crate::geometry::rad_to_deg;
use crate::image::{gaussian_blur, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "otsu" {
            return Ok(Threshold::Otsu);
        }
        s.parse::<f64>()
            .map(Threshold::Fixed)
            .map_err(|_| Error::invalid(format!("threshold must be 'otsu' or a number, got '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Side of the local-contrast window; odd, >= 3.
    pub window: usize,
    /// Components smaller than this many pixels are discarded.
    pub min_area: usize,
    pub threshold: Threshold,
    /// Detections whose boxes overlap above this IoU are merged.
    pub merge_iou: f64,
    /// Local std must also reach this fraction of the mean image intensity.
    pub min_relative_contrast: f64,
    /// Re-fit each ellipse to the rim found along radial rays.
    pub refine_edges: bool,
    /// Detections scoring below this are dropped.
    pub score_thresh: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 15,
            min_area: 200,
            threshold: Threshold::Otsu,
            merge_iou: 0.5,
            min_relative_contrast: 0.1,
            refine_edges: true,
            score_thresh: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "detector window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(0.0..=1.0).contains(&self.merge_iou) {
            return Err(Error::invalid("merge_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Mean normalized contrast inside the component, in `[0, 1]`.
    pub score: f64,
    /// Fitted ellipse; `rings` is 0 until a counter fills it in.
    pub ellipse: EllipseAnnotation,
}

impl Detection {
    pub fn from_ellipse(ellipse: EllipseAnnotation, score: f64) -> Self {
        Detection {
            bbox: ellipse_to_bbox(&ellipse),
            score,
            ellipse,
        }
    }

    pub fn rings(&self) -> f64 {
        self.ellipse.rings
    }

    pub fn with_rings(mut self, rings: f64) -> Self {
        self.ellipse.rings = rings;
        self
    }
}

/// Windowed standard deviation (edge-clamped), normalized by the map's
/// maximum. Returns the normalized map and that maximum.
fn contrast_map_raw(img: &GrayImage, window: usize) -> (GrayImage, f64) {
    let (w, h) = (img.width(), img.height());
    let r = (window / 2) as isize;
    let mean = img.data().iter().sum::<f64>() / img.data().len().max(1) as f64;
    let pw = w + 2 * r as usize;
    let ph = h + 2 * r as usize;
    // prefix sums over the replicate-padded, mean-centered image
    let mut s1 = vec![0.0f64; (pw + 1) * (ph + 1)];
    let mut s2 = vec![0.0f64; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let mut row1 = 0.0;
        let mut row2 = 0.0;
        for px in 0..pw {
            let v = img.get_clamped(px as isize - r, py as isize - r) - mean;
            row1 += v;
            row2 += v * v;
            let i = (py + 1) * (pw + 1) + px + 1;
            s1[i] = s1[i - (pw + 1)] + row1;
            s2[i] = s2[i - (pw + 1)] + row2;
        }
    }
    let n = (window * window) as f64;
    let rect = |s: &[f64], x0: usize, y0: usize| {
        let x1 = x0 + window;
        let y1 = y0 + window;
        s[y1 * (pw + 1) + x1] - s[y0 * (pw + 1) + x1] - s[y1 * (pw + 1) + x0]
            + s[y0 * (pw + 1) + x0]
    };
    let mut out = GrayImage::new(w, h);
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let m1 = rect(&s1, x, y) / n;
            let m2 = rect(&s2, x, y) / n;
            let sd = (m2 - m1 * m1).max(0.0).sqrt();
            out.set(x, y, sd);
            max = max.max(sd);
        }
    }
    if max > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    (out, max)
}

/// Per-pixel standard deviation over a `window x window` neighborhood,
/// normalized so the maximum is 1 (an all-zero map stays zero).
pub fn local_contrast_map(img: &GrayImage, window: usize) -> GrayImage {
    contrast_map_raw(img, window).0
}

const OTSU_BINS: usize = 256;
const OTSU_LAYER_SEPARABILITY: f64 = 0.8;

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

fn histogram(values: &[f64]) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    hist
}

/// Best two-class split of `hist`: the last bin of the lower class and the
/// separability `between-class variance / total variance`.
fn otsu_split(hist: &[u64]) -> Option<(usize, f64)> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mean = sum_all / n;
    let var: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * (i as f64 - mean) * (i as f64 - mean))
        .sum::<f64>()
        / n;
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let (mut best, mut best_k) = (-1.0f64, None);
    for (k, &c) in hist.iter().enumerate().take(hist.len() - 1) {
        w0 += c;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_k = Some(k);
        }
    }
    best_k.map(|k| (k, best / (n * n) / var))
}

/// Otsu's threshold over a 256-bin histogram of values in `[0, 1]`.
/// Foreground is `v > threshold`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    match otsu_split(&histogram(values)) {
        Some((k, _)) => (k + 1) as f64 / OTSU_BINS as f64,
        // a single populated bin: nothing to separate
        None => 1.0,
    }
}

/// Otsu's threshold, re-applied to the lower class for as long as that
/// class splits with separability at least `min_separability`. Antinodes
/// of quite different contrast then all land above the cut. The cut is
/// placed midway between the final two class means, taken over the raw
/// values, so it moves continuously with the data rather than in bin steps.
pub fn layered_otsu_threshold(values: &[f64], min_separability: f64) -> f64 {
    let hist = histogram(values);
    let Some((mut k, _)) = otsu_split(&hist) else {
        return 1.0;
    };
    let mut top = OTSU_BINS - 1;
    while let Some((lower, eta)) = otsu_split(&hist[..=k]) {
        if eta < min_separability {
            break;
        }
        top = k;
        k = lower;
    }
    let (mut lo, mut hi) = ((0.0, 0usize), (0.0, 0usize));
    for &v in values {
        let b = bin_of(v);
        if b <= k {
            lo = (lo.0 + v, lo.1 + 1);
        } else if b <= top {
            hi = (hi.0 + v, hi.1 + 1);
        }
    }
    0.5 * (lo.0 / lo.1 as f64 + hi.0 / hi.1 as f64)
}

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Mask {
    pub w: usize,
    pub h: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// 3x3 dilation (`grow`) or erosion; out-of-bounds neighbors are ignored.
    fn morph(&self, grow: bool) -> Mask {
        let mut out = vec![false; self.bits.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = !grow;
                'nb: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        if nx < 0 || ny < 0 || nx >= self.w as isize || ny >= self.h as isize {
                            continue;
                        }
                        let v = self.get(nx as usize, ny as usize);
                        if grow && v {
                            acc = true;
                            break 'nb;
                        }
                        if !grow && !v {
                            acc = false;
                            break 'nb;
                        }
                    }
                }
                out[y * self.w + x] = acc;
            }
        }
        Mask {
            w: self.w,
            h: self.h,
            bits: out,
        }
    }

    fn close(&self, iterations: usize) -> Mask {
        let mut m = self.clone();
        for _ in 0..iterations {
            m = m.morph(true);
        }
        for _ in 0..iterations {
            m = m.morph(false);
        }
        m
    }

    /// Set every background pixel not 4-connected to the border.
    fn fill_holes(&self) -> Mask {
        let (w, h) = (self.w, self.h);
        let mut outside = vec![false; w * h];
        let mut stack = Vec::new();
        for x in 0..w {
            stack.push((x, 0));
            stack.push((x, h - 1));
        }
        for y in 0..h {
            stack.push((0, y));
            stack.push((w - 1, y));
        }
        while let Some((x, y)) = stack.pop() {
            let i = y * w + x;
            if self.bits[i] || outside[i] {
                continue;
            }
            outside[i] = true;
            if x > 0 {
                stack.push((x - 1, y));
            }
            if x + 1 < w {
                stack.push((x + 1, y));
            }
            if y > 0 {
                stack.push((x, y - 1));
            }
            if y + 1 < h {
                stack.push((x, y + 1));
            }
        }
        Mask {
            w,
            h,
            bits: outside.iter().map(|&o| !o).collect(),
        }
    }
}

/// 8-connected components in scan order. Returns the label image
/// (0 = background, k = component k-1) and each component's pixels.
pub(crate) fn connected_components(mask: &Mask) -> (Vec<u32>, Vec<Vec<(usize, usize)>>) {
    let (w, h) = (mask.w, mask.h);
    let mut labels = vec![0u32; w * h];
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels[y * w + x] != 0 {
                continue;
            }
            let label = comps.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels[y * w + x] = label;
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                pixels.push((cx, cy));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let nx = cx as isize + dx;
                        let ny = cy as isize + dy;
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && labels[ny * w + nx] == 0 {
                            labels[ny * w + nx] = label;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            comps.push(pixels);
        }
    }
    (labels, comps)
}

/// Ellipse from second central moments: semi-axes are twice the square roots
/// of the covariance eigenvalues (exact for a uniformly filled ellipse).
fn ellipse_from_moments(mean: (f64, f64), cov: (f64, f64, f64)) -> EllipseAnnotation {
    let (mxx, myy, mxy) = cov;
    let half_tr = 0.5 * (mxx + myy);
    let disc = (0.25 * (mxx - myy) * (mxx - myy) + mxy * mxy).sqrt();
    let l1 = (half_tr + disc).max(0.0);
    let l2 = (half_tr - disc).max(0.0);
    let a = 2.0 * l1.sqrt();
    let b = (2.0 * l2.sqrt()).max(0.5);
    let theta = normalize_theta(rad_to_deg(0.5 * libm::atan2(2.0 * mxy, mxx - myy)));
    EllipseAnnotation {
        cx: mean.0,
        cy: mean.1,
        a: a.max(b),
        b,
        theta,
        rings: 0.0,
    }
}

/// Moment ellipse of a pixel set.
pub fn pixel_moment_ellipse(pixels: &[(usize, usize)]) -> EllipseAnnotation {
    let n = pixels.len().max(1) as f64;
    let mx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    ellipse_from_moments((mx, my), (sxx / n, syy / n, sxy / n))
}

/// Moment ellipse of the region bounded by a closed polygon (Green's theorem).
pub fn polygon_moment_ellipse(vertices: &[(f64, f64)]) -> Option<EllipseAnnotation> {
    if vertices.len() < 5 {
        return None;
    }
    let n = vertices.len();
    let ox = vertices.iter().map(|v| v.0).sum::<f64>() / n as f64;
    let oy = vertices.iter().map(|v| v.1).sum::<f64>() / n as f64;
    let (mut a2, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (x0, y0) = (vertices[i].0 - ox, vertices[i].1 - oy);
        let (x1, y1) = (vertices[(i + 1) % n].0 - ox, vertices[(i + 1) % n].1 - oy);
        let c = x0 * y1 - x1 * y0;
        a2 += c;
        sx += (x0 + x1) * c;
        sy += (y0 + y1) * c;
        sxx += (x0 * x0 + x0 * x1 + x1 * x1) * c;
        syy += (y0 * y0 + y0 * y1 + y1 * y1) * c;
        sxy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * c;
    }
    let area = 0.5 * a2;
    if area.abs() < 1e-9 {
        return None;
    }
    let cx = sx / (6.0 * area);
    let cy = sy / (6.0 * area);
    let mxx = sxx / (12.0 * area) - cx * cx;
    let myy = syy / (12.0 * area) - cy * cy;
    let mxy = sxy / (24.0 * area) - cx * cy;
    Some(ellipse_from_moments((cx + ox, cy + oy), (mxx, myy, mxy)))
}

const EDGE_SMOOTH_SIGMA: f64 = 0.5;
const EDGE_RAYS: usize = 90;
const EDGE_RAY_AVERAGE: usize = 2;
const EDGE_TUKEY_C: f64 = 0.1;
const EDGE_IRLS_ITERS: usize = 12;
/// Minimum summed Tukey weight, as a fraction of the ray count.
const EDGE_MIN_SUPPORT: f64 = 0.35;
const EDGE_STEP_PX: f64 = 0.25;
const EDGE_SEARCH_OUT_PX: f64 = 8.0;
const BG_MARGIN_PX: f64 = 12.0;

/// Background statistics of the pre-smoothed image outside the mask:
/// `(median, robust sigma)`.
struct Ray {
    /// Coarse boundary radius along the ray.
    r0: f64,
    ux: f64,
    uy: f64,
    /// Step index of `prof[0]`.
    first: usize,
    prof: Vec<f64>,
}

/// Median and robust sigma of the smoothed intensity outside the mask, in a
/// band of `BG_MARGIN_PX` around the coarse ellipse's box.
fn background_stats(smooth: &GrayImage, mask: &Mask, coarse: &EllipseAnnotation) -> Option<(f64, f64)> {
    let (w, h) = (smooth.width(), smooth.height());
    let bb = ellipse_to_bbox(coarse);
    let x0 = (bb.x_min - BG_MARGIN_PX).floor().max(0.0) as usize;
    let y0 = (bb.y_min - BG_MARGIN_PX).floor().max(0.0) as usize;
    let x1 = ((bb.x_max + BG_MARGIN_PX).ceil().max(0.0) as usize).min(w - 1);
    let y1 = ((bb.y_max + BG_MARGIN_PX).ceil().max(0.0) as usize).min(h - 1);
    let mut vals: Vec<f64> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if !mask.bits[y * w + x] {
                vals.push(smooth.get(x, y));
            }
        }
    }
    if vals.len() < 16 {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let med = vals[vals.len() / 2];
    let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Some((med, 1.4826 * dev[dev.len() / 2]))
}

/// Re-fit `coarse` to the rim: along each ray, scanning inward from just
/// outside the coarse boundary, find the first departure above background,
/// climb to the rim peak, and take the outermost half-level crossing.
fn refine_ellipse(
    smooth: &GrayImage,
    labels: &[u32],
    own_labels: &[u32],
    coarse: &EllipseAnnotation,
    bg: (f64, f64),
) -> Option<EllipseAnnotation> {
    let (w, h) = (smooth.width(), smooth.height());
    let (bg_level, bg_sigma) = bg;
    let (c, s) = coarse.axis();
    // Rays leave the nearest pixel center and are sampled at whole multiples
    // of the step, so an integer shift of the image reproduces every sample.
    let (ox, oy) = (coarse.cx.round(), coarse.cy.round());
    let mut rays: Vec<Ray> = Vec::with_capacity(EDGE_RAYS);
    for k in 0..EDGE_RAYS {
        let phi = k as f64 * std::f64::consts::TAU / EDGE_RAYS as f64;
        let (ux, uy) = (libm::cos(phi), libm::sin(phi));
        let along = (ux * c + uy * s) / coarse.a;
        let across = (uy * c - ux * s) / coarse.b;
        let r0 = 1.0 / (along * along + across * across).sqrt();
        let first = (0.5 * r0 / EDGE_STEP_PX).ceil() as usize;
        let last = ((r0 + EDGE_SEARCH_OUT_PX) / EDGE_STEP_PX).floor() as usize;
        let mut prof: Vec<f64> = Vec::with_capacity(last.saturating_sub(first) + 1);
        for i in first..=last {
            let t = i as f64 * EDGE_STEP_PX;
            let (x, y) = (ox + t * ux, oy + t * uy);
            if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                break;
            }
            let lab = labels[y.round() as usize * w + x.round() as usize];
            if lab != 0 && !own_labels.contains(&lab) {
                break;
            }
            prof.push(smooth.bilinear(x, y));
        }
        rays.push(Ray { r0, ux, uy, first, prof });
    }

    // Rays are averaged with their angular neighbours at equal radius,
    // which suppresses speckle along the rim.
    let spread = EDGE_RAY_AVERAGE as isize;
    let departure = (3.0 * bg_sigma / ((2 * spread + 1) as f64).sqrt()).max(0.02);
    let mut edge: Vec<Option<(f64, f64)>> = Vec::with_capacity(EDGE_RAYS);
    let mut ratio: Vec<f64> = Vec::with_capacity(EDGE_RAYS);
    for (k, ray) in rays.iter().enumerate() {
        let prof: Vec<f64> = (0..ray.prof.len())
            .map(|m| {
                let i = ray.first + m;
                let (mut sum, mut n) = (0.0, 0usize);
                for d in -spread..=spread {
                    let other = &rays[(k as isize + d).rem_euclid(EDGE_RAYS as isize) as usize];
                    if let Some(v) = i.checked_sub(other.first).and_then(|j| other.prof.get(j)) {
                        sum += v;
                        n += 1;
                    }
                }
                sum / n as f64
            })
            .collect();
        let to_radius = |pos: f64| (ray.first as f64 + pos) * EDGE_STEP_PX;
        let found = (|| {
            let first = (0..prof.len())
                .rev()
                .find(|&i| prof[i] > bg_level + departure)?;
            let max_climb = (6.0 / EDGE_STEP_PX) as usize;
            let mut peak = first;
            while peak > 0 && first - peak < max_climb && prof[peak - 1] >= prof[peak] {
                peak -= 1;
            }
            let level = 0.5 * (bg_level + prof[peak]);
            let mut i = peak;
            while i + 1 < prof.len() && prof[i + 1] >= level {
                i += 1;
            }
            let t = if i + 1 < prof.len() {
                let f = (prof[i] - level) / (prof[i] - prof[i + 1]);
                to_radius(i as f64 + f)
            } else {
                to_radius(i as f64)
            };
            Some(t)
        })();
        match found {
            Some(t) => {
                edge.push(Some((ox + t * ray.ux, oy + t * ray.uy)));
                ratio.push(t / ray.r0);
            }
            None => {
                edge.push(None);
                ratio.push(f64::NAN);
            }
        }
    }

    let model = rim_model(&ratio)?;
    let rim: Vec<(f64, f64)> = rays
        .iter()
        .zip(&model)
        .map(|(ray, m)| (ox + m * ray.r0 * ray.ux, oy + m * ray.r0 * ray.uy))
        .collect();
    polygon_moment_ellipse(&rim)
}

/// Smooth rim-to-coarse radius ratio for every ray: a second-order Fourier
/// series in the ray angle, fitted to the measured ratios (NaN where no rim
/// was found) by iteratively reweighted least squares with Tukey weights.
/// `None` when too few rays support the fit.
fn rim_model(ratio: &[f64]) -> Option<Vec<f64>> {
    let n = ratio.len();
    let basis = |k: usize| {
        let phi = k as f64 * std::f64::consts::TAU / n as f64;
        [1.0, libm::cos(phi), libm::sin(phi), libm::cos(2.0 * phi), libm::sin(2.0 * phi)]
    };
    let eval = |coef: &[f64; 5], k: usize| basis(k).iter().zip(coef).map(|(f, c)| f * c).sum::<f64>();
    let mut finite: Vec<f64> = ratio.iter().copied().filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    finite.sort_by(f64::total_cmp);
    let mut coef = [finite[finite.len() / 2], 0.0, 0.0, 0.0, 0.0];
    let mut support = 0.0;
    for _ in 0..EDGE_IRLS_ITERS {
        let mut ata = [[0.0; 5]; 5];
        let mut atb = [0.0; 5];
        support = 0.0;
        for (k, &r) in ratio.iter().enumerate() {
            let e = (r - eval(&coef, k)) / EDGE_TUKEY_C;
            if !(e.abs() < 1.0) {
                continue;
            }
            let w = (1.0 - e * e) * (1.0 - e * e);
            support += w;
            let f = basis(k);
            for i in 0..5 {
                atb[i] += w * f[i] * r;
                for j in 0..5 {
                    ata[i][j] += w * f[i] * f[j];
                }
            }
        }
        coef = solve_small(ata, atb)?;
    }
    (support >= EDGE_MIN_SUPPORT * n as f64).then(|| (0..n).map(|k| eval(&coef, k)).collect())
}

/// Gaussian elimination with partial pivoting.
fn solve_small<const N: usize>(mut m: [[f64; N]; N], mut v: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if !(m[piv][col].abs() > 1e-12) {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for row in col + 1..N {
            let f = m[row][col] / m[col][col];
            for c in col..N {
                m[row][c] -= f * m[col][c];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|c| m[row][c] * x[c]).sum();
        x[row] = (v[row] - tail) / m[row][row];
    }
    Some(x)
}

struct Candidate {
    pixels: Vec<(usize, usize)>,
    labels: Vec<u32>,
    score: f64,
    ellipse: EllipseAnnotation,
}

/// Merge candidates whose boxes overlap above `merge_iou`: the
/// higher-scoring one survives and absorbs the other's pixels, then its
/// ellipse is re-fitted.
fn merge_overlapping(
    cands: &mut Vec<Candidate>,
    merge_iou: f64,
    fit: impl Fn(&[(usize, usize)], &[u32]) -> EllipseAnnotation,
) {
    loop {
        let mut pair = None;
        'search: for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                let bi = ellipse_to_bbox(&cands[i].ellipse);
                let bj = ellipse_to_bbox(&cands[j].ellipse);
                if bi.iou(&bj) > merge_iou {
                    pair = Some((i, j));
                    break 'search;
                }
            }
        }
        let Some((i, j)) = pair else { break };
        let (keep, gone) = if cands[j].score > cands[i].score {
            (j, i)
        } else {
            (i, j)
        };
        let absorbed = cands.remove(gone);
        let keep = if gone < keep { keep - 1 } else { keep };
        let k = &mut cands[keep];
        k.pixels.extend(absorbed.pixels);
        k.pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        k.labels.extend(absorbed.labels);
        k.labels.sort_unstable();
        k.ellipse = fit(&k.pixels, &k.labels);
    }
}

/// Detect antinodes in a grayscale frame. Results are sorted by descending
/// score.
pub fn detect_antinodes(img: &GrayImage, cfg: &DetectorConfig) -> Vec<Detection> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let window = if cfg.window >= 3 { cfg.window | 1 } else { 3 };
    let (map, raw_max) = contrast_map_raw(img, window);
    if raw_max <= 0.0 {
        return Vec::new();
    }
    let t = match cfg.threshold {
        Threshold::Otsu => layered_otsu_threshold(map.data(), OTSU_LAYER_SEPARABILITY),
        Threshold::Fixed(v) => v,
    };
    let mean = img.data().iter().sum::<f64>() / (w * h) as f64;
    // floor on the un-normalized std, relative to the mean intensity
    let floor = cfg.min_relative_contrast * mean / raw_max;
    let cut = t.max(floor);
    let mask = Mask {
        w,
        h,
        bits: map.data().iter().map(|&v| v > cut).collect(),
    };
    let mask = mask.close(2).fill_holes();
    let (labels, comps) = connected_components(&mask);

    let smooth = if cfg.refine_edges {
        Some(gaussian_blur(img, EDGE_SMOOTH_SIGMA))
    } else {
        None
    };
    let fit = |pixels: &[(usize, usize)], own: &[u32]| -> EllipseAnnotation {
        let coarse = pixel_moment_ellipse(pixels);
        let refined = smooth.as_ref().and_then(|s| {
            let bg = background_stats(s, &mask, &coarse)?;
            refine_ellipse(s, &labels, own, &coarse, bg)
        });
        refined.unwrap_or(coarse)
    };

    let mut cands: Vec<Candidate> = comps
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.len() >= cfg.min_area)
        .map(|(i, pixels)| {
            let labels = vec![i as u32 + 1];
            let score =
                pixels.iter().map(|&(x, y)| map.get(x, y)).sum::<f64>() / pixels.len() as f64;
            let ellipse = fit(&pixels, &labels);
            Candidate {
                pixels,
                labels,
                score,
                ellipse,
            }
        })
        .collect();
    merge_overlapping(&mut cands, cfg.merge_iou, fit);

    let mut out: Vec<Detection> = cands
        .into_iter()
        .filter(|c| c.score >= cfg.score_thresh)
        .map(|c| Detection::from_ellipse(c.ellipse, c.score))
        .filter(|d| d.bbox.is_valid())
        .collect();
    sort_detections(&mut out);
    out
}

/// Descending score; ties broken by centroid, lexicographically.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|p, q| {
        q.score
            .total_cmp(&p.score)
            .then(p.ellipse.cx.total_cmp(&q.ellipse.cx))
            .then(p.ellipse.cy.total_cmp(&q.ellipse.cy))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_frame, AntinodeSpec, ProfileKind, SynthSpec};

    fn antinode(cx: f64, cy: f64, a: f64, b: f64, theta: f64, rings: f64) -> AntinodeSpec {
        AntinodeSpec {
            ellipse: EllipseAnnotation::new(cx, cy, a, b, theta, rings).unwrap(),
            contrast: 0.9,
            profile: ProfileKind::Cosine,
        }
    }

    fn clean_frame(antinodes: Vec<AntinodeSpec>) -> (GrayImage, Vec<EllipseAnnotation>) {
        let mut spec = SynthSpec::blank(320, 240, 5).clean();
        spec.antinodes = antinodes;
        let (img, truth) = render_frame(&spec).unwrap();
        (img, truth.annotations)
    }

    #[test]
    fn constant_image_has_zero_contrast() {
        let img = GrayImage::filled(40, 30, 0.37);
        assert!(local_contrast_map(&img, 15).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_contrast_is_uniformly_high() {
        let img = GrayImage::from_fn(48, 48, |x, y| ((x + y) % 2) as f64);
        let m = local_contrast_map(&img, 15);
        for y in 7..41 {
            for x in 7..41 {
                assert!(m.get(x, y) > 0.99, "({x}, {y}) = {}", m.get(x, y));
            }
        }
        assert!(m.min() > 0.5);
    }

    #[test]
    fn contrast_peaks_inside_antinode() {
        let (img, truth) = clean_frame(vec![antinode(160.0, 120.0, 50.0, 40.0, 20.0, 5.0)]);
        let m = local_contrast_map(&img, 15);
        let (mut best, mut at) = (-1.0, (0, 0));
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) > best {
                    best = m.get(x, y);
                    at = (x, y);
                }
            }
        }
        assert!(truth[0].contains(at.0 as f64, at.1 as f64), "argmax {at:?}");
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![0.1; 500];
        v.extend(vec![0.8; 300]);
        let t = otsu_threshold(&v);
        assert!(t > 0.1 && t < 0.8, "{t}");
        assert_eq!(otsu_threshold(&[0.0; 10]), 1.0);
    }

    #[test]
    fn blank_frame_has_no_detections() {
        let img = GrayImage::filled(128, 128, 0.5);
        assert!(detect_antinodes(&img, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn speckle_only_frame_has_no_detections() {
        let spec = SynthSpec::blank(256, 192, 11);
        let (img, _) = render_frame(&spec).unwrap();
        assert!(detect_antinodes(&img, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn three_clean_antinodes_found() {
        let (img, truth) = clean_frame(vec![
            antinode(60.0, 60.0, 40.0, 34.0, 10.0, 3.0),
            antinode(200.0, 70.0, 45.0, 40.0, 100.0, 6.0),
            antinode(150.0, 180.0, 44.0, 38.0, 60.0, 8.0),
        ]);
        let dets = detect_antinodes(&img, &DetectorConfig::default());
        assert_eq!(dets.len(), 3, "{dets:?}");
        for t in &truth {
            let tb = ellipse_to_bbox(t);
            let best = dets.iter().map(|d| d.bbox.iou(&tb)).fold(0.0, f64::max);
            assert!(best >= 0.75, "best IoU {best} for {t:?}");
        }
    }

    #[test]
    fn detection_box_matches_its_ellipse() {
        let (img, _) = clean_frame(vec![antinode(160.0, 120.0, 60.0, 45.0, 33.0, 4.0)]);
        for d in detect_antinodes(&img, &DetectorConfig::default()) {
            assert!(d.bbox.max_edge_distance(&ellipse_to_bbox(&d.ellipse)) <= 2.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn moments_of_raster_ellipse() {
        let e = EllipseAnnotation::new(50.0, 40.0, 30.0, 15.0, 30.0, 0.0).unwrap();
        let px: Vec<(usize, usize)> = e
            .raster_pixels()
            .into_iter()
            .map(|(x, y)| (x as usize, y as usize))
            .collect();
        let f = pixel_moment_ellipse(&px);
        assert!((f.cx - 50.0).abs() < 0.05 && (f.cy - 40.0).abs() < 0.05);
        assert!((f.a - 30.0).abs() < 0.3, "{}", f.a);
        assert!((f.b - 15.0).abs() < 0.3, "{}", f.b);
        assert!((f.theta - 30.0).abs() < 0.5, "{}", f.theta);
    }

    #[test]
    fn polygon_moments_recover_ellipse() {
        let e = EllipseAnnotation::new(10.0, -4.0, 20.0, 12.0, 125.0, 0.0).unwrap();
        let poly: Vec<(f64, f64)> = (0..720)
            .map(|k| e.boundary_point(k as f64 * std::f64::consts::TAU / 720.0))
            .collect();
        let f = polygon_moment_ellipse(&poly).unwrap();
        assert!((f.a - 20.0).abs() < 1e-3 && (f.b - 12.0).abs() < 1e-3);
        assert!((f.theta - 125.0).abs() < 1e-6);
        assert!((f.cx - 10.0).abs() < 1e-9 && (f.cy + 4.0).abs() < 1e-9);
    }

    fn block(x0: usize, y0: usize, x1: usize, y1: usize, score: f64) -> Candidate {
        let pixels: Vec<(usize, usize)> =
            (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).collect();
        let ellipse = pixel_moment_ellipse(&pixels);
        Candidate {
            pixels,
            labels: vec![],
            score,
            ellipse,
        }
    }

    #[test]
    fn duplicate_components_merge_keeping_higher_score() {
        let mut cands = vec![block(10, 10, 50, 50, 0.4), block(12, 11, 52, 50, 0.7)];
        merge_overlapping(&mut cands, 0.5, |p, _| pixel_moment_ellipse(p));
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].score, 0.7);
        // union support: the merged fit spans both blocks
        assert!(cands[0].ellipse.cx > 30.0);
    }

    #[test]
    fn distinct_components_do_not_merge() {
        let mut cands = vec![block(10, 10, 50, 50, 0.4), block(80, 10, 120, 50, 0.7)];
        merge_overlapping(&mut cands, 0.5, |p, _| pixel_moment_ellipse(p));
        assert_eq!(cands.len(), 2);
    }

    #[test]
    fn invalid_window_rejected() {
        let cfg = DetectorConfig {
            window: 4,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
