//! Deterministic synthetic ESPI frames with exact ground truth.
//!
//! Every numeric step of the speckle path uses `libm` and fixed iteration
//! order, so a `(spec, seed)` pair renders to the same bytes on every
//! platform.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annot::{fmt_sig6, write_annotations, EllipseAnnotation, FrameRecord};
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, GrayImage};

/// Radial intensity model inside an antinode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    /// `0.5 + 0.5 cos(2 pi R (1 - u))`: exactly `R` dark fringes for integer `R`.
    #[default]
    Cosine,
    /// `J0^2(j_R (1 - u))`, the time-averaged ESPI intensity law.
    Bessel,
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ProfileKind::Cosine),
            "bessel" => Ok(ProfileKind::Bessel),
            other => Err(Error::invalid(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntinodeSpec {
    /// Geometry; `rings` is the ground-truth count.
    pub ellipse: EllipseAnnotation,
    /// Fringe modulation depth in `(0, 1]`.
    pub contrast: f64,
    pub profile: ProfileKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub antinodes: Vec<AntinodeSpec>,
    pub background: f64,
    pub speckle_strength: f64,
    /// Gaussian sigma (pixels) used to correlate the speckle field.
    pub speckle_scale: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

pub const DEFAULT_BACKGROUND: f64 = 0.5;
pub const DEFAULT_SPECKLE_STRENGTH: f64 = 0.35;
pub const DEFAULT_SPECKLE_SCALE: f64 = 1.5;
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;

impl SynthSpec {
    /// Frame with default noise settings and no antinodes.
    pub fn blank(width: usize, height: usize, seed: u64) -> Self {
        SynthSpec {
            width,
            height,
            antinodes: Vec::new(),
            background: DEFAULT_BACKGROUND,
            speckle_strength: DEFAULT_SPECKLE_STRENGTH,
            speckle_scale: DEFAULT_SPECKLE_SCALE,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            seed,
        }
    }

    /// Same frame without speckle or blur.
    pub fn clean(mut self) -> Self {
        self.speckle_strength = 0.0;
        self.blur_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::invalid(format!(
                "frame {}x{} is smaller than 64x64",
                self.width, self.height
            )));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("background", self.background)?;
        unit("speckle_strength", self.speckle_strength)?;
        if !(self.speckle_scale >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::invalid("speckle_scale and blur_sigma must be >= 0"));
        }
        for (i, an) in self.antinodes.iter().enumerate() {
            if let Some(fe) = an.ellipse.validate().first() {
                return Err(Error::invalid(format!("antinode {i}: {fe}")));
            }
            if !(an.contrast > 0.0 && an.contrast <= 1.0) {
                return Err(Error::invalid(format!(
                    "antinode {i}: contrast {} outside (0, 1]",
                    an.contrast
                )));
            }
            if !(0.5..=12.0).contains(&an.ellipse.rings) {
                return Err(Error::invalid(format!(
                    "antinode {i}: rings {} outside [0.5, 12]",
                    an.ellipse.rings
                )));
            }
            let bb = an.ellipse.bbox();
            if bb.x_min < 0.0
                || bb.y_min < 0.0
                || bb.x_max > (self.width - 1) as f64
                || bb.y_max > (self.height - 1) as f64
            {
                return Err(Error::invalid(format!(
                    "antinode {i} extends outside the {}x{} frame",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// `k`-th positive zero of the Bessel function J0 (`k >= 1`), refined by
/// Newton iteration from McMahon's asymptotic estimate.
pub fn bessel_j0_zero(k: usize) -> f64 {
    assert!(k >= 1, "zeros are numbered from 1");
    let beta = (k as f64 - 0.25) * std::f64::consts::PI;
    let mut x = beta + 1.0 / (8.0 * beta) - 31.0 / (384.0 * beta * beta * beta);
    for _ in 0..50 {
        // J0' = -J1
        let step = libm::j0(x) / -libm::j1(x);
        x -= step;
        if step.abs() < 1e-15 * x {
            break;
        }
    }
    x
}

/// Argument scale `j_R` for the Bessel profile, linear between integer zeros
/// (with `j_0 = 0`).
pub fn bessel_scale(rings: f64) -> f64 {
    let k = rings.floor().max(0.0) as usize;
    let frac = rings - k as f64;
    let lo = if k == 0 { 0.0 } else { bessel_j0_zero(k) };
    if frac == 0.0 {
        return lo;
    }
    let hi = bessel_j0_zero(k + 1);
    lo + frac * (hi - lo)
}

/// Precomputed profile for one antinode.
#[derive(Debug, Clone, Copy)]
struct FringeModel {
    kind: ProfileKind,
    scale: f64,
}

impl FringeModel {
    fn new(rings: f64, kind: ProfileKind) -> Self {
        let scale = match kind {
            ProfileKind::Cosine => 2.0 * std::f64::consts::PI * rings,
            ProfileKind::Bessel => bessel_scale(rings),
        };
        FringeModel { kind, scale }
    }

    #[inline]
    fn eval(&self, u: f64) -> f64 {
        let t = 1.0 - u.clamp(0.0, 1.0);
        match self.kind {
            ProfileKind::Cosine => 0.5 + 0.5 * libm::cos(self.scale * t),
            ProfileKind::Bessel => {
                let j = libm::j0(self.scale * t);
                j * j
            }
        }
    }
}

/// Fringe intensity at normalized elliptical radius `u` (0 = center,
/// 1 = edge) for ring count `rings`.
pub fn fringe_profile(u: f64, rings: f64, kind: ProfileKind) -> f64 {
    FringeModel::new(rings, kind).eval(u)
}

/// Render a frame and its ground truth.
pub fn render_frame(spec: &SynthSpec) -> Result<(GrayImage, FrameRecord)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut img = GrayImage::filled(w, h, spec.background);
    let mut owner: Vec<u16> = vec![0; w * h];

    for (idx, an) in spec.antinodes.iter().enumerate() {
        let e = &an.ellipse;
        let model = FringeModel::new(e.rings, an.profile);
        let (c, s) = e.axis();
        let bb = e.bbox();
        let x0 = bb.x_min.floor().max(0.0) as usize;
        let y0 = bb.y_min.floor().max(0.0) as usize;
        let x1 = (bb.x_max.ceil() as usize).min(w - 1);
        let y1 = (bb.y_max.ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let u = e.normalized_radius_with(c, s, x as f64, y as f64);
                if u >= 1.0 {
                    continue;
                }
                let slot = &mut owner[y * w + x];
                if *slot != 0 {
                    return Err(Error::invalid(format!(
                        "antinodes {} and {} overlap at pixel ({x}, {y})",
                        *slot - 1,
                        idx
                    )));
                }
                *slot = idx as u16 + 1;
                let v = spec.background + an.contrast * (model.eval(u) - spec.background);
                img.set(x, y, v);
            }
        }
    }

    if spec.speckle_strength > 0.0 {
        let field = speckle_field(w, h, spec.speckle_scale, spec.seed);
        let s = spec.speckle_strength;
        for (v, f) in img.data_mut().iter_mut().zip(field.data()) {
            *v *= (1.0 - s) + s * f;
        }
    }
    let mut img = gaussian_blur(&img, spec.blur_sigma);
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let truth = FrameRecord::new(
        format!("synth_{}", spec.seed),
        spec.antinodes.iter().map(|a| a.ellipse).collect(),
    );
    Ok((img, truth))
}

/// Unit-mean exponential intensity field, correlated by a Gaussian of the
/// given sigma.
pub fn speckle_field(width: usize, height: usize, scale: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = GrayImage::from_fn(width, height, |_, _| {
        let u: f64 = rng.random();
        -libm::log(1.0 - u)
    });
    gaussian_blur(&raw, scale)
}

/// Parameters for drawing random frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub min_antinodes: usize,
    pub max_antinodes: usize,
    pub min_rings: f64,
    pub max_rings: f64,
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    /// Lower bound on b/a.
    pub min_aspect: f64,
    /// Semi-minor axis is at least this many pixels per ring, so the
    /// finest fringe stays resolvable.
    pub px_per_ring: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Minimum clearance between antinodes and from the frame border.
    pub gap: f64,
    pub profile: ProfileKind,
    pub background: f64,
    pub speckle_strength: f64,
    pub speckle_scale: f64,
    pub blur_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 640,
            height: 480,
            min_antinodes: 0,
            max_antinodes: 4,
            min_rings: 1.0,
            max_rings: 11.0,
            min_semi_axis: 30.0,
            max_semi_axis: 90.0,
            min_aspect: 0.75,
            px_per_ring: 5.0,
            min_contrast: 0.6,
            max_contrast: 1.0,
            gap: 16.0,
            profile: ProfileKind::Cosine,
            background: DEFAULT_BACKGROUND,
            speckle_strength: DEFAULT_SPECKLE_STRENGTH,
            speckle_scale: DEFAULT_SPECKLE_SCALE,
            blur_sigma: DEFAULT_BLUR_SIGMA,
        }
    }
}

fn round6(v: f64) -> f64 {
    fmt_sig6(v).parse().expect("formatted float parses")
}

/// Draw a random frame recipe. Geometry is rounded to six significant digits
/// so the CSV truth matches the rendered geometry exactly.
pub fn random_spec(params: &SynthParams, seed: u64) -> SynthSpec {
    // Placement uses its own stream so the speckle stream stays keyed on `seed`.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = rng.random_range(params.min_antinodes..=params.max_antinodes);
    let mut antinodes: Vec<AntinodeSpec> = Vec::new();
    for _ in 0..n {
        for _attempt in 0..200 {
            let rings = round6(rng.random_range(params.min_rings..=params.max_rings));
            let aspect = rng.random_range(params.min_aspect..=1.0);
            let b_hi = params.max_semi_axis * aspect;
            let b_lo = params.min_semi_axis.max(params.px_per_ring * rings).min(b_hi);
            let b = if b_hi > b_lo {
                rng.random_range(b_lo..b_hi)
            } else {
                b_hi
            };
            let a = b / aspect;
            let theta = rng.random_range(0.0..180.0);
            let contrast = round6(rng.random_range(params.min_contrast..=params.max_contrast));
            let margin = a + params.gap;
            let (wf, hf) = (params.width as f64, params.height as f64);
            if 2.0 * margin >= wf - 1.0 || 2.0 * margin >= hf - 1.0 {
                continue;
            }
            let cx = rng.random_range(margin..wf - 1.0 - margin);
            let cy = rng.random_range(margin..hf - 1.0 - margin);
            let clear = antinodes.iter().all(|o| {
                let d = ((o.ellipse.cx - cx).powi(2) + (o.ellipse.cy - cy).powi(2)).sqrt();
                d > o.ellipse.a + a + params.gap
            });
            if !clear {
                continue;
            }
            let (a, b) = (round6(a), round6(b));
            let ellipse = EllipseAnnotation {
                cx: round6(cx),
                cy: round6(cy),
                a: a.max(b),
                b: a.min(b),
                theta: round6(theta) % 180.0,
                rings,
            };
            antinodes.push(AntinodeSpec {
                ellipse,
                contrast,
                profile: params.profile,
            });
            break;
        }
    }
    SynthSpec {
        width: params.width,
        height: params.height,
        antinodes,
        background: params.background,
        speckle_strength: params.speckle_strength,
        speckle_scale: params.speckle_scale,
        blur_sigma: params.blur_sigma,
        seed,
    }
}

/// Recipes for `count` frames; frame `i` is drawn with seed `seed + i`.
pub fn dataset_specs(params: &SynthParams, seed: u64, count: usize) -> Vec<SynthSpec> {
    (0..count as u64).map(|i| random_spec(params, seed.wrapping_add(i))).collect()
}

/// Files written by [`render_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn frame_filename(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Render every spec to `out_dir` as 8-bit PNGs plus `annotations.csv` and
/// `manifest.json`.
pub fn render_dataset(specs: &[SynthSpec], out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rendered: Vec<Result<FrameRecord>> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let name = frame_filename(i);
            let (img, truth) = render_frame(spec)?;
            let path: PathBuf = out_dir.join(&name);
            img.save_png8(&path)?;
            Ok(FrameRecord::new(name, truth.annotations))
        })
        .collect();
    let records = rendered.into_iter().collect::<Result<Vec<_>>>()?;

    let csv_path = out_dir.join(ANNOTATIONS_FILE);
    std::fs::write(&csv_path, write_annotations(&records)?).map_err(|e| Error::io(&csv_path, e))?;

    let manifest = Manifest {
        files: records.iter().map(|r| r.frame_id.clone()).collect(),
        seeds: specs.iter().map(|s| s.seed).collect(),
    };
    let man_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&man_path, json).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}
