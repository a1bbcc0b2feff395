//! Run configuration: flat `section.key = value` lines, `#` comments.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detect::{DetectorConfig, Threshold};
use crate::error::{Error, Result};
use crate::eval::{LossWeights, DEFAULT_MATCH_IOU};
use crate::rings::RingConfig;
use crate::segmap::DEFAULT_BIN;
use crate::synth::SynthParams;
use crate::track::TrackConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub bin: f64,
    pub loss: LossWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: DEFAULT_MATCH_IOU,
            bin: DEFAULT_BIN,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub detector: DetectorConfig,
    pub rings: RingConfig,
    pub eval: EvalConfig,
    pub track: TrackConfig,
    pub synth: SynthParams,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::invalid(format!("bad value '{raw}' for '{key}'")))
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "seed",
    "paths.data_dir",
    "detector.window",
    "detector.min_area",
    "detector.threshold",
    "detector.merge_iou",
    "detector.min_relative_contrast",
    "detector.refine_edges",
    "detector.score_thresh",
    "rings.crop_size",
    "rings.spokes",
    "rings.samples",
    "rings.smooth_width",
    "rings.prominence",
    "rings.detrend",
    "rings.edge_guard",
    "rings.angular_smooth",
    "eval.iou_thresh",
    "eval.bin",
    "eval.loss_cardinality",
    "eval.loss_iou",
    "eval.loss_rings",
    "track.fps",
    "track.gate",
    "track.max_misses",
    "synth.width",
    "synth.height",
    "synth.min_antinodes",
    "synth.max_antinodes",
    "synth.min_rings",
    "synth.max_rings",
    "synth.min_semi_axis",
    "synth.max_semi_axis",
    "synth.min_aspect",
    "synth.px_per_ring",
    "synth.min_contrast",
    "synth.max_contrast",
    "synth.gap",
    "synth.profile",
    "synth.background",
    "synth.speckle_strength",
    "synth.speckle_scale",
    "synth.blur_sigma",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let d = &mut self.detector;
        let r = &mut self.rings;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse_value(key, raw)?,
            "paths.data_dir" => self.data_dir = Some(PathBuf::from(raw)),
            "detector.window" => d.window = parse_value(key, raw)?,
            "detector.min_area" => d.min_area = parse_value(key, raw)?,
            "detector.threshold" => d.threshold = parse_value::<Threshold>(key, raw)?,
            "detector.merge_iou" => d.merge_iou = parse_value(key, raw)?,
            "detector.min_relative_contrast" => d.min_relative_contrast = parse_value(key, raw)?,
            "detector.refine_edges" => d.refine_edges = parse_value(key, raw)?,
            "detector.score_thresh" => d.score_thresh = parse_value(key, raw)?,
            "rings.crop_size" => r.crop_size = parse_value(key, raw)?,
            "rings.spokes" => r.spokes = parse_value(key, raw)?,
            "rings.samples" => r.samples = parse_value(key, raw)?,
            "rings.smooth_width" => r.smooth_width = parse_value(key, raw)?,
            "rings.prominence" => r.prominence = parse_value(key, raw)?,
            "rings.detrend" => r.detrend = parse_value(key, raw)?,
            "rings.edge_guard" => r.edge_guard = parse_value(key, raw)?,
            "rings.angular_smooth" => r.angular_smooth = parse_value(key, raw)?,
            "eval.iou_thresh" => self.eval.iou_thresh = parse_value(key, raw)?,
            "eval.bin" => self.eval.bin = parse_value(key, raw)?,
            "eval.loss_cardinality" => self.eval.loss.cardinality = parse_value(key, raw)?,
            "eval.loss_iou" => self.eval.loss.iou = parse_value(key, raw)?,
            "eval.loss_rings" => self.eval.loss.rings = parse_value(key, raw)?,
            "track.fps" => self.track.fps = parse_value(key, raw)?,
            "track.gate" => self.track.gate = parse_value(key, raw)?,
            "track.max_misses" => self.track.max_misses = parse_value(key, raw)?,
            "synth.width" => s.width = parse_value(key, raw)?,
            "synth.height" => s.height = parse_value(key, raw)?,
            "synth.min_antinodes" => s.min_antinodes = parse_value(key, raw)?,
            "synth.max_antinodes" => s.max_antinodes = parse_value(key, raw)?,
            "synth.min_rings" => s.min_rings = parse_value(key, raw)?,
            "synth.max_rings" => s.max_rings = parse_value(key, raw)?,
            "synth.min_semi_axis" => s.min_semi_axis = parse_value(key, raw)?,
            "synth.max_semi_axis" => s.max_semi_axis = parse_value(key, raw)?,
            "synth.min_aspect" => s.min_aspect = parse_value(key, raw)?,
            "synth.px_per_ring" => s.px_per_ring = parse_value(key, raw)?,
            "synth.min_contrast" => s.min_contrast = parse_value(key, raw)?,
            "synth.max_contrast" => s.max_contrast = parse_value(key, raw)?,
            "synth.gap" => s.gap = parse_value(key, raw)?,
            "synth.profile" => s.profile = parse_value(key, raw)?,
            "synth.background" => s.background = parse_value(key, raw)?,
            "synth.speckle_strength" => s.speckle_strength = parse_value(key, raw)?,
            "synth.speckle_scale" => s.speckle_scale = parse_value(key, raw)?,
            "synth.blur_sigma" => s.blur_sigma = parse_value(key, raw)?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Apply a config document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, None, "expected 'key = value'"))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(i + 1, Some(key.trim()), e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.rings.validate()?;
        self.track.validate()?;
        if !(self.eval.bin > 0.0) {
            return Err(Error::invalid("eval.bin must be > 0"));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::invalid("eval.iou_thresh must lie in (0, 1]"));
        }
        Ok(())
    }
}
