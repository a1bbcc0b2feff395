//! Segmentation-regression ring maps: every pixel inside an antinode holds
//! that antinode's ring count, background is 0.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annot::{EllipseAnnotation, FrameRecord};
use crate::detect::{connected_components, DetectorConfig, Mask};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{decode_png16, encode_png16, GrayImage};
use crate::pipeline::{ClassicalPredictor, Predictor};
use crate::rings::RingConfig;

pub const DEFAULT_BIN: f64 = 0.7;
/// Fixed-point scale of persisted maps, in counts per ring.
pub const PNG_SCALE: u32 = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct RingMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl RingMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        RingMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "ring map of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("ring map value {v} is not a finite count >= 0")));
        }
        Ok(RingMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn support(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Paint the strict interior of `e` with `value`; where something is
    /// already painted, the larger value wins.
    pub fn paint(&mut self, e: &EllipseAnnotation, value: f64) {
        let value = value.max(0.0);
        for (x, y) in e.raster_pixels() {
            if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
                continue;
            }
            let slot = &mut self.values[y as usize * self.width + x as usize];
            if value > *slot {
                *slot = value;
            }
        }
    }

    pub fn as_image(&self) -> GrayImage {
        GrayImage::from_vec(self.width, self.height, self.values.clone()).expect("sizes agree")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRingMap {
    pub map: RingMap,
    pub bin: f64,
}

/// Target map: each annotation's strict interior set to its ring count.
pub fn build_target_map(frame: &FrameRecord, height: usize, width: usize) -> RingMap {
    paint_ellipses(&frame.annotations, height, width)
}

pub fn paint_ellipses(ellipses: &[EllipseAnnotation], height: usize, width: usize) -> RingMap {
    let mut m = RingMap::zeros(width, height);
    for e in ellipses {
        m.paint(e, e.rings);
    }
    m
}

/// Detect, count, and paint each fitted ellipse with its count.
pub fn predict_map(image: &GrayImage, detector: &DetectorConfig, rings: &RingConfig) -> RingMap {
    let predictor = ClassicalPredictor::new(detector.clone(), rings.clone());
    let dets = predictor.predict(image);
    let ellipses: Vec<EllipseAnnotation> = dets.iter().map(|d| d.ellipse).collect();
    paint_ellipses(&ellipses, image.height(), image.width())
}

/// `bin * round(v / bin)` with ties away from zero.
pub fn quantize_value(v: f64, bin: f64) -> f64 {
    bin * (v / bin).round()
}

pub fn quantize_map(m: &RingMap, bin: f64) -> Result<QuantizedRingMap> {
    if !(bin > 0.0 && bin.is_finite()) {
        return Err(Error::invalid(format!("quantization bin must be > 0, got {bin}")));
    }
    let values = m.values.iter().map(|&v| quantize_value(v, bin)).collect();
    Ok(QuantizedRingMap {
        map: RingMap {
            width: m.width,
            height: m.height,
            values,
        },
        bin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCount {
    /// Pixel-extent bounds of the region (pixel centers +/- 0.5).
    pub bbox: BBox,
    pub rings: f64,
    pub pixels: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One entry per 8-connected region of nonzero values, in scan order.
pub fn map_to_counts(m: &RingMap) -> Vec<RegionCount> {
    let mask = Mask {
        w: m.width,
        h: m.height,
        bits: m.values.iter().map(|&v| v > 0.0).collect(),
    };
    let (_, comps) = connected_components(&mask);
    comps
        .into_iter()
        .map(|pixels| {
            let mut vals: Vec<f64> = pixels.iter().map(|&(x, y)| m.get(x, y)).collect();
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &(x, y) in &pixels {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            RegionCount {
                bbox: BBox::new(x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 + 0.5, y1 as f64 + 0.5),
                rings: median(&mut vals),
                pixels: pixels.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub scale: u32,
    pub bin: f64,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Encode as 16-bit PNG at [`PNG_SCALE`] counts per ring. Values above
/// 65535 / scale saturate.
pub fn encode_map_png(m: &RingMap) -> Result<Vec<u8>> {
    let samples: Vec<u16> = m
        .values
        .iter()
        .map(|&v| (v * PNG_SCALE as f64).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    encode_png16(m.width, m.height, &samples)
}

pub fn decode_map_png(bytes: &[u8], scale: u32) -> Result<RingMap> {
    if scale == 0 {
        return Err(Error::invalid("map scale must be positive"));
    }
    let (w, h, samples) = decode_png16(bytes)?;
    let values = samples.iter().map(|&s| s as f64 / scale as f64).collect();
    RingMap::from_vec(w, h, values)
}

/// Write `png` and its JSON sidecar next to it.
pub fn save_map(m: &RingMap, bin: f64, png: &Path) -> Result<()> {
    let bytes = encode_map_png(m)?;
    std::fs::write(png, bytes).map_err(|e| Error::io(png, e))?;
    let side = sidecar_path(png);
    let meta = MapSidecar {
        scale: PNG_SCALE,
        bin,
    };
    let mut text = serde_json::to_string(&meta)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_map(png: &Path) -> Result<(RingMap, MapSidecar)> {
    let side = sidecar_path(png);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: MapSidecar = serde_json::from_str(&text)?;
    let bytes = std::fs::read(png).map_err(|e| Error::io(png, e))?;
    Ok((decode_map_png(&bytes, meta.scale)?, meta))
}
