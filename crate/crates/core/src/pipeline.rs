//! Frame-level prediction behind a pluggable interface.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::annot::EllipseAnnotation;
use crate::detect::{detect_antinodes, sort_detections, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::predictions::{write_predictions, FramePredictions};
use crate::rings::{count_rings, crop_and_square, crop_and_square_clamped, RingConfig, RingCount};
use crate::segmap::{paint_ellipses, save_map, RingMap};

/// Anything that turns a frame into scored detections with ring counts.
pub trait Predictor: Send + Sync {
    /// Detections with `ellipse.rings` filled in, sorted by descending score.
    fn predict(&self, image: &GrayImage) -> Vec<Detection>;
}

#[derive(Debug, Clone, Default)]
pub struct ClassicalPredictor {
    pub detector: DetectorConfig,
    pub rings: RingConfig,
}

impl ClassicalPredictor {
    pub fn new(detector: DetectorConfig, rings: RingConfig) -> Self {
        ClassicalPredictor { detector, rings }
    }
}

/// Count rings inside `e`. Ellipses reaching past the frame edge are
/// cropped with edge clamping instead of being rejected.
pub fn crop_and_count(image: &GrayImage, e: &EllipseAnnotation, cfg: &RingConfig) -> RingCount {
    let patch = crop_and_square(image, e, cfg.crop_size)
        .unwrap_or_else(|_| crop_and_square_clamped(image, e, cfg.crop_size));
    count_rings(&patch, cfg)
}

impl Predictor for ClassicalPredictor {
    fn predict(&self, image: &GrayImage) -> Vec<Detection> {
        let mut dets: Vec<Detection> = detect_antinodes(image, &self.detector)
            .into_iter()
            .map(|d| {
                let rc = crop_and_count(image, &d.ellipse, &self.rings);
                d.with_rings(rc.value)
            })
            .collect();
        sort_detections(&mut dets);
        dets
    }
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub detections: Vec<Detection>,
    pub map: RingMap,
}

pub fn predict_frame(predictor: &dyn Predictor, image: &GrayImage) -> FramePrediction {
    let detections = predictor.predict(image);
    let ellipses: Vec<EllipseAnnotation> = detections.iter().map(|d| d.ellipse).collect();
    let map = paint_ellipses(&ellipses, image.height(), image.width());
    FramePrediction { detections, map }
}

/// Names of the `.png` files directly inside `dir`, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Predict every named image in `dir`, in parallel. Results keep the input
/// order; unreadable images yield an error for that file only.
pub fn predict_files(
    dir: &Path,
    names: &[String],
    predictor: &dyn Predictor,
    on_done: &(dyn Fn() + Sync),
) -> Vec<(String, Result<FramePrediction>)> {
    names
        .par_iter()
        .map(|name| {
            let result = GrayImage::load_png(&dir.join(name)).map(|img| predict_frame(predictor, &img));
            on_done();
            (name.clone(), result)
        })
        .collect()
}

/// Ring-map file for a frame, relative to the maps directory.
pub fn map_file_name(frame_id: &str) -> String {
    let stem = Path::new(frame_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(frame_id);
    format!("{stem}.png")
}

/// Write the predictions CSV and one ring map (with sidecar) per frame.
/// Failed frames are left out of both.
pub fn write_prediction_outputs(
    results: &[(String, Result<FramePrediction>)],
    csv_path: &Path,
    maps_dir: &Path,
    bin: f64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(maps_dir).map_err(|e| Error::io(maps_dir, e))?;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for (name, res) in results {
        if let Ok(fp) = res {
            rows.push(FramePredictions {
                frame_id: name.clone(),
                detections: fp.detections.clone(),
            });
            let path = maps_dir.join(map_file_name(name));
            save_map(&fp.map, bin, &path)?;
            maps.push(path);
        }
    }
    let text = write_predictions(&rows)?;
    std::fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmap::map_to_counts;
    use crate::synth::{random_spec, render_frame, SynthParams};

    #[test]
    fn map_regions_carry_crop_counts() {
        let p = ClassicalPredictor::default();
        let spec = random_spec(&SynthParams::default(), 7);
        let (img, truth) = render_frame(&spec).unwrap();
        assert!(!truth.annotations.is_empty());
        let fp = predict_frame(&p, &img);
        let regions = map_to_counts(&fp.map);
        assert_eq!(regions.len(), fp.detections.len());
        for d in &fp.detections {
            let r = regions
                .iter()
                .max_by(|a, b| a.bbox.iou(&d.bbox).total_cmp(&b.bbox.iou(&d.bbox)))
                .unwrap();
            assert_eq!(r.rings, d.rings());
        }
    }
}
