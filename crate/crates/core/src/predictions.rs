//! Predictions CSV: one row per detection, plus a row with empty fields for
//! frames where nothing was detected. Values are written in their shortest
//! round-trip form, so a parsed file reproduces the detections exactly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::annot::{normalize_theta, EllipseAnnotation};
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const PREDICTIONS_HEADER: [&str; 12] = [
    "filename", "x_min", "y_min", "x_max", "y_max", "score", "cx", "cy", "a", "b", "theta", "rings",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub frame_id: String,
    pub detections: Vec<Detection>,
}

pub fn write_predictions(frames: &[FramePredictions]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(PREDICTIONS_HEADER).map_err(err)?;
    for f in frames {
        if f.detections.is_empty() {
            let mut row = vec![f.frame_id.as_str()];
            row.extend([""; 11]);
            w.write_record(row).map_err(err)?;
        }
        for d in &f.detections {
            let e = &d.ellipse;
            let mut row = vec![f.frame_id.clone()];
            row.extend(
                [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.score, e.cx, e.cy, e.a, e.b, e.theta, e.rings]
                    .map(|v| v.to_string()),
            );
            w.write_record(row).map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Frames in order of first appearance.
pub fn parse_predictions(text: &str) -> Result<Vec<FramePredictions>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::parse(1, None, e.to_string()))?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != PREDICTIONS_HEADER {
        return Err(Error::parse(1, None, format!("expected header '{}'", PREDICTIONS_HEADER.join(","))));
    }
    let mut frames: Vec<FramePredictions> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(line, None, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != PREDICTIONS_HEADER.len() {
            return Err(Error::parse(
                line,
                None,
                format!("expected {} fields, found {}", PREDICTIONS_HEADER.len(), row.len()),
            ));
        }
        let name = row[0].trim();
        if name.is_empty() {
            return Err(Error::parse(line, Some("filename"), "empty filename"));
        }
        let slot = *index.entry(name.to_string()).or_insert_with(|| {
            frames.push(FramePredictions {
                frame_id: name.to_string(),
                detections: Vec::new(),
            });
            frames.len() - 1
        });
        if (1..row.len()).all(|i| row[i].trim().is_empty()) {
            continue;
        }
        let mut v = [0.0f64; 11];
        for (i, slot) in v.iter_mut().enumerate() {
            let col = PREDICTIONS_HEADER[i + 1];
            let raw = row[i + 1].trim();
            *slot = raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(line, Some(col), format!("cannot parse '{raw}' as a number")))?;
        }
        let [x0, y0, x1, y1, score, cx, cy, a, b, theta, rings] = v;
        let bbox = BBox::new(x0, y0, x1, y1);
        if !bbox.is_valid() {
            return Err(Error::parse(line, Some("x_min"), "box has non-positive extent"));
        }
        let ellipse = EllipseAnnotation {
            cx,
            cy,
            a,
            b,
            theta: normalize_theta(theta),
            rings,
        };
        if let Some(fe) = ellipse.validate().into_iter().next() {
            return Err(Error::parse(line, Some(&fe.field), fe.message));
        }
        frames[slot].detections.push(Detection { bbox, score, ellipse });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_empty_frame() {
        let e = EllipseAnnotation::new(100.5, 80.25, 30.0, 20.0, 12.0, 4.5).unwrap();
        let frames = vec![
            FramePredictions {
                frame_id: "frame_00000.png".into(),
                detections: vec![Detection::from_ellipse(e, 0.75)],
            },
            FramePredictions {
                frame_id: "frame_00001.png".into(),
                detections: vec![],
            },
        ];
        let text = write_predictions(&frames).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = parse_predictions(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[1].detections.is_empty());
        let d = &back[0].detections[0];
        assert_eq!(d, &frames[0].detections[0]);
    }

    #[test]
    fn header_only_is_empty() {
        let text = write_predictions(&[]).unwrap();
        assert!(parse_predictions(&text).unwrap().is_empty());
        assert!(parse_predictions("").unwrap().is_empty());
    }

    #[test]
    fn bad_number_names_column() {
        let text = format!("{}\nf.png,0,0,10,10,x,5,5,4,3,0,1\n", PREDICTIONS_HEADER.join(","));
        let err = parse_predictions(&text).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("score"), "{err}");
    }
}
