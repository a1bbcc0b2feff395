//! Analysis toolkit for ESPI (electronic speckle pattern interferometry)
//! frames of vibrating steelpan drums.
//!
//! Pipeline stages:
//!
//! 1. **synth** – deterministic fringe frames with exact ground truth.
//! 2. **detect** – local-contrast antinode detection with moment ellipses.
//! 3. **rings** – crop each antinode to a square patch and count fringes
//!    along radial spokes.
//! 4. **segmap** – per-pixel ring-count maps and their quantization.
//! 5. **eval** – COCO mAP, ring-count accuracy, pixel metrics, top-loss ranking.
//! 6. **track** – link antinodes through time and fit rise curves.

pub mod annot;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod predictions;
pub mod rings;
pub mod segmap;
pub mod synth;
pub mod track;

pub use annot::{EllipseAnnotation, FrameRecord};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use image::GrayImage;
