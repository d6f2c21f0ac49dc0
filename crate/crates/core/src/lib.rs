//! Weather-routed mixture-of-experts 3D object detection, end to end on CPU.
//!
//! The crate covers synthetic LiDAR / 4D-radar / camera data with per-weather
//! degradation, synchronized dual-modal augmentation with weather-matched
//! ground-truth sampling, an image weather classifier that routes each frame
//! to its top-K weather-specific experts, confidence-weighted loss and box
//! fusion, the staged training schedule, and per-weather AP evaluation.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled as doc-tests of this crate.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod iwr;
pub mod lrc;
pub mod moe;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod report;
pub mod selftest;
pub mod udma;
pub mod verify;
pub mod weathersim;
pub mod wse;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/camera.md")]
    mod camera {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
