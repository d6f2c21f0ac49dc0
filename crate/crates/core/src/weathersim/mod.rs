//! Deterministic synthetic stand-in for a multi-weather LiDAR / 4D radar /
//! camera dataset.
//!
//! A clear-weather scene is generated first ([`generate_scene`]) and then
//! degraded per weather class ([`apply_weather`]). Every frame is a pure
//! function of `(dataset seed, frame id)`, so frames can be generated in any
//! order.

mod dataset;
mod format;
mod image;
mod scene;
mod weather;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{Box3D, CameraIntrinsics, RigidTransform};
use crate::nn::Tensor;
use crate::pointcloud::{LidarCloud, RadarCloud};
use crate::udma::{AugmentationSpec, Provenance};
use crate::{Error, Result};

pub use dataset::{
    build_dataset, frame_path, generate_dataset, generate_frame, load_frames, read_manifest, DatasetConfig, DatasetManifest,
    DatasetMode, ManifestEntry, Split,
};
pub use format::{frame_from_bytes, frame_to_bytes, FRAME_MAGIC, FRAME_VERSION};
pub use image::{image_statistics, render_clear_image, stamp_image, stamp_weather, ImageStamp, StampRanges};
pub use scene::{generate_scene, generate_scene_labeled, PointSource, SceneConfig, GROUND_Z, SENSOR_HEIGHT};
pub use weather::{
    apply_lidar_degradation, apply_radar_degradation, apply_weather, ClassDegradation, ClassParams, LidarDegradation,
    RadarDegradation, WeatherParams,
};

/// Number of weather classes (and experts).
pub const NUM_WEATHERS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherClass {
    Normal,
    Overcast,
    Fog,
    Rain,
    Sleet,
    LightSnow,
    HeavySnow,
}

impl WeatherClass {
    pub const ALL: [WeatherClass; NUM_WEATHERS] = [
        WeatherClass::Normal,
        WeatherClass::Overcast,
        WeatherClass::Fog,
        WeatherClass::Rain,
        WeatherClass::Sleet,
        WeatherClass::LightSnow,
        WeatherClass::HeavySnow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("weather index {i} out of range")))
    }

    /// Identifier used in files (`LightSnow`).
    pub fn name(self) -> &'static str {
        match self {
            WeatherClass::Normal => "Normal",
            WeatherClass::Overcast => "Overcast",
            WeatherClass::Fog => "Fog",
            WeatherClass::Rain => "Rain",
            WeatherClass::Sleet => "Sleet",
            WeatherClass::LightSnow => "LightSnow",
            WeatherClass::HeavySnow => "HeavySnow",
        }
    }

    /// Column title used in reports (`Light Snow`).
    pub fn label(self) -> &'static str {
        match self {
            WeatherClass::LightSnow => "Light Snow",
            WeatherClass::HeavySnow => "Heavy Snow",
            other => other.name(),
        }
    }

    pub fn is_adverse(self) -> bool {
        self != WeatherClass::Normal
    }
}

impl fmt::Display for WeatherClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|w| w.name() == s || w.label() == s)
            .ok_or_else(|| Error::Format(format!("unknown weather class '{s}'")))
    }
}

/// Camera intrinsics plus the camera-to-ego extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidTransform,
}

impl Calibration {
    /// Forward-looking pinhole camera with a 90 degree horizontal field of view,
    /// mounted `height` meters above the ego origin.
    pub fn forward_camera(width: usize, height_px: usize, height: f64) -> Self {
        let f = width as f64 / 2.0;
        let intrinsics = CameraIntrinsics::new(f, f, width as f64 / 2.0, height_px as f64 / 2.0, width, height_px)
            .expect("valid default intrinsics");
        // camera x right, y down, z forward -> ego x forward, y left, z up
        let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let extrinsic =
            RigidTransform::from_rotation_translation(r, Vector3::new(0.0, 0.0, height)).expect("proper rotation");
        Self { intrinsics, extrinsic }
    }
}

/// One synchronized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub weather: WeatherClass,
    pub lidar: LidarCloud,
    pub radar: RadarCloud,
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub calib: Calibration,
    pub gt_boxes: Vec<Box3D>,
    /// Accumulated point-cloud augmentation, if any was applied.
    pub aug: Option<AugmentationSpec>,
    /// Objects pasted in by ground-truth sampling.
    pub inserted: Vec<Provenance>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weather_names_round_trip() {
        for w in WeatherClass::ALL {
            assert_eq!(w.name().parse::<WeatherClass>().unwrap(), w);
            assert_eq!(w.label().parse::<WeatherClass>().unwrap(), w);
            assert_eq!(WeatherClass::from_index(w.index()).unwrap(), w);
        }
        assert_eq!(WeatherClass::ALL.len(), 7);
        assert!(WeatherClass::from_index(7).is_err());
    }

    #[test]
    fn camera_looks_forward() {
        let c = Calibration::forward_camera(96, 64, 1.6);
        let p = crate::geometry::project_to_pixel([10.0, 0.0, 1.6], &c.intrinsics, &c.extrinsic);
        match p {
            crate::geometry::Projection::InFrame { u, v, depth } => {
                assert!((u - 48.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9 && (depth - 10.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }
}
