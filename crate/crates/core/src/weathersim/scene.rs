use std::f64::consts::{FRAC_PI_2, PI};

use super::image::render_clear_image;
use super::{Calibration, Frame, WeatherClass};
use crate::geometry::{bev_iou, Box3D};
use crate::nn::Rng;
use crate::pointcloud::{BevExtent, GridSpec, LidarCloud, LidarPoint, RadarCloud, RadarPoint};
use crate::Result;

/// LiDAR mounting height above the ground plane (ego origin is on the ground).
pub const SENSOR_HEIGHT: f64 = 1.8;

/// Nominal box-center height; detectors regress an offset from it.
pub const GROUND_Z: f64 = 0.8;

/// Scene generation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub grid: GridSpec,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object LiDAR points are `density / r^2`, clamped to the range below.
    pub lidar_density: f64,
    pub min_object_points: usize,
    pub max_object_points: usize,
    pub ground_points: usize,
    /// Fraction of object LiDAR returns mirrored as radar detections.
    pub radar_fraction: f64,
    pub radar_clutter: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(BevExtent::new(0.0, 32.0, -16.0, 16.0).expect("valid"), 2.0).expect("valid"),
            min_objects: 1,
            max_objects: 8,
            lidar_density: 9000.0,
            min_object_points: 12,
            max_object_points: 320,
            ground_points: 1500,
            radar_fraction: 0.12,
            radar_clutter: 25,
            image_width: 96,
            image_height: 64,
            camera_height: 1.6,
        }
    }
}

/// Origin of a generated LiDAR point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Object(usize),
    Ground,
    Clutter,
}

fn place_objects(cfg: &SceneConfig, rng: &mut Rng) -> Vec<Box3D> {
    let ext = cfg.grid.extent;
    let n = if cfg.max_objects == 0 {
        0
    } else {
        rng.range_usize(cfg.min_objects.min(cfg.max_objects), cfg.max_objects)
    };
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let mut inflated: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..200 {
            let dx = rng.uniform(3.8, 4.8);
            let dy = rng.uniform(1.6, 2.0);
            let dz = rng.uniform(1.4, 1.8);
            let x = rng.uniform(ext.x_min + 3.0, ext.x_max - 2.5);
            let y = rng.uniform(ext.y_min + 2.5, ext.y_max - 2.5);
            // headings in (-pi/2, pi/2]: the sin/cos head never sees a flipped duplicate
            let yaw = FRAC_PI_2 - rng.uniform(0.0, PI);
            let b = Box3D::new([x, y, 0.5 * dz], [dx, dy, dz], yaw).expect("positive sizes");
            let grown = Box3D::new([x, y, 0.5 * dz], [dx + 1.0, dy + 1.0, dz], yaw).expect("positive sizes");
            if inflated.iter().all(|o| bev_iou(o, &grown) == 0.0) {
                boxes.push(b);
                inflated.push(grown);
                break;
            }
        }
    }
    boxes
}

fn object_points(b: &Box3D, cfg: &SceneConfig, rng: &mut Rng) -> Vec<[f64; 3]> {
    let range = b.x.hypot(b.y).max(1.0);
    let n = (cfg.lidar_density / (range * range)).round() as usize;
    let n = n.clamp(cfg.min_object_points, cfg.max_object_points);
    let (s, c) = b.yaw.sin_cos();
    let (hx, hy, hz) = (0.5 * b.dx, 0.5 * b.dy, 0.5 * b.dz);
    // (normal in world xy, face center offset in local, face area)
    let faces = [
        ([c, s], [hx, 0.0], b.dy * b.dz),
        ([-c, -s], [-hx, 0.0], b.dy * b.dz),
        ([-s, c], [0.0, hy], b.dx * b.dz),
        ([s, -c], [0.0, -hy], b.dx * b.dz),
    ];
    let mut weights = Vec::with_capacity(5);
    for (normal, off, area) in &faces {
        let fc = [b.x + c * off[0] - s * off[1], b.y + s * off[0] + c * off[1]];
        let to_sensor = [-fc[0], -fc[1]];
        let d = to_sensor[0].hypot(to_sensor[1]).max(1e-6);
        let cos = (normal[0] * to_sensor[0] + normal[1] * to_sensor[1]) / d;
        weights.push(if cos > 0.0 { area * cos } else { 0.0 });
    }
    let top_cos = ((SENSOR_HEIGHT - b.z_max()) / range).max(0.0);
    weights.push(b.dx * b.dy * top_cos);
    let total: f64 = weights.iter().sum();

    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.uniform(0.0, total);
        let mut face = 0;
        while face < weights.len() - 1 && pick >= weights[face] {
            pick -= weights[face];
            face += 1;
        }
        let (u, v) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        let local = match face {
            0 => [hx, u * hy, v * hz],
            1 => [-hx, u * hy, v * hz],
            2 => [u * hx, hy, v * hz],
            3 => [u * hx, -hy, v * hz],
            _ => [u * hx, v * hy, hz],
        };
        // pull returns just inside the surface
        pts.push(b.to_world([local[0] * 0.98, local[1] * 0.98, local[2] * 0.98]));
    }
    pts
}

/// Clear-weather frame together with the origin of every LiDAR point.
pub fn generate_scene_labeled(id: u64, cfg: &SceneConfig, rng: &mut Rng) -> Result<(Frame, Vec<PointSource>)> {
    let boxes = place_objects(cfg, rng);
    let mut lidar = Vec::new();
    let mut labels = Vec::new();
    let mut radar = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let base = rng.uniform(0.6, 0.95);
        let pts = object_points(b, cfg, rng);
        for p in &pts {
            let intensity = (base + 0.05 * rng.normal()).clamp(0.0, 1.0);
            lidar.push(LidarPoint {
                x: p[0] as f32,
                y: p[1] as f32,
                z: p[2] as f32,
                intensity: intensity as f32,
            });
            labels.push(PointSource::Object(i));
        }
        let speed = rng.uniform(-8.0, 15.0);
        let heading = [b.yaw.cos() * speed, b.yaw.sin() * speed];
        let m = ((cfg.radar_fraction * pts.len() as f64).round() as usize).max(3);
        for _ in 0..m {
            let p = pts[rng.below(pts.len() as u64) as usize];
            let q = [p[0] + 0.1 * rng.normal(), p[1] + 0.1 * rng.normal(), p[2] + 0.1 * rng.normal()];
            let r = q[0].hypot(q[1]).max(0.5);
            let doppler = (heading[0] * q[0] + heading[1] * q[1]) / r;
            let power = 35.0 - 20.0 * (r / 10.0).log10() + 2.0 * rng.normal();
            radar.push(RadarPoint {
                x: q[0] as f32,
                y: q[1] as f32,
                z: q[2] as f32,
                doppler: doppler as f32,
                power: power as f32,
            });
        }
    }
    let mut ground_added = 0;
    let mut guard = 0;
    while ground_added < cfg.ground_points && guard < cfg.ground_points * 4 {
        guard += 1;
        let r = rng.uniform(2.0, 46.0);
        let phi = rng.uniform(-FRAC_PI_2, FRAC_PI_2);
        let (x, y) = (r * phi.cos(), r * phi.sin());
        let z = (0.02 * rng.normal()).clamp(-0.06, 0.06);
        let intensity = rng.uniform(0.05, 0.3);
        if boxes.iter().any(|b| b.contains_bev(x, y)) {
            continue;
        }
        lidar.push(LidarPoint {
            x: x as f32,
            y: y as f32,
            z: z as f32,
            intensity: intensity as f32,
        });
        labels.push(PointSource::Ground);
        ground_added += 1;
    }
    for _ in 0..cfg.radar_clutter {
        let r = rng.uniform(3.0, 45.0);
        let phi = rng.uniform(-FRAC_PI_2, FRAC_PI_2);
        radar.push(RadarPoint {
            x: (r * phi.cos()) as f32,
            y: (r * phi.sin()) as f32,
            z: rng.uniform(0.0, 0.5) as f32,
            doppler: (0.2 * rng.normal()) as f32,
            power: rng.uniform(2.0, 12.0) as f32,
        });
    }
    let calib = Calibration::forward_camera(cfg.image_width, cfg.image_height, cfg.camera_height);
    let image = render_clear_image(&boxes, &calib, rng);
    let frame = Frame {
        id,
        weather: WeatherClass::Normal,
        lidar: LidarCloud { points: lidar },
        radar: RadarCloud { points: radar },
        image,
        calib,
        gt_boxes: boxes,
        aug: None,
        inserted: Vec::new(),
    };
    Ok((frame, labels))
}

/// Clear-weather (`Normal`) frame: objects, ground returns, radar, and image.
pub fn generate_scene(id: u64, cfg: &SceneConfig, rng: &mut Rng) -> Result<Frame> {
    generate_scene_labeled(id, cfg, rng).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(3, &cfg, &mut Rng::new(42)).unwrap();
        let b = generate_scene(3, &cfg, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_objects_only_ground() {
        let cfg = SceneConfig {
            max_objects: 0,
            min_objects: 0,
            ..SceneConfig::default()
        };
        let (f, labels) = generate_scene_labeled(0, &cfg, &mut Rng::new(1)).unwrap();
        assert!(f.gt_boxes.is_empty());
        assert!(labels.iter().all(|l| *l == PointSource::Ground));
    }

    #[test]
    fn object_points_inside_their_box() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let (f, labels) = generate_scene_labeled(seed, &cfg, &mut Rng::new(seed)).unwrap();
            for (p, l) in f.lidar.points.iter().zip(&labels) {
                if let PointSource::Object(i) = l {
                    assert!(f.gt_boxes[*i].contains([p.x as f64, p.y as f64, p.z as f64]));
                }
            }
        }
    }

    #[test]
    fn boxes_disjoint_and_in_extent() {
        let cfg = SceneConfig::default();
        for seed in 0..30 {
            let f = generate_scene(seed, &cfg, &mut Rng::new(seed)).unwrap();
            assert!((1..=8).contains(&f.gt_boxes.len()));
            for (i, a) in f.gt_boxes.iter().enumerate() {
                assert!(cfg.grid.extent.contains(a.x, a.y));
                for b in &f.gt_boxes[i + 1..] {
                    assert_eq!(bev_iou(a, b), 0.0);
                }
            }
            assert!(f.lidar.is_valid() && f.radar.is_valid());
            assert!(f.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
