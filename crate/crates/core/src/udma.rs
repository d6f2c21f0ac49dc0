//! Synchronized dual-modal augmentation and weather-specific ground-truth sampling.
//!
//! [`apply_sync`] applies one similarity transform to the LiDAR cloud, the radar
//! cloud and every GT box. [`wsgts_sample`] pastes objects cut from training
//! frames of the same weather class only.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::Path;

use nalgebra::Matrix4;

use crate::geometry::{bev_iou, normalize_yaw, Box3D};
use crate::nn::{Reader, Rng};
use crate::pointcloud::{LidarPoint, PillarPoint, RadarPoint};
use crate::weathersim::{Frame, WeatherClass};
use crate::{Error, Result};

/// Number of placement attempts per requested insertion.
pub const INSERT_RETRIES: usize = 20;

pub const GT_DB_MAGIC: &[u8; 4] = b"AWGD";
pub const GT_DB_VERSION: u32 = 1;

/// `p -> scale * R(yaw) * F * p`, where `F` mirrors `y` when `flip_x` is set.
/// Scaling is about the ego origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub flip_x: bool,
    pub yaw: f64,
    pub scale: f64,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            yaw: 0.0,
            scale: 1.0,
        }
    }

    /// Flip with probability 1/2, yaw in `[-pi/4, pi/4]`, scale in `[0.95, 1.05]`.
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            flip_x: rng.bernoulli(0.5),
            yaw: rng.uniform(-FRAC_PI_4, FRAC_PI_4),
            scale: rng.uniform(0.95, 1.05),
        }
    }

    /// The spec equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &AugmentationSpec) -> Self {
        // F R(a) = R(-a) F
        let yaw = if next.flip_x { next.yaw - self.yaw } else { next.yaw + self.yaw };
        Self {
            flip_x: self.flip_x ^ next.flip_x,
            yaw: normalize_yaw(yaw),
            scale: self.scale * next.scale,
        }
    }

    /// Homogeneous 4x4 similarity (the `T_lidar_aug` of the camera lifting chain).
    pub fn matrix(&self) -> Matrix4<f64> {
        let (s, c) = self.yaw.sin_cos();
        let f = if self.flip_x { -1.0 } else { 1.0 };
        let k = self.scale;
        Matrix4::new(
            k * c,
            -k * s * f,
            0.0,
            0.0,
            k * s,
            k * c * f,
            0.0,
            0.0,
            0.0,
            0.0,
            k,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let y = if self.flip_x { -p[1] } else { p[1] };
        let (s, c) = self.yaw.sin_cos();
        [
            self.scale * (c * p[0] - s * y),
            self.scale * (s * p[0] + c * y),
            self.scale * p[2],
        ]
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let [x, y, z] = self.apply_point(b.center());
        let yaw = if self.flip_x { -b.yaw } else { b.yaw } + self.yaw;
        Box3D::new([x, y, z], [b.dx * self.scale, b.dy * self.scale, b.dz * self.scale], yaw)
            .expect("similarity keeps boxes valid")
    }
}

/// Free function form of [`AugmentationSpec::then`].
pub fn compose(first: &AugmentationSpec, second: &AugmentationSpec) -> AugmentationSpec {
    first.then(second)
}

fn move_points<P: PillarPoint>(points: &mut [P], spec: &AugmentationSpec) {
    for p in points {
        let [x, y, z] = p.xyz();
        let q = spec.apply_point([x as f64, y as f64, z as f64]);
        p.set_xyz([q[0] as f32, q[1] as f32, q[2] as f32]);
    }
}

/// Applies `spec` to both clouds and all GT boxes; weather and image are untouched.
/// The accumulated spec is recorded in `frame.aug`.
pub fn apply_sync(frame: &Frame, spec: &AugmentationSpec) -> Frame {
    let mut out = frame.clone();
    move_points(&mut out.lidar.points, spec);
    move_points(&mut out.radar.points, spec);
    for b in &mut out.gt_boxes {
        *b = spec.apply_box(b);
    }
    out.aug = Some(match &frame.aug {
        Some(prev) => prev.then(spec),
        None => *spec,
    });
    out
}

/// Where an inserted object came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub source_frame: u64,
    pub source_weather: WeatherClass,
}

/// One stored object, points in its box-local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub bbox: Box3D,
    pub lidar: Vec<LidarPoint>,
    pub radar: Vec<RadarPoint>,
    pub source_frame: u64,
}

impl GtEntry {
    /// Points moved back into the entry's original pose.
    pub fn world_points(&self) -> (Vec<LidarPoint>, Vec<RadarPoint>) {
        (to_world(&self.bbox, &self.lidar), to_world(&self.bbox, &self.radar))
    }
}

fn to_world<P: PillarPoint>(b: &Box3D, pts: &[P]) -> Vec<P> {
    pts.iter()
        .map(|p| {
            let [x, y, z] = p.xyz();
            let w = b.to_world([x as f64, y as f64, z as f64]);
            let mut q = *p;
            q.set_xyz([w[0] as f32, w[1] as f32, w[2] as f32]);
            q
        })
        .collect()
}

fn crop_local<P: PillarPoint>(b: &Box3D, pts: &[P]) -> Vec<P> {
    pts.iter()
        .filter_map(|p| {
            let [x, y, z] = p.xyz();
            let w = [x as f64, y as f64, z as f64];
            b.contains(w).then(|| {
                let l = b.to_local(w);
                let mut q = *p;
                q.set_xyz([l[0] as f32, l[1] as f32, l[2] as f32]);
                q
            })
        })
        .collect()
}

/// Per-weather object bank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: BTreeMap<WeatherClass, Vec<GtEntry>>,
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, weather: WeatherClass) -> &[GtEntry] {
        self.entries.get(&weather).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GT_DB_MAGIC);
        out.extend_from_slice(&GT_DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (w, bucket) in &self.entries {
            for e in bucket {
                out.push(w.index() as u8);
                out.extend_from_slice(&e.source_frame.to_le_bytes());
                for v in e.bbox.to_array() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(e.lidar.len() as u32).to_le_bytes());
                out.extend_from_slice(&(e.radar.len() as u32).to_le_bytes());
                for p in &e.lidar {
                    for v in [p.x, p.y, p.z, p.intensity] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                for p in &e.radar {
                    for v in [p.x, p.y, p.z, p.doppler, p.power] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != GT_DB_MAGIC {
            return Err(Error::Format("not a GT database (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != GT_DB_VERSION {
            return Err(Error::Format(format!("unsupported GT database version {version}")));
        }
        let n = r.u32()?;
        let mut db = GtDatabase::default();
        for _ in 0..n {
            let w = WeatherClass::from_index(r.u8()? as usize).map_err(|e| Error::Format(e.to_string()))?;
            let source_frame = r.u64()?;
            let mut v = [0.0; 7];
            for x in v.iter_mut() {
                *x = r.f64()?;
            }
            let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]).map_err(|e| Error::Format(e.to_string()))?;
            let (nl, nr) = (r.u32()? as usize, r.u32()? as usize);
            let lidar = r
                .f32_vec(nl * 4)?
                .chunks_exact(4)
                .map(|p| LidarPoint {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    intensity: p[3],
                })
                .collect();
            let radar = r
                .f32_vec(nr * 5)?
                .chunks_exact(5)
                .map(|p| RadarPoint {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    doppler: p[3],
                    power: p[4],
                })
                .collect();
            db.entries.entry(w).or_default().push(GtEntry {
                bbox,
                lidar,
                radar,
                source_frame,
            });
        }
        r.finish()?;
        Ok(db)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Cuts every GT box out of every frame, keyed by the frame's weather.
pub fn build_gt_database(frames: &[Frame]) -> GtDatabase {
    let mut db = GtDatabase::default();
    for f in frames {
        for b in &f.gt_boxes {
            db.entries.entry(f.weather).or_default().push(GtEntry {
                bbox: *b,
                lidar: crop_local(b, &f.lidar.points),
                radar: crop_local(b, &f.radar.points),
                source_frame: f.id,
            });
        }
    }
    db
}

fn insert_from(frame: &Frame, bucket: &[GtEntry], weather: WeatherClass, max_insert: usize, rng: &mut Rng) -> (Frame, usize) {
    let mut out = frame.clone();
    if bucket.is_empty() || max_insert == 0 {
        return (out, 0);
    }
    let mut inserted = 0;
    for _ in 0..max_insert {
        for _ in 0..INSERT_RETRIES {
            let e = &bucket[rng.below(bucket.len() as u64) as usize];
            if out.gt_boxes.iter().any(|b| bev_iou(b, &e.bbox) > 0.0) {
                continue;
            }
            // clear whatever the scene had inside the new object
            out.lidar
                .points
                .retain(|p| !e.bbox.contains([p.x as f64, p.y as f64, p.z as f64]));
            out.radar
                .points
                .retain(|p| !e.bbox.contains([p.x as f64, p.y as f64, p.z as f64]));
            let (l, r) = e.world_points();
            out.lidar.points.extend(l);
            out.radar.points.extend(r);
            out.gt_boxes.push(e.bbox);
            out.inserted.push(Provenance {
                source_frame: e.source_frame,
                source_weather: weather,
            });
            inserted += 1;
            break;
        }
    }
    (out, inserted)
}

/// Inserts up to `max_insert` objects drawn only from `db[frame.weather]`, each at
/// its stored pose and only where its footprint overlaps no existing box.
/// Returns the new frame and the number of objects inserted.
pub fn wsgts_sample(frame: &Frame, db: &GtDatabase, max_insert: usize, rng: &mut Rng) -> (Frame, usize) {
    insert_from(frame, db.bucket(frame.weather), frame.weather, max_insert, rng)
}

/// Weather-agnostic sampling over every bucket; the ablation counterpart of
/// [`wsgts_sample`].
pub fn agnostic_sample(frame: &Frame, db: &GtDatabase, max_insert: usize, rng: &mut Rng) -> (Frame, usize) {
    let mut out = frame.clone();
    let mut total = 0;
    for _ in 0..max_insert {
        let n = db.len();
        if n == 0 {
            break;
        }
        let mut k = rng.below(n as u64) as usize;
        let (w, bucket) = db
            .entries
            .iter()
            .find(|(_, b)| {
                if k < b.len() {
                    true
                } else {
                    k -= b.len();
                    false
                }
            })
            .expect("index within total");
        let (next, added) = insert_from(&out, &bucket[k..k + 1], *w, 1, rng);
        out = next;
        total += added;
    }
    (out, total)
}
