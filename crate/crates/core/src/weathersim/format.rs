//! Frame file layout (all little-endian):
//!
//! ```text
//! magic "AWMF" | version u32 | id u64 | weather u8
//! n_lidar u32 | n_radar u32 | image c,h,w u32 | n_boxes u32 | has_aug u8 | n_inserted u32
//! intrinsics 9 x f64 (row-major) | extrinsic 16 x f64 (row-major) | image width u32 | image height u32
//! lidar n_lidar x (x, y, z, intensity) f32
//! radar n_radar x (x, y, z, doppler, power) f32
//! image c*h*w f32
//! boxes n_boxes x (x, y, z, dx, dy, dz, yaw) f64
//! [aug: flip u8 | yaw f64 | scale f64]
//! inserted n_inserted x (source id u64 | source weather u8)
//! ```

use nalgebra::{Matrix3, Matrix4};

use super::{Calibration, Frame, WeatherClass};
use crate::geometry::{Box3D, CameraIntrinsics, RigidTransform};
use crate::nn::{Reader, Tensor};
use crate::pointcloud::{LidarCloud, LidarPoint, RadarCloud, RadarPoint};
use crate::udma::{AugmentationSpec, Provenance};
use crate::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"AWMF";
pub const FRAME_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn frame_to_bytes(f: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&f.id.to_le_bytes());
    out.push(f.weather.index() as u8);
    let (c, h, w) = f.image.chw().expect("frame image is CxHxW");
    put_u32(&mut out, f.lidar.points.len());
    put_u32(&mut out, f.radar.points.len());
    for d in [c, h, w] {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, f.gt_boxes.len());
    out.push(f.aug.is_some() as u8);
    put_u32(&mut out, f.inserted.len());
    let a = f.calib.intrinsics.matrix();
    for r in 0..3 {
        for col in 0..3 {
            put_f64(&mut out, a[(r, col)]);
        }
    }
    let t = f.calib.extrinsic.matrix();
    for r in 0..4 {
        for col in 0..4 {
            put_f64(&mut out, t[(r, col)]);
        }
    }
    put_u32(&mut out, f.calib.intrinsics.width);
    put_u32(&mut out, f.calib.intrinsics.height);
    for p in &f.lidar.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in &f.radar.points {
        for v in [p.x, p.y, p.z, p.doppler, p.power] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&f.image.to_le_bytes());
    for b in &f.gt_boxes {
        for v in b.to_array() {
            put_f64(&mut out, v);
        }
    }
    if let Some(aug) = &f.aug {
        out.push(aug.flip_x as u8);
        put_f64(&mut out, aug.yaw);
        put_f64(&mut out, aug.scale);
    }
    for p in &f.inserted {
        out.extend_from_slice(&p.source_frame.to_le_bytes());
        out.push(p.source_weather.index() as u8);
    }
    out
}

fn weather(byte: u8) -> Result<WeatherClass> {
    WeatherClass::from_index(byte as usize).map_err(|_| Error::Format(format!("bad weather tag {byte}")))
}

pub fn frame_from_bytes(buf: &[u8]) -> Result<Frame> {
    let mut r = Reader::new(buf);
    if r.take(4)? != FRAME_MAGIC {
        return Err(Error::Format("not a frame file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame version {version}")));
    }
    let id = r.u64()?;
    let weather_tag = weather(r.u8()?)?;
    let n_lidar = r.u32()? as usize;
    let n_radar = r.u32()? as usize;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n_boxes = r.u32()? as usize;
    let has_aug = r.u8()? != 0;
    let n_inserted = r.u32()? as usize;
    let mut a = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            a[(row, col)] = r.f64()?;
        }
    }
    let mut t = Matrix4::zeros();
    for row in 0..4 {
        for col in 0..4 {
            t[(row, col)] = r.f64()?;
        }
    }
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let calib = Calibration {
        intrinsics: CameraIntrinsics::from_matrix(a, width, height),
        extrinsic: RigidTransform::from_matrix(t)?,
    };
    let lidar = r
        .f32_vec(n_lidar * 4)?
        .chunks_exact(4)
        .map(|p| LidarPoint {
            x: p[0],
            y: p[1],
            z: p[2],
            intensity: p[3],
        })
        .collect();
    let radar = r
        .f32_vec(n_radar * 5)?
        .chunks_exact(5)
        .map(|p| RadarPoint {
            x: p[0],
            y: p[1],
            z: p[2],
            doppler: p[3],
            power: p[4],
        })
        .collect();
    let image = Tensor::from_vec(&[c, h, w], r.f32_vec(c * h * w)?)?;
    let mut gt_boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let mut v = [0.0; 7];
        for x in v.iter_mut() {
            *x = r.f64()?;
        }
        // validate, then keep the stored values bit for bit
        Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]).map_err(|e| Error::Format(e.to_string()))?;
        gt_boxes.push(Box3D {
            x: v[0],
            y: v[1],
            z: v[2],
            dx: v[3],
            dy: v[4],
            dz: v[5],
            yaw: v[6],
        });
    }
    let aug = if has_aug {
        Some(AugmentationSpec {
            flip_x: r.u8()? != 0,
            yaw: r.f64()?,
            scale: r.f64()?,
        })
    } else {
        None
    };
    let mut inserted = Vec::with_capacity(n_inserted);
    for _ in 0..n_inserted {
        inserted.push(Provenance {
            source_frame: r.u64()?,
            source_weather: weather(r.u8()?)?,
        });
    }
    r.finish()?;
    Ok(Frame {
        id,
        weather: weather_tag,
        lidar: LidarCloud { points: lidar },
        radar: RadarCloud { points: radar },
        image,
        calib,
        gt_boxes,
        aug,
        inserted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;
    use crate::weathersim::{apply_weather, generate_scene, SceneConfig};

    #[test]
    fn round_trip() {
        let f = generate_scene(4, &SceneConfig::default(), &mut Rng::new(4)).unwrap();
        let mut g = apply_weather(&f, WeatherClass::Sleet, &mut Rng::new(5)).unwrap();
        g.aug = Some(AugmentationSpec {
            flip_x: true,
            yaw: 0.3,
            scale: 1.02,
        });
        g.inserted.push(Provenance {
            source_frame: 77,
            source_weather: WeatherClass::Sleet,
        });
        let bytes = frame_to_bytes(&g);
        assert_eq!(frame_from_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn truncation_rejected() {
        let f = generate_scene(4, &SceneConfig::default(), &mut Rng::new(4)).unwrap();
        let bytes = frame_to_bytes(&f);
        assert!(frame_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(frame_from_bytes(&bad).is_err());
    }
}
