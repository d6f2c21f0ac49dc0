//! LiDAR and radar containers plus pillar-style BEV rasterization.

use crate::nn::Tensor;
use crate::{Error, Result};

/// Radar power (dB) is multiplied by this before it enters a pillar feature.
pub const RADAR_POWER_SCALE: f32 = 1.0 / 40.0;

/// Number of pillar feature channels.
pub const PILLAR_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Radial velocity, m/s.
    pub doppler: f32,
    /// Return power, dB with an arbitrary zero.
    pub power: f32,
}

/// A point that can be rasterized into a pillar grid.
pub trait PillarPoint: Copy {
    fn xyz(&self) -> [f32; 3];
    fn set_xyz(&mut self, p: [f32; 3]);
    /// Scalar channel averaged per pillar.
    fn value(&self) -> f32;
}

impl PillarPoint for LidarPoint {
    fn xyz(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }
    fn set_xyz(&mut self, p: [f32; 3]) {
        [self.x, self.y, self.z] = p;
    }
    fn value(&self) -> f32 {
        self.intensity
    }
}

impl PillarPoint for RadarPoint {
    fn xyz(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }
    fn set_xyz(&mut self, p: [f32; 3]) {
        [self.x, self.y, self.z] = p;
    }
    fn value(&self) -> f32 {
        self.power * RADAR_POWER_SCALE
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidarCloud {
    pub points: Vec<LidarPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadarCloud {
    pub points: Vec<RadarPoint>,
}

impl LidarCloud {
    pub fn is_valid(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.xyz().iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&p.intensity))
    }
}

impl RadarCloud {
    pub fn is_valid(&self) -> bool {
        self.points
            .iter()
            .all(|p| [p.x, p.y, p.z, p.doppler, p.power].iter().all(|v| v.is_finite()))
    }
}

/// Axis-aligned BEV region in meters, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BevExtent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::InvalidArgument(format!(
                "empty extent x[{x_min}, {x_max}) y[{y_min}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Extent plus cell size; `H = y span / cell`, `W = x span / cell`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub extent: BevExtent,
    pub cell: f64,
    width: usize,
    height: usize,
}

impl GridSpec {
    pub fn new(extent: BevExtent, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell}")));
        }
        let w = (extent.x_max - extent.x_min) / cell;
        let h = (extent.y_max - extent.y_min) / cell;
        if (w - w.round()).abs() > 1e-9 || (h - h.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "extent {extent:?} is not a whole number of {cell} m cells"
            )));
        }
        Ok(Self {
            extent,
            cell,
            width: w.round() as usize,
            height: h.round() as usize,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(row, col)` of the cell containing `(x, y)`; row indexes y.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.extent.contains(x, y) {
            return None;
        }
        let col = ((x - self.extent.x_min) / self.cell).floor() as usize;
        let row = ((y - self.extent.y_min) / self.cell).floor() as usize;
        Some((row.min(self.height - 1), col.min(self.width - 1)))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.extent.x_min + (col as f64 + 0.5) * self.cell,
            self.extent.y_min + (row as f64 + 0.5) * self.cell,
        )
    }
}

/// Keep points whose BEV position lies inside `extent`, in input order.
pub fn crop<P: PillarPoint>(points: &[P], extent: &BevExtent) -> Vec<P> {
    points
        .iter()
        .filter(|p| {
            let [x, y, _] = p.xyz();
            extent.contains(x as f64, y as f64)
        })
        .copied()
        .collect()
}

/// Rasterized BEV pillar features, `4 x H x W`:
/// count / max count, mean z, mean value, mean planar distance to the cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub grid: GridSpec,
    pub features: Tensor,
}

fn total_key(p: &[f32; 3], v: f32) -> [u32; 4] {
    // order-preserving bit map for f32 total ordering
    let k = |f: f32| {
        let b = f.to_bits();
        if b & 0x8000_0000 != 0 {
            !b
        } else {
            b | 0x8000_0000
        }
    };
    [k(p[0]), k(p[1]), k(p[2]), k(v)]
}

/// Rasterize points into pillar statistics. Result does not depend on input order.
pub fn pillarize<P: PillarPoint>(points: &[P], grid: &GridSpec) -> PillarGrid {
    let (h, w) = (grid.height(), grid.width());
    let mut keyed: Vec<(usize, [u32; 4], [f32; 3], f32)> = points
        .iter()
        .filter_map(|p| {
            let xyz = p.xyz();
            grid.cell_of(xyz[0] as f64, xyz[1] as f64).map(|(r, c)| {
                let v = p.value();
                (r * w + c, total_key(&xyz, v), xyz, v)
            })
        })
        .collect();
    keyed.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut count = vec![0usize; h * w];
    let mut sum_z = vec![0.0f64; h * w];
    let mut sum_v = vec![0.0f64; h * w];
    let mut sum_off = vec![0.0f64; h * w];
    for (cell, _, xyz, v) in &keyed {
        let (cx, cy) = grid.cell_center(cell / w, cell % w);
        count[*cell] += 1;
        sum_z[*cell] += xyz[2] as f64;
        sum_v[*cell] += *v as f64;
        sum_off[*cell] += (xyz[0] as f64 - cx).hypot(xyz[1] as f64 - cy);
    }
    let max_count = count.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut features = Tensor::zeros(&[PILLAR_CHANNELS, h, w]);
    let plane = h * w;
    let data = features.data_mut();
    for i in 0..plane {
        let n = count[i];
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        data[i] = (nf / max_count) as f32;
        data[plane + i] = (sum_z[i] / nf) as f32;
        data[2 * plane + i] = (sum_v[i] / nf) as f32;
        data[3 * plane + i] = (sum_off[i] / nf) as f32;
    }
    PillarGrid {
        grid: *grid,
        features,
    }
}
