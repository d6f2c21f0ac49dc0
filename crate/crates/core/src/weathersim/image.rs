use super::{Calibration, WeatherClass};
use crate::geometry::{project_to_pixel, Box3D, Projection};
use crate::nn::{Rng, Tensor};

/// Ranges for the class-characteristic image effects. Zero ranges disable an effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampRanges {
    /// Blend toward per-pixel luminance.
    pub desaturate: (f64, f64),
    pub brightness: (f64, f64),
    /// Scale of deviations from the image mean.
    pub contrast: (f64, f64),
    /// Peak blend toward a bright gray, strongest at the horizon.
    pub haze: (f64, f64),
    pub streaks: (usize, usize),
    pub streak_length: (usize, usize),
    pub blobs: (usize, usize),
    /// Fraction of pixels turned into snow flakes.
    pub speckle: (f64, f64),
    /// Blend toward white.
    pub whiten: (f64, f64),
}

impl StampRanges {
    pub const NONE: StampRanges = StampRanges {
        desaturate: (0.0, 0.0),
        brightness: (1.0, 1.0),
        contrast: (1.0, 1.0),
        haze: (0.0, 0.0),
        streaks: (0, 0),
        streak_length: (0, 0),
        blobs: (0, 0),
        speckle: (0.0, 0.0),
        whiten: (0.0, 0.0),
    };

    pub fn sample(&self, rng: &mut Rng) -> ImageStamp {
        ImageStamp {
            desaturate: rng.uniform(self.desaturate.0, self.desaturate.1),
            brightness: rng.uniform(self.brightness.0, self.brightness.1),
            contrast: rng.uniform(self.contrast.0, self.contrast.1),
            haze: rng.uniform(self.haze.0, self.haze.1),
            streaks: rng.range_usize(self.streaks.0, self.streaks.1),
            streak_length: self.streak_length,
            blobs: rng.range_usize(self.blobs.0, self.blobs.1),
            speckle: rng.uniform(self.speckle.0, self.speckle.1),
            whiten: rng.uniform(self.whiten.0, self.whiten.1),
        }
    }
}

/// Concrete image effect for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStamp {
    pub desaturate: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub haze: f64,
    pub streaks: usize,
    pub streak_length: (usize, usize),
    pub blobs: usize,
    pub speckle: f64,
    pub whiten: f64,
}

/// Sky over road with each visible box drawn as a filled rectangle.
pub fn render_clear_image(boxes: &[Box3D], calib: &Calibration, rng: &mut Rng) -> Tensor {
    let (w, h) = (calib.intrinsics.width, calib.intrinsics.height);
    let horizon = calib.intrinsics.matrix()[(1, 2)].round().clamp(0.0, h as f64) as usize;
    let mut img = Tensor::zeros(&[3, h, w]);
    for v in 0..h {
        let px = if v < horizon {
            let t = v as f32 / horizon.max(1) as f32;
            [0.35 + 0.25 * t, 0.55 + 0.2 * t, 0.9 - 0.05 * t]
        } else {
            let t = (v - horizon) as f32 / (h - horizon).max(1) as f32;
            [0.38 + 0.1 * t, 0.38 + 0.1 * t, 0.4 + 0.1 * t]
        };
        for u in 0..w {
            for (c, value) in px.iter().enumerate() {
                img.set3(c, v, u, *value);
            }
        }
    }
    // far to near so closer cars occlude
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = boxes[a].x.hypot(boxes[a].y);
        let rb = boxes[b].x.hypot(boxes[b].y);
        rb.total_cmp(&ra)
    });
    let colors: Vec<[f32; 3]> = boxes
        .iter()
        .map(|_| {
            let g = rng.uniform(0.1, 0.9) as f32;
            [
                (g + rng.uniform(-0.1, 0.1) as f32).clamp(0.0, 1.0),
                (g + rng.uniform(-0.1, 0.1) as f32).clamp(0.0, 1.0),
                (g + rng.uniform(-0.1, 0.1) as f32).clamp(0.0, 1.0),
            ]
        })
        .collect();
    for i in order {
        let b = &boxes[i];
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut visible = true;
        for corner in box_corners(b) {
            match project_to_pixel(corner, &calib.intrinsics, &calib.extrinsic) {
                Projection::InFrame { u, v, .. } | Projection::OutOfFrame { u, v, .. } => {
                    u0 = u0.min(u);
                    u1 = u1.max(u);
                    v0 = v0.min(v);
                    v1 = v1.max(v);
                }
                Projection::BehindCamera => visible = false,
            }
        }
        if !visible || u1 < 0.0 || v1 < 0.0 || u0 >= w as f64 || v0 >= h as f64 {
            continue;
        }
        let (a0, a1) = (u0.max(0.0) as usize, (u1.ceil().max(0.0) as usize).min(w));
        let (b0, b1) = (v0.max(0.0) as usize, (v1.ceil().max(0.0) as usize).min(h));
        for v in b0..b1 {
            // darker lower body, lighter windows on top
            let shade = if (v as f64) < v0 + 0.35 * (v1 - v0) { 1.15 } else { 0.9 };
            for u in a0..a1 {
                for c in 0..3 {
                    img.set3(c, v, u, (colors[i][c] * shade).clamp(0.0, 1.0));
                }
            }
        }
    }
    for x in img.data_mut() {
        *x = (*x + (0.01 * rng.normal()) as f32).clamp(0.0, 1.0);
    }
    img
}

fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, o) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
        let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
        *o = b.to_world([sx * b.dx, sy * b.dy, sz * b.dz]);
    }
    out
}

/// Applies one drawn [`ImageStamp`] in place; values stay in `[0, 1]`.
pub fn stamp_image(img: &mut Tensor, s: &ImageStamp, rng: &mut Rng) {
    let (_, h, w) = img.chw().expect("image is CxHxW");
    let plane = h * w;
    let data = img.data_mut();
    if s.desaturate > 0.0 {
        for i in 0..plane {
            let lum = 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i];
            for c in 0..3 {
                let x = &mut data[c * plane + i];
                *x += (s.desaturate as f32) * (lum - *x);
            }
        }
    }
    if s.contrast != 1.0 || s.brightness != 1.0 {
        let mean = data.iter().map(|&x| x as f64).sum::<f64>() / data.len() as f64;
        for x in data.iter_mut() {
            let y = (mean + s.contrast * (*x as f64 - mean)) * s.brightness;
            *x = y.clamp(0.0, 1.0) as f32;
        }
    }
    if s.haze > 0.0 {
        let horizon = h as f64 / 2.0;
        for v in 0..h {
            let falloff = if (v as f64) < horizon { 1.0 } else { 1.0 - 0.5 * (v as f64 - horizon) / horizon };
            let a = (s.haze * falloff) as f32;
            for c in 0..3 {
                for u in 0..w {
                    let x = &mut data[c * plane + v * w + u];
                    *x += a * (0.8 - *x);
                }
            }
        }
    }
    for _ in 0..s.streaks {
        let u = rng.below(w as u64) as usize;
        let len = rng.range_usize(s.streak_length.0, s.streak_length.1);
        let v0 = rng.below(h as u64) as usize;
        for v in v0..(v0 + len).min(h) {
            for c in 0..3 {
                let x = &mut data[c * plane + v * w + u];
                *x = (*x + 0.3).min(1.0);
            }
        }
    }
    for _ in 0..s.blobs {
        let cu = rng.uniform(0.0, w as f64);
        let cv = rng.uniform(h as f64 / 2.0, h as f64);
        let radius = rng.uniform(1.5, 3.0);
        for v in 0..h {
            for u in 0..w {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                let g = (0.45 * (-d2 / (2.0 * radius * radius)).exp()) as f32;
                if g > 1e-3 {
                    for c in 0..3 {
                        let x = &mut data[c * plane + v * w + u];
                        *x = (*x + g).min(1.0);
                    }
                }
            }
        }
    }
    if s.whiten > 0.0 {
        for x in data.iter_mut() {
            *x += s.whiten as f32 * (0.92 - *x);
        }
    }
    if s.speckle > 0.0 {
        let flakes = (s.speckle * plane as f64).round() as usize;
        for _ in 0..flakes {
            let i = rng.below(plane as u64) as usize;
            let value = rng.uniform(0.9, 1.0) as f32;
            for c in 0..3 {
                data[c * plane + i] = value;
            }
        }
    }
    for x in data.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

/// Draws and applies the default stamp for `weather`.
pub fn stamp_weather(img: &mut Tensor, weather: WeatherClass, rng: &mut Rng) {
    let params = super::WeatherParams::default();
    let stamp = params.class(weather).image.sample(rng);
    stamp_image(img, &stamp, rng);
}

/// Per channel: mean, variance, and high-frequency energy (mean squared
/// difference between horizontal and vertical neighbours). Nine values.
pub fn image_statistics(img: &Tensor) -> Vec<f64> {
    let (c, h, w) = img.chw().expect("image is CxHxW");
    let mut out = Vec::with_capacity(3 * c);
    for ch in 0..c {
        let p = &img.data()[ch * h * w..(ch + 1) * h * w];
        let n = p.len() as f64;
        let mean = p.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = p.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let mut hf = 0.0;
        let mut count = 0usize;
        for v in 0..h {
            for u in 0..w {
                let x = p[v * w + u] as f64;
                if u + 1 < w {
                    hf += (p[v * w + u + 1] as f64 - x).powi(2);
                    count += 1;
                }
                if v + 1 < h {
                    hf += (p[(v + 1) * w + u] as f64 - x).powi(2);
                    count += 1;
                }
            }
        }
        out.extend([mean, var, hf / count.max(1) as f64]);
    }
    out
}
