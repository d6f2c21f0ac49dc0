use std::f64::consts::FRAC_PI_2;

use super::image::{stamp_image, ImageStamp, StampRanges};
use super::{Frame, WeatherClass, NUM_WEATHERS};
use crate::nn::Rng;
use crate::pointcloud::{LidarCloud, LidarPoint, RadarCloud, RadarPoint};
use crate::{Error, Result};

/// Points below this height count as ground returns.
const GROUND_BAND: f32 = 0.15;

/// Per-frame LiDAR corruption, drawn from a [`ClassParams`] block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LidarDegradation {
    /// Extinction coefficient: a return at range `r` survives with `exp(-beta r)`.
    pub beta: f64,
    /// Range-independent drop probability.
    pub dropout: f64,
    /// Per-axis Gaussian coordinate noise (m).
    pub jitter: f64,
    /// Systematic range error: returns are placed at `(1 + range_bias) r`.
    pub range_bias: f64,
    /// Multiplier on the intensity of surviving returns.
    pub intensity_scale: f64,
    /// Replacement intensity range for ground returns (snow cover).
    pub ground_intensity: Option<(f64, f64)>,
    pub clutter: usize,
    pub clutter_range: (f64, f64),
    pub clutter_height: (f64, f64),
    pub clutter_intensity: (f64, f64),
}

impl LidarDegradation {
    pub fn none() -> Self {
        Self {
            intensity_scale: 1.0,
            ..Self::default()
        }
    }
}

/// Per-frame radar corruption.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RadarDegradation {
    pub beta: f64,
    pub dropout: f64,
    pub jitter: f64,
    pub clutter: usize,
    pub clutter_range: (f64, f64),
}

/// Everything drawn for one frame of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDegradation {
    pub lidar: LidarDegradation,
    pub radar: RadarDegradation,
    pub image: ImageStamp,
}

/// Parameter ranges for one weather class. Every value is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    pub beta: (f64, f64),
    pub dropout: (f64, f64),
    pub jitter: (f64, f64),
    pub range_bias: (f64, f64),
    pub intensity_scale: (f64, f64),
    pub ground_intensity: Option<(f64, f64)>,
    pub clutter: (usize, usize),
    pub clutter_range: (f64, f64),
    pub clutter_height: (f64, f64),
    pub clutter_intensity: (f64, f64),
    pub image: StampRanges,
}

impl ClassParams {
    const CLEAR: ClassParams = ClassParams {
        beta: (0.0, 0.0),
        dropout: (0.0, 0.0),
        jitter: (0.0, 0.0),
        range_bias: (0.0, 0.0),
        intensity_scale: (1.0, 1.0),
        ground_intensity: None,
        clutter: (0, 0),
        clutter_range: (1.0, 1.0),
        clutter_height: (0.0, 0.0),
        clutter_intensity: (0.0, 0.0),
        image: StampRanges::NONE,
    };
}

/// The single parameter block behind every synthetic weather effect.
///
/// The numbers are invented. They are tuned so that the classes are
/// separable from the image alone, and so that radar always degrades less
/// than LiDAR; they make no claim to physical accuracy. The LiDAR range bias
/// changes sign between classes, so the same point pattern implies a
/// different box position depending on the weather.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherParams {
    pub classes: [ClassParams; NUM_WEATHERS],
    /// Radar dropout is LiDAR dropout times this factor.
    pub radar_dropout_factor: f64,
    /// Radar extinction is LiDAR extinction times this factor.
    pub radar_beta_factor: f64,
    pub radar_jitter_factor: f64,
    pub radar_clutter_factor: f64,
}

impl Default for WeatherParams {
    fn default() -> Self {
        let c = ClassParams::CLEAR;
        let normal = c;
        let overcast = ClassParams {
            image: StampRanges {
                desaturate: (0.75, 0.9),
                brightness: (0.62, 0.78),
                contrast: (0.6, 0.75),
                ..StampRanges::NONE
            },
            ..c
        };
        let fog = ClassParams {
            beta: (0.03, 0.06),
            range_bias: (-0.07, -0.05),
            intensity_scale: (0.8, 0.9),
            clutter: (120, 220),
            clutter_range: (1.0, 6.0),
            clutter_height: (0.2, 2.5),
            clutter_intensity: (0.02, 0.1),
            image: StampRanges {
                haze: (0.55, 0.8),
                ..StampRanges::NONE
            },
            ..c
        };
        let rain = ClassParams {
            dropout: (0.2, 0.35),
            jitter: (0.04, 0.08),
            range_bias: (0.05, 0.07),
            intensity_scale: (0.3, 0.4),
            clutter: (20, 50),
            clutter_range: (1.0, 4.0),
            clutter_height: (0.2, 2.2),
            clutter_intensity: (0.0, 0.05),
            image: StampRanges {
                desaturate: (0.4, 0.6),
                brightness: (0.6, 0.75),
                streaks: (40, 80),
                streak_length: (6, 14),
                blobs: (3, 6),
                ..StampRanges::NONE
            },
            ..c
        };
        let sleet = ClassParams {
            dropout: (0.25, 0.4),
            jitter: (0.03, 0.06),
            range_bias: (-0.07, -0.05),
            intensity_scale: (0.55, 0.65),
            clutter: (150, 300),
            clutter_range: (1.0, 12.0),
            clutter_height: (0.1, 2.5),
            clutter_intensity: (0.7, 1.0),
            image: StampRanges {
                desaturate: (0.3, 0.5),
                brightness: (0.7, 0.82),
                streaks: (20, 40),
                streak_length: (3, 7),
                speckle: (0.03, 0.06),
                ..StampRanges::NONE
            },
            ..c
        };
        let light_snow = ClassParams {
            dropout: (0.08, 0.12),
            jitter: (0.0, 0.02),
            range_bias: (0.05, 0.07),
            clutter: (200, 400),
            clutter_range: (1.0, 14.0),
            clutter_height: (0.1, 3.0),
            clutter_intensity: (0.6, 1.0),
            image: StampRanges {
                whiten: (0.1, 0.15),
                speckle: (0.02, 0.04),
                ..StampRanges::NONE
            },
            ..c
        };
        let heavy_snow = ClassParams {
            dropout: (0.3, 0.4),
            jitter: (0.0, 0.03),
            range_bias: (-0.07, -0.05),
            ground_intensity: Some((0.6, 0.9)),
            clutter: (700, 1100),
            clutter_range: (1.0, 14.0),
            clutter_height: (0.1, 3.0),
            clutter_intensity: (0.6, 1.0),
            image: StampRanges {
                whiten: (0.3, 0.4),
                speckle: (0.10, 0.16),
                ..StampRanges::NONE
            },
            ..c
        };
        Self {
            classes: [normal, overcast, fog, rain, sleet, light_snow, heavy_snow],
            radar_dropout_factor: 0.2,
            radar_beta_factor: 0.1,
            radar_jitter_factor: 0.5,
            radar_clutter_factor: 0.05,
        }
    }
}

fn draw(rng: &mut Rng, r: (f64, f64)) -> f64 {
    rng.uniform(r.0, r.1)
}

impl WeatherParams {
    pub fn class(&self, weather: WeatherClass) -> &ClassParams {
        &self.classes[weather.index()]
    }

    /// Draws the concrete degradation for one frame.
    pub fn sample(&self, weather: WeatherClass, rng: &mut Rng) -> ClassDegradation {
        let p = self.class(weather);
        let lidar = LidarDegradation {
            beta: draw(rng, p.beta),
            dropout: draw(rng, p.dropout),
            jitter: draw(rng, p.jitter),
            range_bias: draw(rng, p.range_bias),
            intensity_scale: draw(rng, p.intensity_scale),
            ground_intensity: p.ground_intensity,
            clutter: rng.range_usize(p.clutter.0, p.clutter.1),
            clutter_range: p.clutter_range,
            clutter_height: p.clutter_height,
            clutter_intensity: p.clutter_intensity,
        };
        let radar = RadarDegradation {
            beta: lidar.beta * self.radar_beta_factor,
            dropout: lidar.dropout * self.radar_dropout_factor,
            jitter: lidar.jitter * self.radar_jitter_factor,
            clutter: (lidar.clutter as f64 * self.radar_clutter_factor).round() as usize,
            clutter_range: p.clutter_range,
        };
        let image = p.image.sample(rng);
        ClassDegradation { lidar, radar, image }
    }

    /// Degrades a clear-weather frame into `weather`. GT boxes are untouched.
    pub fn apply(&self, frame: &Frame, weather: WeatherClass, rng: &mut Rng) -> Result<Frame> {
        if frame.weather != WeatherClass::Normal {
            return Err(Error::InvalidArgument(format!(
                "weather can only be applied to a Normal frame, frame {} is {}",
                frame.id, frame.weather
            )));
        }
        let mut out = frame.clone();
        out.weather = weather;
        if weather == WeatherClass::Normal {
            return Ok(out);
        }
        let d = self.sample(weather, rng);
        out.lidar = apply_lidar_degradation(&frame.lidar, &d.lidar, rng);
        out.radar = apply_radar_degradation(&frame.radar, &d.radar, rng);
        stamp_image(&mut out.image, &d.image, rng);
        Ok(out)
    }
}

/// Degrades a clear-weather frame with the default parameter block.
pub fn apply_weather(frame: &Frame, weather: WeatherClass, rng: &mut Rng) -> Result<Frame> {
    WeatherParams::default().apply(frame, weather, rng)
}

fn keep(rng: &mut Rng, beta: f64, dropout: f64, x: f32, y: f32) -> bool {
    let mut survive = 1.0 - dropout;
    if beta > 0.0 {
        let r = (x as f64).hypot(y as f64);
        survive *= (-beta * r).exp();
    }
    survive >= 1.0 || rng.next_f64() < survive
}

fn shell_point(rng: &mut Rng, range: (f64, f64)) -> (f64, f64) {
    let r = draw(rng, range);
    let phi = rng.uniform(-FRAC_PI_2, FRAC_PI_2);
    (r * phi.cos(), r * phi.sin())
}

pub fn apply_lidar_degradation(cloud: &LidarCloud, d: &LidarDegradation, rng: &mut Rng) -> LidarCloud {
    let mut points = Vec::with_capacity(cloud.points.len() + d.clutter);
    for p in &cloud.points {
        if !keep(rng, d.beta, d.dropout, p.x, p.y) {
            continue;
        }
        let mut q = *p;
        if d.range_bias != 0.0 {
            q.x *= (1.0 + d.range_bias) as f32;
            q.y *= (1.0 + d.range_bias) as f32;
        }
        if d.jitter > 0.0 {
            q.x += (d.jitter * rng.normal()) as f32;
            q.y += (d.jitter * rng.normal()) as f32;
            q.z += (d.jitter * rng.normal()) as f32;
        }
        q.intensity = match d.ground_intensity {
            Some(range) if p.z < GROUND_BAND => draw(rng, range) as f32,
            _ => (q.intensity as f64 * d.intensity_scale).clamp(0.0, 1.0) as f32,
        };
        points.push(q);
    }
    for _ in 0..d.clutter {
        let (x, y) = shell_point(rng, d.clutter_range);
        points.push(LidarPoint {
            x: x as f32,
            y: y as f32,
            z: draw(rng, d.clutter_height) as f32,
            intensity: draw(rng, d.clutter_intensity) as f32,
        });
    }
    LidarCloud { points }
}

pub fn apply_radar_degradation(cloud: &RadarCloud, d: &RadarDegradation, rng: &mut Rng) -> RadarCloud {
    let mut points = Vec::with_capacity(cloud.points.len() + d.clutter);
    for p in &cloud.points {
        if !keep(rng, d.beta, d.dropout, p.x, p.y) {
            continue;
        }
        let mut q = *p;
        if d.jitter > 0.0 {
            q.x += (d.jitter * rng.normal()) as f32;
            q.y += (d.jitter * rng.normal()) as f32;
            q.z += (d.jitter * rng.normal()) as f32;
        }
        points.push(q);
    }
    for _ in 0..d.clutter {
        let (x, y) = shell_point(rng, d.clutter_range);
        points.push(RadarPoint {
            x: x as f32,
            y: y as f32,
            z: rng.uniform(0.0, 2.0) as f32,
            doppler: (0.3 * rng.normal()) as f32,
            power: rng.uniform(2.0, 10.0) as f32,
        });
    }
    RadarCloud { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weathersim::{generate_scene, SceneConfig};

    fn clear(seed: u64) -> Frame {
        generate_scene(seed, &SceneConfig::default(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn overcast_keeps_lidar() {
        let f = clear(5);
        let g = apply_weather(&f, WeatherClass::Overcast, &mut Rng::new(9)).unwrap();
        assert_eq!(g.lidar, f.lidar);
        assert_ne!(g.image, f.image);
    }

    #[test]
    fn rejects_degraded_input() {
        let f = clear(5);
        let g = apply_weather(&f, WeatherClass::Rain, &mut Rng::new(9)).unwrap();
        assert!(matches!(
            apply_weather(&g, WeatherClass::Fog, &mut Rng::new(1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn boxes_never_move() {
        let f = clear(11);
        for w in WeatherClass::ALL {
            let g = apply_weather(&f, w, &mut Rng::new(3)).unwrap();
            assert_eq!(g.gt_boxes, f.gt_boxes);
            assert_eq!(g.weather, w);
            assert!(g.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(g.lidar.is_valid() && g.radar.is_valid());
        }
    }

    fn ring(n: usize, r: f64) -> LidarCloud {
        let points = (0..n)
            .map(|i| {
                let phi = -FRAC_PI_2 + std::f64::consts::PI * i as f64 / n as f64;
                LidarPoint {
                    x: (r * phi.cos()) as f32,
                    y: (r * phi.sin()) as f32,
                    z: 1.0,
                    intensity: 0.5,
                }
            })
            .collect();
        LidarCloud { points }
    }

    #[test]
    fn zero_beta_no_attenuation() {
        let c = ring(1000, 30.0);
        let d = LidarDegradation::none();
        assert_eq!(apply_lidar_degradation(&c, &d, &mut Rng::new(0)), c);
    }

    #[test]
    fn range_bias_scales_ground_plane_range() {
        let c = ring(100, 20.0);
        let d = LidarDegradation {
            range_bias: -0.05,
            ..LidarDegradation::none()
        };
        let out = apply_lidar_degradation(&c, &d, &mut Rng::new(0));
        for (p, q) in c.points.iter().zip(&out.points) {
            assert!(((q.x as f64).hypot(q.y as f64) - 19.0).abs() < 1e-4);
            assert_eq!((p.z, p.intensity), (q.z, q.intensity));
        }
    }

    #[test]
    fn range_bias_changes_sign_across_adverse_classes() {
        let p = WeatherParams::default();
        let signs: Vec<f64> = WeatherClass::ALL.iter().map(|&w| p.class(w).range_bias.0.signum()).collect();
        assert!(signs.contains(&1.0) && signs.contains(&-1.0));
        for w in [WeatherClass::Normal, WeatherClass::Overcast] {
            assert_eq!(p.class(w).range_bias, (0.0, 0.0));
        }
    }

    #[test]
    fn fog_survival_matches_exponential_law() {
        let c = ring(10_000, 20.0);
        let d = LidarDegradation {
            beta: 0.05,
            ..LidarDegradation::none()
        };
        let out = apply_lidar_degradation(&c, &d, &mut Rng::new(17));
        let rate = out.points.len() as f64 / 1e4;
        assert!((rate - (-1.0f64).exp()).abs() < 0.02, "{rate}");
    }

    #[test]
    fn radar_outlives_lidar() {
        let params = WeatherParams::default();
        for w in WeatherClass::ALL.into_iter().filter(|w| w.is_adverse()) {
            let (mut lidar_kept, mut lidar_total, mut radar_kept, mut radar_total) = (0usize, 0usize, 0usize, 0usize);
            let mut rng = Rng::new(w.index() as u64);
            for i in 0..1000u64 {
                let lidar = ring(40, 5.0 + (i % 40) as f64);
                let radar = RadarCloud {
                    points: lidar
                        .points
                        .iter()
                        .map(|p| RadarPoint {
                            x: p.x,
                            y: p.y,
                            z: p.z,
                            doppler: 0.0,
                            power: 20.0,
                        })
                        .collect(),
                };
                let mut d = params.sample(w, &mut rng);
                d.lidar.clutter = 0;
                d.radar.clutter = 0;
                lidar_kept += apply_lidar_degradation(&lidar, &d.lidar, &mut rng).points.len();
                radar_kept += apply_radar_degradation(&radar, &d.radar, &mut rng).points.len();
                lidar_total += 40;
                radar_total += 40;
            }
            let (ls, rs) = (lidar_kept as f64 / lidar_total as f64, radar_kept as f64 / radar_total as f64);
            assert!(rs >= ls, "{w}: radar {rs} < lidar {ls}");
        }
    }
}
