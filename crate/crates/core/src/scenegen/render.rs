use std::f64::consts::TAU;

use super::{FeatureVector, Frame};
use crate::error::Result;
use crate::rng;

pub const DEFAULT_WIDTH: usize = 32;
pub const DEFAULT_HEIGHT: usize = 32;

/// Number of registered background patterns (valid segment ids are `0..PATTERN_COUNT`).
pub const PATTERN_COUNT: u32 = 4;

const PATTERN_PERIOD: f64 = 8.0;
const PATTERN_SHARPNESS: f64 = 2.5;
const BASE_LEVEL: f64 = 0.05;
const PATTERN_GAIN: f64 = 0.45;
const BRIGHTNESS_GAIN: f64 = 1.0;
const CROSSING_CONTRAST: f64 = 1.5;
const CLOUD_ATTENUATION: f64 = 0.8;
const SENSOR_NOISE: f64 = 0.02;
const SPECKLE_VALUE: f64 = 1.0;
const RAIN_BAND: f64 = 0.5;
const WET_DIMMING: f64 = 0.5;

/// Feature-to-pixel renderer.
///
/// Background pattern (selected by segment id) has its contrast attenuated by
/// cloudiness; brightness adds a uniform offset. Precipitation scatters bright
/// speckles over the upper band and darkens the lower band like a wet road.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Renderer {
    pub width: usize,
    pub height: usize,
}

impl Default for Renderer {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

impl Renderer {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Background intensity before contrast and brightness; `[0, 1]` for segments 0 to 2.
    fn pattern(segment: u32, x: usize, y: usize) -> f64 {
        let (xf, yf) = (x as f64, y as f64);
        let sharp = |w: f64| 0.5 + 0.5 * (PATTERN_SHARPNESS * w).tanh() / PATTERN_SHARPNESS.tanh();
        match segment {
            0 => sharp((TAU * yf / PATTERN_PERIOD).sin()),
            1 => sharp((TAU * xf / PATTERN_PERIOD).sin()),
            2 => (((x / 4) + (y / 4)) % 2) as f64,
            // bars at one and a half times the usual contrast; overshoots the unit range on purpose
            _ => 0.5 + CROSSING_CONTRAST * (sharp((TAU * yf / PATTERN_PERIOD).sin()) - 0.5),
        }
    }

    /// Speckles fall only in the upper band of the frame, at uniform density.
    fn speckle_probability(&self, precipitation: f64, y: usize) -> f64 {
        if self.in_rain_band(y) {
            precipitation
        } else {
            0.0
        }
    }

    fn in_rain_band(&self, y: usize) -> bool {
        (y as f64) < RAIN_BAND * self.height as f64
    }

    fn wet_dimming(&self, precipitation: f64, y: usize) -> f64 {
        if self.in_rain_band(y) {
            0.0
        } else {
            WET_DIMMING * precipitation
        }
    }

    /// Which pixels receive a precipitation speckle.
    pub fn speckle_mask(&self, fv: &FeatureVector, seed: u64) -> Vec<bool> {
        let speckle_seed = rng::derive_seed(seed, &[0x5bec]);
        (0..self.pixel_count())
            .map(|i| {
                let y = i / self.width;
                rng::unit_hash(speckle_seed, i as u64) < self.speckle_probability(fv.precipitation, y)
            })
            .collect()
    }

    pub fn render(&self, fv: &FeatureVector, seed: u64) -> Result<Frame> {
        fv.validate()?;
        let speckles = self.speckle_mask(fv, seed);
        let noise_seed = rng::derive_seed(seed, &[0x0a15e]);
        let contrast = 1.0 - CLOUD_ATTENUATION * fv.cloudiness;
        let offset = BRIGHTNESS_GAIN * fv.brightness;
        let pixels = (0..self.pixel_count())
            .map(|i| {
                let (x, y) = (i % self.width, i / self.width);
                let v = if speckles[i] {
                    SPECKLE_VALUE
                } else {
                    let base = BASE_LEVEL + PATTERN_GAIN * contrast * Self::pattern(fv.segment_id, x, y);
                    let noise = SENSOR_NOISE * (2.0 * rng::unit_hash(noise_seed, i as u64) - 1.0);
                    base + offset + noise - self.wet_dimming(fv.precipitation, y)
                };
                // f32-exact so frames survive the on-disk format bit for bit
                v.clamp(0.0, 1.0) as f32 as f64
            })
            .collect();
        Ok(Frame {
            width: self.width,
            height: self.height,
            pixels,
        })
    }
}

/// Renders one frame at the default resolution.
pub fn render_frame(fv: &FeatureVector, seed: u64) -> Result<Frame> {
    Renderer::default().render(fv, seed)
}

/// Speckle mask at the default resolution.
pub fn speckle_mask(fv: &FeatureVector, seed: u64) -> Vec<bool> {
    Renderer::default().speckle_mask(fv, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn fv(b: f64, p: f64, c: f64, s: u32) -> FeatureVector {
        FeatureVector {
            brightness: b,
            precipitation: p,
            cloudiness: c,
            segment_id: s,
        }
    }

    #[test]
    fn deterministic() {
        let a = render_frame(&fv(0.3, 0.2, 0.1, 1), 42).unwrap();
        let b = render_frame(&fv(0.3, 0.2, 0.1, 1), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), 32 * 32);
    }

    #[test]
    fn brightness_raises_mean() {
        let lo = render_frame(&fv(0.0, 0.1, 0.25, 0), 5).unwrap();
        let hi = render_frame(&fv(0.8, 0.1, 0.25, 0), 5).unwrap();
        assert!(hi.mean() > lo.mean());
    }

    #[test]
    fn zero_precipitation_has_no_speckles() {
        assert!(speckle_mask(&fv(0.2, 0.0, 0.0, 0), 17).iter().all(|s| !s));
    }

    #[test]
    fn unregistered_segment_rejected() {
        let err = render_frame(&fv(0.0, 0.0, 0.0, PATTERN_COUNT), 0).unwrap_err();
        assert!(matches!(err, Error::UnknownSegment { .. }));
    }

    #[test]
    fn out_of_range_feature_rejected() {
        assert!(render_frame(&fv(1.5, 0.0, 0.0, 0), 0).is_err());
    }

    proptest! {
        #[test]
        fn mean_monotone_in_brightness(
            b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0,
            p in 0.0f64..=1.0, c in 0.0f64..=1.0, s in 0u32..PATTERN_COUNT, seed: u64,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let a = render_frame(&fv(lo, p, c, s), seed).unwrap();
            let b = render_frame(&fv(hi, p, c, s), seed).unwrap();
            prop_assert!(b.mean() >= a.mean());
        }

        #[test]
        fn speckles_monotone_in_precipitation(
            p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, seed: u64,
        ) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = speckle_mask(&fv(0.2, lo, 0.0, 0), seed).iter().filter(|s| **s).count();
            let b = speckle_mask(&fv(0.2, hi, 0.0, 0), seed).iter().filter(|s| **s).count();
            prop_assert!(b >= a);
        }

        #[test]
        fn pixels_in_unit_interval(
            b in 0.0f64..=1.0, p in 0.0f64..=1.0, c in 0.0f64..=1.0, s in 0u32..PATTERN_COUNT, seed: u64,
        ) {
            let f = render_frame(&fv(b, p, c, s), seed).unwrap();
            prop_assert!(f.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
