//! A procedural HDR sky used for demos and tests: a smooth sky dome with a
//! few soft clouds over a dark ground, plus a compact Gaussian sun.

use std::f32::consts::PI;

use crate::error::{Error, Result};
use crate::hdr::HdrImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkySpec {
    /// Sun centre in texel coordinates of the full map.
    pub sun_x: usize,
    pub sun_y: usize,
    pub sun_peak: f32,
    /// Gaussian standard deviation in texels.
    pub sun_sigma: f32,
}

impl SkySpec {
    /// A sun at three-eighths of the width, a quarter of the way down the
    /// upper hemisphere.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            sun_x: width * 3 / 8,
            sun_y: height / 8,
            sun_peak: 500.0,
            sun_sigma: 1.5,
        }
    }
}

pub fn synthetic_sky(width: usize, height: usize, spec: &SkySpec) -> Result<HdrImage> {
    if width < 2 || height < 2 || spec.sun_x >= width || spec.sun_y >= height / 2 {
        return Err(Error::Config(format!(
            "sky {width}x{height} with sun at ({}, {})",
            spec.sun_x, spec.sun_y
        )));
    }
    if !(spec.sun_peak >= 0.0 && spec.sun_sigma > 0.0) {
        return Err(Error::Config("sun peak must be >= 0 and sigma > 0".into()));
    }
    let (w, h) = (width as f32, height as f32);
    Ok(HdrImage::from_fn(width, height, |x, y| {
        let u = (x as f32 + 0.5) / w;
        let v = (y as f32 + 0.5) / h;
        let mut rgb = if v < 0.5 {
            let t = v / 0.5;
            let dome = [0.25 + 0.55 * t, 0.45 + 0.45 * t, 0.95 + 0.15 * t];
            let cloud = 0.6
                * ((2.0 * PI * (2.0 * u + 0.1)).sin() * (PI * t).sin())
                    .max(0.0)
                    .powi(3)
                + 0.3
                    * ((2.0 * PI * (5.0 * u - 0.3)).cos() * (2.0 * PI * t).sin())
                        .max(0.0)
                        .powi(2);
            dome.map(|c| c + cloud)
        } else {
            let t = (v - 0.5) / 0.5;
            [0.18 - 0.08 * t, 0.14 - 0.06 * t, 0.1 - 0.05 * t]
        };
        let dx = {
            let d = (x as f32 - spec.sun_x as f32).abs();
            d.min(w - d)
        };
        let dy = y as f32 - spec.sun_y as f32;
        let sun =
            spec.sun_peak * (-(dx * dx + dy * dy) / (2.0 * spec.sun_sigma * spec.sun_sigma)).exp();
        for (c, tint) in rgb.iter_mut().zip([1.0, 0.95, 0.85]) {
            *c += sun * tint;
        }
        rgb
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sun_is_the_brightest_texel() {
        let spec = SkySpec::default_for(64, 32);
        let sky = synthetic_sky(64, 32, &spec).unwrap();
        let peak = sky.pixel(spec.sun_x, spec.sun_y)[0];
        assert!((500.0..502.0).contains(&peak));
        assert_eq!(sky.max_value(), peak);
        assert!(sky.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn rejects_sun_below_horizon() {
        let spec = SkySpec {
            sun_y: 20,
            ..SkySpec::default_for(64, 32)
        };
        assert!(synthetic_sky(64, 32, &spec).is_err());
    }
}
