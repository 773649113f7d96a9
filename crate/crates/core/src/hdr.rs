//! HDR image container, colorimetry, log-space normalisation and file I/O.
//!
//! Pixels are stored row-major, top row first, as interleaved linear RGB
//! `f32` triples. The canonical on-disk format is colour PFM:
//!
//! ```text
//! PF\n
//! <width> <height>\n
//! -1.0\n
//! <height rows, bottom row first, 3 little-endian f32 per texel>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::real::Real;

/// Offset added inside the logarithm before normalisation.
pub const DEFAULT_LOG_EPS: f32 = 0.01;

/// Rec. 709 luminance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorimetryConstants {
    pub alpha_r: f32,
    pub alpha_g: f32,
    pub alpha_b: f32,
}

impl ColorimetryConstants {
    pub const REC709: Self = Self {
        alpha_r: 0.2126,
        alpha_g: 0.7152,
        alpha_b: 0.0722,
    };

    pub fn weights(&self) -> [f32; 3] {
        [self.alpha_r, self.alpha_g, self.alpha_b]
    }
}

impl Default for ColorimetryConstants {
    fn default() -> Self {
        Self::REC709
    }
}

pub const LUMINANCE_WEIGHTS: [f32; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl HdrImage {
    /// Builds an image from interleaved RGB data, checking every invariant.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let img = Self {
            width,
            height,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Evaluates `f(x, y)` for every texel. Negative or non-finite results are
    /// kept as-is; call [`HdrImage::validate`] if `f` is untrusted.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw samples. Nothing re-validates the result
    /// until the image is written or passed through [`HdrImage::validate`].
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidImage(format!(
                "empty image {}x{}",
                self.width, self.height
            )));
        }
        if self.data.len() != self.width * self.height * 3 {
            return Err(Error::InvalidImage(format!(
                "{} samples for a {}x{} RGB image",
                self.data.len(),
                self.width,
                self.height
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidImage(format!(
                "sample {} at texel {} is {}",
                i % 3,
                i / 3,
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn check_same_dims(&self, other: &HdrImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Total luminance `sum_ij sum_k alpha_k E_ij[k]`.
    pub fn luminance(&self) -> f64 {
        luminance(&self.data)
    }

    /// Keeps rows `[0, height/2)`, the part of an equirectangular map above
    /// the horizon.
    pub fn crop_upper_half(&self) -> Result<HdrImage> {
        if !self.height.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "cannot take the upper half of odd height {}",
                self.height
            )));
        }
        let h = self.height / 2;
        Ok(HdrImage {
            width: self.width,
            height: h,
            data: self.data[..self.width * h * 3].to_vec(),
        })
    }

    /// Circular horizontal shift; positive `dx` moves content to the left,
    /// i.e. `out(x) = in((x + dx) mod width)`.
    pub fn shift_left(&self, dx: usize) -> HdrImage {
        let w = self.width;
        HdrImage::from_fn(w, self.height, |x, y| self.pixel((x + dx) % w, y))
    }

    pub fn flip_horizontal(&self) -> HdrImage {
        let w = self.width;
        HdrImage::from_fn(w, self.height, |x, y| self.pixel(w - 1 - x, y))
    }

    pub fn scaled(&self, s: f32) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

/// Luminance of an interleaved RGB buffer, accumulated in `f64`.
pub fn luminance<T: Real>(rgb: &[T]) -> f64 {
    rgb.chunks_exact(3)
        .map(|px| {
            LUMINANCE_WEIGHTS
                .iter()
                .zip(px)
                .map(|(a, v)| *a as f64 * v.to_f64_lossy())
                .sum::<f64>()
        })
        .sum()
}

/// The affine map between `log(E + eps)` and the unit interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub log_min: f64,
    pub log_max: f64,
    pub eps: f64,
}

impl NormalizationParams {
    pub fn range(&self) -> f64 {
        self.log_max - self.log_min
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_min.is_finite() && self.log_max.is_finite()) || self.log_max < self.log_min {
            return Err(Error::Config(format!(
                "normalization range [{}, {}]",
                self.log_min, self.log_max
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("normalization eps {}", self.eps)));
        }
        Ok(())
    }

    pub fn normalize<T: Real>(&self, e: T) -> T {
        let l = (e + T::lit(self.eps)).ln();
        (l - T::lit(self.log_min)) / T::lit(self.range())
    }

    /// `max(exp(y * range + log_min) - eps, 0)`.
    pub fn denormalize<T: Real>(&self, y: T) -> T {
        let v = (y * T::lit(self.range()) + T::lit(self.log_min)).exp() - T::lit(self.eps);
        v.max(T::zero())
    }

    /// Derivative of [`Self::denormalize`] with respect to `y`.
    pub fn denormalize_grad<T: Real>(&self, y: T) -> T {
        let ex = (y * T::lit(self.range()) + T::lit(self.log_min)).exp();
        if ex - T::lit(self.eps) > T::zero() {
            ex * T::lit(self.range())
        } else {
            T::zero()
        }
    }
}

/// What [`log_normalize_with`] does with a constant image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Emit 0.5 everywhere with a unit-width range centred on the value.
    Midpoint,
}

pub fn log_normalize(img: &HdrImage, eps: f32) -> Result<(HdrImage, NormalizationParams)> {
    log_normalize_with(img, eps, DegeneratePolicy::Error)
}

/// Maps `log(E + eps)` onto `[0, 1]` using the global min and max over all
/// texels and channels.
pub fn log_normalize_with(
    img: &HdrImage,
    eps: f32,
    policy: DegeneratePolicy,
) -> Result<(HdrImage, NormalizationParams)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "log eps must be positive, got {eps}"
        )));
    }
    img.validate()?;
    let eps64 = eps as f64;
    let logs: Vec<f64> = img.data.iter().map(|&v| (v as f64 + eps64).ln()).collect();
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        });
    if hi <= lo {
        return match policy {
            DegeneratePolicy::Error => Err(Error::DegenerateRange(lo)),
            DegeneratePolicy::Midpoint => Ok((
                HdrImage::filled(img.width, img.height, [0.5; 3]),
                NormalizationParams {
                    log_min: lo - 0.5,
                    log_max: lo + 0.5,
                    eps: eps64,
                },
            )),
        };
    }
    let range = hi - lo;
    let data = logs.iter().map(|l| ((l - lo) / range) as f32).collect();
    Ok((
        HdrImage {
            width: img.width,
            height: img.height,
            data,
        },
        NormalizationParams {
            log_min: lo,
            log_max: hi,
            eps: eps64,
        },
    ))
}

/// Normalises with externally supplied parameters; values may leave `[0, 1]`.
pub fn normalize_with_params(img: &HdrImage, params: &NormalizationParams) -> Vec<f32> {
    img.data
        .iter()
        .map(|&v| params.normalize(v as f64) as f32)
        .collect()
}

pub fn denormalize_exp(norm: &HdrImage, params: &NormalizationParams) -> HdrImage {
    HdrImage {
        width: norm.width,
        height: norm.height,
        data: norm
            .data
            .iter()
            .map(|&y| params.denormalize(y as f64) as f32)
            .collect(),
    }
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pfm(&mut BufReader::new(file))
}

pub fn save_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    img.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pfm(img, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn header_line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 || !line.ends_with('\n') {
        return Err(Error::PfmHeader(format!("missing {what} line")));
    }
    Ok(line.trim_end().to_string())
}

pub fn read_pfm<R: BufRead>(r: &mut R) -> Result<HdrImage> {
    let magic = header_line(r, "magic")?;
    match magic.as_str() {
        "PF" => {}
        "Pf" => return Err(Error::PfmGrayscale),
        other => return Err(Error::PfmHeader(format!("bad magic {other:?}"))),
    }
    let dims = header_line(r, "dimension")?;
    let mut parts = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(Error::PfmHeader(format!("bad dimension line {dims:?}"))),
    };
    if width == 0 || height == 0 {
        return Err(Error::PfmDimensions { width, height });
    }
    let scale_line = header_line(r, "scale")?;
    let scale: f32 = scale_line
        .parse()
        .map_err(|_| Error::PfmHeader(format!("bad scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::PfmHeader(format!("bad scale {scale_line:?}")));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(12))
        .ok_or(Error::PfmDimensions { width, height })?;
    let mut payload = Vec::with_capacity(expected);
    r.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::PfmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0f32; width * height * 3];
    let row_len = width * 3;
    for (file_row, chunk) in payload.chunks_exact(row_len * 4).enumerate() {
        let y = height - 1 - file_row;
        let dst = &mut data[y * row_len..(y + 1) * row_len];
        if scale < 0.0 {
            LittleEndian::read_f32_into(chunk, dst);
        } else {
            BigEndian::read_f32_into(chunk, dst);
        }
    }
    HdrImage::new(width, height, data)
}

pub fn write_pfm<W: Write>(img: &HdrImage, w: &mut W) -> std::io::Result<()> {
    write!(w, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    let row_len = img.width * 3;
    let mut buf = vec![0u8; row_len * 4];
    for y in (0..img.height).rev() {
        LittleEndian::write_f32_into(&img.data[y * row_len..(y + 1) * row_len], &mut buf);
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Per channel `clamp((exposure * v)^(1/gamma), 0, 1) * 255`, rounded.
pub fn tone_map_rgb8(img: &HdrImage, exposure: f32, gamma: f32) -> RgbImage {
    let inv_gamma = 1.0 / gamma;
    let bytes = img
        .data
        .iter()
        .map(|&v| {
            let t = (exposure * v).max(0.0).powf(inv_gamma).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect();
    RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer sized to image")
}

/// PNG-encoded tone-mapped preview.
pub fn tone_map_preview(img: &HdrImage, exposure: f32, gamma: f32) -> Result<Vec<u8>> {
    if !(exposure > 0.0 && gamma > 0.0) {
        return Err(Error::Config(format!(
            "preview needs positive exposure and gamma, got {exposure} and {gamma}"
        )));
    }
    let rgb = tone_map_rgb8(img, exposure, gamma);
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_preview(
    img: &HdrImage,
    path: impl AsRef<Path>,
    exposure: f32,
    gamma: f32,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = tone_map_preview(img, exposure, gamma)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Display gamma used to linearise hand-painted 8-bit targets.
pub const LDR_GAMMA: f32 = 2.2;

/// Loads an HDR or 8-bit image. `.pfm` and Radiance `.hdr` keep their
/// values; anything else is decoded as 8-bit and linearised with
/// [`LDR_GAMMA`] into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "pfm" => load_pfm(path),
        "hdr" => {
            let img = image::open(path)
                .map_err(|e| map_image_err(path, e))?
                .into_rgb32f();
            let (w, h) = img.dimensions();
            HdrImage::new(w as usize, h as usize, img.into_raw())
        }
        _ => {
            let img = image::open(path)
                .map_err(|e| map_image_err(path, e))?
                .into_rgb8();
            let (w, h) = img.dimensions();
            let data = img
                .into_raw()
                .into_iter()
                .map(|b| (b as f32 / 255.0).powf(LDR_GAMMA))
                .collect();
            HdrImage::new(w as usize, h as usize, data)
        }
    }
}

fn map_image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pfm_bytes(img: &HdrImage) -> Vec<u8> {
        let mut v = Vec::new();
        write_pfm(img, &mut v).unwrap();
        v
    }

    #[test]
    fn decodes_single_texel() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [0.5f32, 0.25, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let img = read_pfm(&mut bytes.as_slice()).unwrap();
        assert_eq!(img, HdrImage::new(1, 1, vec![0.5, 0.25, 1.0]).unwrap());
    }

    #[test]
    fn rows_are_stored_bottom_to_top() {
        let img = HdrImage::from_fn(1, 2, |_, y| [y as f32; 3]);
        let bytes = pfm_bytes(&img);
        let payload = &bytes[bytes.len() - 24..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(payload[12..16].try_into().unwrap()), 0.0);
    }

    #[test]
    fn big_endian_payload_is_accepted() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [2.0f32, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = read_pfm(&mut bytes.as_slice()).unwrap();
        assert_eq!(img.data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn header_errors_are_distinct() {
        let zero = read_pfm(&mut b"PF\n0 0\n-1.0\n".as_slice()).unwrap_err();
        assert!(matches!(zero, Error::PfmDimensions { .. }));
        let gray = read_pfm(&mut b"Pf\n1 1\n-1.0\n\0\0\0\0".as_slice()).unwrap_err();
        assert!(matches!(gray, Error::PfmGrayscale));
        let bad = read_pfm(&mut b"P6\n1 1\n255\n".as_slice()).unwrap_err();
        assert!(matches!(bad, Error::PfmHeader(_)));
        let short = read_pfm(&mut b"PF\n2 1\n-1.0\n\0\0\0\0".as_slice()).unwrap_err();
        assert!(matches!(
            short,
            Error::PfmTruncated {
                expected: 24,
                found: 4
            }
        ));
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pfm");
        save_pfm(&HdrImage::filled(1, 1, [1.0; 3]), &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, b"PF\n1 1\n-1.0\n".len() + 12);
    }

    #[test]
    fn nan_is_refused_on_write() {
        let mut img = HdrImage::zeros(2, 2);
        img.data_mut()[3] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = save_pfm(&img, dir.path().join("bad.pfm")).unwrap_err();
        assert!(matches!(err, Error::InvalidImage(_)));
    }

    #[test]
    fn luminance_examples() {
        assert_relative_eq!(
            HdrImage::filled(1, 1, [1.0; 3]).luminance(),
            1.0,
            epsilon = 1e-7
        );
        assert_relative_eq!(
            HdrImage::new(1, 1, vec![1.0, 0.0, 0.0])
                .unwrap()
                .luminance(),
            0.2126,
            epsilon = 1e-7
        );
        let two = HdrImage::new(2, 1, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(two.luminance(), 1.0, epsilon = 1e-7);
        let c = ColorimetryConstants::default();
        assert_relative_eq!(c.alpha_r + c.alpha_g + c.alpha_b, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn normalization_hand_values() {
        let e2 = std::f64::consts::E.powi(2);
        let img = HdrImage::new(
            2,
            1,
            vec![
                0.99,
                0.99,
                0.99,
                (e2 - 0.01) as f32,
                (e2 - 0.01) as f32,
                (e2 - 0.01) as f32,
            ],
        )
        .unwrap();
        let (norm, p) = log_normalize(&img, 0.01).unwrap();
        assert_relative_eq!(p.log_min, 0.0, epsilon = 1e-6);
        assert_relative_eq!(p.log_max, 2.0, epsilon = 1e-6);
        assert_eq!(norm.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);

        let p = NormalizationParams {
            log_min: 0.0,
            log_max: 2.0,
            eps: 0.01,
        };
        assert_relative_eq!(p.denormalize(1.0f64), e2 - 0.01, epsilon = 1e-12);
        assert_relative_eq!(p.denormalize(0.0f64), 0.99, epsilon = 1e-12);
    }

    #[test]
    fn constant_image_policies() {
        let img = HdrImage::filled(1, 1, [5.0; 3]);
        assert!(matches!(
            log_normalize(&img, 0.01),
            Err(Error::DegenerateRange(_))
        ));
        let (norm, p) = log_normalize_with(&img, 0.01, DegeneratePolicy::Midpoint).unwrap();
        assert_eq!(norm.data(), &[0.5; 3]);
        assert_relative_eq!(
            denormalize_exp(&norm, &p).data()[0],
            5.0,
            max_relative = 1e-6
        );
    }

    #[test]
    fn crop_examples() {
        assert_eq!(
            HdrImage::zeros(256, 128).crop_upper_half().unwrap().dims(),
            (256, 64)
        );
        let img = HdrImage::from_fn(2, 2, |x, y| [x as f32, y as f32, 1.0]);
        let top = img.crop_upper_half().unwrap();
        assert_eq!(top.data(), &img.data()[..6]);
        assert!(HdrImage::zeros(4, 3).crop_upper_half().is_err());
    }

    #[test]
    fn tone_map_examples() {
        let px = |v: f32, exposure, gamma| {
            tone_map_rgb8(&HdrImage::filled(1, 1, [v; 3]), exposure, gamma).get_pixel(0, 0)[0]
        };
        assert_eq!(px(1.0, 1.0, 1.0), 255);
        assert_eq!(px(0.0, 1.0, 1.0), 0);
        assert_eq!(px(0.25, 1.0, 2.0), 128);
        assert_eq!(px(9.0, 1.0, 2.2), 255);
        assert!(tone_map_preview(&HdrImage::zeros(1, 1), 0.0, 1.0).is_err());
    }

    fn positive_image() -> impl Strategy<Value = HdrImage> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.01f32..1000.0, w * h * 3)
                .prop_map(move |d| HdrImage::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(img in positive_image()) {
            let back = read_pfm(&mut pfm_bytes(&img).as_slice()).unwrap();
            let a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(img.dims(), back.dims());
        }

        #[test]
        fn normalization_round_trip(img in positive_image()) {
            prop_assume!(img.data().iter().any(|v| *v != img.data()[0]));
            let (norm, p) = log_normalize(&img, 0.01).unwrap();
            let lo = norm.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = norm.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
            let back = denormalize_exp(&norm, &p);
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!(((a - b) / a).abs() < 1e-5, "{} vs {}", a, b);
            }
        }

        #[test]
        fn luminance_is_linear(img in positive_image(), a in 0.0f32..4.0, b in 0.0f32..4.0) {
            let other = img.flip_horizontal();
            let combo = HdrImage::new(
                img.width(),
                img.height(),
                img.data().iter().zip(other.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = combo.luminance();
            let rhs = a as f64 * img.luminance() + b as f64 * other.luminance();
            prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
        }
    }
}
