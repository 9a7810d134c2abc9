//! RGB image tensors with pixel values in `[0, 1]`.
//!
//! Images are stored `(height, width, 3)`. Loading scales 8- and 16-bit
//! sources by their bit-depth maximum; [`standardize`] resizes to the fixed
//! network input side with bilinear interpolation.

use std::path::Path;

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Network input side after standardization.
pub const STANDARD_SIDE: usize = 224;

/// An RGB image, `(height, width, 3)`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    /// Wrap a pixel array, validating shape and value range.
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("image has a zero dimension".into()));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::ShapeMismatch(
                "pixel values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Internal constructor for ops whose arithmetic keeps values in range.
    pub(crate) fn from_clamped(mut pixels: Array3<f32>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { pixels }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            pixels: Array3::from_elem((height, width, 3), value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn is_standard_size(&self) -> bool {
        self.height() == STANDARD_SIDE && self.width() == STANDARD_SIDE
    }

    /// Decode a PNG or JPEG file; 8- and 16-bit RGB are scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::UnreadableImage {
            view: "?".into(),
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let pixels = match img {
            image::DynamicImage::ImageRgb16(buf) => {
                let (w, h) = (buf.width() as usize, buf.height() as usize);
                let data: Vec<f32> = buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
                Array3::from_shape_vec((h, w, 3), data).expect("decoded buffer matches dims")
            }
            image::DynamicImage::ImageRgba16(_) | image::DynamicImage::ImageLuma16(_) => {
                let buf = img.to_rgb16();
                let (w, h) = (buf.width() as usize, buf.height() as usize);
                let data: Vec<f32> = buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
                Array3::from_shape_vec((h, w, 3), data).expect("decoded buffer matches dims")
            }
            other => {
                let buf = other.to_rgb8();
                let (w, h) = (buf.width() as usize, buf.height() as usize);
                let data: Vec<f32> = buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                Array3::from_shape_vec((h, w, 3), data).expect("decoded buffer matches dims")
            }
        };
        Ok(Self { pixels })
    }

    /// Encode as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let mut raw = Vec::with_capacity(h * w * 3);
        for v in self.pixels.iter() {
            raw.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("raw buffer matches dimensions");
        buf.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
    }

    /// Maximum absolute pixel difference to another image of the same shape.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        let mut m = 0f32;
        Zip::from(&self.pixels).and(&other.pixels).for_each(|a, b| {
            m = m.max((a - b).abs());
        });
        m
    }
}

/// Left-right flip: column `j` maps to column `width - 1 - j`.
///
/// A pure index permutation, so it is an exact involution.
pub fn mirror_horizontal(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.pixels.dim();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[i, j, ch]] = img.pixels[[i, w - 1 - j, ch]];
            }
        }
    }
    ImageTensor { pixels: out }
}

/// Resize to `STANDARD_SIDE x STANDARD_SIDE` with bilinear interpolation.
///
/// Images already at the standard size are returned unchanged, which makes
/// standardization exactly idempotent on them.
pub fn standardize(img: &ImageTensor) -> ImageTensor {
    if img.is_standard_size() {
        return img.clone();
    }
    resize_bilinear(img, STANDARD_SIDE, STANDARD_SIDE)
}

/// Bilinear resampling on pixel centers: output pixel `(i, j)` samples the
/// source at `((i + 0.5) * sh / oh - 0.5, (j + 0.5) * sw / ow - 0.5)`,
/// clamped to the source grid.
pub fn resize_bilinear(img: &ImageTensor, out_height: usize, out_width: usize) -> ImageTensor {
    let (sh, sw, _) = img.pixels.dim();
    let scale_y = sh as f64 / out_height as f64;
    let scale_x = sw as f64 / out_width as f64;
    let mut out = Array3::zeros((out_height, out_width, 3));
    for i in 0..out_height {
        let sy = ((i as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = (sy - y0 as f64) as f32;
        for j in 0..out_width {
            let sx = ((j as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..3 {
                let p00 = img.pixels[[y0, x0, ch]];
                let p01 = img.pixels[[y0, x1, ch]];
                let p10 = img.pixels[[y1, x0, ch]];
                let p11 = img.pixels[[y1, x1, ch]];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                out[[i, j, ch]] = top + (bot - top) * fy;
            }
        }
    }
    ImageTensor::from_clamped(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let pixels = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            ((i as f32 / h as f32) * 0.5 + (j as f32 / w as f32) * 0.3 + c as f32 * 0.05)
                .clamp(0.0, 1.0)
        });
        ImageTensor::new(pixels).unwrap()
    }

    #[test]
    fn rejects_bad_channel_count() {
        let arr = Array3::<f32>::zeros((4, 4, 1));
        assert!(matches!(
            ImageTensor::new(arr),
            Err(crate::Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut arr = Array3::<f32>::zeros((2, 2, 3));
        arr[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(arr).is_err());
    }

    #[test]
    fn mirror_of_symmetric_image_is_identity() {
        let pixels = Array3::from_shape_fn((3, 5, 3), |(i, j, _)| {
            let jj = j.min(4 - j);
            (i as f32 * 0.1 + jj as f32 * 0.2).clamp(0.0, 1.0)
        });
        let img = ImageTensor::new(pixels).unwrap();
        assert_eq!(mirror_horizontal(&img), img);
    }

    #[test]
    fn mirror_is_involution() {
        let img = gradient_image(7, 11);
        assert_eq!(mirror_horizontal(&mirror_horizontal(&img)), img);
    }

    #[test]
    fn mirror_two_by_two() {
        // [[a, b], [c, d]] -> [[b, a], [d, c]]
        let (a, b, c, d) = (0.1f32, 0.2, 0.3, 0.4);
        let mut arr = Array3::zeros((2, 2, 3));
        for ch in 0..3 {
            arr[[0, 0, ch]] = a;
            arr[[0, 1, ch]] = b;
            arr[[1, 0, ch]] = c;
            arr[[1, 1, ch]] = d;
        }
        let m = mirror_horizontal(&ImageTensor::new(arr).unwrap());
        assert_eq!(m.pixels()[[0, 0, 0]], b);
        assert_eq!(m.pixels()[[0, 1, 0]], a);
        assert_eq!(m.pixels()[[1, 0, 0]], d);
        assert_eq!(m.pixels()[[1, 1, 0]], c);
    }

    #[test]
    fn standardize_keeps_standard_images_exactly() {
        let img = gradient_image(STANDARD_SIDE, STANDARD_SIDE);
        let out = standardize(&img);
        assert_eq!(out, img);
    }

    #[test]
    fn standardize_preserves_uniform_level() {
        let img = ImageTensor::constant(448, 448, 0.37);
        let out = standardize(&img);
        assert_eq!(out.height(), STANDARD_SIDE);
        assert_eq!(out.width(), STANDARD_SIDE);
        for v in out.pixels().iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    // Independent scalar oracle for the resize convention, evaluated at one
    // output pixel. Kept free of the production code path.
    fn bilinear_oracle(img: &ImageTensor, oh: usize, ow: usize, i: usize, j: usize) -> [f32; 3] {
        let (sh, sw, _) = img.pixels().dim();
        let sy = ((i as f64 + 0.5) * sh as f64 / oh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let sx = ((j as f64 + 0.5) * sw as f64 / ow as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let mut out = [0f32; 3];
        for (ch, slot) in out.iter_mut().enumerate() {
            let p = |y: usize, x: usize| img.pixels()[[y, x, ch]] as f64;
            let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + p(y0, x1) * (1.0 - fy) * fx
                + p(y1, x0) * fy * (1.0 - fx)
                + p(y1, x1) * fy * fx;
            *slot = v as f32;
        }
        out
    }

    #[test]
    fn resize_corners_match_oracle() {
        let img = gradient_image(100, 200);
        let out = standardize(&img);
        let side = STANDARD_SIDE;
        for &(i, j) in &[(0, 0), (0, side - 1), (side - 1, 0), (side - 1, side - 1)] {
            let expected = bilinear_oracle(&img, side, side, i, j);
            for ch in 0..3 {
                assert!(
                    (out.pixels()[[i, j, ch]] - expected[ch]).abs() < 1e-3,
                    "corner ({i},{j}) channel {ch}: {} vs {}",
                    out.pixels()[[i, j, ch]],
                    expected[ch]
                );
            }
        }
    }

    #[test]
    fn standardize_idempotent_after_resize() {
        let img = gradient_image(100, 200);
        let once = standardize(&img);
        let twice = standardize(&once);
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(16, 24);
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back.height(), 16);
        assert_eq!(back.width(), 24);
        // 8-bit quantization error bound
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn load_missing_file_errors() {
        let err = ImageTensor::load(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(matches!(err, crate::Error::MissingFile(_)));
    }
}
