//! Chest-radiograph style preprocessing: mask-guided crop, bilinear
//! resize, replication to three channels and per-channel normalization.

mod io;

pub use io::{load_gray, load_mask, read_fimg, save_gray, write_fimg};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const MIN_INPUT_EXTENT: usize = 16;
pub const MIN_OUTPUT_SIZE: usize = 8;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape(
                "raw_image",
                format!("{width}x{height} image with {} pixels", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Rejects images smaller than the minimum acquisition size.
    pub fn check_input_extent(&self) -> Result<()> {
        if self.width < MIN_INPUT_EXTENT || self.height < MIN_INPUT_EXTENT {
            return Err(Error::Data(vec![format!(
                "image {}x{} smaller than {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}",
                self.width, self.height
            )]));
        }
        Ok(())
    }
}

/// Binary lung-field mask aligned with a [`RawImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LungMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl LungMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::shape("lung_mask", format!("{width}x{height} mask with {} cells", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("lung mask has no foreground pixel".into()));
        }
        Ok(Self { width, height, mask })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.mask
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Network-ready image: `3 x S x S` normalized values.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage<T> {
    pub tensor: Tensor<T>,
    pub source: Option<String>,
    pub crop: Option<CropBox>,
}

impl<T: Scalar> PreprocessedImage<T> {
    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Tight foreground bounding box grown by `floor(margin_frac * extent)`
/// pixels per side, clamped to the image.
pub fn mask_bbox(mask: &LungMask, margin_frac: f64) -> Result<CropBox> {
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.mask[r * mask.width + c] {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
    }
    if top == usize::MAX {
        return Err(Error::InvalidArgument("lung mask has no foreground pixel".into()));
    }
    if !(0.0..1.0).contains(&margin_frac) {
        return Err(Error::InvalidArgument(format!("crop margin {margin_frac} outside [0, 1)")));
    }
    let dr = (margin_frac * (bottom - top + 1) as f64).floor() as usize;
    let dc = (margin_frac * (right - left + 1) as f64).floor() as usize;
    Ok(CropBox {
        top: top.saturating_sub(dr),
        left: left.saturating_sub(dc),
        bottom: (bottom + dr).min(mask.height - 1),
        right: (right + dc).min(mask.width - 1),
    })
}

pub fn crop_to_mask_bbox(raw: &RawImage, mask: &LungMask, margin_frac: f64) -> Result<(RawImage, CropBox)> {
    if raw.width != mask.width || raw.height != mask.height {
        return Err(Error::shape(
            "crop_to_mask_bbox",
            format!("image {}x{} vs mask {}x{}", raw.width, raw.height, mask.width, mask.height),
        ));
    }
    let b = mask_bbox(mask, margin_frac)?;
    let mut pixels = Vec::with_capacity(b.width() * b.height());
    for r in b.top..=b.bottom {
        pixels.extend_from_slice(&raw.pixels[r * raw.width + b.left..=r * raw.width + b.right]);
    }
    Ok((RawImage::new(b.width(), b.height(), pixels)?, b))
}

/// Corner-aligned bilinear resampling to `size x size`, unquantized.
pub fn resize_bilinear_f64(img: &RawImage, size: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize| -> (usize, usize, f64) {
        if size == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (size - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let (r0, r1, fr) = coord(i, img.height);
        for j in 0..size {
            let (c0, c1, fc) = coord(j, img.width);
            let p = |r, c| img.get(r, c) as f64;
            let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
            let bottom = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

pub fn resize_bilinear(img: &RawImage, size: usize) -> Result<RawImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if img.width == size && img.height == size {
        return Ok(img.clone());
    }
    let pixels = resize_bilinear_f64(img, size)
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    RawImage::new(size, size, pixels)
}

/// Replicates to three channels, divides by 255 and applies the
/// per-channel mean/std normalization.
pub fn scale_and_normalize<T: Scalar>(img: &RawImage, mean: [f64; 3], std: [f64; 3]) -> PreprocessedImage<T> {
    let mut data = Vec::with_capacity(3 * img.pixels.len());
    for c in 0..3 {
        data.extend(img.pixels.iter().map(|&p| T::of((p as f64 / 255.0 - mean[c]) / std[c])));
    }
    PreprocessedImage {
        tensor: Tensor::new(vec![3, img.height, img.width], data).expect("consistent extents"),
        source: None,
        crop: None,
    }
}

/// Crop, resize and normalization constants, recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePipeline {
    pub size: usize,
    pub margin_frac: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImagePipeline {
    fn default() -> Self {
        Self {
            size: 224,
            margin_frac: 0.05,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl ImagePipeline {
    pub fn with_size(size: usize) -> Result<Self> {
        let p = Self {
            size,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_OUTPUT_SIZE {
            return Err(Error::Config(format!("image size {} below minimum {MIN_OUTPUT_SIZE}", self.size)));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn run<T: Scalar>(&self, raw: &RawImage, mask: &LungMask) -> Result<PreprocessedImage<T>> {
        let (cropped, crop) = crop_to_mask_bbox(raw, mask, self.margin_frac)?;
        let resized = resize_bilinear(&cropped, self.size)?;
        let mut out = scale_and_normalize(&resized, self.mean, self.std);
        out.crop = Some(crop);
        Ok(out)
    }

    /// Smallest and largest normalized value any input can produce.
    pub fn value_bounds(&self) -> (f64, f64) {
        let lo = (0..3).map(|c| -self.mean[c] / self.std[c]).fold(f64::INFINITY, f64::min);
        let hi = (0..3).map(|c| (1.0 - self.mean[c]) / self.std[c]).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> RawImage {
        RawImage::new(w, h, (0..w * h).map(|i| (i * 7 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn full_mask_crop_is_identity() {
        let img = gradient_image(20, 18);
        let (c, b) = crop_to_mask_bbox(&img, &LungMask::full(20, 18), 0.05).unwrap();
        assert_eq!(c, img);
        assert_eq!(b, CropBox { top: 0, left: 0, bottom: 17, right: 19 });
    }

    #[test]
    fn single_pixel_crop() {
        let img = gradient_image(17, 17);
        let mut m = vec![false; 17 * 17];
        m[8 * 17 + 8] = true;
        let (c, _) = crop_to_mask_bbox(&img, &LungMask::new(17, 17, m).unwrap(), 0.0).unwrap();
        assert_eq!((c.width(), c.height()), (1, 1));
        assert_eq!(c.get(0, 0), img.get(8, 8));
    }

    #[test]
    fn margin_uses_floor_of_extent() {
        let mut m = vec![false; 100 * 100];
        for r in 20..=79 {
            for c in 30..=69 {
                m[r * 100 + c] = true;
            }
        }
        let b = mask_bbox(&LungMask::new(100, 100, m).unwrap(), 0.05).unwrap();
        assert_eq!(b, CropBox { top: 17, left: 28, bottom: 82, right: 71 });
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(LungMask::new(4, 4, vec![false; 16]).is_err());
        let img = gradient_image(16, 16);
        assert!(crop_to_mask_bbox(&img, &LungMask::full(8, 8), 0.0).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = gradient_image(12, 12);
        assert_eq!(resize_bilinear(&img, 12).unwrap(), img);
        let flat = RawImage::new(30, 20, vec![77; 600]).unwrap();
        assert!(resize_bilinear(&flat, 9).unwrap().pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn checkerboard_bilinear_grid() {
        // f(u, v) = 255 (u + v - 2uv) on the corner-aligned grid u, v in {0, 1/3, 2/3, 1}
        let img = RawImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let got = resize_bilinear_f64(&img, 4);
        let t = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (i, &v) in t.iter().enumerate() {
            for (j, &u) in t.iter().enumerate() {
                let want = 255.0 * (u + v - 2.0 * u * v);
                assert!((got[i * 4 + j] - want).abs() < 1e-9);
            }
        }
        let q = resize_bilinear(&img, 4).unwrap();
        assert_eq!(&q.pixels()[..4], &[0, 85, 170, 255]);
        assert_eq!(&q.pixels()[4..8], &[85, 113, 142, 170]);
    }

    #[test]
    fn resize_commutes_with_intensity_scaling() {
        let img = RawImage::new(16, 16, (0..256).map(|i| (i % 100) as u8).collect()).unwrap();
        let doubled = RawImage::new(16, 16, img.pixels().iter().map(|&p| p * 2).collect()).unwrap();
        let a = resize_bilinear_f64(&img, 11);
        let b = resize_bilinear_f64(&doubled, 11);
        assert!(a.iter().zip(&b).all(|(x, y)| (2.0 * x - y).abs() < 1e-9));
    }

    #[test]
    fn normalization_constants() {
        let img = RawImage::new(2, 1, vec![0, 255]).unwrap();
        let p = scale_and_normalize::<f64>(&img, IMAGENET_MEAN, IMAGENET_STD);
        let d = p.tensor.data();
        assert!((d[0] - (-2.1179)).abs() < 1e-4);
        assert!((d[1] - 2.2489).abs() < 1e-4);
        // channels identical before normalization
        for c in 0..3 {
            let back: Vec<f64> = d[c * 2..c * 2 + 2].iter().map(|v| v * IMAGENET_STD[c] + IMAGENET_MEAN[c]).collect();
            assert!((back[0] - 0.0).abs() < 1e-12 && (back[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_bounds_and_determinism() {
        let p = ImagePipeline::with_size(16).unwrap();
        let img = gradient_image(40, 30);
        let a = p.run::<f64>(&img, &LungMask::full(40, 30)).unwrap();
        let b = p.run::<f64>(&img, &LungMask::full(40, 30)).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = p.value_bounds();
        assert!(a.tensor.data().iter().all(|&v| v.is_finite() && v >= lo - 1e-12 && v <= hi + 1e-12));
        assert_eq!(a.tensor.shape(), &[3, 16, 16]);
        assert!(ImagePipeline::with_size(4).is_err());
    }
}
