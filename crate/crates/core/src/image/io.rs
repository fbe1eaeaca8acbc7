use std::io::Write;
use std::path::Path;

use super::{LungMask, PreprocessedImage, RawImage};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FIMG_MAGIC: &[u8; 4] = b"FIMG";

/// Loads an 8-bit grayscale PNG or binary PGM.
pub fn load_gray(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    RawImage::new(w as usize, h as usize, luma.into_raw())
}

/// Loads a mask image; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<LungMask> {
    let raw = load_gray(path)?;
    LungMask::new(raw.width(), raw.height(), raw.pixels().iter().map(|&p| p != 0).collect())
}

/// Writes grayscale pixels; format follows the extension (`.png` or `.pgm`).
pub fn save_gray(path: &Path, img: &RawImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .ok_or_else(|| Error::shape("save_gray", "pixel buffer does not match extents"))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
            out.extend_from_slice(img.pixels());
            std::fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        _ => buf.save_with_format(path, image::ImageFormat::Png).map_err(Error::Image),
    }
}

/// Debug dump: `FIMG`, u32 channels, u32 size, u32 reserved (0), then
/// channel planes as little-endian f32.
pub fn write_fimg<T: Scalar>(path: &Path, img: &PreprocessedImage<T>) -> Result<()> {
    let shape = img.tensor.shape();
    let mut out = Vec::with_capacity(16 + 4 * img.tensor.len());
    out.extend_from_slice(FIMG_MAGIC);
    out.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    out.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in img.tensor.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_fimg(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FIMG_MAGIC {
        return Err(Error::Format(format!("{} is not a FIMG dump", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (c, s) = (u32_at(4), u32_at(8));
    let body = &bytes[16..];
    if body.len() != c * s * s * 4 {
        return Err(Error::Format(format!("FIMG body holds {} bytes, expected {}", body.len(), c * s * s * 4)));
    }
    let data = body.chunks_exact(4).map(f32::read_le).collect();
    Tensor::new(vec![c, s, s], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{scale_and_normalize, IMAGENET_MEAN, IMAGENET_STD};

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::new(17, 16, (0..272).map(|i| (i % 256) as u8).collect()).unwrap();
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_gray(&p, &img).unwrap();
            assert_eq!(load_gray(&p).unwrap(), img);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_gray(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"), "{err}");
    }

    #[test]
    fn fimg_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::new(8, 8, (0..64).map(|i| (i * 4) as u8).collect()).unwrap();
        let pre = scale_and_normalize::<f32>(&img, IMAGENET_MEAN, IMAGENET_STD);
        let p = dir.path().join("x.fimg");
        write_fimg(&p, &pre).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 64 * 4);
        assert_eq!(read_fimg(&p).unwrap(), pre.tensor);
    }
}
