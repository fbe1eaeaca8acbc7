//! Gradient-weighted class activation maps over the last backbone stage.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ImageInput};
use crate::image::RawImage;
use crate::scalar::Scalar;

/// Layer the maps are taken from.
pub const GRADCAM_LAYER: &str = "backbone/stage3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub target_class: usize,
    pub layer: String,
    pub subject_id: Option<String>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Map for `target_class` at the input resolution of `image` (`3 x S x S`).
///
/// `clinical` is required for models with a clinical branch (pass the training
/// mean for fusion-image-only maps).
pub fn gradcam<T: Scalar>(
    model: &FusionModel<T>,
    image: &Tensor<T>,
    clinical: Option<&[T]>,
    target_class: usize,
) -> Result<Heatmap> {
    if target_class >= model.config.num_classes {
        return Err(Error::InvalidArgument(format!("target class {target_class} out of range")));
    }
    // Frozen weights still need gradients to flow through the backbone.
    let mut g = Graph::new().with_forced_param_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = model.forward_graph(&mut g, Some(ImageInput::Pixels(image)), clinical, false, &mut rng)?;
    let map = f
        .feature_map
        .ok_or_else(|| Error::InvalidArgument("model has no image branch".into()))?;
    let shape = g.value(map).shape().to_vec();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if h * w <= 1 {
        return Err(Error::InvalidArgument(format!(
            "layer {GRADCAM_LAYER} has no spatial extent ({h}x{w}); use a larger input size"
        )));
    }
    let mut seed = vec![T::zero(); model.config.num_classes];
    seed[target_class] = T::one();
    g.backward_with_seed(f.logits, seed)?;

    let acts: Vec<f64> = g.value(map).data().iter().map(|x| x.as_f64()).collect();
    let mut cam = vec![0.0; h * w];
    if let Some(grad) = g.grad(map) {
        let hw = h * w;
        for ch in 0..k {
            let weight = grad[ch * hw..(ch + 1) * hw].iter().map(|x| x.as_f64()).sum::<f64>() / hw as f64;
            for (c, a) in cam.iter_mut().zip(&acts[ch * hw..(ch + 1) * hw]) {
                *c += weight * a;
            }
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    let size = image.shape()[1];
    let mut values = upsample_bilinear(&cam, h, w, size, image.shape()[2]);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        height: size,
        width: image.shape()[2],
        values,
        target_class,
        layer: GRADCAM_LAYER.to_string(),
        subject_id: None,
    })
}

/// Grayscale base with the red channel raised toward 255 in proportion to the map.
pub fn composite(raw: &RawImage, heatmap: &Heatmap) -> Vec<[u8; 3]> {
    let (h, w) = (raw.height(), raw.width());
    let heat = if (heatmap.height, heatmap.width) == (h, w) {
        heatmap.values.clone()
    } else {
        upsample_bilinear(&heatmap.values, heatmap.height, heatmap.width, h, w)
    };
    raw.pixels()
        .iter()
        .zip(heat)
        .map(|(&p, v)| {
            let red = p as f64 + v.clamp(0.0, 1.0) * (255.0 - p as f64);
            [red.round() as u8, p, p]
        })
        .collect()
}

/// Writes the composite as an RGB PNG and returns the pixels written.
pub fn overlay(raw: &RawImage, heatmap: &Heatmap, path: &Path) -> Result<Vec<[u8; 3]>> {
    let px = composite(raw, heatmap);
    let buf = image::RgbImage::from_raw(raw.width() as u32, raw.height() as u32, px.iter().flatten().copied().collect())
        .expect("buffer matches extents");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(px)
}
