use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneStyle, FusionConfig, ImageFeatDim, ModelKind};
use crate::autodiff::{softmax, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BACKBONE_PREFIX: &str = "backbone/";

/// What the image branch receives.
#[derive(Debug, Clone, Copy)]
pub enum ImageInput<'a, T> {
    /// A preprocessed `3 x S x S` image.
    Pixels(&'a Tensor<T>),
    /// Globally pooled backbone features computed earlier (frozen backbone).
    Pooled(&'a [T]),
}

/// Nodes of interest produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    /// Output of the last backbone stage (`C x h x w`), when pixels were fed.
    pub feature_map: Option<Var>,
    pub pooled: Option<Var>,
}

/// Two-branch network: CNN image branch and dense clinical branch joined
/// by concatenation, then two hidden dense layers and a 3-way output.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub params: ParameterSet<T>,
    /// 0 untrained, 1 frozen-backbone stage done, 2 fully trained.
    pub stage_reached: u8,
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

impl<T: Scalar> FusionModel<T> {
    /// Fresh model with He-uniform weights and zero biases.
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let conv = |params: &mut ParameterSet<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            params.insert(format!("{name}/w"), he_uniform(vec![cout, cin, k, k], cin * k * k, rng));
            params.insert(format!("{name}/b"), Tensor::zeros(vec![cout]));
        };
        if config.kind.uses_image() {
            let w = config.backbone.widths;
            conv(&mut params, "backbone/stem", 3, w[0], 3, &mut rng);
            for i in 1..4 {
                conv(&mut params, &format!("backbone/stage{i}"), w[i - 1], w[i], 3, &mut rng);
                if config.backbone.style == BackboneStyle::Residual {
                    conv(&mut params, &format!("backbone/stage{i}/skip"), w[i - 1], w[i], 1, &mut rng);
                }
            }
        }
        let mut dense = |params: &mut ParameterSet<T>, name: &str, n_in: usize, n_out: usize| {
            params.insert(format!("{name}/w"), he_uniform(vec![n_out, n_in], n_in, &mut rng));
            params.insert(format!("{name}/b"), Tensor::zeros(vec![n_out]));
        };
        if config.kind.uses_image() {
            if let ImageFeatDim::Projected(d) = config.image_feat_dim {
                dense(&mut params, "image_proj", config.backbone.native_dim(), d);
            }
        }
        if config.kind.uses_clinical() {
            dense(&mut params, "clinical", config.clinical_input_dim, config.clinical_feat_dim);
        }
        let [h1, h2] = config.head_hidden;
        dense(&mut params, "head/fc1", config.latent_dim(), h1);
        dense(&mut params, "head/fc2", h1, h2);
        dense(&mut params, "head/out", h2, config.num_classes);
        Ok(Self {
            config,
            params,
            stage_reached: 0,
        })
    }

    fn conv_block(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}/w"))?;
        let b = g.param(&self.params, &format!("{name}/b"))?;
        g.conv2d(x, w, b, stride, padding)
    }

    fn dense_layer(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}/w"))?;
        let b = g.param(&self.params, &format!("{name}/b"))?;
        g.dense(x, w, b)
    }

    /// Backbone on a `3 x S x S` image: returns (last stage map, pooled vector).
    pub fn backbone_forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let shape = g.value(x).shape().to_vec();
        if shape != [3, self.config.image_size, self.config.image_size] {
            return Err(Error::shape(
                "forward",
                format!("image {shape:?}, model expects [3, {s}, {s}]", s = self.config.image_size),
            ));
        }
        let stem = self.conv_block(g, x, "backbone/stem", 2, 1)?;
        let stem = g.relu(stem);
        let mut h = if g.value(stem).shape()[1] >= 2 && g.value(stem).shape()[2] >= 2 {
            g.max_pool2d(stem, 2)?
        } else {
            stem
        };
        let strides = self.config.backbone.strides();
        for (i, &stride) in (1..4).zip(strides.iter()) {
            let name = format!("backbone/stage{i}");
            let y = self.conv_block(g, h, &name, stride, 1)?;
            h = match self.config.backbone.style {
                BackboneStyle::Plain => g.relu(y),
                BackboneStyle::Residual => {
                    let skip = self.conv_block(g, h, &format!("{name}/skip"), stride, 0)?;
                    let sum = g.add(y, skip)?;
                    g.relu(sum)
                }
                BackboneStyle::DenseConcat if i == 3 => {
                    let y = g.relu(y);
                    g.concat(&[h, y])?
                }
                BackboneStyle::DenseConcat => g.relu(y),
            };
        }
        let pooled = g.global_avg_pool(h)?;
        Ok((h, pooled))
    }

    /// Builds the network on `g` and returns the pre-softmax logits.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        image: Option<ImageInput<'_, T>>,
        clinical: Option<&[T]>,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let mut parts = Vec::with_capacity(2);
        let (mut feature_map, mut pooled) = (None, None);
        if cfg.kind.uses_image() {
            let image = image.ok_or_else(|| Error::InvalidArgument("model needs an image input".into()))?;
            let p = match image {
                ImageInput::Pixels(t) => {
                    let x = g.constant(t.clone());
                    let (map, p) = self.backbone_forward(g, x)?;
                    feature_map = Some(map);
                    p
                }
                ImageInput::Pooled(v) => {
                    if v.len() != cfg.backbone.native_dim() {
                        return Err(Error::shape(
                            "forward",
                            format!("pooled features {} vs backbone dim {}", v.len(), cfg.backbone.native_dim()),
                        ));
                    }
                    g.constant(Tensor::vector(v.to_vec()))
                }
            };
            pooled = Some(p);
            let z = match cfg.image_feat_dim {
                ImageFeatDim::Projected(_) => {
                    let z = self.dense_layer(g, p, "image_proj")?;
                    g.relu(z)
                }
                ImageFeatDim::Native => p,
            };
            parts.push(g.dropout(z, cfg.image_dropout, train, rng)?);
        }
        if cfg.kind.uses_clinical() {
            let c = clinical.ok_or_else(|| Error::InvalidArgument("model needs a clinical input".into()))?;
            if c.len() != cfg.clinical_input_dim {
                return Err(Error::shape(
                    "forward",
                    format!("clinical vector length {} vs configured {}", c.len(), cfg.clinical_input_dim),
                ));
            }
            let x = g.constant(Tensor::vector(c.to_vec()));
            let z = self.dense_layer(g, x, "clinical")?;
            let z = g.relu(z);
            parts.push(g.dropout(z, cfg.clinical_dropout, train, rng)?);
        }
        let fused = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let h = self.dense_layer(g, fused, "head/fc1")?;
        let h = g.relu(h);
        let h = self.dense_layer(g, h, "head/fc2")?;
        let h = g.relu(h);
        let logits = self.dense_layer(g, h, "head/out")?;
        Ok(Forward {
            logits,
            feature_map,
            pooled,
        })
    }

    /// Eval-mode class probabilities for one subject.
    pub fn predict_proba(&self, image: Option<ImageInput<'_, T>>, clinical: Option<&[T]>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward_graph(&mut g, image, clinical, false, &mut rng)?;
        Ok(softmax(g.value(f.logits).data()))
    }

    /// Pooled backbone features (eval mode), used to cache a frozen backbone.
    pub fn pooled_features(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let (_, pooled) = self.backbone_forward(&mut g, x)?;
        Ok(g.value(pooled).data().to_vec())
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.params.freeze_prefix(BACKBONE_PREFIX, frozen);
    }

    /// Backbone weights only, for initializing another model.
    pub fn export_backbone(&self) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(BACKBONE_PREFIX)) {
            out.insert(name, p.value.clone());
        }
        out
    }

    pub fn load_backbone(&mut self, backbone: &ParameterSet<T>) -> Result<()> {
        let expected = self.params.names().filter(|n| n.starts_with(BACKBONE_PREFIX)).count();
        let n = self.params.load_values(backbone, |n| n.starts_with(BACKBONE_PREFIX))?;
        if n != expected {
            return Err(Error::InvalidArgument(format!(
                "backbone provides {n} of {expected} tensors (style mismatch?)"
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::config::BackboneStyle;

    fn image(size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, size, size], (0..3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn outputs_are_probabilities_for_every_style() {
        for style in BackboneStyle::ALL {
            let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, style, 16, 5, 3)).unwrap();
            let p = m.predict_proba(Some(ImageInput::Pixels(&image(16, 1))), Some(&[0.1, 0.5, 0.0, 1.0, 0.3])).unwrap();
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 16, 2, 9)).unwrap();
        let img = image(16, 2);
        let a = m.predict_proba(Some(ImageInput::Pixels(&img)), Some(&[0.2, 0.4])).unwrap();
        let b = m.predict_proba(Some(ImageInput::Pixels(&img)), Some(&[0.2, 0.4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_gives_softmax_of_bias() {
        let mut m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 16, 2, 9)).unwrap();
        let out = m.params.get_mut("head/out/w").unwrap();
        out.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
        m.params.get_mut("head/out/b").unwrap().value = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let want = softmax(&[0.5, -1.0, 2.0]);
        for seed in 0..3 {
            let p = m.predict_proba(Some(ImageInput::Pixels(&image(16, seed))), Some(&[seed as f64, 1.0])).unwrap();
            assert_eq!(p, want);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 16, 2, 9)).unwrap();
        assert!(m.predict_proba(Some(ImageInput::Pixels(&image(16, 0))), Some(&[0.1])).is_err());
        assert!(m.predict_proba(Some(ImageInput::Pixels(&image(8, 0))), Some(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn pooled_path_matches_pixel_path() {
        let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::DenseConcat, 16, 2, 4)).unwrap();
        let img = image(16, 5);
        let pooled = m.pooled_features(&img).unwrap();
        assert_eq!(pooled.len(), 192);
        let a = m.predict_proba(Some(ImageInput::Pixels(&img)), Some(&[0.3, 0.1])).unwrap();
        let b = m.predict_proba(Some(ImageInput::Pooled(&pooled)), Some(&[0.3, 0.1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exported_backbone_reproduces_conv_outputs() {
        let src = FusionModel::<f64>::new(FusionConfig::new(ModelKind::ImageOnly, BackboneStyle::Residual, 16, 0, 1)).unwrap();
        let mut dst = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Residual, 16, 4, 2)).unwrap();
        let img = image(16, 3);
        assert_ne!(src.pooled_features(&img).unwrap(), dst.pooled_features(&img).unwrap());
        dst.load_backbone(&src.export_backbone()).unwrap();
        assert_eq!(src.pooled_features(&img).unwrap(), dst.pooled_features(&img).unwrap());

        let mut plain = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 16, 4, 2)).unwrap();
        assert!(plain.load_backbone(&src.export_backbone()).is_err());
    }

    #[test]
    fn concatenated_latent_length() {
        let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 16, 7, 4)).unwrap();
        assert_eq!(m.params.get("head/fc1/w").unwrap().value.shape(), &[64, 64 + 128]);
    }

    #[test]
    fn tiny_inputs_still_forward() {
        let m = FusionModel::<f64>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Residual, 8, 3, 4)).unwrap();
        let p = m.predict_proba(Some(ImageInput::Pixels(&image(8, 0))), Some(&[0.0, 1.0, 0.5])).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
