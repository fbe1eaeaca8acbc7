use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const CLINICAL_FEAT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneStyle {
    /// Straight conv stack (EfficientNet stand-in).
    Plain,
    /// Conv + 1x1 projection shortcut, summed (ResNet stand-in).
    Residual,
    /// Final stage concatenates its input with its conv output (DenseNet stand-in).
    DenseConcat,
}

impl BackboneStyle {
    pub const ALL: [BackboneStyle; 3] = [BackboneStyle::Plain, BackboneStyle::Residual, BackboneStyle::DenseConcat];

    pub fn name(self) -> &'static str {
        match self {
            BackboneStyle::Plain => "plain",
            BackboneStyle::Residual => "residual",
            BackboneStyle::DenseConcat => "dense",
        }
    }
}

impl std::str::FromStr for BackboneStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BackboneStyle::Plain),
            "residual" => Ok(BackboneStyle::Residual),
            "dense" | "dense_concat" | "dense-concat" => Ok(BackboneStyle::DenseConcat),
            other => Err(Error::Config(format!("unknown backbone `{other}` (plain|residual|dense)"))),
        }
    }
}

/// Four-stage compact CNN description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneProfile {
    pub style: BackboneStyle,
    pub widths: [usize; 4],
}

impl BackboneProfile {
    pub fn standard(style: BackboneStyle) -> Self {
        let widths = match style {
            BackboneStyle::Plain | BackboneStyle::DenseConcat => [16, 32, 64, 128],
            BackboneStyle::Residual => [16, 40, 80, 160],
        };
        Self { style, widths }
    }

    /// Length of the globally pooled feature vector.
    pub fn native_dim(&self) -> usize {
        match self.style {
            BackboneStyle::Plain | BackboneStyle::Residual => self.widths[3],
            BackboneStyle::DenseConcat => self.widths[2] + self.widths[3],
        }
    }

    /// Stage strides after the stem (which halves then max-pools).
    pub fn strides(&self) -> [usize; 3] {
        [2, 2, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.native_dim() < 8 {
            return Err(Error::Config(format!("backbone feature dim {} below 8", self.native_dim())));
        }
        Ok(())
    }
}

/// Width of the image branch latent fed to the concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFeatDim {
    /// Dense projection to the given width (64 or 128).
    Projected(usize),
    /// Pooled backbone features used directly.
    Native,
}

impl std::str::FromStr for ImageFeatDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(ImageFeatDim::Native),
            "64" => Ok(ImageFeatDim::Projected(64)),
            "128" => Ok(ImageFeatDim::Projected(128)),
            other => Err(Error::Config(format!("image feature dim `{other}` not in {{64, 128, native}}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fusion,
    ImageOnly,
    FeatureOnly,
}

impl ModelKind {
    pub fn uses_image(self) -> bool {
        matches!(self, ModelKind::Fusion | ModelKind::ImageOnly)
    }

    pub fn uses_clinical(self) -> bool {
        matches!(self, ModelKind::Fusion | ModelKind::FeatureOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: ModelKind,
    pub backbone: BackboneProfile,
    pub image_size: usize,
    pub image_feat_dim: ImageFeatDim,
    pub clinical_feat_dim: usize,
    pub clinical_input_dim: usize,
    pub head_hidden: [usize; 2],
    pub image_dropout: f64,
    pub clinical_dropout: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl FusionConfig {
    pub fn new(kind: ModelKind, style: BackboneStyle, image_size: usize, clinical_input_dim: usize, seed: u64) -> Self {
        Self {
            kind,
            backbone: BackboneProfile::standard(style),
            image_size,
            image_feat_dim: ImageFeatDim::Projected(64),
            clinical_feat_dim: CLINICAL_FEAT_DIM,
            clinical_input_dim,
            head_hidden: [64, 32],
            image_dropout: 0.3,
            clinical_dropout: 0.3,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    pub fn image_latent_dim(&self) -> usize {
        match self.image_feat_dim {
            ImageFeatDim::Projected(d) => d,
            ImageFeatDim::Native => self.backbone.native_dim(),
        }
    }

    /// Width of the head input (concatenation of the active branches).
    pub fn latent_dim(&self) -> usize {
        let mut d = 0;
        if self.kind.uses_image() {
            d += self.image_latent_dim();
        }
        if self.kind.uses_clinical() {
            d += self.clinical_feat_dim;
        }
        d
    }

    /// Table-style label of the latent sizes, e.g. `64*128`.
    pub fn latent_label(&self) -> String {
        match self.kind {
            ModelKind::Fusion => format!("{}*{}", self.image_latent_dim(), self.clinical_feat_dim),
            ModelKind::ImageOnly => format!("{}", self.image_latent_dim()),
            ModelKind::FeatureOnly => format!("{}", self.clinical_feat_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.clinical_feat_dim != CLINICAL_FEAT_DIM {
            return Err(Error::Config(format!(
                "clinical feature dim is fixed at {CLINICAL_FEAT_DIM}, got {}",
                self.clinical_feat_dim
            )));
        }
        if let ImageFeatDim::Projected(d) = self.image_feat_dim {
            if d != 64 && d != 128 {
                return Err(Error::Config(format!("image feature dim {d} not in {{64, 128, native}}")));
            }
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}")));
        }
        if self.kind.uses_clinical() && self.clinical_input_dim == 0 {
            return Err(Error::Config("clinical input dim must be positive".into()));
        }
        if self.kind.uses_image() && self.image_size < crate::image::MIN_OUTPUT_SIZE {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        for r in [self.image_dropout, self.clinical_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if self.head_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("head hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer and early-stopping settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Overrides the inverse-frequency weights computed from the training labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            momentum: 0.9,
            batch_size: 16,
            patience: 8,
            max_epochs: 100,
            class_weights: None,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("bad optimizer settings lr={} momentum={}", self.lr, self.momentum)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, patience and max_epochs must be positive".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != NUM_CLASSES || w.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config("class weight override needs 3 positive values".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_dims() {
        let dims: Vec<usize> = BackboneStyle::ALL.iter().map(|&s| BackboneProfile::standard(s).native_dim()).collect();
        assert_eq!(dims, vec![128, 160, 192]);
    }

    #[test]
    fn latent_dims_and_labels() {
        let mut c = FusionConfig::new(ModelKind::Fusion, BackboneStyle::Residual, 64, 30, 1);
        assert_eq!(c.latent_dim(), 192);
        assert_eq!(c.latent_label(), "64*128");
        c.image_feat_dim = ImageFeatDim::Native;
        assert_eq!(c.latent_label(), "160*128");
        c.image_feat_dim = ImageFeatDim::Projected(96);
        assert!(c.validate().is_err());
        c.image_feat_dim = ImageFeatDim::Projected(128);
        c.clinical_feat_dim = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_train_spec() {
        let s = TrainSpec::default();
        assert_eq!((s.lr, s.momentum, s.batch_size, s.patience), (0.0002, 0.9, 16, 8));
        s.validate().unwrap();
    }
}
