//! Self-contained binary model files.
//!
//! Layout: `DCFZ`, u32 version, u32 metadata length, canonical JSON metadata,
//! u8 float width, u32 tensor count, then per tensor: u32 name length, name,
//! u32 rank, u32 dims, little-endian values. Tensors appear in name order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FusionConfig;
use super::model::FusionModel;
use super::train::StageHistory;
use crate::autodiff::{ParameterSet, Tensor};
use crate::clinical::FittedPreprocessor;
use crate::error::{Error, Result};
use crate::image::ImagePipeline;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"DCFZ";
pub const FORMAT_VERSION: u32 = 1;
const NEUTRAL_IMAGE_TENSOR: &str = "aux/neutral_image";

/// Everything besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: DType,
    pub config: FusionConfig,
    pub stage_reached: u8,
    pub frozen: Vec<String>,
    pub class_weights: Vec<f64>,
    pub image_pipeline: Option<ImagePipeline>,
    pub preprocessor: Option<FittedPreprocessor>,
    /// Training-set mean of the encoded clinical vectors.
    pub mean_clinical: Option<Vec<f64>>,
    pub neutral_image_id: Option<String>,
    pub history: Vec<StageHistory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: FusionModel<T>,
    pub class_weights: Vec<f64>,
    pub image_pipeline: Option<ImagePipeline>,
    pub preprocessor: Option<FittedPreprocessor>,
    pub mean_clinical: Option<Vec<f64>>,
    /// Subject id and preprocessed tensor of the stand-in image.
    pub neutral_image: Option<(String, Tensor<T>)>,
    pub history: Vec<StageHistory>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: FusionModel<T>) -> Self {
        Self {
            model,
            class_weights: Vec::new(),
            image_pipeline: None,
            preprocessor: None,
            mean_clinical: None,
            neutral_image: None,
            history: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.model.config.seed
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            dtype: T::DTYPE,
            config: self.model.config.clone(),
            stage_reached: self.model.stage_reached,
            frozen: self.model.params.iter().filter(|(_, p)| p.is_frozen()).map(|(n, _)| n.to_string()).collect(),
            class_weights: self.class_weights.clone(),
            image_pipeline: self.image_pipeline.clone(),
            preprocessor: self.preprocessor.clone(),
            mean_clinical: self.mean_clinical.clone(),
            neutral_image_id: self.neutral_image.as_ref().map(|(id, _)| id.clone()),
            history: self.history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta()).expect("metadata is plain data");
        let mut out = Vec::with_capacity(64 + meta.len() + self.model.params.num_values() * T::DTYPE.byte_width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.push(T::DTYPE.byte_width() as u8);
        let mut tensors: Vec<(&str, &Tensor<T>)> = self.model.params.iter().map(|(n, p)| (n, &p.value)).collect();
        if let Some((_, t)) = &self.neutral_image {
            tensors.push((NEUTRAL_IMAGE_TENSOR, t));
        }
        tensors.sort_by_key(|(n, _)| *n);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            t.data().iter().for_each(|x| x.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let meta = read_meta(&mut r)?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint stores {:?} values, loader expects {:?}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::DTYPE.byte_width() {
            return Err(Error::Format(format!("value width {width} does not match dtype {:?}", meta.dtype)));
        }
        let count = r.u32()?;
        let mut params = ParameterSet::new();
        let mut neutral = None;
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(shape, data)?;
            if name == NEUTRAL_IMAGE_TENSOR {
                neutral = Some(t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after tensors", bytes.len() - r.pos)));
        }

        let mut model = FusionModel::new(meta.config.clone())?;
        let expected: Vec<String> = model.params.names().map(str::to_string).collect();
        let found: Vec<String> = params.names().map(str::to_string).collect();
        if expected != found {
            return Err(Error::Format("stored tensors do not match the configured architecture".into()));
        }
        model.params.load_values(&params, |_| true)?;
        for name in &meta.frozen {
            model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("frozen entry `{name}` is not a parameter")))?
                .set_frozen(true);
        }
        model.stage_reached = meta.stage_reached;
        let neutral_image = match (meta.neutral_image_id, neutral) {
            (Some(id), Some(t)) => Some((id, t)),
            (None, None) => None,
            _ => return Err(Error::Format("neutral image id and tensor must appear together".into())),
        };
        Ok(Self {
            model,
            class_weights: meta.class_weights,
            image_pipeline: meta.image_pipeline,
            preprocessor: meta.preprocessor,
            mean_clinical: meta.mean_clinical,
            neutral_image,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Reads only the metadata block (e.g. to pick the precision before loading).
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_meta(&mut Reader { bytes: &bytes, pos: 0 })
}

fn read_meta(r: &mut Reader<'_>) -> Result<CheckpointMeta> {
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::config::{BackboneStyle, ModelKind};
    use crate::fusion::model::ImageInput;

    fn sample_checkpoint<T: Scalar>() -> Checkpoint<T> {
        let mut m = FusionModel::<T>::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Residual, 8, 3, 11)).unwrap();
        m.freeze_backbone(true);
        m.stage_reached = 1;
        let mut c = Checkpoint::new(m);
        c.class_weights = vec![1.1604, 0.8331, 1.0 / 3.0];
        c.image_pipeline = Some(ImagePipeline::with_size(8).unwrap());
        c.mean_clinical = Some(vec![0.1, 0.7, 1.0 / 7.0]);
        c.neutral_image = Some(("s-17".into(), Tensor::filled(vec![3, 8, 8], T::of(0.25))));
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample_checkpoint::<f32>();
        let bytes = c.to_bytes();
        let loaded = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, c);
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"DCFZ");
    }

    #[test]
    fn loaded_model_reproduces_outputs() {
        let c = sample_checkpoint::<f64>();
        let loaded = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        let img = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = c.model.predict_proba(Some(ImageInput::Pixels(&img)), Some(&[0.2, 0.1, 0.9])).unwrap();
        let b = loaded.model.predict_proba(Some(ImageInput::Pixels(&img)), Some(&[0.2, 0.1, 0.9])).unwrap();
        assert_eq!(a, b);
        assert!(loaded.model.params.get("backbone/stem/w").unwrap().is_frozen());
    }

    #[test]
    fn rejects_wrong_precision_and_corruption() {
        let bytes = sample_checkpoint::<f32>().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dcfz");
        let c = sample_checkpoint::<f32>();
        c.save(&p).unwrap();
        assert_eq!(read_checkpoint_meta(&p).unwrap().dtype, DType::F32);
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap(), c);
    }
}
