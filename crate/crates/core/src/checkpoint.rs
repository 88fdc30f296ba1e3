//! Checkpoint files: a length-prefixed JSON header followed by little-endian `f64` blocks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;
use crate::text::{EmbeddingTable, Vocabulary};
use crate::training::{Adam, TrainConfig};

const FORMAT: &str = "qgen-checkpoint";
const VERSION: u32 = 1;
const EMBEDDINGS: &str = "embeddings";

/// Everything needed to resume training or decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Tensor<T>)>,
    pub embeddings: Tensor<T>,
    pub optimizer: Option<Adam<T>>,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// In elements from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: TrainConfig,
    dims: ModelDims,
    vocab: Vec<String>,
    epoch: usize,
    step: u64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        model: &Model<T>,
        vocab: &Vocabulary,
        config: &TrainConfig,
        optimizer: Option<&Adam<T>>,
        epoch: usize,
        step: u64,
    ) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| (model.params.name(id).to_string(), model.params.value(id).clone()))
            .collect();
        Self {
            config: config.clone(),
            dims: model.dims,
            vocab: vocab.clone(),
            params,
            embeddings: model.embeddings.matrix().clone(),
            optimizer: optimizer.cloned(),
            epoch,
            step,
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the dimensions.
    pub fn to_model(&self) -> Result<Model<T>> {
        if self.vocab.len() != self.dims.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the model expects {}",
                self.vocab.len(),
                self.dims.vocab_size
            )));
        }
        let embeddings = EmbeddingTable::new(self.embeddings.clone())?;
        let mut model = Model::new(self.dims, embeddings, &mut Rng::new(0))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.params.load_values(self.params.clone())?;
        Ok(model)
    }

    fn blocks(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        out.push((EMBEDDINGS.to_string(), &self.embeddings));
        if let Some(opt) = &self.optimizer {
            for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    out.push((format!("adam.{kind}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(blocks.len());
        for (name, t) in &blocks {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            dims: self.dims,
            vocab: self.vocab.tokens().to_vec(),
            epoch: self.epoch,
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &blocks {
            for &x in t.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad("file too short".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let data = &bytes[data_start..];
        if !data.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values".into()));
        }
        let total = data.len() / 8;
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || entry.offset + n > total {
                return Err(bad(format!("tensor {} has an invalid offset", entry.name)));
            }
            expected_offset += n;
            let values: Vec<T> = data[8 * entry.offset..8 * (entry.offset + n)]
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), values)?));
        }
        if expected_offset != total {
            return Err(bad("trailing data after the last tensor".into()));
        }

        let mut iter = tensors.into_iter();
        let mut params = Vec::new();
        let embeddings = loop {
            match iter.next() {
                Some((name, t)) if name == EMBEDDINGS => break t,
                Some(p) => params.push(p),
                None => return Err(bad("missing embeddings block".into())),
            }
        };
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut take = |kind: &str| -> Result<Vec<Tensor<T>>> {
                    params
                        .iter()
                        .map(|(name, _)| match iter.next() {
                            Some((n, t)) if n == format!("adam.{kind}.{name}") => Ok(t),
                            _ => Err(bad(format!("missing adam.{kind}.{name}"))),
                        })
                        .collect()
                };
                let m = take("m")?;
                let v = take("v")?;
                Some(Adam {
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if iter.next().is_some() {
            return Err(bad("unexpected extra tensors".into()));
        }
        Ok(Self {
            config: header.config,
            dims: header.dims,
            vocab: Vocabulary::from_tokens(header.vocab)?,
            params,
            embeddings,
            optimizer,
            epoch: header.epoch,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let vocab = Vocabulary::build(&[vec!["a", "b", "c"]], 100, 1);
        let mut rng = Rng::new(3);
        let dims = ModelDims::uniform(vocab.len(), 4, 3, 2);
        let model = Model::new(dims, EmbeddingTable::random(vocab.len(), 4, &mut rng), &mut rng).unwrap();
        let opt = Adam::new(&model.params, 0.01);
        Checkpoint::capture(&model, &vocab, &TrainConfig::default(), Some(&opt), 2, 7)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap().params, ck.to_model().unwrap().params);
    }

    #[test]
    fn f32_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let narrow = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let b32 = narrow.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&b32).unwrap().to_bytes().unwrap(), b32);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..4]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
    }
}
