//! Single-file model checkpoints: every reconstructor tensor under its
//! hierarchical name plus the metadata needed to rebuild the model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::{EncoderBackend, EncoderSpec, PreprocessSpec};
use crate::error::{Error, Result};
use crate::framed::{read_framed, write_framed};
use crate::model::{DinomalyModel, Reconstructor, ReconstructorConfig};
use crate::tensor::Module;

pub const CHECKPOINT_KIND: &str = "dinomaly_checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub format_version: u32,
    pub reconstructor: ReconstructorConfig,
    pub encoder: EncoderSpec,
    pub encoder_checksum: u64,
    pub collected_layers: Vec<usize>,
    pub preprocess: PreprocessSpec,
    pub seed: u64,
    pub iterations: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Named copies of every reconstructor tensor.
pub fn named_tensors<M: Module<f32> + ?Sized>(module: &M) -> BTreeMap<String, ArrayD<f32>> {
    let mut out = BTreeMap::new();
    module.visit_values("", &mut |name, v| {
        out.insert(name.to_string(), v.to_owned());
    });
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &DinomalyModel,
    preprocess: &PreprocessSpec,
    seed: u64,
    iterations: usize,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    model.reconstructor.visit_values("", &mut |name, v| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(v.iter().copied());
    });
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.to_string(),
        format_version: FORMAT_VERSION,
        reconstructor: model.reconstructor.config.clone(),
        encoder: model.encoder.spec(),
        encoder_checksum: model.encoder.checksum(),
        collected_layers: model.collected_layers.clone(),
        preprocess: *preprocess,
        seed,
        iterations,
        tensors,
    };
    write_framed(path, &meta, &payload)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_framed::<CheckpointMeta>(path)?.0)
}

/// Rebuilds the model (in eval mode) and restores every tensor by name.
pub fn load_checkpoint(path: &Path) -> Result<(DinomalyModel, CheckpointMeta)> {
    let (meta, payload) = read_framed::<CheckpointMeta>(path)?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::data_at(path, format!("not a checkpoint (kind '{}')", meta.kind)));
    }
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::data_at(
            path,
            format!("unsupported checkpoint version {}", meta.format_version),
        ));
    }
    let encoder = EncoderBackend::from_spec(&meta.encoder)?;
    if encoder.checksum() != meta.encoder_checksum {
        return Err(Error::data_at(path, "encoder weights differ from the ones used in training"));
    }
    let mut reconstructor = Reconstructor::<f32>::new(meta.reconstructor.clone(), meta.seed)?;
    let entries: BTreeMap<&str, &TensorEntry> = meta.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problems = Vec::new();
    let mut restored = 0usize;
    reconstructor.visit_params("", &mut |name, slot| {
        let Some(entry) = entries.get(name) else {
            problems.push(format!("missing tensor '{name}'"));
            return;
        };
        let mut value = slot.value;
        let len: usize = entry.shape.iter().product();
        if entry.shape != value.shape() {
            problems.push(format!("tensor '{name}' has shape {:?}, model expects {:?}", entry.shape, value.shape()));
        } else if entry.offset + len > payload.len() {
            problems.push(format!("tensor '{name}' runs past the end of the payload"));
        } else {
            for (dst, &src) in value.iter_mut().zip(&payload[entry.offset..entry.offset + len]) {
                *dst = src;
            }
            restored += 1;
        }
    });
    if restored != entries.len() && problems.is_empty() {
        problems.push(format!("{} stored tensors but the model has {restored}", entries.len()));
    }
    if !problems.is_empty() {
        return Err(Error::data_at(path, problems.join("; ")));
    }
    let model = DinomalyModel::from_parts(encoder, Some(meta.collected_layers.clone()), reconstructor)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyVitConfig;
    use crate::tensor::param_checksum;

    fn tiny_model(seed: u64) -> DinomalyModel {
        let enc = EncoderBackend::from_spec(&EncoderSpec::ToyVit(ToyVitConfig {
            depth: 10,
            dim: 16,
            patch: 4,
            image_size: 16,
            seed: 3,
        }))
        .unwrap();
        DinomalyModel::new(enc, None, ReconstructorConfig::for_dim(16), seed).unwrap()
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model(5);
        // move away from the seeded init so loading cannot pass by re-seeding
        model.reconstructor.visit_params("", &mut |_, slot| {
            let mut v = slot.value;
            v.mapv_inplace(|x| x * 1.5 + 0.01);
        });
        save_checkpoint(&path, &model, &PreprocessSpec::square(16), 5, 42).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.iterations, 42);
        assert_eq!(back.collected_layers, model.collected_layers);
        assert_eq!(named_tensors(&back.reconstructor), named_tensors(&model.reconstructor));
        assert_eq!(param_checksum(&back.reconstructor), param_checksum(&model.reconstructor));
        assert!(meta.tensors.iter().any(|t| t.name == "decoder.layer3.attn.w_q"));
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(1);
        save_checkpoint(&path, &model, &PreprocessSpec::square(16), 1, 0).unwrap();
        let (mut meta, payload) = read_framed::<CheckpointMeta>(&path).unwrap();
        meta.tensors.retain(|t| t.name != "decoder.layer0.attn.w_q");
        write_framed(&path, &meta, &payload).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("decoder.layer0.attn.w_q"), "{err}");
    }
}
