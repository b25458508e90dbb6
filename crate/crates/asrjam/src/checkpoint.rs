//! Self-describing checkpoint archives: a versioned header, a JSON
//! descriptor (model kind, architecture, alphabet, training metadata,
//! tensor layout), then raw little-endian f64 tensor data.

use crate::asr::{AsrArch, AsrModel, TrainMeta};
use crate::error::{Error, Result};
use crate::predictor::{PredictorArch, PredictorModel};
use crate::tensor::{Arr, ParamStore};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AJCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    alphabet: String,
    meta: TrainMeta,
    arch: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// A loaded checkpoint, ready to be turned back into a model.
pub enum ModelCheckpoint {
    Asr(AsrModel),
    Predictor(PredictorModel),
}

impl ModelCheckpoint {
    pub fn into_asr(self) -> Result<AsrModel> {
        match self {
            ModelCheckpoint::Asr(m) => Ok(m),
            ModelCheckpoint::Predictor(_) => {
                Err(Error::Checkpoint("expected a recognizer checkpoint".into()))
            }
        }
    }

    pub fn into_predictor(self) -> Result<PredictorModel> {
        match self {
            ModelCheckpoint::Predictor(m) => Ok(m),
            ModelCheckpoint::Asr(_) => {
                Err(Error::Checkpoint("expected a predictor checkpoint".into()))
            }
        }
    }
}

fn write_archive(
    path: &Path,
    kind: &str,
    arch: serde_json::Value,
    meta: &TrainMeta,
    store: &ParamStore,
) -> Result<()> {
    let descriptor = Descriptor {
        kind: kind.to_string(),
        alphabet: crate::alphabet::CHARS.iter().collect(),
        meta: meta.clone(),
        arch,
        tensors: store
            .names
            .iter()
            .zip(&store.tensors)
            .zip(&store.trainable)
            .map(|((name, tensor), &trainable)| TensorInfo {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                trainable,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&descriptor)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for tensor in &store.tensors {
        for v in tensor.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_archive(path: &Path) -> Result<(Descriptor, ParamStore)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    f.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let descriptor: Descriptor = serde_json::from_slice(&header)?;
    let mut store = ParamStore::new();
    for info in &descriptor.tensors {
        let count: usize = info.shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Arr::from_shape_vec(IxDyn(&info.shape), values)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
        if info.trainable {
            store.add(info.name.clone(), tensor);
        } else {
            store.add_state(info.name.clone(), tensor);
        }
    }
    Ok((descriptor, store))
}

pub fn save_asr(path: &Path, model: &AsrModel) -> Result<()> {
    write_archive(
        path,
        "asr",
        serde_json::to_value(&model.arch)?,
        &model.meta,
        &model.store,
    )
}

pub fn save_predictor(path: &Path, model: &PredictorModel) -> Result<()> {
    write_archive(
        path,
        "predictor",
        serde_json::to_value(&model.arch)?,
        &model.meta,
        &model.store,
    )
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    let (descriptor, store) = read_archive(path)?;
    match descriptor.kind.as_str() {
        "asr" => {
            let arch: AsrArch = serde_json::from_value(descriptor.arch)?;
            Ok(ModelCheckpoint::Asr(AsrModel::from_parts(
                arch,
                store,
                descriptor.meta,
            )))
        }
        "predictor" => {
            let arch: PredictorArch = serde_json::from_value(descriptor.arch)?;
            Ok(ModelCheckpoint::Predictor(PredictorModel::from_parts(
                arch,
                store,
                descriptor.meta,
            )))
        }
        other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    }
}

/// Portable export for inference-only reimplementations: a JSON descriptor
/// with tensor names, shapes, and byte offsets, plus one flat binary blob.
pub fn export_predictor(dir: &Path, model: &PredictorModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct ExportTensor<'a> {
        name: &'a str,
        shape: &'a [usize],
        offset_bytes: usize,
        len: usize,
    }
    #[derive(Serialize)]
    struct Export<'a> {
        format: &'a str,
        dtype: &'a str,
        byte_order: &'a str,
        arch: &'a PredictorArch,
        alphabet: String,
        tensors: Vec<ExportTensor<'a>>,
    }
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in model.store.names.iter().zip(&model.store.tensors) {
        tensors.push(ExportTensor {
            name,
            shape: tensor.shape(),
            offset_bytes: offset,
            len: tensor.len(),
        });
        offset += tensor.len() * 8;
    }
    let export = Export {
        format: "asrjam-tensor-archive",
        dtype: "f64",
        byte_order: "little",
        arch: &model.arch,
        alphabet: crate::alphabet::CHARS.iter().collect(),
        tensors,
    };
    std::fs::write(
        dir.join("descriptor.json"),
        serde_json::to_vec_pretty(&export)?,
    )?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join("tensors.bin"))?);
    for tensor in &model.store.tensors {
        for v in tensor.iter() {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::AsrArch;

    #[test]
    fn asr_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asr.ajck");
        let model = AsrModel::new(AsrArch::tiny(), 5);
        save_asr(&path, &model).unwrap();
        let loaded = load(&path).unwrap().into_asr().unwrap();
        assert_eq!(loaded.store.digest(), model.store.digest());
        assert_eq!(loaded.arch, model.arch);
    }

    #[test]
    fn predictor_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.ajck");
        let model = PredictorModel::new(PredictorArch::tiny(), 6);
        save_predictor(&path, &model).unwrap();
        let loaded = load(&path).unwrap().into_predictor().unwrap();
        assert_eq!(loaded.store.digest(), model.store.digest());
        assert_eq!(loaded.arch, model.arch);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asr.ajck");
        save_asr(&path, &AsrModel::new(AsrArch::tiny(), 5)).unwrap();
        assert!(load(&path).unwrap().into_predictor().is_err());
    }

    #[test]
    fn garbage_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ajck");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        match load(&path) {
            Err(Error::Checkpoint(_)) => {}
            other => panic!("expected checkpoint error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn export_layout_is_self_describing() {
        let dir = tempfile::tempdir().unwrap();
        let model = PredictorModel::new(PredictorArch::tiny(), 6);
        export_predictor(dir.path(), &model).unwrap();
        let descriptor: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("descriptor.json")).unwrap())
                .unwrap();
        let tensors = descriptor["tensors"].as_array().unwrap();
        assert_eq!(tensors.len(), model.store.len());
        let total: usize = model.store.tensors.iter().map(|t| t.len() * 8).sum();
        let blob = std::fs::metadata(dir.path().join("tensors.bin")).unwrap();
        assert_eq!(blob.len() as usize, total);
    }
}
