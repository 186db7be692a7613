use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_FORMAT: &str = "ddrs-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Writes a self-describing JSON checkpoint: config plus every tensor in
/// row-major order. Values are widened to `f64`, so reloading is exact.
pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    if !params.matches(cfg) {
        return Err(Error::ConfigMismatch("parameters do not match config".into()));
    }
    let tensors = cfg
        .tensor_shapes()
        .into_iter()
        .zip(params.slices())
        .map(|((name, shape), data)| TensorRecord {
            name,
            shape,
            data: data.iter().map(|x| x.as_f64()).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: *cfg,
        tensors,
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::CorruptCheckpoint(format!("serialize: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(ModelParams<F>, ModelConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    let cfg = file.config;
    cfg.validate()
        .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
    let expected = cfg.tensor_shapes();
    if expected.len() != file.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "config implies {} tensors, file has {}",
            expected.len(),
            file.tensors.len()
        )));
    }
    let mut params = ModelParams::<F>::zeros(&cfg);
    for ((name, shape), (record, dst)) in expected
        .iter()
        .zip(file.tensors.iter().zip(params.slices_mut()))
    {
        if &record.name != name || &record.shape != shape {
            return Err(Error::ConfigMismatch(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                record.name, record.shape, name, shape
            )));
        }
        if record.data.len() != dst.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} holds {} values, shape needs {}",
                record.data.len(),
                dst.len()
            )));
        }
        for (d, &x) in dst.iter_mut().zip(&record.data) {
            if !x.is_finite() {
                return Err(Error::CorruptCheckpoint(format!("non-finite value in {name}")));
            }
            *d = F::lit(x);
        }
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            d_ffn: 6,
            n_blocks: 2,
            src_vocab: 5,
            tgt_vocab: 4,
            max_src_len: 3,
            upsample: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        for seed in [1, 2] {
            let p = ModelParams::<f64>::init(&cfg(), seed);
            save_checkpoint(&p, &cfg(), &path).unwrap();
            let (q, c) = load_checkpoint::<f64>(&path).unwrap();
            assert_eq!(c, cfg());
            assert_eq!(p, q);
        }
        let p32 = ModelParams::<f32>::init(&cfg(), 9);
        save_checkpoint(&p32, &cfg(), &path).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap().0, p32);
    }

    #[test]
    fn tampered_shape_is_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ModelParams::<f64>::init(&cfg(), 1), &cfg(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"shape\":[5,4]", "\"shape\":[4,5]", 1);
        assert_ne!(text, tampered);
        fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::CorruptCheckpoint(_))));
        let p = ModelParams::<f64>::init(&cfg(), 1);
        save_checkpoint(&p, &cfg(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::CorruptCheckpoint(_))));
    }
}
