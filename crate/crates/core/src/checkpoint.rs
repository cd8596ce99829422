//! Binary checkpoints: magic, little-endian header length, JSON header,
//! then every parameter as little-endian `f64` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::io::{read_bytes, write_bytes};
use crate::model::{ForecastModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"TOPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

pub fn encode(model: &ForecastModel, features: &FeatureConfig, seed: u64, epoch: usize, step: usize) -> Result<Vec<u8>> {
    let named = model.named_params();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        model: model.config().clone(),
        features: features.clone(),
        seed,
        epoch,
        step,
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ForecastModel, CheckpointHeader)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", header.version)));
    }
    let mut data = bytes[16 + len..].chunks_exact(8);
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != expected || !data.remainder().is_empty() {
        return Err(bad("parameter payload does not match the header"));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n = p.shape.iter().product();
        let v: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        values.push((p.name.clone(), Tensor::new(p.shape.clone(), v)?));
    }
    let mut model = ForecastModel::new(header.model.clone(), header.seed)?;
    model.load_params(&values)?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &ForecastModel, features: &FeatureConfig, seed: u64, epoch: usize, step: usize) -> Result<()> {
    write_bytes(path, &encode(model, features, seed, epoch, step)?)
}

pub fn load(path: &Path) -> Result<(ForecastModel, CheckpointHeader)> {
    decode(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_model_config;

    #[test]
    fn bit_exact_round_trip() {
        let mut model = ForecastModel::new(toy_model_config(6, 2), 5).unwrap();
        model.embed_w.data_mut()[0] = 1.0 / 3.0;
        model.embed_w.data_mut()[1] = -f64::MIN_POSITIVE;
        let features = FeatureConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &features, 5, 3, 120).unwrap();
        let (back, header) = load(&path).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(back.named_params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!((header.epoch, header.step, header.seed), (3, 120, 5));
        assert_eq!(&header.model, model.config());
        let again = encode(&back, &features, 5, 3, 120).unwrap();
        assert_eq!(again, read_bytes(&path).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let model = ForecastModel::new(toy_model_config(6, 2), 5).unwrap();
        let bytes = encode(&model, &FeatureConfig::default(), 5, 0, 0).unwrap();
        let p = Path::new("x");
        assert!(matches!(decode(&bytes[..bytes.len() - 8], p), Err(Error::Format { .. })));
        assert!(matches!(decode(b"NOTACKPTxxxxxxxx", p), Err(Error::Format { .. })));
    }
}
