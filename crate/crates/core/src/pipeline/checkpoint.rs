//! `DGPC` checkpoint files.
//!
//! Layout after the magic and `u32` version: config text, its SHA-256, step, seed,
//! dtype tag, the dictionary snapshot, the optional key file, the parameter table
//! (name, rank, dims, raw little-endian values), the optional optimizer moments and
//! the metrics history as JSON strings.

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::dictionary::{decode_snapshot, encode_snapshot, Dictionary};
use crate::encoders::KeyFile;
use crate::numerics::{AdamState, DType, Real, Tensor};

use super::{Lexicon, MetricRecord, Model, ModelConfig, PipelineError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub seed: u64,
    pub dictionary: Dictionary,
    pub keys: Option<KeyFile>,
    pub params: Vec<(String, Tensor<F>)>,
    pub adam: Option<AdamState<F>>,
    pub metrics: Vec<MetricRecord>,
}

fn write_values<F: Real>(w: &mut ByteWriter, t: &Tensor<F>) {
    let mut buf = Vec::with_capacity(t.len() * F::DTYPE.width());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.bytes(&buf);
}

fn read_values<F: Real>(r: &mut ByteReader<'_>, dtype: DType, shape: Vec<usize>) -> Result<Tensor<F>, PipelineError> {
    let n: usize = shape.iter().product();
    let bytes = r.take(n.checked_mul(dtype.width()).ok_or(PipelineError::Corrupt("tensor too large".into()))?)?;
    let data = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| F::from_f64_lossy(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| F::from_f64_lossy(f64::read_le(b))).collect(),
    };
    Ok(Tensor::new(shape, data)?)
}

impl<F: Real> Checkpoint<F> {
    /// Snapshot of `model` at `step`.
    pub fn capture(model: &Model<F>, step: u64, adam: Option<&AdamState<F>>, metrics: &[MetricRecord]) -> Self {
        Self {
            config: model.config.clone(),
            config_hash: model.config.hash(),
            step,
            seed: model.config.seed,
            dictionary: model.lexicon.dictionary.clone(),
            keys: model.lexicon.keys.to_key_file(&model.lexicon.dictionary),
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.cloned(),
            metrics: metrics.to_vec(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, PipelineError> {
        let mut w = ByteWriter::with_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.config.to_string());
        w.bytes(&self.config_hash);
        w.u64(self.step);
        w.u64(self.seed);
        w.u8(F::DTYPE.tag());
        let dict = encode_snapshot(&self.dictionary);
        w.u64(dict.len() as u64);
        w.bytes(&dict);
        match &self.keys {
            Some(k) => {
                let bytes = k.encode()?;
                w.u8(1);
                w.u64(bytes.len() as u64);
                w.bytes(&bytes);
            }
            None => w.u8(0),
        }
        w.u64(self.params.len() as u64);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            write_values(&mut w, t);
        }
        match &self.adam {
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for (m, v) in a.first.iter().zip(&a.second) {
                    write_values(&mut w, m);
                    write_values(&mut w, v);
                }
            }
            None => w.u8(0),
        }
        w.u64(self.metrics.len() as u64);
        for m in &self.metrics {
            w.str(&serde_json::to_string(m).expect("metric records serialize"));
        }
        Ok(w.into_bytes())
    }

    /// Values stored in the other precision are converted. A config whose text no
    /// longer hashes to the stored digest only logs a warning.
    pub fn decode(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut r = ByteReader::with_header(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config: ModelConfig = r.str()?.parse()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if config.hash() != config_hash {
            log::warn!("checkpoint config hash does not match its config text");
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| PipelineError::Corrupt(format!("unknown dtype tag {tag}")))?;
        if dtype != F::DTYPE {
            log::warn!("checkpoint stores {dtype}, converting to {}", F::DTYPE);
        }
        let n = r.count(1)?;
        let dictionary = decode_snapshot(r.take(n)?)?;
        let keys = match r.u8()? {
            0 => None,
            1 => {
                let n = r.count(1)?;
                Some(KeyFile::decode(r.take(n)?)?)
            }
            other => return Err(PipelineError::Corrupt(format!("bad key flag {other}"))),
        };
        let count = r.count(8)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(PipelineError::Corrupt(format!("rank {rank} for `{name}`")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let t = read_values(&mut r, dtype, shape)?;
            params.push((name, t));
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut first = Vec::with_capacity(params.len());
                let mut second = Vec::with_capacity(params.len());
                for (_, p) in &params {
                    first.push(read_values(&mut r, dtype, p.shape().to_vec())?);
                    second.push(read_values(&mut r, dtype, p.shape().to_vec())?);
                }
                Some(AdamState { step, first, second })
            }
            other => return Err(PipelineError::Corrupt(format!("bad optimizer flag {other}"))),
        };
        let n = r.count(4)?;
        let mut metrics = Vec::with_capacity(n);
        for _ in 0..n {
            let text = r.str()?;
            metrics.push(serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt(format!("metric record: {e}")))?);
        }
        r.finish()?;
        for (_, t) in params.iter_mut() {
            t.requires_grad = true;
        }
        Ok(Self {
            config,
            config_hash,
            step,
            seed,
            dictionary,
            keys,
            params,
            adam,
            metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model<F>, PipelineError> {
        let lexicon = Lexicon::new(
            self.dictionary.clone(),
            self.config.key_mode,
            self.keys.as_ref(),
            self.config.encoder.d_model,
        )?;
        let mut model = Model::new(self.config.clone(), lexicon)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    /// Copies the parameters into an existing model. Shapes must agree; a differing
    /// config only logs a warning.
    pub fn restore_into(&self, model: &mut Model<F>) -> Result<(), PipelineError> {
        if model.config.hash() != self.config_hash {
            log::warn!("restoring a checkpoint taken under a different config");
        }
        model.load_params(self.params.clone())
    }
}
