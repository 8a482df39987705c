//! Slice encoder -> volume aggregator -> linear head.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{normalize_schedule, Aggregator, AggregatorMode};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Graph, RngStream, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::slice_encoder::{EncoderConfig, SliceEncoder};
use crate::transformer::{Block, Ctx, Linear};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aggregator_mode: AggregatorMode,
    pub agg_blocks: usize,
    pub agg_heads: usize,
    pub num_classes: usize,
    /// Training lengths; VLFAT only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<usize>>,
    /// Training length for every other mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_train_length: Option<usize>,
    /// Moment-match and clip resampled PE rows to the bank statistics.
    #[serde(default)]
    pub pe_renorm: bool,
}

impl ModelConfig {
    pub fn toy(mode: AggregatorMode) -> Self {
        let (schedule, fixed) = if mode == AggregatorMode::Vlfat {
            (Some(vec![4, 6, 8, 12]), None)
        } else {
            (None, Some(8))
        };
        Self {
            encoder: EncoderConfig::toy(),
            aggregator_mode: mode,
            agg_blocks: 2,
            agg_heads: 4,
            num_classes: 4,
            schedule,
            fixed_train_length: fixed,
            pe_renorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let vl = self.aggregator_mode == AggregatorMode::Vlfat;
        match (&self.schedule, self.fixed_train_length) {
            (Some(s), None) if vl => {
                normalize_schedule(s)?;
            }
            (None, Some(n)) if !vl => {
                if n == 0 {
                    return Err(Error::Config("fixed_train_length must be positive".into()));
                }
            }
            _ if vl => {
                return Err(Error::Config(
                    "VLFAT needs a schedule and no fixed_train_length".into(),
                ))
            }
            _ => {
                return Err(Error::Config(format!(
                    "{} needs fixed_train_length and no schedule",
                    self.aggregator_mode
                )))
            }
        }
        if self.aggregator_mode.is_transformer() {
            let d = self.encoder.embed_dim;
            if self.agg_heads == 0 || d % self.agg_heads != 0 {
                return Err(Error::Config(format!(
                    "embed_dim {d} must be a multiple of agg_heads {}",
                    self.agg_heads
                )));
            }
        }
        if self.aggregator_mode == AggregatorMode::SinPe && self.encoder.embed_dim % 2 != 0 {
            return Err(Error::Config("sinPE needs an even embed_dim".into()));
        }
        if self.aggregator_mode.has_pe_bank() && self.pe_base_length().unwrap_or(0) < 2 {
            return Err(Error::Config("PE bank base length must be at least 2".into()));
        }
        Ok(())
    }

    /// Lengths drawn during training (a single value outside VLFAT).
    pub fn train_lengths(&self) -> Vec<usize> {
        match (&self.schedule, self.fixed_train_length) {
            (Some(s), _) => normalize_schedule(s).unwrap_or_default(),
            (None, Some(n)) => vec![n],
            (None, None) => Vec::new(),
        }
    }

    /// Canonical PE bank length: the largest training length.
    pub fn pe_base_length(&self) -> Option<usize> {
        self.train_lengths().into_iter().max()
    }

    /// Closed-form parameter count:
    /// encoder + aggregator + `d·K + K` (head), where the transformer
    /// aggregator holds `d` (cls) `+ (n_base+1)·d` (bank, learned mode only)
    /// `+ L_a·block(d) + 2d`, Conv1D holds `3d·d + d`, pooling holds nothing.
    pub fn num_params(&self) -> usize {
        let d = self.encoder.embed_dim;
        let agg = match self.aggregator_mode {
            AggregatorMode::AvgPool | AggregatorMode::MaxPool => 0,
            AggregatorMode::Conv1d => Linear::num_params(3 * d, d),
            m => {
                let bank = if m.has_pe_bank() {
                    (self.pe_base_length().unwrap_or(0) + 1) * d
                } else {
                    0
                };
                d + bank + self.agg_blocks * Block::num_params(d, 4.0) + 2 * d
            }
        };
        self.encoder.num_params() + agg + Linear::num_params(d, self.num_classes)
    }
}

/// Class scores for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn probabilities(&self) -> Vec<f64> {
        let t = Tensor::new(&[self.0.len()], self.0.clone()).expect("non-empty logits");
        softmax(&t, 0).expect("rank 1").into_data()
    }
}

/// Argmax with ties to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: SliceEncoder,
    aggregator: Aggregator,
    head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::labeled(seed, "model-init");
        let mut store = ParamStore::new();
        let d = config.encoder.embed_dim;
        let encoder = SliceEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let aggregator = Aggregator::new(
            config.aggregator_mode,
            &mut store,
            d,
            config.agg_blocks,
            config.agg_heads,
            config.pe_base_length(),
            config.pe_renorm,
            config.encoder.dropout,
            &mut rng,
        )?;
        let head = Linear::new(&mut store, "head", d, config.num_classes, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            aggregator,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &SliceEncoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Batched forward: every volume is (n, H, W) with a shared `n`.
    /// Returns logits (B, K).
    pub fn forward(&self, g: &mut Graph, p: &Bound, volumes: &[&Tensor], ctx: &mut Ctx) -> Result<Var> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] == 0 {
            return Err(Error::InvalidInput(format!(
                "volume must be (n >= 1, H, W), got {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(first.numel() * volumes.len());
        for v in volumes {
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("forward batch", &shape, v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let b = volumes.len();
        let n = shape[0];
        let stacked = Tensor::new(&[b * n, shape[1], shape[2]], data)?;
        let embs = self.encoder.forward(g, p, &stacked, ctx)?;
        let embs = g.reshape(embs, &[b, n, self.config.encoder.embed_dim])?;
        let vol = self.aggregator.forward(g, p, embs, ctx)?;
        self.head.forward(g, p, vol)
    }

    /// Logits for one (n, H, W) volume.
    pub fn forward_volume(&self, slices: &Tensor, train: bool, rng: &mut RngStream) -> Result<Logits> {
        let mut out = self.forward_batch(&[slices], train, rng)?;
        Ok(out.remove(0))
    }

    pub fn forward_batch(&self, volumes: &[&Tensor], train: bool, rng: &mut RngStream) -> Result<Vec<Logits>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let mut ctx = Ctx {
            train,
            rng,
            attention: None,
        };
        let logits = self.forward(&mut g, &p, volumes, &mut ctx)?;
        let k = self.config.num_classes;
        Ok(g.data(logits).chunks(k).map(|c| Logits(c.to_vec())).collect())
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut entries = Vec::with_capacity(self.store.len());
        let mut offset = 0u64;
        for p in self.store.iter() {
            let len = p.tensor.numel() as u64;
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
                len,
            });
            offset += len * 8;
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            pe_base_length: if self.config.aggregator_mode.has_pe_bank() {
                self.config.pe_base_length()
            } else {
                None
            },
            blob_bytes: offset,
            params: entries,
            meta: meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        let mut buf = Vec::with_capacity(8 + json.len() + offset as usize);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in self.store.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |expected: u64| Error::CorruptFile {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 8 {
            return Err(corrupt(8));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if (bytes.len() as u64) < 8 + hlen {
            return Err(corrupt(8 + hlen));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[8..8 + hlen as usize]).map_err(|e| Error::Json {
                context: format!("checkpoint header in {}", path.display()),
                source: e,
            })?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        let expected = 8 + hlen + header.blob_bytes;
        if bytes.len() as u64 != expected {
            return Err(corrupt(expected));
        }
        let mut model = Model::new(header.config.clone(), 0)?;
        for (p, e) in model.store.iter().zip(&header.params) {
            if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        if header.params.len() != model.store.len() {
            return Err(Error::Config("checkpoint parameter list length differs".into()));
        }
        let blob = &bytes[8 + hlen as usize..];
        let flat: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.store.load_flat(&flat)?;
        Ok((model, header.meta))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_bacc: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the parameter blob.
    pub offset: u64,
    /// Number of `f64` values.
    pub len: u64,
}

/// JSON header of a checkpoint file. On disk: u64 LE header length, the
/// header bytes, then the parameter blob of `f64` LE values in `params`
/// order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub pe_base_length: Option<usize>,
    pub blob_bytes: u64,
    pub params: Vec<ParamEntry>,
    pub meta: CheckpointMeta,
}
