//! Volume feature aggregators.
//!
//! The transformer variants prepend a learnable volume classification
//! token and differ only in the positional signal they add:
//!
//! * `FAT` / `VLFAT`: a learnable PE bank of `n_base + 1` rows, resampled to
//!   the current slice count by align-corners interpolation of the slice
//!   rows (row 0 belongs to the classification token and is never
//!   resampled). VLFAT additionally trains at a randomly drawn length each
//!   step; the two share this module.
//! * `sinPE`: fixed sinusoids.
//! * `noPE`: nothing, so the output is invariant to slice order.
//!
//! Pooling and the 1-D convolution head are order-agnostic or locally
//! order-aware baselines with no classification token.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{scaled_uniform_init, truncated_normal_init, Graph, RngStream, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::slice_encoder::{EMBED_INIT_BOUND, EMBED_INIT_STD};
use crate::transformer::{Block, Ctx, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregatorMode {
    #[serde(rename = "FAT")]
    Fat,
    #[serde(rename = "VLFAT")]
    Vlfat,
    #[serde(rename = "noPE")]
    NoPe,
    #[serde(rename = "sinPE")]
    SinPe,
    AvgPool,
    MaxPool,
    #[serde(rename = "Conv1D")]
    Conv1d,
}

impl AggregatorMode {
    pub const ALL: [AggregatorMode; 7] = [
        Self::Fat,
        Self::Vlfat,
        Self::NoPe,
        Self::SinPe,
        Self::AvgPool,
        Self::MaxPool,
        Self::Conv1d,
    ];

    pub fn pe_mode(self) -> Option<PeMode> {
        match self {
            Self::Fat | Self::Vlfat => Some(PeMode::Learned),
            Self::SinPe => Some(PeMode::Sinusoidal),
            Self::NoPe => Some(PeMode::None),
            _ => None,
        }
    }

    pub fn has_pe_bank(self) -> bool {
        self.pe_mode() == Some(PeMode::Learned)
    }

    pub fn is_transformer(self) -> bool {
        self.pe_mode().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fat => "FAT",
            Self::Vlfat => "VLFAT",
            Self::NoPe => "noPE",
            Self::SinPe => "sinPE",
            Self::AvgPool => "AvgPool",
            Self::MaxPool => "MaxPool",
            Self::Conv1d => "Conv1D",
        }
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    Learned,
    Sinusoidal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Learnable positional table of shape (n_base + 1, d).
#[derive(Clone, Debug)]
pub struct PeBank {
    pub table: ParamId,
    pub n_base: usize,
}

/// Resamples a bank (n_base + 1, d) to (n_dst + 1, d). Row 0 passes through
/// untouched; rows 1..=n_base are linearly interpolated with aligned
/// endpoints.
pub fn interpolate_pe(g: &mut Graph, bank: Var, n_dst: usize) -> Result<Var> {
    let shape = g.shape(bank).to_vec();
    if shape.len() != 2 || shape[0] < 3 {
        return Err(Error::InvalidInput(format!(
            "PE bank needs at least 2 slice rows, got shape {shape:?}"
        )));
    }
    if n_dst < 1 {
        return Err(Error::InvalidInput("cannot resample PEs to 0 slices".into()));
    }
    let n_base = shape[0] - 1;
    if n_dst == n_base {
        return Ok(bank);
    }
    let cls = g.narrow(bank, 0, 0, 1)?;
    let rows = g.narrow(bank, 0, 1, n_base)?;
    let rows = g.interp_rows(rows, n_dst)?;
    g.concat(&[cls, rows], 0)
}

/// Eager form of [`interpolate_pe`] on a bank tensor.
pub fn interpolate_pe_tensor(bank: &Tensor, n_dst: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = g.leaf(bank);
    let out = interpolate_pe(&mut g, b, n_dst)?;
    Ok(g.value(out))
}

/// Moment-matches resampled slice rows to the bank's slice-row statistics
/// and clips to +-2 std. Only used when `pe_renorm` is enabled.
fn renormalize_pe(g: &mut Graph, bank: Var, resampled: Var) -> Result<Var> {
    let n_base = g.shape(bank)[0] - 1;
    let d = g.shape(bank)[1];
    let rows = &g.data(bank)[d..];
    let (mut mean_acc, mut std_acc) = (0.0, 0.0);
    for r in rows.chunks(d) {
        let m = r.iter().sum::<f64>() / d as f64;
        let v = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        mean_acc += m;
        std_acc += v.sqrt();
    }
    let (mean, std) = (mean_acc / n_base as f64, std_acc / n_base as f64);
    let n = g.shape(resampled)[0] - 1;
    let cls = g.narrow(resampled, 0, 0, 1)?;
    let slice_rows = g.narrow(resampled, 0, 1, n)?;
    let gain = g.constant(&[d], vec![std; d])?;
    let bias = g.constant(&[d], vec![mean; d])?;
    let normed = g.layer_norm(slice_rows, gain, bias, 1e-12)?;
    let clipped = clip(g, normed, mean - 2.0 * std, mean + 2.0 * std)?;
    g.concat(&[cls, clipped], 0)
}

// min(max(x, lo), hi) = lo + relu(x - lo) - relu(x - hi), built from
// differentiable pieces via max over a stacked zero.
fn clip(g: &mut Graph, x: Var, lo: f64, hi: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = g.data(x).len();
    let relu = |g: &mut Graph, v: Var| -> Result<Var> {
        let z = g.constant(&shape, vec![0.0; n])?;
        let zs = g.reshape(z, &[1, n])?;
        let vs = g.reshape(v, &[1, n])?;
        let both = g.concat(&[zs, vs], 0)?;
        let m = g.max_axis(both, 0)?;
        g.reshape(m, &shape)
    };
    let lo_c = g.constant(&shape, vec![lo; n])?;
    let hi_c = g.constant(&shape, vec![hi; n])?;
    let a = g.sub(x, lo_c)?;
    let a = relu(g, a)?;
    let b = g.sub(x, hi_c)?;
    let b = relu(g, b)?;
    let d = g.sub(a, b)?;
    g.add(d, lo_c)
}

/// Sinusoidal table (n + 1, d); row j encodes position j, row 0 serves the
/// classification token.
pub fn sinusoidal_pe(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal PE needs an even width, got {d}")));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    for j in 0..=n {
        for i in 0..d / 2 {
            let angle = j as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(&[n + 1, d], data)
}

/// Uniform draw from the training-length schedule.
pub fn sample_length(schedule: &[usize], rng: &mut RngStream) -> Result<usize> {
    if schedule.is_empty() {
        return Err(Error::Config("length schedule is empty".into()));
    }
    Ok(schedule[rng.below(schedule.len())])
}

/// Sorted, de-duplicated schedule; rejects empty sets and zero lengths.
pub fn normalize_schedule(schedule: &[usize]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = schedule.iter().copied().collect();
    if set.is_empty() || set.contains(&0) {
        return Err(Error::Config(format!(
            "schedule must be a non-empty set of positive lengths, got {schedule:?}"
        )));
    }
    Ok(set.into_iter().collect())
}

#[derive(Clone, Debug)]
pub struct FeatureAggregatorTransformer {
    pe_mode: PeMode,
    vol_cls: ParamId,
    bank: Option<PeBank>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pe_renorm: bool,
}

impl FeatureAggregatorTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        blocks: usize,
        heads: usize,
        pe_mode: PeMode,
        n_base: Option<usize>,
        pe_renorm: bool,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let tn = |shape: &[usize], rng: &mut RngStream| {
            truncated_normal_init(shape, 0.0, EMBED_INIT_STD, -EMBED_INIT_BOUND, EMBED_INIT_BOUND, rng)
        };
        let vol_cls = store.add("aggregator.vol_cls", tn(&[1, d], rng)?, false);
        let bank = match pe_mode {
            PeMode::Learned => {
                let n_base = n_base.ok_or_else(|| {
                    Error::Config("learned positional embeddings need a base length".into())
                })?;
                if n_base < 2 {
                    return Err(Error::Config(format!(
                        "PE bank base length must be at least 2, got {n_base}"
                    )));
                }
                let table = store.add("aggregator.pe_bank", tn(&[n_base + 1, d], rng)?, false);
                Some(PeBank { table, n_base })
            }
            PeMode::Sinusoidal => {
                sinusoidal_pe(1, d)?;
                None
            }
            PeMode::None => None,
        };
        let blocks = (0..blocks)
            .map(|i| Block::new(store, &format!("aggregator.blocks.{i}"), d, heads, 4.0, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "aggregator.norm", d);
        Ok(Self {
            pe_mode,
            vol_cls,
            bank,
            blocks,
            norm,
            pe_renorm,
        })
    }

    pub fn bank(&self) -> Option<&PeBank> {
        self.bank.as_ref()
    }

    pub fn pe_mode(&self) -> PeMode {
        self.pe_mode
    }

    /// Positional rows (n + 1, d) for a sequence of `n` slices, or `None`.
    pub fn positional(&self, g: &mut Graph, p: &Bound, n: usize) -> Result<Option<Var>> {
        match self.pe_mode {
            PeMode::Learned => {
                let bank = self
                    .bank
                    .as_ref()
                    .ok_or_else(|| Error::Config("learned PE mode without a PE bank".into()))?;
                let table = p.var(bank.table);
                let pe = interpolate_pe(g, table, n)?;
                if self.pe_renorm && n != bank.n_base {
                    Ok(Some(renormalize_pe(g, table, pe)?))
                } else {
                    Ok(Some(pe))
                }
            }
            PeMode::Sinusoidal => {
                let d = g.shape(p.var(self.vol_cls))[1];
                let t = sinusoidal_pe(n, d)?;
                Ok(Some(g.leaf(&t)))
            }
            PeMode::None => Ok(None),
        }
    }

    /// `embs` is (B, n, d); returns the classification-token state (B, d).
    pub fn forward(&self, g: &mut Graph, p: &Bound, embs: Var, ctx: &mut Ctx) -> Result<Var> {
        let shape = g.shape(embs).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "aggregator expects (batch, slices, width), got {shape:?}"
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let cls = g.repeat(p.var(self.vol_cls), b);
        let mut x = g.concat(&[cls, embs], 1)?;
        if let Some(pe) = self.positional(g, p, n)? {
            x = g.add(x, pe)?;
        }
        for block in &self.blocks {
            x = block.forward(g, p, x, ctx)?;
        }
        let x = self.norm.forward(g, p, x)?;
        g.select(x, 1, 0)
    }
}

/// Kernel-3 same-padded convolution along the slice axis, d -> d channels.
#[derive(Clone, Debug)]
pub struct Conv1dAggregator {
    /// (3d, d): rows [0, d) act on the previous slice, [d, 2d) on the
    /// current one, [2d, 3d) on the next.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dAggregator {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut RngStream) -> Self {
        let weight = store.add(
            "aggregator.conv.weight",
            scaled_uniform_init(&[3 * d, d], 3 * d, rng),
            true,
        );
        let bias = store.add("aggregator.conv.bias", Tensor::zeros(&[d]), false);
        Self { weight, bias }
    }

    /// Pre-activation convolution output (B, n, d).
    pub fn conv(&self, g: &mut Graph, p: &Bound, embs: Var) -> Result<Var> {
        let shape = g.shape(embs).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let pad = g.constant(&[b, 1, d], vec![0.0; b * d])?;
        let padded = g.concat(&[pad, embs, pad], 1)?;
        let prev = g.narrow(padded, 1, 0, n)?;
        let next = g.narrow(padded, 1, 2, n)?;
        let taps = g.concat(&[prev, embs, next], 2)?;
        let y = g.matmul(taps, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, embs: Var) -> Result<Var> {
        let y = self.conv(g, p, embs)?;
        let y = g.gelu(y);
        g.mean_axis(y, 1)
    }
}

pub fn pool(g: &mut Graph, embs: Var, kind: PoolKind) -> Result<Var> {
    match kind {
        PoolKind::Avg => g.mean_axis(embs, 1),
        PoolKind::Max => g.max_axis(embs, 1),
    }
}

/// Eager coordinatewise pooling of (n, d) rows.
pub fn aggregate_pool(slice_embs: &Tensor, kind: PoolKind) -> Result<Tensor> {
    if slice_embs.rank() != 2 {
        return Err(Error::InvalidInput(format!(
            "pooling expects (slices, width), got {:?}",
            slice_embs.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(slice_embs);
    let x = g.reshape(x, &[1, slice_embs.shape()[0], slice_embs.shape()[1]])?;
    let y = pool(&mut g, x, kind)?;
    Ok(g.value(y).reshape(&[slice_embs.shape()[1]])?)
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    Transformer(FeatureAggregatorTransformer),
    Pool(PoolKind),
    Conv(Conv1dAggregator),
}

impl Aggregator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: AggregatorMode,
        store: &mut ParamStore,
        d: usize,
        blocks: usize,
        heads: usize,
        n_base: Option<usize>,
        pe_renorm: bool,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(match mode {
            AggregatorMode::AvgPool => Self::Pool(PoolKind::Avg),
            AggregatorMode::MaxPool => Self::Pool(PoolKind::Max),
            AggregatorMode::Conv1d => Self::Conv(Conv1dAggregator::new(store, d, rng)),
            m => Self::Transformer(FeatureAggregatorTransformer::new(
                store,
                d,
                blocks,
                heads,
                m.pe_mode().expect("transformer modes carry a PE mode"),
                n_base,
                pe_renorm,
                dropout,
                rng,
            )?),
        })
    }

    /// (B, n, d) -> (B, d).
    pub fn forward(&self, g: &mut Graph, p: &Bound, embs: Var, ctx: &mut Ctx) -> Result<Var> {
        if g.shape(embs).len() != 3 || g.shape(embs)[1] == 0 {
            return Err(Error::InvalidInput("aggregator needs at least one slice".into()));
        }
        match self {
            Self::Transformer(t) => t.forward(g, p, embs, ctx),
            Self::Pool(kind) => pool(g, embs, *kind),
            Self::Conv(c) => c.forward(g, p, embs),
        }
    }

    /// Eager aggregation of one volume's (n, d) slice embeddings.
    pub fn aggregate(
        &self,
        store: &ParamStore,
        slice_embs: &Tensor,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if slice_embs.rank() != 2 {
            return Err(Error::InvalidInput(format!(
                "aggregator expects (slices, width), got {:?}",
                slice_embs.shape()
            )));
        }
        let (n, d) = (slice_embs.shape()[0], slice_embs.shape()[1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(slice_embs);
        let x = g.reshape(x, &[1, n, d])?;
        let mut ctx = Ctx {
            train,
            rng,
            attention: None,
        };
        let y = self.forward(&mut g, &p, x, &mut ctx)?;
        Ok(g.value(y).reshape(&[d])?)
    }
}
