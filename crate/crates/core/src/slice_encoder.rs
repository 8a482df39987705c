//! ViT slice encoder: one grayscale slice in, the classification-token
//! state out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{truncated_normal_init, Graph, RngStream, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::transformer::{Block, Ctx, LayerNorm, Linear};

/// Std and symmetric bound of the truncated-normal embedding initializer.
pub const EMBED_INIT_STD: f64 = 0.02;
pub const EMBED_INIT_BOUND: f64 = 0.04;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Pixels enter the patch projection as `(x - pixel_mean) / pixel_std`.
    #[serde(default)]
    pub pixel_mean: f64,
    #[serde(default = "default_pixel_std")]
    pub pixel_std: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_pixel_std() -> f64 {
    1.0
}

impl EncoderConfig {
    /// The desk-scale configuration: 32x32 slices, 8x8 patches, width 32.
    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.0,
            pixel_mean: 0.2,
            pixel_std: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_mean.is_finite() {
            return Err(Error::Config("pixel_std must be positive and pixel_mean finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Closed-form parameter count:
    /// `p²·d + d` (projection) `+ d` (cls) `+ (P+1)·d` (patch PEs)
    /// `+ L·block(d)` `+ 2d` (final norm).
    pub fn num_params(&self) -> usize {
        let d = self.embed_dim;
        let pp = self.patch_size * self.patch_size;
        Linear::num_params(pp, d)
            + d
            + (self.num_patches() + 1) * d
            + self.num_blocks * Block::num_params(d, self.mlp_ratio)
            + 2 * d
    }
}

/// Non-overlapping `p`x`p` patches of an (H, W) slice in raster order, each
/// flattened row-major: (num_patches, p²).
pub fn patchify(slice: &Tensor, p: usize) -> Result<Tensor> {
    if slice.rank() != 2 {
        return Err(Error::InvalidInput(format!(
            "patchify expects (H, W), got {:?}",
            slice.shape()
        )));
    }
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let data = patchify_into(slice.data(), h, w, p)?;
    Tensor::new(&[(h / p) * (w / p), p * p], data)
}

fn patchify_into(src: &[f64], h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "slice {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for r in 0..p {
                let row = (pr * p + r) * w + pc * p;
                out.extend_from_slice(&src[row..row + p]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SliceEncoder {
    cfg: EncoderConfig,
    patch_proj: Linear,
    cls_token: ParamId,
    patch_pe: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl SliceEncoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let pp = cfg.patch_size * cfg.patch_size;
        let patch_proj = Linear::new(store, "encoder.patch_proj", pp, d, rng);
        let tn = |shape: &[usize], rng: &mut RngStream| {
            truncated_normal_init(shape, 0.0, EMBED_INIT_STD, -EMBED_INIT_BOUND, EMBED_INIT_BOUND, rng)
        };
        let cls_token = store.add("encoder.cls_token", tn(&[1, d], rng)?, false);
        let patch_pe = store.add("encoder.patch_pe", tn(&[cfg.num_patches() + 1, d], rng)?, false);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                Block::new(
                    store,
                    &format!("encoder.blocks.{i}"),
                    d,
                    cfg.num_heads,
                    cfg.mlp_ratio,
                    cfg.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d);
        Ok(Self {
            cfg,
            patch_proj,
            cls_token,
            patch_pe,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes a stack of slices (S, H, W) into (S, d), sharing weights
    /// across slices.
    pub fn forward(&self, g: &mut Graph, p: &Bound, slices: &Tensor, ctx: &mut Ctx) -> Result<Var> {
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        if slices.rank() != 3 || slices.shape()[1] != h || slices.shape()[2] != w {
            return Err(Error::shape("encode_volume", slices.shape(), &[0, h, w]));
        }
        let s = slices.shape()[0];
        let ps = self.cfg.patch_size;
        let np = self.cfg.num_patches();
        let d = self.cfg.embed_dim;
        let mut patches = Vec::with_capacity(slices.numel());
        for chunk in slices.data().chunks(h * w) {
            patches.extend(patchify_into(chunk, h, w, ps)?);
        }
        let (mean, std) = (self.cfg.pixel_mean, self.cfg.pixel_std);
        if mean != 0.0 || std != 1.0 {
            patches.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
        let x = g.constant(&[s * np, ps * ps], patches)?;
        let x = self.patch_proj.forward(g, p, x)?;
        let x = g.reshape(x, &[s, np, d])?;
        let cls = g.repeat(p.var(self.cls_token), s);
        let x = g.concat(&[cls, x], 1)?;
        let mut x = g.add(x, p.var(self.patch_pe))?;
        for block in &self.blocks {
            x = block.forward(g, p, x, ctx)?;
        }
        let x = self.norm.forward(g, p, x)?;
        g.select(x, 1, 0)
    }

    /// Eager encoding of one (n, H, W) volume into (n, d).
    pub fn encode_volume(
        &self,
        store: &ParamStore,
        slices: &Tensor,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut ctx = Ctx {
            train,
            rng,
            attention: None,
        };
        let out = self.forward(&mut g, &p, slices, &mut ctx)?;
        Ok(g.value(out))
    }

    /// Eager encoding of one (H, W) slice into (d).
    pub fn encode_slice(
        &self,
        store: &ParamStore,
        slice: &Tensor,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if slice.rank() != 2 {
            return Err(Error::shape(
                "encode_slice",
                slice.shape(),
                &[self.cfg.image_height, self.cfg.image_width],
            ));
        }
        let stacked = slice.clone().reshape(&[1, slice.shape()[0], slice.shape()[1]])?;
        let out = self.encode_volume(store, &stacked, train, rng)?;
        out.reshape(&[self.cfg.embed_dim])
    }
}
