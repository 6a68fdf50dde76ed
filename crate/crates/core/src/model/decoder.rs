//! Lightweight reconstruction decoder. The class token never enters it and
//! thrown positions get neither a mask token nor a prediction.

use ndarray::{s, Array2};
use rand::Rng;

use super::attention::{Block, BlockCache};
use super::config::PatchConfig;
use super::layers::{join, LayerNorm, LayerNormCache, Linear, LinearCache, Module, Param, INIT_STD};
use super::patch::sincos_pos_embed_2d;
use crate::error::{Error, Result};

/// Predicted pixels, `N_mask × (p²·3)`, one row per masked index in order.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub predicted_pixels: Array2<f64>,
}

impl DecoderOutput {
    pub fn num_masked(&self) -> usize {
        self.predicted_pixels.nrows()
    }
}

pub struct DecoderCache {
    embed: LinearCache,
    num_visible: usize,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    pred: LinearCache,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: Param,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
}

/// Checks that `visible` and `masked` are in range and disjoint.
pub fn check_disjoint(visible: &[usize], masked: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in visible.iter() {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        seen[i] = true;
    }
    for &i in masked {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if seen[i] {
            return Err(Error::Overlap(i));
        }
    }
    Ok(())
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &PatchConfig, rng: &mut R) -> Self {
        let dd = cfg.decoder_dim;
        Self {
            embed: Linear::new(cfg.embed_dim, dd, rng),
            mask_token: Param::trunc_normal(1, dd, INIT_STD, rng),
            pos_embed: sincos_pos_embed_2d(dd, cfg.grid_height(), cfg.grid_width(), false),
            blocks: (0..cfg.decoder_depth)
                .map(|_| Block::new(dd, cfg.decoder_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(dd),
            pred: Linear::new(dd, cfg.patch_dim(), rng),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.pos_embed.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.pred.out_dim()
    }

    /// `patch_encodings` are the encoder's non-class outputs aligned with `visible`.
    pub fn forward(
        &self,
        patch_encodings: &Array2<f64>,
        visible: &[usize],
        masked: &[usize],
    ) -> Result<(DecoderOutput, Option<DecoderCache>)> {
        if patch_encodings.nrows() != visible.len() {
            return Err(Error::Dimension(format!(
                "{} patch encodings for {} visible indices",
                patch_encodings.nrows(),
                visible.len()
            )));
        }
        check_disjoint(visible, masked, self.num_patches())?;
        if masked.is_empty() {
            return Ok((
                DecoderOutput {
                    predicted_pixels: Array2::zeros((0, self.patch_dim())),
                },
                None,
            ));
        }
        let nv = visible.len();
        let (projected, embed) = self.embed.forward(patch_encodings.clone());
        let dd = self.mask_token.value.ncols();
        let mut x = Array2::zeros((nv + masked.len(), dd));
        for (r, &v) in visible.iter().enumerate() {
            x.row_mut(r).assign(&(&projected.row(r) + &self.pos_embed.row(v)));
        }
        for (r, &m) in masked.iter().enumerate() {
            x.row_mut(nv + r)
                .assign(&(&self.mask_token.value.row(0) + &self.pos_embed.row(m)));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(x);
            x = y;
            caches.push(c);
        }
        let (normed, norm) = self.norm.forward(&x);
        let (pred, pred_cache) = self.pred.forward(normed.slice(s![nv.., ..]).to_owned());
        Ok((
            DecoderOutput {
                predicted_pixels: pred,
            },
            Some(DecoderCache {
                embed,
                num_visible: nv,
                blocks: caches,
                norm,
                pred: pred_cache,
            }),
        ))
    }

    pub fn decode(&self, patch_encodings: &Array2<f64>, visible: &[usize], masked: &[usize]) -> Result<DecoderOutput> {
        Ok(self.forward(patch_encodings, visible, masked)?.0)
    }

    /// Returns the gradient w.r.t. the visible patch encodings.
    pub fn backward(&mut self, cache: Option<DecoderCache>, d_pred: &Array2<f64>, num_visible: usize) -> Array2<f64> {
        let Some(cache) = cache else {
            return Array2::zeros((num_visible, self.embed.in_dim()));
        };
        let nv = cache.num_visible;
        let d_masked = self.pred.backward(cache.pred, d_pred);
        let dd = d_masked.ncols();
        let mut d_normed = Array2::zeros((nv + d_masked.nrows(), dd));
        d_normed.slice_mut(s![nv.., ..]).assign(&d_masked);
        let mut dx = self.norm.backward(cache.norm, &d_normed);
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            dx = block.backward(c, &dx);
        }
        let d_mask_rows = dx.slice(s![nv.., ..]).sum_axis(ndarray::Axis(0));
        let mut g = self.mask_token.grad.row_mut(0);
        g += &d_mask_rows;
        self.embed.backward(cache.embed, &dx.slice(s![..nv, ..]).to_owned())
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &self.mask_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.pred.visit(&join(prefix, "pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.pred.visit_mut(&join(prefix, "pred"), f);
    }
}
