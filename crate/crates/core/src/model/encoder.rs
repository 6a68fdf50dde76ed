use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::attention::{AttentionMaps, Block, BlockCache};
use super::config::PatchConfig;
use super::layers::{join, LayerNorm, LayerNormCache, Linear, LinearCache, Module, Param, INIT_STD};
use super::patch::sincos_pos_embed_2d;
use crate::error::{Error, Result};

/// Embedded tokens of one image, `(N'+1) × d`; row 0 is the class token.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    /// `(N+1) × d`, row 0 belongs to the class token.
    pub positional_embedding: Array2<f64>,
}

impl TokenSequence {
    pub fn num_patch_tokens(&self) -> usize {
        self.tokens.nrows() - 1
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub cls_encoding: Array1<f64>,
    /// `N_vis × d`, in input order.
    pub patch_encodings: Array2<f64>,
    /// Affinity of the final block. `None` for a depth-0 encoder.
    pub last_attention: Option<AttentionMaps>,
}

impl EncoderOutput {
    pub fn num_tokens(&self) -> usize {
        self.patch_encodings.nrows() + 1
    }

    /// Mean of the non-class encodings; the class encoding when no patches are visible.
    pub fn pooled(&self) -> Array1<f64> {
        self.patch_encodings
            .mean_axis(Axis(0))
            .unwrap_or_else(|| self.cls_encoding.clone())
    }
}

pub struct EmbedCache {
    patch_embed: LinearCache,
    visible: Vec<usize>,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl EncoderCache {
    /// Attention maps of every block, in order.
    pub fn all_attention(&self) -> Vec<AttentionMaps> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, c)| AttentionMaps {
                per_head: c.attention_probs().clone(),
                layer_index: i,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &PatchConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_embed: Linear::new(cfg.patch_dim(), d, rng),
            cls_token: Param::trunc_normal(1, d, INIT_STD, rng),
            pos_embed: sincos_pos_embed_2d(d, cfg.grid_height(), cfg.grid_width(), true),
            blocks: (0..cfg.encoder_depth)
                .map(|_| Block::new(d, cfg.num_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(d),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.cls_token.value.ncols()
    }

    pub fn num_patches(&self) -> usize {
        self.pos_embed.nrows() - 1
    }

    /// Linear projection of all `N` patches, class token prepended, positional
    /// embedding added.
    pub fn embed(&self, patches: &Array2<f64>) -> Result<TokenSequence> {
        let all: Vec<usize> = (0..self.num_patches()).collect();
        let (tokens, _) = self.embed_visible(patches, &all)?;
        Ok(TokenSequence {
            tokens,
            positional_embedding: self.pos_embed.clone(),
        })
    }

    /// Embeds only the listed patches. Equivalent to gathering rows from
    /// [`Encoder::embed`], without projecting patches that are dropped.
    pub fn embed_visible(&self, patches: &Array2<f64>, visible: &[usize]) -> Result<(Array2<f64>, EmbedCache)> {
        let n = self.num_patches();
        if patches.nrows() != n || patches.ncols() != self.patch_embed.in_dim() {
            return Err(Error::Shape {
                expected: format!("{n}×{}", self.patch_embed.in_dim()),
                actual: format!("{}×{}", patches.nrows(), patches.ncols()),
            });
        }
        if let Some(&index) = visible.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        let gathered = patches.select(Axis(0), visible);
        let (projected, patch_embed) = self.patch_embed.forward(gathered);
        let d = self.embed_dim();
        let mut tokens = Array2::zeros((visible.len() + 1, d));
        tokens
            .row_mut(0)
            .assign(&(&self.cls_token.value.row(0) + &self.pos_embed.row(0)));
        for (r, &v) in visible.iter().enumerate() {
            tokens
                .row_mut(r + 1)
                .assign(&(&projected.row(r) + &self.pos_embed.row(v + 1)));
        }
        Ok((
            tokens,
            EmbedCache {
                patch_embed,
                visible: visible.to_vec(),
            },
        ))
    }

    pub fn backward_embed(&mut self, cache: EmbedCache, d_tokens: &Array2<f64>) {
        let mut cls_grad = self.cls_token.grad.row_mut(0);
        cls_grad += &d_tokens.row(0);
        let d_projected = d_tokens.slice(s![1.., ..]).to_owned();
        debug_assert_eq!(d_projected.nrows(), cache.visible.len());
        self.patch_embed.backward(cache.patch_embed, &d_projected);
    }

    /// Runs every block and the final norm over `[cls, x_vis]`.
    pub fn forward(&self, tokens: Array2<f64>) -> (EncoderOutput, EncoderCache) {
        let mut x = tokens;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(x);
            x = y;
            caches.push(c);
        }
        let (out, norm) = self.norm.forward(&x);
        let last_attention = caches.last().map(|c| AttentionMaps {
            per_head: c.attention_probs().clone(),
            layer_index: caches.len() - 1,
        });
        let output = EncoderOutput {
            cls_encoding: out.row(0).to_owned(),
            patch_encodings: out.slice(s![1.., ..]).to_owned(),
            last_attention,
        };
        (output, EncoderCache { blocks: caches, norm })
    }

    pub fn encode(&self, tokens: Array2<f64>) -> EncoderOutput {
        self.forward(tokens).0
    }

    /// `d_out` is the gradient w.r.t. the normalized `[cls, e_vis]` rows.
    pub fn backward(&mut self, cache: EncoderCache, d_out: &Array2<f64>) -> Array2<f64> {
        let mut dx = self.norm.backward(cache.norm, d_out);
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            dx = block.backward(c, &dx);
        }
        dx
    }

    /// Full-token pass over all `N + 1` tokens.
    pub fn encode_full(&self, patches: &Array2<f64>) -> Result<EncoderOutput> {
        let all: Vec<usize> = (0..self.num_patches()).collect();
        let (tokens, _) = self.embed_visible(patches, &all)?;
        Ok(self.encode(tokens))
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &self.cls_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
