//! Vision-transformer encoder, reconstruction decoder and classification heads.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod head;
pub mod layers;
pub mod patch;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{attention_block, AttentionMaps, Block};
pub use config::PatchConfig;
pub use decoder::{Decoder, DecoderOutput};
pub use encoder::{Encoder, EncoderOutput, TokenSequence};
pub use head::{ClassHead, HeadKind};
pub use layers::{Module, Param};
pub use patch::{patchify, patchify_image, unpatchify, unpatchify_image, ImageBatch};

use crate::error::Result;
use decoder::DecoderCache;
use encoder::{EmbedCache, EncoderCache};
use head::HeadCache;
use layers::join;

/// Anything that maps a full image's patches to class logits through an encoder.
pub trait ImageClassifier {
    fn config(&self) -> &PatchConfig;
    fn encoder(&self) -> &Encoder;
    fn head(&self) -> &ClassHead;
    /// Classification feature for one encoder output.
    fn feature(&self, out: &EncoderOutput) -> Array1<f64>;

    /// Full-token (`N + 1`) inference.
    fn predict_logits(&self, patches: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.encoder().encode_full(patches)?;
        Ok(self.head().logits(&self.feature(&out)))
    }
}

/// Forward products of one masked pre-training sample.
#[derive(Clone, Debug)]
pub struct MaskedForward {
    pub prediction: DecoderOutput,
    pub logits: Vec<f64>,
    /// Tokens that entered the encoder, class token included.
    pub encoder_tokens: usize,
}

pub struct MaskedCache {
    embed: EmbedCache,
    encoder: EncoderCache,
    decoder: Option<DecoderCache>,
    head: HeadCache,
    num_visible: usize,
}

/// Encoder + decoder + class-token head trained with the joint loss.
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub cfg: PatchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: ClassHead,
}

impl MaskedAutoencoder {
    pub fn new(cfg: PatchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&cfg, &mut rng);
        let decoder = Decoder::new(&cfg, &mut rng);
        let head = ClassHead::mlp(cfg.embed_dim, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg,
            encoder,
            decoder,
            head,
        })
    }

    /// Encodes `[cls, x_vis]`, reconstructs `masked`, classifies the class token.
    pub fn forward_masked(
        &self,
        patches: &Array2<f64>,
        visible: &[usize],
        masked: &[usize],
    ) -> Result<(MaskedForward, MaskedCache)> {
        decoder::check_disjoint(visible, masked, self.cfg.num_patches())?;
        let (tokens, embed) = self.encoder.embed_visible(patches, visible)?;
        let encoder_tokens = tokens.nrows();
        let (out, encoder) = self.encoder.forward(tokens);
        let (prediction, decoder) = self.decoder.forward(&out.patch_encodings, visible, masked)?;
        let (logits, head) = self.head.forward(&out.cls_encoding);
        Ok((
            MaskedForward {
                prediction,
                logits,
                encoder_tokens,
            },
            MaskedCache {
                embed,
                encoder,
                decoder,
                head,
                num_visible: visible.len(),
            },
        ))
    }

    /// Accumulates parameter gradients for one sample.
    pub fn backward_masked(&mut self, cache: MaskedCache, d_pred: &Array2<f64>, d_logits: &[f64]) {
        let nv = cache.num_visible;
        let d_cls = self.head.backward(cache.head, d_logits);
        let d_patches = self.decoder.backward(cache.decoder, d_pred, nv);
        let mut d_out = Array2::zeros((nv + 1, self.cfg.embed_dim));
        d_out.row_mut(0).assign(&d_cls);
        d_out.slice_mut(s![1.., ..]).assign(&d_patches);
        let d_tokens = self.encoder.backward(cache.encoder, &d_out);
        self.encoder.backward_embed(cache.embed, &d_tokens);
    }
}

impl ImageClassifier for MaskedAutoencoder {
    fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn head(&self) -> &ClassHead {
        &self.head
    }

    fn feature(&self, out: &EncoderOutput) -> Array1<f64> {
        out.cls_encoding.clone()
    }
}

impl Module for MaskedAutoencoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub struct ClassifierCache {
    embed: EmbedCache,
    encoder: EncoderCache,
    head: HeadCache,
    num_visible: usize,
    pooled: bool,
}

/// Encoder + head used for fine-tuning and evaluation.
#[derive(Clone, Debug)]
pub struct VitClassifier {
    pub cfg: PatchConfig,
    pub encoder: Encoder,
    pub head: ClassHead,
    /// Mean of non-class output tokens instead of the class encoding.
    pub global_pool: bool,
}

impl VitClassifier {
    pub fn new(cfg: PatchConfig, global_pool: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&cfg, &mut rng);
        let head = ClassHead::norm_linear(cfg.embed_dim, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg,
            encoder,
            head,
            global_pool,
        })
    }

    /// Warm-starts the encoder from a pre-trained autoencoder. The head is
    /// freshly initialized unless `reuse_head` is set, in which case the
    /// pre-training head is copied.
    pub fn from_pretrained(mae: &MaskedAutoencoder, global_pool: bool, reuse_head: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = if reuse_head {
            mae.head.clone()
        } else {
            ClassHead::norm_linear(mae.cfg.embed_dim, mae.cfg.num_classes, &mut rng)
        };
        Self {
            cfg: mae.cfg.clone(),
            encoder: mae.encoder.clone(),
            head,
            global_pool,
        }
    }

    /// Encodes `[cls, x_vis]` and returns logits plus the encoder token count.
    pub fn forward_masked(&self, patches: &Array2<f64>, visible: &[usize]) -> Result<(Vec<f64>, usize, ClassifierCache)> {
        let (tokens, embed) = self.encoder.embed_visible(patches, visible)?;
        let n_tokens = tokens.nrows();
        let (out, encoder) = self.encoder.forward(tokens);
        let pooled = self.global_pool && !visible.is_empty();
        let feature = self.feature(&out);
        let (logits, head) = self.head.forward(&feature);
        Ok((
            logits,
            n_tokens,
            ClassifierCache {
                embed,
                encoder,
                head,
                num_visible: visible.len(),
                pooled,
            },
        ))
    }

    pub fn backward_masked(&mut self, cache: ClassifierCache, d_logits: &[f64]) {
        let nv = cache.num_visible;
        let d_feature = self.head.backward(cache.head, d_logits);
        let mut d_out = Array2::zeros((nv + 1, self.cfg.embed_dim));
        if cache.pooled {
            let scaled = &d_feature / nv as f64;
            for mut row in d_out.rows_mut().into_iter().skip(1) {
                row.assign(&scaled);
            }
        } else {
            d_out.row_mut(0).assign(&d_feature);
        }
        let d_tokens = self.encoder.backward(cache.encoder, &d_out);
        self.encoder.backward_embed(cache.embed, &d_tokens);
    }
}

impl ImageClassifier for VitClassifier {
    fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn head(&self) -> &ClassHead {
        &self.head
    }

    fn feature(&self, out: &EncoderOutput) -> Array1<f64> {
        if self.global_pool {
            out.pooled()
        } else {
            out.cls_encoding.clone()
        }
    }
}

impl Module for VitClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
