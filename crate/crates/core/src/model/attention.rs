//! Multi-head self-attention and the pre-norm transformer block.

use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::layers::{join, softmax_rows_inplace, LayerNorm, LayerNormCache, Linear, LinearCache, Mlp, MlpCache, Module, Param};

/// Per-head affinity matrices of one block, `h × n × n`, rows softmax-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub per_head: Array3<f64>,
    pub layer_index: usize,
}

impl AttentionMaps {
    pub fn num_heads(&self) -> usize {
        self.per_head.dim().0
    }

    pub fn num_tokens(&self) -> usize {
        self.per_head.dim().1
    }

    /// Mean over heads, `n × n`.
    pub fn head_mean(&self) -> Array2<f64> {
        self.per_head.mean_axis(ndarray::Axis(0)).expect("at least one head")
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub num_heads: usize,
    /// Fused query/key/value projection, `d × 3d`.
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    qkv_cache: LinearCache,
    qkv: Array2<f64>,
    probs: Array3<f64>,
    proj_cache: LinearCache,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        Self {
            num_heads,
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
        }
    }

    fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qkv, qkv_cache) = self.qkv.forward(x);
        let mut probs = Array3::zeros((self.num_heads, n, n));
        let mut mixed = Array2::zeros((n, d));
        for h in 0..self.num_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            softmax_rows_inplace(&mut a);
            mixed.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.slice_mut(s![h, .., ..]).assign(&a);
        }
        let (y, proj_cache) = self.proj.forward(mixed);
        (
            y,
            AttentionCache {
                qkv_cache,
                qkv,
                probs,
                proj_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.proj.backward(cache.proj_cache, dy);
        let qkv = &cache.qkv;
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for h in 0..self.num_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let a = cache.probs.slice(s![h, .., ..]);
            let dout = dmixed.slice(s![.., h * dh..(h + 1) * dh]);
            let da = dout.dot(&v.t());
            let dv = a.t().dot(&dout);
            // Softmax Jacobian, row by row: dS = A ⊙ (dA − Σ_j dA⊙A).
            let mut ds = &a * &da;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&arow, |r, &p| *r -= p * dot);
            }
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(cache.qkv_cache, &dqkv)
    }
}

impl Module for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    mlp: MlpCache,
}

impl BlockCache {
    pub fn attention_probs(&self) -> &Array3<f64> {
        &self.attn.probs
    }
}

impl Block {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, num_heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h, norm1) = self.norm1.forward(&x);
        let (a, attn) = self.attn.forward(h);
        let x = x + a;
        let (h, norm2) = self.norm2.forward(&x);
        let (m, mlp) = self.mlp.forward(h);
        let x = x + m;
        (x, BlockCache { norm1, attn, norm2, mlp })
    }

    pub fn backward(&mut self, cache: BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.mlp.backward(cache.mlp, dy);
        let dx = dy + &self.norm2.backward(cache.norm2, &dh);
        let dh = self.attn.backward(cache.attn, &dx);
        &dx + &self.norm1.backward(cache.norm1, &dh)
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Runs one block and returns its output with the captured attention maps.
pub fn attention_block(block: &Block, tokens: Array2<f64>, layer_index: usize) -> (Array2<f64>, AttentionMaps) {
    let (out, cache) = block.forward(tokens);
    let maps = AttentionMaps {
        per_head: cache.attn.probs,
        layer_index,
    };
    (out, maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new(8, 2, 4, &mut rng);
        let row = array![0.3, -1.0, 0.5, 2.0, 0.1, 0.0, -0.7, 1.2];
        let tokens = Array2::from_shape_fn((5, 8), |(_, j)| row[j]);
        let (_, maps) = attention_block(&block, tokens, 0);
        for v in maps.per_head.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = Block::new(16, 4, 4, &mut rng);
        let tokens = Array::from_shape_fn((7, 16), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let (_, maps) = attention_block(&block, tokens, 3);
        assert_eq!(maps.layer_index, 3);
        assert_eq!(maps.per_head.dim(), (4, 7, 7));
        for h in 0..4 {
            for r in 0..7 {
                let row = maps.per_head.slice(s![h, r, ..]);
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn hand_set_projection_matches_manual_softmax() {
        // One head, d = 2; W_q = I, W_k = [[1,0],[0,2]], zero bias, pre-norm bypassed
        // by calling the attention layer directly.
        let mut attn = Attention {
            num_heads: 1,
            qkv: Linear::zeros(2, 6),
            proj: Linear::zeros(2, 2),
        };
        let w = &mut attn.qkv.weight.value;
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        w[[0, 2]] = 1.0;
        w[[1, 3]] = 2.0;
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let (_, cache) = attn.forward(z.clone());
        // Manual: q = z, k = z·diag(1,2); scores = q kᵀ / √2.
        let k = array![[1.0, 0.0], [0.0, 2.0], [1.0, 2.0]];
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (z[[i, 0]] * k[[j, 0]] + z[[i, 1]] * k[[j, 1]]) / 2f64.sqrt())
                .collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                let expect = scores[j].exp() / denom;
                assert!((cache.probs[[0, i, j]] - expect).abs() < 1e-12);
            }
        }
    }
}
