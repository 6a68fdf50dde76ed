use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, softmax, LayerNorm, LayerNormCache, Linear, LinearCache, Mlp, MlpCache, Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `Linear → GELU → Linear` on the raw feature (pre-training head).
    Mlp,
    /// `LayerNorm → Linear` (fine-tuning head).
    NormLinear,
}

/// Classification head over a single `d`-dim feature.
#[derive(Clone, Debug)]
pub enum ClassHead {
    Mlp(Mlp),
    NormLinear { norm: LayerNorm, fc: Linear },
}

pub enum HeadCache {
    Mlp(MlpCache),
    NormLinear(LayerNormCache, LinearCache),
}

impl ClassHead {
    pub fn mlp<R: Rng + ?Sized>(dim: usize, num_classes: usize, rng: &mut R) -> Self {
        ClassHead::Mlp(Mlp::new(dim, dim, num_classes, rng))
    }

    pub fn norm_linear<R: Rng + ?Sized>(dim: usize, num_classes: usize, rng: &mut R) -> Self {
        ClassHead::NormLinear {
            norm: LayerNorm::new(dim),
            fc: Linear::new(dim, num_classes, rng),
        }
    }

    pub fn build<R: Rng + ?Sized>(kind: HeadKind, dim: usize, num_classes: usize, rng: &mut R) -> Self {
        match kind {
            HeadKind::Mlp => Self::mlp(dim, num_classes, rng),
            HeadKind::NormLinear => Self::norm_linear(dim, num_classes, rng),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            ClassHead::Mlp(_) => HeadKind::Mlp,
            ClassHead::NormLinear { .. } => HeadKind::NormLinear,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassHead::Mlp(m) => m.fc2.out_dim(),
            ClassHead::NormLinear { fc, .. } => fc.out_dim(),
        }
    }

    pub fn forward(&self, feature: &Array1<f64>) -> (Vec<f64>, HeadCache) {
        let x = feature.clone().insert_axis(Axis(0));
        match self {
            ClassHead::Mlp(mlp) => {
                let (y, c) = mlp.forward(x);
                (y.row(0).to_vec(), HeadCache::Mlp(c))
            }
            ClassHead::NormLinear { norm, fc } => {
                let (h, nc) = norm.forward(&x);
                let (y, lc) = fc.forward(h);
                (y.row(0).to_vec(), HeadCache::NormLinear(nc, lc))
            }
        }
    }

    pub fn logits(&self, feature: &Array1<f64>) -> Vec<f64> {
        self.forward(feature).0
    }

    /// Softmax class probabilities.
    pub fn classify(&self, feature: &Array1<f64>) -> Vec<f64> {
        softmax(&self.logits(feature))
    }

    pub fn backward(&mut self, cache: HeadCache, d_logits: &[f64]) -> Array1<f64> {
        let dy = Array2::from_shape_vec((1, d_logits.len()), d_logits.to_vec()).expect("row vector");
        let dx = match (self, cache) {
            (ClassHead::Mlp(mlp), HeadCache::Mlp(c)) => mlp.backward(c, &dy),
            (ClassHead::NormLinear { norm, fc }, HeadCache::NormLinear(nc, lc)) => {
                let dh = fc.backward(lc, &dy);
                norm.backward(nc, &dh)
            }
            _ => unreachable!("head cache does not match head kind"),
        };
        dx.row(0).to_owned()
    }
}

impl Module for ClassHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            ClassHead::Mlp(m) => m.visit(prefix, f),
            ClassHead::NormLinear { norm, fc } => {
                norm.visit(&join(prefix, "norm"), f);
                fc.visit(&join(prefix, "fc"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            ClassHead::Mlp(m) => m.visit_mut(prefix, f),
            ClassHead::NormLinear { norm, fc } => {
                norm.visit_mut(&join(prefix, "norm"), f);
                fc.visit_mut(&join(prefix, "fc"), f);
            }
        }
    }
}
