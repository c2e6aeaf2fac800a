//! Models of `E(Y | X ⊙ M)`: class probabilities from masked features.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Features;
use crate::error::{Error, Result};
use crate::models::digest::{digest, ParameterDigest};
use crate::nn::{conv2d, dense, embed, max_pool2d, push_dense, uniform, Bound, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capacity {
    /// Text: sum-pooled masked embeddings -> dense. Images: masked pixels
    /// -> dense.
    Simple,
    /// Text: shared per-position ReLU layer, flattened -> dense ReLU ->
    /// dense. Images: conv2d -> max pool -> dense ReLU -> dense.
    Powerful,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "kebab-case")]
pub enum ApproximatorArch {
    Text {
        vocab_size: usize,
        seq_len: usize,
        embed_dim: usize,
        hidden: usize,
        capacity: Capacity,
    },
    Image {
        height: usize,
        width: usize,
        filters: usize,
        hidden: usize,
        capacity: Capacity,
    },
}

impl ApproximatorArch {
    pub fn text(vocab_size: usize, seq_len: usize, capacity: Capacity) -> Self {
        ApproximatorArch::Text {
            vocab_size,
            seq_len,
            embed_dim: 16,
            hidden: 16,
            capacity,
        }
    }

    pub fn image(height: usize, width: usize, capacity: Capacity) -> Self {
        ApproximatorArch::Image {
            height,
            width,
            filters: 8,
            hidden: 32,
            capacity,
        }
    }

    pub fn capacity(&self) -> Capacity {
        match *self {
            ApproximatorArch::Text { capacity, .. } | ApproximatorArch::Image { capacity, .. } => capacity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Approximator<T> {
    pub arch: ApproximatorArch,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Approximator<T> {
    pub fn new(arch: ApproximatorArch, seed: u64) -> Self {
        let mut rng = stream(seed, "approximator/init");
        let mut p = ParamSet::new();
        match arch {
            ApproximatorArch::Text {
                vocab_size,
                seq_len,
                embed_dim,
                hidden,
                capacity,
            } => {
                p.push("embedding", uniform(&mut rng, &[vocab_size, embed_dim], 0.05));
                match capacity {
                    Capacity::Simple => push_dense(&mut p, &mut rng, "out", embed_dim, 2),
                    Capacity::Powerful => {
                        push_dense(&mut p, &mut rng, "token", embed_dim, hidden);
                        push_dense(&mut p, &mut rng, "hidden", seq_len * hidden, hidden);
                        push_dense(&mut p, &mut rng, "out", hidden, 2);
                    }
                }
            }
            ApproximatorArch::Image {
                height,
                width,
                filters,
                hidden,
                capacity,
            } => match capacity {
                Capacity::Simple => push_dense(&mut p, &mut rng, "out", height * width, 2),
                Capacity::Powerful => {
                    push_dense(&mut p, &mut rng, "conv", 9, filters);
                    let flat = ((height - 2) / 2) * ((width - 2) / 2) * filters;
                    push_dense(&mut p, &mut rng, "hidden", flat, hidden);
                    push_dense(&mut p, &mut rng, "out", hidden, 2);
                }
            },
        }
        Self { arch, params: p }
    }

    pub fn digest(&self) -> ParameterDigest {
        digest(&self.params)
    }

    pub fn positions(&self) -> usize {
        match self.arch {
            ApproximatorArch::Text { seq_len, .. } => seq_len,
            ApproximatorArch::Image { height, width, .. } => height * width,
        }
    }

    /// Class logits for `x ⊙ mask`; `mask` is a `[positions]` node.
    pub fn logits(&self, g: &mut Graph<T>, b: &Bound, x: &Features<T>, mask: Var) -> Result<Var> {
        if g.value(mask).numel() != self.positions() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} positions",
                g.value(mask).numel(),
                self.positions()
            )));
        }
        match (&self.arch, x) {
            (
                ApproximatorArch::Text {
                    seq_len, vocab_size, ..
                },
                Features::Tokens(ids),
            ) => {
                if ids.len() != *seq_len {
                    return Err(Error::Shape(format!("sequence of length {}", ids.len())));
                }
                if let Some(&t) = ids.iter().find(|&&t| t >= *vocab_size) {
                    return Err(Error::Shape(format!("token {t} outside vocabulary")));
                }
                let e = embed(g, b.get("embedding"), ids);
                let masked = g.mul_col(e, mask);
                Ok(match self.arch.capacity() {
                    Capacity::Simple => {
                        let pooled = g.sum_rows(masked);
                        dense(g, b, "out", pooled)
                    }
                    Capacity::Powerful => {
                        let h = dense(g, b, "token", masked);
                        let h = g.relu(h);
                        let n = g.value(h).numel();
                        let flat = g.reshape(h, &[n]);
                        let h = dense(g, b, "hidden", flat);
                        let h = g.relu(h);
                        dense(g, b, "out", h)
                    }
                })
            }
            (ApproximatorArch::Image { height, width, .. }, Features::Pixels(grid)) => {
                if grid.height != *height || grid.width != *width {
                    return Err(Error::Shape("image size differs from approximator".into()));
                }
                let px = g.constant(Tensor::vector(grid.pixels.clone()));
                let masked = g.mul(px, mask);
                Ok(match self.arch.capacity() {
                    Capacity::Simple => dense(g, b, "out", masked),
                    Capacity::Powerful => {
                        let n = grid.pixels.len();
                        let col = g.reshape(masked, &[n, 1]);
                        let (c, hw) = conv2d(g, b, "conv", col, (*height, *width), 3, false);
                        let c = g.relu(c);
                        let (p, _) = max_pool2d(g, c, hw);
                        let n = g.value(p).numel();
                        let flat = g.reshape(p, &[n]);
                        let h = dense(g, b, "hidden", flat);
                        let h = g.relu(h);
                        dense(g, b, "out", h)
                    }
                })
            }
            _ => Err(Error::Shape("input modality does not match the approximator".into())),
        }
    }

    pub fn predict_proba(&self, x: &Features<T>, mask: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let m = g.constant(Tensor::vector(mask.to_vec()));
        let l = self.logits(&mut g, &b, x, m)?;
        let p = g.softmax_rows(l);
        Ok(g.value(p).data.clone())
    }
}
