//! Per-position selection scores, optionally conditioned on the black-box
//! output.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Features;
use crate::error::{Error, Result};
use crate::models::digest::{digest, ParameterDigest};
use crate::nn::{conv1d, conv2d, dense, embed, push_dense, uniform, Bound, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "kebab-case")]
pub enum ExplainerArch {
    /// Token + position embedding -> conv1d (same) -> [local, global max,
    /// y_hat] -> dense ReLU -> score.
    Text {
        vocab_size: usize,
        seq_len: usize,
        embed_dim: usize,
        filters: usize,
        hidden: usize,
        yhat_in_query: bool,
    },
    /// Pixel + position bias -> conv2d (same) -> [local, global max, y_hat]
    /// -> dense ReLU -> score.
    Image {
        height: usize,
        width: usize,
        filters: usize,
        hidden: usize,
        yhat_in_query: bool,
    },
}

impl ExplainerArch {
    pub fn text(vocab_size: usize, seq_len: usize, yhat_in_query: bool) -> Self {
        ExplainerArch::Text {
            vocab_size,
            seq_len,
            embed_dim: 16,
            filters: 32,
            hidden: 32,
            yhat_in_query,
        }
    }

    pub fn image(height: usize, width: usize, yhat_in_query: bool) -> Self {
        ExplainerArch::Image {
            height,
            width,
            filters: 8,
            hidden: 16,
            yhat_in_query,
        }
    }

    pub fn yhat_in_query(&self) -> bool {
        match *self {
            ExplainerArch::Text { yhat_in_query, .. } | ExplainerArch::Image { yhat_in_query, .. } => yhat_in_query,
        }
    }

    pub fn positions(&self) -> usize {
        match *self {
            ExplainerArch::Text { seq_len, .. } => seq_len,
            ExplainerArch::Image { height, width, .. } => height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explainer<T> {
    pub arch: ExplainerArch,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Explainer<T> {
    pub fn new(arch: ExplainerArch, seed: u64) -> Self {
        let mut rng = stream(seed, "explainer/init");
        let mut p = ParamSet::new();
        let (local, hidden, yhat) = match arch {
            ExplainerArch::Text {
                vocab_size,
                seq_len,
                embed_dim,
                filters,
                hidden,
                yhat_in_query,
            } => {
                p.push("embedding", uniform(&mut rng, &[vocab_size, embed_dim], 0.05));
                p.push("position", uniform(&mut rng, &[seq_len, embed_dim], 0.05));
                push_dense(&mut p, &mut rng, "conv", 3 * embed_dim, filters);
                (filters, hidden, yhat_in_query)
            }
            ExplainerArch::Image {
                height,
                width,
                filters,
                hidden,
                yhat_in_query,
            } => {
                p.push("position", uniform(&mut rng, &[height * width, 1], 0.05));
                push_dense(&mut p, &mut rng, "conv", 9 * 2, filters);
                (filters, hidden, yhat_in_query)
            }
        };
        push_dense(&mut p, &mut rng, "local", local, hidden);
        p.push("global", crate::nn::glorot(&mut rng, local, hidden));
        if yhat {
            p.push("yhat", crate::nn::glorot(&mut rng, 2, hidden));
        }
        push_dense(&mut p, &mut rng, "score", hidden, 1);
        Self { arch, params: p }
    }

    pub fn digest(&self) -> ParameterDigest {
        digest(&self.params)
    }

    /// One score per feature position, `[positions]`.
    pub fn scores(&self, g: &mut Graph<T>, b: &Bound, x: &Features<T>, yhat: Option<&[T]>) -> Result<Var> {
        let (local, n) = match (&self.arch, x) {
            (
                ExplainerArch::Text {
                    seq_len, vocab_size, ..
                },
                Features::Tokens(ids),
            ) => {
                if ids.len() != *seq_len {
                    return Err(Error::Shape(format!(
                        "sequence of length {}, explainer expects {seq_len}",
                        ids.len()
                    )));
                }
                if let Some(&t) = ids.iter().find(|&&t| t >= *vocab_size) {
                    return Err(Error::Shape(format!("token {t} outside vocabulary")));
                }
                let e = embed(g, b.get("embedding"), ids);
                let h = g.add(e, b.get("position"));
                let c = conv1d(g, b, "conv", h, 3, true);
                (g.relu(c), ids.len())
            }
            (ExplainerArch::Image { height, width, .. }, Features::Pixels(grid)) => {
                if grid.height != *height || grid.width != *width {
                    return Err(Error::Shape("image size differs from explainer".into()));
                }
                let n = grid.pixels.len();
                // Two channels: intensity and a learned per-pixel position bias.
                let px = g.constant(Tensor::matrix(n, 1, grid.pixels.clone()));
                let both = g.concat(&[px, b.get("position")]);
                let idx: Vec<Option<usize>> = (0..n).flat_map(|i| [Some(i), Some(n + i)]).collect();
                let input = g.gather(both, std::rc::Rc::new(idx), &[n, 2]);
                let (c, _) = conv2d(g, b, "conv", input, (*height, *width), 3, true);
                (g.relu(c), n)
            }
            _ => return Err(Error::Shape("input modality does not match the explainer".into())),
        };
        let global = g.max_over_rows(local);
        let mut query = g.matmul(global, b.get("global"));
        if self.arch.yhat_in_query() {
            let y = yhat.ok_or_else(|| Error::Data("explainer needs the black-box output".into()))?;
            if y.len() != 2 {
                return Err(Error::Shape(format!("y_hat of length {}", y.len())));
            }
            let yv = g.constant(Tensor::vector(y.to_vec()));
            let yq = g.matmul(yv, b.get("yhat"));
            query = g.add(query, yq);
        }
        let h = dense(g, b, "local", local);
        let h = g.add_row(h, query);
        let h = g.relu(h);
        let s = dense(g, b, "score", h);
        Ok(g.reshape(s, &[n]))
    }

    pub fn score_values(&self, x: &Features<T>, yhat: Option<&[T]>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let s = self.scores(&mut g, &b, x, yhat)?;
        Ok(g.value(s).data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Grid;

    #[test]
    fn one_score_per_position() {
        let e = Explainer::<f64>::new(ExplainerArch::text(30, 12, true), 1);
        let s = e
            .score_values(&Features::Tokens((6..18).collect()), Some(&[0.3, 0.7]))
            .unwrap();
        assert_eq!(s.len(), 12);
        let ei = Explainer::<f64>::new(ExplainerArch::image(6, 5, false), 1);
        let grid = Grid {
            height: 6,
            width: 5,
            pixels: (0..30).map(|i| i as f64 / 30.0).collect(),
        };
        assert_eq!(ei.score_values(&Features::Pixels(grid), None).unwrap().len(), 30);
    }

    #[test]
    fn yhat_is_ignored_without_injection() {
        let e = Explainer::<f64>::new(ExplainerArch::text(30, 12, false), 2);
        let x = Features::Tokens((6..18).collect());
        let a = e.score_values(&x, Some(&[0.9, 0.1])).unwrap();
        let b = e.score_values(&x, Some(&[0.1, 0.9])).unwrap();
        let c = e.score_values(&x, None).unwrap();
        for i in 0..12 {
            assert!((a[i] - b[i]).abs() <= 1e-9 && (a[i] - c[i]).abs() <= 1e-9);
        }
        let inj = Explainer::<f64>::new(ExplainerArch::text(30, 12, true), 2);
        assert!(inj.score_values(&x, None).is_err());
        let a = inj.score_values(&x, Some(&[0.9, 0.1])).unwrap();
        let b = inj.score_values(&x, Some(&[0.1, 0.9])).unwrap();
        assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-9));
    }
}
