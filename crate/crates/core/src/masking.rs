//! Soft and hard attention masks, Gumbel top-k relaxation and random masks.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{open_unit, stream, LabRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SIMPLEX_TOL: f64 = 1e-6;
const GUMBEL_CLAMP: f64 = 1e-12;

/// Non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask<T> {
    weights: Vec<T>,
}

impl<T: Scalar> SoftMask<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Numeric(
                "soft mask entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numeric(format!("soft mask sums to {total}")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn into_inner(self) -> Vec<T> {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Binary selection of exactly `k` positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMask {
    bits: Vec<bool>,
    k: usize,
}

impl HardMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let k = bits.iter().filter(|&&b| b).count();
        Self { bits, k }
    }

    pub fn from_selected(dim: usize, selected: &[usize]) -> Result<Self> {
        let mut bits = vec![false; dim];
        for &i in selected {
            if i >= dim || bits[i] {
                return Err(Error::Shape(format!("bad selected index {i} for dimension {dim}")));
            }
            bits[i] = true;
        }
        Ok(Self::from_bits(bits))
    }

    pub fn all(dim: usize) -> Self {
        Self::from_bits(vec![true; dim])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_weights<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub k: usize,
    pub noise: bool,
    pub seed: u64,
}

impl GumbelConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(
                "temperature",
                format!("must be > 0, got {}", self.temperature),
            ));
        }
        if self.k == 0 || self.k > dim {
            return Err(Error::config("k", format!("must be in 1..={dim}, got {}", self.k)));
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(scores: &[T]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("score {i} is {}", scores[i]))),
        None => Ok(()),
    }
}

/// `exp(s - max) / sum`.
pub fn softmax_mask<T: Scalar>(scores: &[T]) -> Result<SoftMask<T>> {
    if scores.is_empty() {
        return Err(Error::Shape("softmax over no scores".into()));
    }
    check_finite(scores)?;
    let mut w = scores.to_vec();
    softmax_in_place(&mut w);
    SoftMask::new(w)
}

/// `k` rows of Gumbel(0, 1) noise, `-ln(-ln u)` with `u` clamped away from
/// 0 and 1.
pub fn gumbel_noise<T: Scalar>(rng: &mut LabRng, k: usize, dim: usize) -> Tensor<T> {
    let data = (0..k * dim)
        .map(|_| {
            let u = open_unit(rng).clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            T::lit(-(-u.ln()).ln())
        })
        .collect();
    Tensor::matrix(k, dim, data)
}

/// Relaxed k-subset on the graph: elementwise max over `k` draws of
/// `softmax((scores + noise_i) / temperature)`. `noise` is `[k, dim]`, or
/// zeros when the perturbation is disabled.
pub fn gumbel_topk_relaxed<T: Scalar>(g: &mut Graph<T>, scores: Var, noise: Tensor<T>, temperature: f64) -> Var {
    let n = g.constant(noise);
    let perturbed = g.add_row(n, scores);
    let scaled = g.scale(perturbed, T::lit(1.0 / temperature));
    let draws = g.softmax_rows(scaled);
    g.max_over_rows(draws)
}

/// Value-level relaxed k-subset sample, reproducible from `cfg.seed`.
pub fn gumbel_topk_sample<T: Scalar>(scores: &[T], cfg: &GumbelConfig) -> Result<Vec<T>> {
    cfg.validate(scores.len())?;
    check_finite(scores)?;
    let mut rng = stream(cfg.seed, "masking/gumbel");
    Ok(gumbel_topk_with(scores, cfg, &mut rng))
}

/// Same as [`gumbel_topk_sample`] but drawing from a caller-owned stream.
pub fn gumbel_topk_with<T: Scalar>(scores: &[T], cfg: &GumbelConfig, rng: &mut LabRng) -> Vec<T> {
    let d = scores.len();
    let noise = if cfg.noise {
        gumbel_noise(rng, cfg.k, d)
    } else {
        Tensor::zeros(&[cfg.k, d])
    };
    let inv_t = T::lit(1.0 / cfg.temperature);
    let mut out = vec![T::zero(); d];
    for row in noise.data.chunks(d) {
        let mut draw: Vec<T> = row.iter().zip(scores).map(|(&n, &s)| (s + n) * inv_t).collect();
        softmax_in_place(&mut draw);
        for (o, x) in out.iter_mut().zip(draw) {
            *o = o.max(x);
        }
    }
    out
}

/// Positions of the `k` largest scores; ties go to the lower index.
pub fn hard_topk<T: Scalar>(scores: &[T], k: usize) -> Result<HardMask> {
    if k == 0 || k > scores.len() {
        return Err(Error::config("k", format!("must be in 1..={}, got {k}", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN").then(a.cmp(&b)));
    HardMask::from_selected(scores.len(), &order[..k])
}

/// Uniform draw from the simplex (symmetric Dirichlet with unit
/// concentration), by normalising exponential draws.
pub fn sample_soft_mask<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> SoftMask<T> {
    let e: Vec<f64> = (0..dim).map(|_| -open_unit(rng).ln()).collect();
    let total: f64 = e.iter().sum();
    SoftMask {
        weights: e.into_iter().map(|x| T::lit(x / total)).collect(),
    }
}

/// Uniform draw over all `k`-subsets of `0..dim`.
pub fn sample_hard_mask<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> HardMask {
    let chosen = sample_indices(rng, dim, k).into_vec();
    HardMask::from_selected(dim, &chosen).expect("distinct in-range indices")
}

pub fn random_soft_mask<T: Scalar>(dim: usize, seed: u64) -> SoftMask<T> {
    sample_soft_mask(dim, &mut stream(seed, "masking/random-soft"))
}

pub fn random_hard_mask(dim: usize, k: usize, seed: u64) -> Result<HardMask> {
    if k == 0 || k > dim {
        return Err(Error::config("k", format!("must be in 1..={dim}, got {k}")));
    }
    Ok(sample_hard_mask(dim, k, &mut stream(seed, "masking/random-hard")))
}

/// Scales row `i` of `x[n, e]` by `m[i]`: embeddings per token, or a
/// single-column pixel vector.
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, m: &[T]) -> Result<Tensor<T>> {
    let (n, e) = (x.rows(), x.cols());
    if x.shape.len() == 1 && x.numel() == m.len() {
        return Ok(Tensor::vector(x.data.iter().zip(m).map(|(&a, &b)| a * b).collect()));
    }
    if n != m.len() {
        return Err(Error::Shape(format!("{n} positions but mask of length {}", m.len())));
    }
    let mut out = x.clone();
    for (row, &w) in out.data.chunks_mut(e).zip(m) {
        for v in row {
            *v *= w;
        }
    }
    Ok(out)
}
