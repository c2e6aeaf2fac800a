//! Parameters, layer helpers and optimizers built on [`crate::autograd`].

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::std_normal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameters in registration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: Tensor<T>) {
        assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), value));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flat position `flat` across all tensors, in registration order.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if flat < t.numel() {
                return (i, flat);
            }
            flat -= t.numel();
        }
        panic!("flat parameter index out of range");
    }

    pub fn scalar_at(&self, flat: usize) -> T {
        let (i, j) = self.locate(flat);
        self.entries[i].1.data[j]
    }

    pub fn set_scalar_at(&mut self, flat: usize, v: T) {
        let (i, j) = self.locate(flat);
        self.entries[i].1.data[j] = v;
    }

    /// Places every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    pub fn convert<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.convert())).collect(),
        }
    }

    /// Canonical little-endian blob, in registration order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * T::BYTES);
        for (_, t) in &self.entries {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Overwrites values from a blob produced by [`ParamSet::to_le_bytes`].
    pub fn load_le_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let want = self.scalar_count() * T::BYTES;
        if bytes.len() != want {
            return Err(Error::Format(format!(
                "parameter blob has {} bytes, expected {want}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(T::BYTES);
        for (_, t) in &mut self.entries {
            for x in &mut t.data {
                *x = T::read_le(chunks.next().expect("length checked"));
            }
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamSet`].
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient tensors in registration order; `None` where a parameter did
    /// not influence the loss.
    pub fn collect<T: Scalar>(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(std * std_normal(rng))).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Registers `{name}.w` (glorot) and `{name}.b` (zeros).
pub fn push_dense<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    p.push(&format!("{name}.w"), glorot(rng, fan_in, fan_out));
    p.push(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn dense<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Var {
    let w = b.get(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    g.affine(x, w, bias)
}

/// Row lookup `table[ids]` for a `[V, e]` table.
pub fn embed<T: Scalar>(g: &mut Graph<T>, table: Var, ids: &[usize]) -> Var {
    g.select_rows(table, ids)
}

/// im2col for a `[len, channels]` sequence. With `same` padding the output
/// has `len` rows (zero padded); otherwise `len - width + 1`.
pub fn unfold1d(len: usize, channels: usize, width: usize, same: bool) -> (Rc<Vec<Option<usize>>>, usize) {
    let (out_len, offset) = if same {
        (len, (width / 2) as isize)
    } else {
        (len + 1 - width, 0)
    };
    let mut idx = Vec::with_capacity(out_len * width * channels);
    for t in 0..out_len {
        for o in 0..width {
            let src = t as isize + o as isize - offset;
            for c in 0..channels {
                idx.push((src >= 0 && (src as usize) < len).then(|| src as usize * channels + c));
            }
        }
    }
    (Rc::new(idx), out_len)
}

/// 1-D convolution of `x[len, C]` with kernel `w[width*C, F]`.
pub fn conv1d<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, width: usize, same: bool) -> Var {
    let (len, channels) = {
        let v = g.value(x);
        (v.rows(), v.cols())
    };
    let (idx, out_len) = unfold1d(len, channels, width, same);
    let cols = g.gather(x, idx, &[out_len, width * channels]);
    dense(g, b, name, cols)
}

/// im2col for an `[h*w, C]` image and a square kernel.
pub fn unfold2d(
    h: usize,
    w: usize,
    channels: usize,
    kernel: usize,
    same: bool,
) -> (Rc<Vec<Option<usize>>>, usize, usize) {
    let (oh, ow, offset) = if same {
        (h, w, (kernel / 2) as isize)
    } else {
        (h + 1 - kernel, w + 1 - kernel, 0)
    };
    let mut idx = Vec::with_capacity(oh * ow * kernel * kernel * channels);
    for r in 0..oh {
        for c in 0..ow {
            for dr in 0..kernel {
                for dc in 0..kernel {
                    let sr = r as isize + dr as isize - offset;
                    let sc = c as isize + dc as isize - offset;
                    let inside = sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w;
                    for ch in 0..channels {
                        idx.push(inside.then(|| (sr as usize * w + sc as usize) * channels + ch));
                    }
                }
            }
        }
    }
    (Rc::new(idx), oh, ow)
}

/// 2-D convolution; returns the output node and its spatial size.
pub fn conv2d<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    name: &str,
    x: Var,
    (h, w): (usize, usize),
    kernel: usize,
    same: bool,
) -> (Var, (usize, usize)) {
    let channels = g.value(x).numel() / (h * w);
    let (idx, oh, ow) = unfold2d(h, w, channels, kernel, same);
    let cols = g.gather(x, idx, &[oh * ow, kernel * kernel * channels]);
    (dense(g, b, name, cols), (oh, ow))
}

/// 2x2 stride-2 max pooling of an `[h*w, C]` map (odd edges dropped).
pub fn max_pool2d<T: Scalar>(g: &mut Graph<T>, x: Var, (h, w): (usize, usize)) -> (Var, (usize, usize)) {
    let channels = g.value(x).cols();
    let (oh, ow) = (h / 2, w / 2);
    let mut groups = Vec::with_capacity(oh * ow * channels);
    for r in 0..oh {
        for c in 0..ow {
            for ch in 0..channels {
                groups.push(
                    [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dr, dc)| ((2 * r + dr) * w + 2 * c + dc) * channels + ch)
                        .collect(),
                );
            }
        }
    }
    (g.group_max(x, &groups, &[oh * ow, channels]), (oh, ow))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Rmsprop,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// RMSprop decay, or momentum for SGD.
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    /// Keras RMSprop defaults.
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    state: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let state = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self { cfg, state }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        let lr = T::lit(self.cfg.learning_rate);
        let rho = T::lit(self.cfg.rho);
        let eps = T::lit(self.cfg.epsilon);
        for ((t, g), s) in params.tensors_mut().zip(grads).zip(&mut self.state) {
            let Some(g) = g else { continue };
            match self.cfg.kind {
                OptimizerKind::Rmsprop => {
                    for ((p, &gi), v) in t.data.iter_mut().zip(&g.data).zip(s.iter_mut()) {
                        *v = rho * *v + (T::one() - rho) * gi * gi;
                        *p -= lr * gi / (v.sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((p, &gi), v) in t.data.iter_mut().zip(&g.data).zip(s.iter_mut()) {
                        *v = rho * *v + gi;
                        *p -= lr * *v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn unfold1d_same_and_valid() {
        let (idx, n) = unfold1d(4, 1, 3, true);
        assert_eq!(n, 4);
        assert_eq!(&idx[..3], &[None, Some(0), Some(1)]);
        assert_eq!(&idx[9..], &[Some(2), Some(3), None]);
        let (idx, n) = unfold1d(4, 2, 3, false);
        assert_eq!(n, 2);
        assert_eq!(idx.len(), 2 * 6);
        assert_eq!(idx[6], Some(2));
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = stream(3, "conv");
        let mut p = ParamSet::<f64>::new();
        push_dense(&mut p, &mut rng, "c", 3 * 2, 4);
        p.get_mut("c.b").data = vec![0.1, -0.2, 0.3, 0.0];
        let x = normal::<f64, _>(&mut rng, &[5, 2], 1.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = conv1d(&mut g, &b, "c", xv, 3, false);
        let out = g.value(y).clone();
        let w = p.get("c.w");
        for t in 0..3 {
            for f in 0..4 {
                let mut s = p.get("c.b").data[f];
                for o in 0..3 {
                    for c in 0..2 {
                        s += x.data[(t + o) * 2 + c] * w.data[(o * 2 + c) * 4 + f];
                    }
                }
                assert!((out.data[t * 4 + f] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool2d_picks_block_max() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(16, 1, (0..16).map(|i| ((i * 7) % 16) as f64).collect()));
        let (y, hw) = max_pool2d(&mut g, x, (4, 4));
        assert_eq!(hw, (2, 2));
        let v = &g.value(y).data;
        let src: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        for r in 0..2 {
            for c in 0..2 {
                let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| src[(2 * r + a) * 4 + 2 * c + b])
                    .fold(f64::MIN, f64::max);
                assert_eq!(v[r * 2 + c], want);
            }
        }
    }

    #[test]
    fn blob_round_trip_and_length_check() {
        let mut rng = stream(5, "blob");
        let mut p = ParamSet::<f32>::new();
        push_dense(&mut p, &mut rng, "d", 3, 2);
        let bytes = p.to_le_bytes();
        assert_eq!(bytes.len(), 8 * 4);
        let mut q = p.clone();
        q.get_mut("d.w").data[0] = 9.0;
        q.load_le_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert!(q.load_le_bytes(&bytes[1..]).is_err());
    }

    #[test]
    fn rmsprop_descends_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        p.push("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Optimizer::new(OptimizerConfig::default().with_lr(0.05), &p);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let x = b.get("x");
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            let mut grads = g.backward(l);
            let gs = b.collect(&mut grads);
            opt.step(&mut p, &gs);
        }
        assert!(p.get("x").data.iter().all(|v| v.abs() < 0.1), "{:?}", p.get("x").data);
    }
}
