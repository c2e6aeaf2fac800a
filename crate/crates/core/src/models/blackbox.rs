//! The classifier being explained.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{argmax, Features, Sample};
use crate::error::{Error, Result};
use crate::models::digest::{digest, ParameterDigest};
use crate::models::{check_loss, stack_logits, TrainConfig};
use crate::nn::{conv1d, conv2d, dense, embed, max_pool2d, push_dense, uniform, Bound, Optimizer, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything whose predictions can be explained.
pub trait BlackBox<T: Scalar> {
    /// Class probabilities.
    fn predict_proba(&self, x: &Features<T>) -> Result<Vec<T>>;

    fn predict(&self, x: &Features<T>) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Gradient of `p(class | x)` with respect to the input representation:
    /// `[positions, embed_dim]` for text, `[pixels, 1]` for images.
    fn input_gradient(&self, _x: &Features<T>, _class: usize) -> Result<Tensor<T>> {
        Err(Error::Unsupported("black box does not expose input gradients".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "kebab-case")]
pub enum BlackBoxArch {
    /// embedding -> conv1d (valid) + ReLU -> global max pool -> dense ReLU -> dense.
    Text {
        vocab_size: usize,
        embed_dim: usize,
        filters: usize,
        kernel: usize,
        hidden: usize,
    },
    /// conv2d + ReLU -> conv2d + ReLU -> 2x2 max pool -> dense ReLU -> dense.
    Image {
        height: usize,
        width: usize,
        conv1: usize,
        conv2: usize,
        hidden: usize,
    },
}

impl BlackBoxArch {
    pub fn text(vocab_size: usize) -> Self {
        BlackBoxArch::Text {
            vocab_size,
            embed_dim: 16,
            filters: 32,
            kernel: 3,
            hidden: 32,
        }
    }

    pub fn image(height: usize, width: usize) -> Self {
        BlackBoxArch::Image {
            height,
            width,
            conv1: 8,
            conv2: 16,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxClassifier<T> {
    pub arch: BlackBoxArch,
    pub params: ParamSet<T>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub digest: ParameterDigest,
}

impl<T: Scalar> BlackBoxClassifier<T> {
    pub fn new(arch: BlackBoxArch, seed: u64) -> Self {
        let mut rng = stream(seed, "blackbox/init");
        let mut p = ParamSet::new();
        match arch {
            BlackBoxArch::Text {
                vocab_size,
                embed_dim,
                filters,
                kernel,
                hidden,
            } => {
                p.push("embedding", uniform(&mut rng, &[vocab_size, embed_dim], 0.05));
                push_dense(&mut p, &mut rng, "conv", kernel * embed_dim, filters);
                push_dense(&mut p, &mut rng, "hidden", filters, hidden);
                push_dense(&mut p, &mut rng, "out", hidden, 2);
            }
            BlackBoxArch::Image {
                height,
                width,
                conv1,
                conv2,
                hidden,
            } => {
                push_dense(&mut p, &mut rng, "conv1", 9, conv1);
                push_dense(&mut p, &mut rng, "conv2", 9 * conv1, conv2);
                let flat = ((height - 4) / 2) * ((width - 4) / 2) * conv2;
                push_dense(&mut p, &mut rng, "hidden", flat, hidden);
                push_dense(&mut p, &mut rng, "out", hidden, 2);
            }
        }
        Self { arch, params: p, seed }
    }

    pub fn digest(&self) -> ParameterDigest {
        digest(&self.params)
    }

    /// Input representation node: embedded tokens `[len, e]` or pixels `[hw, 1]`.
    pub fn input_node(&self, g: &mut Graph<T>, b: &Bound, x: &Features<T>) -> Result<Var> {
        match (&self.arch, x) {
            (BlackBoxArch::Text { vocab_size, kernel, .. }, Features::Tokens(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&t| t >= *vocab_size) {
                    return Err(Error::Shape(format!("token {bad} outside vocabulary of {vocab_size}")));
                }
                if ids.len() < *kernel {
                    return Err(Error::Shape(format!("sequence shorter than kernel {kernel}")));
                }
                let table = b.get("embedding");
                Ok(embed(g, table, ids))
            }
            (BlackBoxArch::Image { height, width, .. }, Features::Pixels(grid)) => {
                if grid.height != *height || grid.width != *width {
                    return Err(Error::Shape(format!(
                        "image {}x{} but model expects {height}x{width}",
                        grid.height, grid.width
                    )));
                }
                Ok(g.constant(Tensor::matrix(grid.pixels.len(), 1, grid.pixels.clone())))
            }
            _ => Err(Error::Shape("input modality does not match the black box".into())),
        }
    }

    /// Logits from an input representation node.
    pub fn logits_from(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Var {
        match self.arch {
            BlackBoxArch::Text { kernel, .. } => {
                let c = conv1d(g, b, "conv", input, kernel, false);
                let c = g.relu(c);
                let pooled = g.max_over_rows(c);
                let h = dense(g, b, "hidden", pooled);
                let h = g.relu(h);
                dense(g, b, "out", h)
            }
            BlackBoxArch::Image { height, width, .. } => {
                let (c1, hw) = conv2d(g, b, "conv1", input, (height, width), 3, false);
                let c1 = g.relu(c1);
                let (c2, hw) = conv2d(g, b, "conv2", c1, hw, 3, false);
                let c2 = g.relu(c2);
                let (pooled, _) = max_pool2d(g, c2, hw);
                let n = g.value(pooled).numel();
                let flat = g.reshape(pooled, &[n]);
                let h = dense(g, b, "hidden", flat);
                let h = g.relu(h);
                dense(g, b, "out", h)
            }
        }
    }

    pub fn logits(&self, g: &mut Graph<T>, b: &Bound, x: &Features<T>) -> Result<Var> {
        let input = self.input_node(g, b, x)?;
        Ok(self.logits_from(g, b, input))
    }

    /// Minibatch training on true labels; returns accuracies and the final
    /// digest. Zero epochs leaves the parameters untouched.
    pub fn train(&mut self, train: &[Sample<T>], test: &[Sample<T>], cfg: &TrainConfig) -> Result<TrainReport> {
        let mut opt = Optimizer::new(cfg.optimizer.clone(), &self.params);
        let mut rng = stream(cfg.seed, "blackbox/shuffle");
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut g = Graph::new();
                let b = self.params.bind(&mut g, true);
                let mut outs = Vec::with_capacity(batch.len());
                for &i in batch {
                    outs.push(self.logits(&mut g, &b, &train[i].features)?);
                }
                let logits = stack_logits(&mut g, &outs);
                let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
                let loss = g.weighted_cross_entropy(logits, &labels, &vec![T::one(); batch.len()]);
                let lv = check_loss(&g, loss, step)?;
                total += lv * batch.len() as f64;
                let mut grads = g.backward(loss);
                opt.step(&mut self.params, &b.collect(&mut grads));
                step += 1;
            }
            losses.push(total / train.len().max(1) as f64);
        }
        Ok(TrainReport {
            epochs: cfg.epochs,
            losses,
            train_accuracy: self.accuracy(train)?,
            test_accuracy: self.accuracy(test)?,
            digest: self.digest(),
        })
    }

    pub fn accuracy(&self, samples: &[Sample<T>]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for s in samples {
            if self.predict(&s.features)? == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Caches `predict_proba` on every sample.
    pub fn annotate(&self, samples: &mut [Sample<T>]) -> Result<()> {
        for s in samples {
            s.blackbox_output = Some(self.predict_proba(&s.features)?);
        }
        Ok(())
    }
}

impl<T: Scalar> BlackBox<T> for BlackBoxClassifier<T> {
    fn predict_proba(&self, x: &Features<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let logits = self.logits(&mut g, &b, x)?;
        let p = g.softmax_rows(logits);
        Ok(g.value(p).data.clone())
    }

    fn input_gradient(&self, x: &Features<T>, class: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let value = {
            let node = self.input_node(&mut g, &b, x)?;
            g.value(node).clone()
        };
        let input = g.param(value);
        let logits = self.logits_from(&mut g, &b, input);
        let p = g.softmax_rows(logits);
        let picked = g.gather(p, std::rc::Rc::new(vec![Some(class)]), &[1]);
        let grads = g.backward(picked);
        Ok(grads
            .get(input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(input))))
    }
}
