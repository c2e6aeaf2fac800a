//! Estimates `P(Y | M)` from the mask vector alone, plus a running prior.

use crate::autograd::Graph;
use crate::data::argmax;
use crate::error::{Error, Result};
use crate::models::{check_loss, stack_logits};
use crate::nn::{dense, push_dense, Bound, Optimizer, OptimizerConfig, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MaskLabelEstimator<T> {
    pub dim: usize,
    pub params: ParamSet<T>,
    counts: [u64; 2],
    opt: Optimizer<T>,
    steps: usize,
}

impl<T: Scalar> MaskLabelEstimator<T> {
    /// `dim -> hidden (tanh) -> 2`.
    pub fn new(dim: usize, hidden: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "estimator/init");
        let mut params = ParamSet::new();
        push_dense(&mut params, &mut rng, "hidden", dim, hidden);
        push_dense(&mut params, &mut rng, "out", hidden, 2);
        let opt = Optimizer::new(optimizer, &params);
        Self {
            dim,
            params,
            counts: [0, 0],
            opt,
            steps: 0,
        }
    }

    /// Running label frequency; uniform before any label is seen.
    pub fn prior(&self) -> [f64; 2] {
        let n = self.counts[0] + self.counts[1];
        if n == 0 {
            return [0.5, 0.5];
        }
        [self.counts[0] as f64 / n as f64, self.counts[1] as f64 / n as f64]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn logits(&self, g: &mut Graph<T>, b: &Bound, m: &[T]) -> crate::autograd::Var {
        let x = g.constant(Tensor::vector(m.to_vec()));
        let h = dense(g, b, "hidden", x);
        let h = g.tanh(h);
        dense(g, b, "out", h)
    }

    fn check(&self, m: &[T]) -> Result<()> {
        if m.len() != self.dim {
            return Err(Error::Shape(format!(
                "mask of length {}, estimator expects {}",
                m.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `P(y | m)` as a probability vector.
    pub fn predict_proba(&self, m: &[T]) -> Result<Vec<T>> {
        self.check(m)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let l = self.logits(&mut g, &b, m);
        let p = g.softmax_rows(l);
        Ok(g.value(p).data.clone())
    }

    /// One cross-entropy step on `(m, y)` pairs and a prior-count update.
    /// Returns the batch accuracy measured before the step.
    pub fn update(&mut self, batch: &[(Vec<T>, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        for (m, y) in batch {
            self.check(m)?;
            if *y > 1 {
                return Err(Error::Data(format!("label {y} is not binary")));
            }
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, true);
        let outs: Vec<_> = batch.iter().map(|(m, _)| self.logits(&mut g, &b, m)).collect();
        let logits = stack_logits(&mut g, &outs);
        let hits = batch
            .iter()
            .enumerate()
            .filter(|(i, (_, y))| argmax(&g.value(logits).data[2 * i..2 * i + 2]) == *y)
            .count();
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let loss = g.weighted_cross_entropy(logits, &labels, &vec![T::one(); batch.len()]);
        check_loss(&g, loss, self.steps)?;
        let mut grads = g.backward(loss);
        self.opt.step(&mut self.params, &b.collect(&mut grads));
        for y in labels {
            self.counts[y] += 1;
        }
        self.steps += 1;
        Ok(hits as f64 / batch.len() as f64)
    }

    pub fn accuracy(&self, batch: &[(Vec<T>, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for (m, y) in batch {
            if argmax(&self.predict_proba(m)?) == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / batch.len() as f64)
    }
}

/// `estimator_update`: one alternating step of the estimator.
pub fn estimator_update<T: Scalar>(est: &mut MaskLabelEstimator<T>, batch: &[(Vec<T>, usize)]) -> Result<f64> {
    est.update(batch)
}
