//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::rng::stream;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-3;
/// Denominator floor so that two near-zero gradients compare as equal.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= MAX_RELATIVE_ERROR
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst_parameter = other.worst_parameter;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            checked: 0,
            max_relative_error: 0.0,
            worst_parameter: None,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares analytic and central-difference derivatives of the scalar `loss`
/// with respect to `count` randomly chosen entries of `params`.
pub fn gradcheck<F>(params: &ParamSet<f64>, count: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let l = loss(&mut g, &b)?;
    if g.value(l).numel() != 1 {
        return Err(Error::Shape("gradient check needs a scalar loss".into()));
    }
    let mut grads = g.backward(l);
    let analytic = b.collect(&mut grads);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = loss(&mut g, &b)?;
        Ok(g.value(l).data[0])
    };

    let total = params.scalar_count();
    let mut rng = stream(seed, "gradcheck/pick");
    let picks = sample(&mut rng, total, count.min(total));
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for flat in picks.iter() {
        let (ti, j) = params.locate(flat);
        let a = analytic[ti].as_ref().map_or(0.0, |t| t.data[j]);
        let x0 = params.scalar_at(flat);
        probe.set_scalar_at(flat, x0 + FD_STEP);
        let up = eval(&probe)?;
        probe.set_scalar_at(flat, x0 - FD_STEP);
        let down = eval(&probe)?;
        probe.set_scalar_at(flat, x0);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = Some(format!("{}[{j}] analytic {a:e} numeric {numeric:e}", names[ti]));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense, push_dense};
    use crate::tensor::Tensor;

    #[test]
    fn dense_tanh_passes() {
        let mut p = ParamSet::new();
        push_dense(&mut p, &mut stream(1, "p"), "l", 3, 2);
        let r = gradcheck(&p, 8, 2, |g, b| {
            let x = g.constant(Tensor::vector(vec![0.3, -1.2, 0.7]));
            let h = dense(g, b, "l", x);
            let h = g.tanh(h);
            Ok(g.sum(h))
        })
        .unwrap();
        assert_eq!(r.checked, 8);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![0.5, 0.25]));
        // Detaching the parameter hides its gradient from backward.
        let r = gradcheck(&p, 2, 0, |g, b| {
            let w = g.value(b.get("w")).clone();
            let c = g.constant(w);
            let s = g.mul(c, c);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(!r.passed());
    }
}
