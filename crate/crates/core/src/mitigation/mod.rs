//! Plain training, random-attention pretraining and mask-neutral instance
//! weighting, shared by the demo model and the explainer/approximator pair.

pub mod oracle;

use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{argmax, DemoSequence, Sample};
use crate::error::{Error, Result};
use crate::masking::{gumbel_noise, gumbel_topk_relaxed, hard_topk, sample_hard_mask, sample_soft_mask};
use crate::models::{
    check_loss, digest, stack_logits, Approximator, DemoAttentionModel, Explainer, MaskLabelEstimator, ParameterDigest,
};
use crate::nn::{Bound, Optimizer, OptimizerConfig, ParamSet};
use crate::rng::{stream, LabRng};
use crate::scalar::Scalar;

/// A model split into an attention part that produces masks and a
/// downstream part that classifies masked inputs.
pub trait AttentionPipeline<T: Scalar> {
    type Input;

    fn attention(&self) -> &ParamSet<T>;
    fn attention_mut(&mut self) -> &mut ParamSet<T>;
    fn downstream(&self) -> &ParamSet<T>;
    fn downstream_mut(&mut self) -> &mut ParamSet<T>;

    /// Label the downstream part is trained to reproduce.
    fn target(&self, input: &Self::Input) -> Result<usize>;

    /// Differentiable mask used during training.
    fn training_mask(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: &Self::Input,
        rng: &mut LabRng,
        temperature: f64,
    ) -> Result<Var>;

    /// Mask drawn completely at random, for pretraining.
    fn random_mask(&self, input: &Self::Input, rng: &mut LabRng) -> Vec<T>;

    fn downstream_logits(&self, g: &mut Graph<T>, b: &Bound, input: &Self::Input, mask: Var) -> Result<Var>;

    /// Deterministic mask used at evaluation time.
    fn inference_mask(&self, input: &Self::Input) -> Result<Vec<T>>;
}

/// A demo sequence with its true label.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoExample {
    pub sequence: DemoSequence,
    pub label: usize,
}

impl<T: Scalar> AttentionPipeline<T> for DemoAttentionModel<T> {
    type Input = DemoExample;

    fn attention(&self) -> &ParamSet<T> {
        &self.attention
    }

    fn attention_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.attention
    }

    fn downstream(&self) -> &ParamSet<T> {
        &self.downstream
    }

    fn downstream_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.downstream
    }

    fn target(&self, input: &DemoExample) -> Result<usize> {
        Ok(input.label)
    }

    fn training_mask(&self, g: &mut Graph<T>, b: &Bound, input: &DemoExample, _: &mut LabRng, _: f64) -> Result<Var> {
        self.validate(&input.sequence)?;
        Ok(self.attention_mask(g, b, &input.sequence))
    }

    fn random_mask(&self, _: &DemoExample, rng: &mut LabRng) -> Vec<T> {
        sample_soft_mask(self.arch.candidates, rng).into_inner()
    }

    fn downstream_logits(&self, g: &mut Graph<T>, b: &Bound, input: &DemoExample, mask: Var) -> Result<Var> {
        self.validate(&input.sequence)?;
        Ok(DemoAttentionModel::downstream_logits(self, g, b, &input.sequence, mask))
    }

    fn inference_mask(&self, input: &DemoExample) -> Result<Vec<T>> {
        Ok(self.forward(&input.sequence)?.1.into_inner())
    }
}

/// Explainer plus approximator: L2X-style hard attention with `k` selected
/// positions, relaxed by Gumbel top-k during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2xPair<T> {
    pub explainer: Explainer<T>,
    pub approximator: Approximator<T>,
    pub k: usize,
}

impl<T: Scalar> L2xPair<T> {
    pub fn new(explainer: Explainer<T>, approximator: Approximator<T>, k: usize) -> Result<Self> {
        let n = explainer.arch.positions();
        if n != approximator.positions() {
            return Err(Error::Shape(format!(
                "explainer has {n} positions, approximator {}",
                approximator.positions()
            )));
        }
        if k == 0 || k > n {
            return Err(Error::config("k", format!("must be in 1..={n}, got {k}")));
        }
        Ok(Self {
            explainer,
            approximator,
            k,
        })
    }

    /// Hard top-k selection from the explainer scores.
    pub fn select(&self, sample: &Sample<T>) -> Result<crate::masking::HardMask> {
        let scores = self
            .explainer
            .score_values(&sample.features, sample.blackbox_output.as_deref())?;
        hard_topk(&scores, self.k)
    }
}

impl<T: Scalar> AttentionPipeline<T> for L2xPair<T> {
    type Input = Sample<T>;

    fn attention(&self) -> &ParamSet<T> {
        &self.explainer.params
    }

    fn attention_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.explainer.params
    }

    fn downstream(&self) -> &ParamSet<T> {
        &self.approximator.params
    }

    fn downstream_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.approximator.params
    }

    fn target(&self, input: &Sample<T>) -> Result<usize> {
        input
            .blackbox_label()
            .ok_or_else(|| Error::Data("sample has no cached black-box output".into()))
    }

    fn training_mask(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: &Sample<T>,
        rng: &mut LabRng,
        temperature: f64,
    ) -> Result<Var> {
        let scores = self
            .explainer
            .scores(g, b, &input.features, input.blackbox_output.as_deref())?;
        let noise = gumbel_noise(rng, self.k, g.value(scores).numel());
        Ok(gumbel_topk_relaxed(g, scores, noise, temperature))
    }

    fn random_mask(&self, input: &Sample<T>, rng: &mut LabRng) -> Vec<T> {
        sample_hard_mask(input.features.positions(), self.k, rng).as_weights()
    }

    fn downstream_logits(&self, g: &mut Graph<T>, b: &Bound, input: &Sample<T>, mask: Var) -> Result<Var> {
        self.approximator.logits(g, b, &input.features, mask)
    }

    fn inference_mask(&self, input: &Sample<T>) -> Result<Vec<T>> {
        Ok(self.select(input)?.as_weights())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    /// Floor on `P(y | m)` before division.
    pub epsilon: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Rescale each batch to mean weight 1.
    pub normalize: bool,
    /// Replace every weight by 1; training then matches plain training.
    pub force_unit: bool,
    /// Estimator steps per main step.
    pub estimator_steps: usize,
    pub estimator_hidden: usize,
    pub estimator_optimizer: OptimizerConfig,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            min_weight: 0.1,
            max_weight: 10.0,
            normalize: true,
            force_unit: false,
            estimator_steps: 1,
            estimator_hidden: 16,
            estimator_optimizer: OptimizerConfig::default().with_lr(1e-2),
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("weighting.epsilon", "must lie in (0, 1)"));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= self.max_weight && self.max_weight.is_finite()) {
            return Err(Error::config(
                "weighting.min_weight",
                "need 0 < min_weight <= max_weight < inf",
            ));
        }
        if self.estimator_steps == 0 {
            return Err(Error::config("weighting.estimator_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Phase-1 epochs of pretraining, as a multiple of `epochs`.
    pub pretrain_factor: usize,
    /// Gumbel temperature, annealed linearly to `final_temperature` if set.
    pub temperature: f64,
    pub final_temperature: Option<f64>,
    pub weighting: WeightingConfig,
    pub seed: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            pretrain_factor: 3,
            temperature: 0.5,
            final_temperature: None,
            weighting: WeightingConfig::default(),
            seed: 0,
        }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, t) in [
            ("temperature", Some(self.temperature)),
            ("final_temperature", self.final_temperature),
        ] {
            if let Some(t) = t {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::config(field, format!("must be > 0, got {t}")));
                }
            }
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::config("optimizer.learning_rate", "must be > 0"));
        }
        self.weighting.validate()
    }

    fn temperature_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.final_temperature {
            Some(end) if epochs > 1 => {
                let t = epoch as f64 / (epochs - 1) as f64;
                self.temperature + (end - self.temperature) * t
            }
            _ => self.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub estimator_accuracy: Option<f64>,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigestRecord {
    pub phase: String,
    pub component: String,
    pub frozen: bool,
    pub before: ParameterDigest,
    pub after: ParameterDigest,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingPhaseLog {
    pub epochs: Vec<EpochRecord>,
    pub digests: Vec<DigestRecord>,
}

impl TrainingPhaseLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }

    fn now(&self) -> u64 {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        wall.max(self.epochs.last().map_or(0, |r| r.timestamp_ms))
    }

    /// One JSON record per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        for d in &self.digests {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Samples with their detached masks, labels and instance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedBatch<T> {
    pub indices: Vec<usize>,
    pub masks: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl<T> WeightedBatch<T> {
    pub fn validate(&self, normalized: bool) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Numeric("instance weights must be positive and finite".into()));
        }
        if normalized && !self.weights.is_empty() {
            let mean = self.weights.iter().sum::<f64>() / self.weights.len() as f64;
            if (mean - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("batch mean weight {mean}")));
            }
        }
        Ok(())
    }
}

/// `prior[y] / max(p(y | m), ε)` per sample, plus how many hit the floor.
pub fn raw_instance_weights(prior: [f64; 2], probs: &[Vec<f64>], labels: &[usize], epsilon: f64) -> (Vec<f64>, usize) {
    let mut floored = 0;
    let w = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            if p[y] < epsilon {
                floored += 1;
            }
            prior[y] / p[y].max(epsilon)
        })
        .collect();
    (w, floored)
}

pub fn clip_weights(w: &[f64], min: f64, max: f64) -> Vec<f64> {
    w.iter().map(|x| x.clamp(min, max)).collect()
}

pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().map(|x| x / mean).collect()
}

/// Raw weights, then clip, then optional batch-mean normalization.
pub fn compute_instance_weights<T: Scalar>(
    est: &MaskLabelEstimator<T>,
    batch: &[(Vec<T>, usize)],
    policy: &WeightingConfig,
) -> Result<Vec<f64>> {
    let probs = batch
        .iter()
        .map(|(m, _)| Ok(est.predict_proba(m)?.iter().map(|p| p.as_f64()).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let (raw, floored) = raw_instance_weights(est.prior(), &probs, &labels, policy.epsilon);
    if 2 * floored > batch.len() {
        log::warn!(
            "degenerate estimator: {floored} of {} samples hit the probability floor",
            batch.len()
        );
    }
    let clipped = clip_weights(&raw, policy.min_weight, policy.max_weight);
    let w = if policy.normalize {
        normalize_weights(&clipped)
    } else {
        clipped
    };
    if let Some(bad) = w.iter().find(|x| !x.is_finite()) {
        return Err(Error::Training {
            step: est.steps(),
            message: format!("instance weight became {bad}"),
        });
    }
    Ok(w)
}

/// Mean of `w_i * CE(logits_i, y_i)`, evaluated directly.
pub fn weighted_loss<T: Scalar>(logits: &[Vec<T>], labels: &[usize], weights: &[T]) -> Result<T> {
    if logits.len() != labels.len() || labels.len() != weights.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits, {} labels, {} weights",
            logits.len(),
            labels.len(),
            weights.len()
        )));
    }
    let mut total = T::zero();
    for ((row, &y), &w) in logits.iter().zip(labels).zip(weights) {
        if y >= row.len() {
            return Err(Error::Shape(format!("label {y} for {} classes", row.len())));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += w * (lse - row[y]);
    }
    Ok(total / T::lit(logits.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MaskSource {
    Learned,
    Random,
}

struct Phase {
    name: &'static str,
    /// Tag for the shuffle and mask streams; equal tags give equal draws.
    stream: &'static str,
    epochs: usize,
    masks: MaskSource,
    train_attention: bool,
    train_downstream: bool,
}

fn run_phase<T, P>(
    pipe: &mut P,
    data: &[P::Input],
    phase: &Phase,
    cfg: &MitigationConfig,
    mut estimator: Option<&mut MaskLabelEstimator<T>>,
    log: &mut TrainingPhaseLog,
) -> Result<()>
where
    T: Scalar,
    P: AttentionPipeline<T>,
{
    let before_att = digest(pipe.attention());
    let before_down = digest(pipe.downstream());
    let mut opt_att = Optimizer::new(cfg.optimizer.clone(), pipe.attention());
    let mut opt_down = Optimizer::new(cfg.optimizer.clone(), pipe.downstream());
    let mut shuffle = stream(cfg.seed, &format!("mitigation/{}/shuffle", phase.stream));
    let mut masks_rng = stream(cfg.seed, &format!("mitigation/{}/masks", phase.stream));
    let targets = data.iter().map(|x| pipe.target(x)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..phase.epochs {
        let temperature = cfg.temperature_at(epoch, phase.epochs);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut acc_sum, mut batches) = (0.0, 0.0, 0usize);
        let (mut w_min, mut w_max, mut w_sum, mut w_n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let ba = (phase.masks == MaskSource::Learned).then(|| pipe.attention().bind(&mut g, phase.train_attention));
            let bd = pipe.downstream().bind(&mut g, phase.train_downstream);
            let mut outs = Vec::with_capacity(chunk.len());
            let mut batch = WeightedBatch {
                indices: chunk.to_vec(),
                masks: Vec::with_capacity(chunk.len()),
                labels: chunk.iter().map(|&i| targets[i]).collect(),
                weights: Vec::new(),
            };
            for &i in chunk {
                let mask = match &ba {
                    Some(ba) => pipe.training_mask(&mut g, ba, &data[i], &mut masks_rng, temperature)?,
                    None => {
                        let m = pipe.random_mask(&data[i], &mut masks_rng);
                        g.constant(crate::tensor::Tensor::vector(m))
                    }
                };
                batch.masks.push(g.value(mask).data.clone());
                outs.push(pipe.downstream_logits(&mut g, &bd, &data[i], mask)?);
            }
            batch.weights = match estimator.as_deref_mut() {
                Some(est) => {
                    let pairs: Vec<(Vec<T>, usize)> =
                        batch.masks.iter().cloned().zip(batch.labels.iter().copied()).collect();
                    let mut acc = 0.0;
                    for s in 0..cfg.weighting.estimator_steps {
                        let a = est.update(&pairs)?;
                        if s == 0 {
                            acc = a;
                        }
                    }
                    acc_sum += acc;
                    let w = compute_instance_weights(est, &pairs, &cfg.weighting)?;
                    if cfg.weighting.force_unit {
                        vec![1.0; w.len()]
                    } else {
                        w
                    }
                }
                None => vec![1.0; chunk.len()],
            };
            batch.validate(cfg.weighting.normalize || estimator.is_none() || cfg.weighting.force_unit)?;
            for &w in &batch.weights {
                w_min = w_min.min(w);
                w_max = w_max.max(w);
                w_sum += w;
                w_n += 1;
            }
            let logits = stack_logits(&mut g, &outs);
            let weights: Vec<T> = batch.weights.iter().map(|&w| T::lit(w)).collect();
            let loss = g.weighted_cross_entropy(logits, &batch.labels, &weights);
            loss_sum += check_loss(&g, loss, step)?;
            batches += 1;
            let mut grads = g.backward(loss);
            if let (Some(ba), true) = (&ba, phase.train_attention) {
                opt_att.step(pipe.attention_mut(), &ba.collect(&mut grads));
            }
            if phase.train_downstream {
                opt_down.step(pipe.downstream_mut(), &bd.collect(&mut grads));
            }
            step += 1;
        }
        let n = batches.max(1) as f64;
        let timestamp_ms = log.now();
        log.epochs.push(EpochRecord {
            phase: phase.name.to_string(),
            epoch,
            loss: loss_sum / n,
            estimator_accuracy: estimator.as_ref().map(|_| acc_sum / n),
            weight_min: if w_n > 0 { w_min } else { 1.0 },
            weight_mean: if w_n > 0 { w_sum / w_n as f64 } else { 1.0 },
            weight_max: if w_n > 0 { w_max } else { 1.0 },
            timestamp_ms,
        });
    }

    for (component, frozen, before, after) in [
        (
            "attention",
            !phase.train_attention,
            before_att,
            digest(pipe.attention()),
        ),
        (
            "downstream",
            !phase.train_downstream,
            before_down,
            digest(pipe.downstream()),
        ),
    ] {
        if frozen && before != after {
            return Err(Error::FreezeViolation {
                component: component.to_string(),
                before: before.to_string(),
                after: after.to_string(),
            });
        }
        log.digests.push(DigestRecord {
            phase: phase.name.to_string(),
            component: component.to_string(),
            frozen,
            before,
            after,
        });
    }
    Ok(())
}

/// Joint training of both parts, no mitigation.
pub fn plain_train<T: Scalar, P: AttentionPipeline<T>>(
    pipe: &mut P,
    data: &[P::Input],
    cfg: &MitigationConfig,
) -> Result<TrainingPhaseLog> {
    cfg.validate()?;
    let mut log = TrainingPhaseLog::default();
    let phase = Phase {
        name: "plain",
        stream: "joint",
        epochs: cfg.epochs,
        masks: MaskSource::Learned,
        train_attention: true,
        train_downstream: true,
    };
    run_phase(pipe, data, &phase, cfg, None, &mut log)?;
    Ok(log)
}

/// Phase 1 fits the downstream part on random masks; phase 2 freezes it and
/// trains the attention part alone.
pub fn pretrain_random_attention<T: Scalar, P: AttentionPipeline<T>>(
    pipe: &mut P,
    data: &[P::Input],
    cfg: &MitigationConfig,
) -> Result<TrainingPhaseLog> {
    cfg.validate()?;
    let mut log = TrainingPhaseLog::default();
    let phase1 = Phase {
        name: "pretrain-downstream",
        stream: "pretrain-downstream",
        epochs: cfg.epochs * cfg.pretrain_factor,
        masks: MaskSource::Random,
        train_attention: false,
        train_downstream: true,
    };
    run_phase(pipe, data, &phase1, cfg, None, &mut log)?;
    let phase2 = Phase {
        name: "pretrain-attention",
        stream: "joint",
        epochs: cfg.epochs,
        masks: MaskSource::Learned,
        train_attention: true,
        train_downstream: false,
    };
    run_phase(pipe, data, &phase2, cfg, None, &mut log)?;
    Ok(log)
}

/// Alternates estimator steps on detached masks with weighted main steps.
/// `mask_dim` is the mask length the estimator reads.
pub fn mask_neutral_train<T: Scalar, P: AttentionPipeline<T>>(
    pipe: &mut P,
    data: &[P::Input],
    mask_dim: usize,
    cfg: &MitigationConfig,
) -> Result<(TrainingPhaseLog, MaskLabelEstimator<T>)> {
    cfg.validate()?;
    let mut est = MaskLabelEstimator::new(
        mask_dim,
        cfg.weighting.estimator_hidden,
        cfg.weighting.estimator_optimizer.clone(),
        cfg.seed,
    );
    let mut log = TrainingPhaseLog::default();
    let phase = Phase {
        name: "weighted",
        stream: "joint",
        epochs: cfg.epochs,
        masks: MaskSource::Learned,
        train_attention: true,
        train_downstream: true,
    };
    run_phase(pipe, data, &phase, cfg, Some(&mut est), &mut log)?;
    Ok((log, est))
}

/// Accuracy of the downstream part on its training targets under the
/// pipeline's inference masks.
pub fn pipeline_accuracy<T: Scalar, P: AttentionPipeline<T>>(pipe: &P, data: &[P::Input]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for x in data {
        let m = pipe.inference_mask(x)?;
        let mut g = Graph::new();
        let bd = pipe.downstream().bind(&mut g, false);
        let mv = g.constant(crate::tensor::Tensor::vector(m));
        let l = pipe.downstream_logits(&mut g, &bd, x, mv)?;
        if argmax(&g.value(l).data) == pipe.target(x)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
