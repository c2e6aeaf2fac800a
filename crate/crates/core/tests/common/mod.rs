//! Checks shared by the acceptance suite and the focused integration tests.

#![allow(dead_code)]

use rand::Rng;
use shortcut_lab::autograd::{Graph, Var};
use shortcut_lab::data::{assemble_demo_input, EmbeddingTable, Features, Grid, Sample, Vocabulary};
use shortcut_lab::masking::{gumbel_noise, gumbel_topk_relaxed, gumbel_topk_with, GumbelConfig};
use shortcut_lab::models::gradcheck::relative_error;
use shortcut_lab::models::{
    gradcheck, stack_logits, Approximator, ApproximatorArch, BlackBox, BlackBoxArch, BlackBoxClassifier, Capacity,
    DemoArch, DemoAttentionModel, EncoderVariant, Explainer, ExplainerArch, GradCheckReport, MaskLabelEstimator,
};
use shortcut_lab::nn::{Bound, OptimizerConfig, ParamSet};
use shortcut_lab::rng::{std_normal, stream};
use shortcut_lab::tensor::Tensor;
use shortcut_lab::Result;

pub const VOCAB: usize = 30;
pub const SEQ: usize = 12;
pub const SIDE: usize = 8;

pub fn random_text(rng: &mut impl Rng) -> Features<f64> {
    Features::Tokens((0..SEQ).map(|_| rng.gen_range(2..VOCAB)).collect())
}

pub fn random_image(rng: &mut impl Rng) -> Features<f64> {
    Features::Pixels(Grid {
        height: SIDE,
        width: SIDE,
        pixels: (0..SIDE * SIDE).map(|_| rng.gen::<f64>()).collect(),
    })
}

/// Moves every parameter off its initial value so zero biases do not park
/// ReLU inputs on the kink.
pub fn jitter(params: &mut ParamSet<f64>, rng: &mut impl Rng) {
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += 0.1 * std_normal(rng);
        }
    }
}

fn ce(g: &mut Graph<f64>, outs: &[Var], labels: &[usize]) -> Var {
    let logits = stack_logits(g, outs);
    g.weighted_cross_entropy(logits, labels, &vec![1.0; labels.len()])
}

/// One finite-difference check per component, `params` entries at each of
/// `points` random inputs.
pub fn gradcheck_suite(params: usize, points: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut add = |name: &str, r: GradCheckReport| match out.iter_mut().find(|(n, _)| n == name) {
        Some((_, acc)) => acc.merge(r),
        None => out.push((name.to_string(), r)),
    };
    for p in 0..points as u64 {
        let mut rng = stream(p, "tests/gradcheck/inputs");
        let labels = [0usize, 1];

        for (name, arch, image) in [
            ("blackbox-text", BlackBoxArch::text(VOCAB), false),
            ("blackbox-image", BlackBoxArch::image(SIDE, SIDE), true),
        ] {
            let mut bb = BlackBoxClassifier::<f64>::new(arch, 10 + p);
            jitter(&mut bb.params, &mut rng);
            let xs: Vec<_> = (0..2)
                .map(|_| {
                    if image {
                        random_image(&mut rng)
                    } else {
                        random_text(&mut rng)
                    }
                })
                .collect();
            add(
                name,
                gradcheck(&bb.params, params, p, |g, b| {
                    let outs = xs.iter().map(|x| bb.logits(g, b, x)).collect::<Result<Vec<_>>>()?;
                    Ok(ce(g, &outs, &labels))
                })?,
            );
        }

        for variant in [EncoderVariant::PositionAware, EncoderVariant::SumPool] {
            let arch = DemoArch {
                variant,
                ..Default::default()
            };
            let emb = EmbeddingTable::random(VOCAB, arch.embed_dim, 1.0, 20 + p);
            let mut model = DemoAttentionModel::new(arch, emb, 30 + p);
            jitter(&mut model.attention, &mut rng);
            jitter(&mut model.downstream, &mut rng);
            let vocab = Vocabulary::synthetic(VOCAB)?;
            let seqs = (0..2)
                .map(|i| {
                    let toks: Vec<usize> = (0..SEQ).map(|_| rng.gen_range(6..VOCAB)).collect();
                    assemble_demo_input(&Sample::<f64>::text(toks, i), &vocab, 5)
                })
                .collect::<Result<Vec<_>>>()?;
            let forward = |g: &mut Graph<f64>, ba: &Bound, bd: &Bound| -> Result<Var> {
                let outs: Vec<Var> = seqs
                    .iter()
                    .map(|s| {
                        let m = model.attention_mask(g, ba, s);
                        model.downstream_logits(g, bd, s, m)
                    })
                    .collect();
                Ok(ce(g, &outs, &labels))
            };
            add(
                "demo-attention",
                gradcheck(&model.attention, params, p, |g, ba| {
                    let bd = model.downstream.bind(g, false);
                    forward(g, ba, &bd)
                })?,
            );
            add(
                &format!("demo-downstream-{}", variant.name()),
                gradcheck(&model.downstream, params, p, |g, bd| {
                    let ba = model.attention.bind(g, false);
                    forward(g, &ba, bd)
                })?,
            );
        }

        for (modality, image) in [("text", false), ("image", true)] {
            let (earch, positions) = if image {
                (ExplainerArch::image(SIDE, SIDE, true), SIDE * SIDE)
            } else {
                (ExplainerArch::text(VOCAB, SEQ, true), SEQ)
            };
            let mut explainer = Explainer::<f64>::new(earch, 40 + p);
            jitter(&mut explainer.params, &mut rng);
            let xs: Vec<_> = (0..2)
                .map(|_| {
                    if image {
                        random_image(&mut rng)
                    } else {
                        random_text(&mut rng)
                    }
                })
                .collect();
            let yhat = [0.3, 0.7];
            for capacity in [Capacity::Simple, Capacity::Powerful] {
                let aarch = if image {
                    ApproximatorArch::image(SIDE, SIDE, capacity)
                } else {
                    ApproximatorArch::text(VOCAB, SEQ, capacity)
                };
                let mut approx = Approximator::<f64>::new(aarch, 50 + p);
                jitter(&mut approx.params, &mut rng);
                let noise: Vec<Tensor<f64>> = (0..2).map(|_| gumbel_noise(&mut rng, 2, positions)).collect();
                let relaxed = |g: &mut Graph<f64>, be: &Bound, ba: &Bound| -> Result<Var> {
                    let mut outs = Vec::new();
                    for (x, n) in xs.iter().zip(&noise) {
                        let s = explainer.scores(g, be, x, Some(&yhat))?;
                        let m = gumbel_topk_relaxed(g, s, n.clone(), 0.5);
                        outs.push(approx.logits(g, ba, x, m)?);
                    }
                    Ok(ce(g, &outs, &labels))
                };
                if capacity == Capacity::Powerful {
                    add(
                        &format!("explainer-{modality}"),
                        gradcheck(&explainer.params, params, p, |g, be| {
                            let ba = approx.params.bind(g, false);
                            relaxed(g, be, &ba)
                        })?,
                    );
                }
                let name = format!(
                    "approximator-{modality}-{}",
                    if capacity == Capacity::Simple {
                        "simple"
                    } else {
                        "powerful"
                    }
                );
                add(
                    &name,
                    gradcheck(&approx.params, params, p, |g, ba| {
                        let be = explainer.params.bind(g, false);
                        relaxed(g, &be, ba)
                    })?,
                );
            }
        }

        let mut est = MaskLabelEstimator::<f64>::new(9, 16, OptimizerConfig::default(), 60 + p);
        jitter(&mut est.params, &mut rng);
        let masks: Vec<Vec<f64>> = (0..2).map(|_| (0..9).map(|_| rng.gen::<f64>()).collect()).collect();
        add(
            "estimator",
            gradcheck(&est.params, params, p, |g, b| {
                let outs: Vec<Var> = masks.iter().map(|m| est.logits(g, b, m)).collect();
                Ok(ce(g, &outs, &labels))
            })?,
        );
    }
    Ok(out)
}

fn class_probability(bb: &BlackBoxClassifier<f64>, input: Tensor<f64>, class: usize) -> f64 {
    let mut g = Graph::new();
    let b = bb.params.bind(&mut g, false);
    let x = g.constant(input);
    let logits = bb.logits_from(&mut g, &b, x);
    let p = g.softmax_rows(logits);
    g.value(p).data[class]
}

/// Largest relative error between the black box's input gradient and
/// central differences, over `probes` input entries per modality.
pub fn saliency_fd_error(probes: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, "tests/saliency");
    let mut worst: f64 = 0.0;
    for (arch, image) in [
        (BlackBoxArch::image(SIDE, SIDE), true),
        (BlackBoxArch::text(VOCAB), false),
    ] {
        let bb = BlackBoxClassifier::<f64>::new(arch, seed);
        let x = if image {
            random_image(&mut rng)
        } else {
            random_text(&mut rng)
        };
        let class = bb.predict(&x)?;
        let grad = bb.input_gradient(&x, class)?;
        let base = {
            let mut g = Graph::new();
            let b = bb.params.bind(&mut g, false);
            let node = bb.input_node(&mut g, &b, &x)?;
            g.value(node).clone()
        };
        let h = 1e-5;
        for _ in 0..probes {
            let i = rng.gen_range(0..base.numel());
            let mut up = base.clone();
            up.data[i] += h;
            let mut down = base.clone();
            down.data[i] -= h;
            let numeric = (class_probability(&bb, up, class) - class_probability(&bb, down, class)) / (2.0 * h);
            worst = worst.max(relative_error(grad.data[i], numeric));
        }
    }
    Ok(worst)
}

/// Total-variation distance between k=1 Gumbel selection frequencies and
/// `softmax(scores)`, over `draws` samples.
pub fn gumbel_tv(scores: &[f64], temperature: f64, draws: usize, seed: u64) -> f64 {
    let cfg = GumbelConfig {
        temperature,
        k: 1,
        noise: true,
        seed,
    };
    let mut rng = stream(seed, "tests/gumbel");
    let mut counts = vec![0usize; scores.len()];
    for _ in 0..draws {
        let m = gumbel_topk_with(scores, &cfg, &mut rng);
        let mut best = 0;
        for (i, v) in m.iter().enumerate() {
            if *v > m[best] {
                best = i;
            }
        }
        counts[best] += 1;
    }
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    0.5 * scores
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c as f64 / draws as f64 - s.exp() / z).abs())
        .sum::<f64>()
}
