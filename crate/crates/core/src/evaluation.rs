//! Post-hoc accuracy, default-token attention share, gradient saliency and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Features, Grid, Sample, PAD};
use crate::error::{Error, Result};
use crate::masking::{hard_topk, HardMask};
use crate::mitigation::{DemoExample, TrainingPhaseLog};
use crate::models::{BlackBox, DemoAttentionModel, MaskLabelEstimator};
use crate::nn::OptimizerConfig;
use crate::scalar::Scalar;

/// What unselected positions are replaced with.
#[derive(Clone, Debug, PartialEq)]
pub enum FillPolicy<T> {
    /// `<PAD>` for every unselected token.
    Pad,
    /// Per-pixel training mean for every unselected pixel.
    Baseline(Grid<T>),
}

/// Selected positions keep their content, the rest take the fill value.
pub fn fill_input<T: Scalar>(x: &Features<T>, mask: &HardMask, fill: &FillPolicy<T>) -> Result<Features<T>> {
    if mask.len() != x.positions() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} positions",
            mask.len(),
            x.positions()
        )));
    }
    match (x, fill) {
        (Features::Tokens(ids), FillPolicy::Pad) => Ok(Features::Tokens(
            ids.iter()
                .zip(mask.bits())
                .map(|(&t, &keep)| if keep { t } else { PAD })
                .collect(),
        )),
        (Features::Pixels(grid), FillPolicy::Baseline(base)) => {
            if base.pixels.len() != grid.pixels.len() {
                return Err(Error::Shape("baseline grid differs in size from the image".into()));
            }
            let pixels = grid
                .pixels
                .iter()
                .zip(&base.pixels)
                .zip(mask.bits())
                .map(|((&p, &b), &keep)| if keep { p } else { b })
                .collect();
            Ok(Features::Pixels(Grid {
                height: grid.height,
                width: grid.width,
                pixels,
            }))
        }
        (Features::Pixels(_), FillPolicy::Pad) => Err(Error::config("fill", "images need a pixel baseline grid")),
        (Features::Tokens(_), FillPolicy::Baseline(_)) => Err(Error::config("fill", "text is filled with <PAD>")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostHocReport {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub n_samples: usize,
    pub consistent: usize,
    pub post_hoc_accuracy: f64,
    pub seed: u64,
}

impl PostHocReport {
    pub fn labeled(mut self, method: &str, dataset: &str, seed: u64) -> Self {
        self.method = method.to_string();
        self.dataset = dataset.to_string();
        self.seed = seed;
        self
    }
}

/// Fraction of samples whose black-box argmax survives filling the
/// unselected positions.
pub fn post_hoc_accuracy<T: Scalar, B: BlackBox<T> + ?Sized>(
    bb: &B,
    samples: &[Sample<T>],
    masks: &[HardMask],
    fill: &FillPolicy<T>,
) -> Result<PostHocReport> {
    if samples.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} masks",
            samples.len(),
            masks.len()
        )));
    }
    let k = masks.first().map_or(0, HardMask::k);
    let mut consistent = 0;
    for (s, m) in samples.iter().zip(masks) {
        let filled = fill_input(&s.features, m, fill)?;
        if bb.predict(&s.features)? == bb.predict(&filled)? {
            consistent += 1;
        }
    }
    let n = samples.len();
    Ok(PostHocReport {
        method: String::new(),
        dataset: String::new(),
        k,
        n_samples: n,
        consistent,
        post_hoc_accuracy: if n == 0 { 0.0 } else { consistent as f64 / n as f64 },
        seed: 0,
    })
}

pub const DEFAULT_TOKENS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub method: String,
    pub variant: String,
    pub class: usize,
    /// Mean attention on A, B, C, D.
    pub shares: [f64; 4],
    pub total: f64,
    pub samples: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionShareTable {
    pub rows: Vec<ShareRow>,
}

impl AttentionShareTable {
    /// Per-class mean of the mask entries at positions 0..4.
    pub fn from_masks<T: Scalar>(method: &str, variant: &str, masks: &[Vec<T>], labels: &[usize]) -> Result<Self> {
        if masks.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} masks but {} labels",
                masks.len(),
                labels.len()
            )));
        }
        let mut rows = Vec::new();
        for class in 0..2 {
            // Running mean: constant masks give their value back exactly.
            let mut shares = [0.0; 4];
            let mut n = 0;
            for (m, _) in masks.iter().zip(labels).filter(|(_, &y)| y == class) {
                if m.len() < 4 {
                    return Err(Error::Shape(format!(
                        "mask of length {} has no default positions",
                        m.len()
                    )));
                }
                n += 1;
                for (s, v) in shares.iter_mut().zip(m) {
                    *s += (v.as_f64() - *s) / n as f64;
                }
            }
            if n == 0 {
                continue;
            }
            rows.push(ShareRow {
                method: method.to_string(),
                variant: variant.to_string(),
                class,
                shares,
                total: shares.iter().sum(),
                samples: n,
                runs: 1,
            });
        }
        Ok(Self { rows })
    }

    /// Row-wise mean over runs with the same (method, variant, class) keys.
    pub fn average(tables: &[AttentionShareTable]) -> Self {
        let mut acc: BTreeMap<(String, String, usize), ShareRow> = BTreeMap::new();
        for row in tables.iter().flat_map(|t| &t.rows) {
            let key = (row.method.clone(), row.variant.clone(), row.class);
            acc.entry(key)
                .and_modify(|a| {
                    for (s, v) in a.shares.iter_mut().zip(row.shares) {
                        *s += v;
                    }
                    a.samples += row.samples;
                    a.runs += row.runs;
                })
                .or_insert_with(|| row.clone());
        }
        let rows = acc
            .into_values()
            .map(|mut r| {
                let runs = r.runs as f64;
                r.shares = r.shares.map(|s| s / runs);
                r.total = r.shares.iter().sum();
                r
            })
            .collect();
        Self { rows }
    }

    pub fn total(&self, method: &str, class: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.class == class)
            .map(|r| r.total)
    }

    /// Absolute difference of the class totals for `method`.
    pub fn class_gap(&self, method: &str) -> Option<f64> {
        Some((self.total(method, 0)? - self.total(method, 1)?).abs())
    }
}

/// Default-token shares of a demo model over `examples`.
pub fn default_token_attention_share<T: Scalar>(
    model: &DemoAttentionModel<T>,
    examples: &[DemoExample],
    method: &str,
) -> Result<AttentionShareTable> {
    let mut masks = Vec::with_capacity(examples.len());
    for e in examples {
        masks.push(model.forward(&e.sequence)?.1.into_inner());
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    AttentionShareTable::from_masks(method, model.arch.variant.name(), &masks, &labels)
}

/// Per-position importance: L2 norm over the embedding of the gradient of
/// the predicted-class probability (absolute value for pixels).
pub fn saliency_importances<T: Scalar, B: BlackBox<T> + ?Sized>(bb: &B, x: &Features<T>) -> Result<Vec<T>> {
    let class = bb.predict(x)?;
    let grad = bb.input_gradient(x, class)?;
    let (n, e) = (grad.rows(), grad.cols());
    if n != x.positions() {
        return Err(Error::Shape(format!(
            "gradient has {n} rows for {} positions",
            x.positions()
        )));
    }
    Ok((0..n)
        .map(|i| grad.data[i * e..(i + 1) * e].iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect())
}

pub fn gradient_saliency<T: Scalar, B: BlackBox<T> + ?Sized>(bb: &B, sample: &Sample<T>, k: usize) -> Result<HardMask> {
    hard_topk(&saliency_importances(bb, &sample.features)?, k)
}

/// Held-out accuracy of a fresh `P(Y | M)` estimator: how much label
/// information the masks alone carry.
pub fn mask_label_predictability<T: Scalar>(
    train: &[(Vec<T>, usize)],
    test: &[(Vec<T>, usize)],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let dim = train
        .first()
        .map(|(m, _)| m.len())
        .ok_or_else(|| Error::Data("no masks to fit".into()))?;
    let mut est = MaskLabelEstimator::new(dim, 16, OptimizerConfig::default().with_lr(1e-2), seed);
    for i in 0..steps {
        let start = (i * 64) % train.len();
        let batch: Vec<_> = train
            .iter()
            .cycle()
            .skip(start)
            .take(64.min(train.len()))
            .cloned()
            .collect();
        est.update(&batch)?;
    }
    est.accuracy(test)
}

/// One text sample with its selection, for the highlighted dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub label: usize,
    pub prediction: usize,
    pub tokens: Vec<String>,
    pub selected: Vec<bool>,
}

pub fn render_highlight(h: &Highlight) -> String {
    let body: Vec<String> = h
        .tokens
        .iter()
        .zip(&h.selected)
        .map(|(t, &s)| if s { format!("[[{t}]]") } else { t.clone() })
        .collect();
    format!("label={} pred={}\t{}", h.label, h.prediction, body.join(" "))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub dataset: String,
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub post_hoc_accuracy: Vec<PostHocReport>,
    pub attention_shares: Vec<ShareRow>,
    pub digests: BTreeMap<String, String>,
    /// Named scalar diagnostics (training accuracy, share gaps, ...).
    pub metrics: BTreeMap<String, f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn median_of(xs: &[f64]) -> f64 {
    median(&mut xs.to_vec())
}

/// One row per (method, dataset): runs, mean, median, min, max.
pub fn post_hoc_csv(reports: &[PostHocReport]) -> String {
    let mut groups: BTreeMap<(String, String), (usize, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let e = groups
            .entry((r.method.clone(), r.dataset.clone()))
            .or_insert((r.k, Vec::new()));
        e.1.push(r.post_hoc_accuracy);
    }
    let mut out = String::from("method,dataset,k,runs,mean,median,min,max\n");
    for ((method, dataset), (k, mut accs)) in groups {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let med = median(&mut accs);
        let _ = writeln!(
            out,
            "{method},{dataset},{k},{},{mean:.6},{med:.6},{min:.6},{max:.6}",
            accs.len()
        );
    }
    out
}

pub fn shares_csv(rows: &[ShareRow]) -> String {
    let mut out = format!("method,variant,class,{},total,runs\n", DEFAULT_TOKENS.join(","));
    for r in rows {
        let shares: Vec<String> = r.shares.iter().map(|s| format!("{s:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{}",
            r.method,
            r.variant,
            r.class,
            shares.join(","),
            r.total,
            r.runs
        );
    }
    out
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `post_hoc.csv`, `attention_shares.csv`,
/// `highlights.txt` and, per named log, `log_<name>.jsonl` into `dir`.
pub fn emit_report(
    report: &RunReport,
    highlights: &[Highlight],
    logs: &[(String, TrainingPhaseLog)],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write(&dir.join("report.json"), &json)?;
    write(&dir.join("post_hoc.csv"), &post_hoc_csv(&report.post_hoc_accuracy))?;
    write(&dir.join("attention_shares.csv"), &shares_csv(&report.attention_shares))?;
    let mut text = String::new();
    for h in highlights {
        text.push_str(&render_highlight(h));
        text.push('\n');
    }
    write(&dir.join("highlights.txt"), &text)?;
    for (name, log) in logs {
        write(&dir.join(format!("log_{name}.jsonl")), &log.to_json_lines()?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Probability of class 1 is sigmoid of a per-token score sum.
    struct LinearText {
        score: Vec<f64>,
    }

    impl BlackBox<f64> for LinearText {
        fn predict_proba(&self, x: &Features<f64>) -> Result<Vec<f64>> {
            let s: f64 = x.tokens().unwrap().iter().map(|&t| self.score[t]).sum();
            let p = 1.0 / (1.0 + (-s).exp());
            Ok(vec![1.0 - p, p])
        }
    }

    struct Constant;

    impl BlackBox<f64> for Constant {
        fn predict_proba(&self, _: &Features<f64>) -> Result<Vec<f64>> {
            Ok(vec![0.3, 0.7])
        }

        fn input_gradient(&self, x: &Features<f64>, _: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(&[x.positions(), 1]))
        }
    }

    /// `p1 = sigmoid(Σ c_j x_j)` over pixels.
    struct LinearPixels {
        c: Vec<f64>,
    }

    impl BlackBox<f64> for LinearPixels {
        fn predict_proba(&self, x: &Features<f64>) -> Result<Vec<f64>> {
            let s: f64 = x.grid().unwrap().pixels.iter().zip(&self.c).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-s).exp());
            Ok(vec![1.0 - p, p])
        }

        fn input_gradient(&self, x: &Features<f64>, class: usize) -> Result<Tensor<f64>> {
            let p = self.predict_proba(x)?[1];
            let sign = if class == 1 { 1.0 } else { -1.0 };
            Ok(Tensor::matrix(
                self.c.len(),
                1,
                self.c.iter().map(|c| sign * p * (1.0 - p) * c).collect(),
            ))
        }
    }

    fn text(ids: Vec<usize>) -> Sample<f64> {
        Sample::text(ids, 0)
    }

    #[test]
    fn all_ones_and_constant_predictor_are_perfect() {
        let bb = LinearText {
            score: vec![0.0, 0.0, 2.0, -3.0, 0.5],
        };
        let samples = vec![text(vec![2, 3, 4]), text(vec![3, 3, 2]), text(vec![4, 2, 2])];
        let all: Vec<_> = (0..3).map(|_| HardMask::all(3)).collect();
        assert_eq!(
            post_hoc_accuracy(&bb, &samples, &all, &FillPolicy::Pad)
                .unwrap()
                .post_hoc_accuracy,
            1.0
        );
        let one: Vec<_> = (0..3).map(|i| HardMask::from_selected(3, &[i]).unwrap()).collect();
        assert_eq!(
            post_hoc_accuracy(&Constant, &samples, &one, &FillPolicy::Pad)
                .unwrap()
                .post_hoc_accuracy,
            1.0
        );
    }

    #[test]
    fn linear_black_box_matches_enumeration() {
        // Token scores: PAD 0, "a"=2 +2, "b"=3 -3, "c"=4 +0.5.
        let bb = LinearText {
            score: vec![0.0, 0.0, 2.0, -3.0, 0.5],
        };
        // Eight inputs, each keeping only slot 0. Worked by hand as
        // original sum -> class; kept sum -> class. A sum of 0 maps to
        // class 0 because p = 0.5 ties to the lower index.
        let cases: [([usize; 3], bool); 8] = [
            ([2, 2, 2], true),  // 6 -> 1; 2 -> 1
            ([2, 2, 3], true),  // 1 -> 1; 2 -> 1
            ([2, 3, 3], false), // -4 -> 0; 2 -> 1
            ([3, 3, 3], true),  // -9 -> 0; -3 -> 0
            ([3, 2, 2], false), // 1 -> 1; -3 -> 0
            ([4, 3, 2], false), // -0.5 -> 0; 0.5 -> 1
            ([4, 2, 4], true),  // 3 -> 1; 0.5 -> 1
            ([3, 4, 4], true),  // -2 -> 0; -3 -> 0
        ];
        let samples: Vec<_> = cases.iter().map(|(t, _)| text(t.to_vec())).collect();
        let masks: Vec<_> = (0..8).map(|_| HardMask::from_selected(3, &[0]).unwrap()).collect();
        let r = post_hoc_accuracy(&bb, &samples, &masks, &FillPolicy::Pad).unwrap();
        let expected = cases.iter().filter(|(_, ok)| *ok).count();
        assert_eq!(r.consistent, expected);
        assert_eq!(r.post_hoc_accuracy, expected as f64 / 8.0);
    }

    #[test]
    fn image_needs_baseline() {
        let grid = Grid {
            height: 1,
            width: 2,
            pixels: vec![0.2, 0.9],
        };
        let s = vec![Sample::image(grid.clone(), 0)];
        let m = vec![HardMask::from_selected(2, &[0]).unwrap()];
        let bb = LinearPixels { c: vec![1.0, -1.0] };
        assert!(matches!(
            post_hoc_accuracy(&bb, &s, &m, &FillPolicy::Pad),
            Err(Error::InvalidConfig { .. })
        ));
        let filled = fill_input(
            &s[0].features,
            &m[0],
            &FillPolicy::Baseline(Grid {
                pixels: vec![0.5, 0.5],
                ..grid
            }),
        )
        .unwrap();
        assert_eq!(filled.grid().unwrap().pixels, vec![0.2, 0.5]);
    }

    #[test]
    fn share_table_cases() {
        let uniform = vec![vec![1.0 / 9.0; 9]; 4];
        let t = AttentionShareTable::from_masks("plain", "sum-pool", &uniform, &[0, 1, 0, 1]).unwrap();
        for r in &t.rows {
            assert!(r.shares.iter().all(|&s| s == 1.0 / 9.0));
            assert_eq!(r.total, 4.0 / 9.0);
        }
        let mut onehot = vec![0.0; 9];
        onehot[0] = 1.0;
        let t = AttentionShareTable::from_masks("plain", "sum-pool", &vec![onehot; 3], &[0, 0, 1]).unwrap();
        assert!(t.rows.iter().all(|r| r.shares[0] == 1.0 && r.total == 1.0));
        assert_eq!(t.class_gap("plain"), Some(0.0));
    }

    #[test]
    fn share_table_matches_loop_oracle() {
        use crate::masking::random_soft_mask;
        let masks: Vec<Vec<f64>> = (0..50).map(|s| random_soft_mask::<f64>(9, s).into_inner()).collect();
        let labels: Vec<usize> = (0..50).map(|i| (i * 7 % 3 == 0) as usize).collect();
        let t = AttentionShareTable::from_masks("m", "v", &masks, &labels).unwrap();
        for r in &t.rows {
            let mut n = 0.0;
            let mut s = [0.0; 4];
            for i in 0..50 {
                if labels[i] == r.class {
                    n += 1.0;
                    for j in 0..4 {
                        s[j] += masks[i][j];
                    }
                }
            }
            for j in 0..4 {
                assert!((r.shares[j] - s[j] / n).abs() <= 1e-12);
            }
            assert!((r.total - r.shares.iter().sum::<f64>()).abs() <= 1e-9);
        }
        let avg = AttentionShareTable::average(&[t.clone(), t.clone()]);
        assert_eq!(avg.rows.len(), t.rows.len());
        assert!((avg.rows[0].total - t.rows[0].total).abs() < 1e-12);
        assert_eq!(avg.rows[0].runs, 2);
    }

    #[test]
    fn saliency_cases() {
        let s = Sample::image(
            Grid {
                height: 1,
                width: 4,
                pixels: vec![0.1, 0.2, 0.3, 0.4],
            },
            0,
        );
        assert_eq!(gradient_saliency(&Constant, &s, 2).unwrap().selected(), vec![0, 1]);
        let bb = LinearPixels {
            c: vec![0.5, -3.0, 1.0, 2.0],
        };
        assert_eq!(gradient_saliency(&bb, &s, 2).unwrap().selected(), vec![1, 3]);
        let no_grad = LinearText { score: vec![0.0; 5] };
        assert!(matches!(
            gradient_saliency(&no_grad, &text(vec![2, 3]), 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn report_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let empty = RunReport::default();
        emit_report(&empty, &[], &[], dir.path()).unwrap();
        let back: RunReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, empty);

        let mk = |m: &str, d: &str, a: f64, seed| PostHocReport {
            method: m.into(),
            dataset: d.into(),
            k: 2,
            n_samples: 10,
            consistent: (a * 10.0) as usize,
            post_hoc_accuracy: a,
            seed,
        };
        let report = RunReport {
            method: "all".into(),
            post_hoc_accuracy: vec![
                mk("plain", "synthetic", 0.5, 0),
                mk("plain", "synthetic", 0.7, 1),
                mk("weight", "synthetic", 0.9, 0),
                mk("plain", "other", 0.4, 0),
            ],
            ..Default::default()
        };
        let h = Highlight {
            label: 1,
            prediction: 1,
            tokens: vec!["x".into(), "y".into()],
            selected: vec![false, true],
        };
        emit_report(&report, &[h], &[], dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("post_hoc.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3);
        assert!(csv.contains("plain,synthetic,2,2,0.600000,0.600000"));
        let dump = fs::read_to_string(dir.path().join("highlights.txt")).unwrap();
        assert_eq!(dump, "label=1 pred=1\tx [[y]]\n");
        let back: RunReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
