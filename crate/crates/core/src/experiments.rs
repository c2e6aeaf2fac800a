//! End-to-end pipelines: the default-token demo and hard-attention
//! explanations of a trained black box, under each training method.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    assemble_demo_input, generate_shortcut_corpus, load_idx_images, pixel_baseline, Corpus, EmbeddingTable, Features,
    Sample, SignalPlacement, SyntheticCorpusSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    default_token_attention_share, gradient_saliency, mask_label_predictability, post_hoc_accuracy,
    AttentionShareTable, FillPolicy, Highlight, PostHocReport,
};
use crate::masking::HardMask;
use crate::mitigation::{
    mask_neutral_train, pipeline_accuracy, plain_train, pretrain_random_attention, AttentionPipeline, DemoExample,
    L2xPair, MitigationConfig, TrainingPhaseLog, WeightingConfig,
};
use crate::models::{
    Approximator, ApproximatorArch, BlackBox, BlackBoxArch, BlackBoxClassifier, Capacity, DemoArch, DemoAttentionModel,
    Explainer, ExplainerArch, TrainConfig, TrainReport,
};
use crate::nn::OptimizerConfig;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plain,
    Pretrain,
    Weight,
    /// Gradient saliency of the black box; explanations only.
    Gradient,
}

impl Method {
    pub const TRAINED: [Method; 3] = [Method::Plain, Method::Pretrain, Method::Weight];

    pub fn name(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Pretrain => "pretrain",
            Method::Weight => "weight",
            Method::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Method::Plain),
            "pretrain" => Ok(Method::Pretrain),
            "weight" => Ok(Method::Weight),
            "gradient" => Ok(Method::Gradient),
            other => Err(Error::config(
                "method",
                format!("unknown method `{other}`; expected plain, pretrain, weight or gradient"),
            )),
        }
    }
}

/// Trains `pipe` under `method`.
pub fn train_with<T: Scalar, P: AttentionPipeline<T>>(
    pipe: &mut P,
    data: &[P::Input],
    mask_dim: usize,
    method: Method,
    cfg: &MitigationConfig,
) -> Result<(TrainingPhaseLog, Option<f64>)> {
    match method {
        Method::Plain => Ok((plain_train(pipe, data, cfg)?, None)),
        Method::Pretrain => Ok((pretrain_random_attention(pipe, data, cfg)?, None)),
        Method::Weight => {
            let (log, _) = mask_neutral_train(pipe, data, mask_dim, cfg)?;
            let acc = log.epochs.last().and_then(|r| r.estimator_accuracy);
            Ok((log, acc))
        }
        Method::Gradient => Err(Error::config("method", "gradient saliency has no attention training")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub corpus: SyntheticCorpusSpec,
    pub arch: DemoArch,
    pub training: MitigationConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticCorpusSpec::default(),
            arch: DemoArch {
                embedding_std: 0.1,
                ..Default::default()
            },
            training: MitigationConfig {
                epochs: 25,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRun {
    pub method: Method,
    pub seed: u64,
    pub train_accuracy: f64,
    pub shares: AttentionShareTable,
    pub class_gap: f64,
    /// Held-out accuracy of predicting the label from the attention mask.
    pub mask_predictability: f64,
    pub estimator_accuracy: Option<f64>,
    pub embedding_digest: String,
    pub attention_digest: String,
    pub downstream_digest: String,
    #[serde(skip)]
    pub log: TrainingPhaseLog,
}

pub fn demo_examples<T: Scalar>(
    spec: &SyntheticCorpusSpec,
    samples: &[Sample<T>],
    window: usize,
) -> Result<Vec<DemoExample>> {
    let vocab = spec.vocabulary()?;
    samples
        .iter()
        .map(|s| {
            Ok(DemoExample {
                sequence: assemble_demo_input(s, &vocab, window)?,
                label: s.label,
            })
        })
        .collect()
}

/// Trains one demo model and measures its default-token attention.
pub fn run_demo<T: Scalar>(cfg: &DemoConfig, method: Method, seed: u64) -> Result<DemoRun> {
    let corpus: Corpus<T> = generate_shortcut_corpus(&cfg.corpus)?;
    let train = demo_examples(&cfg.corpus, &corpus.train, cfg.corpus.window_size)?;
    let emb = EmbeddingTable::random(
        cfg.corpus.vocab_size,
        cfg.arch.embed_dim,
        cfg.arch.embedding_std,
        derive_seed(seed, "demo/embeddings"),
    );
    let mut model = DemoAttentionModel::new(cfg.arch.clone(), emb, derive_seed(seed, "demo/model"));
    let emb_before = model.embedding_digest();
    let mut tcfg = cfg.training.clone();
    tcfg.seed = derive_seed(seed, "demo/train");
    let (log, estimator_accuracy) = train_with(&mut model, &train, cfg.arch.candidates, method, &tcfg)?;
    let emb_after = model.embedding_digest();
    if emb_before != emb_after {
        return Err(Error::FreezeViolation {
            component: "embeddings".into(),
            before: emb_before.to_string(),
            after: emb_after.to_string(),
        });
    }
    let shares = default_token_attention_share(&model, &train, method.name())?;
    let masks: Vec<(Vec<T>, usize)> = train
        .iter()
        .map(|e| Ok((model.inference_mask(e)?, e.label)))
        .collect::<Result<_>>()?;
    let half = masks.len() / 2;
    let mask_predictability = if half > 0 {
        mask_label_predictability(&masks[..half], &masks[half..], 300, derive_seed(seed, "demo/probe"))?
    } else {
        0.0
    };
    Ok(DemoRun {
        method,
        seed,
        train_accuracy: pipeline_accuracy(&model, &train)?,
        class_gap: shares.class_gap(method.name()).unwrap_or(0.0),
        shares,
        mask_predictability,
        estimator_accuracy,
        embedding_digest: emb_after.to_string(),
        attention_digest: crate::models::digest(&model.attention).to_string(),
        downstream_digest: crate::models::digest(&model.downstream).to_string(),
        log,
    })
}

/// IDX image/label pairs for a two-class image task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Two digits relabelled 0 and 1; omit when labels are already binary.
    #[serde(default)]
    pub classes: Option<[u8; 2]>,
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(SyntheticCorpusSpec),
    Idx(IdxSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticCorpusSpec::default())
    }
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Synthetic(s) => placement_name(s.placement).to_string(),
            DatasetSpec::Idx(s) => s.name.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic(s) => s.validate(),
            DatasetSpec::Idx(s) if s.name.is_empty() => Err(Error::config("dataset.name", "must not be empty")),
            DatasetSpec::Idx(_) => Ok(()),
        }
    }

    /// Geometry of a loaded corpus; synthetic text uses the declared vocabulary.
    pub fn geometry<T: Scalar>(&self, corpus: &Corpus<T>) -> Result<Geometry> {
        let g = Geometry::of(&corpus.train)?;
        if matches!(g, Geometry::Image { .. }) && Geometry::of(&corpus.test)? != g {
            return Err(Error::Shape("train and test images differ in size".into()));
        }
        Ok(match (self, g) {
            (DatasetSpec::Synthetic(s), Geometry::Text { seq_len, .. }) => Geometry::Text {
                vocab_size: s.vocab_size,
                seq_len,
            },
            _ => g,
        })
    }

    pub fn load<T: Scalar>(&self) -> Result<Corpus<T>> {
        match self {
            DatasetSpec::Synthetic(s) => generate_shortcut_corpus(s),
            DatasetSpec::Idx(s) => {
                let mut train = load_idx_images(&s.train_images, &s.train_labels, s.classes)?;
                let mut test = load_idx_images(&s.test_images, &s.test_labels, s.classes)?;
                if let Some(n) = s.max_train {
                    train.truncate(n);
                }
                if let Some(n) = s.max_test {
                    test.truncate(n);
                }
                Ok(Corpus { train, test })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub dataset: DatasetSpec,
    pub blackbox: TrainConfig,
    pub k: usize,
    pub yhat_in_query: bool,
    pub capacity: Capacity,
    pub training: MitigationConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            blackbox: TrainConfig {
                epochs: 5,
                batch_size: 32,
                optimizer: OptimizerConfig::default().with_lr(1e-2),
                seed: 0,
            },
            k: 2,
            yhat_in_query: true,
            capacity: Capacity::Powerful,
            // The explainer's masks shift quickly under Gumbel noise; a
            // faster estimator keeps the weights current.
            training: MitigationConfig {
                epochs: 10,
                weighting: WeightingConfig {
                    estimator_steps: 5,
                    estimator_optimizer: OptimizerConfig::default().with_lr(5e-2),
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            if self.k > s.sequence_length {
                return Err(Error::config(
                    "k",
                    format!(
                        "must be at most the sequence length {}, got {}",
                        s.sequence_length, self.k
                    ),
                ));
            }
        }
        if self.blackbox.epochs > 0 && self.blackbox.batch_size == 0 {
            return Err(Error::config("blackbox.batch_size", "must be positive"));
        }
        self.training.validate()
    }
}

/// Input geometry shared by the black box, explainer and approximator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "modality")]
pub enum Geometry {
    Text { vocab_size: usize, seq_len: usize },
    Image { height: usize, width: usize },
}

impl Geometry {
    pub fn of<T: Scalar>(samples: &[Sample<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let g = match &first.features {
            Features::Tokens(ids) => {
                let vocab_size = samples
                    .iter()
                    .filter_map(|s| s.features.tokens())
                    .flat_map(|t| t.iter().copied())
                    .max()
                    .unwrap_or(0)
                    + 1;
                Geometry::Text {
                    vocab_size,
                    seq_len: ids.len(),
                }
            }
            Features::Pixels(grid) => Geometry::Image {
                height: grid.height,
                width: grid.width,
            },
        };
        if samples.iter().any(|s| s.features.positions() != g.positions()) {
            return Err(Error::Shape("samples differ in length".into()));
        }
        Ok(g)
    }

    pub fn positions(self) -> usize {
        match self {
            Geometry::Text { seq_len, .. } => seq_len,
            Geometry::Image { height, width } => height * width,
        }
    }

    pub fn blackbox(self) -> BlackBoxArch {
        match self {
            Geometry::Text { vocab_size, .. } => BlackBoxArch::text(vocab_size),
            Geometry::Image { height, width } => BlackBoxArch::image(height, width),
        }
    }

    pub fn explainer(self, yhat_in_query: bool) -> ExplainerArch {
        match self {
            Geometry::Text { vocab_size, seq_len } => ExplainerArch::text(vocab_size, seq_len, yhat_in_query),
            Geometry::Image { height, width } => ExplainerArch::image(height, width, yhat_in_query),
        }
    }

    pub fn approximator(self, capacity: Capacity) -> ApproximatorArch {
        match self {
            Geometry::Text { vocab_size, seq_len } => ApproximatorArch::text(vocab_size, seq_len, capacity),
            Geometry::Image { height, width } => ApproximatorArch::image(height, width, capacity),
        }
    }
}

/// Loaded data and the black box to explain, with `ŷ` cached on every
/// sample.
pub struct PreparedData<T> {
    pub corpus: Corpus<T>,
    pub geometry: Geometry,
    pub blackbox: BlackBoxClassifier<T>,
    pub report: Option<TrainReport>,
}

impl<T: Scalar> PreparedData<T> {
    /// Loads the dataset and annotates it with an already trained black box.
    pub fn with_blackbox(cfg: &ExplainConfig, blackbox: BlackBoxClassifier<T>) -> Result<Self> {
        cfg.validate()?;
        let mut corpus: Corpus<T> = cfg.dataset.load()?;
        let geometry = cfg.dataset.geometry(&corpus)?;
        check_k(cfg.k, geometry)?;
        blackbox.annotate(&mut corpus.train)?;
        blackbox.annotate(&mut corpus.test)?;
        Ok(Self {
            corpus,
            geometry,
            blackbox,
            report: None,
        })
    }

    /// Pad for text; the mean training image for pixels.
    pub fn fill(&self) -> Result<FillPolicy<T>> {
        Ok(match self.geometry {
            Geometry::Text { .. } => FillPolicy::Pad,
            Geometry::Image { .. } => FillPolicy::Baseline(pixel_baseline(&self.corpus.train)?),
        })
    }
}

fn check_k(k: usize, g: Geometry) -> Result<()> {
    if k > g.positions() {
        return Err(Error::config(
            "k",
            format!("must be at most {} positions, got {k}", g.positions()),
        ));
    }
    Ok(())
}

pub fn prepare_blackbox<T: Scalar>(cfg: &ExplainConfig, seed: u64) -> Result<PreparedData<T>> {
    cfg.validate()?;
    let corpus: Corpus<T> = cfg.dataset.load()?;
    let geometry = cfg.dataset.geometry(&corpus)?;
    check_k(cfg.k, geometry)?;
    let mut bb = BlackBoxClassifier::new(geometry.blackbox(), derive_seed(seed, "blackbox"));
    let mut tc = cfg.blackbox.clone();
    tc.seed = derive_seed(seed, "blackbox/train");
    let report = bb.train(&corpus.train, &corpus.test, &tc)?;
    let mut data = PreparedData::with_blackbox(cfg, bb)?;
    data.report = Some(report);
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRun {
    pub method: Method,
    pub seed: u64,
    pub post_hoc: PostHocReport,
    pub approximator_fidelity: Option<f64>,
    pub estimator_accuracy: Option<f64>,
    pub digests: BTreeMap<String, String>,
    #[serde(skip)]
    pub masks: Vec<HardMask>,
    #[serde(skip)]
    pub log: TrainingPhaseLog,
}

/// Test-set selections under `method`: a trained explainer, or saliency.
pub struct Selections {
    pub masks: Vec<HardMask>,
    pub log: TrainingPhaseLog,
    /// Approximator accuracy on the test set.
    pub fidelity: Option<f64>,
    pub estimator_accuracy: Option<f64>,
    pub digests: BTreeMap<String, String>,
}

pub fn explain_masks<T: Scalar>(
    cfg: &ExplainConfig,
    data: &PreparedData<T>,
    method: Method,
    seed: u64,
) -> Result<Selections> {
    let test = &data.corpus.test;
    let mut digests = BTreeMap::new();
    digests.insert("blackbox".to_string(), data.blackbox.digest().to_string());
    if method == Method::Gradient {
        let masks = test
            .iter()
            .map(|s| gradient_saliency(&data.blackbox, s, cfg.k))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Selections {
            masks,
            log: TrainingPhaseLog::default(),
            fidelity: None,
            estimator_accuracy: None,
            digests,
        });
    }
    let g = data.geometry;
    let mut pair = L2xPair::new(
        Explainer::new(g.explainer(cfg.yhat_in_query), derive_seed(seed, "explain/explainer")),
        Approximator::new(g.approximator(cfg.capacity), derive_seed(seed, "explain/approximator")),
        cfg.k,
    )?;
    let mut tcfg = cfg.training.clone();
    tcfg.seed = derive_seed(seed, "explain/train");
    let (log, estimator_accuracy) = train_with(&mut pair, &data.corpus.train, g.positions(), method, &tcfg)?;
    digests.insert("explainer".to_string(), pair.explainer.digest().to_string());
    digests.insert("approximator".to_string(), pair.approximator.digest().to_string());
    let masks = test.iter().map(|s| pair.select(s)).collect::<Result<Vec<_>>>()?;
    let fidelity = pipeline_accuracy(&pair, test)?;
    Ok(Selections {
        masks,
        log,
        fidelity: Some(fidelity),
        estimator_accuracy,
        digests,
    })
}

/// Trains an explainer under `method` (or runs saliency) and scores its
/// test-set selections by post-hoc accuracy.
pub fn run_explain<T: Scalar>(
    cfg: &ExplainConfig,
    data: &PreparedData<T>,
    method: Method,
    seed: u64,
) -> Result<ExplainRun> {
    let Selections {
        masks,
        log,
        fidelity,
        estimator_accuracy,
        digests,
    } = explain_masks(cfg, data, method, seed)?;
    let post_hoc = post_hoc_accuracy(&data.blackbox, &data.corpus.test, &masks, &data.fill()?)?.labeled(
        method.name(),
        &cfg.dataset.name(),
        seed,
    );
    Ok(ExplainRun {
        method,
        seed,
        post_hoc,
        approximator_fidelity: fidelity,
        estimator_accuracy,
        digests,
        masks,
        log,
    })
}

pub fn placement_name(p: SignalPlacement) -> &'static str {
    match p {
        SignalPlacement::OutsideWindow => "synthetic-outside-window",
        SignalPlacement::InsideWindow => "synthetic-inside-window",
    }
}

/// Highlighted-token rendering of the first `limit` test selections.
pub fn highlights<T: Scalar>(
    spec: &SyntheticCorpusSpec,
    bb: &dyn BlackBox<T>,
    samples: &[Sample<T>],
    masks: &[HardMask],
    limit: usize,
) -> Result<Vec<Highlight>> {
    let vocab = spec.vocabulary()?;
    samples
        .iter()
        .zip(masks)
        .take(limit)
        .map(|(s, m)| {
            let ids = s
                .features
                .tokens()
                .ok_or_else(|| Error::Data("highlights need text samples".into()))?;
            Ok(Highlight {
                label: s.label,
                prediction: bb.predict(&s.features)?,
                tokens: ids.iter().map(|&t| vocab.token(t).to_string()).collect(),
                selected: m.bits().to_vec(),
            })
        })
        .collect()
}
