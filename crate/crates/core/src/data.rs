//! Samples, the synthetic shortcut corpus and external-format loaders.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{std_normal, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const DEFAULT_NAMES: [&str; 4] = ["A", "B", "C", "D"];

/// Token inventory with reserved ids: `<PAD>` = 0, `<UNK>` = 1, then the
/// default tokens `A`..`D`, then ordinary words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    n_default: usize,
}

impl Vocabulary {
    /// `size` tokens: the six reserved ones followed by `w6`, `w7`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::with_words(size.saturating_sub(2 + DEFAULT_NAMES.len()), |i| format!("w{}", i + 6))
    }

    /// Reserved tokens followed by the given words.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        Self::with_words(words.len(), |i| words[i].as_ref().to_string())
    }

    fn with_words(n: usize, word: impl Fn(usize) -> String) -> Result<Self> {
        let mut tokens: Vec<String> = vec!["<PAD>".into(), "<UNK>".into()];
        tokens.extend(DEFAULT_NAMES.iter().map(|s| s.to_string()));
        for i in 0..n {
            let w = word(i);
            if tokens.contains(&w) {
                return Err(Error::Data(format!("duplicate vocabulary token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Self {
            tokens,
            n_default: DEFAULT_NAMES.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<UNK>", String::as_str)
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn default_ids(&self) -> Vec<usize> {
        (2..2 + self.n_default).collect()
    }

    /// First id that is neither reserved nor a default token.
    pub fn first_word(&self) -> usize {
        2 + self.n_default
    }
}

/// Row-major grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Features<T> {
    Tokens(Vec<usize>),
    Pixels(Grid<T>),
}

impl<T: Scalar> Features<T> {
    /// Number of selectable positions (tokens or pixels).
    pub fn positions(&self) -> usize {
        match self {
            Features::Tokens(t) => t.len(),
            Features::Pixels(g) => g.pixels.len(),
        }
    }

    pub fn tokens(&self) -> Option<&[usize]> {
        match self {
            Features::Tokens(t) => Some(t),
            Features::Pixels(_) => None,
        }
    }

    pub fn grid(&self) -> Option<&Grid<T>> {
        match self {
            Features::Pixels(g) => Some(g),
            Features::Tokens(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<T> {
    pub features: Features<T>,
    pub label: usize,
    /// Class probabilities of the black box, once it is trained.
    pub blackbox_output: Option<Vec<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn text(tokens: Vec<usize>, label: usize) -> Self {
        Self {
            features: Features::Tokens(tokens),
            label,
            blackbox_output: None,
        }
    }

    pub fn image(grid: Grid<T>, label: usize) -> Self {
        Self {
            features: Features::Pixels(grid),
            label,
            blackbox_output: None,
        }
    }

    /// Argmax of the cached black-box output.
    pub fn blackbox_label(&self) -> Option<usize> {
        self.blackbox_output.as_deref().map(argmax)
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalPlacement {
    /// Signal token at a sentence position `>= window_size`.
    OutsideWindow,
    /// Signal token within the first `window_size` sentence positions.
    InsideWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub window_size: usize,
    pub n_default_tokens: usize,
    /// Signal token ids, indexed by class.
    pub signal_tokens: [Vec<usize>; 2],
    pub placement: SignalPlacement,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            sequence_length: 20,
            window_size: 5,
            n_default_tokens: 4,
            signal_tokens: [vec![6, 7], vec![8, 9]],
            placement: SignalPlacement::OutsideWindow,
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_default_tokens != DEFAULT_NAMES.len() {
            return bad(format!("n_default_tokens must be {}", DEFAULT_NAMES.len()));
        }
        if self.window_size == 0 || self.window_size + self.n_default_tokens >= self.sequence_length {
            return bad(format!(
                "window_size + n_default_tokens ({} + {}) must be below sequence_length {}",
                self.window_size, self.n_default_tokens, self.sequence_length
            ));
        }
        let first_word = 2 + self.n_default_tokens;
        for (class, set) in self.signal_tokens.iter().enumerate() {
            if set.is_empty() {
                return bad(format!("signal set for class {class} is empty"));
            }
            if let Some(&t) = set.iter().find(|&&t| t < first_word || t >= self.vocab_size) {
                return bad(format!(
                    "signal token {t} of class {class} is reserved or outside the vocabulary"
                ));
            }
        }
        if let Some(t) = self.signal_tokens[0].iter().find(|t| self.signal_tokens[1].contains(t)) {
            return bad(format!("signal token {t} appears in both class sets"));
        }
        if self.filler_tokens().is_empty() {
            return bad(format!(
                "vocab_size {} leaves no filler tokens after reserved and signal ids",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.vocab_size)
    }

    pub fn filler_tokens(&self) -> Vec<usize> {
        (2 + self.n_default_tokens..self.vocab_size)
            .filter(|t| !self.signal_tokens.iter().any(|s| s.contains(t)))
            .collect()
    }

    pub fn signal_class(&self, token: usize) -> Option<usize> {
        self.signal_tokens.iter().position(|s| s.contains(&token))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus<T> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

pub fn generate_shortcut_corpus<T: Scalar>(spec: &SyntheticCorpusSpec) -> Result<Corpus<T>> {
    spec.validate()?;
    let fillers = spec.filler_tokens();
    let make = |n: usize, tag: &str| {
        let mut rng = stream(spec.seed, tag);
        let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|y| {
                let mut tokens: Vec<usize> = (0..spec.sequence_length)
                    .map(|_| fillers[rng.gen_range(0..fillers.len())])
                    .collect();
                let set = &spec.signal_tokens[y];
                let signal = set[rng.gen_range(0..set.len())];
                let pos = match spec.placement {
                    SignalPlacement::OutsideWindow => rng.gen_range(spec.window_size..spec.sequence_length),
                    SignalPlacement::InsideWindow => rng.gen_range(0..spec.window_size),
                };
                tokens[pos] = signal;
                Sample::text(tokens, y)
            })
            .collect::<Vec<_>>()
    };
    Ok(Corpus {
        train: make(spec.n_train, "corpus/train"),
        test: make(spec.n_test, "corpus/test"),
    })
}

/// Token layout for the attention demo: default tokens first, then the
/// full sentence. Attention may only land on the defaults and the first
/// `window` sentence tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoSequence {
    pub tokens: Vec<usize>,
    pub candidates: Vec<usize>,
}

pub fn assemble_demo_input<T: Scalar>(sample: &Sample<T>, vocab: &Vocabulary, window: usize) -> Result<DemoSequence> {
    let sentence = sample
        .features
        .tokens()
        .ok_or_else(|| Error::Data("demo input needs a text sample".into()))?;
    if sentence.len() < window {
        return Err(Error::Shape(format!(
            "sentence of length {} is shorter than the attention window {window}",
            sentence.len()
        )));
    }
    let defaults = vocab.default_ids();
    let mut tokens = defaults.clone();
    tokens.extend_from_slice(sentence);
    Ok(DemoSequence {
        tokens,
        candidates: (0..defaults.len() + window).collect(),
    })
}

/// Fixed or trainable `[|V|, e]` embedding rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable<T> {
    pub rows: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn random(vocab_size: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = stream(seed, "embedding/random");
        Self {
            rows: crate::nn::normal(&mut rng, &[vocab_size, dim], std),
            trainable: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, id: usize) -> &[T] {
        let e = self.dim();
        &self.rows.data[id * e..(id + 1) * e]
    }
}

/// Reads `token v1 v2 ...` lines. Vocabulary entries missing from the file
/// get seeded normal rows with the per-dimension spread of the file rows.
pub fn load_embedding_text<T: Scalar>(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    let mut order: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "line {}: dimension {} differs from {d}",
                    lineno + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        order.push(values.clone());
        found.insert(token.to_string(), values);
    }
    let dim = dim
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format("no embedding rows".into()))?;

    let n = order.len() as f64;
    let stds: Vec<f64> = (0..dim)
        .map(|j| {
            let mean = order.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = order.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd.is_finite() && sd > 0.0 {
                sd
            } else {
                1.0 / (dim as f64).sqrt()
            }
        })
        .collect();

    let mut rng = stream(seed, "embedding/fallback");
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for token in vocab.tokens() {
        match found.get(token) {
            Some(v) => data.extend(v.iter().map(|&x| T::lit(x))),
            None => data.extend(stds.iter().map(|&sd| T::lit(sd * std_normal(&mut rng)))),
        }
    }
    Ok(EmbeddingTable {
        rows: Tensor::matrix(vocab.len(), dim, data),
        trainable: false,
    })
}

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Decodes an IDX image/label pair. With `classes = Some([a, b])` only those
/// digits are kept and relabelled 0 and 1; without a filter the labels must
/// already be binary.
pub fn load_idx_images<T: Scalar>(images: &Path, labels: &Path, classes: Option<[u8; 2]>) -> Result<Vec<Sample<T>>> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode_idx(&img, &lab, classes)
}

pub fn decode_idx<T: Scalar>(img: &[u8], lab: &[u8], classes: Option<[u8; 2]>) -> Result<Vec<Sample<T>>> {
    let magic = read_u32(img, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image magic {magic}, expected {IDX_IMAGES}")));
    }
    let magic = read_u32(lab, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label magic {magic}, expected {IDX_LABELS}")));
    }
    let count = read_u32(img, 4)? as usize;
    let (h, w) = (read_u32(img, 8)? as usize, read_u32(img, 12)? as usize);
    let lcount = read_u32(lab, 4)? as usize;
    if lcount != count {
        return Err(Error::Format(format!("{count} images but {lcount} labels")));
    }
    let body = &img[16..];
    if body.len() != count * h * w || lab.len() != 8 + count {
        return Err(Error::Format("IDX payload length does not match header".into()));
    }
    let scale = T::lit(1.0 / 255.0);
    let mut out = Vec::new();
    for (i, &digit) in lab[8..].iter().enumerate() {
        let label = match classes {
            Some([a, _]) if digit == a => 0,
            Some([a, b]) if digit == b && a != b => 1,
            Some(_) => continue,
            None if digit <= 1 => digit as usize,
            None => {
                return Err(Error::Data(format!(
                    "label {digit} is not binary; pass a two-class filter"
                )))
            }
        };
        let pixels = body[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|&b| T::lit(b as f64) * scale)
            .collect();
        out.push(Sample::image(
            Grid {
                height: h,
                width: w,
                pixels,
            },
            label,
        ));
    }
    if let Some(missing) = (0..2).find(|c| !out.iter().any(|s| s.label == *c)) {
        return Err(Error::Data(format!("class {missing} has no samples after filtering")));
    }
    Ok(out)
}

/// Encodes images (bytes 0..=255) and labels as an IDX pair.
pub fn encode_idx(h: usize, w: usize, images: &[Vec<u8>], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES, images.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        assert_eq!(im.len(), h * w);
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Per-pixel mean image of the training set.
pub fn pixel_baseline<T: Scalar>(train: &[Sample<T>]) -> Result<Grid<T>> {
    let first = train
        .first()
        .ok_or_else(|| Error::Data("pixel baseline of an empty set".into()))?
        .features
        .grid()
        .ok_or_else(|| Error::Data("pixel baseline needs image samples".into()))?;
    let (h, w) = (first.height, first.width);
    let mut acc = vec![T::zero(); h * w];
    for s in train {
        let g = s
            .features
            .grid()
            .filter(|g| g.height == h && g.width == w)
            .ok_or_else(|| Error::Data("image sizes differ".into()))?;
        for (a, &p) in acc.iter_mut().zip(&g.pixels) {
            *a += p;
        }
    }
    let n = T::lit(train.len() as f64);
    Ok(Grid {
        height: h,
        width: w,
        pixels: acc.into_iter().map(|a| a / n).collect(),
    })
}

/// One record per line: label, tab, space-separated token ids.
pub fn write_corpus<T: Scalar>(path: &Path, samples: &[Sample<T>]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let tokens = s
            .features
            .tokens()
            .ok_or_else(|| Error::Data("only text corpora are persisted as records".into()))?;
        let ids: Vec<String> = tokens.iter().map(usize::to_string).collect();
        out.push_str(&format!("{}\t{}\n", s.label, ids.join(" ")));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_corpus<T: Scalar>(path: &Path) -> Result<Vec<Sample<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, ids) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", i + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: label: {e}", i + 1)))?;
            if label > 1 {
                return Err(Error::Format(format!("line {}: label {label} is not binary", i + 1)));
            }
            let tokens = ids
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|e| Error::Format(format!("line {}: token: {e}", i + 1)))?;
            Ok(Sample::text(tokens, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(placement: SignalPlacement, n_train: usize, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            placement,
            n_train,
            n_test: 10,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn outside_window_places_signal_late() {
        let s = spec(SignalPlacement::OutsideWindow, 4, 7);
        let c = generate_shortcut_corpus::<f64>(&s).unwrap();
        assert_eq!(c.train.len(), 4);
        for sample in &c.train {
            let toks = sample.features.tokens().unwrap();
            let signals: Vec<(usize, usize)> = toks
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| s.signal_class(t).map(|c| (i, c)))
                .collect();
            assert_eq!(signals.len(), 1);
            assert!(signals[0].0 >= 5);
            assert_eq!(signals[0].1, sample.label);
        }
    }

    #[test]
    fn inside_window_is_balanced() {
        let c = generate_shortcut_corpus::<f64>(&spec(SignalPlacement::InsideWindow, 1000, 3)).unwrap();
        let ones = c.train.iter().filter(|s| s.label == 1).count() as f64 / 1000.0;
        assert!((0.49..=0.51).contains(&ones), "{ones}");
        for s in &c.train {
            let toks = s.features.tokens().unwrap();
            let pos = toks.iter().position(|&t| (6..=9).contains(&t)).unwrap();
            assert!(pos < 5);
        }
    }

    #[test]
    fn same_spec_same_corpus() {
        let s = spec(SignalPlacement::OutsideWindow, 50, 11);
        assert_eq!(
            generate_shortcut_corpus::<f64>(&s).unwrap(),
            generate_shortcut_corpus::<f64>(&s).unwrap()
        );
        let other = spec(SignalPlacement::OutsideWindow, 50, 12);
        assert_ne!(
            generate_shortcut_corpus::<f64>(&s).unwrap().train,
            generate_shortcut_corpus::<f64>(&other).unwrap().train
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = SyntheticCorpusSpec {
            signal_tokens: [vec![6, 7], vec![7, 8]],
            ..Default::default()
        };
        assert!(matches!(
            generate_shortcut_corpus::<f64>(&s),
            Err(Error::InvalidSpec(_))
        ));
        let s = SyntheticCorpusSpec {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let s = SyntheticCorpusSpec {
            window_size: 16,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn demo_layout() {
        let vocab = Vocabulary::synthetic(100).unwrap();
        let a = Sample::<f64>::text((10..30).collect(), 0);
        let b = Sample::<f64>::text((40..60).collect(), 1);
        let da = assemble_demo_input(&a, &vocab, 5).unwrap();
        let db = assemble_demo_input(&b, &vocab, 5).unwrap();
        assert_eq!(da.tokens.len(), 24);
        assert_eq!(da.candidates, (0..9).collect::<Vec<_>>());
        assert_eq!(da.tokens[..4], db.tokens[..4]);
        assert_eq!(&da.tokens[4..], a.features.tokens().unwrap());
        let img = Sample::image(
            Grid {
                height: 1,
                width: 1,
                pixels: vec![0.0f64],
            },
            0,
        );
        assert!(assemble_demo_input(&img, &vocab, 5).is_err());
    }

    #[test]
    fn embedding_text_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "good 0.1 0.2\nbad 0.3 0.4\n").unwrap();
        let vocab = Vocabulary::from_words(&["good", "bad", "meh"]).unwrap();
        let t = load_embedding_text::<f64>(&path, &vocab, 1).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.rows.rows(), vocab.len());
        assert_eq!(t.row(vocab.id("good")), &[0.1, 0.2]);
        assert_eq!(t.row(vocab.id("bad")), &[0.3, 0.4]);
        assert!(!t.trainable);
        let again = load_embedding_text::<f64>(&path, &vocab, 1).unwrap();
        assert_eq!(t, again);

        let none = Vocabulary::from_words(&["x", "y"]).unwrap();
        let r = load_embedding_text::<f64>(&path, &none, 1).unwrap();
        assert_eq!(r.dim(), 2);
        assert_eq!(r.rows.rows(), none.len());

        fs::write(&path, "good 0.1 0.2\nbad 0.3\n").unwrap();
        assert!(matches!(
            load_embedding_text::<f64>(&path, &vocab, 1),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn idx_hand_decoded_fixture() {
        // Two 2x2 records: digits 3 and 8.
        let (img, lab) = encode_idx(2, 2, &[vec![0, 255, 51, 102], vec![255, 0, 0, 0]], &[3, 8]);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let samples = decode_idx::<f64>(&img, &lab, Some([3, 8])).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].features.grid().unwrap().pixels, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(samples[1].features.grid().unwrap().pixels, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!((samples[0].label, samples[1].label), (0, 1));
    }

    #[test]
    fn idx_filter_and_errors() {
        let imgs: Vec<Vec<u8>> = (0..10)
            .map(|i| vec![0u8; 4].into_iter().map(|_| i as u8).collect())
            .collect();
        let labels = [3u8, 1, 8, 0, 3, 5, 8, 2, 7, 9];
        let (img, lab) = encode_idx(2, 2, &imgs, &labels);
        let s = decode_idx::<f64>(&img, &lab, Some([3, 8])).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|x| x.label <= 1));
        let (zimg, zlab) = encode_idx(2, 2, &[vec![0; 4], vec![0; 4]], &[0, 1]);
        let z = decode_idx::<f64>(&zimg, &zlab, None).unwrap();
        assert!(z[0].features.grid().unwrap().pixels.iter().all(|&p| p == 0.0));

        let mut bad = img.clone();
        bad[3] = 4;
        assert!(matches!(
            decode_idx::<f64>(&bad, &lab, Some([3, 8])),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_idx::<f64>(&img, &lab, Some([3, 4])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn baseline_means() {
        let g = |v: f64| {
            Sample::image(
                Grid {
                    height: 2,
                    width: 2,
                    pixels: vec![v; 4],
                },
                0,
            )
        };
        assert_eq!(pixel_baseline(&[g(0.0), g(1.0)]).unwrap().pixels, vec![0.5; 4]);
        assert_eq!(pixel_baseline(&[g(0.25)]).unwrap().pixels, vec![0.25; 4]);
        assert!(pixel_baseline::<f64>(&[]).is_err());
    }

    #[test]
    fn corpus_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        let c = generate_shortcut_corpus::<f64>(&spec(SignalPlacement::OutsideWindow, 6, 2)).unwrap();
        write_corpus(&p, &c.train).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().contains('\t'));
        assert_eq!(read_corpus::<f64>(&p).unwrap(), c.train);
    }
}
