//! Command-line orchestration: a TOML run config, flag overrides and one
//! function per subcommand. `main.rs` only parses arguments and maps errors
//! to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::write_corpus;
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_report, median_of, post_hoc_accuracy, post_hoc_csv, AttentionShareTable, PostHocReport, RunReport,
};
use crate::experiments::{
    explain_masks, highlights, prepare_blackbox, run_demo, DatasetSpec, DemoConfig, DemoRun, ExplainConfig, Method,
    PreparedData,
};
use crate::masking::HardMask;
use crate::mitigation::oracle::{
    fixture_matched_selection, fixture_uniform, fixture_wide, predictor_table, random_joint, run_oracle, DiscreteJoint,
    Field, OracleOutcome,
};
use crate::models::{load_checkpoint, save_checkpoint, BlackBoxArch, BlackBoxClassifier};
use crate::scalar::Scalar;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SHORTCUT_LAB_OUT";
const DEFAULT_OUT: &str = "shortcut-lab-out";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub precision: Precision,
    pub out: Option<PathBuf>,
    /// Highlighted test samples written per method.
    pub highlights: usize,
    pub demo: DemoConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            methods: Method::TRAINED.to_vec(),
            precision: Precision::F64,
            out: None,
            highlights: 20,
            demo: DemoConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

fn scoped<T>(prefix: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidConfig { field, message } => Error::InvalidConfig {
            field: format!("{prefix}.{field}"),
            message,
        },
        Error::InvalidSpec(m) => Error::config(format!("{prefix}.corpus"), m),
        other => other,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config echo: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        scoped("demo.corpus", self.demo.corpus.validate())?;
        scoped("demo.training", self.demo.training.validate())?;
        if self.demo.arch.embedding_std <= 0.0 || !self.demo.arch.embedding_std.is_finite() {
            return Err(Error::config("demo.arch.embedding_std", "must be a positive number"));
        }
        if self.demo.arch.candidates != self.demo.corpus.n_default_tokens + self.demo.corpus.window_size {
            return Err(Error::config(
                "demo.arch.candidates",
                format!(
                    "must equal n_default_tokens + window_size = {}",
                    self.demo.corpus.n_default_tokens + self.demo.corpus.window_size
                ),
            ));
        }
        scoped("explain", self.explain.validate())
    }

    /// Applies command-line overrides, then validates.
    pub fn resolve(mut self, flags: &CommonArgs) -> Result<Self> {
        if let Some(m) = &flags.method {
            self.methods = vec![m.parse()?];
        }
        if let Some(s) = flags.seed {
            self.seeds = vec![s];
        }
        if let Some(r) = flags.runs {
            if r == 0 {
                return Err(Error::config("runs", "must be at least 1"));
            }
            let base = self.seeds.first().copied().unwrap_or(0);
            self.seeds = (base..base + r as u64).collect();
        }
        if let Some(o) = &flags.out {
            self.out = Some(o.clone());
        }
        self.validate()?;
        Ok(self)
    }

    /// Config as embedded in metric JSON: everything except the output path,
    /// so results do not depend on where they are written.
    pub fn metric_echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        Ok(v)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
        })
    }
}

/// Best-effort key path of a TOML error, for the field-level message.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "unknown variant `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".to_string()
}

#[derive(Debug, Parser)]
#[command(
    name = "shortcut-lab",
    version,
    about = "Combinatorial shortcuts in attention-based explanations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single root seed, replacing `seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// plain, pretrain, weight or gradient; replaces `methods`.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Output directory; otherwise `out`, then $SHORTCUT_LAB_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of consecutive seeds starting at the first configured one.
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Worker threads across seeds (results do not depend on it).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpora as token-id records.
    GenData(CommonArgs),
    /// Train and checkpoint one black box per seed.
    TrainBlackbox(CommonArgs),
    /// Default-token demonstration under each method.
    Demo(CommonArgs),
    /// Train explainers and cache their test-set selections.
    Explain(CommonArgs),
    /// Post-hoc accuracy of cached selections.
    Evaluate(CommonArgs),
    /// Aggregate demo and evaluation outputs.
    Report(CommonArgs),
    /// Check the instance-weight identity on enumerable joints.
    Oracle(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBlackbox(_) => "train-blackbox",
            Command::Demo(_) => "demo",
            Command::Explain(_) => "explain",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
            Command::Oracle(_) => "oracle",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::TrainBlackbox(a)
            | Command::Demo(a)
            | Command::Explain(a)
            | Command::Evaluate(a)
            | Command::Report(a)
            | Command::Oracle(a) => a,
        }
    }
}

/// Process exit status for an error: 2 for configuration problems.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig { .. } | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

/// Runs one subcommand; returns the lines it printed.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let args = cli.command.args();
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolve(args)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let jobs = args.jobs.max(1);
    match cfg.precision {
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg, &out, jobs),
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg, &out, jobs),
    }
}

fn dispatch<T: Scalar>(cmd: &Command, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<String>> {
    match cmd {
        Command::GenData(_) => gen_data::<T>(cfg, out),
        Command::TrainBlackbox(_) => train_blackboxes::<T>(cfg, out, jobs),
        Command::Demo(_) => demo::<T>(cfg, out, jobs),
        Command::Explain(_) => explain::<T>(cfg, out, jobs),
        Command::Evaluate(_) => evaluate::<T>(cfg, out),
        Command::Report(_) => report::<T>(cfg, out),
        Command::Oracle(_) => oracle(out),
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_text(path, &body)
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs `f` on every seed, on up to `jobs` threads, keeping seed order.
fn per_seed<R: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunk = seeds.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut all = Vec::with_capacity(seeds.len());
        for h in handles {
            all.extend(
                h.join()
                    .map_err(|_| Error::Numeric("worker thread panicked".into()))??,
            );
        }
        Ok(all)
    })
}

fn gen_data<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let dir = out.join("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut lines = Vec::new();
    let demo = crate::data::generate_shortcut_corpus::<T>(&cfg.demo.corpus)?;
    write_corpus(&dir.join("demo_train.tsv"), &demo.train)?;
    write_corpus(&dir.join("demo_test.tsv"), &demo.test)?;
    lines.push(format!(
        "demo corpus: {} train, {} test",
        demo.train.len(),
        demo.test.len()
    ));
    match &cfg.explain.dataset {
        DatasetSpec::Synthetic(spec) => {
            let c = crate::data::generate_shortcut_corpus::<T>(spec)?;
            write_corpus(&dir.join("explain_train.tsv"), &c.train)?;
            write_corpus(&dir.join("explain_test.tsv"), &c.test)?;
            lines.push(format!(
                "explain corpus: {} train, {} test",
                c.train.len(),
                c.test.len()
            ));
        }
        DatasetSpec::Idx(s) => lines.push(format!(
            "explain dataset `{}` is read from IDX files; nothing generated",
            s.name
        )),
    }
    lines.push(format!("wrote {}", dir.display()));
    Ok(lines)
}

fn blackbox_dir(out: &Path) -> PathBuf {
    out.join("blackbox")
}

fn blackbox_name(seed: u64) -> String {
    format!("seed{seed}")
}

fn train_one_blackbox<T: Scalar>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PreparedData<T>> {
    let data = prepare_blackbox::<T>(&cfg.explain, seed)?;
    let dir = blackbox_dir(out);
    save_checkpoint(
        &dir,
        &blackbox_name(seed),
        &data.blackbox.arch,
        seed,
        &data.blackbox.params,
    )?;
    if let Some(r) = &data.report {
        write_json(&dir.join(format!("{}.report.json", blackbox_name(seed))), r)?;
    }
    Ok(data)
}

fn train_blackboxes<T: Scalar>(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<String>> {
    let reports = per_seed(&cfg.seeds, jobs, |s| {
        let d = train_one_blackbox::<T>(cfg, out, s)?;
        Ok(d.report.expect("freshly trained"))
    })?;
    Ok(cfg
        .seeds
        .iter()
        .zip(&reports)
        .map(|(s, r)| {
            format!(
                "seed {s}: train accuracy {:.4}, test accuracy {:.4}, digest {}",
                r.train_accuracy, r.test_accuracy, r.digest
            )
        })
        .collect())
}

/// Loads the checkpointed black box for `seed`, training one if absent.
fn load_or_train<T: Scalar>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PreparedData<T>> {
    let dir = blackbox_dir(out);
    let name = blackbox_name(seed);
    if dir.join(format!("{name}.json")).exists() {
        let (_, bb) = load_checkpoint::<T, BlackBoxArch, BlackBoxClassifier<T>, _>(&dir, &name, |a, s| {
            BlackBoxClassifier::new(a.clone(), s)
        })?;
        log::info!("seed {seed}: reusing black box {}", bb.digest());
        PreparedData::with_blackbox(&cfg.explain, bb)
    } else {
        log::info!("seed {seed}: training black box");
        train_one_blackbox(cfg, out, seed)
    }
}

fn demo_methods(cfg: &RunConfig) -> Result<Vec<Method>> {
    if cfg.methods.contains(&Method::Gradient) {
        return Err(Error::config(
            "method",
            "the demo trains attention; `gradient` applies to explain only",
        ));
    }
    Ok(cfg.methods.clone())
}

/// Aggregate demo metrics; pure function of the runs.
pub fn demo_report(cfg: &RunConfig, runs: &[DemoRun]) -> Result<RunReport> {
    let mut metrics = BTreeMap::new();
    let mut digests = BTreeMap::new();
    let mut rows = Vec::new();
    let mut methods: Vec<Method> = runs.iter().map(|r| r.method).collect();
    methods.dedup();
    for m in &methods {
        let of = |f: fn(&DemoRun) -> f64| -> Vec<f64> { runs.iter().filter(|r| r.method == *m).map(f).collect() };
        metrics.insert(
            format!("{m}.train_accuracy.median"),
            median_of(&of(|r| r.train_accuracy)),
        );
        metrics.insert(format!("{m}.class_gap.median"), median_of(&of(|r| r.class_gap)));
        metrics.insert(
            format!("{m}.mask_predictability.median"),
            median_of(&of(|r| r.mask_predictability)),
        );
        let tables: Vec<AttentionShareTable> = runs
            .iter()
            .filter(|r| r.method == *m)
            .map(|r| r.shares.clone())
            .collect();
        rows.extend(AttentionShareTable::average(&tables).rows);
    }
    if let Some(&plain) = metrics.get("plain.class_gap.median") {
        for m in methods.iter().filter(|&&m| m != Method::Plain) {
            let gap = metrics[&format!("{m}.class_gap.median")];
            let reduction = if plain > 0.0 { 1.0 - gap / plain } else { 0.0 };
            metrics.insert(format!("{m}.gap_reduction"), reduction);
        }
    }
    for r in runs {
        digests.insert(
            format!("{}/seed{}/attention", r.method, r.seed),
            r.attention_digest.clone(),
        );
        digests.insert(
            format!("{}/seed{}/downstream", r.method, r.seed),
            r.downstream_digest.clone(),
        );
        digests.insert(
            format!("{}/seed{}/embeddings", r.method, r.seed),
            r.embedding_digest.clone(),
        );
    }
    Ok(RunReport {
        method: methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        dataset: crate::experiments::placement_name(cfg.demo.corpus.placement).to_string(),
        k: None,
        seeds: cfg.seeds.clone(),
        config: cfg.metric_echo()?,
        post_hoc_accuracy: Vec::new(),
        attention_shares: rows,
        digests,
        metrics,
    })
}

fn demo<T: Scalar>(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<String>> {
    let methods = demo_methods(cfg)?;
    let mut runs = Vec::new();
    for &m in &methods {
        runs.extend(per_seed(&cfg.seeds, jobs, |s| run_demo::<T>(&cfg.demo, m, s))?);
    }
    let report = demo_report(cfg, &runs)?;
    let logs: Vec<(String, _)> = runs
        .iter()
        .map(|r| (format!("{}_seed{}", r.method, r.seed), r.log.clone()))
        .collect();
    let dir = out.join("demo");
    emit_report(&report, &[], &logs, &dir)?;
    write_json(&dir.join("demo_runs.json"), &runs)?;
    let mut lines: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{} seed {}: train accuracy {:.4}, default-token totals {}, gap {:.4}",
                r.method,
                r.seed,
                r.train_accuracy,
                r.shares
                    .rows
                    .iter()
                    .map(|row| format!("class {} {:.4}", row.class, row.total))
                    .collect::<Vec<_>>()
                    .join(" / "),
                r.class_gap
            )
        })
        .collect();
    lines.extend(report.metrics.iter().map(|(k, v)| format!("{k} = {v:.4}")));
    Ok(lines)
}

/// Selections of one explainer run, cached for `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCache {
    pub method: Method,
    pub seed: u64,
    pub dataset: String,
    pub k: usize,
    pub approximator_fidelity: Option<f64>,
    pub estimator_accuracy: Option<f64>,
    pub digests: BTreeMap<String, String>,
    pub masks: Vec<HardMask>,
}

fn cache_path(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("explain").join(format!("{method}_seed{seed}.json"))
}

fn explain<T: Scalar>(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<String>> {
    let caches = per_seed(&cfg.seeds, jobs, |seed| {
        let data = load_or_train::<T>(cfg, out, seed)?;
        let mut done = Vec::new();
        for &m in &cfg.methods {
            let s = explain_masks(&cfg.explain, &data, m, seed)?;
            let cache = MaskCache {
                method: m,
                seed,
                dataset: cfg.explain.dataset.name(),
                k: cfg.explain.k,
                approximator_fidelity: s.fidelity,
                estimator_accuracy: s.estimator_accuracy,
                digests: s.digests,
                masks: s.masks,
            };
            let log = s.log;
            write_json(&cache_path(out, m, seed), &cache)?;
            if !log.epochs.is_empty() {
                write_text(
                    &out.join("explain").join(format!("log_{m}_seed{seed}.jsonl")),
                    &log.to_json_lines()?,
                )?;
            }
            done.push(cache);
        }
        Ok(done)
    })?;
    Ok(caches
        .iter()
        .flatten()
        .map(|c| {
            format!(
                "{} seed {}: {} selections cached, approximator fidelity {}",
                c.method,
                c.seed,
                c.masks.len(),
                c.approximator_fidelity.map_or("n/a".to_string(), |f| format!("{f:.4}"))
            )
        })
        .collect())
}

fn evaluate_all<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PostHocReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_or_train::<T>(cfg, out, seed)?;
        let fill = data.fill()?;
        for &m in &cfg.methods {
            let path = cache_path(out, m, seed);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "no cached selections at {}; run `explain` first",
                    path.display()
                )));
            }
            let cache: MaskCache = read_json(&path)?;
            let r = post_hoc_accuracy(&data.blackbox, &data.corpus.test, &cache.masks, &fill)?;
            reports.push(r.labeled(m.name(), &cache.dataset, seed));
        }
    }
    Ok(reports)
}

fn evaluate<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let reports = evaluate_all::<T>(cfg, out)?;
    let dir = out.join("evaluate");
    write_json(&dir.join("post_hoc.json"), &reports)?;
    write_text(&dir.join("post_hoc.csv"), &post_hoc_csv(&reports))?;
    Ok(reports
        .iter()
        .map(|r| {
            format!(
                "{} seed {}: post-hoc accuracy {:.4} ({}/{})",
                r.method, r.seed, r.post_hoc_accuracy, r.consistent, r.n_samples
            )
        })
        .collect())
}

/// Median post-hoc accuracy per method and the gain over plain training.
pub fn post_hoc_metrics(reports: &[PostHocReport]) -> BTreeMap<String, f64> {
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by_method
            .entry(r.method.as_str())
            .or_default()
            .push(r.post_hoc_accuracy);
    }
    let mut metrics = BTreeMap::new();
    for (m, accs) in &by_method {
        metrics.insert(format!("{m}.post_hoc.median"), median_of(accs));
    }
    if let Some(plain) = by_method.get("plain").map(|a| median_of(a)) {
        for (m, accs) in &by_method {
            if *m != "plain" {
                metrics.insert(format!("{m}.post_hoc.gain_over_plain"), median_of(accs) - plain);
            }
        }
    }
    metrics
}

fn report<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let post_hoc_path = out.join("evaluate").join("post_hoc.json");
    let post_hoc: Vec<PostHocReport> = if post_hoc_path.exists() {
        read_json(&post_hoc_path)?
    } else {
        Vec::new()
    };
    let demo_path = out.join("demo").join("report.json");
    let demo: Option<RunReport> = if demo_path.exists() {
        Some(read_json(&demo_path)?)
    } else {
        None
    };
    if post_hoc.is_empty() && demo.is_none() {
        return Err(Error::Data(format!(
            "nothing to report in {}; run `demo` or `explain` and `evaluate` first",
            out.display()
        )));
    }
    let mut metrics = post_hoc_metrics(&post_hoc);
    let mut digests = BTreeMap::new();
    let mut shares = Vec::new();
    if let Some(d) = &demo {
        metrics.extend(d.metrics.iter().map(|(k, v)| (format!("demo.{k}"), *v)));
        digests.extend(d.digests.iter().map(|(k, v)| (format!("demo/{k}"), v.clone())));
        shares = d.attention_shares.clone();
    }
    let mut marks = Vec::new();
    if !post_hoc.is_empty() {
        if let (DatasetSpec::Synthetic(spec), Some(&seed)) = (&cfg.explain.dataset, cfg.seeds.first()) {
            let data = load_or_train::<T>(cfg, out, seed)?;
            for &m in &cfg.methods {
                let path = cache_path(out, m, seed);
                if path.exists() {
                    let cache: MaskCache = read_json(&path)?;
                    digests.extend(
                        cache
                            .digests
                            .iter()
                            .map(|(k, v)| (format!("explain/{m}/seed{seed}/{k}"), v.clone())),
                    );
                    marks.extend(highlights(
                        spec,
                        &data.blackbox,
                        &data.corpus.test,
                        &cache.masks,
                        cfg.highlights,
                    )?);
                }
            }
        }
    }
    let report = RunReport {
        method: cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        dataset: cfg.explain.dataset.name(),
        k: Some(cfg.explain.k),
        seeds: cfg.seeds.clone(),
        config: cfg.metric_echo()?,
        post_hoc_accuracy: post_hoc,
        attention_shares: shares,
        digests,
        metrics,
    };
    let dir = out.join("report");
    emit_report(&report, &marks, &[], &dir)?;
    let mut lines: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k} = {v:.4}")).collect();
    lines.push(format!("wrote {}", dir.display()));
    Ok(lines)
}

/// Outcome of one joint in the oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLine {
    pub name: String,
    pub arithmetic: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub expected_weight: f64,
    pub exact: bool,
    pub passed: bool,
}

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

fn oracle_line<F: Field>(name: &str, joint: &DiscreteJoint<F>, seed: u64) -> Result<OracleLine> {
    let f = predictor_table::<F>(joint.nx, seed);
    let o: OracleOutcome = run_oracle(joint, &f)?;
    let gap = o.gap();
    Ok(OracleLine {
        name: name.to_string(),
        arithmetic: F::NAME.to_string(),
        lhs: o.lhs,
        rhs: o.rhs,
        gap,
        expected_weight: o.expected_weight,
        exact: o.exact,
        passed: gap <= ORACLE_TOLERANCE && (o.expected_weight - 1.0).abs() <= WEIGHT_TOLERANCE,
    })
}

/// Fixtures plus `n_random` generated joints, in f64 and exact rationals.
pub fn oracle_suite(n_random: u64) -> Result<Vec<OracleLine>> {
    use num_rational::BigRational;
    let mut lines = Vec::new();
    macro_rules! both {
        ($name:expr, $make:expr, $seed:expr) => {{
            lines.push(oracle_line::<f64>($name, &$make, $seed)?);
            lines.push(oracle_line::<BigRational>($name, &$make, $seed)?);
        }};
    }
    both!("uniform", fixture_uniform(), 1);
    both!("matched-selection", fixture_matched_selection(), 2);
    both!("wide", fixture_wide(), 3);
    for s in 0..n_random {
        both!(&format!("random-{s}"), random_joint(s), 100 + s);
    }
    Ok(lines)
}

fn oracle(out: &Path) -> Result<Vec<String>> {
    let suite = oracle_suite(20)?;
    write_json(&out.join("oracle").join("oracle.json"), &suite)?;
    let mut lines: Vec<String> = suite
        .iter()
        .map(|l| {
            format!(
                "{:<18} {:<8} lhs {:.15} rhs {:.15} |d| {:.3e} E[w] {:.12} {}",
                l.name,
                l.arithmetic,
                l.lhs,
                l.rhs,
                l.gap,
                l.expected_weight,
                if l.passed { "ok" } else { "FAIL" }
            )
        })
        .collect();
    let failed = suite.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} oracle checks failed")));
    }
    lines.push(format!("{} checks passed", suite.len()));
    Ok(lines)
}
