//! Experiment orchestration. Each `cmd_*` function is one CLI step; steps exchange
//! files under the output directory and never rewrite their own inputs.
//!
//! Order: [`cmd_gen`], [`cmd_train_clf`], [`cmd_train_ae`], [`cmd_protect`],
//! [`cmd_eval_privacy`], [`cmd_eval_asv`], [`cmd_report`]. [`run_all`] runs them in sequence.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ae::{self, AeModel, TrainConfig, TrainLog};
use crate::asv;
use crate::calibration::{self, CalibrationBin, CalibrationMap, ScoreRecord, ScoreSet};
use crate::classifier::{self, ClassifierConfig, LinearClassifier};
use crate::corpus::{self, Corpus, Embedding, SynthConfig};
use crate::metrics::{self, ScoreHistogram, Tag};
use crate::preprocess::{self, StandardizerStats};
use crate::textio;
use crate::{Error, Result};

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one pipeline stage, derived from the master seed and the stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a64(stage))
}

/// Locations of every artefact, relative to the output directory unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub clf_train: PathBuf,
    pub ae_train: PathBuf,
    pub test: PathBuf,
    pub standardizer: PathBuf,
    pub classifier: PathBuf,
    pub calibration: PathBuf,
    pub clf_scores: PathBuf,
    pub ae_model: PathBuf,
    pub train_log: PathBuf,
    pub protected: PathBuf,
    pub trials: PathBuf,
    pub privacy_report: PathBuf,
    pub asv_report: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            clf_train: "corpus/clf_train.txt".into(),
            ae_train: "corpus/ae_train.txt".into(),
            test: "corpus/test.txt".into(),
            standardizer: "models/standardizer.json".into(),
            classifier: "models/classifier.txt".into(),
            calibration: "models/calibration.txt".into(),
            clf_scores: "models/ae_train_scores.txt".into(),
            ae_model: "models/ae.txt".into(),
            train_log: "models/train_log.json".into(),
            protected: "protected/test.txt".into(),
            trials: "asv/trials.txt".into(),
            privacy_report: "reports/privacy.json".into(),
            asv_report: "reports/asv.json".into(),
            report: "reports/report.json".into(),
        }
    }
}

impl Paths {
    fn entries(&self) -> [(&'static str, &PathBuf); 14] {
        [
            ("clf_train", &self.clf_train),
            ("ae_train", &self.ae_train),
            ("test", &self.test),
            ("standardizer", &self.standardizer),
            ("classifier", &self.classifier),
            ("calibration", &self.calibration),
            ("clf_scores", &self.clf_scores),
            ("ae_model", &self.ae_model),
            ("train_log", &self.train_log),
            ("protected", &self.protected),
            ("trials", &self.trials),
            ("privacy_report", &self.privacy_report),
            ("asv_report", &self.asv_report),
            ("report", &self.report),
        ]
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut PathBuf> {
        Some(match name {
            "clf_train" => &mut self.clf_train,
            "ae_train" => &mut self.ae_train,
            "test" => &mut self.test,
            "standardizer" => &mut self.standardizer,
            "classifier" => &mut self.classifier,
            "calibration" => &mut self.calibration,
            "clf_scores" => &mut self.clf_scores,
            "ae_model" => &mut self.ae_model,
            "train_log" => &mut self.train_log,
            "protected" => &mut self.protected,
            "trials" => &mut self.trials,
            "privacy_report" => &mut self.privacy_report,
            "asv_report" => &mut self.asv_report,
            "report" => &mut self.report,
            _ => return None,
        })
    }
}

/// Everything one experiment needs. The `seed` fields inside `synth`, `classifier`
/// and `train` are ignored; every stage seed derives from the master `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub paths: Paths,
    /// Corpus file to split instead of generating a synthetic one.
    pub input: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Speaker fractions of the classifier-train, autoencoder-train and test parts.
    pub split: [f64; 3],
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// Protection condition.
    pub w: f64,
    pub mi_k: usize,
    pub calibration_bin_width: f64,
    pub histogram_bin_width: f64,
    /// Upper bound on the LDA dimension.
    pub lda_cap: usize,
    pub plda_iters: usize,
    /// Non-target trials per test segment.
    pub nontargets: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// The desk reference experiment.
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("."),
            paths: Paths::default(),
            input: None,
            synth: SynthConfig::default(),
            split: [0.25, 0.5, 0.25],
            classifier: ClassifierConfig::default(),
            train: TrainConfig {
                lr: 0.03,
                momentum: 0.25,
                batch_size: 32,
                epochs: 400,
                ..TrainConfig::default()
            },
            w: 0.5,
            mi_k: 3,
            calibration_bin_width: 0.02,
            histogram_bin_width: 0.02,
            lda_cap: 128,
            plda_iters: 10,
            nontargets: 3,
            seed: 2020,
        }
    }
}

impl PipelineConfig {
    /// Resolves an artefact path against the output directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: stage_seed(self.seed, "gen"),
            ..self.synth.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        stage_seed(self.seed, "split")
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: stage_seed(self.seed, "train-clf"),
            ..self.classifier.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, "train-ae"),
            ..self.train.clone()
        }
    }

    pub fn trials_seed(&self) -> u64 {
        stage_seed(self.seed, "eval-asv")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!("w = {} outside [0, 1]", self.w)));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.split
            )));
        }
        if self.mi_k == 0 || self.lda_cap == 0 || self.plda_iters == 0 || self.nontargets == 0 {
            return Err(Error::Config(
                "mi_k, lda_cap, plda_iters and nontargets must be positive".into(),
            ));
        }
        for (name, bw) in [
            ("calibration_bin_width", self.calibration_bin_width),
            ("histogram_bin_width", self.histogram_bin_width),
        ] {
            if !(bw > 0.0 && bw <= 1.0) {
                return Err(Error::Config(format!("{name} = {bw} outside (0, 1]")));
            }
        }
        if self.input.is_none() {
            self.synth.validate()?;
        }
        self.train.validate()?;
        if !(self.classifier.lr > 0.0) || self.classifier.batch_size == 0 {
            return Err(Error::Config("clf.lr and clf.batch_size must be positive".into()));
        }

        let mut seen = HashSet::new();
        for (name, p) in self.paths.entries() {
            if !seen.insert(self.resolve(p)) {
                return Err(Error::Config(format!(
                    "path.{name} = {} duplicates another path",
                    p.display()
                )));
            }
        }
        if let Some(input) = &self.input {
            if seen.contains(input) {
                return Err(Error::Config(format!(
                    "input {} would be overwritten by the pipeline",
                    input.display()
                )));
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "out_dir" => self.out_dir = value.into(),
            "input" => self.input = Some(value.into()),
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|t| num(t.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| format!("split needs three comma-separated fractions, got `{value}`"))?;
            }
            "w" => self.w = num(value)?,
            "mi_k" => self.mi_k = num(value)?,
            "calibration_bin_width" => self.calibration_bin_width = num(value)?,
            "histogram_bin_width" => self.histogram_bin_width = num(value)?,
            "lda_cap" => self.lda_cap = num(value)?,
            "plda_iters" => self.plda_iters = num(value)?,
            "nontargets" => self.nontargets = num(value)?,
            "synth.n_speakers" => self.synth.n_speakers = num(value)?,
            "synth.segments_per_speaker" => self.synth.segments_per_speaker = num(value)?,
            "synth.dim" => self.synth.dim = num(value)?,
            "synth.attribute_shift" => self.synth.attribute_shift = num(value)?,
            "synth.speaker_spread" => self.synth.speaker_spread = num(value)?,
            "synth.within_spread" => self.synth.within_spread = num(value)?,
            "synth.speaker_rank" => self.synth.speaker_rank = num(value)?,
            "synth.residual_spread" => self.synth.residual_spread = num(value)?,
            "clf.epochs" => self.classifier.epochs = num(value)?,
            "clf.lr" => self.classifier.lr = num(value)?,
            "clf.batch_size" => self.classifier.batch_size = num(value)?,
            "train.lr" => self.train.lr = num(value)?,
            "train.momentum" => self.train.momentum = num(value)?,
            "train.batch_size" => self.train.batch_size = num(value)?,
            "train.epochs" => self.train.epochs = num(value)?,
            "train.bn_momentum" => self.train.bn_momentum = num(value)?,
            _ => {
                let slot = key
                    .strip_prefix("path.")
                    .and_then(|name| self.paths.get_mut(name))
                    .ok_or_else(|| format!("unknown key `{key}`"))?;
                *slot = value.into();
            }
        }
        Ok(())
    }
}

/// Parses `key = value` lines over the reference defaults. `#` starts a comment.
/// The result is not validated; see [`PipelineConfig::validate`].
pub fn parse_config(path: &Path, text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
        cfg.set(key.trim(), value.trim())
            .map_err(|m| Error::parse(path, i + 1, m))?;
    }
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    parse_config(path, &textio::read_to_string(path)?)
}

/// Writes every key except `out_dir`, so the text does not depend on where a run lives.
pub fn config_to_text(cfg: &PipelineConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
    kv("seed", cfg.seed.to_string());
    if let Some(input) = &cfg.input {
        kv("input", input.display().to_string());
    }
    kv("split", cfg.split.map(|f| f.to_string()).join(","));
    kv("w", cfg.w.to_string());
    kv("mi_k", cfg.mi_k.to_string());
    kv("calibration_bin_width", cfg.calibration_bin_width.to_string());
    kv("histogram_bin_width", cfg.histogram_bin_width.to_string());
    kv("lda_cap", cfg.lda_cap.to_string());
    kv("plda_iters", cfg.plda_iters.to_string());
    kv("nontargets", cfg.nontargets.to_string());
    let s = &cfg.synth;
    kv("synth.n_speakers", s.n_speakers.to_string());
    kv("synth.segments_per_speaker", s.segments_per_speaker.to_string());
    kv("synth.dim", s.dim.to_string());
    kv("synth.attribute_shift", s.attribute_shift.to_string());
    kv("synth.speaker_spread", s.speaker_spread.to_string());
    kv("synth.within_spread", s.within_spread.to_string());
    kv("synth.speaker_rank", s.speaker_rank.to_string());
    kv("synth.residual_spread", s.residual_spread.to_string());
    kv("clf.epochs", cfg.classifier.epochs.to_string());
    kv("clf.lr", cfg.classifier.lr.to_string());
    kv("clf.batch_size", cfg.classifier.batch_size.to_string());
    let t = &cfg.train;
    kv("train.lr", t.lr.to_string());
    kv("train.momentum", t.momentum.to_string());
    kv("train.batch_size", t.batch_size.to_string());
    kv("train.epochs", t.epochs.to_string());
    kv("train.bn_momentum", t.bn_momentum.to_string());
    for (name, p) in cfg.paths.entries() {
        kv(&format!("path.{name}"), p.display().to_string());
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("cannot serialise {}: {e}", path.display())))?;
    text.push('\n');
    textio::write_file(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = textio::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

fn step<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(name))
}

/// Draws or imports a corpus and splits it by speaker into the three parts.
pub fn cmd_gen(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    step(
        "gen",
        (|| {
            cfg.validate()?;
            let full = match &cfg.input {
                Some(p) => corpus::load(p)?,
                None => corpus::generate(&cfg.synth_config())?,
            };
            let parts = corpus::split(&full, &cfg.split, cfg.split_seed(), true)?;
            let p = &cfg.paths;
            let mut written = Vec::new();
            for (part, path) in parts.iter().zip([&p.clf_train, &p.ae_train, &p.test]) {
                let path = cfg.resolve(path);
                corpus::save(part, &path)?;
                written.push(path);
            }
            Ok(written)
        })(),
    )
}

fn load_part(cfg: &PipelineConfig, path: &Path) -> Result<Corpus> {
    corpus::load(cfg.resolve(path))
}

/// Fits the standardiser on the autoencoder-training part, trains the attribute
/// classifier on the classifier-training part and fits the PAV map on the
/// classifier's scores for the autoencoder-training part.
pub fn cmd_train_clf(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    step(
        "train-clf",
        (|| {
            cfg.validate()?;
            let clf_train = load_part(cfg, &cfg.paths.clf_train)?;
            let ae_train = load_part(cfg, &cfg.paths.ae_train)?;
            let stats = preprocess::fit_standardizer(&ae_train)?;
            let clf = classifier::train(&stats.preprocess_corpus(&clf_train)?, &cfg.classifier_config())?;
            let held = stats.preprocess_corpus(&ae_train)?;
            let raw = clf.score_corpus(&held)?;
            let map = calibration::pav_fit(&raw, &held.labels())?;
            let records: Vec<ScoreRecord> = held
                .items()
                .iter()
                .zip(&raw)
                .map(|(e, &r)| ScoreRecord {
                    segment_id: e.segment_id.clone(),
                    label: e.label,
                    raw: r,
                    calibrated: Some(map.apply(r)),
                })
                .collect();

            let p = &cfg.paths;
            let out = [&p.standardizer, &p.classifier, &p.calibration, &p.clf_scores].map(|x| cfg.resolve(x));
            write_json(&out[0], &stats)?;
            classifier::save(&clf, &out[1])?;
            calibration::save_map(&map, &out[2])?;
            calibration::save_scores(&records, &out[3])?;
            Ok(out.to_vec())
        })(),
    )
}

struct Front {
    stats: StandardizerStats,
    clf: LinearClassifier,
    map: CalibrationMap,
}

impl Front {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            stats: read_json(&cfg.resolve(&cfg.paths.standardizer))?,
            clf: classifier::load(cfg.resolve(&cfg.paths.classifier))?,
            map: calibration::load_map(cfg.resolve(&cfg.paths.calibration))?,
        })
    }

    /// Calibrated attribute posteriors of the items of an original-space corpus.
    fn soft_labels(&self, corpus: &Corpus) -> Result<Vec<f64>> {
        let pre = self.stats.preprocess_corpus(corpus)?;
        Ok(self
            .clf
            .score_corpus(&pre)?
            .into_iter()
            .map(|s| self.map.apply(s))
            .collect())
    }
}

/// Attaches the calibrated posteriors to the autoencoder-training part and trains
/// the adversarial autoencoder. The test part is only used for the held-out log.
pub fn cmd_train_ae(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    step(
        "train-ae",
        (|| {
            cfg.validate()?;
            let front = Front::load(cfg)?;
            let ae_train = load_part(cfg, &cfg.paths.ae_train)?;
            let test = load_part(cfg, &cfg.paths.test)?;
            let soft = front.soft_labels(&ae_train)?;
            let items = ae_train
                .items()
                .iter()
                .zip(soft)
                .map(|(e, p)| Embedding {
                    posterior_soft: Some(p),
                    ..e.clone()
                })
                .collect();
            let labelled = Corpus::new(ae_train.dim(), items)?;
            let (model, log) = ae::train(&labelled, Some(&test), &cfg.train_config())?;
            let (m, l) = (cfg.resolve(&cfg.paths.ae_model), cfg.resolve(&cfg.paths.train_log));
            ae::save(&model, &m)?;
            write_json(&l, &log)?;
            Ok(vec![m, l])
        })(),
    )
}

/// Protects the test part with condition `w` (the configured one when `None`).
/// The output vectors live in the preprocessed space.
pub fn cmd_protect(cfg: &PipelineConfig, w: Option<f64>) -> Result<Vec<PathBuf>> {
    step(
        "protect",
        (|| {
            cfg.validate()?;
            let w = w.unwrap_or(cfg.w);
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("w = {w} outside [0, 1]")));
            }
            let model = ae::load(cfg.resolve(&cfg.paths.ae_model))?;
            let test = load_part(cfg, &cfg.paths.test)?;
            let protected = model.protect_corpus(&test, w)?;
            let out = cfg.resolve(&cfg.paths.protected);
            corpus::save(&protected, &out)?;
            Ok(vec![out])
        })(),
    )
}

/// One evaluation condition of a partition, in the preprocessed space.
struct Condition {
    name: String,
    w: Option<f64>,
    corpus: Corpus,
}

/// Original, reconstructed with the soft labels, and protected at `cfg.w`.
fn conditions(cfg: &PipelineConfig, front: &Front, model: &AeModel, part: &Corpus) -> Result<Vec<Condition>> {
    let original = front.stats.preprocess_corpus(part)?;
    let soft: HashMap<&str, f64> = part
        .items()
        .iter()
        .map(|e| e.segment_id.as_str())
        .zip(front.soft_labels(part)?)
        .collect();
    let reconstructed = model.protect_corpus_with(part, |e| soft[e.segment_id.as_str()])?;
    let protected = model.protect_corpus(part, cfg.w)?;
    Ok(vec![
        Condition {
            name: "original".into(),
            w: None,
            corpus: original,
        },
        Condition {
            name: "soft".into(),
            w: None,
            corpus: reconstructed,
        },
        Condition {
            name: format!("w={}", cfg.w),
            w: Some(cfg.w),
            corpus: protected,
        },
    ])
}

/// Attribute-concealment metrics of one condition, from the attribute classifier's
/// scores. Discrimination metrics use the canonical polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub condition: String,
    pub w: Option<f64>,
    pub auc: f64,
    pub eer: f64,
    /// Cost of the classifier logits read as LLRs.
    pub cllr: f64,
    pub cllr_min: f64,
    pub d_ece: f64,
    pub log10_lw: f64,
    pub tag: Tag,
    pub mi_avg_bits: f64,
    pub polarity_swapped: bool,
    /// Mean cosine reconstruction error against the original condition.
    pub reconstruction: Option<f64>,
    pub histogram: ScoreHistogram,
    pub calibration_plot: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub partition: String,
    pub n_items: usize,
    pub rows: Vec<PrivacyRow>,
}

/// Classifier calibration before and after PAV, on the part the map was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub partition: String,
    pub raw: Vec<CalibrationBin>,
    pub calibrated: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub w: f64,
    pub mi_k: usize,
    pub calibration: CalibrationReport,
    pub partitions: Vec<PartitionReport>,
}

impl PrivacyReport {
    pub fn row(&self, partition: &str, condition: &str) -> Option<&PrivacyRow> {
        self.partitions
            .iter()
            .find(|p| p.partition == partition)?
            .rows
            .iter()
            .find(|r| r.condition == condition)
    }
}

fn privacy_row(
    cfg: &PipelineConfig,
    clf: &LinearClassifier,
    cond: &Condition,
    original: &Corpus,
) -> Result<PrivacyRow> {
    let c = &cond.corpus;
    let labels = c.labels();
    let scores = clf.score_corpus(c)?;
    let set = ScoreSet::from_labeled(&scores, &labels)?;
    let canon = metrics::canonical_polarity(&set)?;
    let sign = if canon.swapped { -1.0 } else { 1.0 };
    let logits: Vec<f64> = c
        .items()
        .iter()
        .map(|e| clf.logit(&e.vector).map(|l| sign * l))
        .collect::<Result<_>>()?;
    let llr = ScoreSet::from_labeled(&logits, &labels)?;
    let zebra = metrics::zebra(&canon.scores)?;
    let vectors: Vec<Vec<f64>> = c.items().iter().map(|e| e.vector.clone()).collect();
    let reconstruction = if cond.name == "original" {
        None
    } else {
        let mut total = 0.0;
        for (a, b) in c.items().iter().zip(original.items()) {
            total += ae::reconstruction_error(&a.vector, &b.vector)?;
        }
        Some(total / c.len() as f64)
    };
    Ok(PrivacyRow {
        condition: cond.name.clone(),
        w: cond.w,
        auc: metrics::auc(&canon.scores)?,
        eer: metrics::eer(&canon.scores)?,
        cllr: metrics::cllr(&llr.target, &llr.nontarget)?,
        cllr_min: metrics::cllr_min(&canon.scores)?,
        d_ece: zebra.d_ece,
        log10_lw: zebra.log10_lw,
        tag: zebra.tag,
        mi_avg_bits: metrics::mutual_information(&vectors, &labels, cfg.mi_k)?,
        polarity_swapped: canon.swapped,
        reconstruction,
        histogram: metrics::score_histogram(&set, cfg.histogram_bin_width)?,
        calibration_plot: calibration::calibration_plot(&scores, &labels, cfg.calibration_bin_width)?,
    })
}

/// Attribute-concealment metrics for the autoencoder-training and test parts under
/// the original, reconstructed and protected conditions.
pub fn cmd_eval_privacy(cfg: &PipelineConfig) -> Result<PrivacyReport> {
    step(
        "eval-privacy",
        (|| {
            cfg.validate()?;
            let front = Front::load(cfg)?;
            let model = ae::load(cfg.resolve(&cfg.paths.ae_model))?;
            let mut partitions = Vec::new();
            let mut calibration = None;
            for (name, path) in [("ae_train", &cfg.paths.ae_train), ("test", &cfg.paths.test)] {
                let part = load_part(cfg, path)?;
                let conds = conditions(cfg, &front, &model, &part)?;
                if calibration.is_none() {
                    let labels = part.labels();
                    let raw = front.clf.score_corpus(&conds[0].corpus)?;
                    let cal: Vec<f64> = raw.iter().map(|&s| front.map.apply(s)).collect();
                    calibration = Some(CalibrationReport {
                        partition: name.into(),
                        raw: calibration::calibration_plot(&raw, &labels, cfg.calibration_bin_width)?,
                        calibrated: calibration::calibration_plot(&cal, &labels, cfg.calibration_bin_width)?,
                    });
                }
                let rows = conds
                    .iter()
                    .map(|c| {
                        privacy_row(cfg, &front.clf, c, &conds[0].corpus)
                            .map_err(|e| e.context(format!("{name} {}", c.name)))
                    })
                    .collect::<Result<_>>()?;
                partitions.push(PartitionReport {
                    partition: name.into(),
                    n_items: part.len(),
                    rows,
                });
            }
            let report = PrivacyReport {
                w: cfg.w,
                mi_k: cfg.mi_k,
                calibration: calibration.expect("two partitions evaluated"),
                partitions,
            };
            write_json(&cfg.resolve(&cfg.paths.privacy_report), &report)?;
            Ok(report)
        })(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsvRow {
    pub condition: String,
    pub w: Option<f64>,
    pub eer: f64,
    pub cllr_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsvReport {
    pub lda_dim: usize,
    pub plda_iters: usize,
    pub plda_log_likelihood: f64,
    pub n_trials: usize,
    pub n_targets: usize,
    pub rows: Vec<AsvRow>,
}

impl AsvReport {
    pub fn row(&self, condition: &str) -> Option<&AsvRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

/// Speaker verification on the test part under each condition. LDA and PLDA are
/// trained once on the original autoencoder-training part.
pub fn cmd_eval_asv(cfg: &PipelineConfig) -> Result<AsvReport> {
    step(
        "eval-asv",
        (|| {
            cfg.validate()?;
            let front = Front::load(cfg)?;
            let model = ae::load(cfg.resolve(&cfg.paths.ae_model))?;
            let ae_train = front.stats.preprocess_corpus(&load_part(cfg, &cfg.paths.ae_train)?)?;
            let test = load_part(cfg, &cfg.paths.test)?;

            let k = asv::lda_dim(cfg.lda_cap, ae_train.dim(), ae_train.speakers().len());
            let lda = asv::lda_fit(&ae_train, k)?;
            let fit = asv::plda_em(&lda.project_corpus(&ae_train)?, None, cfg.plda_iters)?;
            let trials = asv::build_trials(&test, cfg.nontargets, cfg.trials_seed())?;
            asv::save_trials(&trials, cfg.resolve(&cfg.paths.trials))?;

            let rows = conditions(cfg, &front, &model, &test)?
                .into_iter()
                .map(|c| {
                    let scores = asv::run_trials(&fit.model, &lda, &c.corpus, &trials)?;
                    let m = asv::asv_metrics(&scores)?;
                    Ok(AsvRow {
                        condition: c.name,
                        w: c.w,
                        eer: m.eer,
                        cllr_min: m.cllr_min,
                    })
                })
                .collect::<Result<_>>()?;
            let report = AsvReport {
                lda_dim: k,
                plda_iters: cfg.plda_iters,
                plda_log_likelihood: fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
                n_trials: trials.len(),
                n_targets: trials.n_targets(),
                rows,
            };
            write_json(&cfg.resolve(&cfg.paths.asv_report), &report)?;
            Ok(report)
        })(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub adversary_loss: f64,
    pub autoencoder_loss: f64,
    pub reconstruction: f64,
    pub heldout_adversary_auc: Option<f64>,
    /// `max(a, 1 - a)` of the held-out adversary AUC.
    pub heldout_adversary_auc_canonical: Option<f64>,
}

impl TrainingSummary {
    pub fn from_log(log: &TrainLog) -> Result<Self> {
        let last = log
            .epochs
            .last()
            .ok_or_else(|| Error::Data("training log has no epochs".into()))?;
        Ok(Self {
            epochs: log.epochs.len(),
            adversary_loss: last.adversary_loss,
            autoencoder_loss: last.autoencoder_loss,
            reconstruction: last.reconstruction,
            heldout_adversary_auc: last.heldout_adversary_auc,
            heldout_adversary_auc_canonical: last.heldout_adversary_auc.map(|a| a.max(1.0 - a)),
        })
    }
}

/// The consolidated document. It carries no wall-clock data, so identical runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: Vec<String>,
    pub training: TrainingSummary,
    pub privacy: PrivacyReport,
    pub asv: AsvReport,
}

/// Merges the training log and both evaluation reports into one file.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<Report> {
    step(
        "report",
        (|| {
            cfg.validate()?;
            let log: TrainLog = read_json(&cfg.resolve(&cfg.paths.train_log))?;
            let report = Report {
                config: config_to_text(cfg).lines().map(str::to_owned).collect(),
                training: TrainingSummary::from_log(&log)?,
                privacy: read_json(&cfg.resolve(&cfg.paths.privacy_report))?,
                asv: read_json(&cfg.resolve(&cfg.paths.asv_report))?,
            };
            write_json(&cfg.resolve(&cfg.paths.report), &report)?;
            Ok(report)
        })(),
    )
}

/// Runs every step in order and returns the consolidated report.
pub fn run_all(cfg: &PipelineConfig) -> Result<Report> {
    cmd_gen(cfg)?;
    cmd_train_clf(cfg)?;
    cmd_train_ae(cfg)?;
    cmd_protect(cfg, None)?;
    cmd_eval_privacy(cfg)?;
    cmd_eval_asv(cfg)?;
    cmd_report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        let seeds: HashSet<u64> = ["gen", "split", "train-clf", "train-ae", "eval-asv"]
            .iter()
            .map(|s| stage_seed(7, s))
            .collect();
        assert_eq!(seeds.len(), 5);
        assert_eq!(stage_seed(7, "gen"), stage_seed(7, "gen"));
        assert_ne!(stage_seed(7, "gen"), stage_seed(8, "gen"));
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 11;
        cfg.w = 0.25;
        cfg.split = [0.2, 0.3, 0.5];
        cfg.train.lr = 1e-4;
        cfg.synth.n_speakers = 12;
        cfg.paths.report = "r.json".into();
        cfg.input = Some("in.txt".into());
        let text = config_to_text(&cfg);
        assert_eq!(parse_config(Path::new("c"), &text).unwrap(), cfg);
        assert_eq!(parse_config(Path::new("c"), "").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn config_errors() {
        let p = Path::new("c.cfg");
        let err = parse_config(p, "seed = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_config(p, "w 0.5"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config(p, "train.epochs = -1"), Err(Error::Parse { .. })));
        assert!(matches!(parse_config(p, "split = 0.5,0.5"), Err(Error::Parse { .. })));
        assert!(parse_config(p, "# only a comment\n\nw = 1 # trailing\n").is_ok());

        let bad_w = parse_config(p, "w = 1.5").unwrap();
        assert!(matches!(bad_w.validate(), Err(Error::Config(_))));
        let dup = parse_config(p, "path.report = corpus/test.txt").unwrap();
        assert!(matches!(dup.validate(), Err(Error::Config(_))));
        let clobber = parse_config(p, "input = ./corpus/test.txt").unwrap();
        assert!(matches!(clobber.validate(), Err(Error::Config(_))));
        assert!(PipelineConfig::default().validate().is_ok());
    }

    #[test]
    fn derived_configs_use_stage_seeds() {
        let cfg = PipelineConfig {
            seed: 3,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.synth_config().seed, stage_seed(3, "gen"));
        assert_eq!(cfg.train_config().seed, stage_seed(3, "train-ae"));
        assert_eq!(cfg.classifier_config().seed, stage_seed(3, "train-clf"));
        assert_eq!(cfg.train_config().lr, 0.03);
    }

    #[test]
    fn errors_name_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            out_dir: dir.path().into(),
            ..PipelineConfig::default()
        };
        let err = cmd_train_clf(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("train-clf: "), "{err}");
        assert!(matches!(err.root(), Error::Io { .. }));
    }
}
