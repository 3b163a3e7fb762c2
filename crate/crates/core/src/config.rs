//! Experiment configuration: a TOML document with `section.key=value`
//! overrides, validation into violations and warnings, and a fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackSpec, DEFAULT_EPSILON, DEFAULT_MARGIN};
use crate::data::{ingest, synth_corpus, Corpus, IngestConfig, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::{LossWeights, SinkhornConfig};
use crate::model::SpeakerCnnConfig;
use crate::training::{DefenseKind, OuterWeights, TrainConfig};

/// Shipped presets as `(name, TOML text)`.
pub const PRESETS: [(&str, &str); 6] = [
    ("desk-standard", include_str!("../presets/desk-standard.toml")),
    ("desk-fgsm-at", include_str!("../presets/desk-fgsm-at.toml")),
    ("desk-pgd-at", include_str!("../presets/desk-pgd-at.toml")),
    ("desk-fs-at", include_str!("../presets/desk-fs-at.toml")),
    ("desk-hat", include_str!("../presets/desk-hat.toml")),
    ("full-hat", include_str!("../presets/full-hat.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryCorpus {
    pub root: PathBuf,
    pub sample_rate: u32,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusConfig {
    Synthetic(SynthConfig),
    /// Per-speaker folders of PCM-16 WAV files.
    Directory(DirectoryCorpus),
}

impl CorpusConfig {
    pub fn sample_rate(&self) -> u32 {
        match self {
            Self::Synthetic(s) => s.sample_rate,
            Self::Directory(d) => d.sample_rate,
        }
    }

    /// Generates or ingests the corpus. Relative directory roots are taken
    /// relative to `base`.
    pub fn load(&self, base: &Path) -> Result<Corpus> {
        match self {
            Self::Synthetic(s) => synth_corpus(s),
            Self::Directory(d) => {
                let manifest = ingest(
                    &base.join(&d.root),
                    &IngestConfig {
                        sample_rate: d.sample_rate,
                        split_seed: d.split_seed,
                    },
                )?;
                manifest.load()
            }
        }
    }
}

/// An attack given either by its conventional name (`PGD10`) or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackRef {
    Name(String),
    Spec(AttackSpec),
}

impl AttackRef {
    pub fn resolve(&self, epsilon: f64) -> Result<AttackSpec> {
        match self {
            Self::Name(n) => parse_attack(n, epsilon),
            Self::Spec(s) => Ok(s.clone()),
        }
    }
}

/// `FGSM`, or a family (`PGD`, `CW`, `FS`, `HYB`) followed by an iteration
/// count, at budget `epsilon`.
pub fn parse_attack(name: &str, epsilon: f64) -> Result<AttackSpec> {
    let upper = name.trim().to_ascii_uppercase();
    if upper == "FGSM" {
        return Ok(AttackSpec::fgsm(epsilon));
    }
    let digits = upper.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    let family = &upper[..upper.len() - digits.len()];
    let iterations: usize = digits
        .parse()
        .map_err(|_| Error::Config(format!("attack name {name:?} needs an iteration count, e.g. PGD10")))?;
    if iterations == 0 {
        return Err(Error::Config(format!(
            "attack name {name:?}: iterations must be at least 1"
        )));
    }
    let make = match family {
        "PGD" => AttackSpec::pgd,
        "CW" => AttackSpec::cw,
        "FS" => AttackSpec::fs,
        "HYB" => AttackSpec::hybrid,
        _ => {
            return Err(Error::Config(format!(
                "unknown attack {name:?}; expected FGSM, PGD<T>, CW<T>, FS<T> or HYB<T>"
            )))
        }
    };
    Ok(make(epsilon, iterations))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalScenario {
    pub target: PathBuf,
    /// Checkpoint the adversaries are crafted on; white-box when absent.
    #[serde(default)]
    pub source: Option<PathBuf>,
    pub attack: AttackRef,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Test
}

fn default_sweep_attack() -> AttackRef {
    AttackRef::Name("PGD100".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub segment_length: usize,
    pub epsilon: f64,
    /// Iteration counts of the PGD, CW and FS columns of the results table.
    pub table_iterations: Vec<usize>,
    #[serde(default)]
    pub sweep_epsilons: Vec<f64>,
    #[serde(default)]
    pub sweep_iterations: Vec<usize>,
    /// Attack whose budget or iteration count the sweeps vary.
    #[serde(default = "default_sweep_attack")]
    pub sweep_attack: AttackRef,
    #[serde(default)]
    pub scenarios: Vec<EvalScenario>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub frontend: FrontendConfig,
    pub model: SpeakerCnnConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Outcome of [`ExperimentConfig::validate`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Validation {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set: malformed key {key:?}")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let here = parts[..=i].join(".");
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("--set {key}: {here} indexes an array and must be a number")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("--set {key}: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::Config(format!(
                    "--set {key}: {} is not a table",
                    parts[..i].join(".")
                )))
            }
        };
    }
    unreachable!("loop returns on the last key part")
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl ExperimentConfig {
    /// Parses a TOML document and applies `key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            // Direct parsing keeps line and column numbers in errors.
            return toml::from_str(text).map_err(|e| Error::Config(e.to_string()));
        }
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            set_path(&mut value, key.trim(), parse_value(v.trim()))?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message())))
    }

    /// Reads `path`, or a shipped preset of that name when no such file
    /// exists.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => match path.to_str().and_then(preset) {
                Some(t) if e.kind() == std::io::ErrorKind::NotFound => t.to_string(),
                _ => return Err(Error::Config(format!("cannot read {}: {e}", path.display()))),
            },
        };
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, ignoring `name` and `out`.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().unwrap();
        obj.remove("name");
        obj.remove("out");
        // serde_json maps are ordered by key, so this text is canonical.
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Fingerprint of the parts that determine a trained model: corpus,
    /// frontend, model, training and seed.
    pub fn training_fingerprint(&self) -> String {
        let v = serde_json::json!({
            "corpus": self.corpus,
            "frontend": self.frontend,
            "model": self.model,
            "train": self.train,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn sweep_attack(&self) -> Result<AttackSpec> {
        self.eval.sweep_attack.resolve(self.eval.epsilon)
    }

    /// Every check, collected rather than stopping at the first failure.
    pub fn validate(&self) -> Validation {
        let mut out = Validation::default();
        let mut violation = |r: Result<()>| {
            if let Err(e) = r {
                out.violations.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        match &self.corpus {
            CorpusConfig::Synthetic(s) => {
                violation(s.validate());
                if s.num_speakers != self.model.num_speakers {
                    violation(Err(Error::Config(format!(
                        "model.num_speakers is {} but corpus.num_speakers is {}",
                        self.model.num_speakers, s.num_speakers
                    ))));
                }
            }
            CorpusConfig::Directory(d) => {
                if d.sample_rate == 0 {
                    violation(Err(Error::Config("corpus.sample_rate must be positive".into())));
                }
            }
        }
        violation(self.frontend.validate());
        violation(self.model.validate());
        violation(self.train.validate());
        if self.corpus.sample_rate() != self.frontend.sample_rate {
            violation(Err(Error::Config(format!(
                "frontend.sample_rate is {} but corpus.sample_rate is {}",
                self.frontend.sample_rate,
                self.corpus.sample_rate()
            ))));
        }
        let min = self.model.min_samples(&self.frontend);
        for (field, len) in [
            ("train.segment_length", self.train.segment_length),
            ("eval.segment_length", self.eval.segment_length),
        ] {
            if len < min {
                violation(Err(Error::Config(format!(
                    "{field} is {len} but the model needs at least {min} samples"
                ))));
            }
        }
        let e = &self.eval;
        if e.batch_size == 0 {
            violation(Err(Error::Config("eval.batch_size must be at least 1".into())));
        }
        if !(e.epsilon >= 0.0 && e.epsilon.is_finite()) {
            violation(Err(Error::Config(format!(
                "eval.epsilon must be finite and >= 0, got {}",
                e.epsilon
            ))));
        }
        if e.table_iterations.is_empty() || e.table_iterations.contains(&0) {
            violation(Err(Error::Config(
                "eval.table_iterations must be nonempty and positive".into(),
            )));
        }
        if e.sweep_epsilons.iter().any(|x| !(*x >= 0.0 && x.is_finite()))
            || e.sweep_epsilons.windows(2).any(|w| w[1] <= w[0])
        {
            violation(Err(Error::Config(
                "eval.sweep_epsilons must be >= 0 and strictly increasing".into(),
            )));
        }
        if e.sweep_iterations.contains(&0) || e.sweep_iterations.windows(2).any(|w| w[1] <= w[0]) {
            violation(Err(Error::Config(
                "eval.sweep_iterations must be positive and strictly increasing".into(),
            )));
        }
        violation(
            self.sweep_attack()
                .and_then(|a| a.validate())
                .map_err(|e| prefix("eval.sweep_attack", e)),
        );
        for (i, s) in e.scenarios.iter().enumerate() {
            let field = format!("eval.scenarios[{i}]");
            violation(
                s.attack
                    .resolve(e.epsilon)
                    .and_then(|a| a.validate())
                    .map_err(|e| prefix(&field, e)),
            );
            if s.source.as_ref() == Some(&s.target) {
                violation(Err(Error::Config(format!(
                    "{field}: transfer source and target are the same checkpoint"
                ))));
            }
        }
        out.warnings = self.warnings();
        out
    }

    /// Values that differ from the reference settings; allowed, but worth a
    /// second look.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let t = &self.train;
        let a = &t.attack;
        let adversarial = t.defense != DefenseKind::Standard;
        if adversarial && a.epsilon != self.eval.epsilon {
            w.push(format!(
                "train.attack.epsilon ({}) differs from eval.epsilon ({})",
                a.epsilon, self.eval.epsilon
            ));
        }
        if adversarial && a.epsilon != DEFAULT_EPSILON {
            w.push(format!(
                "train.attack.epsilon is {}; the reference budget is {DEFAULT_EPSILON}",
                a.epsilon
            ));
        }
        if self.eval.epsilon != DEFAULT_EPSILON {
            w.push(format!(
                "eval.epsilon is {}; the reference budget is {DEFAULT_EPSILON}",
                self.eval.epsilon
            ));
        }
        let iterative = matches!(t.defense, DefenseKind::PgdAt | DefenseKind::FsAt | DefenseKind::Hat);
        if iterative {
            if (a.alpha - a.epsilon / 5.0).abs() > 1e-15 {
                w.push(format!(
                    "train.attack.alpha is {}; the reference step is epsilon / 5 = {}",
                    a.alpha,
                    a.epsilon / 5.0
                ));
            }
            if a.iterations != 10 {
                w.push(format!(
                    "train.attack.iterations is {}; the reference count is 10",
                    a.iterations
                ));
            }
            if !a.random_init {
                w.push("train.attack.random_init is false".into());
            }
        }
        if t.defense == DefenseKind::Hat {
            if a.weights != LossWeights::HYBRID {
                w.push(format!(
                    "train.attack.weights is {}; the reference weighting is 1, 1, 1",
                    a.weights.label()
                ));
            }
            if a.margin != DEFAULT_MARGIN {
                w.push(format!(
                    "train.attack.margin is {}; the reference margin is {DEFAULT_MARGIN}",
                    a.margin
                ));
            }
        }
        if matches!(t.defense, DefenseKind::FsAt | DefenseKind::Hat)
            && a.sinkhorn.regularization != SinkhornConfig::default().regularization
        {
            w.push(format!(
                "train.attack.sinkhorn.regularization is {}; the reference value is 0.01",
                a.sinkhorn.regularization
            ));
        }
        if adversarial && t.outer_weights != OuterWeights::default() {
            w.push(format!(
                "train.outer_weights is ({}, {}); the reference is (1, 1)",
                t.outer_weights.w1, t.outer_weights.w2
            ));
        }
        if t.lr_schedule.last().is_some_and(|s| s.until_epoch < t.epochs) {
            w.push("train.lr_schedule ends before train.epochs; the last rate is kept".into());
        }
        w
    }

    /// Parses and validates, turning violations into one config error.
    pub fn load_valid(path: &Path, overrides: &[String]) -> Result<(Self, Vec<String>)> {
        let cfg = Self::load(path, overrides)?;
        let v = cfg.validate();
        if !v.is_ok() {
            return Err(Error::Config(format!(
                "{}:\n  {}",
                path.display(),
                v.violations.join("\n  ")
            )));
        }
        Ok((cfg, v.warnings))
    }
}

fn prefix(field: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{field}: {m}")),
        other => other,
    }
}
