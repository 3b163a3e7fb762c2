//! Robustness evaluation: white-box and transfer accuracy, budget and
//! iteration sweeps, loss-combination ablations, gradient-masking checks and
//! report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attacks::{generate, AttackSpec};
use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::grad::{CustomOp, Graph, Tensor, Var};
use crate::losses::LossWeights;
use crate::model::{argmax_rows, Classifier, Mode};
use crate::seed::derive_seed;
use crate::training::TrainLog;

/// Predicted classes with evaluation-mode statistics.
pub fn predict_labels(model: &dyn Classifier, x: &Array2<f64>) -> Result<Vec<usize>> {
    let g = Graph::new();
    let xv = g.constant(x.clone().into_dyn());
    let logits = model.logits(&g, xv, Mode::Eval)?;
    let logits: Array2<f64> = (*g.value(logits))
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Shape {
            op: "predict_labels",
            shapes: vec![g.shape(logits)],
        })?;
    Ok(argmax_rows(&logits))
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn check_nonempty(batches: &[Batch]) -> Result<usize> {
    let total: usize = batches.iter().map(|b| b.labels.len()).sum();
    if total == 0 {
        return Err(invalid("evaluation set is empty"));
    }
    Ok(total)
}

pub fn clean_accuracy(model: &dyn Classifier, batches: &[Batch]) -> Result<f64> {
    let total = check_nonempty(batches)?;
    let mut correct = 0;
    for b in batches {
        let pred = predict_labels(model, &b.waveforms)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(percent(correct, total))
}

/// Summary of per-utterance SNR values in dB. Unperturbed utterances
/// (infinite SNR) are counted but left out of the statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnrStats {
    pub mean_db: Option<f64>,
    pub min_db: Option<f64>,
    pub max_db: Option<f64>,
    pub finite: usize,
    pub unperturbed: usize,
}

impl SnrStats {
    pub fn from_values(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let unperturbed = values.iter().filter(|v| **v == f64::INFINITY).count();
        if finite.is_empty() {
            return Self {
                unperturbed,
                ..Self::default()
            };
        }
        Self {
            mean_db: Some(finite.iter().sum::<f64>() / finite.len() as f64),
            min_db: Some(finite.iter().copied().fold(f64::INFINITY, f64::min)),
            max_db: Some(finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            finite: finite.len(),
            unperturbed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// Percent of utterances still classified correctly.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub snr: SnrStats,
    pub max_linf: f64,
    pub sinkhorn_warnings: usize,
}

/// White-box accuracy: adversaries crafted on `target` itself.
pub fn accuracy_under_attack(
    target: &dyn Classifier,
    batches: &[Batch],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome> {
    transfer_eval(target, target, batches, spec, seed)
}

/// Adversaries crafted on `source` (evaluation-mode statistics) and scored on
/// `target`. Batch `b` uses attack seed `derive_seed(seed, [b])`, so passing
/// the same model twice reproduces the white-box number exactly.
pub fn transfer_eval(
    source: &dyn Classifier,
    target: &dyn Classifier,
    batches: &[Batch],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome> {
    spec.validate()?;
    let total = check_nonempty(batches)?;
    if source.num_classes() != target.num_classes() {
        return Err(invalid(format!(
            "source has {} classes, target has {}",
            source.num_classes(),
            target.num_classes()
        )));
    }
    let mut correct = 0;
    let mut snr = Vec::with_capacity(total);
    let mut max_linf = 0.0f64;
    let mut sinkhorn_warnings = 0;
    for (b, batch) in batches.iter().enumerate() {
        let adv = generate(
            source,
            &batch.waveforms,
            &batch.labels,
            spec,
            Mode::Eval,
            derive_seed(seed, &[b as u64]),
        )?;
        let pred = predict_labels(target, &adv.x_adv)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        snr.extend(adv.snr_db);
        max_linf = max_linf.max(adv.linf);
        sinkhorn_warnings += adv.sinkhorn_warnings;
    }
    Ok(AttackOutcome {
        accuracy: percent(correct, total),
        correct,
        total,
        snr: SnrStats::from_values(&snr),
        max_linf,
        sinkhorn_warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub attack: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    /// Columns `x,accuracy,attack,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,accuracy,attack,seed\n");
        for p in &self.points {
            writeln!(out, "{},{:.2},{},{}", p.x, p.accuracy, self.attack, self.seed).unwrap();
        }
        out
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.accuracy).collect()
    }
}

fn check_ascending(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(invalid(format!("{what} list is empty")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(format!("{what} values must be strictly ascending")));
    }
    Ok(())
}

/// Accuracy of `template` at each budget, with the step size reset to
/// `epsilon / 5` at every point. A zero budget is the clean accuracy.
pub fn epsilon_sweep(
    target: &dyn Classifier,
    batches: &[Batch],
    template: &AttackSpec,
    epsilons: &[f64],
    seed: u64,
) -> Result<Curve> {
    check_ascending(epsilons, "epsilon")?;
    if epsilons[0] < 0.0 {
        return Err(invalid("epsilon values must be non-negative"));
    }
    let mut points = Vec::new();
    for &eps in epsilons {
        let spec = AttackSpec {
            epsilon: eps,
            alpha: eps / 5.0,
            ..template.clone()
        };
        points.push(CurvePoint {
            x: eps,
            accuracy: accuracy_under_attack(target, batches, &spec, seed)?.accuracy,
        });
    }
    Ok(Curve {
        attack: template.name(),
        seed,
        points,
    })
}

/// Accuracy of `template` at each iteration count. `T = 1` is the
/// one-full-step attack (step equal to the budget, no random start).
pub fn iteration_sweep(
    target: &dyn Classifier,
    batches: &[Batch],
    template: &AttackSpec,
    counts: &[usize],
    seed: u64,
) -> Result<Curve> {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    check_ascending(&as_f, "iteration")?;
    if counts[0] == 0 {
        return Err(invalid("iteration counts must be at least 1"));
    }
    let mut points = Vec::new();
    for &t in counts {
        let spec = if t == 1 {
            AttackSpec {
                alpha: template.epsilon,
                iterations: 1,
                random_init: false,
                ..template.clone()
            }
        } else {
            template.with_iterations(t)
        };
        points.push(CurvePoint {
            x: t as f64,
            accuracy: accuracy_under_attack(target, batches, &spec, seed)?.accuracy,
        });
    }
    Ok(Curve {
        attack: template.family(),
        seed,
        points,
    })
}

/// The seven non-empty subsets of {CE, FS, M} with unit weights, full
/// combination first.
pub fn loss_subsets() -> Vec<LossWeights> {
    let mut out: Vec<LossWeights> = (1..8u8)
        .map(|m| LossWeights::new((m & 1) as f64, ((m >> 1) & 1) as f64, ((m >> 2) & 1) as f64))
        .collect();
    out.sort_by_key(|w| std::cmp::Reverse((w.beta + w.gamma + w.zeta) as u8));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub weights: LossWeights,
    pub label: String,
    pub accuracy: Vec<f64>,
    /// Full combination minus this row, per attack column.
    pub difference: Vec<f64>,
    /// Every training epoch logged exactly these inner-loss weights.
    pub audited: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub attacks: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn render(&self) -> String {
        let mut out = format!("{:<10}", "Loss");
        for a in &self.attacks {
            write!(out, " | {a:>8} | {:>8}", "diff").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{:<10}", r.label).unwrap();
            for (acc, d) in r.accuracy.iter().zip(&r.difference) {
                write!(out, " | {acc:>8.2} | {d:>8.2}").unwrap();
            }
            if !r.audited {
                out.push_str("  (weights not confirmed by train log)");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per loss subset through `train_recipe` and scores each
/// under `attacks`. The recipe returns the trained model and its log; the log
/// is checked to confirm the subset was actually used.
pub fn ablation_grid(
    batches: &[Batch],
    attacks: &[AttackSpec],
    seed: u64,
    train_recipe: &mut dyn FnMut(LossWeights) -> Result<(Box<dyn Classifier>, TrainLog)>,
) -> Result<AblationGrid> {
    if attacks.is_empty() {
        return Err(invalid("ablation needs at least one attack"));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for weights in loss_subsets() {
        let (model, log) = train_recipe(weights)?;
        let audited = !log.records.is_empty() && log.records.iter().all(|r| r.attack_weights == Some(weights));
        let mut accuracy = Vec::new();
        for spec in attacks {
            accuracy.push(accuracy_under_attack(model.as_ref(), batches, spec, seed)?.accuracy);
        }
        rows.push(AblationRow {
            weights,
            label: weights.label(),
            accuracy,
            difference: Vec::new(),
            audited,
        });
    }
    let full = rows[0].accuracy.clone();
    for r in &mut rows {
        r.difference = full.iter().zip(&r.accuracy).map(|(f, a)| f - a).collect();
    }
    Ok(AblationGrid {
        attacks: attacks.iter().map(AttackSpec::name).collect(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub large_epsilon: f64,
    /// Accuracy at `large_epsilon` must not exceed this percentage.
    pub large_epsilon_ceiling: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            iterations: 10,
            large_epsilon: 0.1,
            large_epsilon_ceiling: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub passed: bool,
    pub evidence: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    /// Transferred adversaries are no stronger than white-box ones.
    pub black_box_weaker: Check,
    /// Iterative PGD is at least as strong as FGSM.
    pub iterative_stronger: Check,
    /// Accuracy collapses at a large budget.
    pub large_budget_collapse: Check,
}

impl MaskingReport {
    pub fn all_passed(&self) -> bool {
        self.black_box_weaker.passed && self.iterative_stronger.passed && self.large_budget_collapse.passed
    }
}

/// The three gradient-masking sanity checks on `target`, with transfer
/// adversaries crafted on `source`.
pub fn masking_checks(
    target: &dyn Classifier,
    source: &dyn Classifier,
    batches: &[Batch],
    config: &MaskingConfig,
    seed: u64,
) -> Result<MaskingReport> {
    let fgsm = AttackSpec::fgsm(config.epsilon);
    let pgd = AttackSpec::pgd(config.epsilon, config.iterations);
    let cw = AttackSpec::cw(config.epsilon, config.iterations);

    let mut pass_a = true;
    let mut evidence_a = Vec::new();
    let mut white = BTreeMap::new();
    for spec in [&fgsm, &pgd, &cw] {
        let w = accuracy_under_attack(target, batches, spec, seed)?.accuracy;
        let b = transfer_eval(source, target, batches, spec, seed)?.accuracy;
        pass_a &= b >= w;
        evidence_a.push(format!("{}: black-box {b:.2} vs white-box {w:.2}", spec.name()));
        white.insert(spec.name(), w);
    }
    let (f, p) = (white[&fgsm.name()], white[&pgd.name()]);
    let large = AttackSpec::pgd(config.large_epsilon, config.iterations);
    let l = accuracy_under_attack(target, batches, &large, seed)?.accuracy;
    Ok(MaskingReport {
        black_box_weaker: Check {
            passed: pass_a,
            evidence: evidence_a.join("; "),
        },
        iterative_stronger: Check {
            passed: p <= f,
            evidence: format!("{} {p:.2} vs FGSM {f:.2}", pgd.name()),
        },
        large_budget_collapse: Check {
            passed: l <= config.large_epsilon_ceiling,
            evidence: format!(
                "{} at eps {} gives {l:.2} (ceiling {:.2})",
                large.name(),
                config.large_epsilon,
                config.large_epsilon_ceiling
            ),
        },
    })
}

/// Rounds inputs to a fixed grid and passes gradient only at points already
/// on it. Wrapping a model with this masks gradients by construction: a
/// single step from grid-aligned data sees the true gradient, a random start
/// sees none.
pub struct QuantizedInput<M> {
    pub inner: M,
    pub step: f64,
}

impl<M: Classifier> QuantizedInput<M> {
    /// Grid of 16-bit PCM.
    pub fn pcm16(inner: M) -> Self {
        Self {
            inner,
            step: 1.0 / 32768.0,
        }
    }

    /// Snaps waveforms onto the grid.
    pub fn snap(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| (v / self.step).round() * self.step)
    }
}

struct Quantize {
    step: f64,
}

impl CustomOp for Quantize {
    fn name(&self) -> &'static str {
        "quantize"
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        input.mapv(|v| (v / self.step).round() * self.step)
    }

    fn backward(&self, input: &Tensor, output: &Tensor, grad_output: &Tensor) -> Tensor {
        let mut grad = grad_output.clone();
        grad.zip_mut_with(&(input - output), |g, d| {
            if *d != 0.0 {
                *g = 0.0
            }
        });
        grad
    }
}

impl<M: Classifier> Classifier for QuantizedInput<M> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn min_samples(&self) -> usize {
        self.inner.min_samples()
    }

    fn logits(&self, g: &Graph, x: Var, mode: Mode) -> Result<Var> {
        let q = g.custom(x, Rc::new(Quantize { step: self.step }));
        self.inner.logits(g, q, mode)
    }
}

/// One evaluated scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// Row label, usually the defense.
    pub model: String,
    pub checkpoint: String,
    /// Source checkpoint for transfer attacks.
    pub source: Option<String>,
    /// `Clean`, `FGSM`, `PGD10`, ...
    pub attack: String,
    pub spec: Option<AttackSpec>,
    pub epsilon: f64,
    pub iterations: usize,
    pub accuracy: f64,
    pub snr: SnrStats,
    pub seed: u64,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    /// Seconds since the Unix epoch; left out in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

/// Append-only collection of report entries, one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub entries: Vec<ReportEntry>,
}

impl RobustnessReport {
    pub fn push(&mut self, entry: ReportEntry) -> Result<()> {
        if !(0.0..=100.0).contains(&entry.accuracy) {
            return Err(invalid(format!("accuracy {} outside [0, 100]", entry.accuracy)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            report.push(serde_json::from_str(line)?)?;
        }
        Ok(report)
    }

    pub fn clean_accuracy(&self, model: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.model == model && e.spec.is_none())
            .map(|e| e.accuracy)
    }

    /// White-box accuracy for `(model, attack name, epsilon)`.
    pub fn accuracy(&self, model: &str, attack: &str, epsilon: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.model == model && e.attack == attack && e.epsilon == epsilon && e.source.is_none())
            .map(|e| e.accuracy)
    }
}

/// Clean, FGSM, then PGD/CW/FS at each iteration count.
pub fn table_attacks(epsilon: f64, iterations: &[usize]) -> Vec<AttackSpec> {
    let mut out = vec![AttackSpec::fgsm(epsilon)];
    for make in [AttackSpec::pgd, AttackSpec::cw, AttackSpec::fs] {
        for &t in iterations {
            out.push(make(epsilon, t));
        }
    }
    out
}

/// Identifies where a report row came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntryMeta {
    pub model: String,
    pub checkpoint: String,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    pub timestamp: Option<u64>,
}

impl EntryMeta {
    fn entry(&self, attack: String, spec: Option<AttackSpec>, accuracy: f64, snr: SnrStats, seed: u64) -> ReportEntry {
        ReportEntry {
            model: self.model.clone(),
            checkpoint: self.checkpoint.clone(),
            source: None,
            epsilon: spec.as_ref().map_or(0.0, |s| s.epsilon),
            iterations: spec.as_ref().map_or(0, |s| s.iterations),
            attack,
            spec,
            accuracy,
            snr,
            seed,
            config_fingerprint: self.config_fingerprint.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Clean accuracy plus white-box accuracy under each of `attacks`.
pub fn evaluate_model(
    model: &dyn Classifier,
    batches: &[Batch],
    attacks: &[AttackSpec],
    seed: u64,
    meta: &EntryMeta,
) -> Result<RobustnessReport> {
    let mut report = RobustnessReport::default();
    let clean = clean_accuracy(model, batches)?;
    report.push(meta.entry("Clean".into(), None, clean, SnrStats::default(), seed))?;
    for spec in attacks {
        let outcome = accuracy_under_attack(model, batches, spec, seed)?;
        report.push(meta.entry(spec.name(), Some(spec.clone()), outcome.accuracy, outcome.snr, seed))?;
    }
    Ok(report)
}

/// Transfer entry: adversaries from `source_meta`'s model scored on `meta`'s.
pub fn transfer_entry(
    source: &dyn Classifier,
    target: &dyn Classifier,
    batches: &[Batch],
    spec: &AttackSpec,
    seed: u64,
    meta: &EntryMeta,
    source_checkpoint: &str,
) -> Result<ReportEntry> {
    let outcome = transfer_eval(source, target, batches, spec, seed)?;
    let mut e = meta.entry(spec.name(), Some(spec.clone()), outcome.accuracy, outcome.snr, seed);
    e.source = Some(source_checkpoint.to_string());
    Ok(e)
}

fn column_rank(name: &str) -> (usize, usize, String) {
    let family = ["Clean", "FGSM", "PGD", "CW", "FS", "HYB"];
    let digits = name.trim_start_matches(|c: char| !c.is_ascii_digit());
    let stem = &name[..name.len() - digits.len()];
    let t = digits.parse().unwrap_or(0);
    let rank = family.iter().position(|f| *f == stem).unwrap_or(family.len());
    (rank, t, name.to_string())
}

/// Table of white-box accuracies: one row per model, one column per attack
/// name, clean first. All reports must share a corpus fingerprint.
pub fn render_table(reports: &[RobustnessReport]) -> Result<String> {
    let entries: Vec<&ReportEntry> = reports
        .iter()
        .flat_map(|r| &r.entries)
        .filter(|e| e.source.is_none())
        .collect();
    if let Some(first) = entries.first() {
        if let Some(other) = entries
            .iter()
            .find(|e| e.corpus_fingerprint != first.corpus_fingerprint)
        {
            return Err(invalid(format!(
                "reports use different corpora ({} for {}, {} for {})",
                first.corpus_fingerprint, first.model, other.corpus_fingerprint, other.model
            )));
        }
    }
    let epsilons: Vec<f64> = entries.iter().filter(|e| e.spec.is_some()).map(|e| e.epsilon).collect();
    let mut columns: Vec<String> = entries.iter().map(|e| e.attack.clone()).collect();
    columns.sort_by_key(|c| column_rank(c));
    columns.dedup();
    let mut models: Vec<String> = Vec::new();
    for e in &entries {
        if !models.contains(&e.model) {
            models.push(e.model.clone());
        }
    }
    let width = models.iter().map(String::len).max().unwrap_or(0).max("Defense".len());
    let mut out = String::new();
    if let Some(&eps) = epsilons.first() {
        if epsilons.iter().all(|&e| e == eps) {
            writeln!(out, "White-box accuracy (%), epsilon = {eps}").unwrap();
        }
    }
    write!(out, "{:<width$}", "Defense").unwrap();
    for c in &columns {
        write!(out, " | {c:>7}").unwrap();
    }
    out.push('\n');
    write!(out, "{}", "-".repeat(width)).unwrap();
    for _ in &columns {
        out.push_str("-|--------");
    }
    out.push('\n');
    for m in &models {
        write!(out, "{m:<width$}").unwrap();
        for c in &columns {
            match entries.iter().rev().find(|e| &e.model == m && &e.attack == c) {
                Some(e) => write!(out, " | {:>7.2}", e.accuracy).unwrap(),
                None => write!(out, " | {:>7}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
