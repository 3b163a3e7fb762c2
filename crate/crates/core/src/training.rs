//! Standard and adversarial training.
//!
//! Every defense minimizes `w1 * CE(x) + w2 * CE(x_adv)` with SGD and
//! momentum; they differ only in how `x_adv` is produced. Standard training
//! minimizes `CE(x)` alone.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attacks::{generate, AttackSpec};
use crate::data::{batches, Crop, Utterance};
use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Tensor};
use crate::losses::{ce_loss, LossWeights};
use crate::model::{argmax_rows, Mode, ModelParams, SpeakerModel};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Standard,
    FgsmAt,
    PgdAt,
    FsAt,
    Hat,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [Self::Standard, Self::FgsmAt, Self::PgdAt, Self::FsAt, Self::Hat];

    pub fn label(self) -> &'static str {
        match self {
            Self::Standard => "Standard",
            Self::FgsmAt => "FGSM-AT",
            Self::PgdAt => "PGD-AT",
            Self::FsAt => "FS-AT",
            Self::Hat => "HAT",
        }
    }
}

/// Learning rate `lr` applies through epoch `until_epoch` (1-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub until_epoch: usize,
    pub lr: f64,
}

/// 0.1 through epoch 60, 0.01 through 90, 0.001 through 200.
pub fn full_scale_schedule() -> Vec<LrStep> {
    vec![
        LrStep {
            until_epoch: 60,
            lr: 0.1,
        },
        LrStep {
            until_epoch: 90,
            lr: 0.01,
        },
        LrStep {
            until_epoch: 200,
            lr: 0.001,
        },
    ]
}

/// Piecewise-constant rate for 1-based `epoch`; the last step extends past
/// its threshold.
pub fn lr_at(schedule: &[LrStep], epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(invalid("epochs are numbered from 1"));
    }
    let last = schedule.last().ok_or_else(|| invalid("empty learning-rate schedule"))?;
    Ok(schedule.iter().find(|s| epoch <= s.until_epoch).unwrap_or(last).lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for OuterWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub defense: DefenseKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<LrStep>,
    pub momentum: f64,
    #[serde(default)]
    pub outer_weights: OuterWeights,
    /// Budget, steps and (for HAT) loss weights of the inner attack.
    pub attack: AttackSpec,
    /// Crop length in samples.
    pub segment_length: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.lr_schedule.is_empty() {
            return fail("train.lr_schedule must not be empty".into());
        }
        for (i, s) in self.lr_schedule.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return fail(format!("train.lr_schedule[{i}].lr must be positive, got {}", s.lr));
            }
            if i > 0 && s.until_epoch <= self.lr_schedule[i - 1].until_epoch {
                return fail(format!("train.lr_schedule[{i}].until_epoch must increase"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        let OuterWeights { w1, w2 } = self.outer_weights;
        if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) || w1 + w2 == 0.0 {
            return fail(format!(
                "train.outer_weights must be >= 0 and not both zero, got ({w1}, {w2})"
            ));
        }
        if self.segment_length == 0 {
            return fail("train.segment_length must be positive".into());
        }
        if self.defense != DefenseKind::Standard {
            self.attack.validate().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("train.{m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// The attack actually run during training, or `None` for standard
    /// training. FGSM-AT, PGD-AT and FS-AT fix the loss weights; HAT uses the
    /// configured ones.
    pub fn inner_attack(&self) -> Option<AttackSpec> {
        let a = &self.attack;
        match self.defense {
            DefenseKind::Standard => None,
            DefenseKind::FgsmAt => Some(AttackSpec {
                sinkhorn: a.sinkhorn,
                margin: a.margin,
                ..AttackSpec::fgsm(a.epsilon)
            }),
            DefenseKind::PgdAt => Some(AttackSpec {
                weights: LossWeights::CE,
                ..a.clone()
            }),
            DefenseKind::FsAt => Some(AttackSpec {
                weights: LossWeights::FS,
                ..a.clone()
            }),
            DefenseKind::Hat => Some(a.clone()),
        }
    }
}

/// `v' = momentum * v + g`, `theta' = theta - lr * v'`. Nothing is modified
/// when any gradient entry is non-finite.
pub fn sgd_momentum_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid("parameter, gradient and velocity lists differ in length"));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_momentum_update",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec(), v.shape().to_vec()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        v.zip_mut_with(g, |v, &g| *v = momentum * *v + g);
        p.zip_mut_with(v, |p, &v| *p -= lr * v);
    }
    Ok(())
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SpeakerModel,
    pub velocity: Vec<Tensor>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: SpeakerModel) -> Self {
        let velocity = model
            .params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.raw_dim()))
            .collect();
        Self {
            model,
            velocity,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of `CE(x)`.
    pub clean_loss: f64,
    /// Mean over batches of `CE(x_adv)`; absent for standard training.
    pub adv_loss: Option<f64>,
    /// Percent of training crops classified correctly during the clean pass.
    pub train_accuracy: f64,
    pub learning_rate: f64,
    pub wall_time_s: f64,
    pub batches: usize,
    /// Attack loss weights in effect, for auditing.
    pub attack_weights: Option<LossWeights>,
    /// Largest perturbation seen over the epoch.
    pub max_linf: f64,
    pub sinkhorn_warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogHeader {
    pub defense: DefenseKind,
    pub attack: Option<AttackSpec>,
    pub outer_weights: OuterWeights,
    pub seed: u64,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub header: TrainLogHeader,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Header line followed by one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).unwrap();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = serde_json::from_str(lines.next().ok_or_else(|| invalid("empty train log"))?)?;
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, records })
    }
}

/// Runtime switches that do not change the math.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Report zero wall time so logs compare byte for byte.
    pub deterministic: bool,
}

fn grads_of(g: &Graph, params: &[crate::grad::Var], like: &ModelParams) -> Vec<Tensor> {
    params
        .iter()
        .zip(&like.tensors)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.raw_dim())))
        .collect()
}

/// One pass over `train` (epoch `state.epoch + 1`). On any failure the state
/// is left exactly as it was.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[&Utterance],
    config: &TrainConfig,
    seed: u64,
    options: TrainOptions,
) -> Result<EpochRecord> {
    let snapshot = (state.model.params.clone(), state.velocity.clone());
    let result = run_epoch(state, train, config, seed, options);
    if result.is_err() {
        state.model.params = snapshot.0;
        state.velocity = snapshot.1;
    }
    result
}

fn run_epoch(
    state: &mut TrainState,
    train: &[&Utterance],
    config: &TrainConfig,
    seed: u64,
    options: TrainOptions,
) -> Result<EpochRecord> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let started = Instant::now();
    let epoch = state.epoch + 1;
    let lr = lr_at(&config.lr_schedule, epoch)?;
    let attack = config.inner_attack();
    let OuterWeights { w1, w2 } = config.outer_weights;
    let list = batches(
        train,
        config.batch_size,
        config.segment_length,
        Crop::Random {
            seed,
            epoch: epoch as u64,
        },
    )?;

    let (mut clean_sum, mut adv_sum, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
    let (mut max_linf, mut sinkhorn_warnings) = (0.0f64, 0usize);
    for (b, batch) in list.iter().enumerate() {
        let x = &batch.waveforms;
        let y = &batch.labels;
        let x_adv: Option<Array2<f64>> = match &attack {
            None => None,
            Some(spec) => {
                let attack_seed = derive_seed(seed, &[epoch as u64, b as u64]);
                let adv = generate(&state.model, x, y, spec, Mode::Train, attack_seed)?;
                if !(adv.linf <= spec.epsilon + 1e-12) {
                    return Err(invalid(format!(
                        "training adversary left the budget: {} > {}",
                        adv.linf, spec.epsilon
                    )));
                }
                max_linf = max_linf.max(adv.linf);
                sinkhorn_warnings += adv.sinkhorn_warnings;
                Some(adv.x_adv)
            }
        };

        let g = Graph::new();
        let params = state.model.bind(&g, true);
        let xv = g.constant(x.clone().into_dyn());
        let clean = state.model.forward_bound(&g, params.clone(), xv, Mode::Train)?;
        let clean_ce = ce_loss(&g, clean.logits, y)?;
        let mut stats = vec![clean.batch_stats(&g).expect("train-mode statistics")];
        let (loss, adv_ce) = match &x_adv {
            None => (clean_ce, None),
            Some(xa) => {
                let av = g.constant(xa.clone().into_dyn());
                let adv = state.model.forward_bound(&g, params.clone(), av, Mode::Train)?;
                let adv_ce = ce_loss(&g, adv.logits, y)?;
                stats.push(adv.batch_stats(&g).expect("train-mode statistics"));
                let mut terms = Vec::new();
                if w1 != 0.0 {
                    terms.push(g.scale(clean_ce, w1));
                }
                if w2 != 0.0 {
                    terms.push(g.scale(adv_ce, w2));
                }
                let total = if terms.len() == 2 {
                    g.add(terms[0], terms[1])?
                } else {
                    terms[0]
                };
                (total, Some(adv_ce))
            }
        };
        let loss_value = g.scalar(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
        }
        g.backward(loss)?;
        let grads = grads_of(&g, &params, &state.model.params);
        sgd_momentum_update(
            &mut state.model.params.tensors,
            &grads,
            &mut state.velocity,
            lr,
            config.momentum,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
            other => other,
        })?;
        for s in &stats {
            state.model.params.commit_running_stats(s)?;
        }

        clean_sum += g.scalar(clean_ce)?;
        if let Some(a) = adv_ce {
            adv_sum += g.scalar(a)?;
        }
        let logits: Array2<f64> = (*g.value(clean.logits)).clone().into_dimensionality().unwrap();
        correct += argmax_rows(&logits).iter().zip(y).filter(|(p, t)| p == t).count();
        seen += y.len();
    }

    state.epoch = epoch;
    let n = list.len() as f64;
    Ok(EpochRecord {
        epoch,
        clean_loss: clean_sum / n,
        adv_loss: attack.as_ref().map(|_| adv_sum / n),
        train_accuracy: 100.0 * correct as f64 / seen as f64,
        learning_rate: lr,
        wall_time_s: if options.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        },
        batches: list.len(),
        attack_weights: attack.map(|a| a.weights),
        max_linf,
        sinkhorn_warnings,
    })
}

/// Runs the remaining epochs of `config`, calling `after_epoch` once per
/// completed epoch (for checkpointing and log streaming).
pub fn train(
    state: &mut TrainState,
    train_set: &[&Utterance],
    config: &TrainConfig,
    seed: u64,
    options: TrainOptions,
    after_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    while state.epoch < config.epochs {
        let record = train_epoch(state, train_set, config, seed, options)?;
        after_epoch(state, &record)?;
        records.push(record);
    }
    Ok(records)
}
