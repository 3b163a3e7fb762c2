//! A validated config bound to its corpus: model construction, training,
//! checkpoint compatibility and evaluation batches.

use std::path::Path;

use crate::attacks::AttackSpec;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{batches, Batch, Corpus, Crop, Split};
use crate::error::{Error, Result};
use crate::eval::{table_attacks, EntryMeta};
use crate::losses::LossWeights;
use crate::model::SpeakerModel;
use crate::seed::derive_seed;
use crate::training::{train, DefenseKind, EpochRecord, TrainLog, TrainLogHeader, TrainOptions, TrainState};

#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
}

impl Experiment {
    /// Loads the corpus; relative directory roots resolve against `base`.
    pub fn new(config: ExperimentConfig, base: &Path) -> Result<Self> {
        let v = config.validate();
        if !v.is_ok() {
            return Err(Error::Config(v.violations.join("; ")));
        }
        let corpus = config.corpus.load(base)?;
        if corpus.num_speakers() != config.model.num_speakers {
            return Err(Error::Config(format!(
                "model.num_speakers is {} but the corpus has {} speakers",
                config.model.num_speakers,
                corpus.num_speakers()
            )));
        }
        Ok(Self { config, corpus })
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[0])
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[1])
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[2])
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        let model = SpeakerModel::build(
            self.config.frontend.clone(),
            self.config.model.clone(),
            self.model_seed(),
        )?;
        Ok(TrainState::new(model))
    }

    pub fn log_header(&self) -> TrainLogHeader {
        let t = &self.config.train;
        TrainLogHeader {
            defense: t.defense,
            attack: t.inner_attack(),
            outer_weights: t.outer_weights,
            seed: self.config.seed,
            config_fingerprint: self.config.training_fingerprint(),
        }
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::from_state(
            state,
            Some(self.config.train.defense),
            self.config.seed,
            &self.config.training_fingerprint(),
            &self.corpus.fingerprint,
        )
    }

    /// Trains from `state` (a fresh model when `None`) through
    /// `train.epochs`, calling `after_epoch` after each epoch.
    pub fn train(
        &self,
        state: Option<TrainState>,
        options: TrainOptions,
        after_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
    ) -> Result<(TrainState, TrainLog)> {
        let mut state = match state {
            Some(s) => s,
            None => self.initial_state()?,
        };
        let train_set = self.corpus.split(Split::Train);
        let records = train(
            &mut state,
            &train_set,
            &self.config.train,
            self.train_seed(),
            options,
            after_epoch,
        )?;
        Ok((
            state,
            TrainLog {
                header: self.log_header(),
                records,
            },
        ))
    }

    /// The same experiment trained as HAT with other inner loss weights.
    pub fn with_weights(&self, weights: LossWeights) -> Self {
        let mut e = self.clone();
        e.config.train.defense = DefenseKind::Hat;
        e.config.train.attack.weights = weights;
        e
    }

    /// Errors unless `ckpt` was built for this frontend, architecture and
    /// corpus; a training-fingerprint mismatch alone is allowed, since other
    /// defenses are evaluated under one config.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint, path: &Path) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            })
        };
        if ckpt.frontend != self.config.frontend {
            return fail("frontend settings differ from the config".into());
        }
        if ckpt.model != self.config.model {
            return fail("model architecture differs from the config".into());
        }
        if ckpt.corpus_fingerprint != self.corpus.fingerprint {
            return fail(format!(
                "trained on corpus {} but the config describes corpus {}",
                short(&ckpt.corpus_fingerprint),
                short(&self.corpus.fingerprint)
            ));
        }
        Ok(())
    }

    /// Loads and checks a checkpoint, returning it with its model.
    pub fn load_checkpoint(&self, path: &Path) -> Result<(Checkpoint, SpeakerModel)> {
        let ckpt = Checkpoint::load(path)?;
        self.check_checkpoint(&ckpt, path)?;
        let model = ckpt.to_model()?;
        Ok((ckpt, model))
    }

    /// Center-cropped evaluation batches.
    pub fn eval_batches(&self, split: Split) -> Result<Vec<Batch>> {
        let e = &self.config.eval;
        batches(&self.corpus.split(split), e.batch_size, e.segment_length, Crop::Center)
    }

    /// FGSM and the PGD, CW and FS columns at `eval.epsilon`.
    pub fn table_attacks(&self) -> Vec<AttackSpec> {
        table_attacks(self.config.eval.epsilon, &self.config.eval.table_iterations)
    }

    /// Report metadata for a model loaded from `ckpt` at `path`.
    pub fn entry_meta(&self, ckpt: &Checkpoint, path: &Path, timestamp: Option<u64>) -> EntryMeta {
        let file = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        EntryMeta {
            model: ckpt
                .defense
                .map_or_else(|| "Model".to_string(), |d| d.label().to_string()),
            checkpoint: format!("{file}@{}", short(&ckpt.fingerprint())),
            config_fingerprint: self.config.fingerprint(),
            corpus_fingerprint: self.corpus.fingerprint.clone(),
            timestamp,
        }
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
