//! 1-D CNN speaker classifier on top of the log-Mel front-end.
//!
//! Each stack is `conv1d -> batch norm -> ReLU`, with max pooling after every
//! `pool_every`-th stack. A global average over time feeds the affine output
//! layer, so the logits do not depend on input length beyond the receptive field.

use ndarray::{Array1, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frontend::{FrontendConfig, LogMel};
use crate::grad::{BatchStats, Graph, NormMode, Tensor, Var};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerCnnConfig {
    pub num_stacks: usize,
    pub channels_per_stack: Vec<usize>,
    pub kernel_size: usize,
    pub pool_every: usize,
    #[serde(default = "default_pool_width")]
    pub pool_width: usize,
    pub num_speakers: usize,
}

fn default_pool_width() -> usize {
    2
}

impl SpeakerCnnConfig {
    /// Eight stacks with pooling after every second one.
    pub fn full_scale(num_speakers: usize) -> Self {
        Self {
            num_stacks: 8,
            channels_per_stack: vec![16, 16, 32, 32, 64, 64, 128, 128],
            kernel_size: 5,
            pool_every: 2,
            pool_width: 2,
            num_speakers,
        }
    }

    /// Two stacks of eight channels.
    pub fn tiny(num_speakers: usize) -> Self {
        Self {
            num_stacks: 2,
            channels_per_stack: vec![8, 8],
            kernel_size: 5,
            pool_every: 2,
            pool_width: 2,
            num_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_stacks == 0 {
            return fail("model.num_stacks must be at least 1".into());
        }
        if self.channels_per_stack.len() != self.num_stacks {
            return fail(format!(
                "model.channels_per_stack has {} entries but num_stacks is {}",
                self.channels_per_stack.len(),
                self.num_stacks
            ));
        }
        if self.channels_per_stack.contains(&0) {
            return fail("model.channels_per_stack entries must be positive".into());
        }
        if self.kernel_size == 0 {
            return fail("model.kernel_size must be positive".into());
        }
        if self.pool_every == 0 || self.pool_width == 0 {
            return fail("model.pool_every and model.pool_width must be positive".into());
        }
        if self.num_speakers < 2 {
            return fail(format!(
                "model.num_speakers must be at least 2, got {}",
                self.num_speakers
            ));
        }
        Ok(())
    }

    pub fn pools_after(&self, stack: usize) -> bool {
        (stack + 1).is_multiple_of(self.pool_every)
    }

    pub fn num_pools(&self) -> usize {
        (0..self.num_stacks).filter(|&i| self.pools_after(i)).count()
    }

    /// Time steps left after the conv stack for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        let mut len = frames;
        for i in 0..self.num_stacks {
            len = len.checked_sub(self.kernel_size - 1).filter(|&l| l > 0)?;
            if self.pools_after(i) {
                len /= self.pool_width;
                if len == 0 {
                    return None;
                }
            }
        }
        Some(len)
    }

    pub fn min_frames(&self) -> usize {
        (1..).find(|&f| self.output_frames(f).is_some()).unwrap()
    }

    /// Shortest waveform, in samples, accepted by the full model.
    pub fn min_samples(&self, frontend: &FrontendConfig) -> usize {
        frontend.window_length + (self.min_frames() - 1) * frontend.hop_length
    }
}

/// Batch-norm behavior for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; the pass reports them for a later running-stat update.
    Train,
    /// Running statistics; a deterministic pure function of the input.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// All learned state of a [`SpeakerModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Trainable tensors in [`ModelParams::names`] order.
    pub tensors: Vec<Tensor>,
    pub running: Vec<RunningStats>,
}

impl ModelParams {
    pub fn init(config: &SpeakerCnnConfig, input_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_channels == 0 {
            return Err(invalid("model input needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut running = Vec::new();
        let mut c_in = input_channels;
        let mut he = |shape: &[usize], fan_in: usize| -> Tensor {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            Tensor::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng))
        };
        for &c_out in &config.channels_per_stack {
            tensors.push(he(&[c_out, c_in, config.kernel_size], c_in * config.kernel_size));
            tensors.push(Tensor::zeros(IxDyn(&[c_out])));
            tensors.push(Tensor::ones(IxDyn(&[c_out])));
            tensors.push(Tensor::zeros(IxDyn(&[c_out])));
            running.push(RunningStats {
                mean: Array1::zeros(c_out),
                var: Array1::ones(c_out),
            });
            c_in = c_out;
        }
        tensors.push(he(&[config.num_speakers, c_in], c_in));
        tensors.push(Tensor::zeros(IxDyn(&[config.num_speakers])));
        Ok(Self { tensors, running })
    }

    pub fn names(config: &SpeakerCnnConfig) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..config.num_stacks {
            for part in ["conv.weight", "conv.bias", "norm.gamma", "norm.beta"] {
                names.push(format!("stack{i}.{part}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Folds one training-mode pass into the running statistics, using the
    /// unbiased batch variance.
    pub fn commit_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(invalid(format!(
                "expected {} batch-norm statistics, got {}",
                self.running.len(),
                stats.len()
            )));
        }
        for (run, st) in self.running.iter_mut().zip(stats) {
            let correction = if st.count > 1 {
                st.count as f64 / (st.count - 1) as f64
            } else {
                1.0
            };
            run.mean = &run.mean * (1.0 - BN_MOMENTUM) + &st.mean * BN_MOMENTUM;
            run.var = &run.var * (1.0 - BN_MOMENTUM) + &st.var * (BN_MOMENTUM * correction);
        }
        Ok(())
    }
}

/// Anything that maps a waveform batch `[n, samples]` to logits `[n, classes]`.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Shortest accepted waveform in samples.
    fn min_samples(&self) -> usize;

    fn logits(&self, g: &Graph, waveforms: Var, mode: Mode) -> Result<Var>;
}

/// Nodes produced by one [`SpeakerModel::forward`] call.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Parameter leaves in [`ModelParams::names`] order.
    pub params: Vec<Var>,
    /// Batch-norm output nodes, one per stack.
    pub norms: Vec<Var>,
}

impl Forward {
    /// Batch statistics of a training-mode pass, in stack order.
    pub fn batch_stats(&self, g: &Graph) -> Option<Vec<BatchStats>> {
        self.norms.iter().map(|&v| g.batch_stats(v)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    frontend: LogMel,
    config: SpeakerCnnConfig,
    pub params: ModelParams,
}

impl SpeakerModel {
    pub fn build(frontend: FrontendConfig, config: SpeakerCnnConfig, seed: u64) -> Result<Self> {
        let frontend = LogMel::new(frontend)?;
        let params = ModelParams::init(&config, frontend.config().mel_bins, seed)?;
        Ok(Self {
            frontend,
            config,
            params,
        })
    }

    pub fn from_parts(frontend: FrontendConfig, config: SpeakerCnnConfig, params: ModelParams) -> Result<Self> {
        let model = Self::build(frontend, config, 0)?;
        if model.params.tensors.len() != params.tensors.len()
            || model
                .params
                .tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| a.shape() != b.shape())
            || model.params.running.len() != params.running.len()
        {
            return Err(invalid("parameter shapes do not match the model config"));
        }
        if params.running.iter().any(|r| r.var.iter().any(|&v| !(v > 0.0))) {
            return Err(invalid("running variance must be positive"));
        }
        Ok(Self { params, ..model })
    }

    pub fn config(&self) -> &SpeakerCnnConfig {
        &self.config
    }

    pub fn frontend(&self) -> &LogMel {
        &self.frontend
    }

    /// Puts the parameters on `g`, as leaves when `trainable`, otherwise as
    /// constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Full forward pass on freshly bound parameters.
    pub fn forward(&self, g: &Graph, waveforms: Var, mode: Mode, trainable: bool) -> Result<Forward> {
        let params = self.bind(g, trainable);
        self.forward_bound(g, params, waveforms, mode)
    }

    /// Forward pass on parameters from [`SpeakerModel::bind`], so several
    /// passes can share one set of leaves.
    pub fn forward_bound(&self, g: &Graph, params: Vec<Var>, waveforms: Var, mode: Mode) -> Result<Forward> {
        if params.len() != self.params.tensors.len() {
            return Err(invalid("bound parameter count does not match the model"));
        }
        let shape = g.shape(waveforms);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "forward_logits",
                shapes: vec![shape],
            });
        }
        let min = self.min_samples();
        if shape[1] < min {
            return Err(Error::InputTooShort {
                len: shape[1],
                required: min,
            });
        }
        let features = self.frontend.apply(g, waveforms)?;
        let mut h = g.permute(features, &[0, 2, 1])?;
        let mut norms = Vec::with_capacity(self.config.num_stacks);
        for i in 0..self.config.num_stacks {
            let p = &params[4 * i..4 * i + 4];
            h = g.conv1d(h, p[0], Some(p[1]), 0)?;
            let norm_mode = match mode {
                Mode::Train => NormMode::Batch,
                Mode::Eval => NormMode::Running {
                    mean: &self.params.running[i].mean,
                    var: &self.params.running[i].var,
                },
            };
            h = g.batch_norm(h, p[2], p[3], norm_mode)?;
            norms.push(h);
            h = g.relu(h);
            if self.config.pools_after(i) {
                h = g.max_pool1d(h, self.config.pool_width)?;
            }
        }
        let pooled = g.mean_axis(h, 2)?;
        let n = params.len();
        let logits = g.linear(pooled, params[n - 2], params[n - 1])?;
        Ok(Forward { logits, params, norms })
    }

    /// Logits for a plain array batch, evaluated outside any caller graph.
    pub fn predict(&self, waveforms: &ndarray::Array2<f64>, mode: Mode) -> Result<ndarray::Array2<f64>> {
        let g = Graph::new();
        let x = g.constant(waveforms.clone().into_dyn());
        let logits = self.logits(&g, x, mode)?;
        Ok((*g.value(logits)).clone().into_dimensionality().unwrap())
    }
}

impl Classifier for SpeakerModel {
    fn num_classes(&self) -> usize {
        self.config.num_speakers
    }

    fn min_samples(&self) -> usize {
        self.config.min_samples(self.frontend.config())
    }

    fn logits(&self, g: &Graph, waveforms: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward(g, waveforms, mode, false)?.logits)
    }
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(logits: &ndarray::Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
