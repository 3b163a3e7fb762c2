//! Differentiable log-Mel spectrogram.
//!
//! The power spectrum of each Hann-windowed frame is an FFT-backed graph op
//! with an analytic backward pass, so gradients flow from the log-Mel output
//! back to individual waveform samples. [`LogMel::apply_dft`] builds the same
//! spectrum from two DFT-basis matrix products and serves as a reference.

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Axis, IxDyn};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 400,
            hop_length: 160,
            fft_size: 512,
            mel_bins: 40,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return fail("frontend.sample_rate must be positive".into());
        }
        if self.window_length == 0 || self.window_length > self.fft_size {
            return fail(format!(
                "frontend.window_length {} must be in 1..=fft_size ({})",
                self.window_length, self.fft_size
            ));
        }
        if self.hop_length == 0 || self.hop_length > self.window_length {
            return fail(format!(
                "frontend.hop_length {} must be in 1..=window_length ({})",
                self.hop_length, self.window_length
            ));
        }
        if self.mel_bins == 0 {
            return fail("frontend.mel_bins must be at least 1".into());
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return fail(format!("frontend.log_floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    pub fn num_freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((samples - window) / hop) + 1`, or `None` below one window.
    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.window_length).then(|| (samples - self.window_length) / self.hop_length + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `[fft_size / 2 + 1, mel_bins]`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(config: &FrontendConfig) -> Self {
        let bins = config.num_freq_bins();
        let nyquist = config.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..config.mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (config.mel_bins + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((bins, config.mel_bins));
        for m in 0..config.mel_bins {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * config.sample_rate as f64 / config.fft_size as f64;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[[k, m]] = w;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=config.mel_bins].to_vec(),
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn center_hz(&self, bin: usize) -> f64 {
        self.centers_hz[bin]
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// `|FFT(w * frame)|^2` for each row of `[frames, window_length]`, keeping the
/// `fft_size / 2 + 1` non-negative frequencies.
struct PowerSpectrum {
    window: Vec<f64>,
    bins: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    fn new(config: &FrontendConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(config.window_length),
            bins: config.num_freq_bins(),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
        }
    }

    fn spectrum(&self, frame: ndarray::ArrayViewD<f64>, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        buf.fill(Complex64::new(0.0, 0.0));
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.forward.process_with_scratch(buf, scratch);
    }
}

impl CustomOp for PowerSpectrum {
    fn name(&self) -> &'static str {
        "power_spectrum"
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        let rows = input.shape()[0];
        let mut out = Array2::zeros((rows, self.bins));
        let mut buf = vec![Complex64::default(); self.forward.len()];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        for (frame, mut row) in input.axis_iter(Axis(0)).zip(out.outer_iter_mut()) {
            self.spectrum(frame, &mut buf, &mut scratch);
            for (o, b) in row.iter_mut().zip(&buf) {
                *o = b.norm_sqr();
            }
        }
        out.into_dyn()
    }

    // d|X_k|^2 / dx_n = 2 w_n Re(X_k e^{+2 pi i k n / N}), so the input
    // gradient is an unnormalized inverse FFT of g_k X_k over the kept bins.
    fn backward(&self, input: &Tensor, _output: &Tensor, grad_output: &Tensor) -> Tensor {
        let mut grad = Tensor::zeros(input.raw_dim());
        let mut buf = vec![Complex64::default(); self.forward.len()];
        let scratch_len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        for ((frame, g), mut out) in input
            .axis_iter(Axis(0))
            .zip(grad_output.axis_iter(Axis(0)))
            .zip(grad.axis_iter_mut(Axis(0)))
        {
            self.spectrum(frame, &mut buf, &mut scratch);
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < self.bins { *b * g[k] } else { Complex64::default() };
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for ((o, b), &w) in out.iter_mut().zip(&buf).zip(&self.window) {
                *o = 2.0 * w * b.re;
            }
        }
        grad
    }
}

/// Precomputed log-Mel pipeline. Cheap to share across graphs.
#[derive(Clone, Debug)]
pub struct LogMel {
    config: FrontendConfig,
    cos_basis: Rc<Tensor>,
    sin_basis: Rc<Tensor>,
    mel: Rc<Tensor>,
    filterbank: MelFilterbank,
    power: Rc<PowerSpectrum>,
}

impl std::fmt::Debug for PowerSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PowerSpectrum(fft_size = {})", self.forward.len())
    }
}

impl LogMel {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let window = hann(config.window_length);
        let bins = config.num_freq_bins();
        let mut cos_basis = Array2::zeros((config.window_length, bins));
        let mut sin_basis = Array2::zeros((config.window_length, bins));
        for (i, &w) in window.iter().enumerate() {
            for k in 0..bins {
                let phase = 2.0 * PI * ((i * k) % config.fft_size) as f64 / config.fft_size as f64;
                cos_basis[[i, k]] = w * phase.cos();
                sin_basis[[i, k]] = -w * phase.sin();
            }
        }
        let filterbank = MelFilterbank::new(&config);
        Ok(Self {
            cos_basis: Rc::new(cos_basis.into_dyn()),
            sin_basis: Rc::new(sin_basis.into_dyn()),
            mel: Rc::new(filterbank.weights().clone().into_dyn()),
            filterbank,
            power: Rc::new(PowerSpectrum::new(&config)),
            config,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Waveforms `[n, samples]` (or a single `[samples]`) to log-Mel features
    /// `[n, frames, mel_bins]` (or `[frames, mel_bins]`).
    pub fn apply(&self, g: &Graph, waveform: Var) -> Result<Var> {
        self.pipeline(g, waveform, |g, flat| Ok(g.custom(flat, self.power.clone())))
    }

    /// Same as [`apply`](Self::apply) with the spectrum taken by explicit DFT
    /// matrix products. Slower; kept as a reference implementation.
    pub fn apply_dft(&self, g: &Graph, waveform: Var) -> Result<Var> {
        self.pipeline(g, waveform, |g, flat| {
            let re = g.matmul(flat, g.constant_shared(Rc::clone(&self.cos_basis)))?;
            let im = g.matmul(flat, g.constant_shared(Rc::clone(&self.sin_basis)))?;
            g.add(g.mul(re, re)?, g.mul(im, im)?)
        })
    }

    fn pipeline(&self, g: &Graph, waveform: Var, power: impl Fn(&Graph, Var) -> Result<Var>) -> Result<Var> {
        let shape = g.shape(waveform);
        let (batch, samples, single) = match shape.as_slice() {
            [t] => (1, *t, true),
            [n, t] => (*n, *t, false),
            _ => {
                return Err(Error::Shape {
                    op: "log_mel",
                    shapes: vec![shape],
                })
            }
        };
        let frames_per = self.config.num_frames(samples).ok_or(Error::InputTooShort {
            len: samples,
            required: self.config.window_length,
        })?;
        let x = if single {
            g.reshape(waveform, &[1, samples])?
        } else {
            waveform
        };
        let frames = g.frames(x, self.config.window_length, self.config.hop_length)?;
        let flat = g.reshape(frames, &[batch * frames_per, self.config.window_length])?;
        let power = power(g, flat)?;
        let mel = g.matmul(power, g.constant_shared(Rc::clone(&self.mel)))?;
        let floored = g.clamp(mel, self.config.log_floor, f64::INFINITY)?;
        let logged = g.log(floored);
        let out_shape: Vec<usize> = if single {
            vec![frames_per, self.config.mel_bins]
        } else {
            vec![batch, frames_per, self.config.mel_bins]
        };
        g.reshape(logged, &out_shape)
    }

    /// Non-differentiable convenience wrapper.
    pub fn compute(&self, waveform: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(waveform.clone().into_dimensionality::<IxDyn>().unwrap());
        let y = self.apply(&g, x)?;
        Ok((*g.value(y)).clone())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grad::finite_diff_check;

    fn small_config() -> FrontendConfig {
        FrontendConfig {
            sample_rate: 8000,
            window_length: 64,
            hop_length: 32,
            fft_size: 64,
            mel_bins: 8,
            log_floor: 1e-6,
        }
    }

    #[test]
    fn zero_waveform_hits_the_floor_everywhere() {
        let fe = LogMel::new(FrontendConfig::default()).unwrap();
        let out = fe.compute(&Array1::zeros(1600).into_dyn()).unwrap();
        assert_eq!(out.shape(), &[8, 40]);
        let floor = 1e-6f64.ln();
        assert!(out.iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FrontendConfig::default();
        let fe = LogMel::new(cfg.clone()).unwrap();
        for t in [400, 401, 559, 560, 561, 4000] {
            let out = fe.compute(&Array1::zeros(t).into_dyn()).unwrap();
            assert_eq!(out.shape()[0], (t - 400) / 160 + 1);
            assert_eq!(cfg.num_frames(t), Some((t - 400) / 160 + 1));
        }
        assert!(matches!(
            fe.compute(&Array1::zeros(399).into_dyn()),
            Err(Error::InputTooShort {
                len: 399,
                required: 400
            })
        ));
    }

    #[test]
    fn sine_at_filter_center_wins_its_frame() {
        let cfg = FrontendConfig::default();
        let fe = LogMel::new(cfg.clone()).unwrap();
        for bin in [10, 20, 30] {
            let f = fe.filterbank().center_hz(bin);
            let wave: Array1<f64> = (0..2000)
                .map(|i| 0.1 * (2.0 * PI * f * i as f64 / cfg.sample_rate as f64).sin())
                .collect();
            let out = fe.compute(&wave.into_dyn()).unwrap();
            for frame in out.outer_iter() {
                let argmax = frame
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                assert_eq!(argmax, bin, "tone at {f:.1} Hz");
            }
        }
    }

    #[test]
    fn filterbank_is_nonnegative_triangles_with_unit_peak() {
        let cfg = FrontendConfig::default();
        let fb = MelFilterbank::new(&cfg);
        assert!(fb.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        for m in 0..cfg.mel_bins {
            let col = fb.weights().column(m);
            let peak = col.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.5, "filter {m} peak {peak}");
            // rises to the peak then falls
            let top = col.iter().position(|&w| w == peak).unwrap();
            assert!(col
                .iter()
                .take(top + 1)
                .collect::<Vec<_>>()
                .windows(2)
                .all(|w| w[0] <= w[1]));
            assert!(col
                .iter()
                .skip(top)
                .collect::<Vec<_>>()
                .windows(2)
                .all(|w| w[0] >= w[1]));
        }
        let last = fb.center_hz(cfg.mel_bins - 1);
        assert!(last < 8000.0 && fb.center_hz(0) > 0.0);
    }

    #[test]
    fn log_mel_gradient_matches_finite_differences() {
        let fe = LogMel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let x = Array1::from_shape_fn(160, |_| rng.gen_range(-0.5..0.5)).into_dyn();
            let err = finite_diff_check(|g, w| Ok(g.sum(fe.apply(g, w)?)), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn fft_path_matches_dft_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let odd = FrontendConfig {
            window_length: 48,
            hop_length: 20,
            fft_size: 60,
            ..small_config()
        };
        for cfg in [FrontendConfig::default(), small_config(), odd] {
            let fe = LogMel::new(cfg).unwrap();
            let x = Array2::from_shape_fn((2, 900), |_| rng.gen_range(-0.3..0.3)).into_dyn();
            let run = |dft: bool| {
                let g = Graph::new();
                let w = g.leaf(x.clone());
                let y = if dft { fe.apply_dft(&g, w) } else { fe.apply(&g, w) }.unwrap();
                // weight outputs unevenly so every bin's gradient matters
                let weights = g.constant(g.value(y).mapv(|v| v.sin()));
                let loss = g.sum(g.mul(y, weights).unwrap());
                g.backward(loss).unwrap();
                ((*g.value(y)).clone(), g.grad(w).unwrap())
            };
            let (y_fft, g_fft) = run(false);
            let (y_dft, g_dft) = run(true);
            let dy = (&y_fft - &y_dft).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            let scale = g_dft.mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            let dg = (&g_fft - &g_dft).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(dy < 1e-9, "values differ by {dy}");
            assert!(dg < 1e-9 * scale.max(1.0), "gradients differ by {dg} (scale {scale})");
        }
    }

    #[test]
    fn scaling_up_never_decreases_output() {
        let fe = LogMel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array1::from_shape_fn(256, |_| rng.gen_range(-0.3..0.3)).into_dyn();
        let base = fe.compute(&x).unwrap();
        for c in [1.01, 1.5, 3.0] {
            let scaled = fe.compute(&(&x * c)).unwrap();
            assert!(base.iter().zip(scaled.iter()).all(|(a, b)| b >= a));
        }
    }

    #[test]
    fn batch_matches_single() {
        let fe = LogMel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = ndarray::Array2::from_shape_fn((3, 200), |_| rng.gen_range(-0.3..0.3));
        let out = fe.compute(&batch.clone().into_dyn()).unwrap();
        for i in 0..3 {
            let single = fe.compute(&batch.row(i).to_owned().into_dyn()).unwrap();
            assert_eq!(out.index_axis(ndarray::Axis(0), i), single.view());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = FrontendConfig {
            window_length: 600,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FrontendConfig {
            hop_length: 500,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FrontendConfig {
            mel_bins: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FrontendConfig {
            log_floor: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
