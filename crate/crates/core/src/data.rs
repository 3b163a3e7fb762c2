//! Corpus ingestion, per-speaker splitting, batching and a synthetic corpus.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// Index into [`Corpus::speakers`].
    pub label: usize,
    pub split: Split,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

/// Utterances held in memory, with speakers sorted by name.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sample_rate: u32,
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
    pub fingerprint: String,
}

impl Corpus {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }
}

/// `(train, test)` utterance counts for one speaker: a tenth (rounded down,
/// at least one) is held out.
pub fn split_counts(n: usize) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::Corpus(format!("a speaker needs at least 2 utterances, got {n}")));
    }
    let test = (n / 10).max(1);
    Ok((n - test, test))
}

fn speaker_tag(speaker: &str) -> u64 {
    let digest = Sha256::digest(speaker.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Assigns splits to one speaker's utterances, given in a canonical order.
fn assign_splits(count: usize, speaker: &str, seed: u64) -> Result<Vec<Split>> {
    let (_, test) = split_counts(count)?;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[speaker_tag(speaker)],
    )));
    let mut splits = vec![Split::Train; count];
    for &i in &order[..test] {
        splits[i] = Split::Test;
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub sample_rate: u32,
    /// Seed of the per-speaker split, fixed across experiments.
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the corpus root, with `/` separators.
    pub path: String,
    pub speaker: String,
    pub split: Split,
    pub duration_s: f64,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub speakers: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub rejects: Vec<Reject>,
    pub fingerprint: String,
}

impl CorpusManifest {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Reads every accepted file into memory.
    pub fn load(&self) -> Result<Corpus> {
        let mut utterances = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let (samples, rate) = read_wav(&self.root.join(&e.path))?;
            if rate != self.sample_rate {
                return Err(Error::Corpus(format!(
                    "{}: sample rate {rate} != {}",
                    e.path, self.sample_rate
                )));
            }
            utterances.push(Utterance {
                id: e.path.clone(),
                label: self
                    .speakers
                    .binary_search(&e.speaker)
                    .expect("speaker listed in manifest"),
                speaker: e.speaker.clone(),
                split: e.split,
                sample_rate: rate,
                samples,
            });
        }
        Ok(Corpus {
            sample_rate: self.sample_rate,
            speakers: self.speakers.clone(),
            utterances,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

fn check_wav(path: &Path, sample_rate: u32) -> std::result::Result<usize, String> {
    let reader = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format!(
            "expected 16-bit PCM mono, got {} channel(s), {} bits",
            spec.channels, spec.bits_per_sample
        ));
    }
    if spec.sample_rate != sample_rate {
        return Err(format!("sample rate {} != {}", spec.sample_rate, sample_rate));
    }
    let n = reader.len() as usize;
    if n == 0 {
        return Err("no samples".into());
    }
    // Decode fully so truncated data is caught here rather than at load time.
    for s in reader.into_samples::<i16>() {
        s.map_err(|e| e.to_string())?;
    }
    Ok(n)
}

/// Scans `root/<speaker>/**/*.wav` into a manifest with a fixed per-speaker
/// split. Unreadable files are listed as rejects.
pub fn ingest(root: &Path, config: &IngestConfig) -> Result<CorpusManifest> {
    let mut by_speaker: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    let mut rejects = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.sort();
    for dir in dirs.into_iter().filter(|p| p.is_dir()) {
        let speaker = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files = Vec::new();
        collect_wavs(&dir, &mut files)?;
        for file in files {
            let rel = file
                .strip_prefix(root)
                .unwrap()
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            match check_wav(&file, config.sample_rate) {
                Ok(n) => by_speaker.entry(speaker.clone()).or_default().push((rel, n)),
                Err(reason) => rejects.push(Reject { path: rel, reason }),
            }
        }
    }
    if by_speaker.len() < 2 {
        return Err(Error::Corpus(format!(
            "need at least 2 speakers, found {}",
            by_speaker.len()
        )));
    }
    let mut entries = Vec::new();
    for (speaker, mut files) in by_speaker.iter().map(|(s, f)| (s.clone(), f.clone())) {
        files.sort();
        let splits = assign_splits(files.len(), &speaker, config.split_seed)
            .map_err(|e| Error::Corpus(format!("speaker {speaker}: {e}")))?;
        for ((path, n), split) in files.into_iter().zip(splits) {
            entries.push(ManifestEntry {
                path,
                speaker: speaker.clone(),
                split,
                duration_s: n as f64 / config.sample_rate as f64,
                num_samples: n,
            });
        }
    }
    rejects.sort_by(|a, b| a.path.cmp(&b.path));
    let fingerprint = manifest_fingerprint(config.sample_rate, &entries);
    Ok(CorpusManifest {
        root: root.to_path_buf(),
        sample_rate: config.sample_rate,
        speakers: by_speaker.into_keys().collect(),
        entries,
        rejects,
        fingerprint,
    })
}

fn manifest_fingerprint(sample_rate: u32, entries: &[ManifestEntry]) -> String {
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut h = Sha256::new();
    h.update(sample_rate.to_le_bytes());
    for e in sorted {
        h.update(serde_json::to_vec(e).unwrap());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Reads a 16-bit PCM mono WAV file, normalized to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Corpus(format!("{}: expected 16-bit PCM mono", path.display())));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

/// Writes samples as 16-bit PCM mono, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0);
        writer.write_sample(v as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Signal-to-noise ratio of the additive white noise.
    #[serde(default = "default_noise_snr")]
    pub noise_snr_db: f64,
    /// RMS level of the clean harmonic signal.
    #[serde(default = "default_level")]
    pub level_rms: f64,
    /// Range of the speakers' fundamentals in Hz.
    #[serde(default = "default_f0_range")]
    pub f0_range_hz: (f64, f64),
    pub seed: u64,
}

fn default_sample_rate() -> u32 {
    16000
}

fn default_noise_snr() -> f64 {
    60.0
}

fn default_f0_range() -> (f64, f64) {
    F0_RANGE_HZ
}

/// About 26 dB above a full-budget perturbation at the default budget.
fn default_level() -> f64 {
    0.04
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_speakers < 2 {
            return fail(format!(
                "corpus.num_speakers must be at least 2, got {}",
                self.num_speakers
            ));
        }
        if self.utterances_per_speaker < 2 {
            return fail("corpus.utterances_per_speaker must be at least 2".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return fail(format!("corpus.duration_s must be positive, got {}", self.duration_s));
        }
        if self.sample_rate == 0 {
            return fail("corpus.sample_rate must be positive".into());
        }
        if !self.noise_snr_db.is_finite() {
            return fail("corpus.noise_snr_db must be finite".into());
        }
        let (lo, hi) = self.f0_range_hz;
        if !(lo > 0.0 && hi >= lo && hi * 5.0 < self.sample_rate as f64 / 2.0) {
            return fail(format!(
                "corpus.f0_range_hz must satisfy 0 < low <= high and keep five harmonics below Nyquist, got ({lo}, {hi})"
            ));
        }
        if !(self.level_rms > 0.0 && self.level_rms < 0.5) {
            return fail(format!("corpus.level_rms must be in (0, 0.5), got {}", self.level_rms));
        }
        Ok(())
    }
}

/// Harmonic profile of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    /// Fundamental plus four harmonics, tilt already applied.
    pub amplitudes: [f64; 5],
}

/// Default lowest and highest synthetic fundamental. A narrow band keeps
/// speakers close enough that the envelope, not the pitch alone, separates
/// them.
pub const F0_RANGE_HZ: (f64, f64) = (140.0, 160.0);

/// Synthetic speakers: fundamentals stratified on a log scale over
/// `f0_range_hz`, random harmonic amplitudes under a per-speaker spectral
/// tilt.
pub fn voice_profiles(num_speakers: usize, f0_range_hz: (f64, f64), seed: u64) -> Vec<VoiceProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let (lo, hi) = (f0_range_hz.0.ln(), f0_range_hz.1.ln());
    let mut strata: Vec<usize> = (0..num_speakers).collect();
    strata.shuffle(&mut rng);
    strata
        .into_iter()
        .map(|k| {
            let u = (k as f64 + rng.gen_range(0.2..0.8)) / num_speakers as f64;
            let tilt: f64 = rng.gen_range(0.45..0.95);
            let mut amplitudes = [0.0; 5];
            for (h, a) in amplitudes.iter_mut().enumerate() {
                *a = rng.gen_range(0.2..1.0) * tilt.powi(h as i32);
            }
            VoiceProfile {
                f0_hz: (lo + u * (hi - lo)).exp(),
                amplitudes,
            }
        })
        .collect()
}

fn synth_utterance(profile: &VoiceProfile, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    let f0 = profile.f0_hz * rng.gen_range(0.98..1.02);
    let phases: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mut clean: Vec<f64> = (0..n)
        .map(|t| {
            let time = t as f64 / cfg.sample_rate as f64;
            (0..5)
                .filter(|&h| f0 * ((h + 1) as f64) < nyquist)
                .map(|h| profile.amplitudes[h] * (2.0 * PI * f0 * (h + 1) as f64 * time + phases[h]).sin())
                .sum()
        })
        .collect();
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    clean.iter_mut().for_each(|v| *v *= cfg.level_rms / rms);
    let noise_std = cfg.level_rms / 10f64.powf(cfg.noise_snr_db / 20.0);
    let noise = Normal::new(0.0, noise_std).unwrap();
    clean
        .iter()
        .map(|&v| (v + noise.sample(rng)).clamp(-1.0, 1.0))
        .collect()
}

/// In-memory synthetic corpus with the same split rule as [`ingest`].
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let profiles = voice_profiles(cfg.num_speakers, cfg.f0_range_hz, cfg.seed);
    let width = (cfg.num_speakers - 1).to_string().len();
    let speakers: Vec<String> = (0..cfg.num_speakers).map(|k| format!("spk{k:0width$}")).collect();
    let mut utterances = Vec::new();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg)?);
    for (label, (speaker, profile)) in speakers.iter().zip(&profiles).enumerate() {
        let splits = assign_splits(cfg.utterances_per_speaker, speaker, cfg.seed)?;
        for (i, split) in splits.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, label as u64, i as u64]));
            let samples = synth_utterance(profile, cfg, &mut rng);
            let id = format!("{speaker}/utt{i:03}");
            hasher.update(id.as_bytes());
            hasher.update([split as u8]);
            for s in &samples {
                hasher.update(s.to_le_bytes());
            }
            utterances.push(Utterance {
                id,
                speaker: speaker.clone(),
                label,
                split,
                sample_rate: cfg.sample_rate,
                samples,
            });
        }
    }
    Ok(Corpus {
        sample_rate: cfg.sample_rate,
        speakers,
        utterances,
        fingerprint: hex::encode(hasher.finalize()),
    })
}

/// Writes a corpus as `root/<speaker>/<utt>.wav`.
pub fn export_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    for u in &corpus.utterances {
        let path = root.join(format!("{}.wav", u.id));
        std::fs::create_dir_all(path.parent().unwrap())?;
        write_wav(&path, &u.samples, u.sample_rate)?;
    }
    Ok(())
}

/// One fixed-length minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub waveforms: Array2<f64>,
    pub labels: Vec<usize>,
    /// Positions of the rows in the utterance list given to [`batches`].
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    /// Per-epoch shuffle and one random crop per utterance.
    Random { seed: u64, epoch: u64 },
    /// Original order, centered crop.
    Center,
}

fn crop(samples: &[f64], len: usize, start: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let take = len.min(samples.len().saturating_sub(start));
    out[..take].copy_from_slice(&samples[start..start + take]);
    out
}

/// Splits `utterances` into batches of `segment_length`-sample crops. Short
/// utterances are zero-padded at the end; the last batch may be smaller.
pub fn batches(utterances: &[&Utterance], batch_size: usize, segment_length: usize, mode: Crop) -> Result<Vec<Batch>> {
    if batch_size == 0 || segment_length == 0 {
        return Err(invalid("batch_size and segment_length must be positive"));
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut rng = match mode {
        Crop::Random { seed, epoch } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch]));
            order.shuffle(&mut rng);
            Some(rng)
        }
        Crop::Center => None,
    };
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut waveforms = Array2::zeros((chunk.len(), segment_length));
        for (row, &i) in chunk.iter().enumerate() {
            let s = &utterances[i].samples;
            let slack = s.len().saturating_sub(segment_length);
            let start = match rng.as_mut() {
                Some(r) => r.gen_range(0..=slack),
                None => slack / 2,
            };
            let seg = crop(s, segment_length, start);
            waveforms.row_mut(row).assign(&ndarray::ArrayView1::from(&seg));
        }
        out.push(Batch {
            waveforms,
            labels: chunk.iter().map(|&i| utterances[i].label).collect(),
            indices: chunk.to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::frontend::{FrontendConfig, LogMel};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_speakers: 4,
            utterances_per_speaker: 10,
            duration_s: 0.1,
            sample_rate: 16000,
            noise_snr_db: 60.0,
            level_rms: 0.04,
            f0_range_hz: F0_RANGE_HZ,
            seed,
        }
    }

    #[test]
    fn split_rule_examples() {
        assert_eq!(split_counts(10).unwrap(), (9, 1));
        assert_eq!(split_counts(2).unwrap(), (1, 1));
        assert_eq!(split_counts(25).unwrap(), (23, 2));
        assert!(split_counts(1).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_split() {
        let a = synth_corpus(&small(1)).unwrap();
        let b = synth_corpus(&small(1)).unwrap();
        let c = synth_corpus(&small(2)).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a.utterances, b.utterances);
        assert_ne!(a.fingerprint, c.fingerprint);
        assert_eq!(a.split(Split::Test).len(), 4);
        assert_eq!(a.split(Split::Train).len(), 36);
        for spk in 0..4 {
            let test = a.split(Split::Test).iter().filter(|u| u.label == spk).count();
            assert_eq!(test, 1);
        }
        assert!(a
            .utterances
            .iter()
            .all(|u| u.samples.iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn speakers_differ_in_mean_log_mel() {
        let corpus = synth_corpus(&small(3)).unwrap();
        let lm = LogMel::new(FrontendConfig::default()).unwrap();
        let mean_of = |label: usize| {
            let u = corpus.utterances.iter().find(|u| u.label == label).unwrap();
            let x = ndarray::Array1::from(u.samples.clone()).into_dyn();
            lm.compute(&x).unwrap().mean_axis(ndarray::Axis(0)).unwrap()
        };
        let (a, b) = (mean_of(0), mean_of(1));
        assert!((&a - &b).mapv(|v| v * v).sum().sqrt() > 0.0);
    }

    #[test]
    fn training_batches_cover_each_utterance_once_and_reshuffle() {
        let corpus = synth_corpus(&small(4)).unwrap();
        let train = corpus.split(Split::Train);
        let e0 = batches(&train, 8, 1000, Crop::Random { seed: 5, epoch: 0 }).unwrap();
        let e1 = batches(&train, 8, 1000, Crop::Random { seed: 5, epoch: 1 }).unwrap();
        let seen: Vec<usize> = e0.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(seen.len(), train.len());
        assert_eq!(seen.iter().collect::<HashSet<_>>().len(), train.len());
        let seen1: Vec<usize> = e1.iter().flat_map(|b| b.indices.clone()).collect();
        assert_ne!(seen, seen1);
        assert!(e0.iter().all(|b| b.labels.iter().all(|&l| l < corpus.num_speakers())));
        assert_eq!(
            e0,
            batches(&train, 8, 1000, Crop::Random { seed: 5, epoch: 0 }).unwrap()
        );
    }

    #[test]
    fn evaluation_batches_are_centered_and_padded() {
        let u = Utterance {
            id: "a".into(),
            speaker: "s".into(),
            label: 0,
            split: Split::Test,
            sample_rate: 16000,
            samples: (0..10).map(|v| v as f64 / 10.0).collect(),
        };
        let list = [&u];
        let b = batches(&list, 4, 4, Crop::Center).unwrap();
        assert_eq!(b[0].waveforms.row(0).to_vec(), vec![0.3, 0.4, 0.5, 0.6]);
        let padded = batches(&list, 4, 12, Crop::Center).unwrap();
        assert_eq!(padded[0].waveforms[[0, 9]], 0.9);
        assert_eq!(padded[0].waveforms[[0, 11]], 0.0);
        assert_eq!(b, batches(&list, 4, 4, Crop::Center).unwrap());
    }

    #[test]
    fn wav_round_trip_and_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&small(6)).unwrap();
        export_corpus(&corpus, dir.path()).unwrap();
        std::fs::write(dir.path().join("spk0/broken.wav"), b"RIFF....garbage").unwrap();
        let cfg = IngestConfig {
            sample_rate: 16000,
            split_seed: 6,
        };
        let m1 = ingest(dir.path(), &cfg).unwrap();
        let m2 = ingest(dir.path(), &cfg).unwrap();
        assert_eq!(m1.fingerprint, m2.fingerprint);
        assert_eq!(m1.rejects.len(), 1);
        assert_eq!(m1.rejects[0].path, "spk0/broken.wav");
        assert_eq!(m1.entries.len(), 40);
        assert_eq!(m1.entries.iter().filter(|e| e.split == Split::Test).count(), 4);
        let loaded = m1.load().unwrap();
        let original = &corpus.utterances[0].samples;
        let back = &loaded
            .utterances
            .iter()
            .find(|u| u.id == "spk0/utt000.wav")
            .unwrap()
            .samples;
        assert!(original
            .iter()
            .zip(back.iter())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 32768.0 + 1e-12));
        // Same split rule as the synthetic generator.
        let test_ids: HashSet<String> = corpus
            .split(Split::Test)
            .iter()
            .map(|u| format!("{}.wav", u.id))
            .collect();
        let ingest_test: HashSet<String> = m1
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.path.clone())
            .collect();
        assert_eq!(test_ids, ingest_test);
    }

    #[test]
    fn lonely_speaker_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        for (spk, n) in [("a", 3), ("b", 1)] {
            std::fs::create_dir_all(dir.path().join(spk)).unwrap();
            for i in 0..n {
                write_wav(&dir.path().join(format!("{spk}/{i}.wav")), &[0.1; 100], 16000).unwrap();
            }
        }
        let err = ingest(
            dir.path(),
            &IngestConfig {
                sample_rate: 16000,
                split_seed: 0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("speaker b"), "{err}");
    }
}
