use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hat_core::attacks::generate;
use hat_core::checkpoint::Checkpoint;
use hat_core::config::{parse_attack, ExperimentConfig};
use hat_core::data::{write_wav, Split};
use hat_core::eval::{
    ablation_grid, epsilon_sweep, evaluate_model, iteration_sweep, masking_checks, predict_labels, render_table,
    transfer_entry, MaskingConfig, RobustnessReport, SnrStats,
};
use hat_core::experiment::Experiment;
use hat_core::model::{Classifier, Mode};
use hat_core::seed::derive_seed;
use hat_core::training::{EpochRecord, TrainLog, TrainOptions, TrainState};
use hat_core::Error;
use serde_json::json;

use crate::failure::{missing, Failure, Outcome, CONFIG};
use crate::lock::DirLock;
use crate::Common;

const MODEL_FILE: &str = "model.ckpt";
const TRAIN_LOG: &str = "train_log.jsonl";

fn overrides(common: &Common) -> Vec<String> {
    let mut sets = common.set.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        // A TOML basic string, so backslashes and quotes survive.
        sets.push(format!("out={}", toml_string(&out.display().to_string())));
    }
    sets
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

fn experiment(common: &Common) -> Outcome<Experiment> {
    let (cfg, warnings) = ExperimentConfig::load_valid(&common.config, &overrides(common))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(Experiment::new(cfg, Path::new("."))?)
}

fn timestamp(common: &Common) -> Option<u64> {
    if common.deterministic {
        None
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
    }
}

fn checkpoint_path(exp: &Experiment, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| exp.config.out.join(MODEL_FILE), Path::to_path_buf)
}

fn load_model(exp: &Experiment, path: &Path) -> Outcome<(Checkpoint, hat_core::model::SpeakerModel)> {
    exp.load_checkpoint(path).map_err(|e| missing(path, e))
}

pub fn validate(common: &Common) -> Outcome {
    let cfg = ExperimentConfig::load(&common.config, &overrides(common))?;
    let v = cfg.validate();
    for w in &v.warnings {
        println!("warning: {w}");
    }
    if !v.is_ok() {
        for m in &v.violations {
            println!("violation: {m}");
        }
        return Err(Failure::new(
            CONFIG,
            format!("{}: {} violation(s)", common.config.display(), v.violations.len()),
        ));
    }
    println!("ok: {} (fingerprint {})", cfg.name, cfg.fingerprint());
    Ok(())
}

pub fn train(common: &Common, resume: Option<&Path>) -> Outcome {
    let exp = experiment(common)?;
    let out = exp.config.out.clone();
    let _lock = DirLock::acquire(&out)?;
    fs::write(out.join("config.toml"), exp.config.to_toml())?;

    let log_path = out.join(TRAIN_LOG);
    let (state, log) = match resume {
        Some(path) => {
            let (ckpt, _) = load_model(&exp, path)?;
            if ckpt.config_fingerprint != exp.config.training_fingerprint() {
                return Err(Failure::new(
                    CONFIG,
                    format!("{} was trained under a different config; cannot resume", path.display()),
                ));
            }
            let state = ckpt.to_state()?;
            let mut log = match fs::read_to_string(&log_path) {
                Ok(text) => TrainLog::from_jsonl(&text)?,
                Err(_) => TrainLog {
                    header: exp.log_header(),
                    records: Vec::new(),
                },
            };
            log.records.retain(|r| r.epoch <= state.epoch);
            (Some(state), log)
        }
        None => (
            None,
            TrainLog {
                header: exp.log_header(),
                records: Vec::new(),
            },
        ),
    };
    fs::write(&log_path, log.to_jsonl())?;

    let every = exp.config.train.checkpoint_every;
    let total = exp.config.train.epochs;
    let options = TrainOptions {
        deterministic: common.deterministic,
    };
    let mut after_epoch = |state: &TrainState, r: &EpochRecord| -> hat_core::Result<()> {
        let mut f = OpenOptions::new().append(true).open(&log_path)?;
        writeln!(f, "{}", serde_json::to_string(r)?)?;
        let ckpt = exp.checkpoint(state);
        ckpt.save(&out.join(MODEL_FILE))?;
        if every > 0 && r.epoch.is_multiple_of(every) {
            ckpt.save(&out.join(format!("epoch-{:04}.ckpt", r.epoch)))?;
        }
        eprintln!(
            "epoch {}/{total}: loss {:.4}{} train acc {:.2}%",
            r.epoch,
            r.clean_loss,
            r.adv_loss.map(|a| format!(" adv {a:.4}")).unwrap_or_default(),
            r.train_accuracy
        );
        Ok(())
    };
    let (state, ran) = exp.train(state, options, &mut after_epoch)?;
    if ran.records.is_empty() {
        // Nothing left to train; still leave a checkpoint behind.
        exp.checkpoint(&state).save(&out.join(MODEL_FILE))?;
    }
    println!(
        "trained {} epochs; checkpoint {}",
        state.epoch,
        out.join(MODEL_FILE).display()
    );
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn attack(common: &Common, checkpoint: Option<&Path>, name: &str, limit: Option<usize>) -> Outcome {
    let exp = experiment(common)?;
    let spec = parse_attack(name, exp.config.eval.epsilon)?;
    spec.validate()?;
    let path = checkpoint_path(&exp, checkpoint);
    let (ckpt, model) = load_model(&exp, &path)?;
    let out = exp.config.out.clone();
    let _lock = DirLock::acquire(&out)?;
    let audio = out.join("adversarial").join(sanitize(&spec.name()));
    fs::create_dir_all(&audio)?;

    let test = exp.corpus.split(Split::Test);
    let batches = exp.eval_batches(Split::Test)?;
    let seed = exp.eval_seed();
    let rate = exp.config.frontend.sample_rate;
    let mut lines = String::new();
    let (mut correct, mut total, mut written) = (0, 0, 0);
    let mut snrs = Vec::new();
    let mut max_linf = 0.0f64;
    for (b, batch) in batches.iter().enumerate() {
        let adv = generate(
            &model,
            &batch.waveforms,
            &batch.labels,
            &spec,
            Mode::Eval,
            derive_seed(seed, &[b as u64]),
        )?;
        let clean_pred = predict_labels(&model, &batch.waveforms)?;
        let adv_pred = predict_labels(&model, &adv.x_adv)?;
        for (row, &idx) in batch.indices.iter().enumerate() {
            let utt = test[idx];
            let linf = batch
                .waveforms
                .row(row)
                .iter()
                .zip(adv.x_adv.row(row))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let mut wav = None;
            if limit.is_none_or(|l| written < l) {
                let file = audio.join(format!("{}.wav", sanitize(&utt.id)));
                write_wav(&file, &adv.x_adv.row(row).to_vec(), rate)?;
                wav = Some(file.display().to_string());
                written += 1;
            }
            correct += usize::from(adv_pred[row] == batch.labels[row]);
            total += 1;
            snrs.push(adv.snr_db[row]);
            max_linf = max_linf.max(linf);
            let line = json!({
                "utterance": utt.id,
                "label": batch.labels[row],
                "clean_prediction": clean_pred[row],
                "adversarial_prediction": adv_pred[row],
                "snr_db": finite_or_null(adv.snr_db[row]),
                "linf": linf,
                "wav": wav,
            });
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
    }
    let snr = SnrStats::from_values(&snrs);
    let accuracy = 100.0 * correct as f64 / total.max(1) as f64;
    let summary = json!({
        "summary": true,
        "checkpoint": path.display().to_string(),
        "attack": spec.name(),
        "spec": spec,
        "accuracy": accuracy,
        "snr": snr,
        "max_linf": max_linf,
        "seed": exp.config.seed,
        "config_fingerprint": exp.config.fingerprint(),
        "checkpoint_fingerprint": ckpt.fingerprint(),
        "corpus_fingerprint": exp.corpus.fingerprint,
        "timestamp": timestamp(common),
    });
    lines.push_str(&summary.to_string());
    lines.push('\n');
    let file = out.join(format!("attack-{}.jsonl", sanitize(&spec.name())));
    fs::write(&file, lines)?;
    println!(
        "{}: accuracy {accuracy:.2}% over {total} utterances, SNR mean {} dB (min {}, max {}), {written} WAV files in {}",
        spec.name(),
        fmt_db(snr.mean_db),
        fmt_db(snr.min_db),
        fmt_db(snr.max_db),
        audio.display()
    );
    Ok(())
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, sweeps: bool, masking: Option<&Path>) -> Outcome {
    let exp = experiment(common)?;
    let path = checkpoint_path(&exp, checkpoint);
    let (ckpt, model) = load_model(&exp, &path)?;
    let source = match masking {
        Some(p) => Some(load_model(&exp, p)?),
        None => None,
    };
    let out = exp.config.out.clone();
    let _lock = DirLock::acquire(&out)?;
    let seed = exp.eval_seed();
    let stamp = timestamp(common);
    let batches = exp.eval_batches(Split::Test)?;

    let meta = exp.entry_meta(&ckpt, &path, stamp);
    let mut report = evaluate_model(&model, &batches, &exp.table_attacks(), seed, &meta)?;
    for (i, s) in exp.config.eval.scenarios.iter().enumerate() {
        let spec = s.attack.resolve(exp.config.eval.epsilon)?;
        let (target_ckpt, target) = load_model(&exp, &s.target)?;
        let split_batches = exp.eval_batches(s.split)?;
        let target_meta = exp.entry_meta(&target_ckpt, &s.target, stamp);
        let scenario_seed = derive_seed(seed, &[1000 + i as u64]);
        let entry = match &s.source {
            Some(src) => {
                let (src_ckpt, src_model) = load_model(&exp, src)?;
                let src_meta = exp.entry_meta(&src_ckpt, src, stamp);
                transfer_entry(
                    &src_model,
                    &target,
                    &split_batches,
                    &spec,
                    scenario_seed,
                    &target_meta,
                    &src_meta.checkpoint,
                )?
            }
            None => {
                let mut e = transfer_entry(&target, &target, &split_batches, &spec, scenario_seed, &target_meta, "")?;
                e.source = None;
                e
            }
        };
        report.push(entry)?;
    }
    fs::write(out.join("report.jsonl"), report.to_jsonl())?;
    let table = render_table(std::slice::from_ref(&report))?;
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    for e in report.entries.iter().filter(|e| e.source.is_some()) {
        println!(
            "transfer {} from {} to {}: {:.2}%",
            e.attack,
            e.source.as_deref().unwrap_or(""),
            e.checkpoint,
            e.accuracy
        );
    }

    if sweeps {
        let curves = out.join("curves");
        fs::create_dir_all(&curves)?;
        let template = exp.config.sweep_attack()?;
        if !exp.config.eval.sweep_epsilons.is_empty() {
            let c = epsilon_sweep(&model, &batches, &template, &exp.config.eval.sweep_epsilons, seed)?;
            fs::write(curves.join("epsilon_sweep.csv"), c.to_csv())?;
            println!("epsilon sweep ({}): {:?}", c.attack, c.accuracies());
        }
        if !exp.config.eval.sweep_iterations.is_empty() {
            let c = iteration_sweep(&model, &batches, &template, &exp.config.eval.sweep_iterations, seed)?;
            fs::write(curves.join("iteration_sweep.csv"), c.to_csv())?;
            println!("iteration sweep ({}): {:?}", c.attack, c.accuracies());
        }
    }

    if let Some((_, source_model)) = source {
        let config = MaskingConfig {
            epsilon: exp.config.eval.epsilon,
            ..MaskingConfig::default()
        };
        let m = masking_checks(&model, &source_model, &batches, &config, seed)?;
        fs::write(out.join("masking.json"), serde_json::to_string_pretty(&m)?)?;
        for (name, check) in [
            ("black-box weaker than white-box", &m.black_box_weaker),
            ("iterative stronger than single-step", &m.iterative_stronger),
            ("large budget collapses accuracy", &m.large_budget_collapse),
        ] {
            println!(
                "{}: {name} ({})",
                if check.passed { "pass" } else { "FAIL" },
                check.evidence
            );
        }
    }
    Ok(())
}

pub fn ablate(common: &Common, attacks: &[String]) -> Outcome {
    let exp = experiment(common)?;
    let specs = attacks
        .iter()
        .map(|a| parse_attack(a, exp.config.eval.epsilon))
        .collect::<Result<Vec<_>, Error>>()?;
    let out = exp.config.out.clone();
    let _lock = DirLock::acquire(&out)?;
    let batches = exp.eval_batches(Split::Test)?;
    let options = TrainOptions {
        deterministic: common.deterministic,
    };
    let mut recipe = |weights| -> hat_core::Result<(Box<dyn Classifier>, TrainLog)> {
        let variant = exp.with_weights(weights);
        let dir = out.join("ablation").join(sanitize(&weights.label()));
        fs::create_dir_all(&dir)?;
        eprintln!("training with inner loss {}", weights.label());
        let (state, log) = variant.train(None, options, &mut |_, r| {
            eprintln!("  epoch {}: loss {:.4}", r.epoch, r.clean_loss);
            Ok(())
        })?;
        variant.checkpoint(&state).save(&dir.join(MODEL_FILE))?;
        fs::write(dir.join(TRAIN_LOG), log.to_jsonl())?;
        Ok((Box::new(state.model), log))
    };
    let grid = ablation_grid(&batches, &specs, exp.eval_seed(), &mut recipe)?;
    let text = grid.render();
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&grid)?)?;
    fs::write(out.join("ablation.txt"), &text)?;
    print!("{text}");
    if let Some(r) = grid.rows.iter().find(|r| !r.audited) {
        return Err(Failure::new(
            crate::failure::GENERAL,
            format!("training log for {} does not show the requested loss weights", r.label),
        ));
    }
    Ok(())
}

pub fn report(paths: &[PathBuf], output: Option<&Path>) -> Outcome {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| missing(p, e.into()))?;
        reports.push(
            RobustnessReport::from_jsonl(&text).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", p.display())))?,
        );
    }
    let table = render_table(&reports)?;
    print!("{table}");
    if let Some(o) = output {
        fs::write(o, &table)?;
    }
    Ok(())
}
