//! Sanity oracles on the shipped desk-scale corpus and model.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use hat_core::attacks::AttackSpec;
use hat_core::config::{preset, ExperimentConfig};
use hat_core::data::Split;
use hat_core::eval::{accuracy_under_attack, clean_accuracy};
use hat_core::experiment::Experiment;
use hat_core::frontend::LogMel;
use hat_core::grad::Graph;
use hat_core::model::SpeakerModel;

fn desk() -> Experiment {
    let cfg = ExperimentConfig::from_toml(preset("desk-standard").unwrap(), &[]).unwrap();
    Experiment::new(cfg, Path::new(".")).unwrap()
}

fn mean_log_mel(frontend: &LogMel, samples: &[f64]) -> Array1<f64> {
    let g = Graph::new();
    let x = g.constant(
        Array2::from_shape_vec((1, samples.len()), samples.to_vec())
            .unwrap()
            .into_dyn(),
    );
    let f = g.value(frontend.apply(&g, x).unwrap());
    let f: Array2<f64> = f.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    f.mean_axis(Axis(0)).unwrap()
}

#[test]
fn nearest_class_mean_on_mean_log_mel_separates_speakers() {
    let exp = desk();
    let frontend = LogMel::new(exp.config.frontend.clone()).unwrap();
    let k = exp.corpus.num_speakers();
    let mut centroids = vec![Array1::<f64>::zeros(exp.config.frontend.mel_bins); k];
    let mut counts = vec![0usize; k];
    for u in exp.corpus.split(Split::Train) {
        centroids[u.label] += &mean_log_mel(&frontend, &u.samples);
        counts[u.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        *c /= *n as f64;
    }
    let test = exp.corpus.split(Split::Test);
    let hits = test
        .iter()
        .filter(|u| {
            let v = mean_log_mel(&frontend, &u.samples);
            let dist = |c: &Array1<f64>| (&v - c).mapv(|d| d * d).sum();
            let best = (0..k)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == u.label
        })
        .count();
    let acc = 100.0 * hits as f64 / test.len() as f64;
    assert!(acc > 80.0, "nearest class mean accuracy {acc}");
}

/// A single untrained network tends to favour a few classes, so chance level
/// is checked on the mean over independently initialized models.
#[test]
fn untrained_models_sit_at_chance_under_every_attack() {
    let exp = desk();
    let batches = exp.eval_batches(Split::Test).unwrap();
    let chance = 100.0 / exp.corpus.num_speakers() as f64;
    let specs = [
        AttackSpec::fgsm(0.002),
        AttackSpec::pgd(0.002, 10),
        AttackSpec::cw(0.002, 10),
        AttackSpec::fs(0.002, 10),
    ];
    let seeds = 10;
    let mut clean = 0.0;
    let mut attacked = vec![0.0; specs.len()];
    for seed in 0..seeds {
        let model = SpeakerModel::build(exp.config.frontend.clone(), exp.config.model.clone(), 1000 + seed).unwrap();
        clean += clean_accuracy(&model, &batches).unwrap() / seeds as f64;
        for (acc, spec) in attacked.iter_mut().zip(&specs) {
            *acc += accuracy_under_attack(&model, &batches, spec, seed).unwrap().accuracy / seeds as f64;
        }
    }
    assert!((clean - chance).abs() <= 5.0, "clean {clean}");
    for (acc, spec) in attacked.iter().zip(&specs) {
        // Label-driven iterative attacks flip the few chance hits of an
        // untrained net, so for them chance is only an upper bound.
        let label_driven = spec.iterations > 1 && spec.weights.gamma == 0.0;
        if label_driven {
            assert!(*acc <= chance + 5.0, "{} accuracy {acc}", spec.name());
        } else {
            assert!((acc - chance).abs() <= 5.0, "{} accuracy {acc}", spec.name());
        }
    }
}
