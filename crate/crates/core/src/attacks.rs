//! Sign-gradient attacks with l-infinity projection.
//!
//! One [`AttackSpec`] covers the whole family: FGSM, PGD, margin (CW),
//! feature scattering and the hybrid objective differ only in loss weights,
//! step size, iteration count and initialization.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, Var};
use crate::losses::{hybrid_loss, log_odds_against, saturated_rows, LossWeights, SinkhornConfig};
use crate::model::{Classifier, Mode};

/// Default l-infinity budget in waveform units.
pub const DEFAULT_EPSILON: f64 = 0.002;
/// Default margin for the margin loss.
pub const DEFAULT_MARGIN: f64 = 50.0;

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub weights: LossWeights,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub random_init: bool,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
}

impl AttackSpec {
    /// Iterative attack with step `epsilon / 5` and random start.
    pub fn iterative(weights: LossWeights, epsilon: f64, iterations: usize) -> Self {
        Self {
            weights,
            epsilon,
            alpha: epsilon / 5.0,
            iterations,
            random_init: true,
            margin: DEFAULT_MARGIN,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    /// One full-budget cross-entropy step from the clean input.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            alpha: epsilon,
            iterations: 1,
            random_init: false,
            ..Self::iterative(LossWeights::CE, epsilon, 1)
        }
    }

    pub fn pgd(epsilon: f64, iterations: usize) -> Self {
        Self::iterative(LossWeights::CE, epsilon, iterations)
    }

    pub fn cw(epsilon: f64, iterations: usize) -> Self {
        Self::iterative(LossWeights::MARGIN, epsilon, iterations)
    }

    pub fn fs(epsilon: f64, iterations: usize) -> Self {
        Self::iterative(LossWeights::FS, epsilon, iterations)
    }

    pub fn hybrid(epsilon: f64, iterations: usize) -> Self {
        Self::iterative(LossWeights::HYBRID, epsilon, iterations)
    }

    /// Same attack at another budget, keeping the step-to-budget ratio.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let ratio = if self.epsilon > 0.0 {
            self.alpha / self.epsilon
        } else {
            0.2
        };
        Self {
            epsilon,
            alpha: epsilon * ratio,
            ..self.clone()
        }
    }

    pub fn with_iterations(&self, iterations: usize) -> Self {
        Self {
            iterations,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("attack.epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("attack.alpha must be positive, got {}", self.alpha));
        }
        if self.iterations == 0 {
            return fail("attack.iterations must be at least 1".into());
        }
        if !self.margin.is_finite() {
            return fail(format!("attack.margin must be finite, got {}", self.margin));
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(format!("attack.{}", e_msg(&e))))?;
        if self.weights.is_zero() {
            return fail("attack.weights must have at least one nonzero entry".into());
        }
        self.sinkhorn
            .validate()
            .map_err(|e| Error::Config(format!("attack.{}", e_msg(&e))))
    }

    /// Conventional display name such as `PGD10`, `CW40` or `FGSM`.
    pub fn name(&self) -> String {
        let w = &self.weights;
        if *w == LossWeights::CE && self.iterations == 1 && !self.random_init && self.alpha == self.epsilon {
            return "FGSM".into();
        }
        format!("{}{}", self.family(), self.iterations)
    }

    /// Name of the objective without the iteration count: `PGD`, `CW`, `FS`,
    /// `HYB`, or the bracketed loss label for other weightings.
    pub fn family(&self) -> String {
        let w = &self.weights;
        if *w == LossWeights::CE {
            "PGD".to_string()
        } else if *w == LossWeights::MARGIN {
            "CW".to_string()
        } else if *w == LossWeights::FS {
            "FS".to_string()
        } else if *w == LossWeights::HYBRID {
            "HYB".to_string()
        } else {
            format!("[{}]", w.label())
        }
    }
}

fn e_msg(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Starting point of an attack: `x` itself, or `x` plus uniform noise strictly
/// inside the budget, clamped to `[-1, 1]`.
pub fn init_perturbation(x: &Array2<f64>, epsilon: f64, random_init: bool, seed: u64) -> Array2<f64> {
    if !random_init || epsilon <= 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.mapv(|v| {
        let delta = loop {
            let d: f64 = rng.gen_range(-epsilon..epsilon);
            if d.abs() < epsilon {
                break d;
            }
        };
        (v + delta).clamp(-1.0, 1.0)
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip_[-1,1](clip_{x +- eps}(x_adv + alpha * sign(grad)))`.
pub fn pgd_step(
    x_adv: &Array2<f64>,
    grad: &Array2<f64>,
    x: &Array2<f64>,
    alpha: f64,
    epsilon: f64,
) -> Result<Array2<f64>> {
    if x_adv.dim() != grad.dim() || x_adv.dim() != x.dim() {
        return Err(Error::Shape {
            op: "pgd_step",
            shapes: vec![x_adv.shape().to_vec(), grad.shape().to_vec(), x.shape().to_vec()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("pgd_step: attack gradient".into()));
    }
    let mut out = x_adv.clone();
    Zip::from(&mut out).and(grad).and(x).for_each(|o, &g, &c| {
        let stepped = *o + alpha * sign(g);
        *o = stepped.clamp(c - epsilon, c + epsilon).clamp(-1.0, 1.0);
    });
    Ok(out)
}

/// Largest absolute per-sample difference.
pub fn linf_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0f64, |m, &x, &y| m.max((x - y).abs()))
}

/// Per-row `10 log10(|x|^2 / |x_adv - x|^2)`; an untouched row reports
/// `f64::INFINITY`.
pub fn snr_db(x: &Array2<f64>, x_adv: &Array2<f64>) -> Result<Vec<f64>> {
    if x.dim() != x_adv.dim() {
        return Err(Error::Shape {
            op: "snr_db",
            shapes: vec![x.shape().to_vec(), x_adv.shape().to_vec()],
        });
    }
    x.outer_iter()
        .zip(x_adv.outer_iter())
        .enumerate()
        .map(|(i, (a, b))| {
            let signal = a.dot(&a);
            if signal == 0.0 {
                return Err(invalid(format!("snr_db: row {i} has zero signal energy")));
            }
            let noise: f64 = a.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum();
            Ok(if noise == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (signal / noise).log10()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub x_adv: Array2<f64>,
    /// Realized `max |x_adv - x|`.
    pub linf: f64,
    pub snr_db: Vec<f64>,
    /// Steps whose transport solve hit its iteration cap.
    pub sinkhorn_warnings: usize,
}

/// Runs `spec` against `model`. See [`generate_observed`].
pub fn generate(
    model: &dyn Classifier,
    x: &Array2<f64>,
    labels: &[usize],
    spec: &AttackSpec,
    mode: Mode,
    seed: u64,
) -> Result<AdversarialBatch> {
    generate_observed(model, x, labels, spec, mode, seed, &mut |_, _| {})
}

/// Runs `spec` against `model`, calling `observe(t, iterate)` on the start
/// point (`t = 0`) and after every step.
///
/// Clean logits for the feature-scattering term are computed once from `x`
/// and held fixed. In [`Mode::Train`] batch statistics are used but never
/// committed.
pub fn generate_observed(
    model: &dyn Classifier,
    x: &Array2<f64>,
    labels: &[usize],
    spec: &AttackSpec,
    mode: Mode,
    seed: u64,
    observe: &mut dyn FnMut(usize, &Array2<f64>),
) -> Result<AdversarialBatch> {
    spec.validate()?;
    if labels.len() != x.nrows() {
        return Err(Error::Shape {
            op: "generate",
            shapes: vec![x.shape().to_vec(), vec![labels.len()]],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: model.num_classes(),
        });
    }
    let mut x_adv = init_perturbation(x, spec.epsilon, spec.random_init, seed);
    observe(0, &x_adv);
    let mut sinkhorn_warnings = 0;
    if spec.epsilon > 0.0 {
        let clean_logits = if spec.weights.gamma != 0.0 {
            let g = Graph::new();
            let xc = g.constant(x.clone().into_dyn());
            let l = model.logits(&g, xc, mode)?;
            Some(g.value(l))
        } else {
            None
        };
        let ce_only = spec.weights.gamma == 0.0 && spec.weights.zeta == 0.0;
        for t in 1..=spec.iterations {
            let g = Graph::new();
            let xv = g.leaf(x_adv.clone().into_dyn());
            let logits = model.logits(&g, xv, mode)?;
            let clean = match &clean_logits {
                Some(v) => g.constant_shared(v.clone()),
                None => logits,
            };
            let loss = hybrid_loss(&g, &spec.weights, logits, clean, labels, spec.margin, &spec.sinkhorn)?;
            if !g.scalar(loss.total)?.is_finite() {
                return Err(Error::NonFinite("generate: attack loss".into()));
            }
            if loss.transport.as_ref().is_some_and(|p| !p.converged) {
                sinkhorn_warnings += 1;
            }
            let objective = if ce_only && mode == Mode::Eval {
                saturation_guard(&g, loss.total, logits, labels, spec.weights.beta)?
            } else {
                loss.total
            };
            g.backward(objective)?;
            let grad = g
                .grad(xv)
                .map(|t| t.into_dimensionality().expect("input gradient is 2-D"))
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            x_adv = pgd_step(&x_adv, &grad, x, spec.alpha, spec.epsilon)?;
            observe(t, &x_adv);
        }
    }
    let linf = linf_distance(&x_adv, x);
    let snr = snr_db(x, &x_adv).unwrap_or_else(|_| vec![f64::NAN; x.nrows()]);
    Ok(AdversarialBatch {
        x_adv,
        linf,
        snr_db: snr,
        sinkhorn_warnings,
    })
}

/// For a pure cross-entropy objective on independent rows, only the direction
/// of each row's gradient matters to a sign step. Rows whose true-class
/// probability has rounded to one lose that direction, so they also ascend the
/// log-odds against the true class, which points the same way without
/// underflowing. Other rows are untouched.
fn saturation_guard(g: &Graph, total: Var, logits: Var, labels: &[usize], beta: f64) -> Result<Var> {
    let values: Array2<f64> = (*g.value(logits))
        .clone()
        .into_dimensionality()
        .expect("logits are 2-D");
    let rows = saturated_rows(&values, labels);
    if !rows.contains(&true) {
        return Ok(total);
    }
    let extra = log_odds_against(g, logits, labels, &rows)?;
    g.add(total, g.scale(extra, beta / labels.len() as f64))
}

/// Value of the attack objective of `spec` at `x_adv`.
pub fn attack_objective(
    model: &dyn Classifier,
    x: &Array2<f64>,
    x_adv: &Array2<f64>,
    labels: &[usize],
    spec: &AttackSpec,
    mode: Mode,
) -> Result<f64> {
    let g = Graph::new();
    let clean = g.constant(x.clone().into_dyn());
    let clean = model.logits(&g, clean, mode)?;
    let adv = g.constant(x_adv.clone().into_dyn());
    let adv = model.logits(&g, adv, mode)?;
    let loss = hybrid_loss(&g, &spec.weights, adv, clean, labels, spec.margin, &spec.sinkhorn)?;
    g.scalar(loss.total)
}

#[cfg(test)]
mod tests {
    use ndarray::{arr2, Array1};
    use proptest::prelude::*;

    use rand::Rng;

    use super::*;
    use crate::grad::Var;
    use crate::losses::ce_loss;

    /// Logits `x W^T` with no bias.
    struct Linear {
        w: Array2<f64>,
    }

    impl Classifier for Linear {
        fn num_classes(&self) -> usize {
            self.w.nrows()
        }
        fn min_samples(&self) -> usize {
            self.w.ncols()
        }
        fn logits(&self, g: &Graph, x: Var, _mode: Mode) -> Result<Var> {
            let wt = g.constant(self.w.t().to_owned().into_dyn());
            g.matmul(x, wt)
        }
    }

    fn random_linear(classes: usize, dim: usize, seed: u64) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Linear {
            w: Array2::from_shape_fn((classes, dim), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dim), |_| rng.gen_range(-0.9..0.9))
    }

    #[test]
    fn init_examples() {
        let x = random_batch(3, 50, 1);
        assert_eq!(init_perturbation(&x, 0.002, false, 9), x);
        let a = init_perturbation(&x, 0.002, true, 9);
        assert!(linf_distance(&a, &x) < 0.002);
        assert_ne!(a, x);
        assert_eq!(a, init_perturbation(&x, 0.002, true, 9));
        assert_ne!(a, init_perturbation(&x, 0.002, true, 10));
        let edge = Array2::from_elem((1, 20), 1.0);
        assert!(init_perturbation(&edge, 0.1, true, 3).iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn pgd_step_examples() {
        let x = Array2::zeros((1, 1));
        let up = Array2::ones((1, 1));
        let mut cur = x.clone();
        for t in 1..=10 {
            cur = pgd_step(&cur, &up, &x, 0.0004, 0.002).unwrap();
            if t >= 5 {
                assert!((cur[[0, 0]] - 0.002).abs() < 1e-18, "step {t}: {}", cur[[0, 0]]);
            }
        }
        assert_eq!(cur[[0, 0]], 0.002);

        let zero = Array2::zeros((1, 3));
        let start = arr2(&[[0.1, -0.2, 0.3]]);
        assert_eq!(pgd_step(&start, &zero, &start, 0.01, 0.02).unwrap(), start);

        let far = arr2(&[[0.005]]);
        assert_eq!(
            pgd_step(&far, &Array2::zeros((1, 1)), &x, 0.0004, 0.002).unwrap()[[0, 0]],
            0.002
        );

        let bad = arr2(&[[f64::NAN]]);
        assert!(pgd_step(&x, &bad, &x, 0.1, 0.1).is_err());
        let top = arr2(&[[0.999]]);
        assert_eq!(pgd_step(&top, &up, &top, 0.01, 0.1).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn snr_examples() {
        let x = Array2::from_shape_fn((1, 1000), |(_, j)| if j % 2 == 0 { 1.0 } else { -1.0 });
        let xi = x.mapv(|v| v * (1e-3f64).sqrt());
        let snr = snr_db(&x, &(&x + &xi)).unwrap();
        assert!((snr[0] - 30.0).abs() < 1e-9);
        assert_eq!(snr_db(&x, &x).unwrap()[0], f64::INFINITY);
        let eps = x.mapv(|v| v * 0.002);
        let snr = snr_db(&x, &(&x + &eps)).unwrap();
        assert!((snr[0] - 10.0 * (1.0 / 0.000004f64).log10()).abs() < 1e-9);
        assert!((snr[0] - 53.98).abs() < 0.01);
        assert!(snr_db(&Array2::zeros((1, 4)), &Array2::ones((1, 4))).is_err());
    }

    #[test]
    fn saturated_rows_still_get_a_ce_ascent_direction() {
        let mut model = random_linear(3, 20, 5);
        model.w *= 2000.0;
        let x = random_batch(4, 20, 6);
        let logits = x.dot(&model.w.t());
        let labels: Vec<usize> = argmax_rows_of(&logits);
        assert!(saturated_rows(&logits, &labels).iter().all(|&s| s));
        let spec = AttackSpec::fgsm(0.01);
        // plain cross-entropy leaves at least one row without any direction
        let plain = generate(&model, &x, &labels, &spec, Mode::Train, 0).unwrap();
        assert!(plain.x_adv.outer_iter().zip(x.outer_iter()).any(|(a, b)| a == b));
        let adv = generate(&model, &x, &labels, &spec, Mode::Eval, 0).unwrap();
        for (i, &t) in labels.iter().enumerate() {
            let row = logits.row(i);
            let top = (0..3)
                .filter(|&j| j != t)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..3)
                .map(|j| if j == t { 0.0 } else { (row[j] - top).exp() })
                .collect();
            let total: f64 = weights.iter().sum();
            for k in 0..20 {
                let d: f64 = (0..3).map(|j| weights[j] / total * model.w[[j, k]]).sum::<f64>() - model.w[[t, k]];
                let expected = (x[[i, k]] + 0.01 * d.signum()).clamp(-1.0, 1.0);
                assert!((adv.x_adv[[i, k]] - expected).abs() < 1e-15, "row {i} coord {k}");
            }
        }
    }

    fn argmax_rows_of(a: &Array2<f64>) -> Vec<usize> {
        crate::model::argmax_rows(a)
    }

    #[test]
    fn fgsm_matches_direct_formula_bitwise() {
        let model = random_linear(4, 30, 2);
        let x = random_batch(5, 30, 3);
        let labels = [0, 1, 2, 3, 0];
        let adv = generate(&model, &x, &labels, &AttackSpec::fgsm(0.01), Mode::Eval, 0).unwrap();
        let g = Graph::new();
        let xv = g.leaf(x.clone().into_dyn());
        let loss = ce_loss(&g, model.logits(&g, xv, Mode::Eval).unwrap(), &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(xv).unwrap();
        let direct = Array2::from_shape_fn(x.dim(), |(i, j)| {
            let s = grad[[i, j]];
            let s = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x[[i, j]] + 0.01 * s).clamp(-1.0, 1.0)
        });
        assert_eq!(adv.x_adv, direct);
        assert_eq!(AttackSpec::fgsm(0.01).name(), "FGSM");
    }

    #[test]
    fn one_step_matches_brute_force_worst_case_on_binary_linear_model() {
        for seed in 0..5 {
            let dim = 8;
            let model = random_linear(2, dim, seed);
            let x = random_batch(1, dim, seed + 100);
            let eps = 0.05;
            let adv = generate(&model, &x, &[0], &AttackSpec::fgsm(eps), Mode::Eval, 0).unwrap();
            let gap = |z: &Array1<f64>| model.w.row(1).dot(z) - model.w.row(0).dot(z);
            let mut best = f64::NEG_INFINITY;
            for pattern in 0..(1u32 << dim) {
                let z = Array1::from_shape_fn(dim, |j| x[[0, j]] + if pattern >> j & 1 == 1 { eps } else { -eps });
                best = best.max(gap(&z));
            }
            let got = gap(&adv.x_adv.row(0).to_owned());
            assert!((got - best).abs() < 1e-12, "{got} vs {best}");
        }
    }

    #[test]
    fn zero_budget_returns_input() {
        let model = random_linear(3, 10, 1);
        let x = random_batch(2, 10, 2);
        let spec = AttackSpec::pgd(0.0, 10);
        let adv = generate(&model, &x, &[0, 1], &spec, Mode::Eval, 4).unwrap();
        assert_eq!(adv.x_adv, x);
        assert_eq!(adv.linf, 0.0);
    }

    #[test]
    fn every_family_member_runs_and_is_deterministic() {
        let model = random_linear(3, 16, 5);
        let x = random_batch(4, 16, 6);
        let labels = [0, 1, 2, 1];
        for spec in [
            AttackSpec::pgd(0.01, 5),
            AttackSpec::cw(0.01, 5),
            AttackSpec::fs(0.01, 5),
            AttackSpec::hybrid(0.01, 5),
        ] {
            let a = generate(&model, &x, &labels, &spec, Mode::Eval, 7).unwrap();
            let b = generate(&model, &x, &labels, &spec, Mode::Eval, 7).unwrap();
            assert_eq!(a, b, "{}", spec.name());
            assert!(a.linf <= 0.01 + 1e-12);
            assert_ne!(a.x_adv, x);
        }
    }

    #[test]
    fn spec_validation_and_names() {
        assert!(AttackSpec::pgd(-0.1, 10).validate().is_err());
        assert!(AttackSpec::pgd(0.002, 0).validate().is_err());
        let mut s = AttackSpec::pgd(0.002, 10);
        s.alpha = 0.0;
        assert!(s.validate().is_err());
        assert_eq!(AttackSpec::pgd(0.002, 10).name(), "PGD10");
        assert_eq!(AttackSpec::cw(0.002, 40).name(), "CW40");
        assert_eq!(AttackSpec::hybrid(0.002, 10).name(), "HYB10");
        assert!((AttackSpec::pgd(0.002, 10).alpha - 0.0004).abs() < 1e-18);
        assert!((AttackSpec::pgd(0.002, 10).with_epsilon(0.01).alpha - 0.002).abs() < 1e-15);
        let json = serde_json::to_string(&AttackSpec::hybrid(0.002, 10)).unwrap();
        let back: AttackSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AttackSpec::hybrid(0.002, 10));
    }

    #[test]
    fn monotone_budget_on_average() {
        let model = random_linear(4, 24, 8);
        let labels = [0, 1, 2, 3, 0, 1];
        let mut means = Vec::new();
        for iters in [1, 3, 10] {
            let spec = AttackSpec::pgd(0.02, iters);
            let mut total = 0.0;
            for batch in 0..10 {
                let x = random_batch(6, 24, 50 + batch);
                let adv = generate(&model, &x, &labels, &spec, Mode::Eval, batch).unwrap();
                total += attack_objective(&model, &x, &adv.x_adv, &labels, &spec, Mode::Eval).unwrap();
            }
            means.push(total / 10.0);
        }
        assert!(
            means[0] <= means[1] + 1e-12 && means[1] <= means[2] + 1e-12,
            "{means:?}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_iterate_stays_in_the_ball(seed in 0u64..1000, eps in 0.001f64..0.3, iters in 1usize..6, family in 0usize..4) {
            let model = random_linear(3, 12, seed);
            let mut x = random_batch(3, 12, seed + 1);
            x[[0, 0]] = 1.0;
            x[[1, 1]] = -1.0;
            let spec = [AttackSpec::pgd(eps, iters), AttackSpec::cw(eps, iters), AttackSpec::fs(eps, iters), AttackSpec::hybrid(eps, iters)][family].clone();
            let mut ok = true;
            generate_observed(&model, &x, &[0, 1, 2], &spec, Mode::Eval, seed, &mut |_, it| {
                ok &= linf_distance(it, &x) <= eps + 1e-12 && it.iter().all(|v| (-1.0..=1.0).contains(v));
            }).unwrap();
            prop_assert!(ok);
        }
    }
}
