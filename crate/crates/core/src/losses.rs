//! Attack objectives: cross-entropy, margin, optimal-transport feature
//! scattering and their weighted sum.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{CustomOp, Graph, Tensor, Var};

/// Coefficients of the hybrid objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Cross-entropy.
    pub beta: f64,
    /// Feature scattering.
    pub gamma: f64,
    /// Margin.
    pub zeta: f64,
}

impl LossWeights {
    pub const CE: Self = Self::new(1.0, 0.0, 0.0);
    pub const FS: Self = Self::new(0.0, 1.0, 0.0);
    pub const MARGIN: Self = Self::new(0.0, 0.0, 1.0);
    pub const HYBRID: Self = Self::new(1.0, 1.0, 1.0);

    pub const fn new(beta: f64, gamma: f64, zeta: f64) -> Self {
        Self { beta, gamma, zeta }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("beta", self.beta), ("gamma", self.gamma), ("zeta", self.zeta)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "weights.{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.beta == 0.0 && self.gamma == 0.0 && self.zeta == 0.0
    }

    /// Short label such as `CE+FS+M`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [("CE", self.beta), ("FS", self.gamma), ("M", self.zeta)]
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(n, _)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::HYBRID
    }
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, labels)?;
    Ok(g.neg(g.mean(picked)))
}

/// `logsumexp_{j != t} f_j - f_t` per row, the log-odds against the true
/// class. Cross-entropy is `softplus` of it, so both rise in the same
/// direction, but this one keeps a usable gradient when the true-class
/// probability rounds to one.
struct LogOddsAgainst {
    labels: Vec<usize>,
    rows: Vec<bool>,
}

impl LogOddsAgainst {
    /// Softmax over the competing classes of `row`, in place; returns the
    /// log-odds.
    fn competitors(row: &mut [f64], label: usize) -> f64 {
        let target = row[label];
        let top = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == label { 0.0 } else { (*v - top).exp() };
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
        top + total.ln() - target
    }
}

impl CustomOp for LogOddsAgainst {
    fn name(&self) -> &'static str {
        "log_odds_against"
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        let mut out = Array1::zeros(input.shape()[0]);
        for (i, row) in input.outer_iter().enumerate() {
            if self.rows[i] {
                out[i] = Self::competitors(&mut row.iter().copied().collect::<Vec<_>>(), self.labels[i]);
            }
        }
        out.into_dyn()
    }

    fn backward(&self, input: &Tensor, _output: &Tensor, grad_output: &Tensor) -> Tensor {
        let mut grad = Tensor::zeros(input.raw_dim());
        for (i, (row, mut out)) in input.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
            if !self.rows[i] {
                continue;
            }
            let mut q: Vec<f64> = row.iter().copied().collect();
            Self::competitors(&mut q, self.labels[i]);
            q[self.labels[i]] = -1.0;
            for (o, q) in out.iter_mut().zip(q) {
                *o = grad_output[i] * q;
            }
        }
        grad
    }
}

/// Rows whose true-class probability is exactly one in floating point.
/// Their cross-entropy gradient is zero or has lost the true-class term.
pub fn saturated_rows(logits: &Array2<f64>, labels: &[usize]) -> Vec<bool> {
    logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &t)| 1.0 + LogOddsAgainst::competitors(&mut row.to_vec(), t).exp() == 1.0)
        .collect()
}

/// Sum over the selected rows of the log-odds against the true class.
pub fn log_odds_against(g: &Graph, logits: Var, labels: &[usize], rows: &[bool]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() || rows.len() != labels.len() || shape[1] < 2 {
        return Err(Error::Shape {
            op: "log_odds_against",
            shapes: vec![shape, vec![labels.len()], vec![rows.len()]],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&t| t >= shape[1]) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: shape[1],
        });
    }
    let op = LogOddsAgainst {
        labels: labels.to_vec(),
        rows: rows.to_vec(),
    };
    Ok(g.sum(g.custom(logits, std::rc::Rc::new(op))))
}

/// `-sum_i max(f_t - max_{j != t} f_j + margin, 0)`.
pub fn margin_loss(g: &Graph, logits: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if !margin.is_finite() {
        return Err(invalid(format!("margin must be finite, got {margin}")));
    }
    let target = g.pick(logits, labels)?;
    let other = g.max_except(logits, labels)?;
    let gap = g.shift(g.sub(target, other)?, margin);
    Ok(g.neg(g.sum(g.relu(gap))))
}

/// `C_ij = 1 - cos(clean_i, adv_j)`, clamped to `[0, 2]` against rounding.
pub fn cosine_cost_matrix(g: &Graph, clean: Var, adv: Var) -> Result<Var> {
    let cos = g.cosine_similarity(clean, adv)?;
    g.clamp(g.shift(g.neg(cos), 1.0), 0.0, 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub regularization: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            regularization: 0.01,
            max_iters: 1000,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(Error::Config(format!(
                "sinkhorn.regularization must be positive, got {}",
                self.regularization
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn.max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn.tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub mu: Array1<f64>,
    pub nu: Array1<f64>,
    pub cost: Array2<f64>,
    pub regularization: f64,
}

impl TransportProblem {
    pub fn uniform(cost: Array2<f64>, regularization: f64) -> Self {
        let (n, m) = cost.dim();
        Self {
            mu: Array1::from_elem(n, 1.0 / n as f64),
            nu: Array1::from_elem(m, 1.0 / m as f64),
            cost,
            regularization,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(invalid(format!(
                "regularization must be positive, got {}",
                self.regularization
            )));
        }
        let (n, m) = self.cost.dim();
        if n == 0 || m == 0 || self.mu.len() != n || self.nu.len() != m {
            return Err(Error::Shape {
                op: "sinkhorn_ot",
                shapes: vec![vec![self.mu.len()], vec![self.nu.len()], vec![n, m]],
            });
        }
        for (name, w) in [("mu", &self.mu), ("nu", &self.nu)] {
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (w.sum() - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{name} must be a probability vector")));
            }
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("sinkhorn_ot: cost matrix".into()));
        }
        Ok(())
    }
}

/// Solution of an entropic transport problem.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `<plan, cost>`.
    pub distance: f64,
    /// False when the scaling iterations did not reach the marginal tolerance
    /// within `max_iters`.
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute marginal error of the last scaling iterate.
    pub iterate_violation: f64,
    /// Largest absolute marginal error of the returned plan.
    pub marginal_violation: f64,
}

fn marginal_violation(p: &Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    let rows = p.sum_axis(Axis(1));
    let cols = p.sum_axis(Axis(0));
    let r = rows.iter().zip(mu).map(|(a, b)| (a - b).abs());
    let c = cols.iter().zip(nu).map(|(a, b)| (a - b).abs());
    r.chain(c).fold(0.0f64, f64::max)
}

/// Moves an approximate plan onto the transport polytope: scale rows and
/// columns down to their targets, then spread the missing mass as a rank-one
/// correction.
fn round_to_feasible(mut p: Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>) -> Array2<f64> {
    for (mut row, &target) in p.outer_iter_mut().zip(mu) {
        let s = row.sum();
        if s > target {
            row *= target / s;
        }
    }
    for (mut col, &target) in p.axis_iter_mut(Axis(1)).zip(nu) {
        let s = col.sum();
        if s > target {
            col *= target / s;
        }
    }
    let err_r = mu - &p.sum_axis(Axis(1));
    let err_c = nu - &p.sum_axis(Axis(0));
    let mass = err_c.sum();
    if mass > 0.0 {
        for ((i, j), v) in p.indexed_iter_mut() {
            *v += err_r[i] * err_c[j] / mass;
        }
    }
    p
}

/// Scalings above this are folded back into the log-domain potentials.
const ABSORB_THRESHOLD: f64 = 1e30;

/// Log-stabilized Sinkhorn iterations followed by rounding onto the feasible
/// set, so the returned plan always has the requested marginals.
///
/// The plan is kept as `P_ij = u_i K_ij v_j` with
/// `K_ij = exp((f_i + g_j - C_ij) / reg)`. The scalings `u`, `v` are updated
/// multiplicatively and absorbed into the dual potentials `f`, `g` whenever
/// they grow large, which keeps every quantity finite for small `reg`.
/// Zero-mass rows and columns are removed before solving.
pub fn sinkhorn_ot(problem: &TransportProblem, max_iters: usize, tolerance: f64) -> Result<TransportPlan> {
    problem.validate()?;
    let rows: Vec<usize> = (0..problem.mu.len()).filter(|&i| problem.mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..problem.nu.len()).filter(|&j| problem.nu[j] > 0.0).collect();
    let mu = Array1::from_iter(rows.iter().map(|&i| problem.mu[i]));
    let nu = Array1::from_iter(cols.iter().map(|&j| problem.nu[j]));
    let c = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| problem.cost[[rows[a], cols[b]]]);
    let reg = problem.regularization;
    let (n, m) = c.dim();

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let kernel = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / reg).exp())
    };
    // Start from the row minima so every row of K has an entry equal to one.
    for i in 0..n {
        f[i] = c.row(i).fold(f64::INFINITY, |a, &b| a.min(b));
    }
    let mut k = kernel(&f, &g);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let kv = k.dot(&v);
        if iterations > 1 {
            // Columns are exact after the previous `v` update, so the row
            // error is the whole marginal error.
            let err = kv
                .iter()
                .zip(&u)
                .zip(&mu)
                .fold(0.0f64, |e, ((kv, u), mu)| e.max((u * kv - mu).abs()));
            if err < tolerance {
                converged = true;
                iterations -= 1;
                break;
            }
        }
        u = &mu / &kv;
        v = &nu / &k.t().dot(&u);
        let big = u
            .iter()
            .chain(v.iter())
            .any(|&s| !(s < ABSORB_THRESHOLD && s > 1.0 / ABSORB_THRESHOLD));
        if big {
            f += &(u.mapv(f64::ln) * reg);
            g += &(v.mapv(f64::ln) * reg);
            k = kernel(&f, &g);
            u.fill(1.0);
            v.fill(1.0);
        }
        if u.iter().chain(v.iter()).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("sinkhorn_ot: scaling vectors".into()));
        }
    }
    let reduced = Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j]);
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn_ot: transport plan".into()));
    }
    let iterate_violation = marginal_violation(&reduced, &mu, &nu);
    let reduced = round_to_feasible(reduced, &mu, &nu);
    let mut plan = Array2::zeros(problem.cost.raw_dim());
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            plan[[i, j]] = reduced[[a, b]];
        }
    }
    let marginal_violation = marginal_violation(&plan, &problem.mu, &problem.nu);
    let distance = (&plan * &problem.cost).sum();
    Ok(TransportPlan {
        plan,
        distance,
        converged,
        iterations,
        iterate_violation,
        marginal_violation,
    })
}

/// Feature-scattering loss: entropic OT distance between the clean and
/// adversarial logit batches under uniform marginals.
///
/// The plan is solved on the current cost values and then held fixed, so the
/// gradient is that of `<plan, C>` with respect to `C`.
pub fn fs_loss(g: &Graph, clean: Var, adv: Var, sinkhorn: &SinkhornConfig) -> Result<(Var, TransportPlan)> {
    let (cs, as_) = (g.shape(clean), g.shape(adv));
    if cs != as_ {
        return Err(Error::Shape {
            op: "fs_loss",
            shapes: vec![cs, as_],
        });
    }
    let cost = cosine_cost_matrix(g, clean, adv)?;
    let cost_value = g.value(cost).as_ref().clone().into_dimensionality().unwrap();
    let problem = TransportProblem::uniform(cost_value, sinkhorn.regularization);
    let result = sinkhorn_ot(&problem, sinkhorn.max_iters, sinkhorn.tolerance)?;
    let plan = g.constant(result.plan.clone().into_dyn());
    Ok((g.sum(g.mul(plan, cost)?), result))
}

/// Components of one hybrid-loss evaluation. Terms with zero weight are not
/// evaluated.
#[derive(Debug)]
pub struct HybridLoss {
    pub total: Var,
    pub ce: Option<Var>,
    pub fs: Option<Var>,
    pub margin: Option<Var>,
    pub transport: Option<TransportPlan>,
}

/// `beta * CE(adv) + gamma * FS(clean, adv) + zeta * margin(adv)`.
pub fn hybrid_loss(
    g: &Graph,
    weights: &LossWeights,
    logits_adv: Var,
    logits_clean: Var,
    labels: &[usize],
    margin: f64,
    sinkhorn: &SinkhornConfig,
) -> Result<HybridLoss> {
    weights.validate().map_err(|e| invalid(e.to_string()))?;
    if weights.is_zero() {
        return Err(invalid("hybrid loss needs at least one nonzero weight"));
    }
    let weighted = |v: Var, w: f64| if w == 1.0 { v } else { g.scale(v, w) };
    let mut terms = Vec::new();
    let ce = if weights.beta != 0.0 {
        let v = ce_loss(g, logits_adv, labels)?;
        terms.push(weighted(v, weights.beta));
        Some(v)
    } else {
        None
    };
    let (fs, transport) = if weights.gamma != 0.0 {
        let (v, plan) = fs_loss(g, logits_clean, logits_adv, sinkhorn)?;
        terms.push(weighted(v, weights.gamma));
        (Some(v), Some(plan))
    } else {
        (None, None)
    };
    let margin_term = if weights.zeta != 0.0 {
        let v = margin_loss(g, logits_adv, labels, margin)?;
        terms.push(weighted(v, weights.zeta));
        Some(v)
    } else {
        None
    };
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(HybridLoss {
        total,
        ce,
        fs,
        margin: margin_term,
        transport,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{arr1, arr2, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grad::finite_diff_check;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Exact OT under uniform marginals: the optimum sits on a permutation vertex.
    fn brute_force_ot(cost: &Array2<f64>) -> f64 {
        let n = cost.nrows();
        permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    fn scalar(f: impl FnOnce(&Graph) -> Result<Var>) -> f64 {
        let g = Graph::new();
        let v = f(&g).unwrap();
        g.scalar(v).unwrap()
    }

    fn logits(g: &Graph, rows: &[&[f64]]) -> Var {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.leaf(Array2::from_shape_vec((rows.len(), k), flat).unwrap().into_dyn())
    }

    #[test]
    fn ce_examples() {
        let uniform = scalar(|g| ce_loss(g, logits(g, &[&[0.0; 4]]), &[2]));
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let two = scalar(|g| ce_loss(g, logits(g, &[&[2.0, 0.0]]), &[0]));
        assert!((two - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let sure = scalar(|g| ce_loss(g, logits(g, &[&[800.0, -800.0]]), &[0]));
        assert!(sure.abs() < 1e-300);
        let g = Graph::new();
        assert!(matches!(
            ce_loss(&g, logits(&g, &[&[0.0, 1.0]]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn margin_examples() {
        assert_eq!(scalar(|g| margin_loss(g, logits(g, &[&[5.0, 3.0]]), &[0], 50.0)), -52.0);
        assert_eq!(
            scalar(|g| margin_loss(g, logits(g, &[&[-100.0, 3.0]]), &[0], 50.0)),
            0.0
        );
        assert_eq!(scalar(|g| margin_loss(g, logits(g, &[&[1.0, 1.0]]), &[1], 0.0)), 0.0);
        // Sum reduction over the batch.
        let two = scalar(|g| margin_loss(g, logits(g, &[&[5.0, 3.0], &[0.0, 1.0]]), &[0, 1], 50.0));
        assert_eq!(two, -52.0 - 51.0);
        let g = Graph::new();
        assert!(margin_loss(&g, logits(&g, &[&[1.0]]), &[0], 50.0).is_err());
    }

    #[test]
    fn cosine_cost_examples() {
        let g = Graph::new();
        let a = logits(&g, &[&[1.0, 0.0], &[0.0, 2.0]]);
        let b = logits(&g, &[&[-3.0, 0.0], &[0.0, 1.0]]);
        let c = g.value(cosine_cost_matrix(&g, a, b).unwrap());
        assert!((c[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((c[[0, 1]] - 1.0).abs() < 1e-15);
        assert!((c[[1, 1]]).abs() < 1e-15);
        let same = g.value(cosine_cost_matrix(&g, a, a).unwrap());
        assert!(same[[0, 0]].abs() < 1e-15 && same[[1, 1]].abs() < 1e-15);
        let zero = logits(&g, &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(cosine_cost_matrix(&g, zero, a).is_err());
    }

    #[test]
    fn sinkhorn_constant_cost_and_two_point() {
        let flat = TransportProblem {
            mu: arr1(&[0.2, 0.8]),
            nu: arr1(&[0.5, 0.3, 0.2]),
            cost: Array2::ones((2, 3)),
            regularization: 0.01,
        };
        let r = sinkhorn_ot(&flat, 1000, 1e-6).unwrap();
        assert!((r.distance - 1.0).abs() < 1e-6);
        assert!(r.converged);

        let swap = TransportProblem::uniform(arr2(&[[0.0, 1.0], [1.0, 0.0]]), 0.01);
        let r = sinkhorn_ot(&swap, 1000, 1e-6).unwrap();
        assert!(r.distance < 0.02, "{}", r.distance);
        assert!((r.plan[[0, 0]] - 0.5).abs() < 0.02);
        assert!(r.marginal_violation < 1e-6);
    }

    #[test]
    fn sinkhorn_tracks_brute_force_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..=4);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..2.0));
            let exact = brute_force_ot(&cost);
            let r = sinkhorn_ot(&TransportProblem::uniform(cost, 0.01), 1000, 1e-6).unwrap();
            assert!(r.marginal_violation < 1e-6);
            assert!(r.distance >= exact - 1e-6);
            assert!((r.distance - exact).abs() < 0.02, "{} vs {}", r.distance, exact);
        }
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..2.0));
        let r = sinkhorn_ot(&TransportProblem::uniform(cost, 0.01), 1, 1e-14).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn sinkhorn_rejects_bad_problems() {
        let mut p = TransportProblem::uniform(Array2::zeros((2, 2)), 0.0);
        assert!(sinkhorn_ot(&p, 10, 1e-6).is_err());
        p.regularization = 0.1;
        p.mu = arr1(&[0.7, 0.7]);
        assert!(sinkhorn_ot(&p, 10, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_handles_zero_mass_entries() {
        let p = TransportProblem {
            mu: arr1(&[0.0, 1.0]),
            nu: arr1(&[0.5, 0.5]),
            cost: arr2(&[[0.0, 0.0], [1.0, 0.5]]),
            regularization: 0.01,
        };
        let r = sinkhorn_ot(&p, 1000, 1e-6).unwrap();
        assert_eq!(r.plan.row(0).sum(), 0.0);
        assert!((r.distance - 0.75).abs() < 1e-6);
    }

    #[test]
    fn fs_loss_examples() {
        let cfg = SinkhornConfig::default();
        let rows: &[&[f64]] = &[&[1.0, 2.0, 0.5], &[-1.0, 0.3, 2.0], &[0.2, -0.4, 1.0]];
        let g = Graph::new();
        let clean = logits(&g, rows);
        let (same, _) = fs_loss(&g, clean, clean, &cfg).unwrap();
        let base = g.scalar(same).unwrap();
        assert!((0.0..0.02).contains(&base));

        let mut flipped: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        flipped[1].iter_mut().for_each(|v| *v = -*v);
        let fr: Vec<&[f64]> = flipped.iter().map(|r| r.as_slice()).collect();
        let adv = logits(&g, &fr);
        let (v, _) = fs_loss(&g, clean, adv, &cfg).unwrap();
        assert!(g.scalar(v).unwrap() > base);

        let oracle = {
            let c = g.value(cosine_cost_matrix(&g, clean, adv).unwrap());
            brute_force_ot(&(*c).clone().into_dimensionality().unwrap())
        };
        assert!(oracle > 0.0);
        assert!((g.scalar(v).unwrap() - oracle).abs() < 0.02);
    }

    #[test]
    fn fs_gradient_treats_plan_as_constant() {
        let cfg = SinkhornConfig::default();
        let clean = arr2(&[[1.0, 2.0, 0.5], [-1.0, 0.3, 2.0]]).into_dyn();
        let point = arr2(&[[0.5, 1.0, 1.5], [0.3, -0.2, 0.9]]).into_dyn();
        let g = Graph::new();
        let c = g.constant(clean.clone());
        let x = g.leaf(point.clone());
        let (loss, plan) = fs_loss(&g, c, x, &cfg).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap();
        // Same gradient from an explicit <P, C> with P frozen.
        let frozen = plan.plan.clone().into_dyn();
        let err = finite_diff_check(
            |g, x| {
                let p = g.constant(frozen.clone());
                let cost = cosine_cost_matrix(g, g.constant(clean.clone()), x)?;
                Ok(g.sum(g.mul(p, cost)?))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
        let g2 = Graph::new();
        let x2 = g2.leaf(point.clone());
        let p = g2.constant(frozen);
        let cost = cosine_cost_matrix(&g2, g2.constant(clean), x2).unwrap();
        let l = g2.sum(g2.mul(p, cost).unwrap());
        g2.backward(l).unwrap();
        assert_eq!(g2.grad(x2).unwrap(), analytic);
    }

    #[test]
    fn ce_and_margin_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = [0, 3, 1];
        for _ in 0..20 {
            let point = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-3.0..3.0)).into_dyn();
            let ce = finite_diff_check(|g, x| ce_loss(g, x, &labels), &point, 1e-5).unwrap();
            assert!(ce < 1e-6, "ce {ce}");
            let m = finite_diff_check(|g, x| margin_loss(g, x, &labels, 1.0), &point, 1e-5).unwrap();
            assert!(m < 1e-6, "margin {m}");
        }
    }

    #[test]
    fn log_odds_is_the_inverse_softplus_of_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let labels = [2, 0, 1];
        let all = [true; 3];
        for _ in 0..20 {
            let point = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-3.0..3.0)).into_dyn();
            for (i, &t) in labels.iter().enumerate() {
                let g = Graph::new();
                let x = g.constant(point.clone());
                let one = [t];
                let row = g.constant(point.slice(ndarray::s![i..i + 1, ..]).to_owned().into_dyn());
                let ce = g.scalar(ce_loss(&g, row, &one).unwrap()).unwrap();
                let mut mask = [false; 3];
                mask[i] = true;
                let lo = g.scalar(log_odds_against(&g, x, &labels, &mask).unwrap()).unwrap();
                assert!((lo.exp().ln_1p() - ce).abs() < 1e-12, "row {i}: {lo} vs {ce}");
            }
            let err = finite_diff_check(|g, x| log_odds_against(g, x, &labels, &all), &point, 1e-5).unwrap();
            assert!(err < 1e-6, "log odds {err}");
            let err = finite_diff_check(
                |g, x| log_odds_against(g, x, &labels, &[true, false, true]),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "masked log odds {err}");
        }
    }

    #[test]
    fn saturated_rows_keep_a_direction_through_log_odds() {
        let logits = arr2(&[[0.0, 800.0, 0.0], [0.0, 1.0, 0.0]]);
        let labels = [1, 1];
        assert_eq!(saturated_rows(&logits, &labels), vec![true, false]);
        let g = Graph::new();
        let x = g.leaf(logits.clone().into_dyn());
        let ce = ce_loss(&g, x, &labels).unwrap();
        g.backward(ce).unwrap();
        assert!(g
            .grad(x)
            .unwrap()
            .outer_iter()
            .next()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let g = Graph::new();
        let x = g.leaf(logits.into_dyn());
        let lo = log_odds_against(&g, x, &labels, &[true, false]).unwrap();
        assert_eq!(g.scalar(lo).unwrap(), 2f64.ln() - 800.0);
        g.backward(lo).unwrap();
        let grad = g.grad(x).unwrap().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(grad.row(0).to_vec(), vec![0.5, -1.0, 0.5]);
        assert!(grad.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hybrid_specializations_and_sum() {
        let cfg = SinkhornConfig::default();
        let rows_adv: &[&[f64]] = &[&[1.0, 2.0, 0.5], &[-1.0, 0.3, 2.0]];
        let rows_clean: &[&[f64]] = &[&[1.5, 1.0, 0.0], &[-0.5, 0.1, 2.5]];
        let labels = [1, 2];
        let eval = |w: LossWeights| {
            let g = Graph::new();
            let h = hybrid_loss(
                &g,
                &w,
                logits(&g, rows_adv),
                logits(&g, rows_clean),
                &labels,
                50.0,
                &cfg,
            )
            .unwrap();
            g.scalar(h.total).unwrap()
        };
        let ce = scalar(|g| ce_loss(g, logits(g, rows_adv), &labels));
        let m = scalar(|g| margin_loss(g, logits(g, rows_adv), &labels, 50.0));
        let fs = scalar(|g| Ok(fs_loss(g, logits(g, rows_clean), logits(g, rows_adv), &cfg)?.0));
        assert_eq!(eval(LossWeights::CE), ce);
        assert_eq!(eval(LossWeights::MARGIN), m);
        assert_eq!(eval(LossWeights::FS), fs);
        assert!((eval(LossWeights::HYBRID) - (ce + fs + m)).abs() < 1e-12);
        let g = Graph::new();
        let zero = LossWeights::new(0.0, 0.0, 0.0);
        assert!(hybrid_loss(
            &g,
            &zero,
            logits(&g, rows_adv),
            logits(&g, rows_clean),
            &labels,
            50.0,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn weights_validate_and_label() {
        assert!(LossWeights::new(1.0, -0.1, 0.0).validate().is_err());
        assert!(LossWeights::new(f64::NAN, 0.0, 0.0).validate().is_err());
        assert_eq!(LossWeights::HYBRID.label(), "CE+FS+M");
        assert_eq!(LossWeights::new(0.0, 2.0, 1.0).label(), "FS+M");
    }

    fn small_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..=4).prop_flat_map(|n| {
            let row = || prop::collection::vec(0.1f64..3.0, 3);
            (
                prop::collection::vec(row(), n),
                prop::collection::vec(row(), n),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plan_marginals_and_transpose_symmetry(costs in prop::collection::vec(0.0f64..2.0, 9), m in prop::collection::vec(0.05f64..1.0, 3)) {
            let cost = Array2::from_shape_vec((3, 3), costs).unwrap();
            let mu = Array1::from(m.clone()) / m.iter().sum::<f64>();
            let nu = arr1(&[0.2, 0.3, 0.5]);
            let fwd = TransportProblem { mu: mu.clone(), nu: nu.clone(), cost: cost.clone(), regularization: 0.01 };
            let rev = TransportProblem { mu: nu, nu: mu, cost: cost.t().to_owned(), regularization: 0.01 };
            let a = sinkhorn_ot(&fwd, 1000, 1e-6).unwrap();
            let b = sinkhorn_ot(&rev, 1000, 1e-6).unwrap();
            prop_assert!(a.marginal_violation < 1e-6);
            prop_assert!(a.distance >= 0.0);
            // Exact when both runs converge; otherwise limited by the unconverged mass.
            let slack = 1e-6 + 10.0 * 3.0 * a.iterate_violation.max(b.iterate_violation);
            prop_assert!((a.distance - b.distance).abs() < slack);
        }

        #[test]
        fn self_transport_is_minimal_over_row_permutations((clean, _, _) in small_batch()) {
            let cfg = SinkhornConfig::default();
            let clean = to_array(&clean);
            let fs_of = |adv: &Array2<f64>| scalar(|g| Ok(fs_loss(g, g.constant(clean.clone().into_dyn()), g.constant(adv.clone().into_dyn()), &cfg)?.0));
            let own = fs_of(&clean);
            for p in permutations(clean.nrows()) {
                let permuted = Array2::from_shape_fn(clean.dim(), |(i, j)| clean[[p[i], j]]);
                prop_assert!(own <= fs_of(&permuted) + 1e-6);
            }
        }

        #[test]
        fn losses_are_batch_order_invariant((adv, clean, labels) in small_batch(), seed in 0u64..100) {
            let cfg = SinkhornConfig::default();
            let n = labels.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let (adv, clean) = (to_array(&adv), to_array(&clean));
            let perm = |a: &Array2<f64>| Array2::from_shape_fn(a.dim(), |(i, j)| a[[order[i], j]]);
            let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let eval = |adv: &Array2<f64>, clean: &Array2<f64>, labels: &[usize]| {
                let g = Graph::new();
                let h = hybrid_loss(&g, &LossWeights::HYBRID, g.constant(adv.clone().into_dyn()), g.constant(clean.clone().into_dyn()), labels, 50.0, &cfg).unwrap();
                (g.scalar(h.ce.unwrap()).unwrap(), g.scalar(h.fs.unwrap()).unwrap(), g.scalar(h.margin.unwrap()).unwrap())
            };
            let a = eval(&adv, &clean, &labels);
            let b = eval(&perm(&adv), &perm(&clean), &plabels);
            prop_assert!((a.0 - b.0).abs() < 1e-12);
            prop_assert!((a.1 - b.1).abs() < 1e-7);
            prop_assert!((a.2 - b.2).abs() < 1e-12);
        }
    }
}
