//! Smoothness and variance constants, the learning-rate constraint, and
//! numerical checks of the local-drift lemma and the convergence theorem.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, VerticalDataset};
use crate::error::{Error, Result};
use crate::model::{block_gradients, participant_grad, Arch, Batch, GlobalModel, Head, ModelSpec, Snapshot};
use crate::optim::{run_local_round, weights_for, LocalOptimizer};
use crate::protocol::RunResult;
use crate::rng::SplitMix64;

/// Relative slack used when comparing a rate against its admissible maximum.
const RATE_SLACK: f64 = 1e-12;

/// `1 / (16 · τ · max{L, L_k} · max_t w^t)`.
pub fn lr_constraint_max(l: f64, l_k: f64, tau: usize, max_weight: f64) -> f64 {
    1.0 / (16.0 * tau as f64 * l.max(l_k) * max_weight)
}

/// `η_k / (τ_k^r · max_t w_k^{r,t})`.
pub fn adaptive_lr(base: f64, tau: usize, max_weight: f64) -> f64 {
    base / (tau as f64 * max_weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessMethod {
    Exact,
    UserSupplied,
}

/// Global smoothness `L` and per-participant `L_k` (server first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub l: f64,
    pub l_k: Vec<f64>,
    pub method: SmoothnessMethod,
}

impl SmoothnessEstimate {
    pub fn user_supplied(l: f64, l_k: Vec<f64>) -> Result<Self> {
        if !(l > 0.0) || l_k.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("smoothness constants must be positive"));
        }
        Ok(Self {
            l,
            l_k,
            method: SmoothnessMethod::UserSupplied,
        })
    }

    /// `max{L, L_k}` for participant `p`.
    pub fn l_max(&self, p: usize) -> f64 {
        self.l.max(self.l_k[p])
    }
}

/// Jacobian of the prediction with respect to Θ for the sum head over linear
/// parties; row `i` holds `∂ŷ_i / ∂Θ`.
fn quadratic_jacobian(data: &VerticalDataset, embed_width: usize) -> DMatrix<f64> {
    let n = data.n_samples();
    let v = 1 + data.widths().iter().map(|d| d * embed_width).sum::<usize>();
    let mut j = DMatrix::zeros(n, v);
    for i in 0..n {
        j[(i, 0)] = 1.0;
        let mut col = 1;
        for k in 0..data.num_parties() {
            let x = data.part(k);
            for _ in 0..embed_width {
                for d in 0..x.ncols() {
                    j[(i, col)] = x[(i, d)];
                    col += 1;
                }
            }
        }
    }
    j
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub(crate) fn power_iteration(m: &DMatrix<f64>, tol: f64) -> f64 {
    let dim = m.nrows();
    let mut rng = SplitMix64::keyed(0x5EED, &[dim as u64]);
    let mut v = DVector::from_fn(dim, |_, _| 0.5 + rng.unit());
    let norm = v.norm();
    v /= norm;
    let mut lambda = 0.0;
    for _ in 0..1_000_000 {
        let w = m * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        let residual = (&w - &v * next).norm();
        v = w / wn;
        if residual <= tol * next.abs() || (next - lambda).abs() <= tol * 1e-3 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Exact `L` and `L_k` for the quadratic testbed (linear parties, sum head,
/// squared error): the Hessian is `JᵀJ / N`.
pub fn exact_smoothness_quadratic(data: &VerticalDataset, spec: &ModelSpec) -> Result<SmoothnessEstimate> {
    if spec.arch != Arch::Linear || spec.head != Head::Sum {
        return Err(Error::Unsupported(
            "exact smoothness needs linear parties with the sum head".into(),
        ));
    }
    let n = data.n_samples();
    if n == 0 {
        return Err(Error::Degenerate("no samples".into()));
    }
    let j = quadratic_jacobian(data, spec.embed_width);
    let hessian = j.transpose() * &j / n as f64;
    let l = power_iteration(&hessian, 1e-10);

    let mut sizes = vec![1];
    sizes.extend(data.widths().iter().map(|d| d * spec.embed_width));
    let mut l_k = Vec::with_capacity(sizes.len());
    let mut row = 0;
    for (p, &size) in sizes.iter().enumerate() {
        let block = hessian.rows(row, size);
        let gram = block * block.transpose();
        let norm = power_iteration(&gram, 1e-10).max(0.0).sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("participant {p} has zero curvature")));
        }
        l_k.push(norm);
        row += size;
    }
    if l == 0.0 {
        return Err(Error::Degenerate("zero Hessian".into()));
    }
    Ok(SmoothnessEstimate {
        l,
        l_k,
        method: SmoothnessMethod::Exact,
    })
}

/// Empirical `max_draws ‖∇_k F − g_k‖²` per participant at the given model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma_sq: Vec<f64>,
    pub batch_size: usize,
    pub draws: usize,
}

impl VarianceEstimate {
    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_sq.iter().map(|s| s.sqrt()).collect()
    }
}

pub fn variance_estimate(
    model: &GlobalModel,
    data: &VerticalDataset,
    batch_size: usize,
    draws: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    if draws < 2 {
        return Err(Error::Precondition("variance estimate needs at least 2 draws".into()));
    }
    let full = block_gradients(model, data)?;
    let mut sigma_sq = vec![0.0f64; full.len()];
    for d in 0..draws {
        let batch = sample_batch(seed, d as u64, data.n_samples(), batch_size)?;
        let g = batch_gradients(model, data, batch)?;
        for (p, (gp, fp)) in g.iter().zip(&full).enumerate() {
            sigma_sq[p] = sigma_sq[p].max(dist_sq(gp, fp));
        }
    }
    Ok(VarianceEstimate {
        sigma_sq,
        batch_size,
        draws,
    })
}

/// Per-participant stochastic gradients at `model` on one batch.
pub fn batch_gradients(model: &GlobalModel, data: &VerticalDataset, batch: Batch) -> Result<Vec<Vec<f64>>> {
    let features = data.all_batch_features(&batch);
    let snap = Snapshot::capture(model, data, batch)?;
    (0..=model.num_parties())
        .map(|p| participant_grad(&snap, model, &features, p, model.block(p)))
        .collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `F(θ⁰) − F_inf`, with rounding-level negatives clamped to zero.
fn loss_gap(initial: f64, f_inf: f64) -> Result<f64> {
    let gap = initial - f_inf;
    if gap < -1e-12 * f_inf.abs().max(1.0) {
        return Err(Error::Precondition(format!(
            "F_inf {f_inf} exceeds the initial loss {initial}"
        )));
    }
    Ok(gap.max(0.0))
}

/// One inequality evaluated numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub context: String,
    pub constants: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(name: &str, lhs: f64, rhs: f64, context: String, constants: BTreeMap<String, f64>) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            holds: lhs <= rhs,
            context,
            constants,
        }
    }
}

/// Both drift inequalities for one local round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// `Σ_t w^t ‖g^t − g^0‖²` against the cubic bound.
    pub weighted: BoundReport,
    /// `Σ_t (w^t)² ‖g^t − g^0‖²` against the quartic bound.
    pub squared: BoundReport,
    /// Mini-batch mode: fraction of single draws violating either bound.
    pub violation_rate: Option<f64>,
}

/// Setup shared by the full-batch and mini-batch drift checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Setup {
    pub participant: usize,
    pub optimizer: LocalOptimizer,
    pub tau: usize,
    pub eta: f64,
    pub l_k: f64,
}

impl Lemma1Setup {
    /// Largest `η` allowed by the lemma's hypothesis.
    pub fn admissible_eta(&self) -> f64 {
        1.0 / (2.0 * self.tau as f64 * self.l_k * self.optimizer.max_weight(self.tau))
    }

    fn check(&self, model: &GlobalModel) -> Result<()> {
        if self.participant > model.num_parties() {
            return Err(Error::Contract(format!(
                "participant {} out of range",
                self.participant
            )));
        }
        if !(self.l_k > 0.0) {
            return Err(Error::Precondition("L_k must be positive".into()));
        }
        let max_eta = self.admissible_eta();
        if self.eta < 0.0 || self.eta > max_eta * (1.0 + RATE_SLACK) {
            return Err(Error::Precondition(format!(
                "eta {} violates the hypothesis; admissible eta is at most {max_eta}",
                self.eta
            )));
        }
        Ok(())
    }

    /// `(Σ w‖g^t−g^0‖², Σ w²‖g^t−g^0‖²)` for one local round on `batch`.
    fn drift(&self, model: &GlobalModel, data: &VerticalDataset, batch: Batch) -> Result<(f64, f64, f64)> {
        let features = data.all_batch_features(&batch);
        let snap = Snapshot::capture(model, data, batch)?;
        let p = self.participant;
        let grad = |theta: &[f64]| participant_grad(&snap, model, &features, p, theta);
        let round = run_local_round(&self.optimizer, model.block(p), self.tau, self.eta, grad, true)?;
        let schedule = weights_for(&self.optimizer, self.tau, self.eta)?;
        let g0 = &round.grads[0];
        let (mut lhs1, mut lhs2) = (0.0, 0.0);
        for (g, &w) in round.grads.iter().zip(schedule.weights()) {
            let d = dist_sq(g, g0);
            lhs1 += w * d;
            lhs2 += w * w * d;
        }
        Ok((lhs1, lhs2, schedule.max_weight()))
    }

    fn reports(
        &self,
        lhs1: f64,
        lhs2: f64,
        maxw: f64,
        grad_sq: f64,
        sigma_sq: f64,
        context: String,
    ) -> (BoundReport, BoundReport) {
        let tau = self.tau as f64;
        let base = 8.0 * tau.powi(3) * self.eta * self.eta * self.l_k * self.l_k * (grad_sq + sigma_sq);
        let constants = BTreeMap::from([
            ("tau".to_string(), tau),
            ("eta".to_string(), self.eta),
            ("L_k".to_string(), self.l_k),
            ("max_weight".to_string(), maxw),
            ("grad_norm_sq".to_string(), grad_sq),
            ("sigma_sq".to_string(), sigma_sq),
        ]);
        (
            BoundReport::new(
                "lemma1_weighted",
                lhs1,
                base * maxw.powi(3),
                context.clone(),
                constants.clone(),
            ),
            BoundReport::new("lemma1_squared", lhs2, base * maxw.powi(4), context, constants),
        )
    }
}

/// Full-batch drift check; every quantity is deterministic and `σ_k = 0`.
pub fn lemma1_check(model: &GlobalModel, data: &VerticalDataset, setup: &Lemma1Setup) -> Result<Lemma1Report> {
    setup.check(model)?;
    let (lhs1, lhs2, maxw) = setup.drift(model, data, Batch::full(data.n_samples()))?;
    let grad_sq = norm_sq(&block_gradients(model, data)?[setup.participant]);
    let context = format!("participant {}, full batch", setup.participant);
    let (weighted, squared) = setup.reports(lhs1, lhs2, maxw, grad_sq, 0.0, context);
    Ok(Lemma1Report {
        weighted,
        squared,
        violation_rate: None,
    })
}

/// Mini-batch drift check: LHS averaged over `draws` seeded batches.
pub fn lemma1_check_minibatch(
    model: &GlobalModel,
    data: &VerticalDataset,
    setup: &Lemma1Setup,
    sigma_sq: f64,
    batch_size: usize,
    draws: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    setup.check(model)?;
    if draws == 0 {
        return Err(Error::Precondition("need at least one draw".into()));
    }
    let grad_sq = norm_sq(&block_gradients(model, data)?[setup.participant]);
    let maxw = setup.optimizer.max_weight(setup.tau);
    let (bound1, bound2) = {
        let (a, b) = setup.reports(0.0, 0.0, maxw, grad_sq, sigma_sq, String::new());
        (a.rhs, b.rhs)
    };
    let (mut sum1, mut sum2, mut violations) = (0.0, 0.0, 0usize);
    for d in 0..draws {
        let batch = sample_batch(seed, d as u64, data.n_samples(), batch_size)?;
        let (l1, l2, _) = setup.drift(model, data, batch)?;
        sum1 += l1;
        sum2 += l2;
        if l1 > bound1 || l2 > bound2 {
            violations += 1;
        }
    }
    let context = format!(
        "participant {}, batch {batch_size}, mean over {draws} draws",
        setup.participant
    );
    let (weighted, squared) = setup.reports(
        sum1 / draws as f64,
        sum2 / draws as f64,
        maxw,
        grad_sq,
        sigma_sq,
        context,
    );
    Ok(Lemma1Report {
        weighted,
        squared,
        violation_rate: Some(violations as f64 / draws as f64),
    })
}

fn recorded_norms(run: &RunResult) -> Result<Vec<&[f64]>> {
    if run.rounds.is_empty() {
        return Err(Error::Precondition("run has no synchronous rounds".into()));
    }
    run.rounds
        .iter()
        .map(|r| {
            r.block_grad_norm_sq.as_deref().ok_or_else(|| {
                Error::Precondition("run did not record per-round gradient norms (record_grad_norms)".into())
            })
        })
        .collect()
}

fn check_rates(run: &RunResult, constants: &SmoothnessEstimate) -> Result<()> {
    for r in &run.rounds {
        for p in 0..r.taus.len() {
            let bound = lr_constraint_max(constants.l, constants.l_k[p], r.taus[p], r.max_weights[p]);
            if r.learning_rates[p] > bound * (1.0 + RATE_SLACK) {
                return Err(Error::Precondition(format!(
                    "round {}: participant {p} rate {} exceeds the constraint {bound}",
                    r.round, r.learning_rates[p]
                )));
            }
        }
    }
    Ok(())
}

/// `(1/S) Σ_r Σ_k η_k^r W_k^r ‖∇_k F(Θ^{r,0})‖²` over the first `R'` rounds,
/// for every `R'`.
pub fn theorem1_lhs_series(run: &RunResult) -> Result<Vec<f64>> {
    let norms = recorded_norms(run)?;
    let (mut s, mut acc) = (0.0, 0.0);
    Ok(run
        .rounds
        .iter()
        .zip(norms)
        .map(|(r, g)| {
            for ((eta, w), gp) in r.learning_rates.iter().zip(&r.sum_weights).zip(g) {
                s += eta * w;
                acc += eta * w * gp;
            }
            acc / s
        })
        .collect())
}

/// Weighted-average gradient bound over a recorded run.
///
/// `sigma_sq` holds `σ_k²` per participant (zeros for full-batch runs).
/// Refuses without an exact `F_inf`: a proxy such as the best observed loss
/// would shrink the right-hand side.
pub fn theorem1_check(
    run: &RunResult,
    constants: &SmoothnessEstimate,
    sigma_sq: &[f64],
    f_inf: Option<f64>,
) -> Result<BoundReport> {
    let f_inf = f_inf.ok_or_else(|| Error::Precondition("F_inf is unknown for this problem".into()))?;
    let norms = recorded_norms(run)?;
    let participants = run.rounds[0].taus.len();
    if constants.l_k.len() != participants || sigma_sq.len() != participants {
        return Err(Error::Dimension {
            context: "per-participant constants",
            expected: participants,
            actual: constants.l_k.len().min(sigma_sq.len()),
        });
    }
    check_rates(run, constants)?;
    let (mut s, mut weighted, mut noise) = (0.0, 0.0, 0.0);
    for (r, g) in run.rounds.iter().zip(&norms) {
        for p in 0..participants {
            let eta = r.learning_rates[p];
            let w = r.sum_weights[p];
            s += eta * w;
            weighted += eta * w * g[p];
            noise += eta * eta * w * r.max_weights[p] * r.taus[p] as f64 * sigma_sq[p];
        }
    }
    let gap = loss_gap(run.initial.loss, f_inf)?;
    let lhs = weighted / s;
    let rhs = 4.0 * gap / s + 4.0 * constants.l * noise / s;
    let constants_map = BTreeMap::from([
        ("S".to_string(), s),
        ("L".to_string(), constants.l),
        ("F0".to_string(), run.initial.loss),
        ("F_inf".to_string(), f_inf),
        ("noise_term".to_string(), 4.0 * constants.l * noise / s),
    ]);
    Ok(BoundReport::new(
        "theorem1",
        lhs,
        rhs,
        format!("rounds 0..{}, {participants} participants", run.rounds.len()),
        constants_map,
    ))
}

/// Homogeneous specialization of [`theorem1_check`]: shared `σ`, `τ`, `η`
/// and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corollary1Report {
    pub theorem: BoundReport,
    /// `(1/(R(K+1))) Σ_r ‖∇F‖²  ≤  4ΔF/(R(K+1)ηW) + 4Lητσ² max w`,
    /// evaluated directly from the closed form.
    pub specialized: BoundReport,
    /// Relative gap between the closed form and the general evaluation.
    pub lhs_rel_diff: f64,
    pub rhs_rel_diff: f64,
    /// The variant with `τ` in the first denominator and a per-round
    /// (not per-participant) average; reported only.
    pub alternative: BoundReport,
}

pub fn corollary1_check(
    run: &RunResult,
    constants: &SmoothnessEstimate,
    sigma_sq: f64,
    f_inf: Option<f64>,
) -> Result<Corollary1Report> {
    let norms = recorded_norms(run)?;
    let first = &run.rounds[0];
    let participants = first.taus.len();
    let (tau, eta, w, maxw) = (
        first.taus[0],
        first.learning_rates[0],
        first.sum_weights[0],
        first.max_weights[0],
    );
    let homogeneous = run.rounds.iter().all(|r| {
        r.taus.iter().all(|&t| t == tau)
            && r.learning_rates.iter().all(|&e| e == eta)
            && r.sum_weights.iter().all(|&x| x == w)
            && r.max_weights.iter().all(|&x| x == maxw)
    });
    if !homogeneous {
        return Err(Error::Precondition(
            "run does not share tau, eta and weights across participants and rounds".into(),
        ));
    }
    let theorem = theorem1_check(run, constants, &vec![sigma_sq; participants], f_inf)?;
    let f_inf = f_inf.expect("checked by theorem1_check");

    let rounds = run.rounds.len() as f64;
    let kp1 = participants as f64;
    let grad_total: f64 = norms.iter().map(|g| g.iter().sum::<f64>()).sum();
    let gap = loss_gap(run.initial.loss, f_inf)?;
    let noise = 4.0 * constants.l * eta * tau as f64 * sigma_sq * maxw;
    let constants_map = BTreeMap::from([
        ("R".to_string(), rounds),
        ("K_plus_1".to_string(), kp1),
        ("eta".to_string(), eta),
        ("tau".to_string(), tau as f64),
        ("W".to_string(), w),
        ("max_weight".to_string(), maxw),
        ("sigma_sq".to_string(), sigma_sq),
    ]);
    let specialized = BoundReport::new(
        "corollary1",
        grad_total / (rounds * kp1),
        4.0 * gap / (rounds * kp1 * eta * w) + noise,
        theorem.context.clone(),
        constants_map.clone(),
    );
    let alternative = BoundReport::new(
        "corollary1_alternative",
        grad_total / rounds,
        4.0 * gap / (rounds * eta * tau as f64 * kp1 * w) + noise,
        theorem.context.clone(),
        constants_map,
    );
    let rel = |a: f64, b: f64| {
        if a == b {
            0.0
        } else {
            (a - b).abs() / a.abs().max(b.abs())
        }
    };
    Ok(Corollary1Report {
        lhs_rel_diff: rel(specialized.lhs, theorem.lhs),
        rhs_rel_diff: rel(specialized.rhs, theorem.rhs),
        theorem,
        specialized,
        alternative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_regression;
    use crate::optim::weights_for;

    #[test]
    fn constraint_examples() {
        assert_eq!(lr_constraint_max(1.0, 1.0, 1, 1.0), 1.0 / 16.0);
        assert_eq!(lr_constraint_max(1.0, 2.0, 5, 2.0), 1.0 / 320.0);
        assert_eq!(
            lr_constraint_max(1.0, 1.0, 6, 1.0) * 2.0,
            lr_constraint_max(1.0, 1.0, 3, 1.0)
        );
    }

    #[test]
    fn adaptive_examples() {
        assert!((adaptive_lr(0.1, 4, 2.5) - 0.01).abs() < 1e-15);
        assert_eq!(adaptive_lr(0.3, 1, 1.0), 0.3);
        let maxw = weights_for(&LocalOptimizer::Momentum { rho: 0.5 }, 3, 0.1)
            .unwrap()
            .max_weight();
        assert_eq!(maxw, 1.75);
        assert!((adaptive_lr(0.35, 3, maxw) - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        assert!((power_iteration(&m, 1e-12) - 5.0).abs() < 1e-9);
        assert_eq!(power_iteration(&DMatrix::zeros(3, 3), 1e-12), 0.0);
    }

    #[test]
    fn smoothness_rejects_nonquadratic_and_zero_data() {
        let s = synth_regression(1, 8, 4, 2, 0.0).unwrap();
        let mlp = ModelSpec {
            arch: Arch::Mlp { hidden: 2 },
            embed_width: 1,
            head: Head::Sum,
        };
        assert!(matches!(
            exact_smoothness_quadratic(&s.dataset, &mlp),
            Err(Error::Unsupported(_))
        ));
        let zero = VerticalDataset::new(vec![DMatrix::zeros(4, 2)], vec![0.0; 4]).unwrap();
        let lin = ModelSpec {
            arch: Arch::Linear,
            embed_width: 1,
            head: Head::Sum,
        };
        assert!(matches!(
            exact_smoothness_quadratic(&zero, &lin),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn full_batch_variance_is_zero() {
        let s = synth_regression(3, 10, 4, 2, 0.1).unwrap();
        let model = GlobalModel::init(
            &ModelSpec {
                arch: Arch::Linear,
                embed_width: 1,
                head: Head::Sum,
            },
            &s.dataset.widths(),
            3,
        )
        .unwrap();
        let v = variance_estimate(&model, &s.dataset, 10, 3, 1).unwrap();
        assert!(v.sigma_sq.iter().all(|&x| x == 0.0));
        assert!(variance_estimate(&model, &s.dataset, 10, 1, 1).is_err());
    }
}
