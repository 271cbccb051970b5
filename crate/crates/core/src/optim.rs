//! Local update rules and their weighted-gradient-sum equivalents.
//!
//! Every supported optimizer, run for `τ` iterations from `θ⁰` against a fixed
//! snapshot, lands exactly on `θ⁰ − η Σ_t w^t g^t` where `g^t` is the gradient
//! seen at iteration `t`. [`weights_for`] gives the `w^t`;
//! [`local_round_iterative`] runs the native recursion and records the `g^t`
//! so the two forms can be compared directly.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalOptimizer {
    #[default]
    #[serde(alias = "classical_sgd")]
    Sgd,
    /// Heavy-ball momentum with the buffer reset at every round start.
    Momentum { rho: f64 },
    /// Gradient step plus a pull `μ(θ − θ⁰)` toward the round-start point.
    Proximal { mu: f64 },
}

impl LocalOptimizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LocalOptimizer::Sgd => Ok(()),
            LocalOptimizer::Momentum { rho } if (0.0..1.0).contains(&rho) => Ok(()),
            LocalOptimizer::Momentum { rho } => Err(Error::config(format!("momentum rho={rho} must lie in [0, 1)"))),
            LocalOptimizer::Proximal { mu } if mu >= 0.0 && mu.is_finite() => Ok(()),
            LocalOptimizer::Proximal { mu } => Err(Error::config(format!("proximal mu={mu} must be >= 0"))),
        }
    }

    /// `max_t w^t` over `tau` iterations. Does not depend on the step size:
    /// the largest proximal weight is always the last one, which is 1.
    pub fn max_weight(&self, tau: usize) -> f64 {
        match *self {
            LocalOptimizer::Sgd | LocalOptimizer::Proximal { .. } => 1.0,
            LocalOptimizer::Momentum { rho } => momentum_weight(rho, tau, 0),
        }
    }
}

fn momentum_weight(rho: f64, tau: usize, t: usize) -> f64 {
    (0..tau - t).map(|s| rho.powi(s as i32)).sum()
}

/// Per-iteration gradient weights `w^0 … w^{τ−1}` with their max and sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    weights: Vec<f64>,
    max_weight: f64,
    sum_weight: f64,
}

impl WeightSchedule {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("a weight schedule needs at least one iteration"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::config("weights must be positive and finite"));
        }
        let max_weight = weights.iter().copied().fold(f64::MIN, f64::max);
        let sum_weight = weights.iter().sum();
        Ok(Self {
            weights,
            max_weight,
            sum_weight,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tau(&self) -> usize {
        self.weights.len()
    }

    pub fn max_weight(&self) -> f64 {
        self.max_weight
    }

    /// `W = Σ_t w^t`.
    pub fn sum_weight(&self) -> f64 {
        self.sum_weight
    }
}

/// Weights equivalent to `opt` over `tau` local iterations at step size `eta`.
pub fn weights_for(opt: &LocalOptimizer, tau: usize, eta: f64) -> Result<WeightSchedule> {
    opt.validate()?;
    if tau == 0 {
        return Err(Error::config("tau must be at least 1"));
    }
    let weights = match *opt {
        LocalOptimizer::Sgd => vec![1.0; tau],
        LocalOptimizer::Momentum { rho } => (0..tau).map(|t| momentum_weight(rho, tau, t)).collect(),
        LocalOptimizer::Proximal { mu } => {
            let alpha = eta * mu;
            if alpha >= 1.0 {
                return Err(Error::config(format!("proximal step eta*mu={alpha} must be below 1")));
            }
            (0..tau).map(|t| (1.0 - alpha).powi((tau - 1 - t) as i32)).collect()
        }
    };
    WeightSchedule::from_weights(weights)
}

/// Momentum buffer `u`, zeroed at the start of every round.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer {
    u: Vec<f64>,
}

impl MomentumBuffer {
    pub fn zeroed(len: usize) -> Self {
        Self { u: vec![0.0; len] }
    }

    /// `u ← ρ u + g`, returning the updated buffer.
    pub fn push(&mut self, rho: f64, g: &[f64]) -> &[f64] {
        for (u, g) in self.u.iter_mut().zip(g) {
            *u = rho * *u + g;
        }
        &self.u
    }
}

/// Outcome of one local training period.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRound {
    pub theta: Vec<f64>,
    /// `g^0 … g^{τ−1}` along the trajectory (empty when not recorded).
    pub grads: Vec<Vec<f64>>,
}

/// Runs the native recursion of `opt` for `tau` iterations from `theta_start`.
pub fn local_round_iterative<F>(
    opt: &LocalOptimizer,
    theta_start: &[f64],
    tau: usize,
    eta: f64,
    grad_fn: F,
) -> Result<LocalRound>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    run_local_round(opt, theta_start, tau, eta, grad_fn, true)
}

pub(crate) fn run_local_round<F>(
    opt: &LocalOptimizer,
    theta_start: &[f64],
    tau: usize,
    eta: f64,
    mut grad_fn: F,
    record: bool,
) -> Result<LocalRound>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    opt.validate()?;
    if tau == 0 {
        return Err(Error::config("tau must be at least 1"));
    }
    let mut theta = theta_start.to_vec();
    let mut momentum = MomentumBuffer::zeroed(theta.len());
    let mut grads = Vec::with_capacity(if record { tau } else { 0 });
    for t in 0..tau {
        let g = grad_fn(&theta)?;
        if g.len() != theta.len() {
            return Err(Error::Dimension {
                context: "local gradient",
                expected: theta.len(),
                actual: g.len(),
            });
        }
        match *opt {
            LocalOptimizer::Sgd => {
                for (p, gi) in theta.iter_mut().zip(&g) {
                    *p -= eta * gi;
                }
            }
            LocalOptimizer::Momentum { rho } => {
                let u = momentum.push(rho, &g);
                for (p, ui) in theta.iter_mut().zip(u) {
                    *p -= eta * ui;
                }
            }
            LocalOptimizer::Proximal { mu } => {
                for ((p, gi), p0) in theta.iter_mut().zip(&g).zip(theta_start) {
                    *p -= eta * (gi + mu * (*p - p0));
                }
            }
        }
        ensure_finite(&theta, || format!("parameters after local iteration {t}"))?;
        if record {
            grads.push(g);
        }
    }
    Ok(LocalRound { theta, grads })
}

/// `θ⁰ − η Σ_t w^t g^t`.
pub fn cumulative_weighted_form(
    theta_start: &[f64],
    grads: &[Vec<f64>],
    schedule: &WeightSchedule,
    eta: f64,
) -> Result<Vec<f64>> {
    if grads.len() != schedule.tau() {
        return Err(Error::Contract(format!(
            "{} recorded gradients for a schedule of length {}",
            grads.len(),
            schedule.tau()
        )));
    }
    let mut acc = vec![0.0; theta_start.len()];
    for (g, w) in grads.iter().zip(schedule.weights()) {
        if g.len() != acc.len() {
            return Err(Error::Contract("gradient length differs from parameter length".into()));
        }
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += w * gi;
        }
    }
    Ok(theta_start.iter().zip(acc).map(|(p, a)| p - eta * a).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn hand_computed_schedules() {
        let w = weights_for(&LocalOptimizer::Momentum { rho: 0.0 }, 3, 0.1).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0]);
        let w = weights_for(&LocalOptimizer::Momentum { rho: 0.5 }, 3, 0.1).unwrap();
        assert_eq!(w.weights(), &[1.75, 1.5, 1.0]);
        assert_eq!(w.max_weight(), 1.75);
        assert_eq!(w.sum_weight(), 4.25);
        let w = weights_for(&LocalOptimizer::Proximal { mu: 1.0 }, 3, 0.1).unwrap();
        assert!(close(w.weights(), &[0.81, 0.9, 1.0], 1e-15));
    }

    #[test]
    fn proximal_rejects_large_step() {
        assert!(weights_for(&LocalOptimizer::Proximal { mu: 10.0 }, 2, 0.1).is_err());
        assert!(weights_for(&LocalOptimizer::Momentum { rho: 1.0 }, 2, 0.1).is_err());
        assert!(weights_for(&LocalOptimizer::Sgd, 0, 0.1).is_err());
    }

    #[test]
    fn single_step_is_plain_gradient_step() {
        let theta = [1.0, -2.0];
        for opt in [
            LocalOptimizer::Sgd,
            LocalOptimizer::Momentum { rho: 0.9 },
            LocalOptimizer::Proximal { mu: 3.0 },
        ] {
            let out = local_round_iterative(&opt, &theta, 1, 0.1, |p| Ok(vec![p[0], 2.0 * p[1]])).unwrap();
            assert_eq!(out.theta, vec![1.0 - 0.1 * 1.0, -2.0 - 0.1 * -4.0]);
        }
    }

    #[test]
    fn zero_gradients_leave_theta_unchanged() {
        let s = weights_for(&LocalOptimizer::Momentum { rho: 0.5 }, 4, 0.3).unwrap();
        let theta = vec![0.25, -1.0];
        let out = cumulative_weighted_form(&theta, &vec![vec![0.0, 0.0]; 4], &s, 0.3).unwrap();
        assert_eq!(out, theta);
        assert!(cumulative_weighted_form(&theta, &vec![vec![0.0, 0.0]; 3], &s, 0.3).is_err());
    }

    #[test]
    fn non_finite_parameters_name_the_iteration() {
        let err = local_round_iterative(&LocalOptimizer::Sgd, &[1.0], 5, 1.0, |p| Ok(vec![p[0] * 1e200])).unwrap_err();
        assert!(err.to_string().contains("local iteration 1"), "{err}");
    }

    // Quadratic f(θ) = ½ θᵀ diag(a) θ − bᵀθ.
    fn quad_grad<'a>(a: &'a [f64], b: &'a [f64]) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
        move |p: &[f64]| Ok(p.iter().zip(a).zip(b).map(|((x, ai), bi)| ai * x - bi).collect())
    }

    proptest! {
        #[test]
        fn iterative_matches_weighted_form(
            rho in 0.0f64..0.95,
            alpha in 0.0f64..0.2,
            tau in 1usize..9,
            theta in proptest::collection::vec(-2.0f64..2.0, 3),
            a in proptest::collection::vec(0.1f64..2.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let eta = 0.2;
            for opt in [
                LocalOptimizer::Sgd,
                LocalOptimizer::Momentum { rho },
                LocalOptimizer::Proximal { mu: alpha / eta },
            ] {
                let run = local_round_iterative(&opt, &theta, tau, eta, quad_grad(&a, &b)).unwrap();
                let s = weights_for(&opt, tau, eta).unwrap();
                let weighted = cumulative_weighted_form(&theta, &run.grads, &s, eta).unwrap();
                prop_assert!(close(&run.theta, &weighted, 1e-12), "{:?}: {:?} vs {:?}", opt, run.theta, weighted);
            }
        }

        #[test]
        fn weight_shapes(rho in 0.0f64..0.99, alpha in 0.001f64..0.999, tau in 1usize..20) {
            let m = weights_for(&LocalOptimizer::Momentum { rho }, tau, 1.0).unwrap();
            prop_assert!(m.weights().windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(m.weights().iter().all(|&w| w >= 1.0));
            prop_assert_eq!(m.weights()[tau - 1], 1.0);
            let p = weights_for(&LocalOptimizer::Proximal { mu: alpha }, tau, 1.0).unwrap();
            prop_assert!(p.weights().windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(p.weights().iter().all(|&w| w <= 1.0));
            prop_assert_eq!(p.weights()[tau - 1], 1.0);
            for s in [&m, &p] {
                let max = s.weights().iter().copied().fold(f64::MIN, f64::max);
                let sum: f64 = s.weights().iter().sum();
                prop_assert!((s.max_weight() - max).abs() <= 1e-12);
                prop_assert!((s.sum_weight() - sum).abs() <= 1e-12);
            }
        }
    }
}
