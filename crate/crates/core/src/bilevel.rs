//! Bi-level training of the missingness mechanism.
//!
//! Each epoch solves the inner problem `θ̃ = argmax_θ f̃(θ, φ)`, evaluates
//! the upper loss `ℓ = Δ(θ̃, θα) + λ Ω(φ)` and differentiates it through
//! the argmax with the implicit function theorem.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ScalerParams};
use crate::error::{Error, Result};
use crate::glm::{self, AttackTarget, GlmFamily, IrlsOptions};
use crate::mechanism::{self, InputMap, MechanismNet, DEFAULT_HIDDEN};
use crate::surrogate::{RemediationKind, Surrogate};

/// Relative objective tolerance of the inner solver; tight so that the
/// implicit gradient sees an exact optimum.
const INNER_TOL: f64 = 1e-14;
const INNER_MAX_ITER: usize = 100;


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    /// Weight of the expected missing fraction in the upper loss.
    pub lambda_upper: f64,
    /// Ridge of the inner problem.
    pub lambda_lower: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Share of epochs a regression-imputation attack spends on the
    /// complete-case surrogate before switching.
    pub warm_start_fraction: f64,
    /// Learning-rate divisor applied at the switch.
    pub lr_divisor: f64,
    pub seed: u64,
    pub kind: RemediationKind,
    pub hidden_dim: usize,
    /// Standardize the response before it enters the mechanism.
    pub scale_response: bool,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            lambda_upper: 0.01,
            lambda_lower: 0.0,
            learning_rate: 0.01,
            epochs: 200,
            warm_start_fraction: 0.6,
            lr_divisor: 100.0,
            seed: 0,
            kind: RemediationKind::Mean,
            hidden_dim: DEFAULT_HIDDEN,
            scale_response: false,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warm_start_fraction) {
            return bad("warm-start fraction must lie in [0, 1]");
        }
        if !(self.lambda_upper >= 0.0) || !(self.lambda_lower >= 0.0) {
            return bad("regularization weights must be nonnegative");
        }
        if !(self.lr_divisor > 0.0) {
            return bad("learning-rate divisor must be positive");
        }
        if self.hidden_dim == 0 {
            return bad("hidden width must be positive");
        }
        Ok(())
    }

    /// Number of leading complete-case epochs.
    pub fn warm_start_epochs(&self) -> usize {
        if self.kind == RemediationKind::Linear {
            (self.warm_start_fraction * self.epochs as f64).floor() as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub delta: f64,
    pub missing_fraction: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with columns `epoch,loss,delta,missing_fraction,grad_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "delta", "missing_fraction", "grad_norm"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.delta),
                format!("{:?}", r.missing_fraction),
                format!("{:?}", r.grad_norm),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Maximizes a surrogate objective with the inner ridge.
pub fn solve_surrogate(surrogate: &Surrogate<'_>, lambda_lower: f64) -> Result<DVector<f64>> {
    let opts = IrlsOptions {
        ridge: lambda_lower,
        tol: INNER_TOL,
        max_iter: INNER_MAX_ITER,
    };
    let fit = glm::irls_fit(surrogate.design(), surrogate.family(), &opts)?;
    let g = surrogate.gradient(&fit.theta)? - &fit.theta * lambda_lower;
    let bound = 1e-6 * (1.0 + fit.theta.norm());
    if !fit.converged || !(g.norm() <= bound) {
        return Err(Error::InnerNotConverged {
            iterations: fit.iterations,
            grad_norm: g.norm(),
        });
    }
    Ok(fit.theta)
}

/// Simulated parameters `θ̃(φ)`.
pub fn inner_solve(
    net: &MechanismNet,
    data: &Dataset,
    kind: RemediationKind,
    family: &GlmFamily,
    lambda_lower: f64,
) -> Result<DVector<f64>> {
    let dist = net.forward(data)?;
    let s = Surrogate::new(data, dist, kind, *family)?;
    solve_surrogate(&s, lambda_lower)
}

/// `Δ(θ̃, θα) + λ_upper Ω(φ)`.
pub fn upper_loss(
    net: &MechanismNet,
    data: &Dataset,
    theta_tilde: &DVector<f64>,
    target: &AttackTarget,
    lambda_upper: f64,
    family: &GlmFamily,
) -> Result<f64> {
    let dist = net.forward(data)?;
    let (delta, _) = glm::kl_distance(theta_tilde, &target.theta_alpha, &data.design(), family)?;
    Ok(delta + lambda_upper * mechanism::expected_missing_fraction(&dist))
}

/// Cotangent on the probability matrix of `Jᵀ v`, the implicit-function
/// vector-Jacobian product at the inner optimum.
///
/// Solves `A u = v` with `A` the penalized Hessian, then pulls
/// `⟨∇_θ f̃(θ̃, ·), −u⟩` back to the probabilities.
pub fn ift_upstream(
    surrogate: &Surrogate<'_>,
    theta_tilde: &DVector<f64>,
    v: &DVector<f64>,
    lambda_lower: f64,
) -> Result<DMatrix<f64>> {
    let h = glm::penalized_hessian(surrogate.design(), theta_tilde, surrogate.family(), lambda_lower)?;
    // (−A)⁻¹ v = −u
    let neg_u = glm::solve_neg_definite(&h, v, lambda_lower, "inner Hessian of the implicit gradient")?;
    surrogate.pullback_gradient_dot(theta_tilde, &neg_u)
}

/// `Jᵀ v` with respect to the flat network parameters.
pub fn ift_vjp(
    net: &MechanismNet,
    data: &Dataset,
    kind: RemediationKind,
    family: &GlmFamily,
    lambda_lower: f64,
    theta_tilde: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<Vec<f64>> {
    let inputs = net.inputs(data)?;
    let dist = net.forward_inputs(&inputs)?;
    let s = Surrogate::new(data, dist, kind, *family)?;
    let up = ift_upstream(&s, theta_tilde, v, lambda_lower)?;
    net.backward_inputs(&inputs, &up)
}

/// One evaluation of the upper problem and its total gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperEvaluation {
    pub loss: f64,
    pub delta: f64,
    pub missing_fraction: f64,
    pub theta_tilde: DVector<f64>,
    pub gradient: Vec<f64>,
}

/// `ℓ(φ, θ̃(φ))` and `∇ℓ = ∇₁ℓ + J_θ̃ᵀ ∇₂ℓ`.
pub fn total_gradient(
    net: &MechanismNet,
    data: &Dataset,
    target: &AttackTarget,
    kind: RemediationKind,
    family: &GlmFamily,
    lambda_upper: f64,
    lambda_lower: f64,
) -> Result<UpperEvaluation> {
    let inputs = net.inputs(data)?;
    let dist = net.forward_inputs(&inputs)?;
    let omega = mechanism::expected_missing_fraction(&dist);
    let mut upstream = mechanism::expected_missing_fraction_grad(&dist) * lambda_upper;
    let s = Surrogate::new(data, dist, kind, *family)?;
    let theta = solve_surrogate(&s, lambda_lower)?;
    let x = data.design();
    let (delta, _) = glm::kl_distance(&theta, &target.theta_alpha, &x, family)?;
    let v = glm::kl_gradient(&theta, &target.theta_alpha, &x, family)?;
    upstream += ift_upstream(&s, &theta, &v, lambda_lower)?;
    let gradient = net.backward_inputs(&inputs, &upstream)?;
    Ok(UpperEvaluation {
        loss: delta + lambda_upper * omega,
        delta,
        missing_fraction: omega,
        theta_tilde: theta,
        gradient,
    })
}

/// Fresh network for `target`: Glorot weights, zero biases, features
/// standardized on `data` and the response left raw.
pub fn initial_net(data: &Dataset, target: &AttackTarget, config: &BilevelConfig) -> Result<MechanismNet> {
    let scaler = ScalerParams::fit(data, &data.schema().default_scaling_exclusions())?;
    let mut inputs = InputMap::from_scaler(data, &scaler);
    if config.scale_response {
        inputs = inputs.with_standardized(data, data.response_index());
    }
    MechanismNet::glorot(
        target.masked_set.clone(),
        data.n_cols(),
        inputs,
        config.hidden_dim,
        config.seed,
    )
}

/// Full-batch gradient descent on the upper loss starting from `net`.
pub fn train_from(
    mut net: MechanismNet,
    data: &Dataset,
    target: &AttackTarget,
    family: &GlmFamily,
    config: &BilevelConfig,
) -> Result<(MechanismNet, TrainTrace)> {
    config.validate()?;
    if net.masked_set() != target.masked_set.as_slice() {
        return Err(Error::InvalidArgument("network and target disagree on the masked set".into()));
    }
    let warm = config.warm_start_epochs();
    let mut trace = TrainTrace::default();
    let mut params = net.params();
    for epoch in 0..config.epochs {
        let (kind, lr) = if epoch < warm {
            (RemediationKind::Cca, config.learning_rate)
        } else if warm > 0 {
            (config.kind, config.learning_rate / config.lr_divisor)
        } else {
            (config.kind, config.learning_rate)
        };
        let eval = total_gradient(&net, data, target, kind, family, config.lambda_upper, config.lambda_lower);
        let eval = match eval {
            Ok(e) if e.loss.is_finite() && e.gradient.iter().all(|g| g.is_finite()) => e,
            Ok(e) => {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite upper loss {}", e.loss),
                    trace: Box::new(trace),
                })
            }
            Err(e) => {
                return Err(Error::Diverged {
                    epoch,
                    message: e.to_string(),
                    trace: Box::new(trace),
                })
            }
        };
        let grad_norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.records.push(EpochRecord {
            epoch,
            loss: eval.loss,
            delta: eval.delta,
            missing_fraction: eval.missing_fraction,
            grad_norm,
            theta: eval.theta_tilde.iter().copied().collect(),
        });
        log::debug!(
            "epoch {epoch}: loss {:.6e} delta {:.6e} missing {:.4}",
            eval.loss,
            eval.delta,
            eval.missing_fraction
        );
        for (p, g) in params.iter_mut().zip(&eval.gradient) {
            *p -= lr * g;
        }
        net.set_params(&params)?;
    }
    Ok((net, trace))
}

/// Trains a mechanism network against `target`.
pub fn blamm_train(
    data: &Dataset,
    target: &AttackTarget,
    family: &GlmFamily,
    config: &BilevelConfig,
) -> Result<(MechanismNet, TrainTrace)> {
    config.validate()?;
    let net = initial_net(data, target, config)?;
    train_from(net, data, target, family, config)
}
