//! Canonical-form GLMs over weighted (row, mask) designs.
//!
//! Every objective in this crate is a weighted sum of GLM log-likelihood
//! terms, `f(θ) = Σ_k w_k (η_k y_k − A(η_k)) / σ²` with `η_k = ⟨θ, x_k⟩`.
//! A [`WeightedDesign`] holds the rows `x_k`, responses `y_k` and weights
//! `w_k`; a plain unweighted fit uses unit weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::data::Dataset;
use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
}

/// GLM family with identity (gaussian) or logit (bernoulli) canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    /// Scale σ; the log-likelihood is divided by σ². Always 1 for bernoulli.
    pub dispersion: f64,
}

impl GlmFamily {
    pub fn gaussian(sigma: f64) -> Self {
        assert!(sigma > 0.0, "dispersion must be positive");
        Self {
            kind: FamilyKind::Gaussian,
            dispersion: sigma,
        }
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: FamilyKind::Bernoulli,
            dispersion: 1.0,
        }
    }

    pub fn from_kind(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Gaussian => Self::gaussian(1.0),
            FamilyKind::Bernoulli => Self::bernoulli(),
        }
    }

    fn inv_scale(&self) -> f64 {
        1.0 / (self.dispersion * self.dispersion)
    }

    /// Partition function A(η).
    pub fn partition(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * eta * eta,
            FamilyKind::Bernoulli => softplus(eta),
        }
    }

    /// A'(η), the mean.
    pub fn mean(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => eta,
            FamilyKind::Bernoulli => sigmoid(eta),
        }
    }

    /// A''(η), the variance function.
    pub fn variance(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Bernoulli => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-likelihood of one row up to the θ-independent base measure.
pub fn glm_score(x: &[f64], y: f64, theta: &[f64], family: &GlmFamily) -> Result<f64> {
    if x.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "row has {} features, theta has {}",
            x.len(),
            theta.len()
        )));
    }
    if !y.is_finite() || x.iter().chain(theta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("glm_score input".into()));
    }
    let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    Ok((eta * y - family.partition(eta)) * family.inv_scale())
}

/// Rows `x_k`, responses `y_k` and nonnegative weights `w_k` of a weighted
/// GLM objective.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
}

impl WeightedDesign {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() != w.len() {
            return Err(Error::Dimension(format!(
                "design has {} rows, response {}, weights {}",
                x.nrows(),
                y.len(),
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { x, y, w })
    }

    pub fn unweighted(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = x.nrows();
        Self::new(x, y, DVector::from_element(n, 1.0))
    }

    /// Unit-weight design of a complete dataset.
    pub fn from_dataset(d: &Dataset) -> Self {
        let n = d.n_rows();
        Self {
            x: d.design(),
            y: DVector::from_vec(d.response()),
            w: DVector::from_element(n, 1.0),
        }
    }

    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "theta has {} entries, design has {} columns",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(())
    }
}

/// `Σ_k w_k J(x_k, y_k; θ)`.
pub fn weighted_objective(design: &WeightedDesign, theta: &DVector<f64>, family: &GlmFamily) -> Result<f64> {
    design.check_theta(theta)?;
    let eta = &design.x * theta;
    let mut total = 0.0;
    for k in 0..design.n_rows() {
        let w = design.w[k];
        if w != 0.0 {
            total += w * (eta[k] * design.y[k] - family.partition(eta[k]));
        }
    }
    Ok(total * family.inv_scale())
}

/// `(1/σ²) Σ_k w_k x_k (y_k − A'(η_k))`.
pub fn weighted_gradient(design: &WeightedDesign, theta: &DVector<f64>, family: &GlmFamily) -> Result<DVector<f64>> {
    design.check_theta(theta)?;
    let eta = &design.x * theta;
    let resid = DVector::from_fn(design.n_rows(), |k, _| {
        design.w[k] * (design.y[k] - family.mean(eta[k]))
    });
    Ok(design.x.tr_mul(&resid) * family.inv_scale())
}

/// `−(1/σ²) Σ_k w_k A''(η_k) x_k x_kᵀ`.
pub fn weighted_hessian(design: &WeightedDesign, theta: &DVector<f64>, family: &GlmFamily) -> Result<DMatrix<f64>> {
    design.check_theta(theta)?;
    let eta = &design.x * theta;
    let mut scaled = design.x.clone();
    for k in 0..design.n_rows() {
        let c = design.w[k] * family.variance(eta[k]);
        scaled.row_mut(k).scale_mut(c);
    }
    let mut h = design.x.tr_mul(&scaled);
    h *= -family.inv_scale();
    // symmetrize away rounding asymmetry
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    /// Ridge λ ≥ 0; the maximized objective is `f(θ) − λ‖θ‖²/2`.
    pub ridge: f64,
    /// Relative objective-change tolerance ε.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

impl IrlsOptions {
    pub fn with_ridge(ridge: f64) -> Self {
        Self {
            ridge,
            ..Self::default()
        }
    }
}

/// Covariance and Wald p-values of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Estimated σ² for gaussian, 1 for bernoulli.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub theta: DVector<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub inference: Option<Inference>,
}

impl GlmFit {
    pub fn p_value(&self, position: usize) -> Option<f64> {
        self.inference.as_ref().map(|inf| inf.p_values[position])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn penalized(
    design: &WeightedDesign,
    theta: &DVector<f64>,
    family: &GlmFamily,
    ridge: f64,
) -> Result<(f64, DVector<f64>)> {
    let f = weighted_objective(design, theta, family)? - 0.5 * ridge * theta.norm_squared();
    let g = weighted_gradient(design, theta, family)? - theta * ridge;
    Ok((f, g))
}

/// Hessian of the ridge-penalized weighted objective.
pub fn penalized_hessian(
    design: &WeightedDesign,
    theta: &DVector<f64>,
    family: &GlmFamily,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let mut h = weighted_hessian(design, theta, family)?;
    for j in 0..h.nrows() {
        h[(j, j)] -= ridge;
    }
    Ok(h)
}

/// Solves `(−H) u = v` for a negative definite Hessian `H`.
pub(crate) fn solve_neg_definite(h: &DMatrix<f64>, v: &DVector<f64>, ridge: f64, context: &str) -> Result<DVector<f64>> {
    let neg = -h;
    match neg.cholesky() {
        Some(ch) => Ok(ch.solve(v)),
        None => Err(Error::Singular {
            context: context.to_string(),
            advice: if ridge > 0.0 {
                "the design is numerically rank deficient"
            } else {
                "add a positive ridge (lower-level regularization)"
            },
        }),
    }
}

/// Missingness-weighted IRLS (Newton's method on the weighted
/// log-likelihood) started from θ = 0.
///
/// Stops once the relative objective change drops below `opts.tol` and the
/// gradient norm is at most `1e-6 (1 + ‖θ‖)` per unit of total weight.
pub fn irls_fit(design: &WeightedDesign, family: &GlmFamily, opts: &IrlsOptions) -> Result<GlmFit> {
    let total_weight: f64 = design.w.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    if opts.ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
    }
    let p = design.n_params();
    let mut theta = DVector::zeros(p);
    let (mut f, mut g) = penalized(design, &theta, family, opts.ridge)?;
    let grad_tol = |theta: &DVector<f64>| 1e-6 * (1.0 + theta.norm()) * total_weight.max(1.0);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let h = penalized_hessian(design, &theta, family, opts.ridge)?;
        let step = solve_neg_definite(&h, &g, opts.ridge, "IRLS Hessian")?;
        // step-halving keeps the logistic iterations monotone; gaussian
        // problems always accept the full step
        let mut scale = 1.0;
        let (mut cand, mut f_new, mut g_new);
        loop {
            cand = &theta + &step * scale;
            (f_new, g_new) = penalized(design, &cand, family, opts.ridge)?;
            if f_new >= f - 1e-12 * f.abs().max(1.0) || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !f_new.is_finite() {
            return Err(Error::NonFinite("IRLS objective".into()));
        }
        let rel_done = (f_new - f).abs() < opts.tol * f.abs();
        let tiny_step = (&cand - &theta).norm() <= 1e-14 * (1.0 + cand.norm());
        theta = cand;
        f = f_new;
        g = g_new;
        if (rel_done || tiny_step) && g.norm() <= grad_tol(&theta) {
            converged = true;
            break;
        }
        if tiny_step {
            break;
        }
    }
    let log_likelihood = weighted_objective(design, &theta, family)?;
    let inference = wald_inference(design, family, &theta, opts.ridge).ok();
    Ok(GlmFit {
        grad_norm: g.norm(),
        theta,
        log_likelihood,
        converged,
        iterations,
        inference,
    })
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided normal tail probability `2 (1 − Φ(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Wald covariance `(−H)⁻¹` and two-sided z-test p-values at `theta`.
/// For gaussian families the scale is the residual variance with `N − p`
/// degrees of freedom, `N` being the total weight.
pub fn wald_inference(
    design: &WeightedDesign,
    family: &GlmFamily,
    theta: &DVector<f64>,
    ridge: f64,
) -> Result<Inference> {
    let p = design.n_params();
    let unit = GlmFamily {
        dispersion: 1.0,
        ..*family
    };
    let scale = match family.kind {
        FamilyKind::Bernoulli => 1.0,
        FamilyKind::Gaussian => {
            let n_eff: f64 = design.w.iter().sum();
            if n_eff <= p as f64 {
                return Err(Error::InvalidArgument(format!(
                    "gaussian scale estimation needs N > d (N = {n_eff}, d = {p})"
                )));
            }
            let eta = &design.x * theta;
            let rss: f64 = (0..design.n_rows())
                .map(|k| design.w[k] * (design.y[k] - eta[k]).powi(2))
                .sum();
            rss / (n_eff - p as f64)
        }
    };
    let h = penalized_hessian(design, theta, &unit, ridge)?;
    let info = -h;
    let inv = info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular {
            context: "Wald information matrix".into(),
            advice: "the design is rank deficient at the fitted coefficients",
        })?;
    let covariance = inv * scale;
    let std_errors: Vec<f64> = (0..p).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    let p_values = (0..p)
        .map(|j| {
            if theta[j] == 0.0 {
                1.0
            } else if std_errors[j] == 0.0 {
                0.0
            } else {
                two_sided_p(theta[j] / std_errors[j])
            }
        })
        .collect();
    Ok(Inference {
        covariance,
        std_errors,
        p_values,
        scale,
    })
}

/// The adversary's target: the closest GLM with the target coefficient
/// pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTarget {
    /// Coefficients in design coordinates; zero at `target_position`.
    pub theta_alpha: DVector<f64>,
    /// Data column of the target feature.
    pub target_index: usize,
    /// Position of the target inside the design vector.
    pub target_position: usize,
    /// Data columns the mechanism may hide.
    pub masked_set: Vec<usize>,
}

impl AttackTarget {
    pub fn new(theta_alpha: DVector<f64>, data: &Dataset, target_index: usize, masked_set: Vec<usize>) -> Result<Self> {
        let target_position = data.schema().design_position(target_index)?;
        if masked_set.is_empty() {
            return Err(Error::InvalidArgument("masked set is empty".into()));
        }
        if theta_alpha.len() != data.n_cols() - 1 {
            return Err(Error::Dimension("theta_alpha length".into()));
        }
        if theta_alpha[target_position] != 0.0 {
            return Err(Error::InvalidArgument("target coefficient of theta_alpha must be 0".into()));
        }
        Ok(Self {
            theta_alpha,
            target_index,
            target_position,
            masked_set,
        })
    }
}

/// Constrained MLE with θ_t = 0, obtained by fitting without column `t`.
pub fn constrained_target(data: &Dataset, family: &GlmFamily, target_index: usize, ridge: f64) -> Result<AttackTarget> {
    let schema = data.schema();
    let pos = schema.design_position(target_index)?;
    if schema.intercept_index == Some(target_index) {
        return Err(Error::InvalidArgument("the intercept cannot be a target".into()));
    }
    let full = WeightedDesign::from_dataset(data);
    let keep: Vec<usize> = (0..full.n_params()).filter(|&j| j != pos).collect();
    let reduced = WeightedDesign {
        x: full.x.select_columns(&keep),
        y: full.y.clone(),
        w: full.w.clone(),
    };
    let fit = irls_fit(&reduced, family, &IrlsOptions::with_ridge(ridge)).map_err(|e| match e {
        Error::Singular { .. } => Error::Singular {
            context: "constrained target design".into(),
            advice: "the design without the target column is rank deficient",
        },
        other => other,
    })?;
    let mut theta_alpha = DVector::zeros(full.n_params());
    for (k, &j) in keep.iter().enumerate() {
        theta_alpha[j] = fit.theta[k];
    }
    AttackTarget::new(theta_alpha, data, target_index, vec![target_index])
}

/// Average KL divergence `(1/N) Σ_i KL(P(Y|x_i; θα) ‖ P(Y|x_i; θ̃))`.
///
/// Returns the value and whether any bernoulli probability had to be
/// clamped into `[1e-12, 1 − 1e-12]`.
pub fn kl_distance(
    theta_tilde: &DVector<f64>,
    theta_alpha: &DVector<f64>,
    x: &DMatrix<f64>,
    family: &GlmFamily,
) -> Result<(f64, bool)> {
    if theta_tilde.len() != x.ncols() || theta_alpha.len() != x.ncols() {
        return Err(Error::Dimension("kl_distance parameter length".into()));
    }
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("kl_distance over zero rows".into()));
    }
    let eta_t = x * theta_tilde;
    let eta_a = x * theta_alpha;
    let mut clamped = false;
    let mut total = 0.0;
    for i in 0..n {
        total += match family.kind {
            FamilyKind::Gaussian => (eta_a[i] - eta_t[i]).powi(2) * 0.5 * family.inv_scale(),
            FamilyKind::Bernoulli => {
                let pa = sigmoid(eta_a[i]);
                let raw = sigmoid(eta_t[i]);
                let pt = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                clamped |= pt != raw;
                let mut kl = 0.0;
                if pa > 0.0 {
                    kl += pa * (pa / pt).ln();
                }
                if pa < 1.0 {
                    kl += (1.0 - pa) * ((1.0 - pa) / (1.0 - pt)).ln();
                }
                kl
            }
        };
    }
    if clamped {
        log::warn!("kl_distance clamped a bernoulli probability of the simulated model");
    }
    Ok((total / n as f64, clamped))
}

/// Gradient of [`kl_distance`] with respect to `theta_tilde`:
/// `(1/N) Σ_i (A'(η̃_i) − A'(η_α,i)) x_i / σ²`.
pub fn kl_gradient(
    theta_tilde: &DVector<f64>,
    theta_alpha: &DVector<f64>,
    x: &DMatrix<f64>,
    family: &GlmFamily,
) -> Result<DVector<f64>> {
    if theta_tilde.len() != x.ncols() || theta_alpha.len() != x.ncols() {
        return Err(Error::Dimension("kl_gradient parameter length".into()));
    }
    let n = x.nrows() as f64;
    let eta_t = x * theta_tilde;
    let eta_a = x * theta_alpha;
    let diff = DVector::from_fn(x.nrows(), |i, _| {
        family.mean(eta_t[i]) - family.mean(eta_a[i])
    });
    Ok(x.tr_mul(&diff) * (family.inv_scale() / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_design(n: usize, p: usize, family: FamilyKind, seed: u64) -> WeightedDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |i, _| match family {
            FamilyKind::Gaussian => x[(i, 1)] * 0.7 - 0.3 + rng.gen_range(-1.0..1.0),
            FamilyKind::Bernoulli => {
                if rng.gen::<f64>() < sigmoid(x[(i, 1)]) {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let w = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        WeightedDesign::new(x, y, w).unwrap()
    }

    #[test]
    fn score_examples() {
        let g = GlmFamily::gaussian(1.0);
        assert_eq!(glm_score(&[3.0, -1.0], 5.0, &[0.0, 0.0], &g).unwrap(), 0.0);
        assert!((glm_score(&[1.0, 1.0], 2.0, &[1.0, 1.0], &g).unwrap() - 2.0).abs() < 1e-15);
        let b = GlmFamily::bernoulli();
        let s = glm_score(&[1.0], 1.0, &[0.0], &b).unwrap();
        assert!((s + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(glm_score(&[1.0], f64::NAN, &[0.0], &b).is_err());
        assert!(glm_score(&[1.0, 2.0], 1.0, &[0.0], &b).is_err());
    }

    #[test]
    fn gradient_special_cases() {
        let d = random_design(5, 3, FamilyKind::Gaussian, 1);
        let theta = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let zero = WeightedDesign {
            w: DVector::zeros(5),
            ..d.clone()
        };
        let fam = GlmFamily::gaussian(1.0);
        assert_eq!(weighted_gradient(&zero, &theta, &fam).unwrap(), DVector::zeros(3));

        let one = WeightedDesign::unweighted(d.x.rows(0, 1).into_owned(), d.y.rows(0, 1).into_owned()).unwrap();
        let g = weighted_gradient(&one, &theta, &fam).unwrap();
        let x0 = d.x.row(0).transpose();
        let expected = &x0 * (d.y[0] - x0.dot(&theta));
        assert!((g - expected).amax() < 1e-14);
    }

    fn fd_gradient(d: &WeightedDesign, theta: &DVector<f64>, fam: &GlmFamily) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(theta.len(), |j, _| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            (weighted_objective(d, &tp, fam).unwrap() - weighted_objective(d, &tm, fam).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        for seed in 0..20 {
            for kind in [FamilyKind::Gaussian, FamilyKind::Bernoulli] {
                let d = random_design(5 + seed as usize % 4, 3, kind, seed);
                let fam = if kind == FamilyKind::Gaussian {
                    GlmFamily::gaussian(0.5 + seed as f64 * 0.1)
                } else {
                    GlmFamily::bernoulli()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let theta = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let g = weighted_gradient(&d, &theta, &fam).unwrap();
                let fd = fd_gradient(&d, &theta, &fam);
                assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1e-3), "seed {seed} {kind:?}");

                let h = weighted_hessian(&d, &theta, &fam).unwrap();
                let step = 1e-6;
                for j in 0..3 {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[j] += step;
                    tm[j] -= step;
                    let col = (weighted_gradient(&d, &tp, &fam).unwrap() - weighted_gradient(&d, &tm, &fam).unwrap())
                        / (2.0 * step);
                    assert!((h.column(j) - &col).norm() <= 1e-5 * h.norm().max(1e-3));
                }
                let eig = (-h).symmetric_eigenvalues();
                assert!(eig.iter().all(|&e| e >= -1e-12));
            }
        }
    }

    #[test]
    fn hessian_special_cases() {
        let d = random_design(6, 3, FamilyKind::Gaussian, 4);
        let unit = WeightedDesign::unweighted(d.x.clone(), d.y.clone()).unwrap();
        let h = weighted_hessian(&unit, &DVector::zeros(3), &GlmFamily::gaussian(2.0)).unwrap();
        let expected = -(d.x.transpose() * &d.x) / 4.0;
        assert!((h - expected).amax() < 1e-12);

        let b = random_design(6, 3, FamilyKind::Bernoulli, 4);
        let huge = DVector::from_vec(vec![500.0, 800.0, -900.0]);
        let hb = weighted_hessian(&b, &huge, &GlmFamily::bernoulli()).unwrap();
        assert!(hb.amax() < 1e-20);
    }

    #[test]
    fn gaussian_irls_is_ols_after_one_step() {
        let d = random_design(30, 4, FamilyKind::Gaussian, 9);
        let unit = WeightedDesign::unweighted(d.x.clone(), d.y.clone()).unwrap();
        let fit = irls_fit(&unit, &GlmFamily::gaussian(1.0), &IrlsOptions::default()).unwrap();
        let xtx = d.x.transpose() * &d.x;
        let ols = xtx.lu().solve(&(d.x.transpose() * &d.y)).unwrap();
        assert!((&fit.theta - &ols).amax() < 1e-10);
        assert!(fit.converged);

        let one = irls_fit(
            &unit,
            &GlmFamily::gaussian(1.0),
            &IrlsOptions {
                max_iter: 1,
                ..IrlsOptions::default()
            },
        )
        .unwrap();
        assert!((&one.theta - &ols).amax() < 1e-10);
    }

    #[test]
    fn irls_invariant_to_gaussian_dispersion() {
        let d = random_design(25, 3, FamilyKind::Gaussian, 2);
        let base = irls_fit(&d, &GlmFamily::gaussian(1.0), &IrlsOptions::default()).unwrap().theta;
        for s in [0.5, 2.0] {
            let t = irls_fit(&d, &GlmFamily::gaussian(s), &IrlsOptions::default()).unwrap().theta;
            assert!((t - &base).amax() < 1e-10);
        }
    }

    #[test]
    fn separable_logistic_with_small_ridge_stays_finite() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let d = WeightedDesign::unweighted(x, y).unwrap();
        let fit = irls_fit(&d, &GlmFamily::bernoulli(), &IrlsOptions::with_ridge(1e-7)).unwrap();
        assert!(fit.theta.iter().all(|v| v.is_finite()));
        assert!(fit.converged, "{fit:?}");
        assert!(fit.theta[1] > 1.0);
    }

    #[test]
    fn singular_design_without_ridge_errors() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let d = WeightedDesign::unweighted(x, DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let err = irls_fit(&d, &GlmFamily::gaussian(1.0), &IrlsOptions::default()).unwrap_err();
        assert!(err.to_string().contains("ridge"));
        assert!(irls_fit(&d, &GlmFamily::gaussian(1.0), &IrlsOptions::with_ridge(1e-6)).is_ok());

        let zero = WeightedDesign {
            w: DVector::zeros(3),
            ..d
        };
        assert!(irls_fit(&zero, &GlmFamily::gaussian(1.0), &IrlsOptions::default()).is_err());
    }

    /// Plain gradient ascent with a backtracking line search, run to a tight
    /// tolerance; independent of the Newton path.
    fn gradient_ascent_oracle(d: &WeightedDesign, fam: &GlmFamily) -> f64 {
        let mut theta = DVector::zeros(d.n_params());
        let mut f = weighted_objective(d, &theta, fam).unwrap();
        for _ in 0..200_000 {
            let g = weighted_gradient(d, &theta, fam).unwrap();
            if g.norm() < 1e-11 {
                break;
            }
            let mut step = 1.0;
            loop {
                let cand = &theta + &g * step;
                let fc = weighted_objective(d, &cand, fam).unwrap();
                if fc >= f + 0.3 * step * g.norm_squared() || step < 1e-12 {
                    theta = cand;
                    f = fc;
                    break;
                }
                step *= 0.5;
            }
        }
        f
    }

    #[test]
    fn logistic_irls_matches_gradient_ascent_oracle() {
        let d = random_design(50, 3, FamilyKind::Bernoulli, 11);
        let unit = WeightedDesign::unweighted(d.x, d.y).unwrap();
        let fam = GlmFamily::bernoulli();
        let fit = irls_fit(&unit, &fam, &IrlsOptions::default()).unwrap();
        let oracle = gradient_ascent_oracle(&unit, &fam);
        assert!((fit.log_likelihood - oracle).abs() < 1e-8, "{} vs {}", fit.log_likelihood, oracle);
        assert!(fit.converged);
        assert!(fit.grad_norm <= 1e-6 * (1.0 + fit.theta.norm()));
    }

    #[test]
    fn normal_tail_values() {
        assert_eq!(two_sided_p(0.0), 1.0);
        assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-4);
        assert!((two_sided_p(-1.959964) - 0.05).abs() < 1e-4);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        // Φ(1) from tables
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(two_sided_p(40.0) < 1e-100);
    }

    #[test]
    fn wald_zero_coefficient_and_gaussian_dof() {
        let d = random_design(20, 3, FamilyKind::Gaussian, 3);
        let unit = WeightedDesign::unweighted(d.x.clone(), d.y.clone()).unwrap();
        let theta = DVector::from_vec(vec![0.0, 0.5, 0.1]);
        let inf = wald_inference(&unit, &GlmFamily::gaussian(1.0), &theta, 0.0).unwrap();
        assert_eq!(inf.p_values[0], 1.0);
        assert!(inf.p_values.iter().all(|p| (0.0..=1.0).contains(p)));
        let cov = &inf.covariance;
        assert!((cov - cov.transpose()).amax() < 1e-12);

        let tiny = WeightedDesign::unweighted(d.x.rows(0, 3).into_owned(), d.y.rows(0, 3).into_owned()).unwrap();
        assert!(wald_inference(&tiny, &GlmFamily::gaussian(1.0), &theta, 0.0).is_err());
    }

    #[test]
    fn wald_matches_textbook_ols_standard_errors() {
        let d = random_design(40, 3, FamilyKind::Gaussian, 8);
        let unit = WeightedDesign::unweighted(d.x.clone(), d.y.clone()).unwrap();
        let fit = irls_fit(&unit, &GlmFamily::gaussian(1.0), &IrlsOptions::default()).unwrap();
        let inf = fit.inference.unwrap();
        let resid = &d.y - &d.x * &fit.theta;
        let s2 = resid.norm_squared() / 37.0;
        let cov = (d.x.transpose() * &d.x).try_inverse().unwrap() * s2;
        assert!((inf.covariance - cov).amax() < 1e-12);
    }

    fn dataset_from(x: &DMatrix<f64>, y: &DVector<f64>) -> Dataset {
        let m = x.clone().insert_column(x.ncols(), 0.0);
        let mut m = m;
        m.set_column(x.ncols(), y);
        let mut names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        names.push("y".into());
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Dataset::from_columns(&refs, m, "y").unwrap()
    }

    #[test]
    fn constrained_target_with_noise_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 400;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] + rng.gen_range(-0.5..0.5));
        let ds = dataset_from(&x, &y);
        let fam = GlmFamily::gaussian(1.0);
        let target = constrained_target(&ds, &fam, 2, 0.0).unwrap();
        assert_eq!(target.theta_alpha[2], 0.0);
        let full = irls_fit(&WeightedDesign::from_dataset(&ds), &fam, &IrlsOptions::default()).unwrap();
        let se = full.inference.unwrap().std_errors;
        for j in 0..2 {
            assert!((target.theta_alpha[j] - full.theta[j]).abs() <= 2.0 * se[j]);
        }
    }

    #[test]
    fn constrained_target_with_duplicated_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let base = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let y = DVector::from_fn(n, |i, _| 0.5 + 1.5 * base[(i, 1)] - base[(i, 2)] + rng.gen_range(-0.3..0.3));
        // full model without the duplicate
        let fam = GlmFamily::gaussian(1.0);
        let ref_fit = irls_fit(&WeightedDesign::unweighted(base.clone(), y.clone()).unwrap(), &fam, &IrlsOptions::default())
            .unwrap();
        // duplicate column 1 as column 3 and target column 3: u = 1 absorbs it
        let mut x = base.clone().insert_column(3, 0.0);
        let c1 = x.column(1).into_owned();
        x.set_column(3, &c1);
        let ds = dataset_from(&x, &y);
        let target = constrained_target(&ds, &fam, 3, 0.0).unwrap();
        assert!((target.theta_alpha[1] - ref_fit.theta[1]).abs() < 1e-10);
        assert_eq!(target.theta_alpha[3], 0.0);
    }

    #[test]
    fn constrained_target_rank_deficiency() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 0.3, 1.0, 1.0, 0.1, 1.0, 1.0, 0.9, 1.0, 1.0, 0.4]);
        let ds = dataset_from(&x, &DVector::from_vec(vec![1.0, 2.0, 0.5, 0.1]));
        assert!(matches!(
            constrained_target(&ds, &GlmFamily::gaussian(1.0), 2, 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let a = DVector::from_vec(vec![1.0]);
        let t = DVector::from_vec(vec![0.0]);
        let (kl, _) = kl_distance(&t, &a, &x, &GlmFamily::gaussian(1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let (same, _) = kl_distance(&a, &a, &x, &GlmFamily::bernoulli()).unwrap();
        assert_eq!(same, 0.0);
        let (uni, _) = kl_distance(&t, &t, &x, &GlmFamily::bernoulli()).unwrap();
        assert_eq!(uni, 0.0);
        let (_, clamped) = kl_distance(&DVector::from_vec(vec![-100.0]), &a, &x, &GlmFamily::bernoulli()).unwrap();
        assert!(clamped);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let d = random_design(12, 3, FamilyKind::Bernoulli, 31);
        for fam in [GlmFamily::bernoulli(), GlmFamily::gaussian(1.0)] {
            let a = DVector::from_vec(vec![0.2, -0.4, 0.0]);
            let t = DVector::from_vec(vec![-0.1, 0.3, 0.5]);
            let g = kl_gradient(&t, &a, &d.x, &fam).unwrap();
            for j in 0..3 {
                let h = 1e-6;
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[j] += h;
                tm[j] -= h;
                let fd = (kl_distance(&tp, &a, &d.x, &fam).unwrap().0 - kl_distance(&tm, &a, &d.x, &fam).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8);
            }
        }
    }
}
