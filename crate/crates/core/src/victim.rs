//! The modeler: remediate missing entries, fit a GLM, test the target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartialDataset};
use crate::error::{Error, Result};
use crate::glm::{self, AttackTarget, FamilyKind, GlmFamily, GlmFit, IrlsOptions, WeightedDesign};
use crate::surrogate::RemediationKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimOptions {
    /// Ridge of the victim's GLM fit; 0 mirrors a default GLM toolkit.
    pub ridge: f64,
    /// Whether the regression imputer also regresses on the response.
    pub include_response: bool,
}

/// Fills or drops NA cells according to `strategy`.
pub fn remediate(p: &PartialDataset, strategy: RemediationKind) -> Result<Dataset> {
    remediate_with(p, strategy, &VictimOptions::default())
}

pub fn remediate_with(p: &PartialDataset, strategy: RemediationKind, opts: &VictimOptions) -> Result<Dataset> {
    let schema = p.schema();
    match strategy {
        RemediationKind::Cca => {
            let rows = p.complete_rows();
            let d = schema.feature_columns().len();
            if rows.len() < d {
                return Err(Error::Infeasible(format!(
                    "complete-case analysis keeps {} rows, the model needs at least {d}",
                    rows.len()
                )));
            }
            let values = p.values().select_rows(&rows);
            Dataset::new(values, schema.clone())
        }
        RemediationKind::Mean => {
            let mut values = p.values().clone();
            for j in incomplete_columns(p) {
                let observed: Vec<f64> = values.column(j).iter().copied().filter(|v| !v.is_nan()).collect();
                if observed.is_empty() {
                    return Err(Error::Infeasible(format!(
                        "column `{}` has no observed entry to average",
                        schema.column_names[j]
                    )));
                }
                let mu = observed.iter().sum::<f64>() / observed.len() as f64;
                for v in values.column_mut(j).iter_mut() {
                    if v.is_nan() {
                        *v = mu;
                    }
                }
            }
            Dataset::new(values, schema.clone())
        }
        RemediationKind::Linear => {
            let incomplete = incomplete_columns(p);
            let mut regressors: Vec<usize> = schema
                .feature_columns()
                .into_iter()
                .filter(|j| !incomplete.contains(j))
                .collect();
            if opts.include_response {
                regressors.push(schema.response_index);
            }
            let add_constant = schema.intercept_index.is_none();
            let n = p.n_rows();
            let width = regressors.len() + usize::from(add_constant);
            let a = DMatrix::from_fn(n, width, |i, q| {
                if q < regressors.len() {
                    p.values()[(i, regressors[q])]
                } else {
                    1.0
                }
            });
            let mut values = p.values().clone();
            for j in incomplete {
                let rows: Vec<usize> = (0..n).filter(|&i| !p.is_na(i, j)).collect();
                if rows.len() < width {
                    return Err(Error::Infeasible(format!(
                        "column `{}` has {} observed rows, the imputation regression needs {width}",
                        schema.column_names[j],
                        rows.len()
                    )));
                }
                let a_s = a.select_rows(&rows);
                let b_s = DVector::from_iterator(rows.len(), rows.iter().map(|&i| p.values()[(i, j)]));
                let beta = least_squares(&a_s, &b_s).map_err(|_| {
                    Error::Infeasible(format!(
                        "imputation regression for `{}` is rank deficient",
                        schema.column_names[j]
                    ))
                })?;
                let fitted = &a * &beta;
                for i in 0..n {
                    if p.is_na(i, j) {
                        values[(i, j)] = fitted[i];
                    }
                }
            }
            Dataset::new(values, schema.clone())
        }
    }
}

fn incomplete_columns(p: &PartialDataset) -> Vec<usize> {
    (0..p.n_cols())
        .filter(|&j| (0..p.n_rows()).any(|i| p.is_na(i, j)))
        .collect()
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let ata = a.tr_mul(a);
    let atb = a.tr_mul(b);
    ata.cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::Singular {
            context: "imputation regression".into(),
            advice: "the always-observed regressors are collinear",
        })
}

/// What the victim knows besides the poisoned data: the audit split and
/// the two reference parameter vectors.
#[derive(Debug, Clone)]
pub struct VictimSetup {
    pub family: GlmFamily,
    pub target: AttackTarget,
    /// Complete-data fit θ_p.
    pub theta_true: DVector<f64>,
    pub audit: Dataset,
    pub options: VictimOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    pub remediation: RemediationKind,
    pub fit: GlmFit,
    pub rows_used: usize,
    pub target_p_value: f64,
    pub distance_to_alpha: f64,
    pub distance_to_true: f64,
    /// Both normalized by `‖θα‖₁`.
    pub normalized_to_alpha: f64,
    pub normalized_to_true: f64,
    /// NMSE for gaussian, accuracy for bernoulli.
    pub audit_metric: f64,
    pub missing_rates: Vec<f64>,
}

fn l1(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// NMSE (gaussian) or accuracy at threshold 0.5 (bernoulli) on `audit`.
pub fn audit_metric(theta: &DVector<f64>, audit: &Dataset, family: &GlmFamily) -> Result<f64> {
    let x = audit.design();
    if x.ncols() != theta.len() {
        return Err(Error::Dimension("audit design and coefficients".into()));
    }
    let y = audit.response();
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("audit set".into()));
    }
    let eta = &x * theta;
    Ok(match family.kind {
        FamilyKind::Gaussian => {
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let mse = (0..n).map(|i| (y[i] - eta[i]).powi(2)).sum::<f64>() / n as f64;
            if var == 0.0 {
                return Err(Error::ZeroVariance(audit.column_names()[audit.response_index()].clone()));
            }
            mse / var
        }
        FamilyKind::Bernoulli => {
            let hits = (0..n)
                .filter(|&i| (glm::sigmoid(eta[i]) >= 0.5) == (y[i] >= 0.5))
                .count();
            hits as f64 / n as f64
        }
    })
}

/// Fits and reports on an already remediated dataset.
pub fn report_on_dataset(
    remediated: &Dataset,
    strategy: RemediationKind,
    missing_rates: Vec<f64>,
    setup: &VictimSetup,
) -> Result<VictimReport> {
    let design = WeightedDesign::from_dataset(remediated);
    let mut fit = glm::irls_fit(&design, &setup.family, &IrlsOptions::with_ridge(setup.options.ridge))?;
    if !fit.converged {
        log::warn!("victim fit stopped after {} iterations without converging", fit.iterations);
    }
    let inference = glm::wald_inference(&design, &setup.family, &fit.theta, setup.options.ridge)?;
    let target_p_value = inference.p_values[setup.target.target_position];
    fit.inference = Some(inference);
    let alpha = &setup.target.theta_alpha;
    let norm_alpha: f64 = alpha.iter().map(|v| v.abs()).sum();
    if norm_alpha == 0.0 {
        return Err(Error::InvalidArgument("theta_alpha is zero; normalized distances are undefined".into()));
    }
    let distance_to_alpha = l1(&fit.theta, alpha);
    let distance_to_true = l1(&fit.theta, &setup.theta_true);
    let audit_metric = audit_metric(&fit.theta, &setup.audit, &setup.family)?;
    Ok(VictimReport {
        remediation: strategy,
        rows_used: remediated.n_rows(),
        target_p_value,
        distance_to_alpha,
        distance_to_true,
        normalized_to_alpha: distance_to_alpha / norm_alpha,
        normalized_to_true: distance_to_true / norm_alpha,
        audit_metric,
        missing_rates,
        fit,
    })
}

/// Remediate, fit, test and audit.
pub fn victim_fit_report(p: &PartialDataset, strategy: RemediationKind, setup: &VictimSetup) -> Result<VictimReport> {
    let remediated = remediate_with(p, strategy, &setup.options)?;
    report_on_dataset(&remediated, strategy, p.missing_rates(), setup)
}
