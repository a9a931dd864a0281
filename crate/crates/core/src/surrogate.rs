//! Differentiable surrogates `f̃(θ, φ)` of the modeler's objective.
//!
//! Each remediation strategy turns into a weighted GLM objective over
//! (row, pattern) pairs: CCA keeps only the all-observed pattern; mean and
//! regression imputation keep every pattern (except the all-hidden one) with
//! hidden cells filled by estimators that are themselves smooth functions
//! of the pattern probabilities. [`Surrogate`] also pulls cotangents back
//! through those estimators onto the probability matrix, which the
//! mechanism network then maps onto φ.

use std::fmt;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureKind};
use crate::error::{Error, Result};
use crate::glm::{self, GlmFamily, WeightedDesign};
use crate::mechanism::MaskDistribution;

/// Floor on π_j below which the conditional mean is undefined.
pub const PI_FLOOR: f64 = 1e-8;
const LS_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemediationKind {
    Cca,
    Mean,
    Linear,
}

impl RemediationKind {
    pub const ALL: [RemediationKind; 3] = [RemediationKind::Cca, RemediationKind::Mean, RemediationKind::Linear];

    pub fn as_str(&self) -> &'static str {
        match self {
            RemediationKind::Cca => "cca",
            RemediationKind::Mean => "mean",
            RemediationKind::Linear => "linear",
        }
    }
}

impl fmt::Display for RemediationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RemediationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cca" => Ok(RemediationKind::Cca),
            "mean" => Ok(RemediationKind::Mean),
            "linear" => Ok(RemediationKind::Linear),
            other => Err(Error::InvalidArgument(format!("unknown remediation `{other}`"))),
        }
    }
}

/// Columns the regression imputer uses for the masked columns: every
/// feature column outside `M` (intercept included), plus the response when
/// `include_response` is set.
pub fn imputation_regressors(data: &Dataset, masked_set: &[usize], include_response: bool) -> Vec<usize> {
    let r = data.response_index();
    (0..data.n_cols())
        .filter(|j| !masked_set.contains(j))
        .filter(|&j| include_response || j != r)
        .collect()
}

/// `π_j = N⁻¹ Σ_i P(R_j = 1 | z_i)`.
pub fn observe_prob_pi(dist: &MaskDistribution, j: usize) -> Result<f64> {
    if j >= dist.n_cols() {
        return Err(Error::InvalidArgument(format!("column {j} out of range")));
    }
    let n = dist.n_rows();
    if n == 0 {
        return Err(Error::Empty("distribution has no rows".into()));
    }
    let pi = (0..n).map(|i| dist.observe_prob(i, j)).sum::<f64>() / n as f64;
    if pi <= 0.0 {
        return Err(Error::InvalidArgument(format!("column {j} is never observed (π = 0)")));
    }
    Ok(pi)
}

/// `μ̂_j = (N⁻¹/π_j) Σ_i z_ij P(R_j = 1 | z_i)`.
pub fn conditional_mean(data: &Dataset, dist: &MaskDistribution, j: usize) -> Result<f64> {
    check_dims(data, dist)?;
    let pi = observe_prob_pi(dist, j)?;
    if pi < PI_FLOOR {
        return Err(Error::InvalidArgument(format!(
            "π_{j} = {pi:.3e} is below the floor {PI_FLOOR:e}"
        )));
    }
    let n = data.n_rows() as f64;
    let num: f64 = (0..data.n_rows())
        .map(|i| data.values()[(i, j)] * dist.observe_prob(i, j))
        .sum();
    Ok(num / (n * pi))
}

/// Solution of the weighted least-squares problem `(AᵀWA) β = AᵀW b`.
struct WeightedLs {
    beta: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn solve_weighted_ls(a: &DMatrix<f64>, w: &[f64], b: &[f64]) -> Result<WeightedLs> {
    let p = a.ncols();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for i in 0..a.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = a.row(i);
        gram.ger(w[i], &row.transpose(), &row.transpose(), 1.0);
        rhs.axpy(w[i] * b[i], &row.transpose(), 1.0);
    }
    let chol = match gram.clone().cholesky() {
        Some(c) => c,
        None => {
            let mut jittered = gram;
            for d in 0..p {
                jittered[(d, d)] += LS_JITTER;
            }
            jittered.cholesky().ok_or_else(|| Error::Singular {
                context: "weighted least squares AᵀWA".into(),
                advice: "regressors are collinear even with 1e-10 ridge jitter",
            })?
        }
    };
    Ok(WeightedLs {
        beta: chol.solve(&rhs),
        chol,
    })
}

/// `β̂^j = (AᵀWA)⁻¹AᵀW b` with `A` the regressor columns, `b` column `j` and
/// `W_ii = P(R_j = 1 | z_i)`.
pub fn weighted_ls_coeffs(data: &Dataset, dist: &MaskDistribution, j: usize, regressors: &[usize]) -> Result<DVector<f64>> {
    check_dims(data, dist)?;
    if regressors.is_empty() {
        return Err(Error::InvalidArgument("no regressor columns".into()));
    }
    let a = data.values().select_columns(regressors);
    let w: Vec<f64> = (0..data.n_rows()).map(|i| dist.observe_prob(i, j)).collect();
    let b: Vec<f64> = data.values().column(j).iter().copied().collect();
    Ok(solve_weighted_ls(&a, &w, &b)?.beta)
}

/// Estimators that fill hidden cells.
#[derive(Debug, Clone, PartialEq)]
pub enum Imputer {
    /// `(column, μ̂)` pairs.
    Mean(Vec<(usize, f64)>),
    /// Regressor columns and `(column, β̂)` pairs.
    Linear {
        regressors: Vec<usize>,
        coeffs: Vec<(usize, DVector<f64>)>,
    },
}

/// Which estimator filled an imputed cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Mean,
    Regression,
}

/// Returns the completed row `ẑ` for a data row `z` under a pattern whose
/// observed columns are given by `observed(col)`.
pub fn imputed_row(z: &[f64], observed: impl Fn(usize) -> bool, imputer: Option<&Imputer>) -> Result<(Vec<f64>, Vec<Provenance>)> {
    let mut out = z.to_vec();
    let mut prov = vec![Provenance::Observed; z.len()];
    for j in 0..z.len() {
        if observed(j) {
            continue;
        }
        match imputer {
            Some(Imputer::Mean(means)) => {
                let mu = means
                    .iter()
                    .find(|(c, _)| *c == j)
                    .ok_or_else(|| Error::InvalidArgument(format!("no mean estimator for column {j}")))?
                    .1;
                out[j] = mu;
                prov[j] = Provenance::Mean;
            }
            Some(Imputer::Linear { regressors, coeffs }) => {
                let beta = &coeffs
                    .iter()
                    .find(|(c, _)| *c == j)
                    .ok_or_else(|| Error::InvalidArgument(format!("no regression estimator for column {j}")))?
                    .1;
                if regressors.iter().any(|&r| !observed(r)) {
                    return Err(Error::InvalidArgument("regressor column is hidden".into()));
                }
                out[j] = regressors.iter().zip(beta.iter()).map(|(&r, b)| z[r] * b).sum();
                prov[j] = Provenance::Regression;
            }
            None => {
                return Err(Error::InvalidArgument(format!("column {j} is hidden but no imputer is given")));
            }
        }
    }
    Ok((out, prov))
}

fn check_dims(data: &Dataset, dist: &MaskDistribution) -> Result<()> {
    if dist.n_rows() != data.n_rows() || dist.n_cols() != data.n_cols() {
        return Err(Error::Dimension(format!(
            "distribution is {}×{} (rows × columns), data is {}×{}",
            dist.n_rows(),
            dist.n_cols(),
            data.n_rows(),
            data.n_cols()
        )));
    }
    Ok(())
}

/// Per-(row, pattern) imputed design rows and weights `ω_{i,r} / N`.
#[derive(Debug, Clone)]
pub struct ImputedBatch {
    pub design: WeightedDesign,
    pub row_index: Vec<usize>,
    pub pattern_index: Vec<usize>,
    /// Per batch row, the provenance of each data column.
    pub provenance: Vec<Vec<Provenance>>,
}

impl ImputedBatch {
    /// Writes `row, pattern, weight` for inspection.
    pub fn write_weights_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "pattern", "weight"])?;
        for k in 0..self.row_index.len() {
            w.write_record([
                self.row_index[k].to_string(),
                self.pattern_index[k].to_string(),
                format!("{:?}", self.design.w[k]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct MeanState {
    col: usize,
    design_pos: usize,
    mu: f64,
    /// Σ_i P(R_j = 1 | z_i)
    observe_mass: f64,
}

struct LinearState {
    col: usize,
    design_pos: usize,
    ls: WeightedLs,
}

enum EstimatorState {
    None,
    Mean(Vec<MeanState>),
    Linear { regressors: Vec<usize>, states: Vec<LinearState> },
}

/// The surrogate objective for one mechanism evaluation: estimators and the
/// weighted batch are computed once and shared by every θ query.
pub struct Surrogate<'a> {
    data: &'a Dataset,
    dist: MaskDistribution,
    kind: RemediationKind,
    family: GlmFamily,
    batch: ImputedBatch,
    estimators: EstimatorState,
}

impl<'a> Surrogate<'a> {
    pub fn new(data: &'a Dataset, dist: MaskDistribution, kind: RemediationKind, family: GlmFamily) -> Result<Self> {
        Self::with_options(data, dist, kind, family, false)
    }

    /// `include_response` adds the response to the regression imputer's
    /// regressors.
    pub fn with_options(
        data: &'a Dataset,
        dist: MaskDistribution,
        kind: RemediationKind,
        family: GlmFamily,
        include_response: bool,
    ) -> Result<Self> {
        check_dims(data, &dist)?;
        let schema = data.schema();
        let masked = dist.masked_set().to_vec();
        for &j in &masked {
            if j == schema.response_index || Some(j) == schema.intercept_index {
                return Err(Error::InvalidArgument(format!(
                    "column `{}` cannot be masked",
                    schema.column_names[j]
                )));
            }
        }
        let n = data.n_rows() as f64;
        let estimators = match kind {
            RemediationKind::Cca => EstimatorState::None,
            RemediationKind::Mean => {
                let mut states = Vec::new();
                for &j in &masked {
                    let mu = conditional_mean(data, &dist, j)?;
                    let observe_mass = observe_prob_pi(&dist, j)? * n;
                    states.push(MeanState {
                        col: j,
                        design_pos: schema.design_position(j)?,
                        mu,
                        observe_mass,
                    });
                }
                EstimatorState::Mean(states)
            }
            RemediationKind::Linear => {
                let regressors = imputation_regressors(data, &masked, include_response);
                if regressors.is_empty() {
                    return Err(Error::InvalidArgument("regression imputation needs observed regressors".into()));
                }
                let a = data.values().select_columns(&regressors);
                let mut states = Vec::new();
                for &j in &masked {
                    if !matches!(schema.feature_kinds[j], FeatureKind::Continuous) {
                        return Err(Error::InvalidArgument(format!(
                            "regression imputation needs a continuous column, `{}` is not",
                            schema.column_names[j]
                        )));
                    }
                    let w: Vec<f64> = (0..data.n_rows()).map(|i| dist.observe_prob(i, j)).collect();
                    let b: Vec<f64> = data.values().column(j).iter().copied().collect();
                    states.push(LinearState {
                        col: j,
                        design_pos: schema.design_position(j)?,
                        ls: solve_weighted_ls(&a, &w, &b)?,
                    });
                }
                EstimatorState::Linear { regressors, states }
            }
        };
        let imputer = match &estimators {
            EstimatorState::None => None,
            EstimatorState::Mean(states) => Some(Imputer::Mean(states.iter().map(|s| (s.col, s.mu)).collect())),
            EstimatorState::Linear { regressors, states } => Some(Imputer::Linear {
                regressors: regressors.clone(),
                coeffs: states.iter().map(|s| (s.col, s.ls.beta.clone())).collect(),
            }),
        };
        let batch = build_batch(data, &dist, kind, imputer.as_ref())?;
        Ok(Self {
            data,
            dist,
            kind,
            family,
            batch,
            estimators,
        })
    }

    pub fn kind(&self) -> RemediationKind {
        self.kind
    }

    pub fn family(&self) -> &GlmFamily {
        &self.family
    }

    pub fn distribution(&self) -> &MaskDistribution {
        &self.dist
    }

    pub fn batch(&self) -> &ImputedBatch {
        &self.batch
    }

    pub fn design(&self) -> &WeightedDesign {
        &self.batch.design
    }

    /// The imputer currently implied by the mechanism, if any.
    pub fn imputer(&self) -> Option<Imputer> {
        match &self.estimators {
            EstimatorState::None => None,
            EstimatorState::Mean(s) => Some(Imputer::Mean(s.iter().map(|m| (m.col, m.mu)).collect())),
            EstimatorState::Linear { regressors, states } => Some(Imputer::Linear {
                regressors: regressors.clone(),
                coeffs: states.iter().map(|s| (s.col, s.ls.beta.clone())).collect(),
            }),
        }
    }

    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64> {
        glm::weighted_objective(&self.batch.design, theta, &self.family)
    }

    /// `∂f̃/∂θ`.
    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        glm::weighted_gradient(&self.batch.design, theta, &self.family)
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        glm::weighted_hessian(&self.batch.design, theta, &self.family)
    }

    /// Gradient of `f̃(θ, ·)` with respect to the probability matrix.
    pub fn pullback_objective(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let design = &self.batch.design;
        let inv_s2 = 1.0 / (self.family.dispersion * self.family.dispersion);
        let eta = &design.x * theta;
        let direct: Vec<f64> = (0..design.n_rows())
            .map(|k| (eta[k] * design.y[k] - self.family.partition(eta[k])) * inv_s2)
            .collect();
        self.pullback(&direct, |k, pos| {
            design.w[k] * (design.y[k] - self.family.mean(eta[k])) * theta[pos] * inv_s2
        })
    }

    /// Gradient of `⟨∇_θ f̃(θ, ·), v⟩` with respect to the probability matrix.
    pub fn pullback_gradient_dot(&self, theta: &DVector<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        let design = &self.batch.design;
        if v.len() != design.n_params() || theta.len() != design.n_params() {
            return Err(Error::Dimension("cotangent length".into()));
        }
        let inv_s2 = 1.0 / (self.family.dispersion * self.family.dispersion);
        let eta = &design.x * theta;
        let xv = &design.x * v;
        let resid: Vec<f64> = (0..design.n_rows()).map(|k| design.y[k] - self.family.mean(eta[k])).collect();
        let direct: Vec<f64> = (0..design.n_rows()).map(|k| xv[k] * resid[k] * inv_s2).collect();
        self.pullback(&direct, |k, pos| {
            design.w[k] * (v[pos] * resid[k] - xv[k] * self.family.variance(eta[k]) * theta[pos]) * inv_s2
        })
    }

    /// Accumulates `direct[k] = ∂h/∂w_k` and the cotangent on imputed design
    /// cells (`cell(k, design_pos)`) onto the N × 2^|M| probability matrix.
    fn pullback(&self, direct: &[f64], cell: impl Fn(usize, usize) -> f64) -> Result<DMatrix<f64>> {
        let n = self.data.n_rows();
        let n_f = n as f64;
        let mut up = DMatrix::zeros(n, self.dist.n_masks());
        for (k, &a) in direct.iter().enumerate() {
            up[(self.batch.row_index[k], self.batch.pattern_index[k])] += a / n_f;
        }
        match &self.estimators {
            EstimatorState::None => {}
            EstimatorState::Mean(states) => {
                for s in states {
                    let mut bar = 0.0;
                    for k in 0..direct.len() {
                        if !self.dist.observes(self.batch.pattern_index[k], s.col) {
                            bar += cell(k, s.design_pos);
                        }
                    }
                    if bar == 0.0 {
                        continue;
                    }
                    // μ̂ = Σ z s / Σ s, so ∂μ̂/∂s_i = (z_i − μ̂) / Σ s
                    for i in 0..n {
                        let g = bar * (self.data.values()[(i, s.col)] - s.mu) / s.observe_mass;
                        for p in 0..self.dist.n_masks() {
                            if self.dist.observes(p, s.col) {
                                up[(i, p)] += g;
                            }
                        }
                    }
                }
            }
            EstimatorState::Linear { regressors, states } => {
                let a = self.data.values().select_columns(regressors);
                for s in states {
                    let mut bar = DVector::zeros(regressors.len());
                    for k in 0..direct.len() {
                        if !self.dist.observes(self.batch.pattern_index[k], s.col) {
                            let c = cell(k, s.design_pos);
                            if c != 0.0 {
                                bar.axpy(c, &a.row(self.batch.row_index[k]).transpose(), 1.0);
                            }
                        }
                    }
                    // dβ/dw_i = (AᵀWA)⁻¹ a_i (b_i − a_iᵀβ)
                    let q = s.ls.chol.solve(&bar);
                    let aq = &a * &q;
                    let fitted = &a * &s.ls.beta;
                    for i in 0..n {
                        let g = aq[i] * (self.data.values()[(i, s.col)] - fitted[i]);
                        for p in 0..self.dist.n_masks() {
                            if self.dist.observes(p, s.col) {
                                up[(i, p)] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(up)
    }
}

fn build_batch(data: &Dataset, dist: &MaskDistribution, kind: RemediationKind, imputer: Option<&Imputer>) -> Result<ImputedBatch> {
    let n = data.n_rows();
    let features = data.schema().feature_columns();
    let r = data.response_index();
    let patterns: Vec<usize> = match kind {
        RemediationKind::Cca => vec![dist.full_mask()],
        _ => (0..dist.n_masks()).filter(|&k| !dist.is_all_hidden(k)).collect(),
    };
    let rows = n * patterns.len();
    let p = features.len();
    let mut x = DMatrix::zeros(rows, p);
    let mut y = DVector::zeros(rows);
    let mut w = DVector::zeros(rows);
    let mut row_index = Vec::with_capacity(rows);
    let mut pattern_index = Vec::with_capacity(rows);
    let mut provenance = Vec::with_capacity(rows);
    let mut at = 0;
    for i in 0..n {
        let z: Vec<f64> = data.values().row(i).iter().copied().collect();
        for &k in &patterns {
            let (filled, prov) = if k == dist.full_mask() {
                (z.clone(), vec![Provenance::Observed; z.len()])
            } else {
                imputed_row(&z, |c| dist.observes(k, c), imputer)?
            };
            for (q, &c) in features.iter().enumerate() {
                x[(at, q)] = filled[c];
            }
            y[at] = z[r];
            w[at] = dist.probs()[(i, k)] / n as f64;
            row_index.push(i);
            pattern_index.push(k);
            provenance.push(prov);
            at += 1;
        }
    }
    Ok(ImputedBatch {
        design: WeightedDesign::new(x, y, w)?,
        row_index,
        pattern_index,
        provenance,
    })
}

/// `N⁻¹ Σ_i P(𝟏 | z_i) J(z_i; θ)`.
pub fn cca_objective(data: &Dataset, theta: &DVector<f64>, dist: &MaskDistribution, family: &GlmFamily) -> Result<f64> {
    Surrogate::new(data, dist.clone(), RemediationKind::Cca, *family)?.objective(theta)
}

/// `N⁻¹ Σ_i Σ_{r≠0} P(r | z_i) J(ẑ^{(i,r)}; θ)` with estimators recomputed
/// from `dist`.
pub fn imputation_objective(
    data: &Dataset,
    theta: &DVector<f64>,
    dist: &MaskDistribution,
    kind: RemediationKind,
    family: &GlmFamily,
) -> Result<f64> {
    if kind == RemediationKind::Cca {
        return Err(Error::InvalidArgument("imputation objective needs an imputation kind".into()));
    }
    Surrogate::new(data, dist.clone(), kind, *family)?.objective(theta)
}

/// `∂f̃/∂θ` and the surrogate itself, which exposes the φ-adjoint pullbacks
/// ([`Surrogate::pullback_objective`], [`Surrogate::pullback_gradient_dot`]).
pub fn approx_objective_gradients<'a>(
    data: &'a Dataset,
    theta: &DVector<f64>,
    dist: MaskDistribution,
    kind: RemediationKind,
    family: &GlmFamily,
) -> Result<(DVector<f64>, Surrogate<'a>)> {
    let s = Surrogate::new(data, dist, kind, *family)?;
    Ok((s.gradient(theta)?, s))
}
