//! Experiment manifests, synthetic data generators and the end-to-end
//! attack, evaluation and defense pipelines used by the command line.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilevel::{self, BilevelConfig, TrainTrace};
use crate::data::{self, apply_mask, Dataset, DatasetSchema, MaskMatrix, PartialDataset};
use crate::defense::{self, SweepPoint, DEFAULT_NEIGHBORS};
use crate::error::{Error, Result};
use crate::glm::{self, AttackTarget, FamilyKind, GlmFamily, IrlsOptions, WeightedDesign};
use crate::mechanism::{self, MaskDistribution, MechanismNet};
use crate::surrogate::RemediationKind;
use crate::victim::{self, VictimOptions, VictimReport, VictimSetup};

pub const MECHANISM_FILE: &str = "mechanism.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const TRIALS_FILE: &str = "trials.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Offset separating the MCAR sampling stream from the MNAR one.
const MCAR_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Two anisotropic gaussian classes in the plane with a logistic response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoClusterParams {
    pub n: usize,
    pub seed: u64,
    pub mean_negative: [f64; 2],
    pub mean_positive: [f64; 2],
    /// Shared covariance, row-major.
    pub covariance: [[f64; 2]; 2],
}

impl Default for TwoClusterParams {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 7,
            mean_negative: [-0.6, -1.45],
            mean_positive: [0.6, 1.45],
            covariance: [[1.0, 0.5], [0.5, 2.0]],
        }
    }
}

/// Columns `intercept, x, z, y` with `y ∈ {0, 1}` the class label.
pub fn two_cluster_dataset(p: &TwoClusterParams) -> Result<Dataset> {
    let c = p.covariance;
    let l = nalgebra::Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("cluster covariance is not positive definite".into()))?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut m = DMatrix::zeros(p.n, 4);
    for i in 0..p.n {
        let label = i % 2;
        let mu = if label == 1 { p.mean_positive } else { p.mean_negative };
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        m[(i, 0)] = 1.0;
        m[(i, 1)] = mu[0] + l[(0, 0)] * e0;
        m[(i, 2)] = mu[1] + l[(1, 0)] * e0 + l[(1, 1)] * e1;
        m[(i, 3)] = label as f64;
    }
    Dataset::from_columns(&["intercept", "x", "z", "y"], m, "y")
}

/// A housing-price style regression: one dominant, right-skewed income
/// feature plus four weaker covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HousingParams {
    pub n: usize,
    pub seed: u64,
    pub noise_sd: f64,
}

impl Default for HousingParams {
    fn default() -> Self {
        Self {
            n: 5000,
            seed: 11,
            noise_sd: 2.2,
        }
    }
}

pub const HOUSING_COLUMNS: [&str; 7] = [
    "intercept",
    "med_inc",
    "house_age",
    "ave_rooms",
    "ave_occup",
    "population",
    "median_house_value",
];

/// Columns [`HOUSING_COLUMNS`]; `med_inc` carries most of the signal.
pub fn housing_dataset(p: &HousingParams) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut m = DMatrix::zeros(p.n, 7);
    for i in 0..p.n {
        let g = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let inc = (1.25 + 0.45 * g(&mut rng)).exp();
        let age = rng.gen_range(1.0..52.0_f64).round();
        let rooms = 5.4 + 0.8 * g(&mut rng);
        let occup = (1.05 + 0.25 * g(&mut rng)).exp();
        let pop = (7.0 + 0.6 * g(&mut rng)).exp() / 1000.0;
        let value = 0.3 + 0.42 * inc + 0.01 * age - 0.05 * rooms - 0.12 * occup + 0.02 * pop
            + p.noise_sd * g(&mut rng);
        m[(i, 0)] = 1.0;
        m[(i, 1)] = inc;
        m[(i, 2)] = age;
        m[(i, 3)] = rooms;
        m[(i, 4)] = occup;
        m[(i, 5)] = pop;
        m[(i, 6)] = value;
    }
    Dataset::from_columns(&HOUSING_COLUMNS, m, "median_house_value")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, schema: PathBuf },
    TwoClusters(TwoClusterParams),
    Housing(HousingParams),
}

/// One reproducible experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Column whose coefficient the attack drives to zero.
    pub target: String,
    /// Columns the mechanism may hide; empty means just the target.
    #[serde(default)]
    pub masked: Vec<String>,
    pub family: FamilyKind,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub attack: BilevelConfig,
    #[serde(default = "default_victims")]
    pub victims: Vec<RemediationKind>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Base seed of the mask-sampling trials.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub victim: VictimOptions,
    #[serde(default = "default_fractions")]
    pub defense_fractions: Vec<f64>,
    #[serde(default = "default_neighbors")]
    pub defense_k: usize,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_victims() -> Vec<RemediationKind> {
    RemediationKind::ALL.to_vec()
}
fn default_trials() -> usize {
    20
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}
fn default_neighbors() -> usize {
    DEFAULT_NEIGHBORS
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// The pinned two-cluster logistic demo: a mean-imputation attack on
    /// the `x` coefficient.
    pub fn two_cluster_demo() -> Self {
        Self {
            data: DataSource::TwoClusters(TwoClusterParams::default()),
            target: "x".into(),
            masked: Vec::new(),
            family: FamilyKind::Bernoulli,
            train_fraction: 0.5,
            split_seed: 1,
            attack: BilevelConfig {
                lambda_upper: 0.15,
                learning_rate: 10.0,
                epochs: 3000,
                hidden_dim: 20,
                kind: RemediationKind::Mean,
                ..BilevelConfig::default()
            },
            victims: vec![RemediationKind::Mean],
            trials: 20,
            seed: 0,
            out_dir: default_out_dir(),
            victim: VictimOptions::default(),
            defense_fractions: default_fractions(),
            defense_k: DEFAULT_NEIGHBORS,
        }
    }

    /// The housing-style regression attack on `med_inc`.
    pub fn housing_demo() -> Self {
        Self {
            data: DataSource::Housing(HousingParams::default()),
            target: "med_inc".into(),
            masked: Vec::new(),
            family: FamilyKind::Gaussian,
            train_fraction: 0.8,
            split_seed: 2,
            attack: BilevelConfig {
                lambda_upper: 0.3,
                learning_rate: 50.0,
                epochs: 600,
                hidden_dim: 100,
                kind: RemediationKind::Mean,
                ..BilevelConfig::default()
            },
            victims: vec![RemediationKind::Mean],
            trials: 20,
            seed: 0,
            out_dir: default_out_dir(),
            victim: VictimOptions::default(),
            defense_fractions: default_fractions(),
            defense_k: DEFAULT_NEIGHBORS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trial count must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
        }
        if self.victims.is_empty() {
            return Err(Error::InvalidArgument("no victim strategy configured".into()));
        }
        if let DataSource::Csv { path, schema } = &self.data {
            for p in [path, schema] {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "file does not exist"),
                    ));
                }
            }
        }
        self.attack.validate()
    }
}

/// Everything derived from a config before any attack runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub audit: Dataset,
    pub family: GlmFamily,
    pub target: AttackTarget,
    /// Complete-data fit on the training split.
    pub theta_true: DVector<f64>,
}

impl Prepared {
    pub fn victim_setup(&self, options: VictimOptions) -> VictimSetup {
        VictimSetup {
            family: self.family,
            target: self.target.clone(),
            theta_true: self.theta_true.clone(),
            audit: self.audit.clone(),
            options,
        }
    }
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Csv { path, schema } => {
            let schema = DatasetSchema::from_toml_file(schema)?;
            data::load_csv(path, &schema)
        }
        DataSource::TwoClusters(p) => two_cluster_dataset(p),
        DataSource::Housing(p) => housing_dataset(p),
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let full = load_dataset(&config.data)?;
    let (train, audit) = data::split(&full, config.train_fraction, config.split_seed)?;
    let family = GlmFamily::from_kind(config.family);
    let t = train.schema().column_index(&config.target)?;
    let mut target = glm::constrained_target(&train, &family, t, config.victim.ridge)?;
    if !config.masked.is_empty() {
        target.masked_set = config
            .masked
            .iter()
            .map(|c| train.schema().column_index(c))
            .collect::<Result<_>>()?;
    }
    let theta_true = glm::irls_fit(
        &WeightedDesign::from_dataset(&train),
        &family,
        &IrlsOptions::with_ridge(config.victim.ridge),
    )?
    .theta;
    Ok(Prepared {
        train,
        audit,
        family,
        target,
        theta_true,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean over rows of the probability that each masked column is hidden.
pub fn expected_hide_rates(dist: &MaskDistribution) -> Vec<f64> {
    let n = dist.n_rows().max(1) as f64;
    dist.masked_set()
        .iter()
        .map(|&c| (0..dist.n_rows()).map(|i| 1.0 - dist.observe_prob(i, c)).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: RemediationKind,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_delta: f64,
    /// Expected share of all cells hidden.
    pub expected_missing_fraction: f64,
    /// Expected hide rate of each masked column.
    pub expected_column_missingness: Vec<f64>,
    /// Hide rate of the target column in the mask sampled with the base seed.
    pub sampled_target_missingness: f64,
    pub clean_target_p_value: f64,
    pub clean_audit_metric: f64,
    /// Matched victim on the mask sampled with the base seed.
    pub victim_target_p_value: f64,
    pub victim_audit_metric: f64,
    pub victim_normalized_distance: f64,
}

pub struct AttackOutcome {
    pub net: MechanismNet,
    pub trace: TrainTrace,
    pub summary: AttackSummary,
}

/// Trains the attack and summarizes it; writes nothing.
pub fn run_attack(config: &ExperimentConfig, prepared: &Prepared) -> Result<AttackOutcome> {
    let (net, trace) = bilevel::blamm_train(&prepared.train, &prepared.target, &prepared.family, &config.attack)?;
    let dist = net.forward(&prepared.train)?;
    let setup = prepared.victim_setup(config.victim);
    let clean = victim::victim_fit_report(&PartialDataset::from(&prepared.train), RemediationKind::Cca, &setup)?;
    let mask = mechanism::sample_masks(&dist, config.seed);
    let poisoned = apply_mask(&prepared.train, &mask)?;
    let attacked = victim::victim_fit_report(&poisoned, config.attack.kind, &setup)?;
    let last = trace.last().ok_or_else(|| Error::InvalidArgument("attack ran zero epochs".into()))?;
    let summary = AttackSummary {
        attack: config.attack.kind,
        epochs: trace.len(),
        final_loss: last.loss,
        final_delta: last.delta,
        expected_missing_fraction: mechanism::expected_missing_fraction(&dist),
        expected_column_missingness: expected_hide_rates(&dist),
        sampled_target_missingness: poisoned.missing_rates()[prepared.target.target_index],
        clean_target_p_value: clean.target_p_value,
        clean_audit_metric: clean.audit_metric,
        victim_target_p_value: attacked.target_p_value,
        victim_audit_metric: attacked.audit_metric,
        victim_normalized_distance: attacked.normalized_to_alpha,
    };
    Ok(AttackOutcome { net, trace, summary })
}

/// Trains the attack and writes the mechanism, trace and summary into the
/// output directory.
pub fn cmd_attack(config: &ExperimentConfig) -> Result<AttackSummary> {
    let prepared = prepare(config)?;
    let out = run_attack(config, &prepared)?;
    ensure_dir(&config.out_dir)?;
    write_text(&config.out_dir.join(MECHANISM_FILE), &out.net.to_json()?)?;
    out.trace.write_csv(&config.out_dir.join(TRACE_FILE))?;
    write_text(
        &config.out_dir.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&out.summary)?,
    )?;
    Ok(out.summary)
}

pub fn load_mechanism(path: &Path, data: &Dataset) -> Result<MechanismNet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let net = MechanismNet::from_json(&text)?;
    if net.n_cols() != data.n_cols() {
        return Err(Error::Dimension(format!(
            "mechanism expects {} data columns, dataset has {}",
            net.n_cols(),
            data.n_cols()
        )));
    }
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Mnar,
    Mcar,
}

impl MaskSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskSource::Mnar => "mnar",
            MaskSource::Mcar => "mcar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub victim: RemediationKind,
    pub source: MaskSource,
    pub report: VictimReport,
}

pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

/// The MNAR mask and its matched MCAR counterpart for one trial.
pub fn trial_masks(dist: &MaskDistribution, seed: u64) -> Result<(MaskMatrix, MaskMatrix)> {
    let marginal = mechanism::mcar_baseline(dist);
    let mcar = MaskDistribution::broadcast(&marginal, dist.n_rows(), dist.masked_set().to_vec(), dist.n_cols())?;
    Ok((
        mechanism::sample_masks(dist, seed),
        mechanism::sample_masks(&mcar, seed ^ MCAR_STREAM),
    ))
}

/// Runs every trial; records are ordered by trial, then victim, then MNAR
/// before MCAR.
pub fn evaluate_trials(
    config: &ExperimentConfig,
    prepared: &Prepared,
    net: &MechanismNet,
) -> Result<Vec<TrialRecord>> {
    let dist = net.forward(&prepared.train)?;
    let setup = prepared.victim_setup(config.victim);
    let per_trial: Vec<Result<Vec<TrialRecord>>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(config.seed, t);
            let (mnar, mcar) = trial_masks(&dist, seed)?;
            let poisoned = [
                (MaskSource::Mnar, apply_mask(&prepared.train, &mnar)?),
                (MaskSource::Mcar, apply_mask(&prepared.train, &mcar)?),
            ];
            let mut out = Vec::new();
            for &victim_kind in &config.victims {
                for (source, p) in &poisoned {
                    out.push(TrialRecord {
                        trial: t,
                        seed,
                        victim: victim_kind,
                        source: *source,
                        report: victim::victim_fit_report(p, victim_kind, &setup)?,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    Ok(records)
}

/// Mean and sample standard deviation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub victim: RemediationKind,
    pub attack: RemediationKind,
    pub mechanism: MaskSource,
    pub trials: usize,
    pub distance_mean: f64,
    pub distance_sd: f64,
    pub p_value_mean: f64,
    pub p_value_sd: f64,
    pub audit_mean: f64,
    pub audit_sd: f64,
    pub target_missing_mean: f64,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "victim",
    "attack",
    "mechanism",
    "trials",
    "distance_mean",
    "distance_sd",
    "p_value_mean",
    "p_value_sd",
    "audit_mean",
    "audit_sd",
    "target_missing_mean",
];

/// Aggregates trial records into one row per victim and mask source.
pub fn aggregate(records: &[TrialRecord], attack: RemediationKind, target_index: usize) -> Vec<ResultRow> {
    let mut keys: Vec<(RemediationKind, MaskSource)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.victim, r.source)) {
            keys.push((r.victim, r.source));
        }
    }
    keys.into_iter()
        .map(|(victim_kind, source)| {
            let sel: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.victim == victim_kind && r.source == source)
                .collect();
            let col = |f: &dyn Fn(&VictimReport) -> f64| sel.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
            let (distance_mean, distance_sd) = mean_sd(&col(&|r| r.normalized_to_alpha));
            let (p_value_mean, p_value_sd) = mean_sd(&col(&|r| r.target_p_value));
            let (audit_mean, audit_sd) = mean_sd(&col(&|r| r.audit_metric));
            let (target_missing_mean, _) = mean_sd(&col(&|r| r.missing_rates[target_index]));
            ResultRow {
                victim: victim_kind,
                attack,
                mechanism: source,
                trials: sel.len(),
                distance_mean,
                distance_sd,
                p_value_mean,
                p_value_sd,
                audit_mean,
                audit_sd,
                target_missing_mean,
            }
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.victim.to_string(),
            r.attack.to_string(),
            r.mechanism.as_str().to_string(),
            r.trials.to_string(),
            fmt(r.distance_mean),
            fmt(r.distance_sd),
            fmt(r.p_value_mean),
            fmt(r.p_value_sd),
            fmt(r.audit_mean),
            fmt(r.audit_sd),
            fmt(r.target_missing_mean),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_trials_csv(records: &[TrialRecord], target_index: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trial",
        "seed",
        "victim",
        "mechanism",
        "normalized_distance_to_alpha",
        "normalized_distance_to_true",
        "target_p_value",
        "audit_metric",
        "target_missing",
    ])?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            r.victim.to_string(),
            r.source.as_str().to_string(),
            fmt(r.report.normalized_to_alpha),
            fmt(r.report.normalized_to_true),
            fmt(r.report.target_p_value),
            fmt(r.report.audit_metric),
            fmt(r.report.missing_rates[target_index]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Samples the configured number of MNAR and matched MCAR masks, runs every
/// victim, and writes the aggregated and per-trial tables.
pub fn cmd_evaluate(config: &ExperimentConfig, mechanism_path: &Path) -> Result<Vec<ResultRow>> {
    let prepared = prepare(config)?;
    let net = load_mechanism(mechanism_path, &prepared.train)?;
    let records = evaluate_trials(config, &prepared, &net)?;
    let t = prepared.target.target_index;
    let rows = aggregate(&records, config.attack.kind, t);
    ensure_dir(&config.out_dir)?;
    write_results_csv(&rows, &config.out_dir.join(RESULTS_FILE))?;
    write_trials_csv(&records, t, &config.out_dir.join(TRIALS_FILE))?;
    Ok(rows)
}

/// Defense sweep on the mask of trial 0, refit by the first configured victim.
pub fn run_defense(
    config: &ExperimentConfig,
    prepared: &Prepared,
    net: &MechanismNet,
    fractions: &[f64],
) -> Result<Vec<SweepPoint>> {
    let dist = net.forward(&prepared.train)?;
    let (mask, _) = trial_masks(&dist, trial_seed(config.seed, 0))?;
    let poisoned = apply_mask(&prepared.train, &mask)?;
    let setup = prepared.victim_setup(config.victim);
    defense::defense_sweep(&poisoned, config.victims[0], &setup, fractions, config.defense_k)
}

pub fn cmd_defend(config: &ExperimentConfig, mechanism_path: &Path, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    let prepared = prepare(config)?;
    let net = load_mechanism(mechanism_path, &prepared.train)?;
    let points = run_defense(config, &prepared, &net, fractions)?;
    ensure_dir(&config.out_dir)?;
    defense::write_sweep_csv(&points, &config.out_dir.join(SWEEP_FILE))?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub attack: AttackSummary,
    pub clean_theta: Vec<f64>,
    pub attacked_theta: Vec<f64>,
    pub theta_alpha: Vec<f64>,
}

/// Attack on the pinned two-cluster problem; writes the attack artifacts
/// plus the poisoned training set and a summary with both fits.
pub fn demo_fig1(config: &ExperimentConfig) -> Result<DemoSummary> {
    let prepared = prepare(config)?;
    let out = run_attack(config, &prepared)?;
    let dist = out.net.forward(&prepared.train)?;
    let mask = mechanism::sample_masks(&dist, config.seed);
    let poisoned = apply_mask(&prepared.train, &mask)?;
    let setup = prepared.victim_setup(config.victim);
    let attacked = victim::victim_fit_report(&poisoned, config.attack.kind, &setup)?;
    let summary = DemoSummary {
        clean_theta: prepared.theta_true.iter().copied().collect(),
        attacked_theta: attacked.fit.theta.iter().copied().collect(),
        theta_alpha: prepared.target.theta_alpha.iter().copied().collect(),
        attack: out.summary,
    };
    ensure_dir(&config.out_dir)?;
    write_text(&config.out_dir.join(MECHANISM_FILE), &out.net.to_json()?)?;
    out.trace.write_csv(&config.out_dir.join(TRACE_FILE))?;
    data::serialize_partial(&poisoned, &config.out_dir.join("poisoned.csv"))?;
    write_text(&config.out_dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
