//! The learned missingness mechanism `P(R | Z; φ)`.
//!
//! A one-hidden-layer tanh network maps a (scaled) data row to a softmax
//! over the `2^|M|` observation patterns of the masked set `M`. Output unit
//! `k` is the pattern whose bits, read most-significant first in the order
//! of `M`, spell `k` (see [`gamma`]); every column outside `M` is always
//! observed, so any mask hiding such a column has probability zero.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MaskMatrix, ScalerParams};
use crate::error::{Error, Result};

pub const MAX_MASKED: usize = 10;
pub const DEFAULT_HIDDEN: usize = 100;
const FORMAT_VERSION: u32 = 1;

/// Binary-to-decimal index of a pattern over `M`, first bit most
/// significant.
pub fn gamma(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b != 0))
}

/// Inverse of [`gamma`] for a pattern over `m` masked columns.
pub fn gamma_inverse(index: usize, m: usize) -> Vec<u8> {
    (0..m).map(|q| ((index >> (m - 1 - q)) & 1) as u8).collect()
}

/// How a data row is turned into network input: selected columns, shifted
/// and scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub columns: Vec<usize>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputMap {
    /// Every column except the intercept, standardized with `scaler`
    /// (whose exclusions are left raw).
    pub fn from_scaler(data: &Dataset, scaler: &ScalerParams) -> Self {
        let intercept = data.schema().intercept_index;
        let columns: Vec<usize> = (0..data.n_cols()).filter(|&j| Some(j) != intercept).collect();
        let shift = columns.iter().map(|&j| scaler.means[j]).collect();
        let scale = columns.iter().map(|&j| scaler.std_devs[j]).collect();
        Self { columns, shift, scale }
    }

    /// Every column except the intercept (response included), shifted to
    /// zero mean and unit population sd; constant columns keep scale 1.
    pub fn standardizing(data: &Dataset) -> Self {
        let intercept = data.schema().intercept_index;
        let columns: Vec<usize> = (0..data.n_cols()).filter(|&j| Some(j) != intercept).collect();
        let n = data.n_rows().max(1) as f64;
        let mut shift = Vec::with_capacity(columns.len());
        let mut scale = Vec::with_capacity(columns.len());
        for &j in &columns {
            let col = data.values().column(j);
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            shift.push(mean);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Self { columns, shift, scale }
    }

    /// Standardizes input column `col` too (population sd), if it is an
    /// input at all.
    pub fn with_standardized(mut self, data: &Dataset, col: usize) -> Self {
        if let Some(q) = self.columns.iter().position(|&j| j == col) {
            let values = data.values().column(col);
            let n = data.n_rows().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            self.shift[q] = mean;
            self.scale[q] = if sd > 1e-12 { sd } else { 1.0 };
        }
        self
    }

    pub fn identity(d: usize) -> Self {
        Self {
            columns: (0..d).collect(),
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn transform(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if let Some(&bad) = self.columns.iter().find(|&&j| j >= values.ncols()) {
            return Err(Error::Dimension(format!(
                "input map references column {bad}, data has {}",
                values.ncols()
            )));
        }
        Ok(DMatrix::from_fn(values.nrows(), self.dim(), |i, q| {
            (values[(i, self.columns[q])] - self.shift[q]) / self.scale[q]
        }))
    }
}

/// Per-row distribution over the `2^|M|` patterns of the masked set.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    probs: DMatrix<f64>,
    masked_set: Vec<usize>,
    n_cols: usize,
}

impl MaskDistribution {
    pub fn new(probs: DMatrix<f64>, masked_set: Vec<usize>, n_cols: usize) -> Result<Self> {
        check_masked_set(&masked_set, n_cols)?;
        if probs.ncols() != 1 << masked_set.len() {
            return Err(Error::Dimension(format!(
                "{} probability columns for |M| = {}",
                probs.ncols(),
                masked_set.len()
            )));
        }
        for i in 0..probs.nrows() {
            let row = probs.row(i);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.sum() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self {
            probs,
            masked_set,
            n_cols,
        })
    }

    /// Every row gets the same pattern distribution.
    pub fn broadcast(marginal: &[f64], n_rows: usize, masked_set: Vec<usize>, n_cols: usize) -> Result<Self> {
        let probs = DMatrix::from_fn(n_rows, marginal.len(), |_, k| marginal[k]);
        Self::new(probs, masked_set, n_cols)
    }

    /// Mechanism that never hides anything.
    pub fn always_observe(n_rows: usize, masked_set: Vec<usize>, n_cols: usize) -> Result<Self> {
        let k = 1usize << masked_set.len();
        let mut marginal = vec![0.0; k];
        marginal[k - 1] = 1.0;
        Self::broadcast(&marginal, n_rows, masked_set, n_cols)
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn masked_set(&self) -> &[usize] {
        &self.masked_set
    }

    pub fn n_rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_masks(&self) -> usize {
        self.probs.ncols()
    }

    /// Number of data columns the masks range over.
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Index of the all-observed pattern.
    pub fn full_mask(&self) -> usize {
        self.n_masks() - 1
    }

    /// Whether data column `col` is observed under pattern `k`.
    pub fn observes(&self, k: usize, col: usize) -> bool {
        match self.masked_set.iter().position(|&c| c == col) {
            None => true,
            Some(q) => (k >> (self.masked_set.len() - 1 - q)) & 1 == 1,
        }
    }

    /// Number of hidden data columns under pattern `k`.
    pub fn hidden_count(&self, k: usize) -> usize {
        self.masked_set.len() - k.count_ones() as usize
    }

    /// Whether pattern `k` hides every data column (the excluded `r = 0`).
    pub fn is_all_hidden(&self, k: usize) -> bool {
        k == 0 && self.masked_set.len() == self.n_cols
    }

    /// `P(R_col = 1 | z_i)`.
    pub fn observe_prob(&self, i: usize, col: usize) -> f64 {
        (0..self.n_masks())
            .filter(|&k| self.observes(k, col))
            .map(|k| self.probs[(i, k)])
            .sum()
    }
}

fn check_masked_set(masked_set: &[usize], n_cols: usize) -> Result<()> {
    if masked_set.is_empty() {
        return Err(Error::InvalidArgument("masked set is empty".into()));
    }
    if masked_set.len() > MAX_MASKED {
        return Err(Error::InvalidArgument(format!(
            "|M| = {} exceeds the cap of {MAX_MASKED}",
            masked_set.len()
        )));
    }
    if masked_set.iter().any(|&c| c >= n_cols) {
        return Err(Error::InvalidArgument("masked column out of range".into()));
    }
    let mut sorted = masked_set.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != masked_set.len() {
        return Err(Error::InvalidArgument("masked set has duplicates".into()));
    }
    Ok(())
}

/// Parameters φ of the mechanism network.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismNet {
    masked_set: Vec<usize>,
    n_cols: usize,
    input_map: InputMap,
    hidden_dim: usize,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetDocument {
    version: u32,
    masked_set: Vec<usize>,
    n_cols: usize,
    input_map: InputMap,
    input_dim: usize,
    hidden_dim: usize,
    n_outputs: usize,
    /// hidden_dim × input_dim, row-major
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// n_outputs × hidden_dim, row-major
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl MechanismNet {
    /// Glorot-uniform weights and zero biases.
    pub fn glorot(masked_set: Vec<usize>, n_cols: usize, input_map: InputMap, hidden_dim: usize, seed: u64) -> Result<Self> {
        check_masked_set(&masked_set, n_cols)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = input_map.dim();
        let k = 1usize << masked_set.len();
        let l1 = (6.0 / (in_dim + hidden_dim) as f64).sqrt();
        let l2 = (6.0 / (hidden_dim + k) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden_dim, in_dim, |_, _| rng.gen_range(-l1..l1));
        let w2 = DMatrix::from_fn(k, hidden_dim, |_, _| rng.gen_range(-l2..l2));
        Ok(Self {
            masked_set,
            n_cols,
            input_map,
            hidden_dim,
            w1,
            b1: DVector::zeros(hidden_dim),
            w2,
            b2: DVector::zeros(k),
        })
    }

    /// All weights and biases zero: uniform over patterns.
    pub fn zeros(masked_set: Vec<usize>, n_cols: usize, input_map: InputMap, hidden_dim: usize) -> Result<Self> {
        check_masked_set(&masked_set, n_cols)?;
        let k = 1usize << masked_set.len();
        let in_dim = input_map.dim();
        Ok(Self {
            masked_set,
            n_cols,
            input_map,
            hidden_dim,
            w1: DMatrix::zeros(hidden_dim, in_dim),
            b1: DVector::zeros(hidden_dim),
            w2: DMatrix::zeros(k, hidden_dim),
            b2: DVector::zeros(k),
        })
    }

    pub fn masked_set(&self) -> &[usize] {
        &self.masked_set
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn input_map(&self) -> &InputMap {
        &self.input_map
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_masks(&self) -> usize {
        self.b2.len()
    }

    pub fn output_bias_mut(&mut self) -> &mut DVector<f64> {
        &mut self.b2
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattened φ: `w1` row-major, `b1`, `w2` row-major, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(row_major(&self.w1));
        out.extend(self.b1.iter());
        out.extend(row_major(&self.w2));
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "{} parameters given, net has {}",
                flat.len(),
                self.n_params()
            )));
        }
        let (h, d, k) = (self.hidden_dim, self.input_dim(), self.n_masks());
        let mut at = 0;
        self.w1 = DMatrix::from_row_slice(h, d, &flat[at..at + h * d]);
        at += h * d;
        self.b1 = DVector::from_column_slice(&flat[at..at + h]);
        at += h;
        self.w2 = DMatrix::from_row_slice(k, h, &flat[at..at + k * h]);
        at += k * h;
        self.b2 = DVector::from_column_slice(&flat[at..at + k]);
        Ok(())
    }

    /// Network input rows for a complete dataset.
    pub fn inputs(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        if data.n_cols() != self.n_cols {
            return Err(Error::Dimension(format!(
                "mechanism built for {} columns, data has {}",
                self.n_cols,
                data.n_cols()
            )));
        }
        self.input_map.transform(data.values())
    }

    fn hidden(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns, net expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        // N × h
        let mut pre = inputs * self.w1.transpose();
        for mut row in pre.row_iter_mut() {
            row += self.b1.transpose();
        }
        Ok(pre.map(f64::tanh))
    }

    /// Softmax over patterns for every input row.
    pub fn forward_inputs(&self, inputs: &DMatrix<f64>) -> Result<MaskDistribution> {
        let hidden = self.hidden(inputs)?;
        let mut logits = &hidden * self.w2.transpose();
        for mut row in logits.row_iter_mut() {
            row += self.b2.transpose();
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mechanism activations".into()));
        }
        for mut row in logits.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(MaskDistribution {
            probs: logits,
            masked_set: self.masked_set.clone(),
            n_cols: self.n_cols,
        })
    }

    pub fn forward(&self, data: &Dataset) -> Result<MaskDistribution> {
        self.forward_inputs(&self.inputs(data)?)
    }

    /// Reverse-mode gradient of a scalar loss with respect to φ (flattened
    /// like [`params`](Self::params)), given the loss gradient with respect
    /// to the N × 2^|M| probability matrix.
    pub fn backward_inputs(&self, inputs: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        let dist = self.forward_inputs(inputs)?;
        let probs = dist.probs();
        if upstream.shape() != probs.shape() {
            return Err(Error::Dimension(format!(
                "upstream shape {:?}, distribution shape {:?}",
                upstream.shape(),
                probs.shape()
            )));
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mechanism upstream gradient".into()));
        }
        let hidden = self.hidden(inputs)?;
        // softmax: dz = p ⊙ (g − ⟨p, g⟩)
        let mut dlogits = upstream.clone();
        for i in 0..probs.nrows() {
            let dot = probs.row(i).dot(&upstream.row(i));
            for k in 0..probs.ncols() {
                dlogits[(i, k)] = probs[(i, k)] * (upstream[(i, k)] - dot);
            }
        }
        let dw2 = dlogits.transpose() * &hidden;
        let db2: DVector<f64> = dlogits.row_sum().transpose();
        let mut dpre = &dlogits * &self.w2;
        dpre.zip_apply(&hidden, |g, h| *g *= 1.0 - h * h);
        let dw1 = dpre.transpose() * inputs;
        let db1: DVector<f64> = dpre.row_sum().transpose();

        let mut out = Vec::with_capacity(self.n_params());
        out.extend(row_major(&dw1));
        out.extend(db1.iter());
        out.extend(row_major(&dw2));
        out.extend(db2.iter());
        Ok(out)
    }

    pub fn backward(&self, data: &Dataset, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.backward_inputs(&self.inputs(data)?, upstream)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetDocument {
            version: FORMAT_VERSION,
            masked_set: self.masked_set.clone(),
            n_cols: self.n_cols,
            input_map: self.input_map.clone(),
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim,
            n_outputs: self.n_masks(),
            w1: row_major(&self.w1),
            b1: self.b1.iter().copied().collect(),
            w2: row_major(&self.w2),
            b2: self.b2.iter().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDocument = serde_json::from_str(text)?;
        if doc.version != FORMAT_VERSION {
            return Err(Error::Serde(format!("unsupported mechanism version {}", doc.version)));
        }
        check_masked_set(&doc.masked_set, doc.n_cols)?;
        let (h, d, k) = (doc.hidden_dim, doc.input_dim, doc.n_outputs);
        if k != 1 << doc.masked_set.len()
            || d != doc.input_map.dim()
            || doc.w1.len() != h * d
            || doc.b1.len() != h
            || doc.w2.len() != k * h
            || doc.b2.len() != k
        {
            return Err(Error::Serde("mechanism document has inconsistent shapes".into()));
        }
        Ok(Self {
            masked_set: doc.masked_set,
            n_cols: doc.n_cols,
            input_map: doc.input_map,
            hidden_dim: h,
            w1: DMatrix::from_row_slice(h, d, &doc.w1),
            b1: DVector::from_vec(doc.b1),
            w2: DMatrix::from_row_slice(k, h, &doc.w2),
            b2: DVector::from_vec(doc.b2),
        })
    }
}

/// Draws one pattern per row by inverse CDF; columns outside `M` are 1.
pub fn sample_masks(dist: &MaskDistribution, seed: u64) -> MaskMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = dist.masked_set();
    let mut bits = DMatrix::from_element(dist.n_rows(), dist.n_cols(), 1u8);
    for i in 0..dist.n_rows() {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = dist.full_mask();
        for k in 0..dist.n_masks() {
            acc += dist.probs()[(i, k)];
            if u < acc {
                chosen = k;
                break;
            }
        }
        for (q, b) in gamma_inverse(chosen, m.len()).into_iter().enumerate() {
            bits[(i, m[q])] = b;
        }
    }
    MaskMatrix::new(bits).expect("bits are 0/1")
}

/// Row-averaged pattern distribution `P_R(r) = N⁻¹ Σ_i P(r | z_i)`.
pub fn mcar_baseline(dist: &MaskDistribution) -> Vec<f64> {
    let n = dist.n_rows().max(1) as f64;
    (0..dist.n_masks())
        .map(|k| dist.probs().column(k).sum() / n)
        .collect()
}

/// `N⁻¹ Σ_i E[#hidden / d | z_i]`.
pub fn expected_missing_fraction(dist: &MaskDistribution) -> f64 {
    let n = dist.n_rows().max(1) as f64;
    let d = dist.n_cols() as f64;
    let mut total = 0.0;
    for k in 0..dist.n_masks() {
        let hidden = dist.hidden_count(k) as f64;
        if hidden > 0.0 {
            total += hidden * dist.probs().column(k).sum();
        }
    }
    total / (n * d)
}

/// Gradient of [`expected_missing_fraction`] with respect to the
/// probability matrix.
pub fn expected_missing_fraction_grad(dist: &MaskDistribution) -> DMatrix<f64> {
    let n = dist.n_rows().max(1) as f64;
    let d = dist.n_cols() as f64;
    DMatrix::from_fn(dist.n_rows(), dist.n_masks(), |_, k| {
        dist.hidden_count(k) as f64 / (n * d)
    })
}
