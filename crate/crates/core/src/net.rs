//! Fully-connected ReLU networks: architecture, parameters, forward pass,
//! activation patterns and the two parameterization symmetries
//! (positive rescaling of hidden neurons and permutation within hidden layers).
//!
//! Parameters are flattened in a fixed order, used for every Jacobian column and
//! every gradient vector in this crate:
//! layer 1 weights (row-major, `W[v][v']` for edge `v' -> v`), layer 1 biases,
//! layer 2 weights, layer 2 biases, and so on up to the output layer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied to the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Layer widths `(N_0, ..., N_L)` and the output activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    out_act: OutputActivation,
}

impl Architecture {
    /// At least one hidden layer is required, and every width must be positive.
    pub fn new(widths: Vec<usize>, out_act: OutputActivation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Config(format!(
                "need at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths, out_act })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_act(&self) -> OutputActivation {
        self.out_act
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Widths of the hidden layers `N_1, ..., N_{L-1}`.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.depth()]
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden_widths().iter().sum()
    }

    /// `|E| + |B|`.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Upper bound on the local dimension: one degree of freedom per hidden
    /// neuron is absorbed by positive rescaling.
    pub fn max_rank(&self) -> usize {
        self.param_count() - self.hidden_count()
    }

    /// Offset of layer `l` (1-based) in the flattened parameter vector.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Shallow architectures `(1, N_1, 1)` with identity output.
    pub fn is_scalar_shallow(&self) -> bool {
        self.widths.len() == 3
            && self.widths[0] == 1
            && self.widths[2] == 1
            && self.out_act == OutputActivation::Identity
    }
}

/// Per-layer weights `W^l` (`N_l x N_{l-1}`) and biases `b^l` (`N_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Params {
    /// Builds parameters and checks shapes and finiteness against `arch`.
    pub fn new(arch: &Architecture, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        let p = Self { weights, biases };
        p.check(arch)?;
        Ok(p)
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let w = arch.widths();
        Self {
            weights: (1..w.len()).map(|l| DMatrix::zeros(w[l], w[l - 1])).collect(),
            biases: (1..w.len()).map(|l| DVector::zeros(w[l])).collect(),
        }
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let w = arch.widths();
        let layers = arch.depth();
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(Error::Config(format!(
                "expected {layers} layers, got {} weight and {} bias blocks",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..layers {
            let wm = &self.weights[l];
            if wm.shape() != (w[l + 1], w[l]) {
                return Err(Error::Config(format!(
                    "layer {} weights have shape {:?}, expected {:?}",
                    l + 1,
                    wm.shape(),
                    (w[l + 1], w[l])
                )));
            }
            if self.biases[l].len() != w[l + 1] {
                return Err(Error::Config(format!(
                    "layer {} biases have length {}, expected {}",
                    l + 1,
                    self.biases[l].len(),
                    w[l + 1]
                )));
            }
            if wm.iter().chain(self.biases[l].iter()).any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("layer {} has non-finite entries", l + 1)));
            }
        }
        Ok(())
    }

    /// Flattened parameter vector in the crate-wide column order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                arch.param_count()
            )));
        }
        let w = arch.widths();
        let mut it = flat.iter().copied();
        let mut weights = Vec::with_capacity(arch.depth());
        let mut biases = Vec::with_capacity(arch.depth());
        for l in 1..w.len() {
            weights.push(DMatrix::from_row_iterator(w[l], w[l - 1], it.by_ref().take(w[l] * w[l - 1])));
            biases.push(DVector::from_iterator(w[l], it.by_ref().take(w[l])));
        }
        Self::new(arch, weights, biases)
    }
}

/// Inputs as columns of an `N_0 x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample(DMatrix<f64>);

impl Sample {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::Config("sample must contain at least one example".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sample has non-finite entries".into()));
        }
        Ok(Self(x))
    }

    /// One scalar input per example (`N_0 = 1`).
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, xs.len(), xs))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    /// Columns `start..start+len` as a new sample.
    pub fn columns(&self, start: usize, len: usize) -> Sample {
        Sample(self.0.columns(start, len).into_owned())
    }

    /// Appends the columns of `other`.
    pub fn concat(&self, other: &Sample) -> Result<Sample> {
        if self.dim() != other.dim() {
            return Err(Error::Config("cannot concatenate samples of different input dimension".into()));
        }
        let mut m = DMatrix::zeros(self.dim(), self.len() + other.len());
        m.columns_mut(0, self.len()).copy_from(&self.0);
        m.columns_mut(self.len(), other.len()).copy_from(&other.0);
        Ok(Sample(m))
    }
}

/// Everything the forward pass computes, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `preacts[k]` holds `y^{k+1}` for `k = 0..L`, one column per example.
    pub preacts: Vec<DMatrix<f64>>,
    /// `acts[k]` holds `f^k` for `k = 0..L`; `acts[0]` is the input itself.
    pub acts: Vec<DMatrix<f64>>,
    /// `f(X) = sigma_L(y^L)`, `N_L x n`.
    pub output: DMatrix<f64>,
    pub out_act: OutputActivation,
}

impl ForwardTrace {
    pub fn n_examples(&self) -> usize {
        self.output.ncols()
    }

    /// Hidden pre-activations `y^1 .. y^{L-1}`.
    pub fn hidden_preacts(&self) -> &[DMatrix<f64>] {
        &self.preacts[..self.preacts.len() - 1]
    }
}

pub(crate) fn relu(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        0.0
    }
}

/// Softmax of one column, shifted by its maximum for stability.
pub(crate) fn softmax_in_place(col: &mut [f64]) {
    let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in col.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in col.iter_mut() {
        *v /= s;
    }
}

pub fn forward(arch: &Architecture, params: &Params, x: &Sample) -> Result<ForwardTrace> {
    params.check(arch)?;
    if x.dim() != arch.input_dim() {
        return Err(Error::Config(format!(
            "sample has input dimension {}, architecture expects {}",
            x.dim(),
            arch.input_dim()
        )));
    }
    let layers = arch.depth();
    let n = x.len();
    let mut preacts = Vec::with_capacity(layers);
    let mut acts = Vec::with_capacity(layers);
    acts.push(x.matrix().clone());
    for l in 0..layers {
        let mut y = &params.weights[l] * &acts[l];
        for mut col in y.column_iter_mut() {
            col += &params.biases[l];
        }
        if l + 1 < layers {
            acts.push(y.map(relu));
        }
        preacts.push(y);
    }
    let mut output = preacts[layers - 1].clone();
    if arch.out_act() == OutputActivation::Softmax {
        for i in 0..n {
            let mut col: Vec<f64> = output.column(i).iter().copied().collect();
            softmax_in_place(&mut col);
            output.column_mut(i).copy_from_slice(&col);
        }
    }
    Ok(ForwardTrace {
        preacts,
        acts,
        output,
        out_act: arch.out_act(),
    })
}

/// Binary matrix over hidden neurons (stacked layer by layer) x examples.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ActivationPattern {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged activation pattern".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            bits: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.rows
    }

    pub fn n_examples(&self) -> usize {
        self.cols
    }

    pub fn get(&self, neuron: usize, example: usize) -> bool {
        self.bits[neuron * self.cols + example]
    }

    pub fn row(&self, neuron: usize) -> &[bool] {
        &self.bits[neuron * self.cols..(neuron + 1) * self.cols]
    }

    pub fn column(&self, example: usize) -> Vec<bool> {
        (0..self.rows).map(|v| self.get(v, example)).collect()
    }
}

/// Indicator `[y_v(x_i) >= 0]` for every hidden neuron and example.
pub fn activation_pattern(trace: &ForwardTrace) -> ActivationPattern {
    let hidden = trace.hidden_preacts();
    let rows: usize = hidden.iter().map(|m| m.nrows()).sum();
    let cols = trace.n_examples();
    let mut bits = Vec::with_capacity(rows * cols);
    for y in hidden {
        for r in 0..y.nrows() {
            bits.extend((0..cols).map(|i| y[(r, i)] >= 0.0));
        }
    }
    ActivationPattern { rows, cols, bits }
}

/// Smallest normalized distance of a hidden pre-activation to zero:
/// `min_{v,i} |y_v(x_i)| / (1 + max_i |y_v(x_i)|)`.
///
/// Zero exactly when some hidden neuron sits on its activation boundary for
/// some example; the Jacobian is only well defined when this is positive.
pub fn boundary_margin(trace: &ForwardTrace) -> f64 {
    let mut margin = f64::INFINITY;
    for y in trace.hidden_preacts() {
        for row in y.row_iter() {
            let sup = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let low = row.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            margin = margin.min(low / (1.0 + sup));
        }
    }
    margin
}

/// Positive rescaling: `w'_{v'->v} = (lambda_v / lambda_{v'}) w_{v'->v}` and
/// `b'_v = lambda_v b_v`, with `lambda = 1` on input and output neurons.
///
/// `lambdas[k]` holds the factors of hidden layer `k + 1`.
pub fn rescale(arch: &Architecture, params: &Params, lambdas: &[Vec<f64>]) -> Result<Params> {
    params.check(arch)?;
    let hidden = arch.hidden_widths();
    if lambdas.len() != hidden.len() || lambdas.iter().zip(hidden).any(|(l, &w)| l.len() != w) {
        return Err(Error::Config("rescaling factors do not match hidden widths".into()));
    }
    if lambdas.iter().flatten().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Domain("rescaling factors must be positive and finite".into()));
    }
    let factor = |layer: usize, v: usize| -> f64 {
        // layer indexes neurons: 0 = input, depth = output
        if layer == 0 || layer == arch.depth() {
            1.0
        } else {
            lambdas[layer - 1][v]
        }
    };
    let mut out = params.clone();
    for l in 1..=arch.depth() {
        let w = &mut out.weights[l - 1];
        for v in 0..w.nrows() {
            let lv = factor(l, v);
            for vp in 0..w.ncols() {
                w[(v, vp)] *= lv / factor(l - 1, vp);
            }
            out.biases[l - 1][v] *= lv;
        }
    }
    Ok(out)
}

fn check_permutation(p: &[usize], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::Domain(format!("permutation of length {} for a layer of width {len}", p.len())));
    }
    let mut seen = vec![false; len];
    for &i in p {
        if i >= len || seen[i] {
            return Err(Error::Domain(format!("{p:?} is not a permutation of 0..{len}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Permutes hidden neurons: new neuron `j` of hidden layer `k + 1` is old neuron
/// `perms[k][j]`. Incoming rows, biases and outgoing columns move together.
pub fn permute(arch: &Architecture, params: &Params, perms: &[Vec<usize>]) -> Result<Params> {
    params.check(arch)?;
    let hidden = arch.hidden_widths();
    if perms.len() != hidden.len() {
        return Err(Error::Domain(format!(
            "{} permutations for {} hidden layers",
            perms.len(),
            hidden.len()
        )));
    }
    for (p, &w) in perms.iter().zip(hidden) {
        check_permutation(p, w)?;
    }
    let source = |layer: usize, j: usize| -> usize {
        if layer == 0 || layer == arch.depth() {
            j
        } else {
            perms[layer - 1][j]
        }
    };
    let mut out = params.clone();
    for l in 1..=arch.depth() {
        let w = &params.weights[l - 1];
        let b = &params.biases[l - 1];
        for j in 0..w.nrows() {
            let sj = source(l, j);
            out.biases[l - 1][j] = b[sj];
            for k in 0..w.ncols() {
                out.weights[l - 1][(j, k)] = w[(sj, source(l - 1, k))];
            }
        }
    }
    Ok(out)
}

/// Inverse of each per-layer permutation.
pub fn invert_permutations(perms: &[Vec<usize>]) -> Vec<Vec<usize>> {
    perms
        .iter()
        .map(|p| {
            let mut inv = vec![0; p.len()];
            for (j, &i) in p.iter().enumerate() {
                inv[i] = j;
            }
            inv
        })
        .collect()
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Every weight and bias drawn from `N(0, 1)`.
    StdNormal,
    /// Keras `HeNormal`: truncated normal (cut at two standard deviations) with
    /// standard deviation `sqrt(2 / fan_in)`; biases zero.
    HeNormal,
    /// Glorot uniform on `[-sqrt(6/(fan_in+fan_out)), +...]`; biases zero.
    GlorotUniformZeroBias,
}

// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNCATED_NORMAL_STD: f64 = 0.879_625_661_034_239_8;

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std / TRUNCATED_NORMAL_STD;
        }
    }
}

/// Deterministic initialization from a seed.
pub fn init_params(arch: &Architecture, scheme: InitScheme, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(arch, scheme, &mut rng)
}

pub fn init_params_with<R: Rng>(arch: &Architecture, scheme: InitScheme, rng: &mut R) -> Params {
    let mut p = Params::zeros(arch);
    for l in 0..arch.depth() {
        let (fan_out, fan_in) = p.weights[l].shape();
        match scheme {
            InitScheme::StdNormal => {
                for w in p.weights[l].iter_mut() {
                    *w = StandardNormal.sample(rng);
                }
                for b in p.biases[l].iter_mut() {
                    *b = StandardNormal.sample(rng);
                }
            }
            InitScheme::HeNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                for w in p.weights[l].iter_mut() {
                    *w = truncated_normal(rng, std);
                }
            }
            InitScheme::GlorotUniformZeroBias => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for w in p.weights[l].iter_mut() {
                    *w = dist.sample(rng);
                }
            }
        }
    }
    p
}

/// On-disk model format: row-major weight matrices flattened per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub widths: Vec<usize>,
    pub out_act: OutputActivation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(arch: &Architecture, params: &Params) -> Self {
        Self {
            widths: arch.widths().to_vec(),
            out_act: arch.out_act(),
            weights: params
                .weights
                .iter()
                .map(|w| (0..w.nrows()).flat_map(|r| (0..w.ncols()).map(move |c| w[(r, c)])).collect())
                .collect(),
            biases: params.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn into_model(self) -> Result<(Architecture, Params)> {
        let arch = Architecture::new(self.widths, self.out_act)?;
        let w = arch.widths();
        if self.weights.len() != arch.depth() || self.biases.len() != arch.depth() {
            return Err(Error::Config("model file layer count does not match widths".into()));
        }
        let mut weights = Vec::new();
        for (l, flat) in self.weights.iter().enumerate() {
            if flat.len() != w[l + 1] * w[l] {
                return Err(Error::Config(format!("layer {} weight list has wrong length", l + 1)));
            }
            weights.push(DMatrix::from_row_slice(w[l + 1], w[l], flat));
        }
        let biases = self.biases.iter().map(|b| DVector::from_column_slice(b)).collect();
        let params = Params::new(&arch, weights, biases)?;
        Ok((arch, params))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
