//! Closed-form theory for shallow networks `(1, N_1, 1)` with identity output.
//!
//! On a sorted sample of distinct scalars, every hidden neuron's activation row
//! is a threshold pattern `1_alpha`, and the local dimension equals the rank of
//! `[1; e_{alpha_1 - 1}; e_{alpha_1}; ...]` built from the hinge vectors
//! `e_i = relu(X - x_i)` and `e_{n+i} = relu(x_i - X)`.
//!
//! Indices follow the 1-based conventions of that theory: `alpha` lives in
//! `1..=2n`, hinge vectors are indexed `0..=2n` with `e_0 = e_{2n}`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localdim::{matrix_rank, TolPolicy};
use crate::net::{activation_pattern, forward, ActivationPattern, Architecture, Params, Sample};

/// Strictly increasing scalar sample with the permutation that sorted it.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedSample {
    xs: Vec<f64>,
    /// `perm[k]` is the original index of the `k`-th smallest value.
    perm: Vec<usize>,
}

impl OrderedSample {
    /// Sorts `values`; duplicates and non-finite values are rejected.
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("empty sample".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("sample has non-finite values".into()));
        }
        let mut perm: Vec<usize> = (0..values.len()).collect();
        perm.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let xs: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        if let Some(w) = xs.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Domain(format!("duplicate sample value {}", w[0])));
        }
        Ok(Self { xs, perm })
    }

    /// Removes duplicates first; returns how many values were dropped.
    pub fn dedup(values: &[f64]) -> Result<(Self, usize)> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        let dropped = values.len() - v.len();
        Ok((Self::new(&v)?, dropped))
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// The sorted values as a [`Sample`].
    pub fn sample(&self) -> Sample {
        Sample::from_scalars(&self.xs).expect("validated on construction")
    }
}

/// Hinge vectors `e_0, ..., e_{2n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EVectors {
    n: usize,
    e: Vec<DVector<f64>>,
}

impl EVectors {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `e_index` for `index` in `0..=2n`.
    pub fn get(&self, index: usize) -> &DVector<f64> {
        &self.e[index]
    }
}

pub fn e_vectors(xs: &OrderedSample) -> EVectors {
    let x = xs.xs();
    let n = x.len();
    let mut e = vec![DVector::zeros(n); 2 * n + 1];
    for i in 1..=n {
        let xi = x[i - 1];
        e[i] = DVector::from_iterator(n, x.iter().map(|&t| (t - xi).max(0.0)));
        e[n + i] = DVector::from_iterator(n, x.iter().map(|&t| (xi - t).max(0.0)));
    }
    e[0] = e[2 * n].clone();
    EVectors { n, e }
}

/// One code in `1..=2n` per hidden neuron.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlphaCode(pub Vec<usize>);

/// Code of one monotone row given in sorted order.
fn alpha_of_row(row: &[bool]) -> Option<usize> {
    let n = row.len();
    if row.iter().all(|&b| b) {
        return Some(1);
    }
    if row.iter().all(|&b| !b) {
        return Some(n + 1);
    }
    if !row[0] {
        // 0...0 1...1
        let i = row.iter().position(|&b| b)?;
        row[i..].iter().all(|&b| b).then_some(i + 1)
    } else {
        // 1...1 0...0
        let i = row.iter().position(|&b| !b)?;
        row[i..].iter().all(|&b| !b).then_some(n + i + 1)
    }
}

/// Threshold codes of every neuron.
///
/// `pattern` columns are in the *original* order of the values given to
/// `xs`; they are reordered through `xs.perm()` before decoding.
pub fn alpha_of(pattern: &ActivationPattern, xs: &OrderedSample) -> Result<AlphaCode> {
    if pattern.n_examples() != xs.len() {
        return Err(Error::Config(format!(
            "pattern has {} columns for a sample of {}",
            pattern.n_examples(),
            xs.len()
        )));
    }
    let mut codes = Vec::with_capacity(pattern.n_neurons());
    for k in 0..pattern.n_neurons() {
        let row: Vec<bool> = xs.perm().iter().map(|&i| pattern.get(k, i)).collect();
        let code = alpha_of_row(&row).ok_or_else(|| {
            Error::Invariant(format!("activation row {k} is not monotone along the sorted sample: {row:?}"))
        })?;
        codes.push(code);
    }
    Ok(AlphaCode(codes))
}

/// The stacked matrix `[1; e_{alpha_1 - 1}; e_{alpha_1}; ...]`.
pub fn closed_form_matrix(alpha: &AlphaCode, ev: &EVectors) -> DMatrix<f64> {
    let n = ev.n();
    let mut rows = vec![DVector::from_element(n, 1.0)];
    for &a in &alpha.0 {
        rows.push(ev.get(a - 1).clone());
        rows.push(ev.get(a).clone());
    }
    DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c])
}

pub fn closed_form_rank(alpha: &AlphaCode, ev: &EVectors) -> Result<usize> {
    let n = ev.n();
    if let Some(&bad) = alpha.0.iter().find(|&&a| a == 0 || a > 2 * n) {
        return Err(Error::Domain(format!("alpha code {bad} outside 1..={}", 2 * n)));
    }
    Ok(matrix_rank(&closed_form_matrix(alpha, ev), TolPolicy::Spectral)?.rank)
}

/// Number of distinct activation columns, i.e. `|A(X, theta)|`.
pub fn seen_regions(pattern: &ActivationPattern) -> usize {
    (0..pattern.n_examples())
        .map(|i| pattern.column(i))
        .collect::<BTreeSet<_>>()
        .len()
}

/// `L(alpha)`: indices in `0..=2n`, minus `{n, n+1}`, equal to some
/// `alpha_k` or `alpha_k - 1`.
pub fn l_set(alpha: &AlphaCode, n: usize) -> BTreeSet<usize> {
    alpha
        .0
        .iter()
        .flat_map(|&a| [a, a - 1])
        .filter(|&l| l != n && l != n + 1)
        .collect()
}

/// `L'(alpha)`: the codes themselves, minus `{n, n+1}`.
pub fn l_prime_set(alpha: &AlphaCode, n: usize) -> BTreeSet<usize> {
    alpha.0.iter().copied().filter(|&l| l != n && l != n + 1).collect()
}

/// Folds an index of `L'` into `1..=n`: `0 -> n`, `1..n-1` fixed, `n+2..=2n -> l - n`.
pub fn fold_index(l: usize, n: usize) -> Result<usize> {
    match l {
        0 => Ok(n),
        l if (1..n).contains(&l) => Ok(l),
        l if (n + 2..=2 * n).contains(&l) => Ok(l - n),
        _ => Err(Error::Domain(format!("index {l} has no fold for n = {n}"))),
    }
}

/// `L''(alpha)`: image of `L'` under [`fold_index`].
pub fn l_second_set(alpha: &AlphaCode, n: usize) -> Result<BTreeSet<usize>> {
    l_prime_set(alpha, n).into_iter().map(|l| fold_index(l, n)).collect()
}

/// `(l0_neurons, l0_linear)`.
///
/// `l0_neurons` counts the distinct vectors `e_l` behind `L(alpha)`: since
/// `e_0 = e_2n`, index 0 is identified with `2n` (and so, for `n = 1`, with the
/// zero vector `e_{n+1}`). Counting 0 and `2n` separately would break the lower
/// bound `1 + l0/2 <= rank`, e.g. for `n = 1` where the rank is at most 1.
pub fn l0_quantities(alpha: &AlphaCode, pattern: &ActivationPattern, n: usize) -> (usize, usize) {
    let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
    for i in 0..pattern.n_examples() {
        *counts.entry(pattern.column(i)).or_default() += 1;
    }
    let linear = counts.values().map(|&c| c.min(2)).sum();
    let neurons: BTreeSet<usize> = alpha
        .0
        .iter()
        .flat_map(|&a| [a, a - 1])
        .map(|l| if l == 0 { 2 * n } else { l })
        .filter(|&l| l != n && l != n + 1)
        .collect();
    (neurons.len(), linear)
}

/// Everything the closed form says about one shallow network on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowAnalysis {
    pub alpha: AlphaCode,
    pub closed_form_rank: usize,
    pub seen_regions: usize,
    pub l0_neurons: usize,
    pub l0_linear: usize,
    /// `(ceil(|A| / 2), 2 |A|)`.
    pub region_bounds: (usize, usize),
    /// `(ceil(1 + l0_neurons / 2), min(1 + l0_neurons, l0_linear))`.
    pub neuron_bounds: (usize, usize),
}

impl ShallowAnalysis {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the forward pass and evaluates every closed-form quantity.
pub fn analyze(arch: &Architecture, params: &Params, xs: &OrderedSample) -> Result<ShallowAnalysis> {
    if !arch.is_scalar_shallow() {
        return Err(Error::Config(format!(
            "closed form needs a (1, N1, 1) identity-output network, got {:?} with {:?}",
            arch.widths(),
            arch.out_act()
        )));
    }
    let trace = forward(arch, params, &xs.sample())?;
    let pattern = activation_pattern(&trace);
    // The sample passed to forward is already sorted.
    let sorted = OrderedSample::new(xs.xs())?;
    let alpha = alpha_of(&pattern, &sorted)?;
    let ev = e_vectors(xs);
    let rank = closed_form_rank(&alpha, &ev)?;
    let seen = seen_regions(&pattern);
    let (l0_neurons, l0_linear) = l0_quantities(&alpha, &pattern, xs.len());
    Ok(ShallowAnalysis {
        alpha,
        closed_form_rank: rank,
        seen_regions: seen,
        l0_neurons,
        l0_linear,
        region_bounds: (seen.div_ceil(2), 2 * seen),
        neuron_bounds: ((2 + l0_neurons).div_ceil(2), (1 + l0_neurons).min(l0_linear)),
    })
}

/// Both bound chains hold: `|A|/2 <= r <= 2|A|` and
/// `1 + l0_neurons/2 <= r <= min(1 + l0_neurons, l0_linear)`.
pub fn shallow_bounds_check(a: &ShallowAnalysis) -> bool {
    let r = a.closed_form_rank;
    let regions = 2 * r >= a.seen_regions && r <= 2 * a.seen_regions;
    let neurons = 2 * r >= 2 + a.l0_neurons && r <= (1 + a.l0_neurons).min(a.l0_linear);
    regions && neurons
}

/// Cone index in `1..=2n` containing `(w, b)`: the code of the pattern
/// `[w x_j + b >= 0]` along the sorted sample.
pub fn classify_cone(w: f64, b: f64, xs: &OrderedSample) -> usize {
    let x = xs.xs();
    let n = x.len();
    if w > 0.0 {
        // Pattern increases along x: find the first active example.
        let first_on = x.partition_point(|&t| w * t + b < 0.0);
        if first_on == n {
            n + 1
        } else {
            first_on + 1
        }
    } else if w < 0.0 {
        let first_off = x.partition_point(|&t| w * t + b >= 0.0);
        if first_off == n {
            1
        } else {
            n + first_off + 1
        }
    } else if b >= 0.0 {
        1
    } else {
        n + 1
    }
}

/// Generators `(u, v)` of cone `i`: its points are `lambda ((1-t) u + t v)`.
pub fn cone_generators(i: usize, xs: &OrderedSample) -> Result<([f64; 2], [f64; 2])> {
    let x = xs.xs();
    let n = x.len();
    let g = match i {
        1 => ([-1.0, x[n - 1]], [1.0, -x[0]]),
        i if (2..=n).contains(&i) => ([1.0, -x[i - 2]], [1.0, -x[i - 1]]),
        i if i == n + 1 => ([1.0, -x[n - 1]], [-1.0, x[0]]),
        i if (n + 2..=2 * n).contains(&i) => ([-1.0, x[i - n - 2]], [-1.0, x[i - n - 1]]),
        _ => return Err(Error::Domain(format!("cone index {i} outside 1..={}", 2 * n))),
    };
    Ok(g)
}

/// Writes `(w, b) = lambda ((1 - t) u + t v)` and returns `(lambda, t)`.
///
/// Returns `None` when the generators are parallel (possible only for `n = 1`).
pub fn cone_coordinates(i: usize, w: f64, b: f64, xs: &OrderedSample) -> Result<Option<(f64, f64)>> {
    let (u, v) = cone_generators(i, xs)?;
    let det = u[0] * v[1] - v[0] * u[1];
    if det == 0.0 {
        return Ok(None);
    }
    // (w, b) = p u + q v
    let p = (w * v[1] - v[0] * b) / det;
    let q = (u[0] * b - w * u[1]) / det;
    let lambda = p + q;
    let t = if lambda == 0.0 { 0.0 } else { q / lambda };
    Ok(Some((lambda, t)))
}

/// Coordinates of the orthogonal projection on the plane orthogonal to
/// `(1, 1, 1)`, in the basis `(1, 1, -2)/sqrt 6`, `(-1, 1, 0)/sqrt 2`.
pub fn project_to_p(y: [f64; 3]) -> (f64, f64) {
    let x = (y[0] + y[1] - 2.0 * y[2]) / 6.0_f64.sqrt();
    let z = (-y[0] + y[1]) / 2.0_f64.sqrt();
    (x, z)
}

/// Region number (1..=6) of the toy example `X = (0, 1, 2)` for a cone index.
///
/// Regions are numbered by activation pattern:
/// 1: (0,0,0), 2: (1,0,0), 3: (1,1,0), 4: (1,1,1), 5: (0,1,1), 6: (0,0,1).
pub fn toy_region_of_cone(cone: usize) -> Result<usize> {
    match cone {
        1 => Ok(4),
        2 => Ok(5),
        3 => Ok(6),
        4 => Ok(1),
        5 => Ok(2),
        6 => Ok(3),
        _ => Err(Error::Domain(format!("cone {cone} outside 1..=6"))),
    }
}

/// Toy region (1..=6) of a `(1, 1, 1)` parameter on `X = (0, 1, 2)`.
pub fn toy_region(w: f64, b: f64) -> usize {
    let xs = OrderedSample::new(&[0.0, 1.0, 2.0]).expect("fixed sample");
    toy_region_of_cone(classify_cone(w, b, &xs)).expect("three points give six cones")
}

/// Shape of the projected image of a toy region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageSet {
    Point,
    /// The line `a x + b y = 0`.
    Line { a: f64, b: f64 },
    /// A two-dimensional cone.
    Area,
}

impl ImageSet {
    pub fn dim(&self) -> usize {
        match self {
            ImageSet::Point => 0,
            ImageSet::Line { .. } => 1,
            ImageSet::Area => 2,
        }
    }
}

/// Projected image of region `j` of the toy example.
pub fn image_set_111(j: usize) -> Result<ImageSet> {
    let s3 = 3.0_f64.sqrt();
    match j {
        1 => Ok(ImageSet::Point),
        2 => Ok(ImageSet::Line { a: s3, b: 1.0 }),
        3 | 5 => Ok(ImageSet::Area),
        4 => Ok(ImageSet::Line { a: 1.0, b: s3 }),
        6 => Ok(ImageSet::Line { a: 0.0, b: 1.0 }),
        _ => Err(Error::Domain(format!("region {j} outside 1..=6"))),
    }
}

/// Affine dimension of the projected image of region `j`.
pub fn image_set_dim_111(j: usize) -> Result<usize> {
    Ok(image_set_111(j)?.dim())
}
