//! Numerical rank of the Jacobian and sampled semi-continuous envelopes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{jacobian_sub_batched, JacobianMatrix, DEFAULT_SUB_BATCH};
use crate::net::{boundary_margin, forward, Architecture, Params, Sample};

/// Smallest ratio between consecutive singular values that the gap policy
/// accepts as a genuine cut.
pub const DEFAULT_GAP_RATIO: f64 = 1e3;

/// How the rank threshold is chosen from the singular values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TolPolicy {
    /// `tau = sigma_max * max(rows, cols) * eps`.
    Spectral,
    /// Cut at the widest gap (in log scale) between consecutive singular values,
    /// with values floored at `sigma_max * eps`, provided that gap is a ratio of
    /// at least `min_ratio`; otherwise fall back to the spectral threshold.
    Gap { min_ratio: f64 },
    /// A caller-provided absolute threshold.
    Fixed(f64),
}

impl Default for TolPolicy {
    fn default() -> Self {
        TolPolicy::Spectral
    }
}

impl TolPolicy {
    pub fn gap() -> Self {
        TolPolicy::Gap {
            min_ratio: DEFAULT_GAP_RATIO,
        }
    }
}

/// Rank together with the evidence it was decided from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub rank: usize,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
}

/// The report for one `(theta, X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDimReport {
    pub rank: usize,
    pub max_rank: usize,
    pub margin: f64,
    pub tolerance: f64,
    pub singular_values: Vec<f64>,
}

impl LocalDimReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Descending singular values; `Numeric` error if the SVD does not converge.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let sv = f
        .singular_values()
        .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))?;
    let mut s: Vec<f64> = sv.into_iter().map(f64::abs).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

fn spectral_tolerance(s: &[f64], rows: usize, cols: usize) -> f64 {
    s.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * f64::EPSILON
}

/// Rank decision from an already computed descending spectrum.
pub fn rank_from_spectrum(s: &[f64], rows: usize, cols: usize, policy: TolPolicy) -> Result<RankProfile> {
    let spectral = spectral_tolerance(s, rows, cols);
    let count_above = |tau: f64| s.iter().filter(|&&x| x > tau).count();
    let tolerance = match policy {
        TolPolicy::Spectral => spectral,
        TolPolicy::Fixed(tau) => {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::Domain(format!("fixed tolerance must be finite and non-negative, got {tau}")));
            }
            tau
        }
        TolPolicy::Gap { min_ratio } => {
            if !(min_ratio > 1.0) {
                return Err(Error::Domain(format!("gap ratio must exceed 1, got {min_ratio}")));
            }
            // Values at or below sigma_max * eps are indistinguishable from zero.
            let floor = (s.first().copied().unwrap_or(0.0) * f64::EPSILON).max(f64::MIN_POSITIVE);
            let mut best: Option<(usize, f64)> = None;
            for k in 1..s.len() {
                let ratio = s[k - 1].max(floor) / s[k].max(floor);
                if best.is_none_or(|(_, r)| ratio > r) {
                    best = Some((k, ratio));
                }
            }
            match best {
                Some((k, ratio)) if ratio >= min_ratio => (s[k - 1].max(floor) * s[k].max(floor)).sqrt(),
                _ => spectral,
            }
        }
    };
    Ok(RankProfile {
        rank: count_above(tolerance),
        singular_values: s.to_vec(),
        tolerance,
    })
}

/// Numerical rank of a Jacobian under the given tolerance policy.
pub fn numerical_rank(j: &JacobianMatrix, policy: TolPolicy) -> Result<RankProfile> {
    matrix_rank(j.data(), policy)
}

pub fn matrix_rank(m: &DMatrix<f64>, policy: TolPolicy) -> Result<RankProfile> {
    let s = singular_values(m)?;
    rank_from_spectrum(&s, m.nrows(), m.ncols(), policy)
}

/// Jacobian, rank, boundary margin and the architectural upper bound.
pub fn local_dimension(arch: &Architecture, params: &Params, x: &Sample, policy: TolPolicy) -> Result<LocalDimReport> {
    local_dimension_sub_batched(arch, params, x, policy, DEFAULT_SUB_BATCH)
}

pub fn local_dimension_sub_batched(
    arch: &Architecture,
    params: &Params,
    x: &Sample,
    policy: TolPolicy,
    sub_batch: usize,
) -> Result<LocalDimReport> {
    let j = jacobian_sub_batched(arch, params, x, sub_batch)?;
    let profile = numerical_rank(&j, policy)?;
    let margin = margin_of(arch, params, x, sub_batch)?;
    Ok(LocalDimReport {
        rank: profile.rank,
        max_rank: arch.max_rank(),
        margin,
        tolerance: profile.tolerance,
        singular_values: profile.singular_values,
    })
}

fn margin_of(arch: &Architecture, params: &Params, x: &Sample, sub_batch: usize) -> Result<f64> {
    // The margin normalizes by each neuron's sup-norm over the *whole* sample,
    // so sub-batches are only used to bound memory of the pre-activations.
    if x.len() <= sub_batch {
        return Ok(boundary_margin(&forward(arch, params, x)?));
    }
    let mut mins: Vec<f64> = Vec::new();
    let mut sups: Vec<f64> = Vec::new();
    let mut start = 0;
    while start < x.len() {
        let len = sub_batch.min(x.len() - start);
        let t = forward(arch, params, &x.columns(start, len))?;
        let mut idx = 0;
        for y in t.hidden_preacts() {
            for row in y.row_iter() {
                let lo = row.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                let hi = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if start == 0 {
                    mins.push(lo);
                    sups.push(hi);
                } else {
                    mins[idx] = mins[idx].min(lo);
                    sups[idx] = sups[idx].max(hi);
                }
                idx += 1;
            }
        }
        start += len;
    }
    Ok(mins
        .iter()
        .zip(&sups)
        .map(|(lo, hi)| lo / (1.0 + hi))
        .fold(f64::INFINITY, f64::min))
}

/// Sampled extremes of the local dimension over a ball `B(theta, epsilon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimEnvelope {
    pub dim_plus: usize,
    pub dim_minus: usize,
    pub epsilon: f64,
    pub samples: usize,
}

/// Ranks at `samples` points drawn uniformly in the Euclidean ball of radius
/// `epsilon` around `theta`, plus `theta` itself.
///
/// The maximum under-estimates `dim+` and the minimum over-estimates `dim-`;
/// both become exact once the samples hit every region touching `theta`.
pub fn dim_envelope(
    arch: &Architecture,
    params: &Params,
    x: &Sample,
    epsilon: f64,
    samples: usize,
    policy: TolPolicy,
    seed: u64,
) -> Result<DimEnvelope> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let theta = params.to_flat();
    let dim = theta.len();
    let base = local_dimension(arch, params, x, policy)?.rank;
    let ranks: Vec<Result<usize>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let dir = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let norm = dir.norm();
            let u: f64 = Uniform::new(0.0, 1.0).expect("valid range").sample(&mut rng);
            let radius = epsilon * u.powf(1.0 / dim as f64);
            let point: Vec<f64> = theta
                .iter()
                .zip(dir.iter())
                .map(|(t, d)| t + radius * d / norm)
                .collect();
            let p = Params::from_flat(arch, &point)?;
            Ok(local_dimension(arch, &p, x, policy)?.rank)
        })
        .collect();
    let mut dim_plus = base;
    let mut dim_minus = base;
    for r in ranks {
        let r = r?;
        dim_plus = dim_plus.max(r);
        dim_minus = dim_minus.min(r);
    }
    Ok(DimEnvelope {
        dim_plus,
        dim_minus,
        epsilon,
        samples,
    })
}
