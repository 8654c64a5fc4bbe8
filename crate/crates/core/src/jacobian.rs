//! Jacobian of `theta -> f_theta(X)` built one row at a time by backpropagation.
//!
//! Row `i * N_L + v` holds the gradient of output coordinate `v` on example `i`;
//! columns follow the flattened parameter order documented in [`crate::net`].
//! The ReLU derivative uses `sigma'(t) = 1` iff `t > 0`, so `sigma'(0) = 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{boundary_margin, forward, Architecture, ForwardTrace, OutputActivation, Params, Sample};

pub const DEFAULT_SUB_BATCH: usize = 256;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `(n * N_L) x (|E| + |B|)` Jacobian in fixed row and column order.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    data: DMatrix<f64>,
    output_dim: usize,
}

impl JacobianMatrix {
    pub fn new(data: DMatrix<f64>, output_dim: usize) -> Result<Self> {
        if output_dim == 0 || data.nrows() % output_dim != 0 {
            return Err(Error::Config(format!(
                "{} rows is not a multiple of output dimension {output_dim}",
                data.nrows()
            )));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            let (r, c) = (k % data.nrows(), k / data.nrows());
            return Err(Error::Numeric(format!("non-finite Jacobian entry at row {r}, column {c}")));
        }
        Ok(Self { data, output_dim })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn n_examples(&self) -> usize {
        self.data.nrows() / self.output_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    /// Row for example `i` and output coordinate `v`.
    pub fn row(&self, i: usize, v: usize) -> Vec<f64> {
        self.data.row(i * self.output_dim + v).iter().copied().collect()
    }

    /// Writes the matrix as CSV with a header naming every parameter column.
    pub fn write_csv<W: Write>(&self, arch: &Architecture, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(column_names(arch))?;
        for row in self.data.row_iter() {
            w.write_record(row.iter().map(|x| format!("{x:?}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameter names in column order: `L{l}.w{r}.{c}` and `L{l}.b{r}`, layers
/// counted from 1 and neuron indices from 0.
pub fn column_names(arch: &Architecture) -> Vec<String> {
    let w = arch.widths();
    let mut names = Vec::with_capacity(arch.param_count());
    for l in 1..w.len() {
        for r in 0..w[l] {
            for c in 0..w[l - 1] {
                names.push(format!("L{l}.w{r}.{c}"));
            }
        }
        for r in 0..w[l] {
            names.push(format!("L{l}.b{r}"));
        }
    }
    names
}

/// `(J sigma_L(y))^T e_v` for one output column.
fn output_seed(trace: &ForwardTrace, i: usize, v: usize) -> Vec<f64> {
    let nl = trace.output.nrows();
    match trace.out_act {
        OutputActivation::Identity => {
            let mut e = vec![0.0; nl];
            e[v] = 1.0;
            e
        }
        OutputActivation::Softmax => {
            let s = trace.output.column(i);
            // 1 - s_v as the sum of the other probabilities: exact even when
            // s_v rounds to 1.
            let rest: f64 = (0..nl).filter(|&a| a != v).map(|a| s[a]).sum();
            (0..nl)
                .map(|a| if a == v { s[v] * rest } else { -s[v] * s[a] })
                .collect()
        }
    }
}

/// Gradient of `<eta_L, y^L(x_i)>` with respect to the flat parameters, where
/// `eta_L` is an error vector at the last pre-activation.
fn backprop_from(params: &Params, trace: &ForwardTrace, i: usize, eta_last: Vec<f64>, out: &mut [f64]) {
    let layers = params.weights.len();
    // Offsets of each layer block in the flat vector.
    let mut offsets = Vec::with_capacity(layers);
    let mut acc = 0;
    for w in &params.weights {
        offsets.push(acc);
        acc += w.nrows() * w.ncols() + w.nrows();
    }
    let mut eta = eta_last;
    for l in (0..layers).rev() {
        let w = &params.weights[l];
        let (rows, cols) = w.shape();
        let act = trace.acts[l].column(i);
        let base = offsets[l];
        for v in 0..rows {
            let e = eta[v];
            let row = &mut out[base + v * cols..base + (v + 1) * cols];
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = act[k] * e;
            }
        }
        out[base + rows * cols..base + rows * cols + rows].copy_from_slice(&eta);
        if l > 0 {
            let y = trace.preacts[l - 1].column(i);
            let mut next = vec![0.0; cols];
            for (k, slot) in next.iter_mut().enumerate() {
                if y[k] > 0.0 {
                    *slot = (0..rows).map(|v| w[(v, k)] * eta[v]).sum();
                }
            }
            eta = next;
        }
    }
}

/// Gradient of output coordinate `v` on example `i`, i.e. one Jacobian row.
pub fn backprop_row(params: &Params, trace: &ForwardTrace, i: usize, v: usize) -> Vec<f64> {
    let p: usize = params.weights.iter().map(|w| w.nrows() * w.ncols() + w.nrows()).sum();
    let mut out = vec![0.0; p];
    backprop_from(params, trace, i, output_seed(trace, i, v), &mut out);
    out
}

fn rows_for(params: &Params, trace: &ForwardTrace, p: usize) -> DMatrix<f64> {
    let n = trace.n_examples();
    let nl = trace.output.nrows();
    let blocks: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut block = vec![0.0; nl * p];
            for v in 0..nl {
                backprop_from(params, trace, i, output_seed(trace, i, v), &mut block[v * p..(v + 1) * p]);
            }
            block
        })
        .collect();
    DMatrix::from_row_iterator(n * nl, p, blocks.into_iter().flatten())
}

/// Full Jacobian in one pass over the sample.
pub fn jacobian(arch: &Architecture, params: &Params, x: &Sample) -> Result<JacobianMatrix> {
    jacobian_sub_batched(arch, params, x, usize::MAX)
}

/// Jacobian computed on column blocks of at most `sub_batch` examples, so the
/// stored forward traces stay bounded; the blocks are stacked in order.
pub fn jacobian_sub_batched(
    arch: &Architecture,
    params: &Params,
    x: &Sample,
    sub_batch: usize,
) -> Result<JacobianMatrix> {
    if sub_batch == 0 {
        return Err(Error::Config("sub-batch size must be positive".into()));
    }
    let p = arch.param_count();
    let nl = arch.output_dim();
    let n = x.len();
    let mut data = DMatrix::zeros(n * nl, p);
    let mut start = 0;
    while start < n {
        let len = sub_batch.min(n - start);
        let block = x.columns(start, len);
        let trace = forward(arch, params, &block)?;
        let rows = rows_for(params, &trace, p);
        data.rows_mut(start * nl, len * nl).copy_from(&rows);
        start += len;
    }
    JacobianMatrix::new(data, nl)
}

/// Gradient of a scalar `R(y^L)` given `dR/dy^L` (an `N_L x n` matrix), computed
/// by seeding backpropagation with that matrix, batched over examples.
///
/// Equals `J^T vec(seed)` when the output activation is the identity.
pub fn vjp_preact(params: &Params, trace: &ForwardTrace, seed: &DMatrix<f64>) -> Vec<f64> {
    let layers = params.weights.len();
    let mut grads_w = vec![DMatrix::zeros(0, 0); layers];
    let mut grads_b = vec![DVector::zeros(0); layers];
    let mut eta = seed.clone();
    for l in (0..layers).rev() {
        grads_w[l] = &eta * trace.acts[l].transpose();
        grads_b[l] = eta.column_sum();
        if l > 0 {
            let mut back = params.weights[l].transpose() * &eta;
            back.zip_apply(&trace.preacts[l - 1], |g, y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            eta = back;
        }
    }
    let mut out = Vec::new();
    for (w, b) in grads_w.iter().zip(&grads_b) {
        for r in 0..w.nrows() {
            out.extend((0..w.ncols()).map(|c| w[(r, c)]));
        }
        out.extend(b.iter());
    }
    out
}

/// Central finite differences, one forward pair per parameter, with step
/// `h * (1 + |theta_k|)`.
///
/// Requires the boundary margin to exceed `10 h`, so that no activation flips
/// inside the stencil.
pub fn finite_diff_jacobian(arch: &Architecture, params: &Params, x: &Sample, h: f64) -> Result<JacobianMatrix> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let trace = forward(arch, params, x)?;
    let margin = boundary_margin(&trace);
    if margin <= 10.0 * h {
        return Err(Error::Precondition(format!(
            "boundary margin {margin:e} does not exceed 10 * step = {:e}",
            10.0 * h
        )));
    }
    let theta = params.to_flat();
    let nl = arch.output_dim();
    let n = x.len();
    let columns: Vec<Result<Vec<f64>>> = (0..theta.len())
        .into_par_iter()
        .map(|k| {
            let step = h * (1.0 + theta[k].abs());
            let mut plus = theta.clone();
            plus[k] += step;
            let mut minus = theta.clone();
            minus[k] -= step;
            let fp = forward(arch, &Params::from_flat(arch, &plus)?, x)?.output;
            let fm = forward(arch, &Params::from_flat(arch, &minus)?, x)?.output;
            let denom = plus[k] - minus[k];
            // Example-major, then output coordinate: the column-major layout of F.
            Ok(fp.iter().zip(fm.iter()).map(|(a, b)| (a - b) / denom).collect())
        })
        .collect();
    let mut data = DMatrix::zeros(n * nl, theta.len());
    for (k, col) in columns.into_iter().enumerate() {
        data.column_mut(k).copy_from_slice(&col?);
    }
    JacobianMatrix::new(data, nl)
}
