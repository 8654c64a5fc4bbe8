//! Reference computations written with plain loops, sharing nothing with the
//! library beyond the flat parameter layout (per layer: weights row-major,
//! then biases).

use nalgebra::DMatrix;

use localdim::OutputActivation;

/// Network output for one input vector.
pub fn eval(widths: &[usize], act: OutputActivation, theta: &[f64], input: &[f64]) -> Vec<f64> {
    let depth = widths.len() - 1;
    let mut h = input.to_vec();
    let mut at = 0;
    for l in 1..=depth {
        let (rows, cols) = (widths[l], widths[l - 1]);
        let w = &theta[at..at + rows * cols];
        let b = &theta[at + rows * cols..at + rows * cols + rows];
        at += rows * cols + rows;
        let mut y = vec![0.0; rows];
        for v in 0..rows {
            let mut s = b[v];
            for u in 0..cols {
                s += w[v * cols + u] * h[u];
            }
            y[v] = s;
        }
        if l < depth {
            for t in &mut y {
                *t = t.max(0.0);
            }
        } else if act == OutputActivation::Softmax {
            let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = y.iter().map(|t| (t - m).exp()).sum();
            for t in &mut y {
                *t = (*t - m).exp() / z;
            }
        }
        h = y;
    }
    h
}

/// Outputs on every column of `x`, stacked example-major.
pub fn eval_stacked(widths: &[usize], act: OutputActivation, theta: &[f64], x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .flat_map(|i| {
            let col: Vec<f64> = x.column(i).iter().copied().collect();
            eval(widths, act, theta, &col)
        })
        .collect()
}

/// Central-difference Jacobian with rows ordered example-major, then output.
pub fn central_differences(widths: &[usize], act: OutputActivation, theta: &[f64], x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let rows = x.ncols() * widths[widths.len() - 1];
    let mut j = DMatrix::zeros(rows, theta.len());
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        t[k] = theta[k] + h;
        let plus = eval_stacked(widths, act, &t, x);
        t[k] = theta[k] - h;
        let minus = eval_stacked(widths, act, &t, x);
        t[k] = theta[k];
        for r in 0..rows {
            j[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    j
}

/// Rank by Gaussian elimination with partial pivoting and a relative
/// threshold; independent of the SVD used by the library.
pub fn elimination_rank(m: &DMatrix<f64>, rel: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let scale = a.amax();
    if scale == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (p, best) = (rank..rows)
            .map(|r| (r, a[(r, c)].abs()))
            .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= rel * scale {
            continue;
        }
        a.swap_rows(rank, p);
        for r in rank + 1..rows {
            let f = a[(r, c)] / a[(rank, c)];
            if f != 0.0 {
                for cc in c..cols {
                    a[(r, cc)] -= f * a[(rank, cc)];
                }
            }
        }
        rank += 1;
    }
    rank
}
