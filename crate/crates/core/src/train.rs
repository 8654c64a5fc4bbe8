//! Full-batch training with trajectory recording.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::vjp_preact;
use crate::localdim::{local_dimension, TolPolicy};
use crate::net::{activation_pattern, forward, Architecture, ForwardTrace, OutputActivation, Params, Sample};
use crate::shallow::{classify_cone, project_to_p, seen_regions, OrderedSample};

/// Loss above which a trajectory is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// A loss together with its targets (`N_L x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub kind: LossKind,
    pub targets: DMatrix<f64>,
}

impl Objective {
    pub fn mse(targets: DMatrix<f64>) -> Self {
        Self {
            kind: LossKind::Mse,
            targets,
        }
    }

    pub fn cross_entropy(targets: DMatrix<f64>) -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            targets,
        }
    }

    fn check(&self, arch: &Architecture, n: usize) -> Result<()> {
        if self.targets.shape() != (arch.output_dim(), n) {
            return Err(Error::Config(format!(
                "targets have shape {:?}, expected {:?}",
                self.targets.shape(),
                (arch.output_dim(), n)
            )));
        }
        if self.kind == LossKind::CrossEntropy && arch.out_act() != OutputActivation::Softmax {
            return Err(Error::Config("cross-entropy requires a softmax output".into()));
        }
        Ok(())
    }

    /// Loss value from a forward trace.
    pub fn value(&self, trace: &ForwardTrace) -> f64 {
        let n = trace.n_examples() as f64;
        match self.kind {
            LossKind::Mse => (&trace.output - &self.targets).norm_squared() / n,
            LossKind::CrossEntropy => {
                let mut s = 0.0;
                for (p, y) in trace.output.iter().zip(self.targets.iter()) {
                    if *y != 0.0 {
                        s -= y * p.max(f64::MIN_POSITIVE).ln();
                    }
                }
                s / n
            }
        }
    }

    /// `dLoss / dy^L`, the derivative with respect to the last pre-activation.
    fn preact_gradient(&self, trace: &ForwardTrace) -> DMatrix<f64> {
        let n = trace.n_examples() as f64;
        match self.kind {
            LossKind::Mse => {
                let g = (&trace.output - &self.targets) * (2.0 / n);
                match trace.out_act {
                    OutputActivation::Identity => g,
                    OutputActivation::Softmax => {
                        // J_softmax^T g = s * (g - <s, g>), column by column.
                        let mut out = g.clone();
                        for (i, mut col) in out.column_iter_mut().enumerate() {
                            let s = trace.output.column(i);
                            let dot = s.dot(&g.column(i));
                            for a in 0..col.len() {
                                col[a] = s[a] * (g[(a, i)] - dot);
                            }
                        }
                        out
                    }
                }
            }
            LossKind::CrossEntropy => {
                let mut out = trace.output.clone();
                for (i, mut col) in out.column_iter_mut().enumerate() {
                    let mass = self.targets.column(i).sum();
                    for a in 0..col.len() {
                        col[a] = (col[a] * mass - self.targets[(a, i)]) / n;
                    }
                }
                out
            }
        }
    }
}

/// Loss and its gradient with respect to the flat parameters.
pub fn loss_and_gradient(
    arch: &Architecture,
    params: &Params,
    x: &Sample,
    objective: &Objective,
) -> Result<(f64, Vec<f64>)> {
    objective.check(arch, x.len())?;
    let trace = forward(arch, params, x)?;
    let loss = objective.value(&trace);
    let grad = vjp_preact(params, &trace, &objective.preact_gradient(&trace));
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {k}")));
    }
    Ok((loss, grad))
}

pub fn loss(arch: &Architecture, params: &Params, x: &Sample, objective: &Objective) -> Result<f64> {
    objective.check(arch, x.len())?;
    Ok(objective.value(&forward(arch, params, x)?))
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("learning rate must be positive, got {lr}")))
    }
}

/// One gradient-descent step `theta - lr * grad`.
pub fn gd_step(arch: &Architecture, params: &Params, x: &Sample, objective: &Objective, lr: f64) -> Result<Params> {
    check_lr(lr)?;
    let (_, g) = loss_and_gradient(arch, params, x, objective)?;
    let theta: Vec<f64> = params.to_flat().iter().zip(&g).map(|(t, g)| t - lr * g).collect();
    Params::from_flat(arch, &theta)
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one Adam update to `theta` given a gradient.
pub fn adam_update(state: &mut AdamState, cfg: &AdamConfig, theta: &mut [f64], grad: &[f64]) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..theta.len() {
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grad[k];
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One Adam step with bias correction.
pub fn adam_step(
    state: &AdamState,
    arch: &Architecture,
    params: &Params,
    x: &Sample,
    objective: &Objective,
    cfg: &AdamConfig,
) -> Result<(AdamState, Params)> {
    check_lr(cfg.lr)?;
    let (_, g) = loss_and_gradient(arch, params, x, objective)?;
    let mut state = state.clone();
    let mut theta = params.to_flat();
    adam_update(&mut state, cfg, &mut theta, &g);
    Ok((state, Params::from_flat(arch, &theta)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Gd { lr: f64 },
    Adam(AdamConfig),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Gd { lr } => *lr,
            Optimizer::Adam(c) => c.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub iterations: usize,
    /// Snapshot period; the initial and final iterates are always recorded.
    pub record_every: usize,
    /// Stop as soon as the loss falls below this value.
    pub stop_loss: Option<f64>,
    /// Seed of the initialization, kept for the record.
    pub seed: u64,
}

/// Extra per-snapshot measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub region: Option<String>,
    pub local_dim: Option<usize>,
    pub seen_regions: Option<usize>,
    pub projected: Option<(f64, f64)>,
}

/// Computes annotations at recorded iterations.
pub trait SnapshotHook: Sync {
    fn annotate(&self, arch: &Architecture, params: &Params, x: &Sample, trace: &ForwardTrace) -> Result<Annotation>;
}

/// No annotations.
pub struct NoHook;

impl SnapshotHook for NoHook {
    fn annotate(&self, _: &Architecture, _: &Params, _: &Sample, _: &ForwardTrace) -> Result<Annotation> {
        Ok(Annotation::default())
    }
}

/// Region label of a scalar shallow network: the cone index of every hidden neuron.
pub fn shallow_region_label(params: &Params, xs: &OrderedSample) -> Vec<usize> {
    let w = &params.weights[0];
    let b = &params.biases[0];
    (0..w.nrows()).map(|k| classify_cone(w[(k, 0)], b[k], xs)).collect()
}

/// Annotations for `(1, N_1, 1)` networks: cone label, local dimension, seen
/// regions, and for three-point samples the projected output.
pub struct ShallowHook {
    pub xs: OrderedSample,
    pub policy: TolPolicy,
    pub with_rank: bool,
}

impl SnapshotHook for ShallowHook {
    fn annotate(&self, arch: &Architecture, params: &Params, x: &Sample, trace: &ForwardTrace) -> Result<Annotation> {
        let label = shallow_region_label(params, &self.xs);
        let region = label.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-");
        let local_dim = if self.with_rank {
            Some(local_dimension(arch, params, x, self.policy)?.rank)
        } else {
            None
        };
        let projected = (trace.output.len() == 3).then(|| {
            let o = &trace.output;
            project_to_p([o[0], o[1], o[2]])
        });
        Ok(Annotation {
            region: Some(region),
            local_dim,
            seen_regions: Some(seen_regions(&activation_pattern(trace))),
            projected,
        })
    }
}

/// Local dimension only.
pub struct RankHook {
    pub policy: TolPolicy,
}

impl SnapshotHook for RankHook {
    fn annotate(&self, arch: &Architecture, params: &Params, x: &Sample, trace: &ForwardTrace) -> Result<Annotation> {
        Ok(Annotation {
            local_dim: Some(local_dimension(arch, params, x, self.policy)?.rank),
            seen_regions: Some(seen_regions(&activation_pattern(trace))),
            ..Annotation::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub theta_hash: u64,
    pub loss: f64,
    #[serde(flatten)]
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    /// Loss before every step and after the last one.
    pub losses: Vec<f64>,
    pub config: TrainConfig,
    pub final_params: Params,
    /// Set when the loss exceeded [`DIVERGENCE_LOSS`] or became non-finite.
    pub aborted: bool,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.snapshots.last().map_or(f64::NAN, |s| s.loss)
    }

    /// Steps actually taken.
    pub fn steps(&self) -> usize {
        self.snapshots.last().map_or(0, |s| s.iteration)
    }
}

/// FNV-1a over the bit patterns of the flat parameters.
pub fn theta_hash(params: &Params) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in params.to_flat() {
        for byte in x.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Trains from `theta0` and records snapshots.
pub fn run_trajectory(
    arch: &Architecture,
    theta0: &Params,
    x: &Sample,
    objective: &Objective,
    config: &TrainConfig,
    hook: &dyn SnapshotHook,
) -> Result<Trajectory> {
    if config.iterations == 0 {
        return Err(Error::Config("at least one iteration is required".into()));
    }
    if config.record_every == 0 {
        return Err(Error::Config("record_every must be positive".into()));
    }
    check_lr(config.optimizer.lr())?;
    objective.check(arch, x.len())?;

    let mut params = theta0.clone();
    let mut theta = params.to_flat();
    let mut adam = AdamState::new(theta.len());
    let mut snapshots = Vec::new();
    let mut losses = Vec::new();
    let mut aborted = false;

    let record = |iteration: usize, params: &Params, trace: &ForwardTrace, loss: f64| -> Result<Snapshot> {
        Ok(Snapshot {
            iteration,
            theta_hash: theta_hash(params),
            loss,
            annotation: hook.annotate(arch, params, x, trace)?,
        })
    };

    let mut it = 0;
    loop {
        let trace = forward(arch, &params, x)?;
        let loss = objective.value(&trace);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            aborted = true;
            break;
        }
        losses.push(loss);
        let done = it == config.iterations || config.stop_loss.is_some_and(|s| loss < s);
        if done || it % config.record_every == 0 {
            snapshots.push(record(it, &params, &trace, loss)?);
        }
        if done {
            break;
        }
        let grad = vjp_preact(&params, &trace, &objective.preact_gradient(&trace));
        if grad.iter().any(|g| !g.is_finite()) {
            aborted = true;
            break;
        }
        match config.optimizer {
            Optimizer::Gd { lr } => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= lr * g;
                }
            }
            Optimizer::Adam(cfg) => adam_update(&mut adam, &cfg, &mut theta, &grad),
        }
        params = Params::from_flat(arch, &theta)?;
        it += 1;
    }

    Ok(Trajectory {
        snapshots,
        losses,
        config: config.clone(),
        final_params: params,
        aborted,
    })
}

/// Maximal flat intervals of a loss history.
///
/// Iteration `t` starts a flat window when `|L_t - L_{t+window}| <= rel_drop |L_t|`;
/// overlapping windows `[t, t + window]` are merged into one plateau.
pub fn detect_plateaus_in(losses: &[f64], window: usize, rel_drop: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    if window == 0 || losses.len() <= window {
        return out;
    }
    for t in 0..losses.len() - window {
        let (a, b) = (losses[t], losses[t + window]);
        if (a - b).abs() <= rel_drop * a.abs() {
            match out.last_mut() {
                Some(last) if last.1 >= t => last.1 = t + window,
                _ => out.push((t, t + window)),
            }
        }
    }
    out
}

/// Relative drop separating two plateau levels.
pub const DEFAULT_LEVEL_DROP: f64 = 0.05;

/// Groups consecutive plateaus that sit at the same loss level.
///
/// A plateau starts a new level only if the loss dropped by at least
/// `min_drop` (relative) between the end of the previous plateau and its
/// start; the detector otherwise splits one slowly creeping plateau into
/// several pieces.
/// Returns the merged `(start, end)` intervals.
pub fn plateau_levels(losses: &[f64], plateaus: &[(usize, usize)], min_drop: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(s, e) in plateaus {
        match out.last_mut() {
            Some(last) if losses[s] > (1.0 - min_drop) * losses[last.1] => last.1 = e,
            _ => out.push((s, e)),
        }
    }
    out
}

pub const DEFAULT_PLATEAU_WINDOW: usize = 20;
pub const DEFAULT_PLATEAU_REL: f64 = 1e-3;

pub fn detect_plateaus(traj: &Trajectory, window: usize, rel_drop: f64) -> Vec<(usize, usize)> {
    detect_plateaus_in(&traj.losses, window, rel_drop)
}
