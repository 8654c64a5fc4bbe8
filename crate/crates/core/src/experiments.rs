//! Experiment drivers shared by the command-line tool and the acceptance tests.
//!
//! Every run draws from its own ChaCha stream, `(seed, run index)`, so results
//! are bit-identical regardless of thread count or scheduling.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_idx_file;
use crate::localdim::{local_dimension_sub_batched, TolPolicy};
use crate::net::{
    activation_pattern, forward, init_params_with, Architecture, ForwardTrace, InitScheme, OutputActivation, Params,
    Sample,
};
use crate::shallow::{analyze, classify_cone, project_to_p, seen_regions, shallow_bounds_check, toy_region, toy_region_of_cone, OrderedSample};
use crate::train::{
    detect_plateaus, loss_and_gradient, plateau_levels, run_trajectory, AdamConfig, Annotation, NoHook, Objective, Optimizer,
    SnapshotHook, TrainConfig, Trajectory, DEFAULT_LEVEL_DROP, DEFAULT_PLATEAU_REL, DEFAULT_PLATEAU_WINDOW,
};

/// Independent random stream for run `stream` of an experiment seeded by `seed`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn toy_arch() -> Architecture {
    Architecture::new(vec![1, 1, 1], OutputActivation::Identity).expect("valid widths")
}

pub fn toy_sample() -> Sample {
    Sample::from_scalars(&[0.0, 1.0, 2.0]).expect("finite")
}

/// Region (1..=6) of a `(1, 1, 1)` parameter vector on `X = (0, 1, 2)`.
pub fn toy_region_of(params: &Params) -> usize {
    toy_region(params.weights[0][(0, 0)], params.biases[0][0])
}

/// Annotates toy trajectories with the region number, rank and projected output.
pub struct ToyHook;

impl SnapshotHook for ToyHook {
    fn annotate(&self, arch: &Architecture, params: &Params, x: &Sample, trace: &ForwardTrace) -> Result<Annotation> {
        let o = &trace.output;
        Ok(Annotation {
            region: Some(toy_region_of(params).to_string()),
            local_dim: Some(crate::localdim::local_dimension(arch, params, x, TolPolicy::Spectral)?.rank),
            seen_regions: Some(seen_regions(&activation_pattern(trace))),
            projected: Some(project_to_p([o[0], o[1], o[2]])),
        })
    }
}

// ---------------------------------------------------------------------------
// Toy table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTableConfig {
    pub runs: usize,
    pub iterations: usize,
    pub lr: f64,
    pub targets: [f64; 3],
    pub seed: u64,
}

impl Default for ToyTableConfig {
    fn default() -> Self {
        Self {
            runs: 10_000,
            iterations: 300,
            lr: 0.1,
            targets: [0.0, 1.0, 3.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub run: usize,
    pub init_region: usize,
    pub final_region: usize,
    pub final_loss: f64,
    pub init_theta: Vec<f64>,
    pub final_theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTable {
    pub config: ToyTableConfig,
    pub runs: Vec<ToyRun>,
    pub init_counts: [usize; 6],
    pub final_counts: [usize; 6],
    /// `transitions[i][j]`: runs starting in region `i + 1` and ending in `j + 1`.
    pub transitions: [[usize; 6]; 6],
}

fn freq(counts: &[usize; 6]) -> [f64; 6] {
    let total: usize = counts.iter().sum();
    let mut out = [0.0; 6];
    if total > 0 {
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

impl ToyTable {
    pub fn init_row(&self) -> [f64; 6] {
        freq(&self.init_counts)
    }

    pub fn final_row(&self) -> [f64; 6] {
        freq(&self.final_counts)
    }

    /// Final distribution among runs initialized in region `j` (1-based).
    pub fn conditional_row(&self, j: usize) -> [f64; 6] {
        freq(&self.transitions[j - 1])
    }

    /// The eight rows: initial, final, then final given each initial region,
    /// each with the number of runs it is based on.
    pub fn rows(&self) -> Vec<(String, usize, [f64; 6])> {
        let mut rows = vec![
            ("P(theta0 in U_j)".to_string(), self.runs.len(), self.init_row()),
            (format!("P(theta{} in U_j)", self.config.iterations), self.runs.len(), self.final_row()),
        ];
        for j in 1..=6 {
            rows.push((
                format!("P(theta{} in U_j | theta0 in U_{j})", self.config.iterations),
                self.init_counts[j - 1],
                self.conditional_row(j),
            ));
        }
        rows
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "runs", "U1", "U2", "U3", "U4", "U5", "U6"])?;
        for (name, count, p) in self.rows() {
            let mut rec = vec![name, count.to_string()];
            rec.extend(p.iter().map(|x| format!("{x:.4}")));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_toy_table(cfg: &ToyTableConfig) -> Result<ToyTable> {
    if cfg.runs == 0 || cfg.iterations == 0 {
        return Err(Error::Config("runs and iterations must be positive".into()));
    }
    let arch = toy_arch();
    let x = toy_sample();
    let objective = Objective::mse(DMatrix::from_row_slice(1, 3, &cfg.targets));
    let train = TrainConfig {
        optimizer: Optimizer::Gd { lr: cfg.lr },
        iterations: cfg.iterations,
        record_every: cfg.iterations,
        stop_loss: None,
        seed: cfg.seed,
    };
    let runs: Vec<Result<ToyRun>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let theta0 = init_params_with(&arch, InitScheme::StdNormal, &mut run_rng(cfg.seed, run as u64));
            let traj = run_trajectory(&arch, &theta0, &x, &objective, &train, &NoHook)?;
            Ok(ToyRun {
                run,
                init_region: toy_region_of(&theta0),
                final_region: toy_region_of(&traj.final_params),
                final_loss: traj.final_loss(),
                init_theta: theta0.to_flat(),
                final_theta: traj.final_params.to_flat(),
            })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut init_counts = [0; 6];
    let mut final_counts = [0; 6];
    let mut transitions = [[0; 6]; 6];
    for r in &runs {
        init_counts[r.init_region - 1] += 1;
        final_counts[r.final_region - 1] += 1;
        transitions[r.init_region - 1][r.final_region - 1] += 1;
    }
    Ok(ToyTable {
        config: cfg.clone(),
        runs,
        init_counts,
        final_counts,
        transitions,
    })
}

// ---------------------------------------------------------------------------
// Saddle-to-saddle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleConfig {
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub lr: f64,
    pub targets: [f64; 3],
    /// Initializations are redrawn until they fall in this region.
    pub start_region: usize,
    pub plateau_window: usize,
    pub plateau_rel: f64,
    pub level_drop: f64,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            iterations: 3000,
            lr: 0.01,
            targets: [1.0, 0.0, 5.0],
            start_region: 4,
            plateau_window: DEFAULT_PLATEAU_WINDOW,
            plateau_rel: DEFAULT_PLATEAU_REL,
            level_drop: DEFAULT_LEVEL_DROP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleRun {
    pub seed: u64,
    pub trajectory: Trajectory,
    /// Regions in order of first visit.
    pub region_sequence: Vec<usize>,
    pub plateaus: Vec<(usize, usize)>,
    /// Plateaus merged by loss level.
    pub levels: Vec<(usize, usize)>,
    /// Starts in region 4, later visits 5 and then 6, with one plateau that
    /// begins before region 5 is entered and a lower one that begins after
    /// region 6 is entered.
    pub success: bool,
}

/// The saddle-to-saddle signature on a recorded toy trajectory: a plateau
/// starting before the first visit of region 5, and a plateau at a lower level
/// starting after the first visit of region 6. `regions[t]` is the region at
/// iteration `t`; `levels` are merged plateaus.
pub fn saddle_signature(losses: &[f64], regions: &[usize], levels: &[(usize, usize)], min_drop: f64) -> bool {
    let first = |r: usize| regions.iter().position(|&x| x == r);
    let (Some(t5), Some(t6)) = (first(5), first(6)) else {
        return false;
    };
    if regions.first() != Some(&4) || t6 < t5 {
        return false;
    }
    levels.iter().any(|&(s1, e1)| {
        s1 < t5
            && levels
                .iter()
                .any(|&(s2, _)| s2 >= t6 && s2 > e1 && losses[s2] <= (1.0 - min_drop) * losses[e1])
    })
}

/// Regions in the order they are first visited.
pub fn first_visits(regions: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut seq = Vec::new();
    for r in regions {
        if !seq.contains(&r) {
            seq.push(r);
        }
    }
    seq
}

/// Whether `needle` occurs in order (not necessarily contiguously) in `hay`.
pub fn is_subsequence(needle: &[usize], hay: &[usize]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Draws standard-normal toy parameters until they land in `region`.
pub fn sample_toy_in_region(region: usize, rng: &mut ChaCha8Rng) -> Result<Params> {
    if !(1..=6).contains(&region) {
        return Err(Error::Domain(format!("region {region} outside 1..=6")));
    }
    let arch = toy_arch();
    loop {
        let p = init_params_with(&arch, InitScheme::StdNormal, rng);
        if toy_region_of(&p) == region {
            return Ok(p);
        }
    }
}

pub fn run_saddle(cfg: &SaddleConfig) -> Result<Vec<SaddleRun>> {
    let arch = toy_arch();
    let x = toy_sample();
    let objective = Objective::mse(DMatrix::from_row_slice(1, 3, &cfg.targets));
    let runs: Vec<Result<SaddleRun>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let theta0 = sample_toy_in_region(cfg.start_region, &mut run_rng(seed, 0))?;
            let train = TrainConfig {
                optimizer: Optimizer::Gd { lr: cfg.lr },
                iterations: cfg.iterations,
                record_every: 1,
                stop_loss: None,
                seed,
            };
            let traj = run_trajectory(&arch, &theta0, &x, &objective, &train, &ToyHook)?;
            let regions: Vec<usize> = traj
                .snapshots
                .iter()
                .filter_map(|s| s.annotation.region.as_deref()?.parse::<usize>().ok())
                .collect();
            let region_sequence = first_visits(regions.iter().copied());
            let plateaus = detect_plateaus(&traj, cfg.plateau_window, cfg.plateau_rel);
            let levels = plateau_levels(&traj.losses, &plateaus, cfg.level_drop);
            let success = saddle_signature(&traj.losses, &regions, &levels, cfg.level_drop);
            Ok(SaddleRun {
                seed,
                trajectory: traj,
                region_sequence,
                plateaus,
                levels,
                success,
            })
        })
        .collect();
    runs.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Piecewise-linear recovery
// ---------------------------------------------------------------------------

/// Continuous three-segment target on `[1, 20]`: zero at 1, slopes `1, -1, 0.5`
/// with breakpoints at 7 and 14, scaled by 0.1.
pub fn cpl_target(x: f64) -> f64 {
    let y = if x <= 7.0 {
        x - 1.0
    } else if x <= 14.0 {
        6.0 - (x - 7.0)
    } else {
        -1.0 + 0.5 * (x - 14.0)
    };
    0.1 * y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CplConfig {
    pub runs: usize,
    pub n_points: usize,
    pub width: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub stop_loss: f64,
    pub data_seed: u64,
    pub seed: u64,
    pub grid: usize,
    pub interval: (f64, f64),
}

impl Default for CplConfig {
    fn default() -> Self {
        Self {
            runs: 50,
            n_points: 25,
            width: 10,
            lr: 0.01,
            max_steps: 200_000,
            stop_loss: 1e-5,
            data_seed: 0,
            seed: 0,
            grid: 10_000,
            interval: (1.0, 20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CplRun {
    pub run: usize,
    pub final_loss: f64,
    pub steps: usize,
    pub local_dim: usize,
    pub closed_form_rank: usize,
    pub seen_regions: usize,
    pub total_regions: usize,
    pub l0_neurons: usize,
    pub l0_linear: usize,
    pub bounds_hold: bool,
    pub margin: f64,
}

/// Inputs drawn uniformly on the interval, and their targets.
pub fn cpl_data(cfg: &CplConfig) -> Result<(OrderedSample, DMatrix<f64>)> {
    let mut rng = run_rng(cfg.data_seed, u64::MAX);
    let dist = Uniform::new(cfg.interval.0, cfg.interval.1).map_err(|e| Error::Config(e.to_string()))?;
    let xs: Vec<f64> = (0..cfg.n_points).map(|_| dist.sample(&mut rng)).collect();
    let sorted = OrderedSample::new(&xs)?;
    let y = DMatrix::from_iterator(1, sorted.len(), sorted.xs().iter().map(|&x| cpl_target(x)));
    Ok((sorted, y))
}

pub fn run_cpl_recovery(cfg: &CplConfig) -> Result<Vec<CplRun>> {
    if cfg.runs == 0 || cfg.width == 0 || cfg.n_points < 2 || cfg.grid < 2 {
        return Err(Error::Config("runs, width, points and grid must be positive".into()));
    }
    let arch = Architecture::new(vec![1, cfg.width, 1], OutputActivation::Identity)?;
    let (xs, y) = cpl_data(cfg)?;
    let x = xs.sample();
    let objective = Objective::mse(y);
    let (lo, hi) = cfg.interval;
    let grid: Vec<f64> = (0..cfg.grid)
        .map(|k| lo + (hi - lo) * k as f64 / (cfg.grid - 1) as f64)
        .collect();
    let grid = Sample::from_scalars(&grid)?;
    let train = TrainConfig {
        optimizer: Optimizer::Adam(AdamConfig::with_lr(cfg.lr)),
        iterations: cfg.max_steps,
        record_every: cfg.max_steps,
        stop_loss: Some(cfg.stop_loss),
        seed: cfg.seed,
    };
    let runs: Vec<Result<CplRun>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let theta0 = init_params_with(&arch, InitScheme::HeNormal, &mut run_rng(cfg.seed, run as u64));
            let traj = run_trajectory(&arch, &theta0, &x, &objective, &train, &NoHook)?;
            if traj.aborted {
                return Err(Error::Numeric(format!("run {run} diverged")));
            }
            let p = &traj.final_params;
            let report = local_dimension_sub_batched(&arch, p, &x, TolPolicy::Spectral, usize::MAX)?;
            let an = analyze(&arch, p, &xs)?;
            let total = seen_regions(&activation_pattern(&forward(&arch, p, &grid)?));
            Ok(CplRun {
                run,
                final_loss: traj.final_loss(),
                steps: traj.steps(),
                local_dim: report.rank,
                closed_form_rank: an.closed_form_rank,
                seen_regions: an.seen_regions,
                total_regions: total,
                l0_neurons: an.l0_neurons,
                l0_linear: an.l0_linear,
                bounds_hold: shallow_bounds_check(&an),
                margin: report.margin,
            })
        })
        .collect();
    runs.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Width and epoch sweeps on a synthetic classification task
// ---------------------------------------------------------------------------

/// Labelled classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Sample,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.classes, self.labels.len());
        for (i, &l) in self.labels.iter().enumerate() {
            y[(l, i)] = 1.0;
        }
        y
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: Sample::new(self.x.matrix().select_columns(idx))?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub classes: usize,
    /// Distance of the class centres from the origin.
    pub radius: f64,
    pub std: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            radius: 2.0,
            std: 1.0,
        }
    }
}

/// Two-dimensional Gaussian blobs with centres evenly spaced on a circle;
/// labels cycle through the classes.
pub fn gaussian_blobs(cfg: &BlobsConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let noise = Normal::new(0.0, cfg.std).map_err(|e| Error::Config(e.to_string()))?;
    let mut m = DMatrix::zeros(2, n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.classes;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / cfg.classes as f64;
        m[(0, i)] = cfg.radius * angle.cos() + noise.sample(rng);
        m[(1, i)] = cfg.radius * angle.sin() + noise.sample(rng);
        labels.push(c);
    }
    Ok(Dataset {
        x: Sample::new(m)?,
        labels,
        classes: cfg.classes,
    })
}

/// Loads the first `n_train` / `n_test` examples of IDX image and label files
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-...`), with
/// pixels scaled to `[0, 1]`.
pub fn load_idx_dataset(dir: &Path, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let load = |images: &str, labels: &str, n: usize| -> Result<Dataset> {
        let img = read_idx_file(&dir.join(images))?;
        let lab = read_idx_file(&dir.join(labels))?;
        if img.dims.is_empty() || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
            return Err(Error::Config(format!("{images} and {labels} do not match")));
        }
        let dim: usize = img.dims[1..].iter().product();
        let n = n.min(img.dims[0]);
        let x = DMatrix::from_fn(dim, n, |r, c| img.data[c * dim + r] / 255.0);
        let labels: Vec<usize> = lab.data[..n].iter().map(|&l| l as usize).collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
        Ok(Dataset {
            x: Sample::new(x)?,
            labels,
            classes,
        })
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", n_train)?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", n_test)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Epochs after which ranks and losses are recorded; 0 means before training.
    pub record_epochs: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub blobs: BlobsConfig,
    pub policy: TolPolicy,
    pub sub_batch: usize,
    /// Also compute the rank on the test sample (expensive for wide nets).
    pub test_rank: bool,
}

impl SweepConfig {
    /// Several widths, one seed, rank on train and test at the end of training.
    pub fn width_default() -> Self {
        Self {
            widths: vec![2, 4, 8, 16, 24],
            seeds: vec![0],
            epochs: 100,
            record_epochs: vec![100],
            lr: 0.1,
            batch: 256,
            n_train: 600,
            n_test: 2000,
            data_seed: 0,
            blobs: BlobsConfig::default(),
            policy: TolPolicy::Spectral,
            sub_batch: crate::jacobian::DEFAULT_SUB_BATCH,
            test_rank: true,
        }
    }

    /// One width, ten seeds, train rank along training.
    pub fn epoch_default() -> Self {
        Self {
            widths: vec![16],
            seeds: (0..10).collect(),
            epochs: 300,
            record_epochs: vec![0, 1, 5, 25, 100, 300],
            test_rank: false,
            ..Self::width_default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub width: usize,
    pub seed: u64,
    pub epoch: usize,
    pub rank_train: usize,
    pub rank_test: Option<usize>,
    pub max_rank: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
}

fn loss_and_error(arch: &Architecture, params: &Params, data: &Dataset) -> Result<(f64, f64)> {
    let trace = forward(arch, params, &data.x)?;
    let obj = Objective::cross_entropy(data.one_hot());
    let loss = obj.value(&trace);
    let wrong = trace
        .output
        .column_iter()
        .zip(&data.labels)
        .filter(|(col, &l)| col.argmax().0 != l)
        .count();
    Ok((loss, wrong as f64 / data.len() as f64))
}

/// Trains one network with mini-batch SGD on cross-entropy, recording at the
/// requested epochs.
pub fn train_classifier(
    cfg: &SweepConfig,
    width: usize,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<SweepRecord>> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let arch = Architecture::new(
        vec![train.x.dim(), width, width, width, train.classes],
        OutputActivation::Softmax,
    )?;
    let mut rng = run_rng(seed, width as u64);
    let mut params = init_params_with(&arch, InitScheme::GlorotUniformZeroBias, &mut rng);
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let record = |epoch: usize, params: &Params| -> Result<SweepRecord> {
        let rank_train = local_dimension_sub_batched(&arch, params, &train.x, cfg.policy, cfg.sub_batch)?.rank;
        let rank_test = if cfg.test_rank {
            Some(local_dimension_sub_batched(&arch, params, &test.x, cfg.policy, cfg.sub_batch)?.rank)
        } else {
            None
        };
        let (train_loss, train_error) = loss_and_error(&arch, params, train)?;
        let (test_loss, test_error) = loss_and_error(&arch, params, test)?;
        Ok(SweepRecord {
            width,
            seed,
            epoch,
            rank_train,
            rank_test,
            max_rank: arch.max_rank(),
            train_loss,
            test_loss,
            train_error,
            test_error,
        })
    };
    if cfg.record_epochs.contains(&0) {
        records.push(record(0, &params)?);
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch = train.subset(chunk)?;
            let obj = Objective::cross_entropy(batch.one_hot());
            let (_, g) = loss_and_gradient(&arch, &params, &batch.x, &obj)?;
            let theta: Vec<f64> = params.to_flat().iter().zip(&g).map(|(t, g)| t - cfg.lr * g).collect();
            params = Params::from_flat(&arch, &theta)?;
        }
        if cfg.record_epochs.contains(&epoch) {
            records.push(record(epoch, &params)?);
        }
    }
    Ok(records)
}

/// Synthetic train and test sets for a sweep.
pub fn sweep_data(cfg: &SweepConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = run_rng(cfg.data_seed, u64::MAX);
    let train = gaussian_blobs(&cfg.blobs, cfg.n_train, &mut rng)?;
    let test = gaussian_blobs(&cfg.blobs, cfg.n_test, &mut rng)?;
    Ok((train, test))
}

/// Runs every `(width, seed)` pair on the given data.
pub fn run_sweep(cfg: &SweepConfig, train: &Dataset, test: &Dataset) -> Result<Vec<SweepRecord>> {
    if cfg.widths.is_empty() || cfg.seeds.is_empty() || cfg.epochs == 0 {
        return Err(Error::Config("need at least one width, one seed and one epoch".into()));
    }
    let jobs: Vec<(usize, u64)> = cfg
        .widths
        .iter()
        .flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let out: Vec<Result<Vec<SweepRecord>>> = jobs
        .par_iter()
        .map(|&(w, s)| train_classifier(cfg, w, s, train, test))
        .collect();
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn write_sweep_csv<W: std::io::Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "width", "seed", "epoch", "rank_train", "rank_test", "max_rank", "train_loss", "test_loss", "train_error",
        "test_error",
    ])?;
    for r in records {
        w.write_record([
            r.width.to_string(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.rank_train.to_string(),
            r.rank_test.map(|x| x.to_string()).unwrap_or_default(),
            r.max_rank.to_string(),
            format!("{:?}", r.train_loss),
            format!("{:?}", r.test_loss),
            format!("{:?}", r.train_error),
            format!("{:?}", r.test_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cone index of each neuron, rendered as in trajectory files.
pub fn shallow_label(params: &Params, xs: &OrderedSample) -> String {
    let w = &params.weights[0];
    let b = &params.biases[0];
    (0..w.nrows())
        .map(|k| classify_cone(w[(k, 0)], b[k], xs).to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Region number of a toy cone label, for callers holding labels.
pub fn toy_region_from_label(label: &str) -> Option<usize> {
    toy_region_of_cone(label.parse().ok()?).ok()
}
