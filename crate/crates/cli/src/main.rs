use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use localdim::experiments::{
    self, load_idx_dataset, run_cpl_recovery, run_saddle, run_sweep, run_toy_table, sweep_data, write_sweep_csv,
    CplConfig, SaddleConfig, SweepConfig, ToyTableConfig,
};
use localdim::io::{read_model_file, read_sample_file, write_trajectory_csv};
use localdim::jacobian::{jacobian_sub_batched, DEFAULT_SUB_BATCH};
use localdim::localdim::{local_dimension_sub_batched, TolPolicy};
use localdim::shallow::{analyze, OrderedSample};

#[derive(Parser)]
#[command(name = "localdim", version, about = "Local dimension of ReLU networks: rank of the parameter Jacobian")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    /// sigma_max * max(rows, cols) * machine epsilon
    Spectral,
    /// widest gap between consecutive singular values (ratio >= 1e3), else spectral
    Gap,
}

impl From<Policy> for TolPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Spectral => TolPolicy::Spectral,
            Policy::Gap => TolPolicy::gap(),
        }
    }
}

#[derive(Args)]
struct RankOpts {
    #[arg(long, value_enum, default_value = "spectral")]
    tol_policy: Policy,
    /// Examples per Jacobian block.
    #[arg(long, default_value_t = DEFAULT_SUB_BATCH)]
    sub_batch: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Local dimension of a model on a sample; prints a JSON report
    /// {rank, max_rank, margin, tolerance, singular_values}.
    ///
    /// The model is JSON {"widths", "out_act", "weights", "biases"} with
    /// row-major weight matrices. The sample CSV has one column per example
    /// and one row per input coordinate; a non-numeric first row is a header.
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[command(flatten)]
        rank: RankOpts,
        /// Also write the Jacobian as CSV, columns named L{l}.w{r}.{c} / L{l}.b{r}.
        #[arg(long)]
        jacobian_csv: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form analysis of a (1, N1, 1) identity-output model; prints JSON
    /// {alpha, closed_form_rank, seen_regions, l0_neurons, l0_linear,
    /// region_bounds, neuron_bounds, bounds_hold}. Duplicate inputs are dropped.
    ShallowAnalyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Region statistics of gradient descent on the three-point example.
    ///
    /// Writes table.csv (row, runs, U1..U6: initial, final and conditional
    /// region frequencies), runs.csv (run, init_region, final_region,
    /// final_loss) and summary.json.
    ToyTable {
        #[arg(long, default_value_t = 10_000)]
        runs: usize,
        #[arg(long, default_value_t = 300)]
        iterations: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Saddle-to-saddle runs with targets (1, 0, 5), started in region 4.
    ///
    /// Writes one trajectory CSV per seed (iteration, loss, region, local_dim,
    /// seen_regions, proj_x, proj_y) and runs.json with region sequences and
    /// plateaus.
    Saddle {
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        iterations: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovery of a three-segment piecewise-linear target by a width-10
    /// shallow network trained with full-batch Adam.
    ///
    /// Writes runs.csv (run, final_loss, steps, local_dim, closed_form_rank,
    /// seen_regions, total_regions, l0_neurons, l0_linear, bounds_hold, margin)
    /// and summary.json.
    Cpl {
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 200_000)]
        max_steps: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Final train/test ranks across widths of a (d, w, w, w, k) softmax network.
    ///
    /// Writes sweep.csv (width, seed, epoch, rank_train, rank_test, max_rank,
    /// train_loss, test_loss, train_error, test_error) and summary.json.
    WidthSweep {
        #[command(flatten)]
        sweep: SweepOpts,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,24")]
        widths: Vec<usize>,
    },
    /// Train rank along training for one width and several seeds; same CSV
    /// columns as width-sweep.
    EpochSweep {
        #[command(flatten)]
        sweep: SweepOpts,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,25,100,300")]
        record: Vec<usize>,
    },
}

#[derive(Args)]
struct SweepOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    /// Directory with IDX files (train-images-idx3-ubyte, ...) to use instead
    /// of the synthetic data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    rank: RankOpts,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn out_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn run_sweep_cmd(opts: &SweepOpts, mut cfg: SweepConfig, kind: &str) -> Result<()> {
    cfg.policy = opts.rank.tol_policy.into();
    cfg.sub_batch = opts.rank.sub_batch;
    cfg.n_train = opts.n_train;
    cfg.n_test = opts.n_test;
    cfg.data_seed = opts.seed;
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    let (train, test) = match &opts.data_dir {
        Some(dir) => load_idx_dataset(dir, cfg.n_train, cfg.n_test)?,
        None => sweep_data(&cfg)?,
    };
    out_dir(&opts.out)?;
    let records = run_sweep(&cfg, &train, &test)?;
    write_sweep_csv(&records, csv_file(&opts.out, "sweep.csv")?)?;
    let over = records.iter().filter(|r| r.rank_train > r.max_rank).count();
    write_json(
        &opts.out.join("summary.json"),
        &json!({
            "experiment": kind,
            "config": cfg,
            "input_dim": train.x.dim(),
            "classes": train.classes,
            "records": records.len(),
            "rank_above_max": over,
        }),
    )?;
    for r in &records {
        println!(
            "width {:>3} seed {:>2} epoch {:>4}: rank_train {:>5} rank_test {:>5} max {:>5} train_err {:.3} test_err {:.3}",
            r.width,
            r.seed,
            r.epoch,
            r.rank_train,
            r.rank_test.map(|x| x.to_string()).unwrap_or_else(|| "-".into()),
            r.max_rank,
            r.train_error,
            r.test_error
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rank {
            model,
            sample,
            rank,
            jacobian_csv,
            out,
        } => {
            let (arch, params) = read_model_file(&model).with_context(|| format!("loading {}", model.display()))?;
            let x = read_sample_file(&sample).with_context(|| format!("loading {}", sample.display()))?;
            let report = local_dimension_sub_batched(&arch, &params, &x, rank.tol_policy.into(), rank.sub_batch)?;
            if let Some(path) = jacobian_csv {
                let j = jacobian_sub_batched(&arch, &params, &x, rank.sub_batch)?;
                j.write_csv(&arch, BufWriter::new(File::create(&path)?))?;
            }
            if report.margin == 0.0 {
                eprintln!("warning: a hidden pre-activation is exactly zero; the Jacobian uses relu'(0) = 0");
            }
            emit(out.as_deref(), &report.to_json()?)
        }
        Command::ShallowAnalyze { model, sample, out } => {
            let (arch, params) = read_model_file(&model)?;
            let x = read_sample_file(&sample)?;
            if x.dim() != 1 {
                bail!("shallow analysis needs scalar inputs, sample has dimension {}", x.dim());
            }
            let (xs, dropped) = OrderedSample::dedup(x.matrix().as_slice())?;
            if dropped > 0 {
                eprintln!("warning: dropped {dropped} duplicate input(s); the rank is unaffected");
            }
            let an = analyze(&arch, &params, &xs)?;
            let mut v = serde_json::to_value(&an)?;
            v["bounds_hold"] = json!(localdim::shallow::shallow_bounds_check(&an));
            emit(out.as_deref(), &serde_json::to_string_pretty(&v)?)
        }
        Command::ToyTable {
            runs,
            iterations,
            lr,
            seed,
            out,
        } => {
            let cfg = ToyTableConfig {
                runs,
                iterations,
                lr,
                seed,
                ..ToyTableConfig::default()
            };
            out_dir(&out)?;
            let table = run_toy_table(&cfg)?;
            table.write_csv(csv_file(&out, "table.csv")?)?;
            let mut w = csv::Writer::from_writer(csv_file(&out, "runs.csv")?);
            w.write_record(["run", "init_region", "final_region", "final_loss"])?;
            for r in &table.runs {
                w.write_record([
                    r.run.to_string(),
                    r.init_region.to_string(),
                    r.final_region.to_string(),
                    format!("{:?}", r.final_loss),
                ])?;
            }
            w.flush()?;
            write_json(
                &out.join("summary.json"),
                &json!({
                    "experiment": "toy-table",
                    "config": cfg,
                    "init_counts": table.init_counts,
                    "final_counts": table.final_counts,
                    "transitions": table.transitions,
                }),
            )?;
            for (name, n, p) in table.rows() {
                println!("{name:<36} {n:>6}  {}", p.map(|x| format!("{x:.3}")).join("  "));
            }
            Ok(())
        }
        Command::Saddle {
            seeds,
            seed,
            iterations,
            lr,
            out,
        } => {
            let cfg = SaddleConfig {
                seeds: (seed..seed + seeds).collect(),
                iterations,
                lr,
                ..SaddleConfig::default()
            };
            out_dir(&out)?;
            let runs = run_saddle(&cfg)?;
            let mut manifest = Vec::new();
            for r in &runs {
                let name = format!("trajectory_seed{}.csv", r.seed);
                write_trajectory_csv(&r.trajectory, csv_file(&out, &name)?)?;
                manifest.push(json!({
                    "seed": r.seed,
                    "file": name,
                    "region_sequence": r.region_sequence,
                    "plateaus": r.plateaus,
                    "plateau_levels": r.levels,
                    "final_loss": r.trajectory.final_loss(),
                    "success": r.success,
                }));
                println!(
                    "seed {:>3}: regions {:?} plateau levels {:?} final loss {:.4}{}",
                    r.seed,
                    r.region_sequence,
                    r.levels,
                    r.trajectory.final_loss(),
                    if r.success { "  <- 4 -> 5 -> 6" } else { "" }
                );
            }
            write_json(&out.join("runs.json"), &json!({ "experiment": "saddle", "config": cfg, "runs": manifest }))
        }
        Command::Cpl {
            runs,
            max_steps,
            data_seed,
            seed,
            out,
        } => {
            let cfg = CplConfig {
                runs,
                max_steps,
                data_seed,
                seed,
                ..CplConfig::default()
            };
            out_dir(&out)?;
            let results = run_cpl_recovery(&cfg)?;
            let mut w = csv::Writer::from_writer(csv_file(&out, "runs.csv")?);
            w.write_record([
                "run",
                "final_loss",
                "steps",
                "local_dim",
                "closed_form_rank",
                "seen_regions",
                "total_regions",
                "l0_neurons",
                "l0_linear",
                "bounds_hold",
                "margin",
            ])?;
            for r in &results {
                w.write_record([
                    r.run.to_string(),
                    format!("{:?}", r.final_loss),
                    r.steps.to_string(),
                    r.local_dim.to_string(),
                    r.closed_form_rank.to_string(),
                    r.seen_regions.to_string(),
                    r.total_regions.to_string(),
                    r.l0_neurons.to_string(),
                    r.l0_linear.to_string(),
                    r.bounds_hold.to_string(),
                    format!("{:?}", r.margin),
                ])?;
            }
            w.flush()?;
            let converged = results.iter().filter(|r| r.final_loss < cfg.stop_loss).count();
            let (xs, _) = experiments::cpl_data(&cfg)?;
            let summary = json!({
                "experiment": "cpl",
                "config": cfg,
                "inputs": xs.xs(),
                "converged": converged,
                "max_local_dim": results.iter().map(|r| r.local_dim).max(),
                "max_seen_regions": results.iter().map(|r| r.seen_regions).max(),
                "all_bounds_hold": results.iter().all(|r| r.bounds_hold),
            });
            write_json(&out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::WidthSweep { sweep, widths } => {
            let cfg = SweepConfig {
                widths,
                ..SweepConfig::width_default()
            };
            run_sweep_cmd(&sweep, cfg, "width-sweep")
        }
        Command::EpochSweep {
            sweep,
            width,
            seeds,
            record,
        } => {
            let mut cfg = SweepConfig {
                widths: vec![width],
                seeds: (0..seeds).collect(),
                record_epochs: record,
                ..SweepConfig::epoch_default()
            };
            cfg.epochs = sweep.epochs.unwrap_or_else(|| cfg.record_epochs.iter().copied().max().unwrap_or(1).max(1));
            run_sweep_cmd(&sweep, cfg, "epoch-sweep")
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
