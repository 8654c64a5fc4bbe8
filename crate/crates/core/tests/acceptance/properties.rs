//! Randomized invariants of every module, run through proptest's runner with a
//! fixed RNG so failures reproduce. Most strategies draw a seed and build the
//! network from it; that keeps architectures, parameters and samples coherent.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use localdim::jacobian::{jacobian_sub_batched, vjp_preact};
use localdim::shallow::{
    analyze, classify_cone, cone_coordinates, l_second_set, shallow_bounds_check, OrderedSample,
};
use localdim::train::{
    loss, loss_and_gradient, run_trajectory, NoHook, Objective, Optimizer, TrainConfig,
};
use localdim::{
    activation_pattern, boundary_margin, forward, jacobian, local_dimension, permute, rescale, Architecture,
    OutputActivation, Params, Sample, TolPolicy,
};

use super::oracle;

pub struct Outcome {
    pub name: &'static str,
    pub cases: u32,
    pub failure: Option<String>,
}

fn suite<S: Strategy>(
    name: &'static str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Outcome {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let failure = runner.run(&strategy, test).err().map(|e| e.to_string().split_whitespace().collect::<Vec<_>>().join(" "));
    Outcome { name, cases, failure }
}

/// A random network and sample built from one seed.
struct Case {
    arch: Architecture,
    params: Params,
    x: Sample,
    rng: ChaCha8Rng,
}

fn case(seed: u64, softmax: bool, max_n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=4);
    let mut widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
    if softmax {
        widths[depth] = widths[depth].max(2);
    }
    let act = if softmax { OutputActivation::Softmax } else { OutputActivation::Identity };
    let arch = Architecture::new(widths, act).unwrap();
    let flat: Vec<f64> = (0..arch.param_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let params = Params::from_flat(&arch, &flat).unwrap();
    let n = rng.random_range(1..=max_n);
    let x = Sample::new(DMatrix::from_fn(arch.input_dim(), n, |_, _| StandardNormal.sample(&mut rng))).unwrap();
    Case { arch, params, x, rng }
}

fn symmetry_moves(c: &mut Case) -> Params {
    use rand::seq::SliceRandom;
    let lambdas: Vec<Vec<f64>> = c
        .arch
        .hidden_widths()
        .iter()
        .map(|&w| (0..w).map(|_| c.rng.random_range(-2.0f64..2.0).exp()).collect())
        .collect();
    let perms: Vec<Vec<usize>> = c
        .arch
        .hidden_widths()
        .iter()
        .map(|&w| {
            let mut p: Vec<usize> = (0..w).collect();
            p.shuffle(&mut c.rng);
            p
        })
        .collect();
    permute(&c.arch, &rescale(&c.arch, &c.params, &lambdas).unwrap(), &perms).unwrap()
}

fn rank(c: &Case, params: &Params, x: &Sample) -> usize {
    local_dimension(&c.arch, params, x, TolPolicy::Spectral).unwrap().rank
}

fn shallow_case(seed: u64) -> (Architecture, Params, OrderedSample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(1..=10);
    let n = rng.random_range(1..=20);
    let arch = Architecture::new(vec![1, width, 1], OutputActivation::Identity).unwrap();
    let flat: Vec<f64> = (0..arch.param_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let params = Params::from_flat(&arch, &flat).unwrap();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    (arch, params, OrderedSample::new(&values).unwrap())
}

fn net_suites() -> Vec<Outcome> {
    vec![
        suite("net: outputs invariant under rescaling and permutation", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let mut c = case(s, sm, 8);
            let moved = symmetry_moves(&mut c);
            let a = forward(&c.arch, &c.params, &c.x).unwrap().output;
            let b = forward(&c.arch, &moved, &c.x).unwrap().output;
            prop_assert!((&a - &b).amax() <= 1e-9 * (1.0 + a.amax()), "diff {}", (&a - &b).amax());
            Ok(())
        }),
        suite("net: activations are relu of pre-activations; output matches the oracle", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let c = case(s, sm, 8);
            let t = forward(&c.arch, &c.params, &c.x).unwrap();
            for k in 1..c.arch.depth() {
                prop_assert_eq!(&t.acts[k], &t.preacts[k - 1].map(|v| v.max(0.0)));
            }
            let theta = c.params.to_flat();
            let want = oracle::eval_stacked(c.arch.widths(), c.arch.out_act(), &theta, c.x.matrix());
            for (got, want) in t.output.iter().zip(&want) {
                prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
            Ok(())
        }),
        suite("net: activation pattern of an example ignores the other examples", 100, any::<u64>(), |s| {
            let c = case(s, false, 8);
            let full = activation_pattern(&forward(&c.arch, &c.params, &c.x).unwrap());
            for i in 0..c.x.len() {
                let alone = activation_pattern(&forward(&c.arch, &c.params, &c.x.columns(i, 1)).unwrap());
                prop_assert_eq!(alone.column(0), full.column(i));
            }
            Ok(())
        }),
        suite("net: softmax outputs are positive and sum to one", 100, (any::<u64>(), 1.0f64..50.0), |(s, scale)| {
            let mut c = case(s, true, 8);
            let flat: Vec<f64> = c.params.to_flat().iter().map(|t| t * scale).collect();
            c.params = Params::from_flat(&c.arch, &flat).unwrap();
            let out = forward(&c.arch, &c.params, &c.x).unwrap().output;
            for col in out.column_iter() {
                prop_assert!(col.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((col.sum() - 1.0).abs() <= 1e-12);
            }
            Ok(())
        }),
    ]
}

fn jacobian_suites() -> Vec<Outcome> {
    vec![
        suite("jacobian: backprop equals central differences away from boundaries", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let c = case(s, sm, 5);
            prop_assume!(boundary_margin(&forward(&c.arch, &c.params, &c.x).unwrap()) > 1e-3);
            let j = jacobian(&c.arch, &c.params, &c.x).unwrap();
            let fd = oracle::central_differences(c.arch.widths(), c.arch.out_act(), &c.params.to_flat(), c.x.matrix(), 1e-6);
            let err = (j.data() - &fd).amax() / fd.amax().max(1.0);
            prop_assert!(err <= 1e-6, "relative error {err:e}");
            Ok(())
        }),
        suite("jacobian: vector-Jacobian product is the transpose product", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let mut c = case(s, sm, 6);
            let trace = forward(&c.arch, &c.params, &c.x).unwrap();
            let (k, n) = (c.arch.output_dim(), c.x.len());
            let seed = DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(&mut c.rng));
            // Seeds live on the last pre-activation, so compare against the
            // identity-output Jacobian of the same parameters.
            let lin = Architecture::new(c.arch.widths().to_vec(), OutputActivation::Identity).unwrap();
            let j = jacobian(&lin, &c.params, &c.x).unwrap();
            let stacked = nalgebra::DVector::from_iterator(k * n, (0..n).flat_map(|i| (0..k).map(move |v| (i, v))).map(|(i, v)| seed[(v, i)]));
            let want = j.data().transpose() * stacked;
            let got = vjp_preact(&c.params, &trace, &seed);
            for (g, w) in got.iter().zip(want.iter()) {
                prop_assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()));
            }
            Ok(())
        }),
        suite("jacobian: repeated calls are bit-identical; sub-batching only reassociates", 100, (any::<u64>(), any::<bool>(), 1usize..7), |(s, sm, b)| {
            let c = case(s, sm, 12);
            let full = jacobian(&c.arch, &c.params, &c.x).unwrap();
            let again = jacobian(&c.arch, &c.params, &c.x).unwrap();
            prop_assert_eq!(full.data(), again.data());
            // Block shapes change the matrix-product kernels, hence rounding.
            let blocked = jacobian_sub_batched(&c.arch, &c.params, &c.x, b).unwrap();
            let diff = (full.data() - blocked.data()).amax();
            prop_assert!(diff <= 1e-12 * full.data().amax().max(1.0), "block {b}: diff {diff:e}");
            Ok(())
        }),
    ]
}

fn localdim_suites() -> Vec<Outcome> {
    vec![
        suite("localdim: rank invariant under rescaling and permutation", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let mut c = case(s, sm, 10);
            let moved = symmetry_moves(&mut c);
            prop_assert_eq!(rank(&c, &c.params, &c.x), rank(&c, &moved, &c.x));
            Ok(())
        }),
        suite("localdim: rank bounded by max rank and by rows", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let c = case(s, sm, 40);
            let r = rank(&c, &c.params, &c.x);
            prop_assert!(r <= c.arch.max_rank());
            prop_assert!(r <= c.x.len() * c.arch.output_dim());
            Ok(())
        }),
        suite("localdim: adding examples never lowers the rank", 100, any::<u64>(), |s| {
            let mut c = case(s, false, 10);
            let extra = Sample::new(DMatrix::from_fn(c.arch.input_dim(), 3, |_, _| StandardNormal.sample(&mut c.rng))).unwrap();
            let bigger = c.x.concat(&extra).unwrap();
            prop_assert!(rank(&c, &c.params, &bigger) >= rank(&c, &c.params, &c.x));
            Ok(())
        }),
        suite("localdim: duplicated examples leave the rank unchanged", 100, any::<u64>(), |s| {
            let c = case(s, false, 10);
            let doubled = c.x.concat(&c.x).unwrap();
            prop_assert_eq!(rank(&c, &c.params, &doubled), rank(&c, &c.params, &c.x));
            Ok(())
        }),
        suite("localdim: rank is constant on a small ball inside a region", 100, any::<u64>(), |s| {
            let mut c = case(s, false, 8);
            let margin = boundary_margin(&forward(&c.arch, &c.params, &c.x).unwrap());
            prop_assume!(margin > 1e-3);
            let eps = 1e-2 * margin;
            let flat: Vec<f64> = c.params.to_flat().iter().map(|t| t + eps * c.rng.random_range(-1.0..1.0) / (c.arch.param_count() as f64).sqrt()).collect();
            let near = Params::from_flat(&c.arch, &flat).unwrap();
            prop_assert_eq!(
                activation_pattern(&forward(&c.arch, &near, &c.x).unwrap()),
                activation_pattern(&forward(&c.arch, &c.params, &c.x).unwrap())
            );
            prop_assert_eq!(rank(&c, &near, &c.x), rank(&c, &c.params, &c.x));
            Ok(())
        }),
        suite("localdim: spectral rank agrees with an elimination rank", 100, (any::<u64>(), any::<bool>()), |(s, sm)| {
            let c = case(s, sm, 10);
            let j = jacobian(&c.arch, &c.params, &c.x).unwrap();
            let r = rank(&c, &c.params, &c.x);
            // Elimination is only trusted when the spectrum has a clear gap.
            let sv = localdim::localdim::singular_values(j.data()).unwrap();
            let gap_ok = r == 0 || r == sv.len() || sv[r] < 1e-9 * sv[0] && sv[r - 1] > 1e-6 * sv[0];
            prop_assume!(gap_ok);
            prop_assert_eq!(r, oracle::elimination_rank(j.data(), 1e-8));
            Ok(())
        }),
    ]
}

/// Pattern of `[w x_j + b >= 0]` encoded by cone `i`, decoded independently.
fn cone_pattern(i: usize, n: usize) -> Vec<bool> {
    match i {
        1 => vec![true; n],
        i if i <= n => (0..n).map(|j| j + 1 >= i).collect(),
        i if i == n + 1 => vec![false; n],
        i => (0..n).map(|j| j + 1 < i - n).collect(),
    }
}

fn shallow_suites() -> Vec<Outcome> {
    vec![
        suite("shallow: closed-form rank equals the numerical rank", 200, any::<u64>(), |s| {
            let (arch, params, xs) = shallow_case(s);
            prop_assume!(boundary_margin(&forward(&arch, &params, &xs.sample()).unwrap()) > 1e-6);
            let numeric = local_dimension(&arch, &params, &xs.sample(), TolPolicy::Spectral).unwrap().rank;
            prop_assert_eq!(analyze(&arch, &params, &xs).unwrap().closed_form_rank, numeric);
            Ok(())
        }),
        suite("shallow: every (w, b) lies in the cone it is classified into", 100, (2usize..12, any::<u64>()), |(n, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let xs = OrderedSample::new(&values).unwrap();
            for _ in 0..100 {
                let (w, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                let i = classify_cone(w, b, &xs);
                let pattern: Vec<bool> = xs.xs().iter().map(|&x| w * x + b >= 0.0).collect();
                prop_assert_eq!(&cone_pattern(i, n), &pattern, "cone {} for ({}, {})", i, w, b);
                let (lambda, t) = cone_coordinates(i, w, b, &xs).unwrap().expect("n >= 2");
                prop_assert!(lambda >= -1e-12, "lambda {lambda}");
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&t), "t {t}");
            }
            Ok(())
        }),
        suite("shallow: cones and closed form are invariant under positive scaling", 100, (any::<u64>(), 0.01f64..100.0), |(s, k)| {
            let (arch, params, xs) = shallow_case(s);
            let w = &params.weights[0];
            let b = &params.biases[0];
            for r in 0..w.nrows() {
                prop_assert_eq!(classify_cone(w[(r, 0)], b[r], &xs), classify_cone(k * w[(r, 0)], k * b[r], &xs));
            }
            let lambdas = vec![vec![k; w.nrows()]];
            let scaled = rescale(&arch, &params, &lambdas).unwrap();
            prop_assert_eq!(
                analyze(&arch, &params, &xs).unwrap().closed_form_rank,
                analyze(&arch, &scaled, &xs).unwrap().closed_form_rank
            );
            Ok(())
        }),
        suite("shallow: both bound chains hold", 200, any::<u64>(), |s| {
            let (arch, params, xs) = shallow_case(s);
            let a = analyze(&arch, &params, &xs).unwrap();
            prop_assert!(shallow_bounds_check(&a), "{a:?}");
            Ok(())
        }),
        suite("shallow: folded threshold set size lies in [|A| - 2, |A|]", 200, any::<u64>(), |s| {
            let (arch, params, xs) = shallow_case(s);
            let a = analyze(&arch, &params, &xs).unwrap();
            let pattern = activation_pattern(&forward(&arch, &params, &xs.sample()).unwrap());
            let seen = (0..pattern.n_examples()).map(|i| pattern.column(i)).collect::<BTreeSet<_>>().len();
            let l2 = l_second_set(&a.alpha, xs.len()).unwrap().len();
            prop_assert!(l2 + 2 >= seen && l2 <= seen, "|L''| = {l2}, |A| = {seen}");
            Ok(())
        }),
    ]
}

fn train_suites() -> Vec<Outcome> {
    vec![
        suite("train: gradients match finite differences of the loss", 100, (any::<u64>(), 0u8..3), |(s, kind)| {
            let mut c = case(s, kind > 0, 6);
            prop_assume!(boundary_margin(&forward(&c.arch, &c.params, &c.x).unwrap()) > 1e-3);
            let (k, n) = (c.arch.output_dim(), c.x.len());
            let objective = match kind {
                0 | 1 => Objective::mse(DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(&mut c.rng))),
                _ => Objective::cross_entropy(DMatrix::from_fn(k, n, |v, i| ((v + i) % k == 0) as u8 as f64)),
            };
            let (_, g) = loss_and_gradient(&c.arch, &c.params, &c.x, &objective).unwrap();
            let theta = c.params.to_flat();
            let h = 1e-6;
            for p in 0..theta.len() {
                let mut t = theta.clone();
                t[p] += h;
                let up = loss(&c.arch, &Params::from_flat(&c.arch, &t).unwrap(), &c.x, &objective).unwrap();
                t[p] -= 2.0 * h;
                let down = loss(&c.arch, &Params::from_flat(&c.arch, &t).unwrap(), &c.x, &objective).unwrap();
                let fd = (up - down) / (2.0 * h);
                prop_assert!((g[p] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "param {p}: {} vs {fd}", g[p]);
            }
            Ok(())
        }),
        suite("train: trajectories are reproducible", 50, (any::<u64>(), any::<bool>()), |(s, adam)| {
            let mut c = case(s, false, 6);
            let objective = Objective::mse(DMatrix::from_fn(c.arch.output_dim(), c.x.len(), |_, _| StandardNormal.sample(&mut c.rng)));
            let optimizer = if adam {
                Optimizer::Adam(localdim::train::AdamConfig::with_lr(1e-2))
            } else {
                Optimizer::Gd { lr: 1e-2 }
            };
            let cfg = TrainConfig { optimizer, iterations: 40, record_every: 7, stop_loss: None, seed: s };
            let a = run_trajectory(&c.arch, &c.params, &c.x, &objective, &cfg, &NoHook).unwrap();
            let b = run_trajectory(&c.arch, &c.params, &c.x, &objective, &cfg, &NoHook).unwrap();
            prop_assert_eq!(&a.snapshots, &b.snapshots);
            prop_assert_eq!(&a.final_params, &b.final_params);
            Ok(())
        }),
    ]
}

pub fn run_all() -> Vec<Outcome> {
    let mut all = net_suites();
    all.extend(jacobian_suites());
    all.extend(localdim_suites());
    all.extend(shallow_suites());
    all.extend(train_suites());
    all
}
