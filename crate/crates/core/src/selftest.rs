//! Engine self-test: finite-difference checks for every differentiable op
//! plus forward oracles. Backs the `selftest` CLI command.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{self, DEFAULT_STEP};
use crate::tensor::{conv2d_reference, softmax_slice, Conv2d, Function, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const CONV_TOLERANCE: f64 = 1e-12;
pub const SOFTMAX_TOLERANCE: f64 = 1e-12;
pub const MIN_TRIALS: usize = 50;

type GraphFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomized instance of a gradient check.
pub struct Trial {
    pub inputs: Vec<Tensor>,
    pub graph: GraphFn,
}

/// A named family of gradient-check trials for one op.
pub struct GradCase {
    pub name: String,
    pub sample: Box<dyn Fn(&mut ChaCha8Rng) -> Trial>,
}

impl GradCase {
    pub fn new(name: &str, sample: impl Fn(&mut ChaCha8Rng) -> Trial + 'static) -> Self {
        Self {
            name: name.to_string(),
            sample: Box::new(sample),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub rows: Vec<CheckRow>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>6} {:>12} {:>10}  result", "check", "trials", "worst", "tol")?;
        for r in &self.rows {
            write!(
                f,
                "{:<28} {:>6} {:>12.3e} {:>10.1e}  {}",
                r.name,
                r.trials,
                r.worst,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            )?;
            if let Some(note) = &r.note {
                write!(f, "  ({note})")?;
            }
            writeln!(f)?;
        }
        write!(f, "elapsed {:.2}s", self.seconds)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.05, 1] and random sign: keeps kinks of
/// relu/leaky_relu/abs farther than the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn image_shape(rng: &mut ChaCha8Rng, min_hw: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(min_hw..=min_hw + 3),
        rng.random_range(min_hw..=min_hw + 3),
    ]
}

fn unary(name: &str, make: fn(&mut Tape, Var) -> Result<Var>, sample: fn(&mut ChaCha8Rng, Vec<usize>) -> Tensor) -> GradCase {
    GradCase::new(name, move |rng| {
        let shape = small_shape(rng);
        Trial {
            inputs: vec![sample(rng, shape)],
            graph: Box::new(move |t, v| make(t, v[0])),
        }
    })
}

fn binary(name: &str, make: fn(&mut Tape, Var, Var) -> Result<Var>, positive_rhs: bool) -> GradCase {
    GradCase::new(name, move |rng| {
        let shape = small_shape(rng);
        let a = uniform(rng, shape.clone(), -1.0, 1.0);
        let b = if positive_rhs {
            uniform(rng, shape, 0.5, 2.0)
        } else {
            uniform(rng, shape, -1.0, 1.0)
        };
        Trial {
            inputs: vec![a, b],
            graph: Box::new(move |t, v| make(t, v[0], v[1])),
        }
    })
}

fn signed(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    uniform(rng, shape, -2.0, 2.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    uniform(rng, shape, 0.5, 2.0)
}

/// Gradient checks for every differentiable op of the engine.
pub fn standard_cases() -> Vec<GradCase> {
    vec![
        unary("relu", |t, x| t.relu(x), away_from_zero),
        unary("leaky_relu", |t, x| t.leaky_relu(x), away_from_zero),
        unary("sigmoid", |t, x| t.sigmoid(x), signed),
        unary("square", |t, x| t.square(x), signed),
        unary("abs", |t, x| t.abs(x), away_from_zero),
        unary("sqrt", |t, x| t.sqrt(x), positive),
        unary("log", |t, x| t.log(x), positive),
        unary("affine", |t, x| t.affine(x, -1.7, 0.3), signed),
        unary("sum", |t, x| t.sum(x), signed),
        unary("mean", |t, x| t.mean(x), signed),
        unary("abs_sum", |t, x| t.abs_sum(x), away_from_zero),
        unary("softmax", |t, x| t.softmax(x), signed),
        binary("add", |t, a, b| t.add(a, b), false),
        binary("subtract", |t, a, b| t.sub(a, b), false),
        binary("multiply", |t, a, b| t.mul(a, b), false),
        binary("divide", |t, a, b| t.div(a, b), true),
        GradCase::new("select", |rng| {
            let shape = small_shape(rng);
            let x = signed(rng, shape);
            let index = rng.random_range(0..x.numel());
            Trial {
                inputs: vec![x],
                graph: Box::new(move |t, v| t.select(v[0], index)),
            }
        }),
        GradCase::new("reshape", |rng| {
            let shape = small_shape(rng);
            let x = signed(rng, shape);
            let n = x.numel();
            Trial {
                inputs: vec![x],
                graph: Box::new(move |t, v| t.reshape(v[0], vec![n])),
            }
        }),
        GradCase::new("softmax_cross_entropy", |rng| {
            let (n, k) = (rng.random_range(1..=3), rng.random_range(2..=5));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            Trial {
                inputs: vec![signed(rng, vec![n, k])],
                graph: Box::new(move |t, v| t.softmax_cross_entropy(v[0], labels.clone())),
            }
        }),
        GradCase::new("conv2d", |rng| {
            let shape = image_shape(rng, 3);
            let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let kernel = signed(rng, vec![k, shape[1], kh, kw]);
            Trial {
                inputs: vec![signed(rng, shape), kernel],
                graph: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, padding)),
            }
        }),
        GradCase::new("bias_add", |rng| {
            let shape = image_shape(rng, 1);
            let bias = signed(rng, vec![shape[1]]);
            Trial {
                inputs: vec![signed(rng, shape), bias],
                graph: Box::new(|t, v| t.bias_add(v[0], v[1])),
            }
        }),
        GradCase::new("avg_pool2", |rng| {
            let shape = image_shape(rng, 2);
            Trial {
                inputs: vec![signed(rng, shape)],
                graph: Box::new(|t, v| t.avg_pool2(v[0])),
            }
        }),
        GradCase::new("global_avg_pool", |rng| {
            let shape = image_shape(rng, 1);
            Trial {
                inputs: vec![signed(rng, shape)],
                graph: Box::new(|t, v| t.global_avg_pool(v[0])),
            }
        }),
        GradCase::new("linear", |rng| {
            let (n, i, o) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=4));
            Trial {
                inputs: vec![signed(rng, vec![n, i]), signed(rng, vec![o, i]), signed(rng, vec![o])],
                graph: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            }
        }),
        GradCase::new("upsample_nearest2x", |rng| {
            let shape = image_shape(rng, 1);
            Trial {
                inputs: vec![signed(rng, shape)],
                graph: Box::new(|t, v| t.upsample_nearest2x(v[0])),
            }
        }),
        GradCase::new("concat_channels", |rng| {
            let a = image_shape(rng, 1);
            let mut b = a.clone();
            b[1] = rng.random_range(1..=3);
            Trial {
                inputs: vec![signed(rng, a), signed(rng, b)],
                graph: Box::new(|t, v| t.concat_channels(v[0], v[1])),
            }
        }),
        GradCase::new("broadcast_channels", |rng| {
            let mut shape = image_shape(rng, 1);
            shape[1] = 1;
            let channels = rng.random_range(1..=4);
            Trial {
                inputs: vec![signed(rng, shape)],
                graph: Box::new(move |t, v| t.broadcast_channels(v[0], channels)),
            }
        }),
        GradCase::new("diff", |rng| {
            let mut shape = small_shape(rng);
            let axis = rng.random_range(0..shape.len());
            shape[axis] = shape[axis].max(2);
            Trial {
                inputs: vec![signed(rng, shape)],
                graph: Box::new(move |t, v| t.diff(v[0], axis)),
            }
        }),
    ]
}

/// Runs `trials` randomized finite-difference checks of one case.
pub fn run_case(case: &GradCase, trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut note = None;
    for _ in 0..trials {
        let trial = (case.sample)(&mut rng);
        let out_numel = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = trial.inputs.iter().map(|t| tape.constant(t.clone())).collect();
            match (trial.graph)(&mut tape, &vars) {
                Ok(v) => tape.value(v).numel(),
                Err(e) => {
                    note = Some(e.to_string());
                    worst = f64::INFINITY;
                    break;
                }
            }
        };
        let weights: Vec<f64> = (0..out_numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        match gradcheck::compare(trial.graph.as_ref(), &trial.inputs, Some(weights), DEFAULT_STEP) {
            Ok(cmp) => worst = worst.max(cmp.relative_error()),
            Err(e) => {
                note = Some(e.to_string());
                worst = f64::INFINITY;
                break;
            }
        }
    }
    CheckRow {
        name: format!("grad:{}", case.name),
        trials,
        worst,
        tolerance: GRAD_TOLERANCE,
        passed: worst < GRAD_TOLERANCE,
        note,
    }
}

fn conv_oracle_row(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let shape = image_shape(&mut rng, 3);
        let stride = rng.random_range(1..=3);
        let padding = rng.random_range(0..=2);
        let kshape = vec![
            rng.random_range(1..=4),
            shape[1],
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ];
        let kernel = signed(&mut rng, kshape);
        let x = signed(&mut rng, shape);
        let fast = Conv2d { stride, padding }.forward(&[&x, &kernel]);
        let slow = conv2d_reference(&x, &kernel, stride, padding);
        match (fast, slow) {
            (Ok(a), Ok(b)) if a.shape() == b.shape() => {
                for (a, b) in a.data().iter().zip(b.data()) {
                    worst = worst.max((a - b).abs());
                }
            }
            _ => worst = f64::INFINITY,
        }
    }
    CheckRow {
        name: "oracle:conv2d_naive_loop".into(),
        trials,
        worst,
        tolerance: CONV_TOLERANCE,
        passed: worst <= CONV_TOLERANCE,
        note: None,
    }
}

fn softmax_row(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut in_open_interval = true;
    for _ in 0..trials {
        let n = rng.random_range(1..=16);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = softmax_slice(&v);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        in_open_interval &= p.iter().all(|&p| p > 0.0 && p <= 1.0);
    }
    CheckRow {
        name: "oracle:softmax_normalization".into(),
        trials,
        worst,
        tolerance: SOFTMAX_TOLERANCE,
        passed: worst < SOFTMAX_TOLERANCE && in_open_interval,
        note: None,
    }
}

fn determinism_row(seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = signed(&mut rng, vec![1, 2, 6, 6]);
    let w = signed(&mut rng, vec![3, 2, 3, 3]);
    let run = || -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let wv = tape.leaf(w.clone().with_grad());
        let c = tape.conv2d(xv, wv, 1, 1)?;
        let r = tape.sigmoid(c)?;
        let p = tape.avg_pool2(r)?;
        let s = tape.square(p)?;
        let l = tape.mean(s)?;
        tape.backward(l)?;
        Ok((tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec()))
    };
    let identical = matches!((run(), run()), (Ok(a), Ok(b)) if a == b);
    CheckRow {
        name: "tape_determinism".into(),
        trials: 2,
        worst: if identical { 0.0 } else { 1.0 },
        tolerance: 0.0,
        passed: identical,
        note: None,
    }
}

/// Runs the given gradient cases plus the forward oracles.
pub fn run_with(cases: &[GradCase], trials: usize, seed: u64) -> SelftestReport {
    let start = Instant::now();
    let mut rows: Vec<CheckRow> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, trials, seed.wrapping_add(i as u64)))
        .collect();
    rows.push(conv_oracle_row(trials.max(MIN_TRIALS) * 2, seed ^ 0xC0));
    rows.push(softmax_row(trials.max(MIN_TRIALS) * 20, seed ^ 0x50));
    rows.push(determinism_row(seed));
    SelftestReport {
        rows,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run(seed: u64) -> SelftestReport {
    run_with(&standard_cases(), MIN_TRIALS, seed)
}
