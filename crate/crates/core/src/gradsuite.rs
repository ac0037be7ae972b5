//! The finite-difference gradient suite: every differentiable graph op, the
//! attention unit, the ALB block and the total training loss, each checked
//! in `f64` over a range of random seeds.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{total_loss, IdGroups, LossConfig};
use crate::model::{multi_head_attention, Alb, AlbSpec, Builder, Forward, MhaVars};
use crate::optim::ParamStore;
use crate::tensor::{grad_check, Fault, GradCheckOptions, GradCheckReport, Graph, NormMode, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub tol: f64,
    /// Coordinates probed per input tensor.
    pub max_coords: usize,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            tol: 1e-3,
            max_coords: 32,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Seed of the worst case.
    pub worst_seed: u64,
    pub seeds: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} max_rel_err={:.3e} seeds={} worst_seed={}",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.max_rel_err,
            self.seeds,
            self.worst_seed
        )
    }
}

type Body = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    body: Box<Body>,
    step: f64,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values with magnitude in `[0.1, 1]`, away from the kinks of relu and
/// norms.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(inputs: Vec<Tensor<f64>>, body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        body: Box::new(body),
        step: 1e-6,
    }
}

/// Reduce `y` to a scalar with fixed random weights, so every output entry
/// contributes a distinct gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = uniform(g.shape(y), &mut rng);
    let p = g.mul_const(y, &w)?;
    Ok(g.sum(p))
}

fn attention_shapes(d: usize) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for _ in 0..4 {
        shapes.push(vec![d, d]);
        shapes.push(vec![d]);
    }
    shapes.extend([vec![d, 2 * d], vec![2 * d], vec![2 * d, d], vec![d]]);
    shapes
}

fn mha_vars(v: &[Var]) -> MhaVars {
    MhaVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
        w1: v[8],
        b1: v[9],
        w2: v[10],
        b2: v[11],
    }
}

fn alb_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    let spec = AlbSpec {
        deep_channels: 8,
        shallow_channels: 4,
        dim: 8,
        heads: 2,
        grid: (3, 2),
        mix_alpha: 0.1,
    };
    let mut store = ParamStore::<f64>::new();
    let alb = Alb::new(&mut Builder::new(&mut store, seed), "alb", spec)?;
    let ids = alb.params();
    let mut inputs = vec![uniform(&[2, 8, 6, 4], rng), uniform(&[2, 4, 12, 8], rng)];
    for &id in &ids {
        let p = store.param(id);
        // random norm scales so the zero-initialised output branch is open
        let v = if p.name.ends_with("bn.weight") {
            uniform(p.value.shape(), rng)
        } else {
            p.value.clone()
        };
        inputs.push(v);
    }
    Ok(Case {
        inputs,
        body: Box::new(move |g, v| {
            let mut fw = Forward::new(g, &store, NormMode::Train, false);
            for (k, &id) in ids.iter().enumerate() {
                fw.bind(id, v[2 + k]);
            }
            let out = alb.forward(&mut fw, v[0], v[1])?;
            project(g, out.out, seed)
        }),
        step: 1e-5,
    })
}

fn loss_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (p, k, d, classes) = (3, 2, 5, 4);
    let ids: Vec<u32> = (0..p).flat_map(|i| std::iter::repeat(i as u32 * 3 + 1).take(k)).collect();
    let groups = IdGroups::new(&ids, &ids)?;
    let labels: Vec<usize> = (0..4).flat_map(|_| ids.iter().map(|&i| i as usize % classes)).collect();
    let n = p * k;
    let mut inputs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&[n, d], rng)).collect();
    inputs.push(uniform(&[4 * n, classes], rng));
    let cfg = LossConfig {
        margin_rho: 0.5 + rng.gen_range(0.0..1.0),
        ..LossConfig::default()
    };
    Ok(case(inputs, move |g, v| {
        Ok(total_loss(g, &[v[0], v[1], v[2], v[3]], v[4], &labels, &groups, &cfg)?.total)
    }))
}

/// Names of every check, in report order.
pub const CHECKS: &[&str] = &[
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2d",
    "adaptive_avg_pool2d",
    "global_avg_pool",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "mul_const",
    "add_bias",
    "concat",
    "slice_rows",
    "reshape",
    "permute",
    "softmax",
    "softmax_cross_entropy",
    "row_norm",
    "row_norm_squared",
    "l2_normalize",
    "gather_rows",
    "group_mean",
    "pairwise_dist",
    "sum",
    "attention",
    "alb",
    "l_total",
];

fn build(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let c = match name {
        "conv2d" => {
            let stride = r.gen_range(1..=2);
            let pad = r.gen_range(0..=1);
            let inputs = vec![uniform(&[2, 3, 6, 5], r), uniform(&[4, 3, 3, 3], r), uniform(&[4], r)];
            case(inputs, move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, seed)
            })
        }
        "batch_norm_train" => {
            let inputs = vec![uniform(&[4, 3, 2, 2], r), uniform(&[3], r), uniform(&[3], r)];
            case(inputs, move |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train, None, 1e-5)?;
                project(g, y, seed)
            })
        }
        "batch_norm_eval" => {
            let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
            let inputs = vec![uniform(&[4, 3, 2, 2], r), uniform(&[3], r), uniform(&[3], r)];
            case(inputs, move |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Eval, Some((&mean, &var)), 1e-5)?;
                project(g, y, seed)
            })
        }
        "relu" => case(vec![away_from_zero(&[3, 7], r)], move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, seed)
        }),
        "max_pool2d" => case(vec![uniform(&[2, 2, 6, 6], r)], move |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y, seed)
        }),
        "adaptive_avg_pool2d" => {
            let (oh, ow) = (r.gen_range(1..=7), r.gen_range(1..=4));
            case(vec![uniform(&[2, 2, 5, 3], r)], move |g, v| {
                let y = g.adaptive_avg_pool2d(v[0], oh, ow)?;
                project(g, y, seed)
            })
        }
        "global_avg_pool" => case(vec![uniform(&[2, 3, 4, 3], r)], move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, seed)
        }),
        "matmul" => {
            let (ta, tb) = (r.gen_bool(0.5), r.gen_bool(0.5));
            let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
            case(vec![uniform(&a, r), uniform(&b, r)], move |g, v| {
                let y = g.matmul(v[0], v[1], ta, tb)?;
                project(g, y, seed)
            })
        }
        "linear" => case(vec![uniform(&[3, 4], r), uniform(&[4, 5], r), uniform(&[5], r)], move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        }),
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            case(vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], move |g, v| {
                let y = match op.as_str() {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, seed)
            })
        }
        "scale" => {
            let s = r.gen_range(-2.0..2.0);
            case(vec![uniform(&[3, 4], r)], move |g, v| {
                let y = g.scale(v[0], s);
                project(g, y, seed)
            })
        }
        "add_scalar" => {
            let s = r.gen_range(-2.0..2.0);
            case(vec![uniform(&[3, 4], r)], move |g, v| {
                let y = g.add_scalar(v[0], s);
                project(g, y, seed)
            })
        }
        "mul_const" => {
            let c = uniform(&[3, 4], r);
            case(vec![uniform(&[3, 4], r)], move |g, v| {
                let y = g.mul_const(v[0], &c)?;
                project(g, y, seed)
            })
        }
        "add_bias" => case(vec![uniform(&[2, 3, 4], r), uniform(&[4], r)], move |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, seed)
        }),
        "concat" => case(vec![uniform(&[2, 3], r), uniform(&[1, 3], r), uniform(&[3, 3], r)], move |g, v| {
            let y = g.concat(v)?;
            project(g, y, seed)
        }),
        "slice_rows" => {
            let start = r.gen_range(0..3);
            let len = r.gen_range(1..=5 - start);
            case(vec![uniform(&[5, 3], r)], move |g, v| {
                let y = g.slice_rows(v[0], start, len)?;
                project(g, y, seed)
            })
        }
        "reshape" => case(vec![uniform(&[2, 6], r)], move |g, v| {
            let y = g.reshape(v[0], &[3, 2, 2])?;
            project(g, y, seed)
        }),
        "permute" => {
            let mut perm = vec![0, 1, 2, 3];
            rand::seq::SliceRandom::shuffle(&mut perm[..], r);
            case(vec![uniform(&[2, 3, 4, 2], r)], move |g, v| {
                let y = g.permute(v[0], &perm)?;
                project(g, y, seed)
            })
        }
        "softmax" => case(vec![uniform(&[3, 5], r)], move |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, seed)
        }),
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            case(vec![uniform(&[4, 5], r)], move |g, v| g.softmax_cross_entropy(v[0], &labels))
        }
        "row_norm" | "row_norm_squared" => {
            let squared = name == "row_norm_squared";
            case(vec![away_from_zero(&[4, 3], r)], move |g, v| {
                let y = g.row_norm(v[0], squared)?;
                project(g, y, seed)
            })
        }
        "l2_normalize" => case(vec![away_from_zero(&[4, 3], r)], move |g, v| {
            let y = g.l2_normalize(v[0], 1e-12)?;
            project(g, y, seed)
        }),
        "gather_rows" => {
            let idx: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
            case(vec![uniform(&[4, 3], r)], move |g, v| {
                let y = g.gather_rows(v[0], &idx)?;
                project(g, y, seed)
            })
        }
        "group_mean" => {
            let mut groups: Vec<usize> = (0..7).map(|i| i % 3).collect();
            rand::seq::SliceRandom::shuffle(&mut groups[..], r);
            case(vec![uniform(&[7, 3], r)], move |g, v| {
                let y = g.group_mean(v[0], &groups, 3)?;
                project(g, y, seed)
            })
        }
        "pairwise_dist" => case(vec![uniform(&[4, 3], r), uniform(&[5, 3], r)], move |g, v| {
            let y = g.pairwise_dist(v[0], v[1])?;
            project(g, y, seed)
        }),
        "sum" => case(vec![uniform(&[3, 4], r)], |g, v| Ok(g.sum(v[0]))),
        "attention" => {
            let d = 8;
            let mut inputs = vec![uniform(&[2, 4, d], r), uniform(&[2, 4, d], r), uniform(&[2, 4, d], r)];
            inputs.extend(attention_shapes(d).iter().map(|s| uniform(s, r)));
            case(inputs, move |g, v| {
                let w = mha_vars(&v[3..]);
                let out = multi_head_attention(g, v[0], v[1], v[2], 2, &w)?;
                project(g, out.out, seed)
            })
        }
        "alb" => alb_case(seed, r)?,
        "l_total" => loss_case(r)?,
        _ => {
            return Err(crate::Error::Usage(format!("unknown gradient check `{name}`")));
        }
    };
    Ok(c)
}

/// Run one named check for one seed.
pub fn check_once(name: &str, seed: u64, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let c = build(name, seed)?;
    let fault = opts.fault;
    let body = c.body;
    grad_check(
        move |g, v| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            body(g, v)
        },
        &c.inputs,
        &GradCheckOptions {
            step: c.step,
            tol: opts.tol,
            max_coords: Some(opts.max_coords),
            seed,
        },
    )
}

/// Run a named check over seeds `0..opts.seeds`.
pub fn run_check(name: &'static str, opts: &SuiteOptions) -> Result<CheckResult> {
    let mut out = CheckResult {
        name,
        max_rel_err: 0.0,
        worst_seed: 0,
        seeds: opts.seeds,
        tol: opts.tol,
    };
    for seed in 0..opts.seeds as u64 {
        let r = check_once(name, seed, opts)?;
        if r.max_rel_err > out.max_rel_err || r.max_rel_err.is_nan() {
            out.max_rel_err = if r.max_rel_err.is_nan() { f64::INFINITY } else { r.max_rel_err };
            out.worst_seed = seed;
        }
    }
    Ok(out)
}

/// Every check in [`CHECKS`] order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|&n| run_check(n, opts)).collect()
}
