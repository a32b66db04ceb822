#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randlabel::autodiff::{Tape, Var};
use randlabel::gradcheck::{check, GradCheck};
use randlabel::heads::{ForwardRngs, HeadConfig, MultiHeadModel, Variant};
use randlabel::losses::LossBundle;
use randlabel::network::{InputShape, Mode, ModelSpec};
use randlabel::params::{Owner, ParamStore};
use randlabel::tensor::Tensor;
use randlabel::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub const OPS: [&str; 21] = [
    "matmul", "add_bias_2d", "add_bias_4d", "add", "scale", "mul_const", "relu", "maxpool2x2", "reshape",
    "transpose", "flatten", "conv2d", "sum", "mean", "log", "exp", "log_softmax", "gather", "gather_group",
    "concat_cols", "clamp_min",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks lie outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Distinct values separated by at least 0.05, so max-pool winners are stable.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.1 - len as f64 * 0.05).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

/// Reduces an arbitrary node to a scalar through a fixed random projection.
fn project(t: &mut Tape<'_>, v: Var, r: &Tensor) -> Result<Var> {
    let p = t.mul_const(v, r.clone())?;
    Ok(t.sum(p))
}

fn shaped(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// One randomized finite-difference check of a single op.
pub fn op_trial(op: &str, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let mut add = |t: Tensor| store.insert(format!("p{}", rng_id()), Owner::FeatureExtractor, t, false);
    let (b, m, n) = (dim(rng), dim(rng), dim(rng));
    match op {
        "matmul" => {
            let k = dim(rng);
            let a = add(shaped(rng, &[b, k]));
            let w = add(shaped(rng, &[k, n]));
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let (a, w) = (t.param(a), t.param(w)); let y = t.matmul(a, w)?; project(t, y, &r) }, FD_STEP)
        }
        "add_bias_2d" => {
            let x = add(shaped(rng, &[b, n]));
            let bias = add(shaped(rng, &[n]));
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let (x, c) = (t.param(x), t.param(bias)); let y = t.add_bias(x, c)?; project(t, y, &r) }, FD_STEP)
        }
        "add_bias_4d" => {
            let (c, h, w) = (dim(rng), dim(rng), dim(rng));
            let x = add(shaped(rng, &[b, c, h, w]));
            let bias = add(shaped(rng, &[c]));
            let r = shaped(rng, &[b, c, h, w]);
            check(&store, |t| { let (x, c) = (t.param(x), t.param(bias)); let y = t.add_bias(x, c)?; project(t, y, &r) }, FD_STEP)
        }
        "add" => {
            let x = add(shaped(rng, &[b, m, n]));
            let y = add(shaped(rng, &[b, m, n]));
            let r = shaped(rng, &[b, m, n]);
            check(&store, |t| { let (x, y) = (t.param(x), t.param(y)); let s = t.add(x, y)?; project(t, s, &r) }, FD_STEP)
        }
        "scale" => {
            let x = add(shaped(rng, &[b, n]));
            let c = rng.random_range(-3.0..3.0);
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.scale(x, c); project(t, y, &r) }, FD_STEP)
        }
        "mul_const" => {
            let x = add(shaped(rng, &[b, n]));
            let c = shaped(rng, &[b, n]);
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.mul_const(x, c.clone())?; project(t, y, &r) }, FD_STEP)
        }
        "relu" => {
            let x = add(off_zero(rng, &[b, m, n]));
            let r = shaped(rng, &[b, m, n]);
            check(&store, |t| { let x = t.param(x); let y = t.relu(x); project(t, y, &r) }, FD_STEP)
        }
        "maxpool2x2" => {
            let (c, h, w) = (dim(rng), 2 * dim(rng), 2 * dim(rng));
            let x = add(distinct(rng, &[b, c, h, w]));
            let r = shaped(rng, &[b, c, h / 2, w / 2]);
            check(&store, |t| { let x = t.param(x); let y = t.maxpool2x2(x)?; project(t, y, &r) }, FD_STEP)
        }
        "reshape" => {
            let x = add(shaped(rng, &[b, m, n]));
            let r = shaped(rng, &[b * m, n]);
            check(&store, |t| { let x = t.param(x); let y = t.reshape(x, &[b * m, n])?; project(t, y, &r) }, FD_STEP)
        }
        "transpose" => {
            let x = add(shaped(rng, &[m, n]));
            let r = shaped(rng, &[n, m]);
            check(&store, |t| { let x = t.param(x); let y = t.transpose(x)?; project(t, y, &r) }, FD_STEP)
        }
        "flatten" => {
            let (c, h) = (dim(rng), dim(rng));
            let x = add(shaped(rng, &[b, c, h, n]));
            let r = shaped(rng, &[b, c * h * n]);
            check(&store, |t| { let x = t.param(x); let y = t.flatten(x)?; project(t, y, &r) }, FD_STEP)
        }
        "conv2d" => {
            let (ci, co) = (dim(rng), dim(rng));
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..=k / 2);
            let (oh, ow) = (rng.random_range(1..4), rng.random_range(1..4));
            let h = (oh - 1) * stride + k - 2 * pad;
            let w = (ow - 1) * stride + k - 2 * pad;
            let x = add(shaped(rng, &[b, ci, h, w]));
            let kern = add(shaped(rng, &[co, ci, k, k]));
            let r = shaped(rng, &[b, co, oh, ow]);
            check(&store, |t| { let (x, kv) = (t.param(x), t.param(kern)); let y = t.conv2d(x, kv, stride, pad)?; project(t, y, &r) }, FD_STEP)
        }
        "sum" => {
            let x = add(shaped(rng, &[b, n]));
            check(&store, |t| { let x = t.param(x); let s = t.sum(x); Ok(t.scale(s, 0.7)) }, FD_STEP)
        }
        "mean" => {
            let x = add(shaped(rng, &[b, m, n]));
            let r = shaped(rng, &[b, m, n]);
            check(&store, |t| { let x = t.param(x); let y = t.mul_const(x, r.clone())?; Ok(t.mean(y)) }, FD_STEP)
        }
        "log" => {
            let x = add(uniform(rng, &[b, n], 0.5, 3.0));
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.log(x)?; project(t, y, &r) }, FD_STEP)
        }
        "exp" => {
            let x = add(shaped(rng, &[b, n]));
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.exp(x); project(t, y, &r) }, FD_STEP)
        }
        "log_softmax" => {
            let n = n + 1;
            let x = add(uniform(rng, &[b, m, n], -3.0, 3.0));
            let r = shaped(rng, &[b, m, n]);
            check(&store, |t| { let x = t.param(x); let y = t.log_softmax(x)?; project(t, y, &r) }, FD_STEP)
        }
        "gather" => {
            let x = add(shaped(rng, &[b, n]));
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            let r = shaped(rng, &[b]);
            check(&store, |t| { let x = t.param(x); let y = t.gather(x, &idx)?; project(t, y, &r) }, FD_STEP)
        }
        "gather_group" => {
            let x = add(shaped(rng, &[b, m, n]));
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.gather_group(x, &idx)?; project(t, y, &r) }, FD_STEP)
        }
        "concat_cols" => {
            let x = add(shaped(rng, &[b, m]));
            let y = add(shaped(rng, &[b, n]));
            let r = shaped(rng, &[b, m + n]);
            check(&store, |t| { let (x, y) = (t.param(x), t.param(y)); let c = t.concat_cols(&[x, y])?; project(t, c, &r) }, FD_STEP)
        }
        "clamp_min" => {
            let x = add(off_zero(rng, &[b, n]));
            let r = shaped(rng, &[b, n]);
            check(&store, |t| { let x = t.param(x); let y = t.clamp_min(x, 0.0); project(t, y, &r) }, FD_STEP)
        }
        other => panic!("unknown op {other}"),
    }
}

fn rng_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// Full composite objective `class + λ·reg + rnd` of a small multi-head toy_cnn.
pub fn composite_trial(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let input = InputShape::Image { channels: 1, height: 4, width: 4 };
    let (classes, n) = (3, 2);
    let spec = ModelSpec::toy_cnn(input, [2, 3], 4, classes, 0.0)?;
    let copy_depth = [1, 3, spec.depth()][rng.random_range(0..3)];
    let heads = HeadConfig { variant: Variant::Multihead, copy_depth, rnd_labels: n, head_width_factor: 1.0 };
    let mut head_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let model = MultiHeadModel::build(&spec, heads, rng, &mut head_rng)?;
    let batch = 3;
    let x = uniform(rng, &[batch, 1, 4, 4], -1.0, 1.0);
    let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let s: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let lambda = rng.random_range(0.0..2.0);
    let delta = rng.random_range(0.0..0.5);
    check(
        &model.store,
        |t| {
            let xv = t.input(x.clone());
            let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(0));
            let out = model.forward_graph(t, xv, Mode::Eval, ForwardRngs { base: &mut a, heads: &mut b })?;
            let l = LossBundle::build(t, &out, &y, Some(&s), delta)?;
            let reg = t.scale(l.reg.unwrap().node, lambda);
            let sum = t.add(l.class.unwrap().node, reg)?;
            t.add(sum, l.rnd.unwrap().node)
        },
        FD_STEP,
    )
}

/// The shared toy task: toy_mlp on 64 four-class blobs with two random labels.
pub fn toy_json() -> serde_json::Value {
    serde_json::json!({
        "model": {"preset": "toy_mlp", "hidden": [64, 64]},
        "heads": {"rnd_labels": 2},
        "training": {"epochs": 200, "lr": 0.05},
        "dataset": {"kind": "blobs", "classes": 4, "train_per_class": 16, "test_per_class": 64,
                    "shape": {"features": 16}, "std": 0.5, "seed": 1}
    })
}

/// Recursively overlays `patch` onto `base`.
pub fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub fn toy_config(patch: serde_json::Value) -> randlabel::config::RunConfig {
    let mut v = toy_json();
    merge(&mut v, &patch);
    randlabel::config::RunConfig::from_json(&v.to_string()).unwrap()
}
