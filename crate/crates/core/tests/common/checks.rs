//! Randomized oracle comparisons for the numerics kernels, shared between the
//! numerics test target and the acceptance suite.

use super::*;
use segimprint::numerics::{self, Graph, Var};

pub const FD_STEP: f32 = 1e-3;

/// Outcome of one randomized check: worst forward deviation from the
/// oracle (absolute) and worst gradient relative error.
#[derive(Debug, Default, Clone, Copy)]
pub struct CheckResult {
    pub forward_abs: f32,
    pub grad_rel: f64,
}

impl CheckResult {
    pub fn merge(self, other: Self) -> Self {
        Self {
            forward_abs: self.forward_abs.max(other.forward_abs),
            grad_rel: self.grad_rel.max(other.grad_rel),
        }
    }
}

/// Scalar probe loss `Σ out ⊙ r` in f64.
fn probe(out: &Tensor, r: &Tensor) -> f64 {
    dot(out, r)
}

pub fn conv(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let stride = if seed % 3 == 0 { 2 } else { 1 };
    let x = random_tensor(&mut g, &[2, 5, 5]);
    let k = random_tensor(&mut g, &[3, 2, 3, 3]);
    let out = numerics::conv2d(&x, &k, stride, 1).unwrap();
    let forward_abs = max_abs_diff(&out, &naive_conv2d(&x, &k, stride, 1));
    let r = random_tensor(&mut g, out.shape());
    let (gi, gk) = numerics::conv2d_backward(&x, &k, stride, 1, &r).unwrap();
    let ni = finite_difference(&x, FD_STEP, |x| probe(&numerics::conv2d(x, &k, stride, 1).unwrap(), &r));
    let nk = finite_difference(&k, FD_STEP, |k| probe(&numerics::conv2d(&x, k, stride, 1).unwrap(), &r));
    CheckResult {
        forward_abs,
        grad_rel: relative_error(&gi, &ni).max(relative_error(&gk, &nk)),
    }
}

pub fn maxpool(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let x = random_distinct(&mut g, &[4, 8, 8], 0.004);
    let (out, argmax) = numerics::maxpool2(&x).unwrap();
    let r = random_tensor(&mut g, out.shape());
    let grad = numerics::maxpool2_backward(x.shape(), &argmax, &r).unwrap();
    let (oracle_out, oracle_grad) = naive_maxpool2(&x, &r);
    let numeric = finite_difference(&x, FD_STEP, |x| probe(&numerics::maxpool2(x).unwrap().0, &r));
    CheckResult {
        forward_abs: max_abs_diff(&out, &oracle_out).max(max_abs_diff(&grad, &oracle_grad)),
        grad_rel: relative_error(&grad, &numeric),
    }
}

pub fn upsample(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let (h, w) = (g.gen_range(1..5), g.gen_range(1..5));
    let (th, tw) = (h * g.gen_range(1..4) + g.gen_range(0..2), w * g.gen_range(1..4) + g.gen_range(0..2));
    let x = random_tensor(&mut g, &[2, h, w]);
    let out = numerics::upsample_bilinear(&x, (th, tw)).unwrap();
    let r = random_tensor(&mut g, out.shape());
    let grad = numerics::upsample_bilinear_backward(x.shape(), &r).unwrap();
    let numeric = finite_difference(&x, FD_STEP, |x| probe(&numerics::upsample_bilinear(x, (th, tw)).unwrap(), &r));
    // Transpose identity: <U x, r> == <x, Uᵀ r>.
    let adjoint_gap = (dot(&out, &r) - dot(&x, &grad)).abs() as f32;
    CheckResult {
        forward_abs: max_abs_diff(&out, &naive_bilinear(&x, th, tw)).max(adjoint_gap),
        grad_rel: relative_error(&grad, &numeric),
    }
}

pub fn nearest(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[3, 3, 4]);
    let out = numerics::upsample_nearest2(&x).unwrap();
    let r = random_tensor(&mut g, out.shape());
    let grad = numerics::upsample_nearest2_backward(&r).unwrap();
    let numeric = finite_difference(&x, FD_STEP, |x| probe(&numerics::upsample_nearest2(x).unwrap(), &r));
    CheckResult {
        forward_abs: 0.0,
        grad_rel: relative_error(&grad, &numeric),
    }
}

pub fn relu(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let x = random_away_from_zero(&mut g, &[2, 4, 4], 2.0 * FD_STEP);
    let r = random_tensor(&mut g, x.shape());
    let grad = numerics::relu_backward(&x, &r).unwrap();
    let numeric = finite_difference(&x, FD_STEP, |x| probe(&numerics::relu(x), &r));
    CheckResult {
        forward_abs: 0.0,
        grad_rel: relative_error(&grad, &numeric),
    }
}

pub fn cross_entropy(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let logits = random_tensor(&mut g, &[3, 4, 4]).scale(3.0);
    let mask = random_mask(&mut g, 4, 4, 3);
    let weights = [g.gen_range(0.5f32..2.0), g.gen_range(0.5f32..2.0), g.gen_range(0.5f32..2.0)];
    let (loss, grad) = numerics::weighted_softmax_cross_entropy(&logits, &mask, &weights, None).unwrap();
    let numeric = finite_difference(&logits, FD_STEP, |z| naive_weighted_ce(z, &mask, &weights));
    CheckResult {
        forward_abs: (loss as f64 - naive_weighted_ce(&logits, &mask, &weights)).abs() as f32,
        grad_rel: relative_error(&grad, &numeric),
    }
}

/// Small conv → bias → relu → pool → nearest-up → concat → add network,
/// checked end to end through the tape.
pub fn graph_chain(seed: u64) -> CheckResult {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, &[1, 6, 6]);
    let k1 = random_tensor(&mut g, &[2, 1, 3, 3]);
    let b1 = random_tensor(&mut g, &[2]);
    let k2 = random_tensor(&mut g, &[2, 4, 1, 1]);
    let r = random_tensor(&mut g, &[2, 6, 6]);

    let run = |x: &Tensor, k1: &Tensor, b1: &Tensor, k2: &Tensor| -> (Graph, [Var; 4], Var) {
        let mut gr = Graph::new();
        let xv = gr.param(x.clone());
        let k1v = gr.param(k1.clone());
        let b1v = gr.param(b1.clone());
        let k2v = gr.param(k2.clone());
        let c = gr.conv2d(xv, k1v, 1, 1).unwrap();
        let c = gr.channel_bias(c, b1v).unwrap();
        let a = gr.relu(c);
        let p = gr.maxpool2(a).unwrap();
        let u = gr.upsample_nearest2(p).unwrap();
        let cat = gr.concat(a, u).unwrap();
        let y = gr.conv2d(cat, k2v, 1, 0).unwrap();
        let bl = gr.upsample_bilinear(p, (6, 6)).unwrap();
        let y = gr.add(y, bl).unwrap();
        (gr, [xv, k1v, b1v, k2v], y)
    };
    let (gr, vars, y) = run(&x, &k1, &b1, &k2);
    let grads = gr.backward(y, r.clone()).unwrap();

    // Kinks: skip seeds where a pre-activation sits inside the stencil or a
    // pooling window is near-tied.
    let pre = numerics::add_channel_bias(&numerics::conv2d(&x, &k1, 1, 1).unwrap(), &b1).unwrap();
    let near_kink = pre.data().iter().any(|v| v.abs() < 1e-2);
    let act = numerics::relu(&pre);
    let (c, h, w) = (2, 6, 6);
    let near_tie = (0..c).any(|ch| {
        (0..h / 2).any(|oy| {
            (0..w / 2).any(|ox| {
                let mut vals: Vec<f32> = (0..4)
                    .map(|t| act.data()[(ch * h + 2 * oy + t / 2) * w + 2 * ox + t % 2])
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                vals[0] - vals[1] < 1e-2
            })
        })
    });
    if near_kink || near_tie {
        return CheckResult::default();
    }

    let loss = |x: &Tensor, k1: &Tensor, b1: &Tensor, k2: &Tensor| {
        let (gr, _, y) = run(x, k1, b1, k2);
        dot(gr.value(y), &r)
    };
    let nx = finite_difference(&x, FD_STEP, |xp| loss(xp, &k1, &b1, &k2));
    let nk1 = finite_difference(&k1, FD_STEP, |k| loss(&x, k, &b1, &k2));
    let nb1 = finite_difference(&b1, FD_STEP, |b| loss(&x, &k1, b, &k2));
    let nk2 = finite_difference(&k2, FD_STEP, |k| loss(&x, &k1, &b1, k));
    let rel = [
        relative_error(grads.get(vars[0]).unwrap(), &nx),
        relative_error(grads.get(vars[1]).unwrap(), &nk1),
        relative_error(grads.get(vars[2]).unwrap(), &nb1),
        relative_error(grads.get(vars[3]).unwrap(), &nk2),
    ];
    CheckResult {
        forward_abs: 0.0,
        grad_rel: rel.into_iter().fold(0.0, f64::max),
    }
}

pub const ALL: [(&str, fn(u64) -> CheckResult); 7] = [
    ("conv2d", conv),
    ("maxpool2", maxpool),
    ("upsample_bilinear", upsample),
    ("upsample_nearest2", nearest),
    ("relu", relu),
    ("weighted_softmax_cross_entropy", cross_entropy),
    ("graph_chain", graph_chain),
];
