//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the kernels it checks; everything is written as
//! plain nested loops in `f64`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segimprint::{Mask, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// Random values bounded away from zero by `gap` (keeps ReLU kinks outside a
/// finite-difference stencil).
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values with pairwise spacing of at least `gap` (no maxpool ties
/// within a stencil).
pub fn random_distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), order.into_iter().map(|r| r as f32 * gap - 0.5).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
}

pub fn naive_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let xv = x[(c * h + y as usize) * w + xx as usize] as f64;
                            let kv = k[((o * ci + c) * kh + i) * kw + j] as f64;
                            acc += xv * kv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Forward max-pool plus the gradient routed by a first-max scan.
pub fn naive_maxpool2(input: &Tensor, upstream: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut out = vec![0.0f32; c * (h / 2) * (w / 2)];
    let mut grad = vec![0.0f32; x.len()];
    for ch in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut best = None::<(usize, f32)>;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if best.map_or(true, |(_, v)| x[idx] > v) {
                            best = Some((idx, x[idx]));
                        }
                    }
                }
                let (idx, v) = best.unwrap();
                let o = (ch * (h / 2) + oy) * (w / 2) + ox;
                out[o] = v;
                grad[idx] += upstream.data()[o];
            }
        }
    }
    (
        Tensor::new(vec![c, h / 2, w / 2], out).unwrap(),
        Tensor::new(input.shape().to_vec(), grad).unwrap(),
    )
}

/// Half-pixel bilinear weight of source index `s` for output index `o`.
fn interp_weight(s: usize, o: usize, n_in: usize, n_out: usize) -> f64 {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    (1.0 - (src - s as f64).abs()).max(0.0)
}

/// Direct-formula bilinear resample: `out[y][x] = Σ_{i,j} wy(i,y) wx(j,x) in[i][j]`.
pub fn naive_bilinear(input: &Tensor, th: usize, tw: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = vec![0.0f32; c * th * tw];
    for ch in 0..c {
        for y in 0..th {
            for x in 0..tw {
                let mut acc = 0.0f64;
                for i in 0..h {
                    for j in 0..w {
                        acc += interp_weight(i, y, h, th)
                            * interp_weight(j, x, w, tw)
                            * input.data()[(ch * h + i) * w + j] as f64;
                    }
                }
                out[(ch * th + y) * tw + x] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out).unwrap()
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Central finite-difference gradient of the scalar `f` at `x`.
pub fn finite_difference(x: &Tensor, h: f32, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = ((up - down) / (2.0 * h as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        diff += (a as f64 - n as f64).powi(2);
        na += (a as f64).powi(2);
        nn += (n as f64).powi(2);
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Brute-force weighted cross-entropy in `f64`.
pub fn naive_weighted_ce(logits: &Tensor, mask: &Mask, weights: &[f32]) -> f64 {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let (mut total, mut z) = (0.0f64, 0.0f64);
    for p in 0..h * w {
        let t = mask.data()[p] as usize;
        let lse = (0..c).map(|k| (logits.data()[k * h * w + p] as f64).exp()).sum::<f64>().ln();
        let wt = weights[t] as f64;
        total += wt * (lse - logits.data()[t * h * w + p] as f64);
        z += wt;
    }
    total / z
}

/// Brute-force normalized masked average pooling over one head.
///
/// `features[i]` is `[C, H, W]`; `masks[i][p]` marks foreground pixels.
pub fn naive_nmap(features: &[Tensor], masks: &[Vec<bool>]) -> Option<Vec<f32>> {
    let c = features[0].shape()[0];
    let plane = features[0].shape()[1] * features[0].shape()[2];
    let mut sum = vec![0.0f64; c];
    let mut k = 0usize;
    for (f, m) in features.iter().zip(masks) {
        let n = m.iter().filter(|&&b| b).count();
        if n == 0 {
            continue;
        }
        k += 1;
        for ch in 0..c {
            let mut acc = 0.0f64;
            for p in 0..plane {
                if m[p] {
                    acc += f.data()[ch * plane + p] as f64;
                }
            }
            sum[ch] += acc / n as f64;
        }
    }
    if k == 0 {
        return None;
    }
    let avg: Vec<f64> = sum.iter().map(|s| s / k as f64).collect();
    let norm = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
    Some(avg.iter().map(|v| (v / norm) as f32).collect())
}

/// 4-connected components of `class` by repeated min-label propagation,
/// each as sorted flat indices, ordered by smallest index.
pub fn naive_components(mask: &Mask, class: u8) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let on = |p: usize| mask.data()[p] == class;
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for p in 0..h * w {
            if !on(p) {
                continue;
            }
            let (y, x) = (p / w, p % w);
            let mut best = label[p];
            for (ok, q) in [
                (y > 0, p.wrapping_sub(w)),
                (y + 1 < h, p + w),
                (x > 0, p.wrapping_sub(1)),
                (x + 1 < w, p + 1),
            ] {
                if ok && on(q) {
                    best = best.min(label[q]);
                }
            }
            if best < label[p] {
                label[p] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in (0..h * w).filter(|&p| on(p)) {
        groups.entry(label[p]).or_default().push(p);
    }
    groups.into_values().collect()
}

/// Window-scan any-foreground downscaling by `2^level`.
pub fn naive_downscale(mask: &Mask, class: u8, level: usize) -> Vec<bool> {
    let (h, w) = mask.dims();
    let f = 1 << level;
    let mut out = Vec::new();
    for cy in 0..h / f {
        for cx in 0..w / f {
            let mut any = false;
            for dy in 0..f {
                for dx in 0..f {
                    any |= mask.get(cy * f + dy, cx * f + dx) == class;
                }
            }
            out.push(any);
        }
    }
    out
}

/// A small, fast model for property tests.
pub fn tiny_model(kind: segimprint::model::BackboneKind, classes: usize, seed: u64) -> segimprint::model::SegModel {
    let config = segimprint::model::ModelConfig {
        input_height: 16,
        input_width: 16,
        base_channels: 4,
        levels: 2,
        seed,
        ..Default::default()
    };
    let names = segimprint::data::CLASS_NAMES[..classes].iter().map(|s| s.to_string()).collect();
    segimprint::model::SegModel::build(kind, config, names).unwrap()
}

pub mod checks;
