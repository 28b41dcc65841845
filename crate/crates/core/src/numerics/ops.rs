use super::NumericsError;
use crate::mask::Mask;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NumericsError>;

/// `c = a · b` (or `c += a · b`) for row-major matrices, with optional
/// transposition of either operand's storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the dimensions and
    // strides describe in-bounds row/column-major layouts of those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(NumericsError::shape("conv2d", format!("input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(NumericsError::shape(
                    "conv2d",
                    format!("kernel must be [C_out,C_in,kh,kw], got {kernel:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(NumericsError::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(NumericsError::Invalid {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(NumericsError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            ));
        }
        Ok(Self {
            in_channels: c_in,
            height: h,
            width: w,
            out_channels: c_out,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1, unpadded convolution reads the input as its own
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Maps output column `o` and kernel tap `k` to the padded-input coordinate.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.out_len();
    let mut col = vec![0.0f32; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki).filter(|&y| y < g.height) else {
                        continue;
                    };
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = g.source(ox, kj).filter(|&x| x < g.width) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.out_len();
    let mut out = vec![0.0f32; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki).filter(|&y| y < g.height) else {
                        continue;
                    };
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj).filter(|&x| x < g.width) {
                            plane[iy * g.width + ix] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,kh,kw]`.
///
/// No bias is applied; see [`add_channel_bias`].
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0f32; g.out_channels * g.out_len()];
    if g.is_pointwise() {
        gemm(g.out_channels, g.patch_len(), g.out_len(), kernel.data(), false, input.data(), false, &mut out, false);
    } else {
        let col = im2col(input.data(), &g);
        gemm(g.out_channels, g.patch_len(), g.out_len(), kernel.data(), false, &col, false, &mut out, false);
    }
    Tensor::new(vec![g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (gi, gk) = conv2d_backward_parts(input, kernel, &g, grad_out, true)?;
    Ok((gi.expect("input gradient requested"), gk))
}

pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    if grad_out.shape() != [g.out_channels, g.out_h, g.out_w] {
        return Err(NumericsError::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} does not match output [{}, {}, {}]",
                grad_out.shape(),
                g.out_channels,
                g.out_h,
                g.out_w
            ),
        ));
    }
    let (k, p) = (g.patch_len(), g.out_len());
    let owned_col;
    let col: &[f32] = if g.is_pointwise() {
        input.data()
    } else {
        owned_col = im2col(input.data(), g);
        &owned_col
    };
    let mut grad_kernel = vec![0.0f32; g.out_channels * k];
    gemm(g.out_channels, p, k, grad_out.data(), false, col, true, &mut grad_kernel, false);
    let grad_kernel = Tensor::new(kernel.shape().to_vec(), grad_kernel)?;

    let grad_input = if want_input {
        let mut grad_col = vec![0.0f32; k * p];
        gemm(k, g.out_channels, p, kernel.data(), true, grad_out.data(), false, &mut grad_col, false);
        let data = if g.is_pointwise() { grad_col } else { col2im(&grad_col, g) };
        Some(Tensor::new(input.shape().to_vec(), data)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, _, _) = input.chw()?;
    if bias.shape() != [c] {
        return Err(NumericsError::shape(
            "add_channel_bias",
            format!("bias {:?} for {c} channels", bias.shape()),
        ));
    }
    let mut out = input.clone();
    for (ch, &b) in bias.data().iter().enumerate() {
        out.slab_mut(ch).iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Bias gradient: per-channel sum of the upstream gradient.
pub fn add_channel_bias_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, _, _) = grad_out.chw()?;
    let sums = (0..c)
        .map(|ch| grad_out.slab(ch).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    Tensor::new(vec![c], sums)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `grad_out` by `input > 0`; the gradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(NumericsError::shape("relu_backward", format!("{:?} vs {:?}", input.shape(), grad_out.shape())));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// 2x2, stride-2 max pooling.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// into `input` of the selected maximum. Ties resolve to the first maximum in
/// row-major order within the window.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NumericsError::shape("maxpool2", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// Routes each upstream gradient element to its recorded argmax position.
pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(NumericsError::shape(
            "maxpool2_backward",
            format!("{} indices for {} gradient values", argmax.len(), grad_out.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let dst = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx as usize] += g;
    }
    Ok(grad)
}

/// Source taps for one output coordinate of align-corners-false bilinear
/// resampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: (src - lo as f64) as f32,
            }
        })
        .collect()
}

fn check_upsample(input: &Tensor, target: (usize, usize)) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    if target.0 < h || target.1 < w {
        return Err(NumericsError::shape(
            "upsample_bilinear",
            format!("target {}x{} smaller than input {h}x{w}", target.0, target.1),
        ));
    }
    Ok((c, h, w))
}

/// Bilinear upsampling to `target = (H, W)` with half-pixel (align-corners-false)
/// sampling.
pub fn upsample_bilinear(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = check_upsample(input, target)?;
    let (th, tw) = target;
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let rows = bilinear_taps(h, th);
    let cols = bilinear_taps(w, tw);
    let mut out = vec![0.0f32; c * th * tw];
    for ch in 0..c {
        let src = input.slab(ch);
        let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for (y, r) in rows.iter().enumerate() {
            let top = &src[r.lo * w..(r.lo + 1) * w];
            let bottom = &src[r.hi * w..(r.hi + 1) * w];
            for (x, q) in cols.iter().enumerate() {
                let t = top[q.lo] + (top[q.hi] - top[q.lo]) * q.frac;
                let b = bottom[q.lo] + (bottom[q.hi] - bottom[q.lo]) * q.frac;
                dst[y * tw + x] = t + (b - t) * r.frac;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Exact transpose of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(NumericsError::shape("upsample_bilinear_backward", format!("{input_shape:?}"))),
    };
    let (gc, th, tw) = grad_out.chw()?;
    if gc != c || th < h || tw < w {
        return Err(NumericsError::shape(
            "upsample_bilinear_backward",
            format!("gradient {:?} for input {input_shape:?}", grad_out.shape()),
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(grad_out.clone());
    }
    let rows = bilinear_taps(h, th);
    let cols = bilinear_taps(w, tw);
    let mut grad = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = grad_out.slab(ch);
        let dst = &mut grad[ch * h * w..(ch + 1) * h * w];
        for (y, r) in rows.iter().enumerate() {
            for (x, q) in cols.iter().enumerate() {
                let g = src[y * tw + x];
                let gt = g * (1.0 - r.frac);
                let gb = g * r.frac;
                dst[r.lo * w + q.lo] += gt * (1.0 - q.frac);
                dst[r.lo * w + q.hi] += gt * q.frac;
                dst[r.hi * w + q.lo] += gb * (1.0 - q.frac);
                dst[r.hi * w + q.hi] += gb * q.frac;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (th, tw) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * th * tw];
    for ch in 0..c {
        let src = input.slab(ch);
        let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for y in 0..th {
            for x in 0..tw {
                dst[y * tw + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

pub fn upsample_nearest2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, th, tw) = grad_out.chw()?;
    if th % 2 != 0 || tw % 2 != 0 {
        return Err(NumericsError::shape("upsample_nearest2_backward", format!("{:?}", grad_out.shape())));
    }
    let (h, w) = (th / 2, tw / 2);
    let mut grad = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = grad_out.slab(ch);
        let dst = &mut grad[ch * h * w..(ch + 1) * h * w];
        for y in 0..th {
            for x in 0..tw {
                dst[(y / 2) * w + x / 2] += src[y * tw + x];
            }
        }
    }
    Tensor::new(vec![c, h, w], grad)
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(NumericsError::shape("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated gradient back into its `a` and `b` parts.
pub fn concat_channels_backward(a_channels: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = grad_out.chw()?;
    if a_channels == 0 || a_channels >= c {
        return Err(NumericsError::shape("concat_channels_backward", format!("split {a_channels} of {c}")));
    }
    let (ga, gb) = grad_out.data().split_at(a_channels * h * w);
    Ok((
        Tensor::new(vec![a_channels, h, w], ga.to_vec())?,
        Tensor::new(vec![c - a_channels, h, w], gb.to_vec())?,
    ))
}

/// Class-weighted, max-subtracted softmax cross-entropy over every pixel.
///
/// Returns the loss normalized by the sum of weights of the counted pixels
/// together with its gradient with respect to `logits`. Pixels labelled
/// `ignore_label` contribute nothing. If no pixel carries weight the loss
/// and gradient are zero.
pub fn weighted_softmax_cross_entropy(
    logits: &Tensor,
    target: &Mask,
    class_weights: &[f32],
    ignore_label: Option<u8>,
) -> Result<(f32, Tensor)> {
    let (c, h, w) = logits.chw()?;
    if target.dims() != (h, w) {
        return Err(NumericsError::shape(
            "weighted_softmax_cross_entropy",
            format!("mask {:?} for logits {:?}", target.dims(), logits.shape()),
        ));
    }
    if class_weights.len() != c {
        return Err(NumericsError::shape(
            "weighted_softmax_cross_entropy",
            format!("{} class weights for {c} classes", class_weights.len()),
        ));
    }
    if let Some(bad) = class_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(NumericsError::Invalid {
            op: "weighted_softmax_cross_entropy",
            detail: format!("class weight {bad} must be finite and non-negative"),
        });
    }
    let plane = h * w;
    let z = logits.data();
    let mut grad = vec![0.0f32; c * plane];
    let mut probs = vec![0.0f64; c];
    let mut total = 0.0f64;
    let mut norm = 0.0f64;
    for (p, &t) in target.data().iter().enumerate() {
        if Some(t) == ignore_label {
            continue;
        }
        if t as usize >= c {
            return Err(NumericsError::TargetOutOfRange {
                class: t,
                pixel: p,
                num_classes: c,
            });
        }
        let wt = class_weights[t as usize] as f64;
        if wt == 0.0 {
            continue;
        }
        let max = (0..c).map(|k| z[k * plane + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for (k, pr) in probs.iter_mut().enumerate() {
            *pr = (z[k * plane + p] as f64 - max).exp();
            sum += *pr;
        }
        let log_sum = sum.ln();
        total += wt * (log_sum - (z[t as usize * plane + p] as f64 - max));
        norm += wt;
        for (k, pr) in probs.iter().enumerate() {
            let onehot = if k == t as usize { 1.0 } else { 0.0 };
            grad[k * plane + p] = (wt * (pr / sum - onehot)) as f32;
        }
    }
    if norm == 0.0 {
        return Ok((0.0, Tensor::zeros(logits.shape())));
    }
    let inv = (1.0 / norm) as f32;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(((total / norm) as f32, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Per-pixel argmax over the channel axis; ties go to the lowest class index.
pub fn argmax_channels(logits: &Tensor) -> Result<Mask> {
    let (c, h, w) = logits.chw()?;
    let plane = h * w;
    let z = logits.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0usize;
            for k in 1..c {
                if z[k * plane + p] > z[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(Mask::new(h, w, data).expect("dims match logits"))
}
