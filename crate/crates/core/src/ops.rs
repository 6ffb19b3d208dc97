//! Forward and backward kernels for the differentiable operations.
//!
//! The forward functions are usable on their own for inference; [`crate::graph`]
//! records them and calls the matching `*_backward` kernels.
//!
//! Reductions use a fixed summation order so results are reproducible. For
//! `conv2d` every output element accumulates its terms with the input channel
//! outermost, then the kernel column, then the kernel row innermost, starting
//! from zero; the bias is added last.

use crate::tensor::{shape_err, Tensor, TensorError};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

fn vector_len(t: &Tensor, op: &'static str) -> Result<usize, TensorError> {
    match *t.shape() {
        [n] => Ok(n),
        ref s => Err(shape_err(op, format!("expected a vector, got {s:?}"))),
    }
}

fn check_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize), TensorError> {
    let (ci, h, w) = chw(input, "conv2d")?;
    let (co, kci) = match *kernel.shape() {
        [co, kci, 3, 3] => (co, kci),
        ref s => {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be [C_out,C_in,3,3], got {s:?}"),
            ))
        }
    };
    if kci != ci {
        return Err(shape_err(
            "conv2d",
            format!("input has {ci} channels but kernel expects {kci}"),
        ));
    }
    if bias.shape() != [co] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?} does not match {co} output channels", bias.shape()),
        ));
    }
    Ok((ci, co, h, w))
}

/// Copies every `[h, w]` plane into a zero border of width one.
fn pad_planes(data: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; planes * ph * pw];
    for c in 0..planes {
        for y in 0..h {
            let s = (c * h + y) * w;
            let d = (c * ph + y + 1) * pw + 1;
            out[d..d + w].copy_from_slice(&data[s..s + w]);
        }
    }
    out
}

/// For every flat position `p` of a plane laid out with row stride `pw`:
/// `acc[p] += sum over (dx, dy) of k[dy*3+dx] * src[p + dy*pw + dx]`, terms
/// added one at a time with `dx` outer and `dy` inner.
#[inline(always)]
fn accumulate_plane(acc: &mut [f64], k: &[f64; 9], src: &[f64], pw: usize) {
    let n = acc.len();
    let (r0, r1, r2) = (&src[..n + 2], &src[pw..pw + n + 2], &src[2 * pw..2 * pw + n + 2]);
    for p in 0..n {
        let mut a = acc[p];
        a += k[0] * r0[p];
        a += k[3] * r1[p];
        a += k[6] * r2[p];
        a += k[1] * r0[p + 1];
        a += k[4] * r1[p + 1];
        a += k[7] * r2[p + 1];
        a += k[2] * r0[p + 2];
        a += k[5] * r1[p + 2];
        a += k[8] * r2[p + 2];
        acc[p] = a;
    }
}

/// Problem geometry shared by the convolution loops. Intermediate planes use
/// the padded row stride `w + 2`; the last two columns of each row are junk.
#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
}

impl ConvDims {
    fn pw(&self) -> usize {
        self.w + 2
    }

    /// Length of a strided plane whose last read stays inside a padded plane.
    fn span(&self) -> usize {
        self.h * self.pw() - 2
    }

    fn padded_plane<'a>(&self, planes: &'a [f64], i: usize) -> &'a [f64] {
        let len = (self.h + 2) * self.pw();
        &planes[i * len..(i + 1) * len]
    }

    fn kernel(k: &[f64], base: usize) -> &[f64; 9] {
        k[base..base + 9].try_into().expect("3x3 kernel")
    }
}

#[inline(always)]
fn conv_forward_body(d: ConvDims, padded: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvDims { ci, co, h, w } = d;
    let pw = d.pw();
    let mut out = vec![0.0; co * h * w];
    let mut acc = vec![0.0; d.span()];
    for o in 0..co {
        acc.fill(0.0);
        for c in 0..ci {
            accumulate_plane(
                &mut acc,
                ConvDims::kernel(k, (o * ci + c) * 9),
                d.padded_plane(padded, c),
                pw,
            );
        }
        for y in 0..h {
            let dst = &mut out[(o * h + y) * w..(o * h + y + 1) * w];
            for (v, a) in dst.iter_mut().zip(&acc[y * pw..y * pw + w]) {
                *v = bias[o] + *a;
            }
        }
    }
    out
}

/// Transposed convolution: the padded output gradient correlated with the
/// spatially flipped kernel.
#[inline(always)]
fn conv_input_grad_body(d: ConvDims, gpad: &[f64], k: &[f64]) -> Vec<f64> {
    let ConvDims { ci, co, h, w } = d;
    let pw = d.pw();
    let mut gi = vec![0.0; ci * h * w];
    let mut acc = vec![0.0; d.span()];
    let mut flipped = [0.0; 9];
    for c in 0..ci {
        acc.fill(0.0);
        for o in 0..co {
            let kv = ConvDims::kernel(k, (o * ci + c) * 9);
            for (i, f) in flipped.iter_mut().enumerate() {
                *f = kv[8 - i];
            }
            accumulate_plane(&mut acc, &flipped, d.padded_plane(gpad, o), pw);
        }
        for y in 0..h {
            gi[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&acc[y * pw..y * pw + w]);
        }
    }
    gi
}

#[inline(always)]
fn conv_kernel_grad_body(d: ConvDims, padded: &[f64], g: &[f64]) -> Vec<f64> {
    const LANES: usize = 8;
    let ConvDims { ci, co, h, w } = d;
    let pw = d.pw();
    let n = d.span();
    let body = n - n % LANES;
    // Output gradient on the strided layout, zero in the junk columns.
    let mut gs = vec![0.0; co * n];
    for o in 0..co {
        for y in 0..h {
            gs[o * n + y * pw..o * n + y * pw + w].copy_from_slice(&g[(o * h + y) * w..(o * h + y + 1) * w]);
        }
    }
    let mut gk = vec![0.0; co * ci * 9];
    for o in 0..co {
        let go = &gs[o * n..(o + 1) * n];
        for c in 0..ci {
            let src = d.padded_plane(padded, c);
            for t in 0..9 {
                let shift = (t / 3) * pw + t % 3;
                let s = &src[shift..shift + n];
                let mut lanes = [0.0; LANES];
                for p in (0..body).step_by(LANES) {
                    let gv: &[f64; LANES] = go[p..p + LANES].try_into().unwrap();
                    let sv: &[f64; LANES] = s[p..p + LANES].try_into().unwrap();
                    for i in 0..LANES {
                        lanes[i] += gv[i] * sv[i];
                    }
                }
                let tail: f64 = go[body..].iter().zip(&s[body..]).map(|(a, b)| a * b).sum();
                gk[(o * ci + c) * 9 + t] = lanes.iter().sum::<f64>() + tail;
            }
        }
    }
    gk
}

/// Runs `$body(args)` through an AVX2-compiled copy when the CPU supports it.
/// No FMA is enabled, so both paths round identically.
macro_rules! dispatch_avx2 {
    ($body:ident, $ret:ty, ($($arg:ident: $ty:ty),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            fn avx2($($arg: $ty),*) -> $ret {
                $body($($arg),*)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected above.
                return unsafe { avx2($($arg),*) };
            }
        }
        $body($($arg),*)
    }};
}

fn conv_forward(d: ConvDims, padded: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    dispatch_avx2!(conv_forward_body, Vec<f64>, (d: ConvDims, padded: &[f64], k: &[f64], bias: &[f64]))
}

fn conv_input_grad(d: ConvDims, gpad: &[f64], k: &[f64]) -> Vec<f64> {
    dispatch_avx2!(conv_input_grad_body, Vec<f64>, (d: ConvDims, gpad: &[f64], k: &[f64]))
}

fn conv_kernel_grad(d: ConvDims, padded: &[f64], g: &[f64]) -> Vec<f64> {
    dispatch_avx2!(conv_kernel_grad_body, Vec<f64>, (d: ConvDims, padded: &[f64], g: &[f64]))
}

/// 3x3 convolution with zero padding of width one ("same" output size).
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (ci, co, h, w) = check_conv(input, kernel, bias)?;
    let d = ConvDims { ci, co, h, w };
    let padded = pad_planes(input.data(), ci, h, w);
    let out = conv_forward(d, &padded, kernel.data(), bias.data());
    Tensor::new(vec![co, h, w], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, need: [bool; 3]) -> ConvGrads {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = kernel.shape()[0];
    let d = ConvDims { ci, co, h, w };
    let g = grad_out.data();

    let grad_input = need[0].then(|| {
        let gpad = pad_planes(g, co, h, w);
        let gi = conv_input_grad(d, &gpad, kernel.data());
        Tensor::new(vec![ci, h, w], gi).expect("conv input grad shape")
    });
    let grad_kernel = need[1].then(|| {
        let padded = pad_planes(input.data(), ci, h, w);
        let gk = conv_kernel_grad(d, &padded, g);
        Tensor::new(kernel.shape().to_vec(), gk).expect("conv kernel grad shape")
    });
    let grad_bias = need[2].then(|| {
        let gb = (0..co).map(|o| g[o * h * w..(o + 1) * h * w].iter().sum()).collect();
        Tensor::from_vec(gb)
    });

    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// 2x2 non-overlapping max pooling. Also returns, for every output element,
/// the flat input index that won (first in row-major order on ties).
pub fn maxpool2_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>), TensorError> {
    let (c, h, w) = chw(input, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2", format!("spatial size {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let top = base + 2 * y * w + 2 * x;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor, TensorError> {
    maxpool2_with_argmax(input).map(|(t, _)| t)
}

pub(crate) fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let d = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    gi
}

/// Per-channel spatial mean: `[C,H,W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = chw(input, "global_avg_pool")?;
    let hw = h * w;
    let n = hw as f64;
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), c);
    Ok(Tensor::from_vec(out))
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let hw = input_shape[1] * input_shape[2];
    let n = hw as f64;
    let mut data = Vec::with_capacity(input_shape[0] * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / n, hw));
    }
    Tensor::new(input_shape.to_vec(), data).expect("gap grad shape")
}

/// Fully connected layer: `weight · input + bias`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let n_in = vector_len(input, "dense")?;
    let (n_out, w_in) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(shape_err("dense", format!("weight must be 2-D, got {s:?}"))),
    };
    if w_in != n_in {
        return Err(shape_err(
            "dense",
            format!("input length {n_in} does not match weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [n_out] {
        return Err(shape_err(
            "dense",
            format!("bias shape {:?} does not match {n_out} outputs", bias.shape()),
        ));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n_in)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_vec(out))
}

pub(crate) fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let n_in = input.len();
    let g = grad_out.data();
    let gi = need[0].then(|| {
        let mut gi = vec![0.0; n_in];
        for (row, gv) in weight.data().chunks_exact(n_in).zip(g) {
            for (d, w) in gi.iter_mut().zip(row) {
                *d += w * gv;
            }
        }
        Tensor::from_vec(gi)
    });
    let gw = need[1].then(|| {
        let mut gw = Vec::with_capacity(weight.len());
        for gv in g {
            gw.extend(input.data().iter().map(|x| gv * x));
        }
        Tensor::new(weight.shape().to_vec(), gw).expect("dense weight grad shape")
    });
    let gb = need[2].then(|| grad_out.clone());
    (gi, gw, gb)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient 0 at exactly zero.
pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu grad shape")
}

/// Max-shifted softmax over a vector of logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    let k = vector_len(logits, "softmax")?;
    if k < 2 {
        return Err(shape_err("softmax", "need at least two logits"));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::from_vec(exps.into_iter().map(|e| e / total).collect()))
}

pub(crate) fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let p = probs.data();
    let g = grad_out.data();
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    Tensor::from_vec(p.iter().zip(g).map(|(pk, gk)| pk * (gk - dot)).collect())
}

/// `-ln(max(probs[class], PROB_FLOOR))`.
pub fn cross_entropy(probs: &Tensor, class: usize) -> Result<f64, TensorError> {
    let k = vector_len(probs, "cross_entropy")?;
    if class >= k {
        return Err(TensorError::ClassIndex {
            index: class,
            classes: k,
        });
    }
    Ok(-probs.data()[class].max(PROB_FLOOR).ln())
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, class: usize, grad_out: f64) -> Tensor {
    let mut g = Tensor::zeros(probs.shape());
    let p = probs.data()[class];
    if p > PROB_FLOOR {
        g.data_mut()[class] = -grad_out / p;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn conv_all_ones() {
        let input = t3(1, 3, 3, vec![1.0; 9]);
        let kernel = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t3(2, 4, 5, (0..40).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0 center
        k[3 * 9 + 4] = 1.0; // out 1 <- in 1 center
        let kernel = Tensor::new(vec![2, 2, 3, 3], k).unwrap();
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let input = Tensor::zeros(&[3, 4, 4]);
        let kernel = Tensor::full(&[2, 3, 3, 3], 0.7);
        let bias = Tensor::from_vec(vec![1.5, -2.0]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        assert!(out.data()[..16].iter().all(|&v| v == 1.5));
        assert!(out.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let kernel = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&input, &kernel, &Tensor::zeros(&[1])),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let out = maxpool2(&t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let (out, arg) = maxpool2_with_argmax(&t3(1, 2, 2, vec![5.0, 5.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(arg, vec![0]);
        let c = maxpool2(&Tensor::full(&[2, 4, 4], 0.25)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        assert!(maxpool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn gap_values() {
        let mut d = vec![1.0; 4];
        d.extend([3.0; 4]);
        assert_eq!(global_avg_pool(&t3(2, 2, 2, d)).unwrap().data(), &[1.0, 3.0]);
        assert_eq!(
            global_avg_pool(&t3(1, 2, 2, vec![0.0, 2.0, 4.0, 6.0])).unwrap().data(),
            &[3.0]
        );
    }

    #[test]
    fn dense_values() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = dense(&Tensor::from_vec(vec![2.0, 3.0]), &w, &Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(vec![-0.5, 4.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        assert!(dense(&Tensor::from_vec(vec![1.0; 3]), &eye, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        let r = relu(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&r), r);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_values() {
        let p = softmax(&Tensor::from_vec(vec![0.0; 3])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Tensor::from_vec(vec![2f64.ln(), 0.0, 0.0])).unwrap();
        for (v, e) in p.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((v - e).abs() < 1e-15);
        }
        let p = softmax(&Tensor::from_vec(vec![1000.0, 0.0, 0.0])).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(softmax(&Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let u = Tensor::from_vec(vec![1.0 / 3.0; 3]);
        for c in 0..3 {
            assert!((cross_entropy(&u, c).unwrap() - 3f64.ln()).abs() < 1e-15);
        }
        assert_eq!(cross_entropy(&Tensor::from_vec(vec![1.0, 0.0, 0.0]), 0).unwrap(), 0.0);
        let clamped = cross_entropy(&Tensor::from_vec(vec![0.0, 1.0, 0.0]), 0).unwrap();
        assert!((clamped - 27.631021115928547).abs() < 1e-12);
        assert_eq!(
            cross_entropy(&u, 3),
            Err(TensorError::ClassIndex { index: 3, classes: 3 })
        );
    }
}
