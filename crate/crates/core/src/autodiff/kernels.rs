//! Forward and backward kernels on raw NHWC buffers.

use super::scalar::{matmul, MatRef};
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Number of output positions over the whole batch.
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Length of one unrolled receptive field.
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, patch, c) = (g.out_height(), g.out_width(), g.patch(), g.channels);
    let mut cols = vec![T::zero(); g.positions() * patch];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * g.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow, patch, c) = (g.out_height(), g.out_width(), g.patch(), g.channels);
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * g.kernel + kx) * c;
                        for (d, &s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the `[positions, out_channels]` output and the unrolled input.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let positions = g.positions();
    let mut out = vec![T::zero(); positions * g.out_channels];
    matmul(
        MatRef::new(&cols, positions, g.patch()),
        MatRef::new(kernel, g.out_channels, g.patch()).t(),
        &mut out,
        false,
    );
    for row in out.chunks_exact_mut(g.out_channels) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    kernel: &[T],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let positions = g.positions();
    let dout_m = MatRef::new(dout, positions, g.out_channels);
    let input = need[0].then(|| {
        let mut dcols = vec![T::zero(); positions * g.patch()];
        matmul(dout_m, MatRef::new(kernel, g.out_channels, g.patch()), &mut dcols, false);
        let mut dx = vec![T::zero(); g.batch * g.height * g.width * g.channels];
        col2im(&dcols, g, &mut dx);
        dx
    });
    let kernel_grad = need[1].then(|| {
        let mut dk = vec![T::zero(); g.out_channels * g.patch()];
        matmul(dout_m.t(), MatRef::new(cols, positions, g.patch()), &mut dk, false);
        dk
    });
    let bias = need[2].then(|| column_sums(dout, g.out_channels));
    ConvGrads { input, kernel: kernel_grad, bias }
}

fn column_sums<T: Scalar>(m: &[T], cols: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    sums
}

/// 2x2/stride-2 max pooling. Returns the output and, per output element, the
/// flat input index that won. Ties go to the lowest index in the window.
pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool2_backward<T: Scalar>(dout: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(arg) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub(crate) fn relu_backward<T: Scalar>(dout: &[T], x: &[T]) -> Vec<T> {
    dout.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect()
}

/// `x [n, d] * w^T [d, out] + b`.
pub(crate) fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], n: usize, d: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * out];
    matmul(MatRef::new(x, n, d), MatRef::new(weight, out, d).t(), &mut y, false);
    for row in y.chunks_exact_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    y
}

pub(crate) struct LinearGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    n: usize,
    d: usize,
    out: usize,
    need: [bool; 3],
) -> LinearGrads<T> {
    let dout_m = MatRef::new(dout, n, out);
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); n * d];
        matmul(dout_m, MatRef::new(weight, out, d), &mut dx, false);
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); out * d];
        matmul(dout_m.t(), MatRef::new(x, n, d), &mut dw, false);
        dw
    });
    let bias = need[2].then(|| column_sums(dout, out));
    LinearGrads { input, weight: weight_grad, bias }
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(dout: &[T], y: &[T], k: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (g, p) in dout.chunks_exact(k).zip(y.chunks_exact(k)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        dx.extend(g.iter().zip(p).map(|(&gi, &pi)| pi * (gi - dot)));
    }
    dx
}

/// Cross-entropy of row-wise softmax(logits) against `target`, summed over
/// the batch. Returns the loss and the probabilities.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: &[T], k: usize) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(logits.len());
    for (z, t) in logits.chunks_exact(k).zip(target.chunks_exact(k)) {
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_total = total.ln();
        for (&zi, &ti) in z.iter().zip(t) {
            let log_p = zi - max - log_total;
            if ti != T::zero() {
                loss = loss - ti * log_p;
            }
            probs.push(log_p.exp());
        }
    }
    (loss, probs)
}
