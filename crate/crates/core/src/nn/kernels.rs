//! Slice-level kernels shared by the tape and the standalone ops.
//!
//! All batched kernels treat the leading dimension as the batch and are
//! deterministic regardless of the rayon pool size: work is split into
//! fixed-size sample chunks and partial reductions are summed in chunk order.

use rayon::prelude::*;

use super::Scalar;

/// Samples per parallel work unit. Fixed so reductions never depend on the
/// number of worker threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kj - padding` lies
/// inside the image, for stride 1.
fn valid_span(g: &ConvGeometry, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).min(ow);
    let hi = (g.width + g.padding).saturating_sub(kj).min(ow);
    (lo, hi)
}

/// Sum with eight interleaved accumulators. A single running sum is a serial
/// dependency chain the compiler cannot vectorize.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v;
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + v);
    lanes.iter().fold(T::zero(), |a, &v| a + v) + tail
}

/// Unfolds one `[C, H, W]` sample into a `[C*k*k, H'*W']` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let channel = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj, ow);
                        line[..lo].fill(T::zero());
                        line[hi.max(lo)..].fill(T::zero());
                        if lo < hi {
                            let shift = lo as isize + kj as isize - pad;
                            line[lo..hi].copy_from_slice(&src[shift as usize..shift as usize + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dinput: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let channel = &mut dinput[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj, ow);
                        if lo < hi {
                            let shift = (lo as isize + kj as isize - pad) as usize;
                            let line = &src[oy * ow + lo..oy * ow + hi];
                            dst[shift..shift + hi - lo].iter_mut().zip(line).for_each(|(d, &v)| *d += v);
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `weight` is `[O, C*k*k]`, output `[B, O, H', W']`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch_len());
    let mut out = Vec::with_capacity(batch * out_len);
    for _ in 0..batch {
        for &b in &bias[..g.out_channels] {
            out.extend(std::iter::repeat(b).take(plane));
        }
    }
    out.par_chunks_mut(out_len)
        .zip(input.par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); patch * plane],
            |cols, (dst, src)| {
                im2col(g, src, cols);
                T::gemm(g.out_channels, patch, plane, T::one(), weight, false, cols, false, T::one(), dst);
            },
        );
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    conv_backward(g, batch, input, weight, &OutputGrad::Direct(dout), need_input)
}

/// Where a conv backward pass reads each sample's output gradient from.
enum OutputGrad<'a, T> {
    Direct(&'a [T]),
    /// Gradient of a fused block output, routed back through relu and the
    /// 2x2 pool onto the conv plane.
    Block { output: &'a [T], argmax: &'a [u32], dout: &'a [T] },
}

impl<T: Scalar> OutputGrad<'_, T> {
    fn sample<'s>(&'s self, b: usize, out_len: usize, scratch: &'s mut [T]) -> &'s [T] {
        match self {
            OutputGrad::Direct(d) => &d[b * out_len..(b + 1) * out_len],
            OutputGrad::Block { output, argmax, dout } => {
                let pooled = out_len / 4;
                let range = b * pooled..(b + 1) * pooled;
                scratch.fill(T::zero());
                for ((&y, &at), &gv) in output[range.clone()].iter().zip(&argmax[range.clone()]).zip(&dout[range]) {
                    if y > T::zero() {
                        scratch[at as usize] += gv;
                    }
                }
                scratch
            }
        }
    }
}

fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    source: &OutputGrad<'_, T>,
    need_input: bool,
) -> ConvGrads<T> {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch_len());
    let wlen = g.out_channels * patch;
    let mut dinput = if need_input { vec![T::zero(); batch * in_len] } else { Vec::new() };

    let chunk_grads = |start: usize, dchunk: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let end = (start + CHUNK).min(batch);
        let mut dw = vec![T::zero(); wlen];
        let mut db = vec![T::zero(); g.out_channels];
        let mut cols = vec![T::zero(); patch * plane];
        let mut dcols = if need_input { vec![T::zero(); patch * plane] } else { Vec::new() };
        let mut scratch = match source {
            OutputGrad::Direct(_) => Vec::new(),
            OutputGrad::Block { .. } => vec![T::zero(); out_len],
        };
        let mut dchunk = dchunk;
        for b in start..end {
            let x = &input[b * in_len..(b + 1) * in_len];
            let dy = source.sample(b, out_len, &mut scratch);
            for (o, row) in dy.chunks(plane).enumerate() {
                db[o] += lane_sum(row);
            }
            im2col(g, x, &mut cols);
            T::gemm(g.out_channels, plane, patch, T::one(), dy, false, &cols, true, T::one(), &mut dw);
            if let Some(dx_all) = dchunk.as_deref_mut() {
                T::gemm(patch, g.out_channels, plane, T::one(), weight, true, dy, false, T::zero(), &mut dcols);
                let local = b - start;
                col2im(g, &dcols, &mut dx_all[local * in_len..(local + 1) * in_len]);
            }
        }
        (dw, db)
    };

    let starts: Vec<usize> = (0..batch).step_by(CHUNK).collect();
    let partials: Vec<(Vec<T>, Vec<T>)> = if need_input {
        dinput
            .par_chunks_mut(CHUNK * in_len)
            .zip(starts.par_iter())
            .map(|(dx, &s)| chunk_grads(s, Some(dx)))
            .collect()
    } else {
        starts.par_iter().map(|&s| chunk_grads(s, None)).collect()
    };

    let mut weight_grad = vec![T::zero(); wlen];
    let mut bias_grad = vec![T::zero(); g.out_channels];
    for (dw, db) in partials {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
    }
    ConvGrads { input: need_input.then_some(dinput), weight: weight_grad, bias: bias_grad }
}

/// Output of [`conv_block_forward`].
pub struct ConvBlock<T> {
    /// `[B, O, H'/2, W'/2]` after pooling and relu.
    pub output: Vec<T>,
    /// Per pooled cell, the index of its maximum within the sample's
    /// `[O, H', W']` conv output.
    pub argmax: Vec<u32>,
    /// Whether every pre-pool conv value was finite.
    pub finite: bool,
}

/// Convolution, 2x2 max pooling and relu, one sample at a time so the
/// full-resolution conv output stays in a per-thread scratch buffer. Values
/// match the three kernels applied in sequence.
pub fn conv_block_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> ConvBlock<T> {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch_len());
    let ow = g.out_width();
    let pooled = out_len / 4;
    let mut output = vec![T::zero(); batch * pooled];
    let mut argmax = vec![0u32; batch * pooled];
    let finite: Vec<bool> = output
        .par_chunks_mut(pooled)
        .zip(argmax.par_chunks_mut(pooled))
        .zip(input.par_chunks(in_len))
        .map_init(
            || (vec![T::zero(); patch * plane], vec![T::zero(); out_len]),
            |(cols, conv), ((vals, idx), src)| {
                for (row, &b) in conv.chunks_mut(plane).zip(bias) {
                    row.fill(b);
                }
                im2col(g, src, cols);
                T::gemm(g.out_channels, patch, plane, T::one(), weight, false, cols, false, T::one(), conv);
                let finite = conv.chunks(256).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()));
                for (o, (v, ix)) in vals.chunks_mut(plane / 4).zip(idx.chunks_mut(plane / 4)).enumerate() {
                    pool2_plane(&conv[o * plane..(o + 1) * plane], ow, o * plane, v, ix);
                }
                for v in vals.iter_mut() {
                    if !(*v > T::zero()) {
                        *v = T::zero();
                    }
                }
                finite
            },
        )
        .collect();
    ConvBlock { output, argmax, finite: finite.into_iter().all(|f| f) }
}

/// Gradients of [`conv_block_forward`] given its `output` and `argmax`.
#[allow(clippy::too_many_arguments)]
pub fn conv_block_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    output: &[T],
    argmax: &[u32],
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    conv_backward(g, batch, input, weight, &OutputGrad::Block { output, argmax, dout }, need_input)
}

/// Max pooling over non-overlapping `window x window` tiles of `planes`
/// independent `[H, W]` planes. Returns values and the flat input index of
/// each maximum (first in row-major order on ties).
pub fn maxpool_forward<T: Scalar>(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    input: &[T],
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (height / window, width / window);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (vals, idx))| {
            let base = p * height * width;
            if window == 2 {
                pool2_plane(&input[base..base + height * width], width, base, vals, idx);
                return;
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = base + oy * window * width + ox * window;
                    let mut best = input[best_i];
                    for dy in 0..window {
                        let row = base + (oy * window + dy) * width + ox * window;
                        for dx in 0..window {
                            let v = input[row + dx];
                            if v > best {
                                best = v;
                                best_i = row + dx;
                            }
                        }
                    }
                    vals[oy * ow + ox] = best;
                    idx[oy * ow + ox] = best_i as u32;
                }
            }
        });
    (out, arg)
}

fn pool2_plane<T: Scalar>(plane: &[T], width: usize, base: usize, vals: &mut [T], idx: &mut [u32]) {
    let ow = width / 2;
    for (oy, (rows, (v, ix))) in plane
        .chunks_exact(2 * width)
        .zip(vals.chunks_exact_mut(ow).zip(idx.chunks_exact_mut(ow)))
        .enumerate()
    {
        let (top, bottom) = rows.split_at(width);
        let row0 = base + 2 * oy * width;
        for ox in 0..ow {
            let c = 2 * ox;
            let mut best = top[c];
            let mut at = row0 + c;
            if top[c + 1] > best {
                best = top[c + 1];
                at = row0 + c + 1;
            }
            if bottom[c] > best {
                best = bottom[c];
                at = row0 + width + c;
            }
            if bottom[c + 1] > best {
                best = bottom[c + 1];
                at = row0 + width + c + 1;
            }
            v[ox] = best;
            ix[ox] = at as u32;
        }
    }
}

/// Routes `dout` back to the recorded maxima of `[planes, height, width]`
/// input pooled by `window`.
pub fn maxpool_backward<T: Scalar>(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    argmax: &[u32],
    dout: &[T],
) -> Vec<T> {
    let input_len = planes * height * width;
    if window == 2 {
        return pool2_backward(input_len, width, argmax, dout);
    }
    let mut dinput = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dinput[i as usize] += g;
    }
    dinput
}

/// Single pass over the input: every tile writes its gradient at the argmax
/// and zeros elsewhere, in row-major order.
fn pool2_backward<T: Scalar>(input_len: usize, width: usize, argmax: &[u32], dout: &[T]) -> Vec<T> {
    let ow = width / 2;
    let mut dinput = Vec::with_capacity(input_len);
    for (g, at) in dout.chunks_exact(ow).zip(argmax.chunks_exact(ow)) {
        for _ in 0..2 {
            for (&gv, &a) in g.iter().zip(at) {
                for _ in 0..2 {
                    let pos = dinput.len() as u32;
                    dinput.push(if pos == a { gv } else { T::zero() });
                }
            }
        }
    }
    debug_assert_eq!(dinput.len(), input_len);
    dinput
}

/// `y[B, m] = x[B, n] * w[m, n]^T + b[m]`.
pub fn dense_forward<T: Scalar>(batch: usize, n: usize, m: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    T::gemm(batch, n, m, T::one(), x, false, w, true, T::one(), &mut y);
    y
}

pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Scalar>(
    batch: usize,
    n: usize,
    m: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> DenseGrads<T> {
    let mut dx = vec![T::zero(); batch * n];
    T::gemm(batch, m, n, T::one(), dy, false, w, false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); m * n];
    T::gemm(m, batch, n, T::one(), dy, true, x, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); m];
    for row in dy.chunks(m) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
    }
    DenseGrads { input: dx, weight: dw, bias: db }
}
