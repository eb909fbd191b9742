//! Tensor-level reverse-mode differentiation.
//!
//! Every operation appends a node to an arena. Node inputs always have
//! smaller indices than the node itself, so the arena order is a topological
//! order and the backward pass is a single reverse sweep.

use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{NnError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry, batch: usize },
    ConvBlock { input: Var, weight: Var, bias: Var, geom: ConvGeometry, batch: usize, argmax: Vec<u32> },
    MaxPool { input: Var, argmax: Vec<u32> },
    Dense { input: Var, weight: Var, bias: Var, batch: usize },
    Relu { input: Var },
    Dropout { input: Var, scale: Vec<T> },
    GlobalAvgPool { input: Var, plane: usize },
    Concat { left: Var, right: Var, batch: usize },
    GatherRows { input: Var, index: Vec<usize> },
    Mul { left: Var, right: Var },
    Sum { input: Var },
    Mse { pred: Var, target: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. }
            | Op::ConvBlock { input, weight, bias, .. }
            | Op::Dense { input, weight, bias, .. } => {
                vec![*input, *weight, *bias]
            }
            Op::MaxPool { input, .. }
            | Op::Relu { input }
            | Op::Dropout { input, .. }
            | Op::GlobalAvgPool { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::Concat { left, right, .. } | Op::Mul { left, right } => vec![*left, *right],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not reach it.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn dim_err(msg: String) -> NnError {
    NnError::Dimension(msg)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn into_value(mut self, var: Var) -> Tensor<T> {
        self.nodes.swap_remove(var.0).value
    }

    /// Fails with a numeric error naming `layer` if `var` holds NaN or Inf.
    pub fn ensure_finite(&self, var: Var, layer: &str) -> Result<(), NnError> {
        if self.value(var).is_finite() {
            Ok(())
        } else {
            Err(NnError::NonFinite(layer.to_string()))
        }
    }

    /// Checks conv operands and returns the geometry, batch size and whether
    /// the input was a single unbatched sample.
    fn conv_geometry(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<(ConvGeometry, usize, bool), NnError> {
        if stride == 0 {
            return Err(NnError::Parameter("conv2d stride must be at least 1".into()));
        }
        let x = self.value(input).shape();
        let (batch, c, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(dim_err(format!("conv2d input must be rank 3 or 4, got {x:?}"))),
        };
        let ws = self.value(weight).shape();
        let [o, wc, kh, kw] = *ws else {
            return Err(dim_err(format!("conv2d kernels must be [O, C, k, k], got {ws:?}")));
        };
        if wc != c {
            return Err(dim_err(format!("conv2d input has {c} channels, kernels expect {wc}")));
        }
        if kh != kw {
            return Err(dim_err(format!("conv2d kernels must be square, got {kh}x{kw}")));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err(format!("kernel {kh} larger than padded input {h}x{w} (padding {padding})")));
        }
        if self.value(bias).shape() != [o] {
            return Err(dim_err(format!("conv2d bias must be [{o}], got {:?}", self.value(bias).shape())));
        }
        let geom = ConvGeometry { in_channels: c, height: h, width: w, out_channels: o, kernel: kh, padding, stride };
        Ok((geom, batch, x.len() == 3))
    }

    /// Cross-correlation over `[C, H, W]` or `[B, C, H, W]` input with
    /// `[O, C, k, k]` kernels and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize, stride: usize) -> Result<Var, NnError> {
        let (geom, batch, single) = self.conv_geometry(input, weight, bias, padding, stride)?;
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let (o, oh, ow) = (geom.out_channels, geom.out_height(), geom.out_width());
        let shape = if single { vec![o, oh, ow] } else { vec![batch, o, oh, ow] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, batch }))
    }

    /// `relu(maxpool2d(conv2d(input, weight, bias, padding, 1), 2))` as one
    /// node, with the same values and gradients as the three ops. The
    /// full-resolution conv output is never stored. Fails with a numeric
    /// error naming `layer` if any conv value is not finite.
    pub fn conv_pool_relu(&mut self, input: Var, weight: Var, bias: Var, padding: usize, layer: &str) -> Result<Var, NnError> {
        let (geom, batch, single) = self.conv_geometry(input, weight, bias, padding, 1)?;
        let (o, oh, ow) = (geom.out_channels, geom.out_height(), geom.out_width());
        if oh % 2 != 0 || ow % 2 != 0 {
            return Err(dim_err(format!("conv_pool_relu: conv output {oh}x{ow} not divisible by 2")));
        }
        let block = kernels::conv_block_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        if !block.finite {
            return Err(NnError::NonFinite(layer.to_string()));
        }
        let shape = if single { vec![o, oh / 2, ow / 2] } else { vec![batch, o, oh / 2, ow / 2] };
        let value = Tensor::new(&shape, block.output)?;
        Ok(self.push(value, Op::ConvBlock { input, weight, bias, geom, batch, argmax: block.argmax }))
    }

    /// Non-overlapping max pooling over the two trailing dimensions.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var, NnError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 || window == 0 {
            return Err(dim_err(format!("maxpool2d needs rank >= 2 and window >= 1, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % window != 0 || w % window != 0 {
            return Err(dim_err(format!("maxpool2d: {h}x{w} not divisible by window {window}")));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool_forward(planes, h, w, window, self.value(input).data());
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape[n - 2] = h / window;
        out_shape[n - 1] = w / window;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// Affine map of `[n]` or `[B, n]` input by `[m, n]` weights.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, NnError> {
        let x = self.value(input).shape();
        let (batch, n, single) = match *x {
            [n] => (1, n, true),
            [b, n] => (b, n, false),
            _ => return Err(dim_err(format!("dense input must be rank 1 or 2, got {x:?}"))),
        };
        let ws = self.value(weight).shape();
        let [m, wn] = *ws else {
            return Err(dim_err(format!("dense weights must be [m, n], got {ws:?}")));
        };
        if wn != n {
            return Err(dim_err(format!("dense input width {n} does not match weights {ws:?}")));
        }
        if self.value(bias).shape() != [m] {
            return Err(dim_err(format!("dense bias must be [{m}], got {:?}", self.value(bias).shape())));
        }
        let out = kernels::dense_forward(
            batch,
            n,
            m,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = if single { vec![m] } else { vec![batch, m] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias, batch }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(value, Op::Relu { input })
    }

    /// Inverted dropout. In eval mode (`training == false`) this records an
    /// exact identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let x = self.value(input);
        let keep = T::of(1.0 / (1.0 - rate));
        let scale: Vec<T> = if training && rate > 0.0 {
            (0..x.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
        } else {
            vec![T::one(); x.len()]
        };
        let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::Dropout { input, scale }))
    }

    /// Mean over each spatial plane: `[C, H, W] -> [C]`, `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, NnError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 3 {
            return Err(dim_err(format!("global_avg_pool needs rank >= 3, got {shape:?}")));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let inv = T::of(1.0 / plane as f64);
        let data = self.value(input).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&shape[..shape.len() - 2], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { input, plane }))
    }

    /// Row-wise concatenation of `[B, a]` and `[B, b]`.
    pub fn concat(&mut self, left: Var, right: Var) -> Result<Var, NnError> {
        let (ls, rs) = (self.value(left).shape(), self.value(right).shape());
        let ([lb, a], [rb, b]) = (ls, rs) else {
            return Err(dim_err(format!("concat needs two matrices, got {ls:?} and {rs:?}")));
        };
        if lb != rb {
            return Err(dim_err(format!("concat batch mismatch {lb} vs {rb}")));
        }
        let (batch, a, b) = (*lb, *a, *b);
        let (l, r) = (self.value(left).data(), self.value(right).data());
        let mut data = Vec::with_capacity(batch * (a + b));
        for i in 0..batch {
            data.extend_from_slice(&l[i * a..(i + 1) * a]);
            data.extend_from_slice(&r[i * b..(i + 1) * b]);
        }
        let value = Tensor::new(&[batch, a + b], data)?;
        Ok(self.push(value, Op::Concat { left, right, batch }))
    }

    /// Selects rows of the leading dimension: `out[i] = input[index[i]]`.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var, NnError> {
        let shape = self.value(input).shape().to_vec();
        let rows = shape[0];
        if index.is_empty() {
            return Err(dim_err("gather_rows with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err(format!("gather_rows index {bad} out of range for {rows} rows")));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::GatherRows { input, index: index.to_vec() }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, left: Var, right: Var) -> Result<Var, NnError> {
        let (l, r) = (self.value(left), self.value(right));
        if l.shape() != r.shape() {
            return Err(dim_err(format!("mul shape mismatch {:?} vs {:?}", l.shape(), r.shape())));
        }
        let data = l.data().iter().zip(r.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(l.shape(), data)?;
        Ok(self.push(value, Op::Mul { left, right }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::full(&[1], s), Op::Sum { input })
    }

    /// Mean squared error over every entry.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(dim_err(format!("mse shape mismatch {:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = T::of(p.len() as f64);
        let s = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::full(&[1], s), Op::Mse { pred, target }))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(NnError::Internal(format!("loss {loss:?} not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!("loss must be a scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            let inputs = node.op.inputs();
            if inputs.iter().any(|v| v.0 >= i) {
                return Err(NnError::Internal(format!("tape cycle at node {i}")));
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            let mut acc = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, geom, batch } => {
                    let cg = kernels::conv2d_backward(
                        geom,
                        *batch,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                        wants(*input),
                    );
                    if let Some(dx) = cg.input {
                        acc(*input, dx);
                    }
                    if wants(*weight) {
                        acc(*weight, cg.weight);
                    }
                    if wants(*bias) {
                        acc(*bias, cg.bias);
                    }
                }
                Op::ConvBlock { input, weight, bias, geom, batch, argmax } => {
                    let cg = kernels::conv_block_backward(
                        geom,
                        *batch,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        node.value.data(),
                        argmax,
                        &g,
                        wants(*input),
                    );
                    if let Some(dx) = cg.input {
                        acc(*input, dx);
                    }
                    if wants(*weight) {
                        acc(*weight, cg.weight);
                    }
                    if wants(*bias) {
                        acc(*bias, cg.bias);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if wants(*input) {
                        let shape = self.value(*input).shape();
                        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                        let planes = self.value(*input).len() / (h * w);
                        let window = h / node.value.shape()[shape.len() - 2];
                        acc(*input, kernels::maxpool_backward(planes, h, w, window, argmax, &g));
                    }
                }
                Op::Dense { input, weight, bias, batch } => {
                    let ws = self.value(*weight).shape();
                    let (m, k) = (ws[0], ws[1]);
                    let dg = kernels::dense_backward(
                        *batch,
                        k,
                        m,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                    );
                    if wants(*input) {
                        acc(*input, dg.input);
                    }
                    if wants(*weight) {
                        acc(*weight, dg.weight);
                    }
                    if wants(*bias) {
                        acc(*bias, dg.bias);
                    }
                }
                Op::Relu { input } => {
                    if wants(*input) {
                        let x = self.value(*input).data();
                        let d = x.iter().zip(&g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                        acc(*input, d);
                    }
                }
                Op::Dropout { input, scale } => {
                    if wants(*input) {
                        acc(*input, g.iter().zip(scale).map(|(&a, &s)| a * s).collect());
                    }
                }
                Op::GlobalAvgPool { input, plane } => {
                    if wants(*input) {
                        let inv = T::of(1.0 / *plane as f64);
                        let d = g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(*plane)).collect();
                        acc(*input, d);
                    }
                }
                Op::Concat { left, right, batch } => {
                    let a = self.value(*left).len() / batch;
                    let b = self.value(*right).len() / batch;
                    if wants(*left) {
                        let d = g.chunks(a + b).flat_map(|row| row[..a].to_vec()).collect();
                        acc(*left, d);
                    }
                    if wants(*right) {
                        let d = g.chunks(a + b).flat_map(|row| row[a..].to_vec()).collect();
                        acc(*right, d);
                    }
                }
                Op::GatherRows { input, index } => {
                    if wants(*input) {
                        let src = self.value(*input);
                        let row = src.len() / src.shape()[0];
                        let mut d = vec![T::zero(); src.len()];
                        for (k, &r) in index.iter().enumerate() {
                            d[r * row..(r + 1) * row]
                                .iter_mut()
                                .zip(&g[k * row..(k + 1) * row])
                                .for_each(|(a, &v)| *a += v);
                        }
                        acc(*input, d);
                    }
                }
                Op::Mul { left, right } => {
                    if wants(*left) {
                        let r = self.value(*right).data();
                        acc(*left, g.iter().zip(r).map(|(&a, &b)| a * b).collect());
                    }
                    if wants(*right) {
                        let l = self.value(*left).data();
                        acc(*right, g.iter().zip(l).map(|(&a, &b)| a * b).collect());
                    }
                }
                Op::Sum { input } => {
                    if wants(*input) {
                        acc(*input, vec![g[0]; self.value(*input).len()]);
                    }
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    let k = g[0] * T::of(2.0 / p.len() as f64);
                    if wants(*pred) {
                        acc(*pred, p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect());
                    }
                    if wants(*target) {
                        acc(*target, p.iter().zip(t).map(|(&a, &b)| k * (b - a)).collect());
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            shapes.push(node.value.shape().to_vec());
            let keep = matches!(node.op, Op::Leaf) && node.value.requires_grad();
            match g {
                Some(data) if keep => {
                    let t = Tensor::new(node.value.shape(), data)?;
                    if !t.is_finite() {
                        return Err(NnError::NonFinite(format!("gradient of tape node {}", out.len())));
                    }
                    out.push(Some(t));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn fused_block_matches_separate_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (x, w, b, proj) = (r(3 * 2 * 8 * 6), r(4 * 2 * 9), r(4), r(3 * 4 * 4 * 3));
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(t(&[3, 2, 8, 6], &x).with_grad());
            let wv = tape.leaf(t(&[4, 2, 3, 3], &w).with_grad());
            let bv = tape.leaf(t(&[4], &b).with_grad());
            let y = if fused {
                tape.conv_pool_relu(xv, wv, bv, 1, "block").unwrap()
            } else {
                let c = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                let p = tape.maxpool2d(c, 2).unwrap();
                tape.relu(p)
            };
            let pv = tape.leaf(t(&[3, 4, 4, 3], &proj));
            let m = tape.mul(y, pv).unwrap();
            let loss = tape.sum(m);
            let mut g = tape.backward(loss).unwrap();
            (tape.value(y).clone(), [g.take(xv), g.take(wv), g.take(bv)])
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn fused_block_reports_non_finite_conv_values() {
        let mut tape = Tape::new();
        let mut x = vec![0.0; 16];
        x[5] = f64::NAN;
        let xv = tape.leaf(t(&[1, 1, 4, 4], &x));
        let wv = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let bv = tape.leaf(t(&[1], &[0.0]));
        let err = tape.conv_pool_relu(xv, wv, bv, 1, "conv2").unwrap_err();
        assert_eq!(err, NnError::NonFinite("conv2".into()));
        let odd = tape.leaf(t(&[1, 1, 5, 5], &[0.0; 25]));
        assert!(tape.conv_pool_relu(odd, wv, bv, 1, "conv2").is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_grad());
        let s = tape.sum(x);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &[1.0; 6]);
    }

    #[test]
    fn linear_loss_gradient_equals_coefficients() {
        let mut tape = Tape::new();
        let c = [0.5, -1.5, 2.0, 3.25];
        let x = tape.leaf(t(&[4], &[7.0, 1.0, -3.0, 0.1]).with_grad());
        let cv = tape.leaf(t(&[4], &c));
        let p = tape.mul(cv, x).unwrap();
        let s = tape.sum(p);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &c);
        assert!(g.get(cv).is_none());
    }

    #[test]
    fn scalar_weight_mse_matches_hand_derivative() {
        let (w0, x0, y0) = (1.7, 0.6, 2.0);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[x0]));
        let w = tape.leaf(t(&[1, 1], &[w0]).with_grad());
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.leaf(t(&[1], &[y0]));
        let p = tape.dense(x, w, b).unwrap();
        let l = tape.mse(p, y).unwrap();
        let mut g = tape.backward(l).unwrap();
        let dw = g.take(w).data()[0];
        assert!((dw - 2.0 * x0 * (w0 * x0 - y0)).abs() < 1e-12);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = tape.sum(a);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        // sum(x * x) has gradient 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(NnError::Dimension(_))));
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let gth = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(gth).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(gth);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather_rows(x, &[2]).is_err());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(NnError::Parameter(_))));
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn non_finite_values_are_reported_by_layer() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, f64::NAN]));
        match tape.ensure_finite(x, "probe") {
            Err(NnError::NonFinite(name)) => assert_eq!(name, "probe"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
