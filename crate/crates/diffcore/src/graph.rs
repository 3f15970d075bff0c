use crate::error::{shape_err, DiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
///
/// `backward` returns one gradient buffer per input, each the size of that
/// input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    Mean {
        input: Var,
        map: Vec<usize>,
        count: usize,
    },
    ScaleGroups {
        input: Var,
        coeff: Var,
    },
    Select {
        input: Var,
        index: usize,
    },
    Softmax(Var),
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    WeightedNll {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probabilities below this are clamped before taking logs.
const PROB_FLOOR: f64 = 1e-30;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`, zeros when `v` did not
    /// influence the loss.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution over NCHW input with an `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let is = self.shape(input);
        let ks = self.shape(kernel);
        if is.len() != 4 || ks.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-d input and kernel, got {is:?} and {ks:?}"),
            ));
        }
        if ks[2] != ks[3] {
            return Err(shape_err("conv2d", format!("kernel must be square, got {ks:?}")));
        }
        if is[1] != ks[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but kernel expects {}", is[1], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(DiffError::Invalid {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (h, w, k) = (is[2], is[3], ks[2]);
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}+2*{padding}"),
            ));
        }
        let geom = ConvGeom {
            batch: is[0],
            c_in: is[1],
            h,
            w,
            c_out: ks[0],
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of an NCHW tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if is.len() < 2 || bs.len() != 1 || bs[0] != is[1] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {bs:?} does not match channels of {is:?}"),
            ));
        }
        let plane: usize = is[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(input).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / plane) % is[1]];
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(Tensor::new(is, data)?, Op::ChannelBias { input, bias }, rg))
    }

    /// Affine map `input · weights + bias` for `[B, F_in]` input and
    /// `[F_in, F_out]` weights.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let is = self.shape(input);
        let ws = self.shape(weights);
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
            return Err(shape_err("dense", format!("cannot multiply {is:?} by {ws:?}")));
        }
        let (rows, inner, cols) = (is[0], is[1], ws[1]);
        let mut data = kernels::matmul(self.value(input).data(), self.value(weights).data(), rows, inner, cols);
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [cols] {
                return Err(shape_err(
                    "dense",
                    format!("bias {bs:?} does not match output width {cols}"),
                ));
            }
            let bd = self.value(b).data();
            for row in data.chunks_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::Dense { input, weights, bias },
            rg,
        ))
    }

    /// Plain matrix product, a bias-free [`Graph::dense`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dense(a, b, None)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| T::one() - x);
        let rg = self.rg(&[a]);
        self.push(v, Op::OneMinus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Arithmetic mean over `axes`, which are removed from the shape.
    /// An empty axis list is the identity.
    pub fn global_average_pool(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(shape_err(
                "global_average_pool",
                format!("axis {bad} invalid for {shape:?}"),
            ));
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let (out_shape, map) = kernels::reduction_map(&shape, &axes);
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let out_len: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); out_len];
        for (&o, &x) in map.iter().zip(self.value(a).data()) {
            data[o] += x;
        }
        let inv = T::one() / T::from_usize(count).expect("count fits");
        for v in &mut data {
            *v *= inv;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Mean { input: a, map, count }, rg))
    }

    /// Multiplies every element of group `g` (the leading axis of `input`)
    /// by `coeff[g]`. `coeff` may have any shape with as many elements as
    /// there are groups.
    pub fn scale_groups(&mut self, input: Var, coeff: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let groups = self.value(coeff).len();
        if shape.is_empty() || shape[0] != groups {
            return Err(shape_err(
                "scale_groups",
                format!("{groups} coefficients for leading axis of {shape:?}"),
            ));
        }
        let per = self.value(input).len() / groups;
        let c = self.value(coeff).data().to_vec();
        let mut data = self.value(input).data().to_vec();
        for (g, chunk) in data.chunks_mut(per).enumerate() {
            for v in chunk {
                *v *= c[g];
            }
        }
        let rg = self.rg(&[input, coeff]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleGroups { input, coeff }, rg))
    }

    /// `input[:, index, :]` of a `[A, S, F]` tensor.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(shape_err("select", format!("index {index} on axis 1 of {s:?}")));
        }
        let (a, steps, f) = (s[0], s[1], s[2]);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(a * f);
        for i in 0..a {
            let base = (i * steps + index) * f;
            data.extend_from_slice(&src[base..base + f]);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![a, f], data)?, Op::Select { input, index }, rg))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&cols) = shape.last() else {
            return Err(shape_err("softmax", "scalar input"));
        };
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), rg))
    }

    /// `mean_b w_b · -log softmax(logits_b)[label_b]`, stabilized by
    /// subtracting the row maximum.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.check_loss_args("weighted_cross_entropy", logits, labels, weights)?;
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (b, row) in probs.chunks_mut(cols).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += weights[b] * (lse - row[labels[b]]);
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(rows).expect("rows fit");
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `mean_b w_b · -log probs[b, label_b]` for rows that are already
    /// probability vectors.
    pub fn weighted_nll(&mut self, probs: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.check_loss_args("weighted_nll", probs, labels, weights)?;
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let p = self.value(probs).data();
        let mut total = T::zero();
        for b in 0..rows {
            total += weights[b] * -p[b * cols + labels[b]].max(floor).ln();
        }
        let loss = total / T::from_usize(rows).expect("rows fit");
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    fn check_loss_args(&self, op: &'static str, x: Var, labels: &[usize], weights: &[T]) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected [B, C], got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if labels.len() != rows || weights.len() != rows {
            return Err(shape_err(
                op,
                format!("{rows} rows but {} labels and {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= cols) {
            return Err(DiffError::LabelOutOfRange {
                row,
                label,
                classes: cols,
            });
        }
        if let Some(w) = weights.iter().find(|&&w| w <= T::zero() || !w.is_finite()) {
            return Err(DiffError::Invalid {
                op,
                detail: format!("sample weights must be positive and finite, got {w}"),
            });
        }
        Ok((rows, cols))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` with respect to every
    /// node that requires one. Gradients from an earlier call are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NotScalar(self.shape(loss).to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                propagate(nodes, grads, node, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Accumulates `f`'s contribution into the gradient of `target`.
fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let n = nodes[target.0].value.len();
    let buf = grads[target.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(buf);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, geom } => {
            if needs(*input) {
                let gi = kernels::conv2d_backward_input(geom, val(*kernel), g);
                acc(nodes, grads, *input, |d| add_into(d, &gi));
            }
            if needs(*kernel) {
                let gk = kernels::conv2d_backward_kernel(geom, val(*input), g);
                acc(nodes, grads, *kernel, |d| add_into(d, &gk));
            }
        }
        Op::ChannelBias { input, bias } => {
            acc(nodes, grads, *input, |d| add_into(d, g));
            let shape = nodes[input.0].value.shape();
            let plane: usize = shape[2..].iter().product();
            let channels = shape[1];
            acc(nodes, grads, *bias, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[(i / plane) % channels] += gv;
                }
            });
        }
        Op::Dense { input, weights, bias } => {
            let is = nodes[input.0].value.shape();
            let (rows, inner) = (is[0], is[1]);
            let cols = nodes[weights.0].value.shape()[1];
            if needs(*input) {
                let gx = kernels::matmul_grad_x(g, val(*weights), rows, inner, cols);
                acc(nodes, grads, *input, |d| add_into(d, &gx));
            }
            if needs(*weights) {
                let gw = kernels::matmul_grad_w(val(*input), g, rows, inner, cols);
                acc(nodes, grads, *weights, |d| add_into(d, &gw));
            }
            if let Some(b) = bias {
                acc(nodes, grads, *b, |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for ((d, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            });
        }
        Op::OneMinus(a) => acc(nodes, grads, *a, |d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d -= gv;
            }
        }),
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc(nodes, grads, *a, |d| {
                for ((d, &gv), &s) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * s * (T::one() - s);
                }
            });
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            acc(nodes, grads, *a, |d| {
                for ((d, &gv), &t) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * (T::one() - t * t);
                }
            });
        }
        Op::Relu(a) => {
            let x = val(*a);
            acc(nodes, grads, *a, |d| {
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            });
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |d| add_into(d, g)),
        Op::Mean { input, map, count } => {
            let inv = T::one() / T::from_usize(*count).expect("count fits");
            acc(nodes, grads, *input, |d| {
                for (d, &o) in d.iter_mut().zip(map) {
                    *d += g[o] * inv;
                }
            });
        }
        Op::ScaleGroups { input, coeff } => {
            let c = val(*coeff);
            let x = val(*input);
            let per = x.len() / c.len();
            acc(nodes, grads, *input, |d| {
                for (i, (d, &gv)) in d.iter_mut().zip(g).enumerate() {
                    *d += gv * c[i / per];
                }
            });
            acc(nodes, grads, *coeff, |d| {
                for (grp, (gc, xc)) in g.chunks(per).zip(x.chunks(per)).enumerate() {
                    d[grp] += gc.iter().zip(xc).fold(T::zero(), |s, (&gv, &xv)| s + gv * xv);
                }
            });
        }
        Op::Select { input, index } => {
            let s = nodes[input.0].value.shape();
            let (steps, f) = (s[1], s[2]);
            acc(nodes, grads, *input, |d| {
                for (i, row) in g.chunks(f).enumerate() {
                    let base = (i * steps + index) * f;
                    add_into(&mut d[base..base + f], row);
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let cols = *node.value.shape().last().expect("softmax has an axis");
            acc(nodes, grads, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gv, &yv)| s + gv * yv);
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - dot);
                    }
                }
            });
        }
        Op::WeightedCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => {
            let cols = nodes[logits.0].value.shape()[1];
            let scale = g[0] / T::from_usize(labels.len()).expect("rows fit");
            acc(nodes, grads, *logits, |d| {
                for (b, (drow, prow)) in d.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                    let w = weights[b] * scale;
                    for (c, (dv, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let target = if c == labels[b] { T::one() } else { T::zero() };
                        *dv += w * (p - target);
                    }
                }
            });
        }
        Op::WeightedNll { probs, labels, weights } => {
            let cols = nodes[probs.0].value.shape()[1];
            let p = val(*probs);
            let floor = T::from_f64_lossy(PROB_FLOOR);
            let scale = g[0] / T::from_usize(labels.len()).expect("rows fit");
            acc(nodes, grads, *probs, |d| {
                for (b, &label) in labels.iter().enumerate() {
                    let pv = p[b * cols + label];
                    if pv > floor {
                        d[b * cols + label] -= weights[b] * scale / pv;
                    }
                }
            });
        }
        Op::Sum(a) => acc(nodes, grads, *a, |d| {
            for dv in d.iter_mut() {
                *dv += g[0];
            }
        }),
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let gs = op.backward(&vals, &node.value, g);
            for (v, gi) in inputs.iter().zip(gs) {
                acc(nodes, grads, *v, |d| add_into(d, &gi));
            }
        }
    }
}
