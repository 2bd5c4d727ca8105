use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MaskMul {
        input: Var,
        mask: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (÷M) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

/// A single-use computation record.
///
/// Nodes are appended in evaluation order, so every input id precedes the
/// node that consumes it and a reverse sweep is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every leaf that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Smallest |input| over every ReLU in the graph: the distance of this
    /// evaluation point from the nearest kink. `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.data(x).iter().map(|v| v.as_f64().abs()))
            .reduce(f64::min)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn node(&self, v: Var) -> &Node<T> {
        self.nodes
            .get(v.0)
            .expect("Var does not belong to this graph")
    }

    fn data(&self, v: Var) -> &[T] {
        self.node(v).value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Hyperbolic tangent, saturated one ulp-ish inside the open interval
    /// so outputs stay strictly within (-1, 1).
    pub fn tanh(&mut self, x: Var) -> Var {
        let lim = T::one() - T::epsilon();
        self.unary(x, |v| v.tanh().max(-lim).min(lim), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[mask.len()]));
        }
        let data = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::MaskMul { input: x, mask }, &[x]))
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::conv(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.f] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.f]));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let value = Tensor::new(&geom.output_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel cross-correlation with kernel `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::depthwise(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = kernels::depthwise_forward(&geom, self.data(input), self.data(kernel));
        let value = Tensor::new(&geom.output_shape(), out)?;
        Ok(self.push(
            value,
            Op::Depthwise {
                input,
                kernel,
                geom,
            },
            &[input, kernel],
        ))
    }

    /// Fully connected layer: `x: [N,I]`, `weight: [O,I]`, `bias: [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, i] = self.value(input).dims2("dense")?;
        let [o, wi] = self.value(weight).dims2("dense")?;
        if wi != i {
            return Err(Error::shape("dense", self.shape(input), self.shape(weight)));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("dense bias", self.shape(b), &[o]));
            }
            let bd = self.data(b);
            out.chunks_mut(o).for_each(|row| row.copy_from_slice(bd));
        }
        T::gemm(
            n, i, o, T::one(),
            self.data(input), (i as isize, 1),
            self.data(weight), (1, i as isize),
            T::one(), &mut out, (o as isize, 1),
        );
        let value = Tensor::new(&[n, o], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    fn check_channel_params(&self, op: &'static str, x: Var, p: &[Var]) -> Result<[usize; 4]> {
        let dims = self.value(x).dims4(op)?;
        for &v in p {
            if self.shape(v) != [dims[1]] {
                return Err(Error::shape(op, self.shape(x), self.shape(v)));
            }
        }
        Ok(dims)
    }

    /// Batch normalization using this batch's per-channel statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = self.check_channel_params("batch_norm", input, &[gamma, beta])?;
        let hw = h * w;
        let (mean, var) = kernels::channel_stats(self.data(input), n, c, hw);
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let x = self.data(input);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (p, (xh, o)) in xhat.chunks_mut(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = p % c;
            let m = T::from_f64(mean[ch]);
            let src = &x[p * hw..(p + 1) * hw];
            for ((xh, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *xh = (v - m) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let stats = BatchStats {
            mean,
            var,
            count: n * hw,
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = self.check_channel_params("batch_norm", input, &[gamma, beta])?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", &[n, c, h, w], &[running_mean.len()]));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let x = self.data(input);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); x.len()];
        for (p, o) in out.chunks_mut(hw).enumerate() {
            let ch = p % c;
            let src = &x[p * hw..(p + 1) * hw];
            for (o, &v) in o.iter_mut().zip(src) {
                *o = g[ch] * (v - running_mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let dims = self.value(input).dims4("upsample")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let out = kernels::upsample_forward(self.data(input), dims, factor);
        let value = Tensor::new(&[dims[0], dims[1], dims[2] * factor, dims[3] * factor], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }, &[input]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let p = self.data(pred);
        let t = self.data(target);
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / T::from_f64(p.len() as f64));
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the overflow-free form `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("bce", self.shape(logits), &[targets.len()]));
        }
        let s: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(s / T::from_f64(z.len() as f64));
        Ok(self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `output`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient of its own
    /// shape; leaves the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            for (v, gv) in self.backprop(node, &g) {
                if self.needs(v) {
                    accumulate(&mut grads[v.0], gv);
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let y = node.value.data();
        match node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                vec![
                    (a, g.iter().zip(db).map(|(&g, &v)| g * v).collect()),
                    (b, g.iter().zip(da).map(|(&g, &v)| g * v).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(x, g.iter().map(|&g| g * c).collect())],
            Op::Relu(x) => {
                let xd = self.data(x);
                let d = g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(x, d)]
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                vec![(x, d)]
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                vec![(x, d)]
            }
            Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).len()])],
            Op::Mean(x) => {
                let n = self.value(x).len();
                vec![(x, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::MaskMul { input, ref mask } => {
                vec![(input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                ref geom,
            } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(geom, self.data(input), self.data(kernel), g);
                let mut out = vec![(input, dx), (kernel, dk)];
                if let Some(b) = bias {
                    out.push((b, db));
                }
                out
            }
            Op::Depthwise {
                input,
                kernel,
                ref geom,
            } => {
                let (dx, dk) =
                    kernels::depthwise_backward(geom, self.data(input), self.data(kernel), g);
                vec![(input, dx), (kernel, dk)]
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let [n, i] = [self.shape(input)[0], self.shape(input)[1]];
                let o = self.shape(weight)[0];
                let mut dx = vec![T::zero(); n * i];
                let mut dw = vec![T::zero(); o * i];
                // dx = g · W, dW = gᵀ · x
                T::gemm(
                    n, o, i, T::one(),
                    g, (o as isize, 1),
                    self.data(weight), (i as isize, 1),
                    T::zero(), &mut dx, (i as isize, 1),
                );
                T::gemm(
                    o, n, i, T::one(),
                    g, (1, o as isize),
                    self.data(input), (i as isize, 1),
                    T::zero(), &mut dw, (i as isize, 1),
                );
                let mut out = vec![(input, dx), (weight, dw)];
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((b, db));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let [n, c, h, w] = self.value(input).dims4("batch_norm").expect("checked");
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gam = self.data(gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (p, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for (p, ((d, gp), xp)) in dx
                    .chunks_mut(hw)
                    .zip(g.chunks(hw))
                    .zip(xhat.chunks(hw))
                    .enumerate()
                {
                    let ch = p % c;
                    let k = gam[ch] * inv_std[ch] / m;
                    for ((d, &gv), &xv) in d.iter_mut().zip(gp).zip(xp) {
                        *d = k * (m * gv - sum_g[ch] - xv * sum_gx[ch]);
                    }
                }
                vec![(input, dx), (gamma, sum_gx), (beta, sum_g)]
            }
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                ref mean,
                ref inv_std,
            } => {
                let c = self.shape(input)[1];
                let hw = self.shape(input)[2] * self.shape(input)[3];
                let gam = self.data(gamma);
                let x = self.data(input);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgam = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (p, (d, gp)) in dx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                    let ch = p % c;
                    let xp = &x[p * hw..(p + 1) * hw];
                    for ((d, &gv), &xv) in d.iter_mut().zip(gp).zip(xp) {
                        *d = gv * gam[ch] * inv_std[ch];
                        dgam[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gv;
                    }
                }
                vec![(input, dx), (gamma, dgam), (beta, dbeta)]
            }
            Op::Upsample { input, factor } => {
                let dims = self.value(input).dims4("upsample").expect("checked");
                vec![(input, kernels::upsample_backward(g, dims, factor))]
            }
            Op::Mse { pred, target } => {
                let n = T::from_f64(self.value(pred).len() as f64);
                let k = (g[0] + g[0]) / n;
                let dp: Vec<T> = self
                    .data(pred)
                    .iter()
                    .zip(self.data(target))
                    .map(|(&p, &t)| k * (p - t))
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                vec![(pred, dp), (target, dt)]
            }
            Op::BceLogits { logits, ref targets } => {
                let n = T::from_f64(targets.len() as f64);
                let d = self
                    .data(logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                vec![(logits, d)]
            }
        }
    }
}
