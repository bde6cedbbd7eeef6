//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes created in topological order; every op
//! appends one node holding its forward value and enough context to run its
//! adjoint. [`Tape::backward`] walks the arena once in reverse, accumulating
//! gradients where a node feeds several consumers. Tapes are single-use:
//! a second backward call returns [`Error::TapeConsumed`].
//!
//! Generic over the element type so training can run in f32 while gradient
//! checking runs in f64.

pub mod gradcheck;

use crate::real::Real;
use crate::{Error, Result};

/// A plain dense tensor: row-major data plus a shape. The empty shape `[]`
/// denotes a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::LengthMismatch(data.len(), numel));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf {
        requires_grad: bool,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Tanh {
        x: usize,
    },
    Relu {
        x: usize,
    },
    MeanPool2 {
        x: usize,
    },
    GlobalMeanPool {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    /// Per-row losses; cached softmax probabilities drive the adjoint.
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    ScalarMean {
        x: usize,
    },
    ScalarSum {
        x: usize,
    },
}

struct Node<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by the originating [`Var`].
#[derive(Debug)]
pub struct Gradients<F: Real> {
    slots: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.slots.get(var.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<F>> {
        self.slots.get_mut(var.0).and_then(|s| s.take())
    }
}

fn axpy<F: Real>(dst: &mut [F], w: F, src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + w * s;
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Arena of operations in creation (= topological) order.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Binds a tensor as a leaf. Only leaves with `requires_grad` receive
    /// entries in the gradient map.
    pub fn input(&mut self, tensor: Tensor<F>, requires_grad: bool) -> Var {
        self.push(
            tensor.shape,
            tensor.data,
            Op::Leaf { requires_grad },
            requires_grad,
        )
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.input(tensor, false)
    }

    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.input(tensor, true)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn data(&self, var: Var) -> &[F] {
        &self.nodes[var.0].data
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self, var: Var) -> Result<F> {
        let node = &self.nodes[var.0];
        if node.data.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        Ok(node.data[0])
    }

    pub fn to_tensor(&self, var: Var) -> Tensor<F> {
        let node = &self.nodes[var.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let w = da[i * k + p];
                if w != F::zero() {
                    axpy(&mut out[i * n..(i + 1) * n], w, &db[p * n..(p + 1) * n]);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// Valid-padding convolution with fused bias:
    /// `[B, C, H, W] * [O, C, kh, kw] + [O] -> [B, O, H', W']` where
    /// `H' = (H - kh) / stride + 1` (floor).
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sx[2] < sk[2] || sx[3] < sk[3] {
            return Err(Self::mismatch("conv2d", sx, sk));
        }
        if self.shape(bias) != [sk[0]] {
            return Err(Self::mismatch("conv2d bias", self.shape(bias), sk));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;

        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![F::zero(); bsz * o * oh * ow];
        for b in 0..bsz {
            for oc in 0..o {
                let out_base = (b * o + oc) * oh * ow;
                out[out_base..out_base + oh * ow].fill(bd[oc]);
                for ic in 0..c {
                    let x_base = (b * c + ic) * h * w;
                    for p in 0..kh {
                        for q in 0..kw {
                            let wgt = kd[((oc * c + ic) * kh + p) * kw + q];
                            if wgt == F::zero() {
                                continue;
                            }
                            for i in 0..oh {
                                let row = x_base + (i * stride + p) * w + q;
                                let out_row = &mut out[out_base + i * ow..out_base + (i + 1) * ow];
                                if stride == 1 {
                                    axpy(out_row, wgt, &xd[row..row + ow]);
                                } else {
                                    for (j, dst) in out_row.iter_mut().enumerate() {
                                        *dst = *dst + wgt * xd[row + j * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![bsz, o, oh, ow],
            out,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
            },
            needs,
        ))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Adds a length-n bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Self::mismatch("add_bias", sx, sb));
        }
        let (m, n) = (sx[0], sx[1]);
        let bd = &self.nodes[bias.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            vec![m, n],
            data,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            needs,
        ))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<F> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Tanh { x: x.0 }, needs)
    }

    /// Rectified linear unit; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<F> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let needs = self.needs(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Relu { x: x.0 }, needs)
    }

    /// 2x2 mean pooling with stride 2 on `[B, C, H, W]`; trailing odd rows
    /// and columns are dropped.
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Self::mismatch("mean_pool2", sx, &[0, 0, 2, 2]));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].data;
        let quarter = F::from_f64(0.25);
        let mut out = vec![F::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = src + 2 * i * w + 2 * j;
                    out[dst + i * ow + j] =
                        (xd[p] + xd[p + 1] + xd[p + w] + xd[p + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, c, oh, ow], out, Op::MeanPool2 { x: x.0 }, needs))
    }

    /// Mean over the spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Self::mismatch("global_mean_pool", sx, &[0, 0, 0, 0]));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = F::from_f64(1.0 / hw as f64);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); b * c];
        for (bc, o) in out.iter_mut().enumerate() {
            let mut acc = F::zero();
            for &v in &xd[bc * hw..(bc + 1) * hw] {
                acc = acc + v;
            }
            *o = acc * inv;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, c], out, Op::GlobalMeanPool { x: x.0 }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Self::mismatch("reshape", self.shape(x), &shape));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::Reshape { x: x.0 }, needs))
    }

    /// `[m, n] -> [n, m]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Self::mismatch("transpose", sx, &[0, 0]));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, m], out, Op::Transpose { x: x.0 }, needs))
    }

    /// Per-row softmax cross-entropy of `[B, C]` logits against one target
    /// class per row, via max-subtracted log-sum-exp. Output shape `[B]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Self::mismatch("softmax_cross_entropy", sl, &[targets.len()]));
        }
        let (b, c) = (sl[0], sl[1]);
        for &t in targets {
            if t >= c {
                return Err(Error::OutOfRangeLabel {
                    label: t,
                    n_classes: c,
                });
            }
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![F::zero(); b * c];
        let mut losses = vec![F::zero(); b];
        for r in 0..b {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(row[0], F::max);
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                sum = sum + e;
            }
            let inv = F::one() / sum;
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p * inv;
            }
            // loss = lse(row) - row[t] = max + ln(sum) - row[t]
            losses[r] = max + sum.ln() - row[targets[r]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![b],
            losses,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean of all elements; output is a scalar (shape `[]`).
    pub fn scalar_mean(&mut self, x: Var) -> Var {
        let xd = &self.nodes[x.0].data;
        let inv = F::from_f64(1.0 / xd.len() as f64);
        let mut acc = F::zero();
        for &v in xd {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Vec::new(), vec![acc * inv], Op::ScalarMean { x: x.0 }, needs)
    }

    /// Sum of all elements; output is a scalar (shape `[]`).
    pub fn scalar_sum(&mut self, x: Var) -> Var {
        let xd = &self.nodes[x.0].data;
        let mut acc = F::zero();
        for &v in xd {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Vec::new(), vec![acc], Op::ScalarSum { x: x.0 }, needs)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; returns the
    /// gradient of every `requires_grad` leaf that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }

        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            // Leaves keep their buffer; interior nodes release theirs after
            // pushing contributions to their parents.
            if let Op::Leaf { requires_grad } = self.nodes[id].op {
                if requires_grad {
                    grads[id] = Some(gout);
                }
                continue;
            }
            self.accumulate_parents(id, &gout, &mut grads);
        }

        let any = grads
            .iter()
            .enumerate()
            .any(|(id, g)| g.is_some() && matches!(self.nodes[id].op, Op::Leaf { .. }));
        if !any {
            return Err(Error::DisconnectedGraph);
        }
        Ok(Gradients { slots: grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<F>>],
        id: usize,
        numel: usize,
    ) -> &'a mut Vec<F> {
        grads[id].get_or_insert_with(|| vec![F::zero(); numel])
    }

    fn accumulate_parents(&self, id: usize, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => unreachable!("leaves handled by the sweep"),
            &Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    // dA = dC . B^T
                    let bd = &self.nodes[b].data;
                    let ga = Self::ensure(grads, a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p]
                                + dot(&gout[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T . dC
                    let ad = &self.nodes[a].data;
                    let gb = Self::ensure(grads, b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let w = ad[i * k + p];
                            if w != F::zero() {
                                axpy(&mut gb[p * n..(p + 1) * n], w, &gout[i * n..(i + 1) * n]);
                            }
                        }
                    }
                }
            }
            &Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let sx = &self.nodes[x].shape;
                let sk = &self.nodes[kernel].shape;
                let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sk[0], sk[2], sk[3]);
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let xd = &self.nodes[x].data;
                let kd = &self.nodes[kernel].data;

                if self.nodes[bias].needs_grad {
                    let gb = Self::ensure(grads, bias, o);
                    for b in 0..bsz {
                        for oc in 0..o {
                            let base = (b * o + oc) * oh * ow;
                            let mut acc = F::zero();
                            for &g in &gout[base..base + oh * ow] {
                                acc = acc + g;
                            }
                            gb[oc] = gb[oc] + acc;
                        }
                    }
                }
                if self.nodes[kernel].needs_grad {
                    let gk = Self::ensure(grads, kernel, o * c * kh * kw);
                    for b in 0..bsz {
                        for oc in 0..o {
                            let out_base = (b * o + oc) * oh * ow;
                            for ic in 0..c {
                                let x_base = (b * c + ic) * h * w;
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let mut acc = F::zero();
                                        for i in 0..oh {
                                            let row = x_base + (i * stride + p) * w + q;
                                            let g_row = &gout[out_base + i * ow..out_base + (i + 1) * ow];
                                            if stride == 1 {
                                                acc = acc + dot(g_row, &xd[row..row + ow]);
                                            } else {
                                                for (j, &g) in g_row.iter().enumerate() {
                                                    acc = acc + g * xd[row + j * stride];
                                                }
                                            }
                                        }
                                        let slot = ((oc * c + ic) * kh + p) * kw + q;
                                        gk[slot] = gk[slot] + acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[x].needs_grad {
                    let gx = Self::ensure(grads, x, bsz * c * h * w);
                    for b in 0..bsz {
                        for oc in 0..o {
                            let out_base = (b * o + oc) * oh * ow;
                            for ic in 0..c {
                                let x_base = (b * c + ic) * h * w;
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let wgt = kd[((oc * c + ic) * kh + p) * kw + q];
                                        if wgt == F::zero() {
                                            continue;
                                        }
                                        for i in 0..oh {
                                            let row = x_base + (i * stride + p) * w + q;
                                            let g_row = &gout[out_base + i * ow..out_base + (i + 1) * ow];
                                            if stride == 1 {
                                                axpy(&mut gx[row..row + ow], wgt, g_row);
                                            } else {
                                                for (j, &g) in g_row.iter().enumerate() {
                                                    gx[row + j * stride] =
                                                        gx[row + j * stride] + wgt * g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for parent in [a, b] {
                    if self.nodes[parent].needs_grad {
                        let g = Self::ensure(grads, parent, gout.len());
                        axpy(g, F::one(), gout);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                let n = self.nodes[bias].shape[0];
                if self.nodes[x].needs_grad {
                    let g = Self::ensure(grads, x, gout.len());
                    axpy(g, F::one(), gout);
                }
                if self.nodes[bias].needs_grad {
                    let gb = Self::ensure(grads, bias, n);
                    for row in gout.chunks_exact(n) {
                        axpy(gb, F::one(), row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let bd = self.nodes[b].data.clone();
                    let ga = Self::ensure(grads, a, gout.len());
                    for ((g, &go), &bv) in ga.iter_mut().zip(gout).zip(&bd) {
                        *g = *g + go * bv;
                    }
                }
                if self.nodes[b].needs_grad {
                    let ad = self.nodes[a].data.clone();
                    let gb = Self::ensure(grads, b, gout.len());
                    for ((g, &go), &av) in gb.iter_mut().zip(gout).zip(&ad) {
                        *g = *g + go * av;
                    }
                }
            }
            &Op::Tanh { x } => {
                if self.nodes[x].needs_grad {
                    let yd = self.nodes[id].data.clone();
                    let gx = Self::ensure(grads, x, gout.len());
                    for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(&yd) {
                        *g = *g + go * (F::one() - y * y);
                    }
                }
            }
            &Op::Relu { x } => {
                if self.nodes[x].needs_grad {
                    let xd = self.nodes[x].data.clone();
                    let gx = Self::ensure(grads, x, gout.len());
                    for ((g, &go), &xv) in gx.iter_mut().zip(gout).zip(&xd) {
                        if xv > F::zero() {
                            *g = *g + go;
                        }
                    }
                }
            }
            &Op::MeanPool2 { x } => {
                if self.nodes[x].needs_grad {
                    let sx = self.nodes[x].shape.clone();
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = F::from_f64(0.25);
                    let gx = Self::ensure(grads, x, b * c * h * w);
                    for bc in 0..b * c {
                        let dst = bc * h * w;
                        let src = bc * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = gout[src + i * ow + j] * quarter;
                                let p = dst + 2 * i * w + 2 * j;
                                gx[p] = gx[p] + g;
                                gx[p + 1] = gx[p + 1] + g;
                                gx[p + w] = gx[p + w] + g;
                                gx[p + w + 1] = gx[p + w + 1] + g;
                            }
                        }
                    }
                }
            }
            &Op::GlobalMeanPool { x } => {
                if self.nodes[x].needs_grad {
                    let sx = self.nodes[x].shape.clone();
                    let hw = sx[2] * sx[3];
                    let inv = F::from_f64(1.0 / hw as f64);
                    let gx = Self::ensure(grads, x, sx.iter().product());
                    for (bc, &g) in gout.iter().enumerate() {
                        let contribution = g * inv;
                        for v in &mut gx[bc * hw..(bc + 1) * hw] {
                            *v = *v + contribution;
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.nodes[x].needs_grad {
                    let g = Self::ensure(grads, x, gout.len());
                    axpy(g, F::one(), gout);
                }
            }
            &Op::Transpose { x } => {
                if self.nodes[x].needs_grad {
                    let sx = self.nodes[x].shape.clone();
                    let (m, n) = (sx[0], sx[1]);
                    let gx = Self::ensure(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + gout[j * m + i];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if self.nodes[logits].needs_grad {
                    let c = self.nodes[logits].shape[1];
                    let probs = probs.clone();
                    let targets = targets.clone();
                    let gl = Self::ensure(grads, logits, probs.len());
                    for (r, &go) in gout.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == targets[r] { F::one() } else { F::zero() };
                            gl[r * c + j] = gl[r * c + j] + go * (probs[r * c + j] - indicator);
                        }
                    }
                }
            }
            &Op::ScalarMean { x } => {
                if self.nodes[x].needs_grad {
                    let numel = self.nodes[x].data.len();
                    let g = gout[0] * F::from_f64(1.0 / numel as f64);
                    let gx = Self::ensure(grads, x, numel);
                    for v in gx.iter_mut() {
                        *v = *v + g;
                    }
                }
            }
            &Op::ScalarSum { x } => {
                if self.nodes[x].needs_grad {
                    let numel = self.nodes[x].data.len();
                    let g = gout[0];
                    let gx = Self::ensure(grads, x, numel);
                    for v in gx.iter_mut() {
                        *v = *v + g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tensor(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = tensor(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let i = tape.constant(eye);
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.data(out), a.data());
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn tanh_zero_has_unit_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(tensor(vec![1], vec![0.0]));
        let y = tape.tanh(x);
        assert_eq!(tape.data(y), &[0.0]);
        let loss = tape.scalar_sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn conv_3x3_on_3x3_is_a_dot_product() {
        let mut tape: Tape<f64> = Tape::new();
        let x_data: Vec<f64> = (1..=9).map(f64::from).collect();
        let k_data: Vec<f64> = (1..=9).map(|v| f64::from(v) * 0.1).collect();
        let x = tape.constant(tensor(vec![1, 1, 3, 3], x_data.clone()));
        let k = tape.constant(tensor(vec![1, 1, 3, 3], k_data.clone()));
        let b = tape.constant(tensor(vec![1], vec![0.5]));
        let out = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 1, 1]);
        let expect: f64 = x_data.iter().zip(&k_data).map(|(a, b)| a * b).sum::<f64>() + 0.5;
        assert!((tape.data(out)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones_and_square_is_2w() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(tensor(vec![4], vec![1.5, -2.0, 0.25, 3.0]));
        let loss = tape.scalar_sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 4]);

        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(tensor(vec![4], vec![1.5, -2.0, 0.25, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.scalar_sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3.0, -4.0, 0.5, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = sum(x + x) => grad = 2.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(tensor(vec![3], vec![1.0, 2.0, 3.0]));
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.scalar_sum(doubled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn second_backward_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(tensor(vec![2], vec![1.0, 2.0]));
        let loss = tape.scalar_sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(tensor(vec![2], vec![1.0, 2.0]));
        match tape.backward(x) {
            Err(Error::NotScalar(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NotScalar, got {other:?}"),
        }
    }

    #[test]
    fn constant_only_graph_is_disconnected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(tensor(vec![2], vec![1.0, 2.0]));
        let loss = tape.scalar_sum(x);
        assert!(matches!(tape.backward(loss), Err(Error::DisconnectedGraph)));
    }

    #[test]
    fn softmax_cross_entropy_values() {
        // Uniform logits: loss = ln(C) per row.
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 5]));
        let losses = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        for &l in tape.data(losses) {
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }

        // Extreme logits must not overflow thanks to max subtraction.
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(tensor(vec![1, 2], vec![1000.0, -1000.0]));
        let losses = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.data(losses)[0].is_finite());
        assert!(tape.data(losses)[0] < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_targets() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 3]),
            Err(Error::OutOfRangeLabel {
                label: 3,
                n_classes: 3
            })
        ));
        assert!(tape.softmax_cross_entropy(logits, &[0]).is_err());
    }

    #[test]
    fn mean_pool_drops_odd_edges() {
        let mut tape: Tape<f64> = Tape::new();
        // 3x3 input: only the top-left 2x2 window survives.
        let x = tape.param(tensor(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let out = tape.mean_pool2(x).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 1, 1]);
        assert_eq!(tape.data(out), &[(1.0 + 2.0 + 4.0 + 5.0) / 4.0]);

        let loss = tape.scalar_sum(out);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[0], 0.25);
        assert_eq!(gx[8], 0.0, "dropped cells get no gradient");
    }

    #[test]
    fn reshape_and_transpose_roundtrip() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(tensor(vec![2, 3], (1..=6).map(f64::from).collect()));
        let t = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.data(t), &[1., 4., 2., 5., 3., 6.]);
        let back = tape.transpose(t).unwrap();
        assert_eq!(tape.data(back), tape.data(x));

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(tensor(vec![2, 3], (1..=6).map(f64::from).collect()));
        assert!(tape.reshape(x, vec![7]).is_err());
        let r = tape.reshape(x, vec![6]).unwrap();
        assert_eq!(tape.shape(r), &[6]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.param(Tensor::from_fn(vec![4, 4], |i| (i as f32) * 0.37 - 1.0));
            let y = tape.tanh(x);
            let z = tape.mul(y, y).unwrap();
            let loss = tape.scalar_mean(z);
            tape.scalar_value(loss).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
