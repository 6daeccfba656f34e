//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is always in topological order and
//! [`Tape::backward`] is a single reverse sweep. A tape may be swept once;
//! start a new tape for every optimisation step.

use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{matmul_raw, transpose_raw, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `H×W×C` plus a `1×1×C` operand repeated over every cell.
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    Conv1x1 {
        x: Var,
        weight: Var,
        bias: Var,
    },
    RoiMean {
        input: Var,
        cells: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceLast {
        input: Var,
        start: usize,
    },
    SelectRow {
        input: Var,
        row: usize,
    },
    TileSpatial(Var),
    TileChannels(Var),
    XCorr {
        x: Var,
        kernel: Var,
    },
    StraightThrough {
        soft: Var,
    },
    Sum(Var),
    Mean(Var),
    BalancedBce {
        logits: Var,
        targets: Vec<S>,
        weights: Vec<S>,
    },
    IouLoss {
        pred: Var,
        target: Vec<S>,
        valid: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    swept: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` if the node
    /// did not participate.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(shape_err("transpose", &sa, &[]));
        }
        let out = transpose_raw(self.value(a).data(), sa[0], sa[1]);
        Ok(self.push(Tensor::from_vec(&[sa[1], sa[0]], out)?, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// True when `b` is `1×1×C` and `a` is `H×W×C`.
    fn is_channel_broadcast(&self, a: Var, b: Var) -> bool {
        let (sa, sb) = (self.shape(a), self.shape(b));
        sa.len() == 3 && sb.len() == 3 && sb[0] == 1 && sb[1] == 1 && sa[2] == sb[2]
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    fn broadcast_values(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (va, vb) = (self.value(a), self.value(b));
        let c = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % c]))
            .collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    /// Elementwise sum; `b` may also be `1×1×C` against an `H×W×C` `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let v = self.zip_values(a, b, |x, y| x + y);
            Ok(self.push(v, Op::Add(a, b), &[a, b]))
        } else if self.is_channel_broadcast(a, b) {
            let v = self.broadcast_values(a, b, |x, y| x + y);
            Ok(self.push(v, Op::AddBroadcast(a, b), &[a, b]))
        } else {
            Err(shape_err("add", self.shape(a), self.shape(b)))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may also be `1×1×C` against an `H×W×C` `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let v = self.zip_values(a, b, |x, y| x * y);
            Ok(self.push(v, Op::Mul(a, b), &[a, b]))
        } else if self.is_channel_broadcast(a, b) {
            let v = self.broadcast_values(a, b, |x, y| x * y);
            Ok(self.push(v, Op::MulBroadcast(a, b), &[a, b]))
        } else {
            Err(shape_err("mul", self.shape(a), self.shape(b)))
        }
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Row-wise softmax of an `M×N` matrix, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(shape_err("softmax_rows", &sa, &[]));
        }
        let n = sa[1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        Ok(self.push(Tensor::from_vec(&sa, out)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-cell affine map `H×W×Cin → H×W×Cout`.
    pub fn conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(shape_err("conv1x1", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(shape_err("conv1x1 bias", sw, sb));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sw[1]);
        let mut out = matmul_raw(
            self.value(x).data(),
            self.value(weight).data(),
            h * w,
            cin,
            cout,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            add_into(row, b);
        }
        let value = Tensor::from_vec(&[h, w, cout], out)?;
        Ok(self.push(value, Op::Conv1x1 { x, weight, bias }, &[x, weight, bias]))
    }

    /// Mean over the listed cells of an `H×W×C` map, giving `1×1×C`.
    pub fn roi_mean(&mut self, input: Var, cells: Vec<usize>) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        if sx.len() != 3 || cells.is_empty() || cells.iter().any(|&i| i >= sx[0] * sx[1]) {
            return Err(TensorError::InvalidArgument {
                op: "roi_mean",
                msg: format!("bad cell list for shape {sx:?}"),
            });
        }
        let c = sx[2];
        let data = self.value(input).data();
        let mut out = vec![S::zero(); c];
        for &cell in &cells {
            add_into(&mut out, &data[cell * c..(cell + 1) * c]);
        }
        let inv = S::one() / S::from_usize_lossy(cells.len());
        out.iter_mut().for_each(|x| *x = *x * inv);
        let value = Tensor::from_vec(&[1, 1, c], out)?;
        Ok(self.push(value, Op::RoiMean { input, cells }, &[input]))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no parts".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), sp));
            }
            widths.push(sp[sp.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wdt..(r + 1) * wdt]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let c = sx[sx.len() - 1];
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                msg: format!("range {start}..{} out of {c}", start + len),
            });
        }
        let data = self.value(input).data();
        let out: Vec<S> = data
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::SliceLast { input, start }, &[input]))
    }

    /// Row `row` of an `M×N` matrix as a length-`N` vector.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        if sx.len() != 2 || row >= sx[0] {
            return Err(TensorError::InvalidArgument {
                op: "select_row",
                msg: format!("row {row} of shape {sx:?}"),
            });
        }
        let n = sx[1];
        let out = self.value(input).data()[row * n..(row + 1) * n].to_vec();
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(value, Op::SelectRow { input, row }, &[input]))
    }

    /// Repeats a `1×1×C` vector over an `h×w` grid.
    pub fn tile_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        if sx.len() != 3 || sx[0] != 1 || sx[1] != 1 {
            return Err(shape_err("tile_spatial", &sx, &[1, 1, sx[sx.len() - 1]]));
        }
        let src = self.value(input).data().to_vec();
        let out: Vec<S> = (0..h * w).flat_map(|_| src.iter().copied()).collect();
        let value = Tensor::from_vec(&[h, w, sx[2]], out)?;
        Ok(self.push(value, Op::TileSpatial(input), &[input]))
    }

    /// Repeats an `H×W×1` map across `c` channels.
    pub fn tile_channels(&mut self, input: Var, c: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        if sx.len() != 3 || sx[2] != 1 {
            return Err(shape_err("tile_channels", &sx, &[sx[0], sx[1], 1]));
        }
        let out: Vec<S> = self
            .value(input)
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat(g).take(c))
            .collect();
        let value = Tensor::from_vec(&[sx[0], sx[1], c], out)?;
        Ok(self.push(value, Op::TileChannels(input), &[input]))
    }

    /// Depth-wise 2-D cross-correlation with zero padding that keeps the
    /// `H_x×W_x` extent. Kernel offsets run from `-(k-1)/2` to `k/2`.
    pub fn xcorr_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[2] {
            return Err(shape_err("xcorr_depthwise", &sx, &sk));
        }
        if sk[0] > sx[0] || sk[1] > sx[1] {
            return Err(TensorError::InvalidArgument {
                op: "xcorr_depthwise",
                msg: format!("kernel {sk:?} larger than search map {sx:?}"),
            });
        }
        let out = xcorr_forward(self.value(x).data(), self.value(kernel).data(), &sx, &sk);
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(value, Op::XCorr { x, kernel }, &[x, kernel]))
    }

    /// Binary forward value `1{pre > 0}`; the backward pass routes the
    /// incoming gradient unchanged to `soft`.
    pub fn straight_through(&mut self, pre: Var, soft: Var) -> Result<Var> {
        self.binary_same(pre, soft, "straight_through")?;
        let v = self
            .value(pre)
            .map(|z| if z > S::zero() { S::one() } else { S::zero() });
        Ok(self.push(v, Op::StraightThrough { soft }, &[soft]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_usize_lossy(self.value(a).len());
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(v, Op::Mean(a), &[a])
    }

    /// `Σ_i weight_i · BCE(logit_i, target_i)` with logits in nats.
    pub fn weighted_bce(&mut self, logits: Var, targets: Vec<S>, weights: Vec<S>) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "weighted_bce",
                msg: format!("expected {n} targets and weights"),
            });
        }
        let total: S = self
            .value(logits)
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::BalancedBce {
                logits,
                targets,
                weights,
            },
            &[logits],
        ))
    }

    /// Mean of `1 − IoU` over `valid` cells of an `H×W×4` map of
    /// (left, top, right, bottom) distances. Zero when no cell is valid.
    pub fn iou_loss(&mut self, pred: Var, target: Vec<S>, valid: Vec<usize>) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if sp.len() != 3 || sp[2] != 4 || target.len() != self.value(pred).len() {
            return Err(shape_err("iou_loss", &sp, &[target.len()]));
        }
        let p = self.value(pred).data();
        let mut total = S::zero();
        for &cell in &valid {
            let iou = ltrb_iou(&p[cell * 4..cell * 4 + 4], &target[cell * 4..cell * 4 + 4]).iou;
            total = total + (S::one() - iou);
        }
        if !valid.is_empty() {
            total = total / S::from_usize_lossy(valid.len());
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::IouLoss {
                pred,
                target,
                valid,
            },
            &[pred],
        ))
    }

    /// Propagates gradients from a scalar `loss` into every participating
    /// node. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(TensorError::Backward(
                "tape already swept; record a fresh tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Backward(
                "loss is detached from every requires_grad tensor".into(),
            ));
        }
        self.swept = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                self.accumulate(grads, *a, transpose_raw(g, sa[1], sa[0]));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                let c = self.value(*b).len();
                let mut gb = vec![S::zero(); c];
                for row in g.chunks(c) {
                    add_into(&mut gb, row);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = vb.len();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * vb[i % c])
                    .collect();
                self.accumulate(grads, *a, ga);
                let mut gb = vec![S::zero(); c];
                for (i, (&x, &y)) in g.iter().zip(va).enumerate() {
                    gb[i % c] = gb[i % c] + x * y;
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect()),
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(&x, &y)| x * y * (S::one() - y))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &z)| x * sigmoid(z))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                let mut ga = vec![S::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((d, &x), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (x - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1x1 { x, weight, bias } => {
                let sw = self.shape(*weight);
                let (cin, cout) = (sw[0], sw[1]);
                let cells = g.len() / cout;
                if self.requires_grad(*x) {
                    let wt = transpose_raw(self.value(*weight).data(), cin, cout);
                    self.accumulate(grads, *x, matmul_raw(g, &wt, cells, cout, cin));
                }
                if self.requires_grad(*weight) {
                    let xt = transpose_raw(self.value(*x).data(), cells, cin);
                    self.accumulate(grads, *weight, matmul_raw(&xt, g, cin, cells, cout));
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![S::zero(); cout];
                    for row in g.chunks(cout) {
                        add_into(&mut gb, row);
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::RoiMean { input, cells } => {
                let c = g.len();
                let inv = S::one() / S::from_usize_lossy(cells.len());
                let mut gi = vec![S::zero(); self.value(*input).len()];
                for &cell in cells {
                    for (d, &x) in gi[cell * c..(cell + 1) * c].iter_mut().zip(g) {
                        *d = *d + x * inv;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &wdt) in parts.iter().zip(&widths) {
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * wdt);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + wdt]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += wdt;
                }
            }
            Op::SliceLast { input, start } => {
                let c = self.value(*input).last_dim();
                let len = node.value.last_dim();
                let mut gi = vec![S::zero(); self.value(*input).len()];
                for (dst, src) in gi.chunks_mut(c).zip(g.chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::SelectRow { input, row } => {
                let n = g.len();
                let mut gi = vec![S::zero(); self.value(*input).len()];
                gi[row * n..(row + 1) * n].copy_from_slice(g);
                self.accumulate(grads, *input, gi);
            }
            Op::TileSpatial(input) => {
                let c = self.value(*input).len();
                let mut gi = vec![S::zero(); c];
                for row in g.chunks(c) {
                    add_into(&mut gi, row);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::TileChannels(input) => {
                let c = node.value.last_dim();
                let gi = g.chunks(c).map(|row| row.iter().copied().sum()).collect();
                self.accumulate(grads, *input, gi);
            }
            Op::XCorr { x, kernel } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (gx, gk) = xcorr_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    sx,
                    sk,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::StraightThrough { soft } => self.accumulate(grads, *soft, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / S::from_usize_lossy(n); n]);
            }
            Op::BalancedBce {
                logits,
                targets,
                weights,
            } => {
                let gl = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &y), &w)| g[0] * w * (sigmoid(x) - y))
                    .collect();
                self.accumulate(grads, *logits, gl);
            }
            Op::IouLoss {
                pred,
                target,
                valid,
            } => {
                let p = self.value(*pred).data();
                let mut gp = vec![S::zero(); p.len()];
                if !valid.is_empty() {
                    let scale = -g[0] / S::from_usize_lossy(valid.len());
                    for &cell in valid {
                        let r = cell * 4..cell * 4 + 4;
                        let d = ltrb_iou(&p[r.clone()], &target[r.clone()]).d_pred;
                        for (dst, dv) in gp[r].iter_mut().zip(d) {
                            *dst = dv * scale;
                        }
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}

pub(crate) struct LtrbIou<S> {
    pub iou: S,
    /// d IoU / d (l, t, r, b) of the prediction.
    pub d_pred: [S; 4],
}

/// IoU of two boxes given as (left, top, right, bottom) distances from a
/// shared anchor point.
pub(crate) fn ltrb_iou<S: Scalar>(p: &[S], q: &[S]) -> LtrbIou<S> {
    let (pl, pt, pr, pb) = (p[0], p[1], p[2], p[3]);
    let (ql, qt, qr, qb) = (q[0], q[1], q[2], q[3]);
    let area_p = (pl + pr) * (pt + pb);
    let area_q = (ql + qr) * (qt + qb);
    let iw = pl.min(ql) + pr.min(qr);
    let ih = pt.min(qt) + pb.min(qb);
    let inter = iw * ih;
    let union = (area_p + area_q - inter).max(S::epsilon());
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let pick = |a: S, b: S| if a <= b { S::one() } else { S::zero() };
    let d_pred = [
        d_inter * ih * pick(pl, ql) + d_area * (pt + pb),
        d_inter * iw * pick(pt, qt) + d_area * (pl + pr),
        d_inter * ih * pick(pr, qr) + d_area * (pt + pb),
        d_inter * iw * pick(pb, qb) + d_area * (pl + pr),
    ];
    LtrbIou { iou, d_pred }
}

fn xcorr_forward<S: Scalar>(x: &[S], k: &[S], sx: &[usize], sk: &[usize]) -> Vec<S> {
    let (hx, wx, c) = (sx[0], sx[1], sx[2]);
    let (hk, wk) = (sk[0], sk[1]);
    let (ph, pw) = ((hk - 1) / 2, (wk - 1) / 2);
    let mut out = vec![S::zero(); x.len()];
    for i in 0..hx {
        for u in 0..hk {
            let Some(xi) = (i + u).checked_sub(ph).filter(|&r| r < hx) else {
                continue;
            };
            for j in 0..wx {
                let o = &mut out[(i * wx + j) * c..(i * wx + j + 1) * c];
                for v in 0..wk {
                    let Some(xj) = (j + v).checked_sub(pw).filter(|&q| q < wx) else {
                        continue;
                    };
                    let xs = &x[(xi * wx + xj) * c..(xi * wx + xj + 1) * c];
                    let ks = &k[(u * wk + v) * c..(u * wk + v + 1) * c];
                    for ((d, &a), &b) in o.iter_mut().zip(xs).zip(ks) {
                        *d = *d + a * b;
                    }
                }
            }
        }
    }
    out
}

fn xcorr_backward<S: Scalar>(
    g: &[S],
    x: &[S],
    k: &[S],
    sx: &[usize],
    sk: &[usize],
) -> (Vec<S>, Vec<S>) {
    let (hx, wx, c) = (sx[0], sx[1], sx[2]);
    let (hk, wk) = (sk[0], sk[1]);
    let (ph, pw) = ((hk - 1) / 2, (wk - 1) / 2);
    let mut gx = vec![S::zero(); x.len()];
    let mut gk = vec![S::zero(); k.len()];
    for i in 0..hx {
        for u in 0..hk {
            let Some(xi) = (i + u).checked_sub(ph).filter(|&r| r < hx) else {
                continue;
            };
            for j in 0..wx {
                let gs = &g[(i * wx + j) * c..(i * wx + j + 1) * c];
                for v in 0..wk {
                    let Some(xj) = (j + v).checked_sub(pw).filter(|&q| q < wx) else {
                        continue;
                    };
                    let xo = (xi * wx + xj) * c;
                    let ko = (u * wk + v) * c;
                    for ch in 0..c {
                        gx[xo + ch] = gx[xo + ch] + gs[ch] * k[ko + ch];
                        gk[ko + ch] = gk[ko + ch] + gs[ch] * x[xo + ch];
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));

        let z = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let q = tape.matmul(z, m).unwrap();
        assert!(tape.value(q).data().iter().all(|&x| x == 0.0));

        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 2.0]));
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]).unwrap());
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));

        let zero = tape.constant(t(&[1], &[0.0]));
        let sg = tape.sigmoid(zero);
        assert_eq!(tape.value(sg).data(), &[0.5]);

        let two = tape.constant(t(&[1], &[2.0]));
        let three = tape.constant(t(&[1], &[3.0]));
        let six = tape.mul(two, three).unwrap();
        assert_eq!(tape.value(six).data(), &[6.0]);

        let row = tape.constant(t(&[1, 1, 2], &[10.0, 20.0]));
        let b = tape.add(x, row).unwrap();
        assert_eq!(tape.value(b).data()[..4], [11.0, 18.0, 13.0, 20.5]);

        let bad = tape.constant(t(&[2, 1, 2], &[1.0; 4]));
        assert!(tape.add(x, bad).is_err());
        assert!(tape.mul(x, bad).is_err());
    }

    #[test]
    fn softmax_rows_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 0.0, 2f64.ln(), 0.0]));
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3] < 1e-300 && v[3] >= 0.0);
        assert!((v[4] - 2.0 / 3.0).abs() < 1e-15 && (v[5] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conv1x1_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let y = tape.conv1x1(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero_w = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(t(&[3], &[1.0, -1.0, 0.5]));
        let y = tape.conv1x1(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);

        let wrong = tape.constant(Tensor::zeros(&[3, 3]).unwrap());
        assert!(tape.conv1x1(x, wrong, b).is_err());
    }

    #[test]
    fn concat_and_slice_ordering() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 1, 3], &[3.0, 4.0, 5.0]));
        let one = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(one), tape.value(a));
        let ab = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(ab).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let tail = tape.slice_last(ab, 2, 3).unwrap();
        assert_eq!(tape.value(tail), tape.value(b));
        let c = tape.constant(t(&[1, 2, 1], &[0.0, 0.0]));
        assert!(tape.concat(&[a, c]).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[4.0]));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
        assert!(tape.backward(x).is_err(), "second sweep must be rejected");

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]).unwrap());
        let s = tape.sigmoid(x);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 3]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let c = tape.constant(t(&[1], &[1.0]));
        assert!(matches!(tape.backward(c), Err(TensorError::Backward(_))));
    }

    #[test]
    fn straight_through_forward_and_grad() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[0.3, -0.3, 0.0]));
        let soft = tape.sigmoid(w);
        let hard = tape.straight_through(w, soft).unwrap();
        assert_eq!(tape.value(hard).data(), &[1.0, 0.0, 0.0]);
        let l = tape.sum(hard);
        tape.backward(l).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        for (g, x) in tape.grad(w).unwrap().iter().zip([0.3, -0.3, 0.0]) {
            assert!((g - s(x) * (1.0 - s(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn iou_loss_half_overlap() {
        let mut tape = Tape::new();
        let pred = tape.param(t(&[1, 1, 4], &[1.0, 1.0, 1.0, 0.0]));
        let l = tape.iou_loss(pred, vec![1.0; 4], vec![0]).unwrap();
        assert!((tape.value(l).data()[0] - 0.5).abs() < 1e-15);

        let mut tape = Tape::new();
        let pred = tape.param(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let l = tape
            .iou_loss(pred, vec![1.0, 2.0, 3.0, 4.0], vec![0])
            .unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }
}
