use super::kernels::{col2im, conv_out_size, gemm, im2col, permute_copy, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast over the leading dims of `a` (b.shape is a suffix of a.shape).
    AddBcast(Var, Var),
    Scale(Var, T),
    /// Multiply by a one-element var.
    ScaleBy(Var, Var),
    Exp(Var),
    ClampMax(Var, T),
    Gelu(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        starts: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A tape of differentiable operations.
///
/// Nodes are appended in evaluation order, so the tape is acyclic and already
/// topologically sorted. [`Graph::backward`] accumulates into leaf gradients;
/// calling it twice without [`Graph::zero_grad`] sums both passes.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&d) if d > 0 => Ok((shape.iter().product::<usize>() / d, d)),
        _ => Err(Error::shape(op, format!("needs a non-empty last dim, got {shape:?}"))),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value (shape {:?})",
                op_name(&op),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bcast", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let inner = vb.len().max(1);
        let data = va
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(vb).map(|(x, y)| *x + *y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddBcast(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| *x * c).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| *x * c).collect())?;
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.exp()).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// `min(a, max)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, max: T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.min(max)).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::ClampMax(a, max), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| gelu_parts(x).0).collect(),
        )?;
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Batched product over the leading dim: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    /// Softmax over the last dim, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = last_dim("softmax", self.shape(a))?;
        let va = self.value(a);
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last dim.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = last_dim("log_softmax", self.shape(a))?;
        let va = self.value(a);
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Normalizes each last-dim vector to zero mean / unit variance, then applies `gain`, `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = last_dim("layernorm", self.shape(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("gain {:?} / bias {:?} vs width {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let vx = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let df = T::lit(d as f64);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Scales each last-dim vector to unit L2 norm; all-zero vectors stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = last_dim("l2_normalize", self.shape(x))?;
        let vx = self.value(x).data();
        let mut out = vx.to_vec();
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = nrm;
            if nrm > T::zero() {
                for v in row.iter_mut() {
                    *v /= nrm;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Selects rows of a `[V, d]` table: output `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-d, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row index {bad} out of range for {v} rows")));
        }
        let vt = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, idx: idx.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Reorders axes: output dim `k` is input dim `axes[k]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sx:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let mut out = vec![T::zero(); self.value(x).numel()];
        permute_copy(self.value(x).data(), &sx, axes, &mut out, false);
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// The box `[starts[k], starts[k] + extents[k])` along every dim.
    pub fn slice(&mut self, x: Var, starts: &[usize], extents: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if starts.len() != sx.len()
            || extents.len() != sx.len()
            || (0..sx.len()).any(|k| starts[k] + extents[k] > sx[k])
        {
            return Err(Error::shape(
                "slice",
                format!("start {starts:?} extent {extents:?} in {sx:?}"),
            ));
        }
        let out = slice_box(self.value(x).data(), &sx, starts, extents);
        let rg = self.rg(x);
        self.push(
            Tensor::new(extents.to_vec(), out)?,
            Op::Slice { x, starts: starts.to_vec() },
            rg,
        )
    }

    /// Leading box of `x`; returns `x` itself when the box is the whole tensor.
    pub fn prefix(&mut self, x: Var, extents: &[usize]) -> Result<Var> {
        if self.shape(x) == extents {
            return Ok(x);
        }
        let starts = vec![0; extents.len()];
        self.slice(x, &starts, extents)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        // finite inputs give a finite sum barring overflow, which push reports
        self.push(Tensor::scalar(s), Op::Sum(x), rg).expect("sum of finite values")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel().max(1) as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg).expect("mean of finite values")
    }

    /// Cross-correlation of `x[N,C,H,W]` with `kernel[O,C,KH,KW]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?} with kernel {sk:?}")));
        }
        let oh = conv_out_size(sx[2], sk[2], stride, padding)?;
        let ow = conv_out_size(sx[3], sk[3], stride, padding)?;
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad: padding,
            oh,
            ow,
        };
        let o = sk[0];
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let mut out_rows = vec![T::zero(); rows * o];
        gemm(
            rows,
            geom.patch_len(),
            o,
            &cols,
            false,
            self.value(kernel).data(),
            true,
            T::zero(),
            &mut out_rows,
        );
        // [N, OH·OW, O] -> [N, O, OH·OW]
        let p = oh * ow;
        let mut out = vec![T::zero(); rows * o];
        permute_copy(&out_rows, &[geom.n, p, o], &[0, 2, 1], &mut out, false);
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            Tensor::new(vec![geom.n, o, oh, ow], out)?,
            Op::Conv2d { x, kernel, geom, cols },
            rg,
        )
    }

    /// Back-propagates from a one-element `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let numel = |v: Var| nodes[v.0].value.numel();
        let want = |v: Var| nodes[v.0].requires_grad;
        // Accumulates into the pending gradient of `v`.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if want(v) {
                    let n = numel(v);
                    let $buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body;
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| add_into(buf, &g));
                acc!(*b, |buf| add_into(buf, &g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| add_into(buf, &g));
                acc!(*b, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * vb[k];
                });
                acc!(*b, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * va[k];
                });
            }
            Op::AddBcast(a, b) => {
                acc!(*a, |buf| add_into(buf, &g));
                acc!(*b, |buf| {
                    let inner = buf.len().max(1);
                    for row in g.chunks(inner) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc!(*a, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * c));
            }
            Op::ScaleBy(a, s) => {
                let c = nodes[s.0].value.item();
                let va = nodes[a.0].value.data();
                acc!(*a, |buf| buf.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * c));
                acc!(*s, |buf| buf[0] += g.iter().zip(va).map(|(y, x)| *y * *x).sum::<T>());
            }
            Op::Exp(a) => {
                let out = nodes[i].value.data();
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * out[k];
                });
            }
            Op::ClampMax(a, max) => {
                let va = nodes[a.0].value.data();
                let max = *max;
                acc!(*a, |buf| for k in 0..g.len() {
                    if va[k] < max {
                        buf[k] += g[k];
                    }
                });
            }
            Op::Gelu(a) => {
                let va = nodes[a.0].value.data();
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * gelu_parts(va[k]).1;
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a, |buf| gemm(m, n, k, &g, false, vb, true, T::one(), buf));
                acc!(*b, |buf| gemm(k, m, n, va, true, &g, false, T::one(), buf));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = nodes[i].value.shape()[2];
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let trans_b = *trans_b;
                acc!(*a, |buf| for t in 0..bs {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &vb[t * k * n..(t + 1) * k * n];
                    // dA = dC·Bᵀ (or dC·B when B was used transposed)
                    gemm(m, n, k, gt, false, bt, !trans_b, T::one(), &mut buf[t * m * k..(t + 1) * m * k]);
                });
                acc!(*b, |buf| for t in 0..bs {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &va[t * m * k..(t + 1) * m * k];
                    let bt = &mut buf[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        // B is [n,k]: dB = dCᵀ·A
                        gemm(n, m, k, gt, true, at, false, T::one(), bt);
                    } else {
                        gemm(k, m, n, at, true, gt, false, T::one(), bt);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let d = *nodes[i].value.shape().last().unwrap();
                acc!(*a, |buf| for r in 0..g.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum::<T>();
                    for j in 0..d {
                        buf[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = nodes[i].value.data();
                let d = *nodes[i].value.shape().last().unwrap();
                acc!(*a, |buf| for r in 0..g.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let gsum = gr.iter().copied().sum::<T>();
                    for j in 0..d {
                        buf[r * d + j] += gr[j] - yr[j].exp() * gsum;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let rows = rstd.len();
                let df = T::lit(d as f64);
                acc!(*gain, |buf| for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat[r * d + j];
                    }
                });
                acc!(*bias, |buf| for r in 0..rows {
                    add_into(buf, &g[r * d..(r + 1) * d]);
                });
                acc!(*x, |buf| for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        buf[r * d + j] += rstd[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[i].value.data();
                let d = y.len() / norms.len().max(1);
                acc!(*x, |buf| for (r, &nrm) in norms.iter().enumerate() {
                    if nrm > T::zero() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum::<T>();
                        for j in 0..d {
                            buf[r * d + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::Gather { table, idx } => {
                let d = nodes[table.0].value.shape()[1];
                acc!(*table, |buf| for (r, &row) in idx.iter().enumerate() {
                    add_into(&mut buf[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                });
            }
            Op::Reshape(x) => {
                acc!(*x, |buf| add_into(buf, &g));
            }
            Op::Permute { x, axes } => {
                let sx = nodes[x.0].value.shape();
                acc!(*x, |buf| permute_copy(&g, sx, axes, buf, true));
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    acc!(p, |buf| for o in 0..outer {
                        add_into(&mut buf[o * len..(o + 1) * len], &g[o * total + off..o * total + off + len]);
                    });
                    off += len;
                }
            }
            Op::Slice { x, starts } => {
                let sx = nodes[x.0].value.shape();
                let ext = nodes[i].value.shape();
                acc!(*x, |buf| scatter_box(&g, sx, starts, ext, buf));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc!(*x, |buf| buf.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::lit(numel(*x).max(1) as f64);
                acc!(*x, |buf| buf.iter_mut().for_each(|v| *v += g0));
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                let o = nodes[kernel.0].value.shape()[0];
                let p = geom.oh * geom.ow;
                let rows = geom.rows();
                let plen = geom.patch_len();
                // [N, O, P] -> [N, P, O]
                let mut g_rows = vec![T::zero(); rows * o];
                permute_copy(&g, &[geom.n, o, p], &[0, 2, 1], &mut g_rows, false);
                acc!(*kernel, |buf| gemm(o, rows, plen, &g_rows, true, cols, false, T::one(), buf));
                if want(*x) {
                    let kv = nodes[kernel.0].value.data();
                    let mut dcols = vec![T::zero(); rows * plen];
                    gemm(rows, o, plen, &g_rows, false, kv, false, T::zero(), &mut dcols);
                    acc!(*x, |buf| col2im(&dcols, geom, buf));
                }
            }
        }
        if matches!(self.nodes[i].op, Op::Leaf) {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn box_runs(shape: &[usize], starts: &[usize], extents: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0, 1);
        return;
    }
    if extents.iter().any(|&e| e == 0) {
        return;
    }
    let st = super::kernels::strides(shape);
    let run = extents[nd - 1];
    let outer: usize = extents[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    for r in 0..outer {
        let mut off = starts[nd - 1];
        for k in 0..nd - 1 {
            off += (starts[k] + idx[k]) * st[k];
        }
        f(off, r * run, run);
        for k in (0..nd - 1).rev() {
            idx[k] += 1;
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn slice_box<T: Real>(x: &[T], shape: &[usize], starts: &[usize], extents: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); extents.iter().product()];
    box_runs(shape, starts, extents, |src, dst, len| {
        out[dst..dst + len].copy_from_slice(&x[src..src + len]);
    });
    out
}

fn scatter_box<T: Real>(g: &[T], shape: &[usize], starts: &[usize], extents: &[usize], dst: &mut [T]) {
    box_runs(shape, starts, extents, |full, part, len| {
        add_into(&mut dst[full..full + len], &g[part..part + len]);
    });
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBcast(..) => "add_bcast",
        Op::Scale(..) => "scale",
        Op::ScaleBy(..) => "scale_by",
        Op::Exp(..) => "exp",
        Op::ClampMax(..) => "clamp_max",
        Op::Gelu(..) => "gelu",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Gather { .. } => "gather_rows",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Conv2d { .. } => "conv2d",
    }
}
