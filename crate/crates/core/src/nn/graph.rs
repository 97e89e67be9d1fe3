//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] walks it in reverse.

use crate::error::{Error, Result};

use super::kernels;
use super::ssim::{ssim_backward, ssim_forward, SsimCache, SsimParams};
use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MeanAxis1(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Ssim {
        a: Var,
        b: Var,
        cache: Box<SsimCache<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over tensors of element type `T`.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let u = T::from_f64_lossy(SQRT_2_OVER_PI) * (x + T::from_f64_lossy(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_COEF);
    let k = T::from_f64_lossy(SQRT_2_OVER_PI);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64_lossy(3.0) * c * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients are retained for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.needs(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let inner = self.value(b).numel();
        let vb = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(inner) {
            for (o, &x) in row.iter_mut().zip(vb) {
                *o = *o + x;
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[rows, in] · [in, out] + [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bsz * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[bsz, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Normalise over the last dimension, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        let n = T::from_usize(d).expect("dim fits");
        let (vx, vg, vb) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg[j] + vb[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| Error::shape("softmax", sx, &[]))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// 2-D convolution, stride 1, zero "same" padding.
    /// `x: [B, C, H, W]`, `w: [O, C, k, k]` with odd `k`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (hw, ckk) = (h * wd, c * k * k);
        let mut cols = vec![T::zero(); bsz * ckk * hw];
        let mut out = vec![T::zero(); bsz * o * hw];
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        for i in 0..bsz {
            let col = &mut cols[i * ckk * hw..(i + 1) * ckk * hw];
            kernels::im2col(&vx[i * c * hw..(i + 1) * c * hw], c, h, wd, k, col);
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            if let Some(b) = b {
                let vb = self.value(b).data();
                for (oc, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.fill(vb[oc]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(o, ckk, hw, T::one(), vw, false, col, false, beta, dst);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(Tensor::new(&[bsz, o, h, wd], out)?, Op::Conv2d { x, w, b, cols }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest2x", &s, &[4]));
        }
        let out = kernels::upsample2x(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// Centre crop of `[B, C, H, W]` to `[B, C, oh, ow]`.
    pub fn center_crop(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh > s[2] || ow > s[3] {
            return Err(Error::shape("center_crop", &s, &[oh, ow]));
        }
        let (top, left) = ((s[2] - oh) / 2, (s[3] - ow) / 2);
        let out = kernels::crop(self.value(x).data(), s[0] * s[1], s[2], s[3], top, left, oh, ow);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[s[0], s[1], oh, ow], out)?, Op::Crop { x, top, left }, rg))
    }

    /// `[B·T, H·Dh] → [B·H, T, Dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * tokens || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[batch, tokens, heads]));
        }
        let e = s[1];
        let dh = e / heads;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = (b * tokens + t) * e + h * dh;
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&vx[src..src + dh]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[batch * heads, tokens, dh], out)?,
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// `[B·H, T, Dh] → [B·T, H·Dh]`, the inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(Error::shape("merge_heads", &s, &[batch, tokens, heads]));
        }
        let dh = s[2];
        let e = heads * dh;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let dst = (b * tokens + t) * e + h * dh;
                    let src = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&vx[src..src + dh]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[batch * tokens, e], out)?,
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention on pre-projected rows.
    ///
    /// `q`, `k`, `v` are `[B·T, E]`; each head attends with
    /// `softmax(Q Kᵀ / √(E/heads)) V` and heads are concatenated back to `[B·T, E]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let e = self.shape(q)[1];
        let dh = e / heads.max(1);
        let qh = self.split_heads(q, batch, tokens, heads)?;
        let kh = self.split_heads(k, batch, tokens, heads)?;
        let vh = self.split_heads(v, batch, tokens, heads)?;
        let scores = self.batch_matmul(qh, kh, true)?;
        let scaled = self.scale(scores, T::one() / T::from_usize(dh).expect("fits").sqrt());
        let weights = self.softmax(scaled)?;
        let ctx = self.batch_matmul(weights, vh, false)?;
        self.merge_heads(ctx, batch, tokens, heads)
    }

    /// Mean over axis 1 of a `[B, T, E]` tensor.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("mean_axis1", &s, &[3]));
        }
        let (b, t, e) = (s[0], s[1], s[2]);
        let inv = T::one() / T::from_usize(t).expect("fits");
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); b * e];
        for bi in 0..b {
            for ti in 0..t {
                let row = &vx[(bi * t + ti) * e..(bi * t + ti + 1) * e];
                for (o, &r) in out[bi * e..(bi + 1) * e].iter_mut().zip(row) {
                    *o = *o + r;
                }
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[b, e], out)?, Op::MeanAxis1(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).expect("fits");
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Mean(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let value = mse(self.value(pred).data(), self.value(target).data());
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(value), Op::Mse(pred, target), rg))
    }

    /// Mean SSIM of `[B, C, H, W]` tensors, each `H×W` plane scored separately.
    pub fn ssim(&mut self, a: Var, b: Var, params: SsimParams) -> Result<Var> {
        self.same_shape("ssim", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("ssim", &s, &[4]));
        }
        let (value, cache) = ssim_forward(
            self.value(a).data(),
            self.value(b).data(),
            s[0] * s[1],
            s[2],
            s[3],
            params,
        )?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Ssim {
                a,
                b,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    /// Reverse-mode accumulation of `∂loss/∂node` for every node feeding `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, grads[i].take()) {
                (_, None) => continue,
                (Op::Leaf, Some(g)) => {
                    grads[i] = Some(g);
                    continue;
                }
                (_, Some(g)) => g,
            };
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v), data).expect("gradient matches input shape")
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *a, self.grad_like(*a, ga));
                self.accumulate(grads, *b, self.grad_like(*b, gb));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::AddBroadcast(a, b) => {
                let inner = self.value(*b).numel();
                let mut gb = vec![T::zero(); inner];
                for row in gd.chunks(inner) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                self.accumulate(grads, *b, self.grad_like(*b, gb));
                self.accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        false,
                        self.value(*b).data(),
                        true,
                        T::zero(),
                        &mut ga,
                    );
                    self.accumulate(grads, *a, self.grad_like(*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        true,
                        gd,
                        false,
                        T::zero(),
                        &mut gb,
                    );
                    self.accumulate(grads, *b, self.grad_like(*b, gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
                let mut ga = vec![T::zero(); if na { bsz * m * k } else { 0 }];
                let mut gb = vec![T::zero(); if nb { bsz * k * n } else { 0 }];
                for i in 0..bsz {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &va[i * m * k..(i + 1) * m * k];
                    let bi = &vb[i * k * n..(i + 1) * k * n];
                    if na {
                        // dA = dC · op(B)ᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gi,
                            false,
                            bi,
                            !*trans_b,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    if nb {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dCᵀ · A
                            T::gemm(n, m, k, T::one(), gi, true, ai, false, T::zero(), dst);
                        } else {
                            T::gemm(k, m, n, T::one(), ai, true, gi, false, T::zero(), dst);
                        }
                    }
                }
                if na {
                    self.accumulate(grads, *a, self.grad_like(*a, ga));
                }
                if nb {
                    self.accumulate(grads, *b, self.grad_like(*b, gb));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let n = T::from_usize(d).expect("fits");
                let vg = self.value(*gamma).data();
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = vec![T::zero(); gd.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &gd[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gbeta[j] = gbeta[j] + grow[j];
                        let dh = grow[j] * vg[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hrow[j];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..d {
                        let dh = grow[j] * vg[j];
                        gx[r * d + j] = rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *gamma, self.grad_like(*gamma, gg));
                self.accumulate(grads, *beta, self.grad_like(*beta, gbeta));
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().expect("non-empty shape");
                let mut gx = vec![T::zero(); gd.len()];
                for ((grow, yrow), dst) in gd.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((o, &g), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Gelu(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Relu(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * row + offset;
                        gv.extend_from_slice(&gd[start..start + chunk]);
                    }
                    offset += chunk;
                    self.accumulate(grads, v, self.grad_like(v, gv));
                }
            }
            Op::Conv2d { x, w, b, cols } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let (hw, ckk) = (h * wd, c * k * k);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for i in 0..bsz {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let start = (i * o + oc) * hw;
                            *acc = *acc + gd[start..start + hw].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *b, self.grad_like(*b, gb));
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); o * ckk];
                    for i in 0..bsz {
                        T::gemm(
                            o,
                            hw,
                            ckk,
                            T::one(),
                            &gd[i * o * hw..(i + 1) * o * hw],
                            false,
                            &cols[i * ckk * hw..(i + 1) * ckk * hw],
                            true,
                            T::one(),
                            &mut gw,
                        );
                    }
                    self.accumulate(grads, *w, self.grad_like(*w, gw));
                }
                if self.nodes[x.0].requires_grad {
                    let vw = self.value(*w).data();
                    let mut gx = vec![T::zero(); bsz * c * hw];
                    let mut gcols = vec![T::zero(); ckk * hw];
                    for i in 0..bsz {
                        T::gemm(
                            ckk,
                            o,
                            hw,
                            T::one(),
                            vw,
                            true,
                            &gd[i * o * hw..(i + 1) * o * hw],
                            false,
                            T::zero(),
                            &mut gcols,
                        );
                        kernels::col2im(&gcols, c, h, wd, k, &mut gx[i * c * hw..(i + 1) * c * hw]);
                    }
                    self.accumulate(grads, *x, self.grad_like(*x, gx));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let gx = kernels::upsample2x_backward(gd, s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Crop { x, top, left } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        let dst = p * h * w + (top + y) * w + left;
                        let src = (p * oh + y) * ow;
                        gx[dst..dst + ow].copy_from_slice(&gd[src..src + ow]);
                    }
                }
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let e = self.shape(*x)[1];
                let dh = e / heads;
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let dst = (b * tokens + t) * e + h * dh;
                            let src = ((b * heads + h) * tokens + t) * dh;
                            gx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let dh = self.shape(*x)[2];
                let e = heads * dh;
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let src = (b * tokens + t) * e + h * dh;
                            let dst = ((b * heads + h) * tokens + t) * dh;
                            gx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::MeanAxis1(x) => {
                let s = self.shape(*x);
                let (b, t, e) = (s[0], s[1], s[2]);
                let inv = T::one() / T::from_usize(t).expect("fits");
                let mut gx = vec![T::zero(); b * t * e];
                for bi in 0..b {
                    let grow = &gd[bi * e..(bi + 1) * e];
                    for ti in 0..t {
                        let dst = &mut gx[(bi * t + ti) * e..(bi * t + ti + 1) * e];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, self.grad_like(*x, gx));
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).expect("fits");
                let gx = Tensor::full(self.shape(*x), gd[0] / n);
                self.accumulate(grads, *x, gx);
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p).data(), self.value(*t).data());
                let scale = gd[0] * T::from_f64_lossy(2.0) / T::from_usize(vp.len()).expect("fits");
                let gp: Vec<T> = vp.iter().zip(vt).map(|(&a, &b)| scale * (a - b)).collect();
                if self.nodes[t.0].requires_grad {
                    let gt = gp.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *t, self.grad_like(*t, gt));
                }
                self.accumulate(grads, *p, self.grad_like(*p, gp));
            }
            Op::Ssim { a, b, cache } => {
                let (ga, gb) = ssim_backward(self.value(*a).data(), self.value(*b).data(), cache, gd[0]);
                self.accumulate(grads, *a, self.grad_like(*a, ga));
                self.accumulate(grads, *b, self.grad_like(*b, gb));
            }
        }
        Ok(())
    }
}

/// Mean of squared differences, accumulated in `f64`.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum();
    T::from_f64_lossy(total / a.len().max(1) as f64)
}
