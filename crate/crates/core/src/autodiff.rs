//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are
//! either trainable (gradients are accumulated for them) or constant. Calling
//! [`Graph::backward`] on a scalar variable walks the tape in reverse and
//! returns the gradient of every variable that depends on a trainable leaf.
//!
//! Shapes are checked eagerly; a bad shape is a programming error inside the
//! model code, so the op constructors panic with a descriptive message rather
//! than returning `Result`.

use crate::freqmap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry for NHWC inputs with weights laid out as
/// `[kernel * kernel * c_in, c_out]` (row order `ky, kx, c_in`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    SignedLog(Var, f64),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    FreqMap(Var),
    MeanAxis1(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    DotConst(Var, Vec<f64>),
    Reshape(Var),
    Pick(Var, Vec<usize>),
    Powf(Var, f64),
    MulScalarVar(Var, Var),
    GradReverse(Var, f64),
    PairwiseSqDist(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `c[m×n] = beta * c + a[m×k] · b[k×n]` with arbitrary element strides for
/// `a` and `b`; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(src: &[f64], d: usize, dst: &mut [f64]) {
    for (row, out) in src.chunks_exact(d).zip(dst.chunks_exact_mut(d)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
    }
}

/// Lays out convolution patches as rows `[n * ho * wo, k * k * c]`.
fn im2col(x: &[f64], n: usize, side: usize, c: usize, spec: ConvSpec) -> Vec<f64> {
    let ho = spec.out_side(side);
    let kk = spec.kernel * spec.kernel * c;
    let mut cols = vec![0.0; n * ho * ho * kk];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..ho {
                let row = ((b * ho + oy) * ho + ox) * kk;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let src = ((b * side + iy as usize) * side + ix as usize) * c;
                        let dst = row + (ky * spec.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], n: usize, side: usize, c: usize, spec: ConvSpec) {
    let ho = spec.out_side(side);
    let kk = spec.kernel * spec.kernel * c;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..ho {
                let row = ((b * ho + oy) * ho + ox) * kk;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let dst = ((b * side + iy as usize) * side + ix as usize) * c;
                        let src = row + (ky * spec.kernel + kx) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant leaf (stops gradients).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("unary shape");
        self.push(value, op, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("binary shape");
        self.push(value, op, &[a, b])
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.last_dim();
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be 2-D");
        assert_eq!(vb.shape()[0], k, "matmul: inner dims {:?} x {:?}", va.shape(), vb.shape());
        let n = vb.shape()[1];
        let m = va.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), k, 1, vb.data(), n, 1, &mut out, 0.0);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out).unwrap();
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias` whose shape equals the trailing dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let bs = vb.shape();
        let xs = vx.shape();
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
            "add_bias: {bs:?} is not a suffix of {xs:?}"
        );
        let bl = vb.len();
        let data = vx
            .data()
            .chunks_exact(bl)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(xs.to_vec(), data).unwrap();
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    /// `sign(x) · ln(1 + |x| / eps)`.
    pub fn signed_log(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::SignedLog(x, eps), |v| v.signum() * (v.abs() / eps).ln_1p())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let d = vx.last_dim();
        assert_eq!(self.value(gamma).len(), d, "layer_norm: gamma width");
        assert_eq!(self.value(beta).len(), d, "layer_norm: beta width");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for (r, row) in vx.data().chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out).unwrap();
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vec![0.0; vx.len()];
        softmax_rows(vx.data(), d, &mut out);
        let value = Tensor::new(vx.shape().to_vec(), out).unwrap();
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vec![0.0; vx.len()];
        for (row, o) in vx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = v - lse;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out).unwrap();
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention. `qkv` is
    /// `[batch, tokens, 3 * dim]` holding queries, keys and values side by
    /// side; returns `[batch, tokens, dim]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let s = v.shape();
        assert_eq!(s.len(), 3, "attention: qkv must be [B, N, 3D]");
        let (bsz, n, d3) = (s[0], s[1], s[2]);
        assert_eq!(d3 % (3 * heads), 0, "attention: width not divisible by heads");
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = v.data();
        let mut probs = vec![0.0; bsz * heads * n * n];
        let mut out = vec![0.0; bsz * n * d];
        let mut row = vec![0.0; n];
        for b in 0..bsz {
            let base = b * n * d3;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let pbase = (b * heads + h) * n * n;
                for i in 0..n {
                    let q = &x[base + i * d3 + qo..base + i * d3 + qo + dh];
                    let mut m = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let k = &x[base + j * d3 + ko..base + j * d3 + ko + dh];
                        *r = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        m = m.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        sum += *r;
                    }
                    let o = &mut out[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
                    for (j, r) in row.iter().enumerate() {
                        let p = r / sum;
                        probs[pbase + i * n + j] = p;
                        let vv = &x[base + j * d3 + vo..base + j * d3 + vo + dh];
                        for (oo, vj) in o.iter_mut().zip(vv) {
                            *oo += p * vj;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, n, d], out).unwrap();
        self.push(value, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// 2-D convolution over NHWC `x` (square images).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4, "conv2d: input must be [B, H, W, C]");
        assert_eq!(s[1], s[2], "conv2d: square inputs only");
        let (n, side, c) = (s[0], s[1], s[3]);
        let vw = self.value(w);
        let kk = spec.kernel * spec.kernel * c;
        assert_eq!(vw.shape().len(), 2, "conv2d: weight must be 2-D");
        assert_eq!(vw.shape()[0], kk, "conv2d: weight rows {:?} vs {kk}", vw.shape());
        let cout = vw.shape()[1];
        assert_eq!(self.value(b).len(), cout, "conv2d: bias width");
        let ho = spec.out_side(side);
        let cols = im2col(vx.data(), n, side, c, spec);
        let rows = n * ho * ho;
        let mut out = Vec::with_capacity(rows * cout);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, kk, cout, &cols, kk, 1, vw.data(), cout, 1, &mut out, 1.0);
        let value = Tensor::new(vec![n, ho, ho, cout], out).unwrap();
        self.push(value, Op::Conv2d { x, w, b, spec, cols }, &[x, w, b])
    }

    /// Blockwise-DCT frequency map of a `[B, S, S, 3]` RGB batch.
    pub fn freq_map(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert!(
            s.len() == 4 && s[1] == s[2] && s[3] == 3 && s[1].is_multiple_of(freqmap::BLOCK),
            "freq_map: expected [B, S, S, 3] with S divisible by 8, got {s:?}"
        );
        let mut out = vec![0.0; vx.len()];
        freqmap::frequency_forward_batch(vx.data(), &mut out, s[1]);
        let value = Tensor::new(s.to_vec(), out).unwrap();
        self.push(value, Op::FreqMap(x), &[x])
    }

    /// Mean over axis 1: `[B, N, ...] -> [B, ...]`.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert!(s.len() >= 2, "mean_axis1 needs rank >= 2");
        let (b, n) = (s[0], s[1]);
        let inner = vx.len() / (b * n);
        let mut out = vec![0.0; b * inner];
        for bi in 0..b {
            let o = &mut out[bi * inner..(bi + 1) * inner];
            for t in 0..n {
                let src = &vx.data()[(bi * n + t) * inner..(bi * n + t + 1) * inner];
                for (a, v) in o.iter_mut().zip(src) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a /= n as f64;
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        let value = Tensor::new(shape, out).unwrap();
        self.push(value, Op::MeanAxis1(x), &[x])
    }

    /// Concatenates along the last axis; all leading dimensions must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: no parts");
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(&v.shape()[..v.shape().len() - 1], &lead[..], "concat_last: leading dims");
                v.last_dim()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out).unwrap();
        self.push(value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Concatenates along axis 0; trailing dimensions must match.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows: trailing dims");
            lead += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, out).unwrap();
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` of axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert!(start < end && end <= s[0], "slice_rows: {start}..{end} of {}", s[0]);
        let inner = v.len() / s[0];
        let data = v.data()[start * inner..end * inner].to_vec();
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data).unwrap();
        self.push(value, Op::SliceRows(x, start), &[x])
    }

    /// Picks `x[i, idx[i]]` from a `[B, K]` matrix.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2, "gather_cols: expected [B, K]");
        let k = v.shape()[1];
        assert_eq!(v.shape()[0], idx.len(), "gather_cols: index count");
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < k, "gather_cols: column {j} out of range");
                v.data()[i * k + j]
            })
            .collect();
        let value = Tensor::new(vec![idx.len()], data).unwrap();
        self.push(value, Op::GatherCols(x, idx.to_vec()), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `sum_i x_i * w_i` against a constant weight vector.
    pub fn dot_const(&mut self, x: Var, w: Vec<f64>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), w.len(), "dot_const: length mismatch");
        let s = v.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::DotConst(x, w), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Flat-indexed gather: `[x.data[i] for i in idx]` as a 1-D tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(vec![idx.len()], data).unwrap();
        self.push(value, Op::Pick(x, idx.to_vec()), &[x])
    }

    /// Elementwise `x^p` (positive inputs when `p` is fractional).
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var: scale must hold one value");
        let c = self.value(s).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::MulScalarVar(x, s), &[x, s])
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        self.unary(x, Op::GradReverse(x, lambda), |v| v)
    }

    /// Squared Euclidean distances between the rows of `[n, d]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2, "pairwise_sq_dist: expected [n, d]");
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &v.data()[i * d..(i + 1) * d];
                let b = &v.data()[j * d..(j + 1) * d];
                let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let value = Tensor::new(vec![n, n], out).unwrap();
        self.push(value, Op::PairwiseSqDist(x), &[x])
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    /// Returns the gradient buffer for `v`, allocating zeros on first use, or
    /// `None` when `v` does not need a gradient.
    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = va.last_dim();
                let n = vb.shape()[1];
                let m = va.rows();
                if let Some(da) = self.buf(grads, *a) {
                    // da[m×k] += g[m×n] · bᵀ
                    gemm(m, n, k, g, n, 1, vb.data(), 1, n, da, 1.0);
                }
                if let Some(db) = self.buf(grads, *b) {
                    // db[k×n] += aᵀ · g
                    gemm(k, m, n, va.data(), 1, k, g, n, 1, db, 1.0);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                let bl = self.value(*b).len();
                if let Some(db) = self.buf(grads, *b) {
                    for row in g.chunks_exact(bl) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.buf(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(d) = self.buf(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.buf(grads, *a) {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(d) = self.buf(grads, *b) {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Pick(x, idx) => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (&i, gv) in idx.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
            }
            Op::Powf(x, p) => {
                let vx = self.value(*x).data();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(vx) {
                        *d += gv * p * xv.powf(p - 1.0);
                    }
                }
            }
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).item();
                let vx = self.value(*x).data();
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
                if let Some(ds) = self.buf(grads, *s) {
                    ds[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::GradReverse(x, lambda) => {
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d -= lambda * v);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(vx) {
                        *d += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                }
            }
            Op::Ln(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(vx) {
                        *d += gv / xv;
                    }
                }
            }
            Op::SignedLog(x, eps) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(vx) {
                        *d += gv / (eps + xv.abs());
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(vx) {
                        if xv >= lo && xv <= hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.buf(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = self.value(*x).last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(out.chunks_exact(d))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = self.value(*x).last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(out.chunks_exact(d))
                    {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let s = v.shape();
                let (bsz, n, d3) = (s[0], s[1], s[2]);
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = v.data();
                let Some(dx) = self.buf(grads, *qkv) else { return };
                let mut dp = vec![0.0; n];
                for b in 0..bsz {
                    let base = b * n * d3;
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let pbase = (b * heads + h) * n * n;
                        for i in 0..n {
                            let go = &g[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
                            let p = &probs[pbase + i * n..pbase + (i + 1) * n];
                            let mut dot = 0.0;
                            for j in 0..n {
                                let vj = &x[base + j * d3 + vo..base + j * d3 + vo + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += dp[j] * p[j];
                                // dV_j += P_ij dO_i
                                let dvj = &mut dx[base + j * d3 + vo..base + j * d3 + vo + dh];
                                for (dd, gg) in dvj.iter_mut().zip(go) {
                                    *dd += p[j] * gg;
                                }
                            }
                            for j in 0..n {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    let qi = x[base + i * d3 + qo + t];
                                    let kj = x[base + j * d3 + ko + t];
                                    dx[base + i * d3 + qo + t] += ds * kj;
                                    dx[base + j * d3 + ko + t] += ds * qi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (n, side, c) = (s[0], s[1], s[3]);
                let vw = self.value(*w);
                let kk = vw.shape()[0];
                let cout = vw.shape()[1];
                let rows = g.len() / cout;
                if let Some(dw) = self.buf(grads, *w) {
                    gemm(kk, rows, cout, cols, 1, kk, g, cout, 1, dw, 1.0);
                }
                if let Some(db) = self.buf(grads, *b) {
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; rows * kk];
                    gemm(rows, cout, kk, g, cout, 1, vw.data(), 1, cout, &mut dcols, 0.0);
                    let dx = self.buf(grads, *x).unwrap();
                    col2im_add(&dcols, dx, n, side, c, *spec);
                }
            }
            Op::FreqMap(x) => {
                let side = self.value(*x).shape()[1];
                if let Some(dx) = self.buf(grads, *x) {
                    freqmap::frequency_adjoint_batch(g, dx, side);
                }
            }
            Op::MeanAxis1(x) => {
                let s = self.value(*x).shape();
                let (b, n) = (s[0], s[1]);
                let inner = g.len() / b;
                if let Some(dx) = self.buf(grads, *x) {
                    for bi in 0..b {
                        let gr = &g[bi * inner..(bi + 1) * inner];
                        for t in 0..n {
                            let dr = &mut dx[(bi * n + t) * inner..(bi * n + t + 1) * inner];
                            for (a, v) in dr.iter_mut().zip(gr) {
                                *a += v / n as f64;
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = gout.last_dim();
                let rows = gout.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(dp) = self.buf(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.buf(grads, p) {
                        dp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let v = self.value(*x);
                let inner = v.len() / v.shape()[0];
                if let Some(dx) = self.buf(grads, *x) {
                    dx[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherCols(x, idx) => {
                let k = self.value(*x).shape()[1];
                if let Some(dx) = self.buf(grads, *x) {
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * k + j] += g[i];
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::DotConst(x, w) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(w).for_each(|(a, b)| *a += g[0] * b);
                }
            }
            Op::PairwiseSqDist(x) => {
                let v = self.value(*x);
                let (n, d) = (v.shape()[0], v.shape()[1]);
                let xd = v.data();
                if let Some(dx) = self.buf(grads, *x) {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let c = 2.0 * (g[i * n + j] + g[j * n + i]);
                            if c == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                dx[i * d + t] += c * (xd[i * d + t] - xd[j * d + t]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Runs a finite-difference check of `build` against every input tensor.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report = check_gradients(&inputs, &build, &GradCheckConfig::default());
        assert!(report.passed(), "{report:?}");
    }

    /// Projects a non-scalar output onto fixed random weights.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.value(y).len();
        let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.dot_const(y, w)
    }

    #[test]
    fn matmul_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check(inputs, |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_bias(y, v[2]);
            project(g, y, 2)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        check(inputs, |g, v| {
            let a = g.gelu(v[0]);
            let b = g.sigmoid(v[1]);
            let c = g.mul(a, b);
            let d = g.sub(c, v[0]);
            let e = g.exp(d);
            let f = g.add_scalar(e, 1.0);
            let h = g.ln(f);
            let r = g.relu(v[1]);
            let s = g.add(h, r);
            let t = g.scale(s, 0.7);
            project(g, t, 4)
        });
    }

    #[test]
    fn layer_norm_softmax_logsoftmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ];
        check(inputs, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let s = g.softmax(y);
            let l = g.log_softmax(v[0]);
            let z = g.add(s, l);
            project(g, z, 6)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![rand_tensor(&mut rng, &[2, 5, 12])];
        check(inputs, |g, v| {
            let y = g.attention(v[0], 2);
            project(g, y, 8)
        });
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // With identical values per token, output equals that value.
        let mut g = Graph::new();
        let mut data = vec![0.0; 4 * 6];
        for t in 0..4 {
            data[t * 6] = t as f64;
            data[t * 6 + 2] = 0.3 * t as f64;
            data[t * 6 + 4] = 1.5;
            data[t * 6 + 5] = -2.0;
        }
        let x = g.constant(Tensor::new(vec![1, 4, 6], data).unwrap());
        let y = g.attention(x, 1);
        for t in 0..4 {
            assert!((g.value(y).data()[t * 2] - 1.5).abs() < 1e-12);
            assert!((g.value(y).data()[t * 2 + 1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in [
            ConvSpec { kernel: 3, stride: 1, pad: 1 },
            ConvSpec { kernel: 3, stride: 2, pad: 1 },
            ConvSpec { kernel: 2, stride: 2, pad: 0 },
        ] {
            let inputs = vec![
                rand_tensor(&mut rng, &[2, 4, 4, 2]),
                rand_tensor(&mut rng, &[spec.kernel * spec.kernel * 2, 3]),
                rand_tensor(&mut rng, &[3]),
            ];
            check(inputs, move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], spec);
                project(g, y, 10)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[1, 5, 5, 2]);
        let w = rand_tensor(&mut rng, &[9 * 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, spec);
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut s = b.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2 {
                                let xi = x.data()[((iy as usize) * 5 + ix as usize) * 2 + ci];
                                s += xi * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * 3 + ox) * 3 + co];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 2, 4]),
            rand_tensor(&mut rng, &[3, 2, 2]),
            rand_tensor(&mut rng, &[3, 6]),
        ];
        check(inputs, |g, v| {
            let c = g.concat_last(&[v[0], v[1]]);
            let m = g.mean_axis1(c);
            let r = g.concat_rows(&[m, v[2]]);
            let s = g.slice_rows(r, 1, 5);
            let d = g.pairwise_sq_dist(s);
            let e = g.reshape(d, &[16]);
            let q = g.sum_all(e);
            let p = g.mean_all(s);
            let q = g.scale(q, 0.1);
            let t = g.add(q, p);
            let gr = g.gather_cols(r, &[0, 1, 2, 3, 4, 5]);
            let gs = project(g, gr, 3);
            g.add(t, gs)
        });
    }

    #[test]
    fn pick_pow_scalar_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut x = rand_tensor(&mut rng, &[3, 4]);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        let inputs = vec![x, rand_tensor(&mut rng, &[1])];
        check(inputs, |g, v| {
            let p = g.pick(v[0], &[1, 5, 5, 11]);
            let r = g.powf(p, -1.5);
            let s = g.mul_scalar_var(r, v[1]);
            project(g, s, 17)
        });
    }

    #[test]
    fn signed_log_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = rand_tensor(&mut rng, &[2, 5]);
        // Keep clear of the kink at zero.
        x.data_mut().iter_mut().for_each(|v| *v += 0.2 * v.signum());
        check(vec![x], |g, v| {
            let y = g.signed_log(v[0], 0.1);
            project(g, y, 18)
        });
    }

    #[test]
    fn freq_map_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = vec![rand_tensor(&mut rng, &[1, 8, 8, 3])];
        check(inputs, |g, v| {
            let y = g.freq_map(v[0]);
            project(g, y, 15)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = g.clamp(x, 0.0, 1.0);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_reversal_negates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let r = g.grad_reverse(x, 1.0);
        assert_eq!(g.value(r), g.value(x));
        let sq = g.mul(r, r);
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[-0.6, 1.4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
