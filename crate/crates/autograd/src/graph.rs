//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into the leaves that require gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, TensorError};
use crate::float::{gemm, Float};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, T),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<T> },
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    Conv2d(Box<ConvRecord<T>>),
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Select { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
}

#[derive(Debug)]
struct ConvRecord<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: ConvSpec,
    cols: Vec<T>,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of each bound parameter, in store order.
    pub fn for_params(&self, bound: &Bound) -> Vec<Option<&[T]>> {
        bound.vars().iter().map(|&v| self.get(v)).collect()
    }
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let dinner = c * (one + T::lit(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dinner;
    (value, deriv)
}

impl<T: Float> Graph<T> {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Graph for inference: no dropout.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, data: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        // SAFETY of unwrap: data is derived elementwise from x.
        let value = Tensor::new(shape, data).expect("elementwise shape");
        self.push(value, op, needs)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every parameter of `store` as a leaf; trainable ones get gradients.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        let vars = store
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                self.push(t, Op::Leaf, p.trainable)
            })
            .collect();
        Bound::new(vars)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, r: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sr = self.shape(r);
        let n = *sa.last().unwrap_or(&1);
        if sa.is_empty() || sr.len() != 1 || sr[0] != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        Ok(n)
    }

    /// `a + r` where `r` broadcasts along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", a, r)?;
        let rv = self.data(r);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(r);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, r), needs))
    }

    /// `a * r` where `r` broadcasts along the last axis of `a`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", a, r)?;
        let rv = self.data(r);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(r);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(a, r), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        self.unary(x, data, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let data = self.data(x).iter().map(|&v| v + c).collect();
        self.unary(x, data, Op::AddScalar(x))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, T::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, T::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.unary(x, data, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        self.unary(x, data, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let data = self
            .data(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        self.unary(x, data, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.exp()).collect();
        self.unary(x, data, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.ln()).collect();
        self.unary(x, data, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.abs()).collect();
        self.unary(x, data, Op::Abs(x))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(floor)).collect();
        self.unary(x, data, Op::ClampMin(x, floor))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut mx = T::neg_infinity();
                for i in 0..len {
                    mx = mx.max(src[at(i)]);
                }
                let mut sum = T::zero();
                for i in 0..len {
                    sum += (src[at(i)] - mx).exp();
                }
                let log_sum = sum.ln();
                for i in 0..len {
                    let shifted = src[at(i)] - mx;
                    out[at(i)] = if log {
                        shifted - log_sum
                    } else {
                        shifted.exp() / sum
                    };
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let data = self.softmax_values(x, axis, false);
        Ok(self.unary(x, data, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let data = self.softmax_values(x, axis, true);
        Ok(self.unary(x, data, Op::LogSoftmax { x, axis }))
    }

    /// Normalize each slice along `axis` to zero mean and unit variance
    /// (biased variance). No affine transform.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let n = T::from_usize(len).expect("axis length");
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| src[at(i)]).sum::<T>() / n;
                let var = (0..len)
                    .map(|i| {
                        let d = src[at(i)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let r = T::one() / (var + eps).sqrt();
                inv_std[o * inner + j] = r;
                for i in 0..len {
                    out[at(i)] = (src[at(i)] - mean) * r;
                }
            }
        }
        Ok(self.unary(x, out, Op::LayerNorm { x, axis, inv_std }))
    }

    /// Scale each slice along `axis` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let sq = (0..len).map(|i| src[at(i)] * src[at(i)]).sum::<T>();
                let norm = sq.sqrt().max(eps);
                norms[o * inner + j] = norm;
                for i in 0..len {
                    out[at(i)] = src[at(i)] / norm;
                }
            }
        }
        Ok(self.unary(x, out, Op::L2Normalize { x, axis, norms }))
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,kh,kw]` weights and
    /// an optional `[O]` bias. Output is `[O,H',W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (c_in, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(invalid("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (c_out, c_w, kh, kw) = match *self.shape(w) {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref s => {
                return Err(invalid(
                    "conv2d",
                    format!("weight must be [O,C,kh,kw], got {s:?}"),
                ))
            }
        };
        if c_w != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![c_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if spec.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        }
        let h_out = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let w_out = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
        };
        let cols = im2col(self.data(x), geom, spec);
        let ckk = c_in * kh * kw;
        let hw = h_out * w_out;
        let mut out = vec![T::zero(); c_out * hw];
        gemm(c_out, ckk, hw, self.data(w), false, &cols, false, &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.data(b);
            for (o, chunk) in out.chunks_mut(hw).enumerate() {
                for v in chunk {
                    *v += bv[o];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![c_out, h_out, w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d(Box::new(ConvRecord {
                x,
                w,
                b,
                spec,
                cols,
                geom,
            })),
            needs,
        ))
    }

    /// Inverted dropout; identity unless the graph is in training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} not in [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.data(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.unary(x, data, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x), needs))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start + len > n {
            return Err(invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for width {n}", start + len),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let (m, _) = self.matrix_dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let (_, n) = self.matrix_dims("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Gather flat elements of `x` into a 1-D tensor.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let len = self.data(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(invalid(
                "select",
                format!("index {bad} out of range for {len} elements"),
            ));
        }
        let src = self.data(x);
        let out = indices.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![indices.len()], out)?,
            Op::Select {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Gather whole rows of a matrix; result is `[indices.len(), n]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(invalid(
                "select_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let flat: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        let picked = self.select(x, &flat)?;
        self.reshape(picked, vec![rows.len(), n])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1);
        let s = self.data(x).iter().copied().sum::<T>() / T::from_usize(n).expect("count");
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += src[(o * len + i) * inner + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis { x, axis }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_with(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_with(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s / o;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for (((d, &s), &num), &den) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= s * num / (den * den);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.data(*a), self.data(*b));
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &z)| if is_min { x <= z } else { x >= z })
                    .collect();
                self.acc_with(grads, *a, |ga| {
                    for ((d, &s), &p) in ga.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *d += s;
                        }
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((d, &s), &p) in gb.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *d += s;
                        }
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                let n = self.data(*r).len();
                self.acc_with(grads, *r, |gr| {
                    for row in g.chunks(n) {
                        add_into(gr, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let rv = self.data(*r);
                let av = self.data(*a);
                let n = rv.len();
                self.acc_with(grads, *a, |ga| {
                    for (grow, drow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for ((d, &s), &m) in drow.iter_mut().zip(grow).zip(rv) {
                            *d += s * m;
                        }
                    }
                });
                self.acc_with(grads, *r, |gr| {
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for ((d, &s), &x) in gr.iter_mut().zip(grow).zip(arow) {
                            *d += s * x;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_with(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc_with(grads, *x, |gx| add_into(gx, g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G * B^T ; dB = A^T * G
                self.acc_with(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, T::one()));
                self.acc_with(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, T::one()));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[0];
                let (av, bv) = (self.data(*a), self.data(*b));
                // Y = A B^T ; dA = G B ; dB = G^T A
                self.acc_with(grads, *a, |ga| gemm(m, n, k, g, false, bv, false, ga, T::one()));
                self.acc_with(grads, *b, |gb| gemm(n, m, k, g, true, av, false, gb, T::one()));
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(self.shape(*x));
                self.acc_with(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * gelu_parts(v).1;
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * o * (T::one() - o);
                    }
                });
            }
            Op::Exp(x) => {
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * o;
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s / v;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.data(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += s;
                        } else if v < T::zero() {
                            *d -= s;
                        }
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let xv = self.data(*x);
                let floor = *floor;
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > floor {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let total: T = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += g[at(i)] - y[at(i)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let n = T::from_usize(len).expect("axis length");
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let r = inv_std[o * inner + j];
                            let mean_g: T = (0..len).map(|i| g[at(i)]).sum::<T>() / n;
                            let mean_gy: T =
                                (0..len).map(|i| g[at(i)] * y[at(i)]).sum::<T>() / n;
                            for i in 0..len {
                                gx[at(i)] += r * (g[at(i)] - mean_g - y[at(i)] * mean_gy);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let norm = norms[o * inner + j];
                            let dot: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += (g[at(i)] - y[at(i)] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::Conv2d(rec) => {
                let ConvGeom {
                    c_in,
                    c_out,
                    kh,
                    kw,
                    h_out,
                    w_out,
                    ..
                } = rec.geom;
                let ckk = c_in * kh * kw;
                let hw = h_out * w_out;
                let wv = self.data(rec.w);
                // dW = G (O x HW) * cols^T (HW x CKK)
                self.acc_with(grads, rec.w, |gw| {
                    gemm(c_out, hw, ckk, g, false, &rec.cols, true, gw, T::one())
                });
                if let Some(b) = rec.b {
                    self.acc_with(grads, b, |gb| {
                        for (o, chunk) in g.chunks(hw).enumerate() {
                            gb[o] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.needs(rec.x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    gemm(ckk, c_out, hw, wv, true, g, false, &mut dcols, T::zero());
                    self.acc_with(grads, rec.x, |gx| col2im(&dcols, gx, rec.geom, rec.spec));
                }
            }
            Op::Dropout { x, mask } => {
                self.acc_with(grads, *x, |gx| {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(self.shape(*x));
                let len = node.value.shape()[1];
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.acc_with(grads, p, |gp| {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    self.acc_with(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Select { x, indices } => {
                self.acc_with(grads, *x, |gx| {
                    for (&i, &s) in indices.iter().zip(g) {
                        gx[i] += s;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc_with(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.data(*x).len().max(1)).expect("count");
                let s = g[0] / n;
                self.acc_with(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                gx[(o * len + i) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let len = self.data(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Float>(x: &[T], g: ConvGeom, spec: ConvSpec) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * hw];
    let pad = spec.padding as isize;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], dx: &mut [T], g: ConvGeom, spec: ConvSpec) {
    let hw = g.h_out * g.w_out;
    let pad = spec.padding as isize;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
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

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(vec![4]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t(vec![2, 3], &[1., 2., 3., 4., 5., 6.]));
        let eye = g.constant(t(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::<f64>::inference();
        let vals: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(vec![1, 4, 4], &vals));
        let w = g.constant(t(vec![1, 1, 1, 1], &[1.0]));
        let y = g
            .conv2d(x, w, None, ConvSpec { stride: 1, padding: 0 })
            .unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        assert_eq!(g.value(y).data(), &vals[..]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn layer_norm_slices_have_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t(vec![2, 4], &[1., 2., 3., 10., -1., 0., 5., 2.]));
        let y = g.layer_norm(x, 1, 0.0).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_at_inference_and_seeded_in_training() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(vec![32], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);

        let run = |seed| {
            let mut g = Graph::<f64>::new(true, seed);
            let x = g.constant(Tensor::full(vec![64], 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        assert!(run(7).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::inference();
        let x = g.variable(Tensor::zeros(vec![3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::inference();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }
}
