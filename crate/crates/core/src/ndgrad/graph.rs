use super::tensor::{axis_split, numel, Real, Tensor};
use super::GradError;

/// Log-domain stand-in for log(0). Finite, so it survives the NaN/Inf checks,
/// and far enough below any real log-probability that `exp` flushes it to 0.
pub const LOG_ZERO: f64 = -1.0e30;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var, usize),
    SumAll(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, index: Vec<usize> },
    /// Elementwise multiply by a fixed factor per cell (dropout, masked fill).
    Mask(Var, Vec<T>),
    /// User-supplied elementwise map with its derivative evaluated at the input.
    Map(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the node
/// list is already a topological order.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> GradError {
    GradError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `small` broadcasts against `big` when it is a trailing suffix of it.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums a full-size gradient down to a suffix-broadcast operand.
fn reduce_to<T: Real>(g: &[T], n_small: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_small];
    for chunk in g.chunks(n_small) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn mm_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn mm_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose_last2<T: Real>(data: &[T], shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = numel(&shape[..r - 2]);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(r - 2, r - 1);
    (out, s)
}

impl<T: Real> Graph<T> {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    /// Graph in training mode. Dropout masks are a pure function of `seed`
    /// and the order of dropout calls.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            dropout_seed: seed,
            dropout_calls: 0,
        }
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

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, inputs: &[Var]) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, GradError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (big, small, swapped) = if is_suffix(bv.shape(), av.shape()) {
            (av, bv, false)
        } else if is_suffix(av.shape(), bv.shape()) {
            (bv, av, true)
        } else {
            return Err(shape_err(name, av.shape(), bv.shape()));
        };
        let ns = small.len();
        let sd = small.data();
        let data = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = sd[i % ns];
                if swapped {
                    f(y, x)
                } else {
                    f(x, y)
                }
            })
            .collect();
        Tensor::new(big.shape().to_vec(), data)
    }

    /// Elementwise sum; the smaller operand may broadcast as a trailing suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let c = T::from_f64_lossy(c);
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())?;
        self.push(out, Op::Scale(a, c), "scale", &[a])
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared across all leading dimensions of `a`, or has the same leading
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bslice = if shared {
                bv.data()
            } else {
                &bv.data()[bi * k * n..(bi + 1) * k * n]
            };
            mm_acc(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                bslice,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if v.rank() < 2 {
            return Err(GradError::Shape(format!("transpose needs rank ≥ 2, got {:?}", v.shape())));
        }
        let (data, shape) = transpose_last2(v.data(), v.shape());
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Transpose(a), "transpose", &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(out, Op::Reshape(a), "reshape", &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = self
            .nodes
            .get(inputs.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| GradError::Shape("concat of zero tensors".into()))?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(GradError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extent = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            extent += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(inputs.to_vec(), axis), "concat", inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(GradError::Shape(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, ext, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { a, axis, start }, "slice", &[a])
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if axis >= v.rank() {
            return Err(GradError::Shape(format!("sum axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, ext, inner) = axis_split(v.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &v.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Sum(a, axis), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| GradError::Shape(format!("mean axis {axis} out of range")))?;
        if ext == 0 {
            return Err(GradError::Shape("mean over an empty axis".into()));
        }
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / ext as f64)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, GradError> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all", &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(GradError::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.exp()).collect())?;
        self.push(out, Op::Exp(a), "exp", &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.ln()).collect())?;
        self.push(out, Op::Log(a), "log", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )?;
        self.push(out, Op::Relu(a), "relu", &[a])
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(GradError::Shape(format!("log_softmax axis {axis} invalid for {:?}", v.shape())));
        }
        let (outer, ext, inner) = axis_split(v.shape(), axis);
        let mut data = vec![T::zero(); v.len()];
        let src = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let mx = (0..ext).map(|e| src[at(e)]).fold(T::neg_infinity(), T::max);
                let lse = mx + (0..ext).map(|e| (src[at(e)] - mx).exp()).sum::<T>().ln();
                for e in 0..ext {
                    data[at(e)] = src[at(e)] - lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(a, axis), "log_softmax", &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let d = *v.shape().last().ok_or_else(|| GradError::Shape("layer_norm of a scalar".into()))?;
        let (gs, bs) = (self.nodes[gain.0].value.shape(), self.nodes[bias.0].value.shape());
        if gs != [d] || bs != [d] {
            return Err(GradError::Shape(format!(
                "layer_norm: gain {gs:?} / bias {bs:?} must both be [{d}]"
            )));
        }
        let (g, b) = (self.nodes[gain.0].value.data(), self.nodes[bias.0].value.data());
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let rows = v.len() / d.max(1);
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let h = (row[k] - mu) * rs;
                xhat[r * d + k] = h;
                out[r * d + k] = h * g[k] + b[k];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm", &[x, gain, bias])
    }

    /// Embedding lookup: rows of a `[n, d]` table selected by `index`, giving `[index.len(), d]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var, GradError> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(GradError::Shape(format!("gather needs a [n, d] table, got {:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(GradError::Index { index: i, rows: n });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        self.push(out, Op::Gather { table, index: index.to_vec() }, "gather", &[table])
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var, GradError> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let base = splitmix64(self.dropout_seed ^ splitmix64(call));
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.len();
        let factors: Vec<T> = (0..n as u64)
            .map(|i| {
                let u = (splitmix64(base ^ i.wrapping_mul(0xD6E8_FEB8_6659_FD93)) >> 11) as f64
                    / (1u64 << 53) as f64;
                if u < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        self.apply_mask(a, factors, "dropout")
    }

    /// Replaces cells where `mask` is true with `value`; those cells get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if mask.len() != v.len() {
            return Err(GradError::Shape(format!(
                "masked_fill: mask of {} cells for tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let fill = T::from_f64_lossy(value);
        let data = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let factors = mask.iter().map(|&m| if m { T::zero() } else { T::one() }).collect();
        self.push(out, Op::Mask(a, factors), "masked_fill", &[a])
    }

    fn apply_mask(&mut self, a: Var, factors: Vec<T>, name: &'static str) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().zip(&factors).map(|(&x, &f)| x * f).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Mask(a, factors), name, &[a])
    }

    /// Elementwise map whose derivative is supplied by the caller.
    pub fn map(&mut self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let deriv = v.data().iter().map(|&x| df(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Map(a, deriv), "map", &[a])
    }

    /// log Σ exp along `axis` (removed), composed from recorded primitives.
    /// The shift is a detached per-slice maximum, which leaves the gradient exact.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let v = &self.nodes[a.0].value;
        if axis >= v.rank() {
            return Err(GradError::Shape(format!("logsumexp axis {axis} out of range")));
        }
        let (outer, ext, inner) = axis_split(v.shape(), axis);
        let mut mx = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    let x = v.data()[(o * ext + e) * inner + i];
                    let m = &mut mx[o * inner + i];
                    *m = m.max(x);
                }
            }
        }
        let mut reduced_shape = v.shape().to_vec();
        reduced_shape.remove(axis);
        let mut full = Vec::with_capacity(v.len());
        for o in 0..outer {
            for _ in 0..ext {
                full.extend_from_slice(&mx[o * inner..(o + 1) * inner]);
            }
        }
        let shift_full = self.constant(Tensor::new(v.shape().to_vec(), full)?);
        let shift = self.constant(Tensor::new(reduced_shape, mx)?);
        let centered = self.sub(a, shift_full)?;
        let e = self.exp(centered)?;
        let s = self.sum(e, axis)?;
        let l = self.log(s)?;
        self.add(l, shift)
    }

    /// Reverse sweep from a scalar `seed`. Gradients accumulate in a fixed
    /// order, so repeated calls are bit-identical.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>, GradError> {
        let sv = &self.nodes[seed.0];
        if sv.value.len() != 1 {
            return Err(GradError::NonScalarSeed(sv.value.shape().to_vec()));
        }
        if !sv.requires_grad {
            return Err(GradError::DetachedSeed);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=seed.0).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(sv.value.shape(), T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=seed.0).map(|_| None).collect();
        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads)?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<(), GradError> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(data) {
                    *e += x;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), GradError> {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    let n = val(x).len();
                    let d = if n == gd.len() { gd.to_vec() } else { reduce_to(gd, n) };
                    self.accumulate(grads, x, d)?;
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if !self.nodes[x.0].requires_grad {
                        continue;
                    }
                    let od = val(other).data();
                    let no = od.len();
                    let full: Vec<T> = gd.iter().enumerate().map(|(i, &gv)| gv * od[i % no]).collect();
                    let n = val(x).len();
                    let d = if n == gd.len() { full } else { reduce_to(&full, n) };
                    self.accumulate(grads, x, d)?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|&x| x * *c).collect())?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let sa = av.shape();
                let sb = bv.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch = numel(&sa[..sa.len() - 2]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let bs = if shared { bv.data() } else { &bv.data()[bi * k * n..(bi + 1) * k * n] };
                        mm_nt_acc(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            bs,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let out = if shared { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                        mm_tn_acc(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            out,
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                let (d, _) = transpose_last2(gd, g.shape());
                self.accumulate(grads, *a, d)?;
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec())?,
            Op::Concat(inputs, axis) => {
                let (outer, ext, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let e = val(*v).shape()[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * ext + offset) * inner;
                            d.extend_from_slice(&gd[base..base + e * inner]);
                        }
                        self.accumulate(grads, *v, d)?;
                    }
                    offset += e;
                }
            }
            Op::Slice { a, axis, start } => {
                let src = val(*a);
                let (outer, ext, inner) = axis_split(src.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); src.len()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(a, axis) => {
                let src = val(*a);
                let (outer, ext, inner) = axis_split(src.shape(), *axis);
                let mut d = Vec::with_capacity(src.len());
                for o in 0..outer {
                    for _ in 0..ext {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, vec![gd[0]; val(*a).len()])?;
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x / y).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, ext, inner) = axis_split(g.shape(), *axis);
                let out = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * ext + e) * inner + i;
                        let gs: T = (0..ext).map(|e| gd[at(e)]).sum();
                        for e in 0..ext {
                            d[at(e)] = gd[at(e)] - out[at(e)].exp() * gs;
                        }
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let dim = val(*gain).len();
                let gv = val(*gain).data();
                let dn = T::from_usize(dim).unwrap();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * dim..(r + 1) * dim;
                        let dh: Vec<T> = gd[row.clone()].iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for k in 0..dim {
                            dx[r * dim + k] = rs * (dh[k] - mean_dh - xhat[r * dim + k] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.nodes[gain.0].requires_grad {
                    let full: Vec<T> = gd.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    self.accumulate(grads, *gain, reduce_to(&full, dim))?;
                }
                if self.nodes[bias.0].requires_grad {
                    self.accumulate(grads, *bias, reduce_to(gd, dim))?;
                }
            }
            Op::Gather { table, index } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut dt = vec![T::zero(); t.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, &x) in dt[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::Mask(a, f) | Op::Map(a, f) => {
                let d = gd.iter().zip(f).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

/// Gradients of the differentiable leaves reached by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is not a differentiable leaf reachable from the seed.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value in `graph` when unreached.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
