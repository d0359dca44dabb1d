//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] borrows the model's [`ParamStore`]; parameter leaves refer to
//! the store instead of copying it. Every operation appends one node, and
//! [`Tape::backward`] walks the nodes in reverse creation order, so gradient
//! accumulation order is fixed by the forward pass.

use super::conv::{col2im, im2col, ConvGeom};
use super::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use super::tensor::{ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward behaviour of spike nodes. The backward pass always uses the
/// rectangular surrogate; `Ramp` makes the forward pass its exact
/// antiderivative so finite differences can check the backward plumbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Step,
    Ramp,
}

#[derive(Debug)]
enum Data<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Spike { x: Var, threshold: F, width: F },
    Lif { u: Var, o: Var, input: Var, gate: Option<Var>, decay: F },
    Linear { w: Var, x: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_channels: usize, cols: Vec<F> },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, in_channels: usize },
    Slice { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    Concat(Vec<Var>),
    Mse { pred: Var, target: Var },
    WeightedSum { x: Var, weights: Vec<F> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    data: Data<F>,
    op: Op<F>,
}

/// Rectangular surrogate derivative of the spike step at `x = u - u_th`.
#[inline]
pub fn surrogate<F: Scalar>(x: F, width: F) -> F {
    let half = width * F::from_f64_lossy(0.5);
    if x.abs() <= half {
        F::one() / width
    } else {
        F::zero()
    }
}

pub struct Tape<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    spike_mode: SpikeMode,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], spike_mode: SpikeMode::Step }
    }

    pub fn with_spike_mode(mut self, mode: SpikeMode) -> Self {
        self.spike_mode = mode;
        self
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data: Data::Owned(data), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].data {
            Data::Owned(d) => d,
            Data::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape(format!("constant of shape {shape:?} given {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(shape, vec![F::zero(); n], Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node { shape, data: Data::Param(id), op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var, NnError> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(self.shape(a).to_vec(), data, op))
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -F::one());
        self.add_scalar(neg, F::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    /// Spike output `step(x - threshold)` (or its ramp in [`SpikeMode::Ramp`]).
    pub fn spike(&mut self, x: Var, threshold: F, width: F) -> Var {
        let half = F::from_f64_lossy(0.5);
        let mode = self.spike_mode;
        self.map(
            x,
            move |u| match mode {
                SpikeMode::Step => {
                    if u - threshold >= F::zero() {
                        F::one()
                    } else {
                        F::zero()
                    }
                }
                SpikeMode::Ramp => ((u - threshold) / width + half).max(F::zero()).min(F::one()),
            },
            Op::Spike { x, threshold, width },
        )
    }

    /// Membrane update `decay * u ⊙ (1 - o) + input`.
    pub fn lif_membrane(&mut self, u: Var, o: Var, input: Var, decay: F) -> Result<Var, NnError> {
        self.lif_membrane_gated(u, o, input, None, decay)
    }

    /// Membrane update with an elementwise decay multiplier:
    /// `(decay * gate) ⊙ u ⊙ (1 - o) + input`. A gate of exactly 1 gives the
    /// same bits as [`Tape::lif_membrane`].
    pub fn lif_membrane_gated(&mut self, u: Var, o: Var, input: Var, gate: Option<Var>, decay: F) -> Result<Var, NnError> {
        self.same_shape(u, o, "lif state")?;
        self.same_shape(u, input, "lif input")?;
        if let Some(gv) = gate {
            self.same_shape(u, gv, "lif gate")?;
        }
        let (uv, ov, iv) = (self.value(u), self.value(o), self.value(input));
        let data = match gate {
            None => uv.iter().zip(ov).zip(iv).map(|((&u, &o), &i)| decay * u * (F::one() - o) + i).collect(),
            Some(gv) => {
                let gv = self.value(gv);
                uv.iter()
                    .zip(ov)
                    .zip(iv)
                    .zip(gv)
                    .map(|(((&u, &o), &i), &g)| decay * g * u * (F::one() - o) + i)
                    .collect()
            }
        };
        Ok(self.push(self.shape(u).to_vec(), data, Op::Lif { u, o, input, gate, decay }))
    }

    /// `W x + b` for `W` of shape `(m, n)` and `x` of length `n`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, NnError> {
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != self.value(x).len() {
            return Err(NnError::Shape(format!("linear: weight {:?} vs input {:?}", ws, self.shape(x))));
        }
        let (m, n) = (ws[0], ws[1]);
        let mut y = match b {
            Some(b) => {
                if self.value(b).len() != m {
                    return Err(NnError::Shape(format!("linear: bias {:?} vs {m} outputs", self.shape(b))));
                }
                self.value(b).to_vec()
            }
            None => vec![F::zero(); m],
        };
        matmul(m, n, 1, self.value(w), self.value(x), &mut y, true);
        Ok(self.push(vec![m], y, Op::Linear { w, x, b }))
    }

    /// Cross-correlation. `x` holds `geom.channels` channels of `geom.in_dims`;
    /// `w` is `(out_channels, channels, kernel...)`; output is
    /// `out_shape` (`out_channels` followed by the non-unit spatial dims).
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var, NnError> {
        let out_channels = out_shape[0];
        let k = geom.patch_rows();
        let n = geom.patch_cols();
        if self.value(x).len() != geom.channels * geom.in_volume() {
            return Err(NnError::Shape(format!("conv: input {:?} vs geometry {:?}", self.shape(x), geom)));
        }
        if self.value(w).len() != out_channels * k {
            return Err(NnError::Shape(format!("conv: weight {:?} vs {out_channels}x{k}", self.shape(w))));
        }
        if out_shape.iter().product::<usize>() != out_channels * n {
            return Err(NnError::Shape(format!("conv: output shape {out_shape:?} vs {out_channels}x{n}")));
        }
        let mut cols = vec![F::zero(); k * n];
        im2col(self.value(x), &geom, &mut cols);
        let mut y = vec![F::zero(); out_channels * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out_channels {
                return Err(NnError::Shape("conv: bias length".into()));
            }
            for (c, chunk) in y.chunks_mut(n).enumerate() {
                chunk.fill(bv[c]);
            }
        }
        matmul(out_channels, k, n, self.value(w), &cols, &mut y, true);
        Ok(self.push(out_shape, y, Op::Conv { x, w, b, geom, out_channels, cols }))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv`] with the same
    /// geometry. `geom` maps the output volume (`geom.channels` channels of
    /// `geom.in_dims`) onto the input (`in_channels` of `geom.out_dims`);
    /// `w` is `(in_channels, out_channels, kernel...)`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var, NnError> {
        let n = geom.patch_cols();
        let rows = geom.patch_rows();
        let in_channels = self.value(x).len() / n.max(1);
        if in_channels * n != self.value(x).len() {
            return Err(NnError::Shape(format!("conv_transpose: input {:?} vs geometry {:?}", self.shape(x), geom)));
        }
        if self.value(w).len() != in_channels * rows {
            return Err(NnError::Shape(format!("conv_transpose: weight {:?}", self.shape(w))));
        }
        if out_shape.iter().product::<usize>() != geom.channels * geom.in_volume() {
            return Err(NnError::Shape(format!("conv_transpose: output shape {out_shape:?}")));
        }
        let mut cols = vec![F::zero(); rows * n];
        matmul_tn(rows, in_channels, n, self.value(w), self.value(x), &mut cols, false);
        let vol = geom.in_volume();
        let mut y = vec![F::zero(); geom.channels * vol];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != geom.channels {
                return Err(NnError::Shape("conv_transpose: bias length".into()));
            }
            for (c, chunk) in y.chunks_mut(vol).enumerate() {
                chunk.fill(bv[c]);
            }
        }
        col2im(&cols, &geom, &mut y);
        Ok(self.push(out_shape, y, Op::ConvT { x, w, b, geom, in_channels }))
    }

    /// Contiguous flat range `[start, start + len)` reshaped to `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var, NnError> {
        let len: usize = shape.iter().product();
        let src = self.value(x);
        if start + len > src.len() {
            return Err(NnError::Shape(format!("slice {start}+{len} out of {}", src.len())));
        }
        let data = src[start..start + len].to_vec();
        Ok(self.push(shape, data, Op::Slice { x, start }))
    }

    /// `y[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var, NnError> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(NnError::Shape("gather: bad index set".into()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape, data, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NnError::Shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape, data, Op::Reshape(x)))
    }

    /// Flat concatenation in argument order.
    pub fn concat(&mut self, parts: &[Var], shape: Vec<usize>) -> Result<Var, NnError> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape(format!("concat into {shape:?} from {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Concat(parts.to_vec())))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        self.same_shape(pred, target, "mse")?;
        let p = self.value(pred);
        let t = self.value(target);
        let n = F::from_usize(p.len().max(1)).unwrap();
        let s = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).fold(F::zero(), |acc, v| acc + v) / n;
        Ok(self.push(vec![], vec![s], Op::Mse { pred, target }))
    }

    /// `Σ x_i w_i` for fixed weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var, NnError> {
        if weights.len() != self.value(x).len() {
            return Err(NnError::Shape("weighted_sum: length mismatch".into()));
        }
        let s = self.value(x).iter().zip(&weights).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(vec![], vec![s], Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(vec![], vec![s], Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = match &node.data {
            Data::Owned(d) => d.as_slice(),
            Data::Param(_) => &[],
        };
        macro_rules! target {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.value(v).len();
                grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, &gv) in target!(*a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in target!(*b).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sub(a, b) => {
                for (d, &gv) in target!(*a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in target!(*b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if a == b {
                    for ((d, &gv), &x) in target!(*a).iter_mut().zip(g).zip(av) {
                        *d += gv * (x + x);
                    }
                } else {
                    for ((d, &gv), &x) in target!(*a).iter_mut().zip(g).zip(bv) {
                        *d += gv * x;
                    }
                    for ((d, &gv), &x) in target!(*b).iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                for (d, &gv) in target!(*a).iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                for (d, &gv) in target!(*a).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gv), &s) in target!(*a).iter_mut().zip(g).zip(y) {
                    *d += gv * s * (F::one() - s);
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &t) in target!(*a).iter_mut().zip(g).zip(y) {
                    *d += gv * (F::one() - t * t);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                for ((d, &gv), &x) in target!(*a).iter_mut().zip(g).zip(av) {
                    if x > F::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Spike { x, threshold, width } => {
                let xv = self.value(*x);
                for ((d, &gv), &u) in target!(*x).iter_mut().zip(g).zip(xv) {
                    *d += gv * surrogate(u - *threshold, *width);
                }
            }
            Op::Lif { u, o, input, gate, decay } => {
                let (uv, ov) = (self.value(*u), self.value(*o));
                let ones;
                let gv = match gate {
                    Some(gt) => self.value(*gt),
                    None => {
                        ones = vec![F::one(); uv.len()];
                        ones.as_slice()
                    }
                };
                for (((d, &gr), &ob), &gt) in target!(*u).iter_mut().zip(g).zip(ov).zip(gv) {
                    *d += gr * *decay * gt * (F::one() - ob);
                }
                for (((d, &gr), &ub), &gt) in target!(*o).iter_mut().zip(g).zip(uv).zip(gv) {
                    *d -= gr * *decay * gt * ub;
                }
                if let Some(gt) = gate {
                    for (((d, &gr), &ub), &ob) in target!(*gt).iter_mut().zip(g).zip(uv).zip(ov) {
                        *d += gr * *decay * ub * (F::one() - ob);
                    }
                }
                for (d, &gr) in target!(*input).iter_mut().zip(g) {
                    *d += gr;
                }
            }
            Op::Linear { w, x, b } => {
                let ws = self.shape(*w);
                let (m, n) = (ws[0], ws[1]);
                matmul(m, 1, n, g, self.value(*x), target!(*w), true);
                matmul_tn(n, m, 1, self.value(*w), g, target!(*x), true);
                if let Some(b) = b {
                    for (d, &gv) in target!(*b).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Conv { x, w, b, geom, out_channels, cols } => {
                let (k, n) = (geom.patch_rows(), geom.patch_cols());
                matmul_nt(*out_channels, n, k, g, cols, target!(*w), true);
                if let Some(b) = b {
                    for (d, chunk) in target!(*b).iter_mut().zip(g.chunks(n)) {
                        *d += chunk.iter().copied().sum::<F>();
                    }
                }
                let mut dcols = vec![F::zero(); k * n];
                matmul_tn(k, *out_channels, n, self.value(*w), g, &mut dcols, false);
                col2im(&dcols, geom, target!(*x));
            }
            Op::ConvT { x, w, b, geom, in_channels } => {
                let (rows, n) = (geom.patch_rows(), geom.patch_cols());
                let mut dcols = vec![F::zero(); rows * n];
                im2col(g, geom, &mut dcols);
                matmul(*in_channels, rows, n, self.value(*w), &dcols, target!(*x), true);
                matmul_nt(*in_channels, n, rows, self.value(*x), &dcols, target!(*w), true);
                if let Some(b) = b {
                    let vol = geom.in_volume();
                    for (d, chunk) in target!(*b).iter_mut().zip(g.chunks(vol)) {
                        *d += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::Slice { x, start } => {
                let t = target!(*x);
                for (d, &gv) in t[*start..*start + g.len()].iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Gather { x, index } => {
                let t = target!(*x);
                for (&j, &gv) in index.iter().zip(g) {
                    t[j] += gv;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = target!(p);
                    let n = t.len();
                    for (d, &gv) in t.iter_mut().zip(&g[off..off + n]) {
                        *d += gv;
                    }
                    off += n;
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g[0] * F::from_f64_lossy(2.0) / F::from_usize(p.len().max(1)).unwrap();
                for ((d, &a), &b) in target!(*pred).iter_mut().zip(p).zip(t) {
                    *d += scale * (a - b);
                }
                if pred != target {
                    for ((d, &a), &b) in target!(*target).iter_mut().zip(p).zip(t) {
                        *d -= scale * (a - b);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                for (d, &wv) in target!(*x).iter_mut().zip(weights) {
                    *d += g[0] * wv;
                }
            }
            Op::Sum(x) => {
                for d in target!(*x).iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Add every parameter gradient into `buf` (indexed by [`ParamId`]).
    pub fn accumulate_params(&self, tape: &Tape<'_, F>, buf: &mut GradBuffer<F>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Data::Param(id), Some(g)) = (&node.data, &self.grads[i]) {
                for (d, &v) in buf.grads[id.0].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer<F> {
    pub grads: Vec<Vec<F>>,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self { grads: store.iter().map(|(_, _, t)| vec![F::zero(); t.len()]).collect() }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &GradBuffer<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }
}
