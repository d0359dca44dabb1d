use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeom;
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Conv3d,
    Deconv2d,
    Deconv3d,
    RnnCell,
    LstmCell,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, Self::Conv2d | Self::Conv3d | Self::Deconv2d | Self::Deconv3d)
    }

    pub fn is_3d(self) -> bool {
        matches!(self, Self::Conv3d | Self::Deconv3d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<F: Scalar>(self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        match self {
            Self::Identity => x,
            Self::Sigmoid => tape.sigmoid(x),
            Self::Tanh => tape.tanh(x),
            Self::Relu => tape.relu(x),
        }
    }
}

/// One layer's hyperparameters plus handles to its tensors in a [`ParamStore`].
///
/// Tensor layouts:
/// - dense: `w (out, in)`, `b (out)`
/// - conv: `w (out, in, kd, kh, kw)`, `b (out)`
/// - deconv: `w (in, out, kd, kh, kw)`, `b (out)`
/// - rnn cell: `w_xh (h, in)`, `w_hh (h, h)`, `b (h)`
/// - lstm cell: same with `4h` rows, gate blocks ordered input, forget, modulation, output
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub name: String,
    /// Input features or channels.
    pub n_in: usize,
    /// Output features, channels, or hidden size.
    pub n_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
    pub params: Vec<ParamId>,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Promote a 2D `[k, k]` style triple to the 3D layout for 2D kinds.
fn flat_depth(kind: LayerKind, v: [usize; 3], fill: usize) -> [usize; 3] {
    if kind.is_3d() {
        v
    } else {
        [fill, v[1], v[2]]
    }
}

impl LayerParams {
    fn blank(kind: LayerKind, name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            kind,
            name: name.to_string(),
            n_in,
            n_out,
            kernel: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
            output_padding: [0; 3],
            params: Vec::new(),
        }
    }

    pub fn dense<F: Scalar>(store: &mut ParamStore<F>, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::blank(LayerKind::Dense, name, n_in, n_out);
        let b = glorot(n_in, n_out);
        l.params.push(store.add(format!("{name}.w"), Tensor::uniform(vec![n_out, n_in], b, rng)));
        l.params.push(store.add(format!("{name}.b"), Tensor::zeros(vec![n_out])));
        l
    }

    /// Convolution or transposed convolution. For 2D kinds only the last two
    /// entries of `kernel`, `stride`, `padding`, `output_padding` are used.
    #[allow(clippy::too_many_arguments)]
    pub fn conv<F: Scalar>(
        store: &mut ParamStore<F>,
        kind: LayerKind,
        name: &str,
        n_in: usize,
        n_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if !kind.is_conv() {
            return Err(NnError::Spec(format!("{kind:?} is not a convolution")));
        }
        if n_in == 0 || n_out == 0 || kernel.contains(&0) || stride.contains(&0) {
            return Err(NnError::Spec(format!("{name}: zero-sized convolution")));
        }
        let mut l = Self::blank(kind, name, n_in, n_out);
        l.kernel = flat_depth(kind, kernel, 1);
        l.stride = flat_depth(kind, stride, 1);
        l.padding = flat_depth(kind, padding, 0);
        l.output_padding = flat_depth(kind, output_padding, 0);
        let kv: usize = l.kernel.iter().product();
        let b = glorot(n_in * kv, n_out * kv);
        let shape = |a: usize, c: usize| {
            let mut s = vec![a, c];
            if kind.is_3d() {
                s.push(l.kernel[0]);
            }
            s.extend_from_slice(&l.kernel[1..]);
            s
        };
        let wshape = match kind {
            LayerKind::Conv2d | LayerKind::Conv3d => shape(n_out, n_in),
            _ => shape(n_in, n_out),
        };
        l.params.push(store.add(format!("{name}.w"), Tensor::uniform(wshape, b, rng)));
        l.params.push(store.add(format!("{name}.b"), Tensor::zeros(vec![n_out])));
        Ok(l)
    }

    pub fn rnn_cell<F: Scalar>(store: &mut ParamStore<F>, name: &str, n_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self::recurrent(store, LayerKind::RnnCell, name, n_in, hidden, 1, rng)
    }

    pub fn lstm_cell<F: Scalar>(store: &mut ParamStore<F>, name: &str, n_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self::recurrent(store, LayerKind::LstmCell, name, n_in, hidden, 4, rng)
    }

    fn recurrent<F: Scalar>(
        store: &mut ParamStore<F>,
        kind: LayerKind,
        name: &str,
        n_in: usize,
        hidden: usize,
        gates: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut l = Self::blank(kind, name, n_in, hidden);
        let rows = gates * hidden;
        l.params.push(store.add(format!("{name}.w_xh"), Tensor::uniform(vec![rows, n_in], glorot(n_in, rows), rng)));
        l.params.push(store.add(format!("{name}.w_hh"), Tensor::uniform(vec![rows, hidden], glorot(hidden, rows), rng)));
        l.params.push(store.add(format!("{name}.b"), Tensor::zeros(vec![rows])));
        l
    }

    /// Closed-form number of stored scalars.
    pub fn param_count(&self) -> usize {
        let kv: usize = self.kernel.iter().product();
        let (i, o) = (self.n_in, self.n_out);
        match self.kind {
            LayerKind::Dense => i * o + o,
            LayerKind::Conv2d | LayerKind::Conv3d | LayerKind::Deconv2d | LayerKind::Deconv3d => i * o * kv + o,
            LayerKind::RnnCell => (i + o) * o + o,
            LayerKind::LstmCell => 4 * ((i + o) * o + o),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.params[0]
    }

    /// Conv geometry for an input of `dims`, plus the output spatial dims.
    pub fn geometry(&self, dims: [usize; 3]) -> Result<(ConvGeom, [usize; 3]), NnError> {
        let bad = || NnError::Shape(format!("{}: input dims {dims:?} incompatible with kernel/stride", self.name));
        match self.kind {
            LayerKind::Conv2d | LayerKind::Conv3d => {
                let g = ConvGeom::new(self.n_in, dims, self.kernel, self.stride, self.padding).ok_or_else(bad)?;
                let out = g.out_dims;
                Ok((g, out))
            }
            LayerKind::Deconv2d | LayerKind::Deconv3d => {
                let g = ConvGeom::for_transpose(self.n_out, dims, self.kernel, self.stride, self.padding, self.output_padding)
                    .ok_or_else(bad)?;
                let out = g.in_dims;
                Ok((g, out))
            }
            _ => Err(NnError::Spec(format!("{} has no convolution geometry", self.name))),
        }
    }

    fn map_shape(&self, channels: usize, dims: [usize; 3]) -> Vec<usize> {
        if self.kind.is_3d() {
            vec![channels, dims[0], dims[1], dims[2]]
        } else {
            vec![channels, dims[1], dims[2]]
        }
    }

    /// Spatial dims `[d, h, w]` of a `[c, (d,) h, w]` tensor for this layer.
    pub fn dims_of(&self, shape: &[usize]) -> Result<[usize; 3], NnError> {
        match (self.kind.is_3d(), shape) {
            (true, [c, d, h, w]) if *c == self.n_in => Ok([*d, *h, *w]),
            (false, [c, h, w]) if *c == self.n_in => Ok([1, *h, *w]),
            _ => Err(NnError::Shape(format!("{}: input shape {shape:?} for {} channels", self.name, self.n_in))),
        }
    }

    /// Convolution or transposed convolution of a `[c, (d,) h, w]` input.
    pub fn forward_conv<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var, NnError> {
        let dims = self.dims_of(tape.shape(x))?;
        let (geom, out) = self.geometry(dims)?;
        let w = tape.param(self.params[0]);
        let b = tape.param(self.params[1]);
        let shape = self.map_shape(self.n_out, out);
        match self.kind {
            LayerKind::Conv2d | LayerKind::Conv3d => tape.conv(x, w, Some(b), geom, shape),
            _ => tape.conv_transpose(x, w, Some(b), geom, shape),
        }
    }

    /// Output shape for a given input shape, without running anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match self.kind {
            LayerKind::Dense => Ok(vec![self.n_out]),
            LayerKind::RnnCell | LayerKind::LstmCell => Ok(vec![self.n_out]),
            _ => {
                let (_, out) = self.geometry(self.dims_of(input)?)?;
                Ok(self.map_shape(self.n_out, out))
            }
        }
    }

    pub fn forward_dense<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var, NnError> {
        let w = tape.param(self.params[0]);
        let b = tape.param(self.params[1]);
        tape.linear(w, x, Some(b))
    }

    /// `tanh(W_xh x + W_hh h + b)`.
    pub fn rnn_step<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, h: Var) -> Result<Var, NnError> {
        let pre = self.recurrent_preact(tape, x, h)?;
        Ok(tape.tanh(pre))
    }

    fn recurrent_preact<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, h: Var) -> Result<Var, NnError> {
        let wx = tape.param(self.params[0]);
        let wh = tape.param(self.params[1]);
        let b = tape.param(self.params[2]);
        let a = tape.linear(wx, x, Some(b))?;
        let r = tape.linear(wh, h, None)?;
        tape.add(a, r)
    }

    /// Standard LSTM update; returns `(h_t, c_t)`.
    pub fn lstm_step<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, h: Var, c: Var) -> Result<(Var, Var), NnError> {
        let pre = self.recurrent_preact(tape, x, h)?;
        let n = self.n_out;
        lstm_gates(tape, pre, c, n, vec![n])
    }
}

/// Gate arithmetic shared by the dense and convolutional LSTM cells. `pre`
/// holds four contiguous blocks of `n` pre-activations (i, f, g, o).
pub fn lstm_gates<F: Scalar>(tape: &mut Tape<'_, F>, pre: Var, c: Var, n: usize, shape: Vec<usize>) -> Result<(Var, Var), NnError> {
    let gate = |k: usize, tape: &mut Tape<'_, F>| tape.slice(pre, k * n, shape.clone());
    let i = gate(0, tape)?;
    let f = gate(1, tape)?;
    let g = gate(2, tape)?;
    let o = gate(3, tape)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counts_match(store: &ParamStore<f32>, l: &LayerParams) {
        let stored: usize = l.params.iter().map(|&id| store.get(id).len()).sum();
        assert_eq!(stored, l.param_count(), "{:?}", l.kind);
    }

    #[test]
    fn closed_form_counts_match_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let layers = vec![
            LayerParams::dense(&mut s, "d", 5, 3, &mut rng),
            LayerParams::conv(&mut s, LayerKind::Conv2d, "c2", 2, 4, [1, 3, 3], [1, 2, 2], [0, 1, 1], [0; 3], &mut rng).unwrap(),
            LayerParams::conv(&mut s, LayerKind::Conv3d, "c3", 1, 16, [3, 3, 3], [1, 2, 2], [1; 3], [0; 3], &mut rng).unwrap(),
            LayerParams::conv(&mut s, LayerKind::Deconv2d, "t2", 4, 16, [1, 3, 3], [1, 2, 2], [0, 1, 1], [0, 1, 1], &mut rng).unwrap(),
            LayerParams::conv(&mut s, LayerKind::Deconv3d, "t3", 4, 2, [3, 3, 3], [1; 3], [1; 3], [0; 3], &mut rng).unwrap(),
            LayerParams::rnn_cell(&mut s, "r", 7, 5, &mut rng),
            LayerParams::lstm_cell(&mut s, "l", 7, 5, &mut rng),
        ];
        for l in &layers {
            counts_match(&s, l);
        }
        assert_eq!(layers[6].param_count(), 4 * ((7 + 5) * 5 + 5));
        assert_eq!(s.scalar_count(), layers.iter().map(|l| l.param_count()).sum::<usize>());
    }

    #[test]
    fn dense_hand_example() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LayerParams::dense(&mut s, "d", 2, 2, &mut rng);
        s.get_mut(l.params[0]).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        s.get_mut(l.params[1]).data_mut().copy_from_slice(&[0.0, 1.0]);
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let y = l.forward_dense(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[3.0, 8.0]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LayerParams::conv(&mut s, LayerKind::Conv2d, "c", 1, 1, [1, 3, 3], [1; 3], [0; 3], [0; 3], &mut rng).unwrap();
        s.get_mut(l.params[0]).data_mut().fill(1.0);
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let y = l.forward_conv(&mut t, x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1]);
        assert_eq!(t.value(y), &[9.0]);
    }

    #[test]
    fn lstm_zero_params_gate_arithmetic() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LayerParams::lstm_cell(&mut s, "l", 2, 3, &mut rng);
        for &id in &l.params {
            s.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2], vec![0.3, -1.0]).unwrap();
        let h = t.constant(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let c = t.constant(vec![3], vec![1.0, -2.0, 0.0]).unwrap();
        let (h1, c1) = l.lstm_step(&mut t, x, h, c).unwrap();
        assert_eq!(t.value(c1), &[0.5, -1.0, 0.0]);
        let want: Vec<f64> = [1.0f64, -2.0, 0.0].iter().map(|c| 0.5 * (0.5 * c).tanh()).collect();
        assert_eq!(t.value(h1), want.as_slice());
    }

    #[test]
    fn rnn_scalar_hand_value() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LayerParams::rnn_cell(&mut s, "r", 1, 1, &mut rng);
        s.get_mut(l.params[0]).data_mut()[0] = 1.0;
        s.get_mut(l.params[1]).data_mut()[0] = 0.0;
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1], vec![0.5]).unwrap();
        let h = t.zeros(vec![1]);
        let y = l.rnn_step(&mut t, x, h).unwrap();
        assert!((t.value(y)[0] - 0.46211715726000974).abs() < 1e-15);
    }
}
