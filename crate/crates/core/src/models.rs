//! Encoder-decoder sequence predictors: base RNN/LSTM (3D conv encoder,
//! flatten, two recurrent layers, deconv decoder), base SNN (2D conv/deconv
//! with LIF neurons), ConvLSTM, and the STC-style spiking variant.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{Field2D, WindowedDataset};
use crate::nn::layers::lstm_gates;
use crate::nn::tensor::{load_checkpoint, save_checkpoint};
use crate::nn::{
    deterministic, Activation, AdamState, ConvGeom, GradBuffer, LayerKind, LayerParams, NnError, ParamId, ParamStore, Scalar,
    Tape, Tensor, Var,
};
use crate::spiking::{lif_tape, stc_lif_tape, LifParams, StcGates, STC_GATE_CALIBRATION};

type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BaseRnn,
    BaseLstm,
    BaseSnn,
    ConvLstm,
    StcLif,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::BaseRnn, Family::BaseLstm, Family::BaseSnn, Family::ConvLstm, Family::StcLif];

    pub fn is_spiking(self) -> bool {
        matches!(self, Self::BaseSnn | Self::StcLif)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BaseRnn => "base_rnn",
            Self::BaseLstm => "base_lstm",
            Self::BaseSnn => "base_snn",
            Self::ConvLstm => "conv_lstm",
            Self::StcLif => "stc_lif",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| NnError::Spec(format!("unknown model family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// `(height, width)` of every frame.
    pub grid: (usize, usize),
    pub in_len: usize,
    pub out_len: usize,
    pub encoder_channels: Vec<usize>,
    /// Hidden decoder channels; a final single-channel layer is appended.
    pub decoder_channels: Vec<usize>,
    pub kernel: usize,
    /// Spatial stride of each encoder layer (mirrored by the decoder).
    pub strides: Vec<usize>,
    /// base_rnn / base_lstm: sizes of the recurrent layers before the last,
    /// whose size is always the flatten width. conv_lstm: hidden channels.
    pub hidden: Vec<usize>,
    pub output_activation: Activation,
    pub lif: LifParams,
    pub stc_kernel: usize,
}

impl ModelSpec {
    pub fn new(family: Family, grid: (usize, usize), in_len: usize, out_len: usize) -> Self {
        let hidden = match family {
            Family::BaseRnn | Family::BaseLstm => vec![128],
            Family::ConvLstm => vec![16],
            _ => Vec::new(),
        };
        Self {
            family,
            grid,
            in_len,
            out_len,
            encoder_channels: vec![16, 4],
            decoder_channels: vec![16],
            kernel: 3,
            strides: vec![2, 2],
            hidden,
            output_activation: Activation::Sigmoid,
            lif: LifParams::default(),
            stc_kernel: 3,
        }
    }

    /// 132x96 frames, 3 inputs, 1 output.
    pub fn fcg_default(family: Family) -> Self {
        Self::new(family, (96, 132), 3, 1)
    }

    /// 200x200 frames, 10 inputs, 10 outputs.
    pub fn turing_default(family: Family) -> Self {
        Self::new(family, (200, 200), 10, 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::Spec(m.to_string()));
        if self.in_len == 0 || self.out_len == 0 {
            return bad("in_len and out_len must be positive");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("empty grid");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder channels must be nonempty and positive");
        }
        if self.strides.len() != self.encoder_channels.len() || self.strides.contains(&0) {
            return bad("one positive stride per encoder layer");
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() || self.decoder_channels.contains(&0) {
            return bad("decoder needs one hidden channel count per encoder layer beyond the first");
        }
        if self.kernel % 2 == 0 || self.stc_kernel % 2 == 0 {
            return bad("kernels must be odd");
        }
        match self.family {
            Family::BaseRnn | Family::BaseLstm | Family::ConvLstm if self.hidden.is_empty() || self.hidden.contains(&0) => {
                bad("recurrent families need positive hidden sizes")
            }
            Family::ConvLstm if self.hidden.len() != 1 => bad("conv_lstm takes one hidden channel count"),
            _ => self.lif.validate(),
        }
    }
}

/// LSTM cell whose input and recurrent transforms are same-padded convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmCell {
    pub n_in: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// `(4 hidden, n_in, k, k)`
    pub wx: ParamId,
    /// `(4 hidden, hidden, k, k)`
    pub wh: ParamId,
    /// `(4 hidden)`
    pub b: ParamId,
}

impl ConvLstmCell {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, n_in: usize, hidden: usize, kernel: usize, rng: &mut impl rand::Rng) -> Self {
        let kk = kernel * kernel;
        let rows = 4 * hidden;
        let bound = |fan_in: usize| (6.0 / ((fan_in + rows) * kk) as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), Tensor::uniform(vec![rows, n_in, kernel, kernel], bound(n_in), rng));
        let wh = store.add(format!("{name}.wh"), Tensor::uniform(vec![rows, hidden, kernel, kernel], bound(hidden), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![rows]));
        Self { n_in, hidden, kernel, wx, wh, b }
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.n_in + self.hidden) * self.kernel * self.kernel + 4 * self.hidden
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.wx, self.wh, self.b]
    }

    /// One step over `(channels, h, w)` maps; returns `(h_t, c_t)`.
    pub fn step_tape<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (hh, ww) = match tape.shape(x) {
            [ch, a, b] if *ch == self.n_in => (*a, *b),
            s => return Err(NnError::Shape(format!("conv_lstm input {s:?} for {} channels", self.n_in))),
        };
        let state = vec![self.hidden, hh, ww];
        if tape.shape(h) != state.as_slice() || tape.shape(c) != state.as_slice() {
            return Err(NnError::Shape(format!("conv_lstm state {:?} / {:?}, want {state:?}", tape.shape(h), tape.shape(c))));
        }
        let k = self.kernel;
        let p = k / 2;
        let gx = ConvGeom::new(self.n_in, [1, hh, ww], [1, k, k], [1; 3], [0, p, p]).ok_or_else(|| NnError::Shape("conv_lstm kernel".into()))?;
        let gh = ConvGeom::new(self.hidden, [1, hh, ww], [1, k, k], [1; 3], [0, p, p]).ok_or_else(|| NnError::Shape("conv_lstm kernel".into()))?;
        let pre_shape = vec![4 * self.hidden, hh, ww];
        let (wx, wh, b) = (tape.param(self.wx), tape.param(self.wh), tape.param(self.b));
        let ax = tape.conv(x, wx, Some(b), gx, pre_shape.clone())?;
        let ah = tape.conv(h, wh, None, gh, pre_shape)?;
        let pre = tape.add(ax, ah)?;
        lstm_gates(tape, pre, c, self.hidden * hh * ww, state)
    }
}

/// Eager ConvLSTM step on `(channels, h, w)` tensors.
pub fn conv_lstm_cell_step<F: Scalar>(
    x: &Tensor<F>,
    h: &Tensor<F>,
    c: &Tensor<F>,
    store: &ParamStore<F>,
    cell: &ConvLstmCell,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
    let hv = tape.constant(h.shape().to_vec(), h.data().to_vec())?;
    let cv = tape.constant(c.shape().to_vec(), c.data().to_vec())?;
    let (h1, c1) = cell.step_tape(&mut tape, xv, hv, cv)?;
    Ok((Tensor::new(h.shape().to_vec(), tape.value(h1).to_vec())?, Tensor::new(c.shape().to_vec(), tape.value(c1).to_vec())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    /// 3D conv encoder over the stacked input frames, per-frame flatten,
    /// recurrent stack, reshape of the last state, 2D deconv decoder.
    Ann { encoder: Vec<LayerParams>, recurrent: Vec<LayerParams>, decoder: Vec<LayerParams>, latent: [usize; 3] },
    /// Conv/deconv stack with a spiking layer after every layer but the last.
    Snn { encoder: Vec<LayerParams>, decoder: Vec<LayerParams>, gates: Option<Vec<StcGates>>, spike_shapes: Vec<Vec<usize>> },
    ConvLstm { encoder: Vec<LayerParams>, cell: ConvLstmCell, decoder: Vec<LayerParams>, latent: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub arch: Arch,
    pub store: ParamStore<f32>,
    pub seed: u64,
}

fn conv_dims(spec: &ModelSpec) -> Vec<[usize; 2]> {
    let mut dims = vec![[spec.grid.0, spec.grid.1]];
    let p = spec.kernel / 2;
    for &s in &spec.strides {
        let [h, w] = *dims.last().unwrap();
        let f = |n: usize| (n + 2 * p).saturating_sub(spec.kernel) / s + 1;
        dims.push([f(h), f(w)]);
    }
    dims
}

/// Encoder (2D or 3D) and mirrored 2D decoder layers. Returns the layers and
/// spatial dims after each encoder layer.
fn build_conv_stack(
    store: &mut ParamStore<f32>,
    spec: &ModelSpec,
    enc_kind: LayerKind,
    dec_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LayerParams>, Vec<LayerParams>, Vec<[usize; 2]>)> {
    let k = spec.kernel;
    let p = k / 2;
    let dims = conv_dims(spec);
    let mut encoder = Vec::new();
    let mut c_in = 1;
    for (i, (&c, &s)) in spec.encoder_channels.iter().zip(&spec.strides).enumerate() {
        let (kernel, stride, pad) = if enc_kind == LayerKind::Conv3d {
            ([k, k, k], [1, s, s], [p, p, p])
        } else {
            ([1, k, k], [1, s, s], [0, p, p])
        };
        encoder.push(LayerParams::conv(store, enc_kind, &format!("enc{i}"), c_in, c, kernel, stride, pad, [0; 3], rng)?);
        c_in = c;
    }
    let n = spec.strides.len();
    let mut decoder = Vec::new();
    let mut c_in = dec_in;
    for j in 0..n {
        let enc_idx = n - 1 - j;
        let s = spec.strides[enc_idx];
        let [hi, wi] = dims[enc_idx + 1];
        let [ho, wo] = dims[enc_idx];
        let op = |i: usize, o: usize| -> Result<usize> {
            let base = ((i - 1) * s + k).checked_sub(2 * p).ok_or_else(|| NnError::Spec("kernel smaller than padding".into()))?;
            o.checked_sub(base)
                .filter(|&d| d < s)
                .ok_or_else(|| NnError::Spec(format!("decoder cannot restore {o} from {i} at stride {s}")))
        };
        let out_c = if j + 1 == n { 1 } else { spec.decoder_channels[j] };
        decoder.push(LayerParams::conv(
            store,
            LayerKind::Deconv2d,
            &format!("dec{j}"),
            c_in,
            out_c,
            [1, k, k],
            [1, s, s],
            [0, p, p],
            [0, op(hi, ho)?, op(wi, wo)?],
            rng,
        )?);
        c_in = out_c;
    }
    Ok((encoder, decoder, dims))
}

/// Deterministically initialized model for `spec`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let last_enc = *spec.encoder_channels.last().unwrap();
    let arch = match spec.family {
        Family::BaseRnn | Family::BaseLstm => {
            let (encoder, decoder, dims) = build_conv_stack(&mut store, spec, LayerKind::Conv3d, last_enc, &mut rng)?;
            let [h, w] = *dims.last().unwrap();
            let flatten = last_enc * h * w;
            let mut sizes = spec.hidden.clone();
            sizes.push(flatten);
            let mut recurrent = Vec::new();
            let mut n_in = flatten;
            for (i, &hs) in sizes.iter().enumerate() {
                let name = format!("rec{i}");
                recurrent.push(if spec.family == Family::BaseRnn {
                    LayerParams::rnn_cell(&mut store, &name, n_in, hs, &mut rng)
                } else {
                    LayerParams::lstm_cell(&mut store, &name, n_in, hs, &mut rng)
                });
                n_in = hs;
            }
            Arch::Ann { encoder, recurrent, decoder, latent: [last_enc, h, w] }
        }
        Family::BaseSnn | Family::StcLif => {
            let (encoder, decoder, dims) = build_conv_stack(&mut store, spec, LayerKind::Conv2d, last_enc, &mut rng)?;
            let mut spike_shapes: Vec<Vec<usize>> =
                spec.encoder_channels.iter().zip(&dims[1..]).map(|(&c, d)| vec![c, d[0], d[1]]).collect();
            let n = spec.strides.len();
            for j in 0..n - 1 {
                let d = dims[n - 1 - j];
                spike_shapes.push(vec![spec.decoder_channels[j], d[0], d[1]]);
            }
            let gates = if spec.family == Family::StcLif {
                let mut g = Vec::new();
                for (i, s) in spike_shapes.iter().enumerate() {
                    g.push(StcGates::new(&mut store, &format!("stc{i}"), s[0], spec.stc_kernel, &mut rng)?);
                }
                Some(g)
            } else {
                None
            };
            Arch::Snn { encoder, decoder, gates, spike_shapes }
        }
        Family::ConvLstm => {
            let hc = spec.hidden[0];
            let (encoder, decoder, dims) = build_conv_stack(&mut store, spec, LayerKind::Conv2d, hc, &mut rng)?;
            let [h, w] = *dims.last().unwrap();
            let cell = ConvLstmCell::new(&mut store, "cell", last_enc, hc, spec.kernel, &mut rng);
            Arch::ConvLstm { encoder, cell, decoder, latent: [hc, h, w] }
        }
    };
    Ok(Model { spec: spec.clone(), arch, store, seed })
}

/// Anything that maps `in_len` frames to the next `out_len` frames.
pub trait Predictor {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    fn predict(&self, frames: &[&Field2D]) -> Result<Vec<Field2D>>;
}

fn frame_var<F: Scalar>(tape: &mut Tape<'_, F>, f: &Field2D) -> Result<Var> {
    tape.constant(vec![1, f.height(), f.width()], f.values().iter().map(|&v| F::from_f64_lossy(v as f64)).collect())
}

impl Model {
    /// Closed-form parameter count summed over layers.
    pub fn param_count(&self) -> usize {
        let sum = |ls: &[LayerParams]| ls.iter().map(|l| l.param_count()).sum::<usize>();
        match &self.arch {
            Arch::Ann { encoder, recurrent, decoder, .. } => sum(encoder) + sum(recurrent) + sum(decoder),
            Arch::Snn { encoder, decoder, gates, .. } => {
                sum(encoder) + sum(decoder) + gates.iter().flatten().map(|g| g.param_count()).sum::<usize>()
            }
            Arch::ConvLstm { encoder, cell, decoder, .. } => sum(encoder) + cell.param_count() + sum(decoder),
        }
    }

    /// Per-layer `(name, closed-form count)`.
    pub fn layer_counts(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<(String, usize)>, ls: &[LayerParams]| {
            for l in ls {
                out.push((l.name.clone(), l.param_count()));
            }
        };
        match &self.arch {
            Arch::Ann { encoder, recurrent, decoder, .. } => {
                push(&mut out, encoder);
                push(&mut out, recurrent);
                push(&mut out, decoder);
            }
            Arch::Snn { encoder, decoder, gates, .. } => {
                push(&mut out, encoder);
                push(&mut out, decoder);
                for (i, g) in gates.iter().flatten().enumerate() {
                    out.push((format!("stc{i}"), g.param_count()));
                }
            }
            Arch::ConvLstm { encoder, cell, decoder, .. } => {
                push(&mut out, encoder);
                out.push(("cell".into(), cell.param_count()));
                push(&mut out, decoder);
            }
        }
        out
    }

    /// Flattened feature width fed to the recurrent stack (ANN families).
    pub fn flatten_size(&self) -> Option<usize> {
        match &self.arch {
            Arch::Ann { latent, .. } => Some(latent.iter().product()),
            _ => None,
        }
    }

    /// Every convolution kernel as `(layer name, weight tensor)`.
    pub fn conv_kernels(&self) -> Vec<(String, ParamId)> {
        let mut out: Vec<(String, ParamId)> = Vec::new();
        let push = |out: &mut Vec<(String, ParamId)>, ls: &[LayerParams]| {
            for l in ls.iter().filter(|l| l.kind.is_conv()) {
                out.push((l.name.clone(), l.weight()));
            }
        };
        match &self.arch {
            Arch::Ann { encoder, decoder, .. } => {
                push(&mut out, encoder);
                push(&mut out, decoder);
            }
            Arch::Snn { encoder, decoder, gates, .. } => {
                push(&mut out, encoder);
                push(&mut out, decoder);
                let spatial: Vec<LayerParams> = gates.iter().flatten().map(|g| g.spatial.clone()).collect();
                push(&mut out, &spatial);
            }
            Arch::ConvLstm { encoder, cell, decoder, .. } => {
                push(&mut out, encoder);
                out.push(("cell.wx".into(), cell.wx));
                out.push(("cell.wh".into(), cell.wh));
                push(&mut out, decoder);
            }
        }
        out
    }

    /// Set every STC gate parameter to zero (no-op for other families).
    pub fn zero_stc_gates(&mut self) {
        if let Arch::Snn { gates: Some(g), .. } = &self.arch {
            for gate in g.clone() {
                gate.zero(&mut self.store);
            }
        }
    }

    /// Set every bias tensor (parameters named `*.b`) to zero.
    pub fn zero_biases(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, _, _)| id).collect();
        for id in ids {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn decode<F: Scalar>(&self, tape: &mut Tape<'_, F>, decoder: &[LayerParams], mut cur: Var) -> Result<Var> {
        for (j, l) in decoder.iter().enumerate() {
            cur = l.forward_conv(tape, cur)?;
            cur = if j + 1 == decoder.len() { self.spec.output_activation.apply(tape, cur) } else { tape.relu(cur) };
        }
        Ok(cur)
    }

    fn ann_window<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        inputs: &[Var],
        encoder: &[LayerParams],
        recurrent: &[LayerParams],
        decoder: &[LayerParams],
        latent: [usize; 3],
    ) -> Result<Var> {
        let t = inputs.len();
        let (h, w) = self.spec.grid;
        let mut cur = tape.concat(inputs, vec![1, t, h, w])?;
        for l in encoder {
            cur = l.forward_conv(tape, cur)?;
            cur = tape.relu(cur);
        }
        let [c, _, _] = latent;
        let plane = latent[1] * latent[2];
        let mut hs: Vec<Var> = recurrent.iter().map(|l| tape.zeros(vec![l.n_out])).collect();
        let mut cs = hs.clone();
        for step in 0..t {
            let index: Vec<usize> = (0..c).flat_map(|ch| (0..plane).map(move |q| (ch * t + step) * plane + q)).collect();
            let mut x = tape.gather(cur, index, vec![c * plane])?;
            for (k, l) in recurrent.iter().enumerate() {
                if l.kind == LayerKind::LstmCell {
                    let (hn, cn) = l.lstm_step(tape, x, hs[k], cs[k])?;
                    hs[k] = hn;
                    cs[k] = cn;
                } else {
                    hs[k] = l.rnn_step(tape, x, hs[k])?;
                }
                x = hs[k];
            }
        }
        let z = tape.reshape(*hs.last().unwrap(), latent.to_vec())?;
        self.decode(tape, decoder, z)
    }

    /// Record the forward pass for `inputs` (`in_len` vars of shape
    /// `(1, h, w)`) and return `out_len` predicted frames.
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<'_, F>, inputs: &[Var]) -> Result<Vec<Var>> {
        let (h, w) = self.spec.grid;
        if inputs.len() != self.spec.in_len {
            return Err(NnError::Shape(format!("expected {} input frames, got {}", self.spec.in_len, inputs.len())));
        }
        for &x in inputs {
            if tape.shape(x) != [1, h, w] {
                return Err(NnError::Shape(format!("input frame {:?}, model grid ({h}, {w})", tape.shape(x))));
            }
        }
        let n_out = self.spec.out_len;
        let mut outs = Vec::with_capacity(n_out);
        match &self.arch {
            Arch::Ann { encoder, recurrent, decoder, latent } => {
                let mut window = inputs.to_vec();
                for _ in 0..n_out {
                    let y = self.ann_window(tape, &window, encoder, recurrent, decoder, *latent)?;
                    outs.push(y);
                    window.remove(0);
                    window.push(y);
                }
            }
            Arch::Snn { encoder, decoder, gates, spike_shapes } => {
                let mut state: Vec<(Var, Var)> = spike_shapes.iter().map(|s| (tape.zeros(s.clone()), tape.zeros(s.clone()))).collect();
                let layers: Vec<&LayerParams> = encoder.iter().chain(decoder).collect();
                for step in 0..self.spec.in_len + n_out - 1 {
                    let mut cur = if step < inputs.len() { inputs[step] } else { *outs.last().unwrap() };
                    for (k, l) in layers.iter().enumerate() {
                        let current = l.forward_conv(tape, cur)?;
                        if k + 1 == layers.len() {
                            cur = self.spec.output_activation.apply(tape, current);
                        } else {
                            let (u, o) = state[k];
                            state[k] = match gates {
                                Some(g) => stc_lif_tape(tape, u, o, current, &g[k], &self.spec.lif)?,
                                None => lif_tape(tape, u, o, current, &self.spec.lif)?,
                            };
                            cur = state[k].1;
                        }
                    }
                    if step + 1 >= self.spec.in_len {
                        outs.push(cur);
                    }
                }
            }
            Arch::ConvLstm { encoder, cell, decoder, latent } => {
                let mut hs = tape.zeros(latent.to_vec());
                let mut cs = tape.zeros(latent.to_vec());
                for step in 0..self.spec.in_len + n_out - 1 {
                    let mut cur = if step < inputs.len() { inputs[step] } else { *outs.last().unwrap() };
                    for l in encoder {
                        cur = l.forward_conv(tape, cur)?;
                        cur = tape.relu(cur);
                    }
                    (hs, cs) = cell.step_tape(tape, cur, hs, cs)?;
                    if step + 1 >= self.spec.in_len {
                        let y = self.decode(tape, decoder, hs)?;
                        outs.push(y);
                    }
                }
            }
        }
        Ok(outs)
    }

    /// Predict `out_len` frames from `in_len` frames with fresh state.
    pub fn forward_sequence(&self, frames: &[&Field2D]) -> Result<Vec<Field2D>> {
        let mut tape = Tape::new(&self.store);
        let inputs = frames.iter().map(|f| frame_var(&mut tape, f)).collect::<Result<Vec<_>>>()?;
        let outs = self.forward_tape(&mut tape, &inputs)?;
        let (h, w) = self.spec.grid;
        let px = frames[0].pixel_size_mm();
        outs.iter().map(|&v| Ok(Field2D::new(h, w, px, tape.value(v).to_vec())?)).collect()
    }

    /// Loss and parameter gradients for one training window.
    pub fn item_gradients(&self, inputs: &[Arc<Field2D>], targets: &[Arc<Field2D>], buf: &mut GradBuffer<f32>) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let xs = inputs.iter().map(|f| frame_var(&mut tape, f)).collect::<Result<Vec<_>>>()?;
        let preds = self.forward_tape(&mut tape, &xs)?;
        let loss = self.window_loss(&mut tape, &preds, targets)?;
        let value = tape.value(loss)[0] as f64;
        if value.is_finite() {
            tape.backward(loss)?.accumulate_params(&tape, buf);
        }
        Ok(value)
    }

    fn window_loss<F: Scalar>(&self, tape: &mut Tape<'_, F>, preds: &[Var], targets: &[Arc<Field2D>]) -> Result<Var> {
        let (h, w) = self.spec.grid;
        let n = preds.len();
        let p = tape.concat(preds, vec![n, h, w])?;
        let mut tv = Vec::with_capacity(n * h * w);
        for t in targets {
            tv.extend(t.values().iter().map(|&v| F::from_f64_lossy(v as f64)));
        }
        let t = tape.constant(vec![n, h, w], tv)?;
        tape.mse(p, t)
    }

    /// Mean MSE over `items` without gradients.
    pub fn dataset_loss(&self, data: &WindowedDataset) -> Result<f64> {
        let mut total = 0.0;
        for item in data.items() {
            let mut tape = Tape::new(&self.store);
            let xs = item.inputs.iter().map(|f| frame_var(&mut tape, f)).collect::<Result<Vec<_>>>()?;
            let preds = self.forward_tape(&mut tape, &xs)?;
            let loss = self.window_loss(&mut tape, &preds, &item.targets)?;
            total += tape.value(loss)[0] as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Mean absolute error of raw predictions over `items`.
    pub fn dataset_mae(&self, data: &WindowedDataset) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for item in data.items() {
            let frames: Vec<&Field2D> = item.inputs.iter().map(|f| f.as_ref()).collect();
            for (p, t) in self.forward_sequence(&frames)?.iter().zip(&item.targets) {
                total += p.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
                count += p.len();
            }
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.spec,
            "arch": self.arch,
            "seed": self.seed,
            "param_count": self.param_count(),
            "flatten_size": self.flatten_size(),
            "stc_gate_calibration": STC_GATE_CALIBRATION,
        })
    }
}

impl Predictor for Model {
    fn in_len(&self) -> usize {
        self.spec.in_len
    }

    fn out_len(&self) -> usize {
        self.spec.out_len
    }

    fn predict(&self, frames: &[&Field2D]) -> Result<Vec<Field2D>> {
        self.forward_sequence(frames)
    }
}

pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    save_checkpoint(dir, &model.store, model.manifest())
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let (store, meta) = load_checkpoint(dir)?;
    let spec: ModelSpec = serde_json::from_value(meta["spec"].clone())?;
    let seed = meta["seed"].as_u64().unwrap_or(0);
    let mut model = build_model(&spec, seed)?;
    if model.store.len() != store.len() {
        return Err(NnError::Checkpoint("registry does not match the model spec".into()));
    }
    for ((_, na, ta), (_, nb, tb)) in model.store.iter().zip(store.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(NnError::Checkpoint(format!("registry entry {nb} {:?} does not match {na} {:?}", tb.shape(), ta.shape())));
        }
    }
    model.store = store;
    Ok(model)
}

/// How predictions are fed back during autoregressive rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum Refeed {
    Raw,
    Threshold(f32),
}

impl Refeed {
    /// Spiking families re-feed binarized frames on binary (FCG) data.
    pub fn default_for(family: Family, binary_data: bool) -> Self {
        if family.is_spiking() && binary_data {
            Self::Threshold(0.5)
        } else {
            Self::Raw
        }
    }

    pub fn apply(self, f: &Field2D) -> Result<Field2D> {
        Ok(match self {
            Self::Raw => f.clone(),
            Self::Threshold(t) => f.map(|v| if v >= t { 1.0 } else { 0.0 })?,
        })
    }
}

/// Predict `n_future` frames, feeding the model its own predictions. The
/// returned frames are the raw predictions; `refeed` only affects the inputs.
pub fn rollout_autoregressive<P: Predictor + ?Sized>(model: &P, seed_frames: &[&Field2D], n_future: usize, refeed: Refeed) -> Result<Vec<Field2D>> {
    if n_future == 0 {
        return Err(NnError::Spec("n_future must be positive".into()));
    }
    if seed_frames.len() != model.in_len() {
        return Err(NnError::Shape(format!("rollout needs {} seed frames, got {}", model.in_len(), seed_frames.len())));
    }
    let mut window: Vec<Field2D> = seed_frames.iter().map(|f| (*f).clone()).collect();
    let mut out = Vec::with_capacity(n_future);
    while out.len() < n_future {
        let refs: Vec<&Field2D> = window.iter().collect();
        let preds = model.predict(&refs)?;
        for p in preds {
            if out.len() == n_future {
                break;
            }
            window.remove(0);
            window.push(refeed.apply(&p)?);
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate held-out MAE every this many epochs (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the epoch loss falls below this value.
    pub target_loss: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            target_loss: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || self.threads == 0 {
            return Err(NnError::Spec("batch size, learning rate and threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub adam_steps: u64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_mae\n");
        for e in &self.history {
            let eval = e.eval_mae.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9e},{}\n", e.epoch, e.train_loss, eval));
        }
        s
    }
}

/// Gradients of `items` summed in item order, split into contiguous chunks
/// over `threads` workers and reduced in chunk order.
fn batch_gradients(model: &Model, data: &WindowedDataset, items: &[usize], threads: usize) -> Result<(GradBuffer<f32>, Vec<f64>)> {
    let work = |chunk: &[usize]| -> Result<(GradBuffer<f32>, Vec<f64>)> {
        let mut buf = GradBuffer::zeros_like(&model.store);
        let mut losses = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let item = &data.items()[i];
            losses.push(model.item_gradients(&item.inputs, &item.targets, &mut buf)?);
        }
        Ok((buf, losses))
    };
    if threads <= 1 || items.len() < 2 {
        return work(items);
    }
    let per = items.len().div_ceil(threads);
    let parts: Vec<Result<(GradBuffer<f32>, Vec<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|c| s.spawn(move || work(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let (mut buf, mut losses) = iter.next().unwrap()?;
    for part in iter {
        let (b, l) = part?;
        buf.add(&b);
        losses.extend(l);
    }
    Ok((buf, losses))
}

/// Seeded mini-batch Adam on the mean-squared error.
///
/// A non-finite loss restores the parameters from the end of the last
/// finite epoch, writes them to the checkpoint directory if one is set,
/// and returns [`NnError::Diverged`].
pub fn train(model: &mut Model, data: &WindowedDataset, cfg: &TrainConfig, eval: Option<&WindowedDataset>) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(NnError::Spec("empty training set".into()));
    }
    if data.in_len() != model.spec.in_len || data.out_len() != model.spec.out_len {
        return Err(NnError::Shape(format!(
            "dataset windows {}->{} vs model {}->{}",
            data.in_len(),
            data.out_len(),
            model.spec.in_len,
            model.spec.out_len
        )));
    }
    let threads = if deterministic() { 1 } else { cfg.threads };
    let mut adam = AdamState::new(&model.store);
    adam.lr = cfg.lr;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_good = model.store.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (mut grads, losses) = batch_gradients(model, data, batch, threads)?;
            let bl: f64 = losses.iter().sum();
            if !bl.is_finite() {
                return diverged(model, last_good, cfg, epoch, bl);
            }
            sum += bl;
            grads.scale(1.0 / batch.len() as f32);
            adam.update(&mut model.store, &grads)?;
        }
        let train_loss = sum / data.len() as f64;
        if !train_loss.is_finite() || model.store.flat_values().iter().any(|v| !v.is_finite()) {
            return diverged(model, last_good, cfg, epoch, train_loss);
        }
        last_good = model.store.clone();
        let eval_mae = match eval {
            Some(ev) if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 => Some(model.dataset_mae(ev)?),
            _ => None,
        };
        report.history.push(EpochLog { epoch, train_loss, eval_mae });
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_model(dir, model)?;
            }
        }
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    report.adam_steps = adam.step;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_model(dir, model)?;
        fs::File::create(dir.join("training_log.csv"))?.write_all(report.to_csv().as_bytes())?;
    }
    Ok(report)
}

fn diverged(model: &mut Model, last_good: ParamStore<f32>, cfg: &TrainConfig, epoch: usize, loss: f64) -> Result<TrainReport> {
    model.store = last_good;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_model(dir, model)?;
    }
    Err(NnError::Diverged { epoch, loss })
}
