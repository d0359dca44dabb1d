//! Oracles shared by the per-module tests and the acceptance suite.
#![allow(dead_code)]

use microevo::models::{ConvLstmCell, Family};
use microevo::nn::gradcheck::check;
use microevo::nn::{LayerKind, LayerParams, NnError, ParamStore, SpikeMode, Tape, Tensor, Var};
use microevo::spiking::{lif_tape, stc_lif_tape, LifParams, StcGates};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_SEEDS: u64 = 10;

type Loss = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NnError>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerCase {
    Dense,
    Conv2d,
    Conv3d,
    Deconv2d,
    Deconv3d,
    Rnn,
    Lstm,
    ConvLstm,
    Lif,
    Stc,
}

impl LayerCase {
    pub const ALL: [LayerCase; 10] = [
        Self::Dense,
        Self::Conv2d,
        Self::Conv3d,
        Self::Deconv2d,
        Self::Deconv3d,
        Self::Rnn,
        Self::Lstm,
        Self::ConvLstm,
        Self::Lif,
        Self::Stc,
    ];
}

pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

pub fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Random linear functional so no gradient component cancels by symmetry.
fn project(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = (0..tape.value(x).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(x, w)
}

fn conv_layer(
    store: &mut ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    kind: LayerKind,
    n_in: usize,
    n_out: usize,
    stride: [usize; 3],
    output_padding: [usize; 3],
) -> LayerParams {
    LayerParams::conv(store, kind, "l", n_in, n_out, [3; 3], stride, [1; 3], output_padding, rng).unwrap()
}

fn spiking_readout(t: &mut Tape<'_, f64>, us: &[Var], os: &[Var]) -> Result<Var, NnError> {
    let mut acc = t.add(us[0], os[0])?;
    for (&u, &o) in us[1..].iter().zip(&os[1..]) {
        let s = t.add(u, o)?;
        acc = t.add(acc, s)?;
    }
    project(t, acc, 9)
}

/// Three steps of a conv layer feeding a spiking layer; `gates` selects the
/// STC variant.
fn spiking_case(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, with_gates: bool) -> (Vec<Tensor<f64>>, Loss) {
    let p = LifParams { u_th: 0.3, ..LifParams::default() };
    let l = conv_layer(store, rng, LayerKind::Conv2d, 1, 2, [1; 3], [0; 3]);
    let gates = with_gates.then(|| StcGates::new(store, "g", 2, 3, rng).unwrap());
    let xs = (0..3).map(|_| input(&[1, 3, 4], rng)).collect();
    (
        xs,
        Box::new(move |t, v| {
            let mut u = t.zeros(vec![2, 3, 4]);
            let mut o = t.zeros(vec![2, 3, 4]);
            let (mut us, mut os) = (Vec::new(), Vec::new());
            for &x in v {
                let i = l.forward_conv(t, x)?;
                (u, o) = match &gates {
                    Some(g) => stc_lif_tape(t, u, o, i, g, &p)?,
                    None => lif_tape(t, u, o, i, &p)?,
                };
                us.push(u);
                os.push(o);
            }
            spiking_readout(t, &us, &os)
        }),
    )
}

fn setup(case: LayerCase, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> (SpikeMode, Vec<Tensor<f64>>, Loss) {
    use LayerCase::*;
    let plain = |(xs, f): (Vec<Tensor<f64>>, Loss)| (SpikeMode::Step, xs, f);
    match case {
        Dense => {
            let l = LayerParams::dense(store, "d", 5, 4, rng);
            plain((
                vec![input(&[5], rng)],
                Box::new(move |t, v| {
                    let y = l.forward_dense(t, v[0])?;
                    let y = t.tanh(y);
                    project(t, y, 1)
                }),
            ))
        }
        Conv2d | Conv3d | Deconv2d | Deconv3d => {
            let (kind, n_in, n_out, op, shape): (_, _, _, _, &[usize]) = match case {
                Conv2d => (LayerKind::Conv2d, 2, 3, [0; 3], &[2, 5, 6]),
                Conv3d => (LayerKind::Conv3d, 2, 2, [0; 3], &[2, 3, 4, 5]),
                Deconv2d => (LayerKind::Deconv2d, 3, 2, [0, 1, 0], &[3, 3, 4]),
                _ => (LayerKind::Deconv3d, 2, 2, [0, 1, 1], &[2, 2, 3, 3]),
            };
            let l = conv_layer(store, rng, kind, n_in, n_out, [1, 2, 2], op);
            plain((
                vec![input(shape, rng)],
                Box::new(move |t, v| {
                    let y = l.forward_conv(t, v[0])?;
                    project(t, y, 2)
                }),
            ))
        }
        Rnn => {
            let l = LayerParams::rnn_cell(store, "r", 4, 3, rng);
            plain((
                vec![input(&[4], rng), input(&[4], rng), input(&[3], rng)],
                Box::new(move |t, v| {
                    let h = l.rnn_step(t, v[0], v[2])?;
                    let h = l.rnn_step(t, v[1], h)?;
                    project(t, h, 6)
                }),
            ))
        }
        Lstm => {
            let l = LayerParams::lstm_cell(store, "m", 4, 3, rng);
            plain((
                vec![input(&[4], rng), input(&[4], rng), input(&[3], rng), input(&[3], rng)],
                Box::new(move |t, v| {
                    let (h, c) = l.lstm_step(t, v[0], v[2], v[3])?;
                    let (h, c) = l.lstm_step(t, v[1], h, c)?;
                    let s = t.add(h, c)?;
                    project(t, s, 7)
                }),
            ))
        }
        ConvLstm => {
            let cell = ConvLstmCell::new(store, "c", 2, 2, 3, rng);
            plain((
                (0..4).map(|_| input(&[2, 4, 4], rng)).collect(),
                Box::new(move |t, v| {
                    let (h, c) = cell.step_tape(t, v[0], v[2], v[3])?;
                    let (h, c) = cell.step_tape(t, v[1], h, c)?;
                    let s = t.add(h, c)?;
                    project(t, s, 8)
                }),
            ))
        }
        Lif | Stc => {
            let (xs, f) = spiking_case(store, rng, case == Stc);
            (SpikeMode::Ramp, xs, f)
        }
    }
}

/// Worst relative error of tape gradients against central differences over
/// every parameter and input, across the seeded instances.
pub fn worst_rel_err(case: LayerCase) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..GRADCHECK_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (mode, inputs, f) = setup(case, &mut store, &mut rng);
        randomize(&mut store, &mut rng);
        let r = check(&store, &inputs, mode, |t, v| f(t, v)).unwrap();
        assert!(r.n_checked > 0);
        worst = worst.max(r.max_rel_err);
    }
    worst
}

/// Largest deviation between a 1x1 ConvLSTM step and a dense LSTM applied
/// at every pixel with the same weights.
pub fn conv_lstm_reduction_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, hid, h, w) = (3, 2, 3, 4);
    let mut store = ParamStore::<f64>::new();
    let cell = ConvLstmCell::new(&mut store, "c", n_in, hid, 1, &mut rng);
    let dense = LayerParams::lstm_cell(&mut store, "d", n_in, hid, &mut rng);
    randomize(&mut store, &mut rng);
    for (src, dst) in [cell.wx, cell.wh, cell.b].into_iter().zip(dense.params.clone()) {
        let data = store.get(src).data().to_vec();
        store.get_mut(dst).data_mut().copy_from_slice(&data);
    }
    let x = input(&[n_in, h, w], &mut rng);
    let h0 = input(&[hid, h, w], &mut rng);
    let c0 = input(&[hid, h, w], &mut rng);
    let mut tape = Tape::new(&store);
    let (xv, hv, cv) = (
        tape.constant(x.shape().to_vec(), x.data().to_vec()).unwrap(),
        tape.constant(h0.shape().to_vec(), h0.data().to_vec()).unwrap(),
        tape.constant(c0.shape().to_vec(), c0.data().to_vec()).unwrap(),
    );
    let (h1, c1) = cell.step_tape(&mut tape, xv, hv, cv).unwrap();
    let (h1, c1) = (tape.value(h1).to_vec(), tape.value(c1).to_vec());
    let plane = h * w;
    let mut worst = 0.0f64;
    for px in 0..plane {
        let pick = |t: &Tensor<f64>, n: usize| (0..n).map(|c| t.data()[c * plane + px]).collect::<Vec<_>>();
        let mut t = Tape::new(&store);
        let xp = t.constant(vec![n_in], pick(&x, n_in)).unwrap();
        let hp = t.constant(vec![hid], pick(&h0, hid)).unwrap();
        let cp = t.constant(vec![hid], pick(&c0, hid)).unwrap();
        let (hd, cd) = dense.lstm_step(&mut t, xp, hp, cp).unwrap();
        for c in 0..hid {
            worst = worst.max((t.value(hd)[c] - h1[c * plane + px]).abs());
            worst = worst.max((t.value(cd)[c] - c1[c * plane + px]).abs());
        }
    }
    worst
}

/// Same-padded convolutions whose kernels are centred deltas return their input.
pub fn identity_kernels_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [LayerKind::Conv2d, LayerKind::Conv3d].into_iter().all(|kind| {
        let mut store = ParamStore::<f32>::new();
        let l = LayerParams::conv(&mut store, kind, "id", 3, 3, [3; 3], [1; 3], [1; 3], [0; 3], &mut rng).unwrap();
        let w = store.get_mut(l.weight());
        let kv = if kind == LayerKind::Conv3d { 27 } else { 9 };
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let (o, rest) = (i / (3 * kv), i % (3 * kv));
            *v = if rest / kv == o && rest % kv == kv / 2 { 1.0 } else { 0.0 };
        }
        let shape = if kind == LayerKind::Conv3d { vec![3, 2, 4, 5] } else { vec![3, 4, 5] };
        let x = Tensor::<f32>::uniform(shape.clone(), 3.0, &mut rng);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(shape, x.data().to_vec()).unwrap();
        let y = l.forward_conv(&mut tape, xv).unwrap();
        tape.value(y) == x.data()
    })
}

fn conv_count(c_in: usize, c_out: usize, kv: usize) -> usize {
    c_in * c_out * kv + c_out
}

/// Layer-by-layer parameter sum of the default architectures on the 96x132 grid.
pub fn closed_form_count(family: Family) -> usize {
    let enc2 = conv_count(1, 16, 9) + conv_count(16, 4, 9);
    let enc3 = conv_count(1, 16, 27) + conv_count(16, 4, 27);
    let dec = conv_count(4, 16, 9) + conv_count(16, 1, 9);
    // k3 stride-2 padding-1: 96x132 -> 48x66 -> 24x33 with 4 channels
    let flat = 4 * 24 * 33;
    let rnn = |n_in: usize, h: usize| (n_in + h) * h + h;
    let stc = |c: usize| 3 * c + conv_count(c, c, 9);
    match family {
        Family::BaseSnn => enc2 + dec,
        Family::StcLif => enc2 + dec + stc(16) + stc(4) + stc(16),
        Family::BaseRnn => enc3 + rnn(flat, 128) + rnn(128, flat) + dec,
        Family::BaseLstm => enc3 + 4 * rnn(flat, 128) + 4 * rnn(128, flat) + dec,
        Family::ConvLstm => enc2 + 4 * 16 * (4 + 16) * 9 + 4 * 16 + conv_count(16, 16, 9) + conv_count(16, 1, 9),
    }
}
