//! Leaky integrate-and-fire dynamics with hard reset, the rectangular
//! surrogate gradient, and a spiking cell with learnable temporal and
//! spatial self-connections (the STC-style variant).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{LayerKind, LayerParams, NnError, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Multiplier applied to `sigmoid(gate)` so that a zero gate leaves the
/// decay unchanged. Stored in model manifests.
pub const STC_GATE_CALIBRATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub decay: f64,
    pub u_th: f64,
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { decay: 0.5, u_th: 1.0, surrogate_width: 1.0 }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.decay > 0.0 && self.decay < 1.0 && self.u_th > 0.0 && self.surrogate_width > 0.0;
        if !ok {
            return Err(NnError::Spec(format!("invalid LIF parameters {self:?}")));
        }
        Ok(())
    }
}

/// Membrane potentials and last spikes of one spiking layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState<F> {
    pub u: Tensor<F>,
    pub o: Tensor<F>,
}

impl<F: Scalar> LifState<F> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self { u: Tensor::zeros(shape.clone()), o: Tensor::zeros(shape) }
    }

    pub fn spikes_binary(&self) -> bool {
        self.o.data().iter().all(|&v| v == F::zero() || v == F::one())
    }
}

fn check_step<F: Scalar>(state: &LifState<F>, input: &Tensor<F>) -> Result<(), NnError> {
    if state.u.shape() != state.o.shape() || state.u.shape() != input.shape() {
        return Err(NnError::Shape(format!(
            "lif: u {:?}, o {:?}, input {:?}",
            state.u.shape(),
            state.o.shape(),
            input.shape()
        )));
    }
    if !state.spikes_binary() {
        return Err(NnError::NonBinarySpikes);
    }
    Ok(())
}

/// `u = decay * u_prev ⊙ (1 - o_prev) + input`, `o = step(u - u_th)`.
pub fn lif_step<F: Scalar>(state: &LifState<F>, input: &Tensor<F>, p: &LifParams) -> Result<LifState<F>, NnError> {
    check_step(state, input)?;
    let decay = F::from_f64_lossy(p.decay);
    let th = F::from_f64_lossy(p.u_th);
    let u: Vec<F> = state
        .u
        .data()
        .iter()
        .zip(state.o.data())
        .zip(input.data())
        .map(|((&u, &o), &i)| decay * u * (F::one() - o) + i)
        .collect();
    let o = u.iter().map(|&v| if v - th >= F::zero() { F::one() } else { F::zero() }).collect();
    let shape = input.shape().to_vec();
    Ok(LifState { u: Tensor::new(shape.clone(), u)?, o: Tensor::new(shape, o)? })
}

/// Rectangular surrogate derivative of the spike step evaluated at `u - u_th`.
pub fn surrogate_spike_grad<F: Scalar>(u_minus_th: &Tensor<F>, p: &LifParams) -> Tensor<F> {
    let w = F::from_f64_lossy(p.surrogate_width);
    let data = u_minus_th.data().iter().map(|&x| crate::nn::tape::surrogate(x, w)).collect();
    Tensor::new(u_minus_th.shape().to_vec(), data).expect("same shape")
}

/// One LIF update on a tape; returns `(u, o)`.
pub fn lif_tape<F: Scalar>(tape: &mut Tape<'_, F>, u: Var, o: Var, input: Var, p: &LifParams) -> Result<(Var, Var), NnError> {
    let u_new = tape.lif_membrane(u, o, input, F::from_f64_lossy(p.decay))?;
    let o_new = tape.spike(u_new, F::from_f64_lossy(p.u_th), F::from_f64_lossy(p.surrogate_width));
    Ok((u_new, o_new))
}

/// Gate parameters of one STC-style spiking layer over `channels` feature maps.
///
/// The temporal gate is a per-channel affine map of the previous membrane
/// and spike values, `g = a_u u_prev + a_o o_prev + b`, whose
/// `2 sigmoid(g)` multiplies the decay. The spatial gate is a same-padded
/// `channels -> channels` convolution of the previous spike map added to the
/// input current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StcGates {
    pub channels: usize,
    /// Shape `(3, channels)`: rows `a_u`, `a_o`, `b`.
    pub temporal: ParamId,
    pub spatial: LayerParams,
}

impl StcGates {
    /// Temporal gates start at zero; the spatial kernel uses the standard
    /// uniform initialization.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if kernel % 2 == 0 {
            return Err(NnError::Spec("spatial gate kernel must be odd".into()));
        }
        let temporal = store.add(format!("{name}.temporal"), Tensor::zeros(vec![3, channels]));
        let pad = kernel / 2;
        let spatial = LayerParams::conv(
            store,
            LayerKind::Conv2d,
            &format!("{name}.spatial"),
            channels,
            channels,
            [1, kernel, kernel],
            [1; 3],
            [0, pad, pad],
            [0; 3],
            rng,
        )?;
        Ok(Self { channels, temporal, spatial })
    }

    pub fn param_count(&self) -> usize {
        3 * self.channels + self.spatial.param_count()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.temporal];
        ids.extend(&self.spatial.params);
        ids
    }

    /// Set every gate parameter to zero (reduces the cell to plain LIF).
    pub fn zero<F: Scalar>(&self, store: &mut ParamStore<F>) {
        for id in self.param_ids() {
            store.get_mut(id).data_mut().fill(F::zero());
        }
    }
}

/// One STC-style update on a tape over `(channels, h, w)` maps.
pub fn stc_lif_tape<F: Scalar>(
    tape: &mut Tape<'_, F>,
    u: Var,
    o: Var,
    input: Var,
    gates: &StcGates,
    p: &LifParams,
) -> Result<(Var, Var), NnError> {
    let shape = tape.shape(u).to_vec();
    if shape.len() != 3 || shape[0] != gates.channels {
        return Err(NnError::Shape(format!("stc: state {shape:?} for {} channels", gates.channels)));
    }
    let c = gates.channels;
    let plane = shape[1] * shape[2];
    let tp = tape.param(gates.temporal);
    let per_pixel = |row: usize| -> Vec<usize> { (0..c * plane).map(|i| row * c + i / plane).collect() };
    let a_u = tape.gather(tp, per_pixel(0), shape.clone())?;
    let a_o = tape.gather(tp, per_pixel(1), shape.clone())?;
    let b = tape.gather(tp, per_pixel(2), shape.clone())?;
    let gu = tape.mul(a_u, u)?;
    let go = tape.mul(a_o, o)?;
    let pre = tape.add(gu, go)?;
    let pre = tape.add(pre, b)?;
    let sig = tape.sigmoid(pre);
    let gate = tape.scale(sig, F::from_f64_lossy(STC_GATE_CALIBRATION));
    let lateral = gates.spatial.forward_conv(tape, o)?;
    let current = tape.add(input, lateral)?;
    let u_new = tape.lif_membrane_gated(u, o, current, Some(gate), F::from_f64_lossy(p.decay))?;
    let o_new = tape.spike(u_new, F::from_f64_lossy(p.u_th), F::from_f64_lossy(p.surrogate_width));
    Ok((u_new, o_new))
}

/// Eager STC-style update of a `(channels, h, w)` state.
pub fn stc_lif_step<F: Scalar>(
    state: &LifState<F>,
    input: &Tensor<F>,
    store: &ParamStore<F>,
    gates: &StcGates,
    p: &LifParams,
) -> Result<LifState<F>, NnError> {
    check_step(state, input)?;
    let mut tape = Tape::new(store);
    let u = tape.constant(state.u.shape().to_vec(), state.u.data().to_vec())?;
    let o = tape.constant(state.o.shape().to_vec(), state.o.data().to_vec())?;
    let i = tape.constant(input.shape().to_vec(), input.data().to_vec())?;
    let (u1, o1) = stc_lif_tape(&mut tape, u, o, i, gates, p)?;
    let shape = input.shape().to_vec();
    Ok(LifState { u: Tensor::new(shape.clone(), tape.value(u1).to_vec())?, o: Tensor::new(shape, tape.value(o1).to_vec())? })
}
