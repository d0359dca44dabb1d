//! Central finite-difference checks of tape gradients in 64-bit mode.

use super::tape::{GradBuffer, SpikeMode, Tape, Var};
use super::tensor::{ParamStore, Tensor};
use super::NnError;

/// Gradient components smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub n_checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare the tape gradient of the scalar built by `f` against central
/// differences, over every parameter in `store` and every input tensor.
pub fn check<Fun>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], mode: SpikeMode, f: Fun) -> Result<GradCheck, NnError>
where
    Fun: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NnError>,
{
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut tape = Tape::new(s).with_spike_mode(mode);
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.shape().to_vec(), x.data().to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new(store).with_spike_mode(mode);
    let vars = inputs
        .iter()
        .map(|x| tape.constant(x.shape().to_vec(), x.data().to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut pgrads = GradBuffer::zeros_like(store);
    grads.accumulate_params(&tape, &mut pgrads);

    let mut worst = 0.0f64;
    let mut n = 0;
    let mut probe = store.clone();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(pgrads.get(id)[j], (up - down) / (2.0 * STEP)));
            n += 1;
        }
    }
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            xs[k].data_mut()[j] = orig + STEP;
            let up = eval(store, &xs)?;
            xs[k].data_mut()[j] = orig - STEP;
            let down = eval(store, &xs)?;
            xs[k].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * STEP)));
            n += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, n_checked: n })
}
