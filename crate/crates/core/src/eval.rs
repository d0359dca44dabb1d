//! Prediction error, memory-cost accounting, interface thickness, and
//! weight-distribution / connectivity analysis.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::field::{hex, DigitalLibrary, Field2D, FieldError, SampleSequence};
use crate::models::{rollout_autoregressive, Model, Predictor, Refeed};
use crate::nn::tensor::encode_params;
use crate::nn::NnError;

/// Bytes of one element of the stored real type.
pub const F32_BYTES: u64 = 4;
/// Bytes of the 2x3 transformation matrix stored with a vector representation.
pub const TRANSFORM_BYTES: u64 = 6 * 4;
pub const HISTOGRAM_BINS: usize = 101;
pub const DENSITY_THRESHOLD: f64 = 0.001;

/// Mean absolute per-pixel error.
pub fn mae(pred: &Field2D, truth: &Field2D) -> Result<f64, FieldError> {
    if pred.shape() != truth.shape() {
        return Err(FieldError::ShapeMismatch(truth.shape(), pred.shape()));
    }
    let sum: f64 = pred.values().iter().zip(truth.values()).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum();
    Ok(sum / truth.len() as f64)
}

pub fn memory_pixel(dtype_bytes: u64, nx: u64, ny: u64) -> u64 {
    dtype_bytes * nx * ny
}

/// Two coordinates per node plus the transformation matrix, 4-byte reals.
pub fn memory_vector(n_nodes: u64) -> u64 {
    memory_vector_with(F32_BYTES, n_nodes)
}

pub fn memory_vector_with(dtype_bytes: u64, n_nodes: u64) -> u64 {
    2 * dtype_bytes * n_nodes + TRANSFORM_BYTES
}

pub fn memory_model(dtype_bytes: u64, n_params: u64) -> u64 {
    dtype_bytes * n_params
}

/// Human-readable kilobytes (1 kB = 1000 bytes).
pub fn kb(bytes: u64) -> f64 {
    bytes as f64 / 1000.0
}

/// Median, over columns holding any value `>= threshold`, of the longest
/// contiguous supra-threshold run in that column; 0 for an empty field.
pub fn interface_thickness(field: &Field2D, threshold: f32) -> f64 {
    let (h, w) = field.shape();
    let mut runs = Vec::new();
    for c in 0..w {
        let (mut best, mut cur) = (0usize, 0usize);
        for r in 0..h {
            if field.get(r, c) >= threshold {
                cur += 1;
                best = best.max(cur);
            } else {
                cur = 0;
            }
        }
        if best > 0 {
            runs.push(best);
        }
    }
    median(&mut runs)
}

fn median(v: &mut [usize]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Per-step MAE over a test set and its running mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub per_step: Vec<f64>,
    /// Entry `k` is the mean of `per_step[..=k]`.
    pub cumulative: Vec<f64>,
}

impl ErrorCurve {
    pub fn from_steps(per_step: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(per_step.len());
        let mut sum = 0.0;
        for (k, v) in per_step.iter().enumerate() {
            sum += v;
            cumulative.push(sum / (k + 1) as f64);
        }
        Self { per_step, cumulative }
    }

    pub fn final_cumulative(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Roll each sequence forward from its first `in_len` frames for `horizon`
/// steps and average the MAE at each step. Predictions are scored after
/// `score` (thresholding for binary data) and re-fed after `refeed`.
pub fn error_curve<P: Predictor + ?Sized>(
    model: &P,
    test: &[SampleSequence],
    horizon: usize,
    refeed: Refeed,
    score: Refeed,
) -> Result<ErrorCurve, NnError> {
    let in_len = model.in_len();
    if test.is_empty() {
        return Err(NnError::Spec("empty test set".into()));
    }
    let mut per_step = vec![0.0; horizon];
    for seq in test {
        if seq.len() < in_len + horizon {
            return Err(NnError::Spec(format!("horizon {horizon} needs {} frames, sequence has {}", in_len + horizon, seq.len())));
        }
        let seeds: Vec<&Field2D> = (0..in_len).map(|i| seq.frame(i)).collect();
        let preds = rollout_autoregressive(model, &seeds, horizon, refeed)?;
        for (k, p) in preds.iter().enumerate() {
            per_step[k] += mae(&score.apply(p)?, seq.frame(in_len + k))?;
        }
    }
    for v in &mut per_step {
        *v /= test.len() as f64;
    }
    Ok(ErrorCurve::from_steps(per_step))
}

/// One-step MAE of predicting each window's target as its last input.
pub fn persistence_one_step(test: &[SampleSequence], in_len: usize) -> Result<f64, FieldError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for seq in test {
        for t in in_len..seq.len() {
            sum += mae(seq.frame(t - 1), seq.frame(t))?;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Teacher-forced one-step MAE over every window of every sequence.
pub fn one_step_mae<P: Predictor + ?Sized>(model: &P, test: &[SampleSequence], score: Refeed) -> Result<f64, NnError> {
    let in_len = model.in_len();
    let (mut sum, mut n) = (0.0, 0usize);
    for seq in test {
        for t in in_len..seq.len() {
            let inputs: Vec<&Field2D> = (t - in_len..t).map(|i| seq.frame(i)).collect();
            let pred = model.predict(&inputs)?;
            sum += mae(&score.apply(&pred[0])?, seq.frame(t))?;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightStats {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub max_abs: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// `HISTOGRAM_BINS + 1` edges spanning `[-max|w|, max|w|]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub variance: f64,
    pub per_layer: Vec<LayerWeightStats>,
}

fn moments(w: &[f64]) -> (f64, f64) {
    if w.is_empty() {
        return (0.0, 0.0);
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    (mean, w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Fraction of `weights` with `|w| >= threshold` (0 for no weights).
pub fn density_of(weights: &[f64], threshold: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| w.abs() >= threshold).count() as f64 / weights.len() as f64
}

/// Fixed-bin histogram over `[-max|w|, max|w|]`; all-zero input fills the centre bin.
pub fn histogram(weights: &[f64], bins: usize) -> (Vec<f64>, Vec<u64>) {
    let m = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    let mut counts = vec![0u64; bins];
    let edges = (0..=bins).map(|i| -m + 2.0 * m * i as f64 / bins as f64).collect();
    for &w in weights {
        let idx = if m == 0.0 { bins / 2 } else { (((w + m) / (2.0 * m)) * bins as f64).floor() as usize };
        counts[idx.min(bins - 1)] += 1;
    }
    (edges, counts)
}

fn layer_weights(model: &Model) -> Vec<(String, Vec<f64>)> {
    model
        .conv_kernels()
        .into_iter()
        .map(|(name, id)| (name, model.store.get(id).data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Pooled and per-layer statistics of every convolution kernel.
pub fn weight_statistics(model: &Model) -> WeightStats {
    stats_from_layers(&layer_weights(model), DENSITY_THRESHOLD)
}

pub fn stats_from_layers(layers: &[(String, Vec<f64>)], threshold: f64) -> WeightStats {
    let pooled: Vec<f64> = layers.iter().flat_map(|(_, w)| w.iter().copied()).collect();
    let (edges, counts) = histogram(&pooled, HISTOGRAM_BINS);
    let per_layer = layers
        .iter()
        .map(|(name, w)| {
            let (mean, variance) = moments(w);
            LayerWeightStats {
                name: name.clone(),
                count: w.len(),
                mean,
                variance,
                max_abs: w.iter().fold(0.0f64, |a, v| a.max(v.abs())),
                density: density_of(w, threshold),
            }
        })
        .collect();
    WeightStats { edges, counts, variance: moments(&pooled).1, per_layer }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    pub threshold: f64,
    pub pooled: f64,
    pub per_layer: Vec<(String, f64)>,
}

/// Fraction of convolution weights with `|w| >= threshold`.
pub fn connectivity_density(model: &Model, threshold: f64) -> Connectivity {
    let layers = layer_weights(model);
    let pooled: Vec<f64> = layers.iter().flat_map(|(_, w)| w.iter().copied()).collect();
    Connectivity {
        threshold,
        pooled: density_of(&pooled, threshold),
        per_layer: layers.iter().map(|(n, w)| (n.clone(), density_of(w, threshold))).collect(),
    }
}

pub fn checkpoint_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.manifest()).expect("serializable"));
    h.update(encode_params(&model.store));
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub checkpoint_hash: Option<String>,
    pub library_hash: String,
    pub config_hash: Option<String>,
    pub n_test_sequences: usize,
    pub refeed: Refeed,
    pub score: Refeed,
    pub one_step_mae: f64,
    pub persistence_one_step_mae: f64,
    pub per_step_mae: Vec<f64>,
    pub cumulative_mae: Vec<f64>,
    pub param_count: u64,
    pub memory_pixel_bytes: u64,
    pub memory_vector_bytes: Option<u64>,
    pub memory_model_bytes: u64,
    /// Median thickness of the last rolled-out frame, averaged over sequences.
    pub interface_thickness: f64,
    pub weights: Option<WeightStats>,
    pub connectivity: Option<Connectivity>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step,mae,cumulative_mae\n");
        for (k, (m, c)) in self.per_step_mae.iter().zip(&self.cumulative_mae).enumerate() {
            s.push_str(&format!("{},{:.9e},{:.9e}\n", k + 1, m, c));
        }
        s
    }
}

pub fn histogram_csv(w: &WeightStats) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in w.counts.iter().enumerate() {
        s.push_str(&format!("{:.9e},{:.9e},{}\n", w.edges[i], w.edges[i + 1], c));
    }
    s
}

/// Mean crack-path node count from FCG annotations, if present.
fn mean_path_nodes(test: &DigitalLibrary) -> Option<u64> {
    let counts: Vec<usize> = test
        .samples()
        .iter()
        .filter_map(|s| s.annotation()?.get("path")?.get("vertices")?.as_array().map(|a| a.len()))
        .collect();
    (!counts.is_empty()).then(|| (counts.iter().sum::<usize>() as f64 / counts.len() as f64).round() as u64)
}

/// Predicts the true next frames of known sequences by locating the input
/// window inside them.
#[derive(Debug, Clone)]
pub struct GroundTruthStub {
    pub sequences: Vec<SampleSequence>,
    pub in_len: usize,
    pub out_len: usize,
}

impl Predictor for GroundTruthStub {
    fn in_len(&self) -> usize {
        self.in_len
    }

    fn out_len(&self) -> usize {
        self.out_len
    }

    fn predict(&self, frames: &[&Field2D]) -> Result<Vec<Field2D>, NnError> {
        for seq in &self.sequences {
            for start in 0..seq.len().saturating_sub(frames.len() + self.out_len - 1) {
                if frames.iter().enumerate().all(|(i, f)| seq.frame(start + i) == *f) {
                    let from = start + frames.len();
                    return Ok((from..from + self.out_len).map(|t| seq.frame(t).clone()).collect());
                }
            }
        }
        Err(NnError::Spec("input window not found in any known sequence".into()))
    }
}

/// Repeats the last input frame.
#[derive(Debug, Clone, Copy)]
pub struct PersistenceStub {
    pub in_len: usize,
    pub out_len: usize,
}

impl Predictor for PersistenceStub {
    fn in_len(&self) -> usize {
        self.in_len
    }

    fn out_len(&self) -> usize {
        self.out_len
    }

    fn predict(&self, frames: &[&Field2D]) -> Result<Vec<Field2D>, NnError> {
        let last = frames.last().ok_or_else(|| NnError::Shape("no input frames".into()))?;
        Ok(vec![(*last).clone(); self.out_len])
    }
}

/// Evaluation of any predictor on a held-out library. Pass the model to
/// include parameter, memory, and weight analysis.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    name: &str,
    model: Option<&Model>,
    test: &DigitalLibrary,
    horizon: usize,
    refeed: Refeed,
    score: Refeed,
) -> Result<EvalReport, NnError> {
    let seqs = test.samples();
    let curve = error_curve(predictor, seqs, horizon, refeed, score)?;
    let mut thickness = 0.0;
    for seq in seqs {
        let seeds: Vec<&Field2D> = (0..predictor.in_len()).map(|i| seq.frame(i)).collect();
        let preds = rollout_autoregressive(predictor, &seeds, horizon, refeed)?;
        thickness += interface_thickness(&score.apply(preds.last().unwrap())?, 0.5);
    }
    let (_, h, w) = test.frame_dims().ok_or_else(|| NnError::Spec("empty test library".into()))?;
    let n_params = model.map_or(0, |m| m.param_count() as u64);
    Ok(EvalReport {
        predictor: name.to_string(),
        checkpoint_hash: model.map(checkpoint_hash),
        library_hash: test.content_hash(),
        config_hash: None,
        n_test_sequences: seqs.len(),
        refeed,
        score,
        one_step_mae: one_step_mae(predictor, seqs, score)?,
        persistence_one_step_mae: persistence_one_step(seqs, predictor.in_len())?,
        per_step_mae: curve.per_step,
        cumulative_mae: curve.cumulative,
        param_count: n_params,
        memory_pixel_bytes: memory_pixel(F32_BYTES, w as u64, h as u64),
        memory_vector_bytes: mean_path_nodes(test).map(memory_vector),
        memory_model_bytes: memory_model(F32_BYTES, n_params),
        interface_thickness: thickness / seqs.len() as f64,
        weights: model.map(weight_statistics),
        connectivity: model.map(|m| connectivity_density(m, DENSITY_THRESHOLD)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(h: usize, w: usize, v: Vec<f32>) -> Field2D {
        Field2D::new(h, w, 1.0, v).unwrap()
    }

    #[test]
    fn mae_hand_values() {
        assert_eq!(mae(&f(2, 2, vec![0.0, 0.5, 1.0, 1.0]), &f(2, 2, vec![0.0, 0.0, 1.0, 0.0])).unwrap(), 0.375);
        assert_eq!(mae(&f(1, 3, vec![1.0; 3]), &f(1, 3, vec![0.0; 3])).unwrap(), 1.0);
        assert!(mae(&f(1, 3, vec![1.0; 3]), &f(3, 1, vec![0.0; 3])).is_err());
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_vector(40), 344);
        assert_eq!(memory_pixel(4, 132, 96), 50_688);
        assert_eq!(memory_model(4, 0), 0);
        assert_eq!(kb(344), 0.344);
    }

    #[test]
    fn density_and_histogram() {
        assert!((density_of(&[0.01, 0.0005, -0.002], 0.001) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(density_of(&[0.0; 4], 0.001), 0.0);
        assert_eq!(density_of(&[0.0, 1e-9], 0.0), 1.0);
        let (_, c) = histogram(&[0.0; 7], HISTOGRAM_BINS);
        assert_eq!(c.iter().filter(|&&n| n > 0).count(), 1);
        let (_, c) = histogram(&[-1.0, 1.0, -1.0, 1.0], HISTOGRAM_BINS);
        assert_eq!((c[0], c[100]), (2, 2));
        assert_eq!(moments(&[-1.0, 1.0, -1.0, 1.0]).1, 1.0);
    }

    #[test]
    fn thickness_of_simple_fields() {
        assert_eq!(interface_thickness(&f(4, 4, vec![0.0; 16]), 0.5), 0.0);
        let mut v = vec![0.0; 20];
        for c in 0..5 {
            v[2 * 5 + c] = 1.0;
        }
        assert_eq!(interface_thickness(&f(4, 5, v), 0.5), 1.0);
    }
}
