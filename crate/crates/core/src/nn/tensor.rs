use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::NnError;

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![F::zero(); n], grad: None }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect(), grad: None }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<F> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![F::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(F::zero());
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total stored scalars, counted by walking every tensor.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Every scalar in registry order.
    pub fn flat_values(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

const PARAM_MAGIC: [u8; 4] = *b"MEVP";
const PARAM_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RegistryEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u16,
    meta: serde_json::Value,
    registry: Vec<RegistryEntry>,
    scalar_count: usize,
    blob: String,
}

/// Serialize parameters as header + little-endian f32 payload + CRC32 footer.
pub fn encode_params(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.scalar_count() + 4);
    out.extend_from_slice(&PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.scalar_count() as u32).to_le_bytes());
    for t in &store.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Write `checkpoint.json` (registry + metadata) and `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore<f32>, meta: serde_json::Value) -> Result<(), NnError> {
    fs::create_dir_all(dir)?;
    let file = CheckpointFile {
        format_version: PARAM_VERSION,
        meta,
        registry: store.iter().map(|(_, n, t)| RegistryEntry { name: n.to_string(), shape: t.shape.clone() }).collect(),
        scalar_count: store.scalar_count(),
        blob: "params.bin".into(),
    };
    fs::write(dir.join("params.bin"), encode_params(store))?;
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Load parameters and metadata written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, serde_json::Value), NnError> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    if file.format_version != PARAM_VERSION {
        return Err(NnError::Checkpoint(format!("format version {} unsupported", file.format_version)));
    }
    let bytes = fs::read(dir.join(&file.blob))?;
    if bytes.len() < 20 {
        return Err(NnError::Checkpoint("checksum mismatch".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(footer.try_into().unwrap()) {
        return Err(NnError::Checkpoint("checksum mismatch".into()));
    }
    if body[..4] != PARAM_MAGIC || u16::from_le_bytes([body[4], body[5]]) != PARAM_VERSION {
        return Err(NnError::Checkpoint("bad header".into()));
    }
    let n_scalars = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    if n_scalars != file.scalar_count || body.len() != 16 + 4 * n_scalars {
        return Err(NnError::Checkpoint("payload size mismatch".into()));
    }
    let mut values = body[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut store = ParamStore::new();
    for entry in file.registry {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        store.add(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok((store, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let mut t = Tensor::<f32>::zeros(vec![2, 2]);
        t.grad_mut()[1] = 3.0;
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 1e-9]).unwrap());
        store.add("a.b", Tensor::new(vec![2], vec![0.25, -0.0]).unwrap());
        save_checkpoint(dir.path(), &store, serde_json::json!({"family": "x"})).unwrap();
        let (back, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta["family"], "x");
        let p = dir.path().join("params.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[20] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(NnError::Checkpoint(_))));
    }
}
