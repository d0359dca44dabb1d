//! Grid, sequence and library data model.
//!
//! A [`Field2D`] is a row-major grid of `f32` values with a physical pixel
//! size. Sequences of fields form samples, and a [`DigitalLibrary`] is a
//! manifest-described collection of equally shaped samples. Libraries are
//! persisted as one directory holding `manifest.json` plus one raw blob per
//! sample (see [`save_library`]).

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Magic bytes at the start of every sample blob.
pub const BLOB_MAGIC: [u8; 4] = *b"MEVF";
/// Version of the sample blob and manifest layout.
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const FOOTER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field values length {got} does not match {height}x{width}")]
    LengthMismatch { height: usize, width: usize, got: usize },
    #[error("field contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("pixel size must be positive and finite, got {0}")]
    BadPixelSize(f64),
    #[error("field shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("library samples disagree on {0}")]
    InconsistentLibrary(&'static str),
    #[error("sequence of {len} frames is too short for windows of {need} (in {in_len} + out {out_len})")]
    SequenceTooShort { len: usize, need: usize, in_len: usize, out_len: usize },
    #[error("window lengths and step must be positive (in {in_len}, out {out_len}, step {step})")]
    BadWindow { in_len: usize, out_len: usize, step: usize },
    #[error("invalid split: n_train {n_train} with {n_samples} samples")]
    InvalidSplit { n_train: usize, n_samples: usize },
    #[error("I/O failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("bad blob header in {0}")]
    BadHeader(String),
}

pub type Result<T> = std::result::Result<T, FieldError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FieldError + '_ {
    move |source| FieldError::Io { path: path.display().to_string(), source }
}

/// Rectangular grid of 32-bit reals with a physical pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    pixel_size_mm: f64,
    values: Vec<f32>,
}

impl Field2D {
    pub fn new(height: usize, width: usize, pixel_size_mm: f64, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(FieldError::LengthMismatch { height, width, got: values.len() });
        }
        if !(pixel_size_mm.is_finite() && pixel_size_mm > 0.0) {
            return Err(FieldError::BadPixelSize(pixel_size_mm));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self { height, width, pixel_size_mm, values })
    }

    pub fn filled(height: usize, width: usize, pixel_size_mm: f64, value: f32) -> Result<Self> {
        Self::new(height, width, pixel_size_mm, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize, pixel_size_mm: f64) -> Result<Self> {
        Self::filled(height, width, pixel_size_mm, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        pixel_size_mm: f64,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, pixel_size_mm, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn same_geometry(&self, other: &Field2D) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.pixel_size_mm == other.pixel_size_mm
    }

    /// Copy with every value mapped through `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.height, self.width, self.pixel_size_mm, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Population variance of the values.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Binary PGM (P5), min-max scaled to 8 bits. A constant field maps to 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

/// Ordered frames of one simulated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    frames: Vec<Arc<Field2D>>,
    dt_label: String,
    annotation: Option<serde_json::Value>,
}

impl SampleSequence {
    pub fn new(frames: Vec<Field2D>, dt_label: impl Into<String>) -> Result<Self> {
        Self::from_shared(frames.into_iter().map(Arc::new).collect(), dt_label)
    }

    pub fn from_shared(frames: Vec<Arc<Field2D>>, dt_label: impl Into<String>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(FieldError::TooFewFrames(frames.len()));
        }
        let first = &frames[0];
        if let Some(bad) = frames.iter().find(|f| !f.same_geometry(first)) {
            return Err(FieldError::ShapeMismatch(first.shape(), bad.shape()));
        }
        Ok(Self { frames, dt_label: dt_label.into(), annotation: None })
    }

    /// Attach per-sample metadata stored beside the raster frames (e.g. a vector crack path).
    pub fn with_annotation(mut self, annotation: serde_json::Value) -> Self {
        self.annotation = Some(annotation);
        self
    }

    pub fn frames(&self) -> &[Arc<Field2D>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Field2D {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt_label(&self) -> &str {
        &self.dt_label
    }

    pub fn annotation(&self) -> Option<&serde_json::Value> {
        self.annotation.as_ref()
    }

    /// Copy truncated to the first `len` frames.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        let mut out = Self::from_shared(self.frames[..len.min(self.frames.len())].to_vec(), self.dt_label.clone())?;
        out.annotation = self.annotation.clone();
        Ok(out)
    }
}

/// Record of how a library was carved out of its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub role: String,
    pub n_train: usize,
    pub seed: u64,
    pub shuffled: bool,
    /// Indices into the parent library, in the order stored here.
    pub parent_indices: Vec<usize>,
}

/// Provenance metadata carried with every library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
    /// Seconds since the Unix epoch; 0 for deterministic runs.
    pub created_unix: u64,
    #[serde(default)]
    pub split: Option<SplitRecord>,
    /// Free-form generation log (discarded or flagged samples, ...).
    #[serde(default)]
    pub events: Vec<String>,
}

impl Manifest {
    pub fn new(generator: impl Into<String>, seed: u64, params: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator: generator.into(),
            seed,
            params,
            created_unix: 0,
            split: None,
            events: Vec::new(),
        }
    }

    /// Stamp the current wall-clock time.
    pub fn stamped_now(mut self) -> Self {
        self.created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self
    }
}

/// Manifest-described collection of equally shaped sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalLibrary {
    samples: Vec<SampleSequence>,
    manifest: Manifest,
}

impl DigitalLibrary {
    pub fn new(samples: Vec<SampleSequence>, manifest: Manifest) -> Result<Self> {
        if let Some(first) = samples.first() {
            for s in &samples[1..] {
                if s.len() != first.len() {
                    return Err(FieldError::InconsistentLibrary("sequence length"));
                }
                if !s.frame(0).same_geometry(first.frame(0)) {
                    return Err(FieldError::InconsistentLibrary("frame geometry"));
                }
            }
        }
        Ok(Self { samples, manifest })
    }

    pub fn samples(&self) -> &[SampleSequence] {
        &self.samples
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(frames per sample, height, width)`, if the library is nonempty.
    pub fn frame_dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| (s.len(), s.frame(0).height(), s.frame(0).width()))
    }

    /// New library holding the samples at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.manifest.clone())
    }

    /// SHA-256 over the serialized manifest and every sample blob, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(manifest_json(self).as_bytes());
        for s in &self.samples {
            h.update(encode_blob(s));
            if let Some(a) = s.annotation() {
                h.update(a.to_string().as_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// One (inputs, targets) training pair cut from a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowItem {
    pub inputs: Vec<Arc<Field2D>>,
    pub targets: Vec<Arc<Field2D>>,
}

/// Number of windows a sequence of `len` frames yields.
pub fn window_count(len: usize, in_len: usize, out_len: usize, step: usize) -> usize {
    let need = in_len + out_len;
    if step == 0 || len < need {
        0
    } else {
        (len - need) / step + 1
    }
}

/// Cut fixed-length windows: item `j` covers frames `[j*step, j*step + in_len + out_len)`.
pub fn slide_windows(seq: &SampleSequence, in_len: usize, out_len: usize, step: usize) -> Result<Vec<WindowItem>> {
    if in_len == 0 || out_len == 0 || step == 0 {
        return Err(FieldError::BadWindow { in_len, out_len, step });
    }
    let need = in_len + out_len;
    if seq.len() < need {
        return Err(FieldError::SequenceTooShort { len: seq.len(), need, in_len, out_len });
    }
    let frames = seq.frames();
    Ok((0..window_count(seq.len(), in_len, out_len, step))
        .map(|j| {
            let s = j * step;
            WindowItem {
                inputs: frames[s..s + in_len].to_vec(),
                targets: frames[s + in_len..s + need].to_vec(),
            }
        })
        .collect())
}

/// Windowed view of a whole library.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    items: Vec<WindowItem>,
    in_len: usize,
    out_len: usize,
}

impl WindowedDataset {
    pub fn new(items: Vec<WindowItem>, in_len: usize, out_len: usize) -> Result<Self> {
        if in_len == 0 || out_len == 0 {
            return Err(FieldError::BadWindow { in_len, out_len, step: 1 });
        }
        if items.iter().any(|it| it.inputs.len() != in_len || it.targets.len() != out_len) {
            return Err(FieldError::InconsistentLibrary("window lengths"));
        }
        Ok(Self { items, in_len, out_len })
    }

    pub fn from_library(lib: &DigitalLibrary, in_len: usize, out_len: usize, step: usize) -> Result<Self> {
        let mut items = Vec::new();
        for s in lib.samples() {
            items.extend(slide_windows(s, in_len, out_len, step)?);
        }
        Self::new(items, in_len, out_len)
    }

    pub fn items(&self) -> &[WindowItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            in_len: self.in_len,
            out_len: self.out_len,
        }
    }
}

/// Partition a library into train/test sets.
///
/// Without `shuffle` the first `n_train` samples (generation order) train and
/// the rest test; with it, a seeded permutation is split instead.
pub fn split_library(lib: &DigitalLibrary, n_train: usize, seed: u64, shuffle: bool) -> Result<(DigitalLibrary, DigitalLibrary)> {
    let n = lib.len();
    if n_train == 0 || n_train >= n {
        return Err(FieldError::InvalidSplit { n_train, n_samples: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let (tr, te) = order.split_at(n_train);
    let part = |role: &str, idx: &[usize]| -> Result<DigitalLibrary> {
        let mut out = lib.subset(idx)?;
        out.manifest.split = Some(SplitRecord {
            role: role.to_string(),
            n_train,
            seed,
            shuffled: shuffle,
            parent_indices: idx.to_vec(),
        });
        Ok(out)
    };
    Ok((part("train", tr)?, part("test", te)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: Manifest,
    frame_height: usize,
    frame_width: usize,
    frames_per_sample: usize,
    pixel_size_mm: f64,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    dt_label: String,
    #[serde(default)]
    annotation_file: Option<String>,
}

fn sample_stem(i: usize) -> String {
    format!("sample_{i:05}")
}

fn manifest_json(lib: &DigitalLibrary) -> String {
    let (t, h, w) = lib.frame_dims().unwrap_or((0, 0, 0));
    let pixel = lib.samples.first().map(|s| s.frame(0).pixel_size_mm()).unwrap_or(1.0);
    let file = ManifestFile {
        manifest: lib.manifest.clone(),
        frame_height: h,
        frame_width: w,
        frames_per_sample: t,
        pixel_size_mm: pixel,
        samples: lib
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                file: format!("{}.bin", sample_stem(i)),
                dt_label: s.dt_label.clone(),
                annotation_file: s.annotation.as_ref().map(|_| format!("{}.json", sample_stem(i))),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("manifest serializes")
}

/// Encode a sequence as header + little-endian f32 payload + CRC32 footer.
pub fn encode_blob(seq: &SampleSequence) -> Vec<u8> {
    let f0 = seq.frame(0);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.len() * f0.len() + FOOTER_LEN);
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u16).to_le_bytes());
    out.extend_from_slice(&(f0.height() as u32).to_le_bytes());
    out.extend_from_slice(&(f0.width() as u32).to_le_bytes());
    for f in seq.frames() {
        for v in f.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decode a blob into `(frames, height, width)` of raw values.
pub fn decode_blob(bytes: &[u8], name: &str) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    if bytes.len() < HEADER_LEN + FOOTER_LEN {
        return Err(FieldError::Checksum(name.to_string()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
    let stored = u32::from_le_bytes(footer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(FieldError::Checksum(name.to_string()));
    }
    if body[..4] != BLOB_MAGIC {
        return Err(FieldError::BadHeader(name.to_string()));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != FORMAT_VERSION {
        return Err(FieldError::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let t = u16::from_le_bytes([body[6], body[7]]) as usize;
    let h = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let payload = &body[HEADER_LEN..];
    if payload.len() != 4 * t * h * w {
        return Err(FieldError::BadHeader(name.to_string()));
    }
    let frames = payload
        .chunks_exact(4 * h * w)
        .map(|chunk| chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    Ok((frames, h, w))
}

/// Write `lib` as a directory: `manifest.json`, `sample_NNNNN.bin` blobs and
/// optional `sample_NNNNN.json` annotations.
pub fn save_library(lib: &DigitalLibrary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in lib.samples.iter().enumerate() {
        let p = dir.join(format!("{}.bin", sample_stem(i)));
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        f.write_all(&encode_blob(s)).map_err(io_err(&p))?;
        if let Some(a) = &s.annotation {
            let p = dir.join(format!("{}.json", sample_stem(i)));
            fs::write(&p, serde_json::to_string(a)?).map_err(io_err(&p))?;
        }
    }
    let p = dir.join("manifest.json");
    fs::write(&p, manifest_json(lib)).map_err(io_err(&p))?;
    Ok(())
}

pub fn load_library(dir: &Path) -> Result<DigitalLibrary> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let file: ManifestFile = serde_json::from_str(&text)?;
    if file.manifest.format_version != FORMAT_VERSION {
        return Err(FieldError::VersionMismatch { expected: FORMAT_VERSION, found: file.manifest.format_version });
    }
    let mut samples = Vec::with_capacity(file.samples.len());
    for entry in &file.samples {
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let (frames, h, w) = decode_blob(&bytes, &entry.file)?;
        if (frames.len(), h, w) != (file.frames_per_sample, file.frame_height, file.frame_width) {
            return Err(FieldError::InconsistentLibrary("blob dimensions vs manifest"));
        }
        let frames = frames
            .into_iter()
            .map(|v| Field2D::new(h, w, file.pixel_size_mm, v))
            .collect::<Result<Vec<_>>>()?;
        let mut seq = SampleSequence::new(frames, entry.dt_label.clone())?;
        if let Some(a) = &entry.annotation_file {
            let p = dir.join(a);
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            seq.annotation = Some(serde_json::from_str(&text)?);
        }
        samples.push(seq);
    }
    DigitalLibrary::new(samples, file.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(len: usize) -> SampleSequence {
        let frames = (0..len).map(|t| Field2D::filled(2, 3, 1.0, t as f32).unwrap()).collect();
        SampleSequence::new(frames, "step").unwrap()
    }

    fn lib_of(n: usize, len: usize) -> DigitalLibrary {
        let samples = (0..n)
            .map(|i| {
                let frames = (0..len)
                    .map(|t| Field2D::filled(2, 2, 0.5, (i * 100 + t) as f32).unwrap())
                    .collect();
                SampleSequence::new(frames, "step").unwrap()
            })
            .collect();
        DigitalLibrary::new(samples, Manifest::new("test", 7, serde_json::json!({"k": 1}))).unwrap()
    }

    #[test]
    fn field_rejects_bad_input() {
        assert!(matches!(Field2D::new(2, 2, 1.0, vec![0.0; 3]), Err(FieldError::LengthMismatch { .. })));
        assert!(matches!(Field2D::new(1, 2, 1.0, vec![0.0, f32::NAN]), Err(FieldError::NonFinite(1))));
        assert!(matches!(Field2D::new(1, 1, 0.0, vec![0.0]), Err(FieldError::BadPixelSize(_))));
    }

    #[test]
    fn sequence_needs_two_matching_frames() {
        let f = Field2D::zeros(2, 2, 1.0).unwrap();
        assert!(matches!(SampleSequence::new(vec![f.clone()], "x"), Err(FieldError::TooFewFrames(1))));
        let g = Field2D::zeros(2, 3, 1.0).unwrap();
        assert!(SampleSequence::new(vec![f, g], "x").is_err());
    }

    #[test]
    fn window_counts_from_examples() {
        assert_eq!(slide_windows(&seq_of(8), 3, 1, 1).unwrap().len(), 5);
        let one = slide_windows(&seq_of(4), 3, 1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].inputs.len() + one[0].targets.len(), 4);
        let w = slide_windows(&seq_of(10), 2, 2, 3).unwrap();
        let starts: Vec<f32> = w.iter().map(|it| it.inputs[0].get(0, 0)).collect();
        assert_eq!(starts, vec![0.0, 3.0, 6.0]);
    }

    #[test]
    fn window_errors() {
        assert!(matches!(slide_windows(&seq_of(3), 3, 1, 1), Err(FieldError::SequenceTooShort { .. })));
        assert!(matches!(slide_windows(&seq_of(8), 0, 1, 1), Err(FieldError::BadWindow { .. })));
        assert!(matches!(slide_windows(&seq_of(8), 1, 1, 0), Err(FieldError::BadWindow { .. })));
    }

    #[test]
    fn split_sizes_and_errors() {
        for (n, k) in [(908, 800), (15, 10), (2, 1)] {
            let lib = lib_of(n, 2);
            let (tr, te) = split_library(&lib, k, 0, false).unwrap();
            assert_eq!((tr.len(), te.len()), (k, n - k));
            assert_eq!(tr.manifest().split.as_ref().unwrap().role, "train");
            assert_eq!(te.manifest().split.as_ref().unwrap().parent_indices[0], k);
        }
        let lib = lib_of(3, 2);
        assert!(split_library(&lib, 0, 0, false).is_err());
        assert!(split_library(&lib, 3, 0, false).is_err());
    }

    #[test]
    fn shuffled_split_is_seeded() {
        let lib = lib_of(20, 2);
        let a = split_library(&lib, 12, 3, true).unwrap();
        let b = split_library(&lib, 12, 3, true).unwrap();
        assert_eq!(a, b);
        let idx = &a.0.manifest().split.as_ref().unwrap().parent_indices;
        assert_ne!(idx, &(0..12).collect::<Vec<_>>());
    }

    #[test]
    fn round_trip_small_library() {
        let dir = tempfile::tempdir().unwrap();
        let f = |v: [f32; 4]| Field2D::new(2, 2, 0.075, v.to_vec()).unwrap();
        let seq = SampleSequence::new(vec![f([0.1, -2.5, 3.0, 1e-7]), f([f32::MIN_POSITIVE, 0.0, -0.0, 7.0])], "segment")
            .unwrap()
            .with_annotation(serde_json::json!({"vertices": [[1.0, 10.0], [1.05, 9.98]]}));
        let lib = DigitalLibrary::new(vec![seq], Manifest::new("unit", 42, serde_json::json!({"a": 0.1}))).unwrap();
        save_library(&lib, dir.path()).unwrap();
        let back = load_library(dir.path()).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.content_hash(), lib.content_hash());
        let bits = |l: &DigitalLibrary| -> Vec<u32> {
            l.samples()[0].frames().iter().flat_map(|f| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&back), bits(&lib));
    }

    #[test]
    fn truncated_blob_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let lib = lib_of(1, 2);
        save_library(&lib, dir.path()).unwrap();
        let p = dir.path().join("sample_00000.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(load_library(dir.path()), Err(FieldError::Checksum(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let seq = seq_of(2);
        let mut blob = encode_blob(&seq);
        blob[4] = 9;
        let n = blob.len() - 4;
        let crc = crc32fast::hash(&blob[..n]);
        blob[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_blob(&blob, "x"), Err(FieldError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn pgm_export_scales_to_bytes() {
        let f = Field2D::new(1, 3, 1.0, vec![0.0, 0.5, 1.0]).unwrap();
        let pgm = f.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }
}
