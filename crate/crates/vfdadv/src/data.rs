//! Dataset ingestion, synthesis, and splitting.
//!
//! Three sources produce the same [`Dataset`] shape: binary readers for the
//! IDX image/label pair and the record-per-row label+pixels layout used by
//! small-image benchmarks, a native container for round-tripping generated
//! or attacked batches, and seeded synthetic generators for desk-scale
//! experiments. Every path lands inputs in `[0,1]`, which is the clamp range
//! the attacks assume; the only normalization applied is `/255`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

/// Which side of a split a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SplitTag::Full),
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Labeled examples with inputs in `[0,1]`.
pub struct Dataset<S: Scalar> {
    inputs: Tensor<S>,
    labels: Vec<usize>,
    num_classes: usize,
    tag: SplitTag,
}

impl<S: Scalar> std::fmt::Debug for Dataset<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("shape", &self.inputs.shape())
            .field("num_classes", &self.num_classes)
            .field("tag", &self.tag)
            .finish()
    }
}

impl<S: Scalar> Dataset<S> {
    /// Validates ranges and shapes; the leading input dimension is N.
    pub fn new(
        inputs: Tensor<S>,
        labels: Vec<usize>,
        num_classes: usize,
        tag: SplitTag,
    ) -> Result<Self> {
        let n = inputs.shape()[0];
        if n == 0 {
            return Err(Error::Contract("dataset must be non-empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} inputs",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Contract(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if inputs
            .data()
            .iter()
            .any(|v| !(S::zero()..=S::one()).contains(v))
        {
            return Err(Error::Contract(
                "inputs must lie within [0,1]".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor<S> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    /// Per-example shape (everything after the batch dimension).
    pub fn example_shape(&self) -> Vec<usize> {
        self.inputs.shape()[1..].to_vec()
    }

    pub fn example_numel(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Gathers the indexed examples into a fresh constant batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let per = self.example_numel();
        let data = self.inputs.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            out.extend_from_slice(&data[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.example_shape());
        Ok((Tensor::new(out, shape)?, labels))
    }

    fn with_tag(&self, indices: &[usize], tag: SplitTag) -> Result<Dataset<S>> {
        let (inputs, labels) = self.batch(indices)?;
        Dataset::new(inputs, labels, self.num_classes, tag)
    }
}

/// Seeded stratified split in the given `train:test` ratio; per-class sizes
/// land within one example of the exact proportion.
pub fn split<S: Scalar>(
    dataset: &Dataset<S>,
    ratio: (u32, u32),
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::Config(format!(
            "split ratio {a}:{b} must keep both sides non-empty"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        per_class[y].push(i);
    }
    let mut rng = derive_rng(seed, "split");
    let test_frac = b as f64 / (a + b) as f64;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} examples; need at least 2 to split",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let want = (indices.len() as f64 * test_frac).round() as usize;
        let test_n = want.clamp(1, indices.len() - 1);
        test_idx.extend_from_slice(&indices[..test_n]);
        train_idx.extend_from_slice(&indices[test_n..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        dataset.with_tag(&train_idx, SplitTag::Train)?,
        dataset.with_tag(&test_idx, SplitTag::Test)?,
    ))
}

/// Synthetic data family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Isotropic Gaussian clusters in the unit square; inputs `(N, 2)`.
    GaussianBlobs,
    /// Concentric noisy rings around the square's center; inputs `(N, 2)`.
    RingClasses,
    /// Gaussian intensity bumps rasterized onto an 8x8 image grid with
    /// jittered bump centers; inputs `(N, 1, 8, 8)`.
    RasterizedBlobs,
}

impl SynthKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthKind::GaussianBlobs => "gaussian-blobs",
            SynthKind::RingClasses => "ring-classes",
            SynthKind::RasterizedBlobs => "rasterized-blobs",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(SynthKind::GaussianBlobs),
            "ring-classes" => Ok(SynthKind::RingClasses),
            "rasterized-blobs" => Ok(SynthKind::RasterizedBlobs),
            other => Err(Error::Config(format!("unknown generator {other:?}"))),
        }
    }
}

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub num_classes: usize,
    pub per_class: usize,
    /// Noise scale: cluster std (vector kinds) or bump-center jitter in
    /// pixels (rasterized).
    pub sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be a non-negative finite real, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Image side length of the rasterized generator.
pub const RASTER_SIDE: usize = 8;
/// Bump width (std of the intensity profile) in pixels.
const RASTER_BUMP_WIDTH: f64 = 1.1;
/// Horizontal gap between the two front classes, in pixels.
const RASTER_PAIR_GAP: f64 = 1.0;
/// Bump amplitude of class 1; every other class renders at 1.0. The gap to
/// full amplitude separates the front pair cleanly, but an ℓ∞ budget of a
/// comparable size can bridge most of it, so the cue is brittle.
const RASTER_LOW_CONTRAST: f64 = 0.6;
/// Arc radius and center for classes beyond the front pair.
const RASTER_ARC_RADIUS: f64 = 2.9;
const RASTER_ARC_CENTER: (f64, f64) = (3.5, 3.3);

/// Class-center layout of the rasterized generator. Classes 0 and 1 sit
/// close together in the lower half, differing mainly in contrast
/// (class 1 renders dimmer), so intensity separates them easily while
/// position separates them only weakly. Remaining classes spread over an
/// arc in the upper half, well away from the pair.
pub fn raster_center(class: usize, num_classes: usize) -> (f64, f64) {
    match class {
        0 => (3.5 - RASTER_PAIR_GAP / 2.0, 3.0),
        1 => (3.5 + RASTER_PAIR_GAP / 2.0, 3.0),
        _ => {
            let extras = num_classes - 2;
            let angle = if extras == 1 {
                std::f64::consts::FRAC_PI_2
            } else {
                let span = 2.0 * std::f64::consts::FRAC_PI_3;
                let start = std::f64::consts::FRAC_PI_2 + span / 2.0;
                start - span * (class - 2) as f64 / (extras - 1) as f64
            };
            (
                RASTER_ARC_CENTER.0 + RASTER_ARC_RADIUS * angle.cos(),
                RASTER_ARC_CENTER.1 + RASTER_ARC_RADIUS * angle.sin(),
            )
        }
    }
}

/// Bump amplitude for a class: class 1 is the low-contrast one.
pub fn raster_amplitude(class: usize) -> f64 {
    if class == 1 {
        RASTER_LOW_CONTRAST
    } else {
        1.0
    }
}

fn vector_center(class: usize, num_classes: usize) -> (f64, f64) {
    let angle = std::f64::consts::TAU * class as f64 / num_classes as f64
        + std::f64::consts::FRAC_PI_2;
    (0.5 + 0.25 * angle.cos(), 0.5 + 0.25 * angle.sin())
}

/// Deterministically generates the dataset described by `spec`.
pub fn synthesize<S: Scalar>(spec: &SynthSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let n = spec.num_classes * spec.per_class;
    let mut rng = derive_rng(spec.seed, &format!("synth/{}", spec.kind.as_str()));
    let mut labels = Vec::with_capacity(n);
    let shape: Vec<usize>;
    let mut data: Vec<S>;
    match spec.kind {
        SynthKind::GaussianBlobs => {
            shape = vec![n, 2];
            data = Vec::with_capacity(n * 2);
            for class in 0..spec.num_classes {
                let (cx, cy) = vector_center(class, spec.num_classes);
                for _ in 0..spec.per_class {
                    let dx: f64 = StandardNormal.sample(&mut rng);
                    let dy: f64 = StandardNormal.sample(&mut rng);
                    data.push(S::from_f64((cx + spec.sigma * dx).clamp(0.0, 1.0)));
                    data.push(S::from_f64((cy + spec.sigma * dy).clamp(0.0, 1.0)));
                    labels.push(class);
                }
            }
        }
        SynthKind::RingClasses => {
            shape = vec![n, 2];
            data = Vec::with_capacity(n * 2);
            for class in 0..spec.num_classes {
                let radius = 0.12 + 0.3 * class as f64 / (spec.num_classes - 1).max(1) as f64;
                for _ in 0..spec.per_class {
                    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let wobble: f64 = StandardNormal.sample(&mut rng);
                    let r = radius + spec.sigma * wobble;
                    data.push(S::from_f64((0.5 + r * theta.cos()).clamp(0.0, 1.0)));
                    data.push(S::from_f64((0.5 + r * theta.sin()).clamp(0.0, 1.0)));
                    labels.push(class);
                }
            }
        }
        SynthKind::RasterizedBlobs => {
            let side = RASTER_SIDE;
            shape = vec![n, 1, side, side];
            data = Vec::with_capacity(n * side * side);
            let inv = 1.0 / (2.0 * RASTER_BUMP_WIDTH * RASTER_BUMP_WIDTH);
            for class in 0..spec.num_classes {
                let (cx, cy) = raster_center(class, spec.num_classes);
                let amp = raster_amplitude(class);
                for _ in 0..spec.per_class {
                    let jx: f64 = StandardNormal.sample(&mut rng);
                    let jy: f64 = StandardNormal.sample(&mut rng);
                    let (bx, by) = (cx + spec.sigma * jx, cy + spec.sigma * jy);
                    for row in 0..side {
                        for col in 0..side {
                            let d2 = (col as f64 - bx).powi(2) + (row as f64 - by).powi(2);
                            data.push(S::from_f64(amp * (-d2 * inv).exp()));
                        }
                    }
                    labels.push(class);
                }
            }
        }
    }
    Dataset::new(Tensor::new(data, shape)?, labels, spec.num_classes, SplitTag::Full)
}

fn ingest_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(ingest_err(
            offset as u64,
            "file truncated inside a header field",
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX unsigned-byte image file plus its companion label file.
/// Pixels map to `[0,1]` by `/255`; class count is the highest label + 1.
pub fn load_idx<S: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<S>> {
    let img_bytes = fs::read(images)?;
    let magic = be_u32(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest_err(
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img_bytes, 4)? as usize;
    let rows = be_u32(&img_bytes, 8)? as usize;
    let cols = be_u32(&img_bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(ingest_err(
            img_bytes.len().min(expected) as u64,
            format!(
                "image payload is {} bytes, header promises {}",
                img_bytes.len() - 16,
                n * rows * cols
            ),
        ));
    }

    let lab_bytes = fs::read(labels)?;
    let magic = be_u32(&lab_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest_err(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = be_u32(&lab_bytes, 4)? as usize;
    if ln != n {
        return Err(ingest_err(
            4,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    if lab_bytes.len() != 8 + ln {
        return Err(ingest_err(
            lab_bytes.len().min(8 + ln) as u64,
            format!(
                "label payload is {} bytes, header promises {ln}",
                lab_bytes.len() - 8
            ),
        ));
    }

    let inv = S::from_f64(1.0 / 255.0);
    let data: Vec<S> = img_bytes[16..]
        .iter()
        .map(|&b| S::from_f64(b as f64) * inv)
        .collect();
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(data, vec![n, 1, rows, cols])?,
        labels,
        num_classes.max(2),
        SplitTag::Full,
    )
}

/// Loads a record-per-row binary file: each record is one label byte
/// followed by `channels*height*width` pixel bytes.
pub fn load_rows<S: Scalar>(
    path: &Path,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Dataset<S>> {
    let bytes = fs::read(path)?;
    let record = 1 + channels * height * width;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(ingest_err(
            (bytes.len() / record * record) as u64,
            format!(
                "file length {} is not a whole number of {record}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / record;
    let inv = S::from_f64(1.0 / 255.0);
    let mut data = Vec::with_capacity(n * (record - 1));
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let base = r * record;
        let label = bytes[base] as usize;
        if label >= num_classes {
            return Err(ingest_err(
                base as u64,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        labels.push(label);
        data.extend(
            bytes[base + 1..base + record]
                .iter()
                .map(|&b| S::from_f64(b as f64) * inv),
        );
    }
    Dataset::new(
        Tensor::new(data, vec![n, channels, height, width])?,
        labels,
        num_classes,
        SplitTag::Full,
    )
}

const CONTAINER_MAGIC: &str = "vfdadv-dataset v1";

/// Writes the native container: a text manifest, a `---` separator, then
/// `u32` little-endian labels followed by the little-endian float payload.
pub fn save_container<S: Scalar>(dataset: &Dataset<S>, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(CONTAINER_MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("dtype: {}\n", S::DTYPE));
    manifest.push_str(&format!("num_classes: {}\n", dataset.num_classes()));
    manifest.push_str(&format!("split: {}\n", dataset.tag().as_str()));
    let shape_words: Vec<String> = dataset
        .inputs()
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect();
    manifest.push_str(&format!("shape: {}\n", shape_words.join(" ")));
    manifest.push_str("---\n");

    let mut file = fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    let mut payload = Vec::with_capacity(dataset.len() * 4);
    for &y in dataset.labels() {
        payload.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for &v in dataset.inputs().data().iter() {
        v.write_le(&mut payload);
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Reads the native container back; inverse of [`save_container`] bit for
/// bit. The stored dtype must match `S`.
pub fn load_container<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let bytes = fs::read(path)?;
    let sep = b"---\n";
    let header_end = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| ingest_err(bytes.len() as u64, "missing manifest separator"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| ingest_err(e.valid_up_to() as u64, "manifest is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CONTAINER_MAGIC) {
        return Err(ingest_err(0, format!("bad magic line, expected {CONTAINER_MAGIC:?}")));
    }
    let mut dtype = None;
    let mut num_classes = None;
    let mut tag = SplitTag::Full;
    let mut shape: Option<Vec<usize>> = None;
    for line in lines {
        let Some((key, value)) = line.split_once(": ") else {
            return Err(ingest_err(0, format!("malformed manifest line {line:?}")));
        };
        match key {
            "dtype" => dtype = Some(value.to_string()),
            "num_classes" => {
                num_classes = Some(value.parse::<usize>().map_err(|_| {
                    ingest_err(0, format!("bad num_classes {value:?}"))
                })?)
            }
            "split" => tag = value.parse()?,
            "shape" => {
                let dims: std::result::Result<Vec<usize>, _> =
                    value.split(' ').map(str::parse).collect();
                shape = Some(dims.map_err(|_| ingest_err(0, format!("bad shape {value:?}")))?);
            }
            _ => {}
        }
    }
    let dtype = dtype.ok_or_else(|| ingest_err(0, "manifest missing dtype"))?;
    if dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "container stores {dtype} values, loader expects {}",
            S::DTYPE
        )));
    }
    let num_classes = num_classes.ok_or_else(|| ingest_err(0, "manifest missing num_classes"))?;
    let shape = shape.ok_or_else(|| ingest_err(0, "manifest missing shape"))?;
    let n = *shape.first().unwrap_or(&0);
    let numel: usize = shape.iter().product();

    let mut offset = header_end + sep.len();
    let need = n * 4 + numel * S::BYTES;
    if bytes.len() - offset != need {
        return Err(ingest_err(
            offset as u64,
            format!("payload is {} bytes, manifest promises {need}", bytes.len() - offset),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes([
            bytes[offset],
            bytes[offset + 1],
            bytes[offset + 2],
            bytes[offset + 3],
        ]) as usize);
        offset += 4;
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(S::read_le(&bytes[offset..offset + S::BYTES]));
        offset += S::BYTES;
    }
    Dataset::new(Tensor::new(data, shape)?, labels, num_classes, tag)
}
