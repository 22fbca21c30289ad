//! Labelled image sets, the synthetic task generator and the `DYNDS1` file
//! format.
//!
//! Layout (little-endian): magic `DYNDS1`, then u32 count, height, width,
//! channels, num_classes, then `count` images as f32 `[H, W, C]` row-major,
//! then `count` u32 labels.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{normal, Rng, StreamRng, Streams, DATA};
use crate::wire::{put_f32s, write_atomic, Reader};

pub const DATASET_MAGIC: &[u8; 6] = b"DYNDS1";
const HEADER_LEN: usize = 6 + 5 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || num_classes == 0 {
            return Err(Error::config(format!(
                "dataset dims must be positive (h={height}, w={width}, c={channels}, k={num_classes})"
            )));
        }
        let per = height * width * channels;
        if images.len() != labels.len() * per {
            return Err(Error::dim(
                "dataset",
                format!("{} image values for {} labels of size {per}", images.len(), labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::config(format!(
                "label {l} at index {i} is not below num_classes {num_classes}"
            )));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Stacks the selected samples into `[B, H, W, C]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data)
            .expect("batch dims are consistent");
        (t, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// All samples as one batch.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.image_len();
        Dataset {
            images: self.images[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Index split: the first four fifths train, the rest validation
    /// (800 / 200 for 1000 samples).
    pub fn train_val(&self) -> (Dataset, Dataset) {
        let cut = train_len(self.len());
        (self.slice(0, cut), self.slice(cut, self.len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.height, self.width, self.channels, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        put_f32s(&mut out, &self.images);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        let magic = r.take(6, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                field: "magic",
                detail: format!("expected {:?}, found {:?}", DATASET_MAGIC, magic),
            });
        }
        let count = r.u32("count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let channels = r.u32("channels")? as usize;
        let num_classes = r.u32("num_classes")? as usize;
        for (v, field, off) in [
            (height, "height", 10),
            (width, "width", 14),
            (channels, "channels", 18),
            (num_classes, "num_classes", 22),
        ] {
            if v == 0 {
                return Err(Error::Format {
                    offset: off,
                    field,
                    detail: "must be positive".into(),
                });
            }
        }
        let values = (count as u128) * (height * width * channels) as u128;
        let image_bytes = values * 4;
        let expected = HEADER_LEN as u128 + image_bytes + count as u128 * 4;
        let actual = bytes.len() as u128;
        if actual < expected {
            let field = if actual < HEADER_LEN as u128 + image_bytes {
                "images"
            } else {
                "labels"
            };
            return Err(Error::Format {
                offset: bytes.len(),
                field,
                detail: format!("file truncated: header implies {expected} bytes, found {actual}"),
            });
        }
        if actual > expected {
            return Err(Error::Format {
                offset: expected as usize,
                field: "trailer",
                detail: format!("{} unexpected trailing bytes", actual - expected),
            });
        }
        let images = r.f32s(values as usize, "images")?;
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let off = r.offset();
            let l = r.u32("labels")?;
            if l as usize >= num_classes {
                return Err(Error::Format {
                    offset: off,
                    field: "labels",
                    detail: format!("label {l} at index {i} is not below num_classes {num_classes}"),
                });
            }
            labels.push(l);
        }
        Ok(Dataset {
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Number of training samples under the fixed index split.
pub fn train_len(count: usize) -> usize {
    count - count / 5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Class-specific line and area patterns.
    Shapes,
    /// A Gaussian blob whose position and colour depend on the class.
    Blobs,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Shapes => "shapes",
            Task::Blobs => "blobs",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Task::Shapes),
            "blobs" => Ok(Task::Blobs),
            other => Err(Error::config(format!("unknown task `{other}` (shapes|blobs)"))),
        }
    }
}

const SHAPE_KINDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub task: Task,
    /// Background noise standard deviation range; each sample draws its own
    /// level, so some samples are much easier than others.
    pub noise: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            samples: 1000,
            image_size: 32,
            channels: 3,
            seed: 0,
            task: Task::Shapes,
            noise: (0.2, 1.6),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.task == Task::Shapes && self.classes > SHAPE_KINDS * self.channels.max(1) {
            problems.push(format!(
                "shapes task supports at most {} classes for {} channels",
                SHAPE_KINDS * self.channels,
                self.channels
            ));
        }
        if self.samples == 0 {
            problems.push("samples must be positive".into());
        }
        if self.image_size < 4 {
            problems.push(format!("image_size must be at least 4, got {}", self.image_size));
        }
        if self.channels == 0 {
            problems.push("channels must be positive".into());
        }
        let (lo, hi) = self.noise;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            problems.push(format!("noise range ({lo}, {hi}) is invalid"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Deterministic balanced synthetic dataset; sample `i` has label `i % classes`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Streams::new(spec.seed).stream(DATA);
    let s = spec.image_size;
    let c = spec.channels;
    let mut images = Vec::with_capacity(spec.samples * s * s * c);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let k = i % spec.classes;
        let difficulty: f64 = rng.random();
        let sigma = spec.noise.0 + (spec.noise.1 - spec.noise.0) * difficulty;
        let img = match spec.task {
            Task::Shapes => shape_image(k, s, c, &mut rng),
            Task::Blobs => blob_image(k, spec.classes, s, c, &mut rng),
        };
        images.extend(img.into_iter().map(|v| (v + sigma * normal(&mut rng)) as f32));
        labels.push(k as u32);
    }
    Dataset::new(s, s, c, spec.classes, images, labels)
}

fn jitter(rng: &mut StreamRng, span: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * span
}

fn colour_weights(primary: usize, channels: usize) -> Vec<f64> {
    (0..channels).map(|ch| if ch == primary { 1.0 } else { 0.25 }).collect()
}

fn shape_image(class: usize, s: usize, c: usize, rng: &mut StreamRng) -> Vec<f64> {
    let sf = s as f64;
    let cy = sf / 2.0 + jitter(rng, sf / 8.0);
    let cx = sf / 2.0 + jitter(rng, sf / 8.0);
    let t = (sf / 12.0).max(0.75);
    let half = sf / 3.0;
    let amp = 1.0 + jitter(rng, 0.2);
    let phase = rng.random_range(0..2usize);
    let kind = class % SHAPE_KINDS;
    let colour = colour_weights(class / SHAPE_KINDS % c, c);
    let cell = (s / 4).max(1);
    let mut out = Vec::with_capacity(s * s * c);
    for y in 0..s {
        for x in 0..s {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let inside = match kind {
                0 => dy.abs() < t && dx.abs() < half,
                1 => dx.abs() < t && dy.abs() < half,
                2 => (dy - dx).abs() < t * 1.4 && dy.abs() < half,
                3 => (dy + dx).abs() < t * 1.4 && dy.abs() < half,
                4 => ((dy * dy + dx * dx).sqrt() - sf / 4.0).abs() < t,
                5 => (dy.abs() < t && dx.abs() < half) || (dx.abs() < t && dy.abs() < half),
                6 => dy.abs().max(dx.abs()) < sf / 5.0,
                _ => (y / cell + x / cell + phase) % 2 == 0,
            };
            let v = if inside { amp } else { 0.0 };
            out.extend(colour.iter().map(|w| v * w));
        }
    }
    out
}

fn blob_image(class: usize, classes: usize, s: usize, c: usize, rng: &mut StreamRng) -> Vec<f64> {
    let sf = s as f64;
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let cy = sf / 2.0 + sf / 4.0 * angle.sin() + jitter(rng, sf / 16.0);
    let cx = sf / 2.0 + sf / 4.0 * angle.cos() + jitter(rng, sf / 16.0);
    let sigma = sf / 8.0 * (1.0 + jitter(rng, 0.2));
    let amp = 1.5 + jitter(rng, 0.3);
    let colour = colour_weights(class % c, c);
    let mut out = Vec::with_capacity(s * s * c);
    for y in 0..s {
        for x in 0..s {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let v = amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            out.extend(colour.iter().map(|w| v * w));
        }
    }
    out
}
