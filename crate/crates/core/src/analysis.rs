//! Linear CKA feature/label profiles and per-stage exit accuracy.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::inference::ExitRecord;
use crate::model::{DynAdapterModel, ForwardOpts, Pooling};

/// Row-major `f64` matrix view used by the similarity routines.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> MatrixRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim("matrix", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(MatrixRef { data, rows, cols })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cka {
    pub value: f64,
    /// One side had (numerically) no variance; `value` is then 0.
    pub degenerate: bool,
}

fn centered(x: MatrixRef<'_>) -> Vec<f64> {
    let (m, p) = (x.rows, x.cols);
    let mut mean = vec![0.0; p];
    for row in x.data.chunks(p) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    x.data
        .chunks(p)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, a)| v - a).collect::<Vec<_>>())
        .collect()
}

/// Squared Frobenius norm of `Aᵀ B` for `A: [m, p]`, `B: [m, q]`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, m: usize) -> f64 {
    let mut prod = vec![0.0; p * q];
    for r in 0..m {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in prod[i * q..(i + 1) * q].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    prod.iter().map(|v| v * v).sum()
}

/// Linear CKA `‖YcᵀXc‖² / (‖XcᵀXc‖ ‖YcᵀYc‖)` with column-centred inputs.
pub fn linear_cka(x: MatrixRef<'_>, y: MatrixRef<'_>) -> Result<Cka> {
    if x.rows != y.rows {
        return Err(Error::dim("linear_cka", format!("{} rows vs {} rows", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(Error::dim("linear_cka", format!("need at least 2 samples, got {}", x.rows)));
    }
    let m = x.rows;
    let xc = centered(x);
    let yc = centered(y);
    let energy = |raw: &[f64], c: &[f64]| {
        let total: f64 = raw.iter().map(|v| v * v).sum();
        let left: f64 = c.iter().map(|v| v * v).sum();
        left > 0.0 && left > 1e-24 * total
    };
    if !energy(x.data, &xc) || !energy(y.data, &yc) {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    let xy = cross_frobenius_sq(&yc, y.cols, &xc, x.cols, m);
    let xx = cross_frobenius_sq(&xc, x.cols, &xc, x.cols, m).sqrt();
    let yy = cross_frobenius_sq(&yc, y.cols, &yc, y.cols, m).sqrt();
    let denom = xx * yy;
    if !(denom.is_normal()) {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cka {
        value: (xy / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// One-hot `[m, K]` label matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l] = 1.0;
    }
    out
}

/// Which activations the profile reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// The model as it runs, adapters included.
    Adapted,
    /// The frozen backbone alone, every adapter bypassed.
    Backbone,
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::Adapted => "adapted",
            FeatureSource::Backbone => "backbone",
        })
    }
}

impl FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapted" => Ok(FeatureSource::Adapted),
            "backbone" => Ok(FeatureSource::Backbone),
            other => Err(Error::config(format!("unknown feature source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaReport {
    /// One entry per block, shallowest first.
    pub values: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub samples: usize,
    pub pooling: Pooling,
    pub source: FeatureSource,
}

/// Feature/label CKA after every block over the given samples.
pub fn label_cka_profile(
    model: &DynAdapterModel,
    images: &Tensor,
    labels: &[usize],
    pooling: Pooling,
    source: FeatureSource,
) -> Result<CkaReport> {
    let m = images.dims().first().copied().unwrap_or(0);
    if m != labels.len() {
        return Err(Error::dim("label_cka_profile", format!("{m} images vs {} labels", labels.len())));
    }
    let k = model.config().num_classes;
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!("label {l} is not below num_classes {k}")));
    }
    let mut opts = match source {
        FeatureSource::Adapted => ForwardOpts::default(),
        FeatureSource::Backbone => ForwardOpts::backbone_only(),
    };
    let feats = model.block_features(images, pooling, &mut opts)?;
    let y = one_hot(labels, k);
    let ym = MatrixRef::new(&y, m, k)?;
    let mut values = Vec::with_capacity(feats.len());
    let mut degenerate = Vec::with_capacity(feats.len());
    for f in &feats {
        let d = f.dims()[1];
        let x: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
        let c = linear_cka(MatrixRef::new(&x, m, d)?, ym)?;
        values.push(c.value);
        degenerate.push(c.degenerate);
    }
    Ok(CkaReport {
        values,
        degenerate,
        samples: m,
        pooling,
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub exit_counts: Vec<usize>,
    pub exit_probability: Vec<f64>,
    /// Accuracy among samples exiting at each stage; `None` if none did.
    pub stage_accuracy: Vec<Option<f64>>,
    /// `Σ_i P(exit i) · acc(i)`, i.e. overall accuracy of the dynamic model.
    pub final_accuracy: f64,
}

pub fn stage_accuracy_report(records: &[ExitRecord], labels: &[usize], stages: usize) -> Result<StageMetrics> {
    if records.len() != labels.len() {
        return Err(Error::dim(
            "stage_accuracy_report",
            format!("{} records vs {} labels", records.len(), labels.len()),
        ));
    }
    if records.is_empty() {
        return Err(Error::contract("no records to report"));
    }
    let mut counts = vec![0usize; stages];
    let mut correct = vec![0usize; stages];
    for (r, &y) in records.iter().zip(labels) {
        if r.exit_stage == 0 || r.exit_stage > stages {
            return Err(Error::contract(format!("record {} exits at stage {}", r.sample, r.exit_stage)));
        }
        counts[r.exit_stage - 1] += 1;
        if r.prediction == y {
            correct[r.exit_stage - 1] += 1;
        }
    }
    let n = records.len() as f64;
    let exit_probability: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let stage_accuracy: Vec<Option<f64>> = counts
        .iter()
        .zip(&correct)
        .map(|(&c, &k)| (c > 0).then(|| k as f64 / c as f64))
        .collect();
    let final_accuracy = exit_probability
        .iter()
        .zip(&stage_accuracy)
        .map(|(p, a)| p * a.unwrap_or(0.0))
        .sum();
    Ok(StageMetrics {
        exit_counts: counts,
        exit_probability,
        stage_accuracy,
        final_accuracy,
    })
}
