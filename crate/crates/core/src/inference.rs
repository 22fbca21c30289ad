//! Confidence-threshold early-exit inference, analytic FLOPs accounting and
//! threshold calibration against a compute budget.

use std::fmt;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{batch_chunks, AdapterKind, DynAdapterModel, ForwardOpts, ModelConfig, EVAL_CHUNK};
use crate::training::argmax;

/// Per-stage exit thresholds. The last stage always exits.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    thresholds: Vec<f64>,
}

impl ExitPolicy {
    /// One threshold `tau` shared by stages `1..S`.
    pub fn shared(tau: f64, stages: usize) -> Result<Self> {
        Self::per_stage(vec![tau; stages])
    }

    /// Explicit thresholds; the last entry is replaced by 0.
    pub fn per_stage(mut thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::config("exit policy needs at least one stage"));
        }
        if let Some(t) = thresholds.iter().find(|t| t.is_nan() || **t < 0.0) {
            return Err(Error::config(format!("threshold {t} must be non-negative")));
        }
        *thresholds.last_mut().unwrap() = 0.0;
        Ok(ExitPolicy { thresholds })
    }

    /// Never exits before the last stage.
    pub fn full_depth(stages: usize) -> Self {
        Self::shared(f64::INFINITY, stages).expect("infinite threshold is valid")
    }

    pub fn stages(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold(&self, stage: usize) -> f64 {
        self.thresholds[stage - 1]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// The shared threshold, if stages `1..S` all use the same value.
    pub fn shared_tau(&self) -> Option<f64> {
        let early = &self.thresholds[..self.thresholds.len() - 1];
        match early.first() {
            None => Some(f64::INFINITY),
            Some(&t) if early.iter().all(|&x| x == t || (x.is_nan() && t.is_nan())) => Some(t),
            _ => None,
        }
    }

    /// First stage whose confidence reaches its threshold.
    pub fn exit_stage(&self, confidences: &[f64]) -> usize {
        let s = self.stages();
        (1..s).find(|&i| confidences[i - 1] >= self.threshold(i)).unwrap_or(s)
    }

    /// Parses `tau=<x>` or `thresholds=<t1>,..,<tS>` lines; `#` starts a
    /// comment. `inf` denotes a threshold that is never met.
    pub fn parse(text: &str, stages: usize) -> Result<Self> {
        let mut policy = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("policy line {}: expected key=value", no + 1)))?;
            let p = match key.trim() {
                "tau" => ExitPolicy::shared(parse_threshold(value)?, stages)?,
                "thresholds" => {
                    let t = value.split(',').map(parse_threshold).collect::<Result<Vec<_>>>()?;
                    if t.len() != stages {
                        return Err(Error::config(format!(
                            "policy has {} thresholds for {stages} stages",
                            t.len()
                        )));
                    }
                    ExitPolicy::per_stage(t)?
                }
                other => return Err(Error::config(format!("unknown policy key `{other}`"))),
            };
            if policy.replace(p).is_some() {
                return Err(Error::config("policy sets its thresholds more than once"));
            }
        }
        policy.ok_or_else(|| Error::config("policy has no `tau` or `thresholds` line"))
    }

    pub fn render(&self) -> String {
        match self.shared_tau() {
            Some(t) => format!("tau={}\n", fmt_threshold(t)),
            None => {
                let parts: Vec<String> = self.thresholds.iter().map(|&t| fmt_threshold(t)).collect();
                format!("thresholds={}\n", parts.join(","))
            }
        }
    }
}

fn parse_threshold(s: &str) -> Result<f64> {
    let s = s.trim();
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>()
        .map_err(|_| Error::config(format!("threshold `{s}` is not a number")))
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t:?}")
    }
}

impl fmt::Display for ExitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.render().trim_end())
    }
}

/// Analytic compute model: FLOPs = 2 x multiply-accumulates of the matrix
/// products; norms, activations and softmax are not counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsModel {
    pub embed: u64,
    pub block: u64,
    pub heads: Vec<u64>,
    pub interval: usize,
}

impl FlopsModel {
    /// Costs of the adapter-free (equivalently, fused) network.
    pub fn backbone(c: &ModelConfig) -> Self {
        let (n, d, k) = (c.token_len() as u64, c.embed_dim as u64, c.num_classes as u64);
        let mlp = c.mlp_hidden as u64;
        let macs = 3 * n * d * d // qkv
            + 2 * n * n * d // scores and attention-weighted values
            + n * d * d // output projection
            + 2 * n * d * mlp; // fc1 and fc2
        let heads = c
            .head_hidden
            .iter()
            .map(|&h| {
                let h = h as u64;
                2 * if h == 0 { d * k } else { d * h + h * k }
            })
            .collect();
        FlopsModel {
            embed: 2 * (n - 1) * c.patch_dim() as u64 * d,
            block: 2 * macs,
            heads,
            interval: c.interval,
        }
    }

    /// Costs with unfused adapters evaluated alongside the frozen maps.
    pub fn unfused(c: &ModelConfig) -> Self {
        let mut f = Self::backbone(c);
        let (n, d, r) = (c.token_len() as u64, c.embed_dim as u64, c.adapter.rank as u64);
        let per_site = |out: u64| match c.adapter.kind {
            AdapterKind::ParallelLowRank => d * r + r * out,
            AdapterKind::SequentialRep => d * r + r * d / c.adapter.groups as u64,
        };
        let mut extra = 0;
        if c.adapter.placement.mha_in {
            extra += per_site(3 * d);
        }
        if c.adapter.placement.ffn_in {
            extra += per_site(c.mlp_hidden as u64);
        }
        f.block += 2 * n * extra;
        f
    }

    /// Costs matching how `model` currently evaluates.
    pub fn for_model(model: &DynAdapterModel) -> Self {
        if model.is_fused() {
            Self::backbone(model.config())
        } else {
            Self::unfused(model.config())
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    /// Cumulative cost of exiting at `stage`: embedding, `stage * T` blocks
    /// and heads `1..=stage`.
    pub fn cost(&self, stage: usize) -> u64 {
        self.embed + (stage * self.interval) as u64 * self.block + self.heads[..stage].iter().sum::<u64>()
    }

    pub fn full(&self) -> u64 {
        self.cost(self.stages())
    }

    pub fn fraction(&self, stage: usize) -> f64 {
        self.cost(stage) as f64 / self.full() as f64
    }
}

/// Maximum softmax probability.
pub fn confidence(logits: &[f32]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::dim("confidence", "empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "confidence".into() });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    Ok(1.0 / z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub sample: usize,
    pub exit_stage: usize,
    pub confidence: f64,
    pub prediction: usize,
    pub flops: u64,
}

fn require_fused(model: &DynAdapterModel) -> Result<()> {
    if model.is_fused() {
        Ok(())
    } else {
        Err(Error::contract("dynamic inference needs a fused model"))
    }
}

/// Runs one image `[H, W, C]` stage by stage and stops at the first
/// confident exit. Blocks past the exit are never evaluated.
pub fn infer_sample(model: &DynAdapterModel, image: &Tensor, policy: &ExitPolicy) -> Result<ExitRecord> {
    require_fused(model)?;
    check_policy(model, policy)?;
    let flops = FlopsModel::for_model(model);
    let mut g = Graph::inference();
    let mut pass = model.begin(&mut g, image)?;
    if pass.batch() != 1 {
        return Err(Error::dim("infer_sample", format!("expected one image, got {}", pass.batch())));
    }
    let s = model.stages();
    let mut opts = ForwardOpts::default();
    for i in 1..=s {
        let x = model.forward_stage(&mut g, &mut pass, i, &mut opts)?;
        let head = model.head(&mut g, x, i, &mut opts)?;
        let z = g.value(head);
        let conf = confidence(z.row(0))?;
        if i == s || conf >= policy.threshold(i) {
            return Ok(ExitRecord {
                sample: 0,
                exit_stage: i,
                confidence: conf,
                prediction: argmax(z.row(0)),
                flops: flops.cost(i),
            });
        }
    }
    unreachable!("the last stage always exits")
}

fn check_policy(model: &DynAdapterModel, policy: &ExitPolicy) -> Result<()> {
    if policy.stages() != model.stages() {
        return Err(Error::config(format!(
            "policy has {} stages, model has {}",
            policy.stages(),
            model.stages()
        )));
    }
    Ok(())
}

/// Batched early exit: after each stage the samples that exited are dropped
/// and the rest are carried on together. Record `j` belongs to image `j`.
pub fn infer_batch(model: &DynAdapterModel, images: &Tensor, policy: &ExitPolicy) -> Result<Vec<ExitRecord>> {
    require_fused(model)?;
    check_policy(model, policy)?;
    let mut out = Vec::new();
    for chunk in batch_chunks(images, EVAL_CHUNK)? {
        let offset = out.len();
        out.extend(infer_chunk(model, &chunk, policy)?.into_iter().map(|mut r| {
            r.sample += offset;
            r
        }));
    }
    Ok(out)
}

fn infer_chunk(model: &DynAdapterModel, images: &Tensor, policy: &ExitPolicy) -> Result<Vec<ExitRecord>> {
    let flops = FlopsModel::for_model(model);
    let mut g = Graph::inference();
    let mut pass = model.begin(&mut g, images)?;
    let total = pass.batch();
    let mut alive: Vec<usize> = (0..total).collect();
    let mut records: Vec<Option<ExitRecord>> = vec![None; total];
    let s = model.stages();
    let mut opts = ForwardOpts::default();
    for i in 1..=s {
        if alive.is_empty() {
            break;
        }
        let x = model.forward_stage(&mut g, &mut pass, i, &mut opts)?;
        let head = model.head(&mut g, x, i, &mut opts)?;
        let z = g.value(head);
        let mut keep = Vec::new();
        for (row, &id) in alive.iter().enumerate() {
            let conf = confidence(z.row(row))?;
            if i == s || conf >= policy.threshold(i) {
                records[id] = Some(ExitRecord {
                    sample: id,
                    exit_stage: i,
                    confidence: conf,
                    prediction: argmax(z.row(row)),
                    flops: flops.cost(i),
                });
            } else {
                keep.push(row);
            }
        }
        if keep.len() < alive.len() && !keep.is_empty() {
            pass = pass.select(&mut g, &keep)?;
        }
        alive = keep.iter().map(|&r| alive[r]).collect();
    }
    Ok(records.into_iter().map(|r| r.expect("every sample exits")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsSummary {
    pub mean: f64,
    /// Exit counts per stage, index 0 is stage 1.
    pub histogram: Vec<usize>,
}

pub fn average_flops(records: &[ExitRecord], stages: usize) -> Result<FlopsSummary> {
    if records.is_empty() {
        return Err(Error::contract("no exit records to average"));
    }
    let mut histogram = vec![0; stages];
    for r in records {
        if r.exit_stage == 0 || r.exit_stage > stages {
            return Err(Error::contract(format!(
                "record {} exits at stage {} of {stages}",
                r.sample, r.exit_stage
            )));
        }
        histogram[r.exit_stage - 1] += 1;
    }
    let mean = records.iter().map(|r| r.flops as f64).sum::<f64>() / records.len() as f64;
    Ok(FlopsSummary { mean, histogram })
}

/// Relative tolerance on the achieved budget.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub policy: ExitPolicy,
    pub tau: f64,
    pub budget: f64,
    /// Mean FLOPs over the calibration set as a fraction of full depth.
    pub achieved: f64,
    /// The budget lies below the cost of always exiting at stage 1.
    pub unreachable: bool,
    pub within_tolerance: bool,
}

/// Per-sample, per-stage confidences from one full-depth pass.
pub fn stage_confidences(model: &DynAdapterModel, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let logits = model.logits_all(images)?;
    let b = logits[0].dims()[0];
    (0..b)
        .map(|r| logits.iter().map(|z| confidence(z.row(r))).collect())
        .collect()
}

/// Mean exit cost (fraction of full depth) of a shared threshold.
fn budget_at(tau: f64, confs: &[Vec<f64>], flops: &FlopsModel) -> f64 {
    let s = flops.stages();
    let total: u64 = confs
        .iter()
        .map(|c| {
            let stage = (1..s).find(|&i| c[i - 1] >= tau).unwrap_or(s);
            flops.cost(stage)
        })
        .sum();
    total as f64 / confs.len() as f64 / flops.full() as f64
}

/// Bisects a shared threshold so that mean FLOPs on `images` hit
/// `budget x full-depth cost`.
pub fn calibrate_threshold(model: &DynAdapterModel, images: &Tensor, budget: f64) -> Result<Calibration> {
    require_fused(model)?;
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::config(format!("budget fraction {budget} outside (0, 1]")));
    }
    if images.dims().first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("calibration set is empty"));
    }
    let s = model.stages();
    let flops = FlopsModel::for_model(model);
    let done = |tau: f64, achieved: f64, unreachable: bool| -> Result<Calibration> {
        Ok(Calibration {
            policy: ExitPolicy::shared(tau, s)?,
            tau,
            budget,
            achieved,
            unreachable,
            within_tolerance: (achieved - budget).abs() <= BUDGET_TOLERANCE * budget,
        })
    };
    if budget >= 1.0 {
        return done(f64::INFINITY, 1.0, false);
    }
    if budget < flops.fraction(1) {
        return done(0.0, flops.fraction(1), true);
    }
    let confs = stage_confidences(model, images)?;
    // budget_at is non-decreasing in tau; tau just above 1 keeps everyone.
    let (mut lo, mut hi) = (0.0f64, 1.0f64 + 1e-9);
    let (mut f_lo, mut f_hi) = (budget_at(lo, &confs, &flops), budget_at(hi, &confs, &flops));
    if f_lo >= budget {
        return done(lo, f_lo, false);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = budget_at(mid, &confs, &flops);
        if f <= budget {
            lo = mid;
            f_lo = f;
        } else {
            hi = mid;
            f_hi = f;
        }
    }
    if (f_hi - budget).abs() < (budget - f_lo).abs() {
        done(hi, f_hi, false)
    } else {
        done(lo, f_lo, false)
    }
}
