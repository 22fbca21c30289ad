//! Browser demo. Trains a small multi-exit model in-page, then lets the user
//! sweep the exit threshold, inspect the per-block label CKA profile and
//! verify that fusion leaves the logits unchanged.
//!
//! [`Explorer`] holds the logic and is plain Rust; [`Demo`] is the thin
//! `wasm-bindgen` wrapper the page talks to.

use dynadapter::analysis::{label_cka_profile, FeatureSource};
use dynadapter::autodiff::Tensor;
use dynadapter::data::{synth_dataset, Dataset, SynthSpec, Task};
use dynadapter::inference::{confidence, ExitPolicy, FlopsModel};
use dynadapter::model::{DynAdapterModel, ModelConfig, Pooling};
use dynadapter::training::{fit, pretrain_backbone, TrainSchedule};
use dynadapter::Result;
use wasm_bindgen::prelude::*;

pub const SAMPLES: usize = 360;

pub fn demo_config() -> ModelConfig {
    let mut c = ModelConfig {
        depth: 4,
        interval: 1,
        embed_dim: 32,
        heads: 2,
        mlp_hidden: 64,
        image_size: 8,
        patch_size: 4,
        channels: 3,
        num_classes: 3,
        ..ModelConfig::default()
    };
    c.adapter.rank = 4;
    c.head_hidden = c.default_head_hidden();
    c
}

/// What a shared threshold does on the held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub flops_fraction: f64,
    pub accuracy: f64,
    /// Exit counts, index 0 is stage 1.
    pub histogram: Vec<usize>,
}

pub struct Explorer {
    trained: DynAdapterModel,
    fused: DynAdapterModel,
    val: Dataset,
    flops: FlopsModel,
    /// Per sample: confidence and prediction at every stage.
    confs: Vec<Vec<f64>>,
    preds: Vec<Vec<usize>>,
}

impl Explorer {
    pub fn train(seed: u64, epochs: usize) -> Result<Explorer> {
        let cfg = demo_config();
        let spec = |task, seed| SynthSpec {
            classes: cfg.num_classes,
            samples: SAMPLES,
            image_size: cfg.image_size,
            channels: cfg.channels,
            seed,
            task,
            ..SynthSpec::default()
        };
        let mut model = DynAdapterModel::init(cfg.clone(), seed)?;
        let surrogate = synth_dataset(&spec(Task::Blobs, seed ^ 0x5eed))?;
        pretrain_backbone(&mut model, &surrogate, 3, 0.05, 16, seed)?;
        let (train, val) = synth_dataset(&spec(Task::Shapes, seed))?.train_val();
        let schedule = TrainSchedule {
            total_epochs: epochs,
            batch_size: 16,
            alpha: 0.1,
            seed,
            ..TrainSchedule::for_stages(model.stages())
        };
        fit(&mut model, &train, &schedule, |_| {})?;
        let fused = model.fuse()?;
        let (images, _) = val.all();
        let logits = fused.logits_all(&images)?;
        let mut confs = vec![Vec::new(); val.len()];
        let mut preds = vec![Vec::new(); val.len()];
        for z in &logits {
            for (i, (c, p)) in confs.iter_mut().zip(preds.iter_mut()).enumerate() {
                let row = z.row(i);
                c.push(confidence(row)?);
                p.push(argmax(row));
            }
        }
        Ok(Explorer {
            flops: FlopsModel::for_model(&fused),
            trained: model,
            fused,
            val,
            confs,
            preds,
        })
    }

    pub fn stages(&self) -> usize {
        self.flops.stages()
    }

    pub fn stage_fractions(&self) -> Vec<f64> {
        (1..=self.stages()).map(|s| self.flops.fraction(s)).collect()
    }

    pub fn exit_at(&self, tau: f64) -> Result<Snapshot> {
        let policy = ExitPolicy::shared(tau, self.stages())?;
        let mut histogram = vec![0; self.stages()];
        let (mut cost, mut correct) = (0.0, 0);
        for (i, c) in self.confs.iter().enumerate() {
            let s = policy.exit_stage(c);
            histogram[s - 1] += 1;
            cost += self.flops.fraction(s);
            correct += usize::from(self.preds[i][s - 1] == self.val.label(i));
        }
        let n = self.confs.len() as f64;
        Ok(Snapshot {
            flops_fraction: cost / n,
            accuracy: correct as f64 / n,
            histogram,
        })
    }

    pub fn cka_profile(&self, pooling: Pooling, source: FeatureSource) -> Result<Vec<f64>> {
        let (images, labels) = self.val.all();
        Ok(label_cka_profile(&self.trained, &images, &labels, pooling, source)?.values)
    }

    /// Largest logit difference between the adapter and fused forms over all
    /// exits on the held-out images.
    pub fn fusion_deviation(&self) -> Result<f32> {
        let (images, _) = self.val.all();
        let a = self.trained.logits_all(&images)?;
        let b = self.fused.logits_all(&images)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f32::max))
    }

    pub fn fused(&self) -> &DynAdapterModel {
        &self.fused
    }

    pub fn val_images(&self) -> Tensor {
        self.val.all().0
    }

    pub fn val_labels(&self) -> Vec<usize> {
        self.val.labels()
    }
}

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

fn js(e: dynadapter::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Explorer);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs: u32) -> std::result::Result<Demo, JsError> {
        Explorer::train(seed as u64, epochs as usize).map(Demo).map_err(js)
    }

    pub fn stages(&self) -> usize {
        self.0.stages()
    }

    #[wasm_bindgen(js_name = stageFractions)]
    pub fn stage_fractions(&self) -> Vec<f64> {
        self.0.stage_fractions()
    }

    /// `[flops_fraction, accuracy, count_1, .., count_S]`.
    #[wasm_bindgen(js_name = exitAt)]
    pub fn exit_at(&self, tau: f64) -> std::result::Result<Vec<f64>, JsError> {
        let s = self.0.exit_at(tau).map_err(js)?;
        let mut out = vec![s.flops_fraction, s.accuracy];
        out.extend(s.histogram.iter().map(|&c| c as f64));
        Ok(out)
    }

    #[wasm_bindgen(js_name = ckaProfile)]
    pub fn cka_profile(&self, mean_pooling: bool, backbone: bool) -> std::result::Result<Vec<f64>, JsError> {
        let pooling = if mean_pooling { Pooling::MeanTokens } else { Pooling::ClassToken };
        let source = if backbone { FeatureSource::Backbone } else { FeatureSource::Adapted };
        self.0.cka_profile(pooling, source).map_err(js)
    }

    #[wasm_bindgen(js_name = fusionDeviation)]
    pub fn fusion_deviation(&self) -> std::result::Result<f64, JsError> {
        self.0.fusion_deviation().map(f64::from).map_err(js)
    }
}
