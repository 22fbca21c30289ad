#![allow(dead_code)]

use dynadapter::autodiff::Tensor;
use dynadapter::data::{synth_dataset, Dataset, SynthSpec};
use dynadapter::model::{AdapterKind, DynAdapterModel, ModelConfig};
use dynadapter::rng::{normal, Streams};

/// Four single-block stages on 8x8 images with 2x2 patches of 4px.
pub fn tiny_config(kind: AdapterKind) -> ModelConfig {
    let mut c = ModelConfig {
        depth: 4,
        interval: 1,
        embed_dim: 16,
        heads: 2,
        mlp_hidden: 32,
        image_size: 8,
        patch_size: 4,
        channels: 3,
        num_classes: 3,
        ..ModelConfig::default()
    };
    c.adapter.kind = kind;
    c.adapter.rank = 4;
    c.adapter.groups = 2;
    c.head_hidden = c.default_head_hidden();
    c
}

pub fn random_images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = Streams::new(seed).stream("images");
    Tensor::from_fn(&[batch, cfg.image_size, cfg.image_size, cfg.channels], |_| normal(&mut rng) as f32)
}

pub fn tiny_dataset(cfg: &ModelConfig, samples: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec {
        classes: cfg.num_classes,
        samples,
        image_size: cfg.image_size,
        channels: cfg.channels,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Randomises every adapter tensor so the adapter path carries signal.
pub fn perturb_adapters(model: &mut DynAdapterModel, seed: u64, scale: f64) {
    let mut rng = Streams::new(seed).stream("perturb");
    for (name, p) in model.store_mut().iter_mut() {
        if DynAdapterModel::is_adapter(name) {
            for v in p.tensor.data_mut() {
                *v = (normal(&mut rng) * scale) as f32;
            }
        }
    }
}
