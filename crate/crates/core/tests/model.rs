use dynadapter::autodiff::{Graph, Mode, Tensor};
use dynadapter::model::{AdapterKind, DynAdapterModel, ForwardOpts, ModelConfig};
use dynadapter::rng::{normal, Streams};
use dynadapter::Error;

fn small_config(kind: AdapterKind) -> ModelConfig {
    let mut c = ModelConfig {
        depth: 4,
        interval: 2,
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

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = Streams::new(seed).stream("images");
    Tensor::from_fn(&[batch, cfg.image_size, cfg.image_size, cfg.channels], |_| normal(&mut rng) as f32)
}

/// Randomises every adapter tensor so the adapter path is not a no-op.
fn perturb_adapters(model: &mut DynAdapterModel, seed: u64, scale: f64) {
    let mut rng = Streams::new(seed).stream("perturb");
    for (name, p) in model.store_mut().iter_mut() {
        if DynAdapterModel::is_adapter(name) {
            for v in p.tensor.data_mut() {
                *v = (normal(&mut rng) * scale) as f32;
            }
        }
    }
}

#[test]
fn default_layout_has_four_heads() {
    let m = DynAdapterModel::init(ModelConfig::default(), 0).unwrap();
    assert_eq!(m.stages(), 4);
    for i in 1..=4 {
        assert!(m.store().contains(&format!("head.{i}.out.weight")));
    }
    assert!(!m.store().contains("head.5.out.weight"));
}

#[test]
fn indivisible_interval_is_config_error() {
    let c = ModelConfig {
        depth: 8,
        interval: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(DynAdapterModel::init(c, 0), Err(Error::Config(_))));
}

#[test]
fn trainable_set_is_adapters_and_heads() {
    for kind in [AdapterKind::ParallelLowRank, AdapterKind::SequentialRep] {
        let m = DynAdapterModel::init(small_config(kind), 1).unwrap();
        for (name, p) in m.store().iter() {
            let expect = DynAdapterModel::is_adapter(name) || name.starts_with("head.");
            assert_eq!(p.trainable, expect, "{name}");
        }
    }
}

#[test]
fn head_capacity_non_increasing() {
    let c = ModelConfig::default();
    let m = DynAdapterModel::init(c.clone(), 2).unwrap();
    let counts: Vec<usize> = (1..=4)
        .map(|i| {
            m.store()
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("head.{i}.")))
                .map(|(_, p)| p.tensor.len())
                .sum()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert!(counts[0] > counts[3]);
    for i in 1..=4 {
        assert_eq!(counts[i - 1], c.head_param_count(i));
    }
}

#[test]
fn patch_embed_shapes_and_linearity() {
    let cfg = ModelConfig::default();
    let m = DynAdapterModel::init(cfg.clone(), 3).unwrap();
    let zero = Tensor::zeros(&[32, 32, 3]);
    let tokens = m.patch_embed(&zero).unwrap();
    assert_eq!(tokens.dims(), &[1, 17, 64]);

    let s = m.store();
    let bias = s.get("embed.patch.bias").unwrap().data();
    let cls = s.get("embed.cls").unwrap().data();
    let pos = s.get("embed.pos").unwrap().data();
    for j in 0..64 {
        assert_eq!(tokens.data()[j], cls[j] + pos[j]);
        for t in 1..17 {
            let want = (bias[j] as f64 + pos[t * 64 + j] as f64) as f32;
            assert_eq!(tokens.data()[t * 64 + j], want);
        }
    }

    let bad = Tensor::zeros(&[33, 33, 3]);
    assert!(matches!(m.patch_embed(&bad), Err(Error::Dimension { .. })));
}

#[test]
fn fresh_model_equals_adapter_free_backbone() {
    for kind in [AdapterKind::ParallelLowRank, AdapterKind::SequentialRep] {
        let cfg = small_config(kind);
        let m = DynAdapterModel::init(cfg.clone(), 4).unwrap();
        let x = images(&cfg, 3, 5);
        let mut g = Graph::inference();
        let with = m.forward_all(&mut g, &x, &mut ForwardOpts::default()).unwrap();
        let without = m.forward_all(&mut g, &x, &mut ForwardOpts::backbone_only()).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!(g.value(*a).bit_eq(&g.value(*b)), "{kind}");
        }
    }
}

#[test]
fn stage_preserves_shape_and_is_deterministic() {
    let cfg = small_config(AdapterKind::ParallelLowRank);
    let mut m = DynAdapterModel::init(cfg.clone(), 6).unwrap();
    perturb_adapters(&mut m, 1, 0.1);
    let x = images(&cfg, 2, 7);
    let run = || {
        let mut g = Graph::new(Mode::Eval);
        let mut pass = m.begin(&mut g, &x).unwrap();
        let before = g.dims(pass.tokens).to_vec();
        let y = m.forward_stage(&mut g, &mut pass, 1, &mut ForwardOpts::default()).unwrap();
        assert_eq!(g.dims(y), before.as_slice());
        g.value(y)
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn stages_must_run_in_order() {
    let cfg = small_config(AdapterKind::ParallelLowRank);
    let m = DynAdapterModel::init(cfg.clone(), 8).unwrap();
    let x = images(&cfg, 1, 9);
    let mut g = Graph::inference();
    let mut pass = m.begin(&mut g, &x).unwrap();
    let err = m.forward_stage(&mut g, &mut pass, 2, &mut ForwardOpts::default());
    assert!(matches!(err, Err(Error::Contract(_))));
    m.forward_stage(&mut g, &mut pass, 1, &mut ForwardOpts::default()).unwrap();
    assert!(m.forward_stage(&mut g, &mut pass, 1, &mut ForwardOpts::default()).is_err());
}

#[test]
fn forward_all_structure_and_softmax() {
    let cfg = ModelConfig::default();
    let m = DynAdapterModel::init(cfg.clone(), 10).unwrap();
    let x = images(&cfg, 2, 11);
    let logits = m.logits_all(&x).unwrap();
    assert_eq!(logits.len(), 4);
    for l in &logits {
        assert_eq!(l.dims(), &[2, cfg.num_classes]);
        assert!(l.is_finite());
        for r in 0..2 {
            let row: Vec<f64> = l.row(r).iter().map(|&v| v as f64).collect();
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn perturbing_deeper_blocks_leaves_earlier_exits_unchanged() {
    let cfg = small_config(AdapterKind::SequentialRep);
    let mut m = DynAdapterModel::init(cfg.clone(), 12).unwrap();
    perturb_adapters(&mut m, 2, 0.1);
    let x = images(&cfg, 2, 13);
    let before = m.logits_all(&x).unwrap();
    // blocks 3..4 belong to stage 2
    let names: Vec<String> = m
        .store()
        .names()
        .filter(|n| n.starts_with("block.3.") || n.starts_with("block.4.") || n.starts_with("head.2."))
        .map(String::from)
        .collect();
    for n in names {
        for v in m.store_mut().get_mut(&n).unwrap().data_mut() {
            *v += 0.5;
        }
    }
    let after = m.logits_all(&x).unwrap();
    assert!(before[0].bit_eq(&after[0]));
    assert!(!before[1].bit_eq(&after[1]));
}

#[test]
fn fused_model_matches_unfused_end_to_end() {
    for kind in [AdapterKind::ParallelLowRank, AdapterKind::SequentialRep] {
        let cfg = small_config(kind);
        let mut m = DynAdapterModel::init(cfg.clone(), 14).unwrap();
        perturb_adapters(&mut m, 3, 0.05);
        let fused = m.fuse().unwrap();
        assert!(fused.is_fused());
        assert!(fused.store().names().all(|n| !DynAdapterModel::is_adapter(n)));
        assert!(matches!(fused.fuse(), Err(Error::Contract(_))));

        let x = images(&cfg, 16, 15);
        let a = m.logits_all(&x).unwrap();
        let b = fused.logits_all(&x).unwrap();
        for (u, f) in a.iter().zip(&b) {
            assert!(u.max_abs_diff(f) <= 1e-4, "{kind}: {}", u.max_abs_diff(f));
        }
    }
}

#[test]
fn fusing_zero_adapters_keeps_frozen_weights() {
    let cfg = small_config(AdapterKind::SequentialRep);
    let m = DynAdapterModel::init(cfg, 16).unwrap();
    let fused = m.fuse().unwrap();
    for l in 1..=4 {
        for names in m.sites(l) {
            assert!(fused.store().get(&names.weight).unwrap().bit_eq(m.store().get(&names.weight).unwrap()));
            assert!(fused.store().get(&names.bias).unwrap().bit_eq(m.store().get(&names.bias).unwrap()));
        }
    }
}

#[test]
fn block_counter_counts_samples_times_blocks() {
    let cfg = small_config(AdapterKind::ParallelLowRank);
    let m = DynAdapterModel::init(cfg.clone(), 17).unwrap();
    let x = images(&cfg, 5, 18);
    m.logits_all(&x).unwrap();
    assert_eq!(m.block_evals(), 5 * 4);
}
