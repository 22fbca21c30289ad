mod common;

use common::{perturb_adapters, random_images, tiny_config, tiny_dataset};
use dynadapter::autodiff::Tensor;
use dynadapter::inference::{
    average_flops, calibrate_threshold, confidence, infer_batch, infer_sample, stage_confidences, ExitPolicy,
    ExitRecord, FlopsModel, BUDGET_TOLERANCE,
};
use dynadapter::model::{AdapterKind, DynAdapterModel, ModelConfig};
use dynadapter::training::{fit, TrainSchedule};
use dynadapter::Error;
use proptest::prelude::*;

fn fused_model(kind: AdapterKind, seed: u64) -> DynAdapterModel {
    let mut m = DynAdapterModel::init(tiny_config(kind), seed).unwrap();
    perturb_adapters(&mut m, seed + 1, 0.2);
    m.fuse().unwrap()
}

fn row(images: &Tensor, i: usize) -> Tensor {
    let d = images.dims();
    let per: usize = d[1..].iter().product();
    Tensor::new(d[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec()).unwrap()
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn zero_threshold_exits_everything_at_stage_one() {
    let m = fused_model(AdapterKind::ParallelLowRank, 1);
    let images = random_images(m.config(), 20, 3);
    let recs = infer_batch(&m, &images, &ExitPolicy::shared(0.0, 4).unwrap()).unwrap();
    assert!(recs.iter().all(|r| r.exit_stage == 1));
    let first = &m.logits_all(&images).unwrap()[0];
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.prediction, argmax(first.row(i)));
    }
}

#[test]
fn unreachable_thresholds_match_static_full_depth() {
    for kind in [AdapterKind::ParallelLowRank, AdapterKind::SequentialRep] {
        let m = fused_model(kind, 2);
        let images = random_images(m.config(), 70, 4);
        let last = m.logits_all(&images).unwrap().pop().unwrap();
        for policy in [
            ExitPolicy::shared(1.5, 4).unwrap(),
            ExitPolicy::per_stage(vec![2.0, 2.0, 2.0, 0.0]).unwrap(),
            ExitPolicy::full_depth(4),
        ] {
            let recs = infer_batch(&m, &images, &policy).unwrap();
            for (i, r) in recs.iter().enumerate() {
                assert_eq!(r.exit_stage, 4);
                assert_eq!(r.prediction, argmax(last.row(i)));
                assert_eq!(r.confidence.to_bits(), confidence(last.row(i)).unwrap().to_bits());
            }
        }
    }
}

#[test]
fn batched_matches_per_sample() {
    let m = fused_model(AdapterKind::SequentialRep, 3);
    let images = random_images(m.config(), 130, 5);
    let confs = stage_confidences(&m, &images).unwrap();
    let mut pooled: Vec<f64> = confs.iter().map(|c| c[0]).collect();
    pooled.sort_by(f64::total_cmp);
    let policy = ExitPolicy::per_stage(vec![pooled[60], pooled[90], pooled[40], 0.0]).unwrap();
    let batch = infer_batch(&m, &images, &policy).unwrap();
    let mut stages = [0usize; 4];
    for (i, b) in batch.iter().enumerate() {
        let single = infer_sample(&m, &row(&images, i), &policy).unwrap();
        assert_eq!(b.sample, i);
        assert_eq!((b.exit_stage, b.prediction, b.flops), (single.exit_stage, single.prediction, single.flops));
        assert_eq!(b.confidence.to_bits(), single.confidence.to_bits());
        stages[b.exit_stage - 1] += 1;
    }
    assert!(stages.iter().filter(|&&c| c > 0).count() >= 2, "{stages:?}");
}

#[test]
fn batch_order_does_not_matter() {
    let m = fused_model(AdapterKind::ParallelLowRank, 5);
    let images = random_images(m.config(), 24, 6);
    let policy = ExitPolicy::shared(0.36, 4).unwrap();
    let recs = infer_batch(&m, &images, &policy).unwrap();
    let perm: Vec<usize> = (0..24).map(|i| (i * 7) % 24).collect();
    let per = images.dims()[1..].iter().product::<usize>();
    let mut data = Vec::new();
    for &p in &perm {
        data.extend_from_slice(&images.data()[p * per..(p + 1) * per]);
    }
    let shuffled = Tensor::new(images.dims().to_vec(), data).unwrap();
    let recs2 = infer_batch(&m, &shuffled, &policy).unwrap();
    for (j, &p) in perm.iter().enumerate() {
        assert_eq!(recs2[j].exit_stage, recs[p].exit_stage);
        assert_eq!(recs2[j].prediction, recs[p].prediction);
        assert_eq!(recs2[j].confidence.to_bits(), recs[p].confidence.to_bits());
    }
    let one = infer_batch(&m, &row(&images, 3).reshaped(&[1, 8, 8, 3]).unwrap(), &policy).unwrap();
    assert_eq!(one[0].exit_stage, recs[3].exit_stage);
    assert_eq!(one[0].sample, 0);
}

#[test]
fn block_counter_reflects_early_exit() {
    let m = fused_model(AdapterKind::ParallelLowRank, 6);
    let images = random_images(m.config(), 40, 7);
    let policy = ExitPolicy::shared(0.37, 4).unwrap();
    m.reset_block_evals();
    let recs = infer_batch(&m, &images, &policy).unwrap();
    let t = m.config().interval as u64;
    let expected: u64 = recs.iter().map(|r| r.exit_stage as u64 * t).sum();
    assert_eq!(m.block_evals(), expected);
    assert!(expected < 40 * 4 * t, "no sample left early");
}

#[test]
fn crafted_stage_two_exit_skips_later_blocks() {
    let m = fused_model(AdapterKind::SequentialRep, 7);
    let images = random_images(m.config(), 64, 8);
    let confs = stage_confidences(&m, &images).unwrap();
    let (i, c) = confs
        .iter()
        .enumerate()
        .find(|(_, c)| c[1] > c[0] + 1e-6)
        .expect("some sample is more confident at stage 2");
    let tau = 0.5 * (c[0] + c[1]);
    let policy = ExitPolicy::shared(tau, 4).unwrap();
    m.reset_block_evals();
    let r = infer_sample(&m, &row(&images, i), &policy).unwrap();
    assert_eq!(r.exit_stage, 2);
    assert_eq!(m.block_evals(), 2 * m.config().interval as u64);
    assert_eq!(r.flops, FlopsModel::for_model(&m).cost(2));
    assert_eq!(r.confidence.to_bits(), c[1].to_bits());
}

#[test]
fn flops_fall_as_threshold_falls() {
    let m = fused_model(AdapterKind::ParallelLowRank, 8);
    let images = random_images(m.config(), 80, 9);
    let mut prev = f64::INFINITY;
    for k in 0..=24 {
        let tau = 1.01 * (24 - k) as f64 / 24.0;
        let recs = infer_batch(&m, &images, &ExitPolicy::shared(tau, 4).unwrap()).unwrap();
        let mean = average_flops(&recs, 4).unwrap().mean;
        assert!(mean <= prev, "tau {tau}: {mean} > {prev}");
        prev = mean;
    }
    assert_eq!(prev, FlopsModel::for_model(&m).cost(1) as f64);
}

/// Independent count: every matrix product listed with its (m, k, n) shape.
fn flops_oracle(c: &ModelConfig) -> (u64, u64, Vec<u64>) {
    let n = (c.image_size / c.patch_size).pow(2) + 1;
    let d = c.embed_dim;
    let dh = d / c.heads;
    let mm = |m: usize, k: usize, p: usize| 2 * (m * k * p) as u64;
    let embed = mm(n - 1, c.patch_size * c.patch_size * c.channels, d);
    let mut block = mm(n, d, 3 * d);
    for _ in 0..c.heads {
        block += mm(n, dh, n) + mm(n, n, dh);
    }
    block += mm(n, d, d) + mm(n, d, c.mlp_hidden) + mm(n, c.mlp_hidden, d);
    let heads = c
        .head_hidden
        .iter()
        .map(|&h| if h == 0 { mm(1, d, c.num_classes) } else { mm(1, d, h) + mm(1, h, c.num_classes) })
        .collect();
    (embed, block, heads)
}

#[test]
fn analytic_flops_match_enumerated_products() {
    for cfg in [ModelConfig::default(), tiny_config(AdapterKind::ParallelLowRank)] {
        let f = FlopsModel::backbone(&cfg);
        let (embed, block, heads) = flops_oracle(&cfg);
        assert_eq!((f.embed, f.block, f.heads.clone()), (embed, block, heads));
        let s = cfg.stages();
        let full = embed + (cfg.depth as u64) * block + f.heads.iter().sum::<u64>();
        assert_eq!(f.full(), full);
        for i in 1..s {
            assert!(f.cost(i) < f.cost(i + 1));
        }
    }
    let unfused = FlopsModel::unfused(&tiny_config(AdapterKind::ParallelLowRank));
    assert!(unfused.block > FlopsModel::backbone(&tiny_config(AdapterKind::ParallelLowRank)).block);
}

#[test]
fn flops_fractions_on_uniform_blocks() {
    let f = FlopsModel { embed: 0, block: 1000, heads: vec![0; 4], interval: 1 };
    let rec = |stage: usize| ExitRecord { sample: 0, exit_stage: stage, confidence: 1.0, prediction: 0, flops: f.cost(stage) };
    let quarter = average_flops(&[rec(1), rec(1)], 4).unwrap();
    assert_eq!(quarter.mean / f.full() as f64, 0.25);
    let three_quarters = average_flops(&[rec(2), rec(4), rec(3), rec(3)], 4).unwrap();
    assert_eq!(three_quarters.mean / f.full() as f64, 0.75);
    assert_eq!(three_quarters.histogram, vec![0, 1, 2, 1]);
    let bad = ExitRecord { exit_stage: 5, ..rec(4) };
    assert!(average_flops(&[bad], 4).is_err());
    assert!(average_flops(&[], 4).is_err());
}

#[test]
fn unfused_models_are_refused() {
    let m = DynAdapterModel::init(tiny_config(AdapterKind::ParallelLowRank), 1).unwrap();
    let images = random_images(m.config(), 2, 1);
    let policy = ExitPolicy::full_depth(4);
    assert!(matches!(infer_batch(&m, &images, &policy), Err(Error::Contract(_))));
    assert!(matches!(infer_sample(&m, &row(&images, 0), &policy), Err(Error::Contract(_))));
    assert!(matches!(calibrate_threshold(&m, &images, 0.5), Err(Error::Contract(_))));
    let fused = m.fuse().unwrap();
    assert!(matches!(infer_batch(&fused, &images, &ExitPolicy::full_depth(3)), Err(Error::Config(_))));
}

#[test]
fn calibration_edges() {
    let m = fused_model(AdapterKind::ParallelLowRank, 9);
    let images = random_images(m.config(), 30, 2);
    let full = calibrate_threshold(&m, &images, 1.0).unwrap();
    assert!(full.tau.is_infinite() && full.achieved == 1.0 && full.within_tolerance);
    let floor = FlopsModel::for_model(&m).fraction(1);
    let low = calibrate_threshold(&m, &images, floor * 0.5).unwrap();
    assert!(low.unreachable && low.tau == 0.0 && !low.within_tolerance);
    assert_eq!(low.achieved, floor);
    assert!(Tensor::new(vec![0, 8, 8, 3], vec![]).is_err());
    for bad in [0.0, -0.2, 1.5, f64::NAN] {
        assert!(matches!(calibrate_threshold(&m, &images, bad), Err(Error::Config(_))));
    }
}

#[test]
fn calibration_hits_budget_on_trained_model() {
    let cfg = tiny_config(AdapterKind::ParallelLowRank);
    let data = tiny_dataset(&cfg, 300, 3);
    let (train, val) = data.train_val();
    let mut model = DynAdapterModel::init(cfg, 0).unwrap();
    let schedule = TrainSchedule { total_epochs: 6, batch_size: 16, alpha: 0.1, ..TrainSchedule::for_stages(4) };
    fit(&mut model, &train, &schedule, |_| {}).unwrap();
    let fused = model.fuse().unwrap();
    let (images, _) = val.all();
    for budget in [0.5, 0.7] {
        let c = calibrate_threshold(&fused, &images, budget).unwrap();
        let recs = infer_batch(&fused, &images, &c.policy).unwrap();
        let measured = average_flops(&recs, 4).unwrap().mean / FlopsModel::for_model(&fused).full() as f64;
        assert!((measured - c.achieved).abs() < 1e-12);
        assert!((measured - budget).abs() <= BUDGET_TOLERANCE * budget, "{budget}: {measured}");
    }
}

#[test]
fn policy_text_round_trip() {
    for p in [
        ExitPolicy::shared(0.75, 4).unwrap(),
        ExitPolicy::full_depth(4),
        ExitPolicy::per_stage(vec![0.9, 0.8, 0.7, 0.0]).unwrap(),
    ] {
        assert_eq!(ExitPolicy::parse(&p.render(), 4).unwrap(), p);
    }
    assert!(ExitPolicy::parse("tau=0.5\ntau=0.6", 4).is_err());
    assert!(ExitPolicy::parse("thresholds=0.5,0.5", 4).is_err());
    assert!(ExitPolicy::parse("# nothing", 4).is_err());
}

proptest! {
    #[test]
    fn confidence_is_a_probability(v in prop::collection::vec(-30.0f32..30.0, 1..12)) {
        let c = confidence(&v).unwrap();
        prop_assert!(c >= 1.0 / v.len() as f64 - 1e-12 && c <= 1.0);
        let shifted: Vec<f32> = v.iter().map(|x| x + 5.0).collect();
        prop_assert!((confidence(&shifted).unwrap() - c).abs() < 1e-5);
    }

    #[test]
    fn exit_stage_is_first_confident(confs in prop::collection::vec(0.0f64..1.0, 4), tau in 0.0f64..1.0) {
        let p = ExitPolicy::shared(tau, 4).unwrap();
        let s = p.exit_stage(&confs);
        prop_assert!(confs[..s - 1].iter().all(|&c| c < tau));
        prop_assert!(s == 4 || confs[s - 1] >= tau);
    }
}
