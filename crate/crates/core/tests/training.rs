use iqa_core::archive::Archive;
use iqa_core::autodiff::Graph;
use iqa_core::data::{ImageSet, MosSample, TripletSample};
use iqa_core::dpis::{Dpis, DpisConfig};
use iqa_core::evaluation::{compare_loaded, CompareOptions};
use iqa_core::fixture::{generate, Fixture, FixtureConfig};
use iqa_core::head::MappingMode;
use iqa_core::metric::{load_learned, LearnedMetric};
use iqa_core::swiniqa::{SwinIqa, SwinIqaConfig};
use iqa_core::training::*;

fn fixture(references: usize, triplets: usize, size: usize, seed: u64) -> Fixture {
    generate(
        &FixtureConfig {
            references,
            triplets,
            size,
            seed,
        },
        "/fx",
    )
    .unwrap()
}

fn tiny(mode: MappingMode) -> SwinIqa {
    SwinIqa::new(SwinIqaConfig::tiny_test(mode)).unwrap()
}

fn quick(crop: usize) -> TrainConfig {
    TrainConfig {
        crop,
        pretrain_lr: 2e-3,
        joint_lr: 1e-3,
        judge_lr: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_overfits_a_small_set() {
    let fx = fixture(2, 0, 32, 1);
    let samples: Vec<MosSample> = fx.mos.iter().step_by(2).cloned().collect();
    assert_eq!(samples.len(), 20);
    let mut model = tiny(MappingMode::Diff);
    let config = TrainConfig {
        pretrain_epochs: 100,
        pretrain_batch: 4,
        ..quick(32)
    };
    let before = mean_reg_loss(&model, &samples, &fx.images, 32, 1).unwrap();
    let log = pretrain(&mut model, &samples, &fx.images, &config, &mut Silent).unwrap();
    let steps: usize = log.epochs.iter().map(|e| e.steps).sum();
    assert_eq!(steps, 500);
    let after = mean_reg_loss(&model, &samples, &fx.images, 32, 1).unwrap();
    assert!(after < 0.01, "loss {before} -> {after}");
}

#[test]
fn one_epoch_does_not_increase_loss() {
    let fx = fixture(2, 0, 32, 2);
    let mut model = tiny(MappingMode::Diff);
    let config = TrainConfig {
        pretrain_epochs: 1,
        pretrain_batch: 8,
        pretrain_lr: 1e-3,
        ..quick(32)
    };
    let before = mean_reg_loss(&model, &fx.mos, &fx.images, 32, 1).unwrap();
    pretrain(&mut model, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
    let after = mean_reg_loss(&model, &fx.mos, &fx.images, 32, 1).unwrap();
    assert!(after <= before, "{before} -> {after}");
}

#[test]
fn checkpoint_round_trip_keeps_validation_loss() {
    let fx = fixture(1, 0, 32, 3);
    let mut model = tiny(MappingMode::CrossAttn);
    let config = TrainConfig {
        pretrain_epochs: 1,
        pretrain_batch: 5,
        ..quick(32)
    };
    pretrain(&mut model, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.iqaw");
    checkpoint(&model, &config).save(&path).unwrap();
    let archive = Archive::load(&path).unwrap();
    assert_eq!(archive.meta["train"]["pretrain_batch"], 5);
    let loaded = load_learned(&archive).unwrap();
    let a = mean_reg_loss(&model, &fx.mos, &fx.images, 32, 1).unwrap();
    let b = mean_reg_loss(loaded.as_ref(), &fx.mos, &fx.images, 32, 1).unwrap();
    assert_eq!(a, b);
}

fn accuracy_on(model: &SwinIqa, triplets: &[TripletSample], images: &ImageSet) -> f64 {
    let refs: Vec<&TripletSample> = triplets.iter().collect();
    let c = compare_loaded(&[model], &refs, images, &CompareOptions::default(), 0).unwrap();
    c.report.rows[0].accuracy.unwrap()
}

#[test]
fn joint_training_fits_separable_triplets() {
    let fx = fixture(2, 20, 32, 4);
    let mut model = tiny(MappingMode::Diff);
    // the judge can learn either orientation; MOS pretraining fixes it
    let config = TrainConfig {
        pretrain_epochs: 40,
        pretrain_batch: 8,
        joint_epochs: 100,
        joint_batch: 4,
        ..quick(32)
    };
    pretrain(&mut model, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
    let log = train_joint(&mut model, &fx.triplets, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
    assert!(log.epochs.iter().map(|e| e.steps).sum::<usize>() <= 1000);
    let acc = accuracy_on(&model, &fx.triplets, &fx.images);
    assert!(acc >= 0.95, "training accuracy {acc}");
    assert!(model.store().id("judge.fc3.weight").is_some());
}

#[derive(Default)]
struct Recorder {
    triplet_crops: Vec<[(usize, usize); 3]>,
    mos_crops: usize,
    steps: Vec<StepLoss>,
}

impl TrainObserver for Recorder {
    fn on_triplet_crop(&mut self, _: usize, offsets: [(usize, usize); 3]) {
        self.triplet_crops.push(offsets);
    }
    fn on_mos_crop(&mut self, _: usize, _: [(usize, usize); 2]) {
        self.mos_crops += 1;
    }
    fn on_step(&mut self, _: Stage, _: usize, loss: &StepLoss) {
        self.steps.push(*loss);
    }
}

#[test]
fn zero_lambda_gives_pure_bce_and_crops_align() {
    let fx = fixture(2, 12, 48, 5);
    let mut model = tiny(MappingMode::Diff);
    let config = TrainConfig {
        joint_epochs: 1,
        joint_batch: 4,
        lambda_reg: 0.0,
        ..quick(32)
    };
    let mut rec = Recorder::default();
    train_joint(&mut model, &fx.triplets, &fx.mos, &fx.images, &config, &mut rec).unwrap();
    assert_eq!(rec.steps.len(), 3);
    for s in &rec.steps {
        assert_eq!(s.total, s.bce.unwrap());
        assert!(s.reg.is_none());
    }
    assert_eq!(rec.mos_crops, 0);
    assert_eq!(rec.triplet_crops.len(), 12);
    assert!(rec.triplet_crops.iter().all(|o| o[0] == o[1] && o[1] == o[2]));
    // 48-pixel images and 32-pixel crops leave room for distinct offsets
    assert!(rec.triplet_crops.iter().any(|o| o[0] != rec.triplet_crops[0][0]));

    let mut rec = Recorder::default();
    let config = TrainConfig {
        lambda_reg: 5.0,
        ..config
    };
    train_joint(&mut tiny(MappingMode::Diff), &fx.triplets, &fx.mos, &fx.images, &config, &mut rec).unwrap();
    assert_eq!(rec.mos_crops, 12);
    for s in &rec.steps {
        assert_eq!(s.total, total_loss(s.bce.unwrap(), s.reg.unwrap(), 5.0));
    }
}

#[test]
fn single_sample_gradient_step_reduces_loss() {
    let fx = fixture(1, 0, 32, 6);
    let model = tiny(MappingMode::Diff);
    let sample = &fx.mos[7];
    let r = fx.images.get(&sample.ref_path).unwrap();
    let d = fx.images.get(&sample.dist_path).unwrap();
    let loss_with = |m: &SwinIqa| reg_loss(m.score(r, d).unwrap(), sample.s);
    let mut g = Graph::new();
    let dv = model.distances_on(&mut g, r, &[d.as_ref()]).unwrap()[0];
    let diff = g.add_scalar(dv, -sample.s);
    let loss = g.square(diff);
    let grads: Vec<(iqa_core::params::ParamId, Vec<f64>)> =
        g.backward(loss).params().into_iter().map(|(id, v)| (id, v.to_vec())).collect();
    let base = loss_with(&model);
    assert!(base > 0.0);
    let mut reduced = Vec::new();
    for lr in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3] {
        let mut m = SwinIqa::from_archive(&model.to_archive()).unwrap();
        for (id, gv) in &grads {
            let v: Vec<f64> = m.store().values(*id).iter().zip(gv).map(|(p, g)| p - lr * g).collect();
            m.store_mut().set(*id, v);
        }
        reduced.push(loss_with(&m) < base);
    }
    // once the step is small enough every smaller step also helps
    let first = reduced.iter().position(|&r| r).expect("some step size reduces the loss");
    assert!(reduced[first..].iter().all(|&r| r), "{reduced:?}");
}

fn run_twice(workers: [usize; 2]) -> [(Vec<u8>, String); 2] {
    let fx = fixture(2, 10, 32, 8);
    workers.map(|w| {
        let mut model = tiny(MappingMode::CrossAttn);
        let config = TrainConfig {
            pretrain_epochs: 2,
            pretrain_batch: 8,
            joint_epochs: 2,
            joint_batch: 4,
            workers: w,
            ..quick(32)
        };
        let mut log = pretrain(&mut model, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
        let joint = train_joint(&mut model, &fx.triplets, &fx.mos, &fx.images, &config, &mut Silent).unwrap();
        log.epochs.extend(joint.epochs);
        // the embedded config echoes the worker count; the weights must not depend on it
        let echo = TrainConfig { workers: 1, ..config };
        (checkpoint(&model, &echo).to_bytes(), log.to_jsonl())
    })
}

#[test]
fn fixed_seed_runs_are_identical() {
    let [a, b] = run_twice([1, 1]);
    assert_eq!(a, b);
    let [c, _] = run_twice([3, 3]);
    assert_eq!(a, c, "result depends on worker count");
}

#[test]
fn dpis_trains_on_judgments_alone() {
    let fx = fixture(1, 8, 32, 9);
    let mut model = Dpis::new(DpisConfig::tiny_test()).unwrap();
    let config = TrainConfig {
        joint_epochs: 2,
        joint_batch: 4,
        ..quick(32)
    };
    let log = train_joint(&mut model, &fx.triplets, &[], &fx.images, &config, &mut Silent).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.mean_reg.is_none() && e.mean_loss.is_finite()));
    let s = model.weight_sum();
    assert!((s - 1.0).abs() < 1e-6, "{s}");
    assert!(model.similarity_distance(fx.images.get(&fx.triplets[0].ref_path).unwrap(), fx.images.get(&fx.triplets[0].ref_path).unwrap()).unwrap().abs() < 1e-9);
}

#[test]
fn empty_datasets_are_config_errors() {
    let fx = fixture(1, 0, 32, 10);
    let mut model = tiny(MappingMode::Diff);
    assert!(matches!(
        pretrain(&mut model, &[], &fx.images, &quick(32), &mut Silent),
        Err(iqa_core::Error::Config(_))
    ));
    assert!(matches!(
        train_joint(&mut model, &[], &fx.mos, &fx.images, &quick(32), &mut Silent),
        Err(iqa_core::Error::Config(_))
    ));
}
