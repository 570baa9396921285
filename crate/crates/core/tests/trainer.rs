use cgans_core::datagen::{make_dataset, Dataset};
use cgans_core::diffcore::Tape;
use cgans_core::nn::{Ctx, ParamStore};
use cgans_core::objective::{loss_d_age, AgeTerm, Phase};
use cgans_core::trainer::{
    checkpoint_name, encode_checkpoint, load_checkpoint, load_checkpoint_as, sample_batches, save_checkpoint, train,
    train_iteration, ModelBundle, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
use cgans_core::{AgeGroup, Error, NUM_GROUPS};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        image_size: 16,
        epochs: 1,
        g_base_channels: 8,
        g_body_blocks: 1,
        d_base_channels: 8,
        d_stack_layers: 3,
        ..TrainConfig::default()
    }
}

fn small_dataset(seed: u64) -> Dataset {
    make_dataset(10, 4, 16, seed).unwrap()
}

fn bits(store: &ParamStore) -> Vec<u32> {
    store.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn schedule_alternates_and_isolates_the_idle_discriminator() {
    let cfg = small_config(1);
    let ds = small_dataset(1);
    let mut b = ModelBundle::new(&cfg).unwrap();
    for it in 0..100u64 {
        let batches = sample_batches(&ds, it, &cfg).unwrap();
        let (da, dt) = (bits(&b.d_age.params), bits(&b.d_trans.params));
        let r = train_iteration(&mut b, &batches, &cfg).unwrap();
        match Phase::of_iteration(it) {
            Phase::A => {
                assert_eq!(bits(&b.d_trans.params), dt, "D_t moved in phase A at {it}");
                assert_ne!(bits(&b.d_age.params), da);
                assert_eq!(r.d_trans_loss, 0.0);
            }
            Phase::T => {
                assert_eq!(bits(&b.d_age.params), da, "D_a moved in phase T at {it}");
                assert_ne!(bits(&b.d_trans.params), dt);
                assert_eq!(r.d_age_loss, 0.0);
            }
        }
    }
    assert_eq!(b.iteration, 100);
    assert_eq!(b.adam_da.steps(), 50);
    assert_eq!(b.adam_dt.steps(), 50);
    assert_eq!(b.adam_g.steps(), 100);
}

#[test]
fn batches_are_deterministic_and_well_formed() {
    let cfg = small_config(2);
    let ds = small_dataset(2);
    let a = sample_batches(&ds, 17, &cfg).unwrap();
    assert_eq!(a, sample_batches(&ds, 17, &cfg).unwrap());
    assert_ne!(a, sample_batches(&ds, 18, &cfg).unwrap());
    assert_eq!(a.age.images.dims(), &[8, 3, 16, 16]);
    let p = &a.pairs;
    for i in 0..8 {
        assert!(p.older_groups[i].index() <= 5);
        assert!(p.younger_groups[i].index() >= 1);
        assert!(p.groups[i].succ().is_some());
    }
}

#[test]
fn target_groups_are_uniform() {
    let cfg = small_config(3);
    let ds = small_dataset(3);
    let mut hist = [0usize; NUM_GROUPS];
    for it in 0..875 {
        for g in sample_batches(&ds, it, &cfg).unwrap().age.targets {
            hist[g.index()] += 1;
        }
    }
    assert_eq!(hist.iter().sum::<usize>(), 7000);
    for (g, &n) in hist.iter().enumerate() {
        assert!((900..=1100).contains(&n), "group {g}: {n}");
    }
}

#[test]
fn empty_pools_are_data_errors() {
    let ds = small_dataset(4);
    let cfg = small_config(4);
    let no_pairs = Dataset::from_parts(16, Vec::new(), ds.singles.clone()).unwrap();
    assert!(matches!(sample_batches(&no_pairs, 0, &cfg), Err(Error::Data(_))));
    let no_singles = Dataset::from_parts(16, ds.sequences.clone(), Vec::new()).unwrap();
    assert!(matches!(sample_batches(&no_singles, 0, &cfg), Err(Error::Data(_))));
}

#[test]
fn fresh_models_start_near_the_ignorant_fixed_point() {
    let cfg = TrainConfig::default();
    let ds = make_dataset(8, 7, 32, 5).unwrap();
    let mut b = ModelBundle::new(&cfg).unwrap();
    let r = train_iteration(&mut b, &sample_batches(&ds, 0, &cfg).unwrap(), &cfg).unwrap();
    assert!((1.0..=1.8).contains(&r.d_age_loss), "d_age {}", r.d_age_loss);
}

fn d_age_value(b: &ModelBundle, real: &cgans_core::Tensor, groups: &[AgeGroup], fake: &cgans_core::Tensor, targets: &[AgeGroup]) -> f32 {
    let mut tape = Tape::new();
    let bound = b.d_age.params.bind(&mut tape, true);
    let term = AgeTerm {
        real: tape.constant(real.clone()),
        real_groups: groups.to_vec(),
        fake: tape.constant(fake.clone()),
        targets: targets.to_vec(),
    };
    let mut ctx = Ctx::new(&mut tape, &b.d_age.params, &bound, true);
    let loss = loss_d_age(&mut ctx, &b.d_age, &term).unwrap();
    tape.scalar(loss)
}

#[test]
fn a_discriminator_step_lowers_its_loss() {
    let ds = small_dataset(6);
    let mut improved = 0;
    for seed in 0..20 {
        let cfg = small_config(100 + seed);
        let mut b = ModelBundle::new(&cfg).unwrap();
        let batches = sample_batches(&ds, 0, &cfg).unwrap();
        let a = &batches.age;
        let fake = b.generator.generate(&a.images, &a.targets).unwrap();
        let before = d_age_value(&b, &a.images, &a.groups, &fake, &a.targets);
        train_iteration(&mut b, &batches, &cfg).unwrap();
        let after = d_age_value(&b, &a.images, &a.groups, &fake, &a.targets);
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 18, "{improved}/20 steps lowered the loss");
}

#[test]
fn same_seed_reproduces_the_loss_trajectory() {
    let cfg = small_config(7);
    let ds = small_dataset(7);
    let run = || train(&ds, &cfg, None, |_| {}).unwrap().reports;
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.g_total - y.g_total).abs() <= 1e-6 && (x.d_age_loss - y.d_age_loss).abs() <= 1e-6);
    }
}

#[test]
fn training_writes_checkpoints_and_metrics() {
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 7,
        ..small_config(8)
    };
    let ds = small_dataset(8);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, &cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(out.reports.len(), 15);
    let mut files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".cgan"))
        .collect();
    files.sort();
    assert_eq!(files, vec![checkpoint_name(7), checkpoint_name(14), FINAL_CHECKPOINT.to_string()]);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 16);

    let restored = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(restored.iteration, 15);
    assert_eq!(encode_checkpoint(&restored).unwrap(), encode_checkpoint(&out.bundle).unwrap());
    assert_eq!(restored.generator.params, out.bundle.generator.params);
    assert_eq!(restored.adam_dt, out.bundle.adam_dt);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let b = ModelBundle::new(&small_config(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cgan");
    save_checkpoint(&b, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 100, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("magic")));
}

#[test]
fn loading_into_a_larger_run_names_the_mismatched_tensor() {
    let small = TrainConfig::default();
    let b = ModelBundle::new(&small).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s32.cgan");
    save_checkpoint(&b, &path).unwrap();
    let large = TrainConfig {
        image_size: 64,
        ..small
    };
    match load_checkpoint_as(&path, &large) {
        Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "da.head.weight"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
}
