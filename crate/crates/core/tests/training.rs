use std::fs;
use std::path::{Path, PathBuf};

use branchgan::config::RunConfig;
use branchgan::data::{build_dataset, load_eval_split, load_labeled_split, Convention, DatasetRequest, Split, SynthParams};
use branchgan::error::Error;
use branchgan::eval::{evaluate, EvalOutputs};
use branchgan::graph::Graph;
use branchgan::losses::{d_adv_loss, LossWeights};
use branchgan::model::{Binding, Group, NetConfig};
use branchgan::train::{
    discriminator_step, latest_checkpoint, read_metrics, sample_batch, train, train_step, TrainRunOptions, TrainState,
};
use branchgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(dir: &Path, per_class: usize) -> PathBuf {
    let root = dir.join("data");
    build_dataset(&DatasetRequest {
        root: root.clone(),
        seed: 5,
        convention: Convention::Set1,
        n_train_per_class: per_class,
        n_test_per_class: 4,
        params: SynthParams {
            image_size: 32,
            ..SynthParams::default()
        },
        overwrite: false,
    })
    .unwrap();
    root
}

fn small_run(data: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.data.root = data.to_path_buf();
    run.net = NetConfig {
        num_branches: 3,
        image_size: 32,
        base_width: 4,
        disc_width: 4,
        mapping_width: 32,
        ..NetConfig::default()
    };
    run.train.batch_size = 4;
    run.train.total_iters = 6;
    run.train.log_every = 1;
    run.train.checkpoint_every = 3;
    run.train.eval_every = 3;
    run.train.sample_every = 3;
    run
}

#[test]
fn rec_only_training_reduces_reconstruction_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 8);
    let mut run = small_run(&data);
    run.loss = LossWeights::rec_only();
    run.optim.lr_gen = 1e-3;
    let cfg = run.train_config().unwrap();
    let train_set = load_labeled_split::<f32>(&data, Split::Train).unwrap();
    assert_eq!(train_set.len(), 16);
    let mut state = TrainState::<f32>::new(&cfg.net, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rec = Vec::new();
    for _ in 0..200 {
        let (x, y) = sample_batch(&mut rng, &train_set, 4).unwrap();
        rec.push(train_step(&mut state, &cfg, &x, &y).unwrap().rec);
    }
    let head: f64 = rec[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = rec[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "rec went from {head} to {tail}");
}

#[test]
fn one_discriminator_update_lowers_its_loss_on_fixed_fakes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let mut run = small_run(&data);
    run.loss.r1 = 0.0;
    run.optim.lr_disc = 1e-4;
    let cfg = run.train_config().unwrap();
    let set = load_labeled_split::<f64>(&data, Split::Train).unwrap();
    let mut state = TrainState::<f64>::new(&cfg.net, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = sample_batch(&mut rng, &set, 4).unwrap();
    // frozen toy generator: fakes are fixed noise images
    let f0 = Tensor::from_fn(&[4, 1, 32, 32], |i| ((i * 7919) % 200) as f64 / 100.0 - 1.0);
    let f1 = f0.map(|v| -v);
    let d_loss = |state: &TrainState<f64>| {
        let mut g = Graph::new();
        let b = Binding::all(&mut g, &state.models, false);
        let (xv, a, c) = (g.constant(x.clone()), g.constant(f0.clone()), g.constant(f1.clone()));
        let real = state.models.discriminate_graph(&mut g, &b, xv, &y);
        let l0 = state.models.discriminate_graph(&mut g, &b, a, &[0; 4]);
        let l1 = state.models.discriminate_graph(&mut g, &b, c, &[1; 4]);
        let l = d_adv_loss(&mut g, real, l0, l1);
        g.scalar(l)
    };
    let before = d_loss(&state);
    let gen_before = state.models.params().checksum(&[Group::Generator, Group::Mapping]);
    let (reported, r1) = discriminator_step(&mut state, &cfg, &x, &y, &f0, &f1).unwrap();
    assert_eq!(r1, 0.0);
    assert!((reported - before).abs() < 1e-12);
    let after = d_loss(&state);
    assert!(after < before, "{before} -> {after}");
    assert_eq!(state.models.params().checksum(&[Group::Generator, Group::Mapping]), gen_before);
}

#[test]
fn almost_every_parameter_receives_gradient() {
    // Adam's first step moves every parameter with a non-zero gradient by about lr,
    // so unchanged parameters are the ones that got exactly zero gradient.
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let mut run = small_run(&data);
    run.net.num_branches = 5;
    let cfg = run.train_config().unwrap();
    let set = load_labeled_split::<f64>(&data, Split::Train).unwrap();
    let mut state = TrainState::<f64>::new(&cfg.net, 4).unwrap();
    let before = state.models.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = sample_batch(&mut rng, &set, 4).unwrap();
    train_step(&mut state, &cfg, &x, &y).unwrap();
    let (mut unchanged, mut total) = (0usize, 0usize);
    for id in 0..before.params().len() {
        let (a, b) = (before.params().tensor(id), state.models.params().tensor(id));
        unchanged += a.data().iter().zip(b.data()).filter(|(p, q)| p == q).count();
        total += a.numel();
    }
    let frac = unchanged as f64 / total as f64;
    assert!(frac < 0.05, "{unchanged} of {total} parameters received no gradient");
}

#[test]
fn identical_seeds_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let run = small_run(&data);
    let a = train::<f32>(&run, &dir.path().join("a"), &TrainRunOptions::default()).unwrap();
    let b = train::<f32>(&run, &dir.path().join("b"), &TrainRunOptions::default()).unwrap();
    let ra = read_metrics(&a.metrics).unwrap();
    let rb = read_metrics(&b.metrics).unwrap();
    assert_eq!(ra.len(), 6);
    assert_eq!(ra, rb);
    assert!(ra[2].1.is_some() && ra[5].1.is_some() && ra[0].1.is_none());
    let mut other = run.clone();
    other.train.seed = 9;
    let c = train::<f32>(&other, &dir.path().join("c"), &TrainRunOptions::default()).unwrap();
    assert_ne!(read_metrics(&c.metrics).unwrap(), ra);
}

#[test]
fn run_directory_layout_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let run = small_run(&data);
    let rd = dir.path().join("run");
    let full = train::<f32>(&run, &rd, &TrainRunOptions::default()).unwrap();
    for f in ["config.resolved", "metrics.csv", "ckpt_000000.bin", "ckpt_000003.bin", "ckpt_000006.bin", "samples/iter_000003.png"] {
        assert!(rd.join(f).exists(), "missing {f}");
    }
    assert_eq!(latest_checkpoint(&rd).unwrap().unwrap(), rd.join("ckpt_000006.bin"));
    let resolved = RunConfig::load(&rd.join("config.resolved")).unwrap();
    assert_eq!(resolved, run);

    let partial = dir.path().join("partial");
    train::<f32>(&run, &partial, &TrainRunOptions { stop_at: Some(3), ..Default::default() }).unwrap();
    let resumed = train::<f32>(
        &run,
        &partial,
        &TrainRunOptions {
            resume: Some(partial.join("ckpt_000003.bin")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(fs::read(&full.metrics).unwrap(), fs::read(&resumed.metrics).unwrap());
    assert_eq!(fs::read(rd.join("ckpt_000006.bin")).unwrap(), fs::read(partial.join("ckpt_000006.bin")).unwrap());
}

#[test]
fn zero_iterations_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let mut run = small_run(&data);
    run.train.total_iters = 0;
    let rd = dir.path().join("run");
    let out = train::<f32>(&run, &rd, &TrainRunOptions::default()).unwrap();
    assert_eq!(out.state.iteration, 0);
    let ckpts: Vec<_> = fs::read_dir(&rd)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(out.final_checkpoint, rd.join("ckpt_000000.bin"));
    assert!(read_metrics(&out.metrics).unwrap().is_empty());
}

#[test]
fn checkpoint_round_trip_integrity_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let mut run = small_run(&data);
    run.net.num_branches = 5;
    let cfg = run.train_config().unwrap();
    let out = train::<f32>(&run, &dir.path().join("run"), &TrainRunOptions::default()).unwrap();
    let path = out.final_checkpoint;
    let (state, meta) = TrainState::<f32>::load(&path, Some(&cfg.net)).unwrap();
    assert_eq!(meta.iteration, 6);
    let again = dir.path().join("again.bin");
    state.save(&again, meta.train.as_ref()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let mut bytes = fs::read(&path).unwrap();
    let k = bytes.len() / 3;
    bytes[k] = bytes[k].wrapping_add(1);
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let err = TrainState::<f32>::load(&bad, None).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    let three = NetConfig { num_branches: 3, ..cfg.net.clone() };
    let err = TrainState::<f32>::load(&path, Some(&three)).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
    assert!(err.to_string().contains("num_branches"), "{err}");

    // resuming a 5-branch checkpoint in a 3-branch run
    let mut run3 = run.clone();
    run3.net.num_branches = 3;
    let err = train::<f32>(&run3, &dir.path().join("r3"), &TrainRunOptions { resume: Some(path), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)));
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let run = small_run(&data);
    let out = train::<f32>(&run, &dir.path().join("run"), &TrainRunOptions::default()).unwrap();
    let all = [Group::Generator, Group::Mapping, Group::Discriminator];
    let before = out.state.models.params().checksum(&all);
    let test = load_eval_split::<f32>(&data, Split::Test).unwrap();
    let panels = dir.path().join("panels");
    let r = evaluate(
        &out.state.models,
        &test,
        Convention::Set1,
        0,
        false,
        &EvalOutputs { panels: 2, dir: Some(panels.clone()) },
    )
    .unwrap();
    assert_eq!(out.state.models.params().checksum(&all), before);
    assert_eq!(r.images.len(), 8);
    assert!(r.psnr_mean.is_finite());
    assert!((0.0..=1.0).contains(&r.auroc_mean) && (0.0..=1.0).contains(&r.iou_mean));
    // only class-1 images carry a rectangle to localise
    assert!(r.images.iter().all(|s| s.auroc.is_some() == (s.label == 1)));
    assert!(panels.join("panel_0000.png").exists() && panels.join("panel_0001.png").exists());
    assert!(!panels.join("panel_0002.png").exists());
}

#[test]
fn mismatched_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 4);
    let mut run = small_run(&data);
    run.net.image_size = 64;
    assert!(matches!(
        train::<f32>(&run, &dir.path().join("x"), &TrainRunOptions::default()),
        Err(Error::ConfigMismatch(_))
    ));
    let mut run = small_run(&data);
    run.data.set = 2;
    assert!(matches!(
        train::<f32>(&run, &dir.path().join("y"), &TrainRunOptions::default()),
        Err(Error::ConfigMismatch(_))
    ));
}
