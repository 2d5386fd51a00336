use latis::data::Dataset;
use latis::layers::model_info;
use latis::training::{
    adam_step, fit, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Checkpoint, StepLog,
    TrainConfig, Trainer, CHECKPOINT_VERSION,
};
use latis::{Error, Image, ModelConfig, Parameters, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 8,
        num_lgfb: 1,
        csconv_kernels: (3, 3),
        shuffle_groups: 2,
        qk_depth: 4,
        value_depth: 4,
        heads: 2,
        kv_heads: 1,
        lambda_conv_r: 5,
        cbam_reduction: 4,
        cbam_spatial_kernel: 3,
        ..ModelConfig::default()
    }
}

fn dataset(seed: u64) -> Dataset {
    let images = (0..3)
        .map(|i| {
            let img = Image::from_fn(32, 40, |y, x| {
                let t = (x as f32 * 0.4 + y as f32 * (0.2 + 0.1 * i as f32)).sin();
                0.5 + 0.3 * t
            });
            (format!("img{i}"), img)
        })
        .collect();
    Dataset::from_images(images, 2, Some(16), seed).unwrap()
}

fn train_cfg(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig { epochs, steps_per_epoch: steps, batch: 2, seed: 3, ..TrainConfig::default() }
}

fn logs(t: &mut Trainer, ds: &Dataset) -> Vec<String> {
    let mut out = Vec::new();
    t.run(ds, |l: &StepLog| out.push(l.to_string()), |_| {}).unwrap();
    out
}

fn set_grads(p: &mut Parameters<f64>, value: f64) {
    for (_, param) in p.iter_mut() {
        param.grad = Some(Tensor::full(param.value.shape().to_vec(), value));
    }
}

#[test]
fn adam_matches_scalar_oracle_over_two_steps() {
    let cfg = AdamConfig::default();
    let mut params = Parameters::<f64>::init(&tiny(), 1).unwrap();
    let start = params.clone();
    let mut state = AdamState::new(&params, cfg).unwrap();
    for _ in 0..2 {
        set_grads(&mut params, 1.0);
        adam_step(&mut params, &mut state).unwrap();
    }
    assert_eq!(state.t, 2);

    // hand-rolled scalar Adam with g = 1
    let (mut m, mut v, mut delta) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = cfg.beta1 * m + (1.0 - cfg.beta1);
        v = cfg.beta2 * v + (1.0 - cfg.beta2);
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        delta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    for ((_, a), (_, b)) in params.iter().zip(start.iter()) {
        for (x, x0) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - (x0 + delta)).abs() < 1e-12);
        }
    }
}

#[test]
fn first_update_is_minus_learning_rate() {
    let mut params = Parameters::<f64>::zeros(&tiny()).unwrap();
    let mut state = AdamState::new(&params, AdamConfig::default()).unwrap();
    set_grads(&mut params, 1.0);
    adam_step(&mut params, &mut state).unwrap();
    let want = -1e-4 / (1.0 + 1e-8);
    for (_, p) in params.iter() {
        assert!(p.value.data().iter().all(|&x| (x - want).abs() < 1e-15));
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut params = Parameters::<f64>::init(&tiny(), 2).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&params, AdamConfig::default()).unwrap();
    set_grads(&mut params, 0.0);
    adam_step(&mut params, &mut state).unwrap();
    for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn missing_gradient_is_usage_error_without_side_effects() {
    let mut params = Parameters::<f64>::init(&tiny(), 2).unwrap();
    let mut state = AdamState::new(&params, AdamConfig::default()).unwrap();
    set_grads(&mut params, 1.0);
    let last = params.names().last().unwrap().to_string();
    params.get_mut(&last).unwrap().grad = None;
    let before = params.clone();
    match adam_step(&mut params, &mut state) {
        Err(Error::Usage(msg)) => assert!(msg.contains(&last), "{msg}"),
        other => panic!("expected usage error, got {other:?}"),
    }
    assert_eq!(state.t, 0);
    for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn optimizer_slots_match_counted_parameters() {
    for cfg in [tiny(), ModelConfig::default(), ModelConfig::for_scale(4)] {
        let t = Trainer::new(cfg.clone(), train_cfg(1, 1)).unwrap();
        let counted = model_info(&cfg, (8, 8)).unwrap().params;
        assert_eq!(t.adam().slots(), counted);
        assert_eq!(t.params().count(), counted);
        assert!(t.adam().m.keys().eq(t.params().names()));
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let ds = dataset(5);
    let a = logs(&mut Trainer::new(tiny(), train_cfg(2, 3)).unwrap(), &ds);
    let b = logs(&mut Trainer::new(tiny(), train_cfg(2, 3)).unwrap(), &ds);
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let c = logs(&mut Trainer::new(tiny(), TrainConfig { seed: 4, ..train_cfg(2, 3) }).unwrap(), &ds);
    assert_ne!(a, c);
}

#[test]
fn histogram_term_is_logged_for_five_epochs_only() {
    let ds = dataset(1);
    let lines = logs(&mut Trainer::new(tiny(), train_cfg(7, 1)).unwrap(), &ds);
    for (epoch, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert_eq!(fields[0], epoch.to_string());
        if epoch < 5 {
            assert!(fields[3].parse::<f32>().is_ok(), "{line}");
        } else {
            assert_eq!(fields[3], "skipped", "{line}");
        }
        assert_eq!(fields[4], "0.0001");
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let ds = dataset(2);
    let full = logs(&mut Trainer::new(tiny(), train_cfg(4, 2)).unwrap(), &ds);

    let mut first = Trainer::new(tiny(), train_cfg(2, 2)).unwrap();
    let head = logs(&mut first, &ds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.latc");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let mut second = Trainer::resume(load_checkpoint(&path).unwrap(), train_cfg(4, 2)).unwrap();
    assert_eq!((second.epoch(), second.step()), (2, 4));
    let tail = logs(&mut second, &ds);
    assert_eq!([head, tail].concat(), full);
}

#[test]
fn resume_rejects_other_seed() {
    let t = Trainer::new(tiny(), train_cfg(1, 1)).unwrap();
    let cfg = TrainConfig { seed: 99, ..train_cfg(1, 1) };
    assert!(matches!(Trainer::resume(t.checkpoint(), cfg), Err(Error::Config(_))));
}

#[test]
fn fit_returns_final_checkpoint_and_epoch_means() {
    let ds = dataset(3);
    let mut steps = 0;
    let (ckpt, summaries) = fit(&ds, &tiny(), &train_cfg(2, 3), |_| steps += 1).unwrap();
    assert_eq!(steps, 6);
    assert_eq!((ckpt.epoch, ckpt.step, ckpt.seed), (2, 6, 3));
    assert_eq!(ckpt.adam.as_ref().unwrap().t, 6);
    assert_eq!(summaries.len(), 2);
    assert!(summaries.iter().all(|s| s.mean_loss.is_finite() && s.mean_loss_p.is_some()));
}

fn trained_checkpoint() -> Checkpoint {
    let mut t = Trainer::new(tiny(), train_cfg(1, 2)).unwrap();
    logs(&mut t, &dataset(4));
    t.checkpoint()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ckpt = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.latc");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for ((_, a), (_, b)) in back.params.iter().zip(ckpt.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
}

#[test]
fn checkpoint_header_corruption_is_rejected() {
    let bytes = trained_checkpoint().to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));

    // flip one character of the config JSON so the stored hash no longer matches
    let mut bad = bytes.clone();
    let pos = bytes.windows(8).position(|w| w == b"channels").unwrap();
    bad[pos] = b'C';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("hash")));

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("trailing")));
}

#[test]
fn truncation_names_the_tensor() {
    let ckpt = trained_checkpoint();
    let bytes = ckpt.to_bytes();
    let name = b"lgfb0.gfe.pos_conv.weight";
    let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
    let cut = &bytes[..at + name.len() + 40];
    match Checkpoint::from_bytes(cut) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("lgfb0.gfe.pos_conv.weight"), "{m}"),
        other => panic!("expected checkpoint error, got {other:?}"),
    }
}

#[test]
fn mismatched_config_is_explicit_error() {
    let ckpt = trained_checkpoint();
    assert!(ckpt.check_config(&tiny()).is_ok());
    let other = ModelConfig { use_cbam: false, ..tiny() };
    assert!(matches!(ckpt.check_config(&other), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_loss_aborts_with_the_offending_tensor() {
    let ds = dataset(6);
    let mut params = Parameters::<f32>::init(&tiny(), 3).unwrap();
    params.get_mut("lgfb0.gfe.to_v.weight").unwrap().value.data_mut()[0] = f32::NAN;
    let mut t = Trainer::with_params(tiny(), train_cfg(1, 1), params).unwrap();
    let before = t.params().clone();
    match t.train_step(&ds) {
        Err(Error::Diverged { step: 0, tensor }) => {
            assert!(tensor.starts_with("lgfb0.gfe.to_v.weight"), "{tensor}")
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(t.step(), 0);
    assert!(t.params().iter().zip(before.iter()).all(|((_, a), (_, b))| {
        a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }));
}

#[test]
fn exploding_learning_rate_is_reported() {
    let ds = dataset(7);
    let cfg = TrainConfig { adam: AdamConfig { lr: 1e30, ..AdamConfig::default() }, ..train_cfg(1, 50) };
    let mut t = Trainer::new(tiny(), cfg).unwrap();
    let err = (0..50).find_map(|_| t.train_step(&ds).err()).expect("training should diverge");
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}
