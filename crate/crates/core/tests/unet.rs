use chromabench::tensor::gradcheck::random_uniform;
use chromabench::tensor::{BnMode, Graph, Tensor};
use chromabench::unet::*;
use proptest::prelude::*;

fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    random_uniform(&[n, 3, h, w], 0.0, 1.0, seed).cast()
}

fn run(w: &UNetWeights, x: &Tensor<f32>, mode: BnMode) -> (Tensor<f32>, Vec<(&'static str, Vec<usize>)>) {
    let mut g = Graph::<f32>::new();
    let bound = w.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let pass = forward(&mut g, w, &bound, xv, mode).unwrap();
    (g.value(pass.output).clone(), pass.trace)
}

#[test]
fn full_size_trace_matches_architecture_table() {
    let w = UNetWeights::build(UNetConfig::full(2), 0).unwrap();
    assert_eq!(w.tensor("conv1.1.weight").unwrap().shape(), &[64, 3, 3, 3]);
    let (out, trace) = run(&w, &input(1, 256, 256, 1), BnMode::Eval);
    // (row, channels, spatial size) at H = W = 256
    let table = [
        ("conv1+pool", 64, 128),
        ("conv2+pool", 128, 64),
        ("conv3+pool", 256, 32),
        ("conv4+pool", 512, 16),
        ("conv5+up1", 512, 32),
        ("conv6+up2", 256, 64),
        ("conv7+up3", 128, 128),
        ("conv8+up4", 64, 256),
        ("conv9", 64, 256),
        ("conv10", 2, 256),
    ];
    for (row, c, s) in table {
        let shape = &trace.iter().find(|(n, _)| *n == row).unwrap_or_else(|| panic!("no {row}")).1;
        assert_eq!(shape, &[1, c, s, s], "{row}");
    }
    assert_eq!(out.shape(), &[1, 2, 256, 256]);
}

#[test]
fn desk_scale_widths_and_output() {
    let cfg = UNetConfig::desk(3);
    assert_eq!(cfg.widths(), [8, 16, 32, 64, 64]);
    let w = UNetWeights::build(cfg, 0).unwrap();
    assert_eq!(w.tensor("conv5.2.weight").unwrap().shape(), &[64, 64, 3, 3]);
    assert_eq!(w.tensor("fuse1.weight").unwrap().shape(), &[64, 128, 1, 1]);
    let (out, _) = run(&w, &input(2, 64, 64, 2), BnMode::Train);
    assert_eq!(out.shape(), &[2, 3, 64, 64]);
    assert!(out.is_finite());
}

#[test]
fn build_is_deterministic_in_seed() {
    let a = UNetWeights::build(UNetConfig::desk(2), 7).unwrap();
    let b = UNetWeights::build(UNetConfig::desk(2), 7).unwrap();
    let c = UNetWeights::build(UNetConfig::desk(2), 8).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn initialization_statistics() {
    let w = UNetWeights::build(UNetConfig::full(2), 3).unwrap();
    let t = w.tensor("conv3.1.weight").unwrap();
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let expected = (2.0f64 / (128.0 * 9.0)).sqrt();
    assert!(mean.abs() < 1e-3);
    assert!((var.sqrt() / expected - 1.0).abs() < 0.01, "{} vs {expected}", var.sqrt());
    assert!(w.tensor("conv3.1.bn.scale").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(w.tensor("conv3.1.bn.shift").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(w.tensor("fuse2.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_input_is_a_dimension_error() {
    let w = UNetWeights::build(UNetConfig::new(2, 2), 0).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = w.bind(&mut g, false);
    let x = g.constant(input(1, 40, 32, 0));
    assert!(matches!(
        forward(&mut g, &w, &bound, x, BnMode::Eval),
        Err(UNetError::Tensor(chromabench::tensor::TensorError::Dimension(_)))
    ));
}

#[test]
fn degenerate_weights_give_constant_output() {
    let cfg = UNetConfig::new(4, 2);
    let mut w = UNetWeights::build(cfg, 0).unwrap();
    let names: Vec<(String, ParamRole)> = w.specs().iter().map(|s| (s.name.clone(), s.role)).collect();
    let shift = 0.3f32;
    let tap = 0.5f32;
    for (name, role) in names {
        let t = w.tensor_mut(&name).unwrap();
        let fill = match role {
            ParamRole::ConvWeight | ParamRole::ConvBias => 0.0,
            ParamRole::BnShift => shift,
            _ => continue,
        };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    // final conv: centre tap only, so borders see the same input as the interior
    let head = w.tensor_mut("conv10.weight").unwrap();
    for (i, v) in head.data_mut().iter_mut().enumerate() {
        if i % 9 == 4 {
            *v = tap;
        }
    }
    let expected = 4.0 * tap * shift;
    for mode in [BnMode::Train, BnMode::Eval] {
        let (out, _) = run(&w, &input(2, 32, 32, 5), mode);
        for &v in out.data() {
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    let w = UNetWeights::build(UNetConfig::new(4, 3), 11).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = w.bind(&mut g, true);
    let x = g.constant(input(2, 32, 32, 12));
    let target = g.constant(input(2, 32, 32, 13));
    let pass = forward(&mut g, &w, &bound, x, BnMode::Train).unwrap();
    let d = g.sub(pass.output, target).unwrap();
    let loss = g.sum_squares(d);
    let vars: Vec<_> = bound.trainable().collect();
    let grads = g.backward(loss).unwrap();
    let names: Vec<&str> = w.trainable_names().collect();
    assert_eq!(names.len(), vars.len());
    for (name, v) in names.iter().zip(vars) {
        let grad = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.data().iter().any(|x| x.abs() > 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn train_mode_forward_is_deterministic() {
    let w = UNetWeights::build(UNetConfig::new(4, 2), 1).unwrap();
    let x = input(2, 32, 32, 9);
    let (a, _) = run(&w, &x, BnMode::Train);
    let (b, _) = run(&w, &x, BnMode::Train);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn running_stats_move_towards_batch_statistics() {
    let mut w = UNetWeights::build(UNetConfig::new(2, 2), 1).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = w.bind(&mut g, false);
    let x = g.constant(input(2, 16, 16, 3));
    let pass = forward(&mut g, &w, &bound, x, BnMode::Train).unwrap();
    assert_eq!(pass.batch_stats.len(), 18);
    let first = pass.batch_stats[0].clone();
    w.update_running_stats(&pass.batch_stats).unwrap();
    let rm = w.tensor("conv1.1.bn.running_mean").unwrap().data();
    for (r, m) in rm.iter().zip(&first.mean) {
        assert!((f64::from(*r) - 0.1 * m).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut w = UNetWeights::build(UNetConfig::desk(2), 4).unwrap();
    w.labels.insert("strategy".into(), "lab".into());
    // non-trivial running stats
    let mut g = Graph::<f32>::new();
    let bound = w.bind(&mut g, false);
    let x = g.constant(input(2, 64, 64, 6));
    let pass = forward(&mut g, &w, &bound, x, BnMode::Train).unwrap();
    w.update_running_stats(&pass.batch_stats).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cbck");
    w.save(&path).unwrap();
    let back = UNetWeights::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let x = input(1, 64, 64, 7);
    let (a, _) = run(&w, &x, BnMode::Eval);
    let (b, _) = run(&back, &x, BnMode::Eval);
    assert_eq!(a.shape(), &[1, 2, 64, 64]);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn damaged_checkpoints_fail_with_distinct_errors() {
    let w = UNetWeights::build(UNetConfig::new(2, 3), 0).unwrap();
    let good = w.to_bytes();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(UNetWeights::from_bytes(&bad), Err(UNetError::BadMagic { .. })));
    assert!(UNetWeights::from_bytes(&bad).unwrap_err().to_string().contains("bad checkpoint"));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(UNetWeights::from_bytes(&bad), Err(UNetError::UnsupportedVersion(9))));

    assert!(matches!(UNetWeights::from_bytes(&good[..good.len() - 3]), Err(UNetError::Truncated(_))));
    assert!(matches!(UNetWeights::from_bytes(&good[..2]), Err(UNetError::Truncated(_))));

    // first tensor's first dimension: after magic, version, config (4 u32 + 2 f64),
    // an empty label table, the tensor count and the first rank
    let offset = 4 + 4 + 16 + 16 + 4 + 4 + 4;
    let mut bad = good.clone();
    bad[offset] += 1;
    assert!(matches!(UNetWeights::from_bytes(&bad), Err(UNetError::ShapeMismatch(_))));

    let mut long = good.clone();
    long.push(0);
    assert!(matches!(UNetWeights::from_bytes(&long), Err(UNetError::Corrupt(_))));
}

#[test]
fn failed_load_leaves_no_partial_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cbck");
    let w = UNetWeights::build(UNetConfig::new(2, 2), 0).unwrap();
    let mut bytes = w.to_bytes();
    bytes[1] = 0;
    std::fs::write(&path, &bytes).unwrap();
    assert!(UNetWeights::load(&path).is_err());
    assert!(matches!(UNetWeights::load(&dir.path().join("missing")), Err(UNetError::Io { .. })));
}

#[test]
fn encoder_import_copies_only_the_encoder() {
    let donor = UNetWeights::build(UNetConfig::new(4, 3), 1).unwrap();
    let mut w = UNetWeights::build(UNetConfig::new(4, 2), 2).unwrap();
    let before = w.clone();
    let copied = w.import_encoder(&donor).unwrap();
    // five blocks of two layers with five tensors each
    assert_eq!(copied, 50);
    assert_eq!(w.tensor("conv3.2.weight"), donor.tensor("conv3.2.weight"));
    assert_eq!(w.tensor("conv6.1.weight"), before.tensor("conv6.1.weight"));
    assert_eq!(w.tensor("up1.weight"), before.tensor("up1.weight"));

    let wrong = UNetWeights::build(UNetConfig::new(8, 2), 1).unwrap();
    let mut w2 = before.clone();
    assert!(matches!(w2.import_encoder(&wrong), Err(UNetError::ShapeMismatch(_))));
    assert_eq!(w2, before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fully_convolutional(hm in 1usize..4, wm in 1usize..4, seed in 0u64..100) {
        let w = UNetWeights::build(UNetConfig::new(2, 2), seed).unwrap();
        let (h, wd) = (16 * hm, 16 * wm);
        let (out, _) = run(&w, &input(1, h, wd, seed), BnMode::Eval);
        prop_assert_eq!(out.shape(), &[1, 2, h, wd]);
    }
}
