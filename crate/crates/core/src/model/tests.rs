use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autodiff::{graph_objective, finite_difference_check, GradCheckConfig, Graph, Mode, PointTarget};
use crate::error::ContainerError;
use crate::geometry::{compute_canonical_shape, CanonicalShapeConfig, Point, SimilarityTransform};
use crate::imaging::{upscale_2x, GrayImage};
use crate::synthetic::{generate_faces, template_shape, SyntheticConfig};

fn canonical() -> Shape {
    compute_canonical_shape(&[template_shape()], &CanonicalShapeConfig::default()).unwrap()
}

fn small_model(stages: usize, seed: u64) -> DanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DanModel::new(canonical(), StageArch::reduced(16), stages, &mut rng).unwrap()
}

/// Gives every fc2 a random, small weight so updates are non-zero.
fn randomize_fc2(model: &mut DanModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, scale).unwrap();
    for s in &mut model.stages {
        for v in s.fc2.weight.data_mut().iter_mut().chain(s.fc2.bias.data_mut()) {
            *v = n.sample(&mut rng) as f32;
        }
    }
}

fn test_image(seed: u64) -> GrayImage {
    generate_faces(&SyntheticConfig::default(), 1, seed).remove(0).image
}

#[test]
fn table_rows_for_full_arch() {
    // (name, in, out, kernel (h, w, d, stride)) per layer.
    let expect: [(&str, [usize; 3], [usize; 3], Option<[usize; 4]>); 14] = [
        ("conv1a", [112, 112, 1], [112, 112, 64], Some([3, 3, 1, 1])),
        ("conv1b", [112, 112, 64], [112, 112, 64], Some([3, 3, 64, 1])),
        ("pool1", [112, 112, 64], [56, 56, 64], Some([2, 2, 1, 2])),
        ("conv2a", [56, 56, 64], [56, 56, 128], Some([3, 3, 64, 1])),
        ("conv2b", [56, 56, 128], [56, 56, 128], Some([3, 3, 128, 1])),
        ("pool2", [56, 56, 128], [28, 28, 128], Some([2, 2, 1, 2])),
        ("conv3a", [28, 28, 128], [28, 28, 256], Some([3, 3, 128, 1])),
        ("conv3b", [28, 28, 256], [28, 28, 256], Some([3, 3, 256, 1])),
        ("pool3", [28, 28, 256], [14, 14, 256], Some([2, 2, 1, 2])),
        ("conv4a", [14, 14, 256], [14, 14, 512], Some([3, 3, 256, 1])),
        ("conv4b", [14, 14, 512], [14, 14, 512], Some([3, 3, 512, 1])),
        ("pool4", [14, 14, 512], [7, 7, 512], Some([2, 2, 1, 2])),
        ("fc1", [7, 7, 512], [1, 1, 256], None),
        ("fc2", [1, 1, 256], [1, 1, 136], None),
    ];
    let rows = StageArch::full().layer_rows(1);
    assert_eq!(rows.len(), 14);
    for (row, (name, i, o, k)) in rows.iter().zip(expect) {
        assert_eq!(row.name, name);
        assert_eq!(row.shape_in, i, "{name}");
        assert_eq!(row.shape_out, o, "{name}");
        assert_eq!(row.kernel.map(|k| [k.height, k.width, k.depth, k.stride]), k, "{name}");
    }
}

fn run_layers(stage: &StageParams, n: usize, feature: bool) -> Vec<Vec<usize>> {
    let mut g = Graph::<f32>::new();
    let params = register_params(&mut g, stage);
    let planes = if feature { 2 } else { 1 };
    let x = g.input(Tensor::full(&[n, planes, 112, 112], 0.5));
    let f = if feature {
        FeatureInput::FromFc1(Tensor::full(&[n, stage.arch.fc1], 0.1))
    } else {
        FeatureInput::None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sg = build_stage(&mut g, stage, &params, x, f, Mode::Infer, 0.0, &mut rng).unwrap();
    sg.layers.iter().map(|&v| g.value(v).shape().to_vec()).collect()
}

fn row_extents(row: &LayerRow, n: usize) -> Vec<usize> {
    let [h, w, c] = row.shape_out;
    if row.kernel.is_some() {
        vec![n, c, h, w]
    } else {
        vec![n, c]
    }
}

#[test]
fn forward_pass_reproduces_rows_for_any_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (index, n) in [(0, 1), (1, 3)] {
        let arch = StageArch::reduced(8);
        let stage = StageParams::init(arch, index, &mut rng);
        let got = run_layers(&stage, n, index > 0);
        let rows = arch.layer_rows(StageArch::input_channels(index));
        assert_eq!(got.len(), rows.len());
        for (g, r) in got.iter().zip(&rows) {
            assert_eq!(g, &row_extents(r, n), "{}", r.name);
        }
    }
}

#[test]
fn parameter_shapes_follow_the_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = StageArch::reduced(4);
    let s = StageParams::init(arch, 1, &mut rng);
    let rows = arch.layer_rows(3);
    let convs: Vec<_> = rows.iter().filter(|r| r.name.starts_with("conv")).collect();
    for (c, r) in s.convs.iter().zip(convs) {
        let k = r.kernel.unwrap();
        assert_eq!(c.kernel.shape(), &[r.shape_out[2], k.depth, k.height, k.width]);
    }
    assert_eq!(s.fc1.weight.shape(), &[256, 7 * 7 * arch.widths[3]]);
    assert_eq!(s.fc2.weight.shape(), &[136, 256]);
    assert_eq!(s.feature.as_ref().unwrap().weight.shape(), &[3136, 256]);
    assert!(StageParams::init(arch, 0, &mut rng).feature.is_none());
}

#[test]
fn zero_fc2_gives_zero_update_of_length_136() {
    let model = small_model(2, 3);
    let img = GrayImage::from_fn(112, 112, |x, y| ((x * 7 + y * 13) % 17) as f64 / 17.0);
    let zeros = GrayImage::zeros(112, 112);
    let out = stage_forward(&model.stages[0], &img, Some(&zeros), Some(&zeros), Mode::Infer).unwrap();
    assert_eq!(out.delta.len(), 136);
    assert!(out.delta.iter().all(|&d| d == 0.0));
    assert_eq!(out.fc1.len(), 256);
    let out = stage_forward(&model.stages[1], &img, Some(&img), Some(&img), Mode::Infer).unwrap();
    assert!(out.delta.iter().all(|&d| d == 0.0));
}

#[test]
fn stage_forward_is_repeatable_and_validates_inputs() {
    let mut model = small_model(2, 4);
    randomize_fc2(&mut model, 5, 0.1);
    let img = GrayImage::from_fn(112, 112, |x, y| (x as f64 * 0.1).sin() + (y as f64 * 0.05).cos());
    let a = stage_forward(&model.stages[1], &img, Some(&img), Some(&img), Mode::Infer).unwrap();
    let b = stage_forward(&model.stages[1], &img, Some(&img), Some(&img), Mode::Infer).unwrap();
    assert_eq!(a, b);
    assert!(a.delta.iter().any(|&d| d != 0.0));

    let small = GrayImage::zeros(100, 112);
    assert!(stage_forward(&model.stages[0], &small, None, None, Mode::Infer).is_err());
    assert!(stage_forward(&model.stages[1], &img, Some(&small), Some(&img), Mode::Infer).is_err());
    assert!(stage_forward(&model.stages[1], &img, None, Some(&img), Mode::Infer).is_err());
    assert!(stage_forward(&model.stages[0], &img, Some(&img), None, Mode::Infer).is_err());
    assert!(stage_forward(&model.stages[0], &img, None, None, Mode::Train).is_err());
}

#[test]
fn connection_at_the_canonical_shape_is_the_identity() {
    let model = small_model(2, 6);
    let img = GrayImage::from_fn(112, 112, |x, y| (x * y) as f64 / 5000.0);
    let fc1 = vec![0.25f32; 256];
    let c = connection_forward(&model, 1, &img, &model.canonical, Some(&fc1)).unwrap();
    assert_eq!(c.transform, SimilarityTransform::IDENTITY);
    assert_eq!(c.warped, img);
    assert_eq!(c.base, model.canonical);
}

#[test]
fn heatmap_peaks_sit_on_transformed_landmarks() {
    let model = small_model(2, 7);
    let img = GrayImage::filled(160, 140, 0.3);
    let s = SimilarityTransform::from_scale_rotation(1.3, 0.2, 12.0, -4.0).apply(&model.canonical);
    let c = connection_forward(&model, 1, &img, &s, Some(&[0.0; 256])).unwrap();
    let h = c.heatmap.unwrap();
    for p in c.base.points() {
        let (x, y) = (p.x.round(), p.y.round());
        if x >= 0.0 && y >= 0.0 && x < 112.0 && y < 112.0 {
            let v = h.get(x as usize, y as usize);
            // Rounding moves at most 0.5 px per axis.
            assert!(v >= 1.0 / (1.0 + 0.5f64.hypot(0.5)) - 1e-12, "{v} at {p:?}");
        }
    }
    assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn zero_activations_give_the_upscaled_bias_response() {
    let mut model = small_model(2, 8);
    let layer = model.stages[1].feature.as_mut().unwrap();
    for (i, b) in layer.bias.data_mut().iter_mut().enumerate() {
        *b = ((i % 37) as f32 - 18.0) / 10.0;
    }
    let bias: Vec<f64> = layer.bias.data().iter().map(|&b| (b as f64).max(0.0)).collect();
    let expect = upscale_2x(&GrayImage::new(56, 56, bias).unwrap()).unwrap();
    let img = GrayImage::filled(112, 112, 1.0);
    let c = connection_forward(&model, 1, &img, &model.canonical, Some(&[0.0; 256])).unwrap();
    let f = c.feature.unwrap();
    for (a, b) in f.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn connection_rejects_degenerate_shapes() {
    let model = small_model(1, 9);
    let img = GrayImage::filled(112, 112, 0.0);
    let flat = Shape::new(vec![Point::new(3.0, 3.0); 68]).unwrap();
    assert!(connection_forward(&model, 0, &img, &flat, None).is_err());
    let model2 = small_model(2, 9);
    assert!(connection_forward(&model2, 1, &img, &model2.canonical, None).is_err());
}

fn perturbed(s: &Shape, seed: u64) -> Shape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 2.0).unwrap();
    let t = SimilarityTransform::from_scale_rotation(1.2, 0.15, 10.0, 5.0);
    t.apply(s).map(|p| Point::new(p.x + n.sample(&mut rng), p.y + n.sample(&mut rng)))
}

#[test]
fn zero_updates_return_the_input_shape() {
    let model = small_model(3, 10);
    let img = test_image(1);
    for seed in 0..5 {
        let init = perturbed(&model.canonical, seed);
        let out = dan_forward(&model, &img, &init).unwrap();
        assert_eq!(out.len(), 3);
        for s in &out {
            for (a, b) in s.points().iter().zip(init.points()) {
                assert!(a.distance(*b) < 1e-9);
            }
        }
    }
}

#[test]
fn single_stage_adds_the_update_in_the_canonical_frame() {
    let mut model = small_model(1, 11);
    randomize_fc2(&mut model, 12, 0.5);
    model.stages[0].fc2.weight.data_mut().fill(0.0);
    let img = test_image(2);
    let out = dan_forward(&model, &img, &model.canonical).unwrap();
    let bias = model.stages[0].fc2.bias.data();
    for (i, (p, q)) in out[0].points().iter().zip(model.canonical.points()).enumerate() {
        assert!((p.x - q.x - bias[2 * i] as f64).abs() < 1e-9);
        assert!((p.y - q.y - bias[2 * i + 1] as f64).abs() < 1e-9);
    }

    // Away from the canonical pose the update is applied before mapping back.
    let t = SimilarityTransform::from_scale_rotation(0.8, -0.3, 20.0, 9.0);
    let init = t.apply(&model.canonical);
    let out = dan_forward(&model, &img, &init).unwrap();
    let moved: Vec<f64> = model.canonical.to_interleaved().iter().zip(bias).map(|(c, &b)| c + b as f64).collect();
    let expect = t.apply(&Shape::from_interleaved(&moved).unwrap());
    for (a, b) in out[0].points().iter().zip(expect.points()) {
        assert!(a.distance(*b) < 1e-6);
    }
}

#[test]
fn longer_models_extend_shorter_ones() {
    let mut model = small_model(3, 13);
    randomize_fc2(&mut model, 14, 0.05);
    let img = test_image(3);
    let init = perturbed(&model.canonical, 3);
    let full = dan_forward(&model, &img, &init).unwrap();
    let short = dan_forward(&model.truncated(2).unwrap(), &img, &init).unwrap();
    assert_eq!(&full[..2], &short[..]);
    assert_ne!(full[1], full[2]);
}

#[test]
fn batched_inference_matches_single_images() {
    let mut model = small_model(2, 15);
    randomize_fc2(&mut model, 16, 0.05);
    let faces = generate_faces(&SyntheticConfig::default(), 5, 4);
    let imgs: Vec<&GrayImage> = faces.iter().map(|f| &f.image).collect();
    let inits: Vec<Shape> = (0..5).map(|i| perturbed(&model.canonical, i)).collect();
    let batch = forward::dan_forward_batch(&model, &imgs, &inits).unwrap();
    for ((img, init), b) in imgs.iter().zip(&inits).zip(&batch) {
        let single = dan_forward(&model, img, init).unwrap();
        for (s, t) in single.iter().zip(b) {
            assert!(s.mean_distance(t) < 1e-4);
        }
    }
}

#[test]
fn reduced_stage_gradients_match_differences() {
    // Batch statistics over only two samples nearly saturate the fc1
    // normalization, so train mode is checked on a batch of eight.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let arch = StageArch::reduced(32);
    let mut stage = StageParams::init(arch, 1, &mut rng);
    let n = Normal::new(0.0, 0.05).unwrap();
    for v in stage.fc2.weight.data_mut() {
        *v = n.sample(&mut rng) as f32;
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    let batch = 8;
    let planes = Tensor::new(
        &[batch, 2, 112, 112],
        (0..batch * 2 * 112 * 112).map(|_| unit.sample(&mut rng)).collect(),
    )
    .unwrap();
    let fc1_prev = Tensor::new(&[batch, 256], (0..batch * 256).map(|i| ((i * 13 % 29) as f64) / 29.0).collect()).unwrap();
    let canon = canonical();
    let targets: Vec<PointTarget> = (0..batch)
        .map(|k| PointTarget {
            base: canon.to_interleaved(),
            a: 1.0 + 0.1 * k as f64,
            b: 0.05,
            tx: 1.0,
            ty: -2.0,
            target: perturbed(&canon, k as u64).to_interleaved(),
            weight: 0.02,
        })
        .collect();
    let params = stage.trainable_tensors::<f64>();
    let objective = graph_objective(|g, vars| {
        let x = g.input(planes.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sg = build_stage(g, &stage, vars, x, FeatureInput::FromFc1(fc1_prev.clone()), Mode::Train, 0.5, &mut rng)?;
        g.mean_point_distance(sg.delta, targets.clone())
    });
    let cfg = GradCheckConfig {
        probes: 2 * params.len(),
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&params, objective, &cfg, &mut rng).unwrap();
    assert!(report.passed, "max relative error {}", report.max_rel_error);
}

#[test]
fn running_statistics_move_toward_the_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut stage = StageParams::init(StageArch::reduced(32), 0, &mut rng);
    let mut g = Graph::<f32>::new();
    let params = register_params(&mut g, &stage);
    let x = g.input(Tensor::new(&[2, 1, 112, 112], (0..2 * 112 * 112).map(|i| (i % 11) as f32).collect()).unwrap());
    let sg = build_stage(&mut g, &stage, &params, x, FeatureInput::None, Mode::Train, 0.0, &mut rng).unwrap();
    let before = stage.convs[0].bn.running_mean.clone();
    sg.update_running(&g, &mut stage).unwrap();
    assert_ne!(stage.convs[0].bn.running_mean, before);
    assert_ne!(stage.fc1.bn.running_var, vec![1.0; 256]);
}

#[test]
fn container_round_trip_is_bit_exact() {
    let mut model = small_model(2, 19);
    randomize_fc2(&mut model, 20, 0.3);
    model.stages[1].convs[3].bn.running_var[0] = 1.2345678e-7;
    let bytes = write_model(&model).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let back = read_model(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(write_model(&back).unwrap(), bytes);
    let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let manifest = std::str::from_utf8(&bytes[8..8 + manifest_len]).unwrap();
    assert!(manifest.lines().any(|l| l == "stages=2"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dan");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

#[test]
fn container_errors_are_distinct() {
    let model = small_model(1, 21);
    let bytes = write_model(&model).unwrap();
    let kind = |b: &[u8]| match read_model(b) {
        Err(Error::Container(e)) => e,
        other => panic!("expected a container error, got {other:?}"),
    };
    assert!(matches!(kind(&bytes[..bytes.len() - 100]), ContainerError::Checksum));
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(matches!(kind(&flipped), ContainerError::Checksum));
    assert!(matches!(kind(b"P5\n2 2\n"), ContainerError::BadMagic));

    // A well-formed container of a future version.
    let text = std::str::from_utf8(&bytes[8..8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize]).unwrap();
    let newer = text.replacen("version=1", "version=2", 1);
    let mut v2 = b"DAN1".to_vec();
    v2.extend_from_slice(&(newer.len() as u32).to_le_bytes());
    v2.extend_from_slice(newer.as_bytes());
    v2.extend_from_slice(&bytes[8 + text.len()..bytes.len() - 8]);
    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ).checksum(&v2);
    v2.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(kind(&v2), ContainerError::Version { found: 2, expected: 1 }));

    let broken = text.replacen("fc1=256", "fc1=lots", 1);
    let mut b = b"DAN1".to_vec();
    b.extend_from_slice(&(broken.len() as u32).to_le_bytes());
    b.extend_from_slice(broken.as_bytes());
    b.extend_from_slice(&bytes[8 + text.len()..bytes.len() - 8]);
    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ).checksum(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(kind(&b), ContainerError::Malformed(_)));
}
