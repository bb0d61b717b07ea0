use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::update_running_stats;
use crate::numcore::gradcheck::{check_gradients, GradCheckOptions};
use crate::numcore::{Sgd, SgdConfig};

/// Sample whose camera mapping is valid exactly on `rows × cols`.
fn sample(cfg: &PyFuConfig, rows: (usize, usize), cols: (usize, usize), seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.sensor.height, cfg.sensor.width);
    let (hc, wc) = (cfg.camera_height, cfg.camera_width);
    let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.9)).collect();
    let mut channels = vec![0f32; 5 * h * w];
    for c in 0..5 {
        for i in 0..h * w {
            if mask[i] {
                channels[c * h * w + i] = rng.random_range(-10.0..10.0);
            }
        }
    }
    let labels = (0..h * w)
        .map(|i| if mask[i] { rng.random_range(0..cfg.classes as u8) } else { crate::IGNORE_LABEL })
        .collect();
    let coords = (0..h * w)
        .map(|i| {
            let (v, u) = (i / w, i % w);
            let inside = v >= rows.0 && v < rows.1 && u >= cols.0 && u < cols.1;
            inside.then(|| (rng.random_range(0.0..wc as f64), rng.random_range(0.0..hc as f64)))
        })
        .collect();
    let image = Tensor::from_fn(Shape::new(1, 3, hc, wc), |_, _, _, _| rng.random::<f32>());
    Sample {
        range: RangeImage {
            height: h,
            width: w,
            channels,
            mask,
            labels,
        },
        mapping: CamRVMapping {
            rv_height: h,
            rv_width: w,
            cam_height: hc,
            cam_width: wc,
            coords,
            overlap: Some(Overlap { rows, cols }),
        },
        image,
        image_labels: None,
    }
}

fn desk_sample(seed: u64) -> Sample {
    sample(&PyFuConfig::desk(), (0, 32), (96, 160), seed)
}

#[test]
fn lidar_backbone_geometry() {
    let cfg = PyFuConfig::desk();
    let (m, store) = PyFu::build::<f32>(cfg.clone(), 0).unwrap();
    let s = desk_sample(1);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, true);
    let x = ctx.g.input(m.range_input(&s.range));
    let o = m.lidar.forward(&mut ctx, x, true, true).unwrap();
    let taps: Vec<(usize, usize)> = o.taps.iter().map(|t| (g.shape(*t).h, g.shape(*t).w)).collect();
    assert_eq!(taps, vec![(16, 32), (8, 16), (4, 8)]);
    assert_eq!(g.shape(o.decoder.unwrap()), Shape::new(1, 32, 16, 32));
    let logits = o.logits.unwrap();
    assert_eq!(g.shape(logits), Shape::new(1, 6, 32, 256));
    let p = softmax_channels(g.value(logits));
    for i in 0..32 * 256 {
        let s: f32 = (0..6).map(|c| p.data()[c * 32 * 256 + i]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }

    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, true);
    let x = ctx.g.input(m.range_input(&s.range));
    let taps = m.lidar.encoder.forward(&mut ctx, x).unwrap();
    let p = m.lidar.fpn.forward(&mut ctx, [taps[1], taps[2], taps[3]]).unwrap();
    assert!(p.iter().all(|v| g.shape(*v).c == 32));
}

#[test]
fn camera_backbone_geometry() {
    let cfg = PyFuConfig::desk();
    let (m, store) = PyFu::build::<f32>(cfg, 0).unwrap();
    let s = desk_sample(1);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, true);
    let x = ctx.g.input(m.image_input(&s.image));
    let o = m.camera.forward(&mut ctx, x, true, true).unwrap();
    let taps: Vec<(usize, usize)> = o.taps.iter().map(|t| (g.shape(*t).h, g.shape(*t).w)).collect();
    assert_eq!(taps, vec![(12, 24), (6, 12), (3, 6)]);
    assert_eq!(g.shape(o.decoder.unwrap()), Shape::new(1, 32, 24, 48));
    assert_eq!(g.shape(o.logits.unwrap()), Shape::new(1, 6, 96, 192));
}

#[test]
fn input_divisibility_is_checked() {
    let mut cfg = PyFuConfig::desk();
    cfg.sensor.width = 250;
    assert!(PyFu::build::<f32>(cfg, 0).is_err());
    let mut cfg = PyFuConfig::desk();
    cfg.camera_height = 100;
    assert!(PyFu::build::<f32>(cfg, 0).is_err());

    let (m, store) = PyFu::build::<f32>(PyFuConfig::desk(), 0).unwrap();
    let mut s = desk_sample(0);
    s.crop(0..32, 0..250);
    let mut g = Graph::new();
    assert!(m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[Head::Lidar]).is_err());
}

#[test]
fn fusion_module_shape_and_default_strategy() {
    assert_eq!(FusionConfig::default().strategy, FusionStrategy::BottleneckBasic);
    let cfg = PyFuConfig {
        channels: 16,
        ..PyFuConfig::desk()
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fm = FusionModule::new(&mut Builder::new(&mut store, &mut rng), 16, 10, true, &cfg).unwrap();
    // overlap 24 rows × 128 columns → 12 × 32 at stride (2, 4)
    let s = sample(&cfg, (0, 24), (0, 128), 3);
    let mut g = Graph::new();
    let lidar = g.input(Tensor::randn(Shape::new(1, 16, 6, 16), 1.0, &mut rng));
    let cam = g.input(Tensor::randn(Shape::new(1, 10, 24, 48), 1.0, &mut rng));
    let lidar = RvFeature {
        var: lidar,
        stride: (4, 8),
        cropped: true,
    };
    let y = fm
        .forward(&mut Ctx::new(&mut g, &store, true), lidar, CameraSide::Image(cam), &s.mapping, (2, 4))
        .unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 16, 12, 32));
    assert_eq!(g.counter(FUSION_COUNTER), 1);
}

#[test]
fn zeroed_alignment_cuts_the_camera_branch() {
    let cfg = PyFuConfig::desk();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fm = FusionModule::new(&mut Builder::new(&mut store, &mut rng), 8, 6, true, &cfg).unwrap();
    for p in store.params_mut().iter_mut().filter(|p| p.name.starts_with("align.")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let s = desk_sample(2);
    let lidar_t = Tensor::randn(Shape::new(1, 8, 16, 32), 1.0, &mut rng);
    let run = |cam_t: Tensor<f32>| {
        let mut g = Graph::new();
        let l = g.input(lidar_t.clone());
        let c = g.input(cam_t);
        let lidar = RvFeature {
            var: l,
            stride: (2, 8),
            cropped: false,
        };
        let y = fm
            .forward(&mut Ctx::new(&mut g, &store, true), lidar, CameraSide::Image(c), &s.mapping, (1, 4))
            .unwrap();
        g.value(y).clone()
    };
    let a = run(Tensor::zeros(Shape::new(1, 6, 12, 24)));
    let b = run(Tensor::randn(Shape::new(1, 6, 12, 24), 3.0, &mut rng));
    assert_eq!(a, b);
}

#[test]
fn pfb_targets_follow_the_octave_rule() {
    let cfg = PyFuConfig::desk().with_preset(Preset::Pfb);
    let (m, store) = PyFu::build::<f32>(cfg.clone(), 0).unwrap();
    let s = desk_sample(4);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, true);
    let lx = ctx.g.input(m.range_input(&s.range));
    let cx = ctx.g.input(m.image_input(&s.image));
    let l = m.lidar.forward(&mut ctx, lx, false, false).unwrap();
    let c = m.camera.forward(&mut ctx, cx, false, false).unwrap();
    let o = m
        .pfb
        .as_ref()
        .unwrap()
        .forward(&mut ctx, l.taps, c.taps, &s.mapping, &cfg.fusion.targets)
        .unwrap();
    let shapes: Vec<Shape> = o.iter().map(|v| g.shape(*v)).collect();
    assert_eq!(
        shapes,
        vec![Shape::new(1, 32, 32, 16), Shape::new(1, 32, 16, 8), Shape::new(1, 32, 8, 4)]
    );
}

fn fusion_count(preset_cfg: PyFuConfig) -> Result<usize> {
    let (m, store) = PyFu::build::<f32>(preset_cfg, 0)?;
    let s = desk_sample(5);
    let mut g = Graph::new();
    let head = m.config.primary_head();
    m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[head])?;
    Ok(g.counter(FUSION_COUNTER))
}

#[test]
fn ablation_lattice() {
    let counts: Vec<usize> = Preset::ALL
        .iter()
        .map(|p| fusion_count(PyFuConfig::desk().with_preset(*p)).unwrap())
        .collect();
    assert_eq!(counts, vec![0, 1, 3, 5]);
    let mut cfg = PyFuConfig::desk().with_preset(Preset::Pfb);
    cfg.fusion.late_fusion = true;
    assert_eq!(fusion_count(cfg).unwrap(), 4);
    let mut cfg = PyFuConfig::desk().with_preset(Preset::Lf);
    cfg.fusion.pfh = true;
    assert!(matches!(PyFu::build::<f32>(cfg, 0), Err(Error::Config(_))));
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        assert_eq!(PyFuConfig::desk().with_preset(p).fusion_module_count(), [0, 1, 3, 5][p as usize]);
    }
    assert!("pfh".parse::<Preset>().is_err());
}

#[test]
fn pfh_logits_cover_the_overlap() {
    let cfg = PyFuConfig {
        sensor: SensorConfig::default(),
        channels: 8,
        ..PyFuConfig::desk()
    };
    let (m, store) = PyFu::build::<f32>(cfg.clone(), 1).unwrap();
    let s = sample(&cfg, (10, 55), (780, 1265), 6);
    let mut g = Graph::new();
    let out = m.forward(&mut Ctx::new(&mut g, &store, false), &s, &[Head::Fused]).unwrap();
    let f = out.fused.unwrap();
    assert_eq!(g.shape(f), Shape::new(1, 6, 45, 485));
    let p = softmax_channels(g.value(f));
    let n = 45 * 485;
    for i in 0..n {
        let s: f32 = (0..6).map(|c| p.data()[c * n + i]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn pfb_only_feeds_the_aggregate_to_the_classifier() {
    let (m, store) = PyFu::build::<f32>(PyFuConfig::desk().with_preset(Preset::Pfb), 0).unwrap();
    assert!(m.late_camera.is_none() && m.late_lidar.is_none());
    let s = desk_sample(7);
    let mut g = Graph::new();
    let out = m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[Head::Fused]).unwrap();
    assert_eq!(g.shape(out.fused.unwrap()), Shape::new(1, 6, 32, 64));
    assert_eq!(g.counter(FUSION_COUNTER), 3);
}

#[test]
fn late_order_is_configurable() {
    let mut cfg = PyFuConfig::desk().with_preset(Preset::PfbPfh);
    let s = desk_sample(8);
    let run = |cfg: PyFuConfig| {
        let (m, store) = PyFu::build::<f32>(cfg, 3).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[Head::Fused]).unwrap();
        g.value(out.fused.unwrap()).clone()
    };
    let a = run(cfg.clone());
    cfg.fusion.late_order = LateOrder::LidarFirst;
    let b = run(cfg);
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a, b);
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    for preset in Preset::ALL {
        for frozen in [true, false] {
            let cfg = PyFuConfig {
                freeze_lidar: frozen,
                freeze_camera: frozen,
                ..PyFuConfig::desk().with_preset(preset)
            };
            let (m, mut store) = PyFu::build::<f32>(cfg, 11).unwrap();
            let head = m.config.primary_head();
            m.configure_training(&mut store, head).unwrap();
            let s = desk_sample(9);
            let mut g = Graph::new();
            let out = m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[head]).unwrap();
            let logits = match head {
                Head::Fused => out.fused.unwrap(),
                _ => out.lidar.unwrap(),
            };
            let ov = s.mapping.overlap.unwrap();
            let targets = match head {
                Head::Fused => crate::rangeview::crop_raster(&s.range.labels, 256, &ov),
                _ => s.range.labels.clone(),
            };
            let loss = g.weighted_cross_entropy(logits, &targets, &[1.0; 6]).unwrap();
            g.backward(loss).unwrap();
            let missing = params_without_grad(&g, &store);
            assert!(missing.is_empty(), "{preset} frozen={frozen}: {missing:?}");
        }
    }
    let (m, mut store) = PyFu::build::<f32>(PyFuConfig::desk().with_preset(Preset::Baseline), 0).unwrap();
    assert!(m.configure_training(&mut store, Head::Fused).is_err());
}

#[test]
fn frozen_backbones_stay_bit_identical() {
    let cfg = PyFuConfig::desk().with_preset(Preset::PfbPfh);
    let (m, mut store) = PyFu::build::<f32>(cfg, 5).unwrap();
    m.configure_training(&mut store, Head::Fused).unwrap();
    let before: Vec<Tensor<f32>> = store.params().iter().map(|p| p.tensor.clone()).collect();
    let buffers_before: Vec<Tensor<f32>> = store.buffers().iter().map(|b| b.tensor.clone()).collect();
    let mut opt = Sgd::new(SgdConfig::default());
    for step in 0..10 {
        let s = desk_sample(step);
        let ov = s.mapping.overlap.unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut Ctx::new(&mut g, &store, true), &s, &[Head::Fused]).unwrap();
        let targets = crate::rangeview::crop_raster(&s.range.labels, 256, &ov);
        let loss = g.weighted_cross_entropy(out.fused.unwrap(), &targets, &[1.0; 6]).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        let updates = g.take_stat_updates();
        update_running_stats(&mut store, &updates, 0.1);
        opt.step(&mut store, 0.05).unwrap();
    }
    let mut fusion_changed = false;
    for (p, b) in store.params().iter().zip(&before) {
        if p.name.starts_with("lidar.") || p.name.starts_with("camera.") {
            assert_eq!(&p.tensor, b, "{}", p.name);
        } else if p.tensor != *b {
            fusion_changed = true;
        }
    }
    for (buf, b) in store.buffers().iter().zip(&buffers_before) {
        if buf.name.starts_with("lidar.") || buf.name.starts_with("camera.") {
            assert_eq!(&buf.tensor, b, "{}", buf.name);
        }
    }
    assert!(fusion_changed);
}

#[test]
fn end_to_end_gradcheck_micro() {
    let cfg = PyFuConfig::micro().with_preset(Preset::PfbPfh);
    let cfg = PyFuConfig {
        freeze_lidar: false,
        freeze_camera: false,
        ..cfg
    };
    let (m, mut store) = PyFu::build::<f64>(cfg.clone(), 2).unwrap();
    m.configure_training(&mut store, Head::Fused).unwrap();
    // non-trivial running statistics for the fixed-stat pass
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in 0..store.buffers().len() {
        let id = store.find_buffer(&store.buffers()[b].name.clone()).unwrap();
        let var = store.buffers()[b].name.ends_with("running_var");
        for v in store.buffer_mut(id).data_mut() {
            *v = if var { rng.random_range(0.5..1.5) } else { rng.random_range(-0.2..0.2) };
        }
    }
    let s = sample(&cfg, (0, 8), (8, 16), 4);
    let fwd = |g: &mut Graph<f64>, st: &ParamStore<f64>, _: &[Var]| {
        let out = m.forward(&mut Ctx::new(g, st, false), &s, &[Head::Fused])?;
        Ok(out.fused.unwrap())
    };
    let opts = GradCheckOptions {
        max_coords: 6,
        // deep chain: a finer step drowns the smallest gradients in round-off
        step: 1e-4,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(&mut store, &[], &fwd, opts).unwrap();
    assert!(report.passes(1e-3), "{}", report.summary());
    assert!(report.entries.len() > 100);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let (_, store) = PyFu::build::<f32>(PyFuConfig::micro(), 9).unwrap();
    let ck = Checkpoint::from_store(&store);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..5], b"PYFU1");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let (_, mut other) = PyFu::build::<f32>(PyFuConfig::micro(), 10).unwrap();
    assert_eq!(back.apply_to(&mut other, true).unwrap(), store.params().len() + store.buffers().len());
    for (a, b) in other.params().iter().zip(store.params()) {
        assert_eq!(a.tensor, b.tensor);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let wide = Checkpoint::from_store(&store.cast::<f64>());
    assert_eq!(Checkpoint::from_bytes(&wide.to_bytes()).unwrap().to_bytes(), wide.to_bytes());

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"PYFU2").is_err());
    let (_, mut bigger) = PyFu::build::<f32>(PyFuConfig::desk(), 0).unwrap();
    assert!(back.apply_to(&mut bigger, true).is_err());
}

#[test]
fn predict_merges_fused_and_lidar_probabilities() {
    let cfg = PyFuConfig::desk();
    let (m, store) = PyFu::build::<f32>(cfg, 0).unwrap();
    let s = desk_sample(12);
    let index_pixels: Vec<(u32, u32)> = (0..256u32).map(|u| (u, 5)).collect();
    let index = ProjectionIndex {
        height: 32,
        width: 256,
        point_pixel: index_pixels,
        in_fov: vec![true; 256],
        pixel_point: vec![None; 32 * 256],
    };
    let p = m.predict_sample(&store, s, index).unwrap();
    assert_eq!(p.point_probs.len(), 256 * 6);
    for i in 0..256 {
        let sum: f32 = p.point_row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
    assert_eq!(p.fused_pixels.iter().filter(|f| **f).count(), 32 * 64);
    assert_eq!(argmax([0.1, 0.5, 0.5, 0.2]), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fused_geometry_equals_overlap(v0 in 0usize..6, dv in 1usize..3, u0 in 0usize..28, du in 1usize..4, seed in 0u64..100) {
        let cfg = PyFuConfig::micro().with_preset(Preset::PfbPfh);
        let rows = (v0, (v0 + dv).min(8));
        let cols = (u0, (u0 + du).min(32));
        let (m, store) = PyFu::build::<f32>(cfg.clone(), seed).unwrap();
        let s = sample(&cfg, rows, cols, seed);
        let mut g = Graph::new();
        let out = m.forward(&mut Ctx::new(&mut g, &store, false), &s, &[Head::Fused]);
        match out {
            Ok(o) => prop_assert_eq!(g.shape(o.fused.unwrap()), Shape::new(1, 3, rows.1 - rows.0, cols.1 - cols.0)),
            // tiny overlaps can collapse the pyramid; that must be reported, not mis-shaped
            Err(e) => prop_assert!(matches!(e, Error::ShapeMismatch { .. } | Error::EmptyCrop { .. }), "{e}"),
        }
    }
}
