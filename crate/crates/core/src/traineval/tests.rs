use proptest::prelude::*;

use super::*;
use crate::dataio::{gen_synthetic, SyntheticSceneSpec};
use crate::pyfu::{Preset, PyFuConfig};

#[test]
fn poly_schedule_examples() {
    assert_eq!(poly_lr(0, 1000, 0.07), 0.07);
    assert_eq!(poly_lr(1000, 1000, 0.07), 0.0);
    // 0.07 · (1 − 2^-0.9) at 30 significant digits
    let expected = 0.032_487_928_811_229_739;
    assert!((poly_lr(500, 1000, 0.07) - expected).abs() < 1e-12);
    assert_eq!(poly_lr(2000, 1000, 0.07), 0.0);
}

#[test]
fn class_weight_examples() {
    let w = class_weights(&[50, 50]).unwrap();
    assert!((w[0] - 2f64.ln()).abs() < 1e-15 && w[0] == w[1]);
    let w = class_weights(&[90, 10]).unwrap();
    assert!((w[0] - 0.105_360_515_657_826_3).abs() < 1e-12);
    assert!((w[1] - 2.302_585_092_994_046).abs() < 1e-12);
    // absent classes take the rarest present weight
    let w = class_weights(&[90, 0, 10]).unwrap();
    assert_eq!(w[1], w[2]);
    assert!(class_weights(&[0, 0]).is_err());
    assert!(class_weights(&[]).is_err());
    assert!(class_weights(&[0, 7]).is_err());
}

#[test]
fn iou_examples() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
    let r = iou_miou(&cm).unwrap();
    assert_eq!(r.iou, vec![Some(0.5), Some(4.0 / 7.0)]);
    assert!((r.miou - 0.535_714_285_714_285_7).abs() < 1e-12);

    let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 9]]).unwrap();
    assert_eq!(iou_miou(&diag).unwrap().miou, 1.0);
    assert_eq!(diag.accuracy(), 1.0);

    let absent = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![2, 4, 0], vec![0, 0, 0]]).unwrap();
    let r = iou_miou(&absent).unwrap();
    assert_eq!(r.iou[2], None);
    assert!((r.miou - 0.535_714_285_714_285_7).abs() < 1e-12);
    let r = iou_miou_with(&absent, true).unwrap();
    assert!((r.miou - (0.5 + 4.0 / 7.0) / 3.0).abs() < 1e-12);

    assert!(iou_miou(&ConfusionMatrix::new(4)).is_err());
    assert!(ConfusionMatrix::from_rows(&[vec![1, 2]]).is_err());
}

#[test]
fn confusion_update_examples() {
    let mut cm = ConfusionMatrix::new(3);
    confusion_update(&mut cm, &[0, 1, 2, 2], &[0, 1, 2, 2], None).unwrap();
    assert_eq!(cm.counts, vec![1, 0, 0, 0, 1, 0, 0, 0, 2]);
    // ignored targets and masked elements do not count
    confusion_update(&mut cm, &[1, 1, 0], &[IGNORE_LABEL, 0, 0], Some(&[true, false, true])).unwrap();
    assert_eq!(cm.get(0, 0), 2);
    assert_eq!(cm.total(), 5);
    assert!(matches!(
        confusion_update(&mut cm, &[3], &[0], None),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
    assert!(confusion_update(&mut cm, &[0, 1], &[0], None).is_err());
    let mut other = ConfusionMatrix::new(3);
    confusion_update(&mut other, &[2], &[1], None).unwrap();
    cm.merge(&other).unwrap();
    assert_eq!(cm.get(1, 2), 1);
    assert!(cm.merge(&ConfusionMatrix::new(2)).is_err());
}

proptest! {
    #[test]
    fn poly_is_strictly_decreasing(i_max in 2usize..5000, base in 1e-4f64..1.0) {
        let mut prev = poly_lr(0, i_max, base);
        for i in 1..=i_max.min(400) {
            let lr = poly_lr(i, i_max, base);
            prop_assert!(lr < prev);
            prev = lr;
        }
        prop_assert!(poly_lr(i_max - 1, i_max, base) > poly_lr(i_max, i_max, base));
    }

    #[test]
    fn weights_are_inverse_ordered(hist in prop::collection::vec(1u64..100_000, 2..20)) {
        let w = class_weights(&hist).unwrap();
        for a in 0..hist.len() {
            prop_assert!(w[a] > 0.0);
            for b in 0..hist.len() {
                prop_assert_eq!(hist[a] < hist[b], w[a] > w[b]);
            }
        }
        let mut rev = hist.clone();
        rev.reverse();
        let mut wr = class_weights(&rev).unwrap();
        wr.reverse();
        prop_assert_eq!(wr, w);
    }

    #[test]
    fn confusion_is_permutation_invariant_and_additive(
        pairs in prop::collection::vec((0u8..5, 0u8..5, any::<bool>()), 0..300),
        split in 0usize..300,
    ) {
        let p: Vec<u8> = pairs.iter().map(|x| x.0).collect();
        let t: Vec<u8> = pairs.iter().map(|x| x.1).collect();
        let m: Vec<bool> = pairs.iter().map(|x| x.2).collect();
        let mut whole = ConfusionMatrix::new(5);
        confusion_update(&mut whole, &p, &t, Some(&m)).unwrap();
        prop_assert_eq!(whole.total(), m.iter().filter(|x| **x).count() as u64);

        let mut rev = ConfusionMatrix::new(5);
        let (mut pr, mut tr, mut mr) = (p.clone(), t.clone(), m.clone());
        pr.reverse();
        tr.reverse();
        mr.reverse();
        confusion_update(&mut rev, &pr, &tr, Some(&mr)).unwrap();
        prop_assert_eq!(&rev, &whole);

        let k = split.min(p.len());
        let mut a = ConfusionMatrix::new(5);
        confusion_update(&mut a, &p[..k], &t[..k], Some(&m[..k])).unwrap();
        let mut b = ConfusionMatrix::new(5);
        confusion_update(&mut b, &p[k..], &t[k..], Some(&m[k..])).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }

    /// Mutating predictions or targets outside the mask never changes the matrix.
    #[test]
    fn masked_elements_never_count(
        pairs in prop::collection::vec((0u8..4, 0u8..4, any::<bool>()), 1..200),
        noise in prop::collection::vec((0u8..4, 0u8..4), 200),
    ) {
        let p: Vec<u8> = pairs.iter().map(|x| x.0).collect();
        let t: Vec<u8> = pairs.iter().map(|x| x.1).collect();
        let m: Vec<bool> = pairs.iter().map(|x| x.2).collect();
        let mut base = ConfusionMatrix::new(4);
        confusion_update(&mut base, &p, &t, Some(&m)).unwrap();
        let (mut p2, mut t2) = (p.clone(), t.clone());
        for i in 0..p.len() {
            if !m[i] {
                p2[i] = noise[i].0;
                t2[i] = noise[i].1;
            }
        }
        let mut mutated = ConfusionMatrix::new(4);
        confusion_update(&mut mutated, &p2, &t2, Some(&m)).unwrap();
        prop_assert_eq!(mutated, base);
    }
}

fn desk_samples(n: usize, seed: u64) -> Vec<Sample> {
    let spec = SyntheticSceneSpec {
        seed,
        frames: n,
        ..SyntheticSceneSpec::default()
    };
    gen_synthetic(&spec)
        .unwrap()
        .iter()
        .map(|f| f.to_sample(&spec.sensor).unwrap().0)
        .collect()
}

fn micro_like() -> PyFuConfig {
    // desk geometry with thin layers so loop tests stay fast
    PyFuConfig {
        channels: 8,
        lidar_widths: [4, 4, 8, 8, 8, 8],
        camera_widths: [4, 4, 8, 8, 8, 8],
        expansion: 2,
        ..PyFuConfig::desk()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let samples = desk_samples(2, 0);
    let (m, mut store) = PyFu::build::<f32>(micro_like().with_preset(Preset::PfbPfh), 0).unwrap();
    let before: Vec<_> = store.params().iter().map(|p| p.tensor.clone()).collect();
    let mut t = Trainer::new(&m, &mut store, &samples, &TrainConfig::default()).unwrap();
    let loss = t.step(&mut store, 0, 0.0).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (p, b) in store.params().iter().zip(&before) {
        assert_eq!(&p.tensor, b, "{}", p.name);
    }
}

#[test]
fn training_is_deterministic_and_logs_records() {
    let samples = desk_samples(3, 1);
    let cfg = TrainConfig {
        iterations: 4,
        base_lr: 0.02,
        batch_size: 2,
        crop: Some((32, 128)),
        eval_every: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let (m, mut store) = PyFu::build::<f32>(micro_like().with_preset(Preset::Lf), 3).unwrap();
        let mut log = Vec::new();
        let report = train_loop(&m, &mut store, &samples, &samples[..1], &cfg, &mut log).unwrap();
        (String::from_utf8(log).unwrap(), report, crate::pyfu::Checkpoint::from_store(&store).to_bytes())
    };
    let (a, ra, ca) = run();
    let (b, _, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let recs: Vec<LogRecord> = a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert_eq!(recs[0].lr, 0.02);
    assert!(recs[1].miou.is_some() && recs[0].miou.is_none() && recs[3].iou.is_some());
    assert_eq!(ra.losses.len(), 4);
    assert_eq!(ra.class_weights.len(), 6);
}

#[test]
fn crops_without_overlap_are_skipped() {
    let samples = desk_samples(2, 2);
    // 32-column crops miss the 64-column overlap most of the time
    let cfg = TrainConfig {
        iterations: 3,
        crop: Some((32, 32)),
        hflip_prob: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let (m, mut store) = PyFu::build::<f32>(micro_like().with_preset(Preset::Lf), 0).unwrap();
    let r = train_loop(&m, &mut store, &samples, &[], &cfg, &mut std::io::sink()).unwrap();
    assert!(r.skipped > 0);
    assert!(r.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn nan_loss_aborts_with_the_step() {
    let samples = desk_samples(1, 3);
    let (m, mut store) = PyFu::build::<f32>(micro_like().with_preset(Preset::Baseline), 0).unwrap();
    let id = store.find_param("lidar.classifier.bias").unwrap();
    store.param_mut(id).tensor.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        iterations: 2,
        ..TrainConfig::default()
    };
    let err = train_loop(&m, &mut store, &samples, &[], &cfg, &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn evaluation_is_restricted_to_the_overlap() {
    let samples = desk_samples(2, 5);
    let (m, store) = PyFu::build::<f32>(micro_like(), 0).unwrap();
    let cm = evaluate(&m, &store, &samples, Head::Lidar).unwrap();
    let expected: usize = samples
        .iter()
        .map(|s| overlap_mask(s).iter().zip(&s.range.labels).filter(|(m, l)| **m && **l != IGNORE_LABEL).count())
        .sum();
    assert_eq!(cm.total() as usize, expected);

    // relabelling every pixel outside the overlap changes nothing
    let mut mutated = samples.clone();
    for s in &mut mutated {
        let mask = overlap_mask(s);
        for (l, m) in s.range.labels.iter_mut().zip(mask) {
            if !m && *l != IGNORE_LABEL {
                *l = (*l + 1) % 6;
            }
        }
    }
    assert_eq!(evaluate(&m, &store, &mutated, Head::Lidar).unwrap(), cm);

    let (mf, sf) = PyFu::build::<f32>(micro_like().with_preset(Preset::Pfb), 0).unwrap();
    assert_eq!(evaluate(&mf, &sf, &samples, Head::Fused).unwrap().total(), cm.total());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { iterations: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { hflip_prob: 1.5, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let (m, mut store) = PyFu::build::<f32>(micro_like(), 0).unwrap();
    assert!(Trainer::new(&m, &mut store, &[], &TrainConfig::default()).is_err());
}
