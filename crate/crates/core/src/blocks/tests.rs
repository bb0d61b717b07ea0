use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::*;
use crate::numcore::gradcheck::{check_gradients, random_input, GradCheckOptions};

type B<'a> = Builder<'a, f64, ChaCha8Rng>;

fn build<X>(seed: u64, f: impl FnOnce(&mut B<'_>) -> Result<X>) -> (ParamStore<f64>, X) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut Builder::new(&mut store, &mut rng)).unwrap();
    (store, block)
}

/// Moves every affine and running statistic away from its identity value.
fn perturb_norms(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.2).unwrap();
    let u = Uniform::new(0.5, 1.5).unwrap();
    for p in store.params_mut() {
        if p.name.ends_with(".scale") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 1.0 + n.sample(&mut rng));
        } else if p.name.ends_with(".shift") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
        }
    }
    let ids: Vec<_> = store.buffers().iter().map(|b| b.name.clone()).collect();
    for name in ids {
        let id = store.find_buffer(&name).unwrap();
        let var = name.ends_with("running_var");
        for v in store.buffer_mut(id).data_mut() {
            *v = if var { u.sample(&mut rng) } else { n.sample(&mut rng) };
        }
    }
}

fn set_shift(store: &mut ParamStore<f64>, id: ParamId, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    store.param_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
}

fn zero_convs(store: &mut ParamStore<f64>) {
    for p in store.params_mut() {
        if p.name.ends_with(".weight") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn run<X>(store: &ParamStore<f64>, batch: bool, xs: &[Tensor<f64>], f: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<X>) -> (Graph<f64>, X) {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut Ctx::new(&mut g, store, batch), &vars).unwrap();
    (g, out)
}

fn gradcheck(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for batch in [true, false] {
        let fwd = |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| f(&mut Ctx::new(g, s, batch), v);
        let report = check_gradients(store, inputs, &fwd, GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-4), "batch stats {batch}: {}", report.summary());
        worst = worst.max(report.worst().map_or(0.0, |w| w.rel_error));
    }
    worst
}

fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    random_input(Shape::new(1, c, h, w), seed)
}

#[test]
fn irb_with_zero_weights_is_identity() {
    let (mut store, irb) = build(0, |b| Irb::new(b, 4, 4, (1, 1)));
    zero_convs(&mut store);
    let x = input(4, 4, 6, 1);
    for batch in [true, false] {
        let (g, y) = run(&store, batch, &[x.clone()], |c, v| irb.forward(c, v[0]));
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn irb_alignment_widths() {
    let (_, irb) = build(0, |b| Irb::new(b, 129, 128, (1, 1)));
    assert!(!irb.residual);
    let (store, irb) = build(0, |b| Irb::new(b, 9, 8, (1, 1)));
    let (g, y) = run(&store, true, &[input(9, 4, 6, 2)], |c, v| irb.forward(c, v[0]));
    assert_eq!(g.shape(y), Shape::new(1, 8, 4, 6));
    assert_eq!(store.param(irb.expand.conv.weight).tensor.shape().n, 54);
    let (store, irb) = build(0, |b| Irb::new(b, 4, 4, (2, 2)));
    assert!(!irb.residual);
    let (g, y) = run(&store, true, &[input(4, 4, 6, 2)], |c, v| irb.forward(c, v[0]));
    assert_eq!(g.shape(y), Shape::new(1, 4, 2, 3));
}

#[test]
fn residual_blocks_with_zero_weights_are_identity() {
    for variant in [ResidualVariant::Bottleneck, ResidualVariant::Basic] {
        let (mut store, blk) = build(0, |b| ResidualBlock::new(b, variant, 8, 8));
        assert!(blk.shortcut.is_none());
        zero_convs(&mut store);
        let x = input(8, 4, 6, 3);
        let (g, y) = run(&store, true, &[x.clone()], |c, v| blk.forward(c, v[0]));
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn bottleneck_widths_and_projection_shortcut() {
    let (store, blk) = build(0, |b| ResidualBlock::new(b, ResidualVariant::Bottleneck, 256, 256));
    assert_eq!(blk.internal_width(&store), 64);
    let (store, blk) = build(0, |b| ResidualBlock::new(b, ResidualVariant::Bottleneck, 12, 8));
    assert!(blk.shortcut.is_some());
    let (g, y) = run(&store, true, &[input(12, 5, 7, 4)], |c, v| blk.forward(c, v[0]));
    assert_eq!(g.shape(y), Shape::new(1, 8, 5, 7));
}

#[test]
fn lsfe_shape_and_zero_input() {
    let (store, lsfe) = build(0, |b| Lsfe::new(b, 128, 128));
    let (g, y) = run(&store, true, &[input(128, 6, 32, 5)], |c, v| lsfe.forward(c, v[0]));
    assert_eq!(g.shape(y), Shape::new(1, 128, 6, 32));

    let (mut store, lsfe) = build(1, |b| Lsfe::new(b, 4, 6));
    set_shift(&mut store, lsfe.second.pointwise.norm.shift, 9);
    let (g, y) = run(&store, true, &[Tensor::zeros(Shape::new(1, 4, 4, 6))], |c, v| lsfe.forward(c, v[0]));
    let shift = &store.param(lsfe.second.pointwise.norm.shift).tensor;
    let out = g.value(y);
    for c in 0..6 {
        let s = shift.data()[c];
        let expected = if s >= 0.0 { s } else { s * LEAKY_SLOPE };
        assert!(out.plane(0, c).iter().all(|v| (*v - expected).abs() < 1e-12));
    }
}

#[test]
fn dpc_branches_and_clamping() {
    let (store, dpc) = build(0, |b| Dpc::new(b, 128, 128));
    assert_eq!(dpc.branches.len(), 5);
    assert_eq!(store.param(dpc.project.conv.weight).tensor.shape(), Shape::new(128, 640, 1, 1));

    let (store, dpc) = build(0, |b| Dpc::new(b, 4, 4));
    let eff = dpc.effective_dilations(4, 8);
    // ⌊(4−1)/2⌋ = 1 rows, ⌊(8−1)/2⌋ = 3 columns
    assert_eq!(eff, vec![(1, 3), (1, 1), (1, 3), (1, 3), (1, 3)]);
    assert!(eff.iter().all(|&(dy, dx)| 2 * dy < 4 && 2 * dx < 8));
    let (g, y) = run(&store, true, &[input(4, 4, 8, 6)], |c, v| dpc.forward(c, v[0]));
    assert_eq!(g.shape(y), Shape::new(1, 4, 4, 8));
    assert_eq!(dpc.effective_dilations(64, 64), DPC_DILATIONS.to_vec());
    assert_eq!(clamp_dilation((6, 21), 1, 2), (1, 1));
}

#[test]
fn mc_contract() {
    let (store, mc) = build(0, |b| Mc::new(b, 128));
    let xs = [input(128, 6, 16, 7), input(128, 3, 8, 8)];
    let (g, y) = run(&store, true, &xs, |c, v| mc.forward(c, v[0], v[1]));
    assert_eq!(g.shape(y), Shape::new(1, 128, 6, 16));

    let (store, mc) = build(0, |b| Mc::new(b, 4));
    let fine = input(4, 4, 6, 9);
    let xs = [fine.clone(), Tensor::zeros(Shape::new(1, 4, 2, 3))];
    let (g, y) = run(&store, true, &xs, |c, v| mc.forward(c, v[0], v[1]));
    assert_eq!(g.value(y), &fine);

    let mut g = Graph::new();
    let f = g.input(input(4, 4, 6, 1));
    let c = g.input(input(4, 8, 3, 1));
    assert!(mc.forward(&mut Ctx::new(&mut g, &store, true), f, c).is_err());
}

#[test]
fn fpn_shape_contract() {
    let (store, fpn) = build(0, |b| TwoWayPyramid::new(b, Some([16, 24, 40]), 128, PyramidConfig::default()));
    let xs = [input(16, 16, 32, 1), input(24, 8, 16, 2), input(40, 4, 8, 3)];
    let (g, ys) = run(&store, true, &xs, |c, v| fpn.forward(c, [v[0], v[1], v[2]]));
    let shapes: Vec<Shape> = ys.iter().map(|y| g.shape(*y)).collect();
    assert_eq!(
        shapes,
        vec![Shape::new(1, 128, 16, 32), Shape::new(1, 128, 8, 16), Shape::new(1, 128, 4, 8)]
    );

    let bad = [input(16, 16, 32, 1), input(24, 4, 8, 2), input(40, 8, 16, 3)];
    let mut g = Graph::new();
    let v: Vec<Var> = bad.iter().map(|t| g.input(t.clone())).collect();
    assert!(fpn.forward(&mut Ctx::new(&mut g, &store, true), [v[0], v[1], v[2]]).is_err());
}

#[test]
fn fpn_zero_inputs_give_constant_deterministic_maps() {
    let (mut store, fpn) = build(3, |b| TwoWayPyramid::new(b, Some([3, 4, 5]), 6, PyramidConfig::default()));
    for (i, out) in fpn.outputs.iter().enumerate() {
        set_shift(&mut store, out.pointwise.norm.shift, i as u64);
    }
    let xs = [
        Tensor::zeros(Shape::new(1, 3, 8, 12)),
        Tensor::zeros(Shape::new(1, 4, 4, 6)),
        Tensor::zeros(Shape::new(1, 5, 2, 3)),
    ];
    let (g1, a) = run(&store, true, &xs, |c, v| fpn.forward(c, [v[0], v[1], v[2]]));
    let (g2, b) = run(&store, true, &xs, |c, v| fpn.forward(c, [v[0], v[1], v[2]]));
    for i in 0..3 {
        let t = g1.value(a[i]);
        assert_eq!(t, g2.value(b[i]));
        let shift = store.param(fpn.outputs[i].pointwise.norm.shift).tensor.data();
        for c in 0..6 {
            let expected = if shift[c] >= 0.0 { shift[c] } else { shift[c] * LEAKY_SLOPE };
            assert!(t.plane(0, c).iter().all(|v| *v == expected));
        }
    }
}

#[test]
fn pyramid_flags() {
    let cfg = PyramidConfig {
        top_down: false,
        ..PyramidConfig::default()
    };
    let (store, p) = build(0, |b| TwoWayPyramid::new(b, None, 4, cfg));
    let xs = [input(4, 8, 12, 1), input(4, 4, 6, 2), input(4, 2, 3, 3)];
    let (g, ys) = run(&store, true, &xs, |c, v| p.forward(c, [v[0], v[1], v[2]]));
    // bottom-up only: o1 = sep(F1)
    let (g2, y0) = run(&store, true, &xs[..1], |c, v| p.outputs[0].forward(c, v[0]));
    assert_eq!(g.value(ys[0]), g2.value(y0));

    let concat = PyramidConfig {
        combine: Combine::Concat,
        ..PyramidConfig::default()
    };
    let (store, p) = build(0, |b| TwoWayPyramid::new(b, None, 4, concat));
    assert_eq!(store.param(p.outputs[0].depthwise.weight).tensor.shape().n, 8);
    let (g, ys) = run(&store, true, &xs, |c, v| p.forward(c, [v[0], v[1], v[2]]));
    assert_eq!(g.shape(ys[2]), Shape::new(1, 4, 2, 3));

    let none = PyramidConfig {
        top_down: false,
        bottom_up: false,
        ..PyramidConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(TwoWayPyramid::new(&mut Builder::new(&mut store, &mut rng), None, 4, none).is_err());
}

#[test]
fn running_stats_blend() {
    let (mut store, norm) = build(0, |b| Norm::new(b, 2, Activation::Identity));
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 3.0, -2.0, 2.0]).unwrap();
    let (mut g, _) = run(&store, true, &[x], |c, v| norm.forward(c, v[0]));
    let updates = g.take_stat_updates();
    assert_eq!(updates.len(), 1);
    update_running_stats(&mut store, &updates, 0.1);
    let mean = store.buffer(norm.running_mean).data().to_vec();
    let var = store.buffer(norm.running_var).data().to_vec();
    assert!((mean[0] - 0.2).abs() < 1e-12 && (mean[1] - 0.0).abs() < 1e-12);
    assert!((var[0] - (0.9 + 0.1)).abs() < 1e-12 && (var[1] - (0.9 + 0.4)).abs() < 1e-12);
    let (g, _) = run(&store, false, &[Tensor::zeros(Shape::new(1, 2, 1, 2))], |c, v| norm.forward(c, v[0]));
    let mut g = g;
    assert!(g.take_stat_updates().is_empty());
}

#[test]
fn gradcheck_irb() {
    let (mut store, irb) = build(1, |b| Irb::new(b, 3, 3, (1, 1)));
    perturb_norms(&mut store, 2);
    gradcheck(&mut store, &[input(3, 4, 6, 3)], &|c, v| irb.forward(c, v[0]));
    let (mut store, irb) = build(1, |b| Irb::new(b, 3, 5, (2, 2)));
    perturb_norms(&mut store, 2);
    gradcheck(&mut store, &[input(3, 4, 6, 3)], &|c, v| irb.forward(c, v[0]));
}

#[test]
fn gradcheck_residual_blocks() {
    for variant in [ResidualVariant::Bottleneck, ResidualVariant::Basic] {
        for (cin, cout) in [(8, 8), (6, 8)] {
            let (mut store, blk) = build(2, |b| ResidualBlock::new(b, variant, cin, cout));
            perturb_norms(&mut store, 3);
            gradcheck(&mut store, &[input(cin, 4, 6, 4)], &|c, v| blk.forward(c, v[0]));
        }
    }
}

#[test]
fn gradcheck_lsfe_and_dpc() {
    let (mut store, lsfe) = build(3, |b| Lsfe::new(b, 3, 4));
    perturb_norms(&mut store, 4);
    gradcheck(&mut store, &[input(3, 4, 6, 5)], &|c, v| lsfe.forward(c, v[0]));
    let (mut store, dpc) = build(3, |b| Dpc::new(b, 3, 4));
    perturb_norms(&mut store, 4);
    gradcheck(&mut store, &[input(3, 4, 6, 5)], &|c, v| dpc.forward(c, v[0]));
}

#[test]
fn gradcheck_mc() {
    let (mut store, mc) = build(4, |b| Mc::new(b, 3));
    perturb_norms(&mut store, 5);
    gradcheck(&mut store, &[input(3, 4, 6, 6), input(3, 2, 3, 7)], &|c, v| mc.forward(c, v[0], v[1]));
}

#[test]
fn gradcheck_fpn_and_head() {
    let (mut store, fpn) = build(5, |b| TwoWayPyramid::new(b, Some([2, 3, 4]), 3, PyramidConfig::default()));
    perturb_norms(&mut store, 6);
    let xs = [input(2, 8, 12, 1), input(3, 4, 6, 2), input(4, 2, 3, 3)];
    gradcheck(&mut store, &xs, &|c, v| {
        let o = fpn.forward(c, [v[0], v[1], v[2]])?;
        let a = c.g.resize(o[1], 8, 12, false)?;
        let b = c.g.resize(o[2], 8, 12, false)?;
        c.g.concat(&[o[0], a, b])
    });
    let (mut store, head) = build(6, |b| SemanticHead::new(b, 3));
    perturb_norms(&mut store, 7);
    let xs = [input(3, 8, 12, 1), input(3, 4, 6, 2), input(3, 2, 3, 3)];
    gradcheck(&mut store, &xs, &|c, v| head.forward(c, [v[0], v[1], v[2]]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stride_one_blocks_preserve_geometry(h in 1usize..7, w in 1usize..9, cin in 1usize..5, cout in 1usize..5, seed in 0u64..1000) {
        let x = input(cin, h, w, seed);
        let (store, irb) = build(seed, |b| Irb::new(b, cin, cout, (1, 1)));
        let (g, y) = run(&store, true, &[x.clone()], |c, v| irb.forward(c, v[0]));
        prop_assert_eq!(g.shape(y), Shape::new(1, cout, h, w));
        prop_assert!(g.value(y).all_finite());
        for variant in [ResidualVariant::Bottleneck, ResidualVariant::Basic] {
            let (store, blk) = build(seed, |b| ResidualBlock::new(b, variant, cin, cout));
            let (g, y) = run(&store, true, &[x.clone()], |c, v| blk.forward(c, v[0]));
            prop_assert_eq!(g.shape(y), Shape::new(1, cout, h, w));
        }
        let (store, dpc) = build(seed, |b| Dpc::new(b, cin, cout));
        let (g, y) = run(&store, false, &[x.clone()], |c, v| dpc.forward(c, v[0]));
        prop_assert_eq!(g.shape(y), Shape::new(1, cout, h, w));
    }
}

