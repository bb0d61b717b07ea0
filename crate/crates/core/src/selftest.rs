//! Oracle suites behind `pyfu selftest`: finite-difference gradients for every
//! block, projection against brute-force geometry, and kNN refinement against
//! its exhaustive reference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::blocks::{update_running_stats, Ctx, Dpc, Irb, Lsfe, Mc, PyramidConfig, ResidualBlock, ResidualVariant, TwoWayPyramid};
use crate::camproj::{build_mapping, gather_camera_features, scale_mapping, CamRVMapping, CameraModel};
use crate::error::Result;
use crate::numcore::gradcheck::{check_gradients, random_input, GradCheckOptions, GradCheckReport};
use crate::numcore::{Builder, ConvSpec, Graph, Init, ParamStore, Shape, Tensor, Var};
use crate::postprocess::{brute_force_knn_oracle, knn_postprocess, KnnConfig};
use crate::pyfu::{CameraSide, FusionModule, Head, PyFu, PyFuConfig, Preset, RvFeature};
use crate::rangeview::{build_range_image, spherical_project, Overlap, PointCloud, RangeImage, Sample, SensorConfig};

pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const GATHER_ROUNDOFF: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Collector {
    checks: Vec<Check>,
}

impl Collector {
    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Runtime errors count as failures rather than aborting the suite.
    fn result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.push(name, ok, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

type B<'a> = Builder<'a, f64, ChaCha8Rng>;

fn build<X>(seed: u64, f: impl FnOnce(&mut B<'_>) -> Result<X>) -> Result<(ParamStore<f64>, X)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut Builder::new(&mut store, &mut rng))?;
    Ok((store, block))
}

/// Moves normalisation affines and running statistics off their identity
/// values so fixed-statistics checks exercise them.
fn perturb_norms(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.2).expect("valid normal");
    let u = Uniform::new(0.5, 1.5).expect("valid range");
    for p in store.params_mut() {
        if p.name.ends_with(".scale") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 1.0 + n.sample(&mut rng));
        } else if p.name.ends_with(".shift") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
        }
    }
    let names: Vec<String> = store.buffers().iter().map(|b| b.name.clone()).collect();
    for name in names {
        let id = store.find_buffer(&name).expect("listed buffer");
        let var = name.ends_with("running_var");
        for v in store.buffer_mut(id).data_mut() {
            *v = if var { u.sample(&mut rng) } else { n.sample(&mut rng) };
        }
    }
}

/// Running statistics near the sample's own batch statistics, so activations
/// stay at unit scale through the whole network and round-off in the loss
/// stays small next to its smallest gradients. Deep stages see only a few
/// pixels, so their batch variance is floored at one rather than trusted.
fn calibrate_norms(m: &PyFu, store: &mut ParamStore<f64>, s: &Sample, seed: u64) -> Result<()> {
    let mut g = Graph::new();
    m.forward(&mut Ctx::new(&mut g, store, true), s, &[Head::Fused])?;
    update_running_stats(store, &g.take_stat_updates(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.1).expect("valid normal");
    let u = Uniform::new(0.8, 1.25).expect("valid range");
    let names: Vec<String> = store.buffers().iter().map(|b| b.name.clone()).collect();
    for name in names {
        let id = store.find_buffer(&name).expect("listed buffer");
        let var = name.ends_with("running_var");
        for v in store.buffer_mut(id).data_mut() {
            *v = if var { v.max(1.0) * u.sample(&mut rng) } else { *v + n.sample(&mut rng) };
        }
    }
    Ok(())
}

fn summarize(report: &GradCheckReport, tol: f64) -> (bool, String) {
    if report.entries.is_empty() {
        return (false, "nothing was checked".into());
    }
    (report.passes(tol), report.summary())
}

/// Gradient check in both batch- and fixed-statistics mode.
fn block_check(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<(bool, String)> {
    let mut details = Vec::new();
    let mut ok = true;
    for batch in [true, false] {
        let fwd = |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| f(&mut Ctx::new(g, s, batch), v);
        let report = check_gradients(store, inputs, &fwd, GradCheckOptions::default())?;
        let (pass, d) = summarize(&report, BLOCK_TOLERANCE);
        ok &= pass;
        details.push(format!("{}: {d}", if batch { "batch" } else { "fixed" }));
    }
    Ok((ok, details.join("; ")))
}

fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    random_input(Shape::new(1, c, h, w), seed)
}

/// Rectangle-shaped mapping over an `h × w` range view into a `hc × wc` image.
fn rect_mapping(h: usize, w: usize, hc: usize, wc: usize, rows: (usize, usize), cols: (usize, usize), seed: u64) -> CamRVMapping {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..h * w)
        .map(|i| {
            let (v, u) = (i / w, i % w);
            let inside = v >= rows.0 && v < rows.1 && u >= cols.0 && u < cols.1;
            inside.then(|| (rng.random_range(0.0..wc as f64), rng.random_range(0.0..hc as f64)))
        })
        .collect();
    CamRVMapping {
        rv_height: h,
        rv_width: w,
        cam_height: hc,
        cam_width: wc,
        coords,
        overlap: Some(Overlap { rows, cols }),
    }
}

fn micro_sample(cfg: &PyFuConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.sensor.height, cfg.sensor.width);
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
    let mapping = rect_mapping(h, w, cfg.camera_height, cfg.camera_width, (0, h), (w / 4, w / 2), seed + 1);
    let image = Tensor::from_fn(Shape::new(1, 3, cfg.camera_height, cfg.camera_width), |_, _, _, _| rng.random::<f32>());
    Sample {
        range: RangeImage {
            height: h,
            width: w,
            channels,
            mask,
            labels,
        },
        mapping,
        image,
        image_labels: None,
    }
}

fn conv_kernels(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for (cin, cout, spec, k) in [
        (3, 4, ConvSpec::same(3, 3), 3),
        (4, 4, ConvSpec::default().groups(4).stride(2, 1).padding(1, 1).dilation(1, 2), 3),
        (4, 6, ConvSpec::default().groups(2).stride(1, 2).padding(1, 1), 3),
        (5, 3, ConvSpec::default(), 1),
    ] {
        let mut store = ParamStore::new();
        let (w, b) = {
            let mut bld = Builder::new(&mut store, &mut rng);
            (
                bld.param("w", Shape::new(cout, cin / spec.groups, k, k), Init::Kaiming { fan_in: 9 })?,
                bld.param("b", Shape::new(1, cout, 1, 1), Init::Kaiming { fan_in: 1 })?,
            )
        };
        let x = random_input(Shape::new(2, cin, 5, 6), seed + 1);
        let fwd = move |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            g.conv2d(v[0], wv, Some(bv), spec)
        };
        let report = check_gradients(&mut store, &[x], &fwd, GradCheckOptions::default())?;
        ok &= report.passes(BLOCK_TOLERANCE);
        worst = worst.max(report.worst().map_or(0.0, |w| w.rel_error));
    }
    Ok((ok, format!("dense, grouped, strided, dilated and 1x1: worst {worst:.2e}")))
}

fn fusion_module(seed: u64) -> Result<(bool, String)> {
    let cfg = PyFuConfig {
        channels: 4,
        expansion: 2,
        ..PyFuConfig::micro()
    };
    let (mut store, fm) = build(seed, |b| FusionModule::new(b, 3, 2, true, &cfg))?;
    perturb_norms(&mut store, seed + 1);
    let map = rect_mapping(8, 32, 32, 64, (0, 8), (8, 24), seed + 2);
    let inputs = [input(3, 4, 8, seed + 3), input(2, 8, 16, seed + 4)];
    block_check(&mut store, &inputs, &|c, v| {
        let lidar = RvFeature {
            var: v[0],
            stride: (2, 4),
            cropped: false,
        };
        fm.forward(c, lidar, CameraSide::Image(v[1]), &map, (1, 2))
    })
}

fn gather(seed: u64) -> Result<(bool, String)> {
    let map = rect_mapping(6, 10, 96, 192, (1, 5), (2, 9), seed);
    let scaled = scale_mapping(&map, (1, 1), (12, 24))?;
    let mut store = ParamStore::new();
    let fwd = |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| gather_camera_features(g, v[0], &scaled);
    let report = check_gradients(&mut store, &[input(3, 12, 24, seed + 1)], &fwd, GradCheckOptions::default())?;
    Ok(summarize(&report, BLOCK_TOLERANCE))
}


fn end_to_end(seed: u64) -> Result<(bool, String)> {
    Ok(summarize(&end_to_end_report(seed)?, END_TO_END_TOLERANCE))
}

fn end_to_end_report(seed: u64) -> Result<GradCheckReport> {
    let cfg = PyFuConfig {
        freeze_lidar: false,
        freeze_camera: false,
        ..PyFuConfig::micro().with_preset(Preset::PfbPfh)
    };
    let (m, mut store) = PyFu::build::<f64>(cfg.clone(), seed)?;
    m.configure_training(&mut store, Head::Fused)?;
    perturb_norms(&mut store, seed + 1);
    let s = micro_sample(&cfg, seed + 2);
    calibrate_norms(&m, &mut store, &s, seed + 3)?;
    let fwd = |g: &mut Graph<f64>, st: &ParamStore<f64>, _: &[Var]| {
        let out = m.forward(&mut Ctx::new(g, st, false), &s, &[Head::Fused])?;
        Ok(out.fused.expect("fused head requested"))
    };
    let opts = GradCheckOptions {
        max_coords: 6,
        // deep chain: a finer step drowns the smallest gradients in round-off
        step: 1e-4,
        seed,
        ..GradCheckOptions::default()
    };
    check_gradients(&mut store, &[], &fwd, opts)
}

/// Central finite differences in f64 for every building block and the micro
/// network end to end.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let t = Instant::now();
    let mut c = Collector { checks: Vec::new() };
    c.result("conv kernels", conv_kernels(seed));
    c.result(
        "IRB",
        build(seed, |b| Irb::new(b, 3, 5, (2, 2))).and_then(|(mut s, irb)| {
            perturb_norms(&mut s, seed + 1);
            block_check(&mut s, &[input(3, 4, 6, seed + 2)], &|c, v| irb.forward(c, v[0]))
        }),
    );
    for (name, variant) in [("BRB", ResidualVariant::Bottleneck), ("BB", ResidualVariant::Basic)] {
        c.result(
            name,
            build(seed, |b| ResidualBlock::new(b, variant, 6, 8)).and_then(|(mut s, blk)| {
                perturb_norms(&mut s, seed + 1);
                block_check(&mut s, &[input(6, 4, 6, seed + 2)], &|c, v| blk.forward(c, v[0]))
            }),
        );
    }
    c.result(
        "LSFE",
        build(seed, |b| Lsfe::new(b, 3, 4)).and_then(|(mut s, lsfe)| {
            perturb_norms(&mut s, seed + 1);
            block_check(&mut s, &[input(3, 4, 6, seed + 2)], &|c, v| lsfe.forward(c, v[0]))
        }),
    );
    c.result(
        "DPC",
        build(seed, |b| Dpc::new(b, 3, 4)).and_then(|(mut s, dpc)| {
            perturb_norms(&mut s, seed + 1);
            block_check(&mut s, &[input(3, 4, 6, seed + 2)], &|c, v| dpc.forward(c, v[0]))
        }),
    );
    c.result(
        "MC",
        build(seed, |b| Mc::new(b, 3)).and_then(|(mut s, mc)| {
            perturb_norms(&mut s, seed + 1);
            let xs = [input(3, 4, 6, seed + 2), input(3, 2, 3, seed + 3)];
            block_check(&mut s, &xs, &|c, v| mc.forward(c, v[0], v[1]))
        }),
    );
    c.result(
        "two-way FPN",
        build(seed, |b| TwoWayPyramid::new(b, Some([2, 3, 4]), 3, PyramidConfig::default())).and_then(|(mut s, fpn)| {
            perturb_norms(&mut s, seed + 1);
            let xs = [input(2, 8, 12, seed + 2), input(3, 4, 6, seed + 3), input(4, 2, 3, seed + 4)];
            block_check(&mut s, &xs, &|c, v| {
                let o = fpn.forward(c, [v[0], v[1], v[2]])?;
                let a = c.g.resize(o[1], 8, 12, false)?;
                let b = c.g.resize(o[2], 8, 12, false)?;
                c.g.concat(&[o[0], a, b])
            })
        }),
    );
    c.result("fusion module", fusion_module(seed));
    c.result("gather_camera_features", gather(seed));
    c.result("end-to-end micro network", end_to_end(seed));
    SuiteReport {
        suite: "gradients",
        checks: c.checks,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Points spread over the full sphere with mixed ranges, so many pixels hold
/// several candidates.
pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let r: f32 = rng.random_range(1.0..40.0);
            let yaw: f32 = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
            let pitch: f32 = rng.random_range(-30f32.to_radians()..6f32.to_radians());
            [
                r * pitch.cos() * yaw.cos(),
                r * pitch.cos() * yaw.sin(),
                r * pitch.sin(),
                rng.random(),
            ]
        })
        .collect();
    let labels = (0..n).map(|i| (i % 6) as u8).collect();
    PointCloud::new(points, Some(labels)).expect("nonzero ranges")
}

fn desk_sensor() -> SensorConfig {
    SensorConfig {
        height: 32,
        width: 256,
        fov_up: 3.0,
        fov_down: -25.0,
    }
}

fn round_trip(cloud: &PointCloud, sensor: &SensorConfig) -> Result<(bool, String)> {
    let idx = spherical_project(cloud, sensor)?;
    let ri = build_range_image(cloud, &idx)?;
    let plane = sensor.height * sensor.width;
    let mut kept = 0;
    for (pix, p) in idx.pixel_point.iter().enumerate() {
        let Some(i) = p.map(|i| i as usize) else {
            if ri.mask[pix] {
                return Ok((false, format!("pixel {pix} is valid without a point")));
            }
            continue;
        };
        kept += 1;
        let (u, v) = idx.pixel_of(i);
        let xyz = &cloud.points()[i][..3];
        let stored = [ri.channels[plane + pix], ri.channels[2 * plane + pix], ri.channels[3 * plane + pix]];
        if v * sensor.width + u != pix || stored != xyz || !ri.mask[pix] {
            return Ok((false, format!("point {i} and pixel {pix} disagree")));
        }
    }
    // every point lands on the nearest-point pixel it projects to
    for i in 0..cloud.len() {
        let (u, v) = idx.pixel_of(i);
        let owner = idx.point_at(u, v).expect("a projected point owns its pixel");
        if cloud.range(owner) > cloud.range(i) {
            return Ok((false, format!("point {i} is nearer than the owner of ({u}, {v})")));
        }
    }
    Ok((true, format!("{} points, {kept} kept", cloud.len())))
}

/// Frustum test written directly in lidar coordinates for a forward-facing
/// camera, independent of the rotation matrix.
fn frustum_oracle(cam: &CameraModel, t: [f64; 3], p: [f32; 4]) -> Option<(f64, f64)> {
    let q = [-(p[1] as f64) + t[0], -(p[2] as f64) + t[1], p[0] as f64 + t[2]];
    if q[2] <= 0.0 {
        return None;
    }
    let xc = cam.fx * q[0] / q[2] + cam.cx;
    let yc = cam.fy * q[1] / q[2] + cam.cy;
    (xc >= 0.0 && yc >= 0.0 && xc < cam.image_width as f64 && yc < cam.image_height as f64).then_some((xc, yc))
}

fn mapping_validity(cloud: &PointCloud, sensor: &SensorConfig) -> Result<(bool, String)> {
    let t = [0.1, -0.2, 0.05];
    let cam = CameraModel::forward_facing(96, 192, 90.0, t);
    let idx = spherical_project(cloud, sensor)?;
    let map = build_mapping(cloud, &idx, &cam)?;
    let mut valid = 0;
    for (pix, kept) in idx.pixel_point.iter().enumerate() {
        let oracle = kept.and_then(|i| frustum_oracle(&cam, t, cloud.points()[i as usize]));
        match (map.coords[pix], oracle) {
            (None, None) => {}
            (Some(a), Some(b)) if (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 => valid += 1,
            (a, b) => return Ok((false, format!("pixel {pix}: mapping {a:?}, oracle {b:?}"))),
        }
    }
    Ok((valid > 0, format!("{valid} valid pixels agree")))
}

fn scaled_consistency(cloud: &PointCloud, sensor: &SensorConfig) -> Result<(bool, String)> {
    let cam = CameraModel::forward_facing(96, 192, 90.0, [0.0; 3]);
    let idx = spherical_project(cloud, sensor)?;
    let map = build_mapping(cloud, &idx, &cam)?;
    let mut cells = 0;
    for (sy, sx) in [(1, 1), (2, 8), (4, 16), (8, 32), (3, 5)] {
        for (hf, wf) in [(96, 192), (24, 48), (6, 12)] {
            let (ky, kx) = (hf as f64 / 96.0, wf as f64 / 192.0);
            let s = scale_mapping(&map, (sy, sx), (hf, wf))?;
            for cy in 0..s.height {
                for cx in 0..s.width {
                    let members: Vec<(f64, f64)> = (cy * sy..((cy + 1) * sy).min(map.rv_height))
                        .flat_map(|v| (cx * sx..((cx + 1) * sx).min(map.rv_width)).map(move |u| (v, u)))
                        .filter_map(|(v, u)| map.coords[v * map.rv_width + u])
                        .collect();
                    let coarse = s.coords[cy * s.width + cx];
                    let ok = match (coarse, members.first()) {
                        (None, None) => true,
                        (Some((x, y)), Some(&(fx, fy))) => {
                            // identical to the first member, and every member
                            // within one feature cell when the cell is a single pixel
                            let near = sy * sx > 1 || ((x - fx * kx).abs() <= 1.0 && (y - fy * ky).abs() <= 1.0);
                            (x - fx * kx).abs() < 1e-9 && (y - fy * ky).abs() < 1e-9 && near
                        }
                        _ => false,
                    };
                    if !ok {
                        return Ok((false, format!("stride ({sy}, {sx}) cell ({cy}, {cx}) of {hf}x{wf}")));
                    }
                    cells += 1;
                }
            }
            if s.overlap_ranges() != map.overlap()?.at_stride((sy, sx)) {
                return Ok((false, format!("stride ({sy}, {sx}) overlap ranges differ")));
            }
        }
    }
    Ok((true, format!("{cells} cells")))
}

fn naive_bilinear(f: &Tensor<f64>, c: usize, x: f64, y: f64) -> f64 {
    let s = f.shape();
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(s.w - 1);
    let y1 = (y0 + 1).min(s.h - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let top = f.at(0, c, y0, x0) * (1.0 - ax) + f.at(0, c, y0, x1) * ax;
    let bot = f.at(0, c, y1, x0) * (1.0 - ax) + f.at(0, c, y1, x1) * ax;
    top * (1.0 - ay) + bot * ay
}

fn gather_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = 0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..24));
        let (hf, wf) = (rng.random_range(1..16), rng.random_range(1..32));
        let f = Tensor::<f64>::randn(Shape::new(1, 3, hf, wf), 1.0, &mut rng);
        let coords: Vec<Option<(f64, f64)>> = (0..h * w)
            .map(|_| rng.random_bool(0.7).then(|| (rng.random_range(0.0..192.0), rng.random_range(0.0..96.0))))
            .collect();
        let m = CamRVMapping {
            rv_height: h,
            rv_width: w,
            cam_height: 96,
            cam_width: 192,
            overlap: None,
            coords,
        };
        let s = scale_mapping(&m, (1, 1), (hf, wf))?;
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        let out = gather_camera_features(&mut g, fv, &s)?;
        let o = g.value(out);
        for (cell, c) in s.coords.iter().enumerate() {
            for ch in 0..3 {
                let expected = c.map_or(0.0, |(x, y)| naive_bilinear(&f, ch, x, y));
                // different association order, so equal up to round-off
                if (o.at(0, ch, cell / w, cell % w) - expected).abs() > GATHER_ROUNDOFF {
                    return Ok((false, format!("cell {cell} channel {ch}: {} vs {expected}", o.at(0, ch, cell / w, cell % w))));
                }
            }
            if o.at(0, 3, cell / w, cell % w) != if c.is_some() { 1.0 } else { 0.0 } {
                return Ok((false, format!("cell {cell}: wrong validity channel")));
            }
            cells += 1;
        }
    }
    Ok((true, format!("{cells} cells match")))
}

/// Point↔pixel round trips, mapping validity and rescaling against brute-force
/// geometry on `points` random points, and gather against per-cell bilinear
/// sampling.
pub fn projection_suite(seed: u64, points: usize) -> SuiteReport {
    let t = Instant::now();
    let mut c = Collector { checks: Vec::new() };
    let cloud = random_cloud(points, seed);
    let sensor = desk_sensor();
    c.result("point-pixel round trip", round_trip(&cloud, &sensor));
    c.result("mapping validity vs frustum oracle", mapping_validity(&cloud, &sensor));
    c.result("scaled mappings vs full resolution", scaled_consistency(&cloud, &sensor));
    c.result("gather vs naive bilinear", gather_oracle(seed));
    SuiteReport {
        suite: "projection",
        checks: c.checks,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// One randomized kNN instance on a 32×256 raster.
fn knn_instance(rng: &mut ChaCha8Rng, n: usize) -> Result<(bool, String)> {
    let cloud = {
        let seed = rng.random();
        random_cloud(n, seed)
    };
    let idx = spherical_project(&cloud, &desk_sensor())?;
    let ri = build_range_image(&cloud, &idx)?;
    let labels: Vec<u8> = (0..ri.height * ri.width).map(|_| rng.random_range(0..6)).collect();
    let cfg = KnnConfig {
        window: [3, 5, 7][rng.random_range(0..3)],
        k: rng.random_range(1..10),
        cutoff: rng.random_range(0.1..5.0),
        sigma: rng.random_range(0.5..2.0),
    };
    let fast = knn_postprocess(&cloud, &idx, &ri, &labels, &cfg)?;
    let slow = brute_force_knn_oracle(&cloud, &idx, &ri, &labels, &cfg)?;
    let diff = fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
    Ok((diff == 0, format!("{n} points, {cfg:?}: {diff} mismatches")))
}

/// `knn_postprocess` against the exhaustive oracle on `instances` random
/// instances of up to 10⁴ points.
pub fn knn_suite(seed: u64, instances: usize) -> SuiteReport {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut errors = Vec::new();
    for i in 0..instances {
        let n = if i % 10 == 0 { 10_000 } else { rng.random_range(1..3000) };
        match knn_instance(&mut rng, n) {
            Ok((true, _)) => {}
            Ok((false, d)) => failures.push(format!("instance {i}: {d}")),
            Err(e) => errors.push(format!("instance {i}: {e}")),
        }
    }
    let passed = instances > 0 && failures.is_empty() && errors.is_empty();
    let detail = if passed {
        format!("{instances} instances agree exactly")
    } else {
        failures.into_iter().chain(errors).take(3).collect::<Vec<_>>().join("; ")
    };
    SuiteReport {
        suite: "knn",
        checks: vec![Check {
            name: "knn_postprocess vs brute force".into(),
            passed,
            detail,
        }],
        seconds: t.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_budgets() {
        for report in [gradient_suite(1), projection_suite(2, 2000), knn_suite(3, 4)] {
            assert!(report.passed(), "{}: {:?}", report.suite, report.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn a_broken_oracle_input_is_reported() {
        let mut c = Collector { checks: Vec::new() };
        c.result("x", Err(crate::Error::NoOverlap));
        assert!(!c.checks[0].passed);
        let empty = SuiteReport {
            suite: "empty",
            checks: vec![],
            seconds: 0.0,
        };
        assert!(!empty.passed());
    }
}
