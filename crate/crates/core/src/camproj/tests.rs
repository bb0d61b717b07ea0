use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{Shape, Tensor};
use crate::rangeview::{spherical_project, SensorConfig};

fn identity_camera() -> CameraModel {
    CameraModel {
        fx: 100.0,
        fy: 120.0,
        cx: 64.0,
        cy: 48.0,
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
        image_height: 96,
        image_width: 128,
    }
}

fn desk_sensor() -> SensorConfig {
    SensorConfig {
        height: 32,
        width: 256,
        fov_up: 3.0,
        fov_down: -25.0,
    }
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            [
                rng.random_range(-30.0f32..30.0),
                rng.random_range(-30.0f32..30.0),
                rng.random_range(-4.0f32..2.0),
                0.5,
            ]
        })
        .filter(|p| p[0] != 0.0 || p[1] != 0.0)
        .collect();
    PointCloud::new(pts, None).unwrap()
}

#[test]
fn optical_axis_and_frustum() {
    let cam = identity_camera();
    assert_eq!(cam.project([0.0, 0.0, 5.0]), Some((64.0, 48.0)));
    assert_eq!(cam.project([0.0, 0.0, -5.0]), None);
    assert_eq!(cam.project([100.0, 0.0, 1.0]), None);
}

#[test]
fn calibration_validation() {
    let mut cam = identity_camera();
    assert!(cam.validate().is_ok());
    cam.rotation[0][1] = 0.1;
    assert!(cam.validate().is_err());
    let mut cam = identity_camera();
    cam.fx = 0.0;
    assert!(cam.validate().is_err());
}

#[test]
fn mapping_validity_equals_frustum_oracle() {
    let cloud = random_cloud(10_000, 4);
    let cfg = desk_sensor();
    let cam = CameraModel::forward_facing(96, 192, 90.0, [0.1, -0.2, 0.05]);
    let idx = spherical_project(&cloud, &cfg).unwrap();
    let map = build_mapping(&cloud, &idx, &cam).unwrap();
    for (pix, kept) in idx.pixel_point.iter().enumerate() {
        let oracle = kept.and_then(|i| {
            let [x, y, z, _] = cloud.points()[i as usize];
            // independent frustum test in camera coordinates
            let q = [-(y as f64) + 0.1, -(z as f64) - 0.2, x as f64 + 0.05];
            if q[2] <= 0.0 {
                return None;
            }
            let xc = cam.fx * q[0] / q[2] + cam.cx;
            let yc = cam.fy * q[1] / q[2] + cam.cy;
            (xc >= 0.0 && yc >= 0.0 && xc < 192.0 && yc < 96.0).then_some((xc, yc))
        });
        assert_eq!(map.coords[pix].is_some(), oracle.is_some(), "pixel {pix}");
        if let (Some(a), Some(b)) = (map.coords[pix], oracle) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            let (u, v) = (pix % cfg.width, pix / cfg.width);
            assert!(map.overlap.unwrap().contains(u, v));
        }
    }
}

#[test]
fn no_overlap_is_an_error() {
    let cloud = PointCloud::new(vec![[-5.0, 0.0, 0.0, 0.1]], None).unwrap();
    let idx = spherical_project(&cloud, &desk_sensor()).unwrap();
    let cam = CameraModel::forward_facing(96, 192, 90.0, [0.0; 3]);
    assert!(matches!(build_mapping(&cloud, &idx, &cam), Err(Error::NoOverlap)));
}

fn tiny_mapping() -> CamRVMapping {
    let mut coords = vec![None; 4 * 8];
    coords[9] = Some((100.0, 40.0));
    coords[10] = Some((12.0, 8.0));
    coords[18] = Some((50.0, 50.0));
    CamRVMapping {
        rv_height: 4,
        rv_width: 8,
        cam_height: 96,
        cam_width: 192,
        overlap: Overlap::bounding(coords.iter().map(Option::is_some), 8),
        coords,
    }
}

#[test]
fn scale_mapping_examples() {
    let m = tiny_mapping();
    let same = scale_mapping(&m, (1, 1), (96, 192)).unwrap();
    assert_eq!(same.coords, m.coords);
    assert_eq!((same.height, same.width), (4, 8));

    let q = scale_mapping(&m, (1, 1), (24, 48)).unwrap();
    assert_eq!(q.coords[9], Some((25.0, 10.0)));

    // 2x2 cells: cell (0,0) has no valid member, cell (0,1) = pixels (0..2, 2..4)
    let s = scale_mapping(&m, (2, 2), (96, 192)).unwrap();
    assert_eq!((s.height, s.width), (2, 4));
    assert_eq!(s.coords[0], Some((100.0, 40.0))); // pixel 9 = (v1,u1)
    assert_eq!(s.coords[1], Some((12.0, 8.0))); // pixel 10 = (v1,u2), top-left-most of its cell
    assert_eq!(s.coords[3], None);
    assert_eq!(s.overlap_ranges(), m.overlap.unwrap().at_stride((2, 2)));
}

#[test]
fn gather_examples() {
    let mut g = Graph::<f64>::new();
    let feats = g.input(Tensor::full(Shape::new(1, 3, 24, 48), 2.5));
    let m = tiny_mapping();
    let s = scale_mapping(&m, (1, 1), (24, 48)).unwrap();
    let out = gather_camera_features(&mut g, feats, &s).unwrap();
    let o = g.value(out);
    assert_eq!(o.shape(), Shape::new(1, 4, 4, 8));
    for (cell, c) in s.coords.iter().enumerate() {
        let (v, u) = (cell / 8, cell % 8);
        for ch in 0..3 {
            assert_eq!(o.at(0, ch, v, u), if c.is_some() { 2.5 } else { 0.0 });
        }
        assert_eq!(o.at(0, 3, v, u), if c.is_some() { 1.0 } else { 0.0 });
    }

    // lattice point (3, 7)
    let f = Tensor::<f64>::from_fn(Shape::new(1, 2, 24, 48), |_, c, y, x| (c * 1000 + y * 48 + x) as f64 * 0.37);
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let mut coords = vec![None; 4 * 8];
    coords[0] = Some((3.0 * 4.0, 7.0 * 4.0));
    let m = CamRVMapping {
        rv_height: 4,
        rv_width: 8,
        cam_height: 96,
        cam_width: 192,
        overlap: Some(Overlap { rows: (0, 1), cols: (0, 1) }),
        coords,
    };
    let s = scale_mapping(&m, (1, 1), (24, 48)).unwrap();
    let out = gather_camera_features(&mut g, fv, &s).unwrap();
    assert_eq!(g.value(out).at(0, 0, 0, 0), f.at(0, 0, 7, 3));
    assert_eq!(g.value(out).at(0, 1, 0, 0), f.at(0, 1, 7, 3));

    let wrong = scale_mapping(&m, (1, 1), (12, 24)).unwrap();
    assert!(gather_camera_features(&mut g, fv, &wrong).is_err());
}

/// Independent per-cell bilinear sample.
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scaled_mapping_is_consistent(seed in 0u64..10_000, sy in 1usize..5, sx in 1usize..9) {
        let cloud = random_cloud(6000, seed);
        let idx = spherical_project(&cloud, &desk_sensor()).unwrap();
        let cam = CameraModel::forward_facing(96, 192, 90.0, [0.0; 3]);
        let map = build_mapping(&cloud, &idx, &cam).unwrap();
        let (hf, wf) = (96 / 4, 192 / 4);
        let s = scale_mapping(&map, (sy, sx), (hf, wf)).unwrap();
        for cy in 0..s.height {
            for cx in 0..s.width {
                let members: Vec<(f64, f64)> = (cy * sy..((cy + 1) * sy).min(map.rv_height))
                    .flat_map(|v| (cx * sx..((cx + 1) * sx).min(map.rv_width)).map(move |u| (v, u)))
                    .filter_map(|(v, u)| map.coords[v * map.rv_width + u])
                    .collect();
                match s.coords[cy * s.width + cx] {
                    Some((x, y)) => {
                        let first = members[0];
                        prop_assert!((x - first.0 * 0.25).abs() < 1e-5);
                        prop_assert!((y - first.1 * 0.25).abs() < 1e-5);
                    }
                    None => prop_assert!(members.is_empty()),
                }
            }
        }
        prop_assert_eq!(s.overlap_ranges(), map.overlap.unwrap().at_stride((sy, sx)));
    }

    #[test]
    fn gather_matches_naive_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f64>::randn(Shape::new(1, 3, 12, 24), 1.0, &mut rng);
        let coords: Vec<Option<(f64, f64)>> = (0..6 * 10)
            .map(|_| rng.random_bool(0.7).then(|| (rng.random_range(0.0..192.0), rng.random_range(0.0..96.0))))
            .collect();
        let m = CamRVMapping { rv_height: 6, rv_width: 10, cam_height: 96, cam_width: 192, overlap: None, coords };
        let s = scale_mapping(&m, (1, 1), (12, 24)).unwrap();
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        let out = gather_camera_features(&mut g, fv, &s).unwrap();
        let o = g.value(out);
        for (cell, c) in s.coords.iter().enumerate() {
            for ch in 0..3 {
                let expected = c.map_or(0.0, |(x, y)| naive_bilinear(&f, ch, x, y));
                prop_assert!((o.at(0, ch, cell / 10, cell % 10) - expected).abs() < 1e-6);
            }
        }
    }
}
