//! Spherical projection of point clouds into range images, overlap cropping
//! and range-view augmentation.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camproj::CamRVMapping;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Shape, Tensor, Var};
use crate::IGNORE_LABEL;

/// Range-image channel order.
pub const RANGE_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `x, y, z` in meters, remission in `[0, 1]`.
    points: Vec<[f32; 4]>,
    labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>, labels: Option<Vec<u8>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud", "no points"));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::invalid(
                    "point cloud",
                    format!("{} labels for {} points", l.len(), points.len()),
                ));
            }
        }
        if let Some(i) = points.iter().position(|p| p[0] == 0.0 && p[1] == 0.0 && p[2] == 0.0) {
            return Err(Error::ZeroRange(i));
        }
        Ok(PointCloud { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 4]] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn range(&self, i: usize) -> f64 {
        let [x, y, z, _] = self.points[i];
        ((x as f64).powi(2) + (y as f64).powi(2) + (z as f64).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    pub fov_up: f64,
    pub fov_down: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: -25.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "range image size {}x{} must be positive",
                self.height, self.width
            )));
        }
        if !(self.fov_up > self.fov_down) {
            return Err(Error::Config(format!(
                "fov_up {} must exceed fov_down {}",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    /// Pixel of a point plus whether it lies inside the vertical field of view.
    pub fn project(&self, x: f64, y: f64, z: f64) -> (usize, usize, bool) {
        let r = (x * x + y * y + z * z).sqrt();
        let yaw = y.atan2(x);
        let pitch = (z / r).clamp(-1.0, 1.0).asin();
        let up = self.fov_up.to_radians();
        let down = self.fov_down.to_radians();
        let u = (0.5 * (1.0 - yaw / std::f64::consts::PI) * self.width as f64).floor();
        let v = ((1.0 - (pitch - down) / (up - down)) * self.height as f64).floor();
        let u = u.clamp(0.0, (self.width - 1) as f64) as usize;
        let v = v.clamp(0.0, (self.height - 1) as f64) as usize;
        (u, v, pitch >= down && pitch <= up)
    }

    /// Elevation (radians) of the center of row `v`.
    pub fn row_pitch(&self, v: usize) -> f64 {
        let up = self.fov_up.to_radians();
        let down = self.fov_down.to_radians();
        up - (v as f64 + 0.5) / self.height as f64 * (up - down)
    }

    /// Azimuth (radians) of the center of column `u`.
    pub fn column_yaw(&self, u: usize) -> f64 {
        std::f64::consts::PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64)
    }
}

/// Bidirectional point ↔ pixel correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionIndex {
    pub height: usize,
    pub width: usize,
    /// `(u, v)` per point.
    pub point_pixel: Vec<(u32, u32)>,
    /// Whether each point lies inside the vertical field of view (others are clamped).
    pub in_fov: Vec<bool>,
    /// Nearest point per pixel, row-major.
    pub pixel_point: Vec<Option<u32>>,
}

impl ProjectionIndex {
    pub fn pixel_of(&self, point: usize) -> (usize, usize) {
        let (u, v) = self.point_pixel[point];
        (u as usize, v as usize)
    }

    pub fn point_at(&self, u: usize, v: usize) -> Option<usize> {
        self.pixel_point[v * self.width + u].map(|i| i as usize)
    }
}

/// Projects every point; each pixel keeps its nearest point, lower index on ties.
pub fn spherical_project(cloud: &PointCloud, cfg: &SensorConfig) -> Result<ProjectionIndex> {
    cfg.validate()?;
    let mut point_pixel = Vec::with_capacity(cloud.len());
    let mut in_fov = Vec::with_capacity(cloud.len());
    let mut pixel_point: Vec<Option<u32>> = vec![None; cfg.height * cfg.width];
    let mut best = vec![f64::INFINITY; cfg.height * cfg.width];
    for (i, p) in cloud.points().iter().enumerate() {
        let (u, v, inside) = cfg.project(p[0] as f64, p[1] as f64, p[2] as f64);
        point_pixel.push((u as u32, v as u32));
        in_fov.push(inside);
        let pix = v * cfg.width + u;
        let r = cloud.range(i);
        if r < best[pix] {
            best[pix] = r;
            pixel_point[pix] = Some(i as u32);
        }
    }
    Ok(ProjectionIndex {
        height: cfg.height,
        width: cfg.width,
        point_pixel,
        in_fov,
        pixel_point,
    })
}

/// `range, x, y, z, remission` planes plus validity mask and label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<f32>,
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
}

impl RangeImage {
    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.channels[c * p..(c + 1) * p]
    }

    pub fn range_at(&self, u: usize, v: usize) -> f32 {
        self.channels[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Network input `(1, 5, H, W)`: valid pixels standardised per channel,
    /// invalid pixels zero.
    pub fn to_input<T: Real>(&self, mean: &[f64; 5], std: &[f64; 5]) -> Tensor<T> {
        let p = self.height * self.width;
        let mut data = vec![T::zero(); RANGE_CHANNELS * p];
        for c in 0..RANGE_CHANNELS {
            for i in 0..p {
                if self.mask[i] {
                    data[c * p + i] = T::of((self.channels[c * p + i] as f64 - mean[c]) / std[c]);
                }
            }
        }
        Tensor::from_vec(Shape::new(1, RANGE_CHANNELS, self.height, self.width), data)
            .expect("range image size")
    }

    fn flip_columns(&mut self) {
        let (h, w) = (self.height, self.width);
        for row in self.channels.chunks_mut(w) {
            row.reverse();
        }
        for y in 0..h {
            self.mask[y * w..(y + 1) * w].reverse();
            self.labels[y * w..(y + 1) * w].reverse();
        }
    }

    fn crop(&self, rows: Range<usize>, cols: Range<usize>) -> RangeImage {
        let (h, w) = (rows.len(), cols.len());
        let mut channels = Vec::with_capacity(RANGE_CHANNELS * h * w);
        for c in 0..RANGE_CHANNELS {
            let plane = self.plane(c);
            for y in rows.clone() {
                channels.extend_from_slice(&plane[y * self.width + cols.start..y * self.width + cols.end]);
            }
        }
        let mut mask = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        for y in rows {
            mask.extend_from_slice(&self.mask[y * self.width + cols.start..y * self.width + cols.end]);
            labels.extend_from_slice(&self.labels[y * self.width + cols.start..y * self.width + cols.end]);
        }
        RangeImage {
            height: h,
            width: w,
            channels,
            mask,
            labels,
        }
    }
}

/// Rasterises the kept point of every pixel.
pub fn build_range_image(cloud: &PointCloud, index: &ProjectionIndex) -> Result<RangeImage> {
    if index.point_pixel.len() != cloud.len() {
        return Err(Error::invalid(
            "build_range_image",
            format!("index has {} points, cloud {}", index.point_pixel.len(), cloud.len()),
        ));
    }
    let p = index.height * index.width;
    let mut channels = vec![0.0f32; RANGE_CHANNELS * p];
    let mut mask = vec![false; p];
    let mut labels = vec![IGNORE_LABEL; p];
    for (pix, kept) in index.pixel_point.iter().enumerate() {
        let Some(i) = kept else { continue };
        let i = *i as usize;
        let [x, y, z, rem] = cloud.points()[i];
        channels[pix] = cloud.range(i) as f32;
        channels[p + pix] = x;
        channels[2 * p + pix] = y;
        channels[3 * p + pix] = z;
        channels[4 * p + pix] = rem;
        mask[pix] = true;
        if let Some(l) = cloud.labels() {
            labels[pix] = l[i];
        }
    }
    Ok(RangeImage {
        height: index.height,
        width: index.width,
        channels,
        mask,
        labels,
    })
}

/// Rows `[v0, v1)` and columns `[u0, u1)` of the camera/lidar overlap at full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Overlap {
    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0
    }

    /// Row and column ranges at feature stride `(sy, sx)`.
    pub fn at_stride(&self, stride: (usize, usize)) -> (Range<usize>, Range<usize>) {
        let (sy, sx) = stride;
        (
            self.rows.0 / sy..self.rows.1.div_ceil(sy),
            self.cols.0 / sx..self.cols.1.div_ceil(sx),
        )
    }

    /// Overlap size at stride `(sy, sx)`.
    pub fn size_at(&self, stride: (usize, usize)) -> (usize, usize) {
        let (r, c) = self.at_stride(stride);
        (r.len(), c.len())
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.cols.0..self.cols.1).contains(&u) && (self.rows.0..self.rows.1).contains(&v)
    }

    /// Tight bounding box of the `true` cells of a row-major grid.
    pub fn bounding(valid: impl Iterator<Item = bool>, width: usize) -> Option<Overlap> {
        let mut bb: Option<Overlap> = None;
        for (i, ok) in valid.enumerate() {
            if !ok {
                continue;
            }
            let (v, u) = (i / width, i % width);
            let b = bb.get_or_insert(Overlap {
                rows: (v, v + 1),
                cols: (u, u + 1),
            });
            b.rows = (b.rows.0.min(v), b.rows.1.max(v + 1));
            b.cols = (b.cols.0.min(u), b.cols.1.max(u + 1));
        }
        bb
    }
}

fn crop_ranges(shape: Shape, overlap: &Overlap, stride: (usize, usize)) -> Result<(Range<usize>, Range<usize>)> {
    let (rows, cols) = overlap.at_stride(stride);
    if rows.is_empty() || cols.is_empty() || rows.end > shape.h || cols.end > shape.w {
        return Err(Error::EmptyCrop {
            rows: (rows.start, rows.end),
            cols: (cols.start, cols.end),
        });
    }
    Ok((rows, cols))
}

/// Crops a feature map at stride `stride` to the overlap.
pub fn crop_to_overlap<T: Real>(t: &Tensor<T>, overlap: &Overlap, stride: (usize, usize)) -> Result<Tensor<T>> {
    let s = t.shape();
    let (rows, cols) = crop_ranges(s, overlap, stride)?;
    let out_shape = Shape::new(s.n, s.c, rows.len(), cols.len());
    let mut data = Vec::with_capacity(out_shape.numel());
    for nc in 0..s.n * s.c {
        for y in rows.clone() {
            let row = (nc * s.h + y) * s.w;
            data.extend_from_slice(&t.data()[row + cols.start..row + cols.end]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Differentiable counterpart of [`crop_to_overlap`].
pub fn crop_var<T: Real>(g: &mut Graph<T>, x: Var, overlap: &Overlap, stride: (usize, usize)) -> Result<Var> {
    let (rows, cols) = crop_ranges(g.shape(x), overlap, stride)?;
    g.crop(x, rows, cols)
}

/// Row-major raster crop to the overlap at full resolution.
pub fn crop_raster<V: Copy>(raster: &[V], width: usize, overlap: &Overlap) -> Vec<V> {
    let mut out = Vec::with_capacity(overlap.height() * overlap.width());
    for v in overlap.rows.0..overlap.rows.1 {
        out.extend_from_slice(&raster[v * width + overlap.cols.0..v * width + overlap.cols.1]);
    }
    out
}

/// Camera image as `(1, 3, H, W)` floats in `[0, 1]`.
pub type CameraImage = Tensor<f32>;

/// Aligned rasters of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub range: RangeImage,
    pub mapping: CamRVMapping,
    pub image: CameraImage,
    /// Per-pixel camera labels, when available (camera backbone training).
    pub image_labels: Option<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOps {
    pub hflip_prob: f64,
    pub crop: Option<(usize, usize)>,
}

impl Sample {
    /// Mirrors every range-view raster and the mapping grid horizontally.
    pub fn hflip(&mut self) {
        self.range.flip_columns();
        self.mapping.flip_columns();
    }

    pub fn crop(&mut self, rows: Range<usize>, cols: Range<usize>) {
        self.range = self.range.crop(rows.clone(), cols.clone());
        self.mapping = self.mapping.crop(rows, cols);
    }
}

/// Random horizontal flip and crop, drawn from `rng`.
pub fn augment_with<R: Rng>(mut sample: Sample, ops: &AugmentOps, rng: &mut R) -> Result<Sample> {
    if let Some((h, w)) = ops.crop {
        if h == 0 || w == 0 || h > sample.range.height || w > sample.range.width {
            return Err(Error::invalid(
                "augment",
                format!(
                    "crop {h}x{w} does not fit image {}x{}",
                    sample.range.height, sample.range.width
                ),
            ));
        }
    }
    if ops.hflip_prob > 0.0 && rng.random::<f64>() < ops.hflip_prob {
        sample.hflip();
    }
    if let Some((h, w)) = ops.crop {
        let y0 = rng.random_range(0..=sample.range.height - h);
        let x0 = rng.random_range(0..=sample.range.width - w);
        sample.crop(y0..y0 + h, x0..x0 + w);
    }
    Ok(sample)
}

/// Deterministic augmentation from a seed.
pub fn augment(sample: Sample, ops: &AugmentOps, seed: u64) -> Result<Sample> {
    augment_with(sample, ops, &mut ChaCha8Rng::seed_from_u64(seed))
}
