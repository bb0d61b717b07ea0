//! Pinhole camera model and the camera → range-view coordinate mapping.
//!
//! Every range-view pixel that holds a point also knows where that point
//! lands in the camera image. The mapping is built once at full resolution
//! and rescaled to any pair of (range-view stride, camera feature size).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{bilinear_taps, GatherTaps, Graph, Real, Var};
use crate::rangeview::{Overlap, PointCloud, ProjectionIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Lidar → camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Lidar → camera translation in meters.
    pub translation: [f64; 3],
    pub image_height: usize,
    pub image_width: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx {}, fy {})",
                self.fx, self.fy
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lidar point in camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Image coordinates of a lidar point, or `None` behind the camera or
    /// outside the image.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let q = self.to_camera(p);
        if q[2] <= 0.0 {
            return None;
        }
        let xc = self.fx * q[0] / q[2] + self.cx;
        let yc = self.fy * q[1] / q[2] + self.cy;
        let inside = xc >= 0.0
            && yc >= 0.0
            && xc < self.image_width as f64
            && yc < self.image_height as f64;
        inside.then_some((xc, yc))
    }

    /// Forward-looking camera (optical axis along lidar +x, image x along −y,
    /// image y along −z) with the given horizontal field of view.
    pub fn forward_facing(image_height: usize, image_width: usize, hfov_deg: f64, translation: [f64; 3]) -> Self {
        let f = image_width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        CameraModel {
            fx: f,
            fy: f,
            cx: image_width as f64 / 2.0,
            cy: image_height as f64 / 2.0,
            rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            translation,
            image_height,
            image_width,
        }
    }
}

/// Camera coordinates for every full-resolution range-view pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CamRVMapping {
    pub rv_height: usize,
    pub rv_width: usize,
    pub cam_height: usize,
    pub cam_width: usize,
    /// `(xc, yc)` per pixel, row-major; `None` where no point is visible.
    pub coords: Vec<Option<(f64, f64)>>,
    /// `None` only after a crop removed every valid pixel.
    pub overlap: Option<Overlap>,
}

impl CamRVMapping {
    pub fn valid_count(&self) -> usize {
        self.coords.iter().filter(|c| c.is_some()).count()
    }

    pub fn overlap(&self) -> Result<Overlap> {
        self.overlap.ok_or(Error::NoOverlap)
    }

    fn refresh_overlap(&mut self) {
        self.overlap = Overlap::bounding(self.coords.iter().map(Option::is_some), self.rv_width);
    }

    pub(crate) fn flip_columns(&mut self) {
        for row in self.coords.chunks_mut(self.rv_width) {
            row.reverse();
        }
        self.refresh_overlap();
    }

    pub(crate) fn crop(&self, rows: Range<usize>, cols: Range<usize>) -> CamRVMapping {
        let mut coords = Vec::with_capacity(rows.len() * cols.len());
        for v in rows.clone() {
            coords.extend_from_slice(&self.coords[v * self.rv_width + cols.start..v * self.rv_width + cols.end]);
        }
        let mut m = CamRVMapping {
            rv_height: rows.len(),
            rv_width: cols.len(),
            cam_height: self.cam_height,
            cam_width: self.cam_width,
            coords,
            overlap: None,
        };
        m.refresh_overlap();
        m
    }
}

/// Links range-view pixels to camera pixels through their kept 3D points.
pub fn build_mapping(cloud: &PointCloud, index: &ProjectionIndex, cam: &CameraModel) -> Result<CamRVMapping> {
    cam.validate()?;
    if index.point_pixel.len() != cloud.len() {
        return Err(Error::invalid(
            "build_mapping",
            format!("index has {} points, cloud {}", index.point_pixel.len(), cloud.len()),
        ));
    }
    let coords: Vec<Option<(f64, f64)>> = index
        .pixel_point
        .iter()
        .map(|kept| {
            let [x, y, z, _] = cloud.points()[(*kept)? as usize];
            cam.project([x as f64, y as f64, z as f64])
        })
        .collect();
    let overlap = Overlap::bounding(coords.iter().map(Option::is_some), index.width).ok_or(Error::NoOverlap)?;
    Ok(CamRVMapping {
        rv_height: index.height,
        rv_width: index.width,
        cam_height: cam.image_height,
        cam_width: cam.image_width,
        coords,
        overlap: Some(overlap),
    })
}

/// Mapping on a coarse range-view grid with coordinates in feature-map units.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMapping {
    pub stride: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub coords: Vec<Option<(f64, f64)>>,
    pub overlap: Option<Overlap>,
    rows: Range<usize>,
    cols: Range<usize>,
}

impl ScaledMapping {
    /// Overlap rows and columns on this grid.
    pub fn overlap_ranges(&self) -> (Range<usize>, Range<usize>) {
        (self.rows.clone(), self.cols.clone())
    }
}

/// Coarsens the grid by `rv_stride` (each cell takes its first valid member in
/// row-major order) and rescales coordinates to a `feature_size` camera map.
pub fn scale_mapping(map: &CamRVMapping, rv_stride: (usize, usize), feature_size: (usize, usize)) -> Result<ScaledMapping> {
    let (sy, sx) = rv_stride;
    let (hf, wf) = feature_size;
    if sy == 0 || sx == 0 || hf == 0 || wf == 0 {
        return Err(Error::invalid("scale_mapping", "strides and feature size must be ≥ 1"));
    }
    let h = map.rv_height.div_ceil(sy);
    let w = map.rv_width.div_ceil(sx);
    let ky = hf as f64 / map.cam_height as f64;
    let kx = wf as f64 / map.cam_width as f64;
    let mut coords: Vec<Option<(f64, f64)>> = vec![None; h * w];
    for v in 0..map.rv_height {
        for u in 0..map.rv_width {
            let Some((xc, yc)) = map.coords[v * map.rv_width + u] else {
                continue;
            };
            let cell = &mut coords[(v / sy) * w + u / sx];
            if cell.is_none() {
                *cell = Some((xc * kx, yc * ky));
            }
        }
    }
    let (rows, cols) = map
        .overlap
        .map(|o| o.at_stride(rv_stride))
        .unwrap_or((0..0, 0..0));
    Ok(ScaledMapping {
        stride: rv_stride,
        height: h,
        width: w,
        feature_height: hf,
        feature_width: wf,
        coords,
        overlap: map.overlap,
        rows,
        cols,
    })
}

/// Bilinear taps for every coarse cell.
pub fn gather_taps(map: &ScaledMapping) -> Vec<Option<GatherTaps>> {
    map.coords
        .iter()
        .map(|c| c.map(|(x, y)| bilinear_taps(x, y, map.feature_width, map.feature_height)))
        .collect()
}

/// Samples `(1, C, hf, wf)` camera features onto the coarse range-view grid;
/// output `(1, C + 1, h, w)` whose last channel is the validity mask.
pub fn gather_camera_features<T: Real>(g: &mut Graph<T>, features: Var, map: &ScaledMapping) -> Result<Var> {
    let s = g.shape(features);
    if (s.h, s.w) != (map.feature_height, map.feature_width) {
        return Err(Error::invalid(
            "gather_camera_features",
            format!(
                "features are {}x{} but the mapping was scaled to {}x{}",
                s.h, s.w, map.feature_height, map.feature_width
            ),
        ));
    }
    g.gather(features, gather_taps(map), map.height, map.width)
}

#[cfg(test)]
mod tests;
