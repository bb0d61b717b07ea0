//! KITTI-style frame files, PNM images, label remapping and prediction export.
//!
//! Directory layout:
//!
//! ```text
//! <root>/calib.txt
//! <root>/velodyne/<id>.bin      x, y, z, remission as little-endian f32
//! <root>/labels/<id>.label      little-endian u32, class in the low 16 bits
//! <root>/image_2/<id>.ppm       binary P6
//! <root>/image_labels/<id>.pgm  binary P5, optional per-pixel camera labels
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camproj::{build_mapping, CameraModel};
use crate::error::{Error, Result};
use crate::numcore::{Shape, Tensor};
use crate::rangeview::{build_range_image, spherical_project, CameraImage, PointCloud, ProjectionIndex, Sample, SensorConfig};
use crate::IGNORE_LABEL;

mod synth;

pub use synth::{gen_synthetic, ObjectCounts, SyntheticSceneSpec, AMBIGUOUS_PAIR, SYNTHETIC_CLASSES};

/// One frame: scan, image and calibration, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub id: String,
    /// Point labels, when present, are already in training ids.
    pub cloud: PointCloud,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: CameraImage,
    pub camera: CameraModel,
    /// Per camera pixel, row-major.
    pub image_labels: Option<Vec<u8>>,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let s = self.image.shape();
        if (s.n, s.c, s.h, s.w) != (1, 3, self.camera.image_height, self.camera.image_width) {
            return Err(Error::Format(format!(
                "frame {}: image is {s} but calibration says {}x{}",
                self.id, self.camera.image_height, self.camera.image_width
            )));
        }
        if let Some(l) = &self.image_labels {
            if l.len() != s.h * s.w {
                return Err(Error::Format(format!("frame {}: {} image labels for {}x{}", self.id, l.len(), s.h, s.w)));
            }
        }
        Ok(())
    }

    /// Range image, camera mapping and projection index under `sensor`.
    pub fn to_sample(&self, sensor: &SensorConfig) -> Result<(Sample, ProjectionIndex)> {
        let index = spherical_project(&self.cloud, sensor)?;
        let range = build_range_image(&self.cloud, &index)?;
        let mapping = build_mapping(&self.cloud, &index, &self.camera)?;
        let sample = Sample {
            range,
            mapping,
            image: self.image.clone(),
            image_labels: self.image_labels.clone(),
        };
        Ok((sample, index))
    }
}

/// Raw dataset ids → training ids. Unlisted ids map to the ignore label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub classes: Vec<String>,
    /// `[raw, train]` pairs. The first raw id listed for a class is used on export.
    pub map: Vec<(u32, u8)>,
}

impl LabelMap {
    pub fn identity(names: &[&str]) -> Self {
        LabelMap {
            classes: names.iter().map(|s| s.to_string()).collect(),
            map: (0..names.len()).map(|c| (c as u32, c as u8)).collect(),
        }
    }

    /// The 19-class SemanticKITTI table shipped in `configs/semantic_kitti.toml`.
    pub fn semantic_kitti() -> Self {
        Self::from_toml(include_str!("../../../configs/semantic_kitti.toml")).expect("bundled label map parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: LabelMap = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() >= IGNORE_LABEL as usize {
            return Err(Error::Config(format!("label map needs 1..255 classes, has {}", self.classes.len())));
        }
        let mut seen = BTreeMap::new();
        for &(raw, class) in &self.map {
            if class != IGNORE_LABEL && class as usize >= self.classes.len() {
                return Err(Error::Config(format!("raw id {raw} maps to class {class} ≥ {}", self.classes.len())));
            }
            if seen.insert(raw, class).is_some() {
                return Err(Error::Config(format!("raw id {raw} is mapped twice")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn to_train(&self, raw: u32) -> u8 {
        self.map.iter().find(|(r, _)| *r == raw).map_or(IGNORE_LABEL, |(_, c)| *c)
    }

    /// Raw id used when exporting `class`.
    pub fn to_raw(&self, class: u8) -> u16 {
        self.map
            .iter()
            .find(|(_, c)| *c == class)
            .map_or(0, |(r, _)| *r as u16)
    }
}

pub fn read_scan(path: &Path) -> Result<Vec<[f32; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of 16-byte points",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|p| std::array::from_fn(|k| f32::from_le_bytes(p[4 * k..4 * k + 4].try_into().unwrap())))
        .collect())
}

pub fn write_scan(path: &Path, points: &[[f32; 4]]) -> Result<()> {
    let bytes: Vec<u8> = points.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Raw 32-bit label words.
pub fn read_label_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: {} bytes is not a whole number of labels", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|w| u32::from_le_bytes(w.try_into().unwrap())).collect())
}

/// Semantic class of a label word; the upper half is the instance id.
pub fn semantic_class(word: u32) -> u16 {
    (word & 0xFFFF) as u16
}

/// One little-endian word per point with the class in the low 16 bits.
pub fn write_predictions(labels: &[u16], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| (*l as u32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `KEY: v v v ...` lines.
pub fn parse_calib(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, values) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("calib line {}: expected `KEY: values`", n + 1)))?;
        let values = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("calib line {}: {e}", n + 1))))
            .collect::<Result<Vec<f64>>>()?;
        out.insert(key.trim().to_string(), values);
    }
    Ok(out)
}

fn calib_matrix<'a>(calib: &'a BTreeMap<String, Vec<f64>>, keys: &[&str]) -> Result<&'a [f64]> {
    let (key, m) = keys
        .iter()
        .find_map(|k| calib.get(*k).map(|m| (*k, m)))
        .ok_or_else(|| Error::MissingCalibKey(keys[0].to_string()))?;
    if m.len() != 12 {
        return Err(Error::Format(format!("calib {key}: expected 12 values, got {}", m.len())));
    }
    Ok(m)
}

/// Camera model from the `P2` projection matrix and the `Tr` lidar → camera
/// transform. The fourth column of `P2` is folded into the translation.
pub fn camera_from_calib(calib: &BTreeMap<String, Vec<f64>>, image_height: usize, image_width: usize) -> Result<CameraModel> {
    let p = calib_matrix(calib, &["P2"])?;
    let tr = calib_matrix(calib, &["Tr", "Tr_velo_to_cam"])?;
    let (fx, cx, fy, cy) = (p[0], p[2], p[5], p[6]);
    if fx <= 0.0 || fy <= 0.0 {
        return Err(Error::Format(format!("calib P2: non-positive focal length ({fx}, {fy})")));
    }
    let tz = p[11];
    let extra = [(p[3] - cx * tz) / fx, (p[7] - cy * tz) / fy, tz];
    let cam = CameraModel {
        fx,
        fy,
        cx,
        cy,
        rotation: [[tr[0], tr[1], tr[2]], [tr[4], tr[5], tr[6]], [tr[8], tr[9], tr[10]]],
        translation: [tr[3] + extra[0], tr[7] + extra[1], tr[11] + extra[2]],
        image_height,
        image_width,
    };
    cam.validate()?;
    Ok(cam)
}

pub fn format_calib(cam: &CameraModel) -> String {
    let r = &cam.rotation;
    let t = &cam.translation;
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!(
        "P2: {}\nTr: {}\n",
        row(&[cam.fx, 0.0, cam.cx, 0.0, 0.0, cam.fy, cam.cy, 0.0, 0.0, 0.0, 1.0, 0.0]),
        row(&[r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2]])
    )
}

/// Header fields of a binary PNM file and the offset of its raster.
fn pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected a {} file", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PNM {w}x{h} maxval {maxval}")));
    }
    Ok((w, h, maxval, pos))
}

/// P6 image as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<CameraImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, start) = pnm_header(&bytes, b"P6").map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let raster = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| Error::Format(format!("{}: truncated raster", path.display())))?;
    let maxval = maxval as f32;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| raster[3 * (y * w + x) + c] as f32 / maxval))
}

/// Writes a `(1, 3, H, W)` tensor, clamped to `[0, 1]`, as 8-bit P6.
pub fn write_ppm(path: &Path, image: &CameraImage) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid("write_ppm", format!("expected (1, 3, H, W), got {s}")));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// P5 raster as raw bytes with its `(height, width)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, _, start) = pnm_header(&bytes, b"P5").map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Format(format!("{}: truncated raster", path.display())))?;
    Ok((h, w, raster.to_vec()))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, raster: &[u8]) -> Result<()> {
    if raster.len() != height * width {
        return Err(Error::invalid("write_pgm", format!("{} values for {height}x{width}", raster.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(raster);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Colors a label raster with `palette`; ignored pixels are black.
pub fn render_labels(height: usize, width: usize, labels: &[u8], palette: &[[f32; 3]]) -> CameraImage {
    Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
        palette.get(labels[y * width + x] as usize).map_or(0.0, |p| p[c])
    })
}

fn frame_paths(root: &Path, id: &str) -> [PathBuf; 4] {
    [
        root.join("velodyne").join(format!("{id}.bin")),
        root.join("labels").join(format!("{id}.label")),
        root.join("image_2").join(format!("{id}.ppm")),
        root.join("image_labels").join(format!("{id}.pgm")),
    ]
}

/// Frame ids present under `<root>/velodyne`, sorted.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("velodyne");
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "bin").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    ids.sort();
    Ok(ids)
}

/// Loads one frame; label files are optional and remapped through `labels`.
pub fn load_frame(root: &Path, id: &str, labels: &LabelMap) -> Result<FrameBundle> {
    let [scan, label, image, image_labels] = frame_paths(root, id);
    let points = read_scan(&scan)?;
    let point_labels = if label.exists() {
        let words = read_label_file(&label)?;
        if words.len() != points.len() {
            return Err(Error::Format(format!(
                "frame {id}: {} labels for {} points",
                words.len(),
                points.len()
            )));
        }
        Some(words.into_iter().map(|w| labels.to_train(semantic_class(w) as u32)).collect())
    } else {
        None
    };
    let cloud = PointCloud::new(points, point_labels)?;
    let image = read_ppm(&image)?;
    let calib_path = root.join("calib.txt");
    let calib = parse_calib(&fs::read_to_string(&calib_path).map_err(|e| Error::io(&calib_path, e))?)?;
    let s = image.shape();
    let camera = camera_from_calib(&calib, s.h, s.w)?;
    let image_labels = if image_labels.exists() {
        let (h, w, raster) = read_pgm(&image_labels)?;
        if (h, w) != (s.h, s.w) {
            return Err(Error::Format(format!("frame {id}: image labels are {h}x{w}, image {}x{}", s.h, s.w)));
        }
        Some(raster)
    } else {
        None
    };
    let frame = FrameBundle {
        id: id.to_string(),
        cloud,
        image,
        camera,
        image_labels,
    };
    frame.validate()?;
    Ok(frame)
}

/// Writes a frame in the layout [`load_frame`] reads, overwriting `calib.txt`.
pub fn write_frame(root: &Path, frame: &FrameBundle, labels: &LabelMap) -> Result<()> {
    frame.validate()?;
    for dir in ["velodyne", "labels", "image_2", "image_labels"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let [scan, label, image, image_labels] = frame_paths(root, &frame.id);
    write_scan(&scan, frame.cloud.points())?;
    if let Some(l) = frame.cloud.labels() {
        write_predictions(&l.iter().map(|c| labels.to_raw(*c)).collect::<Vec<_>>(), &label)?;
    }
    write_ppm(&image, &frame.image)?;
    if let Some(l) = &frame.image_labels {
        write_pgm(&image_labels, frame.camera.image_height, frame.camera.image_width, l)?;
    }
    let calib = root.join("calib.txt");
    fs::write(&calib, format_calib(&frame.camera)).map_err(|e| Error::io(&calib, e))
}
