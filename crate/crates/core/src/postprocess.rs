//! kNN refinement: carries range-view predictions back to every 3D point.
//!
//! Several points can fall into one pixel and only the nearest is kept, so a
//! plain lookup smears labels across depth edges. Each point instead votes
//! among the range-closest pixels of a small window around its projection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::{PointCloud, ProjectionIndex, RangeImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    /// Odd window side.
    pub window: usize,
    pub k: usize,
    /// Neighbors farther than this (after weighting) are dropped, in meters.
    pub cutoff: f64,
    /// Pixel-offset scale of the gaussian.
    pub sigma: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            window: 5,
            k: 5,
            cutoff: 1.0,
            sigma: 1.0,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("kNN window must be odd, got {}", self.window)));
        }
        if self.k == 0 || self.k > self.window * self.window {
            return Err(Error::Config(format!(
                "kNN k must be in 1..={}, got {}",
                self.window * self.window,
                self.k
            )));
        }
        if !(self.cutoff >= 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Config("kNN cutoff must be ≥ 0 and sigma > 0".into()));
        }
        Ok(())
    }
}

/// One candidate neighbor: weighted distance, vote weight, row-major pixel.
#[derive(Clone, Copy)]
struct Candidate {
    dist: f64,
    weight: f64,
    pixel: usize,
    label: u8,
}

fn closer(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.dist.total_cmp(&b.dist).then(a.pixel.cmp(&b.pixel))
}

fn check(cloud: &PointCloud, index: &ProjectionIndex, range: &RangeImage, pixel_labels: &[u8]) -> Result<()> {
    let p = index.height * index.width;
    if index.point_pixel.len() != cloud.len() || (range.height, range.width) != (index.height, index.width) || pixel_labels.len() != p {
        return Err(Error::invalid(
            "knn_postprocess",
            format!(
                "{} points / {} indexed, range image {}x{}, {} labels for {}x{}",
                cloud.len(),
                index.point_pixel.len(),
                range.height,
                range.width,
                pixel_labels.len(),
                index.height,
                index.width
            ),
        ));
    }
    Ok(())
}

/// Weighted majority over `survivors`, in the given order; ties go to the
/// smaller class.
fn vote(survivors: &[Candidate]) -> Option<u8> {
    let mut tally = [0f64; 256];
    for c in survivors {
        tally[c.label as usize] += c.weight;
    }
    let mut best: Option<u8> = None;
    for c in survivors {
        let better = match best {
            None => true,
            Some(b) => tally[c.label as usize] > tally[b as usize] || (tally[c.label as usize] == tally[b as usize] && c.label < b),
        };
        if better {
            best = Some(c.label);
        }
    }
    best
}

/// Per-point labels. Within the `S×S` window (no wrap-around) each valid
/// pixel's range gap to the point is divided by `exp(-|offset|²/2σ²)`; the
/// `k` closest (ties by pixel order) within the cutoff vote with weight
/// `exp(-|offset|²/2σ²)`. Points without survivors keep their pixel's label.
pub fn knn_postprocess(
    cloud: &PointCloud,
    index: &ProjectionIndex,
    range: &RangeImage,
    pixel_labels: &[u8],
    cfg: &KnnConfig,
) -> Result<Vec<u8>> {
    cfg.validate()?;
    check(cloud, index, range, pixel_labels)?;
    let (h, w) = (index.height, index.width);
    let half = (cfg.window / 2) as isize;
    let gauss: Vec<f64> = (0..=2 * half * half)
        .map(|d2| (-(d2 as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect();
    let ranges = range.plane(0);

    let labels = (0..cloud.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(cfg.window * cfg.window),
            |cands: &mut Vec<Candidate>, i| {
                let (u, v) = index.pixel_of(i);
                let r = cloud.range(i);
                cands.clear();
                for dv in -half..=half {
                    let vv = v as isize + dv;
                    if vv < 0 || vv >= h as isize {
                        continue;
                    }
                    for du in -half..=half {
                        let uu = u as isize + du;
                        if uu < 0 || uu >= w as isize {
                            continue;
                        }
                        let pixel = vv as usize * w + uu as usize;
                        if !range.mask[pixel] {
                            continue;
                        }
                        let g = gauss[(dv * dv + du * du) as usize];
                        cands.push(Candidate {
                            dist: (ranges[pixel] as f64 - r).abs() / g,
                            weight: g,
                            pixel,
                            label: pixel_labels[pixel],
                        });
                    }
                }
                let k = cfg.k.min(cands.len());
                if k < cands.len() {
                    cands.select_nth_unstable_by(k, closer);
                    cands.truncate(k);
                }
                cands.sort_unstable_by(closer);
                let kept = cands.iter().take_while(|c| c.dist <= cfg.cutoff).count();
                vote(&cands[..kept]).unwrap_or(pixel_labels[v * w + u])
            },
        )
        .collect();
    Ok(labels)
}

/// Exhaustive reference for [`knn_postprocess`]: scans every window pixel,
/// insertion-sorts them and takes the first `k`.
pub fn brute_force_knn_oracle(
    cloud: &PointCloud,
    index: &ProjectionIndex,
    range: &RangeImage,
    pixel_labels: &[u8],
    cfg: &KnnConfig,
) -> Result<Vec<u8>> {
    cfg.validate()?;
    check(cloud, index, range, pixel_labels)?;
    let (h, w) = (index.height, index.width);
    let half = (cfg.window / 2) as i64;
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let (u, v) = index.pixel_of(i);
        let r = cloud.range(i);
        let mut all: Vec<Candidate> = Vec::new();
        let (v0, v1) = ((v as i64 - half).max(0) as usize, (v as i64 + half).min(h as i64 - 1) as usize);
        let (u0, u1) = ((u as i64 - half).max(0) as usize, (u as i64 + half).min(w as i64 - 1) as usize);
        for vv in v0..=v1 {
            for uu in u0..=u1 {
                let (dv, du) = (vv as i64 - v as i64, uu as i64 - u as i64);
                if !range.mask[vv * w + uu] {
                    continue;
                }
                let g = (-((dv * dv + du * du) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp();
                let c = Candidate {
                    dist: (range.range_at(uu, vv) as f64 - r).abs() / g,
                    weight: g,
                    pixel: vv * w + uu,
                    label: pixel_labels[vv * w + uu],
                };
                let at = all.iter().position(|o| closer(&c, o).is_lt()).unwrap_or(all.len());
                all.insert(at, c);
            }
        }
        let mut tally = vec![0f64; 256];
        let mut any = false;
        for c in all.into_iter().take(cfg.k).filter(|c| c.dist <= cfg.cutoff) {
            tally[c.label as usize] += c.weight;
            any = true;
        }
        let mut best = 0;
        for class in 1..256 {
            if tally[class] > tally[best] {
                best = class;
            }
        }
        out.push(if any { best as u8 } else { pixel_labels[v * w + u] });
    }
    Ok(out)
}
