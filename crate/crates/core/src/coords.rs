//! Physical ↔ pixel coordinates, particle class tables, pick sets, and the
//! Gaussian target heatmaps the networks regress.
//!
//! Continuous pixel coordinates place voxel `j` on `[j, j + 1)`, so its center
//! is `j + 0.5`. A physical coordinate maps to `x / spacing + offset`, with
//! `offset = 1.0` by default. Peak extraction inverts this exactly: a peak at
//! integer voxel `i` maps back to `(i + 0.5 - offset) * spacing`.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::volgrid::{voxel_count, Heatmap, VolumeError};

/// Physical units per voxel edge. Files store spacing as `f32`; coordinate
/// math uses this exact value.
pub const DEFAULT_SPACING_F64: f64 = 10.012;

/// Default physical-to-pixel offset.
pub const DEFAULT_OFFSET: f64 = 1.0;

/// Target σ (voxels) used for every class by the variant-A style targets.
pub const UNIFORM_TARGET_SIGMA: f64 = 6.0;

/// Gaussian contributions are dropped beyond this many σ.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("invalid class spec `{name}`: {reason}")]
    InvalidClass { name: String, reason: String },
    #[error("pick {index} refers to class {class_id}, only {classes} configured")]
    UnknownClassId {
        index: usize,
        class_id: usize,
        classes: usize,
    },
    #[error("pick {index} has a non-finite coordinate")]
    NonFinitePick { index: usize },
    #[error("picks line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Conversion between physical particle coordinates and voxel indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordConvention {
    pub spacing: f64,
    pub offset: f64,
}

impl Default for CoordConvention {
    fn default() -> Self {
        Self {
            spacing: DEFAULT_SPACING_F64,
            offset: DEFAULT_OFFSET,
        }
    }
}

impl CoordConvention {
    pub fn new(spacing: f64, offset: f64) -> Self {
        assert!(spacing > 0.0, "spacing must be positive");
        Self { spacing, offset }
    }

    #[inline]
    pub fn phys_to_pixel(&self, x_phys: f64) -> f64 {
        x_phys / self.spacing + self.offset
    }

    /// Voxel index → physical center: add 0.5, remove the offset, scale.
    #[inline]
    pub fn pixel_to_phys(&self, index: i64) -> f64 {
        (index as f64 + 0.5 - self.offset) * self.spacing
    }
}

/// `x_phys / spacing + 1.0`.
pub fn phys_to_pixel(x_phys: f64, spacing: f64) -> f64 {
    CoordConvention::new(spacing, DEFAULT_OFFSET).phys_to_pixel(x_phys)
}

/// `(i + 0.5 - 1.0) * spacing`.
pub fn pixel_to_phys(index: i64, spacing: f64) -> f64 {
    CoordConvention::new(spacing, DEFAULT_OFFSET).pixel_to_phys(index)
}

/// How default target σ values are derived from a class radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaRule {
    /// σ = 6 voxels for every class.
    Uniform,
    /// σ = radius / (2·spacing), clamped to [2, 8] voxels.
    RadiusScaled,
}

impl SigmaRule {
    pub fn sigma_for(self, radius: f64, spacing: f64) -> f64 {
        match self {
            SigmaRule::Uniform => UNIFORM_TARGET_SIGMA,
            SigmaRule::RadiusScaled => (radius / (2.0 * spacing)).clamp(2.0, 8.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleClassSpec {
    pub name: String,
    /// Physical radius.
    pub radius: f64,
    /// Target Gaussian σ in voxels.
    pub sigma_vox: f64,
    pub detect_threshold: f64,
    /// Physical distance within which a prediction counts as a hit.
    pub match_radius_tau: f64,
    pub metric_weight: f64,
}

impl ParticleClassSpec {
    pub fn validate(&self) -> Result<(), CoordError> {
        let fail = |reason: &str| {
            Err(CoordError::InvalidClass {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() || self.name.contains([',', ' ', '=', '\n']) {
            return fail("name must be non-empty without commas, spaces or '='");
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return fail("radius must be positive");
        }
        if !(self.sigma_vox.is_finite() && self.sigma_vox > 0.0) {
            return fail("sigma_vox must be positive");
        }
        if !(self.detect_threshold > 0.0 && self.detect_threshold < 1.0) {
            return fail("detect_threshold must lie in (0, 1)");
        }
        if !(self.match_radius_tau.is_finite() && self.match_radius_tau > 0.0) {
            return fail("match_radius_tau must be positive");
        }
        if !(self.metric_weight.is_finite() && self.metric_weight >= 0.0) {
            return fail("metric_weight must be non-negative");
        }
        Ok(())
    }
}

/// Six generic classes with increasing radius, σ from the radius rule.
pub fn default_class_table(spacing: f64) -> Vec<ParticleClassSpec> {
    (0..6)
        .map(|i| {
            let radius = 40.0 + 10.0 * i as f64;
            ParticleClassSpec {
                name: format!("class{i}"),
                radius,
                sigma_vox: SigmaRule::RadiusScaled.sigma_for(radius, spacing),
                detect_threshold: 0.5,
                match_radius_tau: radius,
                metric_weight: 1.0,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pick {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Detection confidence; absent for ground truth.
    pub score: Option<f32>,
}

impl Pick {
    pub fn new(class_id: usize, x: f64, y: f64, z: f64) -> Self {
        Self {
            class_id,
            x,
            y,
            z,
            score: None,
        }
    }

    pub fn distance(&self, other: &Pick) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Particle centers in physical units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PickSet {
    pub records: Vec<Pick>,
}

pub const PICKS_HEADER: &str = "class,x,y,z,score";

impl PickSet {
    pub fn new(records: Vec<Pick>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_class(&self, class_id: usize) -> impl Iterator<Item = &Pick> {
        self.records.iter().filter(move |p| p.class_id == class_id)
    }

    pub fn validate(&self, classes: usize) -> Result<(), CoordError> {
        for (index, p) in self.records.iter().enumerate() {
            if p.class_id >= classes {
                return Err(CoordError::UnknownClassId {
                    index,
                    class_id: p.class_id,
                    classes,
                });
            }
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(CoordError::NonFinitePick { index });
            }
        }
        Ok(())
    }

    /// Sorts by class, then z, y, x.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            a.class_id
                .cmp(&b.class_id)
                .then(a.z.total_cmp(&b.z))
                .then(a.y.total_cmp(&b.y))
                .then(a.x.total_cmp(&b.x))
        });
    }

    /// Renders the `class,x,y,z,score` text format. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_text(&self, classes: &[ParticleClassSpec]) -> String {
        let mut out = String::from(PICKS_HEADER);
        out.push('\n');
        for p in &self.records {
            let _ = write!(out, "{},{},{},{},", classes[p.class_id].name, p.x, p.y, p.z);
            if let Some(s) = p.score {
                let _ = write!(out, "{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, classes: &[ParticleClassSpec]) -> Result<Self, CoordError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == PICKS_HEADER => {}
            _ => {
                return Err(CoordError::Parse {
                    line: 1,
                    reason: format!("expected header `{PICKS_HEADER}`"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| CoordError::Parse {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let class_id = classes
                .iter()
                .position(|c| c.name == fields[0])
                .ok_or_else(|| err(format!("unknown class `{}`", fields[0])))?;
            let coord = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad coordinate `{s}`")))
            };
            let score = if fields[4].is_empty() {
                None
            } else {
                Some(
                    fields[4]
                        .parse::<f32>()
                        .map_err(|_| err(format!("bad score `{}`", fields[4])))?,
                )
            };
            records.push(Pick {
                class_id,
                x: coord(fields[1])?,
                y: coord(fields[2])?,
                z: coord(fields[3])?,
                score,
            });
        }
        Ok(Self { records })
    }
}

/// Result of rasterizing a pick set.
#[derive(Clone, Debug)]
pub struct RasterizedTargets {
    pub heatmap: Heatmap,
    /// Picks whose center fell outside the volume and were skipped.
    pub skipped: usize,
}

/// Per-class max-combined Gaussian heatmaps: each voxel holds the largest
/// `exp(-d² / 2σ²)` over that class's picks, where `d` is the distance from
/// the voxel center to the pick's continuous pixel coordinate. Contributions
/// beyond `3σ` are dropped.
pub fn rasterize_heatmap(
    picks: &PickSet,
    classes: &[ParticleClassSpec],
    dims: [usize; 3],
    conv: CoordConvention,
) -> Result<RasterizedTargets, CoordError> {
    for c in classes {
        c.validate()?;
    }
    picks.validate(classes.len())?;
    let n = voxel_count(dims);
    let mut values = vec![0.0f32; classes.len() * n];

    let centers: Vec<(usize, [f64; 3])> = picks
        .records
        .iter()
        .map(|p| {
            let c = [p.z, p.y, p.x].map(|v| conv.phys_to_pixel(v));
            (p.class_id, c)
        })
        .collect();
    let inside = |c: &[f64; 3]| (0..3).all(|a| c[a] >= 0.0 && c[a] < dims[a] as f64);
    let skipped = centers.iter().filter(|(_, c)| !inside(c)).count();

    values
        .par_chunks_mut(n)
        .zip(classes.par_iter())
        .enumerate()
        .for_each(|(class_id, (channel, spec))| {
            for (_, center) in centers
                .iter()
                .filter(|(id, c)| *id == class_id && inside(c))
            {
                splat_gaussian(channel, dims, *center, spec.sigma_vox);
            }
        });

    Ok(RasterizedTargets {
        heatmap: Heatmap::new(classes.len(), dims, values, conv.spacing as f32)?,
        skipped,
    })
}

/// Max-combines one truncated Gaussian into `channel`.
fn splat_gaussian(channel: &mut [f32], dims: [usize; 3], center: [f64; 3], sigma: f64) {
    let reach = TRUNCATION_SIGMAS * sigma;
    let reach2 = reach * reach;
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Per-axis voxel range and squared offsets from the center.
    let axis = |a: usize| -> (usize, Vec<f64>) {
        let lo = (center[a] - 0.5 - reach).floor().max(0.0) as usize;
        let hi = ((center[a] - 0.5 + reach).ceil() as i64).min(dims[a] as i64 - 1);
        let d2 = (lo as i64..=hi)
            .map(|j| {
                let d = j as f64 + 0.5 - center[a];
                d * d
            })
            .collect();
        (lo, d2)
    };
    let (z0, dz) = axis(0);
    let (y0, dy) = axis(1);
    let (x0, dx) = axis(2);
    for (iz, &ez) in dz.iter().enumerate() {
        for (iy, &ey) in dy.iter().enumerate() {
            let ezy = ez + ey;
            if ezy > reach2 {
                continue;
            }
            let row = ((z0 + iz) * dims[1] + y0 + iy) * dims[2] + x0;
            for (ix, &ex) in dx.iter().enumerate() {
                let d2 = ezy + ex;
                if d2 <= reach2 {
                    let v = (-d2 * inv).exp() as f32;
                    let slot = &mut channel[row + ix];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
}
