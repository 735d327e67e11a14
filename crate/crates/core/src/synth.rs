//! Deterministic synthetic tomograms with known particle centers.
//!
//! Random streams are Xoshiro256++ generators seeded through SplitMix64
//! (`seed_from_u64`). Uniform reals are `(next_u64 >> 11) * 2^-53`.
//!
//! * Placement uses one stream seeded with `spec.seed`. Classes are placed in
//!   table order, `counts[c]` particles each; every attempt draws z, y, x in
//!   that order, uniform over `[r, dim - r]` in continuous pixel coordinates
//!   (`r` = radius / spacing). An attempt is accepted when the physical
//!   distance to every earlier particle is at least `min_separation`; after
//!   1000 rejected attempts generation fails.
//! * Each particle adds an isotropic Gaussian blob of amplitude 1 and
//!   σ = radius / (2·spacing) voxels, truncated at 3σ.
//! * Noise for slice `z` comes from a stream seeded with
//!   `seed ^ (0xA0761D6478BD642F * (z + 1))` (wrapping). Voxels are visited in
//!   (y, x) order; each draws `u1, u2` and adds
//!   `noise_sigma * sqrt(-2 ln(1 - u1)) * cos(2π u2)`.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{CoordConvention, CoordError, ParticleClassSpec, Pick, PickSet};
use crate::volgrid::{voxel_count, Volume3D, VolumeError};

pub const PLACEMENT_RETRIES: usize = 1000;
const NOISE_STREAM: u64 = 0xA076_1D64_78BD_642F;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(
        "could not place particle {index} of class `{class}` after {PLACEMENT_RETRIES} attempts"
    )]
    Placement { class: String, index: usize },
    #[error("class `{class}` with radius {radius} does not fit in dims {dims:?}")]
    TooLarge {
        class: String,
        radius: f64,
        dims: [usize; 3],
    },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub classes: Vec<ParticleClassSpec>,
    /// Particles per class, parallel to `classes`.
    pub counts: Vec<usize>,
    pub noise_sigma: f64,
    /// Minimum physical distance between any two particle centers.
    pub min_separation: f64,
    pub seed: u64,
    pub conv: CoordConvention,
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.dims.contains(&0) {
            return Err(SynthError::Invalid("dims must be positive".into()));
        }
        if self.counts.len() != self.classes.len() {
            return Err(SynthError::Invalid(format!(
                "{} counts for {} classes",
                self.counts.len(),
                self.classes.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::Invalid("noise_sigma must be >= 0".into()));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(SynthError::Invalid("min_separation must be >= 0".into()));
        }
        for c in &self.classes {
            c.validate()?;
        }
        Ok(())
    }
}

#[inline]
fn uniform(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Renders the scene described by `spec`: a noisy volume plus the exact
/// particle centers.
pub fn generate_tomogram(spec: &SceneSpec) -> Result<(Volume3D, PickSet), SynthError> {
    spec.validate()?;
    let picks = place_particles(spec)?;
    let dims = spec.dims;
    let plane = dims[1] * dims[2];

    let blobs: Vec<([f64; 3], f64)> = picks
        .records
        .iter()
        .map(|p| {
            let c = [p.z, p.y, p.x].map(|v| spec.conv.phys_to_pixel(v));
            let sigma = spec.classes[p.class_id].radius / (2.0 * spec.conv.spacing);
            (c, sigma)
        })
        .collect();

    let mut density = vec![0.0f64; voxel_count(dims)];
    density
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, slab)| {
            for (center, sigma) in &blobs {
                add_blob_slice(slab, z, dims, *center, *sigma);
            }
            if spec.noise_sigma > 0.0 {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(
                    spec.seed ^ NOISE_STREAM.wrapping_mul(z as u64 + 1),
                );
                for v in slab.iter_mut() {
                    let u1 = uniform(&mut rng);
                    let u2 = uniform(&mut rng);
                    let n = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *v += spec.noise_sigma * n;
                }
            }
        });

    let values = density.into_iter().map(|v| v as f32).collect();
    let vol = Volume3D::new(dims, values, spec.conv.spacing as f32)?;
    Ok((vol, picks))
}

fn place_particles(spec: &SceneSpec) -> Result<PickSet, SynthError> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let conv = spec.conv;
    let mut placed: Vec<Pick> = Vec::with_capacity(spec.counts.iter().sum());
    for (class_id, (class, &count)) in spec.classes.iter().zip(&spec.counts).enumerate() {
        let r = class.radius / conv.spacing;
        if spec.dims.iter().any(|&d| 2.0 * r > d as f64) {
            return Err(SynthError::TooLarge {
                class: class.name.clone(),
                radius: class.radius,
                dims: spec.dims,
            });
        }
        for index in 0..count {
            let mut accepted = None;
            for _ in 0..PLACEMENT_RETRIES {
                let mut c = [0.0; 3];
                for (a, slot) in c.iter_mut().enumerate() {
                    *slot = r + uniform(&mut rng) * (spec.dims[a] as f64 - 2.0 * r);
                }
                let to_phys = |p: f64| (p - conv.offset) * conv.spacing;
                let candidate = Pick::new(class_id, to_phys(c[2]), to_phys(c[1]), to_phys(c[0]));
                if placed
                    .iter()
                    .all(|q| q.distance(&candidate) >= spec.min_separation)
                {
                    accepted = Some(candidate);
                    break;
                }
            }
            match accepted {
                Some(p) => placed.push(p),
                None => {
                    return Err(SynthError::Placement {
                        class: class.name.clone(),
                        index,
                    })
                }
            }
        }
    }
    Ok(PickSet::new(placed))
}

/// Adds the z-slice of one truncated Gaussian blob into `slab`.
fn add_blob_slice(slab: &mut [f64], z: usize, dims: [usize; 3], center: [f64; 3], sigma: f64) {
    let reach = 3.0 * sigma;
    let dz = z as f64 + 0.5 - center[0];
    if dz.abs() > reach {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach2 = reach * reach;
    let span = |a: usize| {
        let lo = (center[a] - 0.5 - reach).floor().max(0.0) as usize;
        let hi = ((center[a] - 0.5 + reach).ceil().max(0.0) as usize).min(dims[a] - 1);
        lo..=hi
    };
    for y in span(1) {
        let dy = y as f64 + 0.5 - center[1];
        let dzy = dz * dz + dy * dy;
        if dzy > reach2 {
            continue;
        }
        let row = &mut slab[y * dims[2]..(y + 1) * dims[2]];
        for x in span(2) {
            let dx = x as f64 + 0.5 - center[2];
            let d2 = dzy + dx * dx;
            if d2 <= reach2 {
                row[x] += (-d2 * inv).exp();
            }
        }
    }
}
