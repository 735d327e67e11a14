//! Peak extraction: local-maximum suppression over a cubic neighborhood,
//! per-class thresholds, and conversion of peak voxels to physical picks.
//!
//! A voxel is a peak when nothing in its `k³` neighborhood (clipped to the
//! volume) is larger and no equal-valued neighbor precedes it in `(z, y, x)`
//! order, so every plateau yields exactly one peak.

use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{CoordConvention, ParticleClassSpec, Pick, PickSet};
use crate::volgrid::{voxel_count, Heatmap};

pub const DEFAULT_NMS_KERNEL: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("NMS kernel must be odd and >= 1, got {0}")]
    EvenKernel(usize),
    #[error("heatmap has {heatmap} channels but {classes} classes are configured")]
    ClassCount { heatmap: usize, classes: usize },
    #[error("channel holds {actual} values, dims need {expected}")]
    Length { expected: usize, actual: usize },
}

/// Sliding max along `axis` over offsets `lo..=hi` relative to each voxel,
/// clipped to bounds; empty windows give `-inf`.
fn axis_max(src: &[f32], dims: [usize; 3], axis: usize, lo: isize, hi: isize) -> Vec<f32> {
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let len = dims[axis] as isize;
    let mut out = vec![f32::NEG_INFINITY; src.len()];
    out.par_chunks_mut(dims[1] * dims[2])
        .enumerate()
        .for_each(|(z, plane)| {
            for (p, slot) in plane.iter_mut().enumerate() {
                let idx = z * dims[1] * dims[2] + p;
                let pos = [z, p / dims[2], p % dims[2]][axis] as isize;
                let a = (pos + lo).max(0);
                let b = (pos + hi).min(len - 1);
                let mut m = f32::NEG_INFINITY;
                for q in a..=b {
                    let j = (idx as isize + (q - pos) * stride as isize) as usize;
                    m = m.max(src[j]);
                }
                *slot = m;
            }
        });
    out
}

/// Peaks of one channel as `([z, y, x], value)`, in `(z, y, x)` order.
pub fn local_maxima(
    channel: &[f32],
    dims: [usize; 3],
    kernel: usize,
) -> Result<Vec<([usize; 3], f32)>, PostprocError> {
    if kernel.is_multiple_of(2) {
        return Err(PostprocError::EvenKernel(kernel));
    }
    if channel.len() != voxel_count(dims) {
        return Err(PostprocError::Length {
            expected: voxel_count(dims),
            actual: channel.len(),
        });
    }
    let r = (kernel / 2) as isize;
    let fx = axis_max(channel, dims, 2, -r, r);
    let fxy = axis_max(&fx, dims, 1, -r, r);
    let full = axis_max(&fxy, dims, 0, -r, r);
    // Maxima over the parts of the neighborhood that precede a voxel.
    let before_z = axis_max(&fxy, dims, 0, -r, -1);
    let before_y = axis_max(&fx, dims, 1, -r, -1);
    let before_x = axis_max(channel, dims, 2, -r, -1);

    let plane = dims[1] * dims[2];
    let mut peaks = Vec::new();
    for (i, &v) in channel.iter().enumerate() {
        if v == full[i] && before_z[i] < v && before_y[i] < v && before_x[i] < v {
            peaks.push(([i / plane, (i % plane) / dims[2], i % dims[2]], v));
        }
    }
    Ok(peaks)
}

/// Thresholded peaks of every class channel, converted to physical picks.
pub fn extract_picks(
    heatmap: &Heatmap,
    classes: &[ParticleClassSpec],
    kernel: usize,
    conv: CoordConvention,
) -> Result<PickSet, PostprocError> {
    if heatmap.classes() != classes.len() {
        return Err(PostprocError::ClassCount {
            heatmap: heatmap.classes(),
            classes: classes.len(),
        });
    }
    let per_class = classes
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let peaks = local_maxima(heatmap.channel(c), heatmap.dims(), kernel)?;
            Ok(peaks
                .into_iter()
                .filter(|&(_, v)| v as f64 >= spec.detect_threshold)
                .map(|([z, y, x], v)| Pick {
                    class_id: c,
                    x: conv.pixel_to_phys(x as i64),
                    y: conv.pixel_to_phys(y as i64),
                    z: conv.pixel_to_phys(z as i64),
                    score: Some(v),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, PostprocError>>()?;
    Ok(PickSet::new(per_class.into_iter().flatten().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], pts: &[([usize; 3], f32)]) -> Vec<f32> {
        let mut v = vec![0.0; voxel_count(dims)];
        for &([z, y, x], val) in pts {
            v[(z * dims[1] + y) * dims[2] + x] = val;
        }
        v
    }

    #[test]
    fn weaker_neighbor_is_suppressed() {
        let dims = [12, 12, 12];
        let v = grid(dims, &[([5, 5, 5], 0.9), ([5, 5, 8], 0.8)]);
        let peaks = local_maxima(&v, dims, 7).unwrap();
        let strong: Vec<_> = peaks.iter().filter(|p| p.1 > 0.0).collect();
        assert_eq!(strong, vec![&([5, 5, 5], 0.9)]);
        let peaks = local_maxima(&v, dims, 5).unwrap();
        assert_eq!(peaks.iter().filter(|p| p.1 > 0.0).count(), 2);
    }

    #[test]
    fn plateau_gives_one_peak() {
        let dims = [4, 4, 4];
        let peaks = local_maxima(&vec![1.0; 64], dims, 7).unwrap();
        assert_eq!(peaks, vec![([0, 0, 0], 1.0)]);
        let v = grid(dims, &[([1, 2, 2], 0.5), ([1, 2, 3], 0.5)]);
        let peaks: Vec<_> = local_maxima(&v, dims, 3)
            .unwrap()
            .into_iter()
            .filter(|p| p.1 > 0.0)
            .collect();
        assert_eq!(peaks, vec![([1, 2, 2], 0.5)]);
    }

    #[test]
    fn kernel_one_keeps_everything() {
        let dims = [3, 4, 5];
        let v: Vec<f32> = (0..60).map(|i| (i % 7) as f32).collect();
        assert_eq!(local_maxima(&v, dims, 1).unwrap().len(), 60);
        assert_eq!(local_maxima(&v, dims, 4), Err(PostprocError::EvenKernel(4)));
    }

    #[test]
    fn physical_conversion_and_threshold() {
        let dims = [16, 24, 32];
        let v = grid(dims, &[([10, 20, 30], 0.9), ([2, 3, 4], 0.4)]);
        let hm = Heatmap::new(1, dims, v, 10.012).unwrap();
        let classes = vec![ParticleClassSpec {
            name: "a".into(),
            radius: 60.0,
            sigma_vox: 3.0,
            detect_threshold: 0.5,
            match_radius_tau: 60.0,
            metric_weight: 1.0,
        }];
        let picks = extract_picks(&hm, &classes, 7, CoordConvention::default()).unwrap();
        assert_eq!(picks.len(), 1);
        let p = &picks.records[0];
        assert!((p.x - 295.354).abs() < 1e-9);
        assert!((p.y - 195.234).abs() < 1e-9);
        assert!((p.z - 95.114).abs() < 1e-9);
        assert_eq!(p.score, Some(0.9));
    }
}
