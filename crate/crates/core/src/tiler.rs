//! Overlapping sliding-window inference over a whole volume.
//!
//! The volume is reflect-padded in XY to `pad_to`, covered by a grid of
//! windows, and every window prediction is blended into the output with a
//! tent-shaped weight mask. The blended result is the voxelwise weighted mean
//! `Σ w·p / Σ w`, accumulated in `f64` in a fixed window order so the output
//! does not depend on how many workers ran the predictor.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::net::{Net, NetError, Tensor4};
use crate::volgrid::{
    centered_pads, pad_volume, voxel_count, Heatmap, PadMode, Volume3D, VolumeError,
};

/// Window edge weight floor.
pub const DEFAULT_EDGE_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("axis {axis}: window {window} exceeds length {length}")]
    WindowTooLarge {
        axis: usize,
        window: usize,
        length: usize,
    },
    #[error("window and stride must be at least 1")]
    ZeroExtent,
    #[error("axis of length {length} is not covered by window {window} at stride {stride} without clamping")]
    Uncovered {
        length: usize,
        window: usize,
        stride: usize,
    },
    #[error("edge floor {0} must lie in [0, 1)")]
    InvalidEdgeFloor(f64),
    #[error("predictor returned {found:?} (classes, dims), expected {expected:?}")]
    PredictorShape {
        expected: (usize, [usize; 3]),
        found: (usize, [usize; 3]),
    },
    #[error("voxel {0:?} received zero total weight")]
    ZeroWeight([usize; 3]),
    #[error("cannot ensemble heatmaps of different shapes")]
    EnsembleShape,
    #[error("ensemble needs at least one heatmap")]
    EmptyEnsemble,
    #[error("volume dims {found:?} do not match the plan's {expected:?}")]
    PlanMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = TileError> = std::result::Result<T, E>;

/// Window origins along one axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisPlan {
    pub length: usize,
    pub window: usize,
    pub stride: usize,
    pub origins: Vec<usize>,
    /// The last origin was pulled back to `length - window`.
    pub clamped_last: bool,
}

/// Origins `0, stride, 2·stride, …` up to `length - window`, plus a clamped
/// final origin at `length - window` when the regular grid falls short and
/// `clamp_last` is set.
pub fn plan_axis(
    length: usize,
    window: usize,
    stride: usize,
    clamp_last: bool,
) -> Result<AxisPlan> {
    if window == 0 || stride == 0 {
        return Err(TileError::ZeroExtent);
    }
    if window > length {
        return Err(TileError::WindowTooLarge {
            axis: 0,
            window,
            length,
        });
    }
    let last = length - window;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    let mut clamped_last = false;
    if *origins.last().unwrap() != last {
        if !clamp_last {
            return Err(TileError::Uncovered {
                length,
                window,
                stride,
            });
        }
        origins.push(last);
        clamped_last = true;
    }
    // A gap opens between windows when stride > window.
    if origins.len() > 1 && stride > window {
        return Err(TileError::Uncovered {
            length,
            window,
            stride,
        });
    }
    Ok(AxisPlan {
        length,
        window,
        stride,
        origins,
        clamped_last,
    })
}

/// Sliding-window geometry, axes ordered `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGeometry {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    /// Reflect-pad Y and X up to this length; z is never padded.
    pub pad_to_xy: usize,
}

impl Default for TileGeometry {
    fn default() -> Self {
        Self {
            window: [16, 128, 128],
            stride: [8, 48, 48],
            pad_to_xy: 656,
        }
    }
}

/// Padding plus per-axis window origins for one volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub source_dims: [usize; 3],
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
    pub axes: [AxisPlan; 3],
}

impl WindowPlan {
    pub fn new(source_dims: [usize; 3], geometry: TileGeometry) -> Result<Self> {
        let target = [
            source_dims[0],
            source_dims[1].max(geometry.pad_to_xy),
            source_dims[2].max(geometry.pad_to_xy),
        ];
        let (pad_before, pad_after) = centered_pads(source_dims, target);
        let mut axes = Vec::with_capacity(3);
        #[allow(clippy::needless_range_loop)]
        for axis in 0..3 {
            let plan = plan_axis(
                target[axis],
                geometry.window[axis],
                geometry.stride[axis],
                true,
            )
            .map_err(|e| match e {
                TileError::WindowTooLarge { window, length, .. } => TileError::WindowTooLarge {
                    axis,
                    window,
                    length,
                },
                other => other,
            })?;
            axes.push(plan);
        }
        let axes: [AxisPlan; 3] = axes.try_into().expect("three axes");
        Ok(Self {
            source_dims,
            pad_before,
            pad_after,
            axes,
        })
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.axes[a].length)
    }

    pub fn window(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.axes[a].window)
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.axes[a].origins.len())
    }

    pub fn window_count(&self) -> usize {
        self.counts().iter().product()
    }

    /// Window origins in padded coordinates, z-major.
    pub fn origins(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.window_count());
        for &z in &self.axes[0].origins {
            for &y in &self.axes[1].origins {
                for &x in &self.axes[2].origins {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    /// Number of windows covering padded voxel `v`.
    pub fn coverage(&self, v: [usize; 3]) -> usize {
        (0..3)
            .map(|a| {
                let p = &self.axes[a];
                p.origins
                    .iter()
                    .filter(|&&o| o <= v[a] && v[a] < o + p.window)
                    .count()
            })
            .product()
    }
}

impl fmt::Display for WindowPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [d, h, w] = self.source_dims;
        let [pd, ph, pw] = self.padded_dims();
        let [cz, cy, cx] = self.counts();
        writeln!(f, "volume {w} x {h} x {d} (x, y, z)")?;
        writeln!(f, "padded {pw} x {ph} x {pd}")?;
        writeln!(f, "xy windows: {cy} x {cx}")?;
        writeln!(f, "z windows: {cz}")?;
        writeln!(f, "total windows: {}", self.window_count())?;
        for (name, axis) in ["z", "y", "x"].iter().zip(&self.axes) {
            let list: Vec<String> = axis.origins.iter().map(|o| o.to_string()).collect();
            writeln!(
                f,
                "{name}: window {} stride {} clamped {} origins {}",
                axis.window,
                axis.stride,
                axis.clamped_last,
                list.join(",")
            )?;
        }
        Ok(())
    }
}

/// One-dimensional tent weight for position `u` of a window of length `l`.
pub fn tent(u: usize, l: usize, edge_floor: f64) -> f64 {
    let l = l as f64;
    let t = 1.0 - (2.0 * (u as f64 + 0.5) - l).abs() / l;
    edge_floor + (1.0 - edge_floor) * t
}

/// Separable per-window weight field.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMask {
    pub dims: [usize; 3],
    pub edge_floor: f64,
    values: Vec<f64>,
}

impl BlendMask {
    /// Product of three axis tents.
    pub fn tent(dims: [usize; 3], edge_floor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&edge_floor) {
            return Err(TileError::InvalidEdgeFloor(edge_floor));
        }
        if dims.contains(&0) {
            return Err(TileError::ZeroExtent);
        }
        let axis =
            |a: usize| -> Vec<f64> { (0..dims[a]).map(|u| tent(u, dims[a], edge_floor)).collect() };
        let (tz, ty, tx) = (axis(0), axis(1), axis(2));
        let mut values = Vec::with_capacity(voxel_count(dims));
        for &wz in &tz {
            for &wy in &ty {
                for &wx in &tx {
                    values.push(wz * wy * wx);
                }
            }
        }
        Ok(Self {
            dims,
            edge_floor,
            values,
        })
    }

    /// All-ones mask: plain averaging of overlapping windows.
    pub fn uniform(dims: [usize; 3]) -> Self {
        Self {
            dims,
            edge_floor: 1.0,
            values: vec![1.0; voxel_count(dims)],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Maps one input window to a per-class heatmap of the same spatial size.
pub trait Predictor: Sync {
    fn classes(&self) -> usize;

    /// `origin` is the window's position in the padded volume.
    fn predict(&self, window: &Volume3D, origin: [usize; 3]) -> Result<Heatmap>;
}

/// Predicts the same value everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor {
    pub classes: usize,
    pub value: f32,
}

impl Predictor for ConstantPredictor {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, window: &Volume3D, _origin: [usize; 3]) -> Result<Heatmap> {
        let n = voxel_count(window.dims());
        Ok(Heatmap::new(
            self.classes,
            window.dims(),
            vec![self.value; n * self.classes],
            window.spacing(),
        )?)
    }
}

/// Crops windows out of a precomputed full-volume heatmap, padded the same
/// way as the input volume.
#[derive(Clone, Debug)]
pub struct HeatmapCropPredictor {
    padded: Heatmap,
}

impl HeatmapCropPredictor {
    pub fn new(heatmap: &Heatmap, plan: &WindowPlan) -> Result<Self> {
        if heatmap.dims() != plan.source_dims {
            return Err(TileError::PlanMismatch {
                expected: plan.source_dims,
                found: heatmap.dims(),
            });
        }
        Ok(Self {
            padded: heatmap.pad(plan.pad_before, plan.pad_after, PadMode::Reflect)?,
        })
    }
}

impl Predictor for HeatmapCropPredictor {
    fn classes(&self) -> usize {
        self.padded.classes()
    }

    fn predict(&self, window: &Volume3D, origin: [usize; 3]) -> Result<Heatmap> {
        Ok(self.padded.crop(origin, window.dims())?)
    }
}

/// Runs a network on each window.
#[derive(Clone, Debug)]
pub struct NetPredictor {
    net: Net<f32>,
}

impl NetPredictor {
    pub fn new(net: Net<f32>) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Net<f32> {
        &self.net
    }
}

impl Predictor for NetPredictor {
    fn classes(&self) -> usize {
        self.net.config().class_count
    }

    fn predict(&self, window: &Volume3D, _origin: [usize; 3]) -> Result<Heatmap> {
        let x = Tensor4::from_volume(window);
        let y = self.net.forward(&x)?;
        Ok(y.to_heatmap(window.spacing())?)
    }
}

/// Options for [`aggregate`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AggregateOptions {
    /// Predictor threads; `0` uses the current rayon pool.
    pub workers: usize,
}

/// Running numerator and weight for one padded z-slice.
struct SliceAcc {
    num: Vec<f64>,
    den: Vec<f64>,
}

/// Blends window predictions over `volume` into a heatmap with the volume's
/// dims.
///
/// Windows are handled one z-origin row at a time, so only the slices that a
/// later row can still touch are held in memory. Within a row, predictions
/// run in parallel but are added in plan order.
pub fn aggregate<P: Predictor + ?Sized>(
    predictor: &P,
    volume: &Volume3D,
    plan: &WindowPlan,
    mask: &BlendMask,
    options: AggregateOptions,
) -> Result<Heatmap> {
    if volume.dims() != plan.source_dims {
        return Err(TileError::PlanMismatch {
            expected: plan.source_dims,
            found: volume.dims(),
        });
    }
    let wdims = plan.window();
    if mask.dims != wdims {
        return Err(TileError::PlanMismatch {
            expected: wdims,
            found: mask.dims,
        });
    }
    let padded = pad_volume(volume, plan.pad_before, plan.pad_after, PadMode::Reflect)?;
    let pool = match options.workers {
        0 => None,
        n => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| TileError::Pool(e.to_string()))?,
        ),
    };

    let classes = predictor.classes();
    let [pd, ph, pw] = plan.padded_dims();
    let src = plan.source_dims;
    let plane = ph * pw;
    let mut out = vec![0.0f32; classes * voxel_count(src)];
    let mut live: BTreeMap<usize, SliceAcc> = BTreeMap::new();

    let z_origins = &plan.axes[0].origins;
    let row_origins: Vec<[usize; 2]> = plan.axes[1]
        .origins
        .iter()
        .flat_map(|&y| plan.axes[2].origins.iter().map(move |&x| [y, x]))
        .collect();

    for (row, &oz) in z_origins.iter().enumerate() {
        let predict_row = || -> Vec<Result<Heatmap>> {
            row_origins
                .par_iter()
                .map(|&[oy, ox]| {
                    let origin = [oz, oy, ox];
                    let window = padded.crop(origin, wdims)?;
                    let pred = predictor.predict(&window, origin)?;
                    if pred.classes() != classes || pred.dims() != wdims {
                        return Err(TileError::PredictorShape {
                            expected: (classes, wdims),
                            found: (pred.classes(), pred.dims()),
                        });
                    }
                    Ok(pred)
                })
                .collect()
        };
        let preds = match &pool {
            Some(p) => p.install(predict_row),
            None => predict_row(),
        };

        for (pred, &[oy, ox]) in preds.into_iter().zip(&row_origins) {
            let pred = pred?;
            for dz in 0..wdims[0] {
                let acc = live.entry(oz + dz).or_insert_with(|| SliceAcc {
                    num: vec![0.0; classes * plane],
                    den: vec![0.0; plane],
                });
                for dy in 0..wdims[1] {
                    let row_base = (oy + dy) * pw + ox;
                    let mrow = &mask.values[(dz * wdims[1] + dy) * wdims[2]..][..wdims[2]];
                    for (i, &m) in mrow.iter().enumerate() {
                        acc.den[row_base + i] += m;
                    }
                    for c in 0..classes {
                        let prow = &pred.channel(c)[(dz * wdims[1] + dy) * wdims[2]..][..wdims[2]];
                        let nrow = &mut acc.num[c * plane + row_base..][..wdims[2]];
                        for ((n, &m), &p) in nrow.iter_mut().zip(mrow).zip(prow) {
                            *n += m * p as f64;
                        }
                    }
                }
            }
        }

        // Slices below the next row's origin are final.
        let done_below = z_origins.get(row + 1).copied().unwrap_or(pd);
        let finished: Vec<usize> = live.range(..done_below).map(|(&z, _)| z).collect();
        for z in finished {
            let acc = live.remove(&z).unwrap();
            finalize_slice(&acc, z, plan, classes, &mut out)?;
        }
    }
    for (z, acc) in std::mem::take(&mut live) {
        finalize_slice(&acc, z, plan, classes, &mut out)?;
    }
    Ok(Heatmap::new(classes, src, out, volume.spacing())?)
}

/// Divides one padded slice and writes its unpadded part into `out`.
fn finalize_slice(
    acc: &SliceAcc,
    z: usize,
    plan: &WindowPlan,
    classes: usize,
    out: &mut [f32],
) -> Result<()> {
    let src = plan.source_dims;
    let [_, ph, pw] = plan.padded_dims();
    let b = plan.pad_before;
    if z < b[0] || z - b[0] >= src[0] {
        return Ok(());
    }
    let sz = z - b[0];
    let plane = ph * pw;
    let n = voxel_count(src);
    for sy in 0..src[1] {
        for sx in 0..src[2] {
            let p = (sy + b[1]) * pw + sx + b[2];
            let w = acc.den[p];
            if w <= 0.0 {
                return Err(TileError::ZeroWeight([sz, sy, sx]));
            }
            for c in 0..classes {
                out[c * n + (sz * src[1] + sy) * src[2] + sx] = (acc.num[c * plane + p] / w) as f32;
            }
        }
    }
    Ok(())
}

/// Voxelwise mean of per-model heatmaps.
pub fn ensemble(heatmaps: &[Heatmap]) -> Result<Heatmap> {
    let first = heatmaps.first().ok_or(TileError::EmptyEnsemble)?;
    if heatmaps
        .iter()
        .any(|h| h.classes() != first.classes() || h.dims() != first.dims())
    {
        return Err(TileError::EnsembleShape);
    }
    let k = heatmaps.len() as f64;
    let values = (0..first.values().len())
        .into_par_iter()
        .map(|i| (heatmaps.iter().map(|h| h.values()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    Ok(Heatmap::new(
        first.classes(),
        first.dims(),
        values,
        first.spacing(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_plans() {
        let p = plan_axis(656, 128, 48, true).unwrap();
        assert_eq!(p.origins.len(), 12);
        assert_eq!(*p.origins.last().unwrap(), 528);
        assert!(!p.clamped_last);

        let p = plan_axis(184, 16, 8, true).unwrap();
        assert_eq!(p.origins.len(), 22);
        assert!(!p.clamped_last);

        let p = plan_axis(184, 32, 16, true).unwrap();
        assert_eq!(p.origins.len(), 11);
        assert_eq!(&p.origins[8..], &[128, 144, 152]);
        assert!(p.clamped_last);

        assert!(matches!(
            plan_axis(184, 32, 16, false),
            Err(TileError::Uncovered { .. })
        ));
        assert!(matches!(
            plan_axis(10, 11, 1, true),
            Err(TileError::WindowTooLarge { .. })
        ));
        assert_eq!(plan_axis(8, 8, 3, true).unwrap().origins, vec![0]);
    }

    #[test]
    fn coarse_xy_stride_gives_eight_windows() {
        let p = plan_axis(656, 128, 76, true).unwrap();
        assert_eq!(p.origins.len(), 8);
        assert!(p.clamped_last);
    }

    #[test]
    fn default_plan_on_full_volume() {
        let plan = WindowPlan::new([184, 630, 630], TileGeometry::default()).unwrap();
        assert_eq!(plan.padded_dims(), [184, 656, 656]);
        assert_eq!(plan.pad_before, [0, 13, 13]);
        assert_eq!(plan.counts(), [22, 12, 12]);
        assert_eq!(plan.coverage([100, 300, 300]), 3 * 3 * 2);
        assert!(plan.to_string().contains("xy windows: 12 x 12"));
    }

    #[test]
    fn tent_values() {
        let l = 8;
        let e = 0.01;
        assert!((tent(3, l, e) - (e + (1.0 - e) * (1.0 - 1.0 / 8.0))).abs() < 1e-15);
        assert!((tent(4, l, e) - tent(3, l, e)).abs() < 1e-15);
        assert!((tent(0, l, e) - (e + (1.0 - e) / 8.0)).abs() < 1e-15);
        let m = BlendMask::tent([4, 6, 8], e).unwrap();
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..8 {
                    assert_eq!(m.get(z, y, x), m.get(3 - z, y, x));
                    assert_eq!(m.get(z, y, x), m.get(z, 5 - y, 7 - x));
                }
            }
        }
        assert!(BlendMask::tent([4, 4, 4], 1.0).is_err());
        assert!(BlendMask::tent([4, 4, 4], -0.1).is_err());
    }

    #[test]
    fn ensemble_means() {
        let zero = Heatmap::zeros(2, [2, 3, 4], 1.0).unwrap();
        let one = Heatmap::new(2, [2, 3, 4], vec![1.0; 48], 1.0).unwrap();
        let e = ensemble(&[zero.clone(), one.clone()]).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.5));
        assert_eq!(
            ensemble(&[one.clone(), one.clone(), one.clone()]).unwrap(),
            one
        );
        assert!(matches!(ensemble(&[]), Err(TileError::EmptyEnsemble)));
        let other = Heatmap::zeros(1, [2, 3, 4], 1.0).unwrap();
        assert!(matches!(
            ensemble(&[one, other]),
            Err(TileError::EnsembleShape)
        ));
    }
}
