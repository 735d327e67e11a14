//! Dense volume storage, the `VOL1`/`HMC1` binary formats, and padding.
//!
//! Every grid is stored z-major: the value at `(z, y, x)` lives at offset
//! `(z * height + y) * width + x`.
//!
//! `VOL1` layout (all little-endian):
//!
//! | bytes | field                      |
//! |-------|----------------------------|
//! | 4     | magic `VOL1`               |
//! | 12    | depth, height, width (u32) |
//! | 4     | spacing (f32)              |
//! | 4·N   | values (f32), z-major      |
//!
//! `HMC1` inserts a u32 channel count between the magic and the dims, and the
//! payload holds the channels back to back.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// Physical units per voxel edge used throughout the pipeline by default.
pub const DEFAULT_SPACING: f32 = 10.012;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
pub const HEATMAP_MAGIC: &[u8; 4] = b"HMC1";

/// Byte length of the `VOL1` header.
pub const VOLUME_HEADER_LEN: usize = 20;
/// Byte length of the `HMC1` header.
pub const HEATMAP_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("dimensions {dims:?} overflow the addressable size")]
    DimOverflow { dims: Vec<u64> },
    #[error("zero-sized dimension in {dims:?}")]
    ZeroDim { dims: Vec<usize> },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("non-finite value at offset {index}")]
    NonFinite { index: usize },
    #[error("spacing must be finite and positive, got {0}")]
    InvalidSpacing(f32),
    #[error("value count {actual} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("reflect pad {pad} on axis {axis} needs axis length > pad, got {len}")]
    ReflectPadTooLarge { axis: usize, pad: usize, len: usize },
    #[error("crop {origin:?}+{size:?} exceeds dims {dims:?}")]
    CropOutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        dims: [usize; 3],
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[inline]
pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDim {
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

fn check_spacing(spacing: f32) -> Result<()> {
    if spacing.is_finite() && spacing > 0.0 {
        Ok(())
    } else {
        Err(VolumeError::InvalidSpacing(spacing))
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(VolumeError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense scalar grid `(depth, height, width)` with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    values: Vec<f32>,
    spacing: f32,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], values: Vec<f32>, spacing: f32) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let expected = voxel_count(dims);
        if values.len() != expected {
            return Err(VolumeError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self {
            dims,
            values,
            spacing,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32, spacing: f32) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)], spacing)
    }

    pub fn zeros(dims: [usize; 3], spacing: f32) -> Result<Self> {
        Self::filled(dims, 0.0, spacing)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn spacing(&self) -> f32 {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        linear_index(self.dims, z, y, x)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    /// Sets one voxel. Non-finite values are rejected so the finiteness
    /// invariant holds after every mutation.
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(VolumeError::NonFinite {
                index: self.index(z, y, x),
            });
        }
        let i = self.index(z, y, x);
        self.values[i] = value;
        Ok(())
    }

    /// Copies out the sub-grid `[origin, origin + size)`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume3D> {
        let values = crop_values(&self.values, self.dims, origin, size)?;
        Ok(Volume3D {
            dims: size,
            values,
            spacing: self.spacing,
        })
    }
}

fn crop_values(
    values: &[f32],
    dims: [usize; 3],
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<f32>> {
    check_dims(size)?;
    if (0..3).any(|a| origin[a] + size[a] > dims[a]) {
        return Err(VolumeError::CropOutOfBounds { origin, size, dims });
    }
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = linear_index(dims, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&values[start..start + size[2]]);
        }
    }
    Ok(out)
}

/// Per-class stack of volume-shaped channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    classes: usize,
    dims: [usize; 3],
    values: Vec<f32>,
    spacing: f32,
}

impl Heatmap {
    pub fn new(classes: usize, dims: [usize; 3], values: Vec<f32>, spacing: f32) -> Result<Self> {
        if classes == 0 {
            return Err(VolumeError::ZeroDim {
                dims: vec![classes, dims[0], dims[1], dims[2]],
            });
        }
        check_dims(dims)?;
        check_spacing(spacing)?;
        let expected =
            classes
                .checked_mul(voxel_count(dims))
                .ok_or_else(|| VolumeError::DimOverflow {
                    dims: vec![
                        classes as u64,
                        dims[0] as u64,
                        dims[1] as u64,
                        dims[2] as u64,
                    ],
                })?;
        if values.len() != expected {
            return Err(VolumeError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self {
            classes,
            dims,
            values,
            spacing,
        })
    }

    pub fn zeros(classes: usize, dims: [usize; 3], spacing: f32) -> Result<Self> {
        Self::new(
            classes,
            dims,
            vec![0.0; classes * voxel_count(dims)],
            spacing,
        )
    }

    /// Stacks single-class volumes into one heatmap.
    pub fn from_channels(channels: &[Volume3D]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or(VolumeError::ZeroDim { dims: vec![0] })?;
        let mut values = Vec::with_capacity(channels.len() * voxel_count(first.dims));
        for ch in channels {
            if ch.dims != first.dims {
                return Err(VolumeError::ShapeMismatch(format!(
                    "channel dims {:?} vs {:?}",
                    ch.dims, first.dims
                )));
            }
            values.extend_from_slice(&ch.values);
        }
        Self::new(channels.len(), first.dims, values, first.spacing)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f32 {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn channel(&self, class: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.values[class * n..(class + 1) * n]
    }

    pub fn channel_mut(&mut self, class: usize) -> &mut [f32] {
        let n = voxel_count(self.dims);
        &mut self.values[class * n..(class + 1) * n]
    }

    pub fn channel_volume(&self, class: usize) -> Volume3D {
        Volume3D {
            dims: self.dims,
            values: self.channel(class).to_vec(),
            spacing: self.spacing,
        }
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Heatmap> {
        let mut values = Vec::with_capacity(self.classes * voxel_count(size));
        for c in 0..self.classes {
            values.extend(crop_values(self.channel(c), self.dims, origin, size)?);
        }
        Ok(Heatmap {
            classes: self.classes,
            dims: size,
            values,
            spacing: self.spacing,
        })
    }

    /// Pads every channel independently.
    pub fn pad(&self, before: [usize; 3], after: [usize; 3], mode: PadMode) -> Result<Heatmap> {
        let channels = (0..self.classes)
            .map(|c| pad_volume(&self.channel_volume(c), before, after, mode))
            .collect::<Result<Vec<_>>>()?;
        Heatmap::from_channels(&channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Mirror about the edge sample without repeating it: `[a,b,c]` → `[b,a,b,c,b]`.
    #[default]
    Reflect,
    Zero,
}

#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Grows `vol` by `before`/`after` voxels per axis.
pub fn pad_volume(
    vol: &Volume3D,
    before: [usize; 3],
    after: [usize; 3],
    mode: PadMode,
) -> Result<Volume3D> {
    let dims = vol.dims;
    if mode == PadMode::Reflect {
        for axis in 0..3 {
            let pad = before[axis].max(after[axis]);
            if pad >= dims[axis] {
                return Err(VolumeError::ReflectPadTooLarge {
                    axis,
                    pad,
                    len: dims[axis],
                });
            }
        }
    }
    let out_dims = [
        dims[0] + before[0] + after[0],
        dims[1] + before[1] + after[1],
        dims[2] + before[2] + after[2],
    ];
    let mut out = vec![0.0f32; voxel_count(out_dims)];
    for oz in 0..out_dims[0] {
        let sz = oz as isize - before[0] as isize;
        for oy in 0..out_dims[1] {
            let sy = oy as isize - before[1] as isize;
            let row = &mut out[linear_index(out_dims, oz, oy, 0)..][..out_dims[2]];
            match mode {
                PadMode::Zero => {
                    let inside_zy =
                        sz >= 0 && (sz as usize) < dims[0] && sy >= 0 && (sy as usize) < dims[1];
                    if inside_zy {
                        let src = &vol.values[linear_index(dims, sz as usize, sy as usize, 0)..]
                            [..dims[2]];
                        row[before[2]..before[2] + dims[2]].copy_from_slice(src);
                    }
                }
                PadMode::Reflect => {
                    let z = reflect_index(sz, dims[0]);
                    let y = reflect_index(sy, dims[1]);
                    let src = &vol.values[linear_index(dims, z, y, 0)..][..dims[2]];
                    for (ox, v) in row.iter_mut().enumerate() {
                        *v = src[reflect_index(ox as isize - before[2] as isize, dims[2])];
                    }
                }
            }
        }
    }
    Ok(Volume3D {
        dims: out_dims,
        values: out,
        spacing: vol.spacing,
    })
}

/// Pads each axis symmetrically (extra voxel after) so it reaches `target`;
/// axes already at or above target are left alone. Returns the pads used.
pub fn centered_pads(dims: [usize; 3], target: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut before = [0; 3];
    let mut after = [0; 3];
    for a in 0..3 {
        if target[a] > dims[a] {
            let total = target[a] - dims[a];
            before[a] = total / 2;
            after[a] = total - before[a];
        }
    }
    (before, after)
}

// ---- binary formats -------------------------------------------------------

/// Expected `VOL1` file length for `dims`, or `None` if it overflows.
pub fn volume_file_len(dims: [u32; 3]) -> Option<usize> {
    payload_len(&[dims[0], dims[1], dims[2]])?.checked_add(VOLUME_HEADER_LEN)
}

fn payload_len(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_magic(bytes: &[u8], expected: &[u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(VolumeError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if &found != expected {
        return Err(VolumeError::BadMagic {
            found,
            expected: *expected,
        });
    }
    if bytes.len() < header_len {
        return Err(VolumeError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn decode_payload(bytes: &[u8], header_len: usize, dims: &[u32]) -> Result<Vec<f32>> {
    let payload = payload_len(dims).ok_or_else(|| VolumeError::DimOverflow {
        dims: dims.iter().map(|&d| d as u64).collect(),
    })?;
    let expected = payload
        .checked_add(header_len)
        .ok_or_else(|| VolumeError::DimOverflow {
            dims: dims.iter().map(|&d| d as u64).collect(),
        })?;
    if bytes.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VolumeError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(&values)?;
    Ok(values)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    check_magic(bytes, VOLUME_MAGIC, VOLUME_HEADER_LEN)?;
    let dims = [read_u32(bytes, 4), read_u32(bytes, 8), read_u32(bytes, 12)];
    let spacing = read_f32(bytes, 16);
    let values = decode_payload(bytes, VOLUME_HEADER_LEN, &dims)?;
    Volume3D::new(dims.map(|d| d as usize), values, spacing)
}

pub fn encode_volume(vol: &Volume3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 4 * vol.values.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in vol.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&vol.spacing.to_le_bytes());
    for v in &vol.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<Heatmap> {
    check_magic(bytes, HEATMAP_MAGIC, HEATMAP_HEADER_LEN)?;
    let classes = read_u32(bytes, 4);
    let dims = [read_u32(bytes, 8), read_u32(bytes, 12), read_u32(bytes, 16)];
    let spacing = read_f32(bytes, 20);
    let values = decode_payload(
        bytes,
        HEATMAP_HEADER_LEN,
        &[classes, dims[0], dims[1], dims[2]],
    )?;
    Heatmap::new(classes as usize, dims.map(|d| d as usize), values, spacing)
}

pub fn encode_heatmap(hm: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEATMAP_HEADER_LEN + 4 * hm.values.len());
    out.extend_from_slice(HEATMAP_MAGIC);
    out.extend_from_slice(&(hm.classes as u32).to_le_bytes());
    for d in hm.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&hm.spacing.to_le_bytes());
    for v in &hm.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    decode_volume(&fs::read(path)?)
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    decode_heatmap(&fs::read(path)?)
}

pub fn write_heatmap(hm: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_heatmap(hm))?;
    Ok(())
}
