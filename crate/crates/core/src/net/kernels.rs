//! Forward and backward kernels on raw tensors. Work is split over output
//! planes so each task owns a disjoint slice; reduction order is fixed, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::net::tensor::Tensor4;
use crate::net::NetError;
use crate::real::Real;

/// Geometry of a same-padded convolution. Padding per axis is
/// `dilation * (kernel - 1) / 2`, so the output extent is
/// `(input - 1) / stride + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    /// `(depth, height, width)` kernel extent, each odd.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1; 3],
            dilation: [1; 3],
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        for a in 0..3 {
            if self.kernel[a].is_multiple_of(2) || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(NetError::Shape(format!(
                    "conv needs odd kernel and positive stride/dilation, got {self:?}"
                )));
            }
        }
        Ok(())
    }

    fn pad(&self, a: usize) -> isize {
        (self.dilation[a] * (self.kernel[a] - 1) / 2) as isize
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| (input[a] - 1) / self.stride[a] + 1)
    }
}

/// Output positions `o` in `[0, out_len)` whose source `o*stride + off` lies
/// in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_src = in_len as isize - 1 - off;
    let hi = if hi_src < 0 {
        0
    } else {
        (hi_src / s + 1).min(out_len as isize)
    };
    (lo as usize, (hi.max(lo)) as usize)
}

struct Geometry {
    ic: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    #[inline]
    fn tap_offsets(&self, kz: usize, ky: usize, kx: usize) -> [isize; 3] {
        let s = &self.spec;
        [
            (kz * s.dilation[0]) as isize - s.pad(0),
            (ky * s.dilation[1]) as isize - s.pad(1),
            (kx * s.dilation[2]) as isize - s.pad(2),
        ]
    }
}

/// `weight` is `[out_ch, in_ch, kd, kh, kw]` row-major, `bias` is `[out_ch]`.
pub fn conv_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_ch: usize,
    spec: &ConvSpec,
) -> Result<Tensor4<T>, NetError> {
    spec.validate()?;
    let [ic, d, h, w] = x.shape();
    if weight.len() != out_ch * ic * spec.taps() {
        return Err(NetError::ChannelMismatch {
            expected: weight.len() / (out_ch * spec.taps()).max(1),
            found: ic,
        });
    }
    let g = Geometry {
        ic,
        ins: [d, h, w],
        outs: spec.output_spatial([d, h, w]),
        spec: *spec,
    };
    let [od, oh, ow] = g.outs;
    let [kd, kh, kw] = spec.kernel;
    let taps = spec.taps();
    let plane_in = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); out_ch * od * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (o, z) = (idx / od, idx % od);
            if let Some(b) = bias {
                plane.fill(b[o]);
            }
            for c in 0..g.ic {
                let wbase = (o * g.ic + c) * taps;
                for kz in 0..kd {
                    let iz = (z * spec.stride[0]) as isize + g.tap_offsets(kz, 0, 0)[0];
                    if iz < 0 || iz >= d as isize {
                        continue;
                    }
                    let src = &xd[(c * d + iz as usize) * plane_in..][..plane_in];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[wbase + (kz * kh + ky) * kw + kx];
                            let off = g.tap_offsets(kz, ky, kx);
                            let (ylo, yhi) = valid_range(oh, h, spec.stride[1], off[1]);
                            let (xlo, xhi) = valid_range(ow, w, spec.stride[2], off[2]);
                            for oy in ylo..yhi {
                                let iy = (oy * spec.stride[1]) as isize + off[1];
                                let in_row = &src[iy as usize * w..][..w];
                                let out_row = &mut plane[oy * ow..][..ow];
                                axpy_row(out_row, in_row, wv, xlo, xhi, spec.stride[2], off[2]);
                            }
                        }
                    }
                }
            }
        });
    Tensor4::new([out_ch, od, oh, ow], out)
}

/// `out[o] += a * inp[o*stride + off]` for `o` in `lo..hi`.
#[inline(always)]
fn axpy_row<T: Real>(
    out: &mut [T],
    inp: &[T],
    a: T,
    lo: usize,
    hi: usize,
    stride: usize,
    off: isize,
) {
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        let src = &inp[start..start + (hi - lo)];
        for (o, &i) in out[lo..hi].iter_mut().zip(src) {
            *o += a * i;
        }
    } else {
        for (k, o) in out[lo..hi].iter_mut().enumerate() {
            *o += a * inp[(((lo + k) * stride) as isize + off) as usize];
        }
    }
}

/// Gradients of [`conv_forward`]: `(d_input, d_weight, d_bias)`. The weight
/// and bias gradients are skipped when `need_params` is false.
#[allow(clippy::needless_range_loop)]
pub fn conv_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    out_ch: usize,
    spec: &ConvSpec,
    grad_out: &Tensor4<T>,
    need_params: bool,
) -> (Tensor4<T>, Option<Vec<T>>, Option<Vec<T>>) {
    let [ic, d, h, w] = x.shape();
    let g = Geometry {
        ic,
        ins: [d, h, w],
        outs: spec.output_spatial([d, h, w]),
        spec: *spec,
    };
    let [od, oh, ow] = g.outs;
    let [kd, kh, kw] = spec.kernel;
    let taps = spec.taps();
    let plane_out = oh * ow;
    let plane_in = h * w;
    let gd = grad_out.data();
    let xd = x.data();

    // d_input: each task owns one input plane and gathers from every output
    // plane that reads it.
    let mut gin = vec![T::zero(); x.data().len()];
    gin.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (c, iz) = (idx / g.ins[0], idx % g.ins[0]);
            for o in 0..out_ch {
                let wbase = (o * ic + c) * taps;
                for kz in 0..kd {
                    let num = iz as isize - g.tap_offsets(kz, 0, 0)[0];
                    if num < 0 || num % spec.stride[0] as isize != 0 {
                        continue;
                    }
                    let z = (num / spec.stride[0] as isize) as usize;
                    if z >= od {
                        continue;
                    }
                    let gsrc = &gd[(o * od + z) * plane_out..][..plane_out];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[wbase + (kz * kh + ky) * kw + kx];
                            let off = g.tap_offsets(kz, ky, kx);
                            let (ylo, yhi) = valid_range(oh, h, spec.stride[1], off[1]);
                            let (xlo, xhi) = valid_range(ow, w, spec.stride[2], off[2]);
                            if xlo >= xhi {
                                continue;
                            }
                            for oy in ylo..yhi {
                                let iy = ((oy * spec.stride[1]) as isize + off[1]) as usize;
                                let grow = &gsrc[oy * ow..][..ow];
                                let irow = &mut plane[iy * w..][..w];
                                if spec.stride[2] == 1 {
                                    let start = (xlo as isize + off[2]) as usize;
                                    for (i, &gv) in irow[start..start + (xhi - xlo)]
                                        .iter_mut()
                                        .zip(&grow[xlo..xhi])
                                    {
                                        *i += wv * gv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = ((ox * spec.stride[2]) as isize + off[2]) as usize;
                                        irow[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    let gin = Tensor4::new(x.shape(), gin).expect("input gradient shape");

    if !need_params {
        return (gin, None, None);
    }

    let mut gw = vec![T::zero(); out_ch * ic * taps];
    gw.par_chunks_mut(ic * taps)
        .enumerate()
        .for_each(|(o, gwo)| {
            for z in 0..od {
                let gsrc = &gd[(o * od + z) * plane_out..][..plane_out];
                for c in 0..ic {
                    for kz in 0..kd {
                        let iz = (z * spec.stride[0]) as isize + g.tap_offsets(kz, 0, 0)[0];
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let src = &xd[(c * d + iz as usize) * plane_in..][..plane_in];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let off = g.tap_offsets(kz, ky, kx);
                                let (ylo, yhi) = valid_range(oh, h, spec.stride[1], off[1]);
                                let (xlo, xhi) = valid_range(ow, w, spec.stride[2], off[2]);
                                let mut acc = T::zero();
                                for oy in ylo..yhi {
                                    let iy = ((oy * spec.stride[1]) as isize + off[1]) as usize;
                                    let grow = &gsrc[oy * ow..][..ow];
                                    let irow = &src[iy * w..][..w];
                                    acc += dot_row(grow, irow, xlo, xhi, spec.stride[2], off[2]);
                                }
                                gwo[c * taps + (kz * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
    let gb: Vec<T> = (0..out_ch)
        .map(|o| {
            gd[o * od * plane_out..(o + 1) * od * plane_out]
                .iter()
                .copied()
                .sum()
        })
        .collect();
    (gin, Some(gw), Some(gb))
}

#[inline(always)]
fn dot_row<T: Real>(g: &[T], inp: &[T], lo: usize, hi: usize, stride: usize, off: isize) -> T {
    if lo >= hi {
        return T::zero();
    }
    let mut acc = T::zero();
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        for (&a, &b) in g[lo..hi].iter().zip(&inp[start..start + (hi - lo)]) {
            acc += a * b;
        }
    } else {
        for ox in lo..hi {
            acc += g[ox] * inp[((ox * stride) as isize + off) as usize];
        }
    }
    acc
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor4::new(x.shape(), data).expect("same shape")
}

pub fn silu_backward<T: Real>(x: &Tensor4<T>, g: &Tensor4<T>) -> Tensor4<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let s = sigmoid(v);
            gv * (s + v * s * (T::one() - s))
        })
        .collect();
    Tensor4::new(x.shape(), data).expect("same shape")
}

pub fn sigmoid_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let data = x.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor4::new(x.shape(), data).expect("same shape")
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, g: &Tensor4<T>) -> Tensor4<T> {
    let data = y
        .data()
        .iter()
        .zip(g.data())
        .map(|(&s, &gv)| gv * s * (T::one() - s))
        .collect();
    Tensor4::new(y.shape(), data).expect("same shape")
}

pub fn depth_halve_forward<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>, NetError> {
    let [c, d, h, w] = x.shape();
    if d % 2 != 0 {
        return Err(NetError::OddDepth(d));
    }
    let plane = h * w;
    let half = T::of_f64(0.5);
    let src = x.data();
    let mut out = Vec::with_capacity(c * d / 2 * plane);
    for ch in 0..c {
        for z in 0..d / 2 {
            let a = &src[(ch * d + 2 * z) * plane..][..plane];
            let b = &src[(ch * d + 2 * z + 1) * plane..][..plane];
            out.extend(a.iter().zip(b).map(|(&p, &q)| (p + q) * half));
        }
    }
    Tensor4::new([c, d / 2, h, w], out)
}

pub fn depth_halve_backward<T: Real>(in_shape: [usize; 4], g: &Tensor4<T>) -> Tensor4<T> {
    let [c, d, h, w] = in_shape;
    let plane = h * w;
    let half = T::of_f64(0.5);
    let gd = g.data();
    let mut out = vec![T::zero(); c * d * plane];
    for ch in 0..c {
        for z in 0..d {
            let src = &gd[(ch * (d / 2) + z / 2) * plane..][..plane];
            let dst = &mut out[(ch * d + z) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * half;
            }
        }
    }
    Tensor4::new(in_shape, out).expect("same shape")
}

/// Replicate-padded depth neighbors `(z-1, z, z+1)` for kernel-3 pooling.
#[inline]
fn depth_neighbors(z: usize, d: usize) -> [usize; 3] {
    [z.saturating_sub(1), z, (z + 1).min(d - 1)]
}

pub fn depth_preserve_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [c, d, h, w] = x.shape();
    let plane = h * w;
    let third = T::of_f64(1.0 / 3.0);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for z in 0..d {
            let [a, b, e] = depth_neighbors(z, d).map(|k| &src[(ch * d + k) * plane..][..plane]);
            out.extend((0..plane).map(|i| (a[i] + b[i] + e[i]) * third));
        }
    }
    Tensor4::new(x.shape(), out).expect("same shape")
}

pub fn depth_preserve_backward<T: Real>(g: &Tensor4<T>) -> Tensor4<T> {
    let [c, d, h, w] = g.shape();
    let plane = h * w;
    let third = T::of_f64(1.0 / 3.0);
    let gd = g.data();
    let mut out = vec![T::zero(); gd.len()];
    for ch in 0..c {
        for z in 0..d {
            let src = &gd[(ch * d + z) * plane..][..plane];
            for k in depth_neighbors(z, d) {
                let dst = &mut out[(ch * d + k) * plane..][..plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v * third;
                }
            }
        }
    }
    Tensor4::new(g.shape(), out).expect("same shape")
}

/// Nearest-neighbor upsampling by integer factors along (depth, height, width).
pub fn upsample_forward<T: Real>(x: &Tensor4<T>, f: [usize; 3]) -> Tensor4<T> {
    let [c, d, h, w] = x.shape();
    let shape = [c, d * f[0], h * f[1], w * f[2]];
    let src = x.data();
    let mut out = Vec::with_capacity(shape.iter().product());
    for ch in 0..c {
        for z in 0..shape[1] {
            for y in 0..shape[2] {
                let row = &src[((ch * d + z / f[0]) * h + y / f[1]) * w..][..w];
                for &v in row {
                    for _ in 0..f[2] {
                        out.push(v);
                    }
                }
            }
        }
    }
    Tensor4::new(shape, out).expect("upsample shape")
}

pub fn upsample_backward<T: Real>(
    in_shape: [usize; 4],
    f: [usize; 3],
    g: &Tensor4<T>,
) -> Tensor4<T> {
    let [c, d, h, w] = in_shape;
    let [_, od, oh, ow] = g.shape();
    let gd = g.data();
    let mut out = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let grow = &gd[((ch * od + z) * oh + y) * ow..][..ow];
                let dst = &mut out[((ch * d + z / f[0]) * h + y / f[1]) * w..][..w];
                for (x, &v) in grow.iter().enumerate() {
                    dst[x / f[2]] += v;
                }
            }
        }
    }
    Tensor4::new(in_shape, out).expect("same shape")
}

/// `(C·r², D, H, W) → (C, D, rH, rW)` with
/// `out[c, d, y·r + i, x·r + j] = in[c·r² + i·r + j, d, y, x]`.
pub fn pixel_shuffle_forward<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>, NetError> {
    let [cin, d, h, w] = x.shape();
    if r == 0 || cin % (r * r) != 0 {
        return Err(NetError::IndivisibleChannels {
            channels: cin,
            factor: r,
        });
    }
    let c = cin / (r * r);
    let shape = [c, d, h * r, w * r];
    let mut out = vec![T::zero(); x.data().len()];
    let src = x.data();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for i in 0..r {
                    let dst_row = ((ch * d + z) * h * r + y * r + i) * w * r;
                    for j in 0..r {
                        let sc = ch * r * r + i * r + j;
                        let src_row = &src[((sc * d + z) * h + y) * w..][..w];
                        for (xx, &v) in src_row.iter().enumerate() {
                            out[dst_row + xx * r + j] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(shape, out)
}

/// Inverse rearrangement of [`pixel_shuffle_forward`]; also its gradient.
pub fn pixel_unshuffle<T: Real>(y: &Tensor4<T>, r: usize) -> Tensor4<T> {
    let [c, d, hr, wr] = y.shape();
    let (h, w) = (hr / r, wr / r);
    let shape = [c * r * r, d, h, w];
    let src = y.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for z in 0..d {
            for yy in 0..h {
                for i in 0..r {
                    let src_row = ((ch * d + z) * hr + yy * r + i) * wr;
                    for j in 0..r {
                        let oc = ch * r * r + i * r + j;
                        let dst = &mut out[((oc * d + z) * h + yy) * w..][..w];
                        for (xx, o) in dst.iter_mut().enumerate() {
                            *o = src[src_row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(shape, out).expect("unshuffle shape")
}

pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [c, ..] = x.shape();
    let n = x.data().len() / c;
    let inv = T::of_f64(1.0 / n as f64);
    let data = (0..c)
        .map(|ch| x.channel(ch).iter().copied().sum::<T>() * inv)
        .collect();
    Tensor4::new([c, 1, 1, 1], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(in_shape: [usize; 4], g: &Tensor4<T>) -> Tensor4<T> {
    let n: usize = in_shape[1..].iter().product();
    let inv = T::of_f64(1.0 / n as f64);
    let mut out = Vec::with_capacity(in_shape[0] * n);
    for &gv in g.data() {
        out.extend(std::iter::repeat_n(gv * inv, n));
    }
    Tensor4::new(in_shape, out).expect("same shape")
}

/// Index map for broadcasting `b` against `a`'s shape: `b` dims are equal to
/// `a`'s or 1.
pub fn broadcast_compatible(a: [usize; 4], b: [usize; 4]) -> bool {
    (0..4).all(|i| b[i] == a[i] || b[i] == 1)
}

#[inline]
fn broadcast_index(b: [usize; 4], c: usize, z: usize, y: usize, x: usize) -> usize {
    let pick = |i: usize, v: usize| if b[i] == 1 { 0 } else { v };
    ((pick(0, c) * b[1] + pick(1, z)) * b[2] + pick(2, y)) * b[3] + pick(3, x)
}

pub fn mul_broadcast_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let sa = a.shape();
    let sb = b.shape();
    let bd = b.data();
    let mut i = 0;
    Tensor4::from_fn(sa, |[c, z, y, x]| {
        let v = a.data()[i] * bd[broadcast_index(sb, c, z, y, x)];
        i += 1;
        v
    })
}

/// Gradients of `a * b` (b broadcast) with respect to `a` and `b`.
pub fn mul_broadcast_backward<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    g: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let sa = a.shape();
    let sb = b.shape();
    let mut ga = vec![T::zero(); a.data().len()];
    let mut gb = vec![T::zero(); b.data().len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut i = 0;
    for c in 0..sa[0] {
        for z in 0..sa[1] {
            for y in 0..sa[2] {
                for x in 0..sa[3] {
                    let j = broadcast_index(sb, c, z, y, x);
                    ga[i] = gd[i] * bd[j];
                    gb[j] += gd[i] * ad[i];
                    i += 1;
                }
            }
        }
    }
    (
        Tensor4::new(sa, ga).expect("same shape"),
        Tensor4::new(sb, gb).expect("same shape"),
    )
}

pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>, NetError> {
    let spatial = parts[0].spatial();
    let mut data = Vec::new();
    let mut channels = 0;
    for p in parts {
        if p.spatial() != spatial {
            return Err(NetError::Shape(format!(
                "concat of {:?} with {:?}",
                p.spatial(),
                spatial
            )));
        }
        channels += p.channels();
        data.extend_from_slice(p.data());
    }
    Tensor4::new([channels, spatial[0], spatial[1], spatial[2]], data)
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, NetError> {
    if a.shape() != b.shape() {
        return Err(NetError::Shape(format!(
            "add {:?} + {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| p + q)
        .collect();
    Tensor4::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_cases() {
        assert_eq!(valid_range(8, 8, 1, -1), (1, 8));
        assert_eq!(valid_range(8, 8, 1, 1), (0, 7));
        assert_eq!(valid_range(4, 8, 2, -1), (1, 4));
        assert_eq!(valid_range(4, 8, 2, 1), (0, 4));
        assert_eq!(valid_range(2, 2, 1, 4), (0, 0));
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle() {
        let x = Tensor4::<f64>::from_fn([8, 2, 3, 2], |[c, z, y, x]| {
            (c * 100 + z * 10 + y * 3 + x) as f64
        });
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), [2, 2, 6, 4]);
        assert_eq!(pixel_unshuffle(&y, 2), x);
    }
}
