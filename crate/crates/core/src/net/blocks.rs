//! Stand-alone forms of the network's building blocks with explicit weights.
//! The composite blocks run through the same graph builders the network uses.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::net::graph::{ParamStore, Tape};
use crate::net::kernels::{self, ConvSpec};
use crate::net::model::{build_fusion, build_scse, scse_reduced, FUSION_DILATIONS};
use crate::net::tensor::Tensor4;
use crate::net::NetError;
use crate::real::Real;

/// Convolution weights `[out_ch, in_ch, kd, kh, kw]` plus optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: [usize; 3],
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvWeights<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: [usize; 3]) -> Self {
        Self {
            out_ch,
            in_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * kernel.iter().product::<usize>()],
            bias: Some(vec![T::zero(); out_ch]),
        }
    }

    /// Uniform weights in `[-scale, scale]`, zero bias.
    pub fn random(
        out_ch: usize,
        in_ch: usize,
        kernel: [usize; 3],
        scale: f64,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Self {
        let mut w = Self::zeros(out_ch, in_ch, kernel);
        for v in &mut w.weight {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            *v = T::of_f64((2.0 * u - 1.0) * scale);
        }
        w
    }

    /// Single-channel kernel whose only nonzero tap is the center.
    pub fn identity(kernel: [usize; 3]) -> Self {
        let mut w = Self::zeros(1, 1, kernel);
        let center = ((kernel[0] / 2) * kernel[1] + kernel[1] / 2) * kernel[2] + kernel[2] / 2;
        w.weight[center] = T::one();
        w
    }

    fn check(&self, x: &Tensor4<T>) -> Result<(), NetError> {
        if x.channels() != self.in_ch {
            return Err(NetError::ChannelMismatch {
                expected: self.in_ch,
                found: x.channels(),
            });
        }
        if self.weight.len() != self.out_ch * self.in_ch * self.kernel.iter().product::<usize>() {
            return Err(NetError::Shape(
                "weight length does not match kernel".into(),
            ));
        }
        Ok(())
    }

    fn insert_into(&self, store: &mut ParamStore<T>, name: &str) {
        let [kd, kh, kw] = self.kernel;
        store.insert(
            &format!("{name}.w"),
            name,
            vec![self.out_ch, self.in_ch, kd, kh, kw],
            self.weight.clone(),
        );
        store.insert(
            &format!("{name}.b"),
            name,
            vec![self.out_ch],
            self.bias
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.out_ch]),
        );
    }
}

/// 2D convolution applied to every depth slice with shared weights; the
/// kernel depth must be 1. `stride` applies to height and width.
pub fn conv2d_per_slice<T: Real>(
    x: &Tensor4<T>,
    w: &ConvWeights<T>,
    stride: usize,
) -> Result<Tensor4<T>, NetError> {
    if w.kernel[0] != 1 {
        return Err(NetError::Shape(
            "per-slice conv needs kernel depth 1".into(),
        ));
    }
    w.check(x)?;
    let spec = ConvSpec::new(w.kernel).with_stride([1, stride, stride]);
    kernels::conv_forward(x, &w.weight, w.bias.as_deref(), w.out_ch, &spec)
}

/// Same-padded dense 3D convolution with uniform dilation.
pub fn conv3d<T: Real>(
    x: &Tensor4<T>,
    w: &ConvWeights<T>,
    dilation: usize,
) -> Result<Tensor4<T>, NetError> {
    w.check(x)?;
    let spec = ConvSpec::new(w.kernel).with_dilation([dilation; 3]);
    kernels::conv_forward(x, &w.weight, w.bias.as_deref(), w.out_ch, &spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthPoolMode {
    /// Average adjacent depth pairs; depth must be even.
    Halve,
    /// Kernel 3, stride 1, padding 1 with replicated edge slices.
    Preserve,
}

pub fn depth_pool<T: Real>(x: &Tensor4<T>, mode: DepthPoolMode) -> Result<Tensor4<T>, NetError> {
    match mode {
        DepthPoolMode::Halve => kernels::depth_halve_forward(x),
        DepthPoolMode::Preserve => Ok(kernels::depth_preserve_forward(x)),
    }
}

/// `(C·r², D, H, W) → (C, D, rH, rW)`, per depth slice.
pub fn pixel_shuffle_hw<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>, NetError> {
    kernels::pixel_shuffle_forward(x, r)
}

/// Concurrent spatial and channel squeeze-excitation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScseParams<T> {
    /// `C → C/2` squeeze.
    pub fc1: ConvWeights<T>,
    /// `C/2 → C` excitation.
    pub fc2: ConvWeights<T>,
    /// `C → 1` spatial gate.
    pub spatial: ConvWeights<T>,
}

impl<T: Real> ScseParams<T> {
    pub fn zeros(channels: usize) -> Self {
        let r = scse_reduced(channels);
        Self {
            fc1: ConvWeights::zeros(r, channels, [1, 1, 1]),
            fc2: ConvWeights::zeros(channels, r, [1, 1, 1]),
            spatial: ConvWeights::zeros(1, channels, [1, 1, 1]),
        }
    }

    pub fn random(channels: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let r = scse_reduced(channels);
        Self {
            fc1: ConvWeights::random(r, channels, [1, 1, 1], 0.5, &mut rng),
            fc2: ConvWeights::random(channels, r, [1, 1, 1], 0.5, &mut rng),
            spatial: ConvWeights::random(1, channels, [1, 1, 1], 0.5, &mut rng),
        }
    }
}

pub fn scse_block<T: Real>(x: &Tensor4<T>, p: &ScseParams<T>) -> Result<Tensor4<T>, NetError> {
    let mut store = ParamStore::new();
    p.fc1.insert_into(&mut store, "scse.fc1");
    p.fc2.insert_into(&mut store, "scse.fc2");
    p.spatial.insert_into(&mut store, "scse.spatial");
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let out = build_scse(&mut tape, &store, input, "scse")?;
    Ok(tape.value(out).clone())
}

/// Weights for the dilated multi-scale fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    /// One 3×3×3 branch per dilation 1, 2, 4.
    pub branches: [ConvWeights<T>; 3],
    /// 1×1×1 projection of the concatenated branches.
    pub proj: ConvWeights<T>,
}

impl<T: Real> FusionParams<T> {
    pub fn random(in_channels: usize, out: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let scale = (1.0 / (27 * in_channels) as f64).sqrt();
        let branches =
            [0, 1, 2].map(|_| ConvWeights::random(out, in_channels, [3, 3, 3], scale, &mut rng));
        let proj = ConvWeights::random(out, 3 * out, [1, 1, 1], 0.5, &mut rng);
        Self { branches, proj }
    }
}

pub fn fusion_block<T: Real>(
    features: &[Tensor4<T>],
    p: &FusionParams<T>,
) -> Result<Tensor4<T>, NetError> {
    let mut store = ParamStore::new();
    for (w, d) in p.branches.iter().zip(FUSION_DILATIONS) {
        w.insert_into(&mut store, &format!("fusion.branch{d}"));
    }
    p.proj.insert_into(&mut store, "fusion.proj");
    let mut tape = Tape::new();
    let vars: Vec<_> = features.iter().map(|f| tape.input(f.clone())).collect();
    let out = build_fusion(&mut tape, &store, &vars, "fusion")?;
    Ok(tape.value(out).clone())
}
