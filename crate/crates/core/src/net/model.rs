use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::net::graph::{ParamStore, Tape, Var};
use crate::net::kernels::ConvSpec;
use crate::net::tensor::Tensor4;
use crate::net::NetError;
use crate::real::Real;

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Two per-slice stages with depth halving, a 3D-conv bottleneck, depth
    /// upsampling and a ×4 pixel-shuffle head. Default input 16×128×128.
    A,
    /// Four per-slice stages (two depth-halving, two depth-preserving), a
    /// dilated fusion of the three coarsest maps, and three
    /// conv3d + scSE + upsample decoder blocks. Default input 32×128×128.
    B,
}

/// How variant-A encoder stages reduce resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Downsample {
    /// Stride-2 per-slice conv followed by depth average pooling.
    DepthPool,
    /// A single stride-2 3×3×3 convolution in all three axes.
    StridedConv3d,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub variant: Variant,
    pub in_depth: usize,
    pub window_hw: usize,
    pub class_count: usize,
    /// Variant A: `[stem, stage1, stage2]`. Variant B:
    /// `[stem, stage1, stage2, stage3, stage4]`.
    pub widths: Vec<usize>,
    pub downsample: Downsample,
    pub seed: u64,
}

impl NetConfig {
    pub fn variant_a(class_count: usize) -> Self {
        Self {
            variant: Variant::A,
            in_depth: 16,
            window_hw: 128,
            class_count,
            widths: vec![8, 16, 32],
            downsample: Downsample::DepthPool,
            seed: 0,
        }
    }

    pub fn variant_b(class_count: usize) -> Self {
        Self {
            variant: Variant::B,
            in_depth: 32,
            window_hw: 128,
            class_count,
            widths: vec![8, 16, 16, 24, 32],
            downsample: Downsample::DepthPool,
            seed: 0,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.in_depth, self.window_hw, self.window_hw]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.class_count,
            self.in_depth,
            self.window_hw,
            self.window_hw,
        ]
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.class_count == 0 {
            return fail("class_count must be >= 1".into());
        }
        if self.widths.contains(&0) {
            return fail("all widths must be >= 1".into());
        }
        if self.in_depth == 0 || !self.in_depth.is_multiple_of(4) {
            return fail(format!(
                "in_depth {} must be a positive multiple of 4",
                self.in_depth
            ));
        }
        match self.variant {
            Variant::A => {
                if self.widths.len() != 3 {
                    return fail("variant A takes 3 widths".into());
                }
                if self.window_hw == 0 || !self.window_hw.is_multiple_of(4) {
                    return fail(format!(
                        "window_hw {} must be a multiple of 4",
                        self.window_hw
                    ));
                }
            }
            Variant::B => {
                if self.widths.len() != 5 {
                    return fail("variant B takes 5 widths".into());
                }
                if self.downsample != Downsample::DepthPool {
                    return fail("variant B only supports depth pooling".into());
                }
                let w = self.window_hw;
                let (s8, s16, s32) = (w / 8, w.div_ceil(16), w.div_ceil(32));
                if w == 0 || !w.is_multiple_of(8) || s8 % s16 != 0 || s8 % s32 != 0 {
                    return fail(format!(
                        "window_hw {w} must be a multiple of 8 whose stride-16/32 maps divide the stride-8 map"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Stable single-line form; also the checkpoint's embedded config.
    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "variant={};in_depth={};window_hw={};classes={};widths={};downsample={};seed={}",
            match self.variant {
                Variant::A => "A",
                Variant::B => "B",
            },
            self.in_depth,
            self.window_hw,
            self.class_count,
            widths.join(","),
            match self.downsample {
                Downsample::DepthPool => "pool",
                Downsample::StridedConv3d => "strided3d",
            },
            self.seed
        )
    }

    /// FNV-1a 64 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for NetConfig {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| NetError::Config(format!("{m} in `{s}`"));
        let mut cfg = NetConfig::variant_a(1);
        let mut seen = BTreeSet::new();
        for part in s.trim().split(';') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("missing `=`"))?;
            seen.insert(k);
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad("bad number"));
            match k {
                "variant" => {
                    cfg.variant = match v {
                        "A" => Variant::A,
                        "B" => Variant::B,
                        _ => return Err(bad("unknown variant")),
                    }
                }
                "in_depth" => cfg.in_depth = num(v)?,
                "window_hw" => cfg.window_hw = num(v)?,
                "classes" => cfg.class_count = num(v)?,
                "widths" => {
                    cfg.widths = v.split(',').map(num).collect::<Result<_, _>>()?;
                }
                "downsample" => {
                    cfg.downsample = match v {
                        "pool" => Downsample::DepthPool,
                        "strided3d" => Downsample::StridedConv3d,
                        _ => return Err(bad("unknown downsample")),
                    }
                }
                "seed" => cfg.seed = v.parse().map_err(|_| bad("bad seed"))?,
                _ => return Err(bad("unknown key")),
            }
        }
        if seen.len() != 7 {
            return Err(bad("missing keys"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- parameter creation ----------------------------------------------------

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: Xoshiro256PlusPlus,
}

impl<T: Real> Init<'_, T> {
    /// Fan-in scaled uniform weights `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    fn conv(&mut self, name: &str, group: &str, out: usize, inp: usize, kernel: [usize; 3]) {
        let fan_in = inp * kernel.iter().product::<usize>();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = out * fan_in;
        let data = (0..n)
            .map(|_| {
                let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                T::of_f64((2.0 * u - 1.0) * bound)
            })
            .collect();
        self.store.insert(
            &format!("{name}.w"),
            group,
            vec![out, inp, kernel[0], kernel[1], kernel[2]],
            data,
        );
        self.store
            .insert(&format!("{name}.b"), group, vec![out], vec![T::zero(); out]);
    }
}

pub(crate) fn scse_reduced(channels: usize) -> usize {
    (channels / 2).max(1)
}

fn init_scse<T: Real>(init: &mut Init<'_, T>, prefix: &str, group: &str, channels: usize) {
    let r = scse_reduced(channels);
    init.conv(&format!("{prefix}.fc1"), group, r, channels, [1, 1, 1]);
    init.conv(&format!("{prefix}.fc2"), group, channels, r, [1, 1, 1]);
    init.conv(&format!("{prefix}.spatial"), group, 1, channels, [1, 1, 1]);
}

pub(crate) const FUSION_DILATIONS: [usize; 3] = [1, 2, 4];

fn init_fusion<T: Real>(
    init: &mut Init<'_, T>,
    prefix: &str,
    group: &str,
    in_channels: usize,
    out: usize,
) {
    for d in FUSION_DILATIONS {
        init.conv(
            &format!("{prefix}.branch{d}"),
            group,
            out,
            in_channels,
            [3, 3, 3],
        );
    }
    init.conv(&format!("{prefix}.proj"), group, out, 3 * out, [1, 1, 1]);
}

// ---- shared graph builders -------------------------------------------------

fn conv_act<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    x: Var,
    name: &str,
    spec: ConvSpec,
) -> Result<Var, NetError> {
    let h = tape.conv(
        params,
        x,
        &format!("{name}.w"),
        Some(&format!("{name}.b")),
        spec,
    )?;
    Ok(tape.silu(h))
}

/// `x·σ(channel gate) + x·σ(spatial gate)`.
pub(crate) fn build_scse<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    x: Var,
    prefix: &str,
) -> Result<Var, NetError> {
    let pointwise = ConvSpec::new([1, 1, 1]);
    let pooled = tape.global_avg_pool(x);
    let squeezed = conv_act(tape, params, pooled, &format!("{prefix}.fc1"), pointwise)?;
    let excite = tape.conv(
        params,
        squeezed,
        &format!("{prefix}.fc2.w"),
        Some(&format!("{prefix}.fc2.b")),
        pointwise,
    )?;
    let channel_gate = tape.sigmoid(excite);
    let spatial = tape.conv(
        params,
        x,
        &format!("{prefix}.spatial.w"),
        Some(&format!("{prefix}.spatial.b")),
        pointwise,
    )?;
    let spatial_gate = tape.sigmoid(spatial);
    let a = tape.mul_broadcast(x, channel_gate)?;
    let b = tape.mul_broadcast(x, spatial_gate)?;
    tape.add(a, b)
}

/// Upsamples every map to the finest one, concatenates, runs parallel
/// dilated 3×3×3 branches, concatenates again and projects with 1×1×1.
pub(crate) fn build_fusion<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    features: &[Var],
    prefix: &str,
) -> Result<Var, NetError> {
    if features.is_empty() {
        return Err(NetError::Shape(
            "fusion needs at least one feature map".into(),
        ));
    }
    let mut target = [0; 3];
    for f in features {
        let s = tape.value(*f).spatial();
        for a in 0..3 {
            target[a] = target[a].max(s[a]);
        }
    }
    let mut resized = Vec::with_capacity(features.len());
    for f in features {
        resized.push(tape.upsample_to(*f, target)?);
    }
    let stacked = tape.concat(&resized)?;
    let mut branches = Vec::with_capacity(FUSION_DILATIONS.len());
    for d in FUSION_DILATIONS {
        let spec = ConvSpec::new([3, 3, 3]).with_dilation([d; 3]);
        branches.push(conv_act(
            tape,
            params,
            stacked,
            &format!("{prefix}.branch{d}"),
            spec,
        )?);
    }
    let joined = tape.concat(&branches)?;
    tape.conv(
        params,
        joined,
        &format!("{prefix}.proj.w"),
        Some(&format!("{prefix}.proj.b")),
        ConvSpec::new([1, 1, 1]),
    )
}

// ---- the network -------------------------------------------------------------

const SHUFFLE: usize = 4;

/// Network parameters plus an optional cached forward pass for
/// [`Net::backward`].
#[derive(Clone, Debug)]
pub struct Net<T: Real> {
    config: NetConfig,
    params: ParamStore<T>,
    frozen: BTreeSet<String>,
    cache: Option<ForwardPass<T>>,
}

/// A recorded forward pass that can be differentiated.
#[derive(Clone, Debug)]
pub struct ForwardPass<T: Real> {
    tape: Tape<T>,
    output: Var,
}

/// Per-parameter gradients; frozen parameters have none.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    names: Vec<String>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_deref()
    }

    pub fn by_index(&self, i: usize) -> Option<&[T]> {
        self.grads[i].as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.grads.iter().map(|g| g.as_deref()))
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine, theirs) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += *y;
                    }
                }
                (m @ None, Some(b)) => *m = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

impl<T: Real> ForwardPass<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.tape.value(self.output)
    }

    pub fn backward(&self, net: &Net<T>, upstream: &Tensor4<T>) -> Result<Gradients<T>, NetError> {
        let trainable = net.trainable_mask();
        let mut grads = self
            .tape
            .backward(&net.params, self.output, upstream, &trainable)?;
        // Trainable parameters the output does not depend on get zeros.
        for (i, g) in grads.iter_mut().enumerate() {
            if trainable[i] && g.is_none() {
                *g = Some(vec![T::zero(); net.params.params()[i].data.len()]);
            }
        }
        Ok(Gradients {
            names: net.params.params().iter().map(|p| p.name.clone()).collect(),
            grads,
        })
    }
}

impl<T: Real> Net<T> {
    /// Fresh network with seeded initialization.
    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: Xoshiro256PlusPlus::seed_from_u64(config.seed),
        };
        let w = &config.widths;
        let c = config.class_count;
        match config.variant {
            Variant::A => {
                init.conv("stem", "stem", w[0], 1, [1, 3, 3]);
                let k = match config.downsample {
                    Downsample::DepthPool => [1, 3, 3],
                    Downsample::StridedConv3d => [3, 3, 3],
                };
                init.conv("stage1", "stage1", w[1], w[0], k);
                init.conv("stage2", "stage2", w[2], w[1], k);
                init.conv("bottleneck", "bottleneck", w[2], w[2], [3, 3, 3]);
                init.conv("head", "head", c * SHUFFLE * SHUFFLE, w[2], [1, 3, 3]);
            }
            Variant::B => {
                init.conv("stem", "stem", w[0], 1, [1, 3, 3]);
                for s in 1..5 {
                    init.conv(
                        &format!("stage{s}"),
                        &format!("stage{s}"),
                        w[s],
                        w[s - 1],
                        [1, 3, 3],
                    );
                }
                init_fusion(&mut init, "fusion", "fusion", w[2] + w[3] + w[4], w[2]);
                let dec = [(w[2], w[2]), (w[2], w[1]), (w[1], w[0])];
                for (i, (inp, out)) in dec.iter().enumerate() {
                    let name = format!("up{}", i + 1);
                    init.conv(&format!("{name}.conv"), &name, *out, *inp, [3, 3, 3]);
                    init_scse(&mut init, &format!("{name}.scse"), &name, *out);
                }
                init.conv("head", "head", c, w[0], [1, 1, 1]);
            }
        }
        Ok(Self {
            config,
            params: store,
            frozen: BTreeSet::new(),
            cache: None,
        })
    }

    /// Network with the given parameter values; names and shapes must match a
    /// fresh network for `config`.
    pub fn from_params(config: NetConfig, params: ParamStore<T>) -> Result<Self, NetError> {
        let mut net = Self::new(config)?;
        if params.len() != net.params.len() {
            return Err(NetError::Checkpoint(format!(
                "{} parameter blocks, expected {}",
                params.len(),
                net.params.len()
            )));
        }
        for p in params.params() {
            let slot = net
                .params
                .get_mut(&p.name)
                .ok_or_else(|| NetError::MissingParam(p.name.clone()))?;
            if slot.shape != p.shape {
                return Err(NetError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name, p.shape, slot.shape
                )));
            }
            slot.data.clone_from(&p.data);
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params
            .params()
            .iter()
            .map(|p| p.group.clone())
            .collect()
    }

    /// Excludes a parameter group from gradient computation.
    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    fn trainable_mask(&self) -> Vec<bool> {
        self.params
            .params()
            .iter()
            .map(|p| !self.frozen.contains(&p.group))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Net<U> {
        Net {
            config: self.config.clone(),
            params: self.params.cast(),
            frozen: self.frozen.clone(),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let pass = self.forward_pass(x)?;
        Ok(pass.tape.value(pass.output).clone())
    }

    /// Runs the network and records the pass for later differentiation.
    pub fn forward_pass(&self, x: &Tensor4<T>) -> Result<ForwardPass<T>, NetError> {
        if x.shape() != self.config.input_shape() {
            return Err(NetError::Config(format!(
                "window {:?} does not match network input {:?}",
                x.shape(),
                self.config.input_shape()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.input(x.clone());
        let output = match self.config.variant {
            Variant::A => self.build_a(&mut tape, input)?,
            Variant::B => self.build_b(&mut tape, input)?,
        };
        debug_assert_eq!(tape.value(output).shape(), self.config.output_shape());
        Ok(ForwardPass { tape, output })
    }

    /// [`forward_pass`](Self::forward_pass), keeping the pass for
    /// [`backward`](Self::backward).
    pub fn forward_cached(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let pass = self.forward_pass(x)?;
        let out = pass.output().clone();
        self.cache = Some(pass);
        Ok(out)
    }

    /// Gradients of `Σ upstream · output` for the last cached forward pass.
    /// Consumes the cache.
    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Result<Gradients<T>, NetError> {
        let pass = self.cache.take().ok_or(NetError::MissingForwardCache)?;
        pass.backward(self, upstream)
    }

    fn build_a(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, NetError> {
        let p = &self.params;
        let slice3 = ConvSpec::new([1, 3, 3]);
        let mut h = conv_act(tape, p, x, "stem", slice3)?;
        for stage in ["stage1", "stage2"] {
            h = match self.config.downsample {
                Downsample::DepthPool => {
                    let c = conv_act(tape, p, h, stage, slice3.with_stride([1, 2, 2]))?;
                    tape.depth_halve(c)?
                }
                Downsample::StridedConv3d => {
                    let spec = ConvSpec::new([3, 3, 3]).with_stride([2, 2, 2]);
                    conv_act(tape, p, h, stage, spec)?
                }
            };
        }
        let b = conv_act(tape, p, h, "bottleneck", ConvSpec::new([3, 3, 3]))?;
        let h = tape.add(h, b)?;
        let h = tape.upsample(h, [4, 1, 1]);
        let logits = tape.conv(p, h, "head.w", Some("head.b"), slice3)?;
        let shuffled = tape.pixel_shuffle(logits, SHUFFLE)?;
        Ok(tape.sigmoid(shuffled))
    }

    fn build_b(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, NetError> {
        let p = &self.params;
        let down = ConvSpec::new([1, 3, 3]).with_stride([1, 2, 2]);
        let h = conv_act(tape, p, x, "stem", down)?;
        let s1 = conv_act(tape, p, h, "stage1", down)?;
        let s1 = tape.depth_halve(s1)?;
        let s2 = conv_act(tape, p, s1, "stage2", down)?;
        let s2 = tape.depth_halve(s2)?;
        let s3 = conv_act(tape, p, s2, "stage3", down)?;
        let s3 = tape.depth_preserve(s3);
        let s4 = conv_act(tape, p, s3, "stage4", down)?;
        let s4 = tape.depth_preserve(s4);
        let mut h = build_fusion(tape, p, &[s2, s3, s4], "fusion")?;
        for (i, factors) in [[2, 2, 2], [2, 2, 2], [1, 2, 2]].into_iter().enumerate() {
            let name = format!("up{}", i + 1);
            let c = conv_act(
                tape,
                p,
                h,
                &format!("{name}.conv"),
                ConvSpec::new([3, 3, 3]),
            )?;
            let a = build_scse(tape, p, c, &format!("{name}.scse"))?;
            h = tape.upsample(a, factors);
        }
        let logits = tape.conv(p, h, "head.w", Some("head.b"), ConvSpec::new([1, 1, 1]))?;
        Ok(tape.sigmoid(logits))
    }
}
