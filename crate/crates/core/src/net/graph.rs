//! Reverse-mode tape over [`Tensor4`] activations.
//!
//! Parameters live in a [`ParamStore`] outside the tape so a recorded pass can
//! be kept and differentiated later against the same store.

use std::collections::HashMap;

use crate::net::kernels::{self, ConvSpec};
use crate::net::tensor::Tensor4;
use crate::net::NetError;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    /// Parameters in the same group freeze together.
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: &str, shape: Vec<usize>, data: Vec<T>) -> usize {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name}");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            shape,
            data,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<usize, NetError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        out_ch: usize,
        spec: ConvSpec,
    },
    Silu(usize),
    Sigmoid(usize),
    DepthHalve(usize),
    DepthPreserve(usize),
    Upsample {
        x: usize,
        factors: [usize; 3],
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    Add(usize, usize),
    MulBroadcast(usize, usize),
    Concat(Vec<usize>),
    GlobalAvgPool(usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Tensor4<T>,
}

/// Recorded forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor4<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, x: Tensor4<T>) -> Var {
        self.push(Op::Input, x)
    }

    pub fn conv(
        &mut self,
        params: &ParamStore<T>,
        x: Var,
        weight: &str,
        bias: Option<&str>,
        spec: ConvSpec,
    ) -> Result<Var, NetError> {
        let wid = params.id(weight)?;
        let bid = bias.map(|b| params.id(b)).transpose()?;
        let wp = &params.params[wid];
        if wp.shape.len() != 5 || wp.shape[2..] != spec.kernel {
            return Err(NetError::Shape(format!(
                "weight {weight} has shape {:?}, kernel {:?}",
                wp.shape, spec.kernel
            )));
        }
        let out_ch = wp.shape[0];
        if wp.shape[1] != self.value(x).channels() {
            return Err(NetError::ChannelMismatch {
                expected: wp.shape[1],
                found: self.value(x).channels(),
            });
        }
        let value = kernels::conv_forward(
            self.value(x),
            &wp.data,
            bid.map(|b| params.params[b].data.as_slice()),
            out_ch,
            &spec,
        )?;
        Ok(self.push(
            Op::Conv {
                x: x.0,
                weight: wid,
                bias: bid,
                out_ch,
                spec,
            },
            value,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = kernels::silu_forward(self.value(x));
        self.push(Op::Silu(x.0), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = kernels::sigmoid_forward(self.value(x));
        self.push(Op::Sigmoid(x.0), v)
    }

    pub fn depth_halve(&mut self, x: Var) -> Result<Var, NetError> {
        let v = kernels::depth_halve_forward(self.value(x))?;
        Ok(self.push(Op::DepthHalve(x.0), v))
    }

    pub fn depth_preserve(&mut self, x: Var) -> Var {
        let v = kernels::depth_preserve_forward(self.value(x));
        self.push(Op::DepthPreserve(x.0), v)
    }

    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Var {
        if factors == [1, 1, 1] {
            return x;
        }
        let v = kernels::upsample_forward(self.value(x), factors);
        self.push(Op::Upsample { x: x.0, factors }, v)
    }

    /// Nearest-neighbor upsampling to an exact spatial size; each target
    /// extent must be a multiple of the source.
    pub fn upsample_to(&mut self, x: Var, target: [usize; 3]) -> Result<Var, NetError> {
        let src = self.value(x).spatial();
        let mut factors = [1; 3];
        for a in 0..3 {
            if !target[a].is_multiple_of(src[a]) {
                return Err(NetError::Shape(format!(
                    "cannot upsample {src:?} to {target:?}"
                )));
            }
            factors[a] = target[a] / src[a];
        }
        Ok(self.upsample(x, factors))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, NetError> {
        let v = kernels::pixel_shuffle_forward(self.value(x), r)?;
        Ok(self.push(Op::PixelShuffle { x: x.0, r }, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !kernels::broadcast_compatible(sa, sb) {
            return Err(NetError::Shape(format!(
                "cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let v = kernels::mul_broadcast_forward(self.value(a), self.value(b));
        Ok(self.push(Op::MulBroadcast(a.0, b.0), v))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NetError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor4<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let v = kernels::concat_channels(&values)?;
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = kernels::global_avg_pool(self.value(x));
        self.push(Op::GlobalAvgPool(x.0), v)
    }

    /// Back-propagates `upstream` from `output`. Returns one entry per
    /// parameter; entries with `trainable[id] == false` stay `None`.
    pub fn backward(
        &self,
        params: &ParamStore<T>,
        output: Var,
        upstream: &Tensor4<T>,
        trainable: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>, NetError> {
        if upstream.shape() != self.value(output).shape() {
            return Err(NetError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(upstream.clone());
        let mut pgrads: Vec<Option<Vec<T>>> = vec![None; params.len()];

        fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }
        fn accumulate_param<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    out_ch,
                    spec,
                } => {
                    let need = trainable[*weight] || bias.is_some_and(|b| trainable[b]);
                    let (gx, gw, gb) = kernels::conv_backward(
                        &self.nodes[*x].value,
                        &params.params[*weight].data,
                        *out_ch,
                        spec,
                        &g,
                        need,
                    );
                    if trainable[*weight] {
                        accumulate_param(&mut pgrads[*weight], gw.expect("weight grad"));
                    }
                    if let Some(b) = bias {
                        if trainable[*b] {
                            accumulate_param(&mut pgrads[*b], gb.expect("bias grad"));
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::Silu(x) => {
                    let gx = kernels::silu_backward(&self.nodes[*x].value, &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = kernels::sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::DepthHalve(x) => {
                    let gx = kernels::depth_halve_backward(self.nodes[*x].value.shape(), &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::DepthPreserve(x) => {
                    accumulate(&mut grads[*x], kernels::depth_preserve_backward(&g));
                }
                Op::Upsample { x, factors } => {
                    let gx = kernels::upsample_backward(self.nodes[*x].value.shape(), *factors, &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::PixelShuffle { x, r } => {
                    accumulate(&mut grads[*x], kernels::pixel_unshuffle(&g, *r));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::MulBroadcast(a, b) => {
                    let (ga, gb) = kernels::mul_broadcast_backward(
                        &self.nodes[*a].value,
                        &self.nodes[*b].value,
                        &g,
                    );
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.nodes[p].value.shape();
                        let n: usize = shape.iter().product();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads[p], Tensor4::new(shape, slice)?);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let gx = kernels::global_avg_pool_backward(self.nodes[*x].value.shape(), &g);
                    accumulate(&mut grads[*x], gx);
                }
            }
        }
        Ok(pgrads)
    }
}
