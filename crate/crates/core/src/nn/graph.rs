//! Reverse-mode autodiff over a recorded op tape.
//!
//! A [`Graph`] borrows a frozen [`ParamStore`], computes each op eagerly as
//! it is recorded, and can then propagate gradients from a scalar output
//! back to every parameter and leaf. Nodes only ever reference earlier
//! nodes, so a single reverse sweep is a valid topological order.

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Scalar, Shape, Tensor};

pub type NodeId = usize;

/// Which set of parameter values forward passes read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Raw,
    /// EMA shadow weights; requires the store to have them.
    Ema,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param {
        param: usize,
    },
    Conv2d {
        input: NodeId,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    UpsampleNearest {
        input: NodeId,
    },
    Silu {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ReflectPad {
        input: NodeId,
        pad: [usize; 4], // top, bottom, left, right
    },
    Crop {
        input: NodeId,
        top: usize,
        left: usize,
    },
    MeanAbsError {
        input: NodeId,
        target: Tensor<T>,
    },
    WeightedSum {
        input: NodeId,
        weights: Tensor<T>,
    },
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    source: WeightSource,
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Reflect an index into `[0, n)` without repeating the edge sample.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            source: WeightSource::Raw,
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Forward passes read EMA shadow weights instead of the raw ones.
    pub fn with_ema(store: &'s ParamStore<T>) -> Result<Self> {
        if !store.has_ema() {
            return Err(Error::InvalidArg(
                "EMA weight source requested but store has no shadows".into(),
            ));
        }
        Ok(Graph {
            store,
            source: WeightSource::Ema,
            values: Vec::new(),
            ops: Vec::new(),
        })
    }

    pub fn weight_source(&self) -> WeightSource {
        self.source
    }

    fn weights(&self, id: usize) -> &Tensor<T> {
        match self.source {
            WeightSource::Raw => self.store.values(id),
            WeightSource::Ema => self.store.ema_values(id).expect("checked at construction"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.values[id].shape().numel(), 1, "not a scalar node");
        self.values[id].data()[0].as_f64()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        let v = self.weights(id).clone();
        self.push(v, Op::Param { param: id })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: usize,
        bias: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let out = conv2d_forward(
            &self.values[input],
            self.weights(weight),
            self.weights(bias),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest(&mut self, input: NodeId) -> NodeId {
        let x = &self.values[input];
        let s = x.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * 2, s.w * 2));
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let v = x.at(n, c, h, w);
                        out.set(n, c, 2 * h, 2 * w, v);
                        out.set(n, c, 2 * h, 2 * w + 1, v);
                        out.set(n, c, 2 * h + 1, 2 * w, v);
                        out.set(n, c, 2 * h + 1, 2 * w + 1, v);
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest { input })
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let out = self.values[input].map(|x| x * sigmoid(x));
        self.push(out, Op::Silu { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = T::of_f64(slope);
        let out = self.values[input].map(|x| if x >= T::zero() { x } else { s * x });
        self.push(out, Op::LeakyRelu { input, slope: s })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.values[a].add(&self.values[b])?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.values[a].sub(&self.values[b])?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = T::of_f64(factor);
        let out = self.values[input].scale(f);
        self.push(out, Op::Scale { input, factor: f })
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.values[parts[0]].shape();
        let mut c_total = 0;
        for &p in parts {
            let s = self.values[p].shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat parts {} vs {}",
                    first, s
                )));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &p in parts {
                let t = &self.values[p];
                let pc = t.shape().c;
                let src = &t.data()[t.shape().index(n, 0, 0, 0)..t.shape().index(n, 0, 0, 0) + pc * plane];
                let d0 = out_shape.index(n, c_off, 0, 0);
                out.data_mut()[d0..d0 + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        Ok(self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Reflect padding (edge sample not repeated): `pad = [top, bottom, left, right]`.
    pub fn reflect_pad(&mut self, input: NodeId, pad: [usize; 4]) -> Result<NodeId> {
        let s = self.values[input].shape();
        let [pt, pb, pl, pr] = pad;
        if pt.max(pb) >= s.h || pl.max(pr) >= s.w {
            return Err(Error::InvalidArg(format!(
                "reflect pad {pad:?} too large for {}x{}",
                s.h, s.w
            )));
        }
        if pad == [0, 0, 0, 0] {
            // still record the op so shape bookkeeping stays uniform
        }
        let (nh, nw) = (s.h + pt + pb, s.w + pl + pr);
        let x = &self.values[input];
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, nh, nw));
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..nh {
                    let iy = mirror(oy as isize - pt as isize, s.h);
                    for ox in 0..nw {
                        let ix = mirror(ox as isize - pl as isize, s.w);
                        out.set(n, c, oy, ox, x.at(n, c, iy, ix));
                    }
                }
            }
        }
        Ok(self.push(out, Op::ReflectPad { input, pad }))
    }

    /// Crop a `h x w` window starting at `(top, left)`.
    pub fn crop(&mut self, input: NodeId, top: usize, left: usize, h: usize, w: usize) -> Result<NodeId> {
        let s = self.values[input].shape();
        if top + h > s.h || left + w > s.w {
            return Err(Error::InvalidArg(format!(
                "crop ({top},{left})+{h}x{w} outside {}x{}",
                s.h, s.w
            )));
        }
        let x = &self.values[input];
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..h {
                    let src0 = s.index(n, c, top + oy, left);
                    let dst0 = out.shape().index(n, c, oy, 0);
                    let src = &x.data()[src0..src0 + w];
                    out.data_mut()[dst0..dst0 + w].copy_from_slice(src);
                }
            }
        }
        Ok(self.push(out, Op::Crop { input, top, left }))
    }

    /// Mean absolute error against a fixed target; scalar output node.
    pub fn mean_abs_error(&mut self, input: NodeId, target: Tensor<T>) -> Result<NodeId> {
        self.values[input].check_same_shape(&target)?;
        let diffs: Vec<T> = self.values[input]
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .collect();
        let mean = pairwise_sum(&diffs) / diffs.len() as f64;
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![T::of_f64(mean)])?;
        Ok(self.push(out, Op::MeanAbsError { input, target }))
    }

    /// Inner product with fixed weights; scalar readout for gradient checks.
    pub fn weighted_sum(&mut self, input: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        self.values[input].check_same_shape(&weights)?;
        let prods: Vec<T> = self.values[input]
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let sum = pairwise_sum(&prods);
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![T::of_f64(sum)])?;
        Ok(self.push(out, Op::WeightedSum { input, weights }))
    }

    /// Reverse sweep from a scalar output node. Returns gradients for every
    /// parameter and node that influences it.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        if self.values[output].shape().numel() != 1 {
            return Err(Error::InvalidArg(
                "backward requires a scalar output node".into(),
            ));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        node_grads[output] = Some(Tensor::filled(Shape::new(1, 1, 1, 1), T::one()));

        let add_param = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, delta: Tensor<T>| {
            match &mut grads[id] {
                Some(g) => {
                    for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let add_node = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, delta: Tensor<T>| {
            match &mut grads[id] {
                Some(g) => {
                    for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        for id in (0..=output).rev() {
            let Some(g_out) = node_grads[id].clone() else {
                continue;
            };
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Param { param } => add_param(&mut param_grads, *param, g_out),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let (gx, gw, gb) = conv2d_backward(
                        &self.values[*input],
                        self.weights(*weight),
                        &g_out,
                        *stride,
                    )?;
                    add_node(&mut node_grads, *input, gx);
                    add_param(&mut param_grads, *weight, gw);
                    add_param(&mut param_grads, *bias, gb);
                }
                Op::UpsampleNearest { input } => {
                    let s = self.values[*input].shape();
                    let mut gx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for h in 0..s.h {
                                for w in 0..s.w {
                                    let acc = g_out.at(n, c, 2 * h, 2 * w)
                                        + g_out.at(n, c, 2 * h, 2 * w + 1)
                                        + g_out.at(n, c, 2 * h + 1, 2 * w)
                                        + g_out.at(n, c, 2 * h + 1, 2 * w + 1);
                                    gx.set(n, c, h, w, acc);
                                }
                            }
                        }
                    }
                    add_node(&mut node_grads, *input, gx);
                }
                Op::Silu { input } => {
                    let x = &self.values[*input];
                    let gx = Tensor::from_vec(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(g_out.data())
                            .map(|(&x, &g)| {
                                let s = sigmoid(x);
                                g * s * (T::one() + x * (T::one() - s))
                            })
                            .collect(),
                    )?;
                    add_node(&mut node_grads, *input, gx);
                }
                Op::LeakyRelu { input, slope } => {
                    let x = &self.values[*input];
                    let gx = Tensor::from_vec(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(g_out.data())
                            .map(|(&x, &g)| if x >= T::zero() { g } else { g * *slope })
                            .collect(),
                    )?;
                    add_node(&mut node_grads, *input, gx);
                }
                Op::Add { a, b } => {
                    add_node(&mut node_grads, *a, g_out.clone());
                    add_node(&mut node_grads, *b, g_out);
                }
                Op::Sub { a, b } => {
                    add_node(&mut node_grads, *a, g_out.clone());
                    add_node(&mut node_grads, *b, g_out.scale(-T::one()));
                }
                Op::Scale { input, factor } => {
                    add_node(&mut node_grads, *input, g_out.scale(*factor));
                }
                Op::ConcatChannels { parts } => {
                    let out_shape = self.values[id].shape();
                    let plane = out_shape.h * out_shape.w;
                    let mut c_off = 0;
                    for &p in parts {
                        let ps = self.values[p].shape();
                        let mut gp = Tensor::zeros(ps);
                        for n in 0..ps.n {
                            let s0 = out_shape.index(n, c_off, 0, 0);
                            let d0 = ps.index(n, 0, 0, 0);
                            gp.data_mut()[d0..d0 + ps.c * plane]
                                .copy_from_slice(&g_out.data()[s0..s0 + ps.c * plane]);
                        }
                        add_node(&mut node_grads, p, gp);
                        c_off += ps.c;
                    }
                }
                Op::ReflectPad { input, pad } => {
                    let s = self.values[*input].shape();
                    let [pt, _, pl, _] = *pad;
                    let os = self.values[id].shape();
                    let mut gx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for oy in 0..os.h {
                                let iy = mirror(oy as isize - pt as isize, s.h);
                                for ox in 0..os.w {
                                    let ix = mirror(ox as isize - pl as isize, s.w);
                                    let cur = gx.at(n, c, iy, ix);
                                    gx.set(n, c, iy, ix, cur + g_out.at(n, c, oy, ox));
                                }
                            }
                        }
                    }
                    add_node(&mut node_grads, *input, gx);
                }
                Op::Crop { input, top, left } => {
                    let s = self.values[*input].shape();
                    let os = self.values[id].shape();
                    let mut gx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for oy in 0..os.h {
                                let d0 = s.index(n, c, top + oy, *left);
                                let s0 = os.index(n, c, oy, 0);
                                gx.data_mut()[d0..d0 + os.w]
                                    .copy_from_slice(&g_out.data()[s0..s0 + os.w]);
                            }
                        }
                    }
                    add_node(&mut node_grads, *input, gx);
                }
                Op::MeanAbsError { input, target } => {
                    let x = &self.values[*input];
                    let scale = g_out.data()[0] / T::of_f64(x.shape().numel() as f64);
                    let gx = Tensor::from_vec(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&a, &t)| {
                                if a > t {
                                    scale
                                } else if a < t {
                                    -scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    )?;
                    add_node(&mut node_grads, *input, gx);
                }
                Op::WeightedSum { input, weights } => {
                    let gx = weights.scale(g_out.data()[0]);
                    add_node(&mut node_grads, *input, gx);
                }
            }
        }

        Ok(Gradients {
            params: param_grads,
            nodes: node_grads,
        })
    }
}
