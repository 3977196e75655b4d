//! Two evaluators for the same network description.
//!
//! [`Eager`] computes values and drops intermediates as soon as they go out of
//! scope; it is what inference uses. [`Tape`] records every intermediate so
//! [`Tape::backward`] can produce parameter gradients.

use crate::error::Result;
use crate::kernels;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Operations the network is written against.
pub trait Ops<T: Real> {
    type V: Clone;

    /// A constant that takes no gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// Convolution with the named layer of the parameter store.
    fn conv(&mut self, x: &Self::V, layer: &str) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, factor: f64) -> Self::V;
    fn leaky_relu(&mut self, a: &Self::V, slope: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn pixel_shuffle(&mut self, a: &Self::V, s: usize) -> Result<Self::V>;
    fn upsample_nearest(&mut self, a: &Self::V, s: usize) -> Self::V;
    fn attention(&mut self, theta: &Self::V, phi: &Self::V, g: &Self::V) -> Result<Self::V>;
}

fn leaky<T: Real>(t: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    t.map(|v| if v > T::zero() { v } else { v * s })
}

fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::one() / (T::one() + (-v).exp()))
}

fn conv_with<T: Real>(store: &ParameterStore<T>, x: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
    let l = store.get(layer)?;
    kernels::conv2d(x, &l.weight, &l.bias, l.dilation)
}

pub struct Eager<'p, T> {
    store: &'p ParameterStore<T>,
}

impl<'p, T: Real> Eager<'p, T> {
    pub fn new(store: &'p ParameterStore<T>) -> Self {
        Eager { store }
    }
}

impl<T: Real> Ops<T> for Eager<'_, T> {
    type V = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn conv(&mut self, x: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        conv_with(self.store, x, layer)
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |x, y| x + y)
    }
    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |x, y| x * y)
    }
    fn scale(&mut self, a: &Tensor<T>, factor: f64) -> Tensor<T> {
        let f = T::lit(factor);
        a.map(|v| v * f)
    }
    fn leaky_relu(&mut self, a: &Tensor<T>, slope: f64) -> Tensor<T> {
        leaky(a, slope)
    }
    fn sigmoid(&mut self, a: &Tensor<T>) -> Tensor<T> {
        sigmoid(a)
    }
    fn concat(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        kernels::concat(&refs)
    }
    fn pixel_shuffle(&mut self, a: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
        kernels::pixel_shuffle(a, s)
    }
    fn upsample_nearest(&mut self, a: &Tensor<T>, s: usize) -> Tensor<T> {
        kernels::upsample_nearest(a, s)
    }
    fn attention(&mut self, theta: &Tensor<T>, phi: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::attention(theta, phi, g)?.0)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Conv { x: usize, layer: String },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Concat(Vec<usize>),
    PixelShuffle(usize, usize),
    Nearest(usize, usize),
    Attention { theta: usize, phi: usize, g: usize, attn: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any parameter influences this node.
    live: bool,
}

pub struct Tape<'p, T> {
    store: &'p ParameterStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParameterStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].live)
    }

    /// Reverse-mode sweep seeded with `d loss / d output` for each given output.
    /// Returns gradients laid out like the parameter store.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<ParameterStore<T>> {
        let mut param_grads = self.store.zeros_like();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            g.expect_shape(self.nodes[v.0].value.shape(), "backward seed")?;
            accumulate(&mut grads, v.0, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.live {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Conv { x, layer } => {
                    let l = self.store.get(layer)?;
                    let need = self.nodes[*x].live;
                    let cg = kernels::conv2d_backward(&self.nodes[*x].value, &l.weight, l.dilation, &g, need)?;
                    let dst = param_grads.get_mut(layer)?;
                    dst.weight.add_assign(&cg.weight);
                    for (d, s) in dst.bias.iter_mut().zip(&cg.bias) {
                        *d += *s;
                    }
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[*b].value, |x, y| x * y)?;
                    let gb = g.zip_map(&self.nodes[*a].value, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let f = T::lit(*f);
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::LeakyRelu(a, slope) => {
                    let s = T::lit(*slope);
                    let ga = g.zip_map(&self.nodes[*a].value, |d, x| if x > T::zero() { d } else { d * s })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |d, y| d * y * (T::one() - y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.channels()).collect();
                    for (&p, piece) in parts.iter().zip(kernels::split_channels(&g, &widths)) {
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::PixelShuffle(a, s) => {
                    accumulate(&mut grads, *a, kernels::pixel_unshuffle(&g, *s)?);
                }
                Op::Nearest(a, s) => {
                    accumulate(&mut grads, *a, kernels::upsample_nearest_adjoint(&g, *s));
                }
                Op::Attention { theta, phi, g: gv, attn } => {
                    let (dt, dp, dg) = kernels::attention_backward(
                        &self.nodes[*theta].value,
                        &self.nodes[*phi].value,
                        &self.nodes[*gv].value,
                        attn,
                        &g,
                    );
                    accumulate(&mut grads, *theta, dt);
                    accumulate(&mut grads, *phi, dp);
                    accumulate(&mut grads, *gv, dg);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

impl<T: Real> Ops<T> for Tape<'_, T> {
    type V = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }
    fn conv(&mut self, x: &Var, layer: &str) -> Result<Var> {
        let out = conv_with(self.store, &self.nodes[x.0].value, layer)?;
        Ok(self.push(out, Op::Conv { x: x.0, layer: layer.to_string() }, true))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let live = self.live(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), live))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let live = self.live(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), live))
    }
    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.nodes[a.0].value.map(|v| v * f);
        let live = self.live(&[a.0]);
        self.push(out, Op::Scale(a.0, factor), live)
    }
    fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        let out = leaky(&self.nodes[a.0].value, slope);
        let live = self.live(&[a.0]);
        self.push(out, Op::LeakyRelu(a.0, slope), live)
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        let out = sigmoid(&self.nodes[a.0].value);
        let live = self.live(&[a.0]);
        self.push(out, Op::Sigmoid(a.0), live)
    }
    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = kernels::concat(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let live = self.live(&ids);
        Ok(self.push(out, Op::Concat(ids), live))
    }
    fn pixel_shuffle(&mut self, a: &Var, s: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(&self.nodes[a.0].value, s)?;
        let live = self.live(&[a.0]);
        Ok(self.push(out, Op::PixelShuffle(a.0, s), live))
    }
    fn upsample_nearest(&mut self, a: &Var, s: usize) -> Var {
        let out = kernels::upsample_nearest(&self.nodes[a.0].value, s);
        let live = self.live(&[a.0]);
        self.push(out, Op::Nearest(a.0, s), live)
    }
    fn attention(&mut self, theta: &Var, phi: &Var, g: &Var) -> Result<Var> {
        let (out, attn) = kernels::attention(
            &self.nodes[theta.0].value,
            &self.nodes[phi.0].value,
            &self.nodes[g.0].value,
        )?;
        let live = self.live(&[theta.0, phi.0, g.0]);
        Ok(self.push(
            out,
            Op::Attention { theta: theta.0, phi: phi.0, g: g.0, attn },
            live,
        ))
    }
}
