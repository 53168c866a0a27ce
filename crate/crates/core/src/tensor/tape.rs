//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the list in reverse, so gradients
//! of shared sub-expressions accumulate in recording order and results are
//! bit-reproducible.

use super::conv::{
    conv2d_backward, conv2d_forward, reflect_pad_backward, reflect_pad_forward, tconv2d_backward,
    tconv2d_forward,
};
use super::{ConvSpec, ParamId, ParamStore, Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    TConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ReflectPad(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Pow(Var, f64),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumPerSample(Var),
    MeanHw(Var),
    AvgPool2(Var),
    Blur(Var, Vec<f64>),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles of every parameter in a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Add the gradients of all parameter nodes into `store`.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }
}

fn same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return shape_err(format!("{what}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), &[]);
        self.nodes[v.0].requires_grad = p.trainable;
        v
    }

    /// Record every parameter of `store` once.
    pub fn bind_params(&mut self, store: &ParamStore<T>) -> ParamVars {
        ParamVars(store.iter().map(|(id, _)| self.param(store, id)).collect())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &ins))
    }

    pub fn tconv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = tconv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::TConv2d { x, w, b, spec }, &ins))
    }

    pub fn reflect_pad(&mut self, x: Var, size: usize) -> Result<Var> {
        let out = reflect_pad_forward(self.value(x), size)?;
        Ok(self.push(out, Op::ReflectPad(x, size), &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c_t = T::lit(c);
        let out = self.value(x).map(|v| v * c_t);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c_t = T::lit(c);
        let out = self.value(x).map(|v| v + c_t);
        self.push(out, Op::Offset(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// `max(x, 0)^p`; the gradient is zero wherever `x ≤ 0`.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let p_t = T::lit(p);
        let out = self.value(x).map(|v| {
            if v > T::zero() {
                v.powf(p_t)
            } else {
                T::zero()
            }
        });
        self.push(out, Op::Pow(x, p), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.pow(x, 0.5)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let lo_t = T::lit(lo);
        let out = self.value(x).map(|v| v.max(lo_t));
        self.push(out, Op::ClampMin(x, lo), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over every axis but the leading one: shape `[n]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let inner = t.len() / n;
        let out = Tensor::from_fn(&[n], |i| {
            t.data()[i * inner..(i + 1) * inner].iter().copied().sum()
        });
        self.push(out, Op::SumPerSample(x), &[x])
    }

    /// Spatial mean of an `n × c × h × w` tensor: shape `[n, c]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let out = Tensor::from_fn(&[n, c], |i| {
            t.data()[i * plane..(i + 1) * plane]
                .iter()
                .copied()
                .sum::<T>()
                * inv
        });
        Ok(self.push(out, Op::MeanHw(x), &[x]))
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return shape_err(format!("cannot pool a {h}x{w} map"));
        }
        let quarter = T::lit(0.25);
        let d = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    out.push((d[i] + d[i + 1] + d[i + w] + d[i + w + 1]) * quarter);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Depthwise separable "valid" correlation with the same 1-D `taps`
    /// along both spatial axes.
    pub fn blur(&mut self, x: Var, taps: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let k = taps.len();
        if k == 0 || k > h || k > w {
            return shape_err(format!("window of {k} taps does not fit a {h}x{w} map"));
        }
        let taps_t: Vec<T> = taps.iter().map(|&v| T::lit(v)).collect();
        let out = separable_valid(t.data(), n * c, h, w, &taps_t);
        let out = Tensor::new(&[n, c, h - k + 1, w - k + 1], out)?;
        Ok(self.push(out, Op::Blur(x, taps.to_vec()), &[x]))
    }

    /// Record `value` as the forward result while passing gradients to `x`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        same(self.shape(x), value.shape(), "straight_through")?;
        Ok(self.push(value, Op::StraightThrough(x), &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    /// [`Tape::backward`] followed by accumulation into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store)?;
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.wants(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *spec, self.wants(*x))?;
                acc(*x, gx)?;
                acc(*w, gw)?;
                if let Some(b) = b {
                    acc(*b, gb)?;
                }
            }
            Op::TConv2d { x, w, b, spec } => {
                let (gx, gw, gb) = tconv2d_backward(val(*x), val(*w), g, *spec, self.wants(*x))?;
                acc(*x, gx)?;
                acc(*w, gw)?;
                if let Some(b) = b {
                    acc(*b, gb)?;
                }
            }
            Op::ReflectPad(x, size) => {
                acc(*x, reflect_pad_backward(val(*x).shape(), g, *size)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g * y)?)?;
                acc(*b, g.zip_map(val(*a), |g, x| g * x)?)?;
            }
            Op::Div(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g / y)?)?;
                // d(a/b)/db = -(a/b)/b
                let q = node.value.zip_map(val(*b), |q, y| q / y)?;
                acc(*b, g.zip_map(&q, |g, q| -g * q)?)?;
            }
            Op::Scale(x, c) => {
                let c = T::lit(*c);
                acc(*x, g.map(|v| v * c))?;
            }
            Op::Offset(x) => acc(*x, g.clone())?,
            Op::Square(x) => {
                let two = T::lit(2.0);
                acc(*x, g.zip_map(val(*x), |g, x| two * x * g)?)?;
            }
            Op::Pow(x, p) => {
                let p = T::lit(*p);
                let xv = val(*x);
                let mut d = g.clone();
                for ((d, &x), &y) in d
                    .data_mut()
                    .iter_mut()
                    .zip(xv.data())
                    .zip(node.value.data())
                {
                    *d = if x > T::zero() {
                        *d * p * y / x
                    } else {
                        T::zero()
                    };
                }
                acc(*x, d)?;
            }
            Op::Relu(x) => {
                acc(
                    *x,
                    g.zip_map(val(*x), |g, x| if x > T::zero() { g } else { T::zero() })?,
                )?;
            }
            Op::ClampMin(x, lo) => {
                let lo = T::lit(*lo);
                acc(
                    *x,
                    g.zip_map(val(*x), |g, x| if x > lo { g } else { T::zero() })?,
                )?;
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0]))?;
            }
            Op::SumPerSample(x) => {
                let xs = val(*x).shape();
                let inner = val(*x).len() / xs[0];
                acc(*x, Tensor::from_fn(xs, |i| g.data()[i / inner]))?;
            }
            Op::MeanHw(x) => {
                let xs = val(*x).shape();
                let plane = xs[2] * xs[3];
                let inv = T::lit(1.0 / plane as f64);
                acc(*x, Tensor::from_fn(xs, |i| g.data()[i / plane] * inv))?;
            }
            Op::AvgPool2(x) => {
                let xs = val(*x).shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut gx = Tensor::zeros(&xs);
                let d = gx.data_mut();
                for plane in 0..xs[0] * xs[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g.data()[(plane * oh + y) * ow + xx] * quarter;
                            let i = plane * h * w + 2 * y * w + 2 * xx;
                            d[i] += gv;
                            d[i + 1] += gv;
                            d[i + w] += gv;
                            d[i + w + 1] += gv;
                        }
                    }
                }
                acc(*x, gx)?;
            }
            Op::Blur(x, taps) => {
                let xs = val(*x).shape().to_vec();
                let taps_t: Vec<T> = taps.iter().map(|&v| T::lit(v)).collect();
                let gx = separable_valid_adjoint(g.data(), xs[0] * xs[1], xs[2], xs[3], &taps_t);
                acc(*x, Tensor::new(&xs, gx)?)?;
            }
            Op::StraightThrough(x) => acc(*x, g.clone())?,
        }
        Ok(())
    }
}

/// Valid separable correlation of `planes` images of `h × w`.
fn separable_valid<T: Real>(src: &[T], planes: usize, h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let img = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &img[y * w..(y + 1) * w];
            for xx in 0..ow {
                let mut s = T::zero();
                for (t, &c) in taps.iter().enumerate() {
                    s += row[xx + t] * c;
                }
                tmp[y * ow + xx] = s;
            }
        }
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = T::zero();
                for (t, &c) in taps.iter().enumerate() {
                    s += tmp[(y + t) * ow + xx] * c;
                }
                out.push(s);
            }
        }
    }
    out
}

fn separable_valid_adjoint<T: Real>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[T],
) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        tmp.fill(T::zero());
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let gv = gp[y * ow + xx];
                for (t, &c) in taps.iter().enumerate() {
                    tmp[(y + t) * ow + xx] += gv * c;
                }
            }
        }
        let img = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..ow {
                let gv = tmp[y * ow + xx];
                for (t, &c) in taps.iter().enumerate() {
                    img[y * w + xx + t] += gv * c;
                }
            }
        }
    }
    out
}
