use std::sync::Arc;

use super::kernels::{conv2d_backward, conv2d_forward};
use super::{Real, Tensor};
use crate::bayer::{demosaic_stencil, mosaic_index};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Relu {
        x: Var,
        slope: T,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    ScaleChannels {
        x: Var,
        gains: Vec<T>,
    },
    SampleAffine {
        x: Var,
        scales: Vec<T>,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Srgb {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Gram {
        x: Var,
    },
    RepeatChannels {
        x: Var,
    },
    Demosaic {
        x: Var,
    },
    Mosaic {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of forward operations. Records are appended in execution order, so
/// the tape is always topologically sorted and acyclic.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn same_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{op}: dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.dims(), data).expect("dims checked by caller")
}

#[inline]
fn srgb<T: Real>(x: T) -> T {
    if x <= T::lit(0.0031308) {
        T::lit(12.92) * x
    } else {
        T::lit(1.055) * x.powf(T::lit(1.0 / 2.4)) - T::lit(0.055)
    }
}

#[inline]
fn srgb_slope<T: Real>(x: T) -> T {
    if x <= T::lit(0.0031308) {
        T::lit(12.92)
    } else {
        T::lit(1.055 / 2.4) * x.powf(T::lit(1.0 / 2.4 - 1.0))
    }
}

fn gram_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let p = h * w;
    let norm = T::one() / T::lit((c * p) as f64);
    let mut out = Tensor::zeros([n, 1, c, c]);
    for s in 0..n {
        let a = &x.data()[s * c * p..(s + 1) * c * p];
        let g = &mut out.data_mut()[s * c * c..(s + 1) * c * c];
        T::gemm(
            c,
            p,
            c,
            norm,
            a,
            p as isize,
            1,
            a,
            1,
            p as isize,
            T::zero(),
            g,
            c as isize,
            1,
        );
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Learnable leaf; gradients accumulate into it on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf backed by a shared tensor, avoiding a copy of frozen weights.
    pub fn shared(&mut self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).dims()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            groups,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu { x, slope })
    }

    /// Non-overlapping `k x k` mean pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("avg_pool2d: {h}x{w} not divisible by {k}"));
        }
        let (ho, wo) = (h / k, w / k);
        let norm = T::one() / T::lit((k * k) as f64);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for s in 0..n * c {
            let src = &t.data()[s * h * w..(s + 1) * h * w];
            let dst = &mut out.data_mut()[s * ho * wo..(s + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    let o = (y / k) * wo + xx / k;
                    dst[o] = dst[o] + src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::AvgPool { x, k }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for s in 0..n * c {
            let src = &t.data()[s * h * w..(s + 1) * h * w];
            let dst = &mut out.data_mut()[s * ho * wo..(s + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Upsample { x, factor }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [na, ca, ha, wa] = ta.dims();
        let [nb, cb, hb, wb] = tb.dims();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat: dims {:?} vs {:?}",
                ta.dims(),
                tb.dims()
            ));
        }
        let p = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * p);
        for s in 0..na {
            data.extend_from_slice(&ta.data()[s * ca * p..(s + 1) * ca * p]);
            data.extend_from_slice(&tb.data()[s * cb * p..(s + 1) * cb * p]);
        }
        let out = Tensor::from_vec([na, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// `scale * x + shift` with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, rg, Op::Affine { x, scale })
    }

    /// `scales[n] * x + shifts[n]` for each batch sample `n`.
    pub fn sample_affine(&mut self, x: Var, scales: &[T], shifts: &[T]) -> Result<Var> {
        let t = self.value(x);
        let n = t.n();
        if scales.len() != n || shifts.len() != n {
            return Err(shape_err!(
                "sample_affine: {} scales and {} shifts for batch {n}",
                scales.len(),
                shifts.len()
            ));
        }
        let per = t.numel() / n.max(1);
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            chunk
                .iter_mut()
                .for_each(|v| *v = *v * scales[i] + shifts[i]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::SampleAffine {
                x,
                scales: scales.to_vec(),
            },
        ))
    }

    /// Multiplies channel `c` by `gains[c]`.
    pub fn scale_channels(&mut self, x: Var, gains: &[T]) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if gains.len() != c {
            return Err(shape_err!(
                "scale_channels: {} gains for {c} channels",
                gains.len()
            ));
        }
        let mut out = t.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let g = gains[i % c];
            plane.iter_mut().for_each(|v| *v = *v * g);
        }
        let _ = n;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::ScaleChannels {
                x,
                gains: gains.to_vec(),
            },
        ))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(out, rg, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, rg, Op::Square { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(x);
        self.push(out, rg, Op::Sqrt { x })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    /// sRGB transfer curve; inputs are expected in `[0, 1]`.
    pub fn srgb(&mut self, x: Var) -> Var {
        let out = self.value(x).map(srgb);
        let rg = self.rg(x);
        self.push(out, rg, Op::Srgb { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        let rg = self.rg(x);
        self.push(out, rg, Op::Mean { x })
    }

    /// Per-sample Gram matrix `A A^T / (C H W)`, returned as `(N, 1, C, C)`.
    pub fn gram(&mut self, x: Var) -> Var {
        let out = gram_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, rg, Op::Gram { x })
    }

    /// Tiles channels cyclically: output channel `c` reads input channel `c mod C_in`.
    pub fn repeat_channels(&mut self, x: Var, target: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if c == 0 || target == 0 {
            return Err(shape_err!("repeat_channels: empty channel axis"));
        }
        let p = h * w;
        let mut data = Vec::with_capacity(n * target * p);
        for s in 0..n {
            for co in 0..target {
                let ci = co % c;
                data.extend_from_slice(&t.data()[(s * c + ci) * p..(s * c + ci + 1) * p]);
            }
        }
        let out = Tensor::from_vec([n, target, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::RepeatChannels { x }))
    }

    /// Bilinear demosaic of a packed RGGB tensor `(N, 4, h, w)` into `(N, 3, 2h, 2w)`.
    pub fn demosaic(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if c != 4 {
            return Err(shape_err!("demosaic expects 4 packed channels, got {c}"));
        }
        let mut out = Tensor::zeros([n, 3, 2 * h, 2 * w]);
        {
            let (src, dst) = (t.data(), out.data_mut());
            demosaic_stencil(n, h, w, |o, i, wt| dst[o] = dst[o] + T::lit(wt) * src[i]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Demosaic { x }))
    }

    /// Samples an RGB tensor `(N, 3, H, W)` at RGGB sites, producing `(N, 4, H/2, W/2)`.
    pub fn mosaic(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!(
                "mosaic expects (N, 3, even, even), got {:?}",
                t.dims()
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, 4, ho, wo]);
        for s in 0..n {
            for ch in 0..4 {
                for y in 0..ho {
                    for xx in 0..wo {
                        let src = mosaic_index(s, ch, y, xx, h, w);
                        out.set(s, ch, y, xx, t.data()[src]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Mosaic { x }))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc_into(acc, &g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => {
                let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                let r =
                    conv2d_backward(self.value(x), self.value(w), g, stride, pad, groups, need)?;
                if let Some(dx) = r.dx {
                    self.send(grads, x, dx);
                }
                if let Some(dw) = r.dw {
                    self.send(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    let db = db.reshape(self.value(b).dims())?;
                    self.send(grads, b, db);
                }
            }
            &Op::Relu { x, slope } => {
                let d = zip_map(self.value(x), g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else {
                        slope * gv
                    }
                });
                self.send(grads, x, d);
            }
            &Op::AvgPool { x, k } => {
                let [n, c, h, w] = self.value(x).dims();
                let (ho, wo) = (h / k, w / k);
                let norm = T::one() / T::lit((k * k) as f64);
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n * c {
                    let src = &g.data()[s * ho * wo..(s + 1) * ho * wo];
                    let dst = &mut d.data_mut()[s * h * w..(s + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / k) * wo + xx / k] * norm;
                        }
                    }
                }
                self.send(grads, x, d);
            }
            &Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.value(x).dims();
                let (ho, wo) = (h * factor, w * factor);
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n * c {
                    let src = &g.data()[s * ho * wo..(s + 1) * ho * wo];
                    let dst = &mut d.data_mut()[s * h * w..(s + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let o = (y / factor) * w + xx / factor;
                            dst[o] = dst[o] + src[y * wo + xx];
                        }
                    }
                }
                self.send(grads, x, d);
            }
            &Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(a).dims();
                let cb = self.value(b).c();
                let p = h * w;
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for s in 0..n {
                    let base = s * (ca + cb) * p;
                    da.extend_from_slice(&g.data()[base..base + ca * p]);
                    db.extend_from_slice(&g.data()[base + ca * p..base + (ca + cb) * p]);
                }
                self.send(grads, a, Tensor::from_vec([n, ca, h, w], da)?);
                self.send(grads, b, Tensor::from_vec([n, cb, h, w], db)?);
            }
            &Op::Add { a, b } => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g.clone());
            }
            &Op::Sub { a, b } => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g.map(|v| -v));
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    self.send(grads, a, zip_map(g, self.value(b), |gv, bv| gv * bv));
                }
                if self.rg(b) {
                    self.send(grads, b, zip_map(g, self.value(a), |gv, av| gv * av));
                }
            }
            &Op::Affine { x, scale } => self.send(grads, x, g.map(|v| v * scale)),
            Op::SampleAffine { x, scales } => {
                let per = g.numel() / g.n().max(1);
                let mut d = g.clone();
                for (i, chunk) in d.data_mut().chunks_mut(per.max(1)).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v * scales[i]);
                }
                self.send(grads, *x, d);
            }
            Op::ScaleChannels { x, gains } => {
                let [_, c, h, w] = g.dims();
                let mut d = g.clone();
                for (i, plane) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let gain = gains[i % c];
                    plane.iter_mut().for_each(|v| *v = *v * gain);
                }
                self.send(grads, *x, d);
            }
            &Op::Abs { x } => {
                let d = zip_map(self.value(x), g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.send(grads, x, d);
            }
            &Op::Square { x } => {
                let d = zip_map(self.value(x), g, |v, gv| T::lit(2.0) * v * gv);
                self.send(grads, x, d);
            }
            &Op::Sqrt { x } => {
                let d = zip_map(&node.value, g, |y, gv| gv / (T::lit(2.0) * y));
                self.send(grads, x, d);
            }
            &Op::Clamp { x, lo, hi } => {
                let d = zip_map(self.value(x), g, |v, gv| {
                    if v >= lo && v <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.send(grads, x, d);
            }
            &Op::Srgb { x } => {
                let d = zip_map(self.value(x), g, |v, gv| srgb_slope(v) * gv);
                self.send(grads, x, d);
            }
            &Op::Sum { x } => {
                let gv = g.data()[0];
                self.send(grads, x, Tensor::full(self.value(x).dims(), gv));
            }
            &Op::Mean { x } => {
                let t = self.value(x);
                let gv = g.data()[0] / T::lit(t.numel() as f64);
                self.send(grads, x, Tensor::full(t.dims(), gv));
            }
            &Op::Gram { x } => {
                let t = self.value(x);
                let [n, c, h, w] = t.dims();
                let p = h * w;
                let norm = T::one() / T::lit((c * p) as f64);
                let mut d = Tensor::zeros(t.dims());
                let mut sym = vec![T::zero(); c * c];
                for s in 0..n {
                    let gs = &g.data()[s * c * c..(s + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = gs[i * c + j] + gs[j * c + i];
                        }
                    }
                    let a = &t.data()[s * c * p..(s + 1) * c * p];
                    let ds = &mut d.data_mut()[s * c * p..(s + 1) * c * p];
                    T::gemm(
                        c,
                        c,
                        p,
                        norm,
                        &sym,
                        c as isize,
                        1,
                        a,
                        p as isize,
                        1,
                        T::zero(),
                        ds,
                        p as isize,
                        1,
                    );
                }
                self.send(grads, x, d);
            }
            &Op::RepeatChannels { x } => {
                let [n, c, h, w] = self.value(x).dims();
                let target = g.c();
                let p = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for co in 0..target {
                        let ci = co % c;
                        let src = &g.data()[(s * target + co) * p..(s * target + co + 1) * p];
                        let dst = &mut d.data_mut()[(s * c + ci) * p..(s * c + ci + 1) * p];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o = *o + *v;
                        }
                    }
                }
                self.send(grads, x, d);
            }
            &Op::Demosaic { x } => {
                let [n, _, h, w] = self.value(x).dims();
                let mut d = Tensor::zeros(self.value(x).dims());
                {
                    let dst = d.data_mut();
                    demosaic_stencil(n, h, w, |o, i, wt| {
                        dst[i] = dst[i] + T::lit(wt) * g.data()[o]
                    });
                }
                self.send(grads, x, d);
            }
            &Op::Mosaic { x } => {
                let [n, _, h, w] = self.value(x).dims();
                let (ho, wo) = (h / 2, w / 2);
                let mut d = Tensor::zeros([n, 3, h, w]);
                for s in 0..n {
                    for ch in 0..4 {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let dst = mosaic_index(s, ch, y, xx, h, w);
                                d.data_mut()[dst] = d.data_mut()[dst] + g.at(s, ch, y, xx);
                            }
                        }
                    }
                }
                self.send(grads, x, d);
            }
        }
        Ok(())
    }
}

fn acc_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + *b;
    }
}
