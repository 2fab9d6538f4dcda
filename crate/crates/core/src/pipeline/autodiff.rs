//! Tape-based reverse-mode autodiff over batched `[N, C, H, W]` tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! is a valid topological order for the backward pass.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::kernels::{corner_pool, corner_pool_backward, Bilinear, PoolRecord};
use crate::targets::CornerKind;
use crate::tensor::Tensor;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.id(name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        /// im2col buffers, one `[Ci*k*k, Ho*Wo]` block per image; empty for 1x1 stride 1.
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    StopGradient,
    CornerPool(Var, PoolRecord),
    Sample { feat: Var, offsets: Var },
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape. Parameter values are copied in at use.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor, context: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            context,
            expected: vec![0, 0, 0, 0],
            got: t.shape().to_vec(),
        }),
    }
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), beta: f64, c: &mut [f64]) {
    // c[m, n] (row-major, contiguous) = a . b + beta * c
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, out: &mut [f64]) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sample_point(offsets: &[f64], k: usize, hw: usize, row: usize, col: usize, w: usize) -> Point2 {
    let at = (row * w + col) + 2 * k * hw;
    Point2::new(col as f64 + offsets[at], row as f64 + offsets[at + hw])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients, for checking input derivatives.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// Same-padded (for odd `k`) convolution; `w` is `[Co, Ci, k, k]`, `b` is `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.value(x), "conv input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] || ws[2] % 2 == 0 || stride == 0 {
            return Err(Error::ShapeMismatch {
                context: "conv weight",
                expected: vec![ws.first().copied().unwrap_or(0), ci, 3, 3],
                got: ws,
            });
        }
        let (co, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            self.value(b).check_shape("conv bias", &[co])?;
        }
        let pad = (k - 1) / 2;
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
        let (kk, q) = (ci * k * k, ho * wo);
        let direct = k == 1 && stride == 1;
        let mut cols = if direct { Vec::new() } else { vec![0.0; n * kk * q] };
        let mut out = vec![0.0; n * co * q];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for img in 0..n {
                let xi = &xv[img * ci * h * wd..(img + 1) * ci * h * wd];
                let col: &[f64] = if direct {
                    xi
                } else {
                    let c = &mut cols[img * kk * q..(img + 1) * kk * q];
                    im2col(xi, ci, h, wd, k, stride, pad, ho, wo, c);
                    c
                };
                let y = &mut out[img * co * q..(img + 1) * co * q];
                if let Some(b) = b {
                    for (o, &bv) in self.value(b).data().iter().enumerate() {
                        y[o * q..(o + 1) * q].fill(bv);
                    }
                }
                gemm(co, kk, q, (wv, kk as isize, 1), (col, q as isize, 1), 1.0, y);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        let value = Tensor::from_vec(&[n, co, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let needs = self.needs_grad(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        let needs = self.needs_grad(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    pub fn corner_pool(&mut self, x: Var, kind: CornerKind) -> Var {
        let (v, rec) = corner_pool(self.value(x), kind);
        let needs = self.needs_grad(x);
        self.push(v, Op::CornerPool(x, rec), needs)
    }

    /// Bilinearly samples `feat [N, C, H, W]` at `P` points per cell.
    ///
    /// `offsets [N, 2P, H, W]` holds `(dx, dy)` per point in cell units
    /// relative to the cell's own position. The output is `[N, P*C, H, W]`
    /// with channel `k*C + c` holding channel `c` sampled at point `k`.
    pub fn sample_points(&mut self, feat: Var, offsets: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(feat), "sample features")?;
        let [on, oc, oh, ow] = dims4(self.value(offsets), "sample offsets")?;
        if on != n || oh != h || ow != w || oc % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "sample offsets",
                expected: vec![n, oc, h, w],
                got: vec![on, oc, oh, ow],
            });
        }
        let (p, hw) = (oc / 2, h * w);
        let mut out = vec![0.0; n * p * c * hw];
        let fv = self.value(feat).data();
        let ov = self.value(offsets).data();
        for img in 0..n {
            let f = &fv[img * c * hw..(img + 1) * c * hw];
            let o = &ov[img * oc * hw..(img + 1) * oc * hw];
            let dst = &mut out[img * p * c * hw..(img + 1) * p * c * hw];
            for row in 0..h {
                for col in 0..w {
                    for k in 0..p {
                        let b = Bilinear::at(sample_point(o, k, hw, row, col, w), h, w);
                        for ch in 0..c {
                            dst[(k * c + ch) * hw + row * w + col] = b.sample(&f[ch * hw..(ch + 1) * hw], w);
                        }
                    }
                }
            }
        }
        let needs = self.needs_grad(feat) || self.needs_grad(offsets);
        let v = Tensor::from_vec(&[n, p * c, h, w], out)?;
        Ok(self.push(v, Op::Sample { feat, offsets }, needs))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = dims4(self.value(parts[0]), "concat")?;
        let mut total = 0;
        for &p in parts {
            let d = dims4(self.value(p), "concat")?;
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(Error::ShapeMismatch {
                    context: "concat",
                    expected: first.to_vec(),
                    got: d.to_vec(),
                });
            }
            total += d[1];
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for img in 0..n {
            for &p in parts {
                let c = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[img * c * hw..(img + 1) * c * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let v = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), needs))
    }

    /// Reverse sweep seeded with `d(objective)/d(var)` for each seed.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            g.check_shape("gradient seed", self.value(*v).shape())?;
            if !self.needs_grad(*v) {
                continue;
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params: Vec<(usize, Tensor)> = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Param(id) => params.push((*id, g)),
                Op::StopGradient => {}
                Op::Relu(x) => {
                    let mut d = g;
                    for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.send(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    self.send(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        self.send(&mut grads, *b, g.clone());
                    }
                    self.send(&mut grads, *a, g);
                }
                Op::CornerPool(x, rec) => {
                    let d = corner_pool_backward(&g, rec);
                    self.send(&mut grads, *x, d);
                }
                Op::Concat(parts) => {
                    let [n, total, h, w] = dims4(&g, "concat grad")?;
                    let hw = h * w;
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        if self.needs_grad(p) {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for img in 0..n {
                                let base = (img * total + start) * hw;
                                d.extend_from_slice(&g.data()[base..base + c * hw]);
                            }
                            self.send(&mut grads, p, Tensor::from_vec(&[n, c, h, w], d)?);
                        }
                        start += c;
                    }
                }
                Op::Sample { feat, offsets } => self.sample_backward(&mut grads, *feat, *offsets, &g)?,
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => self.conv_backward(&mut grads, (*x, *w, *b), (*k, *stride, *pad), cols, &g)?,
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs_grad(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn sample_backward(&self, grads: &mut [Option<Tensor>], feat: Var, offsets: Var, g: &Tensor) -> Result<()> {
        let [n, c, h, w] = dims4(self.value(feat), "sample features")?;
        let oc = self.value(offsets).shape()[1];
        let (p, hw) = (oc / 2, h * w);
        let (want_f, want_o) = (self.needs_grad(feat), self.needs_grad(offsets));
        let mut df = vec![0.0; if want_f { n * c * hw } else { 0 }];
        let mut doff = vec![0.0; if want_o { n * oc * hw } else { 0 }];
        let fv = self.value(feat).data();
        let ov = self.value(offsets).data();
        for img in 0..n {
            let f = &fv[img * c * hw..(img + 1) * c * hw];
            let o = &ov[img * oc * hw..(img + 1) * oc * hw];
            let up = &g.data()[img * p * c * hw..(img + 1) * p * c * hw];
            for row in 0..h {
                for col in 0..w {
                    let cell = row * w + col;
                    for k in 0..p {
                        let b = Bilinear::at(sample_point(o, k, hw, row, col, w), h, w);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let u = up[(k * c + ch) * hw + cell];
                            if u == 0.0 {
                                continue;
                            }
                            let plane = &f[ch * hw..(ch + 1) * hw];
                            if want_f {
                                let dst = &mut df[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                                for (r, cc, wt) in b.taps() {
                                    dst[r * w + cc] += u * wt;
                                }
                            }
                            if want_o {
                                let (dx, dy) = b.point_grad(plane, w);
                                gx += u * dx;
                                gy += u * dy;
                            }
                        }
                        if want_o {
                            doff[(img * oc + 2 * k) * hw + cell] += gx;
                            doff[(img * oc + 2 * k + 1) * hw + cell] += gy;
                        }
                    }
                }
            }
        }
        if want_f {
            self.send(grads, feat, Tensor::from_vec(&[n, c, h, w], df)?);
        }
        if want_o {
            self.send(grads, offsets, Tensor::from_vec(&[n, oc, h, w], doff)?);
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        (x, w, b): (Var, Var, Option<Var>),
        (k, stride, pad): (usize, usize, usize),
        cols: &[f64],
        g: &Tensor,
    ) -> Result<()> {
        let [n, ci, h, wd] = dims4(self.value(x), "conv input")?;
        let [_, co, ho, wo] = dims4(g, "conv grad")?;
        let (kk, q) = (ci * k * k, ho * wo);
        let direct = cols.is_empty();
        let wv = self.value(w).data();
        let gd = g.data();
        if let Some(b) = b.filter(|&b| self.needs_grad(b)) {
            let mut db = vec![0.0; co];
            for img in 0..n {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += gd[(img * co + o) * q..(img * co + o + 1) * q].iter().sum::<f64>();
                }
            }
            self.send(grads, b, Tensor::from_vec(&[co], db)?);
        }
        if self.needs_grad(w) {
            let mut dw = vec![0.0; co * kk];
            let xv = self.value(x).data();
            for img in 0..n {
                let col = if direct {
                    &xv[img * ci * h * wd..(img + 1) * ci * h * wd]
                } else {
                    &cols[img * kk * q..(img + 1) * kk * q]
                };
                let gy = &gd[img * co * q..(img + 1) * co * q];
                // dw[co, kk] += gy[co, q] . col[kk, q]^T
                gemm(co, q, kk, (gy, q as isize, 1), (col, 1, q as isize), 1.0, &mut dw);
            }
            self.send(grads, w, Tensor::from_vec(self.value(w).shape(), dw)?);
        }
        if self.needs_grad(x) {
            let mut dx = vec![0.0; n * ci * h * wd];
            let mut dcol = vec![0.0; if direct { 0 } else { kk * q }];
            for img in 0..n {
                let gy = &gd[img * co * q..(img + 1) * co * q];
                let dxi = &mut dx[img * ci * h * wd..(img + 1) * ci * h * wd];
                // dcol[kk, q] = w[co, kk]^T . gy[co, q]
                if direct {
                    gemm(kk, co, q, (wv, 1, kk as isize), (gy, q as isize, 1), 0.0, dxi);
                } else {
                    gemm(kk, co, q, (wv, 1, kk as isize), (gy, q as isize, 1), 0.0, &mut dcol);
                    col2im(&dcol, ci, h, wd, k, stride, pad, ho, wo, dxi);
                }
            }
            self.send(grads, x, Tensor::from_vec(&[n, ci, h, wd], dx)?);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient reaching a leaf created with [`Graph::variable`].
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Accumulated per-parameter gradients, indexed by parameter id; `None`
    /// for parameters the backward pass never reached.
    pub fn params(self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; num_params];
        for (id, g) in self.params {
            accumulate(&mut out[id], g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let [n, ci, h, wd] = dims4(x, "").unwrap();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k - 1) / 2;
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for img in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w.at(&[o, c, ky, kx]) * x.at(&[img, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        *out.at_mut(&[img, o, oy, ox]) = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, h, w) in &[(3, 1, 5, 4), (3, 2, 7, 6), (1, 1, 3, 3), (1, 2, 4, 5)] {
            let x = rand_tensor(&mut rng, &[2, 3, h, w]);
            let wt = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.variable(wt.clone()), g.variable(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride).unwrap();
            let want = naive_conv(&x, &wt, &b, stride);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_blocks_backward() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[1, 1, 2, 2], 0.3));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s), g.value(x));
        let y = g.add(s, x).unwrap();
        let grads = g.backward(&[(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut g = Graph::new();
        let x = g.variable(t.clone());
        let z = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), &t);
        let up = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let grads = g.backward(&[(y, up.clone())]).unwrap();
        assert_eq!(grads.of(x).unwrap(), &up);
    }

    #[test]
    fn sample_at_zero_offset_copies_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_tensor(&mut rng, &[1, 2, 3, 4]);
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        let o = g.input(Tensor::zeros(&[1, 4, 3, 4]));
        let s = g.sample_points(fv, o).unwrap();
        let out = g.value(s);
        assert_eq!(out.shape(), &[1, 4, 3, 4]);
        assert_eq!(&out.data()[..24], f.data());
        assert_eq!(&out.data()[24..], f.data());
    }

    #[test]
    fn shape_errors_at_build_time() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.input(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(g.conv2d(x, w, None, 1).is_err());
        let y = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(g.add(x, y).is_err());
        let z = g.input(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(g.concat(&[x, z]).is_err());
        let off = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(g.sample_points(x, off).is_err());
    }

    #[test]
    fn params_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 1, 1], 3.0));
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        let a = g.conv2d(x, w1, None, 1).unwrap();
        let b = g.conv2d(x, w2, None, 1).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(&[(y, Tensor::full(&[1, 1, 1, 1], 1.0))]).unwrap().params(1);
        assert_eq!(grads[0].as_ref().unwrap().data(), &[6.0]);
    }
}
