//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order together with a
//! closure that maps the output gradient onto its inputs. `backward` walks
//! the tape in reverse. Everything runs on one thread and every reduction has
//! a fixed order, so results are bit-reproducible.
//!
//! Feature maps for the convolutional path are `(N, C, D, H, W)`; token
//! tensors for the transformer path are `(..., C)` with channels last.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sentinel in gather maps for slots that read as zero.
pub const GATHER_ZERO: u32 = u32::MAX;

const NORM_EPS: f64 = 1e-5;

type BackwardFn<T> = Box<dyn Fn(&[T], &mut Grads<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradient accumulators, one lazily allocated buffer per tape entry.
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Grads<T> {
    fn slot(&mut self, v: Var) -> &mut [T] {
        let size = self.sizes[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); size])
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        for (a, &b) in self.slot(v).iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].as_deref()
    }

    /// Like [`Grads::get`] but zero-filled when nothing flowed into `v`.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.sizes[v.0]],
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads = Grads {
            slots: vec![None; nodes.len()],
            sizes: nodes.iter().map(|n| n.value.numel()).collect(),
        };
        grads.slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(backward) = nodes[i].backward.as_ref() else {
                continue;
            };
            if let Some(g) = grads.slots[i].take() {
                backward(&g, &mut grads);
            }
        }
        Ok(grads)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let (ga, gb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            out,
            ga || gb,
            Some(Box::new(move |g, grads| {
                if ga {
                    grads.accumulate(a, g);
                }
                if gb {
                    grads.accumulate(b, g);
                }
            })),
        ))
    }

    /// Sum of all elements.
    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let total = vx.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = vx.numel();
        self.push(
            Tensor::from_vec(&[1], vec![total]).expect("scalar"),
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let g0 = g[0];
                for v in grads.slot(x).iter_mut().take(n) {
                    *v = *v + g0;
                }
            })),
        )
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&self, x: Var, weights: Rc<Tensor<T>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs {:?}",
                vx.shape(),
                weights.shape()
            )));
        }
        let total = vx
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(
            Tensor::from_vec(&[1], vec![total])?,
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let g0 = g[0];
                for (d, &w) in grads.slot(x).iter_mut().zip(weights.data()) {
                    *d = *d + g0 * w;
                }
            })),
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&self, x: Var, index: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Shape(format!(
                "gather: shape {:?} vs {} indices",
                shape,
                index.len()
            )));
        }
        let src = vx.data();
        let mut data = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(T::zero());
            } else {
                let i = i as usize;
                if i >= src.len() {
                    return Err(Error::Shape(format!("gather index {i} out of range {}", src.len())));
                }
                data.push(src[i]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let dx = grads.slot(x);
                for (&i, &gi) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i as usize] = dx[i as usize] + gi;
                    }
                }
            })),
        ))
    }

    /// `x (..., K) * w (K, N) + b (N)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        let k = *xs.last().ok_or_else(|| Error::Shape("linear: scalar input".into()))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let n = ws[1];
        let m = vx.numel() / k.max(1);
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [n] {
                    return Err(Error::Shape(format!("linear: bias {:?} vs {n}", vb.shape())));
                }
                Some(vb)
            }
            None => None,
        };
        let mut out = vec![T::zero(); m * n];
        if let Some(vb) = &vb {
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(vb.data());
            }
        }
        T::gemm(
            m, k, n, T::one(), vx.data(), k as isize, 1, vw.data(), n as isize, 1, T::one(), &mut out,
            n as isize, 1,
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("nonempty") = n;
        let gx = self.requires_grad(x);
        let gw = self.requires_grad(w);
        let gb = b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            gx || gw || gb,
            Some(Box::new(move |g, grads| {
                if gx {
                    // dx = g * w^T
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, vw.data(), 1, n as isize, T::one(),
                        grads.slot(x), k as isize, 1,
                    );
                }
                if gw {
                    // dw = x^T * g
                    T::gemm(
                        k, m, n, T::one(), vx.data(), 1, k as isize, g, n as isize, 1, T::one(),
                        grads.slot(w), n as isize, 1,
                    );
                }
                if gb {
                    let db = grads.slot(b.expect("bias"));
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            })),
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = *vx.shape().last().ok_or_else(|| Error::Shape("layer_norm: scalar".into()))?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: width {c} vs gamma {:?} beta {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.numel() / c;
        let (xhat, rstd) = normalize_groups(vx.data(), rows, c);
        let mut out = vec![T::zero(); vx.numel()];
        for (row_out, row_hat) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for i in 0..c {
                row_out[i] = row_hat[i] * vg.data()[i] + vb.data()[i];
            }
        }
        let gx = self.requires_grad(x);
        let gg = self.requires_grad(gamma);
        let gbeta = self.requires_grad(beta);
        Ok(self.push(
            Tensor::from_vec(vx.shape(), out)?,
            gx || gg || gbeta,
            Some(Box::new(move |g, grads| {
                if gg {
                    let dg = grads.slot(gamma);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for i in 0..c {
                            dg[i] = dg[i] + gr[i] * hr[i];
                        }
                    }
                }
                if gbeta {
                    let db = grads.slot(beta);
                    for gr in g.chunks_exact(c) {
                        for i in 0..c {
                            db[i] = db[i] + gr[i];
                        }
                    }
                }
                if gx {
                    let dx = grads.slot(x);
                    let mut dhat = vec![T::zero(); c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        for i in 0..c {
                            dhat[i] = gr[i] * vg.data()[i];
                        }
                        norm_backward(&dhat, &xhat[r * c..(r + 1) * c], rstd[r], &mut dx[r * c..(r + 1) * c]);
                    }
                }
            })),
        ))
    }

    /// Tanh-form GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let k = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
        let a = T::cast_from(0.044715);
        let half = T::cast_from(0.5);
        let three = T::cast_from(3.0);
        let data = vx
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(
            Tensor::from_vec(vx.shape(), data).expect("same shape"),
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let dx = grads.slot(x);
                for ((d, &v), &gi) in dx.iter_mut().zip(vx.data()).zip(g) {
                    let t = (k * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * k * (T::one() + three * a * v * v);
                    *d = *d + gi * (half * (T::one() + t) + half * v * dt);
                }
            })),
        )
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let vx = self.value(x);
        let s = T::cast_from(slope);
        let data = vx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        self.push(
            Tensor::from_vec(vx.shape(), data).expect("same shape"),
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let dx = grads.slot(x);
                for ((d, &v), &gi) in dx.iter_mut().zip(vx.data()).zip(g) {
                    *d = *d + if v > T::zero() { gi } else { gi * s };
                }
            })),
        )
    }

    /// Concatenates two `(N, C, ...)` tensors along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let spatial: usize = sa[2..].iter().product();
        let (la, lb) = (sa[1] * spatial, sb[1] * spatial);
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&vb.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        let (ga, gb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            ga || gb,
            Some(Box::new(move |g, grads| {
                for i in 0..n {
                    let base = i * (la + lb);
                    if ga {
                        let da = &mut grads.slot(a)[i * la..(i + 1) * la];
                        for (d, &v) in da.iter_mut().zip(&g[base..base + la]) {
                            *d = *d + v;
                        }
                    }
                    if gb {
                        let db = &mut grads.slot(b)[i * lb..(i + 1) * lb];
                        for (d, &v) in db.iter_mut().zip(&g[base + la..base + la + lb]) {
                            *d = *d + v;
                        }
                    }
                }
            })),
        ))
    }

    /// Stride-1 3D convolution with zero "same" padding and an odd cubic kernel.
    ///
    /// `x: (N, Ci, D, H, W)`, `w: (Co, Ci, k, k, k)`, `b: (Co)`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape();
        let ws = vw.shape();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv3d: input {xs:?} vs weight {ws:?}")));
        }
        let (n, ci) = (xs[0], xs[1]);
        let dims = [xs[2], xs[3], xs[4]];
        let (co, k) = (ws[0], ws[2]);
        if vb.shape() != [co] {
            return Err(Error::Shape(format!("conv3d: bias {:?} vs {co}", vb.shape())));
        }
        let s: usize = dims.iter().product();
        let rows = ci * k * k * k;
        let mut out = vec![T::zero(); n * co * s];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); rows * s] };
        for i in 0..n {
            let xi = &vx.data()[i * ci * s..(i + 1) * ci * s];
            let oi = &mut out[i * co * s..(i + 1) * co * s];
            for (c, row) in oi.chunks_exact_mut(s).enumerate() {
                row.fill(vb.data()[c]);
            }
            let src = if k == 1 {
                xi
            } else {
                im2col(xi, ci, dims, k, &mut col);
                &col
            };
            T::gemm(
                co, rows, s, T::one(), vw.data(), rows as isize, 1, src, s as isize, 1, T::one(), oi,
                s as isize, 1,
            );
        }
        drop(col);
        let shape = [n, co, dims[0], dims[1], dims[2]];
        let gx = self.requires_grad(x);
        let gw = self.requires_grad(w);
        let gb = self.requires_grad(b);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            gx || gw || gb,
            Some(Box::new(move |g, grads| {
                let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); rows * s] };
                for i in 0..n {
                    let gi = &g[i * co * s..(i + 1) * co * s];
                    if gb {
                        let db = grads.slot(b);
                        for (c, row) in gi.chunks_exact(s).enumerate() {
                            db[c] = db[c] + row.iter().fold(T::zero(), |acc, &v| acc + v);
                        }
                    }
                    if gw {
                        let xi = &vx.data()[i * ci * s..(i + 1) * ci * s];
                        let src = if k == 1 {
                            xi
                        } else {
                            im2col(xi, ci, dims, k, &mut col);
                            &col
                        };
                        // dw (co x rows) += g (co x s) * col^T (s x rows)
                        T::gemm(
                            co, s, rows, T::one(), gi, s as isize, 1, src, 1, s as isize, T::one(),
                            grads.slot(w), rows as isize, 1,
                        );
                    }
                    if gx {
                        let dxi = &mut grads.slot(x)[i * ci * s..(i + 1) * ci * s];
                        if k == 1 {
                            T::gemm(
                                rows, co, s, T::one(), vw.data(), 1, rows as isize, gi, s as isize, 1,
                                T::one(), dxi, s as isize, 1,
                            );
                        } else {
                            T::gemm(
                                rows, co, s, T::one(), vw.data(), 1, rows as isize, gi, s as isize, 1,
                                T::zero(), &mut col, s as isize, 1,
                            );
                            col2im(&col, ci, dims, k, dxi);
                        }
                    }
                }
            })),
        ))
    }

    /// Kernel-2, stride-2 transposed convolution doubling every extent.
    ///
    /// `x: (N, Ci, D, H, W)`, `w: (Ci, Co, 2, 2, 2)`, `b: (Co)`.
    pub fn conv_transpose3d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape();
        let ws = vw.shape();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::Shape(format!("conv_transpose3d: input {xs:?} vs weight {ws:?}")));
        }
        let (n, ci, co) = (xs[0], xs[1], ws[1]);
        if vb.shape() != [co] {
            return Err(Error::Shape(format!("conv_transpose3d: bias {:?} vs {co}", vb.shape())));
        }
        let [d, h, wd] = [xs[2], xs[3], xs[4]];
        let s = d * h * wd;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
        let os = 8 * s;
        let co8 = co * 8;
        let mut out = vec![T::zero(); n * co * os];
        let mut cols = vec![T::zero(); co8 * s];
        for i in 0..n {
            let xi = &vx.data()[i * ci * s..(i + 1) * ci * s];
            // cols (co8 x s) = w^T (co8 x ci) * x (ci x s)
            T::gemm(
                co8, ci, s, T::one(), vw.data(), 1, co8 as isize, xi, s as isize, 1, T::zero(), &mut cols,
                s as isize, 1,
            );
            let oi = &mut out[i * co * os..(i + 1) * co * os];
            for c in 0..co {
                let bias = vb.data()[c];
                for tap in 0..8 {
                    let (a, bb, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                    let row = &cols[(c * 8 + tap) * s..(c * 8 + tap + 1) * s];
                    for z in 0..d {
                        for y in 0..h {
                            let base = ((c * od + 2 * z + a) * oh + 2 * y + bb) * ow + cc;
                            let src = &row[(z * h + y) * wd..(z * h + y + 1) * wd];
                            for (xw, &v) in src.iter().enumerate() {
                                oi[base + 2 * xw] = v + bias;
                            }
                        }
                    }
                }
            }
        }
        let shape = [n, co, od, oh, ow];
        let gx = self.requires_grad(x);
        let gw = self.requires_grad(w);
        let gb = self.requires_grad(b);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            gx || gw || gb,
            Some(Box::new(move |g, grads| {
                let mut dcols = vec![T::zero(); co8 * s];
                for i in 0..n {
                    let gi = &g[i * co * os..(i + 1) * co * os];
                    if gb {
                        let db = grads.slot(b);
                        for (c, row) in gi.chunks_exact(os).enumerate() {
                            db[c] = db[c] + row.iter().fold(T::zero(), |acc, &v| acc + v);
                        }
                    }
                    for c in 0..co {
                        for tap in 0..8 {
                            let (a, bb, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                            let row = &mut dcols[(c * 8 + tap) * s..(c * 8 + tap + 1) * s];
                            for z in 0..d {
                                for y in 0..h {
                                    let base = ((c * od + 2 * z + a) * oh + 2 * y + bb) * ow + cc;
                                    let dst = &mut row[(z * h + y) * wd..(z * h + y + 1) * wd];
                                    for (xw, v) in dst.iter_mut().enumerate() {
                                        *v = gi[base + 2 * xw];
                                    }
                                }
                            }
                        }
                    }
                    if gw {
                        let xi = &vx.data()[i * ci * s..(i + 1) * ci * s];
                        // dw (ci x co8) += x (ci x s) * dcols^T (s x co8)
                        T::gemm(
                            ci, s, co8, T::one(), xi, s as isize, 1, &dcols, 1, s as isize, T::one(),
                            grads.slot(w), co8 as isize, 1,
                        );
                    }
                    if gx {
                        let dxi = &mut grads.slot(x)[i * ci * s..(i + 1) * ci * s];
                        T::gemm(
                            ci, co8, s, T::one(), vw.data(), co8 as isize, 1, &dcols, s as isize, 1, T::one(),
                            dxi, s as isize, 1,
                        );
                    }
                }
            })),
        ))
    }

    /// 2x2x2 max pooling with stride 2; ties go to the first voxel in raster order.
    pub fn max_pool3d(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let xs = vx.shape();
        if xs.len() != 5 {
            return Err(Error::Shape(format!("max_pool3d: {xs:?}")));
        }
        for (axis, &e) in ['d', 'h', 'w'].iter().zip(&xs[2..]) {
            if e % 2 != 0 {
                return Err(Error::NotDivisible {
                    axis: *axis,
                    extent: e,
                    divisor: 2,
                });
            }
        }
        let (nc, d, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = Vec::with_capacity(nc * od * oh * ow);
        let mut arg = Vec::with_capacity(nc * od * oh * ow);
        let src = vx.data();
        for p in 0..nc {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xw;
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let idx = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xw + c;
                                    if src[idx] > src[best] {
                                        best = idx;
                                    }
                                }
                            }
                        }
                        out.push(src[best]);
                        arg.push(best as u32);
                    }
                }
            }
        }
        let shape = [xs[0], xs[1], od, oh, ow];
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            self.requires_grad(x),
            Some(Box::new(move |g, grads| {
                let dx = grads.slot(x);
                for (&i, &gi) in arg.iter().zip(g) {
                    dx[i as usize] = dx[i as usize] + gi;
                }
            })),
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let xs = vx.shape();
        if xs.len() < 3 {
            return Err(Error::Shape(format!("instance_norm: {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "instance_norm: {c} channels vs gamma {:?} beta {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let (xhat, rstd) = normalize_groups(vx.data(), n * c, s);
        let mut out = vec![T::zero(); vx.numel()];
        for (p, (ro, rh)) in out.chunks_exact_mut(s).zip(xhat.chunks_exact(s)).enumerate() {
            let (gm, bt) = (vg.data()[p % c], vb.data()[p % c]);
            for (o, &v) in ro.iter_mut().zip(rh) {
                *o = v * gm + bt;
            }
        }
        let gx = self.requires_grad(x);
        let gg = self.requires_grad(gamma);
        let gbeta = self.requires_grad(beta);
        Ok(self.push(
            Tensor::from_vec(xs, out)?,
            gx || gg || gbeta,
            Some(Box::new(move |g, grads| {
                if gg || gbeta {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (p, (gr, hr)) in g.chunks_exact(s).zip(xhat.chunks_exact(s)).enumerate() {
                        let mut sg = T::zero();
                        let mut sb = T::zero();
                        for (&a, &b) in gr.iter().zip(hr) {
                            sg = sg + a * b;
                            sb = sb + a;
                        }
                        dg[p % c] = dg[p % c] + sg;
                        db[p % c] = db[p % c] + sb;
                    }
                    if gg {
                        grads.accumulate(gamma, &dg);
                    }
                    if gbeta {
                        grads.accumulate(beta, &db);
                    }
                }
                if gx {
                    let dx = grads.slot(x);
                    let mut dhat = vec![T::zero(); s];
                    for p in 0..n * c {
                        let gm = vg.data()[p % c];
                        for (d, &v) in dhat.iter_mut().zip(&g[p * s..(p + 1) * s]) {
                            *d = v * gm;
                        }
                        norm_backward(&dhat, &xhat[p * s..(p + 1) * s], rstd[p], &mut dx[p * s..(p + 1) * s]);
                    }
                }
            })),
        ))
    }

    /// Multi-head self-attention inside windows.
    ///
    /// `qkv: (B, T, 3C)` packed as `(3, heads, C / heads)` on the last axis;
    /// `table: (R, heads)` relative-position bias looked up through
    /// `rel_index (T * T)`; `mask: (num_windows, T, T)` where batch entry `b`
    /// uses window `b % num_windows`. Returns `(B, T, C)`.
    pub fn window_attention(
        &self,
        qkv: Var,
        table: Option<(Var, Rc<Vec<u32>>)>,
        mask: Option<Rc<Tensor<T>>>,
        heads: usize,
    ) -> Result<Var> {
        let vq = self.value(qkv);
        let vt = table.as_ref().map(|(tv, _)| self.value(*tv));
        let geo = AttentionShape::check(
            &vq,
            vt.as_deref().zip(table.as_ref().map(|(_, i)| i.as_slice())),
            mask.as_deref(),
            heads,
        )?;
        let (attn, out) = attention_forward(
            vq.data(),
            &geo,
            vt.as_deref().zip(table.as_ref().map(|(_, i)| i.as_slice())),
            mask.as_deref(),
        );
        let AttentionShape { bsz, t, c, heads, .. } = geo;
        let c3 = 3 * c;
        let dh = c / heads;
        let tt = t * t;
        let scale = geo.scale;

        let gq = self.requires_grad(qkv);
        let table_var = table.as_ref().map(|(tv, idx)| (*tv, Rc::clone(idx)));
        let gt = table_var.as_ref().is_some_and(|(tv, _)| self.requires_grad(*tv));
        Ok(self.push(
            Tensor::from_vec(&[bsz, t, c], out)?,
            gq || gt,
            Some(Box::new(move |g, grads| {
                let q = vq.data();
                let mut da = vec![T::zero(); tt];
                let mut dtable = if gt {
                    vec![T::zero(); grads.sizes[table_var.as_ref().expect("table").0 .0]]
                } else {
                    Vec::new()
                };
                let mut dqkv = vec![T::zero(); if gq { bsz * t * c3 } else { 0 }];
                for b in 0..bsz {
                    for hd in 0..heads {
                        let a = &attn[(b * heads + hd) * tt..(b * heads + hd + 1) * tt];
                        let go = b * t * c + hd * dh;
                        let qo = b * t * c3 + hd * dh;
                        let ko = qo + c;
                        let vo = qo + 2 * c;
                        // dA = dO v^T
                        T::gemm(
                            t, dh, t, T::one(), &g[go..], c as isize, 1, &q[vo..], 1, c3 as isize, T::zero(),
                            &mut da, t as isize, 1,
                        );
                        if gq {
                            // dv = A^T dO
                            T::gemm(
                                t, t, dh, T::one(), a, 1, t as isize, &g[go..], c as isize, 1, T::one(),
                                &mut dqkv[vo..], c3 as isize, 1,
                            );
                        }
                        // dS = A * (dA - rowsum(dA * A))
                        for (drow, arow) in da.chunks_exact_mut(t).zip(a.chunks_exact(t)) {
                            let dot = drow.iter().zip(arow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                            for (dv, &av) in drow.iter_mut().zip(arow) {
                                *dv = av * (*dv - dot);
                            }
                        }
                        if gt {
                            let idx = &table_var.as_ref().expect("table").1;
                            for (&ri, &dv) in idx.iter().zip(&da) {
                                let slot = ri as usize * heads + hd;
                                dtable[slot] = dtable[slot] + dv;
                            }
                        }
                        if gq {
                            // dq = scale dS k ; dk = scale dS^T q
                            T::gemm(
                                t, t, dh, scale, &da, t as isize, 1, &q[ko..], c3 as isize, 1, T::one(),
                                &mut dqkv[qo..], c3 as isize, 1,
                            );
                            T::gemm(
                                t, t, dh, scale, &da, 1, t as isize, &q[qo..], c3 as isize, 1, T::one(),
                                &mut dqkv[ko..], c3 as isize, 1,
                            );
                        }
                    }
                }
                if gq {
                    grads.accumulate(qkv, &dqkv);
                }
                if gt {
                    grads.accumulate(table_var.as_ref().expect("table").0, &dtable);
                }
            })),
        ))
    }

    /// Equal-weight mean of soft-Dice loss and voxel-wise cross-entropy.
    ///
    /// `logits: (N, K, D, H, W)`; `labels` holds `N * D * H * W` class ids.
    pub fn segmentation_loss(&self, logits: Var, labels: &[u8]) -> Result<(Var, LossParts)> {
        let vl = self.value(logits);
        let ls = vl.shape();
        if ls.len() < 3 {
            return Err(Error::Shape(format!("segmentation_loss: logits {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        let s: usize = ls[2..].iter().product();
        if labels.len() != n * s {
            return Err(Error::Shape(format!(
                "segmentation_loss: {} labels for {n} x {s} voxels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= k) {
            return Err(Error::LabelOutOfRange { value: bad, classes: k });
        }
        let probs = softmax_channels(vl.data(), n, k, s);
        let total_vox = (n * s) as f64;
        let mut ce = 0.0;
        for i in 0..n {
            for v in 0..s {
                let y = labels[i * s + v] as usize;
                ce -= probs[(i * k + y) * s + v].max(f64::MIN_POSITIVE).ln();
            }
        }
        ce /= total_vox;

        // dice per (sample, class)
        let mut inter = vec![0.0; n * k];
        let mut psum = vec![0.0; n * k];
        let mut gsum = vec![0.0; n * k];
        for i in 0..n {
            for cl in 0..k {
                let p = &probs[(i * k + cl) * s..(i * k + cl + 1) * s];
                let lab = &labels[i * s..(i + 1) * s];
                let (mut it, mut ps, mut gs) = (0.0, 0.0, 0.0);
                for (&pv, &lv) in p.iter().zip(lab) {
                    ps += pv;
                    if lv as usize == cl {
                        it += pv;
                        gs += 1.0;
                    }
                }
                inter[i * k + cl] = it;
                psum[i * k + cl] = ps;
                gsum[i * k + cl] = gs;
            }
        }
        let nk = (n * k) as f64;
        let mut dice_mean = 0.0;
        for j in 0..n * k {
            dice_mean += (2.0 * inter[j] + DICE_SMOOTH) / (psum[j] + gsum[j] + DICE_SMOOTH);
        }
        dice_mean /= nk;
        let dice_loss = 1.0 - dice_mean;
        let total = 0.5 * (dice_loss + ce);
        let parts = LossParts {
            dice: dice_loss,
            cross_entropy: ce,
            total,
        };
        let labels: Vec<u8> = labels.to_vec();
        let var = self.push(
            Tensor::from_vec(&[1], vec![T::cast_from(total)])?,
            self.requires_grad(logits),
            Some(Box::new(move |g, grads| {
                let g0 = g[0].as_f64();
                let dl = grads.slot(logits);
                let mut dp = vec![0.0; k];
                for i in 0..n {
                    for v in 0..s {
                        let y = labels[i * s + v] as usize;
                        let mut dot = 0.0;
                        for (cl, dpc) in dp.iter_mut().enumerate() {
                            let j = i * k + cl;
                            let den = psum[j] + gsum[j] + DICE_SMOOTH;
                            let num = 2.0 * inter[j] + DICE_SMOOTH;
                            let yv = if y == cl { 1.0 } else { 0.0 };
                            // d(dice_loss)/dp = -(1/nk) d(dice)/dp
                            let ddice = -(2.0 * yv * den - num) / (den * den) / nk;
                            let p = probs[j * s + v];
                            let dce = -yv / p.max(f64::MIN_POSITIVE) / total_vox;
                            *dpc = 0.5 * g0 * (ddice + dce);
                            dot += *dpc * p;
                        }
                        for (cl, &dpc) in dp.iter().enumerate() {
                            let idx = (i * k + cl) * s + v;
                            let p = probs[idx];
                            dl[idx] = dl[idx] + T::cast_from(p * (dpc - dot));
                        }
                    }
                }
            })),
        );
        Ok((var, parts))
    }
}

/// Smoothing added to numerator and denominator of soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Components of [`Graph::segmentation_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub dice: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

/// Per-voxel softmax over the channel axis of `(N, K, S)`, in `f64`.
pub fn softmax_channels<T: Scalar>(logits: &[T], n: usize, k: usize, s: usize) -> Vec<f64> {
    let mut probs = vec![0.0; n * k * s];
    for i in 0..n {
        for v in 0..s {
            let mut mx = f64::NEG_INFINITY;
            for cl in 0..k {
                mx = mx.max(logits[(i * k + cl) * s + v].as_f64());
            }
            let mut z = 0.0;
            for cl in 0..k {
                let e = (logits[(i * k + cl) * s + v].as_f64() - mx).exp();
                probs[(i * k + cl) * s + v] = e;
                z += e;
            }
            for cl in 0..k {
                probs[(i * k + cl) * s + v] /= z;
            }
        }
    }
    probs
}

#[derive(Clone, Copy)]
struct AttentionShape<T> {
    bsz: usize,
    t: usize,
    c: usize,
    heads: usize,
    num_windows: usize,
    scale: T,
}

impl<T: Scalar> AttentionShape<T> {
    fn check(
        qkv: &Tensor<T>,
        table: Option<(&Tensor<T>, &[u32])>,
        mask: Option<&Tensor<T>>,
        heads: usize,
    ) -> Result<Self> {
        let qs = qkv.shape();
        if qs.len() != 3 || !qs[2].is_multiple_of(3) {
            return Err(Error::Shape(format!("window_attention: qkv {qs:?}")));
        }
        let (bsz, t, c) = (qs[0], qs[1], qs[2] / 3);
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!("window_attention: {c} channels vs {heads} heads")));
        }
        if let Some((tv, idx)) = table {
            if tv.shape().len() != 2 || tv.shape()[1] != heads || idx.len() != t * t {
                return Err(Error::Shape(format!(
                    "window_attention: bias table {:?} / index {} vs {heads} heads, {t} tokens",
                    tv.shape(),
                    idx.len()
                )));
            }
            if idx.iter().any(|&i| i as usize >= tv.shape()[0]) {
                return Err(Error::Shape("window_attention: bias index out of range".into()));
            }
        }
        let num_windows = match mask {
            Some(m) => {
                let ms = m.shape();
                if ms.len() != 3 || ms[1] != t || ms[2] != t || ms[0] == 0 || bsz % ms[0] != 0 {
                    return Err(Error::Shape(format!(
                        "window_attention: mask {ms:?} vs batch {bsz} of {t} tokens"
                    )));
                }
                ms[0]
            }
            None => 1,
        };
        Ok(Self {
            bsz,
            t,
            c,
            heads,
            num_windows,
            scale: T::cast_from(1.0 / ((c / heads) as f64).sqrt()),
        })
    }
}

/// Returns the attention weights `(B, heads, T, T)` and the output `(B, T, C)`.
fn attention_forward<T: Scalar>(
    q: &[T],
    geo: &AttentionShape<T>,
    table: Option<(&Tensor<T>, &[u32])>,
    mask: Option<&Tensor<T>>,
) -> (Vec<T>, Vec<T>) {
    let AttentionShape {
        bsz,
        t,
        c,
        heads,
        num_windows,
        scale,
    } = *geo;
    let c3 = 3 * c;
    let dh = c / heads;
    let tt = t * t;
    let mut attn = vec![T::zero(); bsz * heads * tt];
    let mut out = vec![T::zero(); bsz * t * c];
    for b in 0..bsz {
        let wi = b % num_windows;
        for hd in 0..heads {
            let a = &mut attn[(b * heads + hd) * tt..(b * heads + hd + 1) * tt];
            let qo = b * t * c3 + hd * dh;
            let ko = qo + c;
            let vo = qo + 2 * c;
            // logits = scale * q k^T
            T::gemm(
                t, dh, t, scale, &q[qo..], c3 as isize, 1, &q[ko..], 1, c3 as isize, T::zero(), a,
                t as isize, 1,
            );
            if let Some((tv, idx)) = table {
                for (v, &ri) in a.iter_mut().zip(idx) {
                    *v = *v + tv.data()[ri as usize * heads + hd];
                }
            }
            if let Some(m) = mask {
                for (v, &mv) in a.iter_mut().zip(&m.data()[wi * tt..(wi + 1) * tt]) {
                    *v = *v + mv;
                }
            }
            for row in a.chunks_exact_mut(t) {
                softmax_in_place(row);
            }
            T::gemm(
                t, t, dh, T::one(), a, t as isize, 1, &q[vo..], c3 as isize, 1, T::zero(),
                &mut out[b * t * c + hd * dh..], c as isize, 1,
            );
        }
    }
    (attn, out)
}

/// Attention weights `(B, heads, T, T)` for a packed qkv tensor, as used by
/// [`Graph::window_attention`].
pub fn attention_probs<T: Scalar>(
    qkv: &Tensor<T>,
    table: Option<(&Tensor<T>, &[u32])>,
    mask: Option<&Tensor<T>>,
    heads: usize,
) -> Result<Vec<T>> {
    let geo = AttentionShape::check(qkv, table, mask, heads)?;
    Ok(attention_forward(qkv.data(), &geo, table, mask).0)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

/// Zero-mean, unit-variance normalization of `groups` contiguous runs of `len`.
fn normalize_groups<T: Scalar>(x: &[T], groups: usize, len: usize) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); groups * len];
    let mut rstd = vec![T::zero(); groups];
    let inv = T::one() / T::cast_from(len as f64);
    let eps = T::cast_from(NORM_EPS);
    for gi in 0..groups {
        let row = &x[gi * len..(gi + 1) * len];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv;
        let r = T::one() / (var + eps).sqrt();
        rstd[gi] = r;
        for (o, &v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

/// `dx += rstd * (dhat - mean(dhat) - xhat * mean(dhat * xhat))`.
fn norm_backward<T: Scalar>(dhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let inv = T::one() / T::cast_from(dhat.len() as f64);
    let mut m1 = T::zero();
    let mut m2 = T::zero();
    for (&d, &h) in dhat.iter().zip(xhat) {
        m1 = m1 + d;
        m2 = m2 + d * h;
    }
    m1 = m1 * inv;
    m2 = m2 * inv;
    for ((o, &d), &h) in dx.iter_mut().zip(dhat).zip(xhat) {
        *o = *o + rstd * (d - m1 - h * m2);
    }
}

/// Unfolds `x (ci, D, H, W)` into `(ci * k^3, D * H * W)` for same-padded convolution.
fn im2col<T: Scalar>(x: &[T], ci: usize, dims: [usize; 3], k: usize, col: &mut [T]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    let p = k / 2;
    let mut row = 0;
    for c in 0..ci {
        let xc = &x[c * s..(c + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[row * s..(row + 1) * s];
                    let w_lo = p.saturating_sub(kw);
                    let w_hi = (w + p).saturating_sub(kw).min(w);
                    for z in 0..d {
                        let sz = z + kd;
                        for y in 0..h {
                            let sy = y + kh;
                            let o = (z * h + y) * w;
                            if sz < p || sz - p >= d || sy < p || sy - p >= h || w_lo >= w_hi {
                                dst[o..o + w].fill(T::zero());
                                continue;
                            }
                            let base = ((sz - p) * h + sy - p) * w;
                            dst[o..o + w_lo].fill(T::zero());
                            let src_lo = base + w_lo + kw - p;
                            dst[o + w_lo..o + w_hi].copy_from_slice(&xc[src_lo..src_lo + (w_hi - w_lo)]);
                            dst[o + w_hi..o + w].fill(T::zero());
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
fn col2im<T: Scalar>(col: &[T], ci: usize, dims: [usize; 3], k: usize, dx: &mut [T]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    let p = k / 2;
    let mut row = 0;
    for c in 0..ci {
        let dc = &mut dx[c * s..(c + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * s..(row + 1) * s];
                    let w_lo = p.saturating_sub(kw);
                    let w_hi = (w + p).saturating_sub(kw).min(w);
                    if w_lo < w_hi {
                        for z in 0..d {
                            let sz = z + kd;
                            if sz < p || sz - p >= d {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y + kh;
                                if sy < p || sy - p >= h {
                                    continue;
                                }
                                let o = (z * h + y) * w;
                                let base = ((sz - p) * h + sy - p) * w + w_lo + kw - p;
                                for (dv, &sv) in dc[base..base + (w_hi - w_lo)]
                                    .iter_mut()
                                    .zip(&src[o + w_lo..o + w_hi])
                                {
                                    *dv = *dv + sv;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
