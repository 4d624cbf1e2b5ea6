//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a define-by-run graph; [`Tape::backward`] walks it in
//! reverse and returns gradients for every recorded node. Each forward op
//! captures whatever it needs (input clones, pooling indices, splat weights)
//! in a boxed closure, so the backward pass never re-touches the tape.
//!
//! The op set is exactly what the pipeline uses: dense/conv layers, pooling,
//! bilinear resampling, perspective warps, soft color histograms and the
//! weighted point-splat scatter. Everything is f64 and single-threaded, which
//! keeps results bit-reproducible for a fixed seed.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of a backward pass; gradients are indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Record an input; gradients w.r.t. leaves are available after backward.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Alias for [`Tape::leaf`]; used for values we never differentiate.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.add(&vb);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.sub(&vb);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.mul(&vb);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.mul(&vb), g.mul(&va)])),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.scale(c)])),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, vec![a.0], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise multiply by a `[1]` scalar variable.
    pub fn scale_var(&self, a: Var, s: Var) -> Var {
        let va = self.value(a);
        let vs = self.item(s);
        let out = va.scale(vs);
        self.push(
            out,
            vec![a.0, s.0],
            Some(Box::new(move |g| {
                vec![g.scale(vs), Tensor::scalar(g.mul(&va).sum())]
            })),
        )
    }

    pub fn recip(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|v| 1.0 / v);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&va, |gi, x| -gi / (x * x))]
            })),
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&saved, |gi, s| {
                    if s > 0.0 {
                        0.5 * gi / s
                    } else {
                        0.0
                    }
                })]
            })),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(f64::abs);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&va, |gi, x| gi * x.signum())]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|v| v.max(0.0));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&va, |gi, x| if x > 0.0 { gi } else { 0.0 })]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&saved, |gi, s| gi * s * (1.0 - s))]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![Tensor::full(&shape, g.item())])),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// L2 norm of a vector variable.
    pub fn norm(&self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshape(shape);
        let old_shape = self.shape(a);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.reshape(&old_shape)])),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.transpose()])),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.matmul(&vb);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.matmul(&vb.transpose()), va.transpose().matmul(g)]
            })),
        )
    }

    /// `y = x W^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let wt = self.transpose(w);
        let xw = self.matmul(x, wt);
        self.add_rowvec(xw, b)
    }

    /// Add a `[d]` row vector to every row of `[n, d]`.
    pub fn add_rowvec(&self, x: Var, r: Var) -> Var {
        let vx = self.value(x);
        let vr = self.value(r);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vr.len(), d);
        let mut out = vx.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += vr.data()[j];
            }
        }
        self.push(
            out,
            vec![x.0, r.0],
            Some(Box::new(move |g| {
                let mut gr = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gr[j] += g.data()[i * d + j];
                    }
                }
                vec![g.clone(), Tensor::new(&[d], gr)]
            })),
        )
    }

    pub fn sub_rowvec(&self, x: Var, r: Var) -> Var {
        let nr = self.neg(r);
        self.add_rowvec(x, nr)
    }

    /// Column means of `[n, d]` -> `[d]`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let out = vx.mean_rows();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        gx[i * d + j] = g.data()[j] / n as f64;
                    }
                }
                vec![Tensor::new(&[n, d], gx)]
            })),
        )
    }

    /// Column max of `[n, d]` -> `[d]`; gradient routes to the argmax row.
    pub fn max_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert!(n > 0, "max_rows on empty matrix");
        let mut arg = vec![0usize; d];
        let mut out = vx.row(0).to_vec();
        for i in 1..n {
            for j in 0..d {
                let v = vx.at2(i, j);
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(
            Tensor::new(&[d], out),
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n * d];
                for j in 0..d {
                    gx[arg[j] * d + j] = g.data()[j];
                }
                vec![Tensor::new(&[n, d], gx)]
            })),
        )
    }

    /// Repeat a `[d]` vector into `[n, d]` rows.
    pub fn broadcast_rows(&self, r: Var, n: usize) -> Var {
        let vr = self.value(r);
        let d = vr.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(vr.data());
        }
        self.push(
            Tensor::new(&[n, d], out),
            vec![r.0],
            Some(Box::new(move |g| {
                let mut gr = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gr[j] += g.data()[i * d + j];
                    }
                }
                vec![Tensor::new(&[d], gr)]
            })),
        )
    }

    /// Concatenate two `[n, *]` matrices along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (n, da) = (va.shape()[0], va.shape()[1]);
        let db = vb.shape()[1];
        assert_eq!(vb.shape()[0], n);
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        self.push(
            Tensor::new(&[n, da + db], out),
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let mut ga = vec![0.0; n * da];
                let mut gb = vec![0.0; n * db];
                for i in 0..n {
                    let row = g.row(i);
                    ga[i * da..(i + 1) * da].copy_from_slice(&row[..da]);
                    gb[i * db..(i + 1) * db].copy_from_slice(&row[da..]);
                }
                vec![Tensor::new(&[n, da], ga), Tensor::new(&[n, db], gb)]
            })),
        )
    }

    // ---- image ops (all [C, H, W]) ----

    /// 2-D convolution with zero padding.
    /// `x: [C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let (c_in, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, kc, kh, kw) = (
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
        );
        assert_eq!(c_in, kc, "conv2d channel mismatch");
        assert_eq!(vb.len(), c_out);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let bias = vb.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += vw.data()[((o * c_in + c) * kh + ky) * kw + kx]
                                    * vx.data()[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        self.push(
            Tensor::new(&[c_out, oh, ow], out),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c_in * h * wd];
                let mut gw = vec![0.0; c_out * c_in * kh * kw];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(o * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb[o] += go;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (c * h + iy as usize) * wd + ix as usize;
                                        let wi = ((o * c_in + c) * kh + ky) * kw + kx;
                                        gx[xi] += go * vw.data()[wi];
                                        gw[wi] += go * vx.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(&[c_in, h, wd], gx),
                    Tensor::new(&[c_out, c_in, kh, kw], gw),
                    Tensor::new(&[c_out], gb),
                ]
            })),
        )
    }

    /// Transposed convolution, fixed to stride 2 / 3x3 kernel / pad 1 /
    /// output padding 1, i.e. exact 2x upsampling.
    /// `x: [C, H, W]`, `w: [C, O, 3, 3]`, `b: [O]` -> `[O, 2H, 2W]`.
    pub fn conv_transpose2d_x2(&self, x: Var, w: Var, b: Var) -> Var {
        const K: usize = 3;
        const STRIDE: usize = 2;
        const PAD: usize = 1;
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let (c_in, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let c_out = vw.shape()[1];
        assert_eq!(vw.shape()[0], c_in);
        assert_eq!(vw.shape()[2], K);
        assert_eq!(vw.shape()[3], K);
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let bias = vb.data()[o];
            for v in out[o * oh * ow..(o + 1) * oh * ow].iter_mut() {
                *v = bias;
            }
        }
        for c in 0..c_in {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = vx.data()[(c * h + iy) * wd + ix];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..c_out {
                        for ky in 0..K {
                            let oy = iy * STRIDE + ky;
                            if oy < PAD || oy - PAD >= oh {
                                continue;
                            }
                            for kx in 0..K {
                                let ox = ix * STRIDE + kx;
                                if ox < PAD || ox - PAD >= ow {
                                    continue;
                                }
                                out[(o * oh + oy - PAD) * ow + (ox - PAD)] +=
                                    xv * vw.data()[((c * c_out + o) * K + ky) * K + kx];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[c_out, oh, ow], out),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c_in * h * wd];
                let mut gw = vec![0.0; c_in * c_out * K * K];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gb[o] += g.data()[(o * oh + oy) * ow + ox];
                        }
                    }
                }
                for c in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let xi = (c * h + iy) * wd + ix;
                            let xv = vx.data()[xi];
                            for o in 0..c_out {
                                for ky in 0..K {
                                    let oy = iy * STRIDE + ky;
                                    if oy < PAD || oy - PAD >= oh {
                                        continue;
                                    }
                                    for kx in 0..K {
                                        let ox = ix * STRIDE + kx;
                                        if ox < PAD || ox - PAD >= ow {
                                            continue;
                                        }
                                        let go =
                                            g.data()[(o * oh + oy - PAD) * ow + (ox - PAD)];
                                        let wi = ((c * c_out + o) * K + ky) * K + kx;
                                        gx[xi] += go * vw.data()[wi];
                                        gw[wi] += go * xv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(&[c_in, h, wd], gx),
                    Tensor::new(&[c_in, c_out, K, K], gw),
                    Tensor::new(&[c_out], gb),
                ]
            })),
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += vx.data()[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * 0.25;
                }
            }
        }
        self.push(
            Tensor::new(&[c, oh, ow], out),
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(ci * oh + oy) * ow + ox] * 0.25;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    gx[(ci * h + 2 * oy + dy) * w + 2 * ox + dx] += go;
                                }
                            }
                        }
                    }
                }
                vec![Tensor::new(&[c, h, w], gx)]
            })),
        )
    }

    /// Bilinear resize of `[C, H, W]` to `[C, oh, ow]` (half-pixel centers).
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let taps = bilinear_taps(h, w, oh, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for (oi, tap) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, ix, wt) in tap {
                    acc += wt * vx.data()[(ci * h + iy) * w + ix];
                }
                out[ci * oh * ow + oi] = acc;
            }
        }
        self.push(
            Tensor::new(&[c, oh, ow], out),
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for (oi, tap) in taps.iter().enumerate() {
                        let go = g.data()[ci * oh * ow + oi];
                        if go == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wt) in tap {
                            gx[(ci * h + iy) * w + ix] += wt * go;
                        }
                    }
                }
                vec![Tensor::new(&[c, h, w], gx)]
            })),
        )
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (ca, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let cb = vb.shape()[0];
        assert_eq!(vb.shape()[1], h);
        assert_eq!(vb.shape()[2], w);
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(va.data());
        out.extend_from_slice(vb.data());
        self.push(
            Tensor::new(&[ca + cb, h, w], out),
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let split = ca * h * w;
                vec![
                    Tensor::new(&[ca, h, w], g.data()[..split].to_vec()),
                    Tensor::new(&[cb, h, w], g.data()[split..].to_vec()),
                ]
            })),
        )
    }

    /// Spatial crop of `[C, H, W]` starting at `(y0, x0)`.
    pub fn crop(&self, x: Var, y0: usize, x0: usize, ch: usize, cw: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(y0 + ch <= h && x0 + cw <= w, "crop out of bounds");
        let mut out = vec![0.0; c * ch * cw];
        for ci in 0..c {
            for y in 0..ch {
                for xq in 0..cw {
                    out[(ci * ch + y) * cw + xq] = vx.data()[(ci * h + y0 + y) * w + x0 + xq];
                }
            }
        }
        self.push(
            Tensor::new(&[c, ch, cw], out),
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ch {
                        for xq in 0..cw {
                            gx[(ci * h + y0 + y) * w + x0 + xq] +=
                                g.data()[(ci * ch + y) * cw + xq];
                        }
                    }
                }
                vec![Tensor::new(&[c, h, w], gx)]
            })),
        )
    }

    /// Perspective warp: output pixel centers are mapped through `h_inv`
    /// (a row-major 3x3 output-to-input homography in pixel-center
    /// coordinates) and bilinearly sampled; out-of-frame samples are zero.
    pub fn warp_perspective(&self, x: Var, h_inv: [f64; 9]) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        // per-pixel taps: up to 4 (iy, ix, weight)
        let mut taps: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                let px = ox as f64 + 0.5;
                let py = oy as f64 + 0.5;
                let sw = h_inv[6] * px + h_inv[7] * py + h_inv[8];
                let mut tap = Vec::new();
                if sw.abs() > 1e-12 {
                    let su = (h_inv[0] * px + h_inv[1] * py + h_inv[2]) / sw;
                    let sv = (h_inv[3] * px + h_inv[4] * py + h_inv[5]) / sw;
                    // continuous pixel-center coords -> grid coords
                    let gx = su - 0.5;
                    let gy = sv - 0.5;
                    let x0 = gx.floor();
                    let y0 = gy.floor();
                    let fx = gx - x0;
                    let fy = gy - y0;
                    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                            let iy = y0 as i64 + dy;
                            let ix = x0 as i64 + dx;
                            let wt = wy * wx;
                            if wt != 0.0
                                && iy >= 0
                                && ix >= 0
                                && (iy as usize) < h
                                && (ix as usize) < w
                            {
                                tap.push((iy as usize, ix as usize, wt));
                            }
                        }
                    }
                }
                taps.push(tap);
            }
        }
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for (oi, tap) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, ix, wt) in tap {
                    acc += wt * vx.data()[(ci * h + iy) * w + ix];
                }
                out[ci * h * w + oi] = acc;
            }
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for (oi, tap) in taps.iter().enumerate() {
                        let go = g.data()[ci * h * w + oi];
                        if go == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wt) in tap {
                            gx[(ci * h + iy) * w + ix] += wt * go;
                        }
                    }
                }
                vec![Tensor::new(&[c, h, w], gx)]
            })),
        )
    }

    /// Soft RGB histogram with `bins` per channel (trilinear binning),
    /// normalized to unit mass. `x: [3, H, W]` -> `[bins^3]`.
    pub fn soft_histogram_rgb(&self, x: Var, bins: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape()[0], 3, "soft_histogram_rgb needs RGB input");
        let (h, w) = (vx.shape()[1], vx.shape()[2]);
        let npix = (h * w) as f64;
        let b = bins;
        let nb = b * b * b;
        // per channel value -> two (bin, weight, dweight/dvalue) taps
        let chan_taps = move |v: f64| -> [(usize, f64, f64); 2] {
            let t = v.clamp(0.0, 1.0) * b as f64 - 0.5;
            let i0 = t.floor();
            let frac = t - i0;
            let scale = if (0.0..=1.0).contains(&v) { b as f64 } else { 0.0 };
            let lo = (i0 as i64).clamp(0, b as i64 - 1) as usize;
            let hi = (i0 as i64 + 1).clamp(0, b as i64 - 1) as usize;
            [(lo, 1.0 - frac, -scale), (hi, frac, scale)]
        };
        let mut hist = vec![0.0; nb];
        for p in 0..h * w {
            let r = vx.data()[p];
            let g = vx.data()[h * w + p];
            let bl = vx.data()[2 * h * w + p];
            for (ir, wr, _) in chan_taps(r) {
                for (ig, wg, _) in chan_taps(g) {
                    for (ib, wb, _) in chan_taps(bl) {
                        hist[(ir * b + ig) * b + ib] += wr * wg * wb / npix;
                    }
                }
            }
        }
        let saved = vx.clone();
        self.push(
            Tensor::new(&[nb], hist),
            vec![x.0],
            Some(Box::new(move |gout| {
                let mut gx = vec![0.0; 3 * h * w];
                for p in 0..h * w {
                    let r = saved.data()[p];
                    let g = saved.data()[h * w + p];
                    let bl = saved.data()[2 * h * w + p];
                    let tr = chan_taps(r);
                    let tg = chan_taps(g);
                    let tb = chan_taps(bl);
                    for (ir, wr, dr) in tr {
                        for (ig, wg, dg) in tg {
                            for (ib, wb, db) in tb {
                                let go = gout.data()[(ir * b + ig) * b + ib] / npix;
                                if go == 0.0 {
                                    continue;
                                }
                                gx[p] += go * dr * wg * wb;
                                gx[h * w + p] += go * wr * dg * wb;
                                gx[2 * h * w + p] += go * wr * wg * db;
                            }
                        }
                    }
                }
                vec![Tensor::new(&[3, h, w], gx)]
            })),
        )
    }

    /// Scatter point features into an image grid with fixed weights:
    /// `out[d, pixel] = sum_i weight_i * features[point_i, d]`.
    /// The weight table is pure geometry and carries no gradient.
    pub fn scatter_weighted(
        &self,
        features: Var,
        entries: Rc<Vec<(usize, usize, f64)>>,
        hw: (usize, usize),
    ) -> Var {
        let vf = self.value(features);
        let (n, d) = (vf.shape()[0], vf.shape()[1]);
        let (h, w) = hw;
        let mut out = vec![0.0; d * h * w];
        for &(pix, pt, wt) in entries.iter() {
            debug_assert!(pt < n && pix < h * w);
            for c in 0..d {
                out[c * h * w + pix] += wt * vf.data()[pt * d + c];
            }
        }
        let back_entries = Rc::clone(&entries);
        self.push(
            Tensor::new(&[d, h, w], out),
            vec![features.0],
            Some(Box::new(move |g| {
                let mut gf = vec![0.0; n * d];
                for &(pix, pt, wt) in back_entries.iter() {
                    for c in 0..d {
                        gf[pt * d + c] += wt * g.data()[c * h * w + pix];
                    }
                }
                vec![Tensor::new(&[n, d], gf)]
            })),
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// reachable from the root; unreached nodes have no gradient.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Precompute bilinear sample taps for resizing `(h, w)` -> `(oh, ow)`,
/// half-pixel-center convention with edge clamping.
fn bilinear_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let gy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = gy - y0 as f64;
        for ox in 0..ow {
            let gx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = gx - x0 as f64;
            taps.push(vec![
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ]);
        }
    }
    taps
}

/// Central finite difference of `f` at `x`, one entry at a time.
/// Shared oracle for the gradient tests across the crate.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, rel: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let scale = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / scale < rel,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a0 = Tensor::rand_normal(&[3, 4], 1.0, &mut rng);
        let b0 = Tensor::rand_normal(&[4, 2], 1.0, &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let c = tape.matmul(a, b);
        let loss = tape.sum(tape.square(c));
        let grads = tape.backward(loss);

        let mut fa = |x: &Tensor| {
            let t = Tape::new();
            let a = t.leaf(x.clone());
            let b = t.leaf(b0.clone());
            t.item(t.sum(t.square(t.matmul(a, b))))
        };
        let num = central_difference(&mut fa, &a0, 1e-6);
        assert_grad_close(grads.get(a).unwrap(), &num, 1e-6);
    }

    #[test]
    fn conv2d_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::rand_normal(&[2, 6, 6], 1.0, &mut rng);
        let w0 = Tensor::rand_normal(&[3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::rand_normal(&[3], 0.1, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.conv2d(x, w, b, 2, 1);
        assert_eq!(tape.shape(y), vec![3, 3, 3]);
        let loss: Var = tape.sum(tape.square(y));
        let grads = tape.backward(loss);

        let run = |x0: &Tensor, w0: &Tensor, b0: &Tensor| {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.leaf(w0.clone());
            let b = t.leaf(b0.clone());
            t.item(t.sum(t.square(t.conv2d(x, w, b, 2, 1))))
        };
        let mut fx = |v: &Tensor| run(v, &w0, &b0);
        assert_grad_close(
            grads.get(x).unwrap(),
            &central_difference(&mut fx, &x0, 1e-6),
            1e-5,
        );
        let mut fw = |v: &Tensor| run(&x0, v, &b0);
        assert_grad_close(
            grads.get(w).unwrap(),
            &central_difference(&mut fw, &w0, 1e-6),
            1e-5,
        );
        let mut fb = |v: &Tensor| run(&x0, &w0, v);
        assert_grad_close(
            grads.get(b).unwrap(),
            &central_difference(&mut fb, &b0, 1e-6),
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::rand_normal(&[2, 4, 4], 1.0, &mut rng);
        let w0 = Tensor::rand_normal(&[2, 3, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::zeros(&[3]);

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.conv_transpose2d_x2(x, w, b);
        assert_eq!(tape.shape(y), vec![3, 8, 8]);

        let loss = tape.sum(tape.square(y));
        let grads = tape.backward(loss);
        let run = |x0: &Tensor, w0: &Tensor| {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.leaf(w0.clone());
            let b = t.leaf(Tensor::zeros(&[3]));
            t.item(t.sum(t.square(t.conv_transpose2d_x2(x, w, b))))
        };
        let mut fx = |v: &Tensor| run(v, &w0);
        assert_grad_close(
            grads.get(x).unwrap(),
            &central_difference(&mut fx, &x0, 1e-6),
            1e-5,
        );
        let mut fw = |v: &Tensor| run(&x0, v);
        assert_grad_close(
            grads.get(w).unwrap(),
            &central_difference(&mut fw, &w0, 1e-6),
            1e-5,
        );
    }

    #[test]
    fn pooling_resize_warp_histogram_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::rand_uniform(&[3, 4, 4], 0.05, 0.95, &mut rng);

        // composite: pool -> resize -> warp -> histogram -> weighted sum
        let probe = Tensor::rand_normal(&[8], 1.0, &mut rng);
        let hom = [1.0, 0.05, 0.2, -0.03, 1.0, 0.1, 0.001, 0.0, 1.0];
        let run = |x0: &Tensor| -> (Tape, Var, Var) {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let p = t.avg_pool2(x);
            let r = t.resize_bilinear(p, 5, 5);
            let wv = t.warp_perspective(r, hom);
            let hist = t.soft_histogram_rgb(wv, 2);
            let pr = t.constant(probe.clone());
            let loss = t.dot(hist, pr);
            (t, x, loss)
        };
        let (tape, x, loss) = run(&x0);
        let grads = tape.backward(loss);
        let mut f = |v: &Tensor| {
            let (t, _, l) = run(v);
            t.item(l)
        };
        let num = central_difference(&mut f, &x0, 1e-7);
        assert_grad_close(grads.get(x).unwrap(), &num, 1e-4);
    }

    #[test]
    fn max_rows_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 5.0, 4.0, 2.0, 3.0, 0.0]));
        let m = tape.max_rows(x);
        assert_eq!(tape.value(m).data(), &[4.0, 5.0]);
        let loss = tape.sum(m);
        let grads = tape.backward(loss);
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn scatter_weighted_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f0 = Tensor::rand_normal(&[5, 3], 1.0, &mut rng);
        let entries = Rc::new(vec![
            (0usize, 0usize, 0.5f64),
            (0, 1, 0.5),
            (3, 2, 1.0),
            (2, 4, 0.25),
        ]);
        let tape = Tape::new();
        let f = tape.leaf(f0.clone());
        let img = tape.scatter_weighted(f, Rc::clone(&entries), (2, 2));
        // forward check at pixel 0, channel 1
        let v = tape.value(img);
        assert!((v.at3(1, 0, 0) - (0.5 * f0.at2(0, 1) + 0.5 * f0.at2(1, 1))).abs() < 1e-12);

        let loss = tape.sum(tape.square(img));
        let grads = tape.backward(loss);
        let mut run = |x: &Tensor| {
            let t = Tape::new();
            let f = t.leaf(x.clone());
            let img = t.scatter_weighted(f, Rc::clone(&entries), (2, 2));
            t.item(t.sum(t.square(img)))
        };
        let num = central_difference(&mut run, &f0, 1e-6);
        assert_grad_close(grads.get(f).unwrap(), &num, 1e-6);
    }

    #[test]
    fn histogram_has_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::rand_uniform(&[3, 7, 5], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0);
        let h = tape.soft_histogram_rgb(x, 4);
        assert!((tape.value(h).sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x); // x^2
        let z = tape.add(y, x); // x^2 + x
        let grads = tape.backward(z);
        assert!((grads.get(x).unwrap().item() - 7.0).abs() < 1e-12);
    }
}
