//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse and applies each operation's adjoint. Nodes that
//! do not depend on a parameter (`needs_grad == false`) are skipped.

pub mod kernels;

use kernels::ConvGeom;

use crate::tensor::{gemm, Element, MatView, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Ln(Var),
    XLogX(Var),
    SumAll(Var),
    MeanAll(Var),
    SumPerSample(Var),
    MulChannels(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    PadReflect {
        x: Var,
        top: usize,
        left: usize,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Resize(Var),
    AdaptivePool(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [b, r, c] => (*b, *r, *c),
        _ => panic!("bmm expects rank-3 operands, got {shape:?}"),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "item() on a tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        self.unary(a, move |x| s * x + c, Op::Affine(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { s * x },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    /// `x ln x` with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x * x.ln() } else { T::zero() },
            Op::XLogX(a),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::MeanAll(a), ng)
    }

    /// Sum over everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.shape()[0];
        let data: Vec<T> = (0..n).map(|i| v.sample(i).iter().copied().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(vec![n], data), Op::SumPerSample(a), ng)
    }

    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let per = v.numel() / v.shape()[0];
        let s = self.sum_per_sample(a);
        self.scale(s, 1.0 / per as f64)
    }

    /// `x: [N, C, H, W]` times a single-channel map `g: [N, 1, H, W]` broadcast over C.
    pub fn mul_channels(&mut self, x: Var, g: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(g), &[n, 1, h, w], "mul_channels gate shape");
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let hw = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            let gs = &gv[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = xv[base + p] * gs[p];
                }
            }
        }
        let ng = self.ng(x) || self.ng(g);
        self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::MulChannels(x, g),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape preserves element count");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Zero-padded 2-D convolution with square kernel `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d input channels");
        assert_eq!(k, k2, "conv2d kernel must be square");
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    pub fn pad_reflect(
        &mut self,
        x: Var,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h + top + bottom, w + left + right);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let cols: Vec<usize> = (0..wo)
            .map(|j| kernels::reflect_index(j as isize - left as isize, w))
            .collect();
        for plane in src.chunks(h * w) {
            for i in 0..ho {
                let si = kernels::reflect_index(i as isize - top as isize, h);
                let row = &plane[si * w..(si + 1) * w];
                out.extend(cols.iter().map(|&j| row[j]));
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::PadReflect { x, top, left },
            ng,
        )
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (n, c, hi, wi) = self.value(x).dims4();
        assert!(top + h <= hi && left + w <= wi, "crop window out of bounds");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in src.chunks(hi * wi) {
            for i in top..top + h {
                out.extend_from_slice(&plane[i * wi + left..i * wi + left + w]);
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Crop { x, top, left },
            ng,
        )
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let th = kernels::bilinear_taps(h, ho);
        let tw = kernels::bilinear_taps(w, wo);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks(h * w) {
            for &(i0, i1, ly) in &th {
                let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                for &(j0, j1, lx) in &tw {
                    let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                    let top = plane[i0 * w + j0] * lx0 + plane[i0 * w + j1] * lx1;
                    let bot = plane[i1 * w + j0] * lx0 + plane[i1 * w + j1] * lx1;
                    out.push(top * ly0 + bot * ly1);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::Resize(x),
            ng,
        )
    }

    /// Adaptive average pooling to `[N, C, rh, rw]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, rh: usize, rw: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(rh >= 1 && rw >= 1 && rh <= h && rw <= w, "pool size out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * rh * rw);
        for plane in src.chunks(h * w) {
            for oi in 0..rh {
                let (i0, i1) = kernels::adaptive_bin(oi, h, rh);
                for oj in 0..rw {
                    let (j0, j1) = kernels::adaptive_bin(oj, w, rw);
                    let mut acc = T::zero();
                    for i in i0..i1 {
                        for j in j0..j1 {
                            acc = acc + plane[i * w + j];
                        }
                    }
                    out.push(acc / T::of(((i1 - i0) * (j1 - j0)) as f64));
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, rh, rw], out),
            Op::AdaptivePool(x),
            ng,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(self.value(a).sample(s));
            out.extend_from_slice(self.value(b).sample(s));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![n, ca + cb, h, w], out),
            Op::ConcatChannels(a, b),
            ng,
        )
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_batch(&tensors).expect("concat_batch shapes agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatBatch(parts.to_vec()), ng)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        assert!(start + len <= n, "slice_batch out of range");
        let per = v.numel() / n;
        let data = v.data()[start * per..(start + len) * per].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(shape, data),
            Op::SliceBatch { x, start },
            ng,
        )
    }

    /// Batched matrix product `op(a) · op(b)` on `[B, rows, cols]` operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = rows_of(self.shape(a));
        let (bb, rb, cb) = rows_of(self.shape(b));
        assert_eq!(ba, bb, "bmm batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, nn) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = vec![T::zero(); ba * m * nn];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for s in 0..ba {
            let mut va = MatView::row_major(s * ra * ca, ra, ca);
            if ta {
                va = va.t();
            }
            let mut vb = MatView::row_major(s * rb * cb, rb, cb);
            if tb {
                vb = vb.t();
            }
            gemm(
                T::one(),
                av,
                va,
                bv,
                vb,
                T::zero(),
                &mut out,
                MatView::row_major(s * m * nn, m, nn),
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![ba, m, nn], out),
            Op::Bmm { a, b, ta, tb },
            ng,
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("softmax on rank-0");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxLast(x), ng)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: impl FnOnce() -> Tensor<T>) {
        if self.ng(v) {
            accumulate(&mut grads[v.0], g());
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, a, || g.clone());
                self.send(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, a, || g.clone());
                self.send(grads, b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.send(grads, a, || g.zip_map(self.value(b), |x, y| x * y));
                self.send(grads, b, || g.zip_map(self.value(a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                self.send(grads, a, || g.zip_map(bv, |x, y| x / y));
                self.send(grads, b, || {
                    let t = g.zip_map(out, |x, q| x * q);
                    t.zip_map(bv, |x, y| -x / y)
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let mask_a = av.zip_map(bv, |x, y| if x >= y { T::one() } else { T::zero() });
                self.send(grads, a, || g.zip_map(&mask_a, |x, m| x * m));
                self.send(grads, b, || g.zip_map(&mask_a, |x, m| x * (T::one() - m)));
            }
            Op::Affine(a, s) => self.send(grads, a, || g.map(|x| x * s)),
            Op::Sigmoid(a) => {
                self.send(grads, a, || g.zip_map(out, |x, y| x * y * (T::one() - y)))
            }
            Op::LeakyRelu(a, s) => self.send(grads, a, || {
                g.zip_map(self.value(a), |x, v| if v > T::zero() { x } else { x * s })
            }),
            Op::Abs(a) => self.send(grads, a, || {
                g.zip_map(self.value(a), |x, v| {
                    if v > T::zero() {
                        x
                    } else if v < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                })
            }),
            Op::Ln(a) => self.send(grads, a, || g.zip_map(self.value(a), |x, v| x / v)),
            Op::XLogX(a) => self.send(grads, a, || {
                g.zip_map(self.value(a), |x, v| {
                    let v = v.max(T::min_positive_value());
                    x * (v.ln() + T::one())
                })
            }),
            Op::SumAll(a) => {
                let s = g.data()[0];
                self.send(grads, a, || Tensor::full(self.shape(a).to_vec(), s))
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel();
                let s = g.data()[0] / T::of(n as f64);
                self.send(grads, a, || Tensor::full(self.shape(a).to_vec(), s))
            }
            Op::SumPerSample(a) => self.send(grads, a, || {
                let shape = self.shape(a).to_vec();
                let per = shape.iter().skip(1).product::<usize>();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, per))
                    .collect();
                Tensor::from_parts(shape, data)
            }),
            Op::MulChannels(x, gate) => {
                let (n, c, h, w) = self.value(x).dims4();
                let hw = h * w;
                let xv = self.value(x).data();
                let gv = self.value(gate).data();
                let gd = g.data();
                self.send(grads, x, || {
                    let mut d = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                d[base + p] = gd[base + p] * gv[s * hw + p];
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, c, h, w], d)
                });
                self.send(grads, gate, || {
                    let mut d = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                d[s * hw + p] = d[s * hw + p] + gd[base + p] * xv[base + p];
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, 1, h, w], d)
                });
            }
            Op::Reshape(a) => self.send(grads, a, || {
                g.clone()
                    .reshape(self.shape(a).to_vec())
                    .expect("reshape adjoint")
            }),
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(x)[0];
                let cout = self.shape(w)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(x).data(),
                    n,
                    &geom,
                    self.value(w).data(),
                    cout,
                    g.data(),
                    self.ng(x),
                    self.ng(w),
                );
                if let Some(dx) = dx {
                    self.send(grads, x, || Tensor::from_parts(self.shape(x).to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.send(grads, w, || Tensor::from_parts(self.shape(w).to_vec(), dw));
                }
                if let Some(b) = b {
                    self.send(grads, b, || Tensor::from_parts(vec![cout], db));
                }
            }
            Op::PadReflect { x, top, left } => self.send(grads, x, || {
                let (n, c, h, w) = self.value(x).dims4();
                let (_, _, ho, wo) = out.dims4();
                let mut d = vec![T::zero(); n * c * h * w];
                let cols: Vec<usize> = (0..wo)
                    .map(|j| kernels::reflect_index(j as isize - left as isize, w))
                    .collect();
                for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                    let plane = &mut d[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        let si = kernels::reflect_index(i as isize - top as isize, h);
                        for (j, &sj) in cols.iter().enumerate() {
                            plane[si * w + sj] = plane[si * w + sj] + gp[i * wo + j];
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, h, w], d)
            }),
            Op::Crop { x, top, left } => self.send(grads, x, || {
                let (n, c, hi, wi) = self.value(x).dims4();
                let (_, _, h, w) = out.dims4();
                let mut d = vec![T::zero(); n * c * hi * wi];
                for (p, gp) in g.data().chunks(h * w).enumerate() {
                    let plane = &mut d[p * hi * wi..(p + 1) * hi * wi];
                    for i in 0..h {
                        plane[(top + i) * wi + left..(top + i) * wi + left + w]
                            .copy_from_slice(&gp[i * w..(i + 1) * w]);
                    }
                }
                Tensor::from_parts(vec![n, c, hi, wi], d)
            }),
            Op::Resize(x) => self.send(grads, x, || {
                let (n, c, h, w) = self.value(x).dims4();
                let (_, _, ho, wo) = out.dims4();
                let th = kernels::bilinear_taps(h, ho);
                let tw = kernels::bilinear_taps(w, wo);
                let mut d = vec![T::zero(); n * c * h * w];
                for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                    let plane = &mut d[p * h * w..(p + 1) * h * w];
                    for (oi, &(i0, i1, ly)) in th.iter().enumerate() {
                        let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                        for (oj, &(j0, j1, lx)) in tw.iter().enumerate() {
                            let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                            let v = gp[oi * wo + oj];
                            plane[i0 * w + j0] = plane[i0 * w + j0] + v * ly0 * lx0;
                            plane[i0 * w + j1] = plane[i0 * w + j1] + v * ly0 * lx1;
                            plane[i1 * w + j0] = plane[i1 * w + j0] + v * ly1 * lx0;
                            plane[i1 * w + j1] = plane[i1 * w + j1] + v * ly1 * lx1;
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, h, w], d)
            }),
            Op::AdaptivePool(x) => self.send(grads, x, || {
                let (n, c, h, w) = self.value(x).dims4();
                let (_, _, rh, rw) = out.dims4();
                let mut d = vec![T::zero(); n * c * h * w];
                for (p, gp) in g.data().chunks(rh * rw).enumerate() {
                    let plane = &mut d[p * h * w..(p + 1) * h * w];
                    for oi in 0..rh {
                        let (i0, i1) = kernels::adaptive_bin(oi, h, rh);
                        for oj in 0..rw {
                            let (j0, j1) = kernels::adaptive_bin(oj, w, rw);
                            let v = gp[oi * rw + oj] / T::of(((i1 - i0) * (j1 - j0)) as f64);
                            for i in i0..i1 {
                                for j in j0..j1 {
                                    plane[i * w + j] = plane[i * w + j] + v;
                                }
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, h, w], d)
            }),
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4();
                let cb = self.shape(b)[1];
                let hw = h * w;
                let per = (ca + cb) * hw;
                self.send(grads, a, || {
                    let mut d = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        d.extend_from_slice(&g.data()[s * per..s * per + ca * hw]);
                    }
                    Tensor::from_parts(vec![n, ca, h, w], d)
                });
                self.send(grads, b, || {
                    let mut d = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        d.extend_from_slice(&g.data()[s * per + ca * hw..(s + 1) * per]);
                    }
                    Tensor::from_parts(vec![n, cb, h, w], d)
                });
            }
            Op::ConcatBatch(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len: usize = shape.iter().product();
                    let start = offset;
                    self.send(grads, p, || {
                        Tensor::from_parts(shape, g.data()[start..start + len].to_vec())
                    });
                    offset += len;
                }
            }
            Op::SliceBatch { x, start } => self.send(grads, x, || {
                let shape = self.shape(x).to_vec();
                let per = shape.iter().skip(1).product::<usize>();
                let mut d = vec![T::zero(); shape.iter().product()];
                d[start * per..start * per + g.numel()].copy_from_slice(g.data());
                Tensor::from_parts(shape, d)
            }),
            Op::Bmm { a, b, ta, tb } => {
                let (bs, ra, ca) = rows_of(self.shape(a));
                let (_, rb, cb) = rows_of(self.shape(b));
                let (_, m, nn) = rows_of(out.shape());
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gd = g.data();
                self.send(grads, a, || {
                    let mut d = vec![T::zero(); bs * ra * ca];
                    for s in 0..bs {
                        let gview = MatView::row_major(s * m * nn, m, nn);
                        let mut opb = MatView::row_major(s * rb * cb, rb, cb);
                        if tb {
                            opb = opb.t();
                        }
                        let dst = MatView::row_major(s * ra * ca, ra, ca);
                        if ta {
                            // dA[K,M] = op(B)[K,N] · dC^T[N,M]
                            gemm(T::one(), bv, opb, gd, gview.t(), T::zero(), &mut d, dst);
                        } else {
                            // dA[M,K] = dC[M,N] · op(B)^T[N,K]
                            gemm(T::one(), gd, gview, bv, opb.t(), T::zero(), &mut d, dst);
                        }
                    }
                    Tensor::from_parts(vec![bs, ra, ca], d)
                });
                self.send(grads, b, || {
                    let mut d = vec![T::zero(); bs * rb * cb];
                    for s in 0..bs {
                        let gview = MatView::row_major(s * m * nn, m, nn);
                        let mut opa = MatView::row_major(s * ra * ca, ra, ca);
                        if ta {
                            opa = opa.t();
                        }
                        let dst = MatView::row_major(s * rb * cb, rb, cb);
                        if tb {
                            // dB[N,K] = dC^T[N,M] · op(A)[M,K]
                            gemm(T::one(), gd, gview.t(), av, opa, T::zero(), &mut d, dst);
                        } else {
                            // dB[K,N] = op(A)^T[K,M] · dC[M,N]
                            gemm(T::one(), av, opa.t(), gd, gview, T::zero(), &mut d, dst);
                        }
                    }
                    Tensor::from_parts(vec![bs, rb, cb], d)
                });
            }
            Op::SoftmaxLast(x) => self.send(grads, x, || {
                let d = *out.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); out.numel()];
                for ((dst, y), gy) in dx
                    .chunks_mut(d)
                    .zip(out.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dst[k] = y[k] * (gy[k] - dot);
                    }
                }
                Tensor::from_parts(out.shape().to_vec(), dx)
            }),
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
