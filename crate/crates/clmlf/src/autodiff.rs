//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node, including
//! the leaves that hold model parameters. Ops are deliberately coarse
//! (attention softmax, layer norm, conv are single nodes) so the per-op
//! backward formulas stay hand-checkable and the node count stays small.

use crate::scalar::{gelu, gelu_grad, Scalar};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng;
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

type Slots<T> = Vec<Option<ArrayD<T>>>;
type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut Slots<T>)>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T: Scalar> {
    slots: Slots<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots[v.idx].as_ref()
    }
}

/// Row-major reshape that tolerates any input memory layout.
fn reshaped<T: Scalar>(arr: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if let Ok(view) = arr.view().into_shape_with_order(IxDyn(shape)) {
        return view.to_owned();
    }
    let flat: Vec<T> = arr.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape size mismatch")
}

fn accum<T: Scalar>(slots: &mut Slots<T>, idx: usize, g: ArrayD<T>) {
    match &mut slots[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var {
            idx: nodes.len() - 1,
        }
    }

    /// Snapshot of a node's value.
    pub fn value(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes.borrow()[v.idx].value)
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    /// Input node. Gradients are accumulated for leaves like for any other
    /// node, which is how parameter gradients are read out.
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value, None)
    }

    /// Backpropagate from a scalar root. Returns gradients for every node
    /// reachable from it; unreachable nodes have `None`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut slots: Slots<T> = vec![None; nodes.len()];
        slots[root.idx] = Some(ArrayD::from_elem(
            nodes[root.idx].value.raw_dim(),
            T::one(),
        ));
        for idx in (0..=root.idx).rev() {
            if let Some(back) = &nodes[idx].back {
                if let Some(g) = slots[idx].clone() {
                    back(&g, &mut slots);
                }
            }
        }
        Grads { slots }
    }

    // ---- elementwise and broadcast arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, g.clone());
                accum(slots, b.idx, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, g.clone());
                accum(slots, b.idx, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, g * &*vb);
                accum(slots, b.idx, g * &*va);
            })),
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, g.mapv(|x| x * c));
            })),
        )
    }

    /// `x + p` where `p`'s shape is a suffix of `x`'s shape (e.g. a bias over
    /// the last axis, or positional embeddings over the last two axes).
    pub fn add_broadcast(&self, x: Var, p: Var) -> Var {
        let (vx, vp) = (self.value(x), self.value(p));
        let (xs, ps) = (vx.shape().to_vec(), vp.shape().to_vec());
        assert!(
            ps.len() <= xs.len() && xs[xs.len() - ps.len()..] == ps[..],
            "add_broadcast: {ps:?} is not a suffix of {xs:?}"
        );
        let lead = xs.len() - ps.len();
        let out = &*vx + &*vp;
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, x.idx, g.clone());
                let mut gp = g.clone();
                for _ in 0..lead {
                    gp = gp.sum_axis(Axis(0));
                }
                accum(slots, p.idx, gp);
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let ma = va.view().into_dimensionality::<Ix2>().unwrap();
        let mb = vb.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(ma.ncols(), mb.nrows(), "matmul inner dim mismatch");
        let out = ma.dot(&mb).into_dyn();
        let (va2, vb2) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let ma = va2.view().into_dimensionality::<Ix2>().unwrap();
                let mb = vb2.view().into_dimensionality::<Ix2>().unwrap();
                accum(slots, a.idx, gm.dot(&mb.t()).into_dyn());
                accum(slots, b.idx, ma.t().dot(&gm).into_dyn());
            })),
        )
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a @ b^T`: `[B,m,k] x [B,n,k] -> [B,m,n]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&self, a: Var, b: Var, transpose_b: bool) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
        let (bs, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        let n = if transpose_b { b3.shape()[1] } else { b3.shape()[2] };
        assert_eq!(bs, b3.shape()[0], "bmm batch mismatch");
        assert_eq!(
            k,
            if transpose_b { b3.shape()[2] } else { b3.shape()[1] },
            "bmm inner dim mismatch"
        );
        let mut out = ndarray::Array3::<T>::zeros((bs, m, n));
        for i in 0..bs {
            let ai = a3.index_axis(Axis(0), i);
            let bi = b3.index_axis(Axis(0), i);
            let prod = if transpose_b {
                ai.dot(&bi.t())
            } else {
                ai.dot(&bi)
            };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let (va2, vb2) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = va2.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = vb2.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<T>::zeros(a3.dim());
                let mut gb = ndarray::Array3::<T>::zeros(b3.dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    if transpose_b {
                        // out = a b^T: ga = g b; gb = g^T a
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                        gb.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                    } else {
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                        gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                }
                accum(slots, a.idx, ga.into_dyn());
                accum(slots, b.idx, gb.into_dyn());
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let orig = va.shape().to_vec();
        let out = reshaped(&va, shape);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, reshaped(g, &orig));
            })),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.value(a);
        let axes_vec = axes.to_vec();
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_vec.len()];
        for (i, &ax) in axes_vec.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let gr = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                accum(slots, a.idx, gr);
            })),
        )
    }

    /// Concatenate `[S,na,d]` and `[S,nb,d]` along the token axis.
    pub fn concat_tokens(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let na = va.shape()[1];
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(na..)).to_owned();
                accum(slots, a.idx, ga);
                accum(slots, b.idx, gb);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum());
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let gs = g.iter().next().copied().unwrap();
                accum(slots, a.idx, ArrayD::from_elem(shape.clone(), gs));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    // ---- nonlinearities ----

    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(gelu);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let dx = va.mapv(gelu_grad) * g;
                accum(slots, a.idx, dx);
            })),
        )
    }

    /// Inverted dropout. `rate == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let va = self.value(a);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask = va.mapv(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let out = &*va * &mask;
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(slots, a.idx, g * &mask);
            })),
        )
    }

    // ---- normalization ----

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let d = *vx.shape().last().unwrap();
        assert_eq!(vg.len(), d, "layer_norm gain width mismatch");
        let rows = vx.len() / d;
        let x2 = vx
            .view()
            .into_shape_with_order((rows, d))
            .unwrap()
            .to_owned();
        let epst = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut inv_std = Array1::<T>::zeros(rows);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() * inv_d;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let istd = T::one() / (var + epst).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                xhat[[r, c]] = (row[c] - mean) * istd;
            }
        }
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let vb = self.value(beta);
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out2 = Array2::<T>::zeros((rows, d));
        for r in 0..rows {
            for c in 0..d {
                out2[[r, c]] = xhat[[r, c]] * g1[c] + b1[c];
            }
        }
        let out = out2.into_shape_with_order(vx.raw_dim()).unwrap();
        let shape = vx.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dgamma = Array1::<T>::zeros(d);
                let mut dbeta = Array1::<T>::zeros(d);
                let mut dx = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    // dxhat = g * gamma; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut dxhat = Array1::<T>::zeros(d);
                    for c in 0..d {
                        dgamma[c] += g2[[r, c]] * xhat[[r, c]];
                        dbeta[c] += g2[[r, c]];
                        dxhat[c] = g2[[r, c]] * g1[c];
                    }
                    let m1 = dxhat.sum() * inv_d;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.row(r))
                        .fold(T::zero(), |acc, (&dh, &h)| acc + dh * h)
                        * inv_d;
                    for c in 0..d {
                        dx[[r, c]] = inv_std[r] * (dxhat[c] - m1 - xhat[[r, c]] * m2);
                    }
                }
                accum(slots, x.idx, dx.into_shape_with_order(shape.clone()).unwrap().into_dyn());
                accum(slots, gamma.idx, dgamma.into_dyn());
                accum(slots, beta.idx, dbeta.into_dyn());
            })),
        )
    }

    // ---- softmax ----

    /// Softmax over the last axis with an optional key mask of shape
    /// `[batch, n]` (1 keeps, 0 removes). The first axis of `logits` is the
    /// batch axis; masked positions come out exactly zero.
    pub fn softmax_masked(&self, logits: Var, mask: Option<&Array2<u8>>) -> Var {
        let vl = self.value(logits);
        let shape = vl.shape().to_vec();
        let n = *shape.last().unwrap();
        let batch = shape[0];
        if let Some(m) = mask {
            assert_eq!(m.shape(), [batch, n], "mask shape mismatch");
        }
        let rows = vl.len() / n;
        let rows_per_batch = rows / batch;
        let l2 = vl.view().into_shape_with_order((rows, n)).unwrap();
        let mut probs = Array2::<T>::zeros((rows, n));
        for r in 0..rows {
            let b = r / rows_per_batch;
            let row = l2.row(r);
            let live = |c: usize| mask.map_or(true, |m| m[[b, c]] != 0);
            let mut maxv = T::neg_infinity();
            for c in 0..n {
                if live(c) && row[c] > maxv {
                    maxv = row[c];
                }
            }
            debug_assert!(maxv > T::neg_infinity(), "softmax row fully masked");
            let mut denom = T::zero();
            for c in 0..n {
                if live(c) {
                    let e = (row[c] - maxv).exp();
                    probs[[r, c]] = e;
                    denom += e;
                }
            }
            for c in 0..n {
                probs[[r, c]] = probs[[r, c]] / denom;
            }
        }
        let out = probs
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .unwrap();
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let g2 = g.view().into_shape_with_order((rows, n)).unwrap();
                let mut dl = Array2::<T>::zeros((rows, n));
                for r in 0..rows {
                    let y = probs.row(r);
                    let gr = g2.row(r);
                    let dot = y
                        .iter()
                        .zip(gr.iter())
                        .fold(T::zero(), |acc, (&yi, &gi)| acc + yi * gi);
                    for c in 0..n {
                        dl[[r, c]] = y[c] * (gr[c] - dot);
                    }
                }
                accum(
                    slots,
                    logits.idx,
                    dl.into_shape_with_order(IxDyn(&shape)).unwrap(),
                );
            })),
        )
    }

    // ---- lookup ----

    /// Row gather from an embedding table `[V,d]` by ids `[S,n]`.
    pub fn embedding(&self, table: Var, ids: &Array2<usize>) -> Var {
        let vt = self.value(table);
        let t2 = vt.view().into_dimensionality::<Ix2>().unwrap();
        let (v, d) = (t2.nrows(), t2.ncols());
        let (s, n) = (ids.nrows(), ids.ncols());
        let mut out = ndarray::Array3::<T>::zeros((s, n, d));
        for i in 0..s {
            for j in 0..n {
                let id = ids[[i, j]];
                assert!(id < v, "token id {id} out of range (vocab {v})");
                out.slice_mut(ndarray::s![i, j, ..]).assign(&t2.row(id));
            }
        }
        let ids = ids.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dt = Array2::<T>::zeros((v, d));
                for i in 0..s {
                    for j in 0..n {
                        let mut row = dt.row_mut(ids[[i, j]]);
                        row += &g3.slice(ndarray::s![i, j, ..]);
                    }
                }
                accum(slots, table.idx, dt.into_dyn());
            })),
        )
    }

    // ---- convolution ----

    /// 3x3 convolution, stride 2, zero padding 1:
    /// `[S,Cin,H,W] -> [S,Cout,H/2,W/2]`.
    pub fn conv3x3_s2(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        let (s, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv channel mismatch");
        assert_eq!(k, 3, "conv kernel must be 3x3");
        assert!(h % 2 == 0 && wd % 2 == 0, "conv input must be even-sized");
        let (ho, wo) = (h / 2, wd / 2);
        let patch = cin * 9;
        // w as [patch, cout] for the im2col product
        let wmat = vw
            .view()
            .into_shape_with_order((cout, patch))
            .unwrap()
            .t()
            .as_standard_layout()
            .to_owned();
        let x4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut cols_all = ndarray::Array3::<T>::zeros((s, ho * wo, patch));
        for si in 0..s {
            let xi = x4.index_axis(Axis(0), si);
            let mut cols = cols_all.index_axis_mut(Axis(0), si);
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = oy * wo + ox;
                    let mut col = 0;
                    for c in 0..cin {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    cols[[row, col]] = xi[[c, iy as usize, ix as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = ndarray::Array4::<T>::zeros((s, cout, ho, wo));
        for si in 0..s {
            let prod = cols_all.index_axis(Axis(0), si).dot(&wmat); // [ho*wo, cout]
            for oc in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[si, oc, oy, ox]] = prod[[oy * wo + ox, oc]] + b1[oc];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut dx = ndarray::Array4::<T>::zeros((s, cin, h, wd));
                let mut dwmat = Array2::<T>::zeros((patch, cout));
                let mut db = Array1::<T>::zeros(cout);
                for si in 0..s {
                    // g for this item as [ho*wo, cout]
                    let mut gmat = Array2::<T>::zeros((ho * wo, cout));
                    for oc in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = g4[[si, oc, oy, ox]];
                                gmat[[oy * wo + ox, oc]] = v;
                                db[oc] += v;
                            }
                        }
                    }
                    let cols = cols_all.index_axis(Axis(0), si);
                    dwmat += &cols.t().dot(&gmat);
                    let dcols = gmat.dot(&wmat.t()); // [ho*wo, patch]
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = oy * wo + ox;
                            let mut col = 0;
                            for c in 0..cin {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iy = (2 * oy + ky) as isize - 1;
                                        let ix = (2 * ox + kx) as isize - 1;
                                        if iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < wd as isize
                                        {
                                            dx[[si, c, iy as usize, ix as usize]] +=
                                                dcols[[row, col]];
                                        }
                                        col += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                let dw = dwmat
                    .t()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[cout, cin, 3, 3]))
                    .unwrap();
                accum(slots, x.idx, dx.into_dyn());
                accum(slots, w.idx, dw);
                accum(slots, b.idx, db.into_dyn());
            })),
        )
    }

    // ---- fused heads ----

    /// `sum_i q[s,i] * f[s,i,:]` -> `[S,d]`.
    pub fn weighted_sum(&self, f: Var, q: Var) -> Var {
        let vf = self.value(f);
        let vq = self.value(q);
        let f3 = vf.view().into_dimensionality::<Ix3>().unwrap();
        let q2 = vq.view().into_dimensionality::<Ix2>().unwrap();
        let (s, n, d) = (f3.shape()[0], f3.shape()[1], f3.shape()[2]);
        assert_eq!(q2.shape(), [s, n], "weighted_sum shape mismatch");
        let mut out = Array2::<T>::zeros((s, d));
        for i in 0..s {
            for j in 0..n {
                let w = q2[[i, j]];
                for c in 0..d {
                    out[[i, c]] += w * f3[[i, j, c]];
                }
            }
        }
        let (vf2, vq2) = (Rc::clone(&vf), Rc::clone(&vq));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let f3 = vf2.view().into_dimensionality::<Ix3>().unwrap();
                let q2 = vq2.view().into_dimensionality::<Ix2>().unwrap();
                let mut df = ndarray::Array3::<T>::zeros((s, n, d));
                let mut dq = Array2::<T>::zeros((s, n));
                for i in 0..s {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for c in 0..d {
                            df[[i, j, c]] = q2[[i, j]] * g2[[i, c]];
                            acc += g2[[i, c]] * f3[[i, j, c]];
                        }
                        dq[[i, j]] = acc;
                    }
                }
                accum(slots, f.idx, df.into_dyn());
                accum(slots, q.idx, dq.into_dyn());
            })),
        )
    }

    /// Mean cross-entropy over rows of `logits` `[S,K]` against integer
    /// targets, with a numerically stable log-softmax.
    pub fn cross_entropy_mean(&self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let l2 = vl.view().into_dimensionality::<Ix2>().unwrap();
        let (s, k) = (l2.nrows(), l2.ncols());
        assert_eq!(targets.len(), s, "target count mismatch");
        let mut probs = Array2::<T>::zeros((s, k));
        let mut loss = T::zero();
        for i in 0..s {
            assert!(targets[i] < k, "target {} out of range", targets[i]);
            let row = l2.row(i);
            let maxv = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut denom = T::zero();
            for c in 0..k {
                let e = (row[c] - maxv).exp();
                probs[[i, c]] = e;
                denom += e;
            }
            for c in 0..k {
                probs[[i, c]] = probs[[i, c]] / denom;
            }
            loss += denom.ln() + maxv - row[targets[i]];
        }
        let inv_s = T::from_f64(1.0 / s as f64);
        loss = loss * inv_s;
        let targets = targets.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, slots| {
                let gs = g.iter().next().copied().unwrap();
                let mut dl = probs.clone();
                for i in 0..s {
                    dl[[i, targets[i]]] -= T::one();
                }
                dl.mapv_inplace(|x| x * gs * inv_s);
                accum(slots, logits.idx, dl.into_dyn());
            })),
        )
    }

    /// Supervised contrastive loss over a similarity matrix `[S,S]`:
    /// for each anchor with at least one same-label partner, the negated
    /// mean log-softmax mass on its partners; anchors are then averaged.
    /// With `include_self` the softmax denominator ranges over all entries
    /// and the anchor itself counts as a positive; otherwise the diagonal
    /// is excluded from both. Returns the loss and the positive-pair count.
    pub fn supcon_from_sim(&self, sim: Var, labels: &[usize], include_self: bool) -> (Var, usize) {
        let vs = self.value(sim);
        let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
        let s = labels.len();
        assert_eq!(s2.shape(), [s, s], "similarity matrix shape mismatch");
        let positives: Vec<Vec<usize>> = (0..s)
            .map(|i| {
                (0..s)
                    .filter(|&j| labels[j] == labels[i] && (include_self || j != i))
                    .collect()
            })
            .collect();
        let anchors: Vec<usize> = (0..s).filter(|&i| !positives[i].is_empty()).collect();
        let n_pos: usize = positives.iter().map(Vec::len).sum();
        if anchors.is_empty() {
            return (self.leaf(ArrayD::zeros(IxDyn(&[]))), 0);
        }
        // Row softmax over the denominator set, reused by the backward pass.
        let mut sigma = Array2::<T>::zeros((s, s));
        for i in 0..s {
            let denom_set: Vec<usize> = (0..s).filter(|&j| include_self || j != i).collect();
            let maxv = denom_set
                .iter()
                .map(|&j| s2[[i, j]])
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut denom = T::zero();
            for &j in &denom_set {
                let e = (s2[[i, j]] - maxv).exp();
                sigma[[i, j]] = e;
                denom += e;
            }
            for &j in &denom_set {
                sigma[[i, j]] = sigma[[i, j]] / denom;
            }
        }
        let mut loss = T::zero();
        for &i in &anchors {
            let mut term = T::zero();
            for &p in &positives[i] {
                term += sigma[[i, p]].ln();
            }
            loss -= term / T::from_f64(positives[i].len() as f64);
        }
        let inv_anchors = T::from_f64(1.0 / anchors.len() as f64);
        loss = loss * inv_anchors;
        let var = self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, slots| {
                let gs = g.iter().next().copied().unwrap();
                let mut dl = Array2::<T>::zeros((s, s));
                for &i in &anchors {
                    let inv_p = T::from_f64(1.0 / positives[i].len() as f64);
                    for j in 0..s {
                        if !include_self && j == i {
                            continue;
                        }
                        // d/ds_ij of (-1/|P| sum_p [s_ip - lse_i]):
                        // -1[j in P]/|P| + sigma_ij
                        let mut d = sigma[[i, j]];
                        if positives[i].contains(&j) {
                            d = d - inv_p;
                        }
                        dl[[i, j]] = gs * inv_anchors * d;
                    }
                }
                accum(slots, sim.idx, dl.into_dyn());
            })),
        );
        (var, n_pos)
    }

    /// Rows scaled to unit L2 norm, `[S,d]`.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let (s, d) = (x2.nrows(), x2.ncols());
        let floor = T::from_f64(1e-12);
        let mut norms = Array1::<T>::zeros(s);
        let mut y = Array2::<T>::zeros((s, d));
        for i in 0..s {
            let row = x2.row(i);
            let n = row.dot(&row).sqrt();
            let n = if n > floor { n } else { floor };
            norms[i] = n;
            for c in 0..d {
                y[[i, c]] = row[c] / n;
            }
        }
        let y2 = y.clone();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros((s, d));
                for i in 0..s {
                    let yr = y2.row(i);
                    let gr = g2.row(i);
                    let dot = gr.dot(&yr);
                    for c in 0..d {
                        dx[[i, c]] = (gr[c] - yr[c] * dot) / norms[i];
                    }
                }
                accum(slots, x.idx, dx.into_dyn());
            })),
        )
    }
}
