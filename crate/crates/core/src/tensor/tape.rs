//! Reverse-mode autodiff tape.
//!
//! Ops execute eagerly and append a node holding the result plus a backward
//! rule. [`Tape::backward`] sweeps the nodes once in reverse order, so
//! gradients are deterministic for a fixed op sequence. A tape serves a
//! single forward/backward pass and is confined to one thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// Accumulator for parent gradients during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    wants: &'a [bool],
}

impl GradSink<'_> {
    /// Runs `f` on the gradient buffer of node `id` if that node needs a
    /// gradient, allocating zeros on first touch.
    pub fn with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants[id] {
            return;
        }
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; self.sizes[id]]);
        f(g);
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Registers an input; gradients accumulate here when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, None)
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    /// Appends a node with a hand-written backward rule. The rule receives
    /// the output gradient and accumulates into its inputs via [`GradSink`].
    pub(crate) fn custom(
        &self,
        value: Tensor,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Var<'_> {
        self.push(value, requires_grad, if requires_grad { back } else { None })
    }

    /// Runs the reverse sweep from a scalar root. Gradients are kept on the
    /// tape and read back with [`Tape::grad`].
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::invalid(
                "backward root does not depend on any differentiable input",
            ));
        }
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let wants: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for i in (0..=root.id).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(back) = nodes[i].back.as_ref() else {
                continue;
            };
            // Parents always precede their consumers, so splitting at i gives
            // disjoint views of the output gradient and the parent buffers.
            let (parents, rest) = grads.split_at_mut(i);
            let out_grad = rest[0].as_deref().unwrap();
            let mut sink = GradSink {
                grads: parents,
                sizes: &sizes[..i],
                wants: &wants[..i],
            };
            back(out_grad, &mut sink);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    /// `None` when no gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        Some(Tensor::from_vec(&shape, g.clone()).expect("gradient shape matches value"))
    }

    // ---- elementwise ----------------------------------------------------

    fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (a.value(), b.value());
        Self::check_same_shape(&av, &bv, "add")?;
        let out = Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        )?;
        let requires = a.requires_grad() || b.requires_grad();
        let (aid, bid) = (a.id, b.id);
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                sink.with(bid, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            })),
        ))
    }

    pub fn sub<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (a.value(), b.value());
        Self::check_same_shape(&av, &bv, "sub")?;
        let out = Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect(),
        )?;
        let requires = a.requires_grad() || b.requires_grad();
        let (aid, bid) = (a.id, b.id);
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                sink.with(bid, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            })),
        ))
    }

    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (a.value(), b.value());
        Self::check_same_shape(&av, &bv, "mul")?;
        let out = Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        )?;
        let requires = a.requires_grad() || b.requires_grad();
        let (aid, bid) = (a.id, b.id);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bc.data()) {
                        *d += s * y;
                    }
                });
                sink.with(bid, |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(ac.data()) {
                        *d += s * x;
                    }
                });
            })),
        ))
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, c: f64) -> Var<'t> {
        let av = a.value();
        let out = av.map(|x| x * c);
        let aid = a.id;
        self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)
                });
            })),
        )
    }

    pub fn relu<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let av = a.value();
        let out = av.map(|x| x.max(0.0));
        let aid = a.id;
        let ac = Rc::clone(&av);
        self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for ((d, s), &x) in ga.iter_mut().zip(g).zip(ac.data()) {
                        if x > 0.0 {
                            *d += s;
                        }
                    }
                });
            })),
        )
    }

    pub fn sum_all<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let av = a.value();
        let out = Tensor::scalar(av.data().iter().sum());
        let aid = a.id;
        self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                let s = g[0];
                sink.with(aid, |ga| ga.iter_mut().for_each(|d| *d += s));
            })),
        )
    }

    pub fn reshape<'t>(&'t self, a: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
        let av = a.value();
        let out = (*av).clone().reshaped(shape)?;
        let aid = a.id;
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            })),
        ))
    }

    /// Softmax over axis 0, independently per trailing position. Outputs are
    /// strictly positive and sum to 1 along the axis.
    pub fn softmax_axis0<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let av = a.value();
        if av.shape().is_empty() || av.shape()[0] == 0 {
            return Err(Error::shape("softmax_axis0 needs a non-empty leading axis"));
        }
        let c = av.shape()[0];
        let inner: usize = av.shape()[1..].iter().product();
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for j in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[ch * inner + j]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x[ch * inner + j] - m).exp();
                out[ch * inner + j] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * inner + j] /= z;
            }
        }
        let out = Tensor::from_vec(av.shape(), out)?;
        let aid = a.id;
        let yc = Rc::new(out.clone());
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                let y = yc.data();
                sink.with(aid, |ga| {
                    for j in 0..inner {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let k = ch * inner + j;
                            dot += g[k] * y[k];
                        }
                        for ch in 0..c {
                            let k = ch * inner + j;
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            })),
        ))
    }

    // ---- convolutions ---------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x`: C_in x H x W, `w`: C_out x C_in x k_h x k_w, `b`: C_out.
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t>,
        w: Var<'t>,
        b: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (xv, wv, bv) = (x.value(), w.value(), b.value());
        let [cin, h, wid]: [usize; 3] = xv
            .shape()
            .try_into()
            .map_err(|_| Error::shape(format!("conv2d input must be CxHxW, got {:?}", xv.shape())))?;
        let [cout, wcin, kh, kw]: [usize; 4] = wv.shape().try_into().map_err(|_| {
            Error::shape(format!("conv2d weights must be OxIxKhxKw, got {:?}", wv.shape()))
        })?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {cin}, weights expect {wcin}"
            )));
        }
        if bv.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must have {cout} entries, got {:?}",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{wid} with pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; cout * ho * wo];
        {
            let xd = xv.data();
            let wd = wv.data();
            let bd = bv.data();
            for oc in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[oc];
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    acc += wd[((oc * cin + ic) * kh + ky) * kw + kx]
                                        * xd[(ic * h + iy as usize) * wid + ix as usize];
                                }
                            }
                        }
                        out[(oc * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[cout, ho, wo], out)?;
        let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
        let (xid, wid_id, bid) = (x.id, w.id, b.id);
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                let xd = xc.data();
                let wd = wc.data();
                sink.with(bid, |gb| {
                    for oc in 0..cout {
                        let mut s = 0.0;
                        for i in 0..ho * wo {
                            s += g[oc * ho * wo + i];
                        }
                        gb[oc] += s;
                    }
                });
                sink.with(wid_id, |gw| {
                    for oc in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(oc * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wid as isize {
                                                continue;
                                            }
                                            gw[((oc * cin + ic) * kh + ky) * kw + kx] += go
                                                * xd[(ic * h + iy as usize) * wid + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                sink.with(xid, |gx| {
                    for oc in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(oc * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wid as isize {
                                                continue;
                                            }
                                            gx[(ic * h + iy as usize) * wid + ix as usize] += go
                                                * wd[((oc * cin + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// 3-D cross-correlation with zero padding.
    ///
    /// `x`: C_in x D x H x W, `w`: C_out x C_in x k_d x k_h x k_w, `b`: C_out.
    pub fn conv3d<'t>(
        &'t self,
        x: Var<'t>,
        w: Var<'t>,
        b: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (xv, wv, bv) = (x.value(), w.value(), b.value());
        let [cin, dep, h, wid]: [usize; 4] = xv.shape().try_into().map_err(|_| {
            Error::shape(format!("conv3d input must be CxDxHxW, got {:?}", xv.shape()))
        })?;
        let [cout, wcin, kd, kh, kw]: [usize; 5] = wv.shape().try_into().map_err(|_| {
            Error::shape(format!(
                "conv3d weights must be OxIxKdxKhxKw, got {:?}",
                wv.shape()
            ))
        })?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: input {cin}, weights expect {wcin}"
            )));
        }
        if bv.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv3d bias must have {cout} entries, got {:?}",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv3d stride must be >= 1"));
        }
        if dep + 2 * pad < kd || h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv3d kernel {kd}x{kh}x{kw} does not fit input {dep}x{h}x{wid} with pad {pad}"
            )));
        }
        let do_ = (dep + 2 * pad - kd) / stride + 1;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; cout * do_ * ho * wo];
        {
            let xd = xv.data();
            let wd = wv.data();
            let bd = bv.data();
            for oc in 0..cout {
                for od in 0..do_ {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bd[oc];
                            for ic in 0..cin {
                                for zz in 0..kd {
                                    let iz = (od * stride + zz) as isize - pad as isize;
                                    if iz < 0 || iz >= dep as isize {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wid as isize {
                                                continue;
                                            }
                                            acc += wd[(((oc * cin + ic) * kd + zz) * kh + ky) * kw
                                                + kx]
                                                * xd[((ic * dep + iz as usize) * h + iy as usize)
                                                    * wid
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                            out[((oc * do_ + od) * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[cout, do_, ho, wo], out)?;
        let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
        let (xid, wid_id, bid) = (x.id, w.id, b.id);
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                let xd = xc.data();
                let wd = wc.data();
                sink.with(bid, |gb| {
                    for oc in 0..cout {
                        let mut s = 0.0;
                        for i in 0..do_ * ho * wo {
                            s += g[oc * do_ * ho * wo + i];
                        }
                        gb[oc] += s;
                    }
                });
                // One fused loop for the weight and input gradients keeps the
                // index arithmetic in a single place.
                let mut gw_buf = vec![0.0; cout * cin * kd * kh * kw];
                let mut gx_buf = vec![0.0; cin * dep * h * wid];
                for oc in 0..cout {
                    for od in 0..do_ {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[((oc * do_ + od) * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for zz in 0..kd {
                                        let iz = (od * stride + zz) as isize - pad as isize;
                                        if iz < 0 || iz >= dep as isize {
                                            continue;
                                        }
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wid as isize {
                                                    continue;
                                                }
                                                let wi = (((oc * cin + ic) * kd + zz) * kh + ky)
                                                    * kw
                                                    + kx;
                                                let xi = ((ic * dep + iz as usize) * h
                                                    + iy as usize)
                                                    * wid
                                                    + ix as usize;
                                                gw_buf[wi] += go * xd[xi];
                                                gx_buf[xi] += go * wd[wi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                sink.with(wid_id, |gw| {
                    gw.iter_mut().zip(&gw_buf).for_each(|(d, s)| *d += s)
                });
                sink.with(xid, |gx| {
                    gx.iter_mut().zip(&gx_buf).for_each(|(d, s)| *d += s)
                });
            })),
        ))
    }

    // ---- sampling and resampling ---------------------------------------

    /// Bilinear lookup of `map` (C x H x W) at continuous pixel coordinates
    /// `coords` (M x 2, entries `(u, v)` = (column, row)), clamp-to-edge.
    ///
    /// Differentiable with respect to both the map values and the
    /// coordinates; saturated (out-of-range) coordinates get a zero
    /// coordinate gradient.
    pub fn bilinear_sample<'t>(&'t self, map: Var<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        let (mv, cv) = (map.value(), coords.value());
        let [c, h, w]: [usize; 3] = mv.shape().try_into().map_err(|_| {
            Error::shape(format!("bilinear_sample map must be CxHxW, got {:?}", mv.shape()))
        })?;
        if cv.shape().len() != 2 || cv.shape()[1] != 2 {
            return Err(Error::shape(format!(
                "bilinear_sample coords must be Mx2, got {:?}",
                cv.shape()
            )));
        }
        if cv.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bilinear_sample coordinates must be finite"));
        }
        let m = cv.shape()[0];
        let mut out = vec![0.0; c * m];
        let md = mv.data();
        let cd = cv.data();
        for i in 0..m {
            let (u, v) = (cd[2 * i], cd[2 * i + 1]);
            let s = BilinearCell::new(u, v, h, w);
            for ch in 0..c {
                out[ch * m + i] = s.value(&md[ch * h * w..(ch + 1) * h * w], w);
            }
        }
        let out = Tensor::from_vec(&[c, m], out)?;
        let requires = map.requires_grad() || coords.requires_grad();
        let (mid, cid) = (map.id, coords.id);
        let mc = Rc::clone(&mv);
        let cc = Rc::clone(&cv);
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                let md = mc.data();
                let cd = cc.data();
                sink.with(mid, |gm| {
                    for i in 0..m {
                        let s = BilinearCell::new(cd[2 * i], cd[2 * i + 1], h, w);
                        for ch in 0..c {
                            s.scatter(g[ch * m + i], &mut gm[ch * h * w..(ch + 1) * h * w], w);
                        }
                    }
                });
                sink.with(cid, |gc| {
                    for i in 0..m {
                        let s = BilinearCell::new(cd[2 * i], cd[2 * i + 1], h, w);
                        let (mut du, mut dv) = (0.0, 0.0);
                        for ch in 0..c {
                            let (gu, gv) = s.coord_grad(&md[ch * h * w..(ch + 1) * h * w], w);
                            du += g[ch * m + i] * gu;
                            dv += g[ch * m + i] * gv;
                        }
                        gc[2 * i] += du;
                        gc[2 * i + 1] += dv;
                    }
                });
            })),
        ))
    }

    /// Replicates each pixel of an H x W map into a 2x2 block.
    pub fn nearest_upsample2x<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let av = a.value();
        let [h, w]: [usize; 2] = av.shape().try_into().map_err(|_| {
            Error::shape(format!("nearest_upsample2x expects HxW, got {:?}", av.shape()))
        })?;
        let ad = av.data();
        let mut out = vec![0.0; 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[y * 2 * w + x] = ad[(y / 2) * w + x / 2];
            }
        }
        let out = Tensor::from_vec(&[2 * h, 2 * w], out)?;
        let aid = a.id;
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(y / 2) * w + x / 2] += g[y * 2 * w + x];
                        }
                    }
                });
            })),
        ))
    }

    /// Bilinear upsampling of a C x h x w map to C x H x W, half-pixel
    /// centers, clamp-to-edge.
    pub fn bilinear_upsample_to<'t>(
        &'t self,
        a: Var<'t>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var<'t>> {
        let av = a.value();
        let [c, h, w]: [usize; 3] = av.shape().try_into().map_err(|_| {
            Error::shape(format!("bilinear_upsample_to expects CxHxW, got {:?}", av.shape()))
        })?;
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let cells: Vec<BilinearCell> = (0..out_h * out_w)
            .map(|i| {
                let (oy, ox) = (i / out_w, i % out_w);
                let v = (oy as f64 + 0.5) * sy - 0.5;
                let u = (ox as f64 + 0.5) * sx - 0.5;
                BilinearCell::new(u, v, h, w)
            })
            .collect();
        let ad = av.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &ad[ch * h * w..(ch + 1) * h * w];
            for (i, cell) in cells.iter().enumerate() {
                out[ch * out_h * out_w + i] = cell.value(plane, w);
            }
        }
        let out = Tensor::from_vec(&[c, out_h, out_w], out)?;
        let aid = a.id;
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for ch in 0..c {
                        let gplane = &mut ga[ch * h * w..(ch + 1) * h * w];
                        for (i, cell) in cells.iter().enumerate() {
                            cell.scatter(g[ch * out_h * out_w + i], gplane, w);
                        }
                    }
                });
            })),
        ))
    }

    /// Concatenates two C x H x W maps along the channel axis.
    pub fn concat_channels<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (a.value(), b.value());
        let [ca, h, w]: [usize; 3] = av.shape().try_into().map_err(|_| {
            Error::shape(format!("concat_channels expects CxHxW, got {:?}", av.shape()))
        })?;
        let [cb, hb, wb]: [usize; 3] = bv.shape().try_into().map_err(|_| {
            Error::shape(format!("concat_channels expects CxHxW, got {:?}", bv.shape()))
        })?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels spatial mismatch: {h}x{w} vs {hb}x{wb}"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&[ca + cb, h, w], data)?;
        let requires = a.requires_grad() || b.requires_grad();
        let (aid, bid) = (a.id, b.id);
        let na = ca * h * w;
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    ga.iter_mut().zip(&g[..na]).for_each(|(d, s)| *d += s)
                });
                sink.with(bid, |gb| {
                    gb.iter_mut().zip(&g[na..]).for_each(|(d, s)| *d += s)
                });
            })),
        ))
    }

    /// Linear gather: `out[i] = a[index[i]]`, any shapes.
    pub fn gather<'t>(
        &'t self,
        a: Var<'t>,
        index: Rc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<Var<'t>> {
        let av = a.value();
        let expect: usize = out_shape.iter().product();
        if index.len() != expect {
            return Err(Error::shape(format!(
                "gather index length {} does not match output shape {out_shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= av.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of bounds for {} values",
                av.len()
            )));
        }
        let ad = av.data();
        let out = Tensor::from_vec(out_shape, index.iter().map(|&i| ad[i]).collect())?;
        let aid = a.id;
        let idx = Rc::clone(&index);
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for (o, &i) in idx.iter().enumerate() {
                        ga[i] += g[o];
                    }
                });
            })),
        ))
    }

    /// `out[pos] = sum_n weights[n] * a[n, pos]` over the leading axis.
    pub fn weighted_sum_axis0<'t>(&'t self, a: Var<'t>, weights: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let av = a.value();
        if av.shape().is_empty() || av.shape()[0] != weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum_axis0: leading axis {:?} vs {} weights",
                av.shape().first(),
                weights.len()
            )));
        }
        let n = weights.len();
        let inner: usize = av.shape()[1..].iter().product();
        let ad = av.data();
        let mut out = vec![0.0; inner];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &wj) in weights.iter().enumerate() {
                acc += wj * ad[j * inner + i];
            }
            *o = acc;
        }
        let out = Tensor::from_vec(&av.shape()[1..].to_vec(), out)?;
        let aid = a.id;
        let wts = Rc::clone(&weights);
        let _ = n;
        Ok(self.custom(
            out,
            a.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.with(aid, |ga| {
                    for (j, &wj) in wts.iter().enumerate() {
                        for i in 0..inner {
                            ga[j * inner + i] += wj * g[i];
                        }
                    }
                });
            })),
        ))
    }

    /// Mean absolute difference over masked entries.
    ///
    /// The subgradient at `pred == target` is zero. Errors when the mask
    /// selects nothing.
    pub fn l1_loss_masked<'t>(
        &'t self,
        pred: Var<'t>,
        target: Var<'t>,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var<'t>> {
        let (pv, tv) = (pred.value(), target.value());
        Self::check_same_shape(&pv, &tv, "l1_loss_masked")?;
        if mask.len() != pv.len() {
            return Err(Error::shape(format!(
                "mask length {} does not match {} entries",
                mask.len(),
                pv.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("l1_loss_masked: mask selects no entries"));
        }
        let mut acc = 0.0;
        for i in 0..pv.len() {
            if mask[i] {
                acc += (pv.data()[i] - tv.data()[i]).abs();
            }
        }
        let out = Tensor::scalar(acc / count as f64);
        let requires = pred.requires_grad() || target.requires_grad();
        let (pid, tid) = (pred.id, target.id);
        let (pc, tc) = (Rc::clone(&pv), Rc::clone(&tv));
        let mk = Rc::clone(&mask);
        Ok(self.custom(
            out,
            requires,
            Some(Box::new(move |g, sink| {
                let scale = g[0] / count as f64;
                let signs: Vec<f64> = pc
                    .data()
                    .iter()
                    .zip(tc.data())
                    .zip(mk.iter())
                    .map(|((p, t), &m)| if m { (p - t).signum_or_zero() } else { 0.0 })
                    .collect();
                sink.with(pid, |gp| {
                    for (d, s) in gp.iter_mut().zip(&signs) {
                        *d += scale * s;
                    }
                });
                sink.with(tid, |gt| {
                    for (d, s) in gt.iter_mut().zip(&signs) {
                        *d -= scale * s;
                    }
                });
            })),
        ))
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// One bilinear interpolation site: corner indices, weights, and whether the
/// query saturated the clamp in each axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearCell {
    x0: usize,
    y0: usize,
    a: f64,
    b: f64,
    sat_x: bool,
    sat_y: bool,
}

impl BilinearCell {
    pub(crate) fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (x0, a, sat_x) = Self::axis(u, w);
        let (y0, b, sat_y) = Self::axis(v, h);
        Self {
            x0,
            y0,
            a,
            b,
            sat_x,
            sat_y,
        }
    }

    fn axis(t: f64, n: usize) -> (usize, f64, bool) {
        let max = (n - 1) as f64;
        let sat = t < 0.0 || t > max;
        let tc = t.clamp(0.0, max);
        if n == 1 {
            return (0, 0.0, sat);
        }
        let i0 = (tc.floor() as usize).min(n - 2);
        (i0, tc - i0 as f64, sat)
    }

    pub(crate) fn value(&self, plane: &[f64], w: usize) -> f64 {
        let (x0, y0, a, b) = (self.x0, self.y0, self.a, self.b);
        let x1 = (x0 + 1).min(w - 1);
        let i = |y: usize, x: usize| plane[y * w + x];
        let y1 = y0 + if b > 0.0 || y0 + 1 < plane.len() / w { 1 } else { 0 };
        let y1 = y1.min(plane.len() / w - 1);
        (1.0 - a) * (1.0 - b) * i(y0, x0)
            + a * (1.0 - b) * i(y0, x1)
            + (1.0 - a) * b * i(y1, x0)
            + a * b * i(y1, x1)
    }

    pub(crate) fn scatter(&self, g: f64, gplane: &mut [f64], w: usize) {
        let h = gplane.len() / w;
        let (x0, y0, a, b) = (self.x0, self.y0, self.a, self.b);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        gplane[y0 * w + x0] += g * (1.0 - a) * (1.0 - b);
        gplane[y0 * w + x1] += g * a * (1.0 - b);
        gplane[y1 * w + x0] += g * (1.0 - a) * b;
        gplane[y1 * w + x1] += g * a * b;
    }

    /// `(d value / d u, d value / d v)`; zero along saturated axes.
    pub(crate) fn coord_grad(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let h = plane.len() / w;
        let (x0, y0, a, b) = (self.x0, self.y0, self.a, self.b);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let i = |y: usize, x: usize| plane[y * w + x];
        let du = if self.sat_x {
            0.0
        } else {
            (1.0 - b) * (i(y0, x1) - i(y0, x0)) + b * (i(y1, x1) - i(y1, x0))
        };
        let dv = if self.sat_y {
            0.0
        } else {
            (1.0 - a) * (i(y1, x0) - i(y0, x0)) + a * (i(y1, x1) - i(y0, x1))
        };
        (du, dv)
    }
}
