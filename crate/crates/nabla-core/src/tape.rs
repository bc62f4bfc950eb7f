//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass in an
//! arena. Ops append a record naming their input/output slots plus
//! whatever cannot be recomputed cheaply (pool argmax indices, batch
//! normalization statistics). [`Tape::backward`] replays the records in
//! reverse, accumulating into per-slot gradient buffers, so a value
//! feeding several ops (shared recurrent weights included) receives the
//! sum of its contributions.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, ConvT2dGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one value slot on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Record<E> {
    Conv2d { x: ValueId, w: ValueId, b: Option<ValueId>, y: ValueId, geom: Conv2dGeom },
    ConvT2d { x: ValueId, w: ValueId, b: Option<ValueId>, y: ValueId, geom: ConvT2dGeom },
    MaxPool { x: ValueId, y: ValueId, argmax: Vec<u32> },
    BnTrain { x: ValueId, gamma: ValueId, beta: ValueId, y: ValueId, xhat: Vec<E>, inv_std: Vec<E> },
    BnInfer { x: ValueId, gamma: ValueId, beta: ValueId, y: ValueId, mean: Vec<E>, inv_std: Vec<E> },
    Relu { x: ValueId, y: ValueId },
    Sigmoid { x: ValueId, y: ValueId },
    Softmax { x: ValueId, y: ValueId },
    ConcatChannels { a: ValueId, b: ValueId, y: ValueId },
    Add { a: ValueId, b: ValueId, y: ValueId },
    Mul { a: ValueId, b: ValueId, y: ValueId },
    Sum { x: ValueId, y: ValueId },
    Gap { x: ValueId, y: ValueId },
    Bce { pred: ValueId, y: ValueId, target: Vec<E> },
    Cce { probs: ValueId, y: ValueId, labels: Vec<usize> },
}

/// Arena of values plus the op records of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<E> {
    pub(crate) values: Vec<Tensor<E>>,
    pub(crate) requires_grad: Vec<bool>,
    pub(crate) records: Vec<Record<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Registers an input value. Gradients are only tracked through
    /// values with `requires_grad` somewhere upstream.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> ValueId {
        self.push_value(value, requires_grad)
    }

    pub(crate) fn push_value(&mut self, value: Tensor<E>, requires_grad: bool) -> ValueId {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        ValueId(self.values.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.values[id.0]
    }

    /// Gradient of the backward root with respect to `id`, if that slot
    /// tracked gradients and was reached by the reverse sweep.
    pub fn grad(&self, id: ValueId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn wants_grad(&self, id: ValueId) -> bool {
        self.requires_grad[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn grad_buf(&mut self, id: ValueId) -> &mut Vec<E> {
        let numel = self.values[id.0].shape().numel();
        self.grads[id.0].get_or_insert_with(|| vec![E::zero(); numel])
    }

    fn take_grad(&self, id: ValueId) -> Option<Vec<E>> {
        self.grads[id.0].clone()
    }

    /// Reverse sweep from a scalar root. Populates gradient buffers for
    /// every gradient-tracking value on the path. A second sweep on the
    /// same tape is rejected: buffers would silently double-accumulate.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward", "tape already swept; build a fresh graph"));
        }
        let root_shape = self.values[root.0].shape();
        if !root_shape.is_scalar() {
            return Err(Error::NonScalarRoot { shape: root_shape.to_string() });
        }
        self.backward_done = true;
        *self.grad_buf(root) = vec![E::one()];

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            self.backward_record(rec);
        }
        self.records = records;
        Ok(())
    }

    fn backward_record(&mut self, rec: &Record<E>) {
        match rec {
            Record::Conv2d { x, w, b, y, geom } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let xv = self.values[x.0].data().to_vec();
                let wv = self.values[w.0].data().to_vec();
                let want_x = self.requires_grad[x.0];
                let want_w = self.requires_grad[w.0];
                let mut dx = if want_x { Some(self.grad_buf(*x).clone()) } else { None };
                let mut dw = if want_w { Some(self.grad_buf(*w).clone()) } else { None };
                let mut db = match b {
                    Some(b) if self.requires_grad[b.0] => Some(self.grad_buf(*b).clone()),
                    _ => None,
                };
                kernels::conv2d_bw(&xv, &wv, &dy, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    *self.grad_buf(*x) = dx;
                }
                if let Some(dw) = dw {
                    *self.grad_buf(*w) = dw;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    *self.grad_buf(*b) = db;
                }
            }
            Record::ConvT2d { x, w, b, y, geom } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let xv = self.values[x.0].data().to_vec();
                let wv = self.values[w.0].data().to_vec();
                let want_x = self.requires_grad[x.0];
                let want_w = self.requires_grad[w.0];
                let mut dx = if want_x { Some(self.grad_buf(*x).clone()) } else { None };
                let mut dw = if want_w { Some(self.grad_buf(*w).clone()) } else { None };
                let mut db = match b {
                    Some(b) if self.requires_grad[b.0] => Some(self.grad_buf(*b).clone()),
                    _ => None,
                };
                kernels::convt2d_bw(&xv, &wv, &dy, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    *self.grad_buf(*x) = dx;
                }
                if let Some(dw) = dw {
                    *self.grad_buf(*w) = dw;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    *self.grad_buf(*b) = db;
                }
            }
            Record::MaxPool { x, y, argmax } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let dx = self.grad_buf(*x);
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i as usize] = dx[i as usize] + dy[o];
                }
            }
            Record::BnTrain { x, gamma, beta, y, xhat, inv_std } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let shape = self.values[x.0].shape();
                let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
                let m = E::from_f64((n * hw) as f64);
                let gv = self.values[gamma.0].data().to_vec();

                let mut dbeta = vec![E::zero(); c];
                let mut dgamma = vec![E::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let row = (ni * c + ch) * hw;
                        let mut sb = E::zero();
                        let mut sg = E::zero();
                        for i in row..row + hw {
                            sb = sb + dy[i];
                            sg = sg + dy[i] * xhat[i];
                        }
                        dbeta[ch] = dbeta[ch] + sb;
                        dgamma[ch] = dgamma[ch] + sg;
                    }
                }
                if self.requires_grad[x.0] {
                    let mut dx = self.grad_buf(*x).clone();
                    for ni in 0..n {
                        for ch in 0..c {
                            let row = (ni * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            let mean_dy = dbeta[ch] / m;
                            let mean_dyx = dgamma[ch] / m;
                            for i in row..row + hw {
                                dx[i] = dx[i] + scale * (dy[i] - mean_dy - xhat[i] * mean_dyx);
                            }
                        }
                    }
                    *self.grad_buf(*x) = dx;
                }
                if self.requires_grad[gamma.0] {
                    let buf = self.grad_buf(*gamma);
                    for ch in 0..c {
                        buf[ch] = buf[ch] + dgamma[ch];
                    }
                }
                if self.requires_grad[beta.0] {
                    let buf = self.grad_buf(*beta);
                    for ch in 0..c {
                        buf[ch] = buf[ch] + dbeta[ch];
                    }
                }
            }
            Record::BnInfer { x, gamma, beta, y, mean, inv_std } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let shape = self.values[x.0].shape();
                let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
                let gv = self.values[gamma.0].data().to_vec();
                let xv = self.values[x.0].data().to_vec();
                if self.requires_grad[x.0] {
                    let dx = self.grad_buf(*x);
                    for ni in 0..n {
                        for ch in 0..c {
                            let row = (ni * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            for i in row..row + hw {
                                dx[i] = dx[i] + dy[i] * scale;
                            }
                        }
                    }
                }
                if self.requires_grad[gamma.0] {
                    let mut dgamma = vec![E::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let row = (ni * c + ch) * hw;
                            for i in row..row + hw {
                                dgamma[ch] = dgamma[ch] + dy[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    let buf = self.grad_buf(*gamma);
                    for ch in 0..c {
                        buf[ch] = buf[ch] + dgamma[ch];
                    }
                }
                if self.requires_grad[beta.0] {
                    let mut dbeta = vec![E::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let row = (ni * c + ch) * hw;
                            for i in row..row + hw {
                                dbeta[ch] = dbeta[ch] + dy[i];
                            }
                        }
                    }
                    let buf = self.grad_buf(*beta);
                    for ch in 0..c {
                        buf[ch] = buf[ch] + dbeta[ch];
                    }
                }
            }
            Record::Relu { x, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let yv = self.values[y.0].data().to_vec();
                let dx = self.grad_buf(*x);
                for i in 0..dy.len() {
                    if yv[i] > E::zero() {
                        dx[i] = dx[i] + dy[i];
                    }
                }
            }
            Record::Sigmoid { x, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let yv = self.values[y.0].data().to_vec();
                let dx = self.grad_buf(*x);
                for i in 0..dy.len() {
                    dx[i] = dx[i] + dy[i] * yv[i] * (E::one() - yv[i]);
                }
            }
            Record::Softmax { x, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let yv = self.values[y.0].data().to_vec();
                let shape = self.values[y.0].shape();
                let (n, c) = (shape.n(), shape.c());
                let dx = self.grad_buf(*x);
                for ni in 0..n {
                    let row = ni * c;
                    let mut dot = E::zero();
                    for i in row..row + c {
                        dot = dot + dy[i] * yv[i];
                    }
                    for i in row..row + c {
                        dx[i] = dx[i] + yv[i] * (dy[i] - dot);
                    }
                }
            }
            Record::ConcatChannels { a, b, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                let (n, hw) = (sa.n(), sa.h() * sa.w());
                let (ca, cb) = (sa.c(), sb.c());
                let cy = ca + cb;
                if self.requires_grad[a.0] {
                    let da = self.grad_buf(*a);
                    for ni in 0..n {
                        for ch in 0..ca {
                            let src = (ni * cy + ch) * hw;
                            let dst = (ni * ca + ch) * hw;
                            for k in 0..hw {
                                da[dst + k] = da[dst + k] + dy[src + k];
                            }
                        }
                    }
                }
                if self.requires_grad[b.0] {
                    let db = self.grad_buf(*b);
                    for ni in 0..n {
                        for ch in 0..cb {
                            let src = (ni * cy + ca + ch) * hw;
                            let dst = (ni * cb + ch) * hw;
                            for k in 0..hw {
                                db[dst + k] = db[dst + k] + dy[src + k];
                            }
                        }
                    }
                }
            }
            Record::Add { a, b, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                for id in [a, b] {
                    if self.requires_grad[id.0] {
                        let d = self.grad_buf(*id);
                        for i in 0..dy.len() {
                            d[i] = d[i] + dy[i];
                        }
                    }
                }
            }
            Record::Mul { a, b, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                if self.requires_grad[a.0] {
                    let da = self.grad_buf(*a);
                    for i in 0..dy.len() {
                        da[i] = da[i] + dy[i] * bv[i];
                    }
                }
                if self.requires_grad[b.0] {
                    let db = self.grad_buf(*b);
                    for i in 0..dy.len() {
                        db[i] = db[i] + dy[i] * av[i];
                    }
                }
            }
            Record::Sum { x, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let g = dy[0];
                let dx = self.grad_buf(*x);
                for v in dx.iter_mut() {
                    *v = *v + g;
                }
            }
            Record::Gap { x, y } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[x.0] {
                    return;
                }
                let shape = self.values[x.0].shape();
                let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
                let inv = E::from_f64(1.0 / hw as f64);
                let dx = self.grad_buf(*x);
                for ni in 0..n {
                    for ch in 0..c {
                        let g = dy[ni * c + ch] * inv;
                        let row = (ni * c + ch) * hw;
                        for i in row..row + hw {
                            dx[i] = dx[i] + g;
                        }
                    }
                }
            }
            Record::Bce { pred, y, target } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[pred.0] {
                    return;
                }
                let g = dy[0];
                let pv = self.values[pred.0].data().to_vec();
                let eps = E::from_f64(crate::tape::BCE_EPS);
                let inv_n = E::from_f64(1.0 / pv.len() as f64);
                let dp = self.grad_buf(*pred);
                for i in 0..pv.len() {
                    let p = pv[i];
                    // Outside the clamp band the loss is locally constant in p.
                    if p <= eps || p >= E::one() - eps {
                        continue;
                    }
                    dp[i] = dp[i] + g * inv_n * (p - target[i]) / (p * (E::one() - p));
                }
            }
            Record::Cce { probs, y, labels } => {
                let Some(dy) = self.take_grad(*y) else { return };
                if !self.requires_grad[probs.0] {
                    return;
                }
                let g = dy[0];
                let shape = self.values[probs.0].shape();
                let c = shape.c();
                let pv = self.values[probs.0].data().to_vec();
                let eps = E::from_f64(crate::tape::BCE_EPS);
                let inv_n = E::from_f64(1.0 / labels.len() as f64);
                let dp = self.grad_buf(*probs);
                for (ni, &label) in labels.iter().enumerate() {
                    let i = ni * c + label;
                    let p = pv[i];
                    if p <= eps {
                        continue;
                    }
                    dp[i] = dp[i] - g * inv_n / p;
                }
            }
        }
    }
}

/// Probability clamp applied inside the cross-entropy losses.
pub const BCE_EPS: f64 = 1e-7;
