//! Graph-building ops. Each constructor validates shapes, runs the
//! forward kernel, and appends a record for the reverse sweep when any
//! input tracks gradients.
//!
//! Conventions: activations are NCHW; conv kernels are
//! `(C_out, C_in, kH, kW)`; transpose-conv kernels are
//! `(C_in, C_out, kH, kW)`; per-channel parameters (bias, batchnorm
//! gamma/beta) are `1 x C x 1 x 1`.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, ConvT2dGeom};
use crate::scalar::Scalar;
use crate::tape::{Record, Tape, BCE_EPS};
use crate::tensor::{Shape, Tensor};

/// Epsilon inside the batchnorm denominator.
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics of one batchnorm application, used by
/// the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchMoments<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Scalar> Tape<E> {
    fn any_grad(&self, ids: &[Option<crate::ValueId>]) -> bool {
        ids.iter().any(|id| id.map(|v| self.wants_grad(v)).unwrap_or(false))
    }

    /// Stride-1 2D convolution with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: crate::ValueId,
        w: crate::ValueId,
        b: Option<crate::ValueId>,
        pad: usize,
    ) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (cout, cin, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
        if xs.c() != cin {
            return Err(Error::shape("conv2d", format!("input {} vs kernel {}", xs, ws)));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.numel() != cout {
                return Err(Error::shape("conv2d", format!("bias {} for {} output channels", bs, cout)));
            }
        }
        let (h, w_) = (xs.h(), xs.w());
        if h + 2 * pad < kh || w_ + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {} does not fit input {} at padding {}", ws, xs, pad)));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, w_ + 2 * pad - kw + 1);
        let geom = Conv2dGeom { n: xs.n(), cin, cout, h, w: w_, kh, kw, stride: 1, pad, oh, ow };
        let mut y = Tensor::zeros(Shape::new(xs.n(), cout, oh, ow));
        kernels::conv2d_fw(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data().to_vec()).as_deref(),
            &geom,
            y.data_mut(),
        );
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        let yid = self.push_value(y, rg);
        if rg {
            self.records.push(Record::Conv2d { x, w, b, y: yid, geom });
        }
        Ok(yid)
    }

    /// Stride-2 transpose convolution that exactly doubles both spatial
    /// dims. Requires an even square kernel; padding is derived as
    /// `(k - 2) / 2`. Other shapes cannot double exactly and are
    /// rejected.
    pub fn conv_transpose2d(
        &mut self,
        x: crate::ValueId,
        w: crate::ValueId,
        b: Option<crate::ValueId>,
    ) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (cin, cout, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
        if xs.c() != cin {
            return Err(Error::shape("conv_transpose2d", format!("input {} vs kernel {}", xs, ws)));
        }
        if kh != kw || kh < 2 || kh % 2 != 0 {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("kernel {}x{} cannot double spatial dims exactly at stride 2", kh, kw),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.numel() != cout {
                return Err(Error::shape("conv_transpose2d", format!("bias {} for {} output channels", bs, cout)));
            }
        }
        let pad = (kh - 2) / 2;
        let (h, w_) = (xs.h(), xs.w());
        let (oh, ow) = (2 * h, 2 * w_);
        let geom = ConvT2dGeom { n: xs.n(), cin, cout, h, w: w_, kh, kw, stride: 2, pad, oh, ow };
        let mut y = Tensor::zeros(Shape::new(xs.n(), cout, oh, ow));
        kernels::convt2d_fw(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data().to_vec()).as_deref(),
            &geom,
            y.data_mut(),
        );
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        let yid = self.push_value(y, rg);
        if rg {
            self.records.push(Record::ConvT2d { x, w, b, y: yid, geom });
        }
        Ok(yid)
    }

    /// 2x2, stride-2 max pooling. Odd spatial dims are rejected rather
    /// than silently truncated.
    pub fn maxpool2d(&mut self, x: crate::ValueId) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        if xs.h() % 2 != 0 || xs.w() % 2 != 0 {
            return Err(Error::invalid("maxpool2d", format!("input {} must have even H and W", xs)));
        }
        self.maxpool(x, 2, 2, 0)
    }

    /// General max pooling; padded positions are treated as -inf. The
    /// window geometry must tile the input exactly.
    pub fn maxpool(&mut self, x: crate::ValueId, k: usize, stride: usize, pad: usize) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        if k == 0 || stride == 0 || pad >= k {
            return Err(Error::invalid("maxpool", format!("kernel {} stride {} padding {}", k, stride, pad)));
        }
        let (h, w) = (xs.h(), xs.w());
        if h + 2 * pad < k || (h + 2 * pad - k) % stride != 0 || w + 2 * pad < k || (w + 2 * pad - k) % stride != 0 {
            return Err(Error::shape(
                "maxpool",
                format!("window {}/stride {}/padding {} does not tile input {}", k, stride, pad, xs),
            ));
        }
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        let yshape = Shape::new(xs.n(), xs.c(), oh, ow);
        let mut y = Tensor::zeros(yshape);
        let mut argmax = vec![0u32; yshape.numel()];
        kernels::maxpool_fw(
            self.value(x).data(),
            xs.n(),
            xs.c(),
            h,
            w,
            k,
            k,
            stride,
            pad,
            oh,
            ow,
            y.data_mut(),
            &mut argmax,
        );
        let rg = self.wants_grad(x);
        let yid = self.push_value(y, rg);
        if rg {
            self.records.push(Record::MaxPool { x, y: yid, argmax });
        }
        Ok(yid)
    }

    /// Training-mode batch normalization: normalizes with this batch's
    /// per-channel moments and returns them so the caller can update
    /// running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: crate::ValueId,
        gamma: crate::ValueId,
        beta: crate::ValueId,
    ) -> Result<(crate::ValueId, BatchMoments<E>)> {
        let xs = self.value(x).shape();
        let c = xs.c();
        self.check_bn_params("batchnorm", gamma, beta, c)?;
        let (n, hw) = (xs.n(), xs.h() * xs.w());
        let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, hw);
        let eps = E::from_f64(BN_EPS);
        let inv_std: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![E::zero(); xv.len()];
        let mut y = vec![E::zero(); xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let row = (ni * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in row..row + hw {
                    let xh = (xv[i] - mu) * is;
                    xhat[i] = xh;
                    y[i] = g * xh + b;
                }
            }
        }
        let moments = BatchMoments { mean, var };
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        let yid = self.push_value(Tensor::new(xs, y)?, rg);
        if rg {
            self.records.push(Record::BnTrain { x, gamma, beta, y: yid, xhat, inv_std });
        }
        Ok((yid, moments))
    }

    /// Inference-mode batch normalization using previously accumulated
    /// running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: crate::ValueId,
        gamma: crate::ValueId,
        beta: crate::ValueId,
        running_mean: &[E],
        running_var: &[E],
    ) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        let c = xs.c();
        self.check_bn_params("batchnorm", gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats of {}/{} channels for input {}", running_mean.len(), running_var.len(), xs),
            ));
        }
        let eps = E::from_f64(BN_EPS);
        let inv_std: Vec<E> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (n, hw) = (xs.n(), xs.h() * xs.w());
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut y = vec![E::zero(); xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let row = (ni * c + ch) * hw;
                let (mu, is, g, b) = (running_mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in row..row + hw {
                    y[i] = g * (xv[i] - mu) * is + b;
                }
            }
        }
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        let yid = self.push_value(Tensor::new(xs, y)?, rg);
        if rg {
            self.records.push(Record::BnInfer {
                x,
                gamma,
                beta,
                y: yid,
                mean: running_mean.to_vec(),
                inv_std,
            });
        }
        Ok(yid)
    }

    fn check_bn_params(
        &self,
        op: &'static str,
        gamma: crate::ValueId,
        beta: crate::ValueId,
        c: usize,
    ) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s.numel() != c {
                return Err(Error::shape(op, format!("{} {} for {} channels", name, s, c)));
            }
        }
        Ok(())
    }

    pub fn relu(&mut self, x: crate::ValueId) -> crate::ValueId {
        let xt = self.value(x);
        let y = Tensor::new(
            xt.shape(),
            xt.data().iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.wants_grad(x);
        let yid = self.push_value(y, rg);
        if rg {
            self.records.push(Record::Relu { x, y: yid });
        }
        yid
    }

    pub fn sigmoid(&mut self, x: crate::ValueId) -> crate::ValueId {
        let xt = self.value(x);
        let y = Tensor::new(
            xt.shape(),
            xt.data().iter().map(|&v| (E::one() + (-v).exp()).recip()).collect(),
        )
        .expect("same shape");
        let rg = self.wants_grad(x);
        let yid = self.push_value(y, rg);
        if rg {
            self.records.push(Record::Sigmoid { x, y: yid });
        }
        yid
    }

    /// Channel softmax over `N x C x 1 x 1` rows, with max subtraction
    /// for stability.
    pub fn softmax(&mut self, x: crate::ValueId) -> Result<crate::ValueId> {
        let xs = self.value(x).shape();
        if xs.h() != 1 || xs.w() != 1 {
            return Err(Error::shape("softmax", format!("expected Nx Cx1x1 logits, got {}", xs)));
        }
        let (n, c) = (xs.n(), xs.c());
        let xv = self.value(x).data();
        let mut y = vec![E::zero(); xv.len()];
        for ni in 0..n {
            let row = ni * c;
            let mut mx = xv[row];
            for i in row + 1..row + c {
                if xv[i] > mx {
                    mx = xv[i];
                }
            }
            let mut denom = E::zero();
            for i in row..row + c {
                let e = (xv[i] - mx).exp();
                y[i] = e;
                denom = denom + e;
            }
            for i in row..row + c {
                y[i] = y[i] / denom;
            }
        }
        let rg = self.wants_grad(x);
        let yid = self.push_value(Tensor::new(xs, y)?, rg);
        if rg {
            self.records.push(Record::Softmax { x, y: yid });
        }
        Ok(yid)
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(&mut self, a: crate::ValueId, b: crate::ValueId) -> Result<crate::ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::shape("concat_channels", format!("{} vs {}", sa, sb)));
        }
        let (n, hw) = (sa.n(), sa.h() * sa.w());
        let (ca, cb) = (sa.c(), sb.c());
        let cy = ca + cb;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = vec![E::zero(); n * cy * hw];
        for ni in 0..n {
            for ch in 0..ca {
                let dst = (ni * cy + ch) * hw;
                let src = (ni * ca + ch) * hw;
                y[dst..dst + hw].copy_from_slice(&av[src..src + hw]);
            }
            for ch in 0..cb {
                let dst = (ni * cy + ca + ch) * hw;
                let src = (ni * cb + ch) * hw;
                y[dst..dst + hw].copy_from_slice(&bv[src..src + hw]);
            }
        }
        let rg = self.any_grad(&[Some(a), Some(b)]);
        let yid = self.push_value(Tensor::new(Shape::new(n, cy, sa.h(), sa.w()), y)?, rg);
        if rg {
            self.records.push(Record::ConcatChannels { a, b, y: yid });
        }
        Ok(yid)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: crate::ValueId, b: crate::ValueId) -> Result<crate::ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("add", format!("{} vs {}", sa, sb)));
        }
        let y: Vec<E> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &z)| x + z).collect();
        let rg = self.any_grad(&[Some(a), Some(b)]);
        let yid = self.push_value(Tensor::new(sa, y)?, rg);
        if rg {
            self.records.push(Record::Add { a, b, y: yid });
        }
        Ok(yid)
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: crate::ValueId, b: crate::ValueId) -> Result<crate::ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("mul", format!("{} vs {}", sa, sb)));
        }
        let y: Vec<E> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &z)| x * z).collect();
        let rg = self.any_grad(&[Some(a), Some(b)]);
        let yid = self.push_value(Tensor::new(sa, y)?, rg);
        if rg {
            self.records.push(Record::Mul { a, b, y: yid });
        }
        Ok(yid)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: crate::ValueId) -> crate::ValueId {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let rg = self.wants_grad(x);
        let yid = self.push_value(Tensor::scalar(acc), rg);
        if rg {
            self.records.push(Record::Sum { x, y: yid });
        }
        yid
    }

    /// Mean over the spatial axes: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, x: crate::ValueId) -> crate::ValueId {
        let xs = self.value(x).shape();
        let (n, c, hw) = (xs.n(), xs.c(), xs.h() * xs.w());
        let inv = E::from_f64(1.0 / hw as f64);
        let xv = self.value(x).data();
        let mut y = vec![E::zero(); n * c];
        for ni in 0..n {
            for ch in 0..c {
                let row = (ni * c + ch) * hw;
                let mut acc = E::zero();
                for &v in &xv[row..row + hw] {
                    acc = acc + v;
                }
                y[ni * c + ch] = acc * inv;
            }
        }
        let rg = self.wants_grad(x);
        let yid = self
            .push_value(Tensor::new(Shape::new(n, c, 1, 1), y).expect("shape checked"), rg);
        if rg {
            self.records.push(Record::Gap { x, y: yid });
        }
        yid
    }

    /// Binary cross-entropy, mean-reduced over all elements.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the logs.
    pub fn bce_loss(&mut self, pred: crate::ValueId, target: &Tensor<E>) -> Result<crate::ValueId> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::shape("bce_loss", format!("predictions {} vs targets {}", ps, target.shape())));
        }
        for &t in target.data() {
            if t != E::zero() && t != E::one() {
                return Err(Error::invalid("bce_loss", format!("target value {:?} not in {{0, 1}}", t)));
            }
        }
        let eps = E::from_f64(BCE_EPS);
        let one = E::one();
        let pv = self.value(pred).data();
        let mut acc = E::zero();
        for (&p, &t) in pv.iter().zip(target.data()) {
            if p < E::zero() || p > one {
                return Err(Error::invalid("bce_loss", format!("prediction {:?} outside [0, 1]", p)));
            }
            let pc = p.max(eps).min(one - eps);
            acc = acc - (t * pc.ln() + (one - t) * (one - pc).ln());
        }
        let loss = acc / E::from_f64(pv.len() as f64);
        let rg = self.wants_grad(pred);
        let yid = self.push_value(Tensor::scalar(loss), rg);
        if rg {
            self.records.push(Record::Bce { pred, y: yid, target: target.data().to_vec() });
        }
        Ok(yid)
    }

    /// Categorical cross-entropy over `N x K x 1 x 1` probability rows:
    /// mean over the batch of `-ln p[label]`, with the same clamp as
    /// [`Tape::bce_loss`].
    pub fn cce_loss(&mut self, probs: crate::ValueId, labels: &[usize]) -> Result<crate::ValueId> {
        let ps = self.value(probs).shape();
        if ps.h() != 1 || ps.w() != 1 {
            return Err(Error::shape("cce_loss", format!("expected Nx Kx1x1 probabilities, got {}", ps)));
        }
        if labels.len() != ps.n() {
            return Err(Error::shape("cce_loss", format!("{} labels for batch of {}", labels.len(), ps.n())));
        }
        let c = ps.c();
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::invalid("cce_loss", format!("label {} at row {} out of range [0, {})", l, i, c)));
            }
        }
        let eps = E::from_f64(BCE_EPS);
        let pv = self.value(probs).data();
        let mut acc = E::zero();
        for (ni, &l) in labels.iter().enumerate() {
            acc = acc - pv[ni * c + l].max(eps).ln();
        }
        let loss = acc / E::from_f64(labels.len() as f64);
        let rg = self.wants_grad(probs);
        let yid = self.push_value(Tensor::scalar(loss), rg);
        if rg {
            self.records.push(Record::Cce { probs, y: yid, labels: labels.to_vec() });
        }
        Ok(yid)
    }
}
