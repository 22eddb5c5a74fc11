//! Differentiable operations. Exactly the layer set the networks need:
//! dense affine, 2-d convolution and its transpose, batch normalization,
//! leaky-ReLU / tanh / sigmoid, max pooling, binary cross-entropy, and the
//! straight-through surrogate for non-differentiable embedding.

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped into `[EPS_CLIP, 1 - EPS_CLIP]` before any log.
pub const EPS_CLIP: f64 = 1e-7;

/// Batch-norm forward mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the stored running statistics; no side effects.
    Eval,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!("{what}: expected 4-d tensor, got {s:?}"))),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(pb.data().iter())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    pa.accumulate_grad(&d);
                }
                if pb.requires_grad() {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(pa.data().iter())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    pb.accumulate_grad(&d);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accumulate_grad(&d);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| p.accumulate_grad(g)),
        )
    }

    /// Affine map `x @ w + b` for `x: [N,K]`, `w: [K,M]`, `b: [M]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, k) = match self.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::Shape(format!("linear: input must be 2-d, got {s:?}"))),
        };
        let (kw, m) = match weight.shape() {
            [kw, m] => (*kw, *m),
            s => return Err(Error::Shape(format!("linear: weight must be 2-d, got {s:?}"))),
        };
        if k != kw {
            return Err(Error::Shape(format!(
                "linear: inner extents disagree ({k} vs {kw})"
            )));
        }
        if bias.shape() != [m] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, expected [{m}]",
                bias.shape()
            )));
        }
        let x = self.data();
        let w = weight.data();
        let b = bias.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = b[j];
                for p in 0..k {
                    acc += x[i * k + p] * w[p * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        drop(x);
        drop(w);
        drop(b);
        let (px, pw, pb) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g| {
                if px.requires_grad() {
                    let w = pw.data();
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * w[p * m + j];
                            }
                            dx[i * k + p] = acc;
                        }
                    }
                    drop(w);
                    px.accumulate_grad(&dx);
                }
                if pw.requires_grad() {
                    let x = px.data();
                    let mut dw = vec![0.0; k * m];
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += x[i * k + p] * g[i * m + j];
                            }
                            dw[p * m + j] = acc;
                        }
                    }
                    drop(x);
                    pw.accumulate_grad(&dw);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| p.accumulate_grad(g)),
        ))
    }

    /// Collapse all trailing dimensions: `[N, ...] -> [N, prod]`.
    pub fn flatten_rows(&self) -> Result<Tensor> {
        match self.shape() {
            [] => Err(Error::Shape("flatten_rows on 0-d tensor".into())),
            [n, rest @ ..] => {
                let cols: usize = rest.iter().product();
                self.reshape(&[*n, cols])
            }
        }
    }

    /// Cross-correlation of `input [N,C,H,W]` with `kernel [F,C,kH,kW]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "conv2d input")?;
        let (f, kc, kh, kw) = dims4(kernel, "conv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let x = self.data();
        let k = kernel.data();
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        drop(x);
        drop(k);

        let (px, pk) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            vec![n, f, oh, ow],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let need_dx = px.requires_grad();
                let need_dk = pk.requires_grad();
                let x = px.data();
                let k = pk.data();
                let mut dx = if need_dx { vec![0.0; n * c * h * w] } else { vec![] };
                let mut dk = if need_dk { vec![0.0; f * c * kh * kw] } else { vec![] };
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((ni * f + fi) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((ni * c + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let kidx = ((fi * c + ci) * kh + ky) * kw + kx;
                                            if need_dx {
                                                dx[xi] += go * k[kidx];
                                            }
                                            if need_dk {
                                                dk[kidx] += go * x[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                drop(x);
                drop(k);
                if need_dx {
                    px.accumulate_grad(&dx);
                }
                if need_dk {
                    pk.accumulate_grad(&dk);
                }
            }),
        ))
    }

    /// Transposed convolution: the exact adjoint of [`Tensor::conv2d`] with
    /// the same kernel, stride and padding. Input `[N,F,H,W]`, kernel
    /// `[F,C,kH,kW]`, output `[N,C,(H-1)*stride-2*pad+kH, ...]`.
    pub fn conv_transpose2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, f, hy, wy) = dims4(self, "conv_transpose2d input")?;
        let (kf, c, kh, kw) = dims4(kernel, "conv_transpose2d kernel")?;
        if kf != f {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {f} channels, kernel expects {kf}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d: stride must be >= 1".into(),
            ));
        }
        let hx = ((hy - 1) * stride + kh) as isize - 2 * pad as isize;
        let wx = ((wy - 1) * stride + kw) as isize - 2 * pad as isize;
        if hx < 1 || wx < 1 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: computed output extent {hx}x{wx} is not positive"
            )));
        }
        let (hx, wx) = (hx as usize, wx as usize);

        let y = self.data();
        let k = kernel.data();
        let mut out = vec![0.0; n * c * hx * wx];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..hy {
                    for ox in 0..wy {
                        let yv = y[((ni * f + fi) * hy + oy) * wy + ox];
                        if yv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= hx as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wx as isize {
                                        continue;
                                    }
                                    out[((ni * c + ci) * hx + iy as usize) * wx + ix as usize] +=
                                        yv * k[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(y);
        drop(k);

        let (py, pk) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            vec![n, c, hx, wx],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let need_dy = py.requires_grad();
                let need_dk = pk.requires_grad();
                let y = py.data();
                let k = pk.data();
                let mut dy = if need_dy { vec![0.0; n * f * hy * wy] } else { vec![] };
                let mut dk = if need_dk { vec![0.0; f * c * kh * kw] } else { vec![] };
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..hy {
                            for ox in 0..wy {
                                let yi = ((ni * f + fi) * hy + oy) * wy + ox;
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= hx as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wx as isize {
                                                continue;
                                            }
                                            let gi = ((ni * c + ci) * hx + iy as usize) * wx
                                                + ix as usize;
                                            let kidx = ((fi * c + ci) * kh + ky) * kw + kx;
                                            if need_dy {
                                                dy[yi] += g[gi] * k[kidx];
                                            }
                                            if need_dk {
                                                dk[kidx] += y[yi] * g[gi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                drop(y);
                drop(k);
                if need_dy {
                    py.accumulate_grad(&dy);
                }
                if need_dk {
                    pk.accumulate_grad(&dk);
                }
            }),
        ))
    }

    /// Broadcast a per-channel bias over `[N,C,H,W]`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "add_channel_bias input")?;
        if bias.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_channel_bias: bias shape {:?}, expected [{c}]",
                bias.shape()
            )));
        }
        let x = self.data();
        let b = bias.data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let bv = b[ci];
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    out[base + i] = x[base + i] + bv;
                }
            }
        }
        drop(x);
        drop(b);
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if px.requires_grad() {
                    px.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                db[ci] += g[base + i];
                            }
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Per-channel batch normalization over `[N,C,H,W]`.
    ///
    /// In train mode the batch statistics (biased variance) normalize the
    /// input and the running statistics are updated in place as
    /// `r = momentum * r + (1 - momentum) * batch`. Eval mode normalizes
    /// with the running statistics and has no side effects.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "batch_norm input")?;
        for (t, name) in [
            (scale, "scale"),
            (shift, "shift"),
            (running_mean, "running_mean"),
            (running_var, "running_var"),
        ] {
            if t.shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {name} shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(
                "batch_norm: momentum must be in [0,1]".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("batch_norm: eps must be > 0".into()));
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm: train mode requires batch size >= 2".into(),
            ));
        }

        let m = n * h * w; // per-channel sample count
        let plane = h * w;
        let x = self.data();

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            acc += x[base + i];
                        }
                    }
                    let mu = acc / m as f64;
                    let mut vacc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            let d = x[base + i] - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = vacc / m as f64;
                }
                // Update running statistics in place.
                {
                    let mut rm = running_mean.inner.data.borrow_mut();
                    let mut rv = running_var.inner.data.borrow_mut();
                    for ci in 0..c {
                        rm[ci] = momentum * rm[ci] + (1.0 - momentum) * mean[ci];
                        rv[ci] = momentum * rv[ci] + (1.0 - momentum) * var[ci];
                    }
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma = scale.data();
        let beta = shift.data();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    let xn = (x[base + i] - mean[ci]) * inv_std[ci];
                    xhat[base + i] = xn;
                    out[base + i] = gamma[ci] * xn + beta[ci];
                }
            }
        }
        drop(x);
        drop(gamma);
        drop(beta);

        let (px, pg, pb) = (self.clone(), scale.clone(), shift.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |g| {
                let gamma = pg.data();
                // Per-channel sums of dy and dy * xhat are needed for every
                // input, so compute them once.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            sum_dy[ci] += g[base + i];
                            sum_dy_xhat[ci] += g[base + i] * xhat[base + i];
                        }
                    }
                }
                if px.requires_grad() {
                    let mut dx = vec![0.0; n * c * plane];
                    match mode {
                        BnMode::Train => {
                            let mf = m as f64;
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * plane;
                                    let a = gamma[ci] * inv_std[ci];
                                    for i in 0..plane {
                                        dx[base + i] = a
                                            * (g[base + i]
                                                - sum_dy[ci] / mf
                                                - xhat[base + i] * sum_dy_xhat[ci] / mf);
                                    }
                                }
                            }
                        }
                        BnMode::Eval => {
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * plane;
                                    let a = gamma[ci] * inv_std[ci];
                                    for i in 0..plane {
                                        dx[base + i] = a * g[base + i];
                                    }
                                }
                            }
                        }
                    }
                    px.accumulate_grad(&dx);
                }
                drop(gamma);
                if pg.requires_grad() {
                    pg.accumulate_grad(&sum_dy_xhat);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&sum_dy);
                }
            }),
        ))
    }

    /// Leaky ReLU; the subgradient at zero is `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        if !(0.0 < slope && slope < 1.0) {
            return Err(Error::InvalidArgument(
                "leaky_relu: slope must be in (0,1)".into(),
            ));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let x = p.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                    .collect();
                drop(x);
                p.accumulate_grad(&d);
            }),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let p = self.clone();
        let saved = y.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                p.accumulate_grad(&d);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let y: Vec<f64> = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let p = self.clone();
        let saved = y.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                p.accumulate_grad(&d);
            }),
        )
    }

    /// Square max pooling. The gradient routes to the first maximal element
    /// of each window in row-major order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "max_pool2d input")?;
        if window < 1 || stride < 1 {
            return Err(Error::InvalidArgument(
                "max_pool2d: window and stride must be >= 1".into(),
            ));
        }
        if window > h || window > w {
            return Err(Error::Shape(format!(
                "max_pool2d: window {window} exceeds spatial extent {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        drop(x);
        let p = self.clone();
        let total = n * c * h * w;
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; total];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }

    /// Mean over the spatial dimensions: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "global_avg_pool input")?;
        let plane = h * w;
        let x = self.data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mut acc = 0.0;
                for i in 0..plane {
                    acc += x[base + i];
                }
                out[ni * c + ci] = acc / plane as f64;
            }
        }
        drop(x);
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let gv = g[ni * c + ci] / plane as f64;
                        for i in 0..plane {
                            dx[base + i] = gv;
                        }
                    }
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let mut acc = 0.0;
        for v in self.data().iter() {
            acc += v;
        }
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g| {
                let d = vec![g[0]; n];
                p.accumulate_grad(&d);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let mut acc = 0.0;
        for v in self.data().iter() {
            acc += v;
        }
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![acc / n as f64],
            vec![self.clone()],
            Box::new(move |g| {
                let d = vec![g[0] / n as f64; n];
                p.accumulate_grad(&d);
            }),
        )
    }

    /// Mean binary cross-entropy of predictions against constant 0/1 targets.
    /// Predictions are clamped to `[EPS_CLIP, 1-EPS_CLIP]` before the logs,
    /// and the clamp blocks the gradient outside that band. Targets are
    /// treated as constants.
    pub fn bce_loss(&self, target: &Tensor) -> Result<Tensor> {
        same_shape(self, target, "bce_loss")?;
        let n = self.numel();
        let p = self.data();
        let t = target.data();
        let mut acc = 0.0;
        for i in 0..n {
            let pc = p[i].clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            acc += -(t[i] * pc.ln() + (1.0 - t[i]) * (1.0 - pc).ln());
        }
        drop(p);
        drop(t);
        let loss = acc / n as f64;
        let (pp, pt) = (self.clone(), target.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                if !pp.requires_grad() {
                    return;
                }
                let p = pp.data();
                let t = pt.data();
                let mut d = vec![0.0; n];
                for i in 0..n {
                    if p[i] <= EPS_CLIP || p[i] >= 1.0 - EPS_CLIP {
                        continue; // clamped: locally constant
                    }
                    d[i] = g[0] * (p[i] - t[i]) / (p[i] * (1.0 - p[i]) * n as f64);
                }
                drop(p);
                drop(t);
                pp.accumulate_grad(&d);
            }),
        ))
    }

    /// Straight-through surrogate: the forward value is replaced by
    /// `replacement`, the backward pass treats the op as identity.
    pub fn straight_through(&self, replacement: Vec<f64>) -> Result<Tensor> {
        if replacement.len() != self.numel() {
            return Err(Error::Shape(
                "straight_through: replacement length mismatch".into(),
            ));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            replacement,
            vec![self.clone()],
            Box::new(move |g| p.accumulate_grad(g)),
        ))
    }
}
