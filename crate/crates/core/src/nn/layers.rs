//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] at construction and keeps only ids. Backward passes take
//! the forward input (or a cache) and accumulate parameter gradients into
//! the store.

use rand::Rng;

use crate::error::{Error, Result};

use super::ops::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid};
use super::params::he_uniform;
use super::{BufferId, ParamId, ParamStore, Real, Tensor};

/// Per-channel temporal convolution over `[B, C, T]`.
///
/// Causal mode: `y[c,t] = sum_k w[c,k] * x[c, t - (K-1-k)*d]`, zero left
/// padding. Centered mode shifts the taps symmetrically around `t`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl DepthwiseConv1d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_param(
            &format!("{name}.weight"),
            he_uniform(&[channels, kernel], kernel, rng),
        );
        Self {
            weight,
            channels,
            kernel,
            dilation,
            causal,
        }
    }

    /// Time offset of tap `k` relative to the output frame.
    pub fn offset(&self, k: usize) -> isize {
        let d = self.dilation as isize;
        if self.causal {
            -((self.kernel - 1 - k) as isize) * d
        } else {
            (k as isize - (self.kernel as isize - 1) / 2) * d
        }
    }

    /// Number of past frames one output depends on.
    pub fn left_context(&self) -> usize {
        (-self.offset(0)).max(0) as usize
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(3, "depthwise conv input")?;
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        if c != self.channels {
            return Err(Error::Shape(format!(
                "depthwise conv expects {} channels, got {c}",
                self.channels
            )));
        }
        let w = ps.value(self.weight).data();
        let mut y = Tensor::zeros(&[b, c, t]);
        for (xr, (yr, ci)) in x
            .data()
            .chunks(t)
            .zip(y.data_mut().chunks_mut(t).zip((0..c).cycle()))
        {
            for k in 0..self.kernel {
                let wv = w[ci * self.kernel + k];
                let off = self.offset(k);
                let lo = (-off).max(0) as usize;
                let hi = (t as isize - off).clamp(0, t as isize) as usize;
                for tt in lo..hi {
                    yr[tt] += wv * xr[(tt as isize + off) as usize];
                }
            }
        }
        Ok(y)
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (c, t) = (x.dim(1), x.dim(2));
        let w = ps.value(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        let dw = ps.grad_mut(self.weight).data_mut();
        for ((xr, dyr), (dxr, ci)) in x
            .data()
            .chunks(t)
            .zip(dy.data().chunks(t))
            .zip(dx.data_mut().chunks_mut(t).zip((0..c).cycle()))
        {
            for k in 0..self.kernel {
                let wv = w[ci * self.kernel + k];
                let off = self.offset(k);
                let lo = (-off).max(0) as usize;
                let hi = (t as isize - off).clamp(0, t as isize) as usize;
                if lo >= hi {
                    continue;
                }
                let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                for (d, &g) in dxr[slo..shi].iter_mut().zip(&dyr[lo..hi]) {
                    *d += wv * g;
                }
                dw[ci * self.kernel + k] += dot(&xr[slo..shi], &dyr[lo..hi]);
            }
        }
        dx
    }
}

/// 1x1 convolution over `[B, C_in, T]`: `y[:, t] = W x[:, t] (+ b)`.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_param(&format!("{name}.weight"), he_uniform(&[cout, cin], cin, rng));
        let bias = bias.then(|| ps.add_param(&format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(3, "pointwise conv input")?;
        let (b, cin, t) = (x.dim(0), x.dim(1), x.dim(2));
        if cin != self.cin {
            return Err(Error::Shape(format!(
                "pointwise conv expects {} channels, got {cin}",
                self.cin
            )));
        }
        let w = ps.value(self.weight).data();
        let mut y = Tensor::zeros(&[b, self.cout, t]);
        let ystride = self.cout * t;
        for bi in 0..b {
            let yb = &mut y.data_mut()[bi * ystride..(bi + 1) * ystride];
            if let Some(bias) = self.bias {
                for (row, &bv) in yb.chunks_mut(t).zip(ps.value(bias).data()) {
                    row.fill(bv);
                }
            }
            gemm_acc(w, &x.data()[bi * cin * t..(bi + 1) * cin * t], yb, self.cout, cin, t);
        }
        Ok(y)
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (b, cin, t) = (x.dim(0), x.dim(1), x.dim(2));
        let w = ps.value(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            let xb = &x.data()[bi * cin * t..(bi + 1) * cin * t];
            let dyb = &dy.data()[bi * self.cout * t..(bi + 1) * self.cout * t];
            gemm_nt_acc(dyb, xb, ps.grad_mut(self.weight).data_mut(), self.cout, t, cin);
            gemm_tn_acc(
                &w,
                dyb,
                &mut dx.data_mut()[bi * cin * t..(bi + 1) * cin * t],
                self.cout,
                cin,
                t,
            );
            if let Some(bias) = self.bias {
                for (g, row) in ps.grad_mut(bias).data_mut().iter_mut().zip(dyb.chunks(t)) {
                    *g += row.iter().copied().sum();
                }
            }
        }
        dx
    }
}

/// Fully connected layer over `[B, D_in]`: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_param(&format!("{name}.weight"), he_uniform(&[dout, din], din, rng));
        let bias = ps.add_param(&format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(2, "dense input")?;
        if x.dim(1) != self.din {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {}",
                self.din,
                x.dim(1)
            )));
        }
        let b = x.dim(0);
        let w = ps.value(self.weight).data();
        let bias = ps.value(self.bias).data();
        let mut y = Tensor::zeros(&[b, self.dout]);
        for (xr, yr) in x.data().chunks(self.din).zip(y.data_mut().chunks_mut(self.dout)) {
            for (o, yv) in yr.iter_mut().enumerate() {
                let mut s = bias[o];
                for (&wv, &xv) in w[o * self.din..(o + 1) * self.din].iter().zip(xr) {
                    s += wv * xv;
                }
                *yv = s;
            }
        }
        Ok(y)
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let b = x.dim(0);
        let w = ps.value(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        gemm_acc(dy.data(), &w, dx.data_mut(), b, self.dout, self.din);
        gemm_tn_acc(
            dy.data(),
            x.data(),
            ps.grad_mut(self.weight).data_mut(),
            b,
            self.dout,
            self.din,
        );
        let gb = ps.grad_mut(self.bias).data_mut();
        for row in dy.data().chunks(self.dout) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        dx
    }
}

/// 2-D cross-correlation over `[B, C_in, H, W]` with square odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_param(
            &format!("{name}.weight"),
            he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        Self {
            weight,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Output positions `o` whose input index `o*s + k - p` lies in `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = ((n as isize - 1 - shift).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(4, "conv2d input")?;
        let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if cin != self.cin {
            return Err(Error::Shape(format!(
                "conv2d expects {} channels, got {cin}",
                self.cin
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("conv2d input {h}x{w} smaller than kernel")));
        }
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let rows = cin * self.kernel * self.kernel;
        let n = ho * wo;
        let wt = ps.value(self.weight).data();
        let mut y = Tensor::zeros(&[b, self.cout, ho, wo]);
        let mut cols = vec![T::zero(); rows * n];
        for bi in 0..b {
            let xb = &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
            self.im2col(xb, h, w, ho, wo, &mut cols);
            let yb = &mut y.data_mut()[bi * self.cout * n..(bi + 1) * self.cout * n];
            gemm_acc(wt, &cols, yb, self.cout, rows, n);
        }
        Ok(y)
    }

    /// Unfolds one `[C_in, H, W]` input into `[C_in*K*K, Ho*Wo]` patches;
    /// taps that fall in the padding are zero.
    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        cols.fill(T::zero());
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, w, wo);
                    let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.pad;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let ix0 = ox0 + kx - self.pad;
                            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src[ox * s + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds patch gradients back onto the input positions they came from.
    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, w, wo);
                    let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.pad;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let src = &row[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            dst[ox * s + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (dy.dim(2), dy.dim(3));
        let rows = cin * self.kernel * self.kernel;
        let n = ho * wo;
        let wt = ps.value(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); rows * n];
        let mut dcols = vec![T::zero(); rows * n];
        for bi in 0..b {
            let xb = &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
            let dyb = &dy.data()[bi * self.cout * n..(bi + 1) * self.cout * n];
            self.im2col(xb, h, w, ho, wo, &mut cols);
            gemm_nt_acc(dyb, &cols, ps.grad_mut(self.weight).data_mut(), self.cout, n, rows);
            dcols.fill(T::zero());
            gemm_tn_acc(&wt, dyb, &mut dcols, self.cout, rows, n);
            let dxb = &mut dx.data_mut()[bi * cin * h * w..(bi + 1) * cin * h * w];
            self.col2im(&dcols, h, w, ho, wo, dxb);
        }
        dx
    }
}

/// Batch normalization over every axis except axis 1 (channels).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved forward state for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub count: Vec<T>,
}

impl BatchNorm {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        Self {
            gamma: ps.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: ps.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            channels,
            eps,
            momentum,
        }
    }

    fn geometry<T: Real>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.rank() < 2 || x.dim(1) != self.channels {
            return Err(Error::Shape(format!(
                "batch-norm over {} channels got {:?}",
                self.channels,
                x.shape()
            )));
        }
        Ok((x.dim(0), x.shape()[2..].iter().product()))
    }

    /// Eval mode: normalizes with the running statistics.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, s) = self.geometry(x)?;
        let (scale, shift) = self.eval_affine(ps);
        let mut y = x.clone();
        for (row, c) in y.data_mut().chunks_mut(s.max(1)).zip((0..self.channels).cycle()) {
            for v in row.iter_mut() {
                *v = *v * scale[c] + shift[c];
            }
        }
        Ok(y)
    }

    /// Per-channel `(scale, shift)` equivalent to the eval-mode transform.
    pub fn eval_affine<T: Real>(&self, ps: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let g = ps.value(self.gamma).data();
        let b = ps.value(self.beta).data();
        let rm = ps.buffer(self.running_mean).data();
        let rv = ps.buffer(self.running_var).data();
        let eps = T::c(self.eps);
        let scale: Vec<T> = (0..self.channels)
            .map(|c| g[c] / (rv[c] + eps).sqrt())
            .collect();
        let shift = (0..self.channels).map(|c| b[c] - rm[c] * scale[c]).collect();
        (scale, shift)
    }

    /// Train mode: batch statistics over positions whose `mask` entry is
    /// nonzero (`mask` is `[B, S]`; `None` means all positions). Updates
    /// the running statistics.
    pub fn forward_train<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let (b, s) = self.geometry(x)?;
        let c_n = self.channels;
        let mut sum = vec![T::zero(); c_n];
        let mut count = vec![T::zero(); c_n];
        let xd = x.data();
        for bi in 0..b {
            for c in 0..c_n {
                let row = &xd[(bi * c_n + c) * s..][..s];
                for (j, &v) in row.iter().enumerate() {
                    let m = mask.map_or(T::one(), |m| m[bi * s + j]);
                    sum[c] += m * v;
                    count[c] += m;
                }
            }
        }
        if count.iter().any(|&n| n <= T::zero()) {
            return Err(Error::Shape("batch-norm over an empty reduction axis".into()));
        }
        let mean: Vec<T> = sum.iter().zip(&count).map(|(&s, &n)| s / n).collect();
        let mut sq = vec![T::zero(); c_n];
        for bi in 0..b {
            for c in 0..c_n {
                let row = &xd[(bi * c_n + c) * s..][..s];
                for (j, &v) in row.iter().enumerate() {
                    let m = mask.map_or(T::one(), |m| m[bi * s + j]);
                    let d = v - mean[c];
                    sq[c] += m * d * d;
                }
            }
        }
        let var: Vec<T> = sq.iter().zip(&count).map(|(&q, &n)| q / n).collect();
        let eps = T::c(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = ps.value(self.gamma).data().to_vec();
        let be = ps.value(self.beta).data().to_vec();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for bi in 0..b {
            for c in 0..c_n {
                let off = (bi * c_n + c) * s;
                for j in 0..s {
                    let h = (xd[off + j] - mean[c]) * inv_std[c];
                    xhat.data_mut()[off + j] = h;
                    y.data_mut()[off + j] = g[c] * h + be[c];
                }
            }
        }
        let mom = T::c(self.momentum);
        for c in 0..c_n {
            let n = count[c];
            let unbiased = if n > T::one() { var[c] * n / (n - T::one()) } else { var[c] };
            let rm = ps.buffer_mut(self.running_mean);
            rm.data_mut()[c] = (T::one() - mom) * rm.data()[c] + mom * mean[c];
            let rv = ps.buffer_mut(self.running_var);
            rv.data_mut()[c] = (T::one() - mom) * rv.data()[c] + mom * unbiased;
        }
        Ok((y, BnCache { xhat, inv_std, count }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Tensor<T> {
        let (b, s) = (dy.dim(0), dy.shape()[2..].iter().product::<usize>());
        let c_n = self.channels;
        let g = ps.value(self.gamma).data().to_vec();
        let xh = cache.xhat.data();
        let dyd = dy.data();
        let mut dgamma = vec![T::zero(); c_n];
        let mut dbeta = vec![T::zero(); c_n];
        // Statistics come from valid positions only, but every output
        // (masked or not) depends on them, so these sums run over all.
        let mut s1_all = vec![T::zero(); c_n];
        let mut s2_all = vec![T::zero(); c_n];
        for bi in 0..b {
            for c in 0..c_n {
                let off = (bi * c_n + c) * s;
                for j in 0..s {
                    let d = dyd[off + j];
                    dgamma[c] += d * xh[off + j];
                    dbeta[c] += d;
                    s1_all[c] += d * g[c];
                    s2_all[c] += d * g[c] * xh[off + j];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for bi in 0..b {
            for c in 0..c_n {
                let off = (bi * c_n + c) * s;
                let n = cache.count[c];
                let r = cache.inv_std[c];
                for j in 0..s {
                    let direct = dyd[off + j] * g[c] * r;
                    let m = mask.map_or(T::one(), |m| m[bi * s + j]);
                    dx.data_mut()[off + j] =
                        direct - m * r / n * (s1_all[c] + xh[off + j] * s2_all[c]);
                }
            }
        }
        for (a, d) in ps.grad_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += *d;
        }
        for (a, d) in ps.grad_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += *d;
        }
        dx
    }

    /// Eval-mode backward (running statistics are constants).
    pub fn backward_eval<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let s: usize = x.shape()[2..].iter().product();
        let rm = ps.buffer(self.running_mean).data().to_vec();
        let rv = ps.buffer(self.running_var).data().to_vec();
        let g = ps.value(self.gamma).data().to_vec();
        let eps = T::c(self.eps);
        let mut dx = dy.clone();
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        for ((xr, dyr), (dxr, c)) in x
            .data()
            .chunks(s.max(1))
            .zip(dy.data().chunks(s.max(1)))
            .zip(dx.data_mut().chunks_mut(s.max(1)).zip((0..self.channels).cycle()))
        {
            let r = T::one() / (rv[c] + eps).sqrt();
            for ((&xv, &d), o) in xr.iter().zip(dyr).zip(dxr.iter_mut()) {
                dgamma[c] += d * (xv - rm[c]) * r;
                dbeta[c] += d;
                *o = d * g[c] * r;
            }
        }
        for (a, d) in ps.grad_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += *d;
        }
        for (a, d) in ps.grad_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += *d;
        }
        dx
    }
}

/// Two-layer bottleneck producing a sigmoid channel gate from a pooled
/// descriptor: `g = sigmoid(W2 relu(W1 p + b1) + b2)`.
#[derive(Debug, Clone)]
struct Bottleneck {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    channels: usize,
    hidden: usize,
}

impl Bottleneck {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidConfig(format!(
                "SE reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: ps.add_param(&format!("{name}.w1"), he_uniform(&[hidden, channels], channels, rng)),
            b1: ps.add_param(&format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: ps.add_param(&format!("{name}.w2"), he_uniform(&[channels, hidden], hidden, rng)),
            b2: ps.add_param(&format!("{name}.b2"), Tensor::zeros(&[channels])),
            channels,
            hidden,
        })
    }

    /// `p` is `[C, N]` (N descriptors); returns hidden `[H, N]` and gate `[C, N]`.
    fn forward<T: Real>(&self, ps: &ParamStore<T>, p: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let mut h = vec![T::zero(); self.hidden * n];
        for (row, &bv) in h.chunks_mut(n).zip(ps.value(self.b1).data()) {
            row.fill(bv);
        }
        gemm_acc(ps.value(self.w1).data(), p, &mut h, self.hidden, self.channels, n);
        for v in &mut h {
            *v = v.max(T::zero());
        }
        let mut g = vec![T::zero(); self.channels * n];
        for (row, &bv) in g.chunks_mut(n).zip(ps.value(self.b2).data()) {
            row.fill(bv);
        }
        gemm_acc(ps.value(self.w2).data(), &h, &mut g, self.channels, self.hidden, n);
        for v in &mut g {
            *v = sigmoid(*v);
        }
        (h, g)
    }

    /// Returns dL/dp given dL/dg.
    fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        p: &[T],
        h: &[T],
        g: &[T],
        dg: &[T],
        n: usize,
    ) -> Vec<T> {
        let dz2: Vec<T> = dg
            .iter()
            .zip(g)
            .map(|(&d, &gv)| d * gv * (T::one() - gv))
            .collect();
        gemm_nt_acc(&dz2, h, ps.grad_mut(self.w2).data_mut(), self.channels, n, self.hidden);
        for (gb, row) in ps.grad_mut(self.b2).data_mut().iter_mut().zip(dz2.chunks(n)) {
            *gb += row.iter().copied().sum();
        }
        let mut dh = vec![T::zero(); self.hidden * n];
        let w2 = ps.value(self.w2).data().to_vec();
        gemm_tn_acc(&w2, &dz2, &mut dh, self.channels, self.hidden, n);
        for (d, &hv) in dh.iter_mut().zip(h) {
            if hv <= T::zero() {
                *d = T::zero();
            }
        }
        gemm_nt_acc(&dh, p, ps.grad_mut(self.w1).data_mut(), self.hidden, n, self.channels);
        for (gb, row) in ps.grad_mut(self.b1).data_mut().iter_mut().zip(dh.chunks(n)) {
            *gb += row.iter().copied().sum();
        }
        let mut dp = vec![T::zero(); self.channels * n];
        let w1 = ps.value(self.w1).data().to_vec();
        gemm_tn_acc(&w1, &dh, &mut dp, self.hidden, self.channels, n);
        dp
    }

    fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Squeeze-and-excitation gate over `[B, C, T]` whose squeeze is a causal
/// moving average of the last `window` frames (zero left padding), so the
/// gate at frame `t` sees only frames `<= t`.
#[derive(Debug, Clone)]
pub struct SeTemporal {
    net: Bottleneck,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct SeCache<T> {
    pooled: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    gate: Vec<Vec<T>>,
}

impl SeTemporal {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("SE window must be >= 1".into()));
        }
        Ok(Self {
            net: Bottleneck::new(ps, name, channels, reduction, rng)?,
            window,
        })
    }

    pub fn channels(&self) -> usize {
        self.net.channels
    }

    pub fn hidden(&self) -> usize {
        self.net.hidden
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        self.net.param_ids()
    }

    /// Moving average of one `[C, T]` slab.
    fn pool<T: Real>(&self, x: &[T], c: usize, t: usize) -> Vec<T> {
        let inv = T::one() / T::c(self.window as f64);
        let mut p = vec![T::zero(); c * t];
        for (xr, pr) in x.chunks(t).zip(p.chunks_mut(t)) {
            for tt in 0..t {
                let mut s = T::zero();
                for j in (0..self.window).rev() {
                    if tt >= j {
                        s += xr[tt - j];
                    }
                }
                pr[tt] = s * inv;
            }
        }
        p
    }

    /// Gate for a single pooled column (streaming use).
    pub fn gate_column<T: Real>(&self, ps: &ParamStore<T>, pooled: &[T]) -> Vec<T> {
        self.net.forward(ps, pooled, 1).1
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(ps, x)?.0)
    }

    pub fn forward_cached<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, SeCache<T>)> {
        x.expect_rank(3, "SE input")?;
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        if c != self.net.channels {
            return Err(Error::Shape(format!(
                "SE expects {} channels, got {c}",
                self.net.channels
            )));
        }
        let mut y = x.clone();
        let mut cache = SeCache {
            pooled: Vec::with_capacity(b),
            hidden: Vec::with_capacity(b),
            gate: Vec::with_capacity(b),
        };
        for bi in 0..b {
            let xb = &x.data()[bi * c * t..(bi + 1) * c * t];
            let p = self.pool(xb, c, t);
            let (h, g) = self.net.forward(ps, &p, t);
            for (v, &gv) in y.data_mut()[bi * c * t..(bi + 1) * c * t].iter_mut().zip(&g) {
                *v *= gv;
            }
            cache.pooled.push(p);
            cache.hidden.push(h);
            cache.gate.push(g);
        }
        Ok((y, cache))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        cache: &SeCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        let inv = T::one() / T::c(self.window as f64);
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            let r = bi * c * t..(bi + 1) * c * t;
            let xb = &x.data()[r.clone()];
            let dyb = &dy.data()[r.clone()];
            let g = &cache.gate[bi];
            let dg: Vec<T> = dyb.iter().zip(xb).map(|(&d, &xv)| d * xv).collect();
            let dp = self
                .net
                .backward(ps, &cache.pooled[bi], &cache.hidden[bi], g, &dg, t);
            let dxb = &mut dx.data_mut()[r];
            for (o, (&d, &gv)) in dxb.iter_mut().zip(dyb.iter().zip(g)) {
                *o = d * gv;
            }
            for (dxr, dpr) in dxb.chunks_mut(t).zip(dp.chunks(t)) {
                for tt in 0..t {
                    let v = dpr[tt] * inv;
                    for j in 0..self.window.min(tt + 1) {
                        dxr[tt - j] += v;
                    }
                }
            }
        }
        dx
    }
}

/// Squeeze-and-excitation over `[B, C, H, W]` with global average pooling.
#[derive(Debug, Clone)]
pub struct Se2d {
    net: Bottleneck,
}

#[derive(Debug, Clone)]
pub struct Se2dCache<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
}

impl Se2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            net: Bottleneck::new(ps, name, channels, reduction, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(ps, x)?.0)
    }

    pub fn forward_cached<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Se2dCache<T>)> {
        x.expect_rank(4, "SE input")?;
        let b = x.dim(0);
        let c = self.net.channels;
        if x.dim(1) != c {
            return Err(Error::Shape(format!("SE expects {c} channels, got {}", x.dim(1))));
        }
        let s = x.dim(2) * x.dim(3);
        let inv = T::one() / T::c(s as f64);
        // pooled laid out [C, B] so the bottleneck sees B columns
        let mut p = vec![T::zero(); c * b];
        for bi in 0..b {
            for ci in 0..c {
                let sum: T = x.data()[(bi * c + ci) * s..][..s].iter().copied().sum();
                p[ci * b + bi] = sum * inv;
            }
        }
        let (h, g) = self.net.forward(ps, &p, b);
        let mut y = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let gv = g[ci * b + bi];
                for v in &mut y.data_mut()[(bi * c + ci) * s..][..s] {
                    *v *= gv;
                }
            }
        }
        Ok((
            y,
            Se2dCache {
                pooled: p,
                hidden: h,
                gate: g,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        cache: &Se2dCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let b = x.dim(0);
        let c = self.net.channels;
        let s = x.dim(2) * x.dim(3);
        let inv = T::one() / T::c(s as f64);
        let mut dg = vec![T::zero(); c * b];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                dg[ci * b + bi] = x.data()[off..off + s]
                    .iter()
                    .zip(&dy.data()[off..off + s])
                    .map(|(&a, &d)| a * d)
                    .sum();
            }
        }
        let dp = self
            .net
            .backward(ps, &cache.pooled, &cache.hidden, &cache.gate, &dg, b);
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let gv = cache.gate[ci * b + bi];
                let dpv = dp[ci * b + bi] * inv;
                for j in 0..s {
                    dx.data_mut()[off + j] = dy.data()[off + j] * gv + dpv;
                }
            }
        }
        dx
    }
}
