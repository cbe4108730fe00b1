//! Attention-weighted statistics over frames.
//!
//! One shared scalar score per frame, `e_t = v . tanh(W h_t + b)`, is
//! turned into weights `alpha = softmax(e)`. ASP returns the weighted mean
//! and standard deviation; SAP returns the weighted mean only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_rows};
use crate::nn::params::he_uniform;
use crate::nn::{ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Asp,
    Sap,
}

#[derive(Debug, Clone)]
pub struct AttentivePooling {
    pub kind: PoolingKind,
    pub w: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub dim: usize,
    pub hidden: usize,
    /// Variance floor inside the square root.
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    /// `tanh(W h + b)` per item, `[A, T]`.
    u: Vec<Vec<T>>,
    /// Attention weights per item, `[T]`.
    alpha: Vec<Vec<T>>,
    /// Weighted mean per item, `[D]`.
    mu: Vec<Vec<T>>,
    /// Weighted variance before the floor, `[D]`.
    var: Vec<Vec<T>>,
}

impl<T> PoolCache<T> {
    pub fn weights(&self) -> &[Vec<T>] {
        &self.alpha
    }
}

impl AttentivePooling {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        kind: PoolingKind,
        dim: usize,
        hidden: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            kind,
            w: ps.add_param(&format!("{name}.w"), he_uniform(&[hidden, dim], dim, rng)),
            b: ps.add_param(&format!("{name}.b"), Tensor::zeros(&[hidden])),
            v: ps.add_param(&format!("{name}.v"), he_uniform(&[hidden], hidden, rng)),
            dim,
            hidden,
            eps,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            PoolingKind::Asp => 2 * self.dim,
            PoolingKind::Sap => self.dim,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(ps, h)?.0)
    }

    /// `h` is `[B, D, T]`; returns `[B, out_dim]`.
    pub fn forward_cached<T: Real>(
        &self,
        ps: &ParamStore<T>,
        h: &Tensor<T>,
    ) -> Result<(Tensor<T>, PoolCache<T>)> {
        h.expect_rank(3, "pooling input")?;
        let (b, d, t) = (h.dim(0), h.dim(1), h.dim(2));
        if d != self.dim {
            return Err(Error::Shape(format!("pooling expects {} channels, got {d}", self.dim)));
        }
        if t == 0 {
            return Err(Error::TooShort("pooling over zero frames".into()));
        }
        let (a_n, w, bias, v) = (
            self.hidden,
            ps.value(self.w).data(),
            ps.value(self.b).data(),
            ps.value(self.v).data(),
        );
        let eps = T::c(self.eps);
        let mut out = Tensor::zeros(&[b, self.out_dim()]);
        let mut cache = PoolCache {
            u: Vec::with_capacity(b),
            alpha: Vec::with_capacity(b),
            mu: Vec::with_capacity(b),
            var: Vec::with_capacity(b),
        };
        for bi in 0..b {
            let hb = &h.data()[bi * d * t..(bi + 1) * d * t];
            let mut u = vec![T::zero(); a_n * t];
            for (row, &bv) in u.chunks_mut(t).zip(bias) {
                row.fill(bv);
            }
            gemm_acc(w, hb, &mut u, a_n, d, t);
            u.iter_mut().for_each(|x| *x = x.tanh());
            let mut e = vec![T::zero(); t];
            for (row, &vv) in u.chunks(t).zip(v) {
                for (ev, &uv) in e.iter_mut().zip(row) {
                    *ev += vv * uv;
                }
            }
            let alpha = softmax_rows(&e, t);
            let mut mu = vec![T::zero(); d];
            let mut var = vec![T::zero(); d];
            for (di, row) in hb.chunks(t).enumerate() {
                let (mut m, mut sq) = (T::zero(), T::zero());
                for (&x, &a) in row.iter().zip(&alpha) {
                    m += a * x;
                    sq += a * x * x;
                }
                mu[di] = m;
                var[di] = sq - m * m;
            }
            let o = &mut out.data_mut()[bi * self.out_dim()..(bi + 1) * self.out_dim()];
            o[..d].copy_from_slice(&mu);
            if self.kind == PoolingKind::Asp {
                for (dst, &vv) in o[d..].iter_mut().zip(&var) {
                    *dst = vv.max(eps).sqrt();
                }
            }
            cache.u.push(u);
            cache.alpha.push(alpha);
            cache.mu.push(mu);
            cache.var.push(var);
        }
        Ok((out, cache))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        h: &Tensor<T>,
        cache: &PoolCache<T>,
        dout: &Tensor<T>,
    ) -> Tensor<T> {
        let (b, d, t) = (h.dim(0), h.dim(1), h.dim(2));
        let a_n = self.hidden;
        let w = ps.value(self.w).data().to_vec();
        let v = ps.value(self.v).data().to_vec();
        let eps = T::c(self.eps);
        let two = T::c(2.0);
        let mut dh = Tensor::zeros(h.shape());
        let mut dw = vec![T::zero(); a_n * d];
        let mut db = vec![T::zero(); a_n];
        let mut dv = vec![T::zero(); a_n];
        for bi in 0..b {
            let hb = &h.data()[bi * d * t..(bi + 1) * d * t];
            let o = &dout.data()[bi * self.out_dim()..(bi + 1) * self.out_dim()];
            let (alpha, mu, var, u) = (&cache.alpha[bi], &cache.mu[bi], &cache.var[bi], &cache.u[bi]);
            // gradient w.r.t. the variance, then folded into the mean
            let dvar: Vec<T> = (0..d)
                .map(|di| match self.kind {
                    PoolingKind::Asp if var[di] > eps => o[d + di] / (two * var[di].sqrt()),
                    _ => T::zero(),
                })
                .collect();
            let dmu: Vec<T> = (0..d).map(|di| o[di] - two * mu[di] * dvar[di]).collect();
            let dhb = &mut dh.data_mut()[bi * d * t..(bi + 1) * d * t];
            let mut dalpha = vec![T::zero(); t];
            for di in 0..d {
                let row = &hb[di * t..(di + 1) * t];
                let drow = &mut dhb[di * t..(di + 1) * t];
                for ti in 0..t {
                    let x = row[ti];
                    drow[ti] += alpha[ti] * (dmu[di] + two * x * dvar[di]);
                    dalpha[ti] += x * dmu[di] + x * x * dvar[di];
                }
            }
            let s: T = alpha.iter().zip(&dalpha).map(|(&a, &g)| a * g).sum();
            let de: Vec<T> = alpha.iter().zip(&dalpha).map(|(&a, &g)| a * (g - s)).collect();
            let mut da = vec![T::zero(); a_n * t];
            for ai in 0..a_n {
                let urow = &u[ai * t..(ai + 1) * t];
                let darow = &mut da[ai * t..(ai + 1) * t];
                for ti in 0..t {
                    dv[ai] += de[ti] * urow[ti];
                    darow[ti] = v[ai] * de[ti] * (T::one() - urow[ti] * urow[ti]);
                }
                db[ai] += darow.iter().copied().sum::<T>();
            }
            gemm_nt_acc(&da, hb, &mut dw, a_n, t, d);
            gemm_tn_acc(&w, &da, dhb, a_n, d, t);
        }
        for (id, g) in [(self.w, dw), (self.b, db), (self.v, dv)] {
            for (a, x) in ps.grad_mut(id).data_mut().iter_mut().zip(g) {
                *a += x;
            }
        }
        dh
    }
}
