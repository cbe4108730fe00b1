//! Stateless kernels: matrix products, activations, softmax, normalization.

use super::{Real, Tensor};

/// `c[m x n] += a[m x k] * b[k x n]`, accumulating over `k` in order.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Inner product with eight interleaved partial sums, so the loop
/// vectorizes. The summation order is fixed, hence deterministic.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    s + tail
}

/// `c[m x k] += a[m x n] * b[k x n]^T`
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of relu given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid_t<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Gradient of sigmoid given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (T::one() - v);
    }
    dx
}

pub fn tanh_t<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Gradient of tanh given its output.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= T::one() - v * v;
    }
    dx
}

/// Softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

/// Gradient of a row softmax given its output.
pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let s: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - s);
        }
    }
    dx
}

/// Softmax along the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("softmax of a scalar");
    Tensor::new(x.shape(), softmax_rows(x.data(), n)).expect("same shape")
}

/// `v / max(|v|, eps)` for each row of length `d`. Returns outputs and the
/// per-row divisor.
pub fn l2_normalize_rows<T: Real>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

pub fn l2_normalize_rows_backward<T: Real>(
    y: &[T],
    norms: &[T],
    dy: &[T],
    d: usize,
    eps: T,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for (((yr, &n), dyr), dxr) in y
        .chunks(d)
        .zip(norms)
        .zip(dy.chunks(d))
        .zip(dx.chunks_mut(d))
    {
        if n > eps {
            let proj: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
                *o = (g - yv * proj) / n;
            }
        } else {
            for (o, &g) in dxr.iter_mut().zip(dyr) {
                *o = g / n;
            }
        }
    }
    dx
}

/// L2-normalizes a single vector; zero vectors stay zero.
pub fn l2_normalize<T: Real>(v: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = v.len().max(1);
    Tensor::new(v.shape(), l2_normalize_rows(v.data(), d, eps).0).expect("same shape")
}
