use super::{Real, Tensor};
use crate::error::{Error, Result};

fn require_2d<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![F::zero(); m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    let out = Tensor::new(vec![m, n], out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `out += a · b` on raw row-major buffers.
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ac.remainder().iter().zip(bc.remainder()).fold(F::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub(crate) fn matmul_at_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], k: usize, m: usize, n: usize) {
    for t in 0..k {
        let a_row = &a[t * m..(t + 1) * m];
        let b_row = &b[t * n..(t + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(a_row, b_row);
        }
    }
}

pub fn transpose<F: Real>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = require_2d("transpose", a)?;
    let src = a.data();
    Tensor::new(vec![c, r], (0..r * c).map(|idx| src[(idx % r) * c + idx / r]).collect())
}

/// Numerically stable softmax along `axis`.
pub fn softmax<F: Real>(v: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= v.ndim() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", v.shape()),
        ));
    }
    let len = v.shape()[axis];
    if len == 0 {
        return Err(Error::shape("softmax", "empty softmax axis"));
    }
    v.ensure_finite("softmax")?;
    let outer: usize = v.shape()[..axis].iter().product();
    let inner: usize = v.shape()[axis + 1..].iter().product();
    let src = v.data();
    let mut out = vec![F::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(F::neg_infinity(), |m, j| m.max(src[at(j)])).as_f64();
            let sum: f64 = (0..len).map(|j| (src[at(j)].as_f64() - max).exp()).sum();
            for j in 0..len {
                out[at(j)] = F::lit((src[at(j)].as_f64() - max).exp() / sum);
            }
        }
    }
    let out = Tensor::new(v.shape().to_vec(), out)?;
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Softmax over the last axis of a 2-D view, written into `out`.
///
/// Exponentials and the normalizer are accumulated in f64 so long `f32` rows
/// still sum to one within 1e-6.
pub(crate) fn softmax_rows_into<F: Real>(src: &[F], out: &mut [F], cols: usize) {
    let mut scratch = vec![0.0f64; cols];
    for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x)).as_f64();
        let mut sum = 0.0;
        for (e, &x) in scratch.iter_mut().zip(row) {
            *e = (x.as_f64() - max).exp();
            sum += *e;
        }
        for (d, e) in dst.iter_mut().zip(&scratch) {
            *d = F::lit(e / sum);
        }
    }
}

pub(crate) struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm_cached<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let cols = x.cols();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "normalized extent {cols}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps < F::zero() {
        return Err(Error::invalid("layer_norm eps must be non-negative"));
    }
    let n = F::lit(cols as f64);
    let rows = x.rows();
    let mut xhat = vec![F::zero(); x.numel()];
    let mut rstd = vec![F::zero(); rows];
    let mut out = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("layer_norm")?;
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Per-row normalization over the last axis followed by `gamma * x̂ + beta`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of the exact-erf gelu: `Φ(x) + x·φ(x)`.
pub(crate) fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let cdf = half * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact (erf-based) gelu.
pub fn gelu<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.ensure_finite("gelu")?;
    let out = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )?;
    out.ensure_finite("gelu")?;
    Ok(out)
}
