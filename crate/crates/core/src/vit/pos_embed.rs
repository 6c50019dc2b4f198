use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    let omega = |i: usize| 1.0 / 10000f64.powf(i as f64 / half as f64);
    out.extend((0..half).map(|i| (pos * omega(i)).sin()));
    out.extend((0..half).map(|i| (pos * omega(i)).cos()));
}

/// Fixed 2-D sin-cos position table for an `N`-token square grid.
///
/// The first `D/2` columns encode the column coordinate and the last `D/2`
/// the row coordinate; each half is `[sin(pos·ω_i) | cos(pos·ω_i)]` with
/// `ω_i = 10000^(-i/(D/4))`.
pub fn sincos_pos_embed<F: Real>(n: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::shape(
            "sincos_pos_embed",
            format!("embedding dim {dim} must be a positive multiple of 4"),
        ));
    }
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::shape("sincos_pos_embed", format!("{n} is not a square grid")));
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut row = Vec::with_capacity(dim);
    for k in 0..n {
        row.clear();
        sincos_1d(dim / 2, (k % grid) as f64, &mut row);
        sincos_1d(dim / 2, (k / grid) as f64, &mut row);
        data.extend(row.iter().map(|&v| F::lit(v)));
    }
    Tensor::new(vec![n, dim], data)
}
