//! Patch layout shared by patchify, unpatchify and the decoder's pixel
//! re-assembly.
//!
//! Token `k` is the patch at grid cell `(k / G, k % G)`, raster order from
//! the top-left. Inside a token, values run pixel-major (row, then column
//! within the patch) and channel-minor: offset `(py·p + px)·3 + c`.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Real, Tensor};

/// `N×dim` token matrix with the grid position of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F = f32> {
    pub tokens: Tensor<F>,
    pub positions: Vec<usize>,
}

impl<F: Real> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// For a square `side×side×3` image, `layout[t]` is the image offset of the
/// `t`-th value of the flattened `[N, p²·3]` token matrix.
pub fn patch_layout(side: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || side % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch size {p} does not divide image side {side}"),
        ));
    }
    let grid = side / p;
    let mut layout = Vec::with_capacity(side * side * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    let base = ((gy * p + py) * side + gx * p + px) * 3;
                    layout.extend([base, base + 1, base + 2]);
                }
            }
        }
    }
    Ok(layout)
}

pub fn patchify<F: Real>(image: &ImageTensor, p: usize) -> Result<TokenSequence<F>> {
    if !image.is_square() {
        return Err(Error::shape(
            "patchify",
            format!("image must be square, got {}x{}", image.height(), image.width()),
        ));
    }
    let side = image.width();
    let layout = patch_layout(side, p)?;
    let n = (side / p) * (side / p);
    let src = image.data();
    let tokens = Tensor::new(
        vec![n, p * p * 3],
        layout.iter().map(|&i| F::lit(src[i] as f64)).collect(),
    )?;
    Ok(TokenSequence {
        tokens,
        positions: (0..n).collect(),
    })
}

/// Inverse of [`patchify`] for an `[N, p²·3]` token matrix.
pub fn unpatchify<F: Real>(tokens: &Tensor<F>, p: usize) -> Result<ImageTensor> {
    let [n, dim] = tokens.shape() else {
        return Err(Error::shape("unpatchify", format!("expected [N, dim], got {:?}", tokens.shape())));
    };
    if *dim != p * p * 3 {
        return Err(Error::shape(
            "unpatchify",
            format!("token dim {dim} does not match patch size {p} (expected {})", p * p * 3),
        ));
    }
    let grid = (*n as f64).sqrt().round() as usize;
    if grid * grid != *n {
        return Err(Error::shape("unpatchify", format!("{n} tokens do not form a square grid")));
    }
    let side = grid * p;
    let layout = patch_layout(side, p)?;
    let mut out = vec![0.0f32; side * side * 3];
    for (&dst, &v) in layout.iter().zip(tokens.data()) {
        out[dst] = v.as_f64() as f32;
    }
    ImageTensor::new(side, side, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn random_image(side: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let data = (0..side * side * 3).map(|_| rng.uniform() as f32).collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    #[test]
    fn token_counts() {
        let big = patchify::<f32>(&ImageTensor::zeros(224, 224), 16).unwrap();
        assert_eq!(big.tokens.shape(), &[196, 768]);
        let nano = patchify::<f32>(&ImageTensor::zeros(32, 32), 8).unwrap();
        assert_eq!(nano.tokens.shape(), &[16, 192]);
        assert_eq!(nano.positions, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        assert!(patchify::<f32>(&ImageTensor::zeros(30, 30), 8).is_err());
        assert!(patchify::<f32>(&ImageTensor::zeros(32, 16), 8).is_err());
        let t = Tensor::<f32>::zeros(vec![16, 100]);
        assert!(unpatchify(&t, 8).is_err());
        let t = Tensor::<f32>::zeros(vec![15, 192]);
        assert!(unpatchify(&t, 8).is_err());
    }

    #[test]
    fn zero_tokens_give_zero_image() {
        let img = unpatchify(&Tensor::<f32>::zeros(vec![16, 192]), 8).unwrap();
        assert_eq!(img, ImageTensor::zeros(32, 32));
    }

    #[test]
    fn single_token_lands_in_its_grid_cell() {
        for k in 0..16 {
            let mut t = Tensor::<f32>::zeros(vec![16, 192]);
            t.data_mut()[k * 192..(k + 1) * 192].fill(1.0);
            let img = unpatchify(&t, 8).unwrap();
            let (gy, gx) = (k / 4, k % 4);
            for y in 0..32 {
                for x in 0..32 {
                    let inside = y / 8 == gy && x / 8 == gx;
                    for c in 0..3 {
                        assert_eq!(img.get(y, x, c), if inside { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn within_patch_order_is_pixel_major_then_channel() {
        let mut img = ImageTensor::zeros(16, 16);
        // Grid cell 1 is the top-right patch; pixel (row 1, col 2) inside it.
        img.set(1, 8 + 2, 2, 0.5);
        let t = patchify::<f32>(&img, 8).unwrap();
        assert_eq!(t.tokens.row(1)[(8 + 2) * 3 + 2], 0.5);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(grid in 1usize..6, p in 1usize..9, seed in any::<u64>()) {
            let img = random_image(grid * p, seed);
            let toks = patchify::<f32>(&img, p).unwrap();
            prop_assert_eq!(&unpatchify(&toks.tokens, p).unwrap(), &img);
            let again = patchify::<f32>(&unpatchify(&toks.tokens, p).unwrap(), p).unwrap();
            prop_assert_eq!(again.tokens, toks.tokens);
        }
    }
}
