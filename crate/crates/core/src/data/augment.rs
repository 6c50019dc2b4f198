//! Pretraining / fine-tuning augmentations: square random-resized-crop and
//! horizontal flip. Every output stays inside `[0, 1]`.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Rng;

const CROP_ATTEMPTS: usize = 10;

/// What `random_resized_crop` actually did; kept for logging and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRecord {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    /// `side² / (H·W)`.
    pub area_ratio: f64,
    /// True when no sampled crop satisfied the scale range.
    pub fallback: bool,
}

/// Bilinear resize with half-pixel centres; equal sizes are an exact copy.
pub fn resize_bilinear(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 || image.height() == 0 || image.width() == 0 {
        return Err(Error::invalid("resize to or from an empty image"));
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, image.height());
    let xs = axis(width, image.width());
    let mut out = ImageTensor::zeros(height, width);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
                let bottom = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.set(oy, ox, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Square crop whose area ratio lies in `scale`, resized to `target×target`.
pub fn random_resized_crop(
    image: &ImageTensor,
    scale: (f64, f64),
    target: usize,
    rng: &mut Rng,
) -> Result<(ImageTensor, CropRecord)> {
    let (lo, hi) = scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("scale range ({lo}, {hi}) not within (0, 1]")));
    }
    let (h, w) = (image.height(), image.width());
    if target == 0 || target > h.min(w) {
        return Err(Error::invalid(format!("target {target} exceeds image side {}", h.min(w))));
    }
    let area = (h * w) as f64;
    let ratio = |side: usize| (side * side) as f64 / area;

    let mut record = None;
    for _ in 0..CROP_ATTEMPTS {
        let r = rng.uniform_range(lo, hi);
        let side = (r * area).sqrt().round() as usize;
        if side == 0 || side > h.min(w) || !(lo..=hi).contains(&ratio(side)) {
            continue;
        }
        let top = rng.below(h - side + 1);
        let left = rng.below(w - side + 1);
        record = Some(CropRecord {
            top,
            left,
            side,
            area_ratio: ratio(side),
            fallback: false,
        });
        break;
    }
    let record = record.unwrap_or_else(|| {
        let side = ((hi * area).sqrt().floor() as usize).clamp(1, h.min(w));
        CropRecord {
            top: (h - side) / 2,
            left: (w - side) / 2,
            side,
            area_ratio: ratio(side),
            fallback: true,
        }
    });
    let crop = image.crop(record.top, record.left, record.side, record.side)?;
    Ok((resize_bilinear(&crop, target, target)?, record))
}

/// Unconditional mirror of the columns.
pub fn flip_columns(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            out.set_pixel(y, image.width() - 1 - x, image.pixel(y, x));
        }
    }
    out
}

/// Mirrors the columns with probability `p`; returns whether it flipped.
pub fn hflip(image: &ImageTensor, p: f64, rng: &mut Rng) -> Result<(ImageTensor, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("flip probability {p} outside [0, 1]")));
    }
    // Always consume one draw so the stream position is independent of p.
    let flip = rng.uniform() < p;
    Ok(if flip {
        (flip_columns(image), true)
    } else {
        (image.clone(), false)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn noise(side: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let data = (0..side * side * 3).map(|_| rng.uniform() as f32).collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    #[test]
    fn full_scale_same_size_is_identity() {
        let img = noise(16, 1);
        let (out, rec) = random_resized_crop(&img, (1.0, 1.0), 16, &mut Rng::new(0)).unwrap();
        assert_eq!(out, img);
        assert_eq!(rec.side, 16);
        assert!(!rec.fallback);
    }

    #[test]
    fn full_scale_resizes_whole_image() {
        let img = noise(32, 2);
        let (out, rec) = random_resized_crop(&img, (1.0, 1.0), 8, &mut Rng::new(0)).unwrap();
        assert_eq!((rec.top, rec.left, rec.side), (0, 0, 32));
        assert_eq!(out, resize_bilinear(&img, 8, 8).unwrap());
    }

    #[test]
    fn realized_ratios_stay_in_range() {
        let img = noise(32, 3);
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            let (out, rec) = random_resized_crop(&img, (0.2, 1.0), 32, &mut rng).unwrap();
            assert_eq!((out.height(), out.width()), (32, 32));
            assert!((0.2..=1.0).contains(&rec.area_ratio), "{rec:?}");
            assert!(!rec.fallback);
            assert!(out.in_unit_range());
        }
    }

    #[test]
    fn infeasible_range_falls_back_to_center() {
        // 4x4 image: areas are k²/16, none lies in [0.3, 0.5].
        let img = noise(4, 5);
        let (_, rec) = random_resized_crop(&img, (0.3, 0.5), 2, &mut Rng::new(0)).unwrap();
        assert!(rec.fallback);
        assert_eq!((rec.top, rec.left, rec.side), (1, 1, 2));
    }

    #[test]
    fn bad_arguments() {
        let img = noise(8, 6);
        let mut rng = Rng::new(0);
        assert!(random_resized_crop(&img, (0.0, 1.0), 8, &mut rng).is_err());
        assert!(random_resized_crop(&img, (0.5, 1.2), 8, &mut rng).is_err());
        assert!(random_resized_crop(&img, (0.5, 1.0), 9, &mut rng).is_err());
        assert!(hflip(&img, 1.5, &mut rng).is_err());
    }

    #[test]
    fn bilinear_midpoint() {
        let img = ImageTensor::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let up = resize_bilinear(&img, 1, 4).unwrap();
        let reds: Vec<f32> = (0..4).map(|x| up.get(0, x, 0)).collect();
        assert_eq!(reds, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn flip_probability_zero_and_involution() {
        let img = noise(8, 7);
        let mut rng = Rng::new(1);
        assert_eq!(hflip(&img, 0.0, &mut rng).unwrap(), (img.clone(), false));
        let (once, flipped) = hflip(&img, 1.0, &mut rng).unwrap();
        assert!(flipped);
        assert_ne!(once, img);
        assert_eq!(flip_columns(&once), img);
    }

    #[test]
    fn flip_frequency() {
        let img = noise(2, 8);
        let mut rng = Rng::new(9);
        let flips = (0..10_000)
            .filter(|_| hflip(&img, 0.5, &mut rng).unwrap().1)
            .count();
        let freq = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>(), target in 1usize..24) {
            let img = noise(24, seed);
            let mut rng = Rng::new(seed ^ 1);
            let (out, _) = random_resized_crop(&img, (0.08, 1.0), target, &mut rng).unwrap();
            prop_assert!(out.in_unit_range());
            prop_assert_eq!((out.height(), out.width()), (target, target));
        }
    }
}
