//! Figure-style emitters: reconstruction panels and attention heat maps,
//! both written as binary PPM.

use std::path::Path;

use crate::data::write_ppm;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mim::{mim_forward, mim_loss, sample_mask, MaskPlan};
use crate::tensor::Rng;
use crate::train::ModelCheckpoint;
use crate::vit::extract_attention_map;

/// Width of the white separator between panel columns and rows.
pub const GUTTER: usize = 2;
/// 8-bit gray level painted over masked patches.
pub const MASK_GRAY: u8 = 128;
/// Number of entries in the heat ramp.
pub const RAMP_LEN: usize = 256;

pub struct ReconstructionPanel {
    pub image: ImageTensor,
    /// Masked-region mean L1 of the raw reconstruction, per input image.
    pub masked_l1: Vec<f64>,
}

/// One mask plan per image, drawn from labelled sub-streams of `seed`.
pub fn sample_plans(count: usize, tokens: usize, ratio: f64, seed: u64) -> Result<Vec<MaskPlan>> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| sample_mask(tokens, ratio, &mut root.substream(&format!("panel-{i}"))))
        .collect()
}

fn paste(dst: &mut ImageTensor, src: &ImageTensor, top: usize, left: usize) {
    for y in 0..src.height() {
        for x in 0..src.width() {
            dst.set_pixel(top + y, left + x, src.pixel(y, x));
        }
    }
}

/// One row per image: original | masked (gray fill) | reconstruction with
/// the visible patches pasted back from the original.
pub fn render_reconstruction_panel(
    checkpoint: &ModelCheckpoint,
    images: &[ImageTensor],
    plans: &[MaskPlan],
    out: Option<&Path>,
) -> Result<ReconstructionPanel> {
    if !checkpoint.has_decoder() {
        return Err(Error::invalid(
            "reconstruction needs a checkpoint with decoder weights (fine-tuned checkpoints have none)",
        ));
    }
    if images.is_empty() || images.len() != plans.len() {
        return Err(Error::invalid(format!(
            "{} images with {} mask plans",
            images.len(),
            plans.len()
        )));
    }
    let model = &checkpoint.meta.model;
    let (side, p) = (model.image_size, model.patch_size);
    let grid = model.grid();
    let gray = MASK_GRAY as f32 / 255.0;
    let rows = images.len();
    let mut panel = ImageTensor::filled(rows * side + (rows - 1) * GUTTER, 3 * side + 2 * GUTTER, 1.0);
    let mut masked_l1 = Vec::with_capacity(rows);

    for (r, (image, plan)) in images.iter().zip(plans).enumerate() {
        let pass = mim_forward::<f32>(image, model, &checkpoint.params, plan, false)?;
        let raw = ImageTensor::new(side, side, pass.reconstruction.into_data())?;
        masked_l1.push(mim_loss(&raw, image, plan, p)?.loss);

        let mut masked = image.clone();
        let mut recon = image.clone();
        for &m in plan.masked() {
            let (gy, gx) = (m / grid, m % grid);
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    masked.set_pixel(y, x, [gray; 3]);
                    let v = raw.pixel(y, x).map(|c| c.clamp(0.0, 1.0));
                    recon.set_pixel(y, x, v);
                }
            }
        }
        let top = r * (side + GUTTER);
        paste(&mut panel, image, top, 0);
        paste(&mut panel, &masked, top, side + GUTTER);
        paste(&mut panel, &recon, top, 2 * (side + GUTTER));
    }
    if let Some(path) = out {
        write_ppm(path, &panel)?;
    }
    Ok(ReconstructionPanel { image: panel, masked_l1 })
}

/// Ramp index of one attention score on an `n`-cell map.
///
/// The score is compared against the uniform level `1/n`:
/// `t = s·n / (s·n + 1)`, so a uniform map sits at mid-ramp, a cell with no
/// attention at index 0 and a cell holding all of it near the top. The
/// mapping is strictly increasing in `s` and independent of the other
/// cells, so near-uniform maps stay visibly flat.
pub fn ramp_index(score: f64, n: usize) -> usize {
    let r = score.max(0.0) * n as f64;
    let t = r / (r + 1.0);
    ((t * (RAMP_LEN - 1) as f64).round() as usize).min(RAMP_LEN - 1)
}

/// "Hot" colour ramp: black → red → yellow → white. Every channel is
/// non-decreasing in the index.
pub fn ramp_color(index: usize) -> [f32; 3] {
    let t = index.min(RAMP_LEN - 1) as f32 / (RAMP_LEN - 1) as f32;
    [
        (3.0 * t).clamp(0.0, 1.0),
        (3.0 * t - 1.0).clamp(0.0, 1.0),
        (3.0 * t - 2.0).clamp(0.0, 1.0),
    ]
}

pub struct AttentionRender {
    /// Input | gutter | heat map.
    pub image: ImageTensor,
    /// Head-averaged last-layer scores on the patch grid (row-major).
    pub scores: Vec<f32>,
    /// Ramp index of every grid cell.
    pub ramp: Vec<usize>,
}

/// Attention of patch `ref_patch` over the grid, upsampled nearest-neighbour
/// to the image size and shown next to the input.
pub fn render_attention_map(
    checkpoint: &ModelCheckpoint,
    image: &ImageTensor,
    ref_patch: usize,
    out: Option<&Path>,
) -> Result<AttentionRender> {
    let model = &checkpoint.meta.model;
    let scores = extract_attention_map(image, ref_patch, model, &checkpoint.params)?;
    let n = scores.len();
    let ramp: Vec<usize> = scores.iter().map(|&s| ramp_index(s as f64, n)).collect();
    let (side, p, grid) = (model.image_size, model.patch_size, model.grid());
    let mut canvas = ImageTensor::filled(side, 2 * side + GUTTER, 1.0);
    paste(&mut canvas, image, 0, 0);
    for y in 0..side {
        for x in 0..side {
            let cell = (y / p) * grid + x / p;
            canvas.set_pixel(y, side + GUTTER + x, ramp_color(ramp[cell]));
        }
    }
    if let Some(path) = out {
        write_ppm(path, &canvas)?;
    }
    Ok(AttentionRender {
        image: canvas,
        scores,
        ramp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;

    fn checkpoint(seed: u64) -> ModelCheckpoint {
        let cfg = VitConfig::nano();
        let params = cfg.init_pretrain(&Rng::new(seed)).unwrap();
        ModelCheckpoint::new(cfg, params)
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        ImageTensor::new(32, 32, (0..32 * 32 * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn ramp_is_monotone_and_centred() {
        let mut last = 0;
        for i in 0..=1000 {
            let idx = ramp_index(i as f64 / 1000.0, 16);
            assert!(idx >= last);
            last = idx;
        }
        assert_eq!(ramp_index(0.0, 16), 0);
        assert_eq!(ramp_index(1.0 / 16.0, 16), 128);
        for i in 1..RAMP_LEN {
            let (a, b) = (ramp_color(i - 1), ramp_color(i));
            assert!((0..3).all(|c| b[c] >= a[c]));
        }
    }

    #[test]
    fn panel_layout_and_fill() {
        let ckpt = checkpoint(1);
        let imgs = [image(2), image(3)];
        let plans = sample_plans(2, 16, 0.75, 4).unwrap();
        let panel = render_reconstruction_panel(&ckpt, &imgs, &plans, None).unwrap();
        assert_eq!(panel.image.width(), 3 * 32 + 2 * GUTTER);
        assert_eq!(panel.image.height(), 2 * 32 + GUTTER);
        let gray = MASK_GRAY as f32 / 255.0;
        for (r, plan) in plans.iter().enumerate() {
            let top = r * (32 + GUTTER);
            for y in 0..32 {
                for x in 0..32 {
                    let cell = (y / 8) * 4 + x / 8;
                    let masked = panel.image.pixel(top + y, 32 + GUTTER + x);
                    let recon = panel.image.pixel(top + y, 2 * (32 + GUTTER) + x);
                    if plan.is_masked(cell) {
                        assert_eq!(masked, [gray; 3]);
                    } else {
                        assert_eq!(masked, imgs[r].pixel(y, x));
                        assert_eq!(recon, imgs[r].pixel(y, x));
                    }
                    assert_eq!(panel.image.pixel(top + y, x), imgs[r].pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn panel_needs_decoder() {
        let mut ckpt = checkpoint(1);
        ckpt.params.retain_without_prefix(crate::vit::DECODER_PREFIX);
        let plans = sample_plans(1, 16, 0.75, 0).unwrap();
        assert!(render_reconstruction_panel(&ckpt, &[image(1)], &plans, None).is_err());
    }

    #[test]
    fn untrained_attention_is_flat() {
        let r = render_attention_map(&checkpoint(5), &image(6), 5, None).unwrap();
        assert_eq!((r.image.width(), r.image.height()), (2 * 32 + GUTTER, 32));
        let sum: f64 = r.scores.iter().map(|&s| s as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let spread = r.ramp.iter().max().unwrap() - r.ramp.iter().min().unwrap();
        assert!((spread as f64) < 0.1 * RAMP_LEN as f64, "spread {spread}");
        assert!(render_attention_map(&checkpoint(5), &image(6), 16, None).is_err());
    }
}
