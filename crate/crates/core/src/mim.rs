//! Masked image modeling: shuffle masking, visible-token selection and the
//! masked-pixel L1 reconstruction loss normalized by the masked-pixel count.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Graph, Real, Rng, Tensor};
use crate::vit::{patchify, Bound, ParamTable, TokenSequence, VitConfig};

/// Split of `0..n` into masked and visible token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    n: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
    permutation: Vec<usize>,
}

impl MaskPlan {
    /// Plan from a shuffle: the first `masked_count` entries are masked.
    pub fn from_permutation(permutation: Vec<usize>, masked_count: usize) -> Result<Self> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &i in &permutation {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("not a permutation of 0..{n}")));
            }
        }
        if masked_count >= n {
            return Err(Error::invalid(format!(
                "masking {masked_count} of {n} tokens leaves nothing visible"
            )));
        }
        let mut masked = permutation[..masked_count].to_vec();
        let mut visible = permutation[masked_count..].to_vec();
        masked.sort_unstable();
        visible.sort_unstable();
        Ok(Self {
            n,
            masked,
            visible,
            permutation,
        })
    }

    /// Plan masking exactly `masked` (any order, no duplicates).
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &m in masked {
            if m >= n {
                return Err(Error::invalid(format!("masked index {m} outside 0..{n}")));
            }
            is_masked[m] = true;
        }
        let perm = masked
            .iter()
            .copied()
            .chain((0..n).filter(|&i| !is_masked[i]))
            .collect();
        Self::from_permutation(perm, masked.len())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Masked indices `M`, ascending.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Visible indices `M̃`, ascending.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Per-value mask over an `H×W×3` image for patch size `p`.
    pub fn pixel_mask(&self, side: usize, p: usize) -> Result<Vec<bool>> {
        let grid = side / p.max(1);
        if p == 0 || grid * p != side || grid * grid != self.n {
            return Err(Error::shape(
                "mask plan",
                format!("{} tokens do not tile a {side}px image with {p}px patches", self.n),
            ));
        }
        let mut mask = vec![false; side * side * 3];
        for &m in &self.masked {
            let (gy, gx) = (m / grid, m % grid);
            for y in gy * p..(gy + 1) * p {
                let start = (y * side + gx * p) * 3;
                mask[start..start + p * 3].fill(true);
            }
        }
        Ok(mask)
    }
}

/// Number of masked tokens for `ratio` over `n` tokens: `floor(ratio·n)`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).floor() as usize
}

/// Uniform shuffle masking: the first `floor(ratio·n)` entries of a random
/// permutation are masked.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::invalid("cannot mask an empty token grid"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} must lie in [0, 1); ratio 1 leaves no visible tokens"
        )));
    }
    let perm = rng.permutation(n);
    MaskPlan::from_permutation(perm, masked_count(n, ratio))
}

/// Tokens at `M̃` in ascending index order, carrying their grid positions.
pub fn select_visible<F: Real>(tokens: &TokenSequence<F>, plan: &MaskPlan) -> Result<TokenSequence<F>> {
    if tokens.len() != plan.n() {
        return Err(Error::shape(
            "select_visible",
            format!("{} tokens but plan covers {}", tokens.len(), plan.n()),
        ));
    }
    let dim = tokens.dim();
    let mut data = Vec::with_capacity(plan.visible().len() * dim);
    for &i in plan.visible() {
        data.extend_from_slice(tokens.tokens.row(i));
    }
    Ok(TokenSequence {
        tokens: Tensor::new(vec![plan.visible().len(), dim], data)?,
        positions: plan.visible().iter().map(|&i| tokens.positions[i]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MimLossReport {
    /// Mean absolute error over masked pixel values.
    pub loss: f64,
    /// Number of masked pixel values, `|M|·p²·3`.
    pub alpha: usize,
    /// Mean absolute error inside each masked patch, in `plan.masked()` order.
    pub per_patch: Vec<f64>,
}

fn check_pair(y: &ImageTensor, x: &ImageTensor) -> Result<()> {
    if y.height() != x.height() || y.width() != x.width() {
        return Err(Error::shape(
            "mim_loss",
            format!(
                "prediction {}x{} vs target {}x{}",
                y.height(),
                y.width(),
                x.height(),
                x.width()
            ),
        ));
    }
    if !x.is_square() {
        return Err(Error::shape("mim_loss", "images must be square"));
    }
    Ok(())
}

/// `(1/α) Σ_{masked pixels} |Y − X|` with per-patch diagnostics.
pub fn mim_loss(y: &ImageTensor, x: &ImageTensor, plan: &MaskPlan, p: usize) -> Result<MimLossReport> {
    check_pair(y, x)?;
    let side = x.width();
    plan.pixel_mask(side, p)?;
    let grid = side / p;
    let per_patch: Vec<f64> = plan
        .masked()
        .iter()
        .map(|&m| {
            let (gy, gx) = (m / grid, m % grid);
            let mut sum = 0.0f64;
            for yy in gy * p..(gy + 1) * p {
                let start = (yy * side + gx * p) * 3;
                for i in start..start + p * 3 {
                    sum += (y.data()[i] as f64 - x.data()[i] as f64).abs();
                }
            }
            sum
        })
        .collect();
    let alpha = plan.masked().len() * p * p * 3;
    let total: f64 = per_patch.iter().sum();
    let patch_pixels = (p * p * 3) as f64;
    Ok(MimLossReport {
        loss: if alpha == 0 { 0.0 } else { total / alpha as f64 },
        alpha,
        per_patch: per_patch.into_iter().map(|s| s / patch_pixels).collect(),
    })
}

/// Analytic gradient of [`mim_loss`] with respect to `Y`: `sign(Y−X)/α` at
/// masked pixels (0 where `Y == X`), zero elsewhere.
pub fn mim_loss_grad(y: &ImageTensor, x: &ImageTensor, plan: &MaskPlan, p: usize) -> Result<ImageTensor> {
    check_pair(y, x)?;
    let mask = plan.pixel_mask(x.width(), p)?;
    let alpha = (plan.masked().len() * p * p * 3).max(1) as f32;
    let data = y
        .data()
        .iter()
        .zip(x.data())
        .zip(&mask)
        .map(|((&a, &b), &m)| {
            if !m || a == b {
                0.0
            } else if a > b {
                1.0 / alpha
            } else {
                -1.0 / alpha
            }
        })
        .collect();
    ImageTensor::new(y.height(), y.width(), data)
}

/// Result of one forward (and optionally backward) MIM pass.
pub struct MimPass<F: Real> {
    pub loss: F,
    pub reconstruction: Tensor<F>,
    /// Gradient per parameter name; absent when not requested.
    pub grads: Option<ParamTable<F>>,
}

/// Patchify → select visible → embed → encode → decode → masked L1.
pub fn mim_forward<F: Real>(
    image: &ImageTensor,
    config: &VitConfig,
    params: &ParamTable<F>,
    plan: &MaskPlan,
    with_grad: bool,
) -> Result<MimPass<F>> {
    let p = config.patch_size;
    if image.width() != config.image_size || !image.is_square() {
        return Err(Error::shape(
            "mim_forward",
            format!(
                "image {}x{} vs model size {}",
                image.height(),
                image.width(),
                config.image_size
            ),
        ));
    }
    let tokens = patchify::<F>(image, p)?;
    let visible = select_visible(&tokens, plan)?;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, config, params);
    let x = b.embed(&mut g, &visible)?;
    let latent = b.encode(&mut g, x, None)?;
    let y = b.decode(&mut g, latent, plan.visible())?;
    let side = config.image_size;
    let target = Tensor::new(
        vec![side, side, 3],
        image.data().iter().map(|&v| F::lit(v as f64)).collect(),
    )?;
    let mask = plan.pixel_mask(side, p)?;
    let alpha = plan.masked().len() * p * p * 3;
    let loss = g.masked_l1(y, &target, &mask, F::lit(alpha.max(1) as f64))?;
    let grads = if with_grad {
        let mut grads = g.backward(loss)?;
        let mut table = ParamTable::new();
        for (name, t) in params.iter() {
            let gr = grads
                .take(b.var(name)?)
                .unwrap_or_else(|| vec![F::zero(); t.numel()]);
            table.insert(name, Tensor::new(t.shape().to_vec(), gr)?);
        }
        Some(table)
    } else {
        None
    };
    Ok(MimPass {
        loss: g.value(loss).data()[0],
        reconstruction: g.value(y).clone(),
        grads,
    })
}

/// One MIM step on `image`: samples a mask from `rng`, runs the model and
/// returns the loss report together with gradients of every parameter.
pub struct MimStep {
    pub report: MimLossReport,
    pub plan: MaskPlan,
    pub reconstruction: ImageTensor,
    pub grads: ParamTable<f32>,
}

pub fn mim_step(
    image: &ImageTensor,
    config: &VitConfig,
    params: &ParamTable<f32>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MimStep> {
    if !image.in_unit_range() {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    let plan = sample_mask(config.num_patches(), ratio, rng)?;
    let pass = mim_forward(image, config, params, &plan, true)?;
    let side = config.image_size;
    let reconstruction = ImageTensor::new(side, side, pass.reconstruction.into_data())?;
    let report = mim_loss(&reconstruction, image, &plan, config.patch_size)?;
    Ok(MimStep {
        report,
        plan,
        reconstruction,
        grads: pass.grads.expect("gradients were requested"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(side: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        ImageTensor::new(side, side, (0..side * side * 3).map(|_| rng.uniform() as f32).collect())
            .unwrap()
    }

    #[test]
    fn mask_counts() {
        let mut rng = Rng::new(0);
        let plan = sample_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked().len(), 147);
        assert_eq!(plan.visible().len(), 49);
        let plan = sample_mask(16, 0.0, &mut rng).unwrap();
        assert!(plan.masked().is_empty());
        assert_eq!(plan.visible(), (0..16).collect::<Vec<_>>());
        assert!(sample_mask(16, 1.0, &mut rng).is_err());
        assert!(sample_mask(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn plan_partitions_indices() {
        let mut rng = Rng::new(4);
        for n in 1..200 {
            let plan = sample_mask(n, 0.75, &mut rng).unwrap();
            let mut all: Vec<usize> = plan.masked().iter().chain(plan.visible()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let mut perm = plan.permutation().to_vec();
            perm.sort_unstable();
            assert_eq!(perm, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let a = sample_mask(64, 0.75, &mut Rng::new(8)).unwrap();
        let b = sample_mask(64, 0.75, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_visible_gathers_rows() {
        let img = random_image(32, 1);
        let toks = patchify::<f32>(&img, 8).unwrap();
        let plan = MaskPlan::from_masked(16, &[0, 3, 7, 9]).unwrap();
        let vis = select_visible(&toks, &plan).unwrap();
        assert_eq!(vis.len(), 12);
        for (row, &i) in plan.visible().iter().enumerate() {
            assert_eq!(vis.tokens.row(row), toks.tokens.row(i));
            assert_eq!(vis.positions[row], i);
        }
        let none = MaskPlan::from_masked(16, &[]).unwrap();
        assert_eq!(select_visible(&toks, &none).unwrap(), toks);
        let wrong = MaskPlan::from_masked(9, &[0]).unwrap();
        assert!(select_visible(&toks, &wrong).is_err());
    }

    #[test]
    fn half_error_on_one_patch() {
        let x = ImageTensor::filled(32, 32, 0.25);
        let mut y = x.clone();
        // Patch 5 at grid (1, 1) of a 16px-patch 2x2 grid.
        let plan = MaskPlan::from_masked(4, &[3]).unwrap();
        for yy in 16..32 {
            for xx in 16..32 {
                y.set_pixel(yy, xx, [0.75; 3]);
            }
        }
        let r = mim_loss(&y, &x, &plan, 16).unwrap();
        assert_eq!(r.loss, 0.5);
        assert_eq!(r.alpha, 768);
        assert_eq!(r.per_patch, vec![0.5]);
    }

    #[test]
    fn unmasked_pixels_do_not_matter() {
        let x = random_image(32, 2);
        let plan = MaskPlan::from_masked(16, &[1, 2, 12]).unwrap();
        let y = random_image(32, 3);
        let base = mim_loss(&y, &x, &plan, 8).unwrap();
        let mask = plan.pixel_mask(32, 8).unwrap();
        let mut y2 = y.clone();
        for (i, v) in y2.data_mut().iter_mut().enumerate() {
            if !mask[i] {
                *v = 1.0 - *v;
            }
        }
        assert_eq!(mim_loss(&y2, &x, &plan, 8).unwrap(), base);
        assert_eq!(mim_loss(&x, &x, &plan, 8).unwrap().loss, 0.0);
    }

    #[test]
    fn loss_gradient_is_local_and_matches_differences() {
        let x = random_image(16, 5);
        let y = random_image(16, 6);
        let plan = MaskPlan::from_masked(4, &[0, 3]).unwrap();
        let grad = mim_loss_grad(&y, &x, &plan, 8).unwrap();
        let mask = plan.pixel_mask(16, 8).unwrap();
        let alpha = 2.0 * 192.0;
        for i in 0..y.data().len() {
            if mask[i] {
                assert_eq!(grad.data()[i].abs(), 1.0 / alpha as f32);
            } else {
                assert_eq!(grad.data()[i], 0.0);
            }
            // Central difference in f64 on the loss definition.
            let h = 1e-4f32;
            let mut up = y.clone();
            up.data_mut()[i] += h;
            let mut down = y.clone();
            down.data_mut()[i] -= h;
            let cd = (mim_loss(&up, &x, &plan, 8).unwrap().loss
                - mim_loss(&down, &x, &plan, 8).unwrap().loss)
                / (up.data()[i] as f64 - down.data()[i] as f64);
            assert!((cd - grad.data()[i] as f64).abs() < 1e-6, "pixel {i}: {cd}");
        }
    }

    #[test]
    fn loss_matches_weighted_patch_mean() {
        let x = random_image(32, 7);
        let y = random_image(32, 8);
        let plan = sample_mask(16, 0.75, &mut Rng::new(1)).unwrap();
        let r = mim_loss(&y, &x, &plan, 8).unwrap();
        let mean = r.per_patch.iter().sum::<f64>() / r.per_patch.len() as f64;
        assert!((mean - r.loss).abs() < 1e-12);
        assert_eq!(r.alpha, 12 * 192);
    }

    #[test]
    fn step_is_finite_positive_and_reproducible() {
        let c = VitConfig::nano();
        let params = c.init_pretrain(&Rng::new(1)).unwrap();
        let img = random_image(32, 11);
        let a = mim_step(&img, &c, &params, 0.75, &mut Rng::new(3)).unwrap();
        let b = mim_step(&img, &c, &params, 0.75, &mut Rng::new(3)).unwrap();
        assert!(a.report.loss.is_finite() && a.report.loss > 0.0);
        assert_eq!(a.report.loss.to_bits(), b.report.loss.to_bits());
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.grads.len(), params.len());
    }

    mod props {
        use super::*;
        use crate::tensor::Rng;
        use proptest::prelude::*;

        /// Moves patch `i` of `img` to position `perm[i]`.
        fn permute_patches(img: &ImageTensor, perm: &[usize], p: usize) -> ImageTensor {
            let grid = img.width() / p;
            let mut out = img.clone();
            for (i, &j) in perm.iter().enumerate() {
                for y in 0..p {
                    for x in 0..p {
                        let px = img.pixel((i / grid) * p + y, (i % grid) * p + x);
                        out.set_pixel((j / grid) * p + y, (j % grid) * p + x, px);
                    }
                }
            }
            out
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn alpha_counts_masked_pixels(seed in any::<u64>(), grid in 1usize..6, p in 1usize..5, ratio in 0.0f64..0.95) {
                let n = grid * grid;
                let plan = sample_mask(n, ratio, &mut Rng::new(seed)).unwrap();
                let side = grid * p;
                let r = mim_loss(&random_image(side, seed), &random_image(side, seed ^ 1), &plan, p).unwrap();
                prop_assert_eq!(r.alpha, plan.masked().len() * p * p * 3);
                prop_assert_eq!(plan.masked().len(), masked_count(n, ratio));
            }

            #[test]
            fn loss_ignores_patch_order(seed in any::<u64>()) {
                let (side, p) = (16, 4);
                let mut rng = Rng::new(seed);
                let plan = sample_mask(16, 0.5, &mut rng).unwrap();
                let mut perm: Vec<usize> = (0..16).collect();
                for i in (1..16).rev() {
                    perm.swap(i, rng.below(i + 1));
                }
                let (x, y) = (random_image(side, seed), random_image(side, seed.wrapping_add(1)));
                let moved: Vec<usize> = plan.masked().iter().map(|&m| perm[m]).collect();
                let moved_plan = MaskPlan::from_masked(16, &moved).unwrap();
                let a = mim_loss(&y, &x, &plan, p).unwrap().loss;
                let b = mim_loss(&permute_patches(&y, &perm, p), &permute_patches(&x, &perm, p), &moved_plan, p)
                    .unwrap()
                    .loss;
                prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            }
        }
    }
}
