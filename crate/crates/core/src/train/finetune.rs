//! Fine-tuning: decoder removal, task heads, label smoothing and mixup.

use super::checkpoint::check_shapes;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Graph, Real, Rng, Tensor};
use crate::vit::{patchify, Bound, HeadSpec, ParamTable, VitConfig, DECODER_PREFIX, ENCODER_PREFIX, HEAD_PREFIX};

/// Encoder weights from `params` plus a freshly initialised `head`.
/// Decoder and any previous head are discarded.
pub fn build_finetune_model(
    config: &VitConfig,
    params: &ParamTable<f32>,
    head: HeadSpec,
    rng: &Rng,
) -> Result<ParamTable<f32>> {
    let mut table = params.with_prefix(ENCODER_PREFIX);
    if table.is_empty() {
        return Err(Error::Incompatible("checkpoint contains no encoder tensors".into()));
    }
    let expected: Vec<_> = config
        .finetune_shapes(head)
        .into_iter()
        .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
        .collect();
    check_shapes(&table, &expected)?;
    config.init_head(head, &rng.substream("head"), &mut table)?;
    debug_assert!(table.names().all(|n| !n.starts_with(DECODER_PREFIX)));
    Ok(table)
}

/// `1 − s` on `label`, `s/(K−1)` on every other class.
pub fn smoothed_target(label: usize, classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let off = if classes > 1 { smoothing / (classes - 1) as f64 } else { 0.0 };
    let mut t = vec![off; classes];
    t[label] = 1.0 - smoothing;
    Ok(t)
}

/// Cross-entropy of `logits` against an arbitrary target distribution.
/// Zero-weight classes are skipped, so `-inf` logits there are allowed.
pub fn soft_target_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logits, {} targets", logits.len(), target.len()),
        ));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&z, &t)| -t * (z - lse))
        .sum())
}

/// Cross-entropy against the smoothed one-hot target of `label`.
pub fn supervised_loss(logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    soft_target_loss(logits, &smoothed_target(label, logits.len(), smoothing)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub images: Vec<ImageTensor>,
    pub targets: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Item `i` was mixed with item `partner[i]`.
    pub partner: Vec<usize>,
    /// Set when the batch was passed through unmixed.
    pub warning: Option<String>,
}

/// Convex combination of every item with `partner[i]` at weight `lambda`.
pub fn mix_with(images: &[ImageTensor], targets: &[Vec<f64>], lambda: f64, partner: &[usize]) -> Result<Mixed> {
    if images.len() != targets.len() || images.len() != partner.len() {
        return Err(Error::invalid("mixup: images, targets and partners differ in length"));
    }
    let lam = lambda as f32;
    let mut out_images = Vec::with_capacity(images.len());
    let mut out_targets = Vec::with_capacity(images.len());
    for (i, &j) in partner.iter().enumerate() {
        let (a, b) = (&images[i], &images[j]);
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::shape("mixup", "images differ in size"));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (lam * x + (1.0 - lam) * y).clamp(0.0, 1.0))
            .collect();
        out_images.push(ImageTensor::new(a.height(), a.width(), data)?);
        out_targets.push(
            targets[i]
                .iter()
                .zip(&targets[j])
                .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
                .collect(),
        );
    }
    Ok(Mixed {
        images: out_images,
        targets: out_targets,
        lambda,
        partner: partner.to_vec(),
        warning: None,
    })
}

/// λ ~ Beta(α, α); each item is mixed with a shuffled copy of the batch.
/// A batch of one is passed through with a warning.
pub fn mixup_batch(images: &[ImageTensor], targets: &[Vec<f64>], alpha: f64, rng: &mut Rng) -> Result<Mixed> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("mixup alpha {alpha} must be positive")));
    }
    if images.len() < 2 {
        return Ok(Mixed {
            images: images.to_vec(),
            targets: targets.to_vec(),
            lambda: 1.0,
            partner: (0..images.len()).collect(),
            warning: Some(format!("mixup skipped: batch of {}", images.len())),
        });
    }
    let lambda = rng.beta(alpha, alpha)?;
    let partner = rng.permutation(images.len());
    mix_with(images, targets, lambda, &partner)
}

pub struct FinetunePass<F: Real> {
    pub loss: F,
    /// `[1, K]` for classification, `[N, K]` for segmentation.
    pub logits: Tensor<F>,
    pub grads: Option<ParamTable<F>>,
}

/// Full-image forward through encoder and head. `target` holds one soft
/// distribution per output row (`K` values for classification, `N·K` for
/// segmentation); `None` skips the loss.
pub fn finetune_forward<F: Real>(
    image: &ImageTensor,
    config: &VitConfig,
    params: &ParamTable<F>,
    head: HeadSpec,
    target: Option<&[f64]>,
    with_grad: bool,
) -> Result<FinetunePass<F>> {
    let tokens = patchify::<F>(image, config.patch_size)?;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, config, params);
    let x = b.embed(&mut g, &tokens)?;
    let encoded = b.encode(&mut g, x, None)?;
    let logits = match head {
        HeadSpec::Classification { .. } => b.classify(&mut g, encoded)?,
        HeadSpec::Segmentation { .. } => b.segment(&mut g, encoded)?,
    };
    let shape = g.value(logits).shape().to_vec();
    let Some(target) = target else {
        return Ok(FinetunePass {
            loss: F::zero(),
            logits: g.value(logits).clone(),
            grads: None,
        });
    };
    let t = Tensor::new(shape, target.iter().map(|&v| F::lit(v)).collect())?;
    let loss = g.soft_cross_entropy(logits, &t)?;
    let grads = if with_grad {
        let mut grads = g.backward(loss)?;
        let mut table = ParamTable::new();
        for (name, p) in params.iter() {
            if !name.starts_with(ENCODER_PREFIX) && !name.starts_with(HEAD_PREFIX) {
                continue;
            }
            let gr = grads.take(b.var(name)?).unwrap_or_else(|| vec![F::zero(); p.numel()]);
            table.insert(name, Tensor::new(p.shape().to_vec(), gr)?);
        }
        Some(table)
    } else {
        None
    };
    Ok(FinetunePass {
        loss: g.value(loss).data()[0],
        logits: g.value(logits).clone(),
        grads,
    })
}

/// Logits without building gradients.
pub fn predict(image: &ImageTensor, config: &VitConfig, params: &ParamTable<f32>, head: HeadSpec) -> Result<Vec<f32>> {
    Ok(finetune_forward(image, config, params, head, None, false)?.logits.into_data())
}
