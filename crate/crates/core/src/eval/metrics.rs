//! Top-1 accuracy and mean intersection-over-union.

use crate::error::{Error, Result};

/// Index of the largest value; ties resolve to the lowest index. NaN never wins.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            None if v == v => best = Some(i),
            Some(b) if *v > values[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy<T: PartialOrd + Copy>(logits: &[Vec<T>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("top-1 accuracy of an empty set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape(
            "top1",
            format!("{} predictions, {} labels", logits.len(), labels.len()),
        ));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == Some(label))
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

/// Per-class IoU for every class present in `pred` or `gt`.
pub fn class_iou(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mean_iou", format!("pred {} cells, gt {} cells", pred.len(), gt.len())));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v >= classes) {
        return Err(Error::invalid(format!("class {bad} out of range for {classes} classes")));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect())
}

/// Mean IoU over classes present in either map. Empty grids are an error.
pub fn mean_iou(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let ious: Vec<f64> = class_iou(pred, gt, classes)?.into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::invalid("mean IoU of empty grids"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
