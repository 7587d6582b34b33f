//! Reconstruction and localisation metrics.

use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::tensor::{Element, Tensor};

/// Value written in place of +∞ for exact reconstructions.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB of two [-1, 1] images after mapping both to [0, 1] and clamping.
/// Exact agreement gives `f64::INFINITY`.
pub fn psnr<T: Element>(x: &Tensor<T>, xh: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(xh)?;
    if x.numel() == 0 {
        return Err(Error::shape("PSNR of an empty image"));
    }
    let unit = |v: T| ((v.as_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
    let mse = x
        .data()
        .iter()
        .zip(xh.data())
        .map(|(&a, &b)| (unit(a) - unit(b)).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

/// |ψ| > mean |ψ| over one H×W (or 1×H×W) map.
pub fn distinction_mask<T: Element>(psi: &Tensor<T>) -> Result<Mask> {
    let (h, w) = match *psi.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "distinction map must be single-channel, got {:?}",
                psi.shape()
            )))
        }
    };
    let mean = psi.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / (h * w) as f64;
    Mask::from_bits(h, w, psi.data().iter().map(|v| v.abs().as_f64() > mean).collect())
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape("IoU of masks with different sizes"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Rank-based area under the ROC curve with tied scores sharing their mean rank.
/// Returns 0.5 when the labels are all equal.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("AUROC: scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(0.5);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: positions i..=j share (i + j) / 2 + 1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// (IoU of the distinction mask, AUROC of |ψ|) against a ground-truth mask.
pub fn localization_metrics<T: Element>(psi: &Tensor<T>, gt: &Mask) -> Result<(f64, f64)> {
    let pred = distinction_mask(psi)?;
    let i = iou(&pred, gt)?;
    let scores: Vec<f64> = psi.data().iter().map(|v| v.abs().as_f64()).collect();
    let a = auroc(&scores, gt.bits())?;
    Ok((i, a))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
