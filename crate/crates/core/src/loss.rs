//! Hybrid segmentation loss: boundary-weighted BCE, weighted IoU and an
//! enhanced-alignment term, summed over pyramid levels and frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRED_CLAMP: f64 = 1e-7;
pub const ALIGN_EPS: f64 = 1e-8;
const POOL: usize = 31;

/// `1 + 5 |avgpool31(gt) - gt|` with zero padding counted in the average.
/// Works on the last two axes of `gt`.
pub fn pixel_weights(gt: &Tensor) -> Result<Tensor> {
    if gt.rank() < 2 {
        return Err(Error::shape("pixel_weights", format!("{:?}", gt.shape())));
    }
    let r = gt.rank();
    let (h, w) = (gt.shape()[r - 2], gt.shape()[r - 1]);
    let planes = gt.numel() / (h * w).max(1);
    let half = POOL / 2;
    let area = (POOL * POOL) as f64;
    let mut out = Vec::with_capacity(gt.numel());
    for p in 0..planes {
        let g = &gt.data()[p * h * w..(p + 1) * h * w];
        // summed-area table with a zero row and column in front
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                sat[(i + 1) * (w + 1) + j + 1] =
                    g[i * w + j] + sat[i * (w + 1) + j + 1] + sat[(i + 1) * (w + 1) + j] - sat[i * (w + 1) + j];
            }
        }
        for i in 0..h {
            let (r0, r1) = (i.saturating_sub(half), (i + half + 1).min(h));
            for j in 0..w {
                let (c0, c1) = (j.saturating_sub(half), (j + half + 1).min(w));
                let s =
                    sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0] + sat[r0 * (w + 1) + c0];
                out.push(1.0 + 5.0 * (s / area - g[i * w + j]).abs());
            }
        }
    }
    Tensor::new(out, gt.shape())
}

/// Per-map loss terms, each of shape `[M]` for `M` maps.
pub struct HybridTerms {
    pub bce: Tensor,
    pub iou: Tensor,
    pub align: Tensor,
}

impl HybridTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(self.bce.add(&self.iou)?.add(&self.align)?.sum_all())
    }
}

/// Loss terms for `M` maps laid out as `[M, H, W]` (or a single `[H, W]`).
pub fn hybrid_terms(pred: &Tensor, gt: &Tensor) -> Result<HybridTerms> {
    if pred.shape() != gt.shape() || pred.rank() < 2 {
        return Err(Error::shape("hybrid_loss", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let r = pred.rank();
    let hw = pred.shape()[r - 2] * pred.shape()[r - 1];
    let maps = pred.numel() / hw;
    let flat = [maps, hw];
    let w = pixel_weights(gt)?.reshape(&flat)?;
    let g = gt.reshape(&flat)?;
    let p = pred.reshape(&flat)?.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    let one_minus_g = g.rsub_scalar(1.0);

    let bce = g.mul(&p.log())?.add(&one_minus_g.mul(&p.rsub_scalar(1.0).log())?)?.neg();
    let wsum = w.sum_axis(1, false)?;
    let bce = w.mul(&bce)?.sum_axis(1, false)?.div(&wsum)?;

    let pg = p.mul(&g)?;
    let inter = w.mul(&pg)?.sum_axis(1, false)?;
    let union = w.mul(&p.add(&g)?.sub(&pg)?)?.sum_axis(1, false)?;
    let iou = inter.div(&union)?.rsub_scalar(1.0);

    let a = p.sub(&p.mean_axis(1, true)?)?;
    let b = g.sub(&g.mean_axis(1, true)?)?;
    let xi = a.mul(&b)?.scale(2.0).div(&a.square().add(&b.square())?.add_scalar(ALIGN_EPS))?;
    let phi = xi.add_scalar(1.0).square().scale(0.25);
    let align = phi.mean_axis(1, false)?.rsub_scalar(1.0);
    Ok(HybridTerms { bce, iou, align })
}

/// Sum of the three terms for one map (or summed over a stack of maps).
pub fn hybrid_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    hybrid_terms(pred, gt)?.total()
}

/// Four levels (or any count) of `[N, 1, H, W]` probability maps against
/// `[N, 1, H, W]` masks: plain double sum of per-frame hybrid losses.
pub fn total_loss(levels: &[Tensor], gts: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for level in levels {
        if level.shape() != gts.shape() {
            return Err(Error::shape("total_loss", format!("level {:?} vs masks {:?}", level.shape(), gts.shape())));
        }
        let l = hybrid_loss(level, gts)?;
        acc = Some(match acc {
            Some(a) => a.add(&l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::shape("total_loss", "no pyramid levels"))
}
