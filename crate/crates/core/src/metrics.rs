//! The six evaluation metrics: S-measure, weighted F-measure, mean
//! E-measure, MAE, Dice and IoU. All work on a single `H x W` map pair.

use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;
const S_ALPHA: f64 = 0.5;

/// A prediction in `[0, 1]` and a binary mask of equal size, row-major.
#[derive(Debug, Clone, Copy)]
pub struct MaskPair<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    pub h: usize,
    pub w: usize,
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a [f64], gt: &'a [f64], h: usize, w: usize) -> Result<Self> {
        if pred.len() != h * w || gt.len() != h * w || h * w == 0 {
            return Err(Error::shape("evaluate", format!("pred {} / gt {} values for {h}x{w}", pred.len(), gt.len())));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("prediction value {v} outside [0, 1]")));
        }
        if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(Self { pred, gt, h, w })
    }

    fn fg(&self, i: usize) -> bool {
        self.gt[i] > 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
    pub mae: f64,
    pub mdice: f64,
    pub miou: f64,
}

impl Metrics {
    pub const COLUMNS: [&'static str; 6] = ["S_alpha", "F_beta_w", "E_phi", "MAE", "mDice", "mIoU"];

    pub fn values(&self) -> [f64; 6] {
        [self.s_alpha, self.f_beta_w, self.e_phi, self.mae, self.mdice, self.miou]
    }

    pub fn mean(all: &[Metrics]) -> Option<Metrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let mut acc = [0.0; 6];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [s_alpha, f_beta_w, e_phi, mae, mdice, miou] = acc.map(|v| v / n);
        Some(Metrics { s_alpha, f_beta_w, e_phi, mae, mdice, miou })
    }
}

pub fn evaluate(pair: &MaskPair<'_>) -> Metrics {
    let ov = overlap(pair);
    Metrics {
        s_alpha: s_measure(pair),
        f_beta_w: weighted_f_measure(pair),
        e_phi: mean_e_measure(pair),
        mae: mae(pair),
        mdice: ov.dice(),
        miou: ov.iou(),
    }
}

pub fn mae(pair: &MaskPair<'_>) -> f64 {
    pair.pred.iter().zip(pair.gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pair.pred.len() as f64
}

/// Set counts after adaptive binarization of the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub inter: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.pred + self.gt - self.inter
    }

    pub fn dice(&self) -> f64 {
        match self.pred + self.gt {
            0 => 1.0,
            s => 2.0 * self.inter as f64 / s as f64,
        }
    }

    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.inter as f64 / u as f64,
        }
    }
}

/// Threshold `min(2 mean(pred), 1)`; a pixel is foreground when it reaches
/// the threshold and is strictly positive.
pub fn binarize(pred: &[f64]) -> Vec<bool> {
    let thr = (2.0 * pred.iter().sum::<f64>() / pred.len().max(1) as f64).min(1.0);
    pred.iter().map(|&p| p >= thr && p > 0.0).collect()
}

pub fn overlap(pair: &MaskPair<'_>) -> Overlap {
    overlap_binary(&binarize(pair.pred), &(0..pair.gt.len()).map(|i| pair.fg(i)).collect::<Vec<_>>())
}

pub fn overlap_binary(pred: &[bool], gt: &[bool]) -> Overlap {
    let mut o = Overlap { inter: 0, pred: 0, gt: 0 };
    for (&p, &g) in pred.iter().zip(gt) {
        o.inter += usize::from(p && g);
        o.pred += usize::from(p);
        o.gt += usize::from(g);
    }
    o
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Structure measure with `alpha = 0.5`.
pub fn s_measure(pair: &MaskPair<'_>) -> f64 {
    let n = pair.gt.len() as f64;
    let y = pair.gt.iter().sum::<f64>() / n;
    let mean_pred = pair.pred.iter().sum::<f64>() / n;
    if y == 0.0 {
        return 1.0 - mean_pred;
    }
    if y == 1.0 {
        return mean_pred;
    }
    (S_ALPHA * s_object(pair, y) + (1.0 - S_ALPHA) * s_region(pair)).max(0.0)
}

fn s_object(pair: &MaskPair<'_>, u: f64) -> f64 {
    let score = |x: f64, sigma: f64| 2.0 * x / (x * x + 1.0 + sigma + EPS);
    let idx = 0..pair.gt.len();
    let (xf, sf) = mean_std(idx.clone().filter(|&i| pair.fg(i)).map(|i| pair.pred[i]));
    let (xb, sb) = mean_std(idx.filter(|&i| !pair.fg(i)).map(|i| 1.0 - pair.pred[i]));
    u * score(xf, sf) + (1.0 - u) * score(xb, sb)
}

fn s_region(pair: &MaskPair<'_>) -> f64 {
    let (h, w) = (pair.h, pair.w);
    let (mut sr, mut sc, mut count) = (0.0, 0.0, 0usize);
    for i in 0..h * w {
        if pair.fg(i) {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
            count += 1;
        }
    }
    // split point is one past the rounded centroid
    let (cy, cx) = if count == 0 {
        ((h as f64 / 2.0).round_ties_even() as usize, (w as f64 / 2.0).round_ties_even() as usize)
    } else {
        ((sr / count as f64).round_ties_even() as usize + 1, (sc / count as f64).round_ties_even() as usize + 1)
    };
    let (cy, cx) = (cy.min(h), cx.min(w));
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [(0..cy, 0..cx, w1), (0..cy, cx..w, w2), (cy..h, 0..cx, w3), (cy..h, cx..w, w4)];
    quads
        .into_iter()
        .filter(|(r, c, _)| !r.is_empty() && !c.is_empty())
        .map(|(r, c, wt)| {
            let idx: Vec<usize> = r.flat_map(|i| c.clone().map(move |j| i * w + j)).collect();
            wt * ssim(&idx, pair)
        })
        .sum()
}

fn ssim(idx: &[usize], pair: &MaskPair<'_>) -> f64 {
    let n = idx.len() as f64;
    let x = idx.iter().map(|&i| pair.pred[i]).sum::<f64>() / n;
    let y = idx.iter().map(|&i| pair.gt[i]).sum::<f64>() / n;
    let denom = (n - 1.0).max(1.0);
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in idx {
        let (a, b) = (pair.pred[i] - x, pair.gt[i] - y);
        sx += a * a;
        sy += b * b;
        sxy += a * b;
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Mean enhanced-alignment score over the thresholds `k/255`, `k = 1..=255`.
pub fn mean_e_measure(pair: &MaskPair<'_>) -> f64 {
    let n = pair.gt.len();
    let thresholds: Vec<f64> = (1..=255).map(|k| f64::from(k) / 255.0).collect();
    // hist[k] = pixels whose prediction clears exactly k thresholds
    let mut fg_hist = [0usize; 256];
    let mut bg_hist = [0usize; 256];
    for i in 0..n {
        let level = thresholds.partition_point(|&t| t <= pair.pred[i]);
        if pair.fg(i) {
            fg_hist[level] += 1;
        } else {
            bg_hist[level] += 1;
        }
    }
    let g = fg_hist.iter().sum::<usize>();
    let nf = n as f64;
    let phi = |a: f64, c: f64| {
        let xi = 2.0 * a * c / (a * a + c * c + EPS);
        (xi + 1.0).powi(2) / 4.0
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut total = 0.0;
    for k in (1..=255).rev() {
        tp += fg_hist[k];
        fp += bg_hist[k];
        let on = tp + fp;
        let enhanced = if g == 0 {
            (n - on) as f64
        } else if g == n {
            on as f64
        } else {
            let (mb, mg) = (on as f64 / nf, g as f64 / nf);
            let fnn = g - tp;
            let tn = n - on - fnn;
            tp as f64 * phi(1.0 - mb, 1.0 - mg)
                + fp as f64 * phi(1.0 - mb, -mg)
                + fnn as f64 * phi(-mb, 1.0 - mg)
                + tn as f64 * phi(-mb, -mg)
        };
        total += enhanced / nf;
    }
    total / 255.0
}

/// Exact Euclidean distance to the nearest foreground pixel, with that
/// pixel's flat index. Requires at least one foreground pixel.
pub fn distance_to_foreground(fg: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    // columns: nearest foreground row
    let mut col_d = vec![f64::INFINITY; h * w];
    let mut col_row = vec![0usize; h * w];
    for j in 0..w {
        let mut last: Option<usize> = None;
        for i in 0..h {
            if fg[i * w + j] {
                last = Some(i);
            }
            if let Some(r) = last {
                col_d[i * w + j] = ((i - r) * (i - r)) as f64;
                col_row[i * w + j] = r;
            }
        }
        let mut next: Option<usize> = None;
        for i in (0..h).rev() {
            if fg[i * w + j] {
                next = Some(i);
            }
            if let Some(r) = next {
                let d = ((r - i) * (r - i)) as f64;
                if d < col_d[i * w + j] {
                    col_d[i * w + j] = d;
                    col_row[i * w + j] = r;
                }
            }
        }
    }
    // rows: lower envelope of parabolas rooted at finite columns
    let mut dist = vec![0.0; h * w];
    let mut near = vec![0usize; h * w];
    let mut v = Vec::with_capacity(w);
    let mut z = Vec::with_capacity(w + 1);
    for i in 0..h {
        let f = &col_d[i * w..(i + 1) * w];
        v.clear();
        z.clear();
        for q in (0..w).filter(|&q| f[q].is_finite()) {
            let qf = q as f64;
            loop {
                let Some(&p) = v.last() else {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                };
                let pf = p as f64;
                let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                if s <= *z.last().expect("z tracks v") {
                    v.pop();
                    z.pop();
                } else {
                    v.push(q);
                    z.push(s);
                    break;
                }
            }
        }
        let mut k = 0;
        for j in 0..w {
            let jf = j as f64;
            while k + 1 < v.len() && z[k + 1] < jf {
                k += 1;
            }
            let q = v[k];
            let dq = jf - q as f64;
            dist[i * w + j] = (dq * dq + f[q]).sqrt();
            near[i * w + j] = col_row[i * w + q] * w + q;
        }
    }
    (dist, near)
}

/// 7x7 Gaussian with sigma 5, normalized to unit sum.
fn gauss7() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (x, y) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            sum += *v;
        }
    }
    k.map(|r| r.map(|v| v / sum))
}

/// Weighted F-measure with `beta^2 = 1`. An empty mask scores 0.
pub fn weighted_f_measure(pair: &MaskPair<'_>) -> f64 {
    let (h, w) = (pair.h, pair.w);
    let fg: Vec<bool> = (0..h * w).map(|i| pair.fg(i)).collect();
    if !fg.iter().any(|&b| b) {
        return 0.0;
    }
    let (dst, near) = distance_to_foreground(&fg, h, w);
    let e: Vec<f64> = pair.pred.iter().zip(pair.gt).map(|(p, g)| (p - g).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| if fg[i] { e[i] } else { e[near[i]] }).collect();
    let k = gauss7();
    let mut ea = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (a, row) in k.iter().enumerate() {
                let r = i as isize + a as isize - 3;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for (b, kv) in row.iter().enumerate() {
                    let c = j as isize + b as isize - 3;
                    if c >= 0 && c < w as isize {
                        s += kv * et[r as usize * w + c as usize];
                    }
                }
            }
            ea[i * w + j] = s;
        }
    }
    let decay = 0.5f64.ln() / 5.0;
    let (mut tpw, mut fpw, mut ew_fg, mut nfg) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..h * w {
        if fg[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            ew_fg += m;
            nfg += 1;
        } else {
            fpw += e[i] * (2.0 - (decay * dst[i]).exp());
        }
    }
    tpw += nfg as f64 - ew_fg;
    let r = 1.0 - ew_fg / nfg as f64;
    let p = tpw / (tpw + fpw + EPS);
    2.0 * r * p / (r + p + EPS)
}
