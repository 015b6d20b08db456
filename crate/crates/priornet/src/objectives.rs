//! Training objective and evaluation metric: multi-class soft Dice loss with
//! its analytic gradient, hard Dice scores, and a finite-difference gradient
//! checker used to verify every differentiable path in the crate.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::LabelMap;
use crate::FeatureMap;

/// Settings for the soft Dice loss.
///
/// By default the loss averages over foreground classes only; the background
/// channel still participates through the per-voxel softmax. `smooth` is the
/// epsilon added to numerator and denominator of each class ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub smooth: f64,
    pub include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth: 1e-5,
            include_background: false,
        }
    }
}

/// Per-class hard Dice values plus their mean over foreground classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_class_dice: Vec<f64>,
    pub mean_foreground_dice: f64,
}

impl DiceReport {
    pub fn new(per_class_dice: Vec<f64>) -> Self {
        let mean = per_class_dice.iter().sum::<f64>() / per_class_dice.len().max(1) as f64;
        Self {
            per_class_dice,
            mean_foreground_dice: mean,
        }
    }

    /// Plain-text table, one row per foreground class.
    pub fn render_table(&self) -> String {
        let mut out = String::from("class  dice\n");
        for (c, d) in self.per_class_dice.iter().enumerate() {
            out.push_str(&format!("{:<6} {:.4}\n", c + 1, d));
        }
        out.push_str(&format!("mean   {:.4}\n", self.mean_foreground_dice));
        out
    }

    /// Machine-readable line-oriented form: `class <c> dice <v>` rows followed
    /// by `mean <v>`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (c, d) in self.per_class_dice.iter().enumerate() {
            out.push_str(&format!("class\t{}\tdice\t{:.17e}\n", c + 1, d));
        }
        out.push_str(&format!("mean\t{:.17e}\n", self.mean_foreground_dice));
        out
    }
}

/// Per-voxel softmax over the channel axis, numerically stabilized.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let channels = logits.shape()[3];
    let mut out = logits.clone();
    let flat = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(flat, par::REDUCE_CHUNK.next_multiple_of(channels), |_, chunk| {
        for row in chunk.chunks_mut(channels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    });
    out
}

fn validate_pair(logits: &FeatureMap, target: &FeatureMap) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if logits.shape()[3] < 2 {
        return Err(Error::InvalidTarget(
            "need at least 2 channels (background + 1 class)".into(),
        ));
    }
    let channels = target.shape()[3];
    let flat = target.as_slice().expect("standard layout");
    for (v, row) in flat.chunks(channels).enumerate() {
        let mut ones = 0;
        for &x in row {
            if x == 1.0 {
                ones += 1;
            } else if x != 0.0 {
                return Err(Error::InvalidTarget(format!(
                    "target entry {x} at voxel {v} is not 0 or 1"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::InvalidTarget(format!(
                "voxel {v} has {ones} active channels instead of 1"
            )));
        }
    }
    Ok(())
}

/// Multi-class soft Dice loss over one logits/target pair.
///
/// Probabilities come from a per-voxel softmax; each class contributes
/// `d_c = (2 * sum(p_c * g_c) + eps) / (sum(p_c) + sum(g_c) + eps)` and the
/// loss is `1 - mean_c d_c`, which lies in `[0, 1]`. The returned gradient is
/// `d loss / d logits`.
pub fn soft_dice_loss(logits: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    soft_dice_loss_with(logits, target, &LossConfig::default())
}

pub fn soft_dice_loss_with(
    logits: &FeatureMap,
    target: &FeatureMap,
    cfg: &LossConfig,
) -> Result<(f64, FeatureMap)> {
    let (loss, mut grads) = soft_dice_loss_batch(&[(logits, target)], cfg)?;
    Ok((loss, grads.pop().expect("one gradient per input pair")))
}

/// Batch soft Dice: class statistics are summed over all pairs before the
/// ratio is formed, which stabilizes training with very small batches. The
/// returned gradients are per-pair `d loss / d logits`.
pub fn soft_dice_loss_batch(
    pairs: &[(&FeatureMap, &FeatureMap)],
    cfg: &LossConfig,
) -> Result<(f64, Vec<FeatureMap>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidTarget("empty batch".into()));
    }
    let channels = pairs[0].0.shape()[3];
    for (logits, target) in pairs {
        validate_pair(logits, target)?;
        if logits.shape()[3] != channels {
            return Err(Error::ShapeMismatch(
                "all batch members must share a channel count".into(),
            ));
        }
    }
    let first_class = if cfg.include_background { 0 } else { 1 };
    let eps = cfg.smooth;

    // Pass 1: softmax per pair plus class statistics accumulated over the batch.
    let mut probs = Vec::with_capacity(pairs.len());
    let mut inter = vec![0.0; channels];
    let mut psum = vec![0.0; channels];
    let mut gsum = vec![0.0; channels];
    for (logits, target) in pairs {
        let p = softmax_channels(logits);
        let pf = p.as_slice().expect("standard layout");
        let gf = target.as_slice().expect("standard layout");
        let voxels = pf.len() / channels;
        let partials = par::chunk_partials(voxels, par::REDUCE_CHUNK, |r| {
            let mut acc = vec![0.0; 3 * channels];
            for v in r {
                let prow = &pf[v * channels..(v + 1) * channels];
                let grow = &gf[v * channels..(v + 1) * channels];
                for c in 0..channels {
                    acc[c] += prow[c] * grow[c];
                    acc[channels + c] += prow[c];
                    acc[2 * channels + c] += grow[c];
                }
            }
            acc
        });
        for acc in partials {
            for c in 0..channels {
                inter[c] += acc[c];
                psum[c] += acc[channels + c];
                gsum[c] += acc[2 * channels + c];
            }
        }
        probs.push(p);
    }

    let included: Vec<usize> = (first_class..channels).collect();
    let k = included.len() as f64;
    let mut dice_sum = 0.0;
    // d loss / d p_c decomposes as coef_g[c] * g + coef_p[c] per included class.
    let mut coef_g = vec![0.0; channels];
    let mut coef_p = vec![0.0; channels];
    for &c in &included {
        let denom = psum[c] + gsum[c] + eps;
        let num = 2.0 * inter[c] + eps;
        dice_sum += num / denom;
        coef_g[c] = -(1.0 / k) * 2.0 / denom;
        coef_p[c] = (1.0 / k) * num / (denom * denom);
    }
    let loss = 1.0 - dice_sum / k;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite dice loss".into()));
    }

    // Pass 2: chain through the softmax, one pair at a time.
    let mut grads = Vec::with_capacity(pairs.len());
    for ((_, target), p) in pairs.iter().zip(&probs) {
        let mut grad = FeatureMap::zeros(p.raw_dim());
        let gflat = grad.as_slice_mut().expect("standard layout");
        let pf = p.as_slice().expect("standard layout");
        let gf = target.as_slice().expect("standard layout");
        let coef_g = &coef_g;
        let coef_p = &coef_p;
        par::for_each_chunk_mut(gflat, par::REDUCE_CHUNK.next_multiple_of(channels), |ci, chunk| {
            let base = ci * par::REDUCE_CHUNK.next_multiple_of(channels);
            for (off, row) in chunk.chunks_mut(channels).enumerate() {
                let at = base + off * channels;
                let prow = &pf[at..at + channels];
                let grow = &gf[at..at + channels];
                // dL/dp then softmax backward: dL/dz_i = p_i (dL/dp_i - sum_j p_j dL/dp_j)
                let mut dlp = [0.0; 64];
                let dlp = &mut dlp[..channels];
                let mut dot = 0.0;
                for c in 0..channels {
                    dlp[c] = coef_g[c] * grow[c] + coef_p[c];
                    dot += prow[c] * dlp[c];
                }
                for c in 0..channels {
                    row[c] = prow[c] * (dlp[c] - dot);
                }
            }
        });
        grads.push(grad);
    }
    Ok((loss, grads))
}

/// Hard Dice per class: `2 |P_c ∩ G_c| / (|P_c| + |G_c|)`, defined as 1 when
/// both sets are empty and 0 when exactly one is.
pub fn hard_dice_score(pred: &LabelMap, gt: &LabelMap) -> Result<DiceReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "pred has K={} but gt has K={}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    let k = pred.num_classes();
    let mut inter = vec![0u64; k + 1];
    let mut pc = vec![0u64; k + 1];
    let mut gc = vec![0u64; k + 1];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        pc[p as usize] += 1;
        gc[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class = (1..=k)
        .map(|c| {
            let denom = pc[c] + gc[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(DiceReport::new(per_class))
}

/// Max relative error between an analytic gradient and central finite
/// differences of `value` at `point`, over every coordinate.
///
/// The relative error at a coordinate is
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_difference_gradcheck<F>(
    value: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_gradcheck_at(value, analytic_grad, point, step, &coords)
}

/// Same as [`finite_difference_gradcheck`] but restricted to the listed
/// coordinates, for functions with too many inputs to probe exhaustively.
pub fn finite_difference_gradcheck_at<F>(
    value: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic_grad.len() != point.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} coordinates",
            analytic_grad.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = value(&x);
        x[i] = orig - step;
        let minus = value(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation while probing coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * step);
        let a = analytic_grad[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
