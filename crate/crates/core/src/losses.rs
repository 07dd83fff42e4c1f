//! Segmentation and self-distillation objectives with analytic gradients.
//!
//! Every pixel-summed quantity is averaged over pixels so magnitudes do not
//! depend on resolution. Gradients returned by the `*_grad` functions are
//! with respect to the first (student) argument only; teacher inputs are
//! constants.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::nn::backbone::FeaturePyramid;
use crate::nn::ops::{upsample, upsample_backward, UpsampleMode};
use crate::tensor::{Spatial, Tensor};

/// Inverse-frequency class weights are clipped to this range.
pub const CE_WEIGHT_RANGE: (f64, f64) = (0.05, 20.0);

static WARNED_ZERO_NORM: AtomicBool = AtomicBool::new(false);

fn check_label(logits: &Tensor, label: &[u8]) -> Result<()> {
    if logits.pixels() != label.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} pixels, label has {}",
            logits.pixels(),
            label.len()
        )));
    }
    if let Some(&k) = label.iter().find(|&&k| k as usize >= logits.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "label value {k} with only {} logit channels",
            logits.channels()
        )));
    }
    Ok(())
}

/// Channel-wise softmax of `logits / tau` at every pixel.
pub fn softmax(logits: &Tensor, tau: f64) -> Tensor {
    let n = logits.pixels();
    let k = logits.channels();
    let mut out = Tensor::zeros(k, logits.spatial());
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(src[c * n + i] / tau);
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = (src[c * n + i] / tau - max).exp();
            dst[c * n + i] = e;
            sum += e;
        }
        for c in 0..k {
            dst[c * n + i] /= sum;
        }
    }
    out
}

fn log_softmax(logits: &Tensor, tau: f64) -> Tensor {
    let n = logits.pixels();
    let k = logits.channels();
    let mut out = Tensor::zeros(k, logits.spatial());
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(src[c * n + i] / tau);
        }
        let mut sum = 0.0;
        for c in 0..k {
            sum += (src[c * n + i] / tau - max).exp();
        }
        let lse = max + sum.ln();
        for c in 0..k {
            dst[c * n + i] = src[c * n + i] / tau - lse;
        }
    }
    out
}

/// Per-class cross-entropy weights: inverse pixel frequency within the
/// label map, clipped to [`CE_WEIGHT_RANGE`]. Absent classes get weight 0.
pub fn class_weights(label: &[u8], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &k in label {
        counts[k as usize] += 1;
    }
    let n = label.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (n / c as f64).clamp(CE_WEIGHT_RANGE.0, CE_WEIGHT_RANGE.1)
            }
        })
        .collect()
}

/// Soft Dice loss over classes present in `label` plus weighted
/// cross-entropy, with the gradient with respect to `logits`.
pub fn dice_plus_weighted_ce_grad(logits: &Tensor, label: &[u8]) -> Result<(f64, Tensor)> {
    check_label(logits, label)?;
    let n = logits.pixels();
    let k = logits.channels();
    let probs = softmax(logits, 1.0);
    let logp = log_softmax(logits, 1.0);
    let weights = class_weights(label, k);

    let mut present = vec![false; k];
    let mut target_sum = vec![0.0; k];
    for &y in label {
        present[y as usize] = true;
        target_sum[y as usize] += 1.0;
    }
    let n_present = present.iter().filter(|&&p| p).count() as f64;

    let mut dice_sum = 0.0;
    // d(loss)/d(prob) per channel and pixel.
    let mut grad_p = Tensor::zeros(k, logits.spatial());
    for c in (0..k).filter(|&c| present[c]) {
        let p = probs.channel(c);
        let mut inter = 0.0;
        let mut psum = 0.0;
        for i in 0..n {
            psum += p[i];
            if label[i] as usize == c {
                inter += p[i];
            }
        }
        let denom = psum + target_sum[c];
        dice_sum += 2.0 * inter / denom;
        let gp = grad_p.channel_mut(c);
        for i in 0..n {
            let y = if label[i] as usize == c { 1.0 } else { 0.0 };
            let d_dice = 2.0 * y / denom - 2.0 * inter / (denom * denom);
            gp[i] = -d_dice / n_present;
        }
    }
    let dice_loss = 1.0 - dice_sum / n_present;

    let mut grad = Tensor::zeros(k, logits.spatial());
    {
        let p = probs.data();
        let gp = grad_p.data();
        let g = grad.data_mut();
        for i in 0..n {
            let dot: f64 = (0..k).map(|c| p[c * n + i] * gp[c * n + i]).sum();
            for c in 0..k {
                g[c * n + i] = p[c * n + i] * (gp[c * n + i] - dot);
            }
        }
    }

    let total_w: f64 = label.iter().map(|&y| weights[y as usize]).sum();
    let mut ce = 0.0;
    {
        let p = probs.data();
        let lp = logp.data();
        let g = grad.data_mut();
        for i in 0..n {
            let y = label[i] as usize;
            let a = weights[y] / total_w;
            ce -= a * lp[y * n + i];
            for c in 0..k {
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[c * n + i] += a * (p[c * n + i] - onehot);
            }
        }
    }
    Ok((dice_loss + ce, grad))
}

pub fn dice_plus_weighted_ce(logits: &Tensor, label: &[u8]) -> Result<f64> {
    dice_plus_weighted_ce_grad(logits, label).map(|(v, _)| v)
}

fn level_factor(level_sp: Spatial, full: Spatial) -> Result<usize> {
    if !full.h.is_multiple_of(level_sp.h) {
        return Err(Error::ShapeMismatch(format!("level {level_sp} vs label {full}")));
    }
    let factor = full.h / level_sp.h;
    if level_sp.upsampled(factor, full.rank()) != full || !factor.is_power_of_two() {
        return Err(Error::ShapeMismatch(format!("level {level_sp} vs label {full}")));
    }
    Ok(factor)
}

/// Deep-supervision segmentation loss: sum over levels of Dice + weighted
/// CE on the level's logits upsampled to full resolution. Returns the loss
/// and one gradient per level (at that level's resolution).
pub fn seg_loss_grad(
    fused_logits: &[Tensor],
    label: &[u8],
    full: Spatial,
    mode: UpsampleMode,
) -> Result<(f64, Vec<Tensor>)> {
    if fused_logits.is_empty() {
        return Err(Error::InvalidArgument("no pyramid levels".into()));
    }
    let rank = full.rank();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fused_logits.len());
    for z in fused_logits {
        let factor = level_factor(z.spatial(), full)?;
        let up = upsample(z, factor, rank, mode)?;
        let (v, g) = dice_plus_weighted_ce_grad(&up, label)?;
        total += v;
        grads.push(upsample_backward(&g, z.spatial(), factor, rank, mode)?);
    }
    Ok((total, grads))
}

pub fn seg_loss(fused_logits: &[Tensor], label: &[u8], full: Spatial, mode: UpsampleMode) -> Result<f64> {
    seg_loss_grad(fused_logits, label, full, mode).map(|(v, _)| v)
}

/// Output-level Dice + weighted CE of every available uni-modal pathway.
pub fn baseline_reg_loss(pyramid: &FeaturePyramid, label: &[u8]) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &m in &pyramid.present {
        let z = pyramid.uni_logits.get(&m).ok_or_else(|| {
            Error::InvalidArgument(format!("modality {m} absent from pyramid uni logits"))
        })?;
        out.insert(m, dice_plus_weighted_ce(z, label)?);
    }
    Ok(out)
}

/// Temperature-softened pixel-wise KL(student ‖ teacher), averaged over
/// pixels within each level and summed over levels, with the gradient with
/// respect to the student logits.
pub fn pixel_distill_grad(student: &[Tensor], teacher: &[Tensor], tau: f64) -> Result<(f64, Vec<Tensor>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student levels vs {} teacher levels",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        if !s.same_shape(t) {
            return Err(Error::ShapeMismatch("student/teacher level shapes differ".into()));
        }
        let n = s.pixels();
        let k = s.channels();
        let ps = softmax(s, tau);
        let lps = log_softmax(s, tau);
        let lpt = log_softmax(t, tau);
        let mut g = Tensor::zeros(k, s.spatial());
        let mut level = 0.0;
        {
            let (ps, lps, lpt) = (ps.data(), lps.data(), lpt.data());
            let gd = g.data_mut();
            for i in 0..n {
                let mut kl = 0.0;
                for c in 0..k {
                    kl += ps[c * n + i] * (lps[c * n + i] - lpt[c * n + i]);
                }
                level += kl;
                for c in 0..k {
                    let j = c * n + i;
                    gd[j] = ps[j] * ((lps[j] - lpt[j]) - kl) / (tau * n as f64);
                }
            }
        }
        total += level / n as f64;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn pixel_distill(student: &[Tensor], teacher: &[Tensor], tau: f64) -> Result<f64> {
    pixel_distill_grad(student, teacher, tau).map(|(v, _)| v)
}

/// Per-class mean feature vectors over the pixels carrying that class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

impl PrototypeSet {
    pub fn present_classes(&self) -> BTreeSet<usize> {
        self.prototypes.keys().copied().collect()
    }
}

pub fn compute_prototypes(features: &Tensor, label: &[u8]) -> Result<PrototypeSet> {
    if features.pixels() != label.len() {
        return Err(Error::ShapeMismatch("features and label differ in size".into()));
    }
    let n = features.pixels();
    let c = features.channels();
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let data = features.data();
    for (i, &y) in label.iter().enumerate() {
        let k = y as usize;
        let s = sums.entry(k).or_insert_with(|| vec![0.0; c]);
        for (ch, v) in s.iter_mut().enumerate() {
            *v += data[ch * n + i];
        }
        *counts.entry(k).or_insert(0) += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(k, mut s)| {
            let inv = 1.0 / counts[&k] as f64;
            for v in &mut s {
                *v *= inv;
            }
            (k, s)
        })
        .collect();
    Ok(PrototypeSet { prototypes, counts })
}

/// Per-pixel cosine similarity to each class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField {
    pub n_pixels: usize,
    pub fields: BTreeMap<usize, Vec<f64>>,
}

impl SimilarityField {
    /// Pixel-summed similarity of class `k`.
    pub fn summed(&self, k: usize) -> Option<f64> {
        self.fields.get(&k).map(|f| f.iter().sum())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn warn_zero_norm() {
    if !WARNED_ZERO_NORM.swap(true, Ordering::Relaxed) {
        log::warn!("zero-norm feature or prototype; cosine similarity taken as 0");
    }
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        warn_zero_norm();
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn pixel_norms(features: &Tensor) -> Vec<f64> {
    let n = features.pixels();
    let d = features.data();
    (0..n)
        .map(|i| {
            (0..features.channels())
                .map(|c| d[c * n + i] * d[c * n + i])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn similarity_field(features: &Tensor, prototypes: &PrototypeSet) -> Result<SimilarityField> {
    let n = features.pixels();
    let ch = features.channels();
    let d = features.data();
    let norms = pixel_norms(features);
    let mut fields = BTreeMap::new();
    for (&k, proto) in &prototypes.prototypes {
        if proto.len() != ch {
            return Err(Error::ShapeMismatch("prototype dimension".into()));
        }
        let pn = norm(proto);
        let field = (0..n)
            .map(|i| {
                if norms[i] == 0.0 || pn == 0.0 {
                    warn_zero_norm();
                    return 0.0;
                }
                let dot: f64 = (0..ch).map(|c| d[c * n + i] * proto[c]).sum();
                dot / (norms[i] * pn)
            })
            .collect();
        fields.insert(k, field);
    }
    Ok(SimilarityField { n_pixels: n, fields })
}

fn check_fields(a: &SimilarityField, b: &SimilarityField) -> Result<()> {
    if a.n_pixels != b.n_pixels {
        return Err(Error::ShapeMismatch("similarity fields differ in size".into()));
    }
    if !a.fields.keys().eq(b.fields.keys()) {
        return Err(Error::InvalidArgument(
            "similarity fields cover different classes".into(),
        ));
    }
    Ok(())
}

/// Mean over pixels of the summed absolute per-class similarity gap.
pub fn knowledge_gap(uni: &SimilarityField, teacher: &SimilarityField) -> Result<f64> {
    check_fields(uni, teacher)?;
    let mut total = 0.0;
    for (k, u) in &uni.fields {
        let t = &teacher.fields[k];
        total += u.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / uni.n_pixels as f64)
}

/// Mean over pixels of the summed squared per-class similarity gap.
pub fn proto_distill(uni: &SimilarityField, teacher: &SimilarityField) -> Result<f64> {
    check_fields(uni, teacher)?;
    let mut total = 0.0;
    for (k, u) in &uni.fields {
        let t = &teacher.fields[k];
        total += u.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / uni.n_pixels as f64)
}

/// [`proto_distill`] of the student's own similarity field against a fixed
/// teacher field, with the gradient with respect to the student's
/// output-level features. The gradient flows through both the per-pixel
/// features and the student prototypes computed from them.
pub fn proto_distill_grad(student: &Tensor, label: &[u8], teacher: &SimilarityField) -> Result<(f64, Tensor)> {
    let protos = compute_prototypes(student, label)?;
    let field = similarity_field(student, &protos)?;
    let loss = proto_distill(&field, teacher)?;

    let n = student.pixels();
    let ch = student.channels();
    let d = student.data();
    let norms = pixel_norms(student);
    let mut grad = Tensor::zeros(ch, student.spatial());
    let mut proto_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    for (&k, proto) in &protos.prototypes {
        let pn = norm(proto);
        let s = &field.fields[&k];
        let t = &teacher.fields[&k];
        let mut gc = vec![0.0; ch];
        if pn > 0.0 {
            let g = grad.data_mut();
            for i in 0..n {
                if norms[i] == 0.0 {
                    continue;
                }
                let a = 2.0 * (s[i] - t[i]) / n as f64;
                if a == 0.0 {
                    continue;
                }
                let inv = 1.0 / (norms[i] * pn);
                let zz = s[i] / (norms[i] * norms[i]);
                let cc = s[i] / (pn * pn);
                for c in 0..ch {
                    let z = d[c * n + i];
                    g[c * n + i] += a * (proto[c] * inv - zz * z);
                    gc[c] += a * (z * inv - cc * proto[c]);
                }
            }
        }
        proto_grads.insert(k, gc);
    }

    // Prototype k is the mean of its class's features.
    let g = grad.data_mut();
    for (i, &y) in label.iter().enumerate() {
        let k = y as usize;
        let inv = 1.0 / protos.counts[&k] as f64;
        let gc = &proto_grads[&k];
        for c in 0..ch {
            g[c * n + i] += gc[c] * inv;
        }
    }
    Ok((loss, grad))
}
