//! Training objectives: matching probability, patch-contrastive and
//! mix-domain contrastive losses, adaptive ground-truth weights, the
//! Gaussian-pyramid reconstruction loss, the least-squares adversarial
//! pair, and the total generator objective.
//!
//! Every loss exists twice: a pure `f64` evaluation over validated
//! [`EmbeddingSet`]s / images (the public contract, used by tests and
//! reporting) and a graph composition over [`crate::tensor::Graph`] nodes
//! (the training path). The two agree to floating-point roundoff; the test
//! suites check both against independent scalar oracles.
//!
//! All softmax denominators are computed with per-row max subtraction.

use crate::dataset::StainedImage;
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorNet, discriminator_forward};
use crate::patching::EmbeddingSet;
use crate::tensor::{kernels, Graph, Id, ParamStore};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// Which contrastive form the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Inter-domain negatives only (the baseline form).
    PatchNce,
    /// Inter-domain plus intra-domain (other-anchor) negatives.
    MixDomain,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::PatchNce => write!(f, "nce"),
            LossVariant::MixDomain => write!(f, "mix"),
        }
    }
}

/// Temperature and variant for the contrastive objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub variant: LossVariant,
}

impl ContrastiveConfig {
    pub fn new(tau: f64, variant: LossVariant) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        Ok(Self { tau, variant })
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            variant: LossVariant::MixDomain,
        }
    }
}

/// Per-anchor confidence weights for the ground-truth branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    /// Length-M vector, every entry in `[0,1]`.
    pub omega: Array1<f64>,
    /// Training progress in `[0,1]` the weights were built at.
    pub progress: f64,
}

/// Scalar components of the generator objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub mix_he: f64,
    pub mix_gt: f64,
    pub gp: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    /// Assemble a breakdown, computing `total_g` and rejecting non-finite
    /// components.
    pub fn new(
        adv_g: f64,
        adv_d: f64,
        mix_he: f64,
        mix_gt: f64,
        gp: f64,
        lambda_gp: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("adv_g", adv_g),
            ("adv_d", adv_d),
            ("mix_he", mix_he),
            ("mix_gt", mix_gt),
            ("gp", gp),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: name.into(),
                    value: v,
                });
            }
        }
        let total_g = total_objective(adv_g, mix_he, mix_gt, gp, lambda_gp)?;
        Ok(Self {
            adv_g,
            adv_d,
            mix_he,
            mix_gt,
            gp,
            total_g,
        })
    }
}

fn check_aligned(anchors: &EmbeddingSet, positives: &EmbeddingSet) -> Result<()> {
    if anchors.len() != positives.len() || anchors.dim() != positives.dim() {
        return Err(Error::ShapeError(format!(
            "sets must be row-aligned: {}x{} vs {}x{}",
            anchors.len(),
            anchors.dim(),
            positives.len(),
            positives.dim()
        )));
    }
    if anchors.locations != positives.locations {
        return Err(Error::InvalidArgument(
            "sets must share patch locations row-for-row".into(),
        ));
    }
    Ok(())
}

/// Softmax probability that anchor `i` matches its positive against the
/// other positives. Always in `(0,1]`; exactly 1 when M = 1.
pub fn matching_probability(
    anchors: &EmbeddingSet,
    positives: &EmbeddingSet,
    i: usize,
    tau: f64,
) -> Result<f64> {
    check_aligned(anchors, positives)?;
    if i >= anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor index {i} out of range for M={}",
            anchors.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let row = anchors.vectors.row(i);
    let sims: Array1<f64> = positives
        .vectors
        .outer_iter()
        .map(|p| row.dot(&p) / tau)
        .collect();
    let mx = sims.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = mx + sims.mapv(|v| (v - mx).exp()).sum().ln();
    Ok((sims[i] - lse).exp())
}

/// Sum over anchors of the negative log matching probability, with
/// inter-domain negatives only.
pub fn patchnce_loss(anchors: &EmbeddingSet, positives: &EmbeddingSet, tau: f64) -> Result<f64> {
    check_aligned(anchors, positives)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let s = anchors.vectors.dot(&positives.vectors.t()) / tau;
    let lse = kernels::row_logsumexp(s.view());
    let mut total = 0.0;
    for i in 0..s.nrows() {
        total += lse[i] - s[[i, i]];
    }
    Ok(total)
}

/// Mix-domain contrastive loss: each anchor's denominator adds the other
/// anchors (intra-domain negatives) to the positive-set terms. Optional
/// per-anchor weights (the ground-truth branch) default to 1.
pub fn mix_domain_loss(
    anchors: &EmbeddingSet,
    positives: &EmbeddingSet,
    tau: f64,
    weights: Option<&AdaptiveWeights>,
) -> Result<f64> {
    check_aligned(anchors, positives)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let m = anchors.len();
    if let Some(w) = weights {
        if w.omega.len() != m {
            return Err(Error::ShapeError(format!(
                "{} weights for M={m} anchors",
                w.omega.len()
            )));
        }
    }
    let s = anchors.vectors.dot(&positives.vectors.t()) / tau;
    let q = anchors.vectors.dot(&anchors.vectors.t()) / tau;
    let mut total = 0.0;
    for i in 0..m {
        // stabilized lse over the 2M-1 denominator terms
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            mx = mx.max(s[[i, j]]);
            if j != i {
                mx = mx.max(q[[i, j]]);
            }
        }
        let mut sum = 0.0;
        for j in 0..m {
            sum += (s[[i, j]] - mx).exp();
            if j != i {
                sum += (q[[i, j]] - mx).exp();
            }
        }
        let lse = mx + sum.ln();
        let li = lse - s[[i, i]];
        total += weights.map_or(1.0, |w| w.omega[i]) * li;
    }
    Ok(total)
}

/// Rank-similarity confidence weights with a linear progress ramp.
///
/// `s_i = z_i . z_i^gt`; ranks ascend so the most similar pair gets
/// normalized rank 1 (ties share the mean rank); `w_i` interpolates from 1
/// at progress 0 to the normalized rank at progress 1.
pub fn adaptive_weights(
    anchors: &EmbeddingSet,
    gt_positives: &EmbeddingSet,
    progress: f64,
) -> Result<AdaptiveWeights> {
    check_aligned(anchors, gt_positives)?;
    adaptive_weights_from_rows(anchors.vectors.view(), gt_positives.vectors.view(), progress)
}

/// [`adaptive_weights`] over raw row-aligned matrices (the trainer path,
/// where embeddings live on the graph rather than in sets).
pub fn adaptive_weights_from_rows(
    anchors: ndarray::ArrayView2<f64>,
    gt_positives: ndarray::ArrayView2<f64>,
    progress: f64,
) -> Result<AdaptiveWeights> {
    if anchors.dim() != gt_positives.dim() {
        return Err(Error::ShapeError(format!(
            "sets must be row-aligned: {:?} vs {:?}",
            anchors.dim(),
            gt_positives.dim()
        )));
    }
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::InvalidArgument(format!(
            "progress must lie in [0,1], got {progress}"
        )));
    }
    let m = anchors.nrows();
    let sims: Vec<f64> = (0..m)
        .map(|i| anchors.row(i).dot(&gt_positives.row(i)))
        .collect();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sims[a].partial_cmp(&sims[b]).expect("finite similarities"));

    // ascending 1-based ranks; ties share the mean rank of their run
    let mut rank = vec![0.0f64; m];
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && sims[order[end]] == sims[order[start]] {
            end += 1;
        }
        let mean_rank = (start + 1 + end) as f64 / 2.0; // mean of start+1 ..= end
        for &idx in &order[start..end] {
            rank[idx] = mean_rank;
        }
        start = end;
    }

    let omega: Array1<f64> = (0..m)
        .map(|i| {
            let r = if m == 1 { 1.0 } else { (rank[i] - 1.0) / (m as f64 - 1.0) };
            (1.0 - progress) + progress * r
        })
        .collect();
    Ok(AdaptiveWeights { omega, progress })
}

fn image_to_chw(img: &StainedImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.pixels[[y, x, c]])
}

fn chw_to_image(arr: &Array3<f64>, template: &StainedImage) -> StainedImage {
    let (_, h, w) = arr.dim();
    StainedImage {
        pixels: ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| arr[[c, y, x]]),
        domain: template.domain,
        source_id: template.source_id.clone(),
    }
}

fn check_pyramid_dims(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels < 1 {
        return Err(Error::InvalidArgument("pyramid needs at least 1 level".into()));
    }
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeError(format!(
            "{h}x{w} image not divisible by 2^{} for {levels} pyramid levels",
            levels - 1
        )));
    }
    Ok(())
}

/// Gaussian pyramid: level 0 is the input; each next level is a 5x5
/// binomial blur followed by 2x decimation.
pub fn gaussian_pyramid(image: &StainedImage, levels: usize) -> Result<Vec<StainedImage>> {
    check_pyramid_dims(image.height(), image.width(), levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut cur = image_to_chw(image);
    out.push(image.clone());
    for _ in 1..levels {
        cur = kernels::blur_decimate_forward(cur.view());
        out.push(chw_to_image(&cur, image));
    }
    Ok(out)
}

/// Weighted sum over pyramid levels of the mean absolute error between the
/// two images' level-`l` bands.
pub fn gp_loss(
    generated: &StainedImage,
    gt: &StainedImage,
    levels: usize,
    level_weights: &[f64],
) -> Result<f64> {
    if (generated.height(), generated.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeError(
            "gp_loss images must share dimensions".into(),
        ));
    }
    if level_weights.len() != levels {
        return Err(Error::InvalidArgument(format!(
            "{} level weights for {levels} levels",
            level_weights.len()
        )));
    }
    check_pyramid_dims(generated.height(), generated.width(), levels)?;
    let mut a = image_to_chw(generated);
    let mut b = image_to_chw(gt);
    let mut total = 0.0;
    for (l, w) in level_weights.iter().enumerate() {
        let mae = (&a - &b).mapv(f64::abs).mean().expect("nonempty level");
        total += w * mae;
        if l + 1 < levels {
            a = kernels::blur_decimate_forward(a.view());
            b = kernels::blur_decimate_forward(b.view());
        }
    }
    Ok(total)
}

/// Default pyramid weighting: coarser levels upweighted.
pub const GP_DEFAULT_WEIGHTS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Least-squares adversarial pair.
///
/// `adv_d = 0.5 mean((D(real)-1)^2) + 0.5 mean(D(fake)^2)` and
/// `adv_g = mean((D(fake)-1)^2)`. This evaluation is gradient-free; the
/// trainer composes the same arithmetic on the graph, routing `adv_d` into
/// the discriminator only and `adv_g` into the generator only.
pub fn adversarial_losses(
    disc: &DiscriminatorNet,
    store: &ParamStore,
    real: &StainedImage,
    fake: &StainedImage,
) -> Result<(f64, f64)> {
    let lr = discriminator_forward(disc, store, real)?;
    let lf = discriminator_forward(disc, store, fake)?;
    let adv_d = 0.5 * (&lr - 1.0).mapv(|v| v * v).mean().expect("logits nonempty")
        + 0.5 * lf.mapv(|v| v * v).mean().expect("logits nonempty");
    let adv_g = (&lf - 1.0).mapv(|v| v * v).mean().expect("logits nonempty");
    Ok((adv_g, adv_d))
}

/// Total generator objective. Errors with the offending component name if
/// anything is non-finite, so the trainer can halt with a diagnostic.
pub fn total_objective(
    adv_g: f64,
    mix_he: f64,
    mix_gt: f64,
    gp: f64,
    lambda_gp: f64,
) -> Result<f64> {
    if lambda_gp < 0.0 {
        return Err(Error::InvalidArgument("lambda_gp must be >= 0".into()));
    }
    for (name, v) in [
        ("adv_g", adv_g),
        ("mix_he", mix_he),
        ("mix_gt", mix_gt),
        ("gp", gp),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name.into(),
                value: v,
            });
        }
    }
    let total = adv_g + mix_he + mix_gt + lambda_gp * gp;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "total_g".into(),
            value: total,
        });
    }
    Ok(total)
}

// ---- graph compositions (training path) ----

/// PatchNCE on the graph: anchors and positives are (M,D) unit-row nodes.
pub fn patchnce_loss_graph(g: &mut Graph, anchors: Id, positives: Id, tau: f64) -> Id {
    let s = g.matmul_nt(anchors, positives);
    let s = g.affine(s, 1.0 / tau, 0.0);
    let lse = g.row_logsumexp(s);
    let d = g.diag(s);
    let per_anchor = g.sub(lse, d);
    g.sum_all(per_anchor)
}

/// Mix-domain loss on the graph; `weights`, when given, are constants.
pub fn mix_domain_loss_graph(
    g: &mut Graph,
    anchors: Id,
    positives: Id,
    tau: f64,
    weights: Option<&Array1<f64>>,
) -> Id {
    let s = g.matmul_nt(anchors, positives);
    let s = g.affine(s, 1.0 / tau, 0.0);
    let q = g.matmul_nt(anchors, anchors);
    let q = g.affine(q, 1.0 / tau, 0.0);
    let q_masked = g.mask_diag_neg_inf(q);
    let den = g.concat_cols(s, q_masked);
    let lse = g.row_logsumexp(den);
    let d = g.diag(s);
    let mut per_anchor = g.sub(lse, d);
    if let Some(w) = weights {
        per_anchor = g.mul_const(per_anchor, w.clone().into_dyn());
    }
    g.sum_all(per_anchor)
}

/// Dispatch on the configured contrastive form.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    anchors: Id,
    positives: Id,
    cfg: ContrastiveConfig,
    weights: Option<&Array1<f64>>,
) -> Id {
    match cfg.variant {
        LossVariant::PatchNce => {
            let base = patchnce_loss_graph(g, anchors, positives, cfg.tau);
            match weights {
                // weighted NCE needs the per-anchor vector before reduction
                Some(w) => {
                    let s = g.matmul_nt(anchors, positives);
                    let s = g.affine(s, 1.0 / cfg.tau, 0.0);
                    let lse = g.row_logsumexp(s);
                    let d = g.diag(s);
                    let per = g.sub(lse, d);
                    let per = g.mul_const(per, w.clone().into_dyn());
                    g.sum_all(per)
                }
                None => base,
            }
        }
        LossVariant::MixDomain => mix_domain_loss_graph(g, anchors, positives, cfg.tau, weights),
    }
}

/// Weighted patchnce over embedding sets (the ground-truth branch under the
/// baseline variant).
pub fn patchnce_loss_weighted(
    anchors: &EmbeddingSet,
    positives: &EmbeddingSet,
    tau: f64,
    weights: &AdaptiveWeights,
) -> Result<f64> {
    check_aligned(anchors, positives)?;
    if weights.omega.len() != anchors.len() {
        return Err(Error::ShapeError(format!(
            "{} weights for M={} anchors",
            weights.omega.len(),
            anchors.len()
        )));
    }
    let s = anchors.vectors.dot(&positives.vectors.t()) / tau;
    let lse = kernels::row_logsumexp(s.view());
    let mut total = 0.0;
    for i in 0..s.nrows() {
        total += weights.omega[i] * (lse[i] - s[[i, i]]);
    }
    Ok(total)
}

/// Gaussian-pyramid loss on the graph over (3,H,W) nodes in `[0,1]` space.
pub fn gp_loss_graph(
    g: &mut Graph,
    generated: Id,
    gt: Id,
    levels: usize,
    level_weights: &[f64],
) -> Id {
    assert_eq!(level_weights.len(), levels);
    let mut a = generated;
    let mut b = gt;
    let mut total: Option<Id> = None;
    for (l, w) in level_weights.iter().enumerate() {
        let diff = g.sub(a, b);
        let ab = g.abs(diff);
        let mae = g.mean_all(ab);
        let scaled = g.affine(mae, *w, 0.0);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
        if l + 1 < levels {
            a = g.blur_decimate(a);
            b = g.blur_decimate(b);
        }
    }
    total.expect("at least one level")
}

/// `mean((logits - 1)^2)`: the generator side of the least-squares pair.
pub fn lsgan_generator_graph(g: &mut Graph, fake_logits: Id) -> Id {
    let shifted = g.affine(fake_logits, 1.0, -1.0);
    let sq = g.square(shifted);
    g.mean_all(sq)
}

/// `0.5 mean((real-1)^2) + 0.5 mean(fake^2)`: the discriminator side.
pub fn lsgan_discriminator_graph(g: &mut Graph, real_logits: Id, fake_logits: Id) -> Id {
    let rs = g.affine(real_logits, 1.0, -1.0);
    let rs = g.square(rs);
    let rm = g.mean_all(rs);
    let fs = g.square(fake_logits);
    let fm = g.mean_all(fs);
    let sum = g.add(rm, fm);
    g.affine(sum, 0.5, 0.0)
}

/// Mean of `omega` weights actually applied, for trace reporting.
pub fn mean_weight(w: &AdaptiveWeights) -> f64 {
    w.omega.mean().unwrap_or(1.0)
}

/// Row-mean variant helper used by evaluation summaries.
pub fn mean_axis0(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("nonempty matrix")
}
