//! Scalar objectives and reconstruction metrics.
//!
//! Every differentiable loss comes in two flavours: a plain evaluator and a
//! `*_with_grad` variant that also returns the gradient with respect to its
//! differentiable inputs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::renderer::DepthImage;
use crate::spatial::NearestIndex;

// ---------------------------------------------------------------------------
// Rendering loss

fn check_stacks(pred: &[DepthImage], gt: &[DepthImage]) -> Result<usize> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(domain(format!(
            "rendering loss needs equal, non-empty image stacks (got {} and {})",
            pred.len(),
            gt.len()
        )));
    }
    let (h, w) = (pred[0].height, pred[0].width);
    for img in pred.iter().chain(gt) {
        if img.height != h || img.width != w || img.pixels.len() != h * w {
            return Err(domain("all rendered images must share one size"));
        }
    }
    Ok(pred.len() * h * w)
}

/// Mean absolute difference over all views and pixels.
pub fn dr_loss(pred: &[DepthImage], gt: &[DepthImage]) -> Result<f64> {
    let n = check_stacks(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.pixels.iter().zip(&g.pixels).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(sum / n as f64)
}

/// [`dr_loss`] and its gradient with respect to `pred` (zero at exact ties).
pub fn dr_loss_with_grad(pred: &[DepthImage], gt: &[DepthImage]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = check_stacks(pred, gt)? as f64;
    let loss = dr_loss(pred, gt)?;
    let grads = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            p.pixels
                .iter()
                .zip(&g.pixels)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Chamfer distance and F-score

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferVariant {
    /// Mean Euclidean nearest-neighbour distance.
    L1,
    /// Mean squared Euclidean nearest-neighbour distance.
    L2,
}

fn nn_assign(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    let index = NearestIndex::new(to);
    from.iter().map(|p| index.nearest(*p).unwrap()).collect()
}

fn check_nonempty(p: &PointCloud, q: &PointCloud) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(domain("chamfer/f-score need two non-empty clouds"));
    }
    Ok(())
}

/// Symmetric half-sum Chamfer distance.
pub fn chamfer(p: &PointCloud, q: &PointCloud, variant: ChamferVariant) -> Result<f64> {
    chamfer_with_grad(p, q, variant).map(|(v, _)| v)
}

/// Chamfer distance plus its gradient with respect to `p`.
///
/// Nearest-neighbour assignments are held fixed during differentiation; ties
/// go to the lowest index.
pub fn chamfer_with_grad(
    p: &PointCloud,
    q: &PointCloud,
    variant: ChamferVariant,
) -> Result<(f64, Vec<Vec3>)> {
    check_nonempty(p, q)?;
    let (pp, qq) = (p.points(), q.points());
    let fwd = nn_assign(pp, qq);
    let bwd = nn_assign(qq, pp);
    let dist = |d2: f64| match variant {
        ChamferVariant::L1 => d2.sqrt(),
        ChamferVariant::L2 => d2,
    };
    let (np, nq) = (pp.len() as f64, qq.len() as f64);
    let term_p: f64 = fwd.iter().map(|(_, d2)| dist(*d2)).sum::<f64>() / np;
    let term_q: f64 = bwd.iter().map(|(_, d2)| dist(*d2)).sum::<f64>() / nq;
    let value = 0.5 * (term_p + term_q);

    // d/dx of dist(|x - y|^2) along (x - y)
    let pair_grad = |x: Vec3, y: Vec3, d2: f64| -> Vec3 {
        let coef = match variant {
            ChamferVariant::L1 => {
                if d2 > 0.0 {
                    1.0 / d2.sqrt()
                } else {
                    0.0
                }
            }
            ChamferVariant::L2 => 2.0,
        };
        [coef * (x[0] - y[0]), coef * (x[1] - y[1]), coef * (x[2] - y[2])]
    };
    let mut grad = vec![[0.0; 3]; pp.len()];
    for (i, &(j, d2)) in fwd.iter().enumerate() {
        let g = pair_grad(pp[i], qq[j], d2);
        for a in 0..3 {
            grad[i][a] += 0.5 * g[a] / np;
        }
    }
    for (j, &(i, d2)) in bwd.iter().enumerate() {
        let g = pair_grad(pp[i], qq[j], d2);
        for a in 0..3 {
            grad[i][a] += 0.5 * g[a] / nq;
        }
    }
    Ok((value, grad))
}

/// F-score of point matches within distance `threshold`.
pub fn fscore(p: &PointCloud, q: &PointCloud, threshold: f64) -> Result<f64> {
    check_nonempty(p, q)?;
    if !(threshold > 0.0) {
        return Err(domain("f-score threshold must be positive"));
    }
    let t2 = threshold * threshold;
    let frac = |a: &[Vec3], b: &[Vec3]| {
        let hits = nn_assign(a, b).iter().filter(|(_, d2)| *d2 <= t2).count();
        hits as f64 / a.len() as f64
    };
    let precision = frac(p.points(), q.points());
    let recall = frac(q.points(), p.points());
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Default F-score threshold: 1% of the unit-normalized object scale.
pub const FSCORE_THRESHOLD: f64 = 0.01;

// ---------------------------------------------------------------------------
// Embeddings and contrastive objectives

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Point,
    Rgb,
    Depth,
}

/// `B × E` row-major block of unit-norm embeddings from one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub modality: Modality,
    pub dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(modality: Modality, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(shape("embedding data is not a whole number of rows"));
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(domain(format!("embedding row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            modality,
            dim,
            data,
        })
    }

    /// L2-normalizes every row before wrapping it.
    pub fn normalized(modality: Modality, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(shape("embedding data is not a whole number of rows"));
        }
        for row in data.chunks_exact_mut(dim) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(domain("cannot normalize a zero embedding"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            modality,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self {
            modality: self.modality,
            dim: self.dim,
            data,
        }
    }
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Learnable temperature, stored as `ln τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveHead {
    pub log_tau: f64,
}

impl Default for ContrastiveHead {
    fn default() -> Self {
        Self {
            log_tau: 0.07f64.ln(),
        }
    }
}

impl ContrastiveHead {
    pub fn with_tau(tau: f64) -> Self {
        let mut h = Self { log_tau: tau.ln() };
        h.clamp();
        h
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// True when `log_tau` lies strictly inside the clamp range.
    pub fn is_free(&self) -> bool {
        let t = self.log_tau.exp();
        t > TAU_MIN && t < TAU_MAX
    }

    pub fn clamp(&mut self) {
        self.log_tau = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

/// Gradients of [`cross_modal_nce_with_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct NceGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub log_tau: f64,
}

fn log_softmax_pick(logits: &[f64], pick: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    (logits[pick] - m - z.ln(), probs)
}

/// Symmetric two-direction InfoNCE over matching rows, averaged over the batch.
pub fn cross_modal_nce(a: &EmbeddingBatch, b: &EmbeddingBatch, head: &ContrastiveHead) -> Result<f64> {
    cross_modal_nce_with_grad(a, b, head).map(|(l, _)| l)
}

pub fn cross_modal_nce_with_grad(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    head: &ContrastiveHead,
) -> Result<(f64, NceGrad)> {
    let n = a.rows();
    if n != b.rows() || a.dim != b.dim || n == 0 {
        return Err(domain(format!(
            "contrastive batches must match (got {}x{} and {}x{})",
            n,
            a.dim,
            b.rows(),
            b.dim
        )));
    }
    let tau = head.tau();
    let logits: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| dotv(a.row(i), b.row(j)) / tau)
        .collect();
    let mut dlogits = vec![0.0; n * n];
    let mut loss = 0.0;
    let w = 0.5 / n as f64;
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let (lp, probs) = log_softmax_pick(row, i);
        loss -= w * lp;
        for j in 0..n {
            dlogits[i * n + j] += w * (probs[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i * n + j]).collect();
        let (lp, probs) = log_softmax_pick(&col, j);
        loss -= w * lp;
        for i in 0..n {
            dlogits[i * n + j] += w * (probs[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    let d = a.dim;
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; n * d];
    let mut dtau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = dlogits[i * n + j];
            if g == 0.0 {
                continue;
            }
            dtau -= g * logits[i * n + j] / tau;
            for k in 0..d {
                ga[i * d + k] += g * b.row(j)[k] / tau;
                gb[j * d + k] += g * a.row(i)[k] / tau;
            }
        }
    }
    let log_tau = if head.is_free() { dtau * tau } else { 0.0 };
    Ok((
        loss,
        NceGrad {
            a: ga,
            b: gb,
            log_tau,
        },
    ))
}

/// Momentum-contrast configuration and its FIFO queue of negative keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoState {
    pub capacity: usize,
    pub dim: usize,
    pub momentum: f64,
    pub tau: f64,
    queue: VecDeque<Vec<f64>>,
}

impl MocoState {
    pub fn new(capacity: usize, dim: usize, momentum: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(domain("MoCo momentum must lie in [0, 1]"));
        }
        if !(tau > 0.0) {
            return Err(domain("MoCo temperature must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            momentum,
            tau,
            queue: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Queue rows, oldest first.
    pub fn keys(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(|r| r.as_slice())
    }

    /// Appends new keys and evicts the oldest rows beyond capacity.
    pub fn enqueue(&mut self, keys: &EmbeddingBatch) -> Result<()> {
        if keys.dim != self.dim {
            return Err(shape("key dimension does not match the MoCo queue"));
        }
        for i in 0..keys.rows() {
            self.queue.push_back(keys.row(i).to_vec());
        }
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }
}

/// Mean InfoNCE of each query against its own key (positive) and the queue.
pub fn moco_loss(query: &EmbeddingBatch, key_pos: &EmbeddingBatch, state: &MocoState) -> Result<f64> {
    moco_loss_with_grad(query, key_pos, state).map(|(l, _)| l)
}

/// [`moco_loss`] and its gradient with respect to the queries.
pub fn moco_loss_with_grad(
    query: &EmbeddingBatch,
    key_pos: &EmbeddingBatch,
    state: &MocoState,
) -> Result<(f64, Vec<f64>)> {
    let n = query.rows();
    if n != key_pos.rows() || query.dim != key_pos.dim || n == 0 {
        return Err(domain("query and key batches must match"));
    }
    if query.dim != state.dim {
        return Err(shape("query dimension does not match the MoCo queue"));
    }
    let d = query.dim;
    let tau = state.tau;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let q = query.row(i);
        let k = key_pos.row(i);
        let mut logits = Vec::with_capacity(1 + state.len());
        logits.push(dotv(q, k) / tau);
        logits.extend(state.keys().map(|neg| dotv(q, neg) / tau));
        let (lp, probs) = log_softmax_pick(&logits, 0);
        loss -= lp / n as f64;
        let g = &mut grad[i * d..(i + 1) * d];
        let coef = (probs[0] - 1.0) / (tau * n as f64);
        g.iter_mut().zip(k).for_each(|(g, kv)| *g += coef * kv);
        for (p, neg) in probs[1..].iter().zip(state.keys()) {
            let coef = p / (tau * n as f64);
            g.iter_mut().zip(neg).for_each(|(g, kv)| *g += coef * kv);
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Token cross-entropy

/// Mean `-log softmax(logits)[target]` over masked rows of a `G × V` array.
pub fn token_ce(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> Result<f64> {
    token_ce_with_grad(logits, vocab, targets, mask).map(|(l, _)| l)
}

pub fn token_ce_with_grad(
    logits: &[f64],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if vocab < 2 {
        return Err(domain("token vocabulary must have at least two entries"));
    }
    let g = targets.len();
    if logits.len() != g * vocab || mask.len() != g {
        return Err(shape("logits, targets and mask disagree on the token count"));
    }
    let masked = mask.iter().filter(|m| **m).count();
    if masked == 0 {
        return Err(domain("token loss needs at least one masked position"));
    }
    if let Some(t) = targets.iter().find(|t| **t >= vocab) {
        return Err(domain(format!("target token {t} outside vocabulary of {vocab}")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let w = 1.0 / masked as f64;
    for i in (0..g).filter(|&i| mask[i]) {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let (lp, probs) = log_softmax_pick(row, targets[i]);
        loss -= w * lp;
        for (j, p) in probs.iter().enumerate() {
            grad[i * vocab + j] = w * (p - if j == targets[i] { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Weighted total

/// Weights of the three pairwise contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// RGB–depth.
    pub alpha: f64,
    /// RGB–point.
    pub beta: f64,
    /// point–depth.
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            theta: 0.1,
        }
    }
}

/// The seven loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_rd: f64,
    pub l_rp: f64,
    pub l_pd: f64,
    pub l_moco: f64,
    pub l_ce: f64,
    pub l_dr: f64,
    pub l_cd: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("l_rd", self.l_rd),
            ("l_rp", self.l_rp),
            ("l_pd", self.l_pd),
            ("l_moco", self.l_moco),
            ("l_ce", self.l_ce),
            ("l_dr", self.l_dr),
            ("l_cd", self.l_cd),
        ]
    }
}

/// `α L(R,D) + β L(R,P) + θ L(P,D) + L_MoCo + L_CE + L_DR + L_CD`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    if let Some((name, _)) = parts.named().iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite((*name).to_string()));
    }
    Ok(w.alpha * parts.l_rd
        + w.beta * parts.l_rp
        + w.theta * parts.l_pd
        + parts.l_moco
        + parts.l_ce
        + parts.l_dr
        + parts.l_cd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, px: &[f64]) -> DepthImage {
        DepthImage {
            height: h,
            width: w,
            pixels: px.to_vec(),
        }
    }

    fn cloud(p: &[Vec3]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn dr_loss_examples() {
        let gt = vec![img(2, 2, &[0.0, 1.0, 1.0, 0.0])];
        assert_eq!(dr_loss(&gt, &gt).unwrap(), 0.0);
        let pred = vec![img(2, 2, &[1.0, 1.0, 0.0, 0.0])];
        assert_eq!(dr_loss(&pred, &gt).unwrap(), 0.5);
        let shifted = vec![img(2, 2, &[0.25, 1.25, 1.25, 0.25])];
        assert!((dr_loss(&shifted, &gt).unwrap() - 0.25).abs() < 1e-15);
        assert!(dr_loss(&pred, &[img(1, 4, &[0.0; 4])]).is_err());
        assert!(dr_loss(&[], &[]).is_err());
        let (_, g) = dr_loss_with_grad(&gt, &gt).unwrap();
        assert!(g[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn chamfer_examples() {
        let p = cloud(&[[0.0, 0.0, 0.0]]);
        let q = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&p, &q, ChamferVariant::L1).unwrap(), 1.0);
        assert_eq!(chamfer(&p, &q, ChamferVariant::L2).unwrap(), 1.0);
        let p2 = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&p2, &q, ChamferVariant::L2).unwrap(), 1.0);
        assert_eq!(chamfer(&p2, &p2, ChamferVariant::L1).unwrap(), 0.0);
        assert!(chamfer(&PointCloud::empty(), &q, ChamferVariant::L1).is_err());
    }

    #[test]
    fn fscore_examples() {
        let p = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        assert!((fscore(&p, &q, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fscore(&p, &p, 0.5).unwrap(), 1.0);
        let far = cloud(&[[100.0, 0.0, 0.0]]);
        assert_eq!(fscore(&q, &far, 1.0).unwrap(), 0.0);
        assert!(fscore(&p, &q, 0.0).is_err());
    }

    fn batch(m: Modality, rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::new(m, rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn nce_examples() {
        let a = batch(Modality::Point, &[&[1.0, 0.0]]);
        let head = ContrastiveHead::with_tau(1.0);
        assert_eq!(cross_modal_nce(&a, &a, &head).unwrap(), 0.0);

        let a = batch(Modality::Point, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = cross_modal_nce(&a, &a, &head).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);

        let b = batch(Modality::Rgb, &[&[1.0, 0.0, 0.0]]);
        assert!(cross_modal_nce(&a, &b, &head).is_err());
    }

    #[test]
    fn temperature_is_clamped() {
        assert_eq!(ContrastiveHead::with_tau(5.0).tau(), 1.0);
        assert!((ContrastiveHead::with_tau(1e-4).tau() - 0.01).abs() < 1e-15);
        assert!((ContrastiveHead::default().tau() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn moco_examples() {
        let q = batch(Modality::Point, &[&[1.0, 0.0]]);
        let mut state = MocoState::new(4, 2, 0.999, 1.0).unwrap();
        assert_eq!(moco_loss(&q, &q, &state).unwrap(), 0.0);
        state.enqueue(&batch(Modality::Point, &[&[0.0, 1.0]])).unwrap();
        let l = moco_loss(&q, &q, &state).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn moco_queue_is_fifo() {
        let mut state = MocoState::new(4, 1, 0.999, 0.07).unwrap();
        let b = |v: &[f64]| EmbeddingBatch::new(Modality::Point, 1, v.to_vec()).unwrap();
        state.enqueue(&b(&[1.0, -1.0])).unwrap();
        assert_eq!(state.len(), 2);
        state.enqueue(&b(&[1.0, 1.0])).unwrap();
        state.enqueue(&b(&[-1.0, -1.0])).unwrap();
        let keys: Vec<f64> = state.keys().map(|k| k[0]).collect();
        assert_eq!(keys, vec![1.0, 1.0, -1.0, -1.0]);
        state.enqueue(&b(&[1.0])).unwrap();
        let keys: Vec<f64> = state.keys().map(|k| k[0]).collect();
        assert_eq!(keys, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn token_ce_examples() {
        let v = 64;
        let logits = vec![0.3; 2 * v];
        let l = token_ce(&logits, v, &[5, 9], &[true, true]).unwrap();
        assert!((l - (64f64).ln()).abs() < 1e-12);
        let mut sharp = vec![0.0; 2 * v];
        sharp[5] = 60.0;
        sharp[v + 9] = 60.0;
        assert!(token_ce(&sharp, v, &[5, 9], &[true, true]).unwrap() < 1e-20);
        let mut changed = sharp.clone();
        changed[v + 3] = 100.0;
        assert_eq!(
            token_ce(&sharp, v, &[5, 9], &[true, false]).unwrap(),
            token_ce(&changed, v, &[5, 9], &[true, false]).unwrap()
        );
        assert!(token_ce(&sharp, v, &[5, 9], &[false, false]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.theta), (0.1, 0.1, 0.1));
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts {
            l_rd: 1.0,
            l_rp: 1.0,
            l_pd: 1.0,
            l_moco: 1.0,
            l_ce: 1.0,
            l_dr: 1.0,
            l_cd: 1.0,
        };
        assert!((total_loss(&ones, &w).unwrap() - 4.3).abs() < 1e-12);
        let bad = LossParts {
            l_dr: f64::NAN,
            ..ones
        };
        match total_loss(&bad, &w) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "l_dr"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
