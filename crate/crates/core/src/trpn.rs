//! Temporal region proposal network: an anchor grid over the feature map,
//! box target encoding against anchors for the current and past frames,
//! IoU-based target assignment, the masked multi-term loss, the 1x1-conv
//! head, and proposal decoding with NMS.

use crate::geometry::{nms, rotated_iou, wrap_angle, BevBox5, GeometryError};
use crate::nn::{add_conv, sigmoid, Binder, Graph, NnError, ParamStore, Tensor, Var};
use crate::pillars::GridConfig;

use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum TrpnError {
    #[error("box sizes must be positive: w={w}, l={l}")]
    NonpositiveSize { w: f64, l: f64 },
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Denominator used for the position residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Anchor's distance from the origin, floored at 1 m near the origin.
    #[default]
    PositionNorm,
    /// Anchor's size diagonal.
    Diagonal,
}

/// Floor for the position normalizer; anchors close to the origin would
/// otherwise blow up the residual scale.
pub const MIN_POSITION_NORM: f64 = 1.0;

/// Residual scale for one anchor. Position offsets are divided by this in
/// the encoding, so a far anchor's (dx, dy) targets shrink with range.
pub fn anchor_norm(a: &BevBox5, nrm: Normalizer) -> f64 {
    match nrm {
        Normalizer::PositionNorm => (a.x * a.x + a.y * a.y).sqrt().max(MIN_POSITION_NORM),
        Normalizer::Diagonal => (a.w * a.w + a.l * a.l).sqrt(),
    }
}

fn check_sizes(b: &BevBox5) -> Result<(), TrpnError> {
    if b.w <= 0.0 || b.l <= 0.0 {
        return Err(TrpnError::NonpositiveSize { w: b.w, l: b.l });
    }
    Ok(())
}

/// Fixed box shape replicated at every grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorPrior {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

impl Default for AnchorPrior {
    fn default() -> Self {
        Self { w: 0.9, l: 0.9, h: 0.0 }
    }
}

/// Anchors at every cell center, row-major over cells, prior-major within a
/// cell. This ordering matches a row-major H x W x (P*k) head map reshaped
/// to (H*W*P, k).
pub fn build_anchor_grid(grid: &GridConfig, priors: &[AnchorPrior]) -> Vec<BevBox5> {
    let mut anchors = Vec::with_capacity(grid.rows * grid.cols * priors.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x, y) = grid.cell_center(r, c);
            for p in priors {
                anchors.push(BevBox5::new(x, y, p.w, p.l, p.h));
            }
        }
    }
    anchors
}

/// Residual of a ground-truth box against an anchor for the current frame:
/// (dx, dy, dw, dl, dh) with positions scaled by the normalizer, sizes as
/// log ratios, and heading as sin of half the wrapped difference.
pub fn encode_current(gt: &BevBox5, a: &BevBox5, nrm: Normalizer) -> Result<[f64; 5], TrpnError> {
    check_sizes(gt)?;
    check_sizes(a)?;
    let n = anchor_norm(a, nrm);
    Ok([
        (gt.x - a.x) / n,
        (gt.y - a.y) / n,
        (gt.w / a.w).ln(),
        (gt.l / a.l).ln(),
        (wrap_angle(gt.h - a.h) / 2.0).sin(),
    ])
}

/// Past-frame residual: positions and heading only, sizes are assumed
/// constant over the history.
pub fn encode_past(gt_past: &BevBox5, a: &BevBox5, nrm: Normalizer) -> Result<[f64; 3], TrpnError> {
    check_sizes(gt_past)?;
    check_sizes(a)?;
    let n = anchor_norm(a, nrm);
    Ok([
        (gt_past.x - a.x) / n,
        (gt_past.y - a.y) / n,
        (wrap_angle(gt_past.h - a.h) / 2.0).sin(),
    ])
}

/// Decoded box plus a flag set when the heading residual fell outside the
/// invertible range |dh| <= 1 and had to be clamped.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub bev: BevBox5,
    pub clamped: bool,
}

/// Exact inverse of encode_current.
pub fn decode_current(a: &BevBox5, d: &[f64; 5], nrm: Normalizer) -> Decoded {
    let n = anchor_norm(a, nrm);
    let clamped = d[4].abs() > 1.0;
    let dh = d[4].clamp(-1.0, 1.0);
    Decoded {
        bev: BevBox5::new(
            a.x + d[0] * n,
            a.y + d[1] * n,
            a.w * d[2].exp(),
            a.l * d[3].exp(),
            a.h + 2.0 * dh.asin(),
        ),
        clamped,
    }
}

/// Inverse of encode_past; width and length are taken from the anchor.
pub fn decode_past(a: &BevBox5, d: &[f64; 3], nrm: Normalizer) -> Decoded {
    let n = anchor_norm(a, nrm);
    let clamped = d[2].abs() > 1.0;
    let dh = d[2].clamp(-1.0, 1.0);
    Decoded {
        bev: BevBox5::new(a.x + d[0] * n, a.y + d[1] * n, a.w, a.l, a.h + 2.0 * dh.asin()),
        clamped,
    }
}

/// Ground-truth supervision for one object: the current box plus one
/// optional box per past frame (None where the object has no observation).
#[derive(Clone, Debug)]
pub struct GtTrack {
    pub current: BevBox5,
    pub past: Vec<Option<BevBox5>>,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AssignerConfig {
    pub th_pos: f64,
    pub th_neg: f64,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        Self { th_pos: 0.5, th_neg: 0.35 }
    }
}

/// Per-anchor supervision. Class state lives in `cls`/`cls_mask`:
/// positives have cls 1, negatives cls 0, and ignored anchors carry
/// cls_mask 0 so no loss term sees them. Regression rows are zero (and
/// masked out) everywhere except positive anchors; `past_mask[j]` further
/// drops positives whose track has no box at frame -(j+1).
#[derive(Clone, Debug)]
pub struct TrpnTargets {
    pub cls: Tensor,
    pub cls_mask: Tensor,
    pub cur: Tensor,
    pub cur_mask: Tensor,
    pub past: Vec<Tensor>,
    pub past_mask: Vec<Tensor>,
    pub assigned: Vec<Option<usize>>,
}

impl TrpnTargets {
    pub fn positives(&self) -> usize {
        self.cur_mask.data().iter().filter(|&&m| m != 0.0).count() / 5
    }
}

/// Assigns each anchor to its best-IoU track and builds loss targets.
/// Positive above th_pos, negative below th_neg, ignored in between
/// (strict comparisons on both sides).
pub fn assign_targets(
    anchors: &[BevBox5],
    tracks: &[GtTrack],
    n_past: usize,
    cfg: &AssignerConfig,
    nrm: Normalizer,
) -> Result<TrpnTargets, TrpnError> {
    for t in tracks {
        if t.past.len() != n_past {
            return Err(TrpnError::Layout(format!(
                "track has {} past boxes, expected {n_past}",
                t.past.len()
            )));
        }
    }
    let n = anchors.len();
    let mut cls = Tensor::zeros(&[n, 1]);
    let mut cls_mask = Tensor::zeros(&[n, 1]);
    let mut cur = Tensor::zeros(&[n, 5]);
    let mut cur_mask = Tensor::zeros(&[n, 5]);
    let mut past = vec![Tensor::zeros(&[n, 3]); n_past];
    let mut past_mask = vec![Tensor::zeros(&[n, 3]); n_past];
    let mut assigned = vec![None; n];

    for (i, a) in anchors.iter().enumerate() {
        let ra = a.circumradius();
        let mut best = 0.0;
        let mut best_gt = None;
        for (k, t) in tracks.iter().enumerate() {
            let dx = t.current.x - a.x;
            let dy = t.current.y - a.y;
            let reach = ra + t.current.circumradius();
            if dx * dx + dy * dy > reach * reach {
                continue;
            }
            let iou = rotated_iou(a, &t.current);
            if iou > best {
                best = iou;
                best_gt = Some(k);
            }
        }
        if best > cfg.th_pos {
            let k = best_gt.expect("positive anchor has a best track");
            assigned[i] = Some(k);
            cls.data_mut()[i] = 1.0;
            cls_mask.data_mut()[i] = 1.0;
            let d = encode_current(&tracks[k].current, a, nrm)?;
            cur.data_mut()[i * 5..(i + 1) * 5].copy_from_slice(&d);
            for m in &mut cur_mask.data_mut()[i * 5..(i + 1) * 5] {
                *m = 1.0;
            }
            for (j, past_box) in tracks[k].past.iter().enumerate() {
                if let Some(b) = past_box {
                    let d = encode_past(b, a, nrm)?;
                    past[j].data_mut()[i * 3..(i + 1) * 3].copy_from_slice(&d);
                    for m in &mut past_mask[j].data_mut()[i * 3..(i + 1) * 3] {
                        *m = 1.0;
                    }
                }
            }
        } else if best < cfg.th_neg {
            assigned[i] = best_gt;
            cls_mask.data_mut()[i] = 1.0;
        } else {
            assigned[i] = best_gt;
        }
    }

    Ok(TrpnTargets { cls, cls_mask, cur, cur_mask, past, past_mask, assigned })
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub cur_reg: f64,
    pub past_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, cur_reg: 1.0, past_reg: 1.0 }
    }
}

/// Scalar loss node plus per-term values for logging.
pub struct LossBreakdown {
    pub total: Var,
    pub cls: f64,
    pub cur: f64,
    pub past: f64,
}

/// Mean of per-element losses over valid units, where one unit covers
/// `entries_per_unit` mask entries (a row, or one frame's columns). The mask
/// multiplies the elementwise loss, so perturbing a masked-out prediction
/// contributes an exact 0.0 to the same summation order: loss and gradients
/// are unchanged to the bit. A term with no valid units contributes nothing.
pub(crate) fn masked_mean(
    g: &mut Graph,
    elems: Var,
    mask: &Tensor,
    entries_per_unit: f64,
) -> Result<Option<Var>, NnError> {
    let count = mask.data().iter().sum::<f64>() / entries_per_unit;
    if count == 0.0 {
        return Ok(None);
    }
    let m = g.input(mask.clone());
    let prod = g.mul(elems, m)?;
    let s = g.sum(prod);
    Ok(Some(g.scale(s, 1.0 / count)))
}

/// Weighted sum of classification, current-regression, and past-regression
/// terms. Classification averages over positives + negatives; regression
/// terms average over positives; the past term is a sum over frames of
/// per-frame means, each with its own valid count.
pub fn trpn_loss(
    g: &mut Graph,
    cls_logits: Var,
    cur_pred: Var,
    past_pred: &[Var],
    targets: &TrpnTargets,
    w: &LossWeights,
) -> Result<LossBreakdown, TrpnError> {
    if past_pred.len() != targets.past.len() {
        return Err(TrpnError::Layout(format!(
            "{} past prediction maps for {} target frames",
            past_pred.len(),
            targets.past.len()
        )));
    }

    let mut total = g.input(Tensor::scalar(0.0));
    let mut values = [0.0; 3];

    let t_cls = g.input(targets.cls.clone());
    let cls_elems = g.bce_with_logits(cls_logits, t_cls)?;
    if let Some(term) = masked_mean(g, cls_elems, &targets.cls_mask, 1.0)? {
        values[0] = g.scalar_value(term);
        let weighted = g.scale(term, w.cls);
        total = g.add(total, weighted)?;
    }

    let t_cur = g.input(targets.cur.clone());
    let cur_elems = g.smooth_l1(cur_pred, t_cur)?;
    if let Some(term) = masked_mean(g, cur_elems, &targets.cur_mask, 5.0)? {
        values[1] = g.scalar_value(term);
        let weighted = g.scale(term, w.cur_reg);
        total = g.add(total, weighted)?;
    }

    for (j, &pred) in past_pred.iter().enumerate() {
        let t_past = g.input(targets.past[j].clone());
        let elems = g.smooth_l1(pred, t_past)?;
        if let Some(term) = masked_mean(g, elems, &targets.past_mask[j], 3.0)? {
            values[2] += g.scalar_value(term);
            let weighted = g.scale(term, w.past_reg);
            total = g.add(total, weighted)?;
        }
    }

    Ok(LossBreakdown { total, cls: values[0], cur: values[1], past: values[2] })
}

#[derive(Clone, Copy, Debug)]
pub struct TrpnHeadConfig {
    pub temporal_channels: usize,
    pub n_priors: usize,
    pub n_past: usize,
}

/// Initial classifier bias. Positive anchors are outnumbered hundreds to
/// one, so a zero prior lets the background gradient swamp them; starting
/// near the background rate keeps negatives saturated from step one.
pub const CLS_PRIOR_LOGIT: f64 = -4.0;

pub fn init_trpn_head(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    cfg: &TrpnHeadConfig,
) -> Result<(), NnError> {
    let ct = cfg.temporal_channels;
    add_conv(store, rng, &format!("{name}.temporal"), 1, 1, c_in, ct)?;
    add_conv(store, rng, &format!("{name}.cls"), 1, 1, ct, cfg.n_priors)?;
    let cls_b = store.slot(&format!("{name}.cls.b"))?;
    store.by_slot_mut(cls_b).data_mut().fill(CLS_PRIOR_LOGIT);
    add_conv(store, rng, &format!("{name}.cur"), 1, 1, ct, 5 * cfg.n_priors)?;
    for j in 1..=cfg.n_past {
        add_conv(store, rng, &format!("{name}.past{j}"), 1, 1, ct, 3 * cfg.n_priors)?;
    }
    Ok(())
}

/// Per-anchor prediction maps, flattened to one row per anchor in grid
/// order (matching build_anchor_grid).
pub struct TrpnHead {
    pub cls: Var,
    pub cur: Var,
    pub past: Vec<Var>,
}

fn conv1x1(g: &mut Graph, binder: &mut Binder, x: Var, name: &str) -> Result<Var, NnError> {
    let w = binder.get(g, &format!("{name}.w"))?;
    let b = binder.get(g, &format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, 0)
}

/// Concatenates the per-frame backbone features along channels, mixes them
/// with a 1x1 conv + ReLU, and emits classification, current-box, and
/// per-past-frame regression maps.
pub fn trpn_head(
    g: &mut Graph,
    binder: &mut Binder,
    features: &[Var],
    name: &str,
    cfg: &TrpnHeadConfig,
) -> Result<TrpnHead, TrpnError> {
    if features.is_empty() {
        return Err(TrpnError::Layout("no backbone features".into()));
    }
    let stacked = g.concat(features)?;
    let mixed = conv1x1(g, binder, stacked, &format!("{name}.temporal"))?;
    let mixed = g.relu(mixed);
    let shape = g.value(mixed).shape().to_vec();
    let cells = shape[0] * shape[1];
    let p = cfg.n_priors;

    let cls_map = conv1x1(g, binder, mixed, &format!("{name}.cls"))?;
    let cls = g.reshape(cls_map, &[cells * p, 1])?;
    let cur_map = conv1x1(g, binder, mixed, &format!("{name}.cur"))?;
    let cur = g.reshape(cur_map, &[cells * p, 5])?;
    let mut past = Vec::with_capacity(cfg.n_past);
    for j in 1..=cfg.n_past {
        let m = conv1x1(g, binder, mixed, &format!("{name}.past{j}"))?;
        past.push(g.reshape(m, &[cells * p, 3])?);
    }
    Ok(TrpnHead { cls, cur, past })
}

/// One candidate object: a confidence plus its current box (index 0) and
/// one box per past frame, all sharing the current box's width and length.
#[derive(Clone, Debug)]
pub struct TemporalProposal {
    pub score: f64,
    pub boxes: Vec<BevBox5>,
}

impl TemporalProposal {
    pub fn current(&self) -> &BevBox5 {
        &self.boxes[0]
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub nms_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { pre_nms_top_k: 512, post_nms_top_k: 64, nms_iou: 0.5 }
    }
}

/// Top-k anchors by score, decoded into temporal proposals, deduplicated
/// with NMS on the current boxes. Past boxes reuse the decoded current
/// box's width and length (sizes are constant over a track).
pub fn generate_proposals(
    cls_logits: &Tensor,
    cur_reg: &Tensor,
    past_reg: &[Tensor],
    anchors: &[BevBox5],
    nrm: Normalizer,
    cfg: &ProposalConfig,
) -> Result<Vec<TemporalProposal>, TrpnError> {
    let n = anchors.len();
    let logits = cls_logits.data();
    if logits.len() != n || cur_reg.len() != n * 5 {
        return Err(TrpnError::Layout(format!(
            "head maps ({} cls, {} cur) do not cover {n} anchors",
            logits.len(),
            cur_reg.len() / 5
        )));
    }
    for p in past_reg {
        if p.len() != n * 3 {
            return Err(TrpnError::Layout(format!(
                "past map has {} rows, expected {n}",
                p.len() / 3
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
    order.truncate(cfg.pre_nms_top_k);

    let cur = cur_reg.data();
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &i in &order {
        let d: [f64; 5] = cur[i * 5..(i + 1) * 5].try_into().expect("row of 5");
        boxes.push(decode_current(&anchors[i], &d, nrm).bev);
        scores.push(sigmoid(logits[i]));
    }

    let kept = nms(&boxes, &scores, cfg.nms_iou)?;
    let mut out = Vec::with_capacity(kept.len().min(cfg.post_nms_top_k));
    for &k in kept.iter().take(cfg.post_nms_top_k) {
        let anchor = &anchors[order[k]];
        let norm = anchor_norm(anchor, nrm);
        let cur_box = boxes[k];
        let mut track = Vec::with_capacity(1 + past_reg.len());
        track.push(cur_box);
        for p in past_reg {
            let d = &p.data()[order[k] * 3..order[k] * 3 + 3];
            let dh = d[2].clamp(-1.0, 1.0);
            track.push(BevBox5::new(
                anchor.x + d[0] * norm,
                anchor.y + d[1] * norm,
                cur_box.w,
                cur_box.l,
                anchor.h + 2.0 * dh.asin(),
            ));
        }
        out.push(TemporalProposal { score: scores[k], boxes: track });
    }
    Ok(out)
}
