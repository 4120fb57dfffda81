//! Second stage: per-proposal feature extraction (local geometry crops,
//! meta-box dynamic crops, history path), the all-pairs interaction layer,
//! the classification/refinement/future heads, their loss, and final
//! detection decoding.

use crate::geometry::{
    meta_box, nms, to_standing_box, wrap_angle, BevBox5, GeometryError, StandingBox,
    StandingBoxMode,
};
use crate::metrics::Detection;
use crate::nn::{
    add_linear, he_normal, init_res_block, res_block, sigmoid, Binder, Graph, NnError,
    ParamStore, Tensor, Var,
};
use crate::pillars::GridConfig;
use crate::trpn::{
    self, decode_current, AssignerConfig, GtTrack, LossWeights, Normalizer, TemporalProposal,
    TrpnError,
};

use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum StiError {
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Trpn(#[from] TrpnError),
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct StiConfig {
    /// Crop resolution: each ROI is sampled on an s x s grid.
    pub s: usize,
    /// Channels of the fused crop feature after pooling.
    pub d_c: usize,
    /// Length of the history path embedding.
    pub d_path: usize,
    /// Width of the attention projections.
    pub d_att: usize,
    /// Length of the interaction embedding.
    pub d_g: usize,
    pub use_history_path: bool,
    pub use_interaction: bool,
}

impl Default for StiConfig {
    fn default() -> Self {
        Self {
            s: 5,
            d_c: 96,
            d_path: 32,
            d_att: 32,
            d_g: 64,
            use_history_path: true,
            use_interaction: true,
        }
    }
}

impl StiConfig {
    /// Proposal-local feature length: pooled crop feature plus path feature.
    pub fn d_f(&self) -> usize {
        self.d_c + self.d_path
    }
}

fn to_feature_box(sb: &StandingBox, grid: &GridConfig) -> StandingBox {
    let (u0, v0) = grid.feature_coords(sb.x_min, sb.y_min);
    let (u1, v1) = grid.feature_coords(sb.x_max, sb.y_max);
    StandingBox { x_min: u0, y_min: v0, x_max: u1, y_max: v1 }
}

/// Sample positions for an s x s crop of a feature-coordinate box: the
/// centers of an even s x s subdivision, row-major.
pub fn box_sample_grid(fb: &StandingBox, s: usize) -> Vec<(f64, f64)> {
    let du = (fb.x_max - fb.x_min) / s as f64;
    let dv = (fb.y_max - fb.y_min) / s as f64;
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            out.push((
                fb.x_min + (i as f64 + 0.5) * du,
                fb.y_min + (j as f64 + 0.5) * dv,
            ));
        }
    }
    out
}

/// An s x s x c crop; `degenerate` marks boxes with no overlap with the
/// grid extent, whose crop is all zeros.
#[derive(Clone, Copy, Debug)]
pub struct Crop {
    pub var: Var,
    pub degenerate: bool,
}

/// Bilinear ROI crop of a world-coordinate standing box.
pub fn roi_align_box(
    g: &mut Graph,
    feat: Var,
    world_box: &StandingBox,
    grid: &GridConfig,
    s: usize,
) -> Result<Crop, StiError> {
    let c = {
        let shape = g.value(feat).shape();
        if shape.len() != 3 {
            return Err(StiError::Layout(format!("feature map must be rank 3, got {shape:?}")));
        }
        shape[2]
    };
    let x_max = grid.x_min + grid.rows as f64 * grid.pillar_size;
    let y_max = grid.y_min + grid.cols as f64 * grid.pillar_size;
    let overlap_w = world_box.x_max.min(x_max) - world_box.x_min.max(grid.x_min);
    let overlap_h = world_box.y_max.min(y_max) - world_box.y_min.max(grid.y_min);
    if overlap_w <= 0.0 || overlap_h <= 0.0 {
        let zero = g.input(Tensor::zeros(&[s, s, c]));
        return Ok(Crop { var: zero, degenerate: true });
    }
    let samples = box_sample_grid(&to_feature_box(world_box, grid), s);
    let var = g.roi_align(feat, &samples, s)?;
    Ok(Crop { var, degenerate: false })
}

fn check_frames(feats: &[Var], p: &TemporalProposal) -> Result<(), StiError> {
    if feats.len() != p.boxes.len() {
        return Err(StiError::Layout(format!(
            "{} feature frames for a proposal with {} boxes",
            feats.len(),
            p.boxes.len()
        )));
    }
    Ok(())
}

/// Per-frame geometry crops: the proposal's frame-j standing box crops the
/// frame-j feature map. `feats` is ordered oldest to newest; the output
/// matches that order.
pub fn local_geometry_feature(
    g: &mut Graph,
    feats: &[Var],
    p: &TemporalProposal,
    grid: &GridConfig,
    mode: StandingBoxMode,
    s: usize,
) -> Result<Vec<Crop>, StiError> {
    check_frames(feats, p)?;
    let t = feats.len();
    let mut out = Vec::with_capacity(t);
    for (k, &f) in feats.iter().enumerate() {
        let sb = to_standing_box(&p.boxes[t - 1 - k], mode);
        out.push(roi_align_box(g, f, &sb, grid, s)?);
    }
    Ok(out)
}

/// Dynamic crops: one meta box covering the proposal's whole track crops
/// every frame's feature map with an identical sampling grid.
pub fn local_dynamic_feature(
    g: &mut Graph,
    feats: &[Var],
    p: &TemporalProposal,
    grid: &GridConfig,
    mode: StandingBoxMode,
    s: usize,
) -> Result<(Vec<Crop>, StandingBox), StiError> {
    check_frames(feats, p)?;
    let standing: Vec<StandingBox> = p.boxes.iter().map(|b| to_standing_box(b, mode)).collect();
    let meta = meta_box(&standing)?;
    let mut out = Vec::with_capacity(feats.len());
    for &f in feats {
        out.push(roi_align_box(g, f, &meta, grid, s)?);
    }
    Ok((out, meta))
}

/// Displacements from the current center back to each past center:
/// [x0-x-1, y0-y-1, ..., x0-x-(t-1), y0-y-(t-1)].
pub fn history_displacements(p: &TemporalProposal) -> Vec<f64> {
    let cur = p.boxes[0];
    let mut out = Vec::with_capacity(2 * (p.boxes.len() - 1));
    for b in &p.boxes[1..] {
        out.push(cur.x - b.x);
        out.push(cur.y - b.y);
    }
    out
}

/// Two-layer perceptron over the displacement vector. Disabled by config,
/// the feature is a zero vector of the same length, keeping shapes stable.
pub fn history_path_feature(
    g: &mut Graph,
    binder: &mut Binder,
    p: &TemporalProposal,
    name: &str,
    cfg: &StiConfig,
) -> Result<Var, StiError> {
    if !cfg.use_history_path {
        return Ok(g.input(Tensor::zeros(&[cfg.d_path])));
    }
    let d = history_displacements(p);
    let n = d.len();
    let x = g.input(Tensor::from_vec(&[1, n], d)?);
    let w1 = binder.get(g, &format!("{name}.path1.w"))?;
    let b1 = binder.get(g, &format!("{name}.path1.b"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    let w2 = binder.get(g, &format!("{name}.path2.w"))?;
    let b2 = binder.get(g, &format!("{name}.path2.b"))?;
    let out = g.linear(h, w2, b2)?;
    Ok(g.reshape(out, &[cfg.d_path])?)
}

/// Channel-concatenates all crops, runs one residual conv block, pools
/// globally, and appends the path feature: the proposal-local feature f_i.
pub fn fuse_local(
    g: &mut Graph,
    binder: &mut Binder,
    geometry: &[Crop],
    dynamic: &[Crop],
    path: Var,
    name: &str,
    cfg: &StiConfig,
) -> Result<Var, StiError> {
    let parts: Vec<Var> = geometry.iter().chain(dynamic).map(|c| c.var).collect();
    if parts.is_empty() {
        return Err(StiError::Layout("no crops to fuse".into()));
    }
    let stacked = g.concat(&parts)?;
    let ic = g.value(stacked).shape()[2];
    let fused = res_block(g, binder, stacked, &format!("{name}.fuse"), ic, cfg.d_c, 1)?;
    let pooled = g.global_avg_pool(fused)?;
    Ok(g.concat(&[pooled, path])?)
}

/// Interaction embeddings for a stacked feature matrix (one row per
/// proposal). `weights` is the row-stochastic attention matrix.
pub struct Interaction {
    pub emb: Var,
    pub weights: Var,
}

/// All-pairs attention: pair score v_ij = alpha([phi1(f_i); phi2(f_j)])
/// decomposes into a row term plus a column term because alpha is affine,
/// so the n x n score matrix is an outer sum. Likewise
/// gamma([f_i; f_j]) = gamma1(f_i) + gamma2(f_j), and with row weights
/// summing to one the aggregation collapses to
/// g_i = gamma1(f_i) + (W F) gamma2.
pub fn interaction(
    g: &mut Graph,
    binder: &mut Binder,
    f_mat: Var,
    name: &str,
) -> Result<Interaction, StiError> {
    let n = {
        let s = g.value(f_mat).shape();
        if s.len() != 2 {
            return Err(StiError::Layout(format!("feature matrix must be rank 2, got {s:?}")));
        }
        s[0]
    };
    let w1 = binder.get(g, &format!("{name}.phi1.w"))?;
    let b1 = binder.get(g, &format!("{name}.phi1.b"))?;
    let p1 = g.linear(f_mat, w1, b1)?;
    let w2 = binder.get(g, &format!("{name}.phi2.w"))?;
    let b2 = binder.get(g, &format!("{name}.phi2.b"))?;
    let p2 = g.linear(f_mat, w2, b2)?;

    let aw1 = binder.get(g, &format!("{name}.att1.w"))?;
    let ab1 = binder.get(g, &format!("{name}.att1.b"))?;
    let col = g.linear(p1, aw1, ab1)?;
    let col = g.reshape(col, &[n])?;
    let aw2 = binder.get(g, &format!("{name}.att2.w"))?;
    let row = g.matmul(p2, aw2)?;
    let row = g.reshape(row, &[n])?;

    let scores = g.outer_sum(col, row)?;
    let weights = g.softmax_rows(scores)?;

    let gw1 = binder.get(g, &format!("{name}.gamma1.w"))?;
    let gb1 = binder.get(g, &format!("{name}.gamma1.b"))?;
    let own = g.linear(f_mat, gw1, gb1)?;
    let mixed = g.matmul(weights, f_mat)?;
    let gw2 = binder.get(g, &format!("{name}.gamma2.w"))?;
    let gathered = g.matmul(mixed, gw2)?;
    let emb = g.add(own, gathered)?;
    Ok(Interaction { emb, weights })
}

/// Per-proposal prediction maps: classification logit and current-box
/// refinement from f_i alone; future steps from [f_i; g_i].
pub struct StiHeads {
    pub cls: Var,
    pub cur: Var,
    pub future: Var,
}

pub fn sti_heads(
    g: &mut Graph,
    binder: &mut Binder,
    f_mat: Var,
    g_mat: Var,
    name: &str,
) -> Result<StiHeads, StiError> {
    let wc = binder.get(g, &format!("{name}.cls.w"))?;
    let bc = binder.get(g, &format!("{name}.cls.b"))?;
    let cls = g.linear(f_mat, wc, bc)?;
    let wr = binder.get(g, &format!("{name}.cur.w"))?;
    let br = binder.get(g, &format!("{name}.cur.b"))?;
    let cur = g.linear(f_mat, wr, br)?;
    let fg = g.concat(&[f_mat, g_mat])?;
    let wf = binder.get(g, &format!("{name}.future.w"))?;
    let bf = binder.get(g, &format!("{name}.future.b"))?;
    let future = g.linear(fg, wf, bf)?;
    Ok(StiHeads { cls, cur, future })
}

/// Registers every second-stage parameter. `t` is the number of pillar
/// frames, `c_feat` the backbone channel count, `n_future` the number of
/// predicted future steps.
pub fn init_sti(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &StiConfig,
    t: usize,
    n_future: usize,
    c_feat: usize,
) -> Result<(), NnError> {
    init_res_block(store, rng, &format!("{name}.fuse"), 2 * t * c_feat, cfg.d_c, 1)?;
    add_linear(store, rng, &format!("{name}.path1"), 2 * (t - 1), cfg.d_path)?;
    add_linear(store, rng, &format!("{name}.path2"), cfg.d_path, cfg.d_path)?;
    let d_f = cfg.d_f();
    add_linear(store, rng, &format!("{name}.phi1"), d_f, cfg.d_att)?;
    add_linear(store, rng, &format!("{name}.phi2"), d_f, cfg.d_att)?;
    add_linear(store, rng, &format!("{name}.att1"), cfg.d_att, 1)?;
    store.add(&format!("{name}.att2.w"), he_normal(rng, &[cfg.d_att, 1], cfg.d_att))?;
    add_linear(store, rng, &format!("{name}.gamma1"), d_f, cfg.d_g)?;
    store.add(&format!("{name}.gamma2.w"), he_normal(rng, &[d_f, cfg.d_g], d_f))?;
    add_linear(store, rng, &format!("{name}.cls"), d_f, 1)?;
    let cls_b = store.slot(&format!("{name}.cls.b"))?;
    store.by_slot_mut(cls_b).data_mut().fill(crate::trpn::CLS_PRIOR_LOGIT);
    add_linear(store, rng, &format!("{name}.cur"), d_f, 5)?;
    add_linear(store, rng, &format!("{name}.future"), d_f + cfg.d_g, 3 * n_future)?;
    Ok(())
}

/// Ground truth for the second stage: the current box plus future boxes at
/// each prediction horizon (None where unobserved).
#[derive(Clone, Debug)]
pub struct GtWithFuture {
    pub current: BevBox5,
    pub future: Vec<Option<BevBox5>>,
}

/// Per-proposal supervision; future targets are laid out as one
/// (n, 3 * n_future) block with per-step masks over the step's columns.
#[derive(Clone, Debug)]
pub struct StiTargets {
    pub cls: Tensor,
    pub cls_mask: Tensor,
    pub cur: Tensor,
    pub cur_mask: Tensor,
    pub future: Tensor,
    pub future_mask: Vec<Tensor>,
    pub assigned: Vec<Option<usize>>,
}

impl StiTargets {
    pub fn positives(&self) -> usize {
        self.cur_mask.data().iter().filter(|&&m| m != 0.0).count() / 5
    }
}

/// Assigns proposals to ground truth with the first-stage rule, treating
/// each proposal's current box as its anchor, and encodes future-step
/// targets against that same box.
pub fn assign_proposal_targets(
    proposals: &[TemporalProposal],
    gts: &[GtWithFuture],
    n_future: usize,
    cfg: &AssignerConfig,
    nrm: Normalizer,
) -> Result<StiTargets, StiError> {
    let anchors: Vec<BevBox5> = proposals.iter().map(|p| *p.current()).collect();
    let tracks: Vec<GtTrack> = gts
        .iter()
        .map(|gt| GtTrack { current: gt.current, past: gt.future.clone() })
        .collect();
    let base = trpn::assign_targets(&anchors, &tracks, n_future, cfg, nrm)?;

    let n = proposals.len();
    let mut future = Tensor::zeros(&[n, 3 * n_future]);
    let mut future_mask = vec![Tensor::zeros(&[n, 3 * n_future]); n_future];
    for j in 0..n_future {
        let src = base.past[j].data();
        let msk = base.past_mask[j].data();
        for i in 0..n {
            for k in 0..3 {
                future.data_mut()[i * 3 * n_future + 3 * j + k] = src[i * 3 + k];
                future_mask[j].data_mut()[i * 3 * n_future + 3 * j + k] = msk[i * 3 + k];
            }
        }
    }
    Ok(StiTargets {
        cls: base.cls,
        cls_mask: base.cls_mask,
        cur: base.cur,
        cur_mask: base.cur_mask,
        future,
        future_mask,
        assigned: base.assigned,
    })
}

pub struct StiLossBreakdown {
    pub total: Var,
    pub cls: f64,
    pub cur: f64,
    pub future: f64,
}

/// Second-stage loss: classification over positives + negatives, current
/// refinement over positives, and a sum over future steps of per-step
/// masked means.
pub fn second_stage_loss(
    g: &mut Graph,
    cls: Var,
    cur: Var,
    future: Var,
    targets: &StiTargets,
    w: &LossWeights,
) -> Result<StiLossBreakdown, StiError> {
    let mut total = g.input(Tensor::scalar(0.0));
    let mut values = [0.0; 3];

    let t_cls = g.input(targets.cls.clone());
    let cls_elems = g.bce_with_logits(cls, t_cls)?;
    if let Some(term) = trpn::masked_mean(g, cls_elems, &targets.cls_mask, 1.0)? {
        values[0] = g.scalar_value(term);
        let weighted = g.scale(term, w.cls);
        total = g.add(total, weighted)?;
    }

    let t_cur = g.input(targets.cur.clone());
    let cur_elems = g.smooth_l1(cur, t_cur)?;
    if let Some(term) = trpn::masked_mean(g, cur_elems, &targets.cur_mask, 5.0)? {
        values[1] = g.scalar_value(term);
        let weighted = g.scale(term, w.cur_reg);
        total = g.add(total, weighted)?;
    }

    let t_future = g.input(targets.future.clone());
    let fut_elems = g.smooth_l1(future, t_future)?;
    for mask in &targets.future_mask {
        if let Some(term) = trpn::masked_mean(g, fut_elems, mask, 3.0)? {
            values[2] += g.scalar_value(term);
            let weighted = g.scale(term, w.past_reg);
            total = g.add(total, weighted)?;
        }
    }

    Ok(StiLossBreakdown { total, cls: values[0], cur: values[1], future: values[2] })
}

/// One predicted future pose per horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuturePose {
    pub x: f64,
    pub y: f64,
    pub h: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FutureTrajectory {
    pub poses: Vec<FuturePose>,
}

/// Decodes head outputs into final detections: refined current boxes and
/// future poses, both decoded against each proposal's current box, then
/// NMS on the refined boxes. Survivors keep their trajectories.
pub fn final_detections(
    proposals: &[TemporalProposal],
    cls: &Tensor,
    cur: &Tensor,
    future: &Tensor,
    nrm: Normalizer,
    nms_iou: f64,
) -> Result<Vec<Detection>, StiError> {
    let n = proposals.len();
    if cls.len() != n || cur.len() != n * 5 || future.len() % 3 != 0 {
        return Err(StiError::Layout(format!(
            "head shapes ({}, {}, {}) do not fit {n} proposals",
            cls.len(),
            cur.len(),
            future.len()
        )));
    }
    let n_future = if n == 0 { 0 } else { future.len() / (3 * n) };

    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut trajectories = Vec::with_capacity(n);
    for (i, p) in proposals.iter().enumerate() {
        let anchor = p.current();
        let d: [f64; 5] = cur.data()[i * 5..(i + 1) * 5].try_into().expect("row of 5");
        boxes.push(decode_current(anchor, &d, nrm).bev);
        scores.push(sigmoid(cls.data()[i]));
        let mut poses = Vec::with_capacity(n_future);
        for j in 0..n_future {
            let row = &future.data()[(i * n_future + j) * 3..(i * n_future + j) * 3 + 3];
            let d3: [f64; 3] = row.try_into().expect("row of 3");
            let b = trpn::decode_past(anchor, &d3, nrm).bev;
            poses.push(FuturePose { x: b.x, y: b.y, h: wrap_angle(b.h) });
        }
        trajectories.push(FutureTrajectory { poses });
    }

    let kept = nms(&boxes, &scores, nms_iou)?;
    Ok(kept
        .into_iter()
        .map(|k| Detection {
            bev: boxes[k],
            score: scores[k],
            future: trajectories[k].clone(),
        })
        .collect())
}
