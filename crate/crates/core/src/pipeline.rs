//! End-to-end assembly: raw sweeps through the pillar encoder, the shared
//! backbone, the temporal proposal head, and the second stage, plus the
//! training loop, checkpointing, inference, evaluation, and stage timing.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::geometry::BevBox5;
use crate::metrics::{
    self, Detection, EvalFrame, GroundTruthObject, MetricsError, ReportLine,
};
use crate::nn::{
    adam_step, backbone, init_backbone, AdamState, Binder, CheckpointError, Graph, NnError,
    ParamStore, Tensor, Var,
};
use crate::pillars::{
    group_frames, init_pillar_encoder, pillar_encode, voxelize, GridConfig, PillarError,
    VoxelizedFrame, POINT_FEATURES,
};
use crate::simworld::{label_groups, GroupingConfig, PointCloudFrame, Scene, SimError};
use crate::sti::{
    assign_proposal_targets, final_detections, fuse_local, history_path_feature, init_sti,
    interaction, local_dynamic_feature, local_geometry_feature, second_stage_loss, sti_heads,
    FuturePose, FutureTrajectory, GtWithFuture, StiError, StiHeads,
};
use crate::trpn::{
    anchor_norm, assign_targets, build_anchor_grid, generate_proposals, init_trpn_head, trpn_head,
    trpn_loss, GtTrack, Normalizer, TemporalProposal, TrpnError, TrpnHead,
};

/// Fixed per-feature scale applied to decorated point features before the
/// encoder, in place of any normalization layer. Each entry divides out
/// the feature's full-range spread so every channel reaches the encoder
/// at unit order; absolute coordinates span tens of meters while the
/// cell and centroid offsets span fractions of one.
/// Order matches the decoration: [x, y, z, dx_cell, dy_cell,
/// dx_centroid, dy_centroid, dz_centroid].
pub const INPUT_SCALE: [f64; POINT_FEATURES] = [0.05, 0.05, 0.5, 6.0, 6.0, 3.0, 3.0, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Pillar(#[from] PillarError),
    #[error(transparent)]
    Trpn(#[from] TrpnError),
    #[error(transparent)]
    Sti(#[from] StiError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("loss became non-finite at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("no scenes to train on")]
    NoScenes,
}

/// Registers every parameter under fixed names, seeded by the run seed.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore, PipelineError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_pillar_encoder(&mut store, &mut rng, "pillar", cfg.pillar_channels)?;
    let bcfg = cfg.backbone();
    init_backbone(&mut store, &mut rng, "backbone", &bcfg)?;
    // The head sees the t per-frame feature maps concatenated on channels.
    init_trpn_head(&mut store, &mut rng, "trpn", bcfg.out_channels() * cfg.t, &cfg.trpn_head())?;
    init_sti(&mut store, &mut rng, "sti", &cfg.sti(), cfg.t, cfg.n_future, bcfg.out_channels())?;
    Ok(store)
}

/// Bins and decorates every raw sweep, applying the fixed input scale.
pub fn voxelize_frames(grid: &GridConfig, frames: &[PointCloudFrame]) -> Vec<VoxelizedFrame> {
    frames
        .iter()
        .map(|f| {
            let mut vf = voxelize(&f.points, grid);
            for (i, v) in vf.features.iter_mut().enumerate() {
                *v *= INPUT_SCALE[i % POINT_FEATURES];
            }
            vf
        })
        .collect()
}

/// Per-pseudo-frame backbone features, oldest first, with encoder and
/// backbone weights shared across frames.
fn backbone_features(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &RunConfig,
    grid: &GridConfig,
    vox: &[VoxelizedFrame],
) -> Result<Vec<Var>, PipelineError> {
    let mut pseudo = Vec::with_capacity(vox.len());
    for vf in vox {
        pseudo.push(pillar_encode(g, binder, vf, grid, "pillar", cfg.pillar_channels)?);
    }
    let grouped = group_frames(g, &pseudo, cfg.t)?;
    let bcfg = cfg.backbone();
    let mut feats = Vec::with_capacity(cfg.t);
    for x in grouped {
        feats.push(backbone(g, binder, x, "backbone", &bcfg)?);
    }
    Ok(feats)
}

/// Multiplies the (dx, dy) entries of each regression row by 1/norm of the
/// row's anchor, leaving size and heading entries alone. Position targets
/// are encoded divided by the anchor norm, so without this fixed gain a
/// shared head would need a different output scale at every range; with it
/// the learned filters regress metric offsets everywhere while targets and
/// decode keep the normalized encoding. `period` is the per-box stride
/// inside a row (5 for current boxes, 3 for past or future steps).
fn position_gain(
    g: &mut Graph,
    map: Var,
    anchors: &[BevBox5],
    nrm: Normalizer,
    period: usize,
) -> Result<Var, PipelineError> {
    let shape = g.value(map).shape().to_vec();
    if shape.len() != 2 || shape[0] != anchors.len() || shape[1] % period != 0 {
        return Err(PipelineError::Layout(format!(
            "regression map {shape:?} does not cover {} anchors in strides of {period}",
            anchors.len()
        )));
    }
    let width = shape[1];
    let mut data = vec![1.0; anchors.len() * width];
    for (i, a) in anchors.iter().enumerate() {
        let s = 1.0 / anchor_norm(a, nrm);
        for k in (0..width).step_by(period) {
            data[i * width + k] = s;
            data[i * width + k + 1] = s;
        }
    }
    let gain = g.input(Tensor::from_vec(&[anchors.len(), width], data)?);
    Ok(g.mul(map, gain)?)
}

/// First-stage forward pass over one scene's raw frames.
pub struct ModelForward {
    pub feats: Vec<Var>,
    pub head: TrpnHead,
    pub anchors: Vec<BevBox5>,
}

pub fn forward_model(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &RunConfig,
    grid: &GridConfig,
    frames: &[PointCloudFrame],
) -> Result<ModelForward, PipelineError> {
    if frames.len() != cfg.t_prime {
        return Err(PipelineError::Layout(format!(
            "scene has {} raw frames, config wants {}",
            frames.len(),
            cfg.t_prime
        )));
    }
    let vox = voxelize_frames(grid, frames);
    let feats = backbone_features(g, binder, cfg, grid, &vox)?;
    let raw = trpn_head(g, binder, &feats, "trpn", &cfg.trpn_head())?;
    let anchors = build_anchor_grid(grid, &cfg.anchor_priors());
    let cur = position_gain(g, raw.cur, &anchors, cfg.normalizer, 5)?;
    let mut past = Vec::with_capacity(raw.past.len());
    for &m in &raw.past {
        past.push(position_gain(g, m, &anchors, cfg.normalizer, 3)?);
    }
    let head = TrpnHead { cls: raw.cls, cur, past };
    Ok(ModelForward { feats, head, anchors })
}

/// Decodes the current head values into temporal proposals. The values are
/// copied out of the graph: proposal coordinates carry no gradient, while
/// the feature crops they select still do.
pub fn proposals_from_head(
    g: &Graph,
    fw: &ModelForward,
    cfg: &RunConfig,
) -> Result<Vec<TemporalProposal>, TrpnError> {
    let past: Vec<Tensor> = fw.head.past.iter().map(|&v| g.value(v).clone()).collect();
    generate_proposals(
        g.value(fw.head.cls),
        g.value(fw.head.cur),
        &past,
        &fw.anchors,
        cfg.normalizer,
        &cfg.proposals(),
    )
}

/// Second-stage features and heads over a fixed proposal set.
pub struct SecondStage {
    pub f_mat: Var,
    pub g_mat: Var,
    pub heads: StiHeads,
}

pub fn second_stage(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &RunConfig,
    grid: &GridConfig,
    feats: &[Var],
    proposals: &[TemporalProposal],
) -> Result<SecondStage, PipelineError> {
    if proposals.is_empty() {
        return Err(PipelineError::Layout("second stage needs at least one proposal".into()));
    }
    let scfg = cfg.sti();
    let mode = cfg.standing_box_mode();
    let mut rows = Vec::with_capacity(proposals.len());
    for p in proposals {
        let geo = local_geometry_feature(g, feats, p, grid, mode, scfg.s)?;
        let (dynamic, _) = local_dynamic_feature(g, feats, p, grid, mode, scfg.s)?;
        let path = history_path_feature(g, binder, p, "sti", &scfg)?;
        rows.push(fuse_local(g, binder, &geo, &dynamic, path, "sti", &scfg)?);
    }
    let f_mat = g.stack_rows(&rows)?;
    let g_mat = if scfg.use_interaction {
        interaction(g, binder, f_mat, "sti")?.emb
    } else {
        g.input(Tensor::zeros(&[proposals.len(), scfg.d_g]))
    };
    let raw = sti_heads(g, binder, f_mat, g_mat, "sti")?;
    // The local features are position-discarded, so the heads cannot learn
    // the per-proposal residual scale themselves; apply it as a fixed gain.
    let bases: Vec<BevBox5> = proposals.iter().map(|p| *p.current()).collect();
    let cur = position_gain(g, raw.cur, &bases, cfg.normalizer, 5)?;
    let future = position_gain(g, raw.future, &bases, cfg.normalizer, 3)?;
    let heads = StiHeads { cls: raw.cls, cur, future };
    Ok(SecondStage { f_mat, g_mat, heads })
}

/// Ground truth aligned to the model's frames.
pub struct SceneTargets {
    pub tracks: Vec<GtTrack>,
    pub futures: Vec<GtWithFuture>,
}

/// Builds supervision for one scene. Each past pseudo frame references the
/// newest raw sweep of its chunk: with chunks of r raw frames, pseudo
/// frame -j maps to raw index (t - j) * r - 1.
pub fn scene_targets(scene: &Scene, cfg: &RunConfig) -> Result<SceneTargets, PipelineError> {
    let r = cfg.frames_per_group();
    let mut tracks = Vec::with_capacity(scene.pedestrians.len());
    let mut futures = Vec::with_capacity(scene.pedestrians.len());
    for ped in &scene.pedestrians {
        if ped.history.len() != cfg.t_prime {
            return Err(PipelineError::Layout(format!(
                "track has {} history boxes, config wants {}",
                ped.history.len(),
                cfg.t_prime
            )));
        }
        if ped.future.len() != cfg.n_future {
            return Err(PipelineError::Layout(format!(
                "track has {} future boxes, config wants {}",
                ped.future.len(),
                cfg.n_future
            )));
        }
        let current = *ped.current();
        let past = (1..cfg.t).map(|j| Some(ped.history[(cfg.t - j) * r - 1])).collect();
        tracks.push(GtTrack { current, past });
        futures.push(GtWithFuture {
            current,
            future: ped.future.iter().copied().map(Some).collect(),
        });
    }
    Ok(SceneTargets { tracks, futures })
}

/// Per-term loss values for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub total: f64,
    pub t_cls: f64,
    pub t_cur: f64,
    pub t_past: f64,
    pub s_cls: f64,
    pub s_cur: f64,
    pub s_future: f64,
}

pub struct BuiltLoss {
    pub total: Var,
    pub values: LossValues,
    pub proposals: Vec<TemporalProposal>,
    pub stage2_positives: usize,
}

/// Builds the joint loss graph for one scene: first-stage loss over the
/// anchor grid plus the second-stage loss over proposals. Passing
/// `fixed_proposals` reuses a known set instead of decoding the head, which
/// makes the loss a smooth function of the parameters.
pub fn build_loss(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &RunConfig,
    grid: &GridConfig,
    scene: &Scene,
    targets: &SceneTargets,
    fixed_proposals: Option<&[TemporalProposal]>,
) -> Result<BuiltLoss, PipelineError> {
    let fw = forward_model(g, binder, cfg, grid, &scene.frames)?;
    let t_targets =
        assign_targets(&fw.anchors, &targets.tracks, cfg.t - 1, &cfg.assigner(), cfg.normalizer)?;
    let l1 = trpn_loss(g, fw.head.cls, fw.head.cur, &fw.head.past, &t_targets, &cfg.first_stage_weights())?;

    let proposals = match fixed_proposals {
        Some(p) => p.to_vec(),
        None => proposals_from_head(g, &fw, cfg)?,
    };

    let mut total = l1.total;
    let mut values = LossValues {
        t_cls: l1.cls,
        t_cur: l1.cur,
        t_past: l1.past,
        ..Default::default()
    };
    let mut stage2_positives = 0;
    if !proposals.is_empty() {
        let st = assign_proposal_targets(
            &proposals,
            &targets.futures,
            cfg.n_future,
            &cfg.assigner(),
            cfg.normalizer,
        )?;
        stage2_positives = st.positives();
        let ss = second_stage(g, binder, cfg, grid, &fw.feats, &proposals)?;
        let l2 = second_stage_loss(
            g,
            ss.heads.cls,
            ss.heads.cur,
            ss.heads.future,
            &st,
            &cfg.second_stage_weights(),
        )?;
        values.s_cls = l2.cls;
        values.s_cur = l2.cur;
        values.s_future = l2.future;
        total = g.add(total, l2.total)?;
    }
    values.total = g.scalar_value(total);
    Ok(BuiltLoss { total, values, proposals, stage2_positives })
}

/// Everything training mutates: parameters plus optimizer moments. The
/// optimizer step count doubles as the global step counter, so a resumed
/// run continues the scene schedule exactly where it stopped.
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
}

impl TrainState {
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

pub fn init_train_state(cfg: &RunConfig) -> Result<TrainState, PipelineError> {
    let store = init_params(cfg)?;
    let adam = AdamState::new(&store);
    Ok(TrainState { store, adam })
}

/// One completed optimization step, for the loss log.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    /// 0-based index of the completed step.
    pub step: u64,
    pub scene: usize,
    pub values: LossValues,
    pub proposals: usize,
    pub stage2_positives: usize,
}

/// Runs `steps` optimization steps, cycling through the scenes in order.
/// Aborts with the step index when the loss stops being finite.
pub fn train_steps(
    cfg: &RunConfig,
    scenes: &[Scene],
    state: &mut TrainState,
    steps: usize,
    mut sink: impl FnMut(&StepLog),
) -> Result<(), PipelineError> {
    if scenes.is_empty() {
        return Err(PipelineError::NoScenes);
    }
    let grid = cfg.grid()?;
    let acfg = cfg.adam();
    for _ in 0..steps {
        let step = state.adam.step;
        let scene_idx = (step % scenes.len() as u64) as usize;
        let scene = &scenes[scene_idx];
        let targets = scene_targets(scene, cfg)?;

        let (by_slot, values, n_proposals, stage2_positives) = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&state.store);
            let built = build_loss(&mut g, &mut binder, cfg, &grid, scene, &targets, None)?;
            if !built.values.total.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step, value: built.values.total });
            }
            let grads = g.backward(built.total)?;
            let mut by_slot: Vec<Option<Tensor>> = vec![None; state.store.len()];
            for &(slot, var) in g.param_vars() {
                by_slot[slot] = grads.get(var).cloned();
            }
            (by_slot, built.values, built.proposals.len(), built.stage2_positives)
        };
        adam_step(&mut state.store, &mut state.adam, &acfg, &by_slot);
        sink(&StepLog { step, scene: scene_idx, values, proposals: n_proposals, stage2_positives });
    }
    Ok(())
}

const PARAMS_FILE: &str = "params.ckpt";
const OPTIM_FILE: &str = "optim.ckpt";

/// Writes parameters and optimizer moments into `dir`, creating it.
pub fn save_train_state(dir: &Path, state: &TrainState) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    state.store.save(&dir.join(PARAMS_FILE))?;
    let mut opt = ParamStore::new();
    opt.add("step", Tensor::scalar(state.adam.step as f64))?;
    for slot in 0..state.store.len() {
        let name = state.store.name_of(slot);
        opt.add(&format!("m.{name}"), state.adam.m[slot].clone())?;
        opt.add(&format!("v.{name}"), state.adam.v[slot].clone())?;
    }
    opt.save(&dir.join(OPTIM_FILE))?;
    Ok(())
}

pub fn load_train_state(dir: &Path) -> Result<TrainState, PipelineError> {
    let store = ParamStore::load(&dir.join(PARAMS_FILE))?;
    let opt = ParamStore::load(&dir.join(OPTIM_FILE))?;
    let mut adam = AdamState::new(&store);
    adam.step = opt.get("step")?.data()[0] as u64;
    for slot in 0..store.len() {
        let name = store.name_of(slot).to_string();
        let m = opt.get(&format!("m.{name}"))?;
        let v = opt.get(&format!("v.{name}"))?;
        if m.shape() != store.by_slot(slot).shape() || v.shape() != store.by_slot(slot).shape() {
            return Err(PipelineError::Layout(format!(
                "optimizer moments for {name} do not match the parameter shape"
            )));
        }
        adam.m[slot] = m.clone();
        adam.v[slot] = v.clone();
    }
    Ok(TrainState { store, adam })
}

/// Full forward pass on one scene: final detections above the score
/// threshold, each with its predicted trajectory.
pub fn infer_scene(
    cfg: &RunConfig,
    grid: &GridConfig,
    store: &ParamStore,
    scene: &Scene,
) -> Result<Vec<Detection>, PipelineError> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store);
    let fw = forward_model(&mut g, &mut binder, cfg, grid, &scene.frames)?;
    let proposals = proposals_from_head(&g, &fw, cfg)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let ss = second_stage(&mut g, &mut binder, cfg, grid, &fw.feats, &proposals)?;
    let dets = final_detections(
        &proposals,
        g.value(ss.heads.cls),
        g.value(ss.heads.cur),
        g.value(ss.heads.future),
        cfg.normalizer,
        cfg.final_nms_iou,
    )?;
    Ok(dets.into_iter().filter(|d| d.score >= cfg.score_threshold).collect())
}

/// Evaluation-side ground truth for one scene: current boxes, future
/// poses, lidar point counts, and group labels.
pub fn scene_ground_truth(
    scene: &Scene,
    cfg: &RunConfig,
) -> Result<Vec<GroundTruthObject>, PipelineError> {
    let groups = label_groups(&scene.pedestrians, cfg.frame_dt_s, &GroupingConfig::default())?;
    let current = scene
        .frames
        .last()
        .ok_or_else(|| PipelineError::Layout("scene has no frames".into()))?;
    Ok(scene
        .pedestrians
        .iter()
        .zip(groups)
        .map(|(ped, group_id)| {
            let bev = *ped.current();
            let point_count = current
                .points
                .iter()
                .filter(|p| bev.contains_point(p.x as f64, p.y as f64))
                .count();
            let poses =
                ped.future.iter().map(|b| FuturePose { x: b.x, y: b.y, h: b.h }).collect();
            GroundTruthObject { bev, future: FutureTrajectory { poses }, point_count, group_id }
        })
        .collect())
}

pub struct Evaluation {
    pub frames: Vec<EvalFrame>,
    pub lines: Vec<ReportLine>,
}

/// Runs inference over held-out scenes and assembles the metric report.
pub fn evaluate(
    cfg: &RunConfig,
    store: &ParamStore,
    scenes: &[Scene],
) -> Result<Evaluation, PipelineError> {
    let grid = cfg.grid()?;
    let mut frames = Vec::with_capacity(scenes.len());
    for scene in scenes {
        frames.push(EvalFrame {
            dets: infer_scene(cfg, &grid, store, scene)?,
            gts: scene_ground_truth(scene, cfg)?,
        });
    }
    let lines = report_lines(cfg, &frames)?;
    Ok(Evaluation { frames, lines })
}

/// Detection AP, per-horizon displacement errors, hit rates, and the
/// trajectory-length breakdown, as report lines.
pub fn report_lines(
    cfg: &RunConfig,
    frames: &[EvalFrame],
) -> Result<Vec<ReportLine>, PipelineError> {
    let mut lines = Vec::new();
    let total_gts: usize = frames.iter().map(|f| f.gts.len()).sum();
    lines.push(ReportLine::new("bev_ap", metrics::bev_ap(frames, cfg.eval_iou), total_gts));

    let pairs = metrics::matched_pairs(frames, cfg.eval_iou);
    let horizon = |j: usize| (j + 1) as f64 * cfg.future_dt_s;
    match metrics::displacement_errors(&pairs)? {
        Some(m) => {
            for (j, de) in m.de_cm.iter().enumerate() {
                lines.push(ReportLine::new(format!("de_cm@{}s", horizon(j)), Some(*de), m.pairs));
            }
            lines.push(ReportLine::new("ade_cm", Some(m.ade_cm), m.pairs));
            for (j, hr) in m.hit_rate.iter().enumerate() {
                lines.push(ReportLine::new(format!("hr@{}s", horizon(j)), Some(*hr), m.pairs));
            }
        }
        None => {
            for j in 0..cfg.n_future {
                lines.push(ReportLine::new(format!("de_cm@{}s", horizon(j)), None, 0));
            }
            lines.push(ReportLine::new("ade_cm", None, 0));
            for j in 0..cfg.n_future {
                lines.push(ReportLine::new(format!("hr@{}s", horizon(j)), None, 0));
            }
        }
    }

    let bins = metrics::breakdown_by_trajectory_length(
        frames,
        cfg.eval_iou,
        cfg.breakdown_bin_m,
        cfg.fp_attribution.into(),
    )?;
    for bin in bins {
        let tag = if bin.hi_m.is_finite() {
            format!("[{},{})", bin.lo_m, bin.hi_m)
        } else {
            format!("[{},inf)", bin.lo_m)
        };
        lines.push(ReportLine::new(format!("ap{tag}"), bin.ap, bin.gt_count));
        let (ade, n) = match &bin.trajectory {
            Some(t) => (Some(t.ade_cm), t.pairs),
            None => (None, 0),
        };
        lines.push(ReportLine::new(format!("ade_cm{tag}"), ade, n));
    }
    Ok(lines)
}

/// Wall-clock summary of one pipeline stage.
#[derive(Clone, Debug)]
pub struct StageTiming {
    pub stage: &'static str,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
}

fn quantiles(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = samples[(n - 1) / 2];
    let p95 = samples[(((n as f64) * 0.95).ceil() as usize).clamp(1, n) - 1];
    (median, p95)
}

/// Times each stage of the forward pass on one scene: binning, encoder +
/// backbone, proposal head + decoding, second stage, and final decoding
/// with NMS. Runs after `warmup` discarded passes.
pub fn benchmark_stages(
    cfg: &RunConfig,
    store: &ParamStore,
    scene: &Scene,
    warmup: usize,
    runs: usize,
) -> Result<Vec<StageTiming>, PipelineError> {
    if runs == 0 {
        return Err(PipelineError::Layout("benchmark needs at least one run".into()));
    }
    let grid = cfg.grid()?;
    let stages = ["voxelize", "backbone", "trpn", "sti", "nms"];
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); stages.len()];

    for it in 0..warmup + runs {
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let mut spans = [0.0f64; 5];

        let t0 = Instant::now();
        let vox = voxelize_frames(&grid, &scene.frames);
        spans[0] = t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        let feats = backbone_features(&mut g, &mut binder, cfg, &grid, &vox)?;
        spans[1] = t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        let head = trpn_head(&mut g, &mut binder, &feats, "trpn", &cfg.trpn_head())?;
        let anchors = build_anchor_grid(&grid, &cfg.anchor_priors());
        let fw = ModelForward { feats, head, anchors };
        let proposals = proposals_from_head(&g, &fw, cfg)?;
        spans[2] = t0.elapsed().as_secs_f64() * 1e3;

        if proposals.is_empty() {
            return Err(PipelineError::Layout("benchmark scene produced no proposals".into()));
        }
        let t0 = Instant::now();
        let ss = second_stage(&mut g, &mut binder, cfg, &grid, &fw.feats, &proposals)?;
        spans[3] = t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        let _ = final_detections(
            &proposals,
            g.value(ss.heads.cls),
            g.value(ss.heads.cur),
            g.value(ss.heads.future),
            cfg.normalizer,
            cfg.final_nms_iou,
        )?;
        spans[4] = t0.elapsed().as_secs_f64() * 1e3;

        if it >= warmup {
            for (bucket, span) in samples.iter_mut().zip(spans) {
                bucket.push(span);
            }
        }
    }

    Ok(stages
        .iter()
        .zip(&mut samples)
        .map(|(stage, bucket)| {
            let (median_ms, p95_ms) = quantiles(bucket);
            StageTiming { stage, median_ms, p95_ms, runs }
        })
        .collect())
}
