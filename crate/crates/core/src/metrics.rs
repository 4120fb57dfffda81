//! Detection and trajectory evaluation: greedy IoU matching with a
//! hard-example rule, average precision over the continuous precision
//! envelope, displacement errors, and path-length breakdowns.

use crate::geometry::{rotated_iou, BevBox5};
use crate::sti::FutureTrajectory;

/// Ground truth boxes holding fewer points than this are hard examples:
/// excluded from matching, and detections overlapping only them are
/// neither true nor false positives.
pub const HARD_POINT_COUNT: usize = 5;

/// A matched pair whose center distance stays within this is a hit.
pub const HIT_THRESHOLD_M: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("future horizon mismatch: expected {expected} steps, found {found}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("matched pairs carry no future steps")]
    EmptyHorizon,
    #[error("bin size must be positive, got {0}")]
    BadBinSize(f64),
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub bev: BevBox5,
    pub score: f64,
    pub future: FutureTrajectory,
}

#[derive(Clone, Debug)]
pub struct GroundTruthObject {
    pub bev: BevBox5,
    pub future: FutureTrajectory,
    /// Lidar points inside the current box.
    pub point_count: usize,
    pub group_id: Option<usize>,
}

impl GroundTruthObject {
    pub fn is_hard(&self) -> bool {
        self.point_count < HARD_POINT_COUNT
    }

    /// Polyline length from the current center through every future
    /// waypoint, in meters.
    pub fn future_path_length(&self) -> f64 {
        let mut prev = (self.bev.x, self.bev.y);
        let mut total = 0.0;
        for p in &self.future.poses {
            total += ((p.x - prev.0).powi(2) + (p.y - prev.1).powi(2)).sqrt();
            prev = (p.x, p.y);
        }
        total
    }
}

/// One scene's predictions next to its ground truth.
#[derive(Clone, Debug, Default)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruthObject>,
}

/// Outcome of matching one frame. Indices refer to the input slices;
/// `pairs` is ordered by descending detection score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    /// Detections whose only overlaps at the threshold are hard gts.
    pub ignored: Vec<usize>,
    /// Non-hard gts left unmatched.
    pub missed: Vec<usize>,
}

/// Greedy matching in descending score order: each detection claims the
/// highest-IoU still-unclaimed non-hard gt at or above the threshold. Hard
/// gts are never claimed; a detection overlapping an already-claimed
/// non-hard gt is a false positive even if it also overlaps a hard gt.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for &di in &order {
        let mut best: Option<(f64, usize)> = None;
        let mut soft_overlap = false;
        let mut hard_overlap = false;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = rotated_iou(&dets[di].bev, &gt.bev);
            if iou < iou_thresh {
                continue;
            }
            if gt.is_hard() {
                hard_overlap = true;
                continue;
            }
            soft_overlap = true;
            if !taken[gi] && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                out.pairs.push((di, gi));
            }
            None if hard_overlap && !soft_overlap => out.ignored.push(di),
            None => out.false_positives.push(di),
        }
    }
    for (gi, gt) in gts.iter().enumerate() {
        if !gt.is_hard() && !taken[gi] {
            out.missed.push(gi);
        }
    }
    out
}

/// Matched (detection, gt) pairs pooled over frames.
pub fn matched_pairs<'a>(
    frames: &'a [EvalFrame],
    iou_thresh: f64,
) -> Vec<(&'a Detection, &'a GroundTruthObject)> {
    let mut out = Vec::new();
    for f in frames {
        for (di, gi) in match_detections(&f.dets, &f.gts, iou_thresh).pairs {
            out.push((&f.dets[di], &f.gts[gi]));
        }
    }
    out
}

/// Labeled detection pooled across frames for PR accumulation.
struct Labeled {
    score: f64,
    frame: usize,
    det: usize,
    tp: bool,
}

fn ap_from_labeled(mut items: Vec<Labeled>, positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.det.cmp(&b.det))
    });
    let mut precision = Vec::with_capacity(items.len());
    let mut recall = Vec::with_capacity(items.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for it in &items {
        if it.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..items.len() {
        if recall[i] > prev {
            ap += (recall[i] - prev) * precision[i];
            prev = recall[i];
        }
    }
    Some(ap)
}

/// Average precision at the given IoU threshold over all operating points:
/// the area under the precision envelope of the pooled PR curve. Absent
/// when there are no non-hard gts.
pub fn bev_ap(frames: &[EvalFrame], iou_thresh: f64) -> Option<f64> {
    let mut items = Vec::new();
    let mut positives = 0;
    for (fi, f) in frames.iter().enumerate() {
        positives += f.gts.iter().filter(|g| !g.is_hard()).count();
        let m = match_detections(&f.dets, &f.gts, iou_thresh);
        for &(di, _) in &m.pairs {
            items.push(Labeled { score: f.dets[di].score, frame: fi, det: di, tp: true });
        }
        for &di in &m.false_positives {
            items.push(Labeled { score: f.dets[di].score, frame: fi, det: di, tp: false });
        }
    }
    ap_from_labeled(items, positives)
}

/// Displacement metrics over matched pairs. Distances are reported in
/// centimeters; hit rates are fractions within [`HIT_THRESHOLD_M`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub de_cm: Vec<f64>,
    pub ade_cm: f64,
    pub hit_rate: Vec<f64>,
    pub pairs: usize,
}

/// Per-horizon mean center distance, their mean, and hit rates. Absent
/// when no pairs matched.
pub fn displacement_errors(
    pairs: &[(&Detection, &GroundTruthObject)],
) -> Result<Option<TrajectoryMetrics>, MetricsError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let horizons = pairs[0].1.future.poses.len();
    if horizons == 0 {
        return Err(MetricsError::EmptyHorizon);
    }
    for (d, g) in pairs {
        for found in [d.future.poses.len(), g.future.poses.len()] {
            if found != horizons {
                return Err(MetricsError::HorizonMismatch { expected: horizons, found });
            }
        }
    }
    let mut de_cm = vec![0.0; horizons];
    let mut hit_rate = vec![0.0; horizons];
    for (d, g) in pairs {
        for t in 0..horizons {
            let (dp, gp) = (&d.future.poses[t], &g.future.poses[t]);
            let dist = ((dp.x - gp.x).powi(2) + (dp.y - gp.y).powi(2)).sqrt();
            de_cm[t] += 100.0 * dist;
            if dist <= HIT_THRESHOLD_M {
                hit_rate[t] += 1.0;
            }
        }
    }
    let n = pairs.len() as f64;
    for t in 0..horizons {
        de_cm[t] /= n;
        hit_rate[t] /= n;
    }
    let ade_cm = de_cm.iter().sum::<f64>() / horizons as f64;
    Ok(Some(TrajectoryMetrics { de_cm, ade_cm, hit_rate, pairs: pairs.len() }))
}

/// Where a false positive lands in the path-length breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpAttribution {
    /// Count it against every bin (conservative).
    AllBins,
    /// Count it only against the bin of the nearest gt by current-center
    /// distance; frames without gts fall back to every bin.
    NearestGt,
}

/// One path-length bucket's metrics. `gt_count` counts every gt bucketed
/// here, hard ones included; `ap` uses non-hard gts only.
#[derive(Clone, Debug)]
pub struct LengthBin {
    pub lo_m: f64,
    pub hi_m: f64,
    pub gt_count: usize,
    pub ap: Option<f64>,
    pub trajectory: Option<TrajectoryMetrics>,
}

pub const LENGTH_BIN_COUNT: usize = 5;

fn bin_of(path_len: f64, bin_size: f64) -> usize {
    ((path_len / bin_size).floor() as usize).min(LENGTH_BIN_COUNT - 1)
}

/// Buckets gts by future path length into four bins of `bin_size` meters
/// plus an overflow bin, and evaluates AP and displacement metrics per
/// bucket. True positives follow their matched gt's bucket.
pub fn breakdown_by_trajectory_length(
    frames: &[EvalFrame],
    iou_thresh: f64,
    bin_size: f64,
    fp_attribution: FpAttribution,
) -> Result<Vec<LengthBin>, MetricsError> {
    if !(bin_size > 0.0) {
        return Err(MetricsError::BadBinSize(bin_size));
    }
    let mut items: Vec<Vec<Labeled>> = (0..LENGTH_BIN_COUNT).map(|_| Vec::new()).collect();
    let mut positives = [0usize; LENGTH_BIN_COUNT];
    let mut gt_count = [0usize; LENGTH_BIN_COUNT];
    let mut pairs: Vec<Vec<(&Detection, &GroundTruthObject)>> =
        (0..LENGTH_BIN_COUNT).map(|_| Vec::new()).collect();

    for (fi, f) in frames.iter().enumerate() {
        let gt_bins: Vec<usize> =
            f.gts.iter().map(|g| bin_of(g.future_path_length(), bin_size)).collect();
        for (g, &b) in f.gts.iter().zip(&gt_bins) {
            gt_count[b] += 1;
            if !g.is_hard() {
                positives[b] += 1;
            }
        }
        let m = match_detections(&f.dets, &f.gts, iou_thresh);
        for &(di, gi) in &m.pairs {
            let b = gt_bins[gi];
            items[b].push(Labeled { score: f.dets[di].score, frame: fi, det: di, tp: true });
            pairs[b].push((&f.dets[di], &f.gts[gi]));
        }
        for &di in &m.false_positives {
            let bins: Vec<usize> = match fp_attribution {
                FpAttribution::NearestGt if !f.gts.is_empty() => {
                    let d = &f.dets[di].bev;
                    let nearest = f
                        .gts
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| {
                            let da = (a.bev.x - d.x).powi(2) + (a.bev.y - d.y).powi(2);
                            let db = (b.bev.x - d.x).powi(2) + (b.bev.y - d.y).powi(2);
                            da.total_cmp(&db)
                        })
                        .map(|(gi, _)| gi)
                        .expect("gts nonempty");
                    vec![gt_bins[nearest]]
                }
                _ => (0..LENGTH_BIN_COUNT).collect(),
            };
            for b in bins {
                items[b].push(Labeled { score: f.dets[di].score, frame: fi, det: di, tp: false });
            }
        }
    }

    let mut out = Vec::with_capacity(LENGTH_BIN_COUNT);
    for (b, (item, pair)) in items.into_iter().zip(pairs).enumerate() {
        out.push(LengthBin {
            lo_m: b as f64 * bin_size,
            hi_m: if b + 1 == LENGTH_BIN_COUNT { f64::INFINITY } else { (b + 1) as f64 * bin_size },
            gt_count: gt_count[b],
            ap: ap_from_labeled(item, positives[b]),
            trajectory: displacement_errors(&pair)?,
        });
    }
    Ok(out)
}

/// One line of an evaluation report.
#[derive(Clone, Debug)]
pub struct ReportLine {
    pub name: String,
    pub value: Option<f64>,
    pub support: usize,
}

impl ReportLine {
    pub fn new(name: impl Into<String>, value: Option<f64>, support: usize) -> Self {
        Self { name: name.into(), value, support }
    }
}

/// Plain-text report: one metric per line as `name value support`, with
/// `absent` for metrics that have no defined value.
pub fn format_report(lines: &[ReportLine]) -> String {
    let mut out = String::new();
    for l in lines {
        match l.value {
            Some(v) => out.push_str(&format!("{} {:.6} {}\n", l.name, v, l.support)),
            None => out.push_str(&format!("{} absent {}\n", l.name, l.support)),
        }
    }
    out
}
