//! Synthetic pedestrian world: closed-form walker kinematics, shell-sampled
//! lidar-like point clouds, the location-and-speed grouping heuristic, and
//! the binary dataset format.

use std::f64::consts::TAU;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::geometry::{wrap_angle, BevBox5};
use crate::pillars::Point3;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("grouping config: {0}")]
    BadGrouping(String),
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch in scene {0}")]
    Checksum(usize),
    #[error("unknown behavior tag {0}")]
    BadBehavior(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Straight,
    Turn,
    StopGo,
    GroupFollow,
}

impl Behavior {
    fn tag(self) -> u8 {
        match self {
            Behavior::Straight => 0,
            Behavior::Turn => 1,
            Behavior::StopGo => 2,
            Behavior::GroupFollow => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self, DatasetError> {
        Ok(match t {
            0 => Behavior::Straight,
            1 => Behavior::Turn,
            2 => Behavior::StopGo,
            3 => Behavior::GroupFollow,
            other => return Err(DatasetError::BadBehavior(other)),
        })
    }
}

/// One tracked ground-truth pedestrian. `history` holds boxes at the raw
/// frame offsets, oldest first, ending with the current box; `future`
/// holds boxes at each future horizon in increasing order. Width and
/// length are constant across every box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedPedestrian {
    pub id: u32,
    pub behavior: Behavior,
    pub history: Vec<BevBox5>,
    pub future: Vec<BevBox5>,
}

impl TrackedPedestrian {
    pub fn current(&self) -> &BevBox5 {
        self.history.last().expect("history is never empty")
    }
}

/// Points of one sweep, in the shared scene coordinate system.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    /// Seconds relative to the current frame; 0 or negative.
    pub t_offset: f64,
    pub points: Vec<Point3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// Raw frames, oldest first; the last one is the current sweep.
    pub frames: Vec<PointCloudFrame>,
    pub pedestrians: Vec<TrackedPedestrian>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub solo_min: usize,
    pub solo_max: usize,
    /// Probability that a scene spawns one walking group.
    pub group_prob: f64,
    pub group_size_min: usize,
    pub group_size_max: usize,
    /// Pedestrians spawn within this half-extent around the origin.
    pub extent: f64,
    /// Raw history frames per scene.
    pub t_prime: usize,
    /// Raw frame spacing in seconds.
    pub frame_dt: f64,
    pub n_future: usize,
    /// Future horizon spacing in seconds.
    pub future_dt: f64,
    /// Uniform ground clutter points per frame.
    pub clutter: usize,
    pub ego_speed_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            solo_min: 3,
            solo_max: 8,
            group_prob: 0.5,
            group_size_min: 5,
            group_size_max: 7,
            extent: 16.0,
            t_prime: 6,
            frame_dt: 0.1,
            n_future: 6,
            future_dt: 0.5,
            clutter: 120,
            ego_speed_max: 3.0,
        }
    }
}

/// Walkers never exceed this ground speed.
pub const MAX_SPEED: f64 = 3.0;

const MAX_POINTS_PER_PED: usize = 400;

/// Group-member jitter is zero on (-JITTER_QUIET_S, inf) so the current
/// velocity estimate stays exact for grouping.
const JITTER_QUIET_S: f64 = 0.1;

/// Closed-form walker motion; `pose(tau)` is exact for any offset.
#[derive(Clone, Copy, Debug)]
enum Motion {
    Line {
        x0: f64,
        y0: f64,
        heading: f64,
        speed: f64,
    },
    Arc {
        x0: f64,
        y0: f64,
        heading0: f64,
        speed: f64,
        omega: f64,
    },
    StopGo {
        x0: f64,
        y0: f64,
        heading: f64,
        speed: f64,
        walk_t: f64,
        stop_t: f64,
        phase: f64,
    },
    /// A straight anchor plus a fixed world offset and a bounded sine
    /// jitter that fades out before the current frame and never applies
    /// to the future.
    Follow {
        anchor: (f64, f64, f64, f64),
        off: (f64, f64),
        jitter_dir: (f64, f64),
        amp: f64,
        jitter_omega: f64,
        jitter_phase: f64,
    },
}

impl Motion {
    fn pose(&self, tau: f64) -> (f64, f64, f64) {
        match *self {
            Motion::Line { x0, y0, heading, speed } => (
                x0 + speed * tau * heading.cos(),
                y0 + speed * tau * heading.sin(),
                heading,
            ),
            Motion::Arc { x0, y0, heading0, speed, omega } => {
                let h = heading0 + omega * tau;
                (
                    x0 + speed / omega * (h.sin() - heading0.sin()),
                    y0 - speed / omega * (h.cos() - heading0.cos()),
                    wrap_angle(h),
                )
            }
            Motion::StopGo { x0, y0, heading, speed, walk_t, stop_t, phase } => {
                let cycle = walk_t + stop_t;
                let walked = |u: f64| {
                    let cycles = (u / cycle).floor();
                    cycles * walk_t + (u - cycles * cycle).min(walk_t)
                };
                let s = speed * (walked(tau + phase) - walked(phase));
                (x0 + s * heading.cos(), y0 + s * heading.sin(), heading)
            }
            Motion::Follow { anchor, off, jitter_dir, amp, jitter_omega, jitter_phase } => {
                let (x0, y0, heading, speed) = anchor;
                let gate = ((-tau - JITTER_QUIET_S) / JITTER_QUIET_S).clamp(0.0, 1.0);
                let j = amp * (jitter_omega * tau + jitter_phase).sin() * gate;
                (
                    x0 + speed * tau * heading.cos() + off.0 + j * jitter_dir.0,
                    y0 + speed * tau * heading.sin() + off.1 + j * jitter_dir.1,
                    heading,
                )
            }
        }
    }
}

struct Actor {
    id: u32,
    behavior: Behavior,
    motion: Motion,
    w: f64,
    l: f64,
    /// Shell points this pedestrian returns at 5 m range.
    n5: usize,
}

impl Actor {
    fn bev_at(&self, tau: f64) -> BevBox5 {
        let (x, y, h) = self.motion.pose(tau);
        BevBox5 { x, y, w: self.w, l: self.l, h }
    }
}

fn sample_solo(rng: &mut ChaCha8Rng, cfg: &SimConfig, id: u32) -> Actor {
    let x0 = rng.random_range(-cfg.extent..cfg.extent);
    let y0 = rng.random_range(-cfg.extent..cfg.extent);
    let heading = rng.random_range(0.0..TAU);
    let speed = rng.random_range(0.5..2.0);
    let kind = rng.random_range(0..3u8);
    let (behavior, motion) = match kind {
        0 => (Behavior::Straight, Motion::Line { x0, y0, heading, speed }),
        1 => {
            let mag = rng.random_range(0.2..0.8);
            let omega = if rng.random_bool(0.5) { mag } else { -mag };
            (Behavior::Turn, Motion::Arc { x0, y0, heading0: heading, speed, omega })
        }
        _ => {
            let walk_t = rng.random_range(1.0..3.0);
            let stop_t = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..walk_t + stop_t);
            (
                Behavior::StopGo,
                Motion::StopGo { x0, y0, heading, speed, walk_t, stop_t, phase },
            )
        }
    };
    Actor {
        id,
        behavior,
        motion,
        w: rng.random_range(0.6..1.0),
        l: rng.random_range(0.6..1.0),
        n5: rng.random_range(40..=200),
    }
}

fn sample_group(rng: &mut ChaCha8Rng, cfg: &SimConfig, first_id: u32, out: &mut Vec<Actor>) {
    let x0 = rng.random_range(-cfg.extent..cfg.extent);
    let y0 = rng.random_range(-cfg.extent..cfg.extent);
    let heading = rng.random_range(0.0..TAU);
    let speed = rng.random_range(0.5..1.0);
    let size = rng.random_range(cfg.group_size_min..=cfg.group_size_max.max(cfg.group_size_min));
    for k in 0..size {
        // Offsets within a 0.8 m disc keep all pairs under the 2 m
        // grouping distance.
        let r = rng.random_range(0.0..0.8);
        let ang = rng.random_range(0.0..TAU);
        let jang = rng.random_range(0.0..TAU);
        out.push(Actor {
            id: first_id + k as u32,
            behavior: Behavior::GroupFollow,
            motion: Motion::Follow {
                anchor: (x0, y0, heading, speed),
                off: (r * ang.cos(), r * ang.sin()),
                jitter_dir: (jang.cos(), jang.sin()),
                amp: rng.random_range(0.04..0.12),
                jitter_omega: rng.random_range(2.0..5.0),
                jitter_phase: rng.random_range(0.0..TAU),
            },
            w: rng.random_range(0.6..1.0),
            l: rng.random_range(0.6..1.0),
            n5: rng.random_range(40..=200),
        });
    }
}

/// Shell points returned at range `r` by a walker returning `n5` at 5 m,
/// falling off with inverse squared range.
fn points_at_range(n5: usize, r: f64) -> usize {
    let r = r.max(1.0);
    ((n5 as f64 * 25.0 / (r * r)).round() as usize).min(MAX_POINTS_PER_PED)
}

/// Deterministic scene generation. All frames and boxes share one
/// coordinate system; ego motion enters only through the moving sensor
/// origin that sets per-frame point density, so its removal is exact by
/// construction.
pub fn simulate_scene(cfg: &SimConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego_heading = rng.random_range(0.0..TAU);
    let ego_speed = rng.random_range(0.0..=cfg.ego_speed_max.max(0.0));
    let ego_v = (ego_speed * ego_heading.cos(), ego_speed * ego_heading.sin());

    let mut actors = Vec::new();
    let n_solo = rng.random_range(cfg.solo_min..=cfg.solo_max.max(cfg.solo_min));
    for k in 0..n_solo {
        actors.push(sample_solo(&mut rng, cfg, k as u32));
    }
    if rng.random_bool(cfg.group_prob.clamp(0.0, 1.0)) {
        sample_group(&mut rng, cfg, actors.len() as u32, &mut actors);
    }

    let t_prime = cfg.t_prime.max(1);
    let pedestrians = actors
        .iter()
        .map(|a| TrackedPedestrian {
            id: a.id,
            behavior: a.behavior,
            history: (0..t_prime)
                .map(|k| a.bev_at(-((t_prime - 1 - k) as f64) * cfg.frame_dt))
                .collect(),
            future: (1..=cfg.n_future).map(|j| a.bev_at(j as f64 * cfg.future_dt)).collect(),
        })
        .collect();

    let mut frames = Vec::with_capacity(t_prime);
    for k in 0..t_prime {
        let tau = -((t_prime - 1 - k) as f64) * cfg.frame_dt;
        let origin = (ego_v.0 * tau, ego_v.1 * tau);
        let mut points = Vec::new();
        for a in &actors {
            let b = a.bev_at(tau);
            let range = ((b.x - origin.0).powi(2) + (b.y - origin.1).powi(2)).sqrt();
            let mut n = points_at_range(a.n5, range);
            if k == t_prime - 1 {
                // The current box always returns at least one point.
                n = n.max(1);
            }
            let (s, c) = b.h.sin_cos();
            for _ in 0..n {
                let psi = rng.random_range(0.0..TAU);
                // Slightly inside the box edge so f32 rounding cannot
                // push a point out of its own box.
                let radial = rng.random_range(0.87..0.97);
                let u = radial * 0.5 * b.w * psi.cos();
                let v = radial * 0.5 * b.l * psi.sin();
                points.push(Point3 {
                    x: (b.x + c * u - s * v) as f32,
                    y: (b.y + s * u + c * v) as f32,
                    z: rng.random_range(0.1..1.8) as f32,
                });
            }
        }
        let spread = cfg.extent + 2.0;
        for _ in 0..cfg.clutter {
            points.push(Point3 {
                x: rng.random_range(-spread..spread) as f32,
                y: rng.random_range(-spread..spread) as f32,
                z: rng.random_range(0.0..0.4) as f32,
            });
        }
        frames.push(PointCloudFrame { t_offset: tau, points });
    }

    Scene { seed, frames, pedestrians }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupingConfig {
    pub distance_m: f64,
    pub speed_diff: f64,
    pub min_size: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self { distance_m: 2.0, speed_diff: 0.5, min_size: 5 }
    }
}

/// Links pedestrians closer than `distance_m` whose velocity vectors
/// differ by less than `speed_diff`, takes connected components, and
/// labels components of at least `min_size` members. Velocities come from
/// the last two history boxes. Group ids are ordered by the smallest
/// member id, so labeling is invariant to input order.
pub fn label_groups(
    peds: &[TrackedPedestrian],
    frame_dt: f64,
    cfg: &GroupingConfig,
) -> Result<Vec<Option<usize>>, SimError> {
    if !(cfg.distance_m > 0.0) || !(cfg.speed_diff > 0.0) {
        return Err(SimError::BadGrouping(format!(
            "thresholds must be positive: distance {} speed {}",
            cfg.distance_m, cfg.speed_diff
        )));
    }
    if cfg.min_size == 0 {
        return Err(SimError::BadGrouping("min_size must be at least 1".into()));
    }
    if !(frame_dt > 0.0) {
        return Err(SimError::BadGrouping(format!("frame_dt must be positive, got {frame_dt}")));
    }

    let state: Vec<(f64, f64, f64, f64)> = peds
        .iter()
        .map(|p| {
            let cur = p.current();
            let (vx, vy) = match p.history.len() {
                0 | 1 => (0.0, 0.0),
                n => {
                    let prev = &p.history[n - 2];
                    ((cur.x - prev.x) / frame_dt, (cur.y - prev.y) / frame_dt)
                }
            };
            (cur.x, cur.y, vx, vy)
        })
        .collect();

    let n = peds.len();
    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    for i in 0..n {
        if component[i] != usize::MAX {
            continue;
        }
        let comp = n_components;
        n_components += 1;
        let mut queue = vec![i];
        component[i] = comp;
        while let Some(a) = queue.pop() {
            for b in 0..n {
                if component[b] != usize::MAX {
                    continue;
                }
                let d2 = (state[a].0 - state[b].0).powi(2) + (state[a].1 - state[b].1).powi(2);
                let dv2 = (state[a].2 - state[b].2).powi(2) + (state[a].3 - state[b].3).powi(2);
                if d2 < cfg.distance_m * cfg.distance_m && dv2 < cfg.speed_diff * cfg.speed_diff {
                    component[b] = comp;
                    queue.push(b);
                }
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_components];
    for (i, &c) in component.iter().enumerate() {
        members[c].push(i);
    }
    let mut groups: Vec<&Vec<usize>> =
        members.iter().filter(|m| m.len() >= cfg.min_size).collect();
    groups.sort_by_key(|m| m.iter().map(|&i| peds[i].id).min());

    let mut out = vec![None; n];
    for (gid, m) in groups.iter().enumerate() {
        for &i in m.iter() {
            out[i] = Some(gid);
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"STIK";
const VERSION: u32 = 1;

fn put_box(buf: &mut Vec<u8>, b: &BevBox5) {
    for v in [b.x, b.y, b.w, b.l, b.h] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn scene_payload(s: &Scene) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&s.seed.to_le_bytes());
    buf.extend_from_slice(&(s.frames.len() as u32).to_le_bytes());
    for f in &s.frames {
        buf.extend_from_slice(&f.t_offset.to_le_bytes());
        buf.extend_from_slice(&(f.points.len() as u32).to_le_bytes());
        for p in &f.points {
            buf.extend_from_slice(&p.x.to_le_bytes());
            buf.extend_from_slice(&p.y.to_le_bytes());
            buf.extend_from_slice(&p.z.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(s.pedestrians.len() as u32).to_le_bytes());
    for ped in &s.pedestrians {
        buf.extend_from_slice(&ped.id.to_le_bytes());
        buf.push(ped.behavior.tag());
        buf.extend_from_slice(&(ped.history.len() as u32).to_le_bytes());
        for b in &ped.history {
            put_box(&mut buf, b);
        }
        buf.extend_from_slice(&(ped.future.len() as u32).to_le_bytes());
        for b in &ped.future {
            put_box(&mut buf, b);
        }
    }
    buf
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for s in scenes {
        let payload = scene_payload(s);
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&payload)?;
        w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Byte cursor returning [`DatasetError::Truncated`] past the end.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.at.checked_add(n).ok_or(DatasetError::Truncated)?;
        if end > self.bytes.len() {
            return Err(DatasetError::Truncated);
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn boxes(&mut self, n: usize) -> Result<Vec<BevBox5>, DatasetError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(BevBox5 {
                x: self.f64()?,
                y: self.f64()?,
                w: self.f64()?,
                l: self.f64()?,
                h: self.f64()?,
            });
        }
        Ok(out)
    }
}

fn parse_scene(payload: &[u8]) -> Result<Scene, DatasetError> {
    let mut c = Cursor { bytes: payload, at: 0 };
    let seed = c.u64()?;
    let frame_count = c.u32()? as usize;
    let mut frames = Vec::with_capacity(frame_count.min(1024));
    for _ in 0..frame_count {
        let t_offset = c.f64()?;
        let n = c.u32()? as usize;
        let mut points = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            points.push(Point3 { x: c.f32()?, y: c.f32()?, z: c.f32()? });
        }
        frames.push(PointCloudFrame { t_offset, points });
    }
    let ped_count = c.u32()? as usize;
    let mut pedestrians = Vec::with_capacity(ped_count.min(1 << 16));
    for _ in 0..ped_count {
        let id = c.u32()?;
        let behavior = Behavior::from_tag(c.u8()?)?;
        let n_hist = c.u32()? as usize;
        let history = c.boxes(n_hist)?;
        let n_fut = c.u32()? as usize;
        let future = c.boxes(n_fut)?;
        pedestrians.push(TrackedPedestrian { id, behavior, history, future });
    }
    if c.at != payload.len() {
        return Err(DatasetError::Truncated);
    }
    Ok(Scene { seed, frames, pedestrians })
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let scene_count = c.u64()? as usize;
    let mut scenes = Vec::with_capacity(scene_count.min(1 << 16));
    for k in 0..scene_count {
        let len = c.u64()? as usize;
        let payload = c.take(len)?;
        let crc = c.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(DatasetError::Checksum(k));
        }
        scenes.push(parse_scene(payload)?);
    }
    if c.at != bytes.len() {
        return Err(DatasetError::Truncated);
    }
    Ok(scenes)
}
