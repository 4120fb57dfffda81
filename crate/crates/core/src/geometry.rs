//! Bird's-eye-view box geometry: rotated boxes, axis-aligned standing boxes,
//! rotated IoU via convex polygon clipping, and greedy NMS.
//!
//! Conventions: at heading 0, width spans the x axis and length spans the y
//! axis. Headings live in (-pi, pi] and are wrapped on construction. All
//! functions here are pure.

use std::f64::consts::PI;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("meta_box requires at least one box")]
    EmptyBoxList,
    #[error("nms given {boxes} boxes but {scores} scores")]
    ScoreLengthMismatch { boxes: usize, scores: usize },
}

/// Rotated box in the ground plane: center, width (x extent at zero heading),
/// length (y extent at zero heading), heading in (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevBox5 {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

impl BevBox5 {
    pub fn new(x: f64, y: f64, w: f64, l: f64, h: f64) -> Self {
        Self { x, y, w, l, h: wrap_angle(h) }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Radius of the circumscribed circle. Centers farther apart than the sum
    /// of two boxes' circumradii cannot intersect.
    pub fn circumradius(&self) -> f64 {
        0.5 * (self.w * self.w + self.l * self.l).sqrt()
    }

    /// Corner coordinates in counterclockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.h.sin_cos();
        let (hw, hl) = (0.5 * self.w, 0.5 * self.l);
        let local = [[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]];
        local.map(|[u, v]| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    /// True when the point lies inside the box, border included.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.h.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.w && v.abs() <= 0.5 * self.l
    }
}

/// Axis-aligned box in the ground plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl StandingBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// How a rotated box is converted to an axis-aligned one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StandingBoxMode {
    /// Snap the heading to the nearest multiple of pi/2; odd multiples swap
    /// width and length. Preserves area exactly.
    #[default]
    Snap,
    /// Tight axis-aligned bounding box of the rotated rectangle.
    Aabb,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a % two_pi;
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

pub fn to_standing_box(b: &BevBox5, mode: StandingBoxMode) -> StandingBox {
    let (ex, ey) = match mode {
        StandingBoxMode::Snap => {
            // Ties at odd multiples of pi/4 round away from zero.
            let k = (b.h / (PI / 2.0)).round() as i64;
            if k.rem_euclid(2) == 0 {
                (0.5 * b.w, 0.5 * b.l)
            } else {
                (0.5 * b.l, 0.5 * b.w)
            }
        }
        StandingBoxMode::Aabb => {
            let (s, c) = (b.h.sin().abs(), b.h.cos().abs());
            (0.5 * (b.w * c + b.l * s), 0.5 * (b.w * s + b.l * c))
        }
    };
    StandingBox {
        x_min: b.x - ex,
        y_min: b.y - ey,
        x_max: b.x + ex,
        y_max: b.y + ey,
    }
}

/// Componentwise min/max hull of standing boxes.
pub fn meta_box(boxes: &[StandingBox]) -> Result<StandingBox, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::EmptyBoxList)?;
    Ok(boxes.iter().skip(1).fold(*first, |m, b| StandingBox {
        x_min: m.x_min.min(b.x_min),
        y_min: m.y_min.min(b.y_min),
        x_max: m.x_max.max(b.x_max),
        y_max: m.y_max.max(b.y_max),
    }))
}

/// Intersection-over-union of two rotated boxes.
///
/// Exactly symmetric in its arguments: the pair is ordered canonically before
/// clipping so both call orders run the identical float program.
pub fn rotated_iou(a: &BevBox5, b: &BevBox5) -> f64 {
    let key = |b: &BevBox5| (b.x, b.y, b.w, b.l, b.h);
    let (p, q) = if key(a) <= key(b) { (a, b) } else { (b, a) };

    let dx = p.x - q.x;
    let dy = p.y - q.y;
    let reach = p.circumradius() + q.circumradius();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }

    let inter = intersection_area(&p.corners(), &q.corners());
    let union = p.area() + q.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Area of the intersection of two convex counterclockwise quads
/// (Sutherland-Hodgman clipping followed by the shoelace formula).
fn intersection_area(subject: &[[f64; 2]; 4], clip: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    let mut next: Vec<[f64; 2]> = Vec::with_capacity(8);

    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % 4];
        let inside =
            |p: [f64; 2]| (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0]) >= 0.0;

        next.clear();
        for j in 0..poly.len() {
            let cur = poly[j];
            let prev = poly[(j + poly.len() - 1) % poly.len()];
            let (cur_in, prev_in) = (inside(cur), inside(prev));
            if cur_in {
                if !prev_in {
                    next.push(line_intersect(prev, cur, e0, e1));
                }
                next.push(cur);
            } else if prev_in {
                next.push(line_intersect(prev, cur, e0, e1));
            }
        }
        std::mem::swap(&mut poly, &mut next);
    }

    let mut twice_area = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice_area += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice_area.abs()
}

fn line_intersect(a: [f64; 2], b: [f64; 2], e0: [f64; 2], e1: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let e = [e1[0] - e0[0], e1[1] - e0[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    // Callers only clip segments that straddle the edge, so denom != 0.
    let t = ((e0[0] - a[0]) * e[1] - (e0[1] - a[1]) * e[0]) / denom;
    [a[0] + t * d[0], a[1] + t * d[1]]
}

/// Greedy non-maximum suppression on rotated boxes.
///
/// Boxes are visited in descending score order (ties keep the lower input
/// index first); a box is suppressed when its IoU with an already kept box
/// exceeds `iou_thresh`. Returns kept input indices in visit order.
pub fn nms(boxes: &[BevBox5], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::ScoreLengthMismatch {
            boxes: boxes.len(),
            scores: scores.len(),
        });
    }
    // Total order so a diverged model (NaN scores) still fails upstream
    // at the loss check rather than panicking here.
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| rotated_iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    Ok(kept)
}
