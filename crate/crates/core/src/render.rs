//! SVG rendering of one scene: lidar points in white, detection boxes and
//! history polylines in yellow, future polylines in cyan, ground-truth
//! boxes in green, on a dark canvas with axes through the world origin.

use std::fmt::Write;

use crate::geometry::BevBox5;
use crate::metrics::Detection;
use crate::simworld::Scene;

/// Square canvas geometry. World coordinates in
/// [-world_half_extent_m, world_half_extent_m] on both axes map onto the
/// drawable area inside the margin.
#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub size_px: f64,
    pub margin_px: f64,
    pub world_half_extent_m: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { size_px: 800.0, margin_px: 40.0, world_half_extent_m: 20.0 }
    }
}

impl RenderOptions {
    fn scale(&self) -> f64 {
        (self.size_px - 2.0 * self.margin_px) / (2.0 * self.world_half_extent_m)
    }
}

/// Affine world -> canvas map: canvas u grows with world x, canvas v grows
/// downward, so world y up appears up on screen.
///   u = margin + (x + e) * s
///   v = margin + (e - y) * s
/// with e the half extent and s the pixel scale.
pub fn world_to_canvas(opt: &RenderOptions, x: f64, y: f64) -> (f64, f64) {
    let s = opt.scale();
    (
        opt.margin_px + (x + opt.world_half_extent_m) * s,
        opt.margin_px + (opt.world_half_extent_m - y) * s,
    )
}

/// One track to draw: a current box, past centers (oldest first), and
/// future centers (nearest first). Either polyline may be empty.
#[derive(Clone, Debug, Default)]
pub struct TrackVisual {
    pub bev: Option<BevBox5>,
    pub history: Vec<(f64, f64)>,
    pub future: Vec<(f64, f64)>,
}

/// Everything one rendered frame shows.
#[derive(Clone, Debug, Default)]
pub struct SceneVisual {
    pub points: Vec<(f64, f64)>,
    pub detections: Vec<TrackVisual>,
    pub ground_truth: Vec<TrackVisual>,
}

/// Dataset view of a scene: current-sweep points and every pedestrian as
/// a ground-truth track with its recorded history and future.
pub fn scene_visual(scene: &Scene) -> SceneVisual {
    let points = scene
        .frames
        .last()
        .map(|f| f.points.iter().map(|p| (p.x as f64, p.y as f64)).collect())
        .unwrap_or_default();
    let ground_truth = scene
        .pedestrians
        .iter()
        .map(|ped| TrackVisual {
            bev: Some(*ped.current()),
            history: ped.history[..ped.history.len() - 1]
                .iter()
                .map(|b| (b.x, b.y))
                .collect(),
            future: ped.future.iter().map(|b| (b.x, b.y)).collect(),
        })
        .collect();
    SceneVisual { points, detections: Vec::new(), ground_truth }
}

/// Prediction view: final detections with their trajectories. Detections
/// carry no history, so each draws a box and one future polyline.
pub fn detection_visuals(dets: &[Detection]) -> Vec<TrackVisual> {
    dets.iter()
        .map(|d| TrackVisual {
            bev: Some(d.bev),
            history: Vec::new(),
            future: d.future.poses.iter().map(|p| (p.x, p.y)).collect(),
        })
        .collect()
}

const POINT_COLOR: &str = "white";
const DET_COLOR: &str = "yellow";
const FUTURE_COLOR: &str = "cyan";
const GT_COLOR: &str = "#2ecc40";
const AXIS_COLOR: &str = "#3a3a44";
const BACKGROUND: &str = "#10101a";

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn polygon(out: &mut String, opt: &RenderOptions, b: &BevBox5, color: &str) {
    let pts: Vec<String> = b
        .corners()
        .iter()
        .map(|c| {
            let (u, v) = world_to_canvas(opt, c[0], c[1]);
            format!("{},{}", px(u), px(v))
        })
        .collect();
    writeln!(
        out,
        r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        pts.join(" ")
    )
    .expect("string write");
}

fn polyline(out: &mut String, opt: &RenderOptions, pts: &[(f64, f64)], color: &str) {
    if pts.len() < 2 {
        return;
    }
    let mapped: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (u, v) = world_to_canvas(opt, x, y);
            format!("{},{}", px(u), px(v))
        })
        .collect();
    writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
        mapped.join(" ")
    )
    .expect("string write");
}

fn track(out: &mut String, opt: &RenderOptions, t: &TrackVisual, box_color: &str) {
    if let Some(b) = &t.bev {
        polygon(out, opt, b, box_color);
        // Join the polylines to the box center so short tracks stay visible.
        let center = (b.x, b.y);
        let mut hist = t.history.clone();
        hist.push(center);
        polyline(out, opt, &hist, DET_COLOR);
        let mut fut = vec![center];
        fut.extend(&t.future);
        polyline(out, opt, &fut, FUTURE_COLOR);
    } else {
        polyline(out, opt, &t.history, DET_COLOR);
        polyline(out, opt, &t.future, FUTURE_COLOR);
    }
}

/// Renders the scene as a standalone SVG 1.1 document. Output depends only
/// on the inputs, so identical calls produce identical bytes.
pub fn render_svg(scene: &SceneVisual, opt: &RenderOptions) -> String {
    let size = px(opt.size_px);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .expect("string write");
    writeln!(out, r#"<rect width="{size}" height="{size}" fill="{BACKGROUND}"/>"#)
        .expect("string write");

    let e = opt.world_half_extent_m;
    for &((x0, y0), (x1, y1)) in &[((-e, 0.0), (e, 0.0)), ((0.0, -e), (0.0, e))] {
        let (u0, v0) = world_to_canvas(opt, x0, y0);
        let (u1, v1) = world_to_canvas(opt, x1, y1);
        writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{AXIS_COLOR}" stroke-width="1"/>"#,
            px(u0),
            px(v0),
            px(u1),
            px(v1)
        )
        .expect("string write");
    }

    for &(x, y) in &scene.points {
        let (u, v) = world_to_canvas(opt, x, y);
        writeln!(out, r#"<circle cx="{}" cy="{}" r="1.2" fill="{POINT_COLOR}"/>"#, px(u), px(v))
            .expect("string write");
    }
    for t in &scene.ground_truth {
        track(&mut out, opt, t, GT_COLOR);
    }
    for t in &scene.detections {
        track(&mut out, opt, t, DET_COLOR);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn empty_scene_is_a_valid_svg_with_axes_only() {
        let svg = render_svg(&SceneVisual::default(), &RenderOptions::default());
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"version="1.1""#));
        assert_eq!(count(&svg, "<line"), 2);
        assert_eq!(count(&svg, "<polygon"), 0);
        assert_eq!(count(&svg, "<polyline"), 0);
        assert_eq!(count(&svg, "<circle"), 0);
    }

    #[test]
    fn one_detection_draws_a_rectangle_and_two_polylines() {
        let scene = SceneVisual {
            points: vec![(1.0, 1.0)],
            detections: vec![TrackVisual {
                bev: Some(BevBox5::new(0.0, 0.0, 0.8, 0.8, 0.2)),
                history: vec![(-0.5, 0.0), (-0.25, 0.0)],
                future: vec![(0.5, 0.0), (1.0, 0.0)],
            }],
            ground_truth: Vec::new(),
        };
        let svg = render_svg(&scene, &RenderOptions::default());
        assert_eq!(count(&svg, "<polygon"), 1);
        assert_eq!(count(&svg, "<polyline"), 2);
        assert_eq!(count(&svg, "<circle"), 1);
        assert_eq!(count(&svg, r#"stroke="yellow""#), 2);
        assert_eq!(count(&svg, r#"stroke="cyan""#), 1);
    }

    #[test]
    fn ground_truth_renders_green() {
        let scene = SceneVisual {
            points: Vec::new(),
            detections: Vec::new(),
            ground_truth: vec![TrackVisual {
                bev: Some(BevBox5::new(2.0, 3.0, 1.0, 1.0, 0.0)),
                history: Vec::new(),
                future: Vec::new(),
            }],
        };
        let svg = render_svg(&scene, &RenderOptions::default());
        assert_eq!(count(&svg, &format!(r#"stroke="{GT_COLOR}""#)), 1);
        // A bare box with no past or future draws no polylines.
        assert_eq!(count(&svg, "<polyline"), 0);
    }

    #[test]
    fn canvas_map_matches_hand_arithmetic() {
        // e = 10 m, 240 px canvas, 20 px margin: scale = 200 / 20 = 10 px/m.
        let opt = RenderOptions { size_px: 240.0, margin_px: 20.0, world_half_extent_m: 10.0 };
        assert_eq!(world_to_canvas(&opt, 0.0, 0.0), (120.0, 120.0));
        assert_eq!(world_to_canvas(&opt, 1.0, 2.0), (130.0, 100.0));
        assert_eq!(world_to_canvas(&opt, -10.0, 10.0), (20.0, 20.0));

        // Axis-aligned box at (1, 2), w 2, l 4: corner (x+1, y+2) = (2, 4)
        // lands at u = 20 + 12*10 = 140, v = 20 + 6*10 = 80.
        let scene = SceneVisual {
            points: Vec::new(),
            detections: Vec::new(),
            ground_truth: vec![TrackVisual {
                bev: Some(BevBox5::new(1.0, 2.0, 2.0, 4.0, 0.0)),
                history: Vec::new(),
                future: Vec::new(),
            }],
        };
        let svg = render_svg(&scene, &opt);
        assert!(svg.contains("140.00,80.00"), "{svg}");
    }

    #[test]
    fn dataset_and_prediction_views_carry_the_tracks() {
        use crate::simworld::{simulate_scene, SimConfig};
        let scene = simulate_scene(&SimConfig::default(), 4);
        let vis = scene_visual(&scene);
        assert_eq!(vis.ground_truth.len(), scene.pedestrians.len());
        assert_eq!(vis.points.len(), scene.frames.last().unwrap().points.len());
        let gt = &vis.ground_truth[0];
        assert_eq!(gt.history.len(), scene.pedestrians[0].history.len() - 1);
        assert_eq!(gt.future.len(), scene.pedestrians[0].future.len());

        let det = Detection {
            bev: BevBox5::new(0.0, 0.0, 0.8, 0.8, 0.0),
            score: 0.7,
            future: crate::sti::FutureTrajectory {
                poses: vec![crate::sti::FuturePose { x: 1.0, y: 0.0, h: 0.0 }],
            },
        };
        let tracks = detection_visuals(&[det]);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].future, vec![(1.0, 0.0)]);
        assert!(tracks[0].history.is_empty());
    }
}
