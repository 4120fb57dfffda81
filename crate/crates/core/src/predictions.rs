//! Text prediction files: one record per scene listing detections as a
//! box 5-tuple, a score, and the predicted trajectory as 3-tuples.
//!
//! ```text
//! # pedcast predictions v1
//! scene 0
//! det <x> <y> <w> <l> <h> <score> [<fx> <fy> <fh> ...]
//! scene 1
//! ...
//! ```
//!
//! Scene indices are consecutive from zero, one `scene` line per scene
//! even when it has no detections. Blank lines and `#` comments are
//! skipped. Numbers are written with Rust's shortest round-trip float
//! formatting, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::BevBox5;
use crate::metrics::Detection;
use crate::sti::{FuturePose, FutureTrajectory};

pub const PREDICTIONS_HEADER: &str = "# pedcast predictions v1";

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("missing or wrong header, expected {PREDICTIONS_HEADER:?}")]
    BadHeader,
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("line {line}: scene {found} out of order, expected {expected}")]
    OutOfOrder { line: usize, found: usize, expected: usize },
}

pub fn format_predictions(scenes: &[Vec<Detection>]) -> String {
    let mut out = String::new();
    out.push_str(PREDICTIONS_HEADER);
    out.push('\n');
    for (i, dets) in scenes.iter().enumerate() {
        writeln!(out, "scene {i}").expect("string write");
        for d in dets {
            let b = &d.bev;
            write!(out, "det {:?} {:?} {:?} {:?} {:?} {:?}", b.x, b.y, b.w, b.l, b.h, d.score)
                .expect("string write");
            for p in &d.future.poses {
                write!(out, " {:?} {:?} {:?}", p.x, p.y, p.h).expect("string write");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_predictions(path: &Path, scenes: &[Vec<Detection>]) -> Result<(), PredictionError> {
    std::fs::write(path, format_predictions(scenes))?;
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<Vec<Detection>>, PredictionError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let header = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or(PredictionError::BadHeader)?;
    if header.1 != PREDICTIONS_HEADER {
        return Err(PredictionError::BadHeader);
    }

    let mut scenes: Vec<Vec<Detection>> = Vec::new();
    for (line, l) in lines {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(rest) = l.strip_prefix("scene ") {
            let found: usize = rest.trim().parse().map_err(|_| PredictionError::BadLine {
                line,
                msg: format!("bad scene index {rest:?}"),
            })?;
            if found != scenes.len() {
                return Err(PredictionError::OutOfOrder { line, found, expected: scenes.len() });
            }
            scenes.push(Vec::new());
        } else if let Some(rest) = l.strip_prefix("det ") {
            let scene = scenes.last_mut().ok_or(PredictionError::BadLine {
                line,
                msg: "det before any scene line".into(),
            })?;
            let nums: Vec<f64> = rest
                .split_ascii_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| PredictionError::BadLine {
                        line,
                        msg: format!("bad number {t:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if nums.len() < 6 || (nums.len() - 6) % 3 != 0 {
                return Err(PredictionError::BadLine {
                    line,
                    msg: format!(
                        "expected 6 + 3k numbers (box, score, trajectory), got {}",
                        nums.len()
                    ),
                });
            }
            let poses = nums[6..]
                .chunks_exact(3)
                .map(|c| FuturePose { x: c[0], y: c[1], h: c[2] })
                .collect();
            scene.push(Detection {
                bev: BevBox5::new(nums[0], nums[1], nums[2], nums[3], nums[4]),
                score: nums[5],
                future: FutureTrajectory { poses },
            });
        } else {
            return Err(PredictionError::BadLine {
                line,
                msg: format!("unrecognized line {l:?}"),
            });
        }
    }
    Ok(scenes)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Vec<Detection>>, PredictionError> {
    parse_predictions(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Vec<Detection>> {
        let det = |x: f64, score: f64, k: usize| Detection {
            bev: BevBox5::new(x, -0.25, 0.8, 0.9, 0.125),
            score,
            future: FutureTrajectory {
                poses: (1..=k)
                    .map(|j| FuturePose { x: x + 0.3 * j as f64, y: -0.25, h: 0.125 })
                    .collect(),
            },
        };
        vec![vec![det(1.0, 0.9, 2), det(-3.5, 0.4, 2)], Vec::new(), vec![det(0.125, 0.7, 2)]]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let scenes = sample();
        let text = format_predictions(&scenes);
        let back = parse_predictions(&text).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.bev.x.to_bits(), b.bev.x.to_bits());
            assert_eq!(a.bev.h.to_bits(), b.bev.h.to_bits());
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.future.poses, b.future.poses);
        }
        assert!(back[1].is_empty());
    }

    #[test]
    fn header_only_means_zero_scenes() {
        assert!(parse_predictions("# pedcast predictions v1\n").unwrap().is_empty());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "\n# pedcast predictions v1\n\n# a comment\nscene 0\ndet 0 0 1 1 0 0.5\n";
        let scenes = parse_predictions(text).unwrap();
        assert_eq!(scenes[0].len(), 1);
        assert_eq!(scenes[0][0].future.poses.len(), 0);
    }

    #[test]
    fn bad_inputs_are_reported_with_line_numbers() {
        assert!(matches!(parse_predictions(""), Err(PredictionError::BadHeader)));
        assert!(matches!(parse_predictions("not a header\n"), Err(PredictionError::BadHeader)));

        let missing_scene = "# pedcast predictions v1\ndet 0 0 1 1 0 0.5\n";
        assert!(
            matches!(parse_predictions(missing_scene), Err(PredictionError::BadLine { line: 2, .. }))
        );

        let out_of_order = "# pedcast predictions v1\nscene 1\n";
        assert!(matches!(
            parse_predictions(out_of_order),
            Err(PredictionError::OutOfOrder { line: 2, found: 1, expected: 0 })
        ));

        let short_det = "# pedcast predictions v1\nscene 0\ndet 1 2 3\n";
        assert!(
            matches!(parse_predictions(short_det), Err(PredictionError::BadLine { line: 3, .. }))
        );

        let ragged = "# pedcast predictions v1\nscene 0\ndet 0 0 1 1 0 0.5 1.0 2.0\n";
        assert!(matches!(parse_predictions(ragged), Err(PredictionError::BadLine { line: 3, .. })));

        let junk = "# pedcast predictions v1\nboxes 3\n";
        assert!(matches!(parse_predictions(junk), Err(PredictionError::BadLine { line: 2, .. })));
    }
}
