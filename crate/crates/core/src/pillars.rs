//! Pillar feature encoding: bins an unordered point cloud into vertical
//! columns over a regular ground-plane grid, decorates points with offsets,
//! runs a shared per-point linear layer + ReLU, max-pools each pillar, and
//! scatters the pooled features into an H x W x C pseudo image.
//!
//! Grid convention: rows index x, columns index y. Cell (r, c) covers
//! [x_min + r*s, x_min + (r+1)*s) x [y_min + c*s, y_min + (c+1)*s).

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::nn::{add_linear, Binder, Graph, NnError, ParamStore, Tensor, Var};

/// Sensor points carry f32 precision, matching the storage format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PillarError {
    #[error("range {range} is not an integer multiple of pillar size {pillar}")]
    RangeNotDivisible { range: f64, pillar: f64 },
    #[error("pillar size must be positive, got {0}")]
    BadPillarSize(f64),
    #[error("max_points_per_pillar must be positive")]
    ZeroMaxPoints,
    #[error("frame group size: {t_prime} frames do not split into {t} groups")]
    BadGrouping { t_prime: usize, t: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Ground-plane binning grid centered on the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub x_min: f64,
    pub y_min: f64,
    pub pillar_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl GridConfig {
    pub fn new(
        range_x: f64,
        range_y: f64,
        pillar_size: f64,
        max_points_per_pillar: usize,
        max_pillars: usize,
    ) -> Result<Self, PillarError> {
        if pillar_size <= 0.0 || !pillar_size.is_finite() {
            return Err(PillarError::BadPillarSize(pillar_size));
        }
        if max_points_per_pillar == 0 {
            return Err(PillarError::ZeroMaxPoints);
        }
        let sides = [(range_x, range_x / pillar_size), (range_y, range_y / pillar_size)];
        for (range, side) in sides {
            if (side - side.round()).abs() > 1e-9 || side.round() < 1.0 {
                return Err(PillarError::RangeNotDivisible { range, pillar: pillar_size });
            }
        }
        Ok(Self {
            x_min: -range_x / 2.0,
            y_min: -range_y / 2.0,
            pillar_size,
            rows: (range_x / pillar_size).round() as usize,
            cols: (range_y / pillar_size).round() as usize,
            max_points_per_pillar,
            max_pillars,
        })
    }

    /// Cell containing a ground-plane position, or None when out of range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = ((x - self.x_min) / self.pillar_size).floor();
        let c = ((y - self.y_min) / self.pillar_size).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.x_min + (r as f64 + 0.5) * self.pillar_size,
            self.y_min + (c as f64 + 0.5) * self.pillar_size,
        )
    }

    /// Continuous feature-map coordinates of a world position, in cell units.
    pub fn feature_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.pillar_size,
            (y - self.y_min) / self.pillar_size,
        )
    }
}

/// Number of per-point features after decoration.
pub const POINT_FEATURES: usize = 8;

/// One frame binned into pillars. `features` holds one POINT_FEATURES row per
/// retained point, pillar by pillar in first-seen order; `counts[i]` rows
/// belong to pillar `cells[i]`.
#[derive(Clone, Debug, Default)]
pub struct VoxelizedFrame {
    pub cells: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
    pub features: Vec<f64>,
    pub dropped_out_of_range: usize,
    pub dropped_over_capacity: usize,
}

impl VoxelizedFrame {
    pub fn num_pillars(&self) -> usize {
        self.cells.len()
    }

    pub fn num_points(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Bins points into pillars and decorates each retained point with
/// [x, y, z, dx to cell center, dy to cell center, dx/dy/dz to the pillar's
/// point centroid]. Points are kept first-come up to `max_points_per_pillar`
/// per pillar; pillars are kept first-come up to `max_pillars`.
pub fn voxelize(points: &[Point3], grid: &GridConfig) -> VoxelizedFrame {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut members: Vec<Vec<Point3>> = Vec::new();
    let mut dropped_out_of_range = 0;
    let mut dropped_over_capacity = 0;

    for p in points {
        let Some(cell) = grid.cell_of(p.x as f64, p.y as f64) else {
            dropped_out_of_range += 1;
            continue;
        };
        let slot = match index.get(&cell) {
            Some(&i) => i,
            None => {
                if grid.max_pillars > 0 && cells.len() >= grid.max_pillars {
                    dropped_over_capacity += 1;
                    continue;
                }
                index.insert(cell, cells.len());
                cells.push(cell);
                members.push(Vec::new());
                cells.len() - 1
            }
        };
        if members[slot].len() >= grid.max_points_per_pillar {
            dropped_over_capacity += 1;
            continue;
        }
        members[slot].push(*p);
    }

    let total: usize = members.iter().map(Vec::len).sum();
    let mut features = Vec::with_capacity(total * POINT_FEATURES);
    let mut counts = Vec::with_capacity(cells.len());
    for (cell, pts) in cells.iter().zip(&members) {
        counts.push(pts.len());
        let inv = 1.0 / pts.len() as f64;
        let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
        for p in pts {
            mx += p.x as f64;
            my += p.y as f64;
            mz += p.z as f64;
        }
        let (mx, my, mz) = (mx * inv, my * inv, mz * inv);
        let (cx, cy) = grid.cell_center(cell.0, cell.1);
        for p in pts {
            let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
            features.extend_from_slice(&[x, y, z, x - cx, y - cy, x - mx, y - my, z - mz]);
        }
    }

    VoxelizedFrame { cells, counts, features, dropped_out_of_range, dropped_over_capacity }
}

pub fn init_pillar_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
) -> Result<(), NnError> {
    add_linear(store, rng, name, POINT_FEATURES, c_out)
}

/// Encodes one voxelized frame into an H x W x c_out pseudo image.
pub fn pillar_encode(
    g: &mut Graph,
    binder: &mut Binder,
    frame: &VoxelizedFrame,
    grid: &GridConfig,
    name: &str,
    c_out: usize,
) -> Result<Var, PillarError> {
    if frame.cells.is_empty() {
        let zero = g.input(Tensor::zeros(&[grid.rows, grid.cols, c_out]));
        return Ok(zero);
    }
    let n = frame.num_points();
    let x = g.input(Tensor::from_vec(&[n, POINT_FEATURES], frame.features.clone())?);
    let w = binder.get(g, &format!("{name}.w"))?;
    let b = binder.get(g, &format!("{name}.b"))?;
    let h = g.linear(x, w, b)?;
    let h = g.relu(h);
    let pooled = g.max_pool_segments(h, &frame.counts)?;
    Ok(g.scatter_cells(pooled, &frame.cells, grid.rows, grid.cols)?)
}

/// Concatenates `t_prime` per-frame pseudo images (ordered oldest to newest)
/// into `t` grouped images along the channel axis, consecutive frames per
/// group, newest frame last within each group. Output is ordered oldest
/// group first.
pub fn group_frames(g: &mut Graph, frames: &[Var], t: usize) -> Result<Vec<Var>, PillarError> {
    let t_prime = frames.len();
    if t == 0 || t_prime == 0 || t_prime % t != 0 {
        return Err(PillarError::BadGrouping { t_prime, t });
    }
    let r = t_prime / t;
    let mut out = Vec::with_capacity(t);
    for group in frames.chunks_exact(r) {
        out.push(g.concat(group)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::{HashMap, HashSet};

    fn grid_4x4() -> GridConfig {
        GridConfig::new(4.0, 4.0, 1.0, 8, 0).unwrap()
    }

    #[test]
    fn grid_construction_validates_divisibility() {
        assert!(GridConfig::new(40.0, 40.0, 0.3125, 32, 0).is_ok());
        assert!(matches!(
            GridConfig::new(40.0, 40.0, 0.3, 32, 0),
            Err(PillarError::RangeNotDivisible { .. })
        ));
        assert!(matches!(
            GridConfig::new(4.0, 4.0, -1.0, 8, 0),
            Err(PillarError::BadPillarSize(_))
        ));
        assert!(matches!(
            GridConfig::new(4.0, 4.0, 1.0, 0, 0),
            Err(PillarError::ZeroMaxPoints)
        ));
        let g = GridConfig::new(40.0, 40.0, 0.3125, 32, 0).unwrap();
        assert_eq!((g.rows, g.cols), (128, 128));
    }

    #[test]
    fn cell_assignment_floors_and_drops_out_of_range() {
        let g = grid_4x4();
        assert_eq!(g.cell_of(-2.0, -2.0), Some((0, 0)));
        assert_eq!(g.cell_of(-0.001, 1.999), Some((1, 3)));
        // The upper boundary is exclusive.
        assert_eq!(g.cell_of(2.0, 0.0), None);
        assert_eq!(g.cell_of(0.0, -2.1), None);
        let (cx, cy) = g.cell_center(0, 3);
        assert_eq!((cx, cy), (-1.5, 1.5));
    }

    #[test]
    fn binning_matches_an_independent_recount() {
        let grid = GridConfig::new(8.0, 8.0, 0.5, 64, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let points: Vec<Point3> = (0..1000)
            .map(|_| Point3 {
                x: rng.random_range(-5.0..5.0),
                y: rng.random_range(-5.0..5.0),
                z: rng.random_range(0.0..2.0),
            })
            .collect();
        let frame = voxelize(&points, &grid);

        // Oracle: direct per-point floor arithmetic, no shared code path.
        let mut expect: HashMap<(i64, i64), usize> = HashMap::new();
        let mut in_range = 0;
        for p in &points {
            let r = ((p.x as f64 + 4.0) / 0.5).floor() as i64;
            let c = ((p.y as f64 + 4.0) / 0.5).floor() as i64;
            if (0..16).contains(&r) && (0..16).contains(&c) {
                *expect.entry((r, c)).or_default() += 1;
                in_range += 1;
            }
        }
        assert_eq!(frame.num_points(), in_range);
        assert_eq!(frame.dropped_out_of_range, points.len() - in_range);
        assert_eq!(frame.num_pillars(), expect.len());
        for (cell, count) in frame.cells.iter().zip(&frame.counts) {
            assert_eq!(expect[&(cell.0 as i64, cell.1 as i64)], *count);
        }
    }

    #[test]
    fn pillar_cells_are_distinct_and_counts_match_layout() {
        let grid = grid_4x4();
        let points: Vec<Point3> = (0..50)
            .map(|i| Point3 { x: (i % 7) as f32 * 0.4 - 1.5, y: (i % 5) as f32 * 0.6 - 1.4, z: 0.5 })
            .collect();
        let frame = voxelize(&points, &grid);
        let distinct: HashSet<_> = frame.cells.iter().collect();
        assert_eq!(distinct.len(), frame.cells.len());
        assert_eq!(frame.features.len(), frame.num_points() * POINT_FEATURES);
    }

    #[test]
    fn truncation_is_first_come_and_counted() {
        let mut grid = grid_4x4();
        grid.max_points_per_pillar = 2;
        let pts = [
            Point3 { x: 0.1, y: 0.1, z: 0.0 },
            Point3 { x: 0.2, y: 0.2, z: 1.0 },
            Point3 { x: 0.3, y: 0.3, z: 2.0 },
        ];
        let frame = voxelize(&pts, &grid);
        assert_eq!(frame.counts, vec![2]);
        assert_eq!(frame.dropped_over_capacity, 1);
        // Retained rows are the first two points in input order.
        assert_eq!(frame.features[2], 0.0);
        assert_eq!(frame.features[POINT_FEATURES + 2], 1.0);
    }

    #[test]
    fn pillar_cap_drops_new_pillars_first_come() {
        let mut grid = grid_4x4();
        grid.max_pillars = 1;
        let pts = [
            Point3 { x: 0.5, y: 0.5, z: 0.0 },
            Point3 { x: -1.5, y: -1.5, z: 0.0 },
            Point3 { x: 0.6, y: 0.6, z: 0.0 },
        ];
        let frame = voxelize(&pts, &grid);
        assert_eq!(frame.cells, vec![(2, 2)]);
        assert_eq!(frame.counts, vec![2]);
        assert_eq!(frame.dropped_over_capacity, 1);
    }

    #[test]
    fn decoration_offsets_reference_center_and_centroid() {
        let grid = grid_4x4();
        let pts = [
            Point3 { x: 0.25, y: 0.75, z: 1.0 },
            Point3 { x: 0.75, y: 0.25, z: 2.0 },
        ];
        let frame = voxelize(&pts, &grid);
        assert_eq!(frame.cells, vec![(2, 2)]);
        let row0 = &frame.features[0..POINT_FEATURES];
        // Cell (2,2) spans [0,1) x [0,1): center (0.5, 0.5).
        assert!((row0[3] - (0.25 - 0.5)).abs() < 1e-12);
        assert!((row0[4] - (0.75 - 0.5)).abs() < 1e-12);
        // Centroid (0.5, 0.5, 1.5).
        assert!((row0[5] - (0.25 - 0.5)).abs() < 1e-12);
        assert!((row0[7] - (1.0 - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn permuting_points_preserves_pillar_assignments() {
        let grid = GridConfig::new(8.0, 8.0, 0.5, 64, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let points: Vec<Point3> = (0..300)
            .map(|_| Point3 {
                x: rng.random_range(-3.9..3.9),
                y: rng.random_range(-3.9..3.9),
                z: rng.random_range(0.0..2.0),
            })
            .collect();
        let mut shuffled = points.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let a = voxelize(&points, &grid);
        let b = voxelize(&shuffled, &grid);
        let to_map = |f: &VoxelizedFrame| -> HashMap<(usize, usize), usize> {
            f.cells.iter().cloned().zip(f.counts.iter().cloned()).collect()
        };
        assert_eq!(to_map(&a), to_map(&b));
    }

    #[test]
    fn identity_encoder_pools_elementwise_max() {
        // One point with nonnegative decorated features: after an identity
        // linear layer and ReLU, the pooled pillar feature is the decorated
        // point itself.
        let grid = grid_4x4();
        let pts = [Point3 { x: 0.8, y: 0.9, z: 1.2 }];
        let frame = voxelize(&pts, &grid);

        let mut store = ParamStore::new();
        let mut eye = Tensor::zeros(&[POINT_FEATURES, POINT_FEATURES]);
        for i in 0..POINT_FEATURES {
            eye.data_mut()[i * POINT_FEATURES + i] = 1.0;
        }
        store.add("enc.w", eye).unwrap();
        store.add("enc.b", Tensor::zeros(&[POINT_FEATURES])).unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = pillar_encode(&mut g, &mut binder, &frame, &grid, "enc", POINT_FEATURES).unwrap();
        let v = g.value(img);
        assert_eq!(v.shape(), &[4, 4, POINT_FEATURES]);
        for (i, &expect) in frame.features[0..POINT_FEATURES].iter().enumerate() {
            assert!((v.at3(2, 2, i) - expect.max(0.0)).abs() < 1e-12);
        }
        // All other cells stay zero.
        let nonzero = v.data().iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, frame.features[0..POINT_FEATURES].iter().filter(|&&x| x > 0.0).count());
    }

    #[test]
    fn empty_frame_encodes_to_zero_image() {
        let grid = grid_4x4();
        let frame = voxelize(&[], &grid);
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        init_pillar_encoder(&mut store, &mut rng, "enc", 6).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = pillar_encode(&mut g, &mut binder, &frame, &grid, "enc", 6).unwrap();
        assert_eq!(g.value(img).shape(), &[4, 4, 6]);
        assert!(g.value(img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_grouping_concatenates_consecutive_pairs_newest_last() {
        let mut g = Graph::new();
        // Four 1x1x1 frames with distinct constants, oldest first.
        let frames: Vec<Var> = (0..4)
            .map(|i| g.input(Tensor::filled(&[1, 1, 1], i as f64 + 1.0)))
            .collect();
        let grouped = group_frames(&mut g, &frames, 2).unwrap();
        assert_eq!(grouped.len(), 2);
        assert_eq!(g.value(grouped[0]).data(), &[1.0, 2.0]);
        assert_eq!(g.value(grouped[1]).data(), &[3.0, 4.0]);
        assert!(matches!(
            group_frames(&mut g, &frames, 3),
            Err(PillarError::BadGrouping { t_prime: 4, t: 3 })
        ));
    }
}
