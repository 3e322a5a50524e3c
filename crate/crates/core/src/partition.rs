//! Pillar partitioning, the per-pillar point encoder, scatter to a BEV
//! pseudo-image, and partition-effect metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::{relu, Matrix, Rng};
use crate::pointcloud::{BevBox, Point, PointCloud, RangeSpec};

/// Width of the augmented per-point vector fed to the encoder.
pub const AUGMENTED_DIM: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("point {index} at ({x}, {y}, {z}) lies outside the grid range")]
    OutOfRange { index: usize, x: f32, y: f32, z: f32 },
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("encoder weight must be M x {AUGMENTED_DIM} with M-length bias, got {rows}x{cols} and bias {bias}")]
    EncoderShape { rows: usize, cols: usize, bias: usize },
    #[error("pillar {0} has no points")]
    EmptyPillar(usize),
    #[error("pillar cell ({ix}, {iy}) is outside the {width}x{height} grid")]
    CellOutOfBounds {
        ix: usize,
        iy: usize,
        width: usize,
        height: usize,
    },
    #[error("two pillars share cell ({ix}, {iy})")]
    DuplicateCell { ix: usize, iy: usize },
    #[error("channel {channel} out of range for {channels}-channel image")]
    BadChannel { channel: usize, channels: usize },
    #[error("box {0} is degenerate")]
    DegenerateBox(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub range: RangeSpec,
    pub cell_x: f64,
    pub cell_y: f64,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl GridSpec {
    /// 0.16 m square cells, 32 points per pillar, 12000 pillars.
    pub fn new(range: RangeSpec) -> Self {
        Self {
            range,
            cell_x: 0.16,
            cell_y: 0.16,
            max_points_per_pillar: 32,
            max_pillars: 12_000,
        }
    }

    pub fn with_cell(mut self, cell: f64) -> Self {
        self.cell_x = cell;
        self.cell_y = cell;
        self
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if !(self.cell_x > 0.0 && self.cell_y > 0.0) {
            return Err(PartitionError::InvalidGrid("cell sizes must be positive"));
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(PartitionError::InvalidGrid("caps must be at least 1"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        cells_along(self.range.x_max - self.range.x_min, self.cell_x)
    }

    pub fn height(&self) -> usize {
        cells_along(self.range.y_max - self.range.y_min, self.cell_y)
    }

    /// BEV center of cell `(ix, iy)`.
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.range.x_min + (ix as f64 + 0.5) * self.cell_x,
            self.range.y_min + (iy as f64 + 0.5) * self.cell_y,
        ]
    }

    /// Unclamped cell coordinates; may be negative or past the grid edge.
    pub fn cell_coords(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.range.x_min) / self.cell_x).floor() as i64,
            ((y - self.range.y_min) / self.cell_y).floor() as i64,
        )
    }

    /// Cell of an in-range point.
    fn cell_of(&self, p: &Point) -> (usize, usize) {
        let (ix, iy) = self.cell_coords(p.x as f64, p.y as f64);
        // an in-range coordinate can still round onto the far edge
        (
            (ix.max(0) as usize).min(self.width() - 1),
            (iy.max(0) as usize).min(self.height() - 1),
        )
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell_x.hypot(self.cell_y)
    }
}

fn cells_along(extent: f64, cell: f64) -> usize {
    // 70.4 / 0.16 lands a hair above 440 in binary floating point
    ((extent / cell) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPillar {
    pub cell_ix: usize,
    pub cell_iy: usize,
    pub center: [f64; 2],
    pub points: Vec<Point>,
    /// Point count before per-pillar subsampling.
    pub original_count: usize,
}

/// Buckets in-range points into BEV cells.
///
/// Pillars come out in row-major cell order. Overfull pillars keep a seeded
/// uniform subset of their points (in original order); past `max_pillars`
/// a seeded uniform subset of pillars is kept.
pub fn partition(
    cloud: &PointCloud,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<RawPillar>, PartitionError> {
    grid.validate()?;
    let width = grid.width();
    let mut cells: BTreeMap<usize, Vec<Point>> = BTreeMap::new();
    for (index, p) in cloud.points.iter().enumerate() {
        if !grid.range.contains(p) {
            return Err(PartitionError::OutOfRange {
                index,
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
        let (ix, iy) = grid.cell_of(p);
        cells.entry(iy * width + ix).or_default().push(*p);
    }

    let mut rng = Rng::new(seed);
    let mut pillars: Vec<RawPillar> = cells
        .into_iter()
        .map(|(key, points)| {
            let (ix, iy) = (key % width, key / width);
            let original_count = points.len();
            let points = if original_count > grid.max_points_per_pillar {
                rng.sample_sorted(original_count, grid.max_points_per_pillar)
                    .into_iter()
                    .map(|i| points[i])
                    .collect()
            } else {
                points
            };
            RawPillar {
                cell_ix: ix,
                cell_iy: iy,
                center: grid.cell_center(ix, iy),
                points,
                original_count,
            }
        })
        .collect();

    if pillars.len() > grid.max_pillars {
        let keep = rng.sample_sorted(pillars.len(), grid.max_pillars);
        let mut all = pillars.into_iter().map(Some).collect::<Vec<_>>();
        pillars = keep.into_iter().map(|i| all[i].take().unwrap()).collect();
    }
    Ok(pillars)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `M x 9`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    pub fn init(feature_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let bound = (6.0 / (AUGMENTED_DIM + feature_dim) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(feature_dim, AUGMENTED_DIM, bound, &mut rng),
            bias: vec![0.0; feature_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Pillar vertices: BEV position `p_i` and feature `x_i` (one row of `features`).
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    pub cells: Vec<(usize, usize)>,
    pub positions: Vec<[f64; 2]>,
    pub features: Matrix,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn with_features(&self, features: Matrix) -> PillarSet {
        debug_assert_eq!(features.rows(), self.len());
        PillarSet {
            cells: self.cells.clone(),
            positions: self.positions.clone(),
            features,
        }
    }
}

/// `(x, y, z, r, x−x̄, y−ȳ, z−z̄, x−p_x, y−p_y)` for every point of a pillar.
pub fn augment(pillar: &RawPillar) -> Vec<[f64; AUGMENTED_DIM]> {
    let n = pillar.points.len() as f64;
    // summed in sorted order so the mean ignores point order exactly
    let coords: [fn(&Point) -> f32; 3] = [|p| p.x, |p| p.y, |p| p.z];
    let mean = coords.map(|coord| {
        let mut vals: Vec<f32> = pillar.points.iter().map(coord).collect();
        vals.sort_by(f32::total_cmp);
        vals.iter().map(|&v| v as f64).sum::<f64>() / n
    });
    pillar
        .points
        .iter()
        .map(|p| {
            let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
            [
                x,
                y,
                z,
                p.intensity as f64,
                x - mean[0],
                y - mean[1],
                z - mean[2],
                x - pillar.center[0],
                y - pillar.center[1],
            ]
        })
        .collect()
}

/// Per-point `relu(W a + b)` followed by an elementwise max over the pillar.
pub fn encode_pillars(
    raw: &[RawPillar],
    params: &EncoderParams,
) -> Result<PillarSet, PartitionError> {
    let (rows, cols) = params.weight.shape();
    if cols != AUGMENTED_DIM || params.bias.len() != rows {
        return Err(PartitionError::EncoderShape {
            rows,
            cols,
            bias: params.bias.len(),
        });
    }
    if let Some(i) = raw.iter().position(|p| p.points.is_empty()) {
        return Err(PartitionError::EmptyPillar(i));
    }
    let m = rows;
    let encoded: Vec<Vec<f64>> = raw
        .par_iter()
        .map(|pillar| {
            let mut feat = vec![f64::NEG_INFINITY; m];
            for a in augment(pillar) {
                for (c, f) in feat.iter_mut().enumerate() {
                    let w = params.weight.row(c);
                    let z = params.bias[c] + w.iter().zip(&a).map(|(w, a)| w * a).sum::<f64>();
                    *f = f.max(relu(z));
                }
            }
            feat
        })
        .collect();
    let mut features = Matrix::zeros(raw.len(), m);
    for (i, f) in encoded.into_iter().enumerate() {
        features.row_mut(i).copy_from_slice(&f);
    }
    Ok(PillarSet {
        cells: raw.iter().map(|p| (p.cell_ix, p.cell_iy)).collect(),
        positions: raw.iter().map(|p| p.center).collect(),
        features,
    })
}

/// Dense `H x W x C` grid, channel-last, with an occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PseudoImage {
    pub fn pixel(&self, iy: usize, ix: usize) -> &[f64] {
        let start = (iy * self.width + ix) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn occupied(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Reads back the features at the given `(ix, iy)` cells.
    pub fn gather(&self, cells: &[(usize, usize)]) -> Matrix {
        let mut out = Matrix::zeros(cells.len(), self.channels);
        for (r, &(ix, iy)) in cells.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.pixel(iy, ix));
        }
        out
    }

    /// Binary PGM (P5, maxval 255) of one channel, scaled by the channel's
    /// maximum. Negative values and empty channels map to 0. Row `iy = 0` first.
    pub fn to_pgm(&self, channel: usize) -> Result<Vec<u8>, PartitionError> {
        if channel >= self.channels {
            return Err(PartitionError::BadChannel {
                channel,
                channels: self.channels,
            });
        }
        let values = || self.data.iter().skip(channel).step_by(self.channels.max(1));
        let max = values().fold(0.0f64, |m, &v| m.max(v));
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(values().map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        }));
        Ok(out)
    }

    /// All channels as little-endian `f32`, `H x W x C` order, no header.
    pub fn to_le_f32(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

pub fn scatter(ps: &PillarSet, grid: &GridSpec) -> Result<PseudoImage, PartitionError> {
    let (width, height, channels) = (grid.width(), grid.height(), ps.feature_dim());
    let mut image = PseudoImage {
        height,
        width,
        channels,
        data: vec![0.0; width * height * channels],
        mask: vec![false; width * height],
    };
    for (r, &(ix, iy)) in ps.cells.iter().enumerate() {
        if ix >= width || iy >= height {
            return Err(PartitionError::CellOutOfBounds {
                ix,
                iy,
                width,
                height,
            });
        }
        let pix = iy * width + ix;
        if image.mask[pix] {
            return Err(PartitionError::DuplicateCell { ix, iy });
        }
        image.mask[pix] = true;
        image.data[pix * channels..(pix + 1) * channels].copy_from_slice(ps.features.row(r));
    }
    Ok(image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxPartitionStats {
    pub point_count: usize,
    /// Cells holding at least one of the box's points.
    pub occupied_cell_count: usize,
    /// RMS 3-D distance from each box point to the centroid of the box points
    /// sharing its cell. `None` when the box holds no points.
    pub centroid_rmse: Option<f64>,
    pub cell_to_extent_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEffectReport {
    pub cell_x: f64,
    pub cell_y: f64,
    pub boxes: Vec<BoxPartitionStats>,
}

impl PartitionEffectReport {
    /// One `key=value` line per box.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.boxes.iter().enumerate() {
            let rmse = b
                .centroid_rmse
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "box={i} cell_x={} cell_y={} points={} occupied_cells={} centroid_rmse={rmse} cell_to_extent_ratio={:.6}\n",
                self.cell_x, self.cell_y, b.point_count, b.occupied_cell_count, b.cell_to_extent_ratio
            ));
        }
        out
    }
}

/// Quantifies how coarsely each BEV box is sliced by the grid.
pub fn partition_effect_report(
    cloud: &PointCloud,
    boxes: &[BevBox],
    grid: &GridSpec,
) -> Result<PartitionEffectReport, PartitionError> {
    grid.validate()?;
    let mut stats = Vec::with_capacity(boxes.len());
    for (bi, b) in boxes.iter().enumerate() {
        if !(b.size[0] > 0.0 && b.size[1] > 0.0) {
            return Err(PartitionError::DegenerateBox(bi));
        }
        let members: Vec<(&Point, (i64, i64))> = cloud
            .points
            .iter()
            .filter(|p| b.contains(p.x as f64, p.y as f64))
            .map(|p| (p, grid.cell_coords(p.x as f64, p.y as f64)))
            .collect();

        let mut sums: BTreeMap<(i64, i64), ([f64; 3], usize)> = BTreeMap::new();
        for (p, cell) in &members {
            let e = sums.entry(*cell).or_insert(([0.0; 3], 0));
            e.0[0] += p.x as f64;
            e.0[1] += p.y as f64;
            e.0[2] += p.z as f64;
            e.1 += 1;
        }
        let centroid_rmse = if members.is_empty() {
            None
        } else {
            let sq: f64 = members
                .iter()
                .map(|(p, cell)| {
                    let (s, n) = sums[cell];
                    let n = n as f64;
                    let d = [
                        p.x as f64 - s[0] / n,
                        p.y as f64 - s[1] / n,
                        p.z as f64 - s[2] / n,
                    ];
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .sum();
            Some((sq / members.len() as f64).sqrt())
        };
        stats.push(BoxPartitionStats {
            point_count: members.len(),
            occupied_cell_count: sums.len(),
            centroid_rmse,
            cell_to_extent_ratio: grid.cell_diagonal() / b.diagonal(),
        });
    }
    Ok(PartitionEffectReport {
        cell_x: grid.cell_x,
        cell_y: grid.cell_y,
        boxes: stats,
    })
}
