//! Point clouds: KITTI velodyne `.bin` I/O, axis-aligned range filtering and
//! seeded synthetic scenes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

const RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("truncated KITTI record at byte offset {offset} (file length {len})")]
    Truncated { offset: usize, len: usize },
    #[error("invalid range on {axis} axis: min {min} must be below max {max}")]
    InvalidRange { axis: char, min: f64, max: f64 },
    #[error("scene {0} must be positive")]
    InvalidScene(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Result of decoding a `.bin` buffer. `skipped` counts records dropped for
/// holding a NaN or infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiScan {
    pub cloud: PointCloud,
    pub skipped: usize,
}

pub fn decode_kitti(bytes: &[u8]) -> Result<KittiScan, PointCloudError> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(PointCloudError::Truncated {
            offset: bytes.len() - bytes.len() % RECORD_BYTES,
            len: bytes.len(),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut skipped = 0;
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if p.is_finite() {
            points.push(p);
        } else {
            skipped += 1;
        }
    }
    Ok(KittiScan {
        cloud: PointCloud::new(points),
        skipped,
    })
}

pub fn encode_kitti(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<KittiScan, PointCloudError> {
    decode_kitti(&std::fs::read(path)?)
}

pub fn write_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), PointCloudError> {
    std::fs::write(path, encode_kitti(cloud))?;
    Ok(())
}

/// Axis-aligned crop box in meters. Membership is half-open: `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl RangeSpec {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Result<Self, PointCloudError> {
        for (axis, (min, max)) in [('x', x), ('y', y), ('z', z)] {
            if !(min < max) || !min.is_finite() || !max.is_finite() {
                return Err(PointCloudError::InvalidRange { axis, min, max });
            }
        }
        Ok(Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
        })
    }

    /// Car preset: x ∈ [0, 70.4), y ∈ [-40, 40), z ∈ [-3, 1).
    pub fn car() -> Self {
        Self::new((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0)).unwrap()
    }

    /// Pedestrian / cyclist preset: x ∈ [0, 48), y ∈ [-20, 20), z ∈ [-2.5, 0.5).
    pub fn pedestrian() -> Self {
        Self::new((0.0, 48.0), (-20.0, 20.0), (-2.5, 0.5)).unwrap()
    }

    pub fn contains(&self, p: &Point) -> bool {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        x >= self.x_min
            && x < self.x_max
            && y >= self.y_min
            && y < self.y_max
            && z >= self.z_min
            && z < self.z_max
    }
}

pub fn range_filter(cloud: &PointCloud, range: &RangeSpec) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| range.contains(p))
            .copied()
            .collect(),
    )
}

/// Axis-aligned box in the sensor frame. `center` is the geometric center,
/// `size` the full extent along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Number of surface returns sampled on this box.
    pub points: usize,
}

impl SceneBox {
    /// KITTI pedestrian anchor footprint, 0.6 × 0.8 × 1.73 m.
    pub fn pedestrian(x: f64, y: f64, points: usize) -> Self {
        Self {
            center: [x, y, -1.6 + 1.73 / 2.0],
            size: [0.6, 0.8, 1.73],
            points,
        }
    }

    /// KITTI car anchor footprint, 1.6 × 3.9 × 1.5 m.
    pub fn car(x: f64, y: f64, points: usize) -> Self {
        Self {
            center: [x, y, -1.6 + 1.5 / 2.0],
            size: [1.6, 3.9, 1.5],
            points,
        }
    }

    pub fn bev(&self) -> BevBox {
        BevBox {
            center: [self.center[0], self.center[1]],
            size: [self.size[0], self.size[1]],
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        let c = [p.x as f64, p.y as f64, p.z as f64];
        (0..3).all(|a| (c[a] - self.center[a]).abs() <= self.size[a] / 2.0)
    }
}

/// Bird's-eye-view rectangle; membership is half-open like [`RangeSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

impl BevBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let lo_x = self.center[0] - self.size[0] / 2.0;
        let lo_y = self.center[1] - self.size[1] / 2.0;
        x >= lo_x && x < lo_x + self.size[0] && y >= lo_y && y < lo_y + self.size[1]
    }

    pub fn diagonal(&self) -> f64 {
        self.size[0].hypot(self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub boxes: Vec<SceneBox>,
    /// Returns scattered uniformly on the plane `z = ground_z` over the range footprint.
    pub ground_points: usize,
    pub ground_z: f64,
    /// Returns scattered uniformly through the whole range volume.
    pub clutter_points: usize,
    pub range: RangeSpec,
}

impl SceneSpec {
    /// A street-like frame: a few cars and pedestrians over a dense ground plane.
    /// With the car range and 0.16 m cells this occupies roughly 10⁴ pillars.
    pub fn street() -> Self {
        Self {
            boxes: vec![
                SceneBox::car(12.0, -3.0, 1200),
                SceneBox::car(20.0, 4.0, 800),
                SceneBox::car(35.0, -6.5, 500),
                SceneBox::pedestrian(8.0, 2.0, 300),
                SceneBox::pedestrian(15.5, 6.0, 200),
                SceneBox::pedestrian(22.0, -9.0, 150),
            ],
            ground_points: 10_500,
            ground_z: -1.6,
            clutter_points: 1_500,
            range: RangeSpec::car(),
        }
    }

    pub fn single_box(b: SceneBox) -> Self {
        Self {
            boxes: vec![b],
            ground_points: 0,
            ground_z: -1.6,
            clutter_points: 0,
            range: RangeSpec::car(),
        }
    }
}

/// Deterministic synthetic frame. Box returns are sampled uniformly over
/// the box surface (area-weighted faces) so every one lies inside its box.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud, PointCloudError> {
    for b in &spec.boxes {
        if b.points == 0 {
            return Err(PointCloudError::InvalidScene("box point count"));
        }
        if b.size.iter().any(|&s| !(s > 0.0)) {
            return Err(PointCloudError::InvalidScene("box extent"));
        }
    }
    let mut rng = Rng::new(seed);
    let mut points = Vec::new();
    for b in &spec.boxes {
        let [sx, sy, sz] = b.size;
        // face pairs perpendicular to x, y, z
        let areas = [sy * sz, sx * sz, sx * sy];
        let total = areas.iter().sum::<f64>();
        for _ in 0..b.points {
            let pick = rng.uniform(0.0, total);
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let mut local = [0.0; 3];
            for (a, l) in local.iter_mut().enumerate() {
                *l = if a == axis {
                    if rng.uniform(0.0, 1.0) < 0.5 {
                        -0.5
                    } else {
                        0.5
                    }
                } else {
                    rng.uniform(-0.5, 0.5)
                };
            }
            let pos: Vec<f32> = (0..3)
                .map(|a| {
                    let half = b.size[a] / 2.0;
                    let v = b.center[a] + local[a] * b.size[a];
                    // f32 rounding must not push a surface return outside the box
                    let mut v32 = v as f32;
                    if (v32 as f64) > b.center[a] + half {
                        v32 = next_down(v32);
                    } else if (v32 as f64) < b.center[a] - half {
                        v32 = next_up(v32);
                    }
                    v32
                })
                .collect();
            points.push(Point::new(pos[0], pos[1], pos[2], rng.uniform(0.2, 1.0) as f32));
        }
    }
    let r = &spec.range;
    for _ in 0..spec.ground_points {
        points.push(Point::new(
            rng.uniform(r.x_min, r.x_max) as f32,
            rng.uniform(r.y_min, r.y_max) as f32,
            spec.ground_z as f32,
            rng.uniform(0.0, 0.3) as f32,
        ));
    }
    for _ in 0..spec.clutter_points {
        points.push(Point::new(
            rng.uniform(r.x_min, r.x_max) as f32,
            rng.uniform(r.y_min, r.y_max) as f32,
            rng.uniform(r.z_min, r.z_max) as f32,
            rng.uniform(0.0, 1.0) as f32,
        ));
    }
    Ok(PointCloud::new(points))
}

fn next_up(v: f32) -> f32 {
    if v == 0.0 {
        return f32::from_bits(1);
    }
    let bits = v.to_bits();
    f32::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(v: f32) -> f32 {
    -next_up(-v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn empty_and_single_record() {
        assert!(decode_kitti(&[]).unwrap().cloud.is_empty());
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = decode_kitti(&bytes).unwrap();
        assert_eq!(scan.cloud.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert_eq!(scan.skipped, 0);
    }

    #[test]
    fn truncated_reports_offset() {
        let bytes = vec![0u8; 37];
        match decode_kitti(&bytes) {
            Err(PointCloudError::Truncated { offset, len }) => {
                assert_eq!((offset, len), (32, 37));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_records_are_skipped() {
        let cloud = PointCloud::new(vec![
            Point::new(1.0, 1.0, 1.0, 0.1),
            Point::new(f32::NAN, 1.0, 1.0, 0.1),
            Point::new(2.0, f32::INFINITY, 1.0, 0.1),
            Point::new(3.0, 3.0, 3.0, 0.3),
        ]);
        let scan = decode_kitti(&encode_kitti(&cloud)).unwrap();
        assert_eq!(scan.skipped, 2);
        assert_eq!(scan.cloud.len(), 2);
        assert_eq!(scan.cloud.points[1].x, 3.0);
    }

    #[test]
    fn presets() {
        let car = RangeSpec::car();
        assert!(car.contains(&Point::new(10.0, 0.0, -1.0, 0.0)));
        assert!(!car.contains(&Point::new(-1.0, 0.0, 0.0, 0.0)));
        assert!(!RangeSpec::pedestrian().contains(&Point::new(50.0, 0.0, 0.0, 0.0)));
        assert!(car.contains(&Point::new(0.0, -40.0, -3.0, 0.0)));
        assert!(!car.contains(&Point::new(1.0, 40.0, 0.0, 0.0)));
        assert!(RangeSpec::new((1.0, 1.0), (0.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn single_box_scene() {
        let b = SceneBox::pedestrian(10.0, 1.0, 100);
        let cloud = synth_scene(&SceneSpec::single_box(b), 3).unwrap();
        assert_eq!(cloud.len(), 100);
        assert!(cloud.points.iter().all(|p| b.contains(p)));
        assert_eq!(cloud, synth_scene(&SceneSpec::single_box(b), 3).unwrap());
        let car = SceneBox::car(20.0, -2.0, 500);
        let cloud = synth_scene(&SceneSpec::single_box(car), 9).unwrap();
        assert!(cloud.points.iter().all(|p| car.contains(p)));
    }

    #[test]
    fn zero_density_rejected() {
        let b = SceneBox::car(10.0, 0.0, 0);
        assert!(synth_scene(&SceneSpec::single_box(b), 0).is_err());
    }

    proptest! {
        #[test]
        fn valid_files_round_trip(words in proptest::collection::vec(-1e6f32..1e6, 0..64)) {
            let n = words.len() / 4 * 4;
            let bytes: Vec<u8> = words[..n].iter().flat_map(|w| w.to_le_bytes()).collect();
            let scan = decode_kitti(&bytes).unwrap();
            prop_assert_eq!(encode_kitti(&scan.cloud), bytes);
        }

        #[test]
        fn filter_is_ordered_subsequence_and_idempotent(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let cloud = PointCloud::new((0..200).map(|_| Point::new(
                rng.uniform(-10.0, 80.0) as f32,
                rng.uniform(-50.0, 50.0) as f32,
                rng.uniform(-4.0, 2.0) as f32,
                0.5,
            )).collect());
            let r = RangeSpec::car();
            let once = range_filter(&cloud, &r);
            prop_assert_eq!(&range_filter(&once, &r), &once);
            let mut it = cloud.points.iter();
            for p in &once.points {
                prop_assert!(it.any(|q| q == p));
            }
        }
    }
}
