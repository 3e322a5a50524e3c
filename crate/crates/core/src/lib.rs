//! Feature enhancement for pillar-based LiDAR detectors.
//!
//! The pipeline partitions a point cloud into BEV pillars, encodes each
//! pillar with a PointNet-style max-pooled encoder, links pillars through a
//! k-nearest-neighbor graph, refines their features with cascaded
//! spatial-attention graph convolutions, and scatters the result into a
//! dense pseudo-image.
//!
//! ```no_run
//! use satgcn::{graph, partition, pointcloud, satgcn as fe};
//!
//! let range = pointcloud::RangeSpec::car();
//! let grid = partition::GridSpec::new(range);
//! let cloud = pointcloud::synth_scene(&pointcloud::SceneSpec::street(), 7).unwrap();
//! let raw = partition::partition(&pointcloud::range_filter(&cloud, &range), &grid, 7).unwrap();
//! let pillars = partition::encode_pillars(&raw, &partition::EncoderParams::init(64, 7)).unwrap();
//! let knn = graph::build_knn(&pillars.positions, 9).unwrap();
//! let stack = fe::FeStackParams::init(&[64, 64, 64, 64], 7);
//! let enhanced = fe::fe_infer(&pillars, &knn, &stack).unwrap();
//! let image = partition::scatter(&enhanced, &grid).unwrap();
//! assert_eq!(image.occupied(), pillars.len());
//! ```

pub mod cli;
pub mod graph;
pub mod numerics;
pub mod partition;
pub mod pointcloud;
pub mod satgcn;
