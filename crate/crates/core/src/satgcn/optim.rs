//! Plain SGD and a small density-regression task for exercising training.

use crate::graph::{build_knn, NeighborGraph};
use crate::numerics::{Matrix, Rng};
use crate::partition::{partition, GridSpec, PillarSet};
use crate::pointcloud::{Point, PointCloud, RangeSpec};

use super::layer::LayerGrads;
use super::stack::{fe_backward, fe_forward, fe_infer, StackGrads};
use super::{FeStackParams, SatGcnError, SatGcnLayerParams};

/// `p ← p − lr·g` on every learnable field, θ_s included.
pub fn sgd_step(
    params: &SatGcnLayerParams,
    grads: &LayerGrads,
    lr: f64,
) -> Result<SatGcnLayerParams, SatGcnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(SatGcnError::BadLearningRate(lr));
    }
    let flat_g = grads.flatten_params();
    if flat_g.len() != params.num_params() {
        return Err(super::shape_err("sgd_step", params.num_params(), flat_g.len()));
    }
    if let Some(i) = flat_g.iter().position(|g| !g.is_finite()) {
        return Err(SatGcnError::NonFiniteGradient(params.describe(i)));
    }
    let updated: Vec<f64> = params
        .flatten()
        .iter()
        .zip(&flat_g)
        .map(|(p, g)| p - lr * g)
        .collect();
    SatGcnLayerParams::from_flat(params.m_in(), params.m_out(), &updated)
}

/// Applies [`sgd_step`] to every layer, or to none if any gradient is non-finite.
pub fn sgd_step_stack(
    stack: &FeStackParams,
    grads: &StackGrads,
    lr: f64,
) -> Result<FeStackParams, SatGcnError> {
    if grads.layers.len() != stack.layers.len() {
        return Err(super::shape_err("sgd_step_stack", stack.layers.len(), grads.layers.len()));
    }
    let layers = stack
        .layers
        .iter()
        .zip(&grads.layers)
        .enumerate()
        .map(|(l, (p, g))| {
            sgd_step(p, g, lr).map_err(|e| match e {
                SatGcnError::NonFiniteGradient(what) => {
                    SatGcnError::NonFiniteGradient(format!("layer {l} {what}"))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeStackParams { layers })
}

/// Pillars from clustered returns, regressed onto a smoothed point density.
///
/// Each pillar's input is `c·(n_i / n_max, 1)`, where `n_i` is its point count
/// and `c` is set by [`RegressionTask::calibrate`]. The target is a
/// Gaussian-weighted sum of neighboring counts, scaled so the densest pillar
/// is 1. The prediction is the channel mean of the stack output.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub pillars: PillarSet,
    pub graph: NeighborGraph,
    pub targets: Vec<f64>,
    pub input_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Loss before each step; the last entry is the loss after the final step.
    pub losses: Vec<f64>,
    /// θ_s of every layer after each step.
    pub theta_s: Vec<Vec<f64>>,
    pub skipped_steps: usize,
}

impl RegressionTask {
    pub const INPUT_DIM: usize = 2;

    pub fn synthetic(seed: u64, k: usize) -> Result<Self, SatGcnError> {
        let mut rng = Rng::new(seed);
        let range = RangeSpec::new((0.0, 6.4), (0.0, 6.4), (-3.0, 1.0)).unwrap();
        let mut grid = GridSpec::new(range).with_cell(0.32);
        grid.max_points_per_pillar = usize::MAX;
        let mut points = Vec::new();
        for _ in 0..5 {
            let (cx, cy) = (rng.uniform(1.0, 5.4), rng.uniform(1.0, 5.4));
            let spread = rng.uniform(0.3, 0.8);
            for _ in 0..rng.uniform(150.0, 400.0) as usize {
                let (x, y) = (cx + spread * gauss(&mut rng), cy + spread * gauss(&mut rng));
                points.push(Point::new(x as f32, y as f32, -1.0, 0.5));
            }
        }
        for _ in 0..150 {
            points.push(Point::new(
                rng.uniform(0.0, 6.4) as f32,
                rng.uniform(0.0, 6.4) as f32,
                -1.5,
                0.1,
            ));
        }
        let cloud = crate::pointcloud::range_filter(&PointCloud::new(points), &range);
        let raw = partition(&cloud, &grid, seed).expect("points are range-filtered");
        let n_max = raw.iter().map(|p| p.original_count).max().unwrap_or(1) as f64;
        let counts: Vec<f64> = raw.iter().map(|p| p.original_count as f64 / n_max).collect();
        let positions: Vec<[f64; 2]> = raw.iter().map(|p| p.center).collect();

        let bandwidth: f64 = 0.5;
        let mut targets: Vec<f64> = positions
            .iter()
            .map(|pi| {
                positions
                    .iter()
                    .zip(&counts)
                    .map(|(pj, c)| {
                        let d2 = (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2);
                        c * (-d2 / (2.0 * bandwidth * bandwidth)).exp()
                    })
                    .sum()
            })
            .collect();
        let t_max = targets.iter().cloned().fold(0.0, f64::max);
        for t in &mut targets {
            *t /= t_max;
        }

        let features = Matrix::from_fn(raw.len(), Self::INPUT_DIM, |r, c| {
            if c == 0 {
                counts[r]
            } else {
                1.0
            }
        });
        let graph = build_knn(&positions, k)?;
        Ok(Self {
            pillars: PillarSet {
                cells: raw.iter().map(|p| (p.cell_ix, p.cell_iy)).collect(),
                positions,
                features,
            },
            graph,
            targets,
            input_scale: 1.0,
        })
    }

    fn predictions(&self, out: &Matrix) -> Vec<f64> {
        let m = out.cols() as f64;
        (0..out.rows()).map(|i| out.row(i).iter().sum::<f64>() / m).collect()
    }

    /// Rescales the inputs so the initial prediction RMS of `stack` equals the
    /// target RMS. A stack of `L` layers is positively homogeneous of degree
    /// `3^L` in its input, so one evaluation fixes the scale exactly.
    pub fn calibrate(&mut self, stack: &FeStackParams) -> Result<f64, SatGcnError> {
        let out = fe_infer(&self.pillars, &self.graph, stack)?;
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let pred = rms(&self.predictions(&out.features));
        if !(pred > 0.0 && pred.is_finite()) {
            return Err(SatGcnError::NonFinite {
                location: "calibration: initial prediction is identically zero".into(),
            });
        }
        let degree = 3f64.powi(stack.layers.len() as i32);
        let c = (rms(&self.targets) / pred).powf(1.0 / degree);
        for v in self.pillars.features.as_mut_slice() {
            *v *= c;
        }
        self.input_scale *= c;
        Ok(c)
    }

    /// Mean squared error and its gradient with respect to the stack output.
    pub fn loss_and_grad(&self, stack: &FeStackParams) -> Result<(f64, StackGrads), SatGcnError> {
        let (out, cache) = fe_forward(&self.pillars, &self.graph, stack)?;
        let (n, m) = out.features.shape();
        let mut upstream = Matrix::zeros(n, m);
        let mut loss = 0.0;
        let preds = self.predictions(&out.features);
        for (i, (&t, &pred)) in self.targets.iter().zip(&preds).enumerate() {
            let r = pred - t;
            loss += r * r;
            let g = 2.0 * r / (n as f64 * m as f64);
            upstream.row_mut(i).fill(g);
        }
        Ok((loss / n as f64, fe_backward(&cache, &upstream)?))
    }

    /// Runs `steps` SGD updates of length `lr_t` along the unit gradient, with
    /// `lr_t` decaying from `lr` to 0 on a half cosine. Steps with non-finite
    /// or zero gradients are skipped.
    pub fn train(
        &self,
        stack: &mut FeStackParams,
        steps: usize,
        lr: f64,
    ) -> Result<TrainLog, SatGcnError> {
        let mut log = TrainLog::default();
        for t in 0..steps {
            let (loss, grads) = self.loss_and_grad(stack)?;
            log.losses.push(loss);
            let norm = grads.flatten_params().iter().map(|g| g * g).sum::<f64>().sqrt();
            let lr_t = lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / steps as f64).cos());
            let step = if norm > 0.0 && norm.is_finite() {
                sgd_step_stack(stack, &grads, lr_t / norm)
            } else {
                Err(SatGcnError::NonFiniteGradient(format!("gradient norm {norm}")))
            };
            match step {
                Ok(next) => *stack = next,
                Err(SatGcnError::NonFiniteGradient(_)) => log.skipped_steps += 1,
                Err(e) => return Err(e),
            }
            log.theta_s
                .push(stack.layers.iter().map(|l| l.theta_s).collect());
        }
        log.losses.push(self.loss_and_grad(stack)?.0);
        Ok(log)
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    // Box-Muller
    let u1 = rng.uniform(f64::EPSILON, 1.0);
    let u2 = rng.uniform(0.0, 1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
