//! Analytic-versus-central-difference comparison for a whole stack.
//!
//! The scalar under test is `L = Σ w ⊙ stack(x)` for a fixed random weight
//! matrix `w`. Both the stack parameters and the input features are probed.

use crate::graph::{build_knn, NeighborGraph};
use crate::numerics::{dot, finite_diff_grad, Matrix, NumericsError, Rng};
use crate::partition::PillarSet;

use super::stack::{fe_backward, fe_forward, fe_infer};
use super::{FeStackParams, SatGcnError};

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradInstance {
    pub pillars: PillarSet,
    pub graph: NeighborGraph,
    /// Loss weights, `N x M_out` of the last layer.
    pub weights: Matrix,
}

impl GradInstance {
    /// Draws a random stack and instance, re-drawing until every relu
    /// pre-activation and every max-pool winner margin is at least `10 h`
    /// and no `±10 h` step of a single parameter or input flips a relu or a
    /// max winner.
    ///
    /// Features are rescaled so the largest output magnitude is 1; the stack
    /// is positively homogeneous in its input, so this changes no kink
    /// structure but keeps the loss well inside f64 resolution.
    pub fn sample(
        seed: u64,
        n: usize,
        k: usize,
        dims: &[usize],
        h: f64,
    ) -> Result<(FeStackParams, GradInstance), SatGcnError> {
        let mut seeds = Rng::new(seed);
        let mut best = 0.0f64;
        for _ in 0..MAX_DRAWS {
            let mut rng = Rng::new(seeds.next_u64());
            let positions: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)])
                .collect();
            let graph = build_knn(&positions, k)?;
            let mut features = Matrix::random_uniform(n, dims[0], 1.0, &mut rng);
            let mut stack = FeStackParams::init(dims, rng.next_u64());
            for layer in &mut stack.layers {
                layer.theta_s = rng.uniform(0.5, 1.5);
            }
            let peak = fe_infer(
                &PillarSet {
                    cells: vec![(0, 0); n],
                    positions: positions.clone(),
                    features: features.clone(),
                },
                &graph,
                &stack,
            )?
            .features
            .max_abs();
            if !(peak > 0.0 && peak.is_finite()) {
                continue;
            }
            let degree = 3f64.powi(stack.layers.len() as i32);
            features = features.scale(peak.powf(-1.0 / degree));
            let out_dim = stack.output_dim(dims[0]);
            let inst = GradInstance {
                pillars: PillarSet {
                    cells: (0..n).map(|i| (i, 0)).collect(),
                    positions,
                    features,
                },
                graph,
                weights: Matrix::random_uniform(n, out_dim, 1.0, &mut rng),
            };
            let margin = kink_margin(&stack, &inst)?;
            if margin >= 10.0 * h && probes_keep_pattern(&stack, &inst, 10.0 * h)? {
                return Ok((stack, inst));
            }
            best = best.max(margin);
        }
        Err(SatGcnError::NoSmoothInstance {
            needed: 10.0 * h,
            draws: MAX_DRAWS,
            best,
        })
    }

    /// `L = Σ w ⊙ stack(features)`.
    pub fn loss(&self, stack: &FeStackParams, features: &Matrix) -> Result<f64, SatGcnError> {
        let out = fe_infer(&self.pillars.with_features(features.clone()), &self.graph, stack)?;
        Ok(dot(out.features.as_slice(), self.weights.as_slice()))
    }
}

/// Smallest distance to a non-differentiable point: relu pre-activations and
/// the gap between the winner and runner-up of every max. Rows that repeat
/// the same neighbor are not rivals, and neither are two exact zeros, which
/// come from dead relu rows or columns and stay zero under small steps.
pub fn kink_margin(stack: &FeStackParams, inst: &GradInstance) -> Result<f64, SatGcnError> {
    let (_, cache) = fe_forward(&inst.pillars, &inst.graph, stack)?;
    let mut margin = f64::INFINITY;
    for lc in &cache.layers {
        let p = &lc.params;
        for (i, vc) in lc.vertices.iter().enumerate() {
            let nb = lc.graph.neighbors(i);
            let xi = lc.input.row(i);
            for &n in nb {
                let diff: Vec<f64> = lc.input.row(n).iter().zip(xi).map(|(a, b)| a - b).collect();
                for m in 0..p.m_out() {
                    let z = dot(p.theta.row(m), &diff) + dot(p.phi.row(m), xi);
                    margin = margin.min(z.abs());
                }
            }
            for (c, &win) in vc.argmax.iter().enumerate() {
                for (j, &n) in nb.iter().enumerate() {
                    let (w, r) = (vc.s[(win, c)], vc.s[(j, c)]);
                    if n != nb[win] && !(w == 0.0 && r == 0.0) {
                        margin = margin.min(w - r);
                    }
                }
            }
        }
    }
    Ok(margin)
}

/// Which edge features are positive and which row wins every max.
fn activation_pattern(
    stack: &FeStackParams,
    pillars: &PillarSet,
    graph: &NeighborGraph,
) -> Result<(Vec<bool>, Vec<usize>), SatGcnError> {
    let (_, cache) = fe_forward(pillars, graph, stack)?;
    let mut active = Vec::new();
    let mut winners = Vec::new();
    for lc in &cache.layers {
        for vc in &lc.vertices {
            active.extend(vc.edge.as_slice().iter().map(|&e| e > 0.0));
            winners.extend_from_slice(&vc.argmax);
        }
    }
    Ok((active, winners))
}

fn probes_keep_pattern(stack: &FeStackParams, inst: &GradInstance, reach: f64) -> Result<bool, SatGcnError> {
    let base = activation_pattern(stack, &inst.pillars, &inst.graph)?;
    let n_params = stack.num_params();
    let mut probe = stack.flatten();
    probe.extend_from_slice(inst.pillars.features.as_slice());
    let (rows, cols) = inst.pillars.features.shape();
    for i in 0..probe.len() {
        for step in [reach, -reach] {
            let mut v = probe.clone();
            v[i] += step;
            let s = stack.unflatten_like(&v[..n_params])?;
            let x = Matrix::from_vec(rows, cols, v[n_params..].to_vec())?;
            if activation_pattern(&s, &inst.pillars.with_features(x), &inst.graph)? != base {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Scales the first layer's Θ gradient by 1.01 before comparing.
    pub corrupt_theta: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            corrupt_theta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn describe(stack: &FeStackParams, n_inputs_cols: usize, mut index: usize) -> String {
    for (l, layer) in stack.layers.iter().enumerate() {
        if index < layer.num_params() {
            return format!("layer {l} {}", layer.describe(index));
        }
        index -= layer.num_params();
    }
    format!("input[{},{}]", index / n_inputs_cols, index % n_inputs_cols)
}

pub fn grad_check(
    stack: &FeStackParams,
    inst: &GradInstance,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, SatGcnError> {
    if !(1e-6..=1e-3).contains(&opts.h) {
        return Err(SatGcnError::BadStep(opts.h));
    }
    let (_, cache) = fe_forward(&inst.pillars, &inst.graph, stack)?;
    let grads = fe_backward(&cache, &inst.weights)?;
    let mut analytic = grads.flatten_params();
    if opts.corrupt_theta && !stack.layers.is_empty() {
        let n_theta = stack.layers[0].theta.as_slice().len();
        for v in &mut analytic[..n_theta] {
            *v *= 1.01;
        }
    }
    analytic.extend_from_slice(grads.input.as_slice());

    let n_params = stack.num_params();
    let (rows, cols) = inst.pillars.features.shape();
    let mut probe = stack.flatten();
    probe.extend_from_slice(inst.pillars.features.as_slice());

    let mut failure: Option<SatGcnError> = None;
    let numeric = finite_diff_grad(
        |v| {
            let eval = stack.unflatten_like(&v[..n_params]).and_then(|s| {
                let x = Matrix::from_vec(rows, cols, v[n_params..].to_vec())?;
                inst.loss(&s, &x)
            });
            eval.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &probe,
        opts.h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric.map_err(|e| match e {
        NumericsError::NonFiniteOracle { index, .. } => SatGcnError::NonFinite {
            location: describe(stack, cols, index),
        },
        other => other.into(),
    })?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: analytic.len(),
    };
    for (i, (&a, &cd)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() {
            return Err(SatGcnError::NonFinite {
                location: describe(stack, cols, i),
            });
        }
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel;
            report.worst = describe(stack, cols, i);
        }
    }
    Ok(report)
}
