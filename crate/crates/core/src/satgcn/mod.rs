//! Spatial-attention graph convolution (S-AT GCN) and the cascaded feature
//! enhancement stack.
//!
//! One layer maps every vertex feature `x_i` to `x'_i` in four steps over its
//! k-NN list:
//!
//! 1. edge features `E'[j,m] = relu(θ_m·(x_{n_j} − x_i) + φ_m·x_i)`
//! 2. attention with 1-D query/key: `Q = E'α`, `K = E'β`, `V = QKᵀ`, `A = V E'`
//! 3. distance suppression `S[j,:] = σ(θ_s d_j) A[j,:]` with `σ(t) = 2/(1+eᵗ)`
//! 4. channel-wise max over the k rows of `S`
//!
//! No softmax or scaling is applied to `V`, and the layer has no bias,
//! residual or normalization.

mod checkpoint;
mod gradcheck;
mod layer;
mod ops;
mod optim;
mod stack;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, kink_margin, GradCheckOptions, GradCheckReport, GradInstance};
pub use layer::{layer_backward, layer_forward, layer_infer, LayerCache, LayerGrads, VertexCache};
pub use ops::{aggregate, atdr, edgeconv, fdfs, AtdrOutput, FdfsOutput};
pub use optim::{sgd_step, sgd_step_stack, RegressionTask, TrainLog};
pub use stack::{fe_backward, fe_forward, fe_infer, FeCache, StackGrads};

use thiserror::Error;

use crate::graph::GraphError;
use crate::numerics::{Matrix, NumericsError, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum SatGcnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("distance {value} for neighbor {index} is negative")]
    NegativeDistance { index: usize, value: f64 },
    #[error("layer {layer} expects {expected} input channels but receives {got}")]
    DimChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in {0}; step skipped")]
    NonFiniteGradient(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("non-finite value while checking {location}")]
    NonFinite { location: String },
    #[error("no instance with kink margin >= {needed:e} in {draws} draws (best {best:e})")]
    NoSmoothInstance { needed: f64, draws: usize, best: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> SatGcnError {
    SatGcnError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Learnable symbols of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SatGcnLayerParams {
    /// `M_out x M_in`, row `m` is θ_m.
    pub theta: Matrix,
    /// `M_out x M_in`, row `m` is φ_m.
    pub phi: Matrix,
    /// Query projection, length `M_out`.
    pub alpha: Vec<f64>,
    /// Key projection, length `M_out`.
    pub beta: Vec<f64>,
    /// Suppression slope shared by every vertex of the layer.
    pub theta_s: f64,
}

impl SatGcnLayerParams {
    pub fn m_in(&self) -> usize {
        self.theta.cols()
    }

    pub fn m_out(&self) -> usize {
        self.theta.rows()
    }

    pub fn num_params(&self) -> usize {
        2 * self.m_out() * self.m_in() + 2 * self.m_out() + 1
    }

    pub fn validate(&self) -> Result<(), SatGcnError> {
        let (mo, mi) = self.theta.shape();
        if self.phi.shape() != (mo, mi) || self.alpha.len() != mo || self.beta.len() != mo {
            return Err(shape_err(
                "layer params",
                format!("phi {mo}x{mi}, alpha/beta {mo}"),
                format!(
                    "phi {:?}, alpha {}, beta {}",
                    self.phi.shape(),
                    self.alpha.len(),
                    self.beta.len()
                ),
            ));
        }
        Ok(())
    }

    /// Flat view in checkpoint order: Theta, Phi, alpha, beta, theta_s.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.theta.as_slice());
        out.extend_from_slice(self.phi.as_slice());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.push(self.theta_s);
        out
    }

    pub fn from_flat(m_in: usize, m_out: usize, flat: &[f64]) -> Result<Self, SatGcnError> {
        let w = m_in * m_out;
        if flat.len() != 2 * w + 2 * m_out + 1 {
            return Err(shape_err("from_flat", 2 * w + 2 * m_out + 1, flat.len()));
        }
        Ok(Self {
            theta: Matrix::from_vec(m_out, m_in, flat[..w].to_vec())?,
            phi: Matrix::from_vec(m_out, m_in, flat[w..2 * w].to_vec())?,
            alpha: flat[2 * w..2 * w + m_out].to_vec(),
            beta: flat[2 * w + m_out..2 * w + 2 * m_out].to_vec(),
            theta_s: flat[2 * w + 2 * m_out],
        })
    }

    /// Names the entry at `offset` of [`Self::flatten`].
    pub fn describe(&self, offset: usize) -> String {
        let (mo, mi) = (self.m_out(), self.m_in());
        let w = mo * mi;
        match offset {
            o if o < w => format!("theta[{},{}]", o / mi, o % mi),
            o if o < 2 * w => format!("phi[{},{}]", (o - w) / mi, (o - w) % mi),
            o if o < 2 * w + mo => format!("alpha[{}]", o - 2 * w),
            o if o < 2 * w + 2 * mo => format!("beta[{}]", o - 2 * w - mo),
            _ => "theta_s".to_string(),
        }
    }

    fn is_finite(&self) -> bool {
        self.theta.is_finite()
            && self.phi.is_finite()
            && self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
            && self.theta_s.is_finite()
    }
}

/// Uniform init: Θ, Φ in ±√(6/(M_in+M_out)); α, β in ±√(3/M_out); θ_s = 1.
pub fn init_params(m_in: usize, m_out: usize, seed: u64) -> SatGcnLayerParams {
    assert!(m_in >= 1 && m_out >= 1, "layer dims must be at least 1");
    let mut rng = Rng::new(seed);
    let w = (6.0 / (m_in + m_out) as f64).sqrt();
    let p = (3.0 / m_out as f64).sqrt();
    SatGcnLayerParams {
        theta: Matrix::random_uniform(m_out, m_in, w, &mut rng),
        phi: Matrix::random_uniform(m_out, m_in, w, &mut rng),
        alpha: rng.uniform_vec(m_out, -p, p),
        beta: rng.uniform_vec(m_out, -p, p),
        theta_s: 1.0,
    }
}

/// Cascade of layers; layer `l` consumes layer `l-1`'s output width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeStackParams {
    pub layers: Vec<SatGcnLayerParams>,
}

impl FeStackParams {
    /// Layers `dims[0] -> dims[1] -> ...`, seeded per layer from `seed`.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self {
            layers: dims
                .windows(2)
                .map(|w| init_params(w[0], w[1], rng.next_u64()))
                .collect(),
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<(), SatGcnError> {
        let mut expected = input_dim;
        for (layer, p) in self.layers.iter().enumerate() {
            p.validate()?;
            if p.m_in() != expected {
                return Err(SatGcnError::DimChain {
                    layer,
                    expected: p.m_in(),
                    got: expected,
                });
            }
            expected = p.m_out();
        }
        Ok(())
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, |l| l.m_out())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.flatten()).collect()
    }

    /// Rebuilds a stack with this stack's shapes from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self, SatGcnError> {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let n = l.num_params();
            let chunk = flat
                .get(offset..offset + n)
                .ok_or_else(|| shape_err("unflatten", self.num_params(), flat.len()))?;
            layers.push(SatGcnLayerParams::from_flat(l.m_in(), l.m_out(), chunk)?);
            offset += n;
        }
        if offset != flat.len() {
            return Err(shape_err("unflatten", offset, flat.len()));
        }
        Ok(Self { layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }
}
