//! Cascaded layers over one fixed spatial graph.

use crate::graph::NeighborGraph;
use crate::numerics::Matrix;
use crate::partition::PillarSet;

use super::layer::{layer_backward, layer_forward, layer_infer, LayerCache, LayerGrads};
use super::{FeStackParams, SatGcnError};

#[derive(Debug, Clone, PartialEq)]
pub struct FeCache {
    pub layers: Vec<LayerCache>,
    /// Input width, kept so an empty stack can still shape its gradient.
    pub input_dim: usize,
    pub vertices: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the stack input features.
    pub input: Matrix,
}

impl StackGrads {
    pub fn flatten_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.flatten_params()).collect()
    }
}

pub fn fe_forward(
    ps: &PillarSet,
    graph: &NeighborGraph,
    stack: &FeStackParams,
) -> Result<(PillarSet, FeCache), SatGcnError> {
    stack.validate(ps.feature_dim())?;
    let mut features = ps.features.clone();
    let mut caches = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (next, cache) = layer_forward(&features, graph, layer)?;
        caches.push(cache);
        features = next;
    }
    Ok((
        ps.with_features(features),
        FeCache {
            layers: caches,
            input_dim: ps.feature_dim(),
            vertices: ps.len(),
        },
    ))
}

/// Inference-only cascade; does not retain per-vertex caches.
pub fn fe_infer(
    ps: &PillarSet,
    graph: &NeighborGraph,
    stack: &FeStackParams,
) -> Result<PillarSet, SatGcnError> {
    stack.validate(ps.feature_dim())?;
    let mut features = ps.features.clone();
    for layer in &stack.layers {
        features = layer_infer(&features, graph, layer)?;
    }
    Ok(ps.with_features(features))
}

pub fn fe_backward(cache: &FeCache, upstream: &Matrix) -> Result<StackGrads, SatGcnError> {
    let mut grad = upstream.clone();
    let mut layers = Vec::with_capacity(cache.layers.len());
    for layer in cache.layers.iter().rev() {
        let g = layer_backward(layer, &grad)?;
        grad = g.input.clone();
        layers.push(g);
    }
    layers.reverse();
    if grad.shape() != (cache.vertices, cache.input_dim) {
        return Err(super::shape_err(
            "fe_backward",
            format!("{}x{}", cache.vertices, cache.input_dim),
            format!("{:?}", grad.shape()),
        ));
    }
    Ok(StackGrads {
        layers,
        input: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn;
    use crate::numerics::Rng;

    fn pillars(n: usize, m: usize, seed: u64) -> PillarSet {
        let mut rng = Rng::new(seed);
        PillarSet {
            cells: (0..n).map(|i| (i, 0)).collect(),
            positions: (0..n).map(|_| [rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)]).collect(),
            features: Matrix::random_uniform(n, m, 1.0, &mut rng),
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let ps = pillars(7, 3, 0);
        let g = build_knn(&ps.positions, 3).unwrap();
        let (out, cache) = fe_forward(&ps, &g, &FeStackParams::default()).unwrap();
        assert_eq!(out, ps);
        let up = Matrix::random_uniform(7, 3, 1.0, &mut Rng::new(1));
        assert_eq!(fe_backward(&cache, &up).unwrap().input, up);
    }

    #[test]
    fn single_layer_matches_layer_calls() {
        let ps = pillars(9, 4, 2);
        let g = build_knn(&ps.positions, 3).unwrap();
        let stack = FeStackParams::init(&[4, 5], 3);
        let (out, cache) = fe_forward(&ps, &g, &stack).unwrap();
        let (direct, lc) = layer_forward(&ps.features, &g, &stack.layers[0]).unwrap();
        assert_eq!(out.features, direct);
        assert_eq!(out.positions, ps.positions);
        let up = Matrix::random_uniform(9, 5, 1.0, &mut Rng::new(4));
        let a = fe_backward(&cache, &up).unwrap();
        let b = layer_backward(&lc, &up).unwrap();
        assert_eq!(a.layers[0], b);
        assert_eq!(a.input, b.input);
    }

    #[test]
    fn infer_matches_forward_and_checks_dims() {
        let ps = pillars(15, 4, 5);
        let g = build_knn(&ps.positions, 4).unwrap();
        let stack = FeStackParams::init(&[4, 6, 6, 6], 6);
        assert_eq!(
            fe_forward(&ps, &g, &stack).unwrap().0,
            fe_infer(&ps, &g, &stack).unwrap()
        );
        let wrong = FeStackParams::init(&[3, 6], 6);
        assert!(matches!(
            fe_infer(&ps, &g, &wrong),
            Err(SatGcnError::DimChain { .. })
        ));
    }
}
