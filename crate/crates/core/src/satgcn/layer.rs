//! Whole-graph forward and analytic backward for one layer.
//!
//! The edge step is evaluated through two dense projections,
//! `P = X Θᵀ` and `R = X (Φ − Θ)ᵀ`, so that `z[i,j,m] = P[n_j,m] + R[i,m]`.
//! Vertices are independent in the forward pass; backward keeps every
//! cross-vertex reduction in vertex order so results do not depend on the
//! thread schedule.

use rayon::prelude::*;

use crate::graph::NeighborGraph;
use crate::numerics::{sigmoid2_grad_from_value, Matrix};

use super::ops::{aggregate, atdr_ordered, fdfs};
use super::{shape_err, SatGcnError, SatGcnLayerParams};

/// Everything the backward pass needs about one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexCache {
    /// `E'`, `k x M_out`. Positive entries mark active relus.
    pub edge: Matrix,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Matrix,
    pub a: Matrix,
    pub sigma: Vec<f64>,
    pub s: Matrix,
    pub argmax: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub params: SatGcnLayerParams,
    pub input: Matrix,
    pub graph: NeighborGraph,
    pub vertices: Vec<VertexCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub theta: Matrix,
    pub phi: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta_s: f64,
    /// Gradient with respect to the layer input features, `N x M_in`.
    pub input: Matrix,
}

impl LayerGrads {
    /// Parameter gradients in [`SatGcnLayerParams::flatten`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.theta.as_slice());
        out.extend_from_slice(self.phi.as_slice());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.push(self.theta_s);
        out
    }
}

fn check_inputs(
    features: &Matrix,
    graph: &NeighborGraph,
    params: &SatGcnLayerParams,
) -> Result<(), SatGcnError> {
    params.validate()?;
    if features.cols() != params.m_in() {
        return Err(shape_err("layer_forward", params.m_in(), features.cols()));
    }
    if graph.len() != features.rows() {
        return Err(shape_err(
            "layer_forward graph",
            features.rows(),
            graph.len(),
        ));
    }
    Ok(())
}

struct Projections {
    neighbor: Matrix,
    center: Matrix,
}

fn project(features: &Matrix, params: &SatGcnLayerParams) -> Result<Projections, SatGcnError> {
    let diff = params.phi.sub(&params.theta)?;
    Ok(Projections {
        neighbor: features.matmul_nt(&params.theta)?,
        center: features.matmul_nt(&diff)?,
    })
}

/// Rows sorted by neighbor id; makes the attention sum independent of list order.
fn canonical_order(neighbors: &[usize], distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| {
        neighbors[a]
            .cmp(&neighbors[b])
            .then(distances[a].total_cmp(&distances[b]))
    });
    order
}

fn vertex_forward(
    i: usize,
    proj: &Projections,
    graph: &NeighborGraph,
    params: &SatGcnLayerParams,
) -> Result<VertexCache, SatGcnError> {
    let nb = graph.neighbors(i);
    let dist = graph.distances(i);
    let m_out = params.m_out();
    let center = proj.center.row(i);
    let mut edge = Matrix::zeros(nb.len(), m_out);
    for (j, &n) in nb.iter().enumerate() {
        for ((e, &p), &c) in edge.row_mut(j).iter_mut().zip(proj.neighbor.row(n)).zip(center) {
            *e = crate::numerics::relu(p + c);
        }
    }
    let att = atdr_ordered(&edge, &params.alpha, &params.beta, &canonical_order(nb, dist))?;
    let sup = fdfs(&att.a, dist, params.theta_s)?;
    let (_, argmax) = aggregate(&sup.s);
    Ok(VertexCache {
        edge,
        q: att.q,
        k: att.k,
        v: att.v,
        a: att.a,
        sigma: sup.sigma,
        s: sup.s,
        argmax,
    })
}

fn output_row(vc: &VertexCache) -> impl Iterator<Item = f64> + '_ {
    vc.argmax.iter().enumerate().map(|(m, &j)| vc.s[(j, m)])
}

/// Forward pass keeping the cache for [`layer_backward`].
pub fn layer_forward(
    features: &Matrix,
    graph: &NeighborGraph,
    params: &SatGcnLayerParams,
) -> Result<(Matrix, LayerCache), SatGcnError> {
    check_inputs(features, graph, params)?;
    let proj = project(features, params)?;
    let vertices = (0..features.rows())
        .into_par_iter()
        .map(|i| vertex_forward(i, &proj, graph, params))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Matrix::zeros(features.rows(), params.m_out());
    for (i, vc) in vertices.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(output_row(vc)) {
            *o = v;
        }
    }
    Ok((
        out,
        LayerCache {
            params: params.clone(),
            input: features.clone(),
            graph: graph.clone(),
            vertices,
        },
    ))
}

/// Forward pass without a cache; same values as [`layer_forward`].
pub fn layer_infer(
    features: &Matrix,
    graph: &NeighborGraph,
    params: &SatGcnLayerParams,
) -> Result<Matrix, SatGcnError> {
    check_inputs(features, graph, params)?;
    let proj = project(features, params)?;
    let rows = (0..features.rows())
        .into_par_iter()
        .map(|i| vertex_forward(i, &proj, graph, params).map(|vc| output_row(&vc).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_vec(
        features.rows(),
        params.m_out(),
        rows.into_iter().flatten().collect(),
    )?)
}

struct VertexGrad {
    /// dL/dz for each edge, `k x M_out`.
    dz: Matrix,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    theta_s: f64,
}

fn vertex_backward(
    vc: &VertexCache,
    dist: &[f64],
    params: &SatGcnLayerParams,
    upstream: &[f64],
) -> VertexGrad {
    let (k, m) = vc.edge.shape();
    // max routes each channel's gradient to its winning row
    let mut ds = Matrix::zeros(k, m);
    for (c, (&j, &g)) in vc.argmax.iter().zip(upstream).enumerate() {
        ds[(j, c)] = g;
    }
    let mut da = Matrix::zeros(k, m);
    let mut theta_s = 0.0;
    for j in 0..k {
        let dsigma: f64 = ds.row(j).iter().zip(vc.a.row(j)).map(|(g, a)| g * a).sum();
        theta_s += dsigma * sigmoid2_grad_from_value(vc.sigma[j]) * dist[j];
        for (d, g) in da.row_mut(j).iter_mut().zip(ds.row(j)) {
            *d = vc.sigma[j] * g;
        }
    }
    // A = V E': both V (through Q and K) and E' carry gradient
    let dv = da.matmul_nt(&vc.edge).expect("cache shapes");
    let mut dedge = vc.v.matmul_tn(&da).expect("cache shapes");
    let dq: Vec<f64> = (0..k)
        .map(|j| dv.row(j).iter().zip(&vc.k).map(|(a, b)| a * b).sum())
        .collect();
    let dk: Vec<f64> = (0..k)
        .map(|l| (0..k).map(|j| dv[(j, l)] * vc.q[j]).sum())
        .collect();
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    for j in 0..k {
        for c in 0..m {
            alpha[c] += dq[j] * vc.edge[(j, c)];
            beta[c] += dk[j] * vc.edge[(j, c)];
            dedge[(j, c)] += dq[j] * params.alpha[c] + dk[j] * params.beta[c];
        }
    }
    for (d, &e) in dedge.as_mut_slice().iter_mut().zip(vc.edge.as_slice()) {
        if e <= 0.0 {
            *d = 0.0;
        }
    }
    VertexGrad {
        dz: dedge,
        alpha,
        beta,
        theta_s,
    }
}

/// Exact gradients of `Σ upstream ⊙ output` for the forward call that
/// produced `cache`.
pub fn layer_backward(cache: &LayerCache, upstream: &Matrix) -> Result<LayerGrads, SatGcnError> {
    let params = &cache.params;
    let n = cache.input.rows();
    let (m_in, m_out) = (params.m_in(), params.m_out());
    if upstream.shape() != (n, m_out) {
        return Err(shape_err(
            "layer_backward",
            format!("{n}x{m_out}"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let per_vertex: Vec<VertexGrad> = (0..n)
        .into_par_iter()
        .map(|i| {
            vertex_backward(
                &cache.vertices[i],
                cache.graph.distances(i),
                params,
                upstream.row(i),
            )
        })
        .collect();

    let mut g_self = Matrix::zeros(n, m_out);
    let mut g_nb = Matrix::zeros(n, m_out);
    let mut alpha = vec![0.0; m_out];
    let mut beta = vec![0.0; m_out];
    let mut theta_s = 0.0;
    for (i, vg) in per_vertex.iter().enumerate() {
        for (j, &nb) in cache.graph.neighbors(i).iter().enumerate() {
            let row = vg.dz.row(j);
            for (c, &g) in row.iter().enumerate() {
                g_self[(i, c)] += g;
                g_nb[(nb, c)] += g;
            }
        }
        for c in 0..m_out {
            alpha[c] += vg.alpha[c];
            beta[c] += vg.beta[c];
        }
        theta_s += vg.theta_s;
    }

    let theta = g_nb.sub(&g_self)?.matmul_tn(&cache.input)?;
    let phi = g_self.matmul_tn(&cache.input)?;
    let input = g_nb
        .matmul(&params.theta)?
        .add(&g_self.matmul(&params.phi.sub(&params.theta)?)?)?;
    debug_assert_eq!(theta.shape(), (m_out, m_in));
    Ok(LayerGrads {
        theta,
        phi,
        alpha,
        beta,
        theta_s,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn;
    use crate::numerics::{finite_diff_grad, Rng};
    use crate::satgcn::init_params;
    use proptest::prelude::*;

    fn instance(seed: u64, n: usize, k: usize, m_in: usize, m_out: usize) -> (Matrix, NeighborGraph, SatGcnLayerParams) {
        let mut rng = Rng::new(seed);
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)]).collect();
        let x = Matrix::random_uniform(n, m_in, 1.0, &mut rng);
        (x, build_knn(&pos, k).unwrap(), init_params(m_in, m_out, seed + 1))
    }

    #[test]
    fn infer_matches_forward() {
        let (x, g, p) = instance(1, 20, 4, 5, 6);
        let (out, _) = layer_forward(&x, &g, &p).unwrap();
        assert_eq!(out, layer_infer(&x, &g, &p).unwrap());
    }

    #[test]
    fn zero_features_give_zero_output() {
        let (_, g, p) = instance(2, 10, 3, 4, 4);
        let out = layer_infer(&Matrix::zeros(10, 4), &g, &p).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let (x, g, p) = instance(3, 8, 3, 4, 4);
        let (_, cache) = layer_forward(&x, &g, &p).unwrap();
        let gr = layer_backward(&cache, &Matrix::zeros(8, 4)).unwrap();
        assert!(gr.flatten_params().iter().all(|&v| v == 0.0));
        assert!(gr.input.as_slice().iter().all(|&v| v == 0.0));
        assert!(layer_backward(&cache, &Matrix::zeros(8, 3)).is_err());
    }

    #[test]
    fn theta_s_gradient_vanishes_at_zero_distance() {
        let (x, _, p) = instance(4, 5, 2, 3, 3);
        let nb: Vec<usize> = (0..5).flat_map(|i| [(i + 1) % 5, (i + 2) % 5]).collect();
        let g = NeighborGraph::from_lists(2, nb, vec![0.0; 10]);
        let (_, cache) = layer_forward(&x, &g, &p).unwrap();
        let mut rng = Rng::new(9);
        let up = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        assert_eq!(layer_backward(&cache, &up).unwrap().theta_s, 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (x, g, p) = instance(5, 6, 3, 4, 4);
        let mut rng = Rng::new(17);
        let up = Matrix::random_uniform(6, 4, 1.0, &mut rng);
        let (_, cache) = layer_forward(&x, &g, &p).unwrap();
        let gr = layer_backward(&cache, &up).unwrap();
        let loss = |params: &SatGcnLayerParams, feats: &Matrix| -> f64 {
            let out = layer_infer(feats, &g, params).unwrap();
            out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        let flat = p.flatten();
        let num = finite_diff_grad(
            |v| loss(&SatGcnLayerParams::from_flat(4, 4, v).unwrap(), &x),
            &flat,
            1e-6,
        )
        .unwrap();
        for (a, b) in gr.flatten_params().iter().zip(&num) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
        let num = finite_diff_grad(
            |v| loss(&p, &Matrix::from_vec(6, 4, v.to_vec()).unwrap()),
            x.as_slice(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gr.input.as_slice().iter().zip(&num) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn doubling_upstream_doubles_grads() {
        let (x, g, p) = instance(6, 12, 4, 3, 5);
        let mut rng = Rng::new(1);
        let up = Matrix::random_uniform(12, 5, 1.0, &mut rng);
        let (_, cache) = layer_forward(&x, &g, &p).unwrap();
        let one = layer_backward(&cache, &up).unwrap();
        let two = layer_backward(&cache, &up.scale(2.0)).unwrap();
        for (a, b) in one.flatten_params().iter().zip(two.flatten_params()) {
            assert_eq!(2.0 * a, b);
        }
        assert_eq!(one.input.scale(2.0), two.input);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn neighbor_order_does_not_matter(seed in 0u64..10_000, n in 2usize..20, k in 1usize..7) {
            let (x, g, p) = instance(seed, n, k, 3, 4);
            let mut rng = Rng::new(seed ^ 0xabc);
            let perms: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let mut v: Vec<usize> = (0..k).collect();
                    rng.shuffle(&mut v);
                    v
                })
                .collect();
            prop_assert_eq!(layer_infer(&x, &g, &p).unwrap(), layer_infer(&x, &g.permuted(&perms), &p).unwrap());
        }

        #[test]
        fn thread_count_does_not_matter(seed in 0u64..10_000, n in 2usize..40) {
            let (x, g, p) = instance(seed, n, 4.min(n - 1).max(1), 3, 5);
            let run = |threads: usize| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| layer_forward(&x, &g, &p).unwrap())
            };
            let (one, cache_one) = run(1);
            let (four, _) = run(4);
            prop_assert_eq!(&one, &four);
            let up = Matrix::from_fn(n, 5, |r, c| (r as f64 - c as f64) * 0.1);
            let g1 = layer_backward(&cache_one, &up).unwrap();
            let g4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap()
                .install(|| layer_backward(&cache_one, &up).unwrap());
            prop_assert_eq!(g1.flatten_params(), g4.flatten_params());
            prop_assert_eq!(g1.input, g4.input);
        }

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..10_000) {
            let (stack, inst) = crate::satgcn::GradInstance::sample(seed, 6, 3, &[4, 4], 1e-5).unwrap();
            let r = crate::satgcn::grad_check(&stack, &inst, Default::default()).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
        }
    }
}
