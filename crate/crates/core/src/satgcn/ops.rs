//! Per-vertex building blocks of one S-AT GCN layer.

use crate::numerics::{dot, relu, sigmoid2, Matrix};

use super::{shape_err, SatGcnError};

/// Edge features `E'[j,m] = relu(θ_m·(x_{n_j} − x_i) + φ_m·x_i)`, `k x M_out`.
pub fn edgeconv(
    center: &[f64],
    neighbor_feats: &Matrix,
    theta: &Matrix,
    phi: &Matrix,
) -> Result<Matrix, SatGcnError> {
    let m_in = center.len();
    if neighbor_feats.cols() != m_in || theta.cols() != m_in || phi.shape() != theta.shape() {
        return Err(shape_err(
            "edgeconv",
            format!("M_in = {m_in} everywhere, Theta/Phi same shape"),
            format!(
                "neighbors {:?}, Theta {:?}, Phi {:?}",
                neighbor_feats.shape(),
                theta.shape(),
                phi.shape()
            ),
        ));
    }
    let k = neighbor_feats.rows();
    let m_out = theta.rows();
    let self_term: Vec<f64> = (0..m_out).map(|m| dot(phi.row(m), center)).collect();
    let mut diff = vec![0.0; m_in];
    let mut out = Matrix::zeros(k, m_out);
    for j in 0..k {
        for (d, (a, b)) in diff.iter_mut().zip(neighbor_feats.row(j).iter().zip(center)) {
            *d = a - b;
        }
        for m in 0..m_out {
            out[(j, m)] = relu(dot(theta.row(m), &diff) + self_term[m]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtdrOutput {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    /// `k x k` correlation `Q Kᵀ`.
    pub v: Matrix,
    /// `V E'`, `k x M`.
    pub a: Matrix,
}

/// Self-attention with one-dimensional query and key.
pub fn atdr(edge: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<AtdrOutput, SatGcnError> {
    let order: Vec<usize> = (0..edge.rows()).collect();
    atdr_ordered(edge, alpha, beta, &order)
}

/// [`atdr`] with the inner sum of `V E'` taken over rows in `order`.
///
/// Summing in a canonical order makes `A` bitwise independent of how the
/// neighbor rows are listed.
pub(crate) fn atdr_ordered(
    edge: &Matrix,
    alpha: &[f64],
    beta: &[f64],
    order: &[usize],
) -> Result<AtdrOutput, SatGcnError> {
    let (k, m) = edge.shape();
    if alpha.len() != m || beta.len() != m || order.len() != k {
        return Err(shape_err(
            "atdr",
            format!("alpha/beta of length {m}"),
            format!("alpha {}, beta {}", alpha.len(), beta.len()),
        ));
    }
    let q: Vec<f64> = (0..k).map(|j| dot(edge.row(j), alpha)).collect();
    let kk: Vec<f64> = (0..k).map(|j| dot(edge.row(j), beta)).collect();
    let v = Matrix::from_fn(k, k, |a, b| q[a] * kk[b]);
    let mut a = Matrix::zeros(k, m);
    for j in 0..k {
        let out = a.row_mut(j);
        for &l in order {
            let w = v[(j, l)];
            for (o, &e) in out.iter_mut().zip(edge.row(l)) {
                *o += w * e;
            }
        }
    }
    Ok(AtdrOutput { q, k: kk, v, a })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdfsOutput {
    pub sigma: Vec<f64>,
    pub s: Matrix,
}

/// Far-distance suppression: row `j` of `A` scaled by `2 / (1 + e^{θ_s d_j})`.
pub fn fdfs(attended: &Matrix, distances: &[f64], theta_s: f64) -> Result<FdfsOutput, SatGcnError> {
    if distances.len() != attended.rows() {
        return Err(shape_err("fdfs", attended.rows(), distances.len()));
    }
    if let Some((index, &value)) = distances.iter().enumerate().find(|(_, &d)| !(d >= 0.0)) {
        return Err(SatGcnError::NegativeDistance { index, value });
    }
    let sigma: Vec<f64> = distances.iter().map(|&d| sigmoid2(theta_s * d)).collect();
    let mut s = attended.clone();
    for (j, &g) in sigma.iter().enumerate() {
        for v in s.row_mut(j) {
            *v *= g;
        }
    }
    Ok(FdfsOutput { sigma, s })
}

/// Channel-wise max over rows with the winning row per channel (lowest on ties).
pub fn aggregate(s: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let (k, m) = s.shape();
    assert!(k >= 1, "aggregate needs at least one row");
    let mut best = s.row(0).to_vec();
    let mut arg = vec![0usize; m];
    for j in 1..k {
        for (c, &v) in s.row(j).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = j;
            }
        }
    }
    (best, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn equal_neighbors_drop_theta_term() {
        let mut rng = Rng::new(2);
        let x = rng.uniform_vec(3, -1.0, 1.0);
        let nb = Matrix::from_rows(&[&x, &x]);
        let theta = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let phi = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let e = edgeconv(&x, &nb, &theta, &phi).unwrap();
        let expect: Vec<f64> = (0..4).map(|m| relu(dot(phi.row(m), &x))).collect();
        assert_eq!(e.row(0), &expect[..]);
        assert_eq!(e.row(1), &expect[..]);

        let other = Matrix::random_uniform(2, 3, 5.0, &mut rng);
        let zero = Matrix::zeros(4, 3);
        assert_eq!(
            edgeconv(&x, &other, &zero, &phi).unwrap(),
            edgeconv(&x, &nb, &zero, &phi).unwrap()
        );
    }

    #[test]
    fn edgeconv_hand_values() {
        // x_i = (1, 2); neighbors (0, 1), (3, -1)
        let x = [1.0, 2.0];
        let nb = Matrix::from_rows(&[&[0.0, 1.0], &[3.0, -1.0]]);
        let theta = Matrix::from_rows(&[&[1.0, 0.5], &[-2.0, 1.0]]);
        let phi = Matrix::from_rows(&[&[0.5, 0.0], &[0.25, 0.25]]);
        let e = edgeconv(&x, &nb, &theta, &phi).unwrap();
        // row 0: diff (-1, -1): m0 = -1.5 + 0.5 = -1 -> 0 ; m1 = 2 - 1 + 0.75 = 1.75
        // row 1: diff (2, -3):  m0 = 2 - 1.5 + 0.5 = 1 ; m1 = -4 - 3 + 0.75 -> 0
        assert_eq!(e, Matrix::from_rows(&[&[0.0, 1.75], &[1.0, 0.0]]));
        assert!(edgeconv(&x, &Matrix::zeros(2, 3), &theta, &phi).is_err());
    }

    #[test]
    fn atdr_degenerate_cases() {
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
        let out = atdr(&e, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(out.q.iter().all(|&v| v == 0.0));
        assert_eq!(out.a, Matrix::zeros(3, 2));

        let single = Matrix::from_rows(&[&[2.0, -1.0]]);
        let out = atdr(&single, &[1.0, 0.5], &[0.5, 2.0]).unwrap();
        let qk = (2.0 - 0.5) * (1.0 - 2.0);
        assert_eq!(out.a, single.scale(qk));
        assert!(atdr(&e, &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn fdfs_closed_forms() {
        let a = Matrix::from_rows(&[&[1.0, -2.0], &[4.0, 8.0]]);
        let out = fdfs(&a, &[0.7, 3.0], 0.0).unwrap();
        assert_eq!(out.s, a);
        let out = fdfs(&a, &[0.0, 0.0], 5.0).unwrap();
        assert_eq!(out.sigma, vec![1.0, 1.0]);
        let out = fdfs(&a, &[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((out.s[(0, 0)] - 0.5).abs() < 1e-15 && (out.s[(0, 1)] + 1.0).abs() < 1e-15);
        assert!(matches!(
            fdfs(&a, &[-0.1, 0.0], 1.0),
            Err(SatGcnError::NegativeDistance { index: 0, .. })
        ));
    }

    #[test]
    fn aggregate_hand_values() {
        let (x, arg) = aggregate(&Matrix::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]));
        assert_eq!((x, arg), (vec![3.0, 5.0], vec![1, 0]));
        let one = Matrix::from_rows(&[&[-1.0, 0.5]]);
        assert_eq!(aggregate(&one).0, vec![-1.0, 0.5]);
        let tie = Matrix::from_rows(&[&[2.0], &[2.0]]);
        assert_eq!(aggregate(&tie).1, vec![0]);
    }

    fn sigma_ref(theta_s: f64, d: f64) -> f64 {
        2.0 / (1.0 + (theta_s * d).exp())
    }

    proptest! {
        #[test]
        fn aggregate_ignores_row_order(seed in 0u64..5000, k in 1usize..10, m in 1usize..8) {
            let mut rng = Rng::new(seed);
            let s = Matrix::random_uniform(k, m, 3.0, &mut rng);
            let mut perm: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut perm);
            let shuffled = Matrix::from_fn(k, m, |r, c| s[(perm[r], c)]);
            prop_assert_eq!(aggregate(&s).0, aggregate(&shuffled).0);
        }

        #[test]
        fn suppression_is_local(theta_s in 0.01f64..5.0, d in 0.0f64..5.0, extra in 0.01f64..5.0) {
            let near = sigma_ref(theta_s, d);
            let far = sigma_ref(theta_s, d + extra);
            prop_assert!(far < near);
            let a = Matrix::from_rows(&[&[1.5, -0.3]]);
            let s_near = fdfs(&a, &[d], theta_s).unwrap().s;
            let s_far = fdfs(&a, &[d + extra], theta_s).unwrap().s;
            for c in 0..2 {
                prop_assert!(s_far[(0, c)].abs() <= s_near[(0, c)].abs());
            }
        }
    }
}
