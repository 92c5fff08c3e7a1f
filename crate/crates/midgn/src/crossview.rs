//! Single-hop LightGCN-style exchange over the user-bundle graph: users
//! collect their bundles' representations and vice versa, with symmetric
//! degree normalization, no self-connection and no transformation.

use rayon::prelude::*;

use crate::graph::BipartiteGraph;
use crate::mat::{axpy, Mat};

/// Cross-view representations; chunk structure is inherited from the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewState {
    pub v_u: Mat,
    pub v_b: Mat,
}

/// Propagate user and bundle representations across the (train) user-bundle
/// graph. Nodes without train interactions come out as zero rows.
pub fn cross_propagate(ub_graph: &BipartiteGraph, e_u: &Mat, e_b: &Mat) -> CrossViewState {
    assert_eq!(ub_graph.left_count(), e_u.rows(), "user count mismatch");
    assert_eq!(ub_graph.right_count(), e_b.rows(), "bundle count mismatch");
    assert_eq!(e_u.cols(), e_b.cols());

    let mut v_u = Mat::zeros(e_u.rows(), e_u.cols());
    v_u.par_rows_mut().enumerate().for_each(|(u, row)| {
        let (bundles, _) = ub_graph.left_neighbors(u);
        let du = bundles.len() as f64;
        for &b in bundles {
            let db = ub_graph.right_degree(b) as f64;
            axpy(row, 1.0 / (du * db).sqrt(), e_b.row(b));
        }
    });

    let mut v_b = Mat::zeros(e_b.rows(), e_b.cols());
    v_b.par_rows_mut().enumerate().for_each(|(b, row)| {
        let (users, _) = ub_graph.right_neighbors(b);
        let db = users.len() as f64;
        for &u in users {
            let du = ub_graph.left_degree(u) as f64;
            axpy(row, 1.0 / (db * du).sqrt(), e_u.row(u));
        }
    });

    CrossViewState { v_u, v_b }
}

/// Backward of [`cross_propagate`]: gradients on (v_u, v_b) flow to
/// (e_b, e_u) through the same normalized adjacency.
pub(crate) fn cross_backward(
    ub_graph: &BipartiteGraph,
    g_v_u: &Mat,
    g_v_b: &Mat,
) -> (Mat, Mat) {
    let mut g_e_u = Mat::zeros(g_v_u.rows(), g_v_u.cols());
    g_e_u.par_rows_mut().enumerate().for_each(|(u, row)| {
        let (bundles, _) = ub_graph.left_neighbors(u);
        let du = bundles.len() as f64;
        for &b in bundles {
            let db = ub_graph.right_degree(b) as f64;
            axpy(row, 1.0 / (du * db).sqrt(), g_v_b.row(b));
        }
    });

    let mut g_e_b = Mat::zeros(g_v_b.rows(), g_v_b.cols());
    g_e_b.par_rows_mut().enumerate().for_each(|(b, row)| {
        let (users, _) = ub_graph.right_neighbors(b);
        let db = users.len() as f64;
        for &u in users {
            let du = ub_graph.left_degree(u) as f64;
            axpy(row, 1.0 / (db * du).sqrt(), g_v_u.row(u));
        }
    });

    (g_e_u, g_e_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionMatrix;

    fn graph(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> BipartiteGraph {
        BipartiteGraph::build(&InteractionMatrix::new(rows, cols, pairs.to_vec()).unwrap())
    }

    #[test]
    fn degree_one_identity() {
        let g = graph(1, 1, &[(0, 0)]);
        let e_u = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let e_b = Mat::from_vec(1, 3, vec![-1.0, 0.5, 4.0]);
        let out = cross_propagate(&g, &e_u, &e_b);
        assert_eq!(out.v_u, e_b);
        assert_eq!(out.v_b, e_u);
    }

    #[test]
    fn two_degree_one_bundles() {
        // user connected to two bundles that each have degree 1:
        // v_u = (e_b0 + e_b1) / √2
        let g = graph(1, 2, &[(0, 0), (0, 1)]);
        let e_u = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let e_b = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = cross_propagate(&g, &e_u, &e_b);
        let s = 1.0 / 2.0f64.sqrt();
        assert!((out.v_u.get(0, 0) - s).abs() < 1e-14);
        assert!((out.v_u.get(0, 1) - s).abs() < 1e-14);
    }

    #[test]
    fn isolated_nodes_are_zero() {
        let g = graph(2, 2, &[(0, 0)]);
        let e_u = Mat::from_vec(2, 2, vec![1.0; 4]);
        let e_b = Mat::from_vec(2, 2, vec![1.0; 4]);
        let out = cross_propagate(&g, &e_u, &e_b);
        assert!(out.v_u.row(1).iter().all(|&v| v == 0.0));
        assert!(out.v_b.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearity_in_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = graph(3, 3, &[(0, 0), (0, 2), (1, 1), (2, 1), (2, 2)]);
        let e_u = Mat::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let e_b = Mat::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let base = cross_propagate(&g, &e_u, &e_b);
        let mut e_u2 = e_u.clone();
        e_u2.scale(2.5);
        let mut e_b2 = e_b.clone();
        e_b2.scale(2.5);
        let scaled = cross_propagate(&g, &e_u2, &e_b2);
        for (a, b) in base.v_u.as_slice().iter().zip(scaled.v_u.as_slice()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
        for (a, b) in base.v_b.as_slice().iter().zip(scaled.v_b.as_slice()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_normalized_adjacency() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let pairs = [(0usize, 0usize), (0, 1), (1, 1), (2, 0), (2, 2), (3, 2)];
        let g = graph(4, 3, &pairs);
        let d = 3;
        let e_u = Mat::from_vec(4, d, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let e_b = Mat::from_vec(3, d, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());

        // dense D_u^{-1/2} Y D_b^{-1/2}
        let mut adj = vec![vec![0.0f64; 3]; 4];
        for &(u, b) in &pairs {
            adj[u][b] = 1.0;
        }
        let du: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
        let db: Vec<f64> = (0..3).map(|b| (0..4).map(|u| adj[u][b]).sum()).collect();
        let mut v_u_dense = Mat::zeros(4, d);
        let mut v_b_dense = Mat::zeros(3, d);
        for u in 0..4 {
            for b in 0..3 {
                if adj[u][b] == 0.0 {
                    continue;
                }
                let w = 1.0 / (du[u] * db[b]).sqrt();
                for x in 0..d {
                    v_u_dense.set(u, x, v_u_dense.get(u, x) + w * e_b.get(b, x));
                    v_b_dense.set(b, x, v_b_dense.get(b, x) + w * e_u.get(u, x));
                }
            }
        }

        let out = cross_propagate(&g, &e_u, &e_b);
        for (a, b) in out.v_u.as_slice().iter().zip(v_u_dense.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in out.v_b.as_slice().iter().zip(v_b_dense.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = graph(3, 3, &[(0, 0), (1, 0), (1, 2), (2, 1)]);
        let d = 2;
        let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize| {
            Mat::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let e_u = rand_mat(&mut rng, 3);
        let e_b = rand_mat(&mut rng, 3);
        let g_v_u = rand_mat(&mut rng, 3);
        let g_v_b = rand_mat(&mut rng, 3);

        // adjoint identity: <g_v, forward(e)> == <backward(g_v), e>
        let out = cross_propagate(&g, &e_u, &e_b);
        let lhs: f64 = g_v_u
            .as_slice()
            .iter()
            .zip(out.v_u.as_slice())
            .chain(g_v_b.as_slice().iter().zip(out.v_b.as_slice()))
            .map(|(a, b)| a * b)
            .sum();
        let (g_e_u, g_e_b) = cross_backward(&g, &g_v_u, &g_v_b);
        let rhs: f64 = g_e_u
            .as_slice()
            .iter()
            .zip(e_u.as_slice())
            .chain(g_e_b.as_slice().iter().zip(e_b.as_slice()))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
