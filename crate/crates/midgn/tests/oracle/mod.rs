//! Brute-force scalar reference for the full forward pass. Everything is
//! nested `Vec`s and explicit loops; nothing is shared with the library's
//! kernels.

use midgn::{InteractionMatrix, ParameterStore};

pub struct World {
    user_chunks: Vec<Vec<Vec<f64>>>,
    bundle_chunks: Vec<Vec<Vec<f64>>>,
    items: Vec<Vec<f64>>,
    ui: Vec<(usize, usize)>,
    bi: Vec<(usize, usize)>,
    ub: Vec<(usize, usize)>,
    k: usize,
    width: usize,
}

pub struct Reference {
    pub e_u: Vec<Vec<f64>>,
    pub e_b: Vec<Vec<f64>>,
    pub v_u: Vec<Vec<f64>>,
    pub v_b: Vec<Vec<f64>>,
}

impl Reference {
    pub fn score(&self, u: usize, b: usize) -> f64 {
        let mut s = 0.0;
        for x in 0..self.e_u[u].len() {
            s += self.e_u[u][x] * self.e_b[b][x];
            s += self.v_u[u][x] * self.v_b[b][x];
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl World {
    pub fn from_store(
        store: &ParameterStore,
        y: &InteractionMatrix,
        h: &InteractionMatrix,
        r: &InteractionMatrix,
    ) -> World {
        let k = store.intents();
        let width = store.chunk_width();
        let chunks_of = |mat: &midgn::Mat, row: usize| -> Vec<Vec<f64>> {
            (0..k).map(|kk| mat.row(row)[kk * width..(kk + 1) * width].to_vec()).collect()
        };
        World {
            user_chunks: (0..store.n_users()).map(|u| chunks_of(&store.user, u)).collect(),
            bundle_chunks: (0..store.n_bundles()).map(|b| chunks_of(&store.bundle, b)).collect(),
            items: (0..store.n_items()).map(|i| store.item.row(i).to_vec()).collect(),
            ui: r.pairs().to_vec(),
            bi: h.pairs().to_vec(),
            ub: y.pairs().to_vec(),
            k,
            width,
        }
    }

    /// One tower: L disentangling layers of T routing iterations each, with
    /// the layer outputs summed.
    fn tower(
        &self,
        init: &[Vec<Vec<f64>>],
        pairs: &[(usize, usize)],
        n_left: usize,
        layers: usize,
        iters: usize,
    ) -> Vec<Vec<f64>> {
        let k = self.k;
        let w = self.width;
        let mut sum = vec![vec![vec![0.0; w]; k]; n_left];
        let mut current: Vec<Vec<Vec<f64>>> = init.to_vec();

        for _layer in 0..layers {
            let mut conf: Vec<Vec<f64>> = vec![vec![1.0; k]; pairs.len()];
            let mut chunks = current.clone();
            for _t in 0..iters {
                // confidence refresh from the current chunks
                for (e, &(c, i)) in pairs.iter().enumerate() {
                    for kk in 0..k {
                        conf[e][kk] += dot(&chunks[c][kk], &self.items[i]);
                    }
                }
                // per-edge softmax
                let mut norm = vec![vec![0.0; k]; pairs.len()];
                for e in 0..pairs.len() {
                    let m = conf[e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for kk in 0..k {
                        norm[e][kk] = (conf[e][kk] - m).exp();
                        z += norm[e][kk];
                    }
                    for kk in 0..k {
                        norm[e][kk] /= z;
                    }
                }
                // confidence-weighted degrees on both sides
                let mut deg_left = vec![vec![0.0; k]; n_left];
                let mut deg_right = vec![vec![0.0; k]; self.items.len()];
                for (e, &(c, i)) in pairs.iter().enumerate() {
                    for kk in 0..k {
                        deg_left[c][kk] += norm[e][kk];
                        deg_right[i][kk] += norm[e][kk];
                    }
                }
                // weighted aggregation of item embeddings
                let mut next = vec![vec![vec![0.0; w]; k]; n_left];
                for (e, &(c, i)) in pairs.iter().enumerate() {
                    for kk in 0..k {
                        let weight = norm[e][kk] / (deg_left[c][kk] * deg_right[i][kk]).sqrt();
                        for x in 0..w {
                            next[c][kk][x] += weight * self.items[i][x];
                        }
                    }
                }
                chunks = next;
            }
            for c in 0..n_left {
                for kk in 0..k {
                    for x in 0..w {
                        sum[c][kk][x] += chunks[c][kk][x];
                    }
                }
            }
            current = chunks;
        }

        // flatten chunk structure into d-wide rows
        sum.into_iter()
            .map(|chunks| chunks.into_iter().flatten().collect())
            .collect()
    }

    pub fn forward(&self, layers: usize, iters: usize, _k: usize) -> Reference {
        let n_users = self.user_chunks.len();
        let n_bundles = self.bundle_chunks.len();
        let e_u = self.tower(&self.user_chunks, &self.ui, n_users, layers, iters);
        let e_b = self.tower(&self.bundle_chunks, &self.bi, n_bundles, layers, iters);

        // one LightGCN hop over the user-bundle graph
        let d = self.k * self.width;
        let mut du = vec![0.0f64; n_users];
        let mut db = vec![0.0f64; n_bundles];
        for &(u, b) in &self.ub {
            du[u] += 1.0;
            db[b] += 1.0;
        }
        let mut v_u = vec![vec![0.0; d]; n_users];
        let mut v_b = vec![vec![0.0; d]; n_bundles];
        for &(u, b) in &self.ub {
            let weight = 1.0 / (du[u] * db[b]).sqrt();
            for x in 0..d {
                v_u[u][x] += weight * e_b[b][x];
                v_b[b][x] += weight * e_u[u][x];
            }
        }
        Reference { e_u, e_b, v_u, v_b }
    }
}
