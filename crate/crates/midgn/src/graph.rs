//! Immutable sparse bipartite graph with compressed adjacency in both
//! directions. Edge ids follow the canonical lexicographic (left, right)
//! ordering, so forward-CSR position and edge id coincide; the reverse
//! direction keeps an explicit edge-id column.

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// One edge under the canonical ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeIndex {
    pub edge_id: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    left_count: usize,
    right_count: usize,
    // forward: left -> sorted right neighbors; slot i holds edge id i
    fwd_offsets: Vec<usize>,
    fwd_targets: Vec<usize>,
    // reverse: right -> sorted left neighbors, with canonical edge ids
    rev_offsets: Vec<usize>,
    rev_targets: Vec<usize>,
    rev_edges: Vec<usize>,
    // endpoint lookup by edge id
    edge_left: Vec<usize>,
    edge_right: Vec<usize>,
}

impl BipartiteGraph {
    /// Build both adjacency directions from an interaction matrix.
    pub fn build(matrix: &InteractionMatrix) -> Self {
        let left_count = matrix.n_rows();
        let right_count = matrix.n_cols();
        let pairs = matrix.pairs(); // sorted lexicographically, duplicate-free
        let edge_count = pairs.len();

        let mut fwd_offsets = vec![0usize; left_count + 1];
        for &(l, _) in pairs {
            fwd_offsets[l + 1] += 1;
        }
        for i in 1..fwd_offsets.len() {
            fwd_offsets[i] += fwd_offsets[i - 1];
        }
        let mut fwd_targets = Vec::with_capacity(edge_count);
        let mut edge_left = Vec::with_capacity(edge_count);
        let mut edge_right = Vec::with_capacity(edge_count);
        for &(l, r) in pairs {
            fwd_targets.push(r);
            edge_left.push(l);
            edge_right.push(r);
        }

        let mut rev_offsets = vec![0usize; right_count + 1];
        for &(_, r) in pairs {
            rev_offsets[r + 1] += 1;
        }
        for i in 1..rev_offsets.len() {
            rev_offsets[i] += rev_offsets[i - 1];
        }
        let mut rev_targets = vec![0usize; edge_count];
        let mut rev_edges = vec![0usize; edge_count];
        let mut cursor = rev_offsets.clone();
        // pairs are (left, right)-sorted, so each reverse list comes out
        // sorted by left id
        for (edge_id, &(l, r)) in pairs.iter().enumerate() {
            let slot = cursor[r];
            rev_targets[slot] = l;
            rev_edges[slot] = edge_id;
            cursor[r] += 1;
        }

        BipartiteGraph {
            left_count,
            right_count,
            fwd_offsets,
            fwd_targets,
            rev_offsets,
            rev_targets,
            rev_edges,
            edge_left,
            edge_right,
        }
    }

    #[inline]
    pub fn left_count(&self) -> usize {
        self.left_count
    }

    #[inline]
    pub fn right_count(&self) -> usize {
        self.right_count
    }

    #[inline]
    pub fn edge_count(&self) -> usize {
        self.edge_left.len()
    }

    #[inline]
    pub fn count(&self, side: Side) -> usize {
        match side {
            Side::Left => self.left_count,
            Side::Right => self.right_count,
        }
    }

    /// Sorted neighbor ids paired with canonical edge ids; zero-copy views.
    pub fn neighbors(&self, side: Side, id: usize) -> Result<(&[usize], EdgeIds<'_>)> {
        let limit = self.count(side);
        if id >= limit {
            return Err(Error::Bounds {
                entity: match side {
                    Side::Left => "left node",
                    Side::Right => "right node",
                },
                id,
                limit,
            });
        }
        Ok(match side {
            Side::Left => {
                let (s, e) = (self.fwd_offsets[id], self.fwd_offsets[id + 1]);
                (&self.fwd_targets[s..e], EdgeIds::Range(s, e))
            }
            Side::Right => {
                let (s, e) = (self.rev_offsets[id], self.rev_offsets[id + 1]);
                (&self.rev_targets[s..e], EdgeIds::Slice(&self.rev_edges[s..e]))
            }
        })
    }

    /// Forward slice for a left node: (neighbor ids, first edge id).
    /// Edge id of slot `j` is `first + j`.
    #[inline]
    pub fn left_neighbors(&self, left: usize) -> (&[usize], usize) {
        let (s, e) = (self.fwd_offsets[left], self.fwd_offsets[left + 1]);
        (&self.fwd_targets[s..e], s)
    }

    /// Reverse slice for a right node: (neighbor ids, edge ids).
    #[inline]
    pub fn right_neighbors(&self, right: usize) -> (&[usize], &[usize]) {
        let (s, e) = (self.rev_offsets[right], self.rev_offsets[right + 1]);
        (&self.rev_targets[s..e], &self.rev_edges[s..e])
    }

    #[inline]
    pub fn left_degree(&self, left: usize) -> usize {
        self.fwd_offsets[left + 1] - self.fwd_offsets[left]
    }

    #[inline]
    pub fn right_degree(&self, right: usize) -> usize {
        self.rev_offsets[right + 1] - self.rev_offsets[right]
    }

    #[inline]
    pub fn edge_endpoints(&self, edge_id: usize) -> (usize, usize) {
        (self.edge_left[edge_id], self.edge_right[edge_id])
    }

    pub fn edges(&self) -> impl Iterator<Item = EdgeIndex> + '_ {
        (0..self.edge_count()).map(|edge_id| EdgeIndex {
            edge_id,
            left: self.edge_left[edge_id],
            right: self.edge_right[edge_id],
        })
    }
}

/// Edge ids for a neighbor slice. The forward direction is contiguous by
/// construction; the reverse direction indexes into a stored column.
#[derive(Debug, Clone, Copy)]
pub enum EdgeIds<'a> {
    Range(usize, usize),
    Slice(&'a [usize]),
}

impl EdgeIds<'_> {
    pub fn get(&self, j: usize) -> usize {
        match self {
            EdgeIds::Range(s, _) => s + j,
            EdgeIds::Slice(ids) => ids[j],
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            EdgeIds::Range(s, e) => (*s..*e).collect(),
            EdgeIds::Slice(ids) => ids.to_vec(),
        }
    }
}
