//! Graph disentangling layers with neighbor routing.
//!
//! Each left node's embedding is split into K intent chunks. A layer starts
//! from uniform per-edge confidences and alternates, per routing iteration:
//! refine raw confidences with the dot product between the current chunk and
//! the (static) item embedding, softmax them over intents, then re-aggregate
//! each chunk from neighbor items under confidence-derived symmetric degree
//! normalization. Stacking layers feeds the aggregated chunks forward, so
//! deeper layers refine confidences from an increasingly neighborhood-aware
//! state; the stack output is the sum of all layer outputs.
//!
//! Every forward kernel has a matching hand-derived backward; both sides are
//! parallel over disjoint output rows with fixed reduction order, so results
//! are identical for any thread count.

use std::io::Write;

use rayon::prelude::*;

use crate::error::Result;
use crate::graph::BipartiteGraph;
use crate::mat::{axpy, dot, Mat};

/// Per-edge raw routing confidences, one K-vector per canonical edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentConfidence {
    intents: usize,
    values: Vec<f64>,
}

impl IntentConfidence {
    pub fn new(intents: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len() % intents.max(1), 0);
        IntentConfidence { intents, values }
    }

    #[inline]
    pub fn intents(&self) -> usize {
        self.intents
    }

    #[inline]
    pub fn edge_count(&self) -> usize {
        if self.intents == 0 {
            0
        } else {
            self.values.len() / self.intents
        }
    }

    #[inline]
    pub fn edge_row(&self, edge_id: usize) -> &[f64] {
        &self.values[edge_id * self.intents..(edge_id + 1) * self.intents]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Most-confident intent per edge; ties resolve to the lowest index.
    pub fn argmax_per_edge(&self) -> Vec<usize> {
        (0..self.edge_count())
            .map(|e| {
                let row = self.edge_row(e);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Chunked per-node state: K chunks of width `values.cols() / intents` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedNodeState {
    pub values: Mat,
    pub intents: usize,
}

impl ChunkedNodeState {
    pub fn new(values: Mat, intents: usize) -> Self {
        assert_eq!(values.cols() % intents, 0, "chunk width must be uniform");
        ChunkedNodeState { values, intents }
    }

    #[inline]
    pub fn chunk_width(&self) -> usize {
        self.values.cols() / self.intents
    }

    pub fn chunk(&self, node: usize, k: usize) -> &[f64] {
        self.values.row_chunk(node, k, self.chunk_width())
    }
}

/// Uniform confidence: every edge starts with a raw vector of ones.
pub fn init_confidence(graph: &BipartiteGraph, k_intents: usize) -> IntentConfidence {
    IntentConfidence::new(k_intents, vec![1.0; graph.edge_count() * k_intents])
}

/// Per-edge softmax over intents, max-subtracted for stability.
pub fn normalize_confidence(conf: &IntentConfidence) -> IntentConfidence {
    let k = conf.intents;
    let mut out = vec![0.0; conf.values.len()];
    softmax_rows(&conf.values, k, &mut out);
    IntentConfidence::new(k, out)
}

fn softmax_rows(raw: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(raw.len(), out.len());
    out.par_chunks_mut(k).zip(raw.par_chunks(k)).for_each(|(o, r)| {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, ri) in o.iter_mut().zip(r) {
            *oi = (ri - m).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    });
}

/// Confidence-weighted degrees per Eq-style symmetric normalization:
/// left degree sums a node's edge weights, right degree an item's.
fn weighted_degrees(graph: &BipartiteGraph, conf_norm: &[f64], k: usize) -> (Mat, Mat) {
    let mut deg_left = Mat::zeros(graph.left_count(), k);
    deg_left.par_rows_mut().enumerate().for_each(|(c, row)| {
        let (neighbors, first_edge) = graph.left_neighbors(c);
        for j in 0..neighbors.len() {
            let e = first_edge + j;
            for (kk, r) in row.iter_mut().enumerate() {
                *r += conf_norm[e * k + kk];
            }
        }
    });
    let mut deg_right = Mat::zeros(graph.right_count(), k);
    deg_right.par_rows_mut().enumerate().for_each(|(i, row)| {
        let (_, edges) = graph.right_neighbors(i);
        for &e in edges {
            for (kk, r) in row.iter_mut().enumerate() {
                *r += conf_norm[e * k + kk];
            }
        }
    });
    (deg_left, deg_right)
}

/// Weighted aggregation of item embeddings into left-node chunks. Nodes
/// without neighbors keep zero chunks.
fn aggregate(
    graph: &BipartiteGraph,
    conf_norm: &[f64],
    deg_left: &Mat,
    deg_right: &Mat,
    items: &Mat,
    k: usize,
) -> Mat {
    let width = items.cols();
    let mut out = Mat::zeros(graph.left_count(), k * width);
    out.par_rows_mut().enumerate().for_each(|(c, row)| {
        let (neighbors, first_edge) = graph.left_neighbors(c);
        for (j, &i) in neighbors.iter().enumerate() {
            let e = first_edge + j;
            let item_row = items.row(i);
            for kk in 0..k {
                let w = conf_norm[e * k + kk]
                    / (deg_left.get(c, kk) * deg_right.get(i, kk)).sqrt();
                axpy(&mut row[kk * width..(kk + 1) * width], w, item_row);
            }
        }
    });
    out
}

/// Raw-confidence refinement: add the chunk/item dot product per edge.
fn refresh_confidence(
    graph: &BipartiteGraph,
    conf: &mut [f64],
    chunks: &Mat,
    items: &Mat,
    k: usize,
) {
    let width = items.cols();
    conf.par_chunks_mut(k).enumerate().for_each(|(e, row)| {
        let (l, r) = graph.edge_endpoints(e);
        let item_row = items.row(r);
        for (kk, v) in row.iter_mut().enumerate() {
            *v += dot(chunks.row_chunk(l, kk, width), item_row);
        }
    });
}

/// Intermediates of one routing iteration, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct IterTrace {
    conf_norm: Vec<f64>,
    deg_left: Mat,
    deg_right: Mat,
    chunks: Mat,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    input: Mat,
    iters: Vec<IterTrace>,
}

#[derive(Debug, Clone)]
pub(crate) struct StackTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Mat,
    /// Normalized confidences that produced each layer's final aggregation.
    pub final_conf_norm: Vec<Vec<f64>>,
}

/// One routing iteration: refresh raw confidences with the incoming chunks,
/// softmax, then re-aggregate. Returns the new chunks and updated raw
/// confidences.
pub fn route_iteration(
    graph: &BipartiteGraph,
    conf: &IntentConfidence,
    node_chunks: &ChunkedNodeState,
    item_emb: &Mat,
) -> (ChunkedNodeState, IntentConfidence) {
    let k = conf.intents();
    let mut raw = conf.as_slice().to_vec();
    refresh_confidence(graph, &mut raw, &node_chunks.values, item_emb, k);
    let mut norm = vec![0.0; raw.len()];
    softmax_rows(&raw, k, &mut norm);
    let (deg_left, deg_right) = weighted_degrees(graph, &norm, k);
    let chunks = aggregate(graph, &norm, &deg_left, &deg_right, item_emb, k);
    (
        ChunkedNodeState::new(chunks, k),
        IntentConfidence::new(k, raw),
    )
}

fn layer_forward(
    graph: &BipartiteGraph,
    input: &Mat,
    items: &Mat,
    k: usize,
    t_iterations: usize,
    mut trace: Option<&mut LayerTrace>,
) -> (Mat, Vec<f64>) {
    assert!(t_iterations >= 1);
    let mut raw = vec![1.0; graph.edge_count() * k];
    let mut chunks = input.clone();
    let mut norm = vec![0.0; raw.len()];
    for _ in 0..t_iterations {
        refresh_confidence(graph, &mut raw, &chunks, items, k);
        softmax_rows(&raw, k, &mut norm);
        let (deg_left, deg_right) = weighted_degrees(graph, &norm, k);
        chunks = aggregate(graph, &norm, &deg_left, &deg_right, items, k);
        if let Some(t) = trace.as_deref_mut() {
            t.iters.push(IterTrace {
                conf_norm: norm.clone(),
                deg_left,
                deg_right,
                chunks: chunks.clone(),
            });
        }
    }
    (chunks, norm)
}

/// One disentangling layer: fresh uniform confidences, `t_iterations`
/// routing iterations starting from `input` as the iteration-0 chunks.
/// Also returns the final raw confidences for inspection.
pub fn disentangle_layer(
    graph: &BipartiteGraph,
    input: &ChunkedNodeState,
    item_emb: &Mat,
    t_iterations: usize,
) -> (ChunkedNodeState, IntentConfidence) {
    let k = input.intents;
    let mut conf = init_confidence(graph, k);
    let mut chunks = input.clone();
    for _ in 0..t_iterations {
        let (next, next_conf) = route_iteration(graph, &conf, &chunks, item_emb);
        chunks = next;
        conf = next_conf;
    }
    (chunks, conf)
}

/// Output of a full stack: summed layer representations plus the last
/// layer's normalized confidences.
pub struct StackOutput {
    pub output: ChunkedNodeState,
    pub final_confidence: IntentConfidence,
}

/// Stack of disentangling layers. Layer l consumes layer l-1's output; the
/// result sums the per-layer outputs (the layer-0 input is not included).
pub fn disentangle_stack(
    graph: &BipartiteGraph,
    node_init_chunks: &ChunkedNodeState,
    item_emb: &Mat,
    layers: usize,
    t_iterations: usize,
) -> StackOutput {
    let k = node_init_chunks.intents;
    let trace = stack_forward(graph, &node_init_chunks.values, item_emb, k, layers, t_iterations, false);
    let norm = trace.final_conf_norm.last().expect("layers >= 1").clone();
    StackOutput {
        output: ChunkedNodeState::new(trace.output, k),
        final_confidence: IntentConfidence::new(k, norm),
    }
}

/// Forward pass over the whole stack. `keep_trace` retains per-iteration
/// intermediates for the backward pass; inference drops them.
pub(crate) fn stack_forward(
    graph: &BipartiteGraph,
    init: &Mat,
    items: &Mat,
    k: usize,
    layers: usize,
    t_iterations: usize,
    keep_trace: bool,
) -> StackTrace {
    assert!(layers >= 1);
    let mut out = Mat::zeros(init.rows(), init.cols());
    let mut current = init.clone();
    let mut layer_traces = Vec::new();
    let mut final_conf_norm = Vec::new();
    for _ in 0..layers {
        let mut trace = keep_trace.then(|| LayerTrace { input: current.clone(), iters: Vec::new() });
        let (chunks, norm) = layer_forward(graph, &current, items, k, t_iterations, trace.as_mut());
        out.add_assign(&chunks);
        final_conf_norm.push(norm);
        if let Some(t) = trace {
            layer_traces.push(t);
        }
        current = chunks;
    }
    StackTrace { layers: layer_traces, output: out, final_conf_norm }
}

/// Backward of `aggregate`: consumes the gradient on the produced chunks,
/// yields the gradient on the normalized confidences and accumulates the
/// item gradient.
fn aggregate_backward(
    graph: &BipartiteGraph,
    it: &IterTrace,
    items: &Mat,
    g_chunks: &Mat,
    k: usize,
    grad_items: &mut Mat,
) -> Vec<f64> {
    let width = items.cols();
    let e_count = graph.edge_count();

    // edge weights w = Ã / √(D_left · D_right), recomputed from the trace
    let mut w = vec![0.0; e_count * k];
    w.par_chunks_mut(k).enumerate().for_each(|(e, row)| {
        let (l, r) = graph.edge_endpoints(e);
        for (kk, wv) in row.iter_mut().enumerate() {
            *wv = it.conf_norm[e * k + kk]
                / (it.deg_left.get(l, kk) * it.deg_right.get(r, kk)).sqrt();
        }
    });

    // ∂L/∂w per edge and intent
    let mut g_w = vec![0.0; e_count * k];
    g_w.par_chunks_mut(k).enumerate().for_each(|(e, row)| {
        let (l, r) = graph.edge_endpoints(e);
        let item_row = items.row(r);
        for (kk, gv) in row.iter_mut().enumerate() {
            *gv = dot(g_chunks.row_chunk(l, kk, width), item_row);
        }
    });

    // item gradient: each item row gathers over its incident edges
    grad_items.par_rows_mut().enumerate().for_each(|(i, row)| {
        let (lefts, edges) = graph.right_neighbors(i);
        for (&l, &e) in lefts.iter().zip(edges) {
            for kk in 0..k {
                axpy(row, w[e * k + kk], g_chunks.row_chunk(l, kk, width));
            }
        }
    });

    // degree-channel reductions: P = Σ g_w · w over each node's edges
    let mut p_left = Mat::zeros(graph.left_count(), k);
    p_left.par_rows_mut().enumerate().for_each(|(c, row)| {
        let (neighbors, first_edge) = graph.left_neighbors(c);
        for j in 0..neighbors.len() {
            let e = first_edge + j;
            for (kk, r) in row.iter_mut().enumerate() {
                *r += g_w[e * k + kk] * w[e * k + kk];
            }
        }
    });
    let mut p_right = Mat::zeros(graph.right_count(), k);
    p_right.par_rows_mut().enumerate().for_each(|(i, row)| {
        let (_, edges) = graph.right_neighbors(i);
        for &e in edges {
            for (kk, r) in row.iter_mut().enumerate() {
                *r += g_w[e * k + kk] * w[e * k + kk];
            }
        }
    });

    // ∂L/∂Ã: direct channel plus both degree channels
    let mut g_norm = vec![0.0; e_count * k];
    g_norm.par_chunks_mut(k).enumerate().for_each(|(e, row)| {
        let (l, r) = graph.edge_endpoints(e);
        for (kk, gv) in row.iter_mut().enumerate() {
            let dl = it.deg_left.get(l, kk);
            let dr = it.deg_right.get(r, kk);
            *gv = g_w[e * k + kk] / (dl * dr).sqrt()
                - p_left.get(l, kk) / (2.0 * dl)
                - p_right.get(r, kk) / (2.0 * dr);
        }
    });
    g_norm
}

/// Softmax backward per edge, accumulated into the raw-confidence gradient.
fn softmax_backward_into(conf_norm: &[f64], g_norm: &[f64], g_raw: &mut [f64], k: usize) {
    g_raw
        .par_chunks_mut(k)
        .zip(conf_norm.par_chunks(k))
        .zip(g_norm.par_chunks(k))
        .for_each(|((gr, a), gn)| {
            let inner: f64 = a.iter().zip(gn).map(|(x, y)| x * y).sum();
            for kk in 0..k {
                gr[kk] += a[kk] * (gn[kk] - inner);
            }
        });
}

/// Backward of `refresh_confidence`: the raw-confidence gradient flows into
/// the chunks that seeded the refresh and into the item embeddings.
fn refresh_backward(
    graph: &BipartiteGraph,
    g_raw: &[f64],
    prev_chunks: &Mat,
    items: &Mat,
    k: usize,
    grad_items: &mut Mat,
) -> Mat {
    let width = items.cols();
    let mut g_prev = Mat::zeros(prev_chunks.rows(), prev_chunks.cols());
    g_prev.par_rows_mut().enumerate().for_each(|(c, row)| {
        let (neighbors, first_edge) = graph.left_neighbors(c);
        for (j, &i) in neighbors.iter().enumerate() {
            let e = first_edge + j;
            let item_row = items.row(i);
            for kk in 0..k {
                axpy(&mut row[kk * width..(kk + 1) * width], g_raw[e * k + kk], item_row);
            }
        }
    });
    grad_items.par_rows_mut().enumerate().for_each(|(i, row)| {
        let (lefts, edges) = graph.right_neighbors(i);
        for (&l, &e) in lefts.iter().zip(edges) {
            for kk in 0..k {
                axpy(row, g_raw[e * k + kk], prev_chunks.row_chunk(l, kk, width));
            }
        }
    });
    g_prev
}

/// Backward through the full unrolled stack. Returns the gradient on the
/// initial chunks and accumulates the item-embedding gradient.
pub(crate) fn stack_backward(
    graph: &BipartiteGraph,
    trace: &StackTrace,
    items: &Mat,
    k: usize,
    g_out: &Mat,
    grad_items: &mut Mat,
) -> Mat {
    assert!(!trace.layers.is_empty(), "stack_backward needs a kept trace");
    let mut g_next_input: Option<Mat> = None;
    for layer in trace.layers.iter().rev() {
        // the layer output feeds both the stack sum and the next layer
        let mut g_chunks = g_out.clone();
        if let Some(g) = g_next_input.take() {
            g_chunks.add_assign(&g);
        }
        let mut g_raw = vec![0.0; graph.edge_count() * k];
        let t_iters = layer.iters.len();
        for t in (0..t_iters).rev() {
            let it = &layer.iters[t];
            let g_norm = aggregate_backward(graph, it, items, &g_chunks, k, grad_items);
            softmax_backward_into(&it.conf_norm, &g_norm, &mut g_raw, k);
            let prev = if t == 0 { &layer.input } else { &layer.iters[t - 1].chunks };
            g_chunks = refresh_backward(graph, &g_raw, prev, items, k, grad_items);
        }
        g_next_input = Some(g_chunks);
    }
    g_next_input.expect("layers >= 1")
}

/// Plain symmetric degree-normalized aggregation of item embeddings,
/// broadcast to all K chunks and combined over `layers` by the same layer
/// sum the disentangled stack uses. The substitute tower for the
/// no-global / no-local ablations.
pub fn plain_propagate(graph: &BipartiteGraph, items: &Mat, k: usize, layers: usize) -> Mat {
    let width = items.cols();
    let mut out = Mat::zeros(graph.left_count(), k * width);
    out.par_rows_mut().enumerate().for_each(|(c, row)| {
        let (neighbors, first_edge) = graph.left_neighbors(c);
        let _ = first_edge;
        let dc = neighbors.len() as f64;
        let mut agg = vec![0.0; width];
        for &i in neighbors {
            let di = graph.right_degree(i) as f64;
            axpy(&mut agg, layers as f64 / (dc * di).sqrt(), items.row(i));
        }
        for kk in 0..k {
            row[kk * width..(kk + 1) * width].copy_from_slice(&agg);
        }
    });
    out
}

/// Backward of [`plain_propagate`] into the item embeddings.
pub(crate) fn plain_backward(
    graph: &BipartiteGraph,
    g_out: &Mat,
    k: usize,
    layers: usize,
    width: usize,
    grad_items: &mut Mat,
) {
    grad_items.par_rows_mut().enumerate().for_each(|(i, row)| {
        let (lefts, _) = graph.right_neighbors(i);
        let di = graph.right_degree(i) as f64;
        for &c in lefts {
            let dc = graph.left_degree(c) as f64;
            let scale = layers as f64 / (dc * di).sqrt();
            for kk in 0..k {
                axpy(row, scale, g_out.row_chunk(c, kk, width));
            }
        }
    });
}

/// Write normalized confidences as `edge_id<TAB>left<TAB>right<TAB>k<TAB>weight`.
pub fn dump_confidence_tsv(
    graph: &BipartiteGraph,
    conf_norm: &IntentConfidence,
    out: &mut impl Write,
) -> Result<()> {
    for edge in graph.edges() {
        let row = conf_norm.edge_row(edge.edge_id);
        for (k, w) in row.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", edge.edge_id, edge.left, edge.right, k, w)?;
        }
    }
    Ok(())
}
