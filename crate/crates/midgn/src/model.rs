//! The full model: disentangled towers over the user-item (global view) and
//! bundle-item (local view) graphs, cross-view propagation over train
//! user-bundle edges, inner-product prediction over concatenated views, BPR
//! and InfoNCE objectives, and the alternating training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::accumulate_info_nce;
use crate::crossview::{cross_backward, cross_propagate};
use crate::data::{mix_seed, sample_triples, InteractionMatrix, SplitDataset, TrainingTriple};
use crate::disentangle::{
    plain_backward, plain_propagate, stack_backward, stack_forward, IntentConfidence, StackTrace,
};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::mat::{axpy, dot, Mat};
use crate::params::{
    adam_step, init_parameters, GradientBuffer, InitScheme, OptimizerConfig, ParameterStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// BPR step then contrast step on every mini-batch.
    #[default]
    PerBatch,
    /// All BPR batches first, then all contrast batches.
    PerEpoch,
}

/// Every switch of the model and its training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub intents: usize,
    pub layers: usize,
    pub routing_iters: usize,
    pub temperature: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub no_contrast: bool,
    pub no_local: bool,
    pub no_global: bool,
    /// Mirrored InfoNCE direction (anchor in the cross view).
    pub symmetric_contrast: bool,
    /// Run the contrast step every this many batches.
    pub contrast_every: usize,
    pub alternation: Alternation,
    pub init_scheme: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 64,
            intents: 4,
            layers: 3,
            routing_iters: 2,
            temperature: 1.0,
            optimizer: OptimizerConfig::default(),
            batch_size: 4096,
            epochs: 150,
            seed: 0,
            no_contrast: false,
            no_local: false,
            no_global: false,
            symmetric_contrast: false,
            contrast_every: 1,
            alternation: Alternation::PerBatch,
            init_scheme: InitScheme::XavierUniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intents == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim and intents must be positive".into()));
        }
        if self.embedding_dim % self.intents != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by intents {}",
                self.embedding_dim, self.intents
            )));
        }
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.routing_iters < 1 {
            return Err(Error::Config("routing_iters must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.contrast_every < 1 {
            return Err(Error::Config("contrast_every must be >= 1".into()));
        }
        if self.no_local && self.no_global && self.intents > 1 {
            return Err(Error::Config(
                "ablating both views with more than one intent leaves nothing to disentangle; \
                 set intents to 1 or keep one view"
                    .into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// The three graphs the forward pass runs over. Disentangling towers use the
/// full side-information matrices; cross-view uses train edges only.
pub struct ModelGraphs {
    pub ui: BipartiteGraph,
    pub bi: BipartiteGraph,
    pub ub_train: BipartiteGraph,
}

impl ModelGraphs {
    pub fn build(split: &SplitDataset, h: &InteractionMatrix, r: &InteractionMatrix) -> Result<Self> {
        if split.train.n_cols() != h.n_rows() {
            return Err(Error::Structural(format!(
                "bundle count disagrees: user-bundle has {}, bundle-item has {}",
                split.train.n_cols(),
                h.n_rows()
            )));
        }
        if split.train.n_rows() != r.n_rows() {
            return Err(Error::Structural(format!(
                "user count disagrees: user-bundle has {}, user-item has {}",
                split.train.n_rows(),
                r.n_rows()
            )));
        }
        if h.n_cols() != r.n_cols() {
            return Err(Error::Structural(format!(
                "item count disagrees: bundle-item has {}, user-item has {}",
                h.n_cols(),
                r.n_cols()
            )));
        }
        Ok(ModelGraphs {
            ui: BipartiteGraph::build(r),
            bi: BipartiteGraph::build(h),
            ub_train: BipartiteGraph::build(&split.train),
        })
    }

    pub fn n_users(&self) -> usize {
        self.ui.left_count()
    }

    pub fn n_bundles(&self) -> usize {
        self.bi.left_count()
    }

    pub fn n_items(&self) -> usize {
        self.ui.right_count()
    }
}

enum TowerTrace {
    Disentangled(StackTrace),
    Plain,
}

/// Final representations of both views plus whatever the backward pass needs.
pub struct ForwardOutputs {
    pub e_u: Mat,
    pub v_u: Mat,
    pub e_b: Mat,
    pub v_b: Mat,
    user_tower: TowerTrace,
    bundle_tower: TowerTrace,
    user_conf: Option<Vec<Vec<f64>>>,
    bundle_conf: Option<Vec<Vec<f64>>>,
    intents: usize,
}

impl ForwardOutputs {
    /// Normalized routing confidences of the last global-view layer, if the
    /// global tower is disentangled.
    pub fn user_confidence(&self) -> Option<IntentConfidence> {
        self.user_conf
            .as_ref()
            .and_then(|v| v.last())
            .map(|v| IntentConfidence::new(self.intents, v.clone()))
    }

    /// Same for the local view.
    pub fn bundle_confidence(&self) -> Option<IntentConfidence> {
        self.bundle_conf
            .as_ref()
            .and_then(|v| v.last())
            .map(|v| IntentConfidence::new(self.intents, v.clone()))
    }

    /// Per-layer normalized confidences of the global view, outermost layer
    /// last.
    pub fn user_confidence_layers(&self) -> Option<Vec<IntentConfidence>> {
        self.user_conf.as_ref().map(|layers| {
            layers.iter().map(|v| IntentConfidence::new(self.intents, v.clone())).collect()
        })
    }

    pub fn bundle_confidence_layers(&self) -> Option<Vec<IntentConfidence>> {
        self.bundle_conf.as_ref().map(|layers| {
            layers.iter().map(|v| IntentConfidence::new(self.intents, v.clone())).collect()
        })
    }
}

fn tower_forward(
    graph: &BipartiteGraph,
    init: &Mat,
    items: &Mat,
    cfg: &ModelConfig,
    plain: bool,
    keep_trace: bool,
) -> (Mat, TowerTrace, Option<Vec<Vec<f64>>>) {
    if plain {
        let out = plain_propagate(graph, items, cfg.intents, cfg.layers);
        (out, TowerTrace::Plain, None)
    } else {
        let trace = stack_forward(
            graph,
            init,
            items,
            cfg.intents,
            cfg.layers,
            cfg.routing_iters,
            keep_trace,
        );
        let conf = Some(trace.final_conf_norm.clone());
        let output = trace.output.clone();
        (output, TowerTrace::Disentangled(trace), conf)
    }
}

/// Run the full forward pass. `keep_trace` retains routing intermediates so
/// [`backward`] can run; evaluation passes drop them.
pub fn full_forward(
    store: &ParameterStore,
    graphs: &ModelGraphs,
    cfg: &ModelConfig,
    keep_trace: bool,
) -> ForwardOutputs {
    assert_eq!(graphs.n_users(), store.n_users());
    assert_eq!(graphs.n_bundles(), store.n_bundles());
    assert_eq!(graphs.n_items(), store.n_items());

    let (e_u, user_tower, user_conf) =
        tower_forward(&graphs.ui, &store.user, &store.item, cfg, cfg.no_global, keep_trace);
    let (e_b, bundle_tower, bundle_conf) =
        tower_forward(&graphs.bi, &store.bundle, &store.item, cfg, cfg.no_local, keep_trace);
    let cross = cross_propagate(&graphs.ub_train, &e_u, &e_b);

    ForwardOutputs {
        e_u,
        v_u: cross.v_u,
        e_b,
        v_b: cross.v_b,
        user_tower,
        bundle_tower,
        user_conf,
        bundle_conf,
        intents: cfg.intents,
    }
}

/// ŷ_ub for one pair: dot product of the concatenated two-view vectors,
/// which reduces to e_u·e_b + v_u·v_b.
#[inline]
pub fn score_pair(out: &ForwardOutputs, user: usize, bundle: usize) -> f64 {
    dot(out.e_u.row(user), out.e_b.row(bundle)) + dot(out.v_u.row(user), out.v_b.row(bundle))
}

pub fn score_pairs(out: &ForwardOutputs, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for &(u, b) in pairs {
        if u >= out.e_u.rows() {
            return Err(Error::Bounds { entity: "user", id: u, limit: out.e_u.rows() });
        }
        if b >= out.e_b.rows() {
            return Err(Error::Bounds { entity: "bundle", id: b, limit: out.e_b.rows() });
        }
        scores.push(score_pair(out, u, b));
    }
    Ok(scores)
}

/// Scores for every bundle with the user's train bundles masked to −∞.
pub fn predict_all(out: &ForwardOutputs, user: usize, train: &InteractionMatrix) -> Vec<f64> {
    let mut scores: Vec<f64> =
        (0..out.e_b.rows()).map(|b| score_pair(out, user, b)).collect();
    for b in train.row(user) {
        scores[b] = f64::NEG_INFINITY;
    }
    scores
}

/// Gradients with respect to the four forward outputs.
pub struct OutputGrads {
    pub e_u: Mat,
    pub v_u: Mat,
    pub e_b: Mat,
    pub v_b: Mat,
}

impl OutputGrads {
    pub fn zeros_like(out: &ForwardOutputs) -> Self {
        OutputGrads {
            e_u: Mat::zeros(out.e_u.rows(), out.e_u.cols()),
            v_u: Mat::zeros(out.v_u.rows(), out.v_u.cols()),
            e_b: Mat::zeros(out.e_b.rows(), out.e_b.cols()),
            v_b: Mat::zeros(out.v_b.rows(), out.v_b.cols()),
        }
    }
}

fn stable_softplus_neg(x: f64) -> f64 {
    // −ln σ(x) = softplus(−x)
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn stable_sigmoid_neg(x: f64) -> f64 {
    // σ(−x)
    if x >= 0.0 {
        let t = (-x).exp();
        t / (1.0 + t)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Pairwise ranking loss Σ softplus(−(ŷ_ub − ŷ_ud)) plus L2 over the
/// distinct user and bundle embedding rows the batch touches. Returns the
/// loss, gradients on the forward outputs, and the direct L2 parameter
/// gradients accumulated into `l2_grads`.
pub fn bpr_loss(
    out: &ForwardOutputs,
    triples: &[TrainingTriple],
    store: &ParameterStore,
    lambda: f64,
    l2_grads: &mut GradientBuffer,
) -> (f64, OutputGrads) {
    let mut loss = 0.0;
    let mut grads = OutputGrads::zeros_like(out);
    for t in triples {
        let (u, b, d) = (t.user, t.pos_bundle, t.neg_bundle);
        let x = score_pair(out, u, b) - score_pair(out, u, d);
        loss += stable_softplus_neg(x);
        let s = stable_sigmoid_neg(x); // = −∂loss/∂x

        // ∂x/∂e_u = e_b − e_d, etc.
        let ge_u = grads.e_u.row_mut(u);
        axpy(ge_u, -s, out.e_b.row(b));
        axpy(ge_u, s, out.e_b.row(d));
        let gv_u = grads.v_u.row_mut(u);
        axpy(gv_u, -s, out.v_b.row(b));
        axpy(gv_u, s, out.v_b.row(d));
        axpy(grads.e_b.row_mut(b), -s, out.e_u.row(u));
        axpy(grads.e_b.row_mut(d), s, out.e_u.row(u));
        axpy(grads.v_b.row_mut(b), -s, out.v_u.row(u));
        axpy(grads.v_b.row_mut(d), s, out.v_u.row(u));
    }

    if lambda > 0.0 {
        let mut users: Vec<usize> = triples.iter().map(|t| t.user).collect();
        users.sort_unstable();
        users.dedup();
        let mut bundles: Vec<usize> =
            triples.iter().flat_map(|t| [t.pos_bundle, t.neg_bundle]).collect();
        bundles.sort_unstable();
        bundles.dedup();
        for u in users {
            let row = store.user.row(u);
            loss += lambda * dot(row, row);
            axpy(l2_grads.user.row_mut(u), 2.0 * lambda, row);
        }
        for b in bundles {
            let row = store.bundle.row(b);
            loss += lambda * dot(row, row);
            axpy(l2_grads.bundle.row_mut(b), 2.0 * lambda, row);
        }
    }

    (loss, grads)
}

/// Joint chunk-alignment objective over the batch's users and bundles: one
/// mean over every (entity, intent) InfoNCE term, with gradients on the
/// four forward outputs.
pub fn contrast_objective(
    out: &ForwardOutputs,
    users: &[usize],
    bundles: &[usize],
    cfg: &ModelConfig,
) -> (f64, OutputGrads) {
    let mut ograds = OutputGrads::zeros_like(out);
    let (sum_u, cnt_u) = accumulate_info_nce(
        &out.e_u,
        &out.v_u,
        users,
        cfg.intents,
        cfg.temperature,
        cfg.symmetric_contrast,
        &mut ograds.e_u,
        &mut ograds.v_u,
    );
    let (sum_b, cnt_b) = accumulate_info_nce(
        &out.e_b,
        &out.v_b,
        bundles,
        cfg.intents,
        cfg.temperature,
        cfg.symmetric_contrast,
        &mut ograds.e_b,
        &mut ograds.v_b,
    );
    let count = cnt_u + cnt_b;
    if count == 0 {
        return (0.0, ograds);
    }
    let scale = 1.0 / count as f64;
    ograds.e_u.scale(scale);
    ograds.v_u.scale(scale);
    ograds.e_b.scale(scale);
    ograds.v_b.scale(scale);
    ((sum_u + sum_b) * scale, ograds)
}

/// Backpropagate output gradients through cross-view and both towers,
/// accumulating parameter gradients.
pub fn backward(
    graphs: &ModelGraphs,
    cfg: &ModelConfig,
    out: &ForwardOutputs,
    ograds: &OutputGrads,
    store: &ParameterStore,
    buf: &mut GradientBuffer,
) {
    let (g_e_u_cross, g_e_b_cross) = cross_backward(&graphs.ub_train, &ograds.v_u, &ograds.v_b);
    let mut g_e_u = ograds.e_u.clone();
    g_e_u.add_assign(&g_e_u_cross);
    let mut g_e_b = ograds.e_b.clone();
    g_e_b.add_assign(&g_e_b_cross);

    let width = store.chunk_width();
    match &out.user_tower {
        TowerTrace::Disentangled(trace) => {
            let g_init =
                stack_backward(&graphs.ui, trace, &store.item, cfg.intents, &g_e_u, &mut buf.item);
            buf.user.add_assign(&g_init);
        }
        TowerTrace::Plain => {
            plain_backward(&graphs.ui, &g_e_u, cfg.intents, cfg.layers, width, &mut buf.item);
        }
    }
    match &out.bundle_tower {
        TowerTrace::Disentangled(trace) => {
            let g_init =
                stack_backward(&graphs.bi, trace, &store.item, cfg.intents, &g_e_b, &mut buf.item);
            buf.bundle.add_assign(&g_init);
        }
        TowerTrace::Plain => {
            plain_backward(&graphs.bi, &g_e_b, cfg.intents, cfg.layers, width, &mut buf.item);
        }
    }
}

pub fn batches_per_epoch(n_triples: usize, batch_size: usize) -> usize {
    n_triples.div_ceil(batch_size)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-triple BPR loss over the epoch.
    pub bpr_loss: f64,
    /// Mean per-term contrast loss over the contrast steps (0 when skipped).
    pub contrast_loss: f64,
    pub bpr_batches: usize,
    pub contrast_batches: usize,
    pub wall_time_s: f64,
}

/// Offending-batch diagnostics captured when a loss goes non-finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortInfo {
    pub epoch: usize,
    pub batch: usize,
    pub phase: String,
    pub triples: Vec<(usize, usize, usize)>,
}

/// Owns the parameters and drives alternating optimization.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub graphs: ModelGraphs,
    pub split: SplitDataset,
    abort: Option<AbortInfo>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, split: SplitDataset, h: &InteractionMatrix, r: &InteractionMatrix) -> Result<Self> {
        cfg.validate()?;
        let graphs = ModelGraphs::build(&split, h, r)?;
        let store = init_parameters(
            graphs.n_users(),
            graphs.n_bundles(),
            graphs.n_items(),
            cfg.embedding_dim,
            cfg.intents,
            cfg.seed,
            cfg.init_scheme,
        )?;
        Ok(Trainer { cfg, store, graphs, split, abort: None })
    }

    /// Resume or evaluate from an existing parameter store.
    pub fn with_store(
        cfg: ModelConfig,
        split: SplitDataset,
        h: &InteractionMatrix,
        r: &InteractionMatrix,
        store: ParameterStore,
    ) -> Result<Self> {
        cfg.validate()?;
        let graphs = ModelGraphs::build(&split, h, r)?;
        if store.n_users() != graphs.n_users()
            || store.n_bundles() != graphs.n_bundles()
            || store.n_items() != graphs.n_items()
            || store.embedding_dim() != cfg.embedding_dim
            || store.intents() != cfg.intents
        {
            return Err(Error::Structural("parameter store does not match dataset/config".into()));
        }
        Ok(Trainer { cfg, store, graphs, split, abort: None })
    }

    pub fn take_abort(&mut self) -> Option<AbortInfo> {
        self.abort.take()
    }

    /// Forward pass without training traces, for evaluation.
    pub fn infer(&self) -> ForwardOutputs {
        full_forward(&self.store, &self.graphs, &self.cfg, false)
    }

    fn bpr_step(&mut self, batch: &[TrainingTriple], epoch: usize, batch_idx: usize) -> Result<f64> {
        let out = full_forward(&self.store, &self.graphs, &self.cfg, true);
        let mut buf = GradientBuffer::zeros_like(&self.store);
        let (loss, ograds) =
            bpr_loss(&out, batch, &self.store, self.cfg.optimizer.lambda, &mut buf);
        self.abort_on_non_finite(loss, epoch, batch_idx, "bpr", batch)?;
        backward(&self.graphs, &self.cfg, &out, &ograds, &self.store, &mut buf);
        adam_step(&mut self.store, &buf, &self.cfg.optimizer)?;
        Ok(loss)
    }

    fn contrast_step(&mut self, batch: &[TrainingTriple], epoch: usize, batch_idx: usize) -> Result<f64> {
        let mut users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        users.sort_unstable();
        users.dedup();
        let mut bundles: Vec<usize> =
            batch.iter().flat_map(|t| [t.pos_bundle, t.neg_bundle]).collect();
        bundles.sort_unstable();
        bundles.dedup();

        let out = full_forward(&self.store, &self.graphs, &self.cfg, true);
        let (loss, ograds) = contrast_objective(&out, &users, &bundles, &self.cfg);
        self.abort_on_non_finite(loss, epoch, batch_idx, "contrast", batch)?;

        let mut buf = GradientBuffer::zeros_like(&self.store);
        backward(&self.graphs, &self.cfg, &out, &ograds, &self.store, &mut buf);
        adam_step(&mut self.store, &buf, &self.cfg.optimizer)?;
        Ok(loss)
    }

    fn abort_on_non_finite(
        &mut self,
        loss: f64,
        epoch: usize,
        batch_idx: usize,
        phase: &str,
        batch: &[TrainingTriple],
    ) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        self.abort = Some(AbortInfo {
            epoch,
            batch: batch_idx,
            phase: phase.to_string(),
            triples: batch.iter().map(|t| (t.user, t.pos_bundle, t.neg_bundle)).collect(),
        });
        Err(Error::TrainingAborted {
            epoch,
            batch: batch_idx,
            msg: format!("{phase} loss is not finite ({loss})"),
        })
    }

    /// One epoch of alternating optimization over freshly sampled triples.
    pub fn train_epoch(&mut self, epoch_index: usize) -> Result<EpochMetrics> {
        let started = Instant::now();
        let triple_seed = mix_seed(self.cfg.seed, 0x7121_0000 + epoch_index as u64);
        let mut triples = sample_triples(&self.split, triple_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0x5472_0000 + epoch_index as u64));
        triples.shuffle(&mut rng);

        let mut bpr_total = 0.0;
        let mut bpr_count = 0usize;
        let mut contrast_total = 0.0;
        let mut contrast_batches = 0usize;
        let mut bpr_batches = 0usize;

        let batch_size = self.cfg.batch_size;
        let n_batches = batches_per_epoch(triples.len(), batch_size);

        let run_contrast = |cfg: &ModelConfig, idx: usize| -> bool {
            !cfg.no_contrast && idx % cfg.contrast_every == 0
        };

        match self.cfg.alternation {
            Alternation::PerBatch => {
                for (idx, batch) in triples.chunks(batch_size).enumerate() {
                    let loss = self.bpr_step(batch, epoch_index, idx)?;
                    bpr_total += loss;
                    bpr_count += batch.len();
                    bpr_batches += 1;
                    if run_contrast(&self.cfg, idx) {
                        let closs = self.contrast_step(batch, epoch_index, idx)?;
                        contrast_total += closs;
                        contrast_batches += 1;
                    }
                }
            }
            Alternation::PerEpoch => {
                for (idx, batch) in triples.chunks(batch_size).enumerate() {
                    let loss = self.bpr_step(batch, epoch_index, idx)?;
                    bpr_total += loss;
                    bpr_count += batch.len();
                    bpr_batches += 1;
                }
                for (idx, batch) in triples.chunks(batch_size).enumerate() {
                    if run_contrast(&self.cfg, idx) {
                        let closs = self.contrast_step(batch, epoch_index, idx)?;
                        contrast_total += closs;
                        contrast_batches += 1;
                    }
                }
            }
        }
        debug_assert_eq!(bpr_batches, n_batches);

        Ok(EpochMetrics {
            epoch: epoch_index,
            bpr_loss: if bpr_count > 0 { bpr_total / bpr_count as f64 } else { 0.0 },
            contrast_loss: if contrast_batches > 0 {
                contrast_total / contrast_batches as f64
            } else {
                0.0
            },
            bpr_batches,
            contrast_batches,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

/// Knobs for [`run_training`]; artifact writing happens only when `out_dir`
/// is set.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Write a periodic checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Stop after this many evaluations without a new best (0 = off).
    pub patience: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            out_dir: None,
            eval_every: 5,
            checkpoint_every: 0,
            patience: 6,
            eval_ks: vec![20, 40, 80],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr_loss: f64,
    pub contrast_loss: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_recall20: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_recall20: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Snapshot at the best validation Recall@20, when evaluation ran.
    pub best_store: Option<ParameterStore>,
}

/// Drive `cfg.epochs` epochs with validation-based early stopping,
/// line-JSON logging and checkpointing.
pub fn run_training(trainer: &mut Trainer, opts: &TrainOptions) -> Result<TrainOutcome> {
    use std::io::Write;

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut best_store: Option<ParameterStore> = None;
    let mut evals_since_best = 0usize;

    for epoch in 1..=trainer.cfg.epochs {
        let metrics = match trainer.train_epoch(epoch) {
            Ok(m) => m,
            Err(err) => {
                if let (Some(dir), Some(abort)) = (&opts.out_dir, trainer.take_abort()) {
                    let _ = crate::params::save_checkpoint(
                        &trainer.store,
                        trainer.cfg.seed,
                        dir.join("checkpoint_abort.bin"),
                    );
                    let _ = std::fs::write(
                        dir.join("abort_batch.json"),
                        serde_json::to_string_pretty(&abort)?,
                    );
                }
                return Err(err);
            }
        };

        let mut record = EpochRecord {
            epoch,
            bpr_loss: metrics.bpr_loss,
            contrast_loss: metrics.contrast_loss,
            wall_time_s: metrics.wall_time_s,
            val_recall20: None,
        };

        let evaluate_now = opts.eval_every > 0
            && (epoch % opts.eval_every == 0 || epoch == trainer.cfg.epochs)
            && !trainer.split.val.is_empty();
        if evaluate_now {
            let out = trainer.infer();
            let report = crate::eval::evaluate_split(
                &out,
                &trainer.split.train,
                &trainer.split.val,
                &opts.eval_ks,
            );
            let recall20 = report.recall.get(&20).copied().unwrap_or(0.0);
            record.val_recall20 = Some(recall20);
            let improved = best.map(|(b, _)| recall20 > b).unwrap_or(true);
            if improved {
                best = Some((recall20, epoch));
                best_store = Some(trainer.store.clone());
                evals_since_best = 0;
                if let Some(dir) = &opts.out_dir {
                    crate::params::save_checkpoint(
                        &trainer.store,
                        trainer.cfg.seed,
                        dir.join("checkpoint_best.bin"),
                    )?;
                }
            } else {
                evals_since_best += 1;
            }
        }

        log::info!(
            "epoch {epoch}: bpr {:.5}, contrast {:.5}, {:.1}s{}",
            record.bpr_loss,
            record.contrast_loss,
            record.wall_time_s,
            record
                .val_recall20
                .map(|r| format!(", val recall@20 {r:.4}"))
                .unwrap_or_default()
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        history.push(record);

        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0 {
                crate::params::save_checkpoint(
                    &trainer.store,
                    trainer.cfg.seed,
                    dir.join(format!("checkpoint_epoch{epoch}.bin")),
                )?;
            }
        }

        if opts.patience > 0 && evals_since_best >= opts.patience {
            log::info!("early stop at epoch {epoch} (no improvement for {} evals)", opts.patience);
            break;
        }
    }

    if let Some(dir) = &opts.out_dir {
        crate::params::save_checkpoint(&trainer.store, trainer.cfg.seed, dir.join("checkpoint_final.bin"))?;
    }

    Ok(TrainOutcome {
        history,
        best_val_recall20: best.map(|(r, _)| r),
        best_epoch: best.map(|(_, e)| e),
        best_store,
    })
}
