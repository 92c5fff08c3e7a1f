//! Synthetic bundle worlds with planted intents, plus an alignment score
//! between learned routing assignments and the planted edge labels. This is
//! the ground-truth probe for disentangling quality.

use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::data::{write_interactions, InteractionMatrix};
use crate::disentangle::IntentConfidence;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_bundles: usize,
    pub true_intents: usize,
    pub items_per_intent: usize,
    pub bundles_per_user: usize,
    pub intents_per_bundle: usize,
    pub items_per_bundle: usize,
    pub items_per_user: usize,
    pub noise_rate: f64,
    /// Dirichlet concentration of per-user intent preferences; smaller means
    /// users focus on fewer intents.
    pub preference_concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 800,
            n_bundles: 120,
            true_intents: 4,
            items_per_intent: 200,
            bundles_per_user: 6,
            intents_per_bundle: 2,
            items_per_bundle: 10,
            items_per_user: 30,
            noise_rate: 0.0,
            preference_concentration: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_bundles", self.n_bundles),
            ("true_intents", self.true_intents),
            ("items_per_intent", self.items_per_intent),
            ("bundles_per_user", self.bundles_per_user),
            ("intents_per_bundle", self.intents_per_bundle),
            ("items_per_bundle", self.items_per_bundle),
            ("items_per_user", self.items_per_user),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config("noise_rate must be in [0, 1)".into()));
        }
        if self.intents_per_bundle > self.true_intents {
            return Err(Error::Config(format!(
                "intents_per_bundle {} exceeds true_intents {}",
                self.intents_per_bundle, self.true_intents
            )));
        }
        if self.n_items != self.true_intents * self.items_per_intent {
            return Err(Error::Config(format!(
                "n_items must equal true_intents * items_per_intent = {}",
                self.true_intents * self.items_per_intent
            )));
        }
        if self.items_per_bundle < self.intents_per_bundle {
            return Err(Error::Config(
                "items_per_bundle must cover every sampled bundle intent".into(),
            ));
        }
        if self.items_per_bundle > self.intents_per_bundle * self.items_per_intent {
            return Err(Error::Config("items_per_bundle exceeds available cluster items".into()));
        }
        if self.bundles_per_user > self.n_bundles {
            return Err(Error::Config("bundles_per_user exceeds n_bundles".into()));
        }
        if self.items_per_user > self.n_items {
            return Err(Error::Config("items_per_user exceeds n_items".into()));
        }
        if !(self.preference_concentration > 0.0) {
            return Err(Error::Config("preference_concentration must be positive".into()));
        }
        Ok(())
    }
}

/// Planted labels: item clusters and the generating intent per non-noise edge.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub item_intent: Vec<usize>,
    /// (user, item, intent) for each non-noise user-item edge.
    pub ui_edges: Vec<(usize, usize, usize)>,
    /// (bundle, item, intent) for each non-noise bundle-item edge.
    pub bi_edges: Vec<(usize, usize, usize)>,
}

impl GroundTruth {
    pub fn ui_label_map(&self) -> HashMap<(usize, usize), usize> {
        self.ui_edges.iter().map(|&(u, i, k)| ((u, i), k)).collect()
    }

    pub fn bi_label_map(&self) -> HashMap<(usize, usize), usize> {
        self.bi_edges.iter().map(|&(b, i, k)| ((b, i), k)).collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Generated world: the three interaction matrices plus labels.
pub struct SyntheticDataset {
    pub y: InteractionMatrix,
    pub h: InteractionMatrix,
    pub r: InteractionMatrix,
    pub truth: GroundTruth,
}

impl SyntheticDataset {
    /// Emit the TSV files `load_interactions` consumes plus the label file.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_interactions(&self.y, dir.join("user_bundle.txt"))?;
        write_interactions(&self.h, dir.join("bundle_item.txt"))?;
        write_interactions(&self.r, dir.join("user_item.txt"))?;
        self.truth.save_json(dir.join("ground_truth.json"))?;
        Ok(())
    }
}

/// Generate a world: intent-clustered items, bundles mixing a few intents,
/// users with Dirichlet-style intent preferences, and optional uniform edge
/// rewiring noise. Deterministic for a fixed seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kt = cfg.true_intents;

    let item_intent: Vec<usize> = (0..cfg.n_items).map(|i| i / cfg.items_per_intent).collect();
    let cluster = |k: usize| (k * cfg.items_per_intent)..((k + 1) * cfg.items_per_intent);

    // user preference over intents: normalized Gamma draws (Dirichlet)
    let gamma = Gamma::new(cfg.preference_concentration, 1.0).expect("valid gamma");
    let user_pref: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| {
            let mut w: Vec<f64> = (0..kt).map(|_| gamma.sample(&mut rng) + 1e-12).collect();
            let s: f64 = w.iter().sum();
            for x in &mut w {
                *x /= s;
            }
            w
        })
        .collect();

    // bundles: sample intents, then round-robin items from those clusters
    let mut bundle_intents: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_bundles);
    let mut bi_pairs: Vec<(usize, usize)> = Vec::new();
    let mut bi_labels: Vec<(usize, usize, usize)> = Vec::new();
    for b in 0..cfg.n_bundles {
        let mut intents: Vec<usize> = (0..kt).collect();
        for j in 0..cfg.intents_per_bundle {
            let pick = rng.random_range(j..kt);
            intents.swap(j, pick);
        }
        intents.truncate(cfg.intents_per_bundle);
        intents.sort_unstable();

        let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(cfg.items_per_bundle);
        let mut seen = std::collections::HashSet::new();
        for j in 0..cfg.items_per_bundle {
            let intent = intents[j % intents.len()];
            let item = loop {
                let cand = rng.random_range(cluster(intent).start..cluster(intent).end);
                if seen.insert(cand) {
                    break cand;
                }
            };
            chosen.push((item, intent));
        }
        for (item, intent) in chosen {
            bi_pairs.push((b, item));
            bi_labels.push((b, item, intent));
        }
        bundle_intents.push(intents);
    }

    // bundle intent shares for affinity scoring
    let bundle_share: Vec<Vec<f64>> = (0..cfg.n_bundles)
        .map(|b| {
            let mut share = vec![0.0; kt];
            let labels: Vec<usize> = bi_labels
                .iter()
                .filter(|&&(bb, _, _)| bb == b)
                .map(|&(_, _, k)| k)
                .collect();
            for k in &labels {
                share[*k] += 1.0;
            }
            for s in &mut share {
                *s /= labels.len() as f64;
            }
            share
        })
        .collect();

    // user-bundle edges by intent affinity, sampled without replacement
    let mut y_pairs: Vec<(usize, usize)> = Vec::new();
    for u in 0..cfg.n_users {
        let mut weights: Vec<f64> = (0..cfg.n_bundles)
            .map(|b| {
                let affinity: f64 =
                    user_pref[u].iter().zip(&bundle_share[b]).map(|(p, s)| p * s).sum();
                affinity + 1e-9
            })
            .collect();
        for _ in 0..cfg.bundles_per_user {
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            let b = dist.sample(&mut rng);
            weights[b] = 0.0;
            y_pairs.push((u, b));
        }
    }

    // user-item edges from the user's intent distribution
    let mut r_pairs: Vec<(usize, usize)> = Vec::new();
    let mut ui_labels: Vec<(usize, usize, usize)> = Vec::new();
    for u in 0..cfg.n_users {
        let dist = WeightedIndex::new(&user_pref[u]).expect("positive preference");
        let mut seen = std::collections::HashSet::new();
        for _ in 0..cfg.items_per_user {
            let (item, intent) = loop {
                let intent = dist.sample(&mut rng);
                let cand = rng.random_range(cluster(intent).start..cluster(intent).end);
                if seen.insert(cand) {
                    break (cand, intent);
                }
            };
            r_pairs.push((u, item));
            ui_labels.push((u, item, intent));
        }
    }

    // uniform rewiring noise: a rewired edge loses its label
    let rewire = |pairs: &mut Vec<(usize, usize)>,
                      labels: Option<&mut Vec<(usize, usize, usize)>>,
                      n_cols: usize,
                      rng: &mut ChaCha8Rng| {
        if cfg.noise_rate == 0.0 {
            return;
        }
        let existing: std::collections::HashSet<(usize, usize)> = pairs.iter().cloned().collect();
        let mut dropped: Vec<(usize, usize)> = Vec::new();
        let mut new_set = existing.clone();
        for p in pairs.iter_mut() {
            if rng.random_bool(cfg.noise_rate) {
                let (row, old_col) = *p;
                let mut attempts = 0;
                let new_col = loop {
                    let cand = rng.random_range(0..n_cols);
                    if !new_set.contains(&(row, cand)) || attempts > 4 * n_cols {
                        break cand;
                    }
                    attempts += 1;
                };
                new_set.remove(&(row, old_col));
                new_set.insert((row, new_col));
                dropped.push((row, old_col));
                *p = (row, new_col);
            }
        }
        if let Some(labels) = labels {
            let dropped: std::collections::HashSet<(usize, usize)> = dropped.into_iter().collect();
            labels.retain(|&(r, c, _)| !dropped.contains(&(r, c)));
            // labels may also refer to edges that were overwritten as targets
            let kept: std::collections::HashSet<(usize, usize)> =
                pairs.iter().cloned().collect();
            labels.retain(|&(r, c, _)| kept.contains(&(r, c)));
        }
    };
    rewire(&mut y_pairs, None, cfg.n_bundles, &mut rng);
    rewire(&mut bi_pairs, Some(&mut bi_labels), cfg.n_items, &mut rng);
    rewire(&mut r_pairs, Some(&mut ui_labels), cfg.n_items, &mut rng);

    let y = InteractionMatrix::new(cfg.n_users, cfg.n_bundles, y_pairs)?;
    let h = InteractionMatrix::new(cfg.n_bundles, cfg.n_items, bi_pairs)?;
    let r = InteractionMatrix::new(cfg.n_users, cfg.n_items, r_pairs)?;
    // deduplicate labels the same way the matrices were deduplicated
    let mut bi_labels: Vec<(usize, usize, usize)> = bi_labels;
    bi_labels.sort_unstable();
    bi_labels.dedup_by_key(|&mut (b, i, _)| (b, i));
    let mut ui_labels: Vec<(usize, usize, usize)> = ui_labels;
    ui_labels.sort_unstable();
    ui_labels.dedup_by_key(|&mut (u, i, _)| (u, i));

    Ok(SyntheticDataset {
        y,
        h,
        r,
        truth: GroundTruth { item_intent, ui_edges: ui_labels, bi_edges: bi_labels },
    })
}

/// Exact maximum 1-to-1 assignment of model intents to true intents over a
/// co-occurrence matrix, via bitmask DP (Hungarian-equivalent at these
/// sizes). Returns the matched count.
fn best_assignment(co: &[Vec<usize>]) -> usize {
    let k_model = co.len();
    if k_model == 0 {
        return 0;
    }
    let k_true = co[0].len();
    assert!(k_true <= 20, "assignment DP limited to small intent counts");
    let full = 1usize << k_true;
    let mut dp = vec![0usize; full];
    for row in co.iter().take(k_model) {
        let mut next = dp.clone(); // skipping this model intent is allowed
        for (mask, &base) in dp.iter().enumerate() {
            for t in 0..k_true {
                if mask & (1 << t) == 0 {
                    let cand = base + row[t];
                    let m2 = mask | (1 << t);
                    if cand > next[m2] {
                        next[m2] = cand;
                    }
                }
            }
        }
        dp = next;
    }
    dp.into_iter().max().unwrap_or(0)
}

/// Fraction of labeled edges whose argmax routing intent maps, under the
/// best model-to-true intent assignment, to the planted label.
pub fn intent_alignment(
    graph: &BipartiteGraph,
    conf_norm: &IntentConfidence,
    edge_labels: &HashMap<(usize, usize), usize>,
    true_intents: usize,
) -> Result<f64> {
    if conf_norm.edge_count() == 0 {
        return Err(Error::Structural("empty confidence dump".into()));
    }
    if conf_norm.edge_count() != graph.edge_count() {
        return Err(Error::Structural(format!(
            "confidence covers {} edges, graph has {}",
            conf_norm.edge_count(),
            graph.edge_count()
        )));
    }
    let assignments = conf_norm.argmax_per_edge();
    let k_model = conf_norm.intents();
    let mut co = vec![vec![0usize; true_intents]; k_model];
    let mut labeled = 0usize;
    for edge in graph.edges() {
        if let Some(&label) = edge_labels.get(&(edge.left, edge.right)) {
            co[assignments[edge.edge_id]][label] += 1;
            labeled += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::Structural("no labeled edges overlap the graph".into()));
    }
    Ok(best_assignment(&co) as f64 / labeled as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disentangle::normalize_confidence;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_users: 20,
            n_items: 40,
            n_bundles: 10,
            true_intents: 4,
            items_per_intent: 10,
            bundles_per_user: 3,
            intents_per_bundle: 2,
            items_per_bundle: 6,
            items_per_user: 8,
            noise_rate: 0.0,
            preference_concentration: 0.15,
            seed: 9,
        }
    }

    #[test]
    fn validation_catches_infeasible_configs() {
        let mut cfg = small_cfg();
        cfg.intents_per_bundle = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.n_items = 39;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.noise_rate = 1.0;
        assert!(cfg.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn bundles_span_exactly_the_sampled_intents() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        let labels = data.truth.bi_label_map();
        for b in 0..10 {
            let mut intents: Vec<usize> = data
                .h
                .row(b)
                .map(|i| *labels.get(&(b, i)).expect("noise-free edges are labeled"))
                .collect();
            intents.sort_unstable();
            intents.dedup();
            assert_eq!(intents.len(), 2, "bundle {b} spans {intents:?}");
        }
    }

    #[test]
    fn single_intent_world_is_degenerate() {
        let cfg = SynthConfig {
            n_users: 5,
            n_items: 10,
            n_bundles: 4,
            true_intents: 1,
            items_per_intent: 10,
            bundles_per_user: 2,
            intents_per_bundle: 1,
            items_per_bundle: 4,
            items_per_user: 5,
            noise_rate: 0.0,
            preference_concentration: 0.15,
            seed: 3,
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert!(data.truth.item_intent.iter().all(|&k| k == 0));
        assert!(data.truth.ui_edges.iter().all(|&(_, _, k)| k == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.y.pairs(), b.y.pairs());
        assert_eq!(a.h.pairs(), b.h.pairs());
        assert_eq!(a.r.pairs(), b.r.pairs());
        assert_eq!(a.truth.ui_edges, b.truth.ui_edges);
    }

    #[test]
    fn labels_cover_all_edges_when_noise_free() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(data.truth.bi_edges.len(), data.h.len());
        assert_eq!(data.truth.ui_edges.len(), data.r.len());
        // labels agree with item clusters
        for &(_, i, k) in &data.truth.ui_edges {
            assert_eq!(data.truth.item_intent[i], k);
        }
    }

    #[test]
    fn noise_drops_labels_but_keeps_matrices_consistent() {
        let mut cfg = small_cfg();
        cfg.noise_rate = 0.3;
        let data = generate_synthetic(&cfg).unwrap();
        assert!(data.truth.ui_edges.len() < data.r.len());
        let labels = data.truth.ui_label_map();
        for (pair, _) in labels.iter().zip(0..) {
            assert!(data.r.contains(pair.0 .0, pair.0 .1));
        }
    }

    #[test]
    fn one_hot_confidences_align_perfectly() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        let g = BipartiteGraph::build(&data.r);
        let labels = data.truth.ui_label_map();
        let mut values = vec![0.0; g.edge_count() * 4];
        for edge in g.edges() {
            let k = labels[&(edge.left, edge.right)];
            values[edge.edge_id * 4 + k] = 1.0;
        }
        let conf = IntentConfidence::new(4, values);
        let score = intent_alignment(&g, &conf, &labels, 4).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn uniform_confidences_score_near_chance() {
        // balanced labels over 4 intents: best single-class assignment ≈ 1/4
        let cfg = SynthConfig { n_users: 60, items_per_user: 20, ..small_cfg() };
        let data = generate_synthetic(&cfg).unwrap();
        let g = BipartiteGraph::build(&data.r);
        let labels = data.truth.ui_label_map();
        let conf = normalize_confidence(&crate::disentangle::init_confidence(&g, 4));
        let score = intent_alignment(&g, &conf, &labels, 4).unwrap();
        assert!(score < 0.45, "uniform confidence scored {score}");
        assert!(score > 0.1);
    }

    #[test]
    fn alignment_invariant_to_model_intent_permutation() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        let g = BipartiteGraph::build(&data.r);
        let labels = data.truth.ui_label_map();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..g.edge_count() * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let conf = IntentConfidence::new(4, values.clone());
        let base = intent_alignment(&g, &conf, &labels, 4).unwrap();
        // permute model intents (0123 -> 2301)
        let perm = [2usize, 3, 0, 1];
        let mut permuted = vec![0.0; values.len()];
        for e in 0..g.edge_count() {
            for k in 0..4 {
                permuted[e * 4 + perm[k]] = values[e * 4 + k];
            }
        }
        let conf_p = IntentConfidence::new(4, permuted);
        let score = intent_alignment(&g, &conf_p, &labels, 4).unwrap();
        assert_eq!(base, score);
    }

    #[test]
    fn empty_dump_is_an_error() {
        let empty = BipartiteGraph::build(&InteractionMatrix::new(2, 2, vec![]).unwrap());
        let conf = IntentConfidence::new(4, vec![]);
        assert!(intent_alignment(&empty, &conf, &HashMap::new(), 4).is_err());
    }

    #[test]
    fn assignment_dp_is_exact_on_a_hand_case() {
        // greedy would pick (0→0)=5 then (1→1)=1: total 6; optimum is 4+4=8
        let co = vec![vec![5, 4], vec![4, 1]];
        assert_eq!(best_assignment(&co), 8);
    }

    #[test]
    fn files_roundtrip_through_data_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small_cfg()).unwrap();
        data.write_to(dir.path()).unwrap();
        let y = crate::data::load_interactions(dir.path().join("user_bundle.txt"), Some(20), Some(10)).unwrap();
        assert_eq!(y.pairs(), data.y.pairs());
        let truth: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap())
                .unwrap();
        assert_eq!(truth.ui_edges, data.truth.ui_edges);
    }
}
