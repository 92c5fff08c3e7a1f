//! Interaction-file loading, train/val/test splitting, BPR triple sampling
//! and dataset-statistics validation.
//!
//! Files are tab-separated 0-based id pairs, one interaction per line, the
//! format common recommendation datasets ship in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse binary relation between two entity sets. Pairs are kept sorted
/// lexicographically and duplicate-free; presence means 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    n_rows: usize,
    n_cols: usize,
    pairs: Vec<(usize, usize)>,
    row_offsets: Vec<usize>,
}

impl InteractionMatrix {
    pub fn new(n_rows: usize, n_cols: usize, mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_unstable();
        pairs.dedup();
        for &(r, c) in &pairs {
            if r >= n_rows {
                return Err(Error::Bounds { entity: "row", id: r, limit: n_rows });
            }
            if c >= n_cols {
                return Err(Error::Bounds { entity: "col", id: c, limit: n_cols });
            }
        }
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &(r, _) in &pairs {
            row_offsets[r + 1] += 1;
        }
        for i in 1..row_offsets.len() {
            row_offsets[i] += row_offsets[i - 1];
        }
        Ok(InteractionMatrix { n_rows, n_cols, pairs, row_offsets })
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All pairs in canonical lexicographic order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Sorted column ids of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs[self.row_offsets[r]..self.row_offsets[r + 1]]
            .iter()
            .map(|&(_, c)| c)
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.pairs[self.row_offsets[r]..self.row_offsets[r + 1]]
            .binary_search_by_key(&c, |&(_, c)| c)
            .is_ok()
    }

    pub fn density(&self) -> f64 {
        if self.n_rows == 0 || self.n_cols == 0 {
            return 0.0;
        }
        self.pairs.len() as f64 / (self.n_rows as f64 * self.n_cols as f64)
    }
}

/// Parse a `row<TAB>col` file into a matrix. Dimensions default to
/// `max_id + 1` per axis unless expected counts are given; duplicate lines
/// are dropped with a logged count.
pub fn load_interactions(
    path: impl AsRef<Path>,
    expected_rows: Option<usize>,
    expected_cols: Option<usize>,
) -> Result<InteractionMatrix> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let parse = |field: Option<&str>, what: &str| -> Result<usize> {
            field
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("missing {what}"),
                })?
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("bad {what}: {e}"),
                })
        };
        let row = parse(fields.next(), "row id")?;
        let col = parse(fields.next(), "col id")?;
        if let Some(extra) = fields.next() {
            if !extra.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("unexpected trailing field {extra:?}"),
                });
            }
        }
        if let Some(limit) = expected_rows {
            if row >= limit {
                return Err(Error::Bounds { entity: "row", id: row, limit });
            }
        }
        if let Some(limit) = expected_cols {
            if col >= limit {
                return Err(Error::Bounds { entity: "col", id: col, limit });
            }
        }
        pairs.push((row, col));
    }

    let n_rows = expected_rows.unwrap_or_else(|| pairs.iter().map(|&(r, _)| r + 1).max().unwrap_or(0));
    let n_cols = expected_cols.unwrap_or_else(|| pairs.iter().map(|&(_, c)| c + 1).max().unwrap_or(0));

    let before = pairs.len();
    let matrix = InteractionMatrix::new(n_rows, n_cols, pairs)?;
    let dropped = before - matrix.len();
    if dropped > 0 {
        log::info!("{}: dropped {dropped} duplicate pair(s)", path.display());
    }
    Ok(matrix)
}

/// Write a matrix in the same TSV format `load_interactions` reads.
pub fn write_interactions(matrix: &InteractionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for &(r, c) in matrix.pairs() {
        writeln!(out, "{r}\t{c}")?;
    }
    out.flush()?;
    Ok(())
}

/// Three disjoint matrices over the same axes whose union is the source.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionMatrix,
    pub val: InteractionMatrix,
    pub test: InteractionMatrix,
    pub seed: u64,
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step keyed by the stream index
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-user random partition by the given (train, val, test) fractions.
/// Rounding remainders go to train, and a user whose train share would be
/// empty keeps every pair in train.
pub fn split_interactions(
    matrix: &InteractionMatrix,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for user in 0..matrix.n_rows() {
        let mut cols: Vec<usize> = matrix.row(user).collect();
        if cols.is_empty() {
            continue;
        }
        let n = cols.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, user as u64));
        cols.shuffle(&mut rng);
        let n_val = (n as f64 * va).floor() as usize;
        let n_test = (n as f64 * te).floor() as usize;
        let mut n_train = n - n_val - n_test;
        let (n_val, n_test) = if n_train == 0 {
            n_train = n;
            (0, 0)
        } else {
            (n_val, n_test)
        };
        for (i, &c) in cols.iter().enumerate() {
            if i < n_train {
                train.push((user, c));
            } else if i < n_train + n_val {
                val.push((user, c));
            } else {
                let _ = n_test;
                test.push((user, c));
            }
        }
    }

    Ok(SplitDataset {
        train: InteractionMatrix::new(matrix.n_rows(), matrix.n_cols(), train)?,
        val: InteractionMatrix::new(matrix.n_rows(), matrix.n_cols(), val)?,
        test: InteractionMatrix::new(matrix.n_rows(), matrix.n_cols(), test)?,
        seed,
    })
}

/// One BPR training example: an observed pair and a sampled non-interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: usize,
    pub pos_bundle: usize,
    pub neg_bundle: usize,
}

/// One triple per train pair, negatives rejection-sampled uniformly from the
/// bundles the user never interacted with anywhere in the split.
pub fn sample_triples(split: &SplitDataset, rng_seed: u64) -> Vec<TrainingTriple> {
    let n_cols = split.train.n_cols();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut triples = Vec::with_capacity(split.train.len());
    let mut full: Vec<usize> = Vec::new();
    for user in 0..split.train.n_rows() {
        if split.train.row_len(user) == 0 {
            continue;
        }
        full.clear();
        full.extend(split.train.row(user));
        full.extend(split.val.row(user));
        full.extend(split.test.row(user));
        full.sort_unstable();
        if full.len() == n_cols {
            log::warn!("user {user} interacted with every bundle; skipped in sampling");
            continue;
        }
        for pos in split.train.row(user) {
            let neg = loop {
                let cand = rng.random_range(0..n_cols);
                if full.binary_search(&cand).is_err() {
                    break cand;
                }
            };
            triples.push(TrainingTriple { user, pos_bundle: pos, neg_bundle: neg });
        }
    }
    triples
}

/// Published reference statistics for the two benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedStats {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub user_bundle: usize,
    pub bundle_item: usize,
    pub user_item: usize,
}

pub fn published_stats(dataset_name: &str) -> Option<PublishedStats> {
    match dataset_name {
        "NetEase" => Some(PublishedStats {
            users: 18_528,
            bundles: 22_864,
            items: 123_628,
            user_bundle: 302_303,
            bundle_item: 1_778_838,
            user_item: 1_128_065,
        }),
        "Youshu" => Some(PublishedStats {
            users: 8_039,
            bundles: 4_771,
            items: 32_770,
            user_bundle: 51_337,
            bundle_item: 176_667,
            user_item: 138_515,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub dataset_name: String,
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub user_bundle_pairs: usize,
    pub bundle_item_pairs: usize,
    pub user_item_pairs: usize,
    pub user_bundle_density: String,
    pub bundle_item_density: String,
    pub user_item_density: String,
    pub expected: Option<PublishedStats>,
    pub mismatches: Vec<String>,
}

fn density_percent(d: f64) -> String {
    format!("{:.2}%", d * 100.0)
}

/// Cross-check the three matrices against each other and, for known dataset
/// names, against the published counts.
pub fn validate_stats(
    y: &InteractionMatrix,
    h: &InteractionMatrix,
    r: &InteractionMatrix,
    dataset_name: &str,
) -> Result<StatsReport> {
    if y.n_cols() != h.n_rows() {
        return Err(Error::Structural(format!(
            "bundle count disagrees: user-bundle has {}, bundle-item has {}",
            y.n_cols(),
            h.n_rows()
        )));
    }
    if y.n_rows() != r.n_rows() {
        return Err(Error::Structural(format!(
            "user count disagrees: user-bundle has {}, user-item has {}",
            y.n_rows(),
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

    let expected = published_stats(dataset_name);
    let mut mismatches = Vec::new();
    if let Some(exp) = expected {
        let mut check = |what: &str, got: usize, want: usize| {
            if got != want {
                mismatches.push(format!("{what}: expected {want}, got {got}"));
            }
        };
        check("users", y.n_rows(), exp.users);
        check("bundles", y.n_cols(), exp.bundles);
        check("items", h.n_cols(), exp.items);
        check("user-bundle pairs", y.len(), exp.user_bundle);
        check("bundle-item pairs", h.len(), exp.bundle_item);
        check("user-item pairs", r.len(), exp.user_item);
    }
    for m in &mismatches {
        log::warn!("{dataset_name}: {m}");
    }

    Ok(StatsReport {
        dataset_name: dataset_name.to_string(),
        users: y.n_rows(),
        bundles: y.n_cols(),
        items: h.n_cols(),
        user_bundle_pairs: y.len(),
        bundle_item_pairs: h.len(),
        user_item_pairs: r.len(),
        user_bundle_density: density_percent(y.density()),
        bundle_item_density: density_percent(h.density()),
        user_item_density: density_percent(r.density()),
        expected,
        mismatches,
    })
}
