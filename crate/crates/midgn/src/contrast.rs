//! Chunk-level InfoNCE aligning each entity's k-th intent chunk across the
//! two views. For anchor chunk e_ck the positive is v_ck and the negatives
//! are the same entity's other-intent chunks in the v view; no cross-entity
//! negatives.

use crate::mat::{axpy, dot, Mat};

/// Entities to contrast, with both views and the temperature.
pub struct ContrastBatch<'a> {
    pub entity_ids: &'a [usize],
    pub e_view: &'a Mat,
    pub v_view: &'a Mat,
    pub intents: usize,
    pub temperature: f64,
    /// Also run the mirrored direction (anchor in the v view). Off by
    /// default in the model config.
    pub symmetric: bool,
}

/// Dense gradient contributions for both views (only batch rows non-zero).
pub struct ChunkGrads {
    pub e_view: Mat,
    pub v_view: Mat,
}

/// Mean InfoNCE over all (entity, intent) terms in the batch, with
/// gradients for both views' chunks.
pub fn info_nce_loss(batch: &ContrastBatch) -> (f64, ChunkGrads) {
    let mut g_e = Mat::zeros(batch.e_view.rows(), batch.e_view.cols());
    let mut g_v = Mat::zeros(batch.v_view.rows(), batch.v_view.cols());
    let (sum, count) = accumulate_info_nce(
        batch.e_view,
        batch.v_view,
        batch.entity_ids,
        batch.intents,
        batch.temperature,
        batch.symmetric,
        &mut g_e,
        &mut g_v,
    );
    if count == 0 {
        return (0.0, ChunkGrads { e_view: g_e, v_view: g_v });
    }
    let scale = 1.0 / count as f64;
    g_e.scale(scale);
    g_v.scale(scale);
    (sum * scale, ChunkGrads { e_view: g_e, v_view: g_v })
}

/// Unscaled sum of per-(entity, intent) terms plus their count; gradients of
/// the sum accumulate into the provided buffers. The model combines user and
/// bundle batches through this before taking one joint mean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_info_nce(
    e_view: &Mat,
    v_view: &Mat,
    ids: &[usize],
    intents: usize,
    temperature: f64,
    symmetric: bool,
    g_e: &mut Mat,
    g_v: &mut Mat,
) -> (f64, usize) {
    assert!(temperature > 0.0, "temperature must be positive");
    assert_eq!(e_view.cols(), v_view.cols());
    let k = intents;
    let width = e_view.cols() / k;
    let mut sum = 0.0;
    let mut count = 0;
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];

    let mut one_direction = |anchor: &Mat,
                             candidates: &Mat,
                             g_anchor: &mut Mat,
                             g_candidates: &mut Mat,
                             sum: &mut f64,
                             count: &mut usize| {
        for &c in ids {
            for ka in 0..k {
                let a = anchor.row_chunk(c, ka, width);
                let mut max = f64::NEG_INFINITY;
                for (kc, l) in logits.iter_mut().enumerate() {
                    *l = dot(a, candidates.row_chunk(c, kc, width)) / temperature;
                    max = max.max(*l);
                }
                let mut z = 0.0;
                for (p, l) in probs.iter_mut().zip(&logits) {
                    *p = (l - max).exp();
                    z += *p;
                }
                for p in probs.iter_mut() {
                    *p /= z;
                }
                // term = logsumexp(logits) − logits[ka]
                *sum += max + z.ln() - logits[ka];
                *count += 1;

                for kc in 0..k {
                    let coeff = (probs[kc] - if kc == ka { 1.0 } else { 0.0 }) / temperature;
                    axpy(g_anchor.row_chunk_mut(c, ka, width), coeff, candidates.row_chunk(c, kc, width));
                    axpy(g_candidates.row_chunk_mut(c, kc, width), coeff, anchor.row_chunk(c, ka, width));
                }
            }
        }
    };

    one_direction(e_view, v_view, g_e, g_v, &mut sum, &mut count);
    if symmetric {
        one_direction(v_view, e_view, g_v, g_e, &mut sum, &mut count);
    }
    (sum, count)
}
