// Scratch diagnostics for intent recovery on synthetic data.
// cargo run --release --example probe -- <epochs> <lr> <tau> <d>

use midgn::*;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        num / (na * nb)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let tau: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let d: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let n_users: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(200);
    let items_per_user: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(30);
    let n_bundles: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(120);
    let bundles_per_user: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(6);
    let lambda: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1e-5);
    let alpha: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let symmetric: bool = args.get(11).map(|s| s == "sym").unwrap_or(false);

    let synth_cfg = SynthConfig {
        seed: 0,
        n_users,
        items_per_user,
        n_bundles,
        bundles_per_user,
        preference_concentration: alpha,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth_cfg).unwrap();
    let split = split_interactions(&data.y, (0.7, 0.1, 0.2), 1).unwrap();

    let cfg = ModelConfig {
        embedding_dim: d,
        intents: 4,
        layers: 3,
        routing_iters: 2,
        temperature: tau,
        batch_size: 512,
        epochs,
        seed: 5,
        optimizer: OptimizerConfig { learning_rate: lr, lambda, ..Default::default() },
        symmetric_contrast: symmetric,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, split, &data.h, &data.r).unwrap();
    let ui_labels = data.truth.ui_label_map();
    let bi_labels_owned = data.truth.bi_label_map();

    let diagnose = |trainer: &Trainer, tag: &str| {
        let _bi_labels = &bi_labels_owned;
        let out = trainer.infer();
        let layers = out.user_confidence_layers().unwrap();
        let aligns: Vec<String> = layers
            .iter()
            .map(|c| {
                format!(
                    "{:.3}",
                    intent_alignment(&trainer.graphs.ui, c, &ui_labels, 4).unwrap()
                )
            })
            .collect();
        // chunk diversity: mean pairwise cosine among a user's e_u chunks
        let w = trainer.store.chunk_width();
        let k = 4;
        let mut cos_sum = 0.0;
        let mut cnt = 0;
        for u in 0..50 {
            for k1 in 0..k {
                for k2 in (k1 + 1)..k {
                    cos_sum += cosine(
                        out.e_u.row_chunk(u, k1, w),
                        out.e_u.row_chunk(u, k2, w),
                    );
                    cnt += 1;
                }
            }
        }
        // item cluster separation: within vs across cluster cosine
        let mut within = 0.0;
        let mut wn = 0;
        let mut across = 0.0;
        let mut an = 0;
        for i in (0..800).step_by(7) {
            for j in (1..800).step_by(13) {
                if i == j {
                    continue;
                }
                let c = cosine(trainer.store.item.row(i), trainer.store.item.row(j));
                if data.truth.item_intent[i] == data.truth.item_intent[j] {
                    within += c;
                    wn += 1;
                } else {
                    across += c;
                    an += 1;
                }
            }
        }
        // routing consistency: does an item land in the same chunk across
        // all the users it touches?
        let last = layers.last().unwrap();
        let am = last.argmax_per_edge();
        let mut consist = 0.0;
        let mut items_seen = 0;
        for i in 0..trainer.graphs.ui.right_count() {
            let (_, edges) = trainer.graphs.ui.right_neighbors(i);
            if edges.len() < 2 {
                continue;
            }
            let mut counts = [0usize; 8];
            for &e in edges {
                counts[am[e]] += 1;
            }
            consist += *counts.iter().max().unwrap() as f64 / edges.len() as f64;
            items_seen += 1;
        }
        // cross-entity marker structure: same-k cosine vs different-k cosine
        let marker = |mat: &Mat, rows: usize| -> (f64, f64) {
            let mut same = 0.0;
            let mut same_n = 0;
            let mut diff = 0.0;
            let mut diff_n = 0;
            for a in (0..rows).step_by(7) {
                for b in (1..rows).step_by(11) {
                    if a == b {
                        continue;
                    }
                    for k1 in 0..k {
                        for k2 in 0..k {
                            let c = cosine(mat.row_chunk(a, k1, w), mat.row_chunk(b, k2, w));
                            if k1 == k2 {
                                same += c;
                                same_n += 1;
                            } else {
                                diff += c;
                                diff_n += 1;
                            }
                        }
                    }
                }
            }
            (same / same_n as f64, diff / diff_n as f64)
        };
        let (mu_s, mu_d) = marker(&out.e_u, out.e_u.rows());
        let (mb_s, mb_d) = marker(&out.e_b, out.e_b.rows());
        // alignment on the bundle-item view
        let bi_labels = _bi_labels;
        let b_layers = out.bundle_confidence_layers().unwrap();
        let b_align = intent_alignment(
            &trainer.graphs.bi,
            b_layers.last().unwrap(),
            bi_labels,
            4,
        )
        .unwrap();
        println!(
            "{tag}: align u [{}] b {b_align:.3} chunk-cos {:.3} item-cos w/a {:.3}/{:.3} consist {:.3} marker-eu {:.2}/{:.2} eb {:.2}/{:.2}",
            aligns.join(", "),
            cos_sum / cnt as f64,
            within / wn as f64,
            across / an as f64,
            consist / items_seen as f64,
            mu_s,
            mu_d,
            mb_s,
            mb_d
        );
    };

    diagnose(&trainer, "epoch   0");
    for e in 1..=epochs {
        let m = trainer.train_epoch(e).unwrap();
        if e % 50 == 0 || e == epochs {
            println!(
                "epoch {e}: bpr {:.4} contrast {:.4}",
                m.bpr_loss, m.contrast_loss
            );
            diagnose(&trainer, &format!("epoch {e:>3}"));
        }
    }
}
