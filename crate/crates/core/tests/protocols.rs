mod common;

use common::*;
use lcnn_core::eval::{self, EmbeddingSet, Identified, PairRecord, ListRecord, Role, ScoredPair};
use lcnn_core::zoo::EMBEDDING_DIM;
use lcnn_core::Rng;

#[test]
fn label_independent_scores_are_at_chance() {
    let mut rng = Rng::new(1);
    let mut total = 0.0;
    let trials = 40;
    for _ in 0..trials {
        let folds: Vec<Vec<ScoredPair>> = (0..10)
            .map(|_| {
                (0..60)
                    .map(|i| ScoredPair {
                        score: rng.uniform(),
                        same: i % 2 == 0,
                    })
                    .collect()
            })
            .collect();
        total += eval::verification_10fold(&folds).unwrap().mean_accuracy;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.5).abs() < 0.05, "mean accuracy {mean}");
}

#[test]
fn orthogonal_gallery_rank1_is_chance() {
    let mut rng = Rng::new(2);
    let ids = ["a", "b", "c", "d"];
    let basis: Vec<Vec<f32>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f32).collect()).collect();
    let gallery: Vec<Identified> = basis.iter().zip(ids).map(|(v, id)| Identified { identity: id, embedding: v }).collect();
    let mut hits = 0.0;
    let trials = 2000;
    let probe_vecs: Vec<Vec<f32>> = (0..trials).map(|_| random_embedding(&mut rng, 4)).collect();
    let labels: Vec<&str> = (0..trials).map(|_| ids[rng.below(4)]).collect();
    for (v, id) in probe_vecs.iter().zip(&labels) {
        hits += eval::closed_set_rank1(&gallery, &[Identified { identity: id, embedding: v }]).unwrap();
    }
    let rate = hits / trials as f64;
    assert!((rate - 0.25).abs() < 0.03, "rank-1 {rate}");
}

#[test]
fn rank1_invariant_under_gallery_permutation_without_ties() {
    let mut rng = Rng::new(3);
    let ids: Vec<String> = (0..15).map(|i| i.to_string()).collect();
    let vecs: Vec<Vec<f32>> = (0..15).map(|_| random_embedding(&mut rng, 8)).collect();
    let probes_v: Vec<(usize, Vec<f32>)> = (0..40).map(|_| (rng.below(15), random_embedding(&mut rng, 8))).collect();
    let probes: Vec<Identified> = probes_v.iter().map(|(w, v)| Identified { identity: &ids[*w], embedding: v }).collect();
    let mut order: Vec<usize> = (0..15).collect();
    let base = {
        let g: Vec<Identified> = order.iter().map(|&i| Identified { identity: &ids[i], embedding: &vecs[i] }).collect();
        eval::closed_set_rank1(&g, &probes).unwrap()
    };
    for _ in 0..5 {
        rng.shuffle(&mut order);
        let g: Vec<Identified> = order.iter().map(|&i| Identified { identity: &ids[i], embedding: &vecs[i] }).collect();
        assert_eq!(eval::closed_set_rank1(&g, &probes).unwrap(), base);
    }
}

#[test]
fn positive_rescaling_leaves_metrics_unchanged() {
    let mut rng = Rng::new(4);
    let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let g: Vec<Vec<f32>> = (0..10).map(|_| random_embedding(&mut rng, 8)).collect();
    let p: Vec<Vec<f32>> = (0..30).map(|_| random_embedding(&mut rng, 8)).collect();
    let scaled = |vs: &[Vec<f32>], s: f32| -> Vec<Vec<f32>> { vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect() };
    let (g2, p2) = (scaled(&g, 4.0), scaled(&p, 0.25));
    let rank1 = |g: &[Vec<f32>], p: &[Vec<f32>]| {
        let gallery: Vec<Identified> = g.iter().zip(&ids).map(|(v, i)| Identified { identity: i, embedding: v }).collect();
        let probes: Vec<Identified> = p
            .iter()
            .enumerate()
            .map(|(k, v)| Identified { identity: &ids[k % 10], embedding: v })
            .collect();
        eval::closed_set_rank1(&gallery, &probes).unwrap()
    };
    assert_eq!(rank1(&g, &p), rank1(&g2, &p2));
    for (x, y) in p.iter().zip(&p2) {
        let a = eval::cosine_similarity(x, &g[0]).unwrap();
        let b = eval::cosine_similarity(y, &g2[0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn protocols_are_pure() {
    let mut rng = Rng::new(5);
    let folds: Vec<Vec<ScoredPair>> = (0..10).map(|_| synthetic_pairs(30, &mut rng, 1.0)).collect();
    assert_eq!(eval::verification_10fold(&folds).unwrap(), eval::verification_10fold(&folds).unwrap());
    let a: Vec<Vec<f32>> = (0..150).map(|_| random_embedding(&mut rng, 8)).collect();
    let b: Vec<Vec<f32>> = (0..120).map(|_| random_embedding(&mut rng, 8)).collect();
    let ar: Vec<&[f32]> = a.iter().map(Vec::as_slice).collect();
    let br: Vec<&[f32]> = b.iter().map(Vec::as_slice).collect();
    let s1 = eval::ytf_video_similarity(&ar, &br, 100, &mut Rng::new(9)).unwrap();
    let s2 = eval::ytf_video_similarity(&ar, &br, 100, &mut Rng::new(9)).unwrap();
    assert_eq!(s1, s2);
    // Sampling 100 of 150 frames is not the full mean, but close to it.
    let full = cross_pair_mean(&a, &b);
    assert!((s1 - full).abs() < 0.05);
}

#[test]
fn verification_oracle_on_many_random_sets() {
    let mut rng = Rng::new(6);
    for trial in 0..30 {
        let folds: Vec<Vec<ScoredPair>> = (0..10).map(|_| synthetic_pairs(1 + rng.below(40), &mut rng, 0.8)).collect();
        let got = eval::verification_10fold(&folds).unwrap();
        let (mean, per) = verification_oracle(&folds);
        assert_eq!(got.fold_accuracies, per, "trial {trial}");
        assert_eq!(got.mean_accuracy, mean);
        let all: Vec<ScoredPair> = folds.concat();
        if all.iter().any(|p| !p.same) {
            for far in [0.0, 0.05, 0.3] {
                assert_eq!(eval::tpr_at_far(&all, far).unwrap().tpr, tpr_oracle(&all, far));
            }
        }
    }
}

#[test]
fn dir_on_indistinguishable_probes_tracks_far() {
    let mut rng = Rng::new(7);
    let ids: Vec<String> = (0..10).map(|i| format!("g{i}")).collect();
    let gv: Vec<Vec<f32>> = (0..10).map(|_| random_embedding(&mut rng, 8)).collect();
    let gallery: Vec<Identified> = gv.iter().zip(&ids).map(|(v, i)| Identified { identity: i, embedding: v }).collect();
    let genuine_v: Vec<(usize, Vec<f32>)> = (0..250).map(|_| (rng.below(10), random_embedding(&mut rng, 8))).collect();
    let imp_v: Vec<Vec<f32>> = (0..250).map(|_| random_embedding(&mut rng, 8)).collect();
    let imp_ids: Vec<String> = (0..250).map(|i| format!("x{i}")).collect();
    let genuine: Vec<Identified> = genuine_v.iter().map(|(w, v)| Identified { identity: &ids[*w], embedding: v }).collect();
    let impostors: Vec<Identified> = imp_v.iter().zip(&imp_ids).map(|(v, i)| Identified { identity: i, embedding: v }).collect();
    for far in [0.01, 0.1, 0.5] {
        let r = eval::open_set_dir_far(&gallery, &genuine, &impostors, far).unwrap();
        assert_eq!(r.dir, dir_oracle(&gallery, &genuine, &impostors, far));
        assert!(r.far <= far);
        // A hit needs a chance rank-1 match (1 in 10) and a score above τ (about `far`).
        assert!(r.dir <= 0.1 * far + 0.05, "far {far}: dir {}", r.dir);
    }
}

#[test]
fn open_set_accepts_full_protocol_sizes() {
    // 3,143 gallery images of 596 identities, 596 genuine and 9,494 impostor probes.
    let dim = 8;
    let mut rng = Rng::new(8);
    let mut set = EmbeddingSet::new(dim);
    let mut list = Vec::new();
    for i in 0..3143 {
        let id = format!("gal{i}");
        set.push(&id, &random_embedding(&mut rng, dim)).unwrap();
        list.push(ListRecord { id, identity: format!("p{}", i % 596), role: Role::Gallery });
    }
    for i in 0..10_090 {
        let id = format!("probe{i}");
        set.push(&id, &random_embedding(&mut rng, dim)).unwrap();
        let (identity, role) = if i < 596 { (format!("p{i}"), Role::Genuine) } else { (format!("imp{i}"), Role::Impostor) };
        list.push(ListRecord { id, identity, role });
    }
    let r = eval::run_open_set(&set, &list, 0.01).unwrap();
    assert!((0.0..=1.0).contains(&r.dir));
    assert!(r.far <= 0.01);
}

#[test]
fn runners_report_missing_ids() {
    let mut set = EmbeddingSet::new(EMBEDDING_DIM);
    set.push("a", &[1.0; EMBEDDING_DIM]).unwrap();
    let pairs = vec![PairRecord { a: "a".into(), b: "ghost".into(), same: true, fold: 0 }];
    let err = eval::run_pair_verification(&set, &pairs, 0.01).unwrap_err().to_string();
    assert!(err.contains("ghost"), "{err}");
    let err = eval::run_video_verification(&set, &pairs, 10, 1).unwrap_err().to_string();
    assert!(err.contains("ghost"), "{err}");
}
