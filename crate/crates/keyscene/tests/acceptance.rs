//! Acceptance gates for the whole pipeline, one test per gate. Every gate
//! checks the library against an oracle built here from first principles
//! (finite differences, exhaustive enumeration, full sorting), never against
//! the code under test. Tolerances are pinned next to each assertion.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use keyscene::alignment::jdtw;
use keyscene::autodiff::{grad_check, AutodiffError, ParamStore, Tape};
use keyscene::characters::{
    build_bank, char_similarity, cluster_embeddings, encode_query_chars, encode_video_chars,
    label_tracks, one_hot_chars, BankParams, CharVariant, CharVector, FaceTrack, ASSIGN_THRESHOLD,
};
use keyscene::encoders::{
    encode_clip, encode_clip_graph, encode_text, encode_text_graph, ClipEncoding, TextEncoding,
};
use keyscene::evaluation::{
    aggregate_movie_reports, eval_cross_movie, eval_within_movie, rank_metrics, EvalError,
    MovieReport,
};
use keyscene::model::{init_params, ModelConfig};
use keyscene::retrieval::{mixture_weights, score, score_graph, SimilarityMatrix};
use keyscene::tensorio::{
    generate_synth, ClipRecord, DatasetManifest, ExpertFeature, ExpertSpec, Split, SynthSpec,
};
use keyscene::training::{batch_chars, batch_loss_graph, ranking_loss, train, TrainConfig};
use keyscene::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..rows).map(|_| rand_vec(rng, cols)).collect();
    Tensor::from_rows(&rows)
}

fn dot_ref(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_ref(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_ref(a, a).sqrt();
    let nb = dot_ref(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot_ref(a, b) / (na * nb)
}

fn softmax_ref(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| x / z).collect()
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn track(id: usize, actor: Option<usize>, length: u32, embedding: Vec<f64>) -> FaceTrack {
    FaceTrack { id, actor, length, embedding: Tensor::vector(embedding) }
}

/// Single-slot mixture scoring computed from the public encodings alone:
/// softmax over present experts of `h . a_e`, then the weighted sum of
/// text-video inner products.
fn plain_mixture_score(
    text: &TextEncoding,
    clip: &ClipEncoding,
    store: &ParamStore,
    config: &ModelConfig,
) -> f64 {
    let mut u = Vec::new();
    let mut sims = Vec::new();
    for name in config.expert_names() {
        let emb = &clip.experts[name];
        if !emb.present {
            continue;
        }
        let a = store.get(&format!("mixture.{name}.t")).unwrap();
        u.push(dot_ref(text.h.data(), a.data()));
        sims.push(dot_ref(text.experts[name].data(), emb.vector.data()));
    }
    let w = softmax_ref(&u);
    w.iter().zip(&sims).map(|(w, s)| w * s).sum()
}

// -------------------------------------------------------------------------
// Gate 1: analytic gradients of the full training loss agree with central
// finite differences on 20 seeded batches (B=4, three experts, one past and
// one future slot, character term on), max relative error < 1e-4, < 30 s.
// -------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_check_on_full_loss() {
    const TOL: f64 = 1e-4;
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for s in 0..20u64 {
        let spec = SynthSpec {
            n_movies: 2,
            clips_per_movie: 4,
            experts: vec![
                ExpertSpec { name: "scene".into(), dim: 6 },
                ExpertSpec { name: "object".into(), dim: 5 },
                ExpertSpec { name: "action".into(), dim: 4 },
            ],
            d_text: 4,
            latent_dim: 4,
            cast_size: 3,
            plot_sentences: 4,
            snr: 3.0,
            absent_prob: 0.3,
            with_face_tracks: true,
            face_dim: 5,
            split_fractions: (1.0, 0.0),
            seed: 100 + s,
        };
        let manifest = generate_synth(&spec).unwrap();
        let config = ModelConfig {
            d_model: 6,
            d_hidden: 6,
            netvlad_clusters: 2,
            n_past: 1,
            n_future: 1,
            d_text: 4,
            experts: manifest.experts().to_vec(),
            use_character: true,
        };
        let store = init_params(&config, 900 + s).unwrap();
        let batch = [0usize, 1, 4, 5];
        let chars = batch_chars(&manifest, &batch, CharVariant::TrackFrequency).unwrap();
        let report = grad_check(&store, 1e-5, |tape, bound| {
            batch_loss_graph(tape, bound, &manifest, &batch, &config, 0.2, Some(&chars))
                .map_err(|_| AutodiffError::EmptyInput { op: "batch loss" })
        })
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "seed {s}: max relative error {:.3e} at {}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_index
        );
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "gradient checks took {elapsed:?}");
    println!(
        "gradient check: worst relative error {worst:.3e} over {checked} parameters in {elapsed:?}"
    );
}

// -------------------------------------------------------------------------
// Gate 2: with zero context slots the windowed scorer equals single-slot
// mixture scoring recomputed here from the raw encodings, within 1e-6 on
// 1,000 random (query, clip) pairs.
// -------------------------------------------------------------------------

#[test]
fn criterion_02_context_free_scoring_collapses_to_plain_mixture() {
    const TOL: f64 = 1e-6;
    let spec = SynthSpec {
        n_movies: 5,
        clips_per_movie: 6,
        experts: vec![
            ExpertSpec { name: "scene".into(), dim: 8 },
            ExpertSpec { name: "object".into(), dim: 6 },
            ExpertSpec { name: "action".into(), dim: 7 },
        ],
        d_text: 6,
        latent_dim: 5,
        cast_size: 3,
        plot_sentences: 6,
        snr: 2.0,
        absent_prob: 0.35,
        with_face_tracks: false,
        face_dim: 4,
        split_fractions: (1.0, 0.0),
        seed: 42,
    };
    let manifest = generate_synth(&spec).unwrap();
    let config = ModelConfig {
        d_model: 8,
        d_hidden: 8,
        netvlad_clusters: 2,
        n_past: 0,
        n_future: 0,
        d_text: 6,
        experts: manifest.experts().to_vec(),
        use_character: false,
    };
    let store = init_params(&config, 7).unwrap();
    let clips = manifest.clips();
    let texts: Vec<TextEncoding> =
        clips.iter().map(|c| encode_text(&c.description, &store, &config).unwrap()).collect();
    let videos: Vec<ClipEncoding> =
        clips.iter().map(|c| encode_clip(c, &store, &config).unwrap()).collect();

    let mut r = rng(2024);
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let q = r.gen_range(0..clips.len());
        let g = r.gen_range(0..clips.len());
        let got = score(&texts[q], &[Some(&videos[g])], &store, &config, None).unwrap();
        let want = plain_mixture_score(&texts[q], &videos[g], &store, &config);
        max_diff = max_diff.max((got - want).abs());
    }
    assert!(max_diff < TOL, "windowed and plain scores diverge by {max_diff:.3e}");
    println!("context-free collapse: max |windowed - plain| = {max_diff:.3e} over 1000 pairs");
}

// -------------------------------------------------------------------------
// Gate 3: for five experts under every nonempty presence pattern, mixture
// weights over present entries sum to 1 (masked entries exactly 0), the
// score ignores masked experts' features and parameters bit-for-bit, and
// masked experts' parameters get exactly zero gradient.
// -------------------------------------------------------------------------

#[test]
fn criterion_03_masked_experts_are_inert() {
    const SUM_TOL: f64 = 1e-6;
    let experts = vec![
        ExpertSpec { name: "scene".into(), dim: 3 },
        ExpertSpec { name: "object".into(), dim: 4 },
        ExpertSpec { name: "action".into(), dim: 5 },
        ExpertSpec { name: "face".into(), dim: 6 },
        ExpertSpec { name: "audio".into(), dim: 7 },
    ];
    let config = ModelConfig {
        d_model: 6,
        d_hidden: 6,
        netvlad_clusters: 2,
        n_past: 0,
        n_future: 0,
        d_text: 4,
        experts,
        use_character: false,
    };
    let store = init_params(&config, 5).unwrap();
    let mut r = rng(31);
    let tokens = rand_rows(&mut r, 3, 4);
    let frames: Vec<Tensor> =
        config.experts.iter().map(|e| rand_rows(&mut r, 2, e.dim)).collect();
    let names: Vec<String> = config.experts.iter().map(|e| e.name.clone()).collect();
    let text_enc = encode_text(&tokens, &store, &config).unwrap();

    for mask in 1u32..32 {
        let present: Vec<bool> = (0..5).map(|k| mask & (1 << k) != 0).collect();
        let clip = ClipRecord {
            movie_id: "m000".into(),
            clip_index: 0,
            experts: names
                .iter()
                .enumerate()
                .map(|(k, n)| {
                    let feature = if present[k] {
                        ExpertFeature::Present(frames[k].clone())
                    } else {
                        ExpertFeature::Absent
                    };
                    (n.clone(), feature)
                })
                .collect(),
            description: tokens.clone(),
            face_tracks: Vec::new(),
            mentions: Vec::new(),
            duration: None,
        };

        let logits: Vec<&Tensor> =
            names.iter().map(|n| store.get(&format!("mixture.{n}.t")).unwrap()).collect();
        let weights = mixture_weights(&text_enc.h, &logits, &present).unwrap();
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < SUM_TOL, "pattern {mask:05b}: weights sum to {sum}");
        for (k, w) in weights.iter().enumerate() {
            if !present[k] {
                assert_eq!(*w, 0.0, "pattern {mask:05b}: masked expert {k} has weight {w}");
            }
        }

        let clip_enc = encode_clip(&clip, &store, &config).unwrap();
        let base = score(&text_enc, &[Some(&clip_enc)], &store, &config, None).unwrap();
        let want = plain_mixture_score(&text_enc, &clip_enc, &store, &config);
        assert!((base - want).abs() < 1e-12, "pattern {mask:05b}: {base} vs present-only {want}");

        // Junking every parameter that belongs to a masked expert must not
        // move the score at all: those values are never read.
        let mut junked = store.clone();
        let masked_names: Vec<String> = junked
            .names()
            .filter(|n| {
                names.iter().enumerate().any(|(k, e)| !present[k] && n.contains(&format!(".{e}.")))
            })
            .map(String::from)
            .collect();
        for name in &masked_names {
            for v in junked.get_mut(name).unwrap().data_mut() {
                *v = r.gen_range(-10.0..10.0);
            }
        }
        let text_junk = encode_text(&tokens, &junked, &config).unwrap();
        let clip_junk = encode_clip(&clip, &junked, &config).unwrap();
        let rescored = score(&text_junk, &[Some(&clip_junk)], &junked, &config, None).unwrap();
        assert_eq!(rescored, base, "pattern {mask:05b}: junked masked parameters moved the score");

        let mut gstore = store.clone();
        let mut tape = Tape::new();
        let bound = gstore.bind(&mut tape);
        let text_nodes = encode_text_graph(&mut tape, &tokens, &bound, &config).unwrap();
        let clip_nodes = encode_clip_graph(&mut tape, &clip, &bound, &config).unwrap();
        let s = score_graph(&mut tape, &text_nodes, &[Some(&clip_nodes)], &bound, &config, None)
            .unwrap();
        tape.backward(s).unwrap();
        bound.accumulate_grads(&tape, &mut gstore);
        for name in &masked_names {
            let grad = gstore.grad_of(name).unwrap();
            assert!(
                grad.data().iter().all(|&g| g == 0.0),
                "pattern {mask:05b}: masked parameter {name} has nonzero gradient"
            );
        }
        let all_names: Vec<String> = gstore.names().map(String::from).collect();
        let live_nonzero = all_names
            .iter()
            .filter(|n| !masked_names.contains(n))
            .any(|n| gstore.grad_of(n).unwrap().data().iter().any(|&g| g != 0.0));
        assert!(live_nonzero, "pattern {mask:05b}: no gradient reached any live parameter");
    }
    println!("masking: all 31 presence patterns inert outside the live expert set");
}

// -------------------------------------------------------------------------
// Gate 4: training on the planted 5x4 synthetic set (D=64, C=4) from three
// seeds reaches held-out single-gallery R@1 >= 95% within 200 epochs,
// under two minutes for all three runs.
// -------------------------------------------------------------------------

#[test]
fn criterion_04_training_solves_planted_retrieval() {
    let started = Instant::now();
    let spec = SynthSpec {
        n_movies: 5,
        clips_per_movie: 4,
        experts: vec![
            ExpertSpec { name: "scene".into(), dim: 48 },
            ExpertSpec { name: "object".into(), dim: 32 },
        ],
        d_text: 12,
        latent_dim: 4,
        cast_size: 4,
        plot_sentences: 12,
        snr: 100.0,
        absent_prob: 0.0,
        with_face_tracks: false,
        face_dim: 32,
        split_fractions: (0.6, 0.2),
        seed: 1234,
    };
    let manifest = generate_synth(&spec).unwrap();
    for seed in 0..3u64 {
        let config = TrainConfig {
            learning_rate: 0.005,
            batch_size: 4,
            margin: 0.2,
            d_model: 64,
            netvlad_clusters: 4,
            n_past: 1,
            n_future: 1,
            seed,
            patience: 60,
            max_epochs: 200,
            character: None,
        };
        let outcome = train(&manifest, &config).unwrap();
        let eval =
            eval_cross_movie(&manifest, &outcome.params, &outcome.model, Split::Test).unwrap();
        assert!(
            eval.report.r_at_1 >= 95.0,
            "seed {seed}: R@1 {:.1}% after {} epochs",
            eval.report.r_at_1,
            outcome.history.len()
        );
        println!(
            "training seed {seed}: R@1 {:.1}% on held-out clips, best epoch {} of {}",
            eval.report.r_at_1,
            outcome.best_epoch,
            outcome.history.len()
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "three training runs took {elapsed:?}");
    println!("training: three seeds solved the planted set in {elapsed:?}");
}

// -------------------------------------------------------------------------
// Gate 5: computed rank metrics equal a full-sort oracle on 500 random
// score matrices (integer ranks compared exactly), and the two pinned hand
// fixtures come out exactly.
// -------------------------------------------------------------------------

#[test]
fn criterion_05_rank_metrics_match_sort_oracle() {
    fn oracle_ranks(scores: &Tensor) -> Vec<usize> {
        let n = scores.rows();
        (0..n)
            .map(|q| {
                let row = scores.row(q);
                let mut sorted = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                sorted.partition_point(|&v| v > row[q]) + 1
            })
            .collect()
    }
    fn oracle_summary(ranks: &[usize]) -> (f64, f64, f64, f64, f64) {
        let n = ranks.len() as f64;
        let frac = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2] as f64
        } else {
            let hi = sorted.len() / 2;
            (sorted[hi - 1] + sorted[hi]) as f64 / 2.0
        };
        let mean = ranks.iter().sum::<usize>() as f64 / n;
        (frac(1), frac(5), frac(10), median, mean)
    }
    fn matrix(scores: Tensor) -> SimilarityMatrix {
        let ids: Vec<String> = (0..scores.rows()).map(|i| format!("q{i}")).collect();
        SimilarityMatrix::new(scores, ids.clone(), ids)
    }

    let mut r = rng(505);
    for case in 0..500 {
        let n = r.gen_range(1..=12);
        // One-decimal scores force plenty of ties.
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| r.gen_range(0..10) as f64 / 10.0).collect()).collect();
        let scores = Tensor::from_rows(&rows);
        let want_ranks = oracle_ranks(&scores);
        let m = matrix(scores);
        let truth = m.gallery_ids.clone();
        let report = rank_metrics(&m, &truth).unwrap();
        let (r1, r5, r10, med, mean) = oracle_summary(&want_ranks);
        assert_eq!(report.n_queries, n, "case {case}");
        assert_eq!(report.r_at_1, r1, "case {case}");
        assert_eq!(report.r_at_5, r5, "case {case}");
        assert_eq!(report.r_at_10, r10, "case {case}");
        assert_eq!(report.median_rank, med, "case {case}");
        assert_eq!(report.mean_rank, mean, "case {case}");
    }

    let eye = Tensor::from_rows(
        &(0..10)
            .map(|i| (0..10).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    );
    let m = matrix(eye);
    let truth = m.gallery_ids.clone();
    let report = rank_metrics(&m, &truth).unwrap();
    assert_eq!(report.r_at_1, 100.0);
    assert_eq!(report.median_rank, 1.0);

    let m = matrix(Tensor::from_rows(&[vec![1.0, 0.5], vec![0.7, 0.4]]));
    let truth = m.gallery_ids.clone();
    let report = rank_metrics(&m, &truth).unwrap();
    assert_eq!(report.r_at_1, 50.0);
    assert_eq!(report.median_rank, 1.5);
    println!("rank metrics: 500 random matrices match the full-sort oracle exactly");
}

// -------------------------------------------------------------------------
// Gate 6: per-movie averaging is unweighted and matches a hand-computed
// two-movie fixture exactly; the minimum-clip filter keeps exactly the
// movies a direct count keeps.
// -------------------------------------------------------------------------

#[test]
fn criterion_06_within_movie_averaging_and_filter() {
    // Movie a: single query at rank 1. Movie b: queries at ranks 3 and 6.
    let a = MovieReport {
        movie_id: "a".into(),
        n_queries: 1,
        r_at_1: 100.0,
        r_at_5: 100.0,
        r_at_10: 100.0,
        median_rank: 1.0,
        mean_rank: 1.0,
    };
    let b = MovieReport {
        movie_id: "b".into(),
        n_queries: 2,
        r_at_1: 0.0,
        r_at_5: 50.0,
        r_at_10: 100.0,
        median_rank: 4.5,
        mean_rank: 4.5,
    };
    let agg = aggregate_movie_reports(vec![a, b]);
    assert_eq!(agg.n_queries, 3);
    assert_eq!(agg.r_at_1, 50.0);
    assert_eq!(agg.r_at_5, 75.0);
    assert_eq!(agg.r_at_10, 100.0);
    assert_eq!(agg.median_rank, 2.75);
    assert_eq!(agg.mean_rank, 2.75);

    let spec = SynthSpec {
        n_movies: 6,
        clips_per_movie: 6,
        experts: vec![
            ExpertSpec { name: "scene".into(), dim: 8 },
            ExpertSpec { name: "object".into(), dim: 6 },
        ],
        d_text: 6,
        latent_dim: 5,
        cast_size: 3,
        plot_sentences: 6,
        snr: 2.0,
        absent_prob: 0.0,
        with_face_tracks: false,
        face_dim: 4,
        split_fractions: (1.0, 0.0),
        seed: 77,
    };
    let base = generate_synth(&spec).unwrap();
    let keep = [6usize, 5, 4, 6, 3, 5];
    let movie_rank: BTreeMap<&str, usize> =
        base.movies().iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
    let clips: Vec<ClipRecord> = base
        .clips()
        .iter()
        .filter(|c| c.clip_index < keep[movie_rank[c.movie_id.as_str()]])
        .cloned()
        .collect();
    let manifest = DatasetManifest::from_parts(
        base.experts().to_vec(),
        base.d_text(),
        base.movies().to_vec(),
        clips,
    )
    .unwrap();

    let config = ModelConfig {
        d_model: 8,
        d_hidden: 8,
        netvlad_clusters: 2,
        n_past: 0,
        n_future: 0,
        d_text: 6,
        experts: manifest.experts().to_vec(),
        use_character: false,
    };
    let store = init_params(&config, 3).unwrap();
    let min_clips = 5;
    let outcome = eval_within_movie(
        &manifest,
        &store,
        &config,
        Split::Train,
        CharVariant::TrackFrequency,
        min_clips,
    )
    .unwrap();
    let expected_movies = keep.iter().filter(|&&k| k >= min_clips).count();
    let expected_queries: usize = keep.iter().filter(|&&k| k >= min_clips).sum();
    assert_eq!(outcome.matrices.len(), expected_movies);
    assert_eq!(outcome.report.per_movie.len(), expected_movies);
    assert_eq!(outcome.report.n_queries, expected_queries);

    let err = eval_within_movie(
        &manifest,
        &store,
        &config,
        Split::Train,
        CharVariant::TrackFrequency,
        7,
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::NoMoviesAfterFilter { .. }));
    println!(
        "within-movie: filter kept {expected_movies} of {} movies, {expected_queries} queries",
        keep.len()
    );
}

// -------------------------------------------------------------------------
// Gate 7: the cast-vector fixtures come out exactly, and on galleries where
// every actor has at most one track, all tracks run equally long, and each
// clip shows the same number of actors, all three encodings agree on the
// best clip for every query.
// -------------------------------------------------------------------------

#[test]
fn criterion_07_character_vectors_and_variant_agreement() {
    let cast = vec!["A".to_string(), "B".to_string(), "C".to_string()];
    let (y, unknown) = encode_query_chars(&["A".into(), "C".into()], &cast);
    assert!(unknown.is_empty());
    assert_eq!(y.weights, vec![1.0, 0.0, 1.0]);
    assert_eq!(one_hot_chars(&[0, 2], 3).unwrap().weights, vec![1.0, 0.0, 1.0]);

    let freq_tracks = vec![
        track(0, Some(0), 10, vec![1.0]),
        track(1, Some(0), 10, vec![1.0]),
        track(2, Some(1), 10, vec![1.0]),
    ];
    let freq = encode_video_chars(&freq_tracks, 3, CharVariant::TrackFrequency).unwrap();
    assert_eq!(freq.weights, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);

    let len_tracks = vec![
        track(0, Some(0), 30, vec![1.0]),
        track(1, Some(0), 10, vec![1.0]),
        track(2, Some(1), 20, vec![1.0]),
    ];
    let lens = encode_video_chars(&len_tracks, 3, CharVariant::TrackLength).unwrap();
    assert_eq!(lens.weights, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);

    let sim = char_similarity(
        &CharVector { weights: vec![1.0, 0.0, 1.0] },
        &CharVector { weights: vec![0.5, 0.5, 0.0] },
    )
    .unwrap();
    assert_eq!(sim, 0.5);

    // Agreement family: power-of-two actor counts keep every variant's
    // weights exactly proportional, so even tie patterns coincide.
    let cast_len = 6;
    let variants =
        [CharVariant::OneHot, CharVariant::TrackFrequency, CharVariant::TrackLength];
    let mut r = rng(700);
    for &per_clip in &[2usize, 4] {
        let mut galleries: Vec<Vec<FaceTrack>> = Vec::new();
        for _ in 0..12 {
            let mut actors: Vec<usize> = (0..cast_len).collect();
            for i in (1..actors.len()).rev() {
                actors.swap(i, r.gen_range(0..=i));
            }
            let mut tracks: Vec<FaceTrack> = actors[..per_clip]
                .iter()
                .enumerate()
                .map(|(t, &a)| track(t, Some(a), 7, vec![1.0]))
                .collect();
            // Unlabeled tracks sit outside every numerator and denominator.
            if r.gen_bool(0.5) {
                tracks.push(track(99, None, 3, vec![1.0]));
            }
            galleries.push(tracks);
        }
        galleries.push(Vec::new());

        for _ in 0..300 {
            let mentions: Vec<usize> = (0..cast_len).filter(|_| r.gen_bool(0.4)).collect();
            let y = one_hot_chars(&mentions, cast_len).unwrap();
            let picks: Vec<usize> = variants
                .iter()
                .map(|&v| {
                    let scores: Vec<f64> = galleries
                        .iter()
                        .map(|tracks| {
                            let x = encode_video_chars(tracks, cast_len, v).unwrap();
                            char_similarity(&y, &x).unwrap()
                        })
                        .collect();
                    first_argmax(&scores)
                })
                .collect();
            assert!(
                picks.windows(2).all(|w| w[0] == w[1]),
                "variants disagree on the best clip: {picks:?} for mentions {mentions:?}"
            );
        }
    }

    // Frequency and length encodings are identical whenever every labeled
    // track runs equally long, constant actor count or not.
    for n_tracks in 1..=4usize {
        let tracks: Vec<FaceTrack> =
            (0..n_tracks).map(|t| track(t, Some(t % 5), 5, vec![1.0])).collect();
        let f = encode_video_chars(&tracks, 5, CharVariant::TrackFrequency).unwrap();
        let l = encode_video_chars(&tracks, 5, CharVariant::TrackLength).unwrap();
        assert_eq!(f.weights, l.weights);
    }
    println!("characters: fixtures exact, variants agree on every query's best clip");
}

// -------------------------------------------------------------------------
// Gate 8: agglomerative clustering equals an exhaustive-merge reference on
// instances up to 12 embeddings, bank construction follows it, and labeling
// at the 0.8 floor is perfect when noise keeps a margin below it.
// -------------------------------------------------------------------------

#[test]
fn criterion_08_identity_bank_matches_reference_clusterer() {
    assert_eq!(ASSIGN_THRESHOLD, 0.8);

    /// Reference: recompute every cluster-pair distance from the original
    /// pairwise cosine distances at each step, merge the closest pair while
    /// it is within the threshold, ties to the lowest pair.
    fn oracle_cluster(embs: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
        let n = embs.len();
        let mut d = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                d[i][j] = 1.0 - cosine_ref(&embs[i], &embs[j]);
            }
        }
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let mut sum = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            sum += d[a][b];
                        }
                    }
                    let avg = sum / (clusters[i].len() * clusters[j].len()) as f64;
                    if best.map_or(true, |(_, _, v)| avg < v) {
                        best = Some((i, j, avg));
                    }
                }
            }
            match best {
                Some((i, j, v)) if v <= threshold => {
                    let merged = clusters.remove(j);
                    clusters[i].extend(merged);
                    clusters[i].sort_unstable();
                }
                _ => break,
            }
        }
        clusters
    }
    fn normalize(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort();
        clusters
    }

    let thresholds = [0.25, 0.5, 0.76, 1.0];
    let mut r = rng(808);
    for case in 0..150 {
        let n = 1 + case % 12;
        let dim = 3 + case % 4;
        let threshold = thresholds[case % thresholds.len()];
        let embs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r, dim)).collect();
        let tensors: Vec<Tensor> = embs.iter().map(|e| Tensor::vector(e.clone())).collect();
        let got = normalize(cluster_embeddings(&tensors, threshold));
        let want = normalize(oracle_cluster(&embs, threshold));
        assert_eq!(got, want, "case {case}: n={n} threshold={threshold}");
    }

    // Planted separation: three tight groups around orthogonal axes.
    let mut embs = Vec::new();
    for axis in 0..3 {
        for _ in 0..4 {
            let mut v = vec![0.0; 6];
            v[axis * 2] = 1.0;
            for x in v.iter_mut() {
                *x += 0.05 * r.gen_range(-1.0..1.0);
            }
            embs.push(v);
        }
    }
    let tensors: Vec<Tensor> = embs.iter().map(|e| Tensor::vector(e.clone())).collect();
    let got = normalize(cluster_embeddings(&tensors, 0.5));
    assert_eq!(got, normalize(oracle_cluster(&embs, 0.5)));
    assert_eq!(got, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]]);

    // Bank construction sits on the same clustering: the admitted canonical
    // embedding is the normalized mean of the reference's largest cluster.
    let (bank, skipped) = build_bank(
        &[("lead".to_string(), tensors.clone())],
        &BankParams { dist_threshold: 0.5, min_cluster: 2 },
    )
    .unwrap();
    assert!(skipped.is_empty());
    let largest = oracle_cluster(&embs, 0.5)
        .into_iter()
        .fold(Vec::new(), |best, c| if c.len() >= best.len() { c } else { best });
    let entry = bank.find("lead").unwrap();
    assert_eq!(entry.cluster_size, largest.len());
    let mut mean = vec![0.0; 6];
    for &i in &largest {
        for (m, x) in mean.iter_mut().zip(&embs[i]) {
            *m += x;
        }
    }
    let norm = dot_ref(&mean, &mean).sqrt();
    for (m, got) in mean.iter().zip(entry.embedding.data()) {
        assert!((m / norm - got).abs() < 1e-12);
    }

    // Labeling: four orthogonal identities, every probe stays well above
    // the floor for its own identity and well below it for the rest.
    let centers: Vec<Vec<f64>> = (0..4)
        .map(|a| {
            let mut v = vec![0.0; 8];
            v[a * 2] = 1.0;
            v
        })
        .collect();
    let noisy = |r: &mut ChaCha8Rng, c: &[f64], scale: f64| -> Vec<f64> {
        let mut v: Vec<f64> = c.iter().map(|&x| x + scale * r.gen_range(-1.0..1.0)).collect();
        let n = dot_ref(&v, &v).sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        v
    };
    let cast: Vec<String> = (0..4).map(|a| format!("actor{a}")).collect();
    let actors: Vec<(String, Vec<Tensor>)> = cast
        .iter()
        .enumerate()
        .map(|(a, name)| {
            let embs: Vec<Tensor> =
                (0..6).map(|_| Tensor::vector(noisy(&mut r, &centers[a], 0.08))).collect();
            (name.clone(), embs)
        })
        .collect();
    let (bank, skipped) =
        build_bank(&actors, &BankParams { dist_threshold: 0.76, min_cluster: 3 }).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(bank.len(), 4);

    let mut total = 0;
    for (a, center) in centers.iter().enumerate() {
        for _ in 0..15 {
            let probe = track(total, None, 5, noisy(&mut r, center, 0.08));
            let labeled = label_tracks(&[probe], &bank, &cast, ASSIGN_THRESHOLD).unwrap();
            assert_eq!(labeled[0].actor, Some(a), "probe near {} mislabeled", cast[a]);
            total += 1;
        }
    }
    println!("identity bank: clustering matches the reference; {total}/{total} probes labeled");
}

// -------------------------------------------------------------------------
// Gate 9: the alignment DP equals brute-force enumeration over every
// increasing injection for all shapes V <= 5, S <= 8, forces the identity
// when V == S, and aligns 50x200 in under 100 ms.
// -------------------------------------------------------------------------

#[test]
fn criterion_09_alignment_matches_brute_force() {
    const COST_TOL: f64 = 1e-9;

    fn brute_force(clips: &Tensor, sentences: &Tensor) -> (Vec<usize>, f64) {
        let v = clips.rows();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut assignment = vec![0usize; v];
        // Recursion in lexicographic order keeps the first minimum, which
        // is the lexicographically smallest optimum.
        fn recurse(
            clips: &Tensor,
            sentences: &Tensor,
            level: usize,
            start: usize,
            assignment: &mut Vec<usize>,
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            let v = clips.rows();
            let s = sentences.rows();
            if level == v {
                let cost: f64 = assignment
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| 1.0 - cosine_ref(clips.row(i), sentences.row(a)))
                    .sum();
                if best.as_ref().map_or(true, |(_, c)| cost < *c) {
                    *best = Some((assignment.clone(), cost));
                }
                return;
            }
            for a in start..s {
                assignment[level] = a;
                recurse(clips, sentences, level + 1, a + 1, assignment, best);
            }
        }
        recurse(clips, sentences, 0, 0, &mut assignment, &mut best);
        best.unwrap()
    }

    let mut r = rng(909);
    let mut cases = 0;
    for v in 1..=5usize {
        for s in v..=8usize {
            for _ in 0..6 {
                let clips = rand_rows(&mut r, v, 3);
                let sentences = rand_rows(&mut r, s, 3);
                let got = jdtw(&clips, &sentences).unwrap();
                let (want_assignment, want_cost) = brute_force(&clips, &sentences);
                assert!(
                    (got.total_cost - want_cost).abs() < COST_TOL,
                    "V={v} S={s}: cost {} vs brute force {want_cost}",
                    got.total_cost
                );
                assert_eq!(got.assignment, want_assignment, "V={v} S={s}");
                if v == s {
                    assert_eq!(got.assignment, (0..v).collect::<Vec<_>>());
                }
                cases += 1;
            }
        }
    }

    let clips = rand_rows(&mut r, 50, 32);
    let sentences = rand_rows(&mut r, 200, 32);
    let started = Instant::now();
    let result = jdtw(&clips, &sentences).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(result.assignment.len(), 50);
    assert!(elapsed.as_millis() < 100, "50x200 alignment took {elapsed:?}");
    println!("alignment: {cases} shapes match brute force; 50x200 in {elapsed:?}");
}

// -------------------------------------------------------------------------
// Gate 10: an untrained model over a 100-clip gallery ranks the true clip
// near the middle: median rank within [25, 75] for each of 10 seeds.
// -------------------------------------------------------------------------

#[test]
fn criterion_10_untrained_model_ranks_at_chance() {
    let spec = SynthSpec {
        n_movies: 25,
        clips_per_movie: 4,
        experts: vec![
            ExpertSpec { name: "scene".into(), dim: 12 },
            ExpertSpec { name: "object".into(), dim: 8 },
        ],
        d_text: 8,
        latent_dim: 6,
        cast_size: 3,
        plot_sentences: 4,
        snr: 1.0,
        absent_prob: 0.0,
        with_face_tracks: false,
        face_dim: 4,
        split_fractions: (1.0, 0.0),
        seed: 99,
    };
    let manifest = generate_synth(&spec).unwrap();
    assert_eq!(manifest.clips().len(), 100);
    let config = ModelConfig {
        d_model: 16,
        d_hidden: 16,
        netvlad_clusters: 2,
        n_past: 1,
        n_future: 1,
        d_text: 8,
        experts: manifest.experts().to_vec(),
        use_character: false,
    };
    let mut medians = Vec::new();
    for seed in 0..10u64 {
        let store = init_params(&config, 500 + seed).unwrap();
        let outcome = eval_cross_movie(&manifest, &store, &config, Split::Train).unwrap();
        let med = outcome.report.median_rank;
        assert!(
            (25.0..=75.0).contains(&med),
            "seed {seed}: median rank {med} outside the chance band"
        );
        medians.push(med);
    }
    println!("untrained model: median ranks {medians:?} all within [25, 75]");
}

// -------------------------------------------------------------------------
// Gate 11: ranking-loss fixtures. A margin-satisfying matrix gives exactly
// zero; the 2x2 hand case gives 0.15; adding a constant to every score
// leaves the loss unchanged to 1e-9.
// -------------------------------------------------------------------------

#[test]
fn criterion_11_ranking_loss_fixtures() {
    let dominant = Tensor::from_rows(&[
        vec![1.0, 0.5, 0.5, 0.5],
        vec![0.5, 1.0, 0.5, 0.5],
        vec![0.5, 0.5, 1.0, 0.5],
        vec![0.5, 0.5, 0.5, 1.0],
    ]);
    assert_eq!(ranking_loss(&dominant, 0.121).unwrap(), 0.0);

    let hand = Tensor::from_rows(&[vec![1.0, 0.8], vec![0.2, 1.0]]);
    let loss = ranking_loss(&hand, 0.5).unwrap();
    // 1e-12 covers f64 rounding of the exact value 0.15.
    assert!((loss - 0.15).abs() < 1e-12, "hand case loss {loss}");

    const SHIFT_TOL: f64 = 1e-9;
    let mut r = rng(1111);
    for _ in 0..50 {
        let n = r.gen_range(2..=6);
        let scores = rand_rows(&mut r, n, n);
        let base = ranking_loss(&scores, 0.121).unwrap();
        for &shift in &[-3.0, 0.7, 10.0] {
            let shifted = Tensor::from_rows(
                &(0..n)
                    .map(|i| scores.row(i).iter().map(|&x| x + shift).collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            );
            let moved = ranking_loss(&shifted, 0.121).unwrap();
            assert!(
                (base - moved).abs() < SHIFT_TOL,
                "shift {shift}: loss moved from {base} to {moved}"
            );
        }
    }
    println!("ranking loss: zero, hand, and shift-invariance fixtures all hold");
}

// -------------------------------------------------------------------------
// Report only, no assertion: final validation R@1 with and without one past
// context slot, across three seeds. Run with `--ignored` to print the
// comparison; context is expected to help or tie up to seed noise.
// -------------------------------------------------------------------------

#[test]
#[ignore = "report-only comparison, run with --ignored to print it"]
fn report_past_context_effect_on_validation() {
    let spec = SynthSpec {
        n_movies: 5,
        clips_per_movie: 4,
        experts: vec![
            ExpertSpec { name: "scene".into(), dim: 48 },
            ExpertSpec { name: "object".into(), dim: 32 },
        ],
        d_text: 12,
        latent_dim: 4,
        cast_size: 4,
        plot_sentences: 12,
        snr: 100.0,
        absent_prob: 0.0,
        with_face_tracks: false,
        face_dim: 32,
        split_fractions: (0.6, 0.2),
        seed: 1234,
    };
    let manifest = generate_synth(&spec).unwrap();
    for seed in 0..3u64 {
        let run = |n_past: usize| {
            let config = TrainConfig {
                learning_rate: 0.005,
                batch_size: 4,
                margin: 0.2,
                d_model: 64,
                netvlad_clusters: 4,
                n_past,
                n_future: 0,
                seed,
                patience: 60,
                max_epochs: 200,
                character: None,
            };
            let outcome = train(&manifest, &config).unwrap();
            eval_cross_movie(&manifest, &outcome.params, &outcome.model, Split::Val)
                .unwrap()
                .report
                .r_at_1
        };
        let without = run(0);
        let with_past = run(1);
        println!(
            "seed {seed}: validation R@1 {without:.1}% without context, {with_past:.1}% with one past slot"
        );
    }
}
