//! Seeded synthetic datasets with planted text/video correspondences.
//!
//! Every clip draws a unit latent code. The code is written into the leading
//! `latent_dim` dimensions of each expert frame and of each description
//! token, with Gaussian noise scaled by `1 / snr` everywhere, so description
//! and clip agree exactly in the planted subspace as `snr` grows. Plot
//! sentence embeddings reuse the same construction: each clip is planted at a
//! strictly increasing sentence index, remaining sentences get fresh codes.
//! Face tracks cluster around per-actor canonical embeddings and mentions
//! are drawn from the actors whose tracks were planted, so character signals
//! are consistent by construction.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::characters::FaceTrack;
use crate::tensorio::format::Tensor;
use crate::tensorio::manifest::{
    ClipRecord, DatasetManifest, ExpertFeature, ExpertSpec, ManifestError, Movie, Split,
};
use crate::vecmath::l2_normalize;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_movies: usize,
    pub clips_per_movie: usize,
    pub experts: Vec<ExpertSpec>,
    pub d_text: usize,
    /// Dimensionality of the planted code shared by a clip and its
    /// description; must fit inside every expert and the text dimension.
    pub latent_dim: usize,
    pub cast_size: usize,
    pub plot_sentences: usize,
    /// Per-dimension signal-to-noise ratio of the planted code.
    pub snr: f64,
    /// Probability that a clip drops an expert stream (one stream is always
    /// forced present so every clip stays scoreable).
    pub absent_prob: f64,
    pub with_face_tracks: bool,
    /// Track embedding dimension when no expert named `face` declares one.
    pub face_dim: usize,
    /// Train and validation fractions of movies; the remainder is test.
    pub split_fractions: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_movies: 5,
            clips_per_movie: 4,
            experts: vec![
                ExpertSpec { name: "scene".into(), dim: 48 },
                ExpertSpec { name: "object".into(), dim: 32 },
            ],
            d_text: 24,
            latent_dim: 12,
            cast_size: 4,
            plot_sentences: 12,
            snr: 100.0,
            absent_prob: 0.0,
            with_face_tracks: true,
            face_dim: 32,
            split_fractions: (0.6, 0.2),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub enum SynthError {
    ZeroMovies,
    ZeroClips,
    NoExperts,
    BadDim { what: String },
    BadSnr { snr: f64 },
    BadProbability { p: f64 },
    BadFractions { train: f64, val: f64 },
    TooFewSentences { clips: usize, sentences: usize },
    Manifest(ManifestError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::ZeroMovies => write!(f, "at least one movie is required"),
            SynthError::ZeroClips => write!(f, "at least one clip per movie is required"),
            SynthError::NoExperts => write!(f, "at least one expert stream is required"),
            SynthError::BadDim { what } => write!(f, "{what}"),
            SynthError::BadSnr { snr } => write!(f, "snr must be positive, got {snr}"),
            SynthError::BadProbability { p } => write!(f, "absent_prob must lie in [0, 1), got {p}"),
            SynthError::BadFractions { train, val } => {
                write!(f, "split fractions train={train} val={val} must be >= 0 and sum to <= 1")
            }
            SynthError::TooFewSentences { clips, sentences } => {
                write!(f, "{sentences} plot sentences cannot host {clips} clips in order")
            }
            SynthError::Manifest(e) => write!(f, "generated manifest failed validation: {e}"),
        }
    }
}

impl std::error::Error for SynthError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SynthError::Manifest(e) => Some(e),
            _ => None,
        }
    }
}

impl From<ManifestError> for SynthError {
    fn from(e: ManifestError) -> Self {
        SynthError::Manifest(e)
    }
}

/// Ground truth the generator planted, for tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct SynthTruth {
    /// Per movie: the plot sentence index planted for each clip, in clip
    /// order (strictly increasing).
    pub planted_sentences: BTreeMap<String, Vec<usize>>,
}

fn validate(spec: &SynthSpec) -> Result<(), SynthError> {
    if spec.n_movies == 0 {
        return Err(SynthError::ZeroMovies);
    }
    if spec.clips_per_movie == 0 {
        return Err(SynthError::ZeroClips);
    }
    if spec.experts.is_empty() {
        return Err(SynthError::NoExperts);
    }
    if spec.latent_dim == 0 {
        return Err(SynthError::BadDim { what: "latent_dim must be >= 1".into() });
    }
    for e in &spec.experts {
        if e.dim < spec.latent_dim {
            return Err(SynthError::BadDim {
                what: format!(
                    "expert {} is {}-d, too small for a {}-d planted code",
                    e.name, e.dim, spec.latent_dim
                ),
            });
        }
    }
    if spec.d_text < spec.latent_dim {
        return Err(SynthError::BadDim {
            what: format!(
                "d_text {} is too small for a {}-d planted code",
                spec.d_text, spec.latent_dim
            ),
        });
    }
    if !(spec.snr > 0.0) {
        return Err(SynthError::BadSnr { snr: spec.snr });
    }
    if !(0.0..1.0).contains(&spec.absent_prob) {
        return Err(SynthError::BadProbability { p: spec.absent_prob });
    }
    let (tr, va) = spec.split_fractions;
    if tr < 0.0 || va < 0.0 || tr + va > 1.0 {
        return Err(SynthError::BadFractions { train: tr, val: va });
    }
    if spec.plot_sentences < spec.clips_per_movie {
        return Err(SynthError::TooFewSentences {
            clips: spec.clips_per_movie,
            sentences: spec.plot_sentences,
        });
    }
    if spec.with_face_tracks && spec.cast_size == 0 {
        return Err(SynthError::BadDim { what: "cast_size must be >= 1 for face tracks".into() });
    }
    Ok(())
}

/// Generates a synthetic dataset; a pure function of the spec.
pub fn generate_synth(spec: &SynthSpec) -> Result<DatasetManifest, SynthError> {
    generate_synth_with_truth(spec).map(|(m, _)| m)
}

/// Like [`generate_synth`], also returning what was planted.
pub fn generate_synth_with_truth(
    spec: &SynthSpec,
) -> Result<(DatasetManifest, SynthTruth), SynthError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    // Per-dimension noise sigma putting the planted code at the requested
    // SNR: the unit code spreads ~1/sqrt(l) per dimension.
    let sigma = 1.0 / (spec.snr * (l as f64).sqrt());
    let face_dim = spec
        .experts
        .iter()
        .find(|e| e.name == "face")
        .map(|e| e.dim)
        .unwrap_or(spec.face_dim);

    let n_train = (spec.n_movies as f64 * spec.split_fractions.0).floor() as usize;
    let n_val = (spec.n_movies as f64 * spec.split_fractions.1).floor() as usize;

    let mut truth = SynthTruth::default();
    let mut movies = Vec::new();
    let mut clips = Vec::new();

    for mi in 0..spec.n_movies {
        let movie_id = format!("m{mi:03}");
        let split = if mi < n_train {
            Split::Train
        } else if mi < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let cast: Vec<String> =
            (0..spec.cast_size).map(|a| format!("{movie_id}.actor{a}")).collect();
        let canon: Vec<Vec<f64>> = (0..spec.cast_size)
            .map(|_| {
                let mut v: Vec<f64> = (0..face_dim).map(|_| rng.sample(StandardNormal)).collect();
                l2_normalize(&mut v);
                v
            })
            .collect();

        let codes: Vec<Vec<f64>> = (0..spec.clips_per_movie)
            .map(|_| {
                let mut z: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
                l2_normalize(&mut z);
                z
            })
            .collect();

        // Each clip lands on a strictly increasing plot sentence index.
        let mut slots: Vec<usize> = (0..spec.plot_sentences).collect();
        slots.shuffle(&mut rng);
        let mut planted: Vec<usize> = slots[..spec.clips_per_movie].to_vec();
        planted.sort_unstable();

        let plant = |rng: &mut ChaCha8Rng, code: &[f64], dim: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(dim);
            for i in 0..dim {
                let signal = if i < l { code[i] } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                v.push(signal + sigma * noise);
            }
            v
        };

        let plot: Vec<String> =
            (0..spec.plot_sentences).map(|s| format!("Plot sentence {s} of {movie_id}")).collect();
        let mut plot_rows = Vec::with_capacity(spec.plot_sentences);
        for s in 0..spec.plot_sentences {
            let row = match planted.iter().position(|&p| p == s) {
                Some(ci) => plant(&mut rng, &codes[ci], spec.d_text),
                None => {
                    let mut z: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
                    l2_normalize(&mut z);
                    plant(&mut rng, &z, spec.d_text)
                }
            };
            plot_rows.push(row);
        }
        let plot_emb = Tensor::from_rows(&plot_rows).round_to_f32();

        let mut clip_durations = Vec::new();
        for ci in 0..spec.clips_per_movie {
            let code = &codes[ci];
            let n_tokens = rng.gen_range(3..=6);
            let desc_rows: Vec<Vec<f64>> =
                (0..n_tokens).map(|_| plant(&mut rng, code, spec.d_text)).collect();
            let description = Tensor::from_rows(&desc_rows).round_to_f32();

            let (face_tracks, present_actors) = if spec.with_face_tracks {
                let mut actor_idx: Vec<usize> = (0..spec.cast_size).collect();
                actor_idx.shuffle(&mut rng);
                let n_present = rng.gen_range(1..=spec.cast_size.min(3));
                let mut present: Vec<usize> = actor_idx[..n_present].to_vec();
                present.sort_unstable();
                let mut tracks = Vec::new();
                for &a in &present {
                    for _ in 0..rng.gen_range(1..=2) {
                        let mut emb: Vec<f64> = canon[a]
                            .iter()
                            .map(|&v| v + 0.05 * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        l2_normalize(&mut emb);
                        tracks.push(FaceTrack {
                            id: tracks.len(),
                            actor: Some(a),
                            length: rng.gen_range(10..=100),
                            embedding: Tensor::vector(emb).round_to_f32(),
                        });
                    }
                }
                (tracks, present)
            } else {
                (Vec::new(), Vec::new())
            };

            let mut experts = BTreeMap::new();
            for (ei, e) in spec.experts.iter().enumerate() {
                let derived_face = e.name == "face" && spec.with_face_tracks;
                let feature = if derived_face {
                    if face_tracks.is_empty() {
                        ExpertFeature::Absent
                    } else {
                        let rows: Vec<Vec<f64>> =
                            face_tracks.iter().map(|t| t.embedding.data().to_vec()).collect();
                        ExpertFeature::Present(Tensor::from_rows(&rows))
                    }
                } else {
                    let drop = spec.absent_prob > 0.0 && rng.gen_bool(spec.absent_prob);
                    // The first stream always stays present so the clip can
                    // be scored.
                    if drop && ei != 0 {
                        ExpertFeature::Absent
                    } else {
                        let n_frames = rng.gen_range(3..=6);
                        let rows: Vec<Vec<f64>> =
                            (0..n_frames).map(|_| plant(&mut rng, code, e.dim)).collect();
                        ExpertFeature::Present(Tensor::from_rows(&rows).round_to_f32())
                    }
                };
                experts.insert(e.name.clone(), feature);
            }

            let mentions: Vec<usize> =
                present_actors.iter().copied().filter(|_| rng.gen_bool(0.8)).collect();

            let duration = (rng.gen_range(60.0..180.0) * 10.0f64).round() / 10.0;
            clip_durations.push(duration);
            clips.push(ClipRecord {
                movie_id: movie_id.clone(),
                clip_index: ci,
                experts,
                description,
                face_tracks,
                mentions,
                duration: Some(duration),
            });
        }

        // Clips cover roughly 15% of the movie's running time.
        let movie_duration =
            (clip_durations.iter().sum::<f64>() / 0.15 * 10.0).round() / 10.0;
        truth.planted_sentences.insert(movie_id.clone(), planted);
        movies.push(Movie {
            id: movie_id,
            cast,
            plot,
            plot_emb: Some(plot_emb),
            duration: Some(movie_duration),
            split,
        });
    }

    let manifest = DatasetManifest::from_parts(spec.experts.clone(), spec.d_text, movies, clips)?;
    Ok((manifest, truth))
}
