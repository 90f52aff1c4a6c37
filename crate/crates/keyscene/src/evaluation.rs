//! Retrieval evaluation: rank statistics over similarity matrices and the
//! two benchmark protocols (one shared gallery across movies, or one
//! gallery per movie with the character term active).

use std::collections::BTreeMap;
use std::fmt;

use crate::characters::{encode_video_chars, one_hot_chars, CharError, CharVariant, CharVector};
use crate::encoders::{encode_clip, encode_text, ClipEncoding, EncodeError, TextEncoding};
use crate::model::ModelConfig;
use crate::retrieval::{score, ContextWindow, ScoreError, SimilarityMatrix};
use crate::tensorio::{ClipRecord, DatasetManifest, Split, Tensor};
use crate::autodiff::ParamStore;

/// Movies with fewer clips than this in the evaluated split are dropped
/// from per-movie galleries.
pub const DEFAULT_MIN_CLIPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Single gallery spanning every movie; character term off.
    CrossMovie,
    /// One gallery per movie; query and clip character vectors compared
    /// with the given video-side encoding.
    WithinMovie { variant: CharVariant },
}

#[derive(Debug)]
pub enum EvalError {
    EmptySplit { split: Split },
    UnknownGalleryId { id: String },
    /// No movie reaches the minimum clip count in the evaluated split.
    NoMoviesAfterFilter { min_clips: usize },
    Score(ScoreError),
    Encode(EncodeError),
    Char(CharError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptySplit { split } => write!(f, "{} split has no clips", split.name()),
            EvalError::UnknownGalleryId { id } => {
                write!(f, "truth id {id:?} is not in the gallery")
            }
            EvalError::NoMoviesAfterFilter { min_clips } => {
                write!(f, "no movie has at least {min_clips} clips in the evaluated split")
            }
            EvalError::Score(e) => write!(f, "{e}"),
            EvalError::Encode(e) => write!(f, "{e}"),
            EvalError::Char(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ScoreError> for EvalError {
    fn from(e: ScoreError) -> Self {
        EvalError::Score(e)
    }
}

impl From<EncodeError> for EvalError {
    fn from(e: EncodeError) -> Self {
        EvalError::Encode(e)
    }
}

impl From<CharError> for EvalError {
    fn from(e: CharError) -> Self {
        EvalError::Char(e)
    }
}

/// Rank summary of one retrieval run. Recall values are percentages;
/// ranks are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub n_queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
    /// Per-movie breakdown when evaluation ran one gallery per movie.
    pub per_movie: Vec<MovieReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovieReport {
    pub movie_id: String,
    pub n_queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>8} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "gallery", "queries", "R@1", "R@5", "R@10", "MedR", "MeanR"
        )?;
        writeln!(
            f,
            "{:<18} {:>8} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>8.2}",
            "overall", self.n_queries, self.r_at_1, self.r_at_5, self.r_at_10, self.median_rank,
            self.mean_rank
        )?;
        for m in &self.per_movie {
            writeln!(
                f,
                "{:<18} {:>8} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>8.2}",
                m.movie_id, m.n_queries, m.r_at_1, m.r_at_5, m.r_at_10, m.median_rank, m.mean_rank
            )?;
        }
        Ok(())
    }
}

impl RetrievalReport {
    /// One row per scope: `overall` first, then any per-movie rows.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scope,n_queries,r_at_1,r_at_5,r_at_10,median_rank,mean_rank\n");
        let mut push = |scope: &str, n: usize, r1: f64, r5: f64, r10: f64, md: f64, mn: f64| {
            out.push_str(&format!("{scope},{n},{r1},{r5},{r10},{md},{mn}\n"));
        };
        push(
            "overall",
            self.n_queries,
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.median_rank,
            self.mean_rank,
        );
        for m in &self.per_movie {
            push(&m.movie_id, m.n_queries, m.r_at_1, m.r_at_5, m.r_at_10, m.median_rank, m.mean_rank);
        }
        out
    }
}

/// 1-based optimistic rank of each query's true gallery item: one plus the
/// number of strictly greater scores in its row, so ties never hurt.
pub fn ranks(matrix: &SimilarityMatrix, truth: &[String]) -> Result<Vec<usize>, EvalError> {
    assert_eq!(matrix.query_ids.len(), truth.len(), "one truth id per query row");
    let col: BTreeMap<&str, usize> = matrix
        .gallery_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(truth.len());
    for (qi, t) in truth.iter().enumerate() {
        let &ti = col
            .get(t.as_str())
            .ok_or_else(|| EvalError::UnknownGalleryId { id: t.clone() })?;
        let target = matrix.at(qi, ti);
        let greater =
            (0..matrix.gallery_ids.len()).filter(|&gi| matrix.at(qi, gi) > target).count();
        out.push(1 + greater);
    }
    Ok(out)
}

fn summarize(ranks: &[usize]) -> (f64, f64, f64, f64, f64) {
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

/// Computes the rank summary for a scored matrix, where `truth[q]` names
/// the correct gallery column for query row `q`.
pub fn rank_metrics(
    matrix: &SimilarityMatrix,
    truth: &[String],
) -> Result<RetrievalReport, EvalError> {
    let rs = ranks(matrix, truth)?;
    let (r1, r5, r10, median, mean) = summarize(&rs);
    Ok(RetrievalReport {
        n_queries: rs.len(),
        r_at_1: r1,
        r_at_5: r5,
        r_at_10: r10,
        median_rank: median,
        mean_rank: mean,
        per_movie: Vec::new(),
    })
}

/// Unweighted mean of per-movie reports; every movie counts equally no
/// matter how many queries it contributed.
pub fn aggregate_movie_reports(reports: Vec<MovieReport>) -> RetrievalReport {
    assert!(!reports.is_empty());
    let n = reports.len() as f64;
    let mean = |f: fn(&MovieReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    RetrievalReport {
        n_queries: reports.iter().map(|r| r.n_queries).sum(),
        r_at_1: mean(|r| r.r_at_1),
        r_at_5: mean(|r| r.r_at_5),
        r_at_10: mean(|r| r.r_at_10),
        median_rank: mean(|r| r.median_rank),
        mean_rank: mean(|r| r.mean_rank),
        per_movie: reports,
    }
}

/// Stable identifier for a clip's gallery entry.
pub fn gallery_id(clip: &ClipRecord) -> String {
    format!("{}/c{:03}", clip.movie_id, clip.clip_index)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: RetrievalReport,
    /// Exported score grids: one for the shared gallery, or one per movie.
    pub matrices: Vec<(String, SimilarityMatrix)>,
}

/// Encodes every clip a set of context windows can touch, once.
fn encode_windows(
    manifest: &DatasetManifest,
    windows: &[ContextWindow],
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<BTreeMap<usize, ClipEncoding>, EvalError> {
    let mut needed: Vec<usize> = windows.iter().flat_map(|w| w.slots.iter().flatten().copied()).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut out = BTreeMap::new();
    for idx in needed {
        out.insert(idx, encode_clip(&manifest.clips()[idx], store, config)?);
    }
    Ok(out)
}

fn score_block(
    manifest: &DatasetManifest,
    indices: &[usize],
    store: &ParamStore,
    config: &ModelConfig,
    chars: Option<&BTreeMap<usize, (CharVector, CharVector)>>,
) -> Result<SimilarityMatrix, EvalError> {
    let windows: Vec<ContextWindow> = indices
        .iter()
        .map(|&idx| ContextWindow::build(manifest, idx, config))
        .collect::<Result<_, _>>()?;
    let encodings = encode_windows(manifest, &windows, store, config)?;
    let texts: Vec<TextEncoding> = indices
        .iter()
        .map(|&idx| encode_text(&manifest.clips()[idx].description, store, config))
        .collect::<Result<_, _>>()?;

    let q = indices.len();
    let mut scores = Tensor::zeros(vec![q, q]);
    for (qi, text) in texts.iter().enumerate() {
        for (vi, window) in windows.iter().enumerate() {
            let slots: Vec<Option<&ClipEncoding>> =
                window.slots.iter().map(|o| o.map(|idx| &encodings[&idx])).collect();
            let pair = chars.map(|c| {
                let (y, _) = &c[&indices[qi]];
                let (_, x) = &c[&indices[vi]];
                (y, x)
            });
            scores.data_mut()[qi * q + vi] = score(text, &slots, store, config, pair)?;
        }
    }
    let ids: Vec<String> =
        indices.iter().map(|&idx| gallery_id(&manifest.clips()[idx])).collect();
    Ok(SimilarityMatrix::new(scores, ids.clone(), ids))
}

/// Evaluates a split as one shared gallery across all movies. The
/// character term is disabled regardless of how the model was trained.
pub fn eval_cross_movie(
    manifest: &DatasetManifest,
    store: &ParamStore,
    config: &ModelConfig,
    split: Split,
) -> Result<EvalOutcome, EvalError> {
    let indices = manifest.split_clips(split);
    if indices.is_empty() {
        return Err(EvalError::EmptySplit { split });
    }
    let mut eval_config = config.clone();
    eval_config.use_character = false;
    let matrix = score_block(manifest, &indices, store, &eval_config, None)?;
    let truth = matrix.query_ids.clone();
    let report = rank_metrics(&matrix, &truth)?;
    Ok(EvalOutcome { report, matrices: vec![("all".into(), matrix)] })
}

/// Evaluates a split movie by movie. When the model carries the character
/// term, query-side vectors come from cast mentions and clip-side vectors
/// from face tracks under `variant`; for a model without it the term is
/// simply absent and `variant` is ignored. Movies with fewer than
/// `min_clips` clips in the split are skipped; metrics average over
/// movies, unweighted.
pub fn eval_within_movie(
    manifest: &DatasetManifest,
    store: &ParamStore,
    config: &ModelConfig,
    split: Split,
    variant: CharVariant,
    min_clips: usize,
) -> Result<EvalOutcome, EvalError> {
    let indices = manifest.split_clips(split);
    if indices.is_empty() {
        return Err(EvalError::EmptySplit { split });
    }
    let mut by_movie: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &idx in &indices {
        by_movie.entry(manifest.clips()[idx].movie_id.as_str()).or_default().push(idx);
    }
    by_movie.retain(|_, v| v.len() >= min_clips);
    if by_movie.is_empty() {
        return Err(EvalError::NoMoviesAfterFilter { min_clips });
    }

    let mut movie_reports = Vec::new();
    let mut matrices = Vec::new();
    for (movie_id, movie_indices) in by_movie {
        let chars = if config.use_character {
            let cast_len = manifest.movie(movie_id).map(|m| m.cast.len()).unwrap_or(0);
            let mut chars = BTreeMap::new();
            for &idx in &movie_indices {
                let clip = &manifest.clips()[idx];
                let y = one_hot_chars(&clip.mentions, cast_len)?;
                let x = encode_video_chars(&clip.face_tracks, cast_len, variant)?;
                chars.insert(idx, (y, x));
            }
            Some(chars)
        } else {
            None
        };
        let matrix =
            score_block(manifest, &movie_indices, store, config, chars.as_ref())?;
        let truth = matrix.query_ids.clone();
        let rs = ranks(&matrix, &truth)?;
        let (r1, r5, r10, median, mean) = summarize(&rs);
        movie_reports.push(MovieReport {
            movie_id: movie_id.to_string(),
            n_queries: rs.len(),
            r_at_1: r1,
            r_at_5: r5,
            r_at_10: r10,
            median_rank: median,
            mean_rank: mean,
        });
        matrices.push((movie_id.to_string(), matrix));
    }
    Ok(EvalOutcome { report: aggregate_movie_reports(movie_reports), matrices })
}

/// Protocol dispatch used by callers that take a mode value.
pub fn evaluate(
    manifest: &DatasetManifest,
    store: &ParamStore,
    config: &ModelConfig,
    split: Split,
    mode: Mode,
    min_clips: usize,
) -> Result<EvalOutcome, EvalError> {
    match mode {
        Mode::CrossMovie => eval_cross_movie(manifest, store, config, split),
        Mode::WithinMovie { variant } => {
            eval_within_movie(manifest, store, config, split, variant, min_clips)
        }
    }
}
