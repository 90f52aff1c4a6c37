//! Clip-to-plot alignment: an order-preserving assignment of a movie's
//! clips onto its plot sentences, plus summary statistics about which part
//! of the story the clips cover.

use std::fmt;

use crate::tensorio::{DatasetManifest, Tensor};
use crate::vecmath;

#[derive(Debug)]
pub enum AlignError {
    /// The assignment must be injective, so clips cannot outnumber
    /// sentences.
    MoreClipsThanSentences { clips: usize, sentences: usize },
    EmptyInput { what: &'static str },
    DimMismatch { clips: usize, sentences: usize },
    UnknownMovie { movie: String },
    MissingPlotEmbeddings { movie: String },
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::MoreClipsThanSentences { clips, sentences } => {
                write!(f, "{clips} clips cannot map one-to-one into {sentences} sentences")
            }
            AlignError::EmptyInput { what } => write!(f, "{what} is empty"),
            AlignError::DimMismatch { clips, sentences } => {
                write!(f, "clip dim {clips} does not match sentence dim {sentences}")
            }
            AlignError::UnknownMovie { movie } => write!(f, "unknown movie {movie:?}"),
            AlignError::MissingPlotEmbeddings { movie } => {
                write!(f, "movie {movie:?} has no plot sentence embeddings")
            }
        }
    }
}

impl std::error::Error for AlignError {}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Sentence index assigned to each clip, strictly increasing.
    pub assignment: Vec<usize>,
    /// Sum of `1 - cos` over matched pairs.
    pub total_cost: f64,
    /// Sentence indices left unmatched.
    pub skipped: Vec<usize>,
}

/// Cost of pairing clip row `v` with sentence row `s`.
fn pair_cost(clips: &Tensor, sentences: &Tensor, v: usize, s: usize) -> f64 {
    1.0 - vecmath::cosine(clips.row(v), sentences.row(s))
}

/// Aligns clip embeddings `[V, d]` to sentence embeddings `[S, d]` with a
/// strictly increasing assignment minimizing the total `1 - cos` cost.
/// Requires `V <= S`. Among equal-cost optima the lexicographically
/// smallest assignment wins.
pub fn jdtw(clips: &Tensor, sentences: &Tensor) -> Result<AlignmentResult, AlignError> {
    if clips.rank() != 2 || clips.rows() == 0 {
        return Err(AlignError::EmptyInput { what: "clip embeddings" });
    }
    if sentences.rank() != 2 || sentences.rows() == 0 {
        return Err(AlignError::EmptyInput { what: "sentence embeddings" });
    }
    if clips.cols() != sentences.cols() {
        return Err(AlignError::DimMismatch { clips: clips.cols(), sentences: sentences.cols() });
    }
    let v_n = clips.rows();
    let s_n = sentences.rows();
    if v_n > s_n {
        return Err(AlignError::MoreClipsThanSentences { clips: v_n, sentences: s_n });
    }

    // g[v][s]: minimal cost of placing clips v.. into sentences s.. .
    // Infeasible states (too few sentences left) hold infinity.
    let mut g = vec![vec![f64::INFINITY; s_n + 1]; v_n + 1];
    for s in 0..=s_n {
        g[v_n][s] = 0.0;
    }
    for v in (0..v_n).rev() {
        for s in (0..s_n).rev() {
            if s_n - s < v_n - v {
                continue;
            }
            let take = pair_cost(clips, sentences, v, s) + g[v + 1][s + 1];
            let skip = g[v][s + 1];
            g[v][s] = take.min(skip);
        }
    }

    let mut assignment = Vec::with_capacity(v_n);
    let (mut v, mut s) = (0, 0);
    while v < v_n {
        // Taking on ties keeps the earliest sentence, which makes the
        // reconstructed assignment lexicographically smallest.
        let take = pair_cost(clips, sentences, v, s) + g[v + 1][s + 1];
        if s_n - s == v_n - v || take <= g[v][s + 1] {
            assignment.push(s);
            v += 1;
        }
        s += 1;
    }
    let skipped = (0..s_n).filter(|s| !assignment.contains(s)).collect();
    Ok(AlignmentResult { assignment, total_cost: g[0][0], skipped })
}

/// Where in the story the matched sentences sit, all as fractions of the
/// sentence count.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    /// Matched sentences over total sentences.
    pub coverage: f64,
    /// Length of the first-to-last matched stretch over total sentences.
    pub span: f64,
    /// Center of that stretch over total sentences.
    pub midpoint: f64,
}

pub fn coverage_stats(assignment: &[usize], n_sentences: usize) -> Result<CoverageStats, AlignError> {
    if assignment.is_empty() {
        return Err(AlignError::EmptyInput { what: "assignment" });
    }
    if n_sentences == 0 {
        return Err(AlignError::EmptyInput { what: "sentence list" });
    }
    let first = *assignment.iter().min().unwrap();
    let last = *assignment.iter().max().unwrap();
    let n = n_sentences as f64;
    Ok(CoverageStats {
        coverage: assignment.len() as f64 / n,
        span: (last - first + 1) as f64 / n,
        midpoint: (first + last) as f64 / 2.0 / n,
    })
}

/// Mean of a clip's description token embeddings: its sentence-level
/// vector for alignment.
pub fn sentence_embedding(tokens: &Tensor) -> Tensor {
    assert_eq!(tokens.rank(), 2);
    let rows: Vec<&[f64]> = (0..tokens.rows()).map(|r| tokens.row(r)).collect();
    Tensor::vector(vecmath::mean_vector(&rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovieAlignment {
    pub movie_id: String,
    pub result: AlignmentResult,
    pub coverage: CoverageStats,
    /// Total clip runtime over movie runtime, when both are known.
    pub duration_fraction: Option<f64>,
}

/// Aligns one movie's clips (by description embedding, in story order) to
/// its plot sentences.
pub fn align_movie(
    manifest: &DatasetManifest,
    movie_id: &str,
) -> Result<MovieAlignment, AlignError> {
    let movie = manifest
        .movie(movie_id)
        .ok_or_else(|| AlignError::UnknownMovie { movie: movie_id.to_string() })?;
    let plot_emb = movie
        .plot_emb
        .as_ref()
        .ok_or_else(|| AlignError::MissingPlotEmbeddings { movie: movie_id.to_string() })?;
    let clips = manifest.movie_clips(movie_id);
    if clips.is_empty() {
        return Err(AlignError::EmptyInput { what: "movie clip list" });
    }
    let d = plot_emb.cols();
    let mut data = Vec::with_capacity(clips.len() * d);
    for clip in clips {
        data.extend_from_slice(sentence_embedding(&clip.description).data());
    }
    let clip_emb = Tensor::new(vec![clips.len(), d], data);
    let result = jdtw(&clip_emb, plot_emb)?;
    let coverage = coverage_stats(&result.assignment, plot_emb.rows())?;
    let duration_fraction = movie.duration.and_then(|total| {
        if total <= 0.0 {
            return None;
        }
        let clip_total: Option<f64> = clips.iter().map(|c| c.duration).sum();
        clip_total.map(|t| t / total)
    });
    Ok(MovieAlignment { movie_id: movie_id.to_string(), result, coverage, duration_fraction })
}
