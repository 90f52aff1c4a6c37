//! Query-clip scoring: text-conditioned mixture weights over per-expert
//! similarities, with context slots pulling neighboring clips' streams
//! into the target clip's score.
//!
//! The weight for each (expert, slot) pair comes from one softmax over
//! every pair that is actually present; absent streams and empty slots are
//! excluded before the softmax, so they carry exactly zero weight and, on
//! the graph path, exactly zero gradient. With zero context slots the
//! machinery reduces to the plain single-clip mixture.
//!
//! Like the encoders, scoring exists twice: [`score`] over precomputed
//! encodings for evaluation, [`score_graph`] over tape nodes for training.
//! A window with no present stream anywhere is an error, not a zero score.

use std::fmt;

use crate::autodiff::{softmax_slice, AutodiffError, Bound, NodeId, ParamStore, Tape};
use crate::characters::{char_similarity, CharError, CharVector};
use crate::encoders::{ClipEncoding, ClipNodes, EncodeError, TextEncoding, TextNodes};
use crate::model::{self, ModelConfig, K_MIX_CHARACTER};
use crate::tensorio::{DatasetManifest, Tensor};
use crate::vecmath;

#[derive(Debug)]
pub enum ScoreError {
    /// Every (expert, slot) entry is masked; no softmax exists.
    AllMasked,
    ShapeMismatch { what: String },
    MissingParam { name: String },
    /// Character vectors were supplied to a model configured without the
    /// character term, or vice versa where required.
    CharacterMismatch { what: &'static str },
    Encode(EncodeError),
    Graph(AutodiffError),
    Char(CharError),
    BadClipIndex { index: usize, count: usize },
}

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreError::AllMasked => write!(f, "every expert and context slot is absent"),
            ScoreError::ShapeMismatch { what } => write!(f, "shape mismatch: {what}"),
            ScoreError::MissingParam { name } => write!(f, "parameter {name:?} not in store"),
            ScoreError::CharacterMismatch { what } => write!(f, "character term misuse: {what}"),
            ScoreError::Encode(e) => write!(f, "{e}"),
            ScoreError::Graph(e) => write!(f, "{e}"),
            ScoreError::Char(e) => write!(f, "{e}"),
            ScoreError::BadClipIndex { index, count } => {
                write!(f, "clip index {index} out of range ({count} clips)")
            }
        }
    }
}

impl std::error::Error for ScoreError {}

impl From<EncodeError> for ScoreError {
    fn from(e: EncodeError) -> Self {
        ScoreError::Encode(e)
    }
}

impl From<AutodiffError> for ScoreError {
    fn from(e: AutodiffError) -> Self {
        ScoreError::Graph(e)
    }
}

impl From<CharError> for ScoreError {
    fn from(e: CharError) -> Self {
        ScoreError::Char(e)
    }
}

/// Softmax over the present entries of a logit-vector family.
///
/// `logits[k]` is the weight-prediction vector for entry `k`; its product
/// with `h` is the entry's logit. Masked entries receive weight exactly
/// 0.0; the rest sum to 1.
pub fn mixture_weights(
    h: &Tensor,
    logits: &[&Tensor],
    present: &[bool],
) -> Result<Vec<f64>, ScoreError> {
    if logits.len() != present.len() {
        return Err(ScoreError::ShapeMismatch {
            what: format!("{} logit vectors vs {} mask entries", logits.len(), present.len()),
        });
    }
    for l in logits {
        if l.rank() != 1 || l.len() != h.len() {
            return Err(ScoreError::ShapeMismatch {
                what: format!("logit vector {:?} vs h [{}]", l.shape(), h.len()),
            });
        }
    }
    let live: Vec<usize> = (0..logits.len()).filter(|&k| present[k]).collect();
    if live.is_empty() {
        return Err(ScoreError::AllMasked);
    }
    let u: Vec<f64> = live.iter().map(|&k| vecmath::dot(h.data(), logits[k].data())).collect();
    let mut soft = vec![0.0; u.len()];
    softmax_slice(&u, &mut soft);
    let mut out = vec![0.0; logits.len()];
    for (slot, &k) in live.iter().enumerate() {
        out[k] = soft[slot];
    }
    Ok(out)
}

/// Clip indices a scoring window draws from: one optional global clip
/// index per slot, the target at `config.target_slot()`. Slots reaching
/// outside the target's movie are `None` and stay masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub target: usize,
    pub slots: Vec<Option<usize>>,
}

impl ContextWindow {
    pub fn build(
        manifest: &DatasetManifest,
        clip_idx: usize,
        config: &ModelConfig,
    ) -> Result<ContextWindow, ScoreError> {
        let clips = manifest.clips();
        let target = clips
            .get(clip_idx)
            .ok_or(ScoreError::BadClipIndex { index: clip_idx, count: clips.len() })?;
        let range = manifest.movie_clip_range(&target.movie_id);
        let slots = (0..config.n_slots())
            .map(|slot| {
                let shifted = clip_idx as i64 + config.slot_offset(slot);
                (shifted >= range.start as i64 && (shifted as usize) < range.end)
                    .then_some(shifted as usize)
            })
            .collect();
        Ok(ContextWindow { target: clip_idx, slots })
    }
}

fn fetch<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor, ScoreError> {
    store.get(name).ok_or_else(|| ScoreError::MissingParam { name: name.to_string() })
}

/// Computes the character term's (similarity, enabled) contribution or
/// rejects inconsistent usage.
fn char_term(
    config: &ModelConfig,
    chars: Option<(&CharVector, &CharVector)>,
) -> Result<Option<f64>, ScoreError> {
    match (config.use_character, chars) {
        (false, Some(_)) => {
            Err(ScoreError::CharacterMismatch { what: "cast vectors passed but term disabled" })
        }
        (false, None) | (true, None) => Ok(None),
        (true, Some((y, x))) => Ok(Some(char_similarity(y, x)?)),
    }
}

/// Scores one query against one clip window from precomputed encodings.
///
/// `slots` must have `config.n_slots()` entries; `None` marks a slot with
/// no clip. `chars` carries the (query, clip) cast vectors when the
/// character term is configured; a query-clip pair from different movies
/// lifted to a shared index space works too.
pub fn score(
    text: &TextEncoding,
    slots: &[Option<&ClipEncoding>],
    store: &ParamStore,
    config: &ModelConfig,
    chars: Option<(&CharVector, &CharVector)>,
) -> Result<f64, ScoreError> {
    if slots.len() != config.n_slots() {
        return Err(ScoreError::ShapeMismatch {
            what: format!("{} slots vs configured {}", slots.len(), config.n_slots()),
        });
    }
    let slot_names = config.slot_names();
    let mut u = Vec::new();
    let mut sims = Vec::new();
    for (slot_idx, slot) in slots.iter().enumerate() {
        let Some(enc) = slot else { continue };
        for name in config.expert_names() {
            let emb = enc.expert(name).ok_or_else(|| ScoreError::ShapeMismatch {
                what: format!("clip encoding lacks expert {name:?}"),
            })?;
            if !emb.present {
                continue;
            }
            let e_t = text.experts.get(name).ok_or_else(|| ScoreError::ShapeMismatch {
                what: format!("text encoding lacks expert {name:?}"),
            })?;
            let a = fetch(store, &model::k_mixture(name, &slot_names[slot_idx]))?;
            if a.len() != text.h.len() {
                return Err(ScoreError::ShapeMismatch {
                    what: format!("logit vector {:?} vs h [{}]", a.shape(), text.h.len()),
                });
            }
            u.push(vecmath::dot(text.h.data(), a.data()));
            sims.push(vecmath::dot(e_t.data(), emb.vector.data()));
        }
    }
    if let Some(s_c) = char_term(config, chars)? {
        let a = fetch(store, K_MIX_CHARACTER)?;
        u.push(vecmath::dot(text.h.data(), a.data()));
        sims.push(s_c);
    }
    if u.is_empty() {
        return Err(ScoreError::AllMasked);
    }
    let mut weights = vec![0.0; u.len()];
    softmax_slice(&u, &mut weights);
    Ok(vecmath::dot(&weights, &sims))
}

/// Graph twin of [`score`]. Only present (expert, slot) branches enter the
/// graph, so masked parameters receive exactly zero gradient. Cast vectors
/// are data: the character similarity enters as a constant and gradient
/// flows only through its mixture weight.
pub fn score_graph(
    tape: &mut Tape,
    text: &TextNodes,
    slots: &[Option<&ClipNodes>],
    bound: &Bound,
    config: &ModelConfig,
    chars: Option<(&CharVector, &CharVector)>,
) -> Result<NodeId, ScoreError> {
    if slots.len() != config.n_slots() {
        return Err(ScoreError::ShapeMismatch {
            what: format!("{} slots vs configured {}", slots.len(), config.n_slots()),
        });
    }
    let slot_names = config.slot_names();
    let mut u = Vec::new();
    let mut sims = Vec::new();
    for (slot_idx, slot) in slots.iter().enumerate() {
        let Some(nodes) = slot else { continue };
        for name in config.expert_names() {
            let Some(&emb) = nodes.experts.get(name).map(|o| o.as_ref()).unwrap_or(None) else {
                continue;
            };
            let e_t = *text.experts.get(name).ok_or_else(|| ScoreError::ShapeMismatch {
                what: format!("text nodes lack expert {name:?}"),
            })?;
            let a = bound.id(&model::k_mixture(name, &slot_names[slot_idx]));
            u.push(tape.dot(text.h, a)?);
            sims.push(tape.dot(e_t, emb)?);
        }
    }
    if let Some(s_c) = char_term(config, chars)? {
        let a = bound.id(K_MIX_CHARACTER);
        u.push(tape.dot(text.h, a)?);
        sims.push(tape.constant(s_c));
    }
    if u.is_empty() {
        return Err(ScoreError::AllMasked);
    }
    let logits = tape.concat(&u)?;
    let weights = tape.softmax(logits)?;
    let sim_vec = tape.concat(&sims)?;
    Ok(tape.dot(weights, sim_vec)?)
}

/// Query-by-gallery score grid with row and column identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `[queries, gallery]` scores.
    pub scores: Tensor,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor, query_ids: Vec<String>, gallery_ids: Vec<String>) -> Self {
        assert_eq!(scores.rank(), 2);
        assert_eq!(scores.rows(), query_ids.len());
        assert_eq!(scores.cols(), gallery_ids.len());
        SimilarityMatrix { scores, query_ids, gallery_ids }
    }

    pub fn at(&self, q: usize, g: usize) -> f64 {
        self.scores.at(q, g)
    }

    /// Comma-separated grid: header row of gallery ids, one row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for g in &self.gallery_ids {
            out.push(',');
            out.push_str(&csv_field(g));
        }
        out.push('\n');
        for (qi, q) in self.query_ids.iter().enumerate() {
            out.push_str(&csv_field(q));
            for gi in 0..self.gallery_ids.len() {
                out.push(',');
                out.push_str(&format!("{}", self.at(qi, gi)));
            }
            out.push('\n');
        }
        out
    }
}
