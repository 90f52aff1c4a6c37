//! Character identities: the embedding bank built by clustering per-actor
//! face embeddings, face-track linking and labeling, and the character
//! occurrence vectors matched between query mentions and labeled tracks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::tensorio::{read_tensor, write_tensor, FormatError, Tensor};
use crate::vecmath::{cosine, dot, l2_normalize, mean_vector};

/// A linked face track within one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    pub id: usize,
    /// Index into the movie's cast list; `None` while unlabeled.
    pub actor: Option<usize>,
    /// Duration in frames.
    pub length: u32,
    /// Average-pooled, unit-norm face embedding.
    pub embedding: Tensor,
}

/// One face detection: frame number, `[x, y, w, h]` box, embedding.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub frame: usize,
    pub bbox: [f64; 4],
    pub embedding: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub name: String,
    /// Unit-norm canonical embedding (mean of the largest cluster).
    pub embedding: Tensor,
    pub cluster_size: usize,
}

/// Canonical per-actor embeddings admitted by the clustering filter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CharacterBank {
    entries: Vec<BankEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct BankParams {
    /// Average-linkage cosine-distance ceiling: clusters farther apart than
    /// this are never merged.
    pub dist_threshold: f64,
    /// Minimum size of the largest cluster for an actor to be admitted.
    pub min_cluster: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams { dist_threshold: 0.76, min_cluster: 30 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinkParams {
    pub iou_weight: f64,
    pub sim_weight: f64,
    /// Combined-score floor for linking two detections (inclusive).
    pub link_threshold: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { iou_weight: 0.5, sim_weight: 0.5, link_threshold: 0.6 }
    }
}

/// Bank-similarity floor for labeling a track (inclusive).
pub const ASSIGN_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    NoEmbeddings,
    LargestClusterTooSmall { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankSkip {
    pub name: String,
    pub reason: SkipReason,
}

/// How a query mention or a clip's labeled tracks turn into a vector over the
/// cast list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharVariant {
    OneHot,
    TrackFrequency,
    TrackLength,
}

impl CharVariant {
    pub fn name(self) -> &'static str {
        match self {
            CharVariant::OneHot => "one-hot",
            CharVariant::TrackFrequency => "track-frequency",
            CharVariant::TrackLength => "track-length",
        }
    }
}

/// Occurrence weights over a cast list.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVector {
    pub weights: Vec<f64>,
}

#[derive(Debug)]
pub enum CharError {
    DimMismatch { what: String },
    LengthMismatch { left: usize, right: usize },
    ActorIndexOutOfRange { index: usize, cast: usize },
    EmptyBank,
    BadNamesLine { line: usize },
    Io(io::Error),
    Tensor { path: PathBuf, source: FormatError },
}

impl fmt::Display for CharError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharError::DimMismatch { what } => write!(f, "embedding dimension mismatch: {what}"),
            CharError::LengthMismatch { left, right } => {
                write!(f, "character vectors have lengths {left} and {right}")
            }
            CharError::ActorIndexOutOfRange { index, cast } => {
                write!(f, "track labeled with actor {index} but cast has {cast} members")
            }
            CharError::EmptyBank => write!(f, "character bank holds no entries"),
            CharError::BadNamesLine { line } => write!(f, "malformed bank names file at line {line}"),
            CharError::Io(e) => write!(f, "i/o error: {e}"),
            CharError::Tensor { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CharError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CharError::Io(e) => Some(e),
            CharError::Tensor { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<io::Error> for CharError {
    fn from(e: io::Error) -> Self {
        CharError::Io(e)
    }
}

/// Intersection-over-union of two `[x, y, w, h]` boxes; 0 when the union is
/// degenerate.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average-linkage agglomerative clustering under cosine distance.
///
/// Maintains a cluster-to-cluster distance matrix updated with the
/// average-linkage recurrence; merges the closest pair (ties broken toward
/// the lowest index pair) until the closest pair is farther apart than
/// `dist_threshold`. Returns member-index clusters.
pub fn cluster_embeddings(embeddings: &[Tensor], dist_threshold: f64) -> Vec<Vec<usize>> {
    let n = embeddings.len();
    if n == 0 {
        return Vec::new();
    }
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine(embeddings[i].data(), embeddings[j].data());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                if best.map_or(true, |(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d > dist_threshold {
            break;
        }
        let ni = members[i].as_ref().unwrap().len() as f64;
        let nj = members[j].as_ref().unwrap().len() as f64;
        for k in 0..n {
            if k == i || k == j || members[k].is_none() {
                continue;
            }
            let merged = (ni * dist[i][k] + nj * dist[j][k]) / (ni + nj);
            dist[i][k] = merged;
            dist[k][i] = merged;
        }
        let moved = members[j].take().unwrap();
        members[i].as_mut().unwrap().extend(moved);
    }
    members.into_iter().flatten().collect()
}

/// Builds the character embedding bank.
///
/// Each actor's embeddings are clustered; the actor is admitted when the
/// largest cluster reaches `min_cluster` members, with the canonical
/// embedding being the unit-normalized mean of that cluster. Actors with no
/// embeddings or with too fragmented clusters are reported in the skip list.
pub fn build_bank(
    actors: &[(String, Vec<Tensor>)],
    params: &BankParams,
) -> Result<(CharacterBank, Vec<BankSkip>), CharError> {
    let mut dim: Option<usize> = None;
    for (name, embs) in actors {
        for e in embs {
            let d = e.len();
            match dim {
                None => dim = Some(d),
                Some(expect) if expect != d => {
                    return Err(CharError::DimMismatch {
                        what: format!("actor {name} has a {d}-d embedding, expected {expect}-d"),
                    })
                }
                _ => {}
            }
        }
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (name, embs) in actors {
        if embs.is_empty() {
            skipped.push(BankSkip { name: name.clone(), reason: SkipReason::NoEmbeddings });
            continue;
        }
        let clusters = cluster_embeddings(embs, params.dist_threshold);
        let largest = clusters.iter().max_by_key(|c| c.len()).unwrap();
        if largest.len() < params.min_cluster {
            skipped.push(BankSkip {
                name: name.clone(),
                reason: SkipReason::LargestClusterTooSmall { size: largest.len() },
            });
            continue;
        }
        let rows: Vec<&[f64]> = largest.iter().map(|&i| embs[i].data()).collect();
        let mut canon = mean_vector(&rows);
        l2_normalize(&mut canon);
        entries.push(BankEntry {
            name: name.clone(),
            embedding: Tensor::vector(canon),
            cluster_size: largest.len(),
        });
    }
    Ok((CharacterBank { entries }, skipped))
}

impl CharacterBank {
    pub fn from_entries(entries: Vec<BankEntry>) -> Self {
        CharacterBank { entries }
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `<stem>.cmdt` (entry embeddings, one row each) and
    /// `<stem>.names` (tab-separated name and cluster size per line).
    pub fn save(&self, stem: &Path) -> Result<(), CharError> {
        if self.entries.is_empty() {
            return Err(CharError::EmptyBank);
        }
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|e| e.embedding.data().to_vec()).collect();
        let tensor = Tensor::from_rows(&rows);
        let tensor_path = stem.with_extension("cmdt");
        write_tensor(&tensor, &tensor_path)
            .map_err(|source| CharError::Tensor { path: tensor_path.clone(), source })?;
        let mut names = String::new();
        for e in &self.entries {
            names.push_str(&format!("{}\t{}\n", e.name, e.cluster_size));
        }
        fs::write(stem.with_extension("names"), names)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, CharError> {
        let tensor_path = stem.with_extension("cmdt");
        let tensor = read_tensor(&tensor_path)
            .map_err(|source| CharError::Tensor { path: tensor_path.clone(), source })?;
        let text = fs::read_to_string(stem.with_extension("names"))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, size) = line.split_once('\t').ok_or(CharError::BadNamesLine { line: i + 1 })?;
            let cluster_size: usize =
                size.parse().map_err(|_| CharError::BadNamesLine { line: i + 1 })?;
            entries.push((name.to_string(), cluster_size));
        }
        if tensor.rank() != 2 || tensor.rows() != entries.len() {
            return Err(CharError::DimMismatch {
                what: format!(
                    "bank tensor holds {} rows but names file lists {} entries",
                    if tensor.rank() == 2 { tensor.rows() } else { 0 },
                    entries.len()
                ),
            });
        }
        let entries = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, cluster_size))| BankEntry {
                name,
                embedding: Tensor::vector(tensor.row(i).to_vec()),
                cluster_size,
            })
            .collect();
        Ok(CharacterBank { entries })
    }
}

/// Links per-frame detections into tracks.
///
/// Detections in consecutive frames are matched greedily by descending
/// combined score `iou_weight * IoU + sim_weight * cosine`, accepting pairs
/// at or above `link_threshold`; a frame gap always terminates a track. The
/// returned tracks carry unit-normalized mean embeddings, lengths in frames,
/// and ids in creation order, and start out unlabeled.
pub fn link_tracks(
    detections: &[DetectionRecord],
    params: &LinkParams,
) -> Result<Vec<FaceTrack>, CharError> {
    if let Some(first) = detections.first() {
        let d = first.embedding.len();
        for det in detections {
            if det.embedding.len() != d {
                return Err(CharError::DimMismatch {
                    what: format!(
                        "detection at frame {} has a {}-d embedding, expected {d}-d",
                        det.frame,
                        det.embedding.len()
                    ),
                });
            }
        }
    }
    let mut by_frame: BTreeMap<usize, Vec<&DetectionRecord>> = BTreeMap::new();
    for det in detections {
        by_frame.entry(det.frame).or_default().push(det);
    }

    struct Build<'a> {
        last_box: [f64; 4],
        last_emb: &'a [f64],
        members: Vec<&'a [f64]>,
    }
    let mut builds: Vec<Build> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut prev_frame: Option<usize> = None;

    for (&frame, dets) in &by_frame {
        let linkable: Vec<usize> =
            if prev_frame == Some(frame.wrapping_sub(1)) { active.clone() } else { Vec::new() };

        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, &t) in linkable.iter().enumerate() {
            for (di, det) in dets.iter().enumerate() {
                let score = params.iou_weight * iou(&builds[t].last_box, &det.bbox)
                    + params.sim_weight * cosine(builds[t].last_emb, det.embedding.data());
                if score >= params.link_threshold {
                    pairs.push((score, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut track_taken = vec![false; linkable.len()];
        let mut det_track: Vec<Option<usize>> = vec![None; dets.len()];
        for (_, ti, di) in pairs {
            if track_taken[ti] || det_track[di].is_some() {
                continue;
            }
            track_taken[ti] = true;
            det_track[di] = Some(linkable[ti]);
        }

        let mut next_active = Vec::new();
        for (di, det) in dets.iter().enumerate() {
            let t = match det_track[di] {
                Some(t) => {
                    let b = &mut builds[t];
                    b.last_box = det.bbox;
                    b.last_emb = det.embedding.data();
                    b.members.push(det.embedding.data());
                    t
                }
                None => {
                    builds.push(Build {
                        last_box: det.bbox,
                        last_emb: det.embedding.data(),
                        members: vec![det.embedding.data()],
                    });
                    builds.len() - 1
                }
            };
            next_active.push(t);
        }
        active = next_active;
        prev_frame = Some(frame);
    }

    Ok(builds
        .into_iter()
        .enumerate()
        .map(|(id, b)| {
            let mut emb = mean_vector(&b.members);
            l2_normalize(&mut emb);
            FaceTrack {
                id,
                actor: None,
                length: b.members.len() as u32,
                embedding: Tensor::vector(emb),
            }
        })
        .collect())
}

/// Labels tracks against the bank, restricted to the given cast.
///
/// A track takes the cast index of its most similar admitted cast member when
/// that cosine similarity reaches `threshold` (inclusive); otherwise it stays
/// unlabeled. Cast members missing from the bank are simply not candidates.
pub fn label_tracks(
    tracks: &[FaceTrack],
    bank: &CharacterBank,
    cast: &[String],
    threshold: f64,
) -> Result<Vec<FaceTrack>, CharError> {
    let candidates: Vec<(usize, &BankEntry)> = cast
        .iter()
        .enumerate()
        .filter_map(|(i, name)| bank.find(name).map(|e| (i, e)))
        .collect();
    if let Some((_, entry)) = candidates.first() {
        let d = entry.embedding.len();
        for t in tracks {
            if t.embedding.len() != d {
                return Err(CharError::DimMismatch {
                    what: format!(
                        "track {} has a {}-d embedding but the bank is {d}-d",
                        t.id,
                        t.embedding.len()
                    ),
                });
            }
        }
    }
    Ok(tracks
        .iter()
        .map(|t| {
            let mut best: Option<(usize, f64)> = None;
            for &(cast_idx, entry) in &candidates {
                let sim = cosine(t.embedding.data(), entry.embedding.data());
                if best.map_or(true, |(_, s)| sim > s) {
                    best = Some((cast_idx, sim));
                }
            }
            let actor = best.and_then(|(idx, sim)| (sim >= threshold).then_some(idx));
            FaceTrack { actor, ..t.clone() }
        })
        .collect())
}

/// One-hot cast vector for the actors a query mentions.
///
/// Matching is exact but case-insensitive; names absent from the cast are
/// returned for the caller to warn about. Duplicate mentions count once.
pub fn encode_query_chars(mentions: &[String], cast: &[String]) -> (CharVector, Vec<String>) {
    let lowered: Vec<String> = cast.iter().map(|c| c.to_lowercase()).collect();
    let mut weights = vec![0.0; cast.len()];
    let mut unknown = Vec::new();
    for m in mentions {
        match lowered.iter().position(|c| *c == m.to_lowercase()) {
            Some(i) => weights[i] = 1.0,
            None => unknown.push(m.clone()),
        }
    }
    (CharVector { weights }, unknown)
}

/// Cast vector for a clip's labeled tracks under the chosen variant.
///
/// Unlabeled tracks are excluded from numerators and denominators alike; a
/// clip with no labeled tracks encodes to the zero vector.
pub fn encode_video_chars(
    tracks: &[FaceTrack],
    cast_len: usize,
    variant: CharVariant,
) -> Result<CharVector, CharError> {
    let mut weights = vec![0.0; cast_len];
    let labeled: Vec<&FaceTrack> = tracks.iter().filter(|t| t.actor.is_some()).collect();
    for t in &labeled {
        let idx = t.actor.unwrap();
        if idx >= cast_len {
            return Err(CharError::ActorIndexOutOfRange { index: idx, cast: cast_len });
        }
    }
    match variant {
        CharVariant::OneHot => {
            for t in &labeled {
                weights[t.actor.unwrap()] = 1.0;
            }
        }
        CharVariant::TrackFrequency => {
            let total = labeled.len() as f64;
            if total > 0.0 {
                for t in &labeled {
                    weights[t.actor.unwrap()] += 1.0 / total;
                }
            }
        }
        CharVariant::TrackLength => {
            let total: f64 = labeled.iter().map(|t| t.length as f64).sum();
            if total > 0.0 {
                for t in &labeled {
                    weights[t.actor.unwrap()] += t.length as f64 / total;
                }
            }
        }
    }
    Ok(CharVector { weights })
}

/// Inner product of two cast vectors.
pub fn char_similarity(a: &CharVector, b: &CharVector) -> Result<f64, CharError> {
    if a.weights.len() != b.weights.len() {
        return Err(CharError::LengthMismatch { left: a.weights.len(), right: b.weights.len() });
    }
    Ok(dot(&a.weights, &b.weights))
}

/// One-hot cast vector from already-resolved cast indices. Duplicates
/// count once.
pub fn one_hot_chars(indices: &[usize], cast_len: usize) -> Result<CharVector, CharError> {
    let mut weights = vec![0.0; cast_len];
    for &i in indices {
        if i >= cast_len {
            return Err(CharError::ActorIndexOutOfRange { index: i, cast: cast_len });
        }
        weights[i] = 1.0;
    }
    Ok(CharVector { weights })
}

/// Concatenated cast-index space over several movies, so cast vectors from
/// different movies become comparable in one batch. Vectors lifted from
/// different movies occupy disjoint blocks, making their inner product 0.
#[derive(Debug, Clone)]
pub struct CastIndex {
    offsets: std::collections::BTreeMap<String, (usize, usize)>,
    total: usize,
}

impl CastIndex {
    /// `movies` yields (movie id, cast size) pairs; order fixes the blocks.
    pub fn build<'a, I>(movies: I) -> CastIndex
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let mut offsets = std::collections::BTreeMap::new();
        let mut total = 0;
        for (id, cast_len) in movies {
            offsets.insert(id.to_string(), (total, cast_len));
            total += cast_len;
        }
        CastIndex { offsets, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Embeds a movie-local cast vector into the global space.
    pub fn lift(&self, movie_id: &str, local: &CharVector) -> Result<CharVector, CharError> {
        let &(offset, cast_len) = self
            .offsets
            .get(movie_id)
            .ok_or_else(|| CharError::DimMismatch { what: format!("unknown movie {movie_id:?}") })?;
        if local.weights.len() != cast_len {
            return Err(CharError::LengthMismatch { left: local.weights.len(), right: cast_len });
        }
        let mut weights = vec![0.0; self.total];
        weights[offset..offset + cast_len].copy_from_slice(&local.weights);
        Ok(CharVector { weights })
    }
}
