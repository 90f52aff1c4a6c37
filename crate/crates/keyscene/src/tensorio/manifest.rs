//! Line-delimited dataset manifests.
//!
//! A manifest is UTF-8 text, one record per line, fields separated by tabs.
//! The first field names the record kind:
//!
//! ```text
//! config  d_text=<dim>  experts=<name>:<dim>|<name>:<dim>...
//! movie   <id>  [cast=a|b]  [plot=s1|s2]  [plot_emb=<path>]  [duration=<secs>]
//! clip    <movie>  <index>  desc=<path>  [expert:<name>=<path>|ABSENT]...
//!         [tracks=<path>  track_meta=<len>:<actor|->|...]  [mentions=i|j]
//!         [duration=<secs>]
//! split   <movie>  <train|val|test>
//! ```
//!
//! Blank lines and lines starting with `#` are skipped. Tensor paths are
//! relative to the manifest's directory. Records may appear in any order;
//! loading resolves and validates the whole file: every clip and split must
//! name a declared movie, each movie gets exactly one split label, clip
//! indices are unique and contiguous from zero per movie, and every tensor
//! must match the dimensions the config record declares. Feature streams a
//! clip does not carry are recorded as the explicit `ABSENT` state, never as
//! zero tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Component, Path, PathBuf};

use crate::characters::FaceTrack;
use crate::tensorio::format::{read_tensor, write_tensor, FormatError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A feature stream's name and per-frame dimensionality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSpec {
    pub name: String,
    pub dim: usize,
}

/// A clip's feature stream: present with frames, or explicitly absent.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertFeature {
    Present(Tensor),
    Absent,
}

impl ExpertFeature {
    pub fn as_present(&self) -> Option<&Tensor> {
        match self {
            ExpertFeature::Present(t) => Some(t),
            ExpertFeature::Absent => None,
        }
    }

    pub fn is_present(&self) -> bool {
        matches!(self, ExpertFeature::Present(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Movie {
    pub id: String,
    pub cast: Vec<String>,
    pub plot: Vec<String>,
    /// Plot sentence embeddings, one row per sentence.
    pub plot_emb: Option<Tensor>,
    pub duration: Option<f64>,
    pub split: Split,
}

/// One key scene: its feature streams, description token embeddings, face
/// tracks, and mentioned cast indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub movie_id: String,
    pub clip_index: usize,
    pub experts: BTreeMap<String, ExpertFeature>,
    /// Description token embeddings, one row per token.
    pub description: Tensor,
    pub face_tracks: Vec<FaceTrack>,
    /// Indices into the movie's cast list.
    pub mentions: Vec<usize>,
    pub duration: Option<f64>,
}

impl ClipRecord {
    pub fn expert(&self, name: &str) -> Option<&Tensor> {
        self.experts.get(name).and_then(|e| e.as_present())
    }
}

/// An in-memory dataset: read-only after construction, clips sorted by
/// `(movie_id, clip_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    experts: Vec<ExpertSpec>,
    d_text: usize,
    movies: Vec<Movie>,
    clips: Vec<ClipRecord>,
    movie_clip_ranges: BTreeMap<String, Range<usize>>,
}

#[derive(Debug)]
pub enum ManifestError {
    Io(io::Error),
    Tensor { path: PathBuf, source: FormatError },
    Parse { line: usize, msg: String },
    MissingConfig,
    DuplicateMovie { movie: String },
    DanglingMovie { movie: String, line: usize },
    DuplicateClip { movie: String, clip_index: usize },
    SplitConflict { movie: String },
    MissingSplit { movie: String },
    NonContiguousClips { movie: String },
    Invalid { msg: String },
}

impl fmt::Display for ManifestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestError::Io(e) => write!(f, "i/o error: {e}"),
            ManifestError::Tensor { path, source } => write!(f, "{}: {source}", path.display()),
            ManifestError::Parse { line, msg } => write!(f, "line {line}: {msg}"),
            ManifestError::MissingConfig => write!(f, "manifest has no config record"),
            ManifestError::DuplicateMovie { movie } => write!(f, "movie {movie} declared twice"),
            ManifestError::DanglingMovie { movie, line } => {
                write!(f, "line {line} references undeclared movie {movie}")
            }
            ManifestError::DuplicateClip { movie, clip_index } => {
                write!(f, "movie {movie} declares clip {clip_index} twice")
            }
            ManifestError::SplitConflict { movie } => {
                write!(f, "movie {movie} is assigned to more than one split")
            }
            ManifestError::MissingSplit { movie } => write!(f, "movie {movie} has no split record"),
            ManifestError::NonContiguousClips { movie } => {
                write!(f, "movie {movie} clip indices are not contiguous from 0")
            }
            ManifestError::Invalid { msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ManifestError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ManifestError::Io(e) => Some(e),
            ManifestError::Tensor { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<io::Error> for ManifestError {
    fn from(e: io::Error) -> Self {
        ManifestError::Io(e)
    }
}

impl DatasetManifest {
    /// Builds and validates a manifest from parts. Clips are sorted; all the
    /// structural rules the loader enforces apply here too.
    pub fn from_parts(
        experts: Vec<ExpertSpec>,
        d_text: usize,
        movies: Vec<Movie>,
        mut clips: Vec<ClipRecord>,
    ) -> Result<Self, ManifestError> {
        let mut seen = BTreeMap::new();
        for m in &movies {
            if seen.insert(m.id.clone(), ()).is_some() {
                return Err(ManifestError::DuplicateMovie { movie: m.id.clone() });
            }
        }
        clips.sort_by(|a, b| {
            a.movie_id.cmp(&b.movie_id).then(a.clip_index.cmp(&b.clip_index))
        });
        let mut movie_clip_ranges = BTreeMap::new();
        let mut start = 0;
        for (i, clip) in clips.iter().enumerate() {
            if !seen.contains_key(&clip.movie_id) {
                return Err(ManifestError::DanglingMovie { movie: clip.movie_id.clone(), line: 0 });
            }
            let new_movie = i == 0 || clips[i - 1].movie_id != clip.movie_id;
            if new_movie {
                if i > 0 {
                    movie_clip_ranges.insert(clips[i - 1].movie_id.clone(), start..i);
                }
                start = i;
            }
            let local = i - start;
            if clip.clip_index < local {
                return Err(ManifestError::DuplicateClip {
                    movie: clip.movie_id.clone(),
                    clip_index: clip.clip_index,
                });
            }
            if clip.clip_index > local {
                return Err(ManifestError::NonContiguousClips { movie: clip.movie_id.clone() });
            }
        }
        if let Some(last) = clips.last() {
            movie_clip_ranges.insert(last.movie_id.clone(), start..clips.len());
        }

        let manifest = DatasetManifest { experts, d_text, movies, clips, movie_clip_ranges };
        manifest.validate_tensors()?;
        Ok(manifest)
    }

    fn validate_tensors(&self) -> Result<(), ManifestError> {
        let dims: BTreeMap<&str, usize> =
            self.experts.iter().map(|e| (e.name.as_str(), e.dim)).collect();
        for m in &self.movies {
            if let Some(pe) = &m.plot_emb {
                if pe.rank() != 2 || pe.cols() != self.d_text {
                    return Err(ManifestError::Invalid {
                        msg: format!(
                            "movie {}: plot embeddings have shape {:?}, expected [*, {}]",
                            m.id,
                            pe.shape(),
                            self.d_text
                        ),
                    });
                }
                if !m.plot.is_empty() && pe.rows() != m.plot.len() {
                    return Err(ManifestError::Invalid {
                        msg: format!(
                            "movie {}: {} plot sentences but {} embedding rows",
                            m.id,
                            m.plot.len(),
                            pe.rows()
                        ),
                    });
                }
            }
        }
        for c in &self.clips {
            if c.description.rank() != 2 || c.description.cols() != self.d_text {
                return Err(ManifestError::Invalid {
                    msg: format!(
                        "clip {}/{}: description has shape {:?}, expected [*, {}]",
                        c.movie_id,
                        c.clip_index,
                        c.description.shape(),
                        self.d_text
                    ),
                });
            }
            for (name, feat) in &c.experts {
                let Some(&dim) = dims.get(name.as_str()) else {
                    return Err(ManifestError::Invalid {
                        msg: format!("clip {}/{}: undeclared expert {name}", c.movie_id, c.clip_index),
                    });
                };
                if let ExpertFeature::Present(t) = feat {
                    if t.rank() != 2 || t.cols() != dim {
                        return Err(ManifestError::Invalid {
                            msg: format!(
                                "clip {}/{}: expert {name} has shape {:?}, expected [*, {dim}]",
                                c.movie_id,
                                c.clip_index,
                                t.shape()
                            ),
                        });
                    }
                }
            }
            let cast_len = self.movie(&c.movie_id).unwrap().cast.len();
            for &m in &c.mentions {
                if m >= cast_len {
                    return Err(ManifestError::Invalid {
                        msg: format!(
                            "clip {}/{}: mention index {m} outside cast of {cast_len}",
                            c.movie_id, c.clip_index
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn experts(&self) -> &[ExpertSpec] {
        &self.experts
    }

    pub fn expert_dim(&self, name: &str) -> Option<usize> {
        self.experts.iter().find(|e| e.name == name).map(|e| e.dim)
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn movies(&self) -> &[Movie] {
        &self.movies
    }

    pub fn movie(&self, id: &str) -> Option<&Movie> {
        self.movies.iter().find(|m| m.id == id)
    }

    /// All clips, sorted by `(movie_id, clip_index)`.
    pub fn clips(&self) -> &[ClipRecord] {
        &self.clips
    }

    /// The clips of one movie, ordered by clip index.
    pub fn movie_clips(&self, id: &str) -> &[ClipRecord] {
        match self.movie_clip_ranges.get(id) {
            Some(r) => &self.clips[r.clone()],
            None => &[],
        }
    }

    /// Global index range of one movie's clips within [`Self::clips`].
    pub fn movie_clip_range(&self, id: &str) -> Range<usize> {
        self.movie_clip_ranges.get(id).cloned().unwrap_or(0..0)
    }

    /// Global clip indices belonging to `split`.
    pub fn split_clips(&self, split: Split) -> Vec<usize> {
        let in_split: BTreeMap<&str, ()> = self
            .movies
            .iter()
            .filter(|m| m.split == split)
            .map(|m| (m.id.as_str(), ()))
            .collect();
        (0..self.clips.len())
            .filter(|&i| in_split.contains_key(self.clips[i].movie_id.as_str()))
            .collect()
    }
}

fn split_kv(field: &str, line: usize) -> Result<(&str, &str), ManifestError> {
    field.split_once('=').ok_or_else(|| ManifestError::Parse {
        line,
        msg: format!("expected key=value field, got {field:?}"),
    })
}

fn parse_list(value: &str) -> Vec<String> {
    if value.is_empty() {
        Vec::new()
    } else {
        value.split('|').map(str::to_string).collect()
    }
}

fn checked_rel_path(value: &str, line: usize) -> Result<PathBuf, ManifestError> {
    let p = PathBuf::from(value);
    let ok = p.is_relative()
        && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !ok {
        return Err(ManifestError::Parse {
            line,
            msg: format!("tensor path {value:?} must be relative and stay inside the dataset"),
        });
    }
    Ok(p)
}

fn load_rel_tensor(base: &Path, rel: &Path) -> Result<Tensor, ManifestError> {
    let path = base.join(rel);
    read_tensor(&path).map_err(|source| ManifestError::Tensor { path, source })
}

/// Loads and validates a manifest, reading every referenced tensor eagerly.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    struct RawMovie {
        cast: Vec<String>,
        plot: Vec<String>,
        plot_emb: Option<PathBuf>,
        duration: Option<f64>,
    }
    struct RawClip {
        line: usize,
        movie: String,
        index: usize,
        desc: PathBuf,
        experts: Vec<(String, Option<PathBuf>)>,
        tracks: Option<PathBuf>,
        track_meta: Vec<(u32, Option<usize>)>,
        mentions: Vec<usize>,
        duration: Option<f64>,
    }

    let mut config: Option<(usize, Vec<ExpertSpec>)> = None;
    let mut raw_movies: Vec<(String, RawMovie)> = Vec::new();
    let mut raw_clips: Vec<RawClip> = Vec::new();
    let mut raw_splits: Vec<(String, Split, usize)> = Vec::new();

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.is_empty() || raw_line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw_line.split('\t').collect();
        let parse_err = |msg: String| ManifestError::Parse { line, msg };
        match fields[0] {
            "config" => {
                let mut d_text = None;
                let mut experts = Vec::new();
                for field in &fields[1..] {
                    let (k, v) = split_kv(field, line)?;
                    match k {
                        "d_text" => {
                            d_text = Some(
                                v.parse::<usize>()
                                    .map_err(|_| parse_err(format!("bad d_text {v:?}")))?,
                            )
                        }
                        "experts" => {
                            for item in parse_list(v) {
                                let (name, dim) = item
                                    .split_once(':')
                                    .ok_or_else(|| parse_err(format!("bad expert spec {item:?}")))?;
                                let dim = dim
                                    .parse::<usize>()
                                    .map_err(|_| parse_err(format!("bad expert dim in {item:?}")))?;
                                experts.push(ExpertSpec { name: name.to_string(), dim });
                            }
                        }
                        other => return Err(parse_err(format!("unknown config key {other:?}"))),
                    }
                }
                let d_text =
                    d_text.ok_or_else(|| parse_err("config record lacks d_text".to_string()))?;
                if config.replace((d_text, experts)).is_some() {
                    return Err(parse_err("second config record".to_string()));
                }
            }
            "movie" => {
                let id = fields
                    .get(1)
                    .ok_or_else(|| parse_err("movie record lacks an id".to_string()))?
                    .to_string();
                let mut raw = RawMovie {
                    cast: Vec::new(),
                    plot: Vec::new(),
                    plot_emb: None,
                    duration: None,
                };
                for field in &fields[2..] {
                    let (k, v) = split_kv(field, line)?;
                    match k {
                        "cast" => raw.cast = parse_list(v),
                        "plot" => raw.plot = parse_list(v),
                        "plot_emb" => raw.plot_emb = Some(checked_rel_path(v, line)?),
                        "duration" => {
                            raw.duration = Some(
                                v.parse::<f64>()
                                    .map_err(|_| parse_err(format!("bad duration {v:?}")))?,
                            )
                        }
                        other => return Err(parse_err(format!("unknown movie key {other:?}"))),
                    }
                }
                if raw_movies.iter().any(|(mid, _)| *mid == id) {
                    return Err(ManifestError::DuplicateMovie { movie: id });
                }
                raw_movies.push((id, raw));
            }
            "clip" => {
                let movie = fields
                    .get(1)
                    .ok_or_else(|| parse_err("clip record lacks a movie id".to_string()))?
                    .to_string();
                let index: usize = fields
                    .get(2)
                    .ok_or_else(|| parse_err("clip record lacks an index".to_string()))?
                    .parse()
                    .map_err(|_| parse_err("bad clip index".to_string()))?;
                let mut desc = None;
                let mut clip = RawClip {
                    line,
                    movie,
                    index,
                    desc: PathBuf::new(),
                    experts: Vec::new(),
                    tracks: None,
                    track_meta: Vec::new(),
                    mentions: Vec::new(),
                    duration: None,
                };
                for field in &fields[3..] {
                    let (k, v) = split_kv(field, line)?;
                    if let Some(expert) = k.strip_prefix("expert:") {
                        let feat =
                            if v == "ABSENT" { None } else { Some(checked_rel_path(v, line)?) };
                        clip.experts.push((expert.to_string(), feat));
                        continue;
                    }
                    match k {
                        "desc" => desc = Some(checked_rel_path(v, line)?),
                        "tracks" => clip.tracks = Some(checked_rel_path(v, line)?),
                        "track_meta" => {
                            for item in parse_list(v) {
                                let (len, actor) = item
                                    .split_once(':')
                                    .ok_or_else(|| parse_err(format!("bad track meta {item:?}")))?;
                                let len = len
                                    .parse::<u32>()
                                    .map_err(|_| parse_err(format!("bad track length {len:?}")))?;
                                let actor = if actor == "-" {
                                    None
                                } else {
                                    Some(actor.parse::<usize>().map_err(|_| {
                                        parse_err(format!("bad track actor {actor:?}"))
                                    })?)
                                };
                                clip.track_meta.push((len, actor));
                            }
                        }
                        "mentions" => {
                            for item in parse_list(v) {
                                clip.mentions.push(
                                    item.parse::<usize>()
                                        .map_err(|_| parse_err(format!("bad mention {item:?}")))?,
                                );
                            }
                        }
                        "duration" => {
                            clip.duration = Some(
                                v.parse::<f64>()
                                    .map_err(|_| parse_err(format!("bad duration {v:?}")))?,
                            )
                        }
                        other => return Err(parse_err(format!("unknown clip key {other:?}"))),
                    }
                }
                clip.desc =
                    desc.ok_or_else(|| parse_err("clip record lacks a desc field".to_string()))?;
                raw_clips.push(clip);
            }
            "split" => {
                let movie = fields
                    .get(1)
                    .ok_or_else(|| parse_err("split record lacks a movie id".to_string()))?
                    .to_string();
                let label = fields
                    .get(2)
                    .ok_or_else(|| parse_err("split record lacks a label".to_string()))?;
                let split = Split::parse(label)
                    .ok_or_else(|| parse_err(format!("unknown split label {label:?}")))?;
                raw_splits.push((movie, split, line));
            }
            other => return Err(parse_err(format!("unknown record kind {other:?}"))),
        }
    }

    let (d_text, experts) = config.ok_or(ManifestError::MissingConfig)?;

    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    for (movie, split, line) in raw_splits {
        if !raw_movies.iter().any(|(id, _)| *id == movie) {
            return Err(ManifestError::DanglingMovie { movie, line });
        }
        if let Some(prev) = splits.insert(movie.clone(), split) {
            if prev != split {
                return Err(ManifestError::SplitConflict { movie });
            }
        }
    }

    let mut movies = Vec::new();
    for (id, raw) in &raw_movies {
        let split = *splits
            .get(id)
            .ok_or_else(|| ManifestError::MissingSplit { movie: id.clone() })?;
        let plot_emb = match &raw.plot_emb {
            Some(rel) => Some(load_rel_tensor(&base, rel)?),
            None => None,
        };
        movies.push(Movie {
            id: id.clone(),
            cast: raw.cast.clone(),
            plot: raw.plot.clone(),
            plot_emb,
            duration: raw.duration,
            split,
        });
    }

    let mut clips = Vec::new();
    let mut seen_clip: BTreeMap<(String, usize), ()> = BTreeMap::new();
    for raw in raw_clips {
        if !raw_movies.iter().any(|(id, _)| *id == raw.movie) {
            return Err(ManifestError::DanglingMovie { movie: raw.movie, line: raw.line });
        }
        if seen_clip.insert((raw.movie.clone(), raw.index), ()).is_some() {
            return Err(ManifestError::DuplicateClip { movie: raw.movie, clip_index: raw.index });
        }
        let description = load_rel_tensor(&base, &raw.desc)?;
        let mut expert_map = BTreeMap::new();
        for (name, path) in raw.experts {
            let feat = match path {
                Some(rel) => ExpertFeature::Present(load_rel_tensor(&base, &rel)?),
                None => ExpertFeature::Absent,
            };
            expert_map.insert(name, feat);
        }
        // Declared experts a clip does not list are treated as absent.
        for spec in &experts {
            expert_map.entry(spec.name.clone()).or_insert(ExpertFeature::Absent);
        }
        let face_tracks = match raw.tracks {
            Some(rel) => {
                let t = load_rel_tensor(&base, &rel)?;
                if t.rank() != 2 || t.rows() != raw.track_meta.len() {
                    return Err(ManifestError::Parse {
                        line: raw.line,
                        msg: format!(
                            "track tensor holds {} rows but track_meta lists {}",
                            if t.rank() == 2 { t.rows() } else { 0 },
                            raw.track_meta.len()
                        ),
                    });
                }
                raw.track_meta
                    .iter()
                    .enumerate()
                    .map(|(i, &(length, actor))| FaceTrack {
                        id: i,
                        actor,
                        length,
                        embedding: Tensor::vector(t.row(i).to_vec()),
                    })
                    .collect()
            }
            None if raw.track_meta.is_empty() => Vec::new(),
            None => {
                return Err(ManifestError::Parse {
                    line: raw.line,
                    msg: "track_meta given without a tracks tensor".to_string(),
                })
            }
        };
        clips.push(ClipRecord {
            movie_id: raw.movie,
            clip_index: raw.index,
            experts: expert_map,
            description,
            face_tracks,
            mentions: raw.mentions,
            duration: raw.duration,
        });
    }

    DatasetManifest::from_parts(experts, d_text, movies, clips)
}

fn encodable(value: &str) -> Result<(), ManifestError> {
    if value.contains('\t') || value.contains('|') || value.contains('\n') {
        return Err(ManifestError::Invalid {
            msg: format!("{value:?} cannot be written to a manifest (reserved separator)"),
        });
    }
    Ok(())
}

/// Writes `manifest.txt` plus a `tensors/` directory under `dir`.
///
/// Output is deterministic: records are emitted in manifest order with fixed
/// file naming, so identical manifests produce byte-identical trees.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<(), ManifestError> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors)?;
    let mut out = String::new();

    let write_t = |t: &Tensor, name: &str| -> Result<String, ManifestError> {
        let path = tensors.join(name);
        write_tensor(t, &path).map_err(|source| ManifestError::Tensor { path, source })?;
        Ok(format!("tensors/{name}"))
    };

    let expert_list: Vec<String> =
        manifest.experts.iter().map(|e| format!("{}:{}", e.name, e.dim)).collect();
    out.push_str(&format!(
        "config\td_text={}\texperts={}\n",
        manifest.d_text,
        expert_list.join("|")
    ));

    for m in &manifest.movies {
        for s in m.cast.iter().chain(&m.plot) {
            encodable(s)?;
        }
        encodable(&m.id)?;
        out.push_str(&format!("movie\t{}", m.id));
        if !m.cast.is_empty() {
            out.push_str(&format!("\tcast={}", m.cast.join("|")));
        }
        if !m.plot.is_empty() {
            out.push_str(&format!("\tplot={}", m.plot.join("|")));
        }
        if let Some(pe) = &m.plot_emb {
            let rel = write_t(pe, &format!("{}_plot.cmdt", m.id))?;
            out.push_str(&format!("\tplot_emb={rel}"));
        }
        if let Some(d) = m.duration {
            out.push_str(&format!("\tduration={d}"));
        }
        out.push('\n');
        out.push_str(&format!("split\t{}\t{}\n", m.id, m.split.name()));

        for c in manifest.movie_clips(&m.id) {
            let stem = format!("{}_c{:03}", c.movie_id, c.clip_index);
            out.push_str(&format!("clip\t{}\t{}", c.movie_id, c.clip_index));
            let rel = write_t(&c.description, &format!("{stem}_desc.cmdt"))?;
            out.push_str(&format!("\tdesc={rel}"));
            for (name, feat) in &c.experts {
                encodable(name)?;
                match feat {
                    ExpertFeature::Present(t) => {
                        let rel = write_t(t, &format!("{stem}_{name}.cmdt"))?;
                        out.push_str(&format!("\texpert:{name}={rel}"));
                    }
                    ExpertFeature::Absent => out.push_str(&format!("\texpert:{name}=ABSENT")),
                }
            }
            if !c.face_tracks.is_empty() {
                let rows: Vec<Vec<f64>> =
                    c.face_tracks.iter().map(|t| t.embedding.data().to_vec()).collect();
                let rel = write_t(&Tensor::from_rows(&rows), &format!("{stem}_tracks.cmdt"))?;
                out.push_str(&format!("\ttracks={rel}"));
                let meta: Vec<String> = c
                    .face_tracks
                    .iter()
                    .map(|t| match t.actor {
                        Some(a) => format!("{}:{a}", t.length),
                        None => format!("{}:-", t.length),
                    })
                    .collect();
                out.push_str(&format!("\ttrack_meta={}", meta.join("|")));
            }
            if !c.mentions.is_empty() {
                let ms: Vec<String> = c.mentions.iter().map(|m| m.to_string()).collect();
                out.push_str(&format!("\tmentions={}", ms.join("|")));
            }
            if let Some(d) = c.duration {
                out.push_str(&format!("\tduration={d}"));
            }
            out.push('\n');
        }
    }

    fs::write(dir.join("manifest.txt"), out)?;
    Ok(())
}
