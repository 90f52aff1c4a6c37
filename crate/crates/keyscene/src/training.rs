//! Max-margin training: bidirectional ranking loss over in-batch score
//! matrices, Adam updates, seeded shuffling, and validation-based early
//! stopping.
//!
//! Every run is a pure function of (manifest, config): parameter init,
//! batch order, and updates all derive from the config seed, so two runs
//! with the same inputs produce bitwise-identical parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Bound, NodeId, ParamStore, Tape};
use crate::characters::{
    encode_video_chars, one_hot_chars, CastIndex, CharError, CharVariant, CharVector,
};
use crate::encoders::{encode_clip, encode_clip_graph, encode_text, encode_text_graph, ClipNodes, EncodeError, TextEncoding};
use crate::model::{init_params, ModelConfig, ModelConfigError};
use crate::retrieval::{score, ContextWindow, ScoreError};
use crate::tensorio::{read_tensor, write_tensor, DatasetManifest, FormatError, Split, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Operator-facing training knobs. Model shapes derive from these plus the
/// manifest's expert list and text dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Ranking margin.
    pub margin: f64,
    /// Joint embedding dimension.
    pub d_model: usize,
    pub netvlad_clusters: usize,
    pub n_past: usize,
    pub n_future: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Enables the character similarity term with this video-side encoding
    /// (within-movie training).
    pub character: Option<CharVariant>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            margin: 0.121,
            d_model: 512,
            netvlad_clusters: 10,
            n_past: 3,
            n_future: 3,
            seed: 0,
            patience: 5,
            max_epochs: 200,
            character: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be >= 1".into()));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(TrainError::BadConfig("margin must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Shape configuration for a model trained on `manifest`.
    pub fn model_config(&self, manifest: &DatasetManifest) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_hidden: self.d_model,
            netvlad_clusters: self.netvlad_clusters,
            n_past: self.n_past,
            n_future: self.n_future,
            d_text: manifest.d_text(),
            experts: manifest.experts().to_vec(),
            use_character: self.character.is_some(),
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    EmptySplit { split: Split },
    EmptyStore,
    /// Loss became non-finite; training aborts rather than continuing on
    /// garbage.
    NonFinite { epoch: usize, batch: usize },
    NonSquare { rows: usize, cols: usize },
    Score(ScoreError),
    Encode(EncodeError),
    Graph(AutodiffError),
    Char(CharError),
    Model(ModelConfigError),
    Format(FormatError),
    Io(std::io::Error),
    Checkpoint { msg: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
            TrainError::EmptySplit { split } => write!(f, "{} split has no clips", split.name()),
            TrainError::EmptyStore => write!(f, "parameter store is empty"),
            TrainError::NonFinite { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::NonSquare { rows, cols } => {
                write!(f, "score matrix must be square, got {rows}x{cols}")
            }
            TrainError::Score(e) => write!(f, "{e}"),
            TrainError::Encode(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Char(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Format(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "{e}"),
            TrainError::Checkpoint { msg } => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ScoreError> for TrainError {
    fn from(e: ScoreError) -> Self {
        TrainError::Score(e)
    }
}

impl From<EncodeError> for TrainError {
    fn from(e: EncodeError) -> Self {
        TrainError::Encode(e)
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Graph(e)
    }
}

impl From<CharError> for TrainError {
    fn from(e: CharError) -> Self {
        TrainError::Char(e)
    }
}

impl From<ModelConfigError> for TrainError {
    fn from(e: ModelConfigError) -> Self {
        TrainError::Model(e)
    }
}

impl From<FormatError> for TrainError {
    fn from(e: FormatError) -> Self {
        TrainError::Format(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Bidirectional ranking loss over a square score matrix whose diagonal
/// holds the matched pairs: the mean of `max(0, m + S_ij - S_ii)` and
/// `max(0, m + S_ji - S_ii)` over all `j != i`. A 1x1 matrix has no
/// off-diagonal terms and zero loss.
pub fn ranking_loss(s: &Tensor, margin: f64) -> Result<f64, TrainError> {
    if s.rank() != 2 || s.rows() != s.cols() {
        let (r, c) = if s.rank() == 2 { (s.rows(), s.cols()) } else { (s.len(), 1) };
        return Err(TrainError::NonSquare { rows: r, cols: c });
    }
    let b = s.rows();
    if b < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..b {
        let sii = s.at(i, i);
        for j in 0..b {
            if j == i {
                continue;
            }
            total += (margin + s.at(i, j) - sii).max(0.0);
            total += (margin + s.at(j, i) - sii).max(0.0);
        }
    }
    Ok(total / (2 * b * (b - 1)) as f64)
}

/// Graph twin of [`ranking_loss`] over a `b x b` grid of scalar score
/// nodes.
pub fn ranking_loss_graph(
    tape: &mut Tape,
    s: &[Vec<NodeId>],
    margin: f64,
) -> Result<NodeId, TrainError> {
    let b = s.len();
    for row in s {
        if row.len() != b {
            return Err(TrainError::NonSquare { rows: b, cols: row.len() });
        }
    }
    if b < 2 {
        return Ok(tape.constant(0.0));
    }
    let mut terms = Vec::with_capacity(2 * b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if j == i {
                continue;
            }
            for other in [s[i][j], s[j][i]] {
                let diff = tape.sub(other, s[i][i])?;
                let shifted = tape.add_scalar(diff, margin);
                terms.push(tape.hinge(shifted));
            }
        }
    }
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / (2 * b * (b - 1)) as f64))
}

/// One Adam update from the accumulated gradients, with bias correction.
/// Gradients are left in place; callers zero them when starting the next
/// accumulation.
pub fn adam_step(store: &mut ParamStore, lr: f64) -> Result<(), TrainError> {
    if store.is_empty() {
        return Err(TrainError::EmptyStore);
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for slot in store.slots.values_mut() {
        for k in 0..slot.value.len() {
            let g = slot.grad.data()[k];
            let m = ADAM_BETA1 * slot.m.data()[k] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * slot.v.data()[k] + (1.0 - ADAM_BETA2) * g * g;
            slot.m.data_mut()[k] = m;
            slot.v.data_mut()[k] = v;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            slot.value.data_mut()[k] -= update;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Comma-separated epoch log with a header line.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub params: ParamStore,
    pub model: ModelConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Per-clip character vectors keyed by global clip index: the query-side
/// mention vector and the clip-side track vector.
pub type BatchChars = BTreeMap<usize, (CharVector, CharVector)>;

/// Builds character vectors for a set of clips, lifted into the shared
/// cast index space so clips from different movies stay comparable (their
/// blocks are disjoint, so cross-movie character similarity is 0).
pub fn batch_chars(
    manifest: &DatasetManifest,
    indices: &[usize],
    variant: CharVariant,
) -> Result<BatchChars, TrainError> {
    let cast_index =
        CastIndex::build(manifest.movies().iter().map(|m| (m.id.as_str(), m.cast.len())));
    let mut out = BTreeMap::new();
    for &idx in indices {
        let clip = &manifest.clips()[idx];
        let cast_len = manifest
            .movie(&clip.movie_id)
            .map(|m| m.cast.len())
            .unwrap_or(0);
        let y = one_hot_chars(&clip.mentions, cast_len)?;
        let x = encode_video_chars(&clip.face_tracks, cast_len, variant)?;
        out.insert(idx, (cast_index.lift(&clip.movie_id, &y)?, cast_index.lift(&clip.movie_id, &x)?));
    }
    Ok(out)
}

/// Builds the batch's score-matrix graph and returns its loss node.
/// Every clip a context window touches is encoded once, so shared
/// parameters accumulate gradient from every appearance.
pub fn batch_loss_graph(
    tape: &mut Tape,
    bound: &Bound,
    manifest: &DatasetManifest,
    batch: &[usize],
    config: &ModelConfig,
    margin: f64,
    chars: Option<&BatchChars>,
) -> Result<NodeId, TrainError> {
    let windows: Vec<ContextWindow> = batch
        .iter()
        .map(|&idx| ContextWindow::build(manifest, idx, config))
        .collect::<Result<_, _>>()?;
    let mut clip_nodes: BTreeMap<usize, ClipNodes> = BTreeMap::new();
    for w in &windows {
        for idx in w.slots.iter().flatten() {
            if !clip_nodes.contains_key(idx) {
                let nodes = encode_clip_graph(tape, &manifest.clips()[*idx], bound, config)?;
                clip_nodes.insert(*idx, nodes);
            }
        }
    }
    let texts: Vec<_> = batch
        .iter()
        .map(|&idx| encode_text_graph(tape, &manifest.clips()[idx].description, bound, config))
        .collect::<Result<Vec<_>, _>>()?;

    let b = batch.len();
    let mut s = vec![Vec::with_capacity(b); b];
    for (qi, text) in texts.iter().enumerate() {
        for (vi, window) in windows.iter().enumerate() {
            let slots: Vec<Option<&ClipNodes>> =
                window.slots.iter().map(|o| o.map(|idx| &clip_nodes[&idx])).collect();
            let pair = chars.map(|c| {
                let (y, _) = &c[&batch[qi]];
                let (_, x) = &c[&batch[vi]];
                (y, x)
            });
            let node = crate::retrieval::score_graph(tape, text, &slots, bound, config, pair)?;
            s[qi].push(node);
        }
    }
    ranking_loss_graph(tape, &s, margin)
}

/// Validation loss over a whole split, computed on the value path.
fn split_loss(
    manifest: &DatasetManifest,
    indices: &[usize],
    store: &ParamStore,
    config: &ModelConfig,
    margin: f64,
    chars: Option<&BatchChars>,
) -> Result<f64, TrainError> {
    let mut encodings: BTreeMap<usize, crate::encoders::ClipEncoding> = BTreeMap::new();
    let mut needed: Vec<usize> = Vec::new();
    let windows: Vec<ContextWindow> = indices
        .iter()
        .map(|&idx| ContextWindow::build(manifest, idx, config))
        .collect::<Result<_, _>>()?;
    for w in &windows {
        needed.extend(w.slots.iter().flatten());
    }
    needed.sort_unstable();
    needed.dedup();
    for idx in needed {
        encodings.insert(idx, encode_clip(&manifest.clips()[idx], store, config)?);
    }
    let texts: Vec<TextEncoding> = indices
        .iter()
        .map(|&idx| encode_text(&manifest.clips()[idx].description, store, config))
        .collect::<Result<_, _>>()?;

    let b = indices.len();
    let mut scores = Tensor::zeros(vec![b, b]);
    for (qi, text) in texts.iter().enumerate() {
        for (vi, window) in windows.iter().enumerate() {
            let slots: Vec<Option<&crate::encoders::ClipEncoding>> =
                window.slots.iter().map(|o| o.map(|idx| &encodings[&idx])).collect();
            let pair = chars.map(|c| {
                let (y, _) = &c[&indices[qi]];
                let (_, x) = &c[&indices[vi]];
                (y, x)
            });
            let val = score(text, &slots, store, config, pair)?;
            scores.data_mut()[qi * b + vi] = val;
        }
    }
    ranking_loss(&scores, margin)
}

/// Trains from scratch on the manifest's train split, early-stopping on
/// the validation split, and returns the best-validation parameters.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model = config.model_config(manifest);
    model.validate()?;
    let train_idx = manifest.split_clips(Split::Train);
    let val_idx = manifest.split_clips(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit { split: Split::Train });
    }
    if val_idx.is_empty() {
        return Err(TrainError::EmptySplit { split: Split::Val });
    }

    let chars_train;
    let chars_val;
    match config.character {
        Some(variant) => {
            chars_train = Some(batch_chars(manifest, &train_idx, variant)?);
            chars_val = Some(batch_chars(manifest, &val_idx, variant)?);
        }
        None => {
            chars_train = None;
            chars_val = None;
        }
    }

    let mut store = init_params(&model, config.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    let mut order = train_idx.clone();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = batch_loss_graph(
                &mut tape,
                &bound,
                manifest,
                batch,
                &model,
                config.margin,
                chars_train.as_ref(),
            )?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            match tape.backward(loss) {
                Ok(()) => {}
                Err(AutodiffError::NonFiniteLoss) => {
                    return Err(TrainError::NonFinite { epoch, batch: bi })
                }
                Err(e) => return Err(e.into()),
            }
            bound.accumulate_grads(&tape, &mut store);
            adam_step(&mut store, config.learning_rate)?;
            store.zero_grads();
            epoch_loss += loss_val;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let val_loss =
            split_loss(manifest, &val_idx, &store, &model, config.margin, chars_val.as_ref())?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: usize::MAX });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params, model, history, best_epoch, best_val_loss })
}

/// Writes parameters and the model shape into a checkpoint directory:
/// `config.txt` (key=value), `index.txt` (name to file), one tensor file
/// per parameter. Values round to f32 on disk; optimizer moments are not
/// persisted.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    model: &ModelConfig,
) -> Result<(), TrainError> {
    if store.is_empty() {
        return Err(TrainError::EmptyStore);
    }
    std::fs::create_dir_all(dir)?;
    let mut config_txt = String::new();
    for (k, v) in model.to_key_values() {
        config_txt.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("config.txt"), config_txt)?;

    let mut index = String::new();
    for (i, name) in store.names().enumerate() {
        let file = format!("p{i:04}.cmdt");
        index.push_str(&format!("{name}\t{file}\n"));
        write_tensor(store.get(name).unwrap(), &dir.join(&file))?;
    }
    let mut f = std::fs::File::create(dir.join("index.txt"))?;
    f.write_all(index.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, ModelConfig), TrainError> {
    let config_txt = std::fs::read_to_string(dir.join("config.txt"))?;
    let pairs: Vec<(&str, &str)> = config_txt
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| TrainError::Checkpoint { msg: format!("bad config line {l:?}") })
        })
        .collect::<Result<_, _>>()?;
    let model = ModelConfig::from_key_values(pairs)?;

    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut store = ParamStore::new();
    for line in index.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| TrainError::Checkpoint { msg: format!("bad index line {line:?}") })?;
        if file.contains('/') || file.contains("..") {
            return Err(TrainError::Checkpoint { msg: format!("bad tensor path {file:?}") });
        }
        store.insert(name, read_tensor(&dir.join(file))?);
    }
    if store.is_empty() {
        return Err(TrainError::Checkpoint { msg: "checkpoint has no parameters".into() });
    }
    Ok((store, model))
}
