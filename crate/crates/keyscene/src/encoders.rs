//! Per-stream encoders: temporal mean aggregation, the gated embedding
//! unit, soft-assignment text aggregation, and the projection heads that
//! put every stream into one joint space.
//!
//! Each encoder exists twice: a value path over plain tensors for
//! evaluation with frozen parameters, and a graph path over [`Tape`] nodes
//! for training. The two are tested against each other; edit both when
//! changing either.
//!
//! Video side per expert: mean over frames, gated unit, affine projection
//! to the joint dimension, unit normalization. Text side: tokens aggregate
//! through soft cluster assignment into one vector `h`, which both feeds
//! the per-expert text branches (gated unit, projection, normalization)
//! and later predicts mixture weights.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::{softmax_slice, AutodiffError, Bound, NodeId, ParamStore, Tape};
use crate::model::{
    self, ModelConfig, K_NV_ASSIGN_B, K_NV_ASSIGN_W, K_NV_CENTROIDS,
};
use crate::tensorio::{ClipRecord, Tensor};
use crate::vecmath;

#[derive(Debug)]
pub enum EncodeError {
    Graph(AutodiffError),
    ShapeMismatch { what: String },
    EmptyInput { what: &'static str },
    MissingParam { name: String },
    UnknownExpert { name: String },
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodeError::Graph(e) => write!(f, "{e}"),
            EncodeError::ShapeMismatch { what } => write!(f, "shape mismatch: {what}"),
            EncodeError::EmptyInput { what } => write!(f, "empty input: {what}"),
            EncodeError::MissingParam { name } => write!(f, "parameter {name:?} not in store"),
            EncodeError::UnknownExpert { name } => write!(f, "unknown expert {name:?}"),
        }
    }
}

impl std::error::Error for EncodeError {}

impl From<AutodiffError> for EncodeError {
    fn from(e: AutodiffError) -> Self {
        EncodeError::Graph(e)
    }
}

/// Gated unit weights, borrowed from a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct GatedUnitParams<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Projection head weights.
#[derive(Debug, Clone, Copy)]
pub struct ProjParams<'a> {
    pub w: &'a Tensor,
    pub b: &'a Tensor,
}

/// Text aggregation weights: per-cluster soft-assignment and centroids.
#[derive(Debug, Clone, Copy)]
pub struct NetVladParams<'a> {
    /// Token-to-cluster logit map, `[d_text, clusters]`.
    pub assign_w: &'a Tensor,
    pub assign_b: &'a Tensor,
    /// One centroid per cluster, `[clusters, d_text]`.
    pub centroids: &'a Tensor,
}

fn fetch<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor, EncodeError> {
    store.get(name).ok_or_else(|| EncodeError::MissingParam { name: name.to_string() })
}

impl<'a> GatedUnitParams<'a> {
    pub fn video(store: &'a ParamStore, expert: &str) -> Result<Self, EncodeError> {
        Ok(GatedUnitParams {
            w1: fetch(store, &model::k_video_geu(expert, "w1"))?,
            b1: fetch(store, &model::k_video_geu(expert, "b1"))?,
            w2: fetch(store, &model::k_video_geu(expert, "w2"))?,
            b2: fetch(store, &model::k_video_geu(expert, "b2"))?,
        })
    }

    pub fn text(store: &'a ParamStore, expert: &str) -> Result<Self, EncodeError> {
        Ok(GatedUnitParams {
            w1: fetch(store, &model::k_text_geu(expert, "w1"))?,
            b1: fetch(store, &model::k_text_geu(expert, "b1"))?,
            w2: fetch(store, &model::k_text_geu(expert, "w2"))?,
            b2: fetch(store, &model::k_text_geu(expert, "b2"))?,
        })
    }
}

impl<'a> ProjParams<'a> {
    pub fn video(store: &'a ParamStore, expert: &str) -> Result<Self, EncodeError> {
        Ok(ProjParams {
            w: fetch(store, &model::k_video_proj(expert, "w"))?,
            b: fetch(store, &model::k_video_proj(expert, "b"))?,
        })
    }

    pub fn text(store: &'a ParamStore, expert: &str) -> Result<Self, EncodeError> {
        Ok(ProjParams {
            w: fetch(store, &model::k_text_proj(expert, "w"))?,
            b: fetch(store, &model::k_text_proj(expert, "b"))?,
        })
    }
}

impl<'a> NetVladParams<'a> {
    pub fn from_store(store: &'a ParamStore) -> Result<Self, EncodeError> {
        Ok(NetVladParams {
            assign_w: fetch(store, K_NV_ASSIGN_W)?,
            assign_b: fetch(store, K_NV_ASSIGN_B)?,
            centroids: fetch(store, K_NV_CENTROIDS)?,
        })
    }
}

/// One stream's joint-space embedding. Absent streams carry an all-zero
/// vector and `present = false`; downstream scoring must mask them rather
/// than trust the zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEmbedding {
    pub name: String,
    pub vector: Tensor,
    pub present: bool,
}

/// Text query encoded once: the aggregation vector `h` plus one joint-space
/// embedding per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub h: Tensor,
    pub experts: BTreeMap<String, Tensor>,
}

/// Video clip encoded once per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEncoding {
    pub experts: BTreeMap<String, ExpertEmbedding>,
}

impl ClipEncoding {
    pub fn expert(&self, name: &str) -> Option<&ExpertEmbedding> {
        self.experts.get(name)
    }
}

/// Arithmetic mean over the rows of a `[frames, dim]` tensor.
pub fn aggregate_mean(frames: &Tensor) -> Result<Tensor, EncodeError> {
    if frames.rank() != 2 {
        return Err(EncodeError::ShapeMismatch {
            what: format!("frame block must be rank 2, got {:?}", frames.shape()),
        });
    }
    if frames.rows() == 0 {
        return Err(EncodeError::EmptyInput { what: "frame block" });
    }
    let (t, d) = (frames.rows(), frames.cols());
    let mut out = vec![0.0; d];
    for i in 0..t {
        for (o, &v) in out.iter_mut().zip(frames.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    Ok(Tensor::vector(out))
}

fn affine_value(w: &Tensor, x: &[f64], b: &Tensor) -> Result<Vec<f64>, EncodeError> {
    if w.rank() != 2 || w.cols() != x.len() || b.len() != w.rows() {
        return Err(EncodeError::ShapeMismatch {
            what: format!(
                "affine with weights {:?}, input [{}], bias {:?}",
                w.shape(),
                x.len(),
                b.shape()
            ),
        });
    }
    let mut out = b.data().to_vec();
    for i in 0..w.rows() {
        out[i] += vecmath::dot(w.row(i), x);
    }
    Ok(out)
}

/// Gated embedding: `z1 = W1 x + b1`, gate `sigmoid(W2 z1 + b2)`, output
/// the unit-normalized elementwise product.
pub fn gated_embed(x: &Tensor, p: &GatedUnitParams) -> Result<Tensor, EncodeError> {
    if x.rank() != 1 {
        return Err(EncodeError::ShapeMismatch {
            what: format!("gated unit input must be rank 1, got {:?}", x.shape()),
        });
    }
    let z1 = affine_value(p.w1, x.data(), p.b1)?;
    let gate_in = affine_value(p.w2, &z1, p.b2)?;
    let mut out: Vec<f64> =
        z1.iter().zip(&gate_in).map(|(&z, &g)| z / (1.0 + (-g).exp())).collect();
    vecmath::l2_normalize(&mut out);
    Ok(Tensor::vector(out))
}

/// Aggregates `[words, d_text]` token embeddings into one
/// `clusters * d_text` vector: soft-assign each token to clusters,
/// accumulate residuals against the centroids, normalize per cluster,
/// concatenate, normalize globally.
pub fn netvlad(words: &Tensor, p: &NetVladParams) -> Result<Tensor, EncodeError> {
    if words.rank() != 2 {
        return Err(EncodeError::ShapeMismatch {
            what: format!("token block must be rank 2, got {:?}", words.shape()),
        });
    }
    let (w_count, d) = (words.rows(), words.cols());
    if w_count == 0 {
        return Err(EncodeError::EmptyInput { what: "token block" });
    }
    let c = p.centroids.rows();
    if p.assign_w.rank() != 2
        || p.assign_w.rows() != d
        || p.assign_w.cols() != c
        || p.assign_b.len() != c
        || p.centroids.cols() != d
    {
        return Err(EncodeError::ShapeMismatch {
            what: format!(
                "assignment {:?} / bias {:?} / centroids {:?} vs tokens {:?}",
                p.assign_w.shape(),
                p.assign_b.shape(),
                p.centroids.shape(),
                words.shape()
            ),
        });
    }
    let mut residuals = vec![0.0; c * d];
    let mut logits = vec![0.0; c];
    let mut assign = vec![0.0; c];
    let mut col_mass = vec![0.0; c];
    for wi in 0..w_count {
        let word = words.row(wi);
        for k in 0..c {
            let mut acc = p.assign_b.data()[k];
            for j in 0..d {
                acc += word[j] * p.assign_w.at(j, k);
            }
            logits[k] = acc;
        }
        softmax_slice(&logits, &mut assign);
        for k in 0..c {
            let a = assign[k];
            col_mass[k] += a;
            for j in 0..d {
                residuals[k * d + j] += a * word[j];
            }
        }
    }
    for k in 0..c {
        for j in 0..d {
            residuals[k * d + j] -= col_mass[k] * p.centroids.at(k, j);
        }
        vecmath::l2_normalize(&mut residuals[k * d..(k + 1) * d]);
    }
    vecmath::l2_normalize(&mut residuals);
    Ok(Tensor::vector(residuals))
}

/// Encodes one video stream of a clip into the joint space. An absent
/// stream yields the zero vector flagged not-present.
pub fn encode_video_expert(
    clip: &ClipRecord,
    expert: &str,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ExpertEmbedding, EncodeError> {
    let feature = clip
        .experts
        .get(expert)
        .ok_or_else(|| EncodeError::UnknownExpert { name: expert.to_string() })?;
    let Some(frames) = feature.as_present() else {
        return Ok(ExpertEmbedding {
            name: expert.to_string(),
            vector: Tensor::zeros(vec![config.d_model]),
            present: false,
        });
    };
    let geu = GatedUnitParams::video(store, expert)?;
    let proj = ProjParams::video(store, expert)?;
    let pooled = aggregate_mean(frames)?;
    let gated = gated_embed(&pooled, &geu)?;
    let mut projected = affine_value(proj.w, gated.data(), proj.b)?;
    vecmath::l2_normalize(&mut projected);
    Ok(ExpertEmbedding {
        name: expert.to_string(),
        vector: Tensor::vector(projected),
        present: true,
    })
}

/// Encodes every configured stream of a clip.
pub fn encode_clip(
    clip: &ClipRecord,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ClipEncoding, EncodeError> {
    let mut experts = BTreeMap::new();
    for name in config.expert_names() {
        experts.insert(name.to_string(), encode_video_expert(clip, name, store, config)?);
    }
    Ok(ClipEncoding { experts })
}

/// Encodes a tokenized description: aggregation vector `h` plus one
/// unit-norm joint-space embedding per expert.
pub fn encode_text(
    tokens: &Tensor,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<TextEncoding, EncodeError> {
    let nv = NetVladParams::from_store(store)?;
    let h = netvlad(tokens, &nv)?;
    let mut experts = BTreeMap::new();
    for name in config.expert_names() {
        let geu = GatedUnitParams::text(store, name)?;
        let proj = ProjParams::text(store, name)?;
        let gated = gated_embed(&h, &geu)?;
        let mut projected = affine_value(proj.w, gated.data(), proj.b)?;
        vecmath::l2_normalize(&mut projected);
        experts.insert(name.to_string(), Tensor::vector(projected));
    }
    Ok(TextEncoding { h, experts })
}

/// Tape-node handles of one gated unit.
#[derive(Debug, Clone, Copy)]
pub struct GatedUnitIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct NetVladIds {
    pub assign_w: NodeId,
    pub assign_b: NodeId,
    pub centroids: NodeId,
}

impl GatedUnitIds {
    pub fn video(bound: &Bound, expert: &str) -> Self {
        GatedUnitIds {
            w1: bound.id(&model::k_video_geu(expert, "w1")),
            b1: bound.id(&model::k_video_geu(expert, "b1")),
            w2: bound.id(&model::k_video_geu(expert, "w2")),
            b2: bound.id(&model::k_video_geu(expert, "b2")),
        }
    }

    pub fn text(bound: &Bound, expert: &str) -> Self {
        GatedUnitIds {
            w1: bound.id(&model::k_text_geu(expert, "w1")),
            b1: bound.id(&model::k_text_geu(expert, "b1")),
            w2: bound.id(&model::k_text_geu(expert, "w2")),
            b2: bound.id(&model::k_text_geu(expert, "b2")),
        }
    }
}

impl ProjIds {
    pub fn video(bound: &Bound, expert: &str) -> Self {
        ProjIds {
            w: bound.id(&model::k_video_proj(expert, "w")),
            b: bound.id(&model::k_video_proj(expert, "b")),
        }
    }

    pub fn text(bound: &Bound, expert: &str) -> Self {
        ProjIds {
            w: bound.id(&model::k_text_proj(expert, "w")),
            b: bound.id(&model::k_text_proj(expert, "b")),
        }
    }
}

impl NetVladIds {
    pub fn from_bound(bound: &Bound) -> Self {
        NetVladIds {
            assign_w: bound.id(K_NV_ASSIGN_W),
            assign_b: bound.id(K_NV_ASSIGN_B),
            centroids: bound.id(K_NV_CENTROIDS),
        }
    }
}

/// Graph twin of [`gated_embed`].
pub fn gated_embed_graph(
    tape: &mut Tape,
    x: NodeId,
    p: &GatedUnitIds,
) -> Result<NodeId, AutodiffError> {
    let z1 = tape.affine(p.w1, x, p.b1)?;
    let gate_in = tape.affine(p.w2, z1, p.b2)?;
    let gate = tape.sigmoid(gate_in);
    let prod = tape.mul(z1, gate)?;
    tape.l2_normalize(prod)
}

/// Graph twin of [`netvlad`]; `words` is a `[tokens, d_text]` node.
pub fn netvlad_graph(
    tape: &mut Tape,
    words: NodeId,
    p: &NetVladIds,
) -> Result<NodeId, AutodiffError> {
    let (c, d) = {
        let cent = tape.value(p.centroids);
        (cent.rows(), cent.cols())
    };
    let logits = tape.matmul(words, p.assign_w)?;
    let logits = tape.add_rows(logits, p.assign_b)?;
    let assign = tape.softmax(logits)?;
    let assign_t = tape.transpose(assign)?;
    let weighted = tape.matmul(assign_t, words)?;
    let mass = tape.col_sums(assign)?;
    let shifted = tape.mul_rows(p.centroids, mass)?;
    let residuals = tape.sub(weighted, shifted)?;
    let per_cluster = tape.normalize_rows(residuals)?;
    let flat = tape.reshape(per_cluster, vec![c * d])?;
    tape.l2_normalize(flat)
}

/// Graph twin of [`encode_video_expert`] for one present stream; the
/// feature block must already be a `[frames, dim]` node.
pub fn encode_video_expert_graph(
    tape: &mut Tape,
    frames: NodeId,
    geu: &GatedUnitIds,
    proj: &ProjIds,
) -> Result<NodeId, AutodiffError> {
    let pooled = tape.mean_rows(frames)?;
    let gated = gated_embed_graph(tape, pooled, geu)?;
    let projected = tape.affine(proj.w, gated, proj.b)?;
    tape.l2_normalize(projected)
}

/// Graph-side text encoding.
#[derive(Debug, Clone)]
pub struct TextNodes {
    pub h: NodeId,
    pub experts: BTreeMap<String, NodeId>,
}

/// Graph-side clip encoding; absent streams never enter the graph.
#[derive(Debug, Clone)]
pub struct ClipNodes {
    pub experts: BTreeMap<String, Option<NodeId>>,
}

/// Graph twin of [`encode_text`].
pub fn encode_text_graph(
    tape: &mut Tape,
    tokens: &Tensor,
    bound: &Bound,
    config: &ModelConfig,
) -> Result<TextNodes, EncodeError> {
    if tokens.rank() != 2 || tokens.rows() == 0 {
        return Err(EncodeError::EmptyInput { what: "token block" });
    }
    let words = tape.leaf(tokens.clone());
    let nv = NetVladIds::from_bound(bound);
    let h = netvlad_graph(tape, words, &nv)?;
    let mut experts = BTreeMap::new();
    for name in config.expert_names() {
        let geu = GatedUnitIds::text(bound, name);
        let proj = ProjIds::text(bound, name);
        let gated = gated_embed_graph(tape, h, &geu)?;
        let projected = tape.affine(proj.w, gated, proj.b)?;
        let unit = tape.l2_normalize(projected)?;
        experts.insert(name.to_string(), unit);
    }
    Ok(TextNodes { h, experts })
}

/// Graph twin of [`encode_clip`].
pub fn encode_clip_graph(
    tape: &mut Tape,
    clip: &ClipRecord,
    bound: &Bound,
    config: &ModelConfig,
) -> Result<ClipNodes, EncodeError> {
    let mut experts = BTreeMap::new();
    for name in config.expert_names() {
        let feature = clip
            .experts
            .get(name)
            .ok_or_else(|| EncodeError::UnknownExpert { name: name.to_string() })?;
        let node = match feature.as_present() {
            None => None,
            Some(frames) => {
                let leaf = tape.leaf(frames.clone());
                let geu = GatedUnitIds::video(bound, name);
                let proj = ProjIds::video(bound, name);
                Some(encode_video_expert_graph(tape, leaf, &geu, &proj)?)
            }
        };
        experts.insert(name.to_string(), node);
    }
    Ok(ClipNodes { experts })
}
