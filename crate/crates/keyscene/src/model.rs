//! Model configuration, parameter initialization, and the parameter naming
//! scheme shared by the graph (training) and value (evaluation) paths.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a dotted name:
//!
//! ```text
//! video.{expert}.geu.{w1,b1,w2,b2}   per-expert gated unit, video side
//! video.{expert}.proj.{w,b}          projection to the joint dimension
//! text.{expert}.geu.{w1,b1,w2,b2}    per-expert gated unit, text side
//! text.{expert}.proj.{w,b}
//! text.netvlad.{assign_w,assign_b,centroids}
//! mixture.{expert}.{slot}            weight-prediction vector per context slot
//! mixture.character                  weight-prediction vector for the
//!                                    character term (within-movie runs)
//! ```
//!
//! Context slots are relative to the scored clip: `p3 p2 p1 t f1 f2 f3` for
//! the default three-past/three-future window. Slot parameters are tied to
//! the offset, not the absolute clip position, so windows anywhere in a
//! movie share them.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::ParamStore;
use crate::tensorio::{ExpertSpec, Tensor};

/// Hyperparameters fixing every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Joint embedding dimension D.
    pub d_model: usize,
    /// Gated-unit output width; equal to `d_model` unless overridden.
    pub d_hidden: usize,
    /// Text aggregation cluster count C.
    pub netvlad_clusters: usize,
    pub n_past: usize,
    pub n_future: usize,
    /// Word embedding dimension of description tokens.
    pub d_text: usize,
    /// Input streams, each with its native feature dimension.
    pub experts: Vec<ExpertSpec>,
    /// Adds the character similarity term with its own mixture weight.
    pub use_character: bool,
}

#[derive(Debug)]
pub enum ModelConfigError {
    Invalid(String),
    MissingField(&'static str),
}

impl fmt::Display for ModelConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelConfigError::Invalid(msg) => write!(f, "invalid model config: {msg}"),
            ModelConfigError::MissingField(name) => {
                write!(f, "model config is missing field {name:?}")
            }
        }
    }
}

impl std::error::Error for ModelConfigError {}

impl ModelConfig {
    /// Default hyperparameters for the given streams: D = 512, C = 10,
    /// three past and three future context slots, no character term.
    pub fn defaults(experts: Vec<ExpertSpec>, d_text: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_hidden: 512,
            netvlad_clusters: 10,
            n_past: 3,
            n_future: 3,
            d_text,
            experts,
            use_character: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelConfigError> {
        if self.d_model == 0 || self.d_hidden == 0 || self.d_text == 0 {
            return Err(ModelConfigError::Invalid("dimensions must be positive".into()));
        }
        if self.netvlad_clusters == 0 {
            return Err(ModelConfigError::Invalid("cluster count must be >= 1".into()));
        }
        if self.experts.is_empty() {
            return Err(ModelConfigError::Invalid("at least one expert stream".into()));
        }
        for e in &self.experts {
            if e.dim == 0 {
                return Err(ModelConfigError::Invalid(format!(
                    "expert {:?} has zero dimension",
                    e.name
                )));
            }
        }
        let mut names: Vec<&str> = self.experts.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.experts.len() {
            return Err(ModelConfigError::Invalid("duplicate expert names".into()));
        }
        Ok(())
    }

    /// Context slots including the target: past, target, future.
    pub fn n_slots(&self) -> usize {
        self.n_past + 1 + self.n_future
    }

    /// Dimension of the text aggregation vector h.
    pub fn h_dim(&self) -> usize {
        self.netvlad_clusters * self.d_text
    }

    /// Slot names in window order, e.g. `p2 p1 t f1` for two past and one
    /// future slot.
    pub fn slot_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_slots());
        for k in (1..=self.n_past).rev() {
            out.push(format!("p{k}"));
        }
        out.push("t".to_string());
        for k in 1..=self.n_future {
            out.push(format!("f{k}"));
        }
        out
    }

    /// Signed clip offset of a slot index: -1 is the previous clip, 0 the
    /// target, +2 two clips ahead.
    pub fn slot_offset(&self, slot: usize) -> i64 {
        slot as i64 - self.n_past as i64
    }

    pub fn target_slot(&self) -> usize {
        self.n_past
    }

    pub fn expert_names(&self) -> impl Iterator<Item = &str> {
        self.experts.iter().map(|e| e.name.as_str())
    }

    /// Flat key=value form used in checkpoint directories.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let experts = self
            .experts
            .iter()
            .map(|e| format!("{}:{}", e.name, e.dim))
            .collect::<Vec<_>>()
            .join("|");
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("d_hidden".into(), self.d_hidden.to_string()),
            ("netvlad_clusters".into(), self.netvlad_clusters.to_string()),
            ("n_past".into(), self.n_past.to_string()),
            ("n_future".into(), self.n_future.to_string()),
            ("d_text".into(), self.d_text.to_string()),
            ("experts".into(), experts),
            ("use_character".into(), self.use_character.to_string()),
        ]
    }

    pub fn from_key_values<'a, I>(pairs: I) -> Result<Self, ModelConfigError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut found: std::collections::BTreeMap<&str, &str> = std::collections::BTreeMap::new();
        for (k, v) in pairs {
            found.insert(k, v);
        }
        let field = |name: &'static str| -> Result<&str, ModelConfigError> {
            found.get(name).copied().ok_or(ModelConfigError::MissingField(name))
        };
        let num = |name: &'static str| -> Result<usize, ModelConfigError> {
            field(name)?
                .parse()
                .map_err(|_| ModelConfigError::Invalid(format!("bad number for {name}")))
        };
        let mut experts = Vec::new();
        for part in field("experts")?.split('|') {
            let (name, dim) = part
                .split_once(':')
                .ok_or_else(|| ModelConfigError::Invalid(format!("bad expert entry {part:?}")))?;
            let dim = dim
                .parse()
                .map_err(|_| ModelConfigError::Invalid(format!("bad expert dim in {part:?}")))?;
            experts.push(ExpertSpec { name: name.to_string(), dim });
        }
        let config = ModelConfig {
            d_model: num("d_model")?,
            d_hidden: num("d_hidden")?,
            netvlad_clusters: num("netvlad_clusters")?,
            n_past: num("n_past")?,
            n_future: num("n_future")?,
            d_text: num("d_text")?,
            experts,
            use_character: match field("use_character")? {
                "true" => true,
                "false" => false,
                other => {
                    return Err(ModelConfigError::Invalid(format!(
                        "bad use_character value {other:?}"
                    )))
                }
            },
        };
        config.validate()?;
        Ok(config)
    }
}

pub(crate) fn k_video_geu(expert: &str, field: &str) -> String {
    format!("video.{expert}.geu.{field}")
}

pub(crate) fn k_video_proj(expert: &str, field: &str) -> String {
    format!("video.{expert}.proj.{field}")
}

pub(crate) fn k_text_geu(expert: &str, field: &str) -> String {
    format!("text.{expert}.geu.{field}")
}

pub(crate) fn k_text_proj(expert: &str, field: &str) -> String {
    format!("text.{expert}.proj.{field}")
}

pub(crate) fn k_mixture(expert: &str, slot: &str) -> String {
    format!("mixture.{expert}.{slot}")
}

pub(crate) const K_NV_ASSIGN_W: &str = "text.netvlad.assign_w";
pub(crate) const K_NV_ASSIGN_B: &str = "text.netvlad.assign_b";
pub(crate) const K_NV_CENTROIDS: &str = "text.netvlad.centroids";
pub(crate) const K_MIX_CHARACTER: &str = "mixture.character";

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Fresh parameters for `config`, reproducible from the seed.
///
/// Weights and biases draw uniformly from plus/minus the reciprocal square
/// root of their layer's input width; text-aggregation centroids draw from
/// a standard normal scaled by 0.1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore, ModelConfigError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (dh, d, ht) = (config.d_hidden, config.d_model, config.h_dim());

    store.insert(
        K_NV_ASSIGN_W,
        uniform_fan_in(&mut rng, vec![config.d_text, config.netvlad_clusters], config.d_text),
    );
    store.insert(
        K_NV_ASSIGN_B,
        uniform_fan_in(&mut rng, vec![config.netvlad_clusters], config.d_text),
    );
    let n_centroid = config.netvlad_clusters * config.d_text;
    let centroids: Vec<f64> = (0..n_centroid)
        .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    store.insert(
        K_NV_CENTROIDS,
        Tensor::new(vec![config.netvlad_clusters, config.d_text], centroids),
    );

    let slots = config.slot_names();
    for e in &config.experts {
        store.insert(&k_video_geu(&e.name, "w1"), uniform_fan_in(&mut rng, vec![dh, e.dim], e.dim));
        store.insert(&k_video_geu(&e.name, "b1"), uniform_fan_in(&mut rng, vec![dh], e.dim));
        store.insert(&k_video_geu(&e.name, "w2"), uniform_fan_in(&mut rng, vec![dh, dh], dh));
        store.insert(&k_video_geu(&e.name, "b2"), uniform_fan_in(&mut rng, vec![dh], dh));
        store.insert(&k_video_proj(&e.name, "w"), uniform_fan_in(&mut rng, vec![d, dh], dh));
        store.insert(&k_video_proj(&e.name, "b"), uniform_fan_in(&mut rng, vec![d], dh));

        store.insert(&k_text_geu(&e.name, "w1"), uniform_fan_in(&mut rng, vec![dh, ht], ht));
        store.insert(&k_text_geu(&e.name, "b1"), uniform_fan_in(&mut rng, vec![dh], ht));
        store.insert(&k_text_geu(&e.name, "w2"), uniform_fan_in(&mut rng, vec![dh, dh], dh));
        store.insert(&k_text_geu(&e.name, "b2"), uniform_fan_in(&mut rng, vec![dh], dh));
        store.insert(&k_text_proj(&e.name, "w"), uniform_fan_in(&mut rng, vec![d, dh], dh));
        store.insert(&k_text_proj(&e.name, "b"), uniform_fan_in(&mut rng, vec![d], dh));

        for slot in &slots {
            store.insert(&k_mixture(&e.name, slot), uniform_fan_in(&mut rng, vec![ht], ht));
        }
    }
    if config.use_character {
        store.insert(K_MIX_CHARACTER, uniform_fan_in(&mut rng, vec![ht], ht));
    }
    Ok(store)
}
