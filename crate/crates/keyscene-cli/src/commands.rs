//! One function per subcommand. Each resolves its settings from flags and
//! the optional config file (flags win), writes a `run_config.txt`
//! snapshot into the output directory, then does the work.

use std::path::PathBuf;

use clap::Args;

use keyscene::alignment::align_movie;
use keyscene::autodiff::{grad_check, AutodiffError};
use keyscene::characters::{build_bank, label_tracks, BankParams, CharVariant, CharacterBank, ASSIGN_THRESHOLD};
use keyscene::evaluation::{eval_cross_movie, eval_within_movie, DEFAULT_MIN_CLIPS};
use keyscene::model::init_params;
use keyscene::tensorio::{
    generate_synth, load_manifest, read_tensor, save_manifest, DatasetManifest, Split, SynthSpec,
    Tensor,
};
use keyscene::training::{
    batch_chars, batch_loss_graph, history_csv, load_checkpoint, save_checkpoint, train,
    TrainConfig,
};

use crate::config::{
    experts_to_string, parse_experts, pick, require_path, safe_name, write_snapshot, CliError,
    FileConfig,
};

fn parse_split(raw: &str) -> Result<Split, CliError> {
    match raw {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("bad split {other:?}, expected train, val, or test").into()),
    }
}

fn parse_variant(raw: &str) -> Result<CharVariant, CliError> {
    match raw {
        "one-hot" => Ok(CharVariant::OneHot),
        "track-frequency" => Ok(CharVariant::TrackFrequency),
        "track-length" => Ok(CharVariant::TrackLength),
        other => Err(format!(
            "bad character variant {other:?}, expected one-hot, track-frequency, or track-length"
        )
        .into()),
    }
}

fn load_manifest_dir(dir: &PathBuf) -> Result<DatasetManifest, CliError> {
    let path = dir.join("manifest.txt");
    load_manifest(&path).map_err(|e| format!("cannot load manifest {}: {e}", path.display()).into())
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Config file with the same keys as the flags below; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the manifest tree.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub movies: Option<usize>,
    #[arg(long)]
    pub clips_per_movie: Option<usize>,
    /// Expert streams as name:dim,name:dim.
    #[arg(long)]
    pub experts: Option<String>,
    #[arg(long)]
    pub d_text: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub cast_size: Option<usize>,
    #[arg(long)]
    pub plot_sentences: Option<usize>,
    /// Signal-to-noise ratio of the planted text-video correspondence.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Probability that a clip drops an expert stream.
    #[arg(long)]
    pub absent_prob: Option<f64>,
    #[arg(long)]
    pub face_dim: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
}

const GEN_SYNTH_KEYS: &[&str] = &[
    "out", "seed", "movies", "clips-per-movie", "experts", "d-text", "latent-dim", "cast-size",
    "plot-sentences", "snr", "absent-prob", "face-dim", "train-frac", "val-frac",
];

pub fn gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(GEN_SYNTH_KEYS)?;
    let defaults = SynthSpec::default();
    let out = require_path(args.out, &cfg, "out")?;
    let experts_raw = pick(
        args.experts,
        &cfg,
        "experts",
        experts_to_string(&defaults.experts),
    )?;
    let spec = SynthSpec {
        n_movies: pick(args.movies, &cfg, "movies", defaults.n_movies)?,
        clips_per_movie: pick(args.clips_per_movie, &cfg, "clips-per-movie", defaults.clips_per_movie)?,
        experts: parse_experts(&experts_raw)?,
        d_text: pick(args.d_text, &cfg, "d-text", defaults.d_text)?,
        latent_dim: pick(args.latent_dim, &cfg, "latent-dim", defaults.latent_dim)?,
        cast_size: pick(args.cast_size, &cfg, "cast-size", defaults.cast_size)?,
        plot_sentences: pick(args.plot_sentences, &cfg, "plot-sentences", defaults.plot_sentences)?,
        snr: pick(args.snr, &cfg, "snr", defaults.snr)?,
        absent_prob: pick(args.absent_prob, &cfg, "absent-prob", defaults.absent_prob)?,
        face_dim: pick(args.face_dim, &cfg, "face-dim", defaults.face_dim)?,
        split_fractions: (
            pick(args.train_frac, &cfg, "train-frac", defaults.split_fractions.0)?,
            pick(args.val_frac, &cfg, "val-frac", defaults.split_fractions.1)?,
        ),
        seed: pick(args.seed, &cfg, "seed", defaults.seed)?,
        ..defaults
    };

    let manifest = generate_synth(&spec)?;
    save_manifest(&manifest, &out)?;
    write_snapshot(
        &out,
        "gen-synth",
        &[
            ("out", out.display().to_string()),
            ("seed", spec.seed.to_string()),
            ("movies", spec.n_movies.to_string()),
            ("clips-per-movie", spec.clips_per_movie.to_string()),
            ("experts", experts_to_string(&spec.experts)),
            ("d-text", spec.d_text.to_string()),
            ("latent-dim", spec.latent_dim.to_string()),
            ("cast-size", spec.cast_size.to_string()),
            ("plot-sentences", spec.plot_sentences.to_string()),
            ("snr", spec.snr.to_string()),
            ("absent-prob", spec.absent_prob.to_string()),
            ("face-dim", spec.face_dim.to_string()),
            ("train-frac", spec.split_fractions.0.to_string()),
            ("val-frac", spec.split_fractions.1.to_string()),
        ],
    )?;
    println!(
        "wrote {} movies, {} clips to {}",
        manifest.movies().len(),
        manifest.clips().len(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding manifest.txt.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub n_past: Option<usize>,
    #[arg(long)]
    pub n_future: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Enable the character term: one-hot, track-frequency, or
    /// track-length.
    #[arg(long)]
    pub character: Option<String>,
}

const TRAIN_KEYS: &[&str] = &[
    "manifest", "out", "learning-rate", "batch-size", "margin", "d-model", "clusters", "n-past",
    "n-future", "seed", "patience", "max-epochs", "character",
];

pub fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(TRAIN_KEYS)?;
    let defaults = TrainConfig::default();
    let manifest_dir = require_path(args.manifest, &cfg, "manifest")?;
    let out = require_path(args.out, &cfg, "out")?;
    let character = match args.character.or(cfg.get("character")?) {
        Some(raw) => Some(parse_variant(&raw)?),
        None => None,
    };
    let config = TrainConfig {
        learning_rate: pick(args.learning_rate, &cfg, "learning-rate", defaults.learning_rate)?,
        batch_size: pick(args.batch_size, &cfg, "batch-size", defaults.batch_size)?,
        margin: pick(args.margin, &cfg, "margin", defaults.margin)?,
        d_model: pick(args.d_model, &cfg, "d-model", defaults.d_model)?,
        netvlad_clusters: pick(args.clusters, &cfg, "clusters", defaults.netvlad_clusters)?,
        n_past: pick(args.n_past, &cfg, "n-past", defaults.n_past)?,
        n_future: pick(args.n_future, &cfg, "n-future", defaults.n_future)?,
        seed: pick(args.seed, &cfg, "seed", defaults.seed)?,
        patience: pick(args.patience, &cfg, "patience", defaults.patience)?,
        max_epochs: pick(args.max_epochs, &cfg, "max-epochs", defaults.max_epochs)?,
        character,
    };

    write_snapshot(
        &out,
        "train",
        &[
            ("manifest", manifest_dir.display().to_string()),
            ("out", out.display().to_string()),
            ("learning-rate", config.learning_rate.to_string()),
            ("batch-size", config.batch_size.to_string()),
            ("margin", config.margin.to_string()),
            ("d-model", config.d_model.to_string()),
            ("clusters", config.netvlad_clusters.to_string()),
            ("n-past", config.n_past.to_string()),
            ("n-future", config.n_future.to_string()),
            ("seed", config.seed.to_string()),
            ("patience", config.patience.to_string()),
            ("max-epochs", config.max_epochs.to_string()),
        ],
    )?;
    if let Some(v) = config.character {
        append_snapshot_line(&out, "character", v.name())?;
    }

    let manifest = load_manifest_dir(&manifest_dir)?;
    let outcome = train(&manifest, &config)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.params, &outcome.model)?;
    std::fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    println!(
        "trained {} epochs; best epoch {} with val loss {:.6}; checkpoint in {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn append_snapshot_line(out: &PathBuf, key: &str, value: &str) -> Result<(), CliError> {
    let path = out.join("run_config.txt");
    let mut text = std::fs::read_to_string(&path)?;
    text.push_str(&format!("{key} = {value}\n"));
    std::fs::write(&path, text)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train, val, or test.
    #[arg(long)]
    pub split: Option<String>,
    /// cross-movie or within-movie.
    #[arg(long)]
    pub mode: Option<String>,
    /// Character variant; only valid with within-movie mode.
    #[arg(long)]
    pub character: Option<String>,
    /// Minimum clips per movie for within-movie galleries.
    #[arg(long)]
    pub min_clips: Option<usize>,
    /// Override the checkpoint's context width.
    #[arg(long)]
    pub n_past: Option<usize>,
    #[arg(long)]
    pub n_future: Option<usize>,
}

const EVALUATE_KEYS: &[&str] = &[
    "manifest", "checkpoint", "out", "split", "mode", "character", "min-clips", "n-past",
    "n-future",
];

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(EVALUATE_KEYS)?;
    let manifest_dir = require_path(args.manifest, &cfg, "manifest")?;
    let checkpoint = require_path(args.checkpoint, &cfg, "checkpoint")?;
    let out = require_path(args.out, &cfg, "out")?;
    let split_raw = pick(args.split, &cfg, "split", "test".to_string())?;
    let split = parse_split(&split_raw)?;
    let mode_raw = pick(args.mode, &cfg, "mode", "cross-movie".to_string())?;
    let character_raw = args.character.or(cfg.get("character")?);
    let min_clips = pick(args.min_clips, &cfg, "min-clips", DEFAULT_MIN_CLIPS)?;

    // Validate the mode/variant combination before touching any input.
    enum Plan {
        Cross,
        Within(CharVariant),
    }
    let plan = match mode_raw.as_str() {
        "cross-movie" => {
            if character_raw.is_some() {
                return Err(
                    "a character variant requires within-movie mode; the cross-movie gallery \
                     scores without the character term"
                        .into(),
                );
            }
            Plan::Cross
        }
        "within-movie" => Plan::Within(match &character_raw {
            Some(raw) => parse_variant(raw)?,
            None => CharVariant::TrackFrequency,
        }),
        other => {
            return Err(
                format!("bad mode {other:?}, expected cross-movie or within-movie").into()
            )
        }
    };

    let (store, mut model) = load_checkpoint(&checkpoint)
        .map_err(|e| format!("cannot load checkpoint {}: {e}", checkpoint.display()))?;
    model.n_past = pick(args.n_past, &cfg, "n-past", model.n_past)?;
    model.n_future = pick(args.n_future, &cfg, "n-future", model.n_future)?;
    let manifest = load_manifest_dir(&manifest_dir)?;

    let outcome = match plan {
        Plan::Cross => eval_cross_movie(&manifest, &store, &model, split)?,
        Plan::Within(variant) => {
            eval_within_movie(&manifest, &store, &model, split, variant, min_clips)?
        }
    };

    write_snapshot(
        &out,
        "evaluate",
        &[
            ("manifest", manifest_dir.display().to_string()),
            ("checkpoint", checkpoint.display().to_string()),
            ("out", out.display().to_string()),
            ("split", split.name().to_string()),
            ("mode", mode_raw.clone()),
            ("min-clips", min_clips.to_string()),
            ("n-past", model.n_past.to_string()),
            ("n-future", model.n_future.to_string()),
        ],
    )?;
    if let Some(raw) = &character_raw {
        append_snapshot_line(&out, "character", raw)?;
    }

    std::fs::write(out.join("report.txt"), format!("{}", outcome.report))?;
    std::fs::write(out.join("report.csv"), outcome.report.to_csv())?;
    for (name, matrix) in &outcome.matrices {
        let file = format!("matrix_{}.csv", safe_name(name));
        std::fs::write(out.join(file), matrix.to_csv())?;
    }
    print!("{}", outcome.report);
    Ok(())
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Align only this movie; default is every movie with plot
    /// embeddings.
    #[arg(long)]
    pub movie: Option<String>,
}

const ALIGN_KEYS: &[&str] = &["manifest", "out", "movie"];

pub fn align(args: AlignArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(ALIGN_KEYS)?;
    let manifest_dir = require_path(args.manifest, &cfg, "manifest")?;
    let out = require_path(args.out, &cfg, "out")?;
    let movie = args.movie.or(cfg.get("movie")?);
    let manifest = load_manifest_dir(&manifest_dir)?;

    let targets: Vec<String> = match &movie {
        Some(id) => vec![id.clone()],
        None => manifest
            .movies()
            .iter()
            .filter(|m| m.plot_emb.is_some())
            .map(|m| m.id.clone())
            .collect(),
    };
    if targets.is_empty() {
        return Err("no movie has plot sentence embeddings".into());
    }

    let mut assignment_csv = String::from("movie,clip_index,sentence_index\n");
    let mut coverage_csv = String::from(
        "movie,n_clips,n_sentences,total_cost,coverage,span,midpoint,duration_fraction\n",
    );
    for id in &targets {
        let aligned = align_movie(&manifest, id)?;
        let n_sentences = manifest
            .movie(id)
            .and_then(|m| m.plot_emb.as_ref())
            .map(|t| t.rows())
            .unwrap_or(0);
        for (clip_pos, sentence) in aligned.result.assignment.iter().enumerate() {
            assignment_csv.push_str(&format!("{id},{clip_pos},{sentence}\n"));
        }
        let duration = aligned
            .duration_fraction
            .map(|d| d.to_string())
            .unwrap_or_default();
        coverage_csv.push_str(&format!(
            "{id},{},{n_sentences},{},{},{},{},{duration}\n",
            aligned.result.assignment.len(),
            aligned.result.total_cost,
            aligned.coverage.coverage,
            aligned.coverage.span,
            aligned.coverage.midpoint,
        ));
        println!(
            "{id}: {} clips over {} sentences, coverage {:.2}, span {:.2}, midpoint {:.2}",
            aligned.result.assignment.len(),
            n_sentences,
            aligned.coverage.coverage,
            aligned.coverage.span,
            aligned.coverage.midpoint
        );
    }

    write_snapshot(
        &out,
        "align",
        &[
            ("manifest", manifest_dir.display().to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    if let Some(id) = &movie {
        append_snapshot_line(&out, "movie", id)?;
    }
    std::fs::write(out.join("alignment.csv"), assignment_csv)?;
    std::fs::write(out.join("coverage.csv"), coverage_csv)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BuildCebArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of per-actor embedding files: <name>.cmdt, one row per
    /// face image.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Average-linkage cosine-distance ceiling for merging clusters.
    #[arg(long)]
    pub dist_threshold: Option<f64>,
    /// Minimum size of the largest cluster for an actor to be admitted.
    #[arg(long)]
    pub min_cluster: Option<usize>,
}

const BUILD_CEB_KEYS: &[&str] = &["images", "out", "dist-threshold", "min-cluster"];

pub fn build_ceb(args: BuildCebArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(BUILD_CEB_KEYS)?;
    let images = require_path(args.images, &cfg, "images")?;
    let out = require_path(args.out, &cfg, "out")?;
    let defaults = BankParams::default();
    let params = BankParams {
        dist_threshold: pick(args.dist_threshold, &cfg, "dist-threshold", defaults.dist_threshold)?,
        min_cluster: pick(args.min_cluster, &cfg, "min-cluster", defaults.min_cluster)?,
    };

    let mut actors: Vec<(String, Vec<Tensor>)> = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| format!("cannot read {}: {e}", images.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "cmdt"))
        .collect();
    paths.sort();
    for path in &paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format!("bad file name {}", path.display()))?
            .to_string();
        let tensor = read_tensor(path)?;
        if tensor.rank() != 2 {
            return Err(format!("{} must be a 2-d tensor, one row per image", path.display()).into());
        }
        let rows = (0..tensor.rows())
            .map(|r| Tensor::vector(tensor.row(r).to_vec()))
            .collect();
        actors.push((name, rows));
    }
    if actors.is_empty() {
        return Err(format!("no .cmdt files in {}", images.display()).into());
    }

    let (bank, skipped) = build_bank(&actors, &params)?;
    write_snapshot(
        &out,
        "build-ceb",
        &[
            ("images", images.display().to_string()),
            ("out", out.display().to_string()),
            ("dist-threshold", params.dist_threshold.to_string()),
            ("min-cluster", params.min_cluster.to_string()),
        ],
    )?;
    bank.save(&out.join("bank"))?;
    for skip in &skipped {
        println!("skipped {}: {:?}", skip.name, skip.reason);
    }
    println!("bank holds {} of {} actors; saved to {}", bank.len(), actors.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AssignTracksArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Bank stem path as written by build-ceb, without extension.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub movie: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bank-similarity floor for accepting a label.
    #[arg(long)]
    pub threshold: Option<f64>,
}

const ASSIGN_TRACKS_KEYS: &[&str] = &["manifest", "bank", "movie", "out", "threshold"];

pub fn assign_tracks(args: AssignTracksArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(ASSIGN_TRACKS_KEYS)?;
    let manifest_dir = require_path(args.manifest, &cfg, "manifest")?;
    let bank_stem = require_path(args.bank, &cfg, "bank")?;
    let out = require_path(args.out, &cfg, "out")?;
    let movie_id = args
        .movie
        .or(cfg.get("movie")?)
        .ok_or("missing required --movie")?;
    let threshold = pick(args.threshold, &cfg, "threshold", ASSIGN_THRESHOLD)?;

    let manifest = load_manifest_dir(&manifest_dir)?;
    let movie = manifest
        .movie(&movie_id)
        .ok_or_else(|| format!("unknown movie {movie_id:?}"))?;
    let bank = CharacterBank::load(&bank_stem)?;

    let mut csv = String::from("movie,clip_index,track_id,actor_index,actor_name\n");
    let mut labeled = 0usize;
    let mut total = 0usize;
    for clip in manifest.movie_clips(&movie_id) {
        let tracks = label_tracks(&clip.face_tracks, &bank, &movie.cast, threshold)?;
        for t in &tracks {
            total += 1;
            match t.actor {
                Some(idx) => {
                    labeled += 1;
                    csv.push_str(&format!(
                        "{movie_id},{},{},{idx},{}\n",
                        clip.clip_index, t.id, movie.cast[idx]
                    ));
                }
                None => {
                    csv.push_str(&format!("{movie_id},{},{},,\n", clip.clip_index, t.id));
                }
            }
        }
    }

    write_snapshot(
        &out,
        "assign-tracks",
        &[
            ("manifest", manifest_dir.display().to_string()),
            ("bank", bank_stem.display().to_string()),
            ("movie", movie_id.clone()),
            ("out", out.display().to_string()),
            ("threshold", threshold.to_string()),
        ],
    )?;
    std::fs::write(out.join("track_labels.csv"), csv)?;
    println!("labeled {labeled} of {total} tracks in {movie_id}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub n_past: Option<usize>,
    #[arg(long)]
    pub n_future: Option<usize>,
    #[arg(long)]
    pub d_text: Option<usize>,
    #[arg(long)]
    pub experts: Option<String>,
    #[arg(long)]
    pub movies: Option<usize>,
    #[arg(long)]
    pub clips_per_movie: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Maximum tolerated relative error.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub character: Option<String>,
}

const GRAD_CHECK_KEYS: &[&str] = &[
    "out", "seed", "batch-size", "d-model", "clusters", "n-past", "n-future", "d-text", "experts",
    "movies", "clips-per-movie", "eps", "tol", "character",
];

pub fn grad_check_cmd(args: GradCheckArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    cfg.check_known(GRAD_CHECK_KEYS)?;
    let out = require_path(args.out, &cfg, "out")?;
    let seed = pick(args.seed, &cfg, "seed", 0)?;
    let batch_size = pick(args.batch_size, &cfg, "batch-size", 4)?;
    let d_model = pick(args.d_model, &cfg, "d-model", 16)?;
    let clusters = pick(args.clusters, &cfg, "clusters", 2)?;
    let n_past = pick(args.n_past, &cfg, "n-past", 1)?;
    let n_future = pick(args.n_future, &cfg, "n-future", 1)?;
    let d_text = pick(args.d_text, &cfg, "d-text", 8)?;
    let experts_raw =
        pick(args.experts, &cfg, "experts", "scene:12,object:8,action:10".to_string())?;
    let movies = pick(args.movies, &cfg, "movies", 5)?;
    let clips_per_movie = pick(args.clips_per_movie, &cfg, "clips-per-movie", 4)?;
    let eps = pick(args.eps, &cfg, "eps", 1e-5)?;
    let tol = pick(args.tol, &cfg, "tol", 1e-4)?;
    let character = match args.character.or(cfg.get("character")?) {
        Some(raw) => Some(parse_variant(&raw)?),
        None => None,
    };

    let spec = SynthSpec {
        n_movies: movies,
        clips_per_movie,
        experts: parse_experts(&experts_raw)?,
        d_text,
        latent_dim: d_text.min(8),
        plot_sentences: clips_per_movie.max(4) * 2,
        seed,
        ..SynthSpec::default()
    };
    let manifest = generate_synth(&spec)?;
    let train_config = TrainConfig {
        d_model,
        netvlad_clusters: clusters,
        n_past,
        n_future,
        seed,
        character,
        ..TrainConfig::default()
    };
    let model = train_config.model_config(&manifest);
    model.validate()?;
    let params = init_params(&model, seed)?;
    let batch: Vec<usize> =
        manifest.split_clips(Split::Train).into_iter().take(batch_size).collect();
    if batch.len() < 2 {
        return Err("need at least 2 training clips for a score matrix".into());
    }
    let chars = match character {
        Some(variant) => Some(batch_chars(&manifest, &batch, variant)?),
        None => None,
    };
    let margin = train_config.margin;

    let report = grad_check(&params, eps, |tape, bound| {
        batch_loss_graph(tape, bound, &manifest, &batch, &model, margin, chars.as_ref())
            .map_err(|_| AutodiffError::EmptyInput { op: "batch loss" })
    })?;

    write_snapshot(
        &out,
        "grad-check",
        &[
            ("out", out.display().to_string()),
            ("seed", seed.to_string()),
            ("batch-size", batch_size.to_string()),
            ("d-model", d_model.to_string()),
            ("clusters", clusters.to_string()),
            ("n-past", n_past.to_string()),
            ("n-future", n_future.to_string()),
            ("d-text", d_text.to_string()),
            ("experts", experts_raw.clone()),
            ("movies", movies.to_string()),
            ("clips-per-movie", clips_per_movie.to_string()),
            ("eps", eps.to_string()),
            ("tol", tol.to_string()),
        ],
    )?;
    if let Some(v) = character {
        append_snapshot_line(&out, "character", v.name())?;
    }

    println!(
        "max relative error {:.3e} at {}[{}] ({} values checked)",
        report.max_rel_error, report.worst_param, report.worst_index, report.checked
    );
    if report.max_rel_error >= tol {
        return Err(format!(
            "gradient check failed: max relative error {:.3e} exceeds tolerance {tol:.1e}",
            report.max_rel_error
        )
        .into());
    }
    Ok(())
}
