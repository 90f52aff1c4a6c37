//! End-to-end checks of the binary: determinism, config-file precedence,
//! snapshot replay, mode validation, and a full pipeline pass over a tiny
//! synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

use keyscene::tensorio::{load_manifest, read_tensor, write_tensor, Tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_keyscene"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(stderr.lines().count(), 1, "diagnostic should be one line: {stderr:?}");
    stderr
}

/// Recursively collects (relative path, bytes) for tree comparison.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn gen_synth(dir: &Path, extra: &[&str]) {
    let mut cmd = bin();
    cmd.args([
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--movies",
        "5",
        "--clips-per-movie",
        "4",
        "--experts",
        "scene:12,object:8",
        "--d-text",
        "6",
        "--latent-dim",
        "6",
        "--plot-sentences",
        "8",
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
}

#[test]
fn gen_synth_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_synth(&a, &["--seed", "7"]);
    gen_synth(&b, &["--seed", "7"]);
    let ta = tree(&a);
    let tb = tree(&b);
    assert!(!ta.is_empty());
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        // run_config.txt records each run's own out path; everything else
        // must match byte for byte.
        if pa != "run_config.txt" {
            assert_eq!(ba, bb, "{pa} differs between identical seeds");
        }
    }

    let c = tmp.path().join("c");
    gen_synth(&c, &["--seed", "8"]);
    let tc = tree(&c);
    assert!(
        ta.iter().zip(&tc).any(|((pa, ba), (_, bc))| pa != "run_config.txt" && ba != bc),
        "different seeds produced identical trees"
    );
}

#[test]
fn flags_beat_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.cfg");
    std::fs::write(
        &cfg,
        "seed = 9\nmovies = 5\nclips-per-movie = 4\nexperts = scene:12,object:8\n\
         d-text = 6\nlatent-dim = 6\nplot-sentences = 8\n",
    )
    .unwrap();

    // --seed 7 must override the file's seed = 9.
    let flag_wins = tmp.path().join("flag_wins");
    run_ok(bin().args([
        "gen-synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        flag_wins.to_str().unwrap(),
        "--seed",
        "7",
    ]));
    let plain7 = tmp.path().join("plain7");
    gen_synth(&plain7, &["--seed", "7"]);
    assert_eq!(
        std::fs::read(flag_wins.join("manifest.txt")).unwrap(),
        std::fs::read(plain7.join("manifest.txt")).unwrap()
    );

    // Without the flag the file's seed takes effect.
    let file_seed = tmp.path().join("file_seed");
    run_ok(bin().args([
        "gen-synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        file_seed.to_str().unwrap(),
    ]));
    let plain9 = tmp.path().join("plain9");
    gen_synth(&plain9, &["--seed", "9"]);
    assert_eq!(
        std::fs::read(file_seed.join("manifest.txt")).unwrap(),
        std::fs::read(plain9.join("manifest.txt")).unwrap()
    );

    // Unknown keys are rejected, not ignored.
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "sede = 9\n").unwrap();
    let msg = run_err(bin().args([
        "gen-synth",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("nope").to_str().unwrap(),
    ]));
    assert!(msg.contains("sede"), "diagnostic should name the bad key: {msg}");
}

#[test]
fn snapshot_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    gen_synth(&first, &["--seed", "11", "--snr", "25"]);
    let replay = tmp.path().join("replay");
    run_ok(bin().args([
        "gen-synth",
        "--config",
        first.join("run_config.txt").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(first.join("manifest.txt")).unwrap(),
        std::fs::read(replay.join("manifest.txt")).unwrap()
    );
}

#[test]
fn cross_movie_mode_rejects_character_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let msg = run_err(bin().args([
        "evaluate",
        "--manifest",
        "unused",
        "--checkpoint",
        "unused",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--mode",
        "cross-movie",
        "--character",
        "track-frequency",
    ]));
    assert!(msg.contains("within-movie"), "diagnostic should explain the fix: {msg}");
}

#[test]
fn grad_check_reports_small_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(bin().args([
        "grad-check",
        "--out",
        tmp.path().join("gc").to_str().unwrap(),
        "--seed",
        "3",
        "--batch-size",
        "3",
        "--d-model",
        "10",
        "--d-text",
        "6",
        "--experts",
        "scene:8,object:6",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"), "{stdout}");
    let value: f64 = stdout
        .split_whitespace()
        .nth(3)
        .and_then(|t| t.parse().ok())
        .expect("parse error value");
    assert!(value < 1e-4, "reported error too large: {value}");
}

#[test]
fn full_pipeline_runs_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(bin().args([
        "gen-synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--movies",
        "5",
        "--clips-per-movie",
        "5",
        "--experts",
        "scene:12,object:8",
        "--d-text",
        "6",
        "--latent-dim",
        "6",
        "--plot-sentences",
        "10",
    ]));

    let run = tmp.path().join("run");
    run_ok(bin().args([
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--d-model",
        "16",
        "--clusters",
        "2",
        "--n-past",
        "1",
        "--n-future",
        "1",
        "--batch-size",
        "8",
        "--max-epochs",
        "2",
        "--seed",
        "1",
        "--character",
        "track-frequency",
    ]));
    assert!(run.join("checkpoint/config.txt").is_file());
    assert!(run.join("history.csv").is_file());

    let eval_dir = tmp.path().join("eval");
    run_ok(bin().args([
        "evaluate",
        "--manifest",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--split",
        "val",
        "--mode",
        "cross-movie",
    ]));
    assert!(eval_dir.join("report.txt").is_file());
    assert!(eval_dir.join("report.csv").is_file());
    assert!(eval_dir.join("matrix_all.csv").is_file());

    let within_dir = tmp.path().join("within");
    run_ok(bin().args([
        "evaluate",
        "--manifest",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        within_dir.to_str().unwrap(),
        "--split",
        "train",
        "--mode",
        "within-movie",
        "--character",
        "track-frequency",
        "--min-clips",
        "5",
    ]));
    let report = std::fs::read_to_string(within_dir.join("report.csv")).unwrap();
    assert!(report.lines().count() > 2, "per-movie rows expected: {report}");

    let align_dir = tmp.path().join("align");
    run_ok(bin().args([
        "align",
        "--manifest",
        data.to_str().unwrap(),
        "--out",
        align_dir.to_str().unwrap(),
    ]));
    let coverage = std::fs::read_to_string(align_dir.join("coverage.csv")).unwrap();
    assert_eq!(coverage.lines().count(), 6, "header plus one row per movie: {coverage}");
}

#[test]
fn bank_pipeline_labels_planted_tracks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_synth(&data, &["--seed", "13"]);
    let manifest = load_manifest(&data.join("manifest.txt")).unwrap();
    let movie = &manifest.movies()[0];

    // Actor image files built from the movie's planted track embeddings,
    // so the bank matches the cast.
    let images = tmp.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut per_actor: Vec<Vec<Vec<f64>>> = vec![Vec::new(); movie.cast.len()];
    for clip in manifest.movie_clips(&movie.id) {
        for track in &clip.face_tracks {
            if let Some(actor) = track.actor {
                per_actor[actor].push(track.embedding.data().to_vec());
            }
        }
    }
    let mut wrote = 0;
    for (actor, rows) in per_actor.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let t = Tensor::from_rows(rows);
        write_tensor(&t, &images.join(format!("{}.cmdt", movie.cast[actor]))).unwrap();
        wrote += 1;
    }
    assert!(wrote >= 2, "expected several planted actors, got {wrote}");

    let bank_dir = tmp.path().join("bank");
    run_ok(bin().args([
        "build-ceb",
        "--images",
        images.to_str().unwrap(),
        "--out",
        bank_dir.to_str().unwrap(),
        "--min-cluster",
        "1",
    ]));
    assert!(bank_dir.join("bank.cmdt").is_file());
    assert!(bank_dir.join("bank.names").is_file());
    let loaded = read_tensor(&bank_dir.join("bank.cmdt")).unwrap();
    assert_eq!(loaded.rows(), wrote);

    let labels_dir = tmp.path().join("labels");
    let out = run_ok(bin().args([
        "assign-tracks",
        "--manifest",
        data.to_str().unwrap(),
        "--bank",
        bank_dir.join("bank").to_str().unwrap(),
        "--movie",
        &movie.id,
        "--out",
        labels_dir.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("labeled"), "{stdout}");
    let csv = std::fs::read_to_string(labels_dir.join("track_labels.csv")).unwrap();
    let labeled_rows = csv
        .lines()
        .skip(1)
        .filter(|l| !l.ends_with(",,") && !l.is_empty())
        .count();
    assert!(labeled_rows > 0, "no track got a label:\n{csv}");
}
