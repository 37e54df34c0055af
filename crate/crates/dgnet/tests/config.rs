//! Configuration resolution: precedence, named profiles, the canonical
//! serialization round trip, validation messages, and the fingerprint.

use dgnet::config::{Config, Layout, Profile};
use dgnet::error::DgError;
use std::io::Write;

fn write_file(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    let mut f = std::fs::File::create(&p).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    p
}

#[test]
fn defaults_then_file_then_flags_each_win_in_turn() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_file(dir.path(), "a.conf", "loss.r1_gamma = 7.5\ntrain.seed = 11\n");

    // Layer 1: defaults only.
    let base = Config::load(None, None, &[]).unwrap();
    assert_eq!(base.loss.r1_gamma, 10.0);
    assert_eq!(base.train.seed, 0);

    // Layer 2: the file overrides defaults, untouched keys keep defaults.
    let filed = Config::load(Some(&file), None, &[]).unwrap();
    assert_eq!(filed.loss.r1_gamma, 7.5);
    assert_eq!(filed.train.seed, 11);
    assert_eq!(filed.loss.lambda_img, base.loss.lambda_img);

    // Layer 3: a flag overrides the file for its key only.
    let flagged = Config::load(
        Some(&file),
        None,
        &[("train.seed".into(), "99".into())],
    )
    .unwrap();
    assert_eq!(flagged.loss.r1_gamma, 7.5, "file layer survives under an unrelated flag");
    assert_eq!(flagged.train.seed, 99, "flag layer wins over the file");
}

#[test]
fn later_flags_override_earlier_ones() {
    let cfg = Config::load(
        None,
        None,
        &[
            ("train.seed".into(), "3".into()),
            ("train.seed".into(), "4".into()),
        ],
    )
    .unwrap();
    assert_eq!(cfg.train.seed, 4);
}

#[test]
fn profile_flag_beats_profile_line_in_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_file(dir.path(), "p.conf", "profile = full\n");

    let from_file = Config::load(Some(&file), None, &[]).unwrap();
    assert_eq!(from_file.profile, Profile::Full);
    assert_eq!(from_file.data.height, 256);

    let overridden = Config::load(Some(&file), Some("desk"), &[]).unwrap();
    assert_eq!(overridden.profile, Profile::Desk);
    assert_eq!(overridden.data.height, 64);
}

#[test]
fn named_profiles_differ_where_expected() {
    let desk = Config::named("desk").unwrap();
    let full = Config::named("full").unwrap();
    assert_eq!((desk.data.height, desk.data.width), (64, 32));
    assert_eq!((full.data.height, full.data.width), (256, 128));
    assert!(full.train.iters > desk.train.iters);
    let err = Config::named("laptop").unwrap_err();
    assert!(err.to_string().contains("laptop"), "unknown profile names itself: {err}");
}

#[test]
fn canonical_text_round_trips_exactly() {
    let mut cfg = Config::desk();
    cfg.set("loss.lambda_img", "3.25").unwrap();
    cfg.set("data.hflip", "false").unwrap();
    cfg.set("model.d.scales", "2").unwrap();
    let text = cfg.to_string_canonical();

    let dir = tempfile::tempdir().unwrap();
    let file = write_file(dir.path(), "round.conf", &text);
    let back = Config::load(Some(&file), None, &[]).unwrap();
    assert_eq!(back.to_string_canonical(), text);
    assert_eq!(back.loss.lambda_img, 3.25);
    assert!(!back.data.hflip);
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_file(
        dir.path(),
        "c.conf",
        "# leading comment\n\ntrain.seed = 5 # trailing comment\n   \n",
    );
    let cfg = Config::load(Some(&file), None, &[]).unwrap();
    assert_eq!(cfg.train.seed, 5);
}

#[test]
fn errors_name_the_offending_key_and_line() {
    let mut cfg = Config::desk();
    let err = cfg.set("train.warmup", "3").unwrap_err();
    assert!(
        err.to_string().contains("unknown config key 'train.warmup'"),
        "got: {err}"
    );

    let err = cfg.set("train.seed", "eleven").unwrap_err();
    assert!(err.to_string().contains("eleven"), "bad value is echoed: {err}");

    let dir = tempfile::tempdir().unwrap();
    let file = write_file(dir.path(), "bad.conf", "train.seed = 1\nnot a pair\n");
    let err = Config::load(Some(&file), None, &[]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 2"), "line number present: {msg}");

    let err = Config::load(Some(dir.path().join("absent.conf").as_path()), None, &[]).unwrap_err();
    assert!(err.to_string().contains("absent.conf"), "missing file named: {err}");
}

#[test]
fn validation_rejects_bad_geometry_and_batch_shape() {
    let mut cfg = Config::desk();
    cfg.data.height = 30;
    let err = cfg.validate().unwrap_err();
    assert!(err.to_string().contains("data.height"), "got: {err}");

    let mut cfg = Config::desk();
    cfg.train.batch_ids = 1;
    let err = cfg.validate().unwrap_err();
    assert!(err.to_string().contains("train.batch_ids"), "got: {err}");

    let mut cfg = Config::desk();
    cfg.model.d.scales = 0;
    assert!(cfg.validate().is_err());

    let mut cfg = Config::desk();
    cfg.data.mean = vec![0.5; 2];
    assert!(cfg.validate().is_err());
}

#[test]
fn load_validates_the_merged_result() {
    // Each layer alone is fine; the merge is what violates the constraint.
    let err = Config::load(None, None, &[("data.height".into(), "30".into())]).unwrap_err();
    assert!(matches!(err, DgError::Config(_)));
}

#[test]
fn fingerprint_tracks_architecture_not_schedule() {
    let base = Config::desk();
    let fp = base.fingerprint();
    assert_eq!(fp.len(), 64, "sha256 hex");

    let mut sched = Config::desk();
    sched.train.iters = 999;
    sched.loss.r1_gamma = 3.0;
    sched.train.seed = 42;
    assert_eq!(sched.fingerprint(), fp, "training knobs do not change the fingerprint");

    let mut arch = Config::desk();
    arch.model.ea.head_dim = 128;
    assert_ne!(arch.fingerprint(), fp, "architecture changes the fingerprint");

    let mut geom = Config::desk();
    geom.data.height = 128;
    assert_ne!(geom.fingerprint(), fp, "input geometry changes the fingerprint");
}

#[test]
fn resolved_config_lines_are_sorted_and_complete() {
    let cfg = Config::desk();
    let lines = cfg.to_lines();
    assert!(lines[0].starts_with("profile = "), "profile leads");
    let keys: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(" = ").next().unwrap())
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "body is sorted by key");
    for required in ["data.root", "model.ea.widths", "train.iters", "eval.beta"] {
        assert!(keys.contains(&required), "{} serialized", required);
    }
}

#[test]
fn layout_names_round_trip() {
    for l in [Layout::FolderPerId, Layout::Market, Layout::Manifest] {
        assert_eq!(Layout::from_name(l.name()).unwrap(), l);
    }
    assert!(Layout::from_name("zip").is_err());
}

#[test]
fn get_returns_canonical_values() {
    let cfg = Config::desk();
    assert_eq!(cfg.get("train.batch_ids").as_deref(), Some("2"));
    assert_eq!(cfg.get("no.such.key"), None);
    let widths = cfg.get("model.es.widths").unwrap();
    let mut round = Config::desk();
    round.set("model.es.widths", &widths).unwrap();
    assert_eq!(round.model.es.widths, cfg.model.es.widths);
}
