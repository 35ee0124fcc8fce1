use std::path::Path;
use std::process::{Command, Output};

fn find(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_find"))
        .args(args)
        .output()
        .expect("run find")
}

fn ok(args: &[&str]) -> Output {
    let out = find(args);
    assert!(
        out.status.success(),
        "find {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn every_command_has_help() {
    for cmd in ["gen-data", "train", "eval", "retrieve", "ground"] {
        let out = ok(&[cmd, "--help"]);
        assert!(stdout(&out).contains("Usage"), "{cmd}");
    }
    ok(&["--help"]);
}

#[test]
fn unknown_flags_fail_on_stderr() {
    let out = find(&["gen-data", "--bogus"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn gen_data_is_reproducible_and_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-data", "--out", p(&a), "--scenes", "10", "--seed", "3"]);
    ok(&["gen-data", "--out", p(&b), "--scenes", "10", "--seed", "3"]);
    let text = stdout(&out);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Images", "Captions", "Entities"]);
    let values: Vec<usize> = lines
        .next()
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(values[..2], [10, 10]);
    assert!(values[2] >= 10);
    for f in [
        "records.jsonl",
        "scenes.jsonl",
        "captions.json",
        "similarity_index.json",
        "stats.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let records = std::fs::read_to_string(a.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 10);
}

#[test]
fn echoed_configuration_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "gen-data",
        "--out",
        p(&dir.path().join("d")),
        "--scenes",
        "2",
        "--seed",
        "9",
    ]);
    let echoed = String::from_utf8(out.stderr).unwrap();
    let cfg = dir.path().join("resolved.toml");
    std::fs::write(&cfg, &echoed).unwrap();
    let again = ok(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(String::from_utf8(again.stderr).unwrap(), echoed);
    assert_eq!(
        std::fs::read(dir.path().join("d/records.jsonl")).unwrap(),
        std::fs::read(dir.path().join("e/records.jsonl")).unwrap()
    );
}

#[test]
fn single_scene_corpus_retrieves_one_result() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--scenes",
        "1",
        "--p-replace",
        "0",
    ]);
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--steps",
        "2",
    ]);
    let out = ok(&[
        "retrieve",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--query",
        "a red star",
    ]);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("0\t"));
}

#[test]
fn bad_inputs_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    ok(&["gen-data", "--out", p(&data), "--scenes", "3"]);
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--steps",
        "1",
    ]);

    let out = find(&[
        "retrieve",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--query",
        "a [12<broken",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains('^'), "{err}");

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = find(&["eval", "--ckpt", p(&junk), "--data", p(&data)]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());

    let out = find(&[
        "ground",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--scene",
        "99",
        "--query",
        "x",
    ]);
    assert!(!out.status.success());
}
