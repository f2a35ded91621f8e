use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atd_cli::manifest::{read_manifest, MANIFEST_FILE, PARTIAL_MARKER, RESOLVED_CONFIG_FILE};
use atd_cli::plot::Curves;
use atd_core::checkpoint::read_manifest as read_checkpoint;
use atd_core::training::{Datasets, EvalLog};

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").to_string_lossy().into_owned()
}

fn atd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = atd(args);
    assert!(out.status.success(), "atd {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Relative path -> bytes for every file under `dir`, skipping manifests.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != MANIFEST_FILE {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn generate_world_is_reproducible_and_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate-world", "--config", &smoke(), "--seed", "11", "--out", &s(&a)]);
    ok(&["generate-world", "--config", &smoke(), "--seed", "11", "--out", &s(&b)]);
    let snap = snapshot(&a);
    assert!(snap.keys().any(|k| k.starts_with("unseen")));
    assert_eq!(snap, snapshot(&b));
    let data = Datasets::load(&a).unwrap();
    data.check_disjoint().unwrap();
    let seen: BTreeSet<_> = data.train.world_ids().into_iter().collect();
    assert!(data.unseen.world_ids().iter().all(|w| !seen.contains(w)));
    assert_eq!(read_manifest(&a).unwrap().seeds.data, 11);
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    std::fs::write(tmp.path().join("stale.txt"), "x").unwrap();
    let refused = atd(&["generate-world", "--config", &smoke(), "--out", &out]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&["generate-world", "--config", &smoke(), "--out", &out, "--force"]);
    assert!(!tmp.path().join("stale.txt").exists());
    assert!(tmp.path().join(MANIFEST_FILE).exists());
    assert!(tmp.path().join(RESOLVED_CONFIG_FILE).exists());
    assert!(!tmp.path().join(PARTIAL_MARKER).exists());
    assert!(read_manifest(tmp.path()).unwrap().finished_unix.is_some());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("o"));
    for args in [
        vec!["train", "--config", "missing.toml", "--out", &out],
        vec!["train", "--set", "no_such_key=1", "--out", &out],
        vec!["train", "--ablate", "nonsense", "--out", &out],
        vec!["eval", "--checkpoint", "/nonexistent", "--out", &out],
    ] {
        let o = atd(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
}

#[test]
fn train_eval_plot_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["generate-world", "--config", &smoke(), "--out", &s(&p("data"))]);
    ok(&[
        "train",
        "--config",
        &smoke(),
        "--data",
        &s(&p("data")),
        "--max-steps",
        "10",
        "--set",
        "eval_every=5",
        "--out",
        &s(&p("run")),
    ]);

    let lines = std::fs::read_to_string(p("run/train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
    let m = read_manifest(&p("run")).unwrap();
    assert_eq!(m.config.train.max_steps, 10);
    assert!(!p("run").join(PARTIAL_MARKER).exists());
    assert!(p("run/final_unseen_report.json").exists());

    let ckpt = s(&p("run/checkpoints/last"));
    for out in ["e1", "e2"] {
        ok(&["eval", "--config", &smoke(), "--checkpoint", &ckpt, "--data", &s(&p("data")), "--out", &s(&p(out))]);
    }
    for f in ["report.json", "trajectories.jsonl"] {
        assert_eq!(std::fs::read(p("e1").join(f)).unwrap(), std::fs::read(p("e2").join(f)).unwrap(), "{f}");
    }

    ok(&["plot", "--run", &s(&p("run")), "--out", &s(&p("plots"))]);
    assert!(p("plots/sr.svg").exists() && p("plots/spl.svg").exists());
    let curves: Curves = serde_json::from_str(&std::fs::read_to_string(p("plots/curves.json")).unwrap()).unwrap();
    let evals: Vec<EvalLog> = std::fs::read_to_string(p("run/eval_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let last = evals.last().unwrap();
    assert_eq!(curves.steps.last(), Some(&last.step));
    assert_eq!(curves.unseen_sr.last(), Some(&last.unseen.aggregate.sr));
    assert_eq!(curves.seen_sr.last(), Some(&last.seen.aggregate.sr));
}

#[test]
fn baseline_checkpoint_has_no_imagination_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", &smoke(), "--ablate", "baseline", "--max-steps", "2", "--out", &s(&run)]);
    let m = read_checkpoint(&run.join("checkpoints/last")).unwrap();
    assert_eq!(m.model.variant, "baseline");
    assert!(!m.has_param_prefix("sgca."));
    assert!(!m.has_param_prefix("policy.injection."));
    assert!(m.has_param_prefix("policy."));
}
