use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use pseudolab::annotations::{Annotation, CategoryId, DatasetSnapshot, ImageRecord, Split};
use pseudolab::detector::{DetectorHandle, ExternalDetector};
use pseudolab::geometry::BBox;
use pseudolab::orchestrator::{run_rounds, RoundConfig};
use pseudolab::Error;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn dataset() -> DatasetSnapshot {
    let mut img = ImageRecord::new("img_a", 200, 200);
    let cat = CategoryId::new(1).unwrap();
    let labeled = Annotation::manual(BBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), cat);
    img.annotations.push(labeled);
    img.hidden_truth = Some(vec![labeled, Annotation::manual(BBox::new(100.0, 100.0, 20.0, 20.0).unwrap(), cat)]);
    DatasetSnapshot::new(0, Split::Train, vec![img]).unwrap()
}

/// Trains by writing a weights file; infers one fixed detection. Refuses
/// dataset files that leak hidden truth.
const GOOD: &str = r#"verb=$1; data=$3; out=$5
if grep -q hidden_truth "$data"; then echo "hidden truth leaked" >&2; exit 9; fi
case "$verb" in
  train) mkdir -p "$out" && echo weights > "$out/model.bin" ;;
  infer) echo '{"image_id":"img_a","x":101,"y":101,"w":20,"h":20,"c":1,"score":0.9}' > "$out" ;;
  *) exit 2 ;;
esac"#;

fn handle(cmd: PathBuf, workdir: &Path) -> DetectorHandle {
    DetectorHandle::external(ExternalDetector::new(vec![cmd.display().to_string()], workdir)).unwrap()
}

#[test]
fn external_detector_runs_a_full_round() {
    let dir = tempfile::tempdir().unwrap();
    let det = handle(script(dir.path(), "det.sh", GOOD), &dir.path().join("work"));
    let cfg = RoundConfig { evaluate: false, ..RoundConfig::default() };
    let out = run_rounds(&dataset(), None, &det, &cfg, Some(&dir.path().join("run"))).unwrap();
    assert_eq!(out.rounds.len(), 1);
    assert_eq!(out.rounds[0].l_x, 1);
    assert_eq!(out.rounds[0].detector_tag.len(), 16);
    assert_eq!(out.final_dataset.annotation_count(), 2);
}

#[test]
fn failing_detector_surfaces_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let det = handle(script(dir.path(), "bad.sh", "echo 'out of memory' >&2; exit 1"), dir.path());
    match det.train(&dataset()) {
        Err(e @ Error::Detector { .. }) => {
            assert_eq!(e.exit_code(), 3);
            let Error::Detector { stderr, .. } = e else { unreachable!() };
            assert!(stderr.contains("out of memory"));
        }
        other => panic!("expected detector error, got {other:?}"),
    }
}

#[test]
fn slow_detector_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let ext = ExternalDetector::new(vec![script(dir.path(), "slow.sh", "exec sleep 10").display().to_string()], dir.path())
        .with_timeout(Duration::from_millis(200));
    let det = DetectorHandle::external(ext).unwrap();
    assert!(matches!(det.train(&dataset()), Err(Error::Timeout(_))));
}

#[test]
fn malformed_detections_are_protocol_errors() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"case "$1" in train) mkdir -p "$5" ;; infer) echo 'not json' > "$5" ;; esac"#;
    let det = handle(script(dir.path(), "garbled.sh", body), dir.path());
    let trained = det.train(&dataset()).unwrap();
    assert!(matches!(trained.infer(&dataset()), Err(Error::Protocol(_))));

    let body = r#"case "$1" in train) mkdir -p "$5" ;; infer) echo '{"image_id":"nope","x":1,"y":1,"w":2,"h":2,"c":1,"score":0.5}' > "$5" ;; esac"#;
    let det = handle(script(dir.path(), "stranger.sh", body), dir.path());
    let trained = det.train(&dataset()).unwrap();
    assert!(matches!(trained.infer(&dataset()), Err(Error::Protocol(_))));
}

#[test]
fn environment_is_limited_to_the_allowlist() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"if [ -n "$SECRET_TOKEN" ]; then echo leaked >&2; exit 1; fi; mkdir -p "$5""#;
    std::env::set_var("SECRET_TOKEN", "x");
    let det = handle(script(dir.path(), "env.sh", body), dir.path());
    assert!(det.train(&dataset()).is_ok());
}
