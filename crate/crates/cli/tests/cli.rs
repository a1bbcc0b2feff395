use std::path::Path;
use std::process::{Command, Output};

use fringe_core::annot::parse_annotations;
use fringe_core::detect::Detection;
use fringe_core::predictions::{write_predictions, FramePredictions};
use fringe_core::track::{rise_model, DEFAULT_FPS};
use fringe_core::EllipseAnnotation;
use sha2::{Digest, Sha256};

fn fringe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fringe"))
        .args(args)
        .current_dir(dir)
        .env_remove("FRINGE_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree_digest(dir: &Path) -> String {
    let mut names: Vec<_> = walk(dir);
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&p).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn truth_as_predictions(truth_csv: &Path) -> String {
    let truth = parse_annotations(&std::fs::read_to_string(truth_csv).unwrap()).unwrap();
    let frames: Vec<FramePredictions> = truth
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id.clone(),
            detections: f.annotations.iter().map(|&e| Detection::from_ellipse(e, 1.0)).collect(),
        })
        .collect();
    write_predictions(&frames).unwrap()
}

#[test]
fn synth_and_predict_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let o = fringe(tmp.path(), &["--seed", "11", "synth", "--count", "6", "--out", run]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = fringe(tmp.path(), &["predict", run]);
        assert!(o.status.success(), "{}", stderr(&o));
        digests.push(tree_digest(&tmp.path().join(run)));
    }
    assert_eq!(digests[0], digests[1]);

    let o = fringe(tmp.path(), &["--seed", "12", "synth", "--count", "6", "--out", "c"]);
    assert!(o.status.success());
    let a = std::fs::read(tmp.path().join("a/frame_00000.png")).unwrap();
    let c = std::fs::read(tmp.path().join("c/frame_00000.png")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_count_and_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fringe(tmp.path(), &["synth", "--count", "0", "--out", "d"]);
    assert!(o.status.success());
    let ann = std::fs::read_to_string(tmp.path().join("d/annotations.csv")).unwrap();
    assert_eq!(ann.lines().count(), 1);
    let o = fringe(tmp.path(), &["predict", "d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = std::fs::read_to_string(tmp.path().join("d/predictions.csv")).unwrap();
    assert_eq!(pred.trim(), "filename,x_min,y_min,x_max,y_max,score,cx,cy,a,b,theta,rings");
}

#[test]
fn corrupt_png_is_reported_and_others_still_predicted() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(fringe(tmp.path(), &["synth", "--count", "3", "--out", "d"]).status.success());
    std::fs::write(tmp.path().join("d/frame_00001.png"), b"not a png").unwrap();
    let o = fringe(tmp.path(), &["predict", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frame_00001.png"), "{}", stderr(&o));
    let pred = std::fs::read_to_string(tmp.path().join("d/predictions.csv")).unwrap();
    assert!(pred.contains("frame_00000.png") && pred.contains("frame_00002.png"));
    assert!(!pred.contains("frame_00001.png"));
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(fringe(tmp.path(), &["synth", "--count", "4", "--out", "d"]).status.success());
    std::fs::write(tmp.path().join("perfect.csv"), truth_as_predictions(&tmp.path().join("d/annotations.csv"))).unwrap();
    let o = fringe(tmp.path(), &["eval", "perfect.csv", "d/annotations.csv", "--out", "out/report.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["region"]["map_coco"], 1.0);
    assert_eq!(report["region"]["mae"], 0.0);
    let table = std::fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "dataset,mAP,MAE,acc0.5,acc0.7,acc1,acc1.5,acc2");
    assert_eq!(lines[1], "region,1,0,1,1,1,1,1");

    let o = fringe(tmp.path(), &["rank", "perfect.csv", "d/annotations.csv"]);
    assert!(o.status.success());
    let ranking = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = ranking.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(*row, format!("{},frame_{i:05}.png,0", i + 1));
    }
}

#[test]
fn eval_lists_missing_frames() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(fringe(tmp.path(), &["synth", "--count", "3", "--out", "d"]).status.success());
    let full = truth_as_predictions(&tmp.path().join("d/annotations.csv"));
    let partial: String = full
        .lines()
        .filter(|l| !l.starts_with("frame_00002.png"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(tmp.path().join("partial.csv"), partial).unwrap();
    let o = fringe(tmp.path(), &["eval", "partial.csv", "d/annotations.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frame_00002.png"), "{}", stderr(&o));
}

#[test]
fn rank_puts_worst_frame_first() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(fringe(tmp.path(), &["synth", "--count", "5", "--out", "d"]).status.success());
    let mut truth = parse_annotations(&std::fs::read_to_string(tmp.path().join("d/annotations.csv")).unwrap()).unwrap();
    truth[3].annotations[0].cx += 30.0;
    let frames: Vec<FramePredictions> = truth
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id.clone(),
            detections: f.annotations.iter().map(|&e| Detection::from_ellipse(e, 1.0)).collect(),
        })
        .collect();
    std::fs::write(tmp.path().join("p.csv"), write_predictions(&frames).unwrap()).unwrap();
    let first = fringe(tmp.path(), &["rank", "p.csv", "d/annotations.csv"]);
    let second = fringe(tmp.path(), &["rank", "p.csv", "d/annotations.csv"]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("1,frame_00003.png,"), "{text}");
}

fn rising_sequence(frames: usize, centers: &[(f64, f64)], a_max: f64, tau: f64) -> String {
    let seq: Vec<FramePredictions> = (0..frames)
        .map(|i| {
            let t = i as f64 / DEFAULT_FPS;
            FramePredictions {
                frame_id: format!("t{i:04}.png"),
                detections: centers
                    .iter()
                    .map(|&(cx, cy)| {
                        let rings = rise_model(t, a_max, tau, 0.0);
                        Detection::from_ellipse(EllipseAnnotation::new(cx, cy, 30.0, 24.0, 0.0, rings).unwrap(), 0.9)
                    })
                    .collect(),
            }
        })
        .collect();
    write_predictions(&seq).unwrap()
}

#[test]
fn track_recovers_rise_time_and_separates_antinodes() {
    let tmp = tempfile::tempdir().unwrap();
    let tau = 2e-3;
    std::fs::write(
        tmp.path().join("seq.csv"),
        rising_sequence(120, &[(100.0, 100.0), (300.0, 120.0)], 6.0, tau),
    )
    .unwrap();
    let o = fringe(tmp.path(), &["track", "seq.csv", "--out", "tr"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tracks = std::fs::read_to_string(tmp.path().join("tr/tracks.csv")).unwrap();
    let ids: std::collections::BTreeSet<&str> =
        tracks.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 2);

    let fits = std::fs::read_to_string(tmp.path().join("tr/rise_fits.csv")).unwrap();
    let rows: Vec<Vec<&str>> = fits.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let fitted: f64 = r[3].parse().unwrap();
        assert!((fitted - tau).abs() / tau < 0.05, "tau {fitted}");
    }
}

#[test]
fn track_needs_six_samples() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("one.csv"), rising_sequence(1, &[(100.0, 100.0)], 6.0, 2e-3)).unwrap();
    let o = fringe(tmp.path(), &["track", "one.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 6"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_help_lists_headers() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fringe(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fringe(tmp.path(), &["synth", "--count", "lots"]).status.code(), Some(1));
    let o = fringe(tmp.path(), &["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8(o.stdout).unwrap();
    for header in ["track_id,frame,t,cx,cy,rings", "rank,frame_id,loss", "filename,x_min,y_min"] {
        assert!(help.contains(header), "{header}");
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.cfg"), "seed = 5\nsynth.width = 200\nsynth.height = 150\n").unwrap();
    assert!(fringe(tmp.path(), &["--config", "run.cfg", "synth", "--count", "1", "--out", "a"]).status.success());
    assert!(fringe(tmp.path(), &["--seed", "5", "--config", "run.cfg", "synth", "--count", "1", "--out", "b"])
        .status
        .success());
    assert!(fringe(tmp.path(), &["--seed", "6", "--config", "run.cfg", "synth", "--count", "1", "--out", "c"])
        .status
        .success());
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("frame_00000.png")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let img = fringe_core::GrayImage::load_png(&tmp.path().join("a/frame_00000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (200, 150));

    std::fs::write(tmp.path().join("bad.cfg"), "synth.colour = red\n").unwrap();
    let o = fringe(tmp.path(), &["--config", "bad.cfg", "synth", "--count", "1", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth.colour"));
}

#[test]
fn data_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fringe"))
        .args(["synth", "--count", "2"])
        .current_dir(tmp.path())
        .env("FRINGE_DATA_DIR", tmp.path().join("env_data"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("env_data/frame_00001.png").is_file());
}
