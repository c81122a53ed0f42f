//! End-to-end tests of the `r2d` binary against checked-in fixtures.
//!
//! Set `UPDATE_GOLDEN=1` to regenerate the fixture bundles and golden
//! outputs after an intentional behavior change.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use r2d_core::response::{random_bundle, NodeGrid, ResponseBundle};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_r2d"));
    cmd.env_remove("R2D_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The checked-in teacher/student pair: a two-level grid with a spread of
/// confident nodes so every region kind is populated.
fn make_fixture_pair() -> (ResponseBundle, ResponseBundle) {
    let grid = NodeGrid {
        levels: vec![
            r2d_core::response::GridLevel { width: 4, height: 4, stride: 8.0 },
            r2d_core::response::GridLevel { width: 2, height: 2, stride: 16.0 },
        ],
    };
    let mut teacher = random_bundle(grid.clone(), 5, 6, 0.5, 2.0, 97);
    teacher.cls.nodes[1][0] = 3.0;
    teacher.cls.nodes[5][1] = 2.5;
    teacher.cls.nodes[9][2] = -0.5;
    teacher.cls.nodes[13][3] = -1.5;
    teacher.cls.nodes[17][4] = 2.0;
    let student = random_bundle(grid, 5, 6, 0.5, 2.0, 98);
    (teacher, student)
}

fn regenerate_goldens() {
    let dir = fixture_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let (teacher, student) = make_fixture_pair();
    teacher.save(&dir.join("teacher.json")).unwrap();
    student.save(&dir.join("student.json")).unwrap();

    let teacher_path = dir.join("teacher.json");
    let q = run(&["--format", "csv", "quality", teacher_path.to_str().unwrap()]);
    assert!(q.status.success());
    std::fs::write(dir.join("golden_quality.csv"), &q.stdout).unwrap();

    let r = run(&["regions", teacher_path.to_str().unwrap()]);
    assert!(r.status.success());
    std::fs::write(dir.join("golden_regions.json"), &r.stdout).unwrap();

    let l = run(&[
        "loss",
        teacher_path.to_str().unwrap(),
        dir.join("student.json").to_str().unwrap(),
    ]);
    assert!(l.status.success());
    std::fs::write(dir.join("golden_loss.json"), &l.stdout).unwrap();

    // toy annotation source and the published step layouts
    let toy = r2d_core::scenario::toy_dataset(50, 120, 5, 3);
    r2d_core::scenario::save_annotations(&toy, &dir.join("toy_coco_50.json")).unwrap();
    let write_spec = |name: &str, steps: Vec<Vec<i64>>| {
        let spec = r2d_core::scenario::ScenarioSpec {
            name: name.to_string(),
            steps,
            source: PathBuf::from("toy_coco_50.json"),
            test_filter: None,
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&spec).unwrap(),
        )
        .unwrap();
    };
    write_spec("three_step", vec![(1..=15).collect(), (16..=32).collect(), (33..=50).collect()]);
    write_spec(
        "five_step",
        vec![
            (1..=15).collect(),
            (16..=24).collect(),
            (25..=32).collect(),
            (33..=42).collect(),
            (43..=50).collect(),
        ],
    );
}

#[test]
fn golden_files_are_current() {
    if std::env::var("UPDATE_GOLDEN").is_ok() {
        regenerate_goldens();
        return;
    }
    // fixture bundles must match the generator exactly
    let (teacher, student) = make_fixture_pair();
    let on_disk = ResponseBundle::load(&fixture_dir().join("teacher.json"), Default::default())
        .expect("teacher fixture exists; regenerate with UPDATE_GOLDEN=1");
    assert_eq!(teacher.cls, on_disk.cls);
    assert_eq!(teacher.reg, on_disk.reg);
    let on_disk = ResponseBundle::load(&fixture_dir().join("student.json"), Default::default())
        .unwrap();
    assert_eq!(student.cls, on_disk.cls);
}

#[test]
fn quality_csv_matches_golden_bytes() {
    let teacher = fixture_dir().join("teacher.json");
    let out = run(&["--format", "csv", "quality", teacher.to_str().unwrap()]);
    assert!(out.status.success());
    let golden = std::fs::read(fixture_dir().join("golden_quality.csv")).unwrap();
    assert_eq!(out.stdout, golden);
}

#[test]
fn quality_all_zero_logits_gives_half_confidence() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = random_bundle(NodeGrid::single(3, 3, 8.0), 4, 6, 0.5, 1.0, 5);
    for node in &mut bundle.cls.nodes {
        node.iter_mut().for_each(|z| *z = 0.0);
    }
    let path = dir.path().join("zeros.json");
    bundle.save(&path).unwrap();
    let out = run(&["quality", path.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    for q in v["q_cls"].as_array().unwrap() {
        assert_eq!(q.as_f64().unwrap(), 0.5);
    }
}

#[test]
fn quality_rejects_corrupt_json_with_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"grid\": {\"levels\": [}").unwrap();
    let out = run(&["quality", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte offset"), "stderr: {err}");
}

#[test]
fn regions_json_matches_golden_bytes() {
    let teacher = fixture_dir().join("teacher.json");
    let out = run(&["regions", teacher.to_str().unwrap()]);
    assert!(out.status.success());
    let golden = std::fs::read(fixture_dir().join("golden_regions.json")).unwrap();
    assert_eq!(out.stdout, golden);
}

#[test]
fn regions_theta_extremes() {
    let teacher = fixture_dir().join("teacher.json");
    let out = run(&["regions", teacher.to_str().unwrap(), "--theta", "1.0"]);
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(v["cls"]["candidates"].as_array().unwrap().len(), 0);

    let out = run(&["regions", teacher.to_str().unwrap(), "--theta", "0"]);
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(v["cls"]["candidates"].as_array().unwrap().len(), 20);
}

#[test]
fn regions_writes_rasters_per_level() {
    let teacher = fixture_dir().join("teacher.json");
    let dir = tempfile::tempdir().unwrap();
    let raster = dir.path().join("rasters");
    let out = run(&[
        "regions",
        teacher.to_str().unwrap(),
        "--raster",
        raster.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for name in ["cls_level0.csv", "cls_level1.csv", "reg_level0.csv", "reg_level1.csv"] {
        assert!(raster.join(name).exists(), "missing {name}");
    }
    let level0 = std::fs::read_to_string(raster.join("cls_level0.csv")).unwrap();
    assert_eq!(level0.lines().count(), 4);
    assert_eq!(level0.lines().next().unwrap().split(',').count(), 4);
}

#[test]
fn loss_json_matches_golden_bytes() {
    let dir = fixture_dir();
    let out = run(&[
        "loss",
        dir.join("teacher.json").to_str().unwrap(),
        dir.join("student.json").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let golden = std::fs::read(dir.join("golden_loss.json")).unwrap();
    assert_eq!(out.stdout, golden);
}

#[test]
fn loss_teacher_as_its_own_student_is_zero() {
    let teacher = fixture_dir().join("teacher.json");
    let out = run(&["loss", teacher.to_str().unwrap(), teacher.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    for key in ["l_cls_distill", "l_reg_distill", "l_distill_total"] {
        assert_eq!(v[key].as_f64().unwrap(), 0.0, "{key}");
    }
}

#[test]
fn loss_gradcheck_passes_on_fixture() {
    let dir = fixture_dir();
    let out = run(&[
        "loss",
        dir.join("teacher.json").to_str().unwrap(),
        dir.join("student.json").to_str().unwrap(),
        "--gradcheck",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(v["gradcheck_max_rel_err"].as_f64().unwrap() < 1e-6);
}

#[test]
fn loss_misaligned_bundles_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let other = random_bundle(NodeGrid::single(4, 4, 8.0), 3, 6, 0.5, 2.0, 1);
    let path = dir.path().join("other.json");
    other.save(&path).unwrap();
    let out = run(&[
        "loss",
        fixture_dir().join("teacher.json").to_str().unwrap(),
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn loss_lambda_masking_zeroes_regression_term() {
    let dir = fixture_dir();
    let out = run(&[
        "loss",
        dir.join("teacher.json").to_str().unwrap(),
        dir.join("student.json").to_str().unwrap(),
        "--lambda5",
        "0",
        "--lambda6",
        "0",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(v["l_reg_distill"].as_f64().unwrap(), 0.0);
}

const FAST_SIM: &[&str] = &[
    "--steps",
    "2,2",
    "--num-classes",
    "4",
    "--epochs",
    "2",
    "--scenes-per-epoch",
    "8",
];

#[test]
fn simulate_single_step_joint_smoke() {
    let out = bin()
        .args(["--format", "csv", "simulate", "--protocol", "joint"])
        .args(["--steps", "4", "--num-classes", "4", "--epochs", "2", "--scenes-per-epoch", "8"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert!(text.starts_with("protocol,step,group,score,forgetting\n"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn simulate_is_byte_deterministic() {
    let run_once = || {
        let out = bin().args(["--format", "csv", "simulate", "--compare"]).args(FAST_SIM).output().unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run_once(), run_once());
}

#[test]
fn simulate_seed_env_fallback_matches_flag() {
    let with_flag = bin()
        .args(["--format", "csv", "--seed", "11", "simulate"])
        .args(FAST_SIM)
        .output()
        .unwrap();
    let with_env = bin()
        .env("R2D_SEED", "11")
        .args(["--format", "csv", "simulate"])
        .args(FAST_SIM)
        .output()
        .unwrap();
    assert!(with_flag.status.success() && with_env.status.success());
    assert_eq!(with_flag.stdout, with_env.stdout);
}

#[test]
fn simulate_compare_jobs_parallel_output_identical() {
    let serial = bin().args(["--format", "csv", "simulate", "--compare"]).args(FAST_SIM).output().unwrap();
    let parallel = bin()
        .args(["--format", "csv", "simulate", "--compare", "--jobs", "3"])
        .args(FAST_SIM)
        .output()
        .unwrap();
    assert!(serial.status.success() && parallel.status.success());
    assert_eq!(serial.stdout, parallel.stdout);
}

#[test]
fn simulate_divergence_exit_4() {
    let out = bin()
        .args(["simulate", "--protocol", "finetune", "--lr", "inf"])
        .args(FAST_SIM)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverged") && err.contains("step 0"), "stderr: {err}");
}

#[test]
fn simulate_bad_steps_exit_5() {
    let out = bin()
        .args(["simulate", "--steps", "9,9", "--num-classes", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}

fn category_counts(manifest: &serde_json::Value) -> Vec<usize> {
    manifest["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["class_ids"].as_array().unwrap().len())
        .collect()
}

#[test]
fn split_three_step_yields_15_17_18() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "split",
        fixture_dir().join("three_step.json").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(category_counts(&v["manifest"]), vec![15, 17, 18]);
    assert_eq!(v["validation"]["passed"], serde_json::Value::Bool(true));
    for k in 1..=3 {
        let step = r2d_core::scenario::load_annotations(
            &dir.path().join(format!("three_step_step{k}.json")),
        )
        .unwrap();
        let want = [15, 17, 18][k - 1];
        assert_eq!(step.categories.len(), want);
    }
}

#[test]
fn split_five_step_yields_published_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "split",
        fixture_dir().join("five_step.json").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(category_counts(&v["manifest"]), vec![15, 9, 8, 10, 8]);
}

#[test]
fn split_unknown_class_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "name": "bad",
        "steps": [[1, 2, 99]],
        "source": fixture_dir().join("toy_coco_50.json"),
    });
    let spec_path = dir.path().join("bad.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = run(&[
        "split",
        spec_path.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn selftest_reports_defaults() {
    let out = run(&["selftest"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("theta = 0.05"));
    assert!(text.contains("t1 = 10"));
    assert!(text.contains("t2 = 5"));
    assert!(text.contains("all defaults match"));
}
