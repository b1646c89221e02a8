//! End-to-end tests of the pcrd binary: exit codes, determinism contracts
//! and output schemas.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcrd_core::{kitti, project_cloud, segment_ground, synth, PipelineConfig, Point3};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pcrd")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn pcrd")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pcrd_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.to_lowercase().contains("usage") || text.contains("help"));
}

#[test]
fn bad_config_exits_two() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.txt");
    std::fs::write(&cfg, "ground.nope = 1\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "bench", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn detect_without_weights_exits_two() {
    let dir = tmp_dir("noweights");
    let scan = dir.join("000000.bin");
    kitti::write_velodyne_bin(&scan, &[Point3::new(5.0, 0.0, -1.0)]).unwrap();
    let out = run(&["detect", scan.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tmp_dir("synthdet");
    let (d1, d2, d3) = (dir.join("a"), dir.join("b"), dir.join("c"));
    for d in [&d1, &d2] {
        let out = run(&[
            "--seed",
            "7",
            "synth",
            "--out",
            d.to_str().unwrap(),
            "--n-id",
            "12",
            "--n-ood",
            "8",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read_dir_bytes(&d1), read_dir_bytes(&d2));

    let out = run(&[
        "--seed",
        "8",
        "synth",
        "--out",
        d3.to_str().unwrap(),
        "--n-id",
        "12",
        "--n-ood",
        "8",
    ]);
    assert!(out.status.success());
    assert_ne!(read_dir_bytes(&d1), read_dir_bytes(&d3));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_ground_perfect_fixture_reports_ones() {
    let dir = tmp_dir("evalground");
    // Render a world, run segmentation through the library, then write the
    // per-point labels straight from the prediction: the CLI must report
    // every metric as exactly 1.
    let cfg = PipelineConfig::default();
    let mut scene = synth::Scene::flat(1.7);
    scene.obstacles.push(synth::Shape::Box(pcrd_core::Box3::new(
        Point3::new(9.0, 1.0, -0.9),
        [2.0, 1.5, 1.6],
        0.2,
    )));
    let scan = synth::render_scan(&cfg.projection, &scene, 3);
    let scan_path = dir.join("000000.bin");
    kitti::write_velodyne_bin(&scan_path, &scan.points).unwrap();

    // The .bin stores f32; predictions must come from the same rounded
    // points the CLI will read back.
    let points = kitti::read_velodyne_bin(&scan_path).unwrap();
    let cloud = project_cloud(&points, &cfg.projection).unwrap();
    let (mask, _) = segment_ground(&cloud, &cfg.ground, 0);
    let mut bytes = Vec::new();
    for p in &points {
        let c = cfg.projection.col_of_azimuth(p.y.atan2(p.x));
        let r = cfg.projection.row_of_elevation((p.z / p.norm()).asin());
        let label: u32 = if mask.is_ground(r, c) { 40 } else { 10 };
        bytes.extend_from_slice(&label.to_le_bytes());
    }
    std::fs::write(dir.join("000000.label"), bytes).unwrap();

    let report = dir.join("report.txt");
    let csv = dir.join("per_scan.csv");
    let out = run(&[
        "--seed",
        "0",
        "eval-ground",
        scan_path.to_str().unwrap(),
        "--labels",
        dir.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    for key in ["precision", "recall", "accuracy", "iou"] {
        assert!(
            text.contains(&format!("{key} = 1.000000")),
            "report:\n{text}"
        );
    }
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("scan,tp,fp,tn,fn,precision,recall,accuracy,iou\n"));
    assert_eq!(csv_text.lines().count(), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bench_emits_four_stage_csv() {
    let dir = tmp_dir("bench");
    let csv = dir.join("latency.csv");
    // Small image keeps this quick; the config must keep 32 sectors valid.
    let cfg_path = dir.join("cfg.txt");
    std::fs::write(&cfg_path, "projection.s_h = 32\nprojection.s_w = 512\n").unwrap();
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--threads",
        "1",
        "bench",
        "--repeats",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header, "run,projection_ms,ground_ms,cluster_ms,network_ms,total_ms",
        "four stage columns plus run and total"
    );
    assert_eq!(text.lines().count(), 4); // header + 3 runs
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("median:"));
    assert!(stdout.contains("ground per sector"));
    assert!(stdout.contains("fps"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn train_then_detect_round_trip() {
    let dir = tmp_dir("traindetect");
    let ckpt = dir.join("ckpt");
    let out = run(&[
        "--seed",
        "3",
        "train",
        "--epochs",
        "2",
        "--n-id",
        "45",
        "--n-ood",
        "45",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["classifier.pcrd", "boxnet.pcrd", "meta.txt", "config.txt"] {
        assert!(ckpt.join(file).exists(), "missing {file}");
    }
    let meta = std::fs::read_to_string(ckpt.join("meta.txt")).unwrap();
    assert!(meta.contains("gamma_c"));
    assert!(meta.contains("config_hash"));

    // A world with one car-sized box; gates stay as calibrated.
    let cfg = PipelineConfig::default();
    let mut scene = synth::Scene::flat(1.73);
    scene.obstacles.push(synth::Shape::Box(pcrd_core::Box3::new(
        Point3::new(10.0, 0.0, -0.95),
        [3.9, 1.6, 1.56],
        0.3,
    )));
    let scan = synth::render_scan(&cfg.projection, &scene, 5);
    let scan_path = dir.join("000042.bin");
    kitti::write_velodyne_bin(&scan_path, &scan.points).unwrap();

    let dets = dir.join("detections.txt");
    let ply_dir = dir.join("ply");
    let props_dir = dir.join("props");
    let out = run(&[
        "--config",
        ckpt.join("config.txt").to_str().unwrap(),
        "--seed",
        "3",
        "detect",
        scan_path.to_str().unwrap(),
        "--out",
        dets.to_str().unwrap(),
        "--dump-ply",
        ply_dir.to_str().unwrap(),
        "--dump-proposals",
        props_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&dets).unwrap();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 10, "line: {line}");
        assert_eq!(fields[0], "000042");
    }
    let ply = std::fs::read_to_string(ply_dir.join("000042.ply")).unwrap();
    assert!(ply.starts_with("ply\n"));
    // Proposal dump: 8 text fields per line plus the binary point payload.
    let props = std::fs::read_to_string(props_dir.join("000042.props")).unwrap();
    let n_props = props.lines().count();
    assert!(n_props >= 1);
    for line in props.lines() {
        assert_eq!(line.split_whitespace().count(), 8);
    }
    let payload = std::fs::read(props_dir.join("000042.points")).unwrap();
    assert_eq!(payload.len(), n_props * 64 * 3 * 4);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_detect_emits_class_difficulty_table() {
    let dir = tmp_dir("evaldetect");
    let ckpt = dir.join("ckpt");
    let out = run(&[
        "--seed",
        "2",
        "train",
        "--epochs",
        "1",
        "--n-id",
        "30",
        "--n-ood",
        "30",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // One scan with one car; labels/calib in KITTI text formats.
    let cfg = PipelineConfig::default();
    let mut scene = synth::Scene::flat(1.73);
    scene.obstacles.push(synth::Shape::Box(pcrd_core::Box3::new(
        Point3::new(12.0, 1.0, -0.95),
        [3.9, 1.6, 1.56],
        0.2,
    )));
    let scan = synth::render_scan(&cfg.projection, &scene, 4);
    let scan_path = dir.join("000007.bin");
    kitti::write_velodyne_bin(&scan_path, &scan.points).unwrap();
    // Camera coords for velodyne (12, 1, -0.95 - 0.78): cam = (-y, -z, x).
    std::fs::write(
        dir.join("000007.txt"),
        "Car 0.00 0 0.0 600.0 150.0 700.0 220.0 1.56 1.60 3.90 -1.00 1.73 12.00 -1.77\n",
    )
    .unwrap();
    let calib_path = dir.join("calib.txt");
    std::fs::write(
        &calib_path,
        "P2: 700 0 600 0 0 700 180 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n",
    )
    .unwrap();

    let csv = dir.join("ap.csv");
    let out = run(&[
        "--config",
        ckpt.join("config.txt").to_str().unwrap(),
        "--seed",
        "2",
        "eval-detect",
        scan_path.to_str().unwrap(),
        "--labels",
        dir.to_str().unwrap(),
        "--calib",
        calib_path.to_str().unwrap(),
        "--mode",
        "40",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "class,difficulty,mode,iou_th,ap,n_gt,n_det"
    );
    // Header plus 3 classes x 3 difficulties.
    assert_eq!(text.lines().count(), 10);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ap.car.easy"));
    assert!(stdout.contains("ap.pedestrian.moderate = absent"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn detect_is_deterministic_across_threads() {
    let dir = tmp_dir("threads");
    let ckpt = dir.join("ckpt");
    let out = run(&[
        "--seed",
        "1",
        "train",
        "--epochs",
        "1",
        "--n-id",
        "30",
        "--n-ood",
        "30",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = PipelineConfig::default();
    let mut paths = Vec::new();
    for i in 0..3 {
        let mut scene = synth::Scene::flat(1.73);
        scene.obstacles.push(synth::Shape::Cylinder {
            cx: 8.0 + i as f64,
            cy: -1.0 + i as f64,
            z0: -1.73,
            z1: -0.1,
            radius: 0.3,
        });
        let scan = synth::render_scan(&cfg.projection, &scene, i as u64);
        let p = dir.join(format!("00000{i}.bin"));
        kitti::write_velodyne_bin(&p, &scan.points).unwrap();
        paths.push(p);
    }
    let args_base = vec![
        "--config".to_string(),
        ckpt.join("config.txt").display().to_string(),
        "--seed".to_string(),
        "9".to_string(),
    ];
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let mut args = args_base.clone();
        args.push("--threads".into());
        args.push(threads.into());
        args.push("detect".into());
        for p in &paths {
            args.push(p.display().to_string());
        }
        let out = Command::new(bin()).args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1], "thread count changed the output");
    let _ = std::fs::remove_dir_all(&dir);
}
