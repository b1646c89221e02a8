//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Context;

use pcrd_core::config::{config_hash, parse_config, serialize_config, PipelineConfig};
use pcrd_core::eval::{self, ApInterpolation, StageTimings};
use pcrd_core::kitti;
use pcrd_core::networks::boxes::BoxCodec;
use pcrd_core::networks::calibrate_threshold;
use pcrd_core::pipeline::{detect_scan, format_detection_line, write_ply, DetectorWeights};
use pcrd_core::training::{
    self, classifier_energies, synth_dataset, DatasetConfig,
};
use pcrd_core::{
    cluster_depth, iou3d, project_cloud, seg_metrics, segment_ground, synth,
    Box3, ClassifierNet, BoxNet, Point3,
};

use crate::{AppError, Cli, Command};

pub fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Detect {
            ref scans,
            ref out,
            ref dump_ply,
            ref dump_proposals,
        } => detect(
            &cfg,
            scans,
            out.as_deref(),
            dump_ply.as_deref(),
            dump_proposals.as_deref(),
            cli.seed,
            cli.threads,
        ),
        Command::Train {
            epochs,
            lr,
            lambda,
            ref out,
            n_id,
            n_ood,
            no_pvle,
        } => train(&cfg, epochs, lr, lambda, out, n_id, n_ood, no_pvle, cli.seed),
        Command::EvalGround {
            ref scans,
            ref labels,
            ref report,
            ref csv,
        } => eval_ground(&cfg, scans, labels, report.as_deref(), csv.as_deref(), cli.seed),
        Command::EvalDetect {
            ref scans,
            ref labels,
            ref calib,
            mode,
            ref csv,
        } => eval_detect(&cfg, scans, labels, calib, mode, csv.as_deref(), cli.seed),
        Command::Bench {
            ref scan,
            repeats,
            ref csv,
        } => bench(&cfg, scan.as_deref(), repeats, csv.as_deref(), cli.seed, cli.threads),
        Command::Synth { ref out, n_id, n_ood } => synth_cmd(&cfg, out, n_id, n_ood, cli.seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, AppError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| AppError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| AppError::Config(e.to_string()))
        }
    }
}

fn load_weights(cfg: &PipelineConfig) -> Result<DetectorWeights, AppError> {
    for path in [&cfg.classifier_weights, &cfg.boxnet_weights].into_iter().flatten() {
        if !Path::new(path).exists() {
            return Err(AppError::Config(format!("weight file not found: {path}")));
        }
    }
    DetectorWeights::load(cfg).map_err(|e| AppError::Config(e.to_string()))
}

// ── detect ──────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn detect(
    cfg: &PipelineConfig,
    scans: &[PathBuf],
    out: Option<&Path>,
    dump_ply: Option<&Path>,
    dump_proposals: Option<&Path>,
    seed: u64,
    threads: usize,
) -> Result<(), AppError> {
    if scans.is_empty() {
        return Err(AppError::Config("detect needs at least one scan file".into()));
    }
    let weights = load_weights(cfg)?;
    for dir in [dump_ply, dump_proposals].into_iter().flatten() {
        std::fs::create_dir_all(dir)?;
    }

    let results: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; scans.len()]);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let worker = |_: usize| -> Result<(), anyhow::Error> {
        loop {
            let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            if i >= scans.len() {
                return Ok(());
            }
            let path = &scans[i];
            let points = kitti::read_velodyne_bin(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let result = detect_scan(&points, cfg, &weights, seed)
                .with_context(|| format!("processing {}", path.display()))?;
            let frame = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| i.to_string());
            let mut text = String::new();
            for det in &result.detections {
                text.push_str(&format_detection_line(&frame, det));
                text.push('\n');
            }
            if dump_ply.is_some() || dump_proposals.is_some() {
                let cloud = project_cloud(&points, &cfg.projection)?;
                let (ground, _) = segment_ground(&cloud, &cfg.ground, seed);
                let labels = cluster_depth(&cloud, &ground, &cfg.cluster);
                if let Some(dir) = dump_ply {
                    write_ply(
                        &dir.join(format!("{frame}.ply")),
                        &cloud,
                        &ground,
                        &labels,
                        &result.detections,
                    )?;
                }
                if let Some(dir) = dump_proposals {
                    let proposals =
                        pcrd_core::extract_proposals(&cloud, &labels, &cfg.proposal, seed);
                    std::fs::write(
                        dir.join(format!("{frame}.props")),
                        pcrd_core::proposals::dump_lines(&proposals),
                    )?;
                    let mut payload = std::io::BufWriter::new(std::fs::File::create(
                        dir.join(format!("{frame}.points")),
                    )?);
                    pcrd_core::proposals::write_points_payload(&mut payload, &proposals)?;
                }
            }
            results.lock().unwrap()[i] = Some(text);
        }
    };

    if threads <= 1 {
        worker(0).map_err(AppError::Runtime)?;
    } else {
        std::thread::scope(|scope| -> Result<(), anyhow::Error> {
            let handles: Vec<_> = (0..threads).map(|t| scope.spawn(move || worker(t))).collect();
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })
        .map_err(AppError::Runtime)?;
    }

    let mut text = String::new();
    for r in results.into_inner().unwrap() {
        text.push_str(&r.unwrap_or_default());
    }
    emit(out, &text)?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &PipelineConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
    lambda: Option<f64>,
    out: &Path,
    n_id: usize,
    n_ood: usize,
    no_pvle: bool,
    seed: u64,
) -> Result<(), AppError> {
    let mut tcfg = cfg.train;
    if let Some(e) = epochs {
        tcfg.epochs = e;
    }
    if let Some(v) = lr {
        tcfg.lr = v;
    }
    if let Some(v) = lambda {
        tcfg.lambda = v;
    }
    tcfg.seed = seed;
    tcfg.validate().map_err(AppError::Config)?;
    for w in tcfg.warnings() {
        eprintln!("warning: {w}");
    }

    let codec = BoxCodec::default();
    let dcfg = DatasetConfig {
        n_id,
        n_ood,
        proposal: cfg.proposal,
        ..DatasetConfig::default()
    };
    println!("generating {n_id} ID + {n_ood} OOD training proposals (seed {seed})");
    let train_set = synth_dataset(&dcfg, &codec, seed);
    let hold_cfg = DatasetConfig {
        n_id: (n_id / 4).clamp(30, 600),
        n_ood: (n_ood / 4).clamp(30, 600),
        ..dcfg.clone()
    };
    // Separate seed stream so the held-out split never overlaps training.
    let holdout = synth_dataset(&hold_cfg, &codec, seed ^ HOLDOUT_SEED_STREAM);

    let pvle = !no_pvle;
    println!("training classifier ({} epochs)", tcfg.epochs);
    let cls = training::train_classifier(&train_set.id, &train_set.ood, &dcfg.proposal, &tcfg, pvle)
        .map_err(|e| AppError::Runtime(e.into()))?;
    println!("training box network ({} epochs)", tcfg.epochs);
    let boxnet =
        training::train_boxnet(&train_set.id, &train_set.ood, &dcfg.proposal, &tcfg, &codec, pvle)
            .map_err(|e| AppError::Runtime(e.into()))?;

    // Held-out report and gate calibration.
    let items: Vec<(&pcrd_core::Proposal, usize)> = holdout
        .id
        .iter()
        .map(|s| (&s.proposal, s.class_id))
        .collect();
    let acc = training::classifier_accuracy(&cls.net, &cls.params, &items, &dcfg.proposal, pvle);
    let id_refs: Vec<&pcrd_core::Proposal> = holdout.id.iter().map(|s| &s.proposal).collect();
    let ood_refs: Vec<&pcrd_core::Proposal> = holdout.ood.iter().collect();
    let id_e = classifier_energies(&cls.net, &cls.params, &id_refs, &dcfg.proposal, pvle, tcfg.temperature);
    let ood_e = classifier_energies(&cls.net, &cls.params, &ood_refs, &dcfg.proposal, pvle, tcfg.temperature);
    let sep = eval::ood_separability(&id_e, &ood_e);
    let gamma_c = sep.threshold_95;

    let mut box_id_e = Vec::new();
    let mut ious = Vec::new();
    for s in &holdout.id {
        let vox = training::vox_features(&s.proposal, &dcfg.proposal, pvle);
        let pred = boxnet
            .net
            .forward(&boxnet.params, &s.proposal.canonical_points, vox)
            .map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;
        box_id_e.push(
            pcrd_core::energy_score(&pcrd_core::networks::box_energy_logits(&pred), tcfg.temperature)
                .unwrap(),
        );
        let (decoded, _) = pcrd_core::decode_box(&pred, &s.proposal, &codec);
        ious.push(iou3d(&decoded, &s.gt));
    }
    let gamma_b = calibrate_threshold(&box_id_e, 0.95).unwrap();
    let mean_iou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;

    println!("held-out accuracy {acc:.4}  auroc {:.4}  fpr95 {:.4}  box IoU {mean_iou:.4}", sep.auroc, sep.fpr_at_95_tpr);
    println!("calibrated gates: gamma_c {gamma_c:.4}  gamma_b {gamma_b:.4}");

    let mut meta = BTreeMap::new();
    meta.insert("epoch".into(), tcfg.epochs.to_string());
    meta.insert("config_hash".into(), config_hash(cfg));
    meta.insert("seed".into(), seed.to_string());
    // Training RNG state is fully determined by the seed and epoch count.
    meta.insert(
        "rng_state".into(),
        format!("chacha8 seed={} epochs={}", tcfg.seed, tcfg.epochs),
    );
    meta.insert("pvle".into(), pvle.to_string());
    meta.insert("gamma_c".into(), gamma_c.to_string());
    meta.insert("gamma_b".into(), gamma_b.to_string());
    meta.insert("holdout_accuracy".into(), format!("{acc:.6}"));
    meta.insert("holdout_auroc".into(), format!("{:.6}", sep.auroc));
    meta.insert("holdout_box_iou".into(), format!("{mean_iou:.6}"));
    training::save_checkpoint(out, &cls.params, &boxnet.params, &meta)
        .map_err(|e| AppError::Runtime(e.into()))?;

    // Ready-to-run config pointing at the new weights with calibrated gates.
    let mut run_cfg = cfg.clone();
    run_cfg.classifier_weights = Some(out.join(training::CLASSIFIER_FILE).display().to_string());
    run_cfg.boxnet_weights = Some(out.join(training::BOXNET_FILE).display().to_string());
    run_cfg.energy.gamma_c = gamma_c;
    run_cfg.energy.gamma_b = gamma_b;
    std::fs::write(out.join("config.txt"), serialize_config(&run_cfg))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

const HOLDOUT_SEED_STREAM: u64 = 0xD1D1_D1D1_D1D1_D1D1;

// ── eval-ground ─────────────────────────────────────────────────────────

fn label_path_for(scan: &Path, labels: &Path) -> PathBuf {
    if labels.is_dir() {
        let stem = scan.file_stem().unwrap_or_default();
        labels.join(format!("{}.label", stem.to_string_lossy()))
    } else {
        labels.to_path_buf()
    }
}

fn eval_ground(
    cfg: &PipelineConfig,
    scans: &[PathBuf],
    labels: &Path,
    report: Option<&Path>,
    csv: Option<&Path>,
    seed: u64,
) -> Result<(), AppError> {
    if scans.is_empty() {
        return Err(AppError::Config("eval-ground needs at least one scan".into()));
    }
    let mut csv_text = String::from("scan,tp,fp,tn,fn,precision,recall,accuracy,iou\n");
    let (mut pred_all, mut gt_all) = (Vec::new(), Vec::new());
    for scan in scans {
        let points = kitti::read_velodyne_bin(scan)
            .with_context(|| format!("reading {}", scan.display()))
            .map_err(AppError::Runtime)?;
        let label_file = label_path_for(scan, labels);
        let raw = kitti::read_semantic_labels(&label_file)
            .with_context(|| format!("reading {}", label_file.display()))
            .map_err(AppError::Runtime)?;
        if raw.len() != points.len() {
            return Err(AppError::Runtime(anyhow::anyhow!(
                "{}: {} labels for {} points",
                label_file.display(),
                raw.len(),
                points.len()
            )));
        }
        let cloud = project_cloud(&points, &cfg.projection)
            .map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;
        let (mask, _) = segment_ground(&cloud, &cfg.ground, seed);

        // Per-point prediction: the label of the projected cell.
        let mut pred = Vec::with_capacity(points.len());
        let mut gt = Vec::with_capacity(points.len());
        for (p, lab) in points.iter().zip(raw.iter()) {
            let range = p.norm();
            let c = cfg.projection.col_of_azimuth(p.y.atan2(p.x));
            let r = cfg.projection.row_of_elevation((p.z / range).asin());
            pred.push(mask.is_ground(r, c));
            gt.push(cfg.ground_label_ids.contains(lab));
        }
        let score = seg_metrics(&pred, &gt).map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;
        csv_text.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            scan.file_stem().unwrap_or_default().to_string_lossy(),
            score.true_pos,
            score.false_pos,
            score.true_neg,
            score.false_neg,
            score.precision,
            score.recall,
            score.accuracy,
            score.iou
        ));
        pred_all.extend(pred);
        gt_all.extend(gt);
    }
    let total = seg_metrics(&pred_all, &gt_all)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;
    let mut text = String::new();
    text.push_str(&format!("scans = {}\n", scans.len()));
    text.push_str(&format!("points = {}\n", pred_all.len()));
    text.push_str(&format!("precision = {:.6}\n", total.precision));
    text.push_str(&format!("recall = {:.6}\n", total.recall));
    text.push_str(&format!("accuracy = {:.6}\n", total.accuracy));
    text.push_str(&format!("iou = {:.6}\n", total.iou));
    emit(report, &text)?;
    if let Some(path) = csv {
        std::fs::write(path, csv_text)?;
    }
    Ok(())
}

// ── eval-detect ─────────────────────────────────────────────────────────

fn aux_path_for(scan: &Path, dir_or_file: &Path) -> PathBuf {
    if dir_or_file.is_dir() {
        let stem = scan.file_stem().unwrap_or_default();
        dir_or_file.join(format!("{}.txt", stem.to_string_lossy()))
    } else {
        dir_or_file.to_path_buf()
    }
}

fn eval_detect(
    cfg: &PipelineConfig,
    scans: &[PathBuf],
    labels: &Path,
    calib: &Path,
    mode: u32,
    csv: Option<&Path>,
    seed: u64,
) -> Result<(), AppError> {
    if scans.is_empty() {
        return Err(AppError::Config("eval-detect needs at least one scan".into()));
    }
    let mode = match mode {
        11 => ApInterpolation::Points11,
        40 => ApInterpolation::Points40,
        other => {
            return Err(AppError::Config(format!(
                "mode must be 11 or 40, got {other}"
            )))
        }
    };
    let weights = load_weights(cfg)?;
    // KITTI convention: car matches at 0.7 IoU, pedestrian/cyclist at 0.5.
    let iou_th = [0.7, 0.5, 0.5];

    let mut dets_per_class: Vec<Vec<(Box3, f64)>> = vec![Vec::new(); 3];
    let mut gts_per_class_difficulty: Vec<Vec<Vec<Box3>>> = vec![vec![Vec::new(); 3]; 3];
    for scan in scans {
        let points = kitti::read_velodyne_bin(scan)
            .with_context(|| format!("reading {}", scan.display()))
            .map_err(AppError::Runtime)?;
        let label_file = aux_path_for(scan, labels);
        let calib_file = aux_path_for(scan, calib);
        let raw_labels = kitti::read_label_file(&label_file)
            .with_context(|| format!("reading {}", label_file.display()))
            .map_err(AppError::Runtime)?;
        let calibration = kitti::read_calib_file(&calib_file)
            .with_context(|| format!("reading {}", calib_file.display()))
            .map_err(AppError::Runtime)?;
        let (gt_boxes, _ignored) = kitti::labels_to_lidar_boxes(&raw_labels, &calibration);

        let result = detect_scan(&points, cfg, &weights, seed)
            .map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;
        for det in &result.detections {
            dets_per_class[det.class_id].push((det.box3, det.score()));
        }
        for gt in &gt_boxes {
            let bucket = match gt.difficulty {
                Some(kitti::Difficulty::Easy) => 0,
                Some(kitti::Difficulty::Moderate) => 1,
                Some(kitti::Difficulty::Hard) => 2,
                None => continue,
            };
            // Cumulative buckets: easy boxes also count for moderate/hard.
            for d in bucket..3 {
                gts_per_class_difficulty[gt.class_id][d].push(gt.box3);
            }
        }
    }

    let mode_name = match mode {
        ApInterpolation::Points11 => "11pt",
        ApInterpolation::Points40 => "40pt",
    };
    let mut csv_text = String::from("class,difficulty,mode,iou_th,ap,n_gt,n_det\n");
    let mut text = String::new();
    let difficulty_names = ["easy", "moderate", "hard"];
    let mut per_class_moderate = Vec::new();
    for class in 0..3 {
        for d in 0..3 {
            let gts = &gts_per_class_difficulty[class][d];
            let result =
                eval::average_precision(&dets_per_class[class], gts, iou_th[class], mode);
            let (ap_text, n_gt) = match &result {
                Some(r) => (format!("{:.6}", r.ap), r.n_gt),
                None => ("absent".to_string(), 0),
            };
            text.push_str(&format!(
                "ap.{}.{} = {}\n",
                synth::CLASS_NAMES[class],
                difficulty_names[d],
                ap_text
            ));
            csv_text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                synth::CLASS_NAMES[class],
                difficulty_names[d],
                mode_name,
                iou_th[class],
                ap_text,
                n_gt,
                dets_per_class[class].len()
            ));
            if d == 1 {
                per_class_moderate.push(result);
            }
        }
    }
    if let Some(map) = eval::mean_ap(&per_class_moderate) {
        text.push_str(&format!("map.moderate = {map:.6}\n"));
    }
    print!("{text}");
    if let Some(path) = csv {
        std::fs::write(path, csv_text)?;
    }
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────────

fn bench(
    cfg: &PipelineConfig,
    scan: Option<&Path>,
    repeats: usize,
    csv: Option<&Path>,
    seed: u64,
    threads: usize,
) -> Result<(), AppError> {
    if threads != 1 {
        eprintln!("note: bench always measures single-threaded; ignoring --threads {threads}");
    }
    let points = match scan {
        Some(path) => kitti::read_velodyne_bin(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(AppError::Runtime)?,
        None => {
            let mut scene = synth::Scene::flat(1.73);
            let mut rng_x = 5.0;
            for i in 0..10 {
                scene.obstacles.push(synth::Shape::Box(Box3::new(
                    Point3::new(rng_x, (i as f64 - 5.0) * 3.0, -1.0),
                    [2.0, 1.4, 1.5],
                    0.3 * i as f64,
                )));
                rng_x += 3.5;
            }
            synth::render_scan(&cfg.projection, &scene, seed).points
        }
    };

    // Weights from config when present, otherwise seeded random weights;
    // latency does not depend on the learned values.
    let weights = if cfg.classifier_weights.is_some() && cfg.boxnet_weights.is_some() {
        load_weights(cfg)?
    } else {
        let codec = BoxCodec::default();
        let cls = ClassifierNet::new(codec.ns());
        let cls_params = cls.init_params(seed);
        let boxnet = BoxNet::new(codec.nh, codec.ns());
        let box_params = boxnet.init_params(seed + 1);
        DetectorWeights::from_parts(cls, cls_params, boxnet, box_params, codec)
    };
    let mut bench_cfg = cfg.clone();
    bench_cfg.energy.gamma_c = f64::INFINITY;
    bench_cfg.energy.gamma_b = f64::INFINITY;

    // Warm-up run outside the measurement.
    let _ = detect_scan(&points, &bench_cfg, &weights, seed)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!(e.to_string())))?;

    let mut rows = Vec::new();
    let stats = eval::benchmark(1, repeats, |_| {
        let result = detect_scan(&points, &bench_cfg, &weights, seed).expect("bench scan");
        rows.push(result.timings);
        result.timings
    });

    let mut csv_text =
        String::from("run,projection_ms,ground_ms,cluster_ms,network_ms,total_ms\n");
    for (i, t) in rows.iter().enumerate() {
        csv_text.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            i, t.projection_ms, t.ground_ms, t.cluster_ms, t.network_ms, t.total_ms
        ));
    }
    if let Some(path) = csv {
        std::fs::write(path, &csv_text)?;
    }

    let report = |name: &str, t: &StageTimings| {
        println!(
            "{name}: projection {:.3} ms, ground {:.3} ms, cluster {:.3} ms, network {:.3} ms, total {:.3} ms",
            t.projection_ms, t.ground_ms, t.cluster_ms, t.network_ms, t.total_ms
        );
    };
    println!("points = {}  runs = {}  threads = 1", points.len(), stats.runs);
    report("median", &stats.median);
    report("p95", &stats.p95);
    println!(
        "ground per sector (median): {:.4} ms over {} sectors",
        stats.median.ground_ms / cfg.ground.n_sectors as f64,
        cfg.ground.n_sectors
    );
    println!("fps (median total) = {:.2}", stats.fps_median);
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────

fn synth_cmd(
    cfg: &PipelineConfig,
    out: &Path,
    n_id: usize,
    n_ood: usize,
    seed: u64,
) -> Result<(), AppError> {
    let codec = BoxCodec::default();
    let dcfg = DatasetConfig {
        n_id,
        n_ood,
        proposal: cfg.proposal,
        ..DatasetConfig::default()
    };
    let ds = synth_dataset(&dcfg, &codec, seed);
    training::write_dataset(out, &ds, &dcfg, seed)?;
    println!(
        "wrote {} ID and {} OOD proposals to {}",
        ds.id.len(),
        ds.ood.len(),
        out.display()
    );
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), AppError> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}
