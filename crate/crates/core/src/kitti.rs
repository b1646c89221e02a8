//! KITTI-format readers: velodyne binary scans, SemanticKITTI per-point
//! labels, object label files and the minimal calibration needed to move
//! camera-frame boxes into the LiDAR frame.

use std::path::Path;

use thiserror::Error;

use crate::types::{Box3, Point3};

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("velodyne file length {0} is not a multiple of 16 bytes")]
    BadScanLength(usize),
    #[error("label file length {0} is not a multiple of 4 bytes")]
    BadLabelLength(usize),
    #[error("malformed label line {line}: {reason}")]
    BadLabelLine { line: usize, reason: String },
    #[error("calibration key {0} missing or malformed")]
    BadCalib(String),
}

/// Little-endian f32 quadruples (x, y, z, intensity); intensity is dropped.
pub fn read_velodyne_points(bytes: &[u8]) -> Result<Vec<Point3>, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::BadScanLength(bytes.len()));
    }
    let mut out = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
        out.push(Point3::new(x, y, z));
    }
    Ok(out)
}

pub fn read_velodyne_bin(path: &Path) -> Result<Vec<Point3>, KittiError> {
    read_velodyne_points(&std::fs::read(path)?)
}

/// Writes points in velodyne layout with zero intensity.
pub fn write_velodyne_bin(path: &Path, points: &[Point3]) -> Result<(), KittiError> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        bytes.extend_from_slice(&(p.x as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.y as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.z as f32).to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// SemanticKITTI per-point labels: u32 little-endian; the low 16 bits carry
/// the semantic class, the high 16 an instance id.
pub fn read_semantic_labels(path: &Path) -> Result<Vec<u32>, KittiError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(KittiError::BadLabelLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) & 0xFFFF)
        .collect())
}

/// Default SemanticKITTI class ids treated as ground: road, parking,
/// sidewalk, other-ground, terrain.
pub fn default_ground_label_ids() -> Vec<u32> {
    vec![40, 44, 48, 49, 72]
}

// ── object labels ───────────────────────────────────────────────────────

/// One raw row of a KITTI object label file (camera frame).
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// 2D bbox (left, top, right, bottom) in pixels.
    pub bbox: [f64; 4],
    /// Height, width, length (meters).
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Bottom-center location in the camera frame.
    pub location: [f64; 3],
    /// Rotation about the camera Y axis.
    pub ry: f64,
}

pub fn parse_label_text(text: &str) -> Result<Vec<KittiLabel>, KittiError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(KittiError::BadLabelLine {
                line: i + 1,
                reason: format!("expected 15 fields, got {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64, KittiError> {
            fields[k].parse().map_err(|_| KittiError::BadLabelLine {
                line: i + 1,
                reason: format!("field {k} is not a number: {}", fields[k]),
            })
        };
        out.push(KittiLabel {
            kind: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: num(2)? as i32,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            h: num(8)?,
            w: num(9)?,
            l: num(10)?,
            location: [num(11)?, num(12)?, num(13)?],
            ry: num(14)?,
        });
    }
    Ok(out)
}

pub fn read_label_file(path: &Path) -> Result<Vec<KittiLabel>, KittiError> {
    parse_label_text(&std::fs::read_to_string(path)?)
}

/// KITTI devkit difficulty buckets from bbox height, occlusion, truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

pub fn difficulty_of(label: &KittiLabel) -> Option<Difficulty> {
    let bbox_h = label.bbox[3] - label.bbox[1];
    if bbox_h >= 40.0 && label.occlusion <= 0 && label.truncation <= 0.15 {
        Some(Difficulty::Easy)
    } else if bbox_h >= 25.0 && label.occlusion <= 1 && label.truncation <= 0.30 {
        Some(Difficulty::Moderate)
    } else if bbox_h >= 25.0 && label.occlusion <= 2 && label.truncation <= 0.50 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

pub fn class_id_of(kind: &str) -> Option<usize> {
    match kind {
        "Car" => Some(crate::synth::CLASS_CAR),
        "Pedestrian" => Some(crate::synth::CLASS_PEDESTRIAN),
        "Cyclist" => Some(crate::synth::CLASS_CYCLIST),
        _ => None,
    }
}

// ── calibration ─────────────────────────────────────────────────────────

/// The minimum of a KITTI calib file needed for label conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: [f64; 12],
    /// 3x3 rectification rotation.
    pub r0_rect: [[f64; 3]; 3],
    /// 3x4 rigid transform velodyne -> camera.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

impl Calibration {
    /// Identity rectification with the standard axis permutation
    /// (cam x = -velo y, cam y = -velo z, cam z = velo x).
    pub fn nominal() -> Self {
        Self {
            p2: [
                700.0, 0.0, 600.0, 0.0, 0.0, 700.0, 180.0, 0.0, 0.0, 0.0, 1.0, 0.0,
            ],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [
                [0.0, -1.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
            ],
        }
    }

    /// Camera-frame point into the velodyne frame:
    /// x_velo = Tr^-1 (R0^-1 x_cam).
    pub fn cam_to_velo(&self, cam: [f64; 3]) -> Point3 {
        // R0 is a rotation: inverse = transpose.
        let r = &self.r0_rect;
        let unrect = [
            r[0][0] * cam[0] + r[1][0] * cam[1] + r[2][0] * cam[2],
            r[0][1] * cam[0] + r[1][1] * cam[1] + r[2][1] * cam[2],
            r[0][2] * cam[0] + r[1][2] * cam[1] + r[2][2] * cam[2],
        ];
        let t = &self.tr_velo_to_cam;
        let shifted = [
            unrect[0] - t[0][3],
            unrect[1] - t[1][3],
            unrect[2] - t[2][3],
        ];
        // Rotation part transposed.
        Point3::new(
            t[0][0] * shifted[0] + t[1][0] * shifted[1] + t[2][0] * shifted[2],
            t[0][1] * shifted[0] + t[1][1] * shifted[1] + t[2][1] * shifted[2],
            t[0][2] * shifted[0] + t[1][2] * shifted[1] + t[2][2] * shifted[2],
        )
    }
}

pub fn parse_calib_text(text: &str) -> Result<Calibration, KittiError> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let values: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) => return Err(KittiError::BadCalib(key.trim().to_string())),
        };
        match key.trim() {
            "P2" => {
                if values.len() != 12 {
                    return Err(KittiError::BadCalib("P2".into()));
                }
                let mut m = [0.0; 12];
                m.copy_from_slice(&values);
                p2 = Some(m);
            }
            "R0_rect" => {
                if values.len() != 9 {
                    return Err(KittiError::BadCalib("R0_rect".into()));
                }
                let mut m = [[0.0; 3]; 3];
                for (i, v) in values.iter().enumerate() {
                    m[i / 3][i % 3] = *v;
                }
                r0 = Some(m);
            }
            "Tr_velo_to_cam" => {
                if values.len() != 12 {
                    return Err(KittiError::BadCalib("Tr_velo_to_cam".into()));
                }
                let mut m = [[0.0; 4]; 3];
                for (i, v) in values.iter().enumerate() {
                    m[i / 4][i % 4] = *v;
                }
                tr = Some(m);
            }
            _ => {}
        }
    }
    Ok(Calibration {
        p2: p2.ok_or_else(|| KittiError::BadCalib("P2".into()))?,
        r0_rect: r0.ok_or_else(|| KittiError::BadCalib("R0_rect".into()))?,
        tr_velo_to_cam: tr.ok_or_else(|| KittiError::BadCalib("Tr_velo_to_cam".into()))?,
    })
}

pub fn read_calib_file(path: &Path) -> Result<Calibration, KittiError> {
    parse_calib_text(&std::fs::read_to_string(path)?)
}

/// A ground-truth box in the LiDAR frame with class and difficulty.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub box3: Box3,
    pub class_id: usize,
    pub difficulty: Option<Difficulty>,
}

/// Converts parsed labels into LiDAR-frame boxes. Classes outside
/// {Car, Pedestrian, Cyclist} go to the ignore list.
pub fn labels_to_lidar_boxes(
    labels: &[KittiLabel],
    calib: &Calibration,
) -> (Vec<LabeledBox>, Vec<KittiLabel>) {
    let mut boxes = Vec::new();
    let mut ignored = Vec::new();
    for label in labels {
        let Some(class_id) = class_id_of(&label.kind) else {
            ignored.push(label.clone());
            continue;
        };
        // Label location is the bottom center in the camera frame.
        let bottom = calib.cam_to_velo(label.location);
        let center = Point3::new(bottom.x, bottom.y, bottom.z + label.h / 2.0);
        // Camera yaw about Y maps to LiDAR yaw about Z.
        let yaw = crate::types::normalize_angle(-label.ry - std::f64::consts::FRAC_PI_2);
        boxes.push(LabeledBox {
            box3: Box3::new(center, [label.l, label.w, label.h], yaw),
            class_id,
            difficulty: difficulty_of(label),
        });
    }
    (boxes, ignored)
}
