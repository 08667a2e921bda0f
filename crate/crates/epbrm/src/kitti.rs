//! KITTI object-detection file formats: velodyne scans, calibration, label
//! files and result (prediction) files.
//!
//! Boxes are converted between the camera frame of the text files (x right,
//! y down, z forward; location at the bottom-face center) and the lidar
//! frame used everywhere else (x forward, y left, z up; volumetric center).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use epbrm_core::geometry::GeometryError;
use epbrm_core::{Box3D, Detection, ObjectClass, Point3, PointCloud, Size3};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: length {len} is not a multiple of 16 bytes")]
    VelodyneLength { path: PathBuf, len: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Calib { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// Consecutive little-endian f32 quadruplets `(x, y, z, reflectance)`.
pub fn read_velodyne(path: &Path) -> Result<PointCloud, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(FormatError::VelodyneLength { path: path.to_path_buf(), len: bytes.len() });
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes")) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect())
}

/// Writes points with reflectance 0.
pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub type Mat3 = [[f64; 3]; 3];

/// Rectification rotation and the lidar-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub r0_rect: Mat3,
    /// `[R | t]`, rows of the 3x4 matrix.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse(m: &Mat3) -> Mat3 {
    let c = |r: usize, k: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (k0, k1) = ((k + 1) % 3, (k + 2) % 3);
        m[r0][k0] * m[r1][k1] - m[r0][k1] * m[r1][k0]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    // adjugate is the transposed cofactor matrix
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| c(j, i) / det))
}

fn is_orthonormal(m: &Mat3, tol: f64) -> bool {
    (0..3).all(|i| {
        (0..3).all(|j| {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            (dot - if i == j { 1.0 } else { 0.0 }).abs() <= tol
        })
    })
}

impl Calibration {
    /// Axis permutation between the lidar and camera frames with no offset.
    pub const CANONICAL: Calibration = Calibration {
        r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
    };

    fn rotation(&self) -> Mat3 {
        self.tr_velo_to_cam.map(|r| [r[0], r[1], r[2]])
    }

    fn translation(&self) -> [f64; 3] {
        self.tr_velo_to_cam.map(|r| r[3])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_orthonormal(&self.r0_rect, 1e-3) {
            return Err("R0_rect is not orthonormal".into());
        }
        if !is_orthonormal(&self.rotation(), 1e-3) {
            return Err("Tr_velo_to_cam rotation is not orthonormal".into());
        }
        Ok(())
    }

    pub fn lidar_to_camera(&self, p: Point3) -> Point3 {
        let r = mat_vec(&self.rotation(), p.to_array());
        let t = self.translation();
        Point3::from_array(mat_vec(&self.r0_rect, [r[0] + t[0], r[1] + t[1], r[2] + t[2]]))
    }

    pub fn camera_to_lidar(&self, p: Point3) -> Point3 {
        let u = mat_vec(&inverse(&self.r0_rect), p.to_array());
        let t = self.translation();
        Point3::from_array(mat_vec(&inverse(&self.rotation()), [u[0] - t[0], u[1] - t[1], u[2] - t[2]]))
    }

    fn direction_to_lidar(&self, d: [f64; 3]) -> [f64; 3] {
        mat_vec(&inverse(&self.rotation()), mat_vec(&inverse(&self.r0_rect), d))
    }

    /// Lidar box from camera-frame label fields.
    pub fn box_from_camera(
        &self,
        h: f64,
        w: f64,
        l: f64,
        bottom: Point3,
        rotation_y: f64,
    ) -> Result<Box3D, GeometryError> {
        let c = self.camera_to_lidar(bottom) + Point3::new(0.0, 0.0, 0.5 * h);
        // camera-frame length direction of the object
        let d = self.direction_to_lidar([rotation_y.cos(), 0.0, -rotation_y.sin()]);
        Box3D::new(c, Size3::new(h, w, l), d[0].atan2(d[1]))
    }

    /// Camera-frame `(bottom center, rotation_y)` of a lidar box. The angle
    /// is the exact inverse of the one [`Calibration::box_from_camera`]
    /// reads, even for a slightly tilted calibration.
    pub fn box_to_camera(&self, b: &Box3D) -> (Point3, f64) {
        let bottom = self.lidar_to_camera(b.center - Point3::new(0.0, 0.0, 0.5 * b.size.h));
        // lidar images of the camera x and z axes; the heading for rotation_y
        // r is cos(r) a - sin(r) c, whose ground projection must point along yaw
        let a = self.direction_to_lidar([1.0, 0.0, 0.0]);
        let c = self.direction_to_lidar([0.0, 0.0, 1.0]);
        let (sy, cy) = b.yaw.sin_cos();
        let mut ry = (a[0] * cy - a[1] * sy).atan2(c[0] * cy - c[1] * sy);
        let along = (ry.cos() * a[0] - ry.sin() * c[0]) * sy + (ry.cos() * a[1] - ry.sin() * c[1]) * cy;
        if along < 0.0 {
            ry += std::f64::consts::PI;
        }
        let ry = (ry + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        (bottom, ry)
    }
}

fn parse_floats(path: &Path, line: usize, text: &str, n: usize) -> Result<Vec<f64>, FormatError> {
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    match vals {
        Ok(v) if v.len() == n => Ok(v),
        Ok(v) => Err(FormatError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("expected {n} values, found {}", v.len()),
        }),
        Err(e) => Err(FormatError::Parse { path: path.to_path_buf(), line, message: e.to_string() }),
    }
}

/// Reads `R0_rect` and `Tr_velo_to_cam` (older `R_rect` / `Tr_velo_cam`
/// spellings accepted); other keys are ignored.
pub fn read_calib(path: &Path) -> Result<Calibration, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut r0 = None;
    let mut tr = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        match key.trim() {
            "R0_rect" | "R_rect" => {
                let v = parse_floats(path, i + 1, rest, 9)?;
                r0 = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
            }
            "Tr_velo_to_cam" | "Tr_velo_cam" => {
                let v = parse_floats(path, i + 1, rest, 12)?;
                tr = Some([[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9], v[10], v[11]]]);
            }
            _ => {}
        }
    }
    let calib_err = |message: &str| FormatError::Calib { path: path.to_path_buf(), message: message.into() };
    let calib = Calibration {
        r0_rect: r0.ok_or_else(|| calib_err("missing R0_rect"))?,
        tr_velo_to_cam: tr.ok_or_else(|| calib_err("missing Tr_velo_to_cam"))?,
    };
    calib.validate().map_err(|m| calib_err(&m))?;
    Ok(calib)
}

pub fn write_calib(path: &Path, calib: &Calibration) -> Result<(), FormatError> {
    let mut s = String::from("R0_rect:");
    for v in calib.r0_rect.iter().flatten() {
        write!(s, " {v:.12e}").expect("string write");
    }
    s.push_str("\nTr_velo_to_cam:");
    for v in calib.tr_velo_to_cam.iter().flatten() {
        write!(s, " {v:.12e}").expect("string write");
    }
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// A labeled object of one of the handled classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class: ObjectClass,
    pub bbox: Box3D,
    pub truncation: f64,
    pub occlusion: u8,
    /// Image-plane box height in pixels when the label has a 2D box.
    pub height_px: Option<f64>,
}

/// One labeled or predicted line.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Line {
    class: Option<ObjectClass>,
    truncation: f64,
    occlusion: u8,
    bbox2d: Option<[f64; 4]>,
    bbox: Box3D,
    score: Option<f64>,
}

fn parse_line(path: &Path, n: usize, text: &str, calib: &Calibration, with_score: bool) -> Result<Option<Line>, FormatError> {
    let err = |message: String| FormatError::Parse { path: path.to_path_buf(), line: n, message };
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.is_empty() {
        return Ok(None);
    }
    let want = if with_score { 16 } else { 15 };
    let label_ok = fields.len() == want || (!with_score && fields.len() == 16);
    if !label_ok {
        return Err(err(format!("expected {want} fields, found {}", fields.len())));
    }
    if fields[0] == "DontCare" {
        return Ok(None);
    }
    let nums: Vec<f64> = fields[1..]
        .iter()
        .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    let class = fields[0].parse::<ObjectClass>().ok();
    let occlusion = nums[1];
    if !(occlusion >= 0.0 && occlusion <= 3.0 && occlusion.fract() == 0.0) {
        return Err(err(format!("occlusion {occlusion} is not an integer in 0..=3")));
    }
    let b2 = [nums[3], nums[4], nums[5], nums[6]];
    let bbox2d = (b2.iter().any(|v| *v != -1.0) && b2[3] > b2[1]).then_some(b2);
    let (h, w, l) = (nums[7], nums[8], nums[9]);
    let bottom = Point3::new(nums[10], nums[11], nums[12]);
    let bbox = calib.box_from_camera(h, w, l, bottom, nums[13]).map_err(|e| err(e.to_string()))?;
    let score = with_score.then(|| nums[14]);
    if let Some(s) = score {
        if !(0.0..=1.0).contains(&s) {
            return Err(err(format!("score {s} outside [0, 1]")));
        }
    }
    Ok(Some(Line { class, truncation: nums[0], occlusion: occlusion as u8, bbox2d, bbox, score }))
}

fn read_lines(path: &Path, calib: &Calibration, with_score: bool) -> Result<Vec<Line>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(l) = parse_line(path, i + 1, line, calib, with_score)? {
            out.push(l);
        }
    }
    Ok(out)
}

/// Ground truth of the handled classes; DontCare and other types are
/// skipped.
pub fn read_labels(path: &Path, calib: &Calibration) -> Result<Vec<GroundTruth>, FormatError> {
    Ok(read_lines(path, calib, false)?
        .into_iter()
        .filter_map(|l| {
            Some(GroundTruth {
                class: l.class?,
                bbox: l.bbox,
                truncation: l.truncation,
                occlusion: l.occlusion,
                height_px: l.bbox2d.map(|b| b[3] - b[1]),
            })
        })
        .collect())
}

fn format_line(
    s: &mut String,
    name: &str,
    truncation: f64,
    occlusion: u8,
    bbox2d: Option<[f64; 4]>,
    b: &Box3D,
    calib: &Calibration,
) {
    let (bottom, ry) = calib.box_to_camera(b);
    let alpha = ry - bottom.x.atan2(bottom.z);
    let b2 = bbox2d.unwrap_or([-1.0; 4]);
    write!(
        s,
        "{name} {truncation:.2} {occlusion} {alpha:.6} {:.2} {:.2} {:.2} {:.2} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {ry:.6}",
        b2[0], b2[1], b2[2], b2[3], b.size.h, b.size.w, b.size.l, bottom.x, bottom.y, bottom.z
    )
    .expect("string write");
}

pub fn write_labels(path: &Path, gts: &[GroundTruth], calib: &Calibration) -> Result<(), FormatError> {
    let mut s = String::new();
    for g in gts {
        let bbox2d = g.height_px.map(|h| [0.0, 0.0, 0.0, h]);
        format_line(&mut s, g.class.kitti_name(), g.truncation, g.occlusion, bbox2d, &g.bbox, calib);
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

/// A scored box of one class from a result file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionEntry {
    pub class: ObjectClass,
    /// Location is the box center; the box is always present.
    pub detection: Detection,
}

/// Result-file lines: the label layout plus a trailing score. Lines of
/// other types are skipped.
pub fn read_predictions(path: &Path, calib: &Calibration) -> Result<Vec<PredictionEntry>, FormatError> {
    Ok(read_lines(path, calib, true)?
        .into_iter()
        .filter_map(|l| {
            let detection = Detection { location: l.bbox.center, score: l.score?, bbox: Some(l.bbox) };
            Some(PredictionEntry { class: l.class?, detection })
        })
        .collect())
}

/// Detections without a box are skipped; callers substitute a fallback box
/// first if they must be kept.
pub fn write_predictions(path: &Path, entries: &[PredictionEntry], calib: &Calibration) -> Result<(), FormatError> {
    let mut s = String::new();
    for e in entries {
        let Some(b) = e.detection.bbox else { continue };
        format_line(&mut s, e.class.kitti_name(), 0.0, 0, None, &b, calib);
        writeln!(s, " {:.6}", e.detection.score).expect("string write");
    }
    fs::write(path, s).map_err(io_err(path))
}
