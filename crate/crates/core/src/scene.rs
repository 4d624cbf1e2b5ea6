//! Scene data model: pinhole cameras, posed RGB-D views, and the on-disk
//! scene layout.
//!
//! Conventions used throughout the crate:
//! - camera looks down +z; depth is the camera-frame z coordinate
//! - continuous pixel coordinates: `u = fx * x / z + cx` (u along columns,
//!   v along rows); the sample stored at integer `(row, col)` sits on the
//!   ray through the pixel center `(col + 0.5, row + 0.5)`
//! - depth 0 marks an invalid sample (hole); consumers must mask it
//! - scene units are arbitrary but consistent across views

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum camera-space depth treated as "in front of the camera".
pub const EPS_DEPTH: f64 = 1e-8;

pub const DEPTH_MAGIC: [u8; 4] = *b"DPTH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Validation(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the stride-subsampled grid (e.g. the feature grid).
    pub fn scaled_down(&self, stride: usize) -> CameraIntrinsics {
        let s = 1.0 / stride as f64;
        CameraIntrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max deviation {dev:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "rotation determinant is {det:.6}, expected +1"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (c - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Rigid transform taking camera-frame points of `a` into the frame
    /// of `b`: `x_b = R x_a + t`.
    pub fn relative(a: &CameraPose, b: &CameraPose) -> CameraPose {
        let rotation = b.rotation * a.rotation.transpose();
        let translation = b.translation - rotation * a.translation;
        CameraPose {
            rotation,
            translation,
        }
    }

    /// World-to-camera pose looking from `eye` toward `target` with the
    /// given world up direction (image y points opposite `up`).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
        }
    }
}

/// A posed RGB-D view. Image is `[3, H, W]` in [0, 1]; depth is `[H, W]`
/// in scene units with 0 marking holes.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub image: Tensor,
    pub depth: Tensor,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        if self.image.shape() != [3, h, w] {
            return Err(Error::Validation(format!(
                "image shape {:?} does not match intrinsics {h}x{w}",
                self.image.shape()
            )));
        }
        if self.depth.shape() != [h, w] {
            return Err(Error::Validation(format!(
                "depth shape {:?} does not match intrinsics {h}x{w}",
                self.depth.shape()
            )));
        }
        if self.depth.data().iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Validation("depth map has negative values".into()));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<([f64; 2], f64)> {
        project_point(p, &self.intrinsics, &self.pose)
    }

    pub fn backproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>> {
        backproject_pixel(pixel, depth, &self.intrinsics, &self.pose)
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth.data()[row * self.intrinsics.width + col]
    }

    pub fn color_at(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.image.at3(0, row, col),
            self.image.at3(1, row, col),
            self.image.at3(2, row, col),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub views: Vec<CameraView>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Validation(format!(
                "scene needs at least 2 views, got {}",
                self.views.len()
            )));
        }
        for view in &self.views {
            view.validate()?;
        }
        Ok(())
    }
}

/// Pinhole projection of a world point into a view.
/// Returns the continuous pixel coordinate `(u, v)` and the camera depth.
pub fn project_point(
    p: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<([f64; 2], f64)> {
    let cam = pose.world_to_camera(p);
    if cam.z <= EPS_DEPTH {
        return Err(Error::BehindCamera { z: cam.z });
    }
    let u = intrinsics.fx * cam.x / cam.z + intrinsics.cx;
    let v = intrinsics.fy * cam.y / cam.z + intrinsics.cy;
    Ok(([u, v], cam.z))
}

/// Exact right-inverse of [`project_point`] for positive depth.
pub fn backproject_pixel(
    pixel: [f64; 2],
    depth: f64,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::InvalidDepth { depth });
    }
    let cam = Vector3::new(
        (pixel[0] - intrinsics.cx) / intrinsics.fx * depth,
        (pixel[1] - intrinsics.cy) / intrinsics.fy * depth,
        depth,
    );
    Ok(pose.camera_to_world(&cam))
}

// ---- on-disk scene layout ----
//
// scene/
//   images/%04d.png   8-bit RGB
//   depth/%04d.dpth   "DPTH", u16 height, u16 width, then row-major f32
//                     (all little-endian)
//   cameras.json      {"views": [{fx, fy, cx, cy, width, height,
//                      rotation: [9 row-major], translation: [3]}]}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<CameraRecord>,
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let mut records = Vec::with_capacity(scene.views.len());
    for (i, view) in scene.views.iter().enumerate() {
        save_image_png(&view.image, &dir.join(format!("images/{i:04}.png")))?;
        write_depth(&view.depth, &dir.join(format!("depth/{i:04}.dpth")))?;
        let r = &view.pose.rotation;
        records.push(CameraRecord {
            fx: view.intrinsics.fx,
            fy: view.intrinsics.fy,
            cx: view.intrinsics.cx,
            cy: view.intrinsics.cy,
            width: view.intrinsics.width,
            height: view.intrinsics.height,
            rotation: (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r[(i, j)])
                .collect(),
            translation: view.pose.translation.iter().copied().collect(),
        });
    }
    let json = serde_json::to_string_pretty(&CamerasFile { views: records })?;
    fs::write(dir.join("cameras.json"), json)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let cameras_path = dir.join("cameras.json");
    let text = fs::read_to_string(&cameras_path).map_err(|e| Error::SceneLoad {
        path: cameras_path.clone(),
        reason: e.to_string(),
    })?;
    let file: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::SceneLoad {
        path: cameras_path,
        reason: e.to_string(),
    })?;

    let mut views = Vec::with_capacity(file.views.len());
    for (i, rec) in file.views.iter().enumerate() {
        if rec.rotation.len() != 9 || rec.translation.len() != 3 {
            return Err(Error::SceneLoad {
                path: dir.join("cameras.json"),
                reason: format!("view {i}: rotation/translation of wrong length"),
            });
        }
        let image_path = dir.join(format!("images/{i:04}.png"));
        if !image_path.is_file() {
            return Err(Error::SceneLoad {
                path: image_path,
                reason: "missing image file".into(),
            });
        }
        let depth_path = dir.join(format!("depth/{i:04}.dpth"));
        if !depth_path.is_file() {
            return Err(Error::SceneLoad {
                path: depth_path,
                reason: "missing depth file".into(),
            });
        }
        let image = load_image_png(&image_path)?;
        let depth = read_depth(&depth_path)?;
        let rotation = Matrix3::from_iterator(rec.rotation.iter().copied()).transpose();
        let view = CameraView {
            intrinsics: CameraIntrinsics {
                fx: rec.fx,
                fy: rec.fy,
                cx: rec.cx,
                cy: rec.cy,
                width: rec.width,
                height: rec.height,
            },
            pose: CameraPose {
                rotation,
                translation: Vector3::new(
                    rec.translation[0],
                    rec.translation[1],
                    rec.translation[2],
                ),
            },
            image,
            depth,
        };
        view.validate()?;
        views.push(view);
    }

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let scene = Scene { name, views };
    scene.validate()?;
    Ok(scene)
}

/// Load a single camera record (same schema as one cameras.json entry)
/// as a view with empty image and depth buffers; rendering needs only
/// the geometry.
pub fn load_camera_json(path: &Path) -> Result<CameraView> {
    let text = fs::read_to_string(path)?;
    let rec: CameraRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if rec.rotation.len() != 9 || rec.translation.len() != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "rotation/translation of wrong length".into(),
        });
    }
    let intrinsics = CameraIntrinsics {
        fx: rec.fx,
        fy: rec.fy,
        cx: rec.cx,
        cy: rec.cy,
        width: rec.width,
        height: rec.height,
    };
    intrinsics.validate()?;
    let pose = CameraPose {
        rotation: Matrix3::from_iterator(rec.rotation.iter().copied()).transpose(),
        translation: Vector3::new(rec.translation[0], rec.translation[1], rec.translation[2]),
    };
    pose.validate()?;
    let (h, w) = (intrinsics.height, intrinsics.width);
    Ok(CameraView {
        intrinsics,
        pose,
        image: Tensor::zeros(&[3, h, w]),
        depth: Tensor::zeros(&[h, w]),
    })
}

pub fn save_image_png(image: &Tensor, path: &Path) -> Result<()> {
    assert_eq!(image.shape().len(), 3);
    assert_eq!(image.shape()[0], 3);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image.at3(0, y, x)),
                    to_u8(image.at3(1, y, x)),
                    to_u8(image.at3(2, y, x)),
                ]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set3(c, y, x, px[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn write_depth(depth: &Tensor, path: &Path) -> Result<()> {
    assert_eq!(depth.shape().len(), 2);
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    assert!(h <= u16::MAX as usize && w <= u16::MAX as usize);
    let mut f = fs::File::create(path)?;
    f.write_all(&DEPTH_MAGIC)?;
    f.write_all(&(h as u16).to_le_bytes())?;
    f.write_all(&(w as u16).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(h * w * 4);
    for &v in depth.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("short header: {e}"),
    })?;
    if header[..4] != DEPTH_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic, expected DPTH".into(),
        });
    }
    let h = u16::from_le_bytes([header[4], header[5]]) as usize;
    let w = u16::from_le_bytes([header[6], header[7]]) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != h * w * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} payload bytes, got {}", h * w * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(&[h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_view(fx: f64, cx: f64, w: usize) -> (CameraIntrinsics, CameraPose) {
        (
            CameraIntrinsics {
                fx,
                fy: fx,
                cx,
                cy: cx,
                width: w,
                height: w,
            },
            CameraPose::identity(),
        )
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let (intr, pose) = identity_view(1.0, 0.0, 1);
        let ([u, v], z) = project_point(&Vector3::new(0.0, 0.0, 1.0), &intr, &pose).unwrap();
        assert_eq!((u, v, z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn hand_pinhole_arithmetic() {
        // p = (1, 2, 2), fx = fy = 100, cx = cy = 50 -> (100, 150), depth 2
        let (intr, pose) = identity_view(100.0, 50.0, 200);
        let ([u, v], z) = project_point(&Vector3::new(1.0, 2.0, 2.0), &intr, &pose).unwrap();
        assert!((u - 100.0).abs() < 1e-12);
        assert!((v - 150.0).abs() < 1e-12);
        assert!((z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let (intr, pose) = identity_view(1.0, 0.0, 1);
        let err = project_point(&Vector3::new(0.0, 0.0, -1.0), &intr, &pose).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { .. }));
    }

    #[test]
    fn backproject_identity_case() {
        let (intr, pose) = identity_view(1.0, 0.0, 1);
        let p = backproject_pixel([0.0, 0.0], 1.0, &intr, &pose).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_inverts_hand_example() {
        let (intr, pose) = identity_view(100.0, 50.0, 200);
        let p = backproject_pixel([100.0, 150.0], 2.0, &intr, &pose).unwrap();
        assert!((p - Vector3::new(1.0, 2.0, 2.0)).norm() < 1e-9);
    }

    #[test]
    fn nonpositive_depth_is_an_error() {
        let (intr, pose) = identity_view(1.0, 0.0, 1);
        assert!(matches!(
            backproject_pixel([0.0, 0.0], 0.0, &intr, &pose),
            Err(Error::InvalidDepth { .. })
        ));
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        // random rotation via two unit vectors
        let eye = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let target = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(4.0..6.0),
        );
        CameraPose::look_at(&eye, &target, &Vector3::new(0.0, 0.0, 1.0))
    }

    #[test]
    fn project_backproject_roundtrip_1000_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let intr = CameraIntrinsics {
            fx: 80.0,
            fy: 92.0,
            cx: 31.5,
            cy: 30.0,
            width: 64,
            height: 64,
        };
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            pose.validate().unwrap();
            let pixel = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
            let depth = rng.gen_range(0.1..10.0);
            let p = backproject_pixel(pixel, depth, &intr, &pose).unwrap();
            let ([u, v], z) = project_point(&p, &intr, &pose).unwrap();
            assert!((u - pixel[0]).abs() < 1e-6);
            assert!((v - pixel[1]).abs() < 1e-6);
            assert!((z - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_composition_matches_direct_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let intr = CameraIntrinsics {
            fx: 70.0,
            fy: 70.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(4.0..6.0),
            );
            let rel = CameraPose::relative(&a, &b);
            let via = rel.world_to_camera(&a.world_to_camera(&p));
            let direct = b.world_to_camera(&p);
            assert!((via - direct).norm() < 1e-9);
            // and in pixels, when in front of both
            if direct.z > EPS_DEPTH {
                let ([u1, v1], _) = project_point(&p, &intr, &b).unwrap();
                let synth = CameraPose {
                    rotation: rel.rotation * a.rotation,
                    translation: rel.rotation * a.translation + rel.translation,
                };
                let ([u2, v2], _) = project_point(&p, &intr, &synth).unwrap();
                assert!((u1 - u2).abs() < 1e-6 && (v1 - v2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_rotation_fails_validation() {
        let mut pose = CameraPose::identity();
        pose.rotation[(0, 0)] = -1.0; // det = -1 reflection
        assert!(matches!(pose.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn depth_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dpth");
        let depth = Tensor::new(&[2, 3], vec![0.0, 1.5, 2.25, 3.0, 0.5, 9.75]);
        write_depth(&depth, &path).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, depth);
    }

    #[test]
    fn scaled_intrinsics_cover_feature_grid() {
        let intr = CameraIntrinsics {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        let s = intr.scaled_down(4);
        assert_eq!((s.width, s.height), (16, 16));
        assert!((s.fx - 15.0).abs() < 1e-12);
        assert!((s.cx - 8.0).abs() < 1e-12);
    }
}
