//! Feature point clouds: lift posed RGB-D views through an image encoder
//! and back-project the feature grid into world space, then merge views
//! with voxel deduplication.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;

use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::scene::{backproject_pixel, Scene};
use crate::tensor::Tensor;

pub const CLOUD_MAGIC: [u8; 4] = *b"FPCL";
const FLAG_COLORS: u32 = 1;

/// 3-D points with per-point descriptors, the content representation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// `[N, D]` descriptor matrix.
    pub features: Tensor,
    pub source_view: Vec<u32>,
    /// RGB at the source pixel; carried along for synthetic scenes.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl FeaturePointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyCloud("cloud has no points".into()));
        }
        if self.features.shape()[0] != self.len() || self.source_view.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", self.len()),
                got: format!("{:?}", self.features.shape()),
            });
        }
        if !self.features.is_finite() {
            return Err(Error::Numeric("cloud features contain NaN/Inf".into()));
        }
        if self
            .positions
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::Numeric("cloud positions contain NaN/Inf".into()));
        }
        Ok(())
    }
}

/// How per-view clouds are merged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dedup {
    Off,
    Voxel(f64),
    /// Voxel size = bounding-box diagonal / 256.
    Auto,
}

/// One candidate point per valid feature-grid cell per view, positioned by
/// back-projecting the cell-center pixel at its nearest-sample depth.
pub fn build_feature_cloud(
    scene: &Scene,
    encoder: &dyn ImageEncoder,
    dedup: Dedup,
) -> Result<FeaturePointCloud> {
    scene.validate()?;
    let stride = encoder.stride();
    let dim = encoder.channels();

    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut source_view = Vec::new();
    let mut colors = Vec::new();

    for (view_idx, view) in scene.views.iter().enumerate() {
        let fmap = encoder.encode(&view.image)?;
        let (gh, gw) = (fmap.shape()[1], fmap.shape()[2]);
        let (h, w) = (view.intrinsics.height, view.intrinsics.width);
        for r in 0..gh {
            for c in 0..gw {
                // nearest depth sample at the cell-center pixel; averaging
                // across depth discontinuities would create phantom points
                let row = (r * stride + stride / 2).min(h - 1);
                let col = (c * stride + stride / 2).min(w - 1);
                let depth = view.depth_at(row, col);
                if depth <= 0.0 {
                    continue;
                }
                let pos = backproject_pixel(
                    [col as f64 + 0.5, row as f64 + 0.5],
                    depth,
                    &view.intrinsics,
                    &view.pose,
                )?;
                positions.push(pos);
                for ch in 0..dim {
                    features.push(fmap.at3(ch, r, c));
                }
                source_view.push(view_idx as u32);
                colors.push(view.color_at(row, col));
            }
        }
    }

    if positions.is_empty() {
        return Err(Error::EmptyCloud(
            "all depth samples are invalid; nothing to back-project".into(),
        ));
    }
    let n = positions.len();
    let cloud = FeaturePointCloud {
        positions,
        features: Tensor::new(&[n, dim], features),
        source_view,
        colors: Some(colors),
    };
    cloud.validate()?;

    match dedup {
        Dedup::Off => Ok(cloud),
        Dedup::Voxel(v) => voxel_dedup(&cloud, v),
        Dedup::Auto => {
            let mut lo = cloud.positions[0];
            let mut hi = cloud.positions[0];
            for p in &cloud.positions {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let extent = (hi - lo).norm();
            voxel_dedup(&cloud, (extent / 256.0).max(1e-9))
        }
    }
}

/// Merge points that share a voxel: centroid position, mean feature, the
/// first member's view tag. Output is ordered by voxel index, which makes
/// the reduction deterministic.
pub fn voxel_dedup(cloud: &FeaturePointCloud, voxel: f64) -> Result<FeaturePointCloud> {
    if voxel <= 0.0 {
        return Err(Error::Parameter(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    cloud.validate()?;
    let dim = cloud.feature_dim();
    let key = |p: &Vector3<f64>| {
        (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        )
    };
    let mut buckets: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }

    let n = buckets.len();
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    let mut source_view = Vec::with_capacity(n);
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(n));

    for members in buckets.values() {
        let count = members.len() as f64;
        let mut pos = Vector3::zeros();
        let mut feat = vec![0.0; dim];
        let mut color = [0.0; 3];
        for &i in members {
            pos += cloud.positions[i];
            for (f, &v) in feat.iter_mut().zip(cloud.features.row(i)) {
                *f += v;
            }
            if let Some(cs) = &cloud.colors {
                for k in 0..3 {
                    color[k] += cs[i][k];
                }
            }
        }
        positions.push(pos / count);
        features.extend(feat.iter().map(|v| v / count));
        source_view.push(cloud.source_view[members[0]]);
        if let Some(out) = &mut colors {
            out.push([color[0] / count, color[1] / count, color[2] / count]);
        }
    }

    Ok(FeaturePointCloud {
        positions,
        features: Tensor::new(&[n, dim], features),
        source_view,
        colors,
    })
}

// ---- FPCL container ----
// "FPCL", u32 N, u32 D, u32 flags, then positions f32, features f32,
// tags u32, and colors f32 when flag bit 0 is set. Little-endian.

pub fn save_cloud(cloud: &FeaturePointCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    let n = cloud.len();
    let d = cloud.feature_dim();
    let mut out = Vec::with_capacity(16 + n * (3 + d) * 4 + n * 4);
    out.extend_from_slice(&CLOUD_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    let flags = if cloud.colors.is_some() { FLAG_COLORS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for p in &cloud.positions {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &v in cloud.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &t in &cloud.source_view {
        out.extend_from_slice(&t.to_le_bytes());
    }
    if let Some(colors) = &cloud.colors {
        for c in colors {
            for &v in c {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<FeaturePointCloud> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fmt_err = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || bytes[..4] != CLOUD_MAGIC {
        return Err(fmt_err("bad FPCL header"));
    }
    let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n = rd_u32(4) as usize;
    let d = rd_u32(8) as usize;
    let flags = rd_u32(12);
    let has_colors = flags & FLAG_COLORS != 0;
    let expected =
        16 + n * 3 * 4 + n * d * 4 + n * 4 + if has_colors { n * 3 * 4 } else { 0 };
    if bytes.len() != expected {
        return Err(fmt_err(&format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut off = 16;
    let rd_f32 = |count: usize, off: &mut usize| -> Vec<f64> {
        let out = bytes[*off..*off + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *off += count * 4;
        out
    };
    let pos_raw = rd_f32(n * 3, &mut off);
    let feat_raw = rd_f32(n * d, &mut off);
    let positions = pos_raw
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let source_view = bytes[off..off + n * 4]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    off += n * 4;
    let colors = if has_colors {
        let raw = rd_f32(n * 3, &mut off);
        Some(raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    } else {
        None
    };
    let cloud = FeaturePointCloud {
        positions,
        features: Tensor::new(&[n, d], feat_raw),
        source_view,
        colors,
    };
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ConvEncoder;
    use crate::scene::project_point;
    use crate::synthetic::{make_synthetic_scene, SyntheticSpec, TextureId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_scene(n_views: usize) -> crate::synthetic::SyntheticScene {
        make_synthetic_scene(
            &SyntheticSpec {
                n_views,
                n_points: 100,
                texture: TextureId::Checker,
                image_size: 64,
            },
            7,
        )
        .unwrap()
    }

    fn test_encoder() -> ConvEncoder {
        ConvEncoder::from_seed(1, (4, 6, 8))
    }

    #[test]
    fn counts_match_grid_cells_without_dedup() {
        let s = test_scene(4);
        let cloud = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Off).unwrap();
        assert_eq!(cloud.len(), 4 * 16 * 16);
        assert_eq!(cloud.feature_dim(), 8);
    }

    #[test]
    fn zeroed_depth_half_drops_half_the_cells() {
        let mut s = test_scene(4);
        {
            let depth = s.scene.views[0].depth.data_mut();
            for v in depth[..32 * 64].iter_mut() {
                *v = 0.0;
            }
        }
        let cloud = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Off).unwrap();
        let from_view0 = cloud.source_view.iter().filter(|&&t| t == 0).count();
        assert_eq!(from_view0, 128);
        assert_eq!(cloud.len(), 128 + 3 * 256);
    }

    #[test]
    fn all_invalid_depth_is_empty_cloud_error() {
        let mut s = test_scene(2);
        for view in &mut s.scene.views {
            for v in view.depth.data_mut() {
                *v = 0.0;
            }
        }
        assert!(matches!(
            build_feature_cloud(&s.scene, &test_encoder(), Dedup::Off),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn positions_reproject_into_source_cells() {
        let s = test_scene(3);
        let enc = test_encoder();
        let cloud = build_feature_cloud(&s.scene, &enc, Dedup::Off).unwrap();
        let per_view = cloud.len() / 3;
        for (i, p) in cloud.positions.iter().enumerate() {
            let view = &s.scene.views[cloud.source_view[i] as usize];
            let grid = view.intrinsics.scaled_down(enc.stride());
            let ([u, v], _) = project_point(p, &grid, &view.pose).unwrap();
            let cell_in_view = i % per_view;
            let (r, c) = (cell_in_view / 16, cell_in_view % 16);
            assert!((u - (c as f64 + 0.5)).abs() < 0.5);
            assert!((v - (r as f64 + 0.5)).abs() < 0.5);
        }
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let s = test_scene(2);
        let a = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Auto).unwrap();
        let b = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Auto).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dedup_shrinks_and_stays_near_originals() {
        let s = test_scene(4);
        let raw = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Off).unwrap();
        let voxel = 0.01;
        let merged = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Voxel(voxel)).unwrap();
        assert!(merged.len() < raw.len(), "{} !< {}", merged.len(), raw.len());
        // brute force: every surviving position within voxel*sqrt(3) of an original
        let bound = voxel * 3f64.sqrt();
        for p in &merged.positions {
            let nearest = raw
                .positions
                .iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= bound, "merged point {nearest:e} from any original");
        }
    }

    #[test]
    fn all_points_in_one_voxel_collapse_to_centroid() {
        let positions = vec![
            Vector3::new(0.1, 0.1, 0.1),
            Vector3::new(0.2, 0.1, 0.3),
            Vector3::new(0.3, 0.4, 0.2),
        ];
        let cloud = FeaturePointCloud {
            positions: positions.clone(),
            features: Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            source_view: vec![0, 1, 2],
            colors: None,
        };
        let out = voxel_dedup(&cloud, 10.0).unwrap();
        assert_eq!(out.len(), 1);
        let centroid: Vector3<f64> = positions.iter().sum::<Vector3<f64>>() / 3.0;
        assert!((out.positions[0] - centroid).norm() < 1e-12);
        assert_eq!(out.features.row(0), &[2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(out.source_view[0], 0);
    }

    #[test]
    fn far_apart_points_pass_through() {
        let cloud = FeaturePointCloud {
            positions: vec![
                Vector3::new(0.5, 0.5, 0.5),
                Vector3::new(5.5, 0.5, 0.5),
                Vector3::new(0.5, 5.5, 0.5),
            ],
            features: Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]),
            source_view: vec![0, 0, 1],
            colors: None,
        };
        let out = voxel_dedup(&cloud, 1.0).unwrap();
        assert_eq!(out.len(), 3);
        let mut got: Vec<(i64, f64)> = out
            .positions
            .iter()
            .zip(out.features.data())
            .map(|(p, &f)| ((p.x * 10.0) as i64 + (p.y * 100.0) as i64, f))
            .collect();
        got.sort_by_key(|e| e.0);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn nonpositive_voxel_is_a_parameter_error() {
        let cloud = FeaturePointCloud {
            positions: vec![Vector3::zeros()],
            features: Tensor::new(&[1, 1], vec![0.0]),
            source_view: vec![0],
            colors: None,
        };
        assert!(matches!(
            voxel_dedup(&cloud, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    /// Independent brute-force dedup used as the oracle: no maps, just a
    /// linear scan over previously seen voxel keys.
    fn brute_force_dedup(cloud: &FeaturePointCloud, voxel: f64) -> FeaturePointCloud {
        let key = |p: &Vector3<f64>| {
            (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            )
        };
        let mut keys: Vec<(i64, i64, i64)> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, p) in cloud.positions.iter().enumerate() {
            let k = key(p);
            match keys.iter().position(|&kk| kk == k) {
                Some(g) => groups[g].push(i),
                None => {
                    keys.push(k);
                    groups.push(vec![i]);
                }
            }
        }
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&g| keys[g]);
        let d = cloud.feature_dim();
        let mut positions = Vec::new();
        let mut features = Vec::new();
        let mut source_view = Vec::new();
        for &g in &order {
            let members = &groups[g];
            let count = members.len() as f64;
            let mut pos = Vector3::zeros();
            let mut feat = vec![0.0; d];
            for &i in members {
                pos += cloud.positions[i];
                for (f, &v) in feat.iter_mut().zip(cloud.features.row(i)) {
                    *f += v;
                }
            }
            positions.push(pos / count);
            features.extend(feat.iter().map(|v| v / count));
            source_view.push(cloud.source_view[members[0]]);
        }
        let n = positions.len();
        FeaturePointCloud {
            positions,
            features: Tensor::new(&[n, d], features),
            source_view,
            colors: None,
        }
    }

    #[test]
    fn dedup_matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let n = 300;
            let positions: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let cloud = FeaturePointCloud {
                positions,
                features: Tensor::rand_normal(&[n, 5], 1.0, &mut rng),
                source_view: (0..n as u32).collect(),
                colors: None,
            };
            let voxel = rng.gen_range(0.05..0.5);
            let ours = voxel_dedup(&cloud, voxel).unwrap();
            let oracle = brute_force_dedup(&cloud, voxel);
            assert_eq!(ours.positions, oracle.positions);
            assert_eq!(ours.features, oracle.features);
            assert_eq!(ours.source_view, oracle.source_view);
        }
    }

    #[test]
    fn fpcl_file_roundtrip() {
        let s = test_scene(2);
        let cloud = build_feature_cloud(&s.scene, &test_encoder(), Dedup::Off).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.fpcl");
        save_cloud(&cloud, &path).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.len(), cloud.len());
        assert_eq!(back.feature_dim(), cloud.feature_dim());
        assert_eq!(back.source_view, cloud.source_view);
        // f32 storage: equal to f32 precision
        for (a, b) in cloud.features.data().iter().zip(back.features.data()) {
            assert!((*a as f32 - *b as f32).abs() == 0.0);
        }
    }
}
