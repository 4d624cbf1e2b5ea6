//! Differentiable novel-view synthesis: z-buffer point splatting into a
//! feature map at the feature-grid resolution, then a U-Net-shaped decoder
//! up to image resolution.
//!
//! Splatting: every point projects through the feature-grid intrinsics and
//! touches all pixels whose centers fall within `radius`, with linear
//! falloff `1 - dist/radius`. Per pixel the contributors are depth-sorted
//! (ties broken by lower point index), the nearest K kept, and blended with
//! weights `w_i * (1/z_i)^blend` normalized to sum 1. The weights are pure
//! geometry; gradients flow through the point features only.

use std::path::Path;
use std::rc::Rc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cloud::FeaturePointCloud;
use crate::error::{Error, Result};
use crate::scene::{project_point, CameraIntrinsics, CameraPose, CameraView, EPS_DEPTH};
use crate::serialize;
use crate::tensor::Tensor;
use crate::transform::StylizedCloud;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    /// Points accumulated per pixel.
    pub k: usize,
    /// Splat radius in feature-grid pixels.
    pub radius: f64,
    /// Depth-weighted accumulation exponent.
    pub blend: f64,
    /// Feature-grid downsampling factor relative to the image.
    pub stride: usize,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            k: 8,
            radius: 2.0,
            blend: 1.0,
            stride: 4,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Parameter("splat K must be at least 1".into()));
        }
        if self.radius < 0.5 {
            return Err(Error::Parameter(format!(
                "splat radius must be at least 0.5, got {}",
                self.radius
            )));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Points plus features, borrowed from either cloud type.
#[derive(Clone, Copy)]
pub struct PointsView<'a> {
    pub positions: &'a [Vector3<f64>],
    pub features: &'a Tensor,
}

impl<'a> From<&'a FeaturePointCloud> for PointsView<'a> {
    fn from(c: &'a FeaturePointCloud) -> Self {
        Self {
            positions: &c.positions,
            features: &c.features,
        }
    }
}

impl<'a> From<&'a StylizedCloud> for PointsView<'a> {
    fn from(c: &'a StylizedCloud) -> Self {
        Self {
            positions: &c.positions,
            features: &c.features,
        }
    }
}

/// Precomputed splat geometry: normalized (pixel, point, weight) triples
/// plus the coverage mask.
pub struct SplatTable {
    pub hw: (usize, usize),
    pub entries: Rc<Vec<(usize, usize, f64)>>,
    pub mask: Tensor,
}

/// Build the splat geometry of `positions` seen through `pose` with the
/// feature-grid intrinsics.
pub fn splat_table(
    positions: &[Vector3<f64>],
    grid: &CameraIntrinsics,
    pose: &CameraPose,
    cfg: &SplatConfig,
) -> Result<SplatTable> {
    cfg.validate()?;
    if positions.is_empty() {
        return Err(Error::EmptyCloud("splat of empty cloud".into()));
    }
    let (h, w) = (grid.height, grid.width);
    let mut buckets: Vec<Vec<(f64, usize, f64)>> = vec![Vec::new(); h * w];
    let mut any_in_front = false;
    for (idx, p) in positions.iter().enumerate() {
        let Ok(([u, v], z)) = project_point(p, grid, pose) else {
            continue;
        };
        debug_assert!(z > EPS_DEPTH);
        any_in_front = true;
        let x_lo = (u - cfg.radius - 0.5).ceil().max(0.0) as usize;
        let x_hi = (u + cfg.radius - 0.5).floor().min((w - 1) as f64);
        let y_lo = (v - cfg.radius - 0.5).ceil().max(0.0) as usize;
        let y_hi = (v + cfg.radius - 0.5).floor().min((h - 1) as f64);
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        for iy in y_lo..=y_hi as usize {
            for ix in x_lo..=x_hi as usize {
                let dx = ix as f64 + 0.5 - u;
                let dy = iy as f64 + 0.5 - v;
                let dist = (dx * dx + dy * dy).sqrt();
                let wt = 1.0 - dist / cfg.radius;
                if wt > 0.0 {
                    buckets[iy * w + ix].push((z, idx, wt));
                }
            }
        }
    }
    if !any_in_front {
        return Err(Error::EmptyRender);
    }

    let mut entries = Vec::new();
    let mut mask = Tensor::zeros(&[h, w]);
    for (pix, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        bucket.truncate(cfg.k);
        let mut total = 0.0;
        for &(z, _, wt) in bucket.iter() {
            total += wt * (1.0 / z).powf(cfg.blend);
        }
        for &(z, idx, wt) in bucket.iter() {
            entries.push((pix, idx, wt * (1.0 / z).powf(cfg.blend) / total));
        }
        mask.data_mut()[pix] = 1.0;
    }
    Ok(SplatTable {
        hw: (h, w),
        entries: Rc::new(entries),
        mask,
    })
}

/// Splat a cloud into a `[D, h, w]` feature map plus coverage mask.
pub fn splat<'a>(
    cloud: impl Into<PointsView<'a>>,
    view: &CameraView,
    cfg: &SplatConfig,
) -> Result<(Tensor, Tensor)> {
    let points: PointsView = cloud.into();
    let grid = view.intrinsics.scaled_down(cfg.stride);
    let table = splat_table(points.positions, &grid, &view.pose, cfg)?;
    let tape = Tape::new();
    let f = tape.constant(points.features.clone());
    let map = tape.scatter_weighted(f, Rc::clone(&table.entries), table.hw);
    Ok((tape.value(map), table.mask))
}

// ---- decoder ----

/// U-Net-shaped decoder: two conv + average-pool levels down, a bottleneck,
/// two transposed-conv levels up with skip connections, then a final
/// bilinear x-stride upsample and a sigmoid RGB head. 3x3 kernels and ReLU
/// throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    params: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Channels of the splatted feature map (mask channel not included).
    pub feature_dim: usize,
    /// Width of the first level; the second level is twice this.
    pub base: usize,
    /// Final upsample factor from feature grid to image (the encoder
    /// stride).
    pub stride: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            base: 16,
            stride: 4,
        }
    }
}

const DECODER_NAMES: [&str; 16] = [
    "decoder.enc1.weight",
    "decoder.enc1.bias",
    "decoder.enc2.weight",
    "decoder.enc2.bias",
    "decoder.bottleneck.weight",
    "decoder.bottleneck.bias",
    "decoder.up1.weight",
    "decoder.up1.bias",
    "decoder.dec1.weight",
    "decoder.dec1.bias",
    "decoder.up2.weight",
    "decoder.up2.bias",
    "decoder.dec2.weight",
    "decoder.dec2.bias",
    "decoder.rgb.weight",
    "decoder.rgb.bias",
];

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = config.feature_dim + 1; // + coverage mask channel
        let (c1, c2) = (config.base, config.base * 2);
        let he = |o: usize, i: usize, rng: &mut ChaCha8Rng| {
            Tensor::rand_normal(&[o, i, 3, 3], (2.0 / (i * 9) as f64).sqrt(), rng)
        };
        let params = vec![
            he(c1, c_in, &mut rng),
            Tensor::zeros(&[c1]),
            he(c2, c1, &mut rng),
            Tensor::zeros(&[c2]),
            he(c2, c2, &mut rng),
            Tensor::zeros(&[c2]),
            // transposed convs store [C_in, C_out, 3, 3]
            he(c2, c2, &mut rng),
            Tensor::zeros(&[c2]),
            he(c1, 2 * c2, &mut rng),
            Tensor::zeros(&[c1]),
            he(c1, c1, &mut rng),
            Tensor::zeros(&[c1]),
            he(c1, 2 * c1, &mut rng),
            Tensor::zeros(&[c1]),
            he(3, c1, &mut rng),
            Tensor::zeros(&[3]),
        ];
        Self { config, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        DECODER_NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn from_entries(config: DecoderConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let params = DECODER_NAMES
            .iter()
            .map(|n| serialize::find(entries, n).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serialize::write_bundle(path, &self.entries())
    }

    pub fn leaf_params(&self, tape: &Tape) -> DecoderVars {
        DecoderVars {
            vars: self.params.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

pub struct DecoderVars {
    pub vars: Vec<Var>,
}

/// Decoder forward on the tape. `input` is the `[D, h, w]` feature map;
/// `mask` is appended as an extra channel. h and w must be multiples of 4.
pub fn decode_var(
    tape: &Tape,
    input: Var,
    mask: &Tensor,
    dec: &DecoderVars,
    config: &DecoderConfig,
) -> Result<Var> {
    let shape = tape.shape(input);
    if shape.len() != 3 || shape[0] != config.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, h, w]", config.feature_dim),
            got: format!("{shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "feature map dims divisible by 4".into(),
            got: format!("{h}x{w}"),
        });
    }
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            expected: format!("mask [{h}, {w}]"),
            got: format!("{:?}", mask.shape()),
        });
    }
    let v = &dec.vars;
    let mask_ch = tape.constant(mask.reshape(&[1, h, w]));
    let x = tape.concat_channels(input, mask_ch);
    let e1 = tape.relu(tape.conv2d(x, v[0], v[1], 1, 1));
    let p1 = tape.avg_pool2(e1);
    let e2 = tape.relu(tape.conv2d(p1, v[2], v[3], 1, 1));
    let p2 = tape.avg_pool2(e2);
    let b = tape.relu(tape.conv2d(p2, v[4], v[5], 1, 1));
    let u1 = tape.conv_transpose2d_x2(b, v[6], v[7]);
    let d1 = tape.relu(tape.conv2d(tape.concat_channels(u1, e2), v[8], v[9], 1, 1));
    let u2 = tape.conv_transpose2d_x2(d1, v[10], v[11]);
    let d2 = tape.relu(tape.conv2d(tape.concat_channels(u2, e1), v[12], v[13], 1, 1));
    let up = tape.resize_bilinear(d2, h * config.stride, w * config.stride);
    Ok(tape.sigmoid(tape.conv2d(up, v[14], v[15], 1, 1)))
}

/// Plain decode of a feature map and mask to an RGB image in [0, 1].
pub fn decode(feature_map: &Tensor, mask: &Tensor, decoder: &Decoder) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(feature_map.clone());
    let vars = decoder.leaf_params(&tape);
    let out = decode_var(&tape, x, mask, &vars, &decoder.config)?;
    Ok(tape.value(out))
}

/// The full view operator: splat then decode.
pub fn render_view<'a>(
    cloud: impl Into<PointsView<'a>>,
    view: &CameraView,
    cfg: &SplatConfig,
    decoder: &Decoder,
) -> Result<Tensor> {
    let (map, mask) = splat(cloud, view, cfg)?;
    decode(&map, &mask, decoder)
}
