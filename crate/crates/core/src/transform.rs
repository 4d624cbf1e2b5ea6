//! The stylization core: compress point features and style embeddings into
//! a shared low-dimensional space, predict content/style covariance factors,
//! compose the linear transform `T = T_s * T_c`, and re-center every point
//! feature (and the global feature) onto the style statistics:
//!
//!   per point:  f_d = T (f_c - mean_c) + mean_s
//!   global:     g   = maxpool(conv(f_c));  g_d = T (g_c - mean_c) + mean_s
//!
//! The learned predictors are two dense layers over the flattened
//! covariance, initialized to return the identity. An oracle mode swaps
//! them for closed-form whitening/coloring factors
//! (`T_c = C_c^-1/2`, `T_s = C_s^1/2`); that path is the test oracle, not
//! the trained path.

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cloud::FeaturePointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::StyleEmbedding;

/// Eigenvalue floor applied before sqrt / inverse-sqrt in oracle mode.
pub const EIGEN_CLAMP: f64 = 1e-8;

/// Compile-time parameter layout of [`TransformState`].
pub const PARAM_NAMES: [&str; 20] = [
    "transform.compress_c.weight",
    "transform.compress_c.bias",
    "transform.compress_s.weight",
    "transform.compress_s.bias",
    "transform.cov_c.w1",
    "transform.cov_c.b1",
    "transform.cov_c.w2",
    "transform.cov_c.b2",
    "transform.cov_s.w1",
    "transform.cov_s.b1",
    "transform.cov_s.w2",
    "transform.cov_s.b2",
    "transform.decompress.weight",
    "transform.decompress.bias",
    "transform.global_up.weight",
    "transform.global_up.bias",
    "transform.global_down.weight",
    "transform.global_down.bias",
    "transform.fuse.weight",
    "transform.fuse.bias",
];

const COMPRESS_C_W: usize = 0;
const COMPRESS_C_B: usize = 1;
const COMPRESS_S_W: usize = 2;
const COMPRESS_S_B: usize = 3;
const COV_C_W1: usize = 4;
const COV_C_B1: usize = 5;
const COV_C_W2: usize = 6;
const COV_C_B2: usize = 7;
const COV_S_W1: usize = 8;
const COV_S_B1: usize = 9;
const COV_S_W2: usize = 10;
const COV_S_B2: usize = 11;
const DECOMPRESS_W: usize = 12;
const DECOMPRESS_B: usize = 13;
const GLOBAL_UP_W: usize = 14;
const GLOBAL_UP_B: usize = 15;
const GLOBAL_DOWN_W: usize = 16;
const GLOBAL_DOWN_B: usize = 17;
const FUSE_W: usize = 18;
const FUSE_B: usize = 19;

/// Dimensions of the transform. Paper reference: D = 256, d = 64,
/// E = 512, global width 1024; the defaults here are desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// Point descriptor width D.
    pub feature_dim: usize,
    /// Compressed width d shared by content and style.
    pub compressed_dim: usize,
    /// Text embedding width E.
    pub embed_dim: usize,
    /// Hidden width of the global extractor.
    pub global_mid: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            compressed_dim: 8,
            embed_dim: 64,
            global_mid: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformState {
    pub config: TransformConfig,
    params: Vec<Tensor>,
}

impl TransformState {
    pub fn new(config: TransformConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.compressed_dim;
        let dd = d * d;
        let hidden = 4 * dd;
        let (big_d, e, g) = (config.feature_dim, config.embed_dim, config.global_mid);
        let xavier = |out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            Tensor::rand_normal(&[out, inp], (2.0 / (out + inp) as f64).sqrt(), rng)
        };
        // predictors return the identity at init: last layer zeroed, bias = vec(I)
        let identity_flat = Tensor::eye(d).reshape(&[dd]);
        let mut fuse_w = Tensor::zeros(&[big_d, 2 * big_d]);
        for i in 0..big_d {
            fuse_w.data_mut()[i * 2 * big_d + i] = 1.0;
        }
        let params = vec![
            xavier(d, big_d, &mut rng),
            Tensor::zeros(&[d]),
            xavier(d, e, &mut rng),
            Tensor::zeros(&[d]),
            xavier(hidden, dd, &mut rng),
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[dd, hidden]),
            identity_flat.clone(),
            xavier(hidden, dd, &mut rng),
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[dd, hidden]),
            identity_flat,
            xavier(big_d, d, &mut rng),
            Tensor::zeros(&[big_d]),
            xavier(g, big_d, &mut rng),
            Tensor::zeros(&[g]),
            xavier(big_d, g, &mut rng),
            Tensor::zeros(&[big_d]),
            fuse_w,
            Tensor::zeros(&[big_d]),
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
        PARAM_NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn from_entries(config: TransformConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let params = PARAM_NAMES
            .iter()
            .map(|n| crate::serialize::find(entries, n).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in PARAM_NAMES.iter().zip(&self.params) {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} contains NaN/Inf")));
            }
        }
        Ok(())
    }

    /// Put every parameter on the tape as a leaf (done once per step).
    pub fn leaf_params(&self, tape: &Tape) -> TransformVars {
        TransformVars {
            vars: self.params.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape handles to one step's transform parameters.
pub struct TransformVars {
    pub vars: Vec<Var>,
}

/// How the transform matrix T is obtained.
#[derive(Clone, Debug)]
pub enum TransformMode {
    /// Learned covariance-factor predictors (the trained path).
    Learned,
    /// Closed-form whitening/coloring (test oracle).
    Oracle,
    /// Inject a fixed `[d, d]` matrix.
    Fixed(Tensor),
}

/// Positions pass through the stylization untouched.
#[derive(Clone, Debug)]
pub struct StylizedCloud {
    pub positions: Vec<Vector3<f64>>,
    pub features: Tensor,
    pub style_text: String,
}

/// Column mean and biased covariance `(X - mean)^T (X - mean) / N`.
pub fn content_stats(features: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Degenerate(format!(
            "need [N >= 2, d] features for statistics, got {shape:?}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::Numeric("features contain NaN/Inf".into()));
    }
    let (n, d) = (shape[0], shape[1]);
    let mean = features.mean_rows();
    let mut centered = features.clone();
    for i in 0..n {
        for j in 0..d {
            centered.data_mut()[i * d + j] -= mean.data()[j];
        }
    }
    let cov = centered.transpose().matmul(&centered).scale(1.0 / n as f64);
    Ok((mean, cov))
}

/// Tape version of [`content_stats`].
pub fn stats_var(tape: &Tape, x: Var) -> (Var, Var) {
    let n = tape.shape(x)[0];
    let mean = tape.mean_rows(x);
    let centered = tape.sub_rowvec(x, mean);
    let cov = tape.scale(tape.matmul(tape.transpose(centered), centered), 1.0 / n as f64);
    (mean, cov)
}

/// `M^pow` for a symmetric PSD matrix via eigendecomposition, eigenvalues
/// clamped at [`EIGEN_CLAMP`] before the power.
pub fn sym_matrix_power(m: &Tensor, pow: f64) -> Result<Tensor> {
    let d = m.shape()[0];
    if m.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            expected: "square matrix".into(),
            got: format!("{:?}", m.shape()),
        });
    }
    let dm = DMatrix::from_row_slice(d, d, m.data());
    let sym = (&dm + dm.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_CLAMP).powf(pow));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let data: Vec<f64> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| rebuilt[(i, j)])
        .collect();
    Ok(Tensor::new(&[d, d], data))
}

/// Closed-form whitening/coloring transform `T = C_s^1/2 * C_c^-1/2`.
pub fn oracle_transform(content_cov: &Tensor, style_cov: &Tensor) -> Result<Tensor> {
    let whiten = sym_matrix_power(content_cov, -0.5)?;
    let color = sym_matrix_power(style_cov, 0.5)?;
    Ok(color.matmul(&whiten))
}

/// One covariance-factor predictor: dense(4d^2) + ReLU + dense(d^2),
/// reshaped to `[d, d]`.
fn predict_factor(tape: &Tape, cov: Var, w1: Var, b1: Var, w2: Var, b2: Var, d: usize) -> Var {
    let flat = tape.reshape(cov, &[1, d * d]);
    let hidden = tape.relu(tape.linear(flat, w1, b1));
    let out = tape.linear(hidden, w2, b2);
    tape.reshape(out, &[d, d])
}

/// Learned transform `T = T_s * T_c` on the tape.
pub fn predict_transform_var(
    tape: &Tape,
    content_cov: Var,
    style_cov: Var,
    vars: &TransformVars,
    d: usize,
) -> Var {
    let v = &vars.vars;
    let t_c = predict_factor(tape, content_cov, v[COV_C_W1], v[COV_C_B1], v[COV_C_W2], v[COV_C_B2], d);
    let t_s = predict_factor(tape, style_cov, v[COV_S_W1], v[COV_S_B1], v[COV_S_W2], v[COV_S_B2], d);
    tape.matmul(t_s, t_c)
}

/// Plain-tensor transform prediction.
pub fn predict_transform(
    content_cov: &Tensor,
    style_cov: &Tensor,
    state: &TransformState,
    mode: &TransformMode,
) -> Result<Tensor> {
    if !content_cov.is_finite() || !style_cov.is_finite() {
        return Err(Error::Numeric("covariance contains NaN/Inf".into()));
    }
    match mode {
        TransformMode::Oracle => oracle_transform(content_cov, style_cov),
        TransformMode::Fixed(t) => Ok(t.clone()),
        TransformMode::Learned => {
            let tape = Tape::new();
            let cc = tape.constant(content_cov.clone());
            let cs = tape.constant(style_cov.clone());
            let vars = state.leaf_params(&tape);
            let t = predict_transform_var(&tape, cc, cs, &vars, state.config.compressed_dim);
            Ok(tape.value(t))
        }
    }
}

/// Everything the stylization computes in one pass; tests check the
/// compressed-space mean property on `compressed`.
pub struct StylizeOutcome {
    pub stylized: StylizedCloud,
    /// `[N, d]` stylized features before decompression.
    pub compressed: Tensor,
    /// `[d]` compressed style mean (the Eq. 1 target mean).
    pub compressed_style_mean: Tensor,
    /// The `[d, d]` transform actually applied.
    pub transform: Tensor,
}

/// Tape-level stylization; returns `(stylized [N, D], compressed [N, d],
/// compressed style mean [d], T [d, d])`.
pub fn apply_style_var(
    tape: &Tape,
    features: Var,
    style_vectors: Var,
    vars: &TransformVars,
    config: &TransformConfig,
    mode: &TransformMode,
    with_global: bool,
) -> Result<(Var, Var, Var, Var)> {
    let v = &vars.vars;
    let d = config.compressed_dim;
    let n = tape.shape(features)[0];

    let xc = tape.linear(features, v[COMPRESS_C_W], v[COMPRESS_C_B]);
    let sc = tape.linear(style_vectors, v[COMPRESS_S_W], v[COMPRESS_S_B]);
    if tape.shape(xc)[0] < 2 || tape.shape(sc)[0] < 2 {
        return Err(Error::Degenerate(
            "need at least 2 points and 2 style vectors for statistics".into(),
        ));
    }
    let (mu_c, cov_c) = stats_var(tape, xc);
    let (mu_s, cov_s) = stats_var(tape, sc);

    let t = match mode {
        TransformMode::Learned => predict_transform_var(tape, cov_c, cov_s, vars, d),
        TransformMode::Oracle => {
            let t = oracle_transform(&tape.value(cov_c), &tape.value(cov_s))?;
            tape.constant(t)
        }
        TransformMode::Fixed(fixed) => {
            if fixed.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    expected: format!("[{d}, {d}]"),
                    got: format!("{:?}", fixed.shape()),
                });
            }
            tape.constant(fixed.clone())
        }
    };

    // Eq. 1 in compressed space
    let centered = tape.sub_rowvec(xc, mu_c);
    let yc = tape.add_rowvec(tape.matmul(centered, tape.transpose(t)), mu_s);
    let per_point = tape.linear(yc, v[DECOMPRESS_W], v[DECOMPRESS_B]);

    let out = if with_global {
        // Eq. 2: global feature through the same T, then fused per point
        let up = tape.relu(tape.linear(features, v[GLOBAL_UP_W], v[GLOBAL_UP_B]));
        let pooled = tape.max_rows(up);
        let g_row = tape.reshape(pooled, &[1, config.global_mid]);
        let g_feat = tape.linear(g_row, v[GLOBAL_DOWN_W], v[GLOBAL_DOWN_B]);
        let gc = tape.linear(g_feat, v[COMPRESS_C_W], v[COMPRESS_C_B]);
        let gc_centered = tape.sub_rowvec(gc, mu_c);
        let gy = tape.add_rowvec(tape.matmul(gc_centered, tape.transpose(t)), mu_s);
        let gd = tape.linear(gy, v[DECOMPRESS_W], v[DECOMPRESS_B]);
        let g_vec = tape.reshape(gd, &[config.feature_dim]);
        let tiled = tape.broadcast_rows(g_vec, n);
        let fused_in = tape.concat_cols(per_point, tiled);
        tape.linear(fused_in, v[FUSE_W], v[FUSE_B])
    } else {
        per_point
    };
    Ok((out, yc, mu_s, t))
}

/// Behaviour switches of [`apply_style`].
#[derive(Clone, Debug)]
pub struct StyleOptions {
    pub mode: TransformMode,
    pub with_global: bool,
}

impl Default for StyleOptions {
    fn default() -> Self {
        Self {
            mode: TransformMode::Learned,
            with_global: true,
        }
    }
}

pub fn apply_style_full(
    cloud: &FeaturePointCloud,
    style: &StyleEmbedding,
    state: &TransformState,
    opts: &StyleOptions,
) -> Result<StylizeOutcome> {
    cloud.validate()?;
    state.validate()?;
    if cloud.feature_dim() != state.config.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("D = {}", state.config.feature_dim),
            got: format!("D = {}", cloud.feature_dim()),
        });
    }
    if style.dim() != state.config.embed_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("E = {}", state.config.embed_dim),
            got: format!("E = {}", style.dim()),
        });
    }
    let tape = Tape::new();
    let features = tape.constant(cloud.features.clone());
    let style_vectors = tape.constant(style.vectors.clone());
    let vars = state.leaf_params(&tape);
    let (out, yc, mu_s, t) = apply_style_var(
        &tape,
        features,
        style_vectors,
        &vars,
        &state.config,
        &opts.mode,
        opts.with_global,
    )?;
    Ok(StylizeOutcome {
        stylized: StylizedCloud {
            positions: cloud.positions.clone(),
            features: tape.value(out),
            style_text: style.style_text.clone(),
        },
        compressed: tape.value(yc),
        compressed_style_mean: tape.value(mu_s),
        transform: tape.value(t),
    })
}

pub fn apply_style(
    cloud: &FeaturePointCloud,
    style: &StyleEmbedding,
    state: &TransformState,
    opts: &StyleOptions,
) -> Result<StylizedCloud> {
    Ok(apply_style_full(cloud, style, state, opts)?.stylized)
}

/// Permutation-invariant global descriptor: maxpool over points of the
/// pointwise conv stack, mapped back to D channels.
pub fn global_feature(features: &Tensor, state: &TransformState) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[0] == 0 {
        return Err(Error::EmptyCloud("global feature of empty cloud".into()));
    }
    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = state.leaf_params(&tape);
    let v = &vars.vars;
    let up = tape.relu(tape.linear(x, v[GLOBAL_UP_W], v[GLOBAL_UP_B]));
    let pooled = tape.max_rows(up);
    let row = tape.reshape(pooled, &[1, state.config.global_mid]);
    let g = tape.linear(row, v[GLOBAL_DOWN_W], v[GLOBAL_DOWN_B]);
    Ok(tape.value(g).reshape(&[state.config.feature_dim]))
}

/// Eq. 2 on a plain global feature: compress, re-center with the provided
/// compressed means, decompress back to D channels.
pub fn stylize_global(
    g: &Tensor,
    transform: &Tensor,
    content_mean: &Tensor,
    style_mean: &Tensor,
    state: &TransformState,
) -> Result<Tensor> {
    let tape = Tape::new();
    let row = tape.constant(g.reshape(&[1, state.config.feature_dim]));
    let vars = state.leaf_params(&tape);
    let v = &vars.vars;
    let gc = tape.linear(row, v[COMPRESS_C_W], v[COMPRESS_C_B]);
    let centered = tape.sub_rowvec(gc, tape.constant(content_mean.clone()));
    let t = tape.constant(transform.clone());
    let gy = tape.add_rowvec(tape.matmul(centered, tape.transpose(t)), tape.constant(style_mean.clone()));
    let gd = tape.linear(gy, v[DECOMPRESS_W], v[DECOMPRESS_B]);
    Ok(tape.value(gd).reshape(&[state.config.feature_dim]))
}

/// Attach the global feature to every point and mix back to D channels.
pub fn fuse_features(
    per_point: &Tensor,
    global: &Tensor,
    state: &TransformState,
) -> Result<Tensor> {
    let n = per_point.shape()[0];
    if per_point.shape()[1] != state.config.feature_dim
        || global.len() != state.config.feature_dim
    {
        return Err(Error::ShapeMismatch {
            expected: format!("D = {}", state.config.feature_dim),
            got: format!("{:?} / {:?}", per_point.shape(), global.shape()),
        });
    }
    let tape = Tape::new();
    let x = tape.constant(per_point.clone());
    let vars = state.leaf_params(&tape);
    let g = tape.constant(global.clone());
    let tiled = tape.broadcast_rows(g, n);
    let fused_in = tape.concat_cols(x, tiled);
    let out = tape.linear(fused_in, vars.vars[FUSE_W], vars.vars[FUSE_B]);
    Ok(tape.value(out))
}
