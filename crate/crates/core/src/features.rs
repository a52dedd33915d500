//! Synthetic feature families and channel reduction.
//!
//! The families stand in for pretrained representations with known
//! properties:
//!
//! - `oracle_geom`: Fourier encoding of the token's normalized world position
//!   plus optional Gaussian noise. Perfectly multi-view consistent at σ = 0.
//! - `appearance`: local image statistics (mean color, color variance and a
//!   4-bin signed gradient histogram). Semantic-ish, no geometry.
//! - `random`: independent Gaussian vectors per token and per view, with no
//!   cross-view signal at all.
//! - `mixed`: `oracle_geom` and `appearance` concatenated channel-wise.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_scalar, FourierConfig, NormalizationTransform};
use crate::geometry::{anchor_pixel, FeatureGrid};
use crate::scene::RenderedView;
use crate::{Error, Grid, Result};

/// Channel count of the appearance family: mean RGB, RGB variance, 4 gradient bins.
pub const APPEARANCE_CHANNELS: usize = 10;

/// Octaves of the geometric families. A single octave keeps cosine
/// similarity monotone in coordinate distance over the normalized box;
/// higher octaves alias and let distant points outscore near ones.
pub const DEFAULT_GEOM_FREQS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureFamily {
    OracleGeom {
        num_freqs: usize,
        sigma: f64,
        seed: u64,
    },
    Appearance,
    Random {
        channels: usize,
        seed: u64,
    },
    Mixed {
        num_freqs: usize,
        sigma: f64,
        seed: u64,
    },
}

impl FeatureFamily {
    pub fn oracle_geom(sigma: f64, seed: u64) -> Self {
        FeatureFamily::OracleGeom {
            num_freqs: DEFAULT_GEOM_FREQS,
            sigma,
            seed,
        }
    }

    pub fn random(seed: u64) -> Self {
        FeatureFamily::Random { channels: 32, seed }
    }

    pub fn mixed(sigma: f64, seed: u64) -> Self {
        FeatureFamily::Mixed {
            num_freqs: DEFAULT_GEOM_FREQS,
            sigma,
            seed,
        }
    }

    /// Parses a CLI family name with default parameters.
    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "oracle_geom" | "oracle-geom" => Ok(Self::oracle_geom(0.0, seed)),
            "appearance" => Ok(FeatureFamily::Appearance),
            "random" => Ok(Self::random(seed)),
            "mixed" => Ok(Self::mixed(0.0, seed)),
            other => Err(Error::input(format!(
                "unknown feature family {other:?} (expected oracle_geom, appearance, random or mixed)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureFamily::OracleGeom { .. } => "oracle_geom",
            FeatureFamily::Appearance => "appearance",
            FeatureFamily::Random { .. } => "random",
            FeatureFamily::Mixed { .. } => "mixed",
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            FeatureFamily::OracleGeom { num_freqs, .. } => 3 * (2 * num_freqs + 1),
            FeatureFamily::Appearance => APPEARANCE_CHANNELS,
            FeatureFamily::Random { channels, .. } => channels,
            FeatureFamily::Mixed { num_freqs, .. } => 3 * (2 * num_freqs + 1) + APPEARANCE_CHANNELS,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FeatureFamily::OracleGeom { num_freqs, sigma, .. }
            | FeatureFamily::Mixed { num_freqs, sigma, .. } => {
                if num_freqs == 0 {
                    return Err(Error::input("oracle_geom needs num_freqs >= 1"));
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::input("feature noise sigma must be finite and >= 0"));
                }
            }
            FeatureFamily::Random { channels, .. } if channels == 0 => {
                return Err(Error::input("random family needs at least one channel"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Identifies the view being featurized; seeds the stochastic families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewContext {
    pub norm: NormalizationTransform,
    pub scene_seed: u64,
    pub view_index: u64,
}

fn view_rng(seed: u64, ctx: &ViewContext) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ctx.scene_seed.rotate_left(17));
    rng.set_stream(ctx.view_index);
    rng
}

fn token_grid(view: &RenderedView, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || view.width() % patch != 0 || view.height() % patch != 0 {
        return Err(Error::input(format!(
            "view resolution {}x{} is not divisible by patch size {patch}",
            view.width(),
            view.height()
        )));
    }
    Ok((view.height() / patch, view.width() / patch))
}

fn oracle_geom(
    view: &RenderedView,
    patch: usize,
    ctx: &ViewContext,
    num_freqs: usize,
    sigma: f64,
    seed: u64,
) -> Result<FeatureGrid> {
    let (rows, cols) = token_grid(view, patch)?;
    let cfg = FourierConfig {
        num_freqs,
        include_raw: true,
        base: 2.0,
    };
    let channels = 3 * cfg.width_per_channel();
    let mut rng = view_rng(seed, ctx);
    let mut tokens = Grid::zeros(rows, cols, channels);
    let mut valid = vec![false; rows * cols];
    let mut enc = Vec::with_capacity(channels);
    for ti in 0..rows {
        for tj in 0..cols {
            let Some(p) = view.pointmap.point(anchor_pixel(ti, tj, patch, view.width())) else {
                continue;
            };
            enc.clear();
            for x in ctx.norm.apply(p) {
                encode_scalar(x, &cfg, &mut enc);
            }
            if sigma > 0.0 {
                for v in enc.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += sigma * n;
                }
            }
            tokens.at_mut(ti, tj).copy_from_slice(&enc);
            valid[ti * cols + tj] = true;
        }
    }
    FeatureGrid::new(tokens, patch, valid)
}

fn luminance(rgb: &[f64]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn appearance(view: &RenderedView, patch: usize) -> Result<FeatureGrid> {
    let (rows, cols) = token_grid(view, patch)?;
    let (h, w) = (view.height(), view.width());
    let lum: Vec<f64> = (0..h * w).map(|c| luminance(view.rgb.cell(c))).collect();
    let at = |r: usize, c: usize| lum[r * w + c];
    let n = (patch * patch) as f64;
    let mut tokens = Grid::zeros(rows, cols, APPEARANCE_CHANNELS);
    for ti in 0..rows {
        for tj in 0..cols {
            let mut sum = [0.0; 3];
            let mut sum_sq = [0.0; 3];
            let mut hist = [0.0; 4];
            for r in ti * patch..(ti + 1) * patch {
                for c in tj * patch..(tj + 1) * patch {
                    let px = view.rgb.at(r, c);
                    for k in 0..3 {
                        sum[k] += px[k];
                        sum_sq[k] += px[k] * px[k];
                    }
                    let gx = at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1));
                    let gy = at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c);
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        let angle = (gy.atan2(gx) + FRAC_PI_4).rem_euclid(2.0 * PI);
                        let bin = ((angle / FRAC_PI_2) as usize).min(3);
                        hist[bin] += mag;
                    }
                }
            }
            let out = tokens.at_mut(ti, tj);
            for k in 0..3 {
                let mean = sum[k] / n;
                out[k] = mean;
                out[3 + k] = (sum_sq[k] / n - mean * mean).max(0.0);
            }
            for (k, v) in hist.iter().enumerate() {
                out[6 + k] = v / n;
            }
        }
    }
    FeatureGrid::new(tokens, patch, vec![true; rows * cols])
}

fn random_tokens(
    view: &RenderedView,
    patch: usize,
    ctx: &ViewContext,
    channels: usize,
    seed: u64,
) -> Result<FeatureGrid> {
    let (rows, cols) = token_grid(view, patch)?;
    let mut rng = view_rng(seed, ctx);
    let data = (0..rows * cols * channels)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    FeatureGrid::new(Grid::from_vec(rows, cols, channels, data)?, patch, vec![true; rows * cols])
}

/// Local token features `t_l` of one rendered view.
pub fn extract_features(
    view: &RenderedView,
    family: &FeatureFamily,
    patch: usize,
    ctx: &ViewContext,
) -> Result<FeatureGrid> {
    family.validate()?;
    match *family {
        FeatureFamily::OracleGeom {
            num_freqs,
            sigma,
            seed,
        } => oracle_geom(view, patch, ctx, num_freqs, sigma, seed),
        FeatureFamily::Appearance => appearance(view, patch),
        FeatureFamily::Random { channels, seed } => random_tokens(view, patch, ctx, channels, seed),
        FeatureFamily::Mixed {
            num_freqs,
            sigma,
            seed,
        } => {
            let geo = oracle_geom(view, patch, ctx, num_freqs, sigma, seed)?;
            let app = appearance(view, patch)?;
            let tokens = Grid::concat_channels(&[&geo.tokens, &app.tokens])?;
            FeatureGrid::new(tokens, patch, geo.valid)
        }
    }
}

/// `T = [t_g; t_l]`: the masked mean of the valid local tokens broadcast to
/// every position, followed by the local token itself.
pub fn concat_global_local(local: &FeatureGrid) -> Result<FeatureGrid> {
    let c = local.channels();
    let count = local.valid_count();
    if count == 0 {
        return Err(Error::input("global token needs at least one valid local token"));
    }
    let mut global = vec![0.0; c];
    for (cell, _) in local.valid.iter().enumerate().filter(|(_, &v)| v) {
        for (g, x) in global.iter_mut().zip(local.tokens.cell(cell)) {
            *g += x;
        }
    }
    global.iter_mut().for_each(|g| *g /= count as f64);

    let (rows, cols) = (local.rows(), local.cols());
    let mut tokens = Grid::zeros(rows, cols, 2 * c);
    for cell in 0..rows * cols {
        let out = tokens.cell_mut(cell);
        out[..c].copy_from_slice(&global);
        out[c..].copy_from_slice(local.tokens.cell(cell));
    }
    FeatureGrid::new(tokens, local.patch_size, local.valid.clone())
}

/// Fixed linear projection `C_in → C_red` whose `C_red` projection
/// directions are orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReducer {
    c_in: usize,
    c_red: usize,
    /// `c_in × c_red`, row-major.
    matrix: Vec<f64>,
    seed: u64,
}

impl ChannelReducer {
    /// Seeded Gaussian directions, orthonormalized with modified Gram-Schmidt.
    pub fn new(c_in: usize, c_red: usize, seed: u64) -> Result<Self> {
        if c_red == 0 || c_red > c_in {
            return Err(Error::input(format!(
                "cannot reduce {c_in} channels to {c_red} with orthonormal directions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c_red);
        while dirs.len() < c_red {
            let mut v: Vec<f64> = (0..c_in).map(|_| rng.sample(StandardNormal)).collect();
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
        }
        let mut matrix = vec![0.0; c_in * c_red];
        for (k, d) in dirs.iter().enumerate() {
            for (i, &x) in d.iter().enumerate() {
                matrix[i * c_red + k] = x;
            }
        }
        Ok(Self {
            c_in,
            c_red,
            matrix,
            seed,
        })
    }

    pub fn identity(c: usize) -> Self {
        let mut matrix = vec![0.0; c * c];
        for i in 0..c {
            matrix[i * c + i] = 1.0;
        }
        Self {
            c_in: c,
            c_red: c,
            matrix,
            seed: 0,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_red(&self) -> usize {
        self.c_red
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Largest `|⟨d_a, d_b⟩ − δ_ab|` over the projection directions.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.c_red {
            for b in 0..self.c_red {
                let dot: f64 = (0..self.c_in)
                    .map(|i| self.matrix[i * self.c_red + a] * self.matrix[i * self.c_red + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.matrix[i * self.c_red..(i + 1) * self.c_red];
            for (o, m) in out.iter_mut().zip(row) {
                *o += xi * m;
            }
        }
    }
}

/// Per-token projection through `reducer`; validity is preserved.
pub fn reduce_channels(grid: &FeatureGrid, reducer: &ChannelReducer) -> Result<FeatureGrid> {
    if grid.channels() != reducer.c_in {
        return Err(Error::input(format!(
            "reducer expects {} channels, grid has {}",
            reducer.c_in,
            grid.channels()
        )));
    }
    let mut tokens = Grid::zeros(grid.rows(), grid.cols(), reducer.c_red);
    for cell in 0..grid.tokens.cells() {
        reducer.apply(grid.tokens.cell(cell), tokens.cell_mut(cell));
    }
    FeatureGrid::new(tokens, grid.patch_size, grid.valid.clone())
}
