//! Fourier positional encoding and condition-plane assembly.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::geometry::{FeatureGrid, WarpedPlane};
use crate::scene::Aabb;
use crate::{Error, Grid, Result};

/// Frequency layout of the encoding `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub num_freqs: usize,
    pub include_raw: bool,
    pub base: f64,
}

impl FourierConfig {
    pub fn new(num_freqs: usize) -> Result<Self> {
        let cfg = Self {
            num_freqs,
            include_raw: true,
            base: 2.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_freqs == 0 {
            return Err(Error::input("Fourier encoding needs num_freqs >= 1"));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::input("Fourier base must be positive and finite"));
        }
        Ok(())
    }

    /// Output width per input channel.
    pub fn width_per_channel(&self) -> usize {
        2 * self.num_freqs + usize::from(self.include_raw)
    }

    /// Default for pointmap coordinates: 6 octaves plus the raw value.
    pub fn geometry() -> Self {
        Self {
            num_freqs: 6,
            include_raw: true,
            base: 2.0,
        }
    }

    /// Default for reduced features: 2 octaves plus the raw value.
    pub fn features() -> Self {
        Self {
            num_freqs: 2,
            include_raw: true,
            base: 2.0,
        }
    }
}

/// Appends `γ(x)` for a single scalar to `out`.
#[inline]
pub fn encode_scalar(x: f64, cfg: &FourierConfig, out: &mut Vec<f64>) {
    if cfg.include_raw {
        out.push(x);
    }
    let mut freq = 1.0;
    for _ in 0..cfg.num_freqs {
        let (s, c) = (freq * PI * x).sin_cos();
        out.push(s);
        out.push(c);
        freq *= cfg.base;
    }
}

/// Encodes every channel of `x` independently:
/// `[x, sin(b⁰πx), cos(b⁰πx), …, sin(b^{L−1}πx), cos(b^{L−1}πx)]`.
pub fn fourier_encode(x: &Grid, cfg: &FourierConfig) -> Result<Grid> {
    cfg.validate()?;
    if x.data().iter().any(|v| v.abs() > 1.0 + 1e-9) {
        warn!("fourier_encode: inputs outside [-1, 1]");
    }
    let width = x.channels() * cfg.width_per_channel();
    let mut data = Vec::with_capacity(x.cells() * width);
    for &v in x.data() {
        encode_scalar(v, cfg, &mut data);
    }
    Grid::from_vec(x.height(), x.width(), width, data)
}

/// Per-axis affine map of the scene box onto `[-1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl NormalizationTransform {
    pub fn new(center: [f64; 3], half_extent: [f64; 3]) -> Result<Self> {
        if half_extent.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::input("normalization half_extent must be strictly positive"));
        }
        Ok(Self {
            center,
            half_extent,
        })
    }

    /// Transform of `aabb`; flat axes get a unit half extent.
    pub fn from_aabb(aabb: &Aabb) -> Self {
        let half = aabb.half_extent().map(|h| if h > 1e-9 { h } else { 1.0 });
        Self {
            center: aabb.center(),
            half_extent: half,
        }
    }

    #[inline]
    pub fn apply(&self, p: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|k| (p[k] - self.center[k]) / self.half_extent[k])
    }

    #[inline]
    pub fn invert(&self, q: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|k| q[k] * self.half_extent[k] + self.center[k])
    }
}

/// Normalizes a 3-channel coordinate grid; invalid cells come out as zeros.
pub fn normalize_coords(
    coords: &Grid,
    valid: &[bool],
    t: &NormalizationTransform,
) -> Result<Grid> {
    NormalizationTransform::new(t.center, t.half_extent)?;
    if coords.channels() != 3 || valid.len() != coords.cells() {
        return Err(Error::input("normalize_coords needs a 3-channel grid and one flag per cell"));
    }
    let mut out = Grid::zeros(coords.height(), coords.width(), 3);
    for (cell, _) in valid.iter().enumerate().filter(|(_, &ok)| ok) {
        out.cell_mut(cell).copy_from_slice(&t.apply(coords.cell(cell)));
    }
    Ok(out)
}

pub fn denormalize_coords(coords: &Grid, t: &NormalizationTransform) -> Result<Grid> {
    if coords.channels() != 3 {
        return Err(Error::input("denormalize_coords needs a 3-channel grid"));
    }
    let mut out = coords.clone();
    for cell in 0..coords.cells() {
        let p = t.invert(coords.cell(cell));
        out.cell_mut(cell).copy_from_slice(&p);
    }
    Ok(out)
}

/// Named contiguous channel range inside a condition plane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub name: String,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPlane {
    pub channels: Grid,
    pub layout: Vec<ChannelGroup>,
}

impl ConditionPlane {
    fn from_groups(groups: Vec<(&str, Grid)>) -> Result<Self> {
        let mut layout = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (name, g) in &groups {
            layout.push(ChannelGroup {
                name: (*name).to_string(),
                offset,
                width: g.channels(),
            });
            offset += g.channels();
        }
        let refs: Vec<&Grid> = groups.iter().map(|(_, g)| g).collect();
        Ok(Self {
            channels: Grid::concat_channels(&refs)?,
            layout,
        })
    }

    pub fn group(&self, name: &str) -> Option<&ChannelGroup> {
        self.layout.iter().find(|g| g.name == name)
    }

    /// Copy of one named group's channels.
    pub fn group_channels(&self, name: &str) -> Result<Grid> {
        let g = self
            .group(name)
            .ok_or_else(|| Error::input(format!("no channel group named {name:?}")))?;
        self.channels.slice_channels(g.offset, g.width)
    }

    pub fn layout_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.layout)?)
    }

    /// Parses a layout and checks that it tiles `total_channels` without gaps.
    pub fn parse_layout(json: &str, total_channels: usize) -> Result<Vec<ChannelGroup>> {
        let layout: Vec<ChannelGroup> = serde_json::from_str(json)?;
        let mut expected = 0;
        for g in &layout {
            if g.offset != expected {
                return Err(Error::input(format!(
                    "channel group {:?} starts at {} but previous group ends at {expected}",
                    g.name, g.offset
                )));
            }
            expected += g.width;
        }
        if expected != total_channels {
            return Err(Error::input(format!(
                "layout covers {expected} channels, plane has {total_channels}"
            )));
        }
        Ok(layout)
    }
}

fn zero_invalid(grid: &Grid, valid: &[bool]) -> Grid {
    let mut out = grid.clone();
    for (cell, _) in valid.iter().enumerate().filter(|(_, &ok)| !ok) {
        out.cell_mut(cell).fill(0.0);
    }
    out
}

/// Reference condition `[γ(normalized pointmap tokens); γ(features)]`.
/// Invalid tokens encode as `γ(0)`.
pub fn build_reference_condition(
    pointmap_tokens: &Grid,
    pointmap_valid: &[bool],
    features: &FeatureGrid,
    norm: &NormalizationTransform,
    geo_cfg: &FourierConfig,
    feat_cfg: &FourierConfig,
) -> Result<ConditionPlane> {
    if pointmap_tokens.height() != features.rows() || pointmap_tokens.width() != features.cols() {
        return Err(Error::input(format!(
            "pointmap tokens {}x{} do not match feature grid {}x{}",
            pointmap_tokens.width(),
            pointmap_tokens.height(),
            features.cols(),
            features.rows()
        )));
    }
    let coords = normalize_coords(pointmap_tokens, pointmap_valid, norm)?;
    let feats = zero_invalid(&features.tokens, &features.valid);
    ConditionPlane::from_groups(vec![
        ("geo", fourier_encode(&coords, geo_cfg)?),
        ("feat", fourier_encode(&feats, feat_cfg)?),
    ])
}

/// Target condition `[γ(X^Π), γ(T^Π), M]` from a warped plane whose first
/// three payload channels are world coordinates. The mask channel is 1 on
/// holes; hole cells encode `γ(0)` in the other groups.
pub fn build_target_condition(
    warped: &WarpedPlane,
    norm: &NormalizationTransform,
    geo_cfg: &FourierConfig,
    feat_cfg: &FourierConfig,
) -> Result<ConditionPlane> {
    if !warped.has_coords || warped.payload.channels() < 3 {
        return Err(Error::input(
            "warped plane does not carry coordinate channels for the target condition",
        ));
    }
    let covered: Vec<bool> = warped.mask.iter().map(|&m| !m).collect();
    let coords = normalize_coords(&warped.payload.slice_channels(0, 3)?, &covered, norm)?;
    let feats = zero_invalid(
        &warped
            .payload
            .slice_channels(3, warped.payload.channels() - 3)?,
        &covered,
    );
    let mask_data = warped.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = Grid::from_vec(warped.height(), warped.width(), 1, mask_data)?;
    ConditionPlane::from_groups(vec![
        ("geo", fourier_encode(&coords, geo_cfg)?),
        ("feat", fourier_encode(&feats, feat_cfg)?),
        ("mask", mask),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Grid {
        Grid::from_vec(1, 1, 1, vec![x]).unwrap()
    }

    #[test]
    fn encodes_zero_and_one() {
        let cfg = FourierConfig::new(2).unwrap();
        assert_eq!(fourier_encode(&scalar(0.0), &cfg).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 1.0]);
        let one = fourier_encode(&scalar(1.0), &FourierConfig::new(1).unwrap()).unwrap();
        let expect = [1.0, 0.0, -1.0];
        for (a, b) in one.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_width() {
        let g = Grid::zeros(2, 2, 3);
        assert_eq!(fourier_encode(&g, &FourierConfig::geometry()).unwrap().channels(), 39);
        assert!(FourierConfig::new(0).is_err());
    }

    #[test]
    fn normalization_corners_center_and_roundtrip() {
        let aabb = Aabb {
            min: [-2.0, 0.0, 1.0],
            max: [4.0, 3.0, 5.0],
        };
        let t = NormalizationTransform::from_aabb(&aabb);
        assert_eq!(t.apply(&aabb.min), [-1.0, -1.0, -1.0]);
        assert_eq!(t.apply(&aabb.max), [1.0, 1.0, 1.0]);
        assert_eq!(t.apply(&aabb.center()), [0.0, 0.0, 0.0]);
        let p = [0.3, 2.9, 1.7];
        let back = t.invert(&t.apply(&p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9);
        }
        assert!(NormalizationTransform::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_zeroes_invalid_cells() {
        let t = NormalizationTransform::new([1.0; 3], [2.0; 3]).unwrap();
        let g = Grid::filled(1, 2, 3, 5.0);
        let n = normalize_coords(&g, &[true, false], &t).unwrap();
        assert_eq!(n.data(), &[2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
        let bad = NormalizationTransform {
            center: [0.0; 3],
            half_extent: [0.0; 3],
        };
        assert!(matches!(normalize_coords(&g, &[true, true], &bad), Err(Error::Input(_))));
    }

    #[test]
    fn layout_roundtrip_and_validation() {
        let plane = ConditionPlane::from_groups(vec![
            ("geo", Grid::zeros(2, 2, 39)),
            ("feat", Grid::zeros(2, 2, 160)),
            ("mask", Grid::zeros(2, 2, 1)),
        ])
        .unwrap();
        let json = plane.layout_json().unwrap();
        assert_eq!(ConditionPlane::parse_layout(&json, 200).unwrap(), plane.layout);
        assert!(ConditionPlane::parse_layout(&json, 201).is_err());
    }
}
