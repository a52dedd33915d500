//! Pointmap aggregation, projection and z-buffered point rasterization.
//!
//! Every valid pointmap pixel becomes one point carrying an arbitrary payload
//! (colors, features, coordinates). Rasterization splats each point into the
//! single pixel its projection falls in and keeps, per pixel, the point with
//! the smallest camera-frame depth; exact depth ties go to the smaller
//! `source_index`. Because the winner is a lexicographic minimum over
//! `(z, source_index)`, chunked parallel execution merges to exactly the
//! sequential result.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{CameraPose, Projection};
use crate::{Error, Grid, Result};

/// Per-pixel world coordinates with validity. Invalid entries hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    height: usize,
    width: usize,
    coords: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl Pointmap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            coords: vec![[0.0; 3]; height * width],
            valid: vec![false; height * width],
        }
    }

    /// Pointmap from a `H × W × 3` coordinate grid and a validity mask.
    /// Coordinates under invalid entries are zeroed.
    pub fn from_grid(coords: &Grid, valid: Vec<bool>) -> Result<Self> {
        if coords.channels() != 3 || valid.len() != coords.cells() {
            return Err(Error::input("pointmap needs a 3-channel grid and one flag per pixel"));
        }
        let mut pm = Self::empty(coords.height(), coords.width());
        for (cell, &ok) in valid.iter().enumerate() {
            if ok {
                let c = coords.cell(cell);
                let p = [c[0], c[1], c[2]];
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::input(format!("pointmap entry {cell} is not finite")));
                }
                pm.set(cell, p);
            }
        }
        Ok(pm)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, cell: usize, point: [f64; 3]) {
        self.coords[cell] = point;
        self.valid[cell] = true;
    }

    pub fn invalidate(&mut self, cell: usize) {
        self.coords[cell] = [0.0; 3];
        self.valid[cell] = false;
    }

    #[inline]
    pub fn is_valid(&self, cell: usize) -> bool {
        self.valid[cell]
    }

    #[inline]
    pub fn point(&self, cell: usize) -> Option<&[f64; 3]> {
        self.valid[cell].then(|| &self.coords[cell])
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_grid(&self) -> Grid {
        let data = self.coords.iter().flat_map(|p| p.iter().copied()).collect();
        Grid::from_vec(self.height, self.width, 3, data).expect("pointmap shape")
    }
}

/// Aggregated world points with per-point payload channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    channels: usize,
    payload: Vec<f64>,
    source_index: Vec<u64>,
}

impl PointCloud {
    pub fn new(channels: usize) -> Self {
        Self {
            points: Vec::new(),
            channels,
            payload: Vec::new(),
            source_index: Vec::new(),
        }
    }

    /// Cloud from raw parts; `source_index` must be strictly increasing.
    pub fn from_parts(
        points: Vec<[f64; 3]>,
        channels: usize,
        payload: Vec<f64>,
        source_index: Vec<u64>,
    ) -> Result<Self> {
        if payload.len() != points.len() * channels || source_index.len() != points.len() {
            return Err(Error::input("point cloud parts have inconsistent lengths"));
        }
        if source_index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("source_index must be strictly increasing"));
        }
        Ok(Self {
            points,
            channels,
            payload,
            source_index,
        })
    }

    /// Appends a point; its source index is one past the current last one.
    pub fn push(&mut self, point: [f64; 3], payload: &[f64]) {
        debug_assert_eq!(payload.len(), self.channels);
        let next = self.source_index.last().map_or(0, |&s| s + 1);
        self.points.push(point);
        self.payload.extend_from_slice(payload);
        self.source_index.push(next);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn source_index(&self) -> &[u64] {
        &self.source_index
    }

    #[inline]
    pub fn payload(&self, k: usize) -> &[f64] {
        &self.payload[k * self.channels..(k + 1) * self.channels]
    }

    /// Writes the cloud as binary little-endian PLY with `x y z` followed by
    /// one float property per payload channel (`c0`, `c1`, …).
    pub fn write_ply<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format binary_little_endian 1.0")?;
        writeln!(out, "element vertex {}", self.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(out, "property float {axis}")?;
        }
        for c in 0..self.channels {
            writeln!(out, "property float c{c}")?;
        }
        writeln!(out, "end_header")?;
        for k in 0..self.len() {
            for v in self.points[k].iter().chain(self.payload(k)) {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// One point per valid pixel, in view order then row-major pixel order, with
/// the payload copied verbatim.
pub fn aggregate_pointmaps(pointmaps: &[Pointmap], payloads: &[Grid]) -> Result<PointCloud> {
    if pointmaps.len() != payloads.len() {
        return Err(Error::input(format!(
            "{} pointmaps but {} payload grids",
            pointmaps.len(),
            payloads.len()
        )));
    }
    let channels = payloads.first().map_or(0, Grid::channels);
    let mut cloud = PointCloud::new(channels);
    for (view, (pm, payload)) in pointmaps.iter().zip(payloads).enumerate() {
        if payload.channels() != channels {
            return Err(Error::input(format!(
                "payload of view {view} has {} channels, expected {channels}",
                payload.channels()
            )));
        }
        if payload.height() != pm.height() || payload.width() != pm.width() {
            return Err(Error::input(format!(
                "payload of view {view} does not match its pointmap resolution"
            )));
        }
        for cell in 0..pm.height() * pm.width() {
            if let Some(p) = pm.point(cell) {
                cloud.push(*p, payload.cell(cell));
            }
        }
    }
    Ok(cloud)
}

/// Projects every cloud point through `camera` against its own resolution.
pub fn project_points(cloud: &PointCloud, camera: &CameraPose) -> Result<Vec<Projection>> {
    camera.validate()?;
    Ok(cloud.points.iter().map(|p| camera.project(p)).collect())
}

/// Target-view rasterization result.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPlane {
    /// `h × w × C`, zero where `mask` is set.
    pub payload: Grid,
    /// Camera-frame depth of the winning point, `+∞` where empty.
    pub depth: Vec<f64>,
    /// `true` where no point landed (hole).
    pub mask: Vec<bool>,
    /// When `true` the first three payload channels are world coordinates.
    pub has_coords: bool,
}

impl WarpedPlane {
    pub fn height(&self) -> usize {
        self.payload.height()
    }

    pub fn width(&self) -> usize {
        self.payload.width()
    }

    pub fn hole_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

const EMPTY: (f64, u64, usize) = (f64::INFINITY, u64::MAX, usize::MAX);

#[inline]
fn better(a: (f64, u64, usize), b: (f64, u64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn splat_range(
    cloud: &PointCloud,
    camera: &CameraPose,
    (w, h): (usize, usize),
    range: std::ops::Range<usize>,
) -> Vec<(f64, u64, usize)> {
    let mut zbuf = vec![EMPTY; w * h];
    for k in range {
        let proj = camera.project_into(&cloud.points[k], w, h);
        if !proj.valid {
            continue;
        }
        let (row, col) = proj.pixel();
        let slot = &mut zbuf[row * w + col];
        let cand = (proj.z, cloud.source_index[k], k);
        if better(cand, *slot) {
            *slot = cand;
        }
    }
    zbuf
}

/// Points per worker chunk below which rasterization stays sequential.
const MIN_CHUNK: usize = 2048;

/// Nearest-point z-buffer rasterization of `cloud` into a `w × h` plane.
pub fn rasterize(cloud: &PointCloud, camera: &CameraPose, res: (usize, usize)) -> Result<WarpedPlane> {
    camera.validate()?;
    let (w, h) = res;
    if w == 0 || h == 0 {
        return Err(Error::input("rasterization resolution must be positive"));
    }
    let m = cloud.len();
    let workers = rayon::current_num_threads().max(1);
    let chunk = m.div_ceil(workers).max(MIN_CHUNK);
    let zbuf = if m <= chunk {
        splat_range(cloud, camera, res, 0..m)
    } else {
        let starts: Vec<usize> = (0..m).step_by(chunk).collect();
        starts
            .into_par_iter()
            .map(|s| splat_range(cloud, camera, res, s..(s + chunk).min(m)))
            .reduce_with(|mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    if better(y, *x) {
                        *x = y;
                    }
                }
                a
            })
            .unwrap_or_else(|| vec![EMPTY; w * h])
    };

    let c = cloud.channels;
    let mut payload = Grid::zeros(h, w, c);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut mask = vec![true; w * h];
    for (cell, &(z, _, k)) in zbuf.iter().enumerate() {
        if k != usize::MAX {
            payload.cell_mut(cell).copy_from_slice(cloud.payload(k));
            depth[cell] = z;
            mask[cell] = false;
        }
    }
    Ok(WarpedPlane {
        payload,
        depth,
        mask,
        has_coords: false,
    })
}

/// Token-resolution features with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub tokens: Grid,
    pub patch_size: usize,
    pub valid: Vec<bool>,
}

impl FeatureGrid {
    pub fn new(tokens: Grid, patch_size: usize, valid: Vec<bool>) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::input("patch size must be positive"));
        }
        if valid.len() != tokens.cells() {
            return Err(Error::input("feature validity mask does not match token grid"));
        }
        Ok(Self {
            tokens,
            patch_size,
            valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.height()
    }

    pub fn cols(&self) -> usize {
        self.tokens.width()
    }

    pub fn channels(&self) -> usize {
        self.tokens.channels()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Flat pixel index of the anchor pixel of token `(ti, tj)`: the patch center
/// `(ti·P + P/2, tj·P + P/2)` with integer division.
#[inline]
pub fn anchor_pixel(ti: usize, tj: usize, patch: usize, width: usize) -> usize {
    (ti * patch + patch / 2) * width + tj * patch + patch / 2
}

/// Anchor-pixel world coordinates per token, with validity.
pub fn pointmap_tokens(pointmap: &Pointmap, patch: usize) -> Result<(Grid, Vec<bool>)> {
    if patch == 0 || pointmap.height() % patch != 0 || pointmap.width() % patch != 0 {
        return Err(Error::input(format!(
            "pointmap {}x{} is not divisible by patch size {patch}",
            pointmap.width(),
            pointmap.height()
        )));
    }
    let (rows, cols) = (pointmap.height() / patch, pointmap.width() / patch);
    let mut coords = Grid::zeros(rows, cols, 3);
    let mut valid = vec![false; rows * cols];
    for ti in 0..rows {
        for tj in 0..cols {
            if let Some(p) = pointmap.point(anchor_pixel(ti, tj, patch, pointmap.width())) {
                coords.at_mut(ti, tj).copy_from_slice(p);
                valid[ti * cols + tj] = true;
            }
        }
    }
    Ok((coords, valid))
}

fn token_cloud(
    grids: &[FeatureGrid],
    pointmaps: &[Pointmap],
    cameras_src: &[CameraPose],
    with_coords: bool,
) -> Result<(PointCloud, usize)> {
    if grids.len() != pointmaps.len() || grids.len() != cameras_src.len() {
        return Err(Error::input(
            "feature grids, pointmaps and source cameras must have equal counts",
        ));
    }
    let patch = grids.first().map_or(1, |g| g.patch_size);
    let channels = grids.first().map_or(0, FeatureGrid::channels);
    let mut cloud = PointCloud::new(channels + if with_coords { 3 } else { 0 });
    let mut scratch = Vec::with_capacity(cloud.channels());
    for (view, ((grid, pm), cam)) in grids.iter().zip(pointmaps).zip(cameras_src).enumerate() {
        if grid.patch_size != patch || grid.channels() != channels {
            return Err(Error::input(format!(
                "feature grid of view {view} differs in patch size or channels"
            )));
        }
        if pm.width() != cam.width || pm.height() != cam.height {
            return Err(Error::input(format!(
                "pointmap of view {view} does not match its camera resolution"
            )));
        }
        if pm.height() != grid.rows() * patch || pm.width() != grid.cols() * patch {
            return Err(Error::input(format!(
                "feature grid of view {view} is inconsistent with pointmap {}x{} at patch {patch}",
                pm.width(),
                pm.height()
            )));
        }
        for ti in 0..grid.rows() {
            for tj in 0..grid.cols() {
                let token = ti * grid.cols() + tj;
                if !grid.valid[token] {
                    continue;
                }
                if let Some(p) = pm.point(anchor_pixel(ti, tj, patch, pm.width())) {
                    scratch.clear();
                    if with_coords {
                        scratch.extend_from_slice(p);
                    }
                    scratch.extend_from_slice(grid.tokens.cell(token));
                    cloud.push(*p, &scratch);
                }
            }
        }
    }
    Ok((cloud, patch))
}

/// Cloud of token anchors carrying their features (optionally prefixed by the
/// anchor's world coordinates), as consumed by [`rasterize_tokens`].
pub fn anchor_tokens(
    grids: &[FeatureGrid],
    pointmaps: &[Pointmap],
    cameras_src: &[CameraPose],
    with_coords: bool,
) -> Result<PointCloud> {
    token_cloud(grids, pointmaps, cameras_src, with_coords).map(|(cloud, _)| cloud)
}

/// Rasterizes a token cloud into the token-resolution grid of `camera_tgt`.
pub fn rasterize_tokens(
    cloud: &PointCloud,
    camera_tgt: &CameraPose,
    patch: usize,
    has_coords: bool,
) -> Result<WarpedPlane> {
    let cam = camera_tgt.downscaled(patch)?;
    let mut plane = rasterize(cloud, &cam, (cam.width, cam.height))?;
    plane.has_coords = has_coords;
    Ok(plane)
}

/// Warps token features of the source views into the target view at token
/// resolution. Each token is anchored at the 3D point of its patch-center
/// pixel; tokens with invalid anchors are skipped.
pub fn warp_features(
    grids: &[FeatureGrid],
    pointmaps: &[Pointmap],
    cameras_src: &[CameraPose],
    camera_tgt: &CameraPose,
) -> Result<WarpedPlane> {
    let (cloud, patch) = token_cloud(grids, pointmaps, cameras_src, false)?;
    rasterize_tokens(&cloud, camera_tgt, patch, false)
}

/// Like [`warp_features`], with the anchor world coordinates prepended as
/// three payload channels (`has_coords = true`).
pub fn warp_features_with_coords(
    grids: &[FeatureGrid],
    pointmaps: &[Pointmap],
    cameras_src: &[CameraPose],
    camera_tgt: &CameraPose,
) -> Result<WarpedPlane> {
    let (cloud, patch) = token_cloud(grids, pointmaps, cameras_src, true)?;
    rasterize_tokens(&cloud, camera_tgt, patch, true)
}

/// Keeps `⌈keep_fraction · M⌉` points chosen uniformly without replacement.
///
/// The choice is the prefix of a seeded random permutation, so for a fixed
/// seed smaller fractions select subsets of larger ones. Relative order and
/// source indices are preserved.
pub fn subsample_points(cloud: &PointCloud, keep_fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::input(format!(
            "keep_fraction {keep_fraction} must lie in [0, 1]"
        )));
    }
    let m = cloud.len();
    let keep = ((keep_fraction * m as f64).ceil() as usize).min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();

    let c = cloud.channels;
    let mut out = PointCloud {
        points: Vec::with_capacity(keep),
        channels: c,
        payload: Vec::with_capacity(keep * c),
        source_index: Vec::with_capacity(keep),
    };
    for k in chosen {
        out.points.push(cloud.points[k]);
        out.payload.extend_from_slice(cloud.payload(k));
        out.source_index.push(cloud.source_index[k]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn identity_cam(w: usize, h: usize) -> CameraPose {
        CameraPose::new(Matrix4::identity(), w as f64, h as f64, w as f64 / 2.0, h as f64 / 2.0, w, h)
            .unwrap()
    }

    fn full_pointmap(h: usize, w: usize, z: f64) -> Pointmap {
        let mut pm = Pointmap::empty(h, w);
        for cell in 0..h * w {
            pm.set(cell, [cell as f64 * 0.01, 0.0, z]);
        }
        pm
    }

    #[test]
    fn aggregation_counts_valid_pixels() {
        let pms = [full_pointmap(4, 4, 1.0), full_pointmap(4, 4, 2.0)];
        let payloads = [Grid::zeros(4, 4, 2), Grid::filled(4, 4, 2, 1.0)];
        let cloud = aggregate_pointmaps(&pms, &payloads).unwrap();
        assert_eq!(cloud.len(), 32);
        assert_eq!(cloud.payload(16), &[1.0, 1.0]);
        assert!(cloud.source_index().windows(2).all(|w| w[0] < w[1]));

        let empty = aggregate_pointmaps(&[Pointmap::empty(4, 4)], &[Grid::zeros(4, 4, 1)]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn aggregation_rejects_channel_mismatch() {
        let pms = [full_pointmap(2, 2, 1.0), full_pointmap(2, 2, 1.0)];
        let payloads = [Grid::zeros(2, 2, 2), Grid::zeros(2, 2, 3)];
        assert!(matches!(aggregate_pointmaps(&pms, &payloads), Err(Error::Input(_))));
        assert!(aggregate_pointmaps(&pms[..1], &[Grid::zeros(3, 2, 2)]).is_err());
    }

    #[test]
    fn nearer_point_wins() {
        let mut cloud = PointCloud::new(1);
        cloud.push([0.0, 0.0, 2.0], &[2.0]);
        cloud.push([0.0, 0.0, 1.0], &[1.0]);
        let plane = rasterize(&cloud, &identity_cam(4, 4), (4, 4)).unwrap();
        let cell = 2 * 4 + 2;
        assert_eq!(plane.payload.cell(cell), &[1.0]);
        assert_eq!(plane.depth[cell], 1.0);
        assert_eq!(plane.covered(), 1);
    }

    #[test]
    fn exact_tie_goes_to_smaller_source_index() {
        let cloud = PointCloud::from_parts(
            vec![[0.0, 0.0, 1.0], [0.01, 0.0, 1.0]],
            1,
            vec![7.0, 9.0],
            vec![3, 5],
        )
        .unwrap();
        let plane = rasterize(&cloud, &identity_cam(4, 4), (4, 4)).unwrap();
        assert_eq!(plane.payload.cell(2 * 4 + 2), &[7.0]);
    }

    #[test]
    fn empty_cloud_is_all_holes() {
        let plane = rasterize(&PointCloud::new(3), &identity_cam(5, 3), (5, 3)).unwrap();
        assert!(plane.mask.iter().all(|&m| m));
        assert!(plane.payload.data().iter().all(|&v| v == 0.0));
        assert!(plane.depth.iter().all(|d| d.is_infinite()));
        assert_eq!(plane.hole_fraction(), 1.0);
    }

    #[test]
    fn subsample_extremes() {
        let pm = full_pointmap(4, 4, 1.0);
        let cloud = aggregate_pointmaps(&[pm], &[Grid::zeros(4, 4, 1)]).unwrap();
        assert_eq!(subsample_points(&cloud, 1.0, 3).unwrap(), cloud);
        assert!(subsample_points(&cloud, 0.0, 3).unwrap().is_empty());
        assert_eq!(subsample_points(&cloud, 0.5, 3).unwrap().len(), 8);
        assert_eq!(subsample_points(&cloud, 0.01, 3).unwrap().len(), 1);
        assert!(subsample_points(&cloud, 1.5, 3).is_err());
        let half = subsample_points(&cloud, 0.5, 9).unwrap();
        assert!(half.source_index().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn warp_with_invalid_pointmap_is_all_holes() {
        let cam = identity_cam(16, 16);
        let grid = FeatureGrid::new(Grid::filled(4, 4, 2, 1.0), 4, vec![true; 16]).unwrap();
        let plane = warp_features(&[grid], &[Pointmap::empty(16, 16)], &[cam.clone()], &cam).unwrap();
        assert_eq!((plane.width(), plane.height()), (4, 4));
        assert!(plane.mask.iter().all(|&m| m));
    }

    #[test]
    fn warp_rejects_inconsistent_resolution() {
        let cam = identity_cam(16, 16);
        let grid = FeatureGrid::new(Grid::filled(3, 4, 2, 1.0), 4, vec![true; 12]).unwrap();
        assert!(matches!(
            warp_features(&[grid], &[Pointmap::empty(16, 16)], &[cam.clone()], &cam),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ply_header_and_size() {
        let mut cloud = PointCloud::new(2);
        cloud.push([1.0, 2.0, 3.0], &[0.5, 0.25]);
        let mut bytes = Vec::new();
        cloud.write_ply(&mut bytes).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert!(header.contains("element vertex 1"));
        assert!(header.contains("property float c1"));
        assert_eq!(bytes.len() - header_end, 5 * 4);
        assert_eq!(&bytes[header_end..header_end + 4], &1.0f32.to_le_bytes());
    }
}
