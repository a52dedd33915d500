//! Representation analysis: cosine similarity maps, geometric and semantic
//! correspondence (PCK-style scores) and local-vs-distant similarity (LDS).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{anchor_pixel, FeatureGrid};
use crate::scene::RenderedView;
use crate::{Error, Grid, Result};

/// Relative depth tolerance of the visibility gate for ground-truth matches.
pub const VISIBILITY_REL_TOL: f64 = 0.02;

/// Cosine similarity; 0 when either vector has zero norm.
#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt of the product keeps cos(a, a) exactly 1
    dot / (na * nb).sqrt()
}

/// Cosine similarity of `query` with every token of `target`. Invalid and
/// zero-norm cells report 0.
pub fn cosine_similarity_map(query: &[f64], target: &FeatureGrid) -> Result<Grid> {
    if query.len() != target.channels() {
        return Err(Error::input(format!(
            "query has {} channels, grid has {}",
            query.len(),
            target.channels()
        )));
    }
    if !(query.iter().map(|v| v * v).sum::<f64>() > 0.0) {
        return Err(Error::input("query token has zero norm"));
    }
    let mut out = Grid::zeros(target.rows(), target.cols(), 1);
    for cell in 0..target.tokens.cells() {
        if target.valid[cell] {
            out.cell_mut(cell)[0] = cosine(query, target.tokens.cell(cell));
        }
    }
    Ok(out)
}

/// `(row, col)` of the most similar valid token; ties go to the lowest index.
fn argmax_cell(query: &[f64], target: &FeatureGrid) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for cell in 0..target.tokens.cells() {
        if !target.valid[cell] {
            continue;
        }
        let s = cosine(query, target.tokens.cell(cell));
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, cell));
        }
    }
    best.map(|(_, cell)| (cell / target.cols(), cell % target.cols()))
}

#[inline]
fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: (usize, usize),
    pub predicted: (usize, usize),
    pub ground_truth: (usize, usize),
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub pck_at_tau: f64,
    pub tau_tokens: usize,
    pub num_queries: usize,
    pub per_query: Vec<QueryResult>,
}

impl CorrespondenceReport {
    fn from_results(per_query: Vec<QueryResult>, tau: usize) -> Self {
        let hits = per_query.iter().filter(|q| q.hit).count();
        Self {
            pck_at_tau: hits as f64 / per_query.len() as f64,
            tau_tokens: tau,
            num_queries: per_query.len(),
            per_query,
        }
    }

    /// One row per query: `qi,qj,pi,pj,gi,gj,hit`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_row,query_col,pred_row,pred_col,gt_row,gt_col,hit\n");
        for q in &self.per_query {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                q.query.0,
                q.query.1,
                q.predicted.0,
                q.predicted.1,
                q.ground_truth.0,
                q.ground_truth.1,
                u8::from(q.hit)
            ));
        }
        out
    }
}

/// Up to `num_queries` of `eligible`, chosen uniformly with a seeded RNG and
/// returned in ascending order.
fn pick_queries<T: Clone>(eligible: &[T], num_queries: usize, seed: u64) -> Vec<T> {
    if eligible.len() <= num_queries {
        return eligible.to_vec();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), eligible.len(), num_queries).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| eligible[i].clone()).collect()
}

/// Geometric correspondence PCK@τ between the token grids of two views of
/// one scene.
///
/// Queries are valid tokens of A whose anchor point is visible in B (its
/// projected depth agrees with B's rendered depth within 2 % relative). The
/// ground-truth cell is the B token containing the projection; the
/// prediction is the cosine argmax over B. A query hits when the two cells
/// are within Chebyshev distance τ.
pub fn geometric_correspondence_score(
    grid_a: &FeatureGrid,
    grid_b: &FeatureGrid,
    view_a: &RenderedView,
    view_b: &RenderedView,
    tau: usize,
    num_queries: usize,
    seed: u64,
) -> Result<CorrespondenceReport> {
    if grid_a.channels() != grid_b.channels() {
        return Err(Error::input("feature grids differ in channel count"));
    }
    let patch = grid_a.patch_size;
    if grid_a.rows() * patch != view_a.height()
        || grid_a.cols() * patch != view_a.width()
        || grid_b.rows() * grid_b.patch_size != view_b.height()
        || grid_b.cols() * grid_b.patch_size != view_b.width()
    {
        return Err(Error::input("feature grids do not match their views"));
    }
    let patch_b = grid_b.patch_size;
    let mut eligible = Vec::new();
    for ti in 0..grid_a.rows() {
        for tj in 0..grid_a.cols() {
            if !grid_a.valid[ti * grid_a.cols() + tj] {
                continue;
            }
            let Some(p) = view_a.pointmap.point(anchor_pixel(ti, tj, patch, view_a.width())) else {
                continue;
            };
            let proj = view_b.camera.project(p);
            if !proj.valid {
                continue;
            }
            let (row, col) = proj.pixel();
            let depth_b = view_b.depth.at(row, col)[0];
            if depth_b <= 0.0 || (proj.z - depth_b).abs() > VISIBILITY_REL_TOL * depth_b {
                continue;
            }
            eligible.push(((ti, tj), (row / patch_b, col / patch_b)));
        }
    }
    if eligible.is_empty() {
        return Err(Error::input("no query token of view A is visible in view B"));
    }
    let per_query = pick_queries(&eligible, num_queries, seed)
        .into_iter()
        .filter_map(|(query, ground_truth)| {
            let q = grid_a.tokens.at(query.0, query.1);
            let predicted = argmax_cell(q, grid_b)?;
            Some(QueryResult {
                query,
                predicted,
                ground_truth,
                hit: chebyshev(predicted, ground_truth) <= tau,
            })
        })
        .collect::<Vec<_>>();
    if per_query.is_empty() {
        return Err(Error::input("view B has no valid tokens to match against"));
    }
    Ok(CorrespondenceReport::from_results(per_query, tau))
}

/// Majority label of every `patch × patch` block; ties go to the smaller id.
pub fn dominant_labels(labels: &[i64], width: usize, height: usize, patch: usize) -> Result<Vec<i64>> {
    if patch == 0 || width % patch != 0 || height % patch != 0 || labels.len() != width * height {
        return Err(Error::input("label map does not tile into patches"));
    }
    let (rows, cols) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(rows * cols);
    let mut counts: Vec<(i64, usize)> = Vec::new();
    for ti in 0..rows {
        for tj in 0..cols {
            counts.clear();
            for r in ti * patch..(ti + 1) * patch {
                for c in tj * patch..(tj + 1) * patch {
                    let l = labels[r * width + c];
                    match counts.iter_mut().find(|(k, _)| *k == l) {
                        Some(entry) => entry.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|&(l, _)| l)
                .expect("non-empty patch");
            out.push(best);
        }
    }
    Ok(out)
}

/// Label maps of two views plus their resolution, for semantic scoring.
#[derive(Debug, Clone, Copy)]
pub struct LabelMap<'a> {
    pub labels: &'a [i64],
    pub width: usize,
    pub height: usize,
}

impl<'a> From<&'a RenderedView> for LabelMap<'a> {
    fn from(v: &'a RenderedView) -> Self {
        LabelMap {
            labels: &v.labels,
            width: v.width(),
            height: v.height(),
        }
    }
}

/// Semantic correspondence: a query hits when the predicted B cell has the
/// same dominant instance label as the query cell. Queries are valid A
/// tokens whose dominant label is an instance (not background) that is also
/// dominant somewhere among B's valid tokens. The reported ground-truth cell
/// is the first B cell carrying the query label.
pub fn semantic_correspondence_score(
    grid_a: &FeatureGrid,
    grid_b: &FeatureGrid,
    labels_a: LabelMap<'_>,
    labels_b: LabelMap<'_>,
    num_queries: usize,
    seed: u64,
) -> Result<CorrespondenceReport> {
    if grid_a.channels() != grid_b.channels() {
        return Err(Error::input("feature grids differ in channel count"));
    }
    let dom_a = dominant_labels(labels_a.labels, labels_a.width, labels_a.height, grid_a.patch_size)?;
    let dom_b = dominant_labels(labels_b.labels, labels_b.width, labels_b.height, grid_b.patch_size)?;
    if dom_a.len() != grid_a.tokens.cells() || dom_b.len() != grid_b.tokens.cells() {
        return Err(Error::input("label maps do not match feature grids"));
    }
    let first_in_b = |label: i64| {
        (0..dom_b.len()).find(|&c| grid_b.valid[c] && dom_b[c] == label)
    };
    let eligible: Vec<(usize, usize)> = (0..dom_a.len())
        .filter(|&c| grid_a.valid[c] && dom_a[c] >= 0)
        .filter_map(|c| first_in_b(dom_a[c]).map(|gt| (c, gt)))
        .collect();
    if eligible.is_empty() {
        return Err(Error::input("no query label of view A appears in view B"));
    }
    let (cols_a, cols_b) = (grid_a.cols(), grid_b.cols());
    let per_query = pick_queries(&eligible, num_queries, seed)
        .into_iter()
        .filter_map(|(qa, gt)| {
            let predicted = argmax_cell(grid_a.tokens.cell(qa), grid_b)?;
            let pred_label = dom_b[predicted.0 * cols_b + predicted.1];
            Some(QueryResult {
                query: (qa / cols_a, qa % cols_a),
                predicted,
                ground_truth: (gt / cols_b, gt % cols_b),
                hit: pred_label == dom_a[qa],
            })
        })
        .collect::<Vec<_>>();
    Ok(CorrespondenceReport::from_results(per_query, 0))
}

/// Local-vs-distant similarity: per valid token, the mean cosine to valid
/// tokens within Chebyshev distance `r_local` (self excluded) minus the mean
/// cosine to valid tokens at distance `≥ r_far`, averaged over tokens where
/// both neighbourhoods are non-empty.
pub fn lds_score(grid: &FeatureGrid, r_local: usize, r_far: usize) -> Result<f64> {
    if r_local < 1 || r_far <= r_local {
        return Err(Error::input("LDS needs 1 <= r_local < r_far"));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    if rows.max(cols) <= r_far {
        return Err(Error::input(format!(
            "grid {cols}x{rows} has no token pairs {r_far} apart"
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for a in 0..rows * cols {
        if !grid.valid[a] {
            continue;
        }
        let pa = (a / cols, a % cols);
        let ta = grid.tokens.cell(a);
        let (mut near_sum, mut near_n, mut far_sum, mut far_n) = (0.0, 0usize, 0.0, 0usize);
        for b in 0..rows * cols {
            if b == a || !grid.valid[b] {
                continue;
            }
            let d = chebyshev(pa, (b / cols, b % cols));
            if d <= r_local {
                near_sum += cosine(ta, grid.tokens.cell(b));
                near_n += 1;
            } else if d >= r_far {
                far_sum += cosine(ta, grid.tokens.cell(b));
                far_n += 1;
            }
        }
        if near_n > 0 && far_n > 0 {
            total += near_sum / near_n as f64 - far_sum / far_n as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::input("no valid token has both local and distant neighbours"));
    }
    Ok(total / counted as f64)
}
