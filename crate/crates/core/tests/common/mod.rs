//! Independent reference implementations shared by the integration tests.
//! None of these call into the library code they check.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewcond::attention::{AttentionBlockInput, Mat};
use viewcond::geometry::PointCloud;
use viewcond::CameraPose;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar pinhole projection: `(u, v, z)` if the point lies in front of the
/// camera and inside `w × h`, else `None`. Arithmetic order mirrors a plain
/// row-by-row matrix product so results are bit-comparable.
pub fn scalar_project(cam: &CameraPose, p: &[f64; 3], w: usize, h: usize) -> Option<(f64, f64, f64)> {
    let m = &cam.world_to_camera;
    let row = |r: usize| m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)];
    let (x, y, z) = (row(0), row(1), row(2));
    if !(z > 1e-6) {
        return None;
    }
    let u = cam.fx * x / z + cam.cx;
    let v = cam.fy * y / z + cam.cy;
    if u < 0.0 || v < 0.0 || u.floor() >= w as f64 || v.floor() >= h as f64 {
        return None;
    }
    Some((u, v, z))
}

pub struct BruteRaster {
    pub payload: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// For every pixel, scan every point and keep the one with the smallest
/// `(depth, source index)`.
pub fn brute_force_rasterize(cloud: &PointCloud, cam: &CameraPose, w: usize, h: usize) -> BruteRaster {
    let c = cloud.channels();
    let projected: Vec<Option<(usize, usize, f64)>> = cloud
        .points()
        .iter()
        .map(|p| scalar_project(cam, p, w, h).map(|(u, v, z)| (v.floor() as usize, u.floor() as usize, z)))
        .collect();
    let mut out = BruteRaster {
        payload: vec![0.0; w * h * c],
        depth: vec![f64::INFINITY; w * h],
        mask: vec![true; w * h],
    };
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(f64, u64, usize)> = None;
            for (k, pr) in projected.iter().enumerate() {
                let Some((pi, pj, z)) = *pr else { continue };
                if pi != i || pj != j {
                    continue;
                }
                let s = cloud.source_index()[k];
                let take = match best {
                    None => true,
                    Some((bz, bs, _)) => z < bz || (z == bz && s < bs),
                };
                if take {
                    best = Some((z, s, k));
                }
            }
            if let Some((z, _, k)) = best {
                let cell = i * w + j;
                out.depth[cell] = z;
                out.mask[cell] = false;
                out.payload[cell * c..(cell + 1) * c].copy_from_slice(cloud.payload(k));
            }
        }
    }
    out
}

/// A random camera looking roughly at the origin from distance 3–6.
pub fn random_camera(rng: &mut ChaCha8Rng, w: usize, h: usize) -> CameraPose {
    loop {
        let eye = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-6.0..-3.0),
        );
        let target = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let f = rng.random_range(0.6..1.4) * w as f64;
        let cx = w as f64 * rng.random_range(0.4..0.6);
        let cy = h as f64 * rng.random_range(0.4..0.6);
        if let Ok(cam) = CameraPose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0), f, f, cx, cy, w, h) {
            return cam;
        }
    }
}

/// Random cloud around the origin with some exact duplicates (depth ties)
/// and some points behind or beside the camera.
pub fn random_cloud(rng: &mut ChaCha8Rng, max_points: usize, channels: usize) -> PointCloud {
    let m = rng.random_range(0..=max_points);
    let mut cloud = PointCloud::new(channels);
    let mut payload = vec![0.0; channels];
    for _ in 0..m {
        let p = if cloud.len() > 0 && rng.random_bool(0.1) {
            cloud.points()[rng.random_range(0..cloud.len())]
        } else {
            let spread = if rng.random_bool(0.05) { 12.0 } else { 1.5 };
            [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]
        };
        payload.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        cloud.push(p, &payload);
    }
    cloud
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_attention_input(rng: &mut ChaCha8Rng, t: usize, refs: &[usize], d: usize, dv: usize) -> AttentionBlockInput {
    AttentionBlockInput {
        q: random_mat(rng, t, d),
        target_kv: (random_mat(rng, t, d), random_mat(rng, t, dv)),
        ref_kv: refs.iter().map(|&n| (random_mat(rng, n, d), random_mat(rng, n, dv))).collect(),
    }
}

/// Loop-based attention: explicit key/value lists, textbook softmax.
pub fn naive_attention(input: &AttentionBlockInput) -> Vec<Vec<f64>> {
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (k, v) in std::iter::once(&input.target_kv).chain(&input.ref_kv) {
        for r in 0..k.rows {
            keys.push(k.row(r).to_vec());
            values.push(v.row(r).to_vec());
        }
    }
    let d = input.q.cols as f64;
    (0..input.q.rows)
        .map(|r| {
            let q = input.q.row(r);
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; values[0].len()];
            for (w, v) in e.iter().zip(&values) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += w / z * x;
                }
            }
            out
        })
        .collect()
}

/// Relative error used by the finite-difference checks; absolute below 1e-6
/// so near-zero gradients do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
