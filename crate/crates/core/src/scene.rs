//! Procedural quad scenes and an exact ray-cast renderer.
//!
//! Scenes live inside the world box `[-5, 5]³`. The renderer casts one ray
//! per pixel center, keeps the nearest hit and records color, camera-frame
//! depth, the world hit point and the instance id of the hit quad.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Z_NEAR};
use crate::geometry::Pointmap;
use crate::{Error, Grid, Result};

/// Half side of the world box every scene is generated in.
pub const WORLD_HALF_EXTENT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Checker {
        color_a: [f64; 3],
        color_b: [f64; 3],
        cell: f64,
    },
    ValueNoise {
        color_a: [f64; 3],
        color_b: [f64; 3],
        cell: f64,
        seed: u64,
    },
}

impl Texture {
    /// Color at quad-local coordinates `(s, t)` in world units.
    pub fn sample(&self, s: f64, t: f64) -> [f64; 3] {
        match *self {
            Texture::Checker {
                color_a,
                color_b,
                cell,
            } => {
                let parity = ((s / cell).floor() as i64 + (t / cell).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    color_a
                } else {
                    color_b
                }
            }
            Texture::ValueNoise {
                color_a,
                color_b,
                cell,
                seed,
            } => {
                let w = value_noise(s / cell, t / cell, seed);
                [
                    color_a[0] + (color_b[0] - color_a[0]) * w,
                    color_a[1] + (color_b[1] - color_a[1]) * w,
                    color_a[2] + (color_b[2] - color_a[2]) * w,
                ]
            }
        }
    }
}

fn lattice_hash(x: i64, y: i64, seed: u64) -> f64 {
    // splitmix64 finalizer over the packed lattice coordinates
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice_hash(ix, iy, seed);
    let v10 = lattice_hash(ix + 1, iy, seed);
    let v01 = lattice_hash(ix, iy + 1, seed);
    let v11 = lattice_hash(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// Planar parallelogram `corner + a·edge_u + b·edge_v`, `a, b ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub corner: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
    pub texture: Texture,
    pub instance_id: u32,
}

impl Quad {
    pub fn vertices(&self) -> [[f64; 3]; 4] {
        let c = Vector3::from(self.corner);
        let u = Vector3::from(self.edge_u);
        let v = Vector3::from(self.edge_v);
        [c, c + u, c + u + v, c + v].map(|p| [p.x, p.y, p.z])
    }

    fn is_degenerate(&self) -> bool {
        let n = Vector3::from(self.edge_u).cross(&Vector3::from(self.edge_v));
        !(n.norm() > 1e-12)
    }

    /// Ray parameter and local texture coordinates of the hit, if any.
    /// The ray direction is expected to have positive camera-frame z, so the
    /// parameter is the hit depth up to rounding.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = Vector3::from(self.corner);
        let eu = Vector3::from(self.edge_u);
        let ev = Vector3::from(self.edge_v);
        let n = eu.cross(&ev);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(c - origin)) / denom;
        if !(s > Z_NEAR) {
            return None;
        }
        let w = origin + dir * s - c;
        let (uu, vv, uv) = (eu.dot(&eu), ev.dot(&ev), eu.dot(&ev));
        let det = uu * vv - uv * uv;
        let (wu, wv) = (w.dot(&eu), w.dot(&ev));
        let a = (wu * vv - wv * uv) / det;
        let b = (wv * uu - wu * uv) / det;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return None;
        }
        Some((s, a * uu.sqrt(), b * vv.sqrt()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.max[k] - self.min[k]))
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    fn of_points<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb { min, max }
    }
}

/// Scene complexity parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Total quad count, including the backdrop when enabled.
    pub num_quads: usize,
    /// Put a large wall behind the scene as quad 0.
    pub backdrop: bool,
    /// Probability that a quad gets a value-noise rather than checker texture.
    pub noise_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_quads: 6,
            backdrop: true,
            noise_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub quads: Vec<Quad>,
    pub background_rgb: [f64; 3],
    pub aabb: Aabb,
    pub seed: u64,
}

impl SyntheticScene {
    /// Scene from explicit quads; computes the bounding box and checks the quad invariants.
    pub fn from_quads(quads: Vec<Quad>, background_rgb: [f64; 3], seed: u64) -> Result<Self> {
        let mut ids: Vec<u32> = quads.iter().map(|q| q.instance_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("quad instance ids must be unique"));
        }
        if let Some(q) = quads.iter().find(|q| q.is_degenerate()) {
            return Err(Error::input(format!("quad {} is degenerate", q.instance_id)));
        }
        let vertices: Vec<[f64; 3]> = quads.iter().flat_map(|q| q.vertices()).collect();
        let aabb = if vertices.is_empty() {
            Aabb {
                min: [-1.0; 3],
                max: [1.0; 3],
            }
        } else {
            Aabb::of_points(vertices.iter())
        };
        Ok(Self {
            quads,
            background_rgb,
            aabb,
            seed,
        })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_texture(rng: &mut ChaCha8Rng, hue: f64, saturation: f64, noise_fraction: f64) -> Texture {
    let color_a = hsv(hue, saturation, rng.random_range(0.75..0.95));
    let color_b = hsv(
        hue + rng.random_range(-0.04..0.04),
        saturation * 0.8,
        rng.random_range(0.3..0.5),
    );
    if rng.random_bool(noise_fraction.clamp(0.0, 1.0)) {
        Texture::ValueNoise {
            color_a,
            color_b,
            cell: rng.random_range(0.35..0.9),
            seed: rng.random(),
        }
    } else {
        Texture::Checker {
            color_a,
            color_b,
            cell: rng.random_range(0.3..0.8),
        }
    }
}

fn oriented_quad(center: Vector3<f64>, size: (f64, f64), yaw: f64, pitch: f64) -> [[f64; 3]; 3] {
    let rot = Rotation3::from_euler_angles(pitch, yaw, 0.0);
    let eu = rot * Vector3::new(size.0, 0.0, 0.0);
    let ev = rot * Vector3::new(0.0, size.1, 0.0);
    let corner = center - eu * 0.5 - ev * 0.5;
    [corner, eu, ev].map(|v| [v.x, v.y, v.z])
}

/// Deterministic procedural scene for `(seed, spec)`.
///
/// Layout: an optional backdrop wall at `z = -4.5` followed by quads facing
/// roughly `+z` at varied depths. The first free-standing quad sits in front
/// (`z ≥ 1`) near the axis and the next one directly behind it, so every scene
/// with at least two quads has an occluder.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.num_quads == 0 {
        return Err(Error::input("scene spec must contain at least one quad"));
    }
    if !(0.0..=1.0).contains(&spec.noise_fraction) {
        return Err(Error::input("noise_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0: f64 = rng.random();
    let mut quads = Vec::with_capacity(spec.num_quads);
    if spec.backdrop {
        let texture = random_texture(&mut rng, hue0, 0.25, spec.noise_fraction);
        quads.push(Quad {
            corner: [-WORLD_HALF_EXTENT, -4.0, -4.5],
            edge_u: [2.0 * WORLD_HALF_EXTENT, 0.0, 0.0],
            edge_v: [0.0, 8.0, 0.0],
            texture,
            instance_id: 0,
        });
    }
    let mut front_center: Option<Vector3<f64>> = None;
    while quads.len() < spec.num_quads {
        let k = quads.len();
        let free_index = k - usize::from(spec.backdrop);
        let center = match (free_index, front_center) {
            (0, _) => Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(1.0..2.5),
            ),
            (1, Some(front)) => Vector3::new(
                front.x + rng.random_range(-0.8..0.8),
                front.y + rng.random_range(-0.8..0.8),
                rng.random_range(-3.0..-1.0),
            ),
            _ => Vector3::new(
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(-3.0..2.5),
            ),
        };
        if free_index == 0 {
            front_center = Some(center);
        }
        let size = (rng.random_range(1.2..3.0), rng.random_range(1.2..3.0));
        let yaw = rng.random_range(-35f64..35.0).to_radians();
        let pitch = rng.random_range(-20f64..20.0).to_radians();
        let [corner, edge_u, edge_v] = oriented_quad(center, size, yaw, pitch);
        let hue = hue0 + 0.618_033_988_75 * k as f64;
        let texture = random_texture(&mut rng, hue, 0.75, spec.noise_fraction);
        quads.push(Quad {
            corner,
            edge_u,
            edge_v,
            texture,
            instance_id: k as u32,
        });
    }
    SyntheticScene::from_quads(quads, [0.08, 0.08, 0.1], seed)
}

/// Output of [`render_view`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// `H × W × 3` colors in `[0, 1]`.
    pub rgb: Grid,
    /// `H × W × 1` camera-frame depth, 0 on misses.
    pub depth: Grid,
    pub pointmap: Pointmap,
    /// Instance id per pixel, −1 for background.
    pub labels: Vec<i64>,
    pub camera: CameraPose,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }
}

struct PixelSample {
    rgb: [f64; 3],
    depth: f64,
    point: Option<[f64; 3]>,
    label: i64,
}

fn shade_pixel(scene: &SyntheticScene, camera: &CameraPose, row: usize, col: usize) -> PixelSample {
    let (origin, dir) = camera.ray(col as f64 + 0.5, row as f64 + 0.5);
    let mut best: Option<(f64, u32, &Quad, f64, f64)> = None;
    for quad in &scene.quads {
        if let Some((s, ts, tt)) = quad.intersect(&origin, &dir) {
            let closer = match best {
                None => true,
                Some((bs, bid, ..)) => s < bs || (s == bs && quad.instance_id < bid),
            };
            if closer {
                best = Some((s, quad.instance_id, quad, ts, tt));
            }
        }
    }
    match best {
        Some((s, id, quad, ts, tt)) => {
            let p = origin + dir * s;
            let point = [p.x, p.y, p.z];
            let depth = camera.to_camera(&point)[2];
            if depth > 0.0 {
                return PixelSample {
                    rgb: quad.texture.sample(ts, tt),
                    depth,
                    point: Some(point),
                    label: id as i64,
                };
            }
            background(scene)
        }
        None => background(scene),
    }
}

fn background(scene: &SyntheticScene) -> PixelSample {
    PixelSample {
        rgb: scene.background_rgb,
        depth: 0.0,
        point: None,
        label: -1,
    }
}

/// Ray-casts `scene` through every pixel center of `camera`.
pub fn render_view(scene: &SyntheticScene, camera: &CameraPose) -> Result<RenderedView> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<PixelSample>> = (0..h)
        .into_par_iter()
        .map(|row| (0..w).map(|col| shade_pixel(scene, camera, row, col)).collect())
        .collect();

    let mut rgb = Grid::zeros(h, w, 3);
    let mut depth = Grid::zeros(h, w, 1);
    let mut pointmap = Pointmap::empty(h, w);
    let mut labels = vec![-1i64; h * w];
    for (row, samples) in rows.into_iter().enumerate() {
        for (col, px) in samples.into_iter().enumerate() {
            let cell = row * w + col;
            rgb.cell_mut(cell).copy_from_slice(&px.rgb);
            depth.cell_mut(cell)[0] = px.depth;
            if let Some(p) = px.point {
                pointmap.set(cell, p);
            }
            labels[cell] = px.label;
        }
    }
    Ok(RenderedView {
        rgb,
        depth,
        pointmap,
        labels,
        camera: camera.clone(),
    })
}

/// Parameters of a horizontal camera arc around the scene center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcSpec {
    pub count: usize,
    pub radius: f64,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Total angular span of the arc in degrees, centered on the `+z` direction.
    pub span_deg: f64,
    /// Elevation of the arc above the scene center, in degrees.
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for ArcSpec {
    fn default() -> Self {
        Self {
            count: 7,
            radius: 11.0,
            fov_deg: 50.0,
            span_deg: 60.0,
            elevation_deg: 8.0,
            width: 64,
            height: 64,
        }
    }
}

/// `count` cameras evenly spaced on a horizontal arc, all looking at the
/// center of the scene bounding box.
pub fn make_camera_arc(scene: &SyntheticScene, arc: &ArcSpec) -> Result<Vec<CameraPose>> {
    if arc.count < 2 {
        return Err(Error::input("camera arc needs at least 2 cameras"));
    }
    if !(arc.radius > 0.0) {
        return Err(Error::input("camera arc radius must be positive"));
    }
    if !(arc.fov_deg > 0.0 && arc.fov_deg < 180.0) {
        return Err(Error::input("fov_deg must lie in (0, 180)"));
    }
    if arc.width == 0 || arc.height == 0 {
        return Err(Error::input("camera resolution must be positive"));
    }
    let center = Vector3::from(scene.aabb.center());
    let fx = 0.5 * arc.width as f64 / (0.5 * arc.fov_deg.to_radians()).tan();
    let (cx, cy) = (0.5 * arc.width as f64, 0.5 * arc.height as f64);
    let elevation = arc.elevation_deg.to_radians();
    (0..arc.count)
        .map(|k| {
            let t = k as f64 / (arc.count - 1) as f64;
            let theta = (-0.5 * arc.span_deg + t * arc.span_deg).to_radians();
            let offset = Vector3::new(
                theta.sin() * elevation.cos(),
                elevation.sin(),
                theta.cos() * elevation.cos(),
            );
            CameraPose::look_at(
                center + offset * arc.radius,
                center,
                Vector3::y(),
                fx,
                fx,
                cx,
                cy,
                arc.width,
                arc.height,
            )
        })
        .collect()
}
