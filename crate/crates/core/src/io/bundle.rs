//! Scene bundles: `scene.json` plus one directory per rendered view holding
//! `rgb.rnvt` (f32), `depth.rnvt` (f64), `pointmap.rnvt` (f64), `labels.rnvt`
//! (i64) and `camera.json`.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::rnvt::{read_rnvt, write_rnvt, RnvtTensor, TensorData};
use super::write_atomic;
use crate::encoding::NormalizationTransform;
use crate::geometry::Pointmap;
use crate::scene::{generate_scene, make_camera_arc, render_view, ArcSpec, RenderedView, SceneSpec, SyntheticScene};
use crate::{CameraPose, Error, Result};

const BUNDLE_VERSION: u32 = 1;

/// Serialized form of a [`CameraPose`]; `extrinsic` is the row-major 4×4
/// world-to-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub extrinsic: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraPose> for CameraJson {
    fn from(cam: &CameraPose) -> Self {
        let m = &cam.world_to_camera;
        let mut extrinsic = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                extrinsic[r * 4 + c] = m[(r, c)];
            }
        }
        Self {
            extrinsic,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<CameraPose> {
        for (name, v) in [("fx", self.fx), ("fy", self.fy), ("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(Error::input(format!("camera field `{name}` is not finite")));
            }
        }
        for (name, v) in [("fx", self.fx), ("fy", self.fy)] {
            if v <= 0.0 {
                return Err(Error::input(format!("camera field `{name}` must be positive")));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::input("camera fields `width` and `height` must be positive"));
        }
        CameraPose::new(
            Matrix4::from_row_slice(&self.extrinsic),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
        .map_err(|e| Error::input(format!("camera field `extrinsic`: {e}")))
    }

    pub fn parse(json: &str) -> Result<CameraPose> {
        let raw: CameraJson =
            serde_json::from_str(json).map_err(|e| Error::input(format!("camera JSON: {e}")))?;
        raw.to_camera()
    }
}

pub fn write_camera_json(path: &Path, cam: &CameraPose) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&CameraJson::from(cam))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_camera_json(path: &Path) -> Result<CameraPose> {
    CameraJson::parse(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: SceneSpec,
    pub arc: ArcSpec,
    pub normalization: NormalizationTransform,
    pub num_views: usize,
    pub scene: SyntheticScene,
}

/// A generated scene with all of its rendered views.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub manifest: SceneManifest,
    pub views: Vec<RenderedView>,
}

impl SceneBundle {
    /// Generates the scene for `seed` and renders every camera of the arc.
    pub fn generate(seed: u64, spec: &SceneSpec, arc: &ArcSpec) -> Result<Self> {
        let scene = generate_scene(seed, spec)?;
        let views = make_camera_arc(&scene, arc)?
            .iter()
            .map(|cam| render_view(&scene, cam))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: SceneManifest {
                format_version: BUNDLE_VERSION,
                seed,
                spec: spec.clone(),
                arc: arc.clone(),
                normalization: NormalizationTransform::from_aabb(&scene.aabb),
                num_views: views.len(),
                scene,
            },
            views,
        })
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.manifest.scene
    }

    pub fn view(&self, k: usize) -> Result<&RenderedView> {
        self.views.get(k).ok_or_else(|| {
            Error::input(format!("view {k} out of range (bundle has {})", self.views.len()))
        })
    }
}

fn view_dir(root: &Path, k: usize) -> std::path::PathBuf {
    root.join("views").join(format!("view_{k:03}"))
}

pub fn save_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    let mut manifest = serde_json::to_vec_pretty(&bundle.manifest)?;
    manifest.push(b'\n');
    for (k, view) in bundle.views.iter().enumerate() {
        let vd = view_dir(dir, k);
        std::fs::create_dir_all(&vd)?;
        write_rnvt(&vd.join("rgb.rnvt"), &RnvtTensor::from_grid_f32(&view.rgb))?;
        write_rnvt(&vd.join("depth.rnvt"), &RnvtTensor::from_grid(&view.depth))?;
        write_rnvt(&vd.join("pointmap.rnvt"), &RnvtTensor::from_grid(&view.pointmap.to_grid()))?;
        let (h, w) = (view.height() as u64, view.width() as u64);
        write_rnvt(
            &vd.join("labels.rnvt"),
            &RnvtTensor::new(vec![h, w], TensorData::I64(view.labels.clone()))?,
        )?;
        write_camera_json(&vd.join("camera.json"), &view.camera)?;
    }
    // manifest last: a bundle without scene.json is incomplete
    write_atomic(&dir.join("scene.json"), &manifest)
}

fn load_view(dir: &Path) -> Result<RenderedView> {
    let camera = read_camera_json(&dir.join("camera.json"))?;
    let (w, h) = (camera.width, camera.height);
    let rgb = read_rnvt(&dir.join("rgb.rnvt"))?.to_grid()?;
    let depth = read_rnvt(&dir.join("depth.rnvt"))?.to_grid()?;
    let coords = read_rnvt(&dir.join("pointmap.rnvt"))?.to_grid()?;
    let labels = match read_rnvt(&dir.join("labels.rnvt"))?.into_data() {
        TensorData::I64(v) => v,
        _ => return Err(Error::Format("labels.rnvt must hold i64".into())),
    };
    let shapes_ok = [(&rgb, 3), (&depth, 1), (&coords, 3)]
        .iter()
        .all(|(g, c)| g.height() == h && g.width() == w && g.channels() == *c);
    if !shapes_ok || labels.len() != w * h {
        return Err(Error::Format(format!("view {} does not match its camera size", dir.display())));
    }
    let valid = depth.data().iter().map(|&d| d > 0.0).collect();
    Ok(RenderedView {
        rgb,
        pointmap: Pointmap::from_grid(&coords, valid)?,
        depth,
        labels,
        camera,
    })
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let text = std::fs::read_to_string(dir.join("scene.json"))
        .map_err(|e| Error::input(format!("{}: {e}", dir.join("scene.json").display())))?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("scene.json: {e}")))?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            manifest.format_version
        )));
    }
    let views = (0..manifest.num_views)
        .map(|k| load_view(&view_dir(dir, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle { manifest, views })
}
