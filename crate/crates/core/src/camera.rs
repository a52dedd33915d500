//! Pinhole cameras with rigid world-to-camera extrinsics.
//!
//! Conventions: camera frame is x right, y down, z forward. Pixel `(i, j)`
//! (row, column) has its center at continuous coordinates `(j + 0.5, i + 0.5)`
//! and a continuous coordinate maps back to a pixel with `floor`.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::{Error, Result};

/// Points with camera-frame depth at or below this value are discarded.
pub const Z_NEAR: f64 = 1e-6;

const RIGID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Continuous image-plane coordinates of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub valid: bool,
}

impl Projection {
    /// `(row, col)` of the pixel the projection falls in. Only meaningful when `valid`.
    #[inline]
    pub fn pixel(&self) -> (usize, usize) {
        (self.v.floor() as usize, self.u.floor() as usize)
    }
}

impl CameraPose {
    /// Builds a camera and checks the rigid-transform and intrinsics invariants.
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world `up` mapped to image-up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::numerical("look_at: eye coincides with target"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::numerical("look_at: up vector parallel to view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(
            rigid(&rotation, &(-(rotation * eye))),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.world_to_camera;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("camera extrinsic has non-finite entries"));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::input("camera extrinsic bottom row must be (0, 0, 0, 1)"));
        }
        let r = self.rotation();
        let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
        if residual > RIGID_TOL {
            return Err(Error::input(format!(
                "camera rotation is not orthonormal (residual {residual:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > RIGID_TOL {
            return Err(Error::input("camera rotation must have determinant +1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::input("camera focal lengths fx, fy must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::input("camera principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::input("camera width and height must be positive"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Orthonormality residual `max |RᵀR − I|`.
    pub fn rotation_residual(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Unit optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().row(2).transpose()
    }

    #[inline]
    pub fn to_camera(&self, world: &[f64; 3]) -> [f64; 3] {
        let m = &self.world_to_camera;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[(r, 0)] * world[0] + m[(r, 1)] * world[1] + m[(r, 2)] * world[2] + m[(r, 3)];
        }
        out
    }

    /// Projects a world point against an image of `width × height` pixels.
    #[inline]
    pub fn project_into(&self, world: &[f64; 3], width: usize, height: usize) -> Projection {
        let p = self.to_camera(world);
        let z = p[2];
        if !(z > Z_NEAR) {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                z,
                valid: false,
            };
        }
        let u = self.fx * p[0] / z + self.cx;
        let v = self.fy * p[1] / z + self.cy;
        let valid = u >= 0.0 && v >= 0.0 && u.floor() < width as f64 && v.floor() < height as f64;
        Projection { u, v, z, valid }
    }

    #[inline]
    pub fn project(&self, world: &[f64; 3]) -> Projection {
        self.project_into(world, self.width, self.height)
    }

    /// World-space ray `(origin, direction)` through continuous image point
    /// `(u, v)`. The direction is scaled so that it has camera-frame z = 1.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.center(), self.rotation().transpose() * dir_cam)
    }

    /// The same pose with intrinsics and resolution divided by `factor`
    /// (token-resolution camera for patch size `factor`).
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::input(format!(
                "camera resolution {}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        Ok(Self {
            world_to_camera: self.world_to_camera,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        })
    }
}

/// Assembles a 4×4 rigid transform from rotation and translation.
pub fn rigid(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(w: usize, h: usize) -> CameraPose {
        CameraPose::new(Matrix4::identity(), 1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn unit_intrinsics_project_on_axis_point() {
        let p = identity_cam(4, 4).project(&[0.0, 0.0, 1.0]);
        assert!(p.valid);
        assert_eq!((p.u, p.v, p.z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn behind_camera_is_invalid() {
        assert!(!identity_cam(4, 4).project(&[0.0, 0.0, -1.0]).valid);
        assert!(!identity_cam(4, 4).project(&[0.0, 0.0, 0.0]).valid);
    }

    #[test]
    fn rejects_non_rigid_extrinsic() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(
            CameraPose::new(m, 1.0, 1.0, 0.0, 0.0, 4, 4),
            Err(Error::Input(_))
        ));
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        assert!(CameraPose::new(m, 1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraPose::new(Matrix4::identity(), 0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(3.0, 1.0, 7.0);
        let target = Vector3::new(-1.0, 0.5, 0.0);
        let cam =
            CameraPose::look_at(eye, target, Vector3::y(), 50.0, 50.0, 32.0, 32.0, 64, 64).unwrap();
        let axis = cam.optical_axis();
        let to_target = (target - eye).normalize();
        assert!((axis - to_target).norm() < 1e-12);
        assert!((cam.center() - eye).norm() < 1e-12);
        let p = cam.project(&[target.x, target.y, target.z]);
        assert!((p.u - 32.0).abs() < 1e-9 && (p.v - 32.0).abs() < 1e-9);
        // world up shows up as image up (smaller v)
        let above = cam.project(&[target.x, target.y + 0.5, target.z]);
        assert!(above.v < p.v);
    }

    #[test]
    fn ray_reprojects_to_pixel_center() {
        let cam = CameraPose::look_at(
            Vector3::new(0.0, 2.0, 9.0),
            Vector3::zeros(),
            Vector3::y(),
            60.0,
            55.0,
            31.0,
            33.0,
            64,
            64,
        )
        .unwrap();
        let (o, d) = cam.ray(10.5, 20.5);
        let x = o + d * 4.0;
        let p = cam.project(&[x.x, x.y, x.z]);
        assert!((p.u - 10.5).abs() < 1e-9 && (p.v - 20.5).abs() < 1e-9);
        assert!((p.z - 4.0).abs() < 1e-9);
    }
}
