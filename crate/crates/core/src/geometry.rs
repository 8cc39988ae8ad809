//! Pinhole devices, rays, reprojection and camera-projector triangulation.
//!
//! A [`DeviceModel`] maps world points into its own frame as
//! `p_dev = R * x_world + t` and then onto the pixel grid with the ideal
//! pinhole model. Integer pixel coordinates address pixel centers, so the
//! image rectangle spans `[-0.5, width - 0.5] x [-0.5, height - 0.5]`.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the device plane cannot be projected.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-12;
/// Minimum angle between a camera ray and a projector column plane.
pub const MIN_TRIANGULATION_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point for a `width x height` sensor.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("resolution must be non-zero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= -0.5
            && pixel[0] <= self.width as f64 - 0.5
            && pixel[1] >= -0.5
            && pixel[1] <= self.height as f64 - 0.5
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A ray `origin + t * direction` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain("ray direction must be non-zero".into()));
        }
        if !(t_near > 0.0 && t_near < t_far) {
            return Err(Error::Domain(format!(
                "ray bounds must satisfy 0 < t_near < t_far (got {t_near}, {t_far})"
            )));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Near/far marching bounds along a ray, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub t_near: f64,
    pub t_far: f64,
}

impl Bounds {
    pub const fn new(t_near: f64, t_far: f64) -> Self {
        Bounds { t_near, t_far }
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::new(0.5, 1.0)
    }
}

/// Calibrated pinhole device (camera or projector).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub intrinsics: Intrinsics,
    /// World to device rotation.
    pub rotation: Matrix3<f64>,
    /// World to device translation, meters.
    pub translation: Vector3<f64>,
}

impl DeviceModel {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        intrinsics.validate()?;
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if residual > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "rotation is not a proper orthonormal matrix (residual {residual:.2e}, det {:.6})",
                rotation.determinant()
            )));
        }
        Ok(DeviceModel {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Device at the world origin looking down +z.
    pub fn at_origin(intrinsics: Intrinsics) -> Self {
        DeviceModel {
            intrinsics,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Device centered at `center` whose optical axis points at `target`,
    /// keeping the device x axis horizontal (world y is down).
    pub fn looking_at(intrinsics: Intrinsics, center: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let z = (target - center).normalize();
        let down = Vector3::new(0.0, 1.0, 0.0);
        let x = down.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::DegenerateGeometry("look direction parallel to the y axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        DeviceModel::new(intrinsics, rotation, translation)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_device(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Depth of a world point along the device optical axis.
    pub fn depth_of(&self, point: &Vector3<f64>) -> f64 {
        self.rotation.row(2).transpose().dot(point) + self.translation.z
    }

    /// The reprojection function: world point to pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> Result<[f64; 2]> {
        let p = self.to_device(point);
        if p.z <= MIN_PROJECTION_DEPTH {
            return Err(Error::Projection { depth: p.z });
        }
        let k = &self.intrinsics;
        Ok([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
    }

    /// Unit back-projection direction of a pixel in world coordinates.
    pub fn pixel_direction(&self, pixel: [f64; 2]) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d = Vector3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    pub fn pixel_to_ray(&self, pixel: [f64; 2], bounds: Bounds) -> Result<Ray> {
        if !self.intrinsics.contains(pixel) {
            return Err(Error::Domain(format!(
                "pixel ({}, {}) outside {}x{} image",
                pixel[0], pixel[1], self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ray::new(self.center(), self.pixel_direction(pixel), bounds.t_near, bounds.t_far)
    }
}

/// Intersects the camera ray through `cam_pixel` with the projector plane of
/// constant column `proj_column` and returns the camera-frame depth.
pub fn triangulate(
    camera: &DeviceModel,
    cam_pixel: [f64; 2],
    projector: &DeviceModel,
    proj_column: f64,
) -> Result<f64> {
    let k = &projector.intrinsics;
    // Plane through the projector center: x_dev - ((col - cx) / fx) * z_dev = 0.
    let n_dev = Vector3::new(1.0, 0.0, -(proj_column - k.cx) / k.fx);
    let n_world = projector.rotation.transpose() * n_dev;
    let n_norm = n_world.norm();
    let offset = n_dev.dot(&projector.translation);

    let origin = camera.center();
    let dir = camera.pixel_direction(cam_pixel);
    let denom = n_world.dot(&dir);
    if denom.abs() / n_norm < MIN_TRIANGULATION_ANGLE.sin() {
        return Err(Error::DegenerateGeometry(format!(
            "camera ray nearly parallel to projector column {proj_column}"
        )));
    }
    let t = -(n_world.dot(&origin) + offset) / denom;
    Ok(camera.depth_of(&(origin + dir * t)))
}

/// Projects a 3x3 matrix onto the nearest rotation (Frobenius norm).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// One device block of a calibration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World to device rotation, row-major.
    pub rotation: [f64; 9],
    /// World to device translation, meters.
    pub translation: [f64; 3],
}

/// Rotation entries may deviate from orthonormality by at most this much.
pub const CALIBRATION_ORTHONORMAL_TOL: f64 = 1e-6;

impl DeviceRecord {
    pub fn from_device(d: &DeviceModel) -> Self {
        let r = &d.rotation;
        let k = &d.intrinsics;
        DeviceRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [d.translation.x, d.translation.y, d.translation.z],
        }
    }

    pub fn to_device(&self) -> Result<DeviceModel> {
        let intrinsics = Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let m = Matrix3::from_row_slice(&self.rotation);
        let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
        if residual > CALIBRATION_ORTHONORMAL_TOL || m.determinant() <= 0.0 {
            return Err(Error::Config(format!(
                "calibration rotation is not orthonormal (residual {residual:.2e})"
            )));
        }
        DeviceModel::new(intrinsics, nearest_rotation(&m), Vector3::from(self.translation))
    }
}

/// A calibrated camera + projector pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub camera: DeviceModel,
    pub projector: DeviceModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationFile {
    camera: DeviceRecord,
    projector: DeviceRecord,
}

impl Rig {
    /// Desk-scale reference rig: 320x256 camera at the world origin, 320x200
    /// projector 0.2 m to the right, toed in toward the middle of the working
    /// volume at z = 0.75 m.
    pub fn desk() -> Self {
        let camera = DeviceModel::at_origin(Intrinsics::centered(600.0, 320, 256).unwrap());
        let projector = DeviceModel::looking_at(
            Intrinsics::centered(420.0, 320, 200).unwrap(),
            Vector3::new(0.2, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 0.75),
        )
        .unwrap();
        Rig { camera, projector }
    }

    /// The desk rig with every resolution and focal length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let scale = |d: &DeviceModel| -> Result<DeviceModel> {
            let k = &d.intrinsics;
            let width = (k.width as f64 * factor).round() as usize;
            let height = (k.height as f64 * factor).round() as usize;
            let intr = Intrinsics::new(
                k.fx * factor,
                k.fy * factor,
                (k.cx + 0.5) * factor - 0.5,
                (k.cy + 0.5) * factor - 0.5,
                width,
                height,
            )?;
            DeviceModel::new(intr, d.rotation, d.translation)
        };
        Ok(Rig {
            camera: scale(&self.camera)?,
            projector: scale(&self.projector)?,
        })
    }

    pub fn to_toml(&self) -> String {
        let file = CalibrationFile {
            camera: DeviceRecord::from_device(&self.camera),
            projector: DeviceRecord::from_device(&self.projector),
        };
        toml::to_string_pretty(&file).expect("calibration serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: CalibrationFile = toml::from_str(text).map_err(|e| Error::parse("calibration", e))?;
        Ok(Rig {
            camera: file.camera.to_device()?,
            projector: file.projector.to_device()?,
        })
    }
}
