//! Multi-view depth rendering: perspective projection of point clouds onto a
//! fixed camera rig with z-buffer splatting.
//!
//! Depth maps store normalized inverse depth in [0, 1]: 0 is background, 1 is
//! a point on the camera plane, and anything at the far plane (twice the
//! camera distance) maps to a small positive floor so surface pixels never
//! collide with background.

use ndarray::Array2;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Default number of views.
pub const DEFAULT_N_VIEWS: usize = 6;
/// Default camera distance from the origin.
pub const DEFAULT_CAMERA_DISTANCE: f64 = 2.0;
/// Default square resolution.
pub const DEFAULT_RESOLUTION: (usize, usize) = (32, 32);
/// Default vertical field of view in degrees.
pub const DEFAULT_FOV_DEG: f64 = 60.0;
/// Default splat radius in pixels.
pub const DEFAULT_POINT_RADIUS_PX: usize = 1;
/// Depth value assigned at the far plane; background stays 0.
pub const FAR_PLANE_VALUE: f64 = 0.05;

/// A perspective pinhole camera looking at `look_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// |position − look_at|, kept redundantly so distance scaling is explicit.
    pub distance: f64,
    /// (rows, cols).
    pub resolution: (usize, usize),
    pub fov_deg: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    a.map(|v| v / n)
}

impl Camera {
    /// Camera at `position` looking at the origin. The up vector is +y,
    /// switching to +z when the view direction is nearly vertical.
    pub fn looking_at_origin(position: [f64; 3], resolution: (usize, usize), fov_deg: f64) -> Self {
        let distance = norm(position);
        let dir = normalized([-position[0], -position[1], -position[2]]);
        let up = if dir[1].abs() > 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        Self {
            position,
            look_at: [0.0, 0.0, 0.0],
            up,
            distance,
            resolution,
            fov_deg,
        }
    }

    /// The same camera moved along its view ray so that its distance is
    /// multiplied by `factor` (view-distance augmentation).
    pub fn scaled(&self, factor: f64) -> Self {
        let offset = sub(self.position, self.look_at);
        Self {
            position: [
                self.look_at[0] + offset[0] * factor,
                self.look_at[1] + offset[1] * factor,
                self.look_at[2] + offset[2] * factor,
            ],
            distance: self.distance * factor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let offset = sub(self.position, self.look_at);
        let d = norm(offset);
        if d < 1e-12 {
            return Err(Error::Config("camera position equals look_at".into()));
        }
        if (d - self.distance).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "camera distance {} inconsistent with |position − look_at| = {d}",
                self.distance
            )));
        }
        let forward = normalized(offset);
        if norm(cross(forward, self.up)) < 1e-6 {
            return Err(Error::Config("camera up parallel to view direction".into()));
        }
        let (h, w) = self.resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        if !(0.0..180.0).contains(&self.fov_deg) || self.fov_deg == 0.0 {
            return Err(Error::Config(format!("bad fov: {}", self.fov_deg)));
        }
        Ok(())
    }

    /// Orthonormal (right, up, forward) basis; forward points at `look_at`.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let forward = normalized(sub(self.look_at, self.position));
        let right = normalized(cross(forward, self.up));
        let true_up = cross(right, forward);
        (right, true_up, forward)
    }
}

/// N single-channel depth maps with the cameras that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMapSet {
    /// One H×W map per camera, same order as `cameras`.
    pub maps: Vec<Array2<f64>>,
    pub cameras: Vec<Camera>,
}

/// Deterministic camera rig at the given distance: six axis-aligned cameras
/// (+x, −x, +y, −y, +z, −z) for `n_views` = 6, a single +z camera for 1, and
/// a Fibonacci-sphere layout otherwise. Supports 1..=26 views.
pub fn default_camera_set(
    n_views: usize,
    distance: f64,
    resolution: (usize, usize),
) -> Result<Vec<Camera>> {
    if !(1..=26).contains(&n_views) {
        return Err(Error::Config(format!(
            "n_views must be in 1..=26, got {n_views}"
        )));
    }
    if distance <= 0.0 {
        return Err(Error::Config(format!("distance must be positive: {distance}")));
    }
    let cam = |p: [f64; 3]| Camera::looking_at_origin(p, resolution, DEFAULT_FOV_DEG);
    let cameras = match n_views {
        1 => vec![cam([0.0, 0.0, distance])],
        6 => vec![
            cam([distance, 0.0, 0.0]),
            cam([-distance, 0.0, 0.0]),
            cam([0.0, distance, 0.0]),
            cam([0.0, -distance, 0.0]),
            cam([0.0, 0.0, distance]),
            cam([0.0, 0.0, -distance]),
        ],
        n => (0..n)
            .map(|i| {
                // Fibonacci sphere: evenly spread directions, golden-angle
                // spacing in azimuth.
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = i as f64 * std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
                cam([distance * r * phi.cos(), distance * r * phi.sin(), distance * z])
            })
            .collect(),
    };
    Ok(cameras)
}

fn render_one(pc: &PointCloud, camera: &Camera, point_radius_px: usize) -> Array2<f64> {
    let (rows, cols) = camera.resolution;
    let mut map = Array2::zeros((rows, cols));
    let (right, up, forward) = camera.basis();
    let tan_half = (camera.fov_deg.to_radians() / 2.0).tan();
    let far = 2.0 * camera.distance;
    let r = point_radius_px as i64;

    for p in &pc.points {
        let d = sub(*p, camera.position);
        let z = dot(d, forward);
        if z <= 1e-9 || z > far {
            continue;
        }
        let x_ndc = dot(d, right) / (z * tan_half);
        let y_ndc = dot(d, up) / (z * tan_half);
        let col = ((x_ndc + 1.0) / 2.0 * cols as f64).floor() as i64;
        let row = ((1.0 - (y_ndc + 1.0) / 2.0) * rows as f64).floor() as i64;
        let value = 1.0 - (1.0 - FAR_PLANE_VALUE) * z / far;
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (rr, cc) = (row + dy, col + dx);
                if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                    continue;
                }
                let cell = &mut map[(rr as usize, cc as usize)];
                // Larger value = nearer point; the z-buffer keeps the nearest.
                if value > *cell {
                    *cell = value;
                }
            }
        }
    }
    map
}

/// Projects the cloud through every camera and splats each point as a disc of
/// the given pixel radius. Views render independently (in parallel) and are
/// returned in camera order.
pub fn render_views(
    pc: &PointCloud,
    cameras: &[Camera],
    point_radius_px: usize,
) -> Result<DepthMapSet> {
    if pc.is_empty() {
        return Err(Error::DegenerateCloud(format!(
            "{}: cannot render empty cloud",
            pc.sample_id
        )));
    }
    for camera in cameras {
        camera.validate()?;
    }
    let maps: Vec<Array2<f64>> = cameras
        .par_iter()
        .map(|camera| render_one(pc, camera, point_radius_px))
        .collect();
    Ok(DepthMapSet {
        maps,
        cameras: cameras.to_vec(),
    })
}

/// Writes one depth map as binary PGM (P5), quantized to 8 bits. Debug aid.
pub fn write_pgm(map: &Array2<f64>, mut w: impl Write) -> Result<()> {
    let (rows, cols) = map.dim();
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Saves one depth map as a PGM file.
pub fn save_pgm(map: &Array2<f64>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_pgm(map, std::io::BufWriter::new(file))
}
