//! Point-cloud data model: normalization, seeded augmentation, a parametric
//! synthetic shape generator, and the PCB1 / .xyz file formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Default jitter for synthetic shapes.
pub const SYNTHETIC_JITTER_SIGMA: f64 = 0.02;
/// Jitter for the "noisy" synthetic variant.
pub const NOISY_JITTER_SIGMA: f64 = 0.08;
/// Outlier fraction for the "noisy" synthetic variant.
pub const NOISY_OUTLIER_FRACTION: f64 = 0.05;

/// A labeled set of 3D points in normalized (unitless) space.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub class_name: String,
    pub sample_id: String,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty or non-finite input.
    pub fn new(points: Vec<[f64; 3]>, class_name: &str, sample_id: &str) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud(format!("{sample_id}: no points")));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Data(format!(
                "{sample_id}: non-finite coordinate in point cloud"
            )));
        }
        Ok(Self {
            points,
            class_name: class_name.to_string(),
            sample_id: sample_id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }
}

/// Centers the cloud at its centroid and scales the farthest point to norm 1.
/// Point order is preserved; already-normalized clouds pass through unchanged
/// up to floating-point roundoff.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let c = pc.centroid();
    let mut max_norm: f64 = 0.0;
    let centered: Vec<[f64; 3]> = pc
        .points
        .iter()
        .map(|p| {
            let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            max_norm = max_norm.max((q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt());
            q
        })
        .collect();
    if max_norm < 1e-12 {
        return Err(Error::DegenerateCloud(format!(
            "{}: all points coincide",
            pc.sample_id
        )));
    }
    let inv = 1.0 / max_norm;
    Ok(PointCloud {
        points: centered.iter().map(|q| q.map(|v| v * inv)).collect(),
        class_name: pc.class_name.clone(),
        sample_id: pc.sample_id.clone(),
    })
}

// ----- augmentation -----

/// Sampling ranges for [`augment`]. Each range is inclusive on both ends;
/// zero-width ranges pin the value exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Per-axis rotation angle ranges in radians, order (x, y, z).
    pub rotation_ranges: [(f64, f64); 3],
    /// Multiplier range for camera distance at render time.
    pub distance_scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_ranges: [(0.0, std::f64::consts::TAU); 3],
            distance_scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentationConfig {
    /// A config whose every range has zero width: augmenting with it returns
    /// the input cloud and scale 1.0.
    pub fn identity() -> Self {
        Self {
            rotation_ranges: [(0.0, 0.0); 3],
            distance_scale_range: (1.0, 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        for (axis, &(lo, hi)) in ["x", "y", "z"].iter().zip(&self.rotation_ranges) {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!(
                    "empty rotation range for axis {axis}: [{lo}, {hi}]"
                )));
            }
        }
        let (lo, hi) = self.distance_scale_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= 0.0 {
            return Err(Error::Config(format!(
                "invalid distance scale range: [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// What [`augment`] did, so the renderer can apply the view-distance part.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRecord {
    /// Applied axis angles in radians, order (x, y, z).
    pub rotation: [f64; 3],
    /// Camera distance multiplier, applied by the renderer.
    pub view_distance_scale: f64,
    pub seed: u64,
}

/// Rotation about x, then y, then z, by the given angles.
pub fn rotate_xyz(p: [f64; 3], angles: [f64; 3]) -> [f64; 3] {
    let [ax, ay, az] = angles;
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let [x, y, z] = p;
    // about x
    let (y, z) = (y * cx - z * sx, y * sx + z * cx);
    // about y
    let (x, z) = (x * cy + z * sy, -x * sy + z * cy);
    // about z
    let (x, y) = (x * cz - y * sz, x * sz + y * cz);
    [x, y, z]
}

/// Randomly rotates the cloud about the coordinate axes (fixed x→y→z order)
/// and samples a camera-distance multiplier for the renderer. Deterministic
/// for a fixed (cloud, seed, config).
pub fn augment(
    pc: &PointCloud,
    seed: u64,
    config: &AugmentationConfig,
) -> Result<(PointCloud, AugmentationRecord)> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let rotation = [
        rng.uniform_in(config.rotation_ranges[0].0, config.rotation_ranges[0].1),
        rng.uniform_in(config.rotation_ranges[1].0, config.rotation_ranges[1].1),
        rng.uniform_in(config.rotation_ranges[2].0, config.rotation_ranges[2].1),
    ];
    let scale = rng.uniform_in(config.distance_scale_range.0, config.distance_scale_range.1);
    let rotated = PointCloud {
        points: pc.points.iter().map(|&p| rotate_xyz(p, rotation)).collect(),
        class_name: pc.class_name.clone(),
        sample_id: pc.sample_id.clone(),
    };
    Ok((
        rotated,
        AugmentationRecord {
            rotation,
            view_distance_scale: scale,
            seed,
        },
    ))
}

// ----- synthetic shapes -----

/// The ten unscaled shape families of the synthetic generator.
pub const BASE_SHAPES: [&str; 10] = [
    "sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "helix", "cross", "ring",
];

/// All recognized synthetic class names: the ten base shapes followed by
/// "-tall" and "-flat" scaled variants of every base shape except `plane`
/// (whose variants would be the same surface rescaled). 28 names total.
pub fn shape_catalog() -> Vec<String> {
    let mut names: Vec<String> = BASE_SHAPES.iter().map(|s| s.to_string()).collect();
    for suffix in ["-tall", "-flat"] {
        for base in BASE_SHAPES.iter().filter(|&&b| b != "plane") {
            names.push(format!("{base}{suffix}"));
        }
    }
    names
}

/// Splits a catalog name into its base shape and per-axis pre-jitter scale.
fn resolve_shape(class_name: &str) -> Result<(&str, [f64; 3])> {
    let (base, scale) = if let Some(base) = class_name.strip_suffix("-tall") {
        (base, [0.55, 0.55, 1.5])
    } else if let Some(base) = class_name.strip_suffix("-flat") {
        (base, [1.3, 1.3, 0.4])
    } else {
        (class_name, [1.0, 1.0, 1.0])
    };
    if !BASE_SHAPES.contains(&base) || (base == "plane" && base != class_name) {
        return Err(Error::UnknownShape(class_name.to_string()));
    }
    Ok((base, scale))
}

/// Uniform point on the surface of an axis-aligned cuboid with half-extents
/// (hx, hy, hz), area-weighted over the six faces.
fn cuboid_surface(rng: &mut SplitMix64, hx: f64, hy: f64, hz: f64) -> [f64; 3] {
    let ax = hy * hz; // area weight of ±x faces (up to the common factor 4)
    let ay = hx * hz;
    let az = hx * hy;
    let total = 2.0 * (ax + ay + az);
    let mut t = rng.uniform_in(0.0, total);
    let u = rng.next_f64();
    let v = rng.next_f64();
    for (area, axis) in [(ax, 0usize), (ay, 1), (az, 2)] {
        for sign in [1.0, -1.0] {
            if t < area {
                let mut p = [0.0; 3];
                p[axis] = sign * [hx, hy, hz][axis];
                let (a1, a2) = match axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                p[a1] = (2.0 * u - 1.0) * [hx, hy, hz][a1];
                p[a2] = (2.0 * v - 1.0) * [hx, hy, hz][a2];
                return p;
            }
            t -= area;
        }
    }
    // Roundoff pushed t past the last face; clamp to it.
    [(2.0 * u - 1.0) * hx, (2.0 * v - 1.0) * hy, -hz]
}

/// Uniform point inside a triangle by barycentric folding.
fn triangle_surface(rng: &mut SplitMix64, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let mut r1 = rng.next_f64();
    let mut r2 = rng.next_f64();
    if r1 + r2 > 1.0 {
        r1 = 1.0 - r1;
        r2 = 1.0 - r2;
    }
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]);
    }
    p
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
}

/// One clean point on the named base surface (no jitter, no variant scale).
fn surface_point(base: &str, rng: &mut SplitMix64) -> [f64; 3] {
    match base {
        "sphere" => {
            let z = rng.uniform_in(-1.0, 1.0);
            let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        "cube" => cuboid_surface(rng, 1.0, 1.0, 1.0),
        "cylinder" => {
            // Radius 0.6, half-height 1; lateral wall and both caps weighted
            // by area.
            let (r, h) = (0.6, 1.0);
            let lateral = std::f64::consts::TAU * r * 2.0 * h;
            let cap = std::f64::consts::PI * r * r;
            let pick = rng.uniform_in(0.0, lateral + 2.0 * cap);
            let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
            if pick < lateral {
                let z = rng.uniform_in(-h, h);
                [r * phi.cos(), r * phi.sin(), z]
            } else {
                let rho = r * rng.next_f64().sqrt();
                let z = if pick < lateral + cap { h } else { -h };
                [rho * phi.cos(), rho * phi.sin(), z]
            }
        }
        "cone" => {
            // Apex (0,0,1), base disc radius 0.8 at z = -1.
            let (r, apex_z, base_z): (f64, f64, f64) = (0.8, 1.0, -1.0);
            let height = apex_z - base_z;
            let slant = (height * height + r * r).sqrt();
            let lateral = std::f64::consts::PI * r * slant;
            let cap = std::f64::consts::PI * r * r;
            let pick = rng.uniform_in(0.0, lateral + cap);
            let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
            if pick < lateral {
                // Area element grows linearly from the apex.
                let t = rng.next_f64().sqrt();
                [
                    r * t * phi.cos(),
                    r * t * phi.sin(),
                    apex_z - t * height,
                ]
            } else {
                let rho = r * rng.next_f64().sqrt();
                [rho * phi.cos(), rho * phi.sin(), base_z]
            }
        }
        "torus" => {
            let (major, minor) = (0.7, 0.25);
            let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
            let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
            let ring = major + minor * phi.cos();
            [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()]
        }
        "plane" => [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), 0.0],
        "pyramid" => {
            // Square base half-side 0.9 at z = -0.6, apex (0,0,1).
            let (s, base_z, apex) = (0.9, -0.6, [0.0, 0.0, 1.0]);
            let corners = [
                [s, s, base_z],
                [-s, s, base_z],
                [-s, -s, base_z],
                [s, -s, base_z],
            ];
            let face_area = triangle_area(corners[0], corners[1], apex);
            let base_area = (2.0 * s) * (2.0 * s);
            let pick = rng.uniform_in(0.0, 4.0 * face_area + base_area);
            if pick < 4.0 * face_area {
                let face = (pick / face_area) as usize % 4;
                triangle_surface(rng, corners[face], corners[(face + 1) % 4], apex)
            } else {
                [
                    rng.uniform_in(-s, s),
                    rng.uniform_in(-s, s),
                    base_z,
                ]
            }
        }
        "helix" => {
            // Two turns, radius 0.7, rising z ∈ [-1, 1].
            let t = rng.uniform_in(0.0, 2.0 * std::f64::consts::TAU);
            [
                0.7 * t.cos(),
                0.7 * t.sin(),
                t / std::f64::consts::TAU - 1.0,
            ]
        }
        "cross" => {
            // Three orthogonal bars of half-section 0.2, half-length 1.
            let bar = rng.next_below(3) as usize;
            let (hx, hy, hz) = match bar {
                0 => (1.0, 0.2, 0.2),
                1 => (0.2, 1.0, 0.2),
                _ => (0.2, 0.2, 1.0),
            };
            cuboid_surface(rng, hx, hy, hz)
        }
        "ring" => {
            // Flat annulus in the z = 0 plane, radii [0.55, 1].
            let (r0, r1) = (0.55, 1.0);
            let rho = (rng.next_f64() * (r1 * r1 - r0 * r0) + r0 * r0).sqrt();
            let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
            [rho * phi.cos(), rho * phi.sin(), 0.0]
        }
        other => unreachable!("unvalidated shape {other}"),
    }
}

/// Generates a deterministic synthetic cloud of the named class with the
/// given jitter and outlier fraction. Outlier points are drawn uniformly in
/// the [-1, 1] cube instead of on the surface.
pub fn gen_synthetic_with(
    class_name: &str,
    n_points: usize,
    seed: u64,
    jitter_sigma: f64,
    outlier_fraction: f64,
) -> Result<PointCloud> {
    let (base, scale) = resolve_shape(class_name)?;
    if n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        if outlier_fraction > 0.0 && rng.next_f64() < outlier_fraction {
            points.push([
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
            ]);
            continue;
        }
        let s = surface_point(base, &mut rng);
        let mut p = [s[0] * scale[0], s[1] * scale[1], s[2] * scale[2]];
        for c in &mut p {
            *c += jitter_sigma * rng.next_gauss();
        }
        points.push(p);
    }
    PointCloud::new(points, class_name, &format!("{class_name}#{seed:016x}"))
}

/// Standard synthetic cloud: surface points with Gaussian jitter σ = 0.02.
pub fn gen_synthetic(class_name: &str, n_points: usize, seed: u64) -> Result<PointCloud> {
    gen_synthetic_with(class_name, n_points, seed, SYNTHETIC_JITTER_SIGMA, 0.0)
}

/// Harder variant: heavier jitter (σ = 0.08) plus 5% uniform outliers.
pub fn gen_synthetic_noisy(class_name: &str, n_points: usize, seed: u64) -> Result<PointCloud> {
    gen_synthetic_with(
        class_name,
        n_points,
        seed,
        NOISY_JITTER_SIGMA,
        NOISY_OUTLIER_FRACTION,
    )
}

/// Symmetric chamfer distance (mean squared nearest-neighbor distance, both
/// directions). O(|a|·|b|); intended for tests and sanity checks.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    fn one_way(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
        let sum: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    }
    one_way(&a.points, &b.points) + one_way(&b.points, &a.points)
}

// ----- file formats -----

const PCB1_MAGIC: &[u8; 4] = b"PCB1";

/// Writes the PCB1 binary format: magic "PCB1", u32 LE point count, then
/// interleaved x,y,z as f32 LE.
pub fn write_pcb1(pc: &PointCloud, mut w: impl Write) -> Result<()> {
    w.write_all(PCB1_MAGIC)?;
    w.write_all(&(pc.points.len() as u32).to_le_bytes())?;
    for p in &pc.points {
        for &c in p {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads PCB1 point data. Labels are not stored in the file; the caller
/// attaches them.
pub fn read_pcb1(mut r: impl Read) -> Result<Vec<[f64; 3]>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCB1_MAGIC {
        return Err(Error::Format(format!(
            "bad PCB1 magic: {:02x?}",
            magic
        )));
    }
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;
    let mut buf = vec![0u8; count * 12];
    r.read_exact(&mut buf)?;
    let mut points = Vec::with_capacity(count);
    for chunk in buf.chunks_exact(12) {
        let mut p = [0.0f64; 3];
        for (k, c) in chunk.chunks_exact(4).enumerate() {
            p[k] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        points.push(p);
    }
    Ok(points)
}

/// Reads ASCII ".xyz": one "x y z" triple per line, blank lines and `#`
/// comments skipped.
pub fn read_xyz(r: impl Read) -> Result<Vec<[f64; 3]>> {
    let mut text = String::new();
    let mut r = r;
    r.read_to_string(&mut text)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "xyz line {}: expected 3 coordinates, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0f64; 3];
        for k in 0..3 {
            p[k] = fields[k].parse().map_err(|_| {
                Error::Format(format!("xyz line {}: bad number {:?}", lineno + 1, fields[k]))
            })?;
        }
        points.push(p);
    }
    Ok(points)
}

/// Loads a cloud from disk, dispatching on the ".xyz" extension (anything
/// else is read as PCB1), and attaches the given labels.
pub fn load_cloud(path: &Path, class_name: &str, sample_id: &str) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let points = if path.extension().and_then(|e| e.to_str()) == Some("xyz") {
        read_xyz(reader)?
    } else {
        read_pcb1(reader)?
    };
    PointCloud::new(points, class_name, sample_id)
}

/// Saves a cloud as PCB1.
pub fn save_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_pcb1(pc, std::io::BufWriter::new(file))
}
