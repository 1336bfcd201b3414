//! Frozen feature extractors: small seeded stand-ins for pre-trained depth,
//! point, and text encoders, plus file-based ingestion of embeddings computed
//! elsewhere (EMB1 format).
//!
//! Encoder weights are generated once from a seed and never trained; all the
//! learning in this project happens in the heads module downstream.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::projection::DepthMapSet;
use crate::rng::SplitMix64;

/// Default shared feature dimension C (desk scale).
pub const DEFAULT_FEATURE_DIM: usize = 32;
/// Default raw point-feature dimension D3 (desk scale).
pub const DEFAULT_POINT_DIM: usize = 64;
/// Pooled depth-map side length; depth features come from a 16×16 pooling.
const POOL_SIDE: usize = 16;

/// A C-dimensional feature vector. Role (depth, point, fused, text) is
/// carried by context.
pub type FeatureVector = Array1<f64>;

/// Row-stacked feature vectors with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub row_keys: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>, row_keys: Vec<String>) -> Result<Self> {
        if rows.nrows() != row_keys.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding rows but {} keys",
                rows.nrows(),
                row_keys.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding entry".into()));
        }
        Ok(Self { rows, row_keys })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }
}

/// Per-class prototype vectors in the shared feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// K×C matrix, one row per class.
    pub rows: Array2<f64>,
    pub class_names: Vec<String>,
}

impl PrototypeBank {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
            class_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn index_of(&self, class_name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == class_name)
    }

    /// Appends text prototypes for new classes, in the given order. Class
    /// names must not repeat across calls.
    pub fn extend_with_text(&mut self, class_names: &[String]) -> Result<()> {
        for name in class_names {
            if self.index_of(name).is_some() {
                return Err(Error::Protocol(format!(
                    "class {name} already has a prototype"
                )));
            }
            let proto = encode_text_toy(name, self.dim())?;
            self.rows
                .push_row(proto.view())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            self.class_names.push(name.clone());
        }
        Ok(())
    }
}

// ----- toy depth encoder -----

/// Frozen linear depth encoder: average-pool each map to 16×16, flatten, and
/// multiply by a fixed seeded Gaussian matrix. Linear and bias-free, so
/// encode(2·map) = 2·encode(map) exactly.
#[derive(Debug, Clone)]
pub struct ToyDepthEncoder {
    /// 256×C projection, entries drawn N(0, 1/256) row-major.
    weights: Array2<f64>,
}

impl ToyDepthEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let sigma = 1.0 / (POOL_SIDE as f64 * POOL_SIDE as f64).sqrt();
        let weights = Array2::from_shape_fn((POOL_SIDE * POOL_SIDE, dim), |_| {
            sigma * rng.next_gauss()
        });
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// One embedding row per view, keyed "view-{i}" in camera order.
    pub fn encode(&self, maps: &DepthMapSet) -> Result<EmbeddingMatrix> {
        let mut rows = Array2::zeros((maps.maps.len(), self.dim()));
        let mut keys = Vec::with_capacity(maps.maps.len());
        for (i, map) in maps.maps.iter().enumerate() {
            let pooled = pool_map(map);
            let row = pooled.dot(&self.weights);
            rows.row_mut(i).assign(&row);
            keys.push(format!("view-{i}"));
        }
        EmbeddingMatrix::new(rows, keys)
    }
}

/// Adaptive average pooling to 16×16, flattened row-major. Bin `i` of a
/// length-S axis covers source indices floor(i·S/16) .. ceil((i+1)·S/16).
fn pool_map(map: &Array2<f64>) -> Array1<f64> {
    let (rows, cols) = map.dim();
    let mut out = Array1::zeros(POOL_SIDE * POOL_SIDE);
    for i in 0..POOL_SIDE {
        let r0 = i * rows / POOL_SIDE;
        let r1 = ((i + 1) * rows + POOL_SIDE - 1) / POOL_SIDE;
        for j in 0..POOL_SIDE {
            let c0 = j * cols / POOL_SIDE;
            let c1 = ((j + 1) * cols + POOL_SIDE - 1) / POOL_SIDE;
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += map[(r, c)];
                }
            }
            out[i * POOL_SIDE + j] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Convenience one-shot form of [`ToyDepthEncoder`].
pub fn encode_depth_toy(maps: &DepthMapSet, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    ToyDepthEncoder::new(dim, seed).encode(maps)
}

// ----- toy point encoder -----

/// Frozen point-set encoder: a seeded per-point lift ReLU(W·p + b) followed
/// by element-wise max over points, so output is invariant to point order.
#[derive(Debug, Clone)]
pub struct ToyPointEncoder {
    /// 3×D3 lift, entries N(0, 1/3).
    w: Array2<f64>,
    b: Array1<f64>,
}

impl ToyPointEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let sigma = 1.0 / 3.0f64.sqrt();
        let w = Array2::from_shape_fn((3, dim), |_| sigma * rng.next_gauss());
        let b = Array1::from_shape_fn(dim, |_| sigma * rng.next_gauss());
        Self { w, b }
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn encode(&self, pc: &PointCloud) -> FeatureVector {
        let dim = self.dim();
        let mut out = Array1::from_elem(dim, f64::NEG_INFINITY);
        for p in &pc.points {
            for j in 0..dim {
                let z = self.w[(0, j)] * p[0] + self.w[(1, j)] * p[1] + self.w[(2, j)] * p[2]
                    + self.b[j];
                let h = z.max(0.0);
                if h > out[j] {
                    out[j] = h;
                }
            }
        }
        out
    }
}

/// Convenience one-shot form of [`ToyPointEncoder`].
pub fn encode_points_toy(pc: &PointCloud, dim: usize, seed: u64) -> FeatureVector {
    ToyPointEncoder::new(dim, seed).encode(pc)
}

// ----- toy text encoder -----

/// Prompt template used for every class prototype.
pub fn class_prompt(class_name: &str) -> String {
    format!("an image or projection or sketch of a {class_name}")
}

/// Hash-seeded unit vector for a class name: the prompt is hashed (SHA-256),
/// the first 8 bytes (little-endian) seed a generator, and C Gaussians are
/// drawn and normalized. Platform-independent by construction.
pub fn encode_text_toy(class_name: &str, dim: usize) -> Result<FeatureVector> {
    if class_name.is_empty() {
        return Err(Error::Config("empty class name".into()));
    }
    let digest = Sha256::digest(class_prompt(class_name).as_bytes());
    let mut seed_bytes = [0u8; 8];
    seed_bytes.copy_from_slice(&digest[..8]);
    let mut rng = SplitMix64::new(u64::from_le_bytes(seed_bytes));
    let mut v = Array1::from_shape_fn(dim, |_| rng.next_gauss());
    let norm = v.dot(&v).sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateFeature(format!(
            "text embedding for {class_name} has zero norm"
        )));
    }
    v /= norm;
    Ok(v)
}

// ----- EMB1 embedding files -----

const EMB1_MAGIC: &[u8; 4] = b"EMB1";

/// Manifest that ties an EMB1 file to its key sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    /// Path of the EMB1 binary, relative to the manifest file.
    pub embeddings: String,
    /// Path of the JSON key sidecar, relative to the manifest file.
    pub sidecar: String,
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    keys: Vec<String>,
}

/// Writes the EMB1 binary: magic "EMB1", u32 LE dim, u32 LE row count, then
/// rows as f32 LE row-major.
pub fn write_emb1(matrix: &EmbeddingMatrix, mut w: impl Write) -> Result<()> {
    w.write_all(EMB1_MAGIC)?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    w.write_all(&(matrix.n_rows() as u32).to_le_bytes())?;
    for v in matrix.rows.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads EMB1 row data (keys live in the sidecar).
pub fn read_emb1(mut r: impl Read) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMB1_MAGIC {
        return Err(Error::Format(format!("bad EMB1 magic: {magic:02x?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let dim = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let n_rows = u32::from_le_bytes(word) as usize;
    if dim == 0 {
        return Err(Error::Format("EMB1 dim is zero".into()));
    }
    let mut buf = vec![0u8; dim * n_rows * 4];
    r.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((n_rows, dim), values)
        .map_err(|e| Error::Format(format!("EMB1 shape: {e}")))
}

/// Saves a matrix as EMB1 + sidecar + manifest. Paths inside the manifest are
/// the bare file names, so the trio is relocatable as a directory.
pub fn save_embeddings(
    matrix: &EmbeddingMatrix,
    manifest_path: &Path,
) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad manifest path: {manifest_path:?}")))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let emb_name = format!("{stem}.emb1");
    let sidecar_name = format!("{stem}.keys.json");

    let file = std::fs::File::create(dir.join(&emb_name))?;
    write_emb1(matrix, std::io::BufWriter::new(file))?;
    let sidecar = Sidecar {
        keys: matrix.row_keys.clone(),
    };
    std::fs::write(
        dir.join(&sidecar_name),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    let manifest = EmbeddingManifest {
        embeddings: emb_name,
        sidecar: sidecar_name,
        dim: matrix.dim(),
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a matrix via its manifest, validating magic, dimension, and
/// row/key-count agreement.
pub fn load_embeddings(manifest_path: &Path) -> Result<EmbeddingMatrix> {
    let manifest: EmbeddingManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::fs::File::open(dir.join(&manifest.embeddings))?;
    let rows = read_emb1(std::io::BufReader::new(file))?;
    if rows.ncols() != manifest.dim {
        return Err(Error::Format(format!(
            "manifest dim {} but EMB1 file has dim {}",
            manifest.dim,
            rows.ncols()
        )));
    }
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join(&manifest.sidecar))?)?;
    if sidecar.keys.len() != rows.nrows() {
        return Err(Error::Format(format!(
            "sidecar has {} keys but EMB1 file has {} rows",
            sidecar.keys.len(),
            rows.nrows()
        )));
    }
    EmbeddingMatrix::new(rows, sidecar.keys)
}
