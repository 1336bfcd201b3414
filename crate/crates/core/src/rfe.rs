//! Redundant-feature elimination: a principal basis fitted once on base-task
//! depth features, projection/residual splits against that basis, and the
//! renormalized cosine similarity (RCS) classifier it enables, alongside the
//! plain cosine classifier.
//!
//! RCS scores a feature against a prototype using only their coordinates
//! inside the retained subspace, but divides by the *original* vector norms.
//! That makes cosine similarity decompose exactly into the RCS term plus a
//! residual term: cos(f, p) = rcs(f, p) + R(f)·R(p)/(‖f‖·‖p‖), where R is
//! the out-of-subspace remainder. Dropping the residual term (rather than
//! renormalizing inside the subspace) is the whole point: low-variance
//! directions stop contributing without stretching what remains.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use std::io::{Read, Write};
use std::path::Path;

use crate::encoders::{EmbeddingMatrix, FeatureVector};
use crate::error::{Error, Result};

/// Default retained-energy fraction.
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.95;

/// Per-class scores for the currently visible classes.
pub type LogitVector = Array1<f64>;

/// Top-M principal directions of a feature matrix, with the full spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalBasis {
    /// M×C, orthonormal rows, by descending singular value.
    pub v: Array2<f64>,
    /// All C singular values, descending.
    pub singular_values: Vec<f64>,
    /// The fraction requested at fit time.
    pub energy_fraction: f64,
}

impl PrincipalBasis {
    /// Number of retained components M.
    pub fn m(&self) -> usize {
        self.v.nrows()
    }

    /// Ambient feature dimension C.
    pub fn c(&self) -> usize {
        self.v.ncols()
    }

    /// Checks the structural invariants (orthonormal rows, sane spectrum).
    pub fn validate(&self) -> Result<()> {
        if self.m() > self.c() {
            return Err(Error::Data(format!(
                "basis has {} rows in dimension {}",
                self.m(),
                self.c()
            )));
        }
        if self.singular_values.len() != self.c() {
            return Err(Error::Data(format!(
                "expected {} singular values, found {}",
                self.c(),
                self.singular_values.len()
            )));
        }
        for w in self.singular_values.windows(2) {
            if w[1] > w[0] + 1e-9 {
                return Err(Error::Data("singular values not descending".into()));
            }
        }
        if self.singular_values.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Data("negative or NaN singular value".into()));
        }
        for i in 0..self.m() {
            for j in i..self.m() {
                let dot = self.v.row(i).dot(&self.v.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() >= 1e-8 {
                    return Err(Error::Data(format!(
                        "basis rows {i},{j} not orthonormal: dot {dot}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fits the principal basis of the raw (uncentered) feature matrix and keeps
/// the smallest leading set of components whose squared singular values reach
/// the requested energy fraction. Row signs are fixed so the first nonzero
/// entry of every component is nonnegative, making the basis reproducible.
pub fn fit_basis(features: &EmbeddingMatrix, energy_fraction: f64) -> Result<PrincipalBasis> {
    if features.n_rows() == 0 {
        return Err(Error::Data("cannot fit basis on empty matrix".into()));
    }
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "energy_fraction must be in (0, 1], got {energy_fraction}"
        )));
    }
    if features.rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite entry in feature matrix".into()));
    }
    let c = features.dim();

    // Eigendecompose the Gram matrix XᵀX: eigenvalues are squared singular
    // values of X, eigenvectors are the right singular vectors.
    let gram = features.rows.t().dot(&features.rows);
    let mut sym = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            // Symmetrize to wash out summation-order roundoff.
            sym[(i, j)] = 0.5 * (gram[(i, j)] + gram[(j, i)]);
        }
    }
    let eigen = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let singular_values: Vec<f64> = order
        .iter()
        .map(|&i| eigen.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::Data("feature matrix has zero energy".into()));
    }

    let mut m = c;
    let mut cum = 0.0;
    for (k, s) in singular_values.iter().enumerate() {
        cum += s * s;
        // Tiny relative slack so energy_fraction = 1.0 is reachable.
        if cum >= energy_fraction * total - 1e-12 * total {
            m = k + 1;
            break;
        }
    }

    let mut v = Array2::zeros((m, c));
    for (row, &col_idx) in order.iter().take(m).enumerate() {
        let col = eigen.eigenvectors.column(col_idx);
        let sign = col
            .iter()
            .find(|e| e.abs() > 1e-12)
            .map(|e| if *e < 0.0 { -1.0 } else { 1.0 })
            .unwrap_or(1.0);
        for j in 0..c {
            v[(row, j)] = sign * col[j];
        }
    }

    let basis = PrincipalBasis {
        v,
        singular_values,
        energy_fraction,
    };
    basis.validate()?;
    Ok(basis)
}

/// Coordinates of `v` inside the retained subspace (length M).
pub fn project(v: &FeatureVector, basis: &PrincipalBasis) -> Result<FeatureVector> {
    if v.len() != basis.c() {
        return Err(Error::ShapeMismatch(format!(
            "project: vector dim {} vs basis dim {}",
            v.len(),
            basis.c()
        )));
    }
    Ok(basis.v.dot(v))
}

/// The part of `v` outside the retained subspace (length C).
pub fn residual(v: &FeatureVector, basis: &PrincipalBasis) -> Result<FeatureVector> {
    let coords = project(v, basis)?;
    Ok(v - &basis.v.t().dot(&coords))
}

fn checked_norm(v: &FeatureVector, what: &str) -> Result<f64> {
    let n = v.dot(v).sqrt();
    if n < 1e-12 {
        return Err(Error::DegenerateFeature(format!("{what} has zero norm")));
    }
    Ok(n)
}

/// Plain cosine similarity.
pub fn cosine_logit(f: &FeatureVector, proto: &FeatureVector) -> Result<f64> {
    if f.len() != proto.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine: dims {} vs {}",
            f.len(),
            proto.len()
        )));
    }
    let nf = checked_norm(f, "feature")?;
    let np = checked_norm(proto, "prototype")?;
    Ok(f.dot(proto) / (nf * np))
}

/// Renormalized cosine similarity: the projected dot product divided by the
/// original (unprojected) norms.
pub fn rcs_logit(f: &FeatureVector, proto: &FeatureVector, basis: &PrincipalBasis) -> Result<f64> {
    let nf = checked_norm(f, "feature")?;
    let np = checked_norm(proto, "prototype")?;
    let pf = project(f, basis)?;
    let pp = project(proto, basis)?;
    Ok(pf.dot(&pp) / (nf * np))
}

/// Gradient of [`cosine_logit`] with respect to `f`:
/// proto/(‖f‖‖proto‖) − cos·f/‖f‖².
pub fn cosine_logit_grad(f: &FeatureVector, proto: &FeatureVector) -> Result<FeatureVector> {
    let nf = checked_norm(f, "feature")?;
    let np = checked_norm(proto, "prototype")?;
    let cos = f.dot(proto) / (nf * np);
    Ok(proto / (nf * np) - &(f * (cos / (nf * nf))))
}

/// Gradient of [`rcs_logit`] with respect to `f`:
/// Vᵀ(V·proto)/(‖f‖‖proto‖) − l̃·f/‖f‖².
pub fn rcs_logit_grad(
    f: &FeatureVector,
    proto: &FeatureVector,
    basis: &PrincipalBasis,
) -> Result<FeatureVector> {
    let nf = checked_norm(f, "feature")?;
    let np = checked_norm(proto, "prototype")?;
    let pf = project(f, basis)?;
    let pp = project(proto, basis)?;
    let logit = pf.dot(&pp) / (nf * np);
    Ok(basis.v.t().dot(&pp) / (nf * np) - &(f * (logit / (nf * nf))))
}

/// Numerically stable softmax over per-class logits.
pub fn predict_probs(logits: &LogitVector) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let sum = exp.sum();
    exp / sum
}

// ----- basis file format -----

const PCV1_MAGIC: &[u8; 4] = b"PCV1";

/// Writes the PCV1 basis file: magic, u32 LE C, u32 LE M, f64 LE
/// energy_fraction, M×C rows as f64 LE, then the C singular values.
pub fn write_pcv1(basis: &PrincipalBasis, mut w: impl Write) -> Result<()> {
    w.write_all(PCV1_MAGIC)?;
    w.write_all(&(basis.c() as u32).to_le_bytes())?;
    w.write_all(&(basis.m() as u32).to_le_bytes())?;
    w.write_all(&basis.energy_fraction.to_le_bytes())?;
    for v in basis.v.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &basis.singular_values {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

/// Reads and validates a PCV1 basis file.
pub fn read_pcv1(mut r: impl Read) -> Result<PrincipalBasis> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCV1_MAGIC {
        return Err(Error::Format(format!("bad PCV1 magic: {magic:02x?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let c = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let m = u32::from_le_bytes(word) as usize;
    let mut dword = [0u8; 8];
    r.read_exact(&mut dword)?;
    let energy_fraction = f64::from_le_bytes(dword);
    if c == 0 || m > c || !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::Format(format!(
            "bad PCV1 header: C={c} M={m} energy={energy_fraction}"
        )));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("8 bytes")))
            .collect())
    };
    let v = Array2::from_shape_vec((m, c), read_f64s(m * c)?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let singular_values = read_f64s(c)?;
    let basis = PrincipalBasis {
        v,
        singular_values,
        energy_fraction,
    };
    basis.validate()?;
    Ok(basis)
}

/// Saves a basis file.
pub fn save_basis(basis: &PrincipalBasis, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_pcv1(basis, std::io::BufWriter::new(file))
}

/// Loads a basis file.
pub fn load_basis(path: &Path) -> Result<PrincipalBasis> {
    let file = std::fs::File::open(path)?;
    read_pcv1(std::io::BufReader::new(file))
}
