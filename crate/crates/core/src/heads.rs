//! Trainable heads: the depth-feature Merger, the 3D Adapter, and the
//! max/avg fusion that combines them, with hand-derived backward passes.
//!
//! Everything upstream (renderer, encoders) is frozen, so these two small
//! MLPs plus the fusion rule are the entire trainable surface of the model.

use ndarray::{Array1, Array2};
use std::io::{Read, Write};
use std::path::Path;

use crate::encoders::{EmbeddingMatrix, FeatureVector};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Tensor shapes for the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadsDims {
    /// Number of views N feeding the merger.
    pub n_views: usize,
    /// Shared feature dimension C.
    pub c: usize,
    /// Merger hidden width H.
    pub h: usize,
    /// Raw point-feature dimension D3.
    pub d3: usize,
    /// Adapter hidden width H3.
    pub h3: usize,
}

/// Merger: concat(N depth rows) → hidden → C.
#[derive(Debug, Clone, PartialEq)]
pub struct MergerParams {
    /// (N·C)×H first layer.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// H×C second layer.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

/// Adapter: D3 → hidden → C.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// D3×H3 first layer.
    pub w1p: Array2<f64>,
    pub b1p: Array1<f64>,
    /// H3×C second layer.
    pub w2p: Array2<f64>,
    pub b2p: Array1<f64>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadsParams {
    pub merger: MergerParams,
    pub adapter: AdapterParams,
}

impl HeadsParams {
    /// Seeded init: Gaussian entries with σ = 1/√fan_in, zero biases. Weight
    /// matrices are drawn row-major in fixed order (merger first layer,
    /// merger second, adapter first, adapter second) so a seed pins every
    /// parameter bit.
    pub fn init(dims: &HeadsDims, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut gauss_matrix = |rows: usize, cols: usize, fan_in: usize| {
            let sigma = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| sigma * rng.next_gauss())
        };
        let w2 = gauss_matrix(dims.n_views * dims.c, dims.h, dims.n_views * dims.c);
        let w1 = gauss_matrix(dims.h, dims.c, dims.h);
        let w1p = gauss_matrix(dims.d3, dims.h3, dims.d3);
        let w2p = gauss_matrix(dims.h3, dims.c, dims.h3);
        Self {
            merger: MergerParams {
                w2,
                b2: Array1::zeros(dims.h),
                w1,
                b1: Array1::zeros(dims.c),
            },
            adapter: AdapterParams {
                w1p,
                b1p: Array1::zeros(dims.h3),
                w2p,
                b2p: Array1::zeros(dims.c),
            },
        }
    }

    /// Zero-valued parameters with the same shapes (gradient accumulators).
    pub fn zeros_like(&self) -> Self {
        Self {
            merger: MergerParams {
                w2: Array2::zeros(self.merger.w2.dim()),
                b2: Array1::zeros(self.merger.b2.len()),
                w1: Array2::zeros(self.merger.w1.dim()),
                b1: Array1::zeros(self.merger.b1.len()),
            },
            adapter: AdapterParams {
                w1p: Array2::zeros(self.adapter.w1p.dim()),
                b1p: Array1::zeros(self.adapter.b1p.len()),
                w2p: Array2::zeros(self.adapter.w2p.dim()),
                b2p: Array1::zeros(self.adapter.b2p.len()),
            },
        }
    }

    pub fn dims(&self) -> HeadsDims {
        let (nc, h) = self.merger.w2.dim();
        let c = self.merger.w1.ncols();
        let (d3, h3) = self.adapter.w1p.dim();
        HeadsDims {
            n_views: if c == 0 { 0 } else { nc / c },
            c,
            h,
            d3,
            h3,
        }
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.merger.w2.len()
            + self.merger.b2.len()
            + self.merger.w1.len()
            + self.merger.b1.len()
            + self.adapter.w1p.len()
            + self.adapter.b1p.len()
            + self.adapter.w2p.len()
            + self.adapter.b2p.len()
    }

    /// Mutable flat views over every tensor, in the fixed optimizer order:
    /// merger w2, b2, w1, b1, then adapter w1p, b1p, w2p, b2p.
    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.merger.w2.as_slice_mut().expect("contiguous"),
            self.merger.b2.as_slice_mut().expect("contiguous"),
            self.merger.w1.as_slice_mut().expect("contiguous"),
            self.merger.b1.as_slice_mut().expect("contiguous"),
            self.adapter.w1p.as_slice_mut().expect("contiguous"),
            self.adapter.b1p.as_slice_mut().expect("contiguous"),
            self.adapter.w2p.as_slice_mut().expect("contiguous"),
            self.adapter.b2p.as_slice_mut().expect("contiguous"),
        ]
    }

    /// Flat views in the same fixed order as [`Self::tensor_slices_mut`].
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        vec![
            self.merger.w2.as_slice().expect("contiguous"),
            self.merger.b2.as_slice().expect("contiguous"),
            self.merger.w1.as_slice().expect("contiguous"),
            self.merger.b1.as_slice().expect("contiguous"),
            self.adapter.w1p.as_slice().expect("contiguous"),
            self.adapter.b1p.as_slice().expect("contiguous"),
            self.adapter.w2p.as_slice().expect("contiguous"),
            self.adapter.b2p.as_slice().expect("contiguous"),
        ]
    }

    /// Order-insensitive content fingerprint used to detect stale forward
    /// caches (FNV-1a over every parameter's bit pattern).
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
        for slice in self.tensor_slices() {
            for &v in slice {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        hash
    }
}

fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Merger forward: concatenate the N view rows, one hidden ReLU layer, then
/// a linear layer back to C.
pub fn merger_forward(f2d: &EmbeddingMatrix, p: &MergerParams) -> Result<FeatureVector> {
    let (state, out) = merger_forward_cached(f2d, p)?;
    let _ = state;
    Ok(out)
}

fn merger_forward_cached(
    f2d: &EmbeddingMatrix,
    p: &MergerParams,
) -> Result<(MergerTrace, FeatureVector)> {
    let nc = p.w2.nrows();
    let c = p.w1.ncols();
    if c == 0 || nc % c != 0 || f2d.n_rows() * f2d.dim() != nc {
        return Err(Error::ShapeMismatch(format!(
            "merger expects {} view rows of dim {}, got {}×{}",
            if c == 0 { 0 } else { nc / c },
            c,
            f2d.n_rows(),
            f2d.dim()
        )));
    }
    let x = Array1::from_iter(f2d.rows.iter().cloned());
    let z2 = x.dot(&p.w2) + &p.b2;
    let a2 = relu(&z2);
    let fd = a2.dot(&p.w1) + &p.b1;
    Ok((MergerTrace { x, z2, a2 }, fd))
}

/// Adapter forward: one hidden ReLU layer, then linear to C.
pub fn adapter_forward(f3d: &FeatureVector, p: &AdapterParams) -> Result<FeatureVector> {
    let (state, out) = adapter_forward_cached(f3d, p)?;
    let _ = state;
    Ok(out)
}

fn adapter_forward_cached(
    f3d: &FeatureVector,
    p: &AdapterParams,
) -> Result<(AdapterTrace, FeatureVector)> {
    if f3d.len() != p.w1p.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "adapter expects input dim {}, got {}",
            p.w1p.nrows(),
            f3d.len()
        )));
    }
    let z1p = f3d.dot(&p.w1p) + &p.b1p;
    let a1p = relu(&z1p);
    let fp = a1p.dot(&p.w2p) + &p.b2p;
    Ok((
        AdapterTrace {
            f3d: f3d.clone(),
            z1p,
            a1p,
        },
        fp,
    ))
}

/// Element-wise fusion of the depth and point features: for each coordinate,
/// half the max plus half the average, i.e. 0.75·max + 0.25·min.
pub fn fuse(fd: &FeatureVector, fp: &FeatureVector) -> Result<FeatureVector> {
    if fd.len() != fp.len() {
        return Err(Error::ShapeMismatch(format!(
            "fuse dims {} vs {}",
            fd.len(),
            fp.len()
        )));
    }
    Ok(Array1::from_shape_fn(fd.len(), |i| {
        0.5 * (fd[i].max(fp[i]) + 0.5 * (fd[i] + fp[i]))
    }))
}

#[derive(Debug, Clone)]
struct MergerTrace {
    x: Array1<f64>,
    z2: Array1<f64>,
    a2: Array1<f64>,
}

#[derive(Debug, Clone)]
struct AdapterTrace {
    f3d: Array1<f64>,
    z1p: Array1<f64>,
    a1p: Array1<f64>,
}

/// Activations cached by [`heads_forward`] for the backward pass. Valid only
/// for the exact parameters used in the forward call.
#[derive(Debug, Clone)]
pub struct HeadsForwardState {
    merger: MergerTrace,
    adapter: Option<AdapterTrace>,
    fd: FeatureVector,
    fp: Option<FeatureVector>,
    params_fingerprint: u64,
}

impl HeadsForwardState {
    pub fn fd(&self) -> &FeatureVector {
        &self.fd
    }

    pub fn fp(&self) -> Option<&FeatureVector> {
        self.fp.as_ref()
    }
}

/// Full forward pass. With a point feature the result is the fused global
/// feature; without one (adapter disabled) the merger output stands alone.
pub fn heads_forward(
    f2d: &EmbeddingMatrix,
    f3d: Option<&FeatureVector>,
    params: &HeadsParams,
) -> Result<(FeatureVector, HeadsForwardState)> {
    let (merger_trace, fd) = merger_forward_cached(f2d, &params.merger)?;
    let (adapter, fp, fg) = match f3d {
        Some(f3d) => {
            let (trace, fp) = adapter_forward_cached(f3d, &params.adapter)?;
            let fg = fuse(&fd, &fp)?;
            (Some(trace), Some(fp), fg)
        }
        None => (None, None, fd.clone()),
    };
    Ok((
        fg,
        HeadsForwardState {
            merger: merger_trace,
            adapter,
            fd,
            fp,
            params_fingerprint: params.fingerprint(),
        },
    ))
}

/// Gradients for every head parameter plus the fusion inputs.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub merger: MergerParams,
    pub adapter: AdapterParams,
    pub d_fd: FeatureVector,
    pub d_fp: FeatureVector,
}

impl GradientBundle {
    /// Flat views in the optimizer's fixed tensor order.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        vec![
            self.merger.w2.as_slice().expect("contiguous"),
            self.merger.b2.as_slice().expect("contiguous"),
            self.merger.w1.as_slice().expect("contiguous"),
            self.merger.b1.as_slice().expect("contiguous"),
            self.adapter.w1p.as_slice().expect("contiguous"),
            self.adapter.b1p.as_slice().expect("contiguous"),
            self.adapter.w2p.as_slice().expect("contiguous"),
            self.adapter.b2p.as_slice().expect("contiguous"),
        ]
    }

    /// Adds another bundle of identical shapes (minibatch accumulation).
    pub fn accumulate(&mut self, other: &GradientBundle, weight: f64) {
        self.merger.w2.scaled_add(weight, &other.merger.w2);
        self.merger.b2.scaled_add(weight, &other.merger.b2);
        self.merger.w1.scaled_add(weight, &other.merger.w1);
        self.merger.b1.scaled_add(weight, &other.merger.b1);
        self.adapter.w1p.scaled_add(weight, &other.adapter.w1p);
        self.adapter.b1p.scaled_add(weight, &other.adapter.b1p);
        self.adapter.w2p.scaled_add(weight, &other.adapter.w2p);
        self.adapter.b2p.scaled_add(weight, &other.adapter.b2p);
        self.d_fd.scaled_add(weight, &other.d_fd);
        self.d_fp.scaled_add(weight, &other.d_fp);
    }

    /// Multiplies every gradient in place (e.g. by 1/batch for averaging).
    pub fn scale(&mut self, factor: f64) {
        self.merger.w2 *= factor;
        self.merger.b2 *= factor;
        self.merger.w1 *= factor;
        self.merger.b1 *= factor;
        self.adapter.w1p *= factor;
        self.adapter.b1p *= factor;
        self.adapter.w2p *= factor;
        self.adapter.b2p *= factor;
        self.d_fd *= factor;
        self.d_fp *= factor;
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Routes a gradient on the fused feature back to the fusion inputs.
///
/// Where fd ≥ fp the max branch routes to fd (0.75 weight, fp gets 0.25),
/// and symmetrically otherwise; the tie lands on fd. When the forward ran
/// depth-only, the whole gradient lands on fd.
pub fn fuse_backward(
    state: &HeadsForwardState,
    upstream_grad_on_fg: &FeatureVector,
) -> Result<(FeatureVector, FeatureVector)> {
    let c = state.fd.len();
    if upstream_grad_on_fg.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient dim {} vs feature dim {c}",
            upstream_grad_on_fg.len()
        )));
    }
    Ok(match &state.fp {
        Some(fp) => {
            let mut d_fd = Array1::zeros(c);
            let mut d_fp = Array1::zeros(c);
            for i in 0..c {
                let (max_w, min_w) = (0.75, 0.25);
                if state.fd[i] >= fp[i] {
                    d_fd[i] = max_w * upstream_grad_on_fg[i];
                    d_fp[i] = min_w * upstream_grad_on_fg[i];
                } else {
                    d_fd[i] = min_w * upstream_grad_on_fg[i];
                    d_fp[i] = max_w * upstream_grad_on_fg[i];
                }
            }
            (d_fd, d_fp)
        }
        None => (upstream_grad_on_fg.clone(), Array1::zeros(c)),
    })
}

/// Backward pass through fusion, adapter, and merger for one sample, given a
/// gradient on the fused global feature.
pub fn heads_backward(
    state: &HeadsForwardState,
    params: &HeadsParams,
    upstream_grad_on_fg: &FeatureVector,
) -> Result<GradientBundle> {
    let (d_fd, d_fp) = fuse_backward(state, upstream_grad_on_fg)?;
    heads_backward_split(state, params, d_fd, d_fp)
}

/// Backward pass when the caller has already distributed gradients onto the
/// two fusion inputs — e.g. a loss term read the depth feature directly
/// while another went through the fused feature.
///
/// ReLU masks reuse the cached pre-activations, so they match the forward
/// pass exactly.
pub fn heads_backward_split(
    state: &HeadsForwardState,
    params: &HeadsParams,
    d_fd: FeatureVector,
    d_fp: FeatureVector,
) -> Result<GradientBundle> {
    if params.fingerprint() != state.params_fingerprint {
        return Err(Error::StaleState(
            "heads parameters changed since the cached forward pass".into(),
        ));
    }
    let c = state.fd.len();
    if d_fd.len() != c || d_fp.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "input gradient dims {}/{} vs feature dim {c}",
            d_fd.len(),
            d_fp.len()
        )));
    }

    // Merger backward.
    let m = &state.merger;
    let d_b1 = d_fd.clone();
    let d_w1 = outer(&m.a2, &d_fd);
    let d_a2 = params.merger.w1.dot(&d_fd);
    let mask2 = m.z2.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
    let d_z2 = &d_a2 * &mask2;
    let d_b2 = d_z2.clone();
    let d_w2 = outer(&m.x, &d_z2);

    // Adapter backward (all-zero when the forward ran depth-only).
    let (d_w1p, d_b1p, d_w2p, d_b2p) = match &state.adapter {
        Some(a) => {
            let d_b2p = d_fp.clone();
            let d_w2p = outer(&a.a1p, &d_fp);
            let d_a1p = params.adapter.w2p.dot(&d_fp);
            let mask1 = a.z1p.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            let d_z1p = &d_a1p * &mask1;
            let d_b1p = d_z1p.clone();
            let d_w1p = outer(&a.f3d, &d_z1p);
            (d_w1p, d_b1p, d_w2p, d_b2p)
        }
        None => (
            Array2::zeros(params.adapter.w1p.dim()),
            Array1::zeros(params.adapter.b1p.len()),
            Array2::zeros(params.adapter.w2p.dim()),
            Array1::zeros(params.adapter.b2p.len()),
        ),
    };

    Ok(GradientBundle {
        merger: MergerParams {
            w2: d_w2,
            b2: d_b2,
            w1: d_w1,
            b1: d_b1,
        },
        adapter: AdapterParams {
            w1p: d_w1p,
            b1p: d_b1p,
            w2p: d_w2p,
            b2p: d_b2p,
        },
        d_fd,
        d_fp,
    })
}

// ----- checkpoint format -----

const HDS1_MAGIC: &[u8; 4] = b"HDS1";

fn write_array(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite parameter in checkpoint".into()));
    }
    Ok(values)
}

/// Writes the HDS1 checkpoint: magic, the five dims as u32 LE, then every
/// tensor as f64 LE in declared field order.
pub fn write_hds1(params: &HeadsParams, mut w: impl Write) -> Result<()> {
    let dims = params.dims();
    w.write_all(HDS1_MAGIC)?;
    for d in [dims.n_views, dims.c, dims.h, dims.d3, dims.h3] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for slice in params.tensor_slices() {
        write_array(&mut w, slice)?;
    }
    Ok(())
}

/// Reads an HDS1 checkpoint.
pub fn read_hds1(mut r: impl Read) -> Result<HeadsParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != HDS1_MAGIC {
        return Err(Error::Format(format!("bad HDS1 magic: {magic:02x?}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let [n_views, c, h, d3, h3] = dims;
    if n_views == 0 || c == 0 || h == 0 || d3 == 0 || h3 == 0 {
        return Err(Error::Format(format!("bad HDS1 dims: {dims:?}")));
    }
    let shape2 = |r: &mut dyn Read, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut rr = r;
        Array2::from_shape_vec((rows, cols), read_array(&mut rr, rows * cols)?)
            .map_err(|e| Error::Format(e.to_string()))
    };
    let w2 = shape2(&mut r, n_views * c, h)?;
    let b2 = Array1::from_vec(read_array(&mut r, h)?);
    let w1 = shape2(&mut r, h, c)?;
    let b1 = Array1::from_vec(read_array(&mut r, c)?);
    let w1p = shape2(&mut r, d3, h3)?;
    let b1p = Array1::from_vec(read_array(&mut r, h3)?);
    let w2p = shape2(&mut r, h3, c)?;
    let b2p = Array1::from_vec(read_array(&mut r, c)?);
    Ok(HeadsParams {
        merger: MergerParams { w2, b2, w1, b1 },
        adapter: AdapterParams { w1p, b1p, w2p, b2p },
    })
}

/// Saves a checkpoint file.
pub fn save_heads(params: &HeadsParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_hds1(params, std::io::BufWriter::new(file))
}

/// Loads a checkpoint file.
pub fn load_heads(path: &Path) -> Result<HeadsParams> {
    let file = std::fs::File::open(path)?;
    read_hds1(std::io::BufReader::new(file))
}
