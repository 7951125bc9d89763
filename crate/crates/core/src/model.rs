//! Embedding table, noise augmentation and the LightGCN-style forward/backward pass.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dense::{dot, norm, DenseMatrix};
use crate::error::{Error, Result};
use crate::graph::{multiply_into, SparseAdjacency};

pub const DEFAULT_DIM: usize = 64;

/// Xavier-uniform table: entries from `U(-b, b)` with `b = sqrt(6 / (n + d))`.
pub fn init_embeddings(n: usize, d: usize, seed: u64) -> DenseMatrix {
    assert!(n > 0 && d > 0, "embedding table needs n, d > 0");
    let bound = xavier_bound(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    DenseMatrix::from_vec(n, d, data).expect("sized by construction")
}

pub fn xavier_bound(n: usize, d: usize) -> f64 {
    (6.0 / (n + d) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    /// Uniform magnitudes carrying the anchor's signs (same hyperoctant).
    #[default]
    SignedUniform,
    PositiveUniform,
    Gaussian,
    None,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed-uniform" => Ok(NoiseKind::SignedUniform),
            "positive-uniform" => Ok(NoiseKind::PositiveUniform),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "none" => Ok(NoiseKind::None),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::SignedUniform => "signed-uniform",
            NoiseKind::PositiveUniform => "positive-uniform",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub kind: NoiseKind,
}

impl NoiseSpec {
    pub fn new(epsilon: f64, kind: NoiseKind) -> Self {
        Self { epsilon, kind }
    }

    pub fn none() -> Self {
        Self::new(0.0, NoiseKind::None)
    }

    fn is_zero(&self) -> bool {
        self.kind == NoiseKind::None || self.epsilon == 0.0
    }
}

/// Samples a noise vector of norm `epsilon` for `anchor`.
pub fn sample_noise<R: Rng + ?Sized>(anchor: &[f64], spec: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; anchor.len()];
    sample_noise_into(anchor, spec, rng, &mut out);
    out
}

pub fn sample_noise_into<R: Rng + ?Sized>(
    anchor: &[f64],
    spec: &NoiseSpec,
    rng: &mut R,
    out: &mut [f64],
) {
    debug_assert_eq!(anchor.len(), out.len());
    if spec.is_zero() || out.is_empty() {
        out.fill(0.0);
        return;
    }
    loop {
        match spec.kind {
            NoiseKind::SignedUniform => {
                for (o, &a) in out.iter_mut().zip(anchor) {
                    let x: f64 = rng.random();
                    // sign(0) falls back to +1
                    *o = if a < 0.0 { -x } else { x };
                }
            }
            NoiseKind::PositiveUniform => out.iter_mut().for_each(|o| *o = rng.random()),
            NoiseKind::Gaussian => out.iter_mut().for_each(|o| *o = rng.sample(StandardNormal)),
            NoiseKind::None => unreachable!(),
        }
        let len = norm(out);
        if len > 0.0 {
            let s = spec.epsilon / len;
            out.iter_mut().for_each(|o| *o *= s);
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// `(E0 + X1 + ... + XL) / (1 + L)`
    IncludeInput,
    /// `(X1 + ... + XL) / L`
    SkipInput,
}

impl Aggregation {
    fn weights(self, layers: usize) -> (f64, f64) {
        match self {
            Aggregation::IncludeInput => {
                let w = 1.0 / (1 + layers) as f64;
                (w, w)
            }
            Aggregation::SkipInput => (0.0, 1.0 / layers as f64),
        }
    }
}

/// Outputs of one forward pass. `layers[l - 1]` is the (possibly perturbed) output of layer `l`.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    pub layers: Vec<DenseMatrix>,
    pub final_repr: DenseMatrix,
    pub aggregation: Aggregation,
}

impl EmbeddingState {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &DenseMatrix {
        &self.layers[l - 1]
    }
}

/// Noise source for a perturbed forward pass.
pub struct Perturbation<'a> {
    pub spec: NoiseSpec,
    pub rng: &'a mut dyn RngCore,
}

/// Runs `X_l = graphs[l-1] * X_{l-1} (+ noise)` for every layer and aggregates.
///
/// One noise vector is drawn per node per layer, anchored at that node's pre-noise
/// layer output, in ascending node order.
pub fn propagate(
    e0: &DenseMatrix,
    graphs: &[&SparseAdjacency],
    aggregation: Aggregation,
    mut perturbation: Option<Perturbation<'_>>,
) -> Result<EmbeddingState> {
    let num_layers = graphs.len();
    if num_layers == 0 {
        return Err(Error::Config("propagation needs at least one layer".into()));
    }
    let (w0, w) = aggregation.weights(num_layers);
    let mut final_repr = e0.clone();
    final_repr.scale(w0);

    let mut layers: Vec<DenseMatrix> = Vec::with_capacity(num_layers);
    let mut noise = vec![0.0; e0.cols()];
    for (l, adj) in graphs.iter().enumerate() {
        let input = if l == 0 { e0 } else { &layers[l - 1] };
        let mut out = DenseMatrix::zeros(e0.rows(), e0.cols());
        multiply_into(adj, input, &mut out)?;
        if let Some(p) = perturbation.as_mut() {
            if !p.spec.is_zero() {
                for a in 0..out.rows() {
                    sample_noise_into(out.row(a), &p.spec, &mut *p.rng, &mut noise);
                    out.row_mut(a)
                        .iter_mut()
                        .zip(&noise)
                        .for_each(|(x, n)| *x += n);
                }
            }
        }
        final_repr.add_scaled(&out, w);
        layers.push(out);
    }

    Ok(EmbeddingState {
        layers,
        final_repr,
        aggregation,
    })
}

/// Noise-free propagation with the input embedding included in the average.
pub fn propagate_plain(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    layers: usize,
) -> Result<EmbeddingState> {
    propagate(e0, &vec![adj; layers], Aggregation::IncludeInput, None)
}

/// Noise-perturbed propagation; the input embedding is skipped in the average.
pub fn propagate_perturbed(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    layers: usize,
    spec: NoiseSpec,
    rng: &mut dyn RngCore,
) -> Result<EmbeddingState> {
    propagate(
        e0,
        &vec![adj; layers],
        Aggregation::SkipInput,
        Some(Perturbation { spec, rng }),
    )
}

/// Gradient with respect to `E0` given the gradient at the aggregate and optional
/// gradients injected directly at individual layer outputs (`(layer, grad)`, 1-based).
///
/// Noise is additive, so it contributes nothing here; the adjacency is symmetric, so
/// the transpose product reuses `multiply`.
pub fn backprop(
    graphs: &[&SparseAdjacency],
    aggregation: Aggregation,
    grad_final: &DenseMatrix,
    layer_grads: &[(usize, &DenseMatrix)],
) -> Result<DenseMatrix> {
    let num_layers = graphs.len();
    let (w0, w) = aggregation.weights(num_layers);
    for &(l, g) in layer_grads {
        if l > num_layers || !g.same_shape(grad_final) {
            return Err(Error::Dimension(format!(
                "layer gradient for layer {l} does not fit a {num_layers}-layer pass"
            )));
        }
    }
    let inject = |h: &mut DenseMatrix, l: usize| {
        let weight = if l == 0 { w0 } else { w };
        if weight != 0.0 {
            h.add_scaled(grad_final, weight);
        }
        for &(k, g) in layer_grads {
            if k == l {
                h.add_scaled(g, 1.0);
            }
        }
    };

    let mut h = DenseMatrix::zeros(grad_final.rows(), grad_final.cols());
    inject(&mut h, num_layers);
    let mut scratch = DenseMatrix::zeros(h.rows(), h.cols());
    for l in (0..num_layers).rev() {
        multiply_into(graphs[l], &h, &mut scratch)?;
        std::mem::swap(&mut h, &mut scratch);
        inject(&mut h, l);
    }
    Ok(h)
}

/// Row-wise L2 normalization. Returns the normalized rows and, per row, whether it was
/// nonzero; zero rows are left at zero.
pub fn l2_normalize(rows: &DenseMatrix) -> (DenseMatrix, Vec<bool>) {
    let mut out = rows.clone();
    let mut valid = Vec::with_capacity(rows.rows());
    for r in 0..rows.rows() {
        let row = out.row_mut(r);
        let len = dot(row, row).sqrt();
        if len > 0.0 {
            row.iter_mut().for_each(|x| *x /= len);
            valid.push(true);
        } else {
            valid.push(false);
        }
    }
    (out, valid)
}

/// Writes one `token<TAB>v1<TAB>...<TAB>vd` line per row.
pub fn write_embeddings_text<W: Write>(
    mut w: W,
    embeddings: &DenseMatrix,
    tokens: &[String],
) -> Result<()> {
    if tokens.len() != embeddings.rows() {
        return Err(Error::Dimension(format!(
            "{} tokens for {} embedding rows",
            tokens.len(),
            embeddings.rows()
        )));
    }
    let io = |e| Error::io("<embedding export>", e);
    for (r, tok) in tokens.iter().enumerate() {
        write!(w, "{tok}").map_err(io)?;
        for v in embeddings.row(r) {
            write!(w, "\t{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

const BINARY_MAGIC: &[u8; 4] = b"GCLE";
const LITTLE_ENDIAN_TAG: u8 = b'L';
const BIG_ENDIAN_TAG: u8 = b'B';

/// Binary layout: `GCLE`, one endianness byte (`L`/`B`), `n` and `d` as u64, then
/// `n * d` row-major f64 values, all in the tagged byte order. Written little-endian.
pub fn write_embeddings_binary<W: Write>(mut w: W, embeddings: &DenseMatrix) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&[LITTLE_ENDIAN_TAG])?;
    w.write_all(&(embeddings.rows() as u64).to_le_bytes())?;
    w.write_all(&(embeddings.cols() as u64).to_le_bytes())?;
    for v in embeddings.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings_binary<R: Read>(mut r: R) -> Result<DenseMatrix> {
    let io = |e| Error::io("<embedding import>", e);
    let mut header = [0u8; 5];
    r.read_exact(&mut header).map_err(io)?;
    if &header[..4] != BINARY_MAGIC {
        return Err(Error::Data("not an embedding file (bad magic)".into()));
    }
    let little = match header[4] {
        LITTLE_ENDIAN_TAG => true,
        BIG_ENDIAN_TAG => false,
        t => return Err(Error::Data(format!("unknown endianness tag {t:#x}"))),
    };
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word).map_err(io)?;
        Ok(if little {
            u64::from_le_bytes(word)
        } else {
            u64::from_be_bytes(word)
        })
    };
    let n = next_u64(&mut r)? as usize;
    let d = next_u64(&mut r)? as usize;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let bits = next_u64(&mut r)?;
        data.push(f64::from_bits(bits));
    }
    DenseMatrix::from_vec(n, d, data)
}
