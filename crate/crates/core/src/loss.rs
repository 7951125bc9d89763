//! Loss values and analytic gradients: BPR, InfoNCE, the augmentation-free closed form,
//! L2 regularization, and the joint objectives of every supported method.
//!
//! All gradients are with respect to pre-normalization rows; the joint objectives chain
//! them back through propagation to the embedding table `E0`.

use log::warn;
use rand::RngCore;
use rayon::prelude::*;

use crate::dense::{axpy, dot, gemm, norm, DenseMatrix, MatRef};
use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::model::{backprop, propagate, Aggregation, NoiseSpec, Perturbation};

/// Rows with a smaller norm are left out of contrast.
pub const MIN_CONTRAST_NORM: f64 = 1e-12;

/// A mini-batch of `(user, positive item, negative item)` triples plus the unique node
/// sets the contrastive terms run over.
#[derive(Debug, Clone)]
pub struct Batch {
    pub triples: Vec<(u32, u32, u32)>,
    num_users: usize,
    user_nodes: Vec<usize>,
    item_nodes: Vec<usize>,
}

impl Batch {
    pub fn new(triples: Vec<(u32, u32, u32)>, num_users: usize) -> Self {
        let mut user_nodes: Vec<usize> = triples.iter().map(|t| t.0 as usize).collect();
        user_nodes.sort_unstable();
        user_nodes.dedup();
        let mut item_nodes: Vec<usize> = triples
            .iter()
            .flat_map(|&(_, i, j)| [num_users + i as usize, num_users + j as usize])
            .collect();
        item_nodes.sort_unstable();
        item_nodes.dedup();
        Self {
            triples,
            num_users,
            user_nodes,
            item_nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// Unique user node ids, ascending.
    pub fn user_nodes(&self) -> &[usize] {
        &self.user_nodes
    }

    /// Unique item node ids (positives and negatives), ascending.
    pub fn item_nodes(&self) -> &[usize] {
        &self.item_nodes
    }

    pub fn all_nodes(&self) -> Vec<usize> {
        let mut all = self.user_nodes.clone();
        all.extend_from_slice(&self.item_nodes);
        all
    }
}

/// Gradient rows keyed by node id. Repeated nodes accumulate on scatter.
#[derive(Debug, Clone, Default)]
pub struct RowGrads {
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
}

impl RowGrads {
    fn with_capacity(rows: usize, d: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(rows),
            values: Vec::with_capacity(rows * d),
        }
    }

    fn push(&mut self, node: usize, row: &[f64]) {
        self.nodes.push(node);
        self.values.extend_from_slice(row);
    }

    /// `target[node] += scale * grad` for every stored row.
    pub fn scatter_add(&self, target: &mut DenseMatrix, scale: f64) {
        if self.nodes.is_empty() {
            return;
        }
        let d = self.values.len() / self.nodes.len();
        for (k, &node) in self.nodes.iter().enumerate() {
            axpy(scale, &self.values[k * d..(k + 1) * d], target.row_mut(node));
        }
    }

    pub fn to_dense(&self, rows: usize, cols: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(rows, cols);
        self.scatter_add(&mut out, 1.0);
        out
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-Σ log σ(e_u·e_i - e_u·e_j)` over the batch, with the gradient at the used rows.
pub fn bpr_loss_and_grad(final_repr: &DenseMatrix, batch: &Batch) -> (f64, RowGrads) {
    let d = final_repr.cols();
    let offset = batch.num_users;
    let mut grads = RowGrads::with_capacity(3 * batch.len(), d);
    let mut loss = 0.0;
    let mut buf = vec![0.0; d];
    for &(u, i, j) in &batch.triples {
        let (u, i, j) = (u as usize, offset + i as usize, offset + j as usize);
        let (eu, ei, ej) = (final_repr.row(u), final_repr.row(i), final_repr.row(j));
        let margin = dot(eu, ei) - dot(eu, ej);
        loss += softplus(-margin);
        // d loss / d margin = -(1 - σ(margin)) = -σ(-margin)
        let coeff = -sigmoid(-margin);
        for k in 0..d {
            buf[k] = coeff * (ei[k] - ej[k]);
        }
        grads.push(u, &buf);
        buf.iter_mut().zip(eu).for_each(|(b, &x)| *b = coeff * x);
        grads.push(i, &buf);
        buf.iter_mut().zip(eu).for_each(|(b, &x)| *b = -coeff * x);
        grads.push(j, &buf);
    }
    (loss, grads)
}

/// `coeff * Σ ||e0_row||²` over `nodes` (duplicates counted once).
pub fn l2_reg_and_grad(e0: &DenseMatrix, nodes: &[usize], coeff: f64) -> (f64, RowGrads) {
    let mut unique = nodes.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let d = e0.cols();
    let mut grads = RowGrads::with_capacity(unique.len(), d);
    let mut loss = 0.0;
    let mut buf = vec![0.0; d];
    for &n in &unique {
        let row = e0.row(n);
        loss += dot(row, row);
        buf.iter_mut().zip(row).for_each(|(b, &x)| *b = 2.0 * coeff * x);
        grads.push(n, &buf);
    }
    (coeff * loss, grads)
}

/// Result of a contrastive loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct ContrastOutput {
    pub loss: f64,
    /// Gradient at the pre-normalization rows of the first view.
    pub grad_a: RowGrads,
    /// Gradient at the pre-normalization rows of the second view.
    pub grad_b: RowGrads,
    /// Nodes excluded because a view row was (numerically) zero.
    pub dropped: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn contrastable(views: &[&DenseMatrix], nodes: &[usize]) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = nodes
        .iter()
        .copied()
        .filter(|&n| views.iter().all(|v| norm(v.row(n)) >= MIN_CONTRAST_NORM))
        .collect();
    let dropped = nodes.len() - kept.len();
    if dropped > 0 {
        warn!("{dropped} zero-norm rows left out of contrast");
    }
    (kept, dropped)
}

/// Gathers `nodes` from `view`, returning unit rows and the original norms.
fn gather_normalized(view: &DenseMatrix, nodes: &[usize]) -> (DenseMatrix, Vec<f64>) {
    let mut z = view.gather(nodes);
    let mut norms = Vec::with_capacity(nodes.len());
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let len = norm(row);
        row.iter_mut().for_each(|x| *x /= len);
        norms.push(len);
    }
    (z, norms)
}

/// `S[i][j] = a_i · b_j * scale`, row-major `m x m`.
fn scaled_gram(a: &DenseMatrix, b: &DenseMatrix, scale: f64) -> Vec<f64> {
    let mut s = vec![0.0; a.rows() * b.rows()];
    gemm(scale, a.into(), MatRef::from(b).t(), &mut s);
    s
}

/// Replaces each row of `s` by its softmax and returns the row log-sum-exps.
fn softmax_rows(s: &mut [f64], m: usize) -> Vec<f64> {
    if m == 0 {
        return Vec::new();
    }
    s.par_chunks_mut(m)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            max + sum.ln()
        })
        .collect()
}

/// `coeffs * rows` (or `coeffsᵀ * rows`) for a square `m x m` coefficient matrix.
fn combine_rows(coeffs: &[f64], transposed: bool, rows: &DenseMatrix) -> DenseMatrix {
    let m = rows.rows();
    let mut c = MatRef::new(coeffs, m, m);
    if transposed {
        c = c.t();
    }
    let mut out = DenseMatrix::zeros(m, rows.cols());
    gemm(1.0, c, rows.into(), out.as_mut_slice());
    out
}

/// Chains `dL/dz` through `z = e / ||e||`: `(dz - z (z·dz)) / ||e||`.
fn through_normalization(z: &DenseMatrix, dz: &DenseMatrix, norms: &[f64], nodes: &[usize]) -> RowGrads {
    let d = z.cols();
    let mut grads = RowGrads::with_capacity(nodes.len(), d);
    let mut buf = vec![0.0; d];
    for (r, &node) in nodes.iter().enumerate() {
        let (zr, gr) = (z.row(r), dz.row(r));
        let radial = dot(zr, gr);
        for k in 0..d {
            buf[k] = (gr[k] - radial * zr[k]) / norms[r];
        }
        grads.push(node, &buf);
    }
    grads
}

/// Two-view InfoNCE over one node pool:
/// `Σ_i -log( exp(z_a,i·z_b,i/τ) / Σ_j exp(z_a,i·z_b,j/τ) )`, `j` ranging over the pool.
pub fn infonce_loss_and_grad(
    view_a: &DenseMatrix,
    view_b: &DenseMatrix,
    nodes: &[usize],
    tau: f64,
) -> Result<ContrastOutput> {
    check_tau(tau)?;
    if !view_a.same_shape(view_b) {
        return Err(Error::Dimension("contrast views differ in shape".into()));
    }
    let (nodes, dropped) = contrastable(&[view_a, view_b], nodes);
    let m = nodes.len();
    if m == 0 {
        return Ok(ContrastOutput {
            dropped,
            ..Default::default()
        });
    }
    let (za, norms_a) = gather_normalized(view_a, &nodes);
    let (zb, norms_b) = gather_normalized(view_b, &nodes);

    let mut p = scaled_gram(&za, &zb, 1.0 / tau);
    let positives: Vec<f64> = (0..m).map(|i| p[i * m + i]).collect();
    let lse = softmax_rows(&mut p, m);
    let loss: f64 = lse.iter().zip(&positives).map(|(l, s)| l - s).sum();

    // dL/dS = P - I, and S = Za Zbᵀ / τ
    let mut g = p;
    for i in 0..m {
        g[i * m + i] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v /= tau);
    let dza = combine_rows(&g, false, &zb);
    let dzb = combine_rows(&g, true, &za);

    Ok(ContrastOutput {
        loss,
        grad_a: through_normalization(&za, &dza, &norms_a, &nodes),
        grad_b: through_normalization(&zb, &dzb, &norms_b, &nodes),
        dropped,
    })
}

/// Augmentation-free contrast over one pool:
/// `Σ_i -log( exp(1/τ) / Σ_j exp(z_i·z_j/τ) )`, `j` including `i`.
pub fn sgl_wa_loss(view: &DenseMatrix, nodes: &[usize], tau: f64) -> Result<f64> {
    Ok(sgl_wa_loss_and_grad(view, nodes, tau)?.0)
}

pub fn sgl_wa_loss_and_grad(view: &DenseMatrix, nodes: &[usize], tau: f64) -> Result<(f64, RowGrads)> {
    check_tau(tau)?;
    let (nodes, _) = contrastable(&[view], nodes);
    let m = nodes.len();
    if m == 0 {
        return Ok((0.0, RowGrads::default()));
    }
    let (z, norms) = gather_normalized(view, &nodes);
    let mut p = scaled_gram(&z, &z, 1.0 / tau);
    let lse = softmax_rows(&mut p, m);
    let loss: f64 = lse.iter().map(|l| l - 1.0 / tau).sum();

    // S is symmetric in z, so dL/dz = (P + Pᵀ) Z / τ; the constant numerator has no gradient.
    let mut dz = combine_rows(&p, false, &z);
    dz.add_scaled(&combine_rows(&p, true, &z), 1.0);
    dz.scale(1.0 / tau);
    Ok((loss, through_normalization(&z, &dz, &norms, &nodes)))
}

/// InfoNCE summed over the batch's user pool and item pool.
pub fn contrast_batch(
    view_a: &DenseMatrix,
    view_b: &DenseMatrix,
    batch: &Batch,
    tau: f64,
) -> Result<ContrastOutput> {
    let users = infonce_loss_and_grad(view_a, view_b, batch.user_nodes(), tau)?;
    let items = infonce_loss_and_grad(view_a, view_b, batch.item_nodes(), tau)?;
    let mut out = users;
    out.loss += items.loss;
    out.dropped += items.dropped;
    out.grad_a.nodes.extend(items.grad_a.nodes);
    out.grad_a.values.extend(items.grad_a.values);
    out.grad_b.nodes.extend(items.grad_b.nodes);
    out.grad_b.values.extend(items.grad_b.values);
    Ok(out)
}

/// Augmentation-free contrast summed over the batch's user pool and item pool.
pub fn sgl_wa_batch(view: &DenseMatrix, batch: &Batch, tau: f64) -> Result<(f64, RowGrads)> {
    let (lu, mut gu) = sgl_wa_loss_and_grad(view, batch.user_nodes(), tau)?;
    let (li, gi) = sgl_wa_loss_and_grad(view, batch.item_nodes(), tau)?;
    gu.nodes.extend(gi.nodes);
    gu.values.extend(gi.values);
    Ok((lu + li, gu))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub rec_loss: f64,
    pub cl_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

impl LossReport {
    fn new(rec_loss: f64, cl_loss: f64, reg_loss: f64, lambda: f64) -> Self {
        Self {
            rec_loss,
            cl_loss,
            reg_loss,
            total: rec_loss + lambda * cl_loss + reg_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rec_loss.is_finite()
            && self.cl_loss.is_finite()
            && self.reg_loss.is_finite()
            && self.total.is_finite()
    }
}

/// Loss report plus the full gradient with respect to `E0`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub report: LossReport,
    pub grad: DenseMatrix,
}

/// Settings shared by the contrastive objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastSettings {
    pub layers: usize,
    pub lambda: f64,
    pub tau: f64,
    pub reg: f64,
}

fn repeat_graph(adj: &SparseAdjacency, layers: usize) -> Vec<&SparseAdjacency> {
    vec![adj; layers]
}

fn add_reg(e0: &DenseMatrix, batch: &Batch, coeff: f64, grad: &mut DenseMatrix) -> f64 {
    let (reg, reg_grad) = l2_reg_and_grad(e0, &batch.all_nodes(), coeff);
    reg_grad.scatter_add(grad, 1.0);
    reg
}

/// Plain LightGCN: BPR on the input-inclusive average, no contrast.
pub fn joint_loss_lightgcn(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    layers: usize,
    batch: &Batch,
    reg: f64,
) -> Result<Objective> {
    let graphs = repeat_graph(adj, layers);
    let state = propagate(e0, &graphs, Aggregation::IncludeInput, None)?;
    let (rec, rec_grad) = bpr_loss_and_grad(&state.final_repr, batch);
    let grad_final = rec_grad.to_dense(e0.rows(), e0.cols());
    let mut grad = backprop(&graphs, Aggregation::IncludeInput, &grad_final, &[])?;
    let reg_loss = add_reg(e0, batch, reg, &mut grad);
    Ok(Objective {
        report: LossReport::new(rec, 0.0, reg_loss, 0.0),
        grad,
    })
}

/// Which representation the cross-layer contrast anchors on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastAnchor {
    /// The aggregated (final) representation.
    #[default]
    Final,
    /// The output of one layer (1-based).
    Layer(usize),
}

/// Single perturbed pass: BPR on the perturbed aggregate, InfoNCE between the normalized
/// anchor (normally the aggregate) and the normalized output of `contrast_layer`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_xsimgcl(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    batch: &Batch,
    settings: &ContrastSettings,
    noise: NoiseSpec,
    anchor: ContrastAnchor,
    contrast_layer: usize,
    rng: &mut dyn RngCore,
) -> Result<Objective> {
    let in_range = |l: usize| (1..=settings.layers).contains(&l);
    if !in_range(contrast_layer) {
        return Err(Error::Config(format!(
            "contrast layer {contrast_layer} outside 1..={}",
            settings.layers
        )));
    }
    if let ContrastAnchor::Layer(a) = anchor {
        if !in_range(a) {
            return Err(Error::Config(format!(
                "contrast anchor layer {a} outside 1..={}",
                settings.layers
            )));
        }
    }
    let graphs = repeat_graph(adj, settings.layers);
    let state = propagate(
        e0,
        &graphs,
        Aggregation::SkipInput,
        Some(Perturbation { spec: noise, rng }),
    )?;
    let (rec, rec_grad) = bpr_loss_and_grad(&state.final_repr, batch);
    let anchor_view = match anchor {
        ContrastAnchor::Final => &state.final_repr,
        ContrastAnchor::Layer(a) => state.layer(a),
    };
    let cl = contrast_batch(anchor_view, state.layer(contrast_layer), batch, settings.tau)?;

    let (n, d) = (e0.rows(), e0.cols());
    let mut grad_final = rec_grad.to_dense(n, d);
    let mut grad_anchor = DenseMatrix::zeros(n, d);
    match anchor {
        ContrastAnchor::Final => cl.grad_a.scatter_add(&mut grad_final, settings.lambda),
        ContrastAnchor::Layer(_) => cl.grad_a.scatter_add(&mut grad_anchor, settings.lambda),
    }
    let mut grad_layer = DenseMatrix::zeros(n, d);
    cl.grad_b.scatter_add(&mut grad_layer, settings.lambda);

    let mut injections = vec![(contrast_layer, &grad_layer)];
    if let ContrastAnchor::Layer(a) = anchor {
        injections.push((a, &grad_anchor));
    }
    let mut grad = backprop(&graphs, Aggregation::SkipInput, &grad_final, &injections)?;
    let reg_loss = add_reg(e0, batch, settings.reg, &mut grad);
    Ok(Objective {
        report: LossReport::new(rec, cl.loss, reg_loss, settings.lambda),
        grad,
    })
}

/// Three passes: a noise-free one for BPR and two independently perturbed ones whose
/// aggregates are contrasted. All skip the input embedding.
pub fn joint_loss_simgcl(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    batch: &Batch,
    settings: &ContrastSettings,
    noise: NoiseSpec,
    rng: &mut dyn RngCore,
) -> Result<Objective> {
    let graphs = repeat_graph(adj, settings.layers);
    let agg = Aggregation::SkipInput;
    let plain = propagate(e0, &graphs, agg, None)?;
    let view_a = propagate(e0, &graphs, agg, Some(Perturbation { spec: noise, rng: &mut *rng }))?;
    let view_b = propagate(e0, &graphs, agg, Some(Perturbation { spec: noise, rng }))?;

    let (rec, rec_grad) = bpr_loss_and_grad(&plain.final_repr, batch);
    let cl = contrast_batch(&view_a.final_repr, &view_b.final_repr, batch, settings.tau)?;

    let (n, d) = (e0.rows(), e0.cols());
    let mut grad = backprop(&graphs, agg, &rec_grad.to_dense(n, d), &[])?;
    let mut ga = DenseMatrix::zeros(n, d);
    cl.grad_a.scatter_add(&mut ga, settings.lambda);
    grad.add_scaled(&backprop(&graphs, agg, &ga, &[])?, 1.0);
    let mut gb = DenseMatrix::zeros(n, d);
    cl.grad_b.scatter_add(&mut gb, settings.lambda);
    grad.add_scaled(&backprop(&graphs, agg, &gb, &[])?, 1.0);

    let reg_loss = add_reg(e0, batch, settings.reg, &mut grad);
    Ok(Objective {
        report: LossReport::new(rec, cl.loss, reg_loss, settings.lambda),
        grad,
    })
}

/// Contrastive views for SGL.
#[derive(Debug, Clone)]
pub enum SglViews<'a> {
    /// No augmentation: the closed-form contrast on the plain encoder.
    WithoutAugmentation,
    /// Two corrupted encoders, one adjacency per layer each.
    Augmented {
        first: Vec<&'a SparseAdjacency>,
        second: Vec<&'a SparseAdjacency>,
    },
}

/// BPR on the plain input-inclusive encoder plus contrast between two augmented encoders
/// (or the closed form when there is no augmentation).
pub fn joint_loss_sgl(
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    views: &SglViews<'_>,
    batch: &Batch,
    settings: &ContrastSettings,
) -> Result<Objective> {
    let graphs = repeat_graph(adj, settings.layers);
    let agg = Aggregation::IncludeInput;
    let plain = propagate(e0, &graphs, agg, None)?;
    let (rec, rec_grad) = bpr_loss_and_grad(&plain.final_repr, batch);
    let (n, d) = (e0.rows(), e0.cols());
    let mut grad_final = rec_grad.to_dense(n, d);

    let (cl_loss, mut grad) = match views {
        SglViews::WithoutAugmentation => {
            let (cl, cl_grad) = sgl_wa_batch(&plain.final_repr, batch, settings.tau)?;
            cl_grad.scatter_add(&mut grad_final, settings.lambda);
            (cl, backprop(&graphs, agg, &grad_final, &[])?)
        }
        SglViews::Augmented { first, second } => {
            if first.len() != settings.layers || second.len() != settings.layers {
                return Err(Error::Config(format!(
                    "augmented views need one adjacency per layer ({})",
                    settings.layers
                )));
            }
            let va = propagate(e0, first, agg, None)?;
            let vb = propagate(e0, second, agg, None)?;
            let cl = contrast_batch(&va.final_repr, &vb.final_repr, batch, settings.tau)?;
            let mut grad = backprop(&graphs, agg, &grad_final, &[])?;
            let mut ga = DenseMatrix::zeros(n, d);
            cl.grad_a.scatter_add(&mut ga, settings.lambda);
            grad.add_scaled(&backprop(first, agg, &ga, &[])?, 1.0);
            let mut gb = DenseMatrix::zeros(n, d);
            cl.grad_b.scatter_add(&mut gb, settings.lambda);
            grad.add_scaled(&backprop(second, agg, &gb, &[])?, 1.0);
            (cl.loss, grad)
        }
    };

    let reg_loss = add_reg(e0, batch, settings.reg, &mut grad);
    Ok(Objective {
        report: LossReport::new(rec, cl_loss, reg_loss, settings.lambda),
        grad,
    })
}
