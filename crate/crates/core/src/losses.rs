//! Weighted contrastive objectives over region and image embeddings.
//!
//! * local compactness: a weighted supervised-contrastive loss over region
//!   embeddings, where each logit is `lambda_i r_i . lambda_v r_v / tau`;
//! * global dispersion: weighted cross-entropy of every region against
//!   omega-weighted image prototypes, using a cosine softmax at temperature
//!   `pi`;
//! * combined: `beta * local + global`.
//!
//! Every loss returns analytic gradients with respect to the embedding
//! coordinates it consumes. Region and image weights are constants.

use serde::{Deserialize, Serialize};

use crate::error::{DetaError, Result};
use crate::numerics::{axpy, cosine_with_grad, dot, log_sum_exp, softmax};
use crate::scalar::Scalar;

/// Embedding dimension used by the default projection head.
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossHyperparams {
    /// Temperature of the local compactness logits.
    pub tau: f64,
    /// Temperature of the region-to-prototype posterior.
    pub pi: f64,
    /// Weight of the local compactness term.
    pub beta: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            pi: 0.07,
            beta: 0.1,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.pi > 0.0) {
            return Err(DetaError::invalid("temperatures tau and pi must be > 0"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(DetaError::invalid("beta must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Which loss terms are active; used by ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub local: bool,
    pub global: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            local: true,
            global: true,
        }
    }
}

/// Embeddings of one adaptation iteration, stored by position.
///
/// `image_*` are aligned with the support set; `region_*` are flat
/// (sample-major, slot-minor) and `region_owner` points back at the support
/// position each region was cropped from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub way: usize,
    pub image_embeddings: Vec<Vec<T>>,
    pub image_labels: Vec<usize>,
    pub region_embeddings: Vec<Vec<T>>,
    pub region_labels: Vec<usize>,
    pub region_owner: Vec<usize>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn embed_dim(&self) -> usize {
        self.region_embeddings
            .first()
            .or(self.image_embeddings.first())
            .map_or(0, Vec::len)
    }

    /// Checks lengths and label ranges, and that every embedding is unit norm
    /// within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n_img = self.image_embeddings.len();
        if self.image_labels.len() != n_img
            || self.region_labels.len() != self.region_embeddings.len()
            || self.region_owner.len() != self.region_embeddings.len()
        {
            return Err(DetaError::invalid("embedding batch arrays are misaligned"));
        }
        if self.region_owner.iter().any(|&o| o >= n_img) {
            return Err(DetaError::invalid("region owner out of range"));
        }
        if self.image_labels.iter().chain(&self.region_labels).any(|&c| c >= self.way) {
            return Err(DetaError::invalid("label out of range"));
        }
        for e in self.image_embeddings.iter().chain(&self.region_embeddings) {
            let n = dot(e, e).sqrt().as_f64();
            if (n - 1.0).abs() > tol {
                return Err(DetaError::invalid(format!("embedding norm {n} is not unit")));
            }
        }
        Ok(())
    }
}

fn zeros_like<T: Scalar>(vs: &[Vec<T>]) -> Vec<Vec<T>> {
    vs.iter().map(|v| vec![T::zero(); v.len()]).collect()
}

fn check_temperature<T: Scalar>(t: T, name: &str) -> Result<()> {
    if !(t > T::zero()) {
        return Err(DetaError::invalid(format!("{name} must be > 0")));
    }
    Ok(())
}

/// One local-compactness term `l(r_i, r_j)`: the negative log share of the
/// `(i, j)` logit among all logits of `r_i` against every other region.
pub fn pairwise_local_term<T: Scalar>(
    regions: &[Vec<T>],
    lambdas: &[T],
    i: usize,
    j: usize,
    tau: T,
) -> Result<T> {
    check_temperature(tau, "tau")?;
    if i == j || i >= regions.len() || j >= regions.len() || lambdas.len() != regions.len() {
        return Err(DetaError::invalid("pairwise term needs two distinct valid regions"));
    }
    let logit = |v: usize| lambdas[i] * lambdas[v] * dot(&regions[i], &regions[v]) / tau;
    let others: Vec<T> = (0..regions.len()).filter(|&v| v != i).map(logit).collect();
    Ok(log_sum_exp(&others) - logit(j))
}

/// Number of unordered same-class region pairs, the local loss normalizer.
fn pair_normalizer(labels: &[usize], way: usize) -> usize {
    let mut counts = vec![0usize; way];
    for &c in labels {
        counts[c] += 1;
    }
    counts.iter().map(|&m| m * m.saturating_sub(1) / 2).sum()
}

/// Local compactness loss over ordered same-class pairs, divided by the
/// number of unordered same-class pairs. Returns the value and the gradient
/// with respect to each region embedding.
pub fn local_compactness_loss<T: Scalar>(
    regions: &[Vec<T>],
    labels: &[usize],
    lambdas: &[T],
    way: usize,
    tau: T,
) -> Result<(T, Vec<Vec<T>>)> {
    check_temperature(tau, "tau")?;
    let n = regions.len();
    if labels.len() != n || lambdas.len() != n {
        return Err(DetaError::invalid("regions, labels and weights must align"));
    }
    if labels.iter().any(|&c| c >= way) {
        return Err(DetaError::invalid("region label out of range"));
    }
    let mut grads = zeros_like(regions);
    let norm = pair_normalizer(labels, way);
    if norm == 0 || n < 2 {
        return Ok((T::zero(), grads));
    }
    let inv_norm = T::one() / T::of_usize(norm);
    let inv_tau = T::one() / tau;

    // Sum over j of l(i, j) = n_i * LSE_i - sum_{j in class(i), j != i} s_ij,
    // with s_iv = lambda_i lambda_v r_i . r_v / tau.
    let mut total = T::zero();
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        let positives = labels.iter().enumerate().filter(|&(v, &c)| v != i && c == labels[i]).count();
        if positives == 0 {
            continue;
        }
        for v in 0..n {
            logits[v] = if v == i {
                T::neg_infinity()
            } else {
                lambdas[i] * lambdas[v] * dot(&regions[i], &regions[v]) * inv_tau
            };
        }
        let lse = log_sum_exp(&logits);
        let np = T::of_usize(positives);
        let mut pos_sum = T::zero();
        for v in 0..n {
            if v == i {
                continue;
            }
            let p = (logits[v] - lse).exp();
            let is_pos = labels[v] == labels[i];
            if is_pos {
                pos_sum = pos_sum + logits[v];
            }
            let coeff = (np * p - if is_pos { T::one() } else { T::zero() }) * inv_norm;
            if coeff == T::zero() {
                continue;
            }
            let scale = coeff * lambdas[i] * lambdas[v] * inv_tau;
            let (left, right) = split_pair(&mut grads, i, v);
            axpy(scale, &regions[v], left);
            axpy(scale, &regions[i], right);
        }
        total = total + np * lse - pos_sum;
    }
    Ok((total * inv_norm, grads))
}

/// Mutable references to two distinct rows.
fn split_pair<T>(rows: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = rows.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = rows.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// `mu_c = (1 / N_c) * sum_{y_i = c} omega_i e_i`; not re-normalized.
pub fn class_prototypes<T: Scalar>(
    images: &[Vec<T>],
    labels: &[usize],
    omega: &[T],
    way: usize,
) -> Result<Vec<Vec<T>>> {
    if labels.len() != images.len() || omega.len() != images.len() {
        return Err(DetaError::invalid("images, labels and weights must align"));
    }
    let dim = images.first().map_or(0, Vec::len);
    let mut protos = vec![vec![T::zero(); dim]; way];
    let mut counts = vec![0usize; way];
    for ((e, &c), &w) in images.iter().zip(labels).zip(omega) {
        if c >= way {
            return Err(DetaError::invalid("image label out of range"));
        }
        axpy(w, e, &mut protos[c]);
        counts[c] += 1;
    }
    for (c, (p, &n)) in protos.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(DetaError::EmptyClass(c));
        }
        let inv = T::one() / T::of_usize(n);
        p.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok(protos)
}

/// Softmax over `cos(r, mu_c) / pi` across classes.
pub fn region_class_posterior<T: Scalar>(region: &[T], prototypes: &[Vec<T>], pi: T) -> Result<Vec<T>> {
    check_temperature(pi, "pi")?;
    let sims = prototypes
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            crate::numerics::cosine_similarity(region, mu)
                .map_err(|e| DetaError::degenerate(format!("prototype {c}: {e}")))
        })
        .collect::<Result<Vec<T>>>()?;
    softmax(&sims, pi)
}

/// Result of [`global_dispersion_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLoss<T> {
    pub value: T,
    pub grad_regions: Vec<Vec<T>>,
    pub grad_images: Vec<Vec<T>>,
}

/// `-(1 / R) * sum_r lambda_r log p(y_r | r)` over all `R` regions, with the
/// posterior taken against omega-weighted image prototypes. Gradients flow
/// into both the region embeddings and (through the prototypes) the image
/// embeddings.
#[allow(clippy::too_many_arguments)]
pub fn global_dispersion_loss<T: Scalar>(
    regions: &[Vec<T>],
    region_labels: &[usize],
    lambdas: &[T],
    images: &[Vec<T>],
    image_labels: &[usize],
    omega: &[T],
    way: usize,
    pi: T,
) -> Result<GlobalLoss<T>> {
    check_temperature(pi, "pi")?;
    let n = regions.len();
    if region_labels.len() != n || lambdas.len() != n {
        return Err(DetaError::invalid("regions, labels and weights must align"));
    }
    let protos = class_prototypes(images, image_labels, omega, way)?;
    let mut grad_regions = zeros_like(regions);
    let mut grad_images = zeros_like(images);
    if n == 0 {
        return Ok(GlobalLoss {
            value: T::zero(),
            grad_regions,
            grad_images,
        });
    }
    let dim = protos[0].len();
    let mut grad_protos = vec![vec![T::zero(); dim]; way];
    let inv_n = T::one() / T::of_usize(n);
    let inv_pi = T::one() / pi;
    let mut total = T::zero();

    for r in 0..n {
        let y = region_labels[r];
        if y >= way {
            return Err(DetaError::invalid("region label out of range"));
        }
        let mut logits = Vec::with_capacity(way);
        let mut d_region = Vec::with_capacity(way);
        let mut d_proto = Vec::with_capacity(way);
        for (c, mu) in protos.iter().enumerate() {
            let (cos, gr, gm) = cosine_with_grad(&regions[r], mu)
                .map_err(|e| DetaError::degenerate(format!("prototype {c}: {e}")))?;
            logits.push(cos * inv_pi);
            d_region.push(gr);
            d_proto.push(gm);
        }
        let lse = log_sum_exp(&logits);
        let w = lambdas[r] * inv_n;
        total = total - w * (logits[y] - lse);
        if w == T::zero() {
            continue;
        }
        for c in 0..way {
            let p = (logits[c] - lse).exp();
            let coeff = w * (p - if c == y { T::one() } else { T::zero() }) * inv_pi;
            axpy(coeff, &d_region[c], &mut grad_regions[r]);
            axpy(coeff, &d_proto[c], &mut grad_protos[c]);
        }
    }

    let mut counts = vec![0usize; way];
    for &c in image_labels {
        counts[c] += 1;
    }
    for (i, &c) in image_labels.iter().enumerate() {
        let scale = omega[i] / T::of_usize(counts[c]);
        axpy(scale, &grad_protos[c], &mut grad_images[i]);
    }
    Ok(GlobalLoss {
        value: total,
        grad_regions,
        grad_images,
    })
}

/// Combined objective and its gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue<T> {
    pub l_local: T,
    pub l_global: T,
    pub combined: T,
    #[serde(skip)]
    pub grad_images: Vec<Vec<T>>,
    #[serde(skip)]
    pub grad_regions: Vec<Vec<T>>,
}

/// `beta * L_local + L_global` with the corresponding gradient combination.
pub fn combined_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    lambdas: &[T],
    omega: &[T],
    hp: &LossHyperparams,
) -> Result<LossValue<T>> {
    combined_loss_with_terms(batch, lambdas, omega, hp, LossTerms::default())
}

/// [`combined_loss`] with individual terms switched off; a disabled term
/// contributes zero value and zero gradient.
pub fn combined_loss_with_terms<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    lambdas: &[T],
    omega: &[T],
    hp: &LossHyperparams,
    terms: LossTerms,
) -> Result<LossValue<T>> {
    hp.validate()?;
    let beta = T::of(hp.beta);
    let mut grad_regions = zeros_like(&batch.region_embeddings);
    let mut grad_images = zeros_like(&batch.image_embeddings);

    let mut l_local = T::zero();
    if terms.local {
        let (v, g) = local_compactness_loss(
            &batch.region_embeddings,
            &batch.region_labels,
            lambdas,
            batch.way,
            T::of(hp.tau),
        )?;
        l_local = v;
        for (acc, gi) in grad_regions.iter_mut().zip(&g) {
            axpy(beta, gi, acc);
        }
    }
    let mut l_global = T::zero();
    if terms.global {
        let g = global_dispersion_loss(
            &batch.region_embeddings,
            &batch.region_labels,
            lambdas,
            &batch.image_embeddings,
            &batch.image_labels,
            omega,
            batch.way,
            T::of(hp.pi),
        )?;
        l_global = g.value;
        for (acc, gi) in grad_regions.iter_mut().zip(&g.grad_regions) {
            axpy(T::one(), gi, acc);
        }
        for (acc, gi) in grad_images.iter_mut().zip(&g.grad_images) {
            axpy(T::one(), gi, acc);
        }
    }
    Ok(LossValue {
        l_local,
        l_global,
        combined: beta * l_local + l_global,
        grad_images,
        grad_regions,
    })
}
