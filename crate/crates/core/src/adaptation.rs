//! Test-time task adaptation: a residual feature adapter and a two-layer
//! projection head, trained for a fixed number of SGD iterations on one
//! episode's support set with the weighted contrastive objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cora::{
    region_weights, trace_rows, CoraOptions, ImageWeightAccumulator, RegionWeightTable, SampleRegions,
    WeightTraceRow,
};
use crate::episodes::{derive_seed, resample_regions, rng_for, TaskEpisode};
use crate::error::{DetaError, Result};
use crate::losses::{combined_loss_with_terms, EmbeddingBatch, LossHyperparams, LossTerms, LossValue, EMBED_DIM};
use crate::numerics::{all_finite, l2_normalize_backward, norm};
use crate::scalar::Scalar;

const STREAM_INIT: u64 = 11;
const STREAM_REGIONS: u64 = 12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| crate::numerics::dot(self.row(r), x)).collect()
    }

    /// `self^T * g`
    pub fn matvec_t(&self, g: &[T]) -> Vec<T> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr != T::zero() {
                crate::numerics::axpy(gr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += g x^T`
    pub fn add_outer(&mut self, g: &[T], x: &[T]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr != T::zero() {
                let cols = self.cols;
                crate::numerics::axpy(gr, x, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| T::of(rng.random_range(-bound..=bound)))
                .collect(),
        }
    }
}

/// Residual adapter `x + W x + b`, zero-initialized so it starts as the
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, dim),
            bias: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }
}

pub fn forward_features<T: Scalar>(adapter: &AdapterParams<T>, raw: &[T]) -> Result<Vec<T>> {
    if raw.len() != adapter.dim() {
        return Err(DetaError::invalid(format!(
            "feature dimension {} does not match adapter dimension {}",
            raw.len(),
            adapter.dim()
        )));
    }
    let wx = adapter.weight.matvec(raw);
    Ok(raw
        .iter()
        .zip(&wx)
        .zip(&adapter.bias)
        .map(|((&x, &w), &b)| x + w + b)
        .collect())
}

/// Two-layer MLP with a rectifier, followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Intermediate values of one head forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    hidden: Vec<T>,
    pre_norm: T,
    pub embedding: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed);
        let b1 = 1.0 / (in_dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::uniform(hidden, in_dim, b1, &mut rng);
        let bias1 = Matrix::<T>::uniform(1, hidden, b1, &mut rng).data;
        let w2 = Matrix::uniform(out_dim, hidden, b2, &mut rng);
        let bias2 = Matrix::<T>::uniform(1, out_dim, b2, &mut rng).data;
        Self {
            w1,
            b1: bias1,
            w2,
            b2: bias2,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows
    }

    pub fn forward(&self, x: &[T]) -> Result<HeadCache<T>> {
        if x.len() != self.in_dim() {
            return Err(DetaError::invalid("head input dimension mismatch"));
        }
        let hidden: Vec<T> = self
            .w1
            .matvec(x)
            .iter()
            .zip(&self.b1)
            .map(|(&a, &b)| (a + b).max(T::zero()))
            .collect();
        let out: Vec<T> = self
            .w2
            .matvec(&hidden)
            .iter()
            .zip(&self.b2)
            .map(|(&a, &b)| a + b)
            .collect();
        let n = norm(&out);
        if !(n > T::zero()) || !n.is_finite() {
            return Err(DetaError::degenerate("projection output has zero norm"));
        }
        Ok(HeadCache {
            hidden,
            pre_norm: n,
            embedding: out.iter().map(|&v| v / n).collect(),
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the head input.
    pub fn backward(&self, x: &[T], cache: &HeadCache<T>, grad_embedding: &[T], grads: &mut ProjectionHead<T>) -> Vec<T> {
        let g_out = l2_normalize_backward(&cache.embedding, cache.pre_norm, grad_embedding);
        grads.w2.add_outer(&g_out, &cache.hidden);
        crate::numerics::axpy(T::one(), &g_out, &mut grads.b2);
        let mut g_hidden = self.w2.matvec_t(&g_out);
        for (g, &h) in g_hidden.iter_mut().zip(&cache.hidden) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        grads.w1.add_outer(&g_hidden, x);
        crate::numerics::axpy(T::one(), &g_hidden, &mut grads.b1);
        self.w1.matvec_t(&g_hidden)
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows, self.w1.cols),
            b1: vec![T::zero(); self.b1.len()],
            w2: Matrix::zeros(self.w2.rows, self.w2.cols),
            b2: vec![T::zero(); self.b2.len()],
        }
    }
}

pub fn project<T: Scalar>(head: &ProjectionHead<T>, feature: &[T]) -> Result<Vec<T>> {
    Ok(head.forward(feature)?.embedding)
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationModel<T> {
    pub adapter: AdapterParams<T>,
    pub head: ProjectionHead<T>,
}

impl<T: Scalar> AdaptationModel<T> {
    pub fn init(dim: usize, hidden: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            adapter: AdapterParams::identity(dim),
            head: ProjectionHead::init(dim, hidden, embed_dim, seed),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: AdapterParams::identity(self.adapter.dim()),
            head: self.head.zeros_like(),
        }
    }

    fn blocks(&self) -> [&Vec<T>; 6] {
        [
            &self.adapter.weight.data,
            &self.adapter.bias,
            &self.head.w1.data,
            &self.head.b1,
            &self.head.w2.data,
            &self.head.b2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.adapter.weight.data,
            &mut self.adapter.bias,
            &mut self.head.w1.data,
            &mut self.head.b1,
            &mut self.head.w2.data,
            &mut self.head.b2,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameters flattened as adapter weight, adapter bias, head w1, b1, w2, b2.
    pub fn flat_params(&self) -> Vec<T> {
        self.blocks().iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DetaError::invalid("flat parameter length mismatch"));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Loss and parameter gradients for fixed region/image weights.
    ///
    /// `regions[i]` are the raw region features of support sample `i`;
    /// `lambdas` is flat in the same sample-major order.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        images: &[Vec<T>],
        regions: &[Vec<Vec<T>>],
        labels: &[usize],
        way: usize,
        lambdas: &[T],
        omega: &[T],
        hp: &LossHyperparams,
        terms: LossTerms,
    ) -> Result<(LossValue<T>, AdaptationModel<T>)> {
        let adapted_images = images
            .iter()
            .map(|x| forward_features(&self.adapter, x))
            .collect::<Result<Vec<_>>>()?;
        let mut flat_regions = Vec::new();
        let mut region_labels = Vec::new();
        let mut region_owner = Vec::new();
        for (i, rs) in regions.iter().enumerate() {
            for r in rs {
                flat_regions.push(forward_features(&self.adapter, r)?);
                region_labels.push(labels[i]);
                region_owner.push(i);
            }
        }
        let image_cache = adapted_images
            .iter()
            .map(|x| self.head.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let region_cache = flat_regions
            .iter()
            .map(|x| self.head.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let batch = EmbeddingBatch {
            way,
            image_embeddings: image_cache.iter().map(|c| c.embedding.clone()).collect(),
            image_labels: labels.to_vec(),
            region_embeddings: region_cache.iter().map(|c| c.embedding.clone()).collect(),
            region_labels,
            region_owner,
        };
        let loss = combined_loss_with_terms(&batch, lambdas, omega, hp, terms)?;

        let mut grads = self.zeros_like();
        let raw_regions = regions.iter().flatten();
        let inputs = images.iter().zip(&adapted_images).zip(&image_cache).zip(&loss.grad_images).chain(
            raw_regions
                .zip(&flat_regions)
                .zip(&region_cache)
                .zip(&loss.grad_regions),
        );
        for (((raw, adapted), cache), g) in inputs {
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let gx = self.head.backward(adapted, cache, g, &mut grads.head);
            grads.adapter.weight.add_outer(&gx, raw);
            crate::numerics::axpy(T::one(), &gx, &mut grads.adapter.bias);
        }
        Ok((loss, grads))
    }

    /// In-place `p -= lr * g` over every parameter block.
    pub fn apply_sgd(&mut self, grads: &AdaptationModel<T>, learning_rate: T, iteration: usize) -> Result<()> {
        for (p, g) in self.blocks_mut().into_iter().zip(grads.blocks()) {
            let stepped = sgd_step(p, g, learning_rate, iteration)?;
            *p = stepped;
        }
        Ok(())
    }
}

/// Plain gradient descent `p - lr * g`; no momentum or weight decay.
pub fn sgd_step<T: Scalar>(params: &[T], grads: &[T], learning_rate: T, iteration: usize) -> Result<Vec<T>> {
    if params.len() != grads.len() {
        return Err(DetaError::invalid("parameter and gradient shapes differ"));
    }
    if !all_finite(grads) {
        return Err(DetaError::DivergenceError {
            iteration,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| p - learning_rate * g)
        .collect())
}

/// Which parts of the method are active. Everything off reduces adaptation
/// to a no-op and inference to the plain nearest-centroid baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSwitches {
    /// Contrastive region weighting; off means every region and image weight is one.
    pub cora: bool,
    pub local_loss: bool,
    pub global_loss: bool,
    /// Momentum smoothing of image weights; off means each iteration's
    /// image weight is just that iteration's mean region weight.
    pub accumulator: bool,
    /// Out-of-class relevance inside the region weighting.
    pub out_of_class_term: bool,
}

impl ComponentSwitches {
    pub const FULL: Self = Self {
        cora: true,
        local_loss: true,
        global_loss: true,
        accumulator: true,
        out_of_class_term: true,
    };

    pub const NONE: Self = Self {
        cora: false,
        local_loss: false,
        global_loss: false,
        accumulator: false,
        out_of_class_term: false,
    };

    /// Bit mask in field order (cora=1, local=2, global=4, accumulator=8, out_of_class=16).
    pub fn mask(&self) -> u8 {
        (self.cora as u8)
            | (self.local_loss as u8) << 1
            | (self.global_loss as u8) << 2
            | (self.accumulator as u8) << 3
            | (self.out_of_class_term as u8) << 4
    }

    fn loss_terms(&self) -> LossTerms {
        LossTerms {
            local: self.local_loss,
            global: self.global_loss,
        }
    }
}

impl Default for ComponentSwitches {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub k_regions: usize,
    pub momentum: f64,
    pub hp: LossHyperparams,
    pub seed: u64,
    /// Head hidden width; `None` uses the feature dimension.
    pub hidden_dim: Option<usize>,
    pub embed_dim: usize,
    /// Per-coordinate Gaussian jitter added to subsampled stored regions.
    pub region_jitter: f64,
    pub switches: ComponentSwitches,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            learning_rate: 0.05,
            k_regions: 2,
            momentum: 0.7,
            hp: LossHyperparams::default(),
            seed: 0,
            hidden_dim: None,
            embed_dim: EMBED_DIM,
            region_jitter: 0.0,
            switches: ComponentSwitches::FULL,
        }
    }
}

impl AdaptationConfig {
    /// Four regions per sample, as used with residual-adapter backbones.
    pub fn adapter_mode(mut self) -> Self {
        self.k_regions = 4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(DetaError::invalid("iterations must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(DetaError::invalid("learning_rate must be finite and >= 0"));
        }
        if self.k_regions == 0 || self.embed_dim == 0 || self.hidden_dim == Some(0) {
            return Err(DetaError::invalid("k_regions, embed_dim and hidden_dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DetaError::invalid("momentum must lie in [0, 1)"));
        }
        self.hp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub iteration: usize,
    pub l_local: f64,
    pub l_global: f64,
    pub combined: f64,
}

/// Everything inference needs after adaptation, plus the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedState<T> {
    pub adapter: AdapterParams<T>,
    pub head: ProjectionHead<T>,
    pub accumulator: ImageWeightAccumulator<T>,
    pub loss_trace: Vec<LossSummary>,
}

impl<T: Scalar> AdaptedState<T> {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DetaError::ParseError(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DetaError::ParseError(e.to_string()))
    }
}

/// Runs adaptation and returns the final state.
pub fn adapt_task<T: Scalar>(episode: &TaskEpisode<T>, cfg: &AdaptationConfig) -> Result<AdaptedState<T>> {
    adapt_task_traced(episode, cfg, None)
}

/// [`adapt_task`] that also appends per-iteration weight rows to `trace`.
pub fn adapt_task_traced<T: Scalar>(
    episode: &TaskEpisode<T>,
    cfg: &AdaptationConfig,
    mut trace: Option<&mut Vec<WeightTraceRow>>,
) -> Result<AdaptedState<T>> {
    cfg.validate()?;
    episode.validate()?;
    if episode.way < 2 {
        return Err(DetaError::invalid("adaptation needs at least 2 classes"));
    }
    let d = episode.feature_dim;
    let base_seed = derive_seed(cfg.seed, episode.seed);
    let mut model = AdaptationModel::init(
        d,
        cfg.hidden_dim.unwrap_or(d),
        cfg.embed_dim,
        derive_seed(base_seed, STREAM_INIT),
    );
    let sw = cfg.switches;
    let ids: Vec<u64> = episode.support.iter().map(|s| s.sample_id).collect();
    let labels = episode.support_labels();
    let images: Vec<Vec<T>> = episode.support.iter().map(|s| s.image_feature.clone()).collect();
    let momentum = if sw.accumulator { cfg.momentum } else { 0.0 };
    let mut acc = ImageWeightAccumulator::new(ids.clone(), T::of(momentum))?;
    let lr = T::of(cfg.learning_rate);
    let terms = sw.loss_terms();
    let cora_opts = CoraOptions {
        use_out_of_class: sw.out_of_class_term,
    };
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let regions = resample_regions(
            episode,
            cfg.k_regions,
            cfg.region_jitter,
            derive_seed(base_seed, STREAM_REGIONS),
            t,
        )?;
        let adapted_regions = regions
            .iter()
            .map(|rs| rs.iter().map(|r| forward_features(&model.adapter, r)).collect())
            .collect::<Result<Vec<Vec<Vec<T>>>>>()?;
        let views: Vec<SampleRegions<'_, T>> = episode
            .support
            .iter()
            .zip(&adapted_regions)
            .map(|(s, rs)| SampleRegions {
                sample_id: s.sample_id,
                class_id: s.label,
                regions: rs,
            })
            .collect();
        let table = if sw.cora {
            region_weights(&views, cora_opts)?
        } else {
            RegionWeightTable::uniform(&views)
        };
        acc.update(&table)?;
        if let Some(rows) = trace.as_deref_mut() {
            rows.extend(trace_rows(t + 1, &table, &acc));
        }

        if !(terms.local || terms.global) {
            loss_trace.push(LossSummary {
                iteration: t + 1,
                l_local: 0.0,
                l_global: 0.0,
                combined: 0.0,
            });
            continue;
        }
        let lambdas = table.lambdas();
        let omega = acc.weights_for(&ids);
        let (loss, grads) = model
            .loss_and_grad(&images, &regions, &labels, episode.way, &lambdas, &omega, &cfg.hp, terms)
            .map_err(|e| match e {
                DetaError::DegenerateVector(reason) => DetaError::DivergenceError { iteration: t + 1, reason },
                other => other,
            })?;
        if !loss.combined.is_finite() {
            return Err(DetaError::DivergenceError {
                iteration: t + 1,
                reason: "non-finite loss".into(),
            });
        }
        loss_trace.push(LossSummary {
            iteration: t + 1,
            l_local: loss.l_local.as_f64(),
            l_global: loss.l_global.as_f64(),
            combined: loss.combined.as_f64(),
        });
        model.apply_sgd(&grads, lr, t + 1)?;
    }

    Ok(AdaptedState {
        adapter: model.adapter,
        head: model.head,
        accumulator: acc,
        loss_trace,
    })
}
