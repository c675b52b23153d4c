//! Contrastive relevance aggregation: training-free region weights from
//! in-class versus out-of-class cosine relevance, and the momentum
//! accumulator that turns them into per-image weights.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DetaError, Result};
use crate::numerics::{dot, l2_normalize, softmax};
use crate::scalar::Scalar;

/// Identifies one region of one support sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionIndex {
    pub sample_id: u64,
    pub region_slot: usize,
    pub class_id: usize,
}

/// Regions of one support sample as seen by CoRA.
#[derive(Debug, Clone, Copy)]
pub struct SampleRegions<'a, T> {
    pub sample_id: u64,
    pub class_id: usize,
    pub regions: &'a [Vec<T>],
}

/// In-class and out-of-class sets for one region, as flat region positions
/// (sample-major, slot-minor order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSets {
    pub index: RegionIndex,
    pub in_class: Vec<usize>,
    pub out_of_class: Vec<usize>,
}

/// `I(z_ij)`: regions of the same class from other samples.
/// `O(z_ij)`: every region of every other class.
pub fn build_region_sets<T>(samples: &[SampleRegions<'_, T>]) -> Vec<RegionSets> {
    let mut owner = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        for _ in sample.regions {
            owner.push((s, sample.class_id));
        }
    }
    let mut out = Vec::with_capacity(owner.len());
    for (s, sample) in samples.iter().enumerate() {
        for slot in 0..sample.regions.len() {
            let mut in_class = Vec::new();
            let mut out_of_class = Vec::new();
            for (pos, &(os, oc)) in owner.iter().enumerate() {
                if oc == sample.class_id {
                    if os != s {
                        in_class.push(pos);
                    }
                } else {
                    out_of_class.push(pos);
                }
            }
            out.push(RegionSets {
                index: RegionIndex {
                    sample_id: sample.sample_id,
                    region_slot: slot,
                    class_id: sample.class_id,
                },
                in_class,
                out_of_class,
            });
        }
    }
    out
}

/// Mean cosine relevance of `region` to its in-class set (`phi`) and its
/// out-of-class set (`psi`). An empty in-class set yields `phi = 0`; an
/// empty out-of-class set is an error.
pub fn relevance_scores<T: Scalar>(region: &[T], in_set: &[&[T]], out_set: &[&[T]]) -> Result<(T, T)> {
    if out_set.is_empty() {
        return Err(DetaError::invalid(
            "out-of-class set is empty; contrastive relevance needs >= 2 classes",
        ));
    }
    let mean_cos = |set: &[&[T]]| -> Result<T> {
        if set.is_empty() {
            return Ok(T::zero());
        }
        let mut acc = T::zero();
        for other in set {
            acc = acc + crate::numerics::cosine_similarity(region, other)?;
        }
        Ok(acc / T::of_usize(set.len()))
    };
    Ok((mean_cos(in_set)?, mean_cos(out_set)?))
}

/// Knobs for ablating parts of the weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoraOptions {
    /// When false the out-of-class relevance is dropped (`psi ≡ 0`, so the
    /// normalized `psi` is uniform within each class).
    pub use_out_of_class: bool,
}

impl Default for CoraOptions {
    fn default() -> Self {
        Self {
            use_out_of_class: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionWeight<T> {
    pub index: RegionIndex,
    pub phi: T,
    pub psi: T,
    pub phi_norm: T,
    pub psi_norm: T,
    pub lambda: T,
}

/// Output of [`region_weights`]: one entry per region, in sample-major,
/// slot-minor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionWeightTable<T> {
    pub entries: Vec<RegionWeight<T>>,
}

impl<T: Scalar> RegionWeightTable<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lambdas(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.lambda).collect()
    }

    pub fn get(&self, sample_id: u64, region_slot: usize) -> Option<&RegionWeight<T>> {
        self.entries
            .iter()
            .find(|e| e.index.sample_id == sample_id && e.index.region_slot == region_slot)
    }

    /// Region weights of one sample, in slot order.
    pub fn sample_lambdas(&self, sample_id: u64) -> Vec<T> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.index.sample_id == sample_id)
            .map(|e| (e.index.region_slot, e.lambda))
            .collect();
        v.sort_by_key(|&(slot, _)| slot);
        v.into_iter().map(|(_, l)| l).collect()
    }

    /// Table with every weight set to one, used when weighting is disabled.
    pub fn uniform(samples: &[SampleRegions<'_, T>]) -> Self {
        let entries = samples
            .iter()
            .flat_map(|s| {
                (0..s.regions.len()).map(move |slot| RegionWeight {
                    index: RegionIndex {
                        sample_id: s.sample_id,
                        region_slot: slot,
                        class_id: s.class_id,
                    },
                    phi: T::zero(),
                    psi: T::zero(),
                    phi_norm: T::one(),
                    psi_norm: T::one(),
                    lambda: T::one(),
                })
            })
            .collect();
        Self { entries }
    }
}

/// Region weights `lambda = softmax_c(phi) / softmax_c(psi)`, with both
/// softmaxes taken over all regions of the region's class.
pub fn region_weights<T: Scalar>(
    samples: &[SampleRegions<'_, T>],
    opts: CoraOptions,
) -> Result<RegionWeightTable<T>> {
    let mut classes: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(DetaError::invalid(
            "contrastive relevance needs regions from at least 2 classes",
        ));
    }

    // Flatten and normalize once; cosine becomes a dot product.
    let mut units: Vec<Vec<T>> = Vec::new();
    let mut owner: Vec<(usize, usize)> = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        for r in sample.regions {
            units.push(l2_normalize(r).map_err(|_| {
                DetaError::degenerate(format!("region of sample {} has zero norm", sample.sample_id))
            })?);
            owner.push((s, sample.class_id));
        }
    }
    let n = units.len();

    let mut phi = vec![T::zero(); n];
    let mut psi = vec![T::zero(); n];
    for a in 0..n {
        let (sa, ca) = owner[a];
        let (mut in_sum, mut in_n) = (T::zero(), 0usize);
        let (mut out_sum, mut out_n) = (T::zero(), 0usize);
        for b in 0..n {
            let (sb, cb) = owner[b];
            if cb == ca {
                if sb != sa {
                    in_sum = in_sum + dot(&units[a], &units[b]);
                    in_n += 1;
                }
            } else if opts.use_out_of_class {
                out_sum = out_sum + dot(&units[a], &units[b]);
                out_n += 1;
            }
        }
        if in_n > 0 {
            phi[a] = in_sum / T::of_usize(in_n);
        }
        if out_n > 0 {
            psi[a] = out_sum / T::of_usize(out_n);
        }
    }

    let mut phi_norm = vec![T::zero(); n];
    let mut psi_norm = vec![T::zero(); n];
    for &c in &classes {
        let members: Vec<usize> = (0..n).filter(|&a| owner[a].1 == c).collect();
        let p: Vec<T> = members.iter().map(|&a| phi[a]).collect();
        let q: Vec<T> = members.iter().map(|&a| psi[a]).collect();
        let ps = softmax(&p, T::one())?;
        let qs = softmax(&q, T::one())?;
        for (m, &a) in members.iter().enumerate() {
            phi_norm[a] = ps[m];
            psi_norm[a] = qs[m];
        }
    }

    let mut entries = Vec::with_capacity(n);
    let mut pos = 0;
    for sample in samples {
        for slot in 0..sample.regions.len() {
            entries.push(RegionWeight {
                index: RegionIndex {
                    sample_id: sample.sample_id,
                    region_slot: slot,
                    class_id: sample.class_id,
                },
                phi: phi[pos],
                psi: psi[pos],
                phi_norm: phi_norm[pos],
                psi_norm: psi_norm[pos],
                lambda: phi_norm[pos] / psi_norm[pos],
            });
            pos += 1;
        }
    }
    Ok(RegionWeightTable { entries })
}

/// Per-image momentum-smoothed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageWeightAccumulator<T> {
    pub omega: BTreeMap<u64, T>,
    pub iteration: usize,
    pub momentum: T,
    sample_ids: Vec<u64>,
}

impl<T: Scalar> ImageWeightAccumulator<T> {
    /// Fresh accumulator (t = 0) tracking the given support sample ids.
    pub fn new(sample_ids: Vec<u64>, momentum: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(DetaError::invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            omega: BTreeMap::new(),
            iteration: 0,
            momentum,
            sample_ids,
        })
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    /// Folds one iteration's region weights in: the first update takes the
    /// mean region weight of each sample, later ones blend it in with
    /// `omega = gamma * omega + (1 - gamma) * mean`.
    pub fn update(&mut self, table: &RegionWeightTable<T>) -> Result<()> {
        let mut sums: BTreeMap<u64, (T, usize)> = BTreeMap::new();
        for e in &table.entries {
            let slot = sums.entry(e.index.sample_id).or_insert((T::zero(), 0));
            slot.0 = slot.0 + e.lambda;
            slot.1 += 1;
        }
        let mut next = BTreeMap::new();
        for &id in &self.sample_ids {
            let (sum, count) = *sums.get(&id).ok_or(DetaError::MissingWeight(id))?;
            let mean = sum / T::of_usize(count);
            let w = if self.iteration == 0 {
                mean
            } else {
                let prev = *self.omega.get(&id).ok_or(DetaError::MissingWeight(id))?;
                self.momentum * prev + (T::one() - self.momentum) * mean
            };
            next.insert(id, w);
        }
        self.omega = next;
        self.iteration += 1;
        Ok(())
    }

    /// Weights in the order of `ids`; samples never seen default to one.
    pub fn weights_for(&self, ids: &[u64]) -> Vec<T> {
        ids.iter()
            .map(|id| self.omega.get(id).copied().unwrap_or_else(T::one))
            .collect()
    }
}

/// Functional form of [`ImageWeightAccumulator::update`].
pub fn accumulate_image_weights<T: Scalar>(
    mut acc: ImageWeightAccumulator<T>,
    table: &RegionWeightTable<T>,
) -> Result<ImageWeightAccumulator<T>> {
    acc.update(table)?;
    Ok(acc)
}

/// One row of the weight-inspection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTraceRow {
    pub iteration: usize,
    pub sample_id: u64,
    pub region_slot: usize,
    pub phi: f64,
    pub psi: f64,
    pub lambda: f64,
    pub omega: f64,
}

/// Rows for one iteration (`iteration` is 1-based, matching the accumulator).
pub fn trace_rows<T: Scalar>(
    iteration: usize,
    table: &RegionWeightTable<T>,
    acc: &ImageWeightAccumulator<T>,
) -> Vec<WeightTraceRow> {
    table
        .entries
        .iter()
        .map(|e| WeightTraceRow {
            iteration,
            sample_id: e.index.sample_id,
            region_slot: e.index.region_slot,
            phi: e.phi.as_f64(),
            psi: e.psi.as_f64(),
            lambda: e.lambda.as_f64(),
            omega: acc.omega.get(&e.index.sample_id).map_or(f64::NAN, |w| w.as_f64()),
        })
        .collect()
}

pub fn write_weight_trace_csv<W: Write>(rows: &[WeightTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "sample_id", "region_slot", "phi", "psi", "lambda", "omega"])
        .map_err(csv_err)?;
    for r in rows {
        w.serialize((r.iteration, r.sample_id, r.region_slot, r.phi, r.psi, r.lambda, r.omega))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> DetaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DetaError::IoError(io),
        other => DetaError::IoError(std::io::Error::other(format!("{other:?}"))),
    }
}
