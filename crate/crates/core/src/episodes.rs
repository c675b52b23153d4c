//! Few-shot task episodes: synthetic generation with controllable image and
//! label noise, label corruption, per-iteration region resampling and the
//! JSON episode file format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DetaError, Result};
use crate::scalar::Scalar;

/// Episode file format version understood by this crate.
pub const EPISODE_FILE_VERSION: u32 = 1;

/// Mixes a stream index into a base seed (splitmix64 finalizer), so that
/// sub-streams of one master seed are decorrelated and independently
/// reproducible.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Sub-stream ids for generation.
const STREAM_FEATURES: u64 = 1;
const STREAM_IMAGE_NOISE: u64 = 2;
const STREAM_LABEL_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTag {
    Clean,
    ImageNoisy,
    LabelNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSample<T> {
    pub sample_id: u64,
    /// Observed (possibly corrupted) label.
    pub label: usize,
    pub image_feature: Vec<T>,
    pub region_features: Vec<Vec<T>>,
    /// Pre-corruption label; evaluation only.
    pub ground_truth_label: usize,
    /// Synthetic provenance; evaluation only.
    pub noise_tag: NoiseTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample<T> {
    pub sample_id: u64,
    pub image_feature: Vec<T>,
    pub ground_truth_label: usize,
}

/// Generative description of where a synthetic sample's regions come from,
/// kept so fresh regions can be drawn every adaptation iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegionModel<T> {
    /// Per-support-sample latent center (same order as `TaskEpisode::support`).
    pub centers: Vec<Vec<T>>,
    /// Per-support-sample probability mass of distractor regions.
    pub distractor_mix: Vec<T>,
    pub distractor_mean: Vec<T>,
    pub region_spread: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegionSource<T> {
    /// Regions come from the stored `region_features` lists.
    Stored,
    Synthetic(SyntheticRegionModel<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEpisode<T> {
    pub way: usize,
    pub feature_dim: usize,
    pub support: Vec<SupportSample<T>>,
    pub queries: Vec<QuerySample<T>>,
    pub seed: u64,
    pub region_source: RegionSource<T>,
}

impl<T: Scalar> TaskEpisode<T> {
    /// Number of support samples per observed class.
    pub fn shots_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.way];
        for s in &self.support {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn num_support(&self) -> usize {
        self.support.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    /// Same data with the generative region model dropped, i.e. what a
    /// save/load round trip produces.
    pub fn with_stored_regions(mut self) -> Self {
        self.region_source = RegionSource::Stored;
        self
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.region_source, RegionSource::Synthetic(_))
    }

    /// Checks the structural invariants: labels in range, consistent
    /// dimensions, at least one region per sample, every class populated.
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 {
            return Err(DetaError::SchemaError("way must be >= 1".into()));
        }
        let d = self.feature_dim;
        let dim_err = |id: u64, what: &str, got: usize| {
            DetaError::SchemaError(format!(
                "sample {id}: {what} has dimension {got}, expected {d}"
            ))
        };
        for s in &self.support {
            if s.label >= self.way || s.ground_truth_label >= self.way {
                return Err(DetaError::SchemaError(format!(
                    "sample {}: class index out of range for way {}",
                    s.sample_id, self.way
                )));
            }
            if s.image_feature.len() != d {
                return Err(dim_err(s.sample_id, "image_feature", s.image_feature.len()));
            }
            if s.region_features.is_empty() {
                return Err(DetaError::SchemaError(format!(
                    "sample {}: no regions",
                    s.sample_id
                )));
            }
            for (j, r) in s.region_features.iter().enumerate() {
                if r.len() != d {
                    return Err(dim_err(s.sample_id, &format!("region {j}"), r.len()));
                }
            }
            if !s.image_feature.iter().chain(s.region_features.iter().flatten()).all(|x| x.is_finite()) {
                return Err(DetaError::SchemaError(format!(
                    "sample {}: non-finite feature value",
                    s.sample_id
                )));
            }
        }
        for q in &self.queries {
            if q.ground_truth_label >= self.way {
                return Err(DetaError::SchemaError(format!(
                    "query {}: class index out of range for way {}",
                    q.sample_id, self.way
                )));
            }
            if q.image_feature.len() != d {
                return Err(dim_err(q.sample_id, "image_feature", q.image_feature.len()));
            }
        }
        if let Some(c) = self.shots_per_class().iter().position(|&n| n == 0) {
            return Err(DetaError::SchemaError(format!(
                "class {c} has no support samples"
            )));
        }
        let mut ids: Vec<u64> = self.support.iter().map(|s| s.sample_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(DetaError::SchemaError("duplicate support sample id".into()));
        }
        Ok(())
    }
}

/// Shape of a generated episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub k_regions: usize,
    pub dim: usize,
    pub queries_per_class: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 10,
            k_regions: 2,
            dim: 64,
            queries_per_class: 15,
        }
    }
}

/// Noise model for synthetic episodes.
///
/// Class means are unit vectors `normalize(anchor + class_separation * u_c)`
/// sharing a common anchor direction; every sample has a latent center drawn
/// around its class mean with spread `sample_spread` plus a component in a
/// shared low-rank nuisance subspace (variation irrelevant to the task, which
/// adaptation can learn to suppress), and its image and region features are
/// drawn around that center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNoiseConfig {
    pub label_noise_ratio: f64,
    pub image_noise_ratio: f64,
    /// Fraction of an image-noisy sample's regions drawn from the shared
    /// distractor distribution.
    pub distractor_mix: f64,
    pub class_separation: f64,
    /// Norm scale of the per-sample deviation from the class mean.
    pub sample_spread: f64,
    /// Norm scale of the per-region deviation from the sample center.
    pub region_spread: f64,
    /// Norm scale of the image-feature deviation from the sample center.
    pub image_spread: f64,
    /// Dimension of the shared task-irrelevant subspace every sample varies in.
    pub nuisance_rank: usize,
    /// Norm scale of each sample's component inside the nuisance subspace.
    pub nuisance_scale: f64,
}

impl Default for SyntheticNoiseConfig {
    fn default() -> Self {
        Self {
            label_noise_ratio: 0.0,
            image_noise_ratio: 0.0,
            distractor_mix: 0.5,
            class_separation: 2.0,
            sample_spread: 0.8,
            region_spread: 0.2,
            image_spread: 0.2,
            nuisance_rank: 4,
            nuisance_scale: 1.0,
        }
    }
}

impl SyntheticNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("label_noise_ratio", self.label_noise_ratio),
            ("image_noise_ratio", self.image_noise_ratio),
            ("distractor_mix", self.distractor_mix),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetaError::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.class_separation > 0.0) {
            return Err(DetaError::invalid("class_separation must be > 0"));
        }
        for (name, v) in [
            ("sample_spread", self.sample_spread),
            ("region_spread", self.region_spread),
            ("image_spread", self.image_spread),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DetaError::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Gaussian vector whose expected squared norm is `scale^2`.
fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let s = scale / (d as f64).sqrt();
    (0..d)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn uncast<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Number of distractor regions among `k` for a sample with mixture `mix`.
fn distractor_count(mix: f64, k: usize) -> usize {
    ((mix * k as f64).round() as usize).min(k)
}

fn draw_regions(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    distractor_mean: &[f64],
    mix: f64,
    spread: f64,
    k: usize,
) -> Vec<Vec<f64>> {
    let d = center.len();
    let n_distract = distractor_count(mix, k);
    let distract_slots: Vec<usize> = if n_distract > 0 {
        index::sample(rng, k, n_distract).into_vec()
    } else {
        Vec::new()
    };
    (0..k)
        .map(|j| {
            let base = if distract_slots.contains(&j) {
                distractor_mean
            } else {
                center
            };
            add(base, &gaussian(rng, d, spread))
        })
        .collect()
}

/// Generates a seeded synthetic episode. Sample ids are `0..N_s` for the
/// support set (class-major order) and continue for queries.
pub fn generate_synthetic_episode<T: Scalar>(
    shape: &EpisodeShape,
    cfg: &SyntheticNoiseConfig,
    seed: u64,
) -> Result<TaskEpisode<T>> {
    let EpisodeShape {
        way,
        shot,
        k_regions: k,
        dim: d,
        queries_per_class,
    } = *shape;
    if way < 2 || shot < 1 || k < 1 || d < 2 {
        return Err(DetaError::invalid(format!(
            "episode shape requires way >= 2, shot >= 1, k >= 1, d >= 2 (got {way}, {shot}, {k}, {d})"
        )));
    }
    cfg.validate()?;

    let mut rng = rng_for(derive_seed(seed, STREAM_FEATURES));
    let anchor = unit_gaussian(&mut rng, d);
    let class_means: Vec<Vec<f64>> = (0..way)
        .map(|_| {
            let u = unit_gaussian(&mut rng, d);
            let m: Vec<f64> = anchor
                .iter()
                .zip(&u)
                .map(|(a, b)| a + cfg.class_separation * b)
                .collect();
            let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            m.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let distractor_mean = {
        let u = unit_gaussian(&mut rng, d);
        let m: Vec<f64> = anchor
            .iter()
            .zip(&u)
            .map(|(a, b)| a + cfg.class_separation * b)
            .collect();
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        m.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };

    let nuisance: Vec<Vec<f64>> = (0..cfg.nuisance_rank).map(|_| unit_gaussian(&mut rng, d)).collect();
    let nuisance_coeff = if cfg.nuisance_rank > 0 {
        cfg.nuisance_scale / (cfg.nuisance_rank as f64).sqrt()
    } else {
        0.0
    };
    let draw_center = |rng: &mut ChaCha8Rng, mean: &[f64]| {
        let mut c = add(mean, &gaussian(rng, d, cfg.sample_spread));
        for dir in &nuisance {
            let a = nuisance_coeff * rng.sample::<f64, _>(StandardNormal);
            c.iter_mut().zip(dir).for_each(|(x, u)| *x += a * u);
        }
        c
    };

    let n_s = way * shot;
    let n_image_noisy = (cfg.image_noise_ratio * n_s as f64).round() as usize;
    let image_noisy: Vec<bool> = {
        let mut nrng = rng_for(derive_seed(seed, STREAM_IMAGE_NOISE));
        let mut flags = vec![false; n_s];
        for i in index::sample(&mut nrng, n_s, n_image_noisy.min(n_s)) {
            flags[i] = true;
        }
        flags
    };

    let mut support = Vec::with_capacity(n_s);
    let mut centers = Vec::with_capacity(n_s);
    let mut mixes = Vec::with_capacity(n_s);
    for c in 0..way {
        for s in 0..shot {
            let i = c * shot + s;
            let center = draw_center(&mut rng, &class_means[c]);
            let mix = if image_noisy[i] { cfg.distractor_mix } else { 0.0 };
            let image_base: Vec<f64> = center
                .iter()
                .zip(&distractor_mean)
                .map(|(x, z)| (1.0 - mix) * x + mix * z)
                .collect();
            let image = add(&image_base, &gaussian(&mut rng, d, cfg.image_spread));
            let regions = draw_regions(&mut rng, &center, &distractor_mean, mix, cfg.region_spread, k);
            support.push(SupportSample {
                sample_id: i as u64,
                label: c,
                image_feature: cast(&image),
                region_features: regions.iter().map(|r| cast(r)).collect(),
                ground_truth_label: c,
                noise_tag: if image_noisy[i] {
                    NoiseTag::ImageNoisy
                } else {
                    NoiseTag::Clean
                },
            });
            centers.push(cast(&center));
            mixes.push(T::of(mix));
        }
    }

    let mut queries = Vec::with_capacity(way * queries_per_class);
    for c in 0..way {
        for _ in 0..queries_per_class {
            let center = draw_center(&mut rng, &class_means[c]);
            let image = add(&center, &gaussian(&mut rng, d, cfg.image_spread));
            queries.push(QuerySample {
                sample_id: (n_s + queries.len()) as u64,
                image_feature: cast(&image),
                ground_truth_label: c,
            });
        }
    }

    let episode = TaskEpisode {
        way,
        feature_dim: d,
        support,
        queries,
        seed,
        region_source: RegionSource::Synthetic(SyntheticRegionModel {
            centers,
            distractor_mix: mixes,
            distractor_mean: cast(&distractor_mean),
            region_spread: T::of(cfg.region_spread),
        }),
    };
    corrupt_labels(
        episode,
        cfg.label_noise_ratio,
        derive_seed(seed, STREAM_LABEL_NOISE),
    )
}

/// Flips exactly `round(ratio * N_s)` support labels, chosen uniformly
/// without replacement over the whole episode, to a uniformly drawn wrong
/// class. Features, queries and ground-truth labels are untouched.
///
/// For a fixed seed the corrupted sets are nested across ratios and each
/// corrupted sample receives the same wrong label, so sweeps over the ratio
/// compare like with like.
pub fn corrupt_labels<T: Scalar>(
    mut episode: TaskEpisode<T>,
    ratio: f64,
    seed: u64,
) -> Result<TaskEpisode<T>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DetaError::invalid(format!("corruption ratio {ratio} outside [0, 1]")));
    }
    let n_s = episode.support.len();
    let n = (ratio * n_s as f64).round() as usize;
    if n == 0 {
        return Ok(episode);
    }
    if episode.way < 2 {
        return Err(DetaError::invalid("label corruption needs at least 2 classes"));
    }
    let mut rng = rng_for(seed);
    let mut order: Vec<usize> = (0..n_s).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n] {
        let s = &mut episode.support[i];
        let mut wrong = rng.random_range(0..episode.way - 1);
        if wrong >= s.ground_truth_label {
            wrong += 1;
        }
        s.label = wrong;
        s.noise_tag = NoiseTag::LabelNoisy;
    }
    Ok(episode)
}

/// Region features of every support sample for one adaptation iteration.
///
/// Synthetic episodes draw `k` fresh regions from each sample's generative
/// mixture. Stored episodes subsample `k` of the stored regions without
/// replacement and add Gaussian noise with per-coordinate std `jitter`.
/// Deterministic in `(seed, iteration)`.
pub fn resample_regions<T: Scalar>(
    episode: &TaskEpisode<T>,
    k: usize,
    jitter: f64,
    seed: u64,
    iteration: usize,
) -> Result<Vec<Vec<Vec<T>>>> {
    if k == 0 {
        return Err(DetaError::invalid("k must be >= 1"));
    }
    if !(jitter >= 0.0) {
        return Err(DetaError::invalid("jitter must be >= 0"));
    }
    let mut rng = rng_for(derive_seed(seed, iteration as u64));
    match &episode.region_source {
        RegionSource::Synthetic(model) => {
            let dm = uncast(&model.distractor_mean);
            let spread = model.region_spread.as_f64();
            Ok(model
                .centers
                .iter()
                .zip(&model.distractor_mix)
                .map(|(c, mix)| {
                    draw_regions(&mut rng, &uncast(c), &dm, mix.as_f64(), spread, k)
                        .iter()
                        .map(|r| cast(r))
                        .collect()
                })
                .collect())
        }
        RegionSource::Stored => {
            let d = episode.feature_dim;
            let s = jitter;
            episode
                .support
                .iter()
                .map(|sample| {
                    let r = sample.region_features.len();
                    if r < k {
                        return Err(DetaError::invalid(format!(
                            "sample {} stores {r} regions, {k} requested",
                            sample.sample_id
                        )));
                    }
                    let picks = index::sample(&mut rng, r, k).into_vec();
                    Ok(picks
                        .into_iter()
                        .map(|j| {
                            let base = &sample.region_features[j];
                            if s == 0.0 {
                                return base.clone();
                            }
                            (0..d)
                                .map(|t| {
                                    base[t] + T::of(s * rng.sample::<f64, _>(StandardNormal))
                                })
                                .collect()
                        })
                        .collect())
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFile<T> {
    version: u32,
    feature_dim: usize,
    way: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    support: Vec<SupportRecord<T>>,
    queries: Vec<QueryRecord<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportRecord<T> {
    id: u64,
    label: usize,
    image_feature: Vec<T>,
    regions: Vec<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_tag: Option<NoiseTag>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord<T> {
    id: u64,
    label: usize,
    image_feature: Vec<T>,
}

fn map_json_err(e: serde_json::Error) -> DetaError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => DetaError::SchemaError(e.to_string()),
        _ => DetaError::ParseError(e.to_string()),
    }
}

/// Serializes an episode to the JSON file format. Regions written are the
/// currently stored ones.
pub fn episode_to_json<T: Scalar>(episode: &TaskEpisode<T>) -> Result<String> {
    let file = EpisodeFile {
        version: EPISODE_FILE_VERSION,
        feature_dim: episode.feature_dim,
        way: episode.way,
        seed: Some(episode.seed),
        support: episode
            .support
            .iter()
            .map(|s| SupportRecord {
                id: s.sample_id,
                label: s.label,
                image_feature: s.image_feature.clone(),
                regions: s.region_features.clone(),
                ground_truth_label: (s.ground_truth_label != s.label).then_some(s.ground_truth_label),
                noise_tag: (s.noise_tag != NoiseTag::Clean).then_some(s.noise_tag),
            })
            .collect(),
        queries: episode
            .queries
            .iter()
            .map(|q| QueryRecord {
                id: q.sample_id,
                label: q.ground_truth_label,
                image_feature: q.image_feature.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| DetaError::ParseError(e.to_string()))
}

pub fn episode_from_json<T: Scalar>(text: &str) -> Result<TaskEpisode<T>> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(map_json_err)?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == EPISODE_FILE_VERSION as u64 => {}
        Some(v) => {
            return Err(DetaError::SchemaError(format!("unsupported episode version {v}")));
        }
        None => return Err(DetaError::SchemaError("missing integer `version`".into())),
    }
    let file: EpisodeFile<T> = serde_json::from_value(raw).map_err(map_json_err)?;
    let episode = TaskEpisode {
        way: file.way,
        feature_dim: file.feature_dim,
        support: file
            .support
            .into_iter()
            .map(|r| SupportSample {
                sample_id: r.id,
                label: r.label,
                image_feature: r.image_feature,
                region_features: r.regions,
                ground_truth_label: r.ground_truth_label.unwrap_or(r.label),
                noise_tag: r.noise_tag.unwrap_or(NoiseTag::Clean),
            })
            .collect(),
        queries: file
            .queries
            .into_iter()
            .map(|r| QuerySample {
                sample_id: r.id,
                image_feature: r.image_feature,
                ground_truth_label: r.label,
            })
            .collect(),
        seed: file.seed.unwrap_or(0),
        region_source: RegionSource::Stored,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn load_episode_file<T: Scalar>(path: impl AsRef<Path>) -> Result<TaskEpisode<T>> {
    let text = std::fs::read_to_string(path)?;
    episode_from_json(&text)
}

pub fn save_episode_file<T: Scalar>(episode: &TaskEpisode<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, episode_to_json(episode)?)?;
    Ok(())
}

/// Support indices grouped by observed label.
pub fn indices_by_class<T>(episode: &TaskEpisode<T>) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in episode.support.iter().enumerate() {
        map.entry(s.label).or_default().push(i);
    }
    map
}
