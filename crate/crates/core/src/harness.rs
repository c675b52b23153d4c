//! Benchmark driver: sweeps noise ratios and ablations over seeded synthetic
//! episodes, pairs every DETA run with the plain nearest-centroid baseline on
//! the same episode, and aggregates the results.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_task, AdaptationConfig, ComponentSwitches};
use crate::classifier::{evaluate, evaluate_baseline};
use crate::cora::csv_err;
use crate::episodes::{derive_seed, generate_synthetic_episode, EpisodeShape, NoiseTag, SyntheticNoiseConfig, TaskEpisode};
use crate::error::{DetaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    None,
    Label,
    Image,
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseType::None => "none",
            NoiseType::Label => "label",
            NoiseType::Image => "image",
        })
    }
}

impl FromStr for NoiseType {
    type Err = DetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseType::None),
            "label" => Ok(NoiseType::Label),
            "image" => Ok(NoiseType::Image),
            _ => Err(DetaError::invalid(format!("unknown noise type `{s}`"))),
        }
    }
}

/// Named component configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoCora,
    NoLocal,
    NoGlobal,
    NoMa,
    NoOutOfClass,
    /// Every component off; reproduces the baseline.
    None,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoCora,
        Ablation::NoLocal,
        Ablation::NoGlobal,
        Ablation::NoMa,
        Ablation::NoOutOfClass,
        Ablation::None,
    ];

    pub fn switches(self) -> ComponentSwitches {
        let full = ComponentSwitches::FULL;
        match self {
            Ablation::Full => full,
            Ablation::NoCora => ComponentSwitches { cora: false, ..full },
            Ablation::NoLocal => ComponentSwitches { local_loss: false, ..full },
            Ablation::NoGlobal => ComponentSwitches { global_loss: false, ..full },
            Ablation::NoMa => ComponentSwitches { accumulator: false, ..full },
            Ablation::NoOutOfClass => ComponentSwitches { out_of_class_term: false, ..full },
            Ablation::None => ComponentSwitches::NONE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCora => "no-cora",
            Ablation::NoLocal => "no-local",
            Ablation::NoGlobal => "no-global",
            Ablation::NoMa => "no-ma",
            Ablation::NoOutOfClass => "no-out-of-class",
            Ablation::None => "none",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = DetaError;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DetaError::invalid(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub episodes_per_cell: usize,
    pub shape: EpisodeShape,
    /// Base noise model; the swept ratio overrides the field selected by
    /// `noise_type`.
    pub noise: SyntheticNoiseConfig,
    pub noise_type: NoiseType,
    pub noise_ratios: Vec<f64>,
    pub ablations: Vec<Ablation>,
    pub adaptation: AdaptationConfig,
    pub master_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            episodes_per_cell: 100,
            shape: EpisodeShape::default(),
            noise: SyntheticNoiseConfig::default(),
            noise_type: NoiseType::Label,
            noise_ratios: vec![0.1, 0.3, 0.5, 0.7],
            ablations: vec![Ablation::Full],
            adaptation: AdaptationConfig::default(),
            master_seed: 7,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_cell == 0 {
            return Err(DetaError::invalid("episodes_per_cell must be >= 1"));
        }
        if self.noise_ratios.is_empty() || self.ablations.is_empty() {
            return Err(DetaError::invalid("need at least one noise ratio and one ablation"));
        }
        if let Some(r) = self.noise_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(DetaError::invalid(format!("noise ratio {r} outside [0, 1]")));
        }
        self.noise.validate()?;
        self.adaptation.validate()?;
        if self.shape.queries_per_class == 0 {
            return Err(DetaError::invalid("queries_per_class must be >= 1"));
        }
        Ok(())
    }

    /// Noise model of one cell.
    pub fn cell_noise(&self, ratio: f64) -> SyntheticNoiseConfig {
        let mut n = self.noise;
        match self.noise_type {
            NoiseType::None => {
                n.label_noise_ratio = 0.0;
                n.image_noise_ratio = 0.0;
            }
            NoiseType::Label => n.label_noise_ratio = ratio,
            NoiseType::Image => n.image_noise_ratio = ratio,
        }
        n
    }

    /// Seed of the `index`-th episode. Independent of the cell, so every
    /// noise ratio and ablation sees the same underlying features.
    pub fn episode_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub sample_id: u64,
    pub omega: f64,
    pub noise_tag: NoiseTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub cell_id: usize,
    pub seed: u64,
    pub noise_ratio: f64,
    pub ablation: Ablation,
    pub baseline_accuracy: f64,
    /// `None` when adaptation failed; see `error`.
    pub deta_accuracy: Option<f64>,
    pub error: Option<String>,
    pub weights: Vec<SampleWeight>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl EpisodeReport {
    /// Mean omega over clean samples minus mean omega over noisy ones, when
    /// both groups are present.
    pub fn omega_separation(&self) -> Option<f64> {
        let mean = |clean: bool| {
            let v: Vec<f64> = self
                .weights
                .iter()
                .filter(|w| (w.noise_tag == NoiseTag::Clean) == clean)
                .map(|w| w.omega)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(mean(true)? - mean(false)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell_id: usize,
    pub noise_type: NoiseType,
    pub noise_ratio: f64,
    pub ablation: Ablation,
    pub ablation_mask: u8,
    pub n_episodes: usize,
    pub n_failed: usize,
    pub baseline_mean: f64,
    pub baseline_ci95: f64,
    pub deta_mean: f64,
    pub deta_ci95: f64,
    pub delta_mean: f64,
    pub omega_separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cells: Vec<CellReport>,
    pub episodes: Vec<EpisodeReport>,
}

impl AggregateReport {
    pub fn cell(&self, ratio: f64, ablation: Ablation) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.noise_ratio == ratio && c.ablation == ablation)
    }

    pub fn episodes_of(&self, cell_id: usize) -> impl Iterator<Item = &EpisodeReport> {
        self.episodes.iter().filter(move |e| e.cell_id == cell_id)
    }

    /// Cells where every episode diverged.
    pub fn fully_failed_cells(&self) -> Vec<usize> {
        self.cells
            .iter()
            .filter(|c| c.n_episodes > 0 && c.n_failed == c.n_episodes)
            .map(|c| c.cell_id)
            .collect()
    }
}

/// Mean and 95% normal-approximation half-width (sample std / sqrt(n) * 1.96).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

fn run_variant(
    episode: &TaskEpisode<f64>,
    cfg: &AdaptationConfig,
    ablation: Ablation,
) -> Result<(f64, Vec<SampleWeight>, Option<f64>, Option<f64>)> {
    let cfg = AdaptationConfig {
        switches: ablation.switches(),
        ..*cfg
    };
    let state = adapt_task(episode, &cfg)?;
    let acc = evaluate(episode, &state)?;
    let weights = episode
        .support
        .iter()
        .map(|s| SampleWeight {
            sample_id: s.sample_id,
            omega: state.accumulator.omega.get(&s.sample_id).copied().unwrap_or(1.0),
            noise_tag: s.noise_tag,
        })
        .collect();
    let has_loss = cfg.switches.local_loss || cfg.switches.global_loss;
    let first = state.loss_trace.first().filter(|_| has_loss).map(|l| l.combined);
    let last = state.loss_trace.last().filter(|_| has_loss).map(|l| l.combined);
    Ok((acc, weights, first, last))
}

/// Runs every (noise ratio x ablation) cell. Episodes run in parallel; the
/// result order, and therefore every emitted byte, depends only on the config.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let n_abl = cfg.ablations.len();
    let mut episodes = Vec::new();
    let mut cells = Vec::new();

    for (ri, &ratio) in cfg.noise_ratios.iter().enumerate() {
        let noise = cfg.cell_noise(ratio);
        let per_episode: Vec<Vec<EpisodeReport>> = (0..cfg.episodes_per_cell)
            .into_par_iter()
            .map(|e| -> Result<Vec<EpisodeReport>> {
                let seed = cfg.episode_seed(e);
                let episode: TaskEpisode<f64> = generate_synthetic_episode(&cfg.shape, &noise, seed)?;
                let baseline = evaluate_baseline(&episode)?.accuracy;
                Ok(cfg
                    .ablations
                    .iter()
                    .enumerate()
                    .map(|(ai, &ablation)| {
                        let cell_id = ri * n_abl + ai;
                        let (deta, weights, init, fin, error) = match run_variant(&episode, &cfg.adaptation, ablation) {
                            Ok((a, w, i, f)) => (Some(a), w, i, f, None),
                            Err(err) => (None, Vec::new(), None, None, Some(err.to_string())),
                        };
                        EpisodeReport {
                            cell_id,
                            seed,
                            noise_ratio: ratio,
                            ablation,
                            baseline_accuracy: baseline,
                            deta_accuracy: deta,
                            error,
                            weights,
                            initial_loss: init,
                            final_loss: fin,
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;

        for (ai, &ablation) in cfg.ablations.iter().enumerate() {
            let cell_id = ri * n_abl + ai;
            let reports: Vec<&EpisodeReport> = per_episode.iter().map(|v| &v[ai]).collect();
            let ok: Vec<&&EpisodeReport> = reports.iter().filter(|r| r.deta_accuracy.is_some()).collect();
            let baseline: Vec<f64> = ok.iter().map(|r| r.baseline_accuracy).collect();
            let deta: Vec<f64> = ok.iter().filter_map(|r| r.deta_accuracy).collect();
            let delta: Vec<f64> = ok
                .iter()
                .map(|r| r.deta_accuracy.unwrap_or(0.0) - r.baseline_accuracy)
                .collect();
            let seps: Vec<f64> = ok.iter().filter_map(|r| r.omega_separation()).collect();
            let (baseline_mean, baseline_ci95) = mean_ci95(&baseline);
            let (deta_mean, deta_ci95) = mean_ci95(&deta);
            cells.push(CellReport {
                cell_id,
                noise_type: cfg.noise_type,
                noise_ratio: ratio,
                ablation,
                ablation_mask: ablation.switches().mask(),
                n_episodes: reports.len(),
                n_failed: reports.len() - ok.len(),
                baseline_mean,
                baseline_ci95,
                deta_mean,
                deta_ci95,
                delta_mean: mean_ci95(&delta).0,
                omega_separation: (!seps.is_empty()).then(|| mean_ci95(&seps).0),
            });
        }
        episodes.extend(per_episode.into_iter().flatten());
    }
    episodes.sort_by_key(|e| e.cell_id);
    Ok(AggregateReport { cells, episodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = DetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(DetaError::invalid(format!("unknown report format `{s}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "cell_id",
    "noise_type",
    "noise_ratio",
    "ablation_mask",
    "n_episodes",
    "baseline_mean",
    "baseline_ci95",
    "deta_mean",
    "deta_ci95",
    "delta_mean",
    "omega_separation",
];

pub fn write_report_csv<W: Write>(report: &AggregateReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for c in &report.cells {
        w.write_record([
            c.cell_id.to_string(),
            c.noise_type.to_string(),
            c.noise_ratio.to_string(),
            c.ablation_mask.to_string(),
            c.n_episodes.to_string(),
            c.baseline_mean.to_string(),
            c.baseline_ci95.to_string(),
            c.deta_mean.to_string(),
            c.deta_ci95.to_string(),
            c.delta_mean.to_string(),
            c.omega_separation.map_or_else(String::new, |v| v.to_string()),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_to_json(report: &AggregateReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| DetaError::ParseError(e.to_string()))
}

pub fn report_from_json(text: &str) -> Result<AggregateReport> {
    serde_json::from_str(text).map_err(|e| DetaError::ParseError(e.to_string()))
}

pub fn emit_report(report: &AggregateReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    match format {
        ReportFormat::Csv => write_report_csv(report, &mut out)?,
        ReportFormat::Json => out.write_all(report_to_json(report)?.as_bytes())?,
    }
    out.flush()?;
    Ok(())
}
