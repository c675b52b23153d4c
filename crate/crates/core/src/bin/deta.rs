use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deta::adaptation::{adapt_task, adapt_task_traced, AdaptationConfig};
use deta::classifier::{evaluate, evaluate_baseline};
use deta::cora::write_weight_trace_csv;
use deta::episodes::{load_episode_file, EpisodeShape, SyntheticNoiseConfig};
use deta::harness::{emit_report, run_benchmark, Ablation, BenchmarkConfig, NoiseType, ReportFormat};
use deta::losses::LossHyperparams;
use deta::{DetaError, TaskEpisode};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "deta", version, about = "Denoised few-shot task adaptation over pre-extracted features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct AdaptArgs {
    #[arg(long, default_value_t = 40)]
    iterations: usize,
    #[arg(long = "k-regions", default_value_t = 2)]
    k_regions: usize,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.07)]
    pi: f64,
    #[arg(long, default_value_t = 0.7)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Per-coordinate jitter added to subsampled stored regions.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl AdaptArgs {
    fn config(&self) -> AdaptationConfig {
        AdaptationConfig {
            iterations: self.iterations,
            learning_rate: self.lr,
            k_regions: self.k_regions,
            momentum: self.gamma,
            hp: LossHyperparams {
                tau: self.tau,
                pi: self.pi,
                beta: self.beta,
            },
            seed: self.seed,
            region_jitter: self.jitter,
            ..AdaptationConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep noise ratios and ablations over seeded synthetic episodes.
    Bench {
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 10)]
        shot: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 15)]
        queries: usize,
        #[arg(long = "noise-type", default_value = "label")]
        noise_type: String,
        #[arg(long = "noise-ratios", value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7")]
        noise_ratios: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// One or more of full, no-cora, no-local, no-global, no-ma, no-out-of-class, none.
        #[arg(long, value_delimiter = ',', default_value = "full")]
        ablation: Vec<String>,
        #[arg(long = "class-separation")]
        class_separation: Option<f64>,
        #[arg(long = "distractor-mix")]
        distractor_mix: Option<f64>,
        #[arg(long = "sample-spread")]
        sample_spread: Option<f64>,
        #[arg(long = "region-spread")]
        region_spread: Option<f64>,
        #[arg(long = "nuisance-scale")]
        nuisance_scale: Option<f64>,
        #[arg(long = "nuisance-rank")]
        nuisance_rank: Option<usize>,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Adapt on one episode file and write the adapted state as JSON.
    Adapt {
        #[arg(long)]
        episode: PathBuf,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-iteration region and image weights for one episode file.
    Weights {
        #[arg(long)]
        episode: PathBuf,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_for(err: &DetaError) -> u8 {
    match err {
        DetaError::DivergenceError { .. } => EXIT_DIVERGED,
        DetaError::IoError(_) => 1,
        _ => EXIT_CONFIG,
    }
}

fn fail(err: DetaError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_for(&err))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Bench {
            way,
            shot,
            dim,
            queries,
            noise_type,
            noise_ratios,
            episodes,
            ablation,
            class_separation,
            distractor_mix,
            sample_spread,
            region_spread,
            nuisance_scale,
            nuisance_rank,
            adapt,
            out,
            format,
        } => {
            let parsed = (|| -> Result<_, DetaError> {
                let noise_type: NoiseType = noise_type.parse()?;
                let format: ReportFormat = format.parse()?;
                let ablations = ablation.iter().map(|a| a.parse()).collect::<Result<Vec<Ablation>, _>>()?;
                let mut noise = SyntheticNoiseConfig::default();
                if let Some(s) = class_separation {
                    noise.class_separation = s;
                }
                if let Some(m) = distractor_mix {
                    noise.distractor_mix = m;
                }
                if let Some(v) = sample_spread {
                    noise.sample_spread = v;
                }
                if let Some(v) = region_spread {
                    noise.region_spread = v;
                }
                if let Some(v) = nuisance_scale {
                    noise.nuisance_scale = v;
                }
                if let Some(v) = nuisance_rank {
                    noise.nuisance_rank = v;
                }
                let cfg = BenchmarkConfig {
                    episodes_per_cell: episodes,
                    shape: EpisodeShape {
                        way,
                        shot,
                        k_regions: adapt.k_regions,
                        dim,
                        queries_per_class: queries,
                    },
                    noise,
                    noise_type,
                    noise_ratios,
                    ablations,
                    adaptation: adapt.config(),
                    master_seed: adapt.seed,
                };
                cfg.validate()?;
                Ok((cfg, format))
            })();
            let (cfg, format) = match parsed {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            let report = match run_benchmark(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            if let Err(e) = emit_report(&report, format, &out) {
                return fail(e);
            }
            for c in &report.cells {
                eprintln!(
                    "ratio {:.2} {:<16} baseline {:.4} ± {:.4}  deta {:.4} ± {:.4}  delta {:+.4}  failed {}",
                    c.noise_ratio,
                    c.ablation.name(),
                    c.baseline_mean,
                    c.baseline_ci95,
                    c.deta_mean,
                    c.deta_ci95,
                    c.delta_mean,
                    c.n_failed
                );
            }
            if !report.fully_failed_cells().is_empty() {
                return ExitCode::from(EXIT_DIVERGED);
            }
            ExitCode::SUCCESS
        }
        Command::Adapt { episode, adapt, out } => {
            let run = || -> Result<(), DetaError> {
                let ep: TaskEpisode = load_episode_file(&episode)?;
                let state = adapt_task(&ep, &adapt.config())?;
                if !ep.queries.is_empty() {
                    let base = evaluate_baseline(&ep)?.accuracy;
                    let acc = evaluate(&ep, &state)?;
                    eprintln!("baseline accuracy {base:.4}, adapted accuracy {acc:.4}");
                }
                std::fs::write(&out, state.to_json()?)?;
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Weights { episode, adapt, out } => {
            let run = || -> Result<(), DetaError> {
                let ep: TaskEpisode = load_episode_file(&episode)?;
                let mut rows = Vec::new();
                adapt_task_traced(&ep, &adapt.config(), Some(&mut rows))?;
                let file = std::fs::File::create(&out)?;
                write_weight_trace_csv(&rows, std::io::BufWriter::new(file))
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
    }
}
