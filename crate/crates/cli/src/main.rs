use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffusion_density::bench::{
    emit_plots, run_case_streaming, score_mse_study, write_score_mse_csv, BpdReport, ExperimentConfig, ReportWriter,
};
use diffusion_density::densities::{
    bpd, read_meta_json, read_samples_csv, write_meta_json, write_samples_csv, DatasetMeta, Density,
};
use diffusion_density::diffusion::{train, write_trace_csv, DiffusionSchedule, ScoreNetwork, TimeInput};
use diffusion_density::numerics::Rng;
use diffusion_density::sampler::{
    langevin_sample, reverse_sde_sample, train_vanilla_sm, AnalyticScore, LangevinConfig, LearnedScore, SamplerConfig,
    TimeGrid,
};
use diffusion_density::wsnn::{read_checkpoint, write_checkpoint};
use diffusion_density::{Error, Result};

#[derive(Parser)]
#[command(
    name = "diffusion-density",
    version,
    about = "Diffusion-model density estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set K=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Diffusion,
    VanillaSm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Uniform,
    Geometric,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a training set from the configured ground-truth density.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples CSV; metadata goes to `<out>.meta.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a score network to a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "diffusion")]
        method: TrainMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint, or from the exact score of a dataset's density.
    Sample {
        #[arg(long, conflicts_with = "analytic", required_unless_present = "analytic")]
        model: Option<PathBuf>,
        /// Dataset metadata JSON whose density supplies the exact score.
        #[arg(long)]
        analytic: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        /// Euler–Maruyama steps (reverse SDE) or Langevin iterations.
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, value_enum, default_value = "uniform")]
        grid: Grid,
        /// Langevin step size for time-free models.
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bits per dimension of samples under a dataset's true density.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        /// Dataset metadata JSON written by gen-data.
        #[arg(long)]
        meta: PathBuf,
    },
    /// Full BPD benchmark; writes the report CSV and plots into `out-dir`.
    RunCase {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score MSE of trained networks across training sizes.
    ScoreMse {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2000)]
        n_mc: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw plots from a report CSV.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn meta_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn schedule_from_meta(meta: &BTreeMap<String, String>) -> Result<DiffusionSchedule> {
    let get = |k: &str| -> Result<f64> {
        meta.get(k)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks meta {k}")))?
            .parse()
            .map_err(|_| Error::Parse(format!("bad meta {k}")))
    };
    DiffusionSchedule::ou(get("t_min")?, get("t_max")?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, n, seed, out } => {
            let cfg = cfg.load()?;
            let density = cfg.density()?;
            let ds = density.sample_dataset(n, seed)?;
            write_samples_csv(BufWriter::new(File::create(&out)?), &ds.data)?;
            write_meta_json(BufWriter::new(File::create(meta_path(&out))?), &ds.meta)?;
            println!("wrote {} samples of dimension {} to {}", n, ds.dim(), out.display());
        }
        Command::Train {
            cfg,
            data,
            method,
            seed,
            out,
            trace,
        } => {
            let cfg = cfg.load()?;
            let x = read_samples_csv(BufReader::new(File::open(&data)?))?;
            let schedule = cfg.schedule()?;
            let mut rng = Rng::new(seed);
            let train_cfg = cfg.train_config(rng.split(1).next_u64());
            let (net, records, label) = match method {
                TrainMethod::Diffusion => {
                    let init = ScoreNetwork::mlp(x.cols(), &cfg.hidden(), cfg.time_input, cfg.bound, &mut rng)?;
                    let (net, records) = train(&x, &init, &schedule, &train_cfg)?;
                    (net, records, "diffusion")
                }
                TrainMethod::VanillaSm => {
                    let init = ScoreNetwork::mlp(x.cols(), &cfg.hidden(), TimeInput::None, cfg.bound, &mut rng)?;
                    let (params, records) = train_vanilla_sm(&x, &init.arch, &init.params, &train_cfg)?;
                    (ScoreNetwork { params, ..init }, records, "vanilla-sm")
                }
            };
            let meta: BTreeMap<String, String> = [
                ("method", label.to_string()),
                ("time_input", net.time_input.name().to_string()),
                ("t_min", format!("{:?}", schedule.t_min())),
                ("t_max", format!("{:?}", schedule.t_max())),
                ("seed", seed.to_string()),
                ("steps", cfg.steps.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            write_checkpoint(BufWriter::new(File::create(&out)?), &net.arch, &net.params, &meta)?;
            if let Some(path) = trace {
                write_trace_csv(BufWriter::new(File::create(path)?), &records)?;
            }
            let last = records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
            println!(
                "trained {label} model, final epoch loss {last:.6}, checkpoint {}",
                out.display()
            );
        }
        Command::Sample {
            model,
            analytic,
            n,
            steps,
            grid,
            step_size,
            seed,
            out,
        } => {
            let grid = match grid {
                Grid::Uniform => TimeGrid::Uniform,
                Grid::Geometric => TimeGrid::Geometric,
            };
            let samples = if let Some(meta_file) = analytic {
                let meta = read_meta_json(BufReader::new(File::open(meta_file)?))?;
                let density = Density::from_spec(&meta.density)?;
                let schedule = DiffusionSchedule::default();
                let score = AnalyticScore::new(&density, &schedule)?;
                reverse_sde_sample(
                    &score,
                    &schedule,
                    &SamplerConfig {
                        n_steps: steps,
                        n_samples: n,
                        seed,
                        grid,
                    },
                )?
            } else {
                let path = model.expect("clap enforces model or analytic");
                let (arch, params, meta) = read_checkpoint(BufReader::new(File::open(path)?))?;
                let time_input = TimeInput::parse(meta.get("time_input").map(String::as_str).unwrap_or("time"))?;
                let schedule = schedule_from_meta(&meta)?;
                let net = ScoreNetwork::new(arch, params, time_input)?;
                let score = LearnedScore::new(&net, &schedule);
                if time_input == TimeInput::None {
                    langevin_sample(
                        &score,
                        &LangevinConfig {
                            step_size,
                            n_steps: steps,
                            n_samples: n,
                            seed,
                        },
                    )?
                } else {
                    reverse_sde_sample(
                        &score,
                        &schedule,
                        &SamplerConfig {
                            n_steps: steps,
                            n_samples: n,
                            seed,
                            grid,
                        },
                    )?
                }
            };
            write_samples_csv(BufWriter::new(File::create(&out)?), &samples)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Evaluate { samples, meta } => {
            let meta: DatasetMeta = read_meta_json(BufReader::new(File::open(meta)?))?;
            let density = Density::from_spec(&meta.density)?;
            let x = read_samples_csv(BufReader::new(File::open(samples)?))?;
            let est = bpd(&density, &x)?;
            println!("bpd,std_error,n,infinite");
            println!("{:?},{:?},{},{}", est.bpd, est.std_error, x.rows(), est.infinite);
        }
        Command::RunCase { cfg, out_dir } => {
            let cfg = cfg.load()?;
            fs::create_dir_all(&out_dir)?;
            // partial rows land in this file as soon as each cell finishes
            let mut writer = ReportWriter::new(File::create(out_dir.join("bpd_report.csv"))?)?;
            let report = run_case_streaming(&cfg, |row| {
                eprintln!(
                    "{} n={} rep={} bpd={:?} {}",
                    row.method.name(),
                    row.n,
                    row.repetition,
                    row.bpd,
                    row.status
                );
                writer.push(row)
            })?;
            drop(writer);
            for f in emit_plots(&report, &out_dir)? {
                println!("{}", f.display());
            }
        }
        Command::ScoreMse { cfg, n_mc, out } => {
            let cfg = cfg.load()?;
            let rows = score_mse_study(&cfg, n_mc)?;
            write_score_mse_csv(BufWriter::new(File::create(&out)?), &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Plot { report, out_dir } => {
            let report = BpdReport::read_csv(BufReader::new(File::open(report)?))?;
            for f in emit_plots(&report, &out_dir)? {
                println!("{}", f.display());
            }
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
