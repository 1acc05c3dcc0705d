use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use csattn_core::config::TrainConfig;
use csattn_core::gradsuite::{self, Module};
use csattn_core::net::{count_flops, Net};
use csattn_core::{ablation, checkpoint, data, infer, plot, train};

#[derive(Parser)]
#[command(name = "csattn", version, about = "Continuous scaling attention restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the configuration.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore one PNG with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network configuration, for checkpoints saved without one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the differentiable operations.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_module)]
        module: Module,
    },
    /// Parameter and FLOP counts of the configured network.
    Count {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [256, 256])]
        hw: Vec<usize>,
        /// Writes the per-operation breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train each ablation row under the configured recipe.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated rows (a-f, stacked, att1, att2, noscale, relu, leaky_relu, silu) or `all`.
        #[arg(long, default_value = "all")]
        rows: String,
        /// Defaults to the configured `output_dir`, else `ablation/`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Print the cost table without training.
        #[arg(long)]
        cost_only: bool,
    },
    /// Render training-log columns as an SVG line chart.
    Plot {
        /// Training logs; a series is labelled by `path=label` or by its directory name.
        #[arg(required = true)]
        logs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "loss")]
        column: String,
        #[arg(long)]
        log_y: bool,
        #[arg(long)]
        title: Option<String>,
    },
}

fn parse_module(s: &str) -> Result<Module, String> {
    s.parse().map_err(|e: csattn_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            output_dir,
            seed,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = train::train(&cfg)?;
            let m = &out.eval.metrics;
            println!(
                "final loss {:.6}  psnr {:.3} dB  ssim {:.4}  mae {:.5}  ({:.1} s)",
                out.eval.loss, m.psnr, m.ssim, m.mae, out.seconds
            );
        }
        Command::Infer {
            ckpt,
            input,
            out,
            config,
        } => {
            let saved = checkpoint::load(&ckpt)?;
            let net_cfg = match (saved.config, config) {
                (_, Some(path)) => TrainConfig::from_file(&path)?.net,
                (Some(c), None) => c,
                (None, None) => bail!("{} holds no network configuration; pass --config", ckpt.display()),
            };
            let (net, _) = Net::build::<f32>(&net_cfg, 0)?;
            let img = data::read_png(&input)?;
            let restored = infer::restore(&net, &saved.params, &img)?;
            data::write_png(&out, &restored)?;
        }
        Command::Gradcheck { module } => {
            let results = gradsuite::run(module)?;
            let failed = results.iter().filter(|r| !r.report.passed()).count();
            for r in &results {
                println!("{r}");
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Count { config, hw, csv } => {
            let cfg = TrainConfig::from_file(&config)?;
            let report = count_flops(&cfg.net, hw[0], hw[1])?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                write(&path, &report.to_csv())?;
            }
        }
        Command::Ablate {
            config,
            rows,
            output_dir,
            cost_only,
        } => {
            let cfg = TrainConfig::from_file(&config)?;
            let rows = ablation::parse_rows(&rows)?;
            if cost_only {
                println!("row,label,params,params_delta,flops,flops_delta");
                for r in ablation::cost_table(&cfg.net, &rows, cfg.patch, cfg.patch)? {
                    println!(
                        "{},\"{}\",{},{},{},{}",
                        r.key, r.label, r.params, r.params_delta, r.flops, r.flops_delta
                    );
                }
                return Ok(ExitCode::SUCCESS);
            }
            let dir = output_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("ablation"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let data = cfg.data.load(cfg.patch)?;
            let results = ablation::run(&cfg, &data, &rows, Some(&dir))?;
            print!("{}", ablation::summary_csv(&results));
        }
        Command::Plot {
            logs,
            out,
            column,
            log_y,
            title,
        } => {
            let series = logs
                .iter()
                .map(|arg| {
                    let (path, label) = match arg.split_once('=') {
                        Some((p, l)) => (PathBuf::from(p), l.to_string()),
                        None => (PathBuf::from(arg), default_label(Path::new(arg))),
                    };
                    plot::read_series(&path, &column, label)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let svg = plot::line_chart(&series, title.as_deref().unwrap_or(&column), &column, log_y)?;
            write(&out, &svg)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn default_label(path: &Path) -> String {
    path.parent()
        .and_then(|d| d.file_name())
        .or_else(|| path.file_stem())
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
