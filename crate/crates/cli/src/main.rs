use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use protoad::data::{load_dataset, synth_generate, SynthConfig};
use protoad::finch::DEFAULT_MAX_CLUSTERS;
use protoad::metrics::{DEFAULT_FPR_LIMIT, DEFAULT_PRO_THRESHOLDS};
use protoad::pipeline::{evaluate, fit, score_file, with_workers, EvalConfig, FitConfig};
use protoad::scoring::{write_heatmap_pgm, write_heatmap_png, DEFAULT_OUTPUT_SIZE, DEFAULT_SIGMA};
use protoad::{load_bank, save_bank, write_tensor, PostprocessConfig};

#[derive(Parser)]
#[command(
    name = "protoad",
    version,
    about = "Prototype-bank anomaly detection on patch features"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Post {
    /// Gaussian smoothing sigma in output pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Side of the square output map.
    #[arg(long, default_value_t = DEFAULT_OUTPUT_SIZE)]
    out_size: usize,
}

impl Post {
    fn config(&self) -> PostprocessConfig {
        PostprocessConfig::square(self.out_size, self.sigma)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn a prototype bank from <root>/<category>/train/good.
    Fit {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long, default_value_t = DEFAULT_MAX_CLUSTERS)]
        max_clusters: usize,
        /// Backbone stages the features were taken from (recorded only).
        #[arg(long, default_value = "1,2,3")]
        feature_levels: String,
        #[command(flatten)]
        post: Post,
        /// Bank file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one feature tensor and write its heatmap.
    Score {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        post: Post,
        /// Directory for heatmap.png and anomaly_map.pft.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and write a metrics report.
    Eval {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        bank: PathBuf,
        #[command(flatten)]
        post: Post,
        #[arg(long, default_value_t = DEFAULT_FPR_LIMIT)]
        fpr_limit: f64,
        #[arg(long, default_value_t = DEFAULT_PRO_THRESHOLDS)]
        pro_thresholds: usize,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic feature-space dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        category: String,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test_normal: usize,
        #[arg(long, default_value_t = 20)]
        n_test_anomalous: usize,
        #[arg(long, default_value_t = 32)]
        grid: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Defect rotation in degrees.
        #[arg(long, default_value_t = 45.0)]
        shift: f64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Print a bank's shape and metadata.
    InspectBank {
        #[arg(long)]
        bank: PathBuf,
    },
}

fn main() -> ExitCode {
    let level = std::env::var("PROTOAD_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let workers = cli.workers;
    let result = with_workers(workers, move || run(cli.command))
        .map_err(anyhow::Error::from)
        .and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit {
            root,
            category,
            max_clusters,
            feature_levels,
            post,
            out,
        } => {
            if max_clusters == 0 {
                bail!("--max-clusters must be positive");
            }
            let index = load_dataset(&root, &category)?;
            let cfg = FitConfig {
                max_clusters,
                feature_levels,
                postprocess: post.config(),
            };
            let outcome = fit(&index, &cfg)?;
            println!("patch vectors: {}", outcome.n_points);
            if outcome.n_zero_cells > 0 {
                println!("zero-norm cells skipped: {}", outcome.n_zero_cells);
            }
            for (t, c) in outcome.level_counts.iter().enumerate() {
                println!("level {t}: {c} clusters");
            }
            let fallback = if outcome.fallback {
                " (no level below the limit)"
            } else {
                ""
            };
            println!("selected level: {}{fallback}", outcome.selected_level);
            println!("prototypes: {}", outcome.bank.len());
            println!("fit time: {:.2}s", outcome.elapsed.as_secs_f64());
            save_bank(&outcome.bank, &out)?;
            println!("bank written to {}", out.display());
        }
        Command::Score {
            bank,
            features,
            post,
            out,
        } => {
            let bank = load_bank(&bank)?;
            let map = score_file(&features, &bank, &post.config())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let png = out.join("heatmap.png");
            if let Err(e) = write_heatmap_png(&map.pixels, &png) {
                log::warn!("PNG output failed ({e}); writing PGM instead");
                write_heatmap_pgm(&map.pixels, out.join("heatmap.pgm"))?;
            }
            write_tensor(&map.pixels, out.join("anomaly_map.pft"))?;
            if !map.zero_cells.is_empty() {
                log::warn!("{} zero-norm cells scored as 1", map.zero_cells.len());
            }
            println!("S = {:.6}", map.image_score);
        }
        Command::Eval {
            root,
            category,
            bank,
            post,
            fpr_limit,
            pro_thresholds,
            out,
        } => {
            let bank = load_bank(&bank)?;
            let index = load_dataset(&root, &category)?;
            let cfg = EvalConfig {
                postprocess: post.config(),
                fpr_limit,
                pro_thresholds,
            };
            let outcome = evaluate(&index, &bank, &cfg)?;
            outcome.report.write(&out)?;
            print!("{}", outcome.report.to_text());
        }
        Command::Synth {
            out,
            seed,
            category,
            n_train,
            n_test_normal,
            n_test_anomalous,
            grid,
            channels,
            shift,
            force,
        } => {
            if !force && non_empty(&out)? {
                bail!(
                    "{} is not empty; pass --force to write into it",
                    out.display()
                );
            }
            let cfg = SynthConfig {
                category,
                seed,
                n_train,
                n_test_normal,
                n_test_anomalous,
                grid: (grid, grid),
                channels,
                defect_shift_deg: shift,
                ..SynthConfig::default()
            };
            let index = synth_generate(&cfg, &out)?;
            let base = out.join(&cfg.category);
            println!("{}", base.display());
            println!(
                "  train/good: {} tensors {grid}x{grid}x{channels}",
                index.train_normal.len()
            );
            println!(
                "  test/good: {}",
                index.test_items.len() - index.n_anomalous()
            );
            if index.n_anomalous() > 0 {
                println!(
                    "  test/synthetic_defect: {} (masks in ground_truth/synthetic_defect)",
                    index.n_anomalous()
                );
            }
        }
        Command::InspectBank { bank } => {
            let bank = load_bank(&bank)?;
            println!("prototypes: {}", bank.len());
            println!("channels: {}", bank.dim());
            print!("{}", bank.meta().to_text());
        }
    }
    Ok(())
}

fn non_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e).with_context(|| format!("reading {}", dir.display())),
    }
}
