//! `deltadeno` — generate anomaly images and masks from a single normal
//! image by contrasting two prompt-conditioned denoising branches.
//!
//! Exit code 0 on success; on failure a machine-readable error JSON is
//! printed to stderr and the exit code is nonzero.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use deltadeno_core::error::Error;
use deltadeno_core::evalkit::{self, SweepScenario, ToyScenario};
use deltadeno_core::grid::ImageGrid;
use deltadeno_core::pipeline::{self, artifacts, DeltaDenoConfig};

#[derive(Parser)]
#[command(
    name = "deltadeno",
    version,
    about = "Training-free zero-shot anomaly generation by delta denoising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one anomaly image + mask from a normal image.
    Generate {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Normal input image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a dataset from a directory or comma-separated list of images.
    Batch {
        #[arg(long)]
        config: PathBuf,
        /// Directory of PNGs, or a comma-separated list of PNG paths.
        #[arg(long)]
        images: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum concurrent items.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print metadata and mask statistics for a result directory.
    Inspect {
        /// A run directory produced by `generate` or `batch`.
        dir: PathBuf,
    },
    /// Run a hyperparameter sweep on a fixed toy scenario and write a report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Scenario: "analytic-rect" or "synthetic-attention".
        #[arg(long, default_value = "analytic-rect")]
        scenario: String,
        /// Repeatable `name=v1,v2,...` parameter grids (see docs for names).
        #[arg(long = "param")]
        params: Vec<String>,
        /// Report directory (defaults to the config's output directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let payload = serde_json::json!({
            "error": { "kind": e.kind(), "message": e.to_string() }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<DeltaDenoConfig, Error> {
    let mut cfg = DeltaDenoConfig::from_file(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            config,
            image,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            let img = artifacts::read_image_png(&image)?;
            let result = pipeline::generate(&cfg, &img)?;
            let dir = result.artifact_dir.as_ref().expect("generate persists");
            println!("run directory: {}", dir.display());
            println!("normal prompt:  {}", result.metadata.normal_prompt);
            println!("anomaly prompt: {}", result.metadata.anomaly_prompt);
            println!(
                "mask: {} px at image resolution ({} latent px), mid mask {} px",
                result.metadata.mask_stats.final_pixels_image,
                result.metadata.mask_stats.final_pixels_latent,
                result.metadata.mask_stats.mid_pixels,
            );
            println!("elapsed: {:.1} ms", result.timing_ms);
            Ok(())
        }
        Command::Batch {
            config,
            images,
            out,
            seed,
            workers,
        } => {
            let cfg = load_config(&config, out, seed)?;
            let list = collect_images(&images)?;
            println!("{} input image(s), {} item(s)", list.len(), list.len() * cfg.batch_count);
            let manifest = pipeline::generate_batch(&cfg, &list, workers)?;
            let failed = manifest.rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "wrote {} manifest rows to {} ({} failed)",
                manifest.rows.len(),
                cfg.output_dir.join("manifest.json").display(),
                failed
            );
            Ok(())
        }
        Command::Inspect { dir } => {
            let report = pipeline::inspect(&dir)?;
            println!("backend:        {}", report.metadata.backend.name);
            println!("normal prompt:  {}", report.metadata.normal_prompt);
            println!("anomaly prompt: {}", report.metadata.anomaly_prompt);
            println!("seed:           {}", report.metadata.seed);
            println!(
                "stage plan:     t_start {} | {} steps | mid after {}",
                report.metadata.stage_plan.t_start,
                report.metadata.stage_plan.executed_timesteps.len(),
                report.metadata.stage_plan.mid_index
            );
            println!(
                "flags:          fg_fallback={} bias={} inpaint={} refined={}",
                report.metadata.flags.foreground_fallback,
                report.metadata.flags.attention_bias_active,
                report.metadata.flags.late_inpaint_active,
                report.metadata.flags.refinement_applied
            );
            println!(
                "final mask:     {} px ({:.2}% of image)",
                report.mask_pixels,
                100.0 * report.mask_fraction
            );
            println!("mid mask:       {} px", report.mid_mask_pixels);
            println!(
                "S_final:        total {:.4}, max {:.4}",
                report.s_final_total, report.s_final_max
            );
            println!("artifacts ok:   {}", report.all_artifacts_present);
            if !report.all_artifacts_present {
                return Err(Error::Artifact(
                    "one or more indexed artifacts are missing".into(),
                ));
            }
            Ok(())
        }
        Command::Sweep {
            config,
            scenario,
            params,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out.clone(), seed)?;
            let bundle = build_scenario(&scenario, cfg.seed)?;
            let grid = parse_param_grid(&params)?;
            let cells = evalkit::sweep(&cfg, &grid, &bundle)?;

            let report_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&report_dir)?;
            let csv_path = report_dir.join("sweep.csv");
            evalkit::write_sweep_csv(&cells, &csv_path)?;
            let table = evalkit::sweep_table(&cells);
            std::fs::write(report_dir.join("summary.txt"), &table)?;
            evalkit::render_iou_chart(&cells, &report_dir.join("iou_chart.png"))?;

            print!("{table}");
            println!("report written to {}", report_dir.display());
            Ok(())
        }
    }
}

fn collect_images(spec: &str) -> Result<Vec<(String, ImageGrid)>, Error> {
    let path = Path::new(spec);
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|x| x.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        v.sort();
        v
    } else {
        spec.split(',')
            .map(|s| PathBuf::from(s.trim()))
            .filter(|p| !p.as_os_str().is_empty())
            .collect()
    };
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no PNG images found in {spec:?}"
        )));
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        out.push((name, artifacts::read_image_png(&f)?));
    }
    Ok(out)
}

fn build_scenario(name: &str, seed: u64) -> Result<SweepScenario, Error> {
    match name {
        "analytic-rect" => ToyScenario::rectangle(seed, 0.05)?.bundle(),
        "synthetic-attention" => evalkit::attention_scenario(seed),
        other => Err(Error::InvalidConfig(format!(
            "unknown scenario {other:?}; expected analytic-rect or synthetic-attention"
        ))),
    }
}

fn parse_param_grid(params: &[String]) -> Result<Vec<(String, Vec<serde_json::Value>)>, Error> {
    let mut grid = Vec::with_capacity(params.len());
    for p in params {
        let (name, values) = p.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("parameter {p:?} is not of the form name=v1,v2"))
        })?;
        let mut parsed = Vec::new();
        for v in values.split(',') {
            let value: serde_json::Value = serde_json::from_str(v.trim()).map_err(|_| {
                Error::InvalidConfig(format!("cannot parse {v:?} as a JSON value"))
            })?;
            parsed.push(value);
        }
        if parsed.is_empty() {
            return Err(Error::InvalidConfig(format!("parameter {name:?} has no values")));
        }
        grid.push((name.to_string(), parsed));
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one --param name=v1,v2".into(),
        ));
    }
    Ok(grid)
}
