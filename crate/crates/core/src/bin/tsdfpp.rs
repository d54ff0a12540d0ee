use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, ValueEnum};

use tsdfpp::pipeline::{compare_modes, export_scene, run_pipeline, InputSource, PipelineConfig, PipelineError, RunOutput};
use tsdfpp::scene::load_scene;
use tsdfpp::voxel::{GridParams, MapMode};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Tsdfpp,
    Standard,
}

/// Multi-object layered TSDF mapping of simulated or recorded RGB-D sequences.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Debug, Parser)]
#[command(version, group(ArgGroup::new("input").required(true).args(["scene", "dataset"])))]
struct Cli {
    /// Scene script (TOML) rendered by the built-in simulator.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Recorded sequence directory (camera.toml, trajectory.txt, depth/, labels/, masks/).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Detector mask file pattern inside the dataset, e.g. "masks/%06d.pgm".
    #[arg(long, requires = "dataset")]
    masks: Option<String>,
    #[arg(long, value_enum, default_value = "tsdfpp")]
    mode: Mode,
    /// Voxel edge length in meters.
    #[arg(long, default_value_t = 0.01)]
    voxel_size: f64,
    /// Truncation distance in voxels.
    #[arg(long, default_value_t = 10.0)]
    truncation_mult: f64,
    /// Minimum segment/mask overlap for a segment to take the mask's instance.
    #[arg(long)]
    tau_overlap: Option<f64>,
    /// Overrides the scene's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for meshes, trajectories and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "compare")]
    save_map: Option<PathBuf>,
    #[arg(long, conflicts_with = "compare")]
    load_map: Option<PathBuf>,
    /// Run both map modes on the same frames and report the difference.
    #[arg(long)]
    compare: bool,
    /// Also write the simulated frames as a dataset directory.
    #[arg(long, requires = "scene")]
    export_frames: Option<PathBuf>,
}

fn summarize(out: &RunOutput) {
    let r = &out.report;
    println!(
        "{}: {} frames, {} objects, peak {} blocks",
        r.mode.label(),
        r.frames,
        r.objects.len(),
        r.peak_allocated_blocks
    );
    if let Some(e) = &r.evaluation {
        println!(
            "  revealed completeness {:.4} ({} / {} samples), {} holes, audit {} checked / {} changed",
            e.revealed.completeness, e.revealed.covered, e.revealed.samples, e.revealed.holes, e.audit.checked, e.audit.changed
        );
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let grid = GridParams::with_truncation_multiple(cli.voxel_size, cli.truncation_mult)
        .map_err(|e| PipelineError::Config(format!("--voxel-size/--truncation-mult: {e}")))?;
    let source = match (&cli.scene, &cli.dataset) {
        (Some(path), _) => {
            let plan = load_scene(path).map_err(|e| PipelineError::Config(e.to_string()))?;
            if let Some(dir) = &cli.export_frames {
                export_scene(&plan.scene, cli.seed, dir)?;
                log::info!("wrote {} frames to {}", plan.scene.frames, dir.display());
            }
            InputSource::Scene(plan)
        }
        (None, Some(root)) => InputSource::Dataset {
            root: root.clone(),
            mask_pattern: cli.masks.clone(),
        },
        (None, None) => unreachable!("clap requires an input"),
    };
    let mode = match cli.mode {
        Mode::Tsdfpp => MapMode::TsdfPlusPlus,
        Mode::Standard => MapMode::StandardTsdf,
    };
    let mut cfg = PipelineConfig::new(source, mode).with_grid(grid);
    if let Some(tau) = cli.tau_overlap {
        cfg.mapper.frontend.tau_overlap = tau;
    }
    cfg.seed = cli.seed;
    cfg.output = cli.out;
    cfg.load_map = cli.load_map;
    cfg.save_map = cli.save_map;
    if cli.compare {
        let (report, plus, standard) = compare_modes(&cfg)?;
        summarize(&plus);
        summarize(&standard);
        if let Some(d) = report.delta.completeness {
            println!("completeness delta (tsdfpp - standard): {d:+.4}");
        }
    } else {
        summarize(&run_pipeline(&cfg)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
