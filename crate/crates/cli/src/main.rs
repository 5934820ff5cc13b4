use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plslam::config::RunConfig;
use plslam::eval::evaluate_trajectory;
use plslam::ggs::{compute_ggs_with, ggs_dissimilarity};
use plslam::io::{load_sequence, read_gray, read_tum, write_sequence, LoadOptions};
use plslam::pipeline::{run_sequence, PipelineError};
use plslam::synth::{generate_scene, SceneSpec};

#[derive(Parser)]
#[command(name = "plslam", version, about = "Stereo point-and-line SLAM with dynamic-feature rejection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set tau_pt=6`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence directory or a scene `.toml` and write trajectory and logs.
    Run {
        sequence: PathBuf,
        #[arg(short, long, default_value = "out")]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        no_dynamic: bool,
        #[arg(long)]
        no_loop: bool,
        #[arg(long)]
        no_lines: bool,
        /// Reject loops whose lc_rat falls below lc_min, as literally stated.
        #[arg(long)]
        strict_paper_lcd: bool,
        /// Seed for synthetic scenes.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip image decoding; keyframes then follow the gap limit.
        #[arg(long)]
        no_images: bool,
    },
    /// Generate a synthetic sequence from a scene spec.
    Simulate {
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare a TUM trajectory with ground truth.
    Evaluate { estimated: PathBuf, ground_truth: PathBuf },
    /// Histogram dissimilarity of two images, or the pairwise CSV matrix of a directory.
    Ggs {
        a: PathBuf,
        b: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Exit 1: the pipeline failed. Exit 2: bad usage or input.
enum Failure {
    Pipeline(String),
    Input(String),
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure::Input(e.to_string())
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(Failure::input)?;
    }
    Ok(cfg)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            sequence,
            output,
            config,
            no_dynamic,
            no_loop,
            no_lines,
            strict_paper_lcd,
            seed,
            no_images,
        } => load_config(&config).and_then(|mut cfg| {
            cfg.use_dynamic &= !no_dynamic;
            cfg.use_loop &= !no_loop;
            cfg.use_lines &= !no_lines;
            cfg.strict_paper_lcd |= strict_paper_lcd;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            run(&sequence, &output, &cfg, !no_images)
        }),
        Command::Simulate { spec, seed, output } => simulate(&spec, seed, &output),
        Command::Evaluate { estimated, ground_truth } => evaluate(&estimated, &ground_truth),
        Command::Ggs { a, b, config } => load_config(&config).and_then(|cfg| ggs(&a, b.as_deref(), &cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(sequence: &Path, output: &Path, cfg: &RunConfig, images: bool) -> Result<(), Failure> {
    if !sequence.exists() {
        return Err(Failure::Input(format!("sequence {} does not exist", sequence.display())));
    }
    let seq = load_sequence(
        sequence,
        &LoadOptions {
            seed: cfg.seed,
            load_images: images,
        },
    )
    .map_err(Failure::input)?;
    print!("{}", cfg.echo());
    let out = run_sequence(&seq, cfg).map_err(|e| match e {
        PipelineError::Ggs(_) => Failure::Pipeline(e.to_string()),
        _ => Failure::input(e),
    })?;
    std::fs::create_dir_all(output).map_err(|e| Failure::Pipeline(format!("{}: {e}", output.display())))?;
    out.write(output).map_err(|e| Failure::Pipeline(e.to_string()))?;
    let accepted = out.loops.iter().filter(|l| l.accepted).count();
    println!(
        "frames {} keyframes {} loops {accepted}/{} tracking_lost {}",
        out.trajectory.len(),
        out.keyframes.len(),
        out.loops.len(),
        out.tracking_lost.len()
    );
    if let Some(gt) = &seq.ground_truth {
        if let Ok(m) = evaluate_trajectory(&out.trajectory, gt) {
            println!("t_rmse_m {:.6} r_rmse_deg {:.6}", m.ate_rmse, m.rotation_rmse_deg);
        }
    }
    for d in &out.diagnostics {
        eprintln!("warning: {d}");
    }
    Ok(())
}

fn simulate(spec: &Path, seed: u64, output: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec).map_err(|e| Failure::Input(format!("{}: {e}", spec.display())))?;
    let spec = SceneSpec::from_toml(&text).map_err(Failure::input)?;
    let scene = generate_scene(&spec, seed).map_err(Failure::input)?;
    write_sequence(output, &scene).map_err(|e| Failure::Pipeline(e.to_string()))?;
    println!("wrote {} frames to {}", scene.frame_count(), output.display());
    Ok(())
}

fn evaluate(estimated: &Path, ground_truth: &Path) -> Result<(), Failure> {
    let est = read_tum(estimated).map_err(Failure::input)?;
    let gt = read_tum(ground_truth).map_err(Failure::input)?;
    let m = evaluate_trajectory(&est, &gt).map_err(Failure::input)?;
    println!("t_rmse_m {:.6}", m.ate_rmse);
    println!("r_rmse_deg {:.6}", m.rotation_rmse_deg);
    Ok(())
}

fn ggs(a: &Path, b: Option<&Path>, cfg: &RunConfig) -> Result<(), Failure> {
    let params = cfg.ggs();
    let describe = |p: &Path| {
        let img = read_gray(p).map_err(Failure::input)?;
        compute_ggs_with(&img, &params).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
    };
    match b {
        Some(b) => {
            let s = ggs_dissimilarity(&describe(a)?, &describe(b)?).map_err(Failure::input)?;
            println!("{s}");
        }
        None if a.is_dir() => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(a)
                .map_err(|e| Failure::Input(format!("{}: {e}", a.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            files.sort();
            let descs = files.iter().map(|p| describe(p)).collect::<Result<Vec<_>, _>>()?;
            let name = |p: &PathBuf| p.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            let header: Vec<String> = files.iter().map(name).collect();
            println!("image,{}", header.join(","));
            for (i, di) in descs.iter().enumerate() {
                let row = descs
                    .iter()
                    .map(|dj| ggs_dissimilarity(di, dj).map(|s| s.to_string()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(Failure::input)?;
                println!("{},{}", header[i], row.join(","));
            }
        }
        None => return Err(Failure::Input("ggs needs two images or one directory".into())),
    }
    Ok(())
}
