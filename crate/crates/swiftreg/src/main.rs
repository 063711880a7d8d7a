use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use swiftreg::config::AlignConfig;
use swiftreg::error::{AppError, Result};
use swiftreg::io::{read_image, read_pgm, write_image};
use swiftreg::manifest::{SectionStatus, StackManifest};
use swiftreg::synthio::{write_synth_stack, write_truth};
use swiftreg_core::{
    build_mesh, build_model, build_pyramid, convert_depth, generate_stack, grid_match, render,
    solve_affine, AffineTransform, MatchPoint, MatchResult, ModelSpec, PyramidSpec, Rect,
    SectionWarp, SynthSpec, Weighting, WhiteningParams,
};

#[derive(Parser)]
#[command(name = "swiftreg", about = "Serial-section image stack registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MirMode {
    Affine,
    Mesh,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an integer PGM to a contrast-normalized float image.
    Icon {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Percentile of pixels saturated at black.
        #[arg(long, default_value_t = 0.5)]
        clip_lo: f64,
        /// Percentile above which pixels saturate at white.
        #[arg(long, default_value_t = 99.5)]
        clip_hi: f64,
    },
    /// Build a reduction pyramid with the given integer factors.
    Iscale {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated reduction factors from {2,3,5}, e.g. 2,2,3.
        #[arg(long)]
        factors: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Match a target image against a model over a patch grid.
    Swim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Whitening exponent: 0 = plain correlation, 1 = phase-only.
        #[arg(long, default_value_t = 0.7)]
        whiten: f64,
        #[arg(long, default_value_t = 0.125)]
        taper: f64,
        /// Patch grid as ROWSxCOLS, e.g. 4x4.
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long, default_value_t = 512)]
        patch: usize,
        #[arg(long, default_value_t = 64.0)]
        max_offset: f64,
        #[arg(long, default_value_t = 0.01)]
        content_floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a warp from match points and render the aligned image.
    Mir {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, value_enum, default_value_t = MirMode::Affine)]
        mode: MirMode,
        /// Mesh grid as ROWSxCOLS (mesh mode only).
        #[arg(long, default_value = "8x8")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the Z-averaged model for one section of an aligned stack.
    Remod {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        center: usize,
        #[arg(long, default_value_t = 9)]
        span: usize,
        /// Comma-separated section indices to exclude.
        #[arg(long)]
        exclude: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic ground-truth stack.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Where to write the truth transforms JSON.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Align a stack per its manifest and a configuration file.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Global pose constraint: six reals a11,a12,tx,a21,a22,ty.
        #[arg(long, value_delimiter = ',', num_args = 6)]
        constraint: Option<Vec<f64>>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cache intermediate renders under this directory.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Emit diagnostics for an aligned stack.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// On-disk shape of one match point.
#[derive(Serialize, Deserialize)]
struct FlatMatch {
    cx: f64,
    cy: f64,
    dx: f64,
    dy: f64,
    snr: f64,
    valid: bool,
}

impl From<&MatchPoint> for FlatMatch {
    fn from(p: &MatchPoint) -> Self {
        FlatMatch {
            cx: p.cx,
            cy: p.cy,
            dx: p.result.dx,
            dy: p.result.dy,
            snr: p.result.snr,
            valid: p.result.valid,
        }
    }
}

impl From<&FlatMatch> for MatchPoint {
    fn from(f: &FlatMatch) -> Self {
        MatchPoint {
            cx: f.cx,
            cy: f.cy,
            result: MatchResult {
                dx: f.dx,
                dy: f.dy,
                snr: f.snr,
                peak_value: 0.0,
                whitening_used: 0.0,
                valid: f.valid,
            },
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let mut it = s.split('x');
    let parse = |t: Option<&str>| -> Option<usize> { t.and_then(|v| v.parse().ok()) };
    match (parse(it.next()), parse(it.next()), it.next()) {
        (Some(r), Some(c), None) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(AppError::Config(format!(
            "bad grid {s:?}, expected ROWSxCOLS"
        ))),
    }
}

fn parse_factors(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| AppError::Config(format!("bad factor {t:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Icon {
            input,
            out,
            clip_lo,
            clip_hi,
        } => {
            let raw = read_pgm(&input)?;
            let img = convert_depth(&raw.samples, raw.width, raw.height, clip_lo, clip_hi)?;
            write_image(&out, &img)
        }
        Command::Iscale {
            input,
            factors,
            out_dir,
        } => {
            let img = read_image(&input)?;
            let spec = PyramidSpec::new(parse_factors(&factors)?);
            let levels = build_pyramid(&img, &spec)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| AppError::io(&out_dir, e))?;
            let ext = input
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("pgm")
                .to_string();
            for (k, level) in levels.iter().enumerate() {
                write_image(&out_dir.join(format!("level_{k}.{ext}")), level)?;
            }
            Ok(())
        }
        Command::Swim {
            model,
            target,
            whiten,
            taper,
            grid,
            patch,
            max_offset,
            content_floor,
            out,
        } => {
            let model = read_image(&model)?;
            let target = read_image(&target)?;
            let (rows, cols) = parse_grid(&grid)?;
            let params = WhiteningParams::new(whiten);
            let points = grid_match(
                &model,
                &target,
                rows,
                cols,
                patch,
                &params,
                taper,
                max_offset,
                content_floor,
            )?;
            let flat: Vec<FlatMatch> = points.iter().map(FlatMatch::from).collect();
            let json = serde_json::to_vec_pretty(&flat).expect("matches serialize");
            std::fs::write(&out, json).map_err(|e| AppError::io(&out, e))
        }
        Command::Mir {
            input,
            matches,
            mode,
            grid,
            out,
        } => {
            let img = read_image(&input)?;
            let data = std::fs::read(&matches).map_err(|e| AppError::io(&matches, e))?;
            let flat: Vec<FlatMatch> =
                serde_json::from_slice(&data).map_err(|e| AppError::BadJson {
                    path: matches.clone(),
                    source: e,
                })?;
            let points: Vec<MatchPoint> = flat.iter().map(MatchPoint::from).collect();
            let warp = match mode {
                MirMode::Affine => {
                    // the fit maps reference positions to where the content
                    // sits in this image, which is exactly render's inverse
                    let fit = solve_affine(&points, Weighting::Snr)?;
                    SectionWarp::Affine(fit.transform.invert()?)
                }
                MirMode::Mesh => {
                    let (rows, cols) = parse_grid(&grid)?;
                    let rect = Rect::of_image(&img);
                    SectionWarp::Mesh(build_mesh(rect, rows, cols, &points)?)
                }
            };
            let rendered = render(&img, &warp, img.width, img.height)?;
            write_image(&out, &rendered)
        }
        Command::Remod {
            stack,
            center,
            span,
            exclude,
            out,
        } => {
            let manifest = StackManifest::load(&stack)?;
            let base = stack.parent().unwrap_or(Path::new("."));
            let level = manifest.finest_completed_level();
            let mut images = Vec::new();
            let mut exclusions: std::collections::BTreeSet<usize> = exclude
                .as_deref()
                .map(|s| {
                    s.split(',')
                        .map(|t| {
                            t.trim().parse().map_err(|_| {
                                AppError::Config(format!("bad exclude index {t:?}"))
                            })
                        })
                        .collect::<Result<_>>()
                })
                .transpose()?
                .unwrap_or_default();
            for (i, s) in manifest.sections.iter().enumerate() {
                let path = if s.source_path.is_absolute() {
                    s.source_path.clone()
                } else {
                    base.join(&s.source_path)
                };
                let img = read_image(&path)?;
                let img = match level {
                    Some(lvl) if s.warp_at(lvl).is_some() => {
                        let at_level = if lvl == 0 {
                            img
                        } else {
                            build_pyramid(&img, &manifest.levels)?[lvl].clone()
                        };
                        let warp = s.warp_at(lvl).unwrap();
                        render(&at_level, warp, at_level.width, at_level.height)?
                    }
                    _ => img,
                };
                if s.status == SectionStatus::Damaged || s.status == SectionStatus::Skipped {
                    exclusions.insert(i);
                }
                images.push(img);
            }
            let spec = ModelSpec {
                span,
                exclude_self: true,
                exclusions,
            };
            let model = build_model(&images, center, &spec)?;
            write_image(&out, &model)
        }
        Command::Synth {
            spec,
            out_dir,
            truth,
        } => {
            let data = std::fs::read(&spec).map_err(|e| AppError::io(&spec, e))?;
            let spec: SynthSpec = serde_json::from_slice(&data).map_err(|e| AppError::BadJson {
                path: out_dir.join("spec"),
                source: e,
            })?;
            let stack = generate_stack(&spec)?;
            let levels = default_pyramid(spec.width.min(spec.height));
            write_synth_stack(&stack, levels, &out_dir)?;
            write_truth(&stack.truth, &truth)
        }
        Command::Align {
            manifest: manifest_path,
            config,
            constraint,
            workers,
            seed,
            workdir,
        } => {
            let mut manifest = StackManifest::load(&manifest_path)?;
            let mut cfg = AlignConfig::load(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = constraint {
                let t = AffineTransform::from([c[0], c[1], c[2], c[3], c[4], c[5]]);
                t.invert()
                    .map_err(|_| AppError::Config("singular constraint".into()))?;
                manifest.global_constraint = Some(t);
            }
            let base = manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let outcome = swiftreg::pipeline::align_stack(
                &mut manifest,
                &base,
                &cfg,
                Some(&manifest_path),
                workdir.as_deref(),
            )?;
            for lvl in &outcome.levels {
                println!(
                    "level {}: {} iterations, median snr {:.2}",
                    lvl.level, lvl.iterations, lvl.median_snr
                );
            }
            if !outcome.low_confidence.is_empty() {
                eprintln!("low-confidence sections: {:?}", outcome.low_confidence);
            }
            Ok(())
        }
        Command::Report { manifest, out_dir } => {
            let m = StackManifest::load(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let bundle = swiftreg::report::report(&m, base, &out_dir)?;
            println!(
                "level {}: {} sections, {} low-confidence, {} interpolated",
                bundle.level,
                bundle.sections.len(),
                bundle.low_confidence.len(),
                bundle.interpolated.len()
            );
            Ok(())
        }
    }
}

/// Halve until the coarsest level's short side lands in [256, 512), with at
/// least one reduction so the manifest has a usable pyramid.
fn default_pyramid(min_dim: usize) -> PyramidSpec {
    let mut factors = vec![2u32];
    let mut dim = min_dim / 2;
    while dim >= 512 {
        factors.push(2);
        dim /= 2;
    }
    PyramidSpec::new(factors)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
