mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use imjense::coilmodel::normalize_maps;
use imjense::hypertune::{bayes_optimize, SearchSpace};
use imjense::inference::{query_upsampled, reconstruct};
use imjense::inr_model::{read_checkpoint, write_checkpoint};
use imjense::metrics::{evaluate, psnr, psnr_for_file, rows_to_csv, MetricRow};
use imjense::mrop::{KSpaceVolume, SamplingMask};
use imjense::synthdata::{
    acquire, make_mask, make_phantom, read_kspc, reference_magnitude, simulate_coils, undersampling_rate, write_kspc,
    zero_filled, MaskSpec, PhantomSpec,
};
use imjense::trainer::{train, ReconConfig, Variant};
use serde::Deserialize;
use serde_json::json;

use crate::io::{read_magnitude, write_image_set, write_magnitude_pgm, write_maps, write_real, RunManifest};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "imjense", version, about = "Joint image and coil-sensitivity reconstruction for parallel MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom, coil maps and k-space.
    Phantom {
        /// Phantom spec (JSON).
        spec: PathBuf,
        #[arg(long, default_value_t = 8)]
        coils: usize,
        /// Seed of the simulated coil maps.
        #[arg(long, default_value_t = 0)]
        coil_seed: u64,
        /// Also write undersampled k-space with this acceleration.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, default_value_t = 0, requires = "r")]
        acs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a sampling mask and report its undersampling rate.
    Mask {
        #[arg(long)]
        d_fe: usize,
        #[arg(long)]
        d_pe: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        acs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image and coil maps from k-space.
    Recon {
        input: PathBuf,
        /// Reconstruction config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM of reconstructions against a reference magnitude.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// One or more reconstructions; each becomes a CSV row.
        #[arg(long, required = true, num_args = 1..)]
        recon: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        acs: usize,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bayesian search over (w0, lambda) maximizing mean PSNR.
    Tune {
        /// Case list (JSON).
        cases: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        budget: usize,
        #[arg(long, default_value_t = 4)]
        init: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        w0_range: Option<Vec<f64>>,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        lambda_range: Option<Vec<f64>>,
        /// Cases reconstructed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a trained network on a denser grid.
    Upsample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .chain()
                .filter_map(|e| e.downcast_ref::<imjense::Error>())
                .any(imjense::Error::is_numerical);
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_INPUT })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom {
            spec,
            coils,
            coil_seed,
            r,
            acs,
            out,
        } => cmd_phantom(&spec, coils, coil_seed, r.map(|r| (r, acs)), &out),
        Command::Mask { d_fe, d_pe, r, acs, out } => cmd_mask(MaskSpec { d_fe, d_pe, r, acs }, &out),
        Command::Recon {
            input,
            config,
            variant,
            out,
        } => cmd_recon(&input, config.as_deref(), variant, &out),
        Command::Eval {
            truth,
            recon,
            r,
            acs,
            variant,
            out,
        } => cmd_eval(&truth, &recon, r, acs, &variant, &out),
        Command::Tune {
            cases,
            config,
            budget,
            init,
            seed,
            w0_range,
            lambda_range,
            jobs,
            out,
        } => {
            let mut space = SearchSpace::default();
            if let Some(v) = w0_range {
                space.w0 = [v[0], v[1]];
            }
            if let Some(v) = lambda_range {
                space.lambda = [v[0], v[1]];
            }
            cmd_tune(&cases, config.as_deref(), space, budget, init, seed, jobs.max(1), &out)
        }
        Command::Upsample { checkpoint, scale, out } => cmd_upsample(&checkpoint, scale, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ReconConfig> {
    match path {
        Some(p) => ReconConfig::from_json(&read_text(p)?).with_context(|| format!("config {}", p.display())),
        None => Ok(ReconConfig::default()),
    }
}

fn cmd_phantom(spec_path: &Path, coils: usize, coil_seed: u64, under: Option<(usize, usize)>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("phantom");
    let spec = PhantomSpec::from_json(&read_text(spec_path)?).with_context(|| format!("phantom spec {}", spec_path.display()))?;
    let truth = make_phantom(&spec)?;
    let maps = simulate_coils(coils, spec.d1, spec.d2, coil_seed)?;
    let under_mask = match under {
        Some((r, acs)) => Some(make_mask(&MaskSpec {
            d_fe: spec.d1,
            d_pe: spec.d2,
            r,
            acs,
        })?),
        None => None,
    };
    create_dir(out)?;
    let mut outputs = write_image_set(out, "truth", &truth)?;
    let reference = reference_magnitude(&truth, &maps)?;
    let ref_path = out.join("reference.f32");
    write_real(&ref_path, spec.d1, spec.d2, &reference)?;
    let ref_pgm = out.join("reference.pgm");
    write_magnitude_pgm(&ref_pgm, spec.d1, spec.d2, &reference)?;
    let sens = out.join("sens.f32");
    write_maps(&sens, &maps)?;
    outputs.extend([ref_path, ref_pgm, sens]);

    let full = acquire(&truth, &maps, &SamplingMask::full(spec.d1, spec.d2), spec.noise_std, spec.seed)?;
    let full_path = out.join("full.kspc");
    write_kspc(&full_path, &full)?;
    outputs.push(full_path);
    if let Some(mask) = under_mask {
        let rate = undersampling_rate(&mask);
        let under = acquire(&truth, &maps, &mask, spec.noise_std, spec.seed)?;
        let path = out.join("under.kspc");
        write_kspc(&path, &under)?;
        outputs.push(path);
        let zf = zero_filled(&under, &normalize_maps(&maps).0)?;
        outputs.extend(write_image_set(out, "zero_filled", &zf)?);
        println!("undersampling rate {:.2}%", 100.0 * rate);
    }
    manifest.config = Some(spec_path.to_path_buf());
    manifest.outputs = outputs;
    manifest.seeds = json!({ "noise": spec.seed, "coils": coil_seed });
    manifest.finish(out)
}

fn cmd_mask(spec: MaskSpec, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("mask");
    let mask = make_mask(&spec)?;
    let rate = undersampling_rate(&mask);
    create_dir(out)?;
    let pgm = out.join("mask.pgm");
    let matrix: Vec<f64> = mask.to_matrix().iter().map(|&v| v as f64).collect();
    io::write_pgm(&pgm, spec.d_fe, spec.d_pe, &matrix, 0.0, 1.0)?;
    let info = out.join("mask.json");
    let body = json!({ "spec": spec, "kept_lines": mask.kept_lines(), "rate": rate });
    std::fs::write(&info, serde_json::to_string_pretty(&body)? + "\n").with_context(|| format!("writing {}", info.display()))?;
    println!("{} of {} lines kept, undersampling rate {:.2}%", mask.kept_count(), spec.d_pe, 100.0 * rate);
    manifest.outputs = vec![pgm, info];
    manifest.finish(out)
}

fn cmd_recon(input: &Path, config: Option<&Path>, variant: Variant, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("recon");
    let cfg = load_config(config)?.with_variant(variant);
    cfg.validate()?;
    let measured = read_kspc(input)?;
    create_dir(out)?;
    manifest.config = config.map(Path::to_path_buf);
    manifest.inputs = vec![input.to_path_buf()];
    manifest.seeds = json!({ "inr": cfg.seed_inr, "poly": cfg.seed_poly });
    let start = Instant::now();
    let model = match train(&measured, &cfg) {
        Ok(m) => m,
        Err(imjense::Error::NonFiniteLoss { iteration, last_good }) => {
            let path = out.join("last_good.ckpt");
            write_checkpoint(&path, &last_good)?;
            manifest.outputs = vec![path];
            manifest.finish(out)?;
            return Err(imjense::Error::NonFiniteLoss { iteration, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let result = reconstruct(&model.checkpoint, &measured, cfg.use_kc)?;
    let mut outputs = write_image_set(out, "combined", &result.combined)?;
    outputs.extend(write_image_set(out, "network", &result.network_image)?);
    let paths = [
        out.join("sens.f32"),
        out.join("composite.kspc"),
        out.join("model.ckpt"),
        out.join("history.csv"),
        out.join("config.json"),
    ];
    write_maps(&paths[0], &result.sens_maps)?;
    write_kspc(&paths[1], &result.composite)?;
    write_checkpoint(&paths[2], &model.checkpoint)?;
    model.history.write_csv(&paths[3])?;
    std::fs::write(&paths[4], cfg.to_json() + "\n").with_context(|| format!("writing {}", paths[4].display()))?;
    outputs.extend(paths);
    if let Some(last) = model.history.records.last() {
        println!(
            "{} iterations in {:.1}s, final L_DC {:.4e}, L_tot {:.4e}",
            model.history.len(),
            start.elapsed().as_secs_f64(),
            last.dc,
            last.total
        );
    }
    manifest.outputs = outputs;
    manifest.finish(out)
}

fn cmd_eval(truth: &Path, recons: &[PathBuf], r: usize, acs: usize, variant: &str, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("eval");
    let (d1, d2, reference) = read_magnitude(truth)?;
    let mut rows = Vec::new();
    for path in recons {
        let (e1, e2, test) = read_magnitude(path)?;
        if (e1, e2) != (d1, d2) {
            bail!("{} is {e1}×{e2} but the reference is {d1}×{d2}", path.display());
        }
        let report = evaluate(&reference, &test, d1, d2)?;
        rows.push(MetricRow {
            case_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            r,
            acs,
            variant: variant.into(),
            psnr_db: report.psnr_db,
            ssim: report.ssim,
            seconds: 0.0,
        });
    }
    let csv = rows_to_csv(&rows);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    manifest.inputs = std::iter::once(truth.to_path_buf()).chain(recons.iter().cloned()).collect();
    manifest.outputs = vec![out.to_path_buf()];
    manifest.finish(out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseList {
    cases: Vec<TuneCase>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneCase {
    kspc: PathBuf,
    /// Reference magnitude raster.
    truth: PathBuf,
}

#[allow(clippy::too_many_arguments)]
fn cmd_tune(
    cases_path: &Path,
    config: Option<&Path>,
    space: SearchSpace,
    budget: usize,
    init: usize,
    seed: u64,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let mut manifest = RunManifest::start("tune");
    let base = load_config(config)?;
    base.validate()?;
    let list: CaseList =
        serde_json::from_str(&read_text(cases_path)?).with_context(|| format!("case list {}", cases_path.display()))?;
    if list.cases.is_empty() {
        bail!("{} lists no cases", cases_path.display());
    }
    let root = cases_path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for c in &list.cases {
        let kspc = root.join(&c.kspc);
        let truth = root.join(&c.truth);
        let measured = read_kspc(&kspc)?;
        let (d1, d2, reference) = read_magnitude(&truth)?;
        if (d1, d2) != (measured.d1, measured.d2) {
            bail!("{} does not match the size of {}", truth.display(), kspc.display());
        }
        manifest.inputs.extend([kspc, truth]);
        cases.push((measured, reference));
    }
    let score_case = |cfg: &ReconConfig, case: &(KSpaceVolume, Vec<f64>)| -> f64 {
        let (measured, reference) = case;
        train(measured, cfg)
            .and_then(|m| reconstruct(&m.checkpoint, measured, cfg.use_kc))
            .and_then(|r| psnr(reference, &r.combined.magnitude()))
            .map(psnr_for_file)
            .unwrap_or(f64::NAN)
    };
    let objective = |p: [f64; 2]| -> f64 {
        let cfg = ReconConfig {
            w0: p[0],
            lambda: p[1],
            ..base.clone()
        };
        let scores: Vec<f64> = std::thread::scope(|s| {
            cases
                .chunks(cases.len().div_ceil(jobs))
                .map(|chunk| {
                    let cfg = &cfg;
                    s.spawn(move || chunk.iter().map(|c| score_case(cfg, c)).collect::<Vec<_>>())
                })
                .collect::<Vec<_>>()
                .into_iter()
                .flat_map(|h| h.join().unwrap_or_default())
                .collect()
        });
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        eprintln!("w0 {} lambda {} -> mean PSNR {mean:.3} dB", p[0], p[1]);
        mean
    };
    let trace = bayes_optimize(objective, &space, budget, init, seed)?;
    let best = trace.best().context("tuning produced no evaluations")?;
    let best_cfg = ReconConfig {
        w0: best.w0,
        lambda: best.lambda,
        ..base
    };
    create_dir(out)?;
    let trace_path = out.join("trace.csv");
    std::fs::write(&trace_path, trace.to_csv()).with_context(|| format!("writing {}", trace_path.display()))?;
    let best_path = out.join("best_config.json");
    std::fs::write(&best_path, best_cfg.to_json() + "\n").with_context(|| format!("writing {}", best_path.display()))?;
    println!("best w0 {} lambda {} mean PSNR {:.3} dB", best.w0, best.lambda, best.score);
    manifest.config = config.map(Path::to_path_buf);
    manifest.outputs = vec![trace_path, best_path];
    manifest.seeds = json!({ "search": seed, "inr": best_cfg.seed_inr, "poly": best_cfg.seed_poly });
    manifest.finish(out)
}

fn cmd_upsample(checkpoint: &Path, scale: usize, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("upsample");
    let model = read_checkpoint(checkpoint)?;
    let image = query_upsampled(&model.inr, scale, model.d1, model.d2)?;
    create_dir(out)?;
    manifest.inputs = vec![checkpoint.to_path_buf()];
    manifest.outputs = write_image_set(out, &format!("network_x{scale}"), &image)?;
    println!("{}×{} from a {}×{} model", image.d1, image.d2, model.d1, model.d2);
    manifest.finish(out)
}
