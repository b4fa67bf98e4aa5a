//! Command-line surface: data generation, training, sampling/completion,
//! evaluation, and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or argument error,
//! 3 numerical failure. `MORPHDIFF_SEED` supplies the seed when a command
//! that takes `--seed` is invoked without it.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use morphdiff_core::backbone::UnetConfig;
use morphdiff_core::checkpoint::Checkpoint;
use morphdiff_core::config::RunConfig;
use morphdiff_core::diffusion::{build_c2, make_schedule, sample_field};
use morphdiff_core::error::{MorphError, Result};
use morphdiff_core::evaluate::{EvalMode, Evaluator};
use morphdiff_core::ftie::FtieConfig;
use morphdiff_core::gradchecks;
use morphdiff_core::kv::KvFile;
use morphdiff_core::rng::rng_from;
use morphdiff_core::synthdata::{make_dataset, read_manifest};
use morphdiff_core::train::train_run;
use morphdiff_core::warp::{warp_image, warp_labels};
use morphdiff_core::{dftn, Tensor};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "morphdiff",
    version,
    about = "Deformation-field diffusion for longitudinal image completion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic longitudinal dataset with split manifests.
    GenData {
        #[arg(long)]
        subjects: usize,
        /// Extra subjects reserved for critic pre-training.
        #[arg(long, default_value_t = 3)]
        bae_subjects: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Train/val/test fractions; must sum to 1.
        #[arg(long, num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
        fractions: Vec<f64>,
    },
    /// Train (or resume) the denoiser per a run-config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint named in the config.
        #[arg(long)]
        resume: bool,
    },
    /// Sample a deformation field for a source image at a target age and
    /// apply it.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image (.dftn, [1,H,W]).
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_age: f32,
        /// Auxiliary guidance images, up to the encoder's slot count.
        #[arg(long)]
        aux: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Segmentation (.dftn, labels) to carry through the same field.
        #[arg(long)]
        seg: Option<PathBuf>,
        /// Run config supplying the schedule and normalization bound;
        /// defaults match training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a split: per-pair metrics, aggregates, and the no-model
    /// baseline.
    Evaluate {
        /// Required in model mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report stem; writes <out>.kv and <out>.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every registered finite-difference gradient check.
    Gradcheck {
        /// Also run a deliberately broken backward rule; the table must
        /// flag it and the exit code turns nonzero.
        #[arg(long)]
        include_negative_control: bool,
    },
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("MORPHDIFF_SEED") {
        Ok(v) => v.parse::<u64>().map_err(|_| {
            MorphError::Usage(format!("MORPHDIFF_SEED must be an unsigned integer, got `{v}`"))
        }),
        Err(_) => Ok(0),
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen_data(
    subjects: usize,
    bae_subjects: usize,
    seed: Option<u64>,
    out: &Path,
    fractions: &[f64],
) -> Result<()> {
    let seed = resolve_seed(seed)?;
    let f = (fractions[0], fractions[1], fractions[2]);
    let summary = make_dataset(out, subjects, bae_subjects, seed, f)?;
    println!(
        "wrote {} subjects to {}",
        subjects + bae_subjects,
        out.display()
    );
    println!(
        "splits: train={} val={} test={} bae={}",
        summary.train.len(),
        summary.val.len(),
        summary.test.len(),
        summary.bae.len()
    );
    Ok(())
}

fn cmd_train(config: &Path, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if let Some(parent) = cfg.checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| MorphError::invalid(format!("create {}: {e}", parent.display())))?;
        }
    }
    let unet_cfg = UnetConfig::default();
    let ftie_cfg = FtieConfig {
        num_slots: cfg.aux_slots,
        ..FtieConfig::default()
    };
    let outcome = train_run(&cfg, unet_cfg, ftie_cfg, resume, &mut |line| {
        println!("{line}");
    })?;
    println!(
        "done: {} epochs, checkpoint at {}",
        outcome.checkpoint.epoch,
        cfg.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_sample(
    checkpoint: &Path,
    source: &Path,
    target_age: f32,
    aux_paths: &[PathBuf],
    seed: Option<u64>,
    out: &Path,
    seg: Option<&PathBuf>,
    config: &Option<PathBuf>,
) -> Result<()> {
    let seed = resolve_seed(seed)?;
    let cfg = load_run_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (unet, ftie, _) = ck.build_models()?;
    let slots = ftie.as_ref().map(|f| f.config.num_slots).unwrap_or(0);
    if aux_paths.len() > slots {
        return Err(MorphError::invalid(format!(
            "{} auxiliary images given but the model accepts at most {slots}",
            aux_paths.len()
        )));
    }
    if !(cfg.age_min..=cfg.age_max).contains(&target_age) {
        return Err(MorphError::invalid(format!(
            "target age {target_age} outside the model's range {}..{}",
            cfg.age_min, cfg.age_max
        )));
    }
    let c1 = dftn::load(source)?;
    let aux: Vec<Tensor> = aux_paths
        .iter()
        .map(|p| dftn::load(p))
        .collect::<Result<_>>()?;
    let c2 = build_c2(&unet, ftie.as_ref(), &aux)?;
    let schedule = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let age_norm = (target_age - cfg.age_min) / (cfg.age_max - cfg.age_min);
    let mut rng = rng_from(seed);
    let (field, clamped_fraction) =
        sample_field(&unet, &c1, age_norm, &c2, cfg.u_max, &schedule, &mut rng)?;
    let pixels = field.denormalize()?;
    let completed = warp_image(&c1, &pixels)?;

    fs::create_dir_all(out)
        .map_err(|e| MorphError::invalid(format!("create {}: {e}", out.display())))?;
    dftn::save(&out.join("field_normalized.dftn"), &field.u)?;
    dftn::save(&out.join("field.dftn"), &pixels.u)?;
    dftn::save(&out.join("completed.dftn"), &completed)?;
    let mut info = KvFile::new();
    info.set("seed", seed);
    info.set("target_age", target_age);
    info.set("u_max", cfg.u_max);
    info.set("steps", cfg.steps);
    info.set("aux_count", aux.len());
    info.set("clamped_fraction", clamped_fraction);
    if let Some(seg_path) = seg {
        let seg_img = dftn::load(seg_path)?;
        let labels = match seg_img.shape() {
            [1, h, w] => seg_img.reshape(&[*h, *w])?,
            [_, _] => seg_img,
            other => {
                return Err(MorphError::shape(format!(
                    "segmentation must be [1,H,W] or [H,W], got {other:?}"
                )))
            }
        };
        let warped = warp_labels(&labels, &pixels, 0.0)?;
        let (h, w) = (warped.shape()[0], warped.shape()[1]);
        dftn::save(&out.join("completed_seg.dftn"), &warped.reshape(&[1, h, w])?)?;
        info.set("seg", true);
    }
    info.save(&out.join("sample.kv"))?;
    println!(
        "sampled field for age {target_age}: {:.2}% clamped, outputs in {}",
        100.0 * clamped_fraction,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Option<PathBuf>,
    split: &str,
    out: &Path,
    mode: &str,
    config: &Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let seed = resolve_seed(seed)?;
    let cfg = load_run_config(config)?;
    let mode = match mode {
        "model" => EvalMode::Model,
        "baseline" => EvalMode::Baseline,
        "oracle" => EvalMode::Oracle,
        other => {
            return Err(MorphError::Usage(format!(
                "unknown mode `{other}`; expected model, baseline, or oracle"
            )))
        }
    };
    let manifest = cfg.dataset_dir.join(format!("{split}.txt"));
    let ids = read_manifest(&manifest)?;
    let schedule = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;

    let loaded = match (&mode, checkpoint) {
        (EvalMode::Model, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            let (unet, ftie, _) = ck.build_models()?;
            Some((unet, ftie))
        }
        (EvalMode::Model, None) => {
            return Err(MorphError::Usage(
                "model mode needs --checkpoint".to_string(),
            ))
        }
        _ => None,
    };
    let ev = Evaluator {
        mode,
        unet: loaded.as_ref().map(|(u, _)| u),
        ftie: loaded.as_ref().and_then(|(_, f)| f.as_ref()),
        schedule: Some(&schedule),
        u_max: cfg.u_max,
        aux_slots: cfg.aux_slots,
        seed,
        age_min: cfg.age_min,
        age_max: cfg.age_max,
    };
    let result = ev.run(&cfg.dataset_dir, &ids)?;
    result.write_report(out)?;
    println!(
        "{} pairs: PSNR {:.3} +/- {:.3} dB, SSIM {:.4} +/- {:.4}, NCC {:.4}, folding {:.5}",
        result.aggregate.n,
        result.aggregate.psnr.0,
        result.aggregate.psnr.1,
        result.aggregate.ssim.0,
        result.aggregate.ssim.1,
        result.aggregate.ncc.0,
        result.aggregate.folding.0
    );
    if let Some(b) = &result.baseline {
        println!(
            "baseline: PSNR {:.3} +/- {:.3} dB, SSIM {:.4} +/- {:.4} (uplift {:+.3} dB)",
            b.psnr.0,
            b.psnr.1,
            b.ssim.0,
            b.ssim.1,
            result.aggregate.psnr.0 - b.psnr.0
        );
    }
    println!("report written to {}.kv / .csv", out.display());
    Ok(())
}

fn cmd_gradcheck(include_negative_control: bool) -> Result<()> {
    let mut checks = gradchecks::registry();
    if include_negative_control {
        checks.push(gradchecks::sign_flipped_fixture());
    }
    let outcomes = gradchecks::run_checks(&checks);
    print!("{}", gradchecks::render_table(&outcomes));
    if gradchecks::all_passed(&outcomes) {
        Ok(())
    } else {
        Err(MorphError::numeric(
            "one or more gradient checks failed".to_string(),
        ))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            subjects,
            bae_subjects,
            seed,
            out,
            fractions,
        } => cmd_gen_data(subjects, bae_subjects, seed, &out, &fractions),
        Cmd::Train { config, resume } => cmd_train(&config, resume),
        Cmd::Sample {
            checkpoint,
            source,
            target_age,
            aux,
            seed,
            out,
            seg,
            config,
        } => cmd_sample(
            &checkpoint,
            &source,
            target_age,
            &aux,
            seed,
            &out,
            seg.as_ref(),
            &config,
        ),
        Cmd::Evaluate {
            checkpoint,
            split,
            out,
            mode,
            config,
            seed,
        } => cmd_evaluate(&checkpoint, &split, &out, &mode, &config, seed),
        Cmd::Gradcheck {
            include_negative_control,
        } => cmd_gradcheck(include_negative_control),
    }
}

fn exit_code(err: &MorphError) -> i32 {
    match err {
        MorphError::Usage(_) => 1,
        MorphError::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
