//! Training loop: critic pre-training, the diffusion objective over all
//! baseline-sourced pairs of the train split, gradient accumulation, and
//! periodic checkpointing. Every random draw comes from a generator
//! derived from (master seed, stream), with one stream per epoch, so a
//! resumed run replays the exact arithmetic of an uninterrupted one.

use crate::backbone::UnetConfig;
use crate::bae::{train_bae, BaeModel, DEFAULT_NOISE_LEVELS};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, training_loss, LossWeights, TrainSample};
use crate::error::{MorphError, Result};
use crate::ftie::{FtieConfig, FtieModule};
use crate::kv::KvFile;
use crate::metrics::AgeCritic;
use crate::optim::AdamW;
use crate::rng::{derive_seed, rng_from, shuffle};
use crate::synthdata::{age_pairs, load_subject, make_task, read_manifest};
use crate::Tensor;
use std::fs;

/// Seed streams. Epoch streams are STREAM_EPOCH + epoch index; the other
/// two are far away so they can never collide.
const STREAM_INIT: u64 = 1 << 56;
const STREAM_BAE: u64 = (1 << 56) + 1;
const STREAM_EPOCH: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean noise-prediction error.
    pub simple: f64,
    /// Mean schedule-weighted field term (before its lambda).
    pub df: f64,
    /// Mean schedule-weighted critic term (before its lambda).
    pub bae: f64,
    pub total: f64,
}

impl EpochLog {
    pub fn line(&self, total_epochs: usize) -> String {
        format!(
            "epoch {:>3}/{} L_simple={:.6} L_DF={:.6} L_BAE={:.6} total={:.6}",
            self.epoch, total_epochs, self.simple, self.df, self.bae, self.total
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Entries for the epochs this call ran (resume starts mid-series).
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
    /// Clean-image validation MAE of the freshly trained critic; absent
    /// on resume or when the critic term is off.
    pub bae_val_mae: Option<f64>,
}

/// All baseline-sourced supervised pairs of the train split, manifest
/// order, ascending target within a subject.
pub fn load_train_samples(cfg: &RunConfig) -> Result<Vec<TrainSample>> {
    let ids = read_manifest(&cfg.dataset_dir.join("train.txt"))?;
    if ids.is_empty() {
        return Err(MorphError::invalid("train split is empty".to_string()));
    }
    let mut out = Vec::new();
    for id in &ids {
        let subject = load_subject(&cfg.dataset_dir, id)?;
        for k in 1..subject.timepoints.len() {
            out.push(make_task(&subject, 0, k, cfg.aux_slots)?);
        }
    }
    Ok(out)
}

/// Train the age critic on its reserved split and freeze it. Returns the
/// model and its clean validation MAE in years.
pub fn pretrain_critic(cfg: &RunConfig) -> Result<(BaeModel, f64)> {
    let ids = read_manifest(&cfg.dataset_dir.join("bae.txt"))?;
    if ids.is_empty() {
        return Err(MorphError::invalid("critic split is empty".to_string()));
    }
    let pairs = age_pairs(&cfg.dataset_dir, &ids)?;
    if pairs.len() < 2 {
        return Err(MorphError::invalid(
            "critic split needs at least two images".to_string(),
        ));
    }
    let n_val = (pairs.len() / 5).max(1);
    let (train, val) = pairs.split_at(pairs.len() - n_val);
    train_bae(
        train,
        val,
        &DEFAULT_NOISE_LEVELS,
        cfg.bae_epochs,
        cfg.bae_lr,
        derive_seed(cfg.seed, STREAM_BAE),
    )
}

/// Placeholder critic for runs with the critic term switched off; the
/// loss never calls it when lambda3 == 0.
struct ZeroCritic;

impl AgeCritic for ZeroCritic {
    fn predict_age(&self, _img: &Tensor) -> Result<Tensor> {
        Tensor::from_vec(vec![0.0], &[1])
    }
}

fn save_atomically(ck: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let tmp = path.with_extension("dfck.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path)
        .map_err(|e| MorphError::invalid(format!("rename {}: {e}", path.display())))
}

/// Run (or resume) training per `cfg`. With `resume` the checkpoint at
/// `cfg.checkpoint_path` supplies weights, optimizer state, and the epoch
/// to continue from; its architecture header wins over the passed configs.
pub fn train_run(
    cfg: &RunConfig,
    unet_cfg: UnetConfig,
    ftie_cfg: FtieConfig,
    resume: bool,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let info = KvFile::load(&cfg.dataset_dir.join("dataset.kv"))?;
    if let Some(m) = info.get_f64("u_max")? {
        if m as f32 != cfg.u_max {
            return Err(MorphError::invalid(format!(
                "config u_max {} does not match dataset u_max {m}",
                cfg.u_max
            )));
        }
    }
    let samples = load_train_samples(cfg)?;
    let schedule = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let weights = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        lambda3: cfg.lambda3,
        gamma: cfg.gamma,
    };
    weights.validate()?;

    let (unet, ftie, bae, mut opt, start_epoch, bae_val_mae);
    if resume {
        let ck = Checkpoint::load(&cfg.checkpoint_path)?;
        if ck.master_seed != cfg.seed {
            return Err(MorphError::invalid(format!(
                "checkpoint was written under seed {}, config says {}",
                ck.master_seed, cfg.seed
            )));
        }
        if ck.epoch as usize >= cfg.epochs {
            return Err(MorphError::invalid(format!(
                "checkpoint already covers {} epochs, config asks for {}",
                ck.epoch, cfg.epochs
            )));
        }
        let (u, f, b) = ck.build_models()?;
        if cfg.lambda3 > 0.0 && b.is_none() {
            return Err(MorphError::invalid(
                "lambda3 > 0 but the checkpoint has no critic".to_string(),
            ));
        }
        let mut params = u.named_params();
        if let Some(f) = &f {
            params.extend(f.named_params());
        }
        let mut o = AdamW::new(params, cfg.lr);
        ck.restore_optimizer(&mut o)?;
        start_epoch = ck.epoch as usize;
        log(&format!(
            "resuming from {} after epoch {}",
            cfg.checkpoint_path.display(),
            ck.epoch
        ));
        (unet, ftie, bae, opt, bae_val_mae) = (u, f, b, o, None);
    } else {
        if unet_cfg.use_ftie && ftie_cfg.guidance_dim != unet_cfg.guidance_dim {
            return Err(MorphError::invalid(format!(
                "guidance dims disagree: encoder {} vs denoiser {}",
                ftie_cfg.guidance_dim, unet_cfg.guidance_dim
            )));
        }
        let mut rng = rng_from(derive_seed(cfg.seed, STREAM_INIT));
        let u = crate::backbone::DiffKanUnet::new(unet_cfg.clone(), &mut rng)?;
        let f = if unet_cfg.use_ftie {
            Some(FtieModule::new(ftie_cfg, &mut rng)?)
        } else {
            None
        };
        let (b, mae) = if cfg.lambda3 > 0.0 {
            let (model, mae) = pretrain_critic(cfg)?;
            log(&format!("critic ready, validation MAE {mae:.3} years"));
            (Some(model), Some(mae))
        } else {
            (None, None)
        };
        let mut params = u.named_params();
        if let Some(f) = &f {
            params.extend(f.named_params());
        }
        let o = AdamW::new(params, cfg.lr);
        (unet, ftie, bae, opt, start_epoch, bae_val_mae) = (u, f, b, o, 0, mae);
    }

    let zero_critic = ZeroCritic;
    let critic: &dyn AgeCritic = match &bae {
        Some(b) => b,
        None => &zero_critic,
    };

    let mut new_log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut er = rng_from(derive_seed(cfg.seed, STREAM_EPOCH + epoch as u64));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        shuffle(&mut er, &mut order);
        let (mut sum_s, mut sum_d, mut sum_b, mut sum_t) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            for &idx in batch {
                let lb = training_loss(
                    &samples[idx],
                    &unet,
                    ftie.as_ref(),
                    critic,
                    &schedule,
                    &weights,
                    &mut er,
                )?;
                let abar = schedule.alpha_bar(lb.t);
                sum_s += lb.simple;
                sum_d += abar * lb.df;
                sum_b += abar * lb.bae;
                sum_t += lb.total.item()? as f64;
                lb.total.scale(1.0 / batch.len() as f32).backward()?;
            }
            opt.step()?;
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            simple: sum_s / n,
            df: sum_d / n,
            bae: sum_b / n,
            total: sum_t / n,
        };
        log(&entry.line(cfg.epochs));
        new_log.push(entry);
        let completed = (epoch + 1) as u64;
        if completed as usize % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            let ck = Checkpoint::from_parts(
                &unet,
                ftie.as_ref(),
                bae.as_ref(),
                Some(&opt),
                cfg.seed,
                completed,
            );
            save_atomically(&ck, &cfg.checkpoint_path)?;
        }
    }
    let checkpoint = Checkpoint::from_parts(
        &unet,
        ftie.as_ref(),
        bae.as_ref(),
        Some(&opt),
        cfg.seed,
        cfg.epochs as u64,
    );
    Ok(TrainOutcome {
        log: new_log,
        checkpoint,
        bae_val_mae,
    })
}
