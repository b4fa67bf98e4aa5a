//! Run configuration: a flat `key = value` text file with `#` comments.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use crate::error::{MorphError, Result};
use crate::kv::KvFile;
use std::path::{Path, PathBuf};

/// Desk-scale diffusion length. The canonical 1000-step schedule is
/// reachable by setting `steps`, `beta_start`, `beta_end` explicitly.
pub const DESK_STEPS: usize = 100;
/// Endpoints rescaled for the shorter desk schedule so the terminal
/// signal level still decays below 1e-4, matching the long schedule's
/// prior at the start of sampling.
pub const DESK_BETA_START: f64 = 1e-3;
pub const DESK_BETA_END: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    /// Diffusion steps T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub gamma: f32,
    pub u_max: f32,
    /// Max auxiliary guidance images N.
    pub aux_slots: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_path: PathBuf,
    pub checkpoint_every: usize,
    pub age_min: f32,
    pub age_max: f32,
    /// Critic pre-training loop length and rate; the critic is trained
    /// once, frozen, then reused by the diffusion loss.
    pub bae_epochs: usize,
    pub bae_lr: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            steps: DESK_STEPS,
            beta_start: DESK_BETA_START,
            beta_end: DESK_BETA_END,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            gamma: 0.01,
            u_max: 10.0,
            aux_slots: 3,
            lr: 1e-4,
            epochs: 50,
            batch_size: 2,
            seed: 0,
            checkpoint_path: PathBuf::from("checkpoints/model.dfck"),
            checkpoint_every: 5,
            age_min: 40.0,
            age_max: 90.0,
            bae_epochs: 40,
            bae_lr: 1e-3,
        }
    }
}

const KEYS: &[&str] = &[
    "dataset_dir",
    "steps",
    "beta_start",
    "beta_end",
    "lambda1",
    "lambda2",
    "lambda3",
    "gamma",
    "u_max",
    "aux_slots",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "checkpoint_path",
    "checkpoint_every",
    "age_min",
    "age_max",
    "bae_epochs",
    "bae_lr",
];

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        for key in kv.keys() {
            if !KEYS.contains(&key) {
                return Err(MorphError::format(format!("unknown config key `{key}`")));
            }
        }
        let mut c = RunConfig::default();
        let f32_of = |kv: &KvFile, key: &str, cur: f32| -> Result<f32> {
            Ok(kv.get_f64(key)?.map(|v| v as f32).unwrap_or(cur))
        };
        if let Some(v) = kv.get("dataset_dir") {
            c.dataset_dir = PathBuf::from(v);
        }
        c.steps = kv.get_usize("steps")?.unwrap_or(c.steps);
        c.beta_start = kv.get_f64("beta_start")?.unwrap_or(c.beta_start);
        c.beta_end = kv.get_f64("beta_end")?.unwrap_or(c.beta_end);
        c.lambda1 = f32_of(kv, "lambda1", c.lambda1)?;
        c.lambda2 = f32_of(kv, "lambda2", c.lambda2)?;
        c.lambda3 = f32_of(kv, "lambda3", c.lambda3)?;
        c.gamma = f32_of(kv, "gamma", c.gamma)?;
        c.u_max = f32_of(kv, "u_max", c.u_max)?;
        c.aux_slots = kv.get_usize("aux_slots")?.unwrap_or(c.aux_slots);
        c.lr = f32_of(kv, "lr", c.lr)?;
        c.epochs = kv.get_usize("epochs")?.unwrap_or(c.epochs);
        c.batch_size = kv.get_usize("batch_size")?.unwrap_or(c.batch_size);
        c.seed = kv.get_u64("seed")?.unwrap_or(c.seed);
        if let Some(v) = kv.get("checkpoint_path") {
            c.checkpoint_path = PathBuf::from(v);
        }
        c.checkpoint_every = kv.get_usize("checkpoint_every")?.unwrap_or(c.checkpoint_every);
        c.age_min = f32_of(kv, "age_min", c.age_min)?;
        c.age_max = f32_of(kv, "age_max", c.age_max)?;
        c.bae_epochs = kv.get_usize("bae_epochs")?.unwrap_or(c.bae_epochs);
        c.bae_lr = f32_of(kv, "bae_lr", c.bae_lr)?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn render(&self) -> String {
        let mut kv = KvFile::new();
        kv.set("dataset_dir", self.dataset_dir.display());
        kv.set("steps", self.steps);
        kv.set("beta_start", self.beta_start);
        kv.set("beta_end", self.beta_end);
        kv.set("lambda1", self.lambda1);
        kv.set("lambda2", self.lambda2);
        kv.set("lambda3", self.lambda3);
        kv.set("gamma", self.gamma);
        kv.set("u_max", self.u_max);
        kv.set("aux_slots", self.aux_slots);
        kv.set("lr", self.lr);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("checkpoint_path", self.checkpoint_path.display());
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("age_min", self.age_min);
        kv.set("age_max", self.age_max);
        kv.set("bae_epochs", self.bae_epochs);
        kv.set("bae_lr", self.bae_lr);
        kv.render()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())
            .map_err(|e| MorphError::invalid(format!("write {}: {e}", path.display())))
    }

    /// Value and path checks. Paths must already exist when this runs:
    /// the dataset directory itself and the checkpoint's parent directory.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MorphError::invalid("steps must be >= 1".to_string()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(MorphError::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {} / {}",
                self.beta_start, self.beta_end
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MorphError::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return Err(MorphError::invalid(format!("u_max must be positive, got {}", self.u_max)));
        }
        for (name, v) in [("lr", self.lr), ("bae_lr", self.bae_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MorphError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("bae_epochs", self.bae_epochs),
        ] {
            if v == 0 {
                return Err(MorphError::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.age_min < self.age_max) {
            return Err(MorphError::invalid(format!(
                "age range must be increasing, got {} .. {}",
                self.age_min, self.age_max
            )));
        }
        if !self.dataset_dir.is_dir() {
            return Err(MorphError::invalid(format!(
                "dataset dir {} does not exist",
                self.dataset_dir.display()
            )));
        }
        if let Some(parent) = self.checkpoint_path.parent() {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(MorphError::invalid(format!(
                    "checkpoint dir {} does not exist",
                    parent.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use std::fs;

    fn with_dirs(c: &mut RunConfig, tag: &str) -> PathBuf {
        let root = std::env::temp_dir().join(format!(
            "morphdiff-config-{}-{tag}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(root.join("data")).unwrap();
        fs::create_dir_all(root.join("ckpt")).unwrap();
        c.dataset_dir = root.join("data");
        c.checkpoint_path = root.join("ckpt").join("model.dfck");
        root
    }

    #[test]
    fn defaults_render_and_round_trip() {
        let c = RunConfig::default();
        let parsed = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(c, parsed);
        assert_eq!(c.steps, 100);
        assert_eq!((c.lambda1, c.lambda2, c.lambda3, c.gamma), (1.0, 0.5, 0.1, 0.01));
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.epochs, 50);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let text = "# run\nsteps = 7\nlambda2 = 0\nseed = 42\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.lambda2, 0.0);
        assert_eq!(c.seed, 42);
        assert_eq!(c.lambda1, 1.0);
        assert_eq!(c.batch_size, 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("stepz = 7\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn validation_checks_values_and_paths() {
        let mut c = RunConfig::default();
        let root = with_dirs(&mut c, "validate");
        c.validate().unwrap();
        for bad in [
            |c: &mut RunConfig| c.lambda3 = -0.1,
            |c: &mut RunConfig| c.gamma = f32::NAN,
            |c: &mut RunConfig| c.epochs = 0,
            |c: &mut RunConfig| c.age_max = c.age_min,
            |c: &mut RunConfig| c.beta_end = 1.5,
            |c: &mut RunConfig| c.lr = 0.0,
            |c: &mut RunConfig| c.dataset_dir = PathBuf::from("/no/such/dir"),
            |c: &mut RunConfig| c.checkpoint_path = PathBuf::from("/no/such/dir/m.dfck"),
        ] {
            let mut broken = c.clone();
            bad(&mut broken);
            assert!(broken.validate().is_err());
        }
        let _ = fs::remove_dir_all(&root);
    }

    #[test]
    fn save_load_round_trip() {
        let mut c = RunConfig::default();
        let root = with_dirs(&mut c, "io");
        c.seed = 1234;
        c.epochs = 3;
        let path = root.join("run.cfg");
        c.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
        let _ = fs::remove_dir_all(&root);
    }

    #[test]
    fn desk_schedule_decays_like_the_long_one() {
        let c = RunConfig::default();
        let s = make_schedule(c.steps, c.beta_start, c.beta_end).unwrap();
        assert!(s.alpha_bar(c.steps) < 1e-4, "alpha_bar_T = {}", s.alpha_bar(c.steps));
    }
}
