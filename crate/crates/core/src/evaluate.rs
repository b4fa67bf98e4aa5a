//! Split evaluation: per-pair image metrics plus aggregates, in three
//! modes. `Model` samples a field for every ordered within-subject pair
//! with a positive age gap and scores the warped source against the true
//! target (alongside the no-model identity baseline for uplift). `Baseline`
//! scores source vs target directly. `Oracle` replays the stored
//! ground-truth fields on their pairs, which reproduce targets exactly by
//! construction, so PSNR reports the +inf sentinel.

use crate::backbone::DiffKanUnet;
use crate::diffusion::{build_c2, sample_field, NoiseSchedule};
use crate::error::{MorphError, Result};
use crate::ftie::FtieModule;
use crate::kv::KvFile;
use crate::metrics::{jacobian_stats, ncc, psnr, ssim, MetricReport};
use crate::rng::{derive_seed, rng_from};
use crate::synthdata::{load_subject, SubjectRecord};
use crate::warp::{jacobian_determinant, warp_image};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Model,
    Baseline,
    Oracle,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Model => "model",
            EvalMode::Baseline => "baseline",
            EvalMode::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub subject: String,
    pub source_idx: usize,
    pub target_idx: usize,
    pub age_gap: f32,
    pub report: MetricReport,
}

/// Mean and std (population) per metric; infinities collapse to an
/// infinite mean with zero spread when every value is infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub ncc: (f64, f64),
    pub folding: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub pairs: Vec<PairOutcome>,
    pub aggregate: Aggregate,
    /// Identity-baseline aggregate over the same pairs, in `Model` mode.
    pub baseline: Option<Aggregate>,
    /// (label, aggregate) per age-gap bin, ascending.
    pub gap_strata: Vec<(String, Aggregate)>,
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if vals.iter().any(|v| v.is_infinite()) {
        if vals.iter().all(|v| *v == f64::INFINITY) {
            return (f64::INFINITY, 0.0);
        }
        return (f64::INFINITY, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_of(reports: &[&MetricReport]) -> Aggregate {
    let col = |f: fn(&MetricReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(r)).collect() };
    Aggregate {
        n: reports.len(),
        psnr: mean_std(&col(|r| r.psnr_db)),
        ssim: mean_std(&col(|r| r.ssim)),
        ncc: mean_std(&col(|r| r.ncc)),
        folding: mean_std(&col(|r| r.folding_fraction)),
    }
}

const GAP_EDGES: [f32; 3] = [5.0, 10.0, 15.0];

fn compare_images(warped: &crate::Tensor, target: &crate::Tensor) -> Result<(f64, f64, f64)> {
    Ok((
        psnr(warped, target, 1.0)?,
        ssim(warped, target)?,
        ncc(warped, target)?.item()? as f64,
    ))
}

pub struct Evaluator<'a> {
    pub mode: EvalMode,
    pub unet: Option<&'a DiffKanUnet>,
    pub ftie: Option<&'a FtieModule>,
    pub schedule: Option<&'a NoiseSchedule>,
    pub u_max: f32,
    pub aux_slots: usize,
    pub seed: u64,
    pub age_min: f32,
    pub age_max: f32,
}

impl<'a> Evaluator<'a> {
    pub fn baseline(seed: u64) -> Self {
        Evaluator {
            mode: EvalMode::Baseline,
            unet: None,
            ftie: None,
            schedule: None,
            u_max: crate::synthdata::U_MAX,
            aux_slots: 0,
            seed,
            age_min: crate::synthdata::AGE_MIN,
            age_max: crate::synthdata::AGE_MAX,
        }
    }

    fn pairs_of(&self, subject: &SubjectRecord) -> Vec<(usize, usize)> {
        match self.mode {
            // Ages are strictly increasing, so i < j covers exactly the
            // positive-gap ordered pairs.
            EvalMode::Model | EvalMode::Baseline => {
                let n = subject.timepoints.len();
                (0..n)
                    .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                    .collect()
            }
            EvalMode::Oracle => subject.gt_fields.keys().copied().collect(),
        }
    }

    fn eval_pair(
        &self,
        subject: &SubjectRecord,
        i: usize,
        j: usize,
        pair_index: u64,
    ) -> Result<MetricReport> {
        let source = &subject.timepoints[i];
        let target = &subject.timepoints[j];
        let (p, s, c, mean_j, fold) = match self.mode {
            EvalMode::Baseline => {
                let (p, s, c) = compare_images(&source.image, &target.image)?;
                (p, s, c, 1.0, 0.0)
            }
            EvalMode::Oracle => {
                let field = &subject.gt_fields[&(i, j)];
                let px = field.denormalize()?;
                let warped = warp_image(&source.image, &px)?;
                let (p, s, c) = compare_images(&warped, &target.image)?;
                let (mj, fold) = jacobian_stats(&jacobian_determinant(&px)?);
                (p, s, c, mj, fold)
            }
            EvalMode::Model => {
                let unet = self.unet.expect("checked in run()");
                let schedule = self.schedule.expect("checked in run()");
                let aux: Vec<crate::Tensor> = (0..subject.timepoints.len())
                    .filter(|k| *k != i && *k != j)
                    .take(self.aux_slots)
                    .map(|k| subject.timepoints[k].image.clone())
                    .collect();
                let c2 = build_c2(unet, self.ftie, &aux)?;
                let age_norm = (target.age - self.age_min) / (self.age_max - self.age_min);
                let mut rng = rng_from(derive_seed(self.seed, pair_index));
                let (field, _clamped) = sample_field(
                    unet,
                    &source.image,
                    age_norm,
                    &c2,
                    self.u_max,
                    schedule,
                    &mut rng,
                )?;
                let px = field.denormalize()?;
                let warped = warp_image(&source.image, &px)?;
                let (p, s, c) = compare_images(&warped, &target.image)?;
                let (mj, fold) = jacobian_stats(&jacobian_determinant(&px)?);
                (p, s, c, mj, fold)
            }
        };
        Ok(MetricReport {
            psnr_db: p,
            ssim: s,
            ncc: c,
            mean_jacobian: mean_j,
            folding_fraction: fold,
            loss_simple: None,
            loss_df: None,
            loss_bae: None,
        })
    }

    pub fn run(&self, root: &Path, ids: &[String]) -> Result<Evaluation> {
        if ids.is_empty() {
            return Err(MorphError::invalid("evaluation split is empty".to_string()));
        }
        if self.mode == EvalMode::Model && (self.unet.is_none() || self.schedule.is_none()) {
            return Err(MorphError::invalid(
                "model evaluation needs a denoiser and a noise schedule".to_string(),
            ));
        }
        let mut pairs = Vec::new();
        let mut baseline_reports = Vec::new();
        let mut pair_index = 0u64;
        for id in ids {
            let subject = load_subject(root, id)?;
            for (i, j) in self.pairs_of(&subject) {
                let report = self.eval_pair(&subject, i, j, pair_index)?;
                if self.mode == EvalMode::Model {
                    let (p, s, c) = compare_images(
                        &subject.timepoints[i].image,
                        &subject.timepoints[j].image,
                    )?;
                    baseline_reports.push(MetricReport {
                        psnr_db: p,
                        ssim: s,
                        ncc: c,
                        mean_jacobian: 1.0,
                        folding_fraction: 0.0,
                        loss_simple: None,
                        loss_df: None,
                        loss_bae: None,
                    });
                }
                pairs.push(PairOutcome {
                    subject: id.clone(),
                    source_idx: i,
                    target_idx: j,
                    age_gap: subject.timepoints[j].age - subject.timepoints[i].age,
                    report,
                });
                pair_index += 1;
            }
        }
        if pairs.is_empty() {
            return Err(MorphError::invalid(
                "evaluation split produced no pairs".to_string(),
            ));
        }
        let aggregate = aggregate_of(&pairs.iter().map(|p| &p.report).collect::<Vec<_>>());
        let baseline = if self.mode == EvalMode::Model {
            Some(aggregate_of(&baseline_reports.iter().collect::<Vec<_>>()))
        } else {
            None
        };
        let mut strata = Vec::new();
        let mut lo = 0.0f32;
        for edge in GAP_EDGES.iter().copied().chain([f32::INFINITY]) {
            let bucket: Vec<&MetricReport> = pairs
                .iter()
                .filter(|p| p.age_gap >= lo && p.age_gap < edge)
                .map(|p| &p.report)
                .collect();
            if !bucket.is_empty() {
                let label = if edge.is_infinite() {
                    format!("gap_{}_plus", lo as u32)
                } else {
                    format!("gap_{}_{}", lo as u32, edge as u32)
                };
                strata.push((label, aggregate_of(&bucket)));
            }
            lo = edge;
        }
        Ok(Evaluation {
            mode: self.mode,
            pairs,
            aggregate,
            baseline,
            gap_strata: strata,
        })
    }
}

/// Per-pair record column order, ahead of the metric columns.
pub const PAIR_CSV_PREFIX: &str = "subject,source_idx,target_idx,age_gap";

impl Evaluation {
    pub fn csv(&self) -> String {
        let mut out = format!("{},{}\n", PAIR_CSV_PREFIX, MetricReport::CSV_HEADER);
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.subject,
                p.source_idx,
                p.target_idx,
                p.age_gap,
                p.report.csv_line()
            );
        }
        out
    }

    pub fn summary_kv(&self) -> KvFile {
        fn put(kv: &mut KvFile, prefix: &str, a: &Aggregate) {
            for (name, v) in [
                ("psnr", a.psnr),
                ("ssim", a.ssim),
                ("ncc", a.ncc),
                ("folding", a.folding),
            ] {
                kv.set(&format!("{prefix}{name}_mean"), v.0);
                kv.set(&format!("{prefix}{name}_std"), v.1);
            }
        }
        let mut kv = KvFile::new();
        kv.set("mode", self.mode.name());
        kv.set("n_pairs", self.aggregate.n);
        put(&mut kv, "", &self.aggregate);
        if let Some(b) = &self.baseline {
            put(&mut kv, "baseline_", b);
        }
        for (label, a) in &self.gap_strata {
            kv.set(&format!("{label}_n"), a.n);
            kv.set(&format!("{label}_psnr_mean"), a.psnr.0);
            kv.set(&format!("{label}_ssim_mean"), a.ssim.0);
        }
        kv
    }

    /// Write `<stem>.kv` (summary) and `<stem>.csv` (per-pair records).
    pub fn write_report(&self, stem: &Path) -> Result<()> {
        let kv_path = stem.with_extension("kv");
        let csv_path = stem.with_extension("csv");
        self.summary_kv().save(&kv_path)?;
        std::fs::write(&csv_path, self.csv())
            .map_err(|e| MorphError::invalid(format!("write {}: {e}", csv_path.display())))?;
        Ok(())
    }
}
