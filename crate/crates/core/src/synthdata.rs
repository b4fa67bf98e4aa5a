//! Synthetic longitudinal phantoms: subjects with age-parameterized
//! anatomy, exact ground-truth displacement fields between timepoints, and
//! derived segmentation maps. Every later image is constructed by warping
//! the baseline with the stored field, so supervision is exact down to the
//! bit.

use crate::diffusion::TrainSample;
use crate::dftn;
use crate::error::{MorphError, Result};
use crate::kv::KvFile;
use crate::rng::{derive_seed, rng_from, shuffle, uniform};
use crate::tensor::Tensor;
use crate::warp::{warp_image, warp_labels, DeformationField};
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const IMG_SIZE: usize = 64;
pub const AGE_MIN: f32 = 40.0;
pub const AGE_MAX: f32 = 90.0;
/// Ventricle boundary motion in px per year of age gap; also the growth
/// rate of the rendered baseline radius, so warped geometry and analytic
/// geometry agree.
pub const KAPPA: f32 = 0.08;
/// Decay length, in px, of the displacement beyond the moving boundary.
pub const FALLOFF_SIGMA: f32 = 10.0;
/// Field normalization bound in px.
pub const U_MAX: f32 = 10.0;

pub const LABEL_BACKGROUND: f32 = 0.0;
pub const LABEL_BRAIN: f32 = 1.0;
pub const LABEL_VENTRICLE: f32 = 2.0;

/// Map an age in years onto the [0,1] conditioning range.
pub fn age_to_norm(age: f32) -> f32 {
    (age - AGE_MIN) / (AGE_MAX - AGE_MIN)
}

#[derive(Debug, Clone)]
pub struct Anatomy {
    /// (x, y) px.
    pub head_center: (f32, f32),
    /// Ellipse semi-axes (a, b) px.
    pub head_axes: (f32, f32),
    pub ventricle_center: (f32, f32),
    /// Baseline ventricle radius in px, already age-adjusted.
    pub ventricle_radius: f32,
    pub texture_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Timepoint {
    pub age: f32,
    /// [1,64,64] intensities in [0,1].
    pub image: Tensor,
    /// [1,64,64] labels {0,1,2}.
    pub seg: Tensor,
}

#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub seed: u64,
    pub anatomy: Anatomy,
    pub timepoints: Vec<Timepoint>,
    /// Normalized ground-truth fields keyed by (source_idx, target_idx).
    /// Only baseline-sourced pairs (0, k) are stored: those are the pairs
    /// whose warp reproduces the stored target exactly, since every image
    /// is constructed by a single resampling of the baseline.
    pub gt_fields: BTreeMap<(usize, usize), DeformationField>,
}

/// Radial displacement profile: linear ramp from the center to the moved
/// boundary, Gaussian decay beyond it. The linear interior keeps the warp's
/// Jacobian comfortably positive (both eigenvalues = base/(base+m) there).
fn expansion_profile(r: f32, magnitude: f32, peak_radius: f32) -> f32 {
    if magnitude == 0.0 || r <= 0.0 {
        return 0.0;
    }
    if r <= peak_radius {
        magnitude * r / peak_radius
    } else {
        let d = r - peak_radius;
        magnitude * (-d * d / (2.0 * FALLOFF_SIGMA * FALLOFF_SIGMA)).exp()
    }
}

/// Pixel-unit expansion field for an age gap of `delta_years`: pull-warp
/// displacements pointing at the ventricle center, moving its boundary
/// outward by kappa * delta px.
pub fn expansion_field(
    center: (f32, f32),
    base_radius: f32,
    delta_years: f32,
) -> Result<DeformationField> {
    if delta_years < 0.0 || base_radius <= 0.0 {
        return Err(MorphError::invalid(format!(
            "expansion needs delta >= 0 and a positive radius, got {delta_years} / {base_radius}"
        )));
    }
    let m = KAPPA * delta_years;
    let peak = base_radius + m;
    let n = IMG_SIZE;
    let mut u = vec![0.0f32; 2 * n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f32 - center.0;
            let dy = y as f32 - center.1;
            let r = (dx * dx + dy * dy).sqrt();
            let g = expansion_profile(r, m, peak);
            if g > 0.0 {
                u[y * n + x] = -g * dx / r;
                u[n * n + y * n + x] = -g * dy / r;
            }
        }
    }
    DeformationField::new(Tensor::from_vec(u, &[2, n, n])?, U_MAX)
}

/// Clamp-free linear edge: 0 one half-width outside, 1 one half-width
/// inside the boundary.
fn soft_edge(signed_px: f32, width: f32) -> f32 {
    (0.5 + signed_px / width).clamp(0.0, 1.0)
}

fn render_baseline(anatomy: &Anatomy) -> (Tensor, Tensor) {
    let n = IMG_SIZE;
    let mut rng = rng_from(anatomy.texture_seed);
    // Three low-frequency sinusoids give smooth intra-brain texture.
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let v = uniform(&mut rng, 4, 0.0, 1.0);
            (
                0.02 + 0.05 * v[0],                     // cycles/px along x
                0.02 + 0.05 * v[1],                     // cycles/px along y
                std::f32::consts::TAU * v[2],           // phase
                0.03 + 0.03 * v[3],                     // amplitude
            )
        })
        .collect();
    let (cx, cy) = anatomy.head_center;
    let (a, b) = anatomy.head_axes;
    let (vx, vy) = anatomy.ventricle_center;
    let rv = anatomy.ventricle_radius;
    let mut img = vec![0.0f32; n * n];
    let mut seg = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let fx = x as f32;
            let fy = y as f32;
            let q = ((fx - cx) / a).powi(2) + ((fy - cy) / b).powi(2);
            // Signed px distance to the ellipse, approximated with the
            // smaller axis as the radial scale.
            let head_signed = (1.0 - q.sqrt()) * a.min(b);
            let head_alpha = soft_edge(head_signed, 1.5);
            let rvent = ((fx - vx).powi(2) + (fy - vy).powi(2)).sqrt();
            let vent_alpha = soft_edge(rv - rvent, 1.5);
            let mut tex = 0.0f32;
            for (fx_c, fy_c, phase, amp) in &waves {
                tex += amp
                    * (std::f32::consts::TAU * (fx_c * fx + fy_c * fy) + phase).sin();
            }
            let brain = 0.55 + tex;
            let vent = 0.15 + 0.3 * tex;
            let v = head_alpha * (brain * (1.0 - vent_alpha) + vent * vent_alpha);
            img[y * n + x] = v.clamp(0.0, 1.0);
            seg[y * n + x] = if q <= 1.0 {
                if rvent <= rv {
                    LABEL_VENTRICLE
                } else {
                    LABEL_BRAIN
                }
            } else {
                LABEL_BACKGROUND
            };
        }
    }
    (
        Tensor::from_vec(img, &[1, n, n]).expect("static shape"),
        Tensor::from_vec(seg, &[1, n, n]).expect("static shape"),
    )
}

pub fn make_subject(seed: u64, num_timepoints: usize) -> Result<SubjectRecord> {
    if !(2..=4).contains(&num_timepoints) {
        return Err(MorphError::invalid(format!(
            "subjects have 2..=4 timepoints, asked for {num_timepoints}"
        )));
    }
    let mut rng = rng_from(seed);
    // Baseline age leaves room for the largest gap sum so ages stay in
    // range; gaps of 4..14 years keep |u| well under the normalization
    // bound.
    let max_gap = 14.0f32;
    let age0_hi = AGE_MAX - max_gap * (num_timepoints - 1) as f32;
    let age0 = uniform(&mut rng, 1, AGE_MIN, age0_hi)[0];
    let mut ages = vec![age0];
    for _ in 1..num_timepoints {
        let gap = uniform(&mut rng, 1, 4.0, max_gap)[0];
        ages.push(ages.last().unwrap() + gap);
    }
    let head = uniform(&mut rng, 4, 0.0, 1.0);
    let vent = uniform(&mut rng, 3, 0.0, 1.0);
    let anatomy = Anatomy {
        head_center: (30.0 + 4.0 * head[0], 30.0 + 4.0 * head[1]),
        head_axes: (22.0 + 5.0 * head[2], 18.0 + 5.0 * head[3]),
        ventricle_center: (
            30.0 + 4.0 * head[0] + 6.0 * (vent[0] - 0.5),
            30.0 + 4.0 * head[1] + 6.0 * (vent[1] - 0.5),
        ),
        ventricle_radius: 6.0 + KAPPA * (age0 - AGE_MIN) + 0.3 * (vent[2] - 0.5),
        texture_seed: derive_seed(seed, 1),
    };
    let (base_img, base_seg) = render_baseline(&anatomy);
    let mut timepoints = vec![Timepoint {
        age: age0,
        image: base_img.clone(),
        seg: base_seg.clone(),
    }];
    let mut gt_fields = BTreeMap::new();
    let base_labels = base_seg.reshape(&[IMG_SIZE, IMG_SIZE])?;
    for k in 1..num_timepoints {
        let delta = ages[k] - age0;
        let pixels = expansion_field(anatomy.ventricle_center, anatomy.ventricle_radius, delta)?;
        let (stored, clamped) = pixels.normalize()?;
        if clamped > 0 {
            return Err(MorphError::numeric(format!(
                "expansion field exceeded the {U_MAX} px bound for gap {delta}"
            )));
        }
        // Warp with the denormalized stored field, not the raw one, so the
        // stored supervision reproduces the image bit for bit.
        let canon = stored.denormalize()?;
        let image = warp_image(&base_img, &canon)?.detach();
        let seg = warp_labels(&base_labels, &canon, LABEL_BACKGROUND)?
            .reshape(&[1, IMG_SIZE, IMG_SIZE])?
            .detach();
        timepoints.push(Timepoint {
            age: ages[k],
            image,
            seg,
        });
        gt_fields.insert((0, k), stored);
    }
    Ok(SubjectRecord {
        subject_id: String::new(),
        seed,
        anatomy,
        timepoints,
        gt_fields,
    })
}

/// Assemble one training/eval example from a subject. Supervision is
/// baseline-sourced: stored fields exist only for source index 0.
pub fn make_task(
    subject: &SubjectRecord,
    source_idx: usize,
    target_idx: usize,
    num_aux: usize,
) -> Result<TrainSample> {
    let n = subject.timepoints.len();
    if source_idx >= n || target_idx >= n {
        return Err(MorphError::invalid(format!(
            "timepoint index out of range for {n} timepoints"
        )));
    }
    if source_idx == target_idx {
        return Err(MorphError::invalid("source and target must differ".to_string()));
    }
    if source_idx != 0 {
        return Err(MorphError::invalid(
            "stored supervision is baseline-sourced; source index must be 0".to_string(),
        ));
    }
    let phi0 = subject
        .gt_fields
        .get(&(source_idx, target_idx))
        .ok_or_else(|| {
            MorphError::invalid(format!(
                "no stored field for pair {source_idx} -> {target_idx}"
            ))
        })?
        .clone();
    let target = &subject.timepoints[target_idx];
    // Guidance candidates are every other timepoint, youngest first.
    let aux_images: Vec<Tensor> = (0..n)
        .filter(|i| *i != source_idx && *i != target_idx)
        .take(num_aux)
        .map(|i| subject.timepoints[i].image.clone())
        .collect();
    Ok(TrainSample {
        c1: subject.timepoints[source_idx].image.clone(),
        target: target.image.clone(),
        target_seg: target.seg.clone(),
        phi0,
        target_age_years: target.age,
        t_age_norm: age_to_norm(target.age),
        aux_images,
    })
}

#[derive(Debug, Clone)]
pub struct SplitSummary {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub bae: Vec<String>,
}

fn subject_id(idx: usize) -> String {
    format!("s{idx:04}")
}

fn subject_dir(root: &Path, id: &str) -> PathBuf {
    root.join("subjects").join(id)
}

fn write_subject(root: &Path, subject: &SubjectRecord) -> Result<()> {
    let dir = subject_dir(root, &subject.subject_id);
    fs::create_dir_all(&dir)
        .map_err(|e| MorphError::invalid(format!("create {}: {e}", dir.display())))?;
    let mut meta = KvFile::new();
    meta.set("subject_id", &subject.subject_id);
    meta.set("seed", subject.seed);
    meta.set("num_timepoints", subject.timepoints.len());
    meta.set("head_cx", subject.anatomy.head_center.0);
    meta.set("head_cy", subject.anatomy.head_center.1);
    meta.set("head_a", subject.anatomy.head_axes.0);
    meta.set("head_b", subject.anatomy.head_axes.1);
    meta.set("vent_cx", subject.anatomy.ventricle_center.0);
    meta.set("vent_cy", subject.anatomy.ventricle_center.1);
    meta.set("vent_radius", subject.anatomy.ventricle_radius);
    meta.set("texture_seed", subject.anatomy.texture_seed);
    for (k, tp) in subject.timepoints.iter().enumerate() {
        meta.set(&format!("age_{k}"), tp.age);
        dftn::save(&dir.join(format!("t{k}_img.dftn")), &tp.image)?;
        dftn::save(&dir.join(format!("t{k}_seg.dftn")), &tp.seg)?;
    }
    meta.save(&dir.join("meta.kv"))?;
    for ((i, j), field) in &subject.gt_fields {
        dftn::save(&dir.join(format!("field_{i}_{j}.dftn")), &field.u)?;
        let mut side = KvFile::new();
        side.set("normalized", field.normalized);
        side.set("u_max", field.u_max);
        side.set("source_age", subject.timepoints[*i].age);
        side.set("target_age", subject.timepoints[*j].age);
        side.save(&dir.join(format!("field_{i}_{j}.kv")))?;
    }
    Ok(())
}

pub fn load_subject(root: &Path, id: &str) -> Result<SubjectRecord> {
    let dir = subject_dir(root, id);
    let meta = KvFile::load(&dir.join("meta.kv"))?;
    let need_f = |key: &str| -> Result<f32> {
        meta.get_f64(key)?
            .map(|v| v as f32)
            .ok_or_else(|| MorphError::format(format!("subject meta missing `{key}`")))
    };
    let n = meta
        .get_usize("num_timepoints")?
        .ok_or_else(|| MorphError::format("subject meta missing `num_timepoints`".to_string()))?;
    let anatomy = Anatomy {
        head_center: (need_f("head_cx")?, need_f("head_cy")?),
        head_axes: (need_f("head_a")?, need_f("head_b")?),
        ventricle_center: (need_f("vent_cx")?, need_f("vent_cy")?),
        ventricle_radius: need_f("vent_radius")?,
        texture_seed: meta.get_u64("texture_seed")?.unwrap_or(0),
    };
    let mut timepoints = Vec::with_capacity(n);
    for k in 0..n {
        let age = need_f(&format!("age_{k}"))?;
        let image = dftn::load(&dir.join(format!("t{k}_img.dftn")))?;
        let seg = dftn::load(&dir.join(format!("t{k}_seg.dftn")))?;
        timepoints.push(Timepoint { age, image, seg });
    }
    let mut gt_fields = BTreeMap::new();
    for j in 1..n {
        let path = dir.join(format!("field_0_{j}.dftn"));
        if !path.exists() {
            continue;
        }
        let side = KvFile::load(&dir.join(format!("field_0_{j}.kv")))?;
        let u_max = side
            .get_f64("u_max")?
            .ok_or_else(|| MorphError::format("field sidecar missing `u_max`".to_string()))?
            as f32;
        let normalized = side.get_bool("normalized")?.unwrap_or(false);
        let u = dftn::load(&path)?;
        let field = if normalized {
            DeformationField::from_normalized(u, u_max)?.0
        } else {
            DeformationField::new(u, u_max)?
        };
        gt_fields.insert((0, j), field);
    }
    Ok(SubjectRecord {
        subject_id: id.to_string(),
        seed: meta.get_u64("seed")?.unwrap_or(0),
        anatomy,
        timepoints,
        gt_fields,
    })
}

fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        let _ = writeln!(text, "{id}");
    }
    fs::write(path, text).map_err(|e| MorphError::invalid(format!("write {}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| MorphError::invalid(format!("read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Generate `num_subjects` split subjects plus a disjoint set reserved for
/// critic pre-training, write everything under `out_dir`, and return the
/// manifest contents.
pub fn make_dataset(
    out_dir: &Path,
    num_subjects: usize,
    bae_subjects: usize,
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<SplitSummary> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0 && (ft + fv + fe - 1.0).abs() < 1e-9) {
        return Err(MorphError::invalid(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let n_train = (num_subjects as f64 * ft).floor() as usize;
    let n_val = (num_subjects as f64 * fv).floor() as usize;
    let n_test = num_subjects - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 || bae_subjects == 0 {
        return Err(MorphError::invalid(format!(
            "too few subjects: split {n_train}/{n_val}/{n_test} with {bae_subjects} reserved \
             for the critic must all be non-empty"
        )));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| MorphError::invalid(format!("create {}: {e}", out_dir.display())))?;
    let total = num_subjects + bae_subjects;
    let mut ids = Vec::with_capacity(total);
    for idx in 0..total {
        let subject_seed = derive_seed(seed, idx as u64);
        let mut srng = rng_from(subject_seed);
        let tp = srng.random_range(2..=4usize);
        let mut subject = make_subject(subject_seed, tp)?;
        subject.subject_id = subject_id(idx);
        write_subject(out_dir, &subject)?;
        ids.push(subject.subject_id);
    }
    // Split assignment shuffles the main ids only; the trailing block is
    // the critic's disjoint reserve.
    let mut main: Vec<String> = ids[..num_subjects].to_vec();
    let mut srng = rng_from(derive_seed(seed, u64::MAX));
    shuffle(&mut srng, &mut main);
    let train = main[..n_train].to_vec();
    let val = main[n_train..n_train + n_val].to_vec();
    let test = main[n_train + n_val..].to_vec();
    let bae = ids[num_subjects..].to_vec();
    write_manifest(&out_dir.join("train.txt"), &train)?;
    write_manifest(&out_dir.join("val.txt"), &val)?;
    write_manifest(&out_dir.join("test.txt"), &test)?;
    write_manifest(&out_dir.join("bae.txt"), &bae)?;
    let mut info = KvFile::new();
    info.set("num_subjects", num_subjects);
    info.set("bae_subjects", bae_subjects);
    info.set("seed", seed);
    info.set("f_train", ft);
    info.set("f_val", fv);
    info.set("f_test", fe);
    info.set("image_size", IMG_SIZE);
    info.set("u_max", U_MAX);
    info.save(&out_dir.join("dataset.kv"))?;
    Ok(SplitSummary {
        train,
        val,
        test,
        bae,
    })
}

/// (image, age) pairs across every timepoint of the listed subjects.
pub fn age_pairs(root: &Path, ids: &[String]) -> Result<Vec<(Tensor, f32)>> {
    let mut pairs = Vec::new();
    for id in ids {
        let s = load_subject(root, id)?;
        for tp in &s.timepoints {
            pairs.push((tp.image.clone(), tp.age));
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::jacobian_stats;
    use crate::warp::jacobian_determinant;

    fn scratch(name: &str) -> PathBuf {
        let p = std::env::temp_dir().join(format!(
            "morphdiff-synthdata-{}-{name}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&p);
        fs::create_dir_all(&p).unwrap();
        p
    }

    #[test]
    fn subject_construction_is_deterministic() {
        let a = make_subject(7, 3).unwrap();
        let b = make_subject(7, 3).unwrap();
        for (ta, tb) in a.timepoints.iter().zip(&b.timepoints) {
            assert_eq!(ta.age, tb.age);
            assert_eq!(ta.image.to_vec(), tb.image.to_vec());
            assert_eq!(ta.seg.to_vec(), tb.seg.to_vec());
        }
        for (k, f) in &a.gt_fields {
            assert_eq!(f.u.to_vec(), b.gt_fields[k].u.to_vec());
        }
        assert!(make_subject(0, 1).is_err());
        assert!(make_subject(0, 5).is_err());
    }

    #[test]
    fn ages_shapes_and_labels_respect_contracts() {
        for seed in 0..10u64 {
            let n = 2 + (seed % 3) as usize;
            let s = make_subject(seed, n).unwrap();
            assert_eq!(s.timepoints.len(), n);
            let ages: Vec<f32> = s.timepoints.iter().map(|t| t.age).collect();
            for w in ages.windows(2) {
                assert!(w[0] < w[1], "ages not increasing: {ages:?}");
            }
            assert!(ages[0] >= AGE_MIN && *ages.last().unwrap() <= AGE_MAX);
            for tp in &s.timepoints {
                assert_eq!(tp.image.shape(), &[1, IMG_SIZE, IMG_SIZE]);
                assert_eq!(tp.seg.shape(), &[1, IMG_SIZE, IMG_SIZE]);
                assert!(tp.image.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(tp
                    .seg
                    .to_vec()
                    .iter()
                    .all(|v| [LABEL_BACKGROUND, LABEL_BRAIN, LABEL_VENTRICLE].contains(v)));
            }
            assert_eq!(s.gt_fields.len(), n - 1);
            for ((i, j), f) in &s.gt_fields {
                assert_eq!(*i, 0);
                assert!(*j >= 1 && *j < n);
                assert!(f.normalized);
                assert_eq!(f.u_max, U_MAX);
            }
        }
    }

    #[test]
    fn zero_gap_field_is_identity() {
        let f = expansion_field((32.0, 32.0), 7.0, 0.0).unwrap();
        assert!(f.u.to_vec().iter().all(|v| *v == 0.0));
        let s = make_subject(3, 2).unwrap();
        let out = warp_image(&s.timepoints[0].image, &f).unwrap();
        assert_eq!(out.to_vec(), s.timepoints[0].image.to_vec());
        assert!(expansion_field((32.0, 32.0), 7.0, -1.0).is_err());
    }

    #[test]
    fn stored_pairs_reproduce_targets_bitwise() {
        for seed in [11u64, 12, 13] {
            let s = make_subject(seed, 4).unwrap();
            for ((i, j), field) in &s.gt_fields {
                let canon = field.denormalize().unwrap();
                let warped = warp_image(&s.timepoints[*i].image, &canon).unwrap();
                assert_eq!(
                    warped.to_vec(),
                    s.timepoints[*j].image.to_vec(),
                    "seed {seed} pair {i}->{j}"
                );
            }
        }
    }

    #[test]
    fn fields_are_plausible_and_ventricles_grow() {
        for seed in 20..26u64 {
            let s = make_subject(seed, 4).unwrap();
            for field in s.gt_fields.values() {
                let px = field.denormalize().unwrap();
                let max_u = px.u.to_vec().iter().fold(0.0f32, |m, v| m.max(v.abs()));
                assert!(max_u <= U_MAX, "|u| {max_u} exceeds bound");
                let det = jacobian_determinant(&px).unwrap();
                let min_det = det.to_vec().iter().copied().fold(f32::INFINITY, f32::min);
                assert!(min_det > 0.2, "seed {seed}: min det {min_det}");
                let (_, folding) = jacobian_stats(&det);
                assert_eq!(folding, 0.0);
            }
            let counts: Vec<usize> = s
                .timepoints
                .iter()
                .map(|t| t.seg.to_vec().iter().filter(|v| **v == LABEL_VENTRICLE).count())
                .collect();
            for w in counts.windows(2) {
                assert!(w[0] <= w[1], "ventricle shrank: {counts:?}");
            }
            assert!(counts[0] < *counts.last().unwrap(), "no growth: {counts:?}");
        }
    }

    #[test]
    fn task_assembly_contract() {
        let s = make_subject(31, 3).unwrap();
        let task = make_task(&s, 0, 2, 3).unwrap();
        assert_eq!(task.aux_images.len(), 1); // only t1 remains
        assert_eq!(task.target_age_years, s.timepoints[2].age);
        assert!((0.0..=1.0).contains(&task.t_age_norm));
        assert!(task.phi0.normalized);
        let warped = warp_image(&task.c1, &task.phi0.denormalize().unwrap()).unwrap();
        assert_eq!(warped.to_vec(), task.target.to_vec());
        let two = make_subject(32, 2).unwrap();
        assert_eq!(make_task(&two, 0, 1, 3).unwrap().aux_images.len(), 0);
        assert!(make_task(&s, 0, 0, 1).is_err());
        assert!(make_task(&s, 1, 2, 1).is_err());
        assert!(make_task(&s, 0, 9, 1).is_err());
    }

    #[test]
    fn dataset_split_layout_and_loading() {
        let dir = scratch("split");
        let sum = make_dataset(&dir, 10, 3, 99, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(
            (sum.train.len(), sum.val.len(), sum.test.len(), sum.bae.len()),
            (7, 1, 2, 3)
        );
        let mut all: Vec<String> = sum
            .train
            .iter()
            .chain(&sum.val)
            .chain(&sum.test)
            .chain(&sum.bae)
            .cloned()
            .collect();
        all.sort();
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(all, dedup, "split overlap");
        assert_eq!(read_manifest(&dir.join("train.txt")).unwrap(), sum.train);
        assert_eq!(read_manifest(&dir.join("bae.txt")).unwrap(), sum.bae);
        let s = load_subject(&dir, &sum.train[0]).unwrap();
        assert!(!s.timepoints.is_empty());
        assert_eq!(s.gt_fields.len(), s.timepoints.len() - 1);
        for f in s.gt_fields.values() {
            assert!(f.normalized);
        }
        // Round trip: loaded subject equals the regenerated one.
        let regen = {
            let idx: usize = sum.train[0][1..].parse().unwrap();
            let seed = derive_seed(99, idx as u64);
            let mut r = rng_from(seed);
            let tp = r.random_range(2..=4usize);
            make_subject(seed, tp).unwrap()
        };
        for (a, b) in s.timepoints.iter().zip(&regen.timepoints) {
            assert_eq!(a.image.to_vec(), b.image.to_vec());
            assert_eq!(a.age, b.age);
        }
        let pairs = age_pairs(&dir, &sum.bae).unwrap();
        assert!(pairs.len() >= 2 * sum.bae.len());
        assert!(make_dataset(&dir.join("tiny"), 2, 1, 0, (0.7, 0.1, 0.2)).is_err());
        assert!(make_dataset(&dir.join("frac"), 10, 2, 0, (0.5, 0.2, 0.2)).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let d1 = scratch("bytes-a");
        let d2 = scratch("bytes-b");
        make_dataset(&d1, 4, 2, 5, (0.5, 0.25, 0.25)).unwrap();
        make_dataset(&d2, 4, 2, 5, (0.5, 0.25, 0.25)).unwrap();
        let mut files = Vec::new();
        fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
            for entry in fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    walk(base, &p, out);
                } else {
                    out.push(p.strip_prefix(base).unwrap().to_path_buf());
                }
            }
        }
        walk(&d1, &d1, &mut files);
        files.sort();
        assert!(files.len() > 10);
        for rel in &files {
            let a = fs::read(d1.join(rel)).unwrap();
            let b = fs::read(d2.join(rel)).unwrap();
            assert_eq!(a, b, "file {} differs", rel.display());
        }
        let _ = fs::remove_dir_all(&d1);
        let _ = fs::remove_dir_all(&d2);
    }

    #[test]
    fn ventricle_area_predicts_age() {
        // Linear regression of age on label-2 pixel count across subjects;
        // the age signal must be strong for critic training to make sense.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seed in 40..54u64 {
            let n = 2 + (seed % 3) as usize;
            let s = make_subject(seed, n).unwrap();
            for tp in &s.timepoints {
                let area = tp
                    .seg
                    .to_vec()
                    .iter()
                    .filter(|v| **v == LABEL_VENTRICLE)
                    .count() as f64;
                xs.push(area);
                ys.push(tp.age as f64);
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!(r2 > 0.8, "area-age R^2 {r2}");
    }
}
