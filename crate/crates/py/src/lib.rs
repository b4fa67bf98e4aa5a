//! Python bindings for the deformation-field diffusion library.
//!
//! The module mirrors the Rust surface a script actually needs: tensors and
//! their on-disk format, deformation fields with the normalization contract,
//! warping and quality metrics, noise schedules, dataset generation, sampling
//! from a trained checkpoint, and the gradient-check registry.

use morphdiff_core::backbone::{DiffKanUnet, UnetConfig};
use morphdiff_core::checkpoint::Checkpoint;
use morphdiff_core::diffusion::{build_c2, make_schedule, sample_field, NoiseSchedule};
use morphdiff_core::error::MorphError;
use morphdiff_core::ftie::{FtieConfig, FtieModule};
use morphdiff_core::rng::{rng_from, Prng};
use morphdiff_core::warp::DeformationField;
use morphdiff_core::{dftn, gradchecks, metrics, synthdata, warp, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::collections::HashMap;
use std::path::PathBuf;

fn to_py(e: MorphError) -> PyErr {
    match e {
        MorphError::Io(_) => PyIOError::new_err(e.to_string()),
        MorphError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense f32 tensor; `tolist` flattens in row-major order.
#[pyclass(name = "Tensor", unsendable)]
pub struct PyTensor {
    pub inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::from_vec(data, &shape).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f32> {
        self.inner.item().map_err(to_py)
    }

    /// Read a `.dftn` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dftn::load(&path).map_err(to_py)?,
        })
    }

    /// Write a `.dftn` file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        dftn::save(&path, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Deformation field `[2,H,W]`; channel 0 is the x displacement, channel 1
/// the y displacement. `normalized` fields hold values in [-1,1] scaled by
/// `u_max`; pixel-unit fields are what warping accepts.
#[pyclass(name = "Field", unsendable)]
pub struct PyField {
    inner: DeformationField,
}

#[pymethods]
impl PyField {
    /// Wrap a pixel-unit displacement tensor.
    #[staticmethod]
    fn from_pixels(u: &PyTensor, u_max: f32) -> PyResult<Self> {
        Ok(Self {
            inner: DeformationField::new(u.inner.clone(), u_max).map_err(to_py)?,
        })
    }

    /// Wrap a normalized displacement tensor, clamping to [-1,1].
    /// Returns `(field, clamped_count)`.
    #[staticmethod]
    fn from_normalized(u: &PyTensor, u_max: f32) -> PyResult<(Self, usize)> {
        let (inner, clamped) =
            DeformationField::from_normalized(u.inner.clone(), u_max).map_err(to_py)?;
        Ok((Self { inner }, clamped))
    }

    #[getter]
    fn u(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.u.clone(),
        }
    }

    #[getter]
    fn u_max(&self) -> f32 {
        self.inner.u_max
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.normalized
    }

    fn normalize(&self) -> PyResult<(Self, usize)> {
        let (inner, clamped) = self.inner.normalize().map_err(to_py)?;
        Ok((Self { inner }, clamped))
    }

    fn denormalize(&self) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.denormalize().map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Field(h={}, w={}, u_max={}, normalized={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.u_max,
            self.inner.normalized
        )
    }
}

/// Variance schedule with 1-based step indexing.
#[pyclass(name = "Schedule", unsendable)]
pub struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> f64 {
        self.inner.beta(t)
    }

    fn alpha(&self, t: usize) -> f64 {
        self.inner.alpha(t)
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }

    fn posterior_var(&self, t: usize) -> f64 {
        self.inner.posterior_var(t)
    }
}

/// Denoiser plus its optional guidance encoder, ready for sampling.
#[pyclass(unsendable)]
pub struct Model {
    unet: DiffKanUnet,
    ftie: Option<FtieModule>,
    epoch: u64,
}

impl Model {
    fn sample_inner(
        &self,
        py: Python<'_>,
        source: &PyTensor,
        target_age: f32,
        aux: &[Py<PyTensor>],
        seed: u64,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        u_max: f32,
        age_min: f32,
        age_max: f32,
    ) -> PyResult<(DeformationField, f64)> {
        let slots = self.ftie.as_ref().map(|f| f.config.num_slots).unwrap_or(0);
        if aux.len() > slots {
            return Err(PyValueError::new_err(format!(
                "{} auxiliary images given but the model accepts at most {slots}",
                aux.len()
            )));
        }
        if age_min >= age_max {
            return Err(PyValueError::new_err("age_min must be below age_max"));
        }
        let aux: Vec<Tensor> = aux.iter().map(|t| t.borrow(py).inner.clone()).collect();
        let c2 = build_c2(&self.unet, self.ftie.as_ref(), &aux).map_err(to_py)?;
        let schedule = make_schedule(steps, beta_start, beta_end).map_err(to_py)?;
        let age_norm = (target_age - age_min) / (age_max - age_min);
        let mut rng: Prng = rng_from(seed);
        let (field, clamped) = sample_field(
            &self.unet,
            &source.inner,
            age_norm,
            &c2,
            u_max,
            &schedule,
            &mut rng,
        )
        .map_err(to_py)?;
        Ok((field.denormalize().map_err(to_py)?, clamped))
    }
}

#[pymethods]
impl Model {
    /// Restore from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let epoch = ck.epoch;
        let (unet, ftie, _) = ck.build_models().map_err(to_py)?;
        Ok(Self { unet, ftie, epoch })
    }

    /// Freshly initialized weights, mostly useful for exercising the
    /// sampling machinery without a training run.
    #[staticmethod]
    #[pyo3(signature = (seed, base_width=4, emb_dim=8, guidance_dim=6,
                        use_kan=true, use_ftie=true, num_slots=3, feat_dim=8))]
    #[allow(clippy::too_many_arguments)]
    fn fresh(
        seed: u64,
        base_width: usize,
        emb_dim: usize,
        guidance_dim: usize,
        use_kan: bool,
        use_ftie: bool,
        num_slots: usize,
        feat_dim: usize,
    ) -> PyResult<Self> {
        let mut rng = rng_from(seed);
        let cfg = UnetConfig {
            base_width,
            emb_dim,
            guidance_dim,
            use_kan,
            use_ftie,
        };
        let unet = DiffKanUnet::new(cfg, &mut rng).map_err(to_py)?;
        let ftie = if use_ftie {
            Some(
                FtieModule::new(
                    FtieConfig {
                        num_slots,
                        feat_dim,
                        guidance_dim,
                    },
                    &mut rng,
                )
                .map_err(to_py)?,
            )
        } else {
            None
        };
        Ok(Self { unet, ftie, epoch: 0 })
    }

    #[getter]
    fn use_kan(&self) -> bool {
        self.unet.config.use_kan
    }

    #[getter]
    fn use_ftie(&self) -> bool {
        self.unet.config.use_ftie
    }

    #[getter]
    fn base_width(&self) -> usize {
        self.unet.config.base_width
    }

    #[getter]
    fn aux_slots(&self) -> usize {
        self.ftie.as_ref().map(|f| f.config.num_slots).unwrap_or(0)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Ancestral sampling of a deformation field for `source` at
    /// `target_age`. Returns `(pixel_unit_field, clamped_fraction)`.
    #[pyo3(signature = (source, target_age, aux=Vec::new(), seed=0, steps=100,
                        beta_start=1e-3, beta_end=0.2, u_max=10.0,
                        age_min=40.0, age_max=90.0))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        py: Python<'_>,
        source: &PyTensor,
        target_age: f32,
        aux: Vec<Py<PyTensor>>,
        seed: u64,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        u_max: f32,
        age_min: f32,
        age_max: f32,
    ) -> PyResult<(PyField, f64)> {
        let (field, clamped) = self.sample_inner(
            py, source, target_age, &aux, seed, steps, beta_start, beta_end, u_max, age_min,
            age_max,
        )?;
        Ok((PyField { inner: field }, clamped))
    }

    /// Sample a field and apply it to `source` in one call.
    /// Returns `(completed_image, clamped_fraction)`.
    #[pyo3(signature = (source, target_age, aux=Vec::new(), seed=0, steps=100,
                        beta_start=1e-3, beta_end=0.2, u_max=10.0,
                        age_min=40.0, age_max=90.0))]
    #[allow(clippy::too_many_arguments)]
    fn complete(
        &self,
        py: Python<'_>,
        source: &PyTensor,
        target_age: f32,
        aux: Vec<Py<PyTensor>>,
        seed: u64,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        u_max: f32,
        age_min: f32,
        age_max: f32,
    ) -> PyResult<(PyTensor, f64)> {
        let (field, clamped) = self.sample_inner(
            py, source, target_age, &aux, seed, steps, beta_start, beta_end, u_max, age_min,
            age_max,
        )?;
        let warped = warp::warp_image(&source.inner, &field).map_err(to_py)?;
        Ok((PyTensor { inner: warped }, clamped))
    }
}

#[pyfunction]
fn warp_image(img: &PyTensor, field: &PyField) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: warp::warp_image(&img.inner, &field.inner).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (labels, field, background=0.0))]
fn warp_labels(labels: &PyTensor, field: &PyField, background: f32) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: warp::warp_labels(&labels.inner, &field.inner, background).map_err(to_py)?,
    })
}

#[pyfunction]
fn jacobian_determinant(field: &PyField) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: warp::jacobian_determinant(&field.inner).map_err(to_py)?,
    })
}

/// `(mean_determinant, folding_fraction)` of a determinant map.
#[pyfunction]
fn jacobian_stats(det: &PyTensor) -> (f64, f64) {
    metrics::jacobian_stats(&det.inner)
}

#[pyfunction]
#[pyo3(signature = (a, b, max_val=1.0))]
fn psnr(a: &PyTensor, b: &PyTensor, max_val: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, max_val).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ncc(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    let v = metrics::ncc(&a.inner, &b.inner).map_err(to_py)?;
    Ok(v.item().map_err(to_py)? as f64)
}

#[pyfunction(name = "make_schedule")]
fn make_schedule_py(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<PySchedule> {
    Ok(PySchedule {
        inner: make_schedule(steps, beta_start, beta_end).map_err(to_py)?,
    })
}

/// Generate a synthetic longitudinal dataset; returns the split manifests
/// as `{split: [subject_id, ...]}`.
#[pyfunction]
#[pyo3(signature = (out_dir, num_subjects, bae_subjects=3, seed=0,
                    fractions=(0.7, 0.1, 0.2)))]
fn generate_dataset(
    out_dir: PathBuf,
    num_subjects: usize,
    bae_subjects: usize,
    seed: u64,
    fractions: (f64, f64, f64),
) -> PyResult<HashMap<String, Vec<String>>> {
    let summary =
        synthdata::make_dataset(&out_dir, num_subjects, bae_subjects, seed, fractions)
            .map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("train".to_string(), summary.train);
    out.insert("val".to_string(), summary.val);
    out.insert("test".to_string(), summary.test);
    out.insert("bae".to_string(), summary.bae);
    Ok(out)
}

/// Run every registered finite-difference gradient check; returns
/// `[(name, rel_err, passed)]`.
#[pyfunction]
fn run_gradchecks() -> Vec<(String, f64, bool)> {
    gradchecks::run_checks(&gradchecks::registry())
        .into_iter()
        .map(|o| (o.name, o.rel_err, o.passed))
        .collect()
}

#[pymodule]
fn morphdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(warp_image, m)?)?;
    m.add_function(wrap_pyfunction!(warp_labels, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_determinant, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_stats, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule_py, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradchecks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
