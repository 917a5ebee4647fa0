use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::trajsim::config::RunConfig;
use ::trajsim::detectability::detectability_map;
use ::trajsim::geometry::{grid_poses, AngleRange, CANDIDATE_THETAS};
use ::trajsim::metrics;
use ::trajsim::phantom::{build_chest_phantom, read_scene, Phantom, TaskRegion};
use ::trajsim::planner::{planar_trajectory, run_trajectory, Backend, BackendKind, Trajectory, View};
use ::trajsim::projector::{add_poisson_noise, project};
use ::trajsim::surrogate::{FeatureVector, RegressorModel};

fn to_py(e: ::trajsim::Error) -> PyErr {
    match e {
        ::trajsim::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_config(path: Option<PathBuf>) -> PyResult<RunConfig> {
    RunConfig::load(path.as_deref()).map_err(to_py)
}

fn views_to_trajectory(views: Vec<(f64, f64)>) -> Trajectory {
    Trajectory {
        views: views.into_iter().map(|(phi, theta)| View { phi, theta }).collect(),
        backend: BackendKind::Oracle,
        slew_limit_deg: f64::INFINITY,
    }
}

fn trajectory_views(t: &Trajectory) -> Vec<(f64, f64)> {
    t.views.iter().map(|v| (v.phi, v.theta)).collect()
}

/// Trained d2 regressor loaded from a model file.
#[pyclass(name = "Regressor", frozen)]
struct PyRegressor {
    model: RegressorModel,
}

#[pymethods]
impl PyRegressor {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRegressor { model: RegressorModel::load(&path).map_err(to_py)? })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.model.sizes.clone()
    }

    /// Predicted d2 for the eleven candidate tilts.
    fn predict(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        self.model.predict(&FeatureVector(features)).map_err(to_py)
    }
}

/// Phantom plus task region.
#[pyclass(name = "Scene", frozen)]
struct PyScene {
    phantom: Phantom,
    task: TaskRegion,
}

#[pymethods]
impl PyScene {
    /// The seeded chest phantom with two pedicle screws.
    #[staticmethod]
    fn chest(seed: u64) -> Self {
        let (phantom, task) = build_chest_phantom(seed);
        PyScene { phantom, task }
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let (phantom, task) = read_scene(&path).map_err(to_py)?;
        let task = task.ok_or_else(|| PyValueError::new_err(format!("{} has no task line", path.display())))?;
        Ok(PyScene { phantom, task })
    }

    #[getter]
    fn n_primitives(&self) -> usize {
        self.phantom.primitives.len()
    }

    #[getter]
    fn n_metal(&self) -> usize {
        self.phantom.metal_indices.len()
    }

    #[getter]
    fn task_center(&self) -> (f64, f64, f64) {
        let c = self.task.center_mm;
        (c.x, c.y, c.z)
    }

    fn scene_text(&self) -> String {
        self.phantom.to_scene_string(Some(&self.task))
    }

    #[pyo3(signature = (phi, theta, config = None))]
    fn view_d2(&self, phi: f64, theta: f64, config: Option<PathBuf>) -> PyResult<f64> {
        let cfg = load_config(config)?;
        let model = cfg.detect_model(self.task.clone()).map_err(to_py)?;
        model.view_d2(&self.phantom, &cfg.pose_template().with_angles(phi, theta)).map_err(to_py)
    }

    /// `(rows, cols, values)` row-major. Without `i0` the values are line
    /// integrals; with it they are Poisson counts drawn with `noise_seed`.
    #[pyo3(signature = (phi, theta, i0 = None, noise_seed = 0, config = None))]
    fn project(
        &self,
        py: Python<'_>,
        phi: f64,
        theta: f64,
        i0: Option<f64>,
        noise_seed: u64,
        config: Option<PathBuf>,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let pose = load_config(config)?.pose_template().with_angles(phi, theta);
        py.detach(|| {
            let p = project(&self.phantom, &pose)?;
            Ok(match i0 {
                None => (p.line_integrals.rows, p.line_integrals.cols, p.line_integrals.data),
                Some(i0) => {
                    let counts = add_poisson_noise(&p.with_fluence(i0), noise_seed)?.noisy_counts.expect("just drawn");
                    (counts.rows, counts.cols, counts.data.iter().map(|&c| c as f64).collect())
                }
            })
        })
        .map_err(to_py)
    }

    /// `(phis, thetas, d2)` over the configured grid, `phi` outer.
    #[pyo3(signature = (config = None))]
    fn detectability_map(&self, py: Python<'_>, config: Option<PathBuf>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let cfg = load_config(config)?;
        py.detach(|| {
            let scan = cfg.scan_config(&cfg.out_dir)?;
            let map = detectability_map(&self.phantom, &scan.poses()?, &self.task, &scan.detect, &scan.freq_grid)?;
            Ok((map.phis, map.thetas, map.d2))
        })
        .map_err(to_py)
    }

    /// Greedy plan; returns `[(phi, theta), ...]`. The surrogate backend
    /// needs `model` and plans from noisy projections at the config fluence.
    #[pyo3(signature = (theta_init = 90.0, model = None, seed = 0, config = None))]
    fn plan(
        &self,
        py: Python<'_>,
        theta_init: f64,
        model: Option<&PyRegressor>,
        seed: u64,
        config: Option<PathBuf>,
    ) -> PyResult<Vec<(f64, f64)>> {
        let cfg = load_config(config)?;
        let oracle = cfg.detect_model(self.task.clone()).map_err(to_py)?;
        let backend = match model {
            None => Backend::Oracle(&oracle),
            Some(m) => Backend::Surrogate { model: &m.model, i0: cfg.i0, noise: true },
        };
        let pcfg = cfg.planner_config(seed);
        py.detach(|| run_trajectory(&self.phantom, &backend, cfg.plan_phi_start, cfg.plan_phi_end, theta_init, &pcfg))
            .map(|run| trajectory_views(&run.trajectory))
            .map_err(to_py)
    }

    /// Sum of view d2 along a trajectory.
    #[pyo3(signature = (views, config = None))]
    fn accumulated_d2(&self, views: Vec<(f64, f64)>, config: Option<PathBuf>) -> PyResult<f64> {
        let cfg = load_config(config)?;
        let model = cfg.detect_model(self.task.clone()).map_err(to_py)?;
        let template = cfg.pose_template();
        views.iter().map(|&(phi, theta)| model.view_d2(&self.phantom, &template.with_angles(phi, theta))).sum::<::trajsim::Result<f64>>().map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (phi_start = 0.0, phi_end = 200.0))]
fn planar(phi_start: f64, phi_end: f64) -> PyResult<Vec<(f64, f64)>> {
    planar_trajectory(phi_start, phi_end).map(|t| trajectory_views(&t)).map_err(to_py)
}

#[pyfunction]
fn candidate_thetas() -> Vec<f64> {
    CANDIDATE_THETAS.to_vec()
}

/// Number of poses on the full `(phi, theta)` grid of a config.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn grid_size(config: Option<PathBuf>) -> PyResult<usize> {
    let cfg = load_config(config)?;
    grid_poses(
        AngleRange::new(cfg.phi_min, cfg.phi_max),
        AngleRange::new(cfg.theta_min, cfg.theta_max),
        cfg.step_deg,
        &cfg.pose_template(),
    )
    .map(|p| p.len())
    .map_err(to_py)
}

/// Mean absolute tilt difference between two trajectories on the same phi steps.
#[pyfunction]
fn trajectory_distance(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    metrics::trajectory_distance(&views_to_trajectory(a), &views_to_trajectory(b)).map_err(to_py)
}

/// Validates a config file and returns it as TOML with every key filled in.
#[pyfunction]
#[pyo3(signature = (path = None))]
fn resolved_config(path: Option<PathBuf>) -> PyResult<String> {
    Ok(load_config(path)?.to_toml())
}

#[pymodule(name = "trajsim")]
fn trajsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyRegressor>()?;
    m.add_function(wrap_pyfunction!(planar, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_thetas, m)?)?;
    m.add_function(wrap_pyfunction!(grid_size, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_distance, m)?)?;
    m.add_function(wrap_pyfunction!(resolved_config, m)?)?;
    Ok(())
}
