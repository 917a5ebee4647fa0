//! Task-based detectability index of a single view.
//!
//! A view delivers Fisher information along the soft central-slice slab
//! perpendicular to the ray through the task region. The quadratically
//! penalized-likelihood local model turns that into
//!
//! ```text
//! mtf(f) = A / (A + beta R),   nps(f) = A / (A + beta R)^2
//! d2     = [sum mtf^2 w^2 df^3]^2 / sum nps mtf^2 w^2 df^3
//! ```
//!
//! where `R(f) = sum_k 4 sin^2(pi f_k dx)` is the first-order difference
//! penalty spectrum and `w` the task weighting. Frequencies are sampled on a
//! cubic grid aligned with the view: the third axis runs along the central
//! ray, so the slab is `|f_3|` small.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CArmPose, Vec3};
use crate::phantom::{line_integral_through, Phantom, TaskProfile, TaskRegion};
use crate::render;

const ANGLE_MATCH_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub n: usize,
    /// Spacing, mm^-1.
    pub df: f64,
}

impl FrequencyGrid {
    pub fn new(n: usize, df: f64) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("frequency grid size {n} must be even and >= 8")));
        }
        if !(df > 0.0) {
            return Err(Error::InvalidGrid(format!("frequency spacing {df} must be positive")));
        }
        Ok(FrequencyGrid { n, df })
    }

    /// Grid reaching the Nyquist frequency of voxels of size `voxel_mm`.
    pub fn for_voxel(n: usize, voxel_mm: f64) -> Result<Self> {
        FrequencyGrid::new(n, 1.0 / (n as f64 * voxel_mm))
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sample positions along one axis, `(k - n/2) df`.
    pub fn axis(&self) -> Vec<f64> {
        (0..self.n).map(|k| (k as f64 - (self.n / 2) as f64) * self.df).collect()
    }

    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.n + b) * self.n + c
    }

    /// Frequency of every grid point, in raster order.
    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        let axis = self.axis();
        let n = self.n;
        (0..self.len()).map(move |i| [axis[i / (n * n)], axis[(i / n) % n], axis[i % n]])
    }

    pub fn cell_volume(&self) -> f64 {
        self.df * self.df * self.df
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFunction {
    pub grid: FrequencyGrid,
    pub w: Vec<f64>,
}

impl TaskFunction {
    pub fn new(grid: FrequencyGrid, w: Vec<f64>) -> Result<Self> {
        if w.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("task raster {} vs grid {}", w.len(), grid.len())));
        }
        if w.iter().any(|v| !(*v >= 0.0)) || !w.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidArgument("task weights must be non-negative and not all zero".into()));
        }
        Ok(TaskFunction { grid, w })
    }

    pub fn scaled(&self, c: f64) -> TaskFunction {
        TaskFunction { grid: self.grid, w: self.w.iter().map(|v| v * c).collect() }
    }
}

/// Fourier magnitude of a Gaussian blob of spatial scale `radius_mm`, peak 1.
pub fn task_function_gaussian(task: &TaskRegion, grid: &FrequencyGrid) -> TaskFunction {
    let TaskProfile::GaussianBlob = task.profile;
    let k = 2.0 * PI * PI * task.radius_mm * task.radius_mm;
    let mut w: Vec<f64> = grid.points().map(|f| (-k * (f[0] * f[0] + f[1] * f[1] + f[2] * f[2])).exp()).collect();
    let peak = w.iter().cloned().fold(0.0, f64::max);
    w.iter_mut().for_each(|v| *v /= peak);
    TaskFunction { grid: *grid, w }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectabilityConfig {
    /// Regularization strength, photons.
    pub beta: f64,
    /// Gaussian width of the central-slice slab, mm^-1.
    pub slab_sigma: f64,
    /// Isotropic Fisher floor, photons.
    pub epsilon_a: f64,
    /// Photons per pixel emitted toward the detector.
    pub i0: f64,
    /// Voxel size of the penalty, mm.
    pub voxel_mm: f64,
}

impl Default for DetectabilityConfig {
    fn default() -> Self {
        let grid = FrequencyGrid::default();
        DetectabilityConfig { beta: 1e3, slab_sigma: 2.0 * grid.df, epsilon_a: 1.0, i0: 20000.0, voxel_mm: 1.0 }
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid { n: 32, df: 1.0 / 32.0 }
    }
}

impl DetectabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if !(self.beta > 0.0) {
            return bad("beta", "must be positive");
        }
        if !(self.slab_sigma > 0.0) {
            return bad("slab_sigma", "must be positive");
        }
        if !(self.epsilon_a >= 0.0) {
            return bad("epsilon_a", "must be non-negative");
        }
        if !(self.i0 > 0.0) {
            return bad("i0", "must be positive");
        }
        if !(self.voxel_mm > 0.0) {
            return bad("voxel_mm", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    pub grid: FrequencyGrid,
    pub a: Vec<f64>,
    pub mtf: Vec<f64>,
    pub nps: Vec<f64>,
}

/// Mean detected counts along the ray from the source through `task_center`.
pub fn roi_fluence(phantom: &Phantom, pose: &CArmPose, task_center: &Vec3, i0: f64) -> f64 {
    let p = line_integral_through(phantom, &pose.source_position(), task_center);
    i0 * (-p).exp()
}

fn slab_profile(grid: &FrequencyGrid, sigma: f64) -> Vec<f64> {
    grid.points().map(|f| (-f[2] * f[2] / (2.0 * sigma * sigma)).exp()).collect()
}

/// `R(f) = sum_k 4 sin^2(pi f_k dx)`.
pub fn penalty_spectrum(grid: &FrequencyGrid, voxel_mm: f64) -> Vec<f64> {
    grid.points()
        .map(|f| f.iter().map(|fk| 4.0 * (PI * fk * voxel_mm).sin().powi(2)).sum())
        .collect()
}

fn fisher_from_fluence(ybar: f64, slab: &[f64], epsilon_a: f64) -> Vec<f64> {
    slab.iter().map(|g| ybar * g + epsilon_a).collect()
}

/// Fisher information `A(f) = ybar G(f_3) + epsilon_a` delivered by one view.
pub fn view_fisher_info(
    phantom: &Phantom,
    pose: &CArmPose,
    task_center: &Vec3,
    cfg: &DetectabilityConfig,
    grid: &FrequencyGrid,
) -> Result<Vec<f64>> {
    pose.validate()?;
    let ybar = roi_fluence(phantom, pose, task_center, cfg.i0);
    Ok(fisher_from_fluence(ybar, &slab_profile(grid, cfg.slab_sigma), cfg.epsilon_a))
}

fn response_with_penalty(a: &[f64], penalty: &[f64], grid: &FrequencyGrid, beta: f64) -> Result<SpectralResponse> {
    if a.len() != grid.len() || penalty.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!("Fisher raster {} vs grid {}", a.len(), grid.len())));
    }
    let mut mtf = Vec::with_capacity(a.len());
    let mut nps = Vec::with_capacity(a.len());
    for (&ai, &ri) in a.iter().zip(penalty) {
        if !(ai >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative Fisher information {ai}")));
        }
        let denom = ai + beta * ri;
        if denom == 0.0 {
            return Err(Error::Degenerate("zero Fisher information at zero penalty".into()));
        }
        mtf.push(ai / denom);
        nps.push(ai / (denom * denom));
    }
    Ok(SpectralResponse { grid: *grid, a: a.to_vec(), mtf, nps })
}

pub fn spectral_response(a: &[f64], grid: &FrequencyGrid, cfg: &DetectabilityConfig) -> Result<SpectralResponse> {
    response_with_penalty(a, &penalty_spectrum(grid, cfg.voxel_mm), grid, cfg.beta)
}

/// Riemann-sum detectability index.
pub fn detectability_index(sr: &SpectralResponse, task: &TaskFunction) -> Result<f64> {
    if sr.grid != task.grid {
        return Err(Error::ShapeMismatch("spectral response and task use different grids".into()));
    }
    let dv = sr.grid.cell_volume();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..task.w.len() {
        let mw = sr.mtf[i] * sr.mtf[i] * task.w[i] * task.w[i];
        num += mw;
        den += sr.nps[i] * mw;
    }
    num *= dv;
    den *= dv;
    if num == 0.0 {
        return Ok(0.0);
    }
    if den == 0.0 {
        return Err(Error::Degenerate("zero noise with non-zero signal".into()));
    }
    Ok(num * num / den)
}

/// Cached per-task state for evaluating many views.
#[derive(Clone, Debug)]
pub struct DetectabilityModel {
    pub cfg: DetectabilityConfig,
    pub grid: FrequencyGrid,
    pub task: TaskRegion,
    task_fn: TaskFunction,
    slab: Vec<f64>,
    penalty: Vec<f64>,
}

impl DetectabilityModel {
    pub fn new(cfg: DetectabilityConfig, grid: FrequencyGrid, task: TaskRegion) -> Result<Self> {
        cfg.validate()?;
        let task_fn = task_function_gaussian(&task, &grid);
        Ok(DetectabilityModel {
            slab: slab_profile(&grid, cfg.slab_sigma),
            penalty: penalty_spectrum(&grid, cfg.voxel_mm),
            cfg,
            grid,
            task,
            task_fn,
        })
    }

    pub fn task_function(&self) -> &TaskFunction {
        &self.task_fn
    }

    /// d2 of a view whose central ray delivers `ybar` mean counts.
    pub fn d2_from_fluence(&self, ybar: f64) -> Result<f64> {
        let a = fisher_from_fluence(ybar, &self.slab, self.cfg.epsilon_a);
        let sr = response_with_penalty(&a, &self.penalty, &self.grid, self.cfg.beta)?;
        detectability_index(&sr, &self.task_fn)
    }

    pub fn view_d2(&self, phantom: &Phantom, pose: &CArmPose) -> Result<f64> {
        pose.validate()?;
        let ybar = roi_fluence(phantom, pose, &self.task.center_mm, self.cfg.i0);
        self.d2_from_fluence(ybar).map_err(|e| e.at_pose(pose.phi_deg, pose.theta_deg))
    }
}

/// d2 sampled on a rectangular `(phi, theta)` grid, `phi` outer.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectabilityMap {
    pub phis: Vec<f64>,
    pub thetas: Vec<f64>,
    pub d2: Vec<f64>,
}

fn find_angle(values: &[f64], x: f64) -> Option<usize> {
    values.iter().position(|v| (v - x).abs() < ANGLE_MATCH_TOL)
}

impl DetectabilityMap {
    pub fn new(phis: Vec<f64>, thetas: Vec<f64>, d2: Vec<f64>) -> Result<Self> {
        if d2.len() != phis.len() * thetas.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} map",
                d2.len(),
                phis.len(),
                thetas.len()
            )));
        }
        Ok(DetectabilityMap { phis, thetas, d2 })
    }

    /// Exact lookup at a grid node.
    pub fn get(&self, phi: f64, theta: f64) -> Option<f64> {
        let i = find_angle(&self.phis, phi)?;
        let j = find_angle(&self.thetas, theta)?;
        Some(self.d2[i * self.thetas.len() + j])
    }

    /// Lookup with `phi` taken modulo 360.
    pub fn get_wrapped(&self, phi: f64, theta: f64) -> Option<f64> {
        self.get(phi.rem_euclid(360.0), theta)
    }

    /// Bilinear interpolation inside the grid's bounding box.
    pub fn bilinear(&self, phi: f64, theta: f64) -> Result<f64> {
        if let Some(v) = self.get(phi, theta) {
            return Ok(v);
        }
        let bracket = |values: &[f64], x: f64, what: &str| -> Result<(usize, f64)> {
            let n = values.len();
            if n < 2 || x < values[0] || x > values[n - 1] {
                return Err(Error::InvalidArgument(format!("{what} = {x} outside the map grid")));
            }
            let k = values.windows(2).position(|w| x <= w[1]).unwrap_or(n - 2);
            Ok((k, (x - values[k]) / (values[k + 1] - values[k])))
        };
        let (i, s) = bracket(&self.phis, phi, "phi")?;
        let (j, t) = bracket(&self.thetas, theta, "theta")?;
        let nt = self.thetas.len();
        let v = |a: usize, b: usize| self.d2[a * nt + b];
        Ok((1.0 - s) * (1.0 - t) * v(i, j) + s * (1.0 - t) * v(i + 1, j) + (1.0 - s) * t * v(i, j + 1)
            + s * t * v(i + 1, j + 1))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi,theta,d2\n");
        for (i, phi) in self.phis.iter().enumerate() {
            for (j, theta) in self.thetas.iter().enumerate() {
                let _ = writeln!(out, "{phi},{theta},{:.16e}", self.d2[i * self.thetas.len() + j]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("phi,theta,d2") {
            return Err(Error::format(path, "expected header `phi,theta,d2`"));
        }
        let mut phis: Vec<f64> = Vec::new();
        let mut thetas: Vec<f64> = Vec::new();
        let mut d2 = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 2)))?;
            if vals.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 columns", lineno + 2)));
            }
            if phis.last() != Some(&vals[0]) {
                phis.push(vals[0]);
            }
            if phis.len() == 1 {
                thetas.push(vals[1]);
            }
            d2.push(vals[2]);
        }
        let map = DetectabilityMap::new(phis, thetas, d2).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(map)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    /// 16-bit PGM with `theta` down the rows and `phi` across the columns.
    pub fn write_pgm(&self, path: &Path, markers: &[(f64, f64)]) -> Result<()> {
        let (rows, cols) = (self.thetas.len(), self.phis.len());
        let mut img = vec![0.0; rows * cols];
        for (i, _) in self.phis.iter().enumerate() {
            for (j, _) in self.thetas.iter().enumerate() {
                img[j * cols + i] = self.d2[i * rows + j];
            }
        }
        let mut pixels = render::scale_to_u16(&img, None);
        for &(phi, theta) in markers {
            if let (Some(i), Some(j)) = (find_angle(&self.phis, phi), find_angle(&self.thetas, theta)) {
                pixels[j * cols + i] = u16::MAX;
            }
        }
        render::write_pgm16(path, cols, rows, &pixels)
    }
}

/// Ground-truth map: d2 for each pose of a rectangular grid, computed
/// independently per pose from noise-free line integrals.
pub fn detectability_map(
    phantom: &Phantom,
    poses: &[CArmPose],
    task: &TaskRegion,
    cfg: &DetectabilityConfig,
    grid: &FrequencyGrid,
) -> Result<DetectabilityMap> {
    let mut phis: Vec<f64> = Vec::new();
    for p in poses {
        if phis.last() != Some(&p.phi_deg) {
            phis.push(p.phi_deg);
        }
    }
    let n_theta = poses.len() / phis.len().max(1);
    let thetas: Vec<f64> = poses.iter().take(n_theta).map(|p| p.theta_deg).collect();
    let rectangular = !poses.is_empty()
        && phis.len() * n_theta == poses.len()
        && poses
            .iter()
            .enumerate()
            .all(|(k, p)| p.phi_deg == phis[k / n_theta] && p.theta_deg == thetas[k % n_theta]);
    if !rectangular {
        return Err(Error::InvalidGrid("poses do not form a rectangular (phi, theta) grid".into()));
    }
    let model = DetectabilityModel::new(*cfg, *grid, task.clone())?;
    let d2 = poses
        .par_iter()
        .map(|pose| model.view_d2(phantom, pose))
        .collect::<Result<Vec<f64>>>()?;
    DetectabilityMap::new(phis, thetas, d2)
}
