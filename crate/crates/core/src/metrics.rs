//! Evaluation quantities for planned trajectories and their reconstructions.

use std::fmt::Write as _;
use std::path::Path;

use crate::detectability::DetectabilityMap;
use crate::error::{Error, Result};
use crate::geometry::{CANDIDATE_THETAS, N_CANDIDATES};
use crate::phantom::Phantom;
use crate::planner::{next_theta, Trajectory};
use crate::recon::ReconVolume;

const THETA_LO: f64 = 65.0;
const THETA_HI: f64 = 115.0;

/// Annulus around each metal core, in voxels beyond the metal radius.
pub const STREAK_INNER_VOXELS: f64 = 2.0;
pub const STREAK_OUTER_VOXELS: f64 = 8.0;

pub fn angular_distance_error(theta_pred: f64, theta_opt: f64) -> Result<f64> {
    for t in [theta_pred, theta_opt] {
        if !(THETA_LO..=THETA_HI).contains(&t) {
            return Err(Error::InvalidArgument(format!("theta {t} outside [{THETA_LO}, {THETA_HI}]")));
        }
    }
    Ok((theta_pred - theta_opt).abs())
}

/// Percent of the optimal action's d2 lost by taking the predicted action.
pub fn detectability_degradation(d2_pred_action: f64, d2_opt_action: f64) -> Result<f64> {
    if !(d2_opt_action > 0.0) {
        return Err(Error::InvalidArgument(format!("optimal d2 {d2_opt_action} must be positive")));
    }
    Ok(100.0 * (d2_opt_action - d2_pred_action) / d2_opt_action)
}

/// Mean absolute out-of-plane difference over views.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() || a.views.iter().zip(&b.views).any(|(x, y)| x.phi != y.phi) {
        return Err(Error::InvalidGrid("trajectories are on different phi grids".into()));
    }
    Ok(a.views.iter().zip(&b.views).map(|(x, y)| (x.theta - y.theta).abs()).sum::<f64>() / a.len() as f64)
}

/// Sum of map values along the trajectory; off-node views are interpolated
/// when `interpolate` is set and rejected otherwise.
pub fn accumulated_detectability(map: &DetectabilityMap, trajectory: &Trajectory, interpolate: bool) -> Result<f64> {
    if !interpolate {
        return trajectory.accumulated(map);
    }
    trajectory.views.iter().map(|v| map.bilinear(v.phi, v.theta)).sum()
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Voxel indices of the streak annulus around metal primitive `m`, clear of
/// every other metal primitive by the same inner margin.
pub fn streak_annulus(volume: &ReconVolume, phantom: &Phantom, m: usize) -> Vec<usize> {
    let v = volume.geom.voxel_mm;
    let prim = &phantom.primitives[m];
    let (inner, outer) = (prim.core_radius() + STREAK_INNER_VOXELS * v, prim.core_radius() + STREAK_OUTER_VOXELS * v);
    let [nx, ny, nz] = volume.geom.dims;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = volume.geom.voxel_center(i, j, k);
                let d = prim.core_distance(&c);
                if d < inner || d > outer {
                    continue;
                }
                let clear = phantom
                    .metal()
                    .all(|other| other.core_distance(&c) >= other.core_radius() + STREAK_INNER_VOXELS * v);
                if clear {
                    out.push(volume.geom.index(i, j, k));
                }
            }
        }
    }
    out
}

/// Excess spread of reconstructed values next to the metal: the standard
/// deviation over each screw's annulus minus that of the ground truth,
/// averaged over the metal primitives.
pub fn streak_index(volume: &ReconVolume, ground_truth: &ReconVolume, phantom: &Phantom) -> Result<f64> {
    if volume.geom != ground_truth.geom {
        return Err(Error::ShapeMismatch("reconstruction and ground truth geometries differ".into()));
    }
    let metal: Vec<usize> = phantom.metal_indices.clone();
    if metal.is_empty() {
        return Err(Error::InvalidArgument("phantom has no metal".into()));
    }
    let mut total = 0.0;
    for &m in &metal {
        let ann = streak_annulus(volume, phantom, m);
        if ann.is_empty() {
            return Err(Error::InvalidArgument(format!("streak annulus of primitive {m} is empty")));
        }
        let rec: Vec<f64> = ann.iter().map(|&i| volume.values[i]).collect();
        let gt: Vec<f64> = ann.iter().map(|&i| ground_truth.values[i]).collect();
        total += std_dev(&rec) - std_dev(&gt);
    }
    Ok(total / metal.len() as f64)
}

/// True for voxels that a metal primitive may partially cover.
pub fn metal_mask(volume: &ReconVolume, phantom: &Phantom) -> Vec<bool> {
    let half_diag = volume.geom.voxel_mm * 3f64.sqrt() / 2.0;
    let [nx, ny, nz] = volume.geom.dims;
    let mut mask = Vec::with_capacity(volume.geom.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = volume.geom.voxel_center(i, j, k);
                mask.push(phantom.metal().any(|m| m.core_distance(&c) <= m.core_radius() + half_diag));
            }
        }
    }
    mask
}

/// Root-mean-square error against the ground truth over voxels clear of metal.
pub fn volume_rmse(volume: &ReconVolume, ground_truth: &ReconVolume, phantom: &Phantom) -> Result<f64> {
    if volume.geom != ground_truth.geom {
        return Err(Error::ShapeMismatch("reconstruction and ground truth geometries differ".into()));
    }
    let mask = metal_mask(volume, phantom);
    let (mut sum, mut n) = (0.0, 0usize);
    for ((r, g), masked) in volume.values.iter().zip(&ground_truth.values).zip(mask) {
        if !masked {
            sum += (r - g) * (r - g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("every voxel is masked".into()));
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub phi: f64,
    pub theta_pred: f64,
    pub theta_opt: f64,
    pub d2_pred: f64,
    pub d2_opt: f64,
}

/// Compares the predicted and the true best next action. Both are chosen
/// over all eleven candidates from the same state, so `d2_opt >= d2_pred`.
pub fn step_record(phi: f64, theta: f64, predicted: &[f64], truth: &[f64]) -> Result<StepRecord> {
    let theta_pred = next_theta(predicted, theta, f64::INFINITY)?;
    let theta_opt = next_theta(truth, theta, f64::INFINITY)?;
    let at = |t: f64| truth[CANDIDATE_THETAS.iter().position(|&c| c == t).unwrap()];
    Ok(StepRecord { phi, theta_pred, theta_opt, d2_pred: at(theta_pred), d2_opt: at(theta_opt) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        MeanStd { mean: values.iter().sum::<f64>() / values.len() as f64, std: std_dev(values) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRow {
    pub i0: f64,
    pub distance: MeanStd,
}

/// Reference values from a clinical-scale study with a convolutional
/// backbone. Printed for orientation only; the desk-scale pipeline is not
/// expected to match them.
pub const REFERENCE_CONTEXT: [(&str, &str); 4] = [
    ("angular_error_deg", "8.35 +- 11.61"),
    ("degradation_percent", "13.69 +- 18.92"),
    ("noise_distance_deg_400k_100k_50k", "0.83 / 1.13 / 1.64"),
    ("tilted_circle_gain_percent", "19.0"),
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub records: Vec<StepRecord>,
    pub noise: Vec<NoiseRow>,
}

impl EvalReport {
    pub fn angular_errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| (r.theta_pred - r.theta_opt).abs()).collect()
    }

    pub fn degradations(&self) -> Result<Vec<f64>> {
        self.records.iter().map(|r| detectability_degradation(r.d2_pred, r.d2_opt)).collect()
    }

    pub fn angular(&self) -> MeanStd {
        MeanStd::of(&self.angular_errors())
    }

    pub fn degradation(&self) -> Result<MeanStd> {
        Ok(MeanStd::of(&self.degradations()?))
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from("phi,theta_pred,theta_opt,d2_pred,d2_opt\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{:.10e},{:.10e}", r.phi, r.theta_pred, r.theta_opt, r.d2_pred, r.d2_opt);
        }
        out
    }

    pub fn noise_csv(&self) -> String {
        let mut out = String::from("i0,distance_mean_deg,distance_std_deg\n");
        for n in &self.noise {
            let _ = writeln!(out, "{},{:.6},{:.6}", n.i0, n.distance.mean, n.distance.std);
        }
        out
    }

    /// Whether trajectory distance grows as fluence drops; reported, not enforced.
    pub fn noise_monotone(&self) -> bool {
        let mut rows = self.noise.clone();
        rows.sort_by(|a, b| b.i0.total_cmp(&a.i0));
        rows.windows(2).all(|w| w[1].distance.mean >= w[0].distance.mean)
    }

    pub fn summary(&self) -> Result<String> {
        let a = self.angular();
        let d = self.degradation()?;
        let mut out = String::new();
        let _ = writeln!(out, "steps: {}", self.records.len());
        let _ = writeln!(out, "angular_error_deg: {:.3} +- {:.3}", a.mean, a.std);
        let _ = writeln!(out, "degradation_percent: {:.3} +- {:.3}", d.mean, d.std);
        for n in &self.noise {
            let _ = writeln!(out, "noise_distance_deg@{}: {:.3} +- {:.3}", n.i0, n.distance.mean, n.distance.std);
        }
        if self.noise.len() > 1 {
            let _ = writeln!(out, "noise_distance_nondecreasing_with_lower_fluence: {}", self.noise_monotone());
        }
        let _ = writeln!(out, "reference (context only, not comparable):");
        for (k, v) in REFERENCE_CONTEXT {
            let _ = writeln!(out, "  {k}: {v}");
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("eval_steps.csv", self.records_csv())?;
        put("eval_noise.csv", self.noise_csv())?;
        put("eval_summary.txt", self.summary()?)
    }
}

/// Per-step records of a planned run: `truth(phi, theta)` gives the true
/// candidate values from the state `(phi, theta)`.
pub fn records_for_run(
    trajectory: &Trajectory,
    predicted: &[[f64; N_CANDIDATES]],
    mut truth: impl FnMut(f64, f64) -> Result<[f64; N_CANDIDATES]>,
) -> Result<Vec<StepRecord>> {
    trajectory
        .views
        .iter()
        .zip(predicted)
        .map(|(v, pred)| step_record(v.phi, v.theta, pred, &truth(v.phi, v.theta)?))
        .collect()
}
