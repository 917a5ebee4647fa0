//! Greedy closed-loop choice of the out-of-plane angle, one 5 degree step at a time.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::detectability::{DetectabilityMap, DetectabilityModel};
use crate::error::{Error, Result};
use crate::geometry::{candidate_poses, AngleRange, CArmPose, CANDIDATE_THETAS, N_CANDIDATES, VIEW_STEP_DEG};
use crate::phantom::Phantom;
use crate::projector::{add_poisson_noise, project, Projection, Raster};
use crate::surrogate::{featurize, featurize_counts, RegressorModel};

const THETA_TOL: f64 = 1e-9;
pub const PLANAR_THETA: f64 = 90.0;
pub const DEFAULT_PHI_SPAN: (f64, f64) = (0.0, 200.0);
pub const DEFAULT_SLEW_DEG: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Oracle,
    Surrogate,
    Planar,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Oracle => "oracle",
            BackendKind::Surrogate => "surrogate",
            BackendKind::Planar => "planar",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(BackendKind::Oracle),
            "surrogate" => Ok(BackendKind::Surrogate),
            "planar" => Ok(BackendKind::Planar),
            other => Err(Error::InvalidArgument(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub phi: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub views: Vec<View>,
    pub backend: BackendKind,
    pub slew_limit_deg: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.theta).collect()
    }

    pub fn poses(&self, template: &CArmPose) -> Vec<CArmPose> {
        self.views.iter().map(|v| template.with_angles(v.phi, v.theta)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.views.iter().enumerate() {
            if !(CANDIDATE_THETAS[0] - THETA_TOL..=CANDIDATE_THETAS[N_CANDIDATES - 1] + THETA_TOL).contains(&v.theta) {
                return Err(Error::InvalidPose(format!("view {k} has theta {} outside [65, 115]", v.theta)));
            }
            if k > 0 {
                let prev = self.views[k - 1];
                if v.phi <= prev.phi {
                    return Err(Error::InvalidPose(format!("phi not increasing at view {k}")));
                }
                if (v.theta - prev.theta).abs() > self.slew_limit_deg + THETA_TOL {
                    return Err(Error::InvalidPose(format!("slew limit exceeded at view {k}")));
                }
            }
        }
        Ok(())
    }

    /// CSV `step,phi,theta,d2_chosen,d2_planar` with `d2` giving the value
    /// of any `(phi, theta)` view.
    pub fn to_csv(&self, mut d2: impl FnMut(f64, f64) -> Result<f64>) -> Result<String> {
        let mut out = String::from("step,phi,theta,d2_chosen,d2_planar\n");
        for (k, v) in self.views.iter().enumerate() {
            let chosen = d2(v.phi, v.theta)?;
            let planar = d2(v.phi, PLANAR_THETA)?;
            out.push_str(&format!("{k},{},{},{chosen:.10e},{planar:.10e}\n", v.phi, v.theta));
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, d2: impl FnMut(f64, f64) -> Result<f64>) -> Result<()> {
        std::fs::write(path, self.to_csv(d2)?).map_err(|e| Error::io(path, e))
    }

    /// Reads the views back from a trajectory CSV; the value columns are ignored.
    pub fn read_csv(path: &Path, backend: BackendKind, slew_limit_deg: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("step,phi,theta,d2_chosen,d2_planar") {
            return Err(Error::format(path, "missing trajectory header"));
        }
        let mut views = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad field {i} on line {}", n + 2)))
            };
            views.push(View { phi: parse(1)?, theta: parse(2)? });
        }
        Ok(Trajectory { views, backend, slew_limit_deg })
    }

    /// Sum of `map` along the trajectory; every view must be a map node.
    pub fn accumulated(&self, map: &DetectabilityMap) -> Result<f64> {
        self.views
            .iter()
            .map(|v| {
                map.get(v.phi, v.theta)
                    .ok_or_else(|| Error::InvalidPose(format!("({}, {}) is not a map node", v.phi, v.theta)))
            })
            .sum()
    }
}

fn check_candidates(d2: &[f64]) -> Result<()> {
    if d2.len() != N_CANDIDATES {
        return Err(Error::ShapeMismatch(format!("{} candidate values, expected {N_CANDIDATES}", d2.len())));
    }
    if d2.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("candidate values must be finite".into()));
    }
    Ok(())
}

/// Relative gap below which two candidate values count as tied; keeps ties on
/// symmetric scenes from being decided by rounding.
const TIE_RTOL: f64 = 1e-12;

/// Index of the best candidate within `slew_limit` of `current_theta`; ties go
/// to the candidate nearest `current_theta`, then to the smaller angle.
fn best_candidate(d2: &[f64], current_theta: f64, slew_limit: f64) -> Option<usize> {
    let reachable: Vec<usize> = (0..N_CANDIDATES)
        .filter(|&i| (CANDIDATE_THETAS[i] - current_theta).abs() <= slew_limit + THETA_TOL)
        .collect();
    let top = reachable.iter().map(|&i| d2[i]).fold(f64::NEG_INFINITY, f64::max);
    let floor = top - TIE_RTOL * top.abs();
    // Ascending theta, so the strict comparison keeps the smaller angle.
    reachable.into_iter().filter(|&i| d2[i] >= floor).fold(None, |best: Option<usize>, i| match best {
        Some(b) if (CANDIDATE_THETAS[b] - current_theta).abs() <= (CANDIDATE_THETAS[i] - current_theta).abs() => Some(b),
        _ => Some(i),
    })
}

pub fn next_theta(d2: &[f64], current_theta: f64, slew_limit: f64) -> Result<f64> {
    check_candidates(d2)?;
    best_candidate(d2, current_theta, slew_limit)
        .map(|i| CANDIDATE_THETAS[i])
        .ok_or(Error::Unreachable { current_theta, slew_limit })
}

/// Linear ramp from `current_theta` toward the unconstrained best candidate.
pub fn interpolate_theta(d2: &[f64], current_theta: f64, phi_fraction: f64) -> Result<f64> {
    check_candidates(d2)?;
    if !(0.0..=1.0).contains(&phi_fraction) {
        return Err(Error::InvalidArgument(format!("phi fraction {phi_fraction} outside [0, 1]")));
    }
    let target = CANDIDATE_THETAS[best_candidate(d2, current_theta, f64::INFINITY).unwrap()];
    Ok(current_theta + phi_fraction * (target - current_theta))
}

pub enum Backend<'a> {
    /// Ground-truth d2 computed from the phantom for every candidate.
    Oracle(&'a DetectabilityModel),
    /// d2 predicted from the acquired projection. With `noise` off the model
    /// sees expected counts instead of a Poisson draw.
    Surrogate { model: &'a RegressorModel, i0: f64, noise: bool },
}

impl Backend<'_> {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Oracle(_) => BackendKind::Oracle,
            Backend::Surrogate { .. } => BackendKind::Surrogate,
        }
    }

    fn fluence(&self) -> f64 {
        match self {
            Backend::Oracle(m) => m.cfg.i0,
            Backend::Surrogate { i0, .. } => *i0,
        }
    }

    fn acquire(&self, phantom: &Phantom, pose: &CArmPose, seed: u64) -> Result<Projection> {
        let clean = project(phantom, pose)?.with_fluence(self.fluence());
        match self {
            Backend::Surrogate { noise: true, .. } => add_poisson_noise(&clean, seed),
            _ => Ok(clean),
        }
    }

    fn score(&self, phantom: &Phantom, acquired: &Projection) -> Result<[f64; N_CANDIDATES]> {
        let mut out = [0.0; N_CANDIDATES];
        match self {
            Backend::Oracle(model) => {
                for (o, pose) in out.iter_mut().zip(candidate_poses(acquired.pose.phi_deg, &acquired.pose)?) {
                    *o = model.view_d2(phantom, &pose)?;
                }
            }
            Backend::Surrogate { model, i0, .. } => {
                let features = match acquired.noisy_counts {
                    Some(_) => featurize(acquired, *i0)?,
                    None => featurize_counts(&acquired.expected_counts()?, *i0)?,
                };
                out.copy_from_slice(&model.predict(&features)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannerConfig {
    pub template: CArmPose,
    pub slew_limit_deg: f64,
    /// Seed of the acquisition noise.
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { template: CArmPose::default(), slew_limit_deg: DEFAULT_SLEW_DEG, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryRun {
    pub trajectory: Trajectory,
    pub projections: Vec<Projection>,
    /// Candidate values scored after each acquisition except the last.
    pub candidates: Vec<[f64; N_CANDIDATES]>,
}

fn phi_steps(phi_start: f64, phi_end: f64) -> Result<Vec<f64>> {
    if !(phi_start >= 0.0 && phi_end <= 360.0) {
        return Err(Error::InvalidGrid(format!("phi range [{phi_start}, {phi_end}) outside [0, 360)")));
    }
    let phis = AngleRange::new(phi_start, phi_end).half_open(VIEW_STEP_DEG, "phi")?;
    if phis.is_empty() {
        return Err(Error::InvalidGrid(format!("empty phi range [{phi_start}, {phi_end})")));
    }
    Ok(phis)
}

pub fn run_trajectory(
    phantom: &Phantom,
    backend: &Backend,
    phi_start: f64,
    phi_end: f64,
    theta_init: f64,
    cfg: &PlannerConfig,
) -> Result<TrajectoryRun> {
    let phis = phi_steps(phi_start, phi_end)?;
    if !CANDIDATE_THETAS.iter().any(|&t| (t - theta_init).abs() < THETA_TOL) {
        return Err(Error::InvalidPose(format!("initial theta {theta_init} is not one of 65, 70, ..., 115")));
    }
    if !(cfg.slew_limit_deg >= 0.0) {
        return Err(Error::InvalidArgument(format!("slew limit {} must be non-negative", cfg.slew_limit_deg)));
    }
    let mut views = Vec::with_capacity(phis.len());
    let mut projections = Vec::with_capacity(phis.len());
    let mut candidates = Vec::with_capacity(phis.len());
    let mut theta = theta_init;
    for (k, &phi) in phis.iter().enumerate() {
        let pose = cfg.template.with_angles(phi, theta);
        let acquired = backend.acquire(phantom, &pose, cfg.seed).map_err(|e| e.at_pose(phi, theta))?;
        views.push(View { phi, theta });
        if k + 1 < phis.len() {
            let scores = backend.score(phantom, &acquired).map_err(|e| e.at_pose(phi, theta))?;
            theta = next_theta(&scores, theta, cfg.slew_limit_deg)?;
            candidates.push(scores);
        }
        projections.push(acquired);
    }
    Ok(TrajectoryRun {
        trajectory: Trajectory { views, backend: backend.kind(), slew_limit_deg: cfg.slew_limit_deg },
        projections,
        candidates,
    })
}

pub fn planar_trajectory(phi_start: f64, phi_end: f64) -> Result<Trajectory> {
    let views = phi_steps(phi_start, phi_end)?.into_iter().map(|phi| View { phi, theta: PLANAR_THETA }).collect();
    Ok(Trajectory { views, backend: BackendKind::Planar, slew_limit_deg: 0.0 })
}

/// Index of the first shared `(phi, theta)` state, provided the trajectories
/// agree from there on; `None` if they never share a state.
pub fn merge_check(a: &Trajectory, b: &Trajectory) -> Result<Option<usize>> {
    if a.len() != b.len() || a.views.iter().zip(&b.views).any(|(x, y)| x.phi != y.phi) {
        return Err(Error::InvalidGrid("trajectories are on different phi grids".into()));
    }
    let same = |k: usize| a.views[k].theta == b.views[k].theta;
    match (0..a.len()).find(|&k| same(k)) {
        None => Ok(None),
        Some(first) => {
            if let Some(k) = (first..a.len()).find(|&k| !same(k)) {
                return Err(Error::InvalidArgument(format!(
                    "trajectories share a state at view {first} but diverge at view {k}"
                )));
            }
            Ok(Some(first))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServoCommand {
    pub phi: f64,
    pub theta: f64,
}

/// Sub-step commands between 5 degree decisions, ramping toward the best
/// candidate of each step; `substeps` commands per step.
pub fn servo_trace(run: &TrajectoryRun, substeps: usize) -> Result<Vec<ServoCommand>> {
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(run.candidates.len() * substeps);
    for (view, scores) in run.trajectory.views.iter().zip(&run.candidates) {
        for s in 0..substeps {
            let frac = s as f64 / substeps as f64;
            out.push(ServoCommand {
                phi: view.phi + frac * VIEW_STEP_DEG,
                theta: interpolate_theta(scores, view.theta, frac)?,
            });
        }
    }
    Ok(out)
}

pub fn servo_csv(commands: &[ServoCommand]) -> String {
    let mut out = String::from("phi,theta_command\n");
    for c in commands {
        out.push_str(&format!("{:.6},{:.6}\n", c.phi, c.theta));
    }
    out
}

/// Mean of the acquired projections' line integrals; used for quick-look images.
pub fn mean_projection(run: &TrajectoryRun) -> Option<Raster<f64>> {
    let first = run.projections.first()?;
    let mut acc = Raster::filled(first.line_integrals.rows, first.line_integrals.cols, 0.0);
    for p in &run.projections {
        acc.data.iter_mut().zip(&p.line_integrals.data).for_each(|(a, v)| *a += v);
    }
    let n = run.projections.len() as f64;
    acc.data.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; N_CANDIDATES];
        v[i] = 1.0;
        v
    }

    #[test]
    fn argmax_and_tie_rules() {
        assert_eq!(next_theta(&onehot(10), 90.0, f64::INFINITY).unwrap(), 115.0);
        assert_eq!(next_theta(&[1.0; N_CANDIDATES], 90.0, f64::INFINITY).unwrap(), 90.0);
        // Equidistant tie goes to the smaller angle.
        let mut v = vec![0.0; N_CANDIDATES];
        v[4] = 2.0;
        v[6] = 2.0;
        assert_eq!(next_theta(&v, 90.0, f64::INFINITY).unwrap(), 85.0);
        assert!(next_theta(&[0.0; 10], 90.0, 5.0).is_err());
        assert!(next_theta(&[f64::NAN; N_CANDIDATES], 90.0, 5.0).is_err());
    }

    #[test]
    fn slew_limited_argmax_matches_brute_force() {
        let d2: Vec<f64> = (0..N_CANDIDATES).map(|i| (i as f64 * 0.7).sin() + i as f64 * 0.1).collect();
        for &current in &CANDIDATE_THETAS {
            for slew in [0.0, 5.0, 10.0, 25.0] {
                let reachable: Vec<usize> =
                    (0..N_CANDIDATES).filter(|&i| (CANDIDATE_THETAS[i] - current).abs() <= slew).collect();
                let best = reachable.iter().copied().max_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap();
                assert_eq!(next_theta(&d2, current, slew).unwrap(), CANDIDATE_THETAS[best]);
            }
        }
        let rising: Vec<f64> = (0..N_CANDIDATES).map(|i| i as f64).collect();
        assert_eq!(next_theta(&rising, 65.0, 10.0).unwrap(), 75.0);
        let err = next_theta(&onehot(0), 92.5, 2.0).unwrap_err();
        assert!(matches!(err, Error::Unreachable { .. }));
    }

    #[test]
    fn interpolation_endpoints() {
        let mut v = onehot(7);
        assert_eq!(interpolate_theta(&v, 90.0, 0.5).unwrap(), 95.0);
        assert_eq!(interpolate_theta(&v, 90.0, 0.0).unwrap(), 90.0);
        v[2] = 0.5;
        for &current in &CANDIDATE_THETAS {
            assert_eq!(
                interpolate_theta(&v, current, 1.0).unwrap(),
                next_theta(&v, current, f64::INFINITY).unwrap()
            );
        }
        assert!(interpolate_theta(&v, 90.0, 1.5).is_err());
    }

    #[test]
    fn planar_short_scan() {
        let t = planar_trajectory(0.0, 200.0).unwrap();
        assert_eq!(t.len(), 40);
        assert!(t.views.iter().all(|v| v.theta == 90.0));
        assert_eq!(t.views.last().unwrap().phi, 195.0);
        t.validate().unwrap();
        assert!(planar_trajectory(0.0, 202.0).is_err());
        assert!(planar_trajectory(300.0, 365.0).is_err());
    }

    #[test]
    fn merge_rules() {
        let mk = |thetas: &[f64]| Trajectory {
            views: thetas.iter().enumerate().map(|(k, &theta)| View { phi: 5.0 * k as f64, theta }).collect(),
            backend: BackendKind::Oracle,
            slew_limit_deg: 5.0,
        };
        let a = mk(&[85.0, 90.0, 95.0]);
        assert_eq!(merge_check(&a, &a).unwrap(), Some(0));
        assert_eq!(merge_check(&a, &mk(&[95.0, 90.0, 95.0])).unwrap(), Some(1));
        assert_eq!(merge_check(&a, &mk(&[80.0, 85.0, 90.0])).unwrap(), None);
        assert!(merge_check(&a, &mk(&[85.0, 90.0])).is_err());
        assert!(merge_check(&a, &mk(&[85.0, 95.0, 95.0])).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let t = planar_trajectory(0.0, 20.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        t.write_csv(&path, |phi, theta| Ok(phi + theta)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,phi,theta,d2_chosen,d2_planar\n0,0,90,"));
        assert_eq!(Trajectory::read_csv(&path, BackendKind::Planar, 0.0).unwrap(), t);
    }

    #[test]
    fn backend_names_round_trip() {
        for k in [BackendKind::Oracle, BackendKind::Surrogate, BackendKind::Planar] {
            assert_eq!(k.to_string().parse::<BackendKind>().unwrap(), k);
        }
        assert!("vgg".parse::<BackendKind>().is_err());
    }
}
