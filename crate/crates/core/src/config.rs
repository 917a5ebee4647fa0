//! Flat key/value run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ScanConfig;
use crate::detectability::{DetectabilityConfig, DetectabilityModel, FrequencyGrid};
use crate::error::{Error, Result};
use crate::geometry::{AngleRange, CArmPose, CANDIDATE_THETAS, VIEW_STEP_DEG};
use crate::phantom::{ChestBounds, TaskRegion};
use crate::planner::PlannerConfig;
use crate::recon::VolumeGeometry;
use crate::surrogate::{TrainConfig, FEATURE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // detector geometry
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub pitch_mm: f64,

    /// Acquisition fluence, photons per pixel.
    pub i0: f64,

    // grid scan spans
    pub phi_min: f64,
    pub phi_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub step_deg: f64,
    pub iso_jitter_mm: f64,

    // detectability model
    pub beta: f64,
    pub slab_sigma: f64,
    pub epsilon_a: f64,
    /// Fluence assumed by the detectability model.
    pub detect_i0: f64,
    pub penalty_voxel_mm: f64,
    pub freq_n: usize,
    pub freq_df: f64,

    // planner
    pub slew_limit_deg: f64,
    pub plan_phi_start: f64,
    pub plan_phi_end: f64,
    pub theta_init: f64,

    // training
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub target_log_eps: f64,
    pub train_seed: u64,

    // corpus
    pub seed: u64,
    pub n_scans: usize,
    pub n_val: usize,

    // reconstruction
    pub recon_dim: usize,
    pub recon_voxel_mm: f64,
    pub cgls_iters: usize,
    pub gt_supersample: usize,

    /// Fluences of the noise-robustness sweep, highest first.
    pub eval_fluences: Vec<f64>,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pose = CArmPose::default();
        let detect = DetectabilityConfig::default();
        let grid = FrequencyGrid::default();
        let train = TrainConfig::default();
        let vol = VolumeGeometry::default();
        RunConfig {
            sid_mm: pose.sid_mm,
            sdd_mm: pose.sdd_mm,
            det_rows: pose.det_rows,
            det_cols: pose.det_cols,
            pitch_mm: pose.pitch_mm,
            i0: 500.0,
            phi_min: 0.0,
            phi_max: 360.0,
            theta_min: 45.0,
            theta_max: 135.0,
            step_deg: VIEW_STEP_DEG,
            iso_jitter_mm: 20.0,
            beta: detect.beta,
            slab_sigma: detect.slab_sigma,
            epsilon_a: detect.epsilon_a,
            detect_i0: detect.i0,
            penalty_voxel_mm: detect.voxel_mm,
            freq_n: grid.n,
            freq_df: grid.df,
            slew_limit_deg: crate::planner::DEFAULT_SLEW_DEG,
            plan_phi_start: crate::planner::DEFAULT_PHI_SPAN.0,
            plan_phi_end: crate::planner::DEFAULT_PHI_SPAN.1,
            theta_init: 90.0,
            lr: train.lr,
            batch: train.batch,
            epochs: train.epochs,
            val_fraction: train.val_fraction,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            hidden: train.layers[1..train.layers.len() - 1].to_vec(),
            target_log_eps: train.target_log_eps,
            train_seed: train.seed,
            seed: 0,
            n_scans: 8,
            n_val: 2,
            recon_dim: vol.dims[0],
            recon_voxel_mm: vol.voxel_mm,
            cgls_iters: 30,
            gt_supersample: 2,
            eval_fluences: vec![400_000.0, 100_000.0, 50_000.0],
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("{v} must be positive and finite")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(bad(key, "must be at least 1"));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // toml reports "unknown field `name`, expected one of ..."
            let key = msg.split('`').nth(1).filter(|_| msg.starts_with("unknown field")).unwrap_or("(syntax)");
            Error::Config { key: key.to_string(), msg: format!("{}: {msg}", path.display()) }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; a missing path yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("sid_mm", self.sid_mm), ("sdd_mm", self.sdd_mm), ("pitch_mm", self.pitch_mm)] {
            positive(k, v)?;
        }
        if self.sdd_mm <= self.sid_mm {
            return Err(bad("sdd_mm", format!("{} must exceed sid_mm = {}", self.sdd_mm, self.sid_mm)));
        }
        nonzero("det_rows", self.det_rows)?;
        nonzero("det_cols", self.det_cols)?;
        positive("i0", self.i0)?;

        if !(0.0..360.0).contains(&self.phi_min) || !(self.phi_max > self.phi_min && self.phi_max <= 360.0) {
            return Err(bad("phi_max", format!("phi span [{}, {}) must lie in [0, 360)", self.phi_min, self.phi_max)));
        }
        if !(self.theta_min >= 0.0 && self.theta_max <= 180.0 && self.theta_min <= self.theta_max) {
            return Err(bad(
                "theta_max",
                format!("theta span [{}, {}] must be ordered within [0, 180]", self.theta_min, self.theta_max),
            ));
        }
        positive("step_deg", self.step_deg)?;
        if !(self.iso_jitter_mm >= 0.0) {
            return Err(bad("iso_jitter_mm", "must be non-negative"));
        }

        self.detect_config().validate().map_err(|e| match e {
            Error::Config { key, msg } if key == "i0" => bad("detect_i0", msg),
            Error::Config { key, msg } if key == "voxel_mm" => bad("penalty_voxel_mm", msg),
            other => other,
        })?;
        nonzero("freq_n", self.freq_n)?;
        positive("freq_df", self.freq_df)?;

        if !(self.slew_limit_deg >= 0.0) {
            return Err(bad("slew_limit_deg", "must be non-negative"));
        }
        if !(self.plan_phi_start >= 0.0 && self.plan_phi_end <= 360.0 && self.plan_phi_end > self.plan_phi_start) {
            return Err(bad(
                "plan_phi_end",
                format!("plan span [{}, {}) must be non-empty within [0, 360)", self.plan_phi_start, self.plan_phi_end),
            ));
        }
        if !CANDIDATE_THETAS.iter().any(|&t| (t - self.theta_init).abs() < 1e-9) {
            return Err(bad("theta_init", format!("{} is not one of 65, 70, ..., 115", self.theta_init)));
        }

        self.train_config().validate()?;
        if self.hidden.is_empty() {
            return Err(bad("hidden", "needs at least one hidden layer"));
        }
        if self.n_val >= self.n_scans {
            return Err(bad("n_val", format!("{} leaves no training scans out of {}", self.n_val, self.n_scans)));
        }

        nonzero("recon_dim", self.recon_dim)?;
        positive("recon_voxel_mm", self.recon_voxel_mm)?;
        nonzero("cgls_iters", self.cgls_iters)?;
        nonzero("gt_supersample", self.gt_supersample)?;
        if self.eval_fluences.is_empty() {
            return Err(bad("eval_fluences", "must list at least one fluence"));
        }
        for &f in &self.eval_fluences {
            positive("eval_fluences", f)?;
        }
        Ok(())
    }

    pub fn pose_template(&self) -> CArmPose {
        CArmPose {
            phi_deg: 0.0,
            theta_deg: 90.0,
            sid_mm: self.sid_mm,
            sdd_mm: self.sdd_mm,
            det_rows: self.det_rows,
            det_cols: self.det_cols,
            pitch_mm: self.pitch_mm,
        }
    }

    pub fn detect_config(&self) -> DetectabilityConfig {
        DetectabilityConfig {
            beta: self.beta,
            slab_sigma: self.slab_sigma,
            epsilon_a: self.epsilon_a,
            i0: self.detect_i0,
            voxel_mm: self.penalty_voxel_mm,
        }
    }

    pub fn freq_grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::new(self.freq_n, self.freq_df)
    }

    pub fn detect_model(&self, task: TaskRegion) -> Result<DetectabilityModel> {
        DetectabilityModel::new(self.detect_config(), self.freq_grid()?, task)
    }

    pub fn scan_config(&self, out_dir: &Path) -> Result<ScanConfig> {
        let cfg = ScanConfig {
            template: self.pose_template(),
            phi_range: AngleRange::new(self.phi_min, self.phi_max),
            theta_range: AngleRange::new(self.theta_min, self.theta_max),
            step_deg: self.step_deg,
            i0: self.i0,
            iso_jitter_mm: self.iso_jitter_mm,
            detect: self.detect_config(),
            freq_grid: self.freq_grid()?,
            chest: ChestBounds::default(),
            out_dir: out_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn planner_config(&self, seed: u64) -> PlannerConfig {
        PlannerConfig { template: self.pose_template(), slew_limit_deg: self.slew_limit_deg, seed }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut layers = vec![FEATURE_DIM];
        layers.extend(&self.hidden);
        layers.push(CANDIDATE_THETAS.len());
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.train_seed,
            val_fraction: self.val_fraction,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            layers,
            target_log_eps: self.target_log_eps,
        }
    }

    pub fn volume_geometry(&self) -> VolumeGeometry {
        VolumeGeometry::centered([self.recon_dim; 3], self.recon_voxel_mm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_validate_and_match_module_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pose_template(), CArmPose::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.scan_config(Path::new("x")).unwrap().poses().unwrap().len(), 1368);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig { seed: 17, hidden: vec![32], ..RunConfig::default() };
        let back = RunConfig::parse(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("i0 = 1000.0\nepochs = 3\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.i0, 1000.0);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.sid_mm, 600.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("i0 = 1000.0\nfluence = 3.0\n", Path::new("c.toml")).unwrap_err();
        assert_eq!(key_of(err), "fluence");
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cases: [(&str, &str); 8] = [
            ("theta_min = 140.0", "theta_max"),
            ("sdd_mm = 500.0", "sdd_mm"),
            ("det_rows = 0", "det_rows"),
            ("beta = -1.0", "beta"),
            ("detect_i0 = 0.0", "detect_i0"),
            ("theta_init = 62.0", "theta_init"),
            ("n_val = 8", "n_val"),
            ("eval_fluences = []", "eval_fluences"),
        ];
        for (text, key) in cases {
            let err = RunConfig::parse(text, Path::new("c.toml")).unwrap_err();
            assert_eq!(key_of(err), key, "{text}");
        }
    }
}
