//! Training corpora: one grid scan per phantom seed, each a noise-free stack,
//! a noisy stack, a ground-truth d2 map and the scene it was rendered from.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detectability::{detectability_map, DetectabilityConfig, DetectabilityMap, FrequencyGrid};
use crate::error::{Error, Result};
use crate::geometry::{grid_poses, AngleRange, CArmPose, CANDIDATE_THETAS, N_CANDIDATES, VIEW_STEP_DEG};
use crate::phantom::{build_chest_phantom_with, write_scene, ChestBounds, Phantom, TaskRegion};
use crate::projector::{project, sample_counts, StackData, StackKind, StackReader, StackWriter};
use crate::surrogate::{featurize_counts, SampleMeta, TrainingSample};
use crate::geometry::Vec3;
use crate::projector::Raster;

pub const MANIFEST_HEADER: &str = "seed,projections_path,noisy_path,map_path,i0";
pub const TRAIN_MANIFEST: &str = "manifest_train.csv";
pub const VAL_MANIFEST: &str = "manifest_val.csv";

/// Salt that separates the isocenter draw from the phantom's own draws.
const JITTER_SALT: u64 = 0x1503_7a3d_55c1_0e2b;
/// Salt for the acquisition noise of grid scans.
const NOISE_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    pub template: CArmPose,
    pub phi_range: AngleRange,
    pub theta_range: AngleRange,
    pub step_deg: f64,
    /// Fluence of the noisy stack.
    pub i0: f64,
    /// Half-width of the uniform isocenter offset along each axis.
    pub iso_jitter_mm: f64,
    pub detect: DetectabilityConfig,
    pub freq_grid: FrequencyGrid,
    pub chest: ChestBounds,
    pub out_dir: PathBuf,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            template: CArmPose::default(),
            phi_range: AngleRange::new(0.0, 360.0),
            theta_range: AngleRange::new(45.0, 135.0),
            step_deg: VIEW_STEP_DEG,
            i0: 500.0,
            iso_jitter_mm: 20.0,
            detect: DetectabilityConfig::default(),
            freq_grid: FrequencyGrid::default(),
            chest: ChestBounds::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        self.detect.validate()?;
        if !(self.i0 > 0.0) {
            return Err(Error::Config { key: "i0".into(), msg: format!("{} must be positive", self.i0) });
        }
        if !(self.iso_jitter_mm >= 0.0) {
            return Err(Error::Config { key: "iso_jitter_mm".into(), msg: "must be non-negative".into() });
        }
        self.poses().map(|_| ())
    }

    pub fn poses(&self) -> Result<Vec<CArmPose>> {
        grid_poses(self.phi_range, self.theta_range, self.step_deg, &self.template)
    }
}

/// The phantom and task of one scan, including its isocenter offset.
pub fn scan_scene(seed: u64, cfg: &ScanConfig) -> (Phantom, TaskRegion) {
    let (phantom, task) = build_chest_phantom_with(seed, &cfg.chest);
    let offset = iso_offset(seed, cfg.iso_jitter_mm);
    (phantom.translated(&offset), task.translated(&offset))
}

/// Moving the isocenter by `-d` is the same as moving the scene by `d`.
fn iso_offset(seed: u64, jitter: f64) -> Vec3 {
    if jitter == 0.0 {
        return Vec3::zeros();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ JITTER_SALT);
    Vec3::new(
        rng.random_range(-jitter..=jitter),
        rng.random_range(-jitter..=jitter),
        rng.random_range(-jitter..=jitter),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub phantom_seed: u64,
    pub projections_path: PathBuf,
    pub noisy_path: PathBuf,
    pub map_path: PathBuf,
    pub fluence_i0: f64,
    pub n_views: usize,
}

impl ScanRecord {
    pub fn scene_path(&self) -> PathBuf {
        self.map_path.with_file_name(format!("scan_{}_scene.txt", self.phantom_seed))
    }

    pub fn read_map(&self) -> Result<DetectabilityMap> {
        DetectabilityMap::read_csv(&self.map_path)
    }
}

fn scan_paths(seed: u64, dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let stem = |suffix: &str| dir.join(format!("scan_{seed}_{suffix}"));
    (stem("clean.stk"), stem("noisy.stk"), stem("map.csv"), stem("scene.txt"))
}

/// Renders every grid pose of one phantom and writes the scan files into
/// `cfg.out_dir`. The output depends only on `seed` and `cfg`.
pub fn generate_scan(seed: u64, cfg: &ScanConfig) -> Result<ScanRecord> {
    cfg.validate()?;
    let poses = cfg.poses()?;
    let (phantom, task) = scan_scene(seed, cfg);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (clean_path, noisy_path, map_path, scene_path) = scan_paths(seed, &cfg.out_dir);

    let mut clean = StackWriter::create(&clean_path, StackKind::LineIntegrals)?;
    let mut noisy = StackWriter::create(&noisy_path, StackKind::Counts)?;
    let noise_seed = seed ^ NOISE_SALT;
    for pose in &poses {
        let proj = project(&phantom, pose)?.with_fluence(cfg.i0);
        clean.write_line_integrals(pose, &proj.line_integrals)?;
        let counts = sample_counts(&proj.expected_counts()?, pose, noise_seed);
        noisy.write_counts(pose, &counts)?;
    }
    clean.finish()?;
    noisy.finish()?;

    let map = detectability_map(&phantom, &poses, &task, &cfg.detect, &cfg.freq_grid)?;
    map.write_csv(&map_path)?;
    write_scene(&scene_path, &phantom, Some(&task))?;

    Ok(ScanRecord {
        phantom_seed: seed,
        projections_path: clean_path,
        noisy_path,
        map_path,
        fluence_i0: cfg.i0,
        n_views: poses.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub train: Vec<ScanRecord>,
    pub val: Vec<ScanRecord>,
}

impl Corpus {
    pub fn total_views(&self) -> usize {
        self.train.iter().chain(&self.val).map(|r| r.n_views).sum()
    }

    /// Fails if a phantom seed appears in both splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<u64> = self.train.iter().map(|r| r.phantom_seed).collect();
        match self.val.iter().find(|r| train.contains(&r.phantom_seed)) {
            Some(r) => Err(Error::InvalidArgument(format!(
                "phantom seed {} is in both training and validation splits",
                r.phantom_seed
            ))),
            None => Ok(()),
        }
    }

    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        write_manifest(&dir.join(TRAIN_MANIFEST), &self.train)?;
        write_manifest(&dir.join(VAL_MANIFEST), &self.val)
    }

    pub fn read_manifests(dir: &Path) -> Result<Self> {
        let corpus = Corpus {
            train: read_manifest(&dir.join(TRAIN_MANIFEST))?,
            val: read_manifest(&dir.join(VAL_MANIFEST))?,
        };
        corpus.check_disjoint()?;
        Ok(corpus)
    }
}

/// Scans the given seeds in parallel; the last `n_val` seeds form the
/// validation split.
pub fn build_corpus_from_seeds(seeds: &[u64], n_val: usize, cfg: &ScanConfig) -> Result<Corpus> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("corpus needs at least one scan".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::InvalidArgument(format!("duplicate phantom seed {dup}")));
    }
    if n_val >= seeds.len() && seeds.len() > 1 {
        return Err(Error::InvalidArgument(format!("{n_val} validation scans leave no training scans")));
    }
    let records = seeds.par_iter().map(|&s| generate_scan(s, cfg)).collect::<Result<Vec<_>>>()?;
    let split = records.len() - n_val.min(records.len() - 1);
    let corpus = Corpus { train: records[..split].to_vec(), val: records[split..].to_vec() };
    corpus.write_manifests(&cfg.out_dir)?;
    Ok(corpus)
}

pub fn build_corpus(n_scans: usize, seed0: u64, n_val: usize, cfg: &ScanConfig) -> Result<Corpus> {
    let seeds: Vec<u64> = (0..n_scans as u64).map(|k| seed0 + k).collect();
    build_corpus_from_seeds(&seeds, n_val, cfg)
}

pub fn manifest_csv(records: &[ScanRecord]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.phantom_seed,
            r.projections_path.display(),
            r.noisy_path.display(),
            r.map_path.display(),
            r.fluence_i0
        ));
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ScanRecord]) -> Result<()> {
    std::fs::write(path, manifest_csv(records)).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; view counts are taken from each scan's map.
pub fn read_manifest(path: &Path) -> Result<Vec<ScanRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, "missing manifest header"));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 2));
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let phantom_seed: u64 = f[0].parse().map_err(|_| bad("bad seed"))?;
        if !seen.insert(phantom_seed) {
            return Err(bad("duplicate seed"));
        }
        let fluence_i0: f64 = f[4].parse().map_err(|_| bad("bad i0"))?;
        let map_path = PathBuf::from(f[3]);
        let map = DetectabilityMap::read_csv(&map_path)?;
        records.push(ScanRecord {
            phantom_seed,
            projections_path: PathBuf::from(f[1]),
            noisy_path: PathBuf::from(f[2]),
            map_path,
            fluence_i0,
            n_views: map.phis.len() * map.thetas.len(),
        });
    }
    Ok(records)
}

/// Candidate values one step ahead of `phi`, read directly from the map;
/// `None` if any candidate is not a map node.
pub fn candidate_targets(map: &DetectabilityMap, phi: f64) -> Option<[f64; N_CANDIDATES]> {
    let next = (phi + VIEW_STEP_DEG).rem_euclid(360.0);
    let mut out = [0.0; N_CANDIDATES];
    for (o, &theta) in out.iter_mut().zip(&CANDIDATE_THETAS) {
        *o = map.get_wrapped(next, theta)?;
    }
    Some(out)
}

/// One sample per noisy view whose eleven next-step candidates are on the map.
pub fn make_samples(scan: &ScanRecord) -> Result<Vec<TrainingSample>> {
    let map = scan.read_map()?;
    let mut reader = StackReader::open(&scan.noisy_path)?;
    let mut samples = Vec::with_capacity(scan.n_views);
    while let Some(view) = reader.next_view()? {
        let counts = match view.data {
            StackData::Counts(c) => c,
            StackData::LineIntegrals(_) => {
                return Err(Error::format(&scan.noisy_path, "expected a count stack"));
            }
        };
        let Some(target) = candidate_targets(&map, view.phi_deg) else { continue };
        let raster = Raster { rows: counts.rows, cols: counts.cols, data: counts.data.iter().map(|&c| c as f64).collect() };
        samples.push(TrainingSample {
            input: featurize_counts(&raster, scan.fluence_i0)?,
            target,
            meta: SampleMeta { phi_deg: view.phi_deg, theta_deg: view.theta_deg, phantom_seed: scan.phantom_seed },
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> ScanConfig {
        ScanConfig {
            template: CArmPose { det_rows: 64, det_cols: 64, pitch_mm: 4.0, ..CArmPose::default() },
            phi_range: AngleRange::new(0.0, 20.0),
            theta_range: AngleRange::new(65.0, 115.0),
            out_dir: dir.to_path_buf(),
            ..ScanConfig::default()
        }
    }

    #[test]
    fn default_grid_has_1368_views() {
        assert_eq!(ScanConfig::default().poses().unwrap().len(), 1368);
    }

    #[test]
    fn manifest_arithmetic() {
        let rec = |s: u64| ScanRecord {
            phantom_seed: s,
            projections_path: PathBuf::new(),
            noisy_path: PathBuf::new(),
            map_path: PathBuf::new(),
            fluence_i0: 500.0,
            n_views: 1368,
        };
        let corpus = Corpus { train: (0..200).map(rec).collect(), val: (200..212).map(rec).collect() };
        assert_eq!(corpus.total_views(), 290_016);
        corpus.check_disjoint().unwrap();
        let leaky = Corpus { train: vec![rec(1), rec(2)], val: vec![rec(2)] };
        assert!(leaky.check_disjoint().is_err());
    }

    #[test]
    fn jitter_is_bounded_and_seeded() {
        for seed in 0..50 {
            let o = iso_offset(seed, 20.0);
            assert!(o.iter().all(|v| v.abs() <= 20.0));
            assert_eq!(o, iso_offset(seed, 20.0));
        }
        assert_ne!(iso_offset(1, 20.0), iso_offset(2, 20.0));
        assert_eq!(iso_offset(3, 0.0), Vec3::zeros());
    }

    #[test]
    fn scan_is_reproducible_and_samples_are_map_lookups() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let a = generate_scan(7, &cfg).unwrap();
        let bytes: Vec<Vec<u8>> = [&a.projections_path, &a.noisy_path, &a.map_path, &a.scene_path()]
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        let b = generate_scan(7, &cfg).unwrap();
        assert_eq!(a, b);
        for (p, old) in [&b.projections_path, &b.noisy_path, &b.map_path, &b.scene_path()].iter().zip(&bytes) {
            assert_eq!(&std::fs::read(p).unwrap(), old);
        }
        assert_eq!(a.n_views, 4 * 11);

        // Only phi = 0, 5, 10 have their next step on this partial grid.
        let samples = make_samples(&a).unwrap();
        assert_eq!(samples.len(), 3 * 11);
        let map = a.read_map().unwrap();
        for s in &samples {
            assert_eq!(s.input.0.len(), crate::surrogate::FEATURE_DIM);
            for (k, &theta) in CANDIDATE_THETAS.iter().enumerate() {
                assert_eq!(s.target[k], map.get(s.meta.phi_deg + 5.0, theta).unwrap());
            }
            assert!(s.target.iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn corpus_split_is_by_seed_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScanConfig { phi_range: AngleRange::new(0.0, 5.0), ..small_cfg(dir.path()) };
        assert!(build_corpus_from_seeds(&[1, 2, 1], 1, &cfg).is_err());
        let corpus = build_corpus(4, 10, 1, &cfg).unwrap();
        assert_eq!(corpus.train.len(), 3);
        assert_eq!(corpus.val[0].phantom_seed, 13);
        let back = Corpus::read_manifests(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.total_views(), 4 * 11);
    }

    #[test]
    fn full_circle_targets_wrap() {
        let phis: Vec<f64> = (0..72).map(|k| 5.0 * k as f64).collect();
        let thetas: Vec<f64> = (0..19).map(|k| 45.0 + 5.0 * k as f64).collect();
        let d2: Vec<f64> = (0..72 * 19).map(|i| i as f64).collect();
        let map = DetectabilityMap::new(phis.clone(), thetas, d2).unwrap();
        let n: usize = phis.iter().filter(|&&p| candidate_targets(&map, p).is_some()).count();
        assert_eq!(n * 19, 72 * 19);
        let t = candidate_targets(&map, 0.0).unwrap();
        assert_eq!(t[5], map.get(5.0, 90.0).unwrap());
        let last = candidate_targets(&map, 355.0).unwrap();
        assert_eq!(last[0], map.get(0.0, 65.0).unwrap());
    }
}
