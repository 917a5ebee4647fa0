use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use trajsim::config::RunConfig;
use trajsim::dataset::{build_corpus, candidate_targets, generate_scan, make_samples, Corpus};
use trajsim::detectability::{detectability_map, DetectabilityMap};
use trajsim::metrics::{
    accumulated_detectability, records_for_run, streak_index, trajectory_distance, volume_rmse, EvalReport,
    MeanStd, NoiseRow,
};
use trajsim::phantom::{build_chest_phantom, read_scene, write_scene, Phantom, TaskRegion};
use trajsim::planner::{
    planar_trajectory, run_trajectory, servo_csv, servo_trace, Backend, BackendKind, Trajectory,
};
use trajsim::projector::{add_poisson_noise, project};
use trajsim::recon::{cgls, ground_truth_volume, sinogram_view, CglsResult, ReconVolume, SystemOperator};
use trajsim::surrogate::{train, RegressorModel};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Intermediate substeps per view in the emitted servo trace.
const SERVO_SUBSTEPS: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "trajsim", version, about = "Task-aware C-arm trajectory planning on simulated cone-beam CT")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Flat TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Phantom / noise seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Acquisition fluence; overrides `i0` in the config.
    #[arg(long, global = true)]
    pub i0: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Oracle,
    Surrogate,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    pub backend: BackendArg,
    /// Trained regressor, required by the surrogate backend.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub theta_init: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the seeded screw phantom and its ground-truth volume.
    Phantom,
    /// Render every grid pose of one scene and write its detectability map.
    ScanGrid,
    /// Compute the detectability map of the seeded phantom.
    DetectMap,
    /// Generate `n_scans` grid scans with a seed-disjoint train/val split.
    BuildCorpus,
    /// Train the regressor on the corpus in the output directory.
    Train {
        /// Where to save the model; defaults to `<out>/model.bin`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Plan a trajectory on the seeded phantom.
    Plan(PlanArgs),
    /// Reconstruct the seeded phantom from a trajectory CSV.
    Recon {
        /// Trajectory CSV; defaults to the planar short scan.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Reconstruct planned and planar scans and tabulate streak and RMSE.
    Compare(PlanArgs),
    /// Evaluate a planner backend on the validation split.
    Eval {
        #[arg(long, value_enum, default_value = "surrogate")]
        backend: BackendArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render a map CSV (with optional trajectory markers) or a volume slice as PGM.
    Plot {
        #[arg(long, conflicts_with = "volume", required_unless_present = "volume")]
        map: Option<PathBuf>,
        #[arg(long, requires = "map")]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Axial slice index; defaults to the middle slice.
        #[arg(long, requires = "volume")]
        slice: Option<usize>,
    },
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let validation = error.chain().any(|c| c.downcast_ref::<trajsim::Error>().is_some_and(|e| e.is_validation()));
        Failure { code: if validation { EXIT_VALIDATION } else { EXIT_RUNTIME }, error }
    }
}

impl From<trajsim::Error> for Failure {
    fn from(e: trajsim::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow::anyhow!(msg.into()) }
}

pub fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("TRAJSIM_THREADS") else { return Ok(()) };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(Failure {
                code: EXIT_VALIDATION,
                error: anyhow::anyhow!("TRAJSIM_THREADS = {raw:?} must be a positive integer"),
            })
        }
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow::anyhow!(e).into())
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(i0) = common.i0 {
            cfg.i0 = i0;
        }
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Ctx { seed: common.seed.unwrap_or(cfg.seed), cfg, out })
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn scene(&self) -> (Phantom, TaskRegion) {
        build_chest_phantom(self.seed)
    }

    fn map(&self, phantom: &Phantom, task: &TaskRegion) -> Result<DetectabilityMap, Failure> {
        let scan = self.cfg.scan_config(&self.out)?;
        Ok(detectability_map(phantom, &scan.poses()?, task, &scan.detect, &scan.freq_grid)?)
    }

    fn theta_init(&self, arg: Option<f64>) -> Result<f64, Failure> {
        let theta = arg.unwrap_or(self.cfg.theta_init);
        RunConfig { theta_init: theta, ..self.cfg.clone() }.validate()?;
        Ok(theta)
    }
}

fn load_model(backend: BackendArg, model: Option<&Path>) -> Result<Option<RegressorModel>, Failure> {
    match (backend, model) {
        (BackendArg::Oracle, _) => Ok(None),
        (BackendArg::Surrogate, None) => Err(usage("--backend surrogate requires --model PATH")),
        (BackendArg::Surrogate, Some(p)) => Ok(Some(RegressorModel::load(p)?)),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx::new(&cli.common)?;
    match cli.command {
        Command::Phantom => cmd_phantom(&ctx),
        Command::ScanGrid => cmd_scan_grid(&ctx),
        Command::DetectMap => cmd_detect_map(&ctx),
        Command::BuildCorpus => cmd_build_corpus(&ctx),
        Command::Train { model } => cmd_train(&ctx, model),
        Command::Plan(args) => cmd_plan(&ctx, &args),
        Command::Recon { trajectory } => cmd_recon(&ctx, trajectory.as_deref()),
        Command::Compare(args) => cmd_compare(&ctx, &args),
        Command::Eval { backend, model } => cmd_eval(&ctx, backend, model.as_deref()),
        Command::Plot { map, trajectory, volume, slice } => {
            cmd_plot(&ctx, map.as_deref(), trajectory.as_deref(), volume.as_deref(), slice)
        }
    }
}

fn cmd_phantom(ctx: &Ctx) -> Result<(), Failure> {
    let (phantom, task) = ctx.scene();
    let scene = ctx.path(format!("phantom_{}.txt", ctx.seed));
    write_scene(&scene, &phantom, Some(&task))?;
    let geom = ctx.cfg.volume_geometry();
    let gt = ground_truth_volume(&phantom, geom, ctx.cfg.gt_supersample)?;
    gt.save(&ctx.path(format!("phantom_{}_gt.vol", ctx.seed)))?;
    gt.write_slice_pgm(&ctx.path(format!("phantom_{}_gt.pgm", ctx.seed)), geom.dims[2] / 2, None)?;
    println!(
        "phantom seed {}: {} primitives, {} metal; scene {}",
        ctx.seed,
        phantom.primitives.len(),
        phantom.metal_indices.len(),
        scene.display()
    );
    Ok(())
}

fn cmd_scan_grid(ctx: &Ctx) -> Result<(), Failure> {
    let rec = generate_scan(ctx.seed, &ctx.cfg.scan_config(&ctx.out)?)?;
    println!("scan seed {}: {} views -> {}", rec.phantom_seed, rec.n_views, rec.projections_path.display());
    Ok(())
}

fn cmd_detect_map(ctx: &Ctx) -> Result<(), Failure> {
    let (phantom, task) = ctx.scene();
    let map = ctx.map(&phantom, &task)?;
    map.write_csv(&ctx.path(format!("map_{}.csv", ctx.seed)))?;
    map.write_pgm(&ctx.path(format!("map_{}.pgm", ctx.seed)), &[])?;
    let (lo, hi) = map.d2.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!("map seed {}: {}x{} poses, d2 in [{lo:.4e}, {hi:.4e}]", ctx.seed, map.phis.len(), map.thetas.len());
    Ok(())
}

fn cmd_build_corpus(ctx: &Ctx) -> Result<(), Failure> {
    let corpus = build_corpus(ctx.cfg.n_scans, ctx.seed, ctx.cfg.n_val, &ctx.cfg.scan_config(&ctx.out)?)?;
    println!(
        "corpus: {} train + {} val scans, {} views in {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.total_views(),
        ctx.out.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, model_path: Option<PathBuf>) -> Result<(), Failure> {
    let corpus = Corpus::read_manifests(&ctx.out)?;
    let mut samples = Vec::new();
    for rec in &corpus.train {
        samples.extend(make_samples(rec)?);
    }
    if samples.is_empty() {
        return Err(anyhow::anyhow!("no training samples in {}", ctx.out.display()).into());
    }
    let (model, trace) = train(&samples, &ctx.cfg.train_config())?;
    let path = model_path.unwrap_or_else(|| ctx.path("model.bin"));
    model.save(&path)?;
    write(&ctx.path("loss.csv"), &trace.to_csv())?;
    let last = trace.epochs.last().expect("at least one epoch");
    println!(
        "trained on {} samples: final train loss {:.4e}, val loss {}; model {}",
        samples.len(),
        last.train_loss_mean,
        last.val_loss.map_or("n/a".to_string(), |v| format!("{v:.4e}")),
        path.display()
    );
    Ok(())
}

/// Plans on the seeded phantom; returns the trajectory and its map.
fn plan_on_scene(ctx: &Ctx, args: &PlanArgs) -> Result<(Trajectory, DetectabilityMap, String), Failure> {
    let model = load_model(args.backend, args.model.as_deref())?;
    let theta_init = ctx.theta_init(args.theta_init)?;
    let (phantom, task) = ctx.scene();
    let oracle = ctx.cfg.detect_model(task.clone())?;
    let backend = match &model {
        None => Backend::Oracle(&oracle),
        Some(m) => Backend::Surrogate { model: m, i0: ctx.cfg.i0, noise: true },
    };
    let pcfg = ctx.cfg.planner_config(ctx.seed);
    let run = run_trajectory(&phantom, &backend, ctx.cfg.plan_phi_start, ctx.cfg.plan_phi_end, theta_init, &pcfg)?;
    let map = ctx.map(&phantom, &task)?;
    let tag = backend.kind().to_string();
    run.trajectory.write_csv(&ctx.path(format!("trajectory_{tag}.csv")), |phi, theta| {
        map.get(phi, theta).ok_or_else(|| trajsim::Error::InvalidPose(format!("({phi}, {theta}) off the map")))
    })?;
    write(&ctx.path(format!("servo_{tag}.csv")), &servo_csv(&servo_trace(&run, SERVO_SUBSTEPS)?))?;
    let markers: Vec<(f64, f64)> = run.trajectory.views.iter().map(|v| (v.phi, v.theta)).collect();
    map.write_pgm(&ctx.path(format!("map_{tag}.pgm")), &markers)?;
    Ok((run.trajectory, map, tag))
}

fn cmd_plan(ctx: &Ctx, args: &PlanArgs) -> Result<(), Failure> {
    let (traj, map, tag) = plan_on_scene(ctx, args)?;
    let planar = planar_trajectory(ctx.cfg.plan_phi_start, ctx.cfg.plan_phi_end)?;
    let planned = accumulated_detectability(&map, &traj, false)?;
    let base = accumulated_detectability(&map, &planar, false)?;
    println!(
        "{tag}: {} views, sum d2 {planned:.4e} vs planar {base:.4e} ({:+.1}%)",
        traj.len(),
        100.0 * (planned - base) / base
    );
    Ok(())
}

fn reconstruct(ctx: &Ctx, phantom: &Phantom, traj: &Trajectory) -> Result<CglsResult, Failure> {
    let poses = traj.poses(&ctx.cfg.pose_template());
    let sino = poses
        .iter()
        .map(|p| sinogram_view(&add_poisson_noise(&project(phantom, p)?.with_fluence(ctx.cfg.i0), ctx.seed)?))
        .collect::<trajsim::Result<Vec<_>>>()?;
    let op = SystemOperator::new(ctx.cfg.volume_geometry(), poses)?;
    Ok(cgls(&op, &sino, ctx.cfg.cgls_iters)?)
}

fn cgls_trace_csv(res: &CglsResult) -> String {
    let mut out = String::from("iteration,residual_norm,normal_residual_norm\n");
    for (k, (r, g)) in res.residual_norms.iter().zip(&res.normal_residual_norms).enumerate() {
        out.push_str(&format!("{k},{r:.10e},{g:.10e}\n"));
    }
    out
}

/// Writes volume, middle slice and CGLS trace; returns (streak, rmse).
fn save_recon(ctx: &Ctx, tag: &str, res: &CglsResult, gt: &ReconVolume, phantom: &Phantom) -> Result<(f64, f64), Failure> {
    let vol = &res.volume;
    vol.save(&ctx.path(format!("recon_{tag}.vol")))?;
    vol.write_slice_pgm(&ctx.path(format!("recon_{tag}.pgm")), vol.geom.dims[2] / 2, Some((0.0, 0.06)))?;
    write(&ctx.path(format!("cgls_{tag}.csv")), &cgls_trace_csv(res))?;
    Ok((streak_index(vol, gt, phantom)?, volume_rmse(vol, gt, phantom)?))
}

fn cmd_recon(ctx: &Ctx, trajectory: Option<&Path>) -> Result<(), Failure> {
    let traj = match trajectory {
        Some(p) => Trajectory::read_csv(p, BackendKind::Oracle, ctx.cfg.slew_limit_deg)?,
        None => planar_trajectory(ctx.cfg.plan_phi_start, ctx.cfg.plan_phi_end)?,
    };
    traj.validate()?;
    let (phantom, _) = ctx.scene();
    let gt = ground_truth_volume(&phantom, ctx.cfg.volume_geometry(), ctx.cfg.gt_supersample)?;
    let res = reconstruct(ctx, &phantom, &traj)?;
    let tag = trajectory.and_then(|p| p.file_stem()).map_or("planar".to_string(), |s| s.to_string_lossy().into());
    let (streak, rmse) = save_recon(ctx, &tag, &res, &gt, &phantom)?;
    println!("{tag}: {} views, {} iterations, streak {streak:.5e}, rmse {rmse:.5e}", traj.len(), res.iterations);
    Ok(())
}

fn cmd_compare(ctx: &Ctx, args: &PlanArgs) -> Result<(), Failure> {
    let (planned, map, tag) = plan_on_scene(ctx, args)?;
    let planar = planar_trajectory(ctx.cfg.plan_phi_start, ctx.cfg.plan_phi_end)?;
    let (phantom, _) = ctx.scene();
    let gt = ground_truth_volume(&phantom, ctx.cfg.volume_geometry(), ctx.cfg.gt_supersample)?;
    let mut table = String::from("trajectory,n_views,sum_d2,streak_index,rmse\n");
    for (name, traj) in [(tag.as_str(), &planned), ("planar", &planar)] {
        let res = reconstruct(ctx, &phantom, traj)?;
        let (streak, rmse) = save_recon(ctx, name, &res, &gt, &phantom)?;
        let sum = accumulated_detectability(&map, traj, false)?;
        table.push_str(&format!("{name},{},{sum:.6e},{streak:.6e},{rmse:.6e}\n", traj.len()));
    }
    write(&ctx.path("compare.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(ctx: &Ctx, backend: BackendArg, model: Option<&Path>) -> Result<(), Failure> {
    let model = load_model(backend, model)?;
    let corpus = Corpus::read_manifests(&ctx.out)?;
    if corpus.val.is_empty() {
        return Err(anyhow::anyhow!("validation split in {} is empty", ctx.out.display()).into());
    }
    let pcfg = ctx.cfg.planner_config(ctx.seed);
    let (start, end) = (ctx.cfg.plan_phi_start, ctx.cfg.plan_phi_end);
    let mut records = Vec::new();
    let mut distances = vec![Vec::new(); ctx.cfg.eval_fluences.len()];
    for rec in &corpus.val {
        let (phantom, task) = read_scene(&rec.scene_path())?;
        let Some(task) = task else {
            return bail_failure(format!("{} has no task region", rec.scene_path().display()));
        };
        let map = rec.read_map()?;
        let oracle = ctx.cfg.detect_model(task)?;
        let surrogate = |i0: f64, noise: bool| match &model {
            Some(m) => Backend::Surrogate { model: m, i0, noise },
            None => Backend::Oracle(&oracle),
        };
        let run = run_trajectory(&phantom, &surrogate(ctx.cfg.i0, true), start, end, ctx.cfg.theta_init, &pcfg)?;
        records.extend(records_for_run(&run.trajectory, &run.candidates, |phi, _| {
            candidate_targets(&map, phi)
                .ok_or_else(|| trajsim::Error::InvalidPose(format!("candidates at phi = {phi} are off the map")))
        })?);
        for (d, &i0) in distances.iter_mut().zip(&ctx.cfg.eval_fluences) {
            let clean = run_trajectory(&phantom, &surrogate(i0, false), start, end, ctx.cfg.theta_init, &pcfg)?;
            let noisy = run_trajectory(&phantom, &surrogate(i0, true), start, end, ctx.cfg.theta_init, &pcfg)?;
            d.push(trajectory_distance(&clean.trajectory, &noisy.trajectory)?);
        }
    }
    let noise = ctx.cfg.eval_fluences.iter().zip(&distances).map(|(&i0, d)| NoiseRow { i0, distance: MeanStd::of(d) });
    let report = EvalReport { records, noise: noise.collect() };
    report.write(&ctx.out)?;
    print!("{}", report.summary()?);
    Ok(())
}

fn bail_failure<T>(msg: String) -> Result<T, Failure> {
    Err(anyhow::anyhow!(msg).into())
}

fn cmd_plot(
    ctx: &Ctx,
    map: Option<&Path>,
    trajectory: Option<&Path>,
    volume: Option<&Path>,
    slice: Option<usize>,
) -> Result<(), Failure> {
    let stem = |p: &Path| p.file_stem().map_or("plot".to_string(), |s| s.to_string_lossy().into_owned());
    if let Some(map_path) = map {
        let map = DetectabilityMap::read_csv(map_path)?;
        let markers: Vec<(f64, f64)> = match trajectory {
            Some(t) => Trajectory::read_csv(t, BackendKind::Oracle, ctx.cfg.slew_limit_deg)?
                .views
                .iter()
                .map(|v| (v.phi, v.theta))
                .collect(),
            None => Vec::new(),
        };
        let out = ctx.path(format!("{}.pgm", stem(map_path)));
        map.write_pgm(&out, &markers)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let Some(vol_path) = volume else { return Err(usage("plot needs --map or --volume")) };
    let vol = ReconVolume::load(vol_path)?;
    let k = slice.unwrap_or(vol.geom.dims[2] / 2);
    if k >= vol.geom.dims[2] {
        return Err(trajsim::Error::InvalidArgument(format!("slice {k} outside 0..{}", vol.geom.dims[2])).into());
    }
    let out = ctx.path(format!("{}_z{k}.pgm", stem(vol_path)));
    vol.write_slice_pgm(&out, k, None)?;
    println!("wrote {} ({}x{})", out.display(), vol.geom.dims[0], vol.geom.dims[1]);
    Ok(())
}
