//! Command-line front end for `metareg`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use metareg::io::{
    format_poses, load_frame, load_manifest, read_json, read_overlap_graph, read_poses, write_json,
    write_meta_ply, write_scene, FrameFiles,
};
use metareg::meta_update::MergeMode;
use metareg::metrics::evaluate;
use metareg::pipeline::{register_pair, register_scene_with_features, PipelineConfig, SceneResult};
use metareg::synth::{generate_scene, SynthConfig};
use metareg::{Error, FeatureCloud, FrameId, Pose};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "metareg", version, about = "Incremental multiview point cloud registration")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register every frame listed in a scene manifest.
    Register {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Estimate the transform between two frames directly.
    Pairwise {
        /// Keypoint PLY of the source frame.
        a: PathBuf,
        /// Keypoint PLY of the target frame.
        b: PathBuf,
        /// Descriptor files; default to the PLY path with a `.desc` extension.
        #[arg(long)]
        a_descriptors: Option<PathBuf>,
        #[arg(long)]
        b_descriptors: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score predicted poses against ground truth.
    Eval {
        /// Pose text file or a `register` result JSON.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Restrict to pairs whose ground-truth overlap exceeds --min-overlap.
        #[arg(long)]
        overlap_graph: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        min_overlap: f64,
        #[arg(long, default_value = "meters")]
        units: String,
        /// Write the report JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// JSON file with a full pipeline configuration; flags override it.
    #[arg(long)]
    pipeline_config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    fusion_neighbors: Option<usize>,
    #[arg(long)]
    overlap_threshold: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
    #[arg(long)]
    min_inliers: Option<usize>,
    #[arg(long, value_parser = ["reservoir", "concat", "mean"])]
    merge_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.pipeline_config {
            Some(path) => read_json(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(tau => tau, topk => top_k, fusion_neighbors => fusion_neighbors,
             overlap_threshold => overlap_threshold, ransac_iters => ransac_iterations,
             min_inliers => min_inliers, seed => seed);
        if let Some(mode) = &self.merge_mode {
            cfg.merge_mode = mode.parse::<MergeMode>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything written to `result.json`.
#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a PipelineConfig,
    manifest: &'a Path,
    units: &'a str,
    #[serde(flatten)]
    result: &'a SceneResult,
}

#[derive(Serialize)]
struct Timings<'a> {
    total_seconds: f64,
    step_seconds: &'a [f64],
}

#[derive(Serialize)]
struct PairReport<'a> {
    config: &'a PipelineConfig,
    correspondences: usize,
    inlier_count: usize,
    transform: Option<Pose>,
    failure: Option<metareg::matching::EstimateFailure>,
}

#[derive(Deserialize)]
struct PosesOnly {
    poses: BTreeMap<FrameId, Pose>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("REG_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_owned(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_owned(), source })
}

fn order_log(result: &SceneResult) -> String {
    let mut out = format!("0 seed {}\n", result.seed_frame);
    for (i, step) in result.steps.iter().enumerate() {
        writeln!(
            out,
            "{} merge {} inliers={} observations={} branch={:?} meta_points={}",
            i + 1,
            step.frame,
            step.inlier_count,
            step.observation_count,
            step.branch,
            step.meta_points
        )
        .unwrap();
    }
    for id in &result.failed {
        writeln!(out, "- failed {id}").unwrap();
    }
    out
}

fn register(manifest: &Path, out: &Path, args: &PipelineArgs) -> Result<i32, Error> {
    let cfg = args.config()?;
    let started = Instant::now();
    let scene = load_manifest(manifest)?;
    let result = register_scene_with_features(&scene.frames, scene.global_features.as_deref(), &cfg)?;

    ensure_dir(out)?;
    let report = RunReport {
        config: &cfg,
        manifest,
        units: &scene.units,
        result: &result,
    };
    write_json(&out.join("result.json"), &report)?;
    write_text(&out.join("poses.txt"), &format_poses(&result.poses))?;
    write_meta_ply(&out.join("meta_shape.ply"), &result.meta)?;
    write_text(&out.join("order.log"), &order_log(&result))?;
    write_json(
        &out.join("timings.json"),
        &Timings {
            total_seconds: started.elapsed().as_secs_f64(),
            step_seconds: &result.step_seconds,
        },
    )?;
    log::info!(
        "registered {} of {} frames",
        result.poses.len(),
        scene.frames.len()
    );
    Ok(if result.is_complete() { EXIT_OK } else { EXIT_PARTIAL })
}

fn frame_files(id: FrameId, ply: &Path, desc: Option<&Path>) -> FrameFiles {
    FrameFiles {
        id,
        keypoints: ply.to_owned(),
        descriptors: desc.map_or_else(|| ply.with_extension("desc"), Path::to_owned),
        global_feature: None,
    }
}

fn pairwise(a: FrameFiles, b: FrameFiles, args: &PipelineArgs) -> Result<i32, Error> {
    let cfg = args.config()?;
    let (fa, _) = load_frame(&a)?;
    let (fb, _) = load_frame(&b)?;
    let est = register_pair(&fa, &fb, &cfg)?;
    let report = PairReport {
        config: &cfg,
        correspondences: est.inlier_mask.len(),
        inlier_count: est.inlier_count,
        transform: est.transform,
        failure: est.failure,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(if est.is_success() { EXIT_OK } else { EXIT_PARTIAL })
}

fn read_any_poses(path: &Path) -> Result<BTreeMap<FrameId, Pose>, Error> {
    let head = fs::read(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    if head.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        Ok(read_json::<PosesOnly>(path)?.poses)
    } else {
        read_poses(path)
    }
}

fn eval(
    pred: &Path,
    gt: &Path,
    graph: Option<&Path>,
    min_overlap: f64,
    units: &str,
    out: Option<&Path>,
) -> Result<i32, Error> {
    let predicted = read_any_poses(pred)?;
    let truth = read_any_poses(gt)?;
    let pairs: Vec<(FrameId, FrameId)> = match graph {
        Some(path) => read_overlap_graph(path)?
            .into_iter()
            .filter(|e| e.ratio > min_overlap)
            .map(|e| (e.a, e.b))
            .collect(),
        None => {
            let ids: Vec<FrameId> = truth.keys().copied().collect();
            ids.iter()
                .enumerate()
                .flat_map(|(i, &a)| ids[i + 1..].iter().map(move |&b| (a, b)))
                .collect()
        }
    };
    let report = evaluate(&predicted, &truth, &pairs, units)?;
    match out {
        Some(path) => {
            write_json(path, &report)?;
            print!("{}", report.ecdf_table());
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            eprint!("{}", report.ecdf_table());
        }
    }
    Ok(EXIT_OK)
}

fn synth(config: Option<&Path>, out: &Path) -> Result<i32, Error> {
    let cfg: SynthConfig = match config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    let scene = generate_scene(&cfg)?;
    let manifest = write_scene(out, &scene, "meters")?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    let points: usize = scene.frames.iter().map(|f| f.len()).sum();
    log::info!(
        "wrote {} frames ({points} keypoints) to {}",
        scene.frames.len(),
        manifest.display()
    );
    Ok(EXIT_OK)
}

fn dispatch(command: Command) -> Result<i32, Error> {
    match command {
        Command::Register { manifest, out, pipeline } => register(&manifest, &out, &pipeline),
        Command::Pairwise { a, b, a_descriptors, b_descriptors, pipeline } => pairwise(
            frame_files(0, &a, a_descriptors.as_deref()),
            frame_files(1, &b, b_descriptors.as_deref()),
            &pipeline,
        ),
        Command::Eval { pred, gt, overlap_graph, min_overlap, units, out } => {
            eval(&pred, &gt, overlap_graph.as_deref(), min_overlap, &units, out.as_deref())
        }
        Command::Synth { config, out } => synth(config.as_deref(), &out),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_ERROR;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
