use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use drpoint::data::io::{load_png, load_xyz, save_png, save_xyz, ManifestEntry};
use drpoint::data::{load_dataset, synth_dataset, Triplet, CAMERA_RADIUS};
use drpoint::geometry::{generate_camera_poses, normalize_cloud};
use drpoint::losses::{chamfer, fscore, ChamferVariant, FSCORE_THRESHOLD};
use drpoint::renderer::{encode_depth_raw, render, write_depth_png};
use drpoint::trainer::{
    checkpoint_load, embed_object, finite_difference_check, pretrain, resume, GradOp, RunOptions, TrainConfig,
};
use drpoint::{Error, RenderConfig};

#[derive(Parser)]
#[command(name = "drpoint", version, about = "Tri-modal point cloud pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a normalized cloud to depth images from the 32-pose rig.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        /// `all` or a single pose index in 0..32.
        #[arg(long, default_value = "all")]
        poses: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of depth slices.
        #[arg(long, default_value_t = 32)]
        grid: usize,
        /// Image size as WxH; defaults to grid x grid.
        #[arg(long)]
        size: Option<String>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// One of render, dr_loss, chamfer, nce, moco, token_ce, backbone.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train from a config file on a manifest or `synth:N`.
    Pretrain {
        /// TOML or JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest path (JSON lines) or `synth:N`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Keep only the newest N epoch checkpoints.
        #[arg(long)]
        keep_checkpoints: Option<usize>,
        /// Continue from a checkpoint; its stored config wins over --config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print unit-norm embeddings of a cloud (and optional image) as JSON.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        rgb: Option<PathBuf>,
        /// Pose index of the rendered depth view.
        #[arg(long, default_value_t = 0)]
        depth_view: usize,
    },
    /// Print CD-l1, CD-l2 and F-Score@1% between two clouds as JSON.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Write a synthetic dataset (xyz clouds, png images, manifest.jsonl).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failed check or a diverged run, as opposed to bad input.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn read_cloud(path: &Path) -> anyhow::Result<drpoint::PointCloud> {
    load_xyz(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).context("--size must look like WxH")?;
    Ok((w.trim().parse().context("bad width")?, h.trim().parse().context("bad height")?))
}

fn cmd_render(cloud: &Path, poses: &str, out: &Path, grid: usize, size: Option<&str>) -> anyhow::Result<()> {
    let (width, height) = match size {
        Some(s) => parse_size(s)?,
        None => (grid, grid),
    };
    let cfg = RenderConfig {
        grid_depth: grid,
        image_width: width,
        image_height: height,
        ..RenderConfig::default()
    };
    cfg.validate()?;
    let cloud = normalize_cloud(&read_cloud(cloud)?)?.cloud;
    let rig = generate_camera_poses(CAMERA_RADIUS)?;
    let selected: Vec<usize> = if poses == "all" {
        (0..rig.len()).collect()
    } else {
        let t: usize = poses.parse().context("--poses must be `all` or an index")?;
        if t >= rig.len() {
            bail!("pose index {t} outside 0..{}", rig.len());
        }
        vec![t]
    };
    std::fs::create_dir_all(out)?;
    for t in selected {
        let img = render(&cloud, &rig[t], &cfg);
        write_depth_png(&img, &out.join(format!("view_{t:02}.png")))?;
        std::fs::write(out.join(format!("view_{t:02}.f32")), encode_depth_raw(&img))?;
    }
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, tol: f64, h: f64, seed: u64) -> anyhow::Result<()> {
    let ops = match op {
        Some(name) => vec![GradOp::parse(name).with_context(|| format!("unknown op `{name}`"))?],
        None => GradOp::ALL.to_vec(),
    };
    if !(h > 0.0 && tol > 0.0) {
        bail!("--h and --tol must be positive");
    }
    let mut failed = Vec::new();
    for op in ops {
        let report = finite_difference_check(op, seed, h, tol);
        print!("{report}");
        if !report.pass() {
            failed.push(op.name());
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn load_data(spec: &str, seed: u64) -> anyhow::Result<Vec<Triplet>> {
    match spec.strip_prefix("synth:") {
        Some(n) => {
            let n: usize = n.parse().context("synth:N needs a positive integer")?;
            if n == 0 {
                bail!("synth:N needs a positive integer");
            }
            Ok(synth_dataset(n, seed)?)
        }
        None => Ok(load_dataset(Path::new(spec), seed)?),
    }
}

fn cmd_pretrain(
    config: Option<&Path>,
    data: &str,
    out: &Path,
    keep_checkpoints: Option<usize>,
    resume_from: Option<&Path>,
) -> anyhow::Result<()> {
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        keep_checkpoints,
    };
    let (state, log) = match resume_from {
        Some(ckpt) => {
            let state = checkpoint_load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dataset = load_data(data, state.config.seed)?;
            resume(state, &dataset, &opts)?
        }
        None => {
            let cfg = match config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let dataset = load_data(data, cfg.seed)?;
            pretrain(&dataset, &cfg, &opts)?
        }
    };
    match log.last() {
        Some(m) => eprintln!("finished at step {} of {}: total loss {:.6}", m.step, state.total_steps(), m.total),
        None => eprintln!("nothing to do: run already at step {}", state.step),
    }
    Ok(())
}

fn cmd_embed(checkpoint: &Path, cloud: &Path, rgb: Option<&Path>, depth_view: usize) -> anyhow::Result<()> {
    let state = checkpoint_load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cloud = read_cloud(cloud)?;
    let rgb = rgb
        .map(|p| load_png(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let e = embed_object(&state, &cloud, rgb.as_ref(), depth_view)?;
    let mut out = json!({ "point": e.point, "depth": e.depth });
    if let Some(r) = e.rgb {
        out["rgb"] = json!(r);
    }
    println!("{out}");
    Ok(())
}

fn cmd_metrics(pred: &Path, gt: &Path) -> anyhow::Result<()> {
    let (p, q) = (read_cloud(pred)?, read_cloud(gt)?);
    let out = json!({
        "cd_l1": chamfer(&p, &q, ChamferVariant::L1)?,
        "cd_l2": chamfer(&p, &q, ChamferVariant::L2)?,
        "fscore_1pct": fscore(&p, &q, FSCORE_THRESHOLD)?,
    });
    println!("{out}");
    Ok(())
}

fn cmd_synth(n: usize, out: &Path, seed: u64) -> anyhow::Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    std::fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for t in synth_dataset(n, seed)? {
        let id = format!("obj_{:05}", t.object_id);
        let entry = ManifestEntry {
            cloud_path: format!("{id}.xyz").into(),
            rgb_path: Some(format!("{id}.png").into()),
            id,
        };
        save_xyz(&t.cloud, &out.join(&entry.cloud_path))?;
        save_png(&t.rgb, &out.join(entry.rgb_path.as_ref().unwrap()))?;
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    std::fs::write(out.join("manifest.jsonl"), manifest)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Render {
            cloud,
            poses,
            out,
            grid,
            size,
        } => cmd_render(&cloud, &poses, &out, grid, size.as_deref()),
        Command::Gradcheck { op, tol, h, seed } => cmd_gradcheck(op.as_deref(), tol, h, seed),
        Command::Pretrain {
            config,
            data,
            out,
            keep_checkpoints,
            resume,
        } => cmd_pretrain(config.as_deref(), &data, &out, keep_checkpoints, resume.as_deref()),
        Command::Embed {
            checkpoint,
            cloud,
            rgb,
            depth_view,
        } => cmd_embed(&checkpoint, &cloud, rgb.as_deref(), depth_view),
        Command::Metrics { pred, gt } => cmd_metrics(&pred, &gt),
        Command::Synth { n, out, seed } => cmd_synth(n, &out, seed),
    }
}

/// 1 for failed checks and non-finite losses, 2 for everything caused by
/// the invocation or its inputs.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<CheckFailed>() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 1,
        _ => 2,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DRPOINT_THREADS") {
        let n: usize = v.parse().context("DRPOINT_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("DRPOINT_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
