//! `gsfusion`: command-line front end for the mapping service.
//!
//! Every subcommand except `serve` is a client of the HTTP service. By
//! default an in-process server is spawned on an ephemeral port; pass
//! `--server URL` to talk to an already-running instance (paths given to
//! `eval`, `render`, `export-debug` and `synth` are resolved server-side).

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::{Args, Parser, Subcommand};

use gsfusion_api as api;
use gsfusion_client::Client;

#[derive(Parser)]
#[command(name = "gsfusion", version, about = "Online RGB-D mapping: TSDF fusion plus 3D Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ServerOpt {
    /// URL of a running service; omitted = spawn one in-process.
    #[arg(long, global = false)]
    server: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mapping service.
    Serve {
        /// Listen address.
        #[arg(long, default_value = "127.0.0.1:7734")]
        addr: String,
    },
    /// Map a posed RGB-D sequence and write the resulting maps and stats.
    Run {
        #[command(flatten)]
        server: ServerOpt,
        /// Sequence directory (intrinsics.txt, poses.txt, rgb/, depth/).
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for map.ply, map.tsdf, stats.jsonl, losses.csv.
        #[arg(long)]
        out: PathBuf,
        /// Voxel size in meters.
        #[arg(long)]
        voxel_size: Option<f64>,
        /// Quadtree contrast threshold.
        #[arg(long)]
        qtree_thresh: Option<f64>,
        /// New-Gaussian count promoting a frame to keyframe.
        #[arg(long)]
        kf_thresh: Option<usize>,
        /// Optimization iterations for keyframes.
        #[arg(long)]
        iters_kf: Option<usize>,
        /// Optimization iterations for non-keyframes.
        #[arg(long)]
        iters_nonkf: Option<usize>,
        /// Post-scan global optimization passes.
        #[arg(long)]
        global_iters: Option<usize>,
        /// Store every frame in the keyframe list.
        #[arg(long)]
        all_keyframes: bool,
        /// RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Config file (key = value lines); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Deterministic reduction mode.
        #[arg(long)]
        deterministic: bool,
    },
    /// Render a map at every pose of a sequence and report PSNR/SSIM.
    Eval {
        #[command(flatten)]
        server: ServerOpt,
        /// Gaussian map PLY.
        #[arg(long)]
        map: PathBuf,
        /// Sequence directory with ground-truth RGB.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for rendered PNGs and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a map at each pose of a pose file.
    Render {
        #[command(flatten)]
        server: ServerOpt,
        /// Gaussian map PLY.
        #[arg(long)]
        map: PathBuf,
        /// Pose file: one line of 16 row-major floats per frame.
        #[arg(long)]
        pose_file: PathBuf,
        /// Intrinsics file; defaults to intrinsics.txt beside the pose file.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Output directory for PNGs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a quadtree decomposition overlay for one frame.
    ExportDebug {
        #[command(flatten)]
        server: ServerOpt,
        /// Sequence directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Frame index.
        #[arg(long)]
        frame: usize,
        /// Quadtree contrast threshold.
        #[arg(long, default_value_t = 0.1)]
        qtree_thresh: f64,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic posed RGB-D sequence.
    Synth {
        #[command(flatten)]
        server: ServerOpt,
        /// Scene preset: checker-wall, cluttered-room, orbit-sphere, desk,
        /// oblique-revisit.
        #[arg(long, default_value = "cluttered-room")]
        scene: String,
        /// Number of frames.
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 320)]
        width: u32,
        #[arg(long, default_value_t = 240)]
        height: u32,
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(dispatch(cli))
}

async fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { addr } => {
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            println!("gsfusion service listening on http://{}", listener.local_addr()?);
            gsfusion_server::serve(listener).await?;
            Ok(())
        }
        Command::Run {
            server,
            dataset,
            out,
            voxel_size,
            qtree_thresh,
            kf_thresh,
            iters_kf,
            iters_nonkf,
            global_iters,
            all_keyframes,
            seed,
            config,
            deterministic,
        } => {
            let client = connect(&server).await?;
            let mut pipeline_config = api::PipelineConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {path:?}"))?;
                pipeline_config
                    .apply_config_text(&text)
                    .map_err(|e| anyhow::anyhow!("config {path:?}: {e}"))?;
            }
            if let Some(v) = voxel_size {
                pipeline_config.voxel_size = v;
            }
            if let Some(v) = qtree_thresh {
                pipeline_config.qtree_threshold = v;
            }
            if let Some(v) = kf_thresh {
                pipeline_config.kf_threshold = v;
            }
            if let Some(v) = iters_kf {
                pipeline_config.iters_keyframe = v;
            }
            if let Some(v) = iters_nonkf {
                pipeline_config.iters_non_keyframe = v;
            }
            if let Some(v) = global_iters {
                pipeline_config.global_iters = v;
            }
            if all_keyframes {
                pipeline_config.all_frames_keyframes = true;
            }
            if let Some(v) = seed {
                pipeline_config.seed = v;
            }
            if deterministic {
                pipeline_config.deterministic = true;
            }
            run_sequence(&client, &dataset, &out, pipeline_config).await
        }
        Command::Eval {
            server,
            map,
            dataset,
            out,
        } => {
            let client = connect(&server).await?;
            std::fs::create_dir_all(&out)?;
            let report = client
                .eval(&api::EvalRequest {
                    map_path: absolute(&map)?,
                    dataset_dir: absolute(&dataset)?,
                    out_dir: absolute(&out)?,
                })
                .await?;
            for frame in &report.per_frame {
                println!(
                    "frame {:>6}: psnr {:>7.3} dB  ssim {:.4}",
                    frame.frame_index, frame.psnr, frame.ssim
                );
            }
            println!(
                "mean over {} frames: psnr {:.3} dB  ssim {:.4}",
                report.per_frame.len(),
                report.mean_psnr,
                report.mean_ssim
            );
            Ok(())
        }
        Command::Render {
            server,
            map,
            pose_file,
            intrinsics,
            out,
        } => {
            let client = connect(&server).await?;
            std::fs::create_dir_all(&out)?;
            let response = client
                .render_file(&api::RenderFileRequest {
                    map_path: absolute(&map)?,
                    pose_file: absolute(&pose_file)?,
                    intrinsics_path: intrinsics.as_deref().map(absolute).transpose()?,
                    out_dir: absolute(&out)?,
                })
                .await?;
            println!("rendered {} frames into {}", response.frames, out.display());
            Ok(())
        }
        Command::ExportDebug {
            server,
            dataset,
            frame,
            qtree_thresh,
            out,
        } => {
            let client = connect(&server).await?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            let response = client
                .quadtree_overlay(&api::QuadtreeOverlayRequest {
                    dataset_dir: absolute(&dataset)?,
                    frame,
                    threshold: qtree_thresh,
                    min_cell: None,
                    out_path: absolute(&out)?,
                })
                .await?;
            println!(
                "frame {frame} decomposed into {} leaves at threshold {qtree_thresh}; overlay at {}",
                response.leaves,
                out.display()
            );
            Ok(())
        }
        Command::Synth {
            server,
            scene,
            frames,
            width,
            height,
            out,
        } => {
            let client = connect(&server).await?;
            std::fs::create_dir_all(&out)?;
            client
                .synth(&api::SynthRequest {
                    scene: scene.clone(),
                    frames,
                    width,
                    height,
                    out_dir: absolute(&out)?,
                })
                .await?;
            println!("wrote {frames} frames of {scene} to {}", out.display());
            Ok(())
        }
    }
}

/// Connect to `--server`, or spawn an in-process service on an ephemeral
/// port.
async fn connect(opt: &ServerOpt) -> Result<Client> {
    let client = match &opt.server {
        Some(url) => Client::new(url.clone()),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            tokio::spawn(async move {
                if let Err(err) = gsfusion_server::serve(listener).await {
                    eprintln!("in-process service stopped: {err}");
                }
            });
            Client::new(format!("http://{addr}"))
        }
    };
    client.health().await.context("service not reachable")?;
    Ok(client)
}

fn absolute(path: &Path) -> Result<String> {
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()?.join(path)
    };
    Ok(abs.display().to_string())
}

/// Stream a sequence through a fusion session and write the artifacts.
async fn run_sequence(
    client: &Client,
    dataset: &Path,
    out: &Path,
    config: api::PipelineConfig,
) -> Result<()> {
    // Validate the dataset layout client-side before streaming raw bytes.
    let intrinsics_text = std::fs::read_to_string(dataset.join("intrinsics.txt"))
        .with_context(|| format!("missing intrinsics file {:?}", dataset.join("intrinsics.txt")))?;
    let intrinsics = parse_intrinsics(&intrinsics_text)?;
    let poses = parse_poses(&std::fs::read_to_string(dataset.join("poses.txt"))?)?;
    let n_frames = poses.len();
    for i in 0..n_frames {
        for sub in ["rgb", "depth"] {
            let path = dataset.join(format!("{sub}/{i:06}.png"));
            if !path.exists() {
                bail!("poses.txt has {n_frames} lines but {path:?} is missing");
            }
        }
    }
    std::fs::create_dir_all(out)?;

    let session = client
        .create_session(&api::CreateSessionRequest { intrinsics, config })
        .await?
        .session_id;

    let started = std::time::Instant::now();
    for (i, pose) in poses.iter().enumerate() {
        let rgb_path = dataset.join(format!("rgb/{i:06}.png"));
        let depth_path = dataset.join(format!("depth/{i:06}.png"));
        let rgb = std::fs::read(&rgb_path)?;
        let depth = std::fs::read(&depth_path)?;
        let stats = client
            .push_frame(
                session,
                &api::PushFrameRequest {
                    index: i,
                    rgb_png_b64: BASE64.encode(rgb),
                    depth_png_b64: BASE64.encode(depth),
                    pose: *pose,
                    rgb_name: Some(rgb_path.display().to_string()),
                    depth_name: Some(depth_path.display().to_string()),
                },
            )
            .await?;
        println!(
            "frame {:>5}/{n_frames}: +{} gaussians ({} total, {} blocks){} loss {}",
            i + 1,
            stats.new_gaussians,
            stats.gaussian_count,
            stats.block_count,
            if stats.is_keyframe { " [keyframe]" } else { "" },
            stats
                .final_loss
                .map(|l| format!("{l:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    let online_wall = started.elapsed().as_secs_f64();

    let finalize = client.finalize(session).await?;
    if !finalize.pass_losses.is_empty() {
        println!(
            "global optimization: {} passes in {:.1}s, mean loss {:.4} -> {:.4}",
            finalize.pass_losses.len(),
            finalize.duration_s,
            finalize.pass_losses.first().unwrap(),
            finalize.pass_losses.last().unwrap()
        );
    }

    let stats = client.stats(session).await?;
    let losses = client.losses(session).await?;
    let ply = client
        .export_gaussians(session, &api::ExportGaussiansRequest { opacity_cull: 0.0 })
        .await?;
    let tsdf = client.export_tsdf(session).await?;

    write_bytes(&out.join("map.ply"), &BASE64.decode(&ply.data_b64)?)?;
    write_bytes(&out.join("map.tsdf"), &BASE64.decode(&tsdf.data_b64)?)?;
    write_stats_jsonl(&out.join("stats.jsonl"), &stats)?;
    write_losses_csv(&out.join("losses.csv"), &losses)?;

    client.delete_session(session).await?;

    println!(
        "done: {} gaussians ({} PLY records), {} tsdf blocks",
        stats.summary.gaussian_count, ply.records, tsdf.records
    );
    println!(
        "online phase: {:.2} fps compute, {:.2} fps end-to-end over {} frames",
        stats.summary.fps_excl_io,
        n_frames as f64 / online_wall,
        n_frames
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn parse_intrinsics(text: &str) -> Result<api::Intrinsics> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .context("parsing intrinsics.txt")?;
    if vals.len() != 7 {
        bail!("intrinsics.txt needs 7 values, found {}", vals.len());
    }
    api::Intrinsics::new(
        vals[0],
        vals[1],
        vals[2],
        vals[3],
        vals[4] as u32,
        vals[5] as u32,
        vals[6],
    )
    .map_err(|e| anyhow::anyhow!("intrinsics.txt: {e}"))
}

fn parse_poses(text: &str) -> Result<Vec<[f64; 16]>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("poses.txt line {}", lineno + 1))?;
        if vals.len() != 16 {
            bail!("poses.txt line {}: expected 16 values, got {}", lineno + 1, vals.len());
        }
        poses.push(vals.try_into().unwrap());
    }
    Ok(poses)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {path:?}"))
}

fn write_stats_jsonl(path: &Path, stats: &api::RunStats) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for frame in &stats.frames {
        writeln!(out, "{}", serde_json::to_string(frame)?)?;
    }
    writeln!(
        out,
        "{}",
        serde_json::to_string(&serde_json::json!({ "summary": stats.summary }))?
    )?;
    Ok(())
}

fn write_losses_csv(path: &Path, trace: &api::LossTrace) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_index,phase,iteration,loss")?;
    for s in &trace.samples {
        writeln!(out, "{},{},{},{:.9}", s.frame_index, s.phase, s.iteration, s.loss)?;
    }
    Ok(())
}
