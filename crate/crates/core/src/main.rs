//! Command-line entry points: training, reconstruction, rendering, meshing,
//! the analytic FLOPs table, and the ablation harnesses.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (including an aborted
//! training run), 2 on a usage problem (bad flags, malformed config,
//! missing inputs, wrong image count). Every command is deterministic
//! given its flags and seeds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqsplat::decoder::RotMode;
use seqsplat::geometry::{read_cameras, write_cameras};
use seqsplat::mesh::{extract_mesh, write_obj};
use seqsplat::model::{forward, load_checkpoint};
use seqsplat::rng::Stream;
use seqsplat::splat::{read_ply, render_tiled, write_ply, GaussianSet, WHITE};
use seqsplat::ssm::flops_table;
use seqsplat::tensor::Tensor;
use seqsplat::train::{
    generate_scene, parse_config, psnr, sample_scene_views, train, SceneSample,
};

const RENDER_TILE: usize = 16;

#[derive(Parser)]
#[command(name = "seqsplat", version, about = "Feed-forward multi-view reconstruction into Gaussian splats")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reconstructor from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.ckpt and metrics.csv.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from an earlier checkpoint with the same architecture.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct Gaussians from posed input images and write a PLY splat file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding exactly one PNG per input view (RGBA; alpha is
        /// composited over white on read), consumed in filename order.
        #[arg(long)]
        images: PathBuf,
        /// JSON camera file with one pose per input image.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view of a PLY splat file to a PNG.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Index into the camera file.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse rendered depth of a PLY splat file into an OBJ surface mesh.
    Mesh {
        #[arg(long)]
        ply: PathBuf,
        /// Signed-distance grid resolution per axis.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Depth-map side length for the fusion ring.
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic attention-vs-state-space FLOPs table.
    BenchFlops {
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Reconstruct with pixel noise on input view 0 and report novel-view
    /// PSNR against the clean baseline.
    AblateNoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the procedural evaluation scene.
        #[arg(long, default_value_t = 0)]
        scene: u64,
        #[arg(long, default_value_t = 64)]
        k_gaussians: usize,
        /// Held-out views to score.
        #[arg(long, default_value_t = 6)]
        novel: usize,
        /// Noise standard deviations to sweep, comma separated.
        #[arg(long = "sigma", value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
        sigmas: Vec<f64>,
        /// Also write the CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per patch size and report held-out PSNR per sequence length.
    AblateSeqlen {
        #[arg(long)]
        config: PathBuf,
        /// Patch sizes to sweep, comma separated; each must divide the image size.
        #[arg(long = "patch", value_delimiter = ',', default_value = "16,8,4")]
        patches: Vec<usize>,
        /// Directory for the per-patch training runs.
        #[arg(long, default_value = "runs/ablate-seqlen")]
        out: PathBuf,
        /// Also write the CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a procedural scene: posed view PNGs, cameras.json, and the
    /// ground-truth splats as scene.ply.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        k_gaussians: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<seqsplat::Error> for Failure {
    fn from(e: seqsplat::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: thread pool already configured: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads > 1 {
        eprintln!("warning: built without the parallel feature; running on one thread");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            out,
            resume,
            seed,
        } => cmd_train(&config, &out, resume.as_deref(), seed),
        Command::Reconstruct {
            checkpoint,
            images,
            cameras,
            out,
        } => cmd_reconstruct(&checkpoint, &images, &cameras, &out),
        Command::Render {
            ply,
            cameras,
            view,
            out,
        } => cmd_render(&ply, &cameras, view, &out),
        Command::Mesh {
            ply,
            resolution,
            image_size,
            out,
        } => cmd_mesh(&ply, resolution, image_size, &out),
        Command::BenchFlops { csv } => cmd_bench_flops(csv.as_deref()),
        Command::AblateNoise {
            checkpoint,
            scene,
            k_gaussians,
            novel,
            sigmas,
            out,
        } => cmd_ablate_noise(&checkpoint, scene, k_gaussians, novel, &sigmas, out.as_deref()),
        Command::AblateSeqlen {
            config,
            patches,
            out,
            csv,
            seed,
        } => cmd_ablate_seqlen(&config, &patches, &out, csv.as_deref(), seed),
        Command::GenData {
            seed,
            k_gaussians,
            image_size,
            views,
            out,
        } => cmd_gen_data(seed, k_gaussians, image_size, views, &out),
    }
}

fn cmd_train(
    config: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    require_file(config, "config file")?;
    let text = std::fs::read_to_string(config)?;
    let mut cfg = parse_config(&text).map_err(|e| usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = resume {
        require_file(r, "resume checkpoint")?;
    }
    let outcome = train(&cfg, out, resume, None)?;
    eprintln!(
        "finished {} steps: loss {:.5}, held-out psnr {:.2}",
        outcome.steps_run, outcome.final_loss, outcome.eval_psnr
    );
    eprintln!("checkpoint {}", outcome.checkpoint.display());
    eprintln!("metrics    {}", outcome.metrics.display());
    Ok(())
}

/// Reads an RGBA PNG and composites it over a white background into an
/// [H, W, 3] tensor in [0, 1].
fn read_image_over_white(path: &Path) -> Result<Tensor<f32>, Failure> {
    let img = image::open(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?
        .to_rgba8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.as_raw().chunks_exact(4) {
        let a = px[3] as f32 / 255.0;
        for c in 0..3 {
            let v = px[c] as f32 / 255.0;
            data.push((a * v + (1.0 - a)).clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::from_vec(vec![h as usize, w as usize, 3], data))
}

/// Writes a white-composited render as a straight-alpha RGBA PNG, so that
/// compositing the file back over white recovers the render exactly (up to
/// 8-bit quantization).
fn write_view_png(
    path: &Path,
    rgb: &Tensor<f64>,
    alpha: &Tensor<f64>,
    height: usize,
    width: usize,
) -> Result<(), Failure> {
    let n = height * width;
    if rgb.shape() != [n, 3] || alpha.shape() != [n, 1] {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "render buffers do not match a {width} x {height} image"
        )));
    }
    let (c, a) = (rgb.data(), alpha.data());
    let mut buf = Vec::with_capacity(n * 4);
    for i in 0..n {
        let av = a[i].clamp(0.0, 1.0);
        for k in 0..3 {
            let over_white = c[i * 3 + k].clamp(0.0, 1.0);
            let straight = if av > 1e-6 {
                ((over_white - 1.0 + av) / av).clamp(0.0, 1.0)
            } else {
                1.0
            };
            buf.push((straight * 255.0).round() as u8);
        }
        buf.push((av * 255.0).round() as u8);
    }
    let img = image::RgbaImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized to the image");
    img.save(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(usage(format!("image directory not found: {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn cmd_reconstruct(
    checkpoint: &Path,
    images: &Path,
    cameras: &Path,
    out: &Path,
) -> Result<(), Failure> {
    require_file(checkpoint, "checkpoint")?;
    require_file(cameras, "camera file")?;
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let cfg = ck.params.config;

    let paths = sorted_pngs(images)?;
    if paths.len() != cfg.n_views {
        return Err(usage(format!(
            "expected exactly {} input images, found {} in {}",
            cfg.n_views,
            paths.len(),
            images.display()
        )));
    }
    let cams = read_cameras(cameras)?;
    if cams.len() != cfg.n_views {
        return Err(usage(format!(
            "camera file holds {} views, need {}",
            cams.len(),
            cfg.n_views
        )));
    }
    let mut inputs = Vec::with_capacity(paths.len());
    for p in &paths {
        let t = read_image_over_white(p)?;
        if t.shape() != [cfg.image_size, cfg.image_size, 3] {
            return Err(usage(format!(
                "{} is {} x {}, checkpoint expects {} x {}",
                p.display(),
                t.shape()[1],
                t.shape()[0],
                cfg.image_size,
                cfg.image_size
            )));
        }
        inputs.push(t);
    }
    for (i, c) in cams.iter().enumerate() {
        if c.width != cfg.image_size || c.height != cfg.image_size {
            return Err(usage(format!(
                "camera {i} raster is {} x {}, checkpoint expects {} x {}",
                c.width, c.height, cfg.image_size, cfg.image_size
            )));
        }
    }

    let model = ck.params.bind_constant();
    let g = forward(&model, &cfg, &inputs, &cams, RotMode::Infer)?;
    let set = g.snapshot();
    write_ply(&set, out)?;
    eprintln!("wrote {} gaussians to {}", set.count(), out.display());
    Ok(())
}

fn cmd_render(ply: &Path, cameras: &Path, view: usize, out: &Path) -> Result<(), Failure> {
    require_file(ply, "splat file")?;
    require_file(cameras, "camera file")?;
    let gs: GaussianSet<f64> = read_ply(ply)?;
    let cams = read_cameras(cameras)?;
    if view >= cams.len() {
        return Err(usage(format!(
            "view {view} out of range; camera file holds {}",
            cams.len()
        )));
    }
    let o = render_tiled(&gs, &cams[view], WHITE, RENDER_TILE)?;
    write_view_png(out, &o.rgb, &o.alpha, o.height, o.width)?;
    eprintln!("rendered view {view} to {}", out.display());
    Ok(())
}

fn cmd_mesh(ply: &Path, resolution: usize, image_size: usize, out: &Path) -> Result<(), Failure> {
    require_file(ply, "splat file")?;
    let gs: GaussianSet<f64> = read_ply(ply)?;
    let mesh = extract_mesh(&gs, resolution, image_size)?;
    write_obj(out, &mesh)?;
    eprintln!(
        "mesh: {} vertices, {} triangles -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

fn cmd_bench_flops(csv: Option<&Path>) -> Result<(), Failure> {
    let rows = flops_table();
    println!("{:>8}  {:>12}  {:>8}", "length", "attention", "ssm");
    for (l, a, s) in &rows {
        println!("{l:>8}  {a:>12.2}  {s:>8.2}");
    }
    if let Some(path) = csv {
        let mut text = String::from("length,attention_gflops,ssm_gflops\n");
        for (l, a, s) in &rows {
            text += &format!("{l},{a:.2},{s:.2}\n");
        }
        std::fs::write(path, text)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate_noise(
    checkpoint: &Path,
    scene: u64,
    k_gaussians: usize,
    novel: usize,
    sigmas: &[f64],
    out: Option<&Path>,
) -> Result<(), Failure> {
    require_file(checkpoint, "checkpoint")?;
    if sigmas.is_empty() {
        return Err(usage("at least one sigma is required"));
    }
    for &s in sigmas {
        if !(s >= 0.0) {
            return Err(usage(format!("sigma {s} must be nonnegative")));
        }
    }
    if novel == 0 {
        return Err(usage("at least one novel view is needed for scoring"));
    }
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let cfg = ck.params.config;
    let gt: GaussianSet<f32> = generate_scene(scene, k_gaussians)?;
    let sample: SceneSample<f32> = sample_scene_views(
        &gt,
        Stream::new(scene, "ablate-views").u64_at(0),
        cfg.image_size,
        cfg.n_views,
        novel,
    )?;
    let model = ck.params.bind_constant();
    let score = |inputs: &[Tensor<f32>]| -> Result<f64, Failure> {
        let g = forward(&model, &cfg, inputs, &sample.input_cameras, RotMode::Infer)?;
        let set = g.snapshot();
        let mut acc = 0.0;
        let mut count = 0usize;
        for (cam, target) in sample.cameras.iter().zip(&sample.targets).skip(cfg.n_views) {
            let o = render_tiled(&set, cam, WHITE, RENDER_TILE)?;
            acc += psnr(&o.rgb, &target.rgb)?;
            count += 1;
        }
        Ok(acc / count as f64)
    };

    let baseline = score(&sample.input_images)?;
    eprintln!("clean novel-view psnr {baseline:.4}");
    let noise = Stream::new(scene, "ablate-noise");
    let mut csv = String::from("sigma,psnr,drop_pct\n");
    for (i, &sigma) in sigmas.iter().enumerate() {
        let st = noise.substream(i as u64);
        let mut inputs = sample.input_images.clone();
        let perturbed: Vec<f32> = inputs[0]
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| (v + (sigma * st.normal_at(j as u64)) as f32).clamp(0.0, 1.0))
            .collect();
        inputs[0] = Tensor::from_vec(inputs[0].shape().to_vec(), perturbed);
        let p = score(&inputs)?;
        let drop = if baseline > 0.0 {
            (baseline - p) / baseline * 100.0
        } else {
            0.0
        };
        csv += &format!("{sigma},{p:.4},{drop:.2}\n");
    }
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate_seqlen(
    config: &Path,
    patches: &[usize],
    out: &Path,
    csv_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    require_file(config, "config file")?;
    if patches.is_empty() {
        return Err(usage("at least one patch size is required"));
    }
    let text = std::fs::read_to_string(config)?;
    let base = parse_config(&text).map_err(|e| usage(e.to_string()))?;
    for &p in patches {
        if p == 0 || base.model.image_size % p != 0 {
            return Err(usage(format!(
                "patch {p} does not divide the image size {}",
                base.model.image_size
            )));
        }
    }
    let mut csv = String::from("patch,seq_len,psnr\n");
    for &p in patches {
        let mut cfg = base.clone();
        cfg.model.patch = p;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let seq = cfg.model.seq_len();
        eprintln!("training patch {p} (sequence length {seq})");
        let outcome = train(&cfg, &out.join(format!("patch{p}")), None, None)?;
        csv += &format!("{p},{seq},{:.4}\n", outcome.eval_psnr);
    }
    print!("{csv}");
    if let Some(path) = csv_path {
        std::fs::write(path, &csv)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen_data(
    seed: u64,
    k_gaussians: usize,
    image_size: usize,
    views: usize,
    out: &Path,
) -> Result<(), Failure> {
    if views == 0 {
        return Err(usage("at least one view is required"));
    }
    std::fs::create_dir_all(out)?;
    let gt: GaussianSet<f64> = generate_scene(seed, k_gaussians)?;
    let sample = sample_scene_views(
        &gt,
        Stream::new(seed, "gen-views").u64_at(0),
        image_size,
        views,
        0,
    )?;
    for (i, t) in sample.targets.iter().enumerate() {
        write_view_png(
            &out.join(format!("view_{i}.png")),
            &t.rgb,
            &t.alpha,
            t.height,
            t.width,
        )?;
    }
    write_cameras(&out.join("cameras.json"), &sample.input_cameras)?;
    write_ply(&gt, &out.join("scene.ply"))?;
    eprintln!(
        "wrote {views} posed views, cameras.json, scene.ply to {}",
        out.display()
    );
    Ok(())
}
