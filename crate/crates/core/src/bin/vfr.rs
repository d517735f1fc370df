use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vfr::bench::{bench, markdown, MlpSize, BENCH_CSV_HEADER};
use vfr::checkpoint::Checkpoint;
use vfr::config::RunConfig;
use vfr::metrics::image_psnr;
use vfr::render::{render_image, RenderMode, RenderOptions, SamplerSettings};
use vfr::scene::{
    generate_toy_dataset, load_nerf_synthetic, png_write, save_dataset, AnalyticScene, SceneDataset, Split, ToySpec,
};
use vfr::train::{evaluate, Trainer};
use vfr::Error;

/// Volume feature rendering: train, render, evaluate and benchmark.
#[derive(Parser, Debug)]
#[command(name = "vfr", version)]
struct Cli {
    /// Worker threads; 1 forces a single-threaded run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split (PSNR, SSIM).
    Eval(EvalArgs),
    /// Time training steps per mode and network size.
    Bench(BenchArgs),
    /// Write an analytic toy dataset and a matching config.
    GenToy(GenToyArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for model.vfr and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, alias = "pilot_steps")]
    pilot_steps: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset index, or a JSON file holding a `transform_matrix`.
    #[arg(long)]
    pose: String,
    #[arg(long)]
    out: PathBuf,
    /// Dataset for intrinsics and ground truth; defaults to the training scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    mode: Option<String>,
    /// Also write per-view metrics here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "standard,vfr")]
    modes: String,
    #[arg(long, default_value = "4x64,6x256")]
    mlp_sizes: String,
    /// Timed steps per row.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// `sphere` or `blob`.
    #[arg(long, default_value = "sphere")]
    scene: String,
    #[arg(long, default_value_t = 0.2)]
    specular: f64,
    #[arg(long, default_value_t = 32)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    val_views: usize,
    #[arg(long, default_value_t = 8)]
    test_views: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 4096)]
    quadrature: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config { .. } | Error::Shape(_) | Error::Unsupported(_) => 1,
        Error::Io { .. } | Error::Format { .. } | Error::Domain(_) => 2,
        Error::Divergence(_) | Error::Numeric(_) => 3,
    }
}

fn load_config(path: Option<&Path>) -> vfr::Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
        c.apply(&text)?;
    }
    Ok(c)
}

fn parse_mode(s: &str) -> vfr::Result<RenderMode> {
    RenderMode::parse(s)
}

fn cmd_train(a: TrainArgs) -> vfr::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.train.mode = parse_mode(m)?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.pilot_steps {
        cfg.train.pilot_steps = p;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
        if a.pilot_steps.is_none() && cfg.train.pilot_steps >= s {
            let p = s - 1.min(s);
            eprintln!("note: --steps {s} shortens the pilot phase to {p} steps");
            cfg.train.pilot_steps = p;
        }
    }
    cfg.validate()?;
    if a.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let scene = a.scene.ok_or_else(|| Error::Usage("train needs --scene".into()))?;
    let out = a.out.ok_or_else(|| Error::Usage("train needs --out".into()))?;
    let ds = load_nerf_synthetic(&scene, cfg.background)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let mut trainer = Trainer::new(&ds, cfg.grid.clone(), cfg.bundle.clone(), cfg.train.clone())?;
    let metrics_path = out.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let mut metrics = BufWriter::new(file);
    let log_every = cfg.train.log_every;
    let result = trainer.run(Some(&mut metrics), |r| {
        if (r.step + 1) % log_every == 0 {
            eprintln!(
                "step {:>6} [{}] loss {:.6} lr {:.2e} nn/ray {:.2}",
                r.step + 1,
                r.phase.name(),
                r.loss,
                r.lr,
                r.nn_evals_per_ray
            );
        }
    });
    // A checkpoint is written even after divergence, for inspection.
    let ckpt = Checkpoint::capture(
        &cfg,
        &trainer.model,
        &trainer.state.occupancy,
        trainer.state.step,
        &scene.to_string_lossy(),
        trainer.current_mode(),
    );
    let ckpt_path = out.join("model.vfr");
    ckpt.save(&ckpt_path)?;
    result?;
    if let Some(last) = trainer.state.log.last() {
        println!(
            "trained {} steps: loss {:.6}, held-out PSNR {:.2} dB -> {}",
            trainer.state.step,
            last.loss,
            last.psnr_eval,
            ckpt_path.display()
        );
    }
    Ok(())
}

struct Loaded {
    config: RunConfig,
    model: vfr::model::Model<f32>,
    occupancy: vfr::sampling::OccupancyGrid,
    ckpt: Checkpoint,
}

fn load_checkpoint(path: &Path) -> vfr::Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let (config, model, occupancy) = ckpt.restore(path)?;
    Ok(Loaded {
        config,
        model,
        occupancy,
        ckpt,
    })
}

fn load_scene(l: &Loaded, scene: Option<&Path>) -> vfr::Result<SceneDataset> {
    let path = scene
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&l.ckpt.scene));
    load_nerf_synthetic(&path, l.config.background)
}

fn render_mode(l: &Loaded, over: Option<&str>) -> vfr::Result<RenderMode> {
    over.map(parse_mode).unwrap_or(Ok(l.ckpt.mode))
}

fn cmd_render(a: RenderArgs) -> vfr::Result<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let mode = render_mode(&l, a.mode.as_deref())?;
    let ds = load_scene(&l, a.scene.as_deref())?;
    let split = Split::parse(&a.split)?;
    let (camera, truth) = match a.pose.parse::<usize>() {
        Ok(i) => {
            let frames = ds.split(split);
            let f = frames.get(i).ok_or_else(|| {
                Error::Usage(format!(
                    "pose index {i} out of range: the {} split has {} views",
                    split.name(),
                    frames.len()
                ))
            })?;
            (ds.camera(f), Some(&f.image))
        }
        Err(_) => {
            let path = PathBuf::from(&a.pose);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            #[derive(serde::Deserialize)]
            struct PoseFile {
                transform_matrix: [[f64; 4]; 4],
            }
            let pose: PoseFile = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("expected {{\"transform_matrix\": [[...]]}}: {e}"),
            })?;
            (
                vfr::sampling::Camera::from_fov_x(pose.transform_matrix, ds.width, ds.height, ds.camera_angle_x),
                None,
            )
        }
    };
    let sampler = SamplerSettings {
        aabb: l.occupancy.aabb,
        samples_per_ray: l.config.train.samples_per_ray,
        occupancy: Some(&l.occupancy),
    };
    let opts = RenderOptions::new(l.occupancy.aabb, l.config.background);
    let img = render_image(&l.model, &camera, mode, &sampler, &opts)?;
    png_write(&a.out, img.width, img.height, &img.rgb)?;
    match truth {
        Some(t) => println!(
            "wrote {} ({} mode, {:.2} NN forwards/pixel); PSNR {:.2} dB",
            a.out.display(),
            mode.name(),
            img.mean_evals(),
            image_psnr(&img.rgb, t)?
        ),
        None => println!("wrote {} ({} mode)", a.out.display(), mode.name()),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> vfr::Result<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let mode = render_mode(&l, a.mode.as_deref())?;
    let ds = load_scene(&l, a.scene.as_deref())?;
    let split = Split::parse(&a.split)?;
    if ds.split(split).is_empty() {
        return Err(Error::Usage(format!("the {} split has no views", split.name())));
    }
    let sampler = SamplerSettings {
        aabb: l.occupancy.aabb,
        samples_per_ray: l.config.train.samples_per_ray,
        occupancy: Some(&l.occupancy),
    };
    let rows = evaluate(&l.model, &ds, split, mode, &sampler)?;
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let mut csv = String::from("view,psnr,ssim,nn_evals_per_pixel\n");
    println!("| view | PSNR (dB) | SSIM | NN forwards / pixel |\n|---|---|---|---|");
    for r in &rows {
        println!("| {} | {:.3} | {:.4} | {:.2} |", r.index, r.psnr, r.ssim, r.mean_evals);
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.4}\n",
            r.index, r.psnr, r.ssim, r.mean_evals
        ));
    }
    println!("| mean | {mean_psnr:.3} | {mean_ssim:.4} | |");
    csv.push_str(&format!("mean,{mean_psnr:.6},{mean_ssim:.6},\n"));
    if let Some(p) = a.csv {
        std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> vfr::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = load_nerf_synthetic(&a.scene, cfg.background)?;
    let modes = a
        .modes
        .split(',')
        .map(|m| parse_mode(m.trim()))
        .collect::<vfr::Result<Vec<_>>>()?;
    let sizes = a
        .mlp_sizes
        .split(',')
        .map(|s| MlpSize::parse(s.trim()))
        .collect::<vfr::Result<Vec<_>>>()?;
    let rows = bench(&ds, &cfg, &modes, &sizes, a.steps)?;
    print!("{}", markdown(&rows));
    for size in &sizes {
        let time = |m: RenderMode| {
            rows.iter()
                .find(|r| r.mode == m && r.mlp == *size)
                .map(|r| r.step_seconds)
        };
        if let (Some(s), Some(v)) = (time(RenderMode::Standard), time(RenderMode::Vfr)) {
            println!("{}: step-time ratio vfr/standard = {:.3}", size.label(), v / s);
        }
    }
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    if let Some(p) = a.csv {
        std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(())
}

fn cmd_gen_toy(a: GenToyArgs) -> vfr::Result<()> {
    let scene = match a.scene.as_str() {
        "sphere" => AnalyticScene::toy_sphere(a.specular),
        "blob" => AnalyticScene::blob(),
        other => {
            return Err(Error::Usage(format!(
                "unknown toy scene {other:?} (expected sphere or blob)"
            )))
        }
    };
    let spec = ToySpec {
        views: a.views,
        val_views: a.val_views,
        test_views: a.test_views,
        resolution: a.resolution,
        quadrature: a.quadrature,
        seed: a.seed,
        ..ToySpec::default()
    };
    let ds = generate_toy_dataset(&scene, &spec)?;
    save_dataset(&ds, &a.out)?;
    let conf = a.out.join("toy.conf");
    let text = format!(
        "# desk-scale settings for the analytic toy scenes\n{}",
        RunConfig::toy().dump()
    );
    std::fs::write(&conf, text).map_err(|e| Error::Io { path: conf, source: e })?;
    println!(
        "wrote {} train / {} val / {} test views to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenToy(a) => cmd_gen_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
