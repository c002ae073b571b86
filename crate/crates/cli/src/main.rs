use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scenestage::codec::mask_to_png;
use scenestage::denoiser::{Capabilities, EpsModel};
use scenestage::eval::{
    report_table, run_benchmark, sample_layout, BenchmarkConfig, BenchmarkRig, Catalogs, Detector, MockDetector, Scorer,
};
use scenestage::render::{render_cartesian, render_depth, render_masks};
use scenestage::scene::{Camera, SceneLayout};
use scenestage::translation::Segmenter;
use scenestage::ToyDenoiser;
use scenestage_service::clients::{
    BackendDescriptor, BackendKind, HttpBackend, HttpDetector, HttpScorer, HttpSegmenter, DEFAULT_TIMEOUT,
};
use scenestage_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "scenestage", version, about = "Stage-by-stage scene image generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Render conditioning maps for a scene file.
    Render(RenderArgs),
    /// Layout sampling and the benchmark.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Toy denoiser weights.
    #[command(subcommand)]
    Weights(WeightsCmd),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// JSON service config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "SCENESTAGE_TOKEN")]
    token: Option<String>,
    /// Base URL of an external denoiser speaking the predict protocol.
    #[arg(long)]
    backend: Option<String>,
    /// The external backend cannot take K/V injection.
    #[arg(long)]
    no_kv: bool,
    #[arg(long)]
    segmenter: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderKind {
    Depth,
    MaskFg,
    Cartesian,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene layout JSON.
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "depth")]
    kind: RenderKind,
    /// Box id, for mask_fg and cartesian.
    #[arg(long = "box")]
    box_id: Option<String>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Print one sampled layout as JSON.
    Sample {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        resolution: u32,
    },
    /// Run the benchmark and write a report.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON benchmark config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layouts: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    layout_seed: Option<u64>,
    #[arg(long)]
    resolution: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    /// `toy` or the base URL of an external denoiser.
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long)]
    no_kv: bool,
    /// `mock` or the base URL of a detector.
    #[arg(long, default_value = "mock")]
    detector: String,
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    segmenter: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout_secs: u64,
    #[arg(long, short, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum WeightsCmd {
    /// Write manifest.json and weights.bin for a seed.
    Export {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn external(url: &str, no_kv: bool) -> BackendDescriptor {
    BackendDescriptor {
        kind: BackendKind::External,
        endpoint: Some(url.to_string()),
        capabilities: Capabilities {
            max_resolution: 1024,
            supports_kv_injection: !no_kv,
        },
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg: ServiceConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => ServiceConfig::default(),
    };
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    if a.token.is_some() {
        cfg.token = a.token;
    }
    if let Some(url) = &a.backend {
        cfg.external = Some(external(url, a.no_kv));
    }
    if a.segmenter.is_some() {
        cfg.segmenter = a.segmenter;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(scenestage_service::serve(cfg, a.addr))?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let scene = SceneLayout::from_json(&read(&a.scene)?)?;
    let need_box = || a.box_id.as_deref().context("--box is required for this kind");
    let bytes = match a.kind {
        RenderKind::Depth => render_depth(&scene).to_blob().encode(),
        RenderKind::MaskFg => mask_to_png(&render_masks(&scene, need_box()?)?.fg),
        RenderKind::Cartesian => {
            let b = scene.find_box(need_box()?)?;
            render_cartesian(b, &scene.camera).to_blob().encode()
        }
    };
    std::fs::write(&a.out, bytes)?;
    Ok(())
}

fn eval_run(a: RunArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(v) = a.layouts {
        cfg.layouts = v;
    }
    if let Some(v) = a.seeds {
        cfg.seeds_per_layout = v;
    }
    if let Some(v) = a.layout_seed {
        cfg.layout_seed = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.steps {
        cfg.session.steps = v;
    }
    let timeout = Duration::from_secs(a.timeout_secs);

    let toy;
    let http;
    let backend: &dyn EpsModel = if a.backend == "toy" {
        toy = ToyDenoiser::new(cfg.session.denoiser_seed);
        &toy
    } else {
        http = HttpBackend::new(external(&a.backend, a.no_kv), timeout)?;
        &http
    };
    let mock = MockDetector;
    let remote_det;
    let detector: &dyn Detector = if a.detector == "mock" {
        &mock
    } else {
        remote_det = HttpDetector::new(&a.detector, timeout);
        &remote_det
    };
    let scorer = a.scorer.as_deref().map(|u| HttpScorer::new(u, timeout));
    let segmenter = a.segmenter.as_deref().map(|u| HttpSegmenter::new(u, timeout));
    let rig = BenchmarkRig {
        backend,
        backend_name: a.backend.clone(),
        detector,
        detector_name: a.detector.clone(),
        scorer: scorer.as_ref().map(|s| s as &dyn Scorer),
        segmenter: segmenter.as_ref().map(|s| s as &dyn Segmenter),
    };
    let report = run_benchmark(&cfg, &rig)?;
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report)?)?;
    println!("{}", report_table(&report));
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Render(a) => render(a),
        Cmd::Eval(EvalCmd::Sample { seed, resolution }) => {
            if resolution == 0 || resolution % 128 != 0 {
                bail!("resolution must be a positive multiple of 128");
            }
            let cam = Camera::looking_forward(resolution, resolution);
            let s = sample_layout(seed, &Catalogs::builtin(), BenchmarkConfig::default().room_extents, &cam)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Cmd::Eval(EvalCmd::Run(a)) => eval_run(a),
        Cmd::Weights(WeightsCmd::Export { seed, out }) => {
            ToyDenoiser::new(seed).save_snapshot(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}
