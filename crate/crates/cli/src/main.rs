use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use fieldiff::conditioning::{embed_view, load_external_embeddings, Condition, ConditionEmbedding};
use fieldiff::config::{DataKind, RunConfig};
use fieldiff::container::Container;
use fieldiff::costmodel::{sweep, sweep_csv, write_bar_chart, SweepRanges};
use fieldiff::datasets::{ingest_manifest, write_manifest};
use fieldiff::evalsuite::evaluate_reconstruction;
use fieldiff::field::{FieldSample, View};
use fieldiff::imageio::{read_image, write_image};
use fieldiff::pipeline::{generate_toy, Model};
use fieldiff::scorenet::ScoreNetConfig;
use fieldiff::{Error, Result, Scalar};

#[derive(Parser)]
#[command(
    name = "fieldiff",
    version,
    about = "View-wise diffusion over coordinate-signal fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network and write checkpoints plus a loss curve.
    Train(TrainArgs),
    /// Generate views from a checkpoint.
    Sample(SampleArgs),
    /// Print analytic MACs and memory for network shapes.
    Cost(CostArgs),
    /// Write a procedural toy dataset with its manifest.
    Datagen(DatagenArgs),
    /// Reconstruction MSE/PSNR of a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest of training fields; toy data from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Single worker thread for byte-reproducible output.
    #[arg(long)]
    strict_deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("condition").required(true).args(["caption", "cond_view", "cond_file"])))]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    caption: Option<String>,
    /// Image whose statistics condition the sample.
    #[arg(long)]
    cond_view: Option<PathBuf>,
    /// Precomputed embedding container.
    #[arg(long)]
    cond_file: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ppm")]
    format: ImageFormat,
    #[arg(long)]
    strict_deterministic: bool,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, value_delimiter = ',', default_value = "28")]
    depth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1152")]
    width: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    heads: Vec<usize>,
    /// Tokens per view.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    tokens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    views: Vec<usize>,
    /// Attention restricted to each view instead of all tokens.
    #[arg(long)]
    view_local: bool,
    /// Include text-token conditioning.
    #[arg(long)]
    text: bool,
    #[arg(long, default_value_t = 16)]
    token_dim: usize,
    #[arg(long, default_value_t = 40)]
    coord_dim: usize,
    #[arg(long, default_value_t = 4)]
    bytes_per_scalar: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// PPM bar chart of MACs per row.
    #[arg(long)]
    chart: Option<PathBuf>,
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, value_parser = ["video", "views", "image"])]
    kind: String,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sizes and view counts; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ppm")]
    format: ImageFormat,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest of held-out fields; fresh toy fields when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "mse,psnr")]
    metrics: Vec<String>,
    /// Diffusion step; half the schedule by default.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Toy fields generated when no manifest is given.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn load_fields(manifest: &Path, metric_dim: Option<usize>) -> Result<Vec<FieldSample>> {
    let ds = ingest_manifest(manifest, metric_dim)?;
    for s in &ds.skipped {
        eprintln!("warning: {}:{}: skipped ({})", manifest.display(), s.line, s.reason);
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no usable fields",
            manifest.display()
        )));
    }
    ds.load_all()
}

fn precision(text: &str) -> Result<String> {
    Ok(RunConfig::parse(text)?.model.precision)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let fields = match &a.data {
        Some(m) => load_fields(m, None)?,
        None => generate_toy(&cfg.data)?,
    };
    let resume = a.resume.as_deref().map(Container::load).transpose()?;
    match cfg.model.precision.as_str() {
        "f64" => train_as::<f64>(a, cfg, &fields, resume.as_ref()),
        _ => train_as::<f32>(a, cfg, &fields, resume.as_ref()),
    }
}

fn train_as<T: Scalar>(
    a: &TrainArgs,
    cfg: RunConfig,
    fields: &[FieldSample],
    resume: Option<&Container>,
) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let views = fields.iter().map(|f| f.views.len()).max().unwrap_or(1);
    let spec = fieldiff::field::FieldSpec {
        num_views: views,
        ..first.spec
    };
    let mut model = Model::<T>::new(cfg, spec)?;
    if a.strict_deterministic {
        model.workers = 1;
    }
    let (opt, logs) = model.train(fields, Some(&a.out), resume)?;
    if let Some(last) = logs.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    println!(
        "trained to step {}; checkpoint {}",
        opt.step_count(),
        a.out.join(fieldiff::training::LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let ck = Container::load(&a.ckpt)?;
    match precision(&ck.config)?.as_str() {
        "f64" => sample_as::<f64>(a, &ck),
        _ => sample_as::<f32>(a, &ck),
    }
}

fn sample_as<T: Scalar>(a: &SampleArgs, ck: &Container) -> Result<()> {
    let mut model = Model::<T>::from_checkpoint(ck)?;
    if a.strict_deterministic {
        model.workers = 1;
    }
    let cfg = model.config.clone();
    let (source, emb): (String, ConditionEmbedding<T>) = if let Some(c) = &a.caption {
        (format!("caption: {c}"), model.embed_caption(c)?)
    } else if let Some(p) = &a.cond_view {
        let pixels = read_image(p)?;
        let coord = vec![0.0; model.spec.view_coord_dim()];
        let view = View::new(coord, pixels)?;
        let e = embed_view(&view, cfg.model.cond_dim, cfg.codec.patch, cfg.condition.seed)?;
        (format!("cond-view: {}", p.display()), e)
    } else if let Some(p) = &a.cond_file {
        let e = load_external_embeddings(p, None)?;
        if e.dim() != cfg.model.cond_dim {
            return Err(Error::InvalidArgument(format!(
                "{}: embedding width {} but the model expects {}",
                p.display(),
                e.dim(),
                cfg.model.cond_dim
            )));
        }
        (format!("cond-file: {}", p.display()), e)
    } else {
        return Err(Error::InvalidArgument("no condition source given".into()));
    };
    let views = a.views.unwrap_or(model.spec.num_views);
    let steps = a.steps.unwrap_or(cfg.sample.steps);
    let mut opts = cfg.guidance(model.codec.token_dim(), model.spec.signal_dim)?;
    if let Some(g) = a.guidance {
        opts.scale = g;
    }
    let coords = model.default_view_coords(views);
    let out = model.sample(&[Condition::Embedding(&emb)], &coords, &opts, steps, &[a.seed])?;
    create_dir(&a.out)?;
    for (i, v) in out[0].iter().enumerate() {
        write_image(&a.out.join(format!("view_{i:03}.{}", a.format.ext())), &v.pixels)?;
    }
    let mut meta = String::new();
    let _ = writeln!(meta, "seed = {}", a.seed);
    let _ = writeln!(meta, "guidance = {}", opts.scale);
    let _ = writeln!(meta, "steps = {steps}");
    let _ = writeln!(meta, "views = {views}");
    let _ = writeln!(meta, "condition = {source}");
    write_text(&a.out.join("metadata.txt"), &meta)?;
    println!("wrote {views} views to {}", a.out.display());
    Ok(())
}

fn cost(a: &CostArgs) -> Result<()> {
    let base = ScoreNetConfig::paper(a.token_dim, a.coord_dim);
    let ranges = SweepRanges {
        depth: a.depth.clone(),
        width: a.width.clone(),
        heads: a.heads.clone(),
        tokens: a.tokens.clone(),
        n_views: a.views.clone(),
        view_local: vec![a.view_local],
        text: vec![a.text],
    };
    let rows = sweep(&base, &ranges, a.bytes_per_scalar)?;
    if let Some(p) = &a.csv {
        write_text(p, &sweep_csv(&rows))?;
    }
    if let Some(p) = &a.chart {
        write_bar_chart(p, &rows)?;
    }
    for r in &rows {
        let b = r.report.breakdown;
        println!(
            "depth {} width {} heads {} Z {} views {} view_local {} text {}",
            r.depth, r.width, r.heads, r.query.tokens_per_view, r.query.n_views, r.query.view_local, r.query.text
        );
        println!("  MACs       {} ({:.2}G)", r.report.macs, r.report.macs as f64 / 1e9);
        println!("  core MACs  {} ({:.2}G)", b.core(), b.core() as f64 / 1e9);
        println!(
            "  qkv {} attention {} projection {} mlp {} conditioning {} embedding {}",
            b.qkv, b.attention, b.projection, b.mlp, b.conditioning, b.embedding
        );
        println!(
            "  params {}  activation bytes {}  attention-score bytes {}",
            r.memory.parameters,
            r.memory.activation_bytes(),
            r.memory.attention_bytes()
        );
    }
    Ok(())
}

fn datagen(a: &DatagenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.data.kind = DataKind::parse(&a.kind)?;
    cfg.data.count = a.count;
    cfg.data.seed = a.seed;
    let fields = generate_toy(&cfg.data)?;
    if fields.is_empty() {
        return Err(Error::InvalidArgument("--count must be positive".into()));
    }
    let manifest = write_manifest(&a.out, &fields, a.format.ext())?;
    println!("wrote {} fields; manifest {}", fields.len(), manifest.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    for m in &a.metrics {
        if !matches!(m.as_str(), "mse" | "psnr") {
            return Err(Error::InvalidArgument(format!("unknown metric {m:?} (mse, psnr)")));
        }
    }
    let ck = Container::load(&a.ckpt)?;
    match precision(&ck.config)?.as_str() {
        "f64" => eval_as::<f64>(a, &ck),
        _ => eval_as::<f32>(a, &ck),
    }
}

fn eval_as<T: Scalar>(a: &EvalArgs, ck: &Container) -> Result<()> {
    let model = Model::<T>::from_checkpoint(ck)?;
    let fields = match &a.data {
        Some(m) => load_fields(m, Some(model.spec.metric_dim))?,
        None => {
            let mut d = model.config.data.clone();
            d.count = a.count;
            // held out: a seed stream distinct from training
            d.seed = d.seed.wrapping_add(1).wrapping_add(a.seed.wrapping_mul(7919));
            generate_toy(&d)?
        }
    };
    let report = evaluate_reconstruction(&model, &fields, a.t.unwrap_or(model.config.eval.t), a.seed)?;
    let want = |m: &str| a.metrics.iter().any(|x| x == m);
    println!("t = {}, fields = {}", report.t, report.fields.len());
    if want("mse") {
        println!("mse  {:.6}", report.mean_mse());
    }
    if want("psnr") {
        println!("psnr {:.3} dB", report.mean_psnr());
    }
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Cost(a) => cost(a),
        Command::Datagen(a) => datagen(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
