//! The `treecf` command line.
//!
//! Machine-readable output goes to stdout and diagnostics to stderr. Exit
//! codes: 0 on success, 1 for usage errors (bad flags, missing input files),
//! 2 for failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::blackbox::{
    accuracy, train_logistic, train_mlp, BlackBox, LogisticConfig, MlpConfig, ReferenceModel,
    RemoteModel,
};
use crate::dataset::{load_dataset, Dataset, Instance};
use crate::error::Error;
use crate::experiment::{ModelKind, Setup};
use crate::latent::{train_vae, VaeConfig, VaeModel};
use crate::metrics::benchmark;
use crate::recourse::{Explainer, Explanation, Overrides, RecourseConfig, Session, SigmaSource};
use crate::service::{self, parse_anchor_values, AppState, ServiceConfig};
use crate::synthetic::SyntheticKind;
use crate::visual::{render_contrast, DEFAULT_KERNEL_SIGMA};

pub const CLI_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "treecf",
    version,
    about = "Counterfactual explanations from local decision-tree surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a reference classifier and save it as JSON.
    TrainBlackbox(TrainBlackboxArgs),
    /// Train the latent-space VAE and save it as JSON.
    TrainVae(TrainVaeArgs),
    /// Explain one instance and print the explanation document.
    Explain(ExplainArgs),
    /// Explain a batch of balanced anchors and report aggregate metrics.
    Benchmark(BenchmarkArgs),
    /// Render a pixel contrast overlay from an explanation document.
    RenderContrast(RenderArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV data file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// JSON schema file describing every column.
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Debug, Args)]
struct TrainBlackboxArgs {
    #[command(flatten)]
    data: DataArgs,
    /// logistic or mlp
    #[arg(long, default_value = "logistic")]
    kind: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainVaeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Use the wide architecture intended for pixel inputs.
    #[arg(long)]
    images: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Neighborhood size, split evenly between the two classes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_search: Option<usize>,
    /// Margin divisor for realization noise.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_samples_leaf: Option<usize>,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    contrast_class: Option<usize>,
    /// training or neighborhood
    #[arg(long)]
    sigma_source: Option<String>,
}

impl ConfigArgs {
    fn build(&self, seed: u64) -> Result<RecourseConfig, CliError> {
        let mut c = RecourseConfig {
            seed,
            ..RecourseConfig::default()
        };
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(v) = self.max_search {
            c.max_search = v;
        }
        if let Some(m) = self.m {
            c.m = m;
        }
        if let Some(d) = self.max_depth {
            c.max_depth = d;
        }
        if let Some(v) = self.min_samples_leaf {
            c.min_samples_leaf = v;
        }
        c.prune = !self.no_prune;
        c.contrast_class = self.contrast_class;
        if let Some(s) = &self.sigma_source {
            c.sigma_source = match s.as_str() {
                "training" => SigmaSource::Training,
                "neighborhood" => SigmaSource::Neighborhood,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown sigma source '{other}' (expected training or neighborhood)"
                    )))
                }
            };
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct ArtifactArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Saved model file, or an http(s) URL of a remote prediction endpoint.
    #[arg(long)]
    model: String,
    /// Class count of a remote model; defaults to the data's label count.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    vae: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Row of the data file to explain.
    #[arg(long, conflicts_with = "values", required_unless_present = "values")]
    index: Option<usize>,
    /// Comma-separated feature values in schema order; categories by name.
    #[arg(long)]
    values: Option<String>,
    /// JSON file with per-feature cost and mutability overrides.
    #[arg(long)]
    overrides: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// Built-in dataset, used unless --data and --schema are given.
    #[arg(long, default_value = "blobs")]
    synthetic: String,
    #[arg(long, requires = "schema")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    schema: Option<PathBuf>,
    /// Black box trained for the run: logistic or mlp.
    #[arg(long, default_value = "logistic")]
    model: String,
    #[arg(long, default_value_t = 100)]
    anchors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record per-anchor latency (makes reports run-dependent).
    #[arg(long)]
    timing: bool,
    /// Write per-anchor records as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Explanation document produced by `explain`.
    #[arg(long)]
    explanation: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Which counterfactual to render: 0 is the best, i >= 1 the i-th diverse one.
    #[arg(long, default_value_t = 0)]
    counterfactual: usize,
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIGMA)]
    kernel_sigma: f64,
    #[arg(long, default_value_t = 8)]
    zoom: usize,
    /// Intensity that maps to white in the grayscale base image.
    #[arg(long, default_value_t = 16.0)]
    max_intensity: f64,
    /// Color overlay (PPM).
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale PP mask (PGM).
    #[arg(long)]
    pp_out: Option<PathBuf>,
    /// Optional grayscale PN mask (PGM).
    #[arg(long)]
    pn_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 1800)]
    idle_timeout_secs: u64,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

/// Runs the command line with process stdio and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the command line against the given output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::TrainBlackbox(a) => train_blackbox(a, out),
        Command::TrainVae(a) => train_vae_cmd(a, out),
        Command::Explain(a) => explain(a, out),
        Command::Benchmark(a) => benchmark_cmd(a, out),
        Command::RenderContrast(a) => render(a, out),
        Command::Serve(a) => serve(a, err),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            let _ = writeln!(err, "error: {message}");
            1
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    writeln!(out, "{text}").map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))
}

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    require_file(&args.schema)?;
    require_file(&args.data)?;
    Ok(load_dataset(&args.data, &args.schema)?)
}

fn parse_model_kind(s: &str) -> CliResult<ModelKind> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

#[derive(Serialize)]
struct TrainReport {
    schema_version: u32,
    artifact: &'static str,
    kind: String,
    rows: usize,
    epochs: usize,
    final_loss: Option<f64>,
    train_accuracy: Option<f64>,
    out: String,
}

fn train_blackbox(a: TrainBlackboxArgs, out: &mut dyn Write) -> CliResult<()> {
    let kind = parse_model_kind(&a.kind)?;
    let data = load_data(&a.data)?;
    let (model, losses) = match kind {
        ModelKind::Logistic => {
            let mut c = LogisticConfig {
                seed: a.seed,
                ..LogisticConfig::default()
            };
            c.epochs = a.epochs.unwrap_or(c.epochs);
            let (m, l) = train_logistic(&data, &c)?;
            (ReferenceModel::Logistic(m), l)
        }
        ModelKind::Mlp => {
            let mut c = MlpConfig {
                seed: a.seed,
                ..MlpConfig::default()
            };
            c.epochs = a.epochs.unwrap_or(c.epochs);
            let (m, l) = train_mlp(&data, &c)?;
            (ReferenceModel::Mlp(m), l)
        }
    };
    model.save(&a.out)?;
    print_json(
        out,
        &TrainReport {
            schema_version: CLI_SCHEMA_VERSION,
            artifact: "blackbox",
            kind: kind.to_string(),
            rows: data.len(),
            epochs: losses.len(),
            final_loss: losses.last().copied(),
            train_accuracy: Some(accuracy(&model, &data)?),
            out: a.out.display().to_string(),
        },
    )
}

fn train_vae_cmd(a: TrainVaeArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let width = data.encoder().width();
    let mut config = if a.images {
        VaeConfig::for_images(width)
    } else {
        VaeConfig::for_width(width)
    };
    config.seed = a.seed;
    config.epochs = a.epochs.unwrap_or(config.epochs);
    let (vae, losses) = train_vae(&data, &config)?;
    vae.save(&a.out)?;
    print_json(
        out,
        &TrainReport {
            schema_version: CLI_SCHEMA_VERSION,
            artifact: "vae",
            kind: serde_json::to_value(config.preset)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            rows: data.len(),
            epochs: losses.len(),
            final_loss: losses.last().copied(),
            train_accuracy: None,
            out: a.out.display().to_string(),
        },
    )
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

fn load_explainer(a: &ArtifactArgs) -> CliResult<Explainer> {
    let data = load_data(&a.data)?;
    let model: Arc<dyn BlackBox> = if is_url(&a.model) {
        let classes = a.classes.unwrap_or_else(|| data.class_count().max(2));
        Arc::new(RemoteModel::new(a.model.clone(), classes))
    } else {
        require_file(Path::new(&a.model))?;
        Arc::new(ReferenceModel::load(&a.model)?)
    };
    require_file(&a.vae)?;
    let vae = VaeModel::load(&a.vae)?;
    Ok(Explainer::new(model, Arc::new(data), Arc::new(vae))?)
}

fn split_values(text: &str) -> Value {
    Value::Array(
        text.split(',')
            .map(|t| {
                let t = t.trim();
                match t.parse::<f64>() {
                    Ok(v) if v.is_finite() => serde_json::json!(v),
                    _ => Value::String(t.to_string()),
                }
            })
            .collect(),
    )
}

fn explain(a: ExplainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = a.config.build(a.seed)?;
    let overrides: Option<Overrides> = match &a.overrides {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(serde_json::from_str(&text).map_err(Error::from)?)
        }
        None => None,
    };
    let explainer = load_explainer(&a.artifacts)?;
    let x = match (a.index, &a.values) {
        (Some(i), _) => {
            if i >= explainer.pool().len() {
                return Err(CliError::Usage(format!(
                    "--index {i} is out of range for {} rows",
                    explainer.pool().len()
                )));
            }
            explainer.pool().instance(i)
        }
        (None, Some(v)) => {
            Instance::new(parse_anchor_values(explainer.schema(), &split_values(v))?)
        }
        (None, None) => unreachable!("clap requires --index or --values"),
    };
    let mut session = Session::start(&explainer, &x, &config)?;
    if let Some(o) = overrides.filter(|o| !o.is_empty()) {
        session.what_if(&explainer, &o)?;
    }
    print_json(out, session.explanation())
}

fn benchmark_cmd(a: BenchmarkArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = a.config.build(a.seed)?;
    let model_kind = parse_model_kind(&a.model)?;
    if a.anchors == 0 {
        return Err(CliError::Usage("--anchors must be at least 1".into()));
    }
    let setup = match (&a.data, &a.schema) {
        (Some(data), Some(schema)) => {
            let data = load_data(&DataArgs {
                data: data.clone(),
                schema: schema.clone(),
            })?;
            Setup::from_dataset(&data, model_kind, None, a.seed)?
        }
        _ => {
            let kind: SyntheticKind = a
                .synthetic
                .parse()
                .map_err(|e: Error| CliError::Usage(e.to_string()))?;
            Setup::synthetic(kind, model_kind, a.seed)?
        }
    };
    let anchors = setup.anchors(a.anchors, a.seed)?;
    let report = benchmark(&anchors, &setup.explainer, &config, a.timing)?;
    if let Some(path) = &a.csv {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    writeln!(out, "{}", report.summary_json()?)
        .map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))
}

#[derive(Serialize)]
struct RenderReport {
    schema_version: u32,
    width: usize,
    height: usize,
    pp_pixels: usize,
    pn_pixels: usize,
    scale: f64,
    out: String,
}

fn render(a: RenderArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.explanation)?;
    let text = std::fs::read_to_string(&a.explanation).map_err(|e| Error::io(&a.explanation, e))?;
    let e: Explanation = serde_json::from_str(&text).map_err(Error::from)?;
    let cf = match a.counterfactual {
        0 => &e.best,
        i => e.diverse.get(i - 1).ok_or_else(|| {
            CliError::Usage(format!(
                "--counterfactual {i} exceeds the {} diverse counterfactuals",
                e.diverse.len()
            ))
        })?,
    };
    if a.max_intensity.is_nan() || a.max_intensity <= 0.0 {
        return Err(CliError::Usage("--max-intensity must be positive".into()));
    }
    let x = &e.anchor.values;
    let overlay = render_contrast(x, &cf.x_prime.values, a.width, a.height, a.kernel_sigma)?;
    let base: Vec<f64> = x.iter().map(|v| v / a.max_intensity).collect();
    overlay.save_ppm(&a.out, Some(&base), a.zoom)?;
    for (path, mask) in [(&a.pp_out, &overlay.pp_mask), (&a.pn_out, &overlay.pn_mask)] {
        if let Some(path) = path {
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
            );
            overlay
                .write_pgm(&mut file, mask, a.zoom)
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    let count = |p| overlay.provenance.iter().filter(|&&q| q == p).count();
    print_json(
        out,
        &RenderReport {
            schema_version: CLI_SCHEMA_VERSION,
            width: a.width,
            height: a.height,
            pp_pixels: count(crate::visual::Provenance::Pp),
            pn_pixels: count(crate::visual::Provenance::Pn),
            scale: overlay.scale,
            out: a.out.display().to_string(),
        },
    )
}

fn serve(a: ServeArgs, err: &mut dyn Write) -> CliResult<()> {
    let explainer = Arc::new(load_explainer(&a.artifacts)?);
    let state = AppState::new(
        explainer,
        ServiceConfig {
            idle_timeout: Duration::from_secs(a.idle_timeout_secs),
            ..ServiceConfig::default()
        },
    );
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::io(&a.addr, e))?;
        let local = listener.local_addr().map_err(|e| Error::io(&a.addr, e))?;
        let _ = writeln!(err, "listening on http://{local}");
        service::serve(listener, state)
            .await
            .map_err(|e| Error::io(&a.addr, e))?;
        Ok(())
    })
}
