//! The `compdiff` command line: one subcommand per pipeline stage, every
//! artifact written next to a provenance sidecar.
//!
//! Exit codes: 0 success, 1 validation error (bad config, arguments or
//! inputs, failed checks), 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use compdiff::compose::CompositionSpec;
use compdiff::config::{ExperimentConfig, FieldKind, SamplerKind, VerifierKind};
use compdiff::data::{dataset_bytes, load_dataset, DatasetKind, Example};
use compdiff::eval::{self, ConceptVerifier};
use compdiff::model::{checkpoint_bytes, load_checkpoint, DenoiserField, DenoiserNet, ScheduleRef};
use compdiff::oracle::run_oracle_checks;
use compdiff::plot::{raster_grid_svg, scatter_svg};
use compdiff::provenance::{read_provenance, sha256_hex, write_with_provenance, InputRef, Provenance};
use compdiff::sample::{ddpm_sample, langevin_sample, samples_from_csv, SampleBatch};
use compdiff::schedule::{NoiseSchedule, ScheduleKind};
use compdiff::scorefield::ScoreField;
use compdiff::train::train_loop_with;
use compdiff::Error;

/// Overrides the default output directory (`out`).
pub const OUT_ENV: &str = "COMPDIFF_OUT";

#[derive(Debug, Parser)]
#[command(name = "compdiff", version, about = "Compositional diffusion: train, compose, sample, evaluate")]
pub struct Cli {
    /// Directory for artifacts [env: COMPDIFF_OUT, default: out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise schedule tables
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Synthetic datasets
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a denoiser, writing checkpoint.json and loss.csv
    Train(TrainArgs),
    /// Draw samples from a (composed) field, writing <name>.csv
    Sample(SampleArgs),
    /// Score samples against a composition, writing <name>.json
    Eval(EvalArgs),
    /// Run the analytic-vs-grid and composition identity suites
    OracleCheck(OracleArgs),
    /// Render a sample CSV to SVG
    Plot(PlotArgs),
    /// Re-run the command recorded in an artifact's sidecar and compare bytes
    Verify(VerifyArgs),
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCmd {
    /// Write schedule.csv (t, beta, alpha, alpha_bar, sigma columns)
    Dump(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, conflicts_with_all = ["kind", "steps"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<ScheduleKind>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Write dataset.csv (points2d) or dataset.blobs (blobs)
    Gen(DataArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset file; generated from the config when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Composition such as "c2:1.0,~c1:1.0" or "@0.5,-0.5:2"
    #[arg(long)]
    pub compose: Option<String>,
    /// Trained checkpoint [default: <out>/checkpoint.json]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "samples")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub compose: Option<String>,
    /// Reference sample CSV for the energy distance
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Dataset for the learned verifier; generated from the config when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "metrics")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also check the identities on this trained network
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Blob configs render rasters; otherwise a 2-D scatter
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Raster shape HxW, overriding the config
    #[arg(long)]
    pub raster: Option<String>,
    #[arg(long)]
    pub title: Option<String>,
    #[arg(long, default_value = "plot")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub artifact: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_)
            | Error::TimestepOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::UnknownLabel(_)
            | Error::InvalidComposition(_)
            | Error::Parse { .. }
            | Error::Config(_)
            | Error::Dataset(_)
            | Error::ScheduleMismatch { .. }
            | Error::CheckpointVersion { .. }
            | Error::CorruptCheckpoint(_) => CliError::Validation(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let out = cli.out_dir.clone().unwrap_or_else(default_out_dir);
    match run(cli.command, &out, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

struct Ctx {
    out: PathBuf,
    command: Vec<String>,
}

impl Ctx {
    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn prov(&self, artifact: &str) -> Provenance {
        Provenance::new(artifact, self.command.clone())
    }

    fn write(&self, file: &str, bytes: &[u8], prov: Provenance) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(Error::from)?;
        let path = self.path(file);
        write_with_provenance(&path, bytes, prov)?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

/// Run one parsed command, writing artifacts under `out`; `command` is the
/// argument list recorded in sidecars.
pub fn run(command: Command, out: &Path, recorded: Vec<String>) -> CliResult<()> {
    let ctx = Ctx { out: out.to_path_buf(), command: recorded };
    match command {
        Command::Schedule(ScheduleCmd::Dump(a)) => schedule_dump(&ctx, a),
        Command::Data(DataCmd::Gen(a)) => data_gen(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Eval(a) => evaluate(&ctx, a),
        Command::OracleCheck(a) => oracle_check(&ctx, a),
        Command::Plot(a) => plot(&ctx, a),
        Command::Verify(a) => verify(a),
    }
}

fn load_config(path: &Path) -> CliResult<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((ExperimentConfig::from_toml(&text)?, text))
}

fn schedule_dump(ctx: &Ctx, a: ScheduleArgs) -> CliResult<()> {
    let (sched, config) = match (&a.config, a.kind, a.steps) {
        (Some(path), _, _) => {
            let (cfg, text) = load_config(path)?;
            (cfg.noise_schedule()?, Some(text))
        }
        (None, kind, Some(steps)) => (NoiseSchedule::new(kind.unwrap_or(ScheduleKind::Cosine), steps)?, None),
        (None, _, None) => return Err(invalid("schedule dump needs --config or --steps")),
    };
    let mut prov = ctx.prov("schedule").with_details(ScheduleRef::of(&sched))?;
    if let Some(text) = config {
        prov = prov.with_config(&text);
    }
    ctx.write("schedule.csv", sched.to_csv().as_bytes(), prov)?;
    Ok(())
}

fn data_gen(ctx: &Ctx, a: DataArgs) -> CliResult<()> {
    let (mut cfg, text) = load_config(&a.config)?;
    if let Some(n) = a.count {
        cfg.dataset.count = n;
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    cfg.dataset.validate()?;
    let examples = cfg.dataset.generate()?;
    let bytes = dataset_bytes(&cfg.dataset, &examples)?;
    let file = match cfg.dataset.kind {
        DatasetKind::Points2d { .. } => "dataset.csv",
        DatasetKind::Blobs(_) => "dataset.blobs",
    };
    let prov = ctx.prov("dataset").with_config(&text).with_details(&cfg.dataset)?;
    ctx.write(file, &bytes, prov)?;
    Ok(())
}

fn dataset_for(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<(Vec<Example>, Option<InputRef>)> {
    match data {
        Some(p) => Ok((load_dataset(p)?, Some(InputRef::of_file(p)?))),
        None => Ok((cfg.dataset.generate()?, None)),
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let (cfg, text) = load_config(&a.config)?;
    let mut tc = cfg.train_config()?.clone();
    if let Some(s) = a.steps {
        tc.steps = s;
        tc.validate()?;
    }
    let (examples, input) = dataset_for(&cfg, a.data.as_deref())?;
    let sched = cfg.noise_schedule()?;
    let every = (tc.steps / 10).max(1);
    let mut window = 0.0;
    let outcome = train_loop_with(&tc, cfg.denoiser_config(), &examples, &sched, |step, loss| {
        window += loss;
        if step % every == 0 {
            eprintln!("step {step}/{} loss {:.5}", tc.steps, window / every as f64);
            window = 0.0;
        }
    })?;
    let details = serde_json::json!({
        "train": tc,
        "final_loss": outcome.checkpoint.meta.loss,
        "null_fraction": outcome.null_fraction,
    });
    let with_input = |p: Provenance| match &input {
        Some(i) => p.with_input(i.clone()),
        None => p,
    };
    let prov = with_input(ctx.prov("checkpoint").with_config(&text).with_details(&details)?);
    ctx.write("checkpoint.json", &checkpoint_bytes(&outcome.checkpoint)?, prov)?;
    let prov = with_input(ctx.prov("loss_curve").with_config(&text).with_details(&details)?);
    ctx.write("loss.csv", outcome.curve_csv().as_bytes(), prov)?;
    if !outcome.improved() {
        eprintln!("warning: smoothed loss did not decrease");
    }
    Ok(())
}

/// The field a config samples from, plus the checkpoint it was read from.
fn field_for(ctx: &Ctx, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<(Box<dyn ScoreField>, Option<InputRef>)> {
    match cfg.field.kind {
        FieldKind::Analytic => Ok((Box::new(cfg.analytic_field()?), None)),
        FieldKind::Trained => {
            let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("checkpoint.json"));
            let (net, _) = load_checkpoint(&path, Some(&cfg.schedule))?;
            let sched = cfg.noise_schedule()?;
            Ok((Box::new(DenoiserField::new(net, sched)), Some(InputRef::of_file(&path)?)))
        }
    }
}

fn spec_for(cfg: &ExperimentConfig, text: Option<&str>) -> CliResult<CompositionSpec> {
    match text {
        Some(t) => Ok(cfg.parse_spec(t)?),
        None => cfg.compose_spec()?.ok_or_else(|| invalid("no composition: pass --compose or set [compose] spec")),
    }
}

fn check_name(name: &str) -> CliResult<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(invalid(format!("invalid artifact name {name:?}")));
    }
    Ok(())
}

fn sample(ctx: &Ctx, a: SampleArgs) -> CliResult<()> {
    check_name(&a.name)?;
    let (mut cfg, text) = load_config(&a.config)?;
    if let Some(n) = a.n {
        cfg.sample.n = n;
    }
    if let Some(s) = a.seed {
        cfg.sample.seed = s;
    }
    cfg.validate()?;
    let spec = spec_for(&cfg, a.compose.as_deref())?;
    let (field, input) = field_for(ctx, &cfg, a.checkpoint.as_deref())?;
    let batch: SampleBatch = match cfg.sample.sampler {
        SamplerKind::Ddpm => ddpm_sample(field.as_ref(), &spec, &cfg.sample.ddpm_options())?,
        SamplerKind::Langevin => langevin_sample(field.as_ref(), &spec, &cfg.sample.langevin_options())?,
    };
    let terms: Vec<String> = spec.terms().iter().map(ToString::to_string).collect();
    let details = serde_json::json!({ "terms": terms, "sample": batch.provenance });
    let mut prov = ctx.prov("samples").with_config(&text).with_details(&details)?;
    if let Some(i) = &input {
        prov = prov.with_input(i.clone());
    }
    ctx.write(&format!("{}.csv", a.name), batch.to_csv().as_bytes(), prov.clone())?;
    if let Some(traj) = &batch.trajectory {
        let mut csv = String::from("t,row");
        for k in 1..=batch.samples.ncols() {
            csv.push_str(&format!(",x{k}"));
        }
        csv.push('\n');
        for (t, state) in traj.t.iter().zip(&traj.states) {
            for (i, row) in state.rows().into_iter().enumerate() {
                csv.push_str(&format!("{t},{i}"));
                for v in row {
                    csv.push_str(&format!(",{v:?}"));
                }
                csv.push('\n');
            }
        }
        prov.artifact = "trajectory".into();
        ctx.write(&format!("{}.trajectory.csv", a.name), csv.as_bytes(), prov)?;
    }
    Ok(())
}

fn read_samples(path: &Path) -> CliResult<ndarray::Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(samples_from_csv(&text)?)
}

fn evaluate(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    check_name(&a.name)?;
    let (cfg, text) = load_config(&a.config)?;
    let spec = spec_for(&cfg, a.compose.as_deref())?;
    let samples = read_samples(&a.samples)?;
    let concepts = eval::spec_concepts(&spec);
    let mut prov = ctx.prov("metrics").with_config(&text).with_input(InputRef::of_file(&a.samples)?);
    let verifier = match cfg.eval.verifier {
        VerifierKind::Analytic => ConceptVerifier::analytic(&cfg.dataset, cfg.eval.radius, cfg.eval.tau)?,
        VerifierKind::Learned => {
            let (examples, input) = dataset_for(&cfg, a.data.as_deref())?;
            if let Some(i) = input {
                prov = prov.with_input(i);
            }
            let grid = match &cfg.dataset.kind {
                DatasetKind::Blobs(g) => Some(g.clone()),
                DatasetKind::Points2d { .. } => None,
            };
            let mut models = Vec::new();
            for (label, _) in &concepts {
                if models.iter().any(|(l, _)| l == label) {
                    continue;
                }
                let m = eval::train_concept_classifier(&examples, label, grid.as_ref(), cfg.eval.radius, cfg.eval.classifier_seed)?;
                models.push((label.clone(), m));
            }
            ConceptVerifier::Learned(models)
        }
    };
    let mut metrics = eval::accuracy(samples.view(), &concepts, &verifier)?;
    if let Some(r) = &a.reference {
        let reference = read_samples(r)?;
        metrics.energy_distance = Some(eval::energy_distance(samples.view(), reference.view())?);
        prov = prov.with_input(InputRef::of_file(r)?);
    }
    let prov = prov.with_details(serde_json::json!({ "spec": spec.to_string() }))?;
    let mut json = serde_json::to_vec_pretty(&metrics).map_err(Error::from)?;
    json.push(b'\n');
    ctx.write(&format!("{}.json", a.name), &json, prov)?;
    println!("accuracy {:.4} over {} samples ({} verifier)", metrics.accuracy, metrics.n, metrics.verifier_kind);
    Ok(())
}

fn oracle_check(ctx: &Ctx, a: OracleArgs) -> CliResult<()> {
    let (cfg, text) = load_config(&a.config)?;
    let analytic = cfg.analytic_field()?;
    let (net_field, tag, input): (DenoiserField, String, Option<InputRef>) = match &a.checkpoint {
        Some(p) => {
            let (net, _) = load_checkpoint(p, Some(&cfg.schedule))?;
            (DenoiserField::new(net, cfg.noise_schedule()?), "network".into(), Some(InputRef::of_file(p)?))
        }
        None => {
            let net = DenoiserNet::init(cfg.denoiser_config(), a.seed)?;
            (DenoiserField::new(net, cfg.noise_schedule()?), "network (untrained)".into(), None)
        }
    };
    let report = run_oracle_checks(&analytic, Some((&net_field, &tag)), a.seed)?;
    let table = report.table();
    print!("{table}");
    let mut prov = ctx.prov("oracle_check").with_config(&text).with_details(serde_json::json!({
        "seed": a.seed,
        "passed": report.all_passed(),
    }))?;
    if let Some(i) = input {
        prov = prov.with_input(i);
    }
    ctx.write("oracle_check.txt", table.as_bytes(), prov)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(invalid("oracle check failed"))
    }
}

fn parse_raster(text: &str) -> CliResult<(usize, usize)> {
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(|| invalid("--raster expects HxW"))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| invalid(format!("bad raster size {text:?}")));
    Ok((parse(h)?, parse(w)?))
}

fn plot(ctx: &Ctx, a: PlotArgs) -> CliResult<()> {
    check_name(&a.name)?;
    let samples = read_samples(&a.samples)?;
    let mut prov = ctx.prov("plot").with_input(InputRef::of_file(&a.samples)?);
    let mut raster = a.raster.as_deref().map(parse_raster).transpose()?;
    if let Some(path) = &a.config {
        let (cfg, text) = load_config(path)?;
        prov = prov.with_config(&text);
        if let (None, DatasetKind::Blobs(g)) = (raster, &cfg.dataset.kind) {
            raster = Some((g.height, g.width));
        }
    }
    let title = a.title.unwrap_or_else(|| a.samples.display().to_string());
    let svg = match raster {
        Some((h, w)) => raster_grid_svg(samples.view(), h, w, 64, &title)?,
        None => scatter_svg(samples.view(), &title)?,
    };
    ctx.write(&format!("{}.svg", a.name), svg.as_bytes(), prov)?;
    Ok(())
}

/// Replays the recorded command into a scratch directory and compares the
/// regenerated artifact (and its sidecar) with the original byte for byte.
fn verify(a: VerifyArgs) -> CliResult<()> {
    let prov = read_provenance(&a.artifact)?;
    let original = std::fs::read(&a.artifact).map_err(Error::from)?;
    if sha256_hex(&original) != prov.output_sha256 {
        return Err(invalid(format!("{} does not match its recorded digest", a.artifact.display())));
    }
    let mut argv = vec!["compdiff".to_string()];
    argv.extend(prov.command.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| invalid(format!("recorded command does not parse: {e}")))?;
    if matches!(cli.command, Command::Verify(_)) {
        return Err(invalid("cannot verify a verify command"));
    }
    let scratch = tempfile::tempdir().map_err(Error::from)?;
    // a trained field defaults to <out>/checkpoint.json; replay against the original
    let command = match cli.command {
        Command::Sample(mut s) if s.checkpoint.is_none() => {
            let orig_out = cli.out_dir.clone().unwrap_or_else(default_out_dir);
            let ck = orig_out.join("checkpoint.json");
            if ck.exists() {
                s.checkpoint = Some(ck);
            }
            Command::Sample(s)
        }
        other => other,
    };
    let result = run(command, scratch.path(), prov.command.clone());
    if let Err(e) = result {
        if !(prov.artifact == "oracle_check" && matches!(e, CliError::Validation(_))) {
            return Err(e);
        }
    }
    let name = a.artifact.file_name().ok_or_else(|| invalid("artifact path has no file name"))?;
    let regenerated = std::fs::read(scratch.path().join(name)).map_err(Error::from)?;
    let sidecar = compdiff::provenance::sidecar_path(&a.artifact);
    let sidecar_again = std::fs::read(compdiff::provenance::sidecar_path(scratch.path().join(name))).map_err(Error::from)?;
    let same_sidecar = std::fs::read(&sidecar).map_err(Error::from)? == sidecar_again;
    if regenerated == original && same_sidecar {
        println!("identical: {} ({})", a.artifact.display(), prov.output_sha256);
        Ok(())
    } else {
        Err(invalid(format!(
            "regenerated {} differs (artifact identical: {}, sidecar identical: {same_sidecar})",
            a.artifact.display(),
            regenerated == original
        )))
    }
}
